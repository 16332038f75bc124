use serde::{Deserialize, Serialize};

use super::matrix::{dot, norm, Matrix};
use crate::error::{Error, Result};

/// Inputs with a smaller norm cannot be normalized.
pub const MIN_NORM: f64 = 1e-12;

/// A unit-L2-norm embedding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    /// Wraps `values`, checking the unit-norm invariant to 1e-9.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        let n = norm(&values);
        if (n - 1.0).abs() > 1e-9 {
            return Err(Error::Parameter(format!("embedding norm is {n}, expected 1")));
        }
        Ok(EmbeddingVector(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn cosine(&self, other: &EmbeddingVector) -> f64 {
        dot(&self.0, &other.0)
    }
}

/// Normalizes `v`, returning the unit vector and the original norm.
pub fn l2_normalize(v: &[f64]) -> Result<(EmbeddingVector, f64)> {
    let n = norm(v);
    if !(n > MIN_NORM) || !n.is_finite() {
        return Err(Error::DegenerateVector { norm: n, min: MIN_NORM });
    }
    Ok((EmbeddingVector(v.iter().map(|x| x / n).collect()), n))
}

/// Applies the normalization Jacobian `(I − ẑẑᵀ)/‖v‖` to `upstream`.
pub fn l2_normalize_backward(unit: &[f64], input_norm: f64, upstream: &[f64]) -> Vec<f64> {
    let p = dot(unit, upstream);
    unit.iter()
        .zip(upstream)
        .map(|(z, g)| (g - p * z) / input_norm)
        .collect()
}

/// Row-wise [`l2_normalize`].
pub fn normalize_rows(m: &Matrix) -> Result<(Matrix, Vec<f64>)> {
    let mut out = m.clone();
    let mut norms = Vec::with_capacity(m.rows());
    for r in 0..m.rows() {
        let (u, n) = l2_normalize(m.row(r))?;
        out.row_mut(r).copy_from_slice(u.as_slice());
        norms.push(n);
    }
    Ok((out, norms))
}

pub fn normalize_rows_backward(unit: &Matrix, norms: &[f64], upstream: &Matrix) -> Result<Matrix> {
    if unit.shape() != upstream.shape() || norms.len() != unit.rows() {
        return Err(Error::Dimension(format!(
            "normalized rows {:?} vs upstream {:?}",
            unit.shape(),
            upstream.shape()
        )));
    }
    let mut out = upstream.clone();
    for (r, &n) in norms.iter().enumerate() {
        let g = l2_normalize_backward(unit.row(r), n, upstream.row(r));
        out.row_mut(r).copy_from_slice(&g);
    }
    Ok(out)
}
