//! Cosine critic, the pose-aware contrastive loss and the InfoNCE lower bound on
//! mutual information.
//!
//! For an anchor `a` with positive `p` and negatives `n_1 … n_k` the per-anchor
//! term is `−log softmax(a·p/τ, a·n_1/τ, …)[0]`: the denominator includes the
//! positive. Batches sum these terms over anchors.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{axpy, dot, norm, Matrix};
use crate::synth::{exact_mi, DiscreteToyJoint};

pub const DEFAULT_TEMPERATURE: f64 = 0.07;
const UNIT_TOL: f64 = 1e-9;

fn check_temperature(tau: f64) -> Result<()> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::Parameter(format!("temperature must be positive, got {tau}")));
    }
    Ok(())
}

fn check_unit_rows(m: &Matrix, what: &str) -> Result<()> {
    for (i, r) in m.row_iter().enumerate() {
        let n = norm(r);
        if (n - 1.0).abs() > UNIT_TOL {
            return Err(Error::Usage(format!("{what} row {i} has norm {n}")));
        }
    }
    Ok(())
}

/// `exp(a·b/τ)` for unit vectors.
pub fn critic_h(a: &[f64], b: &[f64], tau: f64) -> Result<f64> {
    check_temperature(tau)?;
    if a.len() != b.len() {
        return Err(Error::Dimension(format!("{} vs {}", a.len(), b.len())));
    }
    Ok((dot(a, b) / tau).exp())
}

/// Anchors with index-aligned positives and per-anchor negative sets.
#[derive(Clone, Debug)]
pub struct ContrastiveBatch {
    anchors: Matrix,
    positives: Matrix,
    negatives: Vec<Matrix>,
    temperature: f64,
}

impl ContrastiveBatch {
    pub fn new(anchors: Matrix, positives: Matrix, negatives: Vec<Matrix>, temperature: f64) -> Result<Self> {
        check_temperature(temperature)?;
        if anchors.shape() != positives.shape() || negatives.len() != anchors.rows() {
            return Err(Error::Dimension(format!(
                "anchors {:?}, positives {:?}, {} negative sets",
                anchors.shape(),
                positives.shape(),
                negatives.len()
            )));
        }
        check_unit_rows(&anchors, "anchor")?;
        check_unit_rows(&positives, "positive")?;
        for (i, n) in negatives.iter().enumerate() {
            if n.rows() == 0 {
                return Err(Error::Usage(format!("anchor {i} has no negatives")));
            }
            if n.cols() != anchors.cols() {
                return Err(Error::Dimension(format!("negative set {i} has width {}", n.cols())));
            }
            check_unit_rows(n, "negative")?;
        }
        Ok(ContrastiveBatch {
            anchors,
            positives,
            negatives,
            temperature,
        })
    }

    pub fn len(&self) -> usize {
        self.anchors.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.rows() == 0
    }
}

#[derive(Clone, Debug)]
pub struct PacOutput {
    pub loss: f64,
    pub per_anchor: Vec<f64>,
    pub grad_anchors: Matrix,
    pub grad_positives: Matrix,
    pub grad_negatives: Vec<Matrix>,
}

/// Loss and softmax weights of one anchor. `candidates[0]` is the positive.
///
/// Returns the per-anchor loss and `coef[j] = softmax_j − δ_j0`, so that
/// `∂loss/∂anchor = Σ_j coef[j]·c_j/τ` and `∂loss/∂c_j = coef[j]·anchor/τ`.
pub(crate) fn anchor_term<'a>(
    anchor: &[f64],
    candidates: impl Iterator<Item = &'a [f64]>,
    tau: f64,
    coef: &mut Vec<f64>,
) -> f64 {
    coef.clear();
    coef.extend(candidates.map(|c| dot(anchor, c) / tau));
    let (arg, max) = coef.iter().enumerate().fold(
        (0, f64::NEG_INFINITY),
        |(ai, m), (i, &x)| if x > m { (i, x) } else { (ai, m) },
    );
    // sum of exp(l - max) over everything but the maximum, so ln_1p stays exact near zero
    let rest: f64 = coef
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != arg)
        .map(|(_, l)| (l - max).exp())
        .sum();
    let loss = (max - coef[0]) + rest.ln_1p();
    let lse = max + rest.ln_1p();
    for l in coef.iter_mut() {
        *l = (*l - lse).exp();
    }
    coef[0] = -coef[1..].iter().sum::<f64>();
    loss
}

/// Summed per-anchor loss with exact gradients for every embedding.
pub fn pac_loss(batch: &ContrastiveBatch) -> Result<PacOutput> {
    let tau = batch.temperature;
    let (b, d) = batch.anchors.shape();
    let mut out = PacOutput {
        loss: 0.0,
        per_anchor: Vec::with_capacity(b),
        grad_anchors: Matrix::zeros(b, d),
        grad_positives: Matrix::zeros(b, d),
        grad_negatives: batch.negatives.iter().map(|n| Matrix::zeros(n.rows(), d)).collect(),
    };
    let mut coef = Vec::new();
    for i in 0..b {
        let a = batch.anchors.row(i);
        let negs = &batch.negatives[i];
        let cands = std::iter::once(batch.positives.row(i)).chain(negs.row_iter());
        let l = anchor_term(a, cands, tau, &mut coef);
        out.loss += l;
        out.per_anchor.push(l);
        let ga = out.grad_anchors.row_mut(i);
        axpy(coef[0] / tau, batch.positives.row(i), ga);
        for (j, n) in negs.row_iter().enumerate() {
            axpy(coef[j + 1] / tau, n, ga);
        }
        axpy(coef[0] / tau, a, out.grad_positives.row_mut(i));
        for j in 0..negs.rows() {
            axpy(coef[j + 1] / tau, a, out.grad_negatives[i].row_mut(j));
        }
    }
    Ok(out)
}

/// Both anchoring directions of the in-batch loss.
#[derive(Clone, Debug)]
pub struct TwoWayLoss {
    pub loss: f64,
    /// Frontal anchors against profile candidates.
    pub loss_frontal: f64,
    /// Profile anchors against frontal candidates.
    pub loss_profile: f64,
    pub grad_frontal: Matrix,
    pub grad_profile: Matrix,
}

/// One direction of the in-batch loss: anchor `i` contrasts `others[i]` against
/// every other row of `others`. Gradients accumulate into the two outputs.
fn in_batch_direction(
    anchors: &Matrix,
    others: &Matrix,
    tau: f64,
    grad_anchors: &mut Matrix,
    grad_others: &mut Matrix,
) -> f64 {
    let b = anchors.rows();
    let mut coef = Vec::with_capacity(b);
    let mut total = 0.0;
    for i in 0..b {
        let a = anchors.row(i);
        let order = std::iter::once(i).chain((0..b).filter(|&j| j != i));
        let cands = order.clone().map(|j| others.row(j));
        total += anchor_term(a, cands, tau, &mut coef);
        for (c, j) in coef.iter().zip(order) {
            axpy(c / tau, others.row(j), grad_anchors.row_mut(i));
            axpy(c / tau, a, grad_others.row_mut(j));
        }
    }
    total
}

/// In-batch loss summed over frontal and profile anchors. Row `i` of the two
/// matrices is a genuine pair; every other row is a negative.
pub fn pac_loss_in_batch(z_frontal: &Matrix, z_profile: &Matrix, tau: f64) -> Result<TwoWayLoss> {
    check_temperature(tau)?;
    if z_frontal.shape() != z_profile.shape() {
        return Err(Error::Dimension(format!(
            "frontal {:?} vs profile {:?}",
            z_frontal.shape(),
            z_profile.shape()
        )));
    }
    if z_frontal.rows() < 2 {
        return Err(Error::Usage("in-batch loss needs at least two pairs".into()));
    }
    check_unit_rows(z_frontal, "frontal")?;
    check_unit_rows(z_profile, "profile")?;
    let (b, d) = z_frontal.shape();
    let mut grad_frontal = Matrix::zeros(b, d);
    let mut grad_profile = Matrix::zeros(b, d);
    let loss_frontal = in_batch_direction(z_frontal, z_profile, tau, &mut grad_frontal, &mut grad_profile);
    let loss_profile = in_batch_direction(z_profile, z_frontal, tau, &mut grad_profile, &mut grad_frontal);
    Ok(TwoWayLoss {
        loss: loss_frontal + loss_profile,
        loss_frontal,
        loss_profile,
        grad_frontal,
        grad_profile,
    })
}

/// `ln(k) − loss` for a per-anchor loss with `k` negatives.
pub fn mi_lower_bound(loss_per_anchor: f64, k: usize) -> f64 {
    (k as f64).ln() - loss_per_anchor
}

/// One row of the toy study: mean over seeds of the per-anchor loss and bound.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MiBoundRow {
    pub k: usize,
    pub mean_loss: f64,
    pub bound: f64,
    pub bound_std_err: f64,
    pub exact_mi: f64,
}

/// Temperature at which the one-hot cosine critic is proportional to the density
/// ratio of a noisy-copy table (`p(a,a)` constant, off-diagonal constant).
pub fn matched_temperature(joint: &DiscreteToyJoint) -> Result<f64> {
    let pa = joint.marginal_a();
    let pb = joint.marginal_b();
    let t = joint.table();
    let ratio = |a: usize, b: usize| t[a][b] / (pa[a] * pb[b]);
    let on = ratio(0, 0);
    let off = if joint.num_b() > 1 { ratio(0, 1) } else { 0.0 };
    if !(on > off) || off <= 0.0 {
        return Err(Error::Parameter(
            "table needs a finite diagonal/off-diagonal density ratio above 1".into(),
        ));
    }
    Ok(1.0 / (on / off).ln())
}

fn one_hot(n: usize, i: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[i] = 1.0;
    v
}

/// Per-anchor loss of one batch of toy pairs: anchors are one-hot `a`, positives
/// one-hot `b` drawn jointly, `k` negatives one-hot draws from the `b` marginal.
pub fn toy_batch_loss<R: Rng + ?Sized>(
    joint: &DiscreteToyJoint,
    k: usize,
    batch_size: usize,
    tau: f64,
    rng: &mut R,
) -> Result<f64> {
    if k == 0 || batch_size == 0 {
        return Err(Error::Parameter("k and batch size must be positive".into()));
    }
    let dim = joint.num_a().max(joint.num_b());
    let mut anchors = Vec::with_capacity(batch_size);
    let mut positives = Vec::with_capacity(batch_size);
    let mut negatives = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let (a, b) = joint.sample(rng);
        anchors.push(one_hot(dim, a));
        positives.push(one_hot(dim, b));
        let rows: Vec<Vec<f64>> = (0..k).map(|_| one_hot(dim, joint.sample_b(rng))).collect();
        negatives.push(Matrix::from_rows(&rows)?);
    }
    let batch = ContrastiveBatch::new(
        Matrix::from_rows(&anchors)?,
        Matrix::from_rows(&positives)?,
        negatives,
        tau,
    )?;
    Ok(pac_loss(&batch)?.loss / batch_size as f64)
}

/// Mean bound and its standard error over `num_seeds` independent batches.
pub fn mi_bound_study(
    joint: &DiscreteToyJoint,
    k: usize,
    batch_size: usize,
    num_seeds: u64,
    base_seed: u64,
    tau: f64,
) -> Result<MiBoundRow> {
    if num_seeds < 2 {
        return Err(Error::Parameter("need at least two seeds for a standard error".into()));
    }
    let losses = (0..num_seeds)
        .map(|s| {
            let mut rng = crate::rng::seeded(base_seed.wrapping_add(s), k as u64);
            toy_batch_loss(joint, k, batch_size, tau, &mut rng)
        })
        .collect::<Result<Vec<f64>>>()?;
    let n = losses.len() as f64;
    let mean = losses.iter().sum::<f64>() / n;
    let var = losses.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok(MiBoundRow {
        k,
        mean_loss: mean,
        bound: mi_lower_bound(mean, k),
        bound_std_err: (var / n).sqrt(),
        exact_mi: exact_mi(joint),
    })
}
