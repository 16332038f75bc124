use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A joint probability table over symbol pairs `(a, b)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscreteToyJoint {
    table: Vec<Vec<f64>>,
}

impl DiscreteToyJoint {
    pub fn new(table: Vec<Vec<f64>>) -> Result<Self> {
        let rows = table.len();
        let cols = table.first().map_or(0, Vec::len);
        if rows == 0 || cols == 0 || table.iter().any(|r| r.len() != cols) {
            return Err(Error::Validation("table must be a nonempty rectangle".into()));
        }
        if table.iter().flatten().any(|&p| !(p >= 0.0) || !p.is_finite()) {
            return Err(Error::Validation("entries must be finite and nonnegative".into()));
        }
        let total: f64 = table.iter().flatten().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Validation(format!("entries sum to {total}, not 1")));
        }
        Ok(DiscreteToyJoint { table })
    }

    /// `p(a, b) = mass_on_diagonal·δ_ab/n + (1 − mass_on_diagonal)/n²`.
    pub fn noisy_copy(n: usize, mass_on_diagonal: f64) -> Result<Self> {
        if n == 0 || !(0.0..=1.0).contains(&mass_on_diagonal) {
            return Err(Error::Validation("need n > 0 and diagonal mass in [0, 1]".into()));
        }
        let off = (1.0 - mass_on_diagonal) / (n * n) as f64;
        let table = (0..n)
            .map(|a| {
                (0..n)
                    .map(|b| if a == b { mass_on_diagonal / n as f64 + off } else { off })
                    .collect()
            })
            .collect();
        Self::new(table)
    }

    pub fn table(&self) -> &[Vec<f64>] {
        &self.table
    }

    pub fn num_a(&self) -> usize {
        self.table.len()
    }

    pub fn num_b(&self) -> usize {
        self.table[0].len()
    }

    pub fn marginal_a(&self) -> Vec<f64> {
        self.table.iter().map(|r| r.iter().sum()).collect()
    }

    pub fn marginal_b(&self) -> Vec<f64> {
        (0..self.num_b())
            .map(|b| self.table.iter().map(|r| r[b]).sum())
            .collect()
    }

    /// Draws `(a, b)` from the joint.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (usize, usize) {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut last = (0, 0);
        for (a, row) in self.table.iter().enumerate() {
            for (b, &p) in row.iter().enumerate() {
                if p > 0.0 {
                    acc += p;
                    last = (a, b);
                    if u < acc {
                        return (a, b);
                    }
                }
            }
        }
        last
    }

    /// Draws `b` from its marginal.
    pub fn sample_b<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let m = self.marginal_b();
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut last = 0;
        for (b, p) in m.iter().enumerate() {
            if *p > 0.0 {
                acc += p;
                last = b;
                if u < acc {
                    return b;
                }
            }
        }
        last
    }
}

/// Mutual information of the table in nats, by exact enumeration.
pub fn exact_mi(joint: &DiscreteToyJoint) -> f64 {
    let pa = joint.marginal_a();
    let pb = joint.marginal_b();
    let mut mi = 0.0;
    for (a, row) in joint.table().iter().enumerate() {
        for (b, &p) in row.iter().enumerate() {
            if p > 0.0 {
                mi += p * (p / (pa[a] * pb[b])).ln();
            }
        }
    }
    mi.max(0.0)
}
