#![allow(dead_code)]

use pacm::numeric::{normalize_rows, Matrix};
use pacm::rng::{seeded, DetRng};
use rand::Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> DetRng {
    seeded(seed, 0x7465_7374)
}

pub fn gaussian(rng: &mut DetRng, r: usize, c: usize) -> Matrix {
    Matrix::from_vec(r, c, (0..r * c).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
}

pub fn unit_rows(rng: &mut DetRng, r: usize, c: usize) -> Matrix {
    normalize_rows(&gaussian(rng, r, c)).unwrap().0
}

/// Loss `Σ c ⊙ m`, used to give every output coordinate a distinct upstream weight.
pub fn weighted_sum(c: &Matrix, m: &Matrix) -> f64 {
    c.as_slice().iter().zip(m.as_slice()).map(|(a, b)| a * b).sum()
}

/// Exhaustive scan: tries every threshold between adjacent distinct scores (plus
/// one below and one above all of them), counting with plain loops. Returns
/// `(accuracy, threshold, eer)`. Accept means `score > t`; the first (lowest)
/// best threshold wins.
pub fn brute_force_verification(genuine: &[f64], imposter: &[f64]) -> (f64, f64, f64) {
    let mut all: Vec<f64> = genuine.iter().chain(imposter).copied().collect();
    all.sort_by(|a, b| a.partial_cmp(b).unwrap());
    all.dedup();
    let mut thresholds = vec![all[0] - 1.0];
    thresholds.extend(all.windows(2).map(|w| 0.5 * (w[0] + w[1])));
    thresholds.push(all[all.len() - 1] + 1.0);
    let n = (genuine.len() + imposter.len()) as f64;
    let rates = |t: f64| {
        let fa = imposter.iter().filter(|&&s| s > t).count();
        let fr = genuine.iter().filter(|&&s| s <= t).count();
        (fa, fr)
    };
    let mut best = (-1.0, 0.0);
    let mut curve = Vec::with_capacity(thresholds.len());
    for &t in &thresholds {
        let (fa, fr) = rates(t);
        let acc = (n - (fa + fr) as f64) / n;
        if acc > best.0 {
            best = (acc, t);
        }
        curve.push((fa as f64 / imposter.len() as f64, fr as f64 / genuine.len() as f64));
    }
    // FAR falls and FRR rises along increasing thresholds; interpolate the crossing.
    let mut eer = f64::NAN;
    for w in curve.windows(2) {
        let (d0, d1) = (w[0].0 - w[0].1, w[1].0 - w[1].1);
        if d0 >= 0.0 && d1 <= 0.0 {
            eer = if d0 == d1 {
                w[0].0
            } else {
                let a = d0 / (d0 - d1);
                w[0].0 + a * (w[1].0 - w[0].0)
            };
            break;
        }
    }
    (best.0, best.1, eer)
}
