//! Threshold metrics, identification accuracy and score histograms.

use std::collections::BTreeMap;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{dot, Matrix};

/// Cosine similarities of genuine and imposter pairs.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreSet {
    pub genuine_scores: Vec<f64>,
    pub imposter_scores: Vec<f64>,
}

impl ScoreSet {
    pub fn new(genuine_scores: Vec<f64>, imposter_scores: Vec<f64>) -> Result<Self> {
        let s = ScoreSet {
            genuine_scores,
            imposter_scores,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        // cosine of unit vectors can overshoot 1 by a few ulps
        let tol = 1e-12;
        for &x in self.genuine_scores.iter().chain(&self.imposter_scores) {
            if !(x >= -1.0 - tol && x <= 1.0 + tol) {
                return Err(Error::Protocol(format!("score {x} lies outside [-1, 1]")));
            }
        }
        Ok(())
    }

    fn require_both(&self) -> Result<()> {
        if self.genuine_scores.is_empty() || self.imposter_scores.is_empty() {
            return Err(Error::Protocol(format!(
                "need genuine and imposter scores, got {} and {}",
                self.genuine_scores.len(),
                self.imposter_scores.len()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verification {
    pub accuracy: f64,
    pub eer: f64,
    /// Pairs scoring strictly above this are accepted.
    pub threshold: f64,
}

fn sorted(v: &[f64]) -> Vec<f64> {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s
}

/// Candidate thresholds: one below every score, the midpoint of each pair of
/// adjacent distinct sorted scores, and one above every score. Ascending.
pub fn candidate_thresholds(scores: &ScoreSet) -> Vec<f64> {
    let mut all = sorted(&[scores.genuine_scores.as_slice(), &scores.imposter_scores].concat());
    all.dedup();
    let mut t = Vec::with_capacity(all.len() + 1);
    if let (Some(&lo), Some(&hi)) = (all.first(), all.last()) {
        t.push(lo - 1.0);
        t.extend(all.windows(2).map(|w| 0.5 * (w[0] + w[1])));
        t.push(hi + 1.0);
    }
    t
}

/// Number of entries of ascending `s` that are `> t`.
fn count_above(s: &[f64], t: f64) -> usize {
    s.len() - s.partition_point(|&x| x <= t)
}

/// Best accuracy over [`candidate_thresholds`] (lowest threshold on ties) and
/// the interpolated equal error rate.
pub fn verification_metrics(scores: &ScoreSet) -> Result<Verification> {
    scores.require_both()?;
    let g = sorted(&scores.genuine_scores);
    let i = sorted(&scores.imposter_scores);
    let total = g.len() + i.len();
    let mut best: Option<(usize, f64)> = None;
    for t in candidate_thresholds(scores) {
        let correct = count_above(&g, t) + (i.len() - count_above(&i, t));
        if best.is_none_or(|(c, _)| correct > c) {
            best = Some((correct, t));
        }
    }
    let (correct, threshold) = best.expect("nonempty");
    Ok(Verification {
        accuracy: correct as f64 / total as f64,
        eer: equal_error_rate(&g, &i),
        threshold,
    })
}

/// ROC vertices `(FAR, FRR)` over unique score values, from "reject all" to
/// "accept all". Inputs ascending.
fn roc(g: &[f64], i: &[f64]) -> Vec<(f64, f64)> {
    let (ng, ni) = (g.len() as f64, i.len() as f64);
    let mut all = [g, i].concat();
    all.sort_by(|a, b| b.total_cmp(a));
    all.dedup();
    let mut pts = vec![(0.0, 1.0)];
    for &s in &all {
        // accept everything scoring >= s
        let acc_g = g.len() - g.partition_point(|&x| x < s);
        let acc_i = i.len() - i.partition_point(|&x| x < s);
        pts.push((acc_i as f64 / ni, 1.0 - acc_g as f64 / ng));
    }
    pts
}

fn equal_error_rate(g: &[f64], i: &[f64]) -> f64 {
    let pts = roc(g, i);
    for w in pts.windows(2) {
        let (f0, r0) = w[0];
        let (f1, r1) = w[1];
        let d0 = f0 - r0;
        let d1 = f1 - r1;
        if d0 == 0.0 {
            return f0;
        }
        if d0 < 0.0 && d1 >= 0.0 {
            let a = d0 / (d0 - d1);
            return f0 + a * (f1 - f0);
        }
    }
    // unreachable: the walk ends at (1, 0)
    pts.last().map_or(0.5, |p| p.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TarAtFar {
    pub far_target: f64,
    pub threshold: f64,
    pub tar: f64,
    pub far: f64,
}

/// For each target, the smallest threshold whose empirical false-accept rate
/// (imposters scoring strictly above it) does not exceed the target.
pub fn tar_at_far(scores: &ScoreSet, far_targets: &[f64]) -> Result<Vec<TarAtFar>> {
    scores.require_both()?;
    let g = sorted(&scores.genuine_scores);
    let i = sorted(&scores.imposter_scores);
    let ni = i.len();
    let mut out = Vec::with_capacity(far_targets.len());
    for &target in far_targets {
        if !(0.0..=1.0).contains(&target) {
            return Err(Error::Protocol(format!("FAR target {target} outside [0, 1]")));
        }
        if target > 0.0 && (ni as f64) < 10.0 / target {
            warn!("only {ni} imposter scores to resolve FAR {target}");
        }
        let allowed = (target * ni as f64 + 1e-9).floor() as usize;
        // the (allowed+1)-th largest imposter score; below every score if all may pass
        let threshold = if allowed >= ni { -2.0 } else { i[ni - 1 - allowed] };
        out.push(TarAtFar {
            far_target: target,
            threshold,
            tar: count_above(&g, threshold) as f64 / g.len() as f64,
            far: count_above(&i, threshold) as f64 / ni as f64,
        });
    }
    Ok(out)
}

/// Nearest-gallery identification accuracy per probe tier.
///
/// Rows of both embedding matrices must be unit norm. Ties go to the lowest
/// gallery index.
pub fn rank1_identification(
    gallery: &Matrix,
    gallery_identity: &[usize],
    probes: &Matrix,
    probe_identity: &[usize],
    probe_tier: &[usize],
) -> Result<BTreeMap<usize, f64>> {
    if gallery.rows() != gallery_identity.len()
        || probes.rows() != probe_identity.len()
        || probes.rows() != probe_tier.len()
    {
        return Err(Error::Dimension("embeddings and labels disagree in length".into()));
    }
    if gallery.rows() == 0 || probes.rows() == 0 {
        return Err(Error::Protocol("empty gallery or probe set".into()));
    }
    if gallery.cols() != probes.cols() {
        return Err(Error::Dimension("gallery and probe widths differ".into()));
    }
    for id in probe_identity {
        if !gallery_identity.contains(id) {
            return Err(Error::Protocol(format!("probe identity {id} has no gallery entry")));
        }
    }
    let mut hits: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for (p, row) in probes.row_iter().enumerate() {
        let mut best = (0, f64::NEG_INFINITY);
        for (k, g) in gallery.row_iter().enumerate() {
            let s = dot(row, g);
            if s > best.1 {
                best = (k, s);
            }
        }
        let e = hits.entry(probe_tier[p]).or_default();
        e.1 += 1;
        if gallery_identity[best.0] == probe_identity[p] {
            e.0 += 1;
        }
    }
    Ok(hits.into_iter().map(|(t, (h, n))| (t, h as f64 / n as f64)).collect())
}

/// Counts of `1 − score` distances in uniform bins over `[0, 2]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub bin_edges: Vec<f64>,
    pub genuine_counts: Vec<usize>,
    pub imposter_counts: Vec<usize>,
}

pub const HISTOGRAM_BINS: usize = 50;

fn bin_counts(scores: &[f64], bins: usize) -> Vec<usize> {
    let mut c = vec![0; bins];
    for &s in scores {
        let d = (1.0 - s).clamp(0.0, 2.0);
        let k = ((d / 2.0 * bins as f64) as usize).min(bins - 1);
        c[k] += 1;
    }
    c
}

pub fn histogram(scores: &ScoreSet, bins: usize) -> Result<Histogram> {
    if bins == 0 {
        return Err(Error::Protocol("histogram needs at least one bin".into()));
    }
    Ok(Histogram {
        bin_edges: (0..=bins).map(|k| 2.0 * k as f64 / bins as f64).collect(),
        genuine_counts: bin_counts(&scores.genuine_scores, bins),
        imposter_counts: bin_counts(&scores.imposter_scores, bins),
    })
}

impl Histogram {
    /// `Σ_b min(g_b / N_g, i_b / N_i)`; 1 for identical distributions, 0 for disjoint.
    pub fn overlap_coefficient(&self) -> f64 {
        let ng: usize = self.genuine_counts.iter().sum();
        let ni: usize = self.imposter_counts.iter().sum();
        if ng == 0 || ni == 0 {
            return 0.0;
        }
        self.genuine_counts
            .iter()
            .zip(&self.imposter_counts)
            .map(|(&g, &i)| (g as f64 / ng as f64).min(i as f64 / ni as f64))
            .sum::<f64>()
            .min(1.0)
    }

    pub fn write_csv<W: std::io::Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "bin_low,bin_high,genuine_count,imposter_count")?;
        for (k, w) in self.bin_edges.windows(2).enumerate() {
            writeln!(
                out,
                "{},{},{},{}",
                w[0], w[1], self.genuine_counts[k], self.imposter_counts[k]
            )?;
        }
        Ok(())
    }
}
