//! Verification, identification and score-distribution evaluation on held-out
//! identities.

mod metrics;

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::index::sample as sample_indices;
use serde::{Deserialize, Serialize};

pub use metrics::{
    candidate_thresholds, histogram, rank1_identification, tar_at_far, verification_metrics, Histogram, ScoreSet,
    TarAtFar, Verification, HISTOGRAM_BINS,
};

use crate::encoder::Encoders;
use crate::error::{Error, Result};
use crate::numeric::{dot, Matrix};
use crate::rng::seeded;
use crate::synth::{MultiviewDataset, SynthConfig, View};
use crate::trainer::TrainConfig;

/// A frontal/profile pair by position within each view's sample list.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledPair {
    pub frontal: usize,
    pub profile: usize,
    pub genuine: bool,
}

/// Unit embeddings of every sample of a dataset, frontal side through the
/// frontal encoder and profile side through the profile encoder.
#[derive(Clone, Debug)]
pub struct Embedded {
    pub frontal: Matrix,
    pub profile: Matrix,
    pub frontal_identity: Vec<usize>,
    pub profile_identity: Vec<usize>,
    pub profile_tier: Vec<usize>,
}

impl Embedded {
    pub fn new(encoders: &Encoders, dataset: &MultiviewDataset) -> Result<Self> {
        let all = |v: View| (0..dataset.samples(v).len()).collect::<Vec<_>>();
        let frontal = encoders.embed(View::Frontal, &dataset.features(View::Frontal, &all(View::Frontal)))?;
        let profile = encoders.embed(View::Profile, &dataset.features(View::Profile, &all(View::Profile)))?;
        Ok(Embedded {
            frontal,
            profile,
            frontal_identity: dataset.frontal().iter().map(|s| s.identity).collect(),
            profile_identity: dataset.profile().iter().map(|s| s.identity).collect(),
            profile_tier: dataset.profile().iter().map(|s| s.tier.unwrap_or(0)).collect(),
        })
    }

    pub fn score(&self, frontal: usize, profile: usize) -> f64 {
        dot(self.frontal.row(frontal), self.profile.row(profile))
    }

    pub fn score_pairs(&self, pairs: &[LabeledPair]) -> Result<ScoreSet> {
        if pairs.is_empty() {
            return Err(Error::Protocol("no pairs to score".into()));
        }
        let mut s = ScoreSet::default();
        for p in pairs {
            if p.frontal >= self.frontal.rows() || p.profile >= self.profile.rows() {
                return Err(Error::Protocol(format!(
                    "pair ({}, {}) is out of range",
                    p.frontal, p.profile
                )));
            }
            if p.genuine != (self.frontal_identity[p.frontal] == self.profile_identity[p.profile]) {
                return Err(Error::Protocol(format!(
                    "pair ({}, {}) is mislabeled",
                    p.frontal, p.profile
                )));
            }
            let x = self.score(p.frontal, p.profile);
            if p.genuine {
                s.genuine_scores.push(x);
            } else {
                s.imposter_scores.push(x);
            }
        }
        s.validate()?;
        Ok(s)
    }

    /// Every frontal/profile combination whose profile sample lies in `tier`.
    pub fn tier_scores(&self, tier: usize) -> Result<ScoreSet> {
        let mut s = ScoreSet::default();
        for (p, &t) in self.profile_tier.iter().enumerate() {
            if t != tier {
                continue;
            }
            for f in 0..self.frontal.rows() {
                let x = self.score(f, p);
                if self.frontal_identity[f] == self.profile_identity[p] {
                    s.genuine_scores.push(x);
                } else {
                    s.imposter_scores.push(x);
                }
            }
        }
        s.validate()?;
        Ok(s)
    }

    /// Rank-1 accuracy per tier with the first frontal sample of each identity
    /// as gallery and every profile sample as probe.
    pub fn rank1(&self) -> Result<BTreeMap<usize, f64>> {
        let mut seen = Vec::new();
        let mut rows = Vec::new();
        for (f, &id) in self.frontal_identity.iter().enumerate() {
            if !seen.contains(&id) {
                seen.push(id);
                rows.push(f);
            }
        }
        rank1_identification(
            &self.frontal.select_rows(&rows),
            &seen,
            &self.profile,
            &self.profile_identity,
            &self.profile_tier,
        )
    }
}

/// Cosine similarity of each pair's normalized embeddings.
pub fn score_pairs(encoders: &Encoders, dataset: &MultiviewDataset, pairs: &[LabeledPair]) -> Result<ScoreSet> {
    Embedded::new(encoders, dataset)?.score_pairs(pairs)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolConfig {
    pub folds: usize,
    pub genuine_per_fold: usize,
    pub imposter_per_fold: usize,
    pub far_targets: Vec<f64>,
    pub seed: u64,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig {
            folds: 10,
            genuine_per_fold: 300,
            imposter_per_fold: 300,
            far_targets: vec![1e-3, 1e-2],
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub fold: usize,
    pub accuracy: f64,
    pub eer: f64,
    /// Same-fold optimal threshold.
    pub threshold: f64,
    pub tar_at_far: Vec<TarAtFar>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub verification_accuracy: f64,
    pub verification_accuracy_std: f64,
    pub eer: f64,
    pub eer_std: f64,
    /// Mean TAR per FAR target, keyed by the target written as a decimal.
    pub tar_at_far: BTreeMap<String, f64>,
    pub rank1_per_tier: BTreeMap<usize, f64>,
    /// Over the pooled fold pairs.
    pub histogram: Histogram,
    pub overlap_coefficient: f64,
    /// Over every frontal/profile combination of each tier.
    pub overlap_per_tier: BTreeMap<usize, f64>,
    pub hardest_tier: usize,
    pub folds: Vec<FoldMetrics>,
    pub protocol: ProtocolConfig,
    pub dataset_config: SynthConfig,
    pub train_config: Option<TrainConfig>,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 || xs.iter().all(|&x| x == xs[0]) {
        return (if xs.is_empty() { 0.0 } else { mean }, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Sampled fold pairs, genuine first. Pairs are distinct within a fold.
pub fn fold_pairs(emb: &Embedded, protocol: &ProtocolConfig, fold: usize) -> Result<Vec<LabeledPair>> {
    let mut genuine = Vec::new();
    let mut imposter = Vec::new();
    for f in 0..emb.frontal.rows() {
        for p in 0..emb.profile.rows() {
            let g = emb.frontal_identity[f] == emb.profile_identity[p];
            let pair = LabeledPair {
                frontal: f,
                profile: p,
                genuine: g,
            };
            if g {
                genuine.push(pair);
            } else {
                imposter.push(pair);
            }
        }
    }
    if protocol.genuine_per_fold > genuine.len() || protocol.imposter_per_fold > imposter.len() {
        return Err(Error::Protocol(format!(
            "held-out identities offer {} genuine and {} imposter pairs; a fold asks for {} and {}",
            genuine.len(),
            imposter.len(),
            protocol.genuine_per_fold,
            protocol.imposter_per_fold
        )));
    }
    let mut rng = seeded(protocol.seed, 0x6576_616c_0000 + fold as u64);
    let mut out: Vec<LabeledPair> = sample_indices(&mut rng, genuine.len(), protocol.genuine_per_fold)
        .into_iter()
        .map(|k| genuine[k])
        .collect();
    out.extend(
        sample_indices(&mut rng, imposter.len(), protocol.imposter_per_fold)
            .into_iter()
            .map(|k| imposter[k]),
    );
    Ok(out)
}

/// Full protocol on the held-out identities of `dataset`.
pub fn evaluate_protocol(
    encoders: &Encoders,
    dataset: &MultiviewDataset,
    protocol: &ProtocolConfig,
) -> Result<EvalReport> {
    if protocol.folds == 0 || protocol.genuine_per_fold == 0 || protocol.imposter_per_fold == 0 {
        return Err(Error::Protocol("folds and pairs per fold must be positive".into()));
    }
    if dataset.split().heldout.len() < 2 {
        return Err(Error::Protocol(format!(
            "need at least 2 held-out identities, have {}",
            dataset.split().heldout.len()
        )));
    }
    let heldout = dataset.heldout_part()?;
    let emb = Embedded::new(encoders, &heldout)?;
    let mut folds = Vec::with_capacity(protocol.folds);
    let mut pooled = ScoreSet::default();
    for fold in 0..protocol.folds {
        let scores = emb.score_pairs(&fold_pairs(&emb, protocol, fold)?)?;
        let v = verification_metrics(&scores)?;
        folds.push(FoldMetrics {
            fold,
            accuracy: v.accuracy,
            eer: v.eer,
            threshold: v.threshold,
            tar_at_far: tar_at_far(&scores, &protocol.far_targets)?,
        });
        pooled.genuine_scores.extend(scores.genuine_scores);
        pooled.imposter_scores.extend(scores.imposter_scores);
    }
    let (acc, acc_std) = mean_std(&folds.iter().map(|f| f.accuracy).collect::<Vec<_>>());
    let (eer, eer_std) = mean_std(&folds.iter().map(|f| f.eer).collect::<Vec<_>>());
    let tar = protocol
        .far_targets
        .iter()
        .enumerate()
        .map(|(k, far)| {
            let t: Vec<f64> = folds.iter().map(|f| f.tar_at_far[k].tar).collect();
            (format!("{far}"), mean_std(&t).0)
        })
        .collect();
    let hist = histogram(&pooled, HISTOGRAM_BINS)?;
    let mut overlap_per_tier = BTreeMap::new();
    let mut tiers: Vec<usize> = emb.profile_tier.clone();
    tiers.sort_unstable();
    tiers.dedup();
    for &t in &tiers {
        let h = histogram(&emb.tier_scores(t)?, HISTOGRAM_BINS)?;
        overlap_per_tier.insert(t, h.overlap_coefficient());
    }
    Ok(EvalReport {
        verification_accuracy: acc,
        verification_accuracy_std: acc_std,
        eer,
        eer_std,
        tar_at_far: tar,
        rank1_per_tier: emb.rank1()?,
        overlap_coefficient: hist.overlap_coefficient(),
        histogram: hist,
        overlap_per_tier,
        hardest_tier: dataset.config().hardest_tier(),
        folds,
        protocol: protocol.clone(),
        dataset_config: dataset.config().clone(),
        train_config: None,
    })
}

impl EvalReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn hardest_tier_rank1(&self) -> f64 {
        self.rank1_per_tier.get(&self.hardest_tier).copied().unwrap_or(0.0)
    }
}
