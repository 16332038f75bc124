//! Synthetic two-view identity data.
//!
//! Each identity owns a Gaussian latent code. A frontal sample is the code pushed
//! through the frontal transform plus isotropic noise. A profile sample first
//! rotates the code by its tier's angle, goes through the profile transform, picks
//! up a tier-dependent offset along a fixed "pose" direction and carries extra
//! noise. Higher tiers are harder to match against frontal samples.

mod io;
mod pairs;
mod toy;

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{column_rank, norm, Matrix};
use crate::rng::{seeded, DetRng};

pub use io::{load_dataset, save_dataset, DATASET_FORMAT, DATASET_VERSION};
pub use pairs::{sample_genuine_batch, sample_genuine_pair, sample_imposter_pair};
pub use toy::{exact_mi, DiscreteToyJoint};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum View {
    Frontal,
    Profile,
}

impl View {
    pub fn opposite(self) -> View {
        match self {
            View::Frontal => View::Profile,
            View::Profile => View::Frontal,
        }
    }
}

/// Severity of one profile bin.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DifficultyTier {
    /// Added to `noise_sigma` for profile samples of this tier.
    pub extra_noise: f64,
    /// Radians, applied to each consecutive latent coordinate pair.
    pub rotation: f64,
    /// Magnitude of the shift along the pose direction.
    pub offset: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViewTransforms {
    /// `input_dim × latent_dim`
    pub frontal: Matrix,
    pub profile: Matrix,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    /// Total identities, train and held-out together.
    pub num_identities: usize,
    /// The last `num_heldout_identities` labels are held out from training.
    #[serde(default)]
    pub num_heldout_identities: usize,
    pub samples_per_identity_per_view: usize,
    pub latent_dim: usize,
    pub input_dim: usize,
    /// Drawn from the seed when absent.
    #[serde(default)]
    pub view_transforms: Option<ViewTransforms>,
    pub noise_sigma: f64,
    pub tiers: Vec<DifficultyTier>,
}

impl SynthConfig {
    /// Six tiers of growing severity, standing in for the 15°…90° yaw bins.
    pub fn default_tiers() -> Vec<DifficultyTier> {
        (0..6)
            .map(|t| {
                let s = t as f64 / 5.0;
                DifficultyTier {
                    extra_noise: 0.15 * s,
                    rotation: 0.85 * s,
                    offset: 1.5 * s,
                }
            })
            .collect()
    }

    /// 200 training and 50 held-out identities, one profile sample per tier.
    pub fn reference(seed: u64) -> Self {
        SynthConfig {
            seed,
            num_identities: 250,
            num_heldout_identities: 50,
            samples_per_identity_per_view: 6,
            latent_dim: 16,
            input_dim: 32,
            view_transforms: None,
            noise_sigma: 0.3,
            tiers: Self::default_tiers(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.num_identities == 0 {
            return fail("num_identities must be positive".into());
        }
        if self.num_heldout_identities >= self.num_identities && self.num_heldout_identities > 0 {
            return fail(format!(
                "num_heldout_identities ({}) must leave at least one training identity out of {}",
                self.num_heldout_identities, self.num_identities
            ));
        }
        if self.samples_per_identity_per_view == 0 || self.latent_dim == 0 || self.input_dim == 0 {
            return fail("samples_per_identity_per_view, latent_dim and input_dim must be positive".into());
        }
        if self.input_dim < self.latent_dim {
            return fail(format!(
                "input_dim {} < latent_dim {}: transforms cannot have full column rank",
                self.input_dim, self.latent_dim
            ));
        }
        if !(self.noise_sigma >= 0.0) {
            return fail("noise_sigma must be nonnegative".into());
        }
        if self.tiers.is_empty() {
            return fail("at least one difficulty tier is required".into());
        }
        for (i, t) in self.tiers.iter().enumerate() {
            if !(t.extra_noise >= 0.0) || !t.rotation.is_finite() || !t.offset.is_finite() {
                return fail(format!("tier {i} has invalid parameters"));
            }
        }
        if let Some(vt) = &self.view_transforms {
            for (name, m) in [("frontal", &vt.frontal), ("profile", &vt.profile)] {
                if m.shape() != (self.input_dim, self.latent_dim) {
                    return fail(format!(
                        "{name} transform is {:?}, expected ({}, {})",
                        m.shape(),
                        self.input_dim,
                        self.latent_dim
                    ));
                }
                let rank = column_rank(m, 1e-10);
                if rank < self.latent_dim {
                    return fail(format!(
                        "{name} transform is rank deficient (rank {rank} < {})",
                        self.latent_dim
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn hardest_tier(&self) -> usize {
        self.tiers.len() - 1
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub instance_id: usize,
    pub identity: usize,
    pub view: View,
    /// Difficulty tier; `None` for frontal samples.
    pub tier: Option<usize>,
    pub features: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IdentitySplit {
    pub train: Vec<usize>,
    pub heldout: Vec<usize>,
}

/// Frontal and profile samples with identity labels.
///
/// Instance ids are contiguous: frontal samples are `0..N_f` in list order and
/// profile samples follow as `N_f..N_f+N_p`.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiviewDataset {
    config: SynthConfig,
    frontal: Vec<Sample>,
    profile: Vec<Sample>,
    split: IdentitySplit,
    frontal_by_identity: BTreeMap<usize, Vec<usize>>,
    profile_by_identity: BTreeMap<usize, Vec<usize>>,
}

impl MultiviewDataset {
    /// Builds a dataset and checks its invariants. Instance ids are reassigned.
    pub fn new(
        config: SynthConfig,
        mut frontal: Vec<Sample>,
        mut profile: Vec<Sample>,
        split: IdentitySplit,
    ) -> Result<Self> {
        let nf = frontal.len();
        for (i, s) in frontal.iter_mut().enumerate() {
            s.instance_id = i;
        }
        for (j, s) in profile.iter_mut().enumerate() {
            s.instance_id = nf + j;
        }
        let mut by = [BTreeMap::new(), BTreeMap::new()];
        for (slot, (samples, view)) in [(&frontal, View::Frontal), (&profile, View::Profile)]
            .into_iter()
            .enumerate()
        {
            let width = samples.first().map(|s| s.features.len());
            for (i, s) in samples.iter().enumerate() {
                if s.view != view {
                    return Err(Error::Data(format!(
                        "sample {} is tagged {:?} but stored with {view:?} samples",
                        s.instance_id, s.view
                    )));
                }
                if s.identity >= config.num_identities {
                    return Err(Error::Data(format!(
                        "sample {} has identity {} outside [0, {})",
                        s.instance_id, s.identity, config.num_identities
                    )));
                }
                if Some(s.features.len()) != width || s.features.iter().any(|x| !x.is_finite()) {
                    return Err(Error::Data(format!("sample {} has malformed features", s.instance_id)));
                }
                by[slot].entry(s.identity).or_insert_with(Vec::new).push(i);
            }
        }
        if split.train.iter().any(|t| split.heldout.contains(t)) {
            return Err(Error::Data("train and held-out identities overlap".into()));
        }
        let [frontal_by_identity, profile_by_identity] = by;
        Ok(MultiviewDataset {
            config,
            frontal,
            profile,
            split,
            frontal_by_identity,
            profile_by_identity,
        })
    }

    pub fn config(&self) -> &SynthConfig {
        &self.config
    }

    pub fn frontal(&self) -> &[Sample] {
        &self.frontal
    }

    pub fn profile(&self) -> &[Sample] {
        &self.profile
    }

    pub fn samples(&self, view: View) -> &[Sample] {
        match view {
            View::Frontal => &self.frontal,
            View::Profile => &self.profile,
        }
    }

    pub fn split(&self) -> &IdentitySplit {
        &self.split
    }

    pub fn input_dim(&self) -> usize {
        self.frontal
            .first()
            .or(self.profile.first())
            .map_or(self.config.input_dim, |s| s.features.len())
    }

    /// Identities with at least one sample in either view, ascending.
    pub fn identities(&self) -> Vec<usize> {
        let mut ids: Vec<usize> = self
            .frontal_by_identity
            .keys()
            .chain(self.profile_by_identity.keys())
            .copied()
            .collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    /// Positions (into [`Self::samples`]) of `identity`'s samples in `view`.
    pub fn indices_of(&self, view: View, identity: usize) -> &[usize] {
        let map = match view {
            View::Frontal => &self.frontal_by_identity,
            View::Profile => &self.profile_by_identity,
        };
        map.get(&identity).map_or(&[], Vec::as_slice)
    }

    pub fn count_per_identity(&self, view: View) -> BTreeMap<usize, usize> {
        let map = match view {
            View::Frontal => &self.frontal_by_identity,
            View::Profile => &self.profile_by_identity,
        };
        map.iter().map(|(k, v)| (*k, v.len())).collect()
    }

    /// Offset subtracted from an instance id to get its position within its view.
    pub fn instance_offset(&self, view: View) -> usize {
        match view {
            View::Frontal => 0,
            View::Profile => self.frontal.len(),
        }
    }

    /// Stacks the features of the given positions into a `len × input_dim` matrix.
    pub fn features(&self, view: View, positions: &[usize]) -> Matrix {
        let samples = self.samples(view);
        let mut m = Matrix::zeros(positions.len(), self.input_dim());
        for (r, &p) in positions.iter().enumerate() {
            m.row_mut(r).copy_from_slice(&samples[p].features);
        }
        m
    }

    /// A dataset holding only the given identities, with fresh contiguous instance ids.
    pub fn restricted_to(&self, identities: &[usize]) -> Result<MultiviewDataset> {
        let keep = |s: &&Sample| identities.contains(&s.identity);
        let frontal = self.frontal.iter().filter(keep).cloned().collect();
        let profile = self.profile.iter().filter(keep).cloned().collect();
        let split = IdentitySplit {
            train: self
                .split
                .train
                .iter()
                .filter(|i| identities.contains(i))
                .copied()
                .collect(),
            heldout: self
                .split
                .heldout
                .iter()
                .filter(|i| identities.contains(i))
                .copied()
                .collect(),
        };
        MultiviewDataset::new(self.config.clone(), frontal, profile, split)
    }

    pub fn train_part(&self) -> Result<MultiviewDataset> {
        self.restricted_to(&self.split.train)
    }

    pub fn heldout_part(&self) -> Result<MultiviewDataset> {
        self.restricted_to(&self.split.heldout)
    }

    /// Stable hash over identities, views, tiers and feature bits.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |x: u64| {
            for b in x.to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        for s in self.frontal.iter().chain(&self.profile) {
            eat(s.identity as u64);
            eat(s.view as u64);
            eat(s.tier.map_or(u64::MAX, |t| t as u64));
            s.features.iter().for_each(|x| eat(x.to_bits()));
        }
        h
    }
}

fn random_transform(rng: &mut DetRng, rows: usize, cols: usize) -> Matrix {
    let s = 1.0 / (cols as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| s * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Matrix::from_vec(rows, cols, data).expect("sized above")
}

fn gaussian_vec(rng: &mut DetRng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// Rotates consecutive coordinate pairs `(0,1), (2,3), …` by `angle`.
fn rotate_pairs(v: &[f64], angle: f64) -> Vec<f64> {
    let (s, c) = angle.sin_cos();
    let mut out = v.to_vec();
    for k in (0..v.len() / 2).map(|k| 2 * k) {
        out[k] = c * v[k] - s * v[k + 1];
        out[k + 1] = s * v[k] + c * v[k + 1];
    }
    out
}

fn apply(m: &Matrix, v: &[f64]) -> Vec<f64> {
    m.row_iter().map(|r| crate::numeric::dot(r, v)).collect()
}

/// Deterministic in `config` (including its seed).
pub fn generate_dataset(config: &SynthConfig) -> Result<MultiviewDataset> {
    config.validate()?;
    let mut rng = seeded(config.seed, 0);
    let transforms = match &config.view_transforms {
        Some(t) => t.clone(),
        None => ViewTransforms {
            frontal: random_transform(&mut rng, config.input_dim, config.latent_dim),
            profile: random_transform(&mut rng, config.input_dim, config.latent_dim),
        },
    };
    for (name, m) in [("frontal", &transforms.frontal), ("profile", &transforms.profile)] {
        if column_rank(m, 1e-10) < config.latent_dim {
            return Err(Error::Config(format!("{name} transform is rank deficient")));
        }
    }
    let pose_direction = {
        let v = gaussian_vec(&mut rng, config.input_dim);
        let n = norm(&v);
        v.into_iter().map(|x| x / n).collect::<Vec<_>>()
    };
    let latents: Vec<Vec<f64>> = (0..config.num_identities)
        .map(|_| gaussian_vec(&mut rng, config.latent_dim))
        .collect();

    let mut frontal = Vec::new();
    let mut profile = Vec::new();
    let n_tiers = config.tiers.len();
    for (identity, code) in latents.iter().enumerate() {
        let clean = apply(&transforms.frontal, code);
        for _ in 0..config.samples_per_identity_per_view {
            let features = clean
                .iter()
                .map(|x| x + config.noise_sigma * rng.sample::<f64, _>(StandardNormal))
                .collect();
            frontal.push(Sample {
                instance_id: 0,
                identity,
                view: View::Frontal,
                tier: None,
                features,
            });
        }
        for j in 0..config.samples_per_identity_per_view {
            let tier = j % n_tiers;
            let t = &config.tiers[tier];
            let rotated = rotate_pairs(code, t.rotation);
            let sigma = config.noise_sigma + t.extra_noise;
            let features = apply(&transforms.profile, &rotated)
                .iter()
                .zip(&pose_direction)
                .map(|(x, u)| x + t.offset * u + sigma * rng.sample::<f64, _>(StandardNormal))
                .collect();
            profile.push(Sample {
                instance_id: 0,
                identity,
                view: View::Profile,
                tier: Some(tier),
                features,
            });
        }
    }
    let first_heldout = config.num_identities - config.num_heldout_identities;
    let split = IdentitySplit {
        train: (0..first_heldout).collect(),
        heldout: (first_heldout..config.num_identities).collect(),
    };
    let mut echo = config.clone();
    echo.view_transforms = Some(transforms);
    MultiviewDataset::new(echo, frontal, profile, split)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> SynthConfig {
        SynthConfig {
            num_identities: 10,
            num_heldout_identities: 3,
            samples_per_identity_per_view: 4,
            latent_dim: 4,
            input_dim: 8,
            ..SynthConfig::reference(seed)
        }
    }

    #[test]
    fn same_config_same_dataset() {
        let a = generate_dataset(&small(7)).unwrap();
        let b = generate_dataset(&small(7)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, generate_dataset(&small(8)).unwrap());
    }

    #[test]
    fn noiseless_frontal_samples_coincide() {
        let mut c = small(1);
        c.noise_sigma = 0.0;
        let d = generate_dataset(&c).unwrap();
        for id in d.identities() {
            let idx = d.indices_of(View::Frontal, id);
            let first = &d.frontal()[idx[0]].features;
            assert!(idx.iter().all(|&i| &d.frontal()[i].features == first));
        }
    }

    #[test]
    fn reference_counts() {
        let c = SynthConfig {
            num_identities: 200,
            num_heldout_identities: 0,
            samples_per_identity_per_view: 4,
            ..SynthConfig::reference(0)
        };
        let d = generate_dataset(&c).unwrap();
        assert_eq!(d.frontal().len(), 800);
        assert_eq!(d.profile().len(), 800);
        assert!(d.profile().iter().all(|s| s.tier.is_some()));
        assert!(d.frontal().iter().all(|s| s.tier.is_none()));
    }

    #[test]
    fn instance_ids_are_unique_and_split_is_disjoint() {
        let d = generate_dataset(&small(3)).unwrap();
        let mut ids: Vec<usize> = d.frontal().iter().chain(d.profile()).map(|s| s.instance_id).collect();
        let n = ids.len();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), n);
        assert!(d.split().train.iter().all(|t| !d.split().heldout.contains(t)));
        let held = d.heldout_part().unwrap();
        assert_eq!(held.identities(), d.split().heldout);
        assert_eq!(held.frontal()[0].instance_id, 0);
    }

    #[test]
    fn rank_deficient_transform_is_rejected() {
        let mut c = small(2);
        let mut m = Matrix::zeros(8, 4);
        for i in 0..8 {
            m[(i, 0)] = 1.0;
            m[(i, 1)] = 2.0;
            m[(i, 2)] = i as f64;
            m[(i, 3)] = -(i as f64);
        }
        c.view_transforms = Some(ViewTransforms {
            frontal: m.clone(),
            profile: m,
        });
        assert!(matches!(generate_dataset(&c), Err(Error::Config(_))));
    }
}
