//! Per-instance memory of past embeddings for both views.
//!
//! Rows are blended toward fresh encodings with momentum `m` and re-normalized.
//! Loss computations treat rows as constants and never write to them.

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::contrastive::anchor_term;
use crate::error::{Error, Result};
use crate::numeric::{axpy, norm, Matrix, MIN_NORM};
use crate::rng::seeded;
use crate::synth::{MultiviewDataset, View};

pub const DEFAULT_MOMENTUM: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryBuffer {
    frontal: Matrix,
    profile: Matrix,
    frontal_identity: Vec<usize>,
    profile_identity: Vec<usize>,
    /// Instance id of profile row 0 (frontal rows start at 0).
    profile_offset: usize,
    momentum: f64,
}

/// What [`MemoryBuffer::update_entry`] did.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UpdateOutcome {
    Updated,
    /// The blend cancelled to (near) zero; the previous row was kept.
    KeptDegenerate,
}

/// The memory rows contrasted against one anchor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MemoryDraw {
    pub positive_row: usize,
    pub negative_rows: Vec<usize>,
}

/// One genuine pair of the mini-batch, by instance id.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PairRef {
    pub frontal_instance: usize,
    pub profile_instance: usize,
    pub identity: usize,
}

/// Memory draws for both anchoring directions of a batch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PacmPlan {
    /// Frontal anchors against profile memory rows.
    pub frontal_anchor: Vec<MemoryDraw>,
    /// Profile anchors against frontal memory rows.
    pub profile_anchor: Vec<MemoryDraw>,
}

#[derive(Clone, Debug)]
pub struct PacmOutput {
    pub loss: f64,
    pub loss_frontal: f64,
    pub loss_profile: f64,
    pub grad_frontal: Matrix,
    pub grad_profile: Matrix,
}

fn random_unit_rows(n: usize, d: usize, rng: &mut impl Rng) -> Matrix {
    let mut m = Matrix::zeros(n, d);
    for r in 0..n {
        let row = m.row_mut(r);
        loop {
            row.iter_mut().for_each(|x| *x = rng.sample(StandardNormal));
            let len = norm(row);
            if len > MIN_NORM {
                row.iter_mut().for_each(|x| *x /= len);
                break;
            }
        }
    }
    m
}

impl MemoryBuffer {
    /// One seeded random unit row per dataset instance.
    pub fn init(dataset: &MultiviewDataset, dim: usize, momentum: f64, seed: u64) -> Result<Self> {
        if dim < 2 {
            return Err(Error::Config(format!("memory dimension must be at least 2, got {dim}")));
        }
        check_momentum(momentum)?;
        let mut rng = seeded(seed, 0x6d656d);
        let frontal = random_unit_rows(dataset.frontal().len(), dim, &mut rng);
        let profile = random_unit_rows(dataset.profile().len(), dim, &mut rng);
        Ok(MemoryBuffer {
            frontal,
            profile,
            frontal_identity: dataset.frontal().iter().map(|s| s.identity).collect(),
            profile_identity: dataset.profile().iter().map(|s| s.identity).collect(),
            profile_offset: dataset.instance_offset(View::Profile),
            momentum,
        })
    }

    /// Buffer with explicit rows. Profile instance ids start at `frontal.rows()`.
    pub fn from_rows(
        frontal: Matrix,
        frontal_identity: Vec<usize>,
        profile: Matrix,
        profile_identity: Vec<usize>,
        momentum: f64,
    ) -> Result<Self> {
        check_momentum(momentum)?;
        if frontal.rows() != frontal_identity.len()
            || profile.rows() != profile_identity.len()
            || frontal.cols() != profile.cols()
        {
            return Err(Error::Dimension("memory rows and identity labels disagree".into()));
        }
        for (i, r) in frontal.row_iter().chain(profile.row_iter()).enumerate() {
            if (norm(r) - 1.0).abs() > 1e-9 {
                return Err(Error::Usage(format!("memory row {i} is not unit norm")));
            }
        }
        Ok(MemoryBuffer {
            profile_offset: frontal.rows(),
            frontal,
            profile,
            frontal_identity,
            profile_identity,
            momentum,
        })
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn dim(&self) -> usize {
        self.frontal.cols()
    }

    pub fn rows(&self, view: View) -> &Matrix {
        match view {
            View::Frontal => &self.frontal,
            View::Profile => &self.profile,
        }
    }

    pub fn identities(&self, view: View) -> &[usize] {
        match view {
            View::Frontal => &self.frontal_identity,
            View::Profile => &self.profile_identity,
        }
    }

    /// Row index of `instance_id` within `view`.
    pub fn row_of(&self, view: View, instance_id: usize) -> Result<usize> {
        let (offset, n) = match view {
            View::Frontal => (0, self.frontal.rows()),
            View::Profile => (self.profile_offset, self.profile.rows()),
        };
        instance_id
            .checked_sub(offset)
            .filter(|&r| r < n)
            .ok_or_else(|| Error::Usage(format!("instance {instance_id} has no {view:?} memory entry")))
    }

    /// `row ← normalize(m·row + (1−m)·z)`.
    pub fn update_entry(&mut self, view: View, instance_id: usize, z: &[f64]) -> Result<UpdateOutcome> {
        let r = self.row_of(view, instance_id)?;
        if z.len() != self.dim() {
            return Err(Error::Dimension(format!(
                "embedding of width {} for memory of width {}",
                z.len(),
                self.dim()
            )));
        }
        if (norm(z) - 1.0).abs() > 1e-9 {
            return Err(Error::Usage("memory updates take unit-norm embeddings".into()));
        }
        let m = self.momentum;
        if m == 1.0 {
            return Ok(UpdateOutcome::Updated);
        }
        let rows = match view {
            View::Frontal => &mut self.frontal,
            View::Profile => &mut self.profile,
        };
        let mut blended: Vec<f64> = rows.row(r).iter().map(|x| m * x).collect();
        axpy(1.0 - m, z, &mut blended);
        let len = norm(&blended);
        if !(len > 1e-12) {
            log::warn!("memory update for {view:?} instance {instance_id} cancelled to zero; keeping previous entry");
            return Ok(UpdateOutcome::KeptDegenerate);
        }
        rows.row_mut(r)
            .iter_mut()
            .zip(&blended)
            .for_each(|(dst, x)| *dst = x / len);
        Ok(UpdateOutcome::Updated)
    }

    /// `k` distinct rows of `view` whose identity differs from `anchor_identity`,
    /// plus the row of the anchor's paired instance.
    pub fn sample_negatives<R: Rng + ?Sized>(
        &self,
        view: View,
        anchor_identity: usize,
        positive_instance: usize,
        k: usize,
        rng: &mut R,
    ) -> Result<MemoryDraw> {
        let positive_row = self.row_of(view, positive_instance)?;
        let eligible: Vec<usize> = self
            .identities(view)
            .iter()
            .enumerate()
            .filter(|(_, &id)| id != anchor_identity)
            .map(|(r, _)| r)
            .collect();
        if k > eligible.len() {
            return Err(Error::Capacity {
                requested: k,
                available: eligible.len(),
            });
        }
        let negative_rows = sample_indices(rng, eligible.len(), k)
            .into_iter()
            .map(|i| eligible[i])
            .collect();
        Ok(MemoryDraw {
            positive_row,
            negative_rows,
        })
    }

    /// Draws memory negatives for both anchoring directions of a batch.
    pub fn plan<R: Rng + ?Sized>(&self, pairing: &[PairRef], k: usize, rng: &mut R) -> Result<PacmPlan> {
        let mut frontal_anchor = Vec::with_capacity(pairing.len());
        let mut profile_anchor = Vec::with_capacity(pairing.len());
        for p in pairing {
            frontal_anchor.push(self.sample_negatives(View::Profile, p.identity, p.profile_instance, k, rng)?);
            profile_anchor.push(self.sample_negatives(View::Frontal, p.identity, p.frontal_instance, k, rng)?);
        }
        Ok(PacmPlan {
            frontal_anchor,
            profile_anchor,
        })
    }

    /// Loss against memory for fixed draws. Only the live embeddings get gradients.
    pub fn pacm_loss_planned(
        &self,
        z_frontal: &Matrix,
        z_profile: &Matrix,
        plan: &PacmPlan,
        tau: f64,
    ) -> Result<PacmOutput> {
        if !(tau > 0.0) {
            return Err(Error::Parameter(format!("temperature must be positive, got {tau}")));
        }
        let b = z_frontal.rows();
        if z_profile.shape() != z_frontal.shape()
            || z_frontal.cols() != self.dim()
            || plan.frontal_anchor.len() != b
            || plan.profile_anchor.len() != b
        {
            return Err(Error::Dimension("live embeddings, memory and plan disagree".into()));
        }
        let direction = |anchors: &Matrix, memory: &Matrix, draws: &[MemoryDraw]| -> Result<(f64, Matrix)> {
            let mut grad = Matrix::zeros(anchors.rows(), anchors.cols());
            let mut coef = Vec::new();
            let mut total = 0.0;
            for (i, draw) in draws.iter().enumerate() {
                if draw.positive_row >= memory.rows() || draw.negative_rows.iter().any(|&r| r >= memory.rows()) {
                    return Err(Error::Usage("memory draw is out of range".into()));
                }
                let a = anchors.row(i);
                let order = || std::iter::once(draw.positive_row).chain(draw.negative_rows.iter().copied());
                total += anchor_term(a, order().map(|r| memory.row(r)), tau, &mut coef);
                let g = grad.row_mut(i);
                for (c, r) in coef.iter().zip(order()) {
                    axpy(c / tau, memory.row(r), g);
                }
            }
            Ok((total, grad))
        };
        let (loss_frontal, grad_frontal) = direction(z_frontal, &self.profile, &plan.frontal_anchor)?;
        let (loss_profile, grad_profile) = direction(z_profile, &self.frontal, &plan.profile_anchor)?;
        Ok(PacmOutput {
            loss: loss_frontal + loss_profile,
            loss_frontal,
            loss_profile,
            grad_frontal,
            grad_profile,
        })
    }

    /// Samples `k` memory negatives per anchor and evaluates the two-way loss.
    pub fn pacm_loss<R: Rng + ?Sized>(
        &self,
        z_frontal: &Matrix,
        z_profile: &Matrix,
        pairing: &[PairRef],
        k: usize,
        tau: f64,
        rng: &mut R,
    ) -> Result<PacmOutput> {
        if pairing.len() != z_frontal.rows() {
            return Err(Error::Dimension(format!(
                "{} pairs for {} live embeddings",
                pairing.len(),
                z_frontal.rows()
            )));
        }
        let plan = self.plan(pairing, k, rng)?;
        self.pacm_loss_planned(z_frontal, z_profile, &plan, tau)
    }

    /// Validates the unit-row invariant (used after loading).
    pub fn validate(&self) -> Result<()> {
        check_momentum(self.momentum)?;
        if self.frontal.cols() != self.profile.cols()
            || self.frontal.rows() != self.frontal_identity.len()
            || self.profile.rows() != self.profile_identity.len()
        {
            return Err(Error::Dimension("memory shapes are inconsistent".into()));
        }
        for r in self.frontal.row_iter().chain(self.profile.row_iter()) {
            if (norm(r) - 1.0).abs() > 1e-9 {
                return Err(Error::Numeric("memory row is not unit norm".into()));
            }
        }
        Ok(())
    }
}

fn check_momentum(m: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&m) {
        return Err(Error::Config(format!("memory momentum must lie in [0, 1], got {m}")));
    }
    Ok(())
}
