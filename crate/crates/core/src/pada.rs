//! View discriminator and the pose-aware adversarial game.
//!
//! The discriminator outputs the probability that an embedding came from the
//! frontal view. It ascends `E[log D(z_f)] + E[log(1 − D(z_p))]`; the profile
//! encoder ascends `E[log D(z_p)]`. The frontal encoder never moves here.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{
    normalize_rows, normalize_rows_backward, sgd_step, Activation, ForwardCache, Matrix, MlpGrads, MlpParams, NormMode,
    OptimizerState,
};

pub const LOGIT_CLAMP: f64 = 50.0;
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Discriminator {
    pub net: MlpParams,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Forward pass through the discriminator, keeping what the losses need.
pub struct DiscriminatorPass {
    pub probabilities: Vec<f64>,
    logits: Vec<f64>,
    pub cache: ForwardCache,
}

impl DiscriminatorPass {
    /// `∂p/∂logit`, zero where the logit clamp is active.
    fn dprob_dlogit(&self, i: usize) -> f64 {
        if self.logits[i].abs() > LOGIT_CLAMP {
            0.0
        } else {
            let p = self.probabilities[i];
            p * (1.0 - p)
        }
    }
}

/// `log(clamp(x, PROB_CLAMP, 1 − PROB_CLAMP))` and its derivative in `x`.
fn clamped_log(x: f64) -> (f64, f64) {
    if x < PROB_CLAMP {
        (PROB_CLAMP.ln(), 0.0)
    } else if x > 1.0 - PROB_CLAMP {
        ((1.0 - PROB_CLAMP).ln(), 0.0)
    } else {
        (x.ln(), 1.0 / x)
    }
}

impl Discriminator {
    /// `input_dim → hidden… → 1` with batch normalization and leaky ReLU.
    pub fn new<R: Rng + ?Sized>(input_dim: usize, hidden: &[usize], rng: &mut R) -> Result<Self> {
        let mut dims = vec![input_dim];
        dims.extend_from_slice(hidden);
        dims.push(1);
        Ok(Discriminator {
            net: MlpParams::init(&dims, Activation::LeakyRelu, true, rng)?,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.net.input_dim()
    }

    pub fn pass(&self, embeddings: &Matrix, mode: NormMode) -> Result<DiscriminatorPass> {
        if embeddings.rows() == 0 {
            return Err(Error::Usage("discriminator batch is empty".into()));
        }
        let (out, cache) = self.net.forward(embeddings, mode)?;
        let logits: Vec<f64> = out.as_slice().to_vec();
        let probabilities = logits
            .iter()
            .map(|&l| sigmoid(l.clamp(-LOGIT_CLAMP, LOGIT_CLAMP)))
            .collect();
        Ok(DiscriminatorPass {
            probabilities,
            logits,
            cache,
        })
    }
}

/// Probability-of-frontal for each row.
pub fn discriminator_forward(disc: &Discriminator, embeddings: &Matrix, mode: NormMode) -> Result<Vec<f64>> {
    Ok(disc.pass(embeddings, mode)?.probabilities)
}

pub struct DiscriminatorLoss {
    /// `L_D`, to be maximized.
    pub value: f64,
    /// `∂L_D/∂θ_D`.
    pub grads: MlpGrads,
    pub frontal_term: f64,
    pub profile_term: f64,
    /// The forward pass, for folding batch statistics into running averages.
    pub cache: ForwardCache,
}

/// `L_D = mean log D(z_f) + mean log(1 − D(z_p))` over one joint forward pass
/// of the stacked batch `[z_f; z_p]`.
pub fn discriminator_loss(
    disc: &Discriminator,
    z_frontal: &Matrix,
    z_profile: &Matrix,
    mode: NormMode,
) -> Result<DiscriminatorLoss> {
    if z_frontal.rows() == 0 || z_profile.rows() == 0 {
        return Err(Error::Usage("discriminator loss needs both views".into()));
    }
    let stacked = z_frontal.vstack(z_profile)?;
    let pass = disc.pass(&stacked, mode)?;
    let nf = z_frontal.rows();
    let np = z_profile.rows();
    let mut upstream = Matrix::zeros(nf + np, 1);
    let mut frontal_term = 0.0;
    let mut profile_term = 0.0;
    for i in 0..nf + np {
        let p = pass.probabilities[i];
        let dp = pass.dprob_dlogit(i);
        if i < nf {
            let (l, dl) = clamped_log(p);
            frontal_term += l / nf as f64;
            upstream[(i, 0)] = dl * dp / nf as f64;
        } else {
            let (l, dl) = clamped_log(1.0 - p);
            profile_term += l / np as f64;
            upstream[(i, 0)] = -dl * dp / np as f64;
        }
    }
    let (grads, _) = disc.net.backward(&pass.cache, &upstream)?;
    Ok(DiscriminatorLoss {
        value: frontal_term + profile_term,
        grads,
        frontal_term,
        profile_term,
        cache: pass.cache,
    })
}

pub struct EncoderAdversarialLoss {
    /// `L_enc = mean log D(z_p)`, to be maximized by the profile encoder.
    pub value: f64,
    /// `∂L_enc/∂z_p`.
    pub grad_profile: Matrix,
}

/// `L_enc` and its gradient with respect to the profile embeddings only.
///
/// With `frontal_context`, batch normalization uses the statistics of the stacked
/// batch `[z_f; z_p]` exactly as in [`discriminator_loss`] and `z_f` is held
/// constant. Without it, the discriminator's running statistics are used.
pub fn encoder_adversarial_loss(
    disc: &Discriminator,
    z_profile: &Matrix,
    frontal_context: Option<&Matrix>,
) -> Result<EncoderAdversarialLoss> {
    let np = z_profile.rows();
    if np == 0 {
        return Err(Error::Usage("encoder adversarial loss needs profile embeddings".into()));
    }
    let (input, mode, skip) = match frontal_context {
        Some(zf) => (zf.vstack(z_profile)?, NormMode::Batch, zf.rows()),
        None => (z_profile.clone(), NormMode::Running, 0),
    };
    let pass = disc.pass(&input, mode)?;
    let mut upstream = Matrix::zeros(input.rows(), 1);
    let mut value = 0.0;
    for i in skip..input.rows() {
        let (l, dl) = clamped_log(pass.probabilities[i]);
        value += l / np as f64;
        upstream[(i, 0)] = dl * pass.dprob_dlogit(i) / np as f64;
    }
    let (_, grad_in) = disc.net.backward(&pass.cache, &upstream)?;
    let (_, grad_profile) = grad_in.split_rows(skip);
    Ok(EncoderAdversarialLoss { value, grad_profile })
}

/// Gradient ascent step: descends on the negated gradient.
pub fn ascent_step(params: &mut MlpParams, grads: &MlpGrads, state: &mut OptimizerState) -> Result<()> {
    let mut neg = grads.clone();
    neg.scale(-1.0);
    sgd_step(params, &neg, state)
}

/// One discriminator ascent step on `L_D` (folding the batch statistics into the
/// running averages). Returns `L_D` before the step.
pub fn discriminator_step(
    disc: &mut Discriminator,
    optimizer: &mut OptimizerState,
    z_frontal: &Matrix,
    z_profile: &Matrix,
) -> Result<f64> {
    let loss = discriminator_loss(disc, z_frontal, z_profile, NormMode::Batch)?;
    ascent_step(&mut disc.net, &loss.grads, optimizer)?;
    disc.net.absorb_batch_stats(&loss.cache)?;
    Ok(loss.value)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdversarialRound {
    pub discriminator_loss: f64,
    pub encoder_loss: f64,
}

/// Encodes and L2-normalizes a batch.
pub fn embed(encoder: &MlpParams, x: &Matrix) -> Result<(Matrix, Vec<f64>, ForwardCache)> {
    let (raw, cache) = encoder.forward(x, NormMode::Batch)?;
    let (z, norms) = normalize_rows(&raw)?;
    Ok((z, norms, cache))
}

/// One discriminator ascent step followed by one profile-encoder ascent step on
/// `λ₁·L_enc`. The frontal encoder is only read.
#[allow(clippy::too_many_arguments)]
pub fn adversarial_round(
    disc: &mut Discriminator,
    disc_optimizer: &mut OptimizerState,
    frontal_encoder: &MlpParams,
    profile_encoder: &mut MlpParams,
    profile_optimizer: &mut OptimizerState,
    x_frontal: &Matrix,
    x_profile: &Matrix,
    lambda1: f64,
) -> Result<AdversarialRound> {
    if x_frontal.rows() == 0 || x_profile.rows() == 0 {
        return Err(Error::Usage("adversarial round needs a nonempty batch".into()));
    }
    let (z_f, _, _) = embed(frontal_encoder, x_frontal)?;
    let (z_p, norms_p, cache_p) = embed(profile_encoder, x_profile)?;
    let l_d = discriminator_step(disc, disc_optimizer, &z_f, &z_p)?;
    let enc = encoder_adversarial_loss(disc, &z_p, Some(&z_f))?;
    let mut g = normalize_rows_backward(&z_p, &norms_p, &enc.grad_profile)?;
    g.scale(lambda1);
    let (grads, _) = profile_encoder.backward(&cache_p, &g)?;
    ascent_step(profile_encoder, &grads, profile_optimizer)?;
    Ok(AdversarialRound {
        discriminator_loss: l_d,
        encoder_loss: enc.value,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn zero_head(mut d: Discriminator) -> Discriminator {
        let last = d.net.num_layers() - 1;
        d.net.weights[last].scale(0.0);
        d.net.biases[last][0] = 0.0;
        d
    }

    fn batch(n: usize, d: usize, shift: f64) -> Matrix {
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let v: Vec<f64> = (0..d).map(|j| ((i * d + j) as f64 * 0.77 + shift).sin()).collect();
                let n = crate::numeric::norm(&v);
                v.iter().map(|x| x / n).collect()
            })
            .collect();
        Matrix::from_rows(&rows).unwrap()
    }

    #[test]
    fn zero_head_is_indifferent() {
        let d = zero_head(Discriminator::new(4, &[8, 8], &mut seeded(1, 0)).unwrap());
        let p = discriminator_forward(&d, &batch(5, 4, 0.0), NormMode::Batch).unwrap();
        assert!(p.iter().all(|&x| x == 0.5));
        let l = discriminator_loss(&d, &batch(5, 4, 0.0), &batch(5, 4, 1.0), NormMode::Batch).unwrap();
        assert!((l.value - 2.0 * 0.5f64.ln()).abs() < 1e-12);
        let e = encoder_adversarial_loss(&d, &batch(5, 4, 1.0), None).unwrap();
        assert!((e.value - 0.5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn logit_clamp_bounds_probabilities() {
        let mut d = Discriminator::new(2, &[3], &mut seeded(2, 0)).unwrap();
        let last = d.net.num_layers() - 1;
        d.net.biases[last][0] = 1e4;
        let p = discriminator_forward(&d, &batch(3, 2, 0.0), NormMode::Batch).unwrap();
        assert!(p.iter().all(|&x| x == 1.0 / (1.0 + (-LOGIT_CLAMP).exp())));
        d.net.biases[last][0] = -1e4;
        let p = discriminator_forward(&d, &batch(3, 2, 0.0), NormMode::Batch).unwrap();
        assert!(p.iter().all(|&x| x > 0.0 && x <= 1.93e-22));
    }

    #[test]
    fn confident_discriminator_approaches_zero_loss() {
        let mut d = Discriminator::new(2, &[3], &mut seeded(2, 0)).unwrap();
        d.net = MlpParams {
            layer_dims: vec![2, 1],
            weights: vec![Matrix::from_rows(&[vec![30.0, 0.0]]).unwrap()],
            biases: vec![vec![0.0]],
            norm_state: None,
            activation: Activation::LeakyRelu,
        };
        let zf = Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let zp = Matrix::from_rows(&[vec![-1.0, 0.0]]).unwrap();
        let l = discriminator_loss(&d, &zf, &zp, NormMode::Batch).unwrap();
        // saturates at the probability clamp
        assert!((l.value - 2.0 * (-PROB_CLAMP).ln_1p()).abs() < 1e-15);
        d.net.biases[0][0] = 1e3;
        let e = encoder_adversarial_loss(&d, &zp, None).unwrap();
        assert!(e.value <= 0.0 && e.value > -1e-6);
    }

    #[test]
    fn empty_batches_are_rejected() {
        let d = Discriminator::new(2, &[3], &mut seeded(2, 0)).unwrap();
        assert!(discriminator_loss(&d, &Matrix::zeros(0, 2), &batch(2, 2, 0.0), NormMode::Batch).is_err());
        assert!(encoder_adversarial_loss(&d, &Matrix::zeros(0, 2), None).is_err());
    }

    #[test]
    fn ascent_on_linear_discriminator_raises_its_output() {
        let d = Discriminator {
            net: MlpParams {
                layer_dims: vec![3, 1],
                weights: vec![Matrix::from_rows(&[vec![0.4, -1.1, 0.7]]).unwrap()],
                biases: vec![vec![0.05]],
                norm_state: None,
                activation: Activation::Identity,
            },
        };
        let zp = batch(4, 3, 2.0);
        let before = discriminator_forward(&d, &zp, NormMode::Running).unwrap();
        let e = encoder_adversarial_loss(&d, &zp, None).unwrap();
        let mut moved = zp.clone();
        for (x, g) in moved.as_mut_slice().iter_mut().zip(e.grad_profile.as_slice()) {
            *x += 1e-3 * g;
        }
        let after = discriminator_forward(&d, &moved, NormMode::Running).unwrap();
        // dL/dz = (1 − p)·w / B, so each probability moves up
        assert!(before.iter().zip(&after).all(|(b, a)| a > b));
    }
}
