//! Central finite-difference checks of every analytic gradient in the training
//! objective.
//!
//! Coordinates whose ±h probes change any leaky-ReLU sign pattern are skipped,
//! since the one-sided slopes differ there.

use std::time::Instant;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::contrastive::pac_loss_in_batch;
use crate::encoder::Encoders;
use crate::error::{Error, Result};
use crate::memory::{MemoryBuffer, PacmPlan, PairRef};
use crate::numeric::{
    normalize_rows, normalize_rows_backward, Activation, ForwardCache, Matrix, MlpGrads, MlpParams, NormMode,
};
use crate::pada::{discriminator_loss, encoder_adversarial_loss, Discriminator};
use crate::rng::{seeded, DetRng};
use crate::trainer::{total_loss, TrainConfig};

pub const FD_STEP: f64 = 1e-5;
/// Gradient magnitudes below this are compared in absolute terms.
pub const ABS_FLOOR: f64 = 1e-6;
pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, Default, Serialize)]
pub struct ModuleResult {
    pub name: String,
    pub worst_relative_error: f64,
    pub checked: usize,
    pub skipped: usize,
}

impl ModuleResult {
    fn new(name: &str) -> Self {
        ModuleResult {
            name: name.into(),
            ..Default::default()
        }
    }

    fn merge(&mut self, other: &ModuleResult) {
        self.worst_relative_error = self.worst_relative_error.max(other.worst_relative_error);
        self.checked += other.checked;
        self.skipped += other.skipped;
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckReport {
    pub modules: Vec<ModuleResult>,
    pub configurations: usize,
    pub seconds: f64,
}

impl GradcheckReport {
    pub fn worst(&self) -> f64 {
        self.modules.iter().map(|m| m.worst_relative_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.worst() < TOLERANCE && self.modules.iter().all(|m| m.checked > 0)
    }
}

/// Relative disagreement after discounting `resolution`, the smallest derivative
/// the difference quotient can resolve.
pub fn relative_error(analytic: f64, numeric: f64, resolution: f64) -> f64 {
    ((analytic - numeric).abs() - resolution).max(0.0) / analytic.abs().max(numeric.abs()).max(ABS_FLOOR)
}

/// Rounding accumulated while evaluating the objective (16 ulps) divided by the
/// probe width.
pub fn fd_resolution(f_up: f64, f_down: f64) -> f64 {
    16.0 * f64::EPSILON * f_up.abs().max(f_down.abs()) / (2.0 * FD_STEP)
}

fn mix(sigs: &[u64]) -> u64 {
    sigs.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &s| {
        (h ^ s).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Compares `analytic` against central differences of `f` at every coordinate of
/// `params`. `f` returns the objective and a kink signature.
pub fn check_params<F>(name: &str, params: &MlpParams, analytic: &MlpGrads, f: F) -> Result<ModuleResult>
where
    F: Fn(&MlpParams) -> Result<(f64, u64)>,
{
    let (_, base_sig) = f(params)?;
    let mut res = ModuleResult::new(name);
    let mut p = params.clone();
    for k in 0..params.num_params() {
        let orig = *p.param_mut(k);
        *p.param_mut(k) = orig + FD_STEP;
        let (up, sig_up) = f(&p)?;
        *p.param_mut(k) = orig - FD_STEP;
        let (down, sig_down) = f(&p)?;
        *p.param_mut(k) = orig;
        if sig_up != base_sig || sig_down != base_sig {
            res.skipped += 1;
            continue;
        }
        let numeric = (up - down) / (2.0 * FD_STEP);
        res.worst_relative_error =
            res.worst_relative_error
                .max(relative_error(analytic.get(k), numeric, fd_resolution(up, down)));
        res.checked += 1;
    }
    Ok(res)
}

/// One randomly drawn small problem.
struct Case {
    x_f: Matrix,
    x_p: Matrix,
    encoders: Encoders,
    disc: Discriminator,
    memory: MemoryBuffer,
    plan: PacmPlan,
    config: TrainConfig,
}

fn gaussian(rng: &mut DetRng, r: usize, c: usize) -> Matrix {
    Matrix::from_vec(r, c, (0..r * c).map(|_| rng.sample(StandardNormal)).collect()).expect("sized")
}

fn unit_rows(rng: &mut DetRng, r: usize, c: usize) -> Matrix {
    normalize_rows(&gaussian(rng, r, c))
        .expect("gaussian rows are nonzero")
        .0
}

impl Case {
    fn new(seed: u64, base: &TrainConfig) -> Result<Self> {
        let mut rng = seeded(seed, 0x6772_6164);
        let b = 3 + (seed as usize % 3);
        let input = 6 + (seed as usize % 4);
        let dim = 4 + (seed as usize % 3);
        let per_identity = 2;
        let identities = b + 4;
        let dims = [input, 8, dim];
        let shared = seed % 2 == 1;
        let encoders = if shared {
            Encoders::Shared(MlpParams::init(&dims, Activation::LeakyRelu, true, &mut rng)?)
        } else {
            Encoders::Coupled {
                frontal: MlpParams::init(&dims, Activation::LeakyRelu, true, &mut rng)?,
                profile: MlpParams::init(&dims, Activation::LeakyRelu, true, &mut rng)?,
            }
        };
        let mut disc = Discriminator::new(dim, &[8, 6], &mut rng)?;
        // non-trivial running statistics for the running-mode check
        let warm = disc.pass(&unit_rows(&mut rng, 10, dim), NormMode::Batch)?;
        disc.net.absorb_batch_stats(&warm.cache)?;
        // move the head off zero so every term carries gradient
        let last = disc.net.num_layers() - 1;
        disc.net.biases[last][0] = 0.3;

        let n = identities * per_identity;
        let ids: Vec<usize> = (0..n).map(|i| i / per_identity).collect();
        let memory = MemoryBuffer::from_rows(
            unit_rows(&mut rng, n, dim),
            ids.clone(),
            unit_rows(&mut rng, n, dim),
            ids,
            base.memory_momentum,
        )?;
        let pairing: Vec<PairRef> = (0..b)
            .map(|i| PairRef {
                frontal_instance: i * per_identity,
                profile_instance: n + i * per_identity + 1,
                identity: i,
            })
            .collect();
        let k = n - per_identity - 1;
        let plan = memory.plan(&pairing, k.min(base.num_negatives), &mut rng)?;
        let mut config = base.clone();
        config.batch_size = b;
        Ok(Case {
            x_f: gaussian(&mut rng, b, input),
            x_p: gaussian(&mut rng, b, input),
            encoders,
            disc,
            memory,
            plan,
            config,
        })
    }

    fn embed(&self, enc: &Encoders) -> Result<Embedded> {
        let (raw_f, cache_f) = enc.frontal().forward(&self.x_f, NormMode::Batch)?;
        let (raw_p, cache_p) = enc.profile().forward(&self.x_p, NormMode::Batch)?;
        let (z_f, norms_f) = normalize_rows(&raw_f)?;
        let (z_p, norms_p) = normalize_rows(&raw_p)?;
        Ok(Embedded {
            sig: mix(&[cache_f.kink_signature(), cache_p.kink_signature()]),
            z_f,
            z_p,
            norms_f,
            norms_p,
            cache_f,
            cache_p,
        })
    }

    fn disc_sig(&self, z_f: &Matrix, z_p: &Matrix) -> Result<u64> {
        Ok(self
            .disc
            .pass(&z_f.vstack(z_p)?, NormMode::Batch)?
            .cache
            .kink_signature())
    }
}

struct Embedded {
    z_f: Matrix,
    z_p: Matrix,
    norms_f: Vec<f64>,
    norms_p: Vec<f64>,
    cache_f: ForwardCache,
    cache_p: ForwardCache,
    sig: u64,
}

/// Parameter gradients of an objective given its embedding gradients.
fn encoder_grads(enc: &Encoders, e: &Embedded, g_zf: &Matrix, g_zp: &Matrix) -> Result<Vec<MlpGrads>> {
    let gf = normalize_rows_backward(&e.z_f, &e.norms_f, g_zf)?;
    let gp = normalize_rows_backward(&e.z_p, &e.norms_p, g_zp)?;
    let (pf, _) = enc.frontal().backward(&e.cache_f, &gf)?;
    let (pp, _) = enc.profile().backward(&e.cache_p, &gp)?;
    Ok(if enc.is_shared() {
        let mut t = pf;
        t.add_assign(&pp)?;
        vec![t]
    } else {
        vec![pf, pp]
    })
}

/// Checks `objective` over every encoder parameter, swapping in perturbed copies.
fn check_encoders<F>(name: &str, case: &Case, analytic: &[MlpGrads], objective: F) -> Result<ModuleResult>
where
    F: Fn(&Encoders) -> Result<(f64, u64)>,
{
    let mut res = ModuleResult::new(name);
    match &case.encoders {
        Encoders::Shared(p) => {
            res.merge(&check_params(name, p, &analytic[0], |q| {
                objective(&Encoders::Shared(q.clone()))
            })?);
        }
        Encoders::Coupled { frontal, profile } => {
            res.merge(&check_params(name, frontal, &analytic[0], |q| {
                objective(&Encoders::Coupled {
                    frontal: q.clone(),
                    profile: profile.clone(),
                })
            })?);
            res.merge(&check_params(name, profile, &analytic[1], |q| {
                objective(&Encoders::Coupled {
                    frontal: frontal.clone(),
                    profile: q.clone(),
                })
            })?);
        }
    }
    Ok(res)
}

fn check_case(case: &Case) -> Result<Vec<ModuleResult>> {
    let cfg = &case.config;
    let tau = cfg.temperature;
    let base = case.embed(&case.encoders)?;
    let zero = Matrix::zeros(base.z_f.rows(), base.z_f.cols());
    // the frontal side of the adversarial batch is a constant
    let context = base.z_f.clone();
    let mut out = Vec::new();

    let pac = pac_loss_in_batch(&base.z_f, &base.z_p, tau)?;
    let g = encoder_grads(&case.encoders, &base, &pac.grad_frontal, &pac.grad_profile)?;
    out.push(check_encoders("L_PAC", case, &g, |enc| {
        let e = case.embed(enc)?;
        Ok((pac_loss_in_batch(&e.z_f, &e.z_p, tau)?.loss, e.sig))
    })?);

    let pacm = case.memory.pacm_loss_planned(&base.z_f, &base.z_p, &case.plan, tau)?;
    let g = encoder_grads(&case.encoders, &base, &pacm.grad_frontal, &pacm.grad_profile)?;
    out.push(check_encoders("L_PACM", case, &g, |enc| {
        let e = case.embed(enc)?;
        Ok((
            case.memory.pacm_loss_planned(&e.z_f, &e.z_p, &case.plan, tau)?.loss,
            e.sig,
        ))
    })?);

    for (name, mode) in [
        ("L_D (batch stats)", NormMode::Batch),
        ("L_D (running stats)", NormMode::Running),
    ] {
        let l = discriminator_loss(&case.disc, &base.z_f, &base.z_p, mode)?;
        out.push(check_params(name, &case.disc.net, &l.grads, |net| {
            let d = Discriminator { net: net.clone() };
            let l = discriminator_loss(&d, &base.z_f, &base.z_p, mode)?;
            Ok((l.value, l.cache.kink_signature()))
        })?);
    }

    let adv = encoder_adversarial_loss(&case.disc, &base.z_p, Some(&context))?;
    let g = encoder_grads(&case.encoders, &base, &zero, &adv.grad_profile)?;
    out.push(check_encoders("L_enc", case, &g, |enc| {
        let e = case.embed(enc)?;
        let v = encoder_adversarial_loss(&case.disc, &e.z_p, Some(&context))?.value;
        Ok((v, mix(&[e.sig, case.disc_sig(&context, &e.z_p)?])))
    })?);

    let mut g_zf = pacm.grad_frontal.clone();
    let mut g_zp = pacm.grad_profile.clone();
    g_zf.scale(cfg.lambda2);
    g_zp.scale(cfg.lambda2);
    let mut a = adv.grad_profile.clone();
    a.scale(-cfg.lambda1);
    g_zp.add_assign(&a)?;
    let g = encoder_grads(&case.encoders, &base, &g_zf, &g_zp)?;
    out.push(check_encoders("L_total", case, &g, |enc| {
        let e = case.embed(enc)?;
        let con = case.memory.pacm_loss_planned(&e.z_f, &e.z_p, &case.plan, tau)?.loss;
        let adv = encoder_adversarial_loss(&case.disc, &e.z_p, Some(&context))?.value;
        Ok((
            total_loss(con, adv, cfg)?,
            mix(&[e.sig, case.disc_sig(&context, &e.z_p)?]),
        ))
    })?);
    Ok(out)
}

/// Runs the suite over `configurations` seeded problems built from `base`'s
/// temperature, loss weights and memory momentum.
pub fn run_gradcheck(base: &TrainConfig, configurations: usize, seed: u64) -> Result<GradcheckReport> {
    if configurations == 0 {
        return Err(Error::Usage("gradcheck needs at least one configuration".into()));
    }
    let start = Instant::now();
    let mut modules: Vec<ModuleResult> = Vec::new();
    for c in 0..configurations {
        let case = Case::new(seed.wrapping_add(c as u64), base)?;
        for r in check_case(&case)? {
            match modules.iter_mut().find(|m| m.name == r.name) {
                Some(m) => m.merge(&r),
                None => modules.push(r),
            }
        }
    }
    Ok(GradcheckReport {
        modules,
        configurations,
        seconds: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floor_and_resolution() {
        assert_eq!(relative_error(1.0, 1.0, 0.0), 0.0);
        assert!((relative_error(2.0, 1.0, 0.0) - 0.5).abs() < 1e-15);
        assert!((relative_error(0.0, 1e-9, 0.0) - 1e-3).abs() < 1e-15);
        // one ulp of a magnitude-64 objective is unresolvable
        let q = fd_resolution(64.0, 64.0);
        assert_eq!(relative_error(0.0, (64f64.next_up() - 64.0) / (2.0 * FD_STEP), q), 0.0);
    }

    #[test]
    fn detects_a_wrong_gradient() {
        let mut rng = seeded(1, 0);
        let p = MlpParams::init(&[3, 2], Activation::Identity, false, &mut rng).unwrap();
        let x = gaussian(&mut rng, 4, 3);
        let f = |q: &MlpParams| -> Result<(f64, u64)> {
            let (y, c) = q.forward(&x, NormMode::Batch)?;
            Ok((
                y.as_slice().iter().map(|v| v * v).sum::<f64>() * 0.5,
                c.kink_signature(),
            ))
        };
        let (y, c) = p.forward(&x, NormMode::Batch).unwrap();
        let (good, _) = p.backward(&c, &y).unwrap();
        assert!(check_params("sq", &p, &good, f).unwrap().worst_relative_error < 1e-7);
        let mut bad = good.clone();
        bad.scale(1.01);
        assert!(check_params("sq", &p, &bad, f).unwrap().worst_relative_error > 5e-3);
    }

    #[test]
    fn single_configuration_passes() {
        let r = run_gradcheck(&TrainConfig::default(), 1, 0).unwrap();
        assert_eq!(r.modules.len(), 6);
        assert!(r.passed(), "{:?}", r.modules);
    }
}
