//! Coupled-encoder training: contrastive loss (in-batch or against memory),
//! optional adversarial view adaptation, SGD with step-decayed learning rate and
//! momentum memory updates.

mod checkpoint;
mod config;

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::TrainConfig;

use crate::contrastive::pac_loss_in_batch;
use crate::encoder::Encoders;
use crate::error::{Error, Result};
use crate::memory::{MemoryBuffer, PairRef};
use crate::numeric::{
    normalize_rows, normalize_rows_backward, sgd_step, Activation, Matrix, MlpGrads, MlpParams, NormMode,
    OptimizerState,
};
use crate::pada::{discriminator_step, encoder_adversarial_loss, Discriminator};
use crate::rng::{seeded, DetRng, RngState};
use crate::synth::{sample_genuine_batch, MultiviewDataset, View};

const STREAM_INIT: u64 = 1;
const STREAM_BATCH: u64 = 2;
const STREAM_NEGATIVES: u64 = 3;

/// Optimizer state matching [`Encoders`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum EncoderOptimizers {
    Shared(OptimizerState),
    Coupled {
        frontal: OptimizerState,
        profile: OptimizerState,
    },
}

/// The quantity the encoders minimize: `λ₁·(−L_enc) + λ₂·L_contrastive`.
pub fn total_loss(contrastive: f64, encoder_adversarial: f64, config: &TrainConfig) -> Result<f64> {
    if !contrastive.is_finite() || !encoder_adversarial.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite loss component (contrastive {contrastive}, adversarial {encoder_adversarial})"
        )));
    }
    Ok(config.lambda1 * (-encoder_adversarial) + config.lambda2 * contrastive)
}

/// One row of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub epoch: usize,
    pub iter: usize,
    /// Contrastive loss of the batch (memory or in-batch variant).
    pub l_pacm: f64,
    pub l_pada_d: Option<f64>,
    pub l_pada_enc: Option<f64>,
    pub l_total: f64,
    pub lr: f64,
}

pub const METRICS_HEADER: &str = "epoch,iter,l_pacm,l_pada_d,l_pada_enc,l_total,lr";

pub fn write_metrics_csv<W: Write>(rows: &[MetricsRow], mut out: W) -> std::io::Result<()> {
    let opt = |x: Option<f64>| x.map(|v| format!("{v:e}")).unwrap_or_default();
    writeln!(out, "{METRICS_HEADER}")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{:e},{},{},{:e},{:e}",
            r.epoch,
            r.iter,
            r.l_pacm,
            opt(r.l_pada_d),
            opt(r.l_pada_enc),
            r.l_total,
            r.lr
        )?;
    }
    Ok(())
}

/// Everything needed to resume training bit-exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub encoders: Encoders,
    pub encoder_optimizers: EncoderOptimizers,
    pub discriminator: Discriminator,
    pub discriminator_optimizer: OptimizerState,
    pub memory: MemoryBuffer,
    /// Epochs completed.
    pub epoch: usize,
    /// Iterations completed within the current epoch.
    pub iter_in_epoch: usize,
    /// Iterations completed overall.
    pub iteration: usize,
    pub batch_rng: RngState,
    pub negative_rng: RngState,
    /// Fingerprint of the training split this run consumes.
    pub dataset_fingerprint: u64,
}

pub struct Trainer {
    config: TrainConfig,
    data: MultiviewDataset,
    encoders: Encoders,
    optimizers: EncoderOptimizers,
    discriminator: Discriminator,
    discriminator_optimizer: OptimizerState,
    memory: MemoryBuffer,
    batch_rng: DetRng,
    negative_rng: DetRng,
    epoch: usize,
    iter_in_epoch: usize,
    iteration: usize,
    iterations_per_epoch: usize,
    log: Vec<MetricsRow>,
}

/// Per-view gradients of the live (pre-normalization) encoder outputs.
struct StepGrads {
    frontal: Option<Matrix>,
    profile: Option<Matrix>,
}

impl Trainer {
    /// Fresh run on the training identities of `dataset`.
    pub fn new(config: TrainConfig, dataset: &MultiviewDataset) -> Result<Self> {
        config.validate()?;
        let data = dataset.train_part()?;
        check_data(&config, &data)?;
        let mut init = seeded(config.seed, STREAM_INIT);
        let mut dims = vec![data.input_dim()];
        dims.extend_from_slice(&config.encoder_dims);
        let lr = config.learning_rate(0);
        let opt = |p: &MlpParams| OptimizerState::new(p, lr, config.optimizer_momentum, config.weight_decay);
        let (encoders, optimizers) = if config.couple_encoders {
            let frontal = MlpParams::init(&dims, Activation::LeakyRelu, false, &mut init)?;
            let profile = MlpParams::init(&dims, Activation::LeakyRelu, false, &mut init)?;
            let o = EncoderOptimizers::Coupled {
                frontal: opt(&frontal)?,
                profile: opt(&profile)?,
            };
            (Encoders::Coupled { frontal, profile }, o)
        } else {
            let p = MlpParams::init(&dims, Activation::LeakyRelu, false, &mut init)?;
            let o = EncoderOptimizers::Shared(opt(&p)?);
            (Encoders::Shared(p), o)
        };
        let discriminator = Discriminator::new(config.embedding_dim(), &config.discriminator_hidden, &mut init)?;
        let discriminator_optimizer = opt(&discriminator.net)?;
        let memory = MemoryBuffer::init(&data, config.embedding_dim(), config.memory_momentum, config.seed)?;
        let iterations_per_epoch = iterations_per_epoch(&config, &data);
        Ok(Trainer {
            batch_rng: seeded(config.seed, STREAM_BATCH),
            negative_rng: seeded(config.seed, STREAM_NEGATIVES),
            config,
            data,
            encoders,
            optimizers,
            discriminator,
            discriminator_optimizer,
            memory,
            epoch: 0,
            iter_in_epoch: 0,
            iteration: 0,
            iterations_per_epoch,
            log: Vec::new(),
        })
    }

    /// Resumes from a checkpoint. `dataset` must be the one the run started on.
    pub fn from_checkpoint(ckpt: Checkpoint, dataset: &MultiviewDataset) -> Result<Self> {
        ckpt.config.validate()?;
        let data = dataset.train_part()?;
        if data.fingerprint() != ckpt.dataset_fingerprint {
            return Err(Error::Checkpoint(
                "dataset does not match the one this checkpoint was trained on".into(),
            ));
        }
        check_data(&ckpt.config, &data)?;
        let iterations_per_epoch = iterations_per_epoch(&ckpt.config, &data);
        Ok(Trainer {
            batch_rng: ckpt.batch_rng.restore()?,
            negative_rng: ckpt.negative_rng.restore()?,
            config: ckpt.config,
            data,
            encoders: ckpt.encoders,
            optimizers: ckpt.encoder_optimizers,
            discriminator: ckpt.discriminator,
            discriminator_optimizer: ckpt.discriminator_optimizer,
            memory: ckpt.memory,
            epoch: ckpt.epoch,
            iter_in_epoch: ckpt.iter_in_epoch,
            iteration: ckpt.iteration,
            iterations_per_epoch,
            log: Vec::new(),
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            encoders: self.encoders.clone(),
            encoder_optimizers: self.optimizers.clone(),
            discriminator: self.discriminator.clone(),
            discriminator_optimizer: self.discriminator_optimizer.clone(),
            memory: self.memory.clone(),
            epoch: self.epoch,
            iter_in_epoch: self.iter_in_epoch,
            iteration: self.iteration,
            batch_rng: RngState::capture(&self.batch_rng),
            negative_rng: RngState::capture(&self.negative_rng),
            dataset_fingerprint: self.data.fingerprint(),
        }
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn encoders(&self) -> &Encoders {
        &self.encoders
    }

    pub fn memory(&self) -> &MemoryBuffer {
        &self.memory
    }

    pub fn discriminator(&self) -> &Discriminator {
        &self.discriminator
    }

    pub fn log(&self) -> &[MetricsRow] {
        &self.log
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn iterations_per_epoch(&self) -> usize {
        self.iterations_per_epoch
    }

    pub fn is_finished(&self) -> bool {
        self.epoch >= self.config.epochs
    }

    fn pada_active(&self) -> bool {
        self.config.use_pada && self.epoch >= self.config.pada_warmup_epochs
    }

    fn set_learning_rate(&mut self) {
        let lr = self.config.learning_rate(self.epoch);
        match &mut self.optimizers {
            EncoderOptimizers::Shared(o) => o.learning_rate = lr,
            EncoderOptimizers::Coupled { frontal, profile } => {
                frontal.learning_rate = lr;
                profile.learning_rate = lr;
            }
        }
        self.discriminator_optimizer.learning_rate = lr;
    }

    /// Runs one iteration and returns its metrics row.
    pub fn step(&mut self) -> Result<MetricsRow> {
        if self.is_finished() {
            return Err(Error::Usage("training already finished".into()));
        }
        self.set_learning_rate();
        let lr = self.config.learning_rate(self.epoch);
        let cfg = self.config.clone();

        let batch = sample_genuine_batch(&self.data, cfg.batch_size, &mut self.batch_rng)?;
        let offset_f = self.data.instance_offset(View::Frontal);
        let offset_p = self.data.instance_offset(View::Profile);
        let pos_f: Vec<usize> = batch.iter().map(|(f, _)| f.instance_id - offset_f).collect();
        let pos_p: Vec<usize> = batch.iter().map(|(_, p)| p.instance_id - offset_p).collect();
        let pairing: Vec<PairRef> = batch
            .iter()
            .map(|(f, p)| PairRef {
                frontal_instance: f.instance_id,
                profile_instance: p.instance_id,
                identity: f.identity,
            })
            .collect();
        let x_f = self.data.features(View::Frontal, &pos_f);
        let x_p = self.data.features(View::Profile, &pos_p);

        let (raw_f, cache_f) = self.encoders.frontal().forward(&x_f, NormMode::Batch)?;
        let (raw_p, cache_p) = self.encoders.profile().forward(&x_p, NormMode::Batch)?;
        let (z_f, norms_f) = normalize_rows(&raw_f)?;
        let (z_p, norms_p) = normalize_rows(&raw_p)?;

        let (l_con, mut g_zf, mut g_zp) = if cfg.use_memory {
            let out = self.memory.pacm_loss(
                &z_f,
                &z_p,
                &pairing,
                cfg.num_negatives,
                cfg.temperature,
                &mut self.negative_rng,
            )?;
            (out.loss, out.grad_frontal, out.grad_profile)
        } else {
            let out = pac_loss_in_batch(&z_f, &z_p, cfg.temperature)?;
            (out.loss, out.grad_frontal, out.grad_profile)
        };
        g_zf.scale(cfg.lambda2);
        g_zp.scale(cfg.lambda2);

        let mut l_d = None;
        let mut l_enc = None;
        if self.pada_active() {
            l_d = Some(discriminator_step(
                &mut self.discriminator,
                &mut self.discriminator_optimizer,
                &z_f,
                &z_p,
            )?);
            let enc = encoder_adversarial_loss(&self.discriminator, &z_p, Some(&z_f))?;
            let mut g = enc.grad_profile;
            g.scale(-cfg.lambda1);
            g_zp.add_assign(&g)?;
            l_enc = Some(enc.value);
        }
        let l_total = total_loss(l_con, l_enc.unwrap_or(0.0), &cfg)?;

        let frontal_trains = cfg.lambda2 > 0.0;
        let profile_trains = cfg.lambda2 > 0.0 || (l_enc.is_some() && cfg.lambda1 > 0.0);
        let grads = StepGrads {
            frontal: frontal_trains
                .then(|| normalize_rows_backward(&z_f, &norms_f, &g_zf))
                .transpose()?,
            profile: profile_trains
                .then(|| normalize_rows_backward(&z_p, &norms_p, &g_zp))
                .transpose()?,
        };
        self.apply_encoder_grads(grads, &cache_f, &cache_p)?;

        if cfg.use_memory {
            for (i, p) in pairing.iter().enumerate() {
                self.memory
                    .update_entry(View::Frontal, p.frontal_instance, z_f.row(i))?;
                self.memory
                    .update_entry(View::Profile, p.profile_instance, z_p.row(i))?;
            }
        }

        let row = MetricsRow {
            epoch: self.epoch,
            iter: self.iteration,
            l_pacm: l_con,
            l_pada_d: l_d,
            l_pada_enc: l_enc,
            l_total,
            lr,
        };
        self.log.push(row.clone());
        self.iteration += 1;
        self.iter_in_epoch += 1;
        if self.iter_in_epoch >= self.iterations_per_epoch {
            self.iter_in_epoch = 0;
            self.epoch += 1;
        }
        Ok(row)
    }

    fn apply_encoder_grads(
        &mut self,
        grads: StepGrads,
        cache_f: &crate::numeric::ForwardCache,
        cache_p: &crate::numeric::ForwardCache,
    ) -> Result<()> {
        match (&mut self.encoders, &mut self.optimizers) {
            (
                Encoders::Coupled { frontal, profile },
                EncoderOptimizers::Coupled {
                    frontal: of,
                    profile: op,
                },
            ) => {
                if let Some(g) = &grads.frontal {
                    let (pg, _) = frontal.backward(cache_f, g)?;
                    sgd_step(frontal, &pg, of)?;
                }
                if let Some(g) = &grads.profile {
                    let (pg, _) = profile.backward(cache_p, g)?;
                    sgd_step(profile, &pg, op)?;
                }
            }
            (Encoders::Shared(net), EncoderOptimizers::Shared(o)) => {
                let mut total: Option<MlpGrads> = None;
                for (g, cache) in [(&grads.frontal, cache_f), (&grads.profile, cache_p)] {
                    if let Some(g) = g {
                        let (pg, _) = net.backward(cache, g)?;
                        match &mut total {
                            Some(t) => t.add_assign(&pg)?,
                            None => total = Some(pg),
                        }
                    }
                }
                if let Some(t) = total {
                    sgd_step(net, &t, o)?;
                }
            }
            _ => return Err(Error::Usage("encoder and optimizer layouts disagree".into())),
        }
        Ok(())
    }

    /// Runs to the end of the current epoch.
    pub fn run_epoch(&mut self) -> Result<()> {
        let epoch = self.epoch;
        while !self.is_finished() && self.epoch == epoch {
            self.step()?;
        }
        Ok(())
    }

    pub fn run(&mut self) -> Result<()> {
        while !self.is_finished() {
            self.step()?;
        }
        Ok(())
    }
}

fn iterations_per_epoch(config: &TrainConfig, data: &MultiviewDataset) -> usize {
    config
        .iterations_per_epoch
        .unwrap_or_else(|| (data.frontal().len() / config.batch_size).max(1))
}

fn check_data(config: &TrainConfig, data: &MultiviewDataset) -> Result<()> {
    let ids = data.identities();
    for &id in &ids {
        if data.indices_of(View::Frontal, id).is_empty() || data.indices_of(View::Profile, id).is_empty() {
            return Err(Error::Data(format!("training identity {id} is missing a view")));
        }
    }
    if ids.len() < config.batch_size {
        return Err(Error::Config(format!(
            "batch_size {} exceeds the {} training identities",
            config.batch_size,
            ids.len()
        )));
    }
    if config.use_memory {
        for view in [View::Frontal, View::Profile] {
            let counts = data.count_per_identity(view);
            let total: usize = counts.values().sum();
            let worst = counts.values().max().copied().unwrap_or(0);
            if total - worst < config.num_negatives {
                return Err(Error::Capacity {
                    requested: config.num_negatives,
                    available: total - worst,
                });
            }
        }
    }
    Ok(())
}

/// Trains to completion and returns the final checkpoint with the metrics log.
pub fn train(config: TrainConfig, dataset: &MultiviewDataset) -> Result<(Checkpoint, Vec<MetricsRow>)> {
    let mut t = Trainer::new(config, dataset)?;
    t.run()?;
    Ok((t.checkpoint(), t.log))
}

pub fn write_metrics_file(rows: &[MetricsRow], path: &Path) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_metrics_csv(rows, std::io::BufWriter::new(f)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    #[allow(clippy::approx_constant)]
    fn total_loss_weights() {
        let c = TrainConfig {
            lambda1: 0.0,
            ..Default::default()
        };
        assert_eq!(total_loss(2.0, -0.6931, &c).unwrap(), 2.0 * c.lambda2);
        let c = TrainConfig {
            lambda2: 0.0,
            lambda1: 0.3,
            ..Default::default()
        };
        assert_eq!(total_loss(2.0, -0.6931, &c).unwrap(), 0.3 * 0.6931);
        let c = TrainConfig::default();
        assert!((total_loss(2.0, -0.6931, &c).unwrap() - 2.06931).abs() < 1e-12);
        assert!(matches!(total_loss(f64::NAN, 0.0, &c), Err(Error::Numeric(_))));
    }

    #[test]
    fn metrics_csv_layout() {
        let rows = vec![MetricsRow {
            epoch: 0,
            iter: 3,
            l_pacm: 1.5,
            l_pada_d: None,
            l_pada_enc: Some(-0.5),
            l_total: 1.55,
            lr: 0.001,
        }];
        let mut buf = Vec::new();
        write_metrics_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some(METRICS_HEADER));
        assert_eq!(lines.next(), Some("0,3,1.5e0,,-5e-1,1.55e0,1e-3"));
    }
}
