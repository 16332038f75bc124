//! Binary checkpoint file.
//!
//! Layout: 8-byte magic `PACMCKPT`, little-endian `u32` version, little-endian
//! `u64` manifest length, the JSON manifest, then every parameter block as raw
//! little-endian `f64` in manifest order.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Checkpoint, EncoderOptimizers, TrainConfig};
use crate::encoder::Encoders;
use crate::error::{Error, Result};
use crate::memory::MemoryBuffer;
use crate::numeric::{Activation, Matrix, MlpGrads, MlpParams, NormState, OptimizerState};
use crate::pada::Discriminator;
use crate::rng::RngState;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"PACMCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BlockSpec {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NetworkMeta {
    layer_dims: Vec<usize>,
    activation: Activation,
    batch_norm: bool,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OptimizerMeta {
    network: String,
    learning_rate: f64,
    momentum: f64,
    weight_decay: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MemoryMeta {
    frontal_identity: Vec<usize>,
    profile_identity: Vec<usize>,
    momentum: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    config: TrainConfig,
    epoch: usize,
    iter_in_epoch: usize,
    iteration: usize,
    batch_rng: RngState,
    negative_rng: RngState,
    dataset_fingerprint: u64,
    shared_encoder: bool,
    networks: BTreeMap<String, NetworkMeta>,
    optimizers: BTreeMap<String, OptimizerMeta>,
    memory: MemoryMeta,
    blocks: Vec<BlockSpec>,
}

#[derive(Default)]
struct BlockWriter {
    specs: Vec<BlockSpec>,
    data: Vec<f64>,
}

impl BlockWriter {
    fn push(&mut self, name: String, shape: Vec<usize>, values: &[f64]) {
        self.specs.push(BlockSpec { name, shape });
        self.data.extend_from_slice(values);
    }

    fn network(&mut self, prefix: &str, p: &MlpParams) {
        for (l, (w, b)) in p.weights.iter().zip(&p.biases).enumerate() {
            self.push(format!("{prefix}.w{l}"), vec![w.rows(), w.cols()], w.as_slice());
            self.push(format!("{prefix}.b{l}"), vec![b.len()], b);
        }
        if let Some(norms) = &p.norm_state {
            for (l, s) in norms.iter().enumerate() {
                self.push(
                    format!("{prefix}.bn{l}.mean"),
                    vec![s.running_mean.len()],
                    &s.running_mean,
                );
                self.push(format!("{prefix}.bn{l}.var"), vec![s.running_var.len()], &s.running_var);
            }
        }
    }

    fn velocity(&mut self, prefix: &str, v: &MlpGrads) {
        for (l, (w, b)) in v.weights.iter().zip(&v.biases).enumerate() {
            self.push(format!("{prefix}.vw{l}"), vec![w.rows(), w.cols()], w.as_slice());
            self.push(format!("{prefix}.vb{l}"), vec![b.len()], b);
        }
    }
}

struct BlockReader {
    blocks: BTreeMap<String, (Vec<usize>, Vec<f64>)>,
}

impl BlockReader {
    fn take(&mut self, name: &str, shape: &[usize]) -> Result<Vec<f64>> {
        let (s, v) = self
            .blocks
            .remove(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing block {name}")))?;
        if s != shape {
            return Err(Error::Checkpoint(format!(
                "block {name} has shape {s:?}, expected {shape:?}"
            )));
        }
        Ok(v)
    }

    fn matrix(&mut self, name: &str, rows: usize, cols: usize) -> Result<Matrix> {
        Matrix::from_vec(rows, cols, self.take(name, &[rows, cols])?)
    }

    fn network(&mut self, prefix: &str, meta: &NetworkMeta) -> Result<MlpParams> {
        let dims = &meta.layer_dims;
        if dims.len() < 2 {
            return Err(Error::Checkpoint(format!("network {prefix} has too few layers")));
        }
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for l in 0..dims.len() - 1 {
            weights.push(self.matrix(&format!("{prefix}.w{l}"), dims[l + 1], dims[l])?);
            biases.push(self.take(&format!("{prefix}.b{l}"), &[dims[l + 1]])?);
        }
        let norm_state = if meta.batch_norm {
            let mut v = Vec::new();
            for (l, &w) in dims[1..dims.len() - 1].iter().enumerate() {
                v.push(NormState {
                    running_mean: self.take(&format!("{prefix}.bn{l}.mean"), &[w])?,
                    running_var: self.take(&format!("{prefix}.bn{l}.var"), &[w])?,
                });
            }
            Some(v)
        } else {
            None
        };
        let p = MlpParams {
            layer_dims: dims.clone(),
            weights,
            biases,
            norm_state,
            activation: meta.activation,
        };
        p.validate()
            .map_err(|e| Error::Checkpoint(format!("network {prefix}: {e}")))?;
        Ok(p)
    }

    fn optimizer(&mut self, prefix: &str, meta: &OptimizerMeta, params: &MlpParams) -> Result<OptimizerState> {
        let mut velocity = MlpGrads::zeros_like(params);
        for l in 0..params.num_layers() {
            let (r, c) = params.weights[l].shape();
            velocity.weights[l] = self.matrix(&format!("{prefix}.vw{l}"), r, c)?;
            velocity.biases[l] = self.take(&format!("{prefix}.vb{l}"), &[r])?;
        }
        Ok(OptimizerState {
            learning_rate: meta.learning_rate,
            momentum: meta.momentum,
            weight_decay: meta.weight_decay,
            velocity,
        })
    }
}

fn net_meta(p: &MlpParams) -> NetworkMeta {
    NetworkMeta {
        layer_dims: p.layer_dims.clone(),
        activation: p.activation,
        batch_norm: p.norm_state.is_some(),
    }
}

fn opt_meta(network: &str, o: &OptimizerState) -> OptimizerMeta {
    OptimizerMeta {
        network: network.into(),
        learning_rate: o.learning_rate,
        momentum: o.momentum,
        weight_decay: o.weight_decay,
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = BlockWriter::default();
        let mut networks = BTreeMap::new();
        let mut optimizers = BTreeMap::new();
        let mut nets: Vec<(&str, &MlpParams)> = match &self.encoders {
            Encoders::Shared(p) => vec![("encoder", p)],
            Encoders::Coupled { frontal, profile } => vec![("frontal", frontal), ("profile", profile)],
        };
        nets.push(("discriminator", &self.discriminator.net));
        for (name, p) in &nets {
            w.network(name, p);
            networks.insert(name.to_string(), net_meta(p));
        }
        let mut opts: Vec<(&str, &str, &OptimizerState)> = match &self.encoder_optimizers {
            EncoderOptimizers::Shared(o) => vec![("opt.encoder", "encoder", o)],
            EncoderOptimizers::Coupled { frontal, profile } => {
                vec![("opt.frontal", "frontal", frontal), ("opt.profile", "profile", profile)]
            }
        };
        opts.push(("opt.discriminator", "discriminator", &self.discriminator_optimizer));
        for (name, net, o) in &opts {
            w.velocity(name, &o.velocity);
            optimizers.insert(name.to_string(), opt_meta(net, o));
        }
        for (name, view) in [
            ("memory.frontal", crate::synth::View::Frontal),
            ("memory.profile", crate::synth::View::Profile),
        ] {
            let m = self.memory.rows(view);
            w.push(name.into(), vec![m.rows(), m.cols()], m.as_slice());
        }
        let manifest = Manifest {
            config: self.config.clone(),
            epoch: self.epoch,
            iter_in_epoch: self.iter_in_epoch,
            iteration: self.iteration,
            batch_rng: self.batch_rng.clone(),
            negative_rng: self.negative_rng.clone(),
            dataset_fingerprint: self.dataset_fingerprint,
            shared_encoder: self.encoders.is_shared(),
            networks,
            optimizers,
            memory: MemoryMeta {
                frontal_identity: self.memory.identities(crate::synth::View::Frontal).to_vec(),
                profile_identity: self.memory.identities(crate::synth::View::Profile).to_vec(),
                momentum: self.memory.momentum(),
            },
            blocks: w.specs,
        };
        let json = serde_json::to_vec(&manifest).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut out = Vec::with_capacity(20 + json.len() + 8 * w.data.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for x in &w.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let err = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(err("not a checkpoint file (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
            )));
        }
        let len = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
        let rest = &bytes[20..];
        if len > rest.len() as u64 {
            return Err(Error::Checkpoint(format!(
                "manifest length {len} exceeds the {} remaining bytes",
                rest.len()
            )));
        }
        let (json, payload) = rest.split_at(len as usize);
        let manifest: Manifest =
            serde_json::from_slice(json).map_err(|e| Error::Checkpoint(format!("manifest: {e}")))?;
        let expected: usize = manifest.blocks.iter().map(|b| b.shape.iter().product::<usize>()).sum();
        if payload.len() != expected * 8 {
            return Err(Error::Checkpoint(format!(
                "payload holds {} bytes, manifest describes {}",
                payload.len(),
                expected * 8
            )));
        }
        let mut floats = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        let mut blocks = BTreeMap::new();
        for b in manifest.blocks {
            let n: usize = b.shape.iter().product();
            let values: Vec<f64> = floats.by_ref().take(n).collect();
            if blocks.insert(b.name.clone(), (b.shape, values)).is_some() {
                return Err(Error::Checkpoint(format!("duplicate block {}", b.name)));
            }
        }
        let mut r = BlockReader { blocks };
        let net = |r: &mut BlockReader, name: &str| -> Result<MlpParams> {
            let meta = manifest
                .networks
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing network {name}")))?;
            r.network(name, meta)
        };
        let opt = |r: &mut BlockReader, name: &str, params: &MlpParams| -> Result<OptimizerState> {
            let meta = manifest
                .optimizers
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing optimizer {name}")))?;
            r.optimizer(name, meta, params)
        };
        let (encoders, encoder_optimizers) = if manifest.shared_encoder {
            let p = net(&mut r, "encoder")?;
            let o = opt(&mut r, "opt.encoder", &p)?;
            (Encoders::Shared(p), EncoderOptimizers::Shared(o))
        } else {
            let f = net(&mut r, "frontal")?;
            let p = net(&mut r, "profile")?;
            let of = opt(&mut r, "opt.frontal", &f)?;
            let op = opt(&mut r, "opt.profile", &p)?;
            (
                Encoders::Coupled { frontal: f, profile: p },
                EncoderOptimizers::Coupled {
                    frontal: of,
                    profile: op,
                },
            )
        };
        let disc = net(&mut r, "discriminator")?;
        let disc_opt = opt(&mut r, "opt.discriminator", &disc)?;
        let d = encoders.embedding_dim();
        let mm = &manifest.memory;
        let frontal = r.matrix("memory.frontal", mm.frontal_identity.len(), d)?;
        let profile = r.matrix("memory.profile", mm.profile_identity.len(), d)?;
        let memory = MemoryBuffer::from_rows(
            frontal,
            mm.frontal_identity.clone(),
            profile,
            mm.profile_identity.clone(),
            mm.momentum,
        )
        .map_err(|e| Error::Checkpoint(format!("memory: {e}")))?;
        if let Some(extra) = r.blocks.keys().next() {
            return Err(Error::Checkpoint(format!("unexpected block {extra}")));
        }
        Ok(Checkpoint {
            config: manifest.config,
            encoders,
            encoder_optimizers,
            discriminator: Discriminator { net: disc },
            discriminator_optimizer: disc_opt,
            memory,
            epoch: manifest.epoch,
            iter_in_epoch: manifest.iter_in_epoch,
            iteration: manifest.iteration,
            batch_rng: manifest.batch_rng,
            negative_rng: manifest.negative_rng,
            dataset_fingerprint: manifest.dataset_fingerprint,
        })
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = ckpt.to_bytes()?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
