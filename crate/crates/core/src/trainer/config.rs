use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Training hyperparameters. Deserialization rejects unknown keys.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Weight of the adversarial term.
    pub lambda1: f64,
    /// Weight of the contrastive term.
    pub lambda2: f64,
    pub temperature: f64,
    pub memory_momentum: f64,
    /// Memory negatives per anchor (`K`).
    pub num_negatives: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_initial: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_epochs: usize,
    pub optimizer_momentum: f64,
    pub weight_decay: f64,
    /// Hidden widths followed by the embedding width; the input width comes from the data.
    pub encoder_dims: Vec<usize>,
    pub discriminator_hidden: Vec<usize>,
    pub use_memory: bool,
    pub use_pada: bool,
    pub couple_encoders: bool,
    /// Epochs of contrastive-only training before adversarial updates start.
    pub pada_warmup_epochs: usize,
    /// Defaults to the number of training frontal samples divided by the batch size.
    pub iterations_per_epoch: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda1: 0.1,
            lambda2: 1.0,
            temperature: crate::contrastive::DEFAULT_TEMPERATURE,
            memory_momentum: crate::memory::DEFAULT_MOMENTUM,
            num_negatives: 200,
            batch_size: 32,
            epochs: 20,
            lr_initial: 0.001,
            lr_decay_factor: 0.1,
            lr_decay_epochs: 10,
            optimizer_momentum: 0.9,
            weight_decay: 1e-5,
            encoder_dims: vec![128, 64, 32],
            discriminator_hidden: vec![256, 256],
            use_memory: true,
            use_pada: true,
            couple_encoders: true,
            pada_warmup_epochs: 1,
            iterations_per_epoch: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return fail("lambda1 and lambda2 must be nonnegative");
        }
        if !(self.temperature > 0.0) {
            return fail("temperature must be positive");
        }
        if !(0.0..=1.0).contains(&self.memory_momentum) {
            return fail("memory_momentum must lie in [0, 1]");
        }
        if self.num_negatives < 1 {
            return fail("num_negatives must be at least 1");
        }
        if self.batch_size < 2 {
            return fail("batch_size must be at least 2");
        }
        if !(self.lr_initial > 0.0) || !(self.lr_decay_factor > 0.0) || self.lr_decay_epochs == 0 {
            return fail("learning-rate schedule needs lr_initial > 0, lr_decay_factor > 0, lr_decay_epochs >= 1");
        }
        if !(0.0..1.0).contains(&self.optimizer_momentum) || !(self.weight_decay >= 0.0) {
            return fail("optimizer_momentum must lie in [0, 1) and weight_decay must be nonnegative");
        }
        if self.encoder_dims.is_empty() || self.encoder_dims.contains(&0) {
            return fail("encoder_dims must list positive widths");
        }
        if *self.encoder_dims.last().unwrap() < 2 {
            return fail("embedding width must be at least 2");
        }
        if self.discriminator_hidden.contains(&0) {
            return fail("discriminator_hidden widths must be positive");
        }
        if self.iterations_per_epoch == Some(0) {
            return fail("iterations_per_epoch must be positive");
        }
        Ok(())
    }

    /// Learning rate during the 0-based `epoch`: step decay.
    pub fn learning_rate(&self, epoch: usize) -> f64 {
        self.lr_initial * self.lr_decay_factor.powi((epoch / self.lr_decay_epochs) as i32)
    }

    pub fn embedding_dim(&self) -> usize {
        *self.encoder_dims.last().expect("validated")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: TrainConfig = serde_json::from_str(text).map_err(|e| Error::json("<config>", e))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let c: TrainConfig = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        c.validate()?;
        Ok(c)
    }
}
