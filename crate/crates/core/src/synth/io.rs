use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{IdentitySplit, MultiviewDataset, Sample, SynthConfig, View};
use crate::error::{Error, Result};

pub const DATASET_FORMAT: &str = "pacm-dataset";
pub const DATASET_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetFile {
    format: String,
    version: u32,
    seed: u64,
    config: SynthConfig,
    split: IdentitySplit,
    samples: Vec<Sample>,
}

impl MultiviewDataset {
    pub fn to_json(&self) -> Result<String> {
        let file = DatasetFile {
            format: DATASET_FORMAT.into(),
            version: DATASET_VERSION,
            seed: self.config.seed,
            config: self.config.clone(),
            split: self.split.clone(),
            samples: self.frontal.iter().chain(&self.profile).cloned().collect(),
        };
        serde_json::to_string_pretty(&file).map_err(|e| Error::json("<dataset>", e))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: DatasetFile = serde_json::from_str(text).map_err(|e| Error::json("<dataset>", e))?;
        if file.format != DATASET_FORMAT || file.version != DATASET_VERSION {
            return Err(Error::Data(format!(
                "unsupported dataset format {} v{}",
                file.format, file.version
            )));
        }
        let (frontal, profile): (Vec<Sample>, Vec<Sample>) =
            file.samples.into_iter().partition(|s| s.view == View::Frontal);
        let ids: Vec<usize> = frontal.iter().chain(&profile).map(|s| s.instance_id).collect();
        let d = MultiviewDataset::new(file.config, frontal, profile, file.split)?;
        let expected: Vec<usize> = d.frontal.iter().chain(&d.profile).map(|s| s.instance_id).collect();
        if ids != expected {
            return Err(Error::Data(
                "instance ids must be contiguous, frontal samples first".into(),
            ));
        }
        Ok(d)
    }
}

pub fn save_dataset(dataset: &MultiviewDataset, path: &Path) -> Result<()> {
    let text = dataset.to_json()?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_dataset(path: &Path) -> Result<MultiviewDataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    MultiviewDataset::from_json(&text).map_err(|e| match e {
        Error::Json { source, .. } => Error::json(path, source),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use crate::synth::{generate_dataset, MultiviewDataset, SynthConfig};

    #[test]
    fn json_round_trip() {
        let d = generate_dataset(&SynthConfig {
            num_identities: 5,
            num_heldout_identities: 2,
            samples_per_identity_per_view: 2,
            latent_dim: 3,
            input_dim: 5,
            ..SynthConfig::reference(4)
        })
        .unwrap();
        let text = d.to_json().unwrap();
        let back = MultiviewDataset::from_json(&text).unwrap();
        assert_eq!(back, d);
        assert_eq!(back.to_json().unwrap(), text);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let d = generate_dataset(&SynthConfig {
            num_identities: 2,
            num_heldout_identities: 0,
            samples_per_identity_per_view: 1,
            latent_dim: 2,
            input_dim: 2,
            ..SynthConfig::reference(4)
        })
        .unwrap();
        let text = d.to_json().unwrap().replacen("\"seed\"", "\"bogus\": 1, \"seed\"", 1);
        assert!(MultiviewDataset::from_json(&text).is_err());
    }
}
