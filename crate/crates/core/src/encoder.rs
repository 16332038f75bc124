use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::numeric::{normalize_rows, Matrix, MlpParams, NormMode};
use crate::synth::View;

/// The frontal and profile encoders.
///
/// `Shared` is the single-encoder variant: both views go through one parameter
/// set. `Coupled` keeps two disjoint networks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Encoders {
    Shared(MlpParams),
    Coupled { frontal: MlpParams, profile: MlpParams },
}

impl Encoders {
    pub fn frontal(&self) -> &MlpParams {
        match self {
            Encoders::Shared(p) => p,
            Encoders::Coupled { frontal, .. } => frontal,
        }
    }

    pub fn profile(&self) -> &MlpParams {
        match self {
            Encoders::Shared(p) => p,
            Encoders::Coupled { profile, .. } => profile,
        }
    }

    pub fn for_view(&self, view: View) -> &MlpParams {
        match view {
            View::Frontal => self.frontal(),
            View::Profile => self.profile(),
        }
    }

    pub fn is_shared(&self) -> bool {
        matches!(self, Encoders::Shared(_))
    }

    pub fn embedding_dim(&self) -> usize {
        self.frontal().output_dim()
    }

    /// Unit-norm embeddings of a feature batch through the view's encoder.
    pub fn embed(&self, view: View, features: &Matrix) -> Result<Matrix> {
        let (raw, _) = self.for_view(view).forward(features, NormMode::Running)?;
        Ok(normalize_rows(&raw)?.0)
    }
}
