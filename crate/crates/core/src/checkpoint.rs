//! Model persistence. Parameters are keyed by node name, not id, so a
//! checkpoint only loads against a taxonomy with the same node set; the
//! canonical id scheme then guarantees identical row assignment.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{FeatureMap, NodeParams};
use crate::taxonomy::Taxonomy;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("checkpoint is not valid JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint does not match the taxonomy: {0}")]
    TaxonomyMismatch(String),
    #[error("inconsistent shape: {0}")]
    Shape(String),
    #[error("checkpoint contains non-finite values")]
    NonFinite,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum FeatureMapSpec {
    Identity { dim: usize },
    Linear { input_dim: usize, output_dim: usize, weight: Vec<f64>, bias: Vec<f64> },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    /// Rows per residual column.
    pub feature_dim: usize,
    /// Node names in codeword-row order; row i belongs to node_names[i].
    pub node_names: Vec<String>,
    /// Row-major `feature_dim x node_names.len()` residual matrix.
    pub residuals: Vec<f64>,
    pub feature_map: FeatureMapSpec,
}

impl Checkpoint {
    pub fn from_model(taxonomy: &Taxonomy, params: &NodeParams, fmap: &FeatureMap) -> Self {
        let node_names = (0..taxonomy.classification_count())
            .map(|row| {
                let id = taxonomy.node_at_row(row).expect("row in range");
                taxonomy.name(id).to_string()
            })
            .collect();
        let feature_map = match fmap {
            FeatureMap::Identity { dim } => FeatureMapSpec::Identity { dim: *dim },
            FeatureMap::Linear { weight, bias } => FeatureMapSpec::Linear {
                input_dim: weight.nrows(),
                output_dim: weight.ncols(),
                weight: weight.iter().copied().collect(),
                bias: bias.to_vec(),
            },
        };
        Checkpoint {
            version: CHECKPOINT_VERSION,
            feature_dim: params.feature_dim(),
            node_names,
            residuals: params.residuals().iter().copied().collect(),
            feature_map,
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let ck: Checkpoint = serde_json::from_str(&fs::read_to_string(path)?)?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Version(ck.version));
        }
        Ok(ck)
    }

    /// Rebuilds the model, validating names and shapes against `taxonomy`.
    pub fn into_model(
        self,
        taxonomy: &Taxonomy,
    ) -> Result<(NodeParams, FeatureMap), CheckpointError> {
        let n = taxonomy.classification_count();
        if self.node_names.len() != n {
            return Err(CheckpointError::TaxonomyMismatch(format!(
                "{} nodes in checkpoint, {} in taxonomy",
                self.node_names.len(),
                n
            )));
        }
        for (row, name) in self.node_names.iter().enumerate() {
            let id = taxonomy
                .node_by_name(name)
                .map_err(|_| CheckpointError::TaxonomyMismatch(format!("unknown node {name:?}")))?;
            if id.index() != row + 1 {
                return Err(CheckpointError::TaxonomyMismatch(format!(
                    "node {name:?} sits at row {} in the checkpoint but row {} in the taxonomy",
                    row,
                    id.index() - 1
                )));
            }
        }
        if self.residuals.len() != self.feature_dim * n {
            return Err(CheckpointError::Shape(format!(
                "{} residual values for a {} x {} matrix",
                self.residuals.len(),
                self.feature_dim,
                n
            )));
        }
        let residuals = Array2::from_shape_vec((self.feature_dim, n), self.residuals)
            .expect("length checked above");
        let params = NodeParams::new(residuals).map_err(|_| CheckpointError::NonFinite)?;

        let fmap = match self.feature_map {
            FeatureMapSpec::Identity { dim } => FeatureMap::Identity { dim },
            FeatureMapSpec::Linear { input_dim, output_dim, weight, bias } => {
                if weight.len() != input_dim * output_dim || bias.len() != output_dim {
                    return Err(CheckpointError::Shape(format!(
                        "linear map {} x {} with {} weights and {} biases",
                        input_dim,
                        output_dim,
                        weight.len(),
                        bias.len()
                    )));
                }
                if !weight.iter().chain(bias.iter()).all(|v| v.is_finite()) {
                    return Err(CheckpointError::NonFinite);
                }
                FeatureMap::Linear {
                    weight: Array2::from_shape_vec((input_dim, output_dim), weight)
                        .expect("length checked above"),
                    bias: Array1::from_vec(bias),
                }
            }
        };
        if fmap.output_dim() != self.feature_dim {
            return Err(CheckpointError::Shape(format!(
                "feature map produces {} dims, residuals expect {}",
                fmap.output_dim(),
                self.feature_dim
            )));
        }
        Ok((params, fmap))
    }
}
