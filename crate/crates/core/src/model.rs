//! Node parameters, feature maps and the synthesized forward pass.
//!
//! Each classification node owns one residual column; the effective
//! predictor of a label-set member is the sum of residuals over its codeword
//! (itself plus ancestors), computed on the fly as `residuals . Q`. No
//! per-label-set parameters exist, so any cut of the tree is a valid
//! classifier for free.

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::taxonomy::{CodewordMatrix, LabelSet, NodeId, Taxonomy, TaxonomyError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimMismatch { context: &'static str, expected: usize, got: usize },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error(transparent)]
    Taxonomy(#[from] TaxonomyError),
}

/// Residual parameter columns, one per classification node, `feature_dim`
/// rows each.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeParams {
    residuals: Array2<f64>,
}

impl NodeParams {
    pub fn new(residuals: Array2<f64>) -> Result<Self, ModelError> {
        if !residuals.iter().all(|v| v.is_finite()) {
            return Err(ModelError::NonFinite("node residuals"));
        }
        Ok(NodeParams { residuals })
    }

    pub fn zeros(feature_dim: usize, num_nodes: usize) -> Self {
        NodeParams { residuals: Array2::zeros((feature_dim, num_nodes)) }
    }

    /// Uniform init in `(-scale, scale)`, drawn row-major. `scale` 0 skips
    /// the generator entirely so downstream draws are unaffected.
    pub fn init<R: Rng + ?Sized>(
        feature_dim: usize,
        num_nodes: usize,
        scale: f64,
        rng: &mut R,
    ) -> Self {
        if scale == 0.0 {
            return Self::zeros(feature_dim, num_nodes);
        }
        let data: Vec<f64> = (0..feature_dim * num_nodes)
            .map(|_| rng.random_range(-scale..scale))
            .collect();
        NodeParams {
            residuals: Array2::from_shape_vec((feature_dim, num_nodes), data)
                .expect("shape matches draw count"),
        }
    }

    pub fn init_seeded(feature_dim: usize, num_nodes: usize, scale: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::init(feature_dim, num_nodes, scale, &mut rng)
    }

    pub fn feature_dim(&self) -> usize {
        self.residuals.nrows()
    }

    pub fn num_nodes(&self) -> usize {
        self.residuals.ncols()
    }

    pub fn residuals(&self) -> &Array2<f64> {
        &self.residuals
    }

    pub fn residuals_mut(&mut self) -> &mut Array2<f64> {
        &mut self.residuals
    }

    /// Residual column of one codeword row.
    pub fn column(&self, row: usize) -> ArrayView1<'_, f64> {
        self.residuals.column(row)
    }

    /// Effective predictor matrix for a label set: `residuals . Q`, one
    /// column per member, equal to the codeword-weighted sum of residuals.
    pub fn synthesize(&self, codewords: &CodewordMatrix) -> Result<Array2<f64>, ModelError> {
        if codewords.data.nrows() != self.num_nodes() {
            return Err(ModelError::DimMismatch {
                context: "codeword rows vs node count",
                expected: self.num_nodes(),
                got: codewords.data.nrows(),
            });
        }
        Ok(self.residuals.dot(&codewords.data))
    }

    pub fn validate_finite(&self) -> Result<(), ModelError> {
        if self.residuals.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(ModelError::NonFinite("node residuals"))
        }
    }
}

/// Maps raw feature vectors to the classifier's input space.
#[derive(Clone, Debug, PartialEq)]
pub enum FeatureMap {
    /// Pass-through of `dim`-dimensional features.
    Identity { dim: usize },
    /// Trainable affine map `h = weight^T x + bias`; `weight` is
    /// input-by-output.
    Linear { weight: Array2<f64>, bias: Array1<f64> },
}

impl FeatureMap {
    pub fn identity(dim: usize) -> Self {
        FeatureMap::Identity { dim }
    }

    /// Linear map with uniform `(-scale, scale)` weights (row-major draws)
    /// and zero bias.
    pub fn linear_init<R: Rng + ?Sized>(
        input_dim: usize,
        output_dim: usize,
        scale: f64,
        rng: &mut R,
    ) -> Self {
        let weight = if scale == 0.0 {
            Array2::zeros((input_dim, output_dim))
        } else {
            let data: Vec<f64> = (0..input_dim * output_dim)
                .map(|_| rng.random_range(-scale..scale))
                .collect();
            Array2::from_shape_vec((input_dim, output_dim), data)
                .expect("shape matches draw count")
        };
        FeatureMap::Linear { weight, bias: Array1::zeros(output_dim) }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            FeatureMap::Identity { dim } => *dim,
            FeatureMap::Linear { weight, .. } => weight.nrows(),
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            FeatureMap::Identity { dim } => *dim,
            FeatureMap::Linear { weight, .. } => weight.ncols(),
        }
    }

    pub fn apply(&self, x: ArrayView1<'_, f64>) -> Result<Array1<f64>, ModelError> {
        if x.len() != self.input_dim() {
            return Err(ModelError::DimMismatch {
                context: "feature input",
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        if !x.iter().all(|v| v.is_finite()) {
            return Err(ModelError::NonFinite("input features"));
        }
        match self {
            FeatureMap::Identity { .. } => Ok(x.to_owned()),
            FeatureMap::Linear { weight, bias } => Ok(weight.t().dot(&x) + bias),
        }
    }
}

/// Softmax output over one label set.
#[derive(Clone, Debug)]
pub struct Posterior {
    pub logits: Array1<f64>,
    pub probs: Array1<f64>,
    pub label_set: LabelSet,
}

impl Posterior {
    /// Log-probability of member `i`, computed from logits so it stays
    /// finite even when the probability underflows.
    pub fn log_prob(&self, i: usize) -> f64 {
        self.logits[i] - log_sum_exp(self.logits.view())
    }
}

/// Numerically stable log(sum(exp(z))).
pub fn log_sum_exp(z: ArrayView1<'_, f64>) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Stable softmax; output sums to 1.
pub fn softmax(z: ArrayView1<'_, f64>) -> Array1<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut e: Array1<f64> = z.mapv(|v| (v - m).exp());
    let total = e.sum();
    e.mapv_inplace(|v| v / total);
    e
}

/// Posterior over `set` for features `x`: softmax of
/// `(residuals . Q)^T h(x)`.
pub fn forward(
    x: ArrayView1<'_, f64>,
    set: &LabelSet,
    taxonomy: &Taxonomy,
    params: &NodeParams,
    fmap: &FeatureMap,
) -> Result<Posterior, ModelError> {
    check_model_dims(taxonomy, params, fmap)?;
    let h = fmap.apply(x)?;
    let codewords = taxonomy.codeword_matrix(set)?;
    let w = params.synthesize(&codewords)?;
    let logits = w.t().dot(&h);
    let probs = softmax(logits.view());
    Ok(Posterior { logits, probs, label_set: set.clone() })
}

/// Node-conditional posterior over the children of `n`. Ancestor rows are
/// zeroed in the codewords, which leaves the softmax unchanged (a shared
/// additive term cancels) but keeps each column a single residual.
pub fn forward_node(
    x: ArrayView1<'_, f64>,
    n: NodeId,
    taxonomy: &Taxonomy,
    params: &NodeParams,
    fmap: &FeatureMap,
) -> Result<Posterior, ModelError> {
    check_model_dims(taxonomy, params, fmap)?;
    let h = fmap.apply(x)?;
    let rec = taxonomy.try_record(n)?;
    if rec.is_leaf() {
        return Err(TaxonomyError::NotInternal(rec.name.clone()).into());
    }
    let children = rec.children.clone();
    let logits = Array1::from_iter(
        children
            .iter()
            .map(|&c| params.column(c.index() - 1).dot(&h)),
    );
    let probs = softmax(logits.view());
    Ok(Posterior { logits, probs, label_set: taxonomy.children_label_set(n)? })
}

pub(crate) fn check_model_dims(
    taxonomy: &Taxonomy,
    params: &NodeParams,
    fmap: &FeatureMap,
) -> Result<(), ModelError> {
    if params.num_nodes() != taxonomy.classification_count() {
        return Err(ModelError::DimMismatch {
            context: "node count",
            expected: taxonomy.classification_count(),
            got: params.num_nodes(),
        });
    }
    if fmap.output_dim() != params.feature_dim() {
        return Err(ModelError::DimMismatch {
            context: "feature map output vs residual rows",
            expected: params.feature_dim(),
            got: fmap.output_dim(),
        });
    }
    Ok(())
}
