//! Test-time prediction with per-node rejection.
//!
//! The primary predictor walks the tree from the root, at each internal
//! node taking the child with the largest conditional posterior, and stops
//! as soon as that confidence drops below the competence level gamma. The
//! exit node (possibly internal, possibly the root itself) is the
//! prediction. Two baselines share the Decision shape: a bottom-up
//! readjustment of a flat leaf softmax (rhc) and flat classification with a
//! global rejection threshold (rp).

use ndarray::{Array1, ArrayView1};
use thiserror::Error;

use crate::data::Dataset;
use crate::evaluation::{cpb_literal, EvalError};
use crate::model::{forward_node, softmax, FeatureMap, ModelError, NodeParams};
use crate::taxonomy::{NodeId, Taxonomy};

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error("competence level must lie in [0, 1], got {0}")]
    InvalidCompetence(f64),
    #[error("rejection rate must lie in [0, 1], got {0}")]
    InvalidRate(f64),
    #[error("no scores to threshold")]
    EmptyScores,
    #[error("gamma grid is empty")]
    EmptyGrid,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// Validated competence level in [0, 1].
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
pub struct CompetenceLevel(f64);

impl CompetenceLevel {
    pub fn new(value: f64) -> Result<Self, InferenceError> {
        if value.is_finite() && (0.0..=1.0).contains(&value) {
            Ok(CompetenceLevel(value))
        } else {
            Err(InferenceError::InvalidCompetence(value))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// One visited internal node: the winning child mass seen there and the
/// child taken, or `None` when the walk stopped at this node.
#[derive(Clone, Debug)]
pub struct PathStep {
    pub node: NodeId,
    pub confidence: f64,
    pub chosen: Option<NodeId>,
}

/// Outcome of one prediction walk.
#[derive(Clone, Debug)]
pub struct Decision {
    pub exit_node: NodeId,
    pub path: Vec<PathStep>,
    pub at_leaf: bool,
    pub competence: f64,
}

impl Decision {
    /// Confidence at the exit: the last recorded child mass, 1 for the
    /// degenerate walk that never evaluated a node.
    pub fn exit_confidence(&self) -> f64 {
        self.path.last().map(|s| s.confidence).unwrap_or(1.0)
    }

    /// Nodes visited, root first, exit last.
    pub fn visited(&self) -> Vec<NodeId> {
        let mut nodes: Vec<NodeId> = self.path.iter().map(|s| s.node).collect();
        nodes.push(self.exit_node);
        nodes.dedup();
        nodes
    }

    /// Smallest confidence seen along the walk (1 if nothing was
    /// evaluated). On a full gamma = 0 walk this is the largest competence
    /// level at which the same sample still reaches a leaf.
    pub fn min_confidence(&self) -> f64 {
        self.path
            .iter()
            .map(|s| s.confidence)
            .fold(1.0, f64::min)
    }
}

fn argmax(probs: &Array1<f64>) -> (usize, f64) {
    let mut best = 0;
    let mut conf = f64::NEG_INFINITY;
    for (i, &p) in probs.iter().enumerate() {
        if p > conf {
            best = i;
            conf = p;
        }
    }
    (best, conf)
}

/// Top-down prediction: descend along the most probable child while the
/// conditional confidence stays at or above gamma; exit where it does not
/// (possibly at the root). Argmax ties go to the lowest label-set index.
pub fn rtc_predict(
    x: ArrayView1<'_, f64>,
    taxonomy: &Taxonomy,
    params: &NodeParams,
    fmap: &FeatureMap,
    gamma: CompetenceLevel,
) -> Result<Decision, ModelError> {
    let mut node = taxonomy.root();
    let mut path = Vec::new();
    loop {
        if taxonomy.record(node).is_leaf() {
            break;
        }
        let post = forward_node(x, node, taxonomy, params, fmap)?;
        let (best, confidence) = argmax(&post.probs);
        if confidence < gamma.value() {
            path.push(PathStep { node, confidence, chosen: None });
            break;
        }
        let child = post.label_set.members()[best];
        path.push(PathStep { node, confidence, chosen: Some(child) });
        node = child;
    }
    Ok(Decision {
        exit_node: node,
        at_leaf: taxonomy.record(node).is_leaf(),
        path,
        competence: gamma.value(),
    })
}

pub fn rtc_predict_all(
    ds: &Dataset,
    taxonomy: &Taxonomy,
    params: &NodeParams,
    fmap: &FeatureMap,
    gamma: CompetenceLevel,
) -> Result<Vec<Decision>, ModelError> {
    (0..ds.len())
        .map(|i| rtc_predict(ds.feature(i), taxonomy, params, fmap, gamma))
        .collect()
}

/// Flat leaf posterior from a flat model (one residual column per leaf of
/// `taxonomy`, in canonical leaf order).
pub fn leaf_posterior(
    x: ArrayView1<'_, f64>,
    taxonomy: &Taxonomy,
    flat_params: &NodeParams,
    fmap: &FeatureMap,
) -> Result<Array1<f64>, ModelError> {
    if flat_params.num_nodes() != taxonomy.leaf_count() {
        return Err(ModelError::DimMismatch {
            context: "flat model columns vs leaf count",
            expected: taxonomy.leaf_count(),
            got: flat_params.num_nodes(),
        });
    }
    let h = fmap.apply(x)?;
    if h.len() != flat_params.feature_dim() {
        return Err(ModelError::DimMismatch {
            context: "feature map output vs residual rows",
            expected: flat_params.feature_dim(),
            got: h.len(),
        });
    }
    let logits = flat_params.residuals().t().dot(&h);
    Ok(softmax(logits.view()))
}

/// Bottom-up readjustment baseline: leaf probabilities from a flat model
/// are summed into node masses, then the tree is walked top-down along the
/// heaviest child while its mass stays at or above gamma.
pub fn rhc_predict(
    x: ArrayView1<'_, f64>,
    taxonomy: &Taxonomy,
    flat_params: &NodeParams,
    fmap: &FeatureMap,
    gamma: CompetenceLevel,
) -> Result<Decision, ModelError> {
    let probs = leaf_posterior(x, taxonomy, flat_params, fmap)?;
    let mut mass = vec![0.0f64; taxonomy.len()];
    for (pos, &leaf) in taxonomy.leaf_ids().iter().enumerate() {
        let p = probs[pos];
        mass[leaf.index()] += p;
        for &a in &taxonomy.record(leaf).ancestors {
            mass[a.index()] += p;
        }
        mass[taxonomy.root().index()] += p;
    }

    let mut node = taxonomy.root();
    let mut path = Vec::new();
    loop {
        let rec = taxonomy.record(node);
        if rec.is_leaf() {
            break;
        }
        let (mut best, mut confidence) = (rec.children[0], f64::NEG_INFINITY);
        for &c in &rec.children {
            if mass[c.index()] > confidence {
                best = c;
                confidence = mass[c.index()];
            }
        }
        if confidence < gamma.value() {
            path.push(PathStep { node, confidence, chosen: None });
            break;
        }
        path.push(PathStep { node, confidence, chosen: Some(best) });
        node = best;
    }
    Ok(Decision {
        exit_node: node,
        at_leaf: taxonomy.record(node).is_leaf(),
        path,
        competence: gamma.value(),
    })
}

/// Flat classification with rejection: accept the argmax leaf when its
/// posterior reaches the threshold (equality accepts), otherwise exit at
/// the root.
pub fn flat_reject_predict(
    x: ArrayView1<'_, f64>,
    taxonomy: &Taxonomy,
    flat_params: &NodeParams,
    fmap: &FeatureMap,
    threshold: f64,
) -> Result<Decision, ModelError> {
    let probs = leaf_posterior(x, taxonomy, flat_params, fmap)?;
    let (best, confidence) = argmax(&probs);
    let leaf = taxonomy.leaf_ids()[best];
    let root = taxonomy.root();
    if confidence >= threshold {
        Ok(Decision {
            exit_node: leaf,
            path: vec![PathStep { node: root, confidence, chosen: Some(leaf) }],
            at_leaf: true,
            competence: threshold,
        })
    } else {
        Ok(Decision {
            exit_node: root,
            path: vec![PathStep { node: root, confidence, chosen: None }],
            at_leaf: false,
            competence: threshold,
        })
    }
}

/// Threshold that rejects exactly `floor(rate * M)` of the given scores
/// when rejection means `score < threshold` (so scores equal to the
/// threshold are accepted). The count is clamped so at least one sample
/// survives.
pub fn threshold_for_rate(scores: &[f64], rate: f64) -> Result<f64, InferenceError> {
    if scores.is_empty() {
        return Err(InferenceError::EmptyScores);
    }
    if !(rate.is_finite() && (0.0..=1.0).contains(&rate)) {
        return Err(InferenceError::InvalidRate(rate));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let k = ((rate * scores.len() as f64).floor() as usize).min(scores.len() - 1);
    Ok(sorted[k])
}

/// Evenly spaced gamma grid 0, 0.05, ..., 1.
pub fn default_gamma_grid() -> Vec<f64> {
    (0..=20).map(|i| i as f64 / 20.0).collect()
}

/// Picks the grid gamma with the best validation CPB (the literal,
/// set-size-over-leaves variant). Ties go to the smallest gamma. Returns
/// the winner plus the full (gamma, cpb) scan in ascending gamma order.
pub fn calibrate_gamma(
    val: &Dataset,
    taxonomy: &Taxonomy,
    params: &NodeParams,
    fmap: &FeatureMap,
    grid: &[f64],
) -> Result<(CompetenceLevel, Vec<(f64, f64)>), InferenceError> {
    if grid.is_empty() {
        return Err(InferenceError::EmptyGrid);
    }
    let mut levels = grid
        .iter()
        .map(|&g| CompetenceLevel::new(g))
        .collect::<Result<Vec<_>, _>>()?;
    levels.sort_by(|a, b| a.0.total_cmp(&b.0));

    let mut scan = Vec::with_capacity(levels.len());
    let mut best: Option<(CompetenceLevel, f64)> = None;
    for gamma in levels {
        let decisions = rtc_predict_all(val, taxonomy, params, fmap, gamma)?;
        let score = cpb_literal(&decisions, val.labels(), taxonomy)?;
        scan.push((gamma.value(), score));
        if best.is_none_or(|(_, s)| score > s) {
            best = Some((gamma, score));
        }
    }
    Ok((best.expect("grid nonempty").0, scan))
}
