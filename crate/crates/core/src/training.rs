//! Losses, analytic gradients and plain SGD.
//!
//! The total objective is `L = L_consistency + lambda * L_cut` where
//! `L_cut` is the cross-entropy over one randomly sampled tree cut (a new
//! cut per batch) and `L_consistency` averages, per sample, the child
//! cross-entropies of every branching decision on the sample's root path,
//! weighted by one over the number of such decisions. Weight decay is part
//! of the parameter update, not of the loss or its gradient.

use std::fmt::Write as _;
use std::time::Instant;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::data::{DataError, Dataset};
use crate::model::{
    check_model_dims, log_sum_exp, softmax, FeatureMap, ModelError, NodeParams,
};
use crate::taxonomy::{LabelSet, NodeId, Taxonomy, TaxonomyError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("batch is empty")]
    EmptyBatch,
    #[error("training diverged at epoch {epoch}, batch {batch}")]
    Diverged { epoch: usize, batch: usize },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("config line {0}: {1}")]
    ConfigParse(usize, String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Taxonomy(#[from] TaxonomyError),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Feature map used during training.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum FeatureMapKind {
    Identity,
    /// Trainable affine map; `output_dim` defaults to the input dimension.
    Linear { output_dim: Option<usize> },
}

/// Hyperparameters. The key=value config keys are in parentheses.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Per-node keep probability when sampling cuts (`p`).
    pub sts_keep_rate: f64,
    /// Weight of the sampled-cut loss (`lambda`).
    pub sts_weight: f64,
    /// SGD step size (`lr`).
    pub learning_rate: f64,
    /// Passes over the training set (`epochs`).
    pub epochs: usize,
    /// Samples per SGD step (`batch_size`).
    pub batch_size: usize,
    /// Seed for init, shuffling and cut sampling (`seed`).
    pub seed: u64,
    /// L2 coefficient applied in the update, bias excluded
    /// (`weight_decay`).
    pub weight_decay: f64,
    /// Uniform init half-width; 0 starts from zeros (`init_scale`).
    pub init_scale: f64,
    /// `feature_map` = identity | linear, with optional `feature_dim`.
    pub feature_map: FeatureMapKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            sts_keep_rate: 0.5,
            sts_weight: 1.0,
            learning_rate: 0.1,
            epochs: 50,
            batch_size: 32,
            seed: 0,
            weight_decay: 0.0,
            init_scale: 0.01,
            feature_map: FeatureMapKind::Identity,
        }
    }
}

impl TrainConfig {
    /// Applies one key=value override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), TrainError> {
        let bad = |what: &str| TrainError::InvalidConfig(format!("{what} {value:?} for {key}"));
        match key {
            "p" => self.sts_keep_rate = value.parse().map_err(|_| bad("bad float"))?,
            "lambda" => self.sts_weight = value.parse().map_err(|_| bad("bad float"))?,
            "lr" => self.learning_rate = value.parse().map_err(|_| bad("bad float"))?,
            "epochs" => self.epochs = value.parse().map_err(|_| bad("bad integer"))?,
            "batch_size" => self.batch_size = value.parse().map_err(|_| bad("bad integer"))?,
            "seed" => self.seed = value.parse().map_err(|_| bad("bad integer"))?,
            "weight_decay" => self.weight_decay = value.parse().map_err(|_| bad("bad float"))?,
            "init_scale" => self.init_scale = value.parse().map_err(|_| bad("bad float"))?,
            "feature_map" => {
                self.feature_map = match value {
                    "identity" => FeatureMapKind::Identity,
                    "linear" => FeatureMapKind::Linear {
                        output_dim: match &self.feature_map {
                            FeatureMapKind::Linear { output_dim } => *output_dim,
                            _ => None,
                        },
                    },
                    _ => return Err(bad("unknown feature map")),
                }
            }
            "feature_dim" => {
                let dim: usize = value.parse().map_err(|_| bad("bad integer"))?;
                self.feature_map = FeatureMapKind::Linear { output_dim: Some(dim) };
            }
            _ => return Err(TrainError::InvalidConfig(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Parses a key=value config file body (`#` comments, blank lines ok).
    /// Missing keys keep their defaults.
    pub fn from_kv_text(text: &str) -> Result<Self, TrainError> {
        let mut cfg = TrainConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| TrainError::ConfigParse(lineno + 1, "expected key=value".into()))?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| TrainError::ConfigParse(lineno + 1, e.to_string()))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Canonical key=value form; `from_kv_text` round-trips it.
    pub fn to_kv_string(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "p={}", self.sts_keep_rate);
        let _ = writeln!(out, "lambda={}", self.sts_weight);
        let _ = writeln!(out, "lr={}", self.learning_rate);
        let _ = writeln!(out, "epochs={}", self.epochs);
        let _ = writeln!(out, "batch_size={}", self.batch_size);
        let _ = writeln!(out, "seed={}", self.seed);
        let _ = writeln!(out, "weight_decay={}", self.weight_decay);
        let _ = writeln!(out, "init_scale={}", self.init_scale);
        match &self.feature_map {
            FeatureMapKind::Identity => {
                let _ = writeln!(out, "feature_map=identity");
            }
            FeatureMapKind::Linear { output_dim } => {
                let _ = writeln!(out, "feature_map=linear");
                if let Some(d) = output_dim {
                    let _ = writeln!(out, "feature_dim={d}");
                }
            }
        }
        out
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let check = |ok: bool, msg: &str| {
            if ok {
                Ok(())
            } else {
                Err(TrainError::InvalidConfig(msg.into()))
            }
        };
        check(
            (0.0..=1.0).contains(&self.sts_keep_rate),
            "p must lie in [0, 1]",
        )?;
        check(self.sts_weight >= 0.0 && self.sts_weight.is_finite(), "lambda must be >= 0")?;
        check(
            self.learning_rate > 0.0 && self.learning_rate.is_finite(),
            "lr must be positive",
        )?;
        check(self.epochs >= 1, "epochs must be >= 1")?;
        check(self.batch_size >= 1, "batch_size must be >= 1")?;
        check(
            self.weight_decay >= 0.0 && self.weight_decay.is_finite(),
            "weight_decay must be >= 0",
        )?;
        check(
            self.init_scale >= 0.0 && self.init_scale.is_finite(),
            "init_scale must be >= 0",
        )?;
        if let FeatureMapKind::Linear { output_dim: Some(0) } = self.feature_map {
            return Err(TrainError::InvalidConfig("feature_dim must be positive".into()));
        }
        Ok(())
    }

    pub fn resolved_feature_dim(&self, input_dim: usize) -> usize {
        match self.feature_map {
            FeatureMapKind::Identity => input_dim,
            FeatureMapKind::Linear { output_dim } => output_dim.unwrap_or(input_dim),
        }
    }
}

/// Gradient of the pure loss (no weight decay) with respect to every
/// trainable tensor.
#[derive(Clone, Debug)]
pub struct Gradients {
    pub residuals: Array2<f64>,
    pub fmap_weight: Option<Array2<f64>>,
    pub fmap_bias: Option<Array1<f64>>,
}

/// Per-batch loss values. `total = ncl + sts_weight * sts` by construction.
#[derive(Clone, Copy, Debug)]
pub struct LossBreakdown {
    pub sts: f64,
    pub ncl: f64,
    pub total: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct EpochStats {
    pub epoch: usize,
    pub sts: f64,
    pub ncl: f64,
    pub total: f64,
    pub seconds: f64,
}

pub struct TrainedModel {
    pub params: NodeParams,
    pub feature_map: FeatureMap,
    pub log: Vec<EpochStats>,
}

/// Per-batch view of one cut: synthesized predictor columns plus each
/// member's codeword rows (for gradient scatter).
struct CutContext {
    w: Array2<f64>,
    member_rows: Vec<Vec<usize>>,
    set: LabelSet,
}

impl CutContext {
    fn new(
        cut: &LabelSet,
        taxonomy: &Taxonomy,
        params: &NodeParams,
    ) -> Result<Self, TrainError> {
        let codewords = taxonomy.codeword_matrix(cut)?;
        let w = params.synthesize(&codewords)?;
        let member_rows = cut
            .members()
            .iter()
            .map(|&m| taxonomy.codeword_rows(m))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(CutContext { w, member_rows, set: cut.clone() })
    }

    /// Cross-entropy of one sample against the cut, with the softmax
    /// residual `probs - onehot(target)`.
    fn sample_term(&self, h: &Array1<f64>, target: usize) -> (f64, Array1<f64>) {
        let logits = self.w.t().dot(h);
        let loss = log_sum_exp(logits.view()) - logits[target];
        let mut delta = softmax(logits.view());
        delta[target] -= 1.0;
        (loss, delta)
    }
}

/// The branching decisions deciding `leaf`: the root plus every proper
/// ancestor.
fn deciding_nodes(taxonomy: &Taxonomy, leaf: NodeId) -> Vec<NodeId> {
    let mut nodes = vec![taxonomy.root()];
    nodes.extend(taxonomy.record(leaf).ancestors.iter().copied());
    nodes
}

/// Child cross-entropy at one deciding node, with residual and the child
/// list. Logits come straight from the children's own residual columns.
fn node_term(
    taxonomy: &Taxonomy,
    params: &NodeParams,
    h: &Array1<f64>,
    node: NodeId,
    label: NodeId,
) -> Result<(f64, Array1<f64>, Vec<NodeId>), TrainError> {
    let children = taxonomy.record(node).children.clone();
    let target_child = taxonomy.child_toward(node, label)?;
    let target = children
        .iter()
        .position(|&c| c == target_child)
        .expect("child_toward returns a child");
    let logits = Array1::from_iter(children.iter().map(|&c| params.column(c.index() - 1).dot(h)));
    let loss = log_sum_exp(logits.view()) - logits[target];
    let mut delta = softmax(logits.view());
    delta[target] -= 1.0;
    Ok((loss, delta, children))
}

/// Mean cut cross-entropy over the batch.
pub fn sts_loss(
    ds: &Dataset,
    idx: &[usize],
    cut: &LabelSet,
    taxonomy: &Taxonomy,
    params: &NodeParams,
    fmap: &FeatureMap,
) -> Result<f64, TrainError> {
    if idx.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    check_model_dims(taxonomy, params, fmap)?;
    let ctx = CutContext::new(cut, taxonomy, params)?;
    let mut total = 0.0;
    for &i in idx {
        let h = fmap.apply(ds.feature(i))?;
        let projected = taxonomy.project_label(ds.label(i), cut)?;
        let target = ctx.set.position_of(projected).expect("projection is a member");
        total += ctx.sample_term(&h, target).0;
    }
    Ok(total / idx.len() as f64)
}

/// Mean node-conditional consistency loss over the batch: per sample, the
/// average child cross-entropy over its deciding nodes.
pub fn ncl_loss(
    ds: &Dataset,
    idx: &[usize],
    taxonomy: &Taxonomy,
    params: &NodeParams,
    fmap: &FeatureMap,
) -> Result<f64, TrainError> {
    if idx.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    check_model_dims(taxonomy, params, fmap)?;
    let mut total = 0.0;
    for &i in idx {
        let h = fmap.apply(ds.feature(i))?;
        let label = ds.label(i);
        let deciders = deciding_nodes(taxonomy, label);
        let mut sample = 0.0;
        for &nd in &deciders {
            sample += node_term(taxonomy, params, &h, nd, label)?.0;
        }
        total += sample / deciders.len() as f64;
    }
    Ok(total / idx.len() as f64)
}

/// Both loss terms for one batch and cut.
pub fn total_loss(
    ds: &Dataset,
    idx: &[usize],
    cut: &LabelSet,
    taxonomy: &Taxonomy,
    params: &NodeParams,
    fmap: &FeatureMap,
    sts_weight: f64,
) -> Result<LossBreakdown, TrainError> {
    let sts = sts_loss(ds, idx, cut, taxonomy, params, fmap)?;
    let ncl = ncl_loss(ds, idx, taxonomy, params, fmap)?;
    Ok(LossBreakdown { sts, ncl, total: ncl + sts_weight * sts })
}

/// Cut loss averaged uniformly over the whole enumerated ensemble. Only
/// feasible on small trees; the per-batch sampled loss is its scalable
/// surrogate.
pub fn ensemble_loss(
    ds: &Dataset,
    idx: &[usize],
    taxonomy: &Taxonomy,
    params: &NodeParams,
    fmap: &FeatureMap,
    max_cuts: usize,
) -> Result<f64, TrainError> {
    let cuts = taxonomy.enumerate_cuts(0.5, max_cuts)?;
    let mut total = 0.0;
    for cut in &cuts {
        total += sts_loss(ds, idx, &cut.label_set, taxonomy, params, fmap)?;
    }
    Ok(total / cuts.len() as f64)
}

/// Cut loss weighted by each cut's sampling probability at `keep_rate`;
/// this is the exact expectation of the sampled loss.
pub fn ensemble_loss_weighted(
    ds: &Dataset,
    idx: &[usize],
    taxonomy: &Taxonomy,
    params: &NodeParams,
    fmap: &FeatureMap,
    keep_rate: f64,
    max_cuts: usize,
) -> Result<f64, TrainError> {
    let cuts = taxonomy.enumerate_cuts(keep_rate, max_cuts)?;
    let mut total = 0.0;
    for cut in &cuts {
        total +=
            cut.probability * sts_loss(ds, idx, &cut.label_set, taxonomy, params, fmap)?;
    }
    Ok(total)
}

/// Analytic gradient of `ncl + sts_weight * sts(cut)` over the batch,
/// together with the loss values. Weight decay is excluded here.
pub fn loss_gradient(
    ds: &Dataset,
    idx: &[usize],
    cut: &LabelSet,
    taxonomy: &Taxonomy,
    params: &NodeParams,
    fmap: &FeatureMap,
    sts_weight: f64,
) -> Result<(Gradients, LossBreakdown), TrainError> {
    if idx.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    check_model_dims(taxonomy, params, fmap)?;
    let ctx = CutContext::new(cut, taxonomy, params)?;
    let m = idx.len() as f64;
    let is_linear = matches!(fmap, FeatureMap::Linear { .. });

    let mut g_res = Array2::zeros(params.residuals().raw_dim());
    let mut g_weight = is_linear
        .then(|| Array2::zeros((fmap.input_dim(), fmap.output_dim())));
    let mut g_bias = is_linear.then(|| Array1::zeros(fmap.output_dim()));

    let mut sts_total = 0.0;
    let mut ncl_total = 0.0;
    for &i in idx {
        let x = ds.feature(i);
        let h = fmap.apply(x)?;
        let label = ds.label(i);
        let mut dh: Array1<f64> = Array1::zeros(h.len());

        // Sampled-cut term, coefficient sts_weight / m.
        let projected = taxonomy.project_label(label, cut)?;
        let target = ctx.set.position_of(projected).expect("projection is a member");
        let (loss, delta) = ctx.sample_term(&h, target);
        sts_total += loss;
        let coef = sts_weight / m;
        if coef != 0.0 {
            for (j, &dj) in delta.iter().enumerate() {
                let scaled = coef * dj;
                for &row in &ctx.member_rows[j] {
                    let mut col = g_res.column_mut(row);
                    col.scaled_add(scaled, &h);
                }
            }
            if is_linear {
                dh.scaled_add(coef, &ctx.w.dot(&delta));
            }
        }

        // Consistency term, coefficient 1 / (m * #deciders) per node.
        let deciders = deciding_nodes(taxonomy, label);
        let node_coef = 1.0 / (m * deciders.len() as f64);
        let mut sample_ncl = 0.0;
        for &nd in &deciders {
            let (loss, delta, children) = node_term(taxonomy, params, &h, nd, label)?;
            sample_ncl += loss;
            for (j, &c) in children.iter().enumerate() {
                let mut col = g_res.column_mut(c.index() - 1);
                col.scaled_add(node_coef * delta[j], &h);
                if is_linear {
                    dh.scaled_add(node_coef * delta[j], &params.column(c.index() - 1));
                }
            }
        }
        ncl_total += sample_ncl / deciders.len() as f64;

        if let (Some(gw), Some(gb)) = (g_weight.as_mut(), g_bias.as_mut()) {
            for (r, &xr) in x.iter().enumerate() {
                let mut row = gw.row_mut(r);
                row.scaled_add(xr, &dh);
            }
            *gb += &dh;
        }
    }

    let sts = sts_total / m;
    let ncl = ncl_total / m;
    Ok((
        Gradients { residuals: g_res, fmap_weight: g_weight, fmap_bias: g_bias },
        LossBreakdown { sts, ncl, total: ncl + sts_weight * sts },
    ))
}

/// One SGD update: `param -= lr * (grad + weight_decay * param)`; the bias
/// sees no decay.
pub fn sgd_step(
    params: &mut NodeParams,
    fmap: &mut FeatureMap,
    grads: &Gradients,
    learning_rate: f64,
    weight_decay: f64,
) {
    params
        .residuals_mut()
        .zip_mut_with(&grads.residuals, |p, &g| *p -= learning_rate * (g + weight_decay * *p));
    if let FeatureMap::Linear { weight, bias } = fmap {
        if let Some(gw) = &grads.fmap_weight {
            weight.zip_mut_with(gw, |p, &g| *p -= learning_rate * (g + weight_decay * *p));
        }
        if let Some(gb) = &grads.fmap_bias {
            bias.zip_mut_with(gb, |p, &g| *p -= learning_rate * g);
        }
    }
}

/// Full SGD run. One generator seeded from `cfg.seed` drives, in order:
/// residual init, feature-map init, then per epoch the index shuffle and
/// per batch one cut sample. Identical inputs give identical models.
pub fn train(
    ds: &Dataset,
    taxonomy: &Taxonomy,
    cfg: &TrainConfig,
) -> Result<TrainedModel, TrainError> {
    cfg.validate()?;
    if ds.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    for &label in ds.labels() {
        let rec = taxonomy.try_record(label)?;
        if !rec.is_leaf() {
            return Err(DataError::NotALeaf(rec.name.clone()).into());
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let k = cfg.resolved_feature_dim(ds.dim());
    let mut params = NodeParams::init(
        k,
        taxonomy.classification_count(),
        cfg.init_scale,
        &mut rng,
    );
    let mut fmap = match cfg.feature_map {
        FeatureMapKind::Identity => FeatureMap::identity(ds.dim()),
        FeatureMapKind::Linear { .. } => {
            FeatureMap::linear_init(ds.dim(), k, cfg.init_scale, &mut rng)
        }
    };
    check_model_dims(taxonomy, &params, &fmap)?;

    let mut log = Vec::with_capacity(cfg.epochs);
    let mut indices: Vec<usize> = (0..ds.len()).collect();
    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        indices.shuffle(&mut rng);
        let mut sums = (0.0, 0.0, 0.0);
        for (batch_no, chunk) in indices.chunks(cfg.batch_size).enumerate() {
            let cut = taxonomy.sample_cut(cfg.sts_keep_rate, &mut rng);
            let (grads, lb) =
                loss_gradient(ds, chunk, &cut, taxonomy, &params, &fmap, cfg.sts_weight)?;
            if !lb.total.is_finite() {
                return Err(TrainError::Diverged { epoch, batch: batch_no });
            }
            sgd_step(&mut params, &mut fmap, &grads, cfg.learning_rate, cfg.weight_decay);
            let weight = chunk.len() as f64;
            sums.0 += lb.sts * weight;
            sums.1 += lb.ncl * weight;
            sums.2 += lb.total * weight;
        }
        let m = ds.len() as f64;
        log.push(EpochStats {
            epoch,
            sts: sums.0 / m,
            ncl: sums.1 / m,
            total: sums.2 / m,
            seconds: started.elapsed().as_secs_f64(),
        });
    }
    params.validate_finite()?;
    Ok(TrainedModel { params, feature_map: fmap, log })
}

/// Training log as CSV: epoch, cut loss, consistency loss, total, seconds.
pub fn epoch_log_csv(log: &[EpochStats]) -> String {
    let mut out = String::from("# epoch,l_sts,l_ncl,l_total,seconds\n");
    for e in log {
        let _ = writeln!(out, "{},{},{},{},{}", e.epoch, e.sts, e.ncl, e.total, e.seconds);
    }
    out
}
