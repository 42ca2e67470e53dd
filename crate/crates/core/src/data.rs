//! Feature-vector datasets, long-tail resampling and a synthetic
//! hierarchical Gaussian benchmark.
//!
//! The on-disk format is plain CSV: `id,label,f0,f1,...` with `#` comments.
//! Labels are leaf names of the accompanying taxonomy. Values are written
//! with Rust's shortest round-trip float formatting, so save/load is exact.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::taxonomy::{NodeId, Taxonomy, TaxonomyError};

#[derive(Debug, Error)]
pub enum DataError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Taxonomy(#[from] TaxonomyError),
    #[error("line {0}: {1}")]
    MalformedLine(usize, String),
    #[error("label {0:?} is not a leaf")]
    NotALeaf(String),
    #[error("dataset is empty")]
    Empty,
    #[error("sample {0} has {1} features, expected {2}")]
    RaggedRow(String, usize, usize),
    #[error("non-finite feature value in sample {0}")]
    NonFinite(String),
    #[error("duplicate sample id {0:?}")]
    DuplicateId(String),
    #[error("unknown split tag {0:?} on line {1}")]
    UnknownSplitTag(String, usize),
    #[error("class {0:?} has {1} samples, long-tail profile needs {2}")]
    InsufficientSamples(String, usize, usize),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitTag {
    Train,
    Val,
    Test,
}

impl SplitTag {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitTag::Train => "train",
            SplitTag::Val => "val",
            SplitTag::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(SplitTag::Train),
            "val" => Some(SplitTag::Val),
            "test" => Some(SplitTag::Test),
            _ => None,
        }
    }
}

/// Fixed-dimension feature vectors with leaf labels.
#[derive(Clone, Debug)]
pub struct Dataset {
    features: Array2<f64>,
    labels: Vec<NodeId>,
    ids: Vec<String>,
    split_tags: Option<Vec<SplitTag>>,
}

impl Dataset {
    pub fn from_parts(
        features: Array2<f64>,
        labels: Vec<NodeId>,
        ids: Vec<String>,
        taxonomy: &Taxonomy,
    ) -> Result<Self, DataError> {
        if features.nrows() == 0 {
            return Err(DataError::Empty);
        }
        if labels.len() != features.nrows() || ids.len() != features.nrows() {
            return Err(DataError::MalformedLine(
                0,
                "feature, label and id counts disagree".into(),
            ));
        }
        for (i, &label) in labels.iter().enumerate() {
            let rec = taxonomy.try_record(label)?;
            if !rec.is_leaf() {
                return Err(DataError::NotALeaf(rec.name.clone()));
            }
            if !features.row(i).iter().all(|v| v.is_finite()) {
                return Err(DataError::NonFinite(ids[i].clone()));
            }
        }
        let mut seen = HashMap::new();
        for id in &ids {
            if seen.insert(id.clone(), ()).is_some() {
                return Err(DataError::DuplicateId(id.clone()));
            }
        }
        Ok(Dataset { features, labels, ids, split_tags: None })
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn feature(&self, i: usize) -> ArrayView1<'_, f64> {
        self.features.row(i)
    }

    pub fn label(&self, i: usize) -> NodeId {
        self.labels[i]
    }

    pub fn id(&self, i: usize) -> &str {
        &self.ids[i]
    }

    pub fn labels(&self) -> &[NodeId] {
        &self.labels
    }

    pub fn split_tags(&self) -> Option<&[SplitTag]> {
        self.split_tags.as_deref()
    }

    pub fn set_uniform_tag(&mut self, tag: SplitTag) {
        self.split_tags = Some(vec![tag; self.len()]);
    }

    /// New dataset holding the selected rows, in the given order.
    pub fn subset(&self, rows: &[usize]) -> Dataset {
        let mut features = Array2::zeros((rows.len(), self.dim()));
        let mut labels = Vec::with_capacity(rows.len());
        let mut ids = Vec::with_capacity(rows.len());
        let mut tags = self.split_tags.as_ref().map(|_| Vec::with_capacity(rows.len()));
        for (out, &r) in rows.iter().enumerate() {
            features.row_mut(out).assign(&self.features.row(r));
            labels.push(self.labels[r]);
            ids.push(self.ids[r].clone());
            if let (Some(tags), Some(src)) = (tags.as_mut(), self.split_tags.as_ref()) {
                tags.push(src[r]);
            }
        }
        Dataset { features, labels, ids, split_tags: tags }
    }

    /// Parses `id,label,f0,...` CSV. All rows must share one feature width.
    pub fn parse(text: &str, taxonomy: &Taxonomy) -> Result<Self, DataError> {
        let mut ids = Vec::new();
        let mut labels = Vec::new();
        let mut values: Vec<f64> = Vec::new();
        let mut dim: Option<usize> = None;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut fields = line.split(',');
            let id = fields.next().map(str::trim).unwrap_or_default();
            let label = fields.next().map(str::trim).unwrap_or_default();
            if id.is_empty() || label.is_empty() {
                return Err(DataError::MalformedLine(
                    lineno + 1,
                    "expected id,label,features...".into(),
                ));
            }
            let mut row = Vec::new();
            for f in fields {
                let v: f64 = f.trim().parse().map_err(|_| {
                    DataError::MalformedLine(lineno + 1, format!("bad float {f:?}"))
                })?;
                row.push(v);
            }
            match dim {
                None => {
                    if row.is_empty() {
                        return Err(DataError::MalformedLine(
                            lineno + 1,
                            "row has no features".into(),
                        ));
                    }
                    dim = Some(row.len());
                }
                Some(d) if d != row.len() => {
                    return Err(DataError::RaggedRow(id.to_string(), row.len(), d));
                }
                _ => {}
            }
            ids.push(id.to_string());
            labels.push(taxonomy.node_by_name(label)?);
            values.extend_from_slice(&row);
        }
        let dim = dim.ok_or(DataError::Empty)?;
        let features = Array2::from_shape_vec((ids.len(), dim), values)
            .expect("row widths validated above");
        Self::from_parts(features, labels, ids, taxonomy)
    }

    pub fn load(path: &Path, taxonomy: &Taxonomy) -> Result<Self, DataError> {
        Self::parse(&fs::read_to_string(path)?, taxonomy)
    }

    pub fn to_csv(&self, taxonomy: &Taxonomy) -> String {
        let mut out = String::from("# id,label,features...\n");
        for i in 0..self.len() {
            let _ = write!(out, "{},{}", self.ids[i], taxonomy.name(self.labels[i]));
            for v in self.features.row(i) {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path, taxonomy: &Taxonomy) -> Result<(), DataError> {
        fs::write(path, self.to_csv(taxonomy))?;
        Ok(())
    }

    /// Attaches split tags from `id,tag` lines (tags: train/val/test).
    /// Samples missing from the file keep no tag only if none had one;
    /// every listed id must exist and every sample must end up tagged.
    pub fn apply_split_text(&mut self, text: &str) -> Result<(), DataError> {
        let index: HashMap<&str, usize> =
            self.ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
        let mut tags: Vec<Option<SplitTag>> = vec![None; self.len()];
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (id, tag) = line.split_once(',').ok_or_else(|| {
                DataError::MalformedLine(lineno + 1, "expected id,tag".into())
            })?;
            let tag = SplitTag::parse(tag.trim())
                .ok_or_else(|| DataError::UnknownSplitTag(tag.trim().to_string(), lineno + 1))?;
            let &row = index.get(id.trim()).ok_or_else(|| {
                DataError::MalformedLine(lineno + 1, format!("unknown sample id {id:?}"))
            })?;
            tags[row] = Some(tag);
        }
        let mut resolved = Vec::with_capacity(self.len());
        for (i, t) in tags.into_iter().enumerate() {
            resolved.push(t.ok_or_else(|| {
                DataError::MalformedLine(0, format!("sample {:?} has no split tag", self.ids[i]))
            })?);
        }
        self.split_tags = Some(resolved);
        Ok(())
    }

    /// Per-class sample counts in canonical leaf order.
    pub fn class_counts(&self, taxonomy: &Taxonomy) -> Vec<usize> {
        let mut counts = vec![0usize; taxonomy.leaf_count()];
        for &label in &self.labels {
            let pos = taxonomy.leaf_position(label).expect("labels are leaves");
            counts[pos] += 1;
        }
        counts
    }

    /// Per-class counts over train-tagged samples only.
    pub fn train_counts(&self, taxonomy: &Taxonomy) -> Result<Vec<usize>, DataError> {
        let tags = self.split_tags.as_ref().ok_or_else(|| {
            DataError::InvalidConfig("train_counts needs split tags".into())
        })?;
        let mut counts = vec![0usize; taxonomy.leaf_count()];
        for (i, &label) in self.labels.iter().enumerate() {
            if tags[i] == SplitTag::Train {
                let pos = taxonomy.leaf_position(label).expect("labels are leaves");
                counts[pos] += 1;
            }
        }
        Ok(counts)
    }

    /// Same samples with labels resolved against another taxonomy by leaf
    /// name (for flat-baseline training against a flattened tree).
    pub fn relabeled(&self, from: &Taxonomy, to: &Taxonomy) -> Result<Dataset, DataError> {
        let mut labels = Vec::with_capacity(self.len());
        for &label in &self.labels {
            labels.push(to.node_by_name(from.name(label))?);
        }
        let mut ds = Dataset::from_parts(self.features.clone(), labels, self.ids.clone(), to)?;
        ds.split_tags = self.split_tags.clone();
        Ok(ds)
    }

    /// Subsamples to an exponential long-tail profile: class at shuffled
    /// rank r keeps `max(1, round(n_max * factor^(r / (C - 1))))` samples,
    /// where `n_max` is the largest class count in the input. Sample order
    /// within the result follows the input order.
    pub fn make_longtail(
        &self,
        taxonomy: &Taxonomy,
        factor: f64,
        seed: u64,
    ) -> Result<Dataset, DataError> {
        if !(factor > 0.0 && factor <= 1.0) {
            return Err(DataError::InvalidConfig(format!(
                "imbalance factor must lie in (0, 1], got {factor}"
            )));
        }
        let counts = self.class_counts(taxonomy);
        let n_max = *counts.iter().max().expect("nonempty dataset");
        let targets = longtail_targets(counts.len(), n_max, factor, seed);
        for (pos, (&have, &want)) in counts.iter().zip(&targets).enumerate() {
            if have < want {
                let leaf = taxonomy.leaf_ids()[pos];
                return Err(DataError::InsufficientSamples(
                    taxonomy.name(leaf).to_string(),
                    have,
                    want,
                ));
            }
        }
        // Choose per-class keepers with a seeded shuffle, then restore
        // input order.
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
        let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); counts.len()];
        for (i, &label) in self.labels.iter().enumerate() {
            by_class[taxonomy.leaf_position(label).expect("leaf label")].push(i);
        }
        let mut keep = Vec::new();
        for (pos, rows) in by_class.iter().enumerate() {
            let mut rows = rows.clone();
            rows.shuffle(&mut rng);
            keep.extend_from_slice(&rows[..targets[pos]]);
        }
        keep.sort_unstable();
        Ok(self.subset(&keep))
    }
}

/// Per-class sample targets for the exponential profile, in canonical leaf
/// order. Ranks are a seeded shuffle of 0..C so tail classes land anywhere
/// in the tree.
pub fn longtail_targets(num_classes: usize, n_max: usize, factor: f64, seed: u64) -> Vec<usize> {
    let mut ranks: Vec<usize> = (0..num_classes).collect();
    ranks.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    ranks
        .iter()
        .map(|&r| {
            let exponent = if num_classes > 1 {
                r as f64 / (num_classes - 1) as f64
            } else {
                0.0
            };
            ((n_max as f64 * factor.powf(exponent)).round() as usize).max(1)
        })
        .collect()
}

/// Synthetic benchmark configuration. The taxonomy is a complete tree with
/// the given branching factors per level; class means follow a root-to-leaf
/// Gaussian walk so sibling classes stay closer than distant ones.
#[derive(Clone, Debug)]
pub struct SyntheticConfig {
    pub branching: Vec<usize>,
    pub feature_dim: usize,
    /// Step size of the mean walk per level.
    pub class_sep: f64,
    /// Within-class noise.
    pub noise_sd: f64,
    /// Long-tail imbalance factor in (0, 1]; 1 keeps the train set balanced.
    pub imbalance_factor: f64,
    /// Train samples for the largest class.
    pub n_max: usize,
    /// Balanced test samples per class.
    pub test_per_class: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            branching: vec![4, 4, 4],
            feature_dim: 32,
            class_sep: 1.0,
            // Twice the mean-walk step: sibling leaves overlap heavily, so a
            // flat classifier tops out well below perfect leaf accuracy and
            // rejection has room to pay off.
            noise_sd: 2.0,
            imbalance_factor: 0.01,
            n_max: 100,
            test_per_class: 16,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    /// Applies one key=value override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), DataError> {
        let bad = |what: &str| DataError::InvalidConfig(format!("{what} {value:?} for {key}"));
        match key {
            "branching" => {
                self.branching = value
                    .split(',')
                    .map(|v| v.trim().parse())
                    .collect::<Result<_, _>>()
                    .map_err(|_| bad("bad integer list"))?;
            }
            "feature_dim" => self.feature_dim = value.parse().map_err(|_| bad("bad integer"))?,
            "class_sep" => self.class_sep = value.parse().map_err(|_| bad("bad float"))?,
            "noise_sd" => self.noise_sd = value.parse().map_err(|_| bad("bad float"))?,
            "imbalance_factor" => {
                self.imbalance_factor = value.parse().map_err(|_| bad("bad float"))?
            }
            "n_max" => self.n_max = value.parse().map_err(|_| bad("bad integer"))?,
            "test_per_class" => {
                self.test_per_class = value.parse().map_err(|_| bad("bad integer"))?
            }
            "seed" => self.seed = value.parse().map_err(|_| bad("bad integer"))?,
            _ => return Err(DataError::InvalidConfig(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Parses a key=value config file body (`#` comments, blank lines ok).
    /// Missing keys keep their defaults.
    pub fn from_kv_text(text: &str) -> Result<Self, DataError> {
        let mut cfg = SyntheticConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                DataError::InvalidConfig(format!("line {}: expected key=value", lineno + 1))
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Canonical key=value form; `from_kv_text` round-trips it.
    pub fn to_kv_string(&self) -> String {
        let branching: Vec<String> = self.branching.iter().map(|b| b.to_string()).collect();
        format!(
            "branching={}\nfeature_dim={}\nclass_sep={}\nnoise_sd={}\n\
             imbalance_factor={}\nn_max={}\ntest_per_class={}\nseed={}\n",
            branching.join(","),
            self.feature_dim,
            self.class_sep,
            self.noise_sd,
            self.imbalance_factor,
            self.n_max,
            self.test_per_class,
            self.seed,
        )
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.branching.is_empty() || self.branching.iter().any(|&b| b < 2) {
            return Err(DataError::InvalidConfig(
                "branching needs at least one level, factors >= 2".into(),
            ));
        }
        if self.feature_dim == 0 {
            return Err(DataError::InvalidConfig("feature_dim must be positive".into()));
        }
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(self.class_sep) || !positive(self.noise_sd) {
            return Err(DataError::InvalidConfig(
                "class_sep and noise_sd must be positive".into(),
            ));
        }
        if !(self.imbalance_factor > 0.0 && self.imbalance_factor <= 1.0) {
            return Err(DataError::InvalidConfig(
                "imbalance factor must lie in (0, 1]".into(),
            ));
        }
        if self.n_max == 0 || self.test_per_class == 0 {
            return Err(DataError::InvalidConfig(
                "n_max and test_per_class must be positive".into(),
            ));
        }
        Ok(())
    }
}

pub struct SynthOutput {
    pub taxonomy: Taxonomy,
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    pub warnings: Vec<String>,
}

/// Node names are level-tagged and zero-padded (`n2_007`), so name order
/// equals generation order at every level.
fn level_names(level: usize, count: usize) -> Vec<String> {
    let width = count.to_string().len();
    (0..count).map(|i| format!("n{level}_{i:0width$}")).collect()
}

/// Standard normal via Box-Muller; two uniforms per value keep the draw
/// count deterministic.
fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    loop {
        let u: f64 = rng.random_range(f64::EPSILON..1.0);
        let v: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let r = (-2.0 * u.ln()).sqrt();
        let z = r * v.cos();
        if z.is_finite() {
            return z;
        }
    }
}

fn normal_vec<R: Rng + ?Sized>(dim: usize, sd: f64, rng: &mut R) -> Array1<f64> {
    Array1::from_iter((0..dim).map(|_| sd * standard_normal(rng)))
}

/// Generates the benchmark: a complete taxonomy, a long-tailed train set, a
/// stratified validation split (one tenth of each class, at least one train
/// sample kept) and a balanced test set.
pub fn generate(cfg: &SyntheticConfig) -> Result<SynthOutput, DataError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    // Taxonomy: complete tree, names per level in generation order.
    let mut edges: Vec<(String, String)> = Vec::new();
    let mut parents = vec!["root".to_string()];
    for (li, &b) in cfg.branching.iter().enumerate() {
        let names = level_names(li + 1, parents.len() * b);
        for (pi, parent) in parents.iter().enumerate() {
            for c in 0..b {
                edges.push((names[pi * b + c].clone(), parent.clone()));
            }
        }
        parents = names;
    }
    let taxonomy = Taxonomy::from_edges(&edges).expect("complete tree is valid");

    // Mean walk in breadth-first id order (parents first), so means are
    // reproducible regardless of leaf count.
    let mut means: Vec<Array1<f64>> = vec![Array1::zeros(cfg.feature_dim); taxonomy.len()];
    for rec in taxonomy.nodes() {
        if let Some(p) = rec.parent {
            let step = normal_vec(cfg.feature_dim, cfg.class_sep, &mut rng);
            means[rec.id.index()] = &means[p.index()] + &step;
        }
    }

    let leaf_count = taxonomy.leaf_count();
    let targets = longtail_targets(leaf_count, cfg.n_max, cfg.imbalance_factor, cfg.seed);

    let mut warnings = Vec::new();
    let draw_block = |prefix: &str, counts: &[usize], rng: &mut ChaCha8Rng| {
        let total: usize = counts.iter().sum();
        let mut features = Array2::zeros((total, cfg.feature_dim));
        let mut labels = Vec::with_capacity(total);
        let mut ids = Vec::with_capacity(total);
        let mut row = 0usize;
        for (pos, &leaf) in taxonomy.leaf_ids().iter().enumerate() {
            let mean = &means[leaf.index()];
            for _ in 0..counts[pos] {
                let x = mean + &normal_vec(cfg.feature_dim, cfg.noise_sd, rng);
                features.row_mut(row).assign(&x);
                labels.push(leaf);
                ids.push(format!("{prefix}{row:06}"));
                row += 1;
            }
        }
        (features, labels, ids)
    };

    // Train pool, then a stratified tenth peeled off as validation.
    let (features, labels, ids) = draw_block("tr", &targets, &mut rng);
    let pool = Dataset::from_parts(features, labels, ids, &taxonomy)?;
    let mut val_rows = Vec::new();
    let mut train_rows = Vec::new();
    let mut offset = 0usize;
    for (pos, &count) in targets.iter().enumerate() {
        let n_val = (count / 10).min(count.saturating_sub(1));
        // Earliest draws go to train so the largest classes keep their bulk.
        for r in offset..offset + count - n_val {
            train_rows.push(r);
        }
        for r in offset + count - n_val..offset + count {
            val_rows.push(r);
        }
        if count < 2 {
            let leaf = taxonomy.leaf_ids()[pos];
            warnings.push(format!(
                "class {} has a single train sample",
                taxonomy.name(leaf)
            ));
        }
        offset += count;
    }
    let mut train = pool.subset(&train_rows);
    let mut val = pool.subset(&val_rows);

    let test_counts = vec![cfg.test_per_class; leaf_count];
    let (features, labels, ids) = draw_block("te", &test_counts, &mut rng);
    let mut test = Dataset::from_parts(features, labels, ids, &taxonomy)?;

    train.set_uniform_tag(SplitTag::Train);
    val.set_uniform_tag(SplitTag::Val);
    test.set_uniform_tag(SplitTag::Test);

    Ok(SynthOutput { taxonomy, train, val, test, warnings })
}
