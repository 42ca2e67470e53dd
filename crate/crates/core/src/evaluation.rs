//! Metrics that reward correctness at the deepest defensible level.
//!
//! The headline number is CPB: a prediction earns credit only when its exit
//! node lies on the true root path, and the credit grows as the exit's leaf
//! set shrinks. Root exits are on-path by convention and earn zero. Two
//! variants are reported: the literal `1 - |leaves(exit)| / |leaves|` and a
//! normalized form that is exactly 1 at a correct leaf and 0 at the root.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::Serialize;
use thiserror::Error;

use crate::inference::Decision;
use crate::taxonomy::{NodeId, Taxonomy};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("got {0} decisions for {1} truths")]
    LengthMismatch(usize, usize),
    #[error("no samples to evaluate")]
    Empty,
    #[error("invalid split rule: {0}")]
    InvalidRule(String),
    #[error("class counts cover {0} classes, taxonomy has {1} leaves")]
    CountMismatch(usize, usize),
}

/// Train-frequency bucket of a class.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Bucket {
    Many,
    Medium,
    Few,
}

impl Bucket {
    pub fn as_str(self) -> &'static str {
        match self {
            Bucket::Many => "many",
            Bucket::Medium => "medium",
            Bucket::Few => "few",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SplitRule {
    /// Rank classes by train count (ties by name) and cut into three
    /// near-equal groups; the most populated third is `Many`.
    Thirds,
    /// Absolute counts: `Many` above `high`, `Few` below `low`.
    Thresholds { low: usize, high: usize },
}

/// Assignment of every leaf to a popularity bucket.
#[derive(Clone, Debug)]
pub struct PopularitySplit {
    bucket_by_leaf: HashMap<NodeId, Bucket>,
    pub rule: SplitRule,
}

impl PopularitySplit {
    /// Builds the split from per-class train counts in canonical leaf
    /// order.
    pub fn from_counts(
        taxonomy: &Taxonomy,
        counts: &[usize],
        rule: SplitRule,
    ) -> Result<Self, EvalError> {
        if counts.len() != taxonomy.leaf_count() {
            return Err(EvalError::CountMismatch(counts.len(), taxonomy.leaf_count()));
        }
        let mut bucket_by_leaf = HashMap::new();
        match rule {
            SplitRule::Thirds => {
                let mut ranked: Vec<(usize, NodeId)> = taxonomy
                    .leaf_ids()
                    .iter()
                    .enumerate()
                    .map(|(pos, &leaf)| (pos, leaf))
                    .collect();
                ranked.sort_by(|a, b| {
                    counts[b.0]
                        .cmp(&counts[a.0])
                        .then_with(|| taxonomy.name(a.1).cmp(taxonomy.name(b.1)))
                });
                let c = ranked.len();
                let (b1, b2) = (c / 3, 2 * c / 3);
                for (rank, (_, leaf)) in ranked.into_iter().enumerate() {
                    let bucket = if rank < b1 {
                        Bucket::Many
                    } else if rank < b2 {
                        Bucket::Medium
                    } else {
                        Bucket::Few
                    };
                    bucket_by_leaf.insert(leaf, bucket);
                }
            }
            SplitRule::Thresholds { low, high } => {
                if low > high {
                    return Err(EvalError::InvalidRule(format!(
                        "low {low} exceeds high {high}"
                    )));
                }
                for (pos, &leaf) in taxonomy.leaf_ids().iter().enumerate() {
                    let bucket = if counts[pos] > high {
                        Bucket::Many
                    } else if counts[pos] < low {
                        Bucket::Few
                    } else {
                        Bucket::Medium
                    };
                    bucket_by_leaf.insert(leaf, bucket);
                }
            }
        }
        Ok(PopularitySplit { bucket_by_leaf, rule })
    }

    pub fn bucket_of(&self, leaf: NodeId) -> Option<Bucket> {
        self.bucket_by_leaf.get(&leaf).copied()
    }

    pub fn bucket_sizes(&self) -> (usize, usize, usize) {
        let count = |b: Bucket| self.bucket_by_leaf.values().filter(|&&v| v == b).count();
        (count(Bucket::Many), count(Bucket::Medium), count(Bucket::Few))
    }
}

/// Exit lies on the truth's root path; the root is on every path.
pub fn on_path(taxonomy: &Taxonomy, exit: NodeId, truth: NodeId) -> bool {
    exit == taxonomy.root()
        || exit == truth
        || taxonomy.record(truth).ancestors.contains(&exit)
}

fn check_lengths(decisions: &[Decision], truths: &[NodeId]) -> Result<(), EvalError> {
    if decisions.len() != truths.len() {
        return Err(EvalError::LengthMismatch(decisions.len(), truths.len()));
    }
    if decisions.is_empty() {
        return Err(EvalError::Empty);
    }
    Ok(())
}

/// Literal CPB: on-path exits score `1 - leaves(exit) / leaves(tree)`,
/// off-path exits score 0.
pub fn cpb_literal(
    decisions: &[Decision],
    truths: &[NodeId],
    taxonomy: &Taxonomy,
) -> Result<f64, EvalError> {
    check_lengths(decisions, truths)?;
    let total = taxonomy.leaf_count() as f64;
    let sum: f64 = decisions
        .iter()
        .zip(truths)
        .map(|(d, &y)| {
            if on_path(taxonomy, d.exit_node, y) {
                1.0 - taxonomy.record(d.exit_node).leaves_below as f64 / total
            } else {
                0.0
            }
        })
        .sum();
    Ok(sum / decisions.len() as f64)
}

/// Normalized CPB: rescaled so a correct leaf scores exactly 1 and a root
/// exit exactly 0; off-path exits score 0. A single-leaf taxonomy scores 1
/// on any on-path exit.
pub fn cpb_normalized(
    decisions: &[Decision],
    truths: &[NodeId],
    taxonomy: &Taxonomy,
) -> Result<f64, EvalError> {
    check_lengths(decisions, truths)?;
    let total = taxonomy.leaf_count() as f64;
    let sum: f64 = decisions
        .iter()
        .zip(truths)
        .map(|(d, &y)| {
            if !on_path(taxonomy, d.exit_node, y) {
                return 0.0;
            }
            if total <= 1.0 {
                return 1.0;
            }
            1.0 - (taxonomy.record(d.exit_node).leaves_below as f64 - 1.0) / (total - 1.0)
        })
        .sum();
    Ok(sum / decisions.len() as f64)
}

/// Fraction of exits on the truth's root path.
pub fn hierarchical_accuracy(
    decisions: &[Decision],
    truths: &[NodeId],
    taxonomy: &Taxonomy,
) -> Result<f64, EvalError> {
    check_lengths(decisions, truths)?;
    let hits = decisions
        .iter()
        .zip(truths)
        .filter(|(d, &y)| on_path(taxonomy, d.exit_node, y))
        .count();
    Ok(hits as f64 / decisions.len() as f64)
}

/// Fraction of exits equal to the true leaf.
pub fn leaf_accuracy(decisions: &[Decision], truths: &[NodeId]) -> Result<f64, EvalError> {
    check_lengths(decisions, truths)?;
    let hits = decisions
        .iter()
        .zip(truths)
        .filter(|(d, &y)| d.exit_node == y)
        .count();
    Ok(hits as f64 / decisions.len() as f64)
}

/// Fraction of decisions that reached any leaf.
pub fn leaf_frequency(decisions: &[Decision]) -> Result<f64, EvalError> {
    if decisions.is_empty() {
        return Err(EvalError::Empty);
    }
    let hits = decisions.iter().filter(|d| d.at_leaf).count();
    Ok(hits as f64 / decisions.len() as f64)
}

/// Mean exit depth, normalized per sample by the truth's depth and clipped
/// to [0, 1].
pub fn average_depth(
    decisions: &[Decision],
    truths: &[NodeId],
    taxonomy: &Taxonomy,
) -> Result<f64, EvalError> {
    check_lengths(decisions, truths)?;
    let sum: f64 = decisions
        .iter()
        .zip(truths)
        .map(|(d, &y)| {
            let truth_depth = taxonomy.record(y).depth.max(1) as f64;
            (taxonomy.record(d.exit_node).depth as f64 / truth_depth).min(1.0)
        })
        .sum();
    Ok(sum / decisions.len() as f64)
}

/// All metrics over one set of decisions. `leaf_acc` is present when a
/// forced-leaf pass was supplied (or the decisions already all sit at
/// leaves).
#[derive(Clone, Copy, Debug, Serialize)]
pub struct Metrics {
    pub n: usize,
    pub cpb: f64,
    pub cpb_literal: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub leaf_acc: Option<f64>,
    pub hier_acc: f64,
    pub depth: f64,
    pub leaf_freq: f64,
}

pub fn compute_metrics(
    decisions: &[Decision],
    truths: &[NodeId],
    forced_leaf: Option<&[Decision]>,
    taxonomy: &Taxonomy,
) -> Result<Metrics, EvalError> {
    check_lengths(decisions, truths)?;
    let leaf_acc = match forced_leaf {
        Some(forced) => Some(leaf_accuracy(forced, truths)?),
        None => {
            if decisions.iter().all(|d| d.at_leaf) {
                Some(leaf_accuracy(decisions, truths)?)
            } else {
                None
            }
        }
    };
    Ok(Metrics {
        n: decisions.len(),
        cpb: cpb_normalized(decisions, truths, taxonomy)?,
        cpb_literal: cpb_literal(decisions, truths, taxonomy)?,
        leaf_acc,
        hier_acc: hierarchical_accuracy(decisions, truths, taxonomy)?,
        depth: average_depth(decisions, truths, taxonomy)?,
        leaf_freq: leaf_frequency(decisions)?,
    })
}

/// Metrics overall and per popularity bucket. Buckets with no test samples
/// are omitted.
#[derive(Clone, Debug, Serialize)]
pub struct MetricsReport {
    pub all: Metrics,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub many: Option<Metrics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub medium: Option<Metrics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub few: Option<Metrics>,
}

pub fn report(
    decisions: &[Decision],
    truths: &[NodeId],
    forced_leaf: Option<&[Decision]>,
    split: Option<&PopularitySplit>,
    taxonomy: &Taxonomy,
) -> Result<MetricsReport, EvalError> {
    check_lengths(decisions, truths)?;
    if let Some(forced) = forced_leaf {
        if forced.len() != truths.len() {
            return Err(EvalError::LengthMismatch(forced.len(), truths.len()));
        }
    }
    let all = compute_metrics(decisions, truths, forced_leaf, taxonomy)?;

    let per_bucket = |bucket: Bucket| -> Result<Option<Metrics>, EvalError> {
        let split = match split {
            Some(s) => s,
            None => return Ok(None),
        };
        let rows: Vec<usize> = truths
            .iter()
            .enumerate()
            .filter(|(_, &y)| split.bucket_of(y) == Some(bucket))
            .map(|(i, _)| i)
            .collect();
        if rows.is_empty() {
            return Ok(None);
        }
        let sub_dec: Vec<Decision> = rows.iter().map(|&i| decisions[i].clone()).collect();
        let sub_truth: Vec<NodeId> = rows.iter().map(|&i| truths[i]).collect();
        let sub_forced: Option<Vec<Decision>> =
            forced_leaf.map(|f| rows.iter().map(|&i| f[i].clone()).collect());
        compute_metrics(&sub_dec, &sub_truth, sub_forced.as_deref(), taxonomy).map(Some)
    };

    Ok(MetricsReport {
        many: per_bucket(Bucket::Many)?,
        medium: per_bucket(Bucket::Medium)?,
        few: per_bucket(Bucket::Few)?,
        all,
    })
}

impl Metrics {
    fn write_text(&self, out: &mut String, prefix: &str) {
        let _ = writeln!(out, "{prefix}.n={}", self.n);
        let _ = writeln!(out, "{prefix}.cpb={}", self.cpb);
        let _ = writeln!(out, "{prefix}.cpb_literal={}", self.cpb_literal);
        if let Some(acc) = self.leaf_acc {
            let _ = writeln!(out, "{prefix}.leaf_acc={acc}");
        }
        let _ = writeln!(out, "{prefix}.hier_acc={}", self.hier_acc);
        let _ = writeln!(out, "{prefix}.depth={}", self.depth);
        let _ = writeln!(out, "{prefix}.leaf_freq={}", self.leaf_freq);
    }
}

impl MetricsReport {
    /// Flat key=value rendering, one metric per line.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        self.all.write_text(&mut out, "all");
        for (bucket, metrics) in [
            ("many", &self.many),
            ("medium", &self.medium),
            ("few", &self.few),
        ] {
            if let Some(m) = metrics {
                m.write_text(&mut out, bucket);
            }
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialize cleanly")
    }
}
