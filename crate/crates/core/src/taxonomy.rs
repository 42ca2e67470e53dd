//! Class taxonomy: a rooted tree whose leaves are the fine-grained classes.
//!
//! Every node except the root is a classification node and owns one codeword
//! row. Ids are canonical: the root is id 0 and the remaining nodes are
//! numbered breadth-first with children visited in name order, so node id
//! `i` (i >= 1) owns codeword row `i - 1`. Two taxonomies built from the
//! same edge set therefore agree on every id, codeword and label-set order.

use std::collections::{BTreeSet, HashMap, HashSet, VecDeque};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::Rng;
use thiserror::Error;

/// Cut enumeration refuses to expand ensembles larger than this unless the
/// caller raises the bound explicitly.
pub const DEFAULT_MAX_CUTS: usize = 100_000;

#[derive(Debug, Error)]
pub enum TaxonomyError {
    #[error("hierarchy has no edges")]
    Empty,
    #[error("line {0}: expected \"child<TAB>parent\"")]
    MalformedLine(usize),
    #[error("node {0:?} is listed with more than one parent")]
    DuplicateName(String),
    #[error("multiple roots: {0:?} and {1:?} never appear as children")]
    MultipleRoots(String, String),
    #[error("cycle through node {0:?}")]
    Cycle(String),
    #[error("internal node {0:?} has exactly one child")]
    UnaryInternal(String),
    #[error("reference to unknown node {0:?}")]
    OrphanReference(String),
    #[error("node id {0} out of range")]
    UnknownId(usize),
    #[error("the root carries no codeword")]
    RootCodeword,
    #[error("node {0:?} has no children")]
    NotInternal(String),
    #[error("cut ensemble has {0} members, over the bound of {1}")]
    CutBoundExceeded(u128, usize),
    #[error("no label-set member on the root path of {0:?}")]
    NoMemberOnPath(String),
    #[error("{0:?} is not a proper ancestor of {1:?}")]
    NotOnPath(String, String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Opaque node handle. Only meaningful for the taxonomy that issued it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct NodeRecord {
    pub id: NodeId,
    pub name: String,
    pub parent: Option<NodeId>,
    pub children: Vec<NodeId>,
    /// Proper ancestors from the parent upward; the root is excluded.
    pub ancestors: Vec<NodeId>,
    /// Root depth is 0.
    pub depth: usize,
    /// Leaves in the subtree rooted here; 1 for a leaf.
    pub leaves_below: usize,
}

impl NodeRecord {
    pub fn is_leaf(&self) -> bool {
        self.children.is_empty()
    }
}

/// Which construction produced a label set. The training losses and the
/// node-conditional forward pass care about the distinction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LabelSetKind {
    /// All leaves of the taxonomy.
    FullLeaves,
    /// The frontier of a sampled or enumerated cut.
    CutFrontier,
    /// The children of one internal node.
    NodeChildren(NodeId),
}

/// An ordered set of nodes that together form a valid classification target:
/// every leaf has exactly one member on its root path.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelSet {
    members: Vec<NodeId>,
    kind: LabelSetKind,
}

impl LabelSet {
    fn new(taxonomy: &Taxonomy, mut members: Vec<NodeId>, kind: LabelSetKind) -> Self {
        members.sort_by(|a, b| taxonomy.name(*a).cmp(taxonomy.name(*b)));
        LabelSet { members, kind }
    }

    pub fn members(&self) -> &[NodeId] {
        &self.members
    }

    pub fn kind(&self) -> &LabelSetKind {
        &self.kind
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// Column index of `node` in this label set, if it is a member.
    pub fn position_of(&self, node: NodeId) -> Option<usize> {
        self.members.iter().position(|m| *m == node)
    }
}

/// Codeword columns for one label set, in `members` order. `data` has one
/// row per classification node and one 0/1 column per member.
#[derive(Clone, Debug)]
pub struct CodewordMatrix {
    pub data: Array2<f64>,
    pub members: Vec<NodeId>,
}

/// One member of an enumerated cut ensemble with its sampling probability.
#[derive(Clone, Debug)]
pub struct EnumeratedCut {
    pub label_set: LabelSet,
    pub probability: f64,
}

#[derive(Clone, Debug)]
pub struct Taxonomy {
    nodes: Vec<NodeRecord>,
    leaf_ids: Vec<NodeId>,
    leaf_position: HashMap<NodeId, usize>,
    by_name: HashMap<String, NodeId>,
}

impl Taxonomy {
    /// Builds a taxonomy from (child, parent) name pairs.
    pub fn from_edges<S: AsRef<str>>(edges: &[(S, S)]) -> Result<Self, TaxonomyError> {
        if edges.is_empty() {
            return Err(TaxonomyError::Empty);
        }
        let mut parent_of: HashMap<&str, &str> = HashMap::new();
        let mut names: BTreeSet<&str> = BTreeSet::new();
        for (child, parent) in edges {
            let (c, p) = (child.as_ref(), parent.as_ref());
            if parent_of.insert(c, p).is_some() {
                return Err(TaxonomyError::DuplicateName(c.to_string()));
            }
            names.insert(c);
            names.insert(p);
        }

        let mut parentless = names.iter().filter(|n| !parent_of.contains_key(**n));
        let root_name = match (parentless.next(), parentless.next()) {
            (None, _) => {
                // Every node has a parent, so some chain never terminates.
                let any = names.iter().next().expect("names nonempty");
                return Err(TaxonomyError::Cycle(any.to_string()));
            }
            (Some(r), None) => *r,
            (Some(a), Some(b)) => {
                return Err(TaxonomyError::MultipleRoots(a.to_string(), b.to_string()))
            }
        };

        // Every parent chain must reach the root without revisiting a node.
        let mut reaches_root: HashSet<&str> = HashSet::new();
        reaches_root.insert(root_name);
        for &start in &names {
            let mut chain = Vec::new();
            let mut on_chain: HashSet<&str> = HashSet::new();
            let mut cur = start;
            while !reaches_root.contains(cur) {
                if !on_chain.insert(cur) {
                    return Err(TaxonomyError::Cycle(cur.to_string()));
                }
                chain.push(cur);
                cur = parent_of[cur];
            }
            reaches_root.extend(chain);
        }

        let mut children_of: HashMap<&str, Vec<&str>> = HashMap::new();
        for (&c, &p) in &parent_of {
            children_of.entry(p).or_default().push(c);
        }
        for list in children_of.values_mut() {
            list.sort_unstable();
        }
        for (&p, list) in &children_of {
            if p != root_name && list.len() == 1 {
                return Err(TaxonomyError::UnaryInternal(p.to_string()));
            }
        }

        // Canonical ids: breadth-first, children in name order.
        let mut order: Vec<&str> = Vec::with_capacity(names.len());
        let mut queue = VecDeque::from([root_name]);
        while let Some(n) = queue.pop_front() {
            order.push(n);
            if let Some(ch) = children_of.get(n) {
                queue.extend(ch.iter().copied());
            }
        }
        debug_assert_eq!(order.len(), names.len());

        let id_of: HashMap<&str, NodeId> = order
            .iter()
            .enumerate()
            .map(|(i, &n)| (n, NodeId(i)))
            .collect();

        let mut nodes: Vec<NodeRecord> = Vec::with_capacity(order.len());
        for (i, &name) in order.iter().enumerate() {
            let parent = parent_of.get(name).map(|p| id_of[p]);
            let children: Vec<NodeId> = children_of
                .get(name)
                .map(|ch| ch.iter().map(|c| id_of[c]).collect())
                .unwrap_or_default();
            let mut ancestors = Vec::new();
            let mut cur = name;
            while let Some(&p) = parent_of.get(cur) {
                if p != root_name {
                    ancestors.push(id_of[p]);
                }
                cur = p;
            }
            let depth = if parent.is_none() { 0 } else { ancestors.len() + 1 };
            nodes.push(NodeRecord {
                id: NodeId(i),
                name: name.to_string(),
                parent,
                children,
                ancestors,
                depth,
                leaves_below: 0,
            });
        }
        // Breadth-first order puts parents before children, so a reverse
        // sweep accumulates subtree leaf counts in one pass.
        for i in (0..nodes.len()).rev() {
            let count = if nodes[i].children.is_empty() {
                1
            } else {
                nodes[i].children.iter().map(|c| nodes[c.0].leaves_below).sum()
            };
            nodes[i].leaves_below = count;
        }

        let mut leaf_ids: Vec<NodeId> = nodes
            .iter()
            .filter(|n| n.is_leaf())
            .map(|n| n.id)
            .collect();
        leaf_ids.sort_by(|a, b| nodes[a.0].name.cmp(&nodes[b.0].name));
        let leaf_position = leaf_ids.iter().enumerate().map(|(i, &n)| (n, i)).collect();
        let by_name = nodes.iter().map(|n| (n.name.clone(), n.id)).collect();

        Ok(Taxonomy { nodes, leaf_ids, leaf_position, by_name })
    }

    /// Parses the tab-separated edge format: one `child<TAB>parent` pair per
    /// line, `#` starts a comment, blank lines are ignored.
    pub fn parse(text: &str) -> Result<Self, TaxonomyError> {
        let mut edges = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split('\t');
            let child = parts.next().map(str::trim).unwrap_or_default();
            let parent = parts.next().map(str::trim).unwrap_or_default();
            if child.is_empty() || parent.is_empty() || parts.next().is_some() {
                return Err(TaxonomyError::MalformedLine(lineno + 1));
            }
            edges.push((child.to_string(), parent.to_string()));
        }
        Self::from_edges(&edges)
    }

    pub fn load(path: &Path) -> Result<Self, TaxonomyError> {
        Self::parse(&fs::read_to_string(path)?)
    }

    /// Serializes back to the `child<TAB>parent` format, children in name
    /// order, depth-first, so `parse` round-trips to an identical taxonomy.
    pub fn to_edge_string(&self) -> String {
        let mut out = String::new();
        let mut stack = vec![self.root()];
        while let Some(n) = stack.pop() {
            let rec = self.record(n);
            for &c in rec.children.iter().rev() {
                stack.push(c);
            }
            if let Some(p) = rec.parent {
                let _ = writeln!(out, "{}\t{}", rec.name, self.name(p));
            }
        }
        out
    }

    /// Human-oriented view: one node per line, two spaces per depth level.
    pub fn to_indented_string(&self) -> String {
        let mut out = String::new();
        let mut stack = vec![self.root()];
        while let Some(n) = stack.pop() {
            let rec = self.record(n);
            for &c in rec.children.iter().rev() {
                stack.push(c);
            }
            let _ = writeln!(out, "{}{}", "  ".repeat(rec.depth), rec.name);
        }
        out
    }

    pub fn root(&self) -> NodeId {
        NodeId(0)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Number of classification nodes (everything but the root).
    pub fn classification_count(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn leaf_count(&self) -> usize {
        self.leaf_ids.len()
    }

    /// Leaf ids in name order. This is the canonical class order used by
    /// datasets, flat baselines and popularity splits.
    pub fn leaf_ids(&self) -> &[NodeId] {
        &self.leaf_ids
    }

    /// Position of `leaf` within `leaf_ids`, if it is a leaf.
    pub fn leaf_position(&self, leaf: NodeId) -> Option<usize> {
        self.leaf_position.get(&leaf).copied()
    }

    pub fn record(&self, n: NodeId) -> &NodeRecord {
        &self.nodes[n.0]
    }

    pub fn try_record(&self, n: NodeId) -> Result<&NodeRecord, TaxonomyError> {
        self.nodes.get(n.0).ok_or(TaxonomyError::UnknownId(n.0))
    }

    pub fn name(&self, n: NodeId) -> &str {
        &self.nodes[n.0].name
    }

    pub fn node_by_name(&self, name: &str) -> Result<NodeId, TaxonomyError> {
        self.by_name
            .get(name)
            .copied()
            .ok_or_else(|| TaxonomyError::OrphanReference(name.to_string()))
    }

    pub fn nodes(&self) -> impl Iterator<Item = &NodeRecord> {
        self.nodes.iter()
    }

    /// Codeword row of a classification node.
    pub fn codeword_row(&self, n: NodeId) -> Result<usize, TaxonomyError> {
        self.try_record(n)?;
        if n.0 == 0 {
            return Err(TaxonomyError::RootCodeword);
        }
        Ok(n.0 - 1)
    }

    pub fn node_at_row(&self, row: usize) -> Result<NodeId, TaxonomyError> {
        let id = NodeId(row + 1);
        self.try_record(id)?;
        Ok(id)
    }

    /// 0/1 codeword of `n`: flags `n` itself plus its proper ancestors below
    /// the root. One entry per classification node.
    pub fn codeword(&self, n: NodeId) -> Result<Array1<f64>, TaxonomyError> {
        let mut q = Array1::zeros(self.classification_count());
        for row in self.codeword_rows(n)? {
            q[row] = 1.0;
        }
        Ok(q)
    }

    /// Rows set to 1 in `codeword(n)`: the node's own row then its
    /// ancestors' rows, parent first.
    pub fn codeword_rows(&self, n: NodeId) -> Result<Vec<usize>, TaxonomyError> {
        let rec = self.try_record(n)?;
        if n.0 == 0 {
            return Err(TaxonomyError::RootCodeword);
        }
        let mut rows = Vec::with_capacity(1 + rec.ancestors.len());
        rows.push(n.0 - 1);
        for &a in &rec.ancestors {
            rows.push(a.0 - 1);
        }
        Ok(rows)
    }

    /// Codeword columns of every member of `set`, in member order.
    pub fn codeword_matrix(&self, set: &LabelSet) -> Result<CodewordMatrix, TaxonomyError> {
        let mut data = Array2::zeros((self.classification_count(), set.len()));
        for (col, &m) in set.members().iter().enumerate() {
            for row in self.codeword_rows(m)? {
                data[[row, col]] = 1.0;
            }
        }
        Ok(CodewordMatrix { data, members: set.members().to_vec() })
    }

    /// Codewords for the children of `n` with ancestor rows zeroed: each
    /// column flags only the child's own row. This is the node-conditional
    /// classifier's view, where shared ancestor terms cancel in the softmax.
    pub fn node_codeword_matrix(&self, n: NodeId) -> Result<CodewordMatrix, TaxonomyError> {
        let rec = self.try_record(n)?;
        if rec.is_leaf() {
            return Err(TaxonomyError::NotInternal(rec.name.clone()));
        }
        let mut data = Array2::zeros((self.classification_count(), rec.children.len()));
        for (col, &c) in rec.children.iter().enumerate() {
            data[[c.0 - 1, col]] = 1.0;
        }
        Ok(CodewordMatrix { data, members: rec.children.clone() })
    }

    /// The finest label set: all leaves.
    pub fn leaf_label_set(&self) -> LabelSet {
        LabelSet { members: self.leaf_ids.clone(), kind: LabelSetKind::FullLeaves }
    }

    /// The children of one internal node as a label set.
    pub fn children_label_set(&self, n: NodeId) -> Result<LabelSet, TaxonomyError> {
        let rec = self.try_record(n)?;
        if rec.is_leaf() {
            return Err(TaxonomyError::NotInternal(rec.name.clone()));
        }
        Ok(LabelSet { members: rec.children.clone(), kind: LabelSetKind::NodeChildren(n) })
    }

    /// Builds a cut frontier from explicit members. Callers are responsible
    /// for frontier validity; sampling and enumeration go through this.
    fn cut_label_set(&self, members: Vec<NodeId>) -> LabelSet {
        LabelSet::new(self, members, LabelSetKind::CutFrontier)
    }

    /// Samples a random cut: walking top-down, each internal non-root node
    /// reached is kept with probability `keep_rate` (one Bernoulli draw, in
    /// depth-first preorder); a dropped node joins the frontier and its
    /// subtree is never visited. Leaves always join the frontier.
    ///
    /// `keep_rate` 1.0 yields the full leaf frontier, 0.0 the root's
    /// children.
    pub fn sample_cut<R: Rng + ?Sized>(&self, keep_rate: f64, rng: &mut R) -> LabelSet {
        let mut members = Vec::new();
        let root = self.record(self.root());
        let mut stack: Vec<NodeId> = root.children.iter().rev().copied().collect();
        while let Some(n) = stack.pop() {
            let rec = self.record(n);
            if rec.is_leaf() {
                members.push(n);
            } else if rng.random_bool(keep_rate) {
                stack.extend(rec.children.iter().rev().copied());
            } else {
                members.push(n);
            }
        }
        self.cut_label_set(members)
    }

    /// Number of distinct cuts, saturating at `u128::MAX`.
    pub fn count_cuts(&self) -> u128 {
        self.kept_count(self.root())
    }

    // Cuts of the subtree under `v` given that `v` itself was kept: the
    // product over children of (1 for stopping at the child, if droppable,
    // plus the child's own kept count).
    fn kept_count(&self, v: NodeId) -> u128 {
        let mut total: u128 = 1;
        for &c in &self.record(v).children {
            let options = if self.record(c).is_leaf() {
                1
            } else {
                1u128.saturating_add(self.kept_count(c))
            };
            total = total.saturating_mul(options);
        }
        total
    }

    /// Expands the full cut ensemble with each cut's sampling probability
    /// under per-node keep rate `keep_rate`. Probabilities sum to 1.
    pub fn enumerate_cuts(
        &self,
        keep_rate: f64,
        max_cuts: usize,
    ) -> Result<Vec<EnumeratedCut>, TaxonomyError> {
        let count = self.count_cuts();
        if count > max_cuts as u128 {
            return Err(TaxonomyError::CutBoundExceeded(count, max_cuts));
        }
        let expanded = self.kept_expansion(self.root(), keep_rate);
        Ok(expanded
            .into_iter()
            .map(|(members, probability)| EnumeratedCut {
                label_set: self.cut_label_set(members),
                probability,
            })
            .collect())
    }

    // All frontiers of the subtree under a kept node `v`, as a cross product
    // over its children, with probabilities.
    fn kept_expansion(&self, v: NodeId, keep_rate: f64) -> Vec<(Vec<NodeId>, f64)> {
        let mut acc: Vec<(Vec<NodeId>, f64)> = vec![(Vec::new(), 1.0)];
        for &c in &self.record(v).children {
            let options: Vec<(Vec<NodeId>, f64)> = if self.record(c).is_leaf() {
                vec![(vec![c], 1.0)]
            } else {
                let mut opts = vec![(vec![c], 1.0 - keep_rate)];
                for (members, p) in self.kept_expansion(c, keep_rate) {
                    opts.push((members, keep_rate * p));
                }
                opts
            };
            let mut next = Vec::with_capacity(acc.len() * options.len());
            for (members, p) in &acc {
                for (extra, q) in &options {
                    let mut joined = members.clone();
                    joined.extend_from_slice(extra);
                    next.push((joined, p * q));
                }
            }
            acc = next;
        }
        acc
    }

    /// Projects a leaf label onto a label set: the unique member on the
    /// leaf's root path (the leaf itself or one of its proper ancestors).
    pub fn project_label(&self, leaf: NodeId, set: &LabelSet) -> Result<NodeId, TaxonomyError> {
        let rec = self.try_record(leaf)?;
        if set.position_of(leaf).is_some() {
            return Ok(leaf);
        }
        for &a in &rec.ancestors {
            if set.position_of(a).is_some() {
                return Ok(a);
            }
        }
        Err(TaxonomyError::NoMemberOnPath(rec.name.clone()))
    }

    /// The child of `n` that lies on the root path of `leaf`. `n` must be a
    /// proper ancestor of `leaf` (the root counts).
    pub fn child_toward(&self, n: NodeId, leaf: NodeId) -> Result<NodeId, TaxonomyError> {
        let rec = self.try_record(leaf)?;
        self.try_record(n)?;
        let mut cur = leaf;
        while let Some(p) = self.record(cur).parent {
            if p == n {
                return Ok(cur);
            }
            cur = p;
        }
        Err(TaxonomyError::NotOnPath(
            self.name(n).to_string(),
            rec.name.clone(),
        ))
    }

    /// Root path of `leaf` from the root down to the leaf itself.
    pub fn root_path(&self, leaf: NodeId) -> Vec<NodeId> {
        let rec = self.record(leaf);
        let mut path = Vec::with_capacity(rec.ancestors.len() + 2);
        path.push(leaf);
        path.extend(rec.ancestors.iter().copied());
        if rec.parent.is_some() {
            path.push(self.root());
        }
        path.reverse();
        path
    }

    /// Two-level version of this taxonomy: the same root with every leaf
    /// attached directly to it. Leaf names and hence the canonical class
    /// order are preserved.
    pub fn flattened(&self) -> Taxonomy {
        let root_name = self.name(self.root()).to_string();
        let edges: Vec<(String, String)> = self
            .leaf_ids
            .iter()
            .map(|&l| (self.name(l).to_string(), root_name.clone()))
            .collect();
        Taxonomy::from_edges(&edges).expect("flattened tree is always valid")
    }
}
