//! Finite filtered market: an event tree whose nodes are the atoms of each
//! sigma-algebra, carrying branch probabilities and asset prices.
//!
//! Nodes are kept in level order (all nodes of time `t` are contiguous) so
//! backward sweeps can walk whole levels. Probabilities are stored as
//! conditional branch probabilities; unconditional ones are derived on demand.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::law::DiscreteLaw;
use crate::scalar::{dot, Scalar};

/// Branch probabilities of a node's children must sum to one within this.
pub const PROB_SUM_TOL: f64 = 1e-12;

/// Raw node record as it appears in tree files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeSpec<T> {
    pub id: u64,
    pub time: usize,
    #[serde(default)]
    pub parent: Option<u64>,
    pub prob: T,
    pub price: Vec<T>,
}

/// Raw tree file contents, before validation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TreeSpec<T> {
    pub horizon: usize,
    pub assets: usize,
    pub nodes: Vec<NodeSpec<T>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub claim: Option<BTreeMap<u64, T>>,
}

/// A single structural or numerical defect found by [`validate_tree`].
#[derive(Clone, Debug, PartialEq)]
pub enum ValidationIssue {
    InvalidDimensions { horizon: usize, assets: usize },
    MissingRoot,
    MultipleRoots { ids: Vec<u64> },
    RootTime { id: u64, time: usize },
    RootProbability { id: u64, prob: f64 },
    DuplicateId { id: u64 },
    UnknownParent { id: u64, parent: u64 },
    TimeGap { id: u64, time: usize, parent_time: usize },
    BeyondHorizon { id: u64, time: usize },
    EarlyLeaf { id: u64, time: usize },
    Orphan { id: u64 },
    PriceDimension { id: u64, got: usize, expected: usize },
    NonFinitePrice { id: u64 },
    NonPositiveProbability { id: u64, prob: f64 },
    ProbabilitySum { parent: u64, sum: f64 },
    ClaimOnUnknownNode { id: u64 },
    ClaimOnInnerNode { id: u64 },
    NonFiniteClaim { id: u64 },
}

impl fmt::Display for ValidationIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        use ValidationIssue::*;
        match self {
            InvalidDimensions { horizon, assets } => {
                write!(f, "horizon ({horizon}) and assets ({assets}) must both be at least 1")
            }
            MissingRoot => write!(f, "no root node (a node without parent)"),
            MultipleRoots { ids } => write!(f, "multiple root nodes: {ids:?}"),
            RootTime { id, time } => write!(f, "root node {id} has time {time}, expected 0"),
            RootProbability { id, prob } => write!(f, "root node {id} has probability {prob}, expected 1"),
            DuplicateId { id } => write!(f, "duplicate node id {id}"),
            UnknownParent { id, parent } => write!(f, "node {id} references unknown parent {parent}"),
            TimeGap { id, time, parent_time } => write!(
                f,
                "time gap: node {id} at time {time} has parent at time {parent_time}"
            ),
            BeyondHorizon { id, time } => write!(f, "node {id} at time {time} lies beyond the horizon"),
            EarlyLeaf { id, time } => write!(f, "node {id} at time {time} has no children before the horizon"),
            Orphan { id } => write!(f, "orphan node {id} is not reachable from the root"),
            PriceDimension { id, got, expected } => {
                write!(f, "node {id} has {got} prices, expected {expected}")
            }
            NonFinitePrice { id } => write!(f, "node {id} has a non-finite price"),
            NonPositiveProbability { id, prob } => {
                write!(f, "node {id} has branch probability {prob}, expected a value in (0, 1]")
            }
            ProbabilitySum { parent, sum } => {
                write!(f, "children of node {parent}: probabilities sum to {sum}")
            }
            ClaimOnUnknownNode { id } => write!(f, "claim references unknown node {id}"),
            ClaimOnInnerNode { id } => write!(f, "claim references node {id}, which is not a leaf"),
            NonFiniteClaim { id } => write!(f, "claim at node {id} is not finite"),
        }
    }
}

/// Outcome of [`validate_tree`]; diagnoses rather than fails.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ValidationReport {
    pub issues: Vec<ValidationIssue>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.issues.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.passed() {
            return write!(f, "pass");
        }
        write!(f, "fail: ")?;
        for (i, issue) in self.issues.iter().enumerate() {
            if i > 0 {
                write!(f, "; ")?;
            }
            write!(f, "{issue}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum TreeError {
    #[error("invalid tree: {0}")]
    Invalid(ValidationReport),
    #[error("strategy has no position at non-leaf node {node}")]
    MissingPosition { node: u64 },
    #[error("position at node {node} has {got} entries, expected {expected}")]
    PositionDimension { node: u64, got: usize, expected: usize },
    #[error("unknown node id {0}")]
    UnknownNode(u64),
}

/// Checks every structural and probabilistic invariant of a raw tree.
pub fn validate_tree<T: Scalar>(spec: &TreeSpec<T>) -> ValidationReport {
    let mut issues = Vec::new();
    if spec.horizon == 0 || spec.assets == 0 {
        issues.push(ValidationIssue::InvalidDimensions { horizon: spec.horizon, assets: spec.assets });
    }

    let mut by_id: HashMap<u64, usize> = HashMap::with_capacity(spec.nodes.len());
    for (i, n) in spec.nodes.iter().enumerate() {
        if by_id.insert(n.id, i).is_some() {
            issues.push(ValidationIssue::DuplicateId { id: n.id });
        }
    }

    let roots: Vec<u64> = spec.nodes.iter().filter(|n| n.parent.is_none()).map(|n| n.id).collect();
    match roots.len() {
        0 => issues.push(ValidationIssue::MissingRoot),
        1 => {}
        _ => issues.push(ValidationIssue::MultipleRoots { ids: roots.clone() }),
    }

    let mut child_count: HashMap<u64, usize> = HashMap::new();
    let mut prob_sums: BTreeMap<u64, f64> = BTreeMap::new();
    for n in &spec.nodes {
        if n.price.len() != spec.assets {
            issues.push(ValidationIssue::PriceDimension { id: n.id, got: n.price.len(), expected: spec.assets });
        }
        if n.price.iter().any(|p| !p.is_finite()) {
            issues.push(ValidationIssue::NonFinitePrice { id: n.id });
        }
        if n.time > spec.horizon {
            issues.push(ValidationIssue::BeyondHorizon { id: n.id, time: n.time });
        }
        let prob = n.prob.to_f64_lossy();
        match n.parent {
            None => {
                if n.time != 0 {
                    issues.push(ValidationIssue::RootTime { id: n.id, time: n.time });
                }
                if (prob - 1.0).abs() > PROB_SUM_TOL {
                    issues.push(ValidationIssue::RootProbability { id: n.id, prob });
                }
            }
            Some(p) => {
                if !(prob > 0.0 && prob <= 1.0) {
                    issues.push(ValidationIssue::NonPositiveProbability { id: n.id, prob });
                }
                match by_id.get(&p) {
                    None => issues.push(ValidationIssue::UnknownParent { id: n.id, parent: p }),
                    Some(&pi) => {
                        let parent_time = spec.nodes[pi].time;
                        if n.time != parent_time + 1 {
                            issues.push(ValidationIssue::TimeGap { id: n.id, time: n.time, parent_time });
                        }
                        *child_count.entry(p).or_default() += 1;
                        *prob_sums.entry(p).or_default() += prob;
                    }
                }
            }
        }
    }
    for (&parent, &sum) in &prob_sums {
        if (sum - 1.0).abs() > PROB_SUM_TOL {
            issues.push(ValidationIssue::ProbabilitySum { parent, sum });
        }
    }
    for n in &spec.nodes {
        if n.time < spec.horizon && !child_count.contains_key(&n.id) {
            issues.push(ValidationIssue::EarlyLeaf { id: n.id, time: n.time });
        }
    }

    // Reachability from the root catches parent cycles.
    if roots.len() == 1 {
        let mut kids: HashMap<u64, Vec<u64>> = HashMap::new();
        for n in &spec.nodes {
            if let Some(p) = n.parent {
                kids.entry(p).or_default().push(n.id);
            }
        }
        let mut seen: HashMap<u64, bool> = HashMap::new();
        let mut queue = VecDeque::from([roots[0]]);
        while let Some(id) = queue.pop_front() {
            if seen.insert(id, true).is_some() {
                continue;
            }
            if let Some(ks) = kids.get(&id) {
                queue.extend(ks.iter().copied());
            }
        }
        for n in &spec.nodes {
            if !seen.contains_key(&n.id) && by_id.contains_key(&n.id) {
                issues.push(ValidationIssue::Orphan { id: n.id });
            }
        }
    }

    if let Some(claim) = &spec.claim {
        for (&id, b) in claim {
            match by_id.get(&id) {
                None => issues.push(ValidationIssue::ClaimOnUnknownNode { id }),
                Some(&i) if spec.nodes[i].time != spec.horizon => {
                    issues.push(ValidationIssue::ClaimOnInnerNode { id })
                }
                Some(_) => {}
            }
            if !b.is_finite() {
                issues.push(ValidationIssue::NonFiniteClaim { id });
            }
        }
    }

    ValidationReport { issues }
}

/// Index of a node inside a [`ScenarioTree`] (level order).
pub type NodeIdx = usize;

#[derive(Clone, Debug, PartialEq)]
pub struct Node<T> {
    pub id: u64,
    pub time: usize,
    pub parent: Option<NodeIdx>,
    /// Conditional probability of reaching this node from its parent.
    pub prob: T,
    pub price: Vec<T>,
}

/// Validated, immutable scenario tree.
#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioTree<T> {
    horizon: usize,
    assets: usize,
    nodes: Vec<Node<T>>,
    children: Vec<Vec<NodeIdx>>,
    levels: Vec<Range<NodeIdx>>,
    index: HashMap<u64, NodeIdx>,
}

impl<T: Scalar> ScenarioTree<T> {
    /// Validates `spec` and lays its nodes out in level order.
    pub fn from_spec(spec: &TreeSpec<T>) -> Result<Self, TreeError> {
        let report = validate_tree(spec);
        if !report.passed() {
            return Err(TreeError::Invalid(report));
        }
        let mut kids: HashMap<u64, Vec<usize>> = HashMap::new();
        let mut root = 0;
        for (i, n) in spec.nodes.iter().enumerate() {
            match n.parent {
                Some(p) => kids.entry(p).or_default().push(i),
                None => root = i,
            }
        }

        // Breadth-first traversal yields level order since times increase by one per edge.
        let mut order = Vec::with_capacity(spec.nodes.len());
        let mut queue = VecDeque::from([root]);
        while let Some(i) = queue.pop_front() {
            order.push(i);
            if let Some(ks) = kids.get(&spec.nodes[i].id) {
                queue.extend(ks.iter().copied());
            }
        }
        let index: HashMap<u64, NodeIdx> =
            order.iter().enumerate().map(|(new, &old)| (spec.nodes[old].id, new)).collect();

        let nodes: Vec<Node<T>> = order
            .iter()
            .map(|&old| {
                let n = &spec.nodes[old];
                Node {
                    id: n.id,
                    time: n.time,
                    parent: n.parent.map(|p| index[&p]),
                    prob: n.prob,
                    price: n.price.clone(),
                }
            })
            .collect();
        Ok(Self::assemble(spec.horizon, spec.assets, nodes, index))
    }

    fn assemble(horizon: usize, assets: usize, nodes: Vec<Node<T>>, index: HashMap<u64, NodeIdx>) -> Self {
        let mut children = vec![Vec::new(); nodes.len()];
        for (i, n) in nodes.iter().enumerate() {
            if let Some(p) = n.parent {
                children[p].push(i);
            }
        }
        let mut levels = Vec::with_capacity(horizon + 1);
        let mut start = 0;
        for t in 0..=horizon {
            let end = start + nodes[start..].iter().take_while(|n| n.time == t).count();
            levels.push(start..end);
            start = end;
        }
        Self { horizon, assets, nodes, children, levels, index }
    }

    /// One-period market: root price `price0`, one child per `(prob, increment)`.
    pub fn one_period(price0: Vec<T>, branches: &[(T, Vec<T>)]) -> Result<Self, TreeError> {
        Self::iid(1, price0, branches)
    }

    /// Non-recombining tree in which every node branches with the same
    /// `(prob, increment)` pairs.
    pub fn iid(horizon: usize, price0: Vec<T>, branches: &[(T, Vec<T>)]) -> Result<Self, TreeError> {
        let mut b = TreeBuilder::new(horizon, price0);
        let mut frontier = vec![b.root()];
        for _ in 0..horizon {
            let mut next = Vec::new();
            for &n in &frontier {
                for (p, inc) in branches {
                    next.push(b.child(n, *p, inc));
                }
            }
            frontier = next;
        }
        b.build()
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn assets(&self) -> usize {
        self.assets
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn root(&self) -> NodeIdx {
        0
    }

    pub fn node(&self, i: NodeIdx) -> &Node<T> {
        &self.nodes[i]
    }

    pub fn nodes(&self) -> &[Node<T>] {
        &self.nodes
    }

    pub fn children(&self, i: NodeIdx) -> &[NodeIdx] {
        &self.children[i]
    }

    pub fn is_leaf(&self, i: NodeIdx) -> bool {
        self.children[i].is_empty()
    }

    /// Node indices at time `t`.
    pub fn level(&self, t: usize) -> Range<NodeIdx> {
        self.levels[t].clone()
    }

    pub fn leaves(&self) -> Range<NodeIdx> {
        self.level(self.horizon)
    }

    /// All nodes before the horizon, i.e. those carrying a trading decision.
    pub fn decision_nodes(&self) -> Range<NodeIdx> {
        0..self.levels[self.horizon].start
    }

    pub fn index_of(&self, id: u64) -> Option<NodeIdx> {
        self.index.get(&id).copied()
    }

    /// Price increment `S(node) - S(parent)`; zero at the root.
    pub fn increment(&self, i: NodeIdx) -> Vec<T> {
        match self.nodes[i].parent {
            None => vec![T::zero(); self.assets],
            Some(p) => self.nodes[i].price.iter().zip(&self.nodes[p].price).map(|(&a, &b)| a - b).collect(),
        }
    }

    /// Unconditional probability of a node, the product of branch
    /// probabilities along its root path.
    pub fn unconditional_prob(&self, mut i: NodeIdx) -> T {
        let mut p = T::one();
        while let Some(parent) = self.nodes[i].parent {
            p = p * self.nodes[i].prob;
            i = parent;
        }
        p
    }

    /// Unconditional probabilities of every node in one level-order pass.
    pub fn unconditional_probs(&self) -> Vec<T> {
        let mut out = vec![T::one(); self.nodes.len()];
        for i in 1..self.nodes.len() {
            let p = self.nodes[i].parent.expect("non-root has parent");
            out[i] = out[p] * self.nodes[i].prob;
        }
        out
    }

    /// Ancestors of `i` from its parent up to the root.
    pub fn ancestors(&self, i: NodeIdx) -> impl Iterator<Item = NodeIdx> + '_ {
        std::iter::successors(self.nodes[i].parent, move |&a| self.nodes[a].parent)
    }

    /// Leaves of the subtree rooted at `i`, with probabilities conditional on `i`.
    pub fn subtree_leaves(&self, i: NodeIdx) -> Vec<(NodeIdx, T)> {
        let mut out = Vec::new();
        let mut stack = vec![(i, T::one())];
        while let Some((n, p)) = stack.pop() {
            if self.is_leaf(n) {
                out.push((n, p));
            } else {
                for &c in self.children[n].iter().rev() {
                    stack.push((c, p * self.nodes[c].prob));
                }
            }
        }
        out
    }

    /// Converts back to the raw file representation.
    pub fn to_spec(&self, claim: Option<&Claim<T>>) -> TreeSpec<T> {
        TreeSpec {
            horizon: self.horizon,
            assets: self.assets,
            nodes: self
                .nodes
                .iter()
                .map(|n| NodeSpec {
                    id: n.id,
                    time: n.time,
                    parent: n.parent.map(|p| self.nodes[p].id),
                    prob: n.prob,
                    price: n.price.clone(),
                })
                .collect(),
            claim: claim.map(|c| self.leaves().map(|l| (self.nodes[l].id, c.at(l))).collect()),
        }
    }
}

/// Incremental construction of trees in code; node ids are assigned in insertion order.
#[derive(Clone, Debug)]
pub struct TreeBuilder<T> {
    horizon: usize,
    specs: Vec<NodeSpec<T>>,
}

impl<T: Scalar> TreeBuilder<T> {
    pub fn new(horizon: usize, price0: Vec<T>) -> Self {
        Self { horizon, specs: vec![NodeSpec { id: 0, time: 0, parent: None, prob: T::one(), price: price0 }] }
    }

    /// Builder handle of the root.
    pub fn root(&self) -> usize {
        0
    }

    /// Adds a child of builder handle `parent` reached with conditional
    /// probability `prob` and price increment `increment`.
    pub fn child(&mut self, parent: usize, prob: T, increment: &[T]) -> usize {
        let p = &self.specs[parent];
        let price = p.price.iter().zip(increment).map(|(&a, &b)| a + b).collect();
        let spec = NodeSpec { id: self.specs.len() as u64, time: p.time + 1, parent: Some(p.id), prob, price };
        self.specs.push(spec);
        self.specs.len() - 1
    }

    pub fn spec(&self) -> TreeSpec<T> {
        let assets = self.specs[0].price.len();
        TreeSpec { horizon: self.horizon, assets, nodes: self.specs.clone(), claim: None }
    }

    pub fn build(&self) -> Result<ScenarioTree<T>, TreeError> {
        ScenarioTree::from_spec(&self.spec())
    }
}

/// Predictable strategy: one position vector per decision node, applied on
/// the step from that node to each of its children.
#[derive(Clone, Debug, PartialEq)]
pub struct Strategy<T> {
    positions: Vec<Option<Vec<T>>>,
}

/// Serialized form of one strategy entry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodePosition<T> {
    pub node: u64,
    pub position: Vec<T>,
}

impl<T: Scalar> Strategy<T> {
    /// Strategy without any positions; every decision node must be set before use.
    pub fn empty(tree: &ScenarioTree<T>) -> Self {
        Self { positions: vec![None; tree.len()] }
    }

    pub fn zeros(tree: &ScenarioTree<T>) -> Self {
        Self::constant(tree, &vec![T::zero(); tree.assets()])
    }

    pub fn constant(tree: &ScenarioTree<T>, position: &[T]) -> Self {
        let mut s = Self::empty(tree);
        for n in tree.decision_nodes() {
            s.positions[n] = Some(position.to_vec());
        }
        s
    }

    pub fn set(&mut self, node: NodeIdx, position: Vec<T>) {
        self.positions[node] = Some(position);
    }

    pub fn get(&self, node: NodeIdx) -> Option<&[T]> {
        self.positions.get(node).and_then(|p| p.as_deref())
    }

    /// Applies `f` to every defined position.
    pub fn map(&self, mut f: impl FnMut(NodeIdx, &[T]) -> Vec<T>) -> Self {
        let positions =
            self.positions.iter().enumerate().map(|(i, p)| p.as_ref().map(|v| f(i, v))).collect();
        Self { positions }
    }

    /// Pointwise `alpha * self + other`.
    pub fn axpy(&self, alpha: T, other: &Self) -> Self {
        let positions = self
            .positions
            .iter()
            .zip(&other.positions)
            .map(|(a, b)| match (a, b) {
                (Some(a), Some(b)) => Some(a.iter().zip(b).map(|(&x, &y)| alpha * x + y).collect()),
                _ => None,
            })
            .collect();
        Self { positions }
    }

    pub fn to_entries(&self, tree: &ScenarioTree<T>) -> Vec<NodePosition<T>> {
        tree.decision_nodes()
            .filter_map(|n| self.get(n).map(|p| NodePosition { node: tree.node(n).id, position: p.to_vec() }))
            .collect()
    }

    pub fn from_entries(tree: &ScenarioTree<T>, entries: &[NodePosition<T>]) -> Result<Self, TreeError> {
        let mut s = Self::empty(tree);
        for e in entries {
            let i = tree.index_of(e.node).ok_or(TreeError::UnknownNode(e.node))?;
            if e.position.len() != tree.assets() {
                return Err(TreeError::PositionDimension {
                    node: e.node,
                    got: e.position.len(),
                    expected: tree.assets(),
                });
            }
            s.set(i, e.position.clone());
        }
        Ok(s)
    }
}

/// Terminal liability `B`, one payoff per leaf.
#[derive(Clone, Debug, PartialEq)]
pub struct Claim<T> {
    payoff: Vec<T>,
}

impl<T: Scalar> Claim<T> {
    pub fn zero(tree: &ScenarioTree<T>) -> Self {
        Self::constant(tree, T::zero())
    }

    pub fn constant(tree: &ScenarioTree<T>, b: T) -> Self {
        Self { payoff: vec![b; tree.len()] }
    }

    /// Builds a claim from a leaf-id map; unlisted leaves pay zero.
    pub fn from_leaf_map(tree: &ScenarioTree<T>, map: &BTreeMap<u64, T>) -> Result<Self, TreeError> {
        let mut c = Self::zero(tree);
        for (&id, &b) in map {
            let i = tree.index_of(id).ok_or(TreeError::UnknownNode(id))?;
            c.payoff[i] = b;
        }
        Ok(c)
    }

    /// Reads the optional `claim` field of a tree file.
    pub fn from_spec(tree: &ScenarioTree<T>, spec: &TreeSpec<T>) -> Result<Self, TreeError> {
        match &spec.claim {
            Some(map) => Self::from_leaf_map(tree, map),
            None => Ok(Self::zero(tree)),
        }
    }

    pub fn set(&mut self, leaf: NodeIdx, b: T) {
        self.payoff[leaf] = b;
    }

    pub fn at(&self, leaf: NodeIdx) -> T {
        self.payoff[leaf]
    }

    /// Largest payoff over the leaves below `node`.
    pub fn max_below(&self, tree: &ScenarioTree<T>, node: NodeIdx) -> T {
        tree.subtree_leaves(node).iter().map(|&(l, _)| self.payoff[l]).fold(T::neg_infinity(), T::max)
    }

    pub fn max_abs(&self, tree: &ScenarioTree<T>) -> T {
        tree.leaves().map(|l| self.payoff[l].abs()).fold(T::zero(), T::max)
    }
}

/// Wealth `X_t = z + sum_j phi_j . dS_j` at every node.
pub fn wealth_process<T: Scalar>(tree: &ScenarioTree<T>, strategy: &Strategy<T>, z: T) -> Result<Vec<T>, TreeError> {
    let mut x = vec![T::zero(); tree.len()];
    x[0] = z;
    for i in 1..tree.len() {
        let p = tree.node(i).parent.expect("non-root has parent");
        let phi = strategy.get(p).ok_or(TreeError::MissingPosition { node: tree.node(p).id })?;
        if phi.len() != tree.assets() {
            return Err(TreeError::PositionDimension { node: tree.node(p).id, got: phi.len(), expected: tree.assets() });
        }
        x[i] = x[p] + dot(phi, &tree.increment(i));
    }
    Ok(x)
}

/// Law of `X_T - B` with atoms closer than [`crate::law::MERGE_TOL`] coalesced.
pub fn terminal_law<T: Scalar>(
    tree: &ScenarioTree<T>,
    strategy: &Strategy<T>,
    z: T,
    claim: &Claim<T>,
) -> Result<DiscreteLaw<T>, TreeError> {
    let x = wealth_process(tree, strategy, z)?;
    let probs = tree.unconditional_probs();
    Ok(DiscreteLaw::from_weighted(tree.leaves().map(|l| (x[l] - claim.at(l), probs[l]))))
}
