//! Conditional support geometry of the price increments and the quantitative
//! no-arbitrage constants.
//!
//! At a decision node the one-step increments `v_i = dS` towards the children
//! span a subspace `D`. Absence of arbitrage means every direction in `D`
//! loses money on some child; `beta` quantifies the size of that loss per
//! unit position, `kappa` the probability of the losing children, and `pi`
//! bounds from below the probability of losing at one step and never gaining
//! afterwards.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::{dot, norm, Scalar};
use crate::simplex::{maximize, LpOutcome};
use crate::tree::{NodeIdx, NodePosition, ScenarioTree, Strategy};

/// Relative singular-value cutoff of the span computation.
pub const RANK_CUTOFF: f64 = 1e-9;
/// Number of directions scanned for `beta` when `r >= 2`.
pub const BETA_DIRECTIONS: usize = 10_000;
/// Safety factor applied to the scanned `beta` when `r >= 2`.
pub const BETA_SHRINK: f64 = 0.99;
/// A one-step gain program with value above this signals arbitrage.
const ARBITRAGE_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum NaError {
    #[error("the market admits arbitrage at node {node}")]
    Arbitrage { node: u64 },
}

/// Child increments at one decision node and an orthonormal basis of their span.
#[derive(Clone, Debug, PartialEq)]
pub struct SupportGeometry<T> {
    pub node: NodeIdx,
    pub increments: Vec<Vec<T>>,
    pub probs: Vec<T>,
    pub basis: Vec<Vec<T>>,
}

impl<T: Scalar> SupportGeometry<T> {
    pub fn rank(&self) -> usize {
        self.basis.len()
    }

    pub fn is_trivial(&self) -> bool {
        self.basis.is_empty()
    }

    /// Coordinates of `x` in the basis of `D`.
    pub fn coords(&self, x: &[T]) -> Vec<T> {
        self.basis.iter().map(|b| dot(b, x)).collect()
    }

    /// Vector of `R^d` with coordinates `eta` in the basis of `D`.
    pub fn embed(&self, eta: &[T]) -> Vec<T> {
        let d = self.increments.first().map_or(0, Vec::len);
        let mut out = vec![T::zero(); d];
        for (b, &e) in self.basis.iter().zip(eta) {
            for (o, &bi) in out.iter_mut().zip(b) {
                *o = *o + e * bi;
            }
        }
        out
    }

    /// Largest increment norm.
    pub fn max_increment(&self) -> T {
        self.increments.iter().map(|v| norm(v)).fold(T::zero(), T::max)
    }

    /// `max_i(-xi . v_i)` for a direction given in basis coordinates.
    fn worst_loss(&self, coords: &[Vec<T>], eta: &[T]) -> T {
        coords.iter().map(|c| -dot(c, eta)).fold(T::neg_infinity(), T::max)
    }
}

/// Increments, probabilities and span basis at a decision node. Leaves yield
/// an empty geometry.
pub fn support_geometry<T: Scalar>(tree: &ScenarioTree<T>, node: NodeIdx) -> SupportGeometry<T> {
    let increments: Vec<Vec<T>> = tree.children(node).iter().map(|&c| tree.increment(c)).collect();
    let probs: Vec<T> = tree.children(node).iter().map(|&c| tree.node(c).prob).collect();
    let basis = span_basis(&increments, tree.assets());
    SupportGeometry { node, increments, probs, basis }
}

/// Pivoted modified Gram-Schmidt; columns whose residual falls below the
/// relative cutoff are treated as dependent.
fn span_basis<T: Scalar>(vectors: &[Vec<T>], dim: usize) -> Vec<Vec<T>> {
    let scale = vectors.iter().map(|v| norm(v)).fold(T::zero(), T::max);
    if scale == T::zero() {
        return Vec::new();
    }
    let cutoff = T::lit(RANK_CUTOFF) * scale;
    let mut residuals: Vec<Vec<T>> = vectors.to_vec();
    let mut basis: Vec<Vec<T>> = Vec::new();
    while basis.len() < dim {
        let (j, nj) = residuals
            .iter()
            .enumerate()
            .map(|(j, r)| (j, norm(r)))
            .fold((0, T::neg_infinity()), |acc, x| if x.1 > acc.1 { x } else { acc });
        if nj <= cutoff {
            break;
        }
        let q: Vec<T> = residuals[j].iter().map(|&x| x / nj).collect();
        for r in residuals.iter_mut() {
            // Two passes restore orthogonality lost to cancellation.
            for _ in 0..2 {
                let c = dot(r, &q);
                for (ri, &qi) in r.iter_mut().zip(&q) {
                    *ri = *ri - c * qi;
                }
            }
        }
        basis.push(q);
    }
    basis
}

/// Orthogonal projection of `xi` onto `D`.
pub fn project_to_d<T: Scalar>(geom: &SupportGeometry<T>, xi: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); xi.len()];
    for b in &geom.basis {
        let c = dot(b, xi);
        for (o, &bi) in out.iter_mut().zip(b) {
            *o = *o + c * bi;
        }
    }
    out
}

/// One-step arbitrage direction at a node, if any: a unit vector in `D` with
/// `xi . v_i >= 0` on every child and `> 0` on some child.
pub fn one_step_arbitrage<T: Scalar>(geom: &SupportGeometry<T>) -> Option<Vec<T>> {
    if geom.is_trivial() {
        return None;
    }
    let scale = geom.max_increment();
    let vs: Vec<Vec<T>> = geom.increments.iter().map(|v| v.iter().map(|&x| x / scale).collect()).collect();
    let d = vs[0].len();
    // Variables (xi+, xi-); gains g_i = v_i.(xi+ - xi-) constrained to [0, 1].
    let mut c = vec![T::zero(); 2 * d];
    for v in &vs {
        for k in 0..d {
            c[k] = c[k] + v[k];
            c[d + k] = c[d + k] - v[k];
        }
    }
    let mut a = Vec::with_capacity(2 * vs.len());
    let mut b = Vec::with_capacity(2 * vs.len());
    for v in &vs {
        a.push(v.iter().map(|&x| -x).chain(v.iter().copied()).collect());
        b.push(T::zero());
        a.push(v.iter().copied().chain(v.iter().map(|&x| -x)).collect());
        b.push(T::one());
    }
    match maximize(&c, &a, &b) {
        LpOutcome::Optimal { value, x } if value > T::lit(ARBITRAGE_TOL) => {
            let xi: Vec<T> = (0..d).map(|k| x[k] - x[d + k]).collect();
            let xi = project_to_d(geom, &xi);
            let n = norm(&xi);
            Some(xi.iter().map(|&v| v / n).collect())
        }
        _ => None,
    }
}

/// Quantitative constants at one decision node.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeConstants<T> {
    pub node: u64,
    pub r: usize,
    pub beta: Option<T>,
    pub kappa: Option<T>,
    pub pi: Option<T>,
}

/// No-arbitrage verdict, per-node constants and an arbitrage witness when
/// the verdict is negative.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NaReport<T> {
    pub nodes: Vec<NodeConstants<T>>,
    pub na: bool,
    pub witness: Option<Vec<NodePosition<T>>>,
}

impl<T: Scalar> NaReport<T> {
    /// Constants of decision node `i` (decision nodes form a prefix of the level order).
    pub fn at(&self, i: NodeIdx) -> &NodeConstants<T> {
        &self.nodes[i]
    }

    pub fn beta(&self, i: NodeIdx) -> Option<T> {
        self.nodes.get(i).and_then(|n| n.beta)
    }

    pub fn kappa(&self, i: NodeIdx) -> Option<T> {
        self.nodes.get(i).and_then(|n| n.kappa)
    }

    pub fn pi(&self, i: NodeIdx) -> Option<T> {
        self.nodes.get(i).and_then(|n| n.pi)
    }
}

/// Decides absence of arbitrage node by node. On failure the witness holds
/// the unit one-step arbitrage direction at the first offending node (in
/// level order) and zero elsewhere.
pub fn check_na<T: Scalar>(tree: &ScenarioTree<T>) -> NaReport<T> {
    let mut nodes = Vec::with_capacity(tree.decision_nodes().len());
    let mut witness = None;
    for n in tree.decision_nodes() {
        let geom = support_geometry(tree, n);
        if witness.is_none() {
            if let Some(dir) = one_step_arbitrage(&geom) {
                let mut s = Strategy::zeros(tree);
                s.set(n, dir);
                witness = Some(s.to_entries(tree));
            }
        }
        nodes.push(NodeConstants { node: tree.node(n).id, r: geom.rank(), beta: None, kappa: None, pi: None });
    }
    NaReport { nodes, na: witness.is_none(), witness }
}

/// `min` over unit `xi` in `D` of `max_i(-xi . v_i)`.
///
/// Exact for `r = 1`; for larger ranks a direction scan with local
/// refinement, shrunk by [`BETA_SHRINK`].
pub fn scan_beta<T: Scalar>(geom: &SupportGeometry<T>) -> Option<T> {
    let coords: Vec<Vec<T>> = geom.increments.iter().map(|v| geom.coords(v)).collect();
    match geom.rank() {
        0 => None,
        1 => {
            let up = coords.iter().map(|c| c[0]).fold(T::neg_infinity(), T::max);
            let down = coords.iter().map(|c| -c[0]).fold(T::neg_infinity(), T::max);
            Some(up.min(down))
        }
        2 => Some(beta_circle(geom, &coords) * T::lit(BETA_SHRINK)),
        r => Some(beta_sphere(geom, &coords, r) * T::lit(BETA_SHRINK)),
    }
}

fn beta_circle<T: Scalar>(geom: &SupportGeometry<T>, coords: &[Vec<T>]) -> T {
    let f = |theta: T| geom.worst_loss(coords, &[theta.cos(), theta.sin()]);
    let tau = T::TAU();
    let n = BETA_DIRECTIONS;
    let step = tau / T::lit(n as f64);
    let (mut best_i, mut best) = (0, T::infinity());
    for i in 0..n {
        let v = f(step * T::lit(i as f64));
        if v < best {
            best = v;
            best_i = i;
        }
    }
    // Golden-section refinement in the bracketing cell pair.
    let center = step * T::lit(best_i as f64);
    let (mut a, mut b) = (center - step, center + step);
    let g = T::lit(0.618_033_988_749_894_9);
    for _ in 0..60 {
        let x1 = b - g * (b - a);
        let x2 = a + g * (b - a);
        if f(x1) < f(x2) {
            b = x2;
        } else {
            a = x1;
        }
    }
    best.min(f((a + b) * T::lit(0.5)))
}

fn beta_sphere<T: Scalar>(geom: &SupportGeometry<T>, coords: &[Vec<T>], r: usize) -> T {
    let normalize = |v: Vec<T>| {
        let n = norm(&v);
        v.into_iter().map(|x| x / n).collect::<Vec<T>>()
    };
    let mut dirs: Vec<Vec<T>> = Vec::with_capacity(BETA_DIRECTIONS);
    if r == 3 {
        // Fibonacci lattice on the sphere.
        let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
        for i in 0..BETA_DIRECTIONS {
            let y = 1.0 - 2.0 * (i as f64 + 0.5) / BETA_DIRECTIONS as f64;
            let rad = (1.0 - y * y).sqrt();
            let th = golden * i as f64;
            dirs.push(vec![T::lit(rad * th.cos()), T::lit(y), T::lit(rad * th.sin())]);
        }
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(0x6e63_7062);
        for _ in 0..BETA_DIRECTIONS * r {
            let v: Vec<T> = (0..r).map(|_| T::lit(rng.gen_range(-1.0..1.0))).collect();
            if norm(&v) > T::lit(1e-3) {
                dirs.push(normalize(v));
            }
        }
    }
    let (mut best_dir, mut best) = (dirs[0].clone(), T::infinity());
    for d in &dirs {
        let v = geom.worst_loss(coords, d);
        if v < best {
            best = v;
            best_dir = d.clone();
        }
    }
    // Compass search on the sphere around the best scanned direction.
    let mut step = T::lit(0.05);
    while step > T::lit(1e-10) {
        let mut improved = false;
        for k in 0..r {
            for sgn in [T::one(), -T::one()] {
                let mut cand = best_dir.clone();
                cand[k] = cand[k] + sgn * step;
                let cand = normalize(cand);
                let v = geom.worst_loss(coords, &cand);
                if v < best {
                    best = v;
                    best_dir = cand;
                    improved = true;
                }
            }
        }
        if !improved {
            step = step * T::lit(0.5);
        }
    }
    best
}

/// Fills `beta` and `kappa` at every decision node with nontrivial `D`.
/// `kappa` is the smallest child probability, which bounds the mass of the
/// children realising the `beta` loss in any direction.
pub fn quantitative_na<T: Scalar>(tree: &ScenarioTree<T>) -> Result<NaReport<T>, NaError> {
    let mut report = check_na(tree);
    if !report.na {
        let node = report
            .witness
            .iter()
            .flatten()
            .find(|e| e.position.iter().any(|x| *x != T::zero()))
            .map_or(0, |e| e.node);
        return Err(NaError::Arbitrage { node });
    }
    for n in tree.decision_nodes() {
        let geom = support_geometry(tree, n);
        let entry = &mut report.nodes[n];
        if let Some(beta) = scan_beta(&geom) {
            entry.beta = Some(beta);
            entry.kappa = Some(geom.probs.iter().copied().fold(T::infinity(), T::min));
        }
    }
    Ok(report)
}

/// Fills `pi` at every node with nontrivial `D`:
/// `kappa(n)` times, for each later decision level, the smallest `kappa`
/// among the descendants of `n` on that level (`1` where `D` is trivial).
pub fn pi_bounds<T: Scalar>(tree: &ScenarioTree<T>, report: &NaReport<T>) -> NaReport<T> {
    let mut out = report.clone();
    let horizon = tree.horizon();
    for n in tree.decision_nodes() {
        let Some(kappa) = report.kappa(n) else { continue };
        let t = tree.node(n).time;
        let mut level_min = vec![T::one(); horizon];
        let mut frontier: Vec<NodeIdx> = tree.children(n).to_vec();
        for slot in level_min.iter_mut().take(horizon).skip(t + 1) {
            for &m in &frontier {
                *slot = slot.min(report.kappa(m).unwrap_or(T::one()));
            }
            frontier = frontier.iter().flat_map(|&m| tree.children(m).iter().copied()).collect();
        }
        let pi = level_min[t + 1..].iter().fold(kappa, |acc, &k| acc * k);
        out.nodes[n].pi = Some(pi);
    }
    out
}

/// `quantitative_na` followed by `pi_bounds`.
pub fn full_report<T: Scalar>(tree: &ScenarioTree<T>) -> Result<NaReport<T>, NaError> {
    Ok(pi_bounds(tree, &quantitative_na(tree)?))
}
