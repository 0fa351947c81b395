//! Backward induction for `sup_phi E u(X_T - B)` with a non-concave,
//! bounded-above utility.
//!
//! Each decision node carries its value function `U_t(x)` sampled on a
//! uniform wealth grid and interpolated linearly; leaves use `u(x - B)`
//! exactly. The one-step problem at a node is solved over the span `D` of the
//! child increments, inside the ball of radius `K([x])` beyond which no
//! position can beat holding cash. Optimal positions are extracted forward by
//! re-solving the one-step problem at the realised wealth.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::no_arbitrage::{full_report, support_geometry, NaError, NaReport, SupportGeometry};
use crate::preferences::{Preference, UtilityFunction};
use crate::scalar::{dot, norm, Scalar};
use crate::search::{maximize_in_ball, BallSearch, Candidate};
use crate::tree::{wealth_process, Claim, NodeIdx, ScenarioTree, Strategy, TreeError};

#[derive(Debug, Error)]
pub enum SolveError {
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error(transparent)]
    Arbitrage(#[from] NaError),
    #[error("utility `{0}` is not bounded above")]
    UnboundedAbove(String),
    #[error(
        "utility `{0}` does not tend to -infinity for large losses; an optimiser may fail to exist \
         (expected utility can increase strictly in the position size)"
    )]
    BoundedBelow(String),
    #[error("prospect-theory preferences are solved by the CPT optimiser, not by backward induction")]
    NotExpectedUtility,
    #[error("wealth grid below node {node} is too narrow to locate G_L for wealth level {n}; extend the grid")]
    GridTooNarrow { node: u64, n: i64 },
    #[error("wealth grids still fail to cover the optimal positions after {0} widenings")]
    CoverageNotReached(usize),
}

/// Numerical settings of the backward induction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    /// Points of every per-node wealth grid.
    pub grid_points: usize,
    /// Half-width of the root grid around the initial capital.
    pub root_halfwidth: f64,
    /// Initial position scale used to widen grids level by level.
    pub initial_reach: f64,
    /// Coarse search points per coordinate of `D`.
    pub coarse_points: usize,
    /// Coarse local maxima refined per one-step problem.
    pub starts: usize,
    /// Position tolerance of the local refinement.
    pub xi_tol: f64,
    /// Value tolerance of the solution certificate.
    pub tol_solve: f64,
    /// Factor applied to every strategy bound `K(n)`.
    pub k_scale: f64,
    /// Maximum number of grid widenings before giving up.
    pub max_widenings: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            grid_points: 2001,
            root_halfwidth: 1.0,
            initial_reach: 2.0,
            coarse_points: 41,
            starts: 3,
            xi_tol: 1e-8,
            tol_solve: 1e-6,
            k_scale: 1.0,
            max_widenings: 8,
        }
    }
}

impl SolverConfig {
    /// Coarse points per coordinate, thinned for high-dimensional `D`.
    fn coarse_for_rank(&self, r: usize) -> usize {
        match r {
            0..=2 => self.coarse_points,
            3 => self.coarse_points.min(15),
            _ => self.coarse_points.min(7),
        }
    }
}

/// Piecewise-linear function of wealth on a uniform grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridFunction<T> {
    pub lo: T,
    pub step: T,
    pub values: Vec<T>,
}

impl<T: Scalar> GridFunction<T> {
    pub fn hi(&self) -> T {
        self.lo + self.step * T::lit((self.values.len() - 1) as f64)
    }

    pub fn point(&self, i: usize) -> T {
        self.lo + self.step * T::lit(i as f64)
    }

    /// Linear interpolation; `None` outside the grid.
    pub fn interpolate(&self, x: T) -> Option<T> {
        let n = self.values.len();
        let s = (x - self.lo) / self.step;
        if s < T::zero() || s > T::lit((n - 1) as f64) {
            return None;
        }
        let i = s.floor().to_usize().unwrap_or(0).min(n - 2);
        let w = s - T::lit(i as f64);
        Some(self.values[i] + w * (self.values[i + 1] - self.values[i]))
    }
}

/// `U_t(x)` at one node.
#[derive(Clone, Debug, PartialEq)]
pub enum ValueFunction<T> {
    /// Leaf: `u(x - claim)` evaluated exactly.
    Terminal { claim: T },
    /// Decision node: grid samples. Below the grid the value is floored by
    /// `u(x - floor_claim)` (the utility of holding cash against the largest
    /// claim below the node); above it is held at the last sample.
    Grid { grid: GridFunction<T>, floor_claim: T },
}

impl<T: Scalar> ValueFunction<T> {
    pub fn eval(&self, u: &UtilityFunction<T>, x: T) -> T {
        match self {
            ValueFunction::Terminal { claim } => u.eval(x - *claim),
            ValueFunction::Grid { grid, floor_claim } => match grid.interpolate(x) {
                Some(v) => v,
                None if x < grid.lo => u.eval(x - *floor_claim).min(grid.values[0]),
                None => *grid.values.last().expect("non-empty grid"),
            },
        }
    }

    pub fn grid(&self) -> Option<&GridFunction<T>> {
        match self {
            ValueFunction::Grid { grid, .. } => Some(grid),
            ValueFunction::Terminal { .. } => None,
        }
    }

    /// Largest wealth `y` (up to bisection accuracy) with `value(y) <= level`.
    /// The flag is set when a grid does not reach `level` and `y` comes from
    /// the below-grid tail `u(x - floor_claim)` instead.
    fn threshold_below(&self, u: &UtilityFunction<T>, level: T) -> Option<(T, bool)> {
        match self {
            ValueFunction::Terminal { claim } => utility_threshold(u, level).map(|w| (w + *claim, false)),
            ValueFunction::Grid { grid, floor_claim } => {
                match grid.values.iter().rposition(|&v| v <= level) {
                    Some(i) => Some((grid.point(i), false)),
                    None => utility_threshold(u, level).map(|w| ((w + *floor_claim).min(grid.lo), true)),
                }
            }
        }
    }
}

/// Largest `w` (from below) with `u(w) <= level`; `None` if `u` never gets that low.
fn utility_threshold<T: Scalar>(u: &UtilityFunction<T>, level: T) -> Option<T> {
    let mut lo = -T::one();
    let mut tries = 0;
    while u.eval(lo) > level {
        lo = lo * T::lit(2.0);
        tries += 1;
        if tries > 1000 || !lo.is_finite() {
            return None;
        }
    }
    let mut hi = T::one();
    while u.eval(hi) <= level {
        hi = hi * T::lit(2.0);
        if !hi.is_finite() {
            return Some(hi);
        }
    }
    for _ in 0..200 {
        let mid = (lo + hi) * T::lit(0.5);
        if mid <= lo || mid >= hi {
            break;
        }
        if u.eval(mid) <= level {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Some(lo)
}

/// Checks the value-function invariants on the grid: non-decreasing to
/// `1e-9` and bounded by `c`.
pub fn check_value_function<T: Scalar>(grid: &GridFunction<T>, c: T) -> Vec<String> {
    let tol = T::lit(1e-9);
    let mut issues = Vec::new();
    for i in 1..grid.values.len() {
        if grid.values[i] + tol < grid.values[i - 1] {
            issues.push(format!("decreasing at {}", grid.point(i)));
        }
    }
    if let Some(v) = grid.values.iter().find(|&&v| v > c + tol) {
        issues.push(format!("value {v} exceeds bound {c}"));
    }
    issues
}

/// Solved state at one node.
#[derive(Clone, Debug)]
pub struct NodeSolution<T> {
    pub value: ValueFunction<T>,
    /// Optimal position at each grid point (decision nodes only).
    pub optimizers: Vec<Vec<T>>,
    /// Strategy bound `K(n)` for the integer wealth levels touched by the grid.
    pub bounds: BTreeMap<i64, T>,
    /// Grid points whose bound was read from a below-grid tail rather than
    /// located on the child grids.
    pub fallbacks: usize,
}

/// Immutable inputs shared by all one-step problems.
pub struct DpContext<'a, T> {
    pub tree: &'a ScenarioTree<T>,
    pub utility: &'a UtilityFunction<T>,
    pub claim: &'a Claim<T>,
    pub na: NaReport<T>,
    pub geometry: Vec<SupportGeometry<T>>,
    pub config: SolverConfig,
    upper: T,
    floor_claim: Vec<T>,
    subtree_leaves: Vec<Vec<(NodeIdx, T)>>,
}

impl<'a, T: Scalar> DpContext<'a, T> {
    /// Validates the hypotheses (absence of arbitrage, `u` bounded above and
    /// diverging at `-inf`) and precomputes per-node data.
    pub fn new(
        tree: &'a ScenarioTree<T>,
        utility: &'a UtilityFunction<T>,
        claim: &'a Claim<T>,
        config: SolverConfig,
    ) -> Result<Self, SolveError> {
        let upper = utility.upper_bound().ok_or_else(|| SolveError::UnboundedAbove(utility.name().into()))?;
        if !utility.limma() {
            return Err(SolveError::BoundedBelow(utility.name().into()));
        }
        let na = full_report(tree)?;
        let geometry = tree.decision_nodes().map(|n| support_geometry(tree, n)).collect();
        let subtree_leaves: Vec<_> = (0..tree.len()).map(|n| tree.subtree_leaves(n)).collect();
        let floor_claim = subtree_leaves
            .iter()
            .map(|ls| ls.iter().map(|&(l, _)| claim.at(l)).fold(T::neg_infinity(), T::max))
            .collect();
        Ok(Self { tree, utility, claim, na, geometry, config, upper, floor_claim, subtree_leaves })
    }

    /// Upper bound `C` of the utility.
    pub fn upper(&self) -> T {
        self.upper
    }

    /// `m(n) = E[u(n - B) | node]`, the value of holding `n` in cash.
    pub fn lower_envelope(&self, node: NodeIdx, n: i64) -> T {
        let x = T::lit(n as f64);
        self.subtree_leaves[node].iter().map(|&(l, p)| p * self.utility.eval(x - self.claim.at(l))).sum()
    }

    /// Strategy bound `K(n)`: with `L = 2 (C - m(n)) / kappa` and `G_L` the
    /// smallest wealth `g` such that the children's values satisfy
    /// `P(V(-g) <= -L) >= 1 - kappa / 2`, returns `(G_L + n + 1) / beta`
    /// (scaled by `k_scale`, floored at zero). Zero where `D` is trivial.
    /// Fails when a child grid does not reach `-L`.
    pub fn strategy_bound(&self, node: NodeIdx, children: &[&ValueFunction<T>], n: i64) -> Result<T, SolveError> {
        match self.strategy_bound_extended(node, children, n)? {
            (k, false) => Ok(k),
            (_, true) => Err(SolveError::GridTooNarrow { node: self.tree.node(node).id, n }),
        }
    }

    /// As [`DpContext::strategy_bound`], but thresholds beyond a child grid
    /// are read from its below-grid tail; the flag reports whether that happened.
    pub fn strategy_bound_extended(
        &self,
        node: NodeIdx,
        children: &[&ValueFunction<T>],
        n: i64,
    ) -> Result<(T, bool), SolveError> {
        let (Some(beta), Some(kappa)) = (self.na.beta(node), self.na.kappa(node)) else {
            return Ok((T::zero(), false));
        };
        let (k, extrapolated) = strategy_bound_from(self, node, children, n, beta, kappa)?;
        Ok((k * T::lit(self.config.k_scale), extrapolated))
    }

    /// One-step problem at wealth `x`: the best position in `D` within the
    /// bound and the attained conditional expectation.
    pub fn one_step(
        &self,
        node: NodeIdx,
        children: &[&ValueFunction<T>],
        x: T,
        bounds: &mut BTreeMap<i64, T>,
    ) -> (Candidate<T>, bool) {
        let geom = &self.geometry[node];
        let probs = &geom.probs;
        let objective_at = |gains: &dyn Fn(usize) -> T| -> T {
            children.iter().enumerate().map(|(c, v)| probs[c] * v.eval(self.utility, x + gains(c))).sum()
        };
        if geom.is_trivial() {
            let value = objective_at(&|_| T::zero());
            return (Candidate { point: vec![T::zero(); self.tree.assets()], value }, false);
        }
        let n = x.floor().to_i64().unwrap_or(i64::MIN / 2);
        let mut fallback = false;
        let mut bound_at = |k: i64| -> T {
            if let Some(&b) = bounds.get(&k) {
                return b;
            }
            match self.strategy_bound_extended(node, children, k) {
                Ok((b, extrapolated)) => {
                    fallback |= extrapolated;
                    bounds.insert(k, b);
                    b
                }
                Err(_) => {
                    fallback = true;
                    bounds.values().copied().fold(T::zero(), T::max)
                }
            }
        };
        let radius = bound_at(n);
        let refine_radius = radius + bound_at(n + 1);
        let coords: Vec<Vec<T>> = geom.increments.iter().map(|v| geom.coords(v)).collect();
        let search = BallSearch {
            radius,
            refine_radius: refine_radius.max(radius),
            coarse_points: self.config.coarse_for_rank(geom.rank()),
            tol: T::lit(self.config.xi_tol),
            tie: T::lit(1e-12),
            starts: self.config.starts,
            inner_radius: T::one() / geom.max_increment().max(T::lit(1e-12)),
        };
        let best = maximize_in_ball(geom.rank(), &search, |eta| objective_at(&|c| dot(&coords[c], eta)));
        (Candidate { point: geom.embed(&best.point), value: best.value }, fallback)
    }
}

fn strategy_bound_from<T: Scalar>(
    ctx: &DpContext<'_, T>,
    node: NodeIdx,
    children: &[&ValueFunction<T>],
    n: i64,
    beta: T,
    kappa: T,
) -> Result<(T, bool), SolveError> {
    let m = ctx.lower_envelope(node, n);
    let level = -(T::lit(2.0) * (ctx.upper - m) / kappa);
    let probs = &ctx.geometry[node].probs;
    let mut thresholds: Vec<(T, T, bool)> = Vec::with_capacity(children.len());
    for (c, v) in children.iter().enumerate() {
        // g_c: V_c(-g) <= -L for every g >= g_c.
        let (g, extrapolated) = v.threshold_below(ctx.utility, level).map_or((T::infinity(), false), |(y, e)| (-y, e));
        thresholds.push((g, probs[c], extrapolated));
    }
    thresholds.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("comparable thresholds"));
    let need = T::one() - kappa * T::lit(0.5) - T::lit(1e-12);
    let mut mass = T::zero();
    let mut extrapolated = false;
    for (g, p, e) in thresholds {
        mass = mass + p;
        extrapolated |= e;
        if mass >= need {
            if !g.is_finite() {
                break;
            }
            return Ok((((g + T::lit(n as f64) + T::one()) / beta).max(T::zero()), extrapolated));
        }
    }
    Err(SolveError::GridTooNarrow { node: ctx.tree.node(node).id, n })
}

/// `U_T(x) = u(x - B)` at every leaf.
pub fn terminal_value<T: Scalar>(
    tree: &ScenarioTree<T>,
    utility: &UtilityFunction<T>,
    claim: &Claim<T>,
) -> Result<Vec<ValueFunction<T>>, SolveError> {
    utility.upper_bound().ok_or_else(|| SolveError::UnboundedAbove(utility.name().into()))?;
    if !utility.limma() {
        return Err(SolveError::BoundedBelow(utility.name().into()));
    }
    Ok(tree.leaves().map(|l| ValueFunction::Terminal { claim: claim.at(l) }).collect())
}

/// Value function and optimisers at `node` on the grid `[lo, lo + (points-1) step]`.
pub fn one_step_value<T: Scalar>(
    ctx: &DpContext<'_, T>,
    node: NodeIdx,
    children: &[&ValueFunction<T>],
    lo: T,
    step: T,
    points: usize,
) -> NodeSolution<T> {
    let results: Vec<(Candidate<T>, BTreeMap<i64, T>, bool)> = (0..points)
        .into_par_iter()
        .map(|i| {
            let x = lo + step * T::lit(i as f64);
            let mut bounds = BTreeMap::new();
            let (best, fallback) = ctx.one_step(node, children, x, &mut bounds);
            (best, bounds, fallback)
        })
        .collect();
    let mut bounds = BTreeMap::new();
    let mut values = Vec::with_capacity(points);
    let mut optimizers = Vec::with_capacity(points);
    let mut fallbacks = 0;
    for (best, b, fallback) in results {
        values.push(best.value);
        optimizers.push(best.point);
        bounds.extend(b);
        fallbacks += usize::from(fallback);
    }
    NodeSolution {
        value: ValueFunction::Grid { grid: GridFunction { lo, step, values }, floor_claim: ctx.floor_claim[node] },
        optimizers,
        bounds,
        fallbacks,
    }
}

/// Result of [`solve`].
#[derive(Clone, Debug)]
pub struct DpSolution<T> {
    pub z: T,
    /// Indirect utility `U_0(z)`.
    pub value: T,
    pub strategy: Strategy<T>,
    pub nodes: Vec<NodeSolution<T>>,
    /// `E U_t(X_t)` along the extracted strategy for `t = 0..=T`, with
    /// `U_t` at decision nodes re-solved at the realised wealth.
    pub level_values: Vec<T>,
    pub diagnostics: Diagnostics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub grid_points: usize,
    /// Half-width of the wealth grids on each level (around the capital range).
    pub level_halfwidths: Vec<f64>,
    pub widenings: usize,
    /// Grid points whose strategy bound relied on a below-grid tail.
    pub bound_fallbacks: usize,
    /// `E u(X_T - B)` of the extracted strategy, computed on the tree.
    pub realized_value: f64,
    /// Whether `realized_value >= value - tol_solve`.
    pub certified: bool,
}

/// Backward sweep over all levels for grids of the given half-widths around
/// `[z_lo, z_hi]`.
fn backward<T: Scalar>(ctx: &DpContext<'_, T>, z_lo: T, z_hi: T, widths: &[T]) -> Vec<NodeSolution<T>> {
    let tree = ctx.tree;
    let mut sols: Vec<Option<NodeSolution<T>>> = vec![None; tree.len()];
    for (l, v) in tree.leaves().zip(terminal_value_unchecked(tree, ctx.claim)) {
        sols[l] = Some(NodeSolution { value: v, optimizers: Vec::new(), bounds: BTreeMap::new(), fallbacks: 0 });
    }
    let points = ctx.config.grid_points.max(2);
    for t in (0..tree.horizon()).rev() {
        let lo = z_lo - widths[t];
        let step = (z_hi + widths[t] - lo) / T::lit((points - 1) as f64);
        let level: Vec<NodeSolution<T>> = tree
            .level(t)
            .into_par_iter()
            .map(|n| {
                let children: Vec<&ValueFunction<T>> =
                    tree.children(n).iter().map(|&c| &sols[c].as_ref().expect("child solved").value).collect();
                one_step_value(ctx, n, &children, lo, step, points)
            })
            .collect();
        for (n, s) in tree.level(t).zip(level) {
            sols[n] = Some(s);
        }
    }
    sols.into_iter().map(|s| s.expect("all nodes solved")).collect()
}

fn terminal_value_unchecked<T: Scalar>(tree: &ScenarioTree<T>, claim: &Claim<T>) -> Vec<ValueFunction<T>> {
    tree.leaves().map(|l| ValueFunction::Terminal { claim: claim.at(l) }).collect()
}

/// Half-widths each level needs so that every position chosen on the
/// level above stays inside its grid, plus one increment of slack.
fn required_widths<T: Scalar>(ctx: &DpContext<'_, T>, sols: &[NodeSolution<T>], z_lo: T, z_hi: T, widths: &[T]) -> Vec<T> {
    let tree = ctx.tree;
    let horizon = tree.horizon();
    let mut need = widths.to_vec();
    need[0] = T::lit(ctx.config.root_halfwidth);
    // Band of wealth actually reachable from the root grid with the computed optimisers.
    let mut band = vec![(z_lo - need[0], z_hi + need[0]); tree.len()];
    for t in 0..horizon - 1 {
        let mut level_need = T::zero();
        for n in tree.level(t) {
            let (blo, bhi) = band[n];
            let Some(grid) = sols[n].value.grid() else { continue };
            for &c in tree.children(n) {
                let inc = tree.increment(c);
                let (mut clo, mut chi) = (T::infinity(), T::neg_infinity());
                for (i, xi) in sols[n].optimizers.iter().enumerate() {
                    let x = grid.point(i);
                    if x < blo - grid.step || x > bhi + grid.step {
                        continue;
                    }
                    let y = x + dot(xi, &inc);
                    clo = clo.min(y);
                    chi = chi.max(y);
                }
                if clo > chi {
                    clo = blo;
                    chi = bhi;
                }
                band[c] = (clo, chi);
                let slack = norm(&inc).max(T::one());
                level_need = level_need.max(z_lo - clo + slack).max(chi - z_hi + slack);
            }
        }
        need[t + 1] = level_need;
    }
    need
}

/// Solves the expected-utility problem from initial capital `z`.
pub fn solve<T: Scalar>(
    tree: &ScenarioTree<T>,
    preference: &Preference<T>,
    claim: &Claim<T>,
    z: T,
    config: &SolverConfig,
) -> Result<DpSolution<T>, SolveError> {
    let Preference::Eu(u) = preference else {
        return Err(SolveError::NotExpectedUtility);
    };
    let ctx = DpContext::new(tree, u, claim, config.clone())?;
    let grids = solve_grids(&ctx, z, z)?;
    extract(&ctx, grids, z)
}

/// Solved grids for initial capitals in `[z_lo, z_hi]`.
pub struct SolvedGrids<T> {
    pub nodes: Vec<NodeSolution<T>>,
    pub widths: Vec<T>,
    pub widenings: usize,
}

/// Backward induction with automatic grid widening until every optimiser
/// on the reachable band stays inside the grids below it and every bound
/// `K([x])` on that band is located.
pub fn solve_grids<T: Scalar>(ctx: &DpContext<'_, T>, z_lo: T, z_hi: T) -> Result<SolvedGrids<T>, SolveError> {
    let tree = ctx.tree;
    let horizon = tree.horizon();
    let mut widths = vec![T::lit(ctx.config.root_halfwidth); horizon];
    for t in 1..horizon {
        let s = tree
            .level(t)
            .map(|n| tree.increment(n))
            .map(|v| norm(&v))
            .fold(T::zero(), T::max)
            .max(T::lit(1e-3));
        widths[t] = widths[t - 1] + T::lit(ctx.config.initial_reach) * s;
    }
    for attempt in 0..=ctx.config.max_widenings {
        let sols = backward(ctx, z_lo, z_hi, &widths);
        let need = required_widths(ctx, &sols, z_lo, z_hi, &widths);
        let mut ok = true;
        for t in 1..horizon {
            if need[t] > widths[t] {
                widths[t] = need[t].max(widths[t] * T::lit(1.5));
                ok = false;
            }
        }
        if ok {
            return Ok(SolvedGrids { nodes: sols, widths, widenings: attempt });
        }
    }
    Err(SolveError::CoverageNotReached(ctx.config.max_widenings))
}

/// Forward pass: re-solves the one-step problem at the realised wealth of
/// every decision node.
fn extract<T: Scalar>(ctx: &DpContext<'_, T>, grids: SolvedGrids<T>, z: T) -> Result<DpSolution<T>, SolveError> {
    let tree = ctx.tree;
    let sols = grids.nodes;
    let mut strategy = Strategy::empty(tree);
    let mut wealth = vec![T::zero(); tree.len()];
    wealth[0] = z;
    let mut value = T::zero();
    let probs = tree.unconditional_probs();
    let mut level_values = vec![T::zero(); tree.horizon() + 1];
    for n in tree.decision_nodes() {
        let children: Vec<&ValueFunction<T>> = tree.children(n).iter().map(|&c| &sols[c].value).collect();
        let mut bounds = sols[n].bounds.clone();
        let (best, _) = ctx.one_step(n, &children, wealth[n], &mut bounds);
        if n == 0 {
            value = best.value;
        }
        level_values[tree.node(n).time] = level_values[tree.node(n).time] + probs[n] * best.value;
        for &c in tree.children(n) {
            wealth[c] = wealth[n] + dot(&best.point, &tree.increment(c));
        }
        strategy.set(n, best.point);
    }
    let realized = expected_utility(tree, ctx.utility, ctx.claim, &strategy, z)?;
    level_values[tree.horizon()] = realized;
    let diagnostics = Diagnostics {
        grid_points: ctx.config.grid_points,
        level_halfwidths: grids.widths.iter().map(|w| w.to_f64_lossy()).collect(),
        widenings: grids.widenings,
        bound_fallbacks: sols.iter().map(|s| s.fallbacks).sum(),
        realized_value: realized.to_f64_lossy(),
        certified: realized >= value - T::lit(ctx.config.tol_solve),
    };
    Ok(DpSolution { z, value, strategy, nodes: sols, level_values, diagnostics })
}

/// `E u(X_T - B)` for a given strategy, evaluated exactly on the tree.
pub fn expected_utility<T: Scalar>(
    tree: &ScenarioTree<T>,
    utility: &UtilityFunction<T>,
    claim: &Claim<T>,
    strategy: &Strategy<T>,
    z: T,
) -> Result<T, TreeError> {
    let x = wealth_process(tree, strategy, z)?;
    let probs = tree.unconditional_probs();
    Ok(tree.leaves().map(|l| probs[l] * utility.eval(x[l] - claim.at(l))).sum())
}

/// `(z, u_bar(z))` samples of the indirect utility with regularity diagnostics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndirectUtilityCurve<T> {
    pub points: Vec<(T, T)>,
    pub non_decreasing: bool,
    /// Largest absolute change between adjacent samples.
    pub max_jump: T,
}

/// Samples `u_bar` at `z_values` from one set of grids covering their range;
/// each value re-solves the root problem at the exact capital.
pub fn indirect_utility_curve<T: Scalar>(
    tree: &ScenarioTree<T>,
    preference: &Preference<T>,
    claim: &Claim<T>,
    z_values: &[T],
    config: &SolverConfig,
) -> Result<IndirectUtilityCurve<T>, SolveError> {
    let Preference::Eu(u) = preference else {
        return Err(SolveError::NotExpectedUtility);
    };
    let ctx = DpContext::new(tree, u, claim, config.clone())?;
    let z_lo = z_values.iter().copied().fold(T::infinity(), T::min);
    let z_hi = z_values.iter().copied().fold(T::neg_infinity(), T::max);
    if z_values.is_empty() {
        return Ok(IndirectUtilityCurve { points: Vec::new(), non_decreasing: true, max_jump: T::zero() });
    }
    let grids = solve_grids(&ctx, z_lo, z_hi)?;
    let children: Vec<&ValueFunction<T>> = tree.children(0).iter().map(|&c| &grids.nodes[c].value).collect();
    let points: Vec<(T, T)> = z_values
        .par_iter()
        .map(|&z| {
            let mut bounds = grids.nodes[0].bounds.clone();
            (z, ctx.one_step(0, &children, z, &mut bounds).0.value)
        })
        .collect();
    let mut sorted = points.clone();
    sorted.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite capitals"));
    let tol = T::lit(1e-9);
    let non_decreasing = sorted.windows(2).all(|w| w[1].1 + tol >= w[0].1);
    let max_jump = sorted.windows(2).map(|w| (w[1].1 - w[0].1).abs()).fold(T::zero(), T::max);
    Ok(IndirectUtilityCurve { points, non_decreasing, max_jump })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn coin(p_up: f64) -> ScenarioTree<f64> {
        ScenarioTree::one_period(vec![0.0], &[(p_up, vec![1.0]), (1.0 - p_up, vec![-1.0])]).unwrap()
    }

    fn cara() -> Preference<f64> {
        Preference::Eu(UtilityFunction::cara(1.0))
    }

    #[test]
    fn terminal_value_examples() {
        let tree = coin(0.5);
        let u = UtilityFunction::cara(1.0);
        let zero = terminal_value(&tree, &u, &Claim::zero(&tree)).unwrap();
        assert_eq!(zero[0].eval(&u, 0.0), 0.0);
        let one = terminal_value(&tree, &u, &Claim::constant(&tree, 1.0)).unwrap();
        assert_eq!(one[0].eval(&u, 1.0), 0.0);
        assert_abs_diff_eq!(zero[0].eval(&u, -(2f64.ln())), -1.0, epsilon = 1e-15);

        let bb = crate::preferences::make_builtin_utility::<f64>("bounded_below", &Default::default()).unwrap();
        assert!(matches!(terminal_value(&tree, &bb, &Claim::zero(&tree)), Err(SolveError::BoundedBelow(_))));
    }

    #[test]
    fn strategy_bound_examples() {
        let tree = coin(0.5);
        let u = UtilityFunction::cara(1.0);
        let claim = Claim::zero(&tree);
        let ctx = DpContext::new(&tree, &u, &claim, SolverConfig::default()).unwrap();
        let leaves = terminal_value(&tree, &u, &claim).unwrap();
        let children: Vec<&ValueFunction<f64>> = leaves.iter().collect();
        assert_eq!(ctx.lower_envelope(0, 0), 0.0);
        let k = ctx.strategy_bound(0, &children, 0).unwrap();
        assert_abs_diff_eq!(k, 5f64.ln() + 1.0, epsilon = 1e-9);
        assert_abs_diff_eq!(k, 2.609, epsilon = 1e-3);

        // Doubling kappa halves L and can only shrink K.
        let (doubled, _) = strategy_bound_from(&ctx, 0, &children, 0, 1.0, 1.0).unwrap();
        assert!(doubled <= k);
        assert_abs_diff_eq!(doubled, 3f64.ln() + 1.0, epsilon = 1e-9);

        let flat = ScenarioTree::one_period(vec![0.0], &[(1.0, vec![0.0])]).unwrap();
        let claim = Claim::zero(&flat);
        let ctx = DpContext::new(&flat, &u, &claim, SolverConfig::default()).unwrap();
        let leaves = terminal_value(&flat, &u, &claim).unwrap();
        assert_eq!(ctx.strategy_bound(0, &leaves.iter().collect::<Vec<_>>(), 0).unwrap(), 0.0);
    }

    #[test]
    fn narrow_grid_is_reported() {
        let tree = ScenarioTree::iid(2, vec![0.0], &[(0.5, vec![1.0]), (0.5, vec![-1.0])]).unwrap();
        let u = UtilityFunction::cara(1.0);
        let claim = Claim::zero(&tree);
        let ctx = DpContext::new(&tree, &u, &claim, SolverConfig::default()).unwrap();
        let narrow = ValueFunction::Grid { grid: GridFunction { lo: -1.0, step: 1.0, values: vec![-1.0, 0.0, 0.5] }, floor_claim: 0.0 };
        let children = [&narrow, &narrow];
        assert!(matches!(ctx.strategy_bound(0, &children, 0), Err(SolveError::GridTooNarrow { node: 0, n: 0 })));
        let (k, extrapolated) = ctx.strategy_bound_extended(0, &children, 0).unwrap();
        assert!(extrapolated);
        assert_abs_diff_eq!(k, 5f64.ln() + 1.0, epsilon = 1e-9);
    }

    #[test]
    fn one_step_examples() {
        let u = UtilityFunction::cara(1.0);
        for (p, xi, v) in [(0.5, 0.0, 0.0), (0.75, 3f64.ln() / 2.0, 1.0 - 2.0 * 0.1875f64.sqrt())] {
            let tree = coin(p);
            let claim = Claim::zero(&tree);
            let ctx = DpContext::new(&tree, &u, &claim, SolverConfig::default()).unwrap();
            let leaves = terminal_value(&tree, &u, &claim).unwrap();
            let (best, fallback) = ctx.one_step(0, &leaves.iter().collect::<Vec<_>>(), 0.0, &mut BTreeMap::new());
            assert!(!fallback);
            assert_abs_diff_eq!(best.point[0], xi, epsilon = 1e-7);
            assert_abs_diff_eq!(best.value, v, epsilon = 1e-12);
        }
        // Trivial D: expectation of the children at unchanged wealth.
        let flat = ScenarioTree::one_period(vec![0.0], &[(1.0, vec![0.0])]).unwrap();
        let claim = Claim::constant(&flat, 0.5);
        let ctx = DpContext::new(&flat, &u, &claim, SolverConfig::default()).unwrap();
        let leaves = terminal_value(&flat, &u, &claim).unwrap();
        let (best, _) = ctx.one_step(0, &leaves.iter().collect::<Vec<_>>(), 1.0, &mut BTreeMap::new());
        assert_eq!(best.point, vec![0.0]);
        assert_abs_diff_eq!(best.value, u.eval(0.5), epsilon = 1e-15);
    }

    #[test]
    fn solve_one_period() {
        let tree = coin(0.5);
        let sol = solve(&tree, &cara(), &Claim::zero(&tree), 0.0, &SolverConfig::default()).unwrap();
        assert_abs_diff_eq!(sol.value, 0.0, epsilon = 1e-12);
        assert_eq!(sol.strategy.get(0).unwrap(), &[0.0]);

        let tree = coin(0.75);
        let sol = solve(&tree, &cara(), &Claim::zero(&tree), 0.0, &SolverConfig::default()).unwrap();
        assert_abs_diff_eq!(sol.value, 0.133_974_596_215_561_4, epsilon = 1e-9);
        assert_abs_diff_eq!(sol.strategy.get(0).unwrap()[0], 0.549_306_144_334_054_8, epsilon = 1e-7);
        assert!(sol.diagnostics.certified);
    }

    #[test]
    fn refuses_arbitrage_and_bounded_below() {
        let up = ScenarioTree::one_period(vec![0.0], &[(0.5, vec![1.0]), (0.5, vec![2.0])]).unwrap();
        let err = solve(&up, &cara(), &Claim::zero(&up), 0.0, &SolverConfig::default()).unwrap_err();
        assert!(matches!(err, SolveError::Arbitrage(_)));

        let tree = coin(0.5);
        let bb = crate::preferences::make_builtin_utility::<f64>("bounded_below", &Default::default()).unwrap();
        let err = solve(&tree, &Preference::Eu(bb), &Claim::zero(&tree), 0.0, &SolverConfig::default()).unwrap_err();
        assert!(matches!(err, SolveError::BoundedBelow(_)));
        let lin = crate::preferences::make_builtin_utility::<f64>("linear", &Default::default()).unwrap();
        let err = solve(&tree, &Preference::Eu(lin), &Claim::zero(&tree), 0.0, &SolverConfig::default()).unwrap_err();
        assert!(matches!(err, SolveError::UnboundedAbove(_)));
    }

    #[test]
    fn grid_function_interpolation() {
        let g = GridFunction { lo: -1.0, step: 0.5, values: vec![0.0, 1.0, 3.0, 3.5, 4.0] };
        assert_eq!(g.hi(), 1.0);
        assert_eq!(g.interpolate(-0.75), Some(0.5));
        assert_eq!(g.interpolate(1.0), Some(4.0));
        assert_eq!(g.interpolate(1.1), None);
        let u = UtilityFunction::cara(1.0);
        let v = ValueFunction::Grid { grid: g, floor_claim: 0.0 };
        assert_eq!(v.eval(&u, 5.0), 4.0);
        assert_eq!(v.eval(&u, -3.0), u.eval(-3.0));
        assert!(check_value_function(v.grid().unwrap(), 4.0).is_empty());
        assert_eq!(check_value_function(v.grid().unwrap(), 3.0).len(), 1);
    }

    #[test]
    fn utility_threshold_bisection() {
        let u = UtilityFunction::cara(1.0);
        let w = utility_threshold(&u, -4.0).unwrap();
        assert_abs_diff_eq!(w, -(5f64.ln()), epsilon = 1e-12);
        assert!(u.eval(w) <= -4.0);
        let tanh = crate::preferences::make_builtin_utility::<f64>("tanh", &Default::default()).unwrap();
        assert!(utility_threshold(&tanh, -4.0).is_none());
    }
}
