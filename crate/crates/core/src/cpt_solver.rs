//! Prospect-theory objective `V = V+ - V-` on scenario trees and its global
//! maximisation inside a certified search region.
//!
//! Distortions make the objective depend on the whole terminal law, so there
//! is no dynamic programme: the search runs over the full strategy vector,
//! one block of coordinates in `D` per decision node.

use std::cmp::Ordering;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::law::DiscreteLaw;
use crate::no_arbitrage::{full_report, support_geometry, NaError, NaReport, SupportGeometry};
use crate::preferences::{CptPreference, DistortionFunction, UtilityFunction};
use crate::scalar::{norm, Scalar};
use crate::search::Candidate;
use crate::tree::{terminal_law, Claim, NodeIdx, ScenarioTree, Strategy, TreeError};

#[derive(Debug, Error)]
pub enum CptError {
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error(transparent)]
    Arbitrage(#[from] NaError),
    #[error("preference violates the prospect-theory hypotheses: {0}")]
    Hypothesis(String),
}

/// `V+`, `V-` and their difference.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChoquetValue<T> {
    pub v_plus: T,
    pub v_minus: T,
    pub v: T,
}

/// `sum_i (y_i - y_{i+1}) w(P(Y >= y_i))` for the law of `Y = f(X) >= 0`,
/// with the distinct values `y_1 > y_2 > ... > y_k` and `y_{k+1} = 0`.
fn choquet_nonneg<T: Scalar>(law: &DiscreteLaw<T>, f: impl Fn(T) -> T, w: &DistortionFunction<T>) -> T {
    let mut ys: Vec<(T, T)> = law.atoms().iter().map(|&(x, p)| (f(x), p)).filter(|&(y, _)| y > T::zero()).collect();
    ys.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal));
    let mut total = T::zero();
    let mut tail = T::zero();
    let mut i = 0;
    while i < ys.len() {
        let y = ys[i].0;
        while i < ys.len() && ys[i].0 == y {
            tail = tail + ys[i].1;
            i += 1;
        }
        let next = ys.get(i).map_or(T::zero(), |a| a.0);
        total = total + (y - next) * w.eval(tail.min(T::one()));
    }
    total
}

/// `V+ = int_0^inf w_plus(P(u_plus(X^+) >= y)) dy`, exact on finite laws.
pub fn choquet_plus<T: Scalar>(law: &DiscreteLaw<T>, u_plus: &UtilityFunction<T>, w_plus: &DistortionFunction<T>) -> T {
    choquet_nonneg(law, |x| u_plus.eval(x.max(T::zero())), w_plus)
}

/// `V- = int_0^inf w_minus(P(u_minus(X^-) >= y)) dy`, exact on finite laws.
pub fn choquet_minus<T: Scalar>(law: &DiscreteLaw<T>, u_minus: &UtilityFunction<T>, w_minus: &DistortionFunction<T>) -> T {
    choquet_nonneg(law, |x| u_minus.eval((-x).max(T::zero())), w_minus)
}

/// CPT value of a given law of `X_T - B`.
pub fn cpt_value_of_law<T: Scalar>(law: &DiscreteLaw<T>, pref: &CptPreference<T>) -> ChoquetValue<T> {
    let v_plus = choquet_plus(law, &pref.u_plus, &pref.w_plus);
    let v_minus = choquet_minus(law, &pref.u_minus, &pref.w_minus);
    ChoquetValue { v_plus, v_minus, v: v_plus - v_minus }
}

/// `V(theta, z)` for a strategy on the tree.
pub fn cpt_value<T: Scalar>(
    tree: &ScenarioTree<T>,
    pref: &CptPreference<T>,
    claim: &Claim<T>,
    strategy: &Strategy<T>,
    z: T,
) -> Result<ChoquetValue<T>, TreeError> {
    Ok(cpt_value_of_law(&terminal_law(tree, strategy, z, claim)?, pref))
}

/// Smallest `R >= 0` (to bisection accuracy, rounded up) with
/// `w_minus(mass) * u_minus(rate * R - offset) >= target`.
pub fn region_radius<T: Scalar>(
    u_minus: &UtilityFunction<T>,
    w_minus: &DistortionFunction<T>,
    mass: T,
    rate: T,
    offset: T,
    target: T,
) -> Option<T> {
    let weight = w_minus.eval(mass);
    if weight <= T::zero() || rate <= T::zero() {
        return None;
    }
    let level = target / weight;
    let g = |r: T| u_minus.eval((rate * r - offset).max(T::zero()));
    if g(T::zero()) >= level {
        return Some(T::zero());
    }
    let mut hi = (offset / rate).max(T::one());
    let mut tries = 0;
    while g(hi) < level {
        hi = hi * T::lit(2.0);
        tries += 1;
        if tries > 200 || !hi.is_finite() {
            return None;
        }
    }
    let mut lo = T::zero();
    for _ in 0..200 {
        let mid = (lo + hi) * T::lit(0.5);
        if mid <= lo || mid >= hi {
            break;
        }
        if g(mid) >= level {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Some(hi)
}

/// Per-node radius outside which a strategy scores below a reference value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchRegion<T> {
    /// Radius at each decision node (by level-order index); `0` where `D` is trivial.
    pub radius: Vec<T>,
    /// Reference value the region is certified against.
    pub reference: T,
}

impl<T: Scalar> SearchRegion<T> {
    /// Whether every node's position lies within its radius.
    pub fn contains(&self, strategy: &Strategy<T>) -> bool {
        self.radius.iter().enumerate().all(|(n, &r)| strategy.get(n).is_none_or(|xi| norm(xi) <= r))
    }
}

/// Certified search region. A strategy with positions in `D` whose position
/// first leaves the region at node `n` (all ancestors inside) loses at least
/// `beta(n) R(n)` at the next step, with conditional probability `kappa(n)`,
/// and gains nothing afterwards on a set of conditional probability
/// `pi(n) / kappa(n)`; before `n` it gained at most `sum R(a) max|dS_a|`.
/// So `V- >= w_minus(P(n) pi(n)) u_minus(beta R - offset)` while
/// `V+ <= C`, and solving `w_minus(P(n) pi(n)) u_minus(beta R - offset) = C - c + 1`
/// gives `V < c`.
pub fn search_region<T: Scalar>(
    tree: &ScenarioTree<T>,
    pref: &CptPreference<T>,
    claim: &Claim<T>,
    z: T,
    na: &NaReport<T>,
    c: T,
) -> Result<SearchRegion<T>, CptError> {
    let issues = pref.hypothesis_issues();
    if !issues.is_empty() {
        return Err(CptError::Hypothesis(issues.join("; ")));
    }
    let upper = pref.gain_bound().expect("checked by hypothesis_issues");
    let target = upper - c + T::one();
    let probs = tree.unconditional_probs();
    let max_claim = claim.max_abs(tree);
    let mut radius = vec![T::zero(); tree.decision_nodes().len()];
    // Gains accumulated along the path to each node while all positions stay inside.
    let mut gain_slack = vec![T::zero(); tree.len()];
    for n in tree.decision_nodes() {
        let geom = support_geometry(tree, n);
        if let (Some(beta), Some(pi)) = (na.beta(n), na.pi(n)) {
            let offset = z.abs() + max_claim + gain_slack[n];
            radius[n] = region_radius(&pref.u_minus, &pref.w_minus, probs[n] * pi, beta, offset, target)
                .ok_or_else(|| CptError::Hypothesis("loss utility does not reach the required level".into()))?;
        }
        let step = radius[n] * geom.max_increment();
        for &ch in tree.children(n) {
            gain_slack[ch] = gain_slack[n] + step;
        }
    }
    Ok(SearchRegion { radius, reference: c })
}

/// Settings of [`optimize_cpt`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CptConfig {
    /// Coarse points per coordinate.
    pub coarse_points: usize,
    /// Largest number of coarse evaluations; beyond it a seeded sample is used.
    pub coarse_budget: usize,
    /// Coarse candidates refined by pattern search.
    pub starts: usize,
    /// Final pattern-search step.
    pub step_tol: f64,
    /// Pattern-search evaluations per start before giving up.
    pub max_evals: usize,
    pub seed: u64,
}

impl Default for CptConfig {
    fn default() -> Self {
        Self { coarse_points: 21, coarse_budget: 200_000, starts: 8, step_tol: 1e-6, max_evals: 200_000, seed: 0 }
    }
}

/// Result of [`optimize_cpt`].
#[derive(Clone, Debug, PartialEq)]
pub struct CptSolution<T> {
    pub value: ChoquetValue<T>,
    pub strategy: Strategy<T>,
    pub region: SearchRegion<T>,
    /// Value of holding cash, `V(0, z)`.
    pub reference: ChoquetValue<T>,
    /// Whether every refined start reached the final step size.
    pub converged: bool,
}

/// Coordinates of the optimisation: one block per decision node with nontrivial `D`.
struct Layout<T> {
    blocks: Vec<(NodeIdx, usize, SupportGeometry<T>)>,
    dim: usize,
}

impl<T: Scalar> Layout<T> {
    fn new(tree: &ScenarioTree<T>) -> Self {
        let mut blocks = Vec::new();
        let mut dim = 0;
        for n in tree.decision_nodes() {
            let geom = support_geometry(tree, n);
            if !geom.is_trivial() {
                let r = geom.rank();
                blocks.push((n, dim, geom));
                dim += r;
            }
        }
        Self { blocks, dim }
    }

    fn strategy(&self, tree: &ScenarioTree<T>, eta: &[T]) -> Strategy<T> {
        let mut s = Strategy::zeros(tree);
        for (n, start, geom) in &self.blocks {
            s.set(*n, geom.embed(&eta[*start..*start + geom.rank()]));
        }
        s
    }

    fn inside(&self, region: &SearchRegion<T>, eta: &[T]) -> bool {
        self.blocks.iter().all(|(n, start, geom)| norm(&eta[*start..*start + geom.rank()]) <= region.radius[*n])
    }

    /// Per-coordinate bound: the radius of the owning node.
    fn coordinate_radius(&self, region: &SearchRegion<T>) -> Vec<T> {
        let mut out = vec![T::zero(); self.dim];
        for (n, start, geom) in &self.blocks {
            for o in &mut out[*start..*start + geom.rank()] {
                *o = region.radius[*n];
            }
        }
        out
    }
}

/// Global search for `sup V(theta, z)` over strategies with positions in
/// `D` inside the certified region: a coarse tensor grid (or a seeded sample
/// when the grid exceeds the budget) seeds a pattern search with step halving.
pub fn optimize_cpt<T: Scalar>(
    tree: &ScenarioTree<T>,
    pref: &CptPreference<T>,
    claim: &Claim<T>,
    z: T,
    config: &CptConfig,
) -> Result<CptSolution<T>, CptError> {
    let na = full_report(tree)?;
    let zero = Strategy::zeros(tree);
    let reference = cpt_value(tree, pref, claim, &zero, z)?;
    let region = search_region(tree, pref, claim, z, &na, reference.v)?;
    let layout = Layout::new(tree);
    let eval = |eta: &[T]| -> T {
        cpt_value(tree, pref, claim, &layout.strategy(tree, eta), z).map_or(T::neg_infinity(), |v| v.v)
    };
    let origin = Candidate { point: vec![T::zero(); layout.dim], value: reference.v };
    if layout.dim == 0 {
        return Ok(CptSolution { value: reference, strategy: zero, region, reference, converged: true });
    }

    let radii = layout.coordinate_radius(&region);
    let points = config.coarse_points.max(3) | 1;
    let half = (points / 2) as i64;
    let total = (points as f64).powi(layout.dim as i32);
    let coarse: Vec<Vec<T>> = if total <= config.coarse_budget as f64 {
        let mut out = Vec::with_capacity(total as usize);
        let mut idx = vec![-half; layout.dim];
        loop {
            out.push(idx.iter().zip(&radii).map(|(&i, &r)| r * T::lit(i as f64 / half as f64)).collect());
            let mut k = 0;
            while k < layout.dim {
                idx[k] += 1;
                if idx[k] <= half {
                    break;
                }
                idx[k] = -half;
                k += 1;
            }
            if k == layout.dim {
                break;
            }
        }
        out
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut out: Vec<Vec<T>> = (0..config.coarse_budget)
            .map(|_| radii.iter().map(|&r| r * T::lit(rng.gen_range(-1.0..=1.0))).collect())
            .collect();
        out.shuffle(&mut rng);
        out
    };
    let mut seeds: Vec<Candidate<T>> = coarse
        .into_par_iter()
        .filter(|p| layout.inside(&region, p))
        .map(|p| {
            let value = eval(&p);
            Candidate { point: p, value }
        })
        .collect();
    let tie = T::lit(1e-12);
    seeds.sort_by(|a, b| {
        if a.beats(b, tie) {
            Ordering::Less
        } else if b.beats(a, tie) {
            Ordering::Greater
        } else {
            Ordering::Equal
        }
    });
    seeds.truncate(config.starts.max(1));
    seeds.push(origin.clone());

    let initial_step = radii.iter().copied().fold(T::zero(), T::max) / T::lit(half as f64);
    let refined: Vec<(Candidate<T>, bool)> = seeds
        .into_par_iter()
        .map(|s| pattern_search(&eval, &layout, &region, s, initial_step, T::lit(config.step_tol), config.max_evals))
        .collect();
    let mut best = origin;
    let mut converged = true;
    for (c, ok) in refined {
        converged &= ok;
        if c.beats(&best, tie) {
            best = c;
        }
    }
    let strategy = layout.strategy(tree, &best.point);
    let value = cpt_value(tree, pref, claim, &strategy, z)?;
    Ok(CptSolution { value, strategy, region, reference, converged })
}

/// Compass search with step halving, kept inside the per-node balls.
fn pattern_search<T: Scalar>(
    f: &(impl Fn(&[T]) -> T + Sync),
    layout: &Layout<T>,
    region: &SearchRegion<T>,
    start: Candidate<T>,
    step: T,
    tol: T,
    max_evals: usize,
) -> (Candidate<T>, bool) {
    let mut cur = start;
    let mut step = step;
    let mut evals = 0;
    while step > tol {
        if evals >= max_evals {
            return (cur, false);
        }
        let mut moved = false;
        for k in 0..cur.point.len() {
            for sgn in [T::one(), -T::one()] {
                let mut p = cur.point.clone();
                p[k] = p[k] + sgn * step;
                if !layout.inside(region, &p) {
                    continue;
                }
                evals += 1;
                let v = f(&p);
                if v > cur.value {
                    cur = Candidate { point: p, value: v };
                    moved = true;
                }
            }
        }
        if !moved {
            step = step * T::lit(0.5);
        }
    }
    (cur, true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::preferences::make_builtin_utility;
    use approx::assert_abs_diff_eq;
    use std::collections::BTreeMap;

    fn linear() -> UtilityFunction<f64> {
        make_builtin_utility("linear", &BTreeMap::new()).unwrap()
    }

    fn two_atoms(a: (f64, f64), b: (f64, f64)) -> DiscreteLaw<f64> {
        DiscreteLaw::from_weighted([a, b])
    }

    #[test]
    fn choquet_examples() {
        let law = two_atoms((1.0, 0.5), (-1.0, 0.5));
        let capped = make_builtin_utility("capped_linear", &BTreeMap::from([("cap".to_string(), 1.0)])).unwrap();
        assert_abs_diff_eq!(choquet_plus(&law, &capped, &DistortionFunction::power(2.0)), 0.25, epsilon = 1e-15);
        let law = two_atoms((-1.0, 0.3), (0.0, 0.7));
        assert_abs_diff_eq!(choquet_minus(&law, &linear(), &DistortionFunction::power(2.0)), 0.09, epsilon = 1e-15);
        assert_eq!(choquet_plus(&law, &UtilityFunction::cara(1.0), &DistortionFunction::power(2.0)), 0.0);

        let law = DiscreteLaw::from_weighted([(2.0, 0.2), (0.5, 0.3), (-1.0, 0.5)]);
        let u = UtilityFunction::cara(1.0);
        let plain = 0.2 * u.eval(2.0) + 0.3 * u.eval(0.5);
        assert_abs_diff_eq!(choquet_plus(&law, &u, &DistortionFunction::identity()), plain, epsilon = 1e-15);
        assert_abs_diff_eq!(choquet_minus(&law, &linear(), &DistortionFunction::identity()), 0.5, epsilon = 1e-15);
    }

    #[test]
    fn cpt_value_drifted_coin() {
        let tree = ScenarioTree::one_period(vec![0.0], &[(0.75, vec![1.0]), (0.25, vec![-1.0])]).unwrap();
        let pref = CptPreference::new(
            UtilityFunction::cara(1.0),
            linear(),
            DistortionFunction::power(2.0),
            DistortionFunction::power(2.0),
        )
        .unwrap();
        let claim = Claim::zero(&tree);
        let v = cpt_value(&tree, &pref, &claim, &Strategy::constant(&tree, &[1.0]), 0.0).unwrap();
        assert_abs_diff_eq!(v.v_plus, (1.0 - (-1f64).exp()) * 0.5625, epsilon = 1e-12);
        assert_abs_diff_eq!(v.v_minus, 0.0625, epsilon = 1e-12);
        assert_abs_diff_eq!(v.v, 0.293_07, epsilon = 1e-5);
        let zero = cpt_value(&tree, &pref, &claim, &Strategy::zeros(&tree), 0.0).unwrap();
        assert_eq!(zero, ChoquetValue { v_plus: 0.0, v_minus: 0.0, v: 0.0 });
    }

    #[test]
    fn radius_examples() {
        let id = DistortionFunction::identity();
        let r = region_radius(&linear(), &id, 0.25, 1.0, 1.0, 2.0).unwrap();
        assert_abs_diff_eq!(r, 9.0, epsilon = 1e-9);
        let steep = make_builtin_utility("linear", &BTreeMap::from([("scale".to_string(), 2.0)])).unwrap();
        let r2 = region_radius(&steep, &id, 0.25, 1.0, 1.0, 2.0).unwrap();
        assert_abs_diff_eq!(r2 - 1.0, (r - 1.0) / 2.0, epsilon = 1e-9);
        let r3 = region_radius(&linear(), &id, 0.9, 1.0, 1.0, 2.0).unwrap();
        assert!(r3 < r);
        let capped = make_builtin_utility("capped_linear", &BTreeMap::new()).unwrap();
        assert!(region_radius(&capped, &id, 0.25, 1.0, 1.0, 2.0).is_none());
    }

    #[test]
    fn identity_reduction_and_symmetry() {
        let tree = ScenarioTree::one_period(vec![0.0], &[(0.75, vec![1.0]), (0.25, vec![-1.0])]).unwrap();
        let id = DistortionFunction::identity();
        let pref = CptPreference::new(UtilityFunction::cara(1.0), linear(), id.clone(), id.clone()).unwrap();
        let sol = optimize_cpt(&tree, &pref, &Claim::zero(&tree), 0.0, &CptConfig::default()).unwrap();
        // u = 1 - e^{-x} on gains, x on losses: maximise 0.75 (1 - e^{-t}) - 0.25 t.
        assert_abs_diff_eq!(sol.strategy.get(0).unwrap()[0], 3f64.ln(), epsilon = 1e-5);
        assert_abs_diff_eq!(sol.value.v, 0.75 * (1.0 - 1.0 / 3.0) - 0.25 * 3f64.ln(), epsilon = 1e-9);
        assert!(sol.converged && sol.value.v >= sol.reference.v);

        let coin = ScenarioTree::one_period(vec![0.0], &[(0.5, vec![1.0]), (0.5, vec![-1.0])]).unwrap();
        let pref = CptPreference::new(UtilityFunction::cara(1.0), linear(), id.clone(), DistortionFunction::power(0.7)).unwrap();
        let sol = optimize_cpt(&coin, &pref, &Claim::zero(&coin), 0.0, &CptConfig::default()).unwrap();
        assert_eq!(sol.strategy.get(0).unwrap(), &[0.0]);
    }
}
