//! Acceptance criteria. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ncp_core::cpt_solver::{choquet_minus, choquet_plus, cpt_value, optimize_cpt, search_region, CptConfig};
use ncp_core::dp_solver::{expected_utility, indirect_utility_curve, solve, SolverConfig};
use ncp_core::law::DiscreteLaw;
use ncp_core::no_arbitrage::{full_report, support_geometry};
use ncp_core::phenomena::{closedness_probe, nonexistence_sweep, rectangle_grid, weak_convergence_ladder, ProbeGrid};
use ncp_core::preferences::{make_builtin_utility, CptPreference, DistortionFunction, Preference, UtilityFunction};
use ncp_core::tree::{Claim, NodeIdx, ScenarioTree, Strategy, TreeBuilder};

type Tree = ScenarioTree<f64>;

fn utility(family: &str, params: &[(&str, f64)]) -> UtilityFunction<f64> {
    let params: BTreeMap<String, f64> = params.iter().map(|&(k, v)| (k.to_string(), v)).collect();
    make_builtin_utility(family, &params).unwrap()
}

fn iid(horizon: usize, branches: &[(f64, f64)]) -> Tree {
    let b: Vec<(f64, Vec<f64>)> = branches.iter().map(|&(p, v)| (p, vec![v])).collect();
    ScenarioTree::iid(horizon, vec![0.0], &b).unwrap()
}

/// Random one-asset tree without arbitrage: every node has an up and a down move.
fn random_tree(rng: &mut ChaCha8Rng, horizon: usize) -> Tree {
    let mut b = TreeBuilder::new(horizon, vec![0.0]);
    let mut frontier = vec![b.root()];
    for _ in 0..horizon {
        let mut next = Vec::new();
        for &parent in &frontier {
            let k = rng.gen_range(2..=3);
            let raw: Vec<f64> = (0..k).map(|_| rng.gen_range(0.2..1.0)).collect();
            let total: f64 = raw.iter().sum();
            for (i, r) in raw.iter().enumerate() {
                let inc = match i {
                    0 => rng.gen_range(0.2..2.0),
                    1 => -rng.gen_range(0.2..2.0),
                    _ => rng.gen_range(-2.0..2.0),
                };
                next.push(b.child(parent, r / total, &[inc]));
            }
        }
        frontier = next;
    }
    b.build().unwrap()
}

fn random_claim(rng: &mut ChaCha8Rng, tree: &Tree) -> Claim<f64> {
    let mut claim = Claim::zero(tree);
    for l in tree.leaves() {
        claim.set(l, rng.gen_range(-0.5..0.5));
    }
    claim
}

/// Exhaustive maximisation over the grid of step `h` at every decision node.
/// Each node starts on `[-r, r]` and doubles its own range while the argmax
/// sits on the boundary. Blocks of grid points are pruned with an upper bound
/// that evaluates the children at the block's wealth maximum, which is exact
/// because values are non-decreasing in wealth.
fn grid_oracle(tree: &Tree, u: &UtilityFunction<f64>, claim: &Claim<f64>, z: f64, r: f64, h: f64) -> f64 {
    const BLOCK: i64 = 32;
    fn best(tree: &Tree, u: &UtilityFunction<f64>, claim: &Claim<f64>, node: NodeIdx, x: f64, r: f64, h: f64) -> f64 {
        if tree.is_leaf(node) {
            return u.eval(x - claim.at(node));
        }
        let value = |lo: i64, hi: i64| -> f64 {
            tree.children(node)
                .iter()
                .map(|&c| {
                    let d = tree.increment(c)[0];
                    let w = (lo as f64 * h * d).max(hi as f64 * h * d);
                    tree.node(c).prob * best(tree, u, claim, c, x + w, r, h)
                })
                .sum()
        };
        let mut steps = (r / h).round() as i64;
        loop {
            let mut blocks: Vec<(f64, i64, i64)> = Vec::new();
            let mut lo = -steps;
            while lo <= steps {
                let hi = (lo + BLOCK - 1).min(steps);
                blocks.push((value(lo, hi), lo, hi));
                lo = hi + 1;
            }
            blocks.sort_by(|a, b| b.0.total_cmp(&a.0));
            let mut top = f64::NEG_INFINITY;
            let mut arg = 0;
            for &(bound, lo, hi) in &blocks {
                if bound <= top {
                    break;
                }
                for i in lo..=hi {
                    let v = value(i, i);
                    if v > top {
                        top = v;
                        arg = i;
                    }
                }
            }
            if arg.abs() < steps || steps as f64 * h >= 1024.0 {
                return top;
            }
            steps *= 2;
        }
    }
    best(tree, u, claim, 0, z, r, h)
}

struct Outcome {
    pass: bool,
    detail: String,
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    let mut failures = 0;
    let mut dp_secs = 0.0;
    for i in 0..50 {
        let horizon = rng.gen_range(1..=2);
        let tree = random_tree(&mut rng, horizon);
        let claim = random_claim(&mut rng, &tree);
        let z = rng.gen_range(-0.5..0.5);
        let u = if i % 2 == 0 { utility("cara_capped", &[("lambda", rng.gen_range(0.5..2.0))]) } else { utility("log_loss", &[]) };
        let t0 = Instant::now();
        let dp = solve(&tree, &Preference::Eu(u.clone()), &claim, z, &SolverConfig::default());
        dp_secs += t0.elapsed().as_secs_f64();
        let Ok(dp) = dp else {
            failures += 1;
            continue;
        };
        let oracle = grid_oracle(&tree, &u, &claim, z, 64.0, 0.01);
        let diff = (dp.value - oracle).abs();
        worst = worst.max(diff);
        if diff > 1e-3 {
            eprintln!("tree {i}: dp {} oracle {oracle}", dp.value);
            failures += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Outcome {
        pass: failures == 0 && worst <= 1e-3 && secs < 60.0,
        detail: format!(
            "50 random trees, max |dp - grid oracle| = {worst:.2e} (tol 1e-3), failures {failures}, {secs:.1} s total of which dp {dp_secs:.1} s (limit 60 s)"
        ),
    }
}

fn criterion_2() -> Outcome {
    let tree = iid(1, &[(0.75, 1.0), (0.25, -1.0)]);
    let sol = solve(&tree, &Preference::Eu(UtilityFunction::cara(1.0)), &Claim::zero(&tree), 0.0, &SolverConfig::default()).unwrap();
    let phi = sol.strategy.get(0).unwrap()[0];
    let dphi = (phi - 3f64.ln() / 2.0).abs();
    let dv = (sol.value - (1.0 - 2.0 * 0.1875f64.sqrt())).abs();
    Outcome {
        pass: dphi <= 1e-4 && dv <= 1e-6,
        detail: format!("phi* = {phi:.8} (|err| {dphi:.1e} <= 1e-4), value = {:.10} (|err| {dv:.1e} <= 1e-6)", sol.value),
    }
}

struct Fixture {
    name: &'static str,
    tree: Tree,
    pref: Preference<f64>,
    claim: Claim<f64>,
}

fn fixtures() -> Vec<Fixture> {
    let coin = iid(1, &[(0.5, 1.0), (0.5, -1.0)]);
    let drifted = iid(1, &[(0.75, 1.0), (0.25, -1.0)]);
    let drifted2 = iid(2, &[(0.75, 1.0), (0.25, -1.0)]);
    let trinomial = iid(2, &[(0.3, 1.5), (0.4, 0.2), (0.3, -1.0)]);
    let mut claimed = Claim::zero(&drifted2);
    for (i, l) in drifted2.leaves().enumerate() {
        claimed.set(l, 0.25 * i as f64 - 0.3);
    }
    let two_asset =
        ScenarioTree::one_period(vec![0.0, 0.0], &[(0.4, vec![1.0, 0.5]), (0.3, vec![-1.0, 0.5]), (0.3, vec![0.2, -1.0])]).unwrap();
    let eu = |u: UtilityFunction<f64>| Preference::Eu(u);
    vec![
        Fixture { name: "coin/cara", claim: Claim::zero(&coin), tree: coin, pref: eu(UtilityFunction::cara(1.0)) },
        Fixture { name: "drifted/cara", claim: Claim::zero(&drifted), tree: drifted, pref: eu(UtilityFunction::cara(1.0)) },
        Fixture {
            name: "drifted T=2/cara",
            claim: Claim::zero(&drifted2),
            tree: drifted2.clone(),
            pref: eu(UtilityFunction::cara(1.0)),
        },
        Fixture {
            name: "trinomial T=2/s_shaped",
            claim: Claim::zero(&trinomial),
            tree: trinomial,
            pref: eu(utility("s_shaped_capped", &[])),
        },
        Fixture { name: "drifted T=2/log_loss+claim", claim: claimed, tree: drifted2, pref: eu(utility("log_loss", &[])) },
        Fixture { name: "two assets/cara", claim: Claim::zero(&two_asset), tree: two_asset, pref: eu(UtilityFunction::cara(1.0)) },
    ]
}

fn criterion_3() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut errors = Vec::new();
    for f in fixtures() {
        let base = solve(&f.tree, &f.pref, &f.claim, 0.0, &SolverConfig::default());
        let wide = solve(&f.tree, &f.pref, &f.claim, 0.0, &SolverConfig { k_scale: 2.0, ..SolverConfig::default() });
        match (base, wide) {
            (Ok(a), Ok(b)) => worst = worst.max((a.value - b.value).abs()),
            _ => errors.push(f.name),
        }
    }
    Outcome {
        pass: errors.is_empty() && worst <= 1e-6,
        detail: format!("{} fixtures, max |u(z; K) - u(z; 2K)| = {worst:.2e} (tol 1e-6), solver errors {errors:?}", fixtures().len()),
    }
}

fn criterion_4() -> Outcome {
    let zs: Vec<f64> = (0..21).map(|i| -1.0 + 0.1 * i as f64).collect();
    let mut worst: f64 = 0.0;
    let mut monotone = true;
    let mut errors = Vec::new();
    for f in fixtures() {
        let coarse = indirect_utility_curve(&f.tree, &f.pref, &f.claim, &zs, &SolverConfig::default());
        let fine = indirect_utility_curve(&f.tree, &f.pref, &f.claim, &zs, &SolverConfig { grid_points: 4001, ..SolverConfig::default() });
        match (coarse, fine) {
            (Ok(a), Ok(b)) => {
                monotone &= a.non_decreasing && b.non_decreasing;
                for (p, q) in a.points.iter().zip(&b.points) {
                    worst = worst.max((p.1 - q.1).abs());
                }
            }
            _ => errors.push(f.name),
        }
    }
    Outcome {
        pass: errors.is_empty() && monotone && worst <= 1e-4,
        detail: format!("21-point z-range per fixture: non-decreasing {monotone}, max refinement change {worst:.2e} (tol 1e-4), errors {errors:?}"),
    }
}

/// Probability, conditional on `node`, of the paths that lose at least
/// `beta |theta(node)|` on the first step and never gain afterwards.
fn pi_event_prob(tree: &Tree, theta: &Strategy<f64>, node: NodeIdx, beta: f64) -> f64 {
    let xi = theta.get(node).unwrap();
    let size = xi.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut total = 0.0;
    for &c in tree.children(node) {
        let gain: f64 = xi.iter().zip(tree.increment(c)).map(|(a, b)| a * b).sum();
        if gain <= -beta * size + 1e-12 {
            total += tree.node(c).prob * never_gain(tree, theta, c);
        }
    }
    total
}

fn never_gain(tree: &Tree, theta: &Strategy<f64>, node: NodeIdx) -> f64 {
    if tree.is_leaf(node) {
        return 1.0;
    }
    let xi = theta.get(node).unwrap();
    tree.children(node)
        .iter()
        .filter(|&&c| xi.iter().zip(tree.increment(c)).map(|(a, b)| a * b).sum::<f64>() <= 1e-12)
        .map(|&c| tree.node(c).prob * never_gain(tree, theta, c))
        .sum()
}

fn criterion_5() -> Outcome {
    let coin = iid(2, &[(0.5, 1.0), (0.5, -1.0)]);
    let report = full_report(&coin).unwrap();
    let constants_ok = (report.beta(0).unwrap() - 1.0).abs() < 1e-12
        && (report.kappa(0).unwrap() - 0.5).abs() < 1e-12
        && (report.pi(0).unwrap() - 0.25).abs() < 1e-12;

    // beta/kappa on 1000 random unit directions per node, including 2-D and 3-D supports.
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let trees = vec![
        coin.clone(),
        iid(2, &[(0.3, 1.5), (0.4, 0.2), (0.3, -1.0)]),
        ScenarioTree::one_period(vec![0.0, 0.0], &[(0.4, vec![1.0, 0.5]), (0.3, vec![-1.0, 0.5]), (0.3, vec![0.2, -1.0])]).unwrap(),
        ScenarioTree::one_period(
            vec![0.0; 3],
            &[
                (0.2, vec![1.0, 0.0, 0.0]),
                (0.2, vec![0.0, 1.0, 0.0]),
                (0.2, vec![0.0, 0.0, 1.0]),
                (0.4, vec![-1.0, -1.0, -1.0]),
            ],
        )
        .unwrap(),
        random_tree(&mut rng, 2),
    ];
    let mut direction_failures = 0;
    for tree in &trees {
        let report = full_report(tree).unwrap();
        for n in tree.decision_nodes() {
            let (Some(beta), Some(kappa)) = (report.beta(n), report.kappa(n)) else { continue };
            let geom = support_geometry(tree, n);
            for _ in 0..1000 {
                let eta: Vec<f64> = (0..geom.rank()).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let len = eta.iter().map(|x| x * x).sum::<f64>().sqrt();
                if len < 1e-9 {
                    continue;
                }
                let xi = geom.embed(&eta.iter().map(|x| x / len).collect::<Vec<_>>());
                let mass: f64 = tree
                    .children(n)
                    .iter()
                    .filter(|&&c| xi.iter().zip(tree.increment(c)).map(|(a, b)| a * b).sum::<f64>() <= -beta + 1e-12)
                    .map(|&c| tree.node(c).prob)
                    .sum();
                if mass < kappa - 1e-12 {
                    direction_failures += 1;
                }
            }
        }
    }

    // pi on every strategy of a small grid on binary and trinomial two-period trees.
    let grid = [-1.0, -0.5, 0.0, 0.5, 1.0];
    let mut pi_failures = 0;
    let mut checked = 0;
    for tree in [coin, iid(2, &[(0.3, 1.5), (0.4, 0.2), (0.3, -1.0)])] {
        let report = full_report(&tree).unwrap();
        let nodes: Vec<NodeIdx> = tree.decision_nodes().collect();
        let combos = grid.len().pow(nodes.len() as u32);
        for mut code in 0..combos {
            let mut theta = Strategy::zeros(&tree);
            for &n in &nodes {
                theta.set(n, vec![grid[code % grid.len()]]);
                code /= grid.len();
            }
            for &n in &nodes {
                if theta.get(n).unwrap()[0] == 0.0 {
                    continue;
                }
                checked += 1;
                let (beta, pi) = (report.beta(n).unwrap(), report.pi(n).unwrap());
                if pi_event_prob(&tree, &theta, n, beta) < pi - 1e-12 {
                    pi_failures += 1;
                }
            }
        }
    }
    Outcome {
        pass: constants_ok && direction_failures == 0 && pi_failures == 0,
        detail: format!(
            "coin T=2: beta = {}, kappa = {}, pi_0 = {}; direction failures {direction_failures}; pi failures {pi_failures} of {checked} grid strategies",
            report.beta(0).unwrap(),
            report.kappa(0).unwrap(),
            report.pi(0).unwrap()
        ),
    }
}

fn riemann(law: &DiscreteLaw<f64>, f: impl Fn(f64) -> f64, w: &DistortionFunction<f64>, top: f64, panels: usize) -> f64 {
    let h = top / panels as f64;
    (0..panels)
        .map(|i| {
            let y = (i as f64 + 0.5) * h;
            let tail: f64 = law.atoms().iter().filter(|a| f(a.0) >= y).map(|a| a.1).sum();
            w.eval(tail.min(1.0))
        })
        .sum::<f64>()
        * h
}

fn criterion_6() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let id = DistortionFunction::identity();
    let mut worst_reduction: f64 = 0.0;
    for _ in 0..100 {
        let horizon = rng.gen_range(1..=2);
        let tree = random_tree(&mut rng, horizon);
        let claim = random_claim(&mut rng, &tree);
        let mut theta = Strategy::zeros(&tree);
        for n in tree.decision_nodes() {
            theta.set(n, vec![rng.gen_range(-3.0..3.0)]);
        }
        let z = rng.gen_range(-1.0..1.0);
        let pref = CptPreference::new(
            utility("cara_capped", &[("lambda", rng.gen_range(0.5..2.0))]),
            utility("power", &[("scale", rng.gen_range(0.5..2.0)), ("exponent", rng.gen_range(0.5..1.0))]),
            id.clone(),
            id.clone(),
        )
        .unwrap();
        let v = cpt_value(&tree, &pref, &claim, &theta, z).unwrap().v;
        let eu = expected_utility(&tree, &pref.composite_utility(), &claim, &theta, z).unwrap();
        worst_reduction = worst_reduction.max((v - eu).abs());
    }

    let mut worst_riemann: f64 = 0.0;
    let u_plus = UtilityFunction::cara(1.0);
    let u_minus = utility("linear", &[]);
    for i in 0..10 {
        let raw: Vec<(f64, f64)> = (0..10).map(|_| (rng.gen_range(-1.0..1.0), rng.gen_range(0.05..1.0))).collect();
        let total: f64 = raw.iter().map(|a| a.1).sum();
        let law = DiscreteLaw::from_weighted(raw.iter().map(|&(x, p)| (x, p / total)));
        let w = if i % 2 == 0 {
            DistortionFunction::power(rng.gen_range(0.5..2.0))
        } else {
            ncp_core::preferences::make_builtin_distortion("kt_inverse_s", &BTreeMap::from([("gamma".to_string(), 0.61)])).unwrap()
        };
        let exact_plus = choquet_plus(&law, &u_plus, &w);
        let exact_minus = choquet_minus(&law, &u_minus, &w);
        let num_plus = riemann(&law, |x| u_plus.eval(x.max(0.0)), &w, 1.0, 1_000_000);
        let num_minus = riemann(&law, |x| u_minus.eval((-x).max(0.0)), &w, 1.0, 1_000_000);
        worst_riemann = worst_riemann.max((exact_plus - num_plus).abs()).max((exact_minus - num_minus).abs());
    }
    Outcome {
        pass: worst_reduction <= 1e-9 && worst_riemann <= 1e-6,
        detail: format!(
            "identity-distortion CPT vs EU on 100 instances: max diff {worst_reduction:.2e} (tol 1e-9); Choquet vs 1e6-panel Riemann sum: max diff {worst_riemann:.2e} (tol 1e-6)"
        ),
    }
}

fn criterion_7() -> Outcome {
    let tree = iid(2, &[(0.6, 1.0), (0.4, -1.0)]);
    let claim = Claim::zero(&tree);
    let pref = CptPreference::new(
        UtilityFunction::cara(1.0),
        utility("linear", &[]),
        DistortionFunction::power(0.8),
        ncp_core::preferences::make_builtin_distortion("kt_inverse_s", &BTreeMap::from([("gamma".to_string(), 0.69)])).unwrap(),
    )
    .unwrap();
    let z = 0.3;
    let reference = cpt_value(&tree, &pref, &claim, &Strategy::zeros(&tree), z).unwrap().v;
    let region = search_region(&tree, &pref, &claim, z, &full_report(&tree).unwrap(), reference).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let nodes: Vec<NodeIdx> = tree.decision_nodes().collect();
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..100 {
        let mut theta = Strategy::zeros(&tree);
        for &n in &nodes {
            theta.set(n, vec![rng.gen_range(-2.0..2.0) * region.radius[n]]);
        }
        let n = nodes[rng.gen_range(0..nodes.len())];
        let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        theta.set(n, vec![sign * region.radius[n] * rng.gen_range(1.0001..3.0)]);
        let v = cpt_value(&tree, &pref, &claim, &theta, z).unwrap().v;
        worst = worst.max(v);
    }
    let best = optimize_cpt(&tree, &pref, &claim, z, &CptConfig::default()).unwrap();
    Outcome {
        pass: worst < reference && region.contains(&best.strategy),
        detail: format!(
            "radii {:?}; best V among 100 region-violating strategies {worst:.4} < V(0, z) = {reference:.4}; optimiser V = {:.4} inside region",
            region.radius, best.value.v
        ),
    }
}

fn criterion_8() -> Outcome {
    let u = utility("bounded_below", &[("a", 0.5)]);
    let phi: Vec<f64> = (0..=200).map(|i| 0.1 * i as f64).collect();
    let sweep = nonexistence_sweep(0.5, &u, &phi).unwrap();
    let limit_ok = (sweep.limit - 0.25).abs() < 1e-12;
    Outcome {
        pass: sweep.increasing && sweep.gap_shrinking && limit_ok,
        detail: format!(
            "phi in [0, 20] step 0.1: strictly increasing {}, gap to 1/2(1 - a) = {} shrinking {}, final gap {:.3e}",
            sweep.increasing,
            sweep.limit,
            sweep.gap_shrinking,
            sweep.gaps.last().unwrap()
        ),
    }
}

fn criterion_9() -> Outcome {
    let start = Instant::now();
    let ns: Vec<usize> = (1..=64).collect();
    let entries = weak_convergence_ladder(&ns, &rectangle_grid::<f64>(200)).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let violations = entries.iter().filter(|e| e.distance > e.bound + 1e-12).count();
    Outcome {
        pass: violations == 0 && secs < 5.0,
        detail: format!("n = 1..64 on a 201x201 rectangle grid: {violations} bound violations, {secs:.2} s (limit 5 s)"),
    }
}

fn criterion_10() -> Outcome {
    let report = closedness_probe::<f64>(4, &[1, 2, 4, 8, 16, 32, 64], &ProbeGrid::default()).unwrap();
    let constant_residual = report
        .residuals
        .iter()
        .filter(|r| r.strategy == "const_1.5")
        .map(|r| r.residual.abs())
        .fold(0.0, f64::max);
    Outcome {
        pass: constant_residual < 1e-12 && report.constant_distance > 0.1 && report.bands_disjoint,
        detail: format!(
            "K = 4: max residual of g = 3/2 is {constant_residual:.1e}, its band distance to nu is {:.3} (> 0.1), bands disjoint {}",
            report.constant_distance, report.bands_disjoint
        ),
    }
}

fn main() {
    let only: Option<usize> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|s| s.parse().ok());
    type Check = (&'static str, fn() -> Outcome);
    let criteria: [Check; 10] = [
        ("dp oracle equivalence", criterion_1),
        ("closed-form drifted coin", criterion_2),
        ("strategy-bound doubling", criterion_3),
        ("indirect utility regularity", criterion_4),
        ("quantitative no-arbitrage", criterion_5),
        ("choquet exactness and reduction", criterion_6),
        ("cpt search-region validity", criterion_7),
        ("non-existence sweep", criterion_8),
        ("weak-convergence ladder", criterion_9),
        ("closedness probe", criterion_10),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        if only.is_some_and(|k| k != i + 1) {
            continue;
        }
        let out = check();
        let verdict = if out.pass { "PASS" } else { "FAIL" };
        println!("{verdict} criterion {} ({name}): {}", i + 1, out.detail);
        failed += usize::from(!out.pass);
    }
    println!("acceptance: {failed} criteria failed");
    if failed > 0 {
        std::process::exit(1);
    }
}
