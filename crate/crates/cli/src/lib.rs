//! Commands behind the `ncp` binary: argument types, report records and the
//! mapping from library errors to exit codes.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use ncp_core::cpt_solver::{optimize_cpt, CptConfig, CptError};
use ncp_core::dp_solver::{indirect_utility_curve, solve, Diagnostics, SolveError, SolverConfig};
use ncp_core::no_arbitrage::{check_na, full_report, NaReport};
use ncp_core::phenomena::{
    closedness_probe, nonexistence_sweep, rectangle_grid, weak_convergence_ladder, PhenomenaError, ProbeGrid,
};
use ncp_core::preferences::{make_builtin_utility, Preference, PreferenceSpec, UtilityFunction};
use ncp_core::tree::{Claim, NodePosition, ScenarioTree, TreeSpec};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 1;
pub const EXIT_ARBITRAGE: i32 = 2;
pub const EXIT_HYPOTHESIS: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "ncp", version, about = "Optimal investment on scenario trees with non-concave preferences")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Output file (stdout when absent).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Seed for sampled searches.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Solver setting override, e.g. `--tol grid_points=4001`.
    #[arg(long = "tol", global = true, value_name = "KEY=VAL")]
    pub tol: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Decide absence of arbitrage and report beta, kappa, pi.
    CheckNa {
        #[arg(long)]
        tree: PathBuf,
    },
    /// Solve the investment problem from one initial capital.
    Solve {
        #[arg(long)]
        tree: PathBuf,
        #[arg(long)]
        pref: PathBuf,
        #[arg(long, allow_negative_numbers = true)]
        z: f64,
    },
    /// Indirect utility on a range of initial capitals.
    Curve {
        #[arg(long)]
        tree: PathBuf,
        #[arg(long)]
        pref: PathBuf,
        /// `a:b:step`.
        #[arg(long = "z-range", allow_hyphen_values = true)]
        z_range: String,
    },
    /// CSV data for the nonexistence, ladder and closedness demonstrations.
    Demo {
        name: String,
        /// Ladder indices, comma separated.
        #[arg(long)]
        n: Option<String>,
        /// Truncation of the closedness market.
        #[arg(long = "K", default_value_t = 4)]
        k: usize,
        /// Utility for the nonexistence sweep (defaults to bounded_below).
        #[arg(long)]
        pref: Option<PathBuf>,
        #[arg(long = "p-up", default_value_t = 0.5)]
        p_up: f64,
        #[arg(long = "phi-max", default_value_t = 20.0)]
        phi_max: f64,
        #[arg(long = "phi-step", default_value_t = 0.1)]
        phi_step: f64,
        /// Rectangle grid resolution of the ladder.
        #[arg(long, default_value_t = 200)]
        grid: usize,
    },
}

/// Failure with its exit code.
#[derive(Debug)]
pub enum Failure {
    Input(String),
    Arbitrage { message: String, report: Option<NaReport<f64>> },
    Hypothesis(String),
}

impl Failure {
    pub fn code(&self) -> i32 {
        match self {
            Failure::Input(_) => EXIT_INPUT,
            Failure::Arbitrage { .. } => EXIT_ARBITRAGE,
            Failure::Hypothesis(_) => EXIT_HYPOTHESIS,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Input(m) => write!(f, "input error: {m}"),
            Failure::Arbitrage { message, .. } => write!(f, "arbitrage: {message}"),
            Failure::Hypothesis(m) => write!(f, "hypothesis violated: {m}"),
        }
    }
}

impl From<SolveError> for Failure {
    fn from(e: SolveError) -> Self {
        match e {
            SolveError::Arbitrage(_) => Failure::Arbitrage { message: e.to_string(), report: None },
            SolveError::UnboundedAbove(_) | SolveError::BoundedBelow(_) => Failure::Hypothesis(e.to_string()),
            _ => Failure::Input(e.to_string()),
        }
    }
}

impl From<CptError> for Failure {
    fn from(e: CptError) -> Self {
        match e {
            CptError::Arbitrage(_) => Failure::Arbitrage { message: e.to_string(), report: None },
            CptError::Hypothesis(_) => Failure::Hypothesis(e.to_string()),
            CptError::Tree(_) => Failure::Input(e.to_string()),
        }
    }
}

impl From<PhenomenaError> for Failure {
    fn from(e: PhenomenaError) -> Self {
        match e {
            PhenomenaError::NotBoundedBelow(_) => Failure::Hypothesis(e.to_string()),
            _ => Failure::Input(e.to_string()),
        }
    }
}

fn read_json<D: serde::de::DeserializeOwned>(path: &Path, what: &str) -> Result<D, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::Input(format!("cannot read {what} {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| {
        Failure::Input(format!("{what} {}: line {}, column {}: {e}", path.display(), e.line(), e.column()))
    })
}

pub fn load_tree(path: &Path) -> Result<(ScenarioTree<f64>, Claim<f64>), Failure> {
    let spec: TreeSpec<f64> = read_json(path, "tree file")?;
    let tree = ScenarioTree::from_spec(&spec).map_err(|e| Failure::Input(e.to_string()))?;
    let claim = Claim::from_spec(&tree, &spec).map_err(|e| Failure::Input(e.to_string()))?;
    Ok((tree, claim))
}

pub fn load_preference(path: &Path) -> Result<Preference<f64>, Failure> {
    let spec: PreferenceSpec = read_json(path, "preference file")?;
    Preference::from_spec(&spec).map_err(|e| Failure::Input(e.to_string()))
}

/// Applies `key=val` overrides to a serialisable config.
pub fn apply_overrides<C: Serialize + serde::de::DeserializeOwned>(config: &C, overrides: &[String]) -> Result<C, Failure> {
    let mut value = serde_json::to_value(config).map_err(|e| Failure::Input(e.to_string()))?;
    let map = value.as_object_mut().expect("configs serialise to objects");
    for item in overrides {
        let (key, val) = item.split_once('=').ok_or_else(|| Failure::Input(format!("--tol expects key=val, got `{item}`")))?;
        if !map.contains_key(key) {
            let known: Vec<&str> = map.keys().map(String::as_str).collect();
            return Err(Failure::Input(format!("unknown setting `{key}` (known: {})", known.join(", "))));
        }
        let slot = map.get_mut(key).expect("checked above");
        let parsed: serde_json::Value =
            serde_json::from_str(val).map_err(|_| Failure::Input(format!("setting `{key}`: `{val}` is not a number")))?;
        *slot = parsed;
    }
    serde_json::from_value(value).map_err(|e| Failure::Input(format!("invalid setting: {e}")))
}

/// Parses `a:b:step` into the sample points `a, a + step, ...` up to `b`.
pub fn parse_range(text: &str) -> Result<Vec<f64>, Failure> {
    let parts: Vec<&str> = text.split(':').collect();
    let bad = || Failure::Input(format!("--z-range expects a:b:step, got `{text}`"));
    if parts.len() != 3 {
        return Err(bad());
    }
    let nums: Vec<f64> = parts.iter().map(|p| p.trim().parse::<f64>()).collect::<Result<_, _>>().map_err(|_| bad())?;
    let (a, b, step) = (nums[0], nums[1], nums[2]);
    if !(a.is_finite() && b.is_finite() && step.is_finite()) || step <= 0.0 || b < a {
        return Err(Failure::Input(format!("--z-range `{text}` must be finite with a <= b and step > 0")));
    }
    let count = ((b - a) / step + 1e-9).floor() as usize;
    Ok((0..=count).map(|i| a + step * i as f64).collect())
}

fn parse_list(text: &str) -> Result<Vec<usize>, Failure> {
    text.split(',')
        .map(|s| s.trim().parse::<usize>().map_err(|_| Failure::Input(format!("`{text}` is not a comma-separated list of integers"))))
        .collect()
}

/// Bounds `K(n)` found at one node.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeBounds {
    pub node: u64,
    #[serde(deserialize_with = "integer_keys")]
    pub bounds: BTreeMap<i64, f64>,
}

/// JSON object keys are strings; buffered (tagged) deserialisation does not
/// convert them back to integers on its own.
fn integer_keys<'de, D: serde::Deserializer<'de>>(d: D) -> Result<BTreeMap<i64, f64>, D::Error> {
    BTreeMap::<String, f64>::deserialize(d)?
        .into_iter()
        .map(|(k, v)| k.parse().map(|k| (k, v)).map_err(serde::de::Error::custom))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolveDiagnostics {
    #[serde(flatten)]
    pub solver: Diagnostics,
    /// `|u_bar(z)|` change when the grids are refined twofold.
    pub refinement_delta: f64,
}

/// Report of an expected-utility solve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub value: f64,
    pub z: f64,
    pub strategy: Vec<NodePosition<f64>>,
    #[serde(rename = "K")]
    pub k: Vec<NodeBounds>,
    pub diagnostics: SolveDiagnostics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeRadius {
    pub node: u64,
    pub radius: f64,
}

/// Report of a prospect-theory optimisation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CptReport {
    pub v_plus: f64,
    pub v_minus: f64,
    pub v: f64,
    pub z: f64,
    pub strategy: Vec<NodePosition<f64>>,
    pub region: Vec<NodeRadius>,
    /// `V(0, z)`.
    pub reference: f64,
    pub converged: bool,
}

/// One sample of the indirect utility.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub z: f64,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveReport {
    pub points: Vec<CurvePoint>,
    pub non_decreasing: bool,
    pub max_jump: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Report {
    Eu(SolveReport),
    Cpt(CptReport),
}

fn emit(out: &Option<PathBuf>, text: &str) -> Result<(), Failure> {
    match out {
        Some(path) => fs::write(path, text).map_err(|e| Failure::Input(format!("cannot write {}: {e}", path.display()))),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(text.as_bytes()).map_err(|e| Failure::Input(e.to_string()))
        }
    }
}

fn emit_json<S: Serialize>(out: &Option<PathBuf>, value: &S) -> Result<(), Failure> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Failure::Input(e.to_string()))?;
    text.push('\n');
    emit(out, &text)
}

fn csv_text(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<String, Failure> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).map_err(|e| Failure::Input(e.to_string()))?;
    for row in rows {
        w.write_record(&row).map_err(|e| Failure::Input(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Failure::Input(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Runs a parsed command; `Ok` carries the exit code of a successful run.
pub fn run(cli: &Cli) -> Result<i32, Failure> {
    let common = &cli.common;
    match &cli.command {
        Command::CheckNa { tree } => cmd_check_na(tree, common),
        Command::Solve { tree, pref, z } => cmd_solve(tree, pref, *z, common),
        Command::Curve { tree, pref, z_range } => cmd_curve(tree, pref, z_range, common),
        Command::Demo { name, n, k, pref, p_up, phi_max, phi_step, grid } => {
            cmd_demo(name, n.as_deref(), *k, pref.as_deref(), *p_up, *phi_max, *phi_step, *grid, common)
        }
    }
}

fn cmd_check_na(tree: &Path, common: &Common) -> Result<i32, Failure> {
    let (tree, _) = load_tree(tree)?;
    match full_report(&tree) {
        Ok(report) => {
            emit_json(&common.out, &report)?;
            Ok(EXIT_OK)
        }
        Err(e) => Err(Failure::Arbitrage { message: e.to_string(), report: Some(check_na(&tree)) }),
    }
}

fn cpt_config(common: &Common) -> Result<CptConfig, Failure> {
    let base = CptConfig { seed: common.seed, ..CptConfig::default() };
    apply_overrides(&base, &common.tol)
}

pub fn solve_report(
    tree: &ScenarioTree<f64>,
    pref: &Preference<f64>,
    claim: &Claim<f64>,
    z: f64,
    common: &Common,
) -> Result<Report, Failure> {
    match pref {
        Preference::Eu(_) => {
            let config: SolverConfig = apply_overrides(&SolverConfig::default(), &common.tol)?;
            let sol = solve(tree, pref, claim, z, &config)?;
            let fine = SolverConfig { grid_points: 2 * config.grid_points - 1, ..config.clone() };
            let refined = solve(tree, pref, claim, z, &fine)?;
            let k = tree
                .decision_nodes()
                .map(|n| NodeBounds { node: tree.node(n).id, bounds: sol.nodes[n].bounds.clone() })
                .collect();
            Ok(Report::Eu(SolveReport {
                value: sol.value,
                z,
                strategy: sol.strategy.to_entries(tree),
                k,
                diagnostics: SolveDiagnostics {
                    solver: sol.diagnostics,
                    refinement_delta: (refined.value - sol.value).abs(),
                },
            }))
        }
        Preference::Cpt(cpt) => {
            let sol = optimize_cpt(tree, cpt, claim, z, &cpt_config(common)?)?;
            Ok(Report::Cpt(CptReport {
                v_plus: sol.value.v_plus,
                v_minus: sol.value.v_minus,
                v: sol.value.v,
                z,
                strategy: sol.strategy.to_entries(tree),
                region: tree
                    .decision_nodes()
                    .map(|n| NodeRadius { node: tree.node(n).id, radius: sol.region.radius[n] })
                    .collect(),
                reference: sol.reference.v,
                converged: sol.converged,
            }))
        }
    }
}

fn cmd_solve(tree: &Path, pref: &Path, z: f64, common: &Common) -> Result<i32, Failure> {
    let (tree, claim) = load_tree(tree)?;
    let pref = load_preference(pref)?;
    if !z.is_finite() {
        return Err(Failure::Input("--z must be finite".into()));
    }
    if let Err(e) = full_report(&tree) {
        return Err(Failure::Arbitrage { message: e.to_string(), report: Some(check_na(&tree)) });
    }
    let report = solve_report(&tree, &pref, &claim, z, common)?;
    emit_json(&common.out, &report)?;
    Ok(EXIT_OK)
}

fn cmd_curve(tree: &Path, pref: &Path, z_range: &str, common: &Common) -> Result<i32, Failure> {
    let (tree, claim) = load_tree(tree)?;
    let pref = load_preference(pref)?;
    let zs = parse_range(z_range)?;
    if let Err(e) = full_report(&tree) {
        return Err(Failure::Arbitrage { message: e.to_string(), report: Some(check_na(&tree)) });
    }
    let report = match &pref {
        Preference::Eu(_) => {
            let config: SolverConfig = apply_overrides(&SolverConfig::default(), &common.tol)?;
            let curve = indirect_utility_curve(&tree, &pref, &claim, &zs, &config)?;
            CurveReport {
                points: curve.points.iter().map(|&(z, value)| CurvePoint { z, value }).collect(),
                non_decreasing: curve.non_decreasing,
                max_jump: curve.max_jump,
            }
        }
        Preference::Cpt(cpt) => {
            let config = cpt_config(common)?;
            let mut points = Vec::with_capacity(zs.len());
            for &z in &zs {
                points.push(CurvePoint { z, value: optimize_cpt(&tree, cpt, &claim, z, &config)?.value.v });
            }
            let non_decreasing = points.windows(2).all(|w| w[1].value + 1e-9 >= w[0].value);
            let max_jump = points.windows(2).map(|w| (w[1].value - w[0].value).abs()).fold(0.0, f64::max);
            CurveReport { points, non_decreasing, max_jump }
        }
    };
    emit_json(&common.out, &report)?;
    Ok(EXIT_OK)
}

/// `foo.csv` -> `foo.distances.csv`.
pub fn distances_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    out.with_file_name(format!("{stem}.distances.csv"))
}

#[allow(clippy::too_many_arguments)]
fn cmd_demo(
    name: &str,
    n: Option<&str>,
    k: usize,
    pref: Option<&Path>,
    p_up: f64,
    phi_max: f64,
    phi_step: f64,
    grid: usize,
    common: &Common,
) -> Result<i32, Failure> {
    let default_n = "1,2,4,8,16,32,64";
    match name {
        "nonexistence" => {
            let u: UtilityFunction<f64> = match pref {
                Some(path) => match load_preference(path)? {
                    Preference::Eu(u) => u,
                    Preference::Cpt(_) => return Err(Failure::Input("the sweep needs an `eu` preference".into())),
                },
                None => make_builtin_utility("bounded_below", &BTreeMap::new()).map_err(|e| Failure::Input(e.to_string()))?,
            };
            if !(phi_step > 0.0 && phi_max > 0.0 && phi_max.is_finite()) {
                return Err(Failure::Input("--phi-max and --phi-step must be positive".into()));
            }
            let count = (phi_max / phi_step + 1e-9).floor() as usize;
            let phi: Vec<f64> = (0..=count).map(|i| phi_step * i as f64).collect();
            let sweep = nonexistence_sweep(p_up, &u, &phi)?;
            let rows = sweep.phi.iter().zip(&sweep.values).zip(&sweep.gaps).map(|((p, v), g)| {
                vec![p.to_string(), v.to_string(), g.to_string()]
            });
            emit(&common.out, &csv_text(&["phi", "value", "gap"], rows)?)?;
        }
        "ladder" => {
            let ns = parse_list(n.unwrap_or(default_n))?;
            let entries = weak_convergence_ladder(&ns, &rectangle_grid::<f64>(grid.max(1)))?;
            let rows = entries.iter().map(|e| vec![e.n.to_string(), e.distance.to_string(), e.bound.to_string()]);
            emit(&common.out, &csv_text(&["n", "distance", "bound"], rows)?)?;
        }
        "closedness" => {
            if k == 0 {
                return Err(Failure::Input("--K must be at least 1".into()));
            }
            let ns = parse_list(n.unwrap_or(default_n))?;
            let report = closedness_probe::<f64>(k, &ns, &ProbeGrid::default())?;
            let residuals = csv_text(
                &["strategy", "k", "c_k", "bound", "residual"],
                report.residuals.iter().map(|r| {
                    vec![r.strategy.clone(), r.k.to_string(), r.c_k.to_string(), r.bound.to_string(), r.residual.to_string()]
                }),
            )?;
            let mut rows: Vec<Vec<String>> =
                report.ladder.iter().map(|(n, d)| vec!["phi_n".into(), n.to_string(), d.to_string()]).collect();
            rows.push(vec!["const_1.5".into(), String::new(), report.constant_distance.to_string()]);
            let distances = csv_text(&["strategy", "n", "distance"], rows)?;
            match &common.out {
                Some(path) => {
                    emit(&common.out, &residuals)?;
                    emit(&Some(distances_path(path)), &distances)?;
                }
                None => emit(&None, &format!("{residuals}\n{distances}"))?,
            }
        }
        other => {
            return Err(Failure::Input(format!("unknown demo `{other}` (expected nonexistence, ladder or closedness)")));
        }
    }
    Ok(EXIT_OK)
}
