//! Experiment configuration: a TOML file with `[market]`, `[utility]`,
//! `[simulation]`, `[task]` and `[output]` sections. Parsing is strict and
//! collects every problem before failing.

use std::collections::BTreeSet;
use std::fmt;

use nalgebra::DMatrix;
use thiserror::Error;
use toml::{Table, Value};

use crate::fbsde::{BsdeMode, PICARD_DEGREE};
use crate::market::{build_market, Bounds, MarketConfig, MarketModel, Regime, RegimeChain, TimeGrid};
use crate::utility::UtilitySpec;
use crate::variational::DEFAULT_LADDER;
use crate::wealth::DEFAULT_THRESHOLD;

pub const DEFAULT_DT: f64 = 1.0 / 250.0;
pub const DEFAULT_PICARD_ITERS: usize = 50;
pub const DEFAULT_PICARD_TOL: f64 = 1e-6;
pub const DEFAULT_RESIDUAL_TOL: f64 = 1e-8;
pub const DEFAULT_PREFIX: &str = "merton-lab";

/// Every problem found in a config file.
#[derive(Debug, Error, Clone, PartialEq)]
pub struct ConfigError {
    pub errors: Vec<String>,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "config: {} error(s)", self.errors.len())?;
        for e in &self.errors {
            write!(f, "\n  {e}")?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ControlKind {
    Weights,
    Dollars,
}

#[derive(Clone, Debug)]
pub struct SimulationSection {
    pub n_paths: usize,
    pub seed: u64,
    pub antithetic: bool,
    /// Worker threads; 0 means one per core.
    pub workers: usize,
}

/// Task knobs. Everything here has a default except the search box.
#[derive(Clone, Debug)]
pub struct TaskSection {
    pub threshold: f64,
    pub control: ControlKind,
    /// Constant control to simulate or verify; `None` means the closed form.
    pub policy: Option<Vec<f64>>,
    pub direction: Vec<f64>,
    pub epsilon_ladder: Vec<f64>,
    pub search_lower: Option<Vec<f64>>,
    pub search_upper: Option<Vec<f64>>,
    pub search_step: Option<f64>,
    pub crn: bool,
    pub bsde_mode: BsdeMode,
    pub regression_degree: usize,
    pub picard_tol: f64,
    pub picard_iters: usize,
    pub residual_tolerance: f64,
    /// Wealth levels at which wealth-dependent policies are tabulated.
    pub policy_wealth: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    /// The file as given, hashed into the run id.
    pub source: String,
    pub model: MarketModel,
    pub grid: TimeGrid,
    pub x0: f64,
    pub utility: UtilitySpec,
    pub simulation: SimulationSection,
    pub task: TaskSection,
    pub prefix: String,
    /// `key = value` lines for every default that was filled in.
    pub defaults: Vec<String>,
}

/// Reads typed keys out of one table and remembers which were touched.
struct Reader<'a> {
    name: String,
    table: &'a Table,
    seen: BTreeSet<String>,
}

impl<'a> Reader<'a> {
    fn new(name: &str, table: &'a Table) -> Self {
        Self { name: name.to_string(), table, seen: BTreeSet::new() }
    }

    fn key(&self, k: &str) -> String {
        format!("{}.{k}", self.name)
    }

    fn raw(&mut self, k: &str) -> Option<&'a Value> {
        self.seen.insert(k.to_string());
        self.table.get(k)
    }

    fn has(&self, k: &str) -> bool {
        self.table.contains_key(k)
    }

    fn opt<T>(&mut self, k: &str, errs: &mut Vec<String>, conv: fn(&Value) -> Option<T>, what: &str) -> Option<T> {
        let v = self.raw(k)?;
        let out = conv(v);
        if out.is_none() {
            errs.push(format!("{}: expected {what}, found {}", self.key(k), v.type_str()));
        }
        out
    }

    fn req<T>(&mut self, k: &str, errs: &mut Vec<String>, conv: fn(&Value) -> Option<T>, what: &str) -> Option<T> {
        if !self.has(k) {
            self.seen.insert(k.to_string());
            errs.push(format!("{}: missing required key", self.key(k)));
            return None;
        }
        self.opt(k, errs, conv, what)
    }

    /// Reports keys that were never asked for.
    fn finish(self, errs: &mut Vec<String>) {
        for k in self.table.keys() {
            if !self.seen.contains(k) {
                errs.push(format!("{}: unknown key", self.key(k)));
            }
        }
    }
}

fn as_f64(v: &Value) -> Option<f64> {
    match v {
        Value::Float(f) => Some(*f),
        Value::Integer(i) => Some(*i as f64),
        _ => None,
    }
}

fn as_usize(v: &Value) -> Option<usize> {
    v.as_integer().and_then(|i| usize::try_from(i).ok())
}

fn as_u64(v: &Value) -> Option<u64> {
    v.as_integer().and_then(|i| u64::try_from(i).ok())
}

fn as_bool(v: &Value) -> Option<bool> {
    v.as_bool()
}

fn as_str(v: &Value) -> Option<String> {
    v.as_str().map(String::from)
}

fn as_list(v: &Value) -> Option<Vec<f64>> {
    v.as_array()?.iter().map(as_f64).collect()
}

/// A matrix given either as rows (`[[a, b], [c, d]]`) or flat row-major.
fn as_matrix(v: &Value) -> Option<Vec<f64>> {
    let arr = v.as_array()?;
    if arr.iter().all(|x| x.is_array()) {
        let mut out = Vec::new();
        for row in arr {
            out.extend(as_list(row)?);
        }
        Some(out)
    } else {
        as_list(v)
    }
}

fn as_rows(v: &Value) -> Option<Vec<Vec<f64>>> {
    v.as_array()?.iter().map(as_list).collect()
}

fn table<'a>(root: &'a Table, name: &str, required: bool, errs: &mut Vec<String>) -> Option<&'a Table> {
    match root.get(name) {
        Some(Value::Table(t)) => Some(t),
        Some(other) => {
            errs.push(format!("{name}: expected a table, found {}", other.type_str()));
            None
        }
        None => {
            if required {
                errs.push(format!("{name}: missing required section"));
            }
            None
        }
    }
}

const SECTIONS: [&str; 5] = ["market", "utility", "simulation", "task", "output"];

struct Coefficients {
    rate: f64,
    alpha: Vec<f64>,
    sigma: Vec<f64>,
}

fn read_coefficients(r: &mut Reader, n: Option<usize>, errs: &mut Vec<String>) -> Option<Coefficients> {
    let rate = r.req("r", errs, as_f64, "a number");
    let alpha = r.req("alpha", errs, as_list, "a list of numbers");
    let sigma = r.req("sigma", errs, as_matrix, "a matrix of numbers");
    let (rate, alpha, sigma) = (rate?, alpha?, sigma?);
    if let Some(n) = n {
        if alpha.len() != n {
            errs.push(format!("{}: expected {n} entries, found {}", r.key("alpha"), alpha.len()));
            return None;
        }
        if sigma.len() != n * n {
            errs.push(format!("{}: expected {} entries ({n} x {n}), found {}", r.key("sigma"), n * n, sigma.len()));
            return None;
        }
    }
    Some(Coefficients { rate, alpha, sigma })
}

struct MarketPart {
    model: MarketModel,
    grid: TimeGrid,
    x0: f64,
    markov: bool,
}

fn read_market(t: &Table, seed: Option<u64>, dt: Option<f64>, errs: &mut Vec<String>, defaults: &mut Vec<String>) -> Option<MarketPart> {
    let mut r = Reader::new("market", t);
    let n = r.req("n_assets", errs, as_usize, "a non-negative integer");
    if n == Some(0) {
        errs.push("market.n_assets: must be at least 1".into());
    }
    let x0 = r.req("x0", errs, as_f64, "a number");
    let horizon = r.req("T", errs, as_f64, "a number");
    let n_steps = r.opt("n_steps", errs, as_usize, "a positive integer");
    let m = r.req("bound_M", errs, as_f64, "a number");
    let eps = r.req("eps", errs, as_f64, "a number");
    let c = r.req("C", errs, as_f64, "a number");
    let generator = r.opt("generator", errs, as_rows, "a matrix of numbers");
    let initial_state = r.opt("initial_state", errs, as_usize, "a non-negative integer");
    let markov_state = r.opt("markov_state", errs, as_bool, "a boolean").unwrap_or(false);

    let mut regimes = Vec::new();
    if generator.is_some() || r.has("regime") {
        for k in ["r", "alpha", "sigma"] {
            if r.raw(k).is_some() {
                errs.push(format!("market.{k}: not allowed alongside [[market.regime]]; give coefficients per regime"));
            }
        }
        match r.raw("regime") {
            Some(Value::Array(items)) => {
                for (j, item) in items.iter().enumerate() {
                    let Some(rt) = item.as_table() else {
                        errs.push(format!("market.regime[{j}]: expected a table"));
                        continue;
                    };
                    let mut rr = Reader::new(&format!("market.regime[{j}]"), rt);
                    let coeffs = read_coefficients(&mut rr, n, errs);
                    rr.finish(errs);
                    if let Some(c) = coeffs {
                        regimes.push(c);
                    }
                }
            }
            Some(other) => errs.push(format!("market.regime: expected an array of tables, found {}", other.type_str())),
            None => errs.push("market.regime: missing; a generator needs one [[market.regime]] per state".into()),
        }
    } else if let Some(c) = read_coefficients(&mut r, n, errs) {
        regimes.push(c);
    }
    r.finish(errs);

    let (n, x0, horizon, m, eps, c) = (n?, x0?, horizon?, m?, eps?, c?);
    if n == 0 || regimes.is_empty() {
        return None;
    }
    if !x0.is_finite() {
        errs.push(format!("market.x0: must be finite, got {x0}"));
    }
    let grid = match (n_steps, dt) {
        (Some(steps), Some(dt)) => {
            let g = TimeGrid::new(horizon, steps);
            if let Ok(g) = &g {
                if (g.dt() - dt).abs() > 1e-12 * dt.abs().max(1.0) {
                    errs.push(format!("simulation.dt: {dt} disagrees with market.T / market.n_steps = {}", g.dt()));
                }
            }
            g
        }
        (Some(steps), None) => TimeGrid::new(horizon, steps),
        (None, dt) => {
            let dt = dt.unwrap_or_else(|| {
                defaults.push(format!("simulation.dt = {DEFAULT_DT}"));
                DEFAULT_DT
            });
            TimeGrid::from_dt(horizon, dt)
        }
    };
    let grid = match grid {
        Ok(g) => g,
        Err(e) => {
            errs.push(e.to_string());
            return None;
        }
    };

    let bounds = Bounds { m, eps, c };
    let first = &regimes[0];
    let mut cfg = MarketConfig::constant(first.rate, &first.alpha, &first.sigma, horizon, bounds);
    let seed = seed.unwrap_or(0);
    let mut markov = markov_state;
    if let Some(g) = generator {
        let size = g.len();
        if g.iter().any(|row| row.len() != size) {
            errs.push("market.generator: must be square".into());
            return None;
        }
        if size != regimes.len() {
            errs.push(format!("market.generator: {size} states but {} [[market.regime]] entries", regimes.len()));
            return None;
        }
        let flat: Vec<f64> = g.into_iter().flatten().collect();
        let chain = RegimeChain {
            generator: DMatrix::from_row_slice(size, size, &flat),
            initial_state: initial_state.unwrap_or(0),
            seed,
        };
        let list = regimes.iter().map(|c| Regime::constant(c.rate, &c.alpha, &c.sigma)).collect();
        cfg = cfg.with_chain(list, chain);
        markov = true;
    } else if markov_state {
        cfg = cfg.with_chain(vec![Regime::constant(first.rate, &first.alpha, &first.sigma)], RegimeChain::degenerate(seed));
    } else if initial_state.is_some() {
        errs.push("market.initial_state: only meaningful with a generator".into());
    }
    match build_market(cfg) {
        Ok(model) => Some(MarketPart { model, grid, x0, markov }),
        Err(e) => {
            errs.push(e.to_string());
            None
        }
    }
}

fn read_utility(t: &Table, errs: &mut Vec<String>) -> Option<UtilitySpec> {
    let mut r = Reader::new("utility", t);
    let kind = r.req("kind", errs, as_str, "a string");
    let out = match kind.as_deref() {
        Some("log") => Some(UtilitySpec::Log),
        Some("power") => r.req("eta", errs, as_f64, "a number").and_then(|eta| UtilitySpec::power(eta).map_err(|e| errs.push(e.to_string())).ok()),
        Some("exponential") => r
            .req("gamma", errs, as_f64, "a number")
            .and_then(|g| UtilitySpec::exponential(g).map_err(|e| errs.push(e.to_string())).ok()),
        Some(other) => {
            errs.push(format!("utility.kind: unknown utility {other:?}; expected log, power or exponential"));
            None
        }
        None => None,
    };
    r.finish(errs);
    out
}

fn parse_mode(s: &str) -> Option<BsdeMode> {
    [BsdeMode::OdeReduction, BsdeMode::RegressionMc, BsdeMode::PicardCoupled]
        .into_iter()
        .find(|m| m.to_string() == s)
}

/// Parse and validate a config file, reporting every error found.
pub fn parse_config(text: &str) -> Result<ExperimentConfig, ConfigError> {
    let root: Table = toml::from_str(text).map_err(|e| ConfigError { errors: vec![format!("syntax: {}", e.message())] })?;
    let mut errs = Vec::new();
    let mut defaults = Vec::new();
    for k in root.keys() {
        if !SECTIONS.contains(&k.as_str()) {
            errs.push(format!("{k}: unknown section"));
        }
    }

    let simulation = table(&root, "simulation", true, &mut errs).and_then(|t| {
        let mut r = Reader::new("simulation", t);
        let n_paths = r.req("n_paths", &mut errs, as_usize, "a positive integer");
        let seed = r.req("seed", &mut errs, as_u64, "a non-negative integer");
        let dt = r.opt("dt", &mut errs, as_f64, "a number");
        let antithetic = r.opt("antithetic", &mut errs, as_bool, "a boolean");
        let workers = r.opt("workers", &mut errs, as_usize, "a non-negative integer");
        r.finish(&mut errs);
        if n_paths == Some(0) {
            errs.push("simulation.n_paths: must be positive".into());
        }
        let antithetic = antithetic.unwrap_or_else(|| {
            defaults.push("simulation.antithetic = true".into());
            true
        });
        if antithetic && n_paths.is_some_and(|n| n % 2 == 1) {
            errs.push("simulation.n_paths: antithetic sampling needs an even path count".into());
        }
        let workers = workers.unwrap_or_else(|| {
            defaults.push("simulation.workers = 0".into());
            0
        });
        Some((n_paths?, seed?, dt, antithetic, workers))
    });
    let seed = simulation.as_ref().map(|s| s.1);
    let dt = simulation.as_ref().and_then(|s| s.2);
    let market = table(&root, "market", true, &mut errs).and_then(|t| read_market(t, seed, dt, &mut errs, &mut defaults));
    let utility = table(&root, "utility", true, &mut errs).and_then(|t| read_utility(t, &mut errs));
    let n_assets = market.as_ref().map(|m| m.model.n_assets());

    let empty = Table::new();
    let task_table = table(&root, "task", false, &mut errs).unwrap_or(&empty);
    let mut r = Reader::new("task", task_table);
    let mut default = |key: &str, shown: String| defaults.push(format!("task.{key} = {shown}"));
    let threshold = r.opt("threshold", &mut errs, as_f64, "a number").unwrap_or_else(|| {
        default("threshold", format!("{DEFAULT_THRESHOLD}"));
        DEFAULT_THRESHOLD
    });
    if !(threshold.is_finite() && threshold > 0.0) {
        errs.push(format!("task.threshold: must be positive, got {threshold}"));
    }
    let exponential = matches!(utility, Some(UtilitySpec::Exponential { .. }));
    let control = match r.opt("control", &mut errs, as_str, "a string").as_deref() {
        Some("weights") => ControlKind::Weights,
        Some("dollars") => ControlKind::Dollars,
        Some(other) => {
            errs.push(format!("task.control: unknown control {other:?}; expected weights or dollars"));
            ControlKind::Weights
        }
        None => {
            let k = if exponential { ControlKind::Dollars } else { ControlKind::Weights };
            default("control", if exponential { "dollars" } else { "weights" }.into());
            k
        }
    };
    let sized = |key: &str, v: Option<Vec<f64>>, errs: &mut Vec<String>| match (v, n_assets) {
        (Some(v), Some(n)) if v.len() != n => {
            errs.push(format!("task.{key}: expected {n} entries, found {}", v.len()));
            None
        }
        (v, _) => v,
    };
    let policy = r.opt("policy", &mut errs, as_list, "a list of numbers");
    let policy = sized("policy", policy, &mut errs);
    let direction = r.opt("direction", &mut errs, as_list, "a list of numbers");
    let direction = sized("direction", direction, &mut errs).unwrap_or_else(|| {
        let n = n_assets.unwrap_or(1);
        defaults.push(format!("task.direction = {:?}", vec![1.0; n]));
        vec![1.0; n]
    });
    let mut default = |key: &str, shown: String| defaults.push(format!("task.{key} = {shown}"));
    let epsilon_ladder = r.opt("epsilon_ladder", &mut errs, as_list, "a list of numbers").unwrap_or_else(|| {
        default("epsilon_ladder", format!("{DEFAULT_LADDER:?}"));
        DEFAULT_LADDER.to_vec()
    });
    if epsilon_ladder.is_empty() || epsilon_ladder.iter().any(|e| !(e.is_finite() && *e > 0.0)) || epsilon_ladder.windows(2).any(|w| w[1] >= w[0]) {
        errs.push(format!("task.epsilon_ladder: must be non-empty, positive and strictly decreasing, got {epsilon_ladder:?}"));
    }
    let search_lower = r.opt("search_lower", &mut errs, as_list, "a list of numbers");
    let search_upper = r.opt("search_upper", &mut errs, as_list, "a list of numbers");
    let search_step = r.opt("search_step", &mut errs, as_f64, "a number");
    if let Some(s) = search_step {
        if !(s.is_finite() && s > 0.0) {
            errs.push(format!("task.search_step: must be positive, got {s}"));
        }
    }
    let crn = r.opt("crn", &mut errs, as_bool, "a boolean").unwrap_or_else(|| {
        default("crn", "true".into());
        true
    });
    let markov = market.as_ref().is_some_and(|m| m.markov);
    let bsde_mode = match r.opt("bsde_mode", &mut errs, as_str, "a string") {
        Some(s) => parse_mode(&s).unwrap_or_else(|| {
            errs.push(format!("task.bsde_mode: unknown mode {s:?}; expected ode-reduction, regression-mc or picard-coupled"));
            BsdeMode::OdeReduction
        }),
        None => {
            let m = if exponential {
                BsdeMode::PicardCoupled
            } else if markov {
                BsdeMode::RegressionMc
            } else {
                BsdeMode::OdeReduction
            };
            default("bsde_mode", m.to_string());
            m
        }
    };
    if exponential != (bsde_mode == BsdeMode::PicardCoupled) && utility.is_some() {
        errs.push(format!("task.bsde_mode: {bsde_mode} does not apply to {} utility", utility.as_ref().map_or("", |u| u.kind())));
    }
    let regression_degree = r.opt("regression_degree", &mut errs, as_usize, "a non-negative integer").unwrap_or_else(|| {
        default("regression_degree", PICARD_DEGREE.to_string());
        PICARD_DEGREE
    });
    let picard_tol = r.opt("picard_tol", &mut errs, as_f64, "a number").unwrap_or_else(|| {
        default("picard_tol", format!("{DEFAULT_PICARD_TOL:e}"));
        DEFAULT_PICARD_TOL
    });
    let picard_iters = r.opt("picard_iters", &mut errs, as_usize, "a positive integer").unwrap_or_else(|| {
        default("picard_iters", DEFAULT_PICARD_ITERS.to_string());
        DEFAULT_PICARD_ITERS
    });
    let residual_tolerance = r.opt("residual_tolerance", &mut errs, as_f64, "a number").unwrap_or_else(|| {
        default("residual_tolerance", format!("{DEFAULT_RESIDUAL_TOL:e}"));
        DEFAULT_RESIDUAL_TOL
    });
    let x0 = market.as_ref().map_or(1.0, |m| m.x0);
    let policy_wealth = r.opt("policy_wealth", &mut errs, as_list, "a list of numbers").unwrap_or_else(|| {
        default("policy_wealth", format!("[{x0}]"));
        vec![x0]
    });
    r.finish(&mut errs);

    let prefix = match table(&root, "output", false, &mut errs) {
        Some(t) => {
            let mut r = Reader::new("output", t);
            let p = r.opt("prefix", &mut errs, as_str, "a string");
            r.finish(&mut errs);
            p
        }
        None => None,
    }
    .unwrap_or_else(|| {
        defaults.push(format!("output.prefix = {DEFAULT_PREFIX:?}"));
        DEFAULT_PREFIX.to_string()
    });

    if !errs.is_empty() {
        return Err(ConfigError { errors: errs });
    }
    let (Some(market), Some(utility), Some((n_paths, seed, _, antithetic, workers))) = (market, utility, simulation) else {
        return Err(ConfigError { errors: vec!["config: incomplete".into()] });
    };
    Ok(ExperimentConfig {
        source: text.to_string(),
        model: market.model,
        grid: market.grid,
        x0: market.x0,
        utility,
        simulation: SimulationSection { n_paths, seed, antithetic, workers },
        task: TaskSection {
            threshold,
            control,
            policy,
            direction,
            epsilon_ladder,
            search_lower,
            search_upper,
            search_step,
            crn,
            bsde_mode,
            regression_degree,
            picard_tol,
            picard_iters,
            residual_tolerance,
            policy_wealth,
        },
        prefix,
        defaults,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[market]
n_assets = 1
r = 0.02
alpha = [0.08]
sigma = [[0.04]]
x0 = 1.0
T = 1.0
bound_M = 1.0
eps = 0.01
C = 0.1

[utility]
kind = "log"

[simulation]
n_paths = 10
seed = 7
"#;

    #[test]
    fn minimal_config_fills_defaults() {
        let c = parse_config(MINIMAL).unwrap();
        assert_eq!(c.grid.n_steps(), 250);
        assert_eq!(c.task.threshold, 1e6);
        assert!(c.simulation.antithetic);
        assert_eq!(c.task.bsde_mode, BsdeMode::OdeReduction);
        assert_eq!(c.task.control, ControlKind::Weights);
        assert!(c.defaults.iter().any(|d| d.starts_with("simulation.dt")));
        assert!(c.defaults.iter().any(|d| d.starts_with("task.threshold")));
        assert_eq!(c.prefix, DEFAULT_PREFIX);
    }

    #[test]
    fn eta_one_rejected() {
        let text = MINIMAL.replace("kind = \"log\"", "kind = \"power\"\neta = 1.0");
        let e = parse_config(&text).unwrap_err();
        assert!(e.errors.iter().any(|m| m.contains("power utility requires eta < 1")), "{e}");
    }

    #[test]
    fn all_errors_reported() {
        let text = MINIMAL.replace("kind = \"log\"", "kind = \"power\"\neta = 1.0").replace("seed = 7", "seed = 7\ncolour = 3");
        let e = parse_config(&text).unwrap_err();
        assert_eq!(e.errors.len(), 2, "{e}");
        assert!(e.errors.iter().any(|m| m.contains("simulation.colour: unknown key")));
    }

    #[test]
    fn missing_and_mistyped_keys() {
        let text = MINIMAL.replace("r = 0.02\n", "").replace("x0 = 1.0", "x0 = \"one\"");
        let e = parse_config(&text).unwrap_err();
        assert!(e.errors.iter().any(|m| m == "market.r: missing required key"), "{e}");
        assert!(e.errors.iter().any(|m| m.contains("market.x0: expected a number, found string")), "{e}");
    }

    #[test]
    fn unknown_section_and_bad_market() {
        let text = MINIMAL.replace("sigma = [[0.04]]", "sigma = [[0.5]]") + "\n[plots]\nx = 1\n";
        let e = parse_config(&text).unwrap_err();
        assert!(e.errors.iter().any(|m| m == "plots: unknown section"));
        assert!(e.errors.iter().any(|m| m.contains("eigenvalue")), "{e}");
    }

    #[test]
    fn flat_sigma_and_explicit_steps() {
        let text = MINIMAL.replace("sigma = [[0.04]]", "sigma = [0.04]").replace("T = 1.0", "T = 1.0\nn_steps = 50");
        let c = parse_config(&text).unwrap();
        assert_eq!(c.grid.n_steps(), 50);
        let clash = text.replace("seed = 7", "seed = 7\ndt = 0.004");
        assert!(parse_config(&clash).is_err());
    }

    #[test]
    fn regime_chain_config() {
        let text = r#"
[market]
n_assets = 1
x0 = 1.0
T = 1.0
bound_M = 1.0
eps = 0.01
C = 0.1
generator = [[-1.0, 1.0], [2.0, -2.0]]

[[market.regime]]
r = 0.02
alpha = [0.08]
sigma = [[0.04]]

[[market.regime]]
r = 0.01
alpha = [0.05]
sigma = [[0.06]]

[utility]
kind = "power"
eta = 0.5

[simulation]
n_paths = 10
seed = 1
"#;
        let c = parse_config(text).unwrap();
        assert_eq!(c.model.n_regimes(), 2);
        assert_eq!(c.task.bsde_mode, BsdeMode::RegressionMc);
    }

    #[test]
    fn odd_paths_with_antithetic_rejected() {
        let text = MINIMAL.replace("n_paths = 10", "n_paths = 11");
        assert!(parse_config(&text).is_err());
        let ok = MINIMAL.replace("n_paths = 10", "n_paths = 11\nantithetic = false");
        assert!(parse_config(&ok).is_ok());
    }
}
