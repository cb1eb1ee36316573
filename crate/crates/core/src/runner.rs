//! Task dispatch for the command line: simulate, solve, verify and search.
//! Every numeric output is a deterministic function of the config file.

use std::fmt;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{Duration, Instant};

use sha2::{Digest, Sha256};

use crate::config::{ConfigError, ControlKind, ExperimentConfig};
use crate::fbsde::{
    optimal_policy, solve_bsde_deterministic, solve_bsde_for_policy, solve_bsde_regression, solve_fbsde_exponential, transform_gap, BsdeMode,
    BsdeSolution,
};
use crate::market::{sample_noise, sample_noise_antithetic, NoisePathSet};
use crate::oracle::{closed_form_policy, concavity_witness, grid_search, PolicyFamily, SearchSpec};
use crate::stats::combined_std_error;
use crate::utility::UtilitySpec;
use crate::variational::{expansion_order_check, gateaux_fd, gateaux_formula, mhat_martingale_check, VariationalError, ROUNDOFF_FLOOR};
use crate::wealth::{simulate_wealth_dollars, simulate_wealth_weights, Control, ControlLaw, DollarPolicy, PolicyInput, PortfolioPolicy, Scenario, StoppedPolicy};
use crate::Error;

/// Overrides `simulation.workers`.
pub const WORKERS_ENV: &str = "MERTON_LAB_WORKERS";
/// Offset between the main noise seed and the validation noise seed.
const VALIDATION_SEED_OFFSET: u64 = 0x5eed;
/// Significance multiple for statistical checks.
const SE_MULTIPLE: f64 = 3.0;
const MIN_EXPANSION_SLOPE: f64 = 1.5;

/// `k` standard errors plus the roundoff floor, so that two estimates equal
/// up to floating-point error never fail for lack of Monte Carlo noise.
fn se_bound(k: f64, std_error: f64) -> f64 {
    k * std_error + ROUNDOFF_FLOOR
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    Simulate,
    Solve,
    Verify,
    Search,
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Simulate => "simulate",
            Self::Solve => "solve",
            Self::Verify => "verify",
            Self::Search => "search",
        })
    }
}

impl FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "simulate" => Ok(Self::Simulate),
            "solve" => Ok(Self::Solve),
            "verify" => Ok(Self::Verify),
            "search" => Ok(Self::Search),
            _ => Err(format!("unknown task {s:?}")),
        }
    }
}

/// One row of the verify table.
#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub statistic: String,
    pub value: f64,
    pub std_error: f64,
    pub threshold: f64,
    pub pass: bool,
}

impl Check {
    fn new(statistic: &str, value: f64, std_error: f64, threshold: f64, pass: bool) -> Self {
        Self { statistic: statistic.to_string(), value, std_error, threshold, pass }
    }
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub task: Task,
    pub run_id: String,
    pub wall_time: Duration,
    pub files: Vec<PathBuf>,
    /// Verify rows; empty for other tasks.
    pub checks: Vec<Check>,
    /// Short `key = value` lines describing the outcome.
    pub summary: Vec<String>,
    pub passed: bool,
}

impl RunResult {
    pub fn exit_code(&self) -> i32 {
        if self.passed {
            0
        } else {
            1
        }
    }
}

/// First 40 hex digits of `sha256(config text || seed)`.
pub fn run_id(config: &ExperimentConfig) -> String {
    let mut h = Sha256::new();
    h.update(config.source.as_bytes());
    h.update(config.simulation.seed.to_le_bytes());
    hex::encode(h.finalize())[..40].to_string()
}

fn worker_count(config: &ExperimentConfig) -> Result<usize, Error> {
    match std::env::var(WORKERS_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| Error::Config(ConfigError { errors: vec![format!("{WORKERS_ENV}: expected a non-negative integer, got {v:?}")] })),
        Err(_) => Ok(config.simulation.workers),
    }
}

/// Run `task` and write its CSVs under `prefix` (the config prefix when `None`).
pub fn run(config: &ExperimentConfig, task: Task, prefix: Option<&str>) -> Result<RunResult, Error> {
    let start = Instant::now();
    let workers = worker_count(config)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Io(format!("runner: worker pool: {e}")))?;
    let prefix = prefix.unwrap_or(&config.prefix).to_string();
    let mut out = pool.install(|| dispatch(config, task, &prefix))?;
    let id = run_id(config);
    let manifest = PathBuf::from(format!("{prefix}_{task}_manifest.csv"));
    write_manifest(&manifest, config, task, &id, &out)?;
    out.files.push(manifest);
    Ok(RunResult {
        task,
        run_id: id,
        wall_time: start.elapsed(),
        files: out.files,
        checks: out.checks,
        summary: out.summary,
        passed: out.passed,
    })
}

struct Outcome {
    files: Vec<PathBuf>,
    checks: Vec<Check>,
    summary: Vec<String>,
    passed: bool,
}

impl Outcome {
    fn new() -> Self {
        Self { files: Vec::new(), checks: Vec::new(), summary: Vec::new(), passed: true }
    }
}

fn dispatch(config: &ExperimentConfig, task: Task, prefix: &str) -> Result<Outcome, Error> {
    match task {
        Task::Simulate => simulate(config, prefix),
        Task::Solve => solve(config, prefix),
        Task::Verify => verify(config, prefix),
        Task::Search => search(config, prefix),
    }
}

fn create(path: &Path) -> Result<BufWriter<File>, Error> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io(format!("runner: {}: {e}", dir.display())))?;
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::Io(format!("runner: {}: {e}", path.display())))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<BufWriter<File>>, Error> {
    Ok(csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(create(path)?))
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(format!("runner: csv output failed: {e}"))
}

fn write_manifest(path: &Path, config: &ExperimentConfig, task: Task, id: &str, out: &Outcome) -> Result<(), Error> {
    let mut w = csv_writer(path)?;
    let mut row = |k: &str, v: &str| w.write_record([k, v]).map_err(csv_err);
    row("key", "value")?;
    row("run_id", id)?;
    row("task", &task.to_string())?;
    row("utility", config.utility.kind())?;
    row("n_paths", &config.simulation.n_paths.to_string())?;
    row("seed", &config.simulation.seed.to_string())?;
    row("n_steps", &config.grid.n_steps().to_string())?;
    for d in &config.defaults {
        row("default", d)?;
    }
    for s in &out.summary {
        row("summary", s)?;
    }
    for f in &out.files {
        row("file", &f.display().to_string())?;
    }
    row("passed", &out.passed.to_string())?;
    w.flush().map_err(|e| Error::Io(format!("runner: {e}")))
}

fn noise(config: &ExperimentConfig, seed: u64) -> Result<NoisePathSet, Error> {
    let (m, g, n) = (&config.model, &config.grid, config.simulation.n_paths);
    Ok(if config.simulation.antithetic {
        sample_noise_antithetic(m, g, seed, n)?
    } else {
        sample_noise(m, g, seed, n)?
    })
}

fn missing(key: &str, task: Task) -> Error {
    Error::Config(ConfigError { errors: vec![format!("task.{key}: required by the {task} task")] })
}

/// The configured constant control, or the closed-form optimum.
fn configured_control(config: &ExperimentConfig, task: Task) -> Result<Control, Error> {
    let values = match &config.task.policy {
        Some(p) => p.clone(),
        None => match closed_form_policy(&config.utility, &config.model) {
            Ok(cf) => cf.values().to_vec(),
            Err(_) => return Err(missing("policy", task)),
        },
    };
    Ok(match config.task.control {
        ControlKind::Weights => Control::Weights(StoppedPolicy::new(PortfolioPolicy(ControlLaw::constant(&values)), config.task.threshold)?),
        ControlKind::Dollars => Control::Dollars(DollarPolicy(ControlLaw::constant(&values))),
    })
}

fn simulate(config: &ExperimentConfig, prefix: &str) -> Result<Outcome, Error> {
    let noise = noise(config, config.simulation.seed)?;
    let control = configured_control(config, Task::Simulate)?;
    let paths = match &control {
        Control::Weights(p) => simulate_wealth_weights(&config.model, &config.grid, &noise, p, config.x0)?,
        Control::Dollars(p) => simulate_wealth_dollars(&config.model, &config.grid, &noise, p, config.x0)?,
    };
    let path = PathBuf::from(format!("{prefix}_wealth.csv"));
    paths.write_csv(&config.grid, create(&path)?)?;
    let n = paths.n_paths;
    let mean_terminal = (0..n).map(|i| *paths.wealth_of(i).last().unwrap_or(&f64::NAN)).sum::<f64>() / n as f64;
    let stopped = paths.stop_step.iter().filter(|s| s.is_some()).count();
    let mut out = Outcome::new();
    out.summary.push(format!("mean_terminal_wealth = {mean_terminal}"));
    out.summary.push(format!("stopped_paths = {stopped}"));
    out.files.push(path);
    Ok(out)
}

/// The optimal BSDE solution for log or power utility in the configured mode.
fn scale_free_solution(config: &ExperimentConfig, noise: &NoisePathSet) -> Result<BsdeSolution, Error> {
    let (u, m, g) = (&config.utility, &config.model, &config.grid);
    Ok(match config.task.bsde_mode {
        BsdeMode::RegressionMc => solve_bsde_regression(u, m, g, noise, config.task.regression_degree)?,
        _ => solve_bsde_deterministic(u, m, g)?,
    })
}

fn gamma_of(u: &UtilitySpec) -> Option<f64> {
    match u {
        UtilitySpec::Exponential { gamma } => Some(*gamma),
        _ => None,
    }
}

fn solve(config: &ExperimentConfig, prefix: &str) -> Result<Outcome, Error> {
    let noise = noise(config, config.simulation.seed)?;
    let validation = noise_for_validation(config)?;
    let mut out = Outcome::new();
    let (result, extra) = match gamma_of(&config.utility) {
        Some(gamma) => {
            let sol = solve_fbsde_exponential(&config.model, &config.grid, &noise, gamma, config.x0, config.task.picard_iters, config.task.picard_tol)?;
            let extra = vec![
                format!("picard_iterations = {}", sol.iterations),
                format!("picard_final_change = {}", sol.history.last().copied().unwrap_or(0.0)),
                format!("transform_gap = {}", transform_gap(&sol, &config.model)),
            ];
            (sol.result, extra)
        }
        None => {
            let sol = scale_free_solution(config, &noise)?;
            (optimal_policy(&config.utility, &config.model, &config.grid, sol, &validation, config.x0)?, Vec::new())
        }
    };
    out.summary.push(format!("mode = {}", result.solution.mode));
    out.summary.push(format!("stationarity_residual = {}", result.residual));
    out.summary.extend(extra);

    let bsde_path = PathBuf::from(format!("{prefix}_bsde.csv"));
    let mut w = csv_writer(&bsde_path)?;
    let n = config.model.n_assets();
    let mut header = vec!["t".to_string(), "Y".to_string()];
    header.extend((1..=n).map(|a| format!("sigma_{a}")));
    header.push("mode".into());
    w.write_record(&header).map_err(csv_err)?;
    let sol = &result.solution;
    for k in 0..config.grid.n_nodes() {
        let mut row = vec![config.grid.t(k).to_string(), sol.mean_y(k).to_string()];
        row.extend(sol.mean_sigma(k).iter().map(|s| s.to_string()));
        row.push(sol.mode.to_string());
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::Io(format!("runner: {e}")))?;
    out.files.push(bsde_path);

    let policy_path = PathBuf::from(format!("{prefix}_policy.csv"));
    let mut w = csv_writer(&policy_path)?;
    let unit = match result.policy {
        Control::Weights(_) => "pi",
        Control::Dollars(_) => "dollars",
    };
    let mut header = vec!["t".to_string(), "regime".to_string(), "wealth".to_string()];
    header.extend((1..=n).map(|a| format!("{unit}_{a}")));
    w.write_record(&header).map_err(csv_err)?;
    let law = result.policy.law();
    let mut buf = vec![0.0; n];
    for k in 0..config.grid.n_steps() {
        for regime in 0..config.model.n_regimes() {
            for &wealth in &config.task.policy_wealth {
                law.emit(&PolicyInput { step: k, t: config.grid.t(k), wealth, regime }, &mut buf);
                let mut row = vec![config.grid.t(k).to_string(), regime.to_string(), wealth.to_string()];
                row.extend(buf.iter().map(|v| v.to_string()));
                w.write_record(&row).map_err(csv_err)?;
            }
        }
    }
    w.flush().map_err(|e| Error::Io(format!("runner: {e}")))?;
    out.files.push(policy_path);
    Ok(out)
}

fn noise_for_validation(config: &ExperimentConfig) -> Result<NoisePathSet, Error> {
    noise(config, config.simulation.seed.wrapping_add(VALIDATION_SEED_OFFSET))
}

fn verify(config: &ExperimentConfig, prefix: &str) -> Result<Outcome, Error> {
    let noise = noise(config, config.simulation.seed)?;
    let scn = Scenario::new(&config.model, config.grid, &noise)?;
    let direction = ControlLaw::constant(&config.task.direction);
    let mut checks = Vec::new();
    match gamma_of(&config.utility) {
        None => verify_scale_free(config, &scn, &noise, &direction, &mut checks)?,
        Some(gamma) => verify_exponential(config, &scn, &noise, gamma, &direction, &mut checks)?,
    }
    let path = PathBuf::from(format!("{prefix}_verify.csv"));
    let mut w = csv_writer(&path)?;
    w.write_record(["statistic", "value", "std_error", "threshold", "pass"]).map_err(csv_err)?;
    for c in &checks {
        w.write_record([c.statistic.clone(), c.value.to_string(), c.std_error.to_string(), c.threshold.to_string(), c.pass.to_string()])
            .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::Io(format!("runner: {e}")))?;
    let mut out = Outcome::new();
    out.passed = checks.iter().all(|c| c.pass);
    out.summary.push(format!("checks_passed = {}/{}", checks.iter().filter(|c| c.pass).count(), checks.len()));
    out.checks = checks;
    out.files.push(path);
    Ok(out)
}

fn verify_scale_free(config: &ExperimentConfig, scn: &Scenario, noise: &NoisePathSet, direction: &ControlLaw, checks: &mut Vec<Check>) -> Result<(), Error> {
    let (u, m, g, x0) = (&config.utility, &config.model, &config.grid, config.x0);
    if config.task.control != ControlKind::Weights {
        return Err(Error::Config(ConfigError { errors: vec![format!("task.control: {} utility is verified in portfolio weights", u.kind())] }));
    }
    let control = configured_control(config, Task::Verify)?;
    let Control::Weights(policy) = &control else { unreachable!("weights requested") };
    let bsde = solve_bsde_for_policy(u, m, g, &policy.base.0)?;

    let fd = gateaux_fd(scn, &control, direction, u, x0, &config.task.epsilon_ladder)?;
    let formula = gateaux_formula(scn, policy, direction, u, x0, &bsde)?;
    let gap_se = combined_std_error(&fd.estimate(), &formula.estimate());
    let gap = fd.value - formula.value;
    let bound = se_bound(SE_MULTIPLE, gap_se);
    checks.push(Check::new("gateaux_two_route_gap", gap, gap_se, bound, gap.abs() <= bound));

    if config.task.policy.is_none() {
        for (name, e) in [("gateaux_fd_at_optimum", &fd), ("gateaux_formula_at_optimum", &formula)] {
            let bound = se_bound(SE_MULTIPLE, e.std_error);
            checks.push(Check::new(name, e.value, e.std_error, bound, e.value.abs() <= bound));
        }
    }

    match expansion_order_check(scn, policy, direction, u, x0, &config.task.epsilon_ladder) {
        Ok(e) => {
            let slope = e.slope.unwrap_or(f64::INFINITY);
            checks.push(Check::new("expansion_slope", slope, 0.0, MIN_EXPANSION_SLOPE, slope >= MIN_EXPANSION_SLOPE));
        }
        Err(VariationalError::NoiseFloor { .. }) => checks.push(Check::new("expansion_slope", f64::NAN, 0.0, MIN_EXPANSION_SLOPE, false)),
        Err(e) => return Err(e.into()),
    }

    let mart = mhat_martingale_check(scn, policy, u, x0, &bsde)?;
    checks.push(Check::new("mhat_max_deviation_se", mart.max_deviation_se, 0.0, SE_MULTIPLE, mart.max_deviation_se <= SE_MULTIPLE));

    let optimal = scale_free_solution(config, noise)?;
    checks.push(Check::new("bsde_terminal_y", if optimal.terminal_is_one() { 1.0 } else { 0.0 }, 0.0, 1.0, optimal.terminal_is_one()));
    let validation = noise_for_validation(config)?;
    let tol = config.task.residual_tolerance;
    let opt = optimal_policy(u, m, g, optimal, &validation, x0)?;
    checks.push(Check::new("stationarity_residual", opt.residual, 0.0, tol, opt.residual < tol));
    Ok(())
}

fn verify_exponential(
    config: &ExperimentConfig,
    scn: &Scenario,
    noise: &NoisePathSet,
    gamma: f64,
    direction: &ControlLaw,
    checks: &mut Vec<Check>,
) -> Result<(), Error> {
    let (u, m, g, x0) = (&config.utility, &config.model, &config.grid, config.x0);
    if config.task.control != ControlKind::Dollars {
        return Err(Error::Config(ConfigError { errors: vec!["task.control: exponential utility is verified in dollar amounts".into()] }));
    }
    let sol = solve_fbsde_exponential(m, g, noise, gamma, x0, config.task.picard_iters, config.task.picard_tol)?;
    let change = sol.history.last().copied().unwrap_or(0.0);
    checks.push(Check::new("picard_sigma_change", change, 0.0, config.task.picard_tol, change < config.task.picard_tol));
    checks.push(Check::new("picard_iterations", sol.iterations as f64, 0.0, config.task.picard_iters as f64, sol.iterations <= config.task.picard_iters));
    let tol = config.task.residual_tolerance;
    checks.push(Check::new("stationarity_residual", sol.result.residual, 0.0, tol, sol.result.residual < tol));
    let tg = transform_gap(&sol, m);
    checks.push(Check::new("transform_gap", tg, 0.0, 1e-9, tg < 1e-9));
    checks.push(Check::new(
        "bsde_terminal_y",
        if sol.result.solution.terminal_is_one() { 1.0 } else { 0.0 },
        0.0,
        1.0,
        sol.result.solution.terminal_is_one(),
    ));

    let control = match &config.task.policy {
        Some(p) => Control::dollars(p),
        None => sol.result.policy.clone(),
    };
    let fd = gateaux_fd(scn, &control, direction, u, x0, &config.task.epsilon_ladder)?;
    if config.task.policy.is_none() {
        let bound = se_bound(SE_MULTIPLE, fd.std_error);
        checks.push(Check::new("gateaux_fd_at_optimum", fd.value, fd.std_error, bound, fd.value.abs() <= bound));
    } else {
        checks.push(Check::new("gateaux_fd", fd.value, fd.std_error, f64::NAN, true));
    }

    if let (ControlLaw::Constant(c), ControlLaw::Constant(d)) = (control.law(), direction) {
        let a: Vec<f64> = c.iter().zip(d).map(|(c, d)| c - d).collect();
        let b: Vec<f64> = c.iter().zip(d).map(|(c, d)| c + d).collect();
        let cc = concavity_witness(scn, u, &a, &b, x0)?;
        let bound = -se_bound(2.0, cc.gap.std_error);
        checks.push(Check::new("concavity_midpoint_gap", cc.gap.mean, cc.gap.std_error, bound, cc.gap.mean >= bound));
    }
    Ok(())
}

fn search(config: &ExperimentConfig, prefix: &str) -> Result<Outcome, Error> {
    let t = &config.task;
    let lower = t.search_lower.clone().ok_or_else(|| missing("search_lower", Task::Search))?;
    let upper = t.search_upper.clone().ok_or_else(|| missing("search_upper", Task::Search))?;
    let step = t.search_step.ok_or_else(|| missing("search_step", Task::Search))?;
    let spec = SearchSpec {
        family: match t.control {
            ControlKind::Weights => PolicyFamily::ConstantWeights,
            ControlKind::Dollars => PolicyFamily::ConstantDollars,
        },
        lower,
        upper,
        step,
        n_paths: config.simulation.n_paths,
        seed: config.simulation.seed,
        crn: t.crn,
        antithetic: config.simulation.antithetic,
        threshold: t.threshold,
    };
    let res = grid_search(&config.utility, &config.model, &config.grid, &spec, config.x0)?;
    let path = PathBuf::from(format!("{prefix}_search.csv"));
    res.write_csv(create(&path)?).map_err(csv_err)?;
    let mut out = Outcome::new();
    out.summary.push(format!("argmax = {:?}", res.best().coords));
    out.summary.push(format!("value = {}", res.best().estimate.mean));
    out.summary.push(format!("runner_up_gap = {} (se {})", res.gap.mean, res.gap.std_error));
    out.summary.push(format!("inconclusive = {}", res.inconclusive));
    out.files.push(path);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::parse_config;

    fn config(extra_sim: &str, task: &str, utility: &str) -> ExperimentConfig {
        let text = format!(
            "[market]\nn_assets = 1\nr = 0.02\nalpha = [0.08]\nsigma = [[0.04]]\nx0 = 1.0\nT = 1.0\nn_steps = 50\nbound_M = 1.0\neps = 0.01\nC = 0.1\n\n\
             [utility]\n{utility}\n\n[simulation]\nn_paths = 10\nseed = 3\n{extra_sim}\n\n[task]\n{task}\n"
        );
        parse_config(&text).unwrap()
    }

    #[test]
    fn task_names_round_trip() {
        for t in [Task::Simulate, Task::Solve, Task::Verify, Task::Search] {
            assert_eq!(t.to_string().parse::<Task>().unwrap(), t);
        }
        assert!("plot".parse::<Task>().is_err());
    }

    #[test]
    fn run_id_depends_on_text() {
        let a = config("", "", "kind = \"log\"");
        let b = config("", "threshold = 2.0", "kind = \"log\"");
        assert_eq!(run_id(&a).len(), 40);
        assert_ne!(run_id(&a), run_id(&b));
        assert_eq!(run_id(&a), run_id(&a.clone()));
    }

    #[test]
    fn simulate_writes_all_rows() {
        let dir = tempfile::tempdir().unwrap();
        let prefix = dir.path().join("sim").display().to_string();
        let c = config("", "", "kind = \"log\"");
        let r = run(&c, Task::Simulate, Some(&prefix)).unwrap();
        assert!(r.passed);
        let text = std::fs::read_to_string(&r.files[0]).unwrap();
        assert_eq!(text.lines().count(), 1 + 10 * 51);
    }

    #[test]
    fn search_needs_a_box() {
        let dir = tempfile::tempdir().unwrap();
        let prefix = dir.path().join("s").display().to_string();
        let c = config("", "", "kind = \"log\"");
        assert!(matches!(run(&c, Task::Search, Some(&prefix)), Err(Error::Config(_))));
    }
}
