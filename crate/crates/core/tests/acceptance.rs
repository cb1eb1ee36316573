//! Acceptance suite on the desk market (n = 1, r = 0.02, alpha = 0.08,
//! Sigma = 0.04, T = 1, x0 = 1, dt = 1/250). Prints one PASS/FAIL line per
//! criterion and exits non-zero if any fails.

mod common;

use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use merton_lab::config::parse_config;
use merton_lab::fbsde::{
    optimal_policy, solve_bsde_deterministic, solve_bsde_for_policy, solve_bsde_regression, solve_fbsde_exponential, stationarity_residual,
};
use merton_lab::market::{build_market, sample_noise, sample_noise_antithetic, MarketConfig, MarketModel, Regime, RegimeChain, TimeGrid};
use merton_lab::oracle::{closed_form_policy, concavity_witness, grid_search, ClosedForm, PolicyFamily, SearchSpec};
use merton_lab::runner::{run, Task};
use merton_lab::stats::combined_std_error;
use merton_lab::utility::UtilitySpec;
use merton_lab::variational::{expansion_order_check, gateaux_fd, gateaux_formula, DEFAULT_LADDER, ROUNDOFF_FLOOR};
use merton_lab::wealth::{simulate_wealth_dollars, simulate_wealth_weights, Control, ControlLaw, DollarPolicy, PortfolioPolicy, Scenario, StoppedPolicy, DEFAULT_THRESHOLD};

const N_STEPS: usize = 250;
const X0: f64 = 1.0;
const THETA: f64 = 0.06;
const SIGMA: f64 = 0.04;

type Outcome = Result<(bool, String), String>;
type Criterion = (&'static str, fn() -> Outcome);

fn grid() -> TimeGrid {
    TimeGrid::new(1.0, N_STEPS).unwrap()
}

fn power() -> UtilitySpec {
    UtilitySpec::power(0.5).unwrap()
}

fn weights(pi: f64) -> StoppedPolicy {
    PortfolioPolicy(ControlLaw::constant(&[pi])).into()
}

/// `|value - target| <= k SE` up to floating-point roundoff.
fn within(value: f64, target: f64, k: f64, se: f64) -> bool {
    (value - target).abs() <= k * se + ROUNDOFF_FLOOR
}

fn search_spec(family: PolicyFamily, lower: f64, upper: f64, step: f64, n_paths: usize, seed: u64) -> SearchSpec {
    SearchSpec {
        family,
        lower: vec![lower],
        upper: vec![upper],
        step,
        n_paths,
        seed,
        crn: true,
        antithetic: true,
        threshold: DEFAULT_THRESHOLD,
    }
}

fn growth_optimal() -> Outcome {
    let start = Instant::now();
    let m = common::desk();
    let spec = search_spec(PolicyFamily::ConstantWeights, 0.0, 3.0, 0.05, 10_000, 101);
    let r = grid_search(&UtilitySpec::Log, &m, &grid(), &spec, X0).map_err(|e| e.to_string())?;
    let cf = closed_form_policy(&UtilitySpec::Log, &m).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    let argmax = r.best().coords[0];
    let pass = (argmax - 1.5).abs() <= 0.05 + 1e-9 && cf == ClosedForm::Weights(vec![1.5]) && secs < 60.0;
    Ok((pass, format!("argmax {argmax}, closed form {:?}, {secs:.1}s (limit 60s)", cf.values())))
}

fn power_recovery() -> Outcome {
    let start = Instant::now();
    let m = common::desk();
    let u = power();
    let spec = search_spec(PolicyFamily::ConstantWeights, 0.0, 5.0, 0.1, 100_000, 202);
    let r = grid_search(&u, &m, &grid(), &spec, X0).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    let argmax = r.best().coords[0];
    // log X_T ~ N((r + pi theta - pi^2 Sigma / 2) T, pi^2 Sigma T) for constant pi
    let at = r.points.iter().min_by(|a, b| (a.coords[0] - 3.0).abs().total_cmp(&(b.coords[0] - 3.0).abs())).unwrap();
    let pi = at.coords[0];
    let (mu, var) = (0.02 + pi * THETA - 0.5 * pi * pi * SIGMA, pi * pi * SIGMA);
    let analytic = (0.5 * mu + 0.125 * var).exp() / 0.5;
    let e = at.estimate;
    let pass = (argmax - 3.0).abs() <= 0.1 + 1e-9 && within(e.mean, analytic, 3.0, e.std_error) && secs < 300.0;
    Ok((
        pass,
        format!(
            "argmax {argmax} (inconclusive: {}), MC {:.6} vs analytic {analytic:.6} (se {:.2e}), {secs:.1}s (limit 300s)",
            r.inconclusive, e.mean, e.std_error
        ),
    ))
}

fn exponential_recovery() -> Outcome {
    let m = common::market(0.0, 0.06);
    let u = UtilitySpec::exponential(2.0).unwrap();
    let spec = search_spec(PolicyFamily::ConstantDollars, 0.0, 2.0, 0.05, 100_000, 303);
    let r = grid_search(&u, &m, &grid(), &spec, X0).map_err(|e| e.to_string())?;
    let argmax = r.best().coords[0];
    let noise = sample_noise_antithetic(&m, &grid(), 304, 10_000).map_err(|e| e.to_string())?;
    let sol = solve_fbsde_exponential(&m, &grid(), &noise, 2.0, X0, 10, 1e-3).map_err(|e| e.to_string())?;
    let change = sol.history.last().copied().unwrap_or(0.0);
    let max_sigma = (0..=N_STEPS).map(|k| sol.result.solution.mean_sigma(k)[0].abs()).fold(0.0, f64::max);
    let pass = (argmax - 0.75).abs() <= 0.05 + 1e-9 && sol.iterations <= 10 && change < 1e-3 && max_sigma < 1e-3 && sol.result.residual < 1e-3;
    Ok((
        pass,
        format!(
            "argmax {argmax} (inconclusive: {}), Picard {} iteration(s), last sigma change {change:.2e}, max |sigma| {max_sigma:.2e}, stationarity {:.2e}",
            r.inconclusive, sol.iterations, sol.result.residual
        ),
    ))
}

fn gateaux_two_routes() -> Outcome {
    let m = common::desk();
    let g = grid();
    let noise = sample_noise_antithetic(&m, &g, 404, 100_000).map_err(|e| e.to_string())?;
    let scn = Scenario::new(&m, g, &noise).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let pairs: Vec<(f64, f64)> = (0..5).map(|_| (rng.random_range(0.5..2.5), if rng.random_bool(0.5) { 1.0 } else { -1.0 })).collect();
    let mut failures = Vec::new();
    let mut worst = 0.0f64;
    for (name, u, optimum) in [("log", UtilitySpec::Log, 1.5), ("power", power(), 3.0)] {
        let mut cases: Vec<(f64, f64, bool)> = pairs.iter().map(|&(p, w)| (p, w, false)).collect();
        cases.push((optimum, 1.0, true));
        for (pi, w, at_optimum) in cases {
            let policy = weights(pi);
            let dir = ControlLaw::constant(&[w]);
            let bsde = solve_bsde_for_policy(&u, &m, &g, &policy.base.0).map_err(|e| e.to_string())?;
            let fd = gateaux_fd(&scn, &Control::Weights(policy.clone()), &dir, &u, X0, &DEFAULT_LADDER).map_err(|e| e.to_string())?;
            let f = gateaux_formula(&scn, &policy, &dir, &u, X0, &bsde).map_err(|e| e.to_string())?;
            let se = combined_std_error(&fd.estimate(), &f.estimate());
            let excess = ((fd.value - f.value).abs() - ROUNDOFF_FLOOR).max(0.0);
            if excess > 0.0 {
                worst = worst.max(excess / se);
            }
            if !within(fd.value, f.value, 3.0, se) {
                failures.push(format!("{name} pi={pi:.3} w={w}: fd {} vs formula {} (se {se:.2e})", fd.value, f.value));
            }
            if at_optimum && !(within(fd.value, 0.0, 3.0, fd.std_error) && within(f.value, 0.0, 3.0, f.std_error)) {
                failures.push(format!("{name} at optimum: fd {} formula {}", fd.value, f.value));
            }
            if name == "log" {
                let analytic = (THETA - SIGMA * pi) * w;
                if !(within(fd.value, analytic, 3.0, fd.std_error) && within(f.value, analytic, 3.0, f.std_error)) {
                    failures.push(format!("log pi={pi:.3}: analytic {analytic} vs fd {} formula {}", fd.value, f.value));
                }
            }
        }
    }
    let pass = failures.is_empty();
    let detail = if pass {
        format!("5 pairs x 2 utilities plus optima agree; worst two-route gap beyond roundoff {worst:.2} SE")
    } else {
        failures.join("; ")
    };
    Ok((pass, detail))
}

fn expansion_order() -> Outcome {
    let m = common::desk();
    let g = grid();
    let noise = sample_noise_antithetic(&m, &g, 505, 10_000).map_err(|e| e.to_string())?;
    let scn = Scenario::new(&m, g, &noise).map_err(|e| e.to_string())?;
    let ladder = [0.1, 0.05, 0.025];
    let dir = ControlLaw::constant(&[1.0]);
    let log = expansion_order_check(&scn, &weights(1.0), &dir, &UtilitySpec::Log, X0, &ladder).map_err(|e| e.to_string())?;
    let pow = expansion_order_check(&scn, &weights(2.0), &dir, &power(), X0, &ladder).map_err(|e| e.to_string())?;
    let (ls, ps) = (log.slope.unwrap_or(f64::NAN), pow.slope.unwrap_or(f64::NAN));
    let pass = ls >= 1.5 && ps >= 1.5 && (ls - 2.0).abs() <= 0.05;
    Ok((pass, format!("log slope {ls:.4} (analytic 2), power slope {ps:.4}")))
}

fn degenerate_chain_market() -> MarketModel {
    let cfg = MarketConfig::constant(0.02, &[0.08], &[SIGMA], 1.0, common::BOUNDS)
        .with_chain(vec![Regime::constant(0.02, &[0.08], &[SIGMA])], RegimeChain::degenerate(7));
    build_market(cfg).unwrap()
}

fn bsde_solutions() -> Outcome {
    let m = common::desk();
    let g = grid();
    let log = solve_bsde_deterministic(&UtilitySpec::Log, &m, &g).map_err(|e| e.to_string())?;
    let log_exact = (0..=N_STEPS).all(|k| log.y(0, k) == 1.0 && log.sigma(0, k)[0] == 0.0);
    let pow = solve_bsde_deterministic(&power(), &m, &g).map_err(|e| e.to_string())?;
    let target = 0.055f64.exp();
    let ode_gap = (pow.y(0, 0) - target).abs();

    let dm = degenerate_chain_market();
    let noise = sample_noise(&dm, &g, 606, 100_000).map_err(|e| e.to_string())?;
    let reg = solve_bsde_regression(&power(), &dm, &g, &noise, 3).map_err(|e| e.to_string())?;
    let reg_rel = (reg.mean_y(0) / target - 1.0).abs();
    drop(noise);

    let em = common::market(0.0, 0.06);
    let en = sample_noise_antithetic(&em, &g, 607, 2_000).map_err(|e| e.to_string())?;
    let pic = solve_fbsde_exponential(&em, &g, &en, 2.0, X0, 10, 1e-6).map_err(|e| e.to_string())?;
    let terminal = [&log, &pow, &reg, &pic.result.solution].iter().all(|s| s.terminal_is_one());
    let pass = log_exact && ode_gap < 1e-6 && reg_rel < 1e-3 && terminal;
    Ok((
        pass,
        format!("log exact {log_exact}; power ODE |Y0 - e^0.055| {ode_gap:.2e}; regression rel err {reg_rel:.2e}; Y_T = 1 in all modes {terminal}"),
    ))
}

fn stationarity() -> Outcome {
    let m = common::desk();
    let g = grid();
    let validation = sample_noise(&m, &g, 707, 1_000).map_err(|e| e.to_string())?;
    let scn = Scenario::new(&m, g, &validation).map_err(|e| e.to_string())?;
    let mut parts = Vec::new();
    let mut pass = true;
    for (name, u) in [("log", UtilitySpec::Log), ("power", power())] {
        let sol = solve_bsde_deterministic(&u, &m, &g).map_err(|e| e.to_string())?;
        let opt = optimal_policy(&u, &m, &g, sol, &validation, X0).map_err(|e| e.to_string())?;
        let star = closed_form_policy(&u, &m).map_err(|e| e.to_string())?.values()[0];
        let wrong = ControlLaw::constant(&[2.0 * star]);
        let wrong_sol = solve_bsde_for_policy(&u, &m, &g, &wrong).map_err(|e| e.to_string())?;
        let off = stationarity_residual(&scn, &u, &Control::weights(&[2.0 * star]), &wrong_sol, X0).map_err(|e| e.to_string())?;
        pass &= opt.residual < 1e-8 && off > 1e-3;
        parts.push(format!("{name}: at optimum {:.2e}, at 2x {off:.2e}", opt.residual));
    }
    Ok((pass, parts.join("; ")))
}

fn linearity() -> Outcome {
    let m = common::desk();
    let g = grid();
    let noise = sample_noise(&m, &g, 808, 100).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (p1, p2): (f64, f64) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
    let c = 0.3;
    let sim = |p: f64| simulate_wealth_dollars(&m, &g, &noise, &DollarPolicy(ControlLaw::constant(&[p])), X0);
    let (a, b, mix) = (sim(p1).map_err(|e| e.to_string())?, sim(p2).map_err(|e| e.to_string())?, sim(c * p1 + (1.0 - c) * p2).map_err(|e| e.to_string())?);
    let scale = a.wealth.iter().chain(&b.wealth).chain(&mix.wealth).fold(0.0f64, |s, x| s.max(x.abs()));
    let worst = (0..mix.wealth.len())
        .map(|k| (mix.wealth[k] - c * a.wealth[k] - (1.0 - c) * b.wealth[k]).abs())
        .fold(0.0, f64::max);
    Ok((worst < 1e-12 * scale, format!("pi1 {p1:.4}, pi2 {p2:.4}: max gap {worst:.2e} vs bound {:.2e}", 1e-12 * scale)))
}

fn concavity() -> Outcome {
    let m = common::desk();
    let g = grid();
    let noise = sample_noise_antithetic(&m, &g, 909, 100_000).map_err(|e| e.to_string())?;
    let scn = Scenario::new(&m, g, &noise).map_err(|e| e.to_string())?;
    let u = UtilitySpec::exponential(2.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut pass = true;
    let mut parts = Vec::new();
    for _ in 0..3 {
        let (a, b): (f64, f64) = (rng.random_range(-1.0..3.0), rng.random_range(-1.0..3.0));
        let c = concavity_witness(&scn, &u, &[a], &[b], X0).map_err(|e| e.to_string())?;
        let ok = c.gap.mean >= -(2.0 * c.gap.std_error + ROUNDOFF_FLOOR);
        pass &= ok;
        parts.push(format!("[{a:.3}, {b:.3}] gap {:.3e} (se {:.1e})", c.gap.mean, c.gap.std_error));
    }
    Ok((pass, parts.join("; ")))
}

fn k_stopping() -> Outcome {
    let m = common::desk();
    let g = grid();
    let noise = sample_noise(&m, &g, 1010, 1_000).map_err(|e| e.to_string())?;
    let policy = StoppedPolicy::new(PortfolioPolicy(ControlLaw::constant(&[1.5])), 1.1).map_err(|e| e.to_string())?;
    let w = simulate_wealth_weights(&m, &g, &noise, &policy, X0).map_err(|e| e.to_string())?;
    let growth = (0.02 * g.dt()).exp();
    let mut stopped = 0;
    let mut weights_zero = true;
    let mut worst: f64 = 0.0;
    for i in 0..w.n_paths {
        let Some(tau) = w.stop_step[i] else { continue };
        stopped += 1;
        let x = w.wealth_of(i);
        for k in tau..N_STEPS {
            weights_zero &= w.control_at(i, k)[0] == 0.0;
            worst = worst.max((x[k + 1] / x[k] - growth).abs());
        }
    }
    let pass = stopped > 0 && weights_zero && worst < 1e-12;
    Ok((pass, format!("{stopped}/{} paths stopped; post-stop weights zero {weights_zero}; max ratio error {worst:.2e}", w.n_paths)))
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let text = common::DESK_TOML.replace("kind = \"log\"", "kind = \"power\"\neta = 0.5");
    let config = parse_config(&text).map_err(|e| e.to_string())?;
    let prefix = dir.path().join("det").display().to_string();
    let mut snapshots = Vec::new();
    for _ in 0..2 {
        let r = run(&config, Task::Verify, Some(&prefix)).map_err(|e| e.to_string())?;
        let files: Vec<Vec<u8>> = r.files.iter().map(std::fs::read).collect::<Result<_, _>>().map_err(|e| e.to_string())?;
        snapshots.push(files);
    }
    let threaded = parse_config(&text.replace("seed = 42", "seed = 42\nworkers = 3")).map_err(|e| e.to_string())?;
    let other = dir.path().join("threads").display().to_string();
    let r = run(&threaded, Task::Verify, Some(&other)).map_err(|e| e.to_string())?;
    let verify_threads = std::fs::read(&r.files[0]).map_err(|e| e.to_string())?;
    let same = snapshots[0] == snapshots[1];
    let same_threads = verify_threads == snapshots[0][0];
    Ok((same && same_threads, format!("rerun identical {same}; 3 workers identical {same_threads}")))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 11] = [
        ("growth-optimal recovery", growth_optimal),
        ("power-utility recovery", power_recovery),
        ("exponential r=0 recovery", exponential_recovery),
        ("Gateaux two-route agreement", gateaux_two_routes),
        ("first-order expansion", expansion_order),
        ("BSDE solutions", bsde_solutions),
        ("stationarity residual", stationarity),
        ("pathwise linearity of dollar wealth", linearity),
        ("concavity witness", concavity),
        ("K-stopping", k_stopping),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let (pass, detail) = match check() {
            Ok(r) => r,
            Err(e) => (false, format!("error: {e}")),
        };
        if !pass {
            failed += 1;
        }
        println!("{} {:>2} {name}: {detail} [{:.1}s]", if pass { "PASS" } else { "FAIL" }, i + 1, start.elapsed().as_secs_f64());
    }
    println!("acceptance: {}/{} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
