//! Performance criterion and its Gateaux derivative.
//!
//! Along a weight-controlled path with `F_k = U^(k)(X) X^k`:
//! `g = F1 theta + F2 Sigma pi`, `q = F1 + F2`,
//! `h = (F1 + F2)(r + pi'theta) + (F2 + F3/2) pi'Sigma pi`, and
//! `I^w_t = int_0^t w'(theta - Sigma pi) du + int_0^t w' dM`.
//! The derivative in direction `w` is estimated by central finite differences
//! under common random numbers and by the formula `E int w' Y (g + F1 Sigma sigma) dt`.

use rayon::prelude::*;
use thiserror::Error;

use crate::fbsde::{BsdeSolution, FbsdeError};
use crate::stats::{ols_slope, paired_difference, Estimate};
use crate::utility::{UtilityError, UtilitySpec};
use crate::wealth::{Control, ControlLaw, PolicyInput, Scenario, StepView, StoppedPolicy, WealthError};

pub const DEFAULT_LADDER: [f64; 4] = [0.1, 0.05, 0.025, 0.0125];
/// Node fractions at which the martingale check compares means.
pub const MARTINGALE_FRACTIONS: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];
/// Deviations below this are floating-point roundoff, not drift.
pub const ROUNDOFF_FLOOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum VariationalError {
    #[error(transparent)]
    Wealth(#[from] WealthError),
    #[error(transparent)]
    Fbsde(#[from] FbsdeError),
    #[error("variational: utility failed on path {path}: {source}")]
    Domain { path: usize, source: UtilityError },
    #[error("variational: epsilon ladder {0:?} must be non-empty, positive and strictly decreasing")]
    Ladder(Vec<f64>),
    #[error("variational: {0}")]
    Incompatible(String),
    #[error("variational: Monte Carlo noise floor reached; only {valid} rung(s) resolve the remainder")]
    NoiseFloor { valid: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GateauxMethod {
    FiniteDifference,
    Formula,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FdRung {
    pub epsilon: f64,
    pub estimate: Estimate,
    /// Richardson estimate of the truncation bias at this rung.
    pub bias: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GateauxEstimate {
    pub value: f64,
    pub std_error: f64,
    pub method: GateauxMethod,
    pub epsilon_ladder: Vec<f64>,
    pub rungs: Vec<FdRung>,
    /// Index of the reported rung (finite differences only).
    pub chosen: Option<usize>,
    pub warnings: Vec<String>,
}

impl GateauxEstimate {
    pub fn estimate(&self) -> Estimate {
        Estimate {
            mean: self.value,
            std_error: self.std_error,
            n: 0,
        }
    }

    fn exact_zero(method: GateauxMethod, ladder: &[f64]) -> Self {
        Self {
            value: 0.0,
            std_error: 0.0,
            method,
            epsilon_ladder: ladder.to_vec(),
            rungs: Vec::new(),
            chosen: None,
            warnings: Vec::new(),
        }
    }
}

fn utility_at(utility: &UtilitySpec, x: f64, path: usize) -> Result<f64, VariationalError> {
    utility.value(x).map_err(|source| VariationalError::Domain { path, source })
}

/// Per-path terminal utilities, `[control][path]`, all controls on the same noise.
pub fn utility_samples(scn: &Scenario, controls: &[Control], utility: &UtilitySpec, x0: f64) -> Result<Vec<Vec<f64>>, VariationalError> {
    for c in controls {
        scn.check_law(c.law())?;
    }
    let rows: Vec<Vec<f64>> = (0..scn.n_paths())
        .into_par_iter()
        .map(|i| {
            controls
                .iter()
                .map(|c| {
                    let end = scn.terminal(i, c, x0)?;
                    utility_at(utility, end.wealth, i)
                })
                .collect::<Result<Vec<f64>, VariationalError>>()
        })
        .collect::<Result<_, _>>()?;
    let mut out = vec![Vec::with_capacity(rows.len()); controls.len()];
    for row in rows {
        for (col, v) in out.iter_mut().zip(row) {
            col.push(v);
        }
    }
    Ok(out)
}

/// Monte Carlo estimate of `E[U(X_T)]`.
pub fn performance_criterion(scn: &Scenario, control: &Control, utility: &UtilitySpec, x0: f64) -> Result<Estimate, VariationalError> {
    Ok(evaluate_many(scn, std::slice::from_ref(control), utility, x0)?.remove(0))
}

/// `E[U(X_T)]` for several controls under common random numbers.
pub fn evaluate_many(scn: &Scenario, controls: &[Control], utility: &UtilitySpec, x0: f64) -> Result<Vec<Estimate>, VariationalError> {
    let pairing = scn.noise.pairing();
    Ok(utility_samples(scn, controls, utility, x0)?
        .iter()
        .map(|s| Estimate::from_samples(s, pairing))
        .collect())
}

fn check_ladder(ladder: &[f64]) -> Result<(), VariationalError> {
    let ok = !ladder.is_empty() && ladder.iter().all(|e| e.is_finite() && *e > 0.0) && ladder.windows(2).all(|w| w[1] < w[0]);
    if ok {
        Ok(())
    } else {
        Err(VariationalError::Ladder(ladder.to_vec()))
    }
}

/// Central differences `(H(pi + e w) - H(pi - e w)) / 2e` on every rung of
/// the ladder with shared noise. Reports the rung minimizing the estimated
/// `bias^2 + SE^2`, where the bias of rung `j` is `(4/3)|D_j - D_{j+1}|`.
pub fn gateaux_fd(
    scn: &Scenario,
    control: &Control,
    direction: &ControlLaw,
    utility: &UtilitySpec,
    x0: f64,
    ladder: &[f64],
) -> Result<GateauxEstimate, VariationalError> {
    check_ladder(ladder)?;
    if direction.is_zero() {
        return Ok(GateauxEstimate::exact_zero(GateauxMethod::FiniteDifference, ladder));
    }
    let controls: Vec<Control> = ladder
        .iter()
        .flat_map(|&e| [control.perturbed(direction, e), control.perturbed(direction, -e)])
        .collect();
    let samples = utility_samples(scn, &controls, utility, x0)?;
    let pairing = scn.noise.pairing();
    let estimates: Vec<Estimate> = ladder
        .iter()
        .enumerate()
        .map(|(j, &e)| {
            let d: Vec<f64> = samples[2 * j].iter().zip(&samples[2 * j + 1]).map(|(p, m)| (p - m) / (2.0 * e)).collect();
            Estimate::from_samples(&d, pairing)
        })
        .collect();
    let l = ladder.len();
    let mut bias = vec![0.0; l];
    for j in 0..l.saturating_sub(1) {
        bias[j] = 4.0 / 3.0 * (estimates[j].mean - estimates[j + 1].mean).abs();
    }
    if l >= 2 {
        bias[l - 1] = bias[l - 2] / 4.0;
    }
    let rungs: Vec<FdRung> = (0..l)
        .map(|j| FdRung {
            epsilon: ladder[j],
            estimate: estimates[j],
            bias: bias[j],
        })
        .collect();
    let score = |r: &FdRung| r.bias * r.bias + r.estimate.std_error * r.estimate.std_error;
    let chosen = (0..l).fold(0, |best, j| if score(&rungs[j]) < score(&rungs[best]) { j } else { best });
    let mut warnings = Vec::new();
    for r in &rungs {
        if l >= 2 && r.estimate.std_error > 0.0 && r.bias < r.estimate.std_error && r.epsilon < rungs[chosen].epsilon {
            warnings.push(format!("noise dominates at eps={}: se {:.3e} exceeds bias {:.3e}", r.epsilon, r.estimate.std_error, r.bias));
        }
    }
    Ok(GateauxEstimate {
        value: rungs[chosen].estimate.mean,
        std_error: rungs[chosen].estimate.std_error,
        method: GateauxMethod::FiniteDifference,
        epsilon_ladder: ladder.to_vec(),
        rungs,
        chosen: Some(chosen),
        warnings,
    })
}

fn check_solution(scn: &Scenario, bsde: &BsdeSolution) -> Result<(), VariationalError> {
    if bsde.grid.n_steps() != scn.grid.n_steps() || bsde.n_assets != scn.n_assets() {
        return Err(VariationalError::Incompatible("BSDE solution does not match the grid or market".into()));
    }
    if bsde.is_per_path() && bsde.n_paths != scn.n_paths() {
        return Err(VariationalError::Incompatible(format!(
            "BSDE solution has {} paths, noise set has {}",
            bsde.n_paths,
            scn.n_paths()
        )));
    }
    Ok(())
}

/// Runs a weight path and hands the visitor the step view together with
/// `(F1, F2, F3)` at the node, stopping at the first utility error.
fn visit_with_f<G>(scn: &Scenario, i: usize, policy: &StoppedPolicy, utility: &UtilitySpec, x0: f64, mut g: G) -> Result<crate::wealth::PathEnd, VariationalError>
where
    G: FnMut(&StepView, [f64; 3]),
{
    let mut err = None;
    let end = scn.weight_path(i, policy, x0, true, |v| {
        if err.is_some() {
            return;
        }
        match utility.evaluate(v.wealth) {
            Ok(d) => {
                let x = v.wealth;
                g(v, [d.d1 * x, d.d2 * x * x, d.d3 * x * x * x]);
            }
            Err(source) => err = Some(VariationalError::Domain { path: i, source }),
        }
    })?;
    match err {
        Some(e) => Err(e),
        None => Ok(end),
    }
}

fn f_at(utility: &UtilitySpec, x: f64, path: usize) -> Result<[f64; 3], VariationalError> {
    let d = utility.evaluate(x).map_err(|source| VariationalError::Domain { path, source })?;
    Ok([d.d1 * x, d.d2 * x * x, d.d3 * x * x * x])
}

/// `E sum_{k < T ^ tau} w_k' Y_k (g_k + F1_k Sigma_k sigma_k) dt` along the paths.
pub fn gateaux_formula(
    scn: &Scenario,
    policy: &StoppedPolicy,
    direction: &ControlLaw,
    utility: &UtilitySpec,
    x0: f64,
    bsde: &BsdeSolution,
) -> Result<GateauxEstimate, VariationalError> {
    check_solution(scn, bsde)?;
    scn.check_law(direction)?;
    if direction.is_zero() {
        return Ok(GateauxEstimate::exact_zero(GateauxMethod::Formula, &[]));
    }
    let na = scn.n_assets();
    let dt = scn.grid.dt();
    let samples: Vec<f64> = (0..scn.n_paths())
        .into_par_iter()
        .map(|i| {
            let mut w = vec![0.0; na];
            let mut sig = vec![0.0; na];
            let mut sv = vec![0.0; na];
            let mut pv = vec![0.0; na];
            let mut acc = 0.0;
            visit_with_f(scn, i, policy, utility, x0, |v, f| {
                if !v.active {
                    return;
                }
                let input = PolicyInput {
                    step: v.step,
                    t: v.t,
                    wealth: v.wealth,
                    regime: v.regime,
                };
                direction.emit(&input, &mut w);
                bsde.sigma_at(v.step, v.regime, v.wealth, &mut sig);
                v.coeffs.sigma_times(&sig, &mut sv);
                v.coeffs.sigma_times(v.control, &mut pv);
                let y = bsde.y(i, v.step);
                let mut s = 0.0;
                for a in 0..na {
                    let g = f[0] * v.coeffs.theta[a] + f[1] * pv[a];
                    s += w[a] * (g + f[0] * sv[a]);
                }
                acc += y * s * dt;
            })?;
            Ok(acc)
        })
        .collect::<Result<_, VariationalError>>()?;
    let e = Estimate::from_samples(&samples, scn.noise.pairing());
    Ok(GateauxEstimate {
        value: e.mean,
        std_error: e.std_error,
        method: GateauxMethod::Formula,
        epsilon_ladder: Vec::new(),
        rungs: Vec::new(),
        chosen: None,
        warnings: Vec::new(),
    })
}

/// Per-node processes along one path. Node arrays have `n_steps + 1`
/// entries; `g` and `h` are recorded at the steps before stopping and are zero after.
#[derive(Clone, Debug, PartialEq)]
pub struct PerturbationProcesses {
    pub f1: Vec<f64>,
    pub f2: Vec<f64>,
    pub f3: Vec<f64>,
    /// `[node][asset]`.
    pub g: Vec<f64>,
    pub h: Vec<f64>,
    pub q: Vec<f64>,
    /// Running `I^w`, accumulated step by step.
    pub i_omega: Vec<f64>,
    /// `I^w` from separate drift and noise sums.
    pub i_omega_direct: Vec<f64>,
    pub stop_step: Option<usize>,
}

/// `F^(k)`, `g`, `h`, `q` and `I^w` along path `path`.
pub fn perturbation_processes(
    scn: &Scenario,
    path: usize,
    policy: &StoppedPolicy,
    direction: &ControlLaw,
    utility: &UtilitySpec,
    x0: f64,
) -> Result<PerturbationProcesses, VariationalError> {
    scn.check_law(direction)?;
    let na = scn.n_assets();
    let n_nodes = scn.grid.n_nodes();
    let dt = scn.grid.dt();
    let mut out = PerturbationProcesses {
        f1: Vec::with_capacity(n_nodes),
        f2: Vec::with_capacity(n_nodes),
        f3: Vec::with_capacity(n_nodes),
        g: vec![0.0; n_nodes * na],
        h: vec![0.0; n_nodes],
        q: Vec::with_capacity(n_nodes),
        i_omega: vec![0.0; n_nodes],
        i_omega_direct: vec![0.0; n_nodes],
        stop_step: None,
    };
    let mut w = vec![0.0; na];
    let mut pv = vec![0.0; na];
    let mut running = 0.0;
    let mut drift_terms = Vec::with_capacity(n_nodes);
    let mut noise_terms = Vec::with_capacity(n_nodes);
    let end = visit_with_f(scn, path, policy, utility, x0, |v, f| {
        out.f1.push(f[0]);
        out.f2.push(f[1]);
        out.f3.push(f[2]);
        out.q.push(f[0] + f[1]);
        let k = v.step;
        let (mut drift, mut noise) = (0.0, 0.0);
        if v.active {
            let input = PolicyInput {
                step: k,
                t: v.t,
                wealth: v.wealth,
                regime: v.regime,
            };
            direction.emit(&input, &mut w);
            v.coeffs.sigma_times(v.control, &mut pv);
            for a in 0..na {
                out.g[k * na + a] = f[0] * v.coeffs.theta[a] + f[1] * pv[a];
                drift += w[a] * (v.coeffs.theta[a] - pv[a]) * dt;
                noise += w[a] * v.increment[a];
            }
            out.h[k] = (f[0] + f[1]) * (v.coeffs.rate + v.lin) + (f[1] + 0.5 * f[2]) * v.quad;
        }
        drift_terms.push(drift);
        noise_terms.push(noise);
        running += drift + noise;
        out.i_omega[k + 1] = running;
    })?;
    let fe = f_at(utility, end.wealth, path)?;
    out.f1.push(fe[0]);
    out.f2.push(fe[1]);
    out.f3.push(fe[2]);
    out.q.push(fe[0] + fe[1]);
    for k in 1..n_nodes {
        let d: f64 = drift_terms[..k].iter().sum();
        let m: f64 = noise_terms[..k].iter().sum();
        out.i_omega_direct[k] = d + m;
    }
    out.stop_step = end.stop_step;
    Ok(out)
}

/// Remainders of the first-order expansion on an epsilon ladder.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpansionCheck {
    pub epsilons: Vec<f64>,
    /// `R(e) = H(pi + e w) - H(pi) - e E[F1 I^w]` at `T ^ tau`.
    pub remainders: Vec<Estimate>,
    /// Pathwise first-order coefficient `E[F1 I^w]`.
    pub first_order: Estimate,
    /// Log-log slope of `|R|` against `e`; `None` when `R` vanishes identically.
    pub slope: Option<f64>,
}

/// Fit the order of the remainder after removing the first-order term.
pub fn expansion_order_check(
    scn: &Scenario,
    policy: &StoppedPolicy,
    direction: &ControlLaw,
    utility: &UtilitySpec,
    x0: f64,
    ladder: &[f64],
) -> Result<ExpansionCheck, VariationalError> {
    check_ladder(ladder)?;
    scn.check_law(direction)?;
    let na = scn.n_assets();
    let dt = scn.grid.dt();
    let base = Control::Weights(policy.clone());
    let bumped: Vec<Control> = ladder.iter().map(|&e| base.perturbed(direction, e)).collect();
    let rows: Vec<(f64, Vec<f64>)> = (0..scn.n_paths())
        .into_par_iter()
        .map(|i| {
            let mut w = vec![0.0; na];
            let mut pv = vec![0.0; na];
            let mut big_i = 0.0;
            let mut stop_wealth = None;
            let end = scn.weight_path(i, policy, x0, false, |v| {
                if !v.active {
                    if stop_wealth.is_none() {
                        stop_wealth = Some(v.log_wealth.exp());
                    }
                    return;
                }
                let input = PolicyInput {
                    step: v.step,
                    t: v.t,
                    wealth: if direction.needs_wealth() { v.log_wealth.exp() } else { f64::NAN },
                    regime: v.regime,
                };
                direction.emit(&input, &mut w);
                v.coeffs.sigma_times(v.control, &mut pv);
                for a in 0..na {
                    big_i += w[a] * ((v.coeffs.theta[a] - pv[a]) * dt + v.increment[a]);
                }
            })?;
            let x_stop = stop_wealth.unwrap_or(end.wealth);
            let f1 = f_at(utility, x_stop, i)?[0];
            let u0 = utility_at(utility, end.wealth, i)?;
            let lin = f1 * big_i;
            let mut r = Vec::with_capacity(bumped.len());
            for (c, &e) in bumped.iter().zip(ladder) {
                let ue = utility_at(utility, scn.terminal(i, c, x0)?.wealth, i)?;
                r.push(ue - u0 - e * lin);
            }
            Ok((lin, r))
        })
        .collect::<Result<_, VariationalError>>()?;
    let pairing = scn.noise.pairing();
    let lin: Vec<f64> = rows.iter().map(|r| r.0).collect();
    let remainders: Vec<Estimate> = (0..ladder.len())
        .map(|j| {
            let s: Vec<f64> = rows.iter().map(|r| r.1[j]).collect();
            Estimate::from_samples(&s, pairing)
        })
        .collect();
    let first_order = Estimate::from_samples(&lin, pairing);
    if remainders.iter().all(|r| r.mean == 0.0 && r.std_error == 0.0) {
        return Ok(ExpansionCheck {
            epsilons: ladder.to_vec(),
            remainders,
            first_order,
            slope: None,
        });
    }
    let (xs, ys): (Vec<f64>, Vec<f64>) = ladder
        .iter()
        .zip(&remainders)
        .filter(|(_, r)| r.mean != 0.0 && r.mean.abs() > 2.0 * r.std_error)
        .map(|(e, r)| (e.ln(), r.mean.abs().ln()))
        .unzip();
    if xs.len() < 2 {
        return Err(VariationalError::NoiseFloor { valid: xs.len() });
    }
    Ok(ExpansionCheck {
        epsilons: ladder.to_vec(),
        remainders,
        first_order,
        slope: Some(ols_slope(&xs, &ys)),
    })
}

/// Constancy of the mean of `S_t = F1_t (Y_t - 1) + int_0^t h du`.
#[derive(Clone, Debug, PartialEq)]
pub struct MartingaleCheck {
    pub nodes: Vec<usize>,
    /// `E[S_t - S_T]` at each node, with paired standard errors.
    pub deviations: Vec<Estimate>,
    /// Largest `(|deviation| - ROUNDOFF_FLOOR)^+ / SE`.
    pub max_deviation_se: f64,
}

pub fn mhat_martingale_check(
    scn: &Scenario,
    policy: &StoppedPolicy,
    utility: &UtilitySpec,
    x0: f64,
    bsde: &BsdeSolution,
) -> Result<MartingaleCheck, VariationalError> {
    check_solution(scn, bsde)?;
    let n_steps = scn.grid.n_steps();
    let nodes: Vec<usize> = MARTINGALE_FRACTIONS.iter().map(|f| (f * n_steps as f64).round() as usize).collect();
    let dt = scn.grid.dt();
    let rows: Vec<Vec<f64>> = (0..scn.n_paths())
        .into_par_iter()
        .map(|i| {
            let mut s = vec![0.0; nodes.len()];
            let mut integral = 0.0;
            let mut frozen_f1 = None;
            let end = visit_with_f(scn, i, policy, utility, x0, |v, f| {
                let f1 = if v.active {
                    f[0]
                } else {
                    *frozen_f1.get_or_insert(f[0])
                };
                for (j, &node) in nodes.iter().enumerate() {
                    if node == v.step {
                        s[j] = f1 * (bsde.y(i, node) - 1.0) + integral;
                    }
                }
                if v.active {
                    integral += ((f[0] + f[1]) * (v.coeffs.rate + v.lin) + (f[1] + 0.5 * f[2]) * v.quad) * dt;
                }
            })?;
            let f1_end = match frozen_f1 {
                Some(f) => f,
                None => f_at(utility, end.wealth, i)?[0],
            };
            for (j, &node) in nodes.iter().enumerate() {
                if node == n_steps {
                    s[j] = f1_end * (bsde.y(i, n_steps) - 1.0) + integral;
                }
            }
            Ok(s)
        })
        .collect::<Result<_, VariationalError>>()?;
    let pairing = scn.noise.pairing();
    let last = nodes.len() - 1;
    let col = |j: usize| rows.iter().map(|r| r[j]).collect::<Vec<f64>>();
    let terminal = col(last);
    let deviations: Vec<Estimate> = (0..nodes.len()).map(|j| paired_difference(&col(j), &terminal, pairing)).collect();
    let max_deviation_se = deviations
        .iter()
        .map(|d| {
            let excess = (d.mean.abs() - ROUNDOFF_FLOOR).max(0.0);
            if excess == 0.0 {
                0.0
            } else if d.std_error > 0.0 {
                excess / d.std_error
            } else {
                f64::INFINITY
            }
        })
        .fold(0.0, f64::max);
    Ok(MartingaleCheck {
        nodes,
        deviations,
        max_deviation_se,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fbsde::{solve_bsde_deterministic, solve_bsde_for_policy};
    use crate::market::{build_market, sample_noise, sample_noise_antithetic, Bounds, MarketConfig, MarketModel, NoisePathSet, TimeGrid};
    use crate::wealth::PortfolioPolicy;

    fn desk() -> MarketModel {
        build_market(MarketConfig::constant(0.02, &[0.08], &[0.04], 1.0, Bounds { m: 1.0, eps: 0.01, c: 0.1 })).unwrap()
    }

    fn setup(n_paths: usize, seed: u64) -> (MarketModel, TimeGrid, NoisePathSet) {
        let m = desk();
        let g = TimeGrid::new(1.0, 250).unwrap();
        let noise = sample_noise_antithetic(&m, &g, seed, n_paths).unwrap();
        (m, g, noise)
    }

    fn weights(v: f64) -> StoppedPolicy {
        PortfolioPolicy(ControlLaw::constant(&[v])).into()
    }

    #[test]
    fn riskless_log_criterion_is_exact() {
        let (m, g, noise) = setup(100, 1);
        let scn = Scenario::new(&m, g, &noise).unwrap();
        let h = performance_criterion(&scn, &Control::weights(&[0.0]), &UtilitySpec::Log, 1.0).unwrap();
        assert!((h.mean - 0.02).abs() < 1e-14);
        assert!(h.std_error < 1e-15);
    }

    #[test]
    fn log_criterion_matches_quadratic() {
        let (m, g, noise) = setup(20_000, 2);
        let scn = Scenario::new(&m, g, &noise).unwrap();
        let h = performance_criterion(&scn, &Control::weights(&[1.5]), &UtilitySpec::Log, 1.0).unwrap();
        // antithetic pairs cancel the noise term exactly
        assert!((h.mean - 0.065).abs() < 1e-12);
    }

    #[test]
    fn domain_error_names_path() {
        let (m, g, noise) = setup(10, 3);
        let scn = Scenario::new(&m, g, &noise).unwrap();
        let err = performance_criterion(&scn, &Control::dollars(&[40.0]), &UtilitySpec::Log, 0.01).unwrap_err();
        assert!(matches!(err, VariationalError::Domain { .. }), "{err}");
    }

    #[test]
    fn fd_log_derivative() {
        let (m, g, noise) = setup(2_000, 4);
        let scn = Scenario::new(&m, g, &noise).unwrap();
        let d = gateaux_fd(&scn, &Control::weights(&[1.0]), &ControlLaw::constant(&[1.0]), &UtilitySpec::Log, 1.0, &DEFAULT_LADDER).unwrap();
        assert!((d.value - 0.02).abs() < 1e-10, "{}", d.value);
        let z = gateaux_fd(&scn, &Control::weights(&[1.0]), &ControlLaw::zero(1), &UtilitySpec::Log, 1.0, &DEFAULT_LADDER).unwrap();
        assert_eq!((z.value, z.std_error), (0.0, 0.0));
        assert!(gateaux_fd(&scn, &Control::weights(&[1.0]), &ControlLaw::constant(&[1.0]), &UtilitySpec::Log, 1.0, &[0.05, 0.1]).is_err());
    }

    #[test]
    fn formula_log_derivative_and_zero_at_optimum() {
        let (m, g, noise) = setup(200, 5);
        let scn = Scenario::new(&m, g, &noise).unwrap();
        let u = UtilitySpec::Log;
        let sol = solve_bsde_deterministic(&u, &m, &g).unwrap();
        let d = gateaux_formula(&scn, &weights(1.0), &ControlLaw::constant(&[1.0]), &u, 1.0, &sol).unwrap();
        assert!((d.value - 0.02).abs() < 1e-12);
        assert!(d.std_error < 1e-12);
        let z = gateaux_formula(&scn, &weights(1.5), &ControlLaw::constant(&[1.0]), &u, 1.0, &sol).unwrap();
        assert!(z.value.abs() < 1e-15);
    }

    #[test]
    fn formula_ascends_towards_optimum() {
        let (m, g, noise) = setup(2_000, 6);
        let scn = Scenario::new(&m, g, &noise).unwrap();
        let u = UtilitySpec::power(0.5).unwrap();
        for pi in [1.0, 4.5] {
            let sol = solve_bsde_for_policy(&u, &m, &g, &ControlLaw::constant(&[pi])).unwrap();
            let d = gateaux_formula(&scn, &weights(pi), &ControlLaw::constant(&[3.0 - pi]), &u, 1.0, &sol).unwrap();
            assert!(d.value > 3.0 * d.std_error, "pi={pi}: {d:?}");
        }
    }

    #[test]
    fn perturbation_identities() {
        let (m, g, noise) = setup(4, 7);
        let scn = Scenario::new(&m, g, &noise).unwrap();
        let u = UtilitySpec::power(0.5).unwrap();
        let p = perturbation_processes(&scn, 1, &weights(2.0), &ControlLaw::constant(&[-1.0]), &u, 1.0).unwrap();
        assert_eq!(p.i_omega[0], 0.0);
        for k in 0..=250 {
            assert!((p.i_omega[k] - p.i_omega_direct[k]).abs() < 1e-12);
            assert_eq!(p.q[k], p.f1[k] + p.f2[k]);
        }
        for k in 0..250 {
            let expected = p.f1[k] * 0.06 + p.f2[k] * 0.04 * 2.0;
            assert!((p.g[k] - expected).abs() < 1e-15);
            let h = (p.f1[k] + p.f2[k]) * (0.02 + 2.0 * 0.06) + (p.f2[k] + 0.5 * p.f3[k]) * 4.0 * 0.04;
            assert!((p.h[k] - h).abs() < 1e-15);
        }
    }

    #[test]
    fn log_expansion_is_exactly_quadratic() {
        let (m, g, noise) = setup(1_000, 8);
        let scn = Scenario::new(&m, g, &noise).unwrap();
        let c = expansion_order_check(&scn, &weights(1.0), &ControlLaw::constant(&[1.0]), &UtilitySpec::Log, 1.0, &DEFAULT_LADDER[..3]).unwrap();
        for (e, r) in c.epsilons.iter().zip(&c.remainders) {
            assert!((r.mean + 0.5 * e * e * 0.04).abs() < 1e-12, "{e}: {}", r.mean);
        }
        assert!((c.slope.unwrap() - 2.0).abs() < 1e-6);
        let z = expansion_order_check(&scn, &weights(1.0), &ControlLaw::zero(1), &UtilitySpec::Log, 1.0, &DEFAULT_LADDER[..3]).unwrap();
        assert!(z.slope.is_none());
    }

    #[test]
    fn martingale_check_log_is_exact() {
        let (m, g, noise) = setup(100, 9);
        let scn = Scenario::new(&m, g, &noise).unwrap();
        let u = UtilitySpec::Log;
        let sol = solve_bsde_deterministic(&u, &m, &g).unwrap();
        let c = mhat_martingale_check(&scn, &weights(1.5), &u, 1.0, &sol).unwrap();
        assert_eq!(c.max_deviation_se, 0.0);
        assert_eq!(c.nodes, vec![0, 63, 125, 188, 250]);
    }

    #[test]
    fn martingale_check_power() {
        let m = desk();
        let g = TimeGrid::new(1.0, 250).unwrap();
        let noise = sample_noise(&m, &g, 10, 20_000).unwrap();
        let scn = Scenario::new(&m, g, &noise).unwrap();
        let u = UtilitySpec::power(0.5).unwrap();
        let sol = solve_bsde_deterministic(&u, &m, &g).unwrap();
        let c = mhat_martingale_check(&scn, &weights(3.0), &u, 1.0, &sol).unwrap();
        assert!(c.max_deviation_se < 3.0, "{c:?}");
    }
}
