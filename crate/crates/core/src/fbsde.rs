//! Backward equations for `(Y, sigma)` and the optimal controls built from them.
//!
//! For the optimal control the backward equation reads
//! `d log Y = (A r + B S + 2B theta'sigma + (1 + zeta phi) sigma'Sigma sigma / 2) dt + sigma' dM`
//! with `S = theta' Sigma^{-1} theta` and `log Y_T = 0`, and the control is
//! `pi* = zeta (Sigma^{-1} theta + sigma)`. For a fixed policy `pi` with
//! `sigma = 0` the equation is `d log Y = -(h / F1) dt`.
//!
//! Exponential utility couples the equation to wealth through `zeta = 1/(gamma X)`;
//! it is solved in dollar amounts for `log Ytilde = log Y - int_t^T r ds`, whose
//! driver is `gamma X r + S/2 + theta'sigma`.

use std::fmt;

use rayon::prelude::*;
use thiserror::Error;

use crate::market::{MarketError, MarketModel, NoisePathSet, TimeGrid};
use crate::regression::{eval_raw, LeastSquares, PolyBasis};
use crate::utility::{UtilityError, UtilitySpec};
use crate::wealth::{Control, ControlLaw, DollarPolicy, PortfolioPolicy, Scenario, WealthError};

/// Paths required per regression basis function.
pub const MIN_PATHS_PER_BASIS: usize = 10;
/// Degree of the wealth polynomials in the coupled solver.
pub const PICARD_DEGREE: usize = 3;
/// Weight of the new iterate in each Picard update.
pub const PICARD_DAMPING: f64 = 0.5;

#[derive(Debug, Error)]
pub enum FbsdeError {
    #[error(transparent)]
    Market(#[from] MarketError),
    #[error(transparent)]
    Utility(#[from] UtilityError),
    #[error(transparent)]
    Wealth(#[from] WealthError),
    #[error("fbsde: {0}")]
    Unsupported(String),
    #[error("fbsde: market coefficients must be deterministic functions of time")]
    NotDeterministic,
    #[error("fbsde: regression needs a market with a Markov state")]
    NoMarkovState,
    #[error("fbsde: {have} paths is below the minimum of {need}")]
    TooFewPaths { have: usize, need: usize },
    #[error("fbsde: regression design is rank deficient at node {node}")]
    RankDeficient { node: usize },
    #[error("fbsde: conditional expectation of Y is not positive at node {node} (path {path})")]
    NonPositive { node: usize, path: usize },
    #[error("fbsde: Picard iteration did not converge in {iterations} iterations; sigma changes {history:?}")]
    NoConvergence { iterations: usize, history: Vec<f64> },
    #[error("fbsde: {0}")]
    Incompatible(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BsdeMode {
    OdeReduction,
    RegressionMc,
    PicardCoupled,
}

impl fmt::Display for BsdeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::OdeReduction => "ode-reduction",
            Self::RegressionMc => "regression-mc",
            Self::PicardCoupled => "picard-coupled",
        })
    }
}

/// How `sigma` depends on the state at each node.
#[derive(Clone, Debug)]
pub enum SigmaLaw {
    /// `[node][asset]`.
    Node(Vec<f64>),
    /// `[node][regime][asset]`.
    Regime { n_regimes: usize, values: Vec<f64> },
    /// Polynomial in wealth, `[node][asset][power]` raw monomial coefficients.
    Wealth { degree: usize, coeffs: Vec<f64> },
}

/// `(Y, sigma)` on the grid. Deterministic solutions store one value per
/// node; Monte Carlo solutions store one per path and node.
#[derive(Clone, Debug)]
pub struct BsdeSolution {
    pub mode: BsdeMode,
    pub grid: TimeGrid,
    pub n_assets: usize,
    /// Zero for deterministic solutions.
    pub n_paths: usize,
    log_y: Vec<f64>,
    sigma: Vec<f64>,
    pub law: SigmaLaw,
}

impl BsdeSolution {
    fn deterministic(mode: BsdeMode, grid: TimeGrid, n_assets: usize, log_y: Vec<f64>, sigma: Vec<f64>) -> Self {
        Self {
            mode,
            grid,
            n_assets,
            n_paths: 0,
            log_y,
            law: SigmaLaw::Node(sigma.clone()),
            sigma,
        }
    }

    pub fn is_per_path(&self) -> bool {
        self.n_paths > 0
    }

    fn n_nodes(&self) -> usize {
        self.grid.n_nodes()
    }

    /// `log Y` at `node`; `path` is ignored for deterministic solutions.
    #[inline]
    pub fn log_y(&self, path: usize, node: usize) -> f64 {
        if self.is_per_path() {
            self.log_y[path * self.n_nodes() + node]
        } else {
            self.log_y[node]
        }
    }

    #[inline]
    pub fn y(&self, path: usize, node: usize) -> f64 {
        self.log_y(path, node).exp()
    }

    #[inline]
    pub fn sigma(&self, path: usize, node: usize) -> &[f64] {
        let n = self.n_assets;
        let start = if self.is_per_path() { (path * self.n_nodes() + node) * n } else { node * n };
        &self.sigma[start..start + n]
    }

    /// `sigma` from the state law at `node`.
    pub fn sigma_at(&self, node: usize, regime: usize, wealth: f64, out: &mut [f64]) {
        let n = self.n_assets;
        match &self.law {
            SigmaLaw::Node(v) => out.copy_from_slice(&v[node * n..(node + 1) * n]),
            SigmaLaw::Regime { n_regimes, values } => {
                let start = (node * n_regimes + regime) * n;
                out.copy_from_slice(&values[start..start + n]);
            }
            SigmaLaw::Wealth { degree, coeffs } => {
                let p = degree + 1;
                for (a, o) in out.iter_mut().enumerate() {
                    let start = (node * n + a) * p;
                    *o = eval_raw(&coeffs[start..start + p], wealth);
                }
            }
        }
    }

    /// Cross-path average of `Y` at `node`.
    pub fn mean_y(&self, node: usize) -> f64 {
        if !self.is_per_path() {
            return self.y(0, node);
        }
        (0..self.n_paths).map(|i| self.y(i, node)).sum::<f64>() / self.n_paths as f64
    }

    pub fn mean_sigma(&self, node: usize) -> Vec<f64> {
        if !self.is_per_path() {
            return self.sigma(0, node).to_vec();
        }
        let mut m = vec![0.0; self.n_assets];
        for i in 0..self.n_paths {
            for (a, s) in m.iter_mut().zip(self.sigma(i, node)) {
                *a += s;
            }
        }
        m.iter_mut().for_each(|a| *a /= self.n_paths as f64);
        m
    }

    /// True when `log Y_T = 0` on every path.
    pub fn terminal_is_one(&self) -> bool {
        let last = self.grid.n_steps();
        let paths = self.n_paths.max(1);
        (0..paths).all(|i| self.log_y(i, last) == 0.0)
    }

    /// Smallest `Y` over all stored values.
    pub fn min_y(&self) -> f64 {
        self.log_y.iter().map(|l| l.exp()).fold(f64::INFINITY, f64::min)
    }
}

/// An optimal control with the solution it came from and its stationarity
/// residual `max |g + F1 Sigma sigma|` on validation paths.
#[derive(Clone, Debug)]
pub struct OptimalPolicyResult {
    pub policy: Control,
    pub solution: BsdeSolution,
    pub residual: f64,
}

/// Output of the coupled exponential solver.
#[derive(Clone, Debug)]
pub struct ExponentialSolution {
    pub result: OptimalPolicyResult,
    /// `log Ytilde`, `[path][node]`.
    pub log_y_tilde: Vec<f64>,
    /// Forward wealth under the final law, `[path][node]`.
    pub wealth: Vec<f64>,
    pub iterations: usize,
    /// Damped sigma change per iteration (sup over nodes of the path RMS).
    pub history: Vec<f64>,
}

fn require_scale_free(utility: &UtilitySpec) -> Result<(), FbsdeError> {
    if utility.is_scale_free() {
        Ok(())
    } else {
        Err(FbsdeError::Unsupported(format!("{} utility is not supported here; only log and power", utility.kind())))
    }
}

/// Optimal `(Y, sigma)` for log or power utility with deterministic
/// coefficients: `sigma = 0` and `log Y` solves a backward ODE.
pub fn solve_bsde_deterministic(utility: &UtilitySpec, model: &MarketModel, grid: &TimeGrid) -> Result<BsdeSolution, FbsdeError> {
    require_scale_free(utility)?;
    if !model.is_deterministic() {
        return Err(FbsdeError::NotDeterministic);
    }
    let b = utility.coefficient_bundle(1.0)?;
    let table = model.coefficient_table(grid)?;
    let reg = model.initial_regime();
    let n = grid.n_steps();
    let dt = grid.dt();
    let mut log_y = vec![0.0; n + 1];
    for k in (0..n).rev() {
        let c = table.get(reg, k);
        let drift = b.a * c.rate + b.b * c.sharpe_sq;
        log_y[k] = log_y[k + 1] - drift * dt;
    }
    Ok(BsdeSolution::deterministic(
        BsdeMode::OdeReduction,
        *grid,
        model.n_assets(),
        log_y,
        vec![0.0; (n + 1) * model.n_assets()],
    ))
}

/// `(Y, sigma)` for a fixed time-dependent policy under log or power utility:
/// `sigma = 0` and `log Y_k = log Y_{k+1} + (h / F1)_k dt`.
pub fn solve_bsde_for_policy(utility: &UtilitySpec, model: &MarketModel, grid: &TimeGrid, policy: &ControlLaw) -> Result<BsdeSolution, FbsdeError> {
    require_scale_free(utility)?;
    if !model.is_deterministic() {
        return Err(FbsdeError::NotDeterministic);
    }
    if policy.needs_wealth() {
        return Err(FbsdeError::Incompatible("policy must not depend on wealth".into()));
    }
    let b = utility.coefficient_bundle(1.0)?;
    let p2 = b.f2 / b.f1;
    let p3 = b.f3 / b.f1;
    let table = model.coefficient_table(grid)?;
    let reg = model.initial_regime();
    let n = grid.n_steps();
    let dt = grid.dt();
    let mut pi = vec![0.0; model.n_assets()];
    let mut log_y = vec![0.0; n + 1];
    for k in (0..n).rev() {
        let c = table.get(reg, k);
        let input = crate::wealth::PolicyInput { step: k, t: grid.t(k), wealth: f64::NAN, regime: reg };
        policy.emit(&input, &mut pi);
        let (lin, quad) = c.linear_quadratic(&pi);
        let h_over_f1 = (1.0 + p2) * (c.rate + lin) + (p2 + 0.5 * p3) * quad;
        log_y[k] = log_y[k + 1] + h_over_f1 * dt;
    }
    Ok(BsdeSolution::deterministic(
        BsdeMode::OdeReduction,
        *grid,
        model.n_assets(),
        log_y,
        vec![0.0; (n + 1) * model.n_assets()],
    ))
}

/// Optimal `(Y, sigma)` for log or power utility in a Markov-modulated market,
/// by backward least-squares regression on polynomials of the regime index.
pub fn solve_bsde_regression(
    utility: &UtilitySpec,
    model: &MarketModel,
    grid: &TimeGrid,
    noise: &NoisePathSet,
    basis_degree: usize,
) -> Result<BsdeSolution, FbsdeError> {
    require_scale_free(utility)?;
    if !model.has_markov_state() || !noise.has_states() {
        return Err(FbsdeError::NoMarkovState);
    }
    let scn = Scenario::new(model, *grid, noise)?;
    let n_paths = noise.n_paths();
    let need = MIN_PATHS_PER_BASIS * (basis_degree + 1);
    if n_paths < need {
        return Err(FbsdeError::TooFewPaths { have: n_paths, need });
    }
    let b = utility.coefficient_bundle(1.0)?;
    let quad_weight = 0.5 * (1.0 + b.zeta * b.phi);
    let n_steps = grid.n_steps();
    let n_nodes = grid.n_nodes();
    let na = model.n_assets();
    let n_regimes = model.n_regimes();
    let dt = grid.dt();

    let mut log_y = vec![0.0; n_paths * n_nodes];
    let mut sigma = vec![0.0; n_paths * n_nodes * na];
    let mut law = vec![0.0; n_nodes * n_regimes * na];
    let mut y_next = vec![1.0; n_paths];
    let mut target = vec![0.0; n_paths];
    let mut z = vec![0.0; na];
    let mut s = vec![0.0; na];

    for k in (0..n_steps).rev() {
        let x: Vec<f64> = (0..n_paths).map(|i| noise.regime(i, k) as f64).collect();
        let basis = PolyBasis::for_sample(&x, basis_degree);
        let ls = LeastSquares::new(&x, basis).ok_or(FbsdeError::RankDeficient { node: k })?;
        let beta_m = ls.fit(&y_next);
        let m: Vec<f64> = (0..n_paths).map(|i| ls.fitted(&beta_m, i)).collect();
        let beta_z: Vec<Vec<f64>> = (0..na)
            .map(|a| {
                for i in 0..n_paths {
                    target[i] = (y_next[i] - m[i]) * noise.increment(i, k)[a] / dt;
                }
                ls.fit(&target)
            })
            .collect();
        for i in 0..n_paths {
            if !(m[i] > 0.0) {
                return Err(FbsdeError::NonPositive { node: k, path: i });
            }
            let c = scn.coeffs(i, k);
            for a in 0..na {
                z[a] = ls.fitted(&beta_z[a], i);
            }
            c.sigma_inv_times(&z, &mut s);
            s.iter_mut().for_each(|v| *v /= m[i]);
            let (ts, ss) = c.linear_quadratic(&s);
            let drift = b.a * c.rate + b.b * c.sharpe_sq + 2.0 * b.b * ts + quad_weight * ss;
            let ly = m[i].ln() - (drift + 0.5 * ss) * dt;
            log_y[i * n_nodes + k] = ly;
            sigma[(i * n_nodes + k) * na..(i * n_nodes + k + 1) * na].copy_from_slice(&s);
        }
        for (i, y) in y_next.iter_mut().enumerate() {
            *y = log_y[i * n_nodes + k].exp();
        }
        for j in 0..n_regimes {
            let c = scn.table.get(j, k);
            let mj = basis.eval(&beta_m, j as f64);
            for a in 0..na {
                z[a] = basis.eval(&beta_z[a], j as f64);
            }
            c.sigma_inv_times(&z, &mut s);
            let start = (k * n_regimes + j) * na;
            for a in 0..na {
                law[start + a] = if mj > 0.0 { s[a] / mj } else { 0.0 };
            }
        }
    }
    Ok(BsdeSolution {
        mode: BsdeMode::RegressionMc,
        grid: *grid,
        n_assets: na,
        n_paths,
        log_y,
        sigma,
        law: SigmaLaw::Regime { n_regimes, values: law },
    })
}

struct ExpContext<'a> {
    scn: Scenario<'a>,
    gamma: f64,
    x0: f64,
    reg: usize,
}

impl ExpContext<'_> {
    fn law_sigma(&self, law: &[f64], node: usize, x: f64, out: &mut [f64]) {
        let p = PICARD_DEGREE + 1;
        let n = out.len();
        for (a, o) in out.iter_mut().enumerate() {
            let start = (node * n + a) * p;
            *o = eval_raw(&law[start..start + p], x);
        }
    }

    /// Dollar wealth `[path][node]` under `u = (Sigma^{-1} theta + sigma(X)) / gamma`.
    fn forward(&self, law: &[f64]) -> Vec<f64> {
        let n_nodes = self.scn.grid.n_nodes();
        let na = self.scn.n_assets();
        let dt = self.scn.grid.dt();
        let mut out = vec![0.0; self.scn.n_paths() * n_nodes];
        out.par_chunks_mut(n_nodes).enumerate().for_each(|(i, xs)| {
            let mut s = vec![0.0; na];
            let mut u = vec![0.0; na];
            let mut x = self.x0;
            xs[0] = x;
            for k in 0..n_nodes - 1 {
                let c = self.scn.table.get(self.reg, k);
                self.law_sigma(law, k, x, &mut s);
                for a in 0..na {
                    u[a] = (c.merton[a] + s[a]) / self.gamma;
                }
                let d = self.scn.noise.increment(i, k);
                let mut drift = c.rate * x;
                let mut diff = 0.0;
                for a in 0..na {
                    drift += u[a] * c.theta[a];
                    diff += u[a] * d[a];
                }
                x += drift * dt + diff;
                xs[k + 1] = x;
            }
        });
        out
    }

    /// Backward regression of `log Ytilde` (and of `log Y` with the same
    /// sigma) along the given wealth paths. Returns the fitted sigma law and
    /// both log processes.
    fn backward(&self, wealth: &[f64]) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>), FbsdeError> {
        let n_paths = self.scn.n_paths();
        let n_nodes = self.scn.grid.n_nodes();
        let na = self.scn.n_assets();
        let dt = self.scn.grid.dt();
        let p = PICARD_DEGREE + 1;
        let mut law = vec![0.0; n_nodes * na * p];
        let mut lt = vec![0.0; n_paths * n_nodes];
        let mut ly = vec![0.0; n_paths * n_nodes];
        let mut next_t = vec![0.0; n_paths];
        let mut next_y = vec![0.0; n_paths];
        let mut target = vec![0.0; n_paths];
        let mut z = vec![0.0; na];
        let mut s = vec![0.0; na];
        for k in (0..n_nodes - 1).rev() {
            let c = self.scn.table.get(self.reg, k);
            let x: Vec<f64> = (0..n_paths).map(|i| wealth[i * n_nodes + k]).collect();
            let basis = PolyBasis::for_sample(&x, PICARD_DEGREE);
            let ls = LeastSquares::new(&x, basis).ok_or(FbsdeError::RankDeficient { node: k })?;
            let beta_t = ls.fit(&next_t);
            let beta_y = ls.fit(&next_y);
            let beta_z: Vec<Vec<f64>> = (0..na)
                .map(|a| {
                    for i in 0..n_paths {
                        let resid = next_t[i] - ls.fitted(&beta_t, i);
                        target[i] = resid * self.scn.noise.increment(i, k)[a] / dt;
                    }
                    ls.fit(&target)
                })
                .collect();
            // sigma = Sigma^{-1} Z as raw monomials in wealth
            let raw_z: Vec<Vec<f64>> = beta_z.iter().map(|bz| basis.raw_monomials(bz)).collect();
            for a in 0..na {
                for j in 0..raw_z[0].len() {
                    let mut v = 0.0;
                    for bidx in 0..na {
                        v += c.sigma_inv[(a, bidx)] * raw_z[bidx][j];
                    }
                    law[(k * na + a) * p + j] = v;
                }
            }
            for i in 0..n_paths {
                for a in 0..na {
                    z[a] = ls.fitted(&beta_z[a], i);
                }
                c.sigma_inv_times(&z, &mut s);
                let ts: f64 = s.iter().zip(c.theta.iter()).map(|(a, b)| a * b).sum();
                let common = 0.5 * c.sharpe_sq + ts;
                let xi = x[i];
                lt[i * n_nodes + k] = ls.fitted(&beta_t, i) - (self.gamma * xi * c.rate + common) * dt;
                ly[i * n_nodes + k] = ls.fitted(&beta_y, i) - ((self.gamma * xi - 1.0) * c.rate + common) * dt;
            }
            for i in 0..n_paths {
                next_t[i] = lt[i * n_nodes + k];
                next_y[i] = ly[i * n_nodes + k];
            }
        }
        Ok((law, lt, ly))
    }
}

/// Coupled solver for exponential utility `-exp(-gamma x)` in dollar amounts.
/// Picard iteration on the sigma law, starting from `sigma = 0`, with damping
/// `PICARD_DAMPING`. Requires deterministic coefficients.
pub fn solve_fbsde_exponential(
    model: &MarketModel,
    grid: &TimeGrid,
    noise: &NoisePathSet,
    gamma: f64,
    x0: f64,
    picard_iters: usize,
    tol: f64,
) -> Result<ExponentialSolution, FbsdeError> {
    let utility = UtilitySpec::exponential(gamma)?;
    if !model.is_deterministic() {
        return Err(FbsdeError::NotDeterministic);
    }
    if !x0.is_finite() {
        return Err(FbsdeError::Incompatible(format!("initial wealth must be finite, got {x0}")));
    }
    let need = MIN_PATHS_PER_BASIS * (PICARD_DEGREE + 1);
    if noise.n_paths() < need {
        return Err(FbsdeError::TooFewPaths { have: noise.n_paths(), need });
    }
    let ctx = ExpContext {
        scn: Scenario::new(model, *grid, noise)?,
        gamma,
        x0,
        reg: model.initial_regime(),
    };
    let n_nodes = grid.n_nodes();
    let na = model.n_assets();
    let n_paths = noise.n_paths();
    let p = PICARD_DEGREE + 1;
    let mut law = vec![0.0; n_nodes * na * p];
    let mut history = Vec::new();
    let mut converged = false;
    let mut old = vec![0.0; na];
    let mut new = vec![0.0; na];
    for _ in 0..picard_iters {
        let wealth = ctx.forward(&law);
        let (fit, _, _) = ctx.backward(&wealth)?;
        let damped: Vec<f64> = law.iter().zip(&fit).map(|(o, f)| o + PICARD_DAMPING * (f - o)).collect();
        let mut change: f64 = 0.0;
        for k in 0..n_nodes - 1 {
            let mut ss = 0.0;
            for i in 0..n_paths {
                let x = wealth[i * n_nodes + k];
                ctx.law_sigma(&law, k, x, &mut old);
                ctx.law_sigma(&damped, k, x, &mut new);
                ss += old.iter().zip(&new).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            }
            change = change.max((ss / n_paths as f64).sqrt());
        }
        law = damped;
        history.push(change);
        if change < tol {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(FbsdeError::NoConvergence {
            iterations: history.len(),
            history,
        });
    }

    let wealth = ctx.forward(&law);
    let (_, log_y_tilde, log_y) = ctx.backward(&wealth)?;
    let mut sigma = vec![0.0; n_paths * n_nodes * na];
    for i in 0..n_paths {
        for k in 0..n_nodes - 1 {
            let start = (i * n_nodes + k) * na;
            ctx.law_sigma(&law, k, wealth[i * n_nodes + k], &mut sigma[start..start + na]);
        }
    }
    let solution = BsdeSolution {
        mode: BsdeMode::PicardCoupled,
        grid: *grid,
        n_assets: na,
        n_paths,
        log_y,
        sigma,
        law: SigmaLaw::Wealth {
            degree: PICARD_DEGREE,
            coeffs: law,
        },
    };
    let policy = policy_from_solution(&utility, model, grid, &solution)?;
    let residual = stationarity_residual(&ctx.scn, &utility, &policy, &solution, x0)?;
    Ok(ExponentialSolution {
        result: OptimalPolicyResult { policy, solution, residual },
        log_y_tilde,
        wealth,
        iterations: history.len(),
        history,
    })
}

/// The control `pi* = zeta (Sigma^{-1} theta + sigma)` implied by a solution:
/// weights for log and power, dollar amounts `(Sigma^{-1} theta + sigma) / gamma`
/// for exponential utility.
pub fn policy_from_solution(utility: &UtilitySpec, model: &MarketModel, grid: &TimeGrid, solution: &BsdeSolution) -> Result<Control, FbsdeError> {
    let table = model.coefficient_table(grid)?;
    let na = model.n_assets();
    let n_nodes = grid.n_nodes();
    match utility {
        UtilitySpec::Exponential { gamma } => {
            let (degree, coeffs) = match &solution.law {
                SigmaLaw::Wealth { degree, coeffs } => (*degree, coeffs.clone()),
                SigmaLaw::Node(v) => (0, v.clone()),
                SigmaLaw::Regime { .. } => return Err(FbsdeError::Incompatible("exponential control needs a wealth or node sigma law".into())),
            };
            let reg = model.initial_regime();
            let merton: Vec<f64> = (0..n_nodes).flat_map(|k| table.get(reg, k).merton.iter().cloned().collect::<Vec<_>>()).collect();
            let gamma = *gamma;
            let p = degree + 1;
            let law = ControlLaw::feedback(move |input, out| {
                let k = input.step;
                for (a, o) in out.iter_mut().enumerate() {
                    let start = (k * na + a) * p;
                    *o = (merton[k * na + a] + eval_raw(&coeffs[start..start + p], input.wealth)) / gamma;
                }
            });
            Ok(Control::Dollars(DollarPolicy(law)))
        }
        UtilitySpec::Log | UtilitySpec::Power { .. } => {
            let zeta = utility.coefficient_bundle(1.0)?.zeta;
            let law = match &solution.law {
                SigmaLaw::Node(sig) => {
                    let reg = model.initial_regime();
                    let values: Vec<f64> = (0..n_nodes)
                        .flat_map(|k| {
                            let c = table.get(reg, k);
                            (0..na).map(move |a| zeta * (c.merton[a] + sig[k * na + a])).collect::<Vec<_>>()
                        })
                        .collect();
                    let constant = model.is_constant() && values.chunks_exact(na).all(|v| v == &values[..na]);
                    if constant {
                        ControlLaw::Constant(values[..na].to_vec())
                    } else {
                        let g = *grid;
                        ControlLaw::time_function(move |t, out| {
                            let k = g.node_at(t);
                            out.copy_from_slice(&values[k * na..(k + 1) * na]);
                        })
                    }
                }
                SigmaLaw::Regime { n_regimes, values: sig } => {
                    let nr = *n_regimes;
                    let values: Vec<f64> = (0..n_nodes)
                        .flat_map(|k| {
                            let table = &table;
                            (0..nr).flat_map(move |j| {
                                let c = table.get(j, k);
                                (0..na).map(move |a| zeta * (c.merton[a] + sig[(k * nr + j) * na + a]))
                            })
                        })
                        .collect();
                    ControlLaw::feedback(move |input, out| {
                        let start = (input.step * nr + input.regime) * na;
                        out.copy_from_slice(&values[start..start + na]);
                    })
                }
                SigmaLaw::Wealth { .. } => return Err(FbsdeError::Incompatible("log and power controls need a node or regime sigma law".into())),
            };
            Ok(Control::Weights(PortfolioPolicy(law).into()))
        }
        UtilitySpec::Custom(_) => Err(FbsdeError::Unsupported("custom utilities have no optimal-control solver".into())),
    }
}

/// Largest `|g + F1 Sigma sigma|` over the paths of `scn` and the steps
/// before stopping, where `g = F1 theta + F2 Sigma pi`.
pub fn stationarity_residual(scn: &Scenario, utility: &UtilitySpec, control: &Control, solution: &BsdeSolution, x0: f64) -> Result<f64, FbsdeError> {
    let na = scn.n_assets();
    if solution.n_assets != na || solution.grid.n_steps() != scn.grid.n_steps() {
        return Err(FbsdeError::Incompatible("solution does not match the scenario".into()));
    }
    let per_path: Vec<Result<f64, FbsdeError>> = (0..scn.n_paths())
        .into_par_iter()
        .map(|i| {
            let mut sig = vec![0.0; na];
            let mut sv = vec![0.0; na];
            let mut pv = vec![0.0; na];
            let mut worst: f64 = 0.0;
            let mut err: Option<FbsdeError> = None;
            let mut visit = |v: &crate::wealth::StepView| {
                if !v.active || err.is_some() {
                    return;
                }
                let d = match utility.evaluate(v.wealth) {
                    Ok(d) => d,
                    Err(e) => {
                        err = Some(e.into());
                        return;
                    }
                };
                let x = v.wealth;
                solution.sigma_at(v.step, v.regime, x, &mut sig);
                v.coeffs.sigma_times(&sig, &mut sv);
                v.coeffs.sigma_times(v.control, &mut pv);
                let mut norm = 0.0;
                for a in 0..na {
                    // both forms equal g + F1 Sigma sigma
                    let r = match control {
                        Control::Weights(_) => d.d1 * x * (v.coeffs.theta[a] + sv[a]) + d.d2 * x * x * pv[a],
                        Control::Dollars(_) => x * (d.d1 * (v.coeffs.theta[a] + sv[a]) + d.d2 * pv[a]),
                    };
                    norm += r * r;
                }
                worst = worst.max(norm.sqrt());
            };
            match control {
                Control::Weights(p) => scn.weight_path(i, p, x0, true, &mut visit)?,
                Control::Dollars(p) => scn.dollar_path(i, p, x0, &mut visit)?,
            };
            match err {
                Some(e) => Err(e),
                None => Ok(worst),
            }
        })
        .collect();
    let mut worst: f64 = 0.0;
    for r in per_path {
        worst = worst.max(r?);
    }
    Ok(worst)
}

/// Optimal control from `solution` with its residual on `validation` paths.
pub fn optimal_policy(
    utility: &UtilitySpec,
    model: &MarketModel,
    grid: &TimeGrid,
    solution: BsdeSolution,
    validation: &NoisePathSet,
    x0: f64,
) -> Result<OptimalPolicyResult, FbsdeError> {
    let policy = policy_from_solution(utility, model, grid, &solution)?;
    let scn = Scenario::new(model, *grid, validation)?;
    let residual = stationarity_residual(&scn, utility, &policy, &solution, x0)?;
    Ok(OptimalPolicyResult { policy, solution, residual })
}

/// `Ytilde / Y` consistency: `log Ytilde_k - log Y_k + int_{t_k}^T r` at every
/// path and node, as a max absolute deviation.
pub fn transform_gap(sol: &ExponentialSolution, model: &MarketModel) -> f64 {
    let grid = sol.result.solution.grid;
    let n_nodes = grid.n_nodes();
    let reg = model.initial_regime();
    let mut worst: f64 = 0.0;
    for i in 0..sol.result.solution.n_paths {
        for k in 0..n_nodes {
            let int_r = model.integrated_rate(&grid, reg, grid.t(k), grid.horizon());
            let gap = sol.log_y_tilde[i * n_nodes + k] - sol.result.solution.log_y(i, k) + int_r;
            worst = worst.max(gap.abs());
        }
    }
    worst
}
