//! Market model: risk-free rate, drifts and noise covariation rates, plus the
//! machinery to turn them into simulated noise and price paths.
//!
//! Coefficients are opaque functions of time. A model may carry several
//! coefficient regimes switched by an independent continuous-time Markov
//! chain; with a single regime the coefficients are deterministic.

mod grid;
mod noise;
mod prices;

pub use grid::TimeGrid;
pub use noise::{sample_noise, sample_noise_antithetic, step_covariance, NoisePathSet};
pub use prices::{simulate_asset_prices, PricePaths};

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

pub type ScalarFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;
pub type VectorFn = Arc<dyn Fn(f64) -> DVector<f64> + Send + Sync>;
pub type MatrixFn = Arc<dyn Fn(f64) -> DMatrix<f64> + Send + Sync>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MarketError {
    #[error("market: {0}")]
    Dimension(String),
    #[error("market: non-finite {what} at t={t} (regime {regime})")]
    NonFinite { what: &'static str, t: f64, regime: usize },
    #[error("market: |{what}| = {value} exceeds bound M = {bound} at t={t} (regime {regime})")]
    Unbounded {
        what: &'static str,
        value: f64,
        bound: f64,
        t: f64,
        regime: usize,
    },
    #[error("market: covariation matrix is not symmetric at t={t} (regime {regime})")]
    NonSymmetric { t: f64, regime: usize },
    #[error("market: covariation eigenvalue {value} outside [{eps}, {c}] at t={t} (regime {regime})")]
    Ellipticity {
        value: f64,
        eps: f64,
        c: f64,
        t: f64,
        regime: usize,
    },
    #[error("market: Cholesky factorization failed at t={t} (regime {regime})")]
    Factorization { t: f64, regime: usize },
    #[error("market: regime chain: {0}")]
    Chain(String),
    #[error("market: invalid time grid: {0}")]
    Grid(String),
    #[error("market: {0}")]
    Invalid(String),
}

/// One set of coefficient functions `(r_t, alpha_t, Sigma_t)`.
#[derive(Clone)]
pub struct Regime {
    pub rate: ScalarFn,
    pub drift: VectorFn,
    pub cov: MatrixFn,
}

impl Regime {
    /// Time-constant coefficients; `sigma` is row-major `n x n`.
    pub fn constant(rate: f64, drift: &[f64], sigma: &[f64]) -> Self {
        let n = drift.len();
        let alpha = DVector::from_column_slice(drift);
        let cov = if sigma.len() == n * n {
            DMatrix::from_row_slice(n, n, sigma)
        } else {
            // Invalid shape; caught by validation.
            DMatrix::from_element(n, n, f64::NAN)
        };
        Self {
            rate: Arc::new(move |_| rate),
            drift: Arc::new(move |_| alpha.clone()),
            cov: Arc::new(move |_| cov.clone()),
        }
    }

    pub fn from_fns(rate: ScalarFn, drift: VectorFn, cov: MatrixFn) -> Self {
        Self { rate, drift, cov }
    }
}

impl fmt::Debug for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Regime").finish_non_exhaustive()
    }
}

/// Continuous-time Markov chain driving regime switches.
#[derive(Clone, Debug)]
pub struct RegimeChain {
    /// Intensity matrix: non-negative off-diagonal rates, rows summing to zero.
    pub generator: DMatrix<f64>,
    pub initial_state: usize,
    pub seed: u64,
}

impl RegimeChain {
    /// A single-state chain. The Markov state exists but never moves.
    pub fn degenerate(seed: u64) -> Self {
        Self {
            generator: DMatrix::zeros(1, 1),
            initial_state: 0,
            seed,
        }
    }

    /// One-step transition probabilities `exp(Q dt)`.
    pub fn transition_matrix(&self, dt: f64) -> DMatrix<f64> {
        (&self.generator * dt).exp()
    }
}

/// Assumption bounds: `|r|, |alpha_i| <= m` and eigenvalues of Sigma in `[eps, c]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Bounds {
    pub m: f64,
    pub eps: f64,
    pub c: f64,
}

#[derive(Clone, Debug)]
pub struct MarketConfig {
    pub n_assets: usize,
    pub regimes: Vec<Regime>,
    pub chain: Option<RegimeChain>,
    pub bounds: Bounds,
    pub initial_prices: Vec<f64>,
    pub riskless_price: f64,
    pub horizon: f64,
    /// Number of sample times used to check the assumptions on `[0, horizon]`.
    pub validation_points: usize,
}

impl MarketConfig {
    /// Constant coefficients, unit initial prices, 2500 validation points.
    pub fn constant(rate: f64, drift: &[f64], sigma: &[f64], horizon: f64, bounds: Bounds) -> Self {
        Self {
            n_assets: drift.len(),
            regimes: vec![Regime::constant(rate, drift, sigma)],
            chain: None,
            bounds,
            initial_prices: vec![1.0; drift.len()],
            riskless_price: 1.0,
            horizon,
            validation_points: 2500,
        }
    }

    pub fn with_chain(mut self, regimes: Vec<Regime>, chain: RegimeChain) -> Self {
        self.regimes = regimes;
        self.chain = Some(chain);
        self
    }
}

/// Coefficients frozen at a single time, with the factorizations the
/// simulators and solvers need.
#[derive(Clone, Debug)]
pub struct NodeCoefficients {
    pub t: f64,
    pub rate: f64,
    pub alpha: DVector<f64>,
    /// Excess returns `alpha - r 1`.
    pub theta: DVector<f64>,
    pub sigma: DMatrix<f64>,
    /// Lower Cholesky factor of `sigma`.
    pub chol: DMatrix<f64>,
    pub sigma_inv: DMatrix<f64>,
    /// `Sigma^{-1} theta`.
    pub merton: DVector<f64>,
    /// `theta' Sigma^{-1} theta`.
    pub sharpe_sq: f64,
}

impl NodeCoefficients {
    fn build(t: f64, regime: usize, rate: f64, alpha: DVector<f64>, sigma: DMatrix<f64>) -> Result<Self, MarketError> {
        let n = alpha.len();
        let theta = alpha.map(|a| a - rate);
        let chol = sigma
            .clone()
            .cholesky()
            .ok_or(MarketError::Factorization { t, regime })?;
        let merton = chol.solve(&theta);
        let sigma_inv = chol.inverse();
        let sharpe_sq = theta.dot(&merton);
        let l = chol.l();
        debug_assert_eq!(l.nrows(), n);
        Ok(Self {
            t,
            rate,
            alpha,
            theta,
            sigma,
            chol: l,
            sigma_inv,
            merton,
            sharpe_sq,
        })
    }

    /// `pi' theta`, `pi' Sigma pi` for a weight (or dollar) vector.
    #[inline]
    pub fn linear_quadratic(&self, pi: &[f64]) -> (f64, f64) {
        let n = pi.len();
        let mut lin = 0.0;
        let mut quad = 0.0;
        for i in 0..n {
            lin += pi[i] * self.theta[i];
            let mut row = 0.0;
            for j in 0..n {
                row += self.sigma[(i, j)] * pi[j];
            }
            quad += pi[i] * row;
        }
        (lin, quad)
    }

    /// `Sigma v`.
    pub fn sigma_times(&self, v: &[f64], out: &mut [f64]) {
        let n = v.len();
        for i in 0..n {
            let mut s = 0.0;
            for j in 0..n {
                s += self.sigma[(i, j)] * v[j];
            }
            out[i] = s;
        }
    }

    /// `Sigma^{-1} v`.
    pub fn sigma_inv_times(&self, v: &[f64], out: &mut [f64]) {
        let n = v.len();
        for i in 0..n {
            let mut s = 0.0;
            for j in 0..n {
                s += self.sigma_inv[(i, j)] * v[j];
            }
            out[i] = s;
        }
    }
}

/// Coefficients sampled at every grid node for every regime.
#[derive(Clone, Debug)]
pub struct CoefficientTable {
    n_nodes: usize,
    n_regimes: usize,
    nodes: Vec<NodeCoefficients>,
}

impl CoefficientTable {
    #[inline]
    pub fn get(&self, regime: usize, node: usize) -> &NodeCoefficients {
        &self.nodes[regime * self.n_nodes + node]
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn n_regimes(&self) -> usize {
        self.n_regimes
    }
}

/// A validated market model. Immutable and cheap to clone.
#[derive(Clone, Debug)]
pub struct MarketModel {
    n_assets: usize,
    regimes: Vec<Regime>,
    chain: Option<RegimeChain>,
    bounds: Bounds,
    initial_prices: Vec<f64>,
    riskless_price: f64,
    horizon: f64,
}

/// Validate a market configuration by sampling its coefficients densely on
/// `[0, horizon]` and checking boundedness, symmetry and the eigenvalue window.
pub fn build_market(config: MarketConfig) -> Result<MarketModel, MarketError> {
    let MarketConfig {
        n_assets,
        regimes,
        chain,
        bounds,
        initial_prices,
        riskless_price,
        horizon,
        validation_points,
    } = config;
    if n_assets == 0 {
        return Err(MarketError::Dimension("n_assets must be positive".into()));
    }
    if !(horizon.is_finite() && horizon > 0.0) {
        return Err(MarketError::Invalid(format!("horizon must be positive, got {horizon}")));
    }
    if !(bounds.m.is_finite() && bounds.m > 0.0) {
        return Err(MarketError::Invalid(format!("bound M must be positive and finite, got {}", bounds.m)));
    }
    if !(bounds.eps > 0.0 && bounds.c.is_finite() && bounds.eps <= bounds.c) {
        return Err(MarketError::Invalid(format!(
            "ellipticity window requires 0 < eps <= C < inf, got [{}, {}]",
            bounds.eps, bounds.c
        )));
    }
    if initial_prices.len() != n_assets {
        return Err(MarketError::Dimension(format!(
            "expected {n_assets} initial prices, got {}",
            initial_prices.len()
        )));
    }
    if initial_prices.iter().any(|p| !(p.is_finite() && *p > 0.0)) || !(riskless_price.is_finite() && riskless_price > 0.0) {
        return Err(MarketError::Invalid("initial prices must be positive".into()));
    }
    if regimes.is_empty() {
        return Err(MarketError::Dimension("at least one coefficient regime is required".into()));
    }
    match &chain {
        None if regimes.len() > 1 => {
            return Err(MarketError::Chain("several regimes need a switching chain".into()));
        }
        None => {}
        Some(ch) => validate_chain(ch, regimes.len())?,
    }

    let samples = validation_points.max(2);
    for (ri, regime) in regimes.iter().enumerate() {
        for s in 0..=samples {
            let t = horizon * s as f64 / samples as f64;
            check_coefficients(regime, ri, t, n_assets, &bounds)?;
        }
    }

    Ok(MarketModel {
        n_assets,
        regimes,
        chain,
        bounds,
        initial_prices,
        riskless_price,
        horizon,
    })
}

fn validate_chain(chain: &RegimeChain, n_regimes: usize) -> Result<(), MarketError> {
    let q = &chain.generator;
    if q.nrows() != n_regimes || q.ncols() != n_regimes {
        return Err(MarketError::Chain(format!(
            "generator is {}x{}, expected {n_regimes}x{n_regimes}",
            q.nrows(),
            q.ncols()
        )));
    }
    if chain.initial_state >= n_regimes {
        return Err(MarketError::Chain(format!("initial state {} out of range", chain.initial_state)));
    }
    if n_regimes > u8::MAX as usize {
        return Err(MarketError::Chain("at most 255 regimes are supported".into()));
    }
    for i in 0..n_regimes {
        let mut row = 0.0;
        for j in 0..n_regimes {
            let v = q[(i, j)];
            if !v.is_finite() || (i != j && v < 0.0) {
                return Err(MarketError::Chain(format!("invalid rate {v} at ({i}, {j})")));
            }
            row += v;
        }
        if row.abs() > 1e-12 * (1.0 + q[(i, i)].abs()) {
            return Err(MarketError::Chain(format!("row {i} sums to {row}, expected 0")));
        }
    }
    Ok(())
}

fn check_coefficients(regime: &Regime, ri: usize, t: f64, n: usize, bounds: &Bounds) -> Result<(), MarketError> {
    let r = (regime.rate)(t);
    if !r.is_finite() {
        return Err(MarketError::NonFinite { what: "rate", t, regime: ri });
    }
    if r.abs() > bounds.m {
        return Err(MarketError::Unbounded {
            what: "r",
            value: r,
            bound: bounds.m,
            t,
            regime: ri,
        });
    }
    let alpha = (regime.drift)(t);
    if alpha.len() != n {
        return Err(MarketError::Dimension(format!("drift has length {}, expected {n}", alpha.len())));
    }
    for &a in alpha.iter() {
        if !a.is_finite() {
            return Err(MarketError::NonFinite { what: "drift", t, regime: ri });
        }
        if a.abs() > bounds.m {
            return Err(MarketError::Unbounded {
                what: "alpha",
                value: a,
                bound: bounds.m,
                t,
                regime: ri,
            });
        }
    }
    let sigma = (regime.cov)(t);
    if sigma.nrows() != n || sigma.ncols() != n {
        return Err(MarketError::Dimension(format!(
            "covariation matrix is {}x{}, expected {n}x{n}",
            sigma.nrows(),
            sigma.ncols()
        )));
    }
    if sigma.iter().any(|v| !v.is_finite()) {
        return Err(MarketError::NonFinite {
            what: "covariation",
            t,
            regime: ri,
        });
    }
    let scale = sigma.amax().max(1.0);
    for i in 0..n {
        for j in (i + 1)..n {
            if (sigma[(i, j)] - sigma[(j, i)]).abs() > 1e-12 * scale {
                return Err(MarketError::NonSymmetric { t, regime: ri });
            }
        }
    }
    let eig = sigma.symmetric_eigenvalues();
    let tol = 1e-12 * scale;
    for &value in eig.iter() {
        if value < bounds.eps - tol || value > bounds.c + tol {
            return Err(MarketError::Ellipticity {
                value,
                eps: bounds.eps,
                c: bounds.c,
                t,
                regime: ri,
            });
        }
    }
    Ok(())
}

impl MarketModel {
    pub fn n_assets(&self) -> usize {
        self.n_assets
    }

    pub fn n_regimes(&self) -> usize {
        self.regimes.len()
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn bounds(&self) -> Bounds {
        self.bounds
    }

    pub fn initial_prices(&self) -> &[f64] {
        &self.initial_prices
    }

    pub fn riskless_price(&self) -> f64 {
        self.riskless_price
    }

    pub fn chain(&self) -> Option<&RegimeChain> {
        self.chain.as_ref()
    }

    /// True when the model carries a Markov state (possibly a degenerate one).
    pub fn has_markov_state(&self) -> bool {
        self.chain.is_some()
    }

    /// True when coefficients are deterministic functions of time.
    pub fn is_deterministic(&self) -> bool {
        self.regimes.len() == 1
    }

    pub fn initial_regime(&self) -> usize {
        self.chain.as_ref().map_or(0, |c| c.initial_state)
    }

    pub fn rate(&self, t: f64, regime: usize) -> f64 {
        (self.regimes[regime].rate)(t)
    }

    /// `theta_t = alpha_t - r_t 1`.
    pub fn excess_returns(&self, t: f64, regime: usize) -> DVector<f64> {
        let r = self.rate(t, regime);
        (self.regimes[regime].drift)(t).map(|a| a - r)
    }

    pub fn coefficients_at(&self, t: f64, regime: usize) -> Result<NodeCoefficients, MarketError> {
        let reg = &self.regimes[regime];
        NodeCoefficients::build(t, regime, (reg.rate)(t), (reg.drift)(t), (reg.cov)(t))
    }

    /// Coefficients at every node of `grid` for every regime.
    pub fn coefficient_table(&self, grid: &TimeGrid) -> Result<CoefficientTable, MarketError> {
        let n_nodes = grid.n_nodes();
        let mut nodes = Vec::with_capacity(n_nodes * self.regimes.len());
        for regime in 0..self.regimes.len() {
            for k in 0..n_nodes {
                nodes.push(self.coefficients_at(grid.t(k), regime)?);
            }
        }
        Ok(CoefficientTable {
            n_nodes,
            n_regimes: self.regimes.len(),
            nodes,
        })
    }

    /// True when a single regime has the same coefficients at every sampled time.
    pub fn is_constant(&self) -> bool {
        if !self.is_deterministic() {
            return false;
        }
        let reg = &self.regimes[0];
        let r0 = (reg.rate)(0.0);
        let a0 = (reg.drift)(0.0);
        let s0 = (reg.cov)(0.0);
        (1..=64).all(|s| {
            let t = self.horizon * s as f64 / 64.0;
            (reg.rate)(t) == r0 && (reg.drift)(t) == a0 && (reg.cov)(t) == s0
        })
    }

    /// Signed integral of the rate over `[s, t]` in the given regime, with the
    /// rate held at its left-node value on each grid interval.
    pub fn integrated_rate(&self, grid: &TimeGrid, regime: usize, s: f64, t: f64) -> f64 {
        if s == t {
            return 0.0;
        }
        let (lo, hi, sign) = if s < t { (s, t, 1.0) } else { (t, s, -1.0) };
        let dt = grid.dt();
        let mut k = ((lo / dt).floor() as usize).min(grid.n_steps().saturating_sub(1));
        // guard against floor landing one node late due to rounding
        while k > 0 && grid.t(k) > lo {
            k -= 1;
        }
        let mut acc = 0.0;
        let mut a = lo;
        while a < hi {
            let right = if k < grid.n_steps() { grid.t(k + 1) } else { f64::INFINITY };
            let b = right.min(hi);
            if b > a {
                acc += self.rate(grid.t(k), regime) * (b - a);
            }
            a = b;
            k += 1;
        }
        sign * acc
    }
}

/// Discount factor `exp(-int_s^t r_u du)` in the deterministic regime. The
/// integral uses the same left-node rate the simulators use, so
/// `discount_factor(s, t) * discount_factor(t, u) == discount_factor(s, u)`.
pub fn discount_factor(model: &MarketModel, grid: &TimeGrid, s: f64, t: f64) -> f64 {
    (-model.integrated_rate(grid, model.initial_regime(), s, t)).exp()
}
