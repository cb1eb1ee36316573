//! Wealth under weight and dollar-amount controls.
//!
//! Weight controls use the log-Euler recursion
//! `log X_{k+1} = log X_k + gamma_k dt + pi_k' Delta M_k` with
//! `gamma = r + pi' theta - pi' Sigma pi / 2`, so wealth stays positive.
//! Dollar controls use plain Euler, `X_{k+1} = X_k + (r X_k + u' theta) dt + u' Delta M_k`,
//! which is exactly linear in the control.

use std::fmt;
use std::io::Write;
use std::sync::Arc;

use rayon::prelude::*;
use thiserror::Error;

use crate::market::{CoefficientTable, MarketError, MarketModel, NodeCoefficients, NoisePathSet, TimeGrid};

/// Default stopping threshold; large enough to never bind in practice.
pub const DEFAULT_THRESHOLD: f64 = 1e6;

#[derive(Debug, Error)]
pub enum WealthError {
    #[error(transparent)]
    Market(#[from] MarketError),
    #[error("wealth: {0}")]
    Dimension(String),
    #[error("wealth: non-finite control emitted on path {path} at step {step}")]
    NonFiniteControl { path: usize, step: usize },
    #[error("wealth: {0}")]
    Invalid(String),
    #[error("wealth: csv output failed: {0}")]
    Io(String),
}

/// What a control law may observe at a node.
#[derive(Clone, Copy, Debug)]
pub struct PolicyInput {
    pub step: usize,
    pub t: f64,
    pub wealth: f64,
    pub regime: usize,
}

pub type TimeLaw = Arc<dyn Fn(f64, &mut [f64]) + Send + Sync>;
pub type FeedbackLaw = Arc<dyn Fn(&PolicyInput, &mut [f64]) + Send + Sync>;

/// A vector-valued control, in whatever units the wrapping policy gives it.
#[derive(Clone)]
pub enum ControlLaw {
    Constant(Vec<f64>),
    TimeFunction(TimeLaw),
    Feedback(FeedbackLaw),
}

impl fmt::Debug for ControlLaw {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Constant(v) => f.debug_tuple("Constant").field(v).finish(),
            Self::TimeFunction(_) => f.write_str("TimeFunction(..)"),
            Self::Feedback(_) => f.write_str("Feedback(..)"),
        }
    }
}

impl ControlLaw {
    pub fn constant(v: &[f64]) -> Self {
        Self::Constant(v.to_vec())
    }

    pub fn zero(n: usize) -> Self {
        Self::Constant(vec![0.0; n])
    }

    pub fn time_function(f: impl Fn(f64, &mut [f64]) + Send + Sync + 'static) -> Self {
        Self::TimeFunction(Arc::new(f))
    }

    pub fn feedback(f: impl Fn(&PolicyInput, &mut [f64]) + Send + Sync + 'static) -> Self {
        Self::Feedback(Arc::new(f))
    }

    pub fn needs_wealth(&self) -> bool {
        matches!(self, Self::Feedback(_))
    }

    /// True for a constant law with every component exactly zero.
    pub fn is_zero(&self) -> bool {
        matches!(self, Self::Constant(v) if v.iter().all(|x| *x == 0.0))
    }

    #[inline]
    pub fn emit(&self, input: &PolicyInput, out: &mut [f64]) {
        match self {
            Self::Constant(v) => out.copy_from_slice(v),
            Self::TimeFunction(f) => f(input.t, out),
            Self::Feedback(f) => f(input, out),
        }
    }

    /// `a * self + b * other`. Two constants stay constant.
    pub fn combine(&self, a: f64, other: &ControlLaw, b: f64) -> ControlLaw {
        match (self, other) {
            (Self::Constant(x), Self::Constant(y)) => Self::Constant(x.iter().zip(y).map(|(p, q)| a * p + b * q).collect()),
            _ => {
                let (l, r) = (self.clone(), other.clone());
                let time_only = !l.needs_wealth() && !r.needs_wealth();
                if time_only {
                    Self::time_function(move |t, out| {
                        let input = PolicyInput { step: 0, t, wealth: f64::NAN, regime: 0 };
                        combine_into(&l, a, &r, b, &input, out);
                    })
                } else {
                    Self::feedback(move |input, out| combine_into(&l, a, &r, b, input, out))
                }
            }
        }
    }
}

fn combine_into(l: &ControlLaw, a: f64, r: &ControlLaw, b: f64, input: &PolicyInput, out: &mut [f64]) {
    let mut tmp = vec![0.0; out.len()];
    l.emit(input, out);
    r.emit(input, &mut tmp);
    for (o, t) in out.iter_mut().zip(&tmp) {
        *o = a * *o + b * t;
    }
}

/// Fractions of wealth per risky asset.
#[derive(Clone, Debug)]
pub struct PortfolioPolicy(pub ControlLaw);

/// Currency amounts per risky asset.
#[derive(Clone, Debug)]
pub struct DollarPolicy(pub ControlLaw);

/// A weight policy that switches to the riskless asset once `|X| > K`.
#[derive(Clone, Debug)]
pub struct StoppedPolicy {
    pub base: PortfolioPolicy,
    pub threshold: f64,
}

impl StoppedPolicy {
    pub fn new(base: PortfolioPolicy, threshold: f64) -> Result<Self, WealthError> {
        if !(threshold > 0.0) {
            return Err(WealthError::Invalid(format!("stopping threshold must be positive, got {threshold}")));
        }
        Ok(Self { base, threshold })
    }
}

impl From<PortfolioPolicy> for StoppedPolicy {
    fn from(base: PortfolioPolicy) -> Self {
        Self {
            base,
            threshold: DEFAULT_THRESHOLD,
        }
    }
}

/// Either kind of control, as accepted by the estimators.
#[derive(Clone, Debug)]
pub enum Control {
    Weights(StoppedPolicy),
    Dollars(DollarPolicy),
}

impl Control {
    pub fn weights(v: &[f64]) -> Self {
        Self::Weights(PortfolioPolicy(ControlLaw::constant(v)).into())
    }

    pub fn dollars(v: &[f64]) -> Self {
        Self::Dollars(DollarPolicy(ControlLaw::constant(v)))
    }

    pub fn law(&self) -> &ControlLaw {
        match self {
            Self::Weights(p) => &p.base.0,
            Self::Dollars(p) => &p.0,
        }
    }

    /// The control shifted by `eps * direction`, in the same units and with
    /// the same stopping threshold.
    pub fn perturbed(&self, direction: &ControlLaw, eps: f64) -> Control {
        let law = self.law().combine(1.0, direction, eps);
        match self {
            Self::Weights(p) => Self::Weights(StoppedPolicy {
                base: PortfolioPolicy(law),
                threshold: p.threshold,
            }),
            Self::Dollars(_) => Self::Dollars(DollarPolicy(law)),
        }
    }
}

/// State of a path at the start of step `step`, handed to path visitors.
pub struct StepView<'a> {
    pub step: usize,
    pub t: f64,
    pub regime: usize,
    pub log_wealth: f64,
    /// Wealth at the node; NaN for weight paths simulated without it.
    pub wealth: f64,
    /// Control applied over the step (zero once stopped).
    pub control: &'a [f64],
    pub active: bool,
    pub increment: &'a [f64],
    pub coeffs: &'a NodeCoefficients,
    /// `pi' theta` and `pi' Sigma pi` for the applied control.
    pub lin: f64,
    pub quad: f64,
}

/// Terminal state of one simulated path.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PathEnd {
    pub wealth: f64,
    pub log_wealth: f64,
    pub stop_step: Option<usize>,
}

/// Market coefficients on a grid together with a noise set; the shared input
/// of every path-level computation.
pub struct Scenario<'a> {
    pub model: &'a MarketModel,
    pub grid: TimeGrid,
    pub noise: &'a NoisePathSet,
    pub table: CoefficientTable,
}

impl<'a> Scenario<'a> {
    pub fn new(model: &'a MarketModel, grid: TimeGrid, noise: &'a NoisePathSet) -> Result<Self, WealthError> {
        if noise.n_steps() != grid.n_steps() {
            return Err(WealthError::Dimension(format!(
                "noise has {} steps, grid has {}",
                noise.n_steps(),
                grid.n_steps()
            )));
        }
        if noise.n_assets() != model.n_assets() {
            return Err(WealthError::Dimension(format!(
                "noise has {} assets, model has {}",
                noise.n_assets(),
                model.n_assets()
            )));
        }
        if noise.has_states() != model.has_markov_state() {
            return Err(WealthError::Dimension("noise set and model disagree on the regime chain".into()));
        }
        let table = model.coefficient_table(&grid)?;
        Ok(Self { model, grid, noise, table })
    }

    pub fn n_paths(&self) -> usize {
        self.noise.n_paths()
    }

    pub fn n_assets(&self) -> usize {
        self.model.n_assets()
    }

    #[inline]
    pub fn coeffs(&self, path: usize, node: usize) -> &NodeCoefficients {
        self.table.get(self.noise.regime(path, node), node)
    }

    pub(crate) fn check_law(&self, law: &ControlLaw) -> Result<(), WealthError> {
        if let ControlLaw::Constant(v) = law {
            if v.len() != self.n_assets() {
                return Err(WealthError::Dimension(format!("control has {} components, market has {} assets", v.len(), self.n_assets())));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(WealthError::NonFiniteControl { path: 0, step: 0 });
            }
        }
        Ok(())
    }

    /// Simulate path `i` under a weight policy. `visit` sees every step;
    /// `need_wealth` forces `StepView::wealth` to be filled.
    pub fn weight_path<F: FnMut(&StepView)>(
        &self,
        i: usize,
        policy: &StoppedPolicy,
        x0: f64,
        need_wealth: bool,
        mut visit: F,
    ) -> Result<PathEnd, WealthError> {
        let n = self.n_assets();
        let dt = self.grid.dt();
        let law = &policy.base.0;
        let need_wealth = need_wealth || law.needs_wealth();
        let k_max = policy.threshold;
        let ln_k = k_max.ln();
        let mut pi = vec![0.0; n];
        let mut log_x = x0.ln();
        let mut stop_step = None;

        let crossed = |log_x: f64, wealth: f64| -> bool {
            if wealth.is_nan() {
                // exp is only needed near the threshold
                log_x > ln_k - 1e-9 && log_x.exp() > k_max
            } else {
                wealth.abs() > k_max
            }
        };

        for k in 0..self.grid.n_steps() {
            let wealth = if need_wealth { log_x.exp() } else { f64::NAN };
            if stop_step.is_none() && crossed(log_x, wealth) {
                stop_step = Some(k);
            }
            let regime = self.noise.regime(i, k);
            let c = self.table.get(regime, k);
            let active = stop_step.is_none();
            if active {
                let input = PolicyInput {
                    step: k,
                    t: self.grid.t(k),
                    wealth: if law.needs_wealth() { wealth } else { f64::NAN },
                    regime,
                };
                law.emit(&input, &mut pi);
                if pi.iter().any(|p| !p.is_finite()) {
                    return Err(WealthError::NonFiniteControl { path: i, step: k });
                }
            } else {
                pi.iter_mut().for_each(|p| *p = 0.0);
            }
            let d = self.noise.increment(i, k);
            let (lin, quad) = if active { c.linear_quadratic(&pi) } else { (0.0, 0.0) };
            visit(&StepView {
                step: k,
                t: self.grid.t(k),
                regime,
                log_wealth: log_x,
                wealth,
                control: &pi,
                active,
                increment: d,
                coeffs: c,
                lin,
                quad,
            });
            let mut dot = 0.0;
            if active {
                for a in 0..n {
                    dot += pi[a] * d[a];
                }
            }
            log_x += (c.rate + lin - 0.5 * quad) * dt + dot;
        }
        let wealth = log_x.exp();
        if stop_step.is_none() && wealth.abs() > k_max {
            stop_step = Some(self.grid.n_steps());
        }
        Ok(PathEnd {
            wealth,
            log_wealth: log_x,
            stop_step,
        })
    }

    /// Simulate path `i` under a dollar policy.
    pub fn dollar_path<F: FnMut(&StepView)>(&self, i: usize, policy: &DollarPolicy, x0: f64, mut visit: F) -> Result<PathEnd, WealthError> {
        let n = self.n_assets();
        let dt = self.grid.dt();
        let law = &policy.0;
        let mut u = vec![0.0; n];
        let mut x = x0;
        for k in 0..self.grid.n_steps() {
            let regime = self.noise.regime(i, k);
            let c = self.table.get(regime, k);
            let input = PolicyInput {
                step: k,
                t: self.grid.t(k),
                wealth: x,
                regime,
            };
            law.emit(&input, &mut u);
            if u.iter().any(|p| !p.is_finite()) {
                return Err(WealthError::NonFiniteControl { path: i, step: k });
            }
            let d = self.noise.increment(i, k);
            let (lin, quad) = c.linear_quadratic(&u);
            visit(&StepView {
                step: k,
                t: self.grid.t(k),
                regime,
                log_wealth: safe_ln(x),
                wealth: x,
                control: &u,
                active: true,
                increment: d,
                coeffs: c,
                lin,
                quad,
            });
            let mut dot = 0.0;
            for a in 0..n {
                dot += u[a] * d[a];
            }
            x += (c.rate * x + lin) * dt + dot;
        }
        Ok(PathEnd {
            wealth: x,
            log_wealth: safe_ln(x),
            stop_step: None,
        })
    }

    /// Terminal state of path `i` under either kind of control.
    pub fn terminal(&self, i: usize, control: &Control, x0: f64) -> Result<PathEnd, WealthError> {
        match control {
            Control::Weights(p) => self.weight_path(i, p, x0, false, |_| {}),
            Control::Dollars(p) => self.dollar_path(i, p, x0, |_| {}),
        }
    }
}

fn safe_ln(x: f64) -> f64 {
    if x > 0.0 {
        x.ln()
    } else {
        f64::NAN
    }
}

/// Full simulated wealth paths, `[path][node]` layout.
#[derive(Clone, Debug)]
pub struct WealthPath {
    pub n_paths: usize,
    pub n_nodes: usize,
    pub n_assets: usize,
    pub wealth: Vec<f64>,
    /// `log X`; NaN where a dollar-controlled path is not positive.
    pub log_wealth: Vec<f64>,
    pub stop_step: Vec<Option<usize>>,
    /// Growth rate `gamma` per `[path][step]`; empty for dollar controls.
    pub growth_rate: Vec<f64>,
    /// Applied control per `[path][step][asset]`.
    pub controls: Vec<f64>,
}

impl WealthPath {
    pub fn wealth_of(&self, path: usize) -> &[f64] {
        &self.wealth[path * self.n_nodes..(path + 1) * self.n_nodes]
    }

    pub fn log_wealth_of(&self, path: usize) -> &[f64] {
        &self.log_wealth[path * self.n_nodes..(path + 1) * self.n_nodes]
    }

    pub fn control_at(&self, path: usize, step: usize) -> &[f64] {
        let n_steps = self.n_nodes - 1;
        let start = (path * n_steps + step) * self.n_assets;
        &self.controls[start..start + self.n_assets]
    }

    /// `sum_k |u_k|^2 dt` along one path.
    pub fn control_energy(&self, path: usize, dt: f64) -> f64 {
        (0..self.n_nodes - 1)
            .map(|k| self.control_at(path, k).iter().map(|u| u * u).sum::<f64>() * dt)
            .sum()
    }

    pub fn min_wealth(&self) -> f64 {
        self.wealth.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    /// Write `path_id,step,t,X,logX,stopped`, one row per path and node.
    pub fn write_csv<W: Write>(&self, grid: &TimeGrid, out: W) -> Result<(), WealthError> {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
        let io = |e: csv::Error| WealthError::Io(e.to_string());
        w.write_record(["path_id", "step", "t", "X", "logX", "stopped"]).map_err(io)?;
        for p in 0..self.n_paths {
            for k in 0..self.n_nodes {
                let stopped = matches!(self.stop_step[p], Some(s) if k >= s);
                w.write_record([
                    p.to_string(),
                    k.to_string(),
                    grid.t(k).to_string(),
                    self.wealth[p * self.n_nodes + k].to_string(),
                    self.log_wealth[p * self.n_nodes + k].to_string(),
                    (stopped as u8).to_string(),
                ])
                .map_err(io)?;
            }
        }
        w.flush().map_err(|e| WealthError::Io(e.to_string()))
    }
}

struct PathRecord {
    wealth: Vec<f64>,
    log_wealth: Vec<f64>,
    growth: Vec<f64>,
    controls: Vec<f64>,
    stop: Option<usize>,
}

fn collect_paths(records: Vec<PathRecord>, n_nodes: usize, n_assets: usize) -> WealthPath {
    let n_paths = records.len();
    let mut out = WealthPath {
        n_paths,
        n_nodes,
        n_assets,
        wealth: Vec::with_capacity(n_paths * n_nodes),
        log_wealth: Vec::with_capacity(n_paths * n_nodes),
        stop_step: Vec::with_capacity(n_paths),
        growth_rate: Vec::new(),
        controls: Vec::with_capacity(n_paths * (n_nodes - 1) * n_assets),
    };
    for r in records {
        out.wealth.extend(r.wealth);
        out.log_wealth.extend(r.log_wealth);
        out.growth_rate.extend(r.growth);
        out.controls.extend(r.controls);
        out.stop_step.push(r.stop);
    }
    out
}

/// Simulate every path of `noise` under a (possibly stopped) weight policy.
pub fn simulate_wealth_weights(
    model: &MarketModel,
    grid: &TimeGrid,
    noise: &NoisePathSet,
    policy: &StoppedPolicy,
    x0: f64,
) -> Result<WealthPath, WealthError> {
    if !(x0 > 0.0 && x0.is_finite()) {
        return Err(WealthError::Invalid(format!("initial wealth must be positive under weight control, got {x0}")));
    }
    let scn = Scenario::new(model, *grid, noise)?;
    scn.check_law(&policy.base.0)?;
    let n_nodes = grid.n_nodes();
    let n = model.n_assets();
    let records = (0..noise.n_paths())
        .into_par_iter()
        .map(|i| {
            let mut rec = PathRecord {
                wealth: Vec::with_capacity(n_nodes),
                log_wealth: Vec::with_capacity(n_nodes),
                growth: Vec::with_capacity(n_nodes - 1),
                controls: Vec::with_capacity((n_nodes - 1) * n),
                stop: None,
            };
            let end = scn.weight_path(i, policy, x0, true, |v| {
                rec.wealth.push(v.wealth);
                rec.log_wealth.push(v.log_wealth);
                rec.growth.push(v.coeffs.rate + v.lin - 0.5 * v.quad);
                rec.controls.extend_from_slice(v.control);
            })?;
            rec.wealth.push(end.wealth);
            rec.log_wealth.push(end.log_wealth);
            rec.stop = end.stop_step;
            Ok(rec)
        })
        .collect::<Result<Vec<_>, WealthError>>()?;
    Ok(collect_paths(records, n_nodes, n))
}

/// Simulate every path of `noise` under a dollar-amount policy. `x0` may
/// have any sign.
pub fn simulate_wealth_dollars(
    model: &MarketModel,
    grid: &TimeGrid,
    noise: &NoisePathSet,
    policy: &DollarPolicy,
    x0: f64,
) -> Result<WealthPath, WealthError> {
    if !x0.is_finite() {
        return Err(WealthError::Invalid(format!("initial wealth must be finite, got {x0}")));
    }
    let scn = Scenario::new(model, *grid, noise)?;
    scn.check_law(&policy.0)?;
    let n_nodes = grid.n_nodes();
    let n = model.n_assets();
    let records = (0..noise.n_paths())
        .into_par_iter()
        .map(|i| {
            let mut rec = PathRecord {
                wealth: Vec::with_capacity(n_nodes),
                log_wealth: Vec::with_capacity(n_nodes),
                growth: Vec::new(),
                controls: Vec::with_capacity((n_nodes - 1) * n),
                stop: None,
            };
            let end = scn.dollar_path(i, policy, x0, |v| {
                rec.wealth.push(v.wealth);
                rec.log_wealth.push(v.log_wealth);
                rec.controls.extend_from_slice(v.control);
            })?;
            rec.wealth.push(end.wealth);
            rec.log_wealth.push(end.log_wealth);
            Ok(rec)
        })
        .collect::<Result<Vec<_>, WealthError>>()?;
    Ok(collect_paths(records, n_nodes, n))
}

/// First node with `|X| > K`; equality does not count.
pub fn detect_stop(wealth: &[f64], threshold: f64) -> Option<usize> {
    wealth.iter().position(|x| x.abs() > threshold)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market::{build_market, sample_noise, Bounds, MarketConfig};

    fn desk() -> MarketModel {
        build_market(MarketConfig::constant(0.02, &[0.08], &[0.04], 1.0, Bounds { m: 1.0, eps: 0.01, c: 0.1 })).unwrap()
    }

    #[test]
    fn zero_weights_grow_at_rate() {
        let m = desk();
        let g = TimeGrid::new(1.0, 250).unwrap();
        let noise = sample_noise(&m, &g, 0, 5).unwrap();
        let p = simulate_wealth_weights(&m, &g, &noise, &PortfolioPolicy(ControlLaw::zero(1)).into(), 1.0).unwrap();
        for i in 0..5 {
            let xt = p.wealth_of(i)[250];
            assert!((xt - 0.02f64.exp()).abs() < 1e-13, "{xt}");
        }
    }

    #[test]
    fn deterministic_growth_rate() {
        let m = desk();
        let g = TimeGrid::new(1.0, 250).unwrap();
        let noise = sample_noise(&m, &g, 1, 1).unwrap();
        let p = simulate_wealth_weights(&m, &g, &noise, &PortfolioPolicy(ControlLaw::constant(&[1.5])).into(), 1.0).unwrap();
        let mt: f64 = noise.terminal_noise(0)[0];
        let expected = 0.065 + 1.5 * mt;
        assert!((p.log_wealth_of(0)[250] - expected).abs() < 1e-12);
        assert!((p.growth_rate[0] - 0.065).abs() < 1e-15);
    }

    #[test]
    fn single_step_hand_recursion() {
        let m = desk();
        let g = TimeGrid::new(1.0, 1).unwrap();
        let noise = sample_noise(&m, &g, 4, 1).unwrap();
        let d = noise.increment(0, 0)[0];
        let p = simulate_wealth_weights(&m, &g, &noise, &PortfolioPolicy(ControlLaw::constant(&[1.0])).into(), 1.0).unwrap();
        assert!((p.log_wealth_of(0)[1] - (0.06 + d)).abs() < 1e-15);
    }

    #[test]
    fn dollar_zero_control_compounds() {
        let m = desk();
        let g = TimeGrid::new(1.0, 250).unwrap();
        let noise = sample_noise(&m, &g, 2, 3).unwrap();
        let p = simulate_wealth_dollars(&m, &g, &noise, &DollarPolicy(ControlLaw::zero(1)), 2.0).unwrap();
        let expected = 2.0 * (1.0 + 0.02 / 250.0f64).powi(250);
        assert!((p.wealth_of(1)[250] - expected).abs() < 1e-13);
        assert!(p.growth_rate.is_empty());
    }

    #[test]
    fn dollar_single_step_hand_recursion() {
        let m = build_market(MarketConfig::constant(0.0, &[0.06], &[0.04], 1.0, Bounds { m: 1.0, eps: 0.01, c: 0.1 })).unwrap();
        let g = TimeGrid::new(1.0, 1).unwrap();
        let noise = sample_noise(&m, &g, 9, 1).unwrap();
        let d = noise.increment(0, 0)[0];
        let p = simulate_wealth_dollars(&m, &g, &noise, &DollarPolicy(ControlLaw::constant(&[0.75])), 1.0).unwrap();
        assert!((p.wealth_of(0)[1] - (1.045 + 0.75 * d)).abs() < 1e-15);
    }

    #[test]
    fn stopping_zeroes_weights() {
        let m = desk();
        let g = TimeGrid::new(1.0, 250).unwrap();
        let noise = sample_noise(&m, &g, 3, 50).unwrap();
        let pol = StoppedPolicy::new(PortfolioPolicy(ControlLaw::constant(&[3.0])), 1.1).unwrap();
        let p = simulate_wealth_weights(&m, &g, &noise, &pol, 1.0).unwrap();
        let mut stopped = 0;
        for i in 0..50 {
            let s = p.stop_step[i];
            assert_eq!(s, detect_stop(p.wealth_of(i), 1.1));
            if let Some(s) = s {
                stopped += 1;
                for k in s..250 {
                    assert_eq!(p.control_at(i, k), &[0.0]);
                    let ratio = p.wealth_of(i)[k + 1] / p.wealth_of(i)[k];
                    assert!((ratio - (0.02 / 250.0f64).exp()).abs() < 1e-12);
                }
            }
        }
        assert!(stopped > 0);
    }

    #[test]
    fn detect_stop_examples() {
        assert_eq!(detect_stop(&[1.0, 1.0, 1.0], 2.0), None);
        assert_eq!(detect_stop(&[1.0, 1.5, 2.5, 1.0], 2.0), Some(2));
        assert_eq!(detect_stop(&[1.0, 2.0], 2.0), None);
        assert_eq!(detect_stop(&[1.0, -3.0], 2.0), Some(1));
    }

    #[test]
    fn non_finite_control_is_reported() {
        let m = desk();
        let g = TimeGrid::new(1.0, 10).unwrap();
        let noise = sample_noise(&m, &g, 3, 2).unwrap();
        let law = ControlLaw::time_function(|t, out| out[0] = if t > 0.5 { f64::NAN } else { 1.0 });
        let err = simulate_wealth_weights(&m, &g, &noise, &PortfolioPolicy(law).into(), 1.0).unwrap_err();
        assert!(matches!(err, WealthError::NonFiniteControl { path: 0, step: 6 }));
    }

    #[test]
    fn combine_constants_and_functions() {
        let a = ControlLaw::constant(&[1.0, 2.0]);
        let b = ControlLaw::constant(&[0.5, -1.0]);
        match a.combine(0.3, &b, 0.7) {
            ControlLaw::Constant(v) => {
                assert!((v[0] - 0.65).abs() < 1e-15 && (v[1] - (-0.1)).abs() < 1e-15);
            }
            other => panic!("expected constant, got {other:?}"),
        }
        let f = ControlLaw::time_function(|t, out| out[0] = t);
        let c = f.combine(1.0, &ControlLaw::constant(&[2.0]), 0.5);
        let mut out = [0.0];
        c.emit(&PolicyInput { step: 0, t: 0.25, wealth: f64::NAN, regime: 0 }, &mut out);
        assert_eq!(out[0], 1.25);
        assert!(!c.needs_wealth());
    }

    #[test]
    fn csv_row_count() {
        let m = desk();
        let g = TimeGrid::new(1.0, 20).unwrap();
        let noise = sample_noise(&m, &g, 3, 10).unwrap();
        let p = simulate_wealth_weights(&m, &g, &noise, &PortfolioPolicy(ControlLaw::constant(&[1.0])).into(), 1.0).unwrap();
        let mut buf = Vec::new();
        p.write_csv(&g, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 1 + 10 * 21);
        assert!(text.starts_with("path_id,step,t,X,logX,stopped\n0,0,0,1,0,0\n"));
    }
}
