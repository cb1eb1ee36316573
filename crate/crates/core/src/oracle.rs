//! Reference answers: closed forms, brute-force policy search and gradient
//! ascent driven by the Gateaux formula.

use std::io::Write;

use thiserror::Error;

use crate::fbsde::{solve_bsde_for_policy, FbsdeError};
use crate::market::{sample_noise, sample_noise_antithetic, MarketError, MarketModel, NoisePathSet, TimeGrid};
use crate::stats::{combined_std_error, paired_difference, Estimate};
use crate::utility::UtilitySpec;
use crate::variational::{evaluate_many, gateaux_formula, performance_criterion, utility_samples, VariationalError};
use crate::wealth::{Control, ControlLaw, PortfolioPolicy, Scenario, StoppedPolicy, WealthError};

/// Grid search handles at most this many assets.
pub const MAX_SEARCH_ASSETS: usize = 3;
/// Points evaluated together on each path.
const SEARCH_CHUNK: usize = 64;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error(transparent)]
    Market(#[from] MarketError),
    #[error(transparent)]
    Wealth(#[from] WealthError),
    #[error(transparent)]
    Variational(#[from] VariationalError),
    #[error(transparent)]
    Fbsde(#[from] FbsdeError),
    #[error("oracle: closed forms need constant market coefficients")]
    NonConstant,
    #[error("oracle: exponential closed form needs r = 0 (got r = {rate}); use the coupled solver")]
    ExponentialRate { rate: f64 },
    #[error("oracle: {0}")]
    Unsupported(String),
    #[error("oracle: invalid search: {0}")]
    InvalidSpec(String),
    #[error("oracle: ascent diverged at iteration {iteration} (policy {policy:?}): {message}")]
    Diverged { iteration: usize, policy: Vec<f64>, message: String },
}

/// A constant optimal control.
#[derive(Clone, Debug, PartialEq)]
pub enum ClosedForm {
    Weights(Vec<f64>),
    Dollars(Vec<f64>),
}

impl ClosedForm {
    pub fn values(&self) -> &[f64] {
        match self {
            Self::Weights(v) | Self::Dollars(v) => v,
        }
    }

    pub fn to_control(&self) -> Control {
        match self {
            Self::Weights(v) => Control::weights(v),
            Self::Dollars(v) => Control::dollars(v),
        }
    }
}

/// `Sigma^{-1} theta` for log, `Sigma^{-1} theta / (1 - eta)` for power and
/// the dollar amounts `Sigma^{-1} theta / gamma` for exponential utility with `r = 0`.
pub fn closed_form_policy(utility: &UtilitySpec, model: &MarketModel) -> Result<ClosedForm, OracleError> {
    if !model.is_constant() {
        return Err(OracleError::NonConstant);
    }
    let c = model.coefficients_at(0.0, model.initial_regime())?;
    // Sigma^{-1} alpha - r Sigma^{-1} 1 through LU (no square roots), so
    // exactly representable ratios stay exact
    let lu = c.sigma.clone().lu();
    let a = lu.solve(&c.alpha).ok_or(MarketError::Factorization { t: 0.0, regime: 0 })?;
    let ones = lu
        .solve(&nalgebra::DVector::from_element(c.alpha.len(), 1.0))
        .ok_or(MarketError::Factorization { t: 0.0, regime: 0 })?;
    let merton: Vec<f64> = a.iter().zip(ones.iter()).map(|(x, o)| x - c.rate * o).collect();
    match utility {
        UtilitySpec::Log => Ok(ClosedForm::Weights(merton)),
        UtilitySpec::Power { eta } => Ok(ClosedForm::Weights(merton.iter().map(|m| m / (1.0 - eta)).collect())),
        UtilitySpec::Exponential { gamma } => {
            if c.rate != 0.0 {
                return Err(OracleError::ExponentialRate { rate: c.rate });
            }
            Ok(ClosedForm::Dollars(merton.iter().map(|m| m / gamma).collect()))
        }
        UtilitySpec::Custom(_) => Err(OracleError::Unsupported("no closed form for custom utilities".into())),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PolicyFamily {
    ConstantWeights,
    ConstantDollars,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchSpec {
    pub family: PolicyFamily,
    /// Box corners, one entry per asset.
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub step: f64,
    pub n_paths: usize,
    pub seed: u64,
    /// Evaluate every grid point on the same noise.
    pub crn: bool,
    /// Mirrored noise pairs (needs an even path count).
    pub antithetic: bool,
    /// Stopping threshold for weight policies.
    pub threshold: f64,
}

impl SearchSpec {
    fn axis(&self, a: usize) -> Vec<f64> {
        let count = ((self.upper[a] - self.lower[a]) / self.step + 1e-9).floor() as usize + 1;
        (0..count).map(|j| self.lower[a] + j as f64 * self.step).collect()
    }

    fn control(&self, coords: &[f64]) -> Result<Control, OracleError> {
        Ok(match self.family {
            PolicyFamily::ConstantWeights => Control::Weights(StoppedPolicy::new(PortfolioPolicy(ControlLaw::constant(coords)), self.threshold)?),
            PolicyFamily::ConstantDollars => Control::dollars(coords),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchPoint {
    pub coords: Vec<f64>,
    pub estimate: Estimate,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchResult {
    pub points: Vec<SearchPoint>,
    pub argmax: usize,
    pub runner_up: Option<usize>,
    /// Best minus runner-up value with its (paired, under CRN) standard error.
    pub gap: Estimate,
    /// The runner-up is within one standard error of the best point.
    pub inconclusive: bool,
    /// Grid points that beat every axis neighbour by more than twice their
    /// own standard error.
    pub local_maxima: usize,
}

impl SearchResult {
    pub fn best(&self) -> &SearchPoint {
        &self.points[self.argmax]
    }

    /// `coord_1..coord_n,value,std_error,argmax`; the grid in order, then the
    /// argmax repeated with the flag set.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), csv::Error> {
        let n = self.points.first().map_or(0, |p| p.coords.len());
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
        let mut header: Vec<String> = (1..=n).map(|a| format!("coord_{a}")).collect();
        header.extend(["value", "std_error", "argmax"].map(String::from));
        w.write_record(&header)?;
        let row = |p: &SearchPoint, flag: u8| {
            let mut r: Vec<String> = p.coords.iter().map(|c| c.to_string()).collect();
            r.push(p.estimate.mean.to_string());
            r.push(p.estimate.std_error.to_string());
            r.push(flag.to_string());
            r
        };
        for p in &self.points {
            w.write_record(row(p, 0))?;
        }
        w.write_record(row(self.best(), 1))?;
        w.flush()?;
        Ok(())
    }
}

fn make_noise(model: &MarketModel, grid: &TimeGrid, seed: u64, n_paths: usize, antithetic: bool) -> Result<NoisePathSet, OracleError> {
    Ok(if antithetic {
        sample_noise_antithetic(model, grid, seed, n_paths)?
    } else {
        sample_noise(model, grid, seed, n_paths)?
    })
}

/// Evaluate `E[U(X_T)]` on every point of a box grid of constant policies
/// and report the best point.
pub fn grid_search(utility: &UtilitySpec, model: &MarketModel, grid: &TimeGrid, spec: &SearchSpec, x0: f64) -> Result<SearchResult, OracleError> {
    let n = model.n_assets();
    if n > MAX_SEARCH_ASSETS {
        return Err(OracleError::InvalidSpec(format!("grid search supports at most {MAX_SEARCH_ASSETS} assets, market has {n}")));
    }
    if spec.lower.len() != n || spec.upper.len() != n {
        return Err(OracleError::InvalidSpec(format!("box needs {n} coordinates per corner")));
    }
    if !(spec.step.is_finite() && spec.step > 0.0) {
        return Err(OracleError::InvalidSpec(format!("grid step must be positive, got {}", spec.step)));
    }
    if spec.lower.iter().chain(&spec.upper).any(|v| !v.is_finite()) || spec.lower.iter().zip(&spec.upper).any(|(l, u)| l > u) {
        return Err(OracleError::InvalidSpec("box must be finite with lower <= upper".into()));
    }
    if spec.n_paths < 2 {
        return Err(OracleError::InvalidSpec("at least two paths are needed".into()));
    }
    let axes: Vec<Vec<f64>> = (0..n).map(|a| spec.axis(a)).collect();
    let shape: Vec<usize> = axes.iter().map(|a| a.len()).collect();
    let total: usize = shape.iter().product();
    let coords_of = |mut idx: usize| -> Vec<f64> {
        let mut c = vec![0.0; n];
        for a in (0..n).rev() {
            c[a] = axes[a][idx % shape[a]];
            idx /= shape[a];
        }
        c
    };
    let all_coords: Vec<Vec<f64>> = (0..total).map(coords_of).collect();
    let controls: Vec<Control> = all_coords.iter().map(|c| spec.control(c)).collect::<Result<_, _>>()?;

    let shared = if spec.crn { Some(make_noise(model, grid, spec.seed, spec.n_paths, spec.antithetic)?) } else { None };
    let mut estimates = Vec::with_capacity(total);
    match &shared {
        Some(noise) => {
            let scn = Scenario::new(model, *grid, noise)?;
            for chunk in controls.chunks(SEARCH_CHUNK) {
                estimates.extend(evaluate_many(&scn, chunk, utility, x0)?);
            }
        }
        None => {
            for (j, c) in controls.iter().enumerate() {
                let noise = make_noise(model, grid, spec.seed.wrapping_add(j as u64), spec.n_paths, spec.antithetic)?;
                let scn = Scenario::new(model, *grid, &noise)?;
                estimates.push(performance_criterion(&scn, c, utility, x0)?);
            }
        }
    }

    let argmax = (0..total).fold(0, |b, j| if estimates[j].mean > estimates[b].mean { j } else { b });
    let runner_up = (0..total).filter(|&j| j != argmax).fold(None, |b: Option<usize>, j| match b {
        Some(b) if estimates[b].mean >= estimates[j].mean => Some(b),
        _ => Some(j),
    });
    let gap = match (runner_up, &shared) {
        (Some(r), Some(noise)) => {
            let scn = Scenario::new(model, *grid, noise)?;
            let s = utility_samples(&scn, &[controls[argmax].clone(), controls[r].clone()], utility, x0)?;
            paired_difference(&s[0], &s[1], noise.pairing())
        }
        (Some(r), None) => Estimate {
            mean: estimates[argmax].mean - estimates[r].mean,
            std_error: combined_std_error(&estimates[argmax], &estimates[r]),
            n: spec.n_paths,
        },
        (None, _) => Estimate::exact(f64::INFINITY),
    };
    let inconclusive = gap.mean <= gap.std_error;

    let mut local_maxima = 0;
    for j in 0..total {
        let mut is_max = true;
        let mut stride = 1;
        for a in (0..n).rev() {
            let pos = (j / stride) % shape[a];
            for nb in [pos.checked_sub(1), (pos + 1 < shape[a]).then_some(pos + 1)].into_iter().flatten() {
                let k = j - pos * stride + nb * stride;
                if estimates[j].mean - estimates[k].mean <= 2.0 * estimates[j].std_error {
                    is_max = false;
                }
            }
            stride *= shape[a];
        }
        if is_max && total > 1 {
            local_maxima += 1;
        }
    }

    let points = all_coords
        .into_iter()
        .zip(estimates)
        .map(|(coords, estimate)| SearchPoint { coords, estimate })
        .collect();
    Ok(SearchResult {
        points,
        argmax,
        runner_up,
        gap,
        inconclusive,
        local_maxima,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct AscentStep {
    pub policy: Vec<f64>,
    pub gradient: Vec<Estimate>,
    pub objective: Estimate,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AscentResult {
    pub trajectory: Vec<AscentStep>,
    /// Number of policy updates made.
    pub iterations: usize,
    pub converged: bool,
}

impl AscentResult {
    pub fn last(&self) -> &AscentStep {
        self.trajectory.last().expect("trajectory always has the start point")
    }
}

/// Default ascent step `0.5 / (C T)`.
pub fn default_step(model: &MarketModel) -> f64 {
    0.5 / (model.bounds().c * model.horizon())
}

/// Constant-weight ascent `pi <- pi + step * grad` with the gradient taken
/// from the Gateaux formula in coordinate directions. Stops once
/// `|grad| < tol` or after `max_iters` updates.
#[allow(clippy::too_many_arguments)]
pub fn gradient_ascent(
    utility: &UtilitySpec,
    model: &MarketModel,
    grid: &TimeGrid,
    noise: &NoisePathSet,
    start: &[f64],
    step: Option<f64>,
    max_iters: usize,
    tol: f64,
    x0: f64,
) -> Result<AscentResult, OracleError> {
    if !utility.is_scale_free() {
        return Err(OracleError::Unsupported(format!("gradient ascent needs log or power utility, got {}", utility.kind())));
    }
    let n = model.n_assets();
    if start.len() != n {
        return Err(OracleError::InvalidSpec(format!("start policy needs {n} components")));
    }
    let step = step.unwrap_or_else(|| default_step(model));
    let scn = Scenario::new(model, *grid, noise)?;
    let mut pi = start.to_vec();
    let mut trajectory = Vec::new();
    let mut iterations = 0;
    let mut converged = false;
    loop {
        let diverged = |e: &dyn std::fmt::Display, pi: &[f64]| OracleError::Diverged {
            iteration: iterations,
            policy: pi.to_vec(),
            message: e.to_string(),
        };
        let law = ControlLaw::constant(&pi);
        let policy: StoppedPolicy = PortfolioPolicy(law.clone()).into();
        let bsde = solve_bsde_for_policy(utility, model, grid, &law)?;
        let objective = performance_criterion(&scn, &Control::Weights(policy.clone()), utility, x0).map_err(|e| diverged(&e, &pi))?;
        let gradient: Vec<Estimate> = (0..n)
            .map(|a| {
                let mut e = vec![0.0; n];
                e[a] = 1.0;
                gateaux_formula(&scn, &policy, &ControlLaw::Constant(e), utility, x0, &bsde).map(|g| g.estimate())
            })
            .collect::<Result<_, _>>()
            .map_err(|e| diverged(&e, &pi))?;
        let norm = gradient.iter().map(|g| g.mean * g.mean).sum::<f64>().sqrt();
        trajectory.push(AscentStep {
            policy: pi.clone(),
            gradient: gradient.clone(),
            objective,
        });
        if norm < tol {
            converged = true;
            break;
        }
        if iterations == max_iters {
            break;
        }
        for (p, g) in pi.iter_mut().zip(&gradient) {
            *p += step * g.mean;
        }
        if pi.iter().any(|p| !p.is_finite()) {
            return Err(diverged(&"non-finite policy", &pi));
        }
        iterations += 1;
    }
    Ok(AscentResult {
        trajectory,
        iterations,
        converged,
    })
}

/// Midpoint concavity test for constant dollar policies `a` and `b`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConcavityCheck {
    pub at_a: Estimate,
    pub at_b: Estimate,
    pub at_mid: Estimate,
    /// `H(mid) - (H(a) + H(b)) / 2`, paired over paths.
    pub gap: Estimate,
    /// `gap >= -2 SE`.
    pub passes: bool,
}

pub fn concavity_witness(scn: &Scenario, utility: &UtilitySpec, a: &[f64], b: &[f64], x0: f64) -> Result<ConcavityCheck, OracleError> {
    let mid: Vec<f64> = a.iter().zip(b).map(|(x, y)| 0.5 * (x + y)).collect();
    let controls = [Control::dollars(a), Control::dollars(b), Control::dollars(&mid)];
    let s = utility_samples(scn, &controls, utility, x0)?;
    let pairing = scn.noise.pairing();
    let chord: Vec<f64> = s[0].iter().zip(&s[1]).map(|(x, y)| 0.5 * (x + y)).collect();
    let gap = paired_difference(&s[2], &chord, pairing);
    Ok(ConcavityCheck {
        at_a: Estimate::from_samples(&s[0], pairing),
        at_b: Estimate::from_samples(&s[1], pairing),
        at_mid: Estimate::from_samples(&s[2], pairing),
        passes: gap.mean >= -2.0 * gap.std_error,
        gap,
    })
}
