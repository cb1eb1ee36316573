//! Monte Carlo summary statistics.
//!
//! Antithetic noise sets produce paths in mirrored pairs `(2j, 2j+1)`. The two
//! members of a pair are not independent, so the standard error is computed
//! from the pair averages in that case.

/// How the per-path samples of a noise set are correlated.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pairing {
    Independent,
    Antithetic,
}

/// A Monte Carlo mean with its standard error.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Estimate {
    pub mean: f64,
    pub std_error: f64,
    /// Number of per-path samples that went into the mean.
    pub n: usize,
}

impl Estimate {
    pub fn exact(value: f64) -> Self {
        Self {
            mean: value,
            std_error: 0.0,
            n: 0,
        }
    }

    /// Mean and standard error of `samples`. Sums are taken sequentially so
    /// the result does not depend on how the samples were produced.
    pub fn from_samples(samples: &[f64], pairing: Pairing) -> Self {
        let n = samples.len();
        if n == 0 {
            return Self {
                mean: 0.0,
                std_error: 0.0,
                n: 0,
            };
        }
        let mean = samples.iter().sum::<f64>() / n as f64;
        let std_error = match pairing {
            Pairing::Antithetic if n >= 4 && n.is_multiple_of(2) => {
                let groups: Vec<f64> = samples.chunks_exact(2).map(|p| 0.5 * (p[0] + p[1])).collect();
                standard_error(&groups, mean)
            }
            _ => standard_error(samples, mean),
        };
        Self { mean, std_error, n }
    }

    /// `|mean - target| <= k * std_error + floor`.
    pub fn within(&self, target: f64, k: f64, floor: f64) -> bool {
        (self.mean - target).abs() <= k * self.std_error + floor
    }
}

fn standard_error(samples: &[f64], mean: f64) -> f64 {
    let m = samples.len();
    if m < 2 {
        return 0.0;
    }
    let ss: f64 = samples.iter().map(|x| (x - mean) * (x - mean)).sum();
    (ss / (m as f64 - 1.0) / m as f64).sqrt()
}

/// Estimate of `a - b` from paired per-path samples.
pub fn paired_difference(a: &[f64], b: &[f64], pairing: Pairing) -> Estimate {
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    Estimate::from_samples(&diff, pairing)
}

/// Combined standard error of two estimates, ignoring their correlation.
pub fn combined_std_error(a: &Estimate, b: &Estimate) -> f64 {
    (a.std_error * a.std_error + b.std_error * b.std_error).sqrt()
}

/// Least-squares slope of `y` against `x`.
pub fn ols_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}
