use super::MarketError;

/// Uniform discretization of `[0, T]` into `n_steps` intervals.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimeGrid {
    horizon: f64,
    n_steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, n_steps: usize) -> Result<Self, MarketError> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(MarketError::Grid(format!("horizon must be positive, got {horizon}")));
        }
        if n_steps == 0 {
            return Err(MarketError::Grid("n_steps must be positive".into()));
        }
        Ok(Self { horizon, n_steps })
    }

    /// Grid with step `dt`; `horizon / dt` must be an integer to within 1e-9.
    pub fn from_dt(horizon: f64, dt: f64) -> Result<Self, MarketError> {
        if !(dt.is_finite() && dt > 0.0) {
            return Err(MarketError::Grid(format!("dt must be positive, got {dt}")));
        }
        let steps = horizon / dt;
        let rounded = steps.round();
        if rounded < 1.0 || (steps - rounded).abs() > 1e-9 * rounded.max(1.0) {
            return Err(MarketError::Grid(format!("horizon {horizon} is not a whole number of steps of {dt}")));
        }
        Self::new(horizon, rounded as usize)
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn n_nodes(&self) -> usize {
        self.n_steps + 1
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.n_steps as f64
    }

    /// Node time `t_k`; `t(n_steps) == horizon` exactly.
    #[inline]
    pub fn t(&self, k: usize) -> f64 {
        self.horizon * k as f64 / self.n_steps as f64
    }

    pub fn times(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.n_nodes()).map(|k| self.t(k))
    }

    /// Index of the node at or immediately before `t`.
    pub fn node_at(&self, t: f64) -> usize {
        let k = (t / self.dt() + 1e-9).floor();
        (k.max(0.0) as usize).min(self.n_steps)
    }
}
