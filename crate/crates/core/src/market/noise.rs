//! Gaussian martingale increments with prescribed covariation.
//!
//! Path `i` draws from its own ChaCha stream (`seed`, stream `i`), so any path
//! can be regenerated on its own and the result never depends on how paths
//! are scheduled across threads. In antithetic mode paths `2j` and `2j+1`
//! share stream `j` and the odd path uses the negated draws.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use super::{MarketError, MarketModel, TimeGrid};
use crate::stats::Pairing;

const REGIME_SALT: u64 = 0x9E37_79B9_7F4A_7C15;

/// Noise increments `Delta M` laid out as `[path][step][asset]`, plus the
/// regime index at every node when the model has a Markov state.
#[derive(Clone, Debug)]
pub struct NoisePathSet {
    seed: u64,
    n_paths: usize,
    n_steps: usize,
    n_assets: usize,
    antithetic: bool,
    increments: Vec<f64>,
    states: Option<Vec<u8>>,
}

impl NoisePathSet {
    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn n_assets(&self) -> usize {
        self.n_assets
    }

    pub fn is_antithetic(&self) -> bool {
        self.antithetic
    }

    pub fn pairing(&self) -> Pairing {
        if self.antithetic {
            Pairing::Antithetic
        } else {
            Pairing::Independent
        }
    }

    pub fn has_states(&self) -> bool {
        self.states.is_some()
    }

    /// All increments of one path, `[step][asset]`.
    #[inline]
    pub fn path(&self, i: usize) -> &[f64] {
        let len = self.n_steps * self.n_assets;
        &self.increments[i * len..(i + 1) * len]
    }

    #[inline]
    pub fn increment(&self, i: usize, k: usize) -> &[f64] {
        let start = (i * self.n_steps + k) * self.n_assets;
        &self.increments[start..start + self.n_assets]
    }

    /// Regime index of path `i` at node `k` (0 when the model has no chain).
    #[inline]
    pub fn regime(&self, i: usize, k: usize) -> usize {
        match &self.states {
            Some(s) => s[i * (self.n_steps + 1) + k] as usize,
            None => 0,
        }
    }

    /// `M_T` for path `i`.
    pub fn terminal_noise(&self, i: usize) -> Vec<f64> {
        let mut m = vec![0.0; self.n_assets];
        for k in 0..self.n_steps {
            for (a, d) in m.iter_mut().zip(self.increment(i, k)) {
                *a += d;
            }
        }
        m
    }
}

/// Independent noise paths.
pub fn sample_noise(model: &MarketModel, grid: &TimeGrid, seed: u64, n_paths: usize) -> Result<NoisePathSet, MarketError> {
    generate(model, grid, seed, n_paths, false)
}

/// Noise paths in mirrored pairs; `n_paths` must be even.
pub fn sample_noise_antithetic(model: &MarketModel, grid: &TimeGrid, seed: u64, n_paths: usize) -> Result<NoisePathSet, MarketError> {
    if !n_paths.is_multiple_of(2) {
        return Err(MarketError::Invalid(format!("antithetic sampling needs an even path count, got {n_paths}")));
    }
    generate(model, grid, seed, n_paths, true)
}

fn generate(model: &MarketModel, grid: &TimeGrid, seed: u64, n_paths: usize, antithetic: bool) -> Result<NoisePathSet, MarketError> {
    let table = model.coefficient_table(grid)?;
    let n_steps = grid.n_steps();
    let n_assets = model.n_assets();
    let per_path = n_steps * n_assets;
    let mut increments = vec![0.0; n_paths * per_path];
    let mut states = model.chain().map(|_| vec![0u8; n_paths * (n_steps + 1)]);

    // cumulative one-step transition rows
    let cumulative: Option<Vec<Vec<f64>>> = model.chain().map(|chain| {
        let p = chain.transition_matrix(grid.dt());
        (0..p.nrows())
            .map(|i| {
                let mut acc = 0.0;
                (0..p.ncols())
                    .map(|j| {
                        acc += p[(i, j)].max(0.0);
                        acc
                    })
                    .collect()
            })
            .collect()
    });
    let chain_seed = model.chain().map(|c| c.seed ^ REGIME_SALT).unwrap_or(0);
    let initial = model.initial_regime();
    let sqrt_dt = grid.dt().sqrt();

    let fill = |i: usize, inc: &mut [f64], st: Option<&mut [u8]>| {
        let (stream, sign) = if antithetic { ((i / 2) as u64, if i % 2 == 1 { -1.0 } else { 1.0 }) } else { (i as u64, 1.0) };
        let regimes: Option<&[u8]> = match (st, &cumulative) {
            (Some(st), Some(cum)) => {
                let mut rng = ChaCha8Rng::seed_from_u64(chain_seed);
                rng.set_stream(stream);
                st[0] = initial as u8;
                for k in 0..n_steps {
                    let row = &cum[st[k] as usize];
                    let u: f64 = rng.random::<f64>() * row[row.len() - 1];
                    let next = row.iter().position(|&c| u < c).unwrap_or(row.len() - 1);
                    st[k + 1] = next as u8;
                }
                Some(&*st)
            }
            _ => None,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        let mut xi = vec![0.0; n_assets];
        for k in 0..n_steps {
            let regime = regimes.map_or(0, |r| r[k] as usize);
            let l = &table.get(regime, k).chol;
            for z in xi.iter_mut() {
                *z = rng.sample::<f64, _>(StandardNormal);
            }
            let out = &mut inc[k * n_assets..(k + 1) * n_assets];
            for a in 0..n_assets {
                let mut s = 0.0;
                for b in 0..=a {
                    s += l[(a, b)] * xi[b];
                }
                out[a] = sign * sqrt_dt * s;
            }
        }
    };

    if per_path > 0 {
        match states.as_mut() {
            Some(st) => increments
                .par_chunks_mut(per_path)
                .zip(st.par_chunks_mut(n_steps + 1))
                .enumerate()
                .for_each(|(i, (inc, s))| fill(i, inc, Some(s))),
            None => increments
                .par_chunks_mut(per_path)
                .enumerate()
                .for_each(|(i, inc)| fill(i, inc, None)),
        }
    }

    Ok(NoisePathSet {
        seed,
        n_paths,
        n_steps,
        n_assets,
        antithetic,
        increments,
        states,
    })
}

/// Sample covariance of the increments at step `k`, row-major.
pub fn step_covariance(noise: &NoisePathSet, k: usize) -> Vec<f64> {
    let n = noise.n_assets();
    let mut cov = vec![0.0; n * n];
    let mut mean = vec![0.0; n];
    for i in 0..noise.n_paths() {
        for (m, d) in mean.iter_mut().zip(noise.increment(i, k)) {
            *m += d;
        }
    }
    for m in mean.iter_mut() {
        *m /= noise.n_paths() as f64;
    }
    for i in 0..noise.n_paths() {
        let d = noise.increment(i, k);
        for a in 0..n {
            for b in 0..n {
                cov[a * n + b] += (d[a] - mean[a]) * (d[b] - mean[b]);
            }
        }
    }
    for c in cov.iter_mut() {
        *c /= (noise.n_paths() - 1) as f64;
    }
    cov
}
