use rayon::prelude::*;

use super::{MarketError, MarketModel, NoisePathSet, TimeGrid};

/// Simulated prices. `risky` is `[path][node][asset]`, `riskless` is
/// `[path][node]` (the risk-free leg depends on the path only through the regime).
#[derive(Clone, Debug)]
pub struct PricePaths {
    pub n_paths: usize,
    pub n_nodes: usize,
    pub n_assets: usize,
    pub risky: Vec<f64>,
    pub riskless: Vec<f64>,
}

impl PricePaths {
    pub fn risky_at(&self, path: usize, node: usize) -> &[f64] {
        let start = (path * self.n_nodes + node) * self.n_assets;
        &self.risky[start..start + self.n_assets]
    }

    pub fn riskless_at(&self, path: usize, node: usize) -> f64 {
        self.riskless[path * self.n_nodes + node]
    }
}

/// Log-Euler price recursion
/// `log P_{k+1} = log P_k + (alpha - Sigma_ii / 2) dt + Delta M`, exact for
/// coefficients that are constant between nodes. Prices stay positive.
pub fn simulate_asset_prices(model: &MarketModel, grid: &TimeGrid, noise: &NoisePathSet) -> Result<PricePaths, MarketError> {
    if noise.n_steps() != grid.n_steps() || noise.n_assets() != model.n_assets() {
        return Err(MarketError::Dimension("noise set does not match model and grid".into()));
    }
    let table = model.coefficient_table(grid)?;
    let n_nodes = grid.n_nodes();
    let n = model.n_assets();
    let dt = grid.dt();
    let p0 = model.initial_prices().to_vec();
    let mut risky = vec![0.0; noise.n_paths() * n_nodes * n];
    let mut riskless = vec![0.0; noise.n_paths() * n_nodes];
    risky
        .par_chunks_mut(n_nodes * n)
        .zip(riskless.par_chunks_mut(n_nodes))
        .enumerate()
        .for_each(|(i, (rp, bp))| {
            let mut logp: Vec<f64> = p0.iter().map(|p| p.ln()).collect();
            let mut logb = model.riskless_price().ln();
            rp[..n].copy_from_slice(&p0);
            bp[0] = model.riskless_price();
            for k in 0..grid.n_steps() {
                let c = table.get(noise.regime(i, k), k);
                let d = noise.increment(i, k);
                for a in 0..n {
                    logp[a] += (c.alpha[a] - 0.5 * c.sigma[(a, a)]) * dt + d[a];
                    rp[(k + 1) * n + a] = logp[a].exp();
                }
                logb += c.rate * dt;
                bp[k + 1] = logb.exp();
            }
        });
    Ok(PricePaths {
        n_paths: noise.n_paths(),
        n_nodes,
        n_assets: n,
        risky,
        riskless,
    })
}
