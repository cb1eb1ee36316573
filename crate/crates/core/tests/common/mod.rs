#![allow(dead_code)]

use merton_lab::market::{build_market, Bounds, MarketConfig, MarketModel};

pub const BOUNDS: Bounds = Bounds { m: 1.0, eps: 0.01, c: 0.1 };

/// n = 1, r = 0.02, alpha = 0.08, Sigma = 0.04, T = 1.
pub fn desk() -> MarketModel {
    market(0.02, 0.08)
}

pub fn market(r: f64, alpha: f64) -> MarketModel {
    build_market(MarketConfig::constant(r, &[alpha], &[0.04], 1.0, BOUNDS)).unwrap()
}

pub const DESK_TOML: &str = r#"[market]
n_assets = 1
r = 0.02
alpha = [0.08]
sigma = [[0.04]]
x0 = 1.0
T = 1.0
bound_M = 1.0
eps = 0.01
C = 0.1

[utility]
kind = "log"

[simulation]
n_paths = 2000
seed = 42
"#;
