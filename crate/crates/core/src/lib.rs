//! Monte Carlo laboratory for expected-utility portfolio choice: wealth
//! simulation, adjoint BSDE solvers, Gateaux-derivative estimators and
//! brute-force oracles.

pub mod config;
pub mod fbsde;
pub mod market;
pub mod oracle;
pub mod regression;
pub mod runner;
pub mod stats;
pub mod utility;
pub mod variational;
pub mod wealth;

use thiserror::Error;

pub use config::{parse_config, ConfigError, ExperimentConfig};
pub use fbsde::{BsdeMode, BsdeSolution, FbsdeError};
pub use market::{build_market, Bounds, MarketConfig, MarketError, MarketModel, NoisePathSet, TimeGrid};
pub use oracle::OracleError;
pub use runner::{run, RunResult, Task};
pub use stats::{Estimate, Pairing};
pub use utility::{UtilityError, UtilitySpec};
pub use variational::VariationalError;
pub use wealth::{Control, ControlLaw, Scenario, StoppedPolicy, WealthError};

/// Any failure a run can report.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Market(#[from] MarketError),
    #[error(transparent)]
    Utility(#[from] UtilityError),
    #[error(transparent)]
    Wealth(#[from] WealthError),
    #[error(transparent)]
    Fbsde(#[from] FbsdeError),
    #[error(transparent)]
    Variational(#[from] VariationalError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error("{0}")]
    Io(String),
}

impl Error {
    /// 2 for configuration problems, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 2,
            _ => 1,
        }
    }
}
