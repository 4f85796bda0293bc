//! Welfare-maximizing optimal power flow for hybrid AC/DC grids through its
//! second-order cone relaxation, with nodal prices read from the dual
//! solution and numerical certificates of relaxation exactness.

pub mod casefile;
pub mod conic;
pub mod dcopf;
pub mod error;
pub mod grid;
pub mod hermitian;
pub mod matrices;
pub mod pricing;
pub mod scenarios;
pub mod sdr;
pub mod socr;

pub use error::{Error, Result};
pub use grid::{AcBranch, BenefitFn, Bus, Capability, CostFn, DcBranch, GenSpec, Grid, LoadRegion, LoadSpec};
pub use pricing::{price, PricingConfig, PricingReport};
pub use socr::{solve_socr, SocrSolution};
