//! Dirichlet-Multinomial multi-campaign crowd-label loss, vote simulation,
//! Bayesian scaling-law fits and GP regression.

pub mod dirmult;
pub mod ensemble;
pub mod gp;
pub mod records;
pub mod runstore;
pub mod scalefit;
pub mod schema;
pub mod toytrain;
pub mod votesim;
