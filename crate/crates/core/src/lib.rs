//! Tri-level search engine: a relaxed cell search space, a conditional
//! generator/discriminator pair, class-weighted retraining, and architecture
//! updates through one-step-unrolled hypergradients.

pub mod cig;
pub mod data;
mod error;
pub mod evaluation;
pub mod optim;
pub mod oracle;
pub mod reweight;
pub mod search;
pub mod search_space;
pub mod trilevel;

pub use error::{CoreError, Result};
