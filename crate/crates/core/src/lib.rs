//! Structural demand estimation from listing embeddings.
//!
//! A listing's embedding is decoded into a valuation density and a
//! market-size distribution; English-auction equilibrium bidding then maps
//! those primitives onto expected order statistics of the observed bids.

pub mod attribution;
pub mod counterfactual;
pub mod encoder;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod ols;
pub mod primitives;
pub mod simulator;
pub mod stage1;
pub mod stage2;
pub mod sobol;
pub mod structural;
pub mod training;

#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
pub use primitives::{BidderGrid, MarketSizeParams, ValuationParams};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
