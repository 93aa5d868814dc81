//! Instance-level relative saliency ranking.
//!
//! The crate covers the numeric core of a saliency ranking pipeline that
//! starts from per-instance features and instance masks:
//!
//! - [`graphnet`]: four-graph attention reasoning over instances, with
//!   exact gradients.
//! - [`rankloss`]: pairwise ranking loss weighted by rank difference.
//! - [`metrics`]: SA-SOR, SOR, SSOR, MAE and rank-map rendering.
//! - [`dataio`]: annotation files, rank derivation and dataset statistics.
//! - [`train`]: a desk-scale trainer on synthetic ranking tasks.
//! - [`retarget`]: seam carving guided by a saliency rank map.

pub mod correlation;
pub mod dataio;
pub mod error;
pub mod gradcheck;
pub mod graphnet;
pub mod grid;
pub mod mask;
pub mod metrics;
pub mod rankloss;
pub mod retarget;
pub mod train;

pub use error::{Error, Result};
