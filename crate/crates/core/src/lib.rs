//! Two-branch scene recognition: an RGB branch and a semantic-segmentation
//! branch whose channel-attended features gate the RGB features before
//! classification.
//!
//! Training runs in two stages (branches first, then the attention module with
//! both branches frozen). [`cli`] exposes the same pipeline as the `semattn`
//! binary.

pub mod ablation;
pub mod blocks;
pub mod cham;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod feature;
pub mod fusion;
pub mod gradcheck;
pub mod interpret;
pub mod model;
pub mod rgb_branch;
pub mod semantic_branch;
pub mod toy;
pub mod training;
pub mod util;

pub use error::{Error, Result};
