//! Analysis of rotary-position attention logits.
//!
//! The crate decomposes causal logit maps into distance, query and key
//! components, detects the slow-dominating rotary tuples that make the
//! positional and semantic parts of `w(i-j, q, k)` additive, and measures how
//! attention outputs respond to position perturbations and sliding-window
//! remapping.
//!
//! Module map:
//! - [`tensor_io`]: head dumps (JSON manifest + NPY), synthetic populations, reports
//! - [`rope`]: rotation, logits, logit maps, softmax attention output
//! - [`decompose`]: ternary and rank-two additive fits, correlation, hybrid logits
//! - [`tuples`]: per-tuple statistics, slow-set detection, explicit `f`/`g` split
//! - [`perturb`]: text/feature/position perturbations and output drift
//! - [`trace`]: PCA, sliding-window output traces, envelope checks
//! - [`render`]: SVG heatmaps and tuple plots
//! - [`cli`]: the `rope-lens` command line

pub mod cli;
pub mod decompose;
pub mod error;
pub mod matrix;
pub mod perturb;
pub mod render;
pub mod rope;
pub mod stats;
pub mod tensor_io;
pub mod trace;
pub mod tuples;

pub use error::{Error, Result};
pub use matrix::Matrix;
