//! Saliency reasoning rewards and confidence-guided policy optimization.
//!
//! The crate is organised bottom-up:
//!
//! - [`raster`]: gray/binary masks, PGM I/O and pixel set operations
//! - [`metrics`]: S-measure, E-measure, max F-measure, MAE, AP and exact
//!   Hungarian assignment
//! - [`interface`]: the `<think>`/`<answer>` response grammar, `<rg>`/`<ins>`
//!   referring expressions and the format reward
//! - [`reward`]: task-adaptive correctness rewards (including the
//!   instance-aligned S-measure) and the total reward
//! - [`policy`]: a tabular, position-factored categorical policy with exact
//!   gradients
//! - [`optimize`]: CGPO and GRPO trainers, interleaved SFT schedule and
//!   response-type analysis
//! - [`environment`]: a synthetic token world with an oracle segmenter

pub mod environment;
pub mod error;
pub mod interface;
pub mod metrics;
pub mod optimize;
pub mod policy;
pub mod raster;
pub mod reward;

pub use error::{Error, Result};
