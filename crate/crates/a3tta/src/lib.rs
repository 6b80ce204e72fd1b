//! Anchor-guided test-time adaptation for image segmentation.
//!
//! The crate adapts a pretrained encoder-decoder segmentation network to an
//! unlabeled target stream, one gradient step per incoming batch. Confident
//! predictions are banked as bottleneck-feature anchors; each new feature is
//! fused with its nearest anchor and decoded again to build a refined pseudo
//! label, which supervises the student alongside a boundary-entropy term and
//! a mean-teacher consistency term. The teacher trails the student through an
//! EMA whose rate follows the current teacher divergence.
//!
//! Modules:
//! - [`segmodel`]: the network, manual backprop, Adam, checkpoints.
//! - [`anchorbank`]: confidence scoring and the fixed-capacity anchor bank.
//! - [`alignment`]: anchor retrieval, feature fusion, pseudo-label refinement.
//! - [`losses`]: adaptation losses and their gradients w.r.t. probabilities.
//! - [`adapt`]: the per-batch adaptation engine and stream/continual runners.
//! - [`baselines`]: reference methods run on the same streams.
//! - [`data`]: synthetic benchmark generation, manifests, PNG datasets.
//! - [`metrics`]: Dice / ASSD / mIoU and their aggregation.
//! - [`cli`]: command implementations behind the `a3tta` binary.

pub mod adapt;
pub mod alignment;
pub mod anchorbank;
pub mod baselines;
pub mod cli;
pub mod data;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod prob;
pub mod report;
pub mod scalar;
pub mod seeding;
pub mod segmodel;

pub use error::{Error, Result};
