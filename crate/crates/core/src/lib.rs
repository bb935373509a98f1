//! Algorithms for personalized federated learning of weakly-supervised
//! segmentation models.
//!
//! The crate is `no_std` (with `alloc`) and free of IO. It contains a small
//! reverse-mode tensor engine, a UNet with a site-conditioned channel
//! attention block, minimum-spanning-tree filtering for pseudo-labels, the
//! sparse-label losses, the federation round protocol, a synthetic
//! multi-site data generator and the evaluation metrics. File formats, the
//! CLI and thread pools live in the companion `fedicra` crate.
#![no_std]

extern crate alloc;
#[cfg(any(test, feature = "std"))]
extern crate std;

mod error;
pub mod math;
pub mod tensor;

pub mod federation;
pub mod losses;
pub mod metrics;
pub mod optim;
pub mod oracle;
pub mod params;
pub mod rng;
pub mod segnet;
pub mod synthdata;
pub mod treefilter;

pub use error::{Error, Result};
