//! Anomaly detection with a recursive convolutional autoencoder.
//!
//! The pipeline has three trained parts:
//!
//! * [`rcae`]: one encoder and one decoder block reused across recursion
//!   depths, producing reconstructions `R_1..R_N` of decreasing fidelity.
//! * [`dpn`]: a residual network restoring fine detail on each `R_n`.
//! * [`crd`]: a 3-D convolutional detector reading the stack of the input and
//!   its enhanced reconstructions, producing a pixel anomaly map.
//!
//! [`pipeline`] trains them in that order on normal images with synthetic
//! corruptions from [`augment`], and evaluates with [`metrics`].

pub mod augment;
pub mod crd;
pub mod dataio;
pub mod dpn;
mod error;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod rcae;
pub mod train;

pub use error::{Error, Result};
pub use rcad_tensor as tensor;
