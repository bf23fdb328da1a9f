//! ensnet: a small, dependency-light CNN toolkit for grayscale ROI patch
//! classification.
//!
//! The crate builds three convolutional architecture families over its own
//! tensor/autograd core, trains them with plain SGD, fuses their class
//! probabilities by summation, and reports confusion-matrix metrics. Every
//! run is deterministic given its seeds.

pub mod arch;
pub mod checkpoint;
pub mod cli;
pub mod ensemble;
pub(crate) mod container;
pub mod data;
pub mod metrics;
pub mod rng;
pub mod train;
pub mod tensor;
