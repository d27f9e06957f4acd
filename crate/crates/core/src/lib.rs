//! Adversarial federated transfer learning simulator.
//!
//! Labeled source clients and one unlabeled target client train feature
//! extractors and classifiers locally while a central server hosts a client
//! discriminator. The server only ever sees uploaded features and returns
//! per-sample feature gradients; a gradient reversal layer on the client side
//! turns them into the adversarial signal. Target images are classified by a
//! majority vote of the source classifiers.

pub mod datasets;
pub mod error;
pub mod experiment;
pub mod federation;
pub mod gradcheck;
pub mod inference;
pub mod losses;
pub mod nn;
pub mod seed;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
