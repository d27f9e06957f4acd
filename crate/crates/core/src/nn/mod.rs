//! Dense tensors in, dense tensors out: the four layer kinds used by the
//! extractor, classifier and discriminator, with hand-written backward passes.

mod gradcheck;
mod grl;
mod layer;
mod model;
mod network;

pub(crate) use gradcheck::random_tensor;
pub use gradcheck::{
    central_difference, finite_diff_check, probe_indices, relative_error, FD_STEP,
};
pub use grl::{grl_backward, grl_forward};
pub use layer::{Architecture, LayerSpec};
pub use model::{ModelParams, ModelSpec};
pub use network::{Affine, Gradients, Network, Tape};

use crate::error::Result;

/// Builds a network with fan-in scaled weights and zero biases.
pub fn init_params(arch: &Architecture, seed: u64) -> Network {
    Network::init(arch, seed)
}

/// Applies `θ ← θ − η·grad` to `net`.
pub fn sgd_step(net: &mut Network, grads: &Gradients, eta: f64) -> Result<()> {
    net.sgd_step(grads, eta)
}
