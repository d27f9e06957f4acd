//! Central finite-difference oracle for network parameter gradients.

use rand::seq::index;
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::layer::Architecture;
use crate::nn::network::Network;
use crate::seed;
use crate::tensor::Tensor;

/// Step used for every central difference in the crate.
pub const FD_STEP: f64 = 1e-5;

/// `|analytic − numeric| / max(1e-12, |numeric|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1e-12)
}

/// `(f(x + h) − f(x − h)) / 2h` for a scalar function of one coordinate.
pub fn central_difference(mut f: impl FnMut(f64) -> Result<f64>, x: f64) -> Result<f64> {
    let plus = f(x + FD_STEP)?;
    let minus = f(x - FD_STEP)?;
    Ok((plus - minus) / (2.0 * FD_STEP))
}

/// Picks `count` parameter indices out of `total`: without replacement when
/// possible, otherwise with replacement.
pub fn probe_indices(rng: &mut impl Rng, total: usize, count: usize) -> Vec<usize> {
    if count <= total {
        index::sample(rng, total, count).into_vec()
    } else {
        (0..count).map(|_| rng.random_range(0..total)).collect()
    }
}

/// Random network, random two-sample batch, scalar loss `Σ r ⊙ output` with a
/// random projection `r`. Returns the largest relative error between the
/// analytic parameter gradient and a central difference over `probe_count`
/// randomly chosen parameters.
pub fn finite_diff_check(arch: &Architecture, seed: u64, probe_count: usize) -> Result<f64> {
    if probe_count == 0 {
        return Err(Error::Config("probe_count must be at least 1".into()));
    }
    let mut net = Network::init(arch, seed);
    let mut rng = seed::rng(seed, 0x6772_6164);
    let batch = 2;
    let mut in_shape = vec![batch];
    in_shape.extend_from_slice(arch.input_shape());
    let input = random_tensor(&mut rng, in_shape);
    let mut out_shape = vec![batch];
    out_shape.extend_from_slice(arch.output_shape());
    let projection = random_tensor(&mut rng, out_shape);

    let (_, tape) = net.forward_recorded(&input)?;
    let (_, grads) = net.backward(&tape, &projection)?;
    let analytic: Vec<f64> = grads.values().collect();

    let total = net.param_count();
    if total == 0 {
        return Ok(0.0);
    }
    let mut worst: f64 = 0.0;
    for idx in probe_indices(&mut rng, total, probe_count) {
        let original = net.param(idx).expect("index in range");
        let numeric = central_difference(
            |v| {
                net.set_param(idx, v)?;
                let out = net.forward(&input)?;
                Ok(dot(out.data(), projection.data()))
            },
            original,
        )?;
        net.set_param(idx, original)?;
        worst = worst.max(relative_error(analytic[idx], numeric));
    }
    Ok(worst)
}

pub(crate) fn random_tensor(rng: &mut impl Rng, shape: Vec<usize>) -> Tensor {
    let len = shape.iter().product();
    let data = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::from_parts(shape, data)
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
