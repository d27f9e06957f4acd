//! Synthetic domain shift: rotation, intensity scaling and additive noise.

use rand_distr::{Distribution, Normal};

use crate::datasets::LabeledSample;
use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DomainShiftSpec {
    degrees: f64,
    scale: f64,
    noise_std: f64,
}

impl DomainShiftSpec {
    pub const MAX_DEGREES: f64 = 45.0;

    pub fn new(degrees: f64, scale: f64, noise_std: f64) -> Result<Self> {
        if !(-Self::MAX_DEGREES..=Self::MAX_DEGREES).contains(&degrees) {
            return Err(Error::Config(format!(
                "rotation {degrees}° outside [−45, 45]"
            )));
        }
        if !(scale > 0.0 && scale <= 2.0) {
            return Err(Error::Config(format!(
                "intensity scale {scale} outside (0, 2]"
            )));
        }
        if !(noise_std >= 0.0 && noise_std.is_finite()) {
            return Err(Error::Config(format!("noise std {noise_std} must be ≥ 0")));
        }
        Ok(Self {
            degrees,
            scale,
            noise_std,
        })
    }

    pub fn identity() -> Self {
        Self {
            degrees: 0.0,
            scale: 1.0,
            noise_std: 0.0,
        }
    }

    pub fn rotation(degrees: f64) -> Result<Self> {
        Self::new(degrees, 1.0, 0.0)
    }

    pub fn degrees(&self) -> f64 {
        self.degrees
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn noise_std(&self) -> f64 {
        self.noise_std
    }

    pub fn is_identity(&self) -> bool {
        self.degrees == 0.0 && self.scale == 1.0 && self.noise_std == 0.0
    }
}

/// Rotates every channel of a `channels × height × width` image by `degrees`
/// (counter-clockwise) about its centre with bilinear interpolation; pixels
/// sampled from outside the image read as zero.
pub fn rotate_image(image: &Tensor, degrees: f64) -> Tensor {
    let &[channels, height, width] = image.shape() else {
        panic!(
            "rotate_image expects a rank-3 image, got {:?}",
            image.shape()
        );
    };
    let (sin, cos) = degrees.to_radians().sin_cos();
    let cy = (height as f64 - 1.0) / 2.0;
    let cx = (width as f64 - 1.0) / 2.0;
    let src = image.data();
    let mut out = vec![0.0; src.len()];
    let at = |c: usize, y: isize, x: isize| -> f64 {
        if y < 0 || x < 0 || y >= height as isize || x >= width as isize {
            0.0
        } else {
            src[(c * height + y as usize) * width + x as usize]
        }
    };
    for y in 0..height {
        for x in 0..width {
            let dy = y as f64 - cy;
            let dx = x as f64 - cx;
            // inverse rotation maps each output pixel back to its source
            let sx = cos * dx + sin * dy + cx;
            let sy = -sin * dx + cos * dy + cy;
            let x0 = sx.floor();
            let y0 = sy.floor();
            let fx = sx - x0;
            let fy = sy - y0;
            let (x0, y0) = (x0 as isize, y0 as isize);
            for c in 0..channels {
                let v = at(c, y0, x0) * (1.0 - fx) * (1.0 - fy)
                    + at(c, y0, x0 + 1) * fx * (1.0 - fy)
                    + at(c, y0 + 1, x0) * (1.0 - fx) * fy
                    + at(c, y0 + 1, x0 + 1) * fx * fy;
                out[(c * height + y) * width + x] = v;
            }
        }
    }
    Tensor::from_parts(image.shape().to_vec(), out)
}

/// Rotation, then intensity scaling, then seeded Gaussian noise, then a clamp
/// to `[0, 1]`. Labels and sample order are preserved.
pub fn apply_shift(
    samples: &[LabeledSample],
    spec: &DomainShiftSpec,
    noise_seed: u64,
) -> Vec<LabeledSample> {
    if spec.is_identity() {
        return samples.to_vec();
    }
    let mut rng = seed::rng(noise_seed, 0x5348_4946);
    let noise = Normal::new(0.0, spec.noise_std.max(f64::MIN_POSITIVE)).expect("valid std");
    samples
        .iter()
        .map(|s| {
            let mut image = if spec.degrees != 0.0 {
                rotate_image(&s.image, spec.degrees)
            } else {
                s.image.clone()
            };
            for v in image.data_mut() {
                *v *= spec.scale;
                if spec.noise_std > 0.0 {
                    *v += noise.sample(&mut rng);
                }
                *v = v.clamp(0.0, 1.0);
            }
            LabeledSample {
                image,
                label: s.label,
            }
        })
        .collect()
}
