use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::layer::{Architecture, LayerSpec};
use crate::tensor::Tensor;

static NEXT_VERSION: AtomicU64 = AtomicU64::new(1);

fn next_version() -> u64 {
    NEXT_VERSION.fetch_add(1, Ordering::Relaxed)
}

/// Weight and bias of one parameterised layer. Also used for their gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct Affine {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Affine {
    fn zeros_like(&self) -> Self {
        Self {
            weight: Tensor::zeros(self.weight.shape().to_vec()),
            bias: Tensor::zeros(self.bias.shape().to_vec()),
        }
    }

    fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.weight.data().iter().chain(self.bias.data()).copied()
    }

    fn len(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    fn slot_mut(&mut self, i: usize) -> &mut f64 {
        let wl = self.weight.len();
        if i < wl {
            &mut self.weight.data_mut()[i]
        } else {
            &mut self.bias.data_mut()[i - wl]
        }
    }
}

/// Parameters of one feed-forward stack, stamped with a version that changes on
/// every mutation so that stale tapes can be detected.
#[derive(Clone, Debug)]
pub struct Network {
    arch: Architecture,
    params: Vec<Option<Affine>>,
    version: u64,
}

impl PartialEq for Network {
    fn eq(&self, other: &Self) -> bool {
        self.arch == other.arch && self.params == other.params
    }
}

/// Activations recorded by a training-mode forward pass.
#[derive(Clone, Debug)]
pub struct Tape {
    version: u64,
    batch: usize,
    caches: Vec<LayerCache>,
}

impl Tape {
    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn batch(&self) -> usize {
        self.batch
    }
}

#[derive(Clone, Debug)]
enum LayerCache {
    Dense { input: Tensor },
    Conv { cols: Vec<f64> },
    Relu { input: Tensor },
    Flatten,
}

/// Per-layer gradients, shape-congruent with the owning [`Network`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    layers: Vec<Option<Affine>>,
}

impl Gradients {
    pub fn zeros_like(net: &Network) -> Self {
        Self {
            layers: net
                .params
                .iter()
                .map(|p| p.as_ref().map(Affine::zeros_like))
                .collect(),
        }
    }

    pub fn layers(&self) -> &[Option<Affine>] {
        &self.layers
    }

    pub fn add_assign(&mut self, other: &Gradients) -> Result<()> {
        if self.layers.len() != other.layers.len() {
            return Err(Error::ShapeMismatch("gradient layer counts differ".into()));
        }
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            match (a, b) {
                (Some(a), Some(b)) => {
                    a.weight.add_assign(&b.weight)?;
                    a.bias.add_assign(&b.bias)?;
                }
                (None, None) => {}
                _ => return Err(Error::ShapeMismatch("gradient layer kinds differ".into())),
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        for a in self.layers.iter_mut().flatten() {
            a.weight.scale(factor);
            a.bias.scale(factor);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(f64::is_finite)
    }

    pub fn max_abs(&self) -> f64 {
        self.values().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Gradient values in the same flat order as [`Network::param`].
    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers.iter().flatten().flat_map(Affine::values)
    }

    pub fn len(&self) -> usize {
        self.layers.iter().flatten().map(Affine::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, index: usize) -> Option<f64> {
        self.values().nth(index)
    }

    /// Largest absolute difference to another buffer; infinite on shape mismatch.
    pub fn max_abs_diff(&self, other: &Gradients) -> f64 {
        if self.len() != other.len() {
            return f64::INFINITY;
        }
        self.values()
            .zip(other.values())
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }
}

impl Network {
    /// Draws weights uniformly in `±sqrt(3 / fan_in)` (standard deviation
    /// `1 / sqrt(fan_in)`) and sets every bias to zero.
    pub fn init(arch: &Architecture, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = arch
            .layers()
            .iter()
            .map(|layer| {
                let (shape, fan_in) = layer.weight_shape()?;
                let bound = (3.0 / fan_in as f64).sqrt();
                let len = shape.iter().product();
                let data = (0..len).map(|_| rng.random_range(-bound..bound)).collect();
                Some(Affine {
                    weight: Tensor::from_parts(shape, data),
                    bias: Tensor::zeros(vec![layer.bias_len()?]),
                })
            })
            .collect();
        Self {
            arch: arch.clone(),
            params,
            version: next_version(),
        }
    }

    /// Builds a network from explicit parameter tensors, checking every shape.
    pub fn from_params(arch: &Architecture, params: Vec<Option<Affine>>) -> Result<Self> {
        let mut net = Self::init(arch, 0);
        net.replace_params(params)?;
        Ok(net)
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn params(&self) -> &[Option<Affine>] {
        &self.params
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    /// Overwrites all parameters; shapes must match the current ones.
    pub fn replace_params(&mut self, params: Vec<Option<Affine>>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::ShapeMismatch(format!(
                "expected {} layer slots, got {}",
                self.params.len(),
                params.len()
            )));
        }
        for (i, (old, new)) in self.params.iter().zip(&params).enumerate() {
            match (old, new) {
                (Some(o), Some(n))
                    if o.weight.shape() == n.weight.shape() && o.bias.shape() == n.bias.shape() => {
                }
                (None, None) => {}
                _ => {
                    return Err(Error::Shape {
                        layer: i,
                        message: "parameter shapes do not match the architecture".into(),
                    })
                }
            }
        }
        self.params = params;
        self.version = next_version();
        Ok(())
    }

    /// Weight and bias tensors in layer order, for transmission.
    pub fn export_tensors(&self) -> Vec<Tensor> {
        self.params
            .iter()
            .flatten()
            .flat_map(|a| [a.weight.clone(), a.bias.clone()])
            .collect()
    }

    /// Inverse of [`Network::export_tensors`].
    pub fn import_tensors(&mut self, tensors: Vec<Tensor>) -> Result<()> {
        let expected = 2 * self.params.iter().flatten().count();
        if tensors.len() != expected {
            return Err(Error::ShapeMismatch(format!(
                "expected {expected} parameter tensors, got {}",
                tensors.len()
            )));
        }
        let mut it = tensors.into_iter();
        let params = self
            .params
            .iter()
            .map(|p| {
                p.as_ref().map(|_| Affine {
                    weight: it.next().expect("counted"),
                    bias: it.next().expect("counted"),
                })
            })
            .collect();
        self.replace_params(params)
    }

    /// Bitwise equality of architecture and every parameter.
    pub fn bitwise_eq(&self, other: &Network) -> bool {
        self.arch == other.arch
            && self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|(a, b)| match (a, b) {
                    (Some(a), Some(b)) => {
                        a.weight.bitwise_eq(&b.weight) && a.bias.bitwise_eq(&b.bias)
                    }
                    (None, None) => true,
                    _ => false,
                })
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().flatten().map(Affine::len).sum()
    }

    /// Parameter at a flat index (weights then bias, layer by layer).
    pub fn param(&self, index: usize) -> Option<f64> {
        self.params
            .iter()
            .flatten()
            .flat_map(Affine::values)
            .nth(index)
    }

    pub fn set_param(&mut self, mut index: usize, value: f64) -> Result<()> {
        for a in self.params.iter_mut().flatten() {
            if index < a.len() {
                *a.slot_mut(index) = value;
                self.version = next_version();
                return Ok(());
            }
            index -= a.len();
        }
        Err(Error::ShapeMismatch(format!(
            "parameter index {index} out of range"
        )))
    }

    fn check_input(&self, input: &Tensor) -> Result<()> {
        if input.rank() < 1 || &input.shape()[1..] != self.arch.input_shape() {
            return Err(Error::Shape {
                layer: 0,
                message: format!(
                    "expected [batch, {:?}], got {:?}",
                    self.arch.input_shape(),
                    input.shape()
                ),
            });
        }
        Ok(())
    }

    /// Inference-mode forward pass over a batch `[batch, input_shape…]`.
    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        self.run_forward(input, None)
    }

    /// Training-mode forward pass that records a [`Tape`] for [`Network::backward`].
    pub fn forward_recorded(&self, input: &Tensor) -> Result<(Tensor, Tape)> {
        let mut caches = Vec::with_capacity(self.arch.layers().len());
        let out = self.run_forward(input, Some(&mut caches))?;
        Ok((
            out,
            Tape {
                version: self.version,
                batch: input.batch(),
                caches,
            },
        ))
    }

    fn run_forward(
        &self,
        input: &Tensor,
        mut caches: Option<&mut Vec<LayerCache>>,
    ) -> Result<Tensor> {
        self.check_input(input)?;
        let batch = input.batch();
        let mut x = input.clone();
        for (i, layer) in self.arch.layers().iter().enumerate() {
            let out_shape = batched(batch, self.arch.layer_output_shape(i));
            x = match *layer {
                LayerSpec::Dense { inputs, outputs } => {
                    let p = self.params[i].as_ref().expect("dense owns params");
                    let y = dense_forward(&x, p, inputs, outputs, out_shape);
                    if let Some(c) = caches.as_deref_mut() {
                        c.push(LayerCache::Dense { input: x });
                    }
                    y
                }
                LayerSpec::Conv2d { .. } => {
                    let p = self.params[i].as_ref().expect("conv owns params");
                    let geom = ConvGeom::new(layer, self.arch.layer_input_shape(i));
                    let cols = im2col(&x, &geom);
                    let y = conv_forward(&cols, p, &geom, batch, out_shape);
                    if let Some(c) = caches.as_deref_mut() {
                        c.push(LayerCache::Conv { cols });
                    }
                    y
                }
                LayerSpec::Relu => {
                    let y = Tensor::from_parts(
                        out_shape,
                        x.data()
                            .iter()
                            .map(|&v| if v > 0.0 { v } else { 0.0 })
                            .collect(),
                    );
                    if let Some(c) = caches.as_deref_mut() {
                        c.push(LayerCache::Relu { input: x });
                    }
                    y
                }
                LayerSpec::Flatten => {
                    if let Some(c) = caches.as_deref_mut() {
                        c.push(LayerCache::Flatten);
                    }
                    x.reshape(out_shape)?
                }
            };
        }
        if !x.is_finite() {
            return Err(Error::Numeric(
                "non-finite activation in forward pass".into(),
            ));
        }
        Ok(x)
    }

    /// Backpropagates `output_grad` through the pass recorded in `tape`.
    ///
    /// Returns the gradient with respect to the forward input and the parameter
    /// gradients. Refuses tapes recorded against a different parameter version.
    pub fn backward(&self, tape: &Tape, output_grad: &Tensor) -> Result<(Tensor, Gradients)> {
        if tape.version != self.version {
            return Err(Error::Protocol(format!(
                "tape version {} does not match parameter version {}",
                tape.version, self.version
            )));
        }
        if tape.caches.len() != self.arch.layers().len() {
            return Err(Error::Protocol(
                "tape does not match this architecture".into(),
            ));
        }
        let batch = tape.batch;
        let expected = batched(batch, self.arch.output_shape());
        if output_grad.shape() != expected.as_slice() {
            return Err(Error::Shape {
                layer: self.arch.layers().len() - 1,
                message: format!(
                    "output gradient {:?} does not match output {expected:?}",
                    output_grad.shape()
                ),
            });
        }

        let mut grads = Gradients::zeros_like(self);
        let mut g = output_grad.clone();
        for (i, layer) in self.arch.layers().iter().enumerate().rev() {
            let in_shape = batched(batch, self.arch.layer_input_shape(i));
            g = match (*layer, &tape.caches[i]) {
                (LayerSpec::Dense { inputs, outputs }, LayerCache::Dense { input }) => {
                    let p = self.params[i].as_ref().expect("dense owns params");
                    let acc = grads.layers[i].as_mut().expect("dense owns grads");
                    dense_backward(input, &g, p, acc, inputs, outputs, in_shape)
                }
                (LayerSpec::Conv2d { .. }, LayerCache::Conv { cols }) => {
                    let p = self.params[i].as_ref().expect("conv owns params");
                    let acc = grads.layers[i].as_mut().expect("conv owns grads");
                    let geom = ConvGeom::new(layer, self.arch.layer_input_shape(i));
                    conv_backward(cols, &g, p, acc, &geom, batch, in_shape)
                }
                (LayerSpec::Relu, LayerCache::Relu { input }) => Tensor::from_parts(
                    in_shape,
                    input
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&x, &d)| if x > 0.0 { d } else { 0.0 })
                        .collect(),
                ),
                (LayerSpec::Flatten, LayerCache::Flatten) => g.reshape(in_shape)?,
                _ => {
                    return Err(Error::Protocol(format!(
                        "tape entry {i} does not match layer kind {layer}"
                    )))
                }
            };
        }
        Ok((g, grads))
    }

    /// Plain gradient descent: `θ ← θ − η·grad`. Refuses non-finite gradients
    /// and leaves the parameters untouched in that case.
    pub fn sgd_step(&mut self, grads: &Gradients, eta: f64) -> Result<()> {
        if !(eta > 0.0 && eta.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {eta}"
            )));
        }
        if grads.layers.len() != self.params.len() {
            return Err(Error::ShapeMismatch(
                "gradient buffer does not match network".into(),
            ));
        }
        for (i, (p, g)) in self.params.iter().zip(&grads.layers).enumerate() {
            let congruent = match (p, g) {
                (Some(p), Some(g)) => {
                    p.weight.shape() == g.weight.shape() && p.bias.shape() == g.bias.shape()
                }
                (None, None) => true,
                _ => false,
            };
            if !congruent {
                return Err(Error::Shape {
                    layer: i,
                    message: "gradient shape differs from parameter shape".into(),
                });
            }
        }
        if !grads.is_finite() {
            return Err(Error::Numeric("non-finite gradient; step refused".into()));
        }
        for (p, g) in self.params.iter_mut().zip(&grads.layers) {
            if let (Some(p), Some(g)) = (p, g) {
                for (w, d) in p.weight.data_mut().iter_mut().zip(g.weight.data()) {
                    *w -= eta * d;
                }
                for (b, d) in p.bias.data_mut().iter_mut().zip(g.bias.data()) {
                    *b -= eta * d;
                }
            }
        }
        self.version = next_version();
        Ok(())
    }
}

fn batched(batch: usize, per_sample: &[usize]) -> Vec<usize> {
    let mut s = Vec::with_capacity(per_sample.len() + 1);
    s.push(batch);
    s.extend_from_slice(per_sample);
    s
}

fn dense_forward(
    x: &Tensor,
    p: &Affine,
    inputs: usize,
    outputs: usize,
    shape: Vec<usize>,
) -> Tensor {
    let w = p.weight.data();
    let b = p.bias.data();
    let batch = x.batch();
    let mut out = vec![0.0; batch * outputs];
    for (xr, yr) in x.data().chunks(inputs).zip(out.chunks_mut(outputs)) {
        yr.copy_from_slice(b);
        for (k, &xk) in xr.iter().enumerate() {
            if xk == 0.0 {
                continue;
            }
            let wr = &w[k * outputs..(k + 1) * outputs];
            for (y, &wv) in yr.iter_mut().zip(wr) {
                *y += xk * wv;
            }
        }
    }
    Tensor::from_parts(shape, out)
}

fn dense_backward(
    input: &Tensor,
    dy: &Tensor,
    p: &Affine,
    acc: &mut Affine,
    inputs: usize,
    outputs: usize,
    in_shape: Vec<usize>,
) -> Tensor {
    let w = p.weight.data();
    let mut dx = vec![0.0; input.len()];
    {
        let dw = acc.weight.data_mut();
        for (xr, dyr) in input.data().chunks(inputs).zip(dy.data().chunks(outputs)) {
            for (k, &xk) in xr.iter().enumerate() {
                if xk == 0.0 {
                    continue;
                }
                let dwr = &mut dw[k * outputs..(k + 1) * outputs];
                for (d, &g) in dwr.iter_mut().zip(dyr) {
                    *d += xk * g;
                }
            }
        }
    }
    {
        let db = acc.bias.data_mut();
        for dyr in dy.data().chunks(outputs) {
            for (d, &g) in db.iter_mut().zip(dyr) {
                *d += g;
            }
        }
    }
    for (dxr, dyr) in dx.chunks_mut(inputs).zip(dy.data().chunks(outputs)) {
        for (k, d) in dxr.iter_mut().enumerate() {
            let wr = &w[k * outputs..(k + 1) * outputs];
            *d = wr.iter().zip(dyr).map(|(a, b)| a * b).sum();
        }
    }
    Tensor::from_parts(in_shape, dx)
}

struct ConvGeom {
    channels: usize,
    height: usize,
    width: usize,
    out_channels: usize,
    kernel: usize,
    stride: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvGeom {
    fn new(layer: &LayerSpec, input: &[usize]) -> Self {
        let LayerSpec::Conv2d {
            out_channels,
            kernel,
            stride,
            ..
        } = *layer
        else {
            unreachable!("conv geometry for non-conv layer")
        };
        let (channels, height, width) = (input[0], input[1], input[2]);
        Self {
            channels,
            height,
            width,
            out_channels,
            kernel,
            stride,
            out_h: (height - kernel) / stride + 1,
            out_w: (width - kernel) / stride + 1,
        }
    }

    fn patches(&self) -> usize {
        self.out_h * self.out_w
    }

    fn patch_len(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn sample_len(&self) -> usize {
        self.channels * self.height * self.width
    }
}

// cols layout: [batch][patch = oy*out_w + ox][c*k*k + ky*k + kx]
fn im2col(x: &Tensor, g: &ConvGeom) -> Vec<f64> {
    let batch = x.batch();
    let (q, k) = (g.patch_len(), g.kernel);
    let mut cols = vec![0.0; batch * g.patches() * q];
    for (n, img) in x.data().chunks(g.sample_len()).enumerate() {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let base = (n * g.patches() + oy * g.out_w + ox) * q;
                let mut j = base;
                for c in 0..g.channels {
                    for ky in 0..k {
                        let row = (c * g.height + oy * g.stride + ky) * g.width + ox * g.stride;
                        cols[j..j + k].copy_from_slice(&img[row..row + k]);
                        j += k;
                    }
                }
            }
        }
    }
    cols
}

fn conv_forward(cols: &[f64], p: &Affine, g: &ConvGeom, batch: usize, shape: Vec<usize>) -> Tensor {
    let (q, np) = (g.patch_len(), g.patches());
    let w = p.weight.data();
    let b = p.bias.data();
    let mut out = vec![0.0; batch * g.out_channels * np];
    for n in 0..batch {
        let sample_cols = &cols[n * np * q..(n + 1) * np * q];
        let sample_out = &mut out[n * g.out_channels * np..(n + 1) * g.out_channels * np];
        for o in 0..g.out_channels {
            let wr = &w[o * q..(o + 1) * q];
            for (pidx, col) in sample_cols.chunks(q).enumerate() {
                sample_out[o * np + pidx] =
                    b[o] + wr.iter().zip(col).map(|(a, c)| a * c).sum::<f64>();
            }
        }
    }
    Tensor::from_parts(shape, out)
}

fn conv_backward(
    cols: &[f64],
    dy: &Tensor,
    p: &Affine,
    acc: &mut Affine,
    g: &ConvGeom,
    batch: usize,
    in_shape: Vec<usize>,
) -> Tensor {
    let (q, np, k) = (g.patch_len(), g.patches(), g.kernel);
    let w = p.weight.data();
    let mut dx = vec![0.0; batch * g.sample_len()];
    let mut dcol = vec![0.0; q];
    for n in 0..batch {
        let sample_cols = &cols[n * np * q..(n + 1) * np * q];
        let sample_dy = &dy.data()[n * g.out_channels * np..(n + 1) * g.out_channels * np];
        {
            let dw = acc.weight.data_mut();
            for o in 0..g.out_channels {
                let dwr = &mut dw[o * q..(o + 1) * q];
                for (pidx, col) in sample_cols.chunks(q).enumerate() {
                    let d = sample_dy[o * np + pidx];
                    if d == 0.0 {
                        continue;
                    }
                    for (a, c) in dwr.iter_mut().zip(col) {
                        *a += d * c;
                    }
                }
            }
        }
        {
            let db = acc.bias.data_mut();
            for (o, d) in db.iter_mut().enumerate() {
                *d += sample_dy[o * np..(o + 1) * np].iter().sum::<f64>();
            }
        }
        let img = &mut dx[n * g.sample_len()..(n + 1) * g.sample_len()];
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let pidx = oy * g.out_w + ox;
                dcol.iter_mut().for_each(|v| *v = 0.0);
                for o in 0..g.out_channels {
                    let d = sample_dy[o * np + pidx];
                    if d == 0.0 {
                        continue;
                    }
                    for (a, &wv) in dcol.iter_mut().zip(&w[o * q..(o + 1) * q]) {
                        *a += d * wv;
                    }
                }
                let mut j = 0;
                for c in 0..g.channels {
                    for ky in 0..k {
                        let row = (c * g.height + oy * g.stride + ky) * g.width + ox * g.stride;
                        for (t, v) in img[row..row + k].iter_mut().zip(&dcol[j..j + k]) {
                            *t += v;
                        }
                        j += k;
                    }
                }
            }
        }
    }
    Tensor::from_parts(in_shape, dx)
}
