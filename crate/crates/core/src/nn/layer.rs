use std::fmt;

use crate::error::{Error, Result};

/// One layer of a feed-forward stack.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerSpec {
    /// Affine map `y = x W + b` with `W: inputs × outputs`.
    Dense {
        inputs: usize,
        outputs: usize,
    },
    /// Valid (unpadded) 2-D convolution over `channels × height × width` inputs.
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
    },
    Relu,
    Flatten,
}

impl LayerSpec {
    pub fn dense(inputs: usize, outputs: usize) -> Self {
        LayerSpec::Dense { inputs, outputs }
    }

    pub fn conv2d(in_channels: usize, out_channels: usize, kernel: usize, stride: usize) -> Self {
        LayerSpec::Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
        }
    }

    pub fn has_params(&self) -> bool {
        matches!(self, LayerSpec::Dense { .. } | LayerSpec::Conv2d { .. })
    }

    /// Weight tensor shape and fan-in, for layers that own parameters.
    pub(crate) fn weight_shape(&self) -> Option<(Vec<usize>, usize)> {
        match *self {
            LayerSpec::Dense { inputs, outputs } => Some((vec![inputs, outputs], inputs)),
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => Some((
                vec![out_channels, in_channels, kernel, kernel],
                in_channels * kernel * kernel,
            )),
            _ => None,
        }
    }

    pub(crate) fn bias_len(&self) -> Option<usize> {
        match *self {
            LayerSpec::Dense { outputs, .. } => Some(outputs),
            LayerSpec::Conv2d { out_channels, .. } => Some(out_channels),
            _ => None,
        }
    }

    /// Per-sample output shape for a per-sample input shape.
    fn output_shape(&self, index: usize, input: &[usize]) -> Result<Vec<usize>> {
        let fail = |message: String| Error::Shape {
            layer: index,
            message,
        };
        match *self {
            LayerSpec::Dense { inputs, outputs } => {
                if inputs == 0 || outputs == 0 {
                    return Err(fail("dense dims must be positive".into()));
                }
                if input != [inputs] {
                    return Err(fail(format!(
                        "dense expects input [{inputs}], got {input:?}"
                    )));
                }
                Ok(vec![outputs])
            }
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
            } => {
                if in_channels == 0 || out_channels == 0 || kernel == 0 || stride == 0 {
                    return Err(fail("conv2d dims must be positive".into()));
                }
                let &[c, h, w] = input else {
                    return Err(fail(format!(
                        "conv2d expects [channels, height, width], got {input:?}"
                    )));
                };
                if c != in_channels {
                    return Err(fail(format!(
                        "conv2d expects {in_channels} channels, got {c}"
                    )));
                }
                if h < kernel || w < kernel {
                    return Err(fail(format!("kernel {kernel} larger than {h}×{w} input")));
                }
                Ok(vec![
                    out_channels,
                    (h - kernel) / stride + 1,
                    (w - kernel) / stride + 1,
                ])
            }
            LayerSpec::Relu => Ok(input.to_vec()),
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
        }
    }
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerSpec::Dense { inputs, outputs } => write!(f, "dense({inputs}→{outputs})"),
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
            } => write!(
                f,
                "conv2d({in_channels}→{out_channels}, {kernel}×{kernel}, stride {stride})"
            ),
            LayerSpec::Relu => write!(f, "relu"),
            LayerSpec::Flatten => write!(f, "flatten"),
        }
    }
}

/// A validated layer stack together with the per-sample input shape it accepts.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Architecture {
    input_shape: Vec<usize>,
    layers: Vec<LayerSpec>,
    // shapes[i] is the per-sample input shape of layer i; the last entry is the output.
    shapes: Vec<Vec<usize>>,
}

impl Architecture {
    pub fn new(input_shape: Vec<usize>, layers: Vec<LayerSpec>) -> Result<Self> {
        if input_shape.is_empty() || input_shape.contains(&0) {
            return Err(Error::Config(format!(
                "input shape {input_shape:?} must be non-empty and positive"
            )));
        }
        if layers.is_empty() {
            return Err(Error::Config("architecture has no layers".into()));
        }
        let mut shapes = vec![input_shape.clone()];
        for (i, layer) in layers.iter().enumerate() {
            let next = layer
                .output_shape(i, &shapes[i])
                .map_err(|e| Error::Config(e.to_string()))?;
            shapes.push(next);
        }
        Ok(Self {
            input_shape,
            layers,
            shapes,
        })
    }

    /// A dense stack `widths[0] → widths[1] → …` with ReLU between hidden layers.
    pub fn mlp(widths: &[usize]) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::Config("mlp needs at least two widths".into()));
        }
        let mut layers = Vec::new();
        for (i, pair) in widths.windows(2).enumerate() {
            layers.push(LayerSpec::dense(pair[0], pair[1]));
            if i + 2 < widths.len() {
                layers.push(LayerSpec::Relu);
            }
        }
        Self::new(vec![widths[0]], layers)
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> &[usize] {
        self.shapes.last().expect("at least the input shape")
    }

    /// Flattened per-sample output width.
    pub fn output_width(&self) -> usize {
        self.output_shape().iter().product()
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub(crate) fn layer_input_shape(&self, i: usize) -> &[usize] {
        &self.shapes[i]
    }

    pub(crate) fn layer_output_shape(&self, i: usize) -> &[usize] {
        &self.shapes[i + 1]
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.input_shape)?;
        for layer in &self.layers {
            write!(f, " → {layer}")?;
        }
        Ok(())
    }
}
