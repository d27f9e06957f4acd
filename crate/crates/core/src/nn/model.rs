use crate::error::{Error, Result};
use crate::nn::layer::{Architecture, LayerSpec};
use crate::nn::network::Network;

/// Architectures of the three networks: per-client feature extractor and
/// classifier, and the server's client discriminator.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelSpec {
    pub extractor: Architecture,
    pub classifier: Architecture,
    pub discriminator: Architecture,
    pub classes: usize,
    pub sources: usize,
}

impl ModelSpec {
    /// Checks that the three stacks chain together and that output widths are
    /// `classes` for the classifier and `sources + 1` for the discriminator.
    pub fn new(
        extractor: Architecture,
        classifier: Architecture,
        discriminator: Architecture,
        classes: usize,
        sources: usize,
    ) -> Result<Self> {
        if sources == 0 {
            return Err(Error::Config(
                "at least one source client is required".into(),
            ));
        }
        if classes < 2 {
            return Err(Error::Config("at least two classes are required".into()));
        }
        let feat = extractor.output_shape();
        if feat.len() != 1 {
            return Err(Error::Config(format!(
                "extractor must emit flat features, got {feat:?}"
            )));
        }
        if classifier.input_shape() != feat || discriminator.input_shape() != feat {
            return Err(Error::Config(format!(
                "classifier input {:?} and discriminator input {:?} must equal extractor output {feat:?}",
                classifier.input_shape(),
                discriminator.input_shape()
            )));
        }
        if classifier.output_shape() != [classes] {
            return Err(Error::Config(format!(
                "classifier width {:?} must equal class count {classes}",
                classifier.output_shape()
            )));
        }
        if discriminator.output_shape() != [sources + 1] {
            return Err(Error::Config(format!(
                "discriminator width {:?} must equal client count {}",
                discriminator.output_shape(),
                sources + 1
            )));
        }
        Ok(Self {
            extractor,
            classifier,
            discriminator,
            classes,
            sources,
        })
    }

    /// conv2d(1→8, 5×5, stride 2) → relu → flatten → dense(→`features`) → relu,
    /// a linear classifier head and a ReLU MLP discriminator with hidden widths `disc_hidden`.
    pub fn conv(
        input: [usize; 3],
        features: usize,
        disc_hidden: &[usize],
        classes: usize,
        sources: usize,
    ) -> Result<Self> {
        let [c, h, w] = input;
        let conv = LayerSpec::conv2d(c, 8, 5, 2);
        if h < 5 || w < 5 {
            return Err(Error::Config(format!(
                "input {h}×{w} smaller than the 5×5 kernel"
            )));
        }
        let flat = 8 * ((h - 5) / 2 + 1) * ((w - 5) / 2 + 1);
        let extractor = Architecture::new(
            input.to_vec(),
            vec![
                conv,
                LayerSpec::Relu,
                LayerSpec::Flatten,
                LayerSpec::dense(flat, features),
                LayerSpec::Relu,
            ],
        )?;
        Self::with_heads(extractor, features, disc_hidden, classes, sources)
    }

    /// Pure-dense extractor `flatten → dense(→hidden) → relu`, for fast runs.
    pub fn dense(
        input: &[usize],
        features: usize,
        disc_hidden: &[usize],
        classes: usize,
        sources: usize,
    ) -> Result<Self> {
        let flat = input.iter().product();
        let extractor = Architecture::new(
            input.to_vec(),
            vec![
                LayerSpec::Flatten,
                LayerSpec::dense(flat, features),
                LayerSpec::Relu,
            ],
        )?;
        Self::with_heads(extractor, features, disc_hidden, classes, sources)
    }

    fn with_heads(
        extractor: Architecture,
        features: usize,
        disc_hidden: &[usize],
        classes: usize,
        sources: usize,
    ) -> Result<Self> {
        let classifier = Architecture::mlp(&[features, classes])?;
        let mut widths = vec![features];
        widths.extend_from_slice(disc_hidden);
        widths.push(sources + 1);
        let discriminator = Architecture::mlp(&widths)?;
        Self::new(extractor, classifier, discriminator, classes, sources)
    }

    pub fn feature_width(&self) -> usize {
        self.extractor.output_width()
    }
}

/// The three parameter sets of one model: extractor, classifier, discriminator.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub feature_extractor: Network,
    pub classifier: Network,
    pub discriminator: Network,
}

impl ModelParams {
    /// Initialises each network from its own seed stream derived from `seed`.
    pub fn init(spec: &ModelSpec, seed: u64) -> Self {
        Self {
            feature_extractor: Network::init(&spec.extractor, crate::seed::derive(seed, 1)),
            classifier: Network::init(&spec.classifier, crate::seed::derive(seed, 2)),
            discriminator: Network::init(&spec.discriminator, crate::seed::derive(seed, 3)),
        }
    }
}
