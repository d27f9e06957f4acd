use std::path::{Path, PathBuf};

use crate::datasets::{DomainShiftSpec, PartitionPlan, MNIST_CLASSES};
use crate::error::{Error, Result};
use crate::federation::RoundSchedule;
use crate::nn::ModelSpec;
use crate::seed;

/// Environment variable consulted when no dataset directory is configured.
pub const DATA_DIR_ENV: &str = "AFTL_DATA_DIR";
/// Used when neither the config nor the environment names a dataset directory.
pub const DEFAULT_DATA_DIR: &str = "data/mnist";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExtractorKind {
    Conv,
    Dense,
}

/// Everything one run needs. Defaults reproduce the headline MNIST setting.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    /// Directory holding the four MNIST IDX files. `None` falls back to
    /// `AFTL_DATA_DIR`, then [`DEFAULT_DATA_DIR`].
    pub data_dir: Option<PathBuf>,
    pub clients: usize,
    pub samples_per_client: usize,
    pub target_train: usize,
    pub target_test: usize,
    pub classes: usize,
    pub rounds: usize,
    pub init_epochs: usize,
    pub batch_size: usize,
    pub eta: f64,
    pub discriminator: bool,
    pub consistency: bool,
    pub shift_degrees: f64,
    pub shift_scale: f64,
    pub shift_noise: f64,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub extractor: ExtractorKind,
    pub features: usize,
    /// Hidden widths of the discriminator; empty for a linear one.
    pub disc_hidden: Vec<usize>,
    pub representative: usize,
    /// Record every protocol message to `transcript.bin`.
    pub transcript: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data_dir: None,
            clients: 10,
            samples_per_client: 1500,
            target_train: 1000,
            target_test: 1000,
            classes: MNIST_CLASSES,
            rounds: 100,
            init_epochs: 150,
            batch_size: 100,
            eta: 0.01,
            discriminator: true,
            consistency: true,
            shift_degrees: 0.0,
            shift_scale: 1.0,
            shift_noise: 0.0,
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            extractor: ExtractorKind::Conv,
            features: 64,
            disc_hidden: vec![128, 128, 128, 128],
            representative: 1,
            transcript: false,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(Error::Config(format!(
            "invalid boolean {value:?} for {key}"
        ))),
    }
}

impl ExperimentConfig {
    /// Parses `key = value` lines over the defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {}", n + 1, strip(e))))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "data_dir" => self.data_dir = Some(PathBuf::from(value)),
            "clients" => self.clients = parse(key, value)?,
            "samples_per_client" => self.samples_per_client = parse(key, value)?,
            "target_train" => self.target_train = parse(key, value)?,
            "target_test" => self.target_test = parse(key, value)?,
            "classes" => self.classes = parse(key, value)?,
            "rounds" => self.rounds = parse(key, value)?,
            "init_epochs" => self.init_epochs = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "eta" => self.eta = parse(key, value)?,
            "discriminator" => self.discriminator = parse_bool(key, value)?,
            "consistency" => self.consistency = parse_bool(key, value)?,
            "shift_degrees" => self.shift_degrees = parse(key, value)?,
            "shift_scale" => self.shift_scale = parse(key, value)?,
            "shift_noise" => self.shift_noise = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "out_dir" => self.out_dir = PathBuf::from(value),
            "extractor" => {
                self.extractor = match value {
                    "conv" => ExtractorKind::Conv,
                    "dense" => ExtractorKind::Dense,
                    _ => {
                        return Err(Error::Config(format!(
                            "extractor must be conv or dense, got {value:?}"
                        )))
                    }
                }
            }
            "features" => self.features = parse(key, value)?,
            "disc_hidden" => {
                self.disc_hidden = value
                    .split(',')
                    .map(str::trim)
                    .filter(|v| !v.is_empty())
                    .map(|v| parse(key, v))
                    .collect::<Result<_>>()?
            }
            "representative" => self.representative = parse(key, value)?,
            "transcript" => self.transcript = parse_bool(key, value)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule().validate()?;
        self.shift()?;
        if self.clients == 0 || self.samples_per_client == 0 {
            return Err(Error::Config(
                "clients and samples_per_client must be positive".into(),
            ));
        }
        if self.target_train == 0 || self.target_test == 0 {
            return Err(Error::Config(
                "target_train and target_test must be positive".into(),
            ));
        }
        if self.classes < 2 {
            return Err(Error::Config("classes must be at least 2".into()));
        }
        if self.features == 0 || self.disc_hidden.contains(&0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        if self.representative == 0 || self.representative > self.clients {
            return Err(Error::Config(format!(
                "representative must be a source client in 1..={}",
                self.clients
            )));
        }
        Ok(())
    }

    pub fn data_dir(&self) -> PathBuf {
        self.data_dir
            .clone()
            .or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(DEFAULT_DATA_DIR))
    }

    pub fn schedule(&self) -> RoundSchedule {
        RoundSchedule {
            rounds: self.rounds,
            init_epochs: self.init_epochs,
            batch_size: self.batch_size,
            eta: self.eta,
            discriminator: self.discriminator,
            consistency: self.consistency,
        }
    }

    pub fn shift(&self) -> Result<DomainShiftSpec> {
        DomainShiftSpec::new(self.shift_degrees, self.shift_scale, self.shift_noise)
    }

    pub fn partition_plan(&self) -> PartitionPlan {
        PartitionPlan::even(
            self.clients,
            self.samples_per_client,
            self.target_train,
            self.target_test,
            seed::derive(self.seed, 1),
        )
    }

    pub fn model(&self, image_shape: &[usize]) -> Result<ModelSpec> {
        match self.extractor {
            ExtractorKind::Conv => {
                let [c, h, w] = image_shape else {
                    return Err(Error::Config(format!(
                        "conv extractor needs channel×height×width images, got {image_shape:?}"
                    )));
                };
                ModelSpec::conv(
                    [*c, *h, *w],
                    self.features,
                    &self.disc_hidden,
                    self.classes,
                    self.clients,
                )
            }
            ExtractorKind::Dense => ModelSpec::dense(
                image_shape,
                self.features,
                &self.disc_hidden,
                self.classes,
                self.clients,
            ),
        }
    }

    /// Canonical `key = value` rendering; parsing it yields `self` again.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        };
        if let Some(d) = &self.data_dir {
            kv("data_dir", d.display().to_string());
        }
        kv("clients", self.clients.to_string());
        kv("samples_per_client", self.samples_per_client.to_string());
        kv("target_train", self.target_train.to_string());
        kv("target_test", self.target_test.to_string());
        kv("classes", self.classes.to_string());
        kv("rounds", self.rounds.to_string());
        kv("init_epochs", self.init_epochs.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("eta", self.eta.to_string());
        kv("discriminator", self.discriminator.to_string());
        kv("consistency", self.consistency.to_string());
        kv("shift_degrees", self.shift_degrees.to_string());
        kv("shift_scale", self.shift_scale.to_string());
        kv("shift_noise", self.shift_noise.to_string());
        kv("seed", self.seed.to_string());
        kv("out_dir", self.out_dir.display().to_string());
        kv(
            "extractor",
            match self.extractor {
                ExtractorKind::Conv => "conv",
                ExtractorKind::Dense => "dense",
            }
            .into(),
        );
        kv("features", self.features.to_string());
        kv(
            "disc_hidden",
            self.disc_hidden
                .iter()
                .map(usize::to_string)
                .collect::<Vec<_>>()
                .join(","),
        );
        kv("representative", self.representative.to_string());
        kv("transcript", self.transcript.to_string());
        s
    }
}

fn strip(e: Error) -> String {
    match e {
        Error::Config(m) => m,
        other => other.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        let c = ExperimentConfig::default();
        c.validate().unwrap();
        assert_eq!(c.batch_size, 100);
        assert_eq!(c.rounds, 100);
        assert_eq!(c.eta, 0.01);
    }

    #[test]
    fn parse_overrides_and_comments() {
        let c = ExperimentConfig::parse(
            "# headline\nrounds = 5\n\nclients=3 # inline\ndiscriminator = no\nshift_degrees = -25\n",
        )
        .unwrap();
        assert_eq!(c.rounds, 5);
        assert_eq!(c.clients, 3);
        assert!(!c.discriminator);
        assert_eq!(c.shift_degrees, -25.0);
    }

    #[test]
    fn text_round_trip() {
        let c = ExperimentConfig {
            eta: 0.003,
            data_dir: Some("x/y".into()),
            extractor: ExtractorKind::Dense,
            ..ExperimentConfig::default()
        };
        assert_eq!(ExperimentConfig::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(ExperimentConfig::parse("nope = 1").is_err());
        assert!(ExperimentConfig::parse("rounds").is_err());
        assert!(ExperimentConfig::parse("rounds = -1").is_err());
        let err = ExperimentConfig::parse("seed=1\nrounds = x").unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
        for text in [
            "eta = 0",
            "batch_size = 0",
            "shift_degrees = 50",
            "representative = 11",
        ] {
            let c = ExperimentConfig::parse(text).unwrap();
            assert!(matches!(c.validate(), Err(Error::Config(_))), "{text}");
        }
    }

    #[test]
    fn zero_rounds_allowed() {
        let c = ExperimentConfig::parse("rounds = 0\ninit_epochs = 0").unwrap();
        c.validate().unwrap();
    }
}
