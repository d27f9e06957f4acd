use std::path::PathBuf;
use std::process::ExitCode;

use aftl::experiment::{self, ExperimentConfig};
use aftl::{gradcheck, Error};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "aftl",
    version,
    about = "Adversarial federated transfer learning simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Initialisation plus the configured rounds; writes metrics.csv and summary.txt.
    Run(Overrides),
    /// Discriminator ablation grid A1–A4 / C1–C4; writes ablation.csv.
    Ablation(Overrides),
    /// Finite-difference check of every analytic gradient.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 200)]
        probes: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Overrides {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    clients: Option<usize>,
    #[arg(long)]
    samples_per_client: Option<usize>,
    #[arg(long)]
    no_discriminator: bool,
    #[arg(long)]
    no_consistency: bool,
    #[arg(long, allow_hyphen_values = true)]
    shift_degrees: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Dataset directory; falls back to AFTL_DATA_DIR, then data/mnist.
    #[arg(long)]
    data_dir: Option<PathBuf>,
}

impl Overrides {
    fn resolve(self) -> aftl::Result<ExperimentConfig> {
        let mut c = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if let Some(v) = self.rounds {
            c.rounds = v;
        }
        if let Some(v) = self.clients {
            c.clients = v;
        }
        if let Some(v) = self.samples_per_client {
            c.samples_per_client = v;
        }
        if self.no_discriminator {
            c.discriminator = false;
        }
        if self.no_consistency {
            c.consistency = false;
        }
        if let Some(v) = self.shift_degrees {
            c.shift_degrees = v;
        }
        if let Some(v) = self.out {
            c.out_dir = v;
        }
        if let Some(v) = self.data_dir {
            c.data_dir = Some(v);
        }
        c.validate()?;
        Ok(c)
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Format { .. } | Error::Io { .. } => 2,
        Error::Numeric(_) => 3,
        _ => 1,
    }
}

fn load(config: &ExperimentConfig) -> aftl::Result<Vec<aftl::datasets::LabeledSample>> {
    experiment::load_mnist(&config.data_dir())
}

fn run(cli: Cli) -> aftl::Result<()> {
    match cli.command {
        Command::Run(o) => {
            let config = o.resolve()?;
            let samples = load(&config)?;
            let s = experiment::run_experiment(&config, &samples)?;
            println!(
                "final target accuracy {:.4} after {} rounds; metrics in {}",
                s.final_accuracy,
                s.rows.len(),
                s.out_dir.display()
            );
        }
        Command::Ablation(o) => {
            let config = o.resolve()?;
            let samples = load(&config)?;
            let s = experiment::run_ablation(&config, &experiment::ablation_grid(), &samples)?;
            for c in &s.cells {
                match &c.outcome {
                    Ok(a) => println!("{}  accuracy {a:.4}", c.task.name),
                    Err(e) => println!("{}  failed: {e}", c.task.name),
                }
            }
            for (label, on) in [
                ("with discriminator", true),
                ("without discriminator", false),
            ] {
                if let Some(v) = s.spread(on) {
                    println!("spread {label}: {v:.4}");
                }
            }
        }
        Command::Gradcheck { seed, probes, out } => {
            let report = gradcheck::run_all(seed, probes)?;
            let csv = report.to_csv();
            match out {
                Some(dir) => {
                    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                    experiment::write_atomic(&dir.join("gradcheck.csv"), &csv)?;
                }
                None => print!("{csv}"),
            }
            if !report.passed() {
                return Err(Error::Numeric(format!(
                    "gradient check failed: max relative error {:e}",
                    report.max_relative_error()
                )));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
