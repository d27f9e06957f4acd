use std::fmt::Write as _;
use std::fs;

use rayon::prelude::*;

use crate::datasets::LabeledSample;
use crate::error::{Error, Result};
use crate::experiment::config::ExperimentConfig;
use crate::experiment::metrics::write_atomic;
use crate::experiment::run_experiment;

pub const ABLATION_FILE: &str = "ablation.csv";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AblationTask {
    pub name: String,
    pub discriminator: bool,
    pub clients: usize,
    pub samples_per_client: usize,
}

/// Tasks A1–A4 (no discriminator) and C1–C4 (with discriminator) over the
/// client/sample settings (5, 200), (10, 100), (5, 800), (10, 400).
pub fn ablation_grid() -> Vec<AblationTask> {
    let settings = [(5, 200), (10, 100), (5, 800), (10, 400)];
    [("A", false), ("C", true)]
        .into_iter()
        .flat_map(|(prefix, discriminator)| {
            settings
                .into_iter()
                .enumerate()
                .map(move |(i, (clients, samples_per_client))| AblationTask {
                    name: format!("{prefix}{}", i + 1),
                    discriminator,
                    clients,
                    samples_per_client,
                })
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct CellResult {
    pub task: AblationTask,
    pub seed: u64,
    /// Final target accuracy, or the error message of a failed cell.
    pub outcome: std::result::Result<f64, String>,
}

#[derive(Clone, Debug)]
pub struct AblationSummary {
    pub cells: Vec<CellResult>,
}

impl AblationSummary {
    /// Max minus min final accuracy over the successful cells of one arm.
    pub fn spread(&self, discriminator: bool) -> Option<f64> {
        let accs: Vec<f64> = self
            .cells
            .iter()
            .filter(|c| c.task.discriminator == discriminator)
            .filter_map(|c| c.outcome.as_ref().ok().copied())
            .collect();
        if accs.is_empty() {
            return None;
        }
        let max = accs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min = accs.iter().copied().fold(f64::INFINITY, f64::min);
        Some(max - min)
    }

    pub fn accuracy(&self, name: &str) -> Option<f64> {
        self.cells
            .iter()
            .find(|c| c.task.name == name)
            .and_then(|c| c.outcome.as_ref().ok().copied())
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "task,discriminator,clients,samples_per_client,seed,final_accuracy,error\n",
        );
        for c in &self.cells {
            let (acc, err) = match &c.outcome {
                Ok(a) => (a.to_string(), String::new()),
                Err(e) => (String::new(), e.replace([',', '\n'], ";")),
            };
            let _ = writeln!(
                s,
                "{},{},{},{},{},{acc},{err}",
                c.task.name,
                c.task.discriminator,
                c.task.clients,
                c.task.samples_per_client,
                c.seed
            );
        }
        for (arm, on) in [
            ("with_discriminator", true),
            ("without_discriminator", false),
        ] {
            let spread = self.spread(on).map(|v| v.to_string()).unwrap_or_default();
            let _ = writeln!(s, "# spread_{arm},{spread}");
        }
        s
    }
}

/// Runs every task over `base`, each in `base.out_dir/<task>`. Tasks sharing a
/// client/sample setting share a seed, `base.seed` plus the setting's index.
/// A failing cell is recorded and the others still run.
pub fn run_ablation(
    base: &ExperimentConfig,
    tasks: &[AblationTask],
    samples: &[LabeledSample],
) -> Result<AblationSummary> {
    base.validate()?;
    if tasks.is_empty() {
        return Err(Error::Config("ablation grid is empty".into()));
    }
    let mut settings: Vec<(usize, usize)> = Vec::new();
    for t in tasks {
        if !settings.contains(&(t.clients, t.samples_per_client)) {
            settings.push((t.clients, t.samples_per_client));
        }
    }
    fs::create_dir_all(&base.out_dir).map_err(|e| Error::io(&base.out_dir, e))?;
    let cells = tasks
        .par_iter()
        .map(|task| {
            let offset = settings
                .iter()
                .position(|&s| s == (task.clients, task.samples_per_client))
                .expect("setting collected above");
            let mut cfg = base.clone();
            cfg.clients = task.clients;
            cfg.samples_per_client = task.samples_per_client;
            cfg.discriminator = task.discriminator;
            cfg.representative = cfg.representative.min(task.clients);
            cfg.seed = base.seed.wrapping_add(offset as u64);
            cfg.out_dir = base.out_dir.join(&task.name);
            let outcome = run_experiment(&cfg, samples)
                .map(|r| r.final_accuracy)
                .map_err(|e| e.to_string());
            CellResult {
                task: task.clone(),
                seed: cfg.seed,
                outcome,
            }
        })
        .collect();
    let summary = AblationSummary { cells };
    write_atomic(&base.out_dir.join(ABLATION_FILE), &summary.to_csv())?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_names_and_arms() {
        let g = ablation_grid();
        let names: Vec<_> = g.iter().map(|t| t.name.as_str()).collect();
        assert_eq!(names, ["A1", "A2", "A3", "A4", "C1", "C2", "C3", "C4"]);
        assert!(g[..4].iter().all(|t| !t.discriminator));
        assert!(g[4..].iter().all(|t| t.discriminator));
        assert_eq!((g[2].clients, g[2].samples_per_client), (5, 800));
        assert_eq!((g[7].clients, g[7].samples_per_client), (10, 400));
    }

    #[test]
    fn spread_ignores_failures() {
        let cell = |name: &str, on, outcome| CellResult {
            task: AblationTask {
                name: name.into(),
                discriminator: on,
                clients: 1,
                samples_per_client: 1,
            },
            seed: 0,
            outcome,
        };
        let s = AblationSummary {
            cells: vec![
                cell("A1", false, Ok(0.5)),
                cell("A2", false, Ok(0.75)),
                cell("C1", true, Ok(0.9)),
                cell("C2", true, Err("boom".into())),
            ],
        };
        assert_eq!(s.spread(false), Some(0.25));
        assert_eq!(s.spread(true), Some(0.0));
        assert_eq!(s.accuracy("C2"), None);
        assert!(s.to_csv().contains("C2,true,1,1,0,,boom"));
    }
}
