//! Finite-difference audit of every gradient the protocol relies on: each
//! layer kind, the three losses, and the reversed extractor path.

use std::fmt::Write as _;

use rand::Rng;

use crate::error::Result;
use crate::losses::{
    classification_loss, consistency_of, domain_loss, softmax, softmax_backward, ClassBatch,
    DomainBatch,
};
use crate::nn::{
    central_difference, finite_diff_check, grl_backward, probe_indices, random_tensor,
    relative_error, Architecture, LayerSpec, Network,
};
use crate::seed;
use crate::tensor::Tensor;

/// Relative error every check must stay under.
pub const TOLERANCE: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub probes: usize,
    pub max_relative_error: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_relative_error <= TOLERANCE
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub checks: Vec<CheckResult>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(CheckResult::passed)
    }

    pub fn max_relative_error(&self) -> f64 {
        self.checks
            .iter()
            .fold(0.0, |m, c| m.max(c.max_relative_error))
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("check,probes,max_relative_error,passed\n");
        for c in &self.checks {
            let _ = writeln!(
                out,
                "{},{},{:e},{}",
                c.name,
                c.probes,
                c.max_relative_error,
                c.passed()
            );
        }
        out
    }
}

/// Runs every check with `probes` random probes each.
pub fn run_all(seed: u64, probes: usize) -> Result<GradcheckReport> {
    let dense = Architecture::new(
        vec![6],
        vec![
            LayerSpec::dense(6, 9),
            LayerSpec::Relu,
            LayerSpec::dense(9, 5),
            LayerSpec::Relu,
            LayerSpec::dense(5, 3),
        ],
    )?;
    let conv = Architecture::new(
        vec![2, 9, 9],
        vec![
            LayerSpec::conv2d(2, 3, 3, 2),
            LayerSpec::Relu,
            LayerSpec::conv2d(3, 2, 2, 1),
            LayerSpec::Flatten,
            LayerSpec::dense(18, 4),
        ],
    )?;
    let extractor = small_extractor()?;

    let mut checks = Vec::new();
    for (name, arch, stream) in [
        ("dense+relu", &dense, 1),
        ("conv2d+relu+flatten+dense", &conv, 2),
        ("conv_extractor", &extractor, 3),
    ] {
        checks.push(CheckResult {
            name: name.into(),
            probes,
            max_relative_error: finite_diff_check(arch, seed::derive(seed, stream), probes)?,
        });
    }
    checks.push(check_classification(seed::derive(seed, 4), probes)?);
    checks.push(check_domain(seed::derive(seed, 5), probes)?);
    checks.push(check_consistency(seed::derive(seed, 6), probes)?);
    checks.push(check_reversal_path(seed::derive(seed, 7), probes)?);
    Ok(GradcheckReport { checks })
}

fn small_extractor() -> Result<Architecture> {
    Architecture::new(
        vec![1, 9, 9],
        vec![
            LayerSpec::conv2d(1, 3, 5, 2),
            LayerSpec::Relu,
            LayerSpec::Flatten,
            LayerSpec::dense(27, 6),
            LayerSpec::Relu,
        ],
    )
}

// Probes entries of `x`, comparing `analytic` against central differences of `loss`.
fn probe_tensor(
    rng: &mut impl Rng,
    x: &Tensor,
    analytic: &[f64],
    probes: usize,
    mut loss: impl FnMut(&Tensor) -> Result<f64>,
) -> Result<f64> {
    let mut worst: f64 = 0.0;
    let mut work = x.clone();
    for idx in probe_indices(rng, x.len(), probes) {
        let original = x.data()[idx];
        let numeric = central_difference(
            |v| {
                work.data_mut()[idx] = v;
                loss(&work)
            },
            original,
        )?;
        work.data_mut()[idx] = original;
        worst = worst.max(relative_error(analytic[idx], numeric));
    }
    Ok(worst)
}

fn scaled_logits(rng: &mut impl Rng, shape: Vec<usize>) -> Tensor {
    let mut t = random_tensor(rng, shape);
    t.scale(3.0);
    t
}

fn check_classification(seed: u64, probes: usize) -> Result<CheckResult> {
    let mut rng = seed::rng(seed, 0);
    let logits = scaled_logits(&mut rng, vec![5, 7]);
    let labels: Vec<usize> = (0..5).map(|_| rng.random_range(0..7)).collect();
    let lg = classification_loss(&ClassBatch::new(logits.clone(), labels.clone())?)?;
    let err = probe_tensor(&mut rng, &logits, lg.grad.data(), probes, |z| {
        Ok(classification_loss(&ClassBatch::new(z.clone(), labels.clone())?)?.loss)
    })?;
    Ok(CheckResult {
        name: "classification_loss".into(),
        probes,
        max_relative_error: err,
    })
}

fn check_domain(seed: u64, probes: usize) -> Result<CheckResult> {
    let mut rng = seed::rng(seed, 0);
    let clients = 4;
    let batches: Vec<Tensor> = (0..clients)
        .map(|_| scaled_logits(&mut rng, vec![3, clients]))
        .collect();
    let wrap = |ts: &[Tensor]| -> Result<Vec<DomainBatch>> {
        ts.iter()
            .enumerate()
            .map(|(c, t)| DomainBatch::for_client(t.clone(), c, clients))
            .collect()
    };
    let d = domain_loss(&wrap(&batches)?)?;
    let mut worst: f64 = 0.0;
    let per = probes.div_ceil(clients);
    for c in 0..clients {
        let err = probe_tensor(&mut rng, &batches[c], d.logit_grads[c].data(), per, |z| {
            let mut ts = batches.clone();
            ts[c] = z.clone();
            Ok(domain_loss(&wrap(&ts)?)?.total)
        })?;
        worst = worst.max(err);
    }
    Ok(CheckResult {
        name: "domain_loss".into(),
        probes: per * clients,
        max_relative_error: worst,
    })
}

// Differentiates L_p(softmax(z_1), …, softmax(z_N)) with respect to each z_i,
// which exercises both the mean-through gradient and the softmax pullback.
fn check_consistency(seed: u64, probes: usize) -> Result<CheckResult> {
    let mut rng = seed::rng(seed, 0);
    let classifiers = 3;
    let logits: Vec<Tensor> = (0..classifiers)
        .map(|_| scaled_logits(&mut rng, vec![4, 5]))
        .collect();
    let probs: Vec<Tensor> = logits.iter().map(softmax).collect();
    let c = consistency_of(&probs);
    let mut worst: f64 = 0.0;
    let per = probes.div_ceil(classifiers);
    for i in 0..classifiers {
        let analytic = softmax_backward(&probs[i], &c.grads[i])?;
        let err = probe_tensor(&mut rng, &logits[i], analytic.data(), per, |z| {
            let mut ps = probs.clone();
            ps[i] = softmax(z);
            Ok(consistency_of(&ps).loss)
        })?;
        worst = worst.max(err);
    }
    Ok(CheckResult {
        name: "consistency_loss".into(),
        probes: per * classifiers,
        max_relative_error: worst,
    })
}

/// Extractor → GRL → discriminator → L_d. The analytic extractor gradient
/// through the reversal must equal the negated numeric gradient of the
/// unreversed composition.
fn check_reversal_path(seed: u64, probes: usize) -> Result<CheckResult> {
    let mut rng = seed::rng(seed, 0);
    let arch = small_extractor()?;
    let mut extractor = Network::init(&arch, seed::derive(seed, 1));
    let disc = Network::init(
        &Architecture::mlp(&[arch.output_width(), 5, 3])?,
        seed::derive(seed, 2),
    );
    let input = random_tensor(&mut rng, vec![3, 1, 9, 9]);
    let client = 1;

    let unreversed = |ext: &Network| -> Result<f64> {
        let feats = ext.forward(&input)?;
        let logits = disc.forward(&feats)?;
        Ok(domain_loss(&[DomainBatch::for_client(logits, client, 3)?])?.total)
    };

    let (feats, ext_tape) = extractor.forward_recorded(&input)?;
    let (logits, disc_tape) = disc.forward_recorded(&feats)?;
    let d = domain_loss(&[DomainBatch::for_client(logits, client, 3)?])?;
    let (feat_grad, _) = disc.backward(&disc_tape, &d.logit_grads[0])?;
    let (_, grads) = extractor.backward(&ext_tape, &grl_backward(&feat_grad))?;
    let analytic: Vec<f64> = grads.values().collect();

    let mut worst: f64 = 0.0;
    for idx in probe_indices(&mut rng, extractor.param_count(), probes) {
        let original = extractor.param(idx).expect("index in range");
        let numeric = central_difference(
            |v| {
                extractor.set_param(idx, v)?;
                unreversed(&extractor)
            },
            original,
        )?;
        extractor.set_param(idx, original)?;
        worst = worst.max(relative_error(analytic[idx], -numeric));
    }
    Ok(CheckResult {
        name: "grl_path".into(),
        probes,
        max_relative_error: worst,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_checks_pass_with_few_probes() {
        let report = run_all(17, 20).unwrap();
        assert_eq!(report.checks.len(), 7);
        for c in &report.checks {
            assert!(c.passed(), "{} failed: {:e}", c.name, c.max_relative_error);
        }
    }

    #[test]
    fn report_is_deterministic() {
        assert_eq!(run_all(3, 5).unwrap(), run_all(3, 5).unwrap());
    }
}
