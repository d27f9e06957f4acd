//! Classification, client-discrimination and classifier-consistency losses,
//! each returned together with its exact gradient.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Smallest probability a cross-entropy term may see.
pub const MIN_PROBABILITY: f64 = 1e-300;

/// Logits of shape `batch × K` with one class label per row.
#[derive(Clone, Debug)]
pub struct ClassBatch {
    logits: Tensor,
    labels: Vec<usize>,
}

impl ClassBatch {
    pub fn new(logits: Tensor, labels: Vec<usize>) -> Result<Self> {
        if logits.rank() != 2 {
            return Err(Error::ShapeMismatch(format!(
                "logits must be batch × classes, got {:?}",
                logits.shape()
            )));
        }
        if logits.batch() != labels.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} logit rows but {} labels",
                logits.batch(),
                labels.len()
            )));
        }
        let classes = logits.row_len();
        if let Some(bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::Domain(format!("label {bad} outside [0, {classes})")));
        }
        Ok(Self { logits, labels })
    }

    pub fn logits(&self) -> &Tensor {
        &self.logits
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }
}

/// Discriminator logits of shape `batch × (N+1)` with the uploading client's id
/// as the label of every row.
#[derive(Clone, Debug)]
pub struct DomainBatch {
    inner: ClassBatch,
}

impl DomainBatch {
    pub fn new(logits: Tensor, domain_labels: Vec<usize>, clients: usize) -> Result<Self> {
        if logits.rank() == 2 && logits.row_len() != clients {
            return Err(Error::ShapeMismatch(format!(
                "discriminator width {} but {clients} clients",
                logits.row_len()
            )));
        }
        Ok(Self {
            inner: ClassBatch::new(logits, domain_labels)?,
        })
    }

    /// All rows labelled with the same client id.
    pub fn for_client(logits: Tensor, client: usize, clients: usize) -> Result<Self> {
        let n = logits.batch();
        Self::new(logits, vec![client; n], clients)
    }

    pub fn logits(&self) -> &Tensor {
        self.inner.logits()
    }

    pub fn labels(&self) -> &[usize] {
        self.inner.labels()
    }
}

/// Probability outputs of every source classifier over the same target batch.
#[derive(Clone, Debug)]
pub struct PredictionSet {
    preds: Vec<Tensor>,
}

impl PredictionSet {
    pub fn new(preds: Vec<Tensor>) -> Result<Self> {
        let first = preds
            .first()
            .ok_or_else(|| Error::Domain("prediction set needs at least one classifier".into()))?;
        if first.rank() != 2 {
            return Err(Error::ShapeMismatch(format!(
                "predictions must be batch × classes, got {:?}",
                first.shape()
            )));
        }
        for (i, p) in preds.iter().enumerate() {
            if p.shape() != first.shape() {
                return Err(Error::ShapeMismatch(format!(
                    "classifier {i} predicted {:?}, expected {:?}",
                    p.shape(),
                    first.shape()
                )));
            }
            for (j, row) in p.rows().enumerate() {
                let sum: f64 = row.iter().sum();
                if row.iter().any(|&v| v < 0.0) || (sum - 1.0).abs() > 1e-9 {
                    return Err(Error::Domain(format!(
                        "classifier {i} row {j} is not a probability vector (sum {sum})"
                    )));
                }
            }
        }
        Ok(Self { preds })
    }

    pub fn classifiers(&self) -> usize {
        self.preds.len()
    }

    pub fn predictions(&self) -> &[Tensor] {
        &self.preds
    }
}

/// A scalar loss and its gradient with respect to the loss input.
#[derive(Clone, Debug)]
pub struct LossGrad {
    pub loss: f64,
    pub grad: Tensor,
}

#[derive(Clone, Debug)]
pub struct DomainLoss {
    pub total: f64,
    pub per_client: Vec<f64>,
    pub logit_grads: Vec<Tensor>,
}

#[derive(Clone, Debug)]
pub struct ConsistencyLoss {
    pub loss: f64,
    /// `∂L_p/∂probabilities`, one tensor per classifier.
    pub grads: Vec<Tensor>,
}

// Returns (max, ln Σ exp(z − max)) using ln_1p over the non-maximal terms.
fn shifted_log_sum_exp(row: &[f64]) -> (f64, f64) {
    let mut arg = 0;
    for (k, &v) in row.iter().enumerate() {
        if v > row[arg] {
            arg = k;
        }
    }
    let max = row[arg];
    let rest: f64 = row
        .iter()
        .enumerate()
        .filter(|&(k, _)| k != arg)
        .map(|(_, &v)| (v - max).exp())
        .sum();
    (max, rest.ln_1p())
}

/// Row-wise softmax with max subtraction.
pub fn softmax(logits: &Tensor) -> Tensor {
    let w = logits.row_len();
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.data().chunks(w.max(1)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let start = out.len();
        out.extend(row.iter().map(|&v| (v - max).exp()));
        let sum: f64 = out[start..].iter().sum();
        out[start..].iter_mut().for_each(|v| *v /= sum);
    }
    Tensor::from_parts(logits.shape().to_vec(), out)
}

/// Pulls a gradient with respect to softmax outputs back to the logits:
/// `∂L/∂z = p ⊙ (g − ⟨p, g⟩)` row by row.
pub fn softmax_backward(probs: &Tensor, prob_grad: &Tensor) -> Result<Tensor> {
    if probs.shape() != prob_grad.shape() {
        return Err(Error::ShapeMismatch(format!(
            "probabilities {:?} vs gradient {:?}",
            probs.shape(),
            prob_grad.shape()
        )));
    }
    let w = probs.row_len().max(1);
    let mut out = Vec::with_capacity(probs.len());
    for (p, g) in probs.data().chunks(w).zip(prob_grad.data().chunks(w)) {
        let inner: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
        out.extend(p.iter().zip(g).map(|(a, b)| a * (b - inner)));
    }
    Ok(Tensor::from_parts(probs.shape().to_vec(), out))
}

/// Mean cross-entropy `−(1/n) Σ log p[j, y_j]` with gradient `(softmax − onehot)/n`.
pub fn classification_loss(batch: &ClassBatch) -> Result<LossGrad> {
    let n = batch.labels.len();
    if n == 0 {
        return Err(Error::Domain(
            "classification loss of an empty batch".into(),
        ));
    }
    let floor = MIN_PROBABILITY.ln();
    let scale = 1.0 / n as f64;
    let mut loss = 0.0;
    for (row, &y) in batch.logits.rows().zip(&batch.labels) {
        let (max, lse) = shifted_log_sum_exp(row);
        let log_p = (row[y] - max - lse).max(floor);
        loss -= log_p;
    }
    let mut grad = softmax(&batch.logits);
    for (j, &y) in batch.labels.iter().enumerate() {
        let row = grad.row_mut(j);
        row[y] -= 1.0;
        row.iter_mut().for_each(|v| *v *= scale);
    }
    Ok(LossGrad {
        loss: loss * scale,
        grad,
    })
}

/// Client-discrimination loss: the sum over clients of each client's mean
/// cross-entropy on its own batch.
pub fn domain_loss(batches: &[DomainBatch]) -> Result<DomainLoss> {
    let width = batches
        .first()
        .ok_or_else(|| Error::Domain("domain loss needs at least one client batch".into()))?
        .logits()
        .row_len();
    let mut per_client = Vec::with_capacity(batches.len());
    let mut logit_grads = Vec::with_capacity(batches.len());
    for (i, b) in batches.iter().enumerate() {
        if b.logits().row_len() != width {
            return Err(Error::ShapeMismatch(format!(
                "client batch {i} has width {}, expected {width}",
                b.logits().row_len()
            )));
        }
        if b.labels().is_empty() {
            return Err(Error::Domain(format!("client batch {i} is empty")));
        }
        let lg = classification_loss(&b.inner)?;
        per_client.push(lg.loss);
        logit_grads.push(lg.grad);
    }
    Ok(DomainLoss {
        total: per_client.iter().sum(),
        per_client,
        logit_grads,
    })
}

/// Elementwise mean of the classifiers' probability tensors.
pub fn mean_prediction(preds: &PredictionSet) -> Tensor {
    let first = &preds.preds[0];
    let mut acc = Tensor::zeros(first.shape().to_vec());
    for p in &preds.preds {
        acc.data_mut()
            .iter_mut()
            .zip(p.data())
            .for_each(|(a, b)| *a += b);
    }
    acc.scale(1.0 / preds.preds.len() as f64);
    acc
}

/// `L_p = 1/(n·N) Σ_j Σ_i ‖p_i(j) − p̄(j)‖₂`, with gradients taken through the
/// mean exactly. A zero-norm row contributes a zero subgradient.
pub fn consistency_loss(preds: &PredictionSet) -> ConsistencyLoss {
    consistency_of(&preds.preds)
}

// Shared by the validated entry point and the finite-difference checks, which
// need to evaluate the loss slightly off the probability simplex.
pub(crate) fn consistency_of(preds: &[Tensor]) -> ConsistencyLoss {
    let classifiers = preds.len();
    let shape = preds[0].shape().to_vec();
    let rows = preds[0].batch();
    let width = preds[0].row_len();
    let scale = 1.0 / (rows as f64 * classifiers as f64);

    let mut loss = 0.0;
    let mut grads: Vec<Vec<f64>> = vec![vec![0.0; rows * width]; classifiers];
    let mut mean = vec![0.0; width];
    let mut units = vec![vec![0.0; width]; classifiers];
    let mut unit_sum = vec![0.0; width];
    for j in 0..rows {
        mean.iter_mut().for_each(|v| *v = 0.0);
        for p in preds {
            mean.iter_mut().zip(p.row(j)).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= classifiers as f64);

        unit_sum.iter_mut().for_each(|v| *v = 0.0);
        for (p, unit) in preds.iter().zip(units.iter_mut()) {
            let norm = p
                .row(j)
                .iter()
                .zip(&mean)
                .map(|(a, m)| (a - m) * (a - m))
                .sum::<f64>()
                .sqrt();
            loss += norm;
            for ((u, a), m) in unit.iter_mut().zip(p.row(j)).zip(&mean) {
                *u = if norm > 0.0 { (a - m) / norm } else { 0.0 };
            }
            unit_sum
                .iter_mut()
                .zip(unit.iter())
                .for_each(|(s, u)| *s += u);
        }
        for (g, unit) in grads.iter_mut().zip(&units) {
            let row = &mut g[j * width..(j + 1) * width];
            for ((r, u), s) in row.iter_mut().zip(unit).zip(&unit_sum) {
                *r = scale * (u - s / classifiers as f64);
            }
        }
    }
    ConsistencyLoss {
        loss: loss * scale,
        grads: grads
            .into_iter()
            .map(|g| Tensor::from_parts(shape.clone(), g))
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn softmax_uniform_and_reference() {
        let p = softmax(&t(&[vec![0.0, 0.0, 0.0]]));
        for v in p.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let p = softmax(&t(&[vec![1.0, 2.0, 3.0]]));
        let expected = [0.09003057, 0.24472847, 0.66524096];
        for (a, b) in p.data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-8, "{a} vs {b}");
        }
    }

    #[test]
    fn softmax_does_not_overflow() {
        let p = softmax(&t(&[vec![1000.0, 0.0]]));
        assert_eq!(p.data()[0], 1.0);
        assert!(p.data()[1] >= 0.0 && p.data()[1] < 1e-300);
    }

    #[test]
    fn uniform_logits_give_ln_k() {
        let batch = ClassBatch::new(Tensor::zeros(vec![4, 10]), vec![0, 3, 9, 5]).unwrap();
        let lg = classification_loss(&batch).unwrap();
        assert!((lg.loss - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn saturated_margin_is_nearly_free() {
        let batch = ClassBatch::new(t(&[vec![50.0, 0.0, 0.0]]), vec![0]).unwrap();
        let lg = classification_loss(&batch).unwrap();
        assert!(lg.loss < 1e-20 && lg.loss >= 0.0, "{}", lg.loss);
    }

    #[test]
    fn empty_batch_is_domain_error() {
        let batch = ClassBatch::new(Tensor::zeros(vec![0, 3]), vec![]).unwrap();
        assert!(matches!(classification_loss(&batch), Err(Error::Domain(_))));
        let d = DomainBatch::new(Tensor::zeros(vec![0, 3]), vec![], 3).unwrap();
        assert!(matches!(domain_loss(&[d]), Err(Error::Domain(_))));
    }

    #[test]
    fn label_range_is_checked() {
        assert!(ClassBatch::new(Tensor::zeros(vec![1, 3]), vec![3]).is_err());
        assert!(ClassBatch::new(Tensor::zeros(vec![2, 3]), vec![0]).is_err());
        assert!(DomainBatch::new(Tensor::zeros(vec![1, 3]), vec![0], 4).is_err());
    }

    #[test]
    fn domain_loss_uniform_eleven_clients() {
        let batches: Vec<_> = (0..11)
            .map(|c| DomainBatch::for_client(Tensor::zeros(vec![3, 11]), c, 11).unwrap())
            .collect();
        let d = domain_loss(&batches).unwrap();
        for l in &d.per_client {
            assert!((l - 11f64.ln()).abs() < 1e-12);
        }
        assert!((d.total - 11.0 * 11f64.ln()).abs() < 1e-11);
    }

    #[test]
    fn domain_loss_perfect_discriminator() {
        let batches: Vec<_> = (0..3)
            .map(|c| {
                let mut row = vec![0.0; 3];
                row[c] = 50.0;
                DomainBatch::for_client(t(&[row.clone(), row]), c, 3).unwrap()
            })
            .collect();
        assert!(domain_loss(&batches).unwrap().total < 1e-20);
    }

    #[test]
    fn mean_prediction_cases() {
        let a = t(&[vec![1.0, 0.0]]);
        let b = t(&[vec![0.0, 1.0]]);
        let single = PredictionSet::new(vec![a.clone()]).unwrap();
        assert!(mean_prediction(&single).bitwise_eq(&a));
        let pair = PredictionSet::new(vec![a, b]).unwrap();
        assert_eq!(mean_prediction(&pair).data(), &[0.5, 0.5]);
    }

    #[test]
    #[allow(clippy::approx_constant)]
    fn consistency_two_opposed_classifiers() {
        let set = PredictionSet::new(vec![t(&[vec![1.0, 0.0]]), t(&[vec![0.0, 1.0]])]).unwrap();
        let c = consistency_loss(&set);
        assert!((c.loss - 0.70710678).abs() < 1e-8, "{}", c.loss);
    }

    #[test]
    fn consistency_zero_when_agreeing() {
        let row = t(&[vec![0.25, 0.25, 0.5], vec![0.5, 0.375, 0.125]]);
        let set = PredictionSet::new(vec![row.clone(), row.clone(), row]).unwrap();
        let c = consistency_loss(&set);
        assert_eq!(c.loss, 0.0);
        assert!(c.grads.iter().all(|g| g.max_abs() == 0.0));

        let lone = PredictionSet::new(vec![t(&[vec![0.1, 0.9]])]).unwrap();
        let c = consistency_loss(&lone);
        assert_eq!(c.loss, 0.0);
        assert_eq!(c.grads[0].max_abs(), 0.0);
    }

    #[test]
    fn prediction_set_rejects_non_probabilities() {
        assert!(PredictionSet::new(vec![t(&[vec![0.5, 0.6]])]).is_err());
        assert!(PredictionSet::new(vec![t(&[vec![1.5, -0.5]])]).is_err());
        assert!(PredictionSet::new(vec![]).is_err());
        assert!(PredictionSet::new(vec![t(&[vec![1.0, 0.0]]), t(&[vec![1.0, 0.0, 0.0]])]).is_err());
    }
}
