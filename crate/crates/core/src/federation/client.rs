use crate::datasets::{LabeledShard, UnlabeledShard};
use crate::error::{Error, Result};
use crate::federation::message::{ClientId, Message, TARGET_ID};
use crate::federation::sampler::BatchSampler;
use crate::inference::{evaluate, majority_vote, Evaluation};
use crate::losses::{classification_loss, softmax, softmax_backward, ClassBatch};
use crate::nn::{grl_backward, Gradients, Network};
use crate::tensor::Tensor;

/// What a local step hands back to the round driver.
#[derive(Clone, Debug)]
pub struct LocalStep {
    pub upload: Message,
    /// `L_c` on the batch just trained on; `None` for the target client.
    pub classification_loss: Option<f64>,
}

fn feature_upload(
    client: ClientId,
    extractor: &Network,
    images: &Tensor,
    indices: Vec<usize>,
) -> Result<Message> {
    Ok(Message::FeatureUpload {
        client,
        features: extractor.forward(images)?,
        indices,
    })
}

fn check_feedback(
    msg: &Message,
    client: ClientId,
    expect_tag: u8,
    expected_shape: &[usize],
) -> Result<Tensor> {
    let (from, grads) = match msg {
        Message::DiscFeedback {
            client,
            feature_grads,
            ..
        } => (*client, feature_grads),
        Message::ConsistencyFeedback {
            client,
            probability_grads,
            ..
        } => (*client, probability_grads),
        other => {
            return Err(Error::Protocol(format!(
                "client {client} cannot apply {} as feedback",
                other.kind()
            )))
        }
    };
    if msg.tag() != expect_tag {
        return Err(Error::Protocol(format!(
            "client {client} expected a different feedback kind than {}",
            msg.kind()
        )));
    }
    if from != client {
        return Err(Error::Protocol(format!(
            "feedback addressed to client {from} delivered to client {client}"
        )));
    }
    if grads.shape() != expected_shape {
        return Err(Error::Protocol(format!(
            "client {client}: feedback shape {:?} does not match {expected_shape:?}",
            grads.shape()
        )));
    }
    Ok(grads.clone())
}

/// A labeled participant with its own extractor and classifier.
#[derive(Clone, Debug)]
pub struct SourceClient {
    id: ClientId,
    extractor: Network,
    classifier: Network,
    shard: LabeledShard,
    sampler: BatchSampler,
    // The batch whose features were last uploaded; the next local step trains on it.
    batch: Option<Vec<usize>>,
    // Target features this client last predicted on.
    target_view: Option<Tensor>,
}

impl SourceClient {
    pub fn new(
        id: ClientId,
        extractor: Network,
        classifier: Network,
        shard: LabeledShard,
        batch_size: usize,
        sampler_seed: u64,
    ) -> Result<Self> {
        if id == TARGET_ID {
            return Err(Error::Config("source client ids start at 1".into()));
        }
        if shard.is_empty() {
            return Err(Error::Config(format!(
                "source client {id} has an empty shard"
            )));
        }
        Ok(Self {
            id,
            sampler: BatchSampler::new(shard.len(), batch_size, sampler_seed),
            extractor,
            classifier,
            shard,
            batch: None,
            target_view: None,
        })
    }

    pub fn id(&self) -> ClientId {
        self.id
    }

    pub fn extractor(&self) -> &Network {
        &self.extractor
    }

    pub fn classifier(&self) -> &Network {
        &self.classifier
    }

    pub fn shard(&self) -> &LabeledShard {
        &self.shard
    }

    /// Indices of the batch the next local step will train on, if drawn yet.
    pub fn pending_batch(&self) -> Option<&[usize]> {
        self.batch.as_deref()
    }

    pub fn target_view(&self) -> Option<&Tensor> {
        self.target_view.as_ref()
    }

    pub fn sampler(&self) -> &BatchSampler {
        &self.sampler
    }

    pub(crate) fn adopt(&mut self, extractor: Vec<Tensor>, classifier: Vec<Tensor>) -> Result<()> {
        self.extractor.import_tensors(extractor)?;
        self.classifier.import_tensors(classifier)
    }

    /// One local update followed by a fresh feature upload.
    ///
    /// Trains on the batch whose features were uploaded last round. The
    /// extractor gradient is `∂L_c/∂θ_F` plus the reversed discriminator
    /// feedback; the classifier gradient is `∂L_c/∂θ_C` plus `∂L_p/∂θ_C` pulled
    /// back through the softmax when consistency feedback is present.
    pub fn local_step(
        &mut self,
        disc: Option<&Message>,
        consistency: Option<&Message>,
        eta: f64,
    ) -> Result<LocalStep> {
        let indices = match self.batch.take() {
            Some(b) => b,
            None => self.sampler.next_batch(),
        };
        let (images, labels) = self.shard.batch(&indices)?;
        let (features, ext_tape) = self.extractor.forward_recorded(&images)?;
        let (logits, cls_tape) = self.classifier.forward_recorded(&features)?;
        let lc = classification_loss(&ClassBatch::new(logits, labels)?)?;
        let (mut feature_grad, mut cls_grads) = self.classifier.backward(&cls_tape, &lc.grad)?;

        if let Some(fb) = disc {
            let g = check_feedback(fb, self.id, 4, features.shape())?;
            feature_grad.add_assign(&grl_backward(&g))?;
        }
        let (_, ext_grads) = self.extractor.backward(&ext_tape, &feature_grad)?;

        if let Some(fb) = consistency {
            let view = self.target_view.as_ref().ok_or_else(|| {
                Error::Protocol(format!(
                    "client {} got consistency feedback without a target broadcast",
                    self.id
                ))
            })?;
            let (tlogits, ttape) = self.classifier.forward_recorded(view)?;
            let probs = softmax(&tlogits);
            let g = check_feedback(fb, self.id, 5, probs.shape())?;
            let dz = softmax_backward(&probs, &g)?;
            let (_, pgrads) = self.classifier.backward(&ttape, &dz)?;
            cls_grads.add_assign(&pgrads)?;
        }

        apply_pair(
            &mut self.extractor,
            &ext_grads,
            &mut self.classifier,
            &cls_grads,
            eta,
        )?;

        let next = self.sampler.next_batch();
        let (next_images, _) = self.shard.batch(&next)?;
        let upload = feature_upload(self.id, &self.extractor, &next_images, next.clone())?;
        self.batch = Some(next);
        Ok(LocalStep {
            upload,
            classification_loss: Some(lc.loss),
        })
    }

    /// Classifies broadcast target features and keeps them for the matching
    /// consistency feedback.
    pub fn predict(&mut self, broadcast: &Message) -> Result<Message> {
        let Message::TargetFeatureBroadcast { features } = broadcast else {
            return Err(Error::Protocol(format!(
                "client {} expected TargetFeatureBroadcast, got {}",
                self.id,
                broadcast.kind()
            )));
        };
        let probabilities = softmax(&self.classifier.forward(features)?);
        self.target_view = Some(features.clone());
        Ok(Message::PredictionUpload {
            client: self.id,
            probabilities,
        })
    }

    /// Supervised step on `L_c` alone over the given batch.
    pub(crate) fn supervised_step(&mut self, indices: &[usize], eta: f64) -> Result<f64> {
        let (images, labels) = self.shard.batch(indices)?;
        let (features, ext_tape) = self.extractor.forward_recorded(&images)?;
        let (logits, cls_tape) = self.classifier.forward_recorded(&features)?;
        let lc = classification_loss(&ClassBatch::new(logits, labels)?)?;
        let (feature_grad, cls_grads) = self.classifier.backward(&cls_tape, &lc.grad)?;
        let (_, ext_grads) = self.extractor.backward(&ext_tape, &feature_grad)?;
        apply_pair(
            &mut self.extractor,
            &ext_grads,
            &mut self.classifier,
            &cls_grads,
            eta,
        )?;
        Ok(lc.loss)
    }

    /// Mean `L_c` over the whole shard, in chunks.
    pub fn shard_loss(&self) -> Result<f64> {
        let n = self.shard.len();
        let mut total = 0.0;
        for start in (0..n).step_by(500) {
            let idx: Vec<usize> = (start..(start + 500).min(n)).collect();
            let (images, labels) = self.shard.batch(&idx)?;
            let logits = self.classifier.forward(&self.extractor.forward(&images)?)?;
            total +=
                classification_loss(&ClassBatch::new(logits, labels)?)?.loss * idx.len() as f64;
        }
        Ok(total / n as f64)
    }

    /// Accuracy of this client's own extractor and classifier on its shard.
    pub fn shard_accuracy(&self) -> Result<f64> {
        let logits = self
            .classifier
            .forward(&self.extractor.forward(self.shard.images())?)?;
        let preds = logits.argmax_rows();
        let correct = preds
            .iter()
            .zip(self.shard.labels())
            .filter(|(p, y)| p == y)
            .count();
        Ok(correct as f64 / self.shard.len() as f64)
    }
}

// Checks both buffers before touching either network.
fn apply_pair(
    a: &mut Network,
    ga: &Gradients,
    b: &mut Network,
    gb: &Gradients,
    eta: f64,
) -> Result<()> {
    if !ga.is_finite() || !gb.is_finite() {
        return Err(Error::Numeric("non-finite gradient; step refused".into()));
    }
    a.sgd_step(ga, eta)?;
    b.sgd_step(gb, eta)
}

/// The unlabeled participant. It owns a feature extractor only; its training
/// data carries no labels, and the labeled test split is read only by
/// [`TargetClient::evaluate`].
#[derive(Clone, Debug)]
pub struct TargetClient {
    extractor: Network,
    shard: UnlabeledShard,
    test_set: LabeledShard,
    sampler: BatchSampler,
    batch: Option<Vec<usize>>,
}

impl TargetClient {
    pub fn new(
        extractor: Network,
        shard: UnlabeledShard,
        test_set: LabeledShard,
        batch_size: usize,
        sampler_seed: u64,
    ) -> Result<Self> {
        if shard.is_empty() {
            return Err(Error::Config("target client has an empty shard".into()));
        }
        Ok(Self {
            sampler: BatchSampler::new(shard.len(), batch_size, sampler_seed),
            extractor,
            shard,
            test_set,
            batch: None,
        })
    }

    pub fn extractor(&self) -> &Network {
        &self.extractor
    }

    pub fn shard(&self) -> &UnlabeledShard {
        &self.shard
    }

    pub fn pending_batch(&self) -> Option<&[usize]> {
        self.batch.as_deref()
    }

    pub(crate) fn extractor_mut(&mut self) -> &mut Network {
        &mut self.extractor
    }

    pub fn sampler(&self) -> &BatchSampler {
        &self.sampler
    }

    /// Ascends `L_d^t` through the reversal; without feedback nothing changes.
    pub fn local_step(&mut self, disc: Option<&Message>, eta: f64) -> Result<LocalStep> {
        let indices = match self.batch.take() {
            Some(b) => b,
            None => self.sampler.next_batch(),
        };
        if let Some(fb) = disc {
            let images = self.shard.batch(&indices)?;
            let (features, tape) = self.extractor.forward_recorded(&images)?;
            let g = check_feedback(fb, TARGET_ID, 4, features.shape())?;
            let (_, grads) = self.extractor.backward(&tape, &grl_backward(&g))?;
            self.extractor.sgd_step(&grads, eta)?;
        }
        let next = self.sampler.next_batch();
        let images = self.shard.batch(&next)?;
        let upload = feature_upload(TARGET_ID, &self.extractor, &images, next.clone())?;
        self.batch = Some(next);
        Ok(LocalStep {
            upload,
            classification_loss: None,
        })
    }

    /// Majority vote of `classifiers` over this client's features of the test split.
    pub fn evaluate(&self, classifiers: &[&Network], classes: usize) -> Result<Evaluation> {
        let features = self.extractor.forward(self.test_set.images())?;
        let votes = classifiers
            .iter()
            .map(|c| Ok(c.forward(&features)?.argmax_rows()))
            .collect::<Result<Vec<_>>>()?;
        let decisions = majority_vote(&votes)?;
        evaluate(&decisions, self.test_set.labels(), classes)
    }
}
