use crate::datasets::Partition;
use crate::error::{Error, Result};
use crate::federation::client::{SourceClient, TargetClient};
use crate::federation::message::{ClientId, Message, TARGET_ID};
use crate::federation::sampler::BatchSampler;
use crate::federation::server::Server;
use crate::federation::wire;
use crate::inference::Evaluation;
use crate::nn::{ModelSpec, Network};
use crate::seed;

// Seed streams; keep stable, they define run reproducibility.
const STREAM_SOURCE_PARAMS: u64 = 100;
const STREAM_SOURCE_SAMPLER: u64 = 200;
const STREAM_TARGET_PARAMS: u64 = 300;
const STREAM_TARGET_SAMPLER: u64 = 301;
const STREAM_DISCRIMINATOR: u64 = 400;
const STREAM_INIT_SAMPLER: u64 = 500;

/// Training schedule shared by initialisation and the federated rounds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RoundSchedule {
    pub rounds: usize,
    pub init_epochs: usize,
    pub batch_size: usize,
    pub eta: f64,
    pub discriminator: bool,
    pub consistency: bool,
}

impl Default for RoundSchedule {
    fn default() -> Self {
        Self {
            rounds: 100,
            init_epochs: 150,
            batch_size: 100,
            eta: 0.01,
            discriminator: true,
            consistency: true,
        }
    }
}

impl RoundSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.eta
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct InitReport {
    /// Representative's mean `L_c` over its shard before training, then after each epoch.
    pub shard_losses: Vec<f64>,
    pub broadcast: Message,
}

#[derive(Clone, Debug)]
pub struct RoundReport {
    /// 1-based index of the completed round.
    pub round: usize,
    pub mean_classification_loss: f64,
    pub domain_loss: Option<f64>,
    pub consistency_loss: Option<f64>,
    /// Every message exchanged this round, in protocol order.
    pub messages: Vec<Message>,
}

/// All participants of one simulated federation.
#[derive(Clone, Debug)]
pub struct Federation {
    spec: ModelSpec,
    schedule: RoundSchedule,
    representative: ClientId,
    seed: u64,
    sources: Vec<SourceClient>,
    target: TargetClient,
    server: Server,
    // Feedback produced last round, indexed by client id.
    disc_inbox: Vec<Option<Message>>,
    cons_inbox: Vec<Option<Message>>,
    initialized: bool,
    round: usize,
}

impl Federation {
    pub fn new(
        spec: &ModelSpec,
        data: Partition,
        schedule: RoundSchedule,
        seed: u64,
    ) -> Result<Self> {
        schedule.validate()?;
        if data.sources.len() != spec.sources {
            return Err(Error::Config(format!(
                "model expects {} source clients, partition has {}",
                spec.sources,
                data.sources.len()
            )));
        }
        let input = spec.extractor.input_shape();
        for (i, shard) in data.sources.iter().enumerate() {
            if &shard.images().shape()[1..] != input {
                return Err(Error::Config(format!(
                    "client {} images {:?} do not match extractor input {input:?}",
                    i + 1,
                    &shard.images().shape()[1..]
                )));
            }
        }
        let sources = data
            .sources
            .into_iter()
            .enumerate()
            .map(|(i, shard)| {
                let id = i + 1;
                let pseed = seed::derive(seed, STREAM_SOURCE_PARAMS + id as u64);
                SourceClient::new(
                    id,
                    Network::init(&spec.extractor, seed::derive(pseed, 1)),
                    Network::init(&spec.classifier, seed::derive(pseed, 2)),
                    shard,
                    schedule.batch_size,
                    seed::derive(seed, STREAM_SOURCE_SAMPLER + id as u64),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let target = TargetClient::new(
            Network::init(&spec.extractor, seed::derive(seed, STREAM_TARGET_PARAMS)),
            data.target_train,
            data.target_test,
            schedule.batch_size,
            seed::derive(seed, STREAM_TARGET_SAMPLER),
        )?;
        let server = Server::new(
            Network::init(
                &spec.discriminator,
                seed::derive(seed, STREAM_DISCRIMINATOR),
            ),
            spec.sources + 1,
        )?;
        Ok(Self {
            spec: spec.clone(),
            schedule,
            representative: 1,
            seed,
            sources,
            target,
            server,
            disc_inbox: vec![None; spec.sources + 1],
            cons_inbox: vec![None; spec.sources + 1],
            initialized: false,
            round: 0,
        })
    }

    /// Chooses which client runs the supervised initialisation (default 1).
    pub fn with_representative(mut self, id: ClientId) -> Self {
        self.representative = id;
        self
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn schedule(&self) -> &RoundSchedule {
        &self.schedule
    }

    pub fn sources(&self) -> &[SourceClient] {
        &self.sources
    }

    pub fn source(&self, id: ClientId) -> Option<&SourceClient> {
        id.checked_sub(1).and_then(|i| self.sources.get(i))
    }

    pub fn target(&self) -> &TargetClient {
        &self.target
    }

    pub fn server(&self) -> &Server {
        &self.server
    }

    pub fn rounds_completed(&self) -> usize {
        self.round
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized
    }

    /// Discriminator feedback waiting for `client`'s next local step.
    pub fn pending_disc_feedback(&self, client: ClientId) -> Option<&Message> {
        self.disc_inbox.get(client).and_then(Option::as_ref)
    }

    pub fn pending_consistency_feedback(&self, client: ClientId) -> Option<&Message> {
        self.cons_inbox.get(client).and_then(Option::as_ref)
    }

    /// Supervised pre-training of the representative client followed by a
    /// parameter broadcast to every other client.
    pub fn run_initialization(&mut self) -> Result<InitReport> {
        if self.initialized {
            return Err(Error::Protocol("initialization already ran".into()));
        }
        let l = self.representative;
        if l == TARGET_ID || l > self.sources.len() {
            return Err(Error::Config(format!(
                "representative {l} is not a labeled source client (1..={})",
                self.sources.len()
            )));
        }
        let mut next = self.clone();
        let eta = next.schedule.eta;
        let rep = &mut next.sources[l - 1];
        let mut sampler = BatchSampler::new(
            rep.shard().len(),
            next.schedule.batch_size,
            seed::derive(next.seed, STREAM_INIT_SAMPLER),
        );
        let mut shard_losses = vec![rep.shard_loss()?];
        for _ in 0..next.schedule.init_epochs {
            for _ in 0..sampler.batches_per_epoch() {
                let batch = sampler.next_batch();
                rep.supervised_step(&batch, eta)?;
            }
            let loss = rep.shard_loss()?;
            if !loss.is_finite() {
                return Err(Error::Numeric(
                    "non-finite loss during initialization".into(),
                ));
            }
            shard_losses.push(loss);
        }
        let broadcast = Message::ParamBroadcast {
            extractor: rep.extractor().export_tensors(),
            classifier: rep.classifier().export_tensors(),
        };
        next.apply_broadcast(&broadcast)?;
        *self = next;
        Ok(InitReport {
            shard_losses,
            broadcast,
        })
    }

    pub(crate) fn apply_broadcast(&mut self, msg: &Message) -> Result<()> {
        let Message::ParamBroadcast {
            extractor,
            classifier,
        } = msg
        else {
            return Err(Error::Protocol(format!(
                "expected ParamBroadcast, got {}",
                msg.kind()
            )));
        };
        for client in &mut self.sources {
            client.adopt(extractor.clone(), classifier.clone())?;
        }
        self.target
            .extractor_mut()
            .import_tensors(extractor.clone())?;
        self.initialized = true;
        Ok(())
    }

    /// One synchronised round. Either the whole round succeeds or no state changes.
    pub fn run_round(&mut self) -> Result<RoundReport> {
        if !self.initialized {
            return Err(Error::Protocol(
                "run_initialization must precede the rounds".into(),
            ));
        }
        let mut next = self.clone();
        let report = next.advance().map_err(|e| match e {
            Error::Numeric(m) => Error::Numeric(format!("round {}: {m}", self.round + 1)),
            other => other,
        })?;
        *self = next;
        Ok(report)
    }

    fn advance(&mut self) -> Result<RoundReport> {
        let eta = self.schedule.eta;
        let mut messages = Vec::new();
        let mut uploads = Vec::with_capacity(self.sources.len() + 1);
        let mut lc_sum = 0.0;

        for client in &mut self.sources {
            let id = client.id();
            let disc = self.disc_inbox[id].take();
            let cons = self.cons_inbox[id].take();
            let step = client.local_step(disc.as_ref(), cons.as_ref(), eta)?;
            lc_sum += step.classification_loss.unwrap_or(0.0);
            uploads.push(step.upload);
        }
        let disc = self.disc_inbox[TARGET_ID].take();
        let target_step = self.target.local_step(disc.as_ref(), eta)?;
        uploads.push(target_step.upload);
        messages.extend(uploads.iter().cloned());

        let mut domain_loss = None;
        if let Some(step) = self
            .server
            .step(&uploads, eta, self.schedule.discriminator)?
        {
            domain_loss = Some(step.total_loss);
            for fb in step.feedback {
                let id = fb.client().expect("feedback is addressed");
                messages.push(fb.clone());
                self.disc_inbox[id] = Some(fb);
            }
        }

        let mut consistency_loss = None;
        if self.schedule.consistency {
            let Some(Message::FeatureUpload { features, .. }) = uploads.last() else {
                unreachable!("target upload is pushed last");
            };
            let broadcast = Message::TargetFeatureBroadcast {
                features: features.clone(),
            };
            messages.push(broadcast.clone());
            let preds = self
                .sources
                .iter_mut()
                .map(|c| c.predict(&broadcast))
                .collect::<Result<Vec<_>>>()?;
            messages.extend(preds.iter().cloned());
            let step = self.server.consistency_round(&preds)?;
            consistency_loss = Some(step.loss);
            for fb in step.feedback {
                let id = fb.client().expect("feedback is addressed");
                messages.push(fb.clone());
                self.cons_inbox[id] = Some(fb);
            }
        }

        let mean_lc = lc_sum / self.sources.len() as f64;
        if !mean_lc.is_finite() {
            return Err(Error::Numeric("non-finite classification loss".into()));
        }
        self.round += 1;
        Ok(RoundReport {
            round: self.round,
            mean_classification_loss: mean_lc,
            domain_loss,
            consistency_loss,
            messages,
        })
    }

    /// Majority vote of all source classifiers over the target extractor's
    /// features of the held-out target test split.
    pub fn evaluate_target(&self) -> Result<Evaluation> {
        let classifiers: Vec<&Network> =
            self.sources.iter().map(SourceClient::classifier).collect();
        self.target.evaluate(&classifiers, self.spec.classes)
    }

    /// Mean accuracy of each source client's own model on its own shard.
    pub fn mean_source_accuracy(&self) -> Result<f64> {
        let mut total = 0.0;
        for c in &self.sources {
            total += c.shard_accuracy()?;
        }
        Ok(total / self.sources.len() as f64)
    }

    /// Byte encoding of every parameter, sampler position, pending batch and
    /// queued feedback. Two federations are in the same state iff their
    /// fingerprints are equal.
    pub fn fingerprint(&self) -> Vec<u8> {
        let mut out = Vec::new();
        let put_net = |out: &mut Vec<u8>, net: &Network| {
            wire::encode_into(
                &Message::ParamBroadcast {
                    extractor: net.export_tensors(),
                    classifier: Vec::new(),
                },
                out,
            );
        };
        for c in &self.sources {
            put_net(&mut out, c.extractor());
            put_net(&mut out, c.classifier());
        }
        put_net(&mut out, self.target.extractor());
        put_net(&mut out, self.server.discriminator());
        let put_batch = |out: &mut Vec<u8>, b: Option<&[usize]>| {
            for &i in b.unwrap_or(&[]) {
                out.extend_from_slice(&(i as u64).to_le_bytes());
            }
            out.push(0xFF);
        };
        for c in &self.sources {
            put_batch(&mut out, c.pending_batch());
        }
        put_batch(&mut out, self.target.pending_batch());
        let samplers = self
            .sources
            .iter()
            .map(SourceClient::sampler)
            .chain([self.target.sampler()]);
        for s in samplers {
            let (epoch, pos) = s.position();
            out.extend_from_slice(&epoch.to_le_bytes());
            out.extend_from_slice(&(pos as u64).to_le_bytes());
        }
        for m in self.disc_inbox.iter().chain(&self.cons_inbox).flatten() {
            wire::encode_into(m, &mut out);
        }
        out.extend_from_slice(&(self.round as u64).to_le_bytes());
        out.extend_from_slice(&self.server.rounds().to_le_bytes());
        out
    }

    pub(crate) fn sources_mut(&mut self) -> &mut [SourceClient] {
        &mut self.sources
    }

    pub(crate) fn target_mut(&mut self) -> &mut TargetClient {
        &mut self.target
    }

    pub(crate) fn server_mut(&mut self) -> &mut Server {
        &mut self.server
    }

    pub(crate) fn deliver(&mut self, msg: Message) -> Result<()> {
        let id = msg
            .client()
            .ok_or_else(|| Error::Protocol("feedback without a client".into()))?;
        let inbox = match msg {
            Message::DiscFeedback { .. } => &mut self.disc_inbox,
            Message::ConsistencyFeedback { .. } => &mut self.cons_inbox,
            _ => return Err(Error::Protocol(format!("{} is not feedback", msg.kind()))),
        };
        let slot = inbox
            .get_mut(id)
            .ok_or_else(|| Error::Protocol(format!("feedback for unknown client {id}")))?;
        *slot = Some(msg);
        Ok(())
    }

    pub(crate) fn take_feedback(&mut self, id: ClientId) -> (Option<Message>, Option<Message>) {
        (self.disc_inbox[id].take(), self.cons_inbox[id].take())
    }

    pub(crate) fn finish_round(&mut self) {
        self.round += 1;
    }
}
