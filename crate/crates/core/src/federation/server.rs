use crate::error::{Error, Result};
use crate::federation::message::{ClientId, Message};
use crate::losses::{consistency_loss, domain_loss, DomainBatch, PredictionSet};
use crate::nn::{Gradients, Network};
use crate::tensor::Tensor;

/// Result of one discriminator step.
#[derive(Clone, Debug)]
pub struct DiscStep {
    /// One `DiscFeedback` per client, in client-id order.
    pub feedback: Vec<Message>,
    pub total_loss: f64,
    pub per_client: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct ConsistencyStep {
    /// One `ConsistencyFeedback` per source client, in client-id order.
    pub feedback: Vec<Message>,
    pub loss: f64,
}

/// The central server: hosts the client discriminator and never sees raw data.
#[derive(Clone, Debug)]
pub struct Server {
    discriminator: Network,
    clients: usize,
    rounds: u64,
    latest: Vec<Option<Tensor>>,
}

impl Server {
    /// `clients` counts the target as well, so it equals the discriminator width.
    pub fn new(discriminator: Network, clients: usize) -> Result<Self> {
        if discriminator.architecture().output_shape() != [clients] {
            return Err(Error::Config(format!(
                "discriminator width {:?} must equal client count {clients}",
                discriminator.architecture().output_shape()
            )));
        }
        Ok(Self {
            discriminator,
            clients,
            rounds: 0,
            latest: vec![None; clients],
        })
    }

    pub fn discriminator(&self) -> &Network {
        &self.discriminator
    }

    pub fn clients(&self) -> usize {
        self.clients
    }

    /// Number of discriminator updates performed.
    pub fn rounds(&self) -> u64 {
        self.rounds
    }

    /// Latest uploaded features of `client`.
    pub fn latest_features(&self, client: ClientId) -> Option<&Tensor> {
        self.latest.get(client).and_then(Option::as_ref)
    }

    // Orders uploads by client id and checks there is exactly one per client.
    fn collect<'a>(&self, uploads: &'a [Message]) -> Result<Vec<&'a Tensor>> {
        let mut slots: Vec<Option<&Tensor>> = vec![None; self.clients];
        for msg in uploads {
            let Message::FeatureUpload {
                client, features, ..
            } = msg
            else {
                return Err(Error::Protocol(format!(
                    "server expected FeatureUpload, got {}",
                    msg.kind()
                )));
            };
            let slot = slots
                .get_mut(*client)
                .ok_or_else(|| Error::Protocol(format!("upload from unknown client {client}")))?;
            if slot.replace(features).is_some() {
                return Err(Error::Protocol(format!(
                    "duplicate upload from client {client}"
                )));
            }
        }
        slots
            .into_iter()
            .enumerate()
            .map(|(client, s)| s.ok_or(Error::Straggler { client }))
            .collect()
    }

    /// Computes `L_d` over every client's uploaded features, returns each
    /// client `∂L_d/∂features` evaluated at the current (pre-update)
    /// discriminator, then takes one descent step on `L_d`.
    ///
    /// With the discriminator disabled nothing is computed, the state is left
    /// untouched, and `None` is returned.
    pub fn step(
        &mut self,
        uploads: &[Message],
        eta: f64,
        enabled: bool,
    ) -> Result<Option<DiscStep>> {
        if !enabled {
            return Ok(None);
        }
        let features = self.collect(uploads)?;
        let mut batches = Vec::with_capacity(self.clients);
        let mut tapes = Vec::with_capacity(self.clients);
        for (client, f) in features.iter().enumerate() {
            let (logits, tape) = self.discriminator.forward_recorded(f)?;
            batches.push(DomainBatch::for_client(logits, client, self.clients)?);
            tapes.push(tape);
        }
        let loss = domain_loss(&batches)?;
        if !loss.total.is_finite() {
            return Err(Error::Numeric("non-finite discrimination loss".into()));
        }
        let mut total = Gradients::zeros_like(&self.discriminator);
        let mut feedback = Vec::with_capacity(self.clients);
        for (client, (tape, logit_grad)) in tapes.iter().zip(&loss.logit_grads).enumerate() {
            let (feature_grads, grads) = self.discriminator.backward(tape, logit_grad)?;
            total.add_assign(&grads)?;
            feedback.push(Message::DiscFeedback {
                client,
                feature_grads,
                loss: loss.per_client[client],
            });
        }
        self.discriminator.sgd_step(&total, eta)?;
        self.latest = features.into_iter().map(|f| Some(f.clone())).collect();
        self.rounds += 1;
        Ok(Some(DiscStep {
            feedback,
            total_loss: loss.total,
            per_client: loss.per_client,
        }))
    }

    /// Forms the prediction set from every source client's upload and returns
    /// each client its slice of `∂L_p/∂probabilities`.
    pub fn consistency_round(&self, uploads: &[Message]) -> Result<ConsistencyStep> {
        let sources = self.clients - 1;
        let mut slots: Vec<Option<&Tensor>> = vec![None; sources];
        for msg in uploads {
            let Message::PredictionUpload {
                client,
                probabilities,
            } = msg
            else {
                return Err(Error::Protocol(format!(
                    "server expected PredictionUpload, got {}",
                    msg.kind()
                )));
            };
            let slot = client
                .checked_sub(1)
                .and_then(|i| slots.get_mut(i))
                .ok_or_else(|| {
                    Error::Protocol(format!("prediction from non-source client {client}"))
                })?;
            if slot.replace(probabilities).is_some() {
                return Err(Error::Protocol(format!(
                    "duplicate prediction from client {client}"
                )));
            }
        }
        let preds = slots
            .into_iter()
            .enumerate()
            .map(|(i, s)| s.cloned().ok_or(Error::Straggler { client: i + 1 }))
            .collect::<Result<Vec<_>>>()?;
        let set = PredictionSet::new(preds)
            .map_err(|e| Error::Protocol(format!("prediction batch mismatch: {e}")))?;
        let c = consistency_loss(&set);
        Ok(ConsistencyStep {
            feedback: c
                .grads
                .into_iter()
                .enumerate()
                .map(|(i, g)| Message::ConsistencyFeedback {
                    client: i + 1,
                    probability_grads: g,
                    loss: c.loss,
                })
                .collect(),
            loss: c.loss,
        })
    }
}
