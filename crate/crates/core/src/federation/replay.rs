//! Deterministic replay of a recorded transcript.
//!
//! Each participant is driven only by the messages it received in the
//! recording, and every message it emits must equal the recorded one bit for
//! bit.

use crate::error::{Error, Result};
use crate::federation::message::{Message, TARGET_ID};
use crate::federation::round::Federation;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReplayReport {
    pub rounds: usize,
    pub messages: usize,
}

struct Cursor<'a> {
    messages: &'a [Message],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn next(&mut self, what: &str) -> Result<&'a Message> {
        let m = self.messages.get(self.pos).ok_or_else(|| {
            Error::Protocol(format!(
                "transcript ended at message {} while expecting {what}",
                self.pos
            ))
        })?;
        self.pos += 1;
        Ok(m)
    }

    // Consumes the next recorded message and checks it against what a participant produced.
    fn verify(&mut self, produced: &Message) -> Result<&'a Message> {
        let at = self.pos;
        let recorded = self.next(produced.kind())?;
        if recorded != produced {
            return Err(Error::Protocol(format!(
                "replay diverged at message {at}: recorded {} for {:?}, participant produced {} for {:?}",
                recorded.kind(),
                recorded.client(),
                produced.kind(),
                produced.client()
            )));
        }
        Ok(recorded)
    }

    fn done(&self) -> bool {
        self.pos == self.messages.len()
    }
}

impl Federation {
    /// Replays `transcript` into this freshly constructed federation, which
    /// must have been built from the same configuration and seed as the
    /// recorded one.
    pub fn replay(&mut self, transcript: &[Message]) -> Result<ReplayReport> {
        if self.is_initialized() || self.rounds_completed() > 0 {
            return Err(Error::Protocol("replay needs a fresh federation".into()));
        }
        let mut cur = Cursor {
            messages: transcript,
            pos: 0,
        };
        let init = self.run_initialization()?;
        cur.verify(&init.broadcast)?;

        let eta = self.schedule().eta;
        let disc_on = self.schedule().discriminator;
        let cons_on = self.schedule().consistency;
        let n = self.sources().len();
        let mut rounds = 0;
        while !cur.done() {
            // Client uploads, each driven by the feedback delivered last round.
            let mut uploads = Vec::with_capacity(n + 1);
            for i in 0..n {
                let id = i + 1;
                let (disc, cons) = self.take_feedback(id);
                let step = self.sources_mut()[i].local_step(disc.as_ref(), cons.as_ref(), eta)?;
                uploads.push(cur.verify(&step.upload)?.clone());
            }
            let (disc, _) = self.take_feedback(TARGET_ID);
            let step = self.target_mut().local_step(disc.as_ref(), eta)?;
            uploads.push(cur.verify(&step.upload)?.clone());

            // Server consumes the recorded uploads.
            if let Some(step) = self.server_mut().step(&uploads, eta, disc_on)? {
                for fb in step.feedback {
                    let recorded = cur.verify(&fb)?.clone();
                    self.deliver(recorded)?;
                }
            }

            if cons_on {
                let Some(Message::FeatureUpload { features, .. }) = uploads.last() else {
                    unreachable!("target upload is last");
                };
                let broadcast = cur
                    .verify(&Message::TargetFeatureBroadcast {
                        features: features.clone(),
                    })?
                    .clone();
                let mut preds = Vec::with_capacity(n);
                for client in self.sources_mut() {
                    let p = client.predict(&broadcast)?;
                    preds.push(cur.verify(&p)?.clone());
                }
                let step = self.server_mut().consistency_round(&preds)?;
                for fb in step.feedback {
                    let recorded = cur.verify(&fb)?.clone();
                    self.deliver(recorded)?;
                }
            }
            self.finish_round();
            rounds += 1;
        }
        Ok(ReplayReport {
            rounds,
            messages: transcript.len(),
        })
    }
}
