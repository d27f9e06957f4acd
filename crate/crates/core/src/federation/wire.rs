//! Binary transcript format.
//!
//! A record is a little-endian `u32` length (counting the tag and body), a
//! one-byte variant tag, then the fields in declaration order:
//!
//! * tensor: `u32` rank, `rank × u64` dims, raw little-endian `f64` payload
//! * tensor list: `u32` count, then tensors
//! * client id: `u32`
//! * sample indices: `u32` count, then `u64` each
//! * loss: `f64`
//!
//! A transcript file is a plain concatenation of records.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::federation::message::Message;
use crate::tensor::Tensor;

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_tensor(out: &mut Vec<u8>, t: &Tensor) {
    put_u32(out, t.rank());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn put_tensors(out: &mut Vec<u8>, ts: &[Tensor]) {
    put_u32(out, ts.len());
    for t in ts {
        put_tensor(out, t);
    }
}

/// Appends one record for `msg` to `out`.
pub fn encode_into(msg: &Message, out: &mut Vec<u8>) {
    let start = out.len();
    out.extend_from_slice(&[0; 4]);
    out.push(msg.tag());
    match msg {
        Message::ParamBroadcast {
            extractor,
            classifier,
        } => {
            put_tensors(out, extractor);
            put_tensors(out, classifier);
        }
        Message::FeatureUpload {
            client,
            features,
            indices,
        } => {
            put_u32(out, *client);
            put_tensor(out, features);
            put_u32(out, indices.len());
            for &i in indices {
                out.extend_from_slice(&(i as u64).to_le_bytes());
            }
        }
        Message::TargetFeatureBroadcast { features } => put_tensor(out, features),
        Message::PredictionUpload {
            client,
            probabilities,
        } => {
            put_u32(out, *client);
            put_tensor(out, probabilities);
        }
        Message::DiscFeedback {
            client,
            feature_grads: grads,
            loss,
        }
        | Message::ConsistencyFeedback {
            client,
            probability_grads: grads,
            loss,
        } => {
            put_u32(out, *client);
            put_tensor(out, grads);
            out.extend_from_slice(&loss.to_le_bytes());
        }
    }
    let len = (out.len() - start - 4) as u32;
    out[start..start + 4].copy_from_slice(&len.to_le_bytes());
}

pub fn encode(msg: &Message) -> Vec<u8> {
    let mut out = Vec::new();
    encode_into(msg, &mut out);
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn fail(&self, message: impl Into<String>) -> Error {
        Error::Wire {
            offset: self.pos,
            message: message.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.fail(format!(
                "need {n} bytes, {} left",
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn usize64(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| self.fail("value overflows usize"))
    }

    fn tensor(&mut self) -> Result<Tensor> {
        let rank = self.u32()?;
        let mut shape = Vec::with_capacity(rank.min(16));
        for _ in 0..rank {
            shape.push(self.usize64()?);
        }
        let len = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| self.fail("tensor size overflows"))?;
        let bytes_needed = len
            .checked_mul(8)
            .ok_or_else(|| self.fail("tensor size overflows"))?;
        let raw = self.take(bytes_needed)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let at = self.pos;
        Tensor::new(shape, data).map_err(|e| Error::Wire {
            offset: at,
            message: e.to_string(),
        })
    }

    fn tensors(&mut self) -> Result<Vec<Tensor>> {
        let n = self.u32()?;
        (0..n).map(|_| self.tensor()).collect()
    }
}

/// Decodes one record from the front of `bytes`, returning it and the number
/// of bytes consumed.
pub fn decode(bytes: &[u8]) -> Result<(Message, usize)> {
    let mut head = Reader { bytes, pos: 0 };
    let len = head.u32()?;
    let body = head.take(len)?;
    let mut r = Reader {
        bytes: body,
        pos: 0,
    };
    let tag = r.u8()?;
    let msg = match tag {
        0 => Message::ParamBroadcast {
            extractor: r.tensors()?,
            classifier: r.tensors()?,
        },
        1 => {
            let client = r.u32()?;
            let features = r.tensor()?;
            let n = r.u32()?;
            let indices = (0..n).map(|_| r.usize64()).collect::<Result<_>>()?;
            Message::FeatureUpload {
                client,
                features,
                indices,
            }
        }
        2 => Message::TargetFeatureBroadcast {
            features: r.tensor()?,
        },
        3 => Message::PredictionUpload {
            client: r.u32()?,
            probabilities: r.tensor()?,
        },
        4 => Message::DiscFeedback {
            client: r.u32()?,
            feature_grads: r.tensor()?,
            loss: r.f64()?,
        },
        5 => Message::ConsistencyFeedback {
            client: r.u32()?,
            probability_grads: r.tensor()?,
            loss: r.f64()?,
        },
        other => {
            return Err(Error::Wire {
                offset: 4,
                message: format!("unknown variant tag {other}"),
            })
        }
    };
    if r.pos != body.len() {
        return Err(Error::Wire {
            offset: 4 + r.pos,
            message: format!("{} unread bytes in record", body.len() - r.pos),
        });
    }
    Ok((msg, 4 + len))
}

/// Decodes a whole transcript.
pub fn decode_all(mut bytes: &[u8]) -> Result<Vec<Message>> {
    let mut out = Vec::new();
    let mut consumed = 0;
    while !bytes.is_empty() {
        let (msg, used) = decode(bytes).map_err(|e| match e {
            Error::Wire { offset, message } => Error::Wire {
                offset: consumed + offset,
                message,
            },
            other => other,
        })?;
        out.push(msg);
        bytes = &bytes[used..];
        consumed += used;
    }
    Ok(out)
}

/// Streams encoded records to a file.
pub struct TranscriptWriter {
    out: BufWriter<File>,
    buf: Vec<u8>,
    path: std::path::PathBuf,
}

impl TranscriptWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(Self {
            out: BufWriter::new(file),
            buf: Vec::new(),
            path: path.to_path_buf(),
        })
    }

    pub fn write(&mut self, msg: &Message) -> Result<()> {
        self.buf.clear();
        encode_into(msg, &mut self.buf);
        self.out
            .write_all(&self.buf)
            .map_err(|e| Error::io(&self.path, e))
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

pub fn read_transcript(path: &Path) -> Result<Vec<Message>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_all(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn record_layout() {
        let msg = Message::DiscFeedback {
            client: 3,
            feature_grads: Tensor::new(vec![1, 2], vec![1.5, -2.0]).unwrap(),
            loss: 0.25,
        };
        let bytes = encode(&msg);
        // tag + client + rank + 2 dims + 2 values + loss
        let body = 1 + 4 + 4 + 16 + 16 + 8;
        assert_eq!(bytes.len(), 4 + body);
        assert_eq!(&bytes[..4], &(body as u32).to_le_bytes());
        assert_eq!(bytes[4], 4);
        assert_eq!(&bytes[5..9], &3u32.to_le_bytes());
        assert_eq!(&bytes[9..13], &2u32.to_le_bytes());
        assert_eq!(&bytes[13..21], &1u64.to_le_bytes());
        assert_eq!(&bytes[29..37], &1.5f64.to_le_bytes());
        assert_eq!(decode(&bytes).unwrap(), (msg, bytes.len()));
    }

    #[test]
    fn rejects_bad_tag_and_truncation() {
        let msg = Message::TargetFeatureBroadcast {
            features: Tensor::zeros(vec![2, 2]),
        };
        let mut bytes = encode(&msg);
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        bytes[4] = 9;
        assert!(matches!(decode(&bytes), Err(Error::Wire { .. })));
    }

    #[test]
    fn rejects_non_finite_payload() {
        let mut bytes = encode(&Message::TargetFeatureBroadcast {
            features: Tensor::zeros(vec![1]),
        });
        let n = bytes.len();
        bytes[n - 8..].copy_from_slice(&f64::NAN.to_le_bytes());
        assert!(decode(&bytes).is_err());
    }
}
