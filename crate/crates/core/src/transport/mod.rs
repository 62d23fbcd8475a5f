//! Messages and their binary framing, shared by the simulated and TCP transports.
//!
//! Frame layout:
//!
//! ```text
//! u32 BE  length of everything after this field
//! u8      kind tag
//! u32 BE  sender worker id
//! u32 BE  receiver worker id
//! i64 BE  batch id, -1 when absent
//! ...     payload
//! ```
//!
//! Tensors inside payloads are `rank u32 LE, dims u32 LE, values f64 LE`.

pub mod sim;
pub mod tcp;

use crate::error::WireError;
use crate::fault::WorkerId;
use crate::model::{LayerParams, WeightSet};
use crate::pipeline::{BatchMeta, Status, TrainingState};
use crate::replication::{Snapshot, SnapshotKind};
use crate::tensor::Tensor;
use crate::wire::{Reader, Writer};

/// Bytes before the payload: length, kind, sender, receiver, batch id.
pub const FRAME_HEADER_LEN: usize = 4 + 1 + 4 + 4 + 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum MessageKind {
    Activation,
    Gradient,
    WeightSnapshot,
    SnapshotAck,
    Probe,
    ProbeAck,
    StateSync,
    Repartition,
    WeightFetch,
    WeightFetchAck,
    FetchDone,
    Commit,
    BandwidthProbe,
}

impl MessageKind {
    pub const ALL: [MessageKind; 13] = [
        MessageKind::Activation,
        MessageKind::Gradient,
        MessageKind::WeightSnapshot,
        MessageKind::SnapshotAck,
        MessageKind::Probe,
        MessageKind::ProbeAck,
        MessageKind::StateSync,
        MessageKind::Repartition,
        MessageKind::WeightFetch,
        MessageKind::WeightFetchAck,
        MessageKind::FetchDone,
        MessageKind::Commit,
        MessageKind::BandwidthProbe,
    ];

    pub fn tag(self) -> u8 {
        match self {
            MessageKind::Activation => 1,
            MessageKind::Gradient => 2,
            MessageKind::WeightSnapshot => 3,
            MessageKind::SnapshotAck => 4,
            MessageKind::Probe => 16,
            MessageKind::ProbeAck => 17,
            MessageKind::StateSync => 18,
            MessageKind::Repartition => 19,
            MessageKind::WeightFetch => 20,
            MessageKind::WeightFetchAck => 21,
            MessageKind::FetchDone => 22,
            MessageKind::Commit => 23,
            MessageKind::BandwidthProbe => 32,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self, WireError> {
        Self::ALL
            .iter()
            .copied()
            .find(|k| k.tag() == tag)
            .ok_or(WireError::UnknownKind(tag))
    }

    pub fn name(self) -> &'static str {
        match self {
            MessageKind::Activation => "Activation",
            MessageKind::Gradient => "Gradient",
            MessageKind::WeightSnapshot => "WeightSnapshot",
            MessageKind::SnapshotAck => "SnapshotAck",
            MessageKind::Probe => "Probe",
            MessageKind::ProbeAck => "ProbeAck",
            MessageKind::StateSync => "StateSync",
            MessageKind::Repartition => "Repartition",
            MessageKind::WeightFetch => "WeightFetch",
            MessageKind::WeightFetchAck => "WeightFetchAck",
            MessageKind::FetchDone => "FetchDone",
            MessageKind::Commit => "Commit",
            MessageKind::BandwidthProbe => "BandwidthProbe",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|k| k.name().eq_ignore_ascii_case(name))
    }

    /// Training traffic, as opposed to control-plane messages.
    pub fn is_data(self) -> bool {
        matches!(self, MessageKind::Activation | MessageKind::Gradient)
    }
}

/// How a node answers a probe.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeCondition {
    /// Initialized and holding its stage.
    Normal,
    /// Restarted with empty memory.
    Fresh,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Activation {
        generation: u64,
        meta: BatchMeta,
        tensor: Tensor,
        labels: Vec<usize>,
    },
    Gradient {
        generation: u64,
        tensor: Tensor,
        /// Mean stage time per worker, gathered on the way back to the central node.
        reports: Vec<(WorkerId, f64)>,
    },
    WeightSnapshot(Snapshot),
    SnapshotAck {
        origin_stage: usize,
        at_batch: u64,
        kind: SnapshotKind,
    },
    Probe {
        generation: u64,
        attempt: u32,
    },
    ProbeAck {
        generation: u64,
        condition: NodeCondition,
        committed_backward_id: i64,
    },
    StateSync {
        generation: u64,
        /// Layout generation the synced stage belongs to.
        layout: u64,
        roster: Vec<WorkerId>,
        points: Vec<usize>,
        layers: usize,
        state: TrainingState,
        clock: u64,
        /// The worker restores its weights from backups instead of receiving them.
        restore: bool,
        weights: Option<WeightSet>,
    },
    Repartition {
        generation: u64,
        points: Vec<usize>,
        roster: Vec<WorkerId>,
        prev_points: Vec<usize>,
        prev_roster: Vec<WorkerId>,
        failed_index: Option<usize>,
    },
    WeightFetch {
        generation: u64,
        layers: Vec<usize>,
    },
    WeightFetchAck {
        generation: u64,
        ok: bool,
        layers: Vec<(usize, LayerParams)>,
    },
    FetchDone {
        generation: u64,
        ok: bool,
    },
    Commit {
        generation: u64,
        /// Layout generation in force after the commit.
        layout: u64,
        resume_from: i64,
        reset: bool,
        /// Ends a fault recovery rather than a planned re-partition.
        recovery: bool,
    },
    BandwidthProbe {
        reply: bool,
        data: Vec<u8>,
    },
}

impl Payload {
    pub fn kind(&self) -> MessageKind {
        match self {
            Payload::Activation { .. } => MessageKind::Activation,
            Payload::Gradient { .. } => MessageKind::Gradient,
            Payload::WeightSnapshot(_) => MessageKind::WeightSnapshot,
            Payload::SnapshotAck { .. } => MessageKind::SnapshotAck,
            Payload::Probe { .. } => MessageKind::Probe,
            Payload::ProbeAck { .. } => MessageKind::ProbeAck,
            Payload::StateSync { .. } => MessageKind::StateSync,
            Payload::Repartition { .. } => MessageKind::Repartition,
            Payload::WeightFetch { .. } => MessageKind::WeightFetch,
            Payload::WeightFetchAck { .. } => MessageKind::WeightFetchAck,
            Payload::FetchDone { .. } => MessageKind::FetchDone,
            Payload::Commit { .. } => MessageKind::Commit,
            Payload::BandwidthProbe { .. } => MessageKind::BandwidthProbe,
        }
    }

    /// Generation tag of data-plane and recovery messages.
    pub fn generation(&self) -> Option<u64> {
        match self {
            Payload::Activation { generation, .. }
            | Payload::Gradient { generation, .. }
            | Payload::Probe { generation, .. }
            | Payload::ProbeAck { generation, .. }
            | Payload::StateSync { generation, .. }
            | Payload::Repartition { generation, .. }
            | Payload::WeightFetch { generation, .. }
            | Payload::WeightFetchAck { generation, .. }
            | Payload::FetchDone { generation, .. }
            | Payload::Commit { generation, .. } => Some(*generation),
            _ => None,
        }
    }

    fn encode(&self, w: &mut Writer) {
        match self {
            Payload::Activation {
                generation,
                meta,
                tensor,
                labels,
            } => {
                w.u64(*generation).u64(meta.pinned);
                w.u32(meta.versions.len() as u32);
                for v in &meta.versions {
                    w.u64(*v);
                }
                w.usizes(labels).tensor(tensor);
            }
            Payload::Gradient {
                generation,
                tensor,
                reports,
            } => {
                w.u64(*generation).u32(reports.len() as u32);
                for (id, t) in reports {
                    w.u32(*id).f64(*t);
                }
                w.tensor(tensor);
            }
            Payload::WeightSnapshot(s) => s.encode(w),
            Payload::SnapshotAck {
                origin_stage,
                at_batch,
                kind,
            } => {
                w.u32(*origin_stage as u32).u64(*at_batch).u8(*kind as u8);
            }
            Payload::Probe {
                generation,
                attempt,
            } => {
                w.u64(*generation).u32(*attempt);
            }
            Payload::ProbeAck {
                generation,
                condition,
                committed_backward_id,
            } => {
                w.u64(*generation)
                    .u8(matches!(condition, NodeCondition::Fresh) as u8)
                    .i64(*committed_backward_id);
            }
            Payload::StateSync {
                generation,
                layout,
                roster,
                points,
                layers,
                state,
                clock,
                restore,
                weights,
            } => {
                w.u64(*generation).u64(*layout);
                ids(w, roster);
                w.usizes(points).u32(*layers as u32);
                w.i64(state.committed_forward_id)
                    .i64(state.committed_backward_id)
                    .f64(state.learning_rate)
                    .u64(state.epoch_number)
                    .i64(state.batch_number)
                    .u8(state.status.as_u8());
                w.u64(*clock).bool(*restore);
                match weights {
                    Some(ws) => w.u8(1).weight_set(ws),
                    None => w.u8(0),
                };
            }
            Payload::Repartition {
                generation,
                points,
                roster,
                prev_points,
                prev_roster,
                failed_index,
            } => {
                w.u64(*generation).usizes(points);
                ids(w, roster);
                w.usizes(prev_points);
                ids(w, prev_roster);
                w.i64(failed_index.map_or(-1, |i| i as i64));
            }
            Payload::WeightFetch { generation, layers } => {
                w.u64(*generation).usizes(layers);
            }
            Payload::WeightFetchAck {
                generation,
                ok,
                layers,
            } => {
                w.u64(*generation).bool(*ok).u32(layers.len() as u32);
                for (l, p) in layers {
                    w.u32(*l as u32).layer_params(p.as_ref());
                }
            }
            Payload::FetchDone { generation, ok } => {
                w.u64(*generation).bool(*ok);
            }
            Payload::Commit {
                generation,
                layout,
                resume_from,
                reset,
                recovery,
            } => {
                w.u64(*generation)
                    .u64(*layout)
                    .i64(*resume_from)
                    .bool(*reset)
                    .bool(*recovery);
            }
            Payload::BandwidthProbe { reply, data } => {
                w.bool(*reply).u32(data.len() as u32).bytes(data);
            }
        }
    }

    fn decode(
        kind: MessageKind,
        batch_id: Option<i64>,
        r: &mut Reader<'_>,
    ) -> Result<Payload, WireError> {
        Ok(match kind {
            MessageKind::Activation => {
                let generation = r.u64()?;
                let pinned = r.u64()?;
                let nv = r.u32()?;
                let versions = (0..nv).map(|_| r.u64()).collect::<Result<_, _>>()?;
                let labels = r.usizes()?;
                let tensor = r.tensor()?;
                let batch_id = batch_id
                    .ok_or_else(|| WireError::Malformed("activation without batch id".into()))?;
                Payload::Activation {
                    generation,
                    meta: BatchMeta {
                        batch_id,
                        pinned,
                        versions,
                    },
                    tensor,
                    labels,
                }
            }
            MessageKind::Gradient => {
                let generation = r.u64()?;
                let n = r.u32()?;
                let reports = (0..n)
                    .map(|_| Ok((r.u32()?, r.f64()?)))
                    .collect::<Result<_, WireError>>()?;
                Payload::Gradient {
                    generation,
                    reports,
                    tensor: r.tensor()?,
                }
            }
            MessageKind::WeightSnapshot => Payload::WeightSnapshot(Snapshot::decode(r)?),
            MessageKind::SnapshotAck => Payload::SnapshotAck {
                origin_stage: r.u32()? as usize,
                at_batch: r.u64()?,
                kind: snapshot_kind(r.u8()?)?,
            },
            MessageKind::Probe => Payload::Probe {
                generation: r.u64()?,
                attempt: r.u32()?,
            },
            MessageKind::ProbeAck => Payload::ProbeAck {
                generation: r.u64()?,
                condition: if r.bool()? {
                    NodeCondition::Fresh
                } else {
                    NodeCondition::Normal
                },
                committed_backward_id: r.i64()?,
            },
            MessageKind::StateSync => {
                let generation = r.u64()?;
                let layout = r.u64()?;
                let roster = read_ids(r)?;
                let points = r.usizes()?;
                let layers = r.u32()? as usize;
                let state = TrainingState {
                    committed_forward_id: r.i64()?,
                    committed_backward_id: r.i64()?,
                    learning_rate: r.f64()?,
                    epoch_number: r.u64()?,
                    batch_number: r.i64()?,
                    status: Status::from_u8(r.u8()?)
                        .ok_or_else(|| WireError::Malformed("status".into()))?,
                };
                let clock = r.u64()?;
                let restore = r.bool()?;
                let weights = match r.u8()? {
                    0 => None,
                    1 => Some(r.weight_set()?),
                    x => return Err(WireError::Malformed(format!("weights tag {x}"))),
                };
                Payload::StateSync {
                    generation,
                    layout,
                    roster,
                    points,
                    layers,
                    state,
                    clock,
                    restore,
                    weights,
                }
            }
            MessageKind::Repartition => {
                let generation = r.u64()?;
                let points = r.usizes()?;
                let roster = read_ids(r)?;
                let prev_points = r.usizes()?;
                let prev_roster = read_ids(r)?;
                let f = r.i64()?;
                Payload::Repartition {
                    generation,
                    points,
                    roster,
                    prev_points,
                    prev_roster,
                    failed_index: (f >= 0).then_some(f as usize),
                }
            }
            MessageKind::WeightFetch => Payload::WeightFetch {
                generation: r.u64()?,
                layers: r.usizes()?,
            },
            MessageKind::WeightFetchAck => {
                let generation = r.u64()?;
                let ok = r.bool()?;
                let n = r.u32()?;
                let layers = (0..n)
                    .map(|_| Ok((r.u32()? as usize, r.layer_params()?)))
                    .collect::<Result<_, WireError>>()?;
                Payload::WeightFetchAck {
                    generation,
                    ok,
                    layers,
                }
            }
            MessageKind::FetchDone => Payload::FetchDone {
                generation: r.u64()?,
                ok: r.bool()?,
            },
            MessageKind::Commit => Payload::Commit {
                generation: r.u64()?,
                layout: r.u64()?,
                resume_from: r.i64()?,
                reset: r.bool()?,
                recovery: r.bool()?,
            },
            MessageKind::BandwidthProbe => {
                let reply = r.bool()?;
                let n = r.u32()? as usize;
                let mut data = Vec::with_capacity(n);
                for _ in 0..n {
                    data.push(r.u8()?);
                }
                Payload::BandwidthProbe { reply, data }
            }
        })
    }
}

fn ids(w: &mut Writer, ids: &[WorkerId]) {
    w.u32(ids.len() as u32);
    for id in ids {
        w.u32(*id);
    }
}

fn read_ids(r: &mut Reader<'_>) -> Result<Vec<WorkerId>, WireError> {
    let n = r.u32()?;
    (0..n).map(|_| r.u32()).collect()
}

fn snapshot_kind(tag: u8) -> Result<SnapshotKind, WireError> {
    match tag {
        0 => Ok(SnapshotKind::Chain),
        1 => Ok(SnapshotKind::Global),
        x => Err(WireError::Malformed(format!("snapshot kind {x}"))),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub sender: WorkerId,
    pub receiver: WorkerId,
    pub batch_id: Option<i64>,
    pub payload: Payload,
}

impl Message {
    pub fn new(
        sender: WorkerId,
        receiver: WorkerId,
        batch_id: Option<i64>,
        payload: Payload,
    ) -> Self {
        Message {
            sender,
            receiver,
            batch_id,
            payload,
        }
    }

    pub fn kind(&self) -> MessageKind {
        self.payload.kind()
    }

    /// The complete frame, length prefix included.
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.u32(0)
            .u8(self.kind().tag())
            .u32(self.sender)
            .u32(self.receiver)
            .i64(self.batch_id.unwrap_or(-1));
        self.payload.encode(&mut w);
        let mut bytes = w.finish();
        let len = (bytes.len() - 4) as u32;
        bytes[..4].copy_from_slice(&len.to_be_bytes());
        bytes
    }

    /// Decodes one complete frame; trailing bytes are an error.
    pub fn decode(frame: &[u8]) -> Result<Message, WireError> {
        let mut r = Reader::new(frame);
        let len = r.u32()? as usize;
        if r.remaining() != len {
            return Err(if r.remaining() < len {
                WireError::Truncated {
                    needed: len,
                    available: r.remaining(),
                }
            } else {
                WireError::Trailing(r.remaining() - len)
            });
        }
        Self::decode_body(&mut r)
    }

    /// Decodes the part of a frame after the length prefix.
    pub fn decode_body(r: &mut Reader<'_>) -> Result<Message, WireError> {
        let kind = MessageKind::from_tag(r.u8()?)?;
        let sender = r.u32()?;
        let receiver = r.u32()?;
        let b = r.i64()?;
        let batch_id = (b >= 0).then_some(b);
        let payload = Payload::decode(kind, batch_id, r)?;
        Ok(Message {
            sender,
            receiver,
            batch_id,
            payload,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::LayerStack;
    use std::sync::Arc;

    fn samples() -> Vec<Message> {
        let stack = LayerStack::desk(3, [4, 4], 2).unwrap();
        let ws = stack.init_weights(9);
        let t = Tensor::from_fn(vec![2, 3], |i| i as f64 - 2.5);
        vec![
            Message::new(
                0,
                1,
                Some(7),
                Payload::Activation {
                    generation: 2,
                    meta: BatchMeta {
                        batch_id: 7,
                        pinned: 5,
                        versions: vec![5],
                    },
                    tensor: t.clone(),
                    labels: vec![1, 0],
                },
            ),
            Message::new(
                2,
                1,
                Some(7),
                Payload::Gradient {
                    generation: 2,
                    tensor: t,
                    reports: vec![(2, 0.25)],
                },
            ),
            Message::new(
                1,
                2,
                None,
                Payload::WeightSnapshot(Snapshot {
                    origin_stage: 1,
                    at_batch: 50,
                    kind: SnapshotKind::Chain,
                    weights: Arc::new(ws.slice(2, 3).unwrap()),
                }),
            ),
            Message::new(
                2,
                1,
                None,
                Payload::SnapshotAck {
                    origin_stage: 1,
                    at_batch: 50,
                    kind: SnapshotKind::Chain,
                },
            ),
            Message::new(
                0,
                3,
                None,
                Payload::Probe {
                    generation: 4,
                    attempt: 1,
                },
            ),
            Message::new(
                3,
                0,
                None,
                Payload::ProbeAck {
                    generation: 4,
                    condition: NodeCondition::Fresh,
                    committed_backward_id: -1,
                },
            ),
            Message::new(
                0,
                2,
                None,
                Payload::StateSync {
                    generation: 1,
                    layout: 1,
                    roster: vec![0, 2, 5],
                    points: vec![1, 3],
                    layers: 6,
                    state: TrainingState::new(0.05),
                    clock: 0,
                    restore: false,
                    weights: Some(ws.slice(2, 3).unwrap()),
                },
            ),
            Message::new(
                0,
                2,
                None,
                Payload::Repartition {
                    generation: 3,
                    points: vec![2],
                    roster: vec![0, 2],
                    prev_points: vec![1, 3],
                    prev_roster: vec![0, 1, 2],
                    failed_index: Some(1),
                },
            ),
            Message::new(
                2,
                0,
                None,
                Payload::WeightFetch {
                    generation: 3,
                    layers: vec![0, 1],
                },
            ),
            Message::new(
                0,
                2,
                None,
                Payload::WeightFetchAck {
                    generation: 3,
                    ok: true,
                    layers: vec![(0, ws.params()[0].clone()), (1, None)],
                },
            ),
            Message::new(
                2,
                0,
                None,
                Payload::FetchDone {
                    generation: 3,
                    ok: false,
                },
            ),
            Message::new(
                0,
                1,
                None,
                Payload::Commit {
                    generation: 3,
                    layout: 2,
                    resume_from: 25,
                    reset: true,
                    recovery: true,
                },
            ),
            Message::new(
                0,
                1,
                None,
                Payload::BandwidthProbe {
                    reply: false,
                    data: vec![7; 10],
                },
            ),
        ]
    }

    #[test]
    fn every_kind_round_trips() {
        let msgs = samples();
        assert_eq!(msgs.len(), MessageKind::ALL.len());
        for m in msgs {
            let bytes = m.encode();
            assert_eq!(
                u32::from_be_bytes(bytes[..4].try_into().unwrap()) as usize,
                bytes.len() - 4
            );
            assert_eq!(bytes[4], m.kind().tag());
            assert_eq!(Message::decode(&bytes).unwrap(), m);
            // re-encoding is byte identical
            assert_eq!(Message::decode(&bytes).unwrap().encode(), bytes);
            assert!(Message::decode(&bytes[..bytes.len() - 1]).is_err());
        }
    }

    #[test]
    fn unknown_kind_rejected() {
        let mut bytes = samples()[4].encode();
        bytes[4] = 99;
        assert_eq!(Message::decode(&bytes), Err(WireError::UnknownKind(99)));
    }

    #[test]
    fn header_fields_in_big_endian() {
        let bytes = samples()[0].encode();
        assert_eq!(&bytes[5..9], &0u32.to_be_bytes());
        assert_eq!(&bytes[9..13], &1u32.to_be_bytes());
        assert_eq!(&bytes[13..21], &7i64.to_be_bytes());
        let probe = samples()[4].encode();
        assert_eq!(&probe[13..21], &(-1i64).to_be_bytes());
    }
}
