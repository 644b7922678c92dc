//! Map distribution protocol and a deterministic simulated network.
//!
//! Frame layout (little-endian):
//!
//! ```text
//! "UBSM" | version 0x01 | kind u8 | seq u32 | sender u16 | payload_len u32 | payload
//! ```
//!
//! Map payloads (MAP_UPDATE and SENSOR_UPLOAD) are
//! `revision u32 | width u16 | height u16 | one state byte per cell, row-major`.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::fusion::{CellState, GridMap};
use crate::sensim::stream_rng;

pub const MAGIC: &[u8; 4] = b"UBSM";
pub const VERSION: u8 = 0x01;
pub const HEADER_LEN: usize = 16;
pub const MAX_PAYLOAD: usize = 1 << 24;
/// Sender id used by the map server.
pub const SERVER_ID: u16 = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[repr(u8)]
pub enum MessageKind {
    Hello = 1,
    MapUpdate = 2,
    RobotPose = 3,
    SensorUpload = 4,
    Ack = 5,
}

impl MessageKind {
    pub const ALL: [MessageKind; 5] = [
        MessageKind::Hello,
        MessageKind::MapUpdate,
        MessageKind::RobotPose,
        MessageKind::SensorUpload,
        MessageKind::Ack,
    ];

    pub fn from_byte(b: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|k| *k as u8 == b)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Message {
    pub kind: MessageKind,
    pub seq: u32,
    pub sender: u16,
    pub payload: Vec<u8>,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ProtocolError {
    #[error("malformed frame at byte {offset}: {reason}")]
    Malformed { offset: usize, reason: String },
    #[error("truncated frame: need {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },
    #[error("payload of {0} bytes exceeds the limit")]
    Oversize(usize),
    #[error("{0:?} is not accepted in this direction")]
    WrongDirection(MessageKind),
}

pub fn encode(msg: &Message) -> Result<Vec<u8>, ProtocolError> {
    if msg.payload.len() > MAX_PAYLOAD {
        return Err(ProtocolError::Oversize(msg.payload.len()));
    }
    let mut out = Vec::with_capacity(HEADER_LEN + msg.payload.len());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(msg.kind as u8);
    out.extend_from_slice(&msg.seq.to_le_bytes());
    out.extend_from_slice(&msg.sender.to_le_bytes());
    out.extend_from_slice(&(msg.payload.len() as u32).to_le_bytes());
    out.extend_from_slice(&msg.payload);
    Ok(out)
}

fn malformed(offset: usize, reason: &str) -> ProtocolError {
    ProtocolError::Malformed {
        offset,
        reason: reason.to_string(),
    }
}

/// Decodes exactly one frame; trailing bytes are rejected.
pub fn decode(bytes: &[u8]) -> Result<Message, ProtocolError> {
    if bytes.len() < HEADER_LEN {
        // Check what is present before reporting truncation.
        let n = bytes.len().min(4);
        if bytes[..n] != MAGIC[..n] {
            return Err(malformed(0, "bad magic"));
        }
        return Err(ProtocolError::Truncated {
            needed: HEADER_LEN,
            available: bytes.len(),
        });
    }
    if &bytes[0..4] != MAGIC {
        return Err(malformed(0, "bad magic"));
    }
    if bytes[4] != VERSION {
        return Err(malformed(4, "unsupported version"));
    }
    let kind = MessageKind::from_byte(bytes[5]).ok_or_else(|| malformed(5, "unknown message kind"))?;
    let seq = u32::from_le_bytes(bytes[6..10].try_into().unwrap());
    let sender = u16::from_le_bytes(bytes[10..12].try_into().unwrap());
    let len = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    if len > MAX_PAYLOAD {
        return Err(malformed(12, "payload length exceeds limit"));
    }
    let needed = HEADER_LEN + len;
    if bytes.len() < needed {
        return Err(ProtocolError::Truncated {
            needed,
            available: bytes.len(),
        });
    }
    if bytes.len() > needed {
        return Err(malformed(needed, "trailing bytes after payload"));
    }
    Ok(Message {
        kind,
        seq,
        sender,
        payload: bytes[HEADER_LEN..].to_vec(),
    })
}

pub fn encode_map_payload(map: &GridMap) -> Result<Vec<u8>, ProtocolError> {
    if map.width > u16::MAX as usize || map.height > u16::MAX as usize || 8 + map.cells.len() > MAX_PAYLOAD {
        return Err(ProtocolError::Oversize(8 + map.cells.len()));
    }
    let mut out = Vec::with_capacity(8 + map.cells.len());
    out.extend_from_slice(&map.revision.to_le_bytes());
    out.extend_from_slice(&(map.width as u16).to_le_bytes());
    out.extend_from_slice(&(map.height as u16).to_le_bytes());
    out.extend(map.cells.iter().map(|c| c.as_byte()));
    Ok(out)
}

/// Decodes a map payload. The wire format carries no cell size, so the
/// receiver supplies its own.
pub fn decode_map_payload(payload: &[u8], cell_size: f64) -> Result<GridMap, ProtocolError> {
    if payload.len() < 8 {
        return Err(ProtocolError::Truncated {
            needed: 8,
            available: payload.len(),
        });
    }
    let revision = u32::from_le_bytes(payload[0..4].try_into().unwrap());
    let width = u16::from_le_bytes(payload[4..6].try_into().unwrap()) as usize;
    let height = u16::from_le_bytes(payload[6..8].try_into().unwrap()) as usize;
    let needed = 8 + width * height;
    if payload.len() < needed {
        return Err(ProtocolError::Truncated {
            needed,
            available: payload.len(),
        });
    }
    if payload.len() > needed {
        return Err(malformed(needed, "trailing bytes after map cells"));
    }
    let cells = payload[8..]
        .iter()
        .enumerate()
        .map(|(i, &b)| CellState::from_byte(b).ok_or_else(|| malformed(8 + i, "unknown cell state")))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(GridMap::from_cells(width, height, cell_size, cells, revision))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RobotPoseUpdate {
    pub robot_id: u16,
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

impl RobotPoseUpdate {
    pub const LEN: usize = 26;

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(Self::LEN);
        out.extend_from_slice(&self.robot_id.to_le_bytes());
        for v in [self.x, self.y, self.theta] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn decode(payload: &[u8]) -> Result<Self, ProtocolError> {
        if payload.len() != Self::LEN {
            return Err(malformed(payload.len().min(Self::LEN), "robot pose payload has wrong length"));
        }
        let f = |k: usize| f64::from_le_bytes(payload[2 + 8 * k..10 + 8 * k].try_into().unwrap());
        Ok(Self {
            robot_id: u16::from_le_bytes(payload[0..2].try_into().unwrap()),
            x: f(0),
            y: f(1),
            theta: f(2),
        })
    }
}

/// Acknowledgement payload: the acknowledged kind and seq.
pub fn encode_ack(kind: MessageKind, seq: u32) -> Vec<u8> {
    let mut out = vec![kind as u8];
    out.extend_from_slice(&seq.to_le_bytes());
    out
}

pub fn decode_ack(payload: &[u8]) -> Result<(MessageKind, u32), ProtocolError> {
    if payload.len() != 5 {
        return Err(malformed(payload.len().min(5), "ack payload has wrong length"));
    }
    let kind = MessageKind::from_byte(payload[0]).ok_or_else(|| malformed(0, "unknown acked kind"))?;
    Ok((kind, u32::from_le_bytes(payload[1..5].try_into().unwrap())))
}

/// Per-(sender, kind) sequence numbers, starting at 0.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SeqCounter {
    next: BTreeMap<(u16, MessageKind), u32>,
}

impl SeqCounter {
    pub fn next(&mut self, sender: u16, kind: MessageKind) -> u32 {
        let slot = self.next.entry((sender, kind)).or_insert(0);
        let seq = *slot;
        *slot = slot.wrapping_add(1);
        seq
    }

    pub fn message(&mut self, sender: u16, kind: MessageKind, payload: Vec<u8>) -> Message {
        Message {
            kind,
            seq: self.next(sender, kind),
            sender,
            payload,
        }
    }
}

/// One line of uppercase hex per frame.
pub fn capture_dump(frames: &[Vec<u8>]) -> String {
    let mut out = String::new();
    for f in frames {
        for b in f {
            out.push_str(&format!("{b:02X}"));
        }
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    pub latency_ms: f64,
    pub jitter_ms: f64,
    pub loss_probability: f64,
    pub seed: u64,
}

impl Default for NetworkParams {
    fn default() -> Self {
        Self {
            latency_ms: 0.0,
            jitter_ms: 0.0,
            loss_probability: 0.0,
            seed: 0,
        }
    }
}

impl NetworkParams {
    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..=1.0).contains(&self.loss_probability) {
            return Err(format!("loss probability {} outside [0, 1]", self.loss_probability));
        }
        if !(self.latency_ms >= 0.0 && self.latency_ms.is_finite()) {
            return Err(format!("latency {} ms must be non-negative", self.latency_ms));
        }
        if !(self.jitter_ms >= 0.0 && self.jitter_ms.is_finite()) {
            return Err(format!("jitter {} ms must be non-negative", self.jitter_ms));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Endpoint {
    Server,
    Client(u16),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct NetStats {
    pub sent: u64,
    pub delivered: u64,
    pub dropped: u64,
    /// Stale updates discarded by receivers; maintained by the caller.
    pub stale: u64,
}

#[derive(Debug, Clone, PartialEq)]
struct InFlight {
    deliver_at: f64,
    seq: u32,
    order: u64,
    dest: Endpoint,
    frame: Vec<u8>,
}

/// Discrete-event network: each send is independently lost or scheduled for
/// delivery after `latency ± jitter` (uniform, clamped at zero).
#[derive(Debug, Clone)]
pub struct SimNetwork {
    params: NetworkParams,
    rng: ChaCha8Rng,
    in_flight: Vec<InFlight>,
    order: u64,
    last_now: f64,
    pub stats: NetStats,
    /// Every frame handed to the network, in send order.
    pub capture: Vec<Vec<u8>>,
}

impl SimNetwork {
    pub fn new(params: NetworkParams) -> Result<Self, String> {
        params.validate()?;
        let rng = stream_rng(&[params.seed, 0x004e_4554]);
        Ok(Self {
            params,
            rng,
            in_flight: Vec::new(),
            order: 0,
            last_now: f64::NEG_INFINITY,
            stats: NetStats::default(),
            capture: Vec::new(),
        })
    }

    pub fn params(&self) -> &NetworkParams {
        &self.params
    }

    /// Submits a message at time `now` (seconds). Returns the scheduled
    /// delivery time, or `None` if it was lost.
    pub fn send(&mut self, now: f64, dest: Endpoint, msg: &Message) -> Result<Option<f64>, ProtocolError> {
        let frame = encode(msg)?;
        self.capture.push(frame.clone());
        self.stats.sent += 1;
        let lost_draw: f64 = self.rng.random();
        let jitter_draw: f64 = self.rng.random_range(-1.0..=1.0);
        if lost_draw < self.params.loss_probability {
            self.stats.dropped += 1;
            return Ok(None);
        }
        let latency_ms = (self.params.latency_ms + jitter_draw * self.params.jitter_ms).max(0.0);
        let deliver_at = now + latency_ms / 1000.0;
        self.in_flight.push(InFlight {
            deliver_at,
            seq: msg.seq,
            order: self.order,
            dest,
            frame,
        });
        self.order += 1;
        Ok(Some(deliver_at))
    }

    /// Releases every message due by `now`, ordered by delivery time, then
    /// seq, then submission order.
    ///
    /// # Panics
    /// If `now` is earlier than a previous call.
    pub fn step(&mut self, now: f64) -> Vec<(Endpoint, Message)> {
        assert!(now >= self.last_now, "simulated clock went backwards");
        self.last_now = now;
        let (mut due, rest): (Vec<InFlight>, Vec<InFlight>) =
            self.in_flight.drain(..).partition(|m| m.deliver_at <= now);
        self.in_flight = rest;
        due.sort_by(|a, b| {
            a.deliver_at
                .total_cmp(&b.deliver_at)
                .then(a.seq.cmp(&b.seq))
                .then(a.order.cmp(&b.order))
        });
        self.stats.delivered += due.len() as u64;
        due.into_iter()
            .map(|m| (m.dest, decode(&m.frame).expect("frames are encoded by this network")))
            .collect()
    }

    pub fn in_flight(&self) -> usize {
        self.in_flight.len()
    }

    /// Delivery time of the last message still in flight.
    pub fn drain_time(&self) -> Option<f64> {
        self.in_flight.iter().map(|m| m.deliver_at).max_by(f64::total_cmp)
    }
}

/// What a client did with a message.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClientEvent {
    MapApplied,
    Stale,
    PoseUpdated,
    Acked(u32),
    Ignored,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientState {
    pub robot_id: u16,
    pub last_applied_seq: Option<u32>,
    pub map: GridMap,
    pub stale: u64,
    /// Last pose the server reported for this robot.
    pub pose: Option<RobotPoseUpdate>,
    /// Upload seqs the server has acknowledged.
    pub acked: BTreeSet<u32>,
}

impl ClientState {
    pub fn new(robot_id: u16, width: usize, height: usize, cell_size: f64) -> Self {
        Self {
            robot_id,
            last_applied_seq: None,
            map: GridMap::new(width, height, cell_size),
            stale: 0,
            pose: None,
            acked: BTreeSet::new(),
        }
    }

    /// Applies a server message. MAP_UPDATEs are applied only if newer than
    /// the last applied one; older or repeated ones are counted as stale.
    pub fn apply(&mut self, msg: &Message) -> Result<ClientEvent, ProtocolError> {
        match msg.kind {
            MessageKind::SensorUpload => Err(ProtocolError::WrongDirection(msg.kind)),
            MessageKind::MapUpdate => {
                if self.last_applied_seq.is_some_and(|last| msg.seq <= last) {
                    self.stale += 1;
                    return Ok(ClientEvent::Stale);
                }
                let map = decode_map_payload(&msg.payload, self.map.cell_size)?;
                if map.width != self.map.width || map.height != self.map.height {
                    return Err(malformed(4, "map dimensions differ from the client's"));
                }
                self.map = map;
                self.last_applied_seq = Some(msg.seq);
                Ok(ClientEvent::MapApplied)
            }
            MessageKind::RobotPose => {
                let pose = RobotPoseUpdate::decode(&msg.payload)?;
                if pose.robot_id != self.robot_id {
                    return Ok(ClientEvent::Ignored);
                }
                self.pose = Some(pose);
                Ok(ClientEvent::PoseUpdated)
            }
            MessageKind::Ack => {
                let (kind, seq) = decode_ack(&msg.payload)?;
                if kind == MessageKind::SensorUpload {
                    self.acked.insert(seq);
                }
                Ok(ClientEvent::Acked(seq))
            }
            MessageKind::Hello => Ok(ClientEvent::Ignored),
        }
    }
}

/// Functional form of [`ClientState::apply`].
pub fn client_apply(cs: &ClientState, msg: &Message) -> Result<(ClientState, ClientEvent), ProtocolError> {
    let mut out = cs.clone();
    let ev = out.apply(msg)?;
    Ok((out, ev))
}

#[derive(Debug, Clone, PartialEq)]
pub struct IngestOutcome {
    /// Whether the upload changed the global map.
    pub merged: bool,
    pub duplicate: bool,
    /// Acknowledgement to send back, if any.
    pub ack: Option<Message>,
}

/// Server side of the protocol: owns the global map, merges uploads and
/// produces broadcasts.
#[derive(Debug, Clone)]
pub struct MapServer {
    pub map: GridMap,
    pub weight_fixed: u32,
    pub weight_robot: u32,
    pub seqs: SeqCounter,
    pub clients: BTreeSet<u16>,
    /// Uploads already handled, by `(sender, seq)`.
    pub seen_uploads: BTreeSet<(u16, u32)>,
    pub faults: Vec<String>,
}

impl MapServer {
    pub fn new(map: GridMap) -> Self {
        Self {
            map,
            weight_fixed: 2,
            weight_robot: 1,
            seqs: SeqCounter::default(),
            clients: BTreeSet::new(),
            seen_uploads: BTreeSet::new(),
            faults: Vec::new(),
        }
    }

    /// Handles a client message. HELLO registers the client; SENSOR_UPLOAD is
    /// merged once per `(sender, seq)` and always acknowledged unless its
    /// fragment is malformed, in which case it is dropped and a fault recorded.
    pub fn ingest(&mut self, msg: &Message) -> Result<IngestOutcome, ProtocolError> {
        match msg.kind {
            MessageKind::Hello => {
                self.clients.insert(msg.sender);
                Ok(IngestOutcome {
                    merged: false,
                    duplicate: false,
                    ack: None,
                })
            }
            MessageKind::SensorUpload => {
                let ack = || {
                    Some(Message {
                        kind: MessageKind::Ack,
                        seq: 0,
                        sender: SERVER_ID,
                        payload: encode_ack(MessageKind::SensorUpload, msg.seq),
                    })
                };
                if self.seen_uploads.contains(&(msg.sender, msg.seq)) {
                    return Ok(IngestOutcome {
                        merged: false,
                        duplicate: true,
                        ack: self.stamp(ack()),
                    });
                }
                let fragment = match decode_map_payload(&msg.payload, self.map.cell_size) {
                    Ok(f) => f,
                    Err(e) => {
                        self.faults.push(format!("upload {}:{} dropped: {e}", msg.sender, msg.seq));
                        return Ok(IngestOutcome {
                            merged: false,
                            duplicate: false,
                            ack: None,
                        });
                    }
                };
                let merged = if fragment.cells.is_empty() {
                    false
                } else {
                    match self.map.merge_robot_map(&fragment, self.weight_fixed, self.weight_robot) {
                        Ok(changed) => changed,
                        Err(e) => {
                            self.faults.push(format!("upload {}:{} dropped: {e}", msg.sender, msg.seq));
                            return Ok(IngestOutcome {
                                merged: false,
                                duplicate: false,
                                ack: None,
                            });
                        }
                    }
                };
                self.seen_uploads.insert((msg.sender, msg.seq));
                Ok(IngestOutcome {
                    merged,
                    duplicate: false,
                    ack: self.stamp(ack()),
                })
            }
            other => Err(ProtocolError::WrongDirection(other)),
        }
    }

    fn stamp(&mut self, msg: Option<Message>) -> Option<Message> {
        msg.map(|mut m| {
            m.seq = self.seqs.next(SERVER_ID, m.kind);
            m
        })
    }

    /// Full-map MAP_UPDATE for the current revision.
    pub fn broadcast(&mut self) -> Result<Message, ProtocolError> {
        let payload = encode_map_payload(&self.map)?;
        Ok(self.seqs.message(SERVER_ID, MessageKind::MapUpdate, payload))
    }

    pub fn pose_message(&mut self, pose: RobotPoseUpdate) -> Message {
        self.seqs.message(SERVER_ID, MessageKind::RobotPose, pose.encode())
    }
}

/// Functional form of [`MapServer::ingest`].
pub fn server_ingest(server: &MapServer, upload: &Message) -> Result<(MapServer, IngestOutcome), ProtocolError> {
    let mut out = server.clone();
    let outcome = out.ingest(upload)?;
    Ok((out, outcome))
}
