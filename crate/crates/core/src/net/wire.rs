//! Frame and message codecs. All integers are little-endian.
//!
//! `frame = len (u32) | version (u8) | type (u8) | payload`, where `len`
//! counts the version, type and payload bytes.

use std::io::{Read, Write};

use crate::dpf::DpfKey;
use crate::group::{GroupElement, SchnorrProof, ELEMENT_LEN, SCHNORR_PROOF_LEN};
use crate::pir::{DbLayout, PirAnswer, PirQuery, Shard, SHARD_HEADER_LEN};
use crate::psica::{BatchProofBundle, DayInfo, SessionId};
use crate::serverdb::{DayStore, EncryptedSeed, ENCRYPTED_SEED_LEN};

pub const WIRE_VERSION: u8 = 1;
pub const FRAME_HEADER_LEN: usize = 6;
pub const MAX_FRAME_LEN: usize = 256 << 20;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum WireError {
    #[error("truncated at byte {offset}: need {need} more")]
    Truncated { offset: usize, need: usize },
    #[error("unsupported wire version {got}")]
    Version { got: u8 },
    #[error("unknown message type {got}")]
    UnknownType { got: u8 },
    #[error("frame of {len} bytes exceeds limit")]
    TooLarge { len: usize },
    #[error("invalid field at byte {offset}: {reason}")]
    Invalid { offset: usize, reason: String },
    #[error("{extra} trailing bytes after message")]
    Trailing { extra: usize },
    #[error("io: {0}")]
    Io(String),
}

impl From<std::io::Error> for WireError {
    fn from(e: std::io::Error) -> Self {
        WireError::Io(e.to_string())
    }
}

/// Message type codes.
pub mod msg_type {
    pub const CLIENT_BLIND: u8 = 1;
    pub const SERVER_TRANSFORM: u8 = 2;
    pub const PIR_QUERY_BATCH: u8 = 3;
    pub const PIR_ANSWER_BATCH: u8 = 4;
    pub const DIAGNOSIS_UPLOAD: u8 = 5;
    pub const DB_SYNC: u8 = 6;
    pub const ACK: u8 = 7;
    pub const ERROR: u8 = 8;
    pub const AUTH: u8 = 9;
    pub const DAY_INFO_REQUEST: u8 = 10;
    pub const DAY_INFO: u8 = 11;
    pub const DB_INSTALLED: u8 = 12;
    pub const DAYS_REQUEST: u8 = 13;
    pub const DAYS: u8 = 14;
}

/// Error codes carried in an `Error` message.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u16)]
pub enum ErrorCode {
    Protocol = 1,
    Policy = 2,
    RateLimited = 3,
    UnknownDay = 4,
    BadBatchProof = 5,
    Unsupported = 6,
    Internal = 7,
    AuthRequired = 8,
}

impl ErrorCode {
    fn from_u16(v: u16) -> Option<Self> {
        use ErrorCode::*;
        Some(match v {
            1 => Protocol,
            2 => Policy,
            3 => RateLimited,
            4 => UnknownDay,
            5 => BadBatchProof,
            6 => Unsupported,
            7 => Internal,
            8 => AuthRequired,
            _ => return None,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Message {
    /// M1
    ClientBlind {
        session: SessionId,
        day: u32,
        elements: Vec<GroupElement>,
        proof: Option<Box<BatchProofBundle>>,
    },
    /// M2
    ServerTransform {
        session: SessionId,
        elements: Vec<GroupElement>,
    },
    /// M3
    PirQueryBatch {
        session: SessionId,
        day: u32,
        queries: Vec<PirQuery>,
    },
    /// M4
    PirAnswerBatch {
        session: SessionId,
        answers: Vec<PirAnswer>,
    },
    /// M5
    DiagnosisUpload {
        batch_id: [u8; 16],
        seeds: Vec<EncryptedSeed>,
    },
    /// M6
    DbSync(Box<DayStore>),
    Ack,
    Error {
        code: ErrorCode,
        message: String,
    },
    Auth {
        credential: [u8; 16],
    },
    DayInfoRequest {
        day: u32,
    },
    DayInfo(DayInfo),
    DbInstalled {
        digest: [u8; 32],
    },
    DaysRequest,
    Days(Vec<u32>),
}

impl Message {
    pub fn type_code(&self) -> u8 {
        use msg_type::*;
        match self {
            Message::ClientBlind { .. } => CLIENT_BLIND,
            Message::ServerTransform { .. } => SERVER_TRANSFORM,
            Message::PirQueryBatch { .. } => PIR_QUERY_BATCH,
            Message::PirAnswerBatch { .. } => PIR_ANSWER_BATCH,
            Message::DiagnosisUpload { .. } => DIAGNOSIS_UPLOAD,
            Message::DbSync(_) => DB_SYNC,
            Message::Ack => ACK,
            Message::Error { .. } => ERROR,
            Message::Auth { .. } => AUTH,
            Message::DayInfoRequest { .. } => DAY_INFO_REQUEST,
            Message::DayInfo(_) => DAY_INFO,
            Message::DbInstalled { .. } => DB_INSTALLED,
            Message::DaysRequest => DAYS_REQUEST,
            Message::Days(_) => DAYS,
        }
    }

    /// Short name used in transcripts and logs.
    pub fn name(&self) -> &'static str {
        match self.type_code() {
            1 => "M1",
            2 => "M2",
            3 => "M3",
            4 => "M4",
            5 => "M5",
            6 => "M6",
            7 => "Ack",
            8 => "Error",
            9 => "Auth",
            10 => "DayInfoRequest",
            11 => "DayInfo",
            12 => "DbInstalled",
            13 => "DaysRequest",
            _ => "Days",
        }
    }

    pub fn error(code: ErrorCode, message: impl Into<String>) -> Self {
        Message::Error { code, message: message.into() }
    }

    /// Full frame bytes, header included.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = vec![0u8; 4];
        out.push(WIRE_VERSION);
        out.push(self.type_code());
        self.encode_payload(&mut out);
        let len = (out.len() - 4) as u32;
        out[..4].copy_from_slice(&len.to_le_bytes());
        out
    }

    fn encode_payload(&self, out: &mut Vec<u8>) {
        match self {
            Message::ClientBlind { session, day, elements, proof } => {
                out.extend_from_slice(session);
                out.extend_from_slice(&day.to_le_bytes());
                out.extend_from_slice(&(elements.len() as u32).to_le_bytes());
                out.extend_from_slice(&(ELEMENT_LEN as u16).to_le_bytes());
                for e in elements {
                    out.extend_from_slice(&e.to_bytes());
                }
                // Optional trailing proof: count aux bases, then the Schnorr proof.
                if let Some(p) = proof {
                    for a in &p.aux_bases {
                        out.extend_from_slice(&a.to_bytes());
                    }
                    out.extend_from_slice(&p.proof.to_bytes());
                }
            }
            Message::ServerTransform { session, elements } => {
                out.extend_from_slice(session);
                out.extend_from_slice(&(elements.len() as u32).to_le_bytes());
                for e in elements {
                    out.extend_from_slice(&e.to_bytes());
                }
            }
            Message::PirQueryBatch { session, day, queries } => {
                out.extend_from_slice(session);
                out.extend_from_slice(&day.to_le_bytes());
                out.extend_from_slice(&(queries.len() as u32).to_le_bytes());
                for q in queries {
                    out.extend_from_slice(&q.shard_id.to_le_bytes());
                    let k = q.key.to_bytes();
                    out.extend_from_slice(&(k.len() as u32).to_le_bytes());
                    out.extend_from_slice(&k);
                }
            }
            Message::PirAnswerBatch { session, answers } => {
                out.extend_from_slice(session);
                out.extend_from_slice(&(answers.len() as u32).to_le_bytes());
                let alen = answers.first().map_or(0, |a| a.0.len());
                debug_assert!(answers.iter().all(|a| a.0.len() == alen));
                out.extend_from_slice(&(alen as u32).to_le_bytes());
                for a in answers {
                    out.extend_from_slice(&a.0);
                }
            }
            Message::Ack | Message::DaysRequest => {}
            Message::Error { code, message } => {
                out.extend_from_slice(&(*code as u16).to_le_bytes());
                let m = &message.as_bytes()[..message.len().min(u16::MAX as usize)];
                out.extend_from_slice(&(m.len() as u16).to_le_bytes());
                out.extend_from_slice(m);
            }
            Message::Auth { credential } => out.extend_from_slice(credential),
            Message::DayInfoRequest { day } => out.extend_from_slice(&day.to_le_bytes()),
            Message::DayInfo(info) => encode_day_info(info, out),
            Message::DiagnosisUpload { batch_id, seeds } => {
                out.extend_from_slice(batch_id);
                out.extend_from_slice(&(seeds.len() as u32).to_le_bytes());
                out.extend_from_slice(&(ENCRYPTED_SEED_LEN as u16).to_le_bytes());
                for s in seeds {
                    out.extend_from_slice(&s.0);
                }
            }
            Message::DbSync(store) => {
                out.extend_from_slice(&store.day.to_le_bytes());
                out.extend_from_slice(&store.epoch_id.to_le_bytes());
                encode_layout(&store.layout, out);
                out.extend_from_slice(&store.token_count.to_le_bytes());
                out.extend_from_slice(&(store.shards.len() as u32).to_le_bytes());
                let shard_len = (SHARD_HEADER_LEN + store.layout.shard_payload_len()) as u64;
                out.extend_from_slice(&shard_len.to_le_bytes());
                for s in &store.shards {
                    out.extend_from_slice(&s.digest());
                }
                for s in &store.shards {
                    out.extend_from_slice(&s.to_bytes());
                }
            }
            Message::DbInstalled { digest } => out.extend_from_slice(digest),
            Message::Days(days) => {
                out.extend_from_slice(&(days.len() as u32).to_le_bytes());
                for d in days {
                    out.extend_from_slice(&d.to_le_bytes());
                }
            }
        }
    }

    /// Decode one full frame (header included); the buffer must hold exactly
    /// one frame.
    pub fn decode(frame: &[u8]) -> Result<Self, WireError> {
        let mut r = Reader { buf: frame, pos: 0 };
        let len = r.u32()? as usize;
        if len > MAX_FRAME_LEN {
            return Err(WireError::TooLarge { len });
        }
        if len < 2 {
            return Err(WireError::Invalid { offset: 0, reason: "frame length below header size".into() });
        }
        if frame.len() - 4 < len {
            return Err(WireError::Truncated { offset: frame.len(), need: len - (frame.len() - 4) });
        }
        if frame.len() - 4 > len {
            return Err(WireError::Trailing { extra: frame.len() - 4 - len });
        }
        let version = r.u8()?;
        if version != WIRE_VERSION {
            return Err(WireError::Version { got: version });
        }
        let ty = r.u8()?;
        let m = decode_payload(ty, &mut r)?;
        if r.pos != frame.len() {
            return Err(WireError::Trailing { extra: frame.len() - r.pos });
        }
        Ok(m)
    }

    /// Write the frame to a stream; returns the number of bytes written.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<usize, WireError> {
        let b = self.encode();
        w.write_all(&b)?;
        w.flush()?;
        Ok(b.len())
    }

    /// Read one frame from a stream. Returns the message and the raw bytes.
    /// `Ok(None)` on clean end of stream before a frame starts.
    pub fn read_from<R: Read>(r: &mut R) -> Result<Option<(Self, Vec<u8>)>, WireError> {
        let mut hdr = [0u8; 4];
        match r.read_exact(&mut hdr) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(None),
            Err(e) => return Err(e.into()),
        }
        let len = u32::from_le_bytes(hdr) as usize;
        if len > MAX_FRAME_LEN {
            return Err(WireError::TooLarge { len });
        }
        let mut buf = vec![0u8; 4 + len];
        buf[..4].copy_from_slice(&hdr);
        r.read_exact(&mut buf[4..]).map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => WireError::Truncated { offset: 4, need: len },
            _ => e.into(),
        })?;
        let m = Message::decode(&buf)?;
        Ok(Some((m, buf)))
    }
}

fn encode_layout(l: &DbLayout, out: &mut Vec<u8>) {
    out.extend_from_slice(&l.token_bits.to_le_bytes());
    out.extend_from_slice(&[l.shard_bits, l.bucket_bits, l.slots]);
}

fn encode_day_info(info: &DayInfo, out: &mut Vec<u8>) {
    out.extend_from_slice(&info.day.to_le_bytes());
    out.extend_from_slice(&info.epoch_id.to_le_bytes());
    encode_layout(&info.layout, out);
    out.extend_from_slice(&info.token_count.to_le_bytes());
    out.extend_from_slice(&info.digest);
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        if self.buf.len() - self.pos < n {
            return Err(WireError::Truncated { offset: self.pos, need: n - (self.buf.len() - self.pos) });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn u8(&mut self) -> Result<u8, WireError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, WireError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, WireError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, WireError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], WireError> {
        Ok(self.take(N)?.try_into().unwrap())
    }

    fn invalid(&self, offset: usize, reason: impl Into<String>) -> WireError {
        WireError::Invalid { offset, reason: reason.into() }
    }

    /// A count of items each at least `min_item` bytes; rejects counts the
    /// remaining buffer cannot hold, before anything is allocated.
    fn count(&mut self, min_item: usize) -> Result<usize, WireError> {
        let at = self.pos;
        let n = self.u32()? as usize;
        if n.saturating_mul(min_item) > self.remaining() {
            return Err(self.invalid(at, format!("count {n} exceeds remaining {} bytes", self.remaining())));
        }
        Ok(n)
    }

    fn element(&mut self) -> Result<GroupElement, WireError> {
        let at = self.pos;
        let b = self.take(ELEMENT_LEN)?;
        GroupElement::from_bytes(b).map_err(|e| self.invalid(at, e.to_string()))
    }

    fn elements(&mut self, n: usize) -> Result<Vec<GroupElement>, WireError> {
        (0..n).map(|_| self.element()).collect()
    }

    fn layout(&mut self) -> Result<DbLayout, WireError> {
        let at = self.pos;
        let l =
            DbLayout { token_bits: self.u16()?, shard_bits: self.u8()?, bucket_bits: self.u8()?, slots: self.u8()? };
        l.validate().map_err(|e| self.invalid(at, e.to_string()))?;
        Ok(l)
    }
}

fn decode_payload(ty: u8, r: &mut Reader<'_>) -> Result<Message, WireError> {
    use msg_type::*;
    Ok(match ty {
        CLIENT_BLIND => {
            let session = r.array()?;
            let day = r.u32()?;
            let count_at = r.pos;
            let n = r.u32()? as usize;
            let elen_at = r.pos;
            let elen = r.u16()? as usize;
            if elen != ELEMENT_LEN {
                return Err(r.invalid(elen_at, format!("element length {elen}")));
            }
            if n.saturating_mul(ELEMENT_LEN) > r.remaining() {
                return Err(r.invalid(count_at, format!("count {n} exceeds remaining {} bytes", r.remaining())));
            }
            let elements = r.elements(n)?;
            let proof = if r.remaining() == 0 {
                None
            } else {
                let at = r.pos;
                if r.remaining() != n * ELEMENT_LEN + SCHNORR_PROOF_LEN {
                    return Err(r.invalid(at, format!("{} trailing bytes do not form a batch proof", r.remaining())));
                }
                let aux_bases = r.elements(n)?;
                let at = r.pos;
                let proof = SchnorrProof::from_bytes(r.take(SCHNORR_PROOF_LEN)?)
                    .ok_or_else(|| r.invalid(at, "malformed proof"))?;
                Some(Box::new(BatchProofBundle { aux_bases, proof }))
            };
            Message::ClientBlind { session, day, elements, proof }
        }
        SERVER_TRANSFORM => {
            let session = r.array()?;
            let n = r.count(ELEMENT_LEN)?;
            Message::ServerTransform { session, elements: r.elements(n)? }
        }
        PIR_QUERY_BATCH => {
            let session = r.array()?;
            let day = r.u32()?;
            let n = r.count(6)?;
            let mut queries = Vec::with_capacity(n);
            for _ in 0..n {
                let shard_id = r.u16()?;
                let len_at = r.pos;
                let klen = r.u32()? as usize;
                if klen > r.remaining() {
                    return Err(r.invalid(len_at, format!("key length {klen}")));
                }
                let at = r.pos;
                let key = DpfKey::from_bytes(r.take(klen)?).map_err(|e| r.invalid(at, e.to_string()))?;
                queries.push(PirQuery { shard_id, key });
            }
            Message::PirQueryBatch { session, day, queries }
        }
        PIR_ANSWER_BATCH => {
            let session = r.array()?;
            let n = r.count(0)?;
            let len_at = r.pos;
            let alen = r.u32()? as usize;
            // Zero-length answers would let a tiny frame claim billions of
            // them; an empty batch always carries length 0.
            if (alen == 0) != (n == 0) {
                return Err(r.invalid(len_at, format!("answer length {alen} for {n} answers")));
            }
            if n.saturating_mul(alen) != r.remaining() {
                return Err(r.invalid(len_at, format!("{n} answers of {alen} bytes in {} bytes", r.remaining())));
            }
            let answers = (0..n).map(|_| r.take(alen).map(|b| PirAnswer(b.to_vec()))).collect::<Result<_, _>>()?;
            Message::PirAnswerBatch { session, answers }
        }
        ACK => Message::Ack,
        ERROR => {
            let at = r.pos;
            let code = ErrorCode::from_u16(r.u16()?).ok_or_else(|| r.invalid(at, "unknown error code"))?;
            let n = r.u16()? as usize;
            let at = r.pos;
            let message = String::from_utf8(r.take(n)?.to_vec()).map_err(|_| r.invalid(at, "message is not utf-8"))?;
            Message::Error { code, message }
        }
        AUTH => Message::Auth { credential: r.array()? },
        DAY_INFO_REQUEST => Message::DayInfoRequest { day: r.u32()? },
        DAY_INFO => {
            let day = r.u32()?;
            let epoch_id = r.u32()?;
            let layout = r.layout()?;
            let token_count = r.u64()?;
            let digest = r.array()?;
            Message::DayInfo(DayInfo { day, epoch_id, layout, token_count, digest })
        }
        DIAGNOSIS_UPLOAD => {
            let batch_id = r.array()?;
            let count_at = r.pos;
            let n = r.u32()? as usize;
            let len_at = r.pos;
            let slen = r.u16()? as usize;
            if slen != ENCRYPTED_SEED_LEN {
                return Err(r.invalid(len_at, format!("sealed seed length {slen}")));
            }
            if n.saturating_mul(slen) > r.remaining() {
                return Err(r.invalid(count_at, format!("count {n} exceeds remaining {} bytes", r.remaining())));
            }
            let seeds = (0..n).map(|_| r.array().map(EncryptedSeed)).collect::<Result<_, _>>()?;
            Message::DiagnosisUpload { batch_id, seeds }
        }
        DB_SYNC => {
            let day = r.u32()?;
            let epoch_id = r.u32()?;
            let layout = r.layout()?;
            let token_count = r.u64()?;
            let count_at = r.pos;
            let n = r.u32()? as usize;
            if n != layout.n_shards() {
                return Err(r.invalid(count_at, format!("{n} shards for layout with {}", layout.n_shards())));
            }
            let len_at = r.pos;
            let shard_len = r.u64()?;
            let want = (SHARD_HEADER_LEN + layout.shard_payload_len()) as u64;
            if shard_len != want || (n as u64).saturating_mul(32 + shard_len) != r.remaining() as u64 {
                return Err(r.invalid(len_at, format!("shard length {shard_len} does not match layout or frame")));
            }
            let digests: Vec<[u8; 32]> = (0..n).map(|_| r.array()).collect::<Result<_, _>>()?;
            let mut shards = Vec::with_capacity(n);
            for d in &digests {
                let at = r.pos;
                let s = Shard::from_bytes(r.take(shard_len as usize)?).map_err(|e| r.invalid(at, e.to_string()))?;
                if *s.layout() != layout || s.day() != day || s.shard_id() as usize != shards.len() {
                    return Err(r.invalid(at, "shard header disagrees with sync header"));
                }
                if s.digest() != *d {
                    return Err(r.invalid(at, "shard digest mismatch"));
                }
                shards.push(s);
            }
            Message::DbSync(Box::new(DayStore::new(day, epoch_id, layout, token_count, shards)))
        }
        DB_INSTALLED => Message::DbInstalled { digest: r.array()? },
        DAYS_REQUEST => Message::DaysRequest,
        DAYS => {
            let n = r.count(4)?;
            Message::Days((0..n).map(|_| r.u32()).collect::<Result<_, _>>()?)
        }
        got => return Err(WireError::UnknownType { got }),
    })
}
