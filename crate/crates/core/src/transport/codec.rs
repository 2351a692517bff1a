//! Byte-level framing.
//!
//! ```text
//! u32 BE  length of everything after this prefix
//! u8      kind tag
//! u64 BE  job id
//! u16 BE  sender id length, then that many UTF-8 bytes
//! ...     kind-specific body
//! ```
//!
//! Body primitives: strings are `u16` length + UTF-8 (error details use a
//! `u32` length), floats are IEEE-754 bits big-endian, matrices are `u32`
//! rows, `u32` cols and row-major `f64`s, row ranges are two `u64`s, lists
//! carry a `u32` count.

use std::io::Read;

use crate::error::{Error, Result};
use crate::matmul::{Matrix, RowRange};
use crate::scheduler::ProviderId;
use crate::transport::message::{Body, Endpoint, Message, MessageKind, Participant, Policy, ProviderStatus};

pub const MAX_FRAME: usize = (1 << 31) - 1;
pub const PREFIX_LEN: usize = 4;

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_be_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_be_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_be_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.u64(v.to_bits());
    }
    fn opt_f64(&mut self, v: Option<f64>) {
        match v {
            Some(v) => {
                self.u8(1);
                self.f64(v);
            }
            None => self.u8(0),
        }
    }
    fn str16(&mut self, s: &str) -> Result<()> {
        let len = u16::try_from(s.len()).map_err(|_| Error::InvalidMessage(format!("string of {} bytes", s.len())))?;
        self.u16(len);
        self.buf.extend_from_slice(s.as_bytes());
        Ok(())
    }
    fn str32(&mut self, s: &str) -> Result<()> {
        self.count(s.len())?;
        self.buf.extend_from_slice(s.as_bytes());
        Ok(())
    }
    fn count(&mut self, n: usize) -> Result<()> {
        let n = u32::try_from(n).map_err(|_| Error::FrameTooLarge(n))?;
        self.u32(n);
        Ok(())
    }
    fn endpoint(&mut self, e: &Endpoint) -> Result<()> {
        self.str16(&e.host)?;
        self.u16(e.port);
        Ok(())
    }
    fn range(&mut self, r: RowRange) {
        self.u64(r.start as u64);
        self.u64(r.end as u64);
    }
    fn matrix(&mut self, m: &Matrix) -> Result<()> {
        let rows = u32::try_from(m.rows()).map_err(|_| Error::FrameTooLarge(m.rows()))?;
        let cols = u32::try_from(m.cols()).map_err(|_| Error::FrameTooLarge(m.cols()))?;
        let bytes = m.data().len().saturating_mul(8);
        if bytes > MAX_FRAME {
            return Err(Error::FrameTooLarge(bytes));
        }
        self.u32(rows);
        self.u32(cols);
        self.buf.reserve(bytes);
        for v in m.data() {
            self.f64(*v);
        }
        Ok(())
    }
}

/// Encodes one message into a complete frame, prefix included.
pub fn encode(message: &Message) -> Result<Vec<u8>> {
    message.validate()?;
    let mut w = Writer {
        buf: vec![0; PREFIX_LEN],
    };
    w.u8(message.kind().tag());
    w.u64(message.job_id);
    w.str16(&message.sender)?;
    match &message.body {
        Body::Register { endpoint, services } => {
            w.endpoint(endpoint)?;
            let n = u16::try_from(services.len()).map_err(|_| Error::InvalidMessage("too many services".into()))?;
            w.u16(n);
            for s in services {
                w.str16(s)?;
            }
        }
        Body::RegisterAck {
            heartbeat_interval,
            staleness_window,
        } => {
            w.f64(*heartbeat_interval);
            w.f64(*staleness_window);
        }
        Body::Heartbeat { raw_speed, load_factor } => {
            w.f64(*raw_speed);
            w.f64(*load_factor);
        }
        Body::JobRequest {
            workload,
            policy,
            reply,
            first,
            second_cols,
        } => {
            w.str16(workload)?;
            w.u8(policy.tag());
            w.endpoint(reply)?;
            w.u32(*second_cols);
            w.matrix(first)?;
        }
        Body::SubRequest {
            workload,
            range,
            first_rows,
            client,
            block,
        } => {
            w.str16(workload)?;
            w.range(*range);
            w.u64(*first_rows);
            w.endpoint(client)?;
            w.matrix(block)?;
        }
        Body::BroadcastOperand { operand } => w.matrix(operand)?,
        Body::PartialResult {
            range,
            compute_seconds,
            block,
        } => {
            w.range(*range);
            w.f64(*compute_seconds);
            w.matrix(block)?;
        }
        Body::JobAccepted {
            predicted_finish,
            participants,
        } => {
            w.f64(*predicted_finish);
            w.count(participants.len())?;
            for p in participants {
                w.str16(p.provider.as_str())?;
                w.endpoint(&p.endpoint)?;
                w.range(p.range);
                w.f64(p.performance);
            }
        }
        Body::Error { code, detail } => {
            w.str16(code)?;
            w.str32(detail)?;
        }
        Body::StatusQuery => {}
        Body::StatusReport { providers } => {
            w.count(providers.len())?;
            for p in providers {
                w.str16(p.provider.as_str())?;
                w.endpoint(&p.endpoint)?;
                let n =
                    u16::try_from(p.services.len()).map_err(|_| Error::InvalidMessage("too many services".into()))?;
                w.u16(n);
                for s in &p.services {
                    w.str16(s)?;
                }
                w.opt_f64(p.performance);
                w.opt_f64(p.last_seen_age);
                w.opt_f64(p.round_trip);
                w.u8(u8::from(p.fresh));
            }
        }
    }
    let payload = w.buf.len() - PREFIX_LEN;
    if payload > MAX_FRAME {
        return Err(Error::FrameTooLarge(payload));
    }
    w.buf[..PREFIX_LEN].copy_from_slice(&(payload as u32).to_be_bytes());
    Ok(w.buf)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| {
                Error::Decode(format!(
                    "needed {n} bytes at offset {}, frame has {}",
                    self.pos,
                    self.buf.len()
                ))
            })?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_be_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_bits(self.u64()?))
    }
    fn opt_f64(&mut self) -> Result<Option<f64>> {
        match self.u8()? {
            0 => Ok(None),
            1 => Ok(Some(self.f64()?)),
            t => Err(Error::Decode(format!("bad option flag {t}"))),
        }
    }
    fn utf8(&mut self, n: usize) -> Result<String> {
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| Error::Decode(format!("invalid UTF-8: {e}")))
    }
    fn str16(&mut self) -> Result<String> {
        let n = self.u16()? as usize;
        self.utf8(n)
    }
    fn str32(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        self.utf8(n)
    }
    fn endpoint(&mut self) -> Result<Endpoint> {
        let host = self.str16()?;
        let port = self.u16()?;
        Endpoint::new(host, port).map_err(|e| Error::Decode(e.to_string()))
    }
    fn range(&mut self) -> Result<RowRange> {
        let start = self.u64()? as usize;
        let end = self.u64()? as usize;
        RowRange::new(start, end).map_err(|e| Error::Decode(e.to_string()))
    }
    fn matrix(&mut self) -> Result<Matrix> {
        let rows = self.u32()? as usize;
        let cols = self.u32()? as usize;
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::Decode("matrix shape overflows".into()))?;
        let raw = self.take(
            n.checked_mul(8)
                .ok_or_else(|| Error::Decode("matrix too large".into()))?,
        )?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_bits(u64::from_be_bytes(c.try_into().unwrap())))
            .collect();
        Matrix::new(rows, cols, data).map_err(|e| Error::Decode(e.to_string()))
    }
}

/// Decodes exactly one complete frame, prefix included.
pub fn decode(frame: &[u8]) -> Result<Message> {
    if frame.len() < PREFIX_LEN {
        return Err(Error::Decode(format!(
            "{} bytes is shorter than the prefix",
            frame.len()
        )));
    }
    let declared = u32::from_be_bytes(frame[..PREFIX_LEN].try_into().unwrap()) as usize;
    if declared > MAX_FRAME {
        return Err(Error::FrameTooLarge(declared));
    }
    if declared != frame.len() - PREFIX_LEN {
        return Err(Error::Decode(format!(
            "prefix declares {declared} bytes, frame carries {}",
            frame.len() - PREFIX_LEN
        )));
    }
    decode_payload(&frame[PREFIX_LEN..])
}

fn decode_payload(payload: &[u8]) -> Result<Message> {
    let mut r = Reader { buf: payload, pos: 0 };
    let kind = MessageKind::from_tag(r.u8()?)?;
    let job_id = r.u64()?;
    let sender = r.str16()?;
    let body = match kind {
        MessageKind::Register => {
            let endpoint = r.endpoint()?;
            let n = r.u16()?;
            let services = (0..n).map(|_| r.str16()).collect::<Result<_>>()?;
            Body::Register { endpoint, services }
        }
        MessageKind::RegisterAck => Body::RegisterAck {
            heartbeat_interval: r.f64()?,
            staleness_window: r.f64()?,
        },
        MessageKind::Heartbeat => Body::Heartbeat {
            raw_speed: r.f64()?,
            load_factor: r.f64()?,
        },
        MessageKind::JobRequest => Body::JobRequest {
            workload: r.str16()?,
            policy: Policy::from_tag(r.u8()?)?,
            reply: r.endpoint()?,
            second_cols: r.u32()?,
            first: r.matrix()?,
        },
        MessageKind::SubRequest => Body::SubRequest {
            workload: r.str16()?,
            range: r.range()?,
            first_rows: r.u64()?,
            client: r.endpoint()?,
            block: r.matrix()?,
        },
        MessageKind::BroadcastOperand => Body::BroadcastOperand { operand: r.matrix()? },
        MessageKind::PartialResult => Body::PartialResult {
            range: r.range()?,
            compute_seconds: r.f64()?,
            block: r.matrix()?,
        },
        MessageKind::JobAccepted => {
            let predicted_finish = r.f64()?;
            let n = r.u32()?;
            let mut participants = Vec::new();
            for _ in 0..n {
                participants.push(Participant {
                    provider: ProviderId::new(r.str16()?),
                    endpoint: r.endpoint()?,
                    range: r.range()?,
                    performance: r.f64()?,
                });
            }
            Body::JobAccepted {
                predicted_finish,
                participants,
            }
        }
        MessageKind::Error => Body::Error {
            code: r.str16()?,
            detail: r.str32()?,
        },
        MessageKind::StatusQuery => Body::StatusQuery,
        MessageKind::StatusReport => {
            let n = r.u32()?;
            let mut providers = Vec::new();
            for _ in 0..n {
                let provider = ProviderId::new(r.str16()?);
                let endpoint = r.endpoint()?;
                let ns = r.u16()?;
                let services = (0..ns).map(|_| r.str16()).collect::<Result<_>>()?;
                providers.push(ProviderStatus {
                    provider,
                    endpoint,
                    services,
                    performance: r.opt_f64()?,
                    last_seen_age: r.opt_f64()?,
                    round_trip: r.opt_f64()?,
                    fresh: match r.u8()? {
                        0 => false,
                        1 => true,
                        t => return Err(Error::Decode(format!("bad bool {t}"))),
                    },
                });
            }
            Body::StatusReport { providers }
        }
    };
    if r.pos != payload.len() {
        return Err(Error::Decode(format!(
            "{} trailing bytes after {kind:?} body",
            payload.len() - r.pos
        )));
    }
    let message = Message { job_id, sender, body };
    message.validate().map_err(|e| Error::Decode(e.to_string()))?;
    Ok(message)
}

/// Reads one frame from a blocking byte stream.
///
/// A clean end of stream before the first prefix byte is `ChannelClosed`;
/// an end of stream inside a frame is a decode error.
pub fn read_frame<R: Read + ?Sized>(reader: &mut R) -> Result<Message> {
    let mut prefix = [0u8; PREFIX_LEN];
    let mut got = 0;
    while got < PREFIX_LEN {
        match reader.read(&mut prefix[got..]) {
            Ok(0) if got == 0 => return Err(Error::ChannelClosed),
            Ok(0) => return Err(Error::Decode("stream ended inside a length prefix".into())),
            Ok(n) => got += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(Error::io("reading frame prefix", e)),
        }
    }
    let len = u32::from_be_bytes(prefix) as usize;
    if len > MAX_FRAME {
        return Err(Error::FrameTooLarge(len));
    }
    let mut payload = vec![0u8; len];
    reader.read_exact(&mut payload).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Decode(format!("stream ended inside a {len}-byte frame"))
        } else {
            Error::io("reading frame body", e)
        }
    })?;
    decode_payload(&payload)
}

/// Incremental decoder for a byte stream delivered in arbitrary chunks.
#[derive(Debug, Default)]
pub struct FrameDecoder {
    buf: Vec<u8>,
}

impl FrameDecoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    /// Next complete message, or `None` if more bytes are needed.
    pub fn next_message(&mut self) -> Result<Option<Message>> {
        if self.buf.len() < PREFIX_LEN {
            return Ok(None);
        }
        let len = u32::from_be_bytes(self.buf[..PREFIX_LEN].try_into().unwrap()) as usize;
        if len > MAX_FRAME {
            return Err(Error::FrameTooLarge(len));
        }
        if self.buf.len() < PREFIX_LEN + len {
            return Ok(None);
        }
        let message = decode_payload(&self.buf[PREFIX_LEN..PREFIX_LEN + len]);
        self.buf.drain(..PREFIX_LEN + len);
        message.map(Some)
    }

    /// Bytes received but not yet consumed.
    pub fn pending(&self) -> usize {
        self.buf.len()
    }
}
