//! FLRT message framing.
//!
//! ```text
//! "FLRT" | version u8 | msg_type u8 | round u32 | payload_len u64 | payload | crc32 u32
//! ```
//!
//! All integers are little-endian. The CRC covers every byte before it.
//! Weight tensors are encoded as name (u16 length + UTF-8), dtype u8
//! (0 = f32, 1 = f64), ndim u8, dims (u32 each) and row-major data.

use std::io::{self, Read, Write};

use fedrt_core::model::ModelWeights;
use fedrt_core::Tensor;

pub const MAGIC: [u8; 4] = *b"FLRT";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 4 + 1 + 1 + 4 + 8;
pub const TRAILER_LEN: usize = 4;
/// Largest payload accepted from the wire.
pub const MAX_PAYLOAD: u64 = 1 << 32;

#[derive(Debug, thiserror::Error)]
pub enum WireError {
    #[error("bad magic {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("unsupported protocol version {0}")]
    Version(u8),
    #[error("unknown message type {0}")]
    UnknownType(u8),
    #[error("payload length {0} exceeds the frame limit")]
    LengthOverflow(u64),
    #[error("frame truncated")]
    Truncated,
    #[error("crc mismatch: frame says {stored:08x}, computed {computed:08x}")]
    Crc { stored: u32, computed: u32 },
    #[error("malformed payload: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type WireResult<T> = Result<T, WireError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum MsgType {
    Configure = 0,
    TrainRequest = 1,
    TrainResponse = 2,
    EvalRequest = 3,
    EvalResponse = 4,
    Shutdown = 5,
    Error = 6,
}

impl MsgType {
    pub fn from_u8(b: u8) -> WireResult<Self> {
        Ok(match b {
            0 => MsgType::Configure,
            1 => MsgType::TrainRequest,
            2 => MsgType::TrainResponse,
            3 => MsgType::EvalRequest,
            4 => MsgType::EvalResponse,
            5 => MsgType::Shutdown,
            6 => MsgType::Error,
            other => return Err(WireError::UnknownType(other)),
        })
    }
}

/// One weight tensor on the wire, keeping its dtype.
#[derive(Clone, Debug, PartialEq)]
pub enum WireTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl WireTensor {
    pub fn dims(&self) -> &[usize] {
        match self {
            WireTensor::F32(t) => t.dims(),
            WireTensor::F64(t) => t.dims(),
        }
    }
}

/// Named tensors in network order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct WireWeights(pub Vec<(String, WireTensor)>);

impl From<&ModelWeights<f32>> for WireWeights {
    fn from(w: &ModelWeights<f32>) -> Self {
        WireWeights(
            w.entries
                .iter()
                .map(|(n, t)| (n.clone(), WireTensor::F32(t.clone())))
                .collect(),
        )
    }
}

impl From<&ModelWeights<f64>> for WireWeights {
    fn from(w: &ModelWeights<f64>) -> Self {
        WireWeights(
            w.entries
                .iter()
                .map(|(n, t)| (n.clone(), WireTensor::F64(t.clone())))
                .collect(),
        )
    }
}

impl WireWeights {
    /// Single-precision weights; f64 tensors are rounded.
    pub fn to_f32(&self) -> ModelWeights<f32> {
        ModelWeights {
            entries: self
                .0
                .iter()
                .map(|(n, t)| {
                    let t = match t {
                        WireTensor::F32(t) => t.clone(),
                        WireTensor::F64(t) => t.cast(),
                    };
                    (n.clone(), t)
                })
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Body {
    /// Client handshake.
    Configure {
        centre_id: String,
        n_train: u64,
        n_val: u64,
    },
    TrainRequest {
        weights: WireWeights,
    },
    TrainResponse {
        weights: WireWeights,
        n_train: u64,
        loss: f64,
    },
    EvalRequest {
        weights: WireWeights,
    },
    EvalResponse {
        accuracy: f64,
        loss: f64,
        n: u64,
    },
    Shutdown,
    Error {
        message: String,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Message {
    pub round: u32,
    pub body: Body,
}

impl Message {
    pub fn new(round: u32, body: Body) -> Self {
        Message { round, body }
    }

    pub fn msg_type(&self) -> MsgType {
        match self.body {
            Body::Configure { .. } => MsgType::Configure,
            Body::TrainRequest { .. } => MsgType::TrainRequest,
            Body::TrainResponse { .. } => MsgType::TrainResponse,
            Body::EvalRequest { .. } => MsgType::EvalRequest,
            Body::EvalResponse { .. } => MsgType::EvalResponse,
            Body::Shutdown => MsgType::Shutdown,
            Body::Error { .. } => MsgType::Error,
        }
    }

    pub fn error(round: u32, message: impl Into<String>) -> Self {
        Message::new(
            round,
            Body::Error {
                message: message.into(),
            },
        )
    }
}

pub fn serialize_message(msg: &Message) -> WireResult<Vec<u8>> {
    let mut payload = Vec::new();
    encode_body(&msg.body, &mut payload)?;
    let mut out = Vec::with_capacity(HEADER_LEN + payload.len() + TRAILER_LEN);
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.push(msg.msg_type() as u8);
    out.extend_from_slice(&msg.round.to_le_bytes());
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&payload);
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Header {
    msg_type: MsgType,
    round: u32,
    len: u64,
}

fn parse_header(h: &[u8; HEADER_LEN]) -> WireResult<Header> {
    let magic: [u8; 4] = h[..4].try_into().unwrap_or_default();
    if magic != MAGIC {
        return Err(WireError::BadMagic(magic));
    }
    if h[4] != VERSION {
        return Err(WireError::Version(h[4]));
    }
    let msg_type = MsgType::from_u8(h[5])?;
    let round = u32::from_le_bytes(h[6..10].try_into().unwrap_or_default());
    let len = u64::from_le_bytes(h[10..18].try_into().unwrap_or_default());
    if len > MAX_PAYLOAD {
        return Err(WireError::LengthOverflow(len));
    }
    Ok(Header { msg_type, round, len })
}

fn finish(header: &Header, frame: &[u8]) -> WireResult<Message> {
    let (body_bytes, trailer) = frame.split_at(frame.len() - TRAILER_LEN);
    let stored = u32::from_le_bytes(trailer.try_into().unwrap_or_default());
    let computed = crc32fast::hash(body_bytes);
    if stored != computed {
        return Err(WireError::Crc { stored, computed });
    }
    let mut cur = Cursor::new(&body_bytes[HEADER_LEN..]);
    let body = decode_body(header.msg_type, &mut cur)?;
    if !cur.is_done() {
        return Err(WireError::Malformed(format!(
            "{} trailing payload bytes",
            cur.remaining()
        )));
    }
    Ok(Message::new(header.round, body))
}

/// Decode exactly one frame occupying all of `bytes`.
pub fn deserialize_message(bytes: &[u8]) -> WireResult<Message> {
    if bytes.len() < HEADER_LEN {
        return Err(WireError::Truncated);
    }
    let header = parse_header(bytes[..HEADER_LEN].try_into().map_err(|_| WireError::Truncated)?)?;
    let expected = HEADER_LEN as u64 + header.len + TRAILER_LEN as u64;
    match (bytes.len() as u64).cmp(&expected) {
        std::cmp::Ordering::Less => Err(WireError::Truncated),
        std::cmp::Ordering::Greater => Err(WireError::Malformed(format!(
            "{} bytes after the frame",
            bytes.len() as u64 - expected
        ))),
        std::cmp::Ordering::Equal => finish(&header, bytes),
    }
}

/// Read one frame from a stream. End of stream inside a frame is `Truncated`.
pub fn read_message(r: &mut impl Read) -> WireResult<Message> {
    let mut head = [0u8; HEADER_LEN];
    read_full(r, &mut head)?;
    let header = parse_header(&head)?;
    let rest = header.len as usize + TRAILER_LEN;
    let mut frame = Vec::with_capacity(HEADER_LEN + rest);
    frame.extend_from_slice(&head);
    frame.resize(HEADER_LEN + rest, 0);
    read_full(r, &mut frame[HEADER_LEN..])?;
    finish(&header, &frame)
}

pub fn write_message(w: &mut impl Write, msg: &Message) -> WireResult<()> {
    w.write_all(&serialize_message(msg)?)?;
    w.flush()?;
    Ok(())
}

fn read_full(r: &mut impl Read, buf: &mut [u8]) -> WireResult<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => WireError::Truncated,
        _ => WireError::Io(e),
    })
}

fn encode_body(body: &Body, out: &mut Vec<u8>) -> WireResult<()> {
    match body {
        Body::Configure {
            centre_id,
            n_train,
            n_val,
        } => {
            put_str(out, centre_id)?;
            out.extend_from_slice(&n_train.to_le_bytes());
            out.extend_from_slice(&n_val.to_le_bytes());
        }
        Body::TrainRequest { weights } | Body::EvalRequest { weights } => put_weights(out, weights)?,
        Body::TrainResponse { weights, n_train, loss } => {
            out.extend_from_slice(&n_train.to_le_bytes());
            out.extend_from_slice(&loss.to_le_bytes());
            put_weights(out, weights)?;
        }
        Body::EvalResponse { accuracy, loss, n } => {
            out.extend_from_slice(&accuracy.to_le_bytes());
            out.extend_from_slice(&loss.to_le_bytes());
            out.extend_from_slice(&n.to_le_bytes());
        }
        Body::Shutdown => {}
        Body::Error { message } => put_str(out, message)?,
    }
    Ok(())
}

fn decode_body(t: MsgType, c: &mut Cursor) -> WireResult<Body> {
    Ok(match t {
        MsgType::Configure => Body::Configure {
            centre_id: c.string()?,
            n_train: c.u64()?,
            n_val: c.u64()?,
        },
        MsgType::TrainRequest => Body::TrainRequest { weights: c.weights()? },
        MsgType::TrainResponse => {
            let n_train = c.u64()?;
            let loss = c.f64()?;
            Body::TrainResponse {
                weights: c.weights()?,
                n_train,
                loss,
            }
        }
        MsgType::EvalRequest => Body::EvalRequest { weights: c.weights()? },
        MsgType::EvalResponse => Body::EvalResponse {
            accuracy: c.f64()?,
            loss: c.f64()?,
            n: c.u64()?,
        },
        MsgType::Shutdown => Body::Shutdown,
        MsgType::Error => Body::Error { message: c.string()? },
    })
}

fn put_str(out: &mut Vec<u8>, s: &str) -> WireResult<()> {
    let len = u16::try_from(s.len()).map_err(|_| WireError::Malformed(format!("string of {} bytes", s.len())))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

fn put_weights(out: &mut Vec<u8>, w: &WireWeights) -> WireResult<()> {
    let n = u32::try_from(w.0.len()).map_err(|_| WireError::Malformed("too many tensors".into()))?;
    out.extend_from_slice(&n.to_le_bytes());
    for (name, t) in &w.0 {
        put_str(out, name)?;
        let dims = t.dims();
        let ndim =
            u8::try_from(dims.len()).map_err(|_| WireError::Malformed(format!("{name}: rank {}", dims.len())))?;
        out.push(match t {
            WireTensor::F32(_) => 0,
            WireTensor::F64(_) => 1,
        });
        out.push(ndim);
        for &d in dims {
            let d = u32::try_from(d).map_err(|_| WireError::Malformed(format!("{name}: dim {d}")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        match t {
            WireTensor::F32(t) => t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            WireTensor::F64(t) => t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        }
    }
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Cursor { buf, pos: 0 }
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn is_done(&self) -> bool {
        self.pos == self.buf.len()
    }

    fn take(&mut self, n: usize) -> WireResult<&'a [u8]> {
        if self.remaining() < n {
            return Err(WireError::Malformed(format!(
                "payload ends {} bytes early",
                n - self.remaining()
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> WireResult<[u8; N]> {
        let mut a = [0u8; N];
        a.copy_from_slice(self.take(N)?);
        Ok(a)
    }

    fn u8(&mut self) -> WireResult<u8> {
        Ok(self.array::<1>()?[0])
    }

    fn u16(&mut self) -> WireResult<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    fn u32(&mut self) -> WireResult<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> WireResult<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn f64(&mut self) -> WireResult<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    fn string(&mut self) -> WireResult<String> {
        let n = self.u16()? as usize;
        let bytes = self.take(n)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| WireError::Malformed("invalid UTF-8".into()))
    }

    fn weights(&mut self) -> WireResult<WireWeights> {
        let n = self.u32()? as usize;
        let mut entries = Vec::with_capacity(n.min(1024));
        for _ in 0..n {
            let name = self.string()?;
            let dtype = self.u8()?;
            let ndim = self.u8()? as usize;
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                dims.push(self.u32()? as usize);
            }
            let count = dims
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| WireError::Malformed(format!("{name}: element count overflows")))?;
            let width = match dtype {
                0 => 4,
                1 => 8,
                other => return Err(WireError::Malformed(format!("{name}: dtype {other}"))),
            };
            let raw = self.take(
                count
                    .checked_mul(width)
                    .ok_or_else(|| WireError::Malformed(format!("{name}: size overflows")))?,
            )?;
            let bad = |_| WireError::Malformed(format!("{name}: inconsistent dims"));
            let t = if dtype == 0 {
                let data = raw
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                    .collect();
                WireTensor::F32(Tensor::new(dims, data).map_err(bad)?)
            } else {
                let data = raw
                    .chunks_exact(8)
                    .map(|b| f64::from_le_bytes(b.try_into().unwrap_or_default()))
                    .collect();
                WireTensor::F64(Tensor::new(dims, data).map_err(bad)?)
            };
            entries.push((name, t));
        }
        Ok(WireWeights(entries))
    }
}
