//! Length-prefixed binary protocol between driver and workers.
//!
//! ```text
//! frame   = len:u32le tag:u8 payload[len - 1]
//! vector  = count:u32le value:f64le * count
//! map     = canonical JSON text (keys sorted)
//! ```
//!
//! | tag  | message  | payload |
//! |------|----------|---------|
//! | 0x01 | INIT     | JSON worker config |
//! | 0x02 | RESET    | seed:u64le, options map |
//! | 0x03 | STEP     | action vector |
//! | 0x04 | CLOSE    | empty |
//! | 0x81 | READY    | empty |
//! | 0x82 | RESETRES | observation vector |
//! | 0x83 | STEPRES  | observation vector, reward:f64le, terminated:u8, truncated:u8, info map |
//! | 0xFF | ERR      | code:u32le, UTF-8 message |

use crate::env::Info;
use serde_json::Value;
use std::io::{self, Read};
use thiserror::Error;

pub const TAG_INIT: u8 = 0x01;
pub const TAG_RESET: u8 = 0x02;
pub const TAG_STEP: u8 = 0x03;
pub const TAG_CLOSE: u8 = 0x04;
pub const TAG_READY: u8 = 0x81;
pub const TAG_RESETRES: u8 = 0x82;
pub const TAG_STEPRES: u8 = 0x83;
pub const TAG_ERR: u8 = 0xFF;

pub const KNOWN_TAGS: [u8; 8] = [
    TAG_INIT,
    TAG_RESET,
    TAG_STEP,
    TAG_CLOSE,
    TAG_READY,
    TAG_RESETRES,
    TAG_STEPRES,
    TAG_ERR,
];

/// Largest accepted value of the length field.
pub const MAX_FRAME_LEN: u32 = 64 << 20;

/// ERR code for undecodable input.
pub const CODE_PROTOCOL: u32 = 1;
/// ERR code for a well-formed message the worker cannot accept in its state.
pub const CODE_UNEXPECTED: u32 = 2;

#[derive(Debug, Error, PartialEq)]
pub enum WireError {
    #[error("frame truncated: need {needed} bytes, have {have}")]
    Truncated { needed: usize, have: usize },
    #[error("frame length field is zero")]
    ZeroLength,
    #[error("frame length {0} exceeds the limit")]
    Oversize(u64),
    #[error("unknown tag 0x{0:02x}")]
    UnknownTag(u8),
    #[error("malformed {what}: {detail}")]
    Malformed { what: &'static str, detail: String },
    #[error("unexpected message 0x{tag:02x} ({context})")]
    Unexpected { tag: u8, context: &'static str },
}

impl WireError {
    fn malformed(what: &'static str, detail: impl ToString) -> Self {
        WireError::Malformed {
            what,
            detail: detail.to_string(),
        }
    }
}

pub fn encode_frame(tag: u8, payload: &[u8]) -> Result<Vec<u8>, WireError> {
    let len = payload.len() as u64 + 1;
    if len > MAX_FRAME_LEN as u64 {
        return Err(WireError::Oversize(len));
    }
    let mut out = Vec::with_capacity(4 + len as usize);
    out.extend_from_slice(&(len as u32).to_le_bytes());
    out.push(tag);
    out.extend_from_slice(payload);
    Ok(out)
}

/// Decodes the frame at the start of `buf`, returning `(tag, payload)` and
/// the number of bytes consumed. Nothing is decoded from a short buffer.
pub fn decode_frame(buf: &[u8]) -> Result<((u8, &[u8]), usize), WireError> {
    if buf.len() < 4 {
        return Err(WireError::Truncated {
            needed: 4,
            have: buf.len(),
        });
    }
    let len = u32::from_le_bytes(buf[..4].try_into().unwrap());
    if len == 0 {
        return Err(WireError::ZeroLength);
    }
    if len > MAX_FRAME_LEN {
        return Err(WireError::Oversize(len as u64));
    }
    let total = 4 + len as usize;
    if buf.len() < total {
        return Err(WireError::Truncated {
            needed: total,
            have: buf.len(),
        });
    }
    let tag = buf[4];
    if !KNOWN_TAGS.contains(&tag) {
        return Err(WireError::UnknownTag(tag));
    }
    Ok(((tag, &buf[5..total]), total))
}

/// Reads one whole frame (prefix included) from a stream. `Ok(None)` on a
/// clean end of stream before the first byte.
pub fn read_frame<R: Read>(r: &mut R) -> io::Result<Option<Vec<u8>>> {
    let mut prefix = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        match r.read(&mut prefix[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => return Err(io::ErrorKind::UnexpectedEof.into()),
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    let len = u32::from_le_bytes(prefix);
    if len == 0 || len > MAX_FRAME_LEN {
        return Err(io::Error::new(io::ErrorKind::InvalidData, format!("bad frame length {len}")));
    }
    let mut frame = vec![0u8; 4 + len as usize];
    frame[..4].copy_from_slice(&prefix);
    r.read_exact(&mut frame[4..])?;
    Ok(Some(frame))
}

struct Cursor<'a> {
    buf: &'a [u8],
    what: &'static str,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        if self.buf.len() < n {
            return Err(WireError::malformed(
                self.what,
                format!("need {n} more bytes, have {}", self.buf.len()),
            ));
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32, WireError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, WireError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, WireError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn bool(&mut self) -> Result<bool, WireError> {
        match self.take(1)?[0] {
            0 => Ok(false),
            1 => Ok(true),
            b => Err(WireError::malformed(self.what, format!("flag byte {b}"))),
        }
    }

    fn vector(&mut self) -> Result<Vec<f64>, WireError> {
        let n = self.u32()? as usize;
        if n > self.buf.len() / 8 {
            return Err(WireError::malformed(self.what, format!("vector count {n} overruns payload")));
        }
        (0..n).map(|_| self.f64()).collect()
    }

    fn map(&mut self) -> Result<Info, WireError> {
        let rest = self.take(self.buf.len())?;
        serde_json::from_slice(rest).map_err(|e| WireError::malformed(self.what, e))
    }

    fn finish(&self) -> Result<(), WireError> {
        if self.buf.is_empty() {
            Ok(())
        } else {
            Err(WireError::malformed(self.what, format!("{} trailing bytes", self.buf.len())))
        }
    }
}

fn put_vector(out: &mut Vec<u8>, v: &[f64]) {
    out.extend_from_slice(&(v.len() as u32).to_le_bytes());
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

fn put_map(out: &mut Vec<u8>, m: &Info) {
    // serde_json's Map is a BTreeMap here, so keys come out sorted
    serde_json::to_writer(out, m).expect("in-memory JSON write");
}

/// Driver to worker.
#[derive(Debug, Clone, PartialEq)]
pub enum Request {
    Init(Value),
    Reset { seed: u64, options: Info },
    Step(Vec<f64>),
    Close,
}

/// Worker to driver.
#[derive(Debug, Clone, PartialEq)]
pub enum Reply {
    Ready,
    ResetRes(Vec<f64>),
    StepRes {
        observation: Vec<f64>,
        reward: f64,
        terminated: bool,
        truncated: bool,
        info: Info,
    },
    Err { code: u32, message: String },
}

impl Request {
    pub fn tag(&self) -> u8 {
        match self {
            Request::Init(_) => TAG_INIT,
            Request::Reset { .. } => TAG_RESET,
            Request::Step(_) => TAG_STEP,
            Request::Close => TAG_CLOSE,
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>, WireError> {
        let mut p = Vec::new();
        match self {
            Request::Init(cfg) => serde_json::to_writer(&mut p, cfg).expect("in-memory JSON write"),
            Request::Reset { seed, options } => {
                p.extend_from_slice(&seed.to_le_bytes());
                put_map(&mut p, options);
            }
            Request::Step(a) => put_vector(&mut p, a),
            Request::Close => {}
        }
        encode_frame(self.tag(), &p)
    }

    pub fn decode(frame: &[u8]) -> Result<Self, WireError> {
        let ((tag, payload), used) = decode_frame(frame)?;
        if used != frame.len() {
            return Err(WireError::malformed("frame", "bytes after frame end"));
        }
        Self::from_parts(tag, payload)
    }

    pub fn from_parts(tag: u8, payload: &[u8]) -> Result<Self, WireError> {
        let mut c = Cursor {
            buf: payload,
            what: "request",
        };
        let req = match tag {
            TAG_INIT => {
                Request::Init(serde_json::from_slice(payload).map_err(|e| WireError::malformed("INIT", e))?)
            }
            TAG_RESET => {
                c.what = "RESET";
                let seed = c.u64()?;
                Request::Reset {
                    seed,
                    options: c.map()?,
                }
            }
            TAG_STEP => {
                c.what = "STEP";
                let a = c.vector()?;
                c.finish()?;
                Request::Step(a)
            }
            TAG_CLOSE => {
                c.what = "CLOSE";
                c.finish()?;
                Request::Close
            }
            t => return Err(WireError::Unexpected { tag: t, context: "expected a request" }),
        };
        Ok(req)
    }
}

impl Reply {
    pub fn tag(&self) -> u8 {
        match self {
            Reply::Ready => TAG_READY,
            Reply::ResetRes(_) => TAG_RESETRES,
            Reply::StepRes { .. } => TAG_STEPRES,
            Reply::Err { .. } => TAG_ERR,
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>, WireError> {
        let mut p = Vec::new();
        match self {
            Reply::Ready => {}
            Reply::ResetRes(obs) => put_vector(&mut p, obs),
            Reply::StepRes {
                observation,
                reward,
                terminated,
                truncated,
                info,
            } => {
                put_vector(&mut p, observation);
                p.extend_from_slice(&reward.to_le_bytes());
                p.push(*terminated as u8);
                p.push(*truncated as u8);
                put_map(&mut p, info);
            }
            Reply::Err { code, message } => {
                p.extend_from_slice(&code.to_le_bytes());
                p.extend_from_slice(message.as_bytes());
            }
        }
        encode_frame(self.tag(), &p)
    }

    pub fn decode(frame: &[u8]) -> Result<Self, WireError> {
        let ((tag, payload), used) = decode_frame(frame)?;
        if used != frame.len() {
            return Err(WireError::malformed("frame", "bytes after frame end"));
        }
        Self::from_parts(tag, payload)
    }

    pub fn from_parts(tag: u8, payload: &[u8]) -> Result<Self, WireError> {
        let mut c = Cursor {
            buf: payload,
            what: "reply",
        };
        let reply = match tag {
            TAG_READY => {
                c.what = "READY";
                c.finish()?;
                Reply::Ready
            }
            TAG_RESETRES => {
                c.what = "RESETRES";
                let obs = c.vector()?;
                c.finish()?;
                Reply::ResetRes(obs)
            }
            TAG_STEPRES => {
                c.what = "STEPRES";
                let observation = c.vector()?;
                let reward = c.f64()?;
                let terminated = c.bool()?;
                let truncated = c.bool()?;
                Reply::StepRes {
                    observation,
                    reward,
                    terminated,
                    truncated,
                    info: c.map()?,
                }
            }
            TAG_ERR => {
                c.what = "ERR";
                let code = c.u32()?;
                let message = std::str::from_utf8(c.buf)
                    .map_err(|e| WireError::malformed("ERR", e))?
                    .to_string();
                Reply::Err { code, message }
            }
            t => return Err(WireError::Unexpected { tag: t, context: "expected a reply" }),
        };
        Ok(reply)
    }
}
