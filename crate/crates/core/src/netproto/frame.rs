use std::io::{ErrorKind, Read, Write};

use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamVector;

/// Frames larger than this are rejected before allocating.
pub const MAX_FRAME_BYTES: usize = 256 << 20;

pub mod codes {
    pub const HANDSHAKE_REQUIRED: &str = "handshake_required";
    pub const STALE_PROTOCOL_VIOLATION: &str = "stale_protocol_violation";
    pub const MALFORMED_FRAME: &str = "malformed_frame";
    pub const TRUNCATED_FRAME: &str = "truncated_frame";
    pub const UNEXPECTED_MESSAGE: &str = "unexpected_message";
    pub const UNKNOWN_CLIENT: &str = "unknown_client";
    pub const DIM_MISMATCH: &str = "dim_mismatch";
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Message {
    Hello {
        client_id: String,
        shard_size: u64,
    },
    ModelDown {
        t: u64,
        h_assign: u64,
        #[serde(with = "b64_weights")]
        weights: ParamVector,
    },
    ModelUp {
        tau: u64,
        client_id: String,
        #[serde(with = "b64_weights")]
        weights: ParamVector,
    },
    Bye,
    Error {
        code: String,
        detail: String,
    },
}

impl Message {
    pub fn error(code: &str, detail: impl Into<String>) -> Self {
        Message::Error {
            code: code.to_string(),
            detail: detail.into(),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Message::Hello { .. } => "hello",
            Message::ModelDown { .. } => "model_down",
            Message::ModelUp { .. } => "model_up",
            Message::Bye => "bye",
            Message::Error { .. } => "error",
        }
    }
}

/// Little-endian doubles in coordinate order, base64 with padding.
pub fn weights_to_base64(w: &ParamVector) -> String {
    let bytes: Vec<u8> = w.as_slice().iter().flat_map(|v| v.to_le_bytes()).collect();
    STANDARD.encode(bytes)
}

pub fn weights_from_base64(text: &str) -> Result<ParamVector> {
    let bytes = STANDARD.decode(text).map_err(|e| {
        Error::protocol(
            codes::MALFORMED_FRAME,
            format!("invalid base64 weights: {e}"),
        )
    })?;
    if bytes.len() % 8 != 0 {
        return Err(Error::protocol(
            codes::MALFORMED_FRAME,
            format!("weights hold {} bytes, not a multiple of 8", bytes.len()),
        ));
    }
    let values = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    ParamVector::new(values).map_err(|e| Error::protocol(codes::MALFORMED_FRAME, e.to_string()))
}

mod b64_weights {
    use serde::{Deserialize, Deserializer, Serializer};

    use crate::params::ParamVector;

    pub fn serialize<S: Serializer>(w: &ParamVector, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&super::weights_to_base64(w))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<ParamVector, D::Error> {
        let text = String::deserialize(d)?;
        super::weights_from_base64(&text).map_err(serde::de::Error::custom)
    }
}

fn payload(message: &Message) -> Vec<u8> {
    serde_json::to_vec(message).expect("messages always serialize")
}

fn parse_payload(bytes: &[u8]) -> Result<Message> {
    let text = std::str::from_utf8(bytes)
        .map_err(|e| Error::protocol(codes::MALFORMED_FRAME, e.to_string()))?;
    serde_json::from_str(text).map_err(|e| Error::protocol(codes::MALFORMED_FRAME, e.to_string()))
}

/// 4-byte big-endian length, then the JSON payload.
pub fn encode_frame(message: &Message) -> Vec<u8> {
    let body = payload(message);
    let mut out = Vec::with_capacity(4 + body.len());
    out.extend_from_slice(&(body.len() as u32).to_be_bytes());
    out.extend_from_slice(&body);
    out
}

/// Decodes exactly one frame; the buffer must hold nothing else.
pub fn decode_frame(bytes: &[u8]) -> Result<Message> {
    if bytes.len() < 4 {
        return Err(Error::protocol(
            codes::TRUNCATED_FRAME,
            format!("{} header bytes", bytes.len()),
        ));
    }
    let len = u32::from_be_bytes(bytes[..4].try_into().expect("4 bytes")) as usize;
    let body = &bytes[4..];
    if body.len() < len {
        return Err(Error::protocol(
            codes::TRUNCATED_FRAME,
            format!("length says {len} bytes, {} present", body.len()),
        ));
    }
    if body.len() > len {
        return Err(Error::protocol(
            codes::MALFORMED_FRAME,
            format!("length says {len} bytes, {} present", body.len()),
        ));
    }
    parse_payload(body)
}

pub fn write_frame(w: &mut impl Write, message: &Message) -> Result<()> {
    w.write_all(&encode_frame(message))?;
    w.flush()?;
    Ok(())
}

/// Reads one frame. A stream that ends cleanly before the first header byte
/// gives an `UnexpectedEof` I/O error; one that ends mid-frame is a
/// `truncated_frame` protocol error.
pub fn read_frame(r: &mut impl Read) -> Result<Message> {
    let mut header = [0u8; 4];
    let got = read_full(r, &mut header)?;
    if got == 0 {
        return Err(Error::Io(std::io::Error::new(
            ErrorKind::UnexpectedEof,
            "connection closed",
        )));
    }
    if got < 4 {
        return Err(Error::protocol(
            codes::TRUNCATED_FRAME,
            format!("{got} of 4 header bytes"),
        ));
    }
    let len = u32::from_be_bytes(header) as usize;
    if len > MAX_FRAME_BYTES {
        return Err(Error::protocol(
            codes::MALFORMED_FRAME,
            format!("frame of {len} bytes exceeds limit"),
        ));
    }
    let mut body = vec![0u8; len];
    let got = read_full(r, &mut body)?;
    if got < len {
        return Err(Error::protocol(
            codes::TRUNCATED_FRAME,
            format!("{got} of {len} payload bytes"),
        ));
    }
    parse_payload(&body)
}

/// Like `read_exact`, but reports how much arrived before end of stream.
fn read_full(r: &mut impl Read, buf: &mut [u8]) -> Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(n) => filled += n,
            Err(e) if e.kind() == ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    Ok(filled)
}
