//! Newline-delimited JSON framing for client/server messages.
//!
//! Each message is one line:
//! `{"type":"UPDATE","round":3,"client_id":1,"payload":[0.25,-1.5,...]}`.
//! Reals are printed in their shortest round-trip form and parsed back to the
//! identical bits.

use std::fmt;
use std::str::FromStr;

use serde::Serialize;
use serde_json::Value;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MessageType {
    Hello,
    InitModel,
    Update,
    RoundComplete,
    Shutdown,
}

impl MessageType {
    pub const ALL: [MessageType; 5] = [
        MessageType::Hello,
        MessageType::InitModel,
        MessageType::Update,
        MessageType::RoundComplete,
        MessageType::Shutdown,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MessageType::Hello => "HELLO",
            MessageType::InitModel => "INIT_MODEL",
            MessageType::Update => "UPDATE",
            MessageType::RoundComplete => "ROUND_COMPLETE",
            MessageType::Shutdown => "SHUTDOWN",
        }
    }

    /// Messages that must carry a full parameter vector.
    fn needs_payload(self) -> bool {
        matches!(self, MessageType::InitModel | MessageType::Update)
    }
}

impl fmt::Display for MessageType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MessageType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MessageType::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::Decode {
                field: "type",
                detail: format!("unknown message type `{s}`"),
            })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WireMessage {
    pub msg_type: MessageType,
    pub round: u64,
    pub client_id: usize,
    /// Empty, or a flat `d + 1` parameter/delta vector.
    pub payload: Vec<f64>,
}

impl WireMessage {
    pub fn new(msg_type: MessageType, round: u64, client_id: usize, payload: Vec<f64>) -> Self {
        Self {
            msg_type,
            round,
            client_id,
            payload,
        }
    }
}

#[derive(Serialize)]
struct Repr<'a> {
    #[serde(rename = "type")]
    msg_type: &'static str,
    round: u64,
    client_id: usize,
    payload: &'a [f64],
}

/// Serializes a message as one JSON object followed by `\n`.
pub fn encode(msg: &WireMessage) -> Vec<u8> {
    let repr = Repr {
        msg_type: msg.msg_type.as_str(),
        round: msg.round,
        client_id: msg.client_id,
        payload: &msg.payload,
    };
    let mut line = serde_json::to_vec(&repr).expect("wire messages always serialize");
    line.push(b'\n');
    line
}

fn decode_err(field: &'static str, detail: impl Into<String>) -> Error {
    Error::Decode {
        field,
        detail: detail.into(),
    }
}

/// Parses one line produced by [`encode`]. `dim` is the feature dimension;
/// non-empty payloads must hold `dim + 1` values.
pub fn decode(line: &[u8], dim: usize) -> Result<WireMessage> {
    let body = line.strip_suffix(b"\n").unwrap_or(line);
    let body = body.strip_suffix(b"\r").unwrap_or(body);
    if body.contains(&b'\n') {
        return Err(decode_err("line", "message spans more than one line"));
    }
    let value: Value = serde_json::from_slice(body)
        .map_err(|e| decode_err("line", format!("malformed JSON: {e}")))?;
    let object = value
        .as_object()
        .ok_or_else(|| decode_err("line", "message is not a JSON object"))?;

    let msg_type: MessageType = object
        .get("type")
        .and_then(Value::as_str)
        .ok_or_else(|| decode_err("type", "missing or not a string"))?
        .parse()?;
    let round = object
        .get("round")
        .and_then(Value::as_u64)
        .ok_or_else(|| decode_err("round", "missing or not a non-negative integer"))?;
    let client_id = object
        .get("client_id")
        .and_then(Value::as_u64)
        .and_then(|id| usize::try_from(id).ok())
        .ok_or_else(|| decode_err("client_id", "missing or not a non-negative integer"))?;
    let payload = object
        .get("payload")
        .and_then(Value::as_array)
        .ok_or_else(|| decode_err("payload", "missing or not an array"))?
        .iter()
        .map(|v| {
            v.as_f64()
                .ok_or_else(|| decode_err("payload", format!("entry `{v}` is not a number")))
        })
        .collect::<Result<Vec<f64>>>()?;

    let expected = dim + 1;
    let length_ok = if msg_type.needs_payload() {
        payload.len() == expected
    } else {
        payload.is_empty() || payload.len() == expected
    };
    if !length_ok {
        return Err(decode_err(
            "payload",
            format!(
                "{msg_type} payload has {} values, expected {expected}",
                payload.len()
            ),
        ));
    }
    Ok(WireMessage {
        msg_type,
        round,
        client_id,
        payload,
    })
}
