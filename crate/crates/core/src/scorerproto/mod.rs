//! Newline-delimited JSON protocol for external scorer processes.
//!
//! Every message is one JSON object on one line. The client opens with a
//! `hello` carrying the protocol version and the vocabulary hash; the server
//! answers with its own `hello`. After that the exchange is stop-and-wait:
//! one `score` request, one `result` response with the same `id`. Pixel
//! buffers are base64 of little-endian `f32`, row-major and
//! channel-interleaved. See `docs/protocol.md` for the full schema.

mod client;
mod echo;
pub mod fixture;

pub use client::{connect_scorer, ConnectOptions, Endpoint, RemoteScorer};
pub use echo::{serve_echo, EchoMode, EchoOptions};

use std::time::Duration;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::imagecore::Image;
use crate::objective::DISTRIBUTION_TOL;

pub const PROTOCOL_VERSION: u32 = 1;
pub const PROTOCOL_NAME: &str = "capcrop-scorer";
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Debug, thiserror::Error)]
pub enum ProtocolError {
    #[error("malformed message: {0}")]
    Malformed(String),
    #[error("response id {got} does not match request id {expected}; connection is poisoned")]
    Desync { expected: u64, got: u64 },
    #[error("invalid response: {0}")]
    Validation(String),
    #[error("incompatible scorer: {0}")]
    Incompatible(String),
    #[error("vocabulary hash mismatch: ours {ours}, scorer's {theirs}")]
    VocabularyMismatch { ours: String, theirs: String },
    #[error("scorer did not answer within {0:?}")]
    Timeout(Duration),
    #[error("scorer closed the connection")]
    Closed,
    #[error("connection unusable after an earlier failure")]
    Poisoned,
    #[error("scorer reported an error: {0}")]
    Remote(String),
    #[error("transport error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hello {
    pub protocol: String,
    pub version: u32,
    pub vocab_hash: String,
    /// Server only: whether several connections may score concurrently.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub concurrent_safe: Option<bool>,
    /// Server only: whether the server can return pixel gradients.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gradients: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRequest {
    pub id: u64,
    pub out_size: usize,
    pub channels: usize,
    /// base64 of `out_size² × channels` little-endian `f32`.
    pub crop: String,
    pub vocab_hash: String,
    pub want_gradient: bool,
    /// base64 `f32` cotangent on the mean caption distribution, sent with
    /// `want_gradient`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cotangent: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WirePixelGradients {
    pub caption: String,
    pub aesthetic: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreResponse {
    pub id: u64,
    #[serde(default)]
    pub caption_steps: Vec<Vec<f64>>,
    #[serde(default)]
    pub aesthetic: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pixel_gradients: Option<WirePixelGradients>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// One line of the protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Message {
    Hello(Hello),
    Score(ScoreRequest),
    Result(ScoreResponse),
}

fn to_line(msg: &Message) -> Vec<u8> {
    let mut line = serde_json::to_vec(msg).expect("protocol messages always serialize");
    line.push(b'\n');
    line
}

pub fn encode_message(msg: &Message) -> Vec<u8> {
    to_line(msg)
}

pub fn decode_message(line: &[u8]) -> Result<Message, ProtocolError> {
    let trimmed = line.strip_suffix(b"\n").unwrap_or(line);
    let trimmed = trimmed.strip_suffix(b"\r").unwrap_or(trimmed);
    serde_json::from_slice(trimmed).map_err(|e| ProtocolError::Malformed(e.to_string()))
}

pub fn encode_request(req: &ScoreRequest) -> Vec<u8> {
    to_line(&Message::Score(req.clone()))
}

pub fn decode_request(line: &[u8]) -> Result<ScoreRequest, ProtocolError> {
    match decode_message(line)? {
        Message::Score(req) => {
            let expected = req.out_size * req.out_size * req.channels * 4;
            let got = B64.decode(&req.crop).map_err(|e| ProtocolError::Malformed(e.to_string()))?.len();
            if got != expected {
                return Err(ProtocolError::Validation(format!("crop buffer has {got} bytes, expected {expected}")));
            }
            Ok(req)
        }
        other => Err(ProtocolError::Malformed(format!("expected a score request, got {other:?}"))),
    }
}

pub fn encode_response(resp: &ScoreResponse) -> Vec<u8> {
    to_line(&Message::Result(resp.clone()))
}

/// Parses a response line and checks it against the request it answers.
pub fn decode_response(line: &[u8], expected_id: u64) -> Result<ScoreResponse, ProtocolError> {
    let resp = match decode_message(line)? {
        Message::Result(r) => r,
        other => return Err(ProtocolError::Malformed(format!("expected a result, got {other:?}"))),
    };
    if resp.id != expected_id {
        return Err(ProtocolError::Desync { expected: expected_id, got: resp.id });
    }
    if let Some(err) = &resp.error {
        return Err(ProtocolError::Remote(err.clone()));
    }
    validate_response(&resp)?;
    Ok(resp)
}

pub fn validate_response(resp: &ScoreResponse) -> Result<(), ProtocolError> {
    if resp.caption_steps.is_empty() {
        return Err(ProtocolError::Validation("no caption steps".into()));
    }
    for (t, step) in resp.caption_steps.iter().enumerate() {
        let sum: f64 = step.iter().sum();
        if !sum.is_finite() || (sum - 1.0).abs() > DISTRIBUTION_TOL || step.iter().any(|p| *p < 0.0) {
            return Err(ProtocolError::Validation(format!("caption step {t} sums to {sum}")));
        }
    }
    if !resp.aesthetic.is_finite() {
        return Err(ProtocolError::Validation(format!("aesthetic score {}", resp.aesthetic)));
    }
    Ok(())
}

/// Little-endian `f32` base64 encoding of a float buffer.
pub fn encode_f32(values: &[f64]) -> String {
    let bytes: Vec<u8> = values.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
    B64.encode(bytes)
}

pub fn decode_f32(text: &str) -> Result<Vec<f64>, ProtocolError> {
    let bytes = B64.decode(text).map_err(|e| ProtocolError::Malformed(e.to_string()))?;
    if bytes.len() % 4 != 0 {
        return Err(ProtocolError::Malformed(format!("buffer length {} is not a multiple of 4", bytes.len())));
    }
    Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect())
}

/// Decodes the crop carried by a request.
pub fn request_image(req: &ScoreRequest) -> Result<Image, ProtocolError> {
    let data = decode_f32(&req.crop)?;
    Image::new(req.out_size, req.out_size, req.channels, data).map_err(|e| ProtocolError::Validation(e.to_string()))
}
