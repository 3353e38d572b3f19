use std::io::{BufRead, Write};

use super::fixture::{fixture_aesthetic, fixture_distributions};
use super::{
    decode_message, encode_f32, encode_message, request_image, Hello, Message, ScoreRequest, ScoreResponse,
    WirePixelGradients, PROTOCOL_NAME, PROTOCOL_VERSION,
};
use crate::objective::Vocabulary;

/// What the reference server answers with.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EchoMode {
    /// Uniform caption steps, mean-intensity aesthetic, exact gradients.
    Uniform { steps: usize },
    /// The documented fixture formula; no gradients.
    Fixture { seed: u64 },
}

/// Behaviour of the reference echo scorer.
#[derive(Debug, Clone)]
pub struct EchoOptions {
    pub vocab: Vocabulary,
    pub mode: EchoMode,
    /// After this many score requests, keep reading but never answer again.
    pub stall_after: Option<u64>,
}

impl EchoOptions {
    pub fn new(vocab: Vocabulary) -> Self {
        Self { vocab, mode: EchoMode::Uniform { steps: 2 }, stall_after: None }
    }

    pub fn fixture(vocab: Vocabulary, seed: u64) -> Self {
        Self { vocab, mode: EchoMode::Fixture { seed }, stall_after: None }
    }
}

fn error_result(id: u64, msg: String) -> Message {
    Message::Result(ScoreResponse { id, caption_steps: Vec::new(), aesthetic: 0.0, pixel_gradients: None, error: Some(msg) })
}

fn answer(req: &ScoreRequest, hash: &str, opts: &EchoOptions) -> Message {
    if req.vocab_hash != hash {
        return error_result(req.id, "vocabulary hash mismatch".into());
    }
    let crop = match request_image(req) {
        Ok(c) => c,
        Err(e) => return error_result(req.id, e.to_string()),
    };
    let v = opts.vocab.len();
    let n = crop.data().len();
    let (caption_steps, aesthetic, pixel_gradients) = match opts.mode {
        EchoMode::Uniform { steps } => {
            let mean = crop.data().iter().sum::<f64>() / n as f64;
            let grads = req.want_gradient.then(|| WirePixelGradients {
                caption: encode_f32(&vec![0.0; n]),
                aesthetic: encode_f32(&vec![1.0 / n as f64; n]),
            });
            (vec![vec![1.0 / v as f64; v]; steps], mean, grads)
        }
        EchoMode::Fixture { seed } => {
            if req.want_gradient {
                return error_result(req.id, "fixture mode has no gradients".into());
            }
            (fixture_distributions(&crop, v, seed), fixture_aesthetic(&crop), None)
        }
    };
    Message::Result(ScoreResponse { id: req.id, caption_steps, aesthetic, pixel_gradients, error: None })
}

/// Reference server: answers a `hello` with its own and every `score` with a
/// `result` per [`EchoMode`]. Serves until EOF.
pub fn serve_echo<R: BufRead, W: Write>(mut reader: R, mut writer: W, opts: &EchoOptions) -> std::io::Result<()> {
    let hash = opts.vocab.hash();
    let mut served = 0u64;
    let mut line = Vec::new();
    loop {
        line.clear();
        if reader.read_until(b'\n', &mut line)? == 0 {
            return Ok(());
        }
        let reply = match decode_message(&line) {
            Ok(Message::Hello(_)) => Message::Hello(Hello {
                protocol: PROTOCOL_NAME.into(),
                version: PROTOCOL_VERSION,
                vocab_hash: hash.clone(),
                concurrent_safe: Some(false),
                gradients: Some(matches!(opts.mode, EchoMode::Uniform { .. })),
            }),
            Ok(Message::Score(req)) => {
                if opts.stall_after.is_some_and(|n| served >= n) {
                    continue;
                }
                served += 1;
                answer(&req, &hash, opts)
            }
            Ok(Message::Result(_)) => error_result(0, "unexpected result message from client".into()),
            Err(e) => error_result(0, e.to_string()),
        };
        writer.write_all(&encode_message(&reply))?;
        writer.flush()?;
    }
}
