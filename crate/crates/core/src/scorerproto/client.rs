use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpStream;
use std::process::{Child, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use super::{
    decode_f32, decode_message, decode_response, encode_f32, encode_message, encode_request, Hello, Message,
    ProtocolError, ScoreRequest, ScoreResponse, DEFAULT_TIMEOUT, PROTOCOL_NAME, PROTOCOL_VERSION,
};
use crate::imagecore::Image;
use crate::objective::{PixelGradients, Scorer, ScorerError, ScorerOutput, Vocabulary};

/// Where an external scorer lives.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Endpoint {
    /// Program and arguments, spoken to over stdin/stdout.
    Command(Vec<String>),
    /// `host:port`.
    Tcp(String),
}

impl Endpoint {
    /// Parses `cmd:<program> [args...]` or `tcp:<host>:<port>`. Command
    /// arguments are split on whitespace; no shell quoting is applied.
    pub fn parse(spec: &str) -> Result<Self, ProtocolError> {
        if let Some(cmd) = spec.strip_prefix("cmd:") {
            let argv: Vec<String> = cmd.split_whitespace().map(str::to_owned).collect();
            if argv.is_empty() {
                return Err(ProtocolError::Malformed("empty scorer command".into()));
            }
            Ok(Endpoint::Command(argv))
        } else if let Some(addr) = spec.strip_prefix("tcp:") {
            if !addr.contains(':') {
                return Err(ProtocolError::Malformed(format!("tcp endpoint '{addr}' needs host:port")));
            }
            Ok(Endpoint::Tcp(addr.to_owned()))
        } else {
            Err(ProtocolError::Malformed(format!("unknown scorer endpoint '{spec}' (use cmd:... or tcp:host:port)")))
        }
    }
}

#[derive(Debug, Clone)]
pub struct ConnectOptions {
    pub timeout: Duration,
    /// Ask for pixel gradients when the server offers them.
    pub use_gradients: bool,
}

impl Default for ConnectOptions {
    fn default() -> Self {
        Self { timeout: DEFAULT_TIMEOUT, use_gradients: false }
    }
}

struct Connection {
    writer: Box<dyn Write + Send>,
    lines: Receiver<std::io::Result<Vec<u8>>>,
    last_id: u64,
    poisoned: bool,
    timeout: Duration,
}

impl Connection {
    fn new(reader: Box<dyn Read + Send>, writer: Box<dyn Write + Send>, timeout: Duration) -> Self {
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            let mut reader = BufReader::new(reader);
            loop {
                let mut line = Vec::new();
                match reader.read_until(b'\n', &mut line) {
                    Ok(0) => {
                        let _ = tx.send(Err(std::io::ErrorKind::UnexpectedEof.into()));
                        break;
                    }
                    Ok(_) => {
                        if tx.send(Ok(line)).is_err() {
                            break;
                        }
                    }
                    Err(e) => {
                        let _ = tx.send(Err(e));
                        break;
                    }
                }
            }
        });
        Self { writer, lines: rx, last_id: 0, poisoned: false, timeout }
    }

    fn send(&mut self, line: &[u8]) -> Result<(), ProtocolError> {
        let result = self.writer.write_all(line).and_then(|_| self.writer.flush());
        result.map_err(|e| {
            self.poisoned = true;
            if e.kind() == std::io::ErrorKind::BrokenPipe {
                ProtocolError::Closed
            } else {
                ProtocolError::Io(e)
            }
        })
    }

    fn receive(&mut self) -> Result<Vec<u8>, ProtocolError> {
        match self.lines.recv_timeout(self.timeout) {
            Ok(Ok(line)) => Ok(line),
            Ok(Err(e)) => {
                self.poisoned = true;
                if e.kind() == std::io::ErrorKind::UnexpectedEof {
                    Err(ProtocolError::Closed)
                } else {
                    Err(ProtocolError::Io(e))
                }
            }
            Err(RecvTimeoutError::Timeout) => {
                self.poisoned = true;
                Err(ProtocolError::Timeout(self.timeout))
            }
            Err(RecvTimeoutError::Disconnected) => {
                self.poisoned = true;
                Err(ProtocolError::Closed)
            }
        }
    }

    fn handshake(&mut self, vocab_hash: &str) -> Result<Hello, ProtocolError> {
        let hello = Hello {
            protocol: PROTOCOL_NAME.into(),
            version: PROTOCOL_VERSION,
            vocab_hash: vocab_hash.into(),
            concurrent_safe: None,
            gradients: None,
        };
        self.send(&encode_message(&Message::Hello(hello)))?;
        let line = self.receive()?;
        let reply = match decode_message(&line)? {
            Message::Hello(h) => h,
            other => {
                self.poisoned = true;
                return Err(ProtocolError::Malformed(format!("expected hello, got {other:?}")));
            }
        };
        if reply.protocol != PROTOCOL_NAME || reply.version != PROTOCOL_VERSION {
            self.poisoned = true;
            return Err(ProtocolError::Incompatible(format!(
                "scorer speaks {} v{}, we speak {PROTOCOL_NAME} v{PROTOCOL_VERSION}",
                reply.protocol, reply.version
            )));
        }
        if reply.vocab_hash != vocab_hash {
            self.poisoned = true;
            return Err(ProtocolError::VocabularyMismatch { ours: vocab_hash.into(), theirs: reply.vocab_hash });
        }
        Ok(reply)
    }

    fn request(&mut self, mut req: ScoreRequest) -> Result<ScoreResponse, ProtocolError> {
        if self.poisoned {
            return Err(ProtocolError::Poisoned);
        }
        self.last_id += 1;
        req.id = self.last_id;
        self.send(&encode_request(&req))?;
        let line = self.receive()?;
        decode_response(&line, req.id).inspect_err(|e| {
            if !matches!(e, ProtocolError::Remote(_)) {
                self.poisoned = true;
            }
        })
    }
}

/// Scorer handle over an external process or socket. Requests are serialized
/// through one stop-and-wait connection.
pub struct RemoteScorer {
    conn: Mutex<Connection>,
    vocab: Vocabulary,
    vocab_hash: String,
    concurrent_safe: bool,
    gradients: bool,
    child: Option<Mutex<Child>>,
}

impl RemoteScorer {
    /// Performs the handshake over an already-open byte stream pair.
    pub fn from_streams(
        reader: Box<dyn Read + Send>,
        writer: Box<dyn Write + Send>,
        vocab: Vocabulary,
        opts: &ConnectOptions,
    ) -> Result<Self, ProtocolError> {
        let vocab_hash = vocab.hash();
        let mut conn = Connection::new(reader, writer, opts.timeout);
        let hello = conn.handshake(&vocab_hash)?;
        Ok(Self {
            conn: Mutex::new(conn),
            vocab,
            vocab_hash,
            concurrent_safe: hello.concurrent_safe.unwrap_or(false),
            gradients: opts.use_gradients && hello.gradients.unwrap_or(false),
            child: None,
        })
    }

    /// Id of the most recent request.
    pub fn last_id(&self) -> u64 {
        self.conn.lock().expect("connection lock").last_id
    }

    pub fn is_poisoned(&self) -> bool {
        self.conn.lock().expect("connection lock").poisoned
    }

    fn call(&self, crop: &Image, cotangent: Option<&[f64]>) -> Result<ScoreResponse, ProtocolError> {
        if crop.height() != crop.width() {
            return Err(ProtocolError::Validation(format!("crop must be square, got {}x{}", crop.height(), crop.width())));
        }
        let req = ScoreRequest {
            id: 0,
            out_size: crop.width(),
            channels: crop.channels(),
            crop: encode_f32(crop.data()),
            vocab_hash: self.vocab_hash.clone(),
            want_gradient: cotangent.is_some(),
            cotangent: cotangent.map(encode_f32),
        };
        self.conn.lock().expect("connection lock").request(req)
    }
}

impl Drop for RemoteScorer {
    fn drop(&mut self) {
        if let Some(child) = &self.child {
            let mut child = child.lock().expect("child lock");
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}

impl Scorer for RemoteScorer {
    fn vocabulary(&self) -> &Vocabulary {
        &self.vocab
    }

    fn concurrent_safe(&self) -> bool {
        self.concurrent_safe
    }

    fn supports_gradients(&self) -> bool {
        self.gradients
    }

    fn score(&self, crop: &Image) -> Result<ScorerOutput, ScorerError> {
        let resp = self.call(crop, None)?;
        Ok(ScorerOutput { caption_steps: resp.caption_steps, aesthetic: resp.aesthetic })
    }

    fn pixel_gradients(&self, crop: &Image, cot: &[f64]) -> Result<Option<PixelGradients>, ScorerError> {
        if !self.gradients {
            return Ok(None);
        }
        let resp = self.call(crop, Some(cot))?;
        let Some(wire) = resp.pixel_gradients else {
            return Err(ProtocolError::Validation("gradient requested but none returned".into()).into());
        };
        let caption = decode_f32(&wire.caption)?;
        let aesthetic = decode_f32(&wire.aesthetic)?;
        Ok(Some(PixelGradients { caption, aesthetic }))
    }
}

/// Opens a scorer endpoint and completes the handshake.
pub fn connect_scorer(endpoint: &Endpoint, vocab: Vocabulary, opts: &ConnectOptions) -> Result<RemoteScorer, ProtocolError> {
    match endpoint {
        Endpoint::Command(argv) => {
            let mut child = Command::new(&argv[0])
                .args(&argv[1..])
                .stdin(Stdio::piped())
                .stdout(Stdio::piped())
                .stderr(Stdio::inherit())
                .spawn()?;
            let stdin = child.stdin.take().expect("piped stdin");
            let stdout = child.stdout.take().expect("piped stdout");
            match RemoteScorer::from_streams(Box::new(stdout), Box::new(stdin), vocab, opts) {
                Ok(mut scorer) => {
                    scorer.child = Some(Mutex::new(child));
                    Ok(scorer)
                }
                Err(e) => {
                    let _ = child.kill();
                    let _ = child.wait();
                    Err(e)
                }
            }
        }
        Endpoint::Tcp(addr) => {
            let stream = TcpStream::connect(addr)?;
            stream.set_nodelay(true)?;
            let reader = stream.try_clone()?;
            RemoteScorer::from_streams(Box::new(reader), Box::new(stream), vocab, opts)
        }
    }
}
