use std::io::{pipe, BufRead, BufReader, Cursor, Write};
use std::net::TcpListener;
use std::path::PathBuf;
use std::thread;
use std::time::{Duration, Instant};

use capcrop::objective::ScorerError;
use capcrop::scorerproto::fixture::fixture_distributions;
use capcrop::scorerproto::{
    connect_scorer, decode_message, encode_f32, encode_message, serve_echo, ConnectOptions, EchoOptions, Endpoint, Hello,
    Message, ProtocolError, RemoteScorer, ScoreRequest, ScoreResponse, PROTOCOL_NAME, PROTOCOL_VERSION,
};
use capcrop::{Image, Scorer, Vocabulary};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn vocab() -> Vocabulary {
    Vocabulary::new(["sky", "dog", "cat", "tree"]).unwrap()
}

fn opts(timeout_ms: u64, gradients: bool) -> ConnectOptions {
    ConnectOptions { timeout: Duration::from_millis(timeout_ms), use_gradients: gradients }
}

/// Client connected to `serve` running on a thread over in-process pipes.
fn connect_with<F>(serve: F, vocab: Vocabulary, options: &ConnectOptions) -> Result<RemoteScorer, ProtocolError>
where
    F: FnOnce(BufReader<std::io::PipeReader>, std::io::PipeWriter) + Send + 'static,
{
    let (c2s_r, c2s_w) = pipe().unwrap();
    let (s2c_r, s2c_w) = pipe().unwrap();
    thread::spawn(move || serve(BufReader::new(c2s_r), s2c_w));
    RemoteScorer::from_streams(Box::new(s2c_r), Box::new(c2s_w), vocab, options)
}

fn echo_client(echo: EchoOptions, options: &ConnectOptions) -> RemoteScorer {
    let v = echo.vocab.clone();
    connect_with(move |r, w| serve_echo(r, w, &echo).unwrap(), v, options).unwrap()
}

fn random_crop(rng: &mut impl Rng, size: usize, channels: usize) -> Image {
    Image::from_fn(size, size, channels, |_, _, _| rng.random::<f64>()).unwrap()
}

fn f32_mean(img: &Image) -> f64 {
    img.data().iter().map(|&v| v as f32 as f64).sum::<f64>() / img.data().len() as f64
}

/// Reads the client's hello and answers with `reply`.
fn fake_handshake(reader: &mut impl BufRead, writer: &mut impl Write, reply: Hello) {
    let mut line = Vec::new();
    reader.read_until(b'\n', &mut line).unwrap();
    assert!(matches!(decode_message(&line).unwrap(), Message::Hello(_)));
    writer.write_all(&encode_message(&Message::Hello(reply))).unwrap();
}

fn server_hello(vocab: &Vocabulary) -> Hello {
    Hello {
        protocol: PROTOCOL_NAME.into(),
        version: PROTOCOL_VERSION,
        vocab_hash: vocab.hash(),
        concurrent_safe: Some(false),
        gradients: Some(false),
    }
}

#[test]
fn soak_thousand_requests_without_desync() {
    let scorer = echo_client(EchoOptions::new(vocab()), &opts(5000, false));
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for k in 0..1000u64 {
        let channels = if k % 2 == 0 { 1 } else { 3 };
        let crop = random_crop(&mut rng, 2 + (k as usize % 7), channels);
        let out = scorer.score(&crop).unwrap();
        assert_eq!(out.caption_steps, vec![vec![0.25; 4]; 2]);
        assert!((out.aesthetic - f32_mean(&crop)).abs() < 1e-12);
    }
    assert_eq!(scorer.last_id(), 1000);
    assert!(!scorer.is_poisoned());
}

#[test]
fn gradients_round_trip_when_offered() {
    let scorer = echo_client(EchoOptions::new(vocab()), &opts(5000, true));
    assert!(scorer.supports_gradients());
    let crop = Image::filled(4, 4, 3, 0.5);
    let g = scorer.pixel_gradients(&crop, &[1.0, 0.0, 0.0, 0.0]).unwrap().unwrap();
    assert_eq!(g.caption, vec![0.0; 48]);
    assert!(g.aesthetic.iter().all(|&v| (v - 1.0 / 48.0).abs() < 1e-9));

    let declined = echo_client(EchoOptions::new(vocab()), &opts(5000, false));
    assert!(!declined.supports_gradients());
    assert!(declined.pixel_gradients(&crop, &[1.0, 0.0, 0.0, 0.0]).unwrap().is_none());
}

#[test]
fn stalled_server_times_out_and_poisons() {
    let echo = EchoOptions { stall_after: Some(3), ..EchoOptions::new(vocab()) };
    let scorer = echo_client(echo, &opts(200, false));
    let crop = Image::filled(3, 3, 1, 0.2);
    for _ in 0..3 {
        scorer.score(&crop).unwrap();
    }
    let started = Instant::now();
    let err = scorer.score(&crop).unwrap_err();
    assert!(matches!(err, ScorerError::Protocol(ProtocolError::Timeout(_))), "{err}");
    assert!(started.elapsed() < Duration::from_secs(5));
    assert!(scorer.is_poisoned());
    let again = scorer.score(&crop).unwrap_err();
    assert!(matches!(again, ScorerError::Protocol(ProtocolError::Poisoned)), "{again}");
}

#[test]
fn wrong_response_id_is_desync() {
    let v = vocab();
    let hello = server_hello(&v);
    let scorer = connect_with(
        move |mut r, mut w| {
            fake_handshake(&mut r, &mut w, hello);
            let mut line = Vec::new();
            r.read_until(b'\n', &mut line).unwrap();
            let resp = ScoreResponse {
                id: 99,
                caption_steps: vec![vec![0.25; 4]],
                aesthetic: 0.0,
                pixel_gradients: None,
                error: None,
            };
            w.write_all(&encode_message(&Message::Result(resp))).unwrap();
            // keep the stream open until the client hangs up
            let _ = r.read_until(b'\n', &mut line);
        },
        v,
        &opts(2000, false),
    )
    .unwrap();
    let err = scorer.score(&Image::filled(2, 2, 1, 0.0)).unwrap_err();
    assert!(matches!(err, ScorerError::Protocol(ProtocolError::Desync { expected: 1, got: 99 })), "{err}");
    assert!(scorer.is_poisoned());
}

#[test]
fn server_exit_is_closed_not_hang() {
    let v = vocab();
    let hello = server_hello(&v);
    let scorer = connect_with(move |mut r, mut w| fake_handshake(&mut r, &mut w, hello), v, &opts(10_000, false)).unwrap();
    let started = Instant::now();
    let err = scorer.score(&Image::filled(2, 2, 1, 0.0)).unwrap_err();
    assert!(
        matches!(err, ScorerError::Protocol(ProtocolError::Closed | ProtocolError::Io(_))),
        "{err}"
    );
    assert!(started.elapsed() < Duration::from_secs(5));
}

#[test]
fn remote_error_fails_only_that_request() {
    let v = vocab();
    let hello = server_hello(&v);
    let scorer = connect_with(
        move |mut r, mut w| {
            fake_handshake(&mut r, &mut w, hello);
            let mut line = Vec::new();
            for id in 1.. {
                line.clear();
                if r.read_until(b'\n', &mut line).unwrap() == 0 {
                    return;
                }
                let error = (id == 1).then(|| "model overloaded".to_string());
                let resp = ScoreResponse { id, caption_steps: vec![vec![0.25; 4]], aesthetic: 1.0, pixel_gradients: None, error };
                w.write_all(&encode_message(&Message::Result(resp))).unwrap();
            }
        },
        v,
        &opts(2000, false),
    )
    .unwrap();
    let crop = Image::filled(2, 2, 1, 0.0);
    let err = scorer.score(&crop).unwrap_err();
    assert!(err.to_string().contains("model overloaded"), "{err}");
    assert!(!scorer.is_poisoned());
    assert_eq!(scorer.score(&crop).unwrap().aesthetic, 1.0);
}

#[test]
fn handshake_rejects_mismatches() {
    let other = Vocabulary::new(["sky", "dog"]).unwrap();
    let echo = EchoOptions::new(other);
    let err = connect_with(move |r, w| serve_echo(r, w, &echo).unwrap(), vocab(), &opts(2000, false)).err().unwrap();
    assert!(matches!(err, ProtocolError::VocabularyMismatch { .. }), "{err}");

    let v = vocab();
    let hello = Hello { version: PROTOCOL_VERSION + 1, ..server_hello(&v) };
    let err = connect_with(move |mut r, mut w| fake_handshake(&mut r, &mut w, hello), v, &opts(2000, false))
        .err()
        .unwrap();
    assert!(matches!(err, ProtocolError::Incompatible(_)), "{err}");
}

#[test]
fn invalid_distribution_is_rejected() {
    let v = vocab();
    let hello = server_hello(&v);
    let scorer = connect_with(
        move |mut r, mut w| {
            fake_handshake(&mut r, &mut w, hello);
            let mut line = Vec::new();
            r.read_until(b'\n', &mut line).unwrap();
            let resp = ScoreResponse { id: 1, caption_steps: vec![vec![0.5; 4]], aesthetic: 0.0, pixel_gradients: None, error: None };
            w.write_all(&encode_message(&Message::Result(resp))).unwrap();
            let _ = r.read_until(b'\n', &mut line);
        },
        v,
        &opts(2000, false),
    )
    .unwrap();
    let err = scorer.score(&Image::filled(2, 2, 1, 0.0)).unwrap_err();
    assert!(matches!(err, ScorerError::Protocol(ProtocolError::Validation(_))), "{err}");
}

#[test]
fn tcp_endpoint_serves_requests() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let echo = EchoOptions::new(vocab());
    thread::spawn(move || {
        let (stream, _) = listener.accept().unwrap();
        let reader = BufReader::new(stream.try_clone().unwrap());
        serve_echo(reader, stream, &echo).unwrap();
    });
    let endpoint = Endpoint::parse(&format!("tcp:{addr}")).unwrap();
    let scorer = connect_scorer(&endpoint, vocab(), &opts(5000, false)).unwrap();
    let crop = Image::filled(5, 5, 3, 0.75);
    for _ in 0..50 {
        assert_eq!(scorer.score(&crop).unwrap().aesthetic, 0.75);
    }
    assert_eq!(scorer.last_id(), 50);
}

#[test]
fn endpoint_parsing() {
    assert_eq!(
        Endpoint::parse("cmd:python3 -m scorer --mode fixture").unwrap(),
        Endpoint::Command(vec!["python3".into(), "-m".into(), "scorer".into(), "--mode".into(), "fixture".into()])
    );
    assert_eq!(Endpoint::parse("tcp:localhost:9000").unwrap(), Endpoint::Tcp("localhost:9000".into()));
    assert!(Endpoint::parse("cmd:").is_err());
    assert!(Endpoint::parse("tcp:localhost").is_err());
    assert!(Endpoint::parse("http://x").is_err());
}

fn docs_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../docs").join(name)
}

fn transcript_requests(v: &Vocabulary) -> Vec<Vec<u8>> {
    let hash = v.hash();
    let hello = Hello { protocol: PROTOCOL_NAME.into(), version: PROTOCOL_VERSION, vocab_hash: hash.clone(), concurrent_safe: None, gradients: None };
    let mut lines = vec![encode_message(&Message::Hello(hello))];
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let crops = vec![
        Image::filled(4, 4, 1, 0.5),
        Image::from_fn(8, 8, 3, |i, j, c| ((i * 8 + j) * 3 + c) as f64 / 191.0).unwrap(),
        random_crop(&mut rng, 5, 1),
        Image::from_fn(6, 6, 3, |i, j, c| if (i + j + c) % 2 == 0 { 1.0 } else { 0.0 }).unwrap(),
        random_crop(&mut rng, 7, 3),
        Image::filled(3, 3, 3, 0.0),
    ];
    let mut id = 0;
    for crop in &crops {
        id += 1;
        let req = ScoreRequest {
            id,
            out_size: crop.width(),
            channels: crop.channels(),
            crop: encode_f32(crop.data()),
            vocab_hash: hash.clone(),
            want_gradient: false,
            cotangent: None,
        };
        lines.push(encode_message(&Message::Score(req)));
    }
    let last = crops.last().unwrap();
    let base = ScoreRequest {
        id: 0,
        out_size: last.width(),
        channels: last.channels(),
        crop: encode_f32(last.data()),
        vocab_hash: hash.clone(),
        want_gradient: false,
        cotangent: None,
    };
    lines.push(encode_message(&Message::Score(ScoreRequest { id: id + 1, vocab_hash: "0".repeat(64), ..base.clone() })));
    lines.push(encode_message(&Message::Score(ScoreRequest {
        id: id + 2,
        want_gradient: true,
        cotangent: Some(encode_f32(&vec![1.0; v.len()])),
        ..base
    })));
    lines
}

fn replay(client: &[Vec<u8>], v: &Vocabulary) -> Vec<Vec<u8>> {
    let input: Vec<u8> = client.concat();
    let mut output = Vec::new();
    serve_echo(Cursor::new(input), &mut output, &EchoOptions::fixture(v.clone(), 0)).unwrap();
    output.split_inclusive(|b| *b == b'\n').map(<[u8]>::to_vec).collect()
}

#[test]
fn golden_transcript() {
    let v = Vocabulary::load(docs_path("fixture_vocab.txt")).unwrap();
    let path = docs_path("golden_transcript.ndjson");
    if std::env::var_os("CAPCROP_WRITE_TRANSCRIPT").is_some() {
        let client = transcript_requests(&v);
        let server = replay(&client, &v);
        let text: Vec<u8> = client.iter().zip(&server).flat_map(|(c, s)| [c.clone(), s.clone()].concat()).collect();
        std::fs::write(&path, text).unwrap();
    }
    let bytes = std::fs::read(&path).unwrap();
    let lines: Vec<Vec<u8>> = bytes.split_inclusive(|b| *b == b'\n').map(<[u8]>::to_vec).collect();
    assert!(lines.len() >= 4 && lines.len().is_multiple_of(2));
    let client: Vec<Vec<u8>> = lines.iter().step_by(2).cloned().collect();
    let expected: Vec<Vec<u8>> = lines.iter().skip(1).step_by(2).cloned().collect();
    assert_eq!(client, transcript_requests(&v), "client side of the transcript drifted");
    assert_eq!(replay(&client, &v), expected, "server replay is not byte-identical");

    // the fixture formula, checked against the parsed transcript
    for (c, s) in client.iter().zip(&expected).skip(1) {
        let (Message::Score(req), Message::Result(resp)) = (decode_message(c).unwrap(), decode_message(s).unwrap()) else {
            panic!("unexpected message kinds");
        };
        assert_eq!(req.id, resp.id);
        if req.want_gradient || req.vocab_hash != v.hash() {
            assert!(resp.error.is_some());
            continue;
        }
        let crop = capcrop::scorerproto::request_image(&req).unwrap();
        let steps = fixture_distributions(&crop, v.len(), 0);
        assert_eq!(steps, resp.caption_steps);
        for step in &resp.caption_steps {
            assert!((step.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn fixture_mode_gray_crop_aesthetic_is_gray_level() {
    let v = vocab();
    let echo = EchoOptions::fixture(v.clone(), 7);
    let scorer = connect_with(move |r, w| serve_echo(r, w, &echo).unwrap(), v, &opts(5000, true)).unwrap();
    assert!(!scorer.supports_gradients());
    let out = scorer.score(&Image::filled(6, 6, 3, 0.25)).unwrap();
    assert_eq!(out.aesthetic, 0.25);
    assert_eq!(out.caption_steps.len(), 3);
}
