use std::io::{Read, Write};
use std::net::{Shutdown, TcpListener, TcpStream};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use cpriv_core::data::{generate_dataset, Dataset, DatasetSpec};
use cpriv_core::models::{Classifier, SanitizerModel, UnetS};
use cpriv_core::service::{
    encode_message, read_message, serve, simulate_capture, CaptureConfig, Client, EntityModels, FrameMessage,
    RetryPolicy, ServerConfig, DEFAULT_MAX_FRAME_BYTES,
};
use cpriv_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_test_set(n: usize) -> Dataset {
    let spec = DatasetSpec {
        train_size: 16,
        test_size: n,
        ..DatasetSpec::default()
    };
    generate_dataset(&spec).unwrap().1
}

fn models(shape: (usize, usize, usize)) -> Arc<EntityModels> {
    Arc::new(EntityModels::new(Classifier::new(shape, 16, 1), Classifier::new(shape, 2, 2)).unwrap())
}

fn start(models: Arc<EntityModels>, topk: usize) -> cpriv_core::service::ServerHandle {
    let cfg = ServerConfig {
        port: 0,
        topk,
        ..ServerConfig::default()
    };
    serve(&cfg, models).unwrap()
}

fn connect(addr: std::net::SocketAddr) -> TcpStream {
    let s = TcpStream::connect(addr).unwrap();
    s.set_read_timeout(Some(Duration::from_secs(10))).unwrap();
    s
}

#[test]
fn served_results_match_offline_inference() {
    let test = small_test_set(100);
    let m = models(test.image_shape);
    let server = start(Arc::clone(&m), 3);
    let mut client = Client::connect(server.local_addr(), &RetryPolicy::default()).unwrap();
    for (i, s) in test.samples.iter().enumerate() {
        let frame = FrameMessage::new(i % 2 == 0, test.image_shape, s.image.clone()).unwrap();
        let online = client.send_frame(&frame).unwrap();
        let offline = m.infer(&frame, 3).unwrap();
        assert_eq!(online.sanitized_flag, i % 2 == 0);
        assert_eq!(online.utility_topk.len(), 3);
        for ((su, pu), (so, po)) in online.utility_topk.iter().zip(&offline.utility_topk) {
            assert_eq!(su, so);
            assert!((pu - po).abs() < 1e-5);
        }
        for (a, b) in online.privacy_probs.iter().zip(offline.privacy_probs) {
            assert!((a - b).abs() < 1e-5);
        }
    }
}

#[test]
fn inference_is_deterministic_and_leaves_models_untouched() {
    let test = small_test_set(16);
    let m = models(test.image_shape);
    let hashes = (m.utility.param_hash(), m.privacy.param_hash());
    let server = start(Arc::clone(&m), 5);
    let frame = FrameMessage::new(false, test.image_shape, test.samples[3].image.clone()).unwrap();
    let mut a = Client::connect(server.local_addr(), &RetryPolicy::default()).unwrap();
    let mut b = Client::connect(server.local_addr(), &RetryPolicy::default()).unwrap();
    let first = a.send_frame(&frame).unwrap();
    for _ in 0..5 {
        assert_eq!(a.send_frame(&frame).unwrap(), first);
        assert_eq!(b.send_frame(&frame).unwrap(), first);
    }
    assert_eq!((m.utility.param_hash(), m.privacy.param_hash()), hashes);
}

#[test]
fn all_zero_frame_is_accepted() {
    let shape = (3, 32, 32);
    let server = start(models(shape), 3);
    let mut client = Client::connect(server.local_addr(), &RetryPolicy::default()).unwrap();
    let r = client
        .send_frame(&FrameMessage::new(false, shape, vec![0.0; 3 * 32 * 32]).unwrap())
        .unwrap();
    let sum: f32 = r.privacy_probs.iter().sum();
    assert!((sum - 1.0).abs() < 1e-5);
    assert!(r.utility_topk.windows(2).all(|w| w[0].1 >= w[1].1));
}

#[test]
fn recoverable_errors_keep_the_connection_open() {
    let shape = (3, 32, 32);
    let server = start(models(shape), 3);
    let mut s = connect(server.local_addr());
    let good = FrameMessage::new(false, shape, vec![0.5; 3 * 32 * 32]).unwrap();

    // wrong shape, out-of-range pixel, unknown type: each gets an error reply
    let wrong_shape = FrameMessage::new(false, (3, 16, 16), vec![0.5; 3 * 16 * 16]).unwrap().encode();
    let mut out_of_range = good.encode_payload();
    out_of_range[8..12].copy_from_slice(&1.5f32.to_le_bytes());
    for msg in [wrong_shape, encode_message(0x01, &out_of_range), encode_message(0x42, b"hello")] {
        s.write_all(&msg).unwrap();
        let (kind, body) = read_message(&mut s, DEFAULT_MAX_FRAME_BYTES).unwrap().unwrap();
        assert_eq!(kind, 0xFF);
        let v: serde_json::Value = serde_json::from_slice(&body).unwrap();
        assert!(v["reason"].as_str().is_some_and(|r| !r.is_empty()));
    }
    s.write_all(&good.encode()).unwrap();
    let (kind, _) = read_message(&mut s, DEFAULT_MAX_FRAME_BYTES).unwrap().unwrap();
    assert_eq!(kind, 0x02);
}

#[test]
fn bad_magic_and_oversized_frames_close_the_connection() {
    let server = start(models((3, 32, 32)), 3);
    let mut bad_magic = b"XPRV".to_vec();
    bad_magic.extend_from_slice(&[1, 0, 0, 0, 0]);
    let oversized = {
        let mut m = b"CPRV".to_vec();
        m.push(0x01);
        m.extend_from_slice(&(DEFAULT_MAX_FRAME_BYTES + 1).to_le_bytes());
        m
    };
    for msg in [bad_magic, oversized] {
        let mut s = connect(server.local_addr());
        s.write_all(&msg).unwrap();
        let (kind, _) = read_message(&mut s, DEFAULT_MAX_FRAME_BYTES).unwrap().unwrap();
        assert_eq!(kind, 0xFF);
        let mut rest = Vec::new();
        let _ = s.read_to_end(&mut rest);
        assert!(rest.is_empty());
    }
    assert!(server.is_running());
}

fn fuzz_message(rng: &mut ChaCha8Rng, valid_payload: &[u8]) -> Vec<u8> {
    match rng.gen_range(0..4) {
        // arbitrary bytes, almost surely a bad magic
        0 => (0..rng.gen_range(9..64)).map(|_| rng.gen()).collect(),
        // well-framed message of a random type with random content
        1 => {
            let body: Vec<u8> = (0..rng.gen_range(0..256)).map(|_| rng.gen()).collect();
            encode_message(rng.gen(), &body)
        }
        // a valid frame with a few corrupted bytes
        2 => {
            let mut body = valid_payload.to_vec();
            for _ in 0..rng.gen_range(1..8) {
                let i = rng.gen_range(0..body.len());
                body[i] = rng.gen();
            }
            encode_message(0x01, &body)
        }
        // a truncated or padded frame payload
        _ => {
            let mut body = valid_payload.to_vec();
            if rng.gen_bool(0.5) {
                body.truncate(rng.gen_range(0..body.len()));
            } else {
                body.extend((0..rng.gen_range(1..16)).map(|_| rng.gen::<u8>()));
            }
            encode_message(0x01, &body)
        }
    }
}

#[test]
fn fuzzed_messages_never_take_the_server_down() {
    let shape = (3, 32, 32);
    let server = start(models(shape), 3);
    let valid = FrameMessage::new(false, shape, vec![0.25; 3 * 32 * 32]).unwrap().encode_payload();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut stream = connect(server.local_addr());
    let mut replies = [0usize; 2];
    for _ in 0..1000 {
        let msg = fuzz_message(&mut rng, &valid);
        if stream.write_all(&msg).is_err() {
            stream = connect(server.local_addr());
            stream.write_all(&msg).unwrap();
        }
        match read_message(&mut stream, DEFAULT_MAX_FRAME_BYTES) {
            Ok(Some((0x02, _))) => replies[0] += 1,
            Ok(Some((0xFF, _))) => replies[1] += 1,
            other => panic!("unexpected reply {other:?}"),
        }
        if msg[..4] != *b"CPRV" {
            // the server hung up after reporting the bad magic
            let _ = stream.shutdown(Shutdown::Both);
            stream = connect(server.local_addr());
        }
    }
    assert_eq!(replies[0] + replies[1], 1000);
    assert!(replies[1] > 0);
    assert!(server.is_running());
    let mut client = Client::connect(server.local_addr(), &RetryPolicy::default()).unwrap();
    client.send_frame(&FrameMessage::decode_payload(&valid).unwrap()).unwrap();
}

#[test]
fn capture_streams_raw_and_sanitized_frames() {
    let test = small_test_set(32);
    let m = models(test.image_shape);
    let server = start(Arc::clone(&m), 3);
    let cfg = CaptureConfig {
        port: server.local_addr().port(),
        limit: Some(20),
        ..CaptureConfig::default()
    };
    let prior = DatasetSpec::default().prior;
    let raw = simulate_capture(&test, None, prior, &cfg);
    assert!(raw.error.is_none());
    assert_eq!(raw.frames.len(), 20);
    assert!(raw.frames.iter().all(|f| !f.result.sanitized_flag));

    let san = SanitizerModel::deterministic(UnetS::new(test.image_shape, 4));
    let session = simulate_capture(&test, Some(&san), prior, &cfg);
    assert!(session.error.is_none());
    assert!(session.frames.iter().all(|f| f.result.sanitized_flag));
    let summary = session.summary(prior).unwrap();
    assert_eq!(summary.frames, 20);
    assert_eq!(summary.topk.len(), 3);
}

/// A server that answers `n` frames and then disappears for good.
fn flaky_server(models: Arc<EntityModels>, n: usize) -> u16 {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let port = listener.local_addr().unwrap().port();
    thread::spawn(move || {
        let (mut s, _) = listener.accept().unwrap();
        for _ in 0..n {
            let (_, payload) = read_message(&mut s, DEFAULT_MAX_FRAME_BYTES).unwrap().unwrap();
            let frame = FrameMessage::decode_payload(&payload).unwrap();
            let body = serde_json::to_vec(&models.infer(&frame, 3).unwrap()).unwrap();
            s.write_all(&encode_message(0x02, &body)).unwrap();
        }
        drop(listener);
        let _ = s.shutdown(Shutdown::Both);
    });
    port
}

#[test]
fn server_loss_surfaces_a_transport_error_with_partial_results() {
    let test = small_test_set(32);
    let port = flaky_server(models(test.image_shape), 5);
    let cfg = CaptureConfig {
        port,
        retry: RetryPolicy {
            attempts: 3,
            base_delay_ms: 10,
        },
        ..CaptureConfig::default()
    };
    let session = simulate_capture(&test, None, DatasetSpec::default().prior, &cfg);
    assert_eq!(session.frames.len(), 5);
    match session.error {
        Some(Error::Transport(msg)) => assert!(msg.contains("3 attempts"), "{msg}"),
        other => panic!("expected a transport error, got {other:?}"),
    }
}

#[test]
fn connecting_to_nothing_fails_after_retries() {
    let port = {
        let l = TcpListener::bind("127.0.0.1:0").unwrap();
        l.local_addr().unwrap().port()
    };
    let policy = RetryPolicy {
        attempts: 3,
        base_delay_ms: 5,
    };
    assert!(matches!(Client::connect(("127.0.0.1", port), &policy), Err(Error::Transport(_))));
}
