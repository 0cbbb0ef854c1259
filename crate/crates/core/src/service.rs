//! The provider side over TCP: a CPRV server that classifies incoming frames,
//! and a capture driver that streams a dataset through it.
//!
//! Every message is framed as `"CPRV" | u8 type | u32 length | payload`
//! (little-endian). Types: `0x01` frame, `0x02` result (JSON), `0xFF` error
//! (JSON `{"reason": ...}`). A frame payload is `u8 flags` (bit 0: sanitized),
//! `u16 H, W, C`, `u8 dtype` (`0` = f32), then `C·H·W` little-endian f32
//! pixels, channel-first.

use std::io::{self, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Duration;

use log::{debug, info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, ImageShape};
use crate::error::{Error, Result};
use crate::models::{Classifier, SanitizerModel};
use crate::training::argmax;

pub const CPRV_MAGIC: [u8; 4] = *b"CPRV";
pub const DEFAULT_PORT: u16 = 7787;
pub const DEFAULT_MAX_FRAME_BYTES: u32 = 4 << 20;
const HEADER_LEN: usize = 9;
const FRAME_HEADER_LEN: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MessageType {
    Frame,
    Result,
    Error,
}

impl MessageType {
    pub fn code(self) -> u8 {
        match self {
            MessageType::Frame => 0x01,
            MessageType::Result => 0x02,
            MessageType::Error => 0xFF,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0x01 => Some(MessageType::Frame),
            0x02 => Some(MessageType::Result),
            0xFF => Some(MessageType::Error),
            _ => None,
        }
    }
}

pub fn encode_message(kind: u8, payload: &[u8]) -> Vec<u8> {
    let mut buf = Vec::with_capacity(HEADER_LEN + payload.len());
    buf.extend_from_slice(&CPRV_MAGIC);
    buf.push(kind);
    buf.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    buf.extend_from_slice(payload);
    buf
}

/// Message header: type byte and declared payload length.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Header {
    pub kind: u8,
    pub length: u32,
}

/// `Ok(None)` on a clean end of stream before any header byte.
pub fn read_header<R: Read>(r: &mut R) -> Result<Option<Header>> {
    let mut buf = [0u8; HEADER_LEN];
    let mut filled = 0;
    while filled < HEADER_LEN {
        match r.read(&mut buf[filled..]) {
            Ok(0) if filled == 0 => return Ok(None),
            Ok(0) => return Err(Error::Protocol("connection closed inside a header".into())),
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    if buf[..4] != CPRV_MAGIC {
        return Err(Error::Protocol(format!("bad magic {:02x?}", &buf[..4])));
    }
    Ok(Some(Header {
        kind: buf[4],
        length: u32::from_le_bytes(buf[5..9].try_into().unwrap()),
    }))
}

/// Read one whole message, refusing payloads above `max_bytes`.
pub fn read_message<R: Read>(r: &mut R, max_bytes: u32) -> Result<Option<(u8, Vec<u8>)>> {
    let Some(h) = read_header(r)? else {
        return Ok(None);
    };
    if h.length > max_bytes {
        return Err(Error::Protocol(format!("payload of {} bytes exceeds limit {max_bytes}", h.length)));
    }
    let mut payload = vec![0u8; h.length as usize];
    r.read_exact(&mut payload)?;
    Ok(Some((h.kind, payload)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameMessage {
    pub sanitized: bool,
    pub shape: ImageShape,
    pub pixels: Vec<f32>,
}

impl FrameMessage {
    pub fn new(sanitized: bool, shape: ImageShape, pixels: Vec<f32>) -> Result<Self> {
        let frame = Self {
            sanitized,
            shape,
            pixels,
        };
        frame.validate()?;
        Ok(frame)
    }

    pub fn validate(&self) -> Result<()> {
        let (c, h, w) = self.shape;
        if c == 0 || h == 0 || w == 0 || c > u16::MAX as usize || h > u16::MAX as usize || w > u16::MAX as usize {
            return Err(Error::Protocol(format!("unusable frame shape {:?}", self.shape)));
        }
        if self.pixels.len() != c * h * w {
            return Err(Error::Protocol(format!(
                "frame carries {} pixels, shape needs {}",
                self.pixels.len(),
                c * h * w
            )));
        }
        if let Some(v) = self.pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Protocol(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(())
    }

    pub fn encode_payload(&self) -> Vec<u8> {
        let (c, h, w) = self.shape;
        let mut buf = Vec::with_capacity(FRAME_HEADER_LEN + self.pixels.len() * 4);
        buf.push(self.sanitized as u8);
        for d in [h, w, c] {
            buf.extend_from_slice(&(d as u16).to_le_bytes());
        }
        buf.push(0);
        for v in &self.pixels {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf
    }

    pub fn encode(&self) -> Vec<u8> {
        encode_message(MessageType::Frame.code(), &self.encode_payload())
    }

    pub fn decode_payload(payload: &[u8]) -> Result<Self> {
        if payload.len() < FRAME_HEADER_LEN {
            return Err(Error::Protocol("frame payload shorter than its header".into()));
        }
        let flags = payload[0];
        if flags & !1 != 0 {
            return Err(Error::Protocol(format!("unknown frame flags {flags:#04x}")));
        }
        let dim = |i: usize| u16::from_le_bytes([payload[i], payload[i + 1]]) as usize;
        let (h, w, c) = (dim(1), dim(3), dim(5));
        let dtype = payload[7];
        if dtype != 0 {
            return Err(Error::Protocol(format!("unsupported dtype code {dtype}")));
        }
        let body = &payload[FRAME_HEADER_LEN..];
        if body.len() != c * h * w * 4 {
            return Err(Error::Protocol(format!(
                "pixel payload is {} bytes, shape ({c}, {h}, {w}) needs {}",
                body.len(),
                c * h * w * 4
            )));
        }
        let pixels = body
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        Self::new(flags & 1 == 1, (c, h, w), pixels)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceResult {
    /// `(subject, probability)`, most probable first.
    pub utility_topk: Vec<(usize, f32)>,
    pub privacy_probs: [f32; 2],
    pub sanitized_flag: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ErrorReply {
    reason: String,
}

/// The provider's models. Shared read-only by every connection.
#[derive(Debug, Clone)]
pub struct EntityModels {
    pub utility: Classifier,
    pub privacy: Classifier,
}

impl EntityModels {
    pub fn new(utility: Classifier, privacy: Classifier) -> Result<Self> {
        if utility.input_shape() != privacy.input_shape() {
            return Err(Error::config("utility and privacy classifiers disagree on input shape"));
        }
        Ok(Self { utility, privacy })
    }

    /// The same inference path serves raw and sanitized frames.
    pub fn infer(&self, frame: &FrameMessage, k: usize) -> Result<InferenceResult> {
        if frame.shape != self.utility.input_shape() {
            return Err(Error::Shape {
                expected: self.utility.input_shape(),
                actual: frame.shape,
            });
        }
        let u = self.utility.predict(&frame.pixels)?;
        let p = self.privacy.predict(&frame.pixels)?;
        let mut order: Vec<usize> = (0..u.len()).collect();
        order.sort_by(|&a, &b| u[b].total_cmp(&u[a]).then(a.cmp(&b)));
        Ok(InferenceResult {
            utility_topk: order.into_iter().take(k).map(|i| (i, u[i])).collect(),
            privacy_probs: [p[0], p[1]],
            sanitized_flag: frame.sanitized,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServerConfig {
    pub host: String,
    pub port: u16,
    pub topk: usize,
    pub max_frame_bytes: u32,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            host: "127.0.0.1".into(),
            port: DEFAULT_PORT,
            topk: 3,
            max_frame_bytes: DEFAULT_MAX_FRAME_BYTES,
        }
    }
}

/// A running server. Dropping the handle stops it.
#[derive(Debug)]
pub struct ServerHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Block until the accept loop ends (i.e. forever, unless stopped).
    pub fn join(mut self) {
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }

    pub fn stop(mut self) {
        self.shutdown();
    }

    fn shutdown(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        // wake the blocking accept
        let _ = TcpStream::connect_timeout(&self.addr, Duration::from_millis(200));
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }

    pub fn is_running(&self) -> bool {
        self.thread.as_ref().is_some_and(|t| !t.is_finished())
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.shutdown();
    }
}

/// Bind and start serving in the background, one thread per connection.
pub fn serve(cfg: &ServerConfig, models: Arc<EntityModels>) -> Result<ServerHandle> {
    if cfg.topk == 0 || cfg.topk > models.utility.num_classes {
        return Err(Error::config(format!(
            "topk must be in [1, {}], got {}",
            models.utility.num_classes, cfg.topk
        )));
    }
    let listener = TcpListener::bind((cfg.host.as_str(), cfg.port))
        .map_err(|e| Error::Transport(format!("cannot bind {}:{}: {e}", cfg.host, cfg.port)))?;
    let addr = listener.local_addr()?;
    info!("entity server listening on {addr}");
    let stop = Arc::new(AtomicBool::new(false));
    let (k, max) = (cfg.topk, cfg.max_frame_bytes);
    let stop_flag = Arc::clone(&stop);
    let thread = thread::spawn(move || {
        for conn in listener.incoming() {
            if stop_flag.load(Ordering::SeqCst) {
                break;
            }
            match conn {
                Ok(stream) => {
                    let models = Arc::clone(&models);
                    thread::spawn(move || {
                        let peer = stream.peer_addr().ok();
                        if let Err(e) = handle_connection(stream, &models, k, max) {
                            debug!("connection {peer:?} ended: {e}");
                        }
                    });
                }
                Err(e) => warn!("accept failed: {e}"),
            }
        }
    });
    Ok(ServerHandle {
        addr,
        stop,
        thread: Some(thread),
    })
}

fn send_error<W: Write>(w: &mut W, reason: &str) -> Result<()> {
    let body = serde_json::to_vec(&ErrorReply { reason: reason.into() })?;
    w.write_all(&encode_message(MessageType::Error.code(), &body))?;
    Ok(())
}

fn handle_connection(mut stream: TcpStream, models: &EntityModels, k: usize, max_bytes: u32) -> Result<()> {
    stream.set_nodelay(true)?;
    loop {
        let header = match read_header(&mut stream) {
            Ok(Some(h)) => h,
            Ok(None) => return Ok(()),
            Err(e @ Error::Protocol(_)) => {
                // without a valid magic the stream cannot be re-synchronised
                let _ = send_error(&mut stream, &e.to_string());
                let _ = stream.shutdown(Shutdown::Both);
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        if header.length > max_bytes {
            let reason = format!("payload of {} bytes exceeds limit {max_bytes}", header.length);
            let _ = send_error(&mut stream, &reason);
            let _ = stream.shutdown(Shutdown::Both);
            return Err(Error::Protocol(reason));
        }
        let mut payload = vec![0u8; header.length as usize];
        stream.read_exact(&mut payload)?;
        let reply = match MessageType::from_code(header.kind) {
            Some(MessageType::Frame) => FrameMessage::decode_payload(&payload).and_then(|f| models.infer(&f, k)),
            Some(other) => Err(Error::Protocol(format!("clients may not send {other:?} messages"))),
            None => Err(Error::Protocol(format!("unknown message type {:#04x}", header.kind))),
        };
        match reply {
            Ok(result) => {
                let body = serde_json::to_vec(&result)?;
                stream.write_all(&encode_message(MessageType::Result.code(), &body))?;
            }
            Err(e) => send_error(&mut stream, &e.to_string())?,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub base_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            attempts: 3,
            base_delay_ms: 100,
        }
    }
}

/// A sequential CPRV client.
#[derive(Debug)]
pub struct Client {
    stream: TcpStream,
    max_bytes: u32,
}

impl Client {
    /// Connect, retrying with exponential backoff.
    pub fn connect(addr: impl ToSocketAddrs, retry: &RetryPolicy) -> Result<Self> {
        let addrs: Vec<SocketAddr> = addr
            .to_socket_addrs()
            .map_err(|e| Error::Transport(format!("cannot resolve address: {e}")))?
            .collect();
        let mut last = String::from("no addresses resolved");
        for attempt in 0..retry.attempts.max(1) {
            if attempt > 0 {
                thread::sleep(Duration::from_millis(retry.base_delay_ms << (attempt - 1)));
            }
            match TcpStream::connect(&addrs[..]) {
                Ok(stream) => {
                    stream.set_nodelay(true)?;
                    return Ok(Self {
                        stream,
                        max_bytes: DEFAULT_MAX_FRAME_BYTES,
                    });
                }
                Err(e) => {
                    warn!("connect attempt {} failed: {e}", attempt + 1);
                    last = e.to_string();
                }
            }
        }
        Err(Error::Transport(format!(
            "gave up after {} attempts: {last}",
            retry.attempts.max(1)
        )))
    }

    /// Send one frame; a server-side 0xFF reply surfaces as a protocol error.
    pub fn send_frame(&mut self, frame: &FrameMessage) -> Result<InferenceResult> {
        self.stream.write_all(&frame.encode())?;
        match read_message(&mut self.stream, self.max_bytes)? {
            Some((0x02, body)) => Ok(serde_json::from_slice(&body)?),
            Some((0xFF, body)) => {
                let reply: ErrorReply = serde_json::from_slice(&body)?;
                Err(Error::Protocol(reply.reason))
            }
            Some((kind, _)) => Err(Error::Protocol(format!("unexpected reply type {kind:#04x}"))),
            None => Err(Error::Transport("server closed the connection".into())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptureConfig {
    pub host: String,
    pub port: u16,
    /// Frames to send; `None` streams the whole dataset.
    pub limit: Option<usize>,
    pub retry: RetryPolicy,
    /// Seeds the attribute resampler of stochastic sanitizers.
    pub seed: u64,
}

impl Default for CaptureConfig {
    fn default() -> Self {
        Self {
            host: "127.0.0.1".into(),
            port: DEFAULT_PORT,
            limit: None,
            retry: RetryPolicy::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapturedFrame {
    pub index: usize,
    pub utility_label: usize,
    pub privacy_label: u8,
    pub result: InferenceResult,
}

/// Results gathered so far plus the error that stopped the stream, if any.
#[derive(Debug)]
pub struct CaptureSession {
    pub frames: Vec<CapturedFrame>,
    pub error: Option<Error>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptureSummary {
    pub frames: usize,
    pub privacy_kl: f64,
    pub privacy_accuracy: f64,
    /// `(k, accuracy)` for every k up to the server's top-k length.
    pub topk: Vec<(usize, f64)>,
}

impl CaptureSession {
    pub fn summary(&self, prior: [f64; 2]) -> Option<CaptureSummary> {
        let n = self.frames.len();
        if n == 0 {
            return None;
        }
        let eps = crate::objectives::DEFAULT_EPSILON;
        let privacy_kl = self
            .frames
            .iter()
            .map(|f| {
                prior
                    .iter()
                    .zip(f.result.privacy_probs)
                    .filter(|(p, _)| **p != 0.0)
                    .map(|(&p, q)| p * ((p + eps) / (q as f64 + eps)).ln())
                    .sum::<f64>()
            })
            .sum::<f64>()
            / n as f64;
        let privacy_accuracy = self
            .frames
            .iter()
            .filter(|f| argmax(&f.result.privacy_probs) == f.privacy_label as usize)
            .count() as f64
            / n as f64;
        let depth = self.frames.iter().map(|f| f.result.utility_topk.len()).min().unwrap_or(0);
        let topk = (1..=depth)
            .map(|k| {
                let hits = self
                    .frames
                    .iter()
                    .filter(|f| f.result.utility_topk[..k].iter().any(|(s, _)| *s == f.utility_label))
                    .count();
                (k, hits as f64 / n as f64)
            })
            .collect();
        Some(CaptureSummary {
            frames: n,
            privacy_kl,
            privacy_accuracy,
            topk,
        })
    }
}

/// Stream test samples to the entity, optionally sanitizing each one locally
/// first. A broken connection is re-established under the retry policy; if
/// that fails, the frames received so far are returned with the error.
pub fn simulate_capture(
    test: &Dataset,
    sanitizer: Option<&SanitizerModel>,
    prior: [f64; 2],
    cfg: &CaptureConfig,
) -> CaptureSession {
    let mut frames = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let addr = (cfg.host.as_str(), cfg.port);
    let mut client = match Client::connect(addr, &cfg.retry) {
        Ok(c) => c,
        Err(e) => return CaptureSession { frames, error: Some(e) },
    };
    let n = cfg.limit.map_or(test.len(), |l| l.min(test.len()));
    for index in 0..n {
        let pixels = match sanitizer {
            Some(s) => match s.sanitize_batch(test, &[index], prior, &mut rng) {
                Ok(t) => t.into_vec(),
                Err(e) => return CaptureSession { frames, error: Some(e) },
            },
            None => test.samples[index].image.clone(),
        };
        let frame = match FrameMessage::new(sanitizer.is_some(), test.image_shape, pixels) {
            Ok(f) => f,
            Err(e) => return CaptureSession { frames, error: Some(e) },
        };
        let result = match client.send_frame(&frame) {
            Ok(r) => Ok(r),
            Err(Error::Io(_) | Error::Transport(_)) => {
                warn!("lost connection at frame {index}; reconnecting");
                Client::connect(addr, &cfg.retry).and_then(|c| {
                    client = c;
                    client.send_frame(&frame)
                })
            }
            Err(e) => Err(e),
        };
        match result {
            Ok(result) => frames.push(CapturedFrame {
                index,
                utility_label: test.samples[index].utility_label,
                privacy_label: test.samples[index].privacy_label,
                result,
            }),
            Err(e) => return CaptureSession { frames, error: Some(e) },
        }
    }
    CaptureSession { frames, error: None }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_payload_round_trip_is_bit_exact() {
        let pixels: Vec<f32> = (0..2 * 3 * 4).map(|i| i as f32 / 24.0).collect();
        let f = FrameMessage::new(true, (2, 3, 4), pixels).unwrap();
        let back = FrameMessage::decode_payload(&f.encode_payload()).unwrap();
        assert_eq!(back, f);
        let wire = f.encode();
        assert_eq!(&wire[..4], b"CPRV");
        assert_eq!(wire[4], 0x01);
        assert_eq!(u32::from_le_bytes(wire[5..9].try_into().unwrap()) as usize, wire.len() - 9);
        // H, W, C order on the wire
        assert_eq!(&wire[10..16], &[3, 0, 4, 0, 2, 0]);
    }

    #[test]
    fn malformed_payloads_are_rejected() {
        let good = FrameMessage::new(false, (1, 2, 2), vec![0.5; 4]).unwrap().encode_payload();
        assert!(FrameMessage::decode_payload(&good[..5]).is_err());
        assert!(FrameMessage::decode_payload(&good[..good.len() - 1]).is_err());
        let mut dtype = good.clone();
        dtype[7] = 1;
        assert!(FrameMessage::decode_payload(&dtype).is_err());
        let mut range = good.clone();
        range[8..12].copy_from_slice(&2.0f32.to_le_bytes());
        assert!(FrameMessage::decode_payload(&range).is_err());
        let mut nan = good;
        nan[8..12].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(FrameMessage::decode_payload(&nan).is_err());
    }

    #[test]
    fn header_parsing() {
        let msg = encode_message(0x02, b"{}");
        let mut r = &msg[..];
        assert_eq!(read_message(&mut r, 16).unwrap(), Some((0x02, b"{}".to_vec())));
        assert_eq!(read_message(&mut r, 16).unwrap(), None);
        let mut big = &encode_message(0x01, &[0; 32])[..];
        assert!(read_message(&mut big, 16).is_err());
        let mut bad = &b"XPRV\x01\0\0\0\0"[..];
        assert!(matches!(read_header(&mut bad), Err(Error::Protocol(_))));
    }
}
