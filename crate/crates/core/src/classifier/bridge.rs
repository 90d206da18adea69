//! Newline-delimited JSON bridge to a classifier living in another process.
//!
//! Images travel as base64 16-bit PNGs: 8-bit sources are carried exactly and
//! masked (real-valued) images are quantized to 1/65535.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use log::{debug, warn};
use serde::{Deserialize, Serialize};

use super::{BlackBox, Confidence, Embedding};
use crate::error::{Error, Result};
use crate::imaging::{decode_png, encode_png16, Image};

pub const BRIDGE_HELLO: &str = "invrise-bridge";
pub const BRIDGE_VERSION: u32 = 1;

const EXCERPT_LEN: usize = 120;

#[derive(Debug, Serialize, Deserialize)]
struct Hello {
    hello: String,
    version: u32,
    embedding_len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Request {
    id: u64,
    op: String,
    png: String,
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct Response {
    id: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    confidence: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    embedding: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

fn excerpt(s: &str) -> String {
    s.chars().take(EXCERPT_LEN).collect()
}

/// Fault injection for exercising client failure paths.
#[derive(Clone, Debug, Default)]
pub struct ServeOptions {
    /// Answer requests that arrive together in reverse order, up to this many at once.
    pub reorder_window: usize,
    /// Exit without answering once this many requests have been answered.
    pub die_after: Option<usize>,
    /// Stop answering (but keep the streams open) after this many requests.
    pub stall_after: Option<usize>,
}

/// Why [`serve_stdio`] returned.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ServeExit {
    InputClosed,
    Died,
}

fn answer(model: &dyn BlackBox, line: &str) -> Response {
    let req: Request = match serde_json::from_str(line) {
        Ok(r) => r,
        Err(e) => {
            return Response {
                error: Some(format!("malformed request: {e}")),
                ..Response::default()
            }
        }
    };
    let mut resp = Response {
        id: req.id,
        ..Response::default()
    };
    let image = B64
        .decode(req.png.as_bytes())
        .map_err(|e| Error::invalid(format!("bad base64: {e}")))
        .and_then(|bytes| decode_png(&bytes));
    let result = image.and_then(|img| match req.op.as_str() {
        "predict" => model.predict(&img).map(|c| resp.confidence = Some(c.value())),
        "embed" => model.embed(&img).map(|e| resp.embedding = Some(e.0)),
        other => Err(Error::invalid(format!("unknown op {other:?}"))),
    });
    if let Err(e) = result {
        resp.error = Some(e.to_string());
    }
    resp
}

/// Serve `model` over a line-oriented stream pair until the input closes.
pub fn serve_stdio<R, W>(model: &dyn BlackBox, input: R, mut output: W, options: &ServeOptions) -> Result<ServeExit>
where
    R: BufRead + Send + 'static,
    W: Write,
{
    let io_err = |e| Error::io("<bridge output>", e);
    let hello = Hello {
        hello: BRIDGE_HELLO.into(),
        version: BRIDGE_VERSION,
        embedding_len: model.embedding_len(),
    };
    writeln!(output, "{}", serde_json::to_string(&hello)?).map_err(io_err)?;
    output.flush().map_err(io_err)?;

    let (tx, rx) = mpsc::channel::<String>();
    thread::spawn(move || {
        for line in input.lines() {
            match line {
                Ok(l) if l.trim().is_empty() => continue,
                Ok(l) => {
                    if tx.send(l).is_err() {
                        break;
                    }
                }
                Err(_) => break,
            }
        }
    });

    let mut answered = 0usize;
    let window = options.reorder_window.max(1);
    while let Ok(first) = rx.recv() {
        let mut lines = vec![first];
        while lines.len() < window {
            match rx.recv_timeout(Duration::from_millis(50)) {
                Ok(l) => lines.push(l),
                Err(_) => break,
            }
        }
        let mut responses = Vec::with_capacity(lines.len());
        for line in &lines {
            if options.die_after.is_some_and(|n| answered >= n) {
                return Ok(ServeExit::Died);
            }
            if options.stall_after.is_some_and(|n| answered >= n) {
                loop {
                    thread::sleep(Duration::from_secs(3600));
                }
            }
            responses.push(answer(model, line));
            answered += 1;
        }
        if window > 1 {
            responses.reverse();
        }
        for r in responses {
            writeln!(output, "{}", serde_json::to_string(&r)?).map_err(io_err)?;
        }
        output.flush().map_err(io_err)?;
    }
    Ok(ServeExit::InputClosed)
}

#[derive(Clone, Debug)]
pub struct BridgeOptions {
    pub timeout: Duration,
}

impl Default for BridgeOptions {
    fn default() -> Self {
        Self {
            timeout: Duration::from_secs(30),
        }
    }
}

enum Incoming {
    Line(String),
    Closed,
}

struct Channel {
    stdin: ChildStdin,
    rx: Receiver<Incoming>,
    next_id: u64,
    failed: Option<String>,
}

/// A [`BlackBox`] whose answers come from a child process speaking the bridge
/// protocol. Calls are serialized; a batch is written in full before any
/// response is read, and responses are matched by id in whatever order they
/// arrive. After the first transport failure every call fails.
pub struct BridgeClient {
    child: Mutex<Child>,
    channel: Mutex<Channel>,
    embedding_len: usize,
    timeout: Duration,
}

impl BridgeClient {
    pub fn spawn(program: &Path, args: &[String], options: BridgeOptions) -> Result<Self> {
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| Error::Bridge(format!("cannot start {}: {e}", program.display())))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                match line {
                    Ok(l) => {
                        if tx.send(Incoming::Line(l)).is_err() {
                            return;
                        }
                    }
                    Err(_) => break,
                }
            }
            let _ = tx.send(Incoming::Closed);
        });
        let mut channel = Channel {
            stdin,
            rx,
            next_id: 0,
            failed: None,
        };
        let first = match Self::receive(&mut channel, options.timeout) {
            Ok(line) => line,
            Err(e) => {
                let _ = child.kill();
                let _ = child.wait();
                return Err(e);
            }
        };
        let hello: Hello = serde_json::from_str(&first).map_err(|e| Error::Protocol {
            message: format!("bad handshake: {e}"),
            excerpt: excerpt(&first),
        })?;
        if hello.hello != BRIDGE_HELLO || hello.version != BRIDGE_VERSION {
            let _ = child.kill();
            return Err(Error::Protocol {
                message: format!("unsupported bridge {} v{}", hello.hello, hello.version),
                excerpt: excerpt(&first),
            });
        }
        debug!("bridge ready, embedding length {}", hello.embedding_len);
        Ok(Self {
            child: Mutex::new(child),
            channel: Mutex::new(channel),
            embedding_len: hello.embedding_len,
            timeout: options.timeout,
        })
    }

    fn receive(channel: &mut Channel, timeout: Duration) -> Result<String> {
        match channel.rx.recv_timeout(timeout) {
            Ok(Incoming::Line(l)) => Ok(l),
            Ok(Incoming::Closed) | Err(RecvTimeoutError::Disconnected) => {
                Err(Error::Bridge("bridge process closed its output".into()))
            }
            Err(RecvTimeoutError::Timeout) => Err(Error::Timeout(timeout)),
        }
    }

    fn exchange(&self, op: &str, images: &[Image]) -> Result<Vec<Response>> {
        let mut ch = self.channel.lock().unwrap_or_else(|p| p.into_inner());
        if let Some(reason) = &ch.failed {
            return Err(Error::Bridge(format!("bridge unusable after earlier failure: {reason}")));
        }
        let result = Self::exchange_locked(&mut ch, op, images, self.timeout);
        if let Err(e) = &result {
            if !matches!(e, Error::Bridge(m) if m.starts_with("remote:")) {
                warn!("bridge failed: {e}");
                ch.failed = Some(e.to_string());
            }
        }
        result
    }

    fn exchange_locked(ch: &mut Channel, op: &str, images: &[Image], timeout: Duration) -> Result<Vec<Response>> {
        let first_id = ch.next_id;
        ch.next_id += images.len() as u64;
        let mut payload = String::new();
        for (i, img) in images.iter().enumerate() {
            let req = Request {
                id: first_id + i as u64,
                op: op.into(),
                png: B64.encode(encode_png16(img)),
            };
            payload.push_str(&serde_json::to_string(&req)?);
            payload.push('\n');
        }
        ch.stdin
            .write_all(payload.as_bytes())
            .and_then(|_| ch.stdin.flush())
            .map_err(|e| Error::Bridge(format!("cannot write to bridge: {e}")))?;

        let mut got: HashMap<u64, Response> = HashMap::with_capacity(images.len());
        while got.len() < images.len() {
            let line = Self::receive(ch, timeout)?;
            let resp: Response = serde_json::from_str(&line).map_err(|e| Error::Protocol {
                message: format!("malformed response: {e}"),
                excerpt: excerpt(&line),
            })?;
            let offset = resp.id.wrapping_sub(first_id);
            if offset >= images.len() as u64 || got.contains_key(&resp.id) {
                return Err(Error::Protocol {
                    message: format!("unexpected response id {}", resp.id),
                    excerpt: excerpt(&line),
                });
            }
            if let Some(err) = &resp.error {
                return Err(Error::Bridge(format!("remote: {err}")));
            }
            got.insert(resp.id, resp);
        }
        Ok((0..images.len() as u64)
            .map(|i| got.remove(&(first_id + i)).expect("all ids collected"))
            .collect())
    }

    fn confidence(resp: Response) -> Result<Confidence> {
        match resp.confidence {
            Some(c) => Confidence::new(c).map_err(|_| Error::Protocol {
                message: "confidence outside [0, 1]".into(),
                excerpt: c.to_string(),
            }),
            None => Err(Error::Protocol {
                message: "response lacks a confidence".into(),
                excerpt: excerpt(&serde_json::to_string(&resp).unwrap_or_default()),
            }),
        }
    }
}

impl BlackBox for BridgeClient {
    fn predict(&self, image: &Image) -> Result<Confidence> {
        let resp = self.exchange("predict", std::slice::from_ref(image))?;
        Self::confidence(resp.into_iter().next().expect("one response"))
    }

    fn embed(&self, image: &Image) -> Result<Embedding> {
        let resp = self.exchange("embed", std::slice::from_ref(image))?;
        let resp = resp.into_iter().next().expect("one response");
        match resp.embedding {
            Some(v) if v.len() == self.embedding_len && v.iter().all(|x| x.is_finite()) => Ok(Embedding(v)),
            _ => Err(Error::Protocol {
                message: format!("expected a finite embedding of length {}", self.embedding_len),
                excerpt: excerpt(&serde_json::to_string(&resp).unwrap_or_default()),
            }),
        }
    }

    fn embedding_len(&self) -> usize {
        self.embedding_len
    }

    fn predict_batch(&self, images: &[Image]) -> Result<Vec<Confidence>> {
        self.exchange("predict", images)?
            .into_iter()
            .map(Self::confidence)
            .collect()
    }
}

impl Drop for BridgeClient {
    fn drop(&mut self) {
        let mut child = self.child.lock().unwrap_or_else(|p| p.into_inner());
        let _ = child.kill();
        let _ = child.wait();
    }
}
