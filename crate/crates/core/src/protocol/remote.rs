//! Client side: an external process or socket acting as a [`RewardOracle`].

use std::fmt;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpStream;
use std::process::{Child, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::thread;
use std::time::Duration;

use crate::augmentation::{AugmentedEmbedding, PromptEmbedding};
use crate::error::{Error, Result};
use crate::rewards::{OracleDims, OracleResult, RewardOracle};

use super::wire::{decode_matrix, encode_matrix, to_line, Request, RequestBody, Response, WireMatrix, WIRE_VERSION};

pub const TIMEOUT_ENV: &str = "IPGO_ORACLE_TIMEOUT_S";
pub const DEFAULT_TIMEOUT_S: u64 = 300;

/// Default backprop truncation forwarded with every evaluate call.
pub const DEFAULT_TRUNCATE_AT: i64 = 2;

/// Reads the timeout from the environment, falling back to the default.
pub fn timeout_from_env() -> Result<Duration> {
    match std::env::var(TIMEOUT_ENV) {
        Ok(s) => s
            .trim()
            .parse::<u64>()
            .ok()
            .filter(|&v| v > 0)
            .map(Duration::from_secs)
            .ok_or_else(|| Error::Config(format!("{TIMEOUT_ENV} must be a positive integer, got {s:?}"))),
        Err(_) => Ok(Duration::from_secs(DEFAULT_TIMEOUT_S)),
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Endpoint {
    /// Spawned process speaking the protocol on stdin/stdout. Arguments are
    /// split on whitespace; no shell is involved.
    Pipe { program: String, args: Vec<String> },
    Tcp(String),
}

impl Endpoint {
    /// Parses `cmd:<program> [args...]` or `tcp:<host>:<port>`, optionally
    /// prefixed with `remote:`.
    pub fn parse(spec: &str) -> Result<Endpoint> {
        let spec = spec.strip_prefix("remote:").unwrap_or(spec);
        if let Some(cmd) = spec.strip_prefix("cmd:") {
            let mut words = cmd.split_whitespace().map(String::from);
            let program = words
                .next()
                .ok_or_else(|| Error::Config("remote:cmd: needs a program".into()))?;
            Ok(Endpoint::Pipe { program, args: words.collect() })
        } else if let Some(addr) = spec.strip_prefix("tcp:") {
            if addr.rsplit_once(':').is_none_or(|(h, p)| h.is_empty() || p.parse::<u16>().is_err()) {
                return Err(Error::Config(format!("remote:tcp: needs host:port, got {addr:?}")));
            }
            Ok(Endpoint::Tcp(addr.to_string()))
        } else {
            Err(Error::Config(format!("unknown remote endpoint {spec:?}; use cmd:… or tcp:host:port")))
        }
    }
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Endpoint::Pipe { program, args } if args.is_empty() => write!(f, "cmd:{program}"),
            Endpoint::Pipe { program, args } => write!(f, "cmd:{program} {}", args.join(" ")),
            Endpoint::Tcp(addr) => write!(f, "tcp:{addr}"),
        }
    }
}

/// Single-flight connection to a remote oracle.
///
/// After a timeout or transport failure the connection is poisoned: a late
/// reply could otherwise be paired with the next request.
pub struct RemoteOracle {
    endpoint: Endpoint,
    writer: Box<dyn Write + Send>,
    replies: Receiver<std::io::Result<String>>,
    child: Option<Child>,
    socket: Option<TcpStream>,
    timeout: Duration,
    next_id: u64,
    dims: OracleDims,
    poisoned: bool,
    pub truncate_at: i64,
}

fn spawn_reader(source: impl Read + Send + 'static) -> Receiver<std::io::Result<String>> {
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        let mut reader = BufReader::new(source);
        loop {
            let mut line = String::new();
            match reader.read_line(&mut line) {
                Ok(0) => break,
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
    rx
}

impl RemoteOracle {
    /// Connects and performs the hello handshake. With `expected_d` set, a
    /// server that serves a different width is rejected.
    pub fn connect(endpoint: Endpoint, expected_d: Option<usize>, timeout: Duration) -> Result<RemoteOracle> {
        let transport = |message: String| Error::Transport { endpoint: endpoint.to_string(), message };
        let (writer, replies, child, socket): (Box<dyn Write + Send>, _, _, _) = match &endpoint {
            Endpoint::Pipe { program, args } => {
                let mut child = Command::new(program)
                    .args(args)
                    .stdin(Stdio::piped())
                    .stdout(Stdio::piped())
                    .stderr(Stdio::inherit())
                    .spawn()
                    .map_err(|e| transport(format!("cannot spawn: {e}")))?;
                let stdin = child.stdin.take().unwrap();
                let stdout = child.stdout.take().unwrap();
                (Box::new(stdin), spawn_reader(stdout), Some(child), None)
            }
            Endpoint::Tcp(addr) => {
                let stream = TcpStream::connect(addr).map_err(|e| transport(format!("cannot connect: {e}")))?;
                let _ = stream.set_nodelay(true);
                let read_half = stream.try_clone().map_err(|e| transport(e.to_string()))?;
                let handle = stream.try_clone().map_err(|e| transport(e.to_string()))?;
                (Box::new(stream), spawn_reader(read_half), None, Some(handle))
            }
        };
        let mut oracle = RemoteOracle {
            endpoint,
            writer,
            replies,
            child,
            socket,
            timeout,
            next_id: 1,
            dims: OracleDims { d: None, max_tokens: None },
            poisoned: false,
            truncate_at: DEFAULT_TRUNCATE_AT,
        };
        let hello = oracle.request(RequestBody::Hello { d: expected_d, version: WIRE_VERSION })?;
        if hello.version != Some(WIRE_VERSION) {
            return Err(Error::Protocol(format!(
                "server speaks version {:?}, client speaks {WIRE_VERSION}",
                hello.version
            )));
        }
        if let (Some(expected), Some(actual)) = (expected_d, hello.d) {
            if expected != actual {
                return Err(Error::Handshake { expected, actual });
            }
        }
        oracle.dims = OracleDims { d: hello.d, max_tokens: hello.max_tokens };
        Ok(oracle)
    }

    pub fn endpoint(&self) -> &Endpoint {
        &self.endpoint
    }

    fn transport(&mut self, message: impl Into<String>) -> Error {
        self.poisoned = true;
        Error::Transport { endpoint: self.endpoint.to_string(), message: message.into() }
    }

    /// Sends one request and waits for its reply. `ok: false` replies come
    /// back as [`Error::Remote`] carrying the server's message verbatim.
    pub fn request(&mut self, body: RequestBody) -> Result<Response> {
        if self.poisoned {
            return Err(self.transport("connection unusable after an earlier failure"));
        }
        let id = self.next_id;
        self.next_id += 1;
        let line = to_line(&Request { id, body })?;
        if let Err(e) = self.writer.write_all(line.as_bytes()).and_then(|_| self.writer.flush()) {
            return Err(self.transport(format!("write failed: {e}")));
        }
        let raw = match self.replies.recv_timeout(self.timeout) {
            Ok(Ok(raw)) => raw,
            Ok(Err(e)) => return Err(self.transport(format!("read failed: {e}"))),
            Err(RecvTimeoutError::Disconnected) => return Err(self.transport("connection closed mid-request")),
            Err(RecvTimeoutError::Timeout) => {
                self.poisoned = true;
                return Err(Error::Timeout(self.timeout.as_secs()));
            }
        };
        let response: Response = match serde_json::from_str(&raw) {
            Ok(r) => r,
            Err(e) => {
                self.poisoned = true;
                return Err(Error::Protocol(format!("malformed response: {e}")));
            }
        };
        if response.id != Some(id) {
            self.poisoned = true;
            return Err(Error::Protocol(format!("response id {:?} does not match request id {id}", response.id)));
        }
        if !response.ok {
            return Err(Error::Remote(response.error.unwrap_or_default()));
        }
        Ok(response)
    }

    /// Asks the server to embed raw prompt text.
    pub fn encode(&mut self, text: &str) -> Result<PromptEmbedding> {
        let r = self.request(RequestBody::Encode { prompt: text.to_string() })?;
        let (Some(d), Some(cols), Some(data)) = (r.d, r.cols, r.data) else {
            return Err(Error::Protocol("encode response lacks d, cols or data".into()));
        };
        PromptEmbedding::new(decode_matrix(&WireMatrix { d, cols, data })?, text)
    }
}

impl RewardOracle for RemoteOracle {
    fn evaluate(&mut self, aug: &AugmentedEmbedding, prompt: &PromptEmbedding) -> Result<OracleResult> {
        let r = self.request(RequestBody::Evaluate {
            emb: encode_matrix(&aug.emb),
            prompt_id: prompt.prompt_id.clone(),
            n_pre: aug.n_pre,
            n_suff: aug.n_suff,
            truncate_at: self.truncate_at,
        })?;
        let reward = r.reward.ok_or_else(|| Error::Protocol("evaluate response lacks reward".into()))?;
        let wire = r.grad.ok_or_else(|| Error::Protocol("evaluate response lacks grad".into()))?;
        if (wire.d, wire.cols) != aug.emb.shape() {
            return Err(Error::Protocol(format!(
                "grad is {}x{}, request was {}x{}",
                wire.d,
                wire.cols,
                aug.emb.rows(),
                aug.emb.cols()
            )));
        }
        if !reward.is_finite() {
            return Err(Error::NonFinite("remote reward"));
        }
        Ok(OracleResult::new(reward, decode_matrix(&wire)?))
    }

    fn describe(&self) -> String {
        format!("remote({})", self.endpoint)
    }

    fn dims(&self) -> OracleDims {
        self.dims
    }
}

impl Drop for RemoteOracle {
    fn drop(&mut self) {
        if let Some(socket) = self.socket.take() {
            // the reader thread holds a clone, so dropping the writer alone would not close it
            let _ = socket.shutdown(std::net::Shutdown::Both);
        }
        if let Some(mut child) = self.child.take() {
            // closing stdin lets a well-behaved server exit on its own
            self.writer = Box::new(std::io::sink());
            for _ in 0..50 {
                if let Ok(Some(_)) = child.try_wait() {
                    return;
                }
                thread::sleep(Duration::from_millis(10));
            }
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}
