//! Backends hosted in a child process speaking [`super::protocol`].
//!
//! Every response read is bounded by a deadline; a silent or stalled server
//! surfaces as [`BackendError::Timeout`]. After any transport or framing
//! error the endpoint is poisoned and refuses further calls.

use std::io::{self, Read, Write};
use std::process::{Child, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::{Condvar, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use super::protocol::{self, Response, OP_COMBINE, OP_SEGMENT};
use super::{check_patch, BackendError, Combiner, PatchContext, SegmentationBackend, PROB_TOLERANCE};
use crate::io::{BodyError, RawTensor};
use crate::tensor::{Image, ProbMap, TensorError};

/// `Read` over a channel of byte chunks with a per-call deadline.
struct TimedReader {
    rx: Receiver<io::Result<Vec<u8>>>,
    chunk: Vec<u8>,
    pos: usize,
    deadline: Instant,
}

impl Read for TimedReader {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        if self.pos == self.chunk.len() {
            let wait = self.deadline.saturating_duration_since(Instant::now());
            match self.rx.recv_timeout(wait) {
                Ok(Ok(chunk)) => {
                    self.chunk = chunk;
                    self.pos = 0;
                }
                Ok(Err(e)) => return Err(e),
                Err(RecvTimeoutError::Timeout) => return Err(io::Error::new(io::ErrorKind::TimedOut, "deadline")),
                Err(RecvTimeoutError::Disconnected) => return Ok(0),
            }
        }
        let n = buf.len().min(self.chunk.len() - self.pos);
        buf[..n].copy_from_slice(&self.chunk[self.pos..self.pos + n]);
        self.pos += n;
        Ok(n)
    }
}

/// One serial request/response channel to an external server.
pub struct Endpoint {
    writer: Box<dyn Write + Send>,
    reader: TimedReader,
    child: Option<Child>,
    timeout: Duration,
    poisoned: bool,
}

impl Endpoint {
    /// Spawns `command` and completes the handshake.
    pub fn spawn(command: &[String], timeout: Duration) -> Result<Self, BackendError> {
        let (program, args) = command
            .split_first()
            .ok_or_else(|| BackendError::Failure("empty external command".into()))?;
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| BackendError::Failure(format!("spawning {program}: {e}")))?;
        let stdin = child.stdin.take().expect("stdin is piped");
        let stdout = child.stdout.take().expect("stdout is piped");
        match Self::from_streams(stdout, stdin, timeout) {
            Ok(mut ep) => {
                ep.child = Some(child);
                Ok(ep)
            }
            Err(e) => {
                let _ = child.kill();
                let _ = child.wait();
                Err(e)
            }
        }
    }

    /// Wraps already-connected streams and completes the handshake.
    pub fn from_streams<R, W>(reader: R, writer: W, timeout: Duration) -> Result<Self, BackendError>
    where
        R: Read + Send + 'static,
        W: Write + Send + 'static,
    {
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || pump(reader, tx));
        let mut ep = Self {
            writer: Box::new(writer),
            reader: TimedReader {
                rx,
                chunk: Vec::new(),
                pos: 0,
                deadline: Instant::now(),
            },
            child: None,
            timeout,
            poisoned: false,
        };
        ep.handshake()?;
        Ok(ep)
    }

    fn handshake(&mut self) -> Result<(), BackendError> {
        self.reader.deadline = Instant::now() + self.timeout;
        let mut hs = [0u8; 8];
        self.reader.read_exact(&mut hs).map_err(|e| self.transport(e))?;
        if &hs[..4] != protocol::HANDSHAKE_MAGIC {
            self.poisoned = true;
            return Err(BackendError::Protocol(format!("bad handshake magic {:?}", &hs[..4])));
        }
        let version = u32::from_le_bytes([hs[4], hs[5], hs[6], hs[7]]);
        if version != protocol::VERSION {
            self.poisoned = true;
            return Err(BackendError::Protocol(format!("unsupported protocol version {version}")));
        }
        Ok(())
    }

    /// Sends one request and waits for its response tensor.
    pub fn call(&mut self, opcode: u8, tensors: &[&RawTensor]) -> Result<RawTensor, BackendError> {
        if self.poisoned {
            return Err(BackendError::Protocol("endpoint is unusable after an earlier failure".into()));
        }
        let frame = protocol::encode_request(opcode, tensors);
        if let Err(e) = self.writer.write_all(&frame).and_then(|_| self.writer.flush()) {
            self.poisoned = true;
            return Err(BackendError::Protocol(format!("writing request: {e}")));
        }
        self.reader.deadline = Instant::now() + self.timeout;
        match protocol::read_response(&mut self.reader) {
            Ok(Response::Ok(t)) => Ok(t),
            Ok(Response::Err { status, message }) => Err(BackendError::Server { status, message }),
            Err(BodyError::Io(e)) => Err(self.transport(e)),
            Err(BodyError::Format(m)) => {
                self.poisoned = true;
                Err(BackendError::Protocol(m))
            }
        }
    }

    fn transport(&mut self, e: io::Error) -> BackendError {
        self.poisoned = true;
        match e.kind() {
            io::ErrorKind::TimedOut => BackendError::Timeout(self.timeout),
            io::ErrorKind::UnexpectedEof => BackendError::Protocol("server closed the stream mid-frame".into()),
            _ => BackendError::Protocol(e.to_string()),
        }
    }
}

impl Drop for Endpoint {
    fn drop(&mut self) {
        if let Some(mut child) = self.child.take() {
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}

fn pump<R: Read>(mut reader: R, tx: mpsc::Sender<io::Result<Vec<u8>>>) {
    let mut buf = vec![0u8; 1 << 16];
    loop {
        match reader.read(&mut buf) {
            Ok(0) => return,
            Ok(n) => {
                if tx.send(Ok(buf[..n].to_vec())).is_err() {
                    return;
                }
            }
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => {
                let _ = tx.send(Err(e));
                return;
            }
        }
    }
}

/// A set of endpoints handed out one caller at a time. One endpoint
/// serializes all calls; one per worker lets workers run concurrently.
pub struct EndpointPool {
    idle: Mutex<Vec<Endpoint>>,
    ready: Condvar,
}

impl EndpointPool {
    pub fn new(endpoints: Vec<Endpoint>) -> Self {
        assert!(!endpoints.is_empty(), "endpoint pool needs at least one endpoint");
        Self {
            idle: Mutex::new(endpoints),
            ready: Condvar::new(),
        }
    }

    pub fn spawn(command: &[String], count: usize, timeout: Duration) -> Result<Self, BackendError> {
        let eps = (0..count.max(1))
            .map(|_| Endpoint::spawn(command, timeout))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self::new(eps))
    }

    pub fn call(&self, opcode: u8, tensors: &[&RawTensor]) -> Result<RawTensor, BackendError> {
        let mut ep = {
            let mut idle = self.idle.lock().unwrap_or_else(|p| p.into_inner());
            loop {
                if let Some(ep) = idle.pop() {
                    break ep;
                }
                idle = self.ready.wait(idle).unwrap_or_else(|p| p.into_inner());
            }
        };
        let out = ep.call(opcode, tensors);
        self.idle.lock().unwrap_or_else(|p| p.into_inner()).push(ep);
        self.ready.notify_one();
        out
    }
}

/// Checks a response against the expected dims and the probability
/// contract. Already-normalized payloads are kept bit-exact; others are
/// renormalized.
fn accept_probabilities(t: RawTensor, expected: (usize, usize, usize)) -> Result<ProbMap, BackendError> {
    let want = [expected.0 as u32, expected.1 as u32, expected.2 as u32];
    if t.dims != want {
        return Err(BackendError::Protocol(format!(
            "response dims {:?}, expected {:?}",
            t.dims, want
        )));
    }
    let m = ProbMap::new(expected.0, expected.1, expected.2, t.data)
        .map_err(|e| BackendError::Protocol(format!("response values: {e}")))?;
    if m.validate(PROB_TOLERANCE).is_ok() {
        return Ok(m);
    }
    m.normalize_prob().map_err(|e| match e {
        TensorError::ZeroSumPixel { .. } => BackendError::Protocol(format!("response values: {e}")),
        other => other.into(),
    })
}

pub struct ExternalBackend {
    pool: EndpointPool,
    classes: usize,
}

impl ExternalBackend {
    pub fn new(pool: EndpointPool, classes: usize) -> Self {
        Self { pool, classes }
    }
}

impl SegmentationBackend for ExternalBackend {
    fn classes(&self) -> usize {
        self.classes
    }

    fn segment(&self, patch: &Image, ctx: &PatchContext<'_>) -> Result<ProbMap, BackendError> {
        check_patch(patch, ctx)?;
        let t = self.pool.call(OP_SEGMENT, &[&RawTensor::from(patch)])?;
        let (h, w) = ctx.plan.proc_size();
        accept_probabilities(t, (h, w, self.classes))
    }
}

pub struct ExternalCombiner {
    pool: EndpointPool,
}

impl ExternalCombiner {
    pub fn new(pool: EndpointPool) -> Self {
        Self { pool }
    }
}

impl Combiner for ExternalCombiner {
    fn combine(&self, y: &ProbMap, o: &ProbMap) -> Result<ProbMap, BackendError> {
        if y.dims() != o.dims() {
            return Err(BackendError::DimMismatch(y.dims(), o.dims()));
        }
        let t = self.pool.call(OP_COMBINE, &[&RawTensor::from(y), &RawTensor::from(o)])?;
        accept_probabilities(t, y.dims())
    }
}
