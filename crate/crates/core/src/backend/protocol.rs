//! Framed binary protocol spoken with external model processes over stdio.
//!
//! ```text
//! handshake (server -> client): "MGNS" u32le version
//! request  (client -> server):  "MGN1" u8 opcode u8 count tensor*
//! response (server -> client):  u8 status, then tensor if status == 0,
//!                               else u32le length + UTF-8 message
//! tensor:                       u32le ndim, ndim x u32le dim, f32le data
//! ```

use std::io::{self, Read, Write};

use crate::io::{BodyError, RawTensor};

pub const HANDSHAKE_MAGIC: &[u8; 4] = b"MGNS";
pub const REQUEST_MAGIC: &[u8; 4] = b"MGN1";
pub const VERSION: u32 = 1;

pub const OP_SEGMENT: u8 = 1;
pub const OP_COMBINE: u8 = 2;

pub const STATUS_OK: u8 = 0;
pub const STATUS_ERROR: u8 = 1;

/// Upper bound on elements per tensor frame (1 GiB of f32).
pub const MAX_TENSOR_ELEMS: usize = 1 << 28;
const MAX_MESSAGE_LEN: usize = 1 << 20;

pub fn write_handshake<W: Write>(w: &mut W) -> io::Result<()> {
    w.write_all(HANDSHAKE_MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.flush()
}

pub fn encode_request(opcode: u8, tensors: &[&RawTensor]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(REQUEST_MAGIC);
    out.push(opcode);
    out.push(tensors.len() as u8);
    for t in tensors {
        t.write_body(&mut out).expect("writing to a Vec cannot fail");
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub enum Response {
    Ok(RawTensor),
    Err { status: u8, message: String },
}

pub fn write_response<W: Write>(w: &mut W, resp: &Response) -> io::Result<()> {
    let mut buf = Vec::new();
    match resp {
        Response::Ok(t) => {
            buf.push(STATUS_OK);
            t.write_body(&mut buf)?;
        }
        Response::Err { status, message } => {
            buf.push((*status).max(1));
            buf.extend_from_slice(&(message.len() as u32).to_le_bytes());
            buf.extend_from_slice(message.as_bytes());
        }
    }
    w.write_all(&buf)?;
    w.flush()
}

pub fn read_response<R: Read>(r: &mut R) -> Result<Response, BodyError> {
    let mut status = [0u8; 1];
    r.read_exact(&mut status)?;
    if status[0] == STATUS_OK {
        return Ok(Response::Ok(RawTensor::read_body(r, MAX_TENSOR_ELEMS)?));
    }
    let mut len = [0u8; 4];
    r.read_exact(&mut len)?;
    let len = u32::from_le_bytes(len) as usize;
    if len > MAX_MESSAGE_LEN {
        return Err(BodyError::Format(format!("error message of {len} bytes")));
    }
    let mut msg = vec![0u8; len];
    r.read_exact(&mut msg)?;
    let message = String::from_utf8(msg).map_err(|_| BodyError::Format("error message is not UTF-8".into()))?;
    Ok(Response::Err {
        status: status[0],
        message,
    })
}

/// Server-side model hooks.
pub trait Handler {
    fn segment(&mut self, image: RawTensor) -> Result<RawTensor, String>;
    fn combine(&mut self, y: RawTensor, o: RawTensor) -> Result<RawTensor, String>;
}

/// Model-free reference behaviours.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReferenceMode {
    /// Echo the first request tensor.
    Identity,
    /// Combine returns `o`; segment echoes.
    PassthroughO,
}

impl Handler for ReferenceMode {
    fn segment(&mut self, image: RawTensor) -> Result<RawTensor, String> {
        Ok(image)
    }

    fn combine(&mut self, y: RawTensor, o: RawTensor) -> Result<RawTensor, String> {
        match self {
            ReferenceMode::Identity => Ok(y),
            ReferenceMode::PassthroughO => Ok(o),
        }
    }
}

/// Runs the server loop until the client closes the stream. A malformed
/// frame is answered with an error status and ends the session.
pub fn serve<R: Read, W: Write, H: Handler>(mut input: R, mut output: W, handler: &mut H) -> io::Result<()> {
    write_handshake(&mut output)?;
    loop {
        let mut magic = [0u8; 4];
        match read_full_or_eof(&mut input, &mut magic)? {
            0 => return Ok(()),
            4 => {}
            _ => return fail(&mut output, "truncated request header"),
        }
        if &magic != REQUEST_MAGIC {
            return fail(&mut output, &format!("bad request magic {magic:?}"));
        }
        let mut head = [0u8; 2];
        if input.read_exact(&mut head).is_err() {
            return fail(&mut output, "truncated request header");
        }
        let (opcode, count) = (head[0], head[1] as usize);
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            match RawTensor::read_body(&mut input, MAX_TENSOR_ELEMS) {
                Ok(t) => tensors.push(t),
                Err(e) => return fail(&mut output, &format!("bad tensor: {e}")),
            }
        }
        let result = match (opcode, tensors.len()) {
            (OP_SEGMENT, 1) => handler.segment(tensors.pop().expect("one tensor")),
            (OP_COMBINE, 2) => {
                let o = tensors.pop().expect("two tensors");
                let y = tensors.pop().expect("two tensors");
                handler.combine(y, o)
            }
            (op, n) => Err(format!("opcode {op} with {n} tensors is not supported")),
        };
        let resp = match result {
            Ok(t) => Response::Ok(t),
            Err(message) => Response::Err {
                status: STATUS_ERROR,
                message,
            },
        };
        write_response(&mut output, &resp)?;
    }
}

fn fail<W: Write>(w: &mut W, message: &str) -> io::Result<()> {
    write_response(
        w,
        &Response::Err {
            status: STATUS_ERROR,
            message: message.to_string(),
        },
    )
}

/// Fills `buf` or returns the number of bytes read before EOF.
fn read_full_or_eof<R: Read>(r: &mut R, buf: &mut [u8]) -> io::Result<usize> {
    let mut n = 0;
    while n < buf.len() {
        match r.read(&mut buf[n..]) {
            Ok(0) => break,
            Ok(k) => n += k,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(n)
}
