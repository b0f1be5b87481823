//! Framed classical channel between the parties.
//!
//! Wire layout of a frame: 4-byte big-endian length `L` (type byte plus
//! payload), 1 type byte, `L - 1` payload bytes. Integers in payloads are
//! fixed-width big-endian; bitstrings are a `u64` bit count followed by the
//! bits packed MSB-first.

use std::io::{self, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::mpsc::{channel, Receiver, Sender};
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::bits::BitString;
use crate::pulse::Basis;

pub const PROTOCOL_VERSION: u16 = 1;

/// Largest accepted frame length field; larger frames are rejected before
/// any allocation.
pub const MAX_FRAME_LEN: u32 = 1 << 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum MessageType {
    Hello = 0x01,
    DetectionAnnounce = 0x02,
    SiftAccept = 0x03,
    SampleIndices = 0x04,
    SampleBits = 0x05,
    QberReport = 0x06,
    PaParams = 0x07,
    KeyConfirm = 0x08,
    Abort = 0x09,
}

impl TryFrom<u8> for MessageType {
    type Error = FrameError;

    fn try_from(v: u8) -> Result<Self, FrameError> {
        Ok(match v {
            0x01 => Self::Hello,
            0x02 => Self::DetectionAnnounce,
            0x03 => Self::SiftAccept,
            0x04 => Self::SampleIndices,
            0x05 => Self::SampleBits,
            0x06 => Self::QberReport,
            0x07 => Self::PaParams,
            0x08 => Self::KeyConfirm,
            0x09 => Self::Abort,
            _ => return Err(FrameError::Protocol(format!("unknown message type 0x{v:02x}"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FrameError {
    #[error("incomplete frame")]
    NeedMoreData,
    #[error("protocol error: {0}")]
    Protocol(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LinkError {
    #[error("link down: {0}")]
    LinkDown(String),
    #[error("protocol error: {0}")]
    Protocol(String),
}

impl From<FrameError> for LinkError {
    fn from(e: FrameError) -> Self {
        match e {
            FrameError::NeedMoreData => LinkError::LinkDown("stream ended inside a frame".into()),
            FrameError::Protocol(m) => LinkError::Protocol(m),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub msg_type: MessageType,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn new(msg_type: MessageType, payload: Vec<u8>) -> Self {
        Self { msg_type, payload }
    }

    /// # Panics
    /// If the payload does not fit the 32-bit length field.
    pub fn encode(&self) -> Vec<u8> {
        let len = u32::try_from(self.payload.len() + 1).expect("payload too large for a frame");
        let mut out = Vec::with_capacity(self.payload.len() + 5);
        out.extend_from_slice(&len.to_be_bytes());
        out.push(self.msg_type as u8);
        out.extend_from_slice(&self.payload);
        out
    }

    /// Decodes one frame from the front of `buf`, returning it with the
    /// number of bytes consumed.
    pub fn decode(buf: &[u8]) -> Result<(Frame, usize), FrameError> {
        let Some(header) = buf.get(..4) else {
            return Err(FrameError::NeedMoreData);
        };
        let len = u32::from_be_bytes(header.try_into().expect("4 bytes"));
        check_length(len)?;
        let Some(&type_byte) = buf.get(4) else {
            return Err(FrameError::NeedMoreData);
        };
        let msg_type = MessageType::try_from(type_byte)?;
        let end = 4 + len as usize;
        if buf.len() < end {
            return Err(FrameError::NeedMoreData);
        }
        Ok((Frame::new(msg_type, buf[5..end].to_vec()), end))
    }
}

fn check_length(len: u32) -> Result<(), FrameError> {
    if len == 0 {
        return Err(FrameError::Protocol("zero frame length".into()));
    }
    if len > MAX_FRAME_LEN {
        return Err(FrameError::Protocol(format!("frame length {len} exceeds limit {MAX_FRAME_LEN}")));
    }
    Ok(())
}

/// Reason attached to an ABORT frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum AbortCode {
    DigestMismatch = 1,
    Protocol = 2,
    InsufficientSample = 3,
    QberTooHigh = 4,
    NoSecretKey = 5,
    ConfirmationFailed = 6,
}

impl TryFrom<u8> for AbortCode {
    type Error = FrameError;

    fn try_from(v: u8) -> Result<Self, FrameError> {
        Ok(match v {
            1 => Self::DigestMismatch,
            2 => Self::Protocol,
            3 => Self::InsufficientSample,
            4 => Self::QberTooHigh,
            5 => Self::NoSecretKey,
            6 => Self::ConfirmationFailed,
            _ => return Err(FrameError::Protocol(format!("unknown abort code {v}"))),
        })
    }
}

/// Typed payloads of all message types.
#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    Hello { version: u16, digest: [u8; 32] },
    /// Detected pulse indices with the arm that fired; outcomes stay private.
    DetectionAnnounce(Vec<(u64, Basis)>),
    SiftAccept(Vec<u64>),
    SampleIndices(Vec<u64>),
    SampleBits(BitString),
    QberReport { sampled: u64, mismatches: u64, estimate: f64 },
    PaParams { input_len: u64, output_len: u64, seed: BitString },
    KeyConfirm { seed: BitString, hash: u64 },
    Abort { code: AbortCode, reason: String },
}

impl Message {
    pub fn msg_type(&self) -> MessageType {
        match self {
            Message::Hello { .. } => MessageType::Hello,
            Message::DetectionAnnounce(_) => MessageType::DetectionAnnounce,
            Message::SiftAccept(_) => MessageType::SiftAccept,
            Message::SampleIndices(_) => MessageType::SampleIndices,
            Message::SampleBits(_) => MessageType::SampleBits,
            Message::QberReport { .. } => MessageType::QberReport,
            Message::PaParams { .. } => MessageType::PaParams,
            Message::KeyConfirm { .. } => MessageType::KeyConfirm,
            Message::Abort { .. } => MessageType::Abort,
        }
    }

    pub fn to_frame(&self) -> Frame {
        let mut p = Vec::new();
        match self {
            Message::Hello { version, digest } => {
                p.extend_from_slice(&version.to_be_bytes());
                p.extend_from_slice(digest);
            }
            Message::DetectionAnnounce(entries) => {
                for (index, arm) in entries {
                    p.extend_from_slice(&index.to_be_bytes());
                    p.push(arm.index() as u8);
                }
            }
            Message::SiftAccept(indices) | Message::SampleIndices(indices) => {
                for index in indices {
                    p.extend_from_slice(&index.to_be_bytes());
                }
            }
            Message::SampleBits(bits) => put_bits(&mut p, bits),
            Message::QberReport {
                sampled,
                mismatches,
                estimate,
            } => {
                p.extend_from_slice(&sampled.to_be_bytes());
                p.extend_from_slice(&mismatches.to_be_bytes());
                p.extend_from_slice(&estimate.to_bits().to_be_bytes());
            }
            Message::PaParams {
                input_len,
                output_len,
                seed,
            } => {
                p.extend_from_slice(&input_len.to_be_bytes());
                p.extend_from_slice(&output_len.to_be_bytes());
                put_bits(&mut p, seed);
            }
            Message::KeyConfirm { seed, hash } => {
                put_bits(&mut p, seed);
                p.extend_from_slice(&hash.to_be_bytes());
            }
            Message::Abort { code, reason } => {
                p.push(*code as u8);
                p.extend_from_slice(reason.as_bytes());
            }
        }
        Frame::new(self.msg_type(), p)
    }

    pub fn from_frame(frame: &Frame) -> Result<Message, FrameError> {
        let mut r = Reader(&frame.payload);
        let msg = match frame.msg_type {
            MessageType::Hello => {
                let version = u16::from_be_bytes(r.take(2)?.try_into().expect("2 bytes"));
                let digest = r.take(32)?.try_into().expect("32 bytes");
                Message::Hello { version, digest }
            }
            MessageType::DetectionAnnounce => {
                if r.0.len() % 9 != 0 {
                    return Err(malformed("announcement entries are 9 bytes"));
                }
                let mut entries = Vec::with_capacity(r.0.len() / 9);
                while !r.0.is_empty() {
                    let index = r.u64()?;
                    let arm = Basis::from_index(usize::from(r.take(1)?[0])).ok_or_else(|| malformed("unknown arm"))?;
                    entries.push((index, arm));
                }
                check_sorted(entries.iter().map(|e| e.0))?;
                Message::DetectionAnnounce(entries)
            }
            MessageType::SiftAccept | MessageType::SampleIndices => {
                if r.0.len() % 8 != 0 {
                    return Err(malformed("index lists are 8-byte entries"));
                }
                let mut indices = Vec::with_capacity(r.0.len() / 8);
                while !r.0.is_empty() {
                    indices.push(r.u64()?);
                }
                check_sorted(indices.iter().copied())?;
                if frame.msg_type == MessageType::SiftAccept {
                    Message::SiftAccept(indices)
                } else {
                    Message::SampleIndices(indices)
                }
            }
            MessageType::SampleBits => Message::SampleBits(r.bits()?),
            MessageType::QberReport => Message::QberReport {
                sampled: r.u64()?,
                mismatches: r.u64()?,
                estimate: f64::from_bits(r.u64()?),
            },
            MessageType::PaParams => Message::PaParams {
                input_len: r.u64()?,
                output_len: r.u64()?,
                seed: r.bits()?,
            },
            MessageType::KeyConfirm => Message::KeyConfirm {
                seed: r.bits()?,
                hash: r.u64()?,
            },
            MessageType::Abort => {
                let code = AbortCode::try_from(r.take(1)?[0])?;
                let reason = String::from_utf8(std::mem::take(&mut r.0).to_vec())
                    .map_err(|_| malformed("abort reason is not UTF-8"))?;
                Message::Abort { code, reason }
            }
        };
        if !r.0.is_empty() {
            return Err(malformed("trailing payload bytes"));
        }
        Ok(msg)
    }
}

fn malformed(what: &str) -> FrameError {
    FrameError::Protocol(format!("malformed payload: {what}"))
}

fn check_sorted(mut it: impl Iterator<Item = u64>) -> Result<(), FrameError> {
    let Some(mut prev) = it.next() else {
        return Ok(());
    };
    for x in it {
        if x == prev {
            return Err(FrameError::Protocol(format!("duplicate index {x}")));
        }
        if x < prev {
            return Err(FrameError::Protocol("index list not sorted ascending".into()));
        }
        prev = x;
    }
    Ok(())
}

fn put_bits(out: &mut Vec<u8>, bits: &BitString) {
    out.extend_from_slice(&(bits.len() as u64).to_be_bytes());
    out.extend_from_slice(&bits.to_bytes());
}

struct Reader<'a>(&'a [u8]);

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], FrameError> {
        if self.0.len() < n {
            return Err(malformed("payload truncated"));
        }
        let (head, tail) = self.0.split_at(n);
        self.0 = tail;
        Ok(head)
    }

    fn u64(&mut self) -> Result<u64, FrameError> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn bits(&mut self) -> Result<BitString, FrameError> {
        let len = self.u64()?;
        let len = usize::try_from(len).map_err(|_| malformed("bitstring too long"))?;
        if len.div_ceil(8) > self.0.len() {
            return Err(malformed("bitstring truncated"));
        }
        let bytes = self.take(len.div_ceil(8))?;
        BitString::from_bytes(bytes, len).ok_or_else(|| malformed("bitstring padding bits set"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Sent,
    Received,
}

/// A party's end of the classical channel. Every frame passing through is
/// recorded in the transcript.
pub struct Link<S> {
    stream: S,
    transcript: Vec<(Direction, Frame)>,
}

impl<S: Read + Write> Link<S> {
    pub fn new(stream: S) -> Self {
        Self {
            stream,
            transcript: Vec::new(),
        }
    }

    pub fn send(&mut self, msg: &Message) -> Result<(), LinkError> {
        let frame = msg.to_frame();
        self.stream
            .write_all(&frame.encode())
            .and_then(|()| self.stream.flush())
            .map_err(link_down)?;
        self.transcript.push((Direction::Sent, frame));
        Ok(())
    }

    pub fn recv_frame(&mut self) -> Result<Frame, LinkError> {
        let mut header = [0u8; 5];
        self.stream.read_exact(&mut header).map_err(link_down)?;
        let len = u32::from_be_bytes(header[..4].try_into().expect("4 bytes"));
        check_length(len)?;
        let msg_type = MessageType::try_from(header[4])?;
        let mut payload = vec![0u8; len as usize - 1];
        self.stream.read_exact(&mut payload).map_err(link_down)?;
        let frame = Frame::new(msg_type, payload);
        self.transcript.push((Direction::Received, frame.clone()));
        Ok(frame)
    }

    pub fn recv(&mut self) -> Result<Message, LinkError> {
        let frame = self.recv_frame()?;
        Ok(Message::from_frame(&frame)?)
    }

    pub fn transcript(&self) -> &[(Direction, Frame)] {
        &self.transcript
    }

    pub fn into_inner(self) -> S {
        self.stream
    }
}

fn link_down(e: io::Error) -> LinkError {
    match e.kind() {
        io::ErrorKind::UnexpectedEof => LinkError::LinkDown("peer closed the connection".into()),
        _ => LinkError::LinkDown(e.to_string()),
    }
}

/// One end of an in-process byte pipe. Dropping an end closes the stream
/// for its peer.
pub struct ChannelStream {
    tx: Sender<Vec<u8>>,
    rx: Receiver<Vec<u8>>,
    pending: Vec<u8>,
    pos: usize,
}

impl Read for ChannelStream {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        if buf.is_empty() {
            return Ok(0);
        }
        while self.pos == self.pending.len() {
            match self.rx.recv() {
                Ok(chunk) => {
                    self.pending = chunk;
                    self.pos = 0;
                }
                Err(_) => return Ok(0),
            }
        }
        let n = buf.len().min(self.pending.len() - self.pos);
        buf[..n].copy_from_slice(&self.pending[self.pos..self.pos + n]);
        self.pos += n;
        Ok(n)
    }
}

impl Write for ChannelStream {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        if buf.is_empty() {
            return Ok(0);
        }
        self.tx
            .send(buf.to_vec())
            .map_err(|_| io::Error::new(io::ErrorKind::BrokenPipe, "peer closed the connection"))?;
        Ok(buf.len())
    }

    fn flush(&mut self) -> io::Result<()> {
        Ok(())
    }
}

/// Connected pair of in-process streams.
pub fn inprocess_pair() -> (ChannelStream, ChannelStream) {
    let (tx_a, rx_b) = channel();
    let (tx_b, rx_a) = channel();
    let end = |tx, rx| ChannelStream {
        tx,
        rx,
        pending: Vec::new(),
        pos: 0,
    };
    (end(tx_a, rx_a), end(tx_b, rx_b))
}

pub fn open_inprocess() -> (Link<ChannelStream>, Link<ChannelStream>) {
    let (a, b) = inprocess_pair();
    (Link::new(a), Link::new(b))
}

/// Listening side of a socket link.
pub struct SocketListener {
    listener: TcpListener,
}

impl SocketListener {
    pub fn bind(addr: impl ToSocketAddrs) -> Result<Self, LinkError> {
        let listener = TcpListener::bind(addr).map_err(link_down)?;
        Ok(Self { listener })
    }

    pub fn local_addr(&self) -> Result<SocketAddr, LinkError> {
        self.listener.local_addr().map_err(link_down)
    }

    /// Waits for one peer.
    pub fn accept(&self) -> Result<Link<TcpStream>, LinkError> {
        let (stream, _) = self.listener.accept().map_err(link_down)?;
        stream.set_nodelay(true).map_err(link_down)?;
        Ok(Link::new(stream))
    }
}

/// Connects to a listening peer, retrying refused connections until
/// `timeout` has passed.
pub fn connect_socket(addr: impl ToSocketAddrs, timeout: Duration) -> Result<Link<TcpStream>, LinkError> {
    let addrs: Vec<SocketAddr> = addr.to_socket_addrs().map_err(link_down)?.collect();
    if addrs.is_empty() {
        return Err(LinkError::LinkDown("address resolved to nothing".into()));
    }
    let deadline = Instant::now() + timeout;
    loop {
        let mut last = None;
        for a in &addrs {
            match TcpStream::connect(a) {
                Ok(stream) => {
                    stream.set_nodelay(true).map_err(link_down)?;
                    return Ok(Link::new(stream));
                }
                Err(e) => last = Some(e),
            }
        }
        if Instant::now() >= deadline {
            return Err(link_down(last.expect("at least one address")));
        }
        std::thread::sleep(Duration::from_millis(50));
    }
}
