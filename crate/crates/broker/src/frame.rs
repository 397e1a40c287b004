//! Wire frames: `u32 length (big-endian) ‖ u8 type ‖ payload`, where the
//! length counts the type byte plus the payload.

use ecbr_core::Reject;
use thiserror::Error;
use tokio::io::{AsyncRead, AsyncReadExt, AsyncWrite, AsyncWriteExt};

/// Largest accepted value of the length field.
pub const MAX_FRAME_LEN: u32 = 1 << 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FrameType {
    Hello,
    Subscribe,
    Unsubscribe,
    Publish,
    Deliver,
    Ack,
    Error,
    Provision,
}

impl FrameType {
    pub fn code(self) -> u8 {
        match self {
            FrameType::Hello => 0,
            FrameType::Subscribe => 1,
            FrameType::Unsubscribe => 2,
            FrameType::Publish => 3,
            FrameType::Deliver => 4,
            FrameType::Ack => 5,
            FrameType::Error => 6,
            FrameType::Provision => 7,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        Some(match c {
            0 => FrameType::Hello,
            1 => FrameType::Subscribe,
            2 => FrameType::Unsubscribe,
            3 => FrameType::Publish,
            4 => FrameType::Deliver,
            5 => FrameType::Ack,
            6 => FrameType::Error,
            7 => FrameType::Provision,
            _ => return None,
        })
    }
}

/// Reason carried by an ERROR frame. The connection is closed after it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ErrorCode {
    FrameTooLarge,
    UnknownFrameType,
    UnexpectedFrame,
    HandshakeFailed,
    UnknownMeasurement,
    EnclaveUnavailable,
    EmptyFrame,
}

impl ErrorCode {
    pub const ALL: [ErrorCode; 7] = [
        ErrorCode::FrameTooLarge,
        ErrorCode::UnknownFrameType,
        ErrorCode::UnexpectedFrame,
        ErrorCode::HandshakeFailed,
        ErrorCode::UnknownMeasurement,
        ErrorCode::EnclaveUnavailable,
        ErrorCode::EmptyFrame,
    ];

    pub fn code(self) -> u8 {
        Self::ALL.iter().position(|&c| c == self).unwrap() as u8 + 1
    }

    pub fn from_code(c: u8) -> Option<Self> {
        Self::ALL.get((c as usize).checked_sub(1)?).copied()
    }
}

impl std::fmt::Display for ErrorCode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        std::fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Error)]
pub enum FrameError {
    #[error("frame length {0} exceeds the limit")]
    TooLarge(u32),
    #[error("zero-length frame")]
    Empty,
    #[error("unknown frame type {0}")]
    UnknownType(u8),
    #[error("connection closed")]
    Closed,
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl FrameError {
    /// The ERROR reason a server answers this failure with, if any.
    pub fn error_code(&self) -> Option<ErrorCode> {
        match self {
            FrameError::TooLarge(_) => Some(ErrorCode::FrameTooLarge),
            FrameError::Empty => Some(ErrorCode::EmptyFrame),
            FrameError::UnknownType(_) => Some(ErrorCode::UnknownFrameType),
            FrameError::Closed | FrameError::Io(_) => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Frame {
    pub kind: FrameType,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn new(kind: FrameType, payload: impl Into<Vec<u8>>) -> Self {
        Self { kind, payload: payload.into() }
    }

    pub fn error(code: ErrorCode) -> Self {
        Self::new(FrameType::Error, vec![code.code()])
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(5 + self.payload.len());
        out.extend_from_slice(&(self.payload.len() as u32 + 1).to_be_bytes());
        out.push(self.kind.code());
        out.extend_from_slice(&self.payload);
        out
    }

    /// The reason of an ERROR frame.
    pub fn error_code(&self) -> Option<ErrorCode> {
        match (self.kind, self.payload.as_slice()) {
            (FrameType::Error, [c]) => ErrorCode::from_code(*c),
            _ => None,
        }
    }
}

/// Reads one frame. An oversized length is reported before any payload byte
/// is consumed.
pub async fn read_frame<R: AsyncRead + Unpin>(r: &mut R) -> Result<Frame, FrameError> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len).await {
        Ok(_) => {}
        Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Err(FrameError::Closed),
        Err(e) => return Err(e.into()),
    }
    let len = u32::from_be_bytes(len);
    if len == 0 {
        return Err(FrameError::Empty);
    }
    if len > MAX_FRAME_LEN {
        return Err(FrameError::TooLarge(len));
    }
    let mut body = vec![0u8; len as usize];
    r.read_exact(&mut body).await.map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => FrameError::Closed,
        _ => e.into(),
    })?;
    let kind = FrameType::from_code(body[0]).ok_or(FrameError::UnknownType(body[0]))?;
    body.remove(0);
    Ok(Frame { kind, payload: body })
}

pub async fn write_frame<W: AsyncWrite + Unpin>(w: &mut W, frame: &Frame) -> Result<(), FrameError> {
    w.write_all(&frame.encode()).await?;
    w.flush().await?;
    Ok(())
}

/// ACK payload: `u8 status ‖ u8 reason ‖ 16B id ‖ u32 matched`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Ack {
    /// `None` when accepted, else the enclave's rejection.
    pub rejected: Option<Reject>,
    /// Filter id, publication id or session key id, depending on the request.
    pub id: [u8; 16],
    /// Subscribers matched by a publication (delivered or not).
    pub matched: u32,
}

impl Ack {
    pub const LEN: usize = 22;

    pub fn accepted(id: [u8; 16], matched: u32) -> Self {
        Self { rejected: None, id, matched }
    }

    pub fn rejected(r: Reject) -> Self {
        Self { rejected: Some(r), id: [0; 16], matched: 0 }
    }

    pub fn is_accepted(&self) -> bool {
        self.rejected.is_none()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(Self::LEN);
        out.push(u8::from(self.rejected.is_some()));
        out.push(self.rejected.map_or(0, Reject::code));
        out.extend_from_slice(&self.id);
        out.extend_from_slice(&self.matched.to_be_bytes());
        out
    }

    pub fn decode(b: &[u8]) -> Option<Self> {
        if b.len() != Self::LEN {
            return None;
        }
        let rejected = match (b[0], b[1]) {
            (0, 0) => None,
            (1, r) => Some(Reject::from_code(r)?),
            _ => return None,
        };
        Some(Self {
            rejected,
            id: b[2..18].try_into().unwrap(),
            matched: u32::from_be_bytes(b[18..22].try_into().unwrap()),
        })
    }
}
