//! The untrusted side of the broker: TCP framing, connection handling,
//! delivery fan-out and the client library used by the CLIs.

pub mod client;
pub mod frame;
pub mod keydir;
pub mod server;

pub use client::{request_scf, Capture, Client, ClientError, Received};
pub use frame::{Ack, ErrorCode, Frame, FrameError, FrameType, MAX_FRAME_LEN};
pub use server::{Server, ServerConfig, ServerError};
