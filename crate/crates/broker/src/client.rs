//! Client side of the wire protocol. One request is in flight at a time;
//! deliveries that arrive while waiting for an ACK are buffered.

use std::collections::VecDeque;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use ecbr_core::enclave::SubscriptionOp;
use ecbr_core::filter::{decode_publication, encode_publication};
use ecbr_core::provisioning::{open_scf, HandshakeError, Initiator};
use ecbr_core::{
    Context, EnvelopeError, FilterId, Identity, KeyId, KeyRing, Measurement, Publication, Reject, SenderId,
    StartupConfig,
};
use rand::rngs::StdRng;
use rand::SeedableRng;
use thiserror::Error;
use tokio::net::{TcpStream, ToSocketAddrs};

use crate::frame::{read_frame, write_frame, Ack, ErrorCode, Frame, FrameError, FrameType};

/// Shared buffer receiving every byte a client sends or receives.
pub type Capture = Arc<Mutex<Vec<u8>>>;

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("frame: {0}")]
    Frame(#[from] FrameError),
    #[error("handshake: {0}")]
    Handshake(#[from] HandshakeError),
    #[error("envelope: {0}")]
    Envelope(#[from] EnvelopeError),
    #[error("broker closed the connection: {0}")]
    Broker(ErrorCode),
    #[error("protocol violation: {0}")]
    Protocol(&'static str),
    #[error("delivery does not decode: {0}")]
    Encoding(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// A delivery as it arrived and as it opened.
#[derive(Clone, Debug)]
pub struct Received {
    pub envelope: Vec<u8>,
    pub publication: Publication,
}

pub struct Client {
    stream: TcpStream,
    ring: KeyRing,
    key: KeyId,
    pending: VecDeque<Received>,
    capture: Option<Capture>,
}

impl Client {
    /// Connects and establishes a session. With `expect` set, a broker whose
    /// enclave reports another measurement is refused.
    pub async fn connect(
        addr: impl ToSocketAddrs,
        identity: Identity,
        expect: Option<Measurement>,
    ) -> Result<Self, ClientError> {
        Self::connect_captured(addr, identity, expect, None).await
    }

    pub async fn connect_captured(
        addr: impl ToSocketAddrs,
        identity: Identity,
        expect: Option<Measurement>,
        capture: Option<Capture>,
    ) -> Result<Self, ClientError> {
        let stream = TcpStream::connect(addr).await?;
        stream.set_nodelay(true)?;
        let mut rng = StdRng::from_entropy();
        let mut init = Initiator::new(identity.clone(), &mut rng);
        if let Some(m) = expect {
            init = init.expecting(m);
        }
        let mut c = Self { stream, ring: KeyRing::new(identity), key: KeyId::default(), pending: VecDeque::new(), capture };
        c.send(&Frame::new(FrameType::Hello, init.hello())).await?;
        let reply = c.expect(FrameType::Provision).await?;
        let (finished, session) = init.finish(&reply, &mut c.ring)?;
        c.send(&Frame::new(FrameType::Provision, finished)).await?;
        let ack = c.await_ack().await?;
        if !ack.is_accepted() || ack.id != session.key_id.0 {
            return Err(ClientError::Protocol("session not confirmed"));
        }
        c.key = session.key_id;
        Ok(c)
    }

    pub fn sender_id(&self) -> SenderId {
        self.ring.sender_id()
    }

    pub fn key_id(&self) -> KeyId {
        self.key
    }

    /// Whether `envelope` opens under this client's session key.
    pub fn can_open(&self, envelope: &[u8]) -> bool {
        self.ring.open_bytes(envelope, Context::Pub).is_ok()
    }

    pub async fn subscribe(&mut self, filter_id: FilterId, filter: &str) -> Result<Ack, ClientError> {
        let op = SubscriptionOp::Subscribe { filter_id, filter: filter.to_owned() };
        self.sealed_request(FrameType::Subscribe, Context::Sub, &op.encode()).await
    }

    pub async fn unsubscribe(&mut self, filter_id: FilterId) -> Result<Ack, ClientError> {
        let op = SubscriptionOp::Unsubscribe { filter_id };
        self.sealed_request(FrameType::Unsubscribe, Context::Sub, &op.encode()).await
    }

    pub async fn publish(&mut self, p: &Publication) -> Result<Ack, ClientError> {
        self.sealed_request(FrameType::Publish, Context::Pub, &encode_publication(p)).await
    }

    /// Completes one round-trip without side effects, so every delivery
    /// queued for this client before the call has been received after it.
    pub async fn barrier(&mut self) -> Result<(), ClientError> {
        let probe = FilterId::random(&mut rand::thread_rng());
        match self.unsubscribe(probe).await?.rejected {
            Some(Reject::UnknownFilterId) => Ok(()),
            _ => Err(ClientError::Protocol("barrier probe was not refused")),
        }
    }

    /// Drains the buffered deliveries.
    pub fn take_received(&mut self) -> Vec<Received> {
        self.pending.drain(..).collect()
    }

    pub async fn next_delivery(&mut self) -> Result<Received, ClientError> {
        loop {
            if let Some(r) = self.pending.pop_front() {
                return Ok(r);
            }
            let frame = self.recv().await?;
            self.absorb(frame)?;
        }
    }

    pub async fn next_delivery_timeout(&mut self, t: Duration) -> Result<Option<Received>, ClientError> {
        match tokio::time::timeout(t, self.next_delivery()).await {
            Ok(r) => r.map(Some),
            Err(_) => Ok(None),
        }
    }

    pub async fn send_raw(&mut self, bytes: &[u8]) -> Result<(), ClientError> {
        use tokio::io::AsyncWriteExt;
        self.record(bytes);
        self.stream.write_all(bytes).await?;
        Ok(())
    }

    pub async fn recv(&mut self) -> Result<Frame, ClientError> {
        let frame = read_frame(&mut self.stream).await?;
        self.record(&frame.encode());
        Ok(frame)
    }

    async fn sealed_request(&mut self, kind: FrameType, ctx: Context, plain: &[u8]) -> Result<Ack, ClientError> {
        let env = self.ring.seal(self.key, ctx, plain)?;
        self.send(&Frame::new(kind, env.to_bytes())).await?;
        self.await_ack().await
    }

    async fn send(&mut self, frame: &Frame) -> Result<(), ClientError> {
        self.record(&frame.encode());
        write_frame(&mut self.stream, frame).await?;
        Ok(())
    }

    fn record(&self, bytes: &[u8]) {
        if let Some(c) = &self.capture {
            c.lock().unwrap().extend_from_slice(bytes);
        }
    }

    async fn expect(&mut self, kind: FrameType) -> Result<Vec<u8>, ClientError> {
        let frame = self.recv().await?;
        if let Some(code) = frame.error_code() {
            return Err(ClientError::Broker(code));
        }
        if frame.kind != kind {
            return Err(ClientError::Protocol("unexpected frame type"));
        }
        Ok(frame.payload)
    }

    async fn await_ack(&mut self) -> Result<Ack, ClientError> {
        loop {
            let frame = self.recv().await?;
            if frame.kind == FrameType::Ack {
                return Ack::decode(&frame.payload).ok_or(ClientError::Protocol("malformed ACK"));
            }
            self.absorb(frame)?;
        }
    }

    fn absorb(&mut self, frame: Frame) -> Result<(), ClientError> {
        match frame.kind {
            FrameType::Deliver => {
                let plain = self.ring.open_bytes(&frame.payload, Context::Pub)?;
                let publication = decode_publication(&plain).map_err(|e| ClientError::Encoding(e.to_string()))?;
                self.pending.push_back(Received { envelope: frame.payload, publication });
                Ok(())
            }
            FrameType::Error => Err(frame
                .error_code()
                .map(ClientError::Broker)
                .unwrap_or(ClientError::Protocol("malformed ERROR"))),
            _ => Err(ClientError::Protocol("unexpected frame type")),
        }
    }
}

/// Asks the broker's provisioning service for the startup configuration
/// registered under `present`.
pub async fn request_scf(
    addr: impl ToSocketAddrs,
    identity: Identity,
    present: Measurement,
    capture: Option<Capture>,
) -> Result<StartupConfig, ClientError> {
    let mut stream = TcpStream::connect(addr).await?;
    let record = |bytes: &[u8]| {
        if let Some(c) = &capture {
            c.lock().unwrap().extend_from_slice(bytes);
        }
    };
    let mut ring = KeyRing::new(identity.clone());
    let init = Initiator::new(identity, &mut StdRng::from_entropy()).presenting(present);
    let exchange = |frame: Frame| {
        record(&frame.encode());
        frame
    };
    write_frame(&mut stream, &exchange(Frame::new(FrameType::Provision, init.hello()))).await?;
    let reply = provision_answer(exchange(read_frame(&mut stream).await?))?;
    let (finished, _) = init.finish(&reply, &mut ring)?;
    write_frame(&mut stream, &exchange(Frame::new(FrameType::Provision, finished))).await?;
    let released = provision_answer(exchange(read_frame(&mut stream).await?))?;
    Ok(open_scf(&ring, &released)?)
}

fn provision_answer(frame: Frame) -> Result<Vec<u8>, ClientError> {
    match (frame.kind, frame.error_code()) {
        (FrameType::Provision, _) => Ok(frame.payload),
        (_, Some(code)) => Err(ClientError::Broker(code)),
        _ => Err(ClientError::Protocol("unexpected frame type")),
    }
}
