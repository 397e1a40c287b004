//! Connection handling. A dedicated thread owns the enclave and runs ecalls
//! one at a time; network I/O runs concurrently on the tokio runtime.

use std::collections::HashMap;
use std::future::Future;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use ecbr_core::enclave::{stats_csv, CostModelError, Outcome};
use ecbr_core::envelope::HEADER_LEN;
use ecbr_core::provisioning::{HandshakeError, Provisioner};
use ecbr_core::{CostModel, EcallResult, Enclave, Identity, Measurement, Reject, ScfTable, SenderId};
use log::{debug, info, warn};
use rand::rngs::StdRng;
use rand::SeedableRng;
use thiserror::Error;
use tokio::io::{AsyncRead, AsyncReadExt, AsyncWrite, AsyncWriteExt};
use tokio::net::{TcpListener, ToSocketAddrs};
use tokio::sync::{mpsc, oneshot};

use crate::frame::{read_frame, write_frame, Ack, ErrorCode, Frame, FrameType};

#[derive(Debug, Error)]
pub enum ServerError {
    #[error("invalid cost model: {0}")]
    CostModel(#[from] CostModelError),
    #[error("provisioning failed: {0}")]
    Provisioning(String),
    #[error("enclave thread is gone")]
    EnclaveGone,
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub struct ServerConfig {
    pub model: CostModel,
    pub table: ScfTable,
    pub seed: u64,
    pub stats_log: bool,
    /// Receives `EcallResult::boundary_bytes` of every ecall.
    pub ecall_tap: Option<std::sync::mpsc::Sender<Vec<u8>>>,
}

impl ServerConfig {
    pub fn new(model: CostModel, table: ScfTable) -> Self {
        Self { model, table, seed: 0, stats_log: false, ecall_tap: None }
    }
}

type Job = Box<dyn FnOnce(&mut Enclave) + Send>;

#[derive(Clone)]
struct EnclaveHandle {
    jobs: mpsc::UnboundedSender<Job>,
    tap: Option<std::sync::mpsc::Sender<Vec<u8>>>,
}

impl EnclaveHandle {
    fn spawn(mut enclave: Enclave, tap: Option<std::sync::mpsc::Sender<Vec<u8>>>) -> Self {
        let (jobs, mut rx) = mpsc::unbounded_channel::<Job>();
        std::thread::Builder::new()
            .name("enclave".into())
            .spawn(move || {
                while let Some(job) = rx.blocking_recv() {
                    job(&mut enclave);
                }
            })
            .expect("spawn enclave thread");
        Self { jobs, tap }
    }

    async fn call<R, F>(&self, f: F) -> Result<R, ServerError>
    where
        R: Send + 'static,
        F: FnOnce(&mut Enclave) -> R + Send + 'static,
    {
        let (tx, rx) = oneshot::channel();
        self.jobs
            .send(Box::new(move |e| {
                let _ = tx.send(f(e));
            }))
            .map_err(|_| ServerError::EnclaveGone)?;
        rx.await.map_err(|_| ServerError::EnclaveGone)
    }

    async fn ecall<F>(&self, f: F) -> Result<EcallResult, ServerError>
    where
        F: FnOnce(&mut Enclave) -> EcallResult + Send + 'static,
    {
        let tap = self.tap.clone();
        self.call(move |e| {
            let r = f(e);
            if let Some(t) = tap {
                let _ = t.send(r.boundary_bytes());
            }
            r
        })
        .await
    }
}

struct Route {
    conn: u64,
    tx: mpsc::UnboundedSender<Frame>,
}

struct Shared {
    enclave: EnclaveHandle,
    provisioner: Mutex<(Provisioner, StdRng)>,
    routes: Mutex<HashMap<SenderId, Route>>,
    next_conn: AtomicU64,
}

pub struct Server {
    listener: TcpListener,
    shared: Arc<Shared>,
    measurement: Measurement,
}

impl Server {
    /// Builds the enclave, provisions it from `config.table` through the
    /// regular PROVISION exchange, then binds the listener.
    pub async fn bind(addr: impl ToSocketAddrs, config: ServerConfig) -> Result<Self, ServerError> {
        let mut enclave = Enclave::new(config.model, config.seed)?;
        if config.stats_log {
            enclave.enable_stats_log();
        }
        let measurement = enclave.measurement();
        let mut rng = StdRng::seed_from_u64(config.seed ^ 0x5eed_5eed);
        let provisioner = Provisioner::new(Identity::generate(&mut rng), config.table);
        let shared = Arc::new(Shared {
            enclave: EnclaveHandle::spawn(enclave, config.ecall_tap),
            provisioner: Mutex::new((provisioner, rng)),
            routes: Mutex::new(HashMap::new()),
            next_conn: AtomicU64::new(0),
        });
        self_provision(&shared).await?;
        info!("enclave {measurement} provisioned");
        let listener = TcpListener::bind(addr).await?;
        Ok(Self { listener, shared, measurement })
    }

    pub fn local_addr(&self) -> std::io::Result<SocketAddr> {
        self.listener.local_addr()
    }

    pub fn measurement(&self) -> Measurement {
        self.measurement
    }

    /// Serves connections until `shutdown` resolves.
    pub async fn run_until(&self, shutdown: impl Future<Output = ()>) {
        tokio::pin!(shutdown);
        loop {
            tokio::select! {
                _ = &mut shutdown => break,
                accepted = self.listener.accept() => match accepted {
                    Ok((stream, addr)) => {
                        debug!("connection from {addr}");
                        let _ = stream.set_nodelay(true);
                        tokio::spawn(handle(self.shared.clone(), stream));
                    }
                    Err(e) => warn!("accept: {e}"),
                },
            }
        }
    }

    /// Runs the accept loop on a background task.
    pub fn spawn(self) -> (SocketAddr, tokio::task::JoinHandle<()>) {
        let addr = self.local_addr().expect("bound listener");
        let task = tokio::spawn(async move { self.run_until(std::future::pending()).await });
        (addr, task)
    }

    /// Per-ecall statistics collected so far, as CSV.
    pub async fn stats_csv(&self) -> Result<String, ServerError> {
        let rows = self.shared.enclave.call(|e| e.take_stats_log()).await?;
        Ok(stats_csv(&rows))
    }
}

async fn self_provision(shared: &Arc<Shared>) -> Result<(), ServerError> {
    let (ours, theirs) = tokio::io::duplex(64 * 1024);
    tokio::spawn(handle(shared.clone(), theirs));
    let (mut rd, mut wr) = tokio::io::split(ours);
    let enclave = &shared.enclave;

    let Outcome::ProvisionMessage(hello) = enclave.ecall(|e| e.ecall_provision_begin()).await?.outcome else {
        return Err(fail("enclave did not start a handshake"));
    };
    let result = async {
        let reply = provision_step(&mut rd, &mut wr, hello).await?;
        let r = enclave.ecall(move |e| e.ecall_provision_reply(&reply)).await?;
        let Outcome::ProvisionMessage(finished) = r.outcome else {
            return Err(fail(&format!("{:?}", r.outcome)));
        };
        let released = provision_step(&mut rd, &mut wr, finished).await?;
        match enclave.ecall(move |e| e.ecall_provision_complete(&released)).await?.outcome {
            Outcome::Provisioned => Ok(()),
            other => Err(fail(&format!("{other:?}"))),
        }
    }
    .await;
    if result.is_err() {
        enclave.ecall(|e| e.ecall_provision_abort()).await?;
    }
    result
}

fn fail(m: &str) -> ServerError {
    ServerError::Provisioning(m.to_owned())
}

async fn provision_step<R, W>(rd: &mut R, wr: &mut W, payload: Vec<u8>) -> Result<Vec<u8>, ServerError>
where
    R: AsyncRead + Unpin,
    W: AsyncWrite + Unpin,
{
    let frame = Frame::new(FrameType::Provision, payload);
    write_frame(wr, &frame).await.map_err(|e| fail(&e.to_string()))?;
    let answer = read_frame(rd).await.map_err(|e| fail(&e.to_string()))?;
    match (answer.kind, answer.error_code()) {
        (FrameType::Provision, _) => Ok(answer.payload),
        (_, Some(code)) => Err(fail(&format!("provisioner answered {code}"))),
        _ => Err(fail("unexpected frame")),
    }
}

async fn handle<S>(shared: Arc<Shared>, stream: S)
where
    S: AsyncRead + AsyncWrite + Send + 'static,
{
    let (mut rd, wr) = tokio::io::split(stream);
    let (tx, rx) = mpsc::unbounded_channel();
    let writer = tokio::spawn(write_loop(wr, rx));
    let conn = shared.next_conn.fetch_add(1, Ordering::Relaxed);
    let mut peer = None;

    let result = serve(&shared, conn, &mut rd, &tx, &mut peer).await;
    if let Err(Some(code)) = result {
        debug!("connection {conn}: closing with {code}");
        let _ = tx.send(Frame::error(code));
    }

    if let Some(peer) = peer {
        let owned = {
            let mut routes = shared.routes.lock().unwrap();
            match routes.get(&peer) {
                Some(r) if r.conn == conn => routes.remove(&peer).is_some(),
                _ => false,
            }
        };
        if owned {
            match shared.enclave.ecall(move |e| e.ecall_drop_session(peer)).await.map(|r| r.outcome) {
                Ok(Outcome::SessionDropped { removed, .. }) => debug!("session {peer} dropped, {removed} filters removed"),
                other => warn!("drop session {peer}: {other:?}"),
            }
        }
    }
    drop(tx);
    let _ = writer.await;
    if result.is_err() {
        // Let the peer read the ERROR frame before the socket goes away.
        let mut sink = vec![0u8; 64 * 1024];
        let _ = tokio::time::timeout(Duration::from_secs(2), async {
            let mut drained = 0usize;
            while drained < 8 << 20 {
                match rd.read(&mut sink).await {
                    Ok(0) | Err(_) => break,
                    Ok(n) => drained += n,
                }
            }
        })
        .await;
    }
}

async fn write_loop<W: AsyncWrite + Unpin>(mut w: W, mut rx: mpsc::UnboundedReceiver<Frame>) {
    while let Some(frame) = rx.recv().await {
        if write_frame(&mut w, &frame).await.is_err() || frame.kind == FrameType::Error {
            break;
        }
    }
    let _ = w.shutdown().await;
}

type Closing = Option<ErrorCode>;

async fn next<R: AsyncRead + Unpin>(rd: &mut R) -> Result<Frame, Closing> {
    read_frame(rd).await.map_err(|e| e.error_code())
}

fn enclave_gone(_: ServerError) -> Closing {
    Some(ErrorCode::EnclaveUnavailable)
}

async fn serve<R: AsyncRead + Unpin>(
    shared: &Shared,
    conn: u64,
    rd: &mut R,
    tx: &mpsc::UnboundedSender<Frame>,
    peer: &mut Option<SenderId>,
) -> Result<(), Closing> {
    let first = next(rd).await?;
    match first.kind {
        FrameType::Hello => client_session(shared, conn, first.payload, rd, tx, peer).await,
        FrameType::Provision => provision_session(shared, first.payload, rd, tx).await,
        _ => Err(Some(ErrorCode::UnexpectedFrame)),
    }
}

async fn provision_session<R: AsyncRead + Unpin>(
    shared: &Shared,
    hello: Vec<u8>,
    rd: &mut R,
    tx: &mpsc::UnboundedSender<Frame>,
) -> Result<(), Closing> {
    let failed = Some(ErrorCode::HandshakeFailed);
    let (responder, reply) = {
        let mut guard = shared.provisioner.lock().unwrap();
        let (prov, rng) = &mut *guard;
        prov.accept(&hello, rng).map_err(|_| failed)?
    };
    let _ = tx.send(Frame::new(FrameType::Provision, reply));
    let finished = next(rd).await?;
    if finished.kind != FrameType::Provision {
        return Err(Some(ErrorCode::UnexpectedFrame));
    }
    let released = shared.provisioner.lock().unwrap().0.release(responder, &finished.payload);
    match released {
        Ok(sealed) => {
            let _ = tx.send(Frame::new(FrameType::Provision, sealed));
            Ok(())
        }
        Err(HandshakeError::UnknownMeasurement) => Err(Some(ErrorCode::UnknownMeasurement)),
        Err(e) => {
            debug!("provisioning handshake: {e}");
            Err(failed)
        }
    }
}

async fn client_session<R: AsyncRead + Unpin>(
    shared: &Shared,
    conn: u64,
    hello: Vec<u8>,
    rd: &mut R,
    tx: &mpsc::UnboundedSender<Frame>,
    peer_slot: &mut Option<SenderId>,
) -> Result<(), Closing> {
    let failed = Some(ErrorCode::HandshakeFailed);
    let enclave = &shared.enclave;
    let r = enclave.ecall(move |e| e.ecall_session_hello(&hello)).await.map_err(enclave_gone)?;
    let Outcome::HandshakeReply { peer, message } = r.outcome else { return Err(failed) };
    let _ = tx.send(Frame::new(FrameType::Provision, message));
    let finished = next(rd).await?;
    if finished.kind != FrameType::Provision {
        return Err(Some(ErrorCode::UnexpectedFrame));
    }
    let r = enclave.ecall(move |e| e.ecall_session_finish(peer, &finished.payload)).await.map_err(enclave_gone)?;
    let Outcome::SessionEstablished { peer, key_id } = r.outcome else { return Err(failed) };
    shared.routes.lock().unwrap().insert(peer, Route { conn, tx: tx.clone() });
    *peer_slot = Some(peer);
    let _ = tx.send(Frame::new(FrameType::Ack, Ack::accepted(key_id.0, 0).encode()));
    debug!("connection {conn}: session {peer}");

    loop {
        let frame = next(rd).await?;
        let kind = frame.kind;
        if !matches!(kind, FrameType::Subscribe | FrameType::Unsubscribe | FrameType::Publish) {
            return Err(Some(ErrorCode::UnexpectedFrame));
        }
        // Only the session's own envelopes reach the enclave.
        if frame.payload.get(HEADER_LEN - 20..HEADER_LEN - 4) != Some(peer.as_bytes().as_slice()) {
            let _ = tx.send(Frame::new(FrameType::Ack, Ack::rejected(Reject::NoSession).encode()));
            continue;
        }
        let payload = frame.payload;
        let r = enclave
            .ecall(move |e| match kind {
                FrameType::Subscribe => e.ecall_submit_subscription(&payload),
                FrameType::Unsubscribe => e.ecall_unsubscribe(&payload),
                _ => e.ecall_publish(&payload),
            })
            .await
            .map_err(enclave_gone)?;
        let ack = match r.outcome {
            Outcome::Accepted { filter_id } | Outcome::Removed { filter_id } => Ack::accepted(filter_id.0, 0),
            Outcome::Published { pub_id, deliveries, skipped } => {
                let matched = (deliveries.len() + skipped.len()) as u32;
                let routes = shared.routes.lock().unwrap();
                for d in deliveries {
                    if let Some(route) = routes.get(&d.subscriber) {
                        let _ = route.tx.send(Frame::new(FrameType::Deliver, d.envelope));
                    }
                }
                Ack::accepted(pub_id.0, matched)
            }
            Outcome::Rejected(reason) => Ack::rejected(reason),
            other => {
                warn!("unexpected ecall outcome {other:?}");
                Ack::rejected(Reject::Malformed)
            }
        };
        let _ = tx.send(Frame::new(FrameType::Ack, ack.encode()));
    }
}
