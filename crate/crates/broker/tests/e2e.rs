mod common;

use std::time::Duration;

use common::{client, start, table_for};
use ecbr_broker::frame::{read_frame, write_frame};
use ecbr_broker::{request_scf, ClientError, ErrorCode, Frame, FrameType, Server, ServerConfig, ServerError};
use ecbr_core::provisioning::HandshakeError;
use ecbr_core::{CostModel, FilterId, Identity, Measurement, PubId, Publication, Reject, ScfTable};
use tokio::io::AsyncWriteExt;
use tokio::net::TcpStream;

fn publication(text: &str, id: u8) -> Publication {
    Publication::parse(text, PubId([id; 16])).unwrap()
}

#[tokio::test]
async fn matching_publication_is_delivered_once() {
    let (addr, m) = start().await;
    let mut s = client(addr, m, 1).await;
    let mut p = client(addr, m, 2).await;
    let ack = s.subscribe(FilterId([1; 16]), "temp >= 10 && temp <= 20").await.unwrap();
    assert!(ack.is_accepted());
    assert_eq!(ack.id, [1; 16]);

    let publ = publication("temp=15", 7);
    let ack = p.publish(&publ).await.unwrap();
    assert!(ack.is_accepted());
    assert_eq!((ack.id, ack.matched), ([7; 16], 1));
    let got = s.next_delivery().await.unwrap();
    assert_eq!(got.publication, publ);
    assert!(s.can_open(&got.envelope));
    assert!(!p.can_open(&got.envelope));
    s.barrier().await.unwrap();
    assert!(s.take_received().is_empty());
}

#[tokio::test]
async fn non_matching_publication_is_acknowledged_without_delivery() {
    let (addr, m) = start().await;
    let mut s = client(addr, m, 1).await;
    let mut p = client(addr, m, 2).await;
    s.subscribe(FilterId([1; 16]), "temp >= 10 && temp <= 20").await.unwrap();
    let ack = p.publish(&publication("temp=25", 8)).await.unwrap();
    assert!(ack.is_accepted());
    assert_eq!(ack.matched, 0);
    s.barrier().await.unwrap();
    assert!(s.take_received().is_empty());
}

#[tokio::test]
async fn oversized_frame_closes_only_that_connection() {
    let (addr, m) = start().await;
    let mut bystander = client(addr, m, 3).await;
    let mut raw = TcpStream::connect(addr).await.unwrap();
    let mut head = (2u32 << 20).to_be_bytes().to_vec();
    head.push(FrameType::Publish.code());
    head.extend_from_slice(&[0; 1024]);
    raw.write_all(&head).await.unwrap();
    let f = read_frame(&mut raw).await.unwrap();
    assert_eq!(f.error_code(), Some(ErrorCode::FrameTooLarge));
    raw.shutdown().await.unwrap();
    assert!(read_frame(&mut raw).await.is_err());

    bystander.subscribe(FilterId([4; 16]), "x == 1").await.unwrap();
    let ack = bystander.publish(&publication("x=1", 1)).await.unwrap();
    assert_eq!(ack.matched, 1);
    assert_eq!(bystander.next_delivery().await.unwrap().publication, publication("x=1", 1));
}

#[tokio::test]
async fn protocol_violations_get_error_frames() {
    let (addr, _) = start().await;
    let cases: [(Vec<u8>, ErrorCode); 4] = [
        (Frame::new(FrameType::Publish, vec![0; 10]).encode(), ErrorCode::UnexpectedFrame),
        (Frame::new(FrameType::Hello, vec![0; 97]).encode(), ErrorCode::HandshakeFailed),
        (vec![0, 0, 0, 1, 42], ErrorCode::UnknownFrameType),
        (vec![0, 0, 0, 0], ErrorCode::EmptyFrame),
    ];
    for (bytes, code) in cases {
        let mut raw = TcpStream::connect(addr).await.unwrap();
        raw.write_all(&bytes).await.unwrap();
        let f = read_frame(&mut raw).await.unwrap();
        assert_eq!(f.kind, FrameType::Error);
        assert_eq!(f.payload, [code.code()]);
    }
}

#[tokio::test]
async fn unsubscribe_stops_deliveries() {
    let (addr, m) = start().await;
    let mut s = client(addr, m, 1).await;
    let mut p = client(addr, m, 2).await;
    let id = FilterId([9; 16]);
    s.subscribe(id, "temp >= 10").await.unwrap();
    let ack = s.unsubscribe(id).await.unwrap();
    assert!(ack.is_accepted());
    assert_eq!(ack.id, id.0);
    assert_eq!(p.publish(&publication("temp=50", 1)).await.unwrap().matched, 0);
    s.barrier().await.unwrap();
    assert!(s.take_received().is_empty());
    assert_eq!(s.unsubscribe(id).await.unwrap().rejected, Some(Reject::UnknownFilterId));
}

#[tokio::test]
async fn foreign_filters_cannot_be_removed() {
    let (addr, m) = start().await;
    let mut a = client(addr, m, 1).await;
    let mut b = client(addr, m, 2).await;
    let id = FilterId([5; 16]);
    a.subscribe(id, "temp >= 10").await.unwrap();
    assert_eq!(b.unsubscribe(id).await.unwrap().rejected, Some(Reject::NotOwner));
    assert_eq!(b.subscribe(id, "temp >= 0").await.unwrap().rejected, Some(Reject::DuplicateFilterId));
    assert_eq!(b.publish(&publication("temp=11", 3)).await.unwrap().matched, 1);
    assert_eq!(a.next_delivery().await.unwrap().publication.id(), PubId([3; 16]));
}

#[tokio::test]
async fn invalid_filters_are_rejected_with_reason() {
    let (addr, m) = start().await;
    let mut a = client(addr, m, 1).await;
    let cases = [
        ("temp >=", Reject::FilterSyntax),
        ("temp != 3", Reject::UnsupportedOperator),
        ("temp > 5 && temp < 3", Reject::Unsatisfiable),
    ];
    for (i, (expr, reason)) in cases.into_iter().enumerate() {
        let ack = a.subscribe(FilterId([i as u8; 16]), expr).await.unwrap();
        assert_eq!(ack.rejected, Some(reason), "{expr}");
        assert_eq!(ack.id, [0; 16]);
    }
}

#[tokio::test]
async fn disconnect_collects_filters() {
    let (addr, m) = start().await;
    let mut p = client(addr, m, 2).await;
    {
        let mut s = client(addr, m, 1).await;
        s.subscribe(FilterId([1; 16]), "temp >= 10").await.unwrap();
        s.subscribe(FilterId([2; 16]), "temp >= 20").await.unwrap();
        assert_eq!(p.publish(&publication("temp=30", 1)).await.unwrap().matched, 1);
    }
    let mut matched = 1;
    for i in 0..200 {
        matched = p.publish(&publication("temp=30", 2 + i as u8)).await.unwrap().matched;
        if matched == 0 {
            break;
        }
        tokio::time::sleep(Duration::from_millis(10)).await;
    }
    assert_eq!(matched, 0);

    // The same identity can come back and reuse its filter ids.
    let mut s = client(addr, m, 1).await;
    assert!(s.subscribe(FilterId([1; 16]), "temp >= 10").await.unwrap().is_accepted());
}

#[tokio::test]
async fn reconnect_keeps_the_newer_session() {
    let (addr, m) = start().await;
    let mut p = client(addr, m, 2).await;
    let mut old = client(addr, m, 1).await;
    let mut new = client(addr, m, 1).await;
    new.subscribe(FilterId([1; 16]), "x >= 0").await.unwrap();
    assert_eq!(old.unsubscribe(FilterId([7; 16])).await.unwrap().rejected, Some(Reject::UnknownKey));
    drop(old);
    tokio::time::sleep(Duration::from_millis(100)).await;
    assert_eq!(p.publish(&publication("x=1", 1)).await.unwrap().matched, 1);
    assert_eq!(new.next_delivery().await.unwrap().publication.id(), PubId([1; 16]));
}

#[tokio::test]
async fn pinned_measurement_is_enforced() {
    let (addr, _) = start().await;
    let err = ecbr_broker::Client::connect(addr, Identity::from_seed([1; 32]), Some(Measurement([0; 32])))
        .await
        .err()
        .unwrap();
    assert!(matches!(err, ClientError::Handshake(HandshakeError::MeasurementMismatch)), "{err}");
}

#[tokio::test]
async fn provisioning_service_answers_over_tcp() {
    let (addr, m) = start().await;
    let scf = request_scf(addr, Identity::from_seed([4; 32]), m, None).await.unwrap();
    assert_eq!(scf, common::scf());
    let err = request_scf(addr, Identity::from_seed([4; 32]), Measurement([1; 32]), None).await.unwrap_err();
    assert!(matches!(err, ClientError::Broker(ErrorCode::UnknownMeasurement)), "{err}");
}

#[tokio::test]
async fn unregistered_broker_refuses_to_start() {
    let model = CostModel::default();
    let other = CostModel { swap_ns: model.swap_ns + 1, ..model.clone() };
    let err = Server::bind("127.0.0.1:0", ServerConfig::new(model, table_for(&other))).await.err().unwrap();
    assert!(matches!(err, ServerError::Provisioning(_)), "{err}");
    let err = Server::bind("127.0.0.1:0", ServerConfig::new(CostModel::default(), ScfTable::new())).await.err().unwrap();
    assert!(matches!(err, ServerError::Provisioning(_)));
}

#[tokio::test]
async fn subscriber_receives_its_own_publications() {
    let (addr, m) = start().await;
    let mut a = client(addr, m, 1).await;
    a.subscribe(FilterId([1; 16]), "kind prefix \"sensor/\"").await.unwrap();
    a.subscribe(FilterId([2; 16]), "kind == \"sensor/temp\"").await.unwrap();
    let ack = a.publish(&publication("kind=\"sensor/temp\",v=3", 1)).await.unwrap();
    assert_eq!(ack.matched, 1);
    assert_eq!(a.take_received().len(), 1);
}

#[tokio::test]
async fn stats_are_recorded() {
    let model = CostModel::default();
    let config = ServerConfig { stats_log: true, ..ServerConfig::new(model.clone(), table_for(&model)) };
    let server = Server::bind("127.0.0.1:0", config).await.unwrap();
    let csv = server.stats_csv().await.unwrap();
    let ops: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(ops, ["provision_begin", "provision_reply", "provision_complete"]);
}

#[tokio::test]
async fn raw_frames_round_trip_through_a_socket() {
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    let echo = tokio::spawn(async move {
        let (mut s, _) = listener.accept().await.unwrap();
        let f = read_frame(&mut s).await.unwrap();
        write_frame(&mut s, &f).await.unwrap();
    });
    let mut c = TcpStream::connect(addr).await.unwrap();
    let f = Frame::new(FrameType::Deliver, vec![1, 2, 3]);
    write_frame(&mut c, &f).await.unwrap();
    assert_eq!(read_frame(&mut c).await.unwrap(), f);
    echo.await.unwrap();
}
