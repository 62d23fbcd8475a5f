use std::io::Cursor;
use std::net::TcpListener;
use std::sync::mpsc;
use std::thread;

use edgepipe::metrics::EventKind;
use edgepipe::tensor::Tensor;
use edgepipe::transport::sim::{DropRule, LinkParams, SimNetwork};
use edgepipe::transport::tcp::{measure_bandwidth, read_frame, serve_connection, write_frame};
use edgepipe::transport::{Message, MessageKind, Payload};
use proptest::prelude::*;

fn gradient(batch: i64, values: Vec<f64>, reports: Vec<(u32, f64)>) -> Message {
    let n = values.len();
    Message::new(
        2,
        1,
        Some(batch),
        Payload::Gradient {
            generation: 3,
            tensor: Tensor::new(vec![1, n], values).unwrap(),
            reports,
        },
    )
}

proptest! {
    #[test]
    fn frames_round_trip(
        // -1 is the wire's "no batch"; ids are never negative
        batch in 0..i64::MAX,
        values in prop::collection::vec(any::<f64>().prop_filter("comparable", |v| !v.is_nan()), 1..50),
        reports in prop::collection::vec((any::<u32>(), 0.0f64..1e3), 0..4),
    ) {
        let msg = gradient(batch, values, reports);
        let mut buf = Vec::new();
        write_frame(&mut buf, &msg).unwrap();
        let back = read_frame(&mut Cursor::new(&buf)).unwrap().unwrap();
        prop_assert_eq!(back, msg);
    }

    #[test]
    fn truncated_frames_are_errors(cut in 1usize..40) {
        let msg = gradient(7, vec![1.0; 4], vec![]);
        let mut buf = Vec::new();
        write_frame(&mut buf, &msg).unwrap();
        let cut = cut.min(buf.len() - 1);
        prop_assert!(read_frame(&mut Cursor::new(&buf[..buf.len() - cut])).is_err());
    }
}

#[test]
fn batchless_message_round_trips() {
    let msg = Message::new(
        0,
        3,
        None,
        Payload::Probe {
            generation: 9,
            attempt: 2,
        },
    );
    assert_eq!(Message::decode(&msg.encode()).unwrap(), msg);
}

#[test]
fn empty_stream_is_clean_end() {
    assert!(read_frame(&mut Cursor::new(Vec::<u8>::new()))
        .unwrap()
        .is_none());
}

#[test]
fn loopback_delivery_in_order() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let (tx, rx) = mpsc::channel();
    let server = thread::spawn(move || {
        let (stream, _) = listener.accept().unwrap();
        serve_connection(stream, |m| tx.send(m).unwrap()).unwrap();
    });
    let sent: Vec<Message> = (0..20)
        .map(|b| gradient(b, vec![b as f64; 8], vec![(1, 0.5)]))
        .collect();
    {
        let mut stream = std::net::TcpStream::connect(addr).unwrap();
        for m in &sent {
            write_frame(&mut stream, m).unwrap();
        }
    }
    server.join().unwrap();
    let got: Vec<Message> = rx.iter().collect();
    assert_eq!(got, sent);
}

#[test]
fn loopback_bandwidth_is_positive() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let server = thread::spawn(move || {
        let (stream, _) = listener.accept().unwrap();
        serve_connection(stream, |_| {}).unwrap();
    });
    let bw = measure_bandwidth(addr, 0, 1, 1 << 16).unwrap();
    assert!(bw.is_finite() && bw > 0.0);
    server.join().unwrap();
}

#[test]
fn links_serialize_transfers() {
    let mut net = SimNetwork::new(LinkParams {
        bandwidth: 1000.0,
        latency: 0.5,
    });
    // 1000 bytes take a second on the wire, then half a second of latency
    assert_eq!(net.transmit(0.0, 0, 1, 1000), 1.5);
    // the link is busy until t=1
    assert_eq!(net.transmit(0.2, 0, 1, 1000), 2.5);
    // the reverse direction is independent
    assert_eq!(net.transmit(0.2, 1, 0, 1000), 1.7);
    assert_eq!(net.transmit(3.0, 2, 2, 1 << 20), 3.0);
    assert_eq!(net.sent(), 4);
}

#[test]
fn drop_rules_are_consumed() {
    let mut net = SimNetwork::new(LinkParams {
        bandwidth: 1.0,
        latency: 0.0,
    });
    net.add_drop(DropRule {
        from: 0,
        to: 1,
        batch: None,
        kind: Some(MessageKind::Commit),
        from_time: 1.0,
        until: None,
        remaining: Some(2),
    });
    assert!(!net.should_drop(0.5, 0, 1, MessageKind::Commit, None));
    assert!(!net.should_drop(1.5, 0, 1, MessageKind::Activation, None));
    assert!(!net.should_drop(1.5, 1, 0, MessageKind::Commit, None));
    assert!(net.should_drop(1.5, 0, 1, MessageKind::Commit, None));
    assert!(net.should_drop(1.6, 0, 1, MessageKind::Commit, None));
    assert!(!net.should_drop(1.7, 0, 1, MessageKind::Commit, None));
    assert_eq!(net.dropped(), 2);
}

#[test]
fn message_kinds_parse_by_name() {
    assert_eq!(MessageKind::parse("commit"), Some(MessageKind::Commit));
    assert_eq!("RECOVER".parse::<EventKind>().unwrap(), EventKind::Recover);
}
