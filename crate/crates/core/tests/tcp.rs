use std::io::Write;
use std::net::TcpStream;
use std::thread;
use std::time::Duration;

use splitwire::metrics::comm::CommLedger;
use splitwire::protocol::{encode, ControlCode, Link, Message};
use splitwire::tensor::Tensor;
use splitwire::transport::{loopback_pair, tcp_connect, TcpServer, Transport, TransportError};

fn sample() -> Vec<Message> {
    vec![
        Message::control(ControlCode::Hello, 42),
        Message::Activation {
            batch_id: 1,
            z: Tensor::from_f32(&[2, 3], &[1.0, -2.0, 3.5, 0.0, 1e-3, 7.0]).unwrap(),
            labels: vec![1, 0],
        },
        Message::Gradient {
            batch_id: 1,
            dz: Tensor::from_f64(&[1, 2], &[0.25, -0.5]).unwrap(),
        },
        Message::Handoff {
            batch_id: 9,
            bottom: vec![Tensor::from_f32(&[2], &[1.0, 2.0]).unwrap()],
            aux: vec![],
        },
    ]
}

#[test]
fn sockets_deliver_what_loopback_delivers() {
    let server = TcpServer::bind("127.0.0.1:0").unwrap();
    let addr = server.local_addr().unwrap().to_string();
    let h = thread::spawn(move || {
        let ep = server.accept().unwrap();
        (0..sample().len()).map(|_| ep.recv(Some(Duration::from_secs(10))).unwrap()).collect::<Vec<_>>()
    });
    let c = tcp_connect(&addr).unwrap();
    let (la, lb) = loopback_pair(None);
    for m in sample() {
        c.send(&encode(&m)).unwrap();
        la.send(&encode(&m)).unwrap();
    }
    let over_tcp = h.join().unwrap();
    let over_loop: Vec<_> = (0..sample().len()).map(|_| lb.recv(None).unwrap()).collect();
    assert_eq!(over_tcp, over_loop);
    assert_eq!(c.counters().bytes_sent, la.counters().bytes_sent);
}

#[test]
fn peer_closing_mid_frame_is_truncation() {
    let server = TcpServer::bind("127.0.0.1:0").unwrap();
    let addr = server.local_addr().unwrap();
    let h = thread::spawn(move || {
        let ep = server.accept().unwrap();
        ep.recv(Some(Duration::from_secs(10)))
    });
    let mut raw = TcpStream::connect(addr).unwrap();
    let frame = encode(&sample()[1]);
    raw.write_all(&(frame.len() as u32).to_le_bytes()).unwrap();
    raw.write_all(&frame[..frame.len() / 2]).unwrap();
    drop(raw);
    match h.join().unwrap() {
        Err(TransportError::Truncated { received, expected }) => {
            assert_eq!(expected, 4 + frame.len());
            assert!(received < expected);
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn clean_close_between_frames_is_closed() {
    let server = TcpServer::bind("127.0.0.1:0").unwrap();
    let addr = server.local_addr().unwrap().to_string();
    let h = thread::spawn(move || {
        let ep = server.accept().unwrap();
        let first = ep.recv(Some(Duration::from_secs(10))).unwrap();
        (first, ep.recv(Some(Duration::from_secs(10))))
    });
    let c = tcp_connect(&addr).unwrap();
    c.send(b"frame").unwrap();
    drop(c);
    let (first, second) = h.join().unwrap();
    assert_eq!(first, b"frame");
    assert!(matches!(second, Err(TransportError::Closed)), "{second:?}");
}

#[test]
fn one_server_accepts_relay_clients_in_turn() {
    let server = TcpServer::bind("127.0.0.1:0").unwrap();
    let addr = server.local_addr().unwrap().to_string();
    let h = thread::spawn(move || {
        let ledger = CommLedger::new();
        let mut seen = Vec::new();
        for _ in 0..3 {
            let link = Link::server_side(Box::new(server.accept().unwrap()), ledger.clone());
            let msg = link.recv(Some(Duration::from_secs(10))).unwrap();
            link.send(&Message::control(ControlCode::Ack, 0)).unwrap();
            seen.push(msg.batch_id());
        }
        seen
    });
    for k in 0..3u64 {
        let link = Link::client_side(Box::new(tcp_connect(&addr).unwrap()), CommLedger::new());
        link.send(&Message::control(ControlCode::Hello, k)).unwrap();
        let reply = link.recv(Some(Duration::from_secs(10))).unwrap();
        assert_eq!(reply, Message::control(ControlCode::Ack, 0));
    }
    assert_eq!(h.join().unwrap(), vec![0, 1, 2]);
}

#[test]
fn refused_connection_names_the_address() {
    let server = TcpServer::bind("127.0.0.1:0").unwrap();
    let addr = server.local_addr().unwrap().to_string();
    drop(server);
    match tcp_connect(&addr) {
        Err(TransportError::ConnectRefused { addr: a }) => assert_eq!(a, addr),
        other => panic!("{:?}", other.map(|_| ())),
    }
}

#[test]
fn receive_timeout_is_distinct_from_close() {
    let server = TcpServer::bind("127.0.0.1:0").unwrap();
    let addr = server.local_addr().unwrap().to_string();
    let _c = tcp_connect(&addr).unwrap();
    let ep = server.accept().unwrap();
    assert!(matches!(ep.recv(Some(Duration::from_millis(50))), Err(TransportError::Timeout(_))));
    assert_eq!(ep.try_recv().unwrap(), None);
}
