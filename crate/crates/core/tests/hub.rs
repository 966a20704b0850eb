mod common;

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use gridloop::hub::client::HubClient;
use gridloop::hub::local::LocalHub;
use gridloop::hub::server::HubServer;
use gridloop::hub::{encode_frame, parse_frame, Frame, Hub, Measurement, Pattern, Payload, Telemetry, Topic};
use gridloop::netem::DelayModel;

fn t(s: &str) -> Topic {
    Topic::new(s).unwrap()
}

fn p(s: &str) -> Pattern {
    Pattern::new(s).unwrap()
}

const KEYS: [&str; 4] = ["a/x", "a/y", "b/x", "b/y/z"];
const PATTERNS: [&str; 6] = ["a/x", "a/*", "*/x", "b/*/z", "*", "b/y/z"];

#[derive(Debug, Clone)]
enum Op {
    Set(usize, f64),
    Pub(usize, f64),
    Get(usize),
    Sub(usize, usize),
    Unsub(usize, usize),
}

fn op() -> impl Strategy<Value = Op> {
    let v = -1e3..1e3f64;
    prop_oneof![
        (0..KEYS.len(), v.clone()).prop_map(|(k, v)| Op::Set(k, v)),
        (0..KEYS.len(), v).prop_map(|(k, v)| Op::Pub(k, v)),
        (0..KEYS.len()).prop_map(Op::Get),
        (0..3usize, 0..PATTERNS.len()).prop_map(|(c, q)| Op::Sub(c, q)),
        (0..3usize, 0..PATTERNS.len()).prop_map(|(c, q)| Op::Unsub(c, q)),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    /// A model of the hub (last value per key, ordered subscription list per
    /// connection) predicts every reply and every delivery.
    #[test]
    fn hub_matches_reference_model(ops in prop::collection::vec(op(), 1..80)) {
        let mut hub = Hub::new();
        let conns: Vec<_> = (0..3).map(|i| hub.connect(&format!("c{i}"))).collect();
        let mut store: BTreeMap<usize, f64> = BTreeMap::new();
        let mut subs: Vec<Vec<usize>> = vec![vec![]; 3];
        let mut expect_msgs: Vec<Vec<(usize, f64)>> = vec![vec![]; 3];
        let mut got_msgs: Vec<Vec<(usize, f64)>> = vec![vec![]; 3];
        for (seq, o) in ops.iter().enumerate() {
            let seq = seq as u64;
            let (conn, frame) = match *o {
                Op::Set(k, v) | Op::Pub(k, v) => {
                    let tel = Telemetry::new(t(KEYS[k]), seq, seq, Payload::Num(v));
                    let f = if matches!(o, Op::Set(..)) { Frame::Set(tel) } else { Frame::Pub(tel) };
                    (0, f)
                }
                Op::Get(k) => (0, Frame::Get(t(KEYS[k]))),
                Op::Sub(c, q) => (c, Frame::Sub(p(PATTERNS[q]))),
                Op::Unsub(c, q) => (c, Frame::Unsub(p(PATTERNS[q]))),
            };
            hub.handle_line(conns[conn], &encode_frame(&frame), seq);
            let out = hub.drain_outbox();

            let mut expected_reply = Frame::Ok(None);
            match *o {
                Op::Set(k, v) | Op::Pub(k, v) => {
                    store.insert(k, v);
                    let mut count = 0;
                    for (c, list) in subs.iter().enumerate() {
                        for &q in list {
                            if p(PATTERNS[q]).matches(&t(KEYS[k])) {
                                expect_msgs[c].push((k, v));
                                count += 1;
                            }
                        }
                    }
                    if matches!(o, Op::Pub(..)) {
                        expected_reply = Frame::Ok(Some(count));
                    }
                }
                Op::Get(k) => {
                    expected_reply = match store.get(&k) {
                        Some(&v) => Frame::Msg(Telemetry::new(t(KEYS[k]), 0, 0, Payload::Num(v))),
                        None => Frame::Err("nokey".into()),
                    };
                }
                Op::Sub(c, q) => {
                    if !subs[c].contains(&q) {
                        subs[c].push(q);
                    }
                }
                Op::Unsub(c, q) => subs[c].retain(|&x| x != q),
            }

            let mut reply = None;
            for (to, f) in out {
                let c = conns.iter().position(|&x| x == to).unwrap();
                match f {
                    Frame::Msg(tel) if !(matches!(o, Op::Get(_)) && c == conn && reply.is_none()) => {
                        let k = KEYS.iter().position(|k| *k == tel.topic.as_str()).unwrap();
                        got_msgs[c].push((k, tel.value.as_f64().unwrap()));
                    }
                    other => {
                        prop_assert_eq!(c, conn);
                        prop_assert!(reply.is_none(), "two replies");
                        reply = Some(other);
                    }
                }
            }
            let reply = reply.expect("every request is answered");
            match (&reply, &expected_reply) {
                (Frame::Msg(a), Frame::Msg(b)) => {
                    prop_assert_eq!(&a.topic, &b.topic);
                    prop_assert_eq!(&a.value, &b.value);
                }
                _ => prop_assert_eq!(&reply, &expected_reply),
            }
        }
        prop_assert_eq!(got_msgs, expect_msgs);
    }

    #[test]
    fn frames_round_trip(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..20 {
            let f = common::frame(&mut rng);
            let line = encode_frame(&f);
            prop_assert!(line.len() <= 4096);
            let back = parse_frame(&line).unwrap();
            prop_assert_eq!(&back, &f);
            prop_assert_eq!(encode_frame(&back), line);
        }
    }

    #[test]
    fn arbitrary_bytes_never_panic(bytes in prop::collection::vec(any::<u8>(), 0..4200)) {
        let _ = parse_frame(&bytes);
    }

    #[test]
    fn single_segment_wildcard(segs in prop::collection::vec("[a-z]{1,3}", 1..5), mask in any::<u8>()) {
        let topic = t(&segs.join("/"));
        let pat: Vec<String> = segs
            .iter()
            .enumerate()
            .map(|(i, s)| if mask & (1 << i) != 0 { "*".to_string() } else { s.clone() })
            .collect();
        prop_assert!(p(&pat.join("/")).matches(&topic));
        let longer = format!("{}/extra", topic);
        prop_assert!(!p(&pat.join("/")).matches(&t(&longer)));
    }
}

#[test]
fn ping_rtt_through_calibrated_links() {
    let mut lh = LocalHub::new();
    let c = lh.connect("probe", DelayModel::calibrated(1), DelayModel::calibrated(2));
    let mut sum = 0u64;
    for k in 0..10_000u64 {
        sum += lh.ping(c, k * 1_000_000, 5_000_000).unwrap();
    }
    let mean_ms = sum as f64 / 10_000.0 / 1000.0;
    assert!((60.0..=68.0).contains(&mean_ms), "mean rtt {mean_ms} ms");
}

fn server() -> (HubServer, String) {
    let s = HubServer::spawn("127.0.0.1:0", Instant::now()).unwrap();
    let addr = s.local_addr().to_string();
    (s, addr)
}

#[test]
fn tcp_read_your_write() {
    let (srv, addr) = server();
    let mut c = HubClient::connect(&addr, Duration::from_secs(5)).unwrap();
    assert_eq!(c.get(&t("pv/power")).unwrap(), None);
    for seq in 1..=50u64 {
        let v = seq as f64 * 70.5;
        c.set(&t("pv/power"), seq, seq * 1000, Payload::Num(v)).unwrap();
        let m = c.get(&t("pv/power")).unwrap().unwrap();
        assert_eq!((m.seq, m.value.as_f64()), (seq, Some(v)));
        assert_eq!(m.source_id, "pv");
    }
    c.set(&t("b/status"), 1, 1, Payload::text("open \"x\"").unwrap()).unwrap();
    assert_eq!(c.get(&t("b/status")).unwrap().unwrap().value.as_text(), Some("open \"x\""));
    srv.shutdown();
}

#[test]
fn tcp_fanout_and_fifo() {
    let (srv, addr) = server();
    let mut pubr = HubClient::connect(&addr, Duration::from_secs(5)).unwrap();
    let mut a = HubClient::connect(&addr, Duration::from_secs(5)).unwrap();
    let mut b = HubClient::connect(&addr, Duration::from_secs(5)).unwrap();
    a.subscribe(&p("prismes/*/power")).unwrap();
    b.subscribe(&p("prismes/pv/*")).unwrap();
    b.subscribe(&p("prismes/*/power")).unwrap();
    let n = 300u64;
    for seq in 1..=n {
        let topic = if seq % 2 == 0 { "prismes/pv/power" } else { "prismes/building/power" };
        let delivered = pubr.publish(&t(topic), seq, seq, Payload::Num(seq as f64)).unwrap();
        assert_eq!(delivered, if seq % 2 == 0 { 3 } else { 2 });
    }
    let recv = |c: &HubClient, k: u64| -> Vec<Measurement> {
        (0..k)
            .map(|_| c.messages().recv_timeout(Duration::from_secs(5)).unwrap())
            .collect()
    };
    let got_a: Vec<u64> = recv(&a, n).iter().map(|m| m.seq).collect();
    assert_eq!(got_a, (1..=n).collect::<Vec<_>>());
    let got_b: Vec<u64> = recv(&b, n + n / 2).iter().map(|m| m.seq).collect();
    let want_b: Vec<u64> = (1..=n).flat_map(|s| if s % 2 == 0 { vec![s, s] } else { vec![s] }).collect();
    assert_eq!(got_b, want_b);
    assert!(a.messages().try_recv().is_err());
    b.unsubscribe(&p("prismes/pv/*")).unwrap();
    assert_eq!(pubr.publish(&t("prismes/pv/power"), n + 1, 0, Payload::Num(0.0)).unwrap(), 2);
    assert!(pubr.ping().unwrap() < Duration::from_secs(1));
    srv.shutdown();
}

#[test]
fn tcp_malformed_line_keeps_connection() {
    use std::io::{BufRead, BufReader, Write};
    let (srv, addr) = server();
    let mut s = std::net::TcpStream::connect(&addr).unwrap();
    s.set_read_timeout(Some(Duration::from_secs(5))).unwrap();
    let mut r = BufReader::new(s.try_clone().unwrap());
    let mut line = String::new();
    s.write_all(b"PUB bad topic! 1 1 0\n").unwrap();
    r.read_line(&mut line).unwrap();
    assert_eq!(line, "ERR malformed\n");
    line.clear();
    s.write_all(&[b'x'; 5000]).unwrap();
    s.write_all(b"\nPING\n").unwrap();
    r.read_line(&mut line).unwrap();
    assert_eq!(line, "ERR malformed\n");
    line.clear();
    r.read_line(&mut line).unwrap();
    assert!(line.starts_with("PONG "), "{line}");
    srv.shutdown();
}
