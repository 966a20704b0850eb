#![allow(dead_code)]

use std::path::PathBuf;

use gridloop::hub::{Frame, Pattern, Payload, Telemetry, Topic};
use gridloop::scenario::Scenario;
use rand::seq::IndexedRandom;
use rand::Rng;

pub fn repo_root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

pub fn shipped_scenario() -> Scenario {
    Scenario::load(&repo_root().join("scenarios/paper_fig11.scn")).expect("shipped scenario parses")
}

const SEG_CHARS: &[u8] = b"abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789_-";

fn segment<R: Rng>(rng: &mut R) -> String {
    let n = rng.random_range(1..=12);
    (0..n).map(|_| *SEG_CHARS.choose(rng).unwrap() as char).collect()
}

pub fn topic<R: Rng>(rng: &mut R) -> Topic {
    let n = rng.random_range(1..=5);
    let s: Vec<String> = (0..n).map(|_| segment(rng)).collect();
    Topic::new(s.join("/")).unwrap()
}

pub fn pattern<R: Rng>(rng: &mut R) -> Pattern {
    let n = rng.random_range(1..=5);
    let s: Vec<String> = (0..n)
        .map(|_| if rng.random_bool(0.3) { "*".to_string() } else { segment(rng) })
        .collect();
    Pattern::new(s.join("/")).unwrap()
}

pub fn finite_f64<R: Rng>(rng: &mut R) -> f64 {
    match rng.random_range(0..4) {
        0 => rng.random_range(-1e6..1e6),
        1 => rng.random_range(-100i64..100) as f64,
        2 => [0.0, -0.0, f64::MIN_POSITIVE, f64::MAX, f64::MIN, 1e-300, 5e-324][rng.random_range(0..7)],
        _ => loop {
            let v = f64::from_bits(rng.next_u64());
            if v.is_finite() {
                break v;
            }
        },
    }
}

pub fn text<R: Rng>(rng: &mut R) -> String {
    let n = rng.random_range(0..40);
    let pool = ['a', 'Z', '0', ' ', '"', '\\', '/', '*', 'é', '€', '漢', '🙂', ':', '='];
    (0..n).map(|_| *pool.choose(rng).unwrap()).collect()
}

pub fn payload<R: Rng>(rng: &mut R) -> Payload {
    if rng.random_bool(0.7) {
        Payload::num(finite_f64(rng)).unwrap()
    } else {
        Payload::text(text(rng)).unwrap()
    }
}

pub fn telemetry<R: Rng>(rng: &mut R) -> Telemetry {
    Telemetry::new(topic(rng), rng.next_u64(), rng.next_u64(), payload(rng))
}

/// Any well-formed frame.
pub fn frame<R: Rng>(rng: &mut R) -> Frame {
    match rng.random_range(0..10) {
        0 => Frame::Set(telemetry(rng)),
        1 => Frame::Get(topic(rng)),
        2 => Frame::Pub(telemetry(rng)),
        3 => Frame::Sub(pattern(rng)),
        4 => Frame::Unsub(pattern(rng)),
        5 => Frame::Ping,
        6 => Frame::Pong { ts_us: rng.next_u64() },
        7 => Frame::Ok(if rng.random_bool(0.5) { Some(rng.next_u64()) } else { None }),
        8 => Frame::Err(segment(rng)),
        _ => Frame::Msg(telemetry(rng)),
    }
}

/// Garbage, near-misses and mutations of valid lines.
pub fn fuzz_line<R: Rng>(rng: &mut R) -> Vec<u8> {
    let mut line = gridloop::hub::encode_frame(&frame(rng));
    match rng.random_range(0..6) {
        0 => {
            let n = rng.random_range(0..200);
            line = (0..n).map(|_| rng.random()).collect();
        }
        1 => {
            for _ in 0..rng.random_range(1..4) {
                let i = rng.random_range(0..line.len());
                line[i] = rng.random();
            }
        }
        2 => {
            let cut = rng.random_range(0..line.len());
            line.truncate(cut);
        }
        3 => {
            let i = rng.random_range(0..line.len());
            let b = *b" \n\"\\*/-.e+0\xff\x00".choose(rng).unwrap();
            line.insert(i, b);
        }
        4 => {
            let n = rng.random_range(4000..5000);
            line = vec![b'A'; n];
            line.push(b'\n');
        }
        _ => {
            let words = ["SET", "GET", "PUB", "SUB", "UNSUB", "PING", "PONG", "OK", "ERR", "MSG", "a/b", "*", "1", "-1", "1e999", "nan", "inf", "\"x", "\"\"", "18446744073709551616", ""];
            let n = rng.random_range(0..7);
            let s: Vec<&str> = (0..n).map(|_| *words.choose(rng).unwrap()).collect();
            line = s.join(" ").into_bytes();
            line.push(b'\n');
        }
    }
    line
}
