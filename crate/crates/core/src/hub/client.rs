//! Socket clients for the hub.
//!
//! [`connect_with_retry`] opens the raw stream; [`HubClient`] layers blocking
//! request/response calls on top of it and routes subscription traffic to a
//! separate channel.

use std::collections::VecDeque;
use std::io::{self, BufReader, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use thiserror::Error;

use super::frame::{encode_frame, parse_frame, Frame, Pattern, Payload, Telemetry, Topic};
use super::server::{read_bounded_line, LineRead};
use super::Measurement;

pub const DEFAULT_CONNECT_TIMEOUT: Duration = Duration::from_secs(5);
pub const DEFAULT_REQUEST_TIMEOUT: Duration = Duration::from_secs(5);

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("could not reach hub at {addr} within {waited:?}")]
    ConnectTimeout { addr: String, waited: Duration },
    #[error("no reply within {0:?}")]
    Timeout(Duration),
    #[error("hub replied {0}")]
    Rejected(String),
    #[error("unexpected reply {0}")]
    UnexpectedReply(String),
    #[error("connection closed")]
    Closed,
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Connects, retrying refused attempts until `timeout` has elapsed.
pub fn connect_with_retry(addr: &str, timeout: Duration) -> Result<TcpStream, ClientError> {
    let start = Instant::now();
    loop {
        let remaining = timeout.saturating_sub(start.elapsed());
        if remaining.is_zero() {
            return Err(ClientError::ConnectTimeout {
                addr: addr.to_string(),
                waited: start.elapsed(),
            });
        }
        let attempt = addr.to_socket_addrs().ok().and_then(|mut it| it.next());
        if let Some(sock) = attempt {
            if let Ok(s) = TcpStream::connect_timeout(&sock, remaining) {
                s.set_nodelay(true)?;
                return Ok(s);
            }
        }
        thread::sleep(Duration::from_millis(50).min(remaining));
    }
}

/// Spawns a thread that parses incoming lines and forwards frames; the
/// receiver disconnects when the stream ends.
pub fn spawn_frame_reader(stream: TcpStream) -> io::Result<Receiver<Frame>> {
    let (tx, rx) = mpsc::channel();
    thread::Builder::new()
        .name("hub-client-reader".into())
        .spawn(move || {
            let mut reader = BufReader::new(stream);
            while let Ok(LineRead::Line(bytes)) = read_bounded_line(&mut reader) {
                // The hub only emits canonical frames; anything else is dropped.
                if let Ok(f) = parse_frame(&bytes) {
                    if tx.send(f).is_err() {
                        break;
                    }
                }
            }
        })?;
    Ok(rx)
}

#[derive(Debug, Clone)]
enum Pending {
    Get(Topic),
    Other,
}

/// Blocking client. Handles may move between threads but are not shared.
pub struct HubClient {
    stream: TcpStream,
    pending: Arc<Mutex<VecDeque<Pending>>>,
    replies: Receiver<Frame>,
    messages: Receiver<Measurement>,
    timeout: Duration,
}

impl HubClient {
    pub fn connect(addr: &str, timeout: Duration) -> Result<Self, ClientError> {
        let stream = connect_with_retry(addr, timeout)?;
        let read_half = stream.try_clone()?;
        let pending: Arc<Mutex<VecDeque<Pending>>> = Arc::default();
        let (reply_tx, replies) = mpsc::channel();
        let (msg_tx, messages) = mpsc::channel();
        let frames = spawn_frame_reader(read_half)?;
        let route_pending = pending.clone();
        thread::Builder::new()
            .name("hub-client-router".into())
            .spawn(move || route(frames, route_pending, reply_tx, msg_tx))?;
        Ok(Self {
            stream,
            pending,
            replies,
            messages,
            timeout: DEFAULT_REQUEST_TIMEOUT,
        })
    }

    pub fn set_timeout(&mut self, timeout: Duration) {
        self.timeout = timeout;
    }

    fn request(&mut self, frame: Frame) -> Result<Frame, ClientError> {
        let kind = match &frame {
            Frame::Get(t) => Pending::Get(t.clone()),
            _ => Pending::Other,
        };
        self.pending.lock().expect("pending lock").push_back(kind);
        self.stream.write_all(&encode_frame(&frame))?;
        match self.replies.recv_timeout(self.timeout) {
            Ok(f) => Ok(f),
            Err(RecvTimeoutError::Timeout) => Err(ClientError::Timeout(self.timeout)),
            Err(RecvTimeoutError::Disconnected) => Err(ClientError::Closed),
        }
    }

    fn expect_ok(reply: Frame) -> Result<Option<u64>, ClientError> {
        match reply {
            Frame::Ok(n) => Ok(n),
            Frame::Err(e) => Err(ClientError::Rejected(e)),
            other => Err(ClientError::UnexpectedReply(other.to_string())),
        }
    }

    pub fn set(&mut self, topic: &Topic, seq: u64, ts_us: u64, value: Payload) -> Result<(), ClientError> {
        let reply = self.request(Frame::Set(Telemetry::new(topic.clone(), seq, ts_us, value)))?;
        Self::expect_ok(reply).map(|_| ())
    }

    pub fn get(&mut self, topic: &Topic) -> Result<Option<Measurement>, ClientError> {
        match self.request(Frame::Get(topic.clone()))? {
            Frame::Msg(t) => Ok(Some(Measurement::from_wire(t))),
            Frame::Err(e) if e == "nokey" => Ok(None),
            other => Err(ClientError::UnexpectedReply(other.to_string())),
        }
    }

    /// Returns the number of subscriptions the hub delivered to.
    pub fn publish(&mut self, topic: &Topic, seq: u64, ts_us: u64, value: Payload) -> Result<u64, ClientError> {
        let reply = self.request(Frame::Pub(Telemetry::new(topic.clone(), seq, ts_us, value)))?;
        Self::expect_ok(reply).map(|n| n.unwrap_or(0))
    }

    pub fn subscribe(&mut self, pattern: &Pattern) -> Result<(), ClientError> {
        let reply = self.request(Frame::Sub(pattern.clone()))?;
        Self::expect_ok(reply).map(|_| ())
    }

    pub fn unsubscribe(&mut self, pattern: &Pattern) -> Result<(), ClientError> {
        let reply = self.request(Frame::Unsub(pattern.clone()))?;
        Self::expect_ok(reply).map(|_| ())
    }

    /// Round-trip time measured on this process's clock.
    pub fn ping(&mut self) -> Result<Duration, ClientError> {
        let start = Instant::now();
        match self.request(Frame::Ping)? {
            Frame::Pong { .. } => Ok(start.elapsed()),
            other => Err(ClientError::UnexpectedReply(other.to_string())),
        }
    }

    /// Stream of subscription deliveries.
    pub fn messages(&self) -> &Receiver<Measurement> {
        &self.messages
    }
}

fn route(
    frames: Receiver<Frame>,
    pending: Arc<Mutex<VecDeque<Pending>>>,
    replies: Sender<Frame>,
    messages: Sender<Measurement>,
) {
    for frame in frames {
        let mut pending = pending.lock().expect("pending lock");
        let is_reply = match (&frame, pending.front()) {
            (Frame::Msg(t), Some(Pending::Get(topic))) => &t.topic == topic,
            (Frame::Msg(_), _) => false,
            (_, Some(_)) => true,
            (_, None) => false,
        };
        if is_reply {
            pending.pop_front();
            drop(pending);
            if replies.send(frame).is_err() {
                return;
            }
        } else if let Frame::Msg(t) = frame {
            drop(pending);
            let _ = messages.send(Measurement::from_wire(t));
        }
    }
}
