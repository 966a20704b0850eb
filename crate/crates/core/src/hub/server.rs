//! Socket front end for [`Hub`].
//!
//! One reader and one writer thread per connection; a single dispatcher
//! thread owns the hub, so every frame from every client is applied in one
//! total order.

use std::io::{self, BufRead, BufReader, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Instant;

use log::{debug, info, warn};

use super::frame::{encode_frame, MAX_FRAME_LEN};
use super::{ConnId, Hub};

/// Result of reading one bounded line.
#[derive(Debug, PartialEq, Eq)]
pub enum LineRead {
    Line(Vec<u8>),
    /// Line exceeded the frame limit; the remainder up to the newline was
    /// discarded.
    Oversize,
    Eof,
}

/// Reads up to and including the next `\n`, never buffering more than one
/// frame's worth of bytes.
pub fn read_bounded_line<R: BufRead>(reader: &mut R) -> io::Result<LineRead> {
    let mut buf = Vec::new();
    let n = reader
        .by_ref()
        .take(MAX_FRAME_LEN as u64 + 1)
        .read_until(b'\n', &mut buf)?;
    if n == 0 {
        return Ok(LineRead::Eof);
    }
    if buf.last() == Some(&b'\n') {
        return Ok(LineRead::Line(buf));
    }
    if buf.len() <= MAX_FRAME_LEN {
        // EOF in the middle of a line; hand it over so the parser rejects it.
        return Ok(LineRead::Line(buf));
    }
    let mut sink = Vec::new();
    loop {
        sink.clear();
        let n = reader.by_ref().take(MAX_FRAME_LEN as u64).read_until(b'\n', &mut sink)?;
        if n == 0 || sink.last() == Some(&b'\n') {
            return Ok(LineRead::Oversize);
        }
    }
}

enum Event {
    Open {
        id: ConnId,
        writer: Sender<Vec<u8>>,
    },
    Line {
        id: ConnId,
        bytes: Vec<u8>,
    },
    Oversize {
        id: ConnId,
    },
    Closed {
        id: ConnId,
    },
    Stop,
}

pub struct HubServer {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    events: Sender<Event>,
    accept: Option<JoinHandle<()>>,
    dispatch: Option<JoinHandle<Hub>>,
}

impl HubServer {
    /// Binds `listen` and starts serving. PONG timestamps count microseconds
    /// from `epoch`.
    pub fn spawn<A: ToSocketAddrs>(listen: A, epoch: Instant) -> io::Result<Self> {
        let listener = TcpListener::bind(listen)?;
        let addr = listener.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let (tx, rx) = mpsc::channel::<Event>();

        let dispatch = thread::Builder::new()
            .name("hub-dispatch".into())
            .spawn(move || dispatch_loop(rx, epoch))?;

        let accept_tx = tx.clone();
        let accept_stop = stop.clone();
        let accept = thread::Builder::new()
            .name("hub-accept".into())
            .spawn(move || accept_loop(listener, accept_tx, accept_stop))?;

        info!("hub listening on {addr}");
        Ok(Self {
            addr,
            stop,
            events: tx,
            accept: Some(accept),
            dispatch: Some(dispatch),
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Stops accepting, closes the dispatcher and returns the final hub state.
    pub fn shutdown(mut self) -> Option<Hub> {
        self.stop_threads()
    }

    /// Blocks until the accept loop ends (it only ends on shutdown).
    pub fn join(mut self) {
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }

    fn stop_threads(&mut self) -> Option<Hub> {
        self.stop.store(true, Ordering::SeqCst);
        // Wake the blocking accept.
        let _ = TcpStream::connect(self.addr);
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
        let _ = self.events.send(Event::Stop);
        self.dispatch.take().and_then(|h| h.join().ok())
    }
}

impl Drop for HubServer {
    fn drop(&mut self) {
        if self.dispatch.is_some() {
            self.stop_threads();
        }
    }
}

fn accept_loop(listener: TcpListener, tx: Sender<Event>, stop: Arc<AtomicBool>) {
    let mut next_id: ConnId = 0;
    for stream in listener.incoming() {
        if stop.load(Ordering::SeqCst) {
            break;
        }
        let stream = match stream {
            Ok(s) => s,
            Err(e) => {
                warn!("accept failed: {e}");
                continue;
            }
        };
        let _ = stream.set_nodelay(true);
        let id = next_id;
        next_id += 1;
        let Ok(write_half) = stream.try_clone() else {
            continue;
        };
        let (wtx, wrx) = mpsc::channel::<Vec<u8>>();
        if tx.send(Event::Open { id, writer: wtx }).is_err() {
            break;
        }
        let _ = thread::Builder::new()
            .name(format!("hub-w{id}"))
            .spawn(move || writer_loop(write_half, wrx));
        let rtx = tx.clone();
        let _ = thread::Builder::new()
            .name(format!("hub-r{id}"))
            .spawn(move || reader_loop(id, stream, rtx));
    }
}

fn reader_loop(id: ConnId, stream: TcpStream, tx: Sender<Event>) {
    let mut reader = BufReader::new(stream);
    loop {
        let ev = match read_bounded_line(&mut reader) {
            Ok(LineRead::Line(bytes)) => Event::Line { id, bytes },
            Ok(LineRead::Oversize) => Event::Oversize { id },
            Ok(LineRead::Eof) | Err(_) => {
                let _ = tx.send(Event::Closed { id });
                return;
            }
        };
        if tx.send(ev).is_err() {
            return;
        }
    }
}

fn writer_loop(mut stream: TcpStream, rx: Receiver<Vec<u8>>) {
    for bytes in rx {
        if stream.write_all(&bytes).is_err() {
            break;
        }
    }
    let _ = stream.shutdown(std::net::Shutdown::Both);
}

fn dispatch_loop(rx: Receiver<Event>, epoch: Instant) -> Hub {
    let mut hub = Hub::new();
    let mut writers = std::collections::BTreeMap::new();
    let mut ids = std::collections::BTreeMap::new();
    for ev in rx {
        let now = epoch.elapsed().as_micros() as u64;
        match ev {
            Event::Open { id, writer } => {
                let hub_id = hub.connect(&format!("conn{id}"));
                ids.insert(id, hub_id);
                writers.insert(hub_id, writer);
                debug!("connection {id} open");
            }
            Event::Line { id, bytes } => {
                if let Some(&c) = ids.get(&id) {
                    hub.handle_line(c, &bytes, now);
                }
            }
            Event::Oversize { id } => {
                if let Some(&c) = ids.get(&id) {
                    hub.handle_line(c, b"", now);
                }
            }
            Event::Closed { id } => {
                if let Some(c) = ids.remove(&id) {
                    hub.disconnect(c);
                    writers.remove(&c);
                    debug!("connection {id} closed");
                }
            }
            Event::Stop => break,
        }
        for (to, frame) in hub.drain_outbox() {
            if let Some(w) = writers.get(&to) {
                let _ = w.send(encode_frame(&frame));
            }
        }
    }
    hub
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    #[test]
    fn bounded_reader_splits_lines() {
        let mut r = Cursor::new(b"PING\nGET x\npartial".to_vec());
        assert_eq!(read_bounded_line(&mut r).unwrap(), LineRead::Line(b"PING\n".to_vec()));
        assert_eq!(read_bounded_line(&mut r).unwrap(), LineRead::Line(b"GET x\n".to_vec()));
        assert_eq!(read_bounded_line(&mut r).unwrap(), LineRead::Line(b"partial".to_vec()));
        assert_eq!(read_bounded_line(&mut r).unwrap(), LineRead::Eof);
    }

    #[test]
    fn bounded_reader_discards_oversize() {
        let mut data = vec![b'a'; MAX_FRAME_LEN * 3];
        data.extend_from_slice(b"\nPING\n");
        let mut r = Cursor::new(data);
        assert_eq!(read_bounded_line(&mut r).unwrap(), LineRead::Oversize);
        assert_eq!(read_bounded_line(&mut r).unwrap(), LineRead::Line(b"PING\n".to_vec()));
    }
}
