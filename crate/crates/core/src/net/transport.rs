use std::collections::VecDeque;
use std::io::BufReader;
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use log::{debug, warn};
use sha2::{Digest, Sha256};

use super::wire::{Message, WireError, MAX_FRAME_LEN};

/// Per-connection server state.
#[derive(Debug, Default, Clone)]
pub struct ConnContext {
    pub credential: Option<[u8; 16]>,
    pub peer: String,
}

/// Server side: one reply per request.
pub trait Handler: Send + Sync {
    fn handle(&self, conn: &mut ConnContext, msg: Message) -> Message;
}

/// Client side. Replies arrive in request order; `send` may be called
/// several times before the matching `recv`s.
pub trait Transport: Send + Sync {
    fn send(&self, msg: &Message) -> Result<(), WireError>;
    fn recv(&self) -> Result<Message, WireError>;

    fn request(&self, msg: &Message) -> Result<Message, WireError> {
        self.send(msg)?;
        self.recv()
    }
}

impl<T: Transport + ?Sized> Transport for Arc<T> {
    fn send(&self, msg: &Message) -> Result<(), WireError> {
        (**self).send(msg)
    }

    fn recv(&self) -> Result<Message, WireError> {
        (**self).recv()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Sent,
    Received,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TranscriptEntry {
    pub peer: String,
    pub direction: Direction,
    pub msg_type: u8,
    pub name: &'static str,
    pub bytes: usize,
    pub sha256: [u8; 32],
    /// Full frame, when the transcript keeps frames.
    pub frame: Option<Vec<u8>>,
}

#[derive(Debug, Default)]
struct TranscriptInner {
    entries: Vec<TranscriptEntry>,
    keep_frames: bool,
}

/// Shared log of frames sent and received, with sizes and hashes.
#[derive(Clone, Debug, Default)]
pub struct Transcript(Arc<Mutex<TranscriptInner>>);

impl Transcript {
    pub fn new() -> Self {
        Self::default()
    }

    /// Also keep the full bytes of every frame, for content inspection.
    pub fn keeping_frames() -> Self {
        Transcript(Arc::new(Mutex::new(TranscriptInner { entries: Vec::new(), keep_frames: true })))
    }

    pub(crate) fn record(&self, peer: &str, direction: Direction, msg: &Message, frame: &[u8]) {
        let mut inner = self.0.lock().unwrap();
        let keep = inner.keep_frames;
        inner.entries.push(TranscriptEntry {
            peer: peer.to_string(),
            direction,
            msg_type: msg.type_code(),
            name: msg.name(),
            bytes: frame.len(),
            sha256: Sha256::digest(frame).into(),
            frame: keep.then(|| frame.to_vec()),
        });
    }

    pub fn entries(&self) -> Vec<TranscriptEntry> {
        self.0.lock().unwrap().entries.clone()
    }

    pub fn len(&self) -> usize {
        self.0.lock().unwrap().entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn clear(&self) {
        self.0.lock().unwrap().entries.clear();
    }

    pub fn total_bytes(&self) -> usize {
        self.0.lock().unwrap().entries.iter().map(|e| e.bytes).sum()
    }

    pub fn bytes_in(&self, direction: Direction) -> usize {
        self.0.lock().unwrap().entries.iter().filter(|e| e.direction == direction).map(|e| e.bytes).sum()
    }

    /// Bytes of frames whose name is in `names`.
    pub fn bytes_of(&self, names: &[&str]) -> usize {
        self.0.lock().unwrap().entries.iter().filter(|e| names.contains(&e.name)).map(|e| e.bytes).sum()
    }
}

/// Server-side wrapper that records every inbound request and its reply.
pub struct RecordingHandler {
    inner: Arc<dyn Handler>,
    transcript: Transcript,
    label: String,
}

impl RecordingHandler {
    pub fn new(inner: Arc<dyn Handler>, transcript: Transcript, label: impl Into<String>) -> Self {
        RecordingHandler { inner, transcript, label: label.into() }
    }
}

impl Handler for RecordingHandler {
    fn handle(&self, conn: &mut ConnContext, msg: Message) -> Message {
        self.transcript.record(&self.label, Direction::Received, &msg, &msg.encode());
        let reply = self.inner.handle(conn, msg);
        self.transcript.record(&self.label, Direction::Sent, &reply, &reply.encode());
        reply
    }
}

/// In-process transport. Messages still go through the byte codec, so
/// sizes and validation match the TCP path.
pub struct LocalTransport {
    handler: Arc<dyn Handler>,
    ctx: Mutex<ConnContext>,
    replies: Mutex<VecDeque<Vec<u8>>>,
    peer: String,
    transcript: Option<Transcript>,
}

impl LocalTransport {
    pub fn new(handler: Arc<dyn Handler>) -> Self {
        let peer = "local".to_string();
        LocalTransport {
            handler,
            ctx: Mutex::new(ConnContext { credential: None, peer: "local".into() }),
            replies: Mutex::new(VecDeque::new()),
            peer,
            transcript: None,
        }
    }

    /// Record every frame into `t`, tagged with `peer`.
    pub fn with_transcript(mut self, t: Transcript, peer: impl Into<String>) -> Self {
        self.transcript = Some(t);
        self.peer = peer.into();
        self
    }
}

impl Transport for LocalTransport {
    fn send(&self, msg: &Message) -> Result<(), WireError> {
        let out = msg.encode();
        if out.len() - 4 > MAX_FRAME_LEN {
            return Err(WireError::TooLarge { len: out.len() - 4 });
        }
        let decoded = Message::decode(&out)?;
        if let Some(t) = &self.transcript {
            t.record(&self.peer, Direction::Sent, msg, &out);
        }
        let reply = {
            let mut ctx = self.ctx.lock().unwrap();
            self.handler.handle(&mut ctx, decoded)
        };
        self.replies.lock().unwrap().push_back(reply.encode());
        Ok(())
    }

    fn recv(&self) -> Result<Message, WireError> {
        let back = self.replies.lock().unwrap().pop_front().ok_or_else(|| WireError::Io("no pending reply".into()))?;
        let reply = Message::decode(&back)?;
        if let Some(t) = &self.transcript {
            t.record(&self.peer, Direction::Received, &reply, &back);
        }
        Ok(reply)
    }
}

pub struct TcpTransport {
    reader: Mutex<BufReader<TcpStream>>,
    writer: Mutex<TcpStream>,
    peer: String,
    transcript: Option<Transcript>,
}

impl TcpTransport {
    pub fn connect<A: ToSocketAddrs>(addr: A) -> Result<Self, WireError> {
        Self::connect_with_timeout(addr, None)
    }

    /// Reads that wait longer than `timeout` fail the request.
    pub fn connect_with_timeout<A: ToSocketAddrs>(addr: A, timeout: Option<Duration>) -> Result<Self, WireError> {
        let s = TcpStream::connect(addr)?;
        s.set_nodelay(true)?;
        s.set_read_timeout(timeout)?;
        let peer = s.peer_addr().map(|a| a.to_string()).unwrap_or_default();
        Ok(TcpTransport {
            reader: Mutex::new(BufReader::new(s.try_clone()?)),
            writer: Mutex::new(s),
            peer,
            transcript: None,
        })
    }

    /// Record every frame into `t`, tagged with `peer`.
    pub fn with_transcript(mut self, t: Transcript, peer: impl Into<String>) -> Self {
        self.transcript = Some(t);
        self.peer = peer.into();
        self
    }
}

impl Transport for TcpTransport {
    fn send(&self, msg: &Message) -> Result<(), WireError> {
        let out = msg.encode();
        if out.len() - 4 > MAX_FRAME_LEN {
            return Err(WireError::TooLarge { len: out.len() - 4 });
        }
        let mut w = self.writer.lock().unwrap();
        std::io::Write::write_all(&mut *w, &out)?;
        std::io::Write::flush(&mut *w)?;
        if let Some(t) = &self.transcript {
            t.record(&self.peer, Direction::Sent, msg, &out);
        }
        Ok(())
    }

    fn recv(&self) -> Result<Message, WireError> {
        let mut reader = self.reader.lock().unwrap();
        let (reply, raw) =
            Message::read_from(&mut *reader)?.ok_or_else(|| WireError::Io("connection closed by server".into()))?;
        if let Some(t) = &self.transcript {
            t.record(&self.peer, Direction::Received, &reply, &raw);
        }
        Ok(reply)
    }
}

/// A running TCP server; one thread per connection.
pub struct TcpServer {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    accept: Option<JoinHandle<()>>,
}

impl TcpServer {
    pub fn spawn<A: ToSocketAddrs>(addr: A, handler: Arc<dyn Handler>) -> Result<Self, WireError> {
        let listener = TcpListener::bind(addr)?;
        let addr = listener.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let stop2 = stop.clone();
        let accept = std::thread::spawn(move || {
            for conn in listener.incoming() {
                if stop2.load(Ordering::SeqCst) {
                    break;
                }
                match conn {
                    Ok(s) => {
                        let h = handler.clone();
                        std::thread::spawn(move || serve_connection(s, h.as_ref()));
                    }
                    Err(e) => warn!("accept failed: {e}"),
                }
            }
        });
        Ok(TcpServer { addr, stop, accept: Some(accept) })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Block until the accept loop ends (it runs until `shutdown`).
    pub fn join(mut self) {
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }

    pub fn shutdown(mut self) {
        self.stop_accepting();
    }

    fn stop_accepting(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        // Wake the blocking accept.
        let _ = TcpStream::connect(self.addr);
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }
}

impl Drop for TcpServer {
    fn drop(&mut self) {
        if self.accept.is_some() {
            self.stop_accepting();
        }
    }
}

fn serve_connection(stream: TcpStream, handler: &dyn Handler) {
    let peer = stream.peer_addr().map(|a| a.to_string()).unwrap_or_default();
    let mut ctx = ConnContext { credential: None, peer: peer.clone() };
    let _ = stream.set_nodelay(true);
    let Ok(rd) = stream.try_clone() else { return };
    let mut reader = BufReader::new(rd);
    let mut writer = stream;
    loop {
        let reply = match Message::read_from(&mut reader) {
            Ok(None) => return,
            Ok(Some((msg, _))) => handler.handle(&mut ctx, msg),
            Err(WireError::Io(e)) => {
                debug!("{peer}: {e}");
                return;
            }
            Err(e) => {
                // The stream position is unknown after a bad frame; reply and close.
                let _ = Message::error(super::ErrorCode::Protocol, e.to_string()).write_to(&mut writer);
                return;
            }
        };
        if let Err(e) = reply.write_to(&mut writer) {
            debug!("{peer}: {e}");
            return;
        }
    }
}
