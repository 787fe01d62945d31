//! Byte-stream transport for the controller emulator: `/`-delimited framing,
//! a threaded controller owner with FIFO request handling, and a TCP
//! endpoint so external tools can talk to an emulated controller.

use super::command::{parse_command, Command, Response};
use super::controller::ControllerState;
use std::io::{self, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::mpsc;
use std::thread;
use std::time::{Duration, Instant};

/// Longest token accepted before the decoder gives up on it.
pub const MAX_TOKEN_LEN: usize = 64;

/// Splits an incoming byte stream into `/`-terminated tokens.
#[derive(Debug, Default)]
pub struct StreamDecoder {
    buf: Vec<u8>,
    overflowed: bool,
}

impl StreamDecoder {
    pub fn new() -> Self {
        Self::default()
    }

    /// Feeds bytes and returns every completed token. A token that grows past
    /// [`MAX_TOKEN_LEN`] is discarded up to its terminator and reported as an
    /// empty token, which parses as malformed.
    pub fn feed(&mut self, bytes: &[u8]) -> Vec<Vec<u8>> {
        let mut out = Vec::new();
        for &b in bytes {
            if self.overflowed {
                if b == b'/' {
                    self.overflowed = false;
                    out.push(Vec::new());
                }
                continue;
            }
            // Whitespace between tokens (e.g. from a terminal) is ignored.
            if self.buf.is_empty() && b.is_ascii_whitespace() {
                continue;
            }
            self.buf.push(b);
            if b == b'/' {
                out.push(std::mem::take(&mut self.buf));
            } else if self.buf.len() > MAX_TOKEN_LEN {
                self.buf.clear();
                self.overflowed = true;
            }
        }
        out
    }
}

/// Time source for a controller owner.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClockMode {
    /// Motion advances with wall-clock time.
    RealTime,
    /// Motion advances only through [`ControllerHandle::advance`].
    Manual,
}

enum Request {
    Bytes(Vec<u8>, mpsc::Sender<Vec<u8>>),
    Command(Command, mpsc::Sender<Response>),
    Advance(f64, mpsc::Sender<()>),
    Snapshot(mpsc::Sender<ControllerState>),
}

/// Cloneable handle to a controller owned by a dedicated thread. Requests
/// from all handles are executed strictly in the order they are enqueued.
#[derive(Clone)]
pub struct ControllerHandle {
    tx: mpsc::Sender<Request>,
    id: u8,
}

impl std::fmt::Debug for ControllerHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ControllerHandle").field("id", &self.id).finish()
    }
}

impl ControllerHandle {
    pub fn spawn(state: ControllerState, clock: ClockMode) -> Self {
        let id = state.id;
        let (tx, rx) = mpsc::channel::<Request>();
        thread::Builder::new()
            .name(format!("controller-{id}"))
            .spawn(move || run_owner(state, clock, rx))
            .expect("spawn controller thread");
        ControllerHandle { tx, id }
    }

    pub fn id(&self) -> u8 {
        self.id
    }

    /// Executes every `/`-terminated token in `bytes` and returns the
    /// concatenated replies.
    pub fn transact(&self, bytes: &[u8]) -> Vec<u8> {
        let (tx, rx) = mpsc::channel();
        if self.tx.send(Request::Bytes(bytes.to_vec(), tx)).is_err() {
            return Vec::new();
        }
        rx.recv().unwrap_or_default()
    }

    pub fn execute(&self, cmd: Command) -> Response {
        let (tx, rx) = mpsc::channel();
        if self.tx.send(Request::Command(cmd, tx)).is_err() {
            return Response::NotConnected;
        }
        rx.recv().unwrap_or(Response::NotConnected)
    }

    /// Advances a manual clock by `dt` seconds (ignored in real-time mode).
    pub fn advance(&self, dt: f64) {
        let (tx, rx) = mpsc::channel();
        if self.tx.send(Request::Advance(dt, tx)).is_ok() {
            let _ = rx.recv();
        }
    }

    pub fn snapshot(&self) -> Option<ControllerState> {
        let (tx, rx) = mpsc::channel();
        self.tx.send(Request::Snapshot(tx)).ok()?;
        rx.recv().ok()
    }
}

fn run_owner(mut state: ControllerState, clock: ClockMode, rx: mpsc::Receiver<Request>) {
    let mut last = Instant::now();
    let mut decoder = StreamDecoder::new();
    while let Ok(req) = rx.recv() {
        if clock == ClockMode::RealTime {
            let now = Instant::now();
            state.tick(now.duration_since(last).as_secs_f64());
            last = now;
        }
        match req {
            Request::Bytes(bytes, reply) => {
                let mut out = Vec::new();
                for token in decoder.feed(&bytes) {
                    out.extend(state.execute_bytes(&token).to_bytes());
                }
                let _ = reply.send(out);
            }
            Request::Command(cmd, reply) => {
                let _ = reply.send(state.execute(cmd));
            }
            Request::Advance(dt, reply) => {
                if clock == ClockMode::Manual {
                    state.tick(dt);
                }
                let _ = reply.send(());
            }
            Request::Snapshot(reply) => {
                let _ = reply.send(state.clone());
            }
        }
    }
}

/// Serves one controller on `listener`; each connection gets its own thread
/// and all connections share the controller's FIFO. Returns the bound address.
pub fn serve_tcp(listener: TcpListener, handle: ControllerHandle) -> io::Result<SocketAddr> {
    let addr = listener.local_addr()?;
    thread::Builder::new()
        .name(format!("controller-{}-listener", handle.id()))
        .spawn(move || {
            for stream in listener.incoming() {
                let Ok(stream) = stream else { continue };
                let handle = handle.clone();
                let _ = thread::Builder::new()
                    .name(format!("controller-{}-conn", handle.id()))
                    .spawn(move || {
                        let _ = serve_connection(stream, &handle);
                    });
            }
        })?;
    Ok(addr)
}

fn serve_connection(mut stream: TcpStream, handle: &ControllerHandle) -> io::Result<()> {
    let mut decoder = StreamDecoder::new();
    let mut buf = [0u8; 256];
    loop {
        let n = stream.read(&mut buf)?;
        if n == 0 {
            return Ok(());
        }
        for token in decoder.feed(&buf[..n]) {
            let reply = match parse_command(&token) {
                Ok(cmd) => handle.execute(cmd),
                Err(_) => Response::BadCommand,
            };
            stream.write_all(&reply.to_bytes())?;
        }
    }
}

/// Minimal blocking client for a TCP controller endpoint.
pub struct TcpControllerClient {
    stream: TcpStream,
    decoder: StreamDecoder,
}

impl TcpControllerClient {
    pub fn connect(addr: SocketAddr) -> io::Result<Self> {
        let stream = TcpStream::connect(addr)?;
        stream.set_read_timeout(Some(Duration::from_secs(5)))?;
        Ok(TcpControllerClient {
            stream,
            decoder: StreamDecoder::new(),
        })
    }

    /// Sends one command token and waits for one reply token.
    pub fn request(&mut self, bytes: &[u8]) -> io::Result<Vec<u8>> {
        self.stream.write_all(bytes)?;
        let mut buf = [0u8; 256];
        loop {
            let n = self.stream.read(&mut buf)?;
            if n == 0 {
                return Err(io::Error::new(io::ErrorKind::UnexpectedEof, "controller closed"));
            }
            if let Some(token) = self.decoder.feed(&buf[..n]).into_iter().next() {
                return Ok(token);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decoder_splits_and_buffers() {
        let mut d = StreamDecoder::new();
        assert_eq!(d.feed(b"?R/?X"), vec![b"?R/".to_vec()]);
        assert_eq!(d.feed(b"/X:5/"), vec![b"?X/".to_vec(), b"X:5/".to_vec()]);
        assert!(d.feed(b"\r\n").is_empty());
    }

    #[test]
    fn decoder_discards_oversized_tokens() {
        let mut d = StreamDecoder::new();
        let long = vec![b'A'; MAX_TOKEN_LEN + 10];
        assert!(d.feed(&long).is_empty());
        assert_eq!(d.feed(b"junk/?R/"), vec![Vec::new(), b"?R/".to_vec()]);
    }

    #[test]
    fn handle_transacts_in_order() {
        let h = ControllerHandle::spawn(ControllerState::new(1), ClockMode::Manual);
        assert_eq!(h.transact(b"?R/VX=1000/X:500/"), b"OK/OK/OK/".to_vec());
        h.advance(0.5);
        assert_eq!(h.transact(b"?X/"), b"X=500/".to_vec());
        assert_eq!(h.transact(b"Q9/"), b"ERR=CMD/".to_vec());
    }

    #[test]
    fn tcp_endpoint_round_trip() {
        let h = ControllerHandle::spawn(ControllerState::new(4), ClockMode::Manual);
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = serve_tcp(listener, h.clone()).unwrap();
        let mut client = TcpControllerClient::connect(addr).unwrap();
        assert_eq!(client.request(b"?X/").unwrap(), b"ERR=NC/");
        assert_eq!(client.request(b"?R/").unwrap(), b"OK/");
        assert_eq!(client.request(b"Y=25/").unwrap(), b"OK/");
        h.advance(1.0);
        assert_eq!(client.request(b"?Y/").unwrap(), b"Y=25/");
        assert_eq!(client.request(b"hello/").unwrap(), b"ERR=CMD/");
    }
}
