//! TCP transport for the broker. One reader and one writer thread per
//! connection; the broker state sits behind a mutex and a condvar wakes
//! writers when anything is routed.

use std::io::{self, BufReader, BufWriter, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::thread::{self, JoinHandle};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use log::{debug, info, warn};
use thiserror::Error;

use super::broker::{Broker, BrokerError, ClientId};
use super::codec::{CodecError, Message, Topic, HEADER_LEN};
use super::control::{Command, ControlError, ControlMessage, Subscription};
use crate::types::Timestamp;

pub const DEFAULT_BROKER_PORT: u16 = 7600;

#[derive(Debug, Error)]
pub enum NetError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error("handshake: {0}")]
    Handshake(String),
    #[error(transparent)]
    Control(#[from] ControlError),
    #[error(transparent)]
    Broker(#[from] BrokerError),
    #[error("connection closed")]
    Closed,
}

/// Wall-clock nanoseconds since the Unix epoch.
pub fn system_now() -> Timestamp {
    let d = SystemTime::now().duration_since(UNIX_EPOCH).unwrap_or_default();
    Timestamp(d.as_nanos() as i64)
}

/// Reads one frame. `Ok(None)` on clean EOF before a header starts.
pub fn read_frame(r: &mut impl Read) -> Result<Option<Message>, NetError> {
    let mut header = [0u8; HEADER_LEN];
    let mut got = 0;
    while got < HEADER_LEN {
        match r.read(&mut header[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => return Err(NetError::Closed),
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let needed = match Message::decode_prefix(&header) {
        Ok((m, _)) => return Ok(Some(m)),
        Err(CodecError::Incomplete { needed, .. }) => needed,
        Err(e) => return Err(e.into()),
    };
    let mut buf = header.to_vec();
    buf.resize(needed, 0);
    r.read_exact(&mut buf[HEADER_LEN..])?;
    Ok(Some(Message::decode(&buf)?))
}

pub fn write_frame(w: &mut impl Write, m: &Message) -> Result<(), NetError> {
    w.write_all(&m.encode()?)?;
    Ok(())
}

struct Shared {
    broker: Mutex<Broker>,
    routed: Condvar,
    stop: AtomicBool,
}

impl Shared {
    fn lock(&self) -> MutexGuard<'_, Broker> {
        self.broker.lock().unwrap_or_else(|p| p.into_inner())
    }
}

/// Running TCP broker. Dropping it stops accepting and closes connections.
pub struct BrokerServer {
    addr: SocketAddr,
    shared: Arc<Shared>,
    threads: Vec<JoinHandle<()>>,
}

impl BrokerServer {
    pub fn bind(addr: impl ToSocketAddrs, queue_capacity: usize) -> Result<Self, NetError> {
        let listener = TcpListener::bind(addr)?;
        let addr = listener.local_addr()?;
        listener.set_nonblocking(true)?;
        let shared = Arc::new(Shared {
            broker: Mutex::new(Broker::new(queue_capacity)),
            routed: Condvar::new(),
            stop: AtomicBool::new(false),
        });
        info!("broker listening on {addr}");
        let accept = {
            let shared = shared.clone();
            thread::spawn(move || accept_loop(listener, shared))
        };
        let sync = {
            let shared = shared.clone();
            thread::spawn(move || clock_loop(shared))
        };
        Ok(BrokerServer {
            addr,
            shared,
            threads: vec![accept, sync],
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Runs `f` against the broker state under the lock.
    pub fn with_broker<R>(&self, f: impl FnOnce(&mut Broker) -> R) -> R {
        f(&mut self.shared.lock())
    }

    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        self.shared.stop.store(true, Ordering::SeqCst);
        self.shared.routed.notify_all();
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

impl Drop for BrokerServer {
    fn drop(&mut self) {
        self.stop();
    }
}

fn accept_loop(listener: TcpListener, shared: Arc<Shared>) {
    while !shared.stop.load(Ordering::SeqCst) {
        match listener.accept() {
            Ok((stream, peer)) => {
                let shared = shared.clone();
                thread::spawn(move || {
                    if let Err(e) = serve(stream, shared) {
                        debug!("connection {peer} ended: {e}");
                    }
                });
            }
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => thread::sleep(Duration::from_millis(5)),
            Err(e) => {
                warn!("accept failed: {e}");
                thread::sleep(Duration::from_millis(50));
            }
        }
    }
}

fn clock_loop(shared: Arc<Shared>) {
    while !shared.stop.load(Ordering::SeqCst) {
        let sent = {
            let now = system_now();
            shared.lock().poll_clock_sync(now, &mut |_| now)
        };
        if !sent.is_empty() {
            shared.routed.notify_all();
        }
        thread::sleep(Duration::from_millis(50));
    }
}

fn serve(stream: TcpStream, shared: Arc<Shared>) -> Result<(), NetError> {
    stream.set_nodelay(true)?;
    stream.set_nonblocking(false)?;
    let mut reader = BufReader::new(stream.try_clone()?);
    let hello = read_frame(&mut reader)?.ok_or(NetError::Closed)?;
    let id = register(&shared, &hello)?;
    let closed = Arc::new(AtomicBool::new(false));

    let writer = {
        let shared = shared.clone();
        let closed = closed.clone();
        let stream = stream.try_clone()?;
        thread::spawn(move || writer_loop(stream, id, shared, closed))
    };

    let reason = loop {
        match read_frame(&mut reader) {
            Ok(Some(msg)) => {
                let now = system_now();
                if let Err(e) = shared.lock().publish(id, msg, now) {
                    break e.to_string();
                }
                shared.routed.notify_all();
            }
            Ok(None) => break "connection closed".to_string(),
            Err(e) => break e.to_string(),
        }
        if shared.stop.load(Ordering::SeqCst) {
            break "broker shutting down".to_string();
        }
    };
    closed.store(true, Ordering::SeqCst);
    let _ = shared.lock().disconnect(id, &reason, system_now());
    shared.routed.notify_all();
    let _ = stream.shutdown(Shutdown::Both);
    let _ = writer.join();
    Ok(())
}

fn register(shared: &Shared, hello: &Message) -> Result<ClientId, NetError> {
    if hello.topic != Topic::CONTROL {
        return Err(NetError::Handshake(format!("first frame must be CONTROL, got {}", hello.topic)));
    }
    let c = ControlMessage::decode(&hello.payload)?;
    if c.command()? != Command::Hello {
        return Err(NetError::Handshake("first frame must be cmd=hello".into()));
    }
    let name = c.get("id").ok_or(ControlError::Missing("id"))?;
    let subs = c.subscriptions()?;
    info!("{name} connected, {} subscriptions", subs.len());
    Ok(shared.lock().connect(name, subs)?)
}

fn writer_loop(stream: TcpStream, id: ClientId, shared: Arc<Shared>, closed: Arc<AtomicBool>) {
    let mut out = BufWriter::new(stream);
    loop {
        let batch: Vec<Message> = {
            let mut b = shared.lock();
            let mut batch = Vec::new();
            while let Ok(Some(env)) = b.pop(id) {
                batch.push(env.msg);
            }
            if batch.is_empty() {
                if closed.load(Ordering::SeqCst) || shared.stop.load(Ordering::SeqCst) {
                    return;
                }
                let _ = shared.routed.wait_timeout(b, Duration::from_millis(100));
                continue;
            }
            batch
        };
        for m in &batch {
            if write_frame(&mut out, m).is_err() {
                return;
            }
        }
        if out.flush().is_err() {
            return;
        }
    }
}

/// Broker connection with a background reader.
pub struct Client {
    name: String,
    subs: Vec<Subscription>,
    writer: BufWriter<TcpStream>,
    stream: TcpStream,
    rx: Receiver<Result<Message, String>>,
    seqs: std::collections::BTreeMap<Topic, u32>,
}

impl Client {
    pub fn connect(addr: impl ToSocketAddrs, name: &str, subs: &[Subscription]) -> Result<Self, NetError> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        let mut writer = BufWriter::new(stream.try_clone()?);
        let hello = Message::new(
            Topic::CONTROL,
            0,
            system_now(),
            ControlMessage::hello(name, subs).encode(),
        );
        write_frame(&mut writer, &hello)?;
        writer.flush()?;
        let (tx, rx) = mpsc::channel();
        let mut reader = BufReader::new(stream.try_clone()?);
        thread::spawn(move || loop {
            match read_frame(&mut reader) {
                Ok(Some(m)) => {
                    if tx.send(Ok(m)).is_err() {
                        return;
                    }
                }
                Ok(None) => {
                    let _ = tx.send(Err("broker closed the connection".into()));
                    return;
                }
                Err(e) => {
                    let _ = tx.send(Err(e.to_string()));
                    return;
                }
            }
        });
        let mut seqs = std::collections::BTreeMap::new();
        seqs.insert(Topic::CONTROL, 1);
        Ok(Client {
            name: name.to_string(),
            subs: subs.to_vec(),
            writer,
            stream,
            rx,
            seqs,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn subscriptions(&self) -> &[Subscription] {
        &self.subs
    }

    /// Publisher implied by our subscriptions for `topic`, when unique.
    /// Frames do not name their publisher, so this is the best a TCP
    /// subscriber can know.
    pub fn implied_publisher(&self, topic: Topic) -> Option<&str> {
        let mut it = self.subs.iter().filter(|s| s.topic == topic);
        let first = it.next()?.publisher.as_deref()?;
        it.all(|s| s.publisher.as_deref() == Some(first)).then_some(first)
    }

    pub fn send(&mut self, m: &Message) -> Result<(), NetError> {
        write_frame(&mut self.writer, m)?;
        self.writer.flush()?;
        Ok(())
    }

    /// Sends with the next per-topic sequence number.
    pub fn publish(&mut self, topic: Topic, timestamp: Timestamp, payload: Vec<u8>) -> Result<u32, NetError> {
        let seq = self.next_seq(topic);
        self.send(&Message::new(topic, seq, timestamp, payload))?;
        Ok(seq)
    }

    pub fn next_seq(&mut self, topic: Topic) -> u32 {
        let s = self.seqs.entry(topic).or_insert(0);
        let v = *s;
        *s = s.wrapping_add(1);
        v
    }

    pub fn recv_timeout(&self, timeout: Duration) -> Result<Option<Message>, NetError> {
        match self.rx.recv_timeout(timeout) {
            Ok(Ok(m)) => Ok(Some(m)),
            Ok(Err(_)) | Err(RecvTimeoutError::Disconnected) => Err(NetError::Closed),
            Err(RecvTimeoutError::Timeout) => Ok(None),
        }
    }

    pub fn try_recv(&self) -> Result<Option<Message>, NetError> {
        self.recv_timeout(Duration::ZERO)
    }

    pub fn close(self) {
        let _ = self.stream.shutdown(Shutdown::Both);
    }
}
