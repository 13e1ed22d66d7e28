//! WebSocket bridge for browser clients. Every broker frame goes out as a
//! JSON text record; a small set of JSON commands comes back in and is
//! published as GRIP_CMD or CONTROL.
//!
//! Downstream record:
//!
//! ```json
//! {"type":"msg","topic":"GRIP_STATE","topic_id":8,"seq":41,"ts":1700000000000000000,
//!  "payload":{"width":0.05,"setpoint":0.05,"motor_angle":0.64,"grip_force":0.0,"stalled":false}}
//! ```
//!
//! Images are summarized (`width`, `height`, `format`, `bytes`); pixels are
//! not forwarded. Payloads that fail to decode carry `{"error": ..., "bytes": n}`.
//!
//! Upstream records, each answered with `{"type":"ack",...}` or
//! `{"type":"error","message":...}` on the same connection:
//!
//! ```json
//! {"type":"grip","setpoint":0.03}
//! {"type":"record","action":"begin"}            // or "end"
//! {"type":"teleop","enable":true}
//! {"type":"node","target":"motor","action":"stop"}   // or "start"
//! ```

use std::io::ErrorKind;
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, Sender, SyncSender, TrySendError};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use log::{debug, info, warn};
use serde::Deserialize;
use serde_json::{json, Value};
use thiserror::Error;
use tungstenite::{Message as WsMessage, WebSocket};

use super::codec::{Message, Topic};
use super::control::{Command, ControlMessage, Subscription};
use super::net::{system_now, Client, NetError};
use super::payload::{ClockPayload, GripCommand, HapticFeedback, Image, ImageFormat, Payload, TeleopCommand};
use crate::lattice::MarkerSet;
use crate::pose::Pose6D;
use crate::types::{GripState, Wrench6D};

pub const DEFAULT_GATEWAY_PORT: u16 = 7601;
pub const GATEWAY_NAME: &str = "gateway";
const CLIENT_BUFFER: usize = 1024;
const POLL: Duration = Duration::from_millis(5);

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("broker unreachable: {0}")]
    BrokerUnreachable(NetError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Upstream command record.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
pub enum Upstream {
    Grip { setpoint: f64 },
    Record { action: RecordAction },
    Teleop { enable: bool },
    Node { target: String, action: NodeAction },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecordAction {
    Begin,
    End,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeAction {
    Start,
    Stop,
}

impl Upstream {
    pub fn parse(text: &str) -> Result<Upstream, String> {
        let u: Upstream = serde_json::from_str(text).map_err(|e| e.to_string())?;
        if let Upstream::Grip { setpoint } = u {
            if !(setpoint.is_finite() && setpoint >= 0.0) {
                return Err(format!("grip setpoint {setpoint} must be a non-negative number"));
            }
        }
        if let Upstream::Node { target, .. } = &u {
            if target.is_empty() || target.contains(['\n', '=']) {
                return Err("bad node target".into());
            }
        }
        Ok(u)
    }

    /// Broker topic and payload for this command.
    pub fn to_wire(&self) -> (Topic, Vec<u8>) {
        match self {
            Upstream::Grip { setpoint } => (Topic::GRIP_CMD, GripCommand { setpoint: *setpoint }.to_payload()),
            Upstream::Record { action } => {
                let cmd = match action {
                    RecordAction::Begin => Command::RecordBegin,
                    RecordAction::End => Command::RecordEnd,
                };
                (Topic::CONTROL, ControlMessage::new(cmd).encode())
            }
            Upstream::Teleop { enable } => {
                let cmd = if *enable { Command::TeleopEnable } else { Command::TeleopDisable };
                (Topic::CONTROL, ControlMessage::new(cmd).encode())
            }
            Upstream::Node { target, action } => {
                let cmd = match action {
                    NodeAction::Start => Command::Start,
                    NodeAction::Stop => Command::Stop,
                };
                (Topic::CONTROL, ControlMessage::new(cmd).with("target", target).encode())
            }
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            Upstream::Grip { .. } => "grip",
            Upstream::Record { .. } => "record",
            Upstream::Teleop { .. } => "teleop",
            Upstream::Node { .. } => "node",
        }
    }
}

fn pose_json(p: &Pose6D) -> Value {
    serde_json::to_value(p).expect("pose serializes")
}

fn wrench_json(w: &Wrench6D) -> Value {
    json!({"force": [w.force.x, w.force.y, w.force.z], "torque": [w.torque.x, w.torque.y, w.torque.z]})
}

fn decode_payload(topic: Topic, bytes: &[u8]) -> Result<Value, String> {
    let e = |e: super::payload::PayloadError| e.to_string();
    Ok(match topic {
        Topic::POSE => pose_json(&Pose6D::from_payload(bytes).map_err(e)?),
        Topic::RGB | Topic::DEPTH => {
            let img = Image::from_payload(bytes).map_err(e)?;
            let format = match img.format {
                ImageFormat::Rgb8 => "rgb8",
                ImageFormat::Depth16 => "depth16",
            };
            json!({"width": img.width, "height": img.height, "format": format, "bytes": img.data.len()})
        }
        Topic::MARKERS_L | Topic::MARKERS_R => {
            let m = MarkerSet::from_payload(bytes).map_err(e)?;
            json!({"timestamp": m.timestamp.0, "points": m.points})
        }
        Topic::WRENCH_L | Topic::WRENCH_R => wrench_json(&Wrench6D::from_payload(bytes).map_err(e)?),
        Topic::GRIP_STATE => serde_json::to_value(GripState::from_payload(bytes).map_err(e)?).expect("grip serializes"),
        Topic::GRIP_CMD => json!({"setpoint": GripCommand::from_payload(bytes).map_err(e)?.setpoint}),
        Topic::TELEOP_CMD => {
            let c = TeleopCommand::from_payload(bytes).map_err(e)?;
            json!({"target": pose_json(&c.target), "grip_setpoint": c.grip_setpoint})
        }
        Topic::HAPTIC_FB => {
            let h = HapticFeedback::from_payload(bytes).map_err(e)?;
            json!({
                "left": wrench_json(&h.left),
                "right": wrench_json(&h.right),
                "origin_left": h.origin_left.0,
                "origin_right": h.origin_right.0,
                "stale": h.stale,
                "felt_force": h.felt_force(),
            })
        }
        Topic::CLOCK => match ClockPayload::from_payload(bytes).map_err(e)? {
            ClockPayload::Request { t0 } => json!({"kind": "request", "t0": t0.0}),
            ClockPayload::Reply { t0, t1, t2 } => json!({"kind": "reply", "t0": t0.0, "t1": t1.0, "t2": t2.0}),
            ClockPayload::Offset { node, offset, delay } => {
                json!({"kind": "offset", "node": node, "offset": offset, "delay": delay})
            }
        },
        Topic::CONTROL => {
            let c = ControlMessage::decode(bytes).map_err(|e| e.to_string())?;
            Value::Object(c.pairs().iter().map(|(k, v)| (k.clone(), Value::String(v.clone()))).collect())
        }
        other => return Err(format!("unknown topic {other}")),
    })
}

/// Downstream JSON record for one broker frame.
pub fn message_record(m: &Message) -> Value {
    let payload = decode_payload(m.topic, &m.payload)
        .unwrap_or_else(|err| json!({"error": err, "bytes": m.payload.len()}));
    json!({
        "type": "msg",
        "topic": m.topic.name().map_or_else(|| m.topic.id().to_string(), str::to_string),
        "topic_id": m.topic.id(),
        "seq": m.seq,
        "ts": m.timestamp.0,
        "payload": payload,
    })
}

fn error_record(message: &str) -> String {
    json!({"type": "error", "message": message}).to_string()
}

type Outbox = Arc<Mutex<Vec<SyncSender<String>>>>;

pub struct Gateway {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    threads: Vec<JoinHandle<()>>,
}

impl Gateway {
    /// Connects to the broker as [`GATEWAY_NAME`] and listens for WebSocket
    /// clients on `listen`.
    pub fn start(broker: impl ToSocketAddrs, listen: impl ToSocketAddrs) -> Result<Gateway, GatewayError> {
        Gateway::start_named(broker, listen, GATEWAY_NAME)
    }

    pub fn start_named(broker: impl ToSocketAddrs, listen: impl ToSocketAddrs, name: &str) -> Result<Gateway, GatewayError> {
        let subs: Vec<Subscription> = Topic::ALL
            .iter()
            .filter(|&&t| t != Topic::CLOCK)
            .map(|&t| Subscription::all(t))
            .collect();
        let client = Client::connect(broker, name, &subs).map_err(GatewayError::BrokerUnreachable)?;
        let listener = TcpListener::bind(listen)?;
        listener.set_nonblocking(true)?;
        let addr = listener.local_addr()?;
        info!("gateway on ws://{addr}");

        let stop = Arc::new(AtomicBool::new(false));
        let outbox: Outbox = Arc::default();
        let (up_tx, up_rx) = mpsc::channel();

        let pump = {
            let stop = stop.clone();
            let outbox = outbox.clone();
            thread::spawn(move || pump(client, up_rx, outbox, stop))
        };
        let accept = {
            let stop = stop.clone();
            thread::spawn(move || accept_loop(listener, outbox, up_tx, stop))
        };
        Ok(Gateway {
            addr,
            stop,
            threads: vec![pump, accept],
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn is_running(&self) -> bool {
        !self.stop.load(Ordering::SeqCst)
    }

    pub fn shutdown(mut self) {
        self.stop_threads();
    }

    fn stop_threads(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

impl Drop for Gateway {
    fn drop(&mut self) {
        self.stop_threads();
    }
}

type UpstreamJob = (Topic, Vec<u8>, Sender<Result<u32, String>>);

fn pump(mut client: Client, up: Receiver<UpstreamJob>, outbox: Outbox, stop: Arc<AtomicBool>) {
    while !stop.load(Ordering::SeqCst) {
        match client.recv_timeout(POLL) {
            Ok(Some(m)) => {
                if m.topic == Topic::CLOCK {
                    if let Ok(ClockPayload::Request { t0 }) = ClockPayload::from_payload(&m.payload) {
                        let now = system_now();
                        let reply = ClockPayload::Reply { t0, t1: now, t2: now };
                        let _ = client.publish(Topic::CLOCK, now, reply.to_payload());
                        continue;
                    }
                }
                let text = message_record(&m).to_string();
                outbox.lock().expect("outbox lock").retain(|tx| match tx.try_send(text.clone()) {
                    Ok(()) => true,
                    // slow viewer: drop this record, keep the viewer
                    Err(TrySendError::Full(_)) => true,
                    Err(TrySendError::Disconnected(_)) => false,
                });
            }
            Ok(None) => {}
            Err(e) => {
                warn!("gateway lost the broker: {e}");
                let text = error_record("broker connection lost");
                for tx in outbox.lock().expect("outbox lock").iter() {
                    let _ = tx.try_send(text.clone());
                }
                stop.store(true, Ordering::SeqCst);
                return;
            }
        }
        while let Ok((topic, payload, done)) = up.try_recv() {
            let r = client.publish(topic, system_now(), payload).map_err(|e| e.to_string());
            let _ = done.send(r);
        }
    }
    client.close();
}

fn accept_loop(listener: TcpListener, outbox: Outbox, up: Sender<UpstreamJob>, stop: Arc<AtomicBool>) {
    let mut conns = Vec::new();
    while !stop.load(Ordering::SeqCst) {
        match listener.accept() {
            Ok((stream, peer)) => {
                debug!("gateway: viewer {peer}");
                let (tx, rx) = mpsc::sync_channel(CLIENT_BUFFER);
                // registered before the handshake completes, so a client
                // never misses frames routed after its connect returns
                outbox.lock().expect("outbox lock").push(tx);
                let up = up.clone();
                let stop = stop.clone();
                conns.push(thread::spawn(move || {
                    if let Err(e) = serve_viewer(stream, rx, up, stop) {
                        debug!("gateway: viewer {peer} closed: {e}");
                    }
                }));
            }
            Err(e) if e.kind() == ErrorKind::WouldBlock => thread::sleep(POLL),
            Err(e) => {
                warn!("gateway accept: {e}");
                thread::sleep(POLL);
            }
        }
        conns.retain(|h: &JoinHandle<()>| !h.is_finished());
    }
    for h in conns {
        let _ = h.join();
    }
}

fn handle_text(text: &str, up: &Sender<UpstreamJob>) -> String {
    let cmd = match Upstream::parse(text) {
        Ok(c) => c,
        Err(e) => return error_record(&format!("rejected: {e}")),
    };
    let (topic, payload) = cmd.to_wire();
    let (tx, rx) = mpsc::channel();
    if up.send((topic, payload, tx)).is_err() {
        return error_record("gateway stopping");
    }
    match rx.recv_timeout(Duration::from_secs(2)) {
        Ok(Ok(seq)) => json!({
            "type": "ack",
            "request": cmd.kind(),
            "topic": topic.name(),
            "seq": seq,
        })
        .to_string(),
        Ok(Err(e)) => error_record(&format!("publish failed: {e}")),
        Err(_) => error_record("broker not reachable"),
    }
}

fn serve_viewer(
    stream: TcpStream,
    down: Receiver<String>,
    up: Sender<UpstreamJob>,
    stop: Arc<AtomicBool>,
) -> Result<(), tungstenite::Error> {
    stream.set_nonblocking(false)?;
    stream.set_read_timeout(Some(Duration::from_secs(5)))?;
    let mut ws: WebSocket<TcpStream> = tungstenite::accept(stream).map_err(|e| match e {
        tungstenite::HandshakeError::Failure(e) => e,
        tungstenite::HandshakeError::Interrupted(_) => tungstenite::Error::ConnectionClosed,
    })?;
    ws.get_ref().set_read_timeout(Some(POLL))?;
    while !stop.load(Ordering::SeqCst) {
        while let Ok(text) = down.try_recv() {
            ws.send(WsMessage::Text(text))?;
        }
        match ws.read() {
            Ok(WsMessage::Text(t)) => {
                let reply = handle_text(&t, &up);
                ws.send(WsMessage::Text(reply))?;
            }
            Ok(WsMessage::Binary(_)) => ws.send(WsMessage::Text(error_record("binary frames not accepted")))?,
            Ok(WsMessage::Close(_)) => return Ok(()),
            Ok(_) => {}
            Err(tungstenite::Error::Io(e)) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => {}
            Err(e) => return Err(e),
        }
    }
    let _ = ws.close(None);
    Ok(())
}
