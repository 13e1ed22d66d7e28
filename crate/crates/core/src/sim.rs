//! Node runtime: a deterministic discrete-event world in virtual time, and a
//! wall-clock runner over TCP. Both drive the same [`Node`] trait.
//!
//! In the virtual world every node has a link to the broker with its own
//! delay model (applied on both directions) and a constant clock skew. Node
//! code only ever sees its local clock. CLOCK requests from the broker are
//! answered by the runtime before the node's inbox is handed over.

use std::any::Any;
use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};
use std::net::ToSocketAddrs;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use log::{debug, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::proto::broker::{Broker, BrokerError, ClientId, DEFAULT_QUEUE_CAPACITY};
use crate::proto::clock::SYNC_PERIOD_NS;
use crate::proto::codec::{CodecError, Message, Topic};
use crate::proto::control::Subscription;
use crate::proto::net::{system_now, Client, NetError};
use crate::proto::payload::{ClockPayload, Payload};
use crate::types::{Timestamp, NANOS_PER_MILLI};

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Broker(#[from] BrokerError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("invalid node setup: {0}")]
    Config(String),
    #[error("broker unreachable after {0} attempts; node down")]
    BrokerLost(u32),
}

/// A frame handed to a node.
#[derive(Debug, Clone, PartialEq)]
pub struct Received {
    pub from: Arc<str>,
    pub msg: Message,
    /// Arrival time on the node's local clock.
    pub received_at: Timestamp,
}

pub struct NodeContext<'a> {
    now: Timestamp,
    inbox: Vec<Received>,
    outbox: Vec<Message>,
    seqs: &'a mut BTreeMap<Topic, u32>,
}

impl<'a> NodeContext<'a> {
    pub fn new(now: Timestamp, inbox: Vec<Received>, seqs: &'a mut BTreeMap<Topic, u32>) -> Self {
        NodeContext {
            now,
            inbox,
            outbox: Vec::new(),
            seqs,
        }
    }

    /// Local clock.
    pub fn now(&self) -> Timestamp {
        self.now
    }

    pub fn inbox(&self) -> &[Received] {
        &self.inbox
    }

    pub fn take_inbox(&mut self) -> Vec<Received> {
        std::mem::take(&mut self.inbox)
    }

    pub fn publish(&mut self, topic: Topic, payload: Vec<u8>) {
        let s = self.seqs.entry(topic).or_insert(0);
        let seq = *s;
        *s = s.wrapping_add(1);
        self.outbox.push(Message::new(topic, seq, self.now, payload));
    }

    pub fn publish_payload<P: Payload>(&mut self, topic: Topic, p: &P) {
        self.publish(topic, p.to_payload());
    }

    pub fn into_outbox(self) -> Vec<Message> {
        self.outbox
    }
}

pub trait Node: Any {
    fn name(&self) -> &str;
    fn subscriptions(&self) -> Vec<Subscription>;
    /// Tick period, ns.
    fn period(&self) -> i64;
    /// Offset of the first tick from the start of the run, ns.
    fn phase(&self) -> i64 {
        0
    }
    fn tick(&mut self, ctx: &mut NodeContext<'_>);
    fn as_any(&self) -> &dyn Any;
    fn as_any_mut(&mut self) -> &mut dyn Any;
}

/// One-way delay: fixed part plus Gaussian jitter, truncated at zero.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DelayModel {
    pub fixed_ms: f64,
    pub jitter_std_ms: f64,
    pub seed: u64,
}

impl DelayModel {
    pub fn fixed(ms: f64) -> Self {
        DelayModel {
            fixed_ms: ms,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.fixed_ms >= 0.0 && self.jitter_std_ms >= 0.0) {
            return Err(SimError::Config("delay and jitter must be non-negative".into()));
        }
        Ok(())
    }
}

/// Stateful delay sampler for one direction. Arrivals never overtake each
/// other (a TCP-like ordered link).
#[derive(Debug, Clone)]
pub struct LinkDirection {
    fixed: i64,
    jitter: Option<Normal<f64>>,
    rng: ChaCha8Rng,
    last: Timestamp,
}

impl LinkDirection {
    pub fn new(model: &DelayModel, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(model.seed);
        rng.set_stream(stream);
        LinkDirection {
            fixed: (model.fixed_ms * NANOS_PER_MILLI as f64).round() as i64,
            jitter: (model.jitter_std_ms > 0.0)
                .then(|| Normal::new(0.0, model.jitter_std_ms * NANOS_PER_MILLI as f64).expect("validated")),
            rng,
            last: Timestamp(i64::MIN),
        }
    }

    pub fn arrival(&mut self, sent: Timestamp) -> Timestamp {
        let jitter = self.jitter.map_or(0, |n| n.sample(&mut self.rng).round() as i64);
        let delay = (self.fixed + jitter).max(0);
        let t = Timestamp(sent.0 + delay).max(self.last);
        self.last = t;
        t
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LinkConfig {
    pub delay: DelayModel,
    /// Node clock minus reference clock, ns.
    pub clock_skew: i64,
}

struct Slot {
    node: Box<dyn Node>,
    client: ClientId,
    up: LinkDirection,
    down: LinkDirection,
    skew: i64,
    seqs: BTreeMap<Topic, u32>,
    alive: bool,
    ticks: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
enum EventKind {
    /// Frame reaching the broker from a node.
    Arrive { slot: usize, bytes: Vec<u8> },
    ClockPoll,
    Tick { slot: usize },
}

/// Heap key: time, then class (arrivals before clock polls before ticks),
/// then a tiebreak (insertion order for arrivals, slot index for ticks).
type EventKey = (Timestamp, u8, u64);

pub struct World {
    now: Timestamp,
    broker: Broker,
    slots: Vec<Slot>,
    by_client: BTreeMap<ClientId, usize>,
    events: BinaryHeap<Reverse<(EventKey, EventKind)>>,
    order: u64,
    sync_period: Option<i64>,
    started: bool,
}

impl Default for World {
    fn default() -> Self {
        World::new(DEFAULT_QUEUE_CAPACITY)
    }
}

impl World {
    pub fn new(queue_capacity: usize) -> Self {
        World {
            now: Timestamp::ZERO,
            broker: Broker::new(queue_capacity),
            slots: Vec::new(),
            by_client: BTreeMap::new(),
            events: BinaryHeap::new(),
            order: 0,
            sync_period: None,
            started: false,
        }
    }

    /// True (reference) time of the last processed event.
    pub fn now(&self) -> Timestamp {
        self.now
    }

    pub fn broker(&self) -> &Broker {
        &self.broker
    }

    pub fn broker_mut(&mut self) -> &mut Broker {
        &mut self.broker
    }

    /// Polls every node's clock once per `period` ns, starting at t = 0.
    pub fn enable_clock_sync(&mut self, period: i64) {
        self.sync_period = Some(period);
        self.broker.set_sync_period(period);
    }

    pub fn enable_default_clock_sync(&mut self) {
        self.enable_clock_sync(SYNC_PERIOD_NS);
    }

    pub fn add_node(&mut self, node: Box<dyn Node>, link: LinkConfig) -> Result<usize, SimError> {
        link.delay.validate()?;
        if node.period() <= 0 {
            return Err(SimError::Config(format!("{} has non-positive period", node.name())));
        }
        let client = self.broker.connect(node.name(), node.subscriptions())?;
        let slot = self.slots.len();
        let stream = 2 * slot as u64;
        self.slots.push(Slot {
            client,
            up: LinkDirection::new(&link.delay, stream),
            down: LinkDirection::new(&link.delay, stream + 1),
            skew: link.clock_skew,
            seqs: BTreeMap::new(),
            alive: true,
            ticks: 0,
            node,
        });
        self.by_client.insert(client, slot);
        if self.started {
            let first = self.now.0 + self.slots[slot].node.phase();
            self.schedule(Timestamp(first), 2, slot as u64, EventKind::Tick { slot });
        }
        Ok(slot)
    }

    pub fn node(&self, slot: usize) -> &dyn Node {
        self.slots[slot].node.as_ref()
    }

    pub fn node_as<T: Node>(&self, slot: usize) -> Option<&T> {
        self.slots.get(slot)?.node.as_any().downcast_ref()
    }

    pub fn node_as_mut<T: Node>(&mut self, slot: usize) -> Option<&mut T> {
        self.slots.get_mut(slot)?.node.as_any_mut().downcast_mut()
    }

    pub fn slot_of(&self, name: &str) -> Option<usize> {
        self.slots.iter().position(|s| s.node.name() == name)
    }

    pub fn client_of(&self, slot: usize) -> ClientId {
        self.slots[slot].client
    }

    pub fn ticks(&self, slot: usize) -> u64 {
        self.slots[slot].ticks
    }

    pub fn is_alive(&self, slot: usize) -> bool {
        self.slots[slot].alive
    }

    /// Local clock of `slot` at the current true time.
    pub fn local_now(&self, slot: usize) -> Timestamp {
        Timestamp(self.now.0 + self.slots[slot].skew)
    }

    /// Disconnects a node now; the broker announces `node-down`.
    pub fn kill_node(&mut self, slot: usize, reason: &str) -> Result<(), SimError> {
        let s = &mut self.slots[slot];
        if !s.alive {
            return Ok(());
        }
        s.alive = false;
        let client = s.client;
        let now = self.now;
        self.broker.disconnect(client, reason, now)?;
        Ok(())
    }

    fn schedule(&mut self, t: Timestamp, class: u8, tiebreak: u64, kind: EventKind) {
        self.events.push(Reverse(((t, class, tiebreak), kind)));
    }

    fn start(&mut self) {
        if self.started {
            return;
        }
        self.started = true;
        for slot in 0..self.slots.len() {
            let first = self.now.0 + self.slots[slot].node.phase();
            self.schedule(Timestamp(first), 2, slot as u64, EventKind::Tick { slot });
        }
        if self.sync_period.is_some() {
            self.schedule(self.now, 1, 0, EventKind::ClockPoll);
        }
    }

    /// Time of the next pending event.
    pub fn peek_time(&mut self) -> Option<Timestamp> {
        self.start();
        self.events.peek().map(|Reverse(((t, _, _), _))| *t)
    }

    /// Processes one event. Returns false when nothing is scheduled.
    pub fn step(&mut self) -> Result<bool, SimError> {
        self.start();
        let Some(Reverse(((t, _, _), kind))) = self.events.pop() else {
            return Ok(false);
        };
        self.now = t;
        match kind {
            EventKind::Arrive { slot, bytes } => self.arrive(slot, &bytes)?,
            EventKind::ClockPoll => {
                let World { broker, slots, by_client, .. } = self;
                broker.poll_clock_sync(t, &mut |cid| {
                    let s = &mut slots[by_client[&cid]];
                    s.down.arrival(t)
                });
                let period = self.sync_period.expect("poll scheduled only when enabled");
                self.schedule(Timestamp(t.0 + period), 1, 0, EventKind::ClockPoll);
            }
            EventKind::Tick { slot } => self.tick(slot)?,
        }
        Ok(true)
    }

    /// Processes every event with time ≤ `t_end`.
    pub fn run_until(&mut self, t_end: Timestamp) -> Result<(), SimError> {
        while self.peek_time().is_some_and(|t| t <= t_end) {
            self.step()?;
        }
        self.now = self.now.max(t_end);
        Ok(())
    }

    /// Runs until `done` holds (checked after every event) or `t_max`.
    pub fn run_while(&mut self, t_max: Timestamp, mut done: impl FnMut(&World) -> bool) -> Result<bool, SimError> {
        while self.peek_time().is_some_and(|t| t <= t_max) {
            self.step()?;
            if done(self) {
                return Ok(true);
            }
        }
        Ok(false)
    }

    fn arrive(&mut self, slot: usize, bytes: &[u8]) -> Result<(), SimError> {
        if !self.slots[slot].alive {
            return Ok(());
        }
        let msg = Message::decode(bytes)?;
        let t = self.now;
        let from = self.slots[slot].client;
        let World { broker, slots, by_client, .. } = self;
        broker.publish_with(from, msg, t, &mut |cid| slots[by_client[&cid]].down.arrival(t))?;
        Ok(())
    }

    fn tick(&mut self, slot: usize) -> Result<(), SimError> {
        if !self.slots[slot].alive {
            return Ok(());
        }
        let t = self.now;
        let s = &mut self.slots[slot];
        let local = Timestamp(t.0 + s.skew);
        let mut inbox = Vec::new();
        let mut replies = Vec::new();
        while let Some(env) = self.broker.pop_ready(s.client, t)? {
            let received_at = Timestamp(env.available_at.0 + s.skew);
            if env.msg.topic == Topic::CLOCK {
                if let Ok(ClockPayload::Request { t0 }) = ClockPayload::from_payload(&env.msg.payload) {
                    replies.push(ClockPayload::Reply {
                        t0,
                        t1: received_at,
                        t2: local,
                    });
                    continue;
                }
            }
            inbox.push(Received {
                from: env.from,
                msg: env.msg,
                received_at,
            });
        }
        let mut ctx = NodeContext::new(local, inbox, &mut s.seqs);
        for r in replies {
            ctx.publish_payload(Topic::CLOCK, &r);
        }
        s.node.tick(&mut ctx);
        s.ticks += 1;
        let outbox = ctx.into_outbox();
        let period = s.node.period();
        let mut arrivals = Vec::with_capacity(outbox.len());
        for m in outbox {
            arrivals.push((s.up.arrival(t), m.encode()?));
        }
        for (at, bytes) in arrivals {
            self.order += 1;
            let order = self.order;
            self.schedule(at, 0, order, EventKind::Arrive { slot, bytes });
        }
        self.schedule(Timestamp(t.0 + period), 2, slot as u64, EventKind::Tick { slot });
        Ok(())
    }
}

/// Passive node that keeps every frame it receives.
pub struct Tap {
    pub name: String,
    pub subs: Vec<Subscription>,
    pub period: i64,
    pub got: Vec<Message>,
    pub received: Vec<Received>,
}

impl Tap {
    pub fn new(name: &str, topics: &[Topic]) -> Self {
        Tap {
            name: name.into(),
            subs: topics.iter().map(|&t| Subscription::all(t)).collect(),
            period: NANOS_PER_MILLI,
            got: Vec::new(),
            received: Vec::new(),
        }
    }

    pub fn with_subscriptions(name: &str, subs: Vec<Subscription>) -> Self {
        Tap {
            subs,
            ..Tap::new(name, &[])
        }
    }

    pub fn on(&self, topic: Topic) -> impl Iterator<Item = &Message> {
        self.got.iter().filter(move |m| m.topic == topic)
    }
}

impl Node for Tap {
    fn name(&self) -> &str {
        &self.name
    }
    fn subscriptions(&self) -> Vec<Subscription> {
        self.subs.clone()
    }
    fn period(&self) -> i64 {
        self.period
    }
    fn tick(&mut self, ctx: &mut NodeContext<'_>) {
        for r in ctx.take_inbox() {
            self.got.push(r.msg.clone());
            self.received.push(r);
        }
    }
    fn as_any(&self) -> &dyn Any {
        self
    }
    fn as_any_mut(&mut self) -> &mut dyn Any {
        self
    }
}

/// Options for running one node against a TCP broker in real time.
#[derive(Debug, Clone)]
pub struct WallClockOptions {
    pub clock_skew: i64,
    pub max_retries: u32,
    pub retry_backoff: Duration,
    pub run_for: Option<Duration>,
    pub stop: Arc<AtomicBool>,
}

impl Default for WallClockOptions {
    fn default() -> Self {
        WallClockOptions {
            clock_skew: 0,
            max_retries: 5,
            retry_backoff: Duration::from_millis(200),
            run_for: None,
            stop: Arc::new(AtomicBool::new(false)),
        }
    }
}

fn connect_with_retry(
    addr: &(impl ToSocketAddrs + Clone),
    node: &dyn Node,
    opts: &WallClockOptions,
) -> Result<Client, SimError> {
    let mut attempt = 0;
    loop {
        match Client::connect(addr.clone(), node.name(), &node.subscriptions()) {
            Ok(c) => return Ok(c),
            Err(e) => {
                attempt += 1;
                warn!("{}: connect attempt {attempt} failed: {e}", node.name());
                if attempt > opts.max_retries {
                    return Err(SimError::BrokerLost(attempt));
                }
                std::thread::sleep(opts.retry_backoff * attempt);
            }
        }
    }
}

/// Ticks `node` on the wall clock until stopped, the run time elapses, or
/// the broker is lost after bounded reconnect attempts.
pub fn run_wallclock(
    node: &mut dyn Node,
    addr: impl ToSocketAddrs + Clone,
    opts: &WallClockOptions,
) -> Result<u64, SimError> {
    let local_now = || Timestamp(system_now().0 + opts.clock_skew);
    let mut client = connect_with_retry(&addr, node, opts)?;
    let mut seqs = BTreeMap::new();
    let start = std::time::Instant::now();
    let period = Duration::from_nanos(node.period() as u64);
    std::thread::sleep(Duration::from_nanos(node.phase().max(0) as u64));
    let mut next = std::time::Instant::now();
    let mut ticks = 0u64;
    while !opts.stop.load(Ordering::SeqCst) && opts.run_for.is_none_or(|d| start.elapsed() < d) {
        let mut inbox = Vec::new();
        let mut replies = Vec::new();
        let mut lost = false;
        loop {
            match client.try_recv() {
                Ok(Some(msg)) => {
                    let received_at = local_now();
                    if msg.topic == Topic::CLOCK {
                        if let Ok(ClockPayload::Request { t0 }) = ClockPayload::from_payload(&msg.payload) {
                            replies.push((t0, received_at));
                            continue;
                        }
                    }
                    let from: Arc<str> = Arc::from(client.implied_publisher(msg.topic).unwrap_or("?"));
                    inbox.push(Received { from, msg, received_at });
                }
                Ok(None) => break,
                Err(_) => {
                    lost = true;
                    break;
                }
            }
        }
        let now = local_now();
        let mut ctx = NodeContext::new(now, inbox, &mut seqs);
        for (t0, t1) in replies {
            ctx.publish_payload(Topic::CLOCK, &ClockPayload::Reply { t0, t1, t2: now });
        }
        node.tick(&mut ctx);
        ticks += 1;
        let mut failed = lost;
        for m in ctx.into_outbox() {
            if client.send(&m).is_err() {
                failed = true;
                break;
            }
        }
        if failed {
            warn!("{}: lost broker, reconnecting", node.name());
            match connect_with_retry(&addr, node, opts) {
                Ok(c) => client = c,
                Err(e) => {
                    warn!("{}: node down: {e}", node.name());
                    return Err(e);
                }
            }
        }
        next += period;
        let now = std::time::Instant::now();
        if next > now {
            std::thread::sleep(next - now);
        } else {
            debug!("{}: tick overran by {:?}", node.name(), now - next);
            next = now;
        }
    }
    client.close();
    Ok(ticks)
}
