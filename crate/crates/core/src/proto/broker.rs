//! Topic router with bounded drop-oldest subscriber queues.
//!
//! The broker is a plain state machine: callers supply the current reference
//! time. The virtual-time world drives it directly and the TCP server wraps
//! it in a mutex.

use std::collections::{BTreeMap, VecDeque};
use std::sync::Arc;

use log::{debug, warn};
use thiserror::Error;

use super::clock::{clock_offset, ClockEstimate, ClockFilter, ClockSample, SYNC_PERIOD_NS};
use super::codec::{Message, Topic};
use super::control::{ControlMessage, Subscription};
use super::payload::{ClockPayload, Payload};
use crate::types::Timestamp;

pub const BROKER_NAME: &str = "broker";
pub const DEFAULT_QUEUE_CAPACITY: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ClientId(pub usize);

#[derive(Debug, Error, PartialEq)]
pub enum BrokerError {
    #[error("unknown client {0:?}")]
    UnknownClient(ClientId),
    #[error("client name {0:?} already connected")]
    DuplicateName(String),
}

/// A routed frame as held in a subscriber queue.
#[derive(Debug, Clone, PartialEq)]
pub struct Envelope {
    pub from: Arc<str>,
    pub msg: Message,
    /// Reference time the broker routed it.
    pub routed_at: Timestamp,
    /// Reference time at which the subscriber can observe it. Equal to
    /// `routed_at` unless a simulated downlink delay applies.
    pub available_at: Timestamp,
}

#[derive(Debug, Clone)]
pub struct SubscriberQueue {
    items: VecDeque<Envelope>,
    capacity: usize,
    enqueued: u64,
    dropped: u64,
    consumed: u64,
}

impl SubscriberQueue {
    pub fn new(capacity: usize) -> Self {
        SubscriberQueue {
            items: VecDeque::with_capacity(capacity.min(1024)),
            capacity: capacity.max(1),
            enqueued: 0,
            dropped: 0,
            consumed: 0,
        }
    }

    /// Appends, evicting and returning the oldest entry when full.
    pub fn push(&mut self, env: Envelope) -> Option<Envelope> {
        let evicted = if self.items.len() >= self.capacity {
            self.dropped += 1;
            self.items.pop_front()
        } else {
            None
        };
        self.items.push_back(env);
        self.enqueued += 1;
        evicted
    }

    pub fn pop(&mut self) -> Option<Envelope> {
        let e = self.items.pop_front();
        if e.is_some() {
            self.consumed += 1;
        }
        e
    }

    /// Pops the head only if it is observable at `now`.
    pub fn pop_ready(&mut self, now: Timestamp) -> Option<Envelope> {
        if self.items.front().is_some_and(|e| e.available_at <= now) {
            self.pop()
        } else {
            None
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dropped_count(&self) -> u64 {
        self.dropped
    }

    pub fn stats(&self) -> QueueStats {
        QueueStats {
            enqueued: self.enqueued,
            dropped: self.dropped,
            consumed: self.consumed,
            queued: self.items.len() as u64,
        }
    }
}

/// `enqueued = dropped + consumed + queued` always holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct QueueStats {
    pub enqueued: u64,
    pub dropped: u64,
    pub consumed: u64,
    pub queued: u64,
}

/// Per (publisher, topic) accounting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct StreamStats {
    pub published: u64,
    /// Copies placed in subscriber queues.
    pub delivered: u64,
    /// Copies later evicted by drop-oldest.
    pub evicted: u64,
    /// Missing sequence numbers observed on arrival (lost before the broker).
    pub publisher_gaps: u64,
    pub last_seq: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RouteReport {
    pub recipients: Vec<ClientId>,
    pub evicted: usize,
    pub dead_lettered: bool,
    /// Offset estimate produced if the frame completed a clock exchange.
    pub clock: Option<(ClientId, ClockEstimate)>,
}

struct Client {
    name: Arc<str>,
    subs: Vec<Subscription>,
    queue: SubscriberQueue,
    clock: ClockFilter,
    last_sync_request: Option<Timestamp>,
}

pub struct Broker {
    clients: Vec<Option<Client>>,
    capacity: usize,
    dead_letters: SubscriberQueue,
    streams: BTreeMap<(Arc<str>, Topic), StreamStats>,
    own_seq: BTreeMap<Topic, u32>,
    sync_period: i64,
    name: Arc<str>,
}

impl Broker {
    pub fn new(capacity: usize) -> Self {
        Broker {
            clients: Vec::new(),
            capacity,
            dead_letters: SubscriberQueue::new(1024),
            streams: BTreeMap::new(),
            own_seq: BTreeMap::new(),
            sync_period: SYNC_PERIOD_NS,
            name: Arc::from(BROKER_NAME),
        }
    }

    pub fn set_sync_period(&mut self, nanos: i64) {
        self.sync_period = nanos;
    }

    pub fn queue_capacity(&self) -> usize {
        self.capacity
    }

    pub fn connect(&mut self, name: &str, subs: Vec<Subscription>) -> Result<ClientId, BrokerError> {
        if self.clients.iter().flatten().any(|c| &*c.name == name) {
            return Err(BrokerError::DuplicateName(name.to_string()));
        }
        let id = ClientId(self.clients.len());
        self.clients.push(Some(Client {
            name: Arc::from(name),
            subs,
            queue: SubscriberQueue::new(self.capacity),
            clock: ClockFilter::default(),
            last_sync_request: None,
        }));
        debug!("client {name} connected as {id:?}");
        Ok(id)
    }

    /// Removes the client and announces `node-down` on CONTROL.
    pub fn disconnect(&mut self, id: ClientId, reason: &str, now: Timestamp) -> Result<RouteReport, BrokerError> {
        let client = self
            .clients
            .get_mut(id.0)
            .and_then(Option::take)
            .ok_or(BrokerError::UnknownClient(id))?;
        warn!("client {} down: {reason}", client.name);
        let notice = ControlMessage::node_down(&client.name, reason).encode();
        Ok(self.broadcast(Topic::CONTROL, notice, now))
    }

    pub fn client_id(&self, name: &str) -> Option<ClientId> {
        self.clients
            .iter()
            .position(|c| c.as_ref().is_some_and(|c| &*c.name == name))
            .map(ClientId)
    }

    pub fn client_name(&self, id: ClientId) -> Option<&str> {
        self.client(id).ok().map(|c| &*c.name)
    }

    pub fn subscriptions(&self, id: ClientId) -> Option<&[Subscription]> {
        self.client(id).ok().map(|c| c.subs.as_slice())
    }

    pub fn clients(&self) -> impl Iterator<Item = (ClientId, &str)> {
        self.clients
            .iter()
            .enumerate()
            .filter_map(|(i, c)| c.as_ref().map(|c| (ClientId(i), &*c.name)))
    }

    fn client(&self, id: ClientId) -> Result<&Client, BrokerError> {
        self.clients
            .get(id.0)
            .and_then(Option::as_ref)
            .ok_or(BrokerError::UnknownClient(id))
    }

    fn client_mut(&mut self, id: ClientId) -> Result<&mut Client, BrokerError> {
        self.clients
            .get_mut(id.0)
            .and_then(Option::as_mut)
            .ok_or(BrokerError::UnknownClient(id))
    }

    pub fn publish(&mut self, from: ClientId, msg: Message, now: Timestamp) -> Result<RouteReport, BrokerError> {
        self.publish_with(from, msg, now, &mut |_| now)
    }

    /// Routes `msg` from client `from`. `available_at` gives, per recipient,
    /// the reference time the copy becomes observable.
    pub fn publish_with(
        &mut self,
        from: ClientId,
        msg: Message,
        now: Timestamp,
        available_at: &mut dyn FnMut(ClientId) -> Timestamp,
    ) -> Result<RouteReport, BrokerError> {
        let name = self.client(from)?.name.clone();

        if msg.topic == Topic::CLOCK {
            if let Ok(ClockPayload::Reply { t0, t1, t2 }) = ClockPayload::from_payload(&msg.payload) {
                return Ok(self.finish_sync(from, ClockSample { t0, t1, t2, t3: now }, now, available_at));
            }
        }

        let stats = self.streams.entry((name.clone(), msg.topic)).or_default();
        stats.published += 1;
        if let Some(last) = stats.last_seq {
            let expected = last.wrapping_add(1);
            if msg.seq != expected && msg.seq > last {
                stats.publisher_gaps += (msg.seq - expected) as u64;
            }
        }
        stats.last_seq = Some(msg.seq);

        if !msg.topic.is_known() {
            debug!("dead-lettering {} from {name}", msg.topic);
            self.dead_letters.push(Envelope {
                from: name,
                msg,
                routed_at: now,
                available_at: now,
            });
            return Ok(RouteReport {
                dead_lettered: true,
                ..Default::default()
            });
        }

        Ok(self.route(name, Some(from), msg, now, available_at))
    }

    fn route(
        &mut self,
        name: Arc<str>,
        exclude: Option<ClientId>,
        msg: Message,
        now: Timestamp,
        available_at: &mut dyn FnMut(ClientId) -> Timestamp,
    ) -> RouteReport {
        let mut report = RouteReport::default();
        let targets: Vec<ClientId> = self
            .clients
            .iter()
            .enumerate()
            .filter_map(|(i, c)| {
                let c = c.as_ref()?;
                (Some(ClientId(i)) != exclude && c.subs.iter().any(|s| s.matches(msg.topic, &name)))
                    .then_some(ClientId(i))
            })
            .collect();
        for id in targets {
            let env = Envelope {
                from: name.clone(),
                msg: msg.clone(),
                routed_at: now,
                available_at: available_at(id),
            };
            let client = self.clients[id.0].as_mut().expect("target exists");
            if let Some(old) = client.queue.push(env) {
                report.evicted += 1;
                if let Some(s) = self.streams.get_mut(&(old.from.clone(), old.msg.topic)) {
                    s.evicted += 1;
                }
            }
            report.recipients.push(id);
        }
        if let Some(s) = self.streams.get_mut(&(name, msg.topic)) {
            s.delivered += report.recipients.len() as u64;
        }
        report
    }

    fn next_own_seq(&mut self, topic: Topic) -> u32 {
        let s = self.own_seq.entry(topic).or_insert(0);
        let v = *s;
        *s = s.wrapping_add(1);
        v
    }

    /// Publishes a broker-originated frame to every subscriber of `topic`.
    pub fn broadcast(&mut self, topic: Topic, payload: Vec<u8>, now: Timestamp) -> RouteReport {
        self.broadcast_with(topic, payload, now, &mut |_| now)
    }

    pub fn broadcast_with(
        &mut self,
        topic: Topic,
        payload: Vec<u8>,
        now: Timestamp,
        available_at: &mut dyn FnMut(ClientId) -> Timestamp,
    ) -> RouteReport {
        let seq = self.next_own_seq(topic);
        let msg = Message::new(topic, seq, now, payload);
        let name = self.name.clone();
        self.streams.entry((name.clone(), topic)).or_default().published += 1;
        self.route(name, None, msg, now, available_at)
    }

    /// Queues a CLOCK request to every client not queried within the sync
    /// period. Returns the clients that were sent one.
    pub fn poll_clock_sync(
        &mut self,
        now: Timestamp,
        available_at: &mut dyn FnMut(ClientId) -> Timestamp,
    ) -> Vec<ClientId> {
        let due: Vec<ClientId> = self
            .clients
            .iter()
            .enumerate()
            .filter_map(|(i, c)| {
                let c = c.as_ref()?;
                let due = c
                    .last_sync_request
                    .is_none_or(|t| now.since(t) >= self.sync_period);
                due.then_some(ClientId(i))
            })
            .collect();
        for &id in &due {
            let seq = self.next_own_seq(Topic::CLOCK);
            let env = Envelope {
                from: self.name.clone(),
                msg: Message::new(
                    Topic::CLOCK,
                    seq,
                    now,
                    ClockPayload::Request { t0: now }.to_payload(),
                ),
                routed_at: now,
                available_at: available_at(id),
            };
            let c = self.clients[id.0].as_mut().expect("due client exists");
            c.last_sync_request = Some(now);
            c.queue.push(env);
        }
        due
    }

    fn finish_sync(
        &mut self,
        from: ClientId,
        sample: ClockSample,
        now: Timestamp,
        available_at: &mut dyn FnMut(ClientId) -> Timestamp,
    ) -> RouteReport {
        // broker is the client side: offset = node − reference
        let est = match clock_offset(&sample) {
            Ok(e) => e,
            Err(e) => {
                warn!("discarding clock sample from {from:?}: {e}");
                return RouteReport::default();
            }
        };
        let client = self.clients[from.0].as_mut().expect("publisher exists");
        let smoothed = client.clock.update(est);
        let node = client.name.to_string();
        let payload = ClockPayload::Offset {
            node,
            offset: smoothed.offset,
            delay: smoothed.delay,
        }
        .to_payload();
        let mut report = self.broadcast_with(Topic::CLOCK, payload, now, available_at);
        report.clock = Some((from, smoothed));
        report
    }

    pub fn clock_estimate(&self, id: ClientId) -> Option<ClockEstimate> {
        self.client(id).ok()?.clock.estimate()
    }

    pub fn pop(&mut self, id: ClientId) -> Result<Option<Envelope>, BrokerError> {
        Ok(self.client_mut(id)?.queue.pop())
    }

    pub fn pop_ready(&mut self, id: ClientId, now: Timestamp) -> Result<Option<Envelope>, BrokerError> {
        Ok(self.client_mut(id)?.queue.pop_ready(now))
    }

    pub fn queue_stats(&self, id: ClientId) -> Option<QueueStats> {
        self.client(id).ok().map(|c| c.queue.stats())
    }

    pub fn stream_stats(&self, publisher: &str, topic: Topic) -> Option<StreamStats> {
        self.streams
            .iter()
            .find(|((p, t), _)| &**p == publisher && *t == topic)
            .map(|(_, s)| *s)
    }

    pub fn all_stream_stats(&self) -> impl Iterator<Item = (&str, Topic, &StreamStats)> {
        self.streams.iter().map(|((p, t), s)| (&**p, *t, s))
    }

    /// Total evicted copies per topic, across publishers.
    pub fn drops_by_topic(&self) -> BTreeMap<Topic, u64> {
        let mut out = BTreeMap::new();
        for ((_, t), s) in &self.streams {
            *out.entry(*t).or_insert(0) += s.evicted;
        }
        out
    }

    pub fn dead_letter_count(&self) -> u64 {
        self.dead_letters.stats().enqueued
    }

    pub fn pop_dead_letter(&mut self) -> Option<Envelope> {
        self.dead_letters.pop()
    }
}

/// Routing entry point: route `msg` from `from` and report
/// which subscribers received a copy.
pub fn broker_route(broker: &mut Broker, from: ClientId, msg: Message, now: Timestamp) -> Result<RouteReport, BrokerError> {
    broker.publish(from, msg, now)
}
