//! Leader-follower mirroring with a bounded-step follower, haptic relay of
//! follower fingertip wrenches, and one-way latency accounting.

use std::any::Any;

use log::{info, warn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pose::{quat_angle, slerp, Pose6D};
use crate::proto::clock::OffsetBook;
use crate::proto::codec::Topic;
use crate::proto::control::{Command, ControlMessage, Subscription};
use crate::proto::payload::{ClockPayload, GripCommand, HapticFeedback, Payload, TeleopCommand};
use crate::sim::{Node, NodeContext, Received};
use crate::types::{period_from_hz, GripState, Timestamp, Wrench6D};

pub const COORDINATOR_NAME: &str = "teleop";
pub const MIN_LATENCY_SAMPLES: usize = 20;
pub const DEFAULT_STALE_TICKS: u64 = 5;

#[derive(Debug, Error, PartialEq)]
pub enum TeleopError {
    #[error("controller: {0}")]
    Config(String),
    #[error("non-finite leader pose")]
    NonFinite,
    #[error("need at least {needed} latency samples, have {have}")]
    InsufficientData { needed: usize, have: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FollowerController {
    /// m per tick
    pub max_step: f64,
    /// rad per tick
    pub max_rotation: f64,
    pub grip_passthrough: bool,
    /// s
    pub tick: f64,
}

impl Default for FollowerController {
    fn default() -> Self {
        FollowerController {
            max_step: 0.002,
            max_rotation: 0.01,
            grip_passthrough: true,
            tick: 0.01,
        }
    }
}

impl FollowerController {
    pub fn validate(&self) -> Result<(), TeleopError> {
        for (name, v) in [("max_step", self.max_step), ("max_rotation", self.max_rotation), ("tick", self.tick)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(TeleopError::Config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MirrorCommand {
    pub target: Pose6D,
    pub grip_setpoint: Option<f64>,
}

/// One pursuit step from `follower` toward `leader`: translation clamped by
/// norm, rotation by the slerp fraction `max_rotation / angle`.
pub fn mirror_step(
    leader: &Pose6D,
    leader_grip: f64,
    follower: &Pose6D,
    c: &FollowerController,
) -> Result<MirrorCommand, TeleopError> {
    if !leader.is_finite() || !leader_grip.is_finite() {
        return Err(TeleopError::NonFinite);
    }
    let d = leader.position() - follower.position();
    let n = d.norm();
    let position = if n > c.max_step {
        follower.position() + d * (c.max_step / n)
    } else {
        leader.position()
    };
    let angle = quat_angle(&follower.orientation(), &leader.orientation());
    let orientation = if angle > c.max_rotation {
        slerp(&follower.orientation(), &leader.orientation(), c.max_rotation / angle)
    } else {
        leader.orientation()
    };
    Ok(MirrorCommand {
        target: Pose6D::from_parts(position, orientation),
        grip_setpoint: c.grip_passthrough.then_some(leader_grip),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MirrorMode {
    /// Follower repeats the leader's motion since engagement.
    #[default]
    Relative,
    Absolute,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SessionState {
    #[default]
    Idle,
    Active,
    Stopped,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct TeleopSession {
    pub leader: String,
    pub follower: String,
    pub state: SessionState,
    /// Leader state to coordinator, ns.
    pub forward: Vec<i64>,
    /// Follower wrench to coordinator, ns.
    pub feedback: Vec<i64>,
    pub started_at: Option<Timestamp>,
}

impl TeleopSession {
    pub fn new(leader: &str, follower: &str) -> Self {
        TeleopSession {
            leader: leader.into(),
            follower: follower.into(),
            ..Default::default()
        }
    }

    /// Returns whether the state changed.
    pub fn activate(&mut self, now: Timestamp) -> bool {
        if self.state != SessionState::Idle {
            return false;
        }
        self.state = SessionState::Active;
        self.started_at = Some(now);
        true
    }

    pub fn stop(&mut self) -> bool {
        if self.state == SessionState::Stopped {
            return false;
        }
        self.state = SessionState::Stopped;
        true
    }

    pub fn is_active(&self) -> bool {
        self.state == SessionState::Active
    }

    pub fn record_forward(&mut self, ns: i64) {
        if self.is_active() {
            self.forward.push(ns);
        }
    }

    pub fn record_feedback(&mut self, ns: i64) {
        if self.is_active() {
            self.feedback.push(ns);
        }
    }

    pub fn report(&self) -> Result<LatencyReport, TeleopError> {
        latency_report(&self.forward)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LatencyReport {
    pub samples: usize,
    pub mean_ns: f64,
    /// Nearest-rank 95th percentile.
    pub p95_ns: i64,
    pub max_ns: i64,
    /// Population standard deviation.
    pub jitter_std_ns: f64,
}

/// Statistics over any non-empty sample set.
pub fn latency_stats(samples: &[i64]) -> Option<LatencyReport> {
    if samples.is_empty() {
        return None;
    }
    let n = samples.len();
    let mut sorted = samples.to_vec();
    sorted.sort_unstable();
    let mean = samples.iter().map(|&s| s as f64).sum::<f64>() / n as f64;
    let var = samples.iter().map(|&s| (s as f64 - mean).powi(2)).sum::<f64>() / n as f64;
    let rank = (0.95 * n as f64).ceil() as usize;
    Some(LatencyReport {
        samples: n,
        mean_ns: mean,
        p95_ns: sorted[rank.clamp(1, n) - 1],
        max_ns: sorted[n - 1],
        jitter_std_ns: var.sqrt(),
    })
}

pub fn latency_report(samples: &[i64]) -> Result<LatencyReport, TeleopError> {
    if samples.len() < MIN_LATENCY_SAMPLES {
        return Err(TeleopError::InsufficientData {
            needed: MIN_LATENCY_SAMPLES,
            have: samples.len(),
        });
    }
    Ok(latency_stats(samples).expect("non-empty"))
}

/// Publisher names the coordinator listens to.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Endpoints {
    pub leader_pose: String,
    pub leader_grip: String,
    pub follower_pose: String,
    pub follower_grip: String,
    pub follower_tip_l: String,
    pub follower_tip_r: String,
}

impl Endpoints {
    /// `<id>` phone, `<id>_motor`, `<id>_tip_l`, `<id>_tip_r`.
    pub fn from_ids(leader: &str, follower: &str) -> Self {
        Endpoints {
            leader_pose: leader.into(),
            leader_grip: format!("{leader}_motor"),
            follower_pose: follower.into(),
            follower_grip: format!("{follower}_motor"),
            follower_tip_l: format!("{follower}_tip_l"),
            follower_tip_r: format!("{follower}_tip_r"),
        }
    }

    fn critical(&self) -> [&str; 4] {
        [&self.leader_pose, &self.leader_grip, &self.follower_pose, &self.follower_grip]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeleopConfig {
    pub controller: FollowerController,
    pub mode: MirrorMode,
    pub stale_ticks: u64,
    /// Rebase timestamps through broadcast clock offsets; samples wait for
    /// both offsets. Off means all clocks are taken as the reference.
    pub clock_sync: bool,
    pub engage_on_start: bool,
}

impl Default for TeleopConfig {
    fn default() -> Self {
        TeleopConfig {
            controller: FollowerController::default(),
            mode: MirrorMode::Relative,
            stale_ticks: DEFAULT_STALE_TICKS,
            clock_sync: true,
            engage_on_start: false,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct TipSample {
    wrench: Wrench6D,
    origin: Timestamp,
    tick: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SessionStats {
    pub leader: String,
    pub follower: String,
    pub state: SessionState,
    pub started_at: Option<Timestamp>,
    pub commands: u64,
    pub faults: u64,
    pub haptic_sent: u64,
    pub stale_sent: u64,
    pub forward: Option<LatencyReport>,
    pub feedback: Option<LatencyReport>,
}

/// Session coordinator: mirrors leader pose and grip onto the follower each
/// tick and relays the follower's latest fingertip wrenches as HAPTIC_FB.
pub struct Coordinator {
    name: String,
    cfg: TeleopConfig,
    ep: Endpoints,
    period: i64,
    book: OffsetBook,
    pub session: TeleopSession,
    leader: Option<Pose6D>,
    leader_width: Option<f64>,
    follower: Option<Pose6D>,
    /// (leader, follower) poses at engagement.
    anchor: Option<(Pose6D, Pose6D)>,
    commanded: Option<Pose6D>,
    tips: [Option<TipSample>; 2],
    ticks: u64,
    pub commands: u64,
    pub faults: u64,
    pub haptic_sent: u64,
    pub stale_sent: u64,
    /// Every command published, for auditing step bounds.
    pub history: Vec<Pose6D>,
}

impl Coordinator {
    pub fn new(ep: Endpoints, cfg: TeleopConfig) -> Result<Self, TeleopError> {
        cfg.controller.validate()?;
        if cfg.stale_ticks == 0 {
            return Err(TeleopError::Config("stale_ticks must be at least 1".into()));
        }
        Ok(Coordinator {
            name: COORDINATOR_NAME.into(),
            period: period_from_hz(1.0 / cfg.controller.tick),
            session: TeleopSession::new(&ep.leader_pose, &ep.follower_pose),
            cfg,
            ep,
            book: OffsetBook::default(),
            leader: None,
            leader_width: None,
            follower: None,
            anchor: None,
            commanded: None,
            tips: [None, None],
            ticks: 0,
            commands: 0,
            faults: 0,
            haptic_sent: 0,
            stale_sent: 0,
            history: Vec::new(),
        })
    }

    pub fn with_name(mut self, name: &str) -> Self {
        self.name = name.into();
        self
    }

    pub fn stats(&self) -> SessionStats {
        SessionStats {
            leader: self.session.leader.clone(),
            follower: self.session.follower.clone(),
            state: self.session.state,
            started_at: self.session.started_at,
            commands: self.commands,
            faults: self.faults,
            haptic_sent: self.haptic_sent,
            stale_sent: self.stale_sent,
            forward: latency_stats(&self.session.forward),
            feedback: latency_stats(&self.session.feedback),
        }
    }

    fn to_ref(&self, node: &str, t: Timestamp) -> Option<Timestamp> {
        if self.cfg.clock_sync {
            self.book.to_reference(node, t)
        } else {
            Some(t)
        }
    }

    /// One-way delay of `r` in the reference clock, if both ends are synced.
    fn latency(&self, r: &Received) -> Option<(Timestamp, i64)> {
        let origin = self.to_ref(&r.from, r.msg.timestamp)?;
        let arrival = self.to_ref(&self.name, r.received_at)?;
        Some((origin, arrival.0 - origin.0))
    }

    fn handle(&mut self, r: &Received, now: Timestamp) {
        let from = &*r.from;
        match r.msg.topic {
            Topic::CLOCK => {
                if let Ok(ClockPayload::Offset { node, offset, .. }) = ClockPayload::from_payload(&r.msg.payload) {
                    self.book.set(&node, offset);
                }
            }
            Topic::CONTROL => {
                let Ok(c) = ControlMessage::decode(&r.msg.payload) else {
                    return;
                };
                match c.command() {
                    Ok(Command::TeleopEnable) if c.is_for(&self.name) => {
                        if self.session.activate(now) {
                            info!("{}: session active", self.name);
                        }
                    }
                    Ok(Command::TeleopDisable) if c.is_for(&self.name) => self.stop("disabled"),
                    Ok(Command::NodeDown) => {
                        let node = c.get("node").unwrap_or("");
                        if self.ep.critical().contains(&node) {
                            self.stop(&format!("{node} down"));
                        }
                    }
                    _ => {}
                }
            }
            Topic::POSE => {
                let Ok(p) = Pose6D::from_payload(&r.msg.payload) else {
                    self.faults += 1;
                    return;
                };
                if from == self.ep.leader_pose {
                    self.leader = Some(p);
                    if let Some((_, ns)) = self.latency(r) {
                        self.session.record_forward(ns);
                    }
                } else if from == self.ep.follower_pose {
                    self.follower = Some(p);
                }
            }
            Topic::GRIP_STATE if from == self.ep.leader_grip => {
                if let Ok(g) = GripState::from_payload(&r.msg.payload) {
                    self.leader_width = Some(g.width);
                }
            }
            Topic::WRENCH_L | Topic::WRENCH_R => {
                let side = usize::from(r.msg.topic == Topic::WRENCH_R);
                let expected = [&self.ep.follower_tip_l, &self.ep.follower_tip_r][side];
                if from != expected {
                    return;
                }
                let Ok(w) = Wrench6D::from_payload(&r.msg.payload) else {
                    self.faults += 1;
                    return;
                };
                let Some((origin, ns)) = self.latency(r) else {
                    return;
                };
                self.session.record_feedback(ns);
                self.tips[side] = Some(TipSample {
                    wrench: w,
                    origin,
                    tick: self.ticks,
                });
            }
            _ => {}
        }
    }

    fn stop(&mut self, why: &str) {
        if self.session.stop() {
            info!("{}: session stopped ({why})", self.name);
            match serde_json::to_string(&self.stats()) {
                Ok(s) => info!("{}: {s}", self.name),
                Err(e) => warn!("{}: stats: {e}", self.name),
            }
        }
    }

    fn target(&self, leader: &Pose6D) -> Pose6D {
        match (self.cfg.mode, self.anchor) {
            (MirrorMode::Relative, Some((l0, f0))) => f0.compose(&l0.delta_to(leader)),
            _ => *leader,
        }
    }
}

impl Node for Coordinator {
    fn name(&self) -> &str {
        &self.name
    }

    fn subscriptions(&self) -> Vec<Subscription> {
        let e = &self.ep;
        vec![
            Subscription::from(Topic::POSE, e.leader_pose.clone()),
            Subscription::from(Topic::POSE, e.follower_pose.clone()),
            Subscription::from(Topic::GRIP_STATE, e.leader_grip.clone()),
            Subscription::from(Topic::WRENCH_L, e.follower_tip_l.clone()),
            Subscription::from(Topic::WRENCH_R, e.follower_tip_r.clone()),
            Subscription::all(Topic::CONTROL),
            Subscription::all(Topic::CLOCK),
        ]
    }

    fn period(&self) -> i64 {
        self.period
    }

    fn tick(&mut self, ctx: &mut NodeContext<'_>) {
        self.ticks += 1;
        let now = ctx.now();
        if self.cfg.engage_on_start && self.session.activate(now) {
            info!("{}: session active", self.name);
        }
        for r in ctx.take_inbox() {
            self.handle(&r, now);
        }
        if !self.session.is_active() {
            return;
        }
        let (Some(leader), Some(follower)) = (self.leader, self.follower) else {
            return;
        };
        if self.anchor.is_none() {
            self.anchor = Some((leader, follower));
            self.commanded = Some(follower);
        }
        let from = self.commanded.expect("set with anchor");
        let grip = self.leader_width.unwrap_or(f64::NAN);
        let mut c = self.cfg.controller;
        c.grip_passthrough &= self.leader_width.is_some();
        match mirror_step(&self.target(&leader), if c.grip_passthrough { grip } else { 0.0 }, &from, &c) {
            Ok(cmd) => {
                self.commanded = Some(cmd.target);
                self.history.push(cmd.target);
                self.commands += 1;
                // NaN tells the follower phone that grip is not mirrored
                let grip_setpoint = cmd.grip_setpoint.unwrap_or(f64::NAN);
                ctx.publish_payload(
                    Topic::TELEOP_CMD,
                    &TeleopCommand {
                        target: cmd.target,
                        grip_setpoint,
                    },
                );
                if let Some(s) = cmd.grip_setpoint {
                    ctx.publish_payload(Topic::GRIP_CMD, &GripCommand { setpoint: s });
                }
            }
            Err(_) => self.faults += 1,
        }
        if self.tips.iter().all(Option::is_none) {
            return;
        }
        let fresh = |s: &Option<TipSample>| s.is_some_and(|s| self.ticks - s.tick <= self.cfg.stale_ticks);
        let stale = !self.tips.iter().all(fresh);
        let side = |s: &Option<TipSample>| s.map_or((Wrench6D::ZERO, Timestamp::ZERO), |s| (s.wrench, s.origin));
        let (left, origin_left) = side(&self.tips[0]);
        let (right, origin_right) = side(&self.tips[1]);
        ctx.publish_payload(
            Topic::HAPTIC_FB,
            &HapticFeedback {
                left,
                right,
                origin_left,
                origin_right,
                stale,
            },
        );
        self.haptic_sent += 1;
        self.stale_sent += stale as u64;
    }

    fn as_any(&self) -> &dyn Any {
        self
    }

    fn as_any_mut(&mut self) -> &mut dyn Any {
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nodes::{MotorModel, MotorNode, SetpointSource};
    use crate::proto::codec::Message;
    use nalgebra::Vector3;
    use std::collections::BTreeMap;
    use std::f64::consts::FRAC_PI_2;
    use std::sync::Arc;

    const MS: i64 = 1_000_000;

    #[test]
    fn mirror_examples() {
        let c = FollowerController::default();
        let p = Pose6D::from_translation(0.1, 0.2, 0.3);
        let same = mirror_step(&p, 0.05, &p, &c).unwrap();
        assert_eq!(same.target, p);
        assert_eq!(same.grip_setpoint, Some(0.05));

        let far = mirror_step(&Pose6D::from_translation(1.0, 0.0, 0.0), 0.0, &Pose6D::identity(), &c).unwrap();
        assert_eq!(far.target.position(), Vector3::new(0.002, 0.0, 0.0));

        let turned = Pose6D::from_axis_angle(Vector3::z(), FRAC_PI_2);
        let r = mirror_step(&turned, 0.0, &Pose6D::identity(), &c).unwrap();
        let (axis, angle) = r.target.orientation().axis_angle().unwrap();
        assert!((angle - 0.01).abs() < 1e-12);
        assert!((axis.into_inner() - Vector3::z()).norm() < 1e-12);

        let no_pass = FollowerController {
            grip_passthrough: false,
            ..c
        };
        assert_eq!(mirror_step(&p, 0.05, &p, &no_pass).unwrap().grip_setpoint, None);
        assert_eq!(mirror_step(&p, f64::NAN, &p, &c), Err(TeleopError::NonFinite));
        assert!(FollowerController { max_step: 0.0, ..c }.validate().is_err());
    }

    #[test]
    fn percentile_examples() {
        let d: Vec<i64> = (1..=10).map(|i| i * 10 * MS).collect();
        let r = latency_stats(&d).unwrap();
        assert_eq!(r.p95_ns, 100 * MS);
        assert_eq!(r.max_ns, 100 * MS);
        assert_eq!(r.mean_ns, 55.0 * MS as f64);
        assert!(matches!(latency_report(&d), Err(TeleopError::InsufficientData { have: 10, .. })));
        let twice: Vec<i64> = d.iter().chain(&d).copied().collect();
        // rank ceil(0.95 * 20) = 19 of the sorted pairs
        assert_eq!(latency_report(&twice).unwrap().p95_ns, 100 * MS);
        let zeros = latency_report(&[0; 20]).unwrap();
        assert_eq!((zeros.mean_ns, zeros.p95_ns, zeros.max_ns, zeros.jitter_std_ns), (0.0, 0, 0, 0.0));
    }

    #[test]
    fn session_transitions() {
        let mut s = TeleopSession::new("a", "b");
        s.record_forward(5);
        assert!(s.forward.is_empty());
        assert!(s.activate(Timestamp(3)));
        assert!(!s.activate(Timestamp(4)));
        s.record_forward(5);
        assert!(s.stop());
        assert!(!s.activate(Timestamp(9)));
        s.record_forward(6);
        assert_eq!(s.forward, vec![5]);
        assert_eq!(s.started_at, Some(Timestamp(3)));
    }

    fn rx(from: &str, topic: Topic, t: i64, payload: Vec<u8>) -> Received {
        Received {
            from: Arc::from(from),
            msg: Message::new(topic, 0, Timestamp(t), payload),
            received_at: Timestamp(t),
        }
    }

    fn tick(c: &mut Coordinator, now: i64, inbox: Vec<Received>) -> Vec<Message> {
        let mut seqs = BTreeMap::new();
        let mut ctx = NodeContext::new(Timestamp(now), inbox, &mut seqs);
        c.tick(&mut ctx);
        ctx.into_outbox()
    }

    fn coordinator() -> Coordinator {
        let cfg = TeleopConfig {
            clock_sync: false,
            engage_on_start: true,
            ..Default::default()
        };
        Coordinator::new(Endpoints::from_ids("lead", "fol"), cfg).unwrap()
    }

    #[test]
    fn haptic_passthrough_and_staleness() {
        let mut c = coordinator();
        let stall = Wrench6D::from_array([0.0, 0.0, 15.0, 0.01, 0.0, 0.0]);
        let mut inbox = vec![
            rx("lead", Topic::POSE, 0, Pose6D::identity().to_payload()),
            rx("fol", Topic::POSE, 0, Pose6D::identity().to_payload()),
            rx("fol_tip_l", Topic::WRENCH_L, 0, stall.to_payload()),
            rx("fol_tip_r", Topic::WRENCH_R, 0, stall.to_payload()),
        ];
        // wrenches from an unrelated publisher are ignored
        inbox.push(rx("other_tip_l", Topic::WRENCH_L, 0, Wrench6D::ZERO.to_payload()));
        let out = tick(&mut c, 10 * MS, inbox);
        let fb: Vec<_> = out.iter().filter(|m| m.topic == Topic::HAPTIC_FB).collect();
        assert_eq!(fb.len(), 1);
        let h = HapticFeedback::from_payload(&fb[0].payload).unwrap();
        assert_eq!(h.left, stall);
        assert_eq!(h.right, stall);
        assert!(!h.stale);

        // relay into a leader motor: it logs 15 N
        let mut m = MotorNode::new("lead_motor", MotorModel::default(), 0.05, SetpointSource::Commands).unwrap();
        let mut seqs = BTreeMap::new();
        let mut ctx = NodeContext::new(Timestamp(20 * MS), vec![rx("teleop", Topic::HAPTIC_FB, 0, fb[0].payload.clone())], &mut seqs);
        m.tick(&mut ctx);
        assert_eq!(m.felt_force(), 15.0);
        assert_eq!(m.haptic.unwrap().left, stall);

        for k in 2..=6 {
            let out = tick(&mut c, k * 10 * MS, vec![]);
            let h = HapticFeedback::from_payload(&out.iter().find(|m| m.topic == Topic::HAPTIC_FB).unwrap().payload).unwrap();
            assert_eq!(h.stale, k > 6, "tick {k}");
        }
        let out = tick(&mut c, 70 * MS, vec![]);
        let h = HapticFeedback::from_payload(&out.iter().find(|m| m.topic == Topic::HAPTIC_FB).unwrap().payload).unwrap();
        assert!(h.stale);
        assert_eq!(h.left, stall);
        assert_eq!(c.stale_sent, 1);
    }

    #[test]
    fn zero_contact_zero_feedback() {
        let mut c = coordinator();
        let inbox = vec![
            rx("lead", Topic::POSE, 0, Pose6D::identity().to_payload()),
            rx("fol", Topic::POSE, 0, Pose6D::identity().to_payload()),
            rx("fol_tip_l", Topic::WRENCH_L, 0, Wrench6D::ZERO.to_payload()),
            rx("fol_tip_r", Topic::WRENCH_R, 0, Wrench6D::ZERO.to_payload()),
        ];
        let out = tick(&mut c, 10 * MS, inbox);
        let h = HapticFeedback::from_payload(&out.iter().find(|m| m.topic == Topic::HAPTIC_FB).unwrap().payload).unwrap();
        assert_eq!(h.felt_force(), 0.0);
    }

    #[test]
    fn relative_mode_and_control() {
        let mut c = Coordinator::new(
            Endpoints::from_ids("lead", "fol"),
            TeleopConfig {
                clock_sync: false,
                ..Default::default()
            },
        )
        .unwrap();
        let l0 = Pose6D::from_translation(1.0, 1.0, 1.0);
        let f0 = Pose6D::from_translation(0.0, 0.0, 0.5);
        let poses = |l: Pose6D| {
            vec![
                rx("lead", Topic::POSE, 0, l.to_payload()),
                rx("fol", Topic::POSE, 0, f0.to_payload()),
                rx("lead_motor", Topic::GRIP_STATE, 0, GripState::at_rest(0.03).to_payload()),
            ]
        };
        // idle: nothing published, no samples
        assert!(tick(&mut c, 10 * MS, poses(l0)).is_empty());
        assert!(c.session.forward.is_empty());
        let mut inbox = poses(l0);
        inbox.push(rx("ui", Topic::CONTROL, 0, ControlMessage::new(Command::TeleopEnable).encode()));
        let out = tick(&mut c, 20 * MS, inbox);
        let cmd = TeleopCommand::from_payload(&out[0].payload).unwrap();
        assert_eq!(cmd.target, f0);
        assert_eq!(cmd.grip_setpoint, 0.03);
        let grip = GripCommand::from_payload(&out[1].payload).unwrap();
        assert_eq!(grip.setpoint, 0.03);
        // leader moves 1 mm in y: follower follows the motion, not the absolute pose
        let out = tick(&mut c, 30 * MS, poses(l0.compose(&Pose6D::from_translation(0.0, 0.001, 0.0))));
        let cmd = TeleopCommand::from_payload(&out[0].payload).unwrap();
        assert!((cmd.target.position() - Vector3::new(0.0, 0.001, 0.5)).norm() < 1e-15);
        // critical node down stops the session for good
        let down = rx("broker", Topic::CONTROL, 0, ControlMessage::node_down("fol_motor", "gone").encode());
        tick(&mut c, 40 * MS, vec![down]);
        assert_eq!(c.session.state, SessionState::Stopped);
        let mut inbox = poses(l0);
        inbox.push(rx("ui", Topic::CONTROL, 0, ControlMessage::new(Command::TeleopEnable).encode()));
        assert!(tick(&mut c, 50 * MS, inbox).is_empty());
        let s = c.stats();
        assert_eq!(s.commands, 2);
        // the pose at 20 ms precedes the enable message in its inbox
        assert_eq!(s.forward.unwrap().samples, 1);
    }
}
