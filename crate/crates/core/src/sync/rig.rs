//! Recording and closed-loop execution: the pilot node that aligns the
//! follower streams and drives the arm and gripper, a passive recorder, the
//! lockstep virtual rig, and demo/execution comparison.
//!
//! Rig timeline with frame period P: the pilot ticks at P, 2P, ...; the arm
//! publishes at P/2 + jP, as do the motor (phase `P/2 mod dt`) and both
//! fingertips (period P/2). Frame j is stamped P/2 + jP. The command the
//! pilot sends at (j+1)P reaches the arm before frame j+1.

use std::collections::VecDeque;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use log::{debug, info, warn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::episode::{digest, Episode, EpisodeHeader, Footer};
use super::policy::{Action, PolicyKNN};
use super::{nearest_index, AlignConfig, AlignedFrame, Aligner, SyncError};
use crate::lattice::FingertipConfig;
use crate::nodes::{
    ContactScript, FingertipNode, MotorModel, MotorNode, NodeError, PhoneNode, PoseSource, SetpointSource, Side,
    TrajectoryScript,
};
use crate::pose::{quat_angle, Pose6D};
use crate::proto::clock::OffsetBook;
use crate::proto::codec::Topic;
use crate::proto::control::{Command, ControlMessage, Subscription};
use crate::proto::payload::{ClockPayload, GripCommand, Image, Payload, TeleopCommand};
use crate::sim::{LinkConfig, Node, NodeContext, Received, SimError, World};
use crate::types::{GripState, Timestamp, Wrench6D, NANOS_PER_MILLI};
use crate::wrench::{calibrate, calibration_schedule, generate_calibration, EstimatorModel, LoadScale};

pub const PILOT_NAME: &str = "pilot";
pub const ARM_NAME: &str = "arm";
pub const MOTOR_NAME: &str = "motor";
pub const TIP_L_NAME: &str = "tip_l";
pub const TIP_R_NAME: &str = "tip_r";

#[derive(Debug, Error)]
pub enum RigError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Node(#[from] NodeError),
    #[error(transparent)]
    Sync(#[from] SyncError),
    #[error("rig config: {0}")]
    Config(String),
}

/// Publisher names per recorded stream; `None` accepts any publisher.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SourceNames {
    pub pose: Option<String>,
    pub grip: Option<String>,
    pub wrench_l: Option<String>,
    pub wrench_r: Option<String>,
    pub images: Option<String>,
}

impl SourceNames {
    pub fn rig() -> Self {
        SourceNames {
            pose: Some(ARM_NAME.into()),
            grip: Some(MOTOR_NAME.into()),
            wrench_l: Some(TIP_L_NAME.into()),
            wrench_r: Some(TIP_R_NAME.into()),
            images: Some(ARM_NAME.into()),
        }
    }

    fn subscriptions(&self) -> Vec<Subscription> {
        let sub = |t: Topic, p: &Option<String>| match p {
            Some(p) => Subscription::from(t, p.clone()),
            None => Subscription::all(t),
        };
        vec![
            sub(Topic::POSE, &self.pose),
            sub(Topic::RGB, &self.images),
            sub(Topic::DEPTH, &self.images),
            sub(Topic::GRIP_STATE, &self.grip),
            sub(Topic::WRENCH_L, &self.wrench_l),
            sub(Topic::WRENCH_R, &self.wrench_r),
            Subscription::all(Topic::CONTROL),
            Subscription::all(Topic::CLOCK),
        ]
    }

    fn watched(&self) -> impl Iterator<Item = &str> {
        [&self.pose, &self.grip, &self.wrench_l, &self.wrench_r]
            .into_iter()
            .filter_map(|s| s.as_deref())
    }
}

/// Aligner fed from received frames, with timestamps rebased to the
/// reference clock as offsets become known.
struct Recorder {
    aligner: Aligner,
    book: OffsetBook,
    grip_log: Vec<(Timestamp, GripState)>,
    rejected: u64,
}

impl Recorder {
    fn new(cfg: AlignConfig, allowance_ns: i64, capacity: usize) -> Result<Self, SyncError> {
        Ok(Recorder {
            aligner: Aligner::new(cfg, allowance_ns, capacity)?,
            book: OffsetBook::default(),
            grip_log: Vec::new(),
            rejected: 0,
        })
    }

    /// Unsynced publishers are taken to share the reference clock.
    fn rebase(&self, node: &str, t: Timestamp) -> Timestamp {
        self.book.to_reference(node, t).unwrap_or(t)
    }

    /// Returns the CONTROL message if `r` carried one.
    fn ingest(&mut self, r: &Received) -> Option<ControlMessage> {
        let msg = &r.msg;
        let ts = self.rebase(&r.from, msg.timestamp);
        let res = match msg.topic {
            Topic::CLOCK => {
                if let Ok(ClockPayload::Offset { node, offset, .. }) = ClockPayload::from_payload(&msg.payload) {
                    self.book.set(&node, offset);
                }
                Ok(())
            }
            Topic::CONTROL => return ControlMessage::decode(&msg.payload).ok(),
            Topic::POSE => Pose6D::from_payload(&msg.payload)
                .map_err(|e| e.to_string())
                .and_then(|p| self.aligner.push_pose(ts, p).map_err(|e| e.to_string())),
            Topic::GRIP_STATE => GripState::from_payload(&msg.payload)
                .map_err(|e| e.to_string())
                .and_then(|g| {
                    self.grip_log.push((ts, g));
                    self.aligner.push_grip(ts, g).map_err(|e| e.to_string())
                }),
            Topic::WRENCH_L | Topic::WRENCH_R => Wrench6D::from_payload(&msg.payload)
                .map_err(|e| e.to_string())
                .and_then(|w| self.aligner.push_wrench(msg.topic, ts, w).map_err(|e| e.to_string())),
            Topic::RGB | Topic::DEPTH => Image::from_payload(&msg.payload)
                .map_err(|e| e.to_string())
                .and_then(|i| self.aligner.push_image(msg.topic, ts, Arc::new(i)).map_err(|e| e.to_string())),
            _ => Ok(()),
        };
        if let Err(e) = res {
            self.rejected += 1;
            debug!("dropping {} from {}: {e}", msg.topic, r.from);
        }
        None
    }
}

/// Where the pilot's next target comes from.
#[derive(Debug, Clone)]
pub enum CommandSource {
    /// Absolute targets sampled from a script at `j·P` for frame j.
    Script(TrajectoryScript),
    /// Absolute pose and grip setpoint of each frame of a recorded episode.
    EpisodeReplay(Vec<(Pose6D, f64)>),
    /// Current pose composed with the policy's delta.
    Policy(PolicyKNN),
}

impl CommandSource {
    pub fn replay(e: &Episode) -> Self {
        CommandSource::EpisodeReplay(e.frames.iter().map(|f| (f.pose, f.grip.setpoint)).collect())
    }

    /// Command for frame `next` given the frame just observed.
    fn next(&self, next: usize, period_ns: i64, observed: &AlignedFrame) -> Option<(Pose6D, Action)> {
        let absolute = |pose: Pose6D, grip: f64| {
            let action = Action {
                delta: observed.pose.delta_to(&pose),
                grip_setpoint: grip,
            };
            (pose, action)
        };
        match self {
            CommandSource::Script(s) => {
                let (pose, grip) = s.sample(next as f64 * period_ns as f64 * 1e-9);
                Some(absolute(pose, grip))
            }
            CommandSource::EpisodeReplay(targets) => targets.get(next).map(|&(p, g)| absolute(p, g)),
            CommandSource::Policy(p) => {
                let a = p.act_frame(observed);
                Some((observed.pose.compose(&a.delta), a))
            }
        }
    }
}

/// Aligns the follower streams and, after each frame, commands the next one
/// over TELEOP_CMD and GRIP_CMD. Stops after `frames` frames or when a
/// watched node goes down.
pub struct Pilot {
    name: String,
    period: i64,
    sources: SourceNames,
    recorder: Recorder,
    command: CommandSource,
    header: EpisodeHeader,
    target_frames: usize,
    frames: Vec<AlignedFrame>,
    issued: Vec<Action>,
    aborted: bool,
    done: bool,
    stop: Option<Arc<AtomicBool>>,
}

impl Pilot {
    pub fn new(
        command: CommandSource,
        header: EpisodeHeader,
        align: AlignConfig,
        allowance_ns: i64,
        period_ns: i64,
        target_frames: usize,
    ) -> Result<Self, SyncError> {
        if period_ns <= 0 || target_frames == 0 {
            return Err(SyncError::Config("pilot needs a positive period and frame count".into()));
        }
        Ok(Pilot {
            name: PILOT_NAME.into(),
            period: period_ns,
            sources: SourceNames::rig(),
            recorder: Recorder::new(align, allowance_ns, RIG_BUFFER)?,
            command,
            header,
            target_frames,
            frames: Vec::new(),
            issued: Vec::new(),
            aborted: false,
            done: false,
            stop: None,
        })
    }

    pub fn with_sources(mut self, sources: SourceNames) -> Self {
        self.sources = sources;
        self
    }

    /// Set once the run is complete, for wall-clock runners.
    pub fn with_stop_flag(mut self, stop: Arc<AtomicBool>) -> Self {
        self.stop = Some(stop);
        self
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn aborted(&self) -> bool {
        self.aborted
    }

    pub fn frames(&self) -> &[AlignedFrame] {
        &self.frames
    }

    /// Actions sent, one per commanded frame.
    pub fn issued(&self) -> &[Action] {
        &self.issued
    }

    pub fn grip_log(&self) -> &[(Timestamp, GripState)] {
        &self.recorder.grip_log
    }

    pub fn episode(&self) -> Episode {
        Episode {
            header: self.header.clone(),
            frames: self.frames.clone(),
            footer: Footer {
                aborted: self.aborted,
                drops: self.recorder.aligner.stats().missing.clone(),
            },
        }
    }

    fn finish(&mut self) {
        self.done = true;
        if let Some(s) = &self.stop {
            s.store(true, Ordering::SeqCst);
        }
    }
}

const RIG_BUFFER: usize = 256;

impl Node for Pilot {
    fn name(&self) -> &str {
        &self.name
    }

    fn subscriptions(&self) -> Vec<Subscription> {
        self.sources.subscriptions()
    }

    fn period(&self) -> i64 {
        self.period
    }

    fn phase(&self) -> i64 {
        self.period
    }

    fn tick(&mut self, ctx: &mut NodeContext<'_>) {
        if self.done {
            return;
        }
        for r in ctx.take_inbox() {
            let Some(c) = self.recorder.ingest(&r) else {
                continue;
            };
            if c.command() == Ok(Command::NodeDown) {
                let node = c.get("node").unwrap_or("");
                if self.sources.watched().any(|w| w == node) {
                    warn!("{}: {node} went down, aborting after {} frames", self.name, self.frames.len());
                    self.aborted = true;
                    self.finish();
                    return;
                }
            }
        }
        let now = self.recorder.rebase(&self.name, ctx.now());
        for f in self.recorder.aligner.poll(now) {
            let next = self.frames.len() + 1;
            self.frames.push(f);
            if next >= self.target_frames {
                info!("{}: recorded {next} frames", self.name);
                self.finish();
                return;
            }
            let observed = self.frames.last().expect("just pushed");
            let Some((target, action)) = self.command.next(next, self.period, observed) else {
                self.finish();
                return;
            };
            self.issued.push(action);
            ctx.publish_payload(
                Topic::TELEOP_CMD,
                &TeleopCommand {
                    target,
                    grip_setpoint: action.grip_setpoint,
                },
            );
            ctx.publish_payload(
                Topic::GRIP_CMD,
                &GripCommand {
                    setpoint: action.grip_setpoint,
                },
            );
        }
    }

    fn as_any(&self) -> &dyn std::any::Any {
        self
    }

    fn as_any_mut(&mut self) -> &mut dyn std::any::Any {
        self
    }
}

/// Passive recorder gated by CONTROL record:begin / record:end. Each toggle
/// is acknowledged with a CONTROL message carrying an `echo` key.
pub struct RecorderNode {
    name: String,
    period: i64,
    sources: SourceNames,
    recorder: Recorder,
    header: EpisodeHeader,
    recording: bool,
    frames: Vec<AlignedFrame>,
}

impl RecorderNode {
    pub fn new(
        name: &str,
        header: EpisodeHeader,
        align: AlignConfig,
        allowance_ns: i64,
        period_ns: i64,
        recording: bool,
    ) -> Result<Self, SyncError> {
        if period_ns <= 0 {
            return Err(SyncError::Config("recorder period must be positive".into()));
        }
        Ok(RecorderNode {
            name: name.into(),
            period: period_ns,
            sources: SourceNames::default(),
            recorder: Recorder::new(align, allowance_ns, super::DEFAULT_CAPACITY)?,
            header,
            recording,
            frames: Vec::new(),
        })
    }

    pub fn with_sources(mut self, sources: SourceNames) -> Self {
        self.sources = sources;
        self
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn frames(&self) -> &[AlignedFrame] {
        &self.frames
    }

    /// Resolves what is still pending and returns the episode so far.
    pub fn finish(&mut self) -> Episode {
        let tail = self.recorder.aligner.flush();
        if self.recording {
            self.frames.extend(tail);
        }
        Episode {
            header: self.header.clone(),
            frames: self.frames.clone(),
            footer: Footer {
                aborted: false,
                drops: self.recorder.aligner.stats().missing.clone(),
            },
        }
    }
}

impl Node for RecorderNode {
    fn name(&self) -> &str {
        &self.name
    }

    fn subscriptions(&self) -> Vec<Subscription> {
        self.sources.subscriptions()
    }

    fn period(&self) -> i64 {
        self.period
    }

    fn tick(&mut self, ctx: &mut NodeContext<'_>) {
        for r in ctx.take_inbox() {
            let Some(c) = self.recorder.ingest(&r) else {
                continue;
            };
            if c.get("echo").is_some() || !c.is_for(&self.name) {
                continue;
            }
            let cmd = c.command();
            let on = match cmd {
                Ok(Command::RecordBegin) => true,
                Ok(Command::RecordEnd) => false,
                _ => continue,
            };
            if on != self.recording {
                info!("{}: recording {}", self.name, if on { "on" } else { "off" });
            }
            self.recording = on;
            let ack = ControlMessage::new(cmd.expect("matched above")).with("echo", &self.name);
            ctx.publish(Topic::CONTROL, ack.encode());
        }
        let now = self.recorder.rebase(&self.name, ctx.now());
        let frames = self.recorder.aligner.poll(now);
        if self.recording {
            self.frames.extend(frames);
        }
    }

    fn as_any(&self) -> &dyn std::any::Any {
        self
    }

    fn as_any_mut(&mut self) -> &mut dyn std::any::Any {
        self
    }
}

/// Everything that determines a virtual rig run apart from the command
/// source. Its JSON form is embedded in each episode header and digested.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RigConfig {
    pub frame_period_ns: i64,
    pub frames: usize,
    pub epsilon_ns: i64,
    pub allowance_ns: i64,
    pub motor: MotorModel,
    pub initial_pose: Pose6D,
    pub initial_width: f64,
    /// Fingertip wrench per newton of grip force.
    pub contact_l: ContactScript,
    pub contact_r: ContactScript,
    pub noise_sigma: f64,
    pub seed: u64,
    pub image_hz: f64,
    pub device: FingertipConfig,
    pub calibration_samples: usize,
}

impl Default for RigConfig {
    fn default() -> Self {
        RigConfig {
            frame_period_ns: 50 * NANOS_PER_MILLI,
            frames: 40,
            epsilon_ns: 5 * NANOS_PER_MILLI,
            allowance_ns: 10 * NANOS_PER_MILLI,
            motor: MotorModel::default(),
            initial_pose: Pose6D::identity(),
            initial_width: 0.08,
            contact_l: ContactScript::constant(Wrench6D::from_array([0.0, 0.0, 0.1, 0.001, 0.0, 0.0])),
            contact_r: ContactScript::constant(Wrench6D::from_array([0.0, 0.0, -0.1, -0.001, 0.0, 0.0])),
            noise_sigma: 0.0,
            seed: 0,
            image_hz: 10.0,
            device: FingertipConfig::default(),
            calibration_samples: 200,
        }
    }
}

impl RigConfig {
    pub fn validate(&self) -> Result<(), RigError> {
        self.motor.validate()?;
        self.contact_l.validate()?;
        self.contact_r.validate()?;
        let p = self.frame_period_ns;
        let dt = self.motor.period_ns();
        if p <= 0 || p % 2 != 0 || dt <= 0 || p % dt != 0 {
            return Err(RigError::Config(format!(
                "frame period {p} ns must be even and a multiple of the motor period {dt} ns"
            )));
        }
        if self.frames < 2 {
            return Err(RigError::Config("need at least two frames".into()));
        }
        if self.epsilon_ns <= 0 || self.allowance_ns < 0 || self.epsilon_ns + self.allowance_ns > p / 2 {
            return Err(RigError::Config("epsilon + allowance must fit in half a frame period".into()));
        }
        if !(self.image_hz > 0.0) || !(self.noise_sigma >= 0.0) || !self.initial_width.is_finite() {
            return Err(RigError::Config("image rate, noise and initial width must be valid".into()));
        }
        if self.calibration_samples < 48 {
            return Err(RigError::Config("calibration needs at least 48 samples".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("rig config serializes")
    }

    pub fn digest(&self) -> String {
        digest(self.to_json().to_string().as_bytes())
    }

    pub fn from_header(h: &EpisodeHeader) -> Result<RigConfig, RigError> {
        let v = h.config.clone().ok_or_else(|| RigError::Config("episode carries no rig config".into()))?;
        let cfg: RigConfig = serde_json::from_value(v).map_err(|e| RigError::Config(e.to_string()))?;
        if cfg.digest() != h.config_digest {
            return Err(RigError::Config("embedded rig config does not match its digest".into()));
        }
        Ok(cfg)
    }

    pub fn align_config(&self) -> AlignConfig {
        AlignConfig {
            reference: Topic::POSE,
            epsilon_ns: self.epsilon_ns,
            ..Default::default()
        }
    }

    pub fn header(&self) -> EpisodeHeader {
        let pose_hz = 1e9 / self.frame_period_ns as f64;
        let tip_hz = 2.0 * pose_hz;
        let rates = [
            (Topic::POSE, pose_hz),
            (Topic::RGB, self.image_hz),
            (Topic::DEPTH, self.image_hz),
            (Topic::GRIP_STATE, 1.0 / self.motor.dt),
            (Topic::WRENCH_L, tip_hz),
            (Topic::WRENCH_R, tip_hz),
        ]
        .into_iter()
        .map(|(t, hz)| (t.to_string(), hz))
        .collect();
        EpisodeHeader {
            config_digest: self.digest(),
            rates,
            start_time: 0,
            seed: self.seed,
            epsilon_ns: self.epsilon_ns,
            reference_topic: Topic::POSE.to_string(),
            config: Some(self.to_json()),
            ..Default::default()
        }
    }

    /// Noiseless calibration of the fingertip device.
    pub fn estimator(&self) -> Result<EstimatorModel, RigError> {
        let tip = self.device.fingertip().map_err(NodeError::from)?;
        let schedule = calibration_schedule(self.calibration_samples, LoadScale::default(), self.seed);
        let cs = generate_calibration(&tip, &schedule, 0.0, self.seed).map_err(NodeError::from)?;
        Ok(calibrate(&cs, 0.0).map_err(NodeError::from)?)
    }
}

/// A built virtual rig: follower arm, motor, two fingertips and the pilot.
pub struct Rig {
    pub world: World,
    pilot: usize,
    cfg: RigConfig,
}

/// Result of a finished rig run.
#[derive(Debug, Clone)]
pub struct RigRun {
    pub episode: Episode,
    pub actions: Vec<Action>,
    pub grip_log: Vec<(Timestamp, GripState)>,
}

impl Rig {
    pub fn new(cfg: &RigConfig, command: CommandSource, estimator: &EstimatorModel) -> Result<Rig, RigError> {
        cfg.validate()?;
        let p = cfg.frame_period_ns;
        let half = p / 2;
        let mut world = World::default();
        let link = LinkConfig::default();

        let motor = MotorNode::new(MOTOR_NAME, cfg.motor, cfg.initial_width, SetpointSource::Commands)?
            .commands_from(PILOT_NAME)
            .with_phase(half % cfg.motor.period_ns());
        world.add_node(Box::new(motor), link)?;
        for (i, (name, side, contact)) in [
            (TIP_L_NAME, Side::Left, &cfg.contact_l),
            (TIP_R_NAME, Side::Right, &cfg.contact_r),
        ]
        .into_iter()
        .enumerate()
        {
            let tip = cfg.device.fingertip().map_err(NodeError::from)?;
            let node = FingertipNode::new(name, side, tip, estimator.clone(), contact.clone(), 1.0)?
                .attached_to(MOTOR_NAME)
                .with_noise(cfg.noise_sigma, cfg.seed.wrapping_add(i as u64))
                .with_period(half, 0);
            world.add_node(Box::new(node), link)?;
        }
        let source = PoseSource::Commanded {
            initial: cfg.initial_pose,
            from: Some(PILOT_NAME.into()),
        };
        let arm = PhoneNode::new(ARM_NAME, source, 1e9 / p as f64, cfg.image_hz)?.with_period(p, half);
        world.add_node(Box::new(arm), link)?;
        let pilot = Pilot::new(command, cfg.header(), cfg.align_config(), cfg.allowance_ns, p, cfg.frames)?;
        let pilot = world.add_node(Box::new(pilot), link)?;
        Ok(Rig {
            world,
            pilot,
            cfg: cfg.clone(),
        })
    }

    pub fn pilot(&self) -> &Pilot {
        self.world.node_as::<Pilot>(self.pilot).expect("pilot slot")
    }

    /// Runs until the pilot is done (or a generous time limit passes).
    pub fn run(mut self) -> Result<RigRun, RigError> {
        let limit = Timestamp(self.cfg.frame_period_ns * (self.cfg.frames as i64 + 4));
        let slot = self.pilot;
        self.world
            .run_while(limit, |w| w.node_as::<Pilot>(slot).is_some_and(Pilot::is_done))?;
        let p = self.pilot();
        if !p.is_done() {
            warn!("rig stopped at the time limit with {} frames", p.frames().len());
        }
        Ok(RigRun {
            episode: p.episode(),
            actions: p.issued().to_vec(),
            grip_log: p.grip_log().to_vec(),
        })
    }
}

pub fn run_rig(cfg: &RigConfig, command: CommandSource, estimator: &EstimatorModel) -> Result<RigRun, RigError> {
    Rig::new(cfg, command, estimator)?.run()
}

/// Re-executes a recorded episode on a fresh rig built from its embedded config.
pub fn replay_episode(e: &Episode, estimator: Option<&EstimatorModel>) -> Result<RigRun, RigError> {
    let mut cfg = RigConfig::from_header(&e.header)?;
    cfg.frames = cfg.frames.min(e.frames.len());
    let est = match estimator {
        Some(m) => m.clone(),
        None => cfg.estimator()?,
    };
    run_rig(&cfg, CommandSource::replay(e), &est)
}

/// Runs a policy from the episode's start state for as many frames.
pub fn execute_policy(
    start: &Episode,
    policy: &PolicyKNN,
    estimator: Option<&EstimatorModel>,
) -> Result<RigRun, RigError> {
    let cfg = RigConfig::from_header(&start.header)?;
    let est = match estimator {
        Some(m) => m.clone(),
        None => cfg.estimator()?,
    };
    run_rig(&cfg, CommandSource::Policy(policy.clone()), &est)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepError {
    pub t_demo: Timestamp,
    pub t_executed: Timestamp,
    pub position: f64,
    pub orientation: f64,
    pub grip: f64,
    pub wrench_l: [f64; 6],
    pub wrench_r: [f64; 6],
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct Summary {
    pub mean: f64,
    pub max: f64,
}

impl Summary {
    fn of(v: impl Iterator<Item = f64>) -> Summary {
        let (mut n, mut sum, mut max) = (0usize, 0.0, 0.0f64);
        for x in v {
            n += 1;
            sum += x;
            max = max.max(x);
        }
        Summary {
            mean: if n == 0 { 0.0 } else { sum / n as f64 },
            max,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiscrepancyReport {
    pub steps: Vec<StepError>,
    pub position: Summary,
    pub orientation: Summary,
    pub grip: Summary,
    pub wrench_l: [Summary; 6],
    pub wrench_r: [Summary; 6],
}

/// Pairs every demo frame inside the executed time range with the executed
/// frame nearest in reference time (ties to the earlier one).
pub fn discrepancy_log(demo: &Episode, executed: &Episode) -> Result<DiscrepancyReport, SyncError> {
    let (Some(d0), Some(e0)) = (demo.frames.first(), executed.frames.first()) else {
        return Err(SyncError::InsufficientData("both episodes need frames".into()));
    };
    let d1 = demo.frames.last().expect("non-empty").t;
    let e1 = executed.frames.last().expect("non-empty").t;
    if d1 < e0.t || e1 < d0.t {
        return Err(SyncError::NoOverlap);
    }
    let ts: VecDeque<Timestamp> = executed.frames.iter().map(|f| f.t).collect();
    let mut steps = Vec::new();
    for d in demo.frames.iter().filter(|f| f.t >= e0.t && f.t <= e1) {
        let i = nearest_index(&ts, d.t, i64::MAX).expect("range overlaps");
        let e = &executed.frames[i];
        let axis = |a: &Wrench6D, b: &Wrench6D| {
            let (a, b) = (a.to_array(), b.to_array());
            std::array::from_fn(|k| (a[k] - b[k]).abs())
        };
        steps.push(StepError {
            t_demo: d.t,
            t_executed: e.t,
            position: (d.pose.position() - e.pose.position()).norm(),
            orientation: quat_angle(&d.pose.orientation(), &e.pose.orientation()),
            grip: (d.grip.width - e.grip.width).abs(),
            wrench_l: axis(&d.wrench_l, &e.wrench_l),
            wrench_r: axis(&d.wrench_r, &e.wrench_r),
        });
    }
    Ok(DiscrepancyReport {
        position: Summary::of(steps.iter().map(|s| s.position)),
        orientation: Summary::of(steps.iter().map(|s| s.orientation)),
        grip: Summary::of(steps.iter().map(|s| s.grip)),
        wrench_l: std::array::from_fn(|k| Summary::of(steps.iter().map(|s| s.wrench_l[k]))),
        wrench_r: std::array::from_fn(|k| Summary::of(steps.iter().map(|s| s.wrench_r[k]))),
        steps,
    })
}

/// Ten pick-style scripts: approach from distinct start poses while opening,
/// close on an object while still descending, then lift toward distinct
/// goals. Motion never pauses, so no two frames share an observation.
pub fn pick_demo_scripts(count: usize, duration_s: f64) -> Vec<TrajectoryScript> {
    use crate::nodes::Waypoint;
    use nalgebra::Vector3;
    (0..count)
        .map(|i| {
            let a = i as f64;
            let start = Pose6D::from_parts(
                Vector3::new(0.02 * a, -0.01 * a, 0.15 + 0.005 * a),
                nalgebra::UnitQuaternion::from_axis_angle(&Vector3::z_axis(), 0.05 * a),
            );
            let grasp = Pose6D::from_parts(
                Vector3::new(0.02 * a + 0.01, 0.03, 0.05),
                nalgebra::UnitQuaternion::from_axis_angle(&Vector3::z_axis(), 0.05 * a + 0.2),
            );
            let below = grasp.compose(&Pose6D::from_translation(0.0, 0.0, -0.01));
            let goal = Pose6D::from_parts(
                Vector3::new(-0.03 * a, 0.05 + 0.01 * a, 0.2),
                nalgebra::UnitQuaternion::from_axis_angle(&Vector3::x_axis(), 0.03 * a + 0.1),
            );
            let t = duration_s;
            let wp = |f: f64, pose: Pose6D, grip: f64| Waypoint { t: f * t, pose, grip };
            TrajectoryScript::new(vec![
                wp(0.0, start, 0.08),
                wp(0.35, grasp, 0.09),
                wp(0.55, below, 0.02),
                wp(1.0, goal, 0.02),
            ])
            .expect("waypoints are increasing")
        })
        .collect()
}

/// Rig config for one pick demo: starts at the script's first waypoint,
/// with an object that stalls the jaws at 4 cm.
pub fn pick_rig_config(script: &TrajectoryScript, frames: usize, seed: u64) -> RigConfig {
    let (pose, grip) = script.sample(0.0);
    RigConfig {
        frames,
        initial_pose: pose,
        initial_width: grip,
        motor: MotorModel {
            obstacle_width: Some(0.04),
            ..Default::default()
        },
        seed,
        ..Default::default()
    }
}

pub fn frames_for(duration_s: f64, period_ns: i64) -> usize {
    (duration_s * 1e9 / period_ns as f64).floor() as usize + 1
}

/// Summary of per-topic drops, for log lines.
pub fn describe_drops(f: &Footer) -> String {
    if f.drops.is_empty() {
        return "none".into();
    }
    let parts: Vec<String> = f.drops.iter().map(|(t, n)| format!("{t}={n}")).collect();
    parts.join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sync::train_bc;
    use crate::sync::ScaleWeights;
    use std::sync::OnceLock;

    fn estimator() -> &'static EstimatorModel {
        static E: OnceLock<EstimatorModel> = OnceLock::new();
        E.get_or_init(|| RigConfig::default().estimator().unwrap())
    }

    fn demo(i: usize, frames: usize) -> (RigConfig, TrajectoryScript) {
        let s = pick_demo_scripts(i + 1, 2.0).pop().unwrap();
        (pick_rig_config(&s, frames, 7), s)
    }

    #[test]
    fn lockstep_frames_are_exact() {
        let (cfg, s) = demo(3, 30);
        let run = run_rig(&cfg, CommandSource::Script(s.clone()), estimator()).unwrap();
        let e = &run.episode;
        assert_eq!(e.frames.len(), 30);
        assert!(!e.footer.aborted);
        for (j, f) in e.frames.iter().enumerate() {
            assert_eq!(f.t, Timestamp(25 * NANOS_PER_MILLI + 50 * NANOS_PER_MILLI * j as i64));
            assert_eq!(f.dt.pose, 0);
            assert_eq!(f.dt.grip, 0);
            assert_eq!(f.dt.wrench_l, 0);
            assert_eq!(f.pose, s.sample(j as f64 * 0.05).0);
            assert_eq!(f.rgb.is_some(), j % 2 == 0);
        }
        // the jaws reach the object and squeeze
        assert!(e.frames.iter().any(|f| f.grip.stalled && f.grip.grip_force > 0.0));
        assert!(e.frames.iter().any(|f| f.wrench_l.force.norm() > 0.1));
    }

    #[test]
    fn replay_reproduces_bytes_and_grip_stream() {
        let (cfg, s) = demo(1, 25);
        let first = run_rig(&cfg, CommandSource::Script(s), estimator()).unwrap();
        let bytes = first.episode.to_bytes();
        let loaded = Episode::from_bytes(&bytes).unwrap();
        let again = replay_episode(&loaded, Some(estimator())).unwrap();
        assert_eq!(again.episode.to_bytes(), bytes);
        assert_eq!(again.grip_log, first.grip_log);
    }

    #[test]
    fn k1_policy_repeats_demo_actions() {
        let demos: Vec<RigRun> = (0..3)
            .map(|i| {
                let (cfg, s) = demo(i, 20);
                run_rig(&cfg, CommandSource::Script(s), estimator()).unwrap()
            })
            .collect();
        let eps: Vec<Episode> = demos.iter().map(|d| d.episode.clone()).collect();
        let policy = train_bc(&eps, 1, ScaleWeights::default()).unwrap();
        for d in &demos {
            let run = execute_policy(&d.episode, &policy, Some(estimator())).unwrap();
            assert_eq!(run.actions.len(), d.actions.len());
            for (a, b) in run.actions.iter().zip(&d.actions) {
                assert_eq!(a.grip_setpoint, b.grip_setpoint);
            }
            let r = discrepancy_log(&d.episode, &run.episode).unwrap();
            assert_eq!(r.steps.len(), 20);
            assert_eq!(r.grip.max, 0.0);
            assert!(r.position.max < 1e-12, "{}", r.position.max);
            assert!(r.orientation.max < 1e-12);
        }
    }

    #[test]
    fn node_down_aborts_and_file_loads() {
        let (cfg, s) = demo(0, 30);
        let mut rig = Rig::new(&cfg, CommandSource::Script(s), estimator()).unwrap();
        rig.world.run_until(Timestamp(400 * NANOS_PER_MILLI)).unwrap();
        let motor = rig.world.slot_of(MOTOR_NAME).unwrap();
        rig.world.kill_node(motor, "test").unwrap();
        let run = rig.run().unwrap();
        assert!(run.episode.footer.aborted);
        assert!(run.episode.frames.len() < 30);
        let back = Episode::from_bytes(&run.episode.to_bytes()).unwrap();
        assert!(back.footer.aborted);
        assert_eq!(back.frames.len(), run.episode.frames.len());
    }

    #[test]
    fn recorder_toggles_and_acks() {
        let mut r = RecorderNode::new("rec", EpisodeHeader::default(), AlignConfig::default(), 0, 1_000_000, false).unwrap();
        let mut seqs = std::collections::BTreeMap::new();
        let msg = |topic: Topic, t: i64, payload: Vec<u8>| Received {
            from: Arc::from("x"),
            msg: crate::proto::codec::Message::new(topic, 0, Timestamp(t), payload),
            received_at: Timestamp(t),
        };
        let data = |t: i64| {
            vec![
                msg(Topic::POSE, t, Pose6D::identity().to_payload()),
                msg(Topic::GRIP_STATE, t, GripState::at_rest(0.05).to_payload()),
                msg(Topic::WRENCH_L, t, Wrench6D::ZERO.to_payload()),
                msg(Topic::WRENCH_R, t, Wrench6D::ZERO.to_payload()),
            ]
        };
        let mut ctx = NodeContext::new(Timestamp(50_000_000), data(0), &mut seqs);
        r.tick(&mut ctx);
        let mut inbox = data(100_000_000);
        inbox.push(msg(Topic::CONTROL, 0, ControlMessage::new(Command::RecordBegin).encode()));
        let mut ctx = NodeContext::new(Timestamp(100_000_000), inbox, &mut seqs);
        r.tick(&mut ctx);
        let out = ctx.into_outbox();
        assert!(r.is_recording());
        let ack = ControlMessage::decode(&out[0].payload).unwrap();
        assert_eq!(ack.get("echo"), Some("rec"));
        assert_eq!(ack.command(), Ok(Command::RecordBegin));
        // frame at 0 resolved while off, frame at 100 ms kept on finish
        assert!(r.frames().is_empty());
        let e = r.finish();
        assert_eq!(e.frames.len(), 1);
        assert_eq!(e.frames[0].t, Timestamp(100_000_000));
    }

    #[test]
    fn discrepancy_examples() {
        let (cfg, s) = demo(2, 10);
        let e = run_rig(&cfg, CommandSource::Script(s), estimator()).unwrap().episode;
        let same = discrepancy_log(&e, &e).unwrap();
        assert_eq!(same.position.max, 0.0);
        assert_eq!(same.orientation.max, 0.0);
        assert_eq!(same.wrench_l[2].max, 0.0);

        let mut shifted = e.clone();
        let mut turned = e.clone();
        let rot = Pose6D::from_axis_angle(nalgebra::Vector3::z(), std::f64::consts::FRAC_PI_2);
        for (a, b) in shifted.frames.iter_mut().zip(turned.frames.iter_mut()) {
            a.pose = a.pose.with_position(a.pose.position() + nalgebra::Vector3::new(0.01, 0.0, 0.0));
            b.pose = Pose6D::from_parts(b.pose.position(), b.pose.orientation() * rot.orientation());
        }
        let r = discrepancy_log(&e, &shifted).unwrap();
        for st in &r.steps {
            assert!((st.position - 0.01).abs() < 1e-15);
            assert_eq!(st.orientation, 0.0);
        }
        let r = discrepancy_log(&e, &turned).unwrap();
        for st in &r.steps {
            assert!((st.orientation - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
        }

        let mut late = e.clone();
        for f in &mut late.frames {
            f.t = Timestamp(f.t.0 + 10_000_000_000);
        }
        assert_eq!(discrepancy_log(&e, &late), Err(SyncError::NoOverlap));
    }
}
