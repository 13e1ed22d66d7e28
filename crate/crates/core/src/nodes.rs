//! Simulated devices: the phone (pose + procedural camera frames), the grip
//! motor controller, and the two fingertip sensors.

use std::any::Any;
use std::path::{Path, PathBuf};

use log::{debug, info};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fourbar::FourBarParams;
use crate::lattice::{Fingertip, FingertipConfig, LatticeError};
use crate::pose::Pose6D;
use crate::proto::codec::Topic;
use crate::proto::control::{Command, ControlMessage, Subscription};
use crate::proto::payload::{GripCommand, HapticFeedback, Image, ImageFormat, Payload, TeleopCommand};
use crate::sim::{DelayModel, LinkConfig, Node, NodeContext};
use crate::types::{period_from_hz, GripState, Timestamp, Wrench6D};
use crate::wrench::{EstimatorModel, WrenchError};

#[derive(Debug, Error)]
pub enum NodeError {
    #[error("invalid script: {0}")]
    Script(String),
    #[error("invalid node config: {0}")]
    Config(String),
    #[error(transparent)]
    Lattice(#[from] LatticeError),
    #[error(transparent)]
    Wrench(#[from] WrenchError),
    #[error("reading {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

/// Stall is reported only when the setpoint lies at least this far inside
/// the obstacle.
pub const STALL_EPS: f64 = 1e-6;

pub const IMAGE_WIDTH: u16 = 64;
pub const IMAGE_HEIGHT: u16 = 48;
const CHECKER: usize = 8;

fn elapsed_secs(start: &mut Option<Timestamp>, now: Timestamp) -> f64 {
    let s = *start.get_or_insert(now);
    now.since(s) as f64 * 1e-9
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Waypoint {
    pub t: f64,
    pub pose: Pose6D,
    pub grip: f64,
}

/// Timed pose + grip waypoints, interpolated piecewise (linear position and
/// grip, slerp orientation) and held constant outside the time range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Waypoint>", into = "Vec<Waypoint>")]
pub struct TrajectoryScript {
    waypoints: Vec<Waypoint>,
}

impl TryFrom<Vec<Waypoint>> for TrajectoryScript {
    type Error = NodeError;
    fn try_from(w: Vec<Waypoint>) -> Result<Self, NodeError> {
        TrajectoryScript::new(w)
    }
}

impl From<TrajectoryScript> for Vec<Waypoint> {
    fn from(s: TrajectoryScript) -> Self {
        s.waypoints
    }
}

impl TrajectoryScript {
    pub fn new(waypoints: Vec<Waypoint>) -> Result<Self, NodeError> {
        if waypoints.is_empty() {
            return Err(NodeError::Script("no waypoints".into()));
        }
        for w in &waypoints {
            if !w.t.is_finite() || !w.grip.is_finite() || !w.pose.is_finite() {
                return Err(NodeError::Script(format!("non-finite waypoint at t={}", w.t)));
            }
            if w.grip < 0.0 {
                return Err(NodeError::Script(format!("negative grip at t={}", w.t)));
            }
        }
        if let Some(p) = waypoints.windows(2).find(|p| p[1].t <= p[0].t) {
            return Err(NodeError::Script(format!("times not increasing at t={}", p[1].t)));
        }
        Ok(TrajectoryScript { waypoints })
    }

    pub fn constant(pose: Pose6D, grip: f64) -> Self {
        TrajectoryScript {
            waypoints: vec![Waypoint { t: 0.0, pose, grip }],
        }
    }

    pub fn waypoints(&self) -> &[Waypoint] {
        &self.waypoints
    }

    pub fn duration(&self) -> f64 {
        self.waypoints.last().map_or(0.0, |w| w.t)
    }

    pub fn check_grip_range(&self, max_width: f64) -> Result<(), NodeError> {
        match self.waypoints.iter().find(|w| w.grip > max_width) {
            Some(w) => Err(NodeError::Script(format!("grip {} above {max_width} at t={}", w.grip, w.t))),
            None => Ok(()),
        }
    }

    pub fn sample(&self, t: f64) -> (Pose6D, f64) {
        let w = &self.waypoints;
        let i = w.partition_point(|p| p.t <= t);
        if i == 0 {
            return (w[0].pose, w[0].grip);
        }
        if i == w.len() {
            let l = &w[i - 1];
            return (l.pose, l.grip);
        }
        let (a, b) = (&w[i - 1], &w[i]);
        let u = (t - a.t) / (b.t - a.t);
        let pose = a.pose.interpolate(&b.pose, u.clamp(0.0, 1.0)).expect("u in [0, 1]");
        (pose, a.grip + (b.grip - a.grip) * u)
    }
}

/// Contact wrench versus time, linearly interpolated and held at the ends.
/// When the fingertip is attached to a motor the value is per newton of grip
/// force.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ContactScript {
    pub points: Vec<(f64, [f64; 6])>,
}

impl ContactScript {
    pub fn constant(w: Wrench6D) -> Self {
        ContactScript {
            points: vec![(0.0, w.to_array())],
        }
    }

    pub fn validate(&self) -> Result<(), NodeError> {
        if self.points.iter().any(|(t, w)| !t.is_finite() || w.iter().any(|v| !v.is_finite())) {
            return Err(NodeError::Script("non-finite contact point".into()));
        }
        if self.points.windows(2).any(|p| p[1].0 <= p[0].0) {
            return Err(NodeError::Script("contact times not increasing".into()));
        }
        Ok(())
    }

    pub fn at(&self, t: f64) -> Wrench6D {
        let p = &self.points;
        if p.is_empty() {
            return Wrench6D::ZERO;
        }
        let i = p.partition_point(|q| q.0 <= t);
        let a = if i == 0 {
            p[0].1
        } else if i == p.len() {
            p[i - 1].1
        } else {
            let (t0, a) = p[i - 1];
            let (t1, b) = p[i];
            let u = (t - t0) / (t1 - t0);
            std::array::from_fn(|k| a[k] + (b[k] - a[k]) * u)
        };
        Wrench6D::from_array(a)
    }
}

/// Pixel pattern shared by RGB and depth frames: 8-pixel checkerboard.
fn checker(x: usize, y: usize) -> bool {
    (x / CHECKER + y / CHECKER) % 2 == 1
}

/// RGB frame: R = checkerboard (0/255), G/B = low/high byte of `seq`.
pub fn rgb_frame(seq: u32) -> Image {
    let (w, h) = (IMAGE_WIDTH as usize, IMAGE_HEIGHT as usize);
    let mut data = Vec::with_capacity(w * h * 3);
    for y in 0..h {
        for x in 0..w {
            data.extend_from_slice(&[if checker(x, y) { 255 } else { 0 }, seq as u8, (seq >> 8) as u8]);
        }
    }
    Image {
        width: IMAGE_WIDTH,
        height: IMAGE_HEIGHT,
        format: ImageFormat::Rgb8,
        data,
    }
}

/// Depth frame in mm: 500 + 100·checker + seq mod 100.
pub fn depth_frame(seq: u32) -> Image {
    let (w, h) = (IMAGE_WIDTH as usize, IMAGE_HEIGHT as usize);
    let mut data = Vec::with_capacity(w * h * 2);
    for y in 0..h {
        for x in 0..w {
            let v = 500 + 100 * checker(x, y) as u16 + (seq % 100) as u16;
            data.extend_from_slice(&v.to_le_bytes());
        }
    }
    Image {
        width: IMAGE_WIDTH,
        height: IMAGE_HEIGHT,
        format: ImageFormat::Depth16,
        data,
    }
}

/// Recovers the frame counter from a procedural frame: the low 16 bits for
/// RGB, `seq mod 100` for depth. None if the checkerboard does not match.
pub fn decode_frame_seq(img: &Image) -> Option<u32> {
    let w = img.width as usize;
    let px = |x: usize, y: usize| (y * w + x) * img.format.bytes_per_pixel();
    match img.format {
        ImageFormat::Rgb8 => {
            let d = &img.data;
            let (g, b) = (*d.get(1)?, *d.get(2)?);
            for y in 0..img.height as usize {
                for x in 0..w {
                    let i = px(x, y);
                    if d[i] != if checker(x, y) { 255 } else { 0 } || d[i + 1] != g || d[i + 2] != b {
                        return None;
                    }
                }
            }
            Some(g as u32 | (b as u32) << 8)
        }
        ImageFormat::Depth16 => {
            let v = |i: usize| u16::from_le_bytes([img.data[i], img.data[i + 1]]);
            let s = v(0).checked_sub(500)?;
            if s >= 100 {
                return None;
            }
            for y in 0..img.height as usize {
                for x in 0..w {
                    if v(px(x, y)) != 500 + 100 * checker(x, y) as u16 + s {
                        return None;
                    }
                }
            }
            Some(s as u32)
        }
    }
}

#[derive(Debug, Clone)]
pub enum PoseSource {
    Script(TrajectoryScript),
    /// Follows TELEOP_CMD targets (from any publisher, or the named one).
    Commanded { initial: Pose6D, from: Option<String> },
}

pub struct PhoneNode {
    name: String,
    source: PoseSource,
    period: i64,
    phase: i64,
    image_every: u64,
    ticks: u64,
    frames: u32,
    start: Option<Timestamp>,
    pose: Pose6D,
    running: bool,
}

impl PhoneNode {
    pub fn new(name: &str, source: PoseSource, pose_hz: f64, image_hz: f64) -> Result<Self, NodeError> {
        if !(pose_hz > 0.0) || !(image_hz > 0.0) {
            return Err(NodeError::Config("phone rates must be positive".into()));
        }
        let pose = match &source {
            PoseSource::Script(s) => s.sample(0.0).0,
            PoseSource::Commanded { initial, .. } => *initial,
        };
        Ok(PhoneNode {
            name: name.into(),
            source,
            period: period_from_hz(pose_hz),
            phase: 0,
            image_every: (pose_hz / image_hz).round().max(1.0) as u64,
            ticks: 0,
            frames: 0,
            start: None,
            pose,
            running: true,
        })
    }

    pub fn with_period(mut self, period_ns: i64, phase_ns: i64) -> Self {
        self.period = period_ns;
        self.phase = phase_ns;
        self
    }

    pub fn pose(&self) -> Pose6D {
        self.pose
    }

    pub fn frames(&self) -> u32 {
        self.frames
    }
}

impl Node for PhoneNode {
    fn name(&self) -> &str {
        &self.name
    }

    fn subscriptions(&self) -> Vec<Subscription> {
        let mut subs = vec![Subscription::all(Topic::CONTROL)];
        if let PoseSource::Commanded { from, .. } = &self.source {
            subs.push(match from {
                Some(p) => Subscription::from(Topic::TELEOP_CMD, p.clone()),
                None => Subscription::all(Topic::TELEOP_CMD),
            });
        }
        subs
    }

    fn period(&self) -> i64 {
        self.period
    }

    fn phase(&self) -> i64 {
        self.phase
    }

    fn tick(&mut self, ctx: &mut NodeContext<'_>) {
        let t = elapsed_secs(&mut self.start, ctx.now());
        for r in ctx.take_inbox() {
            match r.msg.topic {
                Topic::TELEOP_CMD => {
                    if let Ok(c) = TeleopCommand::from_payload(&r.msg.payload) {
                        self.pose = c.target;
                    }
                }
                Topic::CONTROL => apply_start_stop(&r.msg.payload, &self.name, &mut self.running),
                _ => {}
            }
        }
        if !self.running {
            return;
        }
        if let PoseSource::Script(s) = &self.source {
            self.pose = s.sample(t).0;
        }
        ctx.publish_payload(Topic::POSE, &self.pose);
        if self.ticks.is_multiple_of(self.image_every) {
            ctx.publish_payload(Topic::RGB, &rgb_frame(self.frames));
            ctx.publish_payload(Topic::DEPTH, &depth_frame(self.frames));
            self.frames = self.frames.wrapping_add(1);
        }
        self.ticks += 1;
    }

    fn as_any(&self) -> &dyn Any {
        self
    }

    fn as_any_mut(&mut self) -> &mut dyn Any {
        self
    }
}

fn apply_start_stop(payload: &[u8], name: &str, running: &mut bool) {
    let Ok(c) = ControlMessage::decode(payload) else {
        return;
    };
    if !c.is_for(name) {
        return;
    }
    match c.command() {
        Ok(Command::Start) => *running = true,
        Ok(Command::Stop) => *running = false,
        _ => {}
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MotorModel {
    /// m/s
    pub v_max: f64,
    /// N/m
    pub stiffness: f64,
    /// N
    pub force_cap: f64,
    /// N
    pub backdrive_threshold: f64,
    /// s
    pub dt: f64,
    /// Width of a grasped object, m.
    pub obstacle_width: Option<f64>,
    pub fourbar: FourBarParams,
}

impl Default for MotorModel {
    fn default() -> Self {
        MotorModel {
            v_max: 0.1,
            stiffness: 500.0,
            force_cap: 20.0,
            backdrive_threshold: 5.0,
            dt: 0.01,
            obstacle_width: None,
            fourbar: FourBarParams::default(),
        }
    }
}

impl MotorModel {
    pub fn validate(&self) -> Result<(), NodeError> {
        let pos = [
            ("v_max", self.v_max),
            ("stiffness", self.stiffness),
            ("force_cap", self.force_cap),
            ("backdrive_threshold", self.backdrive_threshold),
            ("dt", self.dt),
        ];
        if let Some((k, _)) = pos.iter().find(|(_, v)| !(*v > 0.0 && v.is_finite())) {
            return Err(NodeError::Config(format!("motor {k} must be positive")));
        }
        if self.dt > 0.01 {
            return Err(NodeError::Config("motor dt must be at most 10 ms".into()));
        }
        if let Some(w) = self.obstacle_width {
            if !(w > 0.0) {
                return Err(NodeError::Config("obstacle width must be positive".into()));
            }
        }
        self.fourbar
            .validate()
            .map_err(|e| NodeError::Config(e.to_string()))
    }

    pub fn min_width(&self) -> f64 {
        self.fourbar.closed_width
    }

    pub fn max_width(&self) -> f64 {
        self.fourbar.max_width()
    }

    pub fn period_ns(&self) -> i64 {
        (self.dt * 1e9).round() as i64
    }
}

/// One control period of the grip actuator.
pub fn motor_step(m: &MotorModel, s: &GripState, setpoint: f64, external_force: f64, dt: f64) -> GripState {
    let (lo, hi) = (m.min_width(), m.max_width());
    let setpoint = if setpoint.is_finite() { setpoint.clamp(lo, hi) } else { s.setpoint.clamp(lo, hi) };
    let width = if s.width.is_finite() { s.width.clamp(lo, hi) } else { lo };
    let step = m.v_max * if dt.is_finite() { dt.max(0.0) } else { 0.0 };
    let external = if external_force.is_finite() { external_force } else { 0.0 };

    let (width, stalled, grip_force) = if external > m.backdrive_threshold {
        let away = if width < setpoint { -1.0 } else { 1.0 };
        ((width + away * step).clamp(lo, hi), false, 0.0)
    } else if let Some(wo) = m.obstacle_width.filter(|&wo| setpoint < wo - STALL_EPS && width >= wo) {
        if width - step <= wo {
            (wo, true, m.force_cap.min(m.stiffness * (wo - setpoint)))
        } else {
            (width - step, false, 0.0)
        }
    } else {
        let gap = setpoint - width;
        if gap.abs() <= step * (1.0 + 1e-9) {
            (setpoint, false, 0.0)
        } else {
            (width + step.copysign(gap), false, 0.0)
        }
    };

    GripState {
        width,
        setpoint,
        motor_angle: m.fourbar.angle_for_width(width),
        grip_force,
        stalled,
    }
}

#[derive(Debug, Clone)]
pub enum SetpointSource {
    /// Latest GRIP_CMD.
    Commands,
    /// Grip channel of a trajectory script.
    Script(TrajectoryScript),
    /// Alternates low/high every half period, starting low.
    Square { low: f64, high: f64, hz: f64 },
}

impl SetpointSource {
    fn at(&self, t: f64) -> Option<f64> {
        match self {
            SetpointSource::Commands => None,
            SetpointSource::Script(s) => Some(s.sample(t).1),
            SetpointSource::Square { low, high, hz } => {
                let phase = (t * hz).fract();
                Some(if phase < 0.5 { *low } else { *high })
            }
        }
    }
}

/// Step-wise external force on the jaws (operator squeezing the handle or
/// pushing the fingers open), `(t, N)` held until the next point.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ForceScript {
    pub steps: Vec<(f64, f64)>,
}

impl ForceScript {
    pub fn at(&self, t: f64) -> f64 {
        let i = self.steps.partition_point(|s| s.0 <= t);
        if i == 0 {
            0.0
        } else {
            self.steps[i - 1].1
        }
    }
}

pub struct MotorNode {
    name: String,
    model: MotorModel,
    state: GripState,
    source: SetpointSource,
    command_from: Option<String>,
    external: ForceScript,
    setpoint: f64,
    running: bool,
    start: Option<Timestamp>,
    phase: i64,
    pub bad_commands: u64,
    pub haptic: Option<HapticFeedback>,
    pub haptic_count: u64,
}

impl MotorNode {
    pub fn new(name: &str, model: MotorModel, initial_width: f64, source: SetpointSource) -> Result<Self, NodeError> {
        model.validate()?;
        let w = initial_width.clamp(model.min_width(), model.max_width());
        let mut state = GripState::at_rest(w);
        state.motor_angle = model.fourbar.angle_for_width(w);
        Ok(MotorNode {
            name: name.into(),
            model,
            state,
            source,
            command_from: None,
            external: ForceScript::default(),
            setpoint: w,
            running: true,
            start: None,
            phase: 0,
            bad_commands: 0,
            haptic: None,
            haptic_count: 0,
        })
    }

    /// Accept GRIP_CMD only from `publisher`.
    pub fn commands_from(mut self, publisher: &str) -> Self {
        self.command_from = Some(publisher.into());
        self
    }

    pub fn with_external_force(mut self, f: ForceScript) -> Self {
        self.external = f;
        self
    }

    pub fn with_phase(mut self, phase_ns: i64) -> Self {
        self.phase = phase_ns;
        self
    }

    pub fn state(&self) -> GripState {
        self.state
    }

    pub fn model(&self) -> &MotorModel {
        &self.model
    }

    pub fn is_running(&self) -> bool {
        self.running
    }

    /// Force shown to the operator, from the latest HAPTIC_FB.
    pub fn felt_force(&self) -> f64 {
        self.haptic.map_or(0.0, |h| h.felt_force())
    }
}

impl Node for MotorNode {
    fn name(&self) -> &str {
        &self.name
    }

    fn subscriptions(&self) -> Vec<Subscription> {
        let cmd = match &self.command_from {
            Some(p) => Subscription::from(Topic::GRIP_CMD, p.clone()),
            None => Subscription::all(Topic::GRIP_CMD),
        };
        vec![cmd, Subscription::all(Topic::HAPTIC_FB), Subscription::all(Topic::CONTROL)]
    }

    fn period(&self) -> i64 {
        self.model.period_ns()
    }

    fn phase(&self) -> i64 {
        self.phase
    }

    fn tick(&mut self, ctx: &mut NodeContext<'_>) {
        let t = elapsed_secs(&mut self.start, ctx.now());
        for r in ctx.take_inbox() {
            match r.msg.topic {
                Topic::GRIP_CMD => match GripCommand::from_payload(&r.msg.payload) {
                    Ok(c) => {
                        if matches!(self.source, SetpointSource::Commands) {
                            self.setpoint = c.setpoint;
                        }
                    }
                    Err(e) => {
                        self.bad_commands += 1;
                        debug!("{}: ignoring GRIP_CMD: {e}", self.name);
                    }
                },
                Topic::HAPTIC_FB => {
                    if let Ok(h) = HapticFeedback::from_payload(&r.msg.payload) {
                        self.haptic = Some(h);
                        self.haptic_count += 1;
                        debug!("{}: felt force {:.3} N", self.name, h.felt_force());
                    }
                }
                Topic::CONTROL => {
                    let was = self.running;
                    apply_start_stop(&r.msg.payload, &self.name, &mut self.running);
                    if was != self.running {
                        info!("{}: {}", self.name, if self.running { "started" } else { "stopped" });
                    }
                }
                _ => {}
            }
        }
        if let Some(s) = self.source.at(t) {
            self.setpoint = s;
        }
        if self.running {
            self.state = motor_step(&self.model, &self.state, self.setpoint, self.external.at(t), self.model.dt);
        }
        ctx.publish_payload(Topic::GRIP_STATE, &self.state);
    }

    fn as_any(&self) -> &dyn Any {
        self
    }

    fn as_any_mut(&mut self) -> &mut dyn Any {
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Left,
    Right,
}

impl Side {
    pub fn markers_topic(self) -> Topic {
        match self {
            Side::Left => Topic::MARKERS_L,
            Side::Right => Topic::MARKERS_R,
        }
    }

    pub fn wrench_topic(self) -> Topic {
        match self {
            Side::Left => Topic::WRENCH_L,
            Side::Right => Topic::WRENCH_R,
        }
    }
}

pub struct FingertipNode {
    name: String,
    side: Side,
    tip: Fingertip,
    estimator: EstimatorModel,
    contact: ContactScript,
    attached: Option<String>,
    grip_force: f64,
    noise_sigma: f64,
    rng: ChaCha8Rng,
    period: i64,
    phase: i64,
    start: Option<Timestamp>,
    pub skipped: u64,
    pub last_applied: Wrench6D,
    pub last_estimate: Option<Wrench6D>,
}

impl FingertipNode {
    pub fn new(
        name: &str,
        side: Side,
        tip: Fingertip,
        estimator: EstimatorModel,
        contact: ContactScript,
        hz: f64,
    ) -> Result<Self, NodeError> {
        contact.validate()?;
        if !(hz > 0.0) {
            return Err(NodeError::Config("fingertip rate must be positive".into()));
        }
        if estimator.marker_count() != tip.model().markers.len() {
            return Err(NodeError::Config(format!(
                "estimator expects {} markers, lattice has {}",
                estimator.marker_count(),
                tip.model().markers.len()
            )));
        }
        Ok(FingertipNode {
            name: name.into(),
            side,
            tip,
            estimator,
            contact,
            attached: None,
            grip_force: 0.0,
            noise_sigma: 0.0,
            rng: ChaCha8Rng::seed_from_u64(0),
            period: period_from_hz(hz),
            phase: 0,
            start: None,
            skipped: 0,
            last_applied: Wrench6D::ZERO,
            last_estimate: None,
        })
    }

    /// Scale the contact script by the grip force reported by `motor`.
    pub fn attached_to(mut self, motor: &str) -> Self {
        self.attached = Some(motor.into());
        self
    }

    pub fn with_noise(mut self, sigma: f64, seed: u64) -> Self {
        self.noise_sigma = sigma;
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self
    }

    pub fn with_period(mut self, period_ns: i64, phase_ns: i64) -> Self {
        self.period = period_ns;
        self.phase = phase_ns;
        self
    }

    pub fn side(&self) -> Side {
        self.side
    }
}

impl Node for FingertipNode {
    fn name(&self) -> &str {
        &self.name
    }

    fn subscriptions(&self) -> Vec<Subscription> {
        self.attached
            .iter()
            .map(|m| Subscription::from(Topic::GRIP_STATE, m.clone()))
            .collect()
    }

    fn period(&self) -> i64 {
        self.period
    }

    fn phase(&self) -> i64 {
        self.phase
    }

    fn tick(&mut self, ctx: &mut NodeContext<'_>) {
        let t = elapsed_secs(&mut self.start, ctx.now());
        for r in ctx.take_inbox() {
            if r.msg.topic == Topic::GRIP_STATE {
                if let Ok(g) = GripState::from_payload(&r.msg.payload) {
                    self.grip_force = g.grip_force;
                }
            }
        }
        let mut w = self.contact.at(t);
        if self.attached.is_some() {
            w = Wrench6D::from_array(w.to_array().map(|v| v * self.grip_force));
        }
        self.last_applied = w;
        let now = ctx.now();
        let observed = if self.noise_sigma > 0.0 {
            self.tip.observe_noisy(&w, now, self.noise_sigma, &mut self.rng)
        } else {
            self.tip.observe(&w, now)
        };
        let markers = match observed {
            Ok(m) => m,
            Err(e) => {
                self.skipped += 1;
                debug!("{}: skipping tick: {e}", self.name);
                return;
            }
        };
        let est = match self.estimator.estimate(&markers) {
            Ok(e) => e,
            Err(e) => {
                self.skipped += 1;
                debug!("{}: estimate failed: {e}", self.name);
                return;
            }
        };
        ctx.publish_payload(self.side.markers_topic(), &markers);
        ctx.publish_payload(self.side.wrench_topic(), &est);
        self.last_estimate = Some(est);
    }

    fn as_any(&self) -> &dyn Any {
        self
    }

    fn as_any_mut(&mut self) -> &mut dyn Any {
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Rates {
    pub pose_hz: f64,
    pub image_hz: f64,
    pub markers_hz: f64,
}

impl Default for Rates {
    fn default() -> Self {
        Rates {
            pose_hz: 60.0,
            image_hz: 10.0,
            markers_hz: 30.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MotorSection {
    pub model: MotorModel,
    pub initial_width: f64,
    /// Accept GRIP_CMD only from this publisher.
    pub commands_from: Option<String>,
    /// `[low, high, hz]` square-wave setpoint instead of commands.
    pub square_wave: Option<[f64; 3]>,
    pub external_force: ForceScript,
}

impl Default for MotorSection {
    fn default() -> Self {
        MotorSection {
            model: MotorModel::default(),
            initial_width: 0.05,
            commands_from: None,
            square_wave: None,
            external_force: ForceScript::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FingertipSection {
    pub side: Side,
    /// MGCE estimator file, relative to the config file.
    pub estimator: PathBuf,
    pub attach_motor: Option<String>,
    pub noise_sigma: f64,
    pub seed: u64,
    pub contact: ContactScript,
    pub device: FingertipConfig,
}

impl Default for FingertipSection {
    fn default() -> Self {
        FingertipSection {
            side: Side::Left,
            estimator: PathBuf::from("estimator.mgce"),
            attach_motor: None,
            noise_sigma: 0.0,
            seed: 0,
            contact: ContactScript::default(),
            device: FingertipConfig::default(),
        }
    }
}

/// Node configuration file (TOML):
///
/// ```toml
/// node_id = "phone"
/// broker = "127.0.0.1:7600"
/// clock_skew_ns = 0
///
/// [delay]              # virtual-time runs only
/// fixed_ms = 0.0
/// jitter_std_ms = 0.0
/// seed = 0
///
/// [rates]
/// pose_hz = 60.0
/// image_hz = 10.0
/// markers_hz = 30.0
///
/// [[script]]           # phone pose / motor grip waypoints
/// t = 0.0
/// grip = 0.05
/// pose = { position = [0.0, 0.0, 0.0], orientation = [1.0, 0.0, 0.0, 0.0] }
///
/// [motor]              # control rate is 1 / model.dt
/// initial_width = 0.05
/// commands_from = "teleop"
/// square_wave = [0.02, 0.06, 0.5]
/// external_force = [[0.0, 0.0], [2.0, 6.0]]
/// [motor.model]
/// v_max = 0.1
/// stiffness = 500.0
/// force_cap = 20.0
/// backdrive_threshold = 5.0
/// dt = 0.01
/// obstacle_width = 0.05
///
/// [fingertip]
/// side = "left"
/// estimator = "left.mgce"
/// attach_motor = "motor"
/// noise_sigma = 0.0
/// seed = 0
/// contact = [[0.0, [0.0, 0.0, 0.1, 0.0, 0.0, 0.0]]]
/// [fingertip.device]   # lattice + camera, see FingertipConfig
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NodeConfig {
    pub node_id: String,
    pub broker: String,
    pub clock_skew_ns: i64,
    pub delay: DelayModel,
    pub rates: Rates,
    pub script: Option<TrajectoryScript>,
    pub motor: MotorSection,
    pub fingertip: FingertipSection,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Default for NodeConfig {
    fn default() -> Self {
        NodeConfig {
            node_id: "node".into(),
            broker: format!("127.0.0.1:{}", crate::proto::net::DEFAULT_BROKER_PORT),
            clock_skew_ns: 0,
            delay: DelayModel::default(),
            rates: Rates::default(),
            script: None,
            motor: MotorSection::default(),
            fingertip: FingertipSection::default(),
            base_dir: PathBuf::new(),
        }
    }
}

impl NodeConfig {
    pub fn from_toml(text: &str) -> Result<Self, NodeError> {
        let c: NodeConfig = toml::from_str(text).map_err(|e| NodeError::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, NodeError> {
        let text = std::fs::read_to_string(path).map_err(|source| NodeError::Io {
            path: path.into(),
            source,
        })?;
        let mut c = NodeConfig::from_toml(&text)?;
        c.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), NodeError> {
        let r = &self.rates;
        if ![r.pose_hz, r.image_hz, r.markers_hz].iter().all(|v| *v > 0.0 && v.is_finite()) {
            return Err(NodeError::Config("rates must be positive".into()));
        }
        self.delay.validate().map_err(|e| NodeError::Config(e.to_string()))?;
        self.motor.model.validate()?;
        if let Some(s) = &self.script {
            s.check_grip_range(self.motor.model.max_width())?;
        }
        self.fingertip.contact.validate()
    }

    pub fn link(&self) -> LinkConfig {
        LinkConfig {
            delay: self.delay,
            clock_skew: self.clock_skew_ns,
        }
    }

    pub fn phone(&self) -> Result<PhoneNode, NodeError> {
        let source = match &self.script {
            Some(s) => PoseSource::Script(s.clone()),
            None => PoseSource::Commanded {
                initial: Pose6D::identity(),
                from: None,
            },
        };
        PhoneNode::new(&self.node_id, source, self.rates.pose_hz, self.rates.image_hz)
    }

    pub fn motor(&self) -> Result<MotorNode, NodeError> {
        let m = &self.motor;
        let source = match (m.square_wave, &self.script) {
            (Some([low, high, hz]), _) => SetpointSource::Square { low, high, hz },
            (None, Some(s)) => SetpointSource::Script(s.clone()),
            (None, None) => SetpointSource::Commands,
        };
        let mut node = MotorNode::new(&self.node_id, m.model, m.initial_width, source)?
            .with_external_force(m.external_force.clone());
        if let Some(p) = &m.commands_from {
            node = node.commands_from(p);
        }
        Ok(node)
    }

    pub fn fingertip(&self) -> Result<FingertipNode, NodeError> {
        let f = &self.fingertip;
        let tip = f.device.fingertip()?;
        let estimator = EstimatorModel::load(&self.base_dir.join(&f.estimator))?;
        let mut node = FingertipNode::new(&self.node_id, f.side, tip, estimator, f.contact.clone(), self.rates.markers_hz)?
            .with_noise(f.noise_sigma, f.seed);
        if let Some(m) = &f.attach_motor {
            node = node.attached_to(m);
        }
        Ok(node)
    }
}
