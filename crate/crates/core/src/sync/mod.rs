//! Multi-stream alignment, episode files, k-NN behavioral cloning and the
//! record/replay rig.

pub mod episode;
pub mod policy;
pub mod rig;

use std::collections::{BTreeMap, VecDeque};
use std::sync::Arc;

use thiserror::Error;

use crate::pose::Pose6D;
use crate::proto::codec::Topic;
use crate::proto::payload::Image;
use crate::types::{GripState, Timestamp, Wrench6D, NANOS_PER_MILLI};

pub use episode::{Episode, EpisodeError, EpisodeHeader, EpisodeWriter, Footer};
pub use policy::{train_bc, Action, PolicyKNN, ScaleWeights, OBS_DIM};
pub use rig::{
    discrepancy_log, execute_policy, pick_demo_scripts, pick_rig_config, replay_episode, run_rig, CommandSource,
    DiscrepancyReport, Pilot, RecorderNode, Rig, RigConfig, RigError, RigRun, SourceNames,
};

pub const DEFAULT_EPSILON_NS: i64 = 25 * NANOS_PER_MILLI;
pub const DEFAULT_CAPACITY: usize = 4096;

#[derive(Debug, Error, PartialEq)]
pub enum SyncError {
    #[error("sample at {ts} is older than the newest buffered sample {last}")]
    OutOfOrder { ts: Timestamp, last: Timestamp },
    #[error("alignment config: {0}")]
    Config(String),
    #[error("not enough data: {0}")]
    InsufficientData(String),
    #[error("episodes do not overlap in time")]
    NoOverlap,
}

/// Timestamped ring buffer for one topic. Timestamps are non-decreasing;
/// the oldest sample is evicted when full.
#[derive(Debug, Clone)]
pub struct StreamBuffer<T> {
    topic: Topic,
    capacity: usize,
    ts: VecDeque<Timestamp>,
    values: VecDeque<T>,
}

impl<T> StreamBuffer<T> {
    pub fn new(topic: Topic, capacity: usize) -> Self {
        StreamBuffer {
            topic,
            capacity: capacity.max(1),
            ts: VecDeque::new(),
            values: VecDeque::new(),
        }
    }

    pub fn topic(&self) -> Topic {
        self.topic
    }

    pub fn len(&self) -> usize {
        self.ts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ts.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn push(&mut self, ts: Timestamp, v: T) -> Result<(), SyncError> {
        if let Some(&last) = self.ts.back() {
            if ts < last {
                return Err(SyncError::OutOfOrder { ts, last });
            }
        }
        if self.ts.len() == self.capacity {
            self.ts.pop_front();
            self.values.pop_front();
        }
        self.ts.push_back(ts);
        self.values.push_back(v);
        Ok(())
    }

    pub fn timestamps(&self) -> &VecDeque<Timestamp> {
        &self.ts
    }

    pub fn get(&self, i: usize) -> Option<(Timestamp, &T)> {
        Some((*self.ts.get(i)?, self.values.get(i)?))
    }

    pub fn iter(&self) -> impl Iterator<Item = (Timestamp, &T)> {
        self.ts.iter().copied().zip(self.values.iter())
    }

    pub fn nearest(&self, t: Timestamp, eps: i64) -> Option<usize> {
        nearest_index(&self.ts, t, eps)
    }

    /// Latest sample at or before `t`.
    pub fn latest_at(&self, t: Timestamp) -> Option<usize> {
        self.ts.partition_point(|&x| x <= t).checked_sub(1)
    }
}

/// Index of the sample nearest to `t` within `eps` (inclusive). Ties go to
/// the earlier sample, and among equal timestamps to the first one.
pub fn nearest_index(ts: &VecDeque<Timestamp>, t: Timestamp, eps: i64) -> Option<usize> {
    let i = ts.partition_point(|&x| x < t);
    let right = (i < ts.len()).then(|| (i, ts[i].0.abs_diff(t.0)));
    let left = i.checked_sub(1).map(|j| {
        let v = ts[j];
        let first = ts.partition_point(|&x| x < v);
        (first, v.0.abs_diff(t.0))
    });
    let best = match (left, right) {
        (Some(l), Some(r)) => Some(if r.1 < l.1 { r } else { l }),
        (l, r) => l.or(r),
    }?;
    (best.1 <= eps as u64).then_some(best.0)
}

/// Index-level alignment: for each reference time, the chosen index in
/// every stream, or None when some stream has no sample within `eps`.
pub fn align_indices(reference: &[Timestamp], streams: &[VecDeque<Timestamp>], eps: i64) -> Vec<Option<Vec<usize>>> {
    reference
        .iter()
        .map(|&t| streams.iter().map(|s| nearest_index(s, t, eps)).collect())
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoseMode {
    #[default]
    Nearest,
    Interpolate,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlignConfig {
    pub reference: Topic,
    pub epsilon_ns: i64,
    pub pose_mode: PoseMode,
    /// Use the latest earlier image when none lies within ε.
    pub forward_fill_images: bool,
}

impl Default for AlignConfig {
    fn default() -> Self {
        AlignConfig {
            reference: Topic::POSE,
            epsilon_ns: DEFAULT_EPSILON_NS,
            pose_mode: PoseMode::Nearest,
            forward_fill_images: false,
        }
    }
}

pub const ALIGNED_TOPICS: [Topic; 6] = [
    Topic::POSE,
    Topic::GRIP_STATE,
    Topic::WRENCH_L,
    Topic::WRENCH_R,
    Topic::RGB,
    Topic::DEPTH,
];

impl AlignConfig {
    pub fn validate(&self) -> Result<(), SyncError> {
        if !ALIGNED_TOPICS.contains(&self.reference) {
            return Err(SyncError::Config(format!("{} cannot be the reference topic", self.reference)));
        }
        if self.epsilon_ns <= 0 {
            return Err(SyncError::Config("epsilon must be positive".into()));
        }
        Ok(())
    }
}

/// Signed offsets `sample − reference`, ns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct FrameOffsets {
    pub pose: i64,
    pub grip: i64,
    pub wrench_l: i64,
    pub wrench_r: i64,
    pub rgb: Option<i64>,
    pub depth: Option<i64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignedFrame {
    pub t: Timestamp,
    pub pose: Pose6D,
    pub grip: GripState,
    pub wrench_l: Wrench6D,
    pub wrench_r: Wrench6D,
    pub rgb: Option<Arc<Image>>,
    pub depth: Option<Arc<Image>>,
    pub dt: FrameOffsets,
}

/// One buffer per aligned topic.
#[derive(Debug, Clone)]
pub struct Streams {
    pub pose: StreamBuffer<Pose6D>,
    pub grip: StreamBuffer<GripState>,
    pub wrench_l: StreamBuffer<Wrench6D>,
    pub wrench_r: StreamBuffer<Wrench6D>,
    pub rgb: StreamBuffer<Arc<Image>>,
    pub depth: StreamBuffer<Arc<Image>>,
}

impl Streams {
    pub fn new(capacity: usize) -> Self {
        Streams {
            pose: StreamBuffer::new(Topic::POSE, capacity),
            grip: StreamBuffer::new(Topic::GRIP_STATE, capacity),
            wrench_l: StreamBuffer::new(Topic::WRENCH_L, capacity),
            wrench_r: StreamBuffer::new(Topic::WRENCH_R, capacity),
            rgb: StreamBuffer::new(Topic::RGB, capacity),
            depth: StreamBuffer::new(Topic::DEPTH, capacity),
        }
    }

    pub fn timestamps(&self, topic: Topic) -> Option<&VecDeque<Timestamp>> {
        Some(match topic {
            Topic::POSE => self.pose.timestamps(),
            Topic::GRIP_STATE => self.grip.timestamps(),
            Topic::WRENCH_L => self.wrench_l.timestamps(),
            Topic::WRENCH_R => self.wrench_r.timestamps(),
            Topic::RGB => self.rgb.timestamps(),
            Topic::DEPTH => self.depth.timestamps(),
            _ => return None,
        })
    }
}

/// Frames produced plus frames dropped, per missing topic. A frame missing
/// several topics counts once under each.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct AlignStats {
    pub frames: u64,
    pub dropped: u64,
    pub missing: BTreeMap<Topic, u64>,
}

fn pick<T: Clone>(b: &StreamBuffer<T>, t: Timestamp, eps: i64, missing: &mut Vec<Topic>) -> Option<(T, i64)> {
    match b.nearest(t, eps) {
        Some(i) => {
            let (ts, v) = b.get(i).expect("index from search");
            Some((v.clone(), ts.0 - t.0))
        }
        None => {
            missing.push(b.topic());
            None
        }
    }
}

fn pick_pose(b: &StreamBuffer<Pose6D>, t: Timestamp, cfg: &AlignConfig, missing: &mut Vec<Topic>) -> Option<(Pose6D, i64)> {
    if cfg.pose_mode == PoseMode::Interpolate {
        let hi = b.timestamps().partition_point(|&x| x < t);
        if let (Some(lo), true) = (hi.checked_sub(1), hi < b.len()) {
            let (t0, p0) = b.get(lo).expect("bracket");
            let (t1, p1) = b.get(hi).expect("bracket");
            if t.0 - t0.0 <= cfg.epsilon_ns && t1.0 - t.0 <= cfg.epsilon_ns {
                if t1 == t {
                    return Some((*p1, 0));
                }
                let u = (t.0 - t0.0) as f64 / (t1.0 - t0.0) as f64;
                return Some((p0.interpolate(p1, u).expect("fraction in [0, 1]"), 0));
            }
        }
    }
    pick(b, t, cfg.epsilon_ns, missing)
}

fn pick_image(
    b: &StreamBuffer<Arc<Image>>,
    t: Timestamp,
    cfg: &AlignConfig,
) -> (Option<Arc<Image>>, Option<i64>) {
    let idx = b
        .nearest(t, cfg.epsilon_ns)
        .or_else(|| if cfg.forward_fill_images { b.latest_at(t) } else { None });
    match idx.and_then(|i| b.get(i)) {
        Some((ts, img)) => (Some(img.clone()), Some(ts.0 - t.0)),
        None => (None, None),
    }
}

/// Builds the frame at reference time `t`, or returns the missing topics.
pub fn frame_at(s: &Streams, t: Timestamp, cfg: &AlignConfig) -> Result<AlignedFrame, Vec<Topic>> {
    let mut missing = Vec::new();
    let pose = pick_pose(&s.pose, t, cfg, &mut missing);
    let grip = pick(&s.grip, t, cfg.epsilon_ns, &mut missing);
    let wl = pick(&s.wrench_l, t, cfg.epsilon_ns, &mut missing);
    let wr = pick(&s.wrench_r, t, cfg.epsilon_ns, &mut missing);
    let (Some(pose), Some(grip), Some(wl), Some(wr)) = (pose, grip, wl, wr) else {
        return Err(missing);
    };
    let (rgb, drgb) = pick_image(&s.rgb, t, cfg);
    let (depth, ddepth) = pick_image(&s.depth, t, cfg);
    Ok(AlignedFrame {
        t,
        pose: pose.0,
        grip: grip.0,
        wrench_l: wl.0,
        wrench_r: wr.0,
        rgb,
        depth,
        dt: FrameOffsets {
            pose: pose.1,
            grip: grip.1,
            wrench_l: wl.1,
            wrench_r: wr.1,
            rgb: drgb,
            depth: ddepth,
        },
    })
}

/// Batch alignment over fully buffered streams: one frame per reference
/// sample, incomplete frames dropped and counted.
pub fn align(s: &Streams, cfg: &AlignConfig) -> Result<(Vec<AlignedFrame>, AlignStats), SyncError> {
    cfg.validate()?;
    let reference: Vec<Timestamp> = s.timestamps(cfg.reference).expect("validated").iter().copied().collect();
    let mut stats = AlignStats::default();
    let mut out = Vec::with_capacity(reference.len());
    for t in reference {
        match frame_at(s, t, cfg) {
            Ok(f) => {
                stats.frames += 1;
                out.push(f);
            }
            Err(missing) => {
                stats.dropped += 1;
                for m in missing {
                    *stats.missing.entry(m).or_default() += 1;
                }
            }
        }
    }
    Ok((out, stats))
}

/// Incremental aligner: samples arrive in any interleaving across topics;
/// a reference sample is resolved once `now ≥ ts + ε + allowance`, the
/// allowance covering delivery latency of the other streams.
#[derive(Debug, Clone)]
pub struct Aligner {
    cfg: AlignConfig,
    allowance_ns: i64,
    streams: Streams,
    pending: VecDeque<Timestamp>,
    stats: AlignStats,
}

impl Aligner {
    pub fn new(cfg: AlignConfig, allowance_ns: i64, capacity: usize) -> Result<Self, SyncError> {
        cfg.validate()?;
        if allowance_ns < 0 {
            return Err(SyncError::Config("allowance must be non-negative".into()));
        }
        Ok(Aligner {
            cfg,
            allowance_ns,
            streams: Streams::new(capacity),
            pending: VecDeque::new(),
            stats: AlignStats::default(),
        })
    }

    pub fn config(&self) -> &AlignConfig {
        &self.cfg
    }

    pub fn streams(&self) -> &Streams {
        &self.streams
    }

    pub fn stats(&self) -> &AlignStats {
        &self.stats
    }

    pub fn pending(&self) -> usize {
        self.pending.len()
    }

    fn note(&mut self, topic: Topic, ts: Timestamp) {
        if topic == self.cfg.reference {
            self.pending.push_back(ts);
        }
    }

    pub fn push_pose(&mut self, ts: Timestamp, p: Pose6D) -> Result<(), SyncError> {
        self.streams.pose.push(ts, p)?;
        self.note(Topic::POSE, ts);
        Ok(())
    }

    pub fn push_grip(&mut self, ts: Timestamp, g: GripState) -> Result<(), SyncError> {
        self.streams.grip.push(ts, g)?;
        self.note(Topic::GRIP_STATE, ts);
        Ok(())
    }

    pub fn push_wrench(&mut self, topic: Topic, ts: Timestamp, w: Wrench6D) -> Result<(), SyncError> {
        match topic {
            Topic::WRENCH_L => self.streams.wrench_l.push(ts, w)?,
            Topic::WRENCH_R => self.streams.wrench_r.push(ts, w)?,
            other => return Err(SyncError::Config(format!("{other} is not a wrench topic"))),
        }
        self.note(topic, ts);
        Ok(())
    }

    pub fn push_image(&mut self, topic: Topic, ts: Timestamp, img: Arc<Image>) -> Result<(), SyncError> {
        match topic {
            Topic::RGB => self.streams.rgb.push(ts, img)?,
            Topic::DEPTH => self.streams.depth.push(ts, img)?,
            other => return Err(SyncError::Config(format!("{other} is not an image topic"))),
        }
        self.note(topic, ts);
        Ok(())
    }

    /// Resolves every reference sample that is old enough at `now`.
    pub fn poll(&mut self, now: Timestamp) -> Vec<AlignedFrame> {
        let mut out = Vec::new();
        while let Some(&t) = self.pending.front() {
            if t.0.saturating_add(self.cfg.epsilon_ns + self.allowance_ns) > now.0 {
                break;
            }
            self.pending.pop_front();
            self.resolve(t, &mut out);
        }
        out
    }

    /// Resolves everything still pending regardless of time.
    pub fn flush(&mut self) -> Vec<AlignedFrame> {
        let mut out = Vec::new();
        while let Some(t) = self.pending.pop_front() {
            self.resolve(t, &mut out);
        }
        out
    }

    fn resolve(&mut self, t: Timestamp, out: &mut Vec<AlignedFrame>) {
        match frame_at(&self.streams, t, &self.cfg) {
            Ok(f) => {
                self.stats.frames += 1;
                out.push(f);
            }
            Err(missing) => {
                self.stats.dropped += 1;
                for m in missing {
                    *self.stats.missing.entry(m).or_default() += 1;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const MS: i64 = NANOS_PER_MILLI;

    fn dq(v: &[i64]) -> VecDeque<Timestamp> {
        v.iter().map(|&x| Timestamp(x)).collect()
    }

    /// Exhaustive scan: minimal (|Δ|, ts, index) within ε.
    fn oracle(ts: &VecDeque<Timestamp>, t: Timestamp, eps: i64) -> Option<usize> {
        ts.iter()
            .enumerate()
            .filter(|(_, x)| x.0.abs_diff(t.0) <= eps as u64)
            .min_by_key(|(i, x)| (x.0.abs_diff(t.0), x.0, *i))
            .map(|(i, _)| i)
    }

    fn filled(pose: &[i64], grip: &[i64], wl: &[i64], wr: &[i64]) -> Streams {
        let mut s = Streams::new(1024);
        for &t in pose {
            s.pose.push(Timestamp(t), Pose6D::from_translation(t as f64, 0.0, 0.0)).unwrap();
        }
        for &t in grip {
            s.grip.push(Timestamp(t), GripState::at_rest(t as f64)).unwrap();
        }
        for &t in wl {
            s.wrench_l.push(Timestamp(t), Wrench6D::ZERO).unwrap();
        }
        for &t in wr {
            s.wrench_r.push(Timestamp(t), Wrench6D::ZERO).unwrap();
        }
        s
    }

    #[test]
    fn example_pairs() {
        let s = dq(&[1, 9, 22]);
        let got: Vec<_> = [0, 10, 20].iter().map(|&t| nearest_index(&s, Timestamp(t), 3)).collect();
        assert_eq!(got, vec![Some(0), Some(1), Some(2)]);
        let s = dq(&[1, 9]);
        assert_eq!(nearest_index(&s, Timestamp(20), 3), None);
    }

    #[test]
    fn ties_prefer_earlier() {
        assert_eq!(nearest_index(&dq(&[8, 12]), Timestamp(10), 5), Some(0));
        assert_eq!(nearest_index(&dq(&[8, 8, 12]), Timestamp(10), 5), Some(0));
        assert_eq!(nearest_index(&dq(&[10, 10, 10]), Timestamp(10), 5), Some(0));
        assert_eq!(nearest_index(&dq(&[7, 13]), Timestamp(10), 3), Some(0));
        assert_eq!(nearest_index(&dq(&[7, 13]), Timestamp(10), 2), None);
    }

    #[test]
    fn batch_drops_and_counts() {
        let s = filled(&[0, 10, 20], &[1, 9], &[0, 10, 20], &[0, 10, 20]);
        let cfg = AlignConfig {
            epsilon_ns: 3,
            ..Default::default()
        };
        let (frames, stats) = align(&s, &cfg).unwrap();
        assert_eq!(frames.len(), 2);
        assert_eq!(stats.dropped, 1);
        assert_eq!(stats.missing[&Topic::GRIP_STATE], 1);
        assert_eq!(frames[0].dt.grip, 1);
        assert_eq!(frames[1].dt.grip, -1);
        assert_eq!(frames[1].grip.width, 9.0);
        for f in &frames {
            assert!(f.dt.pose.abs() <= 3 && f.dt.grip.abs() <= 3);
        }
    }

    #[test]
    fn identical_timestamps_zero_offsets() {
        let t = [0, 5 * MS, 10 * MS];
        let s = filled(&t, &t, &t, &t);
        let (frames, _) = align(&s, &AlignConfig::default()).unwrap();
        assert_eq!(frames.len(), 3);
        assert!(frames.iter().all(|f| f.dt == FrameOffsets::default()));
    }

    #[test]
    fn interpolated_pose() {
        let s = filled(&[0, 10], &[4], &[4], &[4]);
        let cfg = AlignConfig {
            reference: Topic::GRIP_STATE,
            epsilon_ns: 10,
            pose_mode: PoseMode::Interpolate,
            ..Default::default()
        };
        let (frames, _) = align(&s, &cfg).unwrap();
        assert!((frames[0].pose.position().x - 4.0).abs() < 1e-12);
        let nearest = AlignConfig {
            pose_mode: PoseMode::Nearest,
            ..cfg
        };
        assert_eq!(align(&s, &nearest).unwrap().0[0].pose.position().x, 0.0);
    }

    #[test]
    fn bad_reference_rejected() {
        let s = Streams::new(4);
        let cfg = AlignConfig {
            reference: Topic::CLOCK,
            ..Default::default()
        };
        assert!(matches!(align(&s, &cfg), Err(SyncError::Config(_))));
    }

    #[test]
    fn ring_buffer_rules() {
        let mut b = StreamBuffer::new(Topic::POSE, 2);
        b.push(Timestamp(1), ()).unwrap();
        b.push(Timestamp(1), ()).unwrap();
        b.push(Timestamp(3), ()).unwrap();
        assert_eq!(b.len(), 2);
        assert_eq!(b.timestamps(), &dq(&[1, 3]));
        assert!(matches!(b.push(Timestamp(2), ()), Err(SyncError::OutOfOrder { .. })));
    }

    #[test]
    fn image_forward_fill() {
        let mut s = filled(&[0, 100], &[0, 100], &[0, 100], &[0, 100]);
        s.rgb.push(Timestamp(0), Arc::new(crate::nodes::rgb_frame(0))).unwrap();
        let mut cfg = AlignConfig {
            epsilon_ns: 5,
            ..Default::default()
        };
        let (f, _) = align(&s, &cfg).unwrap();
        assert!(f[1].rgb.is_none());
        cfg.forward_fill_images = true;
        let (f, _) = align(&s, &cfg).unwrap();
        assert_eq!(f[1].dt.rgb, Some(-100));
    }

    #[test]
    fn streaming_matches_batch() {
        let pose: Vec<i64> = (0..50).map(|i| i * 20 * MS).collect();
        let grip: Vec<i64> = (0..200).map(|i| i * 5 * MS + 3 * MS).collect();
        let wl: Vec<i64> = (0..70).map(|i| i * 14 * MS).collect();
        let wr: Vec<i64> = (0..70).map(|i| i * 14 * MS + MS).collect();
        let batch = align(&filled(&pose, &grip, &wl, &wr), &AlignConfig::default()).unwrap();

        let mut a = Aligner::new(AlignConfig::default(), 10 * MS, 1024).unwrap();
        let mut out = Vec::new();
        let mut events: Vec<(i64, u8)> = pose.iter().map(|&t| (t, 0)).collect();
        events.extend(grip.iter().map(|&t| (t, 1)));
        events.extend(wl.iter().map(|&t| (t, 2)));
        events.extend(wr.iter().map(|&t| (t, 3)));
        events.sort();
        for (t, k) in events {
            let ts = Timestamp(t);
            match k {
                0 => a.push_pose(ts, Pose6D::from_translation(t as f64, 0.0, 0.0)).unwrap(),
                1 => a.push_grip(ts, GripState::at_rest(t as f64)).unwrap(),
                2 => a.push_wrench(Topic::WRENCH_L, ts, Wrench6D::ZERO).unwrap(),
                _ => a.push_wrench(Topic::WRENCH_R, ts, Wrench6D::ZERO).unwrap(),
            }
            out.extend(a.poll(ts));
        }
        out.extend(a.flush());
        assert_eq!(out, batch.0);
        assert_eq!(a.stats(), &batch.1);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(512))]
        #[test]
        fn nearest_equals_oracle(mut ts in prop::collection::vec(0i64..60, 0..25), t in -5i64..65, eps in 0i64..12) {
            ts.sort();
            let d = dq(&ts);
            prop_assert_eq!(nearest_index(&d, Timestamp(t), eps), oracle(&d, Timestamp(t), eps));
        }
    }
}
