//! k-nearest-neighbour behavioral cloning over aligned frames.

use std::collections::BinaryHeap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::episode::Episode;
use super::{AlignedFrame, SyncError};
use crate::pose::Pose6D;

/// position 3, quaternion vector part 3, grip width 1, force/torque L 6, R 6.
pub const OBS_DIM: usize = 19;

/// Reciprocal unit magnitudes per observation group.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScaleWeights {
    pub position: f64,
    pub orientation: f64,
    pub grip: f64,
    pub force: f64,
    pub torque: f64,
}

impl Default for ScaleWeights {
    fn default() -> Self {
        ScaleWeights {
            position: 1.0 / 0.01,
            orientation: 1.0 / 0.1,
            grip: 1.0 / 0.01,
            force: 1.0,
            torque: 1.0 / 0.05,
        }
    }
}

impl ScaleWeights {
    pub fn per_dim(&self) -> [f64; OBS_DIM] {
        let mut w = [0.0; OBS_DIM];
        w[..3].fill(self.position);
        w[3..6].fill(self.orientation);
        w[6] = self.grip;
        for side in [7, 13] {
            w[side..side + 3].fill(self.force);
            w[side + 3..side + 6].fill(self.torque);
        }
        w
    }

    fn validate(&self) -> Result<(), SyncError> {
        let all = [self.position, self.orientation, self.grip, self.force, self.torque];
        if all.iter().all(|v| v.is_finite() && *v > 0.0) {
            Ok(())
        } else {
            Err(SyncError::Config("scale weights must be positive".into()))
        }
    }
}

pub fn observation(f: &AlignedFrame) -> [f64; OBS_DIM] {
    let mut o = [0.0; OBS_DIM];
    let p = f.pose.position();
    let q = f.pose.quat_wxyz();
    o[..3].copy_from_slice(&[p.x, p.y, p.z]);
    o[3..6].copy_from_slice(&q[1..]);
    o[6] = f.grip.width;
    o[7..13].copy_from_slice(&f.wrench_l.to_array());
    o[13..19].copy_from_slice(&f.wrench_r.to_array());
    o
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Action {
    /// Pose change to apply on top of the current pose.
    pub delta: Pose6D,
    pub grip_setpoint: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyKNN {
    pub k: usize,
    pub scales: ScaleWeights,
    pub observations: Vec<[f64; OBS_DIM]>,
    pub actions: Vec<Action>,
}

#[derive(PartialEq)]
struct Cand(f64, usize);
impl Eq for Cand {}
impl PartialOrd for Cand {
    fn partial_cmp(&self, o: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(o))
    }
}
impl Ord for Cand {
    fn cmp(&self, o: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&o.0).then(self.1.cmp(&o.1))
    }
}

/// Builds the dataset `(obs_j, (pose_j⁻¹ ∘ pose_{j+1}, setpoint_{j+1}))`
/// from consecutive frames, dropping exact duplicate pairs.
pub fn train_bc(episodes: &[Episode], k: usize, scales: ScaleWeights) -> Result<PolicyKNN, SyncError> {
    if k == 0 {
        return Err(SyncError::Config("k must be at least 1".into()));
    }
    scales.validate()?;
    let mut observations: Vec<[f64; OBS_DIM]> = Vec::new();
    let mut actions: Vec<Action> = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for e in episodes {
        for w in e.frames.windows(2) {
            let obs = observation(&w[0]);
            let action = Action {
                delta: w[0].pose.delta_to(&w[1].pose),
                grip_setpoint: w[1].grip.setpoint,
            };
            if obs.iter().any(|v| !v.is_finite()) || !action.delta.is_finite() || !action.grip_setpoint.is_finite() {
                continue;
            }
            let mut key: Vec<u64> = obs.iter().map(|v| v.to_bits()).collect();
            let q = action.delta.quat_wxyz();
            let p = action.delta.position();
            key.extend([p.x, p.y, p.z, q[0], q[1], q[2], q[3], action.grip_setpoint].map(f64::to_bits));
            if seen.insert(key) {
                observations.push(obs);
                actions.push(action);
            }
        }
    }
    if observations.is_empty() {
        return Err(SyncError::InsufficientData("need at least one episode with two frames".into()));
    }
    Ok(PolicyKNN {
        k,
        scales,
        observations,
        actions,
    })
}

impl PolicyKNN {
    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn distance(&self, a: &[f64; OBS_DIM], b: &[f64; OBS_DIM]) -> f64 {
        let w = self.scales.per_dim();
        (0..OBS_DIM).map(|i| ((a[i] - b[i]) * w[i]).powi(2)).sum::<f64>().sqrt()
    }

    /// The k nearest stored observations as `(index, distance)`, closest
    /// first, ties broken by lower index.
    pub fn neighbors(&self, obs: &[f64; OBS_DIM]) -> Vec<(usize, f64)> {
        let k = self.k.min(self.len());
        let mut heap: BinaryHeap<Cand> = BinaryHeap::with_capacity(k + 1);
        for (i, o) in self.observations.iter().enumerate() {
            let c = Cand(self.distance(obs, o), i);
            if heap.len() < k {
                heap.push(c);
            } else if c < *heap.peek().expect("k >= 1") {
                heap.pop();
                heap.push(c);
            }
        }
        heap.into_sorted_vec().into_iter().map(|c| (c.1, c.0)).collect()
    }

    /// Inverse-distance vote over the neighbours. Exact matches, if any,
    /// take the whole vote with equal weight.
    pub fn act(&self, obs: &[f64; OBS_DIM]) -> Action {
        let nb = self.neighbors(obs);
        let exact: Vec<_> = nb.iter().filter(|(_, d)| *d == 0.0).collect();
        let voters: Vec<(usize, f64)> = if exact.is_empty() {
            nb.iter().map(|&(i, d)| (i, 1.0 / d)).collect()
        } else {
            exact.iter().map(|&&(i, _)| (i, 1.0)).collect()
        };
        let first = self.actions[voters[0].0];
        if voters.len() == 1 || voters.iter().all(|(i, _)| self.actions[*i] == first) {
            return first;
        }
        let mut acc = first.delta;
        let mut total = voters[0].1;
        let mut grip = first.grip_setpoint * voters[0].1;
        for &(i, w) in &voters[1..] {
            total += w;
            let a = self.actions[i];
            acc = acc.interpolate(&a.delta, w / total).expect("weight fraction in [0, 1]");
            grip += a.grip_setpoint * w;
        }
        Action {
            delta: acc,
            grip_setpoint: grip / total,
        }
    }

    pub fn act_frame(&self, f: &AlignedFrame) -> Action {
        self.act(&observation(f))
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, serde_json::to_vec(self).map_err(std::io::Error::other)?)
    }

    pub fn load(path: &Path) -> std::io::Result<PolicyKNN> {
        let p: PolicyKNN = serde_json::from_slice(&std::fs::read(path)?).map_err(std::io::Error::other)?;
        if p.k == 0 || p.observations.is_empty() || p.observations.len() != p.actions.len() {
            return Err(std::io::Error::other("policy file is empty or inconsistent"));
        }
        Ok(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sync::{episode::EpisodeHeader, FrameOffsets};
    use crate::types::{GripState, Timestamp, Wrench6D};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn frame(rng: &mut ChaCha8Rng, i: i64) -> AlignedFrame {
        let mut a = || rng.random_range(-0.05..0.05);
        AlignedFrame {
            t: Timestamp(i),
            pose: Pose6D::from_arrays([a(), a(), a()], [1.0, a(), a(), a()]).unwrap(),
            grip: GripState {
                width: 0.05 + a(),
                setpoint: 0.05 + a(),
                ..Default::default()
            },
            wrench_l: Wrench6D::from_array([a(), a(), a(), a(), a(), a()]),
            wrench_r: Wrench6D::from_array([a(), a(), a(), a(), a(), a()]),
            rgb: None,
            depth: None,
            dt: FrameOffsets::default(),
        }
    }

    fn episode(seed: u64, n: i64) -> Episode {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut e = Episode::new(EpisodeHeader::default());
        e.frames = (0..n).map(|i| frame(&mut rng, i)).collect();
        e
    }

    fn oracle(p: &PolicyKNN, q: &[f64; OBS_DIM]) -> Vec<usize> {
        let mut all: Vec<(f64, usize)> = p.observations.iter().enumerate().map(|(i, o)| (p.distance(q, o), i)).collect();
        all.sort_by(|a, b| a.partial_cmp(b).unwrap());
        all.into_iter().take(p.k).map(|x| x.1).collect()
    }

    #[test]
    fn training_query_returns_stored_action() {
        let e = episode(1, 30);
        let p = train_bc(std::slice::from_ref(&e), 1, ScaleWeights::default()).unwrap();
        for j in 0..29 {
            let a = p.act_frame(&e.frames[j]);
            assert_eq!(a.grip_setpoint, e.frames[j + 1].grip.setpoint);
            assert_eq!(a.delta, e.frames[j].pose.delta_to(&e.frames[j + 1].pose));
        }
    }

    #[test]
    fn neighbors_match_linear_scan() {
        let e = episode(2, 51);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for k in [1, 3, 7, 50, 80] {
            let p = train_bc(std::slice::from_ref(&e), k, ScaleWeights::default()).unwrap();
            for _ in 0..100 {
                let q = observation(&frame(&mut rng, 0));
                let got: Vec<usize> = p.neighbors(&q).into_iter().map(|x| x.0).collect();
                assert_eq!(got, oracle(&p, &q));
            }
        }
    }

    #[test]
    fn duplicated_episode_same_policy() {
        let e = episode(4, 20);
        let once = train_bc(std::slice::from_ref(&e), 3, ScaleWeights::default()).unwrap();
        let twice = train_bc(&[e.clone(), e], 3, ScaleWeights::default()).unwrap();
        assert_eq!(once, twice);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let q = observation(&frame(&mut rng, 0));
            assert_eq!(once.act(&q), twice.act(&q));
        }
    }

    #[test]
    fn vote_is_inverse_distance() {
        let mut p = PolicyKNN {
            k: 2,
            scales: ScaleWeights {
                position: 1.0,
                orientation: 1.0,
                grip: 1.0,
                force: 1.0,
                torque: 1.0,
            },
            observations: vec![[0.0; OBS_DIM], [0.0; OBS_DIM]],
            actions: vec![
                Action {
                    delta: Pose6D::from_translation(0.0, 0.0, 0.0),
                    grip_setpoint: 0.0,
                },
                Action {
                    delta: Pose6D::from_translation(3.0, 0.0, 0.0),
                    grip_setpoint: 3.0,
                },
            ],
        };
        p.observations[0][0] = 1.0;
        p.observations[1][0] = -2.0;
        // weights 1 and 1/2
        let a = p.act(&[0.0; OBS_DIM]);
        assert!((a.grip_setpoint - 1.0).abs() < 1e-12);
        assert!((a.delta.position().x - 1.0).abs() < 1e-12);
    }

    #[test]
    fn errors_and_file_round_trip() {
        assert!(train_bc(&[], 1, ScaleWeights::default()).is_err());
        assert!(train_bc(&[episode(1, 1)], 1, ScaleWeights::default()).is_err());
        assert!(train_bc(&[episode(1, 5)], 0, ScaleWeights::default()).is_err());
        let p = train_bc(&[episode(6, 10)], 2, ScaleWeights::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.json");
        p.save(&path).unwrap();
        assert_eq!(PolicyKNN::load(&path).unwrap(), p);
    }
}
