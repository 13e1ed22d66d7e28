//! Acceptance suite. Runs as a plain binary so every check prints a
//! PASS/FAIL line even when the run succeeds.

use std::sync::Arc;
use std::time::Instant;

use nalgebra::{DMatrix, DVector, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use clawlink::lattice::{build_grid_lattice, EquilibriumSolver, FingertipConfig, LatticeModel};
use clawlink::nodes::{
    ContactScript, FingertipNode, MotorModel, MotorNode, PhoneNode, PoseSource, SetpointSource, Side, TrajectoryScript,
    Waypoint,
};
use clawlink::proto::clock::{clock_offset, ClockSample};
use clawlink::proto::codec::{Message, Topic};
use clawlink::proto::control::ControlMessage;
use clawlink::proto::payload::{ClockPayload, GripCommand, HapticFeedback, Image, ImageFormat, Payload, TeleopCommand};
use clawlink::sim::{DelayModel, LinkConfig, Tap, World};
use clawlink::sync::rig::{pick_demo_scripts, pick_rig_config};
use clawlink::sync::{
    align, discrepancy_log, execute_policy, replay_episode, run_rig, train_bc, AlignConfig, CommandSource, Episode,
    RigConfig, ScaleWeights, Streams, OBS_DIM,
};
use clawlink::teleop::{latency_report, Coordinator, Endpoints, TeleopConfig};
use clawlink::types::{GripState, Timestamp, Wrench6D};
use clawlink::wrench::{calibrate, calibration_schedule, generate_calibration, random_wrench, LoadScale};
use clawlink::Pose6D;

const MS: i64 = 1_000_000;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn wrench_noiseless() -> Outcome {
    let start = Instant::now();
    let tip = FingertipConfig::default().fingertip().map_err(|e| e.to_string())?;
    let cs = generate_calibration(&tip, &calibration_schedule(200, LoadScale::default(), 11), 0.0, 0)
        .map_err(|e| e.to_string())?;
    let model = calibrate(&cs, 0.0).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let w = random_wrench(&mut rng, LoadScale::default());
        let est = model
            .estimate(&tip.observe(&w, Timestamp::ZERO).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
        for (e, t) in est.to_array().iter().zip(w.to_array()) {
            worst = worst.max((e - t).abs() / t.abs());
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(worst < 1e-6 && secs < 30.0, format!("worst per-axis relative error {worst:.2e}, {secs:.1} s"))
}

fn wrench_noisy() -> Outcome {
    let tip = FingertipConfig::default().fingertip().map_err(|e| e.to_string())?;
    let cs = generate_calibration(&tip, &calibration_schedule(200, LoadScale::default(), 21), 0.0, 0)
        .map_err(|e| e.to_string())?;
    let model = calibrate(&cs, 0.0).map_err(|e| e.to_string())?;
    let sigma = 0.5;
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let mut sq = [0.0; 6];
    for _ in 0..100 {
        let w = random_wrench(&mut rng, LoadScale::default());
        let obs = tip.observe_noisy(&w, Timestamp::ZERO, sigma, &mut rng).map_err(|e| e.to_string())?;
        let est = model.estimate(&obs).map_err(|e| e.to_string())?.to_array();
        for a in 0..6 {
            sq[a] += (est[a] - w.to_array()[a]).powi(2);
        }
    }
    let rmse = sq.map(|s| (s / 100.0).sqrt());
    let fixed = Wrench6D::from_array([0.8, -0.5, 1.2, 0.005, -0.008, 0.003]);
    let n = 500;
    let mut samples = vec![[0.0; 6]; n];
    for s in samples.iter_mut() {
        let obs = tip.observe_noisy(&fixed, Timestamp::ZERO, sigma, &mut rng).map_err(|e| e.to_string())?;
        *s = model.estimate(&obs).map_err(|e| e.to_string())?.to_array();
    }
    let mut ok = rmse.iter().all(|r| r.is_finite());
    let mut worst_ratio = 0.0f64;
    for a in 0..6 {
        let mean = samples.iter().map(|s| s[a]).sum::<f64>() / n as f64;
        let var = samples.iter().map(|s| (s[a] - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let sem = (var / n as f64).sqrt();
        let ratio = (mean - fixed.to_array()[a]).abs() / sem;
        worst_ratio = worst_ratio.max(ratio);
        ok &= ratio < 3.0;
    }
    check(
        ok,
        format!(
            "rmse F [{:.3e} {:.3e} {:.3e}] N, T [{:.3e} {:.3e} {:.3e}] N·m; worst |bias|/sem {worst_ratio:.2}",
            rmse[0], rmse[1], rmse[2], rmse[3], rmse[4], rmse[5]
        ),
    )
}

fn protocol() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut buf = Vec::new();
    for i in 0..1_000_000u32 {
        let len = rng.random_range(0..48);
        let payload: Vec<u8> = (0..len).map(|_| rng.random()).collect();
        let m = Message::new(Topic(rng.random_range(0..20)), rng.random(), Timestamp(rng.random()), payload);
        buf.clear();
        m.encode_into(&mut buf).map_err(|e| e.to_string())?;
        let back = Message::decode(&buf).map_err(|e| format!("round-trip {i}: {e}"))?;
        if back != m {
            return Err(format!("round-trip {i} differs"));
        }
    }
    let mut valid = 0u64;
    let mut template = Vec::new();
    Message::new(Topic::POSE, 7, Timestamp(1), Pose6D::identity().to_payload())
        .encode_into(&mut template)
        .map_err(|e| e.to_string())?;
    let outcome = std::panic::catch_unwind(move || {
        for i in 0..1_000_000u32 {
            let bytes: Vec<u8> = if i % 2 == 0 {
                let len = rng.random_range(0..64);
                (0..len).map(|_| rng.random()).collect()
            } else {
                let mut b = template.clone();
                for _ in 0..rng.random_range(1..4) {
                    let k = rng.random_range(0..b.len());
                    b[k] = rng.random();
                }
                b.truncate(rng.random_range(0..=b.len()));
                b
            };
            if let Ok((m, used)) = Message::decode_prefix(&bytes) {
                valid += 1;
                assert_eq!(m.encode().unwrap(), bytes[..used]);
                // payload decoders must be total as well
                let _ = Pose6D::from_payload(&m.payload);
                let _ = HapticFeedback::from_payload(&m.payload);
                let _ = TeleopCommand::from_payload(&m.payload);
                let _ = GripCommand::from_payload(&m.payload);
                let _ = ClockPayload::from_payload(&m.payload);
                let _ = Image::from_payload(&m.payload);
                let _ = ControlMessage::decode(&m.payload);
            }
        }
        valid
    });
    let secs = start.elapsed().as_secs_f64();
    match outcome {
        Ok(valid) => check(
            secs < 60.0,
            format!("1e6 round-trips identical, 1e6 fuzz cases typed ({valid} decoded), {secs:.1} s"),
        ),
        Err(_) => Err("decoder panicked on fuzz input".into()),
    }
}

fn clock_sync() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    // symmetric: exact, through the virtual world as well as the formula
    for skew in [-250 * MS, -3, 0, 17, 123_456_789] {
        let mut w = World::new(64);
        w.enable_clock_sync(100 * MS);
        let slot = w
            .add_node(
                Box::new(Tap::new("n", &[])),
                LinkConfig {
                    delay: DelayModel::fixed(rng.random_range(0.0..30.0)),
                    clock_skew: skew,
                },
            )
            .map_err(|e| e.to_string())?;
        w.run_until(Timestamp(500 * MS)).map_err(|e| e.to_string())?;
        let est = w.broker().clock_estimate(w.client_of(slot)).ok_or("no estimate")?;
        if est.offset != skew {
            return Err(format!("skew {skew}: estimated {}", est.offset));
        }
    }
    let mut worst = 0.0f64;
    for a_ms in 1..=50i64 {
        for _ in 0..200 {
            let offset = rng.random_range(-1_000_000_000i64..1_000_000_000);
            let base = rng.random_range(0..40 * MS);
            let a = a_ms * MS;
            let (down, up) = if rng.random() { (base + a, base) } else { (base, base + a) };
            let t0 = rng.random_range(0..1_000_000_000_000i64);
            let t1 = t0 + down + offset;
            let t2 = t1 + rng.random_range(0..5 * MS);
            let t3 = t2 - offset + up;
            let s = ClockSample {
                t0: Timestamp(t0),
                t1: Timestamp(t1),
                t2: Timestamp(t2),
                t3: Timestamp(t3),
            };
            let est = clock_offset(&s).map_err(|e| e.to_string())?;
            let err = (est.offset - offset).abs();
            if err > a / 2 {
                return Err(format!("asymmetry {a_ms} ms: error {err} ns"));
            }
            worst = worst.max(err as f64 / (a / 2) as f64);
        }
        let sym = ClockSample {
            t0: Timestamp(0),
            t1: Timestamp(a_ms * MS + 5),
            t2: Timestamp(a_ms * MS + 5),
            t3: Timestamp(2 * a_ms * MS),
        };
        if clock_offset(&sym).map_err(|e| e.to_string())?.offset != 5 {
            return Err("symmetric formula case".into());
        }
    }
    check(true, format!("symmetric skews exact; worst |error|/(a/2) = {worst:.3}"))
}

/// Oracle: full scan, strictly-smaller distance wins so ties keep the
/// earlier sample.
fn oracle_pick(ts: &[i64], t: i64, eps: i64) -> Option<usize> {
    let mut best: Option<(usize, i64)> = None;
    for (j, &s) in ts.iter().enumerate() {
        let d = (s - t).abs();
        if d <= eps && best.is_none_or(|(_, bd)| d < bd) {
            best = Some((j, d));
        }
    }
    best.map(|b| b.0)
}

fn aligner() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    let mut frames_total = 0;
    for case in 0..10_000 {
        let gen = |rng: &mut ChaCha8Rng| {
            let n = rng.random_range(0..12);
            let mut v: Vec<i64> = (0..n).map(|_| rng.random_range(0..60)).collect();
            v.sort();
            v
        };
        let topics: Vec<Vec<i64>> = (0..5).map(|_| gen(&mut rng)).collect();
        let eps = rng.random_range(1..8);
        let mut s = Streams::new(64);
        for (i, &t) in topics[0].iter().enumerate() {
            s.pose.push(Timestamp(t), Pose6D::from_translation(i as f64, 0.0, 0.0)).unwrap();
        }
        for (i, &t) in topics[1].iter().enumerate() {
            s.grip.push(Timestamp(t), GripState::at_rest(i as f64)).unwrap();
        }
        for (i, &t) in topics[2].iter().enumerate() {
            s.wrench_l.push(Timestamp(t), Wrench6D::from_array([i as f64, 0.0, 0.0, 0.0, 0.0, 0.0])).unwrap();
        }
        for (i, &t) in topics[3].iter().enumerate() {
            s.wrench_r.push(Timestamp(t), Wrench6D::from_array([i as f64, 0.0, 0.0, 0.0, 0.0, 0.0])).unwrap();
        }
        for (i, &t) in topics[4].iter().enumerate() {
            let img = Image {
                width: 1,
                height: 1,
                format: ImageFormat::Rgb8,
                data: vec![i as u8, 0, 0],
            };
            s.rgb.push(Timestamp(t), Arc::new(img)).unwrap();
        }
        let cfg = AlignConfig {
            epsilon_ns: eps,
            ..Default::default()
        };
        let (frames, stats) = align(&s, &cfg).map_err(|e| e.to_string())?;
        let mut expected = Vec::new();
        let mut dropped = 0;
        for &t in &topics[0] {
            let picks: Vec<Option<usize>> = topics.iter().map(|ts| oracle_pick(ts, t, eps)).collect();
            if picks[..4].iter().any(Option::is_none) {
                dropped += 1;
                continue;
            }
            expected.push((t, picks));
        }
        if frames.len() != expected.len() || stats.dropped != dropped {
            return Err(format!("case {case}: {} frames vs oracle {}", frames.len(), expected.len()));
        }
        for (f, (t, picks)) in frames.iter().zip(&expected) {
            let got = [
                Some(f.pose.position().x as usize),
                Some(f.grip.width as usize),
                Some(f.wrench_l.force.x as usize),
                Some(f.wrench_r.force.x as usize),
                f.rgb.as_ref().map(|i| i.data[0] as usize),
            ];
            if f.t.0 != *t || got.as_slice() != picks.as_slice() {
                return Err(format!("case {case}: frame at {t}: {got:?} vs oracle {picks:?}"));
            }
            let within = [Some(f.dt.pose), Some(f.dt.grip), Some(f.dt.wrench_l), Some(f.dt.wrench_r), f.dt.rgb];
            if within.iter().flatten().any(|d| d.abs() > eps) {
                return Err(format!("case {case}: |dt| above epsilon"));
            }
        }
        frames_total += frames.len();
    }
    check(true, format!("1e4 random multisets, {frames_total} frames equal to the oracle"))
}

fn random_lattice(rng: &mut ChaCha8Rng) -> LatticeModel {
    let (nx, ny, nz) = (rng.random_range(2..=3), rng.random_range(2..=3), rng.random_range(2..=3));
    let mut m = build_grid_lattice(nx, ny, nz, rng.random_range(0.003..0.008), 500.0)
        .expect("grid")
        .with_max_strain(f64::INFINITY);
    for e in m.edges.iter_mut() {
        e.stiffness = rng.random_range(100.0..2000.0);
    }
    m
}

/// Independent assembly and conjugate-gradient minimisation of
/// `½ uᵀK u − fᵀu` over the free DOFs.
fn energy_minimiser(m: &LatticeModel, f: &DVector<f64>) -> DVector<f64> {
    let n = m.nodes.len();
    let mut k = DMatrix::<f64>::zeros(3 * n, 3 * n);
    for e in &m.edges {
        let d = m.nodes[e.j] - m.nodes[e.i];
        let d = d / d.norm();
        for r in 0..3 {
            for c in 0..3 {
                let v = e.stiffness * d[r] * d[c];
                k[(3 * e.i + r, 3 * e.i + c)] += v;
                k[(3 * e.j + r, 3 * e.j + c)] += v;
                k[(3 * e.i + r, 3 * e.j + c)] -= v;
                k[(3 * e.j + r, 3 * e.i + c)] -= v;
            }
        }
    }
    let free: Vec<usize> = (0..n)
        .filter(|i| !m.fixed.contains(i))
        .flat_map(|i| [3 * i, 3 * i + 1, 3 * i + 2])
        .collect();
    let kf = DMatrix::from_fn(free.len(), free.len(), |r, c| k[(free[r], free[c])]);
    let b = DVector::from_iterator(free.len(), free.iter().map(|&i| f[i]));
    let mut x = DVector::zeros(free.len());
    let mut r = b.clone();
    let mut p = r.clone();
    let mut rr = r.dot(&r);
    for _ in 0..20 * free.len() {
        if rr.sqrt() <= 1e-15 * b.norm() {
            break;
        }
        let kp = &kf * &p;
        let alpha = rr / p.dot(&kp);
        x += alpha * &p;
        r -= alpha * &kp;
        let next = r.dot(&r);
        p = &r + (next / rr) * &p;
        rr = next;
    }
    let mut u = DVector::zeros(3 * n);
    for (k, &i) in free.iter().enumerate() {
        u[i] = x[k];
    }
    u
}

fn equilibrium() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(61);
    let (mut worst, mut worst_lin, mut worst_rec) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..100 {
        let m = random_lattice(&mut rng);
        let n = m.nodes.len();
        let solver = EquilibriumSolver::new(m.clone()).map_err(|e| e.to_string())?;
        let load = |rng: &mut ChaCha8Rng| DVector::from_fn(3 * n, |_, _| rng.random_range(-1.0..1.0));
        let (f1, f2) = (load(&mut rng), load(&mut rng));
        let solve = |f: &DVector<f64>| solver.solve_forces(f).map(|d| d.to_flat()).map_err(|e| e.to_string());
        let (u1, u2) = (solve(&f1)?, solve(&f2)?);
        let oracle = energy_minimiser(&m, &f1);
        worst = worst.max((&u1 - &oracle).amax() / oracle.amax());
        let (a, b) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
        let u12 = solve(&(a * &f1 + b * &f2))?;
        let lin = a * &u1 + b * &u2;
        worst_lin = worst_lin.max((&u12 - &lin).amax() / lin.amax());
        // loads on fixed nodes are reactions; compare work on free DOFs only
        let mask = |f: &DVector<f64>| {
            DVector::from_fn(3 * n, |i, _| if m.fixed.contains(&(i / 3)) { 0.0 } else { f[i] })
        };
        let (w12, w21) = (mask(&f1).dot(&u2), mask(&f2).dot(&u1));
        worst_rec = worst_rec.max((w12 - w21).abs() / w12.abs().max(w21.abs()));
    }
    check(
        worst < 1e-8 && worst_lin < 1e-9 && worst_rec < 1e-9,
        format!("oracle {worst:.1e}, linearity {worst_lin:.1e}, reciprocity {worst_rec:.1e} over 100 lattices"),
    )
}

fn motor() -> Outcome {
    let mut w = World::new(4096);
    // (obstacle, low setpoint): 15 N, then a 30 N deficit held at the cap
    let cases = [(0.05, 0.02), (0.07, 0.01)];
    for (i, (obstacle, low)) in cases.iter().enumerate() {
        let model = MotorModel {
            obstacle_width: Some(*obstacle),
            ..Default::default()
        };
        let src = SetpointSource::Square {
            low: *low,
            high: 0.09,
            hz: 0.5,
        };
        let node = MotorNode::new(&format!("m{i}"), model, 0.09, src).map_err(|e| e.to_string())?;
        w.add_node(Box::new(node), LinkConfig::default()).map_err(|e| e.to_string())?;
    }
    let tap = w
        .add_node(Box::new(Tap::new("tap", &[Topic::GRIP_STATE])), LinkConfig::default())
        .map_err(|e| e.to_string())?;
    w.run_until(Timestamp(60_000 * MS)).map_err(|e| e.to_string())?;
    let m = MotorModel::default();
    let tap = w.node_as::<Tap>(tap).ok_or("tap")?;
    let mut stalls = 0;
    let mut worst_rate = 0.0f64;
    let mut worst_lag = 0.0f64;
    for (i, &(obstacle, low)) in cases.iter().enumerate() {
        let name = format!("m{i}");
        let s: Vec<(f64, GripState)> = tap
            .received
            .iter()
            .filter(|r| *r.from == *name)
            .map(|r| (r.msg.timestamp.as_secs_f64(), GripState::from_payload(&r.msg.payload).unwrap()))
            .collect();
        if s.len() < 5999 {
            return Err(format!("{name}: only {} samples", s.len()));
        }
        for p in s.windows(2) {
            let rate = (p[1].1.width - p[0].1.width).abs() / (p[1].0 - p[0].0);
            worst_rate = worst_rate.max(rate);
            if rate > m.v_max * (1.0 + 1e-9) {
                return Err(format!("{name}: width rate {rate} at t={}", p[1].0));
            }
        }
        let force = (m.stiffness * (obstacle - low)).min(m.force_cap);
        for k in 1..s.len() {
            let (prev, cur) = (&s[k - 1].1, &s[k].1);
            if !(cur.setpoint == low && prev.setpoint != low) {
                continue;
            }
            // jaws start closing at this tick from prev.width
            let contact = s[k - 1].0 + (prev.width - obstacle) / m.v_max;
            let Some(j) = (k..s.len()).find(|&j| s[j].1.stalled) else {
                // the run ended before the jaws could reach the obstacle
                if s.last().unwrap().0 - s[k].0 < 1.0 {
                    break;
                }
                return Err(format!("{name}: never stalled after t={}", s[k].0));
            };
            let late = s[j].0 - contact;
            worst_lag = worst_lag.max(late);
            if !(-1e-9..=m.dt + 1e-9).contains(&late) || s[j].1.width != obstacle || s[j].1.grip_force != force {
                return Err(format!("{name}: stall {late:.4} s after contact, force {}", s[j].1.grip_force));
            }
            stalls += 1;
        }
    }
    check(
        stalls >= 58,
        format!("{stalls} stalls within {:.1} ms of contact, forces 15 N and 20 N (cap); max |dw/dt| {worst_rate:.4} m/s", worst_lag * 1e3),
    )
}

fn teleop() -> Outcome {
    let v = 0.05;
    let delay_ms = 20.0;
    let start = Pose6D::from_translation(0.0, 0.1, 0.2);
    let end = start.with_position(start.position() + Vector3::new(v * 6.0, 0.0, 0.0));
    let script = TrajectoryScript::new(vec![
        Waypoint { t: 0.0, pose: start, grip: 0.06 },
        Waypoint { t: 6.0, pose: end, grip: 0.06 },
    ])
    .map_err(|e| e.to_string())?;
    let est = RigConfig::default().estimator().map_err(|e| e.to_string())?;
    let lead = LinkConfig {
        delay: DelayModel::fixed(delay_ms),
        clock_skew: 3_700_000,
    };
    let mut w = World::default();
    w.enable_default_clock_sync();
    let add = |w: &mut World, n: Box<dyn clawlink::sim::Node>, l: LinkConfig| w.add_node(n, l).map_err(|e| e.to_string());
    let lp = add(
        &mut w,
        Box::new(PhoneNode::new("lead", PoseSource::Script(script.clone()), 100.0, 1.0).map_err(|e| e.to_string())?),
        lead,
    )?;
    add(
        &mut w,
        Box::new(
            MotorNode::new("lead_motor", MotorModel::default(), 0.06, SetpointSource::Script(script.clone()))
                .map_err(|e| e.to_string())?,
        ),
        lead,
    )?;
    let follower = PoseSource::Commanded {
        initial: start,
        from: Some("teleop".into()),
    };
    let fp = add(
        &mut w,
        Box::new(PhoneNode::new("fol", follower, 100.0, 1.0).map_err(|e| e.to_string())?.with_period(10 * MS, 2 * MS)),
        LinkConfig {
            clock_skew: -1_200_000,
            ..Default::default()
        },
    )?;
    add(
        &mut w,
        Box::new(
            MotorNode::new("fol_motor", MotorModel::default(), 0.06, SetpointSource::Commands)
                .map_err(|e| e.to_string())?
                .commands_from("teleop"),
        ),
        LinkConfig::default(),
    )?;
    let tip_device = FingertipConfig::default();
    for (name, side) in [("fol_tip_l", Side::Left), ("fol_tip_r", Side::Right)] {
        let tip = tip_device.fingertip().map_err(|e| e.to_string())?;
        let contact = ContactScript::constant(Wrench6D::from_array([0.0, 0.0, 0.05, 0.0, 0.0, 0.0]));
        let node = FingertipNode::new(name, side, tip, est.clone(), contact, 50.0)
            .map_err(|e| e.to_string())?
            .attached_to("fol_motor");
        add(&mut w, Box::new(node), LinkConfig::default())?;
    }
    let cfg = TeleopConfig {
        engage_on_start: true,
        ..Default::default()
    };
    let coord = Coordinator::new(Endpoints::from_ids("lead", "fol"), cfg).map_err(|e| e.to_string())?;
    let c = add(
        &mut w,
        Box::new(coord),
        LinkConfig {
            clock_skew: 800_000,
            ..Default::default()
        },
    )?;
    let mut worst_lag = 0.0f64;
    let mut t = 0;
    while t < 5_000 {
        t += 1;
        w.run_until(Timestamp(t * MS)).map_err(|e| e.to_string())?;
        if t >= 1_000 {
            let leader = w.node_as::<PhoneNode>(lp).ok_or("lead")?.pose();
            let follower = w.node_as::<PhoneNode>(fp).ok_or("fol")?.pose();
            worst_lag = worst_lag.max((leader.position() - follower.position()).norm());
        }
    }
    let coord = w.node_as::<Coordinator>(c).ok_or("coordinator")?;
    let report = latency_report(&coord.session.forward).map_err(|e| e.to_string())?;
    let max_step = TeleopConfig::default().controller.max_step;
    let bound = v * delay_ms * 1e-3 + max_step;
    // symmetric links: the offset estimate is exact up to integer halving
    let sync_err = 2.0;
    let mean_err = (report.mean_ns - delay_ms * 1e6).abs();
    let step_ok = coord
        .history
        .windows(2)
        .all(|p| (p[1].position() - p[0].position()).norm() <= max_step * (1.0 + 1e-12));
    let haptic = w.node_as::<MotorNode>(1).map(|m| m.haptic_count).unwrap_or(0);
    check(
        worst_lag <= bound && mean_err <= sync_err && step_ok && haptic > 0,
        format!(
            "steady-state lag {:.3} mm (bound {:.1} mm); latency mean {:.3} ms p95 {:.3} ms max {:.3} ms over {} samples; {haptic} haptic frames at leader",
            worst_lag * 1e3,
            bound * 1e3,
            report.mean_ns / 1e6,
            report.p95_ns as f64 / 1e6,
            report.max_ns as f64 / 1e6,
            report.samples
        ),
    )
}

fn pipeline() -> Outcome {
    let script = pick_demo_scripts(4, 2.0).pop().ok_or("script")?;
    let mut cfg = pick_rig_config(&script, 40, 91);
    cfg.noise_sigma = 0.5;
    let est = cfg.estimator().map_err(|e| e.to_string())?;
    let demo = run_rig(&cfg, CommandSource::Script(script), &est).map_err(|e| e.to_string())?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let first = dir.path().join("demo.mgcl");
    demo.episode.save(&first).map_err(|e| e.to_string())?;
    let loaded = Episode::load(&first).map_err(|e| e.to_string())?;
    let replayed = replay_episode(&loaded, None).map_err(|e| e.to_string())?;
    let second = dir.path().join("replay.mgcl");
    replayed.episode.save(&second).map_err(|e| e.to_string())?;
    let (a, b) = (std::fs::read(&first).unwrap(), std::fs::read(&second).unwrap());
    if a != b {
        return Err("re-recorded episode differs".into());
    }
    if replayed.grip_log != demo.grip_log {
        return Err("follower grip stream differs".into());
    }
    // every single-bit flip of an image-free copy, and random flips of the file
    let mut slim = loaded.clone();
    for f in &mut slim.frames {
        f.rgb = None;
        f.depth = None;
    }
    let slim = slim.to_bytes();
    let mut flips = 0u64;
    for byte in 0..slim.len() {
        for bit in 0..8 {
            let mut c = slim.clone();
            c[byte] ^= 1 << bit;
            if Episode::from_bytes(&c).is_ok() {
                return Err(format!("flip at byte {byte} bit {bit} accepted"));
            }
            flips += 1;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(92);
    for _ in 0..500 {
        let mut c = a.clone();
        let k = rng.random_range(0..c.len());
        c[k] ^= 1 << rng.random_range(0..8);
        if Episode::from_bytes(&c).is_ok() {
            return Err(format!("flip at byte {k} accepted"));
        }
        flips += 1;
    }
    check(true, format!("{} byte files identical across record/replay; {flips} bit flips rejected", a.len()))
}

fn behavioral_cloning() -> Outcome {
    let scripts = pick_demo_scripts(10, 2.0);
    let est = pick_rig_config(&scripts[0], 40, 101).estimator().map_err(|e| e.to_string())?;
    let mut demos = Vec::new();
    for s in &scripts {
        let cfg = pick_rig_config(s, 40, 101);
        demos.push(run_rig(&cfg, CommandSource::Script(s.clone()), &est).map_err(|e| e.to_string())?);
    }
    if !demos.iter().all(|d| d.episode.frames.iter().any(|f| f.grip.grip_force > 0.0)) {
        return Err("a demo never squeezed the object".into());
    }
    let episodes: Vec<Episode> = demos.iter().map(|d| d.episode.clone()).collect();
    let policy = train_bc(&episodes, 1, ScaleWeights::default()).map_err(|e| e.to_string())?;
    let (mut pos, mut rot) = (0.0f64, 0.0f64);
    for (i, d) in demos.iter().enumerate() {
        let run = execute_policy(&d.episode, &policy, Some(&est)).map_err(|e| e.to_string())?;
        if run.actions != d.actions {
            return Err(format!("demo {i}: action sequence differs"));
        }
        let r = discrepancy_log(&d.episode, &run.episode).map_err(|e| e.to_string())?;
        let wrench = r.wrench_l.iter().chain(&r.wrench_r).map(|s| s.max).fold(0.0, f64::max);
        if r.steps.len() != d.episode.frames.len() || r.grip.max != 0.0 || wrench != 0.0 {
            return Err(format!("demo {i}: grip error {} wrench error {wrench}", r.grip.max));
        }
        pos = pos.max(r.position.max);
        rot = rot.max(r.orientation.max);
    }
    if pos > 1e-12 || rot > 1e-12 {
        return Err(format!("pose error {pos:.1e} m / {rot:.1e} rad"));
    }
    // neighbour sets against a full sort
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    for k in [1, 3, 7] {
        let p = train_bc(&episodes, k, ScaleWeights::default()).map_err(|e| e.to_string())?;
        for _ in 0..1000 {
            let base = p.observations[rng.random_range(0..p.len())];
            let q: [f64; OBS_DIM] = std::array::from_fn(|i| base[i] + rng.random_range(-0.02..0.02));
            let mut all: Vec<(f64, usize)> =
                p.observations.iter().enumerate().map(|(i, o)| (p.distance(&q, o), i)).collect();
            all.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let want: Vec<usize> = all.iter().take(k).map(|x| x.1).collect();
            let got: Vec<usize> = p.neighbors(&q).into_iter().map(|x| x.0).collect();
            if got != want {
                return Err(format!("k={k}: neighbours {got:?} vs scan {want:?}"));
            }
        }
    }
    check(
        true,
        format!("10 demos replayed by k=1 policy with identical actions; pose error {pos:.1e} m / {rot:.1e} rad, grip and wrench error 0; 3x1000 neighbour queries match"),
    )
}

fn main() {
    let checks: [(&str, fn() -> Outcome); 10] = [
        ("wrench recovery, noiseless", wrench_noiseless),
        ("wrench recovery, noisy", wrench_noisy),
        ("protocol round-trip and fuzz", protocol),
        ("clock sync", clock_sync),
        ("aligner vs oracle", aligner),
        ("equilibrium solver", equilibrium),
        ("motor stall and rate", motor),
        ("teleop lag and latency", teleop),
        ("pipeline determinism", pipeline),
        ("behavioral cloning loop", behavioral_cloning),
    ];
    let filter: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (i, (name, f)) in checks.iter().enumerate() {
        let n = i + 1;
        if !filter.is_empty() && !filter.contains(&n) {
            continue;
        }
        let t = Instant::now();
        let (tag, detail) = match f() {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("acceptance {n:>2} {tag}  {name}: {detail} [{:.1} s]", t.elapsed().as_secs_f64());
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
