use clawlink::nodes::{MotorModel, MotorNode, PhoneNode, PoseSource, SetpointSource, TrajectoryScript, Waypoint};
use clawlink::sim::{DelayModel, LinkConfig, World};
use clawlink::teleop::{latency_report, Coordinator, Endpoints, TeleopConfig};
use clawlink::types::Timestamp;
use clawlink::Pose6D;
use nalgebra::Vector3;
use proptest::prelude::*;

const MS: i64 = 1_000_000;

struct Run {
    lag: f64,
    mean_ns: f64,
    samples: usize,
}

fn run(delay_ms: i64, skews: [i64; 3], seconds: i64) -> Run {
    let start = Pose6D::from_translation(0.0, 0.1, 0.2);
    let end = start.with_position(start.position() + Vector3::new(0.05 * 10.0, 0.0, 0.0));
    let script = TrajectoryScript::new(vec![
        Waypoint { t: 0.0, pose: start, grip: 0.05 },
        Waypoint { t: 10.0, pose: end, grip: 0.05 },
    ])
    .unwrap();
    let lead = LinkConfig {
        delay: DelayModel::fixed(delay_ms as f64),
        clock_skew: skews[0],
    };
    let mut w = World::default();
    w.enable_default_clock_sync();
    let phone = PhoneNode::new("lead", PoseSource::Script(script.clone()), 100.0, 1.0).unwrap();
    let lp = w.add_node(Box::new(phone), lead).unwrap();
    let motor = MotorNode::new("lead_motor", MotorModel::default(), 0.05, SetpointSource::Script(script)).unwrap();
    w.add_node(Box::new(motor), lead).unwrap();
    let follower = PoseSource::Commanded {
        initial: start,
        from: Some("teleop".into()),
    };
    let phone = PhoneNode::new("fol", follower, 100.0, 1.0).unwrap().with_period(10 * MS, 2 * MS);
    let fp = w
        .add_node(
            Box::new(phone),
            LinkConfig {
                clock_skew: skews[1],
                ..Default::default()
            },
        )
        .unwrap();
    let motor = MotorNode::new("fol_motor", MotorModel::default(), 0.05, SetpointSource::Commands)
        .unwrap()
        .commands_from("teleop");
    w.add_node(Box::new(motor), LinkConfig::default()).unwrap();
    let cfg = TeleopConfig {
        engage_on_start: true,
        ..Default::default()
    };
    let coord = Coordinator::new(Endpoints::from_ids("lead", "fol"), cfg).unwrap();
    let c = w
        .add_node(
            Box::new(coord),
            LinkConfig {
                clock_skew: skews[2],
                ..Default::default()
            },
        )
        .unwrap();
    let mut lag = 0.0f64;
    for t in (1..=seconds * 1000).map(|t| t * MS) {
        w.run_until(Timestamp(t)).unwrap();
        if t >= 1000 * MS {
            let l = w.node_as::<PhoneNode>(lp).unwrap().pose();
            let f = w.node_as::<PhoneNode>(fp).unwrap().pose();
            lag = lag.max((l.position() - f.position()).norm());
        }
    }
    let coord = w.node_as::<Coordinator>(c).unwrap();
    let r = latency_report(&coord.session.forward).unwrap();
    Run {
        lag,
        mean_ns: r.mean_ns,
        samples: r.samples,
    }
}

#[test]
fn follower_tracks_within_delay_plus_step() {
    let r = run(20, [0, 0, 0], 3);
    assert!(r.lag <= 0.05 * 0.020 + 0.002, "lag {}", r.lag);
    assert!((r.mean_ns - 20e6).abs() <= 2.0, "mean {}", r.mean_ns);
}

#[test]
fn no_delay_tracks_closely() {
    let r = run(0, [0, 0, 0], 2);
    assert!(r.lag <= 0.002, "lag {}", r.lag);
    assert!(r.mean_ns.abs() <= 2.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    // symmetric links: skew never leaks into measured latency
    #[test]
    fn latency_is_skew_invariant(
        delay in 1i64..40,
        a in -500i64 * MS..500 * MS,
        b in -500i64 * MS..500 * MS,
        c in -500i64 * MS..500 * MS,
    ) {
        let r = run(delay, [a, b, c], 2);
        prop_assert!(r.samples >= 20);
        prop_assert!((r.mean_ns - (delay * MS) as f64).abs() <= 2.0, "mean {} for delay {delay} ms", r.mean_ns);
        prop_assert!(r.lag <= 0.05 * delay as f64 * 1e-3 + 0.002 + 1e-12);
    }
}
