use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use log::info;

use clawlink::lattice::FingertipConfig;
use clawlink::nodes::NodeConfig;
use clawlink::proto::broker::DEFAULT_QUEUE_CAPACITY;
use clawlink::proto::gateway::{Gateway, DEFAULT_GATEWAY_PORT};
use clawlink::proto::net::{BrokerServer, DEFAULT_BROKER_PORT};
use clawlink::sim::{run_wallclock, Node, WallClockOptions};
use clawlink::sync::episode::digest;
use clawlink::sync::rig::{describe_drops, pick_demo_scripts, pick_rig_config, SourceNames};
use clawlink::sync::{
    discrepancy_log, execute_policy, replay_episode, run_rig, train_bc, AlignConfig, CommandSource, Episode,
    EpisodeHeader, Pilot, PolicyKNN, RecorderNode, ScaleWeights,
};
use clawlink::teleop::{Coordinator, Endpoints, MirrorMode, TeleopConfig};
use clawlink::wrench::{calibrate, calibration_schedule, generate_calibration, CalibrationSet, EstimatorModel, LoadScale};

const MS: i64 = 1_000_000;

#[derive(Parser)]
#[command(name = "claw", version, about = "Desk-scale gripper middleware tools")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum NodeKind {
    Phone,
    Motor,
    Fingertip,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Relative,
    Absolute,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the TCP broker.
    Broker {
        #[arg(long, default_value_t = format!("0.0.0.0:{DEFAULT_BROKER_PORT}"))]
        listen: String,
        #[arg(long, default_value_t = DEFAULT_QUEUE_CAPACITY)]
        queue_capacity: usize,
    },
    /// Run a device node against a broker.
    Node {
        kind: NodeKind,
        #[arg(long)]
        config: PathBuf,
        /// Stop after this many seconds.
        #[arg(long)]
        seconds: Option<f64>,
    },
    /// Print the stiffness matrix condition number and grounding check.
    LatticeDump {
        /// Fingertip device file; built-in defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Generate a synthetic calibration set.
    GenCalib {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 200)]
        samples: usize,
        /// Marker noise, px.
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit an estimator from a calibration set.
    Calibrate {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value_t = 0.0)]
        lambda: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Record aligned frames from the broker to an episode file.
    Record {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 25.0)]
        eps_ms: f64,
        #[arg(long, default_value_t = format!("127.0.0.1:{DEFAULT_BROKER_PORT}"))]
        broker: String,
        /// Wait for record:begin instead of recording immediately.
        #[arg(long)]
        wait: bool,
        #[arg(long)]
        seconds: Option<f64>,
        /// Publisher of POSE and images; any publisher when omitted.
        #[arg(long)]
        pose_from: Option<String>,
        #[arg(long)]
        grip_from: Option<String>,
        #[arg(long)]
        wrench_l_from: Option<String>,
        #[arg(long)]
        wrench_r_from: Option<String>,
    },
    /// Re-execute an episode, on the virtual rig or against live nodes.
    Replay {
        file: PathBuf,
        #[arg(long = "virtual")]
        virtual_rig: bool,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = format!("127.0.0.1:{DEFAULT_BROKER_PORT}"))]
        broker: String,
    },
    /// Train a k-NN policy from episodes.
    BcTrain {
        #[arg(long, default_value_t = 3)]
        k: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(required = true)]
        episodes: Vec<PathBuf>,
    },
    /// Run a policy from an episode's start state.
    BcRun {
        policy: PathBuf,
        #[arg(long)]
        start: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Drive live nodes through the broker instead of the virtual rig.
        #[arg(long)]
        live: bool,
        #[arg(long, default_value_t = format!("127.0.0.1:{DEFAULT_BROKER_PORT}"))]
        broker: String,
    },
    /// Per-step discrepancy between a demo and an executed episode.
    Diff {
        demo: PathBuf,
        executed: PathBuf,
        /// Print every step as well as the summary.
        #[arg(long)]
        steps: bool,
    },
    /// Mirror a leader gripper onto a follower.
    Teleop {
        #[arg(long)]
        leader: String,
        #[arg(long)]
        follower: String,
        #[arg(long, default_value_t = 2.0)]
        max_step_mm: f64,
        #[arg(long, default_value_t = 10.0)]
        max_rot_mrad: f64,
        #[arg(long, value_enum, default_value_t = Mode::Relative)]
        mode: Mode,
        /// Start mirroring without waiting for teleop:enable.
        #[arg(long)]
        engage: bool,
        #[arg(long, default_value_t = format!("127.0.0.1:{DEFAULT_BROKER_PORT}"))]
        broker: String,
        #[arg(long)]
        seconds: Option<f64>,
    },
    /// Virtual pick demos, recording, cloning and execution in one go.
    Demo {
        #[arg(long, default_value = "demo-out")]
        dir: PathBuf,
        #[arg(long, default_value_t = 5)]
        demos: usize,
        #[arg(long, default_value_t = 40)]
        frames: usize,
        #[arg(long, default_value_t = 1)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// WebSocket gateway for browser clients.
    Gateway {
        #[arg(long, default_value_t = format!("127.0.0.1:{DEFAULT_BROKER_PORT}"))]
        broker: String,
        #[arg(long, default_value_t = format!("0.0.0.0:{DEFAULT_GATEWAY_PORT}"))]
        listen: String,
    },
}

fn stop_flag() -> Arc<AtomicBool> {
    let stop = Arc::new(AtomicBool::new(false));
    let s = stop.clone();
    if let Err(e) = ctrlc::set_handler(move || s.store(true, Ordering::SeqCst)) {
        log::warn!("no signal handler: {e}");
    }
    stop
}

fn wait(stop: &AtomicBool, seconds: Option<f64>) {
    let start = std::time::Instant::now();
    while !stop.load(Ordering::SeqCst) && seconds.is_none_or(|s| start.elapsed().as_secs_f64() < s) {
        std::thread::sleep(Duration::from_millis(50));
    }
}

fn run_live(node: &mut dyn Node, broker: &str, skew: i64, stop: Arc<AtomicBool>, seconds: Option<f64>) -> Result<u64> {
    let opts = WallClockOptions {
        clock_skew: skew,
        run_for: seconds.map(Duration::from_secs_f64),
        stop,
        ..Default::default()
    };
    Ok(run_wallclock(node, broker.to_string(), &opts)?)
}

fn print_json(v: &impl serde::Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn device(config: &Option<PathBuf>) -> Result<FingertipConfig> {
    Ok(match config {
        Some(p) => FingertipConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => FingertipConfig::default(),
    })
}

fn load_episode(p: &Path) -> Result<Episode> {
    Episode::load(p).with_context(|| format!("loading {}", p.display()))
}

/// Pilot for live execution; timing comes from the episode header.
fn live_pilot(e: &Episode, command: CommandSource, stop: Arc<AtomicBool>) -> Result<Pilot> {
    let pose_hz = e.header.rates.get("POSE").copied().unwrap_or(20.0);
    let period = (1e9 / pose_hz) as i64;
    let align = AlignConfig {
        epsilon_ns: e.header.epsilon_ns,
        ..Default::default()
    };
    let pilot = Pilot::new(command, e.header.clone(), align, 2 * e.header.epsilon_ns, period, e.frames.len().max(1))?
        .with_stop_flag(stop);
    Ok(pilot)
}

fn finish_run(episode: &Episode, out: &Option<PathBuf>, reference: &Episode) -> Result<()> {
    if let Some(p) = out {
        episode.save(p)?;
        info!("wrote {} frames to {}", episode.frames.len(), p.display());
    }
    let report = discrepancy_log(reference, episode)?;
    print_json(&serde_json::json!({
        "frames": episode.frames.len(),
        "position": report.position,
        "orientation": report.orientation,
        "grip": report.grip,
    }))
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().cmd {
        Cmd::Broker { listen, queue_capacity } => {
            let server = BrokerServer::bind(&listen, queue_capacity)?;
            info!("broker listening on {}", server.local_addr());
            wait(&stop_flag(), None);
            server.shutdown();
        }
        Cmd::Node { kind, config, seconds } => {
            let cfg = NodeConfig::load(&config)?;
            let mut node: Box<dyn Node> = match kind {
                NodeKind::Phone => Box::new(cfg.phone()?),
                NodeKind::Motor => Box::new(cfg.motor()?),
                NodeKind::Fingertip => Box::new(cfg.fingertip()?),
            };
            let ticks = run_live(node.as_mut(), &cfg.broker, cfg.clock_skew_ns, stop_flag(), seconds)?;
            info!("{} stopped after {ticks} ticks", cfg.node_id);
        }
        Cmd::LatticeDump { config } => {
            let model = device(&config)?.lattice()?;
            print_json(&serde_json::json!({
                "nodes": model.nodes.len(),
                "edges": model.edges.len(),
                "fixed": model.fixed.len(),
                "markers": model.markers.len(),
                "condition_number": model.condition_number(),
                "grounded": model.is_grounded(),
                "ungrounded_node": model.ungrounded_node(),
                "positive_definite": model.is_positive_definite(),
            }))?;
        }
        Cmd::GenCalib {
            config,
            samples,
            noise,
            seed,
            out,
        } => {
            let tip = device(&config)?.fingertip()?;
            let cs = generate_calibration(&tip, &calibration_schedule(samples, LoadScale::default(), seed), noise, seed)?;
            cs.save(&out)?;
            info!("wrote {} samples to {}", cs.samples.len(), out.display());
        }
        Cmd::Calibrate { input, lambda, out } => {
            let cs = CalibrationSet::load(&input)?;
            let model = calibrate(&cs, lambda)?;
            model.save(&out)?;
            print_json(&serde_json::json!({
                "samples": cs.samples.len(),
                "markers": model.marker_count(),
                "lambda": lambda,
                "condition_number": model.condition_number,
            }))?;
        }
        Cmd::Record {
            out,
            eps_ms,
            broker,
            wait,
            seconds,
            pose_from,
            grip_from,
            wrench_l_from,
            wrench_r_from,
        } => {
            if !(eps_ms > 0.0) {
                bail!("--eps-ms must be positive");
            }
            let eps = (eps_ms * MS as f64) as i64;
            let sources = SourceNames {
                images: pose_from.clone(),
                pose: pose_from,
                grip: grip_from,
                wrench_l: wrench_l_from,
                wrench_r: wrench_r_from,
            };
            let header = EpisodeHeader {
                config_digest: digest(format!("{sources:?}").as_bytes()),
                epsilon_ns: eps,
                start_time: clawlink::proto::net::system_now().0,
                ..Default::default()
            };
            let align = AlignConfig {
                epsilon_ns: eps,
                ..Default::default()
            };
            let mut node = RecorderNode::new("recorder", header, align, 2 * eps, 10 * MS, !wait)?.with_sources(sources);
            run_live(&mut node, &broker, 0, stop_flag(), seconds)?;
            let episode = node.finish();
            episode.save(&out)?;
            println!("{} frames, {}", episode.frames.len(), describe(&episode));
        }
        Cmd::Replay {
            file,
            virtual_rig,
            out,
            broker,
        } => {
            let demo = load_episode(&file)?;
            let episode = if virtual_rig {
                replay_episode(&demo, None)?.episode
            } else {
                let stop = stop_flag();
                let mut pilot = live_pilot(&demo, CommandSource::replay(&demo), stop.clone())?;
                run_live(&mut pilot, &broker, 0, stop, None)?;
                pilot.episode()
            };
            finish_run(&episode, &out, &demo)?;
        }
        Cmd::BcTrain { k, out, episodes } => {
            let eps: Vec<Episode> = episodes.iter().map(|p| load_episode(p)).collect::<Result<_>>()?;
            let policy = train_bc(&eps, k, ScaleWeights::default())?;
            policy.save(&out)?;
            println!("{} samples from {} episodes, k = {k}", policy.len(), eps.len());
        }
        Cmd::BcRun {
            policy,
            start,
            out,
            live,
            broker,
        } => {
            let policy = PolicyKNN::load(&policy).with_context(|| format!("loading {}", policy.display()))?;
            let start = load_episode(&start)?;
            let episode = if live {
                let stop = stop_flag();
                let mut pilot = live_pilot(&start, CommandSource::Policy(policy), stop.clone())?;
                run_live(&mut pilot, &broker, 0, stop, None)?;
                pilot.episode()
            } else {
                execute_policy(&start, &policy, None)?.episode
            };
            finish_run(&episode, &out, &start)?;
        }
        Cmd::Diff { demo, executed, steps } => {
            let r = discrepancy_log(&load_episode(&demo)?, &load_episode(&executed)?)?;
            if steps {
                print_json(&r)?;
            } else {
                print_json(&serde_json::json!({
                    "steps": r.steps.len(),
                    "position": r.position,
                    "orientation": r.orientation,
                    "grip": r.grip,
                    "wrench_l": r.wrench_l,
                    "wrench_r": r.wrench_r,
                }))?;
            }
        }
        Cmd::Teleop {
            leader,
            follower,
            max_step_mm,
            max_rot_mrad,
            mode,
            engage,
            broker,
            seconds,
        } => {
            let mut cfg = TeleopConfig {
                engage_on_start: engage,
                mode: match mode {
                    Mode::Relative => MirrorMode::Relative,
                    Mode::Absolute => MirrorMode::Absolute,
                },
                ..Default::default()
            };
            cfg.controller.max_step = max_step_mm * 1e-3;
            cfg.controller.max_rotation = max_rot_mrad * 1e-3;
            let mut coord = Coordinator::new(Endpoints::from_ids(&leader, &follower), cfg)?;
            run_live(&mut coord, &broker, 0, stop_flag(), seconds)?;
            coord.session.stop();
            print_json(&coord.stats())?;
        }
        Cmd::Demo {
            dir,
            demos,
            frames,
            k,
            seed,
        } => demo(&dir, demos, frames, k, seed)?,
        Cmd::Gateway { broker, listen } => {
            let gw = Gateway::start(broker.as_str(), listen.as_str())?;
            info!("gateway on ws://{}", gw.local_addr());
            let stop = stop_flag();
            while gw.is_running() && !stop.load(Ordering::SeqCst) {
                std::thread::sleep(Duration::from_millis(50));
            }
            gw.shutdown();
        }
    }
    Ok(())
}

fn describe(e: &Episode) -> String {
    format!(
        "drops: {}, {}{:.2} s",
        describe_drops(&e.footer),
        if e.footer.aborted { "aborted, " } else { "" },
        e.duration_ns() as f64 * 1e-9
    )
}

fn demo(dir: &Path, count: usize, frames: usize, k: usize, seed: u64) -> Result<()> {
    if count == 0 {
        bail!("need at least one demo");
    }
    std::fs::create_dir_all(dir)?;
    let duration = frames as f64 * 0.05;
    let scripts = pick_demo_scripts(count, duration);
    let estimator: EstimatorModel = pick_rig_config(&scripts[0], frames, seed).estimator()?;
    let mut episodes = Vec::new();
    for (i, s) in scripts.iter().enumerate() {
        let cfg = pick_rig_config(s, frames, seed);
        let run = run_rig(&cfg, CommandSource::Script(s.clone()), &estimator)?;
        let path = dir.join(format!("demo_{i:02}.mgcl"));
        run.episode.save(&path)?;
        let replayed = replay_episode(&Episode::load(&path)?, Some(&estimator))?;
        let identical = replayed.episode.to_bytes() == std::fs::read(&path)?;
        println!("demo {i}: {} frames, {}, replay identical: {identical}", run.episode.frames.len(), describe(&run.episode));
        episodes.push(run.episode);
    }
    let policy = train_bc(&episodes, k, ScaleWeights::default())?;
    policy.save(&dir.join("policy.json"))?;
    println!("policy: {} samples, k = {k}", policy.len());
    for (i, e) in episodes.iter().enumerate() {
        let run = execute_policy(e, &policy, Some(&estimator))?;
        run.episode.save(&dir.join(format!("exec_{i:02}.mgcl")))?;
        let r = discrepancy_log(e, &run.episode)?;
        println!(
            "exec {i}: position max {:.2e} m, orientation max {:.2e} rad, grip max {:.2e} m",
            r.position.max, r.orientation.max, r.grip.max
        );
    }
    Ok(())
}
