//! Python bindings. Poses cross the boundary as `[x, y, z, qw, qx, qy, qz]`,
//! wrenches as `[fx, fy, fz, tx, ty, tz]`, markers as `[[u, v], ...]`.

use std::fmt::Display;
use std::path::PathBuf;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use clawlink::lattice::{Fingertip, FingertipConfig, MarkerSet};
use clawlink::proto::clock::{clock_offset as offset_of, ClockSample};
use clawlink::proto::codec::{Message, Topic};
use clawlink::sync::policy::observation;
use clawlink::sync::rig::{pick_demo_scripts, pick_rig_config};
use clawlink::sync::{run_rig, train_bc as train, CommandSource, Episode, PolicyKNN, ScaleWeights, OBS_DIM};
use clawlink::teleop::latency_stats as stats;
use clawlink::types::{Timestamp, Wrench6D};
use clawlink::wrench::{calibrate, calibration_schedule, generate_calibration, EstimatorModel, LoadScale};
use clawlink::Pose6D;

fn err(e: impl Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn pose7(p: &Pose6D) -> [f64; 7] {
    let t = p.position();
    let q = p.quat_wxyz();
    [t.x, t.y, t.z, q[0], q[1], q[2], q[3]]
}

/// Default fingertip with a calibrated linear estimator.
#[pyclass]
struct Estimator {
    tip: Fingertip,
    model: EstimatorModel,
}

#[pymethods]
impl Estimator {
    #[new]
    #[pyo3(signature = (samples=200, seed=0, lam=0.0, noise=0.0))]
    fn new(samples: usize, seed: u64, lam: f64, noise: f64) -> PyResult<Self> {
        let tip = FingertipConfig::default().fingertip().map_err(err)?;
        let cs = generate_calibration(&tip, &calibration_schedule(samples, LoadScale::default(), seed), noise, seed)
            .map_err(err)?;
        let model = calibrate(&cs, lam).map_err(err)?;
        Ok(Estimator { tip, model })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let tip = FingertipConfig::default().fingertip().map_err(err)?;
        let model = EstimatorModel::load(&path).map_err(err)?;
        Ok(Estimator { tip, model })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.model.save(&path).map_err(err)
    }

    #[getter]
    fn condition_number(&self) -> f64 {
        self.model.condition_number
    }

    #[pyo3(signature = (wrench, noise=0.0, seed=0))]
    fn observe(&self, wrench: [f64; 6], noise: f64, seed: u64) -> PyResult<Vec<[f64; 2]>> {
        let w = Wrench6D::from_array(wrench);
        let m = if noise > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            self.tip.observe_noisy(&w, Timestamp::ZERO, noise, &mut rng)
        } else {
            self.tip.observe(&w, Timestamp::ZERO)
        };
        Ok(m.map_err(err)?.points)
    }

    fn estimate(&self, markers: Vec<[f64; 2]>) -> PyResult<[f64; 6]> {
        let w = self.model.estimate(&MarkerSet::new(Timestamp::ZERO, markers)).map_err(err)?;
        Ok(w.to_array())
    }
}

/// Offset and round-trip delay, ns, from one exchange.
#[pyfunction]
fn clock_offset(t0: i64, t1: i64, t2: i64, t3: i64) -> PyResult<(i64, i64)> {
    let e = offset_of(&ClockSample {
        t0: Timestamp(t0),
        t1: Timestamp(t1),
        t2: Timestamp(t2),
        t3: Timestamp(t3),
    })
    .map_err(err)?;
    Ok((e.offset, e.delay))
}

#[pyfunction]
fn encode_message<'py>(py: Python<'py>, topic: u16, seq: u32, ts: i64, payload: &[u8]) -> PyResult<Bound<'py, PyBytes>> {
    let b = Message::new(Topic(topic), seq, Timestamp(ts), payload.to_vec()).encode().map_err(err)?;
    Ok(PyBytes::new(py, &b))
}

/// `(topic, seq, ts, payload)`
#[pyfunction]
fn decode_message<'py>(py: Python<'py>, data: &[u8]) -> PyResult<(u16, u32, i64, Bound<'py, PyBytes>)> {
    let m = Message::decode(data).map_err(err)?;
    Ok((m.topic.0, m.seq, m.timestamp.0, PyBytes::new(py, &m.payload)))
}

/// Mean, p95, max and jitter of latency samples (ns); None when empty.
#[pyfunction]
fn latency_stats<'py>(py: Python<'py>, samples: Vec<i64>) -> PyResult<Option<Bound<'py, PyDict>>> {
    let Some(r) = stats(&samples) else {
        return Ok(None);
    };
    let d = PyDict::new(py);
    d.set_item("samples", r.samples)?;
    d.set_item("mean_ns", r.mean_ns)?;
    d.set_item("p95_ns", r.p95_ns)?;
    d.set_item("max_ns", r.max_ns)?;
    d.set_item("jitter_std_ns", r.jitter_std_ns)?;
    Ok(Some(d))
}

/// Header fields plus per-frame arrays of an episode file.
#[pyfunction]
fn load_episode<'py>(py: Python<'py>, path: PathBuf) -> PyResult<Bound<'py, PyDict>> {
    let e = Episode::load(&path).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("config_digest", &e.header.config_digest)?;
    d.set_item("epsilon_ns", e.header.epsilon_ns)?;
    d.set_item("seed", e.header.seed)?;
    d.set_item("aborted", e.footer.aborted)?;
    d.set_item("t", e.frames.iter().map(|f| f.t.0).collect::<Vec<_>>())?;
    d.set_item("pose", e.frames.iter().map(|f| pose7(&f.pose)).collect::<Vec<_>>())?;
    d.set_item("width", e.frames.iter().map(|f| f.grip.width).collect::<Vec<_>>())?;
    d.set_item("grip_force", e.frames.iter().map(|f| f.grip.grip_force).collect::<Vec<_>>())?;
    d.set_item("wrench_l", e.frames.iter().map(|f| f.wrench_l.to_array()).collect::<Vec<_>>())?;
    d.set_item("wrench_r", e.frames.iter().map(|f| f.wrench_r.to_array()).collect::<Vec<_>>())?;
    d.set_item(
        "observations",
        e.frames.iter().map(|f| observation(f).to_vec()).collect::<Vec<_>>(),
    )?;
    Ok(d)
}

/// Runs pick demo `index` of `count` on the virtual rig and saves it.
#[pyfunction]
#[pyo3(signature = (path, index=0, count=10, frames=40, seed=0))]
fn record_pick_demo(path: PathBuf, index: usize, count: usize, frames: usize, seed: u64) -> PyResult<usize> {
    let script = pick_demo_scripts(count.max(index + 1), frames as f64 * 0.05)
        .into_iter()
        .nth(index)
        .ok_or_else(|| err("no such demo"))?;
    let cfg = pick_rig_config(&script, frames, seed);
    let est = cfg.estimator().map_err(err)?;
    let run = run_rig(&cfg, CommandSource::Script(script), &est).map_err(err)?;
    run.episode.save(&path).map_err(err)?;
    Ok(run.episode.frames.len())
}

#[pyclass]
struct Policy(PolicyKNN);

#[pymethods]
impl Policy {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        PolicyKNN::load(&path).map(Policy).map_err(err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.0.save(&path).map_err(err)
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    #[getter]
    fn k(&self) -> usize {
        self.0.k
    }

    /// `(delta_pose, grip_setpoint)` for one observation vector.
    fn act(&self, obs: Vec<f64>) -> PyResult<([f64; 7], f64)> {
        let obs: [f64; OBS_DIM] = obs
            .try_into()
            .map_err(|v: Vec<f64>| err(format!("observation needs {OBS_DIM} values, got {}", v.len())))?;
        let a = self.0.act(&obs);
        Ok((pose7(&a.delta), a.grip_setpoint))
    }
}

#[pyfunction]
#[pyo3(signature = (paths, k=3))]
fn train_bc(paths: Vec<PathBuf>, k: usize) -> PyResult<Policy> {
    let eps = paths.iter().map(|p| Episode::load(p)).collect::<Result<Vec<_>, _>>().map_err(err)?;
    train(&eps, k, ScaleWeights::default()).map(Policy).map_err(err)
}

#[pymodule]
fn clawlink_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Estimator>()?;
    m.add_class::<Policy>()?;
    m.add_function(wrap_pyfunction!(clock_offset, m)?)?;
    m.add_function(wrap_pyfunction!(encode_message, m)?)?;
    m.add_function(wrap_pyfunction!(decode_message, m)?)?;
    m.add_function(wrap_pyfunction!(latency_stats, m)?)?;
    m.add_function(wrap_pyfunction!(load_episode, m)?)?;
    m.add_function(wrap_pyfunction!(record_pick_demo, m)?)?;
    m.add_function(wrap_pyfunction!(train_bc, m)?)?;
    m.add("OBS_DIM", OBS_DIM)?;
    Ok(())
}
