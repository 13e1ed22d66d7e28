//! Affine marker-displacement → wrench estimator fitted by ridge regression.
//!
//! With `dᵢ = vec(markersᵢ − reference)` the fit minimizes
//! `Σ‖A dᵢ + b − wᵢ‖² + λ‖A‖²_F` with `b` unpenalized. Centering the data
//! eliminates `b`, leaving `(XcᵀXc + λI) Aᵀ = XcᵀWc` and `b = w̄ − A d̄`.

use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen, SVD};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lattice::{Fingertip, LatticeError, MarkerSet};
use crate::types::{Timestamp, Wrench6D};

pub const MIN_SAMPLES: usize = 8;
pub const DEFAULT_LAMBDA: f64 = 1e-6;
pub const MODEL_MAGIC: [u8; 4] = *b"MGCE";
pub const MODEL_VERSION: u16 = 1;

/// Beyond this condition number the normal equations are not trusted and
/// the fit goes through an SVD of the centered data instead.
const MAX_NORMAL_CONDITION: f64 = 1e12;

#[derive(Debug, Error)]
pub enum WrenchError {
    #[error("need at least {need} calibration samples, have {have}")]
    InsufficientData { have: usize, need: usize },
    #[error("degenerate calibration data: all displacement vectors are identical")]
    DegenerateData,
    #[error("marker count mismatch: expected {expected}, got {got}")]
    Shape { expected: usize, got: usize },
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("model blob: {0}")]
    Format(String),
    #[error(transparent)]
    Lattice(#[from] LatticeError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSet {
    pub reference: MarkerSet,
    pub samples: Vec<(MarkerSet, Wrench6D)>,
}

impl CalibrationSet {
    pub fn new(reference: MarkerSet) -> Self {
        CalibrationSet {
            reference,
            samples: Vec::new(),
        }
    }

    pub fn push(&mut self, markers: MarkerSet, wrench: Wrench6D) {
        self.samples.push((markers, wrench));
    }

    pub fn marker_count(&self) -> usize {
        self.reference.len()
    }

    pub fn load(path: &Path) -> Result<Self, WrenchError> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| WrenchError::Format(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<(), WrenchError> {
        let text = serde_json::to_string(self).map_err(|e| WrenchError::Format(e.to_string()))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    /// Displacement rows and wrench rows.
    fn matrices(&self, indices: &[usize]) -> Result<(DMatrix<f64>, DMatrix<f64>), WrenchError> {
        let m2 = 2 * self.marker_count();
        let mut x = DMatrix::zeros(indices.len(), m2);
        let mut w = DMatrix::zeros(indices.len(), 6);
        for (r, &i) in indices.iter().enumerate() {
            let (ms, wr) = &self.samples[i];
            let d = ms.displacement_from(&self.reference).map_err(|_| WrenchError::Shape {
                expected: self.marker_count(),
                got: ms.len(),
            })?;
            x.row_mut(r).copy_from(&d.transpose());
            for (c, v) in wr.to_array().into_iter().enumerate() {
                w[(r, c)] = v;
            }
        }
        Ok((x, w))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorModel {
    /// 6 × 2M
    pub a: DMatrix<f64>,
    pub b: [f64; 6],
    pub lambda: f64,
    /// Of the regularized normal matrix; infinite when singular.
    pub condition_number: f64,
    pub reference: MarkerSet,
}

impl EstimatorModel {
    pub fn marker_count(&self) -> usize {
        self.reference.len()
    }

    pub fn estimate(&self, current: &MarkerSet) -> Result<Wrench6D, WrenchError> {
        let d = current.displacement_from(&self.reference).map_err(|_| WrenchError::Shape {
            expected: self.marker_count(),
            got: current.len(),
        })?;
        Ok(self.apply(&d))
    }

    /// `A d + b` for a raw displacement vector.
    pub fn apply(&self, d: &DVector<f64>) -> Wrench6D {
        let w = &self.a * d;
        Wrench6D::from_array(std::array::from_fn(|i| w[i] + self.b[i]))
    }

    /// Layout, little-endian: magic "MGCE", version u16, M u32, A (6 × 2M
    /// f64, row-major), b (6 f64), λ f64, condition number f64, reference
    /// timestamp i64, reference markers (M × 2 f64).
    pub fn to_bytes(&self) -> Vec<u8> {
        let m = self.marker_count();
        let mut out = Vec::with_capacity(4 + 2 + 4 + 8 * (12 * m + 6 + 2 + 1 + 2 * m));
        out.extend_from_slice(&MODEL_MAGIC);
        out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
        out.extend_from_slice(&(m as u32).to_le_bytes());
        for r in 0..6 {
            for c in 0..2 * m {
                out.extend_from_slice(&self.a[(r, c)].to_le_bytes());
            }
        }
        for v in self.b {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.lambda.to_le_bytes());
        out.extend_from_slice(&self.condition_number.to_le_bytes());
        out.extend_from_slice(&self.reference.timestamp.0.to_le_bytes());
        for p in &self.reference.points {
            out.extend_from_slice(&p[0].to_le_bytes());
            out.extend_from_slice(&p[1].to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, WrenchError> {
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8], WrenchError> {
            let s = bytes
                .get(pos..pos + n)
                .ok_or_else(|| WrenchError::Format(format!("truncated at byte {pos}")))?;
            pos += n;
            Ok(s)
        };
        if take(4)? != MODEL_MAGIC {
            return Err(WrenchError::Format("bad magic".into()));
        }
        let version = u16::from_le_bytes(take(2)?.try_into().unwrap());
        if version != MODEL_VERSION {
            return Err(WrenchError::Format(format!("unsupported version {version}")));
        }
        let m = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let need = 8 * (12 * m + 6 + 3 + 2 * m);
        if bytes.len() != 10 + need {
            return Err(WrenchError::Format(format!(
                "expected {} bytes for {m} markers, got {}",
                10 + need,
                bytes.len()
            )));
        }
        let mut f = || -> Result<f64, WrenchError> { Ok(f64::from_le_bytes(take(8)?.try_into().unwrap())) };
        let mut a = DMatrix::zeros(6, 2 * m);
        for r in 0..6 {
            for c in 0..2 * m {
                a[(r, c)] = f()?;
            }
        }
        let mut b = [0.0; 6];
        for v in &mut b {
            *v = f()?;
        }
        let lambda = f()?;
        let condition_number = f()?;
        // stored as i64; same 8 bytes
        let ts = Timestamp(f()?.to_bits() as i64);
        let mut points = Vec::with_capacity(m);
        for _ in 0..m {
            points.push([f()?, f()?]);
        }
        Ok(EstimatorModel {
            a,
            b,
            lambda,
            condition_number,
            reference: MarkerSet::new(ts, points),
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), WrenchError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, WrenchError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

pub fn calibrate(cs: &CalibrationSet, lambda: f64) -> Result<EstimatorModel, WrenchError> {
    let all: Vec<usize> = (0..cs.samples.len()).collect();
    calibrate_subset(cs, &all, lambda)
}

fn calibrate_subset(cs: &CalibrationSet, indices: &[usize], lambda: f64) -> Result<EstimatorModel, WrenchError> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(WrenchError::Invalid(format!("lambda must be finite and ≥ 0, got {lambda}")));
    }
    if indices.len() < MIN_SAMPLES {
        return Err(WrenchError::InsufficientData {
            have: indices.len(),
            need: MIN_SAMPLES,
        });
    }
    let (x, w) = cs.matrices(indices)?;
    if !x.iter().chain(w.iter()).all(|v| v.is_finite()) {
        return Err(WrenchError::Invalid("non-finite calibration sample".into()));
    }
    let xbar = x.row_mean();
    let wbar = w.row_mean();
    let mut xc = x.clone();
    for mut row in xc.row_iter_mut() {
        row -= &xbar;
    }
    let mut wc = w.clone();
    for mut row in wc.row_iter_mut() {
        row -= &wbar;
    }
    if x.row_iter().all(|r| r == x.row(0)) {
        return Err(WrenchError::DegenerateData);
    }

    let p = xc.ncols();
    let normal = xc.transpose() * &xc + DMatrix::identity(p, p) * lambda;
    let eig = SymmetricEigen::new(normal.clone()).eigenvalues;
    let (emax, emin) = (eig.max(), eig.min());
    let condition_number = if emin <= emax * f64::EPSILON { f64::INFINITY } else { emax / emin };

    let rhs = xc.transpose() * &wc;
    let at = if condition_number < MAX_NORMAL_CONDITION {
        Cholesky::new(normal).map(|c| c.solve(&rhs))
    } else {
        None
    };
    let at = match at {
        Some(at) => at,
        None => ridge_svd(&xc, &wc, lambda),
    };
    let a = at.transpose();
    let bv = wbar.transpose() - &a * xbar.transpose();
    Ok(EstimatorModel {
        a,
        b: std::array::from_fn(|i| bv[i]),
        lambda,
        condition_number,
        reference: cs.reference.clone(),
    })
}

/// `Aᵀ = V diag(s / (s² + λ)) Uᵀ Wc`, dropping numerically null directions.
/// At λ = 0 this is the minimum-norm least-squares solution.
fn ridge_svd(xc: &DMatrix<f64>, wc: &DMatrix<f64>, lambda: f64) -> DMatrix<f64> {
    let svd = SVD::new(xc.clone(), true, true);
    let u = svd.u.as_ref().expect("u requested");
    let vt = svd.v_t.as_ref().expect("v_t requested");
    let smax = svd.singular_values.max();
    let tol = smax * 1e-10 * (xc.nrows().max(xc.ncols()) as f64);
    let mut at = DMatrix::zeros(xc.ncols(), wc.ncols());
    for (k, &s) in svd.singular_values.iter().enumerate() {
        if s <= tol {
            continue;
        }
        let gain = s / (s * s + lambda);
        let proj = u.column(k).transpose() * wc;
        at += vt.row(k).transpose() * proj * gain;
    }
    at
}

pub fn estimate(m: &EstimatorModel, current: &MarkerSet) -> Result<Wrench6D, WrenchError> {
    m.estimate(current)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CvReport {
    pub folds: usize,
    pub lambda: f64,
    /// RMSE per wrench axis over all held-out predictions.
    pub rmse: [f64; 6],
    /// Per-fold RMSE per axis.
    pub fold_rmse: Vec<[f64; 6]>,
}

/// k-fold cross-validation; sample `i` is held out in fold `i mod folds`.
pub fn cross_validate(cs: &CalibrationSet, folds: usize, lambda: f64) -> Result<CvReport, WrenchError> {
    let n = cs.samples.len();
    if folds < 2 || n < folds {
        return Err(WrenchError::Invalid(format!("{folds} folds over {n} samples")));
    }
    let mut total = [0.0; 6];
    let mut fold_rmse = Vec::with_capacity(folds);
    for f in 0..folds {
        let train: Vec<usize> = (0..n).filter(|i| i % folds != f).collect();
        let model = calibrate_subset(cs, &train, lambda)?;
        let mut sq = [0.0; 6];
        let mut count = 0usize;
        for i in (f..n).step_by(folds) {
            let (ms, w) = &cs.samples[i];
            let e = (model.estimate(ms)? - *w).to_array();
            for a in 0..6 {
                sq[a] += e[a] * e[a];
                total[a] += e[a] * e[a];
            }
            count += 1;
        }
        fold_rmse.push(sq.map(|s| (s / count as f64).sqrt()));
    }
    Ok(CvReport {
        folds,
        lambda,
        rmse: total.map(|s| (s / n as f64).sqrt()),
        fold_rmse,
    })
}

/// Per-axis load scale for calibration schedules.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoadScale {
    pub force: f64,
    pub torque: f64,
}

impl Default for LoadScale {
    /// Keeps the default lattice well inside its small-strain bound.
    fn default() -> Self {
        LoadScale {
            force: 2.0,
            torque: 0.02,
        }
    }
}

impl LoadScale {
    pub fn axis(&self, a: usize) -> f64 {
        if a < 3 {
            self.force
        } else {
            self.torque
        }
    }
}

pub const SCHEDULE_MAGNITUDES: [f64; 4] = [0.25, 0.5, 1.0, 2.0];

/// 6 axes × 4 magnitudes × both signs, then uniformly random combinations
/// in `[-scale, scale]⁶` up to `total` loads.
pub fn calibration_schedule(total: usize, scale: LoadScale, seed: u64) -> Vec<Wrench6D> {
    let mut out = Vec::with_capacity(total.max(48));
    for a in 0..6 {
        for mag in SCHEDULE_MAGNITUDES {
            for sign in [1.0, -1.0] {
                let mut v = [0.0; 6];
                v[a] = sign * mag * 0.5 * scale.axis(a);
                out.push(Wrench6D::from_array(v));
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    while out.len() < total {
        out.push(random_wrench(&mut rng, scale));
    }
    out
}

pub fn random_wrench(rng: &mut impl Rng, scale: LoadScale) -> Wrench6D {
    Wrench6D::from_array(std::array::from_fn(|a| rng.random_range(-1.0..=1.0) * scale.axis(a)))
}

/// Renders every scheduled load through the fingertip forward model.
pub fn generate_calibration(
    tip: &Fingertip,
    schedule: &[Wrench6D],
    noise_sigma: f64,
    seed: u64,
) -> Result<CalibrationSet, WrenchError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cs = CalibrationSet::new(tip.reference()?);
    for (i, w) in schedule.iter().enumerate() {
        let ms = tip.observe_noisy(w, Timestamp(i as i64), noise_sigma, &mut rng)?;
        cs.push(ms, *w);
    }
    Ok(cs)
}
