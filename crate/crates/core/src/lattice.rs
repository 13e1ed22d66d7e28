//! Linear spring-lattice fingertip and the in-finger camera that watches it.
//!
//! Nodes are 3-D points, edges are linear springs. Under small strain each
//! spring contributes `k d̂d̂ᵀ` coupling its endpoints, so equilibrium is the
//! linear system `K u = f` restricted to free degrees of freedom.

use std::collections::VecDeque;
use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, Matrix3, SymmetricEigen, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pose::Pose6D;
use crate::types::{Timestamp, Wrench6D};

pub const DEFAULT_MAX_STRAIN: f64 = 0.1;

#[derive(Debug, Error, PartialEq)]
pub enum LatticeError {
    #[error("invalid lattice: {0}")]
    Construction(String),
    #[error("lattice model error: {0}")]
    Model(String),
    #[error("load exceeds small-strain bound: strain {strain:.4} on edge {edge} > {limit}")]
    Range { edge: usize, strain: f64, limit: f64 },
    #[error("marker {marker} has non-positive depth {depth} in the camera frame")]
    Projection { marker: usize, depth: f64 },
    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: usize, got: usize },
    #[error("config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub i: usize,
    pub j: usize,
    pub stiffness: f64,
}

/// 2-D pixel observations of the marker nodes, ordered by marker index.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MarkerSet {
    pub timestamp: Timestamp,
    pub points: Vec<[f64; 2]>,
}

impl MarkerSet {
    pub fn new(timestamp: Timestamp, points: Vec<[f64; 2]>) -> Self {
        MarkerSet { timestamp, points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// `vec(self − reference)` as `[u0, v0, u1, v1, ...]`.
    pub fn displacement_from(&self, reference: &MarkerSet) -> Result<DVector<f64>, LatticeError> {
        if self.points.len() != reference.points.len() {
            return Err(LatticeError::Shape {
                expected: reference.points.len(),
                got: self.points.len(),
            });
        }
        Ok(DVector::from_iterator(
            2 * self.points.len(),
            self.points
                .iter()
                .zip(&reference.points)
                .flat_map(|(p, r)| [p[0] - r[0], p[1] - r[1]]),
        ))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatticeModel {
    pub nodes: Vec<Vector3<f64>>,
    pub edges: Vec<Edge>,
    pub fixed: Vec<usize>,
    pub contact: Vec<usize>,
    pub markers: Vec<usize>,
    /// Largest admissible axial strain of any spring.
    pub max_strain: f64,
}

impl LatticeModel {
    pub fn new(
        nodes: Vec<Vector3<f64>>,
        edges: Vec<Edge>,
        fixed: Vec<usize>,
        contact: Vec<usize>,
        markers: Vec<usize>,
    ) -> Result<Self, LatticeError> {
        let m = LatticeModel {
            nodes,
            edges,
            fixed,
            contact,
            markers,
            max_strain: DEFAULT_MAX_STRAIN,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn with_max_strain(mut self, max_strain: f64) -> Self {
        self.max_strain = max_strain;
        self
    }

    pub fn validate(&self) -> Result<(), LatticeError> {
        let n = self.nodes.len();
        let bad = |s: String| Err(LatticeError::Construction(s));
        if n == 0 {
            return bad("no nodes".into());
        }
        if self.nodes.iter().any(|p| !p.iter().all(|v| v.is_finite())) {
            return bad("non-finite node position".into());
        }
        for (e, edge) in self.edges.iter().enumerate() {
            if edge.i >= n || edge.j >= n || edge.i == edge.j {
                return bad(format!("edge {e} has bad endpoints ({}, {})", edge.i, edge.j));
            }
            if !(edge.stiffness > 0.0 && edge.stiffness.is_finite()) {
                return bad(format!("edge {e} stiffness {} must be positive", edge.stiffness));
            }
            if (self.nodes[edge.j] - self.nodes[edge.i]).norm() == 0.0 {
                return bad(format!("edge {e} has zero rest length"));
            }
        }
        if self.fixed.is_empty() {
            return bad("no fixed nodes".into());
        }
        for (name, set) in [("fixed", &self.fixed), ("contact", &self.contact), ("marker", &self.markers)] {
            if let Some(&i) = set.iter().find(|&&i| i >= n) {
                return bad(format!("{name} node {i} out of range"));
            }
        }
        let fixed = self.fixed_mask();
        if let Some(&i) = self.contact.iter().find(|&&i| fixed[i]) {
            return bad(format!("contact node {i} is fixed"));
        }
        if self.contact.is_empty() {
            return bad("no contact nodes".into());
        }
        if !(self.max_strain > 0.0) {
            return bad("max_strain must be positive".into());
        }
        if let Some(i) = self.ungrounded_node() {
            return Err(LatticeError::Model(format!("node {i} is not connected to any fixed node")));
        }
        Ok(())
    }

    fn fixed_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.nodes.len()];
        for &i in &self.fixed {
            mask[i] = true;
        }
        mask
    }

    /// First free node with no spring path to a fixed node.
    pub fn ungrounded_node(&self) -> Option<usize> {
        let n = self.nodes.len();
        let mut adj = vec![Vec::new(); n];
        for e in &self.edges {
            adj[e.i].push(e.j);
            adj[e.j].push(e.i);
        }
        let mut seen = self.fixed_mask();
        let mut queue: VecDeque<usize> = self.fixed.iter().copied().collect();
        while let Some(i) = queue.pop_front() {
            for &j in &adj[i] {
                if !seen[j] {
                    seen[j] = true;
                    queue.push_back(j);
                }
            }
        }
        seen.iter().position(|s| !s)
    }

    pub fn is_grounded(&self) -> bool {
        self.ungrounded_node().is_none()
    }

    pub fn rest_length(&self, e: usize) -> f64 {
        let edge = &self.edges[e];
        (self.nodes[edge.j] - self.nodes[edge.i]).norm()
    }

    /// Full `3n × 3n` stiffness matrix.
    pub fn stiffness_matrix(&self) -> DMatrix<f64> {
        let n = self.nodes.len();
        let mut k = DMatrix::zeros(3 * n, 3 * n);
        for e in &self.edges {
            let d = (self.nodes[e.j] - self.nodes[e.i]).normalize();
            let block: Matrix3<f64> = e.stiffness * d * d.transpose();
            for (a, b, sign) in [(e.i, e.i, 1.0), (e.j, e.j, 1.0), (e.i, e.j, -1.0), (e.j, e.i, -1.0)] {
                let mut view = k.fixed_view_mut::<3, 3>(3 * a, 3 * b);
                view += block * sign;
            }
        }
        k
    }

    /// Free-node index list; the free DOFs are `3·idx .. 3·idx + 3`.
    pub fn free_nodes(&self) -> Vec<usize> {
        let fixed = self.fixed_mask();
        (0..self.nodes.len()).filter(|&i| !fixed[i]).collect()
    }

    pub fn free_stiffness(&self) -> DMatrix<f64> {
        let free = self.free_nodes();
        let k = self.stiffness_matrix();
        let dofs: Vec<usize> = free.iter().flat_map(|&i| [3 * i, 3 * i + 1, 3 * i + 2]).collect();
        DMatrix::from_fn(dofs.len(), dofs.len(), |r, c| k[(dofs[r], dofs[c])])
    }

    pub fn contact_centroid(&self) -> Vector3<f64> {
        let sum: Vector3<f64> = self.contact.iter().map(|&i| self.nodes[i]).sum();
        sum / self.contact.len() as f64
    }

    /// External wrench as a `3n` nodal force vector: the force is split
    /// equally over the contact nodes and the torque is carried by the
    /// minimum-norm force set about the contact centroid, which has zero
    /// resultant.
    pub fn nodal_forces(&self, w: &Wrench6D) -> Result<DVector<f64>, LatticeError> {
        if !w.is_finite() {
            return Err(LatticeError::Model("non-finite wrench".into()));
        }
        let n = self.nodes.len();
        let mut f = DVector::zeros(3 * n);
        let share = w.force / self.contact.len() as f64;
        for &i in &self.contact {
            f.fixed_rows_mut::<3>(3 * i).copy_from(&share);
        }
        if w.torque != Vector3::zeros() {
            let c = self.contact_centroid();
            // B Bᵀ = Σ (|r|² I − r rᵀ)
            let mut inertia = Matrix3::zeros();
            for &i in &self.contact {
                let r = self.nodes[i] - c;
                inertia += Matrix3::identity() * r.norm_squared() - r * r.transpose();
            }
            let lambda = inertia.try_inverse().ok_or_else(|| {
                LatticeError::Model("contact nodes are collinear; torque cannot be applied".into())
            })? * w.torque;
            for &i in &self.contact {
                let r = self.nodes[i] - c;
                let mut fi = f.fixed_rows_mut::<3>(3 * i);
                fi += lambda.cross(&r);
            }
        }
        Ok(f)
    }

    /// Largest axial strain over all springs and the edge carrying it.
    pub fn max_edge_strain(&self, d: &Deformation) -> (usize, f64) {
        let mut worst = (0, 0.0);
        for (e, edge) in self.edges.iter().enumerate() {
            let rest = self.nodes[edge.j] - self.nodes[edge.i];
            let len = rest.norm();
            let du = d.displacements[edge.j] - d.displacements[edge.i];
            let strain = (rest.dot(&du) / len).abs() / len;
            if strain > worst.1 {
                worst = (e, strain);
            }
        }
        worst
    }

    /// `λ_max / λ_min` of the free stiffness; infinite when singular.
    pub fn condition_number(&self) -> f64 {
        let eig = SymmetricEigen::new(self.free_stiffness()).eigenvalues;
        let max = eig.max();
        let min = eig.min();
        if min <= max * 1e-14 {
            f64::INFINITY
        } else {
            max / min
        }
    }

    /// Attempted Cholesky factorization of the free stiffness.
    pub fn is_positive_definite(&self) -> bool {
        Cholesky::new(self.free_stiffness()).is_some()
    }

    pub fn marker_rest_positions(&self) -> Vec<Vector3<f64>> {
        self.markers.iter().map(|&i| self.nodes[i]).collect()
    }
}

/// Regular `nx × ny × nz` grid, centered in x/y with the base at z = 0.
/// Springs join axis neighbours and both diagonals of every cell face. The
/// bottom layer is fixed, the top layer takes contact, and markers sit on the
/// interior layers (on the top layer when `nz = 2`).
pub fn build_grid_lattice(nx: usize, ny: usize, nz: usize, spacing: f64, k: f64) -> Result<LatticeModel, LatticeError> {
    if nx < 2 || ny < 2 || nz < 2 {
        return Err(LatticeError::Construction(format!("grid {nx}×{ny}×{nz} needs at least 2 per axis")));
    }
    if !(spacing > 0.0 && spacing.is_finite()) || !(k > 0.0 && k.is_finite()) {
        return Err(LatticeError::Construction("spacing and stiffness must be positive".into()));
    }
    let idx = |x: usize, y: usize, z: usize| (z * ny + y) * nx + x;
    let ox = 0.5 * (nx - 1) as f64 * spacing;
    let oy = 0.5 * (ny - 1) as f64 * spacing;
    let mut nodes = Vec::with_capacity(nx * ny * nz);
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                nodes.push(Vector3::new(
                    x as f64 * spacing - ox,
                    y as f64 * spacing - oy,
                    z as f64 * spacing,
                ));
            }
        }
    }
    const OFFSETS: [[i64; 3]; 9] = [
        [1, 0, 0],
        [0, 1, 0],
        [0, 0, 1],
        [1, 1, 0],
        [1, -1, 0],
        [1, 0, 1],
        [1, 0, -1],
        [0, 1, 1],
        [0, 1, -1],
    ];
    let mut edges = Vec::new();
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                for o in OFFSETS {
                    let (x2, y2, z2) = (x as i64 + o[0], y as i64 + o[1], z as i64 + o[2]);
                    if x2 < 0 || y2 < 0 || z2 < 0 || x2 >= nx as i64 || y2 >= ny as i64 || z2 >= nz as i64 {
                        continue;
                    }
                    edges.push(Edge {
                        i: idx(x, y, z),
                        j: idx(x2 as usize, y2 as usize, z2 as usize),
                        stiffness: k,
                    });
                }
            }
        }
    }
    let layer = |z: usize| -> Vec<usize> { (0..nx * ny).map(|i| z * nx * ny + i).collect() };
    let markers = if nz == 2 {
        layer(1)
    } else {
        (1..nz - 1).flat_map(layer).collect()
    };
    LatticeModel::new(nodes, edges, layer(0), layer(nz - 1), markers)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Deformation {
    pub displacements: Vec<Vector3<f64>>,
}

impl Deformation {
    pub fn zero(n: usize) -> Self {
        Deformation {
            displacements: vec![Vector3::zeros(); n],
        }
    }

    pub fn from_flat(u: &DVector<f64>) -> Self {
        Deformation {
            displacements: (0..u.len() / 3)
                .map(|i| Vector3::new(u[3 * i], u[3 * i + 1], u[3 * i + 2]))
                .collect(),
        }
    }

    pub fn to_flat(&self) -> DVector<f64> {
        DVector::from_iterator(
            3 * self.displacements.len(),
            self.displacements.iter().flat_map(|d| [d.x, d.y, d.z]),
        )
    }
}

enum Factor {
    Cholesky(Cholesky<f64, Dyn>),
    /// Mechanisms (singular but connected): minimum-norm solutions for
    /// loads in the range of K.
    PseudoInverse { kff: DMatrix<f64>, pinv: DMatrix<f64> },
}

/// Factorizes the free stiffness once and solves many load cases.
pub struct EquilibriumSolver {
    model: LatticeModel,
    free: Vec<usize>,
    factor: Factor,
}

impl EquilibriumSolver {
    pub fn new(model: LatticeModel) -> Result<Self, LatticeError> {
        model.validate()?;
        let free = model.free_nodes();
        let kff = model.free_stiffness();
        let factor = match Cholesky::new(kff.clone()) {
            Some(c) => Factor::Cholesky(c),
            None => {
                let scale = kff.amax().max(f64::MIN_POSITIVE);
                let pinv = kff
                    .clone()
                    .pseudo_inverse(scale * 1e-12)
                    .map_err(|e| LatticeError::Model(e.to_string()))?;
                Factor::PseudoInverse { kff, pinv }
            }
        };
        Ok(EquilibriumSolver { model, free, factor })
    }

    pub fn model(&self) -> &LatticeModel {
        &self.model
    }

    pub fn is_positive_definite(&self) -> bool {
        matches!(self.factor, Factor::Cholesky(_))
    }

    pub fn solve(&self, w: &Wrench6D) -> Result<Deformation, LatticeError> {
        let f = self.model.nodal_forces(w)?;
        self.solve_forces(&f)
    }

    /// Solves for a raw `3n` nodal force vector. Forces on fixed nodes are
    /// reactions and are ignored.
    pub fn solve_forces(&self, f: &DVector<f64>) -> Result<Deformation, LatticeError> {
        let n = self.model.nodes.len();
        if f.len() != 3 * n {
            return Err(LatticeError::Shape {
                expected: 3 * n,
                got: f.len(),
            });
        }
        let ff = DVector::from_iterator(
            3 * self.free.len(),
            self.free.iter().flat_map(|&i| [f[3 * i], f[3 * i + 1], f[3 * i + 2]]),
        );
        let uf = match &self.factor {
            Factor::Cholesky(c) => c.solve(&ff),
            Factor::PseudoInverse { kff, pinv } => {
                let u = pinv * &ff;
                let resid = (kff * &u - &ff).norm();
                if resid > 1e-9 * ff.norm().max(f64::MIN_POSITIVE) {
                    return Err(LatticeError::Model(format!(
                        "stiffness is singular and the load excites a mechanism (residual {resid:.3e})"
                    )));
                }
                u
            }
        };
        let mut d = Deformation::zero(n);
        for (k, &i) in self.free.iter().enumerate() {
            d.displacements[i] = Vector3::new(uf[3 * k], uf[3 * k + 1], uf[3 * k + 2]);
        }
        let (edge, strain) = self.model.max_edge_strain(&d);
        if strain > self.model.max_strain {
            return Err(LatticeError::Range {
                edge,
                strain,
                limit: self.model.max_strain,
            });
        }
        Ok(d)
    }
}

/// One-shot solve. Prefer [`EquilibriumSolver`] for repeated loads.
pub fn solve_equilibrium(m: &LatticeModel, w: &Wrench6D) -> Result<Deformation, LatticeError> {
    EquilibriumSolver::new(m.clone())?.solve(w)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Projection {
    /// First-order expansion of the pinhole model about the rest
    /// configuration; exactly linear in the displacement.
    #[default]
    Linearized,
    /// Full pinhole division by the displaced depth.
    Perspective,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Camera pose in the fingertip frame; the optical axis is camera +z.
    pub pose: Pose6D,
    pub width: u32,
    pub height: u32,
    pub projection: Projection,
}

impl Default for CameraModel {
    /// 640×480, f = 500 px, 15 mm below the lattice base looking up.
    fn default() -> Self {
        CameraModel {
            fx: 500.0,
            fy: 500.0,
            cx: 320.0,
            cy: 240.0,
            pose: Pose6D::from_translation(0.0, 0.0, -0.015),
            width: 640,
            height: 480,
            projection: Projection::Linearized,
        }
    }
}

impl CameraModel {
    pub fn validate(&self) -> Result<(), LatticeError> {
        if !(self.fx > 0.0 && self.fy > 0.0) || !self.cx.is_finite() || !self.cy.is_finite() {
            return Err(LatticeError::Construction("focal lengths must be positive".into()));
        }
        if !self.pose.is_finite() {
            return Err(LatticeError::Construction("camera pose is not finite".into()));
        }
        Ok(())
    }

    pub fn to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        let inv = self.pose.orientation().inverse();
        inv * (p - self.pose.position())
    }

    /// Pixel of a camera-frame point.
    pub fn pinhole(&self, p: &Vector3<f64>) -> [f64; 2] {
        [self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy]
    }
}

pub fn project_markers(m: &LatticeModel, d: &Deformation, c: &CameraModel) -> Result<MarkerSet, LatticeError> {
    project_markers_at(m, d, c, Timestamp::ZERO)
}

pub fn project_markers_at(
    m: &LatticeModel,
    d: &Deformation,
    c: &CameraModel,
    timestamp: Timestamp,
) -> Result<MarkerSet, LatticeError> {
    if d.displacements.len() != m.nodes.len() {
        return Err(LatticeError::Shape {
            expected: m.nodes.len(),
            got: d.displacements.len(),
        });
    }
    let rot = c.pose.orientation().inverse();
    let mut points = Vec::with_capacity(m.markers.len());
    for (k, &i) in m.markers.iter().enumerate() {
        let rest = c.to_camera(&m.nodes[i]);
        let du = rot * d.displacements[i];
        let moved = rest + du;
        for depth in [rest.z, moved.z] {
            if !(depth > 0.0) {
                return Err(LatticeError::Projection { marker: k, depth });
            }
        }
        points.push(match c.projection {
            Projection::Perspective => c.pinhole(&moved),
            Projection::Linearized => {
                let z = rest.z;
                let base = c.pinhole(&rest);
                [
                    base[0] + c.fx * (du.x / z - rest.x * du.z / (z * z)),
                    base[1] + c.fy * (du.y / z - rest.y * du.z / (z * z)),
                ]
            }
        });
    }
    Ok(MarkerSet { timestamp, points })
}

/// Fingertip forward model with a cached factorization.
pub struct Fingertip {
    pub solver: EquilibriumSolver,
    pub camera: CameraModel,
}

impl Fingertip {
    pub fn new(model: LatticeModel, camera: CameraModel) -> Result<Self, LatticeError> {
        camera.validate()?;
        Ok(Fingertip {
            solver: EquilibriumSolver::new(model)?,
            camera,
        })
    }

    pub fn model(&self) -> &LatticeModel {
        self.solver.model()
    }

    pub fn reference(&self) -> Result<MarkerSet, LatticeError> {
        project_markers(self.model(), &Deformation::zero(self.model().nodes.len()), &self.camera)
    }

    pub fn observe(&self, w: &Wrench6D, timestamp: Timestamp) -> Result<MarkerSet, LatticeError> {
        let d = self.solver.solve(w)?;
        project_markers_at(self.model(), &d, &self.camera, timestamp)
    }

    /// Noisy observation with a caller-owned RNG, for streams of frames.
    pub fn observe_noisy(
        &self,
        w: &Wrench6D,
        timestamp: Timestamp,
        noise_sigma: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<MarkerSet, LatticeError> {
        let mut ms = self.observe(w, timestamp)?;
        add_noise(&mut ms, noise_sigma, rng)?;
        Ok(ms)
    }
}

fn add_noise(ms: &mut MarkerSet, sigma: f64, rng: &mut ChaCha8Rng) -> Result<(), LatticeError> {
    if sigma == 0.0 {
        return Ok(());
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| LatticeError::Config(format!("noise sigma: {e}")))?;
    for p in &mut ms.points {
        p[0] += normal.sample(rng);
        p[1] += normal.sample(rng);
    }
    Ok(())
}

/// `project_markers(solve_equilibrium(w))` plus i.i.d. Gaussian pixel noise.
pub fn render_observation(
    m: &LatticeModel,
    w: &Wrench6D,
    c: &CameraModel,
    noise_sigma: f64,
    seed: u64,
) -> Result<MarkerSet, LatticeError> {
    let d = solve_equilibrium(m, w)?;
    let mut ms = project_markers(m, &d, c)?;
    add_noise(&mut ms, noise_sigma, &mut ChaCha8Rng::seed_from_u64(seed))?;
    Ok(ms)
}

/// TOML fingertip description:
///
/// ```toml
/// [lattice]
/// nx = 5
/// ny = 5
/// nz = 2
/// spacing = 0.005      # m
/// stiffness = 800.0    # N/m
/// max_strain = 0.1
///
/// [camera]
/// fx = 500.0
/// fy = 500.0
/// cx = 320.0
/// cy = 240.0
/// width = 640
/// height = 480
/// position = [0.0, 0.0, -0.015]
/// orientation = [1.0, 0.0, 0.0, 0.0]   # w, x, y, z
/// projection = "linearized"            # or "perspective"
/// ```
///
/// Every key is optional and defaults to the values shown.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FingertipConfig {
    pub lattice: GridConfig,
    pub camera: CameraConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
    pub spacing: f64,
    pub stiffness: f64,
    pub max_strain: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            nx: 5,
            ny: 5,
            nz: 2,
            spacing: 0.005,
            stiffness: 800.0,
            max_strain: DEFAULT_MAX_STRAIN,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CameraConfig {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    pub position: [f64; 3],
    pub orientation: [f64; 4],
    pub projection: Projection,
}

impl Default for CameraConfig {
    fn default() -> Self {
        CameraConfig {
            fx: 500.0,
            fy: 500.0,
            cx: 320.0,
            cy: 240.0,
            width: 640,
            height: 480,
            position: [0.0, 0.0, -0.015],
            orientation: [1.0, 0.0, 0.0, 0.0],
            projection: Projection::Linearized,
        }
    }
}

impl FingertipConfig {
    pub fn from_toml(text: &str) -> Result<Self, LatticeError> {
        toml::from_str(text).map_err(|e| LatticeError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, LatticeError> {
        let text = std::fs::read_to_string(path).map_err(|e| LatticeError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn lattice(&self) -> Result<LatticeModel, LatticeError> {
        let g = &self.lattice;
        Ok(build_grid_lattice(g.nx, g.ny, g.nz, g.spacing, g.stiffness)?.with_max_strain(g.max_strain))
    }

    pub fn camera(&self) -> Result<CameraModel, LatticeError> {
        let c = &self.camera;
        let pose = Pose6D::from_arrays(c.position, c.orientation).map_err(|e| LatticeError::Config(e.to_string()))?;
        let cam = CameraModel {
            fx: c.fx,
            fy: c.fy,
            cx: c.cx,
            cy: c.cy,
            pose,
            width: c.width,
            height: c.height,
            projection: c.projection,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn fingertip(&self) -> Result<Fingertip, LatticeError> {
        Fingertip::new(self.lattice()?, self.camera()?)
    }
}
