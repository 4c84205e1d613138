//! Odour transport on a uniform 3-D finite-volume grid.
//!
//! Explicit Euler in time, first-order upwind convection, central diffusion with a constant
//! effective diffusivity (molecular plus eddy). The carrier velocity is prescribed on cell faces
//! and is discretely divergence-free for the closed-room and throughflow fields, so the scheme
//! conserves mass to rounding. Inlet cells are held at their concentration while the source emits;
//! outlet faces are zero-gradient outflow. Axis 2 (`z`) is vertical.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::time::Instant;
use thiserror::Error;

/// Citral in air, m^2/s.
pub const CITRAL_DIFFUSIVITY: f64 = 8.23e-5;
pub const DEFAULT_EDDY_DIFFUSIVITY: f64 = 1e-3;
const GRAVITY: f64 = 9.81;
/// Tolerance on the stability numbers.
const STABILITY_SLACK: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TransportError {
    #[error("domain extent must be positive on every axis, got {0:?}")]
    DomainDegenerate([f64; 3]),
    #[error("mesh needs at least 8 cells, asked for {0}")]
    TooFewCells(usize),
    #[error("invalid scene: {0}")]
    InvalidScene(String),
    #[error("dt = {dt} is unstable (CFL {cfl:.4}, diffusion number {diffusion:.4}, combined {combined:.4})")]
    UnstableStep {
        dt: f64,
        cfl: f64,
        diffusion: f64,
        combined: f64,
    },
    #[error("probe {0:?} lies outside the domain")]
    ProbeOutside([f64; 3]),
    #[error("series are sampled on different grids")]
    GridMismatch,
    #[error("wall time for level {0} is not positive")]
    ZeroTime(u32),
    #[error("cost report has no levels")]
    EmptyReport,
    #[error("field does not match the mesh ({0} values for {1} cells)")]
    FieldSize(usize, usize),
    #[error("flow solve did not converge (residual {0:e})")]
    FlowSolve(f64),
    #[error("io: {0}")]
    Io(String),
}

/// Axis-aligned box, metres.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Region {
    fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] && p[a] <= self.max[a])
    }

    fn centre(&self) -> [f64; 3] {
        [0, 1, 2].map(|a| 0.5 * (self.min[a] + self.max[a]))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InletPatch {
    pub region: Region,
    /// Inflow speed through the patch's wall faces, m/s (throughflow fields only).
    #[serde(default)]
    pub velocity: f64,
    /// ppm.
    pub concentration: f64,
    /// Emission stops after this many seconds; `None` emits forever.
    #[serde(default)]
    pub release_s: Option<f64>,
}

impl InletPatch {
    fn active(&self, t: f64) -> bool {
        self.release_s.is_none_or(|r| t < r)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum VelocityField {
    /// Constant draft; every wall face is open.
    Uniform { velocity: [f64; 3] },
    /// Potential flow from the inlet wall faces to the outlet wall faces.
    PrescribedAnalytic,
    /// Closed-room convection cells rising over the domain centre, driven by a source-to-ambient
    /// temperature difference (kelvin).
    BuoyancyPlume { delta_t: f64 },
}

fn default_pressure() -> f64 {
    101_325.0
}
fn default_temperature() -> f64 {
    293.15
}
fn default_molecular() -> f64 {
    CITRAL_DIFFUSIVITY
}
fn default_eddy() -> f64 {
    DEFAULT_EDDY_DIFFUSIVITY
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    #[serde(default)]
    pub name: String,
    /// Metres along x, y, z.
    pub extent: [f64; 3],
    pub inlets: Vec<InletPatch>,
    #[serde(default)]
    pub outlets: Vec<Region>,
    pub velocity_field: VelocityField,
    /// Pa; recorded, not used by the incompressible solver.
    #[serde(default = "default_pressure")]
    pub ambient_pressure: f64,
    /// K.
    #[serde(default = "default_temperature")]
    pub ambient_temperature: f64,
    #[serde(default = "default_molecular")]
    pub molecular_diffusivity: f64,
    #[serde(default = "default_eddy")]
    pub eddy_diffusivity: f64,
    /// Default probe position.
    #[serde(default)]
    pub probe: Option<[f64; 3]>,
}

impl SceneSpec {
    pub fn from_toml_str(text: &str) -> Result<Self, TransportError> {
        let scene: SceneSpec = toml::from_str(text).map_err(|e| TransportError::InvalidScene(e.to_string()))?;
        scene.validate()?;
        Ok(scene)
    }

    pub fn load(path: &Path) -> Result<Self, TransportError> {
        let text = std::fs::read_to_string(path).map_err(|e| TransportError::Io(e.to_string()))?;
        Self::from_toml_str(&text)
    }

    pub fn d_eff(&self) -> f64 {
        self.molecular_diffusivity + self.eddy_diffusivity
    }

    pub fn validate(&self) -> Result<(), TransportError> {
        if !self.extent.iter().all(|&e| e > 0.0 && e.is_finite()) {
            return Err(TransportError::DomainDegenerate(self.extent));
        }
        let bad = |m: String| Err(TransportError::InvalidScene(m));
        if self.inlets.is_empty() {
            return bad("at least one inlet is required".into());
        }
        let inside = |r: &Region| (0..3).all(|a| 0.0 <= r.min[a] && r.min[a] <= r.max[a] && r.max[a] <= self.extent[a]);
        for (n, inlet) in self.inlets.iter().enumerate() {
            if !inside(&inlet.region) {
                return bad(format!("inlet {n} leaves the domain"));
            }
            if !(inlet.concentration >= 0.0) || !(inlet.velocity >= 0.0) {
                return bad(format!("inlet {n} needs non-negative concentration and velocity"));
            }
        }
        if let Some(n) = self.outlets.iter().position(|r| !inside(r)) {
            return bad(format!("outlet {n} leaves the domain"));
        }
        if !(self.molecular_diffusivity >= 0.0 && self.eddy_diffusivity >= 0.0) {
            return bad("diffusivities must be non-negative".into());
        }
        if let VelocityField::BuoyancyPlume { delta_t } = self.velocity_field {
            if !(delta_t >= 0.0) || !(self.ambient_temperature > 0.0) {
                return bad("plume needs delta_t >= 0 and a positive ambient temperature".into());
            }
        }
        Ok(())
    }

    fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).all(|a| p[a] >= 0.0 && p[a] <= self.extent[a])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mesh {
    pub extent: [f64; 3],
    pub resolution: [usize; 3],
    pub spacing: [f64; 3],
    pub cell_volume: f64,
    pub total_cells: usize,
    pub refinement_level: u32,
}

impl Mesh {
    pub fn new(extent: [f64; 3], resolution: [usize; 3], refinement_level: u32) -> Result<Self, TransportError> {
        if !extent.iter().all(|&e| e > 0.0 && e.is_finite()) {
            return Err(TransportError::DomainDegenerate(extent));
        }
        let total_cells = resolution.iter().product();
        if resolution.contains(&0) {
            return Err(TransportError::TooFewCells(total_cells));
        }
        let spacing = [0, 1, 2].map(|a| extent[a] / resolution[a] as f64);
        Ok(Self {
            extent,
            resolution,
            spacing,
            cell_volume: spacing.iter().product(),
            total_cells,
            refinement_level,
        })
    }

    /// Splits every cell `factor` times along each axis.
    pub fn refine(&self, factor: usize) -> Self {
        Self::new(
            self.extent,
            self.resolution.map(|n| n * factor.max(1)),
            self.refinement_level + 1,
        )
        .expect("refining a valid mesh")
    }

    #[inline]
    pub fn cell(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.resolution[0] * (j + self.resolution[1] * k)
    }

    pub fn centre(&self, i: usize, j: usize, k: usize) -> [f64; 3] {
        let h = self.spacing;
        [(i as f64 + 0.5) * h[0], (j as f64 + 0.5) * h[1], (k as f64 + 0.5) * h[2]]
    }

    /// Cell containing `p` (clamped to the grid).
    pub fn locate(&self, p: [f64; 3]) -> [usize; 3] {
        [0, 1, 2].map(|a| ((p[a] / self.spacing[a]).floor().max(0.0) as usize).min(self.resolution[a] - 1))
    }

    fn coords(&self, c: usize) -> [usize; 3] {
        let [nx, ny, _] = self.resolution;
        [c % nx, (c / nx) % ny, c / (nx * ny)]
    }
}

/// Per-axis resolution proportional to the domain's aspect, with `total_cells` within a factor
/// of two of `target_cells`.
pub fn build_mesh(scene: &SceneSpec, target_cells: usize) -> Result<Mesh, TransportError> {
    let e = scene.extent;
    if !e.iter().all(|&v| v > 0.0 && v.is_finite()) {
        return Err(TransportError::DomainDegenerate(e));
    }
    if target_cells < 8 {
        return Err(TransportError::TooFewCells(target_cells));
    }
    let volume: f64 = e.iter().product();
    let base = (target_cells as f64 / volume).cbrt();
    let target = target_cells as f64;
    // scan cells-per-metre around the ideal; keep the closest total in log terms
    let mut best: Option<([usize; 3], f64)> = None;
    for step in -40..=40 {
        let s = base * (1.0 + 0.01 * f64::from(step));
        let res = e.map(|l| ((l * s).round() as usize).max(1));
        let total = res.iter().product::<usize>() as f64;
        let score = (total / target).ln().abs() + 1e-3 * f64::from(step).abs() / 40.0;
        if best.as_ref().is_none_or(|(_, b)| score < *b) {
            best = Some((res, score));
        }
    }
    let (res, _) = best.expect("scan is non-empty");
    let total: usize = res.iter().product();
    if (total as f64) < target / 2.0 || (total as f64) > target * 2.0 {
        return Err(TransportError::InvalidScene(format!(
            "cannot fit {target_cells} cells to extent {e:?} within a factor of 2"
        )));
    }
    Mesh::new(e, res, 0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalarField {
    /// ppm per cell.
    pub concentration: Vec<f64>,
    pub time: f64,
}

impl ScalarField {
    pub fn zeros(mesh: &Mesh) -> Self {
        Self {
            concentration: vec![0.0; mesh.total_cells],
            time: 0.0,
        }
    }

    /// ppm * m^3, summed in cell order.
    pub fn mass(&self, mesh: &Mesh) -> f64 {
        self.concentration.iter().sum::<f64>() * mesh.cell_volume
    }
}

/// Normal face velocities on the staggered grid (m/s, positive along the axis).
#[derive(Debug, Clone, PartialEq)]
pub struct FaceVelocities {
    pub ux: Vec<f64>,
    pub uy: Vec<f64>,
    pub uz: Vec<f64>,
}

fn face_x(m: &Mesh, i: usize, j: usize, k: usize) -> usize {
    i + (m.resolution[0] + 1) * (j + m.resolution[1] * k)
}
fn face_y(m: &Mesh, i: usize, j: usize, k: usize) -> usize {
    i + m.resolution[0] * (j + (m.resolution[1] + 1) * k)
}
fn face_z(m: &Mesh, i: usize, j: usize, k: usize) -> usize {
    i + m.resolution[0] * (j + m.resolution[1] * k)
}

impl FaceVelocities {
    fn zeros(m: &Mesh) -> Self {
        let [nx, ny, nz] = m.resolution;
        Self {
            ux: vec![0.0; (nx + 1) * ny * nz],
            uy: vec![0.0; nx * (ny + 1) * nz],
            uz: vec![0.0; nx * ny * (nz + 1)],
        }
    }

    /// Net outflow volume rate of each cell divided by its volume (1/s).
    pub fn divergence(&self, m: &Mesh) -> Vec<f64> {
        let [nx, ny, nz] = m.resolution;
        let h = m.spacing;
        let mut out = vec![0.0; m.total_cells];
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    out[m.cell(i, j, k)] = (self.ux[face_x(m, i + 1, j, k)] - self.ux[face_x(m, i, j, k)]) / h[0]
                        + (self.uy[face_y(m, i, j + 1, k)] - self.uy[face_y(m, i, j, k)]) / h[1]
                        + (self.uz[face_z(m, i, j, k + 1)] - self.uz[face_z(m, i, j, k)]) / h[2];
                }
            }
        }
        out
    }
}

fn patch_cells(mesh: &Mesh, region: &Region) -> Vec<usize> {
    let [nx, ny, nz] = mesh.resolution;
    let mut cells = Vec::new();
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                if region.contains(mesh.centre(i, j, k)) {
                    cells.push(mesh.cell(i, j, k));
                }
            }
        }
    }
    if cells.is_empty() {
        // patch thinner than a cell: take the cell holding its centre
        let [i, j, k] = mesh.locate(region.centre());
        cells.push(mesh.cell(i, j, k));
    }
    cells
}

/// Wall faces of `cells`: (axis, face index, outward sign).
fn wall_faces(mesh: &Mesh, cells: &[usize]) -> Vec<(usize, usize, f64)> {
    let [nx, ny, nz] = mesh.resolution;
    let mut faces = Vec::new();
    for &c in cells {
        let [i, j, k] = mesh.coords(c);
        if i == 0 {
            faces.push((0, face_x(mesh, 0, j, k), -1.0));
        }
        if i + 1 == nx {
            faces.push((0, face_x(mesh, nx, j, k), 1.0));
        }
        if j == 0 {
            faces.push((1, face_y(mesh, i, 0, k), -1.0));
        }
        if j + 1 == ny {
            faces.push((1, face_y(mesh, i, ny, k), 1.0));
        }
        if k == 0 {
            faces.push((2, face_z(mesh, i, j, 0), -1.0));
        }
        if k + 1 == nz {
            faces.push((2, face_z(mesh, i, j, nz), 1.0));
        }
    }
    faces.sort_by_key(|f| (f.0, f.1));
    faces.dedup_by_key(|f| (f.0, f.1));
    faces
}

fn face_area(mesh: &Mesh, axis: usize) -> f64 {
    let h = mesh.spacing;
    match axis {
        0 => h[1] * h[2],
        1 => h[0] * h[2],
        _ => h[0] * h[1],
    }
}

fn set_face(v: &mut FaceVelocities, axis: usize, idx: usize, u: f64) {
    match axis {
        0 => v.ux[idx] = u,
        1 => v.uy[idx] = u,
        _ => v.uz[idx] = u,
    }
}

fn uniform_field(mesh: &Mesh, u: [f64; 3]) -> FaceVelocities {
    let mut v = FaceVelocities::zeros(mesh);
    v.ux.fill(u[0]);
    v.uy.fill(u[1]);
    v.uz.fill(u[2]);
    v
}

/// Stream functions in the x-z and y-z planes, sampled at cell edges, so every cell's
/// discrete divergence cancels and wall faces carry no flow.
fn plume_field(scene: &SceneSpec, mesh: &Mesh, delta_t: f64) -> FaceVelocities {
    use std::f64::consts::PI;
    let [lx, ly, lz] = scene.extent;
    let [nx, ny, nz] = mesh.resolution;
    let [hx, hy, hz] = mesh.spacing;
    let speed = 0.1 * (GRAVITY * lz * delta_t / scene.ambient_temperature).sqrt();
    let ax = 0.5 * speed * lx / (2.0 * PI);
    let ay = 0.5 * speed * ly / (2.0 * PI);
    let psi_xz = |i: usize, k: usize| ax * (PI * k as f64 * hz / lz).sin() * (2.0 * PI * i as f64 * hx / lx).sin();
    let psi_yz = |j: usize, k: usize| ay * (PI * k as f64 * hz / lz).sin() * (2.0 * PI * j as f64 * hy / ly).sin();
    let mut v = FaceVelocities::zeros(mesh);
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..=nx {
                v.ux[face_x(mesh, i, j, k)] = (psi_xz(i, k + 1) - psi_xz(i, k)) / hz;
            }
        }
    }
    for k in 0..nz {
        for j in 0..=ny {
            for i in 0..nx {
                v.uy[face_y(mesh, i, j, k)] = (psi_yz(j, k + 1) - psi_yz(j, k)) / hz;
            }
        }
    }
    for k in 0..=nz {
        for j in 0..ny {
            for i in 0..nx {
                v.uz[face_z(mesh, i, j, k)] =
                    -(psi_xz(i + 1, k) - psi_xz(i, k)) / hx - (psi_yz(j + 1, k) - psi_yz(j, k)) / hy;
            }
        }
    }
    v
}

/// Potential throughflow: inlet wall faces blow in at the patch speed, outlet wall faces take the
/// same volume out uniformly, interior faces follow the gradient of the discrete potential.
fn potential_field(scene: &SceneSpec, mesh: &Mesh) -> Result<FaceVelocities, TransportError> {
    let mut v = FaceVelocities::zeros(mesh);
    let n = mesh.total_cells;
    let mut source = vec![0.0; n];
    let mut q_in = 0.0;
    let mut inlet_faces = Vec::new();
    for inlet in &scene.inlets {
        for (axis, idx, sign) in wall_faces(mesh, &patch_cells(mesh, &inlet.region)) {
            inlet_faces.push((axis, idx, sign, inlet.velocity));
        }
    }
    inlet_faces.sort_by_key(|f| (f.0, f.1));
    inlet_faces.dedup_by_key(|f| (f.0, f.1));
    for &(axis, idx, sign, speed) in &inlet_faces {
        // inflow points against the outward normal
        set_face(&mut v, axis, idx, -sign * speed);
        q_in += speed * face_area(mesh, axis);
    }
    if q_in == 0.0 {
        return Ok(v);
    }
    let mut outlet_faces: Vec<(usize, usize, f64)> = scene
        .outlets
        .iter()
        .flat_map(|r| wall_faces(mesh, &patch_cells(mesh, r)))
        .filter(|f| !inlet_faces.iter().any(|g| (g.0, g.1) == (f.0, f.1)))
        .collect();
    outlet_faces.sort_by_key(|f| (f.0, f.1));
    outlet_faces.dedup_by_key(|f| (f.0, f.1));
    let out_area: f64 = outlet_faces.iter().map(|f| face_area(mesh, f.0)).sum();
    if out_area == 0.0 {
        return Err(TransportError::InvalidScene("throughflow needs an outlet on a wall".into()));
    }
    let u_out = q_in / out_area;
    for &(axis, idx, sign) in &outlet_faces {
        set_face(&mut v, axis, idx, sign * u_out);
    }
    // net wall inflow per cell
    let [nx, ny, nz] = mesh.resolution;
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let a = [0, 1, 2].map(|ax| face_area(mesh, ax));
                let mut b = 0.0;
                if i == 0 {
                    b += v.ux[face_x(mesh, 0, j, k)] * a[0];
                }
                if i + 1 == nx {
                    b -= v.ux[face_x(mesh, nx, j, k)] * a[0];
                }
                if j == 0 {
                    b += v.uy[face_y(mesh, i, 0, k)] * a[1];
                }
                if j + 1 == ny {
                    b -= v.uy[face_y(mesh, i, ny, k)] * a[1];
                }
                if k == 0 {
                    b += v.uz[face_z(mesh, i, j, 0)] * a[2];
                }
                if k + 1 == nz {
                    b -= v.uz[face_z(mesh, i, j, nz)] * a[2];
                }
                source[mesh.cell(i, j, k)] = b;
            }
        }
    }
    let phi = solve_potential(mesh, &source)?;
    let h = mesh.spacing;
    for k in 0..nz {
        for j in 0..ny {
            for i in 1..nx {
                v.ux[face_x(mesh, i, j, k)] = (phi[mesh.cell(i, j, k)] - phi[mesh.cell(i - 1, j, k)]) / h[0];
            }
        }
    }
    for k in 0..nz {
        for j in 1..ny {
            for i in 0..nx {
                v.uy[face_y(mesh, i, j, k)] = (phi[mesh.cell(i, j, k)] - phi[mesh.cell(i, j - 1, k)]) / h[1];
            }
        }
    }
    for k in 1..nz {
        for j in 0..ny {
            for i in 0..nx {
                v.uz[face_z(mesh, i, j, k)] = (phi[mesh.cell(i, j, k)] - phi[mesh.cell(i, j, k - 1)]) / h[2];
            }
        }
    }
    Ok(v)
}

/// `y = -L x` for the Neumann graph Laplacian weighted by face area over spacing.
fn neg_laplacian(mesh: &Mesh, x: &[f64], y: &mut [f64]) {
    let [nx, ny, nz] = mesh.resolution;
    let w = [0, 1, 2].map(|a| face_area(mesh, a) / mesh.spacing[a]);
    y.par_iter_mut().enumerate().for_each(|(c, out)| {
        let [i, j, k] = mesh.coords(c);
        let xc = x[c];
        let mut acc = 0.0;
        if i > 0 {
            acc += w[0] * (xc - x[c - 1]);
        }
        if i + 1 < nx {
            acc += w[0] * (xc - x[c + 1]);
        }
        if j > 0 {
            acc += w[1] * (xc - x[c - nx]);
        }
        if j + 1 < ny {
            acc += w[1] * (xc - x[c + nx]);
        }
        if k > 0 {
            acc += w[2] * (xc - x[c - nx * ny]);
        }
        if k + 1 < nz {
            acc += w[2] * (xc - x[c + nx * ny]);
        }
        *out = acc;
    });
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Conjugate gradients on `sum_nb w (phi_nb - phi) = b`; `b` sums to zero.
fn solve_potential(mesh: &Mesh, b: &[f64]) -> Result<Vec<f64>, TransportError> {
    let n = b.len();
    // rhs of -L phi = -b
    let mut r: Vec<f64> = b.iter().map(|v| -v).collect();
    let mean = r.iter().sum::<f64>() / n as f64;
    r.iter_mut().for_each(|v| *v -= mean);
    let norm_b = dot(&r, &r).sqrt();
    let mut x = vec![0.0; n];
    if norm_b == 0.0 {
        return Ok(x);
    }
    let mut p = r.clone();
    let mut ap = vec![0.0; n];
    let mut rr = dot(&r, &r);
    for _ in 0..(20 * n).max(1000) {
        neg_laplacian(mesh, &p, &mut ap);
        let alpha = rr / dot(&p, &ap);
        x.iter_mut().zip(&p).for_each(|(xi, pi)| *xi += alpha * pi);
        r.iter_mut().zip(&ap).for_each(|(ri, ai)| *ri -= alpha * ai);
        let rr_new = dot(&r, &r);
        if rr_new.sqrt() <= 1e-12 * norm_b {
            return Ok(x);
        }
        let beta = rr_new / rr;
        p.iter_mut().zip(&r).for_each(|(pi, ri)| *pi = ri + beta * *pi);
        rr = rr_new;
    }
    Err(TransportError::FlowSolve(rr.sqrt() / norm_b))
}

/// Velocity field of a scene on a mesh.
pub fn face_velocities(scene: &SceneSpec, mesh: &Mesh) -> Result<FaceVelocities, TransportError> {
    Ok(match &scene.velocity_field {
        VelocityField::Uniform { velocity } => uniform_field(mesh, *velocity),
        VelocityField::PrescribedAnalytic => potential_field(scene, mesh)?,
        VelocityField::BuoyancyPlume { delta_t } => plume_field(scene, mesh, *delta_t),
    })
}

/// Mass bookkeeping for one step, ppm * m^3.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StepReport {
    pub mass_before: f64,
    pub mass_after: f64,
    /// Carried in through wall faces.
    pub inflow: f64,
    /// Carried out through wall faces.
    pub outflow: f64,
    /// Added (or removed) by holding inlet cells at their concentration.
    pub injected: f64,
}

impl StepReport {
    /// `after - before - (inflow - outflow + injected)`.
    pub fn imbalance(&self) -> f64 {
        self.mass_after - self.mass_before - (self.inflow - self.outflow + self.injected)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stability {
    /// Largest per-cell outflow Courant number.
    pub cfl: f64,
    /// `D dt sum(1/h^2)`.
    pub diffusion: f64,
    /// Largest per-cell sum of outgoing coefficients; the update is a convex combination iff <= 1.
    pub combined: f64,
}

#[derive(Debug, Clone, Copy)]
struct Face {
    /// Neighbour cell, or `usize::MAX` on a wall.
    nb: usize,
    /// Outward volume rate over cell volume (1/s); negative for inflow.
    out_rate: f64,
    /// Diffusive conductance over cell volume (1/s); zero on walls.
    diff_rate: f64,
}

const WALL: usize = usize::MAX;

/// Scene and mesh prepared for repeated stepping.
#[derive(Debug, Clone)]
pub struct Transport {
    pub scene: SceneSpec,
    pub mesh: Mesh,
    pub velocities: FaceVelocities,
    faces: Vec<[Face; 6]>,
    /// Inlet index per cell (later inlets win overlaps).
    inlet_of: Vec<Option<usize>>,
    inlet_cells: Vec<usize>,
    out_sum: Vec<f64>,
    diff_sum: Vec<f64>,
}

impl Transport {
    pub fn new(scene: &SceneSpec, mesh: &Mesh) -> Result<Self, TransportError> {
        scene.validate()?;
        if mesh.extent != scene.extent {
            return Err(TransportError::InvalidScene("mesh and scene extents differ".into()));
        }
        let velocities = face_velocities(scene, mesh)?;
        let mut inlet_of = vec![None; mesh.total_cells];
        for (n, inlet) in scene.inlets.iter().enumerate() {
            for c in patch_cells(mesh, &inlet.region) {
                inlet_of[c] = Some(n);
            }
        }
        let inlet_cells = (0..mesh.total_cells).filter(|&c| inlet_of[c].is_some()).collect();
        let [nx, ny, nz] = mesh.resolution;
        let v = mesh.cell_volume;
        let d = scene.d_eff();
        let area = [0, 1, 2].map(|a| face_area(mesh, a));
        let cond = [0, 1, 2].map(|a| d * area[a] / mesh.spacing[a] / v);
        let faces: Vec<[Face; 6]> = (0..mesh.total_cells)
            .map(|c| {
                let [i, j, k] = mesh.coords(c);
                let mk = |nb: Option<usize>, axis: usize, u_out: f64| Face {
                    nb: nb.unwrap_or(WALL),
                    out_rate: u_out * area[axis] / v,
                    diff_rate: if nb.is_some() { cond[axis] } else { 0.0 },
                };
                [
                    mk((i > 0).then(|| c - 1), 0, -velocities.ux[face_x(mesh, i, j, k)]),
                    mk((i + 1 < nx).then(|| c + 1), 0, velocities.ux[face_x(mesh, i + 1, j, k)]),
                    mk((j > 0).then(|| c - nx), 1, -velocities.uy[face_y(mesh, i, j, k)]),
                    mk((j + 1 < ny).then(|| c + nx), 1, velocities.uy[face_y(mesh, i, j + 1, k)]),
                    mk((k > 0).then(|| c - nx * ny), 2, -velocities.uz[face_z(mesh, i, j, k)]),
                    mk((k + 1 < nz).then(|| c + nx * ny), 2, velocities.uz[face_z(mesh, i, j, k + 1)]),
                ]
            })
            .collect();
        let out_sum = faces.iter().map(|f| f.iter().map(|x| x.out_rate.max(0.0)).sum()).collect();
        let diff_sum = faces.iter().map(|f| f.iter().map(|x| x.diff_rate).sum()).collect();
        Ok(Self {
            scene: scene.clone(),
            mesh: mesh.clone(),
            velocities,
            faces,
            inlet_of,
            inlet_cells,
            out_sum,
            diff_sum,
        })
    }

    pub fn stability(&self, dt: f64) -> Stability {
        let h = self.mesh.spacing;
        let cfl = self.out_sum.iter().fold(0.0f64, |m, &x| m.max(x)) * dt;
        let combined = self
            .out_sum
            .iter()
            .zip(&self.diff_sum)
            .fold(0.0f64, |m, (o, d)| m.max(o + d))
            * dt;
        let diffusion = self.scene.d_eff() * dt * h.iter().map(|x| 1.0 / (x * x)).sum::<f64>();
        Stability {
            cfl,
            diffusion,
            combined,
        }
    }

    /// Largest stable dt (infinite for a motionless, non-diffusive scene).
    pub fn max_stable_dt(&self) -> f64 {
        let s = self.stability(1.0);
        let mut dt = f64::INFINITY;
        if s.cfl > 0.0 {
            dt = dt.min(1.0 / s.cfl);
        }
        if s.diffusion > 0.0 {
            dt = dt.min(0.5 / s.diffusion);
        }
        if s.combined > 0.0 {
            dt = dt.min(1.0 / s.combined);
        }
        dt
    }

    /// Field at t = 0: clean air with the active inlets already held.
    pub fn initial_field(&self) -> ScalarField {
        let mut f = ScalarField::zeros(&self.mesh);
        self.hold_inlets(&mut f.concentration, 0.0);
        f
    }

    fn hold_inlets(&self, c: &mut [f64], t: f64) -> f64 {
        let mut injected = 0.0;
        for &cell in &self.inlet_cells {
            let inlet = &self.scene.inlets[self.inlet_of[cell].expect("inlet cell")];
            if inlet.active(t) {
                injected += inlet.concentration - c[cell];
                c[cell] = inlet.concentration;
            }
        }
        injected * self.mesh.cell_volume
    }

    fn wall_value(&self, cell: usize, t: f64) -> f64 {
        match self.inlet_of[cell] {
            Some(n) if self.scene.inlets[n].active(t) => self.scene.inlets[n].concentration,
            _ => 0.0,
        }
    }

    /// Advances `field` by `dt`. Refuses steps outside the stability limits.
    pub fn step(&self, field: &ScalarField, dt: f64) -> Result<(ScalarField, StepReport), TransportError> {
        let n = self.mesh.total_cells;
        if field.concentration.len() != n {
            return Err(TransportError::FieldSize(field.concentration.len(), n));
        }
        let s = self.stability(dt);
        if !(dt >= 0.0)
            || s.cfl > 1.0 + STABILITY_SLACK
            || s.diffusion > 0.5 + STABILITY_SLACK
            || s.combined > 1.0 + STABILITY_SLACK
        {
            return Err(TransportError::UnstableStep {
                dt,
                cfl: s.cfl,
                diffusion: s.diffusion,
                combined: s.combined,
            });
        }
        let c = &field.concentration;
        let t = field.time;
        let mut next = vec![0.0; n];
        next.par_iter_mut().enumerate().for_each(|(cell, out)| {
            // convex combination: the cell's own share plus non-negative inflows
            let keep = (1.0 - dt * (self.out_sum[cell] + self.diff_sum[cell])).max(0.0);
            let mut gain = 0.0;
            for f in &self.faces[cell] {
                let upstream = if f.nb == WALL { self.wall_value(cell, t) } else { c[f.nb] };
                if f.out_rate < 0.0 {
                    gain -= f.out_rate * upstream;
                }
                if f.nb != WALL {
                    gain += f.diff_rate * c[f.nb];
                }
            }
            *out = keep * c[cell] + dt * gain;
        });
        let v = self.mesh.cell_volume;
        let mut inflow = 0.0;
        let mut outflow = 0.0;
        for cell in 0..n {
            for f in &self.faces[cell] {
                if f.nb == WALL {
                    if f.out_rate < 0.0 {
                        inflow -= f.out_rate * self.wall_value(cell, t) * dt * v;
                    } else {
                        outflow += f.out_rate * c[cell] * dt * v;
                    }
                }
            }
        }
        let t_next = t + dt;
        let injected = self.hold_inlets(&mut next, t_next);
        let after = ScalarField {
            concentration: next,
            time: t_next,
        };
        let report = StepReport {
            mass_before: field.mass(&self.mesh),
            mass_after: after.mass(&self.mesh),
            inflow,
            outflow,
            injected,
        };
        Ok((after, report))
    }

    /// Trilinear interpolation of cell-centred values; clamps to the outermost centres.
    pub fn probe(&self, field: &ScalarField, p: [f64; 3]) -> f64 {
        let m = &self.mesh;
        let mut lo = [0usize; 3];
        let mut hi = [0usize; 3];
        let mut w = [0.0f64; 3];
        for a in 0..3 {
            let n = m.resolution[a];
            let x = (p[a] / m.spacing[a] - 0.5).clamp(0.0, (n - 1) as f64);
            lo[a] = (x.floor() as usize).min(n - 1);
            hi[a] = (lo[a] + 1).min(n - 1);
            w[a] = x - lo[a] as f64;
        }
        let c = &field.concentration;
        let mut value = 0.0;
        for corner in 0..8 {
            let pick = |a: usize| corner >> a & 1 == 1;
            let idx = [0, 1, 2].map(|a| if pick(a) { hi[a] } else { lo[a] });
            let weight: f64 = (0..3).map(|a| if pick(a) { w[a] } else { 1.0 - w[a] }).product();
            if weight != 0.0 {
                value += weight * c[m.cell(idx[0], idx[1], idx[2])];
            }
        }
        value
    }
}

/// One explicit step of `scene` on `mesh`.
pub fn step(field: &ScalarField, mesh: &Mesh, scene: &SceneSpec, dt: f64) -> Result<ScalarField, TransportError> {
    Transport::new(scene, mesh)?.step(field, dt).map(|(f, _)| f)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConcentrationSeries {
    pub probe_position: [f64; 3],
    pub sample_rate: f64,
    /// (t seconds, c ppm)
    pub samples: Vec<(f64, f64)>,
}

impl ConcentrationSeries {
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), TransportError> {
        let mut wtr = csv::Writer::from_writer(writer);
        let io = |e: csv::Error| TransportError::Io(e.to_string());
        wtr.write_record(["t_s", "c_ppm"]).map_err(io)?;
        for (t, c) in &self.samples {
            wtr.write_record([t.to_string(), c.to_string()]).map_err(io)?;
        }
        wtr.flush().map_err(|e| TransportError::Io(e.to_string()))
    }

    pub fn last(&self) -> f64 {
        self.samples.last().map_or(f64::NAN, |s| s.1)
    }

    /// Value `lag_s` seconds before the end.
    pub fn before_end(&self, lag_s: f64) -> f64 {
        let back = (lag_s * self.sample_rate).round() as usize;
        self.samples
            .len()
            .checked_sub(back + 1)
            .map_or(f64::NAN, |i| self.samples[i].1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationRun {
    pub series: ConcentrationSeries,
    pub wall_time_s: f64,
    pub dt: f64,
    pub steps: usize,
}

/// Integrates from clean air to `duration`, sampling the probe `sample_rate` times per second.
/// The time step is the sample interval split into the fewest stable pieces (at 90% of the limit).
pub fn simulate(
    scene: &SceneSpec,
    mesh: &Mesh,
    duration: f64,
    sample_rate: f64,
    probe: [f64; 3],
) -> Result<SimulationRun, TransportError> {
    let start = Instant::now();
    if !scene.contains(probe) {
        return Err(TransportError::ProbeOutside(probe));
    }
    if !(duration >= 0.0) || !(sample_rate > 0.0) {
        return Err(TransportError::InvalidScene("duration must be >= 0 and sample rate > 0".into()));
    }
    let transport = Transport::new(scene, mesh)?;
    let interval = 1.0 / sample_rate;
    let substeps = (interval / (0.9 * transport.max_stable_dt())).ceil().max(1.0) as usize;
    let dt = interval / substeps as f64;
    let n_samples = (duration * sample_rate + 1e-9).floor() as usize;
    let mut field = transport.initial_field();
    let mut samples = Vec::with_capacity(n_samples + 1);
    samples.push((0.0, transport.probe(&ScalarField::zeros(mesh), probe)));
    for s in 1..=n_samples {
        for _ in 0..substeps {
            field = transport.step(&field, dt)?.0;
        }
        samples.push((s as f64 * interval, transport.probe(&field, probe)));
    }
    Ok(SimulationRun {
        series: ConcentrationSeries {
            probe_position: probe,
            sample_rate,
            samples,
        },
        wall_time_s: start.elapsed().as_secs_f64(),
        dt,
        steps: n_samples * substeps,
    })
}

fn same_grid(a: &ConcentrationSeries, b: &ConcentrationSeries) -> Result<(), TransportError> {
    if a.samples.len() != b.samples.len()
        || a.samples.iter().zip(&b.samples).any(|(x, y)| (x.0 - y.0).abs() > 1e-9)
    {
        return Err(TransportError::GridMismatch);
    }
    Ok(())
}

/// Largest pointwise gap between two series on the same sample grid.
pub fn curve_max_diff(a: &ConcentrationSeries, b: &ConcentrationSeries) -> Result<f64, TransportError> {
    same_grid(a, b)?;
    Ok(a.samples
        .iter()
        .zip(&b.samples)
        .map(|(x, y)| (x.1 - y.1).abs())
        .fold(0.0, f64::max))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    /// Refinement level -> seconds.
    pub wall_times: BTreeMap<u32, f64>,
    /// Refinement level -> time over the finest level's time.
    pub ratios: BTreeMap<u32, f64>,
}

impl CostReport {
    /// Each level's ratio is non-decreasing with refinement.
    pub fn is_monotone(&self) -> bool {
        self.ratios.values().zip(self.ratios.values().skip(1)).all(|(a, b)| a <= b)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data")
    }
}

/// Normalised cost of every level relative to the finest (highest) one.
pub fn cost_ratio(wall_times: &BTreeMap<u32, f64>) -> Result<CostReport, TransportError> {
    let (&finest, &t_fine) = wall_times.iter().next_back().ok_or(TransportError::EmptyReport)?;
    if let Some((&level, _)) = wall_times.iter().find(|(_, &t)| !(t > 0.0)) {
        return Err(TransportError::ZeroTime(level));
    }
    let ratios = wall_times.iter().map(|(&l, &t)| (l, t / t_fine)).collect();
    debug_assert!(wall_times.contains_key(&finest));
    Ok(CostReport {
        wall_times: wall_times.clone(),
        ratios,
    })
}

/// Discrimination thresholds by concentration: `steps[i] = (from_ppm, jnd_ppm)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JndCurve {
    pub steps: Vec<(f64, f64)>,
}

impl Default for JndCurve {
    fn default() -> Self {
        Self {
            steps: vec![(0.0, 2.30), (10.13, 6.63)],
        }
    }
}

impl JndCurve {
    /// Threshold applying at concentration `c`.
    pub fn jnd_at(&self, c: f64) -> f64 {
        self.steps
            .iter()
            .take_while(|(from, _)| *from <= c)
            .last()
            .or(self.steps.first())
            .map_or(f64::INFINITY, |s| s.1)
    }
}

/// True iff every sample pair differs by less than the threshold at the lower of the two values.
pub fn perceptual_equivalence(
    a: &ConcentrationSeries,
    b: &ConcentrationSeries,
    jnd: &JndCurve,
) -> Result<bool, TransportError> {
    same_grid(a, b)?;
    Ok(a
        .samples
        .iter()
        .zip(&b.samples)
        .all(|(x, y)| (x.1 - y.1).abs() < jnd.jnd_at(x.1.min(y.1))))
}

/// Desk stand-ins for the four rooms, keyed by lower-case name.
pub fn builtin_scene(name: &str) -> Result<SceneSpec, TransportError> {
    let text = match name.to_ascii_lowercase().as_str() {
        "bathroom" | "bath" => include_str!("../scenes/bathroom.toml"),
        "car" => include_str!("../scenes/car.toml"),
        "kitchen" => include_str!("../scenes/kitchen.toml"),
        "kitti" => include_str!("../scenes/kitti.toml"),
        other => return Err(TransportError::InvalidScene(format!("no built-in scene `{other}`"))),
    };
    SceneSpec::from_toml_str(text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn box_scene(extent: [f64; 3], field: VelocityField, d: f64) -> SceneSpec {
        SceneSpec {
            name: "box".into(),
            extent,
            inlets: vec![InletPatch {
                region: Region {
                    min: [0.0; 3],
                    max: [extent[0] / 8.0, extent[1] / 8.0, extent[2] / 8.0],
                },
                velocity: 0.0,
                concentration: 10.0,
                release_s: None,
            }],
            outlets: Vec::new(),
            velocity_field: field,
            ambient_pressure: 101_325.0,
            ambient_temperature: 293.15,
            molecular_diffusivity: 0.0,
            eddy_diffusivity: d,
            probe: None,
        }
    }

    #[test]
    fn mesh_sizes() {
        let cube = box_scene([1.0; 3], VelocityField::PrescribedAnalytic, 0.0);
        assert_eq!(build_mesh(&cube, 1000).unwrap().resolution, [10, 10, 10]);
        let slab = box_scene([2.0, 1.0, 1.0], VelocityField::PrescribedAnalytic, 0.0);
        let m = build_mesh(&slab, 1024).unwrap();
        assert_eq!(m.resolution, [16, 8, 8]);
        assert_eq!(m.total_cells, 1024);
        assert!(matches!(build_mesh(&cube, 4), Err(TransportError::TooFewCells(4))));
        let flat = box_scene([1.0, 0.0, 1.0], VelocityField::PrescribedAnalytic, 0.0);
        assert!(matches!(build_mesh(&flat, 100), Err(TransportError::DomainDegenerate(_))));
        let r = m.refine(2);
        assert_eq!((r.resolution, r.refinement_level, r.total_cells), ([32, 16, 16], 1, 8192));
    }

    #[test]
    fn null_forcing_stays_zero() {
        let mut scene = box_scene([1.0; 3], VelocityField::BuoyancyPlume { delta_t: 20.0 }, 1e-3);
        scene.inlets[0].concentration = 0.0;
        let mesh = build_mesh(&scene, 512).unwrap();
        let t = Transport::new(&scene, &mesh).unwrap();
        let dt = 0.5 * t.max_stable_dt();
        let mut f = t.initial_field();
        for _ in 0..20 {
            f = t.step(&f, dt).unwrap().0;
        }
        assert!(f.concentration.iter().all(|&c| c == 0.0));
    }

    #[test]
    fn diffusion_conserves_a_point_load() {
        let mut scene = box_scene([1.0; 3], VelocityField::Uniform { velocity: [0.0; 3] }, 1e-3);
        scene.inlets[0].release_s = Some(0.0);
        let mesh = build_mesh(&scene, 512).unwrap();
        let t = Transport::new(&scene, &mesh).unwrap();
        let mut f = ScalarField::zeros(&mesh);
        f.concentration[mesh.cell(4, 4, 4)] = 100.0;
        let m0 = f.mass(&mesh);
        let dt = t.max_stable_dt();
        for _ in 0..50 {
            let (next, report) = t.step(&f, dt).unwrap();
            assert!((report.mass_after - report.mass_before).abs() <= 1e-10 * report.mass_before);
            f = next;
        }
        assert!((f.mass(&mesh) - m0).abs() <= 1e-10 * m0);
        assert!(f.concentration[mesh.cell(0, 0, 0)] > 0.0);
    }

    #[test]
    fn unit_courant_translates_a_step() {
        let mut scene = box_scene([1.0, 0.1, 0.1], VelocityField::Uniform { velocity: [0.5, 0.0, 0.0] }, 0.0);
        scene.inlets[0].release_s = Some(0.0);
        let mesh = Mesh::new(scene.extent, [10, 1, 1], 0).unwrap();
        let t = Transport::new(&scene, &mesh).unwrap();
        let mut f = ScalarField::zeros(&mesh);
        for i in 0..4 {
            f.concentration[i] = 1.0;
        }
        let dt = mesh.spacing[0] / 0.5;
        let (next, report) = t.step(&f, dt).unwrap();
        let expected = [0.0, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        for (got, want) in next.concentration.iter().zip(expected) {
            assert_abs_diff_eq!(*got, want, epsilon = 1e-12);
        }
        assert_abs_diff_eq!(report.imbalance(), 0.0, epsilon = 1e-15);
        assert!(matches!(t.step(&f, 1.01 * dt), Err(TransportError::UnstableStep { .. })));
    }

    #[test]
    fn flows_are_divergence_free() {
        let mut scene = box_scene([2.0, 1.5, 1.0], VelocityField::BuoyancyPlume { delta_t: 30.0 }, 1e-3);
        let mesh = Mesh::new(scene.extent, [12, 9, 7], 0).unwrap();
        let plume = face_velocities(&scene, &mesh).unwrap();
        assert!(plume.divergence(&mesh).iter().all(|d| d.abs() < 1e-12));
        assert!(plume.uz.iter().any(|&u| u > 0.01));

        scene.velocity_field = VelocityField::PrescribedAnalytic;
        scene.inlets[0].velocity = 0.5;
        scene.outlets.push(Region {
            min: [1.75, 1.25, 0.75],
            max: [2.0, 1.5, 1.0],
        });
        let jet = face_velocities(&scene, &mesh).unwrap();
        let div = jet.divergence(&mesh);
        assert!(div.iter().all(|d| d.abs() < 1e-8), "{:?}", div.iter().fold(0.0f64, |m, d| m.max(d.abs())));
        scene.outlets.clear();
        assert!(matches!(face_velocities(&scene, &mesh), Err(TransportError::InvalidScene(_))));
    }

    #[test]
    fn probe_at_inlet_reads_inlet_value() {
        let scene = box_scene([1.0; 3], VelocityField::BuoyancyPlume { delta_t: 10.0 }, 1e-3);
        let mesh = build_mesh(&scene, 512).unwrap();
        let run = simulate(&scene, &mesh, 2.0, 4.0, mesh.centre(0, 0, 0)).unwrap();
        assert_eq!(run.series.samples.len(), 9);
        assert_eq!(run.series.samples[0], (0.0, 0.0));
        assert!(run.series.samples[1..].iter().all(|s| s.1 == 10.0));
        let zero = simulate(&scene, &mesh, 0.0, 4.0, [0.5; 3]).unwrap();
        assert_eq!(zero.series.samples, vec![(0.0, 0.0)]);
        assert!(matches!(
            simulate(&scene, &mesh, 1.0, 4.0, [2.0, 0.5, 0.5]),
            Err(TransportError::ProbeOutside(_))
        ));
    }

    fn series(values: &[f64]) -> ConcentrationSeries {
        ConcentrationSeries {
            probe_position: [0.0; 3],
            sample_rate: 4.0,
            samples: values.iter().enumerate().map(|(i, &c)| (i as f64 * 0.25, c)).collect(),
        }
    }

    #[test]
    fn curve_differences() {
        let a = series(&[0.0, 1.0, 4.0, 9.0]);
        let b = series(&[0.5, 1.5, 4.5, 9.5]);
        assert_eq!(curve_max_diff(&a, &a).unwrap(), 0.0);
        assert_eq!(curve_max_diff(&a, &b).unwrap(), 0.5);
        assert!(matches!(curve_max_diff(&a, &series(&[0.0])), Err(TransportError::GridMismatch)));
    }

    #[test]
    fn equivalence_uses_the_local_threshold() {
        let jnd = JndCurve::default();
        let a = series(&[1.0, 5.0, 12.0]);
        assert!(perceptual_equivalence(&a, &a, &jnd).unwrap());
        assert!(perceptual_equivalence(&a, &series(&[2.98, 5.0, 12.0]), &jnd).unwrap());
        assert!(!perceptual_equivalence(&a, &series(&[4.0, 5.0, 12.0]), &jnd).unwrap());
        // 5 ppm apart above the second threshold is still below 6.63
        assert!(perceptual_equivalence(&a, &series(&[1.0, 5.0, 17.0]), &jnd).unwrap());
        assert_eq!(jnd.jnd_at(10.13), 6.63);
        assert_eq!(jnd.jnd_at(10.12), 2.30);
    }

    #[test]
    fn cost_ratios() {
        let equal: BTreeMap<u32, f64> = [(0, 3.0), (1, 3.0), (2, 3.0)].into();
        assert!(cost_ratio(&equal).unwrap().ratios.values().all(|&r| r == 1.0));
        let times: BTreeMap<u32, f64> = [(0, 1.0), (3, 4.0)].into();
        let report = cost_ratio(&times).unwrap();
        assert_eq!(report.ratios[&0], 0.25);
        assert_eq!(report.ratios[&3], 1.0);
        assert!(report.is_monotone());
        assert!(matches!(cost_ratio(&[(0, 0.0), (1, 2.0)].into()), Err(TransportError::ZeroTime(0))));
        assert!(matches!(cost_ratio(&BTreeMap::new()), Err(TransportError::EmptyReport)));
    }

    #[test]
    fn builtin_scenes_load() {
        for name in ["bathroom", "car", "kitchen", "kitti"] {
            let s = builtin_scene(name).unwrap();
            assert!(s.probe.is_some(), "{name}");
        }
        assert!(builtin_scene("garage").is_err());
    }

    #[test]
    fn scene_validation() {
        let mut s = box_scene([1.0; 3], VelocityField::PrescribedAnalytic, 0.0);
        s.inlets.clear();
        assert!(matches!(s.validate(), Err(TransportError::InvalidScene(_))));
        let mut s = box_scene([1.0; 3], VelocityField::PrescribedAnalytic, 0.0);
        s.inlets[0].region.max = [2.0, 0.1, 0.1];
        assert!(s.validate().is_err());
    }
}
