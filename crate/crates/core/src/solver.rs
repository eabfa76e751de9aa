//! Scalar multiple scattering by point scatterers.
//!
//! The exciting field at each scatterer solves the coupled (Foldy-Lax)
//! equations
//!
//! ```text
//! E_i = exp(i k k_inc . r_i) + t * sum_{j != i} G(|r_i - r_j|) E_j
//! ```
//!
//! with the free-space kernel `G(r) = exp(ikr) / (4 pi r)` (time dependence
//! `exp(-i omega t)`). The far-field amplitude in direction `k_o` is
//! `f = t * sum_j E_j exp(-i k k_o . r_j)`. One LU factorization of
//! `I - tG` serves every incident direction of a realization.

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::sync::Once;

use faer::linalg::matmul::matmul;
use faer::prelude::*;
use faer::{Accum, Mat, Par};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::scene::{dist2, Point, Scene};

/// Vacuum wavenumber with lengths measured in wavelengths.
pub const K0: f64 = 2.0 * PI;

/// Relative residual accepted for the linear solve.
pub const RESIDUAL_TOL: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error("green's function evaluated at zero separation")]
    ZeroSeparation,
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("linear solve failed for incident direction {column}: relative residual {residual:.3e}")]
    Residual { column: usize, residual: f64 },
    #[error("invalid angular grid: {0}")]
    InvalidGrid(String),
    #[error("no incident directions given")]
    NoIncidentDirections,
    #[error("malformed scattering matrix dump: {0}")]
    Dump(String),
}

static SEQUENTIAL_FAER: Once = Once::new();

/// Realizations are parallelized one level up; keeping the dense kernels
/// sequential makes every factorization bit-reproducible.
fn sequential_kernels() {
    SEQUENTIAL_FAER.call_once(|| faer::set_global_parallelism(Par::Seq));
}

/// A propagation or observation direction in spherical angles.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Direction {
    pub theta: f64,
    pub phi: f64,
}

impl Direction {
    pub fn new(theta: f64, phi: f64) -> Self {
        Self { theta, phi }
    }

    pub fn from_degrees(theta_deg: f64, phi_deg: f64) -> Self {
        Self::new(theta_deg.to_radians(), phi_deg.to_radians())
    }

    pub fn unit_vector(&self) -> Point {
        let (st, ct) = self.theta.sin_cos();
        let (sp, cp) = self.phi.sin_cos();
        [st * cp, st * sp, ct]
    }

    /// The opposite direction, expressed with the same azimuth by shifting
    /// the polar angle by pi.
    pub fn reversed(&self) -> Self {
        let theta = if self.theta > 0.0 {
            self.theta - PI
        } else {
            self.theta + PI
        };
        Self::new(theta, self.phi)
    }

    pub fn same_as(&self, other: &Direction) -> bool {
        let a = self.unit_vector();
        let b = other.unit_vector();
        dist2(&a, &b) < 1e-24
    }
}

/// Detection angles in a fixed azimuthal plane. `theta = 0` is the
/// retro-direction of normal incidence (+z).
#[derive(Debug, Clone, PartialEq)]
pub struct AngularGrid {
    pub thetas: Vec<f64>,
    pub phi: f64,
}

impl AngularGrid {
    pub fn new(thetas: Vec<f64>, phi: f64) -> Result<Self, SolverError> {
        if thetas.is_empty() {
            return Err(SolverError::InvalidGrid("no angles".into()));
        }
        if thetas.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(SolverError::InvalidGrid("angles must be strictly increasing".into()));
        }
        let lim = 0.5 * PI + 1e-12;
        if thetas.iter().any(|t| !(t.abs() <= lim)) {
            return Err(SolverError::InvalidGrid("angles must lie in [-pi/2, pi/2]".into()));
        }
        Ok(Self { thetas, phi })
    }

    /// Uniform grid from `min_deg` to `max_deg` inclusive.
    pub fn uniform_degrees(min_deg: f64, max_deg: f64, step_deg: f64) -> Result<Self, SolverError> {
        if !(step_deg > 0.0) || !(max_deg >= min_deg) {
            return Err(SolverError::InvalidGrid(format!(
                "bad range {min_deg}..{max_deg} step {step_deg}"
            )));
        }
        let n = ((max_deg - min_deg) / step_deg + 1e-9).floor() as usize + 1;
        let thetas = (0..n)
            .map(|i| (min_deg + i as f64 * step_deg).to_radians())
            .collect();
        Self::new(thetas, 0.0)
    }

    /// The half plane from -90 to 90 degrees in quarter-degree steps.
    pub fn half_plane() -> Self {
        Self::uniform_degrees(-90.0, 90.0, 0.25).expect("static grid")
    }

    pub fn len(&self) -> usize {
        self.thetas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.thetas.is_empty()
    }

    pub fn direction(&self, index: usize) -> Direction {
        Direction::new(self.thetas[index], self.phi)
    }

    /// Index of the grid angle closest to `theta`.
    pub fn nearest(&self, theta: f64) -> usize {
        let mut best = 0;
        for (i, t) in self.thetas.iter().enumerate() {
            if (t - theta).abs() < (self.thetas[best] - theta).abs() {
                best = i;
            }
        }
        best
    }
}

/// Free-space scalar Green's function `exp(ikr) / (4 pi r)`.
pub fn green(k: f64, r: f64) -> Result<Complex64, SolverError> {
    if !(r > 0.0) {
        return Err(SolverError::ZeroSeparation);
    }
    Ok(green_unchecked(k, r))
}

#[inline]
fn green_unchecked(k: f64, r: f64) -> Complex64 {
    Complex64::from_polar(1.0 / (4.0 * PI * r), k * r)
}

/// Bare Born strength `k^2 (n^2 - 1) V` of a sphere.
pub fn born_strength(k: f64, radius: f64, index: f64) -> f64 {
    k * k * (index * index - 1.0) * (4.0 * PI * radius.powi(3) / 3.0)
}

/// Point-scatterer t-matrix: the Born strength unitarized so that
/// `Im(1/t) = -k/(4 pi)` (scalar optical theorem).
pub fn t_matrix(k: f64, radius: f64, index: f64) -> Result<Complex64, SolverError> {
    if !(radius > 0.0) {
        return Err(SolverError::InvalidParameter(format!("radius {radius}")));
    }
    if !(index > 1.0) {
        return Err(SolverError::InvalidParameter(format!("refractive index {index}")));
    }
    if !(k > 0.0) {
        return Err(SolverError::InvalidParameter(format!("wavenumber {k}")));
    }
    let t0 = born_strength(k, radius, index);
    Ok(unitarize(k, t0))
}

pub fn unitarize(k: f64, t0: f64) -> Complex64 {
    Complex64::new(t0, 0.0) / Complex64::new(1.0, -k * t0 / (4.0 * PI))
}

/// `k r` of the particle; the point-scatterer model assumes it does not
/// exceed one.
pub fn size_parameter(k: f64, radius: f64) -> f64 {
    k * radius
}

/// How the pair coupling is built. `ScrambledColumns` multiplies column `j`
/// of the coupling matrix by a random phase, which breaks the symmetry of the
/// interaction and with it the equality of reversed scattering sequences.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Coupling {
    #[default]
    Reciprocal,
    ScrambledColumns { seed: u64 },
}

/// A factorized realization: positions, scattering strength and the LU of
/// `I - tG`.
pub struct Medium {
    positions: Vec<Point>,
    k: f64,
    t: Complex64,
    system: Mat<Complex64>,
    lu: faer::linalg::solvers::PartialPivLu<Complex64>,
}

impl Medium {
    pub fn new(scene: &Scene, k: f64) -> Result<Self, SolverError> {
        let t = t_matrix(k, scene.spec.particle_radius, scene.spec.refractive_index)?;
        Self::with_t(scene.positions.clone(), k, t, Coupling::Reciprocal)
    }

    pub fn with_t(
        positions: Vec<Point>,
        k: f64,
        t: Complex64,
        coupling: Coupling,
    ) -> Result<Self, SolverError> {
        sequential_kernels();
        let n = positions.len();
        let mut system = Mat::<Complex64>::zeros(n, n);
        for i in 0..n {
            system[(i, i)] = Complex64::new(1.0, 0.0);
            for j in (i + 1)..n {
                let r = dist2(&positions[i], &positions[j]).sqrt();
                if !(r > 0.0) {
                    return Err(SolverError::ZeroSeparation);
                }
                let v = -t * green_unchecked(k, r);
                system[(i, j)] = v;
                system[(j, i)] = v;
            }
        }
        if let Coupling::ScrambledColumns { seed } = coupling {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for j in 0..n {
                let phase = Complex64::from_polar(1.0, 2.0 * PI * rng.random::<f64>());
                for i in 0..n {
                    if i != j {
                        system[(i, j)] *= phase;
                    }
                }
            }
        }
        let lu = system.partial_piv_lu();
        Ok(Self {
            positions,
            k,
            t,
            system,
            lu,
        })
    }

    pub fn t(&self) -> Complex64 {
        self.t
    }

    pub fn k(&self) -> f64 {
        self.k
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    fn incident_matrix(&self, dirs: &[Direction]) -> Mat<Complex64> {
        let units: Vec<Point> = dirs.iter().map(Direction::unit_vector).collect();
        Mat::from_fn(self.positions.len(), dirs.len(), |i, c| {
            let p = &self.positions[i];
            let u = &units[c];
            Complex64::from_polar(1.0, self.k * (u[0] * p[0] + u[1] * p[1] + u[2] * p[2]))
        })
    }

    /// Exciting fields for each incident direction (one column each).
    pub fn solve(&self, dirs: &[Direction]) -> Result<Mat<Complex64>, SolverError> {
        let rhs = self.incident_matrix(dirs);
        let fields = self.lu.solve(&rhs);
        let mut resid = Mat::<Complex64>::zeros(rhs.nrows(), rhs.ncols());
        matmul(
            resid.as_mut(),
            Accum::Replace,
            self.system.as_ref(),
            fields.as_ref(),
            Complex64::new(1.0, 0.0),
            Par::Seq,
        );
        for c in 0..rhs.ncols() {
            let mut num = 0.0;
            let mut den = 0.0;
            for i in 0..rhs.nrows() {
                num += (resid[(i, c)] - rhs[(i, c)]).norm_sqr();
                den += rhs[(i, c)].norm_sqr();
            }
            let rel = (num / den).sqrt();
            if !(rel <= RESIDUAL_TOL) {
                return Err(SolverError::Residual {
                    column: c,
                    residual: rel,
                });
            }
        }
        Ok(fields)
    }

    /// `exp(-i k k_o . r_j)` for every detection angle (rows) and scatterer.
    fn outgoing_phases(&self, grid: &AngularGrid) -> Mat<Complex64> {
        let units: Vec<Point> = (0..grid.len()).map(|g| grid.direction(g).unit_vector()).collect();
        Mat::from_fn(grid.len(), self.positions.len(), |g, j| {
            let p = &self.positions[j];
            let u = &units[g];
            Complex64::from_polar(1.0, -self.k * (u[0] * p[0] + u[1] * p[1] + u[2] * p[2]))
        })
    }

    /// Far-field amplitudes on `grid` for exciting fields in `fields`.
    pub fn far_field_matrix(&self, fields: &Mat<Complex64>, grid: &AngularGrid) -> Mat<Complex64> {
        let phases = self.outgoing_phases(grid);
        let mut out = Mat::<Complex64>::zeros(grid.len(), fields.ncols());
        matmul(
            out.as_mut(),
            Accum::Replace,
            phases.as_ref(),
            fields.as_ref(),
            self.t,
            Par::Seq,
        );
        out
    }

    pub fn scattering_matrix(
        &self,
        incident_dirs: &[Direction],
        grid: &AngularGrid,
    ) -> Result<ScatteringMatrix, SolverError> {
        if incident_dirs.is_empty() {
            return Err(SolverError::NoIncidentDirections);
        }
        let fields = self.solve(incident_dirs)?;
        let ff = self.far_field_matrix(&fields, grid);
        let (rows, cols) = (grid.len(), incident_dirs.len());
        let mut amplitudes = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                amplitudes.push(ff[(r, c)]);
            }
        }
        Ok(ScatteringMatrix {
            amplitudes,
            rows,
            cols,
            incident_dirs: incident_dirs.to_vec(),
            grid: grid.clone(),
            k: self.k,
            t_matrix: self.t,
        })
    }
}

/// Self-consistent exciting field at each scatterer for one incident wave.
pub fn solve_fields(scene: &Scene, incident: Direction, k: f64) -> Result<Vec<Complex64>, SolverError> {
    let medium = Medium::new(scene, k)?;
    let fields = medium.solve(&[incident])?;
    Ok((0..fields.nrows()).map(|i| fields[(i, 0)]).collect())
}

/// Far-field amplitude `t * sum_j E_j exp(-i k k_o . r_j)`.
pub fn far_field(
    scene: &Scene,
    fields: &[Complex64],
    detect: Direction,
    k: f64,
) -> Result<Complex64, SolverError> {
    let t = t_matrix(k, scene.spec.particle_radius, scene.spec.refractive_index)?;
    let u = detect.unit_vector();
    let sum: Complex64 = scene
        .positions
        .iter()
        .zip(fields)
        .map(|(p, e)| e * Complex64::from_polar(1.0, -k * (u[0] * p[0] + u[1] * p[1] + u[2] * p[2])))
        .sum();
    Ok(t * sum)
}

pub fn assemble_smatrix(
    scene: &Scene,
    incident_dirs: &[Direction],
    grid: &AngularGrid,
    k: f64,
) -> Result<ScatteringMatrix, SolverError> {
    Medium::new(scene, k)?.scattering_matrix(incident_dirs, grid)
}

/// Far-field amplitudes indexed by (detection angle, incident direction).
#[derive(Debug, Clone, PartialEq)]
pub struct ScatteringMatrix {
    /// Row-major, `rows x cols`.
    pub amplitudes: Vec<Complex64>,
    pub rows: usize,
    pub cols: usize,
    pub incident_dirs: Vec<Direction>,
    pub grid: AngularGrid,
    pub k: f64,
    pub t_matrix: Complex64,
}

const DUMP_MAGIC: &[u8; 8] = b"SMATRIX1";

impl ScatteringMatrix {
    /// Builds a matrix from raw amplitudes, mostly for synthetic inputs.
    pub fn from_amplitudes(
        amplitudes: Vec<Complex64>,
        incident_dirs: Vec<Direction>,
        grid: AngularGrid,
    ) -> Self {
        let rows = grid.len();
        let cols = incident_dirs.len();
        assert_eq!(amplitudes.len(), rows * cols, "amplitude count mismatch");
        Self {
            amplitudes,
            rows,
            cols,
            incident_dirs,
            grid,
            k: K0,
            t_matrix: Complex64::new(0.0, 0.0),
        }
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> Complex64 {
        self.amplitudes[row * self.cols + col]
    }

    pub fn row(&self, row: usize) -> &[Complex64] {
        &self.amplitudes[row * self.cols..(row + 1) * self.cols]
    }

    pub fn column_of(&self, dir: &Direction) -> Option<usize> {
        self.incident_dirs.iter().position(|d| d.same_as(dir))
    }

    /// Little-endian layout:
    ///
    /// ```text
    /// magic  8 bytes  "SMATRIX1"
    /// rows   u64
    /// cols   u64
    /// k      f64
    /// t      f64 re, f64 im
    /// phi    f64                      detection azimuth
    /// thetas f64 * rows               detection polar angles
    /// dirs   (f64 theta, f64 phi) * cols
    /// data   (f64 re, f64 im) * rows * cols, row-major
    /// ```
    pub fn write_binary<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        out.write_all(DUMP_MAGIC)?;
        out.write_all(&(self.rows as u64).to_le_bytes())?;
        out.write_all(&(self.cols as u64).to_le_bytes())?;
        for v in [self.k, self.t_matrix.re, self.t_matrix.im, self.grid.phi] {
            out.write_all(&v.to_le_bytes())?;
        }
        for t in &self.grid.thetas {
            out.write_all(&t.to_le_bytes())?;
        }
        for d in &self.incident_dirs {
            out.write_all(&d.theta.to_le_bytes())?;
            out.write_all(&d.phi.to_le_bytes())?;
        }
        for a in &self.amplitudes {
            out.write_all(&a.re.to_le_bytes())?;
            out.write_all(&a.im.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut input: R) -> Result<Self, SolverError> {
        let io = |e: std::io::Error| SolverError::Dump(e.to_string());
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic).map_err(io)?;
        if &magic != DUMP_MAGIC {
            return Err(SolverError::Dump("bad magic".into()));
        }
        let mut u = [0u8; 8];
        let mut read_u64 = |input: &mut R| -> Result<u64, SolverError> {
            input.read_exact(&mut u).map_err(io)?;
            Ok(u64::from_le_bytes(u))
        };
        let rows = read_u64(&mut input)? as usize;
        let cols = read_u64(&mut input)? as usize;
        if rows == 0 || cols == 0 || rows.saturating_mul(cols) > (1 << 32) {
            return Err(SolverError::Dump(format!("implausible shape {rows}x{cols}")));
        }
        let read_f64 = |input: &mut R| -> Result<f64, SolverError> {
            let mut b = [0u8; 8];
            input.read_exact(&mut b).map_err(io)?;
            Ok(f64::from_le_bytes(b))
        };
        let k = read_f64(&mut input)?;
        let t_matrix = Complex64::new(read_f64(&mut input)?, read_f64(&mut input)?);
        let phi = read_f64(&mut input)?;
        let thetas = (0..rows)
            .map(|_| read_f64(&mut input))
            .collect::<Result<Vec<_>, _>>()?;
        let incident_dirs = (0..cols)
            .map(|_| Ok(Direction::new(read_f64(&mut input)?, read_f64(&mut input)?)))
            .collect::<Result<Vec<_>, SolverError>>()?;
        let amplitudes = (0..rows * cols)
            .map(|_| Ok(Complex64::new(read_f64(&mut input)?, read_f64(&mut input)?)))
            .collect::<Result<Vec<_>, SolverError>>()?;
        Ok(Self {
            amplitudes,
            rows,
            cols,
            incident_dirs,
            grid: AngularGrid::new(thetas, phi)?,
            k,
            t_matrix,
        })
    }
}
