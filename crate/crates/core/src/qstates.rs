//! Input light states and the photon currents they produce.
//!
//! Every output annihilation operator is a linear combination of the input
//! ones, `a_k = sum_x S[k, x] a_x`, so normally ordered moments of the output
//! reduce to polynomials in the scattering amplitudes. The closed forms used
//! here are checked against the brute-force Fock-space evaluation in
//! [`crate::oracle`].

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::solver::{Direction, ScatteringMatrix};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StateError {
    #[error("invalid state: {0}")]
    Invalid(String),
    #[error("degenerate pair: separation angle is zero")]
    Degenerate,
    #[error("incident angle {0:.4} deg does not illuminate the input facet (must lie in (90, 270))")]
    OutOfRange(f64),
    #[error("scattering matrix has no column for incident direction {0:.6} deg")]
    MissingColumn(f64),
    #[error("dark channel: single-photon current vanishes at detection index {0}")]
    DarkChannel(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StateKind {
    /// `M^{-1/2} sum_m a+(q_m) a+(-q_m) |0>`.
    EntangledPure,
    /// Equal-weight mixture of the pair states `a+(q_m) a+(-q_m) |0>`.
    FullyMixed,
    /// Plane-wave coherent state along `theta_middle + delta_theta`.
    CoherentSingleWave,
    /// Coherent plane waves along each of the `2M` pair directions, with
    /// their currents added incoherently.
    CoherentIncoherentSum,
    /// `|2_q> = a+(q)^2 |0> / sqrt(2)` along `theta_middle + delta_theta`.
    FockTwoSameMode,
}

impl StateKind {
    pub fn label(&self) -> &'static str {
        match self {
            Self::EntangledPure => "entangled_pure",
            Self::FullyMixed => "fully_mixed",
            Self::CoherentSingleWave => "coherent_single_wave",
            Self::CoherentIncoherentSum => "coherent_incoherent_sum",
            Self::FockTwoSameMode => "fock_two_same_mode",
        }
    }

    fn uses_pairs(&self) -> bool {
        matches!(
            self,
            Self::EntangledPure | Self::FullyMixed | Self::CoherentIncoherentSum
        )
    }
}

fn default_qe() -> f64 {
    1.0
}

fn default_rank() -> usize {
    1
}

/// Angles are stored in degrees, which is how experiments are specified.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputStateSpec {
    pub kind: StateKind,
    #[serde(default = "default_rank")]
    pub schmidt_rank: usize,
    pub theta_middle_deg: f64,
    pub delta_theta_deg: f64,
    /// Detector quantum-efficiency factor `K = eta_2 / eta_1^2`.
    #[serde(default = "default_qe")]
    pub qe_factor: f64,
}

impl InputStateSpec {
    pub fn new(kind: StateKind, schmidt_rank: usize, theta_middle_deg: f64, delta_theta_deg: f64) -> Self {
        Self {
            kind,
            schmidt_rank,
            theta_middle_deg,
            delta_theta_deg,
            qe_factor: 1.0,
        }
    }

    /// Short identifier used for output directories.
    pub fn label(&self) -> String {
        format!(
            "{}_M{}_mid{}_d{}",
            self.kind.label(),
            self.schmidt_rank,
            fmt_angle(self.theta_middle_deg),
            fmt_angle(self.delta_theta_deg)
        )
    }

    pub fn validate(&self) -> Result<(), StateError> {
        if !(self.qe_factor >= 0.0 && self.qe_factor.is_finite()) {
            return Err(StateError::Invalid(format!("qe_factor {}", self.qe_factor)));
        }
        if !self.theta_middle_deg.is_finite() || !self.delta_theta_deg.is_finite() {
            return Err(StateError::Invalid("angles must be finite".into()));
        }
        if self.schmidt_rank == 0 {
            return Err(StateError::Invalid("schmidt_rank must be at least 1".into()));
        }
        self.incident_angles_deg().map(|_| ())
    }

    /// Incident polar angles in degrees, ordered `(q_1, -q_1, q_2, -q_2, ...)`
    /// for pair states and a single angle otherwise.
    pub fn incident_angles_deg(&self) -> Result<Vec<f64>, StateError> {
        let angles: Vec<f64> = if self.kind.uses_pairs() {
            if self.delta_theta_deg == 0.0 {
                return Err(StateError::Degenerate);
            }
            (1..=self.schmidt_rank)
                .flat_map(|m| {
                    let off = m as f64 * self.delta_theta_deg;
                    [self.theta_middle_deg + off, self.theta_middle_deg - off]
                })
                .collect()
        } else {
            vec![self.theta_middle_deg + self.delta_theta_deg]
        };
        for &a in &angles {
            if !(a > 90.0 && a < 270.0) {
                return Err(StateError::OutOfRange(a));
            }
        }
        Ok(angles)
    }
}

fn fmt_angle(v: f64) -> String {
    let s = format!("{v}");
    s.replace('-', "m").replace('.', "p")
}

/// Incident plane-wave directions of a state in the `phi = 0` plane.
pub fn incident_directions(spec: &InputStateSpec) -> Result<Vec<Direction>, StateError> {
    Ok(spec
        .incident_angles_deg()?
        .into_iter()
        .map(|a| Direction::from_degrees(a, 0.0))
        .collect())
}

/// Resolves a state's incident directions to columns of a scattering matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct StateColumns {
    pub kind: StateKind,
    pub qe_factor: f64,
    /// Column indices in `(q_1, -q_1, q_2, -q_2, ...)` order.
    pub columns: Vec<usize>,
}

impl StateColumns {
    pub fn resolve(spec: &InputStateSpec, dirs: &[Direction]) -> Result<Self, StateError> {
        spec.validate()?;
        let angles = spec.incident_angles_deg()?;
        let columns = angles
            .iter()
            .map(|&a| {
                let d = Direction::from_degrees(a, 0.0);
                dirs.iter()
                    .position(|x| x.same_as(&d))
                    .ok_or(StateError::MissingColumn(a))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            kind: spec.kind,
            qe_factor: spec.qe_factor,
            columns,
        })
    }

    pub fn for_matrix(spec: &InputStateSpec, s: &ScatteringMatrix) -> Result<Self, StateError> {
        Self::resolve(spec, &s.incident_dirs)
    }

    fn rank(&self) -> usize {
        self.columns.len() / 2
    }

    /// Single-photon current from one row of amplitudes.
    pub fn i1(&self, row: &[Complex64]) -> f64 {
        match self.kind {
            StateKind::EntangledPure | StateKind::FullyMixed => {
                let sum: f64 = self.columns.iter().map(|&c| row[c].norm_sqr()).sum();
                sum / self.rank() as f64
            }
            StateKind::CoherentSingleWave => row[self.columns[0]].norm_sqr(),
            StateKind::CoherentIncoherentSum => {
                let sum: f64 = self.columns.iter().map(|&c| row[c].norm_sqr()).sum();
                sum / self.columns.len() as f64
            }
            StateKind::FockTwoSameMode => 2.0 * row[self.columns[0]].norm_sqr(),
        }
    }

    /// Two-photon current `<a+_i a+_j a_j a_i>` for detection rows `ri`, `rj`.
    pub fn i2(&self, ri: &[Complex64], rj: &[Complex64]) -> f64 {
        match self.kind {
            StateKind::EntangledPure => {
                let mut amp = Complex64::new(0.0, 0.0);
                for pair in self.columns.chunks_exact(2) {
                    let (p, n) = (pair[0], pair[1]);
                    amp += ri[p] * rj[n] + ri[n] * rj[p];
                }
                amp.norm_sqr() / self.rank() as f64
            }
            StateKind::FullyMixed => {
                let sum: f64 = self
                    .columns
                    .chunks_exact(2)
                    .map(|pair| {
                        let (p, n) = (pair[0], pair[1]);
                        (ri[p] * rj[n] + ri[n] * rj[p]).norm_sqr()
                    })
                    .sum();
                sum / self.rank() as f64
            }
            StateKind::CoherentSingleWave => self.i1(ri) * self.i1(rj),
            StateKind::CoherentIncoherentSum => {
                let sum: f64 = self
                    .columns
                    .iter()
                    .map(|&c| ri[c].norm_sqr() * rj[c].norm_sqr())
                    .sum();
                sum / self.columns.len() as f64
            }
            StateKind::FockTwoSameMode => {
                let c = self.columns[0];
                2.0 * ri[c].norm_sqr() * rj[c].norm_sqr()
            }
        }
    }

    /// Correlation `K I2(i,j) / (I1(i) I1(j))` of one realization.
    pub fn correlation(
        &self,
        ri: &[Complex64],
        rj: &[Complex64],
        i: usize,
        j: usize,
    ) -> Result<f64, StateError> {
        let a = self.i1(ri);
        let b = self.i1(rj);
        if !(a > 0.0) {
            return Err(StateError::DarkChannel(i));
        }
        if !(b > 0.0) {
            return Err(StateError::DarkChannel(j));
        }
        Ok(self.qe_factor * self.i2(ri, rj) / (a * b))
    }
}

pub fn single_photon_current(
    s: &ScatteringMatrix,
    spec: &InputStateSpec,
    detect_index: usize,
) -> Result<f64, StateError> {
    let cols = StateColumns::for_matrix(spec, s)?;
    Ok(cols.i1(s.row(detect_index)))
}

pub fn two_photon_current(
    s: &ScatteringMatrix,
    spec: &InputStateSpec,
    i: usize,
    j: usize,
) -> Result<f64, StateError> {
    let cols = StateColumns::for_matrix(spec, s)?;
    Ok(cols.i2(s.row(i), s.row(j)))
}

pub fn correlation_single_realization(
    s: &ScatteringMatrix,
    spec: &InputStateSpec,
    i: usize,
    j: usize,
) -> Result<f64, StateError> {
    let cols = StateColumns::for_matrix(spec, s)?;
    cols.correlation(s.row(i), s.row(j), i, j)
}

/// Currents of one state over a whole detection grid.
#[derive(Debug, Clone, PartialEq)]
pub struct CurrentCurves {
    pub i1: Vec<f64>,
    pub i2_coinciding: Vec<f64>,
    /// Row-major `grid x grid` when requested.
    pub i2_pairwise: Option<Vec<f64>>,
}

pub fn current_curves(
    s: &ScatteringMatrix,
    spec: &InputStateSpec,
    pairwise: bool,
) -> Result<CurrentCurves, StateError> {
    let cols = StateColumns::for_matrix(spec, s)?;
    let n = s.rows;
    let i1 = (0..n).map(|r| cols.i1(s.row(r))).collect();
    let i2_coinciding = (0..n).map(|r| cols.i2(s.row(r), s.row(r))).collect();
    let i2_pairwise = pairwise.then(|| {
        let mut m = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                m.push(cols.i2(s.row(i), s.row(j)));
            }
        }
        m
    });
    Ok(CurrentCurves {
        i1,
        i2_coinciding,
        i2_pairwise,
    })
}

/// Per-realization correlation at coinciding detectors over the grid.
pub fn correlation_curve(s: &ScatteringMatrix, spec: &InputStateSpec) -> Result<Vec<f64>, StateError> {
    let cols = StateColumns::for_matrix(spec, s)?;
    (0..s.rows)
        .map(|r| cols.correlation(s.row(r), s.row(r), r, r))
        .collect()
}
