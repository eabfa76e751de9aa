//! Disorder averaging over independent realizations.
//!
//! Realizations are grouped into fixed blocks of consecutive indices. A block
//! is always absorbed by one worker in index order, and accumulators are maps
//! from block index to partial sums, so merging is a disjoint union and the
//! final reduction runs in block order. Results are therefore identical for
//! any worker count.

use std::collections::BTreeMap;
use std::time::Instant;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::qstates::{InputStateSpec, StateColumns, StateError};
use crate::scene::{sample_scene, Layout, Scene, SceneSpec};
use crate::solver::{AngularGrid, Coupling, Direction, Medium, ScatteringMatrix, K0};

pub const DEFAULT_BLOCK_SIZE: usize = 10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnsembleError {
    #[error("invalid ensemble: {0}")]
    Invalid(String),
    #[error("realization {index} failed: {reason}")]
    Realization { index: u64, reason: String },
    #[error("zero mean single-photon current at detection angle {theta:.6} rad")]
    ZeroMean { theta: f64 },
    #[error("cannot normalize an all-zero curve")]
    ZeroCurve,
    #[error("accumulator shapes differ")]
    Shape,
    #[error(transparent)]
    State(#[from] StateError),
}

/// Order in which ensemble averages enter the correlation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AveragingOrder {
    /// `mean(I2) / mean(I1 I1')`.
    RatioOfMeans,
    /// `mean(I2 / (I1 I1'))`.
    MeanOfRatios,
}

/// Whether the medium keeps its reciprocal coupling. The scrambled variant is
/// a control in which reversed scattering sequences no longer interfere.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CouplingMode {
    #[default]
    Reciprocal,
    ScrambledColumns,
}

/// Extra incident columns for speckle correlation: a reference incidence and
/// offsets from it, all in degrees.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeckleProbe {
    pub reference_deg: f64,
    pub offsets_deg: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleSpec {
    pub n_realizations: usize,
    pub master_seed: u64,
    pub scene: SceneSpec,
    pub states: Vec<InputStateSpec>,
    pub grid: AngularGrid,
    pub record_pairwise: bool,
    pub block_size: usize,
    pub coupling: CouplingMode,
    pub speckle: Option<SpeckleProbe>,
}

impl EnsembleSpec {
    pub fn new(scene: SceneSpec, states: Vec<InputStateSpec>, n_realizations: usize, master_seed: u64) -> Self {
        Self {
            n_realizations,
            master_seed,
            scene,
            states,
            grid: AngularGrid::half_plane(),
            record_pairwise: false,
            block_size: DEFAULT_BLOCK_SIZE,
            coupling: CouplingMode::Reciprocal,
            speckle: None,
        }
    }

    pub fn validate(&self) -> Result<(), EnsembleError> {
        if self.n_realizations == 0 {
            return Err(EnsembleError::Invalid("n_realizations must be at least 1".into()));
        }
        if self.states.is_empty() && self.speckle.is_none() {
            return Err(EnsembleError::Invalid("at least one state is required".into()));
        }
        if self.block_size == 0 {
            return Err(EnsembleError::Invalid("block_size must be at least 1".into()));
        }
        self.scene
            .validate()
            .map_err(|e| EnsembleError::Invalid(e.to_string()))?;
        for s in &self.states {
            s.validate()?;
        }
        if let Some(p) = &self.speckle {
            if p.offsets_deg.is_empty() {
                return Err(EnsembleError::Invalid("speckle offsets must not be empty".into()));
            }
            for a in std::iter::once(0.0).chain(p.offsets_deg.iter().copied()) {
                let th = p.reference_deg + a;
                if !(th > 90.0 && th < 270.0) {
                    return Err(EnsembleError::Invalid(format!(
                        "speckle incidence {th} deg outside (90, 270)"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Every incident direction needed by the states and the speckle probe,
    /// without duplicates, in first-use order.
    pub fn incident_directions(&self) -> Result<Vec<Direction>, EnsembleError> {
        let mut dirs: Vec<Direction> = Vec::new();
        let mut push = |d: Direction| {
            if !dirs.iter().any(|x| x.same_as(&d)) {
                dirs.push(d);
            }
        };
        for s in &self.states {
            for d in crate::qstates::incident_directions(s)? {
                push(d);
            }
        }
        if let Some(p) = &self.speckle {
            push(Direction::from_degrees(p.reference_deg, 0.0));
            for o in &p.offsets_deg {
                push(Direction::from_degrees(p.reference_deg + o, 0.0));
            }
        }
        Ok(dirs)
    }
}

/// Curves of one state in one realization.
#[derive(Debug, Clone, PartialEq)]
pub struct RealizationCurves {
    pub i1: Vec<f64>,
    pub i2: Vec<f64>,
    pub c: Vec<f64>,
    /// Row-major `grid x grid` (I2, I1 I1', C) when pairwise recording is on.
    pub pairwise: Option<[Vec<f64>; 3]>,
}

impl RealizationCurves {
    pub fn from_matrix(
        s: &ScatteringMatrix,
        cols: &StateColumns,
        pairwise: bool,
    ) -> Result<Self, StateError> {
        let n = s.rows;
        let i1: Vec<f64> = (0..n).map(|r| cols.i1(s.row(r))).collect();
        let i2: Vec<f64> = (0..n).map(|r| cols.i2(s.row(r), s.row(r))).collect();
        let c = (0..n)
            .map(|r| {
                if !(i1[r] > 0.0) {
                    return Err(StateError::DarkChannel(r));
                }
                Ok(cols.qe_factor * i2[r] / (i1[r] * i1[r]))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let pairwise = if pairwise {
            let mut p2 = Vec::with_capacity(n * n);
            let mut p11 = Vec::with_capacity(n * n);
            let mut pc = Vec::with_capacity(n * n);
            for i in 0..n {
                for j in 0..n {
                    let v = cols.i2(s.row(i), s.row(j));
                    p2.push(v);
                    p11.push(i1[i] * i1[j]);
                    pc.push(cols.qe_factor * v / (i1[i] * i1[j]));
                }
            }
            Some([p2, p11, pc])
        } else {
            None
        };
        Ok(Self { i1, i2, c, pairwise })
    }
}

/// Partial sums over a set of realizations.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub count: u64,
    pub sum_i1: Vec<f64>,
    /// Sum of `I1(k) I1(k)`, the coinciding-detector denominator.
    pub sum_i1_sq: Vec<f64>,
    pub sum_i2: Vec<f64>,
    pub sum_i2_sq: Vec<f64>,
    pub sum_c: Vec<f64>,
    pub sum_c_sq: Vec<f64>,
    /// Sums of pairwise (I2, I1 I1', C) over `grid x grid`.
    pub pairwise: Option<[Vec<f64>; 3]>,
}

impl Moments {
    fn zeros(n: usize, pairwise: bool) -> Self {
        Self {
            count: 0,
            sum_i1: vec![0.0; n],
            sum_i1_sq: vec![0.0; n],
            sum_i2: vec![0.0; n],
            sum_i2_sq: vec![0.0; n],
            sum_c: vec![0.0; n],
            sum_c_sq: vec![0.0; n],
            pairwise: pairwise.then(|| [vec![0.0; n * n], vec![0.0; n * n], vec![0.0; n * n]]),
        }
    }

    fn add(&mut self, r: &RealizationCurves) {
        self.count += 1;
        for g in 0..self.sum_i1.len() {
            self.sum_i1[g] += r.i1[g];
            self.sum_i1_sq[g] += r.i1[g] * r.i1[g];
            self.sum_i2[g] += r.i2[g];
            self.sum_i2_sq[g] += r.i2[g] * r.i2[g];
            self.sum_c[g] += r.c[g];
            self.sum_c_sq[g] += r.c[g] * r.c[g];
        }
        if let (Some(acc), Some(x)) = (self.pairwise.as_mut(), r.pairwise.as_ref()) {
            for (a, b) in acc.iter_mut().zip(x) {
                add_into(a, b);
            }
        }
    }

    fn combine(&mut self, o: &Moments) {
        self.count += o.count;
        add_into(&mut self.sum_i1, &o.sum_i1);
        add_into(&mut self.sum_i1_sq, &o.sum_i1_sq);
        add_into(&mut self.sum_i2, &o.sum_i2);
        add_into(&mut self.sum_i2_sq, &o.sum_i2_sq);
        add_into(&mut self.sum_c, &o.sum_c);
        add_into(&mut self.sum_c_sq, &o.sum_c_sq);
        if let (Some(a), Some(b)) = (self.pairwise.as_mut(), o.pairwise.as_ref()) {
            for (x, y) in a.iter_mut().zip(b) {
                add_into(x, y);
            }
        }
    }

    fn correlation(&self, qe: f64, order: AveragingOrder, thetas: &[f64]) -> Result<Vec<f64>, EnsembleError> {
        let n = self.count as f64;
        (0..self.sum_i1.len())
            .map(|g| match order {
                AveragingOrder::RatioOfMeans => {
                    if !(self.sum_i1[g] > 0.0) || !(self.sum_i1_sq[g] > 0.0) {
                        return Err(EnsembleError::ZeroMean { theta: thetas[g] });
                    }
                    Ok(qe * self.sum_i2[g] / self.sum_i1_sq[g])
                }
                AveragingOrder::MeanOfRatios => Ok(self.sum_c[g] / n),
            })
            .collect()
    }
}

fn add_into(a: &mut [f64], b: &[f64]) {
    for (x, y) in a.iter_mut().zip(b) {
        *x += y;
    }
}

/// Mergeable per-state accumulator keyed by canonical block index.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleAccumulator {
    pub block_size: usize,
    pub qe_factor: f64,
    pub thetas: Vec<f64>,
    pub pairwise: bool,
    pub blocks: BTreeMap<u64, Moments>,
}

impl EnsembleAccumulator {
    pub fn new(grid: &AngularGrid, qe_factor: f64, block_size: usize, pairwise: bool) -> Self {
        Self {
            block_size,
            qe_factor,
            thetas: grid.thetas.clone(),
            pairwise,
            blocks: BTreeMap::new(),
        }
    }

    pub fn absorb(&mut self, realization_index: u64, curves: &RealizationCurves) {
        let key = realization_index / self.block_size as u64;
        let n = self.thetas.len();
        let pairwise = self.pairwise;
        self.blocks
            .entry(key)
            .or_insert_with(|| Moments::zeros(n, pairwise))
            .add(curves);
    }

    /// Union of two accumulators. Blocks present in both are summed, which
    /// only happens if one block was split between workers.
    pub fn merge(mut self, other: EnsembleAccumulator) -> Result<Self, EnsembleError> {
        if self.thetas != other.thetas || self.block_size != other.block_size || self.pairwise != other.pairwise {
            return Err(EnsembleError::Shape);
        }
        for (k, m) in other.blocks {
            match self.blocks.get_mut(&k) {
                Some(existing) => existing.combine(&m),
                None => {
                    self.blocks.insert(k, m);
                }
            }
        }
        Ok(self)
    }

    pub fn count(&self) -> u64 {
        self.blocks.values().map(|m| m.count).sum()
    }

    /// Sums over all blocks, reduced in block order.
    pub fn totals(&self) -> Moments {
        let mut total = Moments::zeros(self.thetas.len(), self.pairwise);
        for m in self.blocks.values() {
            total.combine(m);
        }
        total
    }

    /// Correlation estimates from consecutive groups of `group` blocks.
    pub fn grouped_correlation(&self, order: AveragingOrder, group: usize) -> Result<Vec<Vec<f64>>, EnsembleError> {
        let group = group.max(1);
        let blocks: Vec<&Moments> = self.blocks.values().collect();
        blocks
            .chunks(group)
            .filter(|c| c.len() == group)
            .map(|chunk| {
                let mut m = Moments::zeros(self.thetas.len(), false);
                for b in chunk {
                    m.combine(b);
                }
                m.correlation(self.qe_factor, order, &self.thetas)
            })
            .collect()
    }

    /// Mean over angles of the sample variance of grouped estimates.
    pub fn across_block_variance(&self, order: AveragingOrder, group: usize) -> Result<f64, EnsembleError> {
        let est = self.grouped_correlation(order, group)?;
        Ok(mean_across_angles_variance(&est))
    }
}

fn mean_across_angles_variance(est: &[Vec<f64>]) -> f64 {
    let n = est.len();
    if n < 2 {
        return f64::NAN;
    }
    let g = est[0].len();
    let mut total = 0.0;
    for a in 0..g {
        let mean = est.iter().map(|e| e[a]).sum::<f64>() / n as f64;
        total += est.iter().map(|e| (e[a] - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    }
    total / g as f64
}

pub fn averaged_correlation(acc: &EnsembleAccumulator, order: AveragingOrder) -> Result<Vec<f64>, EnsembleError> {
    if acc.count() == 0 {
        return Err(EnsembleError::Invalid("empty accumulator".into()));
    }
    acc.totals().correlation(acc.qe_factor, order, &acc.thetas)
}

/// Rescales a curve so that its maximum equals `peak`.
pub fn normalize_to_peak(curve: &[f64], peak: f64) -> Result<Vec<f64>, EnsembleError> {
    let max = curve.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(max > 0.0) {
        return Err(EnsembleError::ZeroCurve);
    }
    Ok(curve.iter().map(|v| v / max * peak).collect())
}

/// Ensemble averages of one state.
#[derive(Debug, Clone, PartialEq)]
pub struct AveragedCurves {
    pub c_bar: Vec<f64>,
    pub c_prime_bar: Vec<f64>,
    pub i1_bar: Vec<f64>,
    pub i2_bar: Vec<f64>,
    pub i2_bar_normalized: Vec<f64>,
    pub n_realizations: u64,
    /// Standard errors from the spread of block estimates (NaN with fewer
    /// than two blocks).
    pub stderr: CurveErrors,
    /// Mean pairwise correlation `mean(I2(i,j)) / mean(I1(i) I1(j))`,
    /// row-major, when recorded.
    pub c_bar_pairwise: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurveErrors {
    pub c_bar: Vec<f64>,
    pub c_prime_bar: Vec<f64>,
    pub i1_bar: Vec<f64>,
    pub i2_bar: Vec<f64>,
}

impl AveragedCurves {
    pub fn from_accumulator(acc: &EnsembleAccumulator) -> Result<Self, EnsembleError> {
        let total = acc.totals();
        let n = total.count as f64;
        if total.count == 0 {
            return Err(EnsembleError::Invalid("empty accumulator".into()));
        }
        let c_bar = total.correlation(acc.qe_factor, AveragingOrder::RatioOfMeans, &acc.thetas)?;
        let c_prime_bar = total.correlation(acc.qe_factor, AveragingOrder::MeanOfRatios, &acc.thetas)?;
        let i1_bar: Vec<f64> = total.sum_i1.iter().map(|v| v / n).collect();
        let i2_bar: Vec<f64> = total.sum_i2.iter().map(|v| v / n).collect();
        let i2_bar_normalized = normalize_to_peak(&i2_bar, 2.0)?;

        let blocks: Vec<&Moments> = acc.blocks.values().collect();
        let per_block = |f: &dyn Fn(&Moments) -> Result<Vec<f64>, EnsembleError>| -> Result<Vec<f64>, EnsembleError> {
            let est = blocks.iter().map(|b| f(b)).collect::<Result<Vec<_>, _>>()?;
            let nb = est.len();
            Ok((0..acc.thetas.len())
                .map(|g| {
                    if nb < 2 {
                        return f64::NAN;
                    }
                    let mean = est.iter().map(|e| e[g]).sum::<f64>() / nb as f64;
                    let var = est.iter().map(|e| (e[g] - mean).powi(2)).sum::<f64>() / (nb - 1) as f64;
                    (var / nb as f64).sqrt()
                })
                .collect())
        };
        let stderr = CurveErrors {
            c_bar: per_block(&|b| b.correlation(acc.qe_factor, AveragingOrder::RatioOfMeans, &acc.thetas))?,
            c_prime_bar: per_block(&|b| b.correlation(acc.qe_factor, AveragingOrder::MeanOfRatios, &acc.thetas))?,
            i1_bar: per_block(&|b| Ok(b.sum_i1.iter().map(|v| v / b.count as f64).collect()))?,
            i2_bar: per_block(&|b| Ok(b.sum_i2.iter().map(|v| v / b.count as f64).collect()))?,
        };
        let c_bar_pairwise = total.pairwise.as_ref().map(|[i2, i11, _]| {
            i2.iter()
                .zip(i11)
                .map(|(a, b)| acc.qe_factor * a / b)
                .collect()
        });
        Ok(Self {
            c_bar,
            c_prime_bar,
            i1_bar,
            i2_bar,
            i2_bar_normalized,
            n_realizations: total.count,
            stderr,
            c_bar_pairwise,
        })
    }
}

/// Field moments for speckle correlation between the reference incidence and
/// each offset, per detection angle.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeckleMoments {
    pub count: u64,
    /// `[offset][angle]` sums of |A1|^2, |A2|^2, |A1|^4, |A2|^4, |A1 A2|^2.
    pub intensity: Vec<Vec<[f64; 5]>>,
    /// `[offset][angle]` sums of `A1 conj(A2)`.
    pub cross: Vec<Vec<Complex64>>,
}

impl SpeckleMoments {
    fn zeros(n_offsets: usize, n_angles: usize) -> Self {
        Self {
            count: 0,
            intensity: vec![vec![[0.0; 5]; n_angles]; n_offsets],
            cross: vec![vec![Complex64::new(0.0, 0.0); n_angles]; n_offsets],
        }
    }

    fn combine(&mut self, o: &SpeckleMoments) {
        self.count += o.count;
        for (a, b) in self.intensity.iter_mut().zip(&o.intensity) {
            for (x, y) in a.iter_mut().zip(b) {
                for q in 0..5 {
                    x[q] += y[q];
                }
            }
        }
        for (a, b) in self.cross.iter_mut().zip(&o.cross) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpeckleAccumulator {
    pub reference_deg: f64,
    pub offsets_deg: Vec<f64>,
    pub thetas: Vec<f64>,
    pub block_size: usize,
    pub blocks: BTreeMap<u64, SpeckleMoments>,
    reference_col: usize,
    offset_cols: Vec<usize>,
}

impl SpeckleAccumulator {
    pub fn new(probe: &SpeckleProbe, dirs: &[Direction], grid: &AngularGrid, block_size: usize) -> Result<Self, EnsembleError> {
        let find = |deg: f64| {
            let d = Direction::from_degrees(deg, 0.0);
            dirs.iter()
                .position(|x| x.same_as(&d))
                .ok_or(EnsembleError::Invalid(format!("no column for incidence {deg} deg")))
        };
        Ok(Self {
            reference_deg: probe.reference_deg,
            offsets_deg: probe.offsets_deg.clone(),
            thetas: grid.thetas.clone(),
            block_size,
            blocks: BTreeMap::new(),
            reference_col: find(probe.reference_deg)?,
            offset_cols: probe
                .offsets_deg
                .iter()
                .map(|o| find(probe.reference_deg + o))
                .collect::<Result<_, _>>()?,
        })
    }

    pub fn absorb(&mut self, realization_index: u64, s: &ScatteringMatrix) {
        let key = realization_index / self.block_size as u64;
        let (no, na) = (self.offset_cols.len(), self.thetas.len());
        let m = self.blocks.entry(key).or_insert_with(|| SpeckleMoments::zeros(no, na));
        m.count += 1;
        for (o, &col) in self.offset_cols.iter().enumerate() {
            for g in 0..na {
                let a1 = s.get(g, self.reference_col);
                let a2 = s.get(g, col);
                let (p1, p2) = (a1.norm_sqr(), a2.norm_sqr());
                let acc = &mut m.intensity[o][g];
                acc[0] += p1;
                acc[1] += p2;
                acc[2] += p1 * p1;
                acc[3] += p2 * p2;
                acc[4] += p1 * p2;
                m.cross[o][g] += a1 * a2.conj();
            }
        }
    }

    pub fn merge(mut self, other: SpeckleAccumulator) -> Result<Self, EnsembleError> {
        if self.thetas != other.thetas || self.offsets_deg != other.offsets_deg || self.block_size != other.block_size {
            return Err(EnsembleError::Shape);
        }
        for (k, m) in other.blocks {
            match self.blocks.get_mut(&k) {
                Some(e) => e.combine(&m),
                None => {
                    self.blocks.insert(k, m);
                }
            }
        }
        Ok(self)
    }

    pub fn totals(&self) -> SpeckleMoments {
        let mut t = SpeckleMoments::zeros(self.offsets_deg.len(), self.thetas.len());
        for m in self.blocks.values() {
            t.combine(m);
        }
        t
    }
}

/// Output of [`run_ensemble`] for one state.
#[derive(Debug, Clone, PartialEq)]
pub struct StateResult {
    pub spec: InputStateSpec,
    pub curves: AveragedCurves,
    pub accumulator: EnsembleAccumulator,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleOutput {
    pub states: Vec<StateResult>,
    pub speckle: Option<SpeckleAccumulator>,
    pub wall_time_s: f64,
}

struct BlockResult {
    states: Vec<EnsembleAccumulator>,
    speckle: Option<SpeckleAccumulator>,
}

/// Scene of realization `index`. Fixed layouts are reused as-is.
pub fn realization_scene(spec: &SceneSpec, index: u64, master_seed: u64) -> Result<Scene, EnsembleError> {
    let fail = |e: crate::scene::SceneError| EnsembleError::Realization {
        index,
        reason: e.to_string(),
    };
    match spec.layout {
        Layout::Deterministic { .. } => Scene::from_fixed(spec).map_err(fail),
        Layout::RandomCube { .. } => sample_scene(spec, index, master_seed).map_err(fail),
    }
}

fn coupling_for(mode: CouplingMode, master_seed: u64, index: u64) -> Coupling {
    match mode {
        CouplingMode::Reciprocal => Coupling::Reciprocal,
        CouplingMode::ScrambledColumns => Coupling::ScrambledColumns {
            seed: splitmix(master_seed ^ splitmix(index.wrapping_add(0x5bd1_e995))),
        },
    }
}

pub(crate) fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Scattering matrix of realization `index` for the given incident set.
pub fn realization_matrix(
    spec: &EnsembleSpec,
    dirs: &[Direction],
    index: u64,
) -> Result<ScatteringMatrix, EnsembleError> {
    let scene = realization_scene(&spec.scene, index, spec.master_seed)?;
    let t = crate::solver::t_matrix(K0, scene.spec.particle_radius, scene.spec.refractive_index)
        .map_err(|e| EnsembleError::Realization { index, reason: e.to_string() })?;
    let coupling = coupling_for(spec.coupling, spec.master_seed, index);
    let medium = Medium::with_t(scene.positions, K0, t, coupling)
        .map_err(|e| EnsembleError::Realization { index, reason: e.to_string() })?;
    medium
        .scattering_matrix(dirs, &spec.grid)
        .map_err(|e| EnsembleError::Realization { index, reason: e.to_string() })
}

/// Runs all realizations on `workers` threads and averages every state.
pub fn run_ensemble(spec: &EnsembleSpec, workers: usize) -> Result<EnsembleOutput, EnsembleError> {
    if workers == 0 {
        return Err(EnsembleError::Invalid("workers must be at least 1".into()));
    }
    spec.validate()?;
    let start = Instant::now();
    let dirs = spec.incident_directions()?;
    let columns = spec
        .states
        .iter()
        .map(|s| StateColumns::resolve(s, &dirs))
        .collect::<Result<Vec<_>, _>>()?;
    let speckle_template = spec
        .speckle
        .as_ref()
        .map(|p| SpeckleAccumulator::new(p, &dirs, &spec.grid, spec.block_size))
        .transpose()?;

    let n = spec.n_realizations as u64;
    let bs = spec.block_size as u64;
    let n_blocks = n.div_ceil(bs);

    let run_block = |b: u64| -> Result<BlockResult, EnsembleError> {
        let mut states: Vec<EnsembleAccumulator> = spec
            .states
            .iter()
            .map(|s| EnsembleAccumulator::new(&spec.grid, s.qe_factor, spec.block_size, spec.record_pairwise))
            .collect();
        let mut speckle = speckle_template.clone();
        for index in (b * bs)..((b + 1) * bs).min(n) {
            let s = realization_matrix(spec, &dirs, index)?;
            for (acc, cols) in states.iter_mut().zip(&columns) {
                let curves = RealizationCurves::from_matrix(&s, cols, spec.record_pairwise)
                    .map_err(|e| EnsembleError::Realization { index, reason: e.to_string() })?;
                acc.absorb(index, &curves);
            }
            if let Some(sp) = speckle.as_mut() {
                sp.absorb(index, &s);
            }
        }
        Ok(BlockResult { states, speckle })
    };

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| EnsembleError::Invalid(e.to_string()))?;
    let blocks: Vec<BlockResult> =
        pool.install(|| (0..n_blocks).into_par_iter().map(run_block).collect::<Result<Vec<_>, _>>())?;

    let mut accs: Vec<EnsembleAccumulator> = spec
        .states
        .iter()
        .map(|s| EnsembleAccumulator::new(&spec.grid, s.qe_factor, spec.block_size, spec.record_pairwise))
        .collect();
    let mut speckle = speckle_template;
    for block in blocks {
        for (acc, part) in accs.iter_mut().zip(block.states) {
            *acc = std::mem::replace(acc, part.clone()).merge(part)?;
        }
        if let (Some(total), Some(part)) = (speckle.take(), block.speckle) {
            speckle = Some(total.merge(part)?);
        }
    }
    let states = spec
        .states
        .iter()
        .zip(accs)
        .map(|(s, acc)| {
            Ok(StateResult {
                spec: s.clone(),
                curves: AveragedCurves::from_accumulator(&acc)?,
                accumulator: acc,
            })
        })
        .collect::<Result<Vec<_>, EnsembleError>>()?;
    Ok(EnsembleOutput {
        states,
        speckle,
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}
