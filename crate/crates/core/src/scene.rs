//! Scatterer arrangements.
//!
//! Two kinds of layouts are supported: fixed few-particle configurations with
//! explicit positions, and uniformly random clouds of hard spheres inside a
//! cube centered at the origin. All lengths are in units of the vacuum
//! wavelength.

use std::f64::consts::PI;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default particle radius, `λ/2π`.
pub const DEFAULT_RADIUS: f64 = 1.0 / (2.0 * PI);
/// Default refractive index of the scatterers.
pub const DEFAULT_INDEX: f64 = 1.5;
/// Maximum number of candidate draws per particle before sampling gives up.
pub const RETRY_BUDGET: usize = 10_000;

pub type Point = [f64; 3];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SceneError {
    #[error("invalid scene: {0}")]
    Invalid(String),
    #[error("density undefined for deterministic layout")]
    DensityUndefined,
    #[error("sampling requires a random cube layout")]
    NotRandom,
    #[error("packing failure: could not place particle {particle} of {total} within {budget} draws")]
    PackingFailure {
        particle: usize,
        total: usize,
        budget: usize,
    },
    #[error("overlap: particles {0} and {1} are closer than the minimum separation")]
    Overlap(usize, usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Layout {
    Deterministic { positions: Vec<Point> },
    RandomCube { n_particles: usize, box_edge: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub layout: Layout,
    #[serde(default = "default_radius")]
    pub particle_radius: f64,
    #[serde(default = "default_index")]
    pub refractive_index: f64,
    /// Center-to-center lower bound. Defaults to `2 * particle_radius`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_separation: Option<f64>,
}

fn default_radius() -> f64 {
    DEFAULT_RADIUS
}

fn default_index() -> f64 {
    DEFAULT_INDEX
}

impl SceneSpec {
    pub fn random_cube(n_particles: usize, box_edge: f64) -> Self {
        Self {
            layout: Layout::RandomCube {
                n_particles,
                box_edge,
            },
            particle_radius: DEFAULT_RADIUS,
            refractive_index: DEFAULT_INDEX,
            min_separation: None,
        }
    }

    pub fn deterministic(positions: Vec<Point>) -> Self {
        Self {
            layout: Layout::Deterministic { positions },
            particle_radius: DEFAULT_RADIUS,
            refractive_index: DEFAULT_INDEX,
            min_separation: None,
        }
    }

    pub fn min_separation(&self) -> f64 {
        self.min_separation.unwrap_or(2.0 * self.particle_radius)
    }

    pub fn n_particles(&self) -> usize {
        match &self.layout {
            Layout::Deterministic { positions } => positions.len(),
            Layout::RandomCube { n_particles, .. } => *n_particles,
        }
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        let r = self.particle_radius;
        if !(r > 0.0 && r.is_finite()) {
            return Err(SceneError::Invalid(format!(
                "particle_radius must be positive, got {r}"
            )));
        }
        if !(self.refractive_index > 1.0 && self.refractive_index.is_finite()) {
            return Err(SceneError::Invalid(format!(
                "refractive_index must exceed 1, got {}",
                self.refractive_index
            )));
        }
        let min_sep = self.min_separation();
        match &self.layout {
            Layout::RandomCube {
                n_particles,
                box_edge,
            } => {
                if *n_particles == 0 {
                    return Err(SceneError::Invalid("n_particles must be at least 1".into()));
                }
                if !(*box_edge > 0.0 && box_edge.is_finite()) {
                    return Err(SceneError::Invalid(format!(
                        "box_edge must be positive, got {box_edge}"
                    )));
                }
                if !(min_sep >= 2.0 * r) {
                    return Err(SceneError::Invalid(format!(
                        "min_separation {min_sep} is below twice the particle radius {r}"
                    )));
                }
            }
            Layout::Deterministic { positions } => {
                if positions.is_empty() {
                    return Err(SceneError::Invalid("positions must not be empty".into()));
                }
                if positions.iter().flatten().any(|c| !c.is_finite()) {
                    return Err(SceneError::Invalid("positions must be finite".into()));
                }
                if let Some((i, j)) = closest_violation(positions, 2.0 * r) {
                    return Err(SceneError::Overlap(i, j));
                }
            }
        }
        Ok(())
    }
}

/// Volume fraction `4π r³ N / (3 L³)` occupied by the particles.
pub fn density(spec: &SceneSpec) -> Result<f64, SceneError> {
    match &spec.layout {
        Layout::Deterministic { .. } => Err(SceneError::DensityUndefined),
        Layout::RandomCube {
            n_particles,
            box_edge,
        } => {
            let r = spec.particle_radius;
            Ok(4.0 * PI * r.powi(3) * *n_particles as f64 / (3.0 * box_edge.powi(3)))
        }
    }
}

/// A concrete arrangement of scatterers.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub positions: Vec<Point>,
    pub realization_seed: u64,
    pub spec: SceneSpec,
}

impl Scene {
    /// Wraps a deterministic spec into a scene without sampling.
    pub fn from_fixed(spec: &SceneSpec) -> Result<Self, SceneError> {
        spec.validate()?;
        match &spec.layout {
            Layout::Deterministic { positions } => Ok(Self {
                positions: positions.clone(),
                realization_seed: 0,
                spec: spec.clone(),
            }),
            Layout::RandomCube { .. } => Err(SceneError::Invalid(
                "random layouts must be sampled".into(),
            )),
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "x,y,z")?;
        for p in &self.positions {
            writeln!(out, "{:.17e},{:.17e},{:.17e}", p[0], p[1], p[2])?;
        }
        Ok(())
    }
}

/// Counter-based generator for one realization: the stream is selected by the
/// realization index, so the draw sequence does not depend on which worker
/// handles it or in what order.
pub fn realization_rng(master_seed: u64, realization_index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(realization_index);
    rng
}

/// Draws one realization of a random cube layout by sequential rejection of
/// overlapping candidates.
pub fn sample_scene(
    spec: &SceneSpec,
    realization_index: u64,
    master_seed: u64,
) -> Result<Scene, SceneError> {
    spec.validate()?;
    let (n, edge) = match &spec.layout {
        Layout::RandomCube {
            n_particles,
            box_edge,
        } => (*n_particles, *box_edge),
        Layout::Deterministic { .. } => return Err(SceneError::NotRandom),
    };
    let min_sep = spec.min_separation();
    let min_sep2 = min_sep * min_sep;
    let half = 0.5 * edge;

    let mut rng = realization_rng(master_seed, realization_index);
    let mut grid = CellGrid::new(edge, min_sep, n);
    let mut positions: Vec<Point> = Vec::with_capacity(n);
    for particle in 0..n {
        let mut placed = false;
        for _ in 0..RETRY_BUDGET {
            let candidate = [
                edge * rng.random::<f64>() - half,
                edge * rng.random::<f64>() - half,
                edge * rng.random::<f64>() - half,
            ];
            if grid.clear(&candidate, &positions, min_sep2) {
                grid.insert(&candidate, positions.len());
                positions.push(candidate);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(SceneError::PackingFailure {
                particle,
                total: n,
                budget: RETRY_BUDGET,
            });
        }
    }
    Ok(Scene {
        positions,
        realization_seed: master_seed ^ realization_index.rotate_left(32),
        spec: spec.clone(),
    })
}

/// Uniform cell list over the cube used to reject overlapping candidates
/// without scanning every accepted particle.
struct CellGrid {
    cells_per_side: usize,
    cell: f64,
    half: f64,
    buckets: Vec<Vec<usize>>,
}

impl CellGrid {
    fn new(edge: f64, min_sep: f64, n: usize) -> Self {
        let by_sep = (edge / min_sep).floor().max(1.0);
        let by_count = (n as f64).cbrt().ceil().max(1.0);
        let cells_per_side = by_sep.min(by_count).min(256.0) as usize;
        let cells_per_side = cells_per_side.max(1);
        Self {
            cells_per_side,
            cell: edge / cells_per_side as f64,
            half: 0.5 * edge,
            buckets: vec![Vec::new(); cells_per_side.pow(3)],
        }
    }

    fn coords(&self, p: &Point) -> [usize; 3] {
        let idx = |x: f64| {
            let c = ((x + self.half) / self.cell).floor() as isize;
            c.clamp(0, self.cells_per_side as isize - 1) as usize
        };
        [idx(p[0]), idx(p[1]), idx(p[2])]
    }

    fn flat(&self, c: [usize; 3]) -> usize {
        (c[0] * self.cells_per_side + c[1]) * self.cells_per_side + c[2]
    }

    fn insert(&mut self, p: &Point, index: usize) {
        let f = self.flat(self.coords(p));
        self.buckets[f].push(index);
    }

    fn clear(&self, p: &Point, accepted: &[Point], min_sep2: f64) -> bool {
        let c = self.coords(p);
        let n = self.cells_per_side as isize;
        for dx in -1..=1isize {
            for dy in -1..=1isize {
                for dz in -1..=1isize {
                    let (x, y, z) = (c[0] as isize + dx, c[1] as isize + dy, c[2] as isize + dz);
                    if x < 0 || y < 0 || z < 0 || x >= n || y >= n || z >= n {
                        continue;
                    }
                    let f = self.flat([x as usize, y as usize, z as usize]);
                    for &j in &self.buckets[f] {
                        if dist2(p, &accepted[j]) < min_sep2 {
                            return false;
                        }
                    }
                }
            }
        }
        true
    }
}

pub(crate) fn dist2(a: &Point, b: &Point) -> f64 {
    let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
}

fn closest_violation(positions: &[Point], min_sep: f64) -> Option<(usize, usize)> {
    let min2 = min_sep * min_sep;
    for i in 0..positions.len() {
        for j in (i + 1)..positions.len() {
            if dist2(&positions[i], &positions[j]) < min2 * (1.0 - 1e-12) {
                return Some((i, j));
            }
        }
    }
    None
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FixedLayout {
    Pair,
    TripleLine,
    Triangle,
    Quad,
}

impl std::str::FromStr for FixedLayout {
    type Err = SceneError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "pair" => Ok(Self::Pair),
            "triple_line" => Ok(Self::TripleLine),
            "triangle" => Ok(Self::Triangle),
            "quad" => Ok(Self::Quad),
            other => Err(SceneError::Invalid(format!("unknown layout '{other}'"))),
        }
    }
}

/// Few-particle layouts with nearest-neighbour spacing `d`, centered at the
/// origin. Line layouts lie on the x axis; the triangle and the square lie
/// in the x-y plane, transverse to normal incidence.
pub fn fixed_layout(name: FixedLayout, spacing: f64) -> Result<SceneSpec, SceneError> {
    let r = DEFAULT_RADIUS;
    if !(spacing >= 2.0 * r) {
        return Err(SceneError::Invalid(format!(
            "spacing {spacing} overlaps particles of radius {r}"
        )));
    }
    let d = spacing;
    let positions = match name {
        FixedLayout::Pair => vec![[-0.5 * d, 0.0, 0.0], [0.5 * d, 0.0, 0.0]],
        FixedLayout::TripleLine => vec![[-d, 0.0, 0.0], [0.0, 0.0, 0.0], [d, 0.0, 0.0]],
        FixedLayout::Triangle => {
            let rc = d / 3f64.sqrt();
            (0..3)
                .map(|k| {
                    let a = 2.0 * PI * k as f64 / 3.0;
                    [rc * a.cos(), rc * a.sin(), 0.0]
                })
                .collect()
        }
        FixedLayout::Quad => vec![
            [-0.5 * d, -0.5 * d, 0.0],
            [0.5 * d, -0.5 * d, 0.0],
            [0.5 * d, 0.5 * d, 0.0],
            [-0.5 * d, 0.5 * d, 0.0],
        ],
    };
    let spec = SceneSpec::deterministic(positions);
    spec.validate()?;
    Ok(spec)
}
