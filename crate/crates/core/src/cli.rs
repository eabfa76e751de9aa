//! Command-line front end: run configurations, subcommands and output files.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::analytics::{
    count_peaks, fit_cone, gaussian_monte_carlo, gaussian_prediction, gaussian_prediction_from_wick,
    mixed_vs_pure_contrast, speckle_correlation, ConeFitOptions, Window,
};
use crate::ensemble::{
    realization_matrix, run_ensemble, splitmix, AveragedCurves, AveragingOrder, CouplingMode, EnsembleOutput,
    EnsembleSpec, SpeckleProbe, DEFAULT_BLOCK_SIZE,
};
use crate::oracle::oracle_currents;
use crate::qstates::{correlation_curve, InputStateSpec, StateColumns, StateKind};
use crate::scene::{fixed_layout, FixedLayout, Layout, SceneSpec};
use crate::solver::{AngularGrid, Medium, K0};
use crate::Error;

fn default_workers() -> usize {
    1
}

fn default_block_size() -> usize {
    DEFAULT_BLOCK_SIZE
}

fn default_output() -> PathBuf {
    PathBuf::from("output")
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleConfig {
    pub n_realizations: usize,
    pub master_seed: u64,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default = "default_block_size")]
    pub block_size: usize,
    #[serde(default)]
    pub record_pairwise: bool,
    #[serde(default)]
    pub coupling: CouplingMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub min_deg: f64,
    pub max_deg: f64,
    pub step_deg: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            min_deg: -90.0,
            max_deg: 90.0,
            step_deg: 0.25,
        }
    }
}

impl GridConfig {
    pub fn build(&self) -> Result<AngularGrid, Error> {
        if !(self.min_deg >= -90.0 && self.max_deg <= 90.0) {
            return Err(Error::Config(format!(
                "grid: range {}..{} deg exceeds [-90, 90]",
                self.min_deg, self.max_deg
            )));
        }
        AngularGrid::uniform_degrees(self.min_deg, self.max_deg, self.step_deg)
            .map_err(|e| Error::Config(format!("grid: {e}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpeckleConfig {
    pub reference_deg: f64,
    pub offsets_deg: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Analyses {
    #[serde(default = "default_true")]
    pub cone_fit: bool,
    #[serde(default)]
    pub gaussian_compare: bool,
    #[serde(default)]
    pub averaging_order_compare: bool,
    /// Half-width in degrees of the windows excluded around specular
    /// directions when estimating cone backgrounds.
    #[serde(default = "default_specular_window")]
    pub specular_window_deg: f64,
    #[serde(default)]
    pub write_smatrix: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub speckle: Option<SpeckleConfig>,
}

fn default_specular_window() -> f64 {
    15.0
}

impl Default for Analyses {
    fn default() -> Self {
        Self {
            cone_fit: true,
            gaussian_compare: false,
            averaging_order_compare: false,
            specular_window_deg: default_specular_window(),
            write_smatrix: false,
            speckle: None,
        }
    }
}

/// A complete experiment definition, read from TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    pub scene: SceneSpec,
    #[serde(default)]
    pub states: Vec<InputStateSpec>,
    pub ensemble: EnsembleConfig,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub analyses: Analyses,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, Error> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, Error> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String, Error> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Checks every nested specification. `require_states` is false for the
    /// speckle command, which needs no two-photon state.
    pub fn validate(&self, require_states: bool) -> Result<(), Error> {
        self.scene.validate().map_err(|e| Error::Config(format!("scene: {e}")))?;
        if require_states && self.states.is_empty() {
            return Err(Error::Config("states: at least one state is required".into()));
        }
        for (i, s) in self.states.iter().enumerate() {
            s.validate().map_err(|e| Error::Config(format!("states[{i}]: {e}")))?;
            if !(s.qe_factor > 0.0 && s.qe_factor.is_finite()) {
                return Err(Error::Config(format!("states[{i}].qe_factor: must be positive")));
            }
            if let Some(j) = self.states[..i].iter().position(|o| o.label() == s.label()) {
                return Err(Error::Config(format!("states[{i}]: duplicates states[{j}]")));
            }
        }
        let e = &self.ensemble;
        if e.n_realizations == 0 {
            return Err(Error::Config("ensemble.n_realizations: must be at least 1".into()));
        }
        if e.workers == 0 {
            return Err(Error::Config("ensemble.workers: must be at least 1".into()));
        }
        if e.block_size == 0 {
            return Err(Error::Config("ensemble.block_size: must be at least 1".into()));
        }
        self.grid.build()?;
        if !(self.analyses.specular_window_deg >= 0.0) {
            return Err(Error::Config("analyses.specular_window_deg: must be nonnegative".into()));
        }
        if let Some(sp) = &self.analyses.speckle {
            if sp.offsets_deg.is_empty() {
                return Err(Error::Config("analyses.speckle.offsets_deg: must not be empty".into()));
            }
            for (i, o) in std::iter::once(&0.0).chain(&sp.offsets_deg).enumerate() {
                let th = sp.reference_deg + o;
                if !(th > 90.0 && th < 270.0) {
                    let field = if i == 0 {
                        "analyses.speckle.reference_deg".to_string()
                    } else {
                        format!("analyses.speckle.offsets_deg[{}]", i - 1)
                    };
                    return Err(Error::Config(format!("{field}: incidence {th} deg outside (90, 270)")));
                }
            }
        } else if !require_states {
            return Err(Error::Config("analyses.speckle: required by this command".into()));
        }
        Ok(())
    }

    pub fn ensemble_spec(&self) -> Result<EnsembleSpec, Error> {
        let mut spec = EnsembleSpec::new(
            self.scene.clone(),
            self.states.clone(),
            self.ensemble.n_realizations,
            self.ensemble.master_seed,
        );
        spec.grid = self.grid.build()?;
        spec.record_pairwise = self.ensemble.record_pairwise;
        spec.block_size = self.ensemble.block_size;
        spec.coupling = self.ensemble.coupling;
        spec.speckle = self.analyses.speckle.as_ref().map(|s| SpeckleProbe {
            reference_deg: s.reference_deg,
            offsets_deg: s.offsets_deg.clone(),
        });
        Ok(spec)
    }

    /// SHA-256 over the canonical JSON form of every field that affects
    /// results. Worker count and output location are excluded.
    pub fn config_hash(&self) -> String {
        let mut c = self.clone();
        c.ensemble.workers = 1;
        c.output_dir = PathBuf::new();
        let canonical = serde_json::to_string(&c).expect("config serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        digest.iter().fold(String::with_capacity(64), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }
}

/// Overrides given on the command line.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub workers: Option<usize>,
    pub seed: Option<u64>,
    pub output: Option<PathBuf>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut RunConfig) {
        if let Some(w) = self.workers {
            cfg.ensemble.workers = w;
        }
        if let Some(s) = self.seed {
            cfg.ensemble.master_seed = s;
        }
        if let Some(o) = &self.output {
            cfg.output_dir = o.clone();
        }
    }
}

fn fmt_value(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else {
        format!("{v}")
    }
}

/// Writes `theta_rad,value,stderr` rows.
pub fn write_curve_csv(path: &Path, thetas: &[f64], values: &[f64], stderr: &[f64]) -> Result<(), Error> {
    let mut out = String::from("theta_rad,value,stderr\n");
    for ((t, v), e) in thetas.iter().zip(values).zip(stderr) {
        let _ = writeln!(out, "{},{},{}", fmt_value(*t), fmt_value(*v), fmt_value(*e));
    }
    fs::write(path, out).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), Error> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Io(e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

fn create_dir(path: &Path) -> Result<(), Error> {
    fs::create_dir_all(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

/// Detection angle of the retro-reflection of incidence `deg`.
pub fn retro_angle(incidence_deg: f64) -> f64 {
    (incidence_deg - 180.0).to_radians()
}

/// Detection angle of the mirror reflection from the top face.
pub fn specular_angle(incidence_deg: f64) -> f64 {
    (180.0 - incidence_deg).to_radians()
}

/// The incidence whose retro-direction a state's cone is centered on.
pub fn cone_incidence_deg(spec: &InputStateSpec) -> f64 {
    match spec.kind {
        StateKind::CoherentSingleWave | StateKind::FockTwoSameMode => spec.theta_middle_deg + spec.delta_theta_deg,
        _ => spec.theta_middle_deg,
    }
}

fn specular_windows(spec: &InputStateSpec, half_width_deg: f64) -> Vec<Window> {
    spec.incident_angles_deg()
        .unwrap_or_default()
        .into_iter()
        .map(|a| (specular_angle(a), half_width_deg.to_radians()))
        .collect()
}

fn fit_value(thetas: &[f64], curve: &[f64], spec: &InputStateSpec, window_deg: f64) -> Value {
    match fit_cone(
        thetas,
        curve,
        retro_angle(cone_incidence_deg(spec)),
        &specular_windows(spec, window_deg),
        &ConeFitOptions::default(),
    ) {
        Ok(f) => serde_json::to_value(f).expect("fit serializes"),
        Err(e) => json!({ "error": e.to_string() }),
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn state_report(cfg: &RunConfig, grid: &AngularGrid, spec: &InputStateSpec, curves: &AveragedCurves, out: &EnsembleOutput, idx: usize) -> Result<Value, Error> {
    let mut rep = serde_json::Map::new();
    rep.insert("label".into(), json!(spec.label()));
    rep.insert("kind".into(), json!(spec.kind));
    rep.insert("schmidt_rank".into(), json!(spec.schmidt_rank));
    rep.insert("n_realizations".into(), json!(curves.n_realizations));
    rep.insert("c_bar_mean".into(), json!(mean(&curves.c_bar)));
    rep.insert("c_prime_bar_mean".into(), json!(mean(&curves.c_prime_bar)));
    if cfg.analyses.cone_fit {
        let w = cfg.analyses.specular_window_deg;
        rep.insert("cone_fit_i1".into(), fit_value(&grid.thetas, &curves.i1_bar, spec, w));
        rep.insert("cone_fit_i2".into(), fit_value(&grid.thetas, &curves.i2_bar, spec, w));
    }
    if cfg.analyses.gaussian_compare && matches!(spec.kind, StateKind::EntangledPure | StateKind::FullyMixed) {
        let pred = gaussian_prediction(spec.schmidt_rank, 1.0).map_err(|e| Error::Compute(e.to_string()))?;
        let max_dev = curves
            .c_bar
            .iter()
            .map(|c| (c - pred.c_coinciding).abs())
            .fold(0.0, f64::max);
        let mut g = json!({
            "predicted_c_coinciding": pred.c_coinciding,
            "predicted_c_distinct": pred.c_distinct,
            "measured_c_bar_mean": mean(&curves.c_bar),
            "measured_c_prime_bar_mean": mean(&curves.c_prime_bar),
            "max_abs_deviation_c_bar": max_dev,
        });
        if let Some(pw) = &curves.c_bar_pairwise {
            let n = grid.len();
            let far: Vec<f64> = (0..n)
                .flat_map(|i| (0..n).map(move |j| (i, j)))
                .filter(|(i, j)| (grid.thetas[*i] - grid.thetas[*j]).abs() > 10f64.to_radians())
                .map(|(i, j)| pw[i * n + j])
                .collect();
            if !far.is_empty() {
                g["measured_c_distinct_mean"] = json!(mean(&far));
            }
        }
        rep.insert("gaussian_compare".into(), g);
    }
    if cfg.analyses.averaging_order_compare {
        let acc = &out.states[idx].accumulator;
        let diff: Vec<f64> = curves
            .c_bar
            .iter()
            .zip(&curves.c_prime_bar)
            .map(|(a, b)| (a - b).abs())
            .collect();
        let var = |o| acc.across_block_variance(o, 1).unwrap_or(f64::NAN);
        rep.insert(
            "averaging_order_compare".into(),
            json!({
                "mean_abs_difference": mean(&diff),
                "block_variance_ratio_of_means": var(AveragingOrder::RatioOfMeans),
                "block_variance_mean_of_ratios": var(AveragingOrder::MeanOfRatios),
            }),
        );
    }
    Ok(Value::Object(rep))
}

#[derive(Debug, Clone, Serialize)]
pub struct StateFiles {
    pub label: String,
    pub files: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub master_seed: u64,
    pub config_hash: String,
    pub workers: usize,
    pub n_realizations: usize,
    pub states: Vec<StateFiles>,
    pub extra_files: Vec<String>,
    pub wall_time_s: f64,
    pub failures: Vec<String>,
    pub config: RunConfig,
}

/// Result of a finished run, mostly for tests and the sweep driver.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub output_dir: PathBuf,
    pub manifest: Manifest,
    pub report: Value,
}

fn rel(dir: &Path, path: &Path) -> String {
    path.strip_prefix(dir).unwrap_or(path).display().to_string()
}

fn write_state_curves(dir: &Path, thetas: &[f64], c: &AveragedCurves, record_pairwise: bool) -> Result<Vec<PathBuf>, Error> {
    create_dir(dir)?;
    let scale = {
        let max = c.i2_bar.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        2.0 / max
    };
    let i2n_err: Vec<f64> = c.stderr.i2_bar.iter().map(|e| e * scale).collect();
    let files: Vec<(&str, &[f64], &[f64])> = vec![
        ("i1.csv", &c.i1_bar, &c.stderr.i1_bar),
        ("i2_coinciding.csv", &c.i2_bar, &c.stderr.i2_bar),
        ("i2_normalized.csv", &c.i2_bar_normalized, &i2n_err),
        ("c_ratio_of_means.csv", &c.c_bar, &c.stderr.c_bar),
        ("c_mean_of_ratios.csv", &c.c_prime_bar, &c.stderr.c_prime_bar),
    ];
    let mut written = Vec::new();
    for (name, v, e) in files {
        let p = dir.join(name);
        write_curve_csv(&p, thetas, v, e)?;
        written.push(p);
    }
    if let (true, Some(pw)) = (record_pairwise, &c.c_bar_pairwise) {
        let n = thetas.len();
        let mut out = String::from("theta_i_rad,theta_j_rad,value\n");
        for i in 0..n {
            for j in 0..n {
                let _ = writeln!(out, "{},{},{}", thetas[i], thetas[j], fmt_value(pw[i * n + j]));
            }
        }
        let p = dir.join("c_pairwise.csv");
        fs::write(&p, out).map_err(|e| Error::Io(e.to_string()))?;
        written.push(p);
    }
    Ok(written)
}

/// Validates, runs the ensemble and writes every output of one config.
pub fn cmd_run(cfg: &RunConfig, command: &str, require_states: bool) -> Result<RunSummary, Error> {
    cfg.validate(require_states)?;
    let spec = cfg.ensemble_spec()?;
    let hash = cfg.config_hash();
    let out = run_ensemble(&spec, cfg.ensemble.workers).map_err(|e| Error::Compute(e.to_string()))?;
    let dir = cfg.output_dir.clone();
    create_dir(&dir)?;

    let mut states = Vec::new();
    let mut reports = Vec::new();
    for (idx, st) in out.states.iter().enumerate() {
        let label = st.spec.label();
        let files = write_state_curves(&dir.join(&label), &spec.grid.thetas, &st.curves, spec.record_pairwise)?;
        states.push(StateFiles {
            label,
            files: files.iter().map(|p| rel(&dir, p)).collect(),
        });
        reports.push(state_report(cfg, &spec.grid, &st.spec, &st.curves, &out, idx)?);
    }
    let mut contrasts = Vec::new();
    for p in out.states.iter().filter(|s| s.spec.kind == StateKind::EntangledPure) {
        let partner = out.states.iter().find(|m| {
            m.spec.kind == StateKind::FullyMixed
                && m.spec.schmidt_rank == p.spec.schmidt_rank
                && m.spec.theta_middle_deg == p.spec.theta_middle_deg
                && m.spec.delta_theta_deg == p.spec.delta_theta_deg
        });
        if let Some(m) = partner {
            let c = mixed_vs_pure_contrast(&p.curves.c_bar, &m.curves.c_bar).map_err(|e| Error::Compute(e.to_string()))?;
            let above = p.curves.c_bar.iter().zip(&m.curves.c_bar).filter(|(a, b)| a > b).count();
            contrasts.push(json!({
                "pure": p.spec.label(),
                "mixed": m.spec.label(),
                "summary": c,
                "angles_pure_above_mixed": above,
                "angles_total": p.curves.c_bar.len(),
            }));
        }
    }

    let mut extra = Vec::new();
    let mut report = serde_json::Map::new();
    report.insert("states".into(), Value::Array(reports));
    report.insert("pure_mixed_contrast".into(), Value::Array(contrasts));
    if let (Some(acc), Some(sp)) = (&out.speckle, &cfg.analyses.speckle) {
        let sc = speckle_correlation(acc, sp.reference_deg, &sp.offsets_deg).map_err(|e| Error::Compute(e.to_string()))?;
        let mut csv = String::from("offset_deg,gamma_exact,gamma_wick\n");
        for ((o, a), b) in sc.offsets.iter().zip(&sc.gamma_exact).zip(&sc.gamma_wick) {
            let _ = writeln!(csv, "{o},{},{}", fmt_value(*a), fmt_value(*b));
        }
        let p = dir.join("speckle.csv");
        fs::write(&p, csv).map_err(|e| Error::Io(e.to_string()))?;
        extra.push(rel(&dir, &p));
        report.insert("speckle".into(), serde_json::to_value(&sc).expect("serializes"));
    }
    if cfg.analyses.write_smatrix {
        let dirs = spec.incident_directions().map_err(|e| Error::Compute(e.to_string()))?;
        let s = realization_matrix(&spec, &dirs, 0).map_err(|e| Error::Compute(e.to_string()))?;
        let p = dir.join("smatrix_0.bin");
        let f = fs::File::create(&p).map_err(|e| Error::Io(e.to_string()))?;
        s.write_binary(std::io::BufWriter::new(f)).map_err(|e| Error::Io(e.to_string()))?;
        extra.push(rel(&dir, &p));
    }
    let report = Value::Object(report);
    write_json(&dir.join("report.json"), &report)?;
    extra.push("report.json".into());

    let manifest = Manifest {
        tool: env!("CARGO_PKG_NAME").into(),
        version: env!("CARGO_PKG_VERSION").into(),
        command: command.into(),
        master_seed: cfg.ensemble.master_seed,
        config_hash: hash,
        workers: cfg.ensemble.workers,
        n_realizations: cfg.ensemble.n_realizations,
        states,
        extra_files: extra,
        wall_time_s: out.wall_time_s,
        failures: Vec::new(),
        config: cfg.clone(),
    };
    write_json(&dir.join("manifest.json"), &manifest)?;
    Ok(RunSummary {
        output_dir: dir,
        manifest,
        report,
    })
}

/// Failure record written when a run aborts after validation.
fn write_failure_manifest(cfg: &RunConfig, command: &str, err: &Error) {
    if let Error::Compute(msg) = err {
        if create_dir(&cfg.output_dir).is_ok() {
            let m = json!({
                "tool": env!("CARGO_PKG_NAME"),
                "version": env!("CARGO_PKG_VERSION"),
                "command": command,
                "master_seed": cfg.ensemble.master_seed,
                "config_hash": cfg.config_hash(),
                "failures": [msg],
            });
            let _ = write_json(&cfg.output_dir.join("manifest.json"), &m);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    SchmidtRank,
    DeltaTheta,
    Density,
    NRealizations,
}

impl SweepAxis {
    fn name(&self) -> &'static str {
        match self {
            Self::SchmidtRank => "schmidt_rank",
            Self::DeltaTheta => "delta_theta",
            Self::Density => "density",
            Self::NRealizations => "n_realizations",
        }
    }

    /// Config for one sweep value.
    pub fn apply(&self, base: &RunConfig, value: f64) -> Result<RunConfig, Error> {
        let mut cfg = base.clone();
        let as_count = |v: f64| -> Result<usize, Error> {
            if v >= 1.0 && v.fract() == 0.0 {
                Ok(v as usize)
            } else {
                Err(Error::Config(format!("sweep value {v}: must be a positive integer")))
            }
        };
        match self {
            Self::SchmidtRank => {
                let m = as_count(value)?;
                for s in &mut cfg.states {
                    if matches!(
                        s.kind,
                        StateKind::EntangledPure | StateKind::FullyMixed | StateKind::CoherentIncoherentSum
                    ) {
                        s.schmidt_rank = m;
                    }
                }
            }
            Self::DeltaTheta => {
                for s in &mut cfg.states {
                    s.delta_theta_deg = value;
                }
            }
            Self::Density => {
                let n = as_count(value)?;
                match &mut cfg.scene.layout {
                    Layout::RandomCube { n_particles, .. } => *n_particles = n,
                    Layout::Deterministic { .. } => {
                        return Err(Error::Config("sweep density: scene.layout must be random_cube".into()))
                    }
                }
            }
            Self::NRealizations => cfg.ensemble.n_realizations = as_count(value)?,
        }
        Ok(cfg)
    }
}

/// Seed of sweep value `index`, independent across values.
pub fn sweep_seed(master: u64, index: usize) -> u64 {
    splitmix(master ^ splitmix(index as u64 + 1))
}

fn is_strictly_increasing(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[1] > w[0])
}

fn is_nondecreasing(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[1] >= w[0])
}

fn fit_field(v: &Value, field: &str) -> Option<f64> {
    v.get(field).and_then(Value::as_f64)
}

pub fn cmd_sweep(base: &RunConfig, axis: SweepAxis, values: &[f64]) -> Result<Value, Error> {
    if values.is_empty() {
        return Err(Error::Config("sweep: values must not be empty".into()));
    }
    base.validate(true)?;
    let configs = values
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let mut cfg = axis.apply(base, v)?;
            cfg.ensemble.master_seed = sweep_seed(base.ensemble.master_seed, i);
            cfg.output_dir = base.output_dir.join(format!("{}_{i}", axis.name()));
            cfg.validate(true).map_err(|e| Error::Config(format!("sweep value {v}: {e}")))?;
            Ok(cfg)
        })
        .collect::<Result<Vec<_>, Error>>()?;

    let mut per_value = Vec::new();
    for (cfg, v) in configs.iter().zip(values) {
        let run = cmd_run(cfg, "sweep", true)?;
        per_value.push((v, run));
    }
    let mut trends = Vec::new();
    for (si, spec) in base.states.iter().enumerate() {
        let mut entry = serde_json::Map::new();
        entry.insert("state_index".into(), json!(si));
        entry.insert("kind".into(), json!(spec.kind));
        for curve in ["cone_fit_i1", "cone_fit_i2"] {
            let fits: Vec<Value> = per_value
                .iter()
                .map(|(_, r)| r.report["states"][si].get(curve).cloned().unwrap_or(Value::Null))
                .collect();
            let fwhm: Option<Vec<f64>> = fits.iter().map(|f| fit_field(f, "fwhm")).collect();
            let enh: Option<Vec<f64>> = fits.iter().map(|f| fit_field(f, "enhancement")).collect();
            entry.insert(
                curve.into(),
                json!({
                    "fits": fits,
                    "fwhm_strictly_increasing": fwhm.as_deref().map(is_strictly_increasing),
                    "fwhm_nondecreasing": fwhm.as_deref().map(is_nondecreasing),
                    "enhancement_nondecreasing": enh.as_deref().map(is_nondecreasing),
                }),
            );
        }
        let peaks: Vec<usize> = per_value
            .iter()
            .map(|(_, r)| {
                let label = r.manifest.states[si].label.clone();
                read_curve(&r.output_dir.join(label).join("c_ratio_of_means.csv"))
                    .map(|c| count_peaks(&c, 0.1))
                    .unwrap_or(0)
            })
            .collect();
        entry.insert("c_bar_prominent_peaks".into(), json!(peaks));
        trends.push(Value::Object(entry));
    }
    let summary = json!({
        "axis": axis.name(),
        "values": values,
        "outputs": per_value.iter().map(|(_, r)| r.output_dir.display().to_string()).collect::<Vec<_>>(),
        "seeds": configs.iter().map(|c| c.ensemble.master_seed).collect::<Vec<_>>(),
        "trends": trends,
    });
    create_dir(&base.output_dir)?;
    write_json(&base.output_dir.join("sweep_summary.json"), &summary)?;
    Ok(summary)
}

/// Reads the value column of a curve CSV.
pub fn read_curve(path: &Path) -> Result<Vec<f64>, Error> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    text.lines()
        .skip(1)
        .map(|l| {
            l.split(',')
                .nth(1)
                .and_then(|v| v.parse::<f64>().ok())
                .ok_or_else(|| Error::Io(format!("{}: malformed line '{l}'", path.display())))
        })
        .collect()
}

/// Parameters of a single fixed-layout evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct FewBodySpec {
    pub layout: FixedLayout,
    pub spacing: f64,
    pub schmidt_rank: usize,
    pub theta_middle_deg: f64,
    pub delta_theta_deg: f64,
    pub kinds: Vec<StateKind>,
    pub grid: AngularGrid,
}

#[derive(Debug, Clone)]
pub struct FewBodyResult {
    pub thetas: Vec<f64>,
    pub curves: Vec<(InputStateSpec, Vec<f64>)>,
}

/// Single-configuration correlation curves of a few-particle layout.
pub fn fewbody_curves(spec: &FewBodySpec) -> Result<FewBodyResult, Error> {
    let scene = fixed_layout(spec.layout, spec.spacing).map_err(|e| Error::Config(format!("layout: {e}")))?;
    let states: Vec<InputStateSpec> = spec
        .kinds
        .iter()
        .map(|&k| InputStateSpec::new(k, spec.schmidt_rank, spec.theta_middle_deg, spec.delta_theta_deg))
        .collect();
    for (i, s) in states.iter().enumerate() {
        s.validate().map_err(|e| Error::Config(format!("states[{i}]: {e}")))?;
    }
    let mut es = EnsembleSpec::new(scene.clone(), states.clone(), 1, 0);
    es.grid = spec.grid.clone();
    let dirs = es.incident_directions().map_err(|e| Error::Config(e.to_string()))?;
    let scene = crate::scene::Scene::from_fixed(&scene).map_err(|e| Error::Compute(e.to_string()))?;
    let medium = Medium::new(&scene, K0).map_err(|e| Error::Compute(e.to_string()))?;
    let s = medium
        .scattering_matrix(&dirs, &spec.grid)
        .map_err(|e| Error::Compute(e.to_string()))?;
    let curves = states
        .into_iter()
        .map(|st| {
            let c = correlation_curve(&s, &st).map_err(|e| Error::Compute(e.to_string()))?;
            Ok((st, c))
        })
        .collect::<Result<Vec<_>, Error>>()?;
    Ok(FewBodyResult {
        thetas: spec.grid.thetas.clone(),
        curves,
    })
}

pub fn cmd_fewbody(spec: &FewBodySpec, output: &Path) -> Result<Value, Error> {
    let res = fewbody_curves(spec)?;
    create_dir(output)?;
    let nan = vec![f64::NAN; res.thetas.len()];
    let mut entries = Vec::new();
    for (st, c) in &res.curves {
        let name = format!("fewbody_{}.csv", st.label());
        write_curve_csv(&output.join(&name), &res.thetas, c, &nan)?;
        let max = c.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let min = c.iter().cloned().fold(f64::INFINITY, f64::min);
        entries.push(json!({ "label": st.label(), "file": name, "max": max, "min": min }));
    }
    let pure = res.curves.iter().find(|(s, _)| s.kind == StateKind::EntangledPure);
    let mixed = res.curves.iter().find(|(s, _)| s.kind == StateKind::FullyMixed);
    let contrast = match (pure, mixed) {
        (Some((_, p)), Some((_, m))) => {
            Some(mixed_vs_pure_contrast(p, m).map_err(|e| Error::Compute(e.to_string()))?)
        }
        _ => None,
    };
    let report = json!({
        "layout": spec.layout,
        "spacing": spec.spacing,
        "schmidt_rank": spec.schmidt_rank,
        "theta_middle_deg": spec.theta_middle_deg,
        "delta_theta_deg": spec.delta_theta_deg,
        "curves": entries,
        "contrast": contrast,
    });
    write_json(&output.join("fewbody_report.json"), &report)?;
    Ok(report)
}

/// Comparison of the closed-form currents with the second-quantized
/// reference on random amplitude blocks, plus the Gaussian-limit checks.
pub fn oracle_check(trials: usize, seed: u64) -> Result<Value, Error> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let mut cases = 0usize;
    for _ in 0..trials {
        let rank = rng.random_range(1..=3usize);
        let outputs = rng.random_range(1..=8usize);
        for kind in [StateKind::EntangledPure, StateKind::FullyMixed, StateKind::FockTwoSameMode] {
            let n_in = if kind == StateKind::FockTwoSameMode { 1 } else { 2 * rank };
            let s: Vec<Vec<Complex64>> = (0..outputs)
                .map(|_| {
                    (0..n_in)
                        .map(|_| Complex64::new(rng.random::<f64>() * 2.0 - 1.0, rng.random::<f64>() * 2.0 - 1.0))
                        .collect()
                })
                .collect();
            let cols = StateColumns {
                kind,
                qe_factor: 1.0,
                columns: (0..n_in).collect(),
            };
            for i in 0..outputs {
                for j in 0..outputs {
                    let (o1, o2) = oracle_currents(&s, kind, rank, i, j).map_err(|e| Error::Compute(e.to_string()))?;
                    let (c1, c2) = (cols.i1(&s[i]), cols.i2(&s[i], &s[j]));
                    let oc = o2 / (o1 * oracle_currents(&s, kind, rank, j, j).map_err(|e| Error::Compute(e.to_string()))?.0);
                    let cc = c2 / (c1 * cols.i1(&s[j]));
                    for (a, b) in [(o1, c1), (o2, c2), (oc, cc)] {
                        worst = worst.max((a - b).abs() / a.abs().max(b.abs()).max(1e-300));
                    }
                    cases += 1;
                }
            }
        }
    }
    let mut gaussian = Vec::new();
    let mut gaussian_ok = true;
    for m in [1usize, 2, 5] {
        let p = gaussian_prediction(m, 1.0).map_err(|e| Error::Compute(e.to_string()))?;
        let w = gaussian_prediction_from_wick(m, 1.0).map_err(|e| Error::Compute(e.to_string()))?;
        let mc = gaussian_monte_carlo(StateKind::EntangledPure, m, 20_000, seed ^ m as u64)
            .map_err(|e| Error::Compute(e.to_string()))?;
        let ok = (w.c_coinciding - p.c_coinciding).abs() < 1e-12
            && (mc.c_coinciding - p.c_coinciding).abs() < 3.0 * mc.c_coinciding_se
            && (mc.c_distinct - p.c_distinct).abs() < 3.0 * mc.c_distinct_se;
        gaussian_ok &= ok;
        gaussian.push(json!({ "schmidt_rank": m, "prediction": p, "wick": w, "monte_carlo": mc, "ok": ok }));
    }
    Ok(json!({
        "trials": trials,
        "comparisons": cases,
        "max_relative_error": worst,
        "oracle_ok": worst < 1e-10,
        "gaussian": gaussian,
        "gaussian_ok": gaussian_ok,
    }))
}

#[derive(Debug, Parser)]
#[command(name = "biphoton", version, about = "Multiple scattering of two-photon states by clouds of point scatterers")]
pub struct Cli {
    /// Experiment configuration (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads for the ensemble.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Override of the master seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub output: Option<PathBuf>,
    /// Validate the configuration and exit without computing.
    #[arg(long, global = true)]
    pub dry_run: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Ensemble run of every configured state.
    Run,
    /// Correlation curves of a fixed few-particle layout.
    Fewbody {
        #[arg(long, default_value = "pair")]
        layout: String,
        #[arg(long, default_value_t = 1.0)]
        spacing: f64,
        #[arg(long, default_value_t = 2)]
        rank: usize,
        #[arg(long, default_value_t = 180.0)]
        theta_middle: f64,
        #[arg(long, default_value_t = 2.0)]
        delta_theta: f64,
        #[arg(long, default_value_t = 0.25)]
        step: f64,
        /// State kinds to evaluate, comma separated.
        #[arg(long, value_delimiter = ',', default_value = "entangled_pure,fully_mixed")]
        kinds: Vec<String>,
    },
    /// Repeated runs over one parameter.
    Sweep {
        #[arg(long, value_enum)]
        axis: SweepAxis,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
    },
    /// Angular speckle correlation between incidences.
    Speckle,
    /// Closed forms against the Fock-space reference and Gaussian limits.
    OracleCheck {
        #[arg(long, default_value_t = 50)]
        trials: usize,
    },
}

fn load_config(cli: &Cli) -> Result<RunConfig, Error> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::Config("--config is required for this command".into()))?;
    let mut cfg = RunConfig::load(path)?;
    Overrides {
        workers: cli.workers,
        seed: cli.seed,
        output: cli.output.clone(),
    }
    .apply(&mut cfg);
    Ok(cfg)
}

fn parse_kind(s: &str) -> Result<StateKind, Error> {
    serde_json::from_value(Value::String(s.to_string())).map_err(|_| Error::Config(format!("kinds: unknown state kind '{s}'")))
}

fn dry_run_summary(cfg: &RunConfig, require_states: bool) -> Result<String, Error> {
    cfg.validate(require_states)?;
    let spec = cfg.ensemble_spec()?;
    let dirs = spec.incident_directions().map_err(|e| Error::Config(e.to_string()))?;
    Ok(format!(
        "config valid\nconfig_hash {}\nparticles {}\nrealizations {}\nstates {}\nincident directions {}\ndetection angles {}",
        cfg.config_hash(),
        cfg.scene.n_particles(),
        cfg.ensemble.n_realizations,
        cfg.states.len(),
        dirs.len(),
        spec.grid.len()
    ))
}

fn execute(cli: &Cli) -> Result<String, Error> {
    match &cli.command {
        Command::Run | Command::Speckle => {
            let require_states = matches!(cli.command, Command::Run);
            let name = if require_states { "run" } else { "speckle" };
            let cfg = load_config(cli)?;
            if cli.dry_run {
                return dry_run_summary(&cfg, require_states);
            }
            match cmd_run(&cfg, name, require_states) {
                Ok(r) => Ok(format!(
                    "wrote {} ({} states, {:.1} s)",
                    r.output_dir.display(),
                    r.manifest.states.len(),
                    r.manifest.wall_time_s
                )),
                Err(e) => {
                    write_failure_manifest(&cfg, name, &e);
                    Err(e)
                }
            }
        }
        Command::Sweep { axis, values } => {
            let cfg = load_config(cli)?;
            if cli.dry_run {
                for &v in values {
                    axis.apply(&cfg, v)?.validate(true)?;
                }
                return dry_run_summary(&cfg, true);
            }
            let summary = cmd_sweep(&cfg, *axis, values)?;
            Ok(serde_json::to_string_pretty(&summary["trends"]).unwrap_or_default())
        }
        Command::Fewbody {
            layout,
            spacing,
            rank,
            theta_middle,
            delta_theta,
            step,
            kinds,
        } => {
            let spec = FewBodySpec {
                layout: layout.parse().map_err(|e| Error::Config(format!("layout: {e}")))?,
                spacing: *spacing,
                schmidt_rank: *rank,
                theta_middle_deg: *theta_middle,
                delta_theta_deg: *delta_theta,
                kinds: kinds.iter().map(|k| parse_kind(k)).collect::<Result<_, _>>()?,
                grid: AngularGrid::uniform_degrees(-90.0, 90.0, *step).map_err(|e| Error::Config(format!("step: {e}")))?,
            };
            fixed_layout(spec.layout, spec.spacing).map_err(|e| Error::Config(format!("spacing: {e}")))?;
            for (i, k) in spec.kinds.iter().enumerate() {
                InputStateSpec::new(*k, spec.schmidt_rank, spec.theta_middle_deg, spec.delta_theta_deg)
                    .validate()
                    .map_err(|e| Error::Config(format!("kinds[{i}]: {e}")))?;
            }
            if cli.dry_run {
                return Ok("config valid".into());
            }
            let out = cli.output.clone().unwrap_or_else(default_output);
            let report = cmd_fewbody(&spec, &out)?;
            Ok(serde_json::to_string_pretty(&report).unwrap_or_default())
        }
        Command::OracleCheck { trials } => {
            if cli.dry_run {
                return Ok("config valid".into());
            }
            let report = oracle_check(*trials, cli.seed.unwrap_or(1))?;
            if let Some(out) = &cli.output {
                create_dir(out)?;
                write_json(&out.join("oracle_check.json"), &report)?;
            }
            let text = serde_json::to_string_pretty(&report).unwrap_or_default();
            if report["oracle_ok"] == json!(true) && report["gaussian_ok"] == json!(true) {
                Ok(text)
            } else {
                Err(Error::Compute(format!("oracle check failed\n{text}")))
            }
        }
    }
}

/// Entry point shared by the binary and tests.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match execute(&cli) {
        Ok(msg) => {
            let _ = writeln!(std::io::stdout(), "{msg}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            let _ = writeln!(std::io::stderr(), "error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
