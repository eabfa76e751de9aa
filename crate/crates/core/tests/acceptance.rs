//! Acceptance suite. Runs every criterion in sequence, prints one
//! `criterion N: PASS|FAIL` line each, and exits nonzero if any fail.
//!
//! The full-scale reproduction (criterion 14) takes hours and only runs when
//! `BIPHOTON_FULL_SCALE=1` is set.

use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use biphoton_cbs::analytics::{
    enhancement_at, fit_cone, gaussian_monte_carlo, speckle_correlation, wick_moment, ConeFitOptions, Window,
};
use biphoton_cbs::cli::{cmd_run, cmd_sweep, fewbody_curves, retro_angle, specular_angle, FewBodySpec, RunConfig, SweepAxis};
use biphoton_cbs::ensemble::{
    averaged_correlation, run_ensemble, AveragingOrder, CouplingMode, EnsembleOutput, EnsembleSpec, SpeckleProbe,
};
use biphoton_cbs::oracle::{density_matrix, oracle_currents, purity, FockBasis};
use biphoton_cbs::qstates::{InputStateSpec, StateColumns, StateKind};
use biphoton_cbs::scene::{sample_scene, FixedLayout, SceneSpec};
use biphoton_cbs::solver::{AngularGrid, Direction, Medium, K0};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Master seed shared by every stochastic criterion.
const SEED: u64 = 1;

struct Verdict {
    pass: bool,
    detail: String,
}

impl Verdict {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self { pass, detail: detail.into() }
    }
}

fn workers() -> usize {
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn random_block(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Vec<Vec<Complex64>> {
    (0..rows)
        .map(|_| {
            (0..cols)
                .map(|_| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
                .collect()
        })
        .collect()
}

fn states_of(spec: &InputStateSpec) -> Vec<Direction> {
    spec.incident_angles_deg()
        .unwrap()
        .into_iter()
        .map(|a| Direction::from_degrees(a, 0.0))
        .collect()
}

fn coherent_flatness() -> Verdict {
    let spec = InputStateSpec::new(StateKind::CoherentSingleWave, 1, 140.0, 1.0);
    let grid = AngularGrid::half_plane();
    let mut worst = 0.0f64;
    let mut pairs = 0usize;
    for n in [1usize, 10, 200] {
        let scene = sample_scene(&SceneSpec::random_cube(n, 5.0), 0, SEED).unwrap();
        let s = Medium::new(&scene, K0).unwrap().scattering_matrix(&states_of(&spec), &grid).unwrap();
        let cols = StateColumns::for_matrix(&spec, &s).unwrap();
        for i in 0..grid.len() {
            for j in 0..grid.len() {
                let c = cols.correlation(s.row(i), s.row(j), i, j).unwrap();
                worst = worst.max((c - 1.0).abs());
                pairs += 1;
            }
        }
    }
    Verdict::new(worst <= 1e-10, format!("max |C - 1| = {worst:.2e} over {pairs} detector pairs"))
}

fn reciprocity() -> Verdict {
    let grid = AngularGrid::uniform_degrees(-80.0, 80.0, 20.0).unwrap();
    let incident: Vec<Direction> = (0..grid.len()).map(|a| grid.direction(a).reversed()).collect();
    let mut worst = 0.0f64;
    for scene_index in 0..20u64 {
        let n = 15 * (scene_index as usize + 1);
        let scene = sample_scene(&SceneSpec::random_cube(n, 8.0), scene_index, SEED).unwrap();
        let s = Medium::new(&scene, K0).unwrap().scattering_matrix(&incident, &grid).unwrap();
        // Column b is incidence along -k_b, so reciprocity makes S symmetric.
        for a in 0..grid.len() {
            for b in 0..a {
                let (x, y) = (s.get(a, b), s.get(b, a));
                worst = worst.max((x - y).norm() / x.norm().max(y.norm()));
            }
        }
    }
    Verdict::new(worst <= 1e-8, format!("max relative mismatch {worst:.2e} over 20 scenes, N_p 15..300"))
}

fn oracle_equivalence() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let outputs = rng.random_range(1..=8);
        let rank = rng.random_range(1..=3);
        let data = random_block(&mut rng, outputs, 2 * rank);
        for kind in [StateKind::EntangledPure, StateKind::FullyMixed, StateKind::FockTwoSameMode] {
            let n_in = if kind == StateKind::FockTwoSameMode { 1 } else { 2 * rank };
            let s: Vec<Vec<Complex64>> = data.iter().map(|r| r[..n_in].to_vec()).collect();
            let cols = StateColumns { kind, qe_factor: 1.0, columns: (0..n_in).collect() };
            for i in 0..outputs {
                for j in 0..outputs {
                    let (o1, o2) = oracle_currents(&s, kind, rank, i, j).unwrap();
                    let oj = oracle_currents(&s, kind, rank, j, j).unwrap().0;
                    let c = cols.correlation(&s[i], &s[j], i, j).unwrap();
                    let c_oracle = o2 / (o1 * oj);
                    worst = worst
                        .max(rel(o1, cols.i1(&s[i])))
                        .max(rel(o2, cols.i2(&s[i], &s[j])))
                        .max(rel(c_oracle, c));
                }
            }
        }
    }
    Verdict::new(worst <= 1e-10, format!("max relative deviation {worst:.2e} over 50 blocks x 3 kinds"))
}

fn rank_one_identity() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED ^ 4);
    let pure = StateColumns { kind: StateKind::EntangledPure, qe_factor: 1.0, columns: vec![0, 1] };
    let mixed = StateColumns { kind: StateKind::FullyMixed, ..pure.clone() };
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let s = random_block(&mut rng, 40, 2);
        for (i, a) in s.iter().enumerate() {
            worst = worst.max(rel(pure.i1(a), mixed.i1(a)));
            for (j, b) in s.iter().enumerate() {
                worst = worst.max(rel(pure.i2(a, b), mixed.i2(a, b))).max(rel(
                    pure.correlation(a, b, i, j).unwrap(),
                    mixed.correlation(a, b, i, j).unwrap(),
                ));
            }
        }
    }
    Verdict::new(worst <= 1e-14, format!("max relative difference {worst:.2e}"))
}

fn purity_check() -> Verdict {
    let mut worst = 0.0f64;
    let mut values = Vec::new();
    for m in 1..=3usize {
        let basis = FockBasis::new(2 * m).unwrap();
        let p = purity(&density_matrix(&basis, StateKind::EntangledPure, m).unwrap());
        let q = purity(&density_matrix(&basis, StateKind::FullyMixed, m).unwrap());
        worst = worst.max((p - 1.0).abs()).max((q - 1.0 / m as f64).abs());
        values.push(format!("M={m}: {p:.12}/{q:.12}"));
    }
    Verdict::new(worst <= 1e-12, format!("pure/mixed purity {}; max error {worst:.1e}", values.join(", ")))
}

fn wick() -> Verdict {
    let sigma2 = 1.7;
    let cov = |m: usize, n: usize| Complex64::new(if m == n { sigma2 } else { 0.0 }, 0.0);
    let checks = [
        (wick_moment(&[0], &[0], cov).unwrap(), sigma2),
        (wick_moment(&[0, 0], &[0, 0], cov).unwrap(), 2.0 * sigma2 * sigma2),
        (wick_moment(&[0, 1], &[0, 1], cov).unwrap(), sigma2 * sigma2),
        (wick_moment(&[0], &[0, 0], cov).unwrap(), 0.0),
        (wick_moment(&[0, 1], &[0], cov).unwrap(), 0.0),
    ];
    let exact = checks.iter().all(|(got, want)| got.re == *want && got.im == 0.0);
    let shown: Vec<String> = checks.iter().map(|(g, _)| format!("{:.4}", g.re)).collect();
    Verdict::new(exact, format!("moments [{}] for sigma^2 = {sigma2}", shown.join(", ")))
}

fn gaussian_end_to_end() -> Verdict {
    let mut pass = true;
    let mut parts = Vec::new();
    for m in [1usize, 2, 5] {
        let mc = gaussian_monte_carlo(StateKind::EntangledPure, m, 200_000, SEED + m as u64).unwrap();
        let target = 2.0 * m as f64 / (1.0 + 2.0 * m as f64);
        let z_same = (mc.c_coinciding - target) / mc.c_coinciding_se;
        let z_dist = (mc.c_distinct - 0.5) / mc.c_distinct_se;
        pass &= z_same.abs() <= 3.0 && z_dist.abs() <= 3.0;
        parts.push(format!(
            "M={m}: C(k,k)={:.4} (target {target:.4}, z={z_same:+.2}), C(k,k')={:.4} (z={z_dist:+.2})",
            mc.c_coinciding, mc.c_distinct
        ));
    }
    Verdict::new(pass, parts.join("; "))
}

fn csv_files(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let p = entry.unwrap().path();
        if p.is_dir() {
            out.extend(csv_files(&p));
        } else if p.extension().is_some_and(|e| e == "csv") {
            out.push(p);
        }
    }
    out.sort();
    out
}

fn determinism() -> Verdict {
    let tmp = tempfile::tempdir().unwrap();
    let base = format!(
        r#"output_dir = "{}"
[scene]
layout = {{ kind = "random_cube", n_particles = 150, box_edge = 6.0 }}
[[states]]
kind = "entangled_pure"
schmidt_rank = 2
theta_middle_deg = 140.0
delta_theta_deg = 2.0
[[states]]
kind = "fully_mixed"
schmidt_rank = 2
theta_middle_deg = 140.0
delta_theta_deg = 2.0
[[states]]
kind = "coherent_single_wave"
theta_middle_deg = 140.0
delta_theta_deg = 2.0
[ensemble]
n_realizations = 24
master_seed = {SEED}
block_size = 3
record_pairwise = true
[grid]
min_deg = -90.0
max_deg = 90.0
step_deg = 1.0
"#,
        tmp.path().join("w1").display()
    );
    let mut dirs = Vec::new();
    for w in [1usize, 8] {
        let mut cfg = RunConfig::from_toml(&base).unwrap();
        cfg.ensemble.workers = w;
        cfg.output_dir = tmp.path().join(format!("w{w}"));
        cmd_run(&cfg, "acceptance", true).unwrap();
        dirs.push(cfg.output_dir);
    }
    let a = csv_files(&dirs[0]);
    let b = csv_files(&dirs[1]);
    let names = |v: &[std::path::PathBuf], d: &Path| -> Vec<std::path::PathBuf> {
        v.iter().map(|p| p.strip_prefix(d).unwrap().to_path_buf()).collect()
    };
    let same_names = names(&a, &dirs[0]) == names(&b, &dirs[1]);
    let differing = a
        .iter()
        .zip(&b)
        .filter(|(x, y)| std::fs::read(x).unwrap() != std::fs::read(y).unwrap())
        .count();
    Verdict::new(
        same_names && differing == 0 && !a.is_empty(),
        format!("{} CSVs compared between 1 and 8 workers, {differing} differ", a.len()),
    )
}

fn few_body() -> Verdict {
    let mut pass = true;
    let mut parts = Vec::new();
    for m in [2usize, 5, 8] {
        let res = fewbody_curves(&FewBodySpec {
            layout: FixedLayout::Pair,
            spacing: 1.0,
            schmidt_rank: m,
            theta_middle_deg: 180.0,
            delta_theta_deg: 2.0,
            kinds: vec![StateKind::EntangledPure, StateKind::FullyMixed],
            grid: AngularGrid::half_plane(),
        })
        .unwrap();
        let range = |c: &[f64]| {
            let hi = c.iter().copied().fold(f64::MIN, f64::max);
            let lo = c.iter().copied().fold(f64::MAX, f64::min);
            (lo, hi)
        };
        let (plo, phi) = range(&res.curves[0].1);
        let (mlo, mhi) = range(&res.curves[1].1);
        let mf = m as f64;
        let ok = phi <= mf * (1.0 + 1e-9) && phi >= 0.95 * mf && (mhi - mlo) < (phi - plo);
        pass &= ok;
        parts.push(format!("M={m}: pure max {phi:.4}, pure range {:.3}, mixed range {:.3}", phi - plo, mhi - mlo));
    }
    Verdict::new(pass, parts.join("; "))
}

/// Cone fit on the mean intensity of a single-wave run, with the specular
/// direction of that wave excluded from the background.
fn cone_windows(incidence_deg: f64) -> (f64, Vec<Window>) {
    (
        retro_angle(incidence_deg).to_radians(),
        vec![(specular_angle(incidence_deg).to_radians(), 15f64.to_radians())],
    )
}

fn cbs_presence() -> Verdict {
    let state = InputStateSpec::new(StateKind::CoherentSingleWave, 1, 140.0, 1.0);
    let (retro, windows) = cone_windows(141.0);
    let opts = ConeFitOptions::default();
    let mut results = Vec::new();
    for coupling in [CouplingMode::Reciprocal, CouplingMode::ScrambledColumns] {
        let mut spec = EnsembleSpec::new(SceneSpec::random_cube(800, 10.0), vec![state.clone()], 200, SEED);
        spec.coupling = coupling;
        let out = run_ensemble(&spec, workers()).unwrap();
        let curve = &out.states[0].curves.i1_bar;
        let fit = fit_cone(&spec.grid.thetas, curve, retro, &windows, &opts);
        let raw = enhancement_at(&spec.grid.thetas, curve, retro, &windows, &opts).unwrap();
        results.push((fit, raw));
    }
    let (fit, raw) = &results[0];
    let (control_fit, control_raw) = &results[1];
    let recip = fit.as_ref().map(|f| f.enhancement).ok();
    let recip_ok = recip.is_some_and(|e| e > 1.2 && e < 2.0);
    let control_ok = match control_fit {
        Err(_) => true,
        Ok(f) => f.enhancement < 1.1,
    };
    let control_text = match control_fit {
        Err(_) => format!("no cone (max/background {control_raw:.3})"),
        Ok(f) => format!("enhancement {:.3}", f.enhancement),
    };
    let recip_text = match fit {
        Ok(f) => format!("enhancement {:.3}, FWHM {:.3} rad", f.enhancement, f.fwhm),
        Err(e) => format!("no cone ({e}; max/background {raw:.3})"),
    };
    Verdict::new(recip_ok && control_ok, format!("reciprocal {recip_text}; scrambled control {control_text}"))
}

fn bins_of(thetas: &[f64], curve: &[f64], width_deg: f64) -> Vec<f64> {
    let n_bins = (180.0 / width_deg).round() as usize;
    (0..n_bins)
        .map(|b| {
            let lo = -90.0 + width_deg * b as f64;
            let hi = lo + width_deg;
            let last = b + 1 == n_bins;
            let v: Vec<f64> = thetas
                .iter()
                .zip(curve)
                .filter(|(t, _)| {
                    let d = t.to_degrees();
                    d >= lo - 1e-9 && (d < hi - 1e-9 || (last && d <= hi + 1e-9))
                })
                .map(|(_, c)| *c)
                .collect();
            mean(&v)
        })
        .collect()
}

fn real_medium_run() -> (EnsembleSpec, EnsembleOutput) {
    let states = vec![
        InputStateSpec::new(StateKind::EntangledPure, 2, 140.0, 10.0),
        InputStateSpec::new(StateKind::EntangledPure, 2, 140.0, 0.5),
        InputStateSpec::new(StateKind::FullyMixed, 2, 140.0, 0.5),
        InputStateSpec::new(StateKind::EntangledPure, 2, 140.0, 8.0),
    ];
    let mut spec = EnsembleSpec::new(SceneSpec::random_cube(800, 10.0), states, 1000, SEED);
    spec.speckle = Some(SpeckleProbe {
        reference_deg: 140.0,
        offsets_deg: (0..=24).map(|i| 0.5 * i as f64).collect(),
    });
    let out = run_ensemble(&spec, workers()).unwrap();
    (spec, out)
}

fn gaussian_limit(spec: &EnsembleSpec, out: &EnsembleOutput) -> Verdict {
    let thetas = &spec.grid.thetas;
    let wide = &out.states[0].curves.c_bar;
    let bins = bins_of(thetas, wide, 30.0);
    let flat = bins.iter().all(|b| (b - 0.8).abs() <= 0.05);
    let pure = &out.states[1].curves.c_bar;
    let mixed = &out.states[2].curves.c_bar;
    let above = pure.iter().zip(mixed).filter(|(p, m)| p > m).count();
    let shown: Vec<String> = bins.iter().map(|b| format!("{b:.3}")).collect();
    Verdict::new(
        flat && above == pure.len(),
        format!(
            "delta 10 deg: mean C {:.4}, 30-deg bins [{}]; delta 0.5 deg: pure > mixed at {above}/{} angles",
            mean(wide),
            shown.join(", "),
            pure.len()
        ),
    )
}

fn averaging_orders(spec: &EnsembleSpec, out: &EnsembleOutput) -> (Verdict, Verdict) {
    let st = &out.states[3];
    let acc = &st.accumulator;
    let rom = averaged_correlation(acc, AveragingOrder::RatioOfMeans).unwrap();
    let mor = averaged_correlation(acc, AveragingOrder::MeanOfRatios).unwrap();
    let diffs: Vec<f64> = rom.iter().zip(&mor).map(|(a, b)| (a - b).abs()).collect();
    let mean_diff = mean(&diffs);
    let max_diff = diffs.iter().copied().fold(0.0, f64::max);
    let v_rom = acc.across_block_variance(AveragingOrder::RatioOfMeans, 1).unwrap();
    let v_mor = acc.across_block_variance(AveragingOrder::MeanOfRatios, 1).unwrap();

    let offsets = &spec.speckle.as_ref().unwrap().offsets_deg;
    let sc = speckle_correlation(out.speckle.as_ref().unwrap(), 140.0, offsets).unwrap();
    let width_ok = sc.corr_width.is_some_and(f64::is_finite);
    let mut est_dev = 0.0f64;
    for (k, off) in offsets.iter().enumerate() {
        if *off <= 1.0 + 1e-9 {
            est_dev = est_dev.max((sc.gamma_exact[k] - sc.gamma_wick[k]).abs() / sc.gamma_exact[k]);
        }
    }
    let pass = mean_diff <= 0.03 && v_rom >= v_mor && width_ok && est_dev <= 0.1;
    let verdict = Verdict::new(
        pass,
        format!(
            "mean |C - C'| {mean_diff:.4} (max {max_diff:.4}); block variance {v_rom:.4e} vs {v_mor:.4e}; \
             speckle width {} deg; estimator deviation up to 1 deg offset {:.2}%",
            sc.corr_width.map_or("none".into(), |w| format!("{w:.2}")),
            100.0 * est_dev
        ),
    );

    let groups = [1usize, 5, 25];
    let vars: Vec<f64> = groups
        .iter()
        .map(|&g| out.states[0].accumulator.across_block_variance(AveragingOrder::RatioOfMeans, g).unwrap())
        .collect();
    let decay = Verdict::new(
        vars.windows(2).all(|w| w[1] < w[0]),
        format!(
            "across-group variance of C for groups of 1/5/25 blocks: {}",
            vars.iter().map(|v| format!("{v:.3e}")).collect::<Vec<_>>().join(", ")
        ),
    );
    (verdict, decay)
}

fn density_trend() -> Verdict {
    let tmp = tempfile::tempdir().unwrap();
    let text = format!(
        r#"output_dir = "{}"
[scene]
layout = {{ kind = "random_cube", n_particles = 800, box_edge = 10.0 }}
[[states]]
kind = "coherent_single_wave"
theta_middle_deg = 140.0
delta_theta_deg = 1.0
[ensemble]
n_realizations = 1000
master_seed = {SEED}
workers = {}
"#,
        tmp.path().display(),
        workers()
    );
    let cfg = RunConfig::from_toml(&text).unwrap();
    let summary = cmd_sweep(&cfg, SweepAxis::Density, &[400.0, 800.0, 1600.0]).unwrap();
    let trend = &summary["trends"][0]["cone_fit_i1"];
    let fits: Vec<String> = trend["fits"]
        .as_array()
        .unwrap()
        .iter()
        .zip([400, 800, 1600])
        .map(|(f, n)| match (f["fwhm"].as_f64(), f["enhancement"].as_f64()) {
            (Some(w), Some(e)) => format!("N_p={n}: FWHM {w:.4} rad, enhancement {e:.3}"),
            _ => format!("N_p={n}: no cone"),
        })
        .collect();
    let pass = trend["fwhm_strictly_increasing"] == true && trend["enhancement_nondecreasing"] == true;
    Verdict::new(pass, fits.join("; "))
}

fn full_scale() -> Verdict {
    let n_r = 1000;
    let opts = ConeFitOptions::default();
    let classical = InputStateSpec::new(StateKind::CoherentSingleWave, 1, 140.0, 1.0);
    let mut states = vec![classical];
    states.extend((1..=10).map(|m| InputStateSpec::new(StateKind::EntangledPure, m, 140.0, 1.0)));
    let mut spec = EnsembleSpec::new(SceneSpec::random_cube(5000, 20.0), states, n_r, SEED);
    spec.speckle = Some(SpeckleProbe {
        reference_deg: 140.0,
        offsets_deg: (0..=40).map(|i| 0.25 * i as f64).collect(),
    });
    let out = run_ensemble(&spec, workers()).unwrap();
    let thetas = &spec.grid.thetas;
    let (retro, windows) = cone_windows(141.0);
    let mut pass = true;
    let mut parts = Vec::new();
    match fit_cone(thetas, &out.states[0].curves.i1_bar, retro, &windows, &opts) {
        Ok(f) => {
            pass &= rel(f.fwhm, 0.154) <= 0.15 && (f.enhancement - 1.63).abs() <= 0.15;
            parts.push(format!("classical FWHM {:.4} rad, enhancement {:.3}", f.fwhm, f.enhancement));
        }
        Err(e) => {
            pass = false;
            parts.push(format!("classical: {e}"));
        }
    }
    for st in &out.states[1..] {
        let m = st.spec.schmidt_rank;
        let mut excl = Vec::new();
        for a in st.spec.incident_angles_deg().unwrap() {
            excl.push((specular_angle(a).to_radians(), 15f64.to_radians()));
        }
        let retro = retro_angle(st.spec.theta_middle_deg).to_radians();
        match fit_cone(thetas, &st.curves.i2_bar, retro, &excl, &opts) {
            Ok(f) => {
                pass &= (1.8..=2.5).contains(&f.enhancement);
                parts.push(format!("M={m} two-photon enhancement {:.3}", f.enhancement));
            }
            Err(e) => {
                pass = false;
                parts.push(format!("M={m}: {e}"));
            }
        }
    }
    let offsets = &spec.speckle.as_ref().unwrap().offsets_deg;
    let sc = speckle_correlation(out.speckle.as_ref().unwrap(), 140.0, offsets).unwrap();
    match sc.corr_width {
        Some(w) => {
            pass &= rel(w, 2.25) <= 0.2;
            parts.push(format!("speckle width {w:.2} deg"));
        }
        None => {
            pass = false;
            parts.push("speckle width undefined".into());
        }
    }
    Verdict::new(pass, parts.join("; "))
}

fn report(results: &mut Vec<(String, bool)>, name: &str, run: impl FnOnce() -> Verdict) {
    let t0 = Instant::now();
    let v = run();
    println!(
        "{name}: {} ({:.1}s) {}",
        if v.pass { "PASS" } else { "FAIL" },
        t0.elapsed().as_secs_f64(),
        v.detail
    );
    results.push((name.to_string(), v.pass));
}

fn main() -> ExitCode {
    let mut results = Vec::new();
    report(&mut results, "criterion 1", coherent_flatness);
    report(&mut results, "criterion 2", reciprocity);
    report(&mut results, "criterion 3", oracle_equivalence);
    report(&mut results, "criterion 4", rank_one_identity);
    report(&mut results, "criterion 5", purity_check);
    report(&mut results, "criterion 6", wick);
    report(&mut results, "criterion 7", gaussian_end_to_end);
    report(&mut results, "criterion 8", determinism);
    report(&mut results, "criterion 9", few_body);
    report(&mut results, "criterion 10", cbs_presence);

    let t0 = Instant::now();
    let (spec, out) = real_medium_run();
    let shared = t0.elapsed().as_secs_f64();
    println!("shared N_p=800 ensemble for criteria 11 and 13: {shared:.1}s");
    report(&mut results, "criterion 11", || gaussian_limit(&spec, &out));
    let (orders, decay) = averaging_orders(&spec, &out);
    report(&mut results, "criterion 13", || orders);
    report(&mut results, "variance decay", || decay);
    report(&mut results, "criterion 12", density_trend);

    if std::env::var("BIPHOTON_FULL_SCALE").is_ok_and(|v| v == "1") {
        report(&mut results, "criterion 14", full_scale);
    } else {
        println!("criterion 14: SKIPPED (set BIPHOTON_FULL_SCALE=1 to run the full-scale reproduction)");
    }

    let failed: Vec<&str> = results.iter().filter(|(_, p)| !p).map(|(n, _)| n.as_str()).collect();
    println!("{} passed, {} failed", results.len() - failed.len(), failed.len());
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("failed: {}", failed.join(", "));
        ExitCode::FAILURE
    }
}
