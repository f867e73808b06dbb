//! The experiment pipeline behind `koopctl`: every stage reads its inputs
//! from and writes its artifacts to one output directory.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bounds::{mismatch_bounds, BoundOptions, MismatchBounds};
use crate::config::ExperimentConfig;
use crate::edmd::{edmd_fit, koopman_predict, KoopmanModel};
use crate::error::{Error, Result};
use crate::linalg::{vnorm, zeros, DenseMatrix, Matrix};
use crate::nominal::{build_augmented, lqg_design, DesignModel, NominalGains, PerformanceChannel};
use crate::plant::{add_measurement_noise, generate_snapshots, rk4_step, SnapshotData, VanDerPol};
use crate::runtime::{residual_metrics, simulate_closed_loop, DualLoopController, SampledPlant, SimOptions};
use crate::synthesis::{search_gamma_lambda, GridPoint, QFilter, Verification};

/// Physical state dimension of the built-in plant.
const N_PHYSICAL: usize = 2;

pub fn sigma_tag(sigma: f64) -> String {
    format!("{sigma}")
}

fn snapshot_path(out: &Path, sigma: f64) -> PathBuf {
    out.join(format!("snapshots_{}.csv", sigma_tag(sigma)))
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| io_err(path, e))
}

fn read_file(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| io_err(path, e))
}

fn ensure_dir(out: &Path) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| io_err(out, e))
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("artifact serializes")
}

fn from_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    serde_json::from_str(&read_file(path)?).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
}

// ---------------------------------------------------------------- snapshots

/// One row per sample: `x1_1..x1_n, x2_1..x2_n, u_1..u_m, y_1..y_p`.
pub fn write_snapshots<W: Write>(d: &SnapshotData, mut w: W) -> std::io::Result<()> {
    let (n, m, p) = (d.x1.nrows(), d.u.nrows(), d.y.nrows());
    let mut head = Vec::new();
    head.extend((1..=n).map(|i| format!("x1_{i}")));
    head.extend((1..=n).map(|i| format!("x2_{i}")));
    head.extend((1..=m).map(|i| format!("u_{i}")));
    head.extend((1..=p).map(|i| format!("y_{i}")));
    writeln!(w, "{}", head.join(","))?;
    for k in 0..d.len() {
        let mut row = Vec::with_capacity(2 * n + m + p);
        row.extend((0..n).map(|i| d.x1[(i, k)]));
        row.extend((0..n).map(|i| d.x2[(i, k)]));
        row.extend((0..m).map(|i| d.u[(i, k)]));
        row.extend((0..p).map(|i| d.y[(i, k)]));
        let s: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        writeln!(w, "{}", s.join(","))?;
    }
    Ok(())
}

pub fn read_snapshots(path: &Path, dt: f64, seed: u64) -> Result<SnapshotData> {
    let text = read_file(path)?;
    let perr = |msg: String| Error::Parse(format!("{}: {msg}", path.display()));
    let mut lines = text.lines();
    let head: Vec<&str> = lines.next().ok_or_else(|| perr("empty file".into()))?.split(',').collect();
    let count = |p: &str| head.iter().filter(|h| h.starts_with(p)).count();
    let (n, n2, m, p) = (count("x1_"), count("x2_"), count("u_"), count("y_"));
    if n == 0 || n != n2 || m == 0 || n + n2 + m + p != head.len() {
        return Err(perr("unexpected header".into()));
    }
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let r: std::result::Result<Vec<f64>, _> = line.split(',').map(str::parse::<f64>).collect();
        let r = r.map_err(|e| perr(format!("line {}: {e}", i + 2)))?;
        if r.len() != head.len() {
            return Err(perr(format!("line {} has {} fields", i + 2, r.len())));
        }
        rows.push(r);
    }
    if rows.is_empty() {
        return Err(Error::EmptyData);
    }
    let col = |off: usize, k: usize| Matrix::from_fn(k, rows.len(), |i, j| rows[j][off + i]);
    Ok(SnapshotData {
        x1: col(0, n),
        x2: col(n, n),
        u: col(2 * n, m),
        y: col(2 * n + m, p),
        dt,
        seed,
    })
}

// ---------------------------------------------------------------- generate

/// Snapshot files for every configured noise level plus a noise-free
/// held-out set. All levels share the same noise draw, scaled by sigma.
pub fn generate(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<PathBuf>> {
    ensure_dir(out)?;
    let plant = VanDerPol { mu: cfg.plant.mu };
    let d = &cfg.data;
    let clean = generate_snapshots(&plant, d.samples, d.dt, d.x0_interval(), d.u_interval(), d.segment, cfg.seed)?;
    let mut written = Vec::new();
    for &sigma in &cfg.noise_levels {
        let noisy = add_measurement_noise(&clean, sigma, cfg.seed.wrapping_add(1))?;
        let path = snapshot_path(out, sigma);
        let f = fs::File::create(&path).map_err(|e| io_err(&path, e))?;
        write_snapshots(&noisy, BufWriter::new(f)).map_err(|e| io_err(&path, e))?;
        written.push(path);
    }
    if d.holdout_samples > 0 {
        let hold = generate_snapshots(
            &plant,
            d.holdout_samples,
            d.dt,
            d.x0_interval(),
            d.u_interval(),
            d.segment,
            cfg.seed.wrapping_add(2),
        )?;
        let path = out.join("holdout.csv");
        let f = fs::File::create(&path).map_err(|e| io_err(&path, e))?;
        write_snapshots(&hold, BufWriter::new(f)).map_err(|e| io_err(&path, e))?;
        written.push(path);
    }
    Ok(written)
}

// ---------------------------------------------------------------- identify

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct FitSummary {
    pub sigma: f64,
    pub lifted_dim: usize,
    pub residual_ab: f64,
    pub residual_c: f64,
    pub rank: usize,
    pub rank_deficient: bool,
    /// One-step prediction RMS on the physical coordinates of the noise-free held-out set.
    pub one_step_rms: Option<f64>,
    /// Exponential decay rate of the free-run state norm, 1/s (larger decays faster).
    pub decay_rate: f64,
    pub bounds: MismatchBounds,
}

/// RMS of the physical part of A psi(x) + B u against the true successor.
pub fn one_step_rms(model: &KoopmanModel, data: &SnapshotData) -> Result<f64> {
    let n = data.x1.nrows();
    let mut sum = 0.0;
    for k in 0..data.len() {
        let x: Vec<f64> = (0..n).map(|i| data.x1[(i, k)]).collect();
        let u: Vec<f64> = (0..data.u.nrows()).map(|i| data.u[(i, k)]).collect();
        let pr = koopman_predict(model, &x, &[u])?;
        for i in 0..n {
            let e = pr.states[1][i] - data.x2[(i, k)];
            sum += e * e;
        }
    }
    Ok((sum / (n * data.len()) as f64).sqrt())
}

/// Unforced free run of the identified model: (t, physical state).
pub fn free_run(model: &KoopmanModel, x0: &[f64], horizon: f64) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let steps = (horizon / model.dt).round() as usize;
    let u = vec![vec![0.0; model.b2.ncols()]; steps];
    let pr = koopman_predict(model, x0, &u)?;
    let t = (0..=steps).map(|k| k as f64 * model.dt).collect();
    Ok((t, pr.states))
}

/// Negative least-squares slope of ln |x(t)| over the run.
pub fn decay_rate(t: &[f64], x: &[Vec<f64>]) -> f64 {
    let pts: Vec<(f64, f64)> = t
        .iter()
        .zip(x)
        .map(|(&t, x)| (t, vnorm(x)))
        .filter(|(_, n)| *n > 0.0 && n.is_finite())
        .map(|(t, n)| (t, n.ln()))
        .collect();
    if pts.len() < 2 {
        return f64::INFINITY;
    }
    let k = pts.len() as f64;
    let mt = pts.iter().map(|p| p.0).sum::<f64>() / k;
    let ml = pts.iter().map(|p| p.1).sum::<f64>() / k;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mt) * (p.1 - ml)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mt) * (p.0 - mt)).sum();
    -sxy / sxx
}

/// Plant free run for reference, same grid as `free_run`.
pub fn plant_free_run(cfg: &ExperimentConfig) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let plant = VanDerPol { mu: cfg.plant.mu };
    let dt = cfg.data.dt;
    let steps = (cfg.identification.free_run_horizon / dt).round() as usize;
    let mut x = cfg.identification.free_run_x0.clone();
    let (mut t, mut xs) = (vec![0.0], vec![x.clone()]);
    for k in 1..=steps {
        x = rk4_step(&plant, &x, &[0.0], dt)?;
        t.push(k as f64 * dt);
        xs.push(x.clone());
    }
    Ok((t, xs))
}

fn write_run_csv(path: &Path, t: &[f64], x: &[Vec<f64>]) -> Result<()> {
    let mut s = String::from("t,x1,x2\n");
    for (t, x) in t.iter().zip(x) {
        s.push_str(&format!("{t:?},{:?},{:?}\n", x[0], x[1]));
    }
    write_file(path, &s)
}

/// Fit, bounds and free-run summary for one noise level.
pub fn identify_level(cfg: &ExperimentConfig, data: &SnapshotData, sigma: f64, holdout: Option<&SnapshotData>) -> Result<(KoopmanModel, FitSummary, Vec<f64>, Vec<Vec<f64>>)> {
    let basis = cfg.basis();
    let id = &cfg.identification;
    let fit = edmd_fit(data, &basis, id.output_mode, id.pinv_tol)?;
    let bounds = mismatch_bounds(
        data,
        &basis,
        sigma,
        sigma,
        id.output_mode,
        BoundOptions {
            confidence: cfg.bounds.confidence,
            pinv_tol: id.pinv_tol,
            ..BoundOptions::default()
        },
    )?;
    let (t, x) = free_run(&fit.model, &id.free_run_x0, id.free_run_horizon)?;
    let summary = FitSummary {
        sigma,
        lifted_dim: basis.lifted_dim(),
        residual_ab: fit.report.residual_ab,
        residual_c: fit.report.residual_c,
        rank: fit.report.rank,
        rank_deficient: fit.report.rank_deficient,
        one_step_rms: holdout.map(|h| one_step_rms(&fit.model, h)).transpose()?,
        decay_rate: decay_rate(&t, &x),
        bounds,
    };
    Ok((fit.model, summary, t, x))
}

pub fn identify(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<FitSummary>> {
    let hold_path = out.join("holdout.csv");
    let holdout = if cfg.data.holdout_samples > 0 {
        Some(read_snapshots(&hold_path, cfg.data.dt, cfg.seed.wrapping_add(2))?)
    } else {
        None
    };
    let mut all = Vec::new();
    for &sigma in &cfg.noise_levels {
        let data = read_snapshots(&snapshot_path(out, sigma), cfg.data.dt, cfg.seed)?;
        let (model, summary, t, x) = identify_level(cfg, &data, sigma, holdout.as_ref())?;
        let tag = sigma_tag(sigma);
        write_file(&out.join(format!("model_{tag}.json")), &model.to_json())?;
        write_file(&out.join(format!("fit_{tag}.json")), &to_json(&summary))?;
        write_run_csv(&out.join(format!("freerun_{tag}.csv")), &t, &x)?;
        all.push(summary);
    }
    let (t, x) = plant_free_run(cfg)?;
    write_run_csv(&out.join("freerun_plant.csv"), &t, &x)?;
    write_file(&out.join("fit_report.json"), &to_json(&all))?;
    Ok(all)
}

// ---------------------------------------------------------------- synthesize

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct QFilterMatrices {
    #[serde(rename = "AQ")]
    pub aq: DenseMatrix,
    #[serde(rename = "BQ")]
    pub bq: DenseMatrix,
    #[serde(rename = "CQ")]
    pub cq: DenseMatrix,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct SynthesisReport {
    pub sigma: f64,
    pub feasible: bool,
    pub lambda_grid: Vec<f64>,
    pub sector_scales: Vec<f64>,
    pub points: Vec<GridPoint>,
    pub best_gamma: Option<f64>,
    pub lambda: Option<f64>,
    pub sector_scale: Option<f64>,
    /// Largest eigenvalue of each synthesis constraint at the solution.
    pub certificate_eigs: Vec<f64>,
    pub verification: Option<Verification>,
    pub qfilter: Option<QFilterMatrices>,
    pub bounds: MismatchBounds,
    pub diagnostics: String,
}

#[derive(Serialize, Deserialize)]
struct GainsFile {
    #[serde(rename = "K")]
    k: DenseMatrix,
    #[serde(rename = "L")]
    l: DenseMatrix,
}

pub fn performance_channel(cfg: &ExperimentConfig, lm: usize, m: usize) -> Result<PerformanceChannel> {
    let p = &cfg.performance;
    Ok(match (&p.b1, &p.c1, &p.d12) {
        (Some(b1), Some(c1), Some(d12)) => PerformanceChannel {
            b1: b1.to_matrix()?,
            c1: c1.to_matrix()?,
            d12: d12.to_matrix()?,
        },
        _ => PerformanceChannel::physical(lm, N_PHYSICAL, m, p.u_weight),
    })
}

/// Everything the runtime needs for one noise level.
#[derive(Clone, Debug)]
pub struct Designed {
    pub model: KoopmanModel,
    pub design: DesignModel,
    pub gains: NominalGains,
    pub qfilter: Option<QFilter>,
}

/// LQG design, bounds, augmented plant and the (lambda, gamma) search.
pub fn synthesize_level(cfg: &ExperimentConfig, model: &KoopmanModel, data: &SnapshotData, sigma: f64) -> Result<(Designed, SynthesisReport)> {
    let id = &cfg.identification;
    let design = DesignModel::from_koopman(model, id.output_mode);
    let gains = lqg_design(&design, N_PHYSICAL, &cfg.lqg.weights(), sigma)?;
    let bounds = mismatch_bounds(
        data,
        &model.basis,
        sigma,
        sigma,
        id.output_mode,
        BoundOptions {
            confidence: cfg.bounds.confidence,
            pinv_tol: id.pinv_tol,
            ..BoundOptions::default()
        },
    )?;
    let perf = performance_channel(cfg, design.order(), design.b2.ncols())?;
    let aug = build_augmented(&design, &gains, &perf, &bounds)?;
    let so = cfg.synthesis.search_options();
    let res = search_gamma_lambda(&aug, &so)?;
    let report = SynthesisReport {
        sigma,
        feasible: res.feasible,
        lambda_grid: so.lambda_grid.clone(),
        sector_scales: so.sector_scales.clone(),
        points: res.grid.clone(),
        best_gamma: res.feasible.then_some(res.gamma),
        lambda: res.feasible.then_some(res.lambda),
        sector_scale: res.feasible.then_some(res.sector_scale),
        certificate_eigs: res.certificate_eigs.clone(),
        verification: res.verification.clone(),
        qfilter: res.qfilter.as_ref().map(|q| QFilterMatrices {
            aq: (&q.aq).into(),
            bq: (&q.bq).into(),
            cq: (&q.cq).into(),
        }),
        bounds,
        diagnostics: res.diagnostics.clone(),
    };
    Ok((
        Designed {
            model: model.clone(),
            design,
            gains,
            qfilter: res.qfilter,
        },
        report,
    ))
}

/// Writes gains, Q-filter and report per synthesized noise level. Any
/// infeasible level is reported and turned into a synthesis error at the end.
pub fn synthesize(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<SynthesisReport>> {
    let mut reports = Vec::new();
    for &sigma in &cfg.synthesis.noise_levels {
        let tag = sigma_tag(sigma);
        let model = KoopmanModel::from_json(&read_file(&out.join(format!("model_{tag}.json")))?)?;
        let data = read_snapshots(&snapshot_path(out, sigma), cfg.data.dt, cfg.seed)?;
        let (d, report) = synthesize_level(cfg, &model, &data, sigma)?;
        write_file(
            &out.join(format!("gains_{tag}.json")),
            &to_json(&GainsFile {
                k: (&d.gains.k).into(),
                l: (&d.gains.l).into(),
            }),
        )?;
        if let Some(q) = &d.qfilter {
            write_file(&out.join(format!("qfilter_{tag}.json")), &q.to_json())?;
        }
        write_file(&out.join(format!("synthesis_{tag}.json")), &to_json(&report))?;
        reports.push(report);
    }
    let bad: Vec<String> = reports
        .iter()
        .filter(|r| !r.feasible)
        .map(|r| format!("sigma {}: {}", r.sigma, r.diagnostics))
        .collect();
    if !bad.is_empty() {
        return Err(Error::Synthesis(format!("no feasible (lambda, gamma): {}", bad.join("; "))));
    }
    Ok(reports)
}

/// Reads back what `synthesize` wrote for one noise level.
pub fn load_designed(cfg: &ExperimentConfig, out: &Path, sigma: f64) -> Result<Designed> {
    let tag = sigma_tag(sigma);
    let model = KoopmanModel::from_json(&read_file(&out.join(format!("model_{tag}.json")))?)?;
    let design = DesignModel::from_koopman(&model, cfg.identification.output_mode);
    let g: GainsFile = from_json(&out.join(format!("gains_{tag}.json")))?;
    let lm = design.order();
    let p = design.c2.nrows();
    let gains = NominalGains {
        k: g.k.to_matrix()?,
        l: g.l.to_matrix()?,
        qw: zeros(lm, lm),
        rw: zeros(0, 0),
        wn: zeros(lm, lm),
        vn: zeros(p, p),
    };
    let qpath = out.join(format!("qfilter_{tag}.json"));
    let qfilter = match fs::read_to_string(&qpath) {
        Ok(s) => Some(QFilter::from_json(&s)?),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => None,
        Err(e) => return Err(io_err(&qpath, e)),
    };
    Ok(Designed {
        model,
        design,
        gains,
        qfilter,
    })
}

// ---------------------------------------------------------------- simulate

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ControllerKind {
    Lqg,
    Dual,
}

impl ControllerKind {
    pub fn name(self) -> &'static str {
        match self {
            ControllerKind::Lqg => "lqg",
            ControllerKind::Dual => "dual",
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct RunMetrics {
    pub sigma: f64,
    pub seed: u64,
    pub controller: ControllerKind,
    pub ok: bool,
    pub error: Option<String>,
    pub final_state_norm: Option<f64>,
    pub settling_time: Option<f64>,
    pub rms_f: Option<f64>,
    pub final_f_norm: Option<f64>,
    pub peak_f_norm: Option<f64>,
}

impl RunMetrics {
    /// Final state norm below the threshold; a failed run never converges.
    pub fn converged(&self, threshold: f64) -> bool {
        self.final_state_norm.is_some_and(|n| n < threshold)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Comparison {
    pub sigma: f64,
    pub runs: usize,
    pub dual_converged: usize,
    pub lqg_not_converged: usize,
    /// Seeds where the dual loop converges and LQG alone does not.
    pub both_hold: usize,
    pub dual_residual_decayed: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct SimulationReport {
    pub threshold: f64,
    pub runs: Vec<RunMetrics>,
    pub comparison: Vec<Comparison>,
}

pub fn run_path(out: &Path, experiment: &str, sigma: f64, seed: u64, c: ControllerKind) -> PathBuf {
    out.join(format!("{experiment}_{}_{seed}_{}.csv", sigma_tag(sigma), c.name()))
}

fn run_one(cfg: &ExperimentConfig, d: &Designed, sigma: f64, seed: u64, kind: ControllerKind, out: &Path) -> RunMetrics {
    let mut m = RunMetrics {
        sigma,
        seed,
        controller: kind,
        ok: false,
        error: None,
        final_state_norm: None,
        settling_time: None,
        rms_f: None,
        final_f_norm: None,
        peak_f_norm: None,
    };
    let mut go = || -> Result<()> {
        let q = match kind {
            ControllerKind::Lqg => None,
            ControllerKind::Dual => Some(
                d.qfilter
                    .clone()
                    .ok_or_else(|| Error::Synthesis("no Q-filter for this noise level".into()))?,
            ),
        };
        let ctrl = DualLoopController::new(d.design.clone(), d.model.basis.clone(), &d.gains, q)?;
        let plant = VanDerPol { mu: cfg.plant.mu };
        let sp = SampledPlant {
            plant: &plant,
            dt: cfg.data.dt,
        };
        let sim = &cfg.simulation;
        let opts = SimOptions {
            horizon: sim.horizon,
            dt: cfg.data.dt,
            sigma,
            seed,
            observer_init: sim.observer_init,
        };
        let tr = simulate_closed_loop(&sp, &ctrl, &sim.x0, &opts)?;
        let rm = residual_metrics(&tr, sim.threshold)?;
        let path = run_path(out, &cfg.experiment, sigma, seed, kind);
        let f = fs::File::create(&path).map_err(|e| io_err(&path, e))?;
        let mut w = BufWriter::new(f);
        tr.write_csv(&mut w).map_err(|e| io_err(&path, e))?;
        w.flush().map_err(|e| io_err(&path, e))?;
        m.final_state_norm = Some(tr.final_state_norm());
        m.settling_time = rm.settling_time;
        m.rms_f = Some(rm.rms_f);
        m.final_f_norm = Some(rm.final_f_norm);
        m.peak_f_norm = Some(rm.peak_f_norm);
        Ok(())
    };
    match go() {
        Ok(()) => m.ok = true,
        Err(e) => m.error = Some(e.to_string()),
    }
    m
}

/// Worker count: `KOOPCTL_THREADS` when set, otherwise the machine's parallelism.
pub fn thread_count() -> Result<usize> {
    match std::env::var("KOOPCTL_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(Error::Config(format!("KOOPCTL_THREADS must be a positive integer, got '{v}'"))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

/// LQG-only and dual-loop runs for every synthesized noise level and seed.
/// A failing run is recorded and the batch carries on.
pub fn simulate(cfg: &ExperimentConfig, out: &Path) -> Result<SimulationReport> {
    let threads = thread_count()?;
    let mut designs = Vec::new();
    for &sigma in &cfg.synthesis.noise_levels {
        designs.push((sigma, load_designed(cfg, out, sigma)?));
    }
    let mut jobs = Vec::new();
    for (i, (sigma, _)) in designs.iter().enumerate() {
        for &seed in &cfg.simulation.seeds {
            for kind in [ControllerKind::Lqg, ControllerKind::Dual] {
                jobs.push((i, *sigma, seed, kind));
            }
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let runs: Vec<RunMetrics> = pool.install(|| {
        jobs.par_iter()
            .map(|&(i, sigma, seed, kind)| run_one(cfg, &designs[i].1, sigma, seed, kind, out))
            .collect()
    });
    let threshold = cfg.simulation.threshold;
    let comparison = designs
        .iter()
        .map(|(sigma, _)| {
            let find = |seed: u64, k: ControllerKind| {
                runs.iter()
                    .find(|r| r.sigma == *sigma && r.seed == seed && r.controller == k)
                    .expect("every job has a result")
            };
            let mut c = Comparison {
                sigma: *sigma,
                runs: cfg.simulation.seeds.len(),
                dual_converged: 0,
                lqg_not_converged: 0,
                both_hold: 0,
                dual_residual_decayed: 0,
            };
            for &seed in &cfg.simulation.seeds {
                let (l, d) = (find(seed, ControllerKind::Lqg), find(seed, ControllerKind::Dual));
                let dc = d.converged(threshold);
                let ln = !l.converged(threshold);
                c.dual_converged += dc as usize;
                c.lqg_not_converged += ln as usize;
                c.both_hold += (dc && ln) as usize;
                if let (Some(f), Some(p)) = (d.final_f_norm, d.peak_f_norm) {
                    c.dual_residual_decayed += (f <= 0.1 * p) as usize;
                }
            }
            c
        })
        .collect();
    let report = SimulationReport {
        threshold,
        runs,
        comparison,
    };
    write_file(&out.join("metrics.json"), &to_json(&report))?;
    let mut table = String::from("sigma,runs,dual_converged,lqg_not_converged,both_hold,dual_residual_decayed\n");
    for c in &report.comparison {
        table.push_str(&format!(
            "{},{},{},{},{},{}\n",
            sigma_tag(c.sigma),
            c.runs,
            c.dual_converged,
            c.lqg_not_converged,
            c.both_hold,
            c.dual_residual_decayed
        ));
    }
    write_file(&out.join("comparison.csv"), &table)?;
    Ok(report)
}

// ---------------------------------------------------------------- report

#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
pub struct Manifest {
    pub files: Vec<String>,
    pub warnings: Vec<String>,
}

/// Columns of a numeric CSV by header name.
fn read_columns(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let text = read_file(path)?;
    let mut lines = text.lines();
    let head: Vec<String> = lines
        .next()
        .ok_or_else(|| Error::Parse(format!("{}: empty file", path.display())))?
        .split(',')
        .map(String::from)
        .collect();
    let mut cols = vec![Vec::new(); head.len()];
    for line in lines.filter(|l| !l.is_empty()) {
        for (c, v) in cols.iter_mut().zip(line.split(',')) {
            c.push(v.parse::<f64>().map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?);
        }
    }
    Ok((head, cols))
}

fn column<'a>(head: &[String], cols: &'a [Vec<f64>], name: &str) -> Option<&'a [f64]> {
    head.iter().position(|h| h == name).map(|i| cols[i].as_slice())
}

fn long_rows(buf: &mut String, figure: &str, series: &str, t: &[f64], v: &[f64]) {
    for (t, v) in t.iter().zip(v) {
        buf.push_str(&format!("{figure},{series},{t:?},{v:?}\n"));
    }
}

/// Collates whatever runs exist into long-format `figure,series,t,value`
/// files. Missing inputs become warnings, not errors.
pub fn report(cfg: &ExperimentConfig, out: &Path) -> Result<Manifest> {
    let mut man = Manifest::default();
    if !out.is_dir() {
        man.warnings.push(format!("{} does not exist", out.display()));
        return Ok(man);
    }
    let header = "figure,series,t,value\n";
    let add = |man: &mut Manifest, name: &str, body: String| -> Result<()> {
        if body.is_empty() {
            man.warnings.push(format!("{name}: no input runs found"));
            return Ok(());
        }
        write_file(&out.join(name), &format!("{header}{body}"))?;
        man.files.push(name.to_string());
        Ok(())
    };

    // identified-model free runs against the plant
    let mut fig2 = String::new();
    let mut series: Vec<(String, PathBuf)> = vec![("plant".into(), out.join("freerun_plant.csv"))];
    for &s in &cfg.noise_levels {
        series.push((format!("model_sigma={}", sigma_tag(s)), out.join(format!("freerun_{}.csv", sigma_tag(s)))));
    }
    for (name, path) in series {
        if !path.exists() {
            man.warnings.push(format!("missing {}", path.display()));
            continue;
        }
        let (h, c) = read_columns(&path)?;
        if let (Some(t), Some(x1), Some(x2)) = (column(&h, &c, "t"), column(&h, &c, "x1"), column(&h, &c, "x2")) {
            long_rows(&mut fig2, "fig2", &format!("{name}/x1"), t, x1);
            long_rows(&mut fig2, "fig2", &format!("{name}/x2"), t, x2);
        }
    }
    add(&mut man, "fig2.csv", fig2)?;

    // closed-loop states and residuals
    let (mut fig3, mut fig4) = (String::new(), String::new());
    for &s in &cfg.synthesis.noise_levels {
        for &seed in &cfg.simulation.seeds {
            for kind in [ControllerKind::Lqg, ControllerKind::Dual] {
                let path = run_path(out, &cfg.experiment, s, seed, kind);
                if !path.exists() {
                    man.warnings.push(format!("missing {}", path.display()));
                    continue;
                }
                let (h, c) = read_columns(&path)?;
                let name = format!("{}_sigma={}_seed={seed}", kind.name(), sigma_tag(s));
                let Some(t) = column(&h, &c, "t") else { continue };
                for x in ["x1", "x2"] {
                    if let Some(v) = column(&h, &c, x) {
                        long_rows(&mut fig3, "fig3", &format!("{name}/{x}"), t, v);
                    }
                }
                if kind == ControllerKind::Dual {
                    if let Some(v) = column(&h, &c, "fnorm") {
                        long_rows(&mut fig4, "fig4", &format!("{name}/fnorm"), t, v);
                    }
                }
            }
        }
    }
    add(&mut man, "fig3.csv", fig3)?;
    add(&mut man, "fig4.csv", fig4)?;
    write_file(&out.join("manifest.json"), &to_json(&man))?;
    Ok(man)
}
