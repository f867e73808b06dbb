//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line;
//! the test fails if any criterion fails.

use std::io::Write;
use std::time::{Duration, Instant};

use koopdual::bounds::{mismatch_bounds, pinv_perturbation_bound, BoundOptions, MU};
use koopdual::config::ExperimentConfig;
use koopdual::edmd::{edmd_fit, BasisLibrary, OutputMode};
use koopdual::linalg::{block, eye, frob, from_rows, hcat, norm2, pinv, scale, singular_values, solve, spectral_radius, sub, vcat, zeros, Matrix};
use koopdual::nominal::{build_augmented_raw, lqg_design, DesignModel, LqgWeights, PerformanceChannel};
use koopdual::pipeline::{self, ControllerKind};
use koopdual::plant::{add_measurement_noise, generate_snapshots, Interval, SnapshotData, VanDerPol};
use koopdual::runtime::{simulate_closed_loop, DualLoopController, ModelPlant, ObserverInit, SimOptions};
use koopdual::synthesis::{
    balance_filter, certificate_from_synthesis, forward_change_of_variables, min_gamma_analysis, recover_controller,
    synthesis_lmi, transform_certificate, verify_closed_loop, AnalysisSystem, GammaMode, LmiOptions, QFilter,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn random_matrix(r: usize, c: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
}

fn linear_snapshots(a: &Matrix, b: &Matrix, n: usize, seed: u64) -> SnapshotData {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x1 = random_matrix(a.nrows(), n, &mut rng);
    let u = random_matrix(b.ncols(), n, &mut rng);
    let x2 = a * &x1 + b * &u;
    SnapshotData {
        y: x1.clone(),
        x1,
        x2,
        u,
        dt: 1.0,
        seed,
    }
}

fn edmd_exactness() -> Outcome {
    let a = from_rows(2, 2, &[0.8, 0.2, -0.1, 0.9]);
    let b = from_rows(2, 1, &[0.5, 1.0]);
    let d = linear_snapshots(&a, &b, 100, 1);
    let fit = edmd_fit(&d, &BasisLibrary::Identity { state_dim: 2 }, OutputMode::LiftedState, 1e-10).unwrap();
    let err = frob(&(&fit.model.a - &a)).max(frob(&(&fit.model.b2 - &b)));
    outcome(err < 1e-8, format!("max Frobenius error {err:.2e}"))
}

fn lift_fidelity() -> Outcome {
    let cfg = ExperimentConfig::vdp_default();
    let p = VanDerPol::default();
    let d = &cfg.data;
    let train = generate_snapshots(&p, d.samples, d.dt, d.x0_interval(), d.u_interval(), d.segment, 1).unwrap();
    let hold = generate_snapshots(&p, d.holdout_samples, d.dt, d.x0_interval(), d.u_interval(), d.segment, 3).unwrap();
    let basis = BasisLibrary::monomial(2, 5);
    let fit = edmd_fit(&train, &basis, OutputMode::LiftedState, 1e-10).unwrap();
    let rms = pipeline::one_step_rms(&fit.model, &hold).unwrap();
    outcome(
        basis.lifted_dim() == 21 && rms < 1e-3,
        format!("M = {}, held-out one-step RMS {rms:.2e}", basis.lifted_dim()),
    )
}

fn stewart() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut violations = 0;
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let r = rng.random_range(2..8);
        let c = rng.random_range(2..8);
        let s = random_matrix(r, c, &mut rng);
        let e0 = random_matrix(r, c, &mut rng);
        let smin = *singular_values(&s).unwrap().last().unwrap();
        let e = &e0 * (0.1 * smin * rng.random_range(0.0..1.0) / norm2(&e0).unwrap());
        let sp = pinv(&s, 1e-12).unwrap();
        let tp = pinv(&(&s + &e), 1e-12).unwrap();
        let lhs = norm2(&(&tp - &sp)).unwrap();
        let rhs = pinv_perturbation_bound(norm2(&sp).unwrap(), norm2(&tp).unwrap(), norm2(&e).unwrap());
        worst = worst.max(lhs / rhs);
        if lhs > rhs {
            violations += 1;
        }
    }
    outcome(
        violations == 0 && (MU - (1.0 + 5f64.sqrt()) / 2.0).abs() < 1e-15,
        format!("{violations} violations in 1000 trials, worst ratio {worst:.3}"),
    )
}

fn bound_validity() -> Outcome {
    let a = from_rows(2, 2, &[0.9, 0.1, -0.2, 0.7]);
    let b = from_rows(2, 1, &[0.0, 1.0]);
    let clean = linear_snapshots(&a, &b, 400, 2);
    let basis = BasisLibrary::Identity { state_dim: 2 };
    let reference = edmd_fit(&clean, &basis, OutputMode::LiftedState, 1e-10).unwrap();
    let ab = hcat(&reference.model.a, &reference.model.b2);
    let opts = BoundOptions {
        confidence: 0.997,
        ..BoundOptions::default()
    };
    let mut covered = 0;
    for draw in 0..200 {
        let noisy = add_measurement_noise(&clean, 0.01, 5000 + draw).unwrap();
        let fit = edmd_fit(&noisy, &basis, OutputMode::LiftedState, 1e-10).unwrap();
        let err = norm2(&(hcat(&fit.model.a, &fit.model.b2) - &ab)).unwrap();
        let u = mismatch_bounds(&noisy, &basis, 0.01, 0.01, OutputMode::LiftedState, opts).unwrap().u;
        if err <= u {
            covered += 1;
        }
    }
    outcome(covered >= 190, format!("{covered}/200 draws within U"))
}

fn hinf_grid(g: &Matrix, h: &Matrix, c: &Matrix, points: usize) -> f64 {
    let n = g.nrows();
    let d = h.ncols();
    let mut peak: f64 = 0.0;
    for k in 0..points {
        let w = std::f64::consts::PI * k as f64 / (points - 1) as f64;
        let re = &eye(n) * w.cos() - g;
        let im = &eye(n) * w.sin();
        let big = block(&[vec![Some(&re), Some(&scale(&im, -1.0))], vec![Some(&im), Some(&re)]]);
        let x = solve(&big, &vcat(h, &zeros(n, d))).unwrap();
        let (gr, gi) = (c * sub(&x, 0, 0, n, d), c * sub(&x, n, 0, n, d));
        let emb = block(&[vec![Some(&gr), Some(&scale(&gi, -1.0))], vec![Some(&gi), Some(&gr)]]);
        peak = peak.max(norm2(&emb).unwrap());
    }
    peak
}

fn bounded_real() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    for i in 0..20 {
        let n = 1 + i % 6;
        let g0 = random_matrix(n, n, &mut rng);
        let rho = rng.random_range(0.3..0.9);
        let g = &g0 * (rho / spectral_radius(&g0).unwrap().max(1e-6));
        let h = random_matrix(n, 2, &mut rng);
        let c = random_matrix(2, n, &mut rng);
        let sys = AnalysisSystem {
            g: g.clone(),
            f: zeros(n, 0),
            h: h.clone(),
            c: c.clone(),
            ustar: zeros(0, n),
        };
        let grid = hinf_grid(&g, &h, &c, 4096);
        let gmin = match min_gamma_analysis(&sys, 1.0, 1e-3, 1e4, 1e-4, &LmiOptions::default()).unwrap() {
            Some(v) => v,
            None => return outcome(false, format!("system {i}: no feasible gamma")),
        };
        worst = worst.max((gmin - grid).abs() / grid);
    }
    outcome(worst <= 0.01, format!("worst relative gap {worst:.2e} over 20 systems"))
}

fn toy_augmented(rng: &mut ChaCha8Rng, u: f64) -> koopdual::nominal::AugmentedPlant {
    let n = 3;
    let a0 = random_matrix(n, n, rng);
    let a = &a0 * (rng.random_range(0.8..1.1) / spectral_radius(&a0).unwrap().max(1e-6));
    let b = random_matrix(n, 1, rng);
    let m = DesignModel {
        a,
        b2: b,
        c2: eye(n),
        keep: (0..n).collect(),
        lifted_output: true,
    };
    let g = lqg_design(&m, 2, &LqgWeights::default(), 0.01).unwrap();
    let perf = PerformanceChannel::physical(n, 2, 1, 0.1);
    build_augmented_raw(&m.a, &m.b2, &m.c2, &g, &perf, u, 0.0).unwrap()
}

fn congruence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let opts = LmiOptions::default();
    let (mut solves, mut verified) = (0, 0);
    let mut failures = Vec::new();
    for case in 0..6 {
        let u = [0.0, 1e-4, 5e-4, 1e-3, 2e-3, 1e-2][case];
        let aug = toy_augmented(&mut rng, u);
        for &lambda in &[30.0, 300.0] {
            for &gamma in &[10.0, 100.0] {
                let s = synthesis_lmi(&aug, lambda, GammaMode::Fixed(gamma), &opts).unwrap();
                if !s.feasible {
                    continue;
                }
                solves += 1;
                let ok = recover_controller(&s.vars, &aug).and_then(|q| {
                    let (qb, tm) = balance_filter(&q, &s.vars.x1, &s.vars.y1)?;
                    let cert = transform_certificate(&certificate_from_synthesis(&s.vars.x1, &s.vars.y1), &tm)?;
                    verify_closed_loop(&aug, &qb, lambda, gamma, Some(&cert), &opts)
                });
                match ok {
                    Ok(v) if v.pass => verified += 1,
                    Ok(v) => failures.push(format!("case {case} l {lambda} g {gamma}: max eig {:.2e}", v.max_eig)),
                    Err(e) => failures.push(format!("case {case} l {lambda} g {gamma}: {e}")),
                }
            }
        }
    }
    let mut worst: f64 = 0.0;
    for i in 0..50 {
        let aug = toy_augmented(&mut rng, 1e-3);
        let n = aug.order();
        let x0 = random_matrix(n, n, &mut rng);
        let y0 = random_matrix(n, n, &mut rng);
        let x1 = &x0 * x0.transpose() + eye(n);
        let y1 = &y0 * y0.transpose() * 0.05 + eye(n) * 0.05;
        let q = QFilter {
            aq: random_matrix(n, n, &mut rng),
            bq: random_matrix(n, aug.outputs(), &mut rng),
            cq: random_matrix(aug.inputs(), n, &mut rng),
        };
        let vars = forward_change_of_variables(&q, &x1, &y1, &aug).unwrap();
        let back = match recover_controller(&vars, &aug) {
            Ok(b) => b,
            Err(e) => return outcome(false, format!("round trip {i}: {e}")),
        };
        let err = frob(&(&back.aq - &q.aq)) + frob(&(&back.bq - &q.bq)) + frob(&(&back.cq - &q.cq));
        let size = frob(&q.aq) + frob(&q.bq) + frob(&q.cq);
        worst = worst.max(err / size);
    }
    outcome(
        solves > 0 && verified == solves && worst < 1e-8,
        format!(
            "{verified}/{solves} feasible solves verified, round-trip error {worst:.2e}{}",
            if failures.is_empty() { String::new() } else { format!(" ({})", failures.join("; ")) }
        ),
    )
}

/// Runs the bundled Van der Pol pipeline and checks state and residual convergence.
fn vdp_reproduction() -> (Outcome, Outcome) {
    let t0 = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let cfg = ExperimentConfig::vdp_default();
    let run = || -> koopdual::Result<pipeline::SimulationReport> {
        pipeline::generate(&cfg, out)?;
        pipeline::identify(&cfg, out)?;
        pipeline::synthesize(&cfg, out)?;
        pipeline::simulate(&cfg, out)
    };
    let rep = match run() {
        Ok(r) => r,
        Err(e) => {
            let o = outcome(false, format!("pipeline failed: {e}"));
            return (o, outcome(false, "no runs"));
        }
    };
    let elapsed = t0.elapsed();
    let thr = cfg.simulation.threshold;
    let find = |seed: u64, k: ControllerKind| {
        rep.runs
            .iter()
            .find(|r| r.sigma == 0.01 && r.seed == seed && r.controller == k)
            .unwrap()
    };
    let seeds = &cfg.simulation.seeds;
    let mut both = 0;
    let (mut dual_ok, mut lqg_bad) = (0, 0);
    let mut dual_norms = Vec::new();
    let mut lqg_norms = Vec::new();
    let mut residual_ok = 0;
    let mut residual_checked = 0;
    for &s in seeds {
        let d = find(s, ControllerKind::Dual);
        let l = find(s, ControllerKind::Lqg);
        dual_norms.push(d.final_state_norm.unwrap_or(f64::NAN));
        lqg_norms.push(l.final_state_norm.unwrap_or(f64::NAN));
        let dc = d.converged(thr);
        let lc = !l.converged(thr);
        dual_ok += dc as usize;
        lqg_bad += lc as usize;
        if dc && lc {
            both += 1;
        }
        if dc {
            residual_checked += 1;
            if let (Some(f), Some(p)) = (d.final_f_norm, d.peak_f_norm) {
                if f <= 0.1 * p {
                    residual_ok += 1;
                }
            }
        }
    }
    let fmt = |v: &[f64]| {
        let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        format!("[{lo:.3e}, {hi:.3e}]")
    };
    let in_time = elapsed < Duration::from_secs(300);
    let c7 = outcome(
        both >= 8 && in_time,
        format!(
            "dual converged {dual_ok}/{n}, LQG not converged {lqg_bad}/{n}, both {both}/{n}; final |x| dual {} LQG {}; runtime {:.0} s",
            fmt(&dual_norms),
            fmt(&lqg_norms),
            elapsed.as_secs_f64(),
            n = seeds.len()
        ),
    );
    let c8 = outcome(
        residual_checked > 0 && residual_ok == residual_checked,
        format!("{residual_ok}/{residual_checked} converged dual-loop runs with final |f| <= 10% of peak"),
    );
    (c7, c8)
}

fn zero_mismatch() -> Outcome {
    let p = VanDerPol::default();
    let r = Interval::new(-1.0, 1.0);
    let d = generate_snapshots(&p, 2000, 0.01, r, Interval::new(-10.0, 10.0), 200, 1).unwrap();
    let basis = BasisLibrary::monomial(2, 5);
    let fit = edmd_fit(&d, &basis, OutputMode::LiftedState, 1e-10).unwrap();
    let dm = DesignModel::from_koopman(&fit.model, OutputMode::LiftedState);
    let gains = lqg_design(&dm, 2, &LqgWeights::default(), 0.0).unwrap();
    let n = dm.order();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let q = QFilter {
        aq: scale(&random_matrix(n, n, &mut rng), 0.1),
        bq: random_matrix(n, n, &mut rng),
        cq: random_matrix(1, n, &mut rng),
    };
    let ctrl = DualLoopController::new(dm.clone(), basis.clone(), &gains, Some(q)).unwrap();
    let plant = ModelPlant {
        model: &ctrl.model,
        n_physical: 2,
    };
    let x0 = dm.project(&basis.lift(&[0.5, 0.5]).unwrap());
    let opts = SimOptions {
        horizon: 20.0,
        dt: 0.01,
        sigma: 0.0,
        seed: 0,
        observer_init: ObserverInit::Measured,
    };
    let dual = simulate_closed_loop(&plant, &ctrl, &x0, &opts).unwrap();
    let base = simulate_closed_loop(&plant, &ctrl.baseline(), &x0, &opts).unwrap();
    let fmax = dual.f.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    let ufmax = dual.uf.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    let identical = dual.u == base.u && dual.x == base.x;
    outcome(
        fmax <= 1e-10 && ufmax <= 1e-10 && identical,
        format!("max |f| {fmax:.1e}, max |u_f| {ufmax:.1e}, inputs bit-identical {identical}"),
    )
}

fn severity_ordering() -> Outcome {
    let cfg = ExperimentConfig::vdp_default();
    let p = VanDerPol { mu: cfg.plant.mu };
    let d = &cfg.data;
    let clean = generate_snapshots(&p, d.samples, d.dt, d.x0_interval(), d.u_interval(), d.segment, cfg.seed).unwrap();
    let mut res = Vec::new();
    for sigma in [0.01, 0.05] {
        let noisy = add_measurement_noise(&clean, sigma, cfg.seed + 1).unwrap();
        let (_, s, _, _) = pipeline::identify_level(&cfg, &noisy, sigma, None).unwrap();
        res.push((s.bounds.u, s.decay_rate));
    }
    let (lo, hi) = (res[0], res[1]);
    outcome(
        hi.0 > lo.0 && hi.1 > lo.1,
        format!("U {:.3e} -> {:.3e}, decay rate {:.3e} -> {:.3e}", lo.0, hi.0, lo.1, hi.1),
    )
}

#[test]
fn acceptance_criteria() {
    let mut results: Vec<(usize, &str, Outcome, Duration, Duration)> = Vec::new();
    let timed = |id: usize, name: &'static str, limit: u64, f: &dyn Fn() -> Outcome| {
        let t = Instant::now();
        let o = f();
        (id, name, o, t.elapsed(), Duration::from_secs(limit))
    };
    results.push(timed(1, "EDMD exactness", 1, &edmd_exactness));
    results.push(timed(2, "lift fidelity", 5, &lift_fidelity));
    results.push(timed(3, "pseudo-inverse perturbation bound", 10, &stewart));
    results.push(timed(4, "mismatch bound validity", 60, &bound_validity));
    results.push(timed(5, "bounded-real reduction", 60, &bounded_real));
    results.push(timed(6, "synthesis-analysis congruence", 120, &congruence));
    let t = Instant::now();
    let (c7, c8) = vdp_reproduction();
    let el = t.elapsed();
    results.push((7, "Van der Pol dual loop vs LQG", c7, el, Duration::from_secs(300)));
    results.push((8, "residual convergence", c8, Duration::ZERO, Duration::from_secs(300)));
    results.push(timed(9, "zero-mismatch collapse", 5, &zero_mismatch));
    results.push(timed(10, "noise-severity ordering", 30, &severity_ordering));

    let mut failed = Vec::new();
    let mut err = std::io::stderr().lock();
    for (id, name, o, el, limit) in &results {
        let in_time = el <= limit;
        let pass = o.pass && in_time;
        if !pass {
            failed.push(*id);
        }
        let _ = writeln!(
            err,
            "criterion {id:2} {}: {name}: {} [{:.2} s{}]",
            if pass { "PASS" } else { "FAIL" },
            o.detail,
            el.as_secs_f64(),
            if in_time { String::new() } else { format!(", limit {} s", limit.as_secs()) }
        );
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
