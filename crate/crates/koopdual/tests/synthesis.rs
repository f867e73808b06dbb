use koopdual::linalg::{
    block, eye, frob, from_rows, hcat, inv, max_eig, norm2, scale, solve, spectral_radius, sub, t, vcat, zeros,
    Matrix,
};
use koopdual::nominal::{build_augmented_raw, lqg_design, AugmentedPlant, DesignModel, LqgWeights, PerformanceChannel};
use koopdual::synthesis::*;
use koopdual::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_matrix(r: usize, c: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
}

fn stable_random(n: usize, rho: f64, rng: &mut ChaCha8Rng) -> Matrix {
    let a = random_matrix(n, n, rng);
    let r = spectral_radius(&a).unwrap();
    &a * (rho / r)
}

/// x+ = G x only: the analysis LMI reduces to a Lyapunov inequality.
fn autonomous(g: Matrix) -> AnalysisSystem {
    let n = g.nrows();
    AnalysisSystem {
        g,
        f: zeros(n, 0),
        h: zeros(n, 0),
        c: zeros(0, n),
        ustar: zeros(0, n),
    }
}

#[test]
fn scalar_lyapunov_threshold() {
    let opts = LmiOptions::default();
    let stable = analysis_lmi(&autonomous(from_rows(1, 1, &[0.5])), 1.0, 1.0, &opts).unwrap();
    assert!(stable.feasible);
    assert!(stable.max_eig < 0.0);
    let unstable = analysis_lmi(&autonomous(from_rows(1, 1, &[1.5])), 1.0, 1.0, &opts).unwrap();
    assert!(!unstable.feasible);
}

#[test]
fn random_lyapunov_matches_spectral_radius() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let opts = LmiOptions::default();
    for _ in 0..5 {
        let base = random_matrix(4, 4, &mut rng);
        let r = spectral_radius(&base).unwrap();
        let ok = analysis_lmi(&autonomous(&base * (0.9 / r)), 1.0, 1.0, &opts).unwrap();
        assert!(ok.feasible);
        let bad = analysis_lmi(&autonomous(&base * (1.1 / r)), 1.0, 1.0, &opts).unwrap();
        assert!(!bad.feasible);
    }
}

/// Largest singular value of C (zI - G)^{-1} H on the unit circle, using the
/// real embedding of the complex solve.
fn hinf_grid(g: &Matrix, h: &Matrix, c: &Matrix, points: usize) -> f64 {
    let n = g.nrows();
    let mut peak: f64 = 0.0;
    for k in 0..points {
        let w = std::f64::consts::PI * k as f64 / (points - 1) as f64;
        let (cw, sw) = (w.cos(), w.sin());
        let re = &eye(n) * cw - g;
        let im = &eye(n) * sw;
        let big = block(&[vec![Some(&re), Some(&scale(&im, -1.0))], vec![Some(&im), Some(&re)]]);
        let rhs = vcat(h, &zeros(n, h.ncols()));
        let x = solve(&big, &rhs).unwrap();
        let (xr, xi) = (sub(&x, 0, 0, n, h.ncols()), sub(&x, n, 0, n, h.ncols()));
        let (gr, gi) = (c * &xr, c * &xi);
        let emb = block(&[vec![Some(&gr), Some(&scale(&gi, -1.0))], vec![Some(&gi), Some(&gr)]]);
        peak = peak.max(norm2(&emb).unwrap());
    }
    peak
}

#[test]
fn bounded_real_gamma_matches_frequency_sweep() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 4;
    let g = stable_random(n, 0.8, &mut rng);
    let h = random_matrix(n, 2, &mut rng);
    let c = random_matrix(2, n, &mut rng);
    let sys = AnalysisSystem {
        g: g.clone(),
        f: zeros(n, 0),
        h: h.clone(),
        c: c.clone(),
        ustar: zeros(0, n),
    };
    let peak = hinf_grid(&g, &h, &c, 2048);
    let gmin = min_gamma_analysis(&sys, 1.0, 1e-3, 1e3, 1e-3, &LmiOptions::default())
        .unwrap()
        .unwrap();
    assert!(gmin >= peak * (1.0 - 1e-3), "lmi {gmin} below sweep {peak}");
    assert!(gmin <= peak * 1.01, "lmi {gmin} far above sweep {peak}");
}

/// x+ = a x + f with |f| <= u |x|; the worst case f = u sign(a) x is
/// stable exactly when |a| + u < 1.
#[test]
fn sector_nonlinearity_threshold() {
    let a = 0.5;
    let sys = |u: f64| AnalysisSystem {
        g: from_rows(1, 1, &[a]),
        f: from_rows(1, 1, &[1.0]),
        h: zeros(1, 0),
        c: zeros(0, 1),
        ustar: from_rows(1, 1, &[u]),
    };
    let opts = LmiOptions::default();
    let feasible_any = |u: f64| {
        [0.3, 1.0, 3.0]
            .iter()
            .any(|&l| analysis_lmi(&sys(u), l, 1.0, &opts).unwrap().feasible)
    };
    assert!(feasible_any(0.4));
    assert!(!feasible_any(0.6));
    // the sign nonlinearity at u = 0.6 does diverge
    let mut x: f64 = 1.0;
    for _ in 0..200 {
        x = a * x + 0.6 * x.signum() * x.abs();
    }
    assert!(x.abs() > 1e6);
}

fn toy_augmented(u: f64, v: f64) -> AugmentedPlant {
    let m = DesignModel {
        a: from_rows(3, 3, &[1.05, 0.1, 0.0, 0.0, 0.9, 0.2, 0.0, 0.0, 0.7]),
        b2: from_rows(3, 1, &[0.0, 0.5, 1.0]),
        c2: eye(3),
        keep: vec![0, 1, 2],
        lifted_output: true,
    };
    let g = lqg_design(&m, 2, &LqgWeights::default(), 0.01).unwrap();
    let perf = PerformanceChannel::physical(3, 2, 1, 0.1);
    build_augmented_raw(&m.a, &m.b2, &m.c2, &g, &perf, u, v).unwrap()
}

fn bisect_options() -> SearchOptions {
    SearchOptions {
        lambda_grid: vec![30.0, 100.0, 300.0],
        gamma_lo: 1e-2,
        gamma_hi: 1e3,
        rel_tol: 1e-2,
        method: GammaSearch::Bisect,
        ..SearchOptions::default()
    }
}

#[test]
fn zero_ahat_recovery_formula() {
    let aug = toy_augmented(0.1, 0.0);
    let n = aug.order();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x0 = random_matrix(n, n, &mut rng);
    let y0 = random_matrix(n, n, &mut rng);
    let x1 = &x0 * t(&x0) + eye(n);
    let y1 = &y0 * t(&y0) * 0.01 + eye(n) * 0.1;
    let vars = SynthesisVars {
        x1: x1.clone(),
        y1: y1.clone(),
        aq_hat: zeros(n, n),
        bq_hat: zeros(n, aug.outputs()),
        cq_hat: zeros(aug.inputs(), n),
    };
    let q = recover_controller(&vars, &aug).unwrap();
    let y2 = eye(n) - &y1 * &x1;
    let want = scale(&(inv(&y2).unwrap() * &y1 * &aug.abar * &x1), -1.0);
    assert!(frob(&(&q.aq - &want)) < 1e-9 * frob(&want).max(1.0));
    assert!(frob(&q.bq) < 1e-12);
    assert!(frob(&q.cq) < 1e-12);
}

#[test]
fn singular_coupling_is_a_recovery_error() {
    let aug = toy_augmented(0.0, 0.0);
    let n = aug.order();
    let vars = SynthesisVars {
        x1: eye(n),
        y1: eye(n),
        aq_hat: zeros(n, n),
        bq_hat: zeros(n, aug.outputs()),
        cq_hat: zeros(aug.inputs(), n),
    };
    assert!(matches!(recover_controller(&vars, &aug), Err(Error::Recovery(_))));
}

#[test]
fn zero_mismatch_is_feasible_and_verified() {
    let aug = toy_augmented(0.0, 0.0);
    let res = search_gamma_lambda(&aug, &bisect_options()).unwrap();
    assert!(res.feasible, "{}", res.diagnostics);
    let ver = res.verification.clone().unwrap();
    assert!(ver.pass);
    assert!(ver.spectral_radius < 1.0);
    let q = res.qfilter.unwrap();
    let sys = closed_loop(&aug, &q).unwrap();
    let me = max_eig(&analysis_matrix(&sys, res.certificate.as_ref().unwrap(), res.lambda, res.gamma).unwrap()).unwrap();
    assert!(me < 0.0);
}

#[test]
fn minimize_and_bisect_agree() {
    let aug = toy_augmented(2e-3, 0.0);
    let b = search_gamma_lambda(&aug, &bisect_options()).unwrap();
    let m = search_gamma_lambda(&aug, &SearchOptions { method: GammaSearch::Minimize, ..bisect_options() }).unwrap();
    assert!(b.feasible && m.feasible);
    let rel = (b.gamma - m.gamma).abs() / b.gamma;
    assert!(rel < 0.05, "bisect {} minimize {}", b.gamma, m.gamma);
}

#[test]
fn sign_flipped_filter_fails_verification() {
    let aug = toy_augmented(2e-3, 0.0);
    let res = search_gamma_lambda(&aug, &bisect_options()).unwrap();
    assert!(res.feasible);
    let mut q = res.qfilter.unwrap();
    q.aq = scale(&q.aq, -1.0);
    q.bq = scale(&q.bq, -1.0);
    let sys = closed_loop(&aug, &q).unwrap();
    let me = max_eig(&analysis_matrix(&sys, res.certificate.as_ref().unwrap(), res.lambda, res.gamma).unwrap()).unwrap();
    assert!(me > 0.0);
    let ver = verify_closed_loop(&aug, &q, res.lambda, res.gamma, res.certificate.as_ref(), &LmiOptions::default()).unwrap();
    assert!(!ver.pass);
}

#[test]
fn gamma_below_floor_is_infeasible() {
    let aug = toy_augmented(0.0, 0.0);
    let s = synthesis_lmi(&aug, 100.0, GammaMode::Fixed(1e-3), &LmiOptions::default()).unwrap();
    assert!(!s.feasible);
    let ok = synthesis_lmi(&aug, 100.0, GammaMode::Fixed(100.0), &LmiOptions::default()).unwrap();
    assert!(ok.feasible);
    assert!(ok.margin >= ok.strictness);
}

#[test]
fn search_input_validation() {
    let aug = toy_augmented(0.0, 0.0);
    let empty = SearchOptions { lambda_grid: vec![], ..bisect_options() };
    assert!(matches!(search_gamma_lambda(&aug, &empty), Err(Error::Domain(_))));
    let bad = SearchOptions { gamma_lo: 10.0, gamma_hi: 1.0, ..bisect_options() };
    assert!(search_gamma_lambda(&aug, &bad).is_err());
    let neg = SearchOptions { sector_scales: vec![-1.0], ..bisect_options() };
    assert!(search_gamma_lambda(&aug, &neg).is_err());
    assert!(synthesis_lmi(&aug, 0.0, GammaMode::Minimize, &LmiOptions::default()).is_err());
}

#[test]
fn larger_mismatch_never_lowers_gamma() {
    let o = bisect_options();
    let g1 = search_gamma_lambda(&toy_augmented(1e-3, 0.0), &o).unwrap();
    let g2 = search_gamma_lambda(&toy_augmented(2e-3, 0.0), &o).unwrap();
    assert!(g1.feasible);
    if g2.feasible {
        assert!(g2.gamma >= g1.gamma * (1.0 - o.rel_tol), "{} < {}", g2.gamma, g1.gamma);
    }
}

#[test]
fn sector_fractions_fall_back_in_order() {
    // a sector far too large for any filter, then none
    let aug = toy_augmented(50.0, 0.0);
    let o = SearchOptions { sector_scales: vec![1.0, 0.0], ..bisect_options() };
    let res = search_gamma_lambda(&aug, &o).unwrap();
    assert!(res.feasible);
    assert_eq!(res.sector_scale, 0.0);
    assert!(res.grid.iter().any(|p| p.sector_scale == 1.0 && !p.feasible));
    let strict = SearchOptions { sector_scales: vec![1.0], ..bisect_options() };
    assert!(!search_gamma_lambda(&aug, &strict).unwrap().feasible);
}

#[test]
fn qfilter_json_roundtrip() {
    let q = QFilter {
        aq: from_rows(2, 2, &[0.1, 0.2, 0.3, 0.4]),
        bq: from_rows(2, 1, &[1.0, -1.0]),
        cq: from_rows(1, 2, &[0.5, 0.25]),
    };
    let back = QFilter::from_json(&q.to_json()).unwrap();
    assert_eq!(back, q);
    let bad = q.to_json().replace("\"DQ\"", "\"DX\"");
    assert!(QFilter::from_json(&bad).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn change_of_variables_roundtrip(seed in 0u64..100_000) {
        let aug = toy_augmented(0.1, 0.0);
        let (n, m, p) = (aug.order(), aug.inputs(), aug.outputs());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x0 = random_matrix(n, n, &mut rng);
        let y0 = random_matrix(n, n, &mut rng);
        let x1 = &x0 * t(&x0) + eye(n);
        let y1 = &y0 * t(&y0) * 0.05 + eye(n) * 0.05;
        let q = QFilter {
            aq: random_matrix(n, n, &mut rng),
            bq: random_matrix(n, p, &mut rng),
            cq: random_matrix(m, n, &mut rng),
        };
        let vars = forward_change_of_variables(&q, &x1, &y1, &aug).unwrap();
        let back = recover_controller(&vars, &aug).unwrap();
        let err = frob(&(hcat(&back.aq, &back.bq) - hcat(&q.aq, &q.bq))) + frob(&(&back.cq - &q.cq));
        prop_assert!(err < 1e-7 * (1.0 + frob(&q.aq)), "err {}", err);
        // balancing is a similarity: closed-loop spectra agree
        let (qb, _) = balance_filter(&back, &x1, &y1).unwrap();
        let r1 = spectral_radius(&closed_loop(&aug, &back).unwrap().g).unwrap();
        let r2 = spectral_radius(&closed_loop(&aug, &qb).unwrap().g).unwrap();
        prop_assert!((r1 - r2).abs() < 1e-7 * r1.max(1.0));
    }
}
