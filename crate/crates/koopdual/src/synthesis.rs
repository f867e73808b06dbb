//! Robust analysis and synthesis LMIs for the dual-loop compensator, the
//! change of variables back to a Q-filter, and the (lambda, gamma) search.
//!
//! Every LMI is posed with its sector multiplier folded into the data:
//! the mismatch input channel is divided by lambda and the sector outputs are
//! multiplied by it, which leaves unit blocks on the diagonal. The two forms
//! are congruent, and the scaled one stays well conditioned for large lambda.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{
    block, cond2, eye, frob, hcat, inv, is_finite, max_eig, min_eig, scale, scaled_eye,
    spectral_radius, sym, t, vcat, zeros, DenseMatrix, Matrix,
};
use crate::nominal::AugmentedPlant;
use crate::sdp::{self, LmiProblem, SdpOptions, SdpStatus, VarId};

/// Options shared by the analysis and synthesis solves.
#[derive(Clone, Debug)]
pub struct LmiOptions {
    /// Strictness margin relative to the scale of the constant data.
    pub rel_eps: f64,
    /// Upper bound on the Lyapunov-type certificates, keeps the feasible set bounded.
    pub rho: f64,
    pub sdp: SdpOptions,
}

impl Default for LmiOptions {
    fn default() -> Self {
        LmiOptions {
            rel_eps: 1e-7,
            rho: 1e3,
            sdp: SdpOptions::default(),
        }
    }
}

fn strictness(opts: &LmiOptions, scale: f64) -> f64 {
    opts.rel_eps * scale.max(1.0)
}

fn max_abs(a: &Matrix) -> f64 {
    let mut s: f64 = 0.0;
    for j in 0..a.ncols() {
        for i in 0..a.nrows() {
            s = s.max(a[(i, j)].abs());
        }
    }
    s
}

/// x(k+1) = G x + F f + H w, z = C x, with |f| <= |U* x|.
#[derive(Clone, Debug)]
pub struct AnalysisSystem {
    pub g: Matrix,
    pub f: Matrix,
    pub h: Matrix,
    pub c: Matrix,
    pub ustar: Matrix,
}

impl AnalysisSystem {
    pub fn order(&self) -> usize {
        self.g.nrows()
    }

    fn check(&self) -> Result<()> {
        let n = self.g.nrows();
        let ok = self.g.ncols() == n
            && self.f.nrows() == n
            && self.h.nrows() == n
            && self.c.ncols() == n
            && self.ustar.ncols() == n;
        if ok {
            Ok(())
        } else {
            Err(Error::Dimension("analysis system operands".into()))
        }
    }
}

#[derive(Clone, Debug)]
pub struct AnalysisOutcome {
    pub feasible: bool,
    pub p: Option<Matrix>,
    /// Largest t with LMI + t I <= 0 and P >= t I found by the solver.
    pub margin: f64,
    /// Largest eigenvalue of the assembled LMI at the returned P.
    pub max_eig: f64,
    pub status: SdpStatus,
}

/// The analysis block matrix at a given P, in the scaled form
/// [[G'PG - P + l^2 U'U, G'PF/l, G'PH, C'], [., F'PF/l^2 - I, F'PH/l, 0],
///  [., ., H'PH - g^2 I, 0], [C, 0, 0, -I]].
pub fn analysis_matrix(sys: &AnalysisSystem, p: &Matrix, lambda: f64, gamma: f64) -> Result<Matrix> {
    sys.check()?;
    let fl = scale(&sys.f, 1.0 / lambda);
    let (nf, d, q) = (fl.ncols(), sys.h.ncols(), sys.c.nrows());
    let gt = t(&sys.g);
    let ft = t(&fl);
    let ht = t(&sys.h);
    let b00 = &gt * p * &sys.g - p + scale(&(t(&sys.ustar) * &sys.ustar), lambda * lambda);
    let b01 = &gt * p * &fl;
    let b02 = &gt * p * &sys.h;
    let b11 = &ft * p * &fl - eye(nf);
    let b12 = &ft * p * &sys.h;
    let b22 = &ht * p * &sys.h - scaled_eye(d, gamma * gamma);
    let ct = t(&sys.c);
    let b33 = scale(&eye(q), -1.0);
    let (b10, b20, b21, b30) = (t(&b01), t(&b02), t(&b12), sys.c.clone());
    let z = |r: usize, c: usize| zeros(r, c);
    let (z13, z23, z31, z32) = (z(nf, q), z(d, q), z(q, nf), z(q, d));
    Ok(block(&[
        vec![Some(&b00), Some(&b01), Some(&b02), Some(&ct)],
        vec![Some(&b10), Some(&b11), Some(&b12), Some(&z13)],
        vec![Some(&b20), Some(&b21), Some(&b22), Some(&z23)],
        vec![Some(&b30), Some(&z31), Some(&z32), Some(&b33)],
    ]))
}

/// Feasibility of the sector-bounded H-infinity analysis LMI at fixed
/// (lambda, gamma), posed as a margin maximization.
pub fn analysis_lmi(
    sys: &AnalysisSystem,
    lambda: f64,
    gamma: f64,
    opts: &LmiOptions,
) -> Result<AnalysisOutcome> {
    sys.check()?;
    if !(lambda > 0.0 && gamma > 0.0) {
        return Err(Error::Domain("lambda and gamma must be positive".into()));
    }
    let n = sys.order();
    let fl = scale(&sys.f, 1.0 / lambda);
    let (nf, d, q) = (fl.ncols(), sys.h.ncols(), sys.c.nrows());
    let data_scale = [max_abs(&sys.g), max_abs(&fl), max_abs(&sys.h), max_abs(&sys.c)]
        .into_iter()
        .fold(1.0, f64::max);
    let eps = strictness(opts, data_scale);

    let mut pr = LmiProblem::new();
    let pv = pr.add_var("P", n, n, true);
    let tv = pr.add_var("t", 1, 1, false);
    // nonempty blocks only: a zero-size channel drops out of the LMI
    let mut sizes = vec![n];
    let ib_f = (nf > 0).then(|| {
        sizes.push(nf);
        sizes.len() - 1
    });
    let ib_h = (d > 0).then(|| {
        sizes.push(d);
        sizes.len() - 1
    });
    let ib_c = (q > 0).then(|| {
        sizes.push(q);
        sizes.len() - 1
    });
    let k = pr.add_constraint(&sizes, 0.0);
    let gt = t(&sys.g);
    pr.add_term(k, 0, 0, Some(scale(&gt, 0.5)), pv, Some(sys.g.clone()));
    pr.add_diag_var(k, 0, -1.0, pv);
    let uu = scale(&(t(&sys.ustar) * &sys.ustar), lambda * lambda);
    pr.add_const(k, 0, 0, &uu);
    if let Some(bf) = ib_f {
        pr.add_term(k, 0, bf, Some(gt.clone()), pv, Some(fl.clone()));
        pr.add_term(k, bf, bf, Some(scale(&t(&fl), 0.5)), pv, Some(fl.clone()));
        pr.add_const(k, bf, bf, &scale(&eye(nf), -1.0));
        if let Some(bh) = ib_h {
            pr.add_term(k, bf, bh, Some(t(&fl)), pv, Some(sys.h.clone()));
        }
    }
    if let Some(bh) = ib_h {
        pr.add_term(k, 0, bh, Some(gt.clone()), pv, Some(sys.h.clone()));
        pr.add_term(k, bh, bh, Some(scale(&t(&sys.h), 0.5)), pv, Some(sys.h.clone()));
        pr.add_const(k, bh, bh, &scaled_eye(d, -gamma * gamma));
    }
    if let Some(bc) = ib_c {
        pr.add_const(k, 0, bc, &t(&sys.c));
        pr.add_const(k, bc, bc, &scale(&eye(q), -1.0));
    }
    pr.add_identity_term(k, 1.0, tv);
    // P >= t I and P <= rho I
    let kp = pr.add_constraint(&[n], 0.0);
    pr.add_diag_var(kp, 0, -1.0, pv);
    pr.add_identity_term(kp, 1.0, tv);
    let kr = pr.add_constraint(&[n], 0.0);
    pr.add_diag_var(kr, 0, 1.0, pv);
    pr.add_const(kr, 0, 0, &scaled_eye(n, -opts.rho));

    let mut b = vec![0.0; pr.dim()];
    b[pr.var_offset(tv)] = 1.0;
    let mut so = opts.sdp.clone();
    if so.dual_target.is_none() {
        so.dual_target = Some(2.0 * eps);
    }
    let sol = sdp::solve(&pr, &b, &so)?;
    let p = pr.unpack(&sol.y, pv);
    let tval = sol.y[pr.var_offset(tv)];
    let lmi = analysis_matrix(sys, &p, lambda, gamma)?;
    let me = max_eig(&lmi)?;
    let pmin = min_eig(&p)?;
    let feasible = is_finite(&p) && me <= -0.5 * eps && pmin > 0.0;
    Ok(AnalysisOutcome {
        feasible,
        p: Some(p),
        margin: tval,
        max_eig: me,
        status: sol.status,
    })
}

/// Smallest gamma for which the analysis LMI is feasible, by bisection to
/// relative width `rel_tol`. Returns `None` when even `hi` is infeasible.
pub fn min_gamma_analysis(
    sys: &AnalysisSystem,
    lambda: f64,
    lo: f64,
    hi: f64,
    rel_tol: f64,
    opts: &LmiOptions,
) -> Result<Option<f64>> {
    if !(lo > 0.0 && hi > lo && rel_tol > 0.0) {
        return Err(Error::Domain("gamma bracket must satisfy 0 < lo < hi".into()));
    }
    let feasible = |g: f64| -> Result<bool> { Ok(analysis_lmi(sys, lambda, g, opts)?.feasible) };
    if !feasible(hi)? {
        return Ok(None);
    }
    let (mut lo, mut hi) = (lo, hi);
    if feasible(lo)? {
        return Ok(Some(lo));
    }
    while hi / lo - 1.0 > rel_tol {
        let mid = (lo * hi).sqrt();
        if feasible(mid)? {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(Some(hi))
}

/// Dynamic compensator x_Q(t+1) = A_Q x_Q + B_Q f, u_f = C_Q x_Q (no feedthrough).
#[derive(Clone, Debug, PartialEq)]
pub struct QFilter {
    pub aq: Matrix,
    pub bq: Matrix,
    pub cq: Matrix,
}

impl QFilter {
    pub fn zero(r: usize, p: usize, m: usize) -> Self {
        QFilter {
            aq: zeros(r, r),
            bq: zeros(r, p),
            cq: zeros(m, r),
        }
    }

    pub fn order(&self) -> usize {
        self.aq.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.aq.nrows();
        if self.aq.ncols() != r || self.bq.nrows() != r || self.cq.ncols() != r {
            return Err(Error::Dimension("Q-filter blocks".into()));
        }
        if !(is_finite(&self.aq) && is_finite(&self.bq) && is_finite(&self.cq)) {
            return Err(Error::Parse("non-finite Q-filter entry".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&QFilterJson::from(self)).expect("q-filter serialize")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let j: QFilterJson = serde_json::from_str(s).map_err(|e| Error::Parse(e.to_string()))?;
        j.to_filter()
    }
}

/// Serialized Q-filter; D_Q is recorded for completeness and must be zero.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QFilterJson {
    #[serde(rename = "AQ")]
    pub aq: DenseMatrix,
    #[serde(rename = "BQ")]
    pub bq: DenseMatrix,
    #[serde(rename = "CQ")]
    pub cq: DenseMatrix,
    #[serde(rename = "DQ")]
    pub dq: DenseMatrix,
}

impl From<&QFilter> for QFilterJson {
    fn from(q: &QFilter) -> Self {
        QFilterJson {
            aq: (&q.aq).into(),
            bq: (&q.bq).into(),
            cq: (&q.cq).into(),
            dq: (&zeros(q.cq.nrows(), q.bq.ncols())).into(),
        }
    }
}

impl QFilterJson {
    pub fn to_filter(&self) -> Result<QFilter> {
        let q = QFilter {
            aq: self.aq.to_matrix()?,
            bq: self.bq.to_matrix()?,
            cq: self.cq.to_matrix()?,
        };
        let dq = self.dq.to_matrix()?;
        if dq.nrows() != q.cq.nrows() || dq.ncols() != q.bq.ncols() || frob(&dq) != 0.0 {
            return Err(Error::Parse("DQ must be a zero matrix".into()));
        }
        q.validate()?;
        Ok(q)
    }
}

/// Transformed synthesis variables.
#[derive(Clone, Debug)]
pub struct SynthesisVars {
    pub x1: Matrix,
    pub y1: Matrix,
    pub aq_hat: Matrix,
    pub bq_hat: Matrix,
    pub cq_hat: Matrix,
}

/// How gamma enters the synthesis LMI.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum GammaMode {
    /// Gamma fixed; the strictness margin is maximized.
    Fixed(f64),
    /// gamma^2 is a decision variable and is minimized.
    Minimize,
}

#[derive(Clone, Debug)]
pub struct SynthesisSolve {
    pub vars: SynthesisVars,
    pub gamma: f64,
    /// Margin t for `Fixed`, the imposed strictness for `Minimize`.
    pub margin: f64,
    pub strictness: f64,
    pub status: SdpStatus,
    pub iterations: usize,
    /// Largest eigenvalue of each assembled constraint (main, coupling, bounds).
    pub audit: Vec<f64>,
    pub feasible: bool,
}

fn scaled_plant(aug: &AugmentedPlant, lambda: f64) -> AugmentedPlant {
    let mut a = aug.clone();
    a.fbar = scale(&aug.fbar, 1.0 / lambda);
    a.d21bar = scale(&aug.d21bar, 1.0 / lambda);
    a.uprime = scale(&aug.uprime, lambda);
    a.u2 = scale(&aug.u2, lambda);
    a.vprime = scale(&aug.vprime, lambda);
    a
}

fn is_zero(a: &Matrix) -> bool {
    a.nrows() == 0 || a.ncols() == 0 || max_abs(a) == 0.0
}

struct Built {
    pr: LmiProblem,
    x: VarId,
    y: VarId,
    ah: VarId,
    bh: VarId,
    ch: VarId,
    g: Option<VarId>,
    t: Option<VarId>,
    eps: f64,
}

fn build_synthesis(aug: &AugmentedPlant, lambda: f64, mode: GammaMode, opts: &LmiOptions) -> Result<Built> {
    let s = scaled_plant(aug, lambda);
    let n = s.order();
    let m = s.inputs();
    let p = s.outputs();
    let (nf, d, q) = (s.fbar.ncols(), s.b1bar.ncols(), s.c1bar.nrows());
    let ok = s.abar.ncols() == n
        && s.b2bar.nrows() == n
        && s.c2bar.ncols() == n
        && s.fbar.nrows() == n
        && s.d21bar.nrows() == p
        && s.d21bar.ncols() == nf
        && s.b1bar.nrows() == n
        && s.c1bar.ncols() == n
        && s.d12bar.nrows() == q
        && s.d12bar.ncols() == m
        && s.uprime.ncols() == n
        && s.u2.nrows() == s.uprime.nrows()
        && s.u2.ncols() == m
        && s.vprime.ncols() == n;
    if !ok {
        return Err(Error::Dimension("augmented plant blocks".into()));
    }
    let use_u = !(is_zero(&s.uprime) && is_zero(&s.u2));
    let use_v = !is_zero(&s.vprime);
    let (nu, nv) = (s.uprime.nrows(), s.vprime.nrows());

    let mut pr = LmiProblem::new();
    let x = pr.add_var("X1", n, n, true);
    let y = pr.add_var("Y1", n, n, true);
    let ah = pr.add_var("AQhat", n, n, false);
    let bh = pr.add_var("BQhat", n, p, false);
    let ch = pr.add_var("CQhat", m, n, false);
    let g = matches!(mode, GammaMode::Minimize).then(|| pr.add_var("gamma2", 1, 1, false));
    let tv = matches!(mode, GammaMode::Fixed(_)).then(|| pr.add_var("t", 1, 1, false));

    // block indices: 0..4 state blocks, then F, W, Z, U, V as present
    let mut sizes = vec![n, n, n, n];
    let mut push = |sz: usize, on: bool| {
        (on && sz > 0).then(|| {
            sizes.push(sz);
            sizes.len() - 1
        })
    };
    let bf = push(nf, true);
    let bw = push(d, true);
    let bz = push(q, true);
    let bu = push(nu, use_u);
    let bv = push(nv, use_v);

    let gamma_sq = match mode {
        GammaMode::Fixed(gm) => gm * gm,
        GammaMode::Minimize => 0.0,
    };
    let data_scale = [
        max_abs(&s.abar),
        max_abs(&s.fbar),
        max_abs(&s.b1bar),
        max_abs(&s.b2bar),
        max_abs(&s.c1bar),
        max_abs(&s.c2bar),
        max_abs(&s.uprime),
        max_abs(&s.vprime),
    ]
    .into_iter()
    .fold(1.0, f64::max);
    let eps = strictness(opts, data_scale);
    let margin = if tv.is_some() { 0.0 } else { eps };
    let k = pr.add_constraint(&sizes, margin);
    let id = eye(n);
    let nid = scale(&id, -1.0);

    pr.add_diag_var(k, 0, -1.0, x);
    pr.add_const(k, 0, 1, &nid);
    pr.add_term(k, 0, 2, Some(s.abar.clone()), x, None);
    pr.add_term(k, 0, 2, Some(s.b2bar.clone()), ch, None);
    pr.add_const(k, 0, 3, &s.abar);

    pr.add_diag_var(k, 1, -1.0, y);
    pr.add_term(k, 1, 2, None, ah, None);
    pr.add_term(k, 1, 3, None, y, Some(s.abar.clone()));
    pr.add_term(k, 1, 3, None, bh, Some(s.c2bar.clone()));

    pr.add_diag_var(k, 2, -1.0, x);
    pr.add_const(k, 2, 3, &nid);
    pr.add_diag_var(k, 3, -1.0, y);

    if let Some(bf) = bf {
        pr.add_const(k, 0, bf, &s.fbar);
        pr.add_term(k, 1, bf, None, y, Some(s.fbar.clone()));
        if p > 0 {
            pr.add_term(k, 1, bf, None, bh, Some(s.d21bar.clone()));
        }
        pr.add_const(k, bf, bf, &scale(&eye(nf), -1.0));
    }
    if let Some(bw) = bw {
        pr.add_const(k, 0, bw, &s.b1bar);
        pr.add_term(k, 1, bw, None, y, Some(s.b1bar.clone()));
        match g {
            Some(gv) => {
                for i in 0..d {
                    let mut e = zeros(d, 1);
                    e[(i, 0)] = -0.5;
                    let mut et = zeros(1, d);
                    et[(0, i)] = 1.0;
                    pr.add_term(k, bw, bw, Some(e), gv, Some(et));
                }
            }
            None => pr.add_const(k, bw, bw, &scaled_eye(d, -gamma_sq)),
        }
    }
    if let Some(bz) = bz {
        pr.add_term(k, 2, bz, None, x, Some(t(&s.c1bar)));
        pr.add_term(k, bz, 2, Some(s.d12bar.clone()), ch, None);
        pr.add_const(k, 3, bz, &t(&s.c1bar));
        pr.add_const(k, bz, bz, &scale(&eye(q), -1.0));
    }
    if let Some(bu) = bu {
        pr.add_term(k, 2, bu, None, x, Some(t(&s.uprime)));
        pr.add_term(k, bu, 2, Some(s.u2.clone()), ch, None);
        pr.add_const(k, 3, bu, &t(&s.uprime));
        pr.add_const(k, bu, bu, &scale(&eye(nu), -1.0));
    }
    if let Some(bv) = bv {
        pr.add_term(k, 2, bv, None, x, Some(t(&s.vprime)));
        pr.add_const(k, 3, bv, &t(&s.vprime));
        pr.add_const(k, bv, bv, &scale(&eye(nv), -1.0));
    }

    // [[X1, I], [I, Y1]] > 0
    let k2 = pr.add_constraint(&[n, n], margin);
    pr.add_diag_var(k2, 0, -1.0, x);
    pr.add_diag_var(k2, 1, -1.0, y);
    pr.add_const(k2, 0, 1, &nid);
    if let Some(tv) = tv {
        pr.add_identity_term(k, 1.0, tv);
        pr.add_identity_term(k2, 1.0, tv);
    }
    for v in [x, y] {
        let kb = pr.add_constraint(&[n], 0.0);
        pr.add_diag_var(kb, 0, 1.0, v);
        pr.add_const(kb, 0, 0, &scaled_eye(n, -opts.rho));
    }
    Ok(Built {
        pr,
        x,
        y,
        ah,
        bh,
        ch,
        g,
        t: tv,
        eps,
    })
}

/// Solves the synthesis LMI (state-space blocks, sector channels, coupling
/// condition) at a given lambda.
pub fn synthesis_lmi(
    aug: &AugmentedPlant,
    lambda: f64,
    mode: GammaMode,
    opts: &LmiOptions,
) -> Result<SynthesisSolve> {
    if !(lambda > 0.0) {
        return Err(Error::Domain("lambda must be positive".into()));
    }
    if let GammaMode::Fixed(g) = mode {
        if !(g > 0.0) {
            return Err(Error::Domain("gamma must be positive".into()));
        }
    }
    let bt = build_synthesis(aug, lambda, mode, opts)?;
    let pr = &bt.pr;
    let mut b = vec![0.0; pr.dim()];
    if let Some(tv) = bt.t {
        b[pr.var_offset(tv)] = 1.0;
    }
    if let Some(gv) = bt.g {
        b[pr.var_offset(gv)] = -1.0;
    }
    let sol = sdp::solve(pr, &b, &opts.sdp)?;
    let y = &sol.y;
    let vars = SynthesisVars {
        x1: pr.unpack(y, bt.x),
        y1: pr.unpack(y, bt.y),
        aq_hat: pr.unpack(y, bt.ah),
        bq_hat: pr.unpack(y, bt.bh),
        cq_hat: pr.unpack(y, bt.ch),
    };
    // audit the LMIs themselves, without the margin variable's identity shift
    let mut y0 = y.clone();
    if let Some(tv) = bt.t {
        y0[pr.var_offset(tv)] = 0.0;
    }
    let audit = sdp::audit(pr, &y0)?;
    let (gamma, margin) = match mode {
        GammaMode::Fixed(g) => (g, y[pr.var_offset(bt.t.unwrap())]),
        GammaMode::Minimize => (y[pr.var_offset(bt.g.unwrap())].max(0.0).sqrt(), bt.eps),
    };
    // with a margin variable the audit is against -t I; otherwise against the imposed margin
    let need = -0.5 * bt.eps;
    let main_ok = audit.iter().take(2).all(|&e| e <= need);
    let finite = audit.iter().all(|e| e.is_finite());
    let feasible = finite
        && main_ok
        && match mode {
            GammaMode::Fixed(_) => margin >= bt.eps,
            GammaMode::Minimize => sol.status == SdpStatus::Optimal,
        };
    Ok(SynthesisSolve {
        vars,
        gamma,
        margin,
        strictness: bt.eps,
        status: sol.status,
        iterations: sol.iterations,
        audit,
        feasible,
    })
}

/// Inverse change of variables with X2 = I and Y2 = I - Y1 X1.
pub fn recover_controller(vars: &SynthesisVars, aug: &AugmentedPlant) -> Result<QFilter> {
    let n = aug.order();
    let m = aug.inputs();
    let p = aug.outputs();
    let y2 = eye(n) - &vars.y1 * &vars.x1;
    let c = cond2(&y2)?;
    if !c.is_finite() || c > 1e14 {
        return Err(Error::Recovery(format!(
            "I - Y1 X1 is singular (condition {c:.3e}); re-solve with X1 perturbed by a multiple of I"
        )));
    }
    let lm = block(&[
        vec![Some(&y2), Some(&(&vars.y1 * &aug.b2bar))],
        vec![None, Some(&eye(m))],
    ]);
    let rm = block(&[
        vec![Some(&eye(n)), None],
        vec![Some(&(&aug.c2bar * &vars.x1)), Some(&eye(p))],
    ]);
    let top = &vars.aq_hat - &vars.y1 * &aug.abar * &vars.x1;
    let mid = block(&[
        vec![Some(&top), Some(&vars.bq_hat)],
        vec![Some(&vars.cq_hat), Some(&zeros(m, p))],
    ]);
    let sol = crate::linalg::solve(&lm, &mid)? * inv(&rm)?;
    let q = QFilter {
        aq: crate::linalg::sub(&sol, 0, 0, n, n),
        bq: crate::linalg::sub(&sol, 0, n, n, p),
        cq: crate::linalg::sub(&sol, n, 0, m, n),
    };
    if !(is_finite(&q.aq) && is_finite(&q.bq) && is_finite(&q.cq)) {
        return Err(Error::Recovery("non-finite controller matrices".into()));
    }
    Ok(q)
}

/// Forward change of variables: maps a controller and (X1, Y1) to the
/// transformed variables, so that `recover_controller` inverts it.
pub fn forward_change_of_variables(
    q: &QFilter,
    x1: &Matrix,
    y1: &Matrix,
    aug: &AugmentedPlant,
) -> Result<SynthesisVars> {
    let n = aug.order();
    let m = aug.inputs();
    let p = aug.outputs();
    let y2 = eye(n) - y1 * x1;
    let lm = block(&[
        vec![Some(&y2), Some(&(y1 * &aug.b2bar))],
        vec![None, Some(&eye(m))],
    ]);
    let rm = block(&[
        vec![Some(&eye(n)), None],
        vec![Some(&(&aug.c2bar * x1)), Some(&eye(p))],
    ]);
    let k = block(&[
        vec![Some(&q.aq), Some(&q.bq)],
        vec![Some(&q.cq), Some(&zeros(m, p))],
    ]);
    let out = &lm * &k * &rm;
    Ok(SynthesisVars {
        x1: x1.clone(),
        y1: y1.clone(),
        aq_hat: crate::linalg::sub(&out, 0, 0, n, n) + y1 * &aug.abar * x1,
        bq_hat: crate::linalg::sub(&out, 0, n, n, p),
        cq_hat: crate::linalg::sub(&out, n, 0, m, n),
    })
}

/// Equivalent realization of a recovered filter in the coordinates
/// x_Q' = T x_Q with T = S^(1/2) V', where I - Y1 X1 = U S V'. The identity
/// factor X2 = I puts all of the ill-conditioning of I - Y1 X1 into the filter
/// state; this splits it evenly between the two certificate blocks.
pub fn balance_filter(q: &QFilter, x1: &Matrix, y1: &Matrix) -> Result<(QFilter, Matrix)> {
    let n = x1.nrows();
    let (_, sv, v) = crate::linalg::svd(&(eye(n) - y1 * x1))?;
    if sv.last().map_or(true, |&s| !(s > 0.0)) {
        return Err(Error::Recovery("I - Y1 X1 is singular".into()));
    }
    let tm = Matrix::from_fn(n, n, |i, j| sv[i].sqrt() * v[(j, i)]);
    let ti = Matrix::from_fn(n, n, |i, j| v[(i, j)] / sv[j].sqrt());
    let out = QFilter {
        aq: &tm * &q.aq * &ti,
        bq: &tm * &q.bq,
        cq: &q.cq * &ti,
    };
    Ok((out, tm))
}

/// Transforms a closed-loop certificate to filter coordinates x_Q' = T x_Q.
pub fn transform_certificate(p: &Matrix, tm: &Matrix) -> Result<Matrix> {
    let r = tm.nrows();
    let n = p.nrows() - r;
    let ti = inv(tm)?;
    let s = block(&[vec![Some(&eye(n)), None], vec![None, Some(&ti)]]);
    Ok(sym(&(t(&s) * p * &s)))
}

/// Closed loop of the augmented plant with the Q-filter, including the
/// propagated sector factor [[U', U2 C_Q], [V', 0]].
pub fn closed_loop(aug: &AugmentedPlant, q: &QFilter) -> Result<AnalysisSystem> {
    q.validate()?;
    let r = q.order();
    if q.bq.ncols() != aug.outputs() || q.cq.nrows() != aug.inputs() {
        return Err(Error::Dimension("Q-filter does not match the augmented plant".into()));
    }
    let g = block(&[
        vec![Some(&aug.abar), Some(&(&aug.b2bar * &q.cq))],
        vec![Some(&(&q.bq * &aug.c2bar)), Some(&q.aq)],
    ]);
    let f = vcat(&aug.fbar, &(&q.bq * &aug.d21bar));
    let h = vcat(&aug.b1bar, &zeros(r, aug.b1bar.ncols()));
    let c = hcat(&aug.c1bar, &(&aug.d12bar * &q.cq));
    let u2cq = &aug.u2 * &q.cq;
    let ustar = block(&[
        vec![Some(&aug.uprime), Some(&u2cq)],
        vec![Some(&aug.vprime), Some(&zeros(aug.vprime.nrows(), r))],
    ]);
    Ok(AnalysisSystem { g, f, h, c, ustar })
}

/// Closed-loop Lyapunov certificate implied by (X1, Y1) under X2 = I.
pub fn certificate_from_synthesis(x1: &Matrix, y1: &Matrix) -> Matrix {
    let n = x1.nrows();
    let y2 = eye(n) - y1 * x1;
    let p22 = x1 * y1 * x1 - x1;
    sym(&block(&[
        vec![Some(y1), Some(&y2)],
        vec![Some(&t(&y2)), Some(&p22)],
    ]))
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Verification {
    pub pass: bool,
    /// "certificate" when the synthesis certificate verified directly,
    /// "analysis" when a fresh analysis solve was needed.
    pub method: String,
    pub max_eig: f64,
    pub spectral_radius: f64,
}

/// Checks the closed loop against the analysis LMI at (lambda, gamma). A
/// closed-loop certificate P in the filter's coordinates, when given, is
/// tried before a fresh analysis solve.
pub fn verify_closed_loop(
    aug: &AugmentedPlant,
    q: &QFilter,
    lambda: f64,
    gamma: f64,
    certificate: Option<&Matrix>,
    opts: &LmiOptions,
) -> Result<Verification> {
    let sys = closed_loop(aug, q)?;
    let rho = spectral_radius(&sys.g)?;
    if let Some(p) = certificate {
        if p.nrows() == sys.order() && min_eig(p)? > 0.0 {
            let me = max_eig(&analysis_matrix(&sys, p, lambda, gamma)?)?;
            if me < 0.0 {
                return Ok(Verification {
                    pass: true,
                    method: "certificate".into(),
                    max_eig: me,
                    spectral_radius: rho,
                });
            }
        }
    }
    let out = analysis_lmi(&sys, lambda, gamma, opts)?;
    Ok(Verification {
        pass: out.feasible,
        method: "analysis".into(),
        max_eig: out.max_eig,
        spectral_radius: rho,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum GammaSearch {
    /// gamma^2 minimized as a decision variable, then a margin re-solve slightly above it.
    #[default]
    Minimize,
    /// Bisection on fixed-gamma feasibility.
    Bisect,
}

#[derive(Clone, Debug)]
pub struct SearchOptions {
    pub lambda_grid: Vec<f64>,
    pub gamma_lo: f64,
    pub gamma_hi: f64,
    pub rel_tol: f64,
    pub method: GammaSearch,
    /// Fractions of the computed sector bounds to try, in order. The first
    /// fraction with any feasible lambda is kept. `[1.0]` certifies the full bound.
    pub sector_scales: Vec<f64>,
    pub lmi: LmiOptions,
}

/// Log-spaced grid with `n` points over [lo, hi].
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n <= 1 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..n)
        .map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp())
        .collect()
}

impl Default for SearchOptions {
    fn default() -> Self {
        SearchOptions {
            lambda_grid: log_grid(1e-2, 1e2, 10),
            gamma_lo: 1e-3,
            gamma_hi: 1e4,
            rel_tol: 1e-2,
            method: GammaSearch::Minimize,
            sector_scales: vec![1.0],
            lmi: LmiOptions::default(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct GridPoint {
    pub sector_scale: f64,
    pub lambda: f64,
    pub feasible: bool,
    pub gamma: Option<f64>,
    pub margin: Option<f64>,
    pub status: String,
}

#[derive(Clone, Debug)]
pub struct SynthesisResult {
    /// Recovered filter in balanced coordinates.
    pub qfilter: Option<QFilter>,
    pub gamma: f64,
    pub lambda: f64,
    /// Fraction of the sector bounds that was certified.
    pub sector_scale: f64,
    pub x1: Option<Matrix>,
    pub y1: Option<Matrix>,
    /// Closed-loop certificate in the coordinates of `qfilter`.
    pub certificate: Option<Matrix>,
    pub feasible: bool,
    pub grid: Vec<GridPoint>,
    /// Largest eigenvalue of each synthesis constraint at the returned point.
    pub certificate_eigs: Vec<f64>,
    pub verification: Option<Verification>,
    pub diagnostics: String,
}

/// Copy of the plant with the sector factors multiplied by `s`.
pub fn scale_sector(aug: &AugmentedPlant, s: f64) -> AugmentedPlant {
    let mut out = aug.clone();
    out.uprime = scale(&aug.uprime, s);
    out.u2 = scale(&aug.u2, s);
    out.vprime = scale(&aug.vprime, s);
    out
}

fn has_sector(aug: &AugmentedPlant) -> bool {
    frob(&aug.uprime) > 0.0 || frob(&aug.u2) > 0.0 || frob(&aug.vprime) > 0.0
}

fn fixed_feasible(aug: &AugmentedPlant, lambda: f64, gamma: f64, opts: &LmiOptions) -> Result<Option<SynthesisSolve>> {
    let mut o = opts.clone();
    // decisions only need the sign of the margin; stop once it is certified
    let probe = build_synthesis(aug, lambda, GammaMode::Fixed(gamma), opts)?.eps;
    o.sdp.dual_target = Some(2.0 * probe);
    let s = synthesis_lmi(aug, lambda, GammaMode::Fixed(gamma), &o)?;
    Ok(s.feasible.then_some(s))
}

fn search_one(aug: &AugmentedPlant, lambda: f64, so: &SearchOptions) -> Result<Option<SynthesisSolve>> {
    match so.method {
        GammaSearch::Minimize => {
            let s = synthesis_lmi(aug, lambda, GammaMode::Minimize, &so.lmi)?;
            // the minimizer often stalls right at the strictness margin; its gamma
            // is still a good starting point for the fixed-gamma ladder below
            if !s.gamma.is_finite() || !(s.gamma > 0.0) {
                return Ok(None);
            }
            let g0 = (s.gamma * (1.0 + so.rel_tol)).max(so.gamma_lo);
            for g in [g0, 1.1 * g0, 2.0 * g0, so.gamma_hi] {
                if g > so.gamma_hi && g != so.gamma_hi {
                    continue;
                }
                if let Some(r) = fixed_feasible(aug, lambda, g, &so.lmi)? {
                    return Ok(Some(r));
                }
            }
            Ok(None)
        }
        GammaSearch::Bisect => {
            let Some(mut best) = fixed_feasible(aug, lambda, so.gamma_hi, &so.lmi)? else {
                return Ok(None);
            };
            let (mut lo, mut hi) = (so.gamma_lo, so.gamma_hi);
            if let Some(s) = fixed_feasible(aug, lambda, lo, &so.lmi)? {
                best = s;
                hi = lo;
            }
            while hi / lo - 1.0 > so.rel_tol {
                let mid = (lo * hi).sqrt();
                match fixed_feasible(aug, lambda, mid, &so.lmi)? {
                    Some(s) => {
                        best = s;
                        hi = mid;
                    }
                    None => lo = mid,
                }
            }
            // re-solve at the accepted gamma without early stop for a centered certificate
            let r = synthesis_lmi(aug, lambda, GammaMode::Fixed(hi), &so.lmi)?;
            Ok(Some(if r.feasible { r } else { best }))
        }
    }
}

struct Accepted {
    lambda: f64,
    solve: SynthesisSolve,
    q: QFilter,
    cert: Matrix,
    ver: Verification,
}

fn accept(aug: &AugmentedPlant, lambda: f64, s: SynthesisSolve, lmi: &LmiOptions) -> Result<Accepted> {
    let q = recover_controller(&s.vars, aug)?;
    let (qb, tm) = balance_filter(&q, &s.vars.x1, &s.vars.y1)?;
    let cert = transform_certificate(&certificate_from_synthesis(&s.vars.x1, &s.vars.y1), &tm)?;
    let ver = verify_closed_loop(aug, &qb, lambda, s.gamma, Some(&cert), lmi)?;
    Ok(Accepted {
        lambda,
        solve: s,
        q: qb,
        cert,
        ver,
    })
}

/// Searches lambda over the grid and gamma per lambda; keeps the smallest
/// feasible gamma whose recovered controller passes verification. Sector
/// fractions are tried in the given order until one is feasible.
pub fn search_gamma_lambda(aug: &AugmentedPlant, so: &SearchOptions) -> Result<SynthesisResult> {
    if so.lambda_grid.is_empty() {
        return Err(Error::Domain("empty lambda grid".into()));
    }
    if so.lambda_grid.iter().any(|l| !(*l > 0.0)) || !(so.gamma_lo > 0.0 && so.gamma_hi > so.gamma_lo) {
        return Err(Error::Domain("lambda and gamma ranges must be positive and nonempty".into()));
    }
    if so.sector_scales.is_empty() || so.sector_scales.iter().any(|s| !(*s >= 0.0) || !s.is_finite()) {
        return Err(Error::Domain("sector scales must be a nonempty list of nonnegative numbers".into()));
    }
    let mut grid = Vec::new();
    let mut notes = Vec::new();
    let mut chosen: Option<(f64, Accepted)> = None;
    for &scale_s in &so.sector_scales {
        let a = scale_sector(aug, scale_s);
        let lambdas: Vec<f64> = if has_sector(&a) {
            // with a sector, first find which lambdas are feasible at all
            let mut ok = Vec::new();
            for &lambda in &so.lambda_grid {
                match fixed_feasible(&a, lambda, so.gamma_hi, &so.lmi) {
                    Ok(Some(_)) => ok.push(lambda),
                    Ok(None) => grid.push(GridPoint {
                        sector_scale: scale_s,
                        lambda,
                        feasible: false,
                        gamma: None,
                        margin: None,
                        status: "infeasible".into(),
                    }),
                    Err(e) => notes.push(format!("scale {scale_s:.1e} lambda {lambda:.3e}: {e}")),
                }
            }
            ok
        } else {
            // without a sector the mismatch channel only loosens as lambda grows
            vec![so.lambda_grid.iter().cloned().fold(f64::MIN, f64::max)]
        };
        let mut best: Option<Accepted> = None;
        for lambda in lambdas {
            let mut point = GridPoint {
                sector_scale: scale_s,
                lambda,
                feasible: false,
                gamma: None,
                margin: None,
                status: "infeasible".into(),
            };
            match search_one(&a, lambda, so) {
                Ok(Some(s)) => {
                    point.gamma = Some(s.gamma);
                    point.margin = Some(s.margin);
                    let status = format!("{:?}", s.status).to_lowercase();
                    match accept(&a, lambda, s, &so.lmi) {
                        Ok(acc) if acc.ver.pass => {
                            point.feasible = true;
                            point.status = status;
                            if best.as_ref().map_or(true, |b| acc.solve.gamma < b.solve.gamma) {
                                best = Some(acc);
                            }
                        }
                        Ok(acc) => point.status = format!("verification failed (max eig {:.3e})", acc.ver.max_eig),
                        Err(e) => point.status = format!("recovery: {e}"),
                    }
                }
                Ok(None) => {}
                Err(e) => notes.push(format!("scale {scale_s:.1e} lambda {lambda:.3e}: {e}")),
            }
            grid.push(point);
        }
        if let Some(b) = best {
            chosen = Some((scale_s, b));
            break;
        }
    }
    Ok(match chosen {
        Some((sector_scale, acc)) => SynthesisResult {
            qfilter: Some(acc.q),
            gamma: acc.solve.gamma,
            lambda: acc.lambda,
            sector_scale,
            x1: Some(acc.solve.vars.x1),
            y1: Some(acc.solve.vars.y1),
            certificate: Some(acc.cert),
            feasible: true,
            grid,
            certificate_eigs: acc.solve.audit,
            verification: Some(acc.ver),
            diagnostics: notes.join("; "),
        },
        None => SynthesisResult {
            qfilter: None,
            gamma: f64::INFINITY,
            lambda: f64::NAN,
            sector_scale: f64::NAN,
            x1: None,
            y1: None,
            certificate: None,
            feasible: false,
            grid,
            certificate_eigs: vec![],
            verification: None,
            diagnostics: if notes.is_empty() {
                "no feasible (lambda, gamma) on the grid".into()
            } else {
                notes.join("; ")
            },
        },
    })
}
