//! Riccati-based nominal loop (state feedback plus observer) and the
//! augmented plant seen by the robust compensator.

use serde::{Deserialize, Serialize};

use crate::bounds::{sector_matrices, MismatchBounds};
use crate::edmd::{KoopmanModel, OutputMode};
use crate::error::{Error, Result};
use crate::linalg::{
    self, block, diag, eye, frob, hcat, inv, scale, solve, spectral_radius, sym, t, vcat, zeros,
    DenseMatrix, Matrix,
};

/// Stabilizing solution of P = A'PA - A'PB (R + B'PB)^{-1} B'PA + Q by
/// structured doubling, polished with Newton steps when needed.
pub fn solve_dare(a: &Matrix, b: &Matrix, q: &Matrix, r: &Matrix) -> Result<Matrix> {
    let n = a.nrows();
    if a.ncols() != n || b.nrows() != n || q.nrows() != n || r.nrows() != b.ncols() {
        return Err(Error::Dimension("dare operands".into()));
    }
    let rinv = inv(r)?;
    let mut ak = a.clone();
    let mut g = sym(&(b * &rinv * t(b)));
    let mut h = sym(q);
    let id = eye(n);
    let mut converged = false;
    for _ in 0..200 {
        let w = &id + &g * &h;
        let wa = solve(&w, &ak)?;
        let wg = solve(&w, &g)?;
        let h_next = sym(&(&h + t(&ak) * &h * &wa));
        let g_next = sym(&(&g + &ak * &wg * t(&ak)));
        ak = &ak * &wa;
        let delta = frob(&(&h_next - &h));
        h = h_next;
        g = g_next;
        if !linalg::is_finite(&h) {
            break;
        }
        if delta <= 1e-15 * frob(&h).max(1.0) {
            converged = true;
            break;
        }
    }
    if !converged || !linalg::is_finite(&h) {
        return Err(Error::Synthesis(
            "riccati iteration did not converge; pair may not be stabilizable".into(),
        ));
    }
    let mut p = h;
    for _ in 0..3 {
        if dare_residual(a, b, q, r, &p)? < 1e-12 {
            break;
        }
        p = newton_step(a, b, q, r, &p)?;
    }
    let k = lqr_gain(a, b, r, &p)?;
    if spectral_radius(&(a + b * &k))? >= 1.0 {
        return Err(Error::Synthesis(
            "riccati solution is not stabilizing; pair is not stabilizable".into(),
        ));
    }
    Ok(p)
}

/// K = -(R + B'PB)^{-1} B'PA.
pub fn lqr_gain(a: &Matrix, b: &Matrix, r: &Matrix, p: &Matrix) -> Result<Matrix> {
    let bt = t(b);
    Ok(scale(&solve(&(r + &bt * p * b), &(&bt * p * a))?, -1.0))
}

pub fn dare_residual(a: &Matrix, b: &Matrix, q: &Matrix, r: &Matrix, p: &Matrix) -> Result<f64> {
    let at = t(a);
    let bt = t(b);
    let corr = &at * p * b * solve(&(r + &bt * p * b), &(&bt * p * a))?;
    let res = p - (&at * p * a - corr + q);
    Ok(frob(&res) / frob(p).max(f64::MIN_POSITIVE))
}

/// One Hewer step: solve the closed-loop Lyapunov equation for the current gain.
fn newton_step(a: &Matrix, b: &Matrix, q: &Matrix, r: &Matrix, p: &Matrix) -> Result<Matrix> {
    let k = lqr_gain(a, b, r, p)?;
    let acl = a + b * &k;
    let rhs = q + t(&k) * r * &k;
    dlyap(&acl, &rhs)
}

/// Solves P = F' P F + W by Kronecker vectorization.
pub fn dlyap(f: &Matrix, w: &Matrix) -> Result<Matrix> {
    let n = f.nrows();
    let nn = n * n;
    let mut big = eye(nn);
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                for l in 0..n {
                    // vec index (row i, col j) -> i*n + j ; (F' P F)_{ij} = sum_kl F_ki P_kl F_lj
                    big[(i * n + j, k * n + l)] -= f[(k, i)] * f[(l, j)];
                }
            }
        }
    }
    let rhs = Matrix::from_fn(nn, 1, |idx, _| w[(idx / n, idx % n)]);
    let x = solve(&big, &rhs)?;
    Ok(sym(&Matrix::from_fn(n, n, |i, j| x[(i * n + j, 0)])))
}

/// The lifted model restricted to the observables used for control design.
///
/// A constant observable has a unit eigenvalue that no input can move, so the
/// Riccati equations would have no stabilizing solution. It is dropped here,
/// together with the affine drift it carries into the other coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct DesignModel {
    pub a: Matrix,
    pub b2: Matrix,
    pub c2: Matrix,
    /// Lifted indices kept, in order.
    pub keep: Vec<usize>,
    /// True when the outputs are the (kept) lifted states.
    pub lifted_output: bool,
}

impl DesignModel {
    pub fn from_koopman(model: &KoopmanModel, mode: OutputMode) -> Self {
        let lm = model.a.nrows();
        let drop = model.basis.constant_index();
        let keep: Vec<usize> = (0..lm).filter(|&i| Some(i) != drop).collect();
        let k = keep.len();
        let a = Matrix::from_fn(k, k, |i, j| model.a[(keep[i], keep[j])]);
        let b2 = Matrix::from_fn(k, model.b2.ncols(), |i, j| model.b2[(keep[i], j)]);
        let lifted_output = mode == OutputMode::LiftedState;
        let c2 = if lifted_output {
            Matrix::from_fn(k, k, |i, j| model.c2[(keep[i], keep[j])])
        } else {
            Matrix::from_fn(model.c2.nrows(), k, |i, j| model.c2[(i, keep[j])])
        };
        DesignModel {
            a,
            b2,
            c2,
            keep,
            lifted_output,
        }
    }

    pub fn order(&self) -> usize {
        self.a.nrows()
    }

    /// Restricts a full lifted vector to the kept coordinates.
    pub fn project(&self, z: &[f64]) -> Vec<f64> {
        self.keep.iter().map(|&i| z[i]).collect()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct LqgWeights {
    /// Diagonal state weight on physical coordinates.
    pub q_physical: f64,
    /// Diagonal state weight on the remaining lifted coordinates.
    pub q_lifted: f64,
    pub r: f64,
    pub w_process: f64,
    /// Measurement noise variance; defaults to sigma^2 with a floor.
    pub v_measurement: Option<f64>,
}

impl Default for LqgWeights {
    fn default() -> Self {
        LqgWeights {
            q_physical: 1.0,
            q_lifted: 1e-4,
            r: 1.0,
            w_process: 1.0,
            v_measurement: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NominalGains {
    pub k: Matrix,
    pub l: Matrix,
    pub qw: Matrix,
    pub rw: Matrix,
    pub wn: Matrix,
    pub vn: Matrix,
}

/// Floor applied to the observer noise variance so the zero-noise design stays well posed.
pub const MIN_NOISE_STD: f64 = 1e-3;

pub fn lqg_design(
    model: &DesignModel,
    n_physical: usize,
    weights: &LqgWeights,
    sigma: f64,
) -> Result<NominalGains> {
    let lm = model.a.nrows();
    let m = model.b2.ncols();
    let p = model.c2.nrows();
    let qd: Vec<f64> = (0..lm)
        .map(|i| {
            if i < n_physical {
                weights.q_physical
            } else {
                weights.q_lifted
            }
        })
        .collect();
    let qw = diag(&qd);
    let rw = scale(&eye(m), weights.r);
    let wn = scale(&eye(lm), weights.w_process);
    let var = weights
        .v_measurement
        .unwrap_or(sigma.max(MIN_NOISE_STD).powi(2));
    let vn = scale(&eye(p), var);
    let pk = solve_dare(&model.a, &model.b2, &qw, &rw)?;
    let k = lqr_gain(&model.a, &model.b2, &rw, &pk)?;
    let at = t(&model.a);
    let ct = t(&model.c2);
    let po = solve_dare(&at, &ct, &wn, &vn)
        .map_err(|e| Error::Synthesis(format!("observer design: {e}")))?;
    let l = t(&lqr_gain(&at, &ct, &vn, &po)?);
    Ok(NominalGains {
        k,
        l,
        qw,
        rw,
        wn,
        vn,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedPlant {
    pub abar: Matrix,
    pub fbar: Matrix,
    pub b1bar: Matrix,
    pub b2bar: Matrix,
    pub c1bar: Matrix,
    pub c2bar: Matrix,
    pub d12bar: Matrix,
    pub d21bar: Matrix,
    pub uprime: Matrix,
    pub u2: Matrix,
    pub vprime: Matrix,
}

impl AugmentedPlant {
    pub fn order(&self) -> usize {
        self.abar.nrows()
    }
    pub fn inputs(&self) -> usize {
        self.b2bar.ncols()
    }
    pub fn outputs(&self) -> usize {
        self.c2bar.nrows()
    }
}

/// Disturbance, performance output and feedthrough weights.
#[derive(Clone, Debug, PartialEq)]
pub struct PerformanceChannel {
    pub b1: Matrix,
    pub c1: Matrix,
    pub d12: Matrix,
}

impl PerformanceChannel {
    /// Disturbance on the physical coordinates, output = physical state and
    /// `u_weight` times the input.
    pub fn physical(lm: usize, n_physical: usize, m: usize, u_weight: f64) -> Self {
        let mut b1 = zeros(lm, n_physical);
        let mut c1 = zeros(n_physical + m, lm);
        let mut d12 = zeros(n_physical + m, m);
        for i in 0..n_physical {
            b1[(i, i)] = 1.0;
            c1[(i, i)] = 1.0;
        }
        for i in 0..m {
            d12[(n_physical + i, i)] = u_weight;
        }
        PerformanceChannel { b1, c1, d12 }
    }
}

pub fn build_augmented(
    model: &DesignModel,
    gains: &NominalGains,
    perf: &PerformanceChannel,
    bounds: &MismatchBounds,
) -> Result<AugmentedPlant> {
    let v = if bounds.v_used { bounds.v } else { 0.0 };
    build_augmented_raw(&model.a, &model.b2, &model.c2, gains, perf, bounds.u, v)
}

pub fn build_augmented_raw(
    a: &Matrix,
    b2: &Matrix,
    c2: &Matrix,
    gains: &NominalGains,
    perf: &PerformanceChannel,
    u: f64,
    v: f64,
) -> Result<AugmentedPlant> {
    let lm = a.nrows();
    let m = b2.ncols();
    let p = c2.nrows();
    let (k, l) = (&gains.k, &gains.l);
    let ok = a.ncols() == lm
        && b2.nrows() == lm
        && c2.ncols() == lm
        && k.nrows() == m
        && k.ncols() == lm
        && l.nrows() == lm
        && l.ncols() == p
        && perf.b1.nrows() == lm
        && perf.c1.ncols() == lm
        && perf.d12.nrows() == perf.c1.nrows()
        && perf.d12.ncols() == m;
    if !ok {
        return Err(Error::Dimension("augmented plant operands".into()));
    }
    let bk = b2 * k;
    let nbk = scale(&bk, -1.0);
    let abar = block(&[
        vec![Some(&(a + &bk)), Some(&nbk)],
        vec![None, Some(&(a + l * c2))],
    ]);
    let ni = scale(&eye(lm), -1.0);
    let nl = scale(l, -1.0);
    let fbar = block(&[vec![Some(&ni), None], vec![Some(&ni), Some(&nl)]]);
    let fbar = if p == 0 { vcat(&ni, &ni) } else { fbar };
    let b1bar = vcat(&perf.b1, &perf.b1);
    let b2bar = vcat(b2, &zeros(lm, m));
    let dk = &perf.d12 * k;
    let c1bar = hcat(&(&perf.c1 + &dk), &scale(&dk, -1.0));
    let c2bar = hcat(&zeros(p, lm), &scale(c2, -1.0));
    let d21bar = hcat(&zeros(p, lm), &eye(p));
    let (u1, u2, v1) = sector_matrices(u, v, lm, m)?;
    let u2k = &u2 * k;
    let uprime = hcat(&(&u1 + &u2k), &scale(&u2k, -1.0));
    let vprime = hcat(&v1, &zeros(lm, lm));
    Ok(AugmentedPlant {
        abar,
        fbar,
        b1bar,
        b2bar,
        c1bar,
        c2bar,
        d12bar: perf.d12.clone(),
        d21bar,
        uprime,
        u2,
        vprime,
    })
}

#[derive(Serialize, Deserialize)]
pub struct GainsJson {
    #[serde(rename = "K")]
    pub k: DenseMatrix,
    #[serde(rename = "L")]
    pub l: DenseMatrix,
}

impl NominalGains {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&GainsJson {
            k: (&self.k).into(),
            l: (&self.l).into(),
        })
        .expect("gains serialize")
    }
}
