//! Noise-induced perturbation bounds on the identified matrices and the
//! sector factors consumed by the robust synthesis.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::edmd::{BasisLibrary, OutputMode};
use crate::error::{Error, Result};
use crate::linalg::{norm2, pinv, scale, vcat, zeros, Matrix};
use crate::plant::SnapshotData;

/// Golden ratio constant of the spectral-norm pseudo-inverse perturbation bound.
pub const MU: f64 = 1.618_033_988_749_895;

pub const DEFAULT_CONFIDENCE: f64 = 0.997;

/// Radius of the ball that holds an n-dimensional N(0, sigma^2 I) vector with
/// the given probability.
pub fn gaussian_radius(sigma: f64, n: usize, confidence: f64) -> Result<f64> {
    if !(sigma >= 0.0) {
        return Err(Error::Domain(format!(
            "noise level must be nonnegative, got {sigma}"
        )));
    }
    if !(confidence > 0.0 && confidence < 1.0) {
        return Err(Error::Domain(format!(
            "confidence must lie in (0,1), got {confidence}"
        )));
    }
    if sigma == 0.0 || n == 0 {
        return Ok(0.0);
    }
    let chi2 = ChiSquared::new(n as f64).map_err(|e| Error::Domain(e.to_string()))?;
    Ok(sigma * chi2.inverse_cdf(confidence).sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregate {
    /// sqrt(N) times the largest column bound.
    #[default]
    Spectral,
    /// Frobenius aggregate of the per-column bounds.
    Frobenius,
}

/// Bound on the spectral norm of the lifted noise matrix whose k-th column is
/// J(x_k) n_k.
pub fn lifted_noise_norm(
    basis: &BasisLibrary,
    x: &Matrix,
    sigma: f64,
    confidence: f64,
) -> Result<f64> {
    lifted_noise_norm_with(basis, x, sigma, confidence, Aggregate::Spectral)
}

pub fn lifted_noise_norm_with(
    basis: &BasisLibrary,
    x: &Matrix,
    sigma: f64,
    confidence: f64,
    agg: Aggregate,
) -> Result<f64> {
    let n = basis.state_dim();
    if x.nrows() != n {
        return Err(Error::Dimension(
            "state matrix rows differ from basis state dimension".into(),
        ));
    }
    let r = gaussian_radius(sigma, n, confidence)?;
    if r == 0.0 {
        return Ok(0.0);
    }
    let mut col = vec![0.0; n];
    let mut jmax: f64 = 0.0;
    let mut jsq = 0.0;
    for k in 0..x.ncols() {
        for (i, c) in col.iter_mut().enumerate() {
            *c = x[(i, k)];
        }
        let j = norm2(&basis.jacobian(&col)?)?;
        jmax = jmax.max(j);
        jsq += j * j;
    }
    Ok(match agg {
        Aggregate::Spectral => (x.ncols() as f64).sqrt() * jmax * r,
        Aggregate::Frobenius => jsq.sqrt() * r,
    })
}

pub fn pinv_perturbation_bound(pinv_s_norm: f64, pinv_t_norm: f64, e_norm: f64) -> f64 {
    MU * pinv_s_norm.powi(2).max(pinv_t_norm.powi(2)) * e_norm
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct MismatchBounds {
    pub sigma: f64,
    pub confidence: f64,
    #[serde(rename = "E1_norm")]
    pub e1_norm: f64,
    #[serde(rename = "E2_norm")]
    pub e2_norm: f64,
    #[serde(rename = "M_norm")]
    pub m_norm: f64,
    #[serde(rename = "T_pinv_norm")]
    pub t_pinv_norm: f64,
    pub pinv_perturbation: f64,
    #[serde(rename = "U")]
    pub u: f64,
    #[serde(rename = "V")]
    pub v: f64,
    pub second_order_correction: f64,
    pub mu: f64,
    /// False when outputs are exact lifted states and V does not enter the design.
    pub v_used: bool,
}

#[derive(Clone, Copy, Debug)]
pub struct BoundOptions {
    pub confidence: f64,
    pub pinv_tol: f64,
    pub aggregate: Aggregate,
}

impl Default for BoundOptions {
    fn default() -> Self {
        BoundOptions {
            confidence: DEFAULT_CONFIDENCE,
            pinv_tol: crate::edmd::DEFAULT_PINV_TOL,
            aggregate: Aggregate::Spectral,
        }
    }
}

/// U from the noisy snapshot data: |E2| |T^+| + |X2_true| |O(E1)|, with the
/// true lifted matrix norm bounded by |X2_hat| + |E2|. V analogously for the
/// output map with output noise `sigma_y`.
pub fn mismatch_bounds(
    data: &SnapshotData,
    basis: &BasisLibrary,
    sigma: f64,
    sigma_y: f64,
    mode: OutputMode,
    opts: BoundOptions,
) -> Result<MismatchBounds> {
    let l1 = basis.lift_columns(&data.x1)?;
    let l2 = basis.lift_columns(&data.x2)?;
    let tm = vcat(&l1, &data.u);
    let tp = pinv(&tm, opts.pinv_tol)?;
    let t_pinv_norm = norm2(&tp)?;
    if t_pinv_norm == 0.0 {
        return Err(Error::RankDeficient(
            "every singular value of [X1_lift; U] truncated".into(),
        ));
    }
    let e1 = lifted_noise_norm_with(basis, &data.x1, sigma, opts.confidence, opts.aggregate)?;
    let e2 = lifted_noise_norm_with(basis, &data.x2, sigma, opts.confidence, opts.aggregate)?;
    // The true regressor is unknown, so its pseudo-inverse norm is taken equal to the noisy one.
    let o_e1 = pinv_perturbation_bound(t_pinv_norm, t_pinv_norm, e1);
    let x2_norm = norm2(&l2)?;
    let u = e2 * t_pinv_norm + (x2_norm + e2) * o_e1;
    let second = e2 * o_e1;

    let p = data.y.nrows();
    let m_norm = (data.len() as f64).sqrt() * gaussian_radius(sigma_y, p, opts.confidence)?;
    let l1p = pinv(&l1, opts.pinv_tol)?;
    let l1p_norm = norm2(&l1p)?;
    let o_c = pinv_perturbation_bound(l1p_norm, l1p_norm, e1);
    let y_norm = norm2(&data.y)?;
    let v = m_norm * l1p_norm + (y_norm + m_norm) * o_c;

    Ok(MismatchBounds {
        sigma,
        confidence: opts.confidence,
        e1_norm: e1,
        e2_norm: e2,
        m_norm,
        t_pinv_norm,
        pinv_perturbation: o_e1,
        u,
        v,
        second_order_correction: second,
        mu: MU,
        v_used: mode == OutputMode::Fitted,
    })
}

/// Scaled-identity factorization: [U1 U2] = U I_{M+m}, V1 = V I_M.
pub fn sector_matrices(u: f64, v: f64, lm: usize, m: usize) -> Result<(Matrix, Matrix, Matrix)> {
    if !(u >= 0.0 && v >= 0.0) {
        return Err(Error::Domain("sector bounds must be nonnegative".into()));
    }
    let mut u1 = zeros(lm + m, lm);
    let mut u2 = zeros(lm + m, m);
    for i in 0..lm {
        u1[(i, i)] = u;
    }
    for i in 0..m {
        u2[(lm + i, i)] = u;
    }
    let v1 = scale(&crate::linalg::eye(lm), v);
    Ok((u1, u2, v1))
}
