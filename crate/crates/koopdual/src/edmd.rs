//! Observable dictionaries, lifting and least-squares identification of the
//! lifted linear model.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, eye, frob, matvec, pinv_rank, sub, vcat, zeros, DenseMatrix, Matrix};
use crate::plant::SnapshotData;

pub const DEFAULT_PINV_TOL: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum BasisLibrary {
    /// All monomials of total degree <= `degree`.
    Monomial { state_dim: usize, degree: usize },
    /// Coordinates, Gaussian bumps exp(-|x-c|^2 / width^2), then a constant.
    RadialBasis {
        state_dim: usize,
        centers: Vec<Vec<f64>>,
        width: f64,
    },
    /// Coordinates only, no constant.
    Identity { state_dim: usize },
}

/// Exponent tuples of total degree `d` over `n` variables, first-variable power descending.
fn exponents_of_degree(n: usize, d: usize) -> Vec<Vec<usize>> {
    if n == 1 {
        return vec![vec![d]];
    }
    let mut out = Vec::new();
    for first in (0..=d).rev() {
        for mut rest in exponents_of_degree(n - 1, d - first) {
            rest.insert(0, first);
            out.push(rest);
        }
    }
    out
}

/// Monomial exponents in the fixed order: coordinates, degrees 2..=d graded
/// lexicographically, constant last.
pub fn monomial_exponents(n: usize, degree: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    if degree >= 1 {
        out.extend(exponents_of_degree(n, 1));
    }
    for d in 2..=degree {
        out.extend(exponents_of_degree(n, d));
    }
    out.push(vec![0; n]);
    out
}

fn powi(x: f64, k: usize) -> f64 {
    x.powi(k as i32)
}

impl BasisLibrary {
    pub fn monomial(state_dim: usize, degree: usize) -> Self {
        BasisLibrary::Monomial { state_dim, degree }
    }

    pub fn state_dim(&self) -> usize {
        match self {
            BasisLibrary::Monomial { state_dim, .. }
            | BasisLibrary::RadialBasis { state_dim, .. }
            | BasisLibrary::Identity { state_dim } => *state_dim,
        }
    }

    pub fn lifted_dim(&self) -> usize {
        match self {
            BasisLibrary::Monomial { state_dim, degree } => {
                monomial_exponents(*state_dim, *degree).len()
            }
            BasisLibrary::RadialBasis {
                state_dim, centers, ..
            } => state_dim + centers.len() + 1,
            BasisLibrary::Identity { state_dim } => *state_dim,
        }
    }

    /// Index of the constant observable, if the dictionary has one.
    pub fn constant_index(&self) -> Option<usize> {
        match self {
            BasisLibrary::Identity { .. } => None,
            BasisLibrary::Monomial { degree: 0, .. } => Some(0),
            _ => Some(self.lifted_dim() - 1),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            BasisLibrary::Monomial { state_dim, .. } | BasisLibrary::Identity { state_dim }
                if *state_dim == 0 =>
            {
                Err(Error::Domain("basis over zero states".into()))
            }
            BasisLibrary::RadialBasis {
                state_dim,
                centers,
                width,
            } => {
                if *width <= 0.0 {
                    return Err(Error::Domain("rbf width must be positive".into()));
                }
                if centers.iter().any(|c| c.len() != *state_dim) {
                    return Err(Error::Dimension("rbf center dimension".into()));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    fn check(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.state_dim() {
            return Err(Error::Dimension(format!(
                "state has {} entries, basis expects {}",
                x.len(),
                self.state_dim()
            )));
        }
        Ok(())
    }

    pub fn lift(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check(x)?;
        Ok(match self {
            BasisLibrary::Monomial { state_dim, degree } => monomial_exponents(*state_dim, *degree)
                .iter()
                .map(|e| e.iter().zip(x).map(|(&k, &xi)| powi(xi, k)).product())
                .collect(),
            BasisLibrary::RadialBasis { centers, width, .. } => {
                let mut v = x.to_vec();
                for c in centers {
                    let r2: f64 = c.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
                    v.push((-r2 / (width * width)).exp());
                }
                v.push(1.0);
                v
            }
            BasisLibrary::Identity { .. } => x.to_vec(),
        })
    }

    /// Analytic Jacobian, lifted_dim x state_dim.
    pub fn jacobian(&self, x: &[f64]) -> Result<Matrix> {
        self.check(x)?;
        let n = self.state_dim();
        Ok(match self {
            BasisLibrary::Monomial { degree, .. } => {
                let ex = monomial_exponents(n, *degree);
                let mut j = zeros(ex.len(), n);
                for (r, e) in ex.iter().enumerate() {
                    for c in 0..n {
                        if e[c] == 0 {
                            continue;
                        }
                        let mut v = e[c] as f64 * powi(x[c], e[c] - 1);
                        for (k, &ek) in e.iter().enumerate() {
                            if k != c {
                                v *= powi(x[k], ek);
                            }
                        }
                        j[(r, c)] = v;
                    }
                }
                j
            }
            BasisLibrary::RadialBasis { centers, width, .. } => {
                let mut j = zeros(n + centers.len() + 1, n);
                for i in 0..n {
                    j[(i, i)] = 1.0;
                }
                let w2 = width * width;
                for (r, c) in centers.iter().enumerate() {
                    let r2: f64 = c.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
                    let g = (-r2 / w2).exp();
                    for k in 0..n {
                        j[(n + r, k)] = -2.0 * (x[k] - c[k]) / w2 * g;
                    }
                }
                j
            }
            BasisLibrary::Identity { .. } => eye(n),
        })
    }

    /// Lift every column of a state matrix.
    pub fn lift_columns(&self, x: &Matrix) -> Result<Matrix> {
        let m = self.lifted_dim();
        let mut out = zeros(m, x.ncols());
        let mut col = vec![0.0; x.nrows()];
        for k in 0..x.ncols() {
            for (i, c) in col.iter_mut().enumerate() {
                *c = x[(i, k)];
            }
            let z = self.lift(&col)?;
            for i in 0..m {
                out[(i, k)] = z[i];
            }
        }
        Ok(out)
    }
}

pub fn pseudo_inverse(m: &Matrix, tol: f64) -> Result<Matrix> {
    linalg::pinv(m, tol)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum OutputMode {
    /// Outputs are the lifted states themselves, C2 = I.
    #[default]
    LiftedState,
    /// C2 regressed from the measured outputs.
    Fitted,
}

#[derive(Clone, Debug, PartialEq)]
pub struct KoopmanModel {
    pub a: Matrix,
    pub b2: Matrix,
    pub c2: Matrix,
    pub basis: BasisLibrary,
    pub dt: f64,
}

#[derive(Clone, Debug)]
pub struct FitReport {
    pub residual_ab: f64,
    pub residual_c: f64,
    pub rank: usize,
    pub rank_deficient: bool,
}

#[derive(Clone, Debug)]
pub struct FitResult {
    pub model: KoopmanModel,
    pub report: FitReport,
}

/// Least-squares fit [A, B2] = X2_lift [X1_lift; U]^+ and the output map.
pub fn edmd_fit(
    data: &SnapshotData,
    basis: &BasisLibrary,
    mode: OutputMode,
    tol: f64,
) -> Result<FitResult> {
    basis.validate()?;
    let n = data.len();
    let m = data.u.nrows();
    let lm = basis.lifted_dim();
    if n == 0 {
        return Err(Error::EmptyData);
    }
    if n < lm + m {
        return Err(Error::Domain(format!(
            "need at least {} snapshots, got {n}",
            lm + m
        )));
    }
    let l1 = basis.lift_columns(&data.x1)?;
    let l2 = basis.lift_columns(&data.x2)?;
    let tm = vcat(&l1, &data.u);
    let (tp, rank) = pinv_rank(&tm, tol)?;
    let ab = &l2 * &tp;
    let a = sub(&ab, 0, 0, lm, lm);
    let b2 = sub(&ab, 0, lm, lm, m);
    let residual_ab = frob(&(&l2 - &ab * &tm));
    let (c2, residual_c) = match mode {
        OutputMode::LiftedState => (eye(lm), 0.0),
        OutputMode::Fitted => {
            let c2 = &data.y * &linalg::pinv(&l1, tol)?;
            let r = frob(&(&data.y - &c2 * &l1));
            (c2, r)
        }
    };
    Ok(FitResult {
        model: KoopmanModel {
            a,
            b2,
            c2,
            basis: basis.clone(),
            dt: data.dt,
        },
        report: FitReport {
            residual_ab,
            residual_c,
            rank,
            rank_deficient: rank < lm + m,
        },
    })
}

#[derive(Clone, Debug)]
pub struct Prediction {
    pub states: Vec<Vec<f64>>,
    pub outputs: Vec<Vec<f64>>,
    pub lifted: Vec<Vec<f64>>,
}

/// Lift once, iterate the linear model, read the state back from the coordinate block.
pub fn koopman_predict(model: &KoopmanModel, x0: &[f64], u_seq: &[Vec<f64>]) -> Result<Prediction> {
    let n = model.basis.state_dim();
    let m = model.b2.ncols();
    let mut z = model.basis.lift(x0)?;
    let mut out = Prediction {
        states: vec![],
        outputs: vec![],
        lifted: vec![],
    };
    let push = |z: &Vec<f64>, out: &mut Prediction| {
        out.states.push(z[..n].to_vec());
        out.outputs.push(matvec(&model.c2, z));
        out.lifted.push(z.clone());
    };
    push(&z, &mut out);
    for u in u_seq {
        if u.len() != m {
            return Err(Error::Dimension(format!(
                "input has {} entries, model expects {m}",
                u.len()
            )));
        }
        let az = matvec(&model.a, &z);
        let bu = matvec(&model.b2, u);
        z = az.iter().zip(&bu).map(|(a, b)| a + b).collect();
        push(&z, &mut out);
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct ModelJson {
    basis: BasisLibrary,
    dt: f64,
    #[serde(rename = "A")]
    a: DenseMatrix,
    #[serde(rename = "B2")]
    b2: DenseMatrix,
    #[serde(rename = "C2")]
    c2: DenseMatrix,
}

impl KoopmanModel {
    pub fn to_json(&self) -> String {
        let j = ModelJson {
            basis: self.basis.clone(),
            dt: self.dt,
            a: (&self.a).into(),
            b2: (&self.b2).into(),
            c2: (&self.c2).into(),
        };
        serde_json::to_string_pretty(&j).expect("model serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let j: ModelJson = serde_json::from_str(s).map_err(|e| Error::Parse(e.to_string()))?;
        let model = KoopmanModel {
            a: j.a.to_matrix()?,
            b2: j.b2.to_matrix()?,
            c2: j.c2.to_matrix()?,
            basis: j.basis,
            dt: j.dt,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        let lm = self.basis.lifted_dim();
        if self.a.nrows() != lm
            || self.a.ncols() != lm
            || self.b2.nrows() != lm
            || self.c2.ncols() != lm
        {
            return Err(Error::Dimension(
                "model matrices disagree with basis".into(),
            ));
        }
        if ![&self.a, &self.b2, &self.c2]
            .iter()
            .all(|m| linalg::is_finite(m))
        {
            return Err(Error::Domain("non-finite model entries".into()));
        }
        Ok(())
    }
}
