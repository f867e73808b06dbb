//! Block-structured LMI problems and a primal-dual interior-point solver.
//!
//! A problem is a list of matrix variables and a list of block constraints
//! F_k(y) = F0_k + sum_terms (L V R + (L V R)') <= -margin_k I, where each term
//! lives in one block position (i, j) of its constraint. The solver maximizes
//! b'y over these constraints (dual form), with the HKM search direction and a
//! Mehrotra corrector. The Schur complement is assembled directly from the
//! term structure so variables never have to be expanded into basis matrices.

use faer::{Mat, MatRef, Side};

use crate::error::{Error, Result};
use crate::linalg::{sym, Matrix};

#[derive(Clone, Debug)]
pub struct VarSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub symmetric: bool,
}

impl VarSpec {
    pub fn len(&self) -> usize {
        if self.symmetric {
            self.rows * (self.rows + 1) / 2
        } else {
            self.rows * self.cols
        }
    }
}

#[derive(Clone, Debug)]
struct Term {
    var: usize,
    bi: usize,
    bj: usize,
    /// n_bi x rows; `None` is the identity.
    left: Option<Matrix>,
    /// cols x n_bj; `None` is the identity.
    right: Option<Matrix>,
}

#[derive(Clone, Debug)]
pub struct Constraint {
    sizes: Vec<usize>,
    offsets: Vec<usize>,
    f0: Matrix,
    margin: f64,
    terms: Vec<Term>,
    /// (scalar variable, coefficient): adds coef * v * I over the whole constraint.
    id_terms: Vec<(usize, f64)>,
}

impl Constraint {
    pub fn dim(&self) -> usize {
        *self.offsets.last().unwrap()
    }
    pub fn margin(&self) -> f64 {
        self.margin
    }
    pub fn block_sizes(&self) -> &[usize] {
        &self.sizes
    }
}

#[derive(Clone, Debug, Default)]
pub struct LmiProblem {
    vars: Vec<VarSpec>,
    cons: Vec<Constraint>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct VarId(pub usize);

fn lt_mul(l: &Option<Matrix>, m: MatRef<'_, f64>) -> Matrix {
    match l {
        None => m.to_owned(),
        Some(l) => l.transpose() * m,
    }
}

fn r_mul(r: &Option<Matrix>, m: MatRef<'_, f64>) -> Matrix {
    match r {
        None => m.to_owned(),
        Some(r) => r * m,
    }
}

fn mul_l(m: MatRef<'_, f64>, l: &Option<Matrix>) -> Matrix {
    match l {
        None => m.to_owned(),
        Some(l) => m * l,
    }
}

fn mul_rt(m: MatRef<'_, f64>, r: &Option<Matrix>) -> Matrix {
    match r {
        None => m.to_owned(),
        Some(r) => m * r.transpose(),
    }
}

impl LmiProblem {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_var(&mut self, name: &str, rows: usize, cols: usize, symmetric: bool) -> VarId {
        assert!(
            !symmetric || rows == cols,
            "symmetric variable must be square"
        );
        self.vars.push(VarSpec {
            name: name.to_string(),
            rows,
            cols,
            symmetric,
        });
        VarId(self.vars.len() - 1)
    }

    /// New constraint F(y) <= -margin I with the given diagonal block sizes.
    pub fn add_constraint(&mut self, sizes: &[usize], margin: f64) -> usize {
        let mut offsets = vec![0];
        for s in sizes {
            offsets.push(offsets.last().unwrap() + s);
        }
        let n = *offsets.last().unwrap();
        self.cons.push(Constraint {
            sizes: sizes.to_vec(),
            offsets,
            f0: Mat::zeros(n, n),
            margin,
            terms: vec![],
            id_terms: vec![],
        });
        self.cons.len() - 1
    }

    /// Adds `left * V * right` at block (i, j) and its transpose at (j, i).
    /// On a diagonal block both copies land in the same place.
    pub fn add_term(
        &mut self,
        k: usize,
        i: usize,
        j: usize,
        left: Option<Matrix>,
        v: VarId,
        right: Option<Matrix>,
    ) {
        let spec = &self.vars[v.0];
        let c = &self.cons[k];
        let (ni, nj) = (c.sizes[i], c.sizes[j]);
        match &left {
            Some(l) => assert!(
                l.nrows() == ni && l.ncols() == spec.rows,
                "left factor shape for {}",
                spec.name
            ),
            None => assert_eq!(ni, spec.rows, "identity left factor for {}", spec.name),
        }
        match &right {
            Some(r) => assert!(
                r.nrows() == spec.cols && r.ncols() == nj,
                "right factor shape for {}",
                spec.name
            ),
            None => assert_eq!(nj, spec.cols, "identity right factor for {}", spec.name),
        }
        self.cons[k].terms.push(Term {
            var: v.0,
            bi: i,
            bj: j,
            left,
            right,
        });
    }

    /// Adds `coef * V` on the diagonal block i for a symmetric (or scalar) V.
    pub fn add_diag_var(&mut self, k: usize, i: usize, coef: f64, v: VarId) {
        let n = self.vars[v.0].rows;
        self.add_term(
            k,
            i,
            i,
            Some(crate::linalg::scaled_eye(n, 0.5 * coef)),
            v,
            None,
        );
    }

    /// Adds `coef * t * I` across the whole constraint for a scalar variable t.
    pub fn add_identity_term(&mut self, k: usize, coef: f64, v: VarId) {
        let spec = &self.vars[v.0];
        assert!(
            spec.rows == 1 && spec.cols == 1,
            "identity term needs a scalar variable"
        );
        self.cons[k].id_terms.push((v.0, coef));
    }

    /// Adds constant `m` at block (i, j) and `m'` at (j, i).
    pub fn add_const(&mut self, k: usize, i: usize, j: usize, m: &Matrix) {
        let c = &mut self.cons[k];
        let (oi, oj) = (c.offsets[i], c.offsets[j]);
        assert!(
            m.nrows() == c.sizes[i] && m.ncols() == c.sizes[j],
            "constant block shape"
        );
        for r in 0..m.nrows() {
            for s in 0..m.ncols() {
                c.f0[(oi + r, oj + s)] += m[(r, s)];
                if i != j {
                    c.f0[(oj + s, oi + r)] += m[(r, s)];
                }
            }
        }
    }

    pub fn vars(&self) -> &[VarSpec] {
        &self.vars
    }

    pub fn constraints(&self) -> &[Constraint] {
        &self.cons
    }

    pub fn var_offset(&self, v: VarId) -> usize {
        self.vars[..v.0].iter().map(|s| s.len()).sum()
    }

    pub fn dim(&self) -> usize {
        self.vars.iter().map(|s| s.len()).sum()
    }

    /// Maps each full (row, col) entry of a variable to its global parameter index.
    fn index_map(&self, v: usize) -> Vec<usize> {
        let spec = &self.vars[v];
        let base = self.var_offset(VarId(v));
        let (r, c) = (spec.rows, spec.cols);
        let mut out = Vec::with_capacity(r * c);
        for a in 0..r {
            for b in 0..c {
                out.push(if spec.symmetric {
                    let (i, j) = if a <= b { (a, b) } else { (b, a) };
                    base + i * r - i * i.saturating_sub(1) / 2 + (j - i)
                } else {
                    base + a * c + b
                });
            }
        }
        out
    }

    pub fn unpack(&self, y: &[f64], v: VarId) -> Matrix {
        let spec = &self.vars[v.0];
        let map = self.index_map(v.0);
        Mat::from_fn(spec.rows, spec.cols, |a, b| y[map[a * spec.cols + b]])
    }

    pub fn pack(&self, v: VarId, m: &Matrix, y: &mut [f64]) {
        let spec = &self.vars[v.0];
        let map = self.index_map(v.0);
        for a in 0..spec.rows {
            for b in 0..spec.cols {
                if !spec.symmetric || a <= b {
                    y[map[a * spec.cols + b]] = m[(a, b)];
                }
            }
        }
    }

    fn term_value(&self, t: &Term, y: &[f64]) -> Matrix {
        let v = self.unpack(y, VarId(t.var));
        let lv = match &t.left {
            None => v,
            Some(l) => l * &v,
        };
        mul_r_owned(lv, &t.right)
    }

    /// F_k(y) - F0_k for each constraint.
    pub fn linear_part(&self, y: &[f64]) -> Vec<Matrix> {
        self.cons
            .iter()
            .map(|c| {
                let n = c.dim();
                let mut out = Mat::zeros(n, n);
                for t in &c.terms {
                    let p = self.term_value(t, y);
                    let (oi, oj) = (c.offsets[t.bi], c.offsets[t.bj]);
                    for r in 0..p.nrows() {
                        for s in 0..p.ncols() {
                            out[(oi + r, oj + s)] += p[(r, s)];
                            out[(oj + s, oi + r)] += p[(r, s)];
                        }
                    }
                }
                for &(v, coef) in &c.id_terms {
                    let val = coef * y[self.var_offset(VarId(v))];
                    for i in 0..n {
                        out[(i, i)] += val;
                    }
                }
                out
            })
            .collect()
    }

    /// F_k(y) for each constraint.
    pub fn evaluate(&self, y: &[f64]) -> Vec<Matrix> {
        self.linear_part(y)
            .into_iter()
            .zip(&self.cons)
            .map(|(l, c)| l + &c.f0)
            .collect()
    }

    /// Adjoint of the linear part applied to symmetric matrices.
    pub fn adjoint(&self, ms: &[Matrix]) -> Vec<f64> {
        let mut g = vec![0.0; self.dim()];
        for (c, mk) in self.cons.iter().zip(ms) {
            self.adjoint_terms(c, mk, &mut g);
            for &(v, coef) in &c.id_terms {
                g[self.var_offset(VarId(v))] += coef * mk.diagonal().column_vector().sum();
            }
        }
        g
    }

    fn adjoint_terms(&self, c: &Constraint, mk: &Matrix, g: &mut [f64]) {
        for t in &c.terms {
            let (oi, oj) = (c.offsets[t.bi], c.offsets[t.bj]);
            let blk = mk.as_ref().submatrix(oi, oj, c.sizes[t.bi], c.sizes[t.bj]);
            let gm = mul_rt(lt_mul(&t.left, blk).as_ref(), &t.right);
            let spec = &self.vars[t.var];
            let map = self.index_map(t.var);
            for a in 0..spec.rows {
                for b in 0..spec.cols {
                    g[map[a * spec.cols + b]] += 2.0 * gm[(a, b)];
                }
            }
        }
    }

    /// H_ij = sum_k tr(A_i X_k A_j Z_k), dense row-major m x m.
    pub fn schur(&self, xs: &[Matrix], zs: &[Matrix]) -> Vec<f64> {
        let m = self.dim();
        let mut h = vec![0.0; m * m];
        let maps: Vec<Vec<usize>> = (0..self.vars.len()).map(|v| self.index_map(v)).collect();
        let mut row = Vec::new();
        let owner: Vec<usize> = {
            let mut o = vec![0; m];
            for (v, s) in self.vars.iter().enumerate() {
                let off = self.var_offset(VarId(v));
                for e in o.iter_mut().skip(off).take(s.len()) {
                    *e = v;
                }
            }
            o
        };
        // symmetric contribution at (i, j), compatible with the mirroring below
        let add_sym = |h: &mut [f64], i: usize, j: usize, val: f64| {
            if i == j {
                h[i * m + i] += val;
            } else if owner[i] == owner[j] {
                h[i * m + j] += val;
                h[j * m + i] += val;
            } else {
                let (a, b) = if i < j { (i, j) } else { (j, i) };
                h[a * m + b] += val;
            }
        };
        for ((c, x), z) in self.cons.iter().zip(xs).zip(zs) {
            let pre: Vec<[Matrix; 4]> = c
                .terms
                .iter()
                .map(|t| {
                    let (oi, oj) = (c.offsets[t.bi], c.offsets[t.bj]);
                    let (ni, nj) = (c.sizes[t.bi], c.sizes[t.bj]);
                    let n = c.dim();
                    let xi = x.as_ref().submatrix(0, oi, n, ni);
                    let xj = x.as_ref().submatrix(0, oj, n, nj);
                    let zi = z.as_ref().submatrix(0, oi, n, ni);
                    let zj = z.as_ref().submatrix(0, oj, n, nj);
                    [
                        mul_l(xi, &t.left),
                        mul_rt(xj, &t.right),
                        mul_l(zi, &t.left),
                        mul_rt(zj, &t.right),
                    ]
                })
                .collect();
            for (ti, t) in c.terms.iter().enumerate() {
                for (ri, rr) in c.terms.iter().enumerate() {
                    if t.var > rr.var {
                        continue;
                    }
                    let (st, sr) = (&self.vars[t.var], &self.vars[rr.var]);
                    let (r1, c1, r2, c2) = (st.rows, st.cols, sr.rows, sr.cols);
                    let (oti, otj) = (c.offsets[t.bi], c.offsets[t.bj]);
                    let (nti, ntj) = (c.sizes[t.bi], c.sizes[t.bj]);
                    let (ori, orj) = (c.offsets[rr.bi], c.offsets[rr.bj]);
                    let (nri, nrj) = (c.sizes[rr.bi], c.sizes[rr.bj]);
                    let [xl_r, xr_r, _, _] = &pre[ri];
                    let [_, _, zl_t, zr_t] = &pre[ti];
                    let g1 = r_mul(&t.right, xl_r.as_ref().submatrix(otj, 0, ntj, r2));
                    let g3 = r_mul(&t.right, xr_r.as_ref().submatrix(otj, 0, ntj, c2));
                    let g5 = lt_mul(&t.left, xl_r.as_ref().submatrix(oti, 0, nti, r2));
                    let g7 = lt_mul(&t.left, xr_r.as_ref().submatrix(oti, 0, nti, c2));
                    let g2 = r_mul(&rr.right, zl_t.as_ref().submatrix(orj, 0, nrj, r1));
                    let g4 = lt_mul(&rr.left, zl_t.as_ref().submatrix(ori, 0, nri, r1));
                    let g6 = r_mul(&rr.right, zr_t.as_ref().submatrix(orj, 0, nrj, c1));
                    let g8 = lt_mul(&rr.left, zr_t.as_ref().submatrix(ori, 0, nri, c1));
                    // row-major scratch so the innermost loop runs over d
                    let g2t = row_major_t(&g2); // r1 x c2 : g2t[a][d] = G2[d,a]
                    let g3r = row_major(&g3); // c1 x c2
                    let g6t = row_major_t(&g6); // c1 x c2 : g6t[b][d] = G6[d,b]
                    let g7r = row_major(&g7); // r1 x c2
                    let (mv, mw) = (&maps[t.var], &maps[rr.var]);
                    row.resize(r2 * c2, 0.0);
                    for a in 0..r1 {
                        let g2a = &g2t[a * c2..(a + 1) * c2];
                        let g7a = &g7r[a * c2..(a + 1) * c2];
                        for b in 0..c1 {
                            let g3b = &g3r[b * c2..(b + 1) * c2];
                            let g6b = &g6t[b * c2..(b + 1) * c2];
                            for cc in 0..r2 {
                                let s1 = g1[(b, cc)];
                                let s2 = g4[(cc, a)];
                                let s3 = g5[(a, cc)];
                                let s4 = g8[(cc, b)];
                                let dst = &mut row[cc * c2..(cc + 1) * c2];
                                for d in 0..c2 {
                                    dst[d] = s1 * g2a[d] + s2 * g3b[d] + s3 * g6b[d] + s4 * g7a[d];
                                }
                            }
                            let hr = &mut h[mv[a * c1 + b] * m..(mv[a * c1 + b] + 1) * m];
                            for (q, &val) in row.iter().enumerate() {
                                hr[mw[q]] += val;
                            }
                        }
                    }
                }
            }
            if !c.id_terms.is_empty() {
                // tr(I X A_j Z) = <A_j, sym(Z X)>
                let w = sym(&(z * x));
                let xz: f64 = (0..x.nrows())
                    .map(|i| (0..x.ncols()).map(|j| x[(i, j)] * z[(j, i)]).sum::<f64>())
                    .sum();
                let mut g = vec![0.0; m];
                self.adjoint_terms(c, &w, &mut g);
                for &(tv, coef) in &c.id_terms {
                    let ti = self.var_offset(VarId(tv));
                    for (j, &gj) in g.iter().enumerate() {
                        if gj != 0.0 {
                            add_sym(&mut h, ti, j, if j == ti { 2.0 } else { 1.0 } * coef * gj);
                        }
                    }
                    for &(tv2, coef2) in &c.id_terms {
                        let tj = self.var_offset(VarId(tv2));
                        if ti <= tj {
                            add_sym(&mut h, ti, tj, coef * coef2 * xz);
                        }
                    }
                }
            }
        }
        // mirror: blocks were only formed for var(row) <= var(col)
        for i in 0..m {
            for j in (i + 1)..m {
                if owner[i] == owner[j] {
                    let s = 0.5 * (h[i * m + j] + h[j * m + i]);
                    h[i * m + j] = s;
                    h[j * m + i] = s;
                } else {
                    h[j * m + i] = h[i * m + j];
                }
            }
        }
        h
    }
}

fn mul_r_owned(m: Matrix, r: &Option<Matrix>) -> Matrix {
    match r {
        None => m,
        Some(r) => &m * r,
    }
}

fn row_major(a: &Matrix) -> Vec<f64> {
    let mut out = Vec::with_capacity(a.nrows() * a.ncols());
    for i in 0..a.nrows() {
        for j in 0..a.ncols() {
            out.push(a[(i, j)]);
        }
    }
    out
}

fn row_major_t(a: &Matrix) -> Vec<f64> {
    let mut out = Vec::with_capacity(a.nrows() * a.ncols());
    for j in 0..a.ncols() {
        for i in 0..a.nrows() {
            out.push(a[(i, j)]);
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SdpStatus {
    /// Converged to the requested tolerances.
    Optimal,
    /// Stopped early: the dual iterate reached the requested objective target.
    TargetReached,
    /// Stopped early: a primal certificate shows the target is unreachable.
    TargetUnreachable,
    /// Iteration limit or numerical breakdown; the best dual iterate is returned.
    Stalled,
}

#[derive(Clone, Debug)]
pub struct SdpOptions {
    pub max_iter: usize,
    pub tol: f64,
    /// Stop as soon as a dual-feasible iterate has b'y >= target.
    pub dual_target: Option<f64>,
    pub verbose: bool,
}

impl Default for SdpOptions {
    fn default() -> Self {
        SdpOptions {
            max_iter: 80,
            tol: 1e-8,
            dual_target: None,
            verbose: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SdpSolution {
    pub y: Vec<f64>,
    pub status: SdpStatus,
    pub primal_obj: f64,
    pub dual_obj: f64,
    pub iterations: usize,
    pub primal_infeas: f64,
    pub dual_infeas: f64,
}

fn dot(a: &Matrix, b: &Matrix) -> f64 {
    let mut s = 0.0;
    for j in 0..a.ncols() {
        for i in 0..a.nrows() {
            s += a[(i, j)] * b[(i, j)];
        }
    }
    s
}

fn spd_inverse(s: &Matrix) -> Option<Matrix> {
    use faer::linalg::solvers::DenseSolveCore;
    let llt = s.llt(Side::Lower).ok()?;
    Some(sym(&llt.inverse()))
}

/// Largest step a with M + a dM still positive semidefinite.
fn max_step(m: &Matrix, dm: &Matrix) -> f64 {
    let Ok(llt) = m.llt(Side::Lower) else {
        return 0.0;
    };
    let l = llt.L();
    // L^{-1} dM L^{-T}
    let mut half = dm.clone();
    l.solve_lower_triangular_in_place(half.as_mut());
    let mut inner = half.transpose().to_owned();
    l.solve_lower_triangular_in_place(inner.as_mut());
    match crate::linalg::min_eig(&inner) {
        Ok(e) if e < 0.0 => -1.0 / e,
        Ok(_) => f64::INFINITY,
        Err(_) => 0.0,
    }
}

fn vnorm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Maximize b'y subject to F_k(y) <= -margin_k I for every constraint.
pub fn solve(p: &LmiProblem, b: &[f64], opts: &SdpOptions) -> Result<SdpSolution> {
    let m = p.dim();
    if b.len() != m {
        return Err(Error::Dimension(format!(
            "objective has {} entries, problem has {m}",
            b.len()
        )));
    }
    let cons = p.constraints();
    let cs: Vec<Matrix> = cons
        .iter()
        .map(|c| -&c.f0 - crate::linalg::scaled_eye(c.dim(), c.margin))
        .collect();
    let nt: usize = cons.iter().map(|c| c.dim()).sum();
    let cnorm = cs.iter().map(|c| c.norm_l2()).fold(0.0, f64::max);
    let cnorm_sum: f64 = cs.iter().map(|c| c.norm_l2()).sum();
    let bnorm = vnorm(b);
    let xi = 10f64.max((nt as f64).sqrt());
    let eta = 10f64.max((nt as f64).sqrt()).max(cnorm);
    let mut x: Vec<Matrix> = cons
        .iter()
        .map(|c| crate::linalg::scaled_eye(c.dim(), xi))
        .collect();
    let mut s: Vec<Matrix> = cons
        .iter()
        .map(|c| crate::linalg::scaled_eye(c.dim(), eta))
        .collect();
    let mut y = vec![0.0; m];
    let mut best: Option<(Vec<f64>, f64)> = None;
    let mut status = SdpStatus::Stalled;
    let (mut pobj, mut dobj, mut pinf, mut dinf) = (f64::NAN, f64::NAN, f64::NAN, f64::NAN);
    let mut it = 0;
    let mut start: Option<(f64, f64)> = None;
    let mut hist: Vec<(f64, f64, f64)> = Vec::new();
    while it < opts.max_iter {
        let ay = p.linear_part(&y);
        let rd: Vec<Matrix> = cs
            .iter()
            .zip(&s)
            .zip(&ay)
            .map(|((c, s), a)| c - s - a)
            .collect();
        let atx = p.adjoint(&x);
        let rp: Vec<f64> = b.iter().zip(&atx).map(|(b, a)| b - a).collect();
        let mu = x.iter().zip(&s).map(|(x, s)| dot(x, s)).sum::<f64>() / nt as f64;
        pobj = cs.iter().zip(&x).map(|(c, x)| dot(c, x)).sum();
        dobj = b.iter().zip(&y).map(|(b, y)| b * y).sum();
        let relgap = (pobj - dobj).abs() / (1.0 + pobj.abs() + dobj.abs());
        pinf = vnorm(&rp) / (1.0 + bnorm);
        dinf = rd.iter().map(|r| r.norm_l2()).sum::<f64>() / (1.0 + cnorm_sum);
        if opts.verbose {
            eprintln!("{it:3} pobj {pobj:+.6e} dobj {dobj:+.6e} gap {relgap:.2e} pinf {pinf:.2e} dinf {dinf:.2e} mu {mu:.2e}");
        }
        let (pinf0, mu0) = *start.get_or_insert((pinf.max(1.0), mu));
        if pinf > 1e6 * pinf0 && mu > 1e6 * mu0 {
            // iterates running off to infinity: the problem is (numerically)
            // infeasible or unbounded, either way no usable answer follows
            break;
        }
        if dinf < 1e-9 && best.as_ref().map_or(true, |(_, o)| dobj > *o) {
            best = Some((y.clone(), dobj));
        }
        // no movement in the dual objective, the gap or mu over a window: stalled
        const WINDOW: usize = 6;
        if dinf < 1e-9 && hist.len() >= WINDOW {
            let (d0, g0, m0) = hist[hist.len() - WINDOW];
            if (dobj - d0).abs() <= 1e-5 * (1.0 + dobj.abs()) && relgap > 0.5 * g0 && mu > 0.1 * m0 {
                break;
            }
        }
        hist.push((dobj, relgap, mu));
        if relgap < opts.tol && pinf < opts.tol && dinf < opts.tol {
            status = SdpStatus::Optimal;
            break;
        }
        if it > 5 && relgap < 1e-6 && dinf < 1e-9 && pinf < 1e-5 {
            status = SdpStatus::Optimal;
            break;
        }
        if let Some(target) = opts.dual_target {
            if dinf < 1e-9 && dobj >= target {
                status = SdpStatus::TargetReached;
                break;
            }
            // primal and dual agree on a value far below the target
            let settled = pinf < 1e-2 && relgap < 1e-2 && pobj.max(dobj) + 10.0 * (pobj - dobj).abs() < target;
            if settled
                || (pinf < 1e-6
                    && dinf < 1e-6
                    && pobj < target - 1e-9 * (1.0 + pobj.abs())
                    && relgap < 0.5)
            {
                status = SdpStatus::TargetUnreachable;
                break;
            }
        }
        let zs: Vec<Matrix> = match s.iter().map(spd_inverse).collect::<Option<Vec<_>>>() {
            Some(z) => z,
            None => break,
        };
        let hflat = p.schur(&x, &zs);
        let hmat = Mat::from_fn(m, m, |i, j| hflat[i * m + j]);
        drop(hflat);
        let hmax = (0..m)
            .map(|i| hmat[(i, i)].abs())
            .fold(0.0, f64::max)
            .max(f64::MIN_POSITIVE);
        let mut reg = 0.0;
        let chol = loop {
            let trial = if reg == 0.0 {
                hmat.clone()
            } else {
                &hmat + crate::linalg::scaled_eye(m, reg * hmax)
            };
            match trial.llt(Side::Lower) {
                Ok(l) => break Some(l),
                Err(_) => {
                    reg = if reg == 0.0 { 1e-14 } else { reg * 10.0 };
                    if reg > 1e-4 {
                        break None;
                    }
                }
            }
        };
        let Some(chol) = chol else { break };
        drop(hmat);
        let direction = |sigma: f64,
                         corr: Option<(&[Matrix], &[Matrix])>|
         -> (Vec<f64>, Vec<Matrix>, Vec<Matrix>) {
            use faer::linalg::solvers::Solve;
            // dX = sigma mu Z - X - X dS Z (- dXa dSa Z), dS = Rd - A(dy)
            let mut rc: Vec<Matrix> = zs
                .iter()
                .zip(&x)
                .zip(&rd)
                .map(|((z, x), r)| crate::linalg::scale(z, sigma * mu) - x - x * r * z)
                .collect();
            if let Some((dxa, dsa)) = corr {
                for k in 0..rc.len() {
                    rc[k] = &rc[k] - &dxa[k] * &dsa[k] * &zs[k];
                }
            }
            let rcs: Vec<Matrix> = rc.iter().map(sym).collect();
            let arc = p.adjoint(&rcs);
            let rhs = Mat::from_fn(m, 1, |i, _| rp[i] - arc[i]);
            let sol = chol.solve(&rhs);
            let dy: Vec<f64> = (0..m).map(|i| sol[(i, 0)]).collect();
            let ady = p.linear_part(&dy);
            let ds: Vec<Matrix> = rd.iter().zip(&ady).map(|(r, a)| r - a).collect();
            let mut dx: Vec<Matrix> = Vec::with_capacity(x.len());
            for k in 0..x.len() {
                let mut t =
                    crate::linalg::scale(&zs[k], sigma * mu) - &x[k] - &x[k] * &ds[k] * &zs[k];
                if let Some((dxa, dsa)) = corr {
                    t = &t - &dxa[k] * &dsa[k] * &zs[k];
                }
                dx.push(sym(&t));
            }
            (dy, dx, ds)
        };
        let (_, dxa, dsa) = direction(0.0, None);
        let ap = x
            .iter()
            .zip(&dxa)
            .map(|(x, d)| max_step(x, d))
            .fold(1.0f64, f64::min);
        let ad = s
            .iter()
            .zip(&dsa)
            .map(|(s, d)| max_step(s, d))
            .fold(1.0f64, f64::min);
        let mua = x
            .iter()
            .zip(&dxa)
            .zip(s.iter().zip(&dsa))
            .map(|((x, dx), (s, ds))| {
                dot(
                    &(x + crate::linalg::scale(dx, ap)),
                    &(s + crate::linalg::scale(ds, ad)),
                )
            })
            .sum::<f64>()
            / nt as f64;
        let sigma = (mua / mu).clamp(0.0, 1.0).powi(3);
        let (dy, dx, ds) = direction(sigma, Some((&dxa, &dsa)));
        let ap = x
            .iter()
            .zip(&dx)
            .map(|(x, d)| max_step(x, d))
            .fold(f64::INFINITY, f64::min);
        let ad = s
            .iter()
            .zip(&ds)
            .map(|(s, d)| max_step(s, d))
            .fold(f64::INFINITY, f64::min);
        let gamma = 0.9 + 0.09 * ap.min(ad).min(1.0);
        let ap = (gamma * ap).min(1.0);
        let ad = (gamma * ad).min(1.0);
        if opts.verbose {
            eprintln!("      ap {ap:.3} ad {ad:.3} sigma {sigma:.3} reg {reg:.1e}");
        }
        if ap < 1e-12 && ad < 1e-12 {
            break;
        }
        for k in 0..x.len() {
            x[k] = sym(&(&x[k] + crate::linalg::scale(&dx[k], ap)));
            s[k] = sym(&(&s[k] + crate::linalg::scale(&ds[k], ad)));
        }
        for i in 0..m {
            y[i] += ad * dy[i];
        }
        it += 1;
    }
    if status == SdpStatus::Stalled {
        if let Some((by, _)) = best {
            if dinf >= 1e-9 {
                y = by;
                dobj = b.iter().zip(&y).map(|(b, y)| b * y).sum();
            }
        }
    }
    Ok(SdpSolution {
        y,
        status,
        primal_obj: pobj,
        dual_obj: dobj,
        iterations: it,
        primal_infeas: pinf,
        dual_infeas: dinf,
    })
}

/// Largest eigenvalue of F_k(y) for each constraint.
pub fn audit(p: &LmiProblem, y: &[f64]) -> Result<Vec<f64>> {
    p.evaluate(y).iter().map(crate::linalg::max_eig).collect()
}
