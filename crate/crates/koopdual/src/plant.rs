//! Continuous-time plants, RK4 discretization and snapshot generation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{zeros, Matrix};

pub trait NonlinearPlant: Sync {
    fn state_dim(&self) -> usize;
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize {
        self.state_dim()
    }
    fn vector_field(&self, x: &[f64], u: &[f64]) -> Vec<f64>;
    fn output(&self, x: &[f64]) -> Vec<f64> {
        x.to_vec()
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct VanDerPol {
    pub mu: f64,
}

impl Default for VanDerPol {
    fn default() -> Self {
        VanDerPol { mu: 1.0 }
    }
}

pub fn vdp_vector_field(x: [f64; 2], u: f64, mu: f64) -> [f64; 2] {
    [x[1], mu * (1.0 - x[0] * x[0]) * x[1] - x[0] + u]
}

impl NonlinearPlant for VanDerPol {
    fn state_dim(&self) -> usize {
        2
    }
    fn input_dim(&self) -> usize {
        1
    }
    fn vector_field(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        vdp_vector_field([x[0], x[1]], u[0], self.mu).to_vec()
    }
}

/// Plant given by a closure, mostly for tests and synthetic checks.
pub struct FnPlant<F: Fn(&[f64], &[f64]) -> Vec<f64> + Sync> {
    pub n: usize,
    pub m: usize,
    pub f: F,
}

impl<F: Fn(&[f64], &[f64]) -> Vec<f64> + Sync> NonlinearPlant for FnPlant<F> {
    fn state_dim(&self) -> usize {
        self.n
    }
    fn input_dim(&self) -> usize {
        self.m
    }
    fn vector_field(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        (self.f)(x, u)
    }
}

fn axpy(x: &[f64], h: f64, k: &[f64]) -> Vec<f64> {
    x.iter().zip(k).map(|(a, b)| a + h * b).collect()
}

/// Classical RK4 step with the input held over the interval.
pub fn rk4_step<P: NonlinearPlant + ?Sized>(
    plant: &P,
    x: &[f64],
    u: &[f64],
    dt: f64,
) -> Result<Vec<f64>> {
    if dt <= 0.0 {
        return Err(Error::Domain(format!("dt must be positive, got {dt}")));
    }
    let k1 = plant.vector_field(x, u);
    let k2 = plant.vector_field(&axpy(x, 0.5 * dt, &k1), u);
    let k3 = plant.vector_field(&axpy(x, 0.5 * dt, &k2), u);
    let k4 = plant.vector_field(&axpy(x, dt, &k3), u);
    let out: Vec<f64> = (0..x.len())
        .map(|i| x[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect();
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::Overflow("non-finite state in rk4 step".into()));
    }
    Ok(out)
}

/// Snapshot matrices, one column per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct SnapshotData {
    pub x1: Matrix,
    pub x2: Matrix,
    pub u: Matrix,
    pub y: Matrix,
    pub dt: f64,
    pub seed: u64,
}

impl SnapshotData {
    pub fn len(&self) -> usize {
        self.x1.ncols()
    }
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn new(lo: f64, hi: f64) -> Self {
        Interval { lo, hi }
    }
    pub fn validate(&self, what: &str) -> Result<()> {
        if !(self.lo <= self.hi) || !self.lo.is_finite() || !self.hi.is_finite() {
            return Err(Error::Domain(format!(
                "{what}: empty range [{}, {}]",
                self.lo, self.hi
            )));
        }
        Ok(())
    }
    fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        if self.lo == self.hi {
            self.lo
        } else {
            rng.random_range(self.lo..self.hi)
        }
    }
}

/// Segments of `segment` steps, each from a fresh uniform initial state and
/// with inputs drawn uniformly per step.
pub fn generate_snapshots<P: NonlinearPlant + ?Sized>(
    plant: &P,
    n: usize,
    dt: f64,
    x0_range: Interval,
    u_range: Interval,
    segment: usize,
    seed: u64,
) -> Result<SnapshotData> {
    if n == 0 {
        return Err(Error::EmptyData);
    }
    if segment == 0 {
        return Err(Error::Domain("segment length must be positive".into()));
    }
    x0_range.validate("x0 range")?;
    u_range.validate("u range")?;
    let (ns, ni, no) = (plant.state_dim(), plant.input_dim(), plant.output_dim());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut x1, mut x2, mut um, mut y) = (zeros(ns, n), zeros(ns, n), zeros(ni, n), zeros(no, n));
    let mut k = 0;
    while k < n {
        let mut x: Vec<f64> = (0..ns).map(|_| x0_range.sample(&mut rng)).collect();
        for _ in 0..segment {
            if k == n {
                break;
            }
            let u: Vec<f64> = (0..ni).map(|_| u_range.sample(&mut rng)).collect();
            let xn = rk4_step(plant, &x, &u, dt)?;
            let yk = plant.output(&x);
            for i in 0..ns {
                x1[(i, k)] = x[i];
                x2[(i, k)] = xn[i];
            }
            for i in 0..ni {
                um[(i, k)] = u[i];
            }
            for i in 0..no {
                y[(i, k)] = yk[i];
            }
            x = xn;
            k += 1;
        }
    }
    Ok(SnapshotData {
        x1,
        x2,
        u: um,
        y,
        dt,
        seed,
    })
}

/// Adds i.i.d. Gaussian noise (standard deviation `sigma`) to every entry of X1, X2 and Y.
pub fn add_measurement_noise(data: &SnapshotData, sigma: f64, seed: u64) -> Result<SnapshotData> {
    if !(sigma >= 0.0) {
        return Err(Error::Domain(format!(
            "noise level must be nonnegative, got {sigma}"
        )));
    }
    let mut out = data.clone();
    if sigma == 0.0 {
        return Ok(out);
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::Domain(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for m in [&mut out.x1, &mut out.x2, &mut out.y] {
        for j in 0..m.ncols() {
            for i in 0..m.nrows() {
                m[(i, j)] += normal.sample(&mut rng);
            }
        }
    }
    Ok(out)
}
