//! Dual-loop controller execution: Koopman observer, residual, Q-filter
//! compensation and closed-loop simulation against a plant.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::edmd::BasisLibrary;
use crate::error::{Error, Result};
use crate::linalg::{matvec, vnorm, Matrix};
use crate::nominal::{DesignModel, NominalGains};
use crate::plant::{rk4_step, NonlinearPlant};
use crate::synthesis::QFilter;

/// Norm above which a run is declared divergent.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

#[derive(Clone, Debug)]
pub struct DualLoopController {
    pub model: DesignModel,
    pub basis: BasisLibrary,
    pub k: Matrix,
    pub l: Matrix,
    pub qfilter: Option<QFilter>,
    pub enabled_robust_loop: bool,
}

impl DualLoopController {
    pub fn new(
        model: DesignModel,
        basis: BasisLibrary,
        gains: &NominalGains,
        qfilter: Option<QFilter>,
    ) -> Result<Self> {
        let c = DualLoopController {
            model,
            basis,
            k: gains.k.clone(),
            l: gains.l.clone(),
            enabled_robust_loop: qfilter.is_some(),
            qfilter,
        };
        c.validate()?;
        Ok(c)
    }

    /// Same controller with the robust loop switched off.
    pub fn baseline(&self) -> Self {
        DualLoopController {
            enabled_robust_loop: false,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let lm = self.model.order();
        let m = self.model.b2.ncols();
        let p = self.model.c2.nrows();
        let mut ok = self.k.nrows() == m
            && self.k.ncols() == lm
            && self.l.nrows() == lm
            && self.l.ncols() == p
            && self.model.keep.len() == lm;
        if let Some(q) = &self.qfilter {
            q.validate()?;
            ok &= q.bq.ncols() == p && q.cq.nrows() == m;
        }
        if self.enabled_robust_loop && self.qfilter.is_none() {
            ok = false;
        }
        if ok {
            Ok(())
        } else {
            Err(Error::Dimension("controller blocks are inconsistent".into()))
        }
    }

    pub fn output_dim(&self) -> usize {
        self.model.c2.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.model.b2.ncols()
    }

    pub fn initial_state(&self, y0: &[f64]) -> ControllerState {
        let xq = self.qfilter.as_ref().map_or(0, |q| q.order());
        ControllerState {
            xhat: y0.to_vec(),
            xq: vec![0.0; xq],
        }
    }

    /// Lifted observer initialization from a measured physical state.
    pub fn lift_initial(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.model.project(&self.basis.lift(x)?))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ControllerState {
    pub xhat: Vec<f64>,
    pub xq: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutput {
    pub u: Vec<f64>,
    pub uk: Vec<f64>,
    pub uf: Vec<f64>,
    pub f: Vec<f64>,
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

/// One controller update. The input uses the current states only; the
/// observer and filter are advanced afterwards.
pub fn controller_step(
    ctrl: &DualLoopController,
    state: &ControllerState,
    y: &[f64],
    step: usize,
) -> Result<(StepOutput, ControllerState)> {
    if y.len() != ctrl.output_dim() {
        return Err(Error::Dimension(format!(
            "measurement has {} entries, controller expects {}",
            y.len(),
            ctrl.output_dim()
        )));
    }
    let yhat = matvec(&ctrl.model.c2, &state.xhat);
    let f: Vec<f64> = yhat.iter().zip(y).map(|(a, b)| a - b).collect();
    let uk = matvec(&ctrl.k, &state.xhat);
    let (uf, xq) = match (&ctrl.qfilter, ctrl.enabled_robust_loop) {
        (Some(q), true) => {
            let uf = matvec(&q.cq, &state.xq);
            let xq = add(&matvec(&q.aq, &state.xq), &matvec(&q.bq, &f));
            (uf, xq)
        }
        _ => (vec![0.0; uk.len()], state.xq.clone()),
    };
    let u = add(&uk, &uf);
    let xhat = add(
        &add(&matvec(&ctrl.model.a, &state.xhat), &matvec(&ctrl.model.b2, &u)),
        &matvec(&ctrl.l, &f),
    );
    let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
    if !(finite(&u) && finite(&xhat) && finite(&xq)) {
        return Err(Error::Divergence { step });
    }
    Ok((StepOutput { u, uk, uf, f }, ControllerState { xhat, xq }))
}

/// Plant as seen by the closed loop: a discrete-time map plus the signals the
/// sensor reads.
pub trait LoopPlant {
    fn state_dim(&self) -> usize;
    fn advance(&self, s: &[f64], u: &[f64]) -> Result<Vec<f64>>;
    /// Physical state, which is what the sensor observes and what is reported.
    fn physical(&self, s: &[f64]) -> Vec<f64>;
    /// Noise-free controller output when the plant state already lives in the
    /// controller's coordinates; `None` means lift the measured physical state.
    fn direct_output(&self, _s: &[f64]) -> Option<Vec<f64>> {
        None
    }
}

/// Continuous-time plant sampled with RK4 and a zero-order hold.
pub struct SampledPlant<'a, P: NonlinearPlant + ?Sized> {
    pub plant: &'a P,
    pub dt: f64,
}

impl<P: NonlinearPlant + ?Sized> LoopPlant for SampledPlant<'_, P> {
    fn state_dim(&self) -> usize {
        self.plant.state_dim()
    }
    fn advance(&self, s: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        rk4_step(self.plant, s, u, self.dt)
    }
    fn physical(&self, s: &[f64]) -> Vec<f64> {
        s.to_vec()
    }
}

/// The controller's own linear model used as the plant.
pub struct ModelPlant<'a> {
    pub model: &'a DesignModel,
    pub n_physical: usize,
}

impl LoopPlant for ModelPlant<'_> {
    fn state_dim(&self) -> usize {
        self.model.order()
    }
    fn advance(&self, s: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        Ok(add(&matvec(&self.model.a, s), &matvec(&self.model.b2, u)))
    }
    fn physical(&self, s: &[f64]) -> Vec<f64> {
        s[..self.n_physical].to_vec()
    }
    fn direct_output(&self, s: &[f64]) -> Option<Vec<f64>> {
        Some(matvec(&self.model.c2, s))
    }
}

/// Gaussian draw for one (seed, step) pair: every step has its own stream,
/// so a measurement is reproducible in isolation.
fn step_noise(sigma: f64, seed: u64, step: usize, n: usize) -> Vec<f64> {
    if sigma == 0.0 {
        return vec![0.0; n];
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step as u64);
    let normal = Normal::new(0.0, sigma).expect("sigma validated by caller");
    (0..n).map(|_| normal.sample(&mut rng)).collect()
}

/// y = psi(x + n) restricted to the controller's coordinates in lifted-output
/// mode, y = x + n otherwise.
pub fn measure_lifted_output(
    x: &[f64],
    basis: &BasisLibrary,
    model: &DesignModel,
    sigma: f64,
    seed: u64,
    step: usize,
) -> Result<Vec<f64>> {
    if !(sigma >= 0.0) {
        return Err(Error::Domain(format!("noise level must be nonnegative, got {sigma}")));
    }
    let noisy = add(x, &step_noise(sigma, seed, step, x.len()));
    if model.lifted_output {
        Ok(model.project(&basis.lift(&noisy)?))
    } else {
        Ok(noisy)
    }
}

fn measure<P: LoopPlant + ?Sized>(
    plant: &P,
    ctrl: &DualLoopController,
    s: &[f64],
    sigma: f64,
    seed: u64,
    step: usize,
) -> Result<Vec<f64>> {
    match plant.direct_output(s) {
        Some(y) => {
            let n = step_noise(sigma, seed, step, y.len());
            Ok(add(&y, &n))
        }
        None => measure_lifted_output(&plant.physical(s), &ctrl.basis, &ctrl.model, sigma, seed, step),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ObserverInit {
    /// Lift of the first noisy measurement.
    #[default]
    Measured,
    Zero,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub t: Vec<f64>,
    /// Physical plant state before each step's input is applied.
    pub x: Vec<Vec<f64>>,
    pub y: Vec<Vec<f64>>,
    pub xhat: Vec<Vec<f64>>,
    pub f: Vec<Vec<f64>>,
    pub uk: Vec<Vec<f64>>,
    pub uf: Vec<Vec<f64>>,
    pub u: Vec<Vec<f64>>,
    /// Performance output: physical state followed by the input.
    pub z: Vec<Vec<f64>>,
    /// Physical state after the last step.
    pub x_final: Vec<f64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.t.len()
    }
    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn final_state_norm(&self) -> f64 {
        vnorm(&self.x_final)
    }

    /// `t,x1,x2,u,uk,uf,fnorm,xhat1,xhat2` for a single-input plant, with the
    /// state and input columns indexed in general.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let n = self.x.first().map_or(0, |v| v.len());
        let m = self.u.first().map_or(0, |v| v.len());
        let mut head: Vec<String> = vec!["t".into()];
        head.extend((1..=n).map(|i| format!("x{i}")));
        for name in ["u", "uk", "uf"] {
            if m == 1 {
                head.push(name.into());
            } else {
                head.extend((1..=m).map(|i| format!("{name}{i}")));
            }
        }
        head.push("fnorm".into());
        head.extend((1..=n).map(|i| format!("xhat{i}")));
        writeln!(w, "{}", head.join(","))?;
        for k in 0..self.len() {
            let mut row = vec![self.t[k]];
            row.extend(&self.x[k]);
            row.extend(&self.u[k]);
            row.extend(&self.uk[k]);
            row.extend(&self.uf[k]);
            row.push(vnorm(&self.f[k]));
            row.extend(self.xhat[k].iter().take(n));
            let s: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
            writeln!(w, "{}", s.join(","))?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SimOptions {
    pub horizon: f64,
    pub dt: f64,
    pub sigma: f64,
    pub seed: u64,
    pub observer_init: ObserverInit,
}

/// Runs the loop measure, control, advance for horizon/dt steps.
pub fn simulate_closed_loop<P: LoopPlant + ?Sized>(
    plant: &P,
    ctrl: &DualLoopController,
    x0: &[f64],
    opts: &SimOptions,
) -> Result<Trajectory> {
    ctrl.validate()?;
    if !(opts.dt > 0.0 && opts.horizon >= 0.0) {
        return Err(Error::Domain("dt must be positive and horizon nonnegative".into()));
    }
    if !(opts.sigma >= 0.0) {
        return Err(Error::Domain("noise level must be nonnegative".into()));
    }
    if x0.len() != plant.state_dim() {
        return Err(Error::Dimension("initial state dimension".into()));
    }
    let steps = (opts.horizon / opts.dt).round() as usize;
    let mut s = x0.to_vec();
    let y0 = measure(plant, ctrl, &s, opts.sigma, opts.seed, 0)?;
    let mut cs = match opts.observer_init {
        ObserverInit::Measured => ctrl.initial_state(&y0),
        ObserverInit::Zero => ctrl.initial_state(&vec![0.0; y0.len()]),
    };
    let mut tr = Trajectory {
        t: Vec::with_capacity(steps),
        x: Vec::with_capacity(steps),
        y: Vec::with_capacity(steps),
        xhat: Vec::with_capacity(steps),
        f: Vec::with_capacity(steps),
        uk: Vec::with_capacity(steps),
        uf: Vec::with_capacity(steps),
        u: Vec::with_capacity(steps),
        z: Vec::with_capacity(steps),
        x_final: plant.physical(&s),
    };
    for k in 0..steps {
        let y = if k == 0 {
            y0.clone()
        } else {
            measure(plant, ctrl, &s, opts.sigma, opts.seed, k)?
        };
        let (out, next) = controller_step(ctrl, &cs, &y, k)?;
        let phys = plant.physical(&s);
        let mut z = phys.clone();
        z.extend(&out.u);
        tr.t.push(k as f64 * opts.dt);
        tr.x.push(phys);
        tr.y.push(y);
        tr.xhat.push(cs.xhat.clone());
        tr.f.push(out.f);
        tr.uk.push(out.uk);
        tr.uf.push(out.uf);
        tr.z.push(z);
        s = match plant.advance(&s, &out.u) {
            Ok(v) => v,
            Err(_) => return Err(Error::Divergence { step: k }),
        };
        tr.u.push(out.u);
        cs = next;
        if !(vnorm(&s) <= DIVERGENCE_LIMIT) {
            return Err(Error::Divergence { step: k });
        }
    }
    tr.x_final = plant.physical(&s);
    Ok(tr)
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ResidualMetrics {
    pub rms_f: f64,
    pub final_f_norm: f64,
    pub peak_f_norm: f64,
    /// First time after which the state norm stays below the threshold.
    pub settling_time: Option<f64>,
}

pub fn residual_metrics(traj: &Trajectory, threshold: f64) -> Result<ResidualMetrics> {
    if traj.is_empty() {
        return Err(Error::EmptyData);
    }
    let norms: Vec<f64> = traj.f.iter().map(|f| vnorm(f)).collect();
    let rms_f = (norms.iter().map(|v| v * v).sum::<f64>() / norms.len() as f64).sqrt();
    let peak_f_norm = norms.iter().copied().fold(0.0, f64::max);
    let mut settle = None;
    if vnorm(&traj.x_final) < threshold {
        let mut idx = traj.len();
        while idx > 0 && vnorm(&traj.x[idx - 1]) < threshold {
            idx -= 1;
        }
        settle = Some(if idx == traj.len() {
            traj.t[idx - 1] + traj.t.get(1).copied().unwrap_or(0.0)
        } else {
            traj.t[idx]
        });
    }
    Ok(ResidualMetrics {
        rms_f,
        final_f_norm: *norms.last().unwrap(),
        peak_f_norm,
        settling_time: settle,
    })
}
