//! Experiment configuration: one JSON document, versioned, unknown keys rejected.

use serde::{Deserialize, Serialize};

use crate::edmd::{BasisLibrary, OutputMode};
use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;
use crate::nominal::LqgWeights;
use crate::plant::Interval;
use crate::runtime::ObserverInit;
use crate::synthesis::{log_grid, GammaSearch, LmiOptions, SearchOptions};

pub const SCHEMA_VERSION: u32 = 1;

/// Default experiment: the Van der Pol setup with a tractable lambda grid.
pub const VDP_CONFIG: &str = include_str!("../configs/vdp.json");

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    #[serde(default = "default_experiment")]
    pub experiment: String,
    /// Master seed: snapshot draws use it, measurement noise uses `seed + 1`,
    /// held-out validation data `seed + 2`.
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub plant: PlantConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub basis: BasisConfig,
    #[serde(default = "default_noise_levels")]
    pub noise_levels: Vec<f64>,
    #[serde(default)]
    pub identification: IdentificationConfig,
    #[serde(default)]
    pub bounds: BoundsConfig,
    #[serde(default)]
    pub lqg: LqgConfig,
    #[serde(default)]
    pub performance: PerformanceConfig,
    #[serde(default)]
    pub synthesis: SynthesisConfig,
    #[serde(default)]
    pub simulation: SimulationConfig,
    #[serde(default)]
    pub output_dir: Option<String>,
}

fn default_experiment() -> String {
    "vdp".into()
}
fn default_seed() -> u64 {
    1
}
fn default_noise_levels() -> Vec<f64> {
    vec![0.0, 0.01, 0.05]
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct PlantConfig {
    pub mu: f64,
}

impl Default for PlantConfig {
    fn default() -> Self {
        PlantConfig { mu: 1.0 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub samples: usize,
    pub dt: f64,
    pub segment: usize,
    pub x0_range: [f64; 2],
    pub u_range: [f64; 2],
    /// Size of the noise-free held-out set used for one-step prediction error.
    pub holdout_samples: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            samples: 2000,
            dt: 0.01,
            segment: 200,
            x0_range: [-1.0, 1.0],
            u_range: [-10.0, 10.0],
            holdout_samples: 1000,
        }
    }
}

impl DataConfig {
    pub fn x0_interval(&self) -> Interval {
        Interval::new(self.x0_range[0], self.x0_range[1])
    }
    pub fn u_interval(&self) -> Interval {
        Interval::new(self.u_range[0], self.u_range[1])
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct BasisConfig {
    pub kind: String,
    pub degree: usize,
}

impl Default for BasisConfig {
    fn default() -> Self {
        BasisConfig {
            kind: "monomial".into(),
            degree: 5,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct IdentificationConfig {
    pub pinv_tol: f64,
    pub output_mode: OutputMode,
    /// Free-run horizon for the decay-rate metric, seconds.
    pub free_run_horizon: f64,
    pub free_run_x0: Vec<f64>,
}

impl Default for IdentificationConfig {
    fn default() -> Self {
        IdentificationConfig {
            pinv_tol: crate::edmd::DEFAULT_PINV_TOL,
            output_mode: OutputMode::LiftedState,
            free_run_horizon: 20.0,
            free_run_x0: vec![0.5, 0.5],
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct BoundsConfig {
    pub confidence: f64,
}

impl Default for BoundsConfig {
    fn default() -> Self {
        BoundsConfig {
            confidence: crate::bounds::DEFAULT_CONFIDENCE,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct LqgConfig {
    pub q_physical: f64,
    pub q_lifted: f64,
    pub r: f64,
    pub w_process: f64,
    pub v_measurement: Option<f64>,
}

impl Default for LqgConfig {
    fn default() -> Self {
        let w = LqgWeights::default();
        LqgConfig {
            q_physical: w.q_physical,
            q_lifted: w.q_lifted,
            r: w.r,
            w_process: w.w_process,
            v_measurement: w.v_measurement,
        }
    }
}

impl LqgConfig {
    pub fn weights(&self) -> LqgWeights {
        LqgWeights {
            q_physical: self.q_physical,
            q_lifted: self.q_lifted,
            r: self.r,
            w_process: self.w_process,
            v_measurement: self.v_measurement,
        }
    }
}

/// Either the physical default (disturbance on the physical states, output =
/// physical states plus weighted input) or explicit matrices.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct PerformanceConfig {
    pub u_weight: f64,
    #[serde(rename = "B1")]
    pub b1: Option<DenseMatrix>,
    #[serde(rename = "C1")]
    pub c1: Option<DenseMatrix>,
    #[serde(rename = "D12")]
    pub d12: Option<DenseMatrix>,
}

impl Default for PerformanceConfig {
    fn default() -> Self {
        PerformanceConfig {
            u_weight: 0.1,
            b1: None,
            c1: None,
            d12: None,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SynthesisConfig {
    /// Noise levels for which a controller is synthesized and simulated.
    pub noise_levels: Vec<f64>,
    pub lambda_grid: Vec<f64>,
    pub gamma_range: [f64; 2],
    pub rel_tol: f64,
    pub method: GammaSearch,
    pub sector_scales: Vec<f64>,
    pub rho: f64,
    pub rel_eps: f64,
    pub max_iter: usize,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        let so = SearchOptions::default();
        SynthesisConfig {
            noise_levels: vec![0.01],
            lambda_grid: log_grid(1e-2, 1e2, 10),
            gamma_range: [so.gamma_lo, so.gamma_hi],
            rel_tol: so.rel_tol,
            method: so.method,
            sector_scales: so.sector_scales,
            rho: so.lmi.rho,
            rel_eps: so.lmi.rel_eps,
            max_iter: so.lmi.sdp.max_iter,
        }
    }
}

impl SynthesisConfig {
    pub fn search_options(&self) -> SearchOptions {
        let mut lmi = LmiOptions {
            rel_eps: self.rel_eps,
            rho: self.rho,
            ..LmiOptions::default()
        };
        lmi.sdp.max_iter = self.max_iter;
        SearchOptions {
            lambda_grid: self.lambda_grid.clone(),
            gamma_lo: self.gamma_range[0],
            gamma_hi: self.gamma_range[1],
            rel_tol: self.rel_tol,
            method: self.method,
            sector_scales: self.sector_scales.clone(),
            lmi,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SimulationConfig {
    pub x0: Vec<f64>,
    pub horizon: f64,
    pub seeds: Vec<u64>,
    pub observer_init: ObserverInit,
    /// State-norm threshold for settling time and the pass/fail table.
    pub threshold: f64,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        SimulationConfig {
            x0: vec![0.5, 0.5],
            horizon: 20.0,
            seeds: (0..10).collect(),
            observer_init: ObserverInit::Measured,
            threshold: 0.05,
        }
    }
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

fn check_range(r: [f64; 2], what: &str) -> Result<()> {
    if !(r[0].is_finite() && r[1].is_finite() && r[0] <= r[1]) {
        return Err(bad(format!("{what}: need min <= max, got [{}, {}]", r[0], r[1])));
    }
    Ok(())
}

impl ExperimentConfig {
    pub fn from_json(s: &str) -> Result<Self> {
        let c: ExperimentConfig = serde_json::from_str(s).map_err(|e| bad(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn vdp_default() -> Self {
        Self::from_json(VDP_CONFIG).expect("bundled config is valid")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn basis(&self) -> BasisLibrary {
        BasisLibrary::monomial(2, self.basis.degree)
    }

    /// Every check that does not need data.
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(bad(format!(
                "schema_version {} not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.experiment.is_empty()
            || !self
                .experiment
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
        {
            return Err(bad("experiment name must be nonempty [A-Za-z0-9_-]"));
        }
        if !(self.plant.mu.is_finite()) {
            return Err(bad("plant.mu must be finite"));
        }
        let d = &self.data;
        if d.samples == 0 || d.segment == 0 {
            return Err(bad("data.samples and data.segment must be positive"));
        }
        if !(d.dt > 0.0 && d.dt.is_finite()) {
            return Err(bad("data.dt must be positive"));
        }
        check_range(d.x0_range, "data.x0_range")?;
        check_range(d.u_range, "data.u_range")?;
        if self.basis.kind != "monomial" {
            return Err(bad(format!("basis.kind '{}' not supported", self.basis.kind)));
        }
        if self.basis.degree == 0 {
            return Err(bad("basis.degree must be at least 1"));
        }
        let lm = self.basis().lifted_dim();
        if d.samples < lm + 1 {
            return Err(bad(format!("data.samples must be at least {}", lm + 1)));
        }
        if self.noise_levels.is_empty() || self.noise_levels.iter().any(|s| !(*s >= 0.0) || !s.is_finite()) {
            return Err(bad("noise_levels must be a nonempty list of nonnegative numbers"));
        }
        let id = &self.identification;
        if !(id.pinv_tol > 0.0) {
            return Err(bad("identification.pinv_tol must be positive"));
        }
        if id.free_run_x0.len() != 2 || !(id.free_run_horizon > 0.0) {
            return Err(bad("identification.free_run_x0 must have 2 entries and a positive horizon"));
        }
        if !(self.bounds.confidence > 0.0 && self.bounds.confidence < 1.0) {
            return Err(bad("bounds.confidence must lie in (0, 1)"));
        }
        let q = &self.lqg;
        if !(q.q_physical >= 0.0 && q.q_lifted >= 0.0 && q.r > 0.0 && q.w_process > 0.0) {
            return Err(bad("lqg weights: q >= 0, r > 0, w_process > 0"));
        }
        if q.v_measurement.is_some_and(|v| !(v > 0.0)) {
            return Err(bad("lqg.v_measurement must be positive"));
        }
        self.validate_performance(lm - 1)?;
        let s = &self.synthesis;
        if s.noise_levels.iter().any(|l| !self.noise_levels.contains(l)) {
            return Err(bad("synthesis.noise_levels must be a subset of noise_levels"));
        }
        if s.lambda_grid.is_empty() || s.lambda_grid.iter().any(|l| !(*l > 0.0) || !l.is_finite()) {
            return Err(bad("synthesis.lambda_grid must be a nonempty list of positive numbers"));
        }
        if !(s.gamma_range[0] > 0.0 && s.gamma_range[0] < s.gamma_range[1] && s.gamma_range[1].is_finite()) {
            return Err(bad("synthesis.gamma_range must satisfy 0 < lo < hi"));
        }
        if !(s.rel_tol > 0.0) || !(s.rho > 0.0) || !(s.rel_eps > 0.0) || s.max_iter == 0 {
            return Err(bad("synthesis.rel_tol, rho, rel_eps and max_iter must be positive"));
        }
        if s.sector_scales.is_empty() || s.sector_scales.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(bad("synthesis.sector_scales must be a nonempty list of nonnegative numbers"));
        }
        let sim = &self.simulation;
        if sim.x0.len() != 2 || sim.x0.iter().any(|v| !v.is_finite()) {
            return Err(bad("simulation.x0 must have 2 finite entries"));
        }
        if !(sim.horizon > 0.0 && sim.horizon.is_finite()) {
            return Err(bad("simulation.horizon must be positive"));
        }
        if !(sim.threshold > 0.0) {
            return Err(bad("simulation.threshold must be positive"));
        }
        Ok(())
    }

    /// `lm` is the design order (lifted dimension without the constant).
    fn validate_performance(&self, lm: usize) -> Result<()> {
        let p = &self.performance;
        let given = [p.b1.is_some(), p.c1.is_some(), p.d12.is_some()];
        if given.iter().any(|&g| g) && !given.iter().all(|&g| g) {
            return Err(bad("performance: give all of B1, C1, D12 or none"));
        }
        if let (Some(b1), Some(c1), Some(d12)) = (&p.b1, &p.c1, &p.d12) {
            for (m, what) in [(b1, "B1"), (c1, "C1"), (d12, "D12")] {
                m.to_matrix().map_err(|e| bad(format!("performance.{what}: {e}")))?;
            }
            if b1.rows != lm || c1.cols != lm || d12.rows != c1.rows || d12.cols != 1 {
                return Err(bad(format!(
                    "performance matrices must be B1: {lm}xd, C1: qx{lm}, D12: qx1"
                )));
            }
        } else if !(p.u_weight >= 0.0) {
            return Err(bad("performance.u_weight must be nonnegative"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_config_parses() {
        let c = ExperimentConfig::vdp_default();
        assert_eq!(c.basis().lifted_dim(), 21);
        assert_eq!(c.noise_levels, vec![0.0, 0.01, 0.05]);
    }

    #[test]
    fn unknown_key_rejected() {
        let e = ExperimentConfig::from_json(r#"{"schema_version": 1, "sed": 3}"#).unwrap_err();
        assert_eq!(e.exit_code(), 1);
        let e = ExperimentConfig::from_json(r#"{"schema_version": 1, "data": {"dtt": 0.1}}"#)
            .unwrap_err();
        assert_eq!(e.exit_code(), 1);
    }

    #[test]
    fn version_and_ranges_checked() {
        assert!(ExperimentConfig::from_json(r#"{"schema_version": 2}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{}"#).is_err());
        let e = ExperimentConfig::from_json(
            r#"{"schema_version": 1, "data": {"u_range": [1.0, -1.0]}}"#,
        )
        .unwrap_err();
        assert!(e.to_string().contains("u_range"));
        assert!(ExperimentConfig::from_json(r#"{"schema_version": 1}"#).is_ok());
    }

    #[test]
    fn roundtrip() {
        let c = ExperimentConfig::vdp_default();
        assert_eq!(ExperimentConfig::from_json(&c.to_json()).unwrap(), c);
    }
}
