//! Configuration schema. Every field has a default, so an empty JSON object
//! is a complete configuration reproducing the reference system parameters.
//! Noise is given in dBm here and converted to watts when scenarios are built;
//! everything else is SI.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::uncertainty::Reliability;

pub const SCHEMA_VERSION: u32 = 1;

/// Physical system and scenario-generation parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SystemConfig {
    /// Number of offloading devices `J`.
    pub offload_devices: usize,
    /// Lower end of the uniform task-size law, bits.
    pub task_bits_min: f64,
    /// Upper end of the uniform task-size law, bits.
    pub task_bits_max: f64,
    /// CPU cycles per bit.
    pub cycles_per_bit: f64,
    /// Effective switched capacitance, W s^3.
    pub kappa: f64,
    /// Deadline, s.
    pub t_max_s: f64,
    /// Transmit power budget, W.
    pub p_max_w: f64,
    /// Side-link bandwidth, Hz.
    pub bandwidth_hz: f64,
    /// Noise power, dBm.
    pub noise_dbm: f64,
    /// Active-device CPU cap, Hz.
    pub f0_max_hz: f64,
    /// Offloading-device CPU caps are drawn from `U(f_min_hz, f_max_hz)`.
    pub f_min_hz: f64,
    pub f_max_hz: f64,
    /// Radius of the placement disk, m.
    pub placement_radius_m: f64,
    /// Devices farther than this are not offloading candidates, m.
    pub max_link_radius_m: f64,
    /// Distances are clamped below to this value before path loss, m.
    pub min_distance_m: f64,
    /// Throttle fraction law `U(throttle_lo, throttle_hi)`.
    pub throttle_lo: f64,
    pub throttle_hi: f64,
}

impl Default for SystemConfig {
    fn default() -> Self {
        SystemConfig {
            offload_devices: 3,
            task_bits_min: 2e4,
            task_bits_max: 4e5,
            cycles_per_bit: 1500.0,
            kappa: 1e-24,
            t_max_s: 1.0,
            p_max_w: 0.2,
            bandwidth_hz: 10e6,
            noise_dbm: -114.0,
            f0_max_hz: 1e10,
            f_min_hz: 3e7,
            f_max_hz: 1e8,
            placement_radius_m: 15.0,
            max_link_radius_m: 20.0,
            min_distance_m: 1.0,
            throttle_lo: 0.0,
            throttle_hi: 0.1,
        }
    }
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} must be positive, got {v}")))
    }
}

impl SystemConfig {
    pub fn validate(&self) -> Result<()> {
        positive("task_bits_min", self.task_bits_min)?;
        positive("cycles_per_bit", self.cycles_per_bit)?;
        positive("kappa", self.kappa)?;
        positive("t_max_s", self.t_max_s)?;
        positive("bandwidth_hz", self.bandwidth_hz)?;
        positive("f0_max_hz", self.f0_max_hz)?;
        positive("f_min_hz", self.f_min_hz)?;
        positive("placement_radius_m", self.placement_radius_m)?;
        positive("max_link_radius_m", self.max_link_radius_m)?;
        positive("min_distance_m", self.min_distance_m)?;
        if !(self.p_max_w.is_finite() && self.p_max_w >= 0.0) {
            return Err(Error::Config(format!("p_max_w must be nonnegative, got {}", self.p_max_w)));
        }
        if !self.noise_dbm.is_finite() {
            return Err(Error::Config("noise_dbm must be finite".into()));
        }
        if !(self.task_bits_max >= self.task_bits_min && self.task_bits_max.is_finite()) {
            return Err(Error::Config(format!(
                "task_bits_max ({}) must be at least task_bits_min ({})",
                self.task_bits_max, self.task_bits_min
            )));
        }
        if !(self.f_max_hz >= self.f_min_hz && self.f_max_hz.is_finite()) {
            return Err(Error::Config(format!(
                "f_max_hz ({}) must be at least f_min_hz ({})",
                self.f_max_hz, self.f_min_hz
            )));
        }
        if !(0.0 <= self.throttle_lo && self.throttle_lo < self.throttle_hi && self.throttle_hi <= 1.0)
        {
            return Err(Error::Config(format!(
                "throttle law needs 0 <= lo < hi <= 1, got [{}, {}]",
                self.throttle_lo, self.throttle_hi
            )));
        }
        Ok(())
    }
}

/// Parameters of the solution methods.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MethodConfig {
    /// Reliability level of the deadline constraints.
    pub gamma: f64,
    /// Upload-time limiting factor of the two-step method.
    pub alpha: f64,
    /// Penalty weight of the DC method, J/s.
    pub lambda: f64,
    /// DC convergence tolerance on the penalized objective, J.
    pub epsilon: f64,
    /// DC iteration limit.
    pub k_max: usize,
    /// Relative tolerance of the equality checks.
    pub feasibility_tol: f64,
}

impl Default for MethodConfig {
    fn default() -> Self {
        MethodConfig {
            gamma: 0.95,
            alpha: 0.85,
            lambda: 12.0,
            epsilon: 1e-2,
            k_max: 1000,
            feasibility_tol: 1e-6,
        }
    }
}

impl MethodConfig {
    pub fn reliability(&self) -> Result<Reliability> {
        Reliability::new(self.gamma).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.reliability()?;
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::Config(format!("lambda must be nonnegative, got {}", self.lambda)));
        }
        positive("epsilon", self.epsilon)?;
        positive("feasibility_tol", self.feasibility_tol)?;
        if self.k_max == 0 {
            return Err(Error::Config("k_max must be at least 1".into()));
        }
        Ok(())
    }
}

/// Monte Carlo sweep settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Monte Carlo runs per grid point.
    pub runs: usize,
    /// Offloading-device counts swept.
    pub devices: Vec<usize>,
    /// Deadlines of the deadline sweep, s.
    pub t_max_grid: Vec<f64>,
    /// Upper ends of the CPU-cap law in the cap sweep, Hz.
    pub f_max_grid: Vec<f64>,
    /// Deadline of the cap sweep, s.
    pub f_max_sweep_t_max_s: f64,
    /// Upper end of the CPU-cap law in the deadline sweep, Hz.
    pub t_max_sweep_f_max_hz: f64,
    pub runtime_f_max: Vec<f64>,
    pub runtime_devices: Vec<usize>,
    pub runtime_t_max_s: f64,
    pub runtime_runs: usize,
    /// Record per-run wall times in sweeps (makes the output run-dependent).
    pub record_timing: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 2021,
            runs: 200,
            devices: vec![1, 2, 3],
            t_max_grid: vec![0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0],
            f_max_grid: vec![5e7, 7.5e7, 1e8, 1.25e8, 1.5e8],
            f_max_sweep_t_max_s: 1.0,
            t_max_sweep_f_max_hz: 1e8,
            runtime_f_max: vec![4e7, 1e8],
            runtime_devices: vec![1, 2, 3],
            runtime_t_max_s: 0.4,
            runtime_runs: 20,
            record_timing: false,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.runs == 0 {
            return Err(Error::Config("runs must be at least 1".into()));
        }
        for &t in self.t_max_grid.iter().chain([&self.f_max_sweep_t_max_s, &self.runtime_t_max_s]) {
            positive("deadline grid value", t)?;
        }
        for &f in self.f_max_grid.iter().chain(&self.runtime_f_max) {
            positive("CPU cap grid value", f)?;
        }
        positive("t_max_sweep_f_max_hz", self.t_max_sweep_f_max_hz)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum MethodSelection {
    Local,
    Dc,
    TwoStep,
    #[default]
    Both,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    /// Per-run CSV path; stdout when absent.
    pub csv: Option<PathBuf>,
    /// JSON summary path.
    pub summary: Option<PathBuf>,
}

/// Top-level configuration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub schema_version: u32,
    pub system: SystemConfig,
    pub methods: MethodConfig,
    pub experiment: ExperimentConfig,
    pub output: OutputConfig,
    pub method: MethodSelection,
    /// Worker threads; 0 means one per logical core.
    pub jobs: usize,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            schema_version: SCHEMA_VERSION,
            system: SystemConfig::default(),
            methods: MethodConfig::default(),
            experiment: ExperimentConfig::default(),
            output: OutputConfig::default(),
            method: MethodSelection::default(),
            jobs: 0,
        }
    }
}

impl Config {
    /// Parses and validates a JSON configuration. Parse errors carry the
    /// line and column reported by the JSON reader.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Config = serde_json::from_str(text).map_err(|e| {
            Error::Config(format!("line {} column {}: {e}", e.line(), e.column()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.system.validate()?;
        self.methods.validate()?;
        self.experiment.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_object_gives_reference_parameters() {
        let c = Config::from_json("{}").unwrap();
        assert_eq!(c, Config::default());
        assert_eq!(c.system.cycles_per_bit, 1500.0);
        assert_eq!(c.system.kappa, 1e-24);
        assert_eq!(c.system.p_max_w, 0.2);
        assert_eq!(c.system.noise_dbm, -114.0);
        assert_eq!(c.system.bandwidth_hz, 1e7);
        assert_eq!(c.methods.k_max, 1000);
        assert_eq!(c.methods.alpha, 0.85);
        assert_eq!(c.methods.gamma, 0.95);
        assert_eq!(c.methods.epsilon, 1e-2);
        assert_eq!(c.methods.lambda, 12.0);
    }

    #[test]
    fn malformed_json_reports_line() {
        let err = Config::from_json("{\n  \"system\": {\n    \"kappa\": ,\n  }\n}").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 3"), "{msg}");
    }

    #[test]
    fn unknown_field_rejected() {
        assert!(Config::from_json(r#"{"system": {"kapa": 1.0}}"#).is_err());
    }

    #[test]
    fn inconsistent_values_rejected() {
        assert!(Config::from_json(r#"{"system": {"f_min_hz": 2e8}}"#).is_err());
        assert!(Config::from_json(r#"{"methods": {"gamma": 1.0}}"#).is_err());
        assert!(Config::from_json(r#"{"schema_version": 7}"#).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_is_identity(
            j in 0usize..6,
            t in 0.1f64..2.0,
            p in 0.0f64..1.0,
            gamma in 0.5f64..0.999,
            runs in 1usize..500,
            seed in any::<u64>(),
            timing in any::<bool>(),
        ) {
            let mut c = Config::default();
            c.system.offload_devices = j;
            c.system.t_max_s = t;
            c.system.p_max_w = p;
            c.methods.gamma = gamma;
            c.experiment.runs = runs;
            c.experiment.seed = seed;
            c.experiment.record_timing = timing;
            let back = Config::from_json(&c.to_json()).unwrap();
            prop_assert_eq!(&back, &c);
            prop_assert_eq!(Config::from_json(&back.to_json()).unwrap(), back);
        }
    }
}
