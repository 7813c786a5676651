//! CPU-throttling uncertainty and the deterministic forms of the
//! probabilistic deadline constraints.
//!
//! A device that is allocated frequency `f` actually runs at `(1 - xi) f`,
//! where `xi` is drawn from a [`ThrottleModel`]. A deadline that must hold
//! with probability at least `gamma` is equivalent to a deterministic margin
//! built from the inverse CDF of `xi` evaluated at `gamma`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Scenario, TaskSpec};

/// Reliability level `gamma`, strictly inside `(0, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Reliability(f64);

impl Reliability {
    pub fn new(gamma: f64) -> Result<Self> {
        if gamma.is_finite() && gamma > 0.0 && gamma < 1.0 {
            Ok(Reliability(gamma))
        } else {
            Err(Error::invalid(format!(
                "reliability level must lie in (0, 1), got {gamma}"
            )))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for Reliability {
    type Error = Error;

    fn try_from(v: f64) -> Result<Self> {
        Reliability::new(v)
    }
}

impl From<Reliability> for f64 {
    fn from(r: Reliability) -> f64 {
        r.0
    }
}

/// Distribution of the throttling fraction `xi` of one device.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ThrottleModel {
    /// `xi ~ U(lo, hi)` with `0 <= lo < hi <= 1`.
    Uniform { lo: f64, hi: f64 },
}

impl ThrottleModel {
    pub fn uniform(lo: f64, hi: f64) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite() && 0.0 <= lo && lo < hi && hi <= 1.0) {
            return Err(Error::invalid(format!(
                "uniform throttle needs 0 <= lo < hi <= 1, got [{lo}, {hi}]"
            )));
        }
        Ok(ThrottleModel::Uniform { lo, hi })
    }

    pub fn support(&self) -> (f64, f64) {
        match *self {
            ThrottleModel::Uniform { lo, hi } => (lo, hi),
        }
    }

    pub fn cdf(&self, x: f64) -> f64 {
        match *self {
            ThrottleModel::Uniform { lo, hi } => ((x - lo) / (hi - lo)).clamp(0.0, 1.0),
        }
    }

    /// Quantile function; `gamma` must lie in `(0, 1)`.
    pub fn inv_cdf(&self, gamma: f64) -> Result<f64> {
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(Error::invalid(format!(
                "inverse CDF needs a probability in (0, 1), got {gamma}"
            )));
        }
        Ok(self.quantile(gamma))
    }

    fn quantile(&self, gamma: f64) -> f64 {
        match *self {
            ThrottleModel::Uniform { lo, hi } => lo + gamma * (hi - lo),
        }
    }

    pub fn mean(&self) -> f64 {
        match *self {
            ThrottleModel::Uniform { lo, hi } => 0.5 * (lo + hi),
        }
    }

    pub fn second_moment(&self) -> f64 {
        match *self {
            // (hi^3 - lo^3) / (3 (hi - lo)), written without the removable singularity
            ThrottleModel::Uniform { lo, hi } => (hi * hi + hi * lo + lo * lo) / 3.0,
        }
    }

    /// `E[(1 - xi)^2]`, the factor turning allocated into expected computation energy.
    pub fn eta(&self) -> f64 {
        1.0 - 2.0 * self.mean() + self.second_moment()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            ThrottleModel::Uniform { lo, hi } => lo + (hi - lo) * rng.random::<f64>(),
        }
    }
}

/// `q = t_max (1 - F^{-1}(gamma)) / c`: the number of bits a unit of
/// allocated frequency can finish by the deadline at the required reliability.
pub fn q_constant(model: &ThrottleModel, task: &TaskSpec, gamma: Reliability) -> f64 {
    task.deadline * (1.0 - model.quantile(gamma.get())) / task.cycles_per_bit
}

/// Per-device constants of the deterministic chance constraints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChanceConstants {
    pub gamma: Reliability,
    /// `F^{-1}_i(gamma)` per device, index 0 is the active device.
    pub inv_cdf_gamma: Vec<f64>,
    /// `E[(1 - xi_i)^2]` per device.
    pub eta: Vec<f64>,
    /// `t_max (1 - F^{-1}_i(gamma)) / c` per device.
    pub q: Vec<f64>,
}

impl ChanceConstants {
    pub fn new(scenario: &Scenario, gamma: Reliability) -> Self {
        let models = &scenario.throttle;
        ChanceConstants {
            gamma,
            inv_cdf_gamma: models.iter().map(|m| m.quantile(gamma.get())).collect(),
            eta: models.iter().map(ThrottleModel::eta).collect(),
            q: models
                .iter()
                .map(|m| q_constant(m, &scenario.task, gamma))
                .collect(),
        }
    }

    /// Fraction of the allocated frequency that is guaranteed at level gamma.
    pub fn usable_fraction(&self, device: usize) -> f64 {
        1.0 - self.inv_cdf_gamma[device]
    }

    /// Smallest frequency meeting the deadline `window` for `bits` at level gamma.
    pub fn min_frequency(&self, device: usize, bits: f64, window: f64, task: &TaskSpec) -> f64 {
        if bits <= 0.0 {
            return 0.0;
        }
        bits * task.cycles_per_bit / (window * self.usable_fraction(device))
    }
}

fn margin(bits: f64, freq: f64, window: f64, inv_cdf: f64, task: &TaskSpec) -> f64 {
    if bits <= 0.0 {
        return 1.0 - inv_cdf;
    }
    if freq <= 0.0 {
        return f64::NEG_INFINITY;
    }
    let budget = freq * window;
    (budget - bits * task.cycles_per_bit) / budget - inv_cdf
}

/// Deterministic margin of the local deadline constraint; nonnegative exactly
/// when `P((1 - xi_0) f0 t_max >= b0 c) >= gamma`.
pub fn deterministic_margin_local(
    b0: f64,
    f0: f64,
    chance: &ChanceConstants,
    task: &TaskSpec,
) -> f64 {
    margin(b0, f0, task.deadline, chance.inv_cdf_gamma[0], task)
}

/// Deterministic margin of the deadline constraint of offloading device `j`,
/// whose computation must fit into `t_max - t_up`.
pub fn deterministic_margin_offload(
    j: usize,
    bj: f64,
    fj: f64,
    t_up: f64,
    chance: &ChanceConstants,
    task: &TaskSpec,
) -> Result<f64> {
    let window = task.deadline - t_up;
    if bj > 0.0 && window <= 0.0 {
        return Err(Error::UploadTooLong {
            device: j,
            t_up,
            deadline: task.deadline,
        });
    }
    Ok(margin(bj, fj, window, chance.inv_cdf_gamma[j], task))
}

/// Fraction of `samples` throttle draws for which `bits` cycles finish inside
/// `window` at allocated frequency `freq`.
pub fn empirical_success<R: Rng + ?Sized>(
    bits: f64,
    freq: f64,
    window: f64,
    model: &ThrottleModel,
    task: &TaskSpec,
    samples: usize,
    rng: &mut R,
) -> f64 {
    let cycles = bits * task.cycles_per_bit;
    let hits = (0..samples)
        .filter(|_| {
            let xi = model.sample(rng);
            cycles <= (1.0 - xi) * freq * window
        })
        .count();
    hits as f64 / samples as f64
}
