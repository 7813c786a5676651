//! System model: task, radio and device parameters, the decision vector, and
//! the energy, timing and feasibility evaluations built on them.
//!
//! Device index 0 is always the active device; offloading devices are
//! `1..=J`. Power and upload-time vectors are indexed by `j - 1`.
//! All quantities are SI base units.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::uncertainty::{
    deterministic_margin_local, deterministic_margin_offload, ChanceConstants, Reliability,
    ThrottleModel,
};

/// Default relative tolerance for the equality constraints.
pub const DEFAULT_TOLERANCE: f64 = 1e-6;

fn check_positive(name: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!("{name} must be positive, got {v}")))
    }
}

/// The computation task `(b, c, t_max)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    /// Task size, bits.
    pub bits: f64,
    /// CPU cycles per bit.
    pub cycles_per_bit: f64,
    /// Completion deadline, seconds.
    pub deadline: f64,
}

impl TaskSpec {
    pub fn new(bits: f64, cycles_per_bit: f64, deadline: f64) -> Result<Self> {
        check_positive("task size", bits)?;
        check_positive("cycles per bit", cycles_per_bit)?;
        check_positive("deadline", deadline)?;
        Ok(TaskSpec {
            bits,
            cycles_per_bit,
            deadline,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RadioParams {
    /// Channel bandwidth, Hz.
    pub bandwidth: f64,
    /// Noise power, W.
    pub noise_power: f64,
    /// Total transmit power budget of the active device, W.
    pub power_budget: f64,
}

impl RadioParams {
    pub fn new(bandwidth: f64, noise_power: f64, power_budget: f64) -> Result<Self> {
        check_positive("bandwidth", bandwidth)?;
        check_positive("noise power", noise_power)?;
        if !(power_budget.is_finite() && power_budget >= 0.0) {
            return Err(Error::invalid(format!(
                "power budget must be nonnegative, got {power_budget}"
            )));
        }
        Ok(RadioParams {
            bandwidth,
            noise_power,
            power_budget,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceCaps {
    /// Maximum CPU frequency per device, Hz.
    pub f_max: Vec<f64>,
    /// Effective switched capacitance, W s^3.
    pub kappa: f64,
}

impl DeviceCaps {
    pub fn new(f_max: Vec<f64>, kappa: f64) -> Result<Self> {
        for (i, &f) in f_max.iter().enumerate() {
            check_positive(&format!("f_max[{i}]"), f)?;
        }
        check_positive("kappa", kappa)?;
        Ok(DeviceCaps { f_max, kappa })
    }
}

/// One problem instance: an active device plus `J` offloading devices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub task: TaskSpec,
    pub radio: RadioParams,
    pub caps: DeviceCaps,
    /// Linear power gain of each side-link, length `J`.
    pub gains: Vec<f64>,
    /// Throttle law per device, length `J + 1`.
    pub throttle: Vec<ThrottleModel>,
    /// Device coordinates in meters, length `J + 1`; diagnostic only.
    pub positions: Vec<[f64; 2]>,
}

impl Scenario {
    pub fn new(
        task: TaskSpec,
        radio: RadioParams,
        caps: DeviceCaps,
        gains: Vec<f64>,
        throttle: Vec<ThrottleModel>,
        positions: Vec<[f64; 2]>,
    ) -> Result<Self> {
        let s = Scenario {
            task,
            radio,
            caps,
            gains,
            throttle,
            positions,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let devices = self.gains.len() + 1;
        if self.caps.f_max.len() != devices
            || self.throttle.len() != devices
            || self.positions.len() != devices
        {
            return Err(Error::invalid(format!(
                "scenario with {} gains needs {devices} caps, throttle laws and positions",
                self.gains.len()
            )));
        }
        for (j, &g) in self.gains.iter().enumerate() {
            check_positive(&format!("gain[{}]", j + 1), g)?;
        }
        Ok(())
    }

    /// Number of offloading devices `J`.
    pub fn offload_count(&self) -> usize {
        self.gains.len()
    }

    /// Achievable rate to offloading device `j` (1-based) at power `p`.
    pub fn rate(&self, j: usize, p: f64) -> Result<f64> {
        rate(p, self.gains[j - 1], &self.radio)
    }

    /// Same scenario with the offloading devices listed in `order` (1-based),
    /// used to check index-permutation invariance.
    pub fn permuted(&self, order: &[usize]) -> Scenario {
        let mut s = self.clone();
        s.gains = order.iter().map(|&j| self.gains[j - 1]).collect();
        for (k, &j) in order.iter().enumerate() {
            s.caps.f_max[k + 1] = self.caps.f_max[j];
            s.throttle[k + 1] = self.throttle[j];
            s.positions[k + 1] = self.positions[j];
        }
        s
    }

    #[cfg(test)]
    pub(crate) fn single_for_tests(task: TaskSpec, throttle: ThrottleModel) -> Scenario {
        Scenario::new(
            task,
            RadioParams::new(1e7, 3.981e-15, 0.2).unwrap(),
            DeviceCaps::new(vec![1e10, 1e8], 1e-24).unwrap(),
            vec![1e-7],
            vec![throttle; 2],
            vec![[0.0, 0.0], [10.0, 0.0]],
        )
        .unwrap()
    }
}

/// Shannon rate `W log2(1 + P G / N0)` in bits per second.
pub fn rate(power: f64, gain: f64, radio: &RadioParams) -> Result<f64> {
    if !(power.is_finite() && gain.is_finite()) {
        return Err(Error::invalid(format!(
            "rate needs finite power and gain, got P={power}, G={gain}"
        )));
    }
    if power < 0.0 || gain <= 0.0 {
        return Err(Error::invalid(format!(
            "rate needs P >= 0 and G > 0, got P={power}, G={gain}"
        )));
    }
    Ok(radio.bandwidth * (power * gain / radio.noise_power).ln_1p() / std::f64::consts::LN_2)
}

/// The decision vector: powers, task portions, frequencies and upload times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Allocation {
    /// Transmit power towards each offloading device, W, length `J`.
    pub power: Vec<f64>,
    /// Task portion per device, bits, length `J + 1` (entry 0 is local).
    pub bits: Vec<f64>,
    /// Allocated CPU frequency per device, Hz, length `J + 1`.
    pub freq: Vec<f64>,
    /// Upload time towards each offloading device, s, length `J`.
    pub t_up: Vec<f64>,
}

impl Allocation {
    pub fn zeros(offload_count: usize) -> Self {
        Allocation {
            power: vec![0.0; offload_count],
            bits: vec![0.0; offload_count + 1],
            freq: vec![0.0; offload_count + 1],
            t_up: vec![0.0; offload_count],
        }
    }

    pub fn offload_count(&self) -> usize {
        self.power.len()
    }

    fn check_shape(&self, s: &Scenario) -> Result<()> {
        let j = s.offload_count();
        if self.power.len() != j
            || self.t_up.len() != j
            || self.bits.len() != j + 1
            || self.freq.len() != j + 1
        {
            return Err(Error::invalid(format!(
                "allocation shape does not match a scenario with {j} offloading devices"
            )));
        }
        Ok(())
    }

    /// Sets every upload time to `b_j / R_j(P_j)`, leaving `t_up = 0` for empty portions.
    pub fn sync_upload_times(&mut self, s: &Scenario) -> Result<()> {
        for j in 1..=s.offload_count() {
            let bits = self.bits[j];
            self.t_up[j - 1] = if bits > 0.0 {
                let r = s.rate(j, self.power[j - 1])?;
                if r <= 0.0 {
                    return Err(Error::ZeroRate { device: j, bits });
                }
                bits / r
            } else {
                0.0
            };
        }
        Ok(())
    }
}

/// Total upload energy `sum_j P_j b_j / R_j`; empty portions cost nothing.
pub fn upload_energy(a: &Allocation, s: &Scenario) -> Result<f64> {
    a.check_shape(s)?;
    let mut total = 0.0;
    for j in 1..=s.offload_count() {
        let bits = a.bits[j];
        if bits <= 0.0 {
            continue;
        }
        let p = a.power[j - 1];
        let r = s.rate(j, p)?;
        if r <= 0.0 {
            return Err(Error::ZeroRate { device: j, bits });
        }
        total += p * bits / r;
    }
    Ok(total)
}

fn computation_energy(a: &Allocation, s: &Scenario, weight: impl Fn(usize) -> f64) -> f64 {
    let kc = s.caps.kappa * s.task.cycles_per_bit;
    (0..=s.offload_count())
        .map(|i| kc * weight(i) * a.bits[i] * a.freq[i] * a.freq[i])
        .sum()
}

/// Expected total energy over the throttle laws, in joules.
pub fn expected_total_energy(a: &Allocation, s: &Scenario) -> Result<f64> {
    let upload = upload_energy(a, s)?;
    Ok(upload + computation_energy(a, s, |i| s.throttle[i].eta()))
}

/// Expected energy with every device's second moment forced to `eta`.
pub fn energy_with_uniform_eta(a: &Allocation, s: &Scenario, eta: f64) -> Result<f64> {
    let upload = upload_energy(a, s)?;
    Ok(upload + computation_energy(a, s, |_| eta))
}

/// Energy actually spent when device `i` runs at `(1 - xi[i]) f_i`.
pub fn realized_energy(a: &Allocation, s: &Scenario, xi: &[f64]) -> Result<f64> {
    check_throttle_sample(s, xi)?;
    let upload = upload_energy(a, s)?;
    Ok(upload + computation_energy(a, s, |i| (1.0 - xi[i]) * (1.0 - xi[i])))
}

fn check_throttle_sample(s: &Scenario, xi: &[f64]) -> Result<()> {
    if xi.len() != s.offload_count() + 1 {
        return Err(Error::invalid("throttle sample length differs from device count"));
    }
    if let Some(x) = xi.iter().find(|x| !(0.0..=1.0).contains(*x)) {
        return Err(Error::invalid(format!("throttle fraction {x} outside [0, 1]")));
    }
    Ok(())
}

/// Computation time of each device under the throttle sample `xi`.
pub fn completion_times(a: &Allocation, s: &Scenario, xi: &[f64]) -> Result<Vec<f64>> {
    a.check_shape(s)?;
    check_throttle_sample(s, xi)?;
    (0..=s.offload_count())
        .map(|i| {
            let bits = a.bits[i];
            if bits <= 0.0 {
                return Ok(0.0);
            }
            let actual = (1.0 - xi[i]) * a.freq[i];
            if actual <= 0.0 {
                return Err(Error::ZeroFrequency { device: i, bits });
            }
            Ok(bits * s.task.cycles_per_bit / actual)
        })
        .collect()
}

/// Outcome of checking an allocation against every constraint of the problem.
///
/// Each flag is true exactly when its normalized violation is within the
/// tolerance, so all flags hold iff `worst_violation <= tolerance`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeasibilityReport {
    pub tolerance: f64,
    pub power_ok: bool,
    pub partition_ok: bool,
    /// Deterministic deadline margins per device.
    pub deadline_ok: Vec<bool>,
    /// `b_j = R_j t_up_j` per offloading device.
    pub coupling_ok: Vec<bool>,
    /// `f_i <= f_max_i` per device.
    pub caps_ok: Vec<bool>,
    pub nonnegative_ok: bool,
    pub worst_violation: f64,
}

impl FeasibilityReport {
    pub fn is_feasible(&self) -> bool {
        self.power_ok
            && self.partition_ok
            && self.nonnegative_ok
            && self.deadline_ok.iter().all(|&x| x)
            && self.coupling_ok.iter().all(|&x| x)
            && self.caps_ok.iter().all(|&x| x)
    }
}

/// Checks the power budget, partition, deadline (via deterministic margins),
/// rate coupling, frequency caps and sign constraints. Never fails on an
/// infeasible allocation; a shape mismatch is reported as infinite violation.
pub fn check_feasibility(
    a: &Allocation,
    s: &Scenario,
    gamma: Reliability,
    tol: f64,
) -> FeasibilityReport {
    let devices = s.offload_count() + 1;
    if a.check_shape(s).is_err() {
        return FeasibilityReport {
            tolerance: tol,
            power_ok: false,
            partition_ok: false,
            deadline_ok: vec![false; devices],
            coupling_ok: vec![false; devices - 1],
            caps_ok: vec![false; devices],
            nonnegative_ok: false,
            worst_violation: f64::INFINITY,
        };
    }
    let chance = ChanceConstants::new(s, gamma);
    let task = &s.task;
    let mut worst = 0.0f64;
    let mut flag = |v: f64| {
        let v = if v.is_nan() { f64::INFINITY } else { v.max(0.0) };
        worst = worst.max(v);
        v <= tol
    };

    let power_scale = if s.radio.power_budget > 0.0 { s.radio.power_budget } else { 1.0 };
    let power_sum: f64 = a.power.iter().sum();
    let power_ok = flag((power_sum - s.radio.power_budget) / power_scale);

    let bits_sum: f64 = a.bits.iter().sum();
    let partition_ok = flag((bits_sum - task.bits).abs() / task.bits);

    let mut deadline_ok = Vec::with_capacity(devices);
    deadline_ok.push(flag(-deterministic_margin_local(
        a.bits[0], a.freq[0], &chance, task,
    )));
    for j in 1..devices {
        let m = deterministic_margin_offload(
            j,
            a.bits[j],
            a.freq[j],
            a.t_up[j - 1],
            &chance,
            task,
        )
        .unwrap_or(f64::NEG_INFINITY);
        deadline_ok.push(flag(-m));
    }

    let coupling_ok = (1..devices)
        .map(|j| {
            let carried = match s.rate(j, a.power[j - 1].max(0.0)) {
                Ok(r) => r * a.t_up[j - 1],
                Err(_) => f64::NAN,
            };
            flag((a.bits[j] - carried).abs() / task.bits)
        })
        .collect();

    let caps_ok = (0..devices)
        .map(|i| flag((a.freq[i] - s.caps.f_max[i]) / s.caps.f_max[i]))
        .collect();

    let mut neg = 0.0f64;
    for &p in &a.power {
        neg = neg.max(-p / power_scale);
    }
    for &b in &a.bits {
        neg = neg.max(-b / task.bits);
    }
    for (i, &f) in a.freq.iter().enumerate() {
        neg = neg.max(-f / s.caps.f_max[i]);
    }
    for &t in &a.t_up {
        neg = neg.max(-t / task.deadline);
    }
    let nonnegative_ok = flag(neg);

    FeasibilityReport {
        tolerance: tol,
        power_ok,
        partition_ok,
        deadline_ok,
        coupling_ok,
        caps_ok,
        nonnegative_ok,
        worst_violation: worst,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const N0: f64 = 3.981e-15;

    fn radio() -> RadioParams {
        RadioParams::new(1e7, N0, 0.2).unwrap()
    }

    fn u01() -> ThrottleModel {
        ThrottleModel::uniform(0.0, 0.1).unwrap()
    }

    fn local_only(bits: f64, deadline: f64) -> Scenario {
        Scenario::new(
            TaskSpec::new(bits, 1500.0, deadline).unwrap(),
            radio(),
            DeviceCaps::new(vec![1e10], 1e-24).unwrap(),
            vec![],
            vec![u01()],
            vec![[0.0, 0.0]],
        )
        .unwrap()
    }

    fn three_devices() -> Scenario {
        Scenario::new(
            TaskSpec::new(3e5, 1500.0, 1.0).unwrap(),
            radio(),
            DeviceCaps::new(vec![1e10, 6e7, 8e7, 5e7], 1e-24).unwrap(),
            vec![2e-7, 5e-8, 1.1e-7],
            vec![
                u01(),
                u01(),
                ThrottleModel::uniform(0.0, 0.2).unwrap(),
                ThrottleModel::uniform(0.05, 0.1).unwrap(),
            ],
            vec![[0.0, 0.0], [3.0, 4.0], [-8.0, 1.0], [0.0, -12.0]],
        )
        .unwrap()
    }

    fn sample_allocation(s: &Scenario) -> Allocation {
        let mut a = Allocation {
            power: vec![0.05, 0.07, 0.06],
            bits: vec![1.5e5, 6e4, 5e4, 4e4],
            freq: vec![3e8, 5e7, 7e7, 4e7],
            t_up: vec![0.0; 3],
        };
        a.sync_upload_times(s).unwrap();
        a
    }

    #[test]
    fn rate_examples() {
        assert_eq!(rate(0.0, 1e-7, &radio()).unwrap(), 0.0);
        let r = rate(0.2, 10f64.powf(-7.504), &radio()).unwrap();
        assert!((r - 2.058_611_494_946_772e8).abs() / r < 1e-10);
        let unit_snr = rate(N0 / 1e-7, 1e-7, &radio()).unwrap();
        assert!((unit_snr - 1e7).abs() < 1e-6);
        assert!(rate(f64::NAN, 1e-7, &radio()).is_err());
        assert!(rate(0.1, f64::INFINITY, &radio()).is_err());
        assert!(rate(-0.1, 1e-7, &radio()).is_err());
    }

    #[test]
    fn rate_increasing_and_concave() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let p = rng.random_range(1e-4..0.2);
            let g = 10f64.powf(rng.random_range(-10.0..-6.0));
            let h = 1e-4 * p;
            let r = |x: f64| rate(x, g, &radio()).unwrap();
            let d1 = (r(p + h) - r(p - h)) / (2.0 * h);
            let d2 = (r(p + h) - 2.0 * r(p) + r(p - h)) / (h * h);
            assert!(d1 > 0.0);
            assert!(d2 < 1e-6 * d1 / p, "second difference {d2} at p={p}");
        }
    }

    #[test]
    fn empty_task_costs_nothing() {
        let s = three_devices();
        let a = Allocation::zeros(3);
        assert_eq!(expected_total_energy(&a, &s).unwrap(), 0.0);
    }

    #[test]
    fn local_energy_example() {
        let s = local_only(2e5, 1.0);
        let mut a = Allocation::zeros(0);
        a.bits[0] = 2e5;
        a.freq[0] = 3.3149e8;
        let e = expected_total_energy(&a, &s).unwrap();
        let expected = 1e-24 * 1500.0 * 2e5 * 3.3149e8f64.powi(2) * 0.903_333_333_333_333_3;
        assert!((e - expected).abs() / expected < 1e-14);
        assert!((e - 29.78).abs() < 0.01);
    }

    #[test]
    fn single_upload_term() {
        let s = Scenario::single_for_tests(TaskSpec::new(1e5, 1500.0, 1.0).unwrap(), u01());
        // pick the gain that gives exactly R = 1e8 at P = 0.1
        let mut s = s;
        s.gains[0] = (2f64.powf(10.0) - 1.0) * N0 / 0.1;
        let a = Allocation {
            power: vec![0.1],
            bits: vec![0.0, 1e5],
            freq: vec![0.0, 0.0],
            t_up: vec![1e-3],
        };
        assert!((s.rate(1, 0.1).unwrap() - 1e8).abs() < 1e-4);
        let e = expected_total_energy(&a, &s).unwrap();
        assert!((e - 1e-4).abs() < 1e-15);
    }

    #[test]
    fn zero_rate_with_bits_is_an_error() {
        let s = Scenario::single_for_tests(TaskSpec::new(1e5, 1500.0, 1.0).unwrap(), u01());
        let a = Allocation {
            power: vec![0.0],
            bits: vec![5e4, 5e4],
            freq: vec![1e8, 1e8],
            t_up: vec![0.0],
        };
        assert!(matches!(
            expected_total_energy(&a, &s),
            Err(Error::ZeroRate { device: 1, .. })
        ));
        let empty = Allocation {
            bits: vec![1e5, 0.0],
            ..a
        };
        assert!(expected_total_energy(&empty, &s).is_ok());
    }

    #[test]
    fn realized_energy_extremes() {
        let s = three_devices();
        let a = sample_allocation(&s);
        let zero = realized_energy(&a, &s, &[0.0; 4]).unwrap();
        let ideal = energy_with_uniform_eta(&a, &s, 1.0).unwrap();
        assert!((zero - ideal).abs() <= 1e-14 * ideal);
        let stalled = realized_energy(&a, &s, &[1.0; 4]).unwrap();
        assert!((stalled - upload_energy(&a, &s).unwrap()).abs() < 1e-18);
        assert!(realized_energy(&a, &s, &[0.0, 1.2, 0.0, 0.0]).is_err());
    }

    #[test]
    fn realized_energy_averages_to_expected() {
        let s = three_devices();
        let a = sample_allocation(&s);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 1_000_000;
        let mut xi = [0.0; 4];
        let mut sum = 0.0;
        for _ in 0..n {
            for (i, m) in s.throttle.iter().enumerate() {
                xi[i] = m.sample(&mut rng);
            }
            sum += realized_energy(&a, &s, &xi).unwrap();
        }
        let expected = expected_total_energy(&a, &s).unwrap();
        assert!(((sum / n as f64) - expected).abs() / expected < 5e-3);
    }

    #[test]
    fn completion_time_examples() {
        let s = local_only(2e5, 1.0);
        let mut a = Allocation::zeros(0);
        assert_eq!(completion_times(&a, &s, &[0.3]).unwrap()[0], 0.0);
        a.bits[0] = 2e5;
        a.freq[0] = 3e8 / 0.905;
        let t = completion_times(&a, &s, &[0.095]).unwrap()[0];
        assert!((t - 1.0).abs() < 1e-12);
        let fast = completion_times(&a, &s, &[0.0]).unwrap()[0];
        let slow = completion_times(&a, &s, &[0.5]).unwrap()[0];
        assert!((slow - 2.0 * fast).abs() < 1e-12);
        a.freq[0] = 0.0;
        assert!(matches!(
            completion_times(&a, &s, &[0.0]),
            Err(Error::ZeroFrequency { device: 0, .. })
        ));
    }

    #[test]
    fn energy_invariant_under_device_permutation() {
        let s = three_devices();
        let a = sample_allocation(&s);
        let order = [3, 1, 2];
        let ps = s.permuted(&order);
        let pa = Allocation {
            power: order.iter().map(|&j| a.power[j - 1]).collect(),
            bits: std::iter::once(a.bits[0])
                .chain(order.iter().map(|&j| a.bits[j]))
                .collect(),
            freq: std::iter::once(a.freq[0])
                .chain(order.iter().map(|&j| a.freq[j]))
                .collect(),
            t_up: order.iter().map(|&j| a.t_up[j - 1]).collect(),
        };
        let e = expected_total_energy(&a, &s).unwrap();
        let pe = expected_total_energy(&pa, &ps).unwrap();
        assert!((e - pe).abs() <= 1e-13 * e);
    }

    #[test]
    fn energy_strictly_increasing_in_frequency() {
        let s = three_devices();
        let a = sample_allocation(&s);
        let base = expected_total_energy(&a, &s).unwrap();
        for i in 0..4 {
            let mut b = a.clone();
            b.freq[i] *= 1.001;
            assert!(expected_total_energy(&b, &s).unwrap() > base);
        }
    }

    #[test]
    fn zero_allocation_breaks_partition() {
        let s = three_devices();
        let r = check_feasibility(
            &Allocation::zeros(3),
            &s,
            Reliability::new(0.95).unwrap(),
            DEFAULT_TOLERANCE,
        );
        assert!(!r.partition_ok);
        assert!(!r.is_feasible());
        assert!(r.worst_violation > r.tolerance);
    }

    #[test]
    fn feasible_allocation_passes() {
        let s = three_devices();
        let gamma = Reliability::new(0.95).unwrap();
        let k = ChanceConstants::new(&s, gamma);
        let mut a = sample_allocation(&s);
        a.bits = vec![1.5e5, 6e4, 5e4, 4e4];
        a.sync_upload_times(&s).unwrap();
        a.freq[0] = k.min_frequency(0, a.bits[0], 1.0, &s.task);
        for j in 1..=3 {
            a.freq[j] = k.min_frequency(j, a.bits[j], 1.0 - a.t_up[j - 1], &s.task);
        }
        // caps of this scenario are too tight for these portions
        let r = check_feasibility(&a, &s, gamma, DEFAULT_TOLERANCE);
        assert!(r.deadline_ok.iter().all(|&x| x));
        assert!(r.coupling_ok.iter().all(|&x| x));
        assert!(!r.caps_ok[1]);
        let mut roomy = s.clone();
        roomy.caps.f_max = vec![1e10, 1e9, 1e9, 1e9];
        let r = check_feasibility(&a, &roomy, gamma, DEFAULT_TOLERANCE);
        assert!(r.is_feasible(), "{r:?}");
        assert!(r.worst_violation <= r.tolerance);
    }

    #[test]
    fn flags_agree_with_worst_violation() {
        let s = three_devices();
        let gamma = Reliability::new(0.95).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..200 {
            let mut a = Allocation {
                power: (0..3).map(|_| rng.random_range(0.0..0.1)).collect(),
                bits: (0..4).map(|_| rng.random_range(0.0..1e5)).collect(),
                freq: (0..4).map(|_| rng.random_range(1e6..1e9)).collect(),
                t_up: vec![0.0; 3],
            };
            a.sync_upload_times(&s).unwrap();
            let r = check_feasibility(&a, &s, gamma, 1e-3);
            assert_eq!(r.is_feasible(), r.worst_violation <= r.tolerance);
            assert!(r.worst_violation >= 0.0);
        }
    }

    #[test]
    fn below_threshold_frequency_misses_deadline_empirically() {
        use crate::uncertainty::empirical_success;
        let s = local_only(2e5, 1.0);
        let gamma = Reliability::new(0.95).unwrap();
        let k = ChanceConstants::new(&s, gamma);
        let f_eq = k.min_frequency(0, 2e5, 1.0, &s.task);
        let mut a = Allocation::zeros(0);
        a.bits[0] = 2e5;
        a.freq[0] = 0.99 * f_eq;
        let r = check_feasibility(&a, &s, gamma, DEFAULT_TOLERANCE);
        assert!(!r.deadline_ok[0]);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = empirical_success(2e5, a.freq[0], 1.0, &s.throttle[0], &s.task, 100_000, &mut rng);
        assert!(p < 0.95, "empirical success {p}");
    }
}
