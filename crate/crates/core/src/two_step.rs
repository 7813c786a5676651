//! The two-step method: a convex power/partition problem (P2) whose solution
//! fixes the upload times, followed by the closed-form frequency assignment
//! (P3) that puts every portion exactly on its chance-constraint boundary.
//! Devices whose frequency would exceed their cap are clamped and their
//! portion shrunk to what the cap can finish; the rest is re-solved.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{self, check_feasibility, expected_total_energy, Allocation, Scenario};
use crate::report::{Method, SolveReport, SolveStatus};
use crate::solver::{self, Affine, ConvexProgram, SmoothFn, SolverOptions};
use crate::uncertainty::{ChanceConstants, Reliability};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TwoStepParams {
    /// Upload-time budget as a fraction of the deadline.
    pub alpha: f64,
    pub gamma: Reliability,
    pub feasibility_tol: f64,
    pub solver: SolverOptions,
}

impl TwoStepParams {
    pub fn new(alpha: f64, gamma: Reliability) -> Self {
        TwoStepParams {
            alpha,
            gamma,
            feasibility_tol: model::DEFAULT_TOLERANCE,
            solver: SolverOptions::default(),
        }
    }
}

/// One clamp of an offloading device to its CPU cap.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepairEvent {
    pub device: usize,
    /// Frequency P3 asked for before clamping, Hz.
    pub f_star: f64,
    /// Portion the device keeps at its cap, bits.
    pub b_plus: f64,
    /// Bits left for the re-solve.
    pub remaining_b: f64,
    /// Power budget left for the re-solve, W.
    pub remaining_pmax: f64,
}

/// Power and partition returned by [`solve_p2`], indexed like the scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct P2Solution {
    /// Power per offloading device; zero outside the active set.
    pub power: Vec<f64>,
    /// Bits per device, entry 0 local; zero outside the active set.
    pub bits: Vec<f64>,
    /// Value of the P2 objective, J.
    pub objective: f64,
}

/// The scaled P2 objective over `[p_hat (active), b0_hat, b_hat (active)]`.
struct P2Objective<'a> {
    s: &'a Scenario,
    active: &'a [usize],
    pmax: f64,
    b_cur: f64,
}

impl P2Objective<'_> {
    fn k(&self) -> usize {
        self.active.len()
    }

    /// Rate of active slot `a` and its derivative in `p_hat`.
    fn rate(&self, a: usize, p_hat: f64) -> (f64, f64) {
        rate_and_slope(self.s, self.active[a], p_hat, self.pmax)
    }
}

fn rate_and_slope(s: &Scenario, j: usize, p_hat: f64, pmax: f64) -> (f64, f64) {
    let radio = &s.radio;
    let snr_per_watt = s.gains[j - 1] / radio.noise_power;
    let x = p_hat * pmax * snr_per_watt;
    let r = radio.bandwidth * x.ln_1p() / std::f64::consts::LN_2;
    let dr = radio.bandwidth * pmax * snr_per_watt / ((1.0 + x) * std::f64::consts::LN_2);
    (r, dr)
}

impl SmoothFn for P2Objective<'_> {
    fn eval(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        let k = self.k();
        let t = self.s.task.deadline;
        grad.fill(0.0);
        let b0 = x[k];
        let mut v = b0 * b0 * b0;
        grad[k] = 3.0 * b0 * b0;
        for a in 0..k {
            let b = x[k + 1 + a];
            let (r, dr) = self.rate(a, x[a]);
            let coef = self.b_cur / (r * t);
            let u = coef * b;
            let d = 1.0 - u;
            let b3 = b * b * b;
            v += b3 / (d * d);
            let common = 2.0 * b3 / (d * d * d);
            grad[k + 1 + a] = 3.0 * b * b / (d * d) + common * coef;
            grad[a] = common * (-u / r * dr);
        }
        v
    }
}

/// `b_hat_j - alpha R_j(P) t / b_cur <= 0`.
struct UploadBudget<'a> {
    s: &'a Scenario,
    j: usize,
    p_index: usize,
    b_index: usize,
    pmax: f64,
    b_cur: f64,
    alpha: f64,
}

impl SmoothFn for UploadBudget<'_> {
    fn eval(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        let (r, dr) = rate_and_slope(self.s, self.j, x[self.p_index], self.pmax);
        let scale = self.alpha * self.s.task.deadline / self.b_cur;
        grad.fill(0.0);
        grad[self.b_index] = 1.0;
        grad[self.p_index] = -scale * dr;
        x[self.b_index] - scale * r
    }
}

/// Convex power/partition problem over the `active` devices with power
/// budget `pmax_current` and `b_current` bits to place.
pub fn solve_p2(
    s: &Scenario,
    alpha: f64,
    pmax_current: f64,
    b_current: f64,
    active: &[usize],
    opts: &SolverOptions,
) -> Result<P2Solution> {
    let jn = s.offload_count();
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::invalid(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    if active.iter().any(|&j| j == 0 || j > jn) {
        return Err(Error::invalid("active set holds an unknown device"));
    }
    let mut out = P2Solution {
        power: vec![0.0; jn],
        bits: vec![0.0; jn + 1],
        objective: 0.0,
    };
    let t = s.task.deadline;
    let scale = s.caps.kappa * (b_current * s.task.cycles_per_bit).powi(3) / (t * t);
    if b_current <= 0.0 {
        return Ok(out);
    }
    // a vanishing leftover power budget cannot carry any bits
    if active.is_empty() || pmax_current <= 1e-12 * s.radio.power_budget {
        out.bits[0] = b_current;
        out.objective = scale;
        return Ok(out);
    }

    let k = active.len();
    let n = 2 * k + 1;
    let objective = P2Objective {
        s,
        active,
        pmax: pmax_current,
        b_cur: b_current,
    };
    let mut prog = ConvexProgram::new(n, objective);
    let mut power_row = vec![0.0; n];
    power_row[..k].fill(1.0);
    prog = prog.inequality(Affine::new(power_row, 1.0));
    for (a, &j) in active.iter().enumerate() {
        prog = prog.inequality(UploadBudget {
            s,
            j,
            p_index: a,
            b_index: k + 1 + a,
            pmax: pmax_current,
            b_cur: b_current,
            alpha,
        });
    }
    let mut eq = vec![0.0; n];
    eq[k..].fill(1.0);
    prog = prog.equality(eq, 1.0);
    let mut upper = vec![f64::INFINITY; n];
    upper[..k].fill(1.0);
    prog = prog.bounds(vec![0.0; n], upper);

    // equal power; portions proportional to the rates, well inside the budget
    let mut x0 = vec![0.0; n];
    let p0 = (1.0 - 1e-3) / k as f64;
    let rates: Vec<f64> = (0..k)
        .map(|a| rate_and_slope(s, active[a], p0, pmax_current).0)
        .collect();
    let total_rate: f64 = rates.iter().sum();
    let theta = (0.5 * alpha * t).min(b_current / (2.0 * total_rate));
    for a in 0..k {
        x0[a] = p0;
        x0[k + 1 + a] = theta * rates[a] / b_current;
    }
    x0[k] = 1.0 - x0[k + 1..].iter().sum::<f64>();

    let res = solver::minimize(&prog, &x0, opts)?;
    if res.status != solver::SolverStatus::Converged {
        log::debug!(
            "P2 solve ended {:?} with KKT residual {:.3e}",
            res.status,
            res.kkt_residual
        );
    }
    for (a, &j) in active.iter().enumerate() {
        out.power[j - 1] = res.x[a].clamp(0.0, 1.0) * pmax_current;
        out.bits[j] = res.x[k + 1 + a].max(0.0) * b_current;
    }
    let placed: f64 = active.iter().map(|&j| out.bits[j]).sum();
    out.bits[0] = (b_current - placed).max(0.0);
    out.objective = res.obj * scale;
    Ok(out)
}

/// Frequencies putting every positive portion exactly on its deadline
/// boundary; `t_up` is indexed by offloading device.
pub fn solve_p3(s: &Scenario, bits: &[f64], t_up: &[f64], chance: &ChanceConstants) -> Result<Vec<f64>> {
    let task = &s.task;
    let mut f = Vec::with_capacity(bits.len());
    f.push(chance.min_frequency(0, bits[0], task.deadline, task));
    for j in 1..bits.len() {
        let window = task.deadline - t_up[j - 1];
        if bits[j] > 0.0 && window <= 0.0 {
            return Err(Error::UploadTooLong {
                device: j,
                t_up: t_up[j - 1],
                deadline: task.deadline,
            });
        }
        f.push(chance.min_frequency(j, bits[j], window, task));
    }
    Ok(f)
}

/// Largest portion device `j` finishes in time at its cap when it uploads at
/// rate `rate_j`.
pub fn repair_portion(j: usize, s: &Scenario, rate_j: f64, chance: &ChanceConstants) -> f64 {
    if rate_j <= 0.0 {
        return 0.0;
    }
    let f = s.caps.f_max[j];
    let u = chance.usable_fraction(j);
    let c = s.task.cycles_per_bit;
    f * rate_j * s.task.deadline * u / (rate_j * c + f * u)
}

/// Everything computed on the active device at the smallest chance-feasible
/// frequency.
pub fn local_baseline(s: &Scenario, gamma: Reliability) -> Result<SolveReport> {
    let started = Instant::now();
    s.validate()?;
    let chance = ChanceConstants::new(s, gamma);
    let mut a = Allocation::zeros(s.offload_count());
    a.bits[0] = s.task.bits;
    a.freq[0] = chance.min_frequency(0, s.task.bits, s.task.deadline, &s.task);
    if a.freq[0] > s.caps.f_max[0] {
        return Err(Error::ActiveCapExceeded {
            required: a.freq[0],
            cap: s.caps.f_max[0],
        });
    }
    let energy = expected_total_energy(&a, s)?;
    Ok(SolveReport {
        method: Method::Local,
        feasibility: check_feasibility(&a, s, gamma, model::DEFAULT_TOLERANCE),
        allocation: a,
        expected_energy: energy,
        iterations: 1,
        status: SolveStatus::Converged,
        wall_time: started.elapsed().as_secs_f64(),
        trace: None,
        repairs: Vec::new(),
    })
}

/// P2, P3 and the cap-repair loop.
pub fn solve_two_step(s: &Scenario, params: &TwoStepParams) -> Result<SolveReport> {
    let started = Instant::now();
    s.validate()?;
    let jn = s.offload_count();
    let chance = ChanceConstants::new(s, params.gamma);
    let task = &s.task;

    let mut active: Vec<usize> = (1..=jn).collect();
    let mut b_cur = task.bits;
    let mut pmax_cur = s.radio.power_budget;
    let mut alloc = Allocation::zeros(jn);
    let mut repairs = Vec::new();
    let mut solves = 0;

    let (sol, rates) = loop {
        let sol = solve_p2(s, params.alpha, pmax_cur, b_cur, &active, &params.solver)?;
        solves += 1;
        let mut rates = vec![0.0; jn + 1];
        let mut t_up = vec![0.0; jn];
        for &j in &active {
            if sol.bits[j] > 0.0 {
                rates[j] = s.rate(j, sol.power[j - 1])?;
                if rates[j] <= 0.0 {
                    return Err(Error::ZeroRate { device: j, bits: sol.bits[j] });
                }
                t_up[j - 1] = sol.bits[j] / rates[j];
            }
        }
        let f = solve_p3(s, &sol.bits, &t_up, &chance)?;

        // worst cap violation among the active devices
        let worst = active
            .iter()
            .copied()
            .filter(|&j| f[j] > s.caps.f_max[j])
            .map(|j| (j, f[j] / s.caps.f_max[j]))
            .fold(None, |best: Option<(usize, f64)>, cand| match best {
                Some(b) if b.1 >= cand.1 => Some(b),
                _ => Some(cand),
            });
        let Some((j, _)) = worst else {
            break (sol, rates);
        };
        assert!(repairs.len() < jn, "repair loop exceeded its bound");

        let b_plus = repair_portion(j, s, rates[j], &chance).min(sol.bits[j]);
        alloc.power[j - 1] = sol.power[j - 1];
        alloc.bits[j] = b_plus;
        alloc.freq[j] = s.caps.f_max[j];
        alloc.t_up[j - 1] = b_plus / rates[j];
        b_cur = (b_cur - b_plus).max(0.0);
        pmax_cur = (pmax_cur - sol.power[j - 1]).max(0.0);
        active.retain(|&a| a != j);
        log::debug!("clamped device {j}: f*={:.4e} Hz, keeps {b_plus:.4e} bits", f[j]);
        repairs.push(RepairEvent {
            device: j,
            f_star: f[j],
            b_plus,
            remaining_b: b_cur,
            remaining_pmax: pmax_cur,
        });
    };

    for &j in &active {
        alloc.power[j - 1] = sol.power[j - 1];
        alloc.bits[j] = sol.bits[j];
        if sol.bits[j] > 0.0 {
            alloc.t_up[j - 1] = sol.bits[j] / rates[j];
            alloc.freq[j] =
                chance.min_frequency(j, sol.bits[j], task.deadline - alloc.t_up[j - 1], task);
        }
    }
    // exact partition: the active device absorbs rounding
    let offloaded: f64 = alloc.bits[1..].iter().sum();
    alloc.bits[0] = (task.bits - offloaded).max(0.0);
    alloc.freq[0] = chance.min_frequency(0, alloc.bits[0], task.deadline, task);
    if alloc.freq[0] > s.caps.f_max[0] {
        return Err(Error::ActiveCapExceeded {
            required: alloc.freq[0],
            cap: s.caps.f_max[0],
        });
    }

    let energy = expected_total_energy(&alloc, s)?;
    Ok(SolveReport {
        method: Method::TwoStep,
        feasibility: check_feasibility(&alloc, s, params.gamma, params.feasibility_tol),
        allocation: alloc,
        expected_energy: energy,
        iterations: solves,
        status: SolveStatus::Converged,
        wall_time: started.elapsed().as_secs_f64(),
        trace: None,
        repairs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{DeviceCaps, RadioParams, TaskSpec};
    use crate::uncertainty::{deterministic_margin_local, deterministic_margin_offload, ThrottleModel};

    fn gamma() -> Reliability {
        Reliability::new(0.95).unwrap()
    }

    fn scenario(bits: f64, deadline: f64, gains: Vec<f64>, f_max: Vec<f64>) -> Scenario {
        let n = gains.len() + 1;
        Scenario::new(
            TaskSpec::new(bits, 1500.0, deadline).unwrap(),
            RadioParams::new(1e7, 3.981_071_705_534_972e-15, 0.2).unwrap(),
            DeviceCaps::new(f_max, 1e-24).unwrap(),
            gains,
            vec![ThrottleModel::uniform(0.0, 0.1).unwrap(); n],
            (0..n).map(|i| [i as f64, 0.0]).collect(),
        )
        .unwrap()
    }

    #[test]
    fn local_baseline_examples() {
        let s = scenario(2e5, 1.0, vec![1e-8], vec![1e10, 1e8]);
        let r = local_baseline(&s, gamma()).unwrap();
        assert!((r.allocation.freq[0] - 3.314_917_127_071_823e8).abs() < 1e-3);
        assert!((r.expected_energy - 29.78).abs() < 0.01, "{}", r.expected_energy);
        assert!(r.is_feasible());
        let s4 = scenario(2e5, 0.4, vec![1e-8], vec![1e10, 1e8]);
        let r4 = local_baseline(&s4, gamma()).unwrap();
        assert!((r4.allocation.freq[0] / 8.2873e8 - 1.0).abs() < 1e-4);
        assert!((r4.expected_energy - 186.1).abs() < 0.1);
        let s2 = scenario(2e5, 2.0, vec![1e-8], vec![1e10, 1e8]);
        let r2 = local_baseline(&s2, gamma()).unwrap();
        assert!((r.expected_energy / r2.expected_energy - 4.0).abs() < 1e-12);
    }

    #[test]
    fn local_baseline_respects_cap() {
        let s = scenario(2e5, 0.4, vec![1e-8], vec![5e8, 1e8]);
        assert!(matches!(
            local_baseline(&s, gamma()),
            Err(Error::ActiveCapExceeded { .. })
        ));
    }

    #[test]
    fn p3_examples() {
        let s = scenario(2e5, 1.0, vec![1e-8], vec![1e10, 1e8]);
        let chance = ChanceConstants::new(&s, gamma());
        let f = solve_p3(&s, &[1e5, 1e5], &[0.2], &chance).unwrap();
        assert!((f[1] / 2.0718e8 - 1.0).abs() < 1e-4);
        let m = deterministic_margin_offload(1, 1e5, f[1], 0.2, &chance, &s.task).unwrap();
        assert!(m.abs() < 1e-12);
        assert!(deterministic_margin_local(1e5, f[0], &chance, &s.task).abs() < 1e-12);
        let f = solve_p3(&s, &[2e5, 0.0], &[0.0], &chance).unwrap();
        assert_eq!(f[1], 0.0);
        assert!(solve_p3(&s, &[1e5, 1e5], &[1.0], &chance).is_err());
    }

    #[test]
    fn repair_portion_example_sits_on_boundary() {
        let s = scenario(2e5, 1.0, vec![1e-8], vec![1e10, 5e7]);
        let chance = ChanceConstants::new(&s, gamma());
        let b = repair_portion(1, &s, 2e8, &chance);
        assert!((b / 3.0162e4 - 1.0).abs() < 1e-4, "{b}");
        let m = deterministic_margin_offload(1, b, 5e7, b / 2e8, &chance, &s.task).unwrap();
        assert!(m.abs() < 1e-12);
        assert_eq!(repair_portion(1, &s, 0.0, &chance), 0.0);
        let mut prev = 0.0;
        for cap in [1e6, 1e7, 1e8, 1e9, 1e10, 1e12] {
            let mut s2 = s.clone();
            s2.caps.f_max[1] = cap;
            let v = repair_portion(1, &s2, 2e8, &chance);
            assert!(v > prev && v < 2e8);
            prev = v;
        }
    }

    #[test]
    fn p2_empty_active_set_is_all_local() {
        let s = scenario(2e5, 1.0, vec![1e-8], vec![1e10, 1e8]);
        let sol = solve_p2(&s, 0.85, 0.2, 2e5, &[], &SolverOptions::default()).unwrap();
        assert_eq!(sol.bits, vec![2e5, 0.0]);
        assert_eq!(sol.power, vec![0.0]);
    }

    #[test]
    fn p2_symmetric_devices_split_evenly() {
        let s = scenario(2e5, 1.0, vec![3e-8, 3e-8], vec![1e10, 1e8, 1e8]);
        let sol = solve_p2(&s, 0.85, 0.2, 2e5, &[1, 2], &SolverOptions::default()).unwrap();
        assert!((sol.bits[1] / sol.bits[2] - 1.0).abs() < 1e-4, "{sol:?}");
        assert!((sol.power[0] / sol.power[1] - 1.0).abs() < 1e-4, "{sol:?}");
        // all-local is feasible for P2, so the optimum cannot be worse
        let all_local = 1e-24 * (2e5f64 * 1500.0).powi(3);
        assert!(sol.objective <= all_local);
    }

    #[test]
    fn generous_caps_need_no_repair() {
        let s = scenario(2e5, 1.0, vec![3e-8, 1e-8], vec![1e10, 1e12, 1e12]);
        let r = solve_two_step(&s, &TwoStepParams::new(0.85, gamma())).unwrap();
        assert!(r.repairs.is_empty());
        assert_eq!(r.iterations, 1);
        assert!(r.is_feasible(), "{:?}", r.feasibility);
    }

    #[test]
    fn tiny_cap_triggers_one_repair() {
        let s = scenario(2e5, 1.0, vec![3e-8, 3e-8], vec![1e10, 1e6, 1e12]);
        let r = solve_two_step(&s, &TwoStepParams::new(0.85, gamma())).unwrap();
        assert_eq!(r.repairs.len(), 1);
        assert_eq!(r.repairs[0].device, 1);
        let a = &r.allocation;
        assert_eq!(a.freq[1], 1e6);
        let chance = ChanceConstants::new(&s, gamma());
        let m = deterministic_margin_offload(1, a.bits[1], a.freq[1], a.t_up[0], &chance, &s.task)
            .unwrap();
        assert!(m >= -1e-12 && m.abs() < 1e-9);
        assert!(a.bits[2] > 0.0 && a.bits[0] > 0.0);
        assert!(r.is_feasible(), "{:?}", r.feasibility);
    }
}
