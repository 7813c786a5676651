//! Exhaustive grid search over portions and powers for one or two
//! offloading devices. Frequencies sit on their chance-constraint boundary,
//! which is optimal for any fixed portions and powers since the energy grows
//! with frequency.

use std::time::Instant;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{check_feasibility, expected_total_energy, Allocation, Scenario};
use crate::report::{Method, SolveReport, SolveStatus};
use crate::uncertainty::{ChanceConstants, Reliability};

/// Tolerance candidates must meet to count as feasible.
pub const ORACLE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridSpec {
    /// Points of the uniform grid on `[0, b]` per device.
    pub n_b: usize,
    /// Points of the uniform grid on `[0, P_max]` per device.
    pub n_p: usize,
}

impl GridSpec {
    pub fn new(n_b: usize, n_p: usize) -> Result<Self> {
        if n_b < 2 || n_p < 2 {
            return Err(Error::invalid("grid resolutions must be at least 2"));
        }
        Ok(GridSpec { n_b, n_p })
    }
}

fn linspace(hi: f64, n: usize) -> Vec<f64> {
    (0..n)
        .map(|k| if k + 1 == n { hi } else { hi * k as f64 / (n - 1) as f64 })
        .collect()
}

/// Allocation for the given offloaded portions and powers, or `None` when
/// some positive portion has no usable link.
fn candidate(s: &Scenario, chance: &ChanceConstants, bits: &[f64], power: &[f64]) -> Option<Allocation> {
    let jn = s.offload_count();
    let task = &s.task;
    let offloaded: f64 = bits.iter().sum();
    if offloaded > task.bits {
        return None;
    }
    let mut a = Allocation::zeros(jn);
    a.bits[0] = task.bits - offloaded;
    a.freq[0] = chance.min_frequency(0, a.bits[0], task.deadline, task);
    for j in 1..=jn {
        let b = bits[j - 1];
        a.power[j - 1] = power[j - 1];
        a.bits[j] = b;
        if b > 0.0 {
            let r = s.rate(j, power[j - 1]).ok()?;
            if r <= 0.0 {
                return None;
            }
            a.t_up[j - 1] = b / r;
            if a.t_up[j - 1] >= task.deadline {
                return None;
            }
            a.freq[j] = chance.min_frequency(j, b, task.deadline - a.t_up[j - 1], task);
        }
    }
    Some(a)
}

/// Best feasible grid point. Grid points are visited in lexicographic order
/// of `(b_1, b_2, P_1, P_2)` indices and ties go to the earliest one.
pub fn grid_search(s: &Scenario, gamma: Reliability, grid: GridSpec) -> Result<SolveReport> {
    let started = Instant::now();
    s.validate()?;
    let jn = s.offload_count();
    if jn > 2 {
        return Err(Error::TooManyDevices(jn));
    }
    if grid.n_b < 2 || grid.n_p < 2 {
        return Err(Error::invalid("grid resolutions must be at least 2"));
    }
    let chance = ChanceConstants::new(s, gamma);
    let bs = linspace(s.task.bits, grid.n_b);
    let ps = linspace(s.radio.power_budget, grid.n_p);
    let nb = grid.n_b;
    let np = grid.n_p;
    let total = nb.pow(jn as u32) * np.pow(jn as u32);

    let decode = |mut idx: usize| -> (Vec<f64>, Vec<f64>) {
        // last device's power varies fastest
        let mut p = vec![0.0; jn];
        let mut b = vec![0.0; jn];
        for j in (0..jn).rev() {
            p[j] = ps[idx % np];
            idx /= np;
        }
        for j in (0..jn).rev() {
            b[j] = bs[idx % nb];
            idx /= nb;
        }
        (b, p)
    };

    let evaluate = |idx: usize| -> Option<(f64, usize)> {
        let (b, p) = decode(idx);
        if p.iter().sum::<f64>() > s.radio.power_budget * (1.0 + 1e-12) {
            return None;
        }
        let a = candidate(s, &chance, &b, &p)?;
        if !check_feasibility(&a, s, gamma, ORACLE_TOLERANCE).is_feasible() {
            return None;
        }
        let e = expected_total_energy(&a, s).ok()?;
        e.is_finite().then_some((e, idx))
    };
    let better = |x: Option<(f64, usize)>, y: Option<(f64, usize)>| match (x, y) {
        (Some(a), Some(b)) => {
            if b.0 < a.0 || (b.0 == a.0 && b.1 < a.1) {
                Some(b)
            } else {
                Some(a)
            }
        }
        (a, None) => a,
        (None, b) => b,
    };
    let best = (0..total)
        .into_par_iter()
        .map(evaluate)
        .reduce(|| None, better)
        .ok_or_else(|| Error::invalid("no feasible grid point"))?;

    let (b, p) = decode(best.1);
    let a = candidate(s, &chance, &b, &p).expect("best grid point is a candidate");
    Ok(SolveReport {
        method: Method::Oracle,
        feasibility: check_feasibility(&a, s, gamma, ORACLE_TOLERANCE),
        allocation: a,
        expected_energy: best.0,
        iterations: total,
        status: SolveStatus::Converged,
        wall_time: started.elapsed().as_secs_f64(),
        trace: None,
        repairs: Vec::new(),
    })
}
