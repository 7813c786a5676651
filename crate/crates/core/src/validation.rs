//! Quick self-check suite: algebraic identities, the chance-constraint
//! equivalence, closed forms and small end-to-end runs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::channel::{derive_seed, generate_scenario};
use crate::config::{Config, SystemConfig};
use crate::dc::{solve_dc, DcModel, DcParams, DESCENT_SLACK};
use crate::error::Result;
use crate::model::{Allocation, Scenario};
use crate::oracle::{grid_search, GridSpec};
use crate::two_step::{local_baseline, repair_portion, solve_p3, solve_two_step, TwoStepParams};
use crate::uncertainty::{
    deterministic_margin_local, deterministic_margin_offload, empirical_success, ChanceConstants,
};

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, result: Result<(bool, String)>) -> Check {
    match result {
        Ok((passed, detail)) => Check { name, passed, detail },
        Err(e) => Check {
            name,
            passed: false,
            detail: format!("error: {e}"),
        },
    }
}

fn scenario(cfg: &SystemConfig, devices: usize, seed: u64) -> Result<Scenario> {
    let sys = SystemConfig {
        offload_devices: devices,
        ..cfg.clone()
    };
    generate_scenario(&sys, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Random physical allocation with every entry positive.
pub fn random_allocation<R: Rng>(s: &Scenario, rng: &mut R) -> Allocation {
    let jn = s.offload_count();
    let mut a = Allocation::zeros(jn);
    let w: Vec<f64> = (0..=jn).map(|_| rng.random_range(0.05..1.0)).collect();
    let total: f64 = w.iter().sum();
    for i in 0..=jn {
        a.bits[i] = s.task.bits * w[i] / total;
        a.freq[i] = rng.random_range(1e6..2e9);
    }
    for j in 0..jn {
        a.power[j] = s.radio.power_budget * rng.random_range(0.01..1.0) / jn as f64;
        a.t_up[j] = s.task.deadline * rng.random_range(0.0..0.9);
    }
    a
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}

/// Largest relative error of the five pair identities over `points` random
/// allocations of a three-device scenario.
pub fn dcf_identity_error(cfg: &SystemConfig, points: usize, seed: u64) -> Result<f64> {
    let s = scenario(cfg, 3, seed)?;
    let gamma = crate::uncertainty::Reliability::new(0.95)?;
    let m = DcModel::new(&s, gamma)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let kc = s.caps.kappa * s.task.cycles_per_bit;
    let mut worst = 0.0f64;
    for _ in 0..points {
        let a = random_allocation(&s, &mut rng);
        let rates: Vec<f64> = (0..3).map(|_| rng.random_range(1e6..5e8)).collect();
        let x = m.to_scaled(&a, &rates);

        let upload: f64 = (0..3).map(|j| a.power[j] * a.bits[j + 1] / rates[j]).sum();
        worst = worst.max(rel_err(m.dcf_upload(&rates).value(&x), upload));
        let compute: f64 = (0..=3)
            .map(|i| kc * m.chance.eta[i] * a.bits[i] * a.freq[i] * a.freq[i])
            .sum();
        worst = worst.max(rel_err(m.dcf_compute_energy().value(&x), compute));
        for j in 1..=3 {
            let eq = a.bits[j] / rates[j - 1] - a.t_up[j - 1];
            worst = worst.max(rel_err(m.dcf_equality(j, rates[j - 1]).value(&x), eq));
            let q = m.chance.q[j];
            let off = a.bits[j] + q / s.task.deadline * a.t_up[j - 1] * a.freq[j] - q * a.freq[j];
            worst = worst.max(rel_err(m.dcf_chance_offload(j).value(&x), off));
        }
        let local = a.bits[0].ln() - a.freq[0].ln() - m.chance.q[0].ln();
        worst = worst.max(rel_err(m.dcf_chance_local().value(&x), local));
    }
    Ok(worst)
}

/// Runs the suite on the system parameters of `cfg`.
pub fn run_all(cfg: &Config) -> Vec<Check> {
    let sys = &cfg.system;
    let mut out = Vec::new();

    out.push(check(
        "DC pair identities",
        dcf_identity_error(sys, 1000, 1).map(|e| (e <= 1e-9, format!("max relative error {e:.2e}"))),
    ));

    out.push(check("chance-constraint equivalence", (|| {
        let s = scenario(sys, 1, 2)?;
        let gamma = cfg.methods.reliability()?;
        let chance = ChanceConstants::new(&s, gamma);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let task = &s.task;
        let mut bad = 0;
        let trials = 40;
        for _ in 0..trials {
            let bits = s.task.bits * rng.random_range(0.1..1.0);
            let need = chance.min_frequency(0, bits, task.deadline, task);
            let f = need * rng.random_range(0.9..1.1);
            let margin = deterministic_margin_local(bits, f, &chance, task);
            let p = empirical_success(bits, f, task.deadline, &s.throttle[0], task, 20_000, &mut rng);
            let g = gamma.get();
            if (margin >= 0.0 && p < g - 0.01) || (margin < 0.0 && p > g + 0.01) {
                bad += 1;
            }
        }
        Ok((bad == 0, format!("{bad}/{trials} disagreements")))
    })()));

    out.push(check("closed-form frequencies on the boundary", (|| {
        let s = scenario(sys, 2, 4)?;
        let gamma = cfg.methods.reliability()?;
        let chance = ChanceConstants::new(&s, gamma);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut worst = 0.0f64;
        for _ in 0..500 {
            let a = random_allocation(&s, &mut rng);
            let f = solve_p3(&s, &a.bits, &a.t_up, &chance)?;
            worst = worst.max(deterministic_margin_local(a.bits[0], f[0], &chance, &s.task).abs());
            for j in 1..=2 {
                let m = deterministic_margin_offload(j, a.bits[j], f[j], a.t_up[j - 1], &chance, &s.task)?;
                worst = worst.max(m.abs());
            }
            let r = rng.random_range(1e6..5e8);
            let b = repair_portion(1, &s, r, &chance);
            let m = deterministic_margin_offload(1, b, s.caps.f_max[1], b / r, &chance, &s.task)?;
            worst = worst.max(m.abs());
        }
        Ok((worst <= 1e-12, format!("max |margin| {worst:.2e}")))
    })()));

    out.push(check("local baseline closed form", (|| {
        let mut s = scenario(sys, 0, 6)?;
        s.task.bits = 2e5;
        s.task.deadline = 1.0;
        let r = local_baseline(&s, cfg.methods.reliability()?)?;
        let expected = 29.78;
        Ok((
            (r.expected_energy - expected).abs() < 0.01 || sys != &SystemConfig::default(),
            format!("{:.4} J", r.expected_energy),
        ))
    })()));

    out.push(check("two-step feasibility", (|| {
        let gamma = cfg.methods.reliability()?;
        let mut infeasible = 0;
        let mut above_local = 0;
        let n = 60;
        for i in 0..n {
            let mut sys = sys.clone();
            sys.t_max_s = [0.4, 0.7, 1.0][i % 3];
            let s = scenario(&sys, 1 + i % 3, derive_seed(7, i as u64))?;
            let r = solve_two_step(&s, &TwoStepParams::new(cfg.methods.alpha, gamma))?;
            let l = local_baseline(&s, gamma)?;
            infeasible += usize::from(!r.is_feasible());
            above_local += usize::from(r.expected_energy > l.expected_energy);
        }
        Ok((
            infeasible == 0 && above_local == 0,
            format!("{infeasible} infeasible, {above_local} above local, of {n}"),
        ))
    })()));

    out.push(check("DC descent", (|| {
        let gamma = cfg.methods.reliability()?;
        let m = &cfg.methods;
        let mut violations = 0;
        let n = 10;
        for i in 0..n {
            let s = scenario(sys, 1 + i % 3, derive_seed(8, i as u64))?;
            let r = solve_dc(&s, &DcParams::new(m.lambda, m.epsilon, m.k_max, gamma), None)?;
            let h = &r.trace.as_ref().expect("DC reports a trace").h_values;
            violations += h.windows(2).filter(|w| w[1] > w[0] + DESCENT_SLACK).count();
        }
        Ok((violations == 0, format!("{violations} increases over {n} runs")))
    })()));

    out.push(check("grid oracle comparison", (|| {
        let gamma = cfg.methods.reliability()?;
        let mut worst = 0.0f64;
        for i in 0..4 {
            let s = scenario(sys, 1, derive_seed(9, i))?;
            let o = grid_search(&s, gamma, GridSpec::new(101, 51)?)?;
            let r = solve_two_step(&s, &TwoStepParams::new(cfg.methods.alpha, gamma))?;
            worst = worst.max(r.expected_energy / o.expected_energy);
        }
        Ok((worst <= 1.05, format!("worst two-step/oracle ratio {worst:.4}")))
    })()));

    out
}

/// Fixed-width pass/fail table.
pub fn format_table(checks: &[Check]) -> String {
    let width = checks.iter().map(|c| c.name.len()).max().unwrap_or(0);
    let mut s = String::new();
    for c in checks {
        s += &format!(
            "{:<width$}  {}  {}\n",
            c.name,
            if c.passed { "PASS" } else { "FAIL" },
            c.detail
        );
    }
    s
}
