//! Penalized difference-of-convex iteration over the full decision vector.
//!
//! Every nonconvex piece of the problem is written as `y - z` with `y`, `z`
//! convex. The coupling `b_j = R_j t_up_j` is moved into the objective as an
//! exact absolute-value penalty `lambda |b_j / R_j - t_up_j|`, itself a
//! difference of convex functions via `2 max(a, b) - (a + b) = |a - b|`.
//! Each outer iteration linearizes the `z` parts at the current point and
//! solves the resulting convex program.
//!
//! The rates `R_j(P_j)` enter the upload and coupling pairs as constants;
//! they are frozen at the current powers in every outer iteration. If the
//! powers proposed by a subproblem increase the true penalized objective,
//! the subproblem is re-solved with the powers pinned, which makes the
//! frozen rates exact and restores the descent guarantee.
//!
//! All pairs operate on the scaled vector described by [`DcLayout`].

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{self, check_feasibility, expected_total_energy, Allocation, Scenario};
use crate::report::{Method, SolveReport, SolveStatus};
use crate::solver::{self, Affine, ConvexProgram, SolverOptions, SolverStatus};
use crate::uncertainty::{ChanceConstants, Reliability};

/// Smallest scaled portion and frequency; keeps the logarithms finite.
pub const VALUE_FLOOR: f64 = 1e-6;
/// Smallest scaled power, so rates stay positive between iterations.
pub const POWER_FLOOR: f64 = 1e-3;

type Part = Box<dyn Fn(&[f64], &mut [f64]) -> f64 + Send + Sync>;

/// A function represented as `y - z` with both parts convex.
pub struct DcfPair {
    y: Part,
    z: Part,
}

impl DcfPair {
    pub fn new(
        y: impl Fn(&[f64], &mut [f64]) -> f64 + Send + Sync + 'static,
        z: impl Fn(&[f64], &mut [f64]) -> f64 + Send + Sync + 'static,
    ) -> Self {
        DcfPair {
            y: Box::new(y),
            z: Box::new(z),
        }
    }

    /// `y(x)`; the gradient is written into `grad`.
    pub fn y(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        grad.fill(0.0);
        (self.y)(x, grad)
    }

    pub fn z(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        grad.fill(0.0);
        (self.z)(x, grad)
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        let mut g = vec![0.0; x.len()];
        self.y(x, &mut g) - self.z(x, &mut g)
    }

    pub fn scaled(self, factor: f64) -> DcfPair {
        let DcfPair { y, z } = self;
        let wrap = move |part: Part| -> Part {
            Box::new(move |x: &[f64], g: &mut [f64]| {
                let mut local = vec![0.0; g.len()];
                let v = part(x, &mut local);
                for (gi, li) in g.iter_mut().zip(&local) {
                    *gi += factor * li;
                }
                factor * v
            })
        };
        DcfPair {
            y: wrap(y),
            z: wrap(z),
        }
    }
}

/// Convex majorant of `pair` tangent at `x_k`:
/// `y(x) - z(x_k) - grad z(x_k) . (x - x_k)`.
pub fn linearize<'a>(pair: &'a DcfPair, x_k: &[f64]) -> impl Fn(&[f64], &mut [f64]) -> f64 + 'a {
    let mut gz = vec![0.0; x_k.len()];
    let zk = pair.z(x_k, &mut gz);
    let offset = zk - gz.iter().zip(x_k).map(|(g, x)| g * x).sum::<f64>();
    move |x: &[f64], grad: &mut [f64]| {
        let v = pair.y(x, grad);
        let mut lin = offset;
        for i in 0..x.len() {
            grad[i] -= gz[i];
            lin += gz[i] * x[i];
        }
        v - lin
    }
}

/// Index map of the scaled decision vector
/// `[p_1..p_J, b_0..b_J, f_0..f_J, t_1..t_J, s_1..s_J]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DcLayout {
    pub offload: usize,
}

impl DcLayout {
    pub fn dim(&self) -> usize {
        5 * self.offload + 2
    }
    /// Power of offloading device `j` (1-based).
    pub fn p(&self, j: usize) -> usize {
        j - 1
    }
    pub fn b(&self, i: usize) -> usize {
        self.offload + i
    }
    pub fn f(&self, i: usize) -> usize {
        2 * self.offload + 1 + i
    }
    pub fn t(&self, j: usize) -> usize {
        3 * self.offload + 1 + j
    }
    /// Epigraph variable of the penalty of device `j`.
    pub fn s(&self, j: usize) -> usize {
        4 * self.offload + 1 + j
    }
}

/// Characteristic magnitudes used to scale the decision vector.
#[derive(Debug, Clone, PartialEq)]
pub struct DcScales {
    pub power: f64,
    pub bits: f64,
    /// Per device: the all-local frequency for the active device, the cap otherwise.
    pub freq: Vec<f64>,
    pub time: f64,
    /// Energy of the all-local allocation; the subproblem objective unit.
    pub energy: f64,
}

/// Scenario data bundled with the scaling and the chance constants.
pub struct DcModel<'a> {
    pub scenario: &'a Scenario,
    pub chance: ChanceConstants,
    pub layout: DcLayout,
    pub scales: DcScales,
}

impl<'a> DcModel<'a> {
    pub fn new(scenario: &'a Scenario, gamma: Reliability) -> Result<Self> {
        scenario.validate()?;
        let chance = ChanceConstants::new(scenario, gamma);
        let task = &scenario.task;
        let jn = scenario.offload_count();
        let f_local = chance.min_frequency(0, task.bits, task.deadline, task);
        let mut freq = vec![f_local];
        freq.extend_from_slice(&scenario.caps.f_max[1..]);
        let kc = scenario.caps.kappa * task.cycles_per_bit;
        let energy = kc * chance.eta[0] * task.bits * f_local * f_local;
        Ok(DcModel {
            scenario,
            layout: DcLayout { offload: jn },
            scales: DcScales {
                power: scenario.radio.power_budget,
                bits: task.bits,
                freq,
                time: task.deadline,
                energy,
            },
            chance,
        })
    }

    /// Scaled vector of `a`; the epigraph variables are set just above the
    /// larger of their two bounds.
    pub fn to_scaled(&self, a: &Allocation, rates: &[f64]) -> Vec<f64> {
        let l = self.layout;
        let sc = &self.scales;
        let mut x = vec![0.0; l.dim()];
        for i in 0..=l.offload {
            x[l.b(i)] = a.bits[i] / sc.bits;
            x[l.f(i)] = a.freq[i] / sc.freq[i];
        }
        for j in 1..=l.offload {
            x[l.p(j)] = a.power[j - 1] / sc.power;
            x[l.t(j)] = a.t_up[j - 1] / sc.time;
        }
        self.reseat_epigraph(&mut x, rates);
        x
    }

    /// Puts each epigraph variable a hair above the larger of its two bounds
    /// at the given rates. The objective of the subproblem charges
    /// `2 lambda t_max` per unit, so the gap must stay far below the descent slack.
    pub fn reseat_epigraph(&self, x: &mut [f64], rates: &[f64]) {
        let l = self.layout;
        let sc = &self.scales;
        for j in 1..=l.offload {
            let sigma = sc.bits / (rates[j - 1] * sc.time);
            let b = x[l.b(j)];
            let y = (b + 0.5 * sigma).powi(2);
            let z = b * b + 0.25 * sigma * sigma + x[l.t(j)];
            let top = y.max(z);
            x[l.s(j)] = top + 1e-12 * (1.0 + top.abs());
        }
    }

    pub fn to_allocation(&self, x: &[f64]) -> Allocation {
        let l = self.layout;
        let sc = &self.scales;
        let mut a = Allocation::zeros(l.offload);
        for i in 0..=l.offload {
            a.bits[i] = x[l.b(i)] * sc.bits;
            a.freq[i] = x[l.f(i)] * sc.freq[i];
        }
        for j in 1..=l.offload {
            a.power[j - 1] = x[l.p(j)] * sc.power;
            a.t_up[j - 1] = x[l.t(j)] * sc.time;
        }
        a
    }

    /// Rates at the powers encoded in `x`.
    pub fn rates(&self, x: &[f64]) -> Result<Vec<f64>> {
        (1..=self.layout.offload)
            .map(|j| self.scenario.rate(j, x[self.layout.p(j)] * self.scales.power))
            .collect()
    }

    /// Upload energy `sum_j P_j b_j / R_j`, J, at frozen rates.
    pub fn dcf_upload(&self, frozen_rates: &[f64]) -> DcfPair {
        let l = self.layout;
        let p2 = self.scales.power * self.scales.power;
        let r: Vec<f64> = frozen_rates
            .iter()
            .map(|&rate| self.scales.bits / (rate * self.scales.power))
            .collect();
        let r2 = r.clone();
        DcfPair::new(
            move |x, g| {
                let mut v = 0.0;
                for j in 1..=l.offload {
                    let rj = r[j - 1];
                    let inner = x[l.p(j)] + 0.5 * rj * x[l.b(j)];
                    v += p2 * inner * inner;
                    g[l.p(j)] += 2.0 * p2 * inner;
                    g[l.b(j)] += p2 * rj * inner;
                }
                v
            },
            move |x, g| {
                let mut v = 0.0;
                for j in 1..=l.offload {
                    let rj = r2[j - 1];
                    let (p, b) = (x[l.p(j)], x[l.b(j)]);
                    v += p2 * (p * p + 0.25 * rj * rj * b * b);
                    g[l.p(j)] += 2.0 * p2 * p;
                    g[l.b(j)] += 0.5 * p2 * rj * rj * b;
                }
                v
            },
        )
    }

    /// Expected computation energy `kappa c sum_i eta_i b_i f_i^2`, J, as
    /// `1/2 K_i [(b + f^2)^2 - b^2 - f^4]`.
    pub fn dcf_compute_energy(&self) -> DcfPair {
        let l = self.layout;
        let s = self.scenario;
        let kc = s.caps.kappa * s.task.cycles_per_bit;
        let k: Vec<f64> = (0..=l.offload)
            .map(|i| kc * self.chance.eta[i] * self.scales.bits * self.scales.freq[i].powi(2))
            .collect();
        let k2 = k.clone();
        DcfPair::new(
            move |x, g| {
                let mut v = 0.0;
                for i in 0..=l.offload {
                    let (b, f) = (x[l.b(i)], x[l.f(i)]);
                    let inner = b + f * f;
                    v += 0.5 * k[i] * inner * inner;
                    g[l.b(i)] += k[i] * inner;
                    g[l.f(i)] += 2.0 * k[i] * f * inner;
                }
                v
            },
            move |x, g| {
                let mut v = 0.0;
                for i in 0..=l.offload {
                    let (b, f) = (x[l.b(i)], x[l.f(i)]);
                    let f2 = f * f;
                    v += 0.5 * k2[i] * (b * b + f2 * f2);
                    g[l.b(i)] += k2[i] * b;
                    g[l.f(i)] += 2.0 * k2[i] * f2 * f;
                }
                v
            },
        )
    }

    /// Coupling residual `b_j / R_j - t_up_j`, seconds.
    pub fn dcf_equality(&self, j: usize, frozen_rate: f64) -> DcfPair {
        let l = self.layout;
        let t = self.scales.time;
        let sigma = self.scales.bits / (frozen_rate * t);
        DcfPair::new(
            move |x, g| {
                let inner = x[l.b(j)] + 0.5 * sigma;
                g[l.b(j)] += 2.0 * t * inner;
                t * inner * inner
            },
            move |x, g| {
                let b = x[l.b(j)];
                g[l.b(j)] += 2.0 * t * b;
                g[l.t(j)] += t;
                t * (b * b + 0.25 * sigma * sigma + x[l.t(j)])
            },
        )
    }

    /// `ln b_0 - ln f_0 - ln q_0`; nonpositive iff the local deadline holds
    /// at the required reliability.
    pub fn dcf_chance_local(&self) -> DcfPair {
        let l = self.layout;
        let ln_q_hat = (self.chance.q[0] * self.scales.freq[0] / self.scales.bits).ln();
        DcfPair::new(
            move |x, g| {
                let f = x[l.f(0)];
                g[l.f(0)] -= 1.0 / f;
                -f.ln()
            },
            move |x, g| {
                let b = x[l.b(0)];
                g[l.b(0)] -= 1.0 / b;
                -b.ln() + ln_q_hat
            },
        )
    }

    /// `b_j + (q_j / t_max) t_up_j f_j - q_j f_j`, bits; nonpositive iff the
    /// deadline of device `j` holds at the required reliability.
    pub fn dcf_chance_offload(&self, j: usize) -> DcfPair {
        let l = self.layout;
        let unit = self.scales.bits;
        let q = self.chance.q[j] * self.scales.freq[j] / unit;
        DcfPair::new(
            move |x, g| {
                let (t, f) = (x[l.t(j)], x[l.f(j)]);
                let inner = t + 0.5 * f;
                g[l.t(j)] += unit * 2.0 * q * inner;
                g[l.f(j)] += unit * q * inner;
                g[l.b(j)] += unit;
                unit * (q * inner * inner + x[l.b(j)])
            },
            move |x, g| {
                let (t, f) = (x[l.t(j)], x[l.f(j)]);
                g[l.t(j)] += unit * 2.0 * q * t;
                g[l.f(j)] += unit * q * (0.5 * f + 1.0);
                unit * (q * (t * t + 0.25 * f * f) + q * f)
            },
        )
    }

    /// Expected energy `H` at frozen rates, straight from the formula.
    pub fn energy(&self, x: &[f64], rates: &[f64]) -> f64 {
        let l = self.layout;
        let sc = &self.scales;
        let s = self.scenario;
        let kc = s.caps.kappa * s.task.cycles_per_bit;
        let mut e = 0.0;
        for j in 1..=l.offload {
            e += x[l.p(j)] * sc.power * x[l.b(j)] * sc.bits / rates[j - 1];
        }
        for i in 0..=l.offload {
            let f = x[l.f(i)] * sc.freq[i];
            e += kc * self.chance.eta[i] * x[l.b(i)] * sc.bits * f * f;
        }
        e
    }

    /// `sum_j |b_j / R_j - t_up_j|`, seconds.
    pub fn coupling_residual(&self, x: &[f64], rates: &[f64]) -> f64 {
        let l = self.layout;
        (1..=l.offload)
            .map(|j| {
                (x[l.b(j)] * self.scales.bits / rates[j - 1] - x[l.t(j)] * self.scales.time).abs()
            })
            .sum()
    }

    /// `H_lambda = Y_lambda - Z_lambda` from the pairs, together with the pair
    /// `(Y_lambda, Z_lambda)` itself.
    pub fn penalized_objective(&self, x: &[f64], lambda: f64, rates: &[f64]) -> (f64, DcfPair) {
        let upload = self.dcf_upload(rates);
        let compute = self.dcf_compute_energy();
        let eqs: Vec<DcfPair> = (1..=self.layout.offload)
            .map(|j| self.dcf_equality(j, rates[j - 1]))
            .collect();
        let eqs = std::sync::Arc::new(eqs);
        let eqs_z = eqs.clone();
        let y_parts = std::sync::Arc::new((upload, compute));
        let z_parts = y_parts.clone();
        let pair = DcfPair::new(
            move |x, g| {
                let mut scratch = vec![0.0; x.len()];
                let mut v = y_parts.0.y(x, &mut scratch);
                add(g, &scratch, 1.0);
                v += y_parts.1.y(x, &mut scratch);
                add(g, &scratch, 1.0);
                let mut gz = vec![0.0; x.len()];
                for e in eqs.iter() {
                    let a = e.y(x, &mut scratch);
                    let b = e.z(x, &mut gz);
                    // subgradient of the max; ties take the first part
                    if a >= b {
                        v += 2.0 * lambda * a;
                        add(g, &scratch, 2.0 * lambda);
                    } else {
                        v += 2.0 * lambda * b;
                        add(g, &gz, 2.0 * lambda);
                    }
                }
                v
            },
            move |x, g| {
                let mut scratch = vec![0.0; x.len()];
                let mut v = z_parts.0.z(x, &mut scratch);
                add(g, &scratch, 1.0);
                v += z_parts.1.z(x, &mut scratch);
                add(g, &scratch, 1.0);
                for e in eqs_z.iter() {
                    v += lambda * e.y(x, &mut scratch);
                    add(g, &scratch, lambda);
                    v += lambda * e.z(x, &mut scratch);
                    add(g, &scratch, lambda);
                }
                v
            },
        );
        (pair.value(x), pair)
    }

    /// True penalized objective with rates taken at the powers in `x`, J.
    pub fn true_penalized(&self, x: &[f64], lambda: f64) -> Result<f64> {
        let rates = self.rates(x)?;
        Ok(self.energy(x, &rates) + lambda * self.coupling_residual(x, &rates))
    }

    /// Starting point: near-equal powers, an equal split capped below what
    /// each offloading device can finish at its cap, and frequencies slightly
    /// above the chance-constraint boundary.
    pub fn initial_point(&self) -> Result<Vec<f64>> {
        let s = self.scenario;
        let jn = self.layout.offload;
        let task = &s.task;
        let mut a = Allocation::zeros(jn);
        let mut rates = Vec::with_capacity(jn);
        let share = task.bits / (jn + 1) as f64;
        for j in 1..=jn {
            let p = s.radio.power_budget / jn as f64 * (1.0 - 1e-3);
            let r = s.rate(j, p)?;
            let cap_portion = crate::two_step::repair_portion(j, s, r, &self.chance);
            a.power[j - 1] = p;
            a.bits[j] = share.min(0.9 * cap_portion);
            a.t_up[j - 1] = a.bits[j] / r;
            rates.push(r);
        }
        a.bits[0] = task.bits - a.bits[1..].iter().sum::<f64>();
        for i in 0..=jn {
            let window = if i == 0 { task.deadline } else { task.deadline - a.t_up[i - 1] };
            let f_eq = self.chance.min_frequency(i, a.bits[i], window, task);
            let cap = s.caps.f_max[i];
            if f_eq >= cap {
                return Err(if i == 0 {
                    Error::ActiveCapExceeded { required: f_eq, cap }
                } else {
                    Error::invalid(format!("device {i} cannot start strictly feasible"))
                });
            }
            a.freq[i] = (f_eq * (1.0 + 1e-3)).min(0.5 * (f_eq + cap));
        }
        Ok(self.to_scaled(&a, &rates))
    }
}

fn add(g: &mut [f64], part: &[f64], w: f64) {
    for (gi, pi) in g.iter_mut().zip(part) {
        *gi += w * pi;
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DcParams {
    pub lambda: f64,
    pub epsilon: f64,
    pub k_max: usize,
    pub gamma: Reliability,
    pub feasibility_tol: f64,
    pub solver: SolverOptions,
}

impl DcParams {
    pub fn new(lambda: f64, epsilon: f64, k_max: usize, gamma: Reliability) -> Self {
        DcParams {
            lambda,
            epsilon,
            k_max,
            gamma,
            feasibility_tol: model::DEFAULT_TOLERANCE,
            solver: SolverOptions {
                max_newton_iters: 500,
                ..SolverOptions::default()
            },
        }
    }
}

/// History of the outer iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DcTrace {
    pub iterates: Vec<Allocation>,
    /// True penalized objective at each iterate, J.
    pub h_values: Vec<f64>,
    pub subproblem_statuses: Vec<SolverStatus>,
    /// First iteration at which powers were pinned, if any.
    pub pinned_from: Option<usize>,
    pub wall_time: f64,
}

/// Convex subproblem around `xk`; powers are held at their current values
/// when `pin_power` is set.
fn subproblem<'p>(
    m: &DcModel<'_>,
    xk: &[f64],
    params: &DcParams,
    pairs: &'p SubproblemPairs,
    pin_power: bool,
) -> ConvexProgram<'p> {
    let l = m.layout;
    let n = l.dim();
    let lambda = params.lambda;
    let e_ref = m.scales.energy;
    let t = m.scales.time;

    // linear part of -Z_lambda at xk plus the epigraph cost
    let mut g = vec![0.0; n];
    let mut scratch = vec![0.0; n];
    let mut constant = 0.0;
    let mut add_z = |v: f64, grad: &[f64], w: f64, g: &mut Vec<f64>| {
        constant += w * v;
        add(g, grad, w);
    };
    let v = pairs.upload.z(xk, &mut scratch);
    add_z(v, &scratch, 1.0, &mut g);
    let v = pairs.compute.z(xk, &mut scratch);
    add_z(v, &scratch, 1.0, &mut g);
    for e in &pairs.eqs {
        let v = e.y(xk, &mut scratch);
        add_z(v, &scratch, lambda, &mut g);
        let v = e.z(xk, &mut scratch);
        add_z(v, &scratch, lambda, &mut g);
    }
    let offset = constant - g.iter().zip(xk).map(|(a, b)| a * b).sum::<f64>();
    let mut lin = vec![0.0; n];
    for i in 0..n {
        lin[i] = -g[i];
    }
    for j in 1..=l.offload {
        lin[l.s(j)] += 2.0 * lambda * t;
    }

    let upload = &pairs.upload;
    let compute = &pairs.compute;
    let objective = move |x: &[f64], grad: &mut [f64]| {
        let mut part = vec![0.0; x.len()];
        let mut v = upload.y(x, &mut part);
        grad.copy_from_slice(&part);
        v += compute.y(x, &mut part);
        add(grad, &part, 1.0);
        for i in 0..x.len() {
            v += lin[i] * x[i];
            grad[i] = (grad[i] + lin[i]) / e_ref;
        }
        (v - offset) / e_ref
    };

    let mut prog = ConvexProgram::new(n, objective);
    prog = prog.inequality(linearize(&pairs.chance_local, xk));
    for c in &pairs.chance_offload {
        prog = prog.inequality(linearize(c, xk));
    }
    for (idx, e) in pairs.eqs.iter().enumerate() {
        let s_index = l.s(idx + 1);
        prog = prog.inequality(move |x: &[f64], grad: &mut [f64]| {
            let v = e.y(x, grad) / t;
            grad.iter_mut().for_each(|gi| *gi /= t);
            grad[s_index] -= 1.0;
            v - x[s_index]
        });
        prog = prog.inequality(move |x: &[f64], grad: &mut [f64]| {
            let v = e.z(x, grad) / t;
            grad.iter_mut().for_each(|gi| *gi /= t);
            grad[s_index] -= 1.0;
            v - x[s_index]
        });
    }
    if l.offload > 0 {
        let mut row = vec![0.0; n];
        for j in 1..=l.offload {
            row[l.p(j)] = 1.0;
        }
        prog = prog.inequality(Affine::new(row, 1.0));
    }
    let mut eq = vec![0.0; n];
    for i in 0..=l.offload {
        eq[l.b(i)] = 1.0;
    }
    prog = prog.equality(eq, 1.0);
    if pin_power {
        for j in 1..=l.offload {
            let mut row = vec![0.0; n];
            row[l.p(j)] = 1.0;
            prog = prog.equality(row, xk[l.p(j)]);
        }
    }

    let mut lower = vec![f64::NEG_INFINITY; n];
    let mut upper = vec![f64::INFINITY; n];
    for j in 1..=l.offload {
        lower[l.p(j)] = POWER_FLOOR;
        upper[l.p(j)] = 1.0;
        lower[l.t(j)] = 0.0;
        upper[l.t(j)] = 1.0;
    }
    for i in 0..=l.offload {
        lower[l.b(i)] = VALUE_FLOOR;
        lower[l.f(i)] = VALUE_FLOOR;
        upper[l.f(i)] = m.scenario.caps.f_max[i] / m.scales.freq[i];
    }
    prog.bounds(lower, upper)
}

struct SubproblemPairs {
    upload: DcfPair,
    compute: DcfPair,
    eqs: Vec<DcfPair>,
    chance_local: DcfPair,
    chance_offload: Vec<DcfPair>,
}

impl SubproblemPairs {
    fn new(m: &DcModel<'_>, rates: &[f64]) -> Self {
        let jn = m.layout.offload;
        SubproblemPairs {
            upload: m.dcf_upload(rates),
            compute: m.dcf_compute_energy(),
            eqs: (1..=jn).map(|j| m.dcf_equality(j, rates[j - 1])).collect(),
            chance_local: m.dcf_chance_local(),
            // constraint rows in units of the task size
            chance_offload: (1..=jn)
                .map(|j| m.dcf_chance_offload(j).scaled(1.0 / m.scales.bits))
                .collect(),
        }
    }
}

/// Allowed increase of the penalized objective between iterates, J.
pub const DESCENT_SLACK: f64 = 1e-8;

/// Runs the penalized DC iteration from `x0` (scaled), or from
/// [`DcModel::initial_point`] when `x0` is `None`.
pub fn solve_dc(s: &Scenario, params: &DcParams, x0: Option<Vec<f64>>) -> Result<SolveReport> {
    let started = Instant::now();
    let m = DcModel::new(s, params.gamma)?;
    let jn = m.layout.offload;
    if !(params.lambda >= 0.0 && params.epsilon > 0.0) {
        return Err(Error::invalid("DC needs lambda >= 0 and epsilon > 0"));
    }

    let mut x = match x0 {
        Some(x) if x.len() == m.layout.dim() => x,
        Some(_) => return Err(Error::invalid("DC start point has the wrong length")),
        None => m.initial_point()?,
    };
    let mut h = m.true_penalized(&x, params.lambda)?;
    let mut trace = DcTrace {
        iterates: vec![m.to_allocation(&x)],
        h_values: vec![h],
        subproblem_statuses: Vec::new(),
        pinned_from: None,
        wall_time: 0.0,
    };
    let mut status = SolveStatus::MaxIter;
    let mut iterations = 0;

    if jn == 0 {
        // nothing to optimize: local frequency on its boundary
        status = SolveStatus::Converged;
        iterations = 1;
    } else {
        let mut pinned = false;
        while iterations < params.k_max {
            iterations += 1;
            let rates = m.rates(&x)?;
            m.reseat_epigraph(&mut x, &rates);
            let pairs = SubproblemPairs::new(&m, &rates);
            let prog = subproblem(&m, &x, params, &pairs, pinned);
            let mut res = solver::minimize(&prog, &x, &params.solver)?;
            let mut h_new = m.true_penalized(&res.x, params.lambda)?;
            if h_new > h + DESCENT_SLACK && !pinned {
                log::debug!("iteration {iterations}: frozen rates overshot, pinning powers");
                pinned = true;
                trace.pinned_from = Some(iterations);
                let prog = subproblem(&m, &x, params, &pairs, true);
                res = solver::minimize(&prog, &x, &params.solver)?;
                h_new = m.true_penalized(&res.x, params.lambda)?;
            }
            trace.subproblem_statuses.push(res.status);
            if h_new > h + DESCENT_SLACK {
                log::warn!("iteration {iterations}: no descent ({h} -> {h_new}), stopping");
                status = SolveStatus::Converged;
                break;
            }
            let delta = h - h_new;
            x = res.x;
            h = h_new;
            trace.iterates.push(m.to_allocation(&x));
            trace.h_values.push(h);
            if delta.abs() <= params.epsilon {
                status = SolveStatus::Converged;
                break;
            }
        }
    }

    let alloc = finalize(&m, &x)?;
    let energy = expected_total_energy(&alloc, s)?;
    trace.wall_time = started.elapsed().as_secs_f64();
    Ok(SolveReport {
        method: Method::Dc,
        feasibility: check_feasibility(&alloc, s, params.gamma, params.feasibility_tol),
        allocation: alloc,
        expected_energy: energy,
        iterations,
        status,
        wall_time: trace.wall_time,
        trace: Some(trace),
        repairs: Vec::new(),
    })
}

/// Physical allocation of `x` with the coupling restored exactly
/// (`t_up = b / R`) and every frequency moved onto its chance boundary if it
/// fell below it. A device whose boundary frequency would then exceed its
/// cap keeps only the portion its cap finishes in time; the excess goes to
/// the active device.
fn finalize(m: &DcModel<'_>, x: &[f64]) -> Result<Allocation> {
    let s = m.scenario;
    let task = &s.task;
    let mut a = m.to_allocation(x);
    if m.layout.offload == 0 {
        a.bits[0] = task.bits;
        a.freq[0] = m.chance.min_frequency(0, task.bits, task.deadline, task);
        return Ok(a);
    }
    a.sync_upload_times(s)?;
    for j in 1..a.bits.len() {
        let window = task.deadline - a.t_up[j - 1];
        let need = if window > 0.0 {
            m.chance.min_frequency(j, a.bits[j], window, task)
        } else {
            f64::INFINITY
        };
        if need > s.caps.f_max[j] {
            let r = s.rate(j, a.power[j - 1])?;
            let keep = crate::two_step::repair_portion(j, s, r, &m.chance).min(a.bits[j]);
            log::debug!("device {j}: coupled portion exceeds its cap, keeping {keep:.4e} bits");
            a.bits[j] = keep;
            a.t_up[j - 1] = keep / r;
            a.freq[j] = s.caps.f_max[j];
        } else if a.freq[j] < need {
            a.freq[j] = need;
        }
    }
    let offloaded: f64 = a.bits[1..].iter().sum();
    a.bits[0] = (task.bits - offloaded).max(0.0);
    let need = m.chance.min_frequency(0, a.bits[0], task.deadline, task);
    if a.freq[0] < need {
        a.freq[0] = need;
    }
    Ok(a)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{DeviceCaps, RadioParams, TaskSpec};
    use crate::uncertainty::{deterministic_margin_local, deterministic_margin_offload, ThrottleModel};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn gamma() -> Reliability {
        Reliability::new(0.95).unwrap()
    }

    fn scenario(jn: usize) -> Scenario {
        let gains = vec![3e-8, 1e-8, 5e-9][..jn].to_vec();
        let mut f_max = vec![1e10];
        f_max.extend([8e7, 6e7, 1e8][..jn].iter());
        Scenario::new(
            TaskSpec::new(2e5, 1500.0, 1.0).unwrap(),
            RadioParams::new(1e7, 3.981_071_705_534_972e-15, 0.2).unwrap(),
            DeviceCaps::new(f_max, 1e-24).unwrap(),
            gains,
            vec![ThrottleModel::uniform(0.0, 0.1).unwrap(); jn + 1],
            (0..=jn).map(|i| [i as f64, 0.0]).collect(),
        )
        .unwrap()
    }

    fn random_point<R: Rng>(m: &DcModel<'_>, rng: &mut R) -> Vec<f64> {
        (0..m.layout.dim()).map(|_| rng.random_range(0.01..1.5)).collect()
    }

    fn rel_close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * a.abs().max(b.abs()).max(1e-300)
    }

    #[test]
    fn upload_identity_example() {
        // P=0.1, b=1e5, R=1e8 in physical units
        let mut s = scenario(1);
        s.radio.power_budget = 0.1;
        s.task.bits = 1e5;
        let m = DcModel::new(&s, gamma()).unwrap();
        let mut x = vec![0.0; m.layout.dim()];
        x[m.layout.p(1)] = 1.0;
        x[m.layout.b(1)] = 1.0;
        let pair = m.dcf_upload(&[1e8]);
        let mut g = vec![0.0; x.len()];
        assert!(rel_close(pair.y(&x, &mut g), 0.01010025, 1e-12));
        assert!(rel_close(pair.z(&x, &mut g), 0.01000025, 1e-12));
        assert!(rel_close(pair.value(&x), 1e-4, 1e-9));
        x[m.layout.p(1)] = 0.0;
        assert!(pair.value(&x).abs() < 1e-18);
    }

    #[test]
    fn equality_examples() {
        let mut s = scenario(1);
        s.task.bits = 1e5;
        let m = DcModel::new(&s, gamma()).unwrap();
        let mut x = vec![0.0; m.layout.dim()];
        x[m.layout.b(1)] = 1.0;
        let pair = m.dcf_equality(1, 1e8);
        assert!(rel_close(pair.value(&x), 1e-3, 1e-9));
        x[m.layout.t(1)] = 1e-3;
        assert!(pair.value(&x).abs() < 1e-15);
    }

    #[test]
    fn compute_energy_vanishes_without_frequency() {
        let s = scenario(2);
        let m = DcModel::new(&s, gamma()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut x = random_point(&m, &mut rng);
        for i in 0..=2 {
            x[m.layout.f(i)] = 0.0;
        }
        assert!(m.dcf_compute_energy().value(&x).abs() < 1e-12);
    }

    #[test]
    fn chance_examples() {
        let s = scenario(1);
        let m = DcModel::new(&s, gamma()).unwrap();
        let l = m.layout;
        let mut x = vec![0.5; l.dim()];
        // b_0 = q_0 f_0: on the boundary
        let f0 = 1e8;
        x[l.f(0)] = f0 / m.scales.freq[0];
        x[l.b(0)] = m.chance.q[0] * f0 / m.scales.bits;
        assert!(m.dcf_chance_local().value(&x).abs() < 1e-12);
        x[l.b(1)] = 0.0;
        x[l.t(1)] = 0.0;
        x[l.f(1)] = 0.7;
        let expect = -0.7 * m.scales.freq[1] * m.chance.q[1];
        assert!(rel_close(m.dcf_chance_offload(1).value(&x), expect, 1e-9));
    }

    #[test]
    fn penalty_identity_and_lambda_zero() {
        let s = scenario(3);
        let m = DcModel::new(&s, gamma()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let rates = [1.3e8, 9e7, 2e8];
        for _ in 0..200 {
            let x = random_point(&m, &mut rng);
            let h = m.energy(&x, &rates);
            let (v0, _) = m.penalized_objective(&x, 0.0, &rates);
            assert!(rel_close(v0, h, 1e-9));
            let (v, _) = m.penalized_objective(&x, 12.0, &rates);
            let expect = h + 12.0 * m.coupling_residual(&x, &rates);
            assert!((v - expect).abs() <= 1e-9 * expect.abs().max(1.0), "{v} vs {expect}");
        }
    }

    fn all_pairs(m: &DcModel<'_>, rates: &[f64]) -> Vec<DcfPair> {
        let mut v = vec![m.dcf_upload(rates), m.dcf_compute_energy(), m.dcf_chance_local()];
        for j in 1..=m.layout.offload {
            v.push(m.dcf_equality(j, rates[j - 1]));
            v.push(m.dcf_chance_offload(j));
        }
        v.push(m.penalized_objective(&vec![0.5; m.layout.dim()], 12.0, rates).1);
        v
    }

    #[test]
    fn gradients_match_finite_differences() {
        let s = scenario(3);
        let m = DcModel::new(&s, gamma()).unwrap();
        let rates = [1.3e8, 9e7, 2e8];
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let n = m.layout.dim();
        for pair in all_pairs(&m, &rates) {
            for _ in 0..20 {
                let x = random_point(&m, &mut rng);
                for part in 0..2 {
                    let eval = |x: &[f64], g: &mut [f64]| {
                        if part == 0 {
                            pair.y(x, g)
                        } else {
                            pair.z(x, g)
                        }
                    };
                    let mut g = vec![0.0; n];
                    eval(&x, &mut g);
                    let mut tmp = vec![0.0; n];
                    let gscale = g.iter().fold(0.0f64, |a, b| a.max(b.abs())).max(1e-300);
                    for i in 0..n {
                        let h = 1e-6 * x[i].abs().max(1e-2);
                        let mut xp = x.clone();
                        xp[i] += h;
                        let mut xm = x.clone();
                        xm[i] -= h;
                        let fd = (eval(&xp, &mut tmp) - eval(&xm, &mut tmp)) / (2.0 * h);
                        assert!(
                            (fd - g[i]).abs() <= 1e-4 * gscale.max(fd.abs()),
                            "part {part} coord {i}: {fd} vs {}",
                            g[i]
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn parts_are_convex_along_segments() {
        let s = scenario(2);
        let m = DcModel::new(&s, gamma()).unwrap();
        let rates = [1.3e8, 9e7];
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = m.layout.dim();
        for pair in all_pairs(&m, &rates) {
            for _ in 0..50 {
                let a = random_point(&m, &mut rng);
                let b = random_point(&m, &mut rng);
                for part in 0..2 {
                    let mut ga = vec![0.0; n];
                    let mut gb = vec![0.0; n];
                    if part == 0 {
                        pair.y(&a, &mut ga);
                        pair.y(&b, &mut gb);
                    } else {
                        pair.z(&a, &mut ga);
                        pair.z(&b, &mut gb);
                    }
                    // monotone gradient: (g(b) - g(a)) . (b - a) >= 0
                    let mono: f64 = (0..n).map(|i| (gb[i] - ga[i]) * (b[i] - a[i])).sum();
                    let scale: f64 = (0..n).map(|i| (gb[i].abs() + ga[i].abs()) * (b[i] - a[i]).abs()).sum();
                    assert!(mono >= -1e-12 * scale.max(1e-300));
                }
            }
        }
    }

    #[test]
    fn linearization_is_tangent_majorant() {
        let s = scenario(2);
        let m = DcModel::new(&s, gamma()).unwrap();
        let rates = [1.3e8, 9e7];
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let n = m.layout.dim();
        for pair in all_pairs(&m, &rates) {
            let xk = random_point(&m, &mut rng);
            let lin = linearize(&pair, &xk);
            let mut g = vec![0.0; n];
            let at = lin(&xk, &mut g);
            let exact = pair.value(&xk);
            assert!((at - exact).abs() <= 1e-12 * exact.abs().max(1.0));
            for _ in 0..100 {
                let x = random_point(&m, &mut rng);
                let v = pair.value(&x);
                assert!(lin(&x, &mut g) >= v - 1e-9 * v.abs().max(1.0));
            }
        }
        // affine z: linearization exact everywhere
        let pair = DcfPair::new(
            |x: &[f64], g: &mut [f64]| {
                g[0] += 2.0 * x[0];
                x[0] * x[0]
            },
            |x: &[f64], g: &mut [f64]| {
                g[0] += 3.0;
                3.0 * x[0] + 1.0
            },
        );
        let lin = linearize(&pair, &[0.4]);
        let mut g = [0.0];
        for x in [-2.0, 0.0, 0.7, 5.0] {
            assert!((lin(&[x], &mut g) - pair.value(&[x])).abs() < 1e-12);
        }
    }

    #[test]
    fn chance_pairs_agree_in_sign_with_margins() {
        let s = scenario(2);
        let m = DcModel::new(&s, gamma()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..1000 {
            let x = random_point(&m, &mut rng);
            let a = m.to_allocation(&x);
            let local = m.dcf_chance_local().value(&x);
            let margin = deterministic_margin_local(a.bits[0], a.freq[0], &m.chance, &s.task);
            if local.abs() > 1e-9 {
                assert_eq!(local <= 0.0, margin >= 0.0);
            }
            for j in 1..=2 {
                if a.t_up[j - 1] >= s.task.deadline {
                    continue;
                }
                let v = m.dcf_chance_offload(j).value(&x);
                let margin = deterministic_margin_offload(
                    j, a.bits[j], a.freq[j], a.t_up[j - 1], &m.chance, &s.task,
                )
                .unwrap();
                if v.abs() > 1e-9 * s.task.bits {
                    assert_eq!(v <= 0.0, margin >= 0.0);
                }
            }
        }
    }

    #[test]
    fn no_offloading_devices_is_local() {
        let s = scenario(0);
        let r = solve_dc(&s, &DcParams::new(12.0, 1e-2, 1000, gamma()), None).unwrap();
        assert_eq!(r.iterations, 1);
        let local = crate::two_step::local_baseline(&s, gamma()).unwrap();
        assert!(rel_close(r.expected_energy, local.expected_energy, 1e-12));
        assert!(r.is_feasible());
    }

    #[test]
    fn descent_and_feasibility_on_fixed_scenarios() {
        for jn in 1..=3 {
            let s = scenario(jn);
            let r = solve_dc(&s, &DcParams::new(12.0, 1e-2, 1000, gamma()), None).unwrap();
            let trace = r.trace.as_ref().unwrap();
            assert_eq!(trace.iterates.len(), trace.h_values.len());
            for w in trace.h_values.windows(2) {
                assert!(w[1] <= w[0] + DESCENT_SLACK, "{w:?}");
            }
            assert!(r.is_feasible(), "{:?}", r.feasibility);
            let local = crate::two_step::local_baseline(&s, gamma()).unwrap();
            assert!(r.expected_energy < local.expected_energy);
        }
    }
}
