//! Small dense smooth-convex minimizer.
//!
//! Solves
//!
//! ```text
//!     minimize    f(x)
//!     subject to  g_k(x) <= 0      (smooth convex)
//!                 A x = d
//!                 l <= x <= u
//! ```
//!
//! with a logarithmic barrier: for a decreasing sequence of barrier weights
//! `mu` it minimizes `f(x) - mu * sum(log(-g_k(x))) - mu * sum(log(x - l) + log(u - x))`
//! by equality-constrained Newton steps. Hessians are formed by finite
//! differences of the gradients unless a callback supplies one; when the
//! Hessian is not numerically positive definite a projected gradient step is
//! taken instead. Variables are expected to be pre-scaled to order one.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// A twice-differentiable function with an analytic gradient.
pub trait SmoothFn {
    /// Returns the value at `x` and writes the gradient into `grad`.
    fn eval(&self, x: &[f64], grad: &mut [f64]) -> f64;

    /// Writes the Hessian at `x` into `hess` and returns true, or returns
    /// false to request a finite-difference Hessian.
    fn hessian(&self, _x: &[f64], _hess: &mut DMatrix<f64>) -> bool {
        false
    }

    fn value(&self, x: &[f64]) -> f64 {
        let mut g = vec![0.0; x.len()];
        self.eval(x, &mut g)
    }
}

impl<F> SmoothFn for F
where
    F: Fn(&[f64], &mut [f64]) -> f64,
{
    fn eval(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        self(x, grad)
    }
}

/// `a . x - b`.
#[derive(Debug, Clone)]
pub struct Affine {
    pub coeffs: Vec<f64>,
    pub offset: f64,
}

impl Affine {
    pub fn new(coeffs: Vec<f64>, offset: f64) -> Self {
        Affine { coeffs, offset }
    }
}

impl SmoothFn for Affine {
    fn eval(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        grad.copy_from_slice(&self.coeffs);
        self.coeffs.iter().zip(x).map(|(a, v)| a * v).sum::<f64>() - self.offset
    }

    fn hessian(&self, _x: &[f64], hess: &mut DMatrix<f64>) -> bool {
        hess.fill(0.0);
        true
    }
}

pub struct ConvexProgram<'a> {
    pub dim: usize,
    pub objective: Box<dyn SmoothFn + 'a>,
    /// Constraints `g_k(x) <= 0`.
    pub inequalities: Vec<Box<dyn SmoothFn + 'a>>,
    /// Rows of `A` in `A x = d`.
    pub eq_rows: Vec<Vec<f64>>,
    pub eq_rhs: Vec<f64>,
    /// Per-variable bounds; infinite entries are absent bounds.
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl<'a> ConvexProgram<'a> {
    pub fn new(dim: usize, objective: impl SmoothFn + 'a) -> Self {
        ConvexProgram {
            dim,
            objective: Box::new(objective),
            inequalities: Vec::new(),
            eq_rows: Vec::new(),
            eq_rhs: Vec::new(),
            lower: vec![f64::NEG_INFINITY; dim],
            upper: vec![f64::INFINITY; dim],
        }
    }

    pub fn inequality(mut self, g: impl SmoothFn + 'a) -> Self {
        self.inequalities.push(Box::new(g));
        self
    }

    pub fn equality(mut self, row: Vec<f64>, rhs: f64) -> Self {
        self.eq_rows.push(row);
        self.eq_rhs.push(rhs);
        self
    }

    pub fn bounds(mut self, lower: Vec<f64>, upper: Vec<f64>) -> Self {
        self.lower = lower;
        self.upper = upper;
        self
    }

    fn check(&self) -> Result<(), SolverError> {
        let n = self.dim;
        if self.lower.len() != n
            || self.upper.len() != n
            || self.eq_rows.iter().any(|r| r.len() != n)
            || self.eq_rows.len() != self.eq_rhs.len()
        {
            return Err(SolverError::Dimension);
        }
        if self.lower.iter().zip(&self.upper).any(|(l, u)| !(l < u)) {
            return Err(SolverError::Infeasible { slack: f64::INFINITY });
        }
        Ok(())
    }

    /// Largest of the constraint values and bound violations at `x`;
    /// negative means strictly feasible for the inequalities and bounds.
    pub fn max_violation(&self, x: &[f64]) -> f64 {
        let mut worst = f64::NEG_INFINITY;
        for g in &self.inequalities {
            worst = worst.max(g.value(x));
        }
        for i in 0..self.dim {
            if self.lower[i].is_finite() {
                worst = worst.max(self.lower[i] - x[i]);
            }
            if self.upper[i].is_finite() {
                worst = worst.max(x[i] - self.upper[i]);
            }
        }
        if worst.is_nan() {
            f64::INFINITY
        } else {
            worst
        }
    }

    pub fn equality_residual(&self, x: &[f64]) -> f64 {
        self.eq_rows
            .iter()
            .zip(&self.eq_rhs)
            .map(|(row, d)| (dot(row, x) - d).abs())
            .fold(0.0, f64::max)
    }

    fn inequality_count(&self) -> usize {
        self.inequalities.len()
            + self.lower.iter().filter(|l| l.is_finite()).count()
            + self.upper.iter().filter(|u| u.is_finite()).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    /// Acceptance threshold of the KKT residual.
    pub tol: f64,
    /// Allowed constraint violation of a returned point.
    pub feas_tol: f64,
    /// Newton-step budget over all barrier stages.
    pub max_newton_iters: usize,
    pub mu_initial: f64,
    pub mu_factor: f64,
    /// Barrier stages stop once `m * mu` falls below this duality-gap bound.
    pub gap_tol: f64,
    /// Armijo fraction of the backtracking line search.
    pub ls_alpha: f64,
    /// Step shrink factor of the backtracking line search.
    pub ls_beta: f64,
    /// Centering stops when half the squared Newton decrement is below this.
    pub newton_tol: f64,
    /// Relative finite-difference step for Hessians.
    pub fd_step: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            tol: 1e-6,
            feas_tol: 1e-8,
            max_newton_iters: 2000,
            mu_initial: 1.0,
            mu_factor: 0.1,
            gap_tol: 1e-9,
            ls_alpha: 0.3,
            ls_beta: 0.8,
            newton_tol: 1e-12,
            fd_step: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverStatus {
    Converged,
    MaxIter,
    /// Line search could not make progress before the KKT target was met.
    Stalled,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverResult {
    pub x: Vec<f64>,
    pub obj: f64,
    pub kkt_residual: f64,
    pub iterations: usize,
    pub status: SolverStatus,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SolverError {
    #[error("program dimensions are inconsistent")]
    Dimension,
    #[error("no strictly feasible point exists (phase-one slack {slack:.3e})")]
    Infeasible { slack: f64 },
    #[error("equality constraints A x = d are inconsistent")]
    InconsistentEqualities,
    #[error("objective is not finite at the start point")]
    NonFiniteStart,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Minimizes `prog` starting from `x0`. If `x0` is not strictly feasible a
/// phase-one search is run first. The returned objective never exceeds the
/// objective at the (feasible) start.
pub fn minimize(
    prog: &ConvexProgram<'_>,
    x0: &[f64],
    opts: &SolverOptions,
) -> Result<SolverResult, SolverError> {
    prog.check()?;
    if x0.len() != prog.dim {
        return Err(SolverError::Dimension);
    }
    let mut start = project_affine(prog, x0)?;
    if prog.max_violation(&start) >= 0.0 {
        start = phase1_start(prog, &start, opts)?.x;
    }
    let f_start = prog.objective.value(&start);
    if !f_start.is_finite() {
        return Err(SolverError::NonFiniteStart);
    }
    let mut run = Barrier::new(prog, opts);
    let outcome = run.solve(start.clone(), None);
    let mut x = outcome.x;
    let mut obj = prog.objective.value(&x);
    if !(obj <= f_start) {
        x = start;
        obj = f_start;
    }
    let kkt = run.kkt_residual(&x, outcome.mu);
    let status = if outcome.iterations >= opts.max_newton_iters {
        SolverStatus::MaxIter
    } else if kkt <= opts.tol && prog.max_violation(&x) <= opts.feas_tol {
        SolverStatus::Converged
    } else {
        SolverStatus::Stalled
    };
    Ok(SolverResult {
        x,
        obj,
        kkt_residual: kkt,
        iterations: outcome.iterations,
        status,
    })
}

const PHASE1_PROX: f64 = 1e-6;

/// Finds a strictly feasible point of `prog` by minimizing a common slack
/// `s` subject to `g_k(x) <= s`, relaxed bounds and the equalities. Fails
/// with [`SolverError::Infeasible`] when the optimal slack is nonnegative.
pub fn phase1_start(
    prog: &ConvexProgram<'_>,
    guess: &[f64],
    opts: &SolverOptions,
) -> Result<SolverResult, SolverError> {
    prog.check()?;
    let n = prog.dim;
    let x = project_affine(prog, guess)?;
    let slack_index = n;

    // the proximal term keeps the auxiliary problem bounded when some
    // variables are free and only loosen constraints
    let anchor = x.clone();
    let mut aux = ConvexProgram::new(n + 1, move |z: &[f64], grad: &mut [f64]| {
        let mut v = z[slack_index];
        for i in 0..n {
            let d = z[i] - anchor[i];
            v += PHASE1_PROX * d * d;
            grad[i] = 2.0 * PHASE1_PROX * d;
        }
        grad[slack_index] = 1.0;
        v
    });
    for g in &prog.inequalities {
        aux.inequalities.push(Box::new(Lifted { g: g.as_ref(), n }));
    }
    for i in 0..n {
        if prog.lower[i].is_finite() {
            let mut c = vec![0.0; n + 1];
            c[i] = -1.0;
            c[slack_index] = -1.0;
            aux.inequalities.push(Box::new(Affine::new(c, -prog.lower[i])));
        }
        if prog.upper[i].is_finite() {
            let mut c = vec![0.0; n + 1];
            c[i] = 1.0;
            c[slack_index] = -1.0;
            aux.inequalities.push(Box::new(Affine::new(c, prog.upper[i])));
        }
    }
    for (row, &d) in prog.eq_rows.iter().zip(&prog.eq_rhs) {
        let mut r = row.clone();
        r.push(0.0);
        aux.eq_rows.push(r);
        aux.eq_rhs.push(d);
    }
    let initial_violation = prog.max_violation(&x);
    if !initial_violation.is_finite() {
        return Err(SolverError::NonFiniteStart);
    }
    // keep the slack bounded below so the auxiliary problem has a minimizer
    aux.lower[slack_index] = -1.0 - initial_violation.abs();
    let mut z = x.clone();
    z.push(initial_violation.max(0.0) + 1.0);

    let target = -1e-9;
    let mut run = Barrier::new(&aux, opts);
    let stop = |z: &[f64]| prog.max_violation(&z[..n]) < target;
    let outcome = run.solve(z, Some(&stop));
    let point = outcome.x[..n].to_vec();
    let violation = prog.max_violation(&point);
    if violation >= target.min(0.0) {
        return Err(SolverError::Infeasible { slack: violation });
    }
    Ok(SolverResult {
        obj: prog.objective.value(&point),
        x: point,
        kkt_residual: 0.0,
        iterations: outcome.iterations,
        status: SolverStatus::Converged,
    })
}

/// `g(x) - s` over the stacked vector `(x, s)`.
struct Lifted<'b> {
    g: &'b dyn SmoothFn,
    n: usize,
}

impl SmoothFn for Lifted<'_> {
    fn eval(&self, z: &[f64], grad: &mut [f64]) -> f64 {
        let v = self.g.eval(&z[..self.n], &mut grad[..self.n]);
        grad[self.n] = -1.0;
        v - z[self.n]
    }
}

/// Least-norm correction of `x` onto `A x = d`.
fn project_affine(prog: &ConvexProgram<'_>, x: &[f64]) -> Result<Vec<f64>, SolverError> {
    let p = prog.eq_rows.len();
    if p == 0 {
        return Ok(x.to_vec());
    }
    let n = prog.dim;
    let a = DMatrix::from_fn(p, n, |r, c| prog.eq_rows[r][c]);
    let resid = DVector::from_fn(p, |r, _| dot(&prog.eq_rows[r], x) - prog.eq_rhs[r]);
    let scale = 1.0 + prog.eq_rhs.iter().fold(0.0f64, |m, d| m.max(d.abs()));
    if resid.amax() <= 1e-14 * scale {
        return Ok(x.to_vec());
    }
    let aat = &a * a.transpose();
    let w = aat
        .lu()
        .solve(&resid)
        .ok_or(SolverError::InconsistentEqualities)?;
    let corr = a.transpose() * w;
    let out: Vec<f64> = x.iter().zip(corr.iter()).map(|(v, c)| v - c).collect();
    if prog.equality_residual(&out) > 1e-9 * scale {
        return Err(SolverError::InconsistentEqualities);
    }
    Ok(out)
}

/// Early-exit test evaluated after every Newton step.
type StopFn<'s> = &'s dyn Fn(&[f64]) -> bool;

struct StageOutcome {
    x: Vec<f64>,
    mu: f64,
    iterations: usize,
}

/// Barrier-method state shared across centering stages.
struct Barrier<'p, 'a> {
    prog: &'p ConvexProgram<'a>,
    opts: &'p SolverOptions,
    a: DMatrix<f64>,
    grad: Vec<f64>,
    scratch: Vec<f64>,
    fd_plus: Vec<f64>,
    fd_minus: Vec<f64>,
    hess_part: DMatrix<f64>,
    iterations: usize,
}

impl<'p, 'a> Barrier<'p, 'a> {
    fn new(prog: &'p ConvexProgram<'a>, opts: &'p SolverOptions) -> Self {
        let n = prog.dim;
        let p = prog.eq_rows.len();
        Barrier {
            prog,
            opts,
            a: DMatrix::from_fn(p, n, |r, c| prog.eq_rows[r][c]),
            grad: vec![0.0; n],
            scratch: vec![0.0; n],
            fd_plus: vec![0.0; n],
            fd_minus: vec![0.0; n],
            hess_part: DMatrix::zeros(n, n),
            iterations: 0,
        }
    }

    fn solve(&mut self, mut x: Vec<f64>, stop: Option<StopFn<'_>>) -> StageOutcome {
        let m = self.prog.inequality_count();
        let mut mu = if m == 0 { 0.0 } else { self.opts.mu_initial };
        loop {
            let done = self.center(&mut x, mu, stop);
            if done || stop.is_some_and(|s| s(&x)) {
                break;
            }
            if m == 0 || (m as f64) * mu < self.opts.gap_tol {
                break;
            }
            if self.iterations >= self.opts.max_newton_iters {
                break;
            }
            mu *= self.opts.mu_factor;
        }
        StageOutcome {
            x,
            mu,
            iterations: self.iterations,
        }
    }

    /// Barrier function value; `None` outside the strict domain.
    fn phi(&self, x: &[f64], mu: f64) -> Option<f64> {
        let prog = self.prog;
        let mut total = prog.objective.value(x);
        if !total.is_finite() {
            return None;
        }
        for g in &prog.inequalities {
            let v = g.value(x);
            if !(v < 0.0) {
                return None;
            }
            total -= mu * (-v).ln();
        }
        for i in 0..prog.dim {
            if prog.lower[i].is_finite() {
                let s = x[i] - prog.lower[i];
                if !(s > 0.0) {
                    return None;
                }
                total -= mu * s.ln();
            }
            if prog.upper[i].is_finite() {
                let s = prog.upper[i] - x[i];
                if !(s > 0.0) {
                    return None;
                }
                total -= mu * s.ln();
            }
        }
        Some(total)
    }

    /// Gradient of the barrier function into `self.grad`.
    fn barrier_gradient(&mut self, x: &[f64], mu: f64) {
        let prog = self.prog;
        let n = prog.dim;
        prog.objective.eval(x, &mut self.grad);
        for g in &prog.inequalities {
            let v = g.eval(x, &mut self.scratch);
            let w = mu / -v;
            for i in 0..n {
                self.grad[i] += w * self.scratch[i];
            }
        }
        for i in 0..n {
            if prog.lower[i].is_finite() {
                self.grad[i] -= mu / (x[i] - prog.lower[i]);
            }
            if prog.upper[i].is_finite() {
                self.grad[i] += mu / (prog.upper[i] - x[i]);
            }
        }
    }

    /// Writes the Hessian of `f` at `x` into `self.hess_part`.
    fn function_hessian(&mut self, f: &dyn SmoothFn, x: &[f64]) {
        if f.hessian(x, &mut self.hess_part) {
            return;
        }
        let prog = self.prog;
        let n = prog.dim;
        let mut probe = x.to_vec();
        for c in 0..n {
            let h = self.opts.fd_step * x[c].abs().max(1e-2);
            let back_ok = x[c] - h >= prog.lower[c];
            let fwd_ok = x[c] + h <= prog.upper[c];
            let (lo, hi) = match (back_ok, fwd_ok) {
                (true, true) => (x[c] - h, x[c] + h),
                (false, true) => (x[c], x[c] + h),
                (true, false) => (x[c] - h, x[c]),
                (false, false) => {
                    let hh = 0.5 * (prog.upper[c] - prog.lower[c]).min(h);
                    (x[c] - hh * 0.5, x[c] + hh * 0.5)
                }
            };
            probe[c] = hi;
            f.eval(&probe, &mut self.fd_plus);
            probe[c] = lo;
            f.eval(&probe, &mut self.fd_minus);
            probe[c] = x[c];
            let inv = 1.0 / (hi - lo);
            for r in 0..n {
                self.hess_part[(r, c)] = (self.fd_plus[r] - self.fd_minus[r]) * inv;
            }
        }
        let sym = 0.5 * (&self.hess_part + self.hess_part.transpose());
        self.hess_part.copy_from(&sym);
    }

    fn barrier_hessian(&mut self, x: &[f64], mu: f64) -> DMatrix<f64> {
        let prog = self.prog;
        let n = prog.dim;
        self.function_hessian(prog.objective.as_ref(), x);
        let mut h = self.hess_part.clone();
        for k in 0..prog.inequalities.len() {
            let g = prog.inequalities[k].as_ref();
            let v = g.eval(x, &mut self.scratch);
            let gv = DVector::from_column_slice(&self.scratch);
            h.ger(mu / (v * v), &gv, &gv, 1.0);
            self.function_hessian(g, x);
            h += &self.hess_part * (mu / -v);
        }
        for i in 0..n {
            if prog.lower[i].is_finite() {
                let s = x[i] - prog.lower[i];
                h[(i, i)] += mu / (s * s);
            }
            if prog.upper[i].is_finite() {
                let s = prog.upper[i] - x[i];
                h[(i, i)] += mu / (s * s);
            }
        }
        h
    }

    /// Projects `v` onto the null space of `A`.
    fn project_null(&self, v: &DVector<f64>) -> DVector<f64> {
        if self.a.nrows() == 0 {
            return v.clone();
        }
        let aat = &self.a * self.a.transpose();
        match aat.lu().solve(&(&self.a * v)) {
            Some(w) => v - self.a.transpose() * w,
            None => v.clone(),
        }
    }

    /// Newton direction of the equality-constrained centering problem, or a
    /// projected gradient direction when the Hessian is not positive definite.
    fn direction(&mut self, x: &[f64], mu: f64) -> DVector<f64> {
        let n = self.prog.dim;
        let p = self.a.nrows();
        let g = DVector::from_column_slice(&self.grad);
        let h = self.barrier_hessian(x, mu);
        if h.iter().all(|v| v.is_finite()) && h.clone().cholesky().is_some() {
            if p == 0 {
                if let Some(ch) = h.clone().cholesky() {
                    return -ch.solve(&g);
                }
            }
            let mut kkt = DMatrix::zeros(n + p, n + p);
            kkt.view_mut((0, 0), (n, n)).copy_from(&h);
            kkt.view_mut((n, 0), (p, n)).copy_from(&self.a);
            kkt.view_mut((0, n), (n, p)).copy_from(&self.a.transpose());
            let mut rhs = DVector::zeros(n + p);
            rhs.rows_mut(0, n).copy_from(&(-&g));
            for r in 0..p {
                rhs[n + r] = self.prog.eq_rhs[r] - dot(&self.prog.eq_rows[r], x);
            }
            if let Some(sol) = kkt.lu().solve(&rhs) {
                let d = sol.rows(0, n).into_owned();
                if d.iter().all(|v| v.is_finite()) {
                    return d;
                }
            }
        }
        log::trace!("hessian not positive definite, taking a gradient step");
        let d = -self.project_null(&g);
        // rescale so a unit step is not absurdly long
        let norm = d.amax();
        let xs = x.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        if norm > xs {
            d * (xs / norm)
        } else {
            d
        }
    }

    /// Centering at barrier weight `mu`; returns true when `stop` fired.
    fn center(
        &mut self,
        x: &mut [f64],
        mu: f64,
        stop: Option<StopFn<'_>>,
    ) -> bool {
        let n = self.prog.dim;
        let Some(mut phi_x) = self.phi(x, mu) else {
            return false;
        };
        let mut trial = vec![0.0; n];
        while self.iterations < self.opts.max_newton_iters {
            self.iterations += 1;
            self.barrier_gradient(x, mu);
            let d = self.direction(x, mu);
            let slope: f64 = d.iter().zip(&self.grad).map(|(a, b)| a * b).sum();
            if !(slope < 0.0) || -0.5 * slope <= self.opts.newton_tol {
                break;
            }
            let mut t = 1.0;
            let mut accepted = None;
            while t > 1e-16 {
                for i in 0..n {
                    trial[i] = x[i] + t * d[i];
                }
                if let Some(v) = self.phi(&trial, mu) {
                    if v <= phi_x + self.opts.ls_alpha * t * slope {
                        accepted = Some(v);
                        break;
                    }
                }
                t *= self.opts.ls_beta;
            }
            match accepted {
                Some(v) => {
                    x.copy_from_slice(&trial);
                    let gain = phi_x - v;
                    phi_x = v;
                    if stop.is_some_and(|s| s(x)) {
                        return true;
                    }
                    if gain <= 1e-15 * phi_x.abs().max(1.0) && -slope <= 1e-10 {
                        break;
                    }
                }
                None => {
                    log::trace!("line search made no progress at mu={mu:e}");
                    break;
                }
            }
        }
        false
    }

    /// Stationarity is measured by half the squared Newton decrement of the
    /// barrier problem (a bound on its suboptimality that stays meaningful
    /// when bound multipliers blow up), combined with primal feasibility and
    /// the duality-gap bound `m * mu`, both relative to the objective scale.
    fn kkt_residual(&mut self, x: &[f64], mu: f64) -> f64 {
        let prog = self.prog;
        let fscale = prog.objective.value(x).abs().max(1.0);
        let gap = prog.inequality_count() as f64 * mu / fscale;
        let primal = prog.equality_residual(x).max(prog.max_violation(x).max(0.0));
        let stationarity = if self.phi(x, mu).is_some() {
            self.barrier_gradient(x, mu);
            let d = self.direction(x, mu);
            let slope: f64 = d.iter().zip(&self.grad).map(|(a, b)| a * b).sum();
            0.5 * slope.abs() / fscale
        } else {
            f64::INFINITY
        };
        stationarity.max(primal).max(gap)
    }
}
