//! Dense operator-splitting (ADMM) solver for convex QPs
//!
//! ```text
//!     minimize    ½ xᵀPx + qᵀx
//!     subject to  l ≤ Ax ≤ u
//! ```
//!
//! The iteration follows the OSQP splitting: Ruiz equilibration, a cached
//! Cholesky factor of `P + σI + AᵀRA` (only `n × n`, which is cheap for the
//! small-variable, many-row problems solved here), over-relaxation, adaptive
//! step size, infeasibility certificates and an active-set polish step.
//! LPs are solved as QPs with a tiny ridge in `P`.
//!
//! The second half of this module builds the per-leader safety filter.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::certify::LocalConstraint;
use crate::dynamics::Interval;
use crate::error::{Error, Result};

const INF: f64 = f64::INFINITY;
const RHO_MIN: f64 = 1e-6;
const RHO_MAX: f64 = 1e6;
const RHO_EQ_SCALE: f64 = 1e3;

#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    pub p: DMatrix<f64>,
    pub q: DVector<f64>,
    pub a: DMatrix<f64>,
    pub l: DVector<f64>,
    pub u: DVector<f64>,
}

impl QpProblem {
    pub fn new(p: DMatrix<f64>, q: DVector<f64>, a: DMatrix<f64>, l: DVector<f64>, u: DVector<f64>) -> Result<Self> {
        let n = q.len();
        if p.nrows() != n || p.ncols() != n {
            return Err(Error::Dimension(format!("P is {}x{}, expected {n}x{n}", p.nrows(), p.ncols())));
        }
        if a.ncols() != n || l.len() != a.nrows() || u.len() != a.nrows() {
            return Err(Error::Dimension(format!(
                "A is {}x{}, l has {}, u has {} entries, expected {n} columns",
                a.nrows(),
                a.ncols(),
                l.len(),
                u.len()
            )));
        }
        if let Some(i) = (0..l.len()).find(|&i| l[i] > u[i] || l[i].is_nan() || u[i].is_nan()) {
            return Err(Error::InvalidParameter(format!("constraint {i} has l > u")));
        }
        if (0..n).any(|i| (0..i).any(|j| (p[(i, j)] - p[(j, i)]).abs() > 1e-12 * (1.0 + p[(i, j)].abs()))) {
            return Err(Error::InvalidParameter("P is not symmetric".into()));
        }
        // PSD check: Cholesky of P + ridge
        let ridge = 1e-9 * (1.0 + p.diagonal().amax());
        if Cholesky::new(&p + DMatrix::identity(n, n) * ridge).is_none() {
            return Err(Error::InvalidParameter("P is not positive semidefinite".into()));
        }
        Ok(Self { p, q, a, l, u })
    }

    pub fn num_vars(&self) -> usize {
        self.q.len()
    }

    pub fn num_constraints(&self) -> usize {
        self.l.len()
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.p * x)) + self.q.dot(x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QpStatus {
    Optimal,
    MaxIterations,
    PrimalInfeasible,
    DualInfeasible,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub x: DVector<f64>,
    pub y: DVector<f64>,
    pub status: QpStatus,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub iterations: usize,
    pub polished: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QpSettings {
    pub eps_abs: f64,
    pub eps_rel: f64,
    pub max_iter: usize,
    pub rho: f64,
    pub sigma: f64,
    pub alpha: f64,
    pub adaptive_rho: bool,
    pub adaptive_interval: usize,
    pub check_interval: usize,
    pub scaling_iters: usize,
    pub polish: bool,
    pub polish_delta: f64,
    pub polish_refine_iters: usize,
    pub eps_prim_inf: f64,
    pub eps_dual_inf: f64,
}

impl Default for QpSettings {
    fn default() -> Self {
        Self {
            eps_abs: 1e-6,
            eps_rel: 1e-6,
            max_iter: 20_000,
            rho: 0.1,
            sigma: 1e-6,
            alpha: 1.6,
            adaptive_rho: true,
            adaptive_interval: 25,
            check_interval: 5,
            scaling_iters: 10,
            polish: true,
            polish_delta: 1e-7,
            polish_refine_iters: 12,
            eps_prim_inf: 1e-7,
            eps_dual_inf: 1e-7,
        }
    }
}

impl QpSettings {
    pub fn with_tolerance(mut self, tol: f64) -> Self {
        self.eps_abs = tol;
        self.eps_rel = tol;
        self
    }
}

struct Scaled {
    p: DMatrix<f64>,
    q: DVector<f64>,
    a: DMatrix<f64>,
    l: DVector<f64>,
    u: DVector<f64>,
    d: DVector<f64>,
    e: DVector<f64>,
    c: f64,
}

fn col_inf_norm(m: &DMatrix<f64>, j: usize) -> f64 {
    m.column(j).amax()
}

fn equilibrate(prob: &QpProblem, iters: usize) -> Scaled {
    let (n, m) = (prob.num_vars(), prob.num_constraints());
    let mut p = prob.p.clone();
    let mut q = prob.q.clone();
    let mut a = prob.a.clone();
    let mut d = DVector::from_element(n, 1.0);
    let mut e = DVector::from_element(m, 1.0);
    let mut c = 1.0;
    let limit = |v: f64| if v < 1e-4 { 1.0 } else { v.min(1e4) };
    for _ in 0..iters {
        let dt: DVector<f64> =
            DVector::from_fn(n, |j, _| 1.0 / limit(col_inf_norm(&p, j).max(col_inf_norm(&a, j))).sqrt());
        let et: DVector<f64> = DVector::from_fn(m, |i, _| 1.0 / limit(a.row(i).amax()).sqrt());
        for j in 0..n {
            for i in 0..n {
                p[(i, j)] *= dt[i] * dt[j];
            }
            for i in 0..m {
                a[(i, j)] *= et[i] * dt[j];
            }
        }
        q.component_mul_assign(&dt);
        d.component_mul_assign(&dt);
        e.component_mul_assign(&et);
        let mean_p = if n > 0 { (0..n).map(|j| col_inf_norm(&p, j)).sum::<f64>() / n as f64 } else { 0.0 };
        let gamma = 1.0 / limit(mean_p.max(q.amax()));
        p *= gamma;
        q *= gamma;
        c *= gamma;
    }
    let l = prob.l.component_mul(&e);
    let u = prob.u.component_mul(&e);
    Scaled { p, q, a, l, u, d, e, c }
}

fn rho_vector(l: &DVector<f64>, u: &DVector<f64>, rho: f64) -> DVector<f64> {
    DVector::from_fn(l.len(), |i, _| {
        if l[i] == -INF && u[i] == INF {
            RHO_MIN
        } else if (u[i] - l[i]).abs() < 1e-12 {
            RHO_EQ_SCALE * rho
        } else {
            rho
        }
    })
}

fn factor(s: &Scaled, rho: &DVector<f64>, sigma: f64) -> Result<Cholesky<f64, Dyn>> {
    let n = s.q.len();
    let mut ra = s.a.clone();
    for (i, mut row) in ra.row_iter_mut().enumerate() {
        row *= rho[i];
    }
    let k = &s.p + DMatrix::identity(n, n) * sigma + s.a.tr_mul(&ra);
    Cholesky::new(k).ok_or_else(|| Error::Solver("KKT factorization failed".into()))
}

fn project(v: &mut DVector<f64>, l: &DVector<f64>, u: &DVector<f64>) {
    for i in 0..v.len() {
        v[i] = v[i].max(l[i]).min(u[i]);
    }
}

struct Residuals {
    prim: f64,
    dual: f64,
    eps_prim: f64,
    eps_dual: f64,
    prim_norm: f64,
    dual_norm: f64,
}

fn residuals(s: &Scaled, x: &DVector<f64>, z: &DVector<f64>, y: &DVector<f64>, set: &QpSettings) -> Residuals {
    let ax = &s.a * x;
    let px = &s.p * x;
    let aty = s.a.tr_mul(y);
    let einv = s.e.map(|v| 1.0 / v);
    let dinv = s.d.map(|v| 1.0 / v);
    let prim = (&ax - z).component_mul(&einv).amax();
    let ax_n = ax.component_mul(&einv).amax();
    let z_n = z.component_mul(&einv).amax();
    let r_dual = (&px + &s.q + &aty).component_mul(&dinv);
    let dual = r_dual.amax() / s.c;
    let px_n = px.component_mul(&dinv).amax() / s.c;
    let aty_n = aty.component_mul(&dinv).amax() / s.c;
    let q_n = s.q.component_mul(&dinv).amax() / s.c;
    Residuals {
        prim,
        dual,
        eps_prim: set.eps_abs + set.eps_rel * ax_n.max(z_n),
        eps_dual: set.eps_abs + set.eps_rel * px_n.max(aty_n).max(q_n),
        prim_norm: (&ax - z).amax() / (1e-10 + ax.amax().max(z.amax())),
        dual_norm: (&px + &s.q + &aty).amax() / (1e-10 + px.amax().max(aty.amax()).max(s.q.amax())),
    }
}

fn primal_infeasible(s: &Scaled, dy: &DVector<f64>, eps: f64) -> bool {
    let scaled = dy.component_mul(&s.e);
    let norm = scaled.amax();
    if norm < 1e-30 {
        return false;
    }
    let at_dy = s.a.tr_mul(dy).component_div(&s.d).amax();
    if at_dy >= eps * norm {
        return false;
    }
    let mut support = 0.0;
    for i in 0..dy.len() {
        if dy[i] > 0.0 {
            if s.u[i] == INF {
                return false;
            }
            support += s.u[i] * dy[i];
        } else if dy[i] < 0.0 {
            if s.l[i] == -INF {
                return false;
            }
            support += s.l[i] * dy[i];
        }
    }
    support < -eps * norm
}

fn dual_infeasible(s: &Scaled, dx: &DVector<f64>, eps: f64) -> bool {
    let norm = dx.component_mul(&s.d).amax();
    if norm < 1e-30 {
        return false;
    }
    let tol = eps * norm;
    if (&s.p * dx).component_div(&s.d).amax() > s.c * tol {
        return false;
    }
    if s.q.dot(dx) > -s.c * tol {
        return false;
    }
    let adx = (&s.a * dx).component_div(&s.e);
    (0..adx.len()).all(|i| {
        let lo_ok = s.l[i] == -INF || adx[i] >= -tol;
        let hi_ok = s.u[i] == INF || adx[i] <= tol;
        lo_ok && hi_ok
    })
}

/// Iterations between polish attempts while far from tolerance.
const POLISH_INTERVAL: usize = 250;

/// Solve from a cold start.
pub fn solve(prob: &QpProblem, settings: &QpSettings) -> Result<QpSolution> {
    solve_warm(prob, settings, None)
}

/// Solve starting from a previous primal/dual pair (unscaled).
pub fn solve_warm(
    prob: &QpProblem,
    settings: &QpSettings,
    warm: Option<(&DVector<f64>, &DVector<f64>)>,
) -> Result<QpSolution> {
    let (n, m) = (prob.num_vars(), prob.num_constraints());
    if n == 0 {
        return Err(Error::Dimension("QP has no variables".into()));
    }
    let s = equilibrate(prob, settings.scaling_iters);
    let mut rho_scalar = settings.rho;
    let mut rho = rho_vector(&s.l, &s.u, rho_scalar);
    let mut chol = factor(&s, &rho, settings.sigma)?;

    let (mut x, mut y) = match warm {
        Some((x0, y0)) if x0.len() == n && y0.len() == m => {
            (x0.component_div(&s.d), y0.component_mul(&s.e.map(|v| 1.0 / v)) * s.c)
        }
        _ => (DVector::zeros(n), DVector::zeros(m)),
    };
    let mut z = &s.a * &x;
    project(&mut z, &s.l, &s.u);

    let alpha = settings.alpha;
    let mut status = QpStatus::MaxIterations;
    let mut iters = 0;
    let mut last = residuals(&s, &x, &z, &y, settings);
    let mut tried_polish_at = usize::MAX;

    for k in 1..=settings.max_iter {
        iters = k;
        let x_prev = x.clone();
        let y_prev = y.clone();

        let rhs = &x * settings.sigma - &s.q + s.a.tr_mul(&(rho.component_mul(&z) - &y));
        let x_tilde = chol.solve(&rhs);
        let z_tilde = &s.a * &x_tilde;
        x = &x_tilde * alpha + &x_prev * (1.0 - alpha);
        let z_relaxed = &z_tilde * alpha + &z * (1.0 - alpha);
        let mut z_new = &z_relaxed + y.component_div(&rho);
        project(&mut z_new, &s.l, &s.u);
        y += rho.component_mul(&(&z_relaxed - &z_new));
        z = z_new;

        if k % settings.check_interval != 0 && k != settings.max_iter {
            continue;
        }
        last = residuals(&s, &x, &z, &y, settings);
        if !last.prim.is_finite() || !last.dual.is_finite() {
            return Err(Error::Solver("non-finite iterate".into()));
        }
        if last.prim <= last.eps_prim && last.dual <= last.eps_dual {
            status = QpStatus::Optimal;
            break;
        }
        // early polish once the iterate is close, and periodically; accepted only if it meets tolerance
        let close = last.prim < 1e3 * last.eps_prim && last.dual < 1e3 * last.eps_dual;
        let due = k % POLISH_INTERVAL == 0;
        let rested = tried_polish_at == usize::MAX || k - tried_polish_at >= 50;
        if settings.polish && (close || due) && rested {
            tried_polish_at = k;
            let (xu, yu, zu) = unscale(&s, &x, &y, &z);
            if let Some(pol) = polish(prob, &xu, &yu, &zu, settings) {
                if pol.primal_residual <= tol_prim(prob, &pol.x, settings)
                    && pol.dual_residual <= tol_dual(prob, &pol.x, &pol.y, settings)
                {
                    return Ok(QpSolution { iterations: k, ..pol });
                }
            }
        }
        let dy = &y - &y_prev;
        if primal_infeasible(&s, &dy, settings.eps_prim_inf) {
            status = QpStatus::PrimalInfeasible;
            y = dy;
            break;
        }
        let dx = &x - &x_prev;
        if dual_infeasible(&s, &dx, settings.eps_dual_inf) {
            status = QpStatus::DualInfeasible;
            x = dx;
            break;
        }
        if settings.adaptive_rho && k % settings.adaptive_interval == 0 {
            let ratio = (last.prim_norm / (last.dual_norm + 1e-30)).sqrt();
            let new_rho = (rho_scalar * ratio).clamp(RHO_MIN, RHO_MAX);
            if new_rho > 5.0 * rho_scalar || new_rho < 0.2 * rho_scalar {
                rho_scalar = new_rho;
                rho = rho_vector(&s.l, &s.u, rho_scalar);
                chol = factor(&s, &rho, settings.sigma)?;
            }
        }
    }

    let (xu, yu, zu) = unscale(&s, &x, &y, &z);
    let mut sol = QpSolution {
        x: xu,
        y: yu,
        status,
        primal_residual: last.prim,
        dual_residual: last.dual,
        iterations: iters,
        polished: false,
    };
    if settings.polish && matches!(status, QpStatus::Optimal | QpStatus::MaxIterations) {
        if let Some(pol) = polish(prob, &sol.x, &sol.y, &zu, settings) {
            let ok_tol = pol.primal_residual <= tol_prim(prob, &pol.x, settings)
                && pol.dual_residual <= tol_dual(prob, &pol.x, &pol.y, settings);
            let no_worse = pol.primal_residual <= sol.primal_residual && pol.dual_residual <= sol.dual_residual;
            if ok_tol || no_worse {
                let status = if ok_tol { QpStatus::Optimal } else { status };
                sol = QpSolution { iterations: iters, status, ..pol };
            }
        }
    }
    Ok(sol)
}

fn unscale(s: &Scaled, x: &DVector<f64>, y: &DVector<f64>, z: &DVector<f64>) -> (DVector<f64>, DVector<f64>, DVector<f64>) {
    (
        x.component_mul(&s.d),
        y.component_mul(&s.e) / s.c,
        z.component_div(&s.e),
    )
}

fn projected(prob: &QpProblem, ax: &DVector<f64>) -> DVector<f64> {
    let mut z = ax.clone();
    project(&mut z, &prob.l, &prob.u);
    z
}

fn tol_prim(prob: &QpProblem, x: &DVector<f64>, set: &QpSettings) -> f64 {
    let ax = &prob.a * x;
    let z = projected(prob, &ax);
    set.eps_abs + set.eps_rel * ax.amax().max(z.amax())
}

fn tol_dual(prob: &QpProblem, x: &DVector<f64>, y: &DVector<f64>, set: &QpSettings) -> f64 {
    let px = (&prob.p * x).amax();
    let aty = prob.a.tr_mul(y).amax();
    set.eps_abs + set.eps_rel * px.max(aty).max(prob.q.amax())
}

/// Active-set corrections tried after the initial guess.
const POLISH_CORRECTIONS: usize = 24;

/// Guess the active set from `(x, y, z)` and solve the equality-constrained
/// QP on it with a regularized, iteratively refined KKT solve. Wrong-sign
/// multipliers and violated inactive rows then adjust the guess one row at
/// a time; the first candidate within tolerance wins, otherwise the least
/// infeasible one is returned.
fn polish(
    prob: &QpProblem,
    _x: &DVector<f64>,
    y: &DVector<f64>,
    z: &DVector<f64>,
    set: &QpSettings,
) -> Option<QpSolution> {
    let m = prob.num_constraints();
    // +1 upper active, -1 lower active, 0 inactive
    let mut side = vec![0i8; m];
    for i in 0..m {
        if (prob.u[i] - prob.l[i]).abs() < 1e-12 {
            side[i] = 1;
        } else if prob.l[i] > -INF && z[i] - prob.l[i] < -y[i] {
            side[i] = -1;
        } else if prob.u[i] < INF && prob.u[i] - z[i] < y[i] {
            side[i] = 1;
        }
    }
    let mut best: Option<QpSolution> = None;
    for _ in 0..=POLISH_CORRECTIONS {
        let (sol, raw) = polish_on(prob, &side, set)?;
        let ok = sol.primal_residual <= tol_prim(prob, &sol.x, set)
            && sol.dual_residual <= tol_dual(prob, &sol.x, &sol.y, set);
        let better = best
            .as_ref()
            .map_or(true, |b| sol.primal_residual.max(sol.dual_residual) < b.primal_residual.max(b.dual_residual));
        if ok {
            return Some(sol);
        }
        // most wrong-signed active multiplier, else most violated inactive row;
        // multipliers within rounding of zero are degenerate, not wrong
        let mut worst_dual = (1e-9 * (1.0 + raw.amax()), usize::MAX);
        for i in 0..m {
            let v = raw[i];
            let wrong = match side[i] {
                -1 if (prob.u[i] - prob.l[i]).abs() >= 1e-12 => v.max(0.0),
                1 if (prob.u[i] - prob.l[i]).abs() >= 1e-12 => (-v).max(0.0),
                _ => 0.0,
            };
            if wrong > worst_dual.0 {
                worst_dual = (wrong, i);
            }
        }
        let ax = &prob.a * &sol.x;
        let mut worst_prim = (0.0, usize::MAX, 0i8);
        for i in 0..m {
            if side[i] != 0 {
                continue;
            }
            let (lo, hi) = (prob.l[i] - ax[i], ax[i] - prob.u[i]);
            if lo > worst_prim.0 {
                worst_prim = (lo, i, -1);
            }
            if hi > worst_prim.0 {
                worst_prim = (hi, i, 1);
            }
        }
        if better {
            best = Some(sol);
        }
        if worst_dual.1 != usize::MAX {
            side[worst_dual.1] = 0;
        } else if worst_prim.1 != usize::MAX {
            side[worst_prim.1] = worst_prim.2;
        } else {
            break;
        }
    }
    best
}

/// Solve the KKT system with the rows marked in `side` held at their bounds.
/// Also returns the unclipped multipliers.
fn polish_on(prob: &QpProblem, side: &[i8], set: &QpSettings) -> Option<(QpSolution, DVector<f64>)> {
    let (n, m) = (prob.num_vars(), prob.num_constraints());
    let rows: Vec<usize> = (0..m).filter(|&i| side[i] != 0).collect();
    let delta = set.polish_delta;
    let na = rows.len();
    let mut a_act = DMatrix::zeros(na, n);
    let mut b = DVector::zeros(na);
    for (r, &i) in rows.iter().enumerate() {
        a_act.set_row(r, &prob.a.row(i));
        b[r] = if side[i] > 0 { prob.u[i] } else { prob.l[i] };
    }
    // K̂ = [P+δI, Aᵀ; A, -δI]; reduced to (P + δI + AᵀA/δ) dx = r1 + Aᵀ r2 / δ
    let reduced = &prob.p + DMatrix::identity(n, n) * delta + a_act.tr_mul(&a_act) / delta;
    let chol = Cholesky::new(reduced)?;
    let solve_hat = |r1: &DVector<f64>, r2: &DVector<f64>| {
        let dx = chol.solve(&(r1 + a_act.tr_mul(r2) / delta));
        let dy = (&a_act * &dx - r2) / delta;
        (dx, dy)
    };
    let rhs1 = -&prob.q;
    let (mut xp, mut ya) = solve_hat(&rhs1, &b);
    for _ in 0..set.polish_refine_iters {
        let r1 = &rhs1 - &prob.p * &xp - a_act.tr_mul(&ya);
        let r2 = &b - &a_act * &xp;
        if r1.amax().max(r2.amax()) < 1e-14 {
            break;
        }
        let (dx, dy) = solve_hat(&r1, &r2);
        xp += dx;
        ya += dy;
    }
    if xp.iter().chain(ya.iter()).any(|v| !v.is_finite()) {
        return None;
    }
    let mut raw = DVector::zeros(m);
    let mut yp = DVector::zeros(m);
    for (r, &i) in rows.iter().enumerate() {
        let v = ya[r];
        raw[i] = v;
        yp[i] = match side[i] {
            -1 if (prob.u[i] - prob.l[i]).abs() >= 1e-12 => v.min(0.0),
            _ if prob.l[i] > -INF && (prob.u[i] - prob.l[i]).abs() < 1e-12 => v,
            _ => v.max(0.0),
        };
    }
    let ax = &prob.a * &xp;
    let zp = projected(prob, &ax);
    let prim = (&ax - &zp).amax();
    let dual = (&prob.p * &xp + &prob.q + prob.a.tr_mul(&yp)).amax();
    Some((
        QpSolution {
            x: xp,
            y: yp,
            status: QpStatus::Optimal,
            primal_residual: prim,
            dual_residual: dual,
            iterations: 0,
            polished: true,
        },
        raw,
    ))
}

/// Independent post-solve optimality check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KktReport {
    pub stationarity: f64,
    pub primal_feasibility: f64,
    pub complementarity: f64,
    pub dual_sign: f64,
}

impl KktReport {
    pub fn max(&self) -> f64 {
        self.stationarity
            .max(self.primal_feasibility)
            .max(self.complementarity)
            .max(self.dual_sign)
    }
}

pub fn kkt_residuals(prob: &QpProblem, x: &DVector<f64>, y: &DVector<f64>) -> KktReport {
    let ax = &prob.a * x;
    let stationarity = (&prob.p * x + &prob.q + prob.a.tr_mul(y)).amax();
    let mut primal: f64 = 0.0;
    let mut comp: f64 = 0.0;
    let mut sign: f64 = 0.0;
    for i in 0..y.len() {
        primal = primal.max(prob.l[i] - ax[i]).max(ax[i] - prob.u[i]);
        if y[i] > 0.0 {
            if prob.u[i] == INF {
                sign = sign.max(y[i]);
            } else {
                comp = comp.max(y[i] * (prob.u[i] - ax[i]).abs());
            }
        } else if y[i] < 0.0 {
            if prob.l[i] == -INF {
                sign = sign.max(-y[i]);
            } else {
                comp = comp.max(-y[i] * (ax[i] - prob.l[i]).abs());
            }
        }
    }
    KktReport {
        stationarity,
        primal_feasibility: primal.max(0.0),
        complementarity: comp,
        dual_sign: sign,
    }
}

/// Per-leader slack-penalized safety filter
///
/// Variables are `[u (m) | t (m per constraint) | s (one per constraint)]`.
/// Each constraint's concave piecewise-linear input term is encoded by
/// epigraph variables `t_c ≤ lo_c (u_c - a_c)`, `t_c ≤ hi_c (u_c - a_c)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SafetyFilter {
    pub problem: QpProblem,
    pub input_dim: usize,
    pub num_constraints: usize,
    blocks: Vec<(usize, LocalConstraint)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterSolution {
    pub u: Vec<f64>,
    pub slack: Vec<f64>,
    pub status: QpStatus,
}

pub fn build_safety_filter(
    leader: usize,
    u_nom: &[f64],
    constraints: &[LocalConstraint],
    rho: f64,
    input_box: Interval,
) -> Result<SafetyFilter> {
    for c in constraints {
        if c.leader != leader {
            return Err(Error::InvalidParameter(format!(
                "constraint for leader {} passed to filter of leader {leader}",
                c.leader
            )));
        }
    }
    build_filter(&[leader], u_nom, constraints, rho, input_box)
}

/// One centralized filter over the stacked inputs of `leaders`; `u_nom` is
/// stacked in the same order. Its solution coincides with the per-leader filters.
pub fn build_joint_filter(
    leaders: &[usize],
    u_nom: &[f64],
    constraints: &[LocalConstraint],
    rho: f64,
    input_box: Interval,
) -> Result<SafetyFilter> {
    build_filter(leaders, u_nom, constraints, rho, input_box)
}

fn build_filter(
    leaders: &[usize],
    u_nom: &[f64],
    constraints: &[LocalConstraint],
    rho: f64,
    input_box: Interval,
) -> Result<SafetyFilter> {
    if !(rho > 0.0) {
        return Err(Error::InvalidParameter(format!("slack penalty must be positive, got {rho}")));
    }
    if leaders.is_empty() || u_nom.is_empty() || u_nom.len() % leaders.len() != 0 {
        return Err(Error::Dimension("nominal input does not match the leader count".into()));
    }
    let nl = leaders.len();
    let m = u_nom.len() / nl;
    let mut offsets = Vec::with_capacity(constraints.len());
    for c in constraints {
        let pos = leaders
            .iter()
            .position(|&l| l == c.leader)
            .ok_or_else(|| Error::InvalidParameter(format!("constraint for unknown leader {}", c.leader)))?;
        if c.input_anchor.len() != m || c.slope_lo.len() != m || c.slope_hi.len() != m {
            return Err(Error::Dimension("constraint input blocks do not match u_nom".into()));
        }
        offsets.push(pos * m);
    }
    let mu = nl * m;
    let nc = constraints.len();
    let n = mu + nc * m + nc;
    let rows = 2 * nc * m + nc + nc + mu;
    let mut p = DMatrix::zeros(n, n);
    let mut q = DVector::zeros(n);
    for i in 0..mu {
        p[(i, i)] = 1.0;
        q[i] = -u_nom[i];
    }
    for c in 0..nc {
        q[mu + nc * m + c] = rho;
    }
    let mut a = DMatrix::zeros(rows, n);
    let mut l = DVector::from_element(rows, -INF);
    let mut u = DVector::from_element(rows, INF);
    let mut r = 0;
    for (ci, con) in constraints.iter().enumerate() {
        let t0 = mu + ci * m;
        let s = mu + nc * m + ci;
        let off = offsets[ci];
        for d in 0..m {
            for slope in [con.slope_lo[d], con.slope_hi[d]] {
                // t - slope·u ≤ -slope·a
                a[(r, t0 + d)] = 1.0;
                a[(r, off + d)] = -slope;
                u[r] = -slope * con.input_anchor[d];
                r += 1;
            }
        }
        // c0 + Σt + s ≥ rhs
        for d in 0..m {
            a[(r, t0 + d)] = 1.0;
        }
        a[(r, s)] = 1.0;
        l[r] = con.rhs - con.const_term;
        r += 1;
        a[(r, s)] = 1.0;
        l[r] = 0.0;
        r += 1;
    }
    for d in 0..mu {
        a[(r, d)] = 1.0;
        l[r] = input_box.lo;
        u[r] = input_box.hi;
        r += 1;
    }
    debug_assert_eq!(r, rows);
    Ok(SafetyFilter {
        problem: QpProblem::new(p, q, a, l, u)?,
        input_dim: mu,
        num_constraints: nc,
        blocks: offsets.into_iter().zip(constraints.iter().cloned()).collect(),
    })
}

impl SafetyFilter {
    /// The box projection of `u_nom` is optimal whenever it meets every
    /// constraint without slack.
    fn projection_if_feasible(&self) -> Option<(FilterSolution, QpSolution)> {
        let m = self.input_dim;
        let nr = self.problem.num_constraints();
        let (bl, bu) = (self.problem.l.rows(nr - m, m), self.problem.u.rows(nr - m, m));
        let u: Vec<f64> = (0..m).map(|d| (-self.problem.q[d]).clamp(bl[d], bu[d])).collect();
        let mb = self.blocks.first().map_or(m, |(_, c)| c.input_anchor.len());
        if self.blocks.iter().any(|(off, c)| c.margin(&u[*off..off + mb]) < 0.0) {
            return None;
        }
        let n = self.problem.num_vars();
        let nc = self.num_constraints;
        let mut x = DVector::zeros(n);
        for d in 0..m {
            x[d] = u[d];
        }
        // t at the top of its epigraph rows, s = 0
        for (ci, (off, c)) in self.blocks.iter().enumerate() {
            for d in 0..mb {
                let v = u[off + d] - c.input_anchor[d];
                x[m + ci * mb + d] = (c.slope_lo[d] * v).min(c.slope_hi[d] * v);
            }
        }
        let mut y = DVector::zeros(nr);
        for d in 0..m {
            y[nr - m + d] = -(u[d] + self.problem.q[d]);
        }
        // s sits on its lower bound and pays the full penalty there
        for ci in 0..nc {
            y[ci * (2 * mb + 2) + 2 * mb + 1] = -self.problem.q[n - nc + ci];
        }
        Some((
            FilterSolution { u, slack: vec![0.0; nc], status: QpStatus::Optimal },
            QpSolution {
                x,
                y,
                status: QpStatus::Optimal,
                primal_residual: 0.0,
                dual_residual: 0.0,
                iterations: 0,
                polished: false,
            },
        ))
    }

    pub fn solve(&self, settings: &QpSettings) -> Result<FilterSolution> {
        self.solve_warm(settings, None).map(|(f, _)| f)
    }

    /// Solve, optionally warm-started; also returns the raw QP solution.
    pub fn solve_warm(
        &self,
        settings: &QpSettings,
        warm: Option<(&DVector<f64>, &DVector<f64>)>,
    ) -> Result<(FilterSolution, QpSolution)> {
        let m = self.input_dim;
        if let Some(short) = self.projection_if_feasible() {
            return Ok(short);
        }
        let sol = solve_warm(&self.problem, settings, warm)?;
        if matches!(sol.status, QpStatus::PrimalInfeasible | QpStatus::DualInfeasible) {
            return Err(Error::Solver(format!("safety filter reported {:?}", sol.status)));
        }
        let s0 = self.problem.num_vars() - self.num_constraints;
        let filt = FilterSolution {
            u: sol.x.rows(0, m).iter().copied().collect(),
            slack: sol.x.rows(s0, self.num_constraints).iter().map(|v| v.max(0.0)).collect(),
            status: sol.status,
        };
        Ok((filt, sol))
    }
}

/// Objective of the filter with `t` and `s` minimized out in closed form:
/// `½‖u - u_nom‖² + ρ Σ max(0, rhs - lhs(u))`.
pub fn filter_objective(u: &[f64], u_nom: &[f64], constraints: &[LocalConstraint], rho: f64) -> f64 {
    let dev: f64 = u.iter().zip(u_nom).map(|(a, b)| 0.5 * (a - b) * (a - b)).sum();
    let pen: f64 = constraints
        .iter()
        .map(|c| (c.rhs - c.lhs(u)).max(0.0))
        .sum();
    dev + rho * pen
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn one_dim(q: f64, lo: f64) -> QpProblem {
        QpProblem::new(
            DMatrix::from_element(1, 1, 1.0),
            DVector::from_element(1, q),
            DMatrix::from_element(1, 1, 1.0),
            DVector::from_element(1, lo),
            DVector::from_element(1, INF),
        )
        .unwrap()
    }

    #[test]
    fn inactive_constraint() {
        let sol = solve(&one_dim(-1.0, 0.0), &QpSettings::default()).unwrap();
        assert_eq!(sol.status, QpStatus::Optimal);
        assert_abs_diff_eq!(sol.x[0], 1.0, epsilon = 1e-6);
    }

    #[test]
    fn active_constraint() {
        let prob = one_dim(1.0, 0.0);
        let sol = solve(&prob, &QpSettings::default()).unwrap();
        assert_eq!(sol.status, QpStatus::Optimal);
        assert_abs_diff_eq!(sol.x[0], 0.0, epsilon = 1e-6);
        assert!(kkt_residuals(&prob, &sol.x, &sol.y).max() < 1e-5);
    }

    #[test]
    fn slack_problem() {
        // min ½u² + s  s.t. u + s ≥ 5, s ≥ 0  →  (1, 4), objective 4.5
        let p = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        let q = DVector::from_vec(vec![0.0, 1.0]);
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0]);
        let prob = QpProblem::new(p, q, a, DVector::from_vec(vec![5.0, 0.0]), DVector::from_vec(vec![INF, INF])).unwrap();
        let sol = solve(&prob, &QpSettings::default()).unwrap();
        assert_eq!(sol.status, QpStatus::Optimal);
        assert_abs_diff_eq!(sol.x[0], 1.0, epsilon = 1e-6);
        assert_abs_diff_eq!(sol.x[1], 4.0, epsilon = 1e-6);
        assert_abs_diff_eq!(prob.objective(&sol.x), 4.5, epsilon = 1e-6);
        assert!(kkt_residuals(&prob, &sol.x, &sol.y).max() < 1e-5);
    }

    #[test]
    fn rejects_bad_dimensions() {
        let r = QpProblem::new(
            DMatrix::zeros(2, 2),
            DVector::zeros(1),
            DMatrix::zeros(1, 1),
            DVector::zeros(1),
            DVector::zeros(1),
        );
        assert!(matches!(r, Err(Error::Dimension(_))));
        let r = QpProblem::new(
            DMatrix::from_element(1, 1, -1.0),
            DVector::zeros(1),
            DMatrix::zeros(1, 1),
            DVector::zeros(1),
            DVector::zeros(1),
        );
        assert!(r.is_err());
    }

    #[test]
    fn detects_primal_infeasibility() {
        // x ≥ 1 and x ≤ -1
        let prob = QpProblem::new(
            DMatrix::from_element(1, 1, 1.0),
            DVector::zeros(1),
            DMatrix::from_column_slice(2, 1, &[1.0, 1.0]),
            DVector::from_vec(vec![1.0, -INF]),
            DVector::from_vec(vec![INF, -1.0]),
        )
        .unwrap();
        let sol = solve(&prob, &QpSettings::default()).unwrap();
        assert_eq!(sol.status, QpStatus::PrimalInfeasible);
    }

    #[test]
    fn detects_unbounded_lp() {
        // min -x s.t. x ≥ 0
        let prob = QpProblem::new(
            DMatrix::zeros(1, 1),
            DVector::from_element(1, -1.0),
            DMatrix::from_element(1, 1, 1.0),
            DVector::zeros(1),
            DVector::from_element(1, INF),
        )
        .unwrap();
        let sol = solve(&prob, &QpSettings::default()).unwrap();
        assert_eq!(sol.status, QpStatus::DualInfeasible);
    }

    #[test]
    fn deterministic() {
        let prob = one_dim(3.0, -2.0);
        let a = solve(&prob, &QpSettings::default()).unwrap();
        let b = solve(&prob, &QpSettings::default()).unwrap();
        assert_eq!(a, b);
    }

    fn lc(c0: f64, anchor: f64, lo: f64, hi: f64, rhs: f64) -> LocalConstraint {
        LocalConstraint {
            leader: 0,
            const_term: c0,
            input_anchor: vec![anchor],
            slope_lo: vec![lo],
            slope_hi: vec![hi],
            rhs,
        }
    }

    #[test]
    fn filter_without_constraints_is_box_projection() {
        let box_ = Interval::new(-1.0, 1.0).unwrap();
        let f = build_safety_filter(0, &[0.5, 3.0], &[], 100.0, box_).unwrap();
        let s = f.solve(&QpSettings::default()).unwrap();
        assert_eq!(s.u, vec![0.5, 1.0]);
        assert!(s.slack.is_empty());
    }

    #[test]
    fn filter_feasible_constraint_has_zero_slack() {
        // 1 + 2(u - 0) ≥ 3 → u ≥ 1, nominal 0
        let cons = [lc(1.0, 0.0, 2.0, 2.0, 3.0)];
        let f = build_safety_filter(0, &[0.0], &cons, 100.0, Interval::new(-50.0, 50.0).unwrap()).unwrap();
        let s = f.solve(&QpSettings::default()).unwrap();
        assert_abs_diff_eq!(s.u[0], 1.0, epsilon = 1e-5);
        assert!(s.slack[0] < 1e-6);
    }

    #[test]
    fn shortcut_multipliers_satisfy_kkt() {
        let cons = [lc(5.0, 0.0, 1.0, 2.0, 0.0), lc(1.0, 1.0, -1.0, 1.0, 0.5)];
        let f = build_safety_filter(0, &[0.5], &cons, 7.0, Interval::new(-2.0, 2.0).unwrap()).unwrap();
        let (s, raw) = f.solve_warm(&QpSettings::default(), None).unwrap();
        assert_eq!(s.u, vec![0.5]);
        assert!(kkt_residuals(&f.problem, &raw.x, &raw.y).max() < 1e-12);
    }

    #[test]
    fn polish_survives_degenerate_epigraph_rows() {
        // the optimum sits on the kink of the third constraint, and the first
        // two have zero-cost epigraph variables that are not pinned down
        let c = |c0: f64, a: [f64; 2], lo: [f64; 2], hi: [f64; 2], rhs: f64| LocalConstraint {
            leader: 0,
            const_term: c0,
            input_anchor: a.to_vec(),
            slope_lo: lo.to_vec(),
            slope_hi: hi.to_vec(),
            rhs,
        };
        let cons = [
            c(4.87320357938998, [-1.550959470386478, -1.8855072015437662], [1.8946237628150921, -1.0343401863776376], [3.6899457811005703, -0.6142128297425078], 2.0822210896025117),
            c(2.608456552948361, [-0.1789862766924939, 1.0266746456285194], [0.6822179262037542, 0.5085404824923949], [0.8359759434428842, 0.8264579734152289], 0.09869148911928072),
            c(-1.5687396003151588, [1.195767845222532, 0.9501215512037682], [-0.4452809275414005, 0.15753111614085524], [0.22866606297468772, 0.4603788124004664], 3.941818264612431),
        ];
        let f = build_safety_filter(0, &[1.5540038507747411, 3.196497607553379], &cons, 17.17866358206387, Interval::new(-5.0, 5.0).unwrap()).unwrap();
        let (s, raw) = f.solve_warm(&QpSettings::default(), None).unwrap();
        assert!(raw.polished);
        assert!(kkt_residuals(&f.problem, &raw.x, &raw.y).max() < 1e-9);
        assert_abs_diff_eq!(s.u[0], 1.195767845222532, epsilon = 1e-9);
        assert_abs_diff_eq!(s.u[1], 5.0, epsilon = 1e-9);
    }

    #[test]
    fn filter_rejects_other_leader() {
        let mut c = lc(0.0, 0.0, 1.0, 1.0, 0.0);
        c.leader = 3;
        assert!(build_safety_filter(0, &[0.0], &[c], 1.0, Interval::default()).is_err());
        assert!(build_safety_filter(0, &[0.0], &[], 0.0, Interval::default()).is_err());
    }
}
