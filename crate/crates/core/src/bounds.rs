//! Componentwise Jacobian interval bounds for `ḣ` fitted from sample pairs.
//!
//! For samples `z_i = (x_i, u_i)` the mean value theorem requires, for every
//! pair with `Δ = z_i - z_j`,
//!
//! ```text
//!     J̲·Δ⁺ - J̄·Δ⁻  ≤  ḣ_i - ḣ_j  ≤  J̄·Δ⁺ - J̲·Δ⁻
//! ```
//!
//! The tightest such box (least total width) is an LP.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::barriers::{analytic_hdot, BarrierCandidate};
use crate::data::{sha256_hex, DerivativeDataset};
use crate::dynamics::SystemModel;
use crate::error::{Error, Result};
use crate::qp::{self, QpProblem, QpSettings, QpStatus};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundsMeta {
    pub dataset_hash: String,
    pub num_samples: usize,
    pub k: Option<usize>,
    pub tolerance: f64,
    pub ridge: f64,
    pub repair_widening: f64,
    pub scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JacobianBounds {
    pub candidate: String,
    pub lower_x: Vec<f64>,
    pub upper_x: Vec<f64>,
    pub lower_u: Vec<f64>,
    pub upper_u: Vec<f64>,
    pub meta: BoundsMeta,
}

impl JacobianBounds {
    pub fn new(candidate: String, lower_x: Vec<f64>, upper_x: Vec<f64>, lower_u: Vec<f64>, upper_u: Vec<f64>) -> Result<Self> {
        let b = Self {
            candidate,
            lower_x,
            upper_x,
            lower_u,
            upper_u,
            meta: BoundsMeta {
                dataset_hash: String::new(),
                num_samples: 0,
                k: None,
                tolerance: 0.0,
                ridge: 0.0,
                repair_widening: 0.0,
                scale: 1.0,
            },
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if self.lower_x.len() != self.upper_x.len() || self.lower_u.len() != self.upper_u.len() {
            return Err(Error::Dimension("lower and upper bound lengths differ".into()));
        }
        let ok = |lo: &[f64], hi: &[f64]| lo.iter().zip(hi).all(|(l, h)| l <= h);
        if !ok(&self.lower_x, &self.upper_x) || !ok(&self.lower_u, &self.upper_u) {
            return Err(Error::InvalidParameter(format!("bounds for {} have lower > upper", self.candidate)));
        }
        Ok(())
    }

    pub fn lower(&self) -> Vec<f64> {
        [self.lower_x.as_slice(), &self.lower_u].concat()
    }

    pub fn upper(&self) -> Vec<f64> {
        [self.upper_x.as_slice(), &self.upper_u].concat()
    }

    pub fn total_width(&self) -> f64 {
        self.lower().iter().zip(self.upper()).map(|(l, h)| h - l).sum()
    }

    pub fn widths(&self) -> Vec<f64> {
        self.lower().iter().zip(self.upper()).map(|(l, h)| h - l).collect()
    }

    fn from_stacked(candidate: String, lo: &[f64], hi: &[f64], nx: usize, meta: BoundsMeta) -> Self {
        Self {
            candidate,
            lower_x: lo[..nx].to_vec(),
            upper_x: hi[..nx].to_vec(),
            lower_u: lo[nx..].to_vec(),
            upper_u: hi[nx..].to_vec(),
            meta,
        }
    }
}

/// `J̲·Δ⁺ - J̄·Δ⁻` for one component.
pub fn interval_term(lo: f64, hi: f64, delta: f64) -> f64 {
    lo * delta.max(0.0) - hi * (-delta).max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimateSettings {
    pub tolerance: f64,
    pub ridge: f64,
    pub max_iter: usize,
}

impl Default for EstimateSettings {
    fn default() -> Self {
        Self {
            tolerance: 1e-8,
            ridge: 1e-9,
            max_iter: 50_000,
        }
    }
}

fn dataset_hash(ds: &DerivativeDataset) -> String {
    let mut buf = Vec::new();
    for s in &ds.samples {
        for v in std::iter::once(s.hdot).chain(s.x_block.iter().copied()).chain(s.u_block.iter().copied()) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    sha256_hex(&buf)
}

/// Worst violation of the pairwise constraints, divided by nothing (absolute).
pub fn max_pair_violation(b: &JacobianBounds, ds: &DerivativeDataset) -> f64 {
    let (lo, hi) = (b.lower(), b.upper());
    let z: Vec<Vec<f64>> = ds.samples.iter().map(|s| s.feature()).collect();
    let mut worst: f64 = 0.0;
    for i in 0..z.len() {
        for j in i + 1..z.len() {
            let dh = ds.samples[i].hdot - ds.samples[j].hdot;
            let (mut lower, mut upper) = (0.0, 0.0);
            for c in 0..lo.len() {
                let d = z[i][c] - z[j][c];
                lower += interval_term(lo[c], hi[c], d);
                upper += hi[c] * d.max(0.0) - lo[c] * (-d).max(0.0);
            }
            worst = worst.max(lower - dh).max(dh - upper);
        }
    }
    worst
}

/// Fit the least-total-width interval bounds consistent with all sample pairs.
pub fn estimate(ds: &DerivativeDataset, settings: &EstimateSettings) -> Result<JacobianBounds> {
    let ns = ds.len();
    if ns < 2 {
        return Err(Error::NotEnoughSamples { needed: 2, have: ns });
    }
    let z: Vec<Vec<f64>> = ds.samples.iter().map(|s| s.feature()).collect();
    let dim = z[0].len();
    let nx = ds.x_len();
    // components that never vary across samples cannot be identified; they stay at zero
    let active: Vec<usize> = (0..dim).filter(|&c| z.iter().any(|r| r[c] != z[0][c])).collect();
    let na = active.len();

    let mut rows: Vec<(Vec<f64>, f64)> = Vec::new();
    for i in 0..ns {
        for j in i + 1..ns {
            let dh = ds.samples[i].hdot - ds.samples[j].hdot;
            let delta: Vec<f64> = active.iter().map(|&c| z[i][c] - z[j][c]).collect();
            if delta.iter().all(|&d| d == 0.0) {
                if dh != 0.0 {
                    return Err(Error::InfeasibleBounds(format!(
                        "samples {i} and {j} of {} share features but differ in hdot",
                        ds.candidate.id()
                    )));
                }
                continue;
            }
            rows.push((delta, dh));
        }
    }

    let mut lo = vec![0.0; dim];
    let mut hi = vec![0.0; dim];
    let mut widening = 0.0;
    if na > 0 {
        let (mut jl, mut jh) = solve_working_set(&rows, na, settings, &ds.candidate.id(), WORKING_BATCH)?;
        // restore exact feasibility by a uniform widening
        for c in 0..na {
            if jl[c] > jh[c] {
                let mid = 0.5 * (jl[c] + jh[c]);
                jl[c] = mid;
                jh[c] = mid;
            }
        }
        for (delta, dh) in &rows {
            let l1: f64 = delta.iter().map(|d| d.abs()).sum();
            let viol = row_violation(delta, *dh, &jl, &jh);
            if viol > 0.0 {
                widening = f64::max(widening, viol / l1);
            }
        }
        if widening > 0.0 {
            // a hair more than needed so rounding in the re-check cannot flip the sign
            widening *= 1.0 + 1e-9;
            jl.iter_mut().for_each(|v| *v -= widening);
            jh.iter_mut().for_each(|v| *v += widening);
        }
        for (i, &c) in active.iter().enumerate() {
            lo[c] = jl[i];
            hi[c] = jh[i];
        }
    }
    let meta = BoundsMeta {
        dataset_hash: dataset_hash(ds),
        num_samples: ns,
        k: ds.provenance.reduced_k,
        tolerance: settings.tolerance,
        ridge: settings.ridge,
        repair_widening: widening,
        scale: 1.0,
    };
    Ok(JacobianBounds::from_stacked(ds.candidate.id(), &lo, &hi, nx, meta))
}

/// Pair rows in the initial working set, and added per round.
const WORKING_BATCH: usize = 400;
const MAX_ROUNDS: usize = 60;

fn row_violation(delta: &[f64], dh: f64, jl: &[f64], jh: &[f64]) -> f64 {
    let (mut lower, mut upper) = (0.0, 0.0);
    for (c, &d) in delta.iter().enumerate() {
        lower += interval_term(jl[c], jh[c], d);
        upper += jh[c] * d.max(0.0) - jl[c] * (-d).max(0.0);
    }
    (lower - dh).max(dh - upper)
}

/// Minimum-width LP over all pair rows by constraint generation: solve on a
/// working set, add the most violated rows, repeat until every row holds to
/// the solver tolerance.
fn solve_working_set(
    rows: &[(Vec<f64>, f64)],
    na: usize,
    settings: &EstimateSettings,
    id: &str,
    batch: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let nv = 2 * na;
    let qs = QpSettings {
        max_iter: settings.max_iter,
        ..QpSettings::default().with_tolerance(settings.tolerance)
    };
    // start from the steepest pairs, which pin the interval ends
    let mut order: Vec<usize> = (0..rows.len()).collect();
    let ratio = |r: &(Vec<f64>, f64)| r.1.abs() / r.0.iter().map(|d| d.abs()).sum::<f64>();
    order.sort_by(|&a, &b| ratio(&rows[b]).total_cmp(&ratio(&rows[a])).then(a.cmp(&b)));
    let mut in_set = vec![false; rows.len()];
    let mut working: Vec<usize> = Vec::new();
    for &r in order.iter().take(batch) {
        in_set[r] = true;
        working.push(r);
    }
    let mut warm: Option<(DVector<f64>, DVector<f64>)> = None;
    let mut best = (vec![0.0; na], vec![0.0; na]);
    for _ in 0..MAX_ROUNDS {
        let m = na + 2 * working.len();
        let mut a = DMatrix::zeros(m, nv);
        let mut l = DVector::from_element(m, f64::NEG_INFINITY);
        let mut u = DVector::from_element(m, f64::INFINITY);
        for c in 0..na {
            a[(c, c)] = -1.0;
            a[(c, na + c)] = 1.0;
            l[c] = 0.0;
        }
        for (k, &ri) in working.iter().enumerate() {
            let (delta, dh) = &rows[ri];
            let r = na + 2 * k;
            for (c, &d) in delta.iter().enumerate() {
                let (pos, neg) = (d.max(0.0), (-d).max(0.0));
                // Δ⁺·J̲ - Δ⁻·J̄ ≤ δḣ
                a[(r, c)] = pos;
                a[(r, na + c)] = -neg;
                // -Δ⁻·J̲ + Δ⁺·J̄ ≥ δḣ
                a[(r + 1, c)] = -neg;
                a[(r + 1, na + c)] = pos;
            }
            u[r] = *dh;
            l[r + 1] = *dh;
        }
        let p = DMatrix::identity(nv, nv) * settings.ridge;
        let q = DVector::from_fn(nv, |i, _| if i < na { -1.0 } else { 1.0 });
        let prob = QpProblem::new(p, q, a, l, u)?;
        let ws = warm.as_ref().map(|(x, y)| {
            let mut y2 = DVector::zeros(m);
            y2.rows_mut(0, y.len()).copy_from(y);
            (x.clone(), y2)
        });
        let sol = qp::solve_warm(&prob, &qs, ws.as_ref().map(|(x, y)| (x, y)))?;
        if matches!(sol.status, QpStatus::PrimalInfeasible | QpStatus::DualInfeasible) {
            return Err(Error::InfeasibleBounds(format!("bound LP for {id} reported {:?}", sol.status)));
        }
        let jl: Vec<f64> = sol.x.rows(0, na).iter().copied().collect();
        let jh: Vec<f64> = sol.x.rows(na, na).iter().copied().collect();
        if jl.iter().chain(&jh).any(|v| !v.is_finite()) {
            return Err(Error::Solver(format!("bound LP for {id} diverged")));
        }
        let tol = settings.tolerance.max(1e-12);
        let mut violated: Vec<(f64, usize)> = rows
            .iter()
            .enumerate()
            .filter(|(i, _)| !in_set[*i])
            .filter_map(|(i, (delta, dh))| {
                let v = row_violation(delta, *dh, &jl, &jh);
                (v > tol * (1.0 + dh.abs())).then_some((v, i))
            })
            .collect();
        best = (jl, jh);
        if violated.is_empty() {
            break;
        }
        violated.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        for &(_, i) in violated.iter().take(batch) {
            in_set[i] = true;
            working.push(i);
        }
        warm = Some((sol.x, sol.y));
    }
    Ok(best)
}

/// Multiply every bound component by `factor`.
pub fn scale(b: &JacobianBounds, factor: f64) -> Result<JacobianBounds> {
    if !(factor > 0.0) || !factor.is_finite() {
        return Err(Error::InvalidParameter(format!("scale factor must be positive, got {factor}")));
    }
    let s = |v: &[f64]| v.iter().map(|x| x * factor).collect::<Vec<_>>();
    let mut out = JacobianBounds {
        candidate: b.candidate.clone(),
        lower_x: s(&b.lower_x),
        upper_x: s(&b.upper_x),
        lower_u: s(&b.lower_u),
        upper_u: s(&b.upper_u),
        meta: b.meta.clone(),
    };
    out.meta.scale *= factor;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub probes: usize,
    pub components: usize,
    pub covered: usize,
    pub fraction: f64,
    pub worst_excess: f64,
}

/// Central-difference gradient of the true `ḣ` with respect to `(x_block, u_block)`.
pub fn true_gradient<M: SystemModel + ?Sized>(
    c: &BarrierCandidate,
    model: &M,
    x: &[f64],
    u: &[f64],
    eps: f64,
    step: f64,
) -> Result<Vec<f64>> {
    let (n, m) = (model.state_dim(), model.input_dim());
    let mut g = Vec::with_capacity(n * c.state_agents.len() + m * c.input_agents.len());
    let mut xp = x.to_vec();
    for &a in &c.state_agents {
        for d in 0..n {
            let i = a * n + d;
            xp[i] = x[i] + step;
            let f1 = analytic_hdot(c, model, &xp, u, eps)?;
            xp[i] = x[i] - step;
            let f0 = analytic_hdot(c, model, &xp, u, eps)?;
            xp[i] = x[i];
            g.push((f1 - f0) / (2.0 * step));
        }
    }
    let mut up = u.to_vec();
    for &a in &c.input_agents {
        for d in 0..m {
            let i = a * m + d;
            up[i] = u[i] + step;
            let f1 = analytic_hdot(c, model, x, &up, eps)?;
            up[i] = u[i] - step;
            let f0 = analytic_hdot(c, model, x, &up, eps)?;
            up[i] = u[i];
            g.push((f1 - f0) / (2.0 * step));
        }
    }
    Ok(g)
}

/// Fraction of true-gradient components inside the bounds at random points
/// of the model's state and input boxes (leaders get random inputs,
/// followers zero). Points where the barrier is undefined are skipped.
pub fn validate_against_truth<M: SystemModel + ?Sized>(
    b: &JacobianBounds,
    c: &BarrierCandidate,
    model: &M,
    probes: usize,
    seed: u64,
    eps: f64,
) -> Result<CoverageReport> {
    let (lo, hi) = (b.lower(), b.upper());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (sb, ib) = (model.state_box(), model.input_box());
    let m = model.input_dim();
    let (mut comps, mut covered, mut worst, mut done) = (0usize, 0usize, 0.0f64, 0usize);
    let mut attempts = 0;
    while done < probes && attempts < probes * 100 {
        attempts += 1;
        let x: Vec<f64> = (0..model.stacked_state_len()).map(|_| rng.gen_range(sb.lo..=sb.hi)).collect();
        let mut u = vec![0.0; model.stacked_input_len()];
        for &l in model.graph().leaders() {
            for d in 0..m {
                u[l * m + d] = rng.gen_range(ib.lo..=ib.hi);
            }
        }
        let Ok(g) = true_gradient(c, model, &x, &u, eps, 1e-4) else {
            continue;
        };
        if g.len() != lo.len() {
            return Err(Error::Dimension(format!(
                "bounds have {} components, gradient has {}",
                lo.len(),
                g.len()
            )));
        }
        done += 1;
        for (i, gi) in g.iter().enumerate() {
            comps += 1;
            let excess = (lo[i] - gi).max(gi - hi[i]);
            if excess <= 1e-6 {
                covered += 1;
            }
            worst = worst.max(excess);
        }
    }
    Ok(CoverageReport {
        probes: done,
        components: comps,
        covered,
        fraction: if comps == 0 { 1.0 } else { covered as f64 / comps as f64 },
        worst_excess: worst,
    })
}

pub fn bounds_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}.bounds.json"))
}

pub fn save(b: &JacobianBounds, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let path = bounds_path(dir, &b.candidate);
    fs::write(&path, serde_json::to_string_pretty(b)? + "\n")?;
    Ok(path)
}

pub fn load(dir: &Path, id: &str) -> Result<JacobianBounds> {
    let path = bounds_path(dir, id);
    if !path.exists() {
        return Err(Error::Config(format!("missing bounds for candidate {id} in {}", dir.display())));
    }
    let b: JacobianBounds = serde_json::from_str(&fs::read_to_string(path)?)?;
    b.validate()?;
    Ok(b)
}
