//! WebAssembly bindings for `www/index.html`. Every entry point returns a
//! JSON string; errors come back as `{"error": "..."}` so the page never
//! has to deal with exceptions.

use serde::Serialize;
use wasm_bindgen::prelude::*;
use zcbf_core::barriers::decompose;
use zcbf_core::certify::LocalConstraint;
use zcbf_core::config::ConfigFile;
use zcbf_core::dynamics::Interval;
use zcbf_core::error::Result;
use zcbf_core::qp::{build_safety_filter, filter_objective};
use zcbf_core::sim;

fn respond<T: Serialize>(r: Result<T>) -> String {
    match r {
        Ok(v) => serde_json::to_string(&v).unwrap_or_else(|e| error_json(&e.to_string())),
        Err(e) => error_json(&e.to_string()),
    }
}

fn error_json(msg: &str) -> String {
    serde_json::json!({ "error": msg }).to_string()
}

#[derive(Debug, Serialize)]
pub struct SimView {
    pub ids: Vec<String>,
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub h: Vec<Vec<f64>>,
    pub nominal: Vec<Vec<f64>>,
    pub inputs: Vec<Vec<f64>>,
    pub dim: usize,
    pub min_h_after_warmup: Option<f64>,
    pub violations_after_warmup: usize,
    pub control_cost: f64,
}

/// Closed-loop run of a bundled case. `bounds` is `"data"` (generate and fit
/// with the given seed and dataset size), `"oracle"` (exact local gradients)
/// or `"none"` (nominal controller only).
#[wasm_bindgen]
pub fn simulate(case: &str, bounds: &str, seed: u32, n_sims: u32, scale: f64) -> String {
    respond(simulate_view(case, bounds, seed as u64, n_sims as usize, scale))
}

pub fn simulate_view(case: &str, bounds: &str, seed: u64, n_sims: usize, scale: f64) -> Result<SimView> {
    let cfg = match case {
        "a" => ConfigFile::case_a(),
        "b" => ConfigFile::case_b(),
        other => return Err(zcbf_core::error::Error::InvalidParameter(format!("unknown case {other:?}"))),
    };
    let mut scn = cfg.scenario()?;
    let run = match bounds {
        "none" => {
            scn.filter_enabled = false;
            sim::run_closed_loop(&scn, &[])?
        }
        "oracle" => sim::run_with_oracle(&scn)?,
        _ => {
            let spec = cfg.generation_spec(Some(seed), Some(n_sims));
            let (fits, _) = sim::fit_all(&scn.model, &scn.candidates, &spec, scn.alpha, scn.eps, cfg.dataset.k)?;
            sim::run_closed_loop(&scn, &sim::scale_fits(&fits, scale)?)?
        }
    };
    Ok(SimView {
        ids: run.candidate_ids,
        times: run.trajectory.times,
        states: run.trajectory.states,
        h: run.h,
        nominal: run.nominal,
        inputs: run.trajectory.inputs,
        dim: cfg.model.dim,
        min_h_after_warmup: run.metrics.min_h_after_warmup,
        violations_after_warmup: run.metrics.violations_after_warmup,
        control_cost: run.metrics.control_cost,
    })
}

#[derive(Debug, Serialize)]
pub struct FfView {
    pub parallel: Vec<f64>,
    pub orthogonal: Vec<f64>,
    pub h_parallel: f64,
    pub h_orthogonal: f64,
    pub h_pair: f64,
}

/// Split of a follower pair offset along the line through its two leaders.
/// `points` is `[x_k, x_j, x_lk, x_lj]` flattened, two coordinates each.
#[wasm_bindgen]
pub fn ff_geometry(points: &[f64], d_max: f64, eps: f64) -> String {
    respond(ff_view(points, d_max, eps))
}

pub fn ff_view(points: &[f64], d_max: f64, eps: f64) -> Result<FfView> {
    if points.len() != 8 {
        return Err(zcbf_core::error::Error::InvalidParameter(format!(
            "expected 8 coordinates, got {}",
            points.len()
        )));
    }
    let p = |i: usize| &points[2 * i..2 * i + 2];
    let (par, perp) = decompose(p(0), p(1), p(2), p(3), eps)?;
    let sq = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>();
    let half = 0.5 * d_max * d_max;
    let r: Vec<f64> = p(0).iter().zip(p(1)).map(|(a, b)| a - b).collect();
    Ok(FfView {
        h_parallel: half - sq(&par),
        h_orthogonal: half - sq(&perp),
        h_pair: d_max * d_max - sq(&r),
        parallel: par,
        orthogonal: perp,
    })
}

#[derive(Debug, Serialize)]
pub struct LandscapeView {
    /// Row-major `n × n` objective values over the input box, first axis `u_0`.
    pub objective: Vec<f64>,
    pub n: usize,
    pub lo: f64,
    pub hi: f64,
    pub solution: Vec<f64>,
    pub slack: f64,
    pub margin_at_solution: f64,
    pub margin_at_nominal: f64,
}

/// Objective of a two-input safety filter with one constraint
/// `c0 + Σ min(lo_c (u_c - a_c), hi_c (u_c - a_c)) ≥ rhs`, sampled on a grid,
/// plus the filter's own solution.
#[wasm_bindgen]
#[allow(clippy::too_many_arguments)]
pub fn filter_landscape(u_nom: &[f64], c0: f64, anchor: &[f64], slope_lo: &[f64], slope_hi: &[f64], rhs: f64, rho: f64, bound: f64, n: u32) -> String {
    respond(landscape_view(u_nom, c0, anchor, slope_lo, slope_hi, rhs, rho, bound, n as usize))
}

#[allow(clippy::too_many_arguments)]
pub fn landscape_view(
    u_nom: &[f64],
    c0: f64,
    anchor: &[f64],
    slope_lo: &[f64],
    slope_hi: &[f64],
    rhs: f64,
    rho: f64,
    bound: f64,
    n: usize,
) -> Result<LandscapeView> {
    let c = LocalConstraint {
        leader: 0,
        const_term: c0,
        input_anchor: anchor.to_vec(),
        slope_lo: slope_lo.to_vec(),
        slope_hi: slope_hi.to_vec(),
        rhs,
    };
    let input_box = Interval::new(-bound, bound)?;
    let filter = build_safety_filter(0, u_nom, std::slice::from_ref(&c), rho, input_box)?;
    let sol = filter.solve(&Default::default())?;
    let n = n.clamp(2, 400);
    let at = |i: usize| -bound + 2.0 * bound * i as f64 / (n - 1) as f64;
    let mut objective = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            objective.push(filter_objective(&[at(i), at(j)], u_nom, std::slice::from_ref(&c), rho));
        }
    }
    Ok(LandscapeView {
        objective,
        n,
        lo: -bound,
        hi: bound,
        margin_at_solution: c.margin(&sol.u),
        margin_at_nominal: c.margin(u_nom),
        slack: sol.slack[0],
        solution: sol.u,
    })
}
