//! Closed-loop simulation with the distributed safety filter, and the
//! dataset-size / bound-scale study.

use std::borrow::Cow;
use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::barriers::{analytic_hdot, BarrierCandidate, KInfFunction};
use crate::bounds::{self, EstimateSettings, JacobianBounds};
use crate::certify::{self, BetaSplit, LocalConstraint};
use crate::config::ConfigFile;
use crate::data::{self, map_indices, DataSample, DerivativeDataset, GenerationSpec, Provenance};
use crate::dynamics::{step_count, ConsensusModel, Interval, SystemModel, Trajectory};
use crate::error::{Error, Result};
use crate::graph::{AgentId, Edge};
use crate::qp::{build_safety_filter, QpSettings, QpStatus};

#[derive(Debug, Clone)]
pub struct Scenario {
    pub model: ConsensusModel,
    pub candidates: Vec<BarrierCandidate>,
    pub targets: BTreeMap<AgentId, Vec<f64>>,
    pub k_p: f64,
    pub alpha: KInfFunction,
    pub eps: f64,
    pub default_beta: BetaSplit,
    pub betas: BTreeMap<Edge, BetaSplit>,
    pub rho: f64,
    pub input_box: Interval,
    pub dt: f64,
    pub horizon: f64,
    pub x0: Vec<f64>,
    pub warmup: f64,
    pub filter_enabled: bool,
    pub qp: QpSettings,
}

impl Scenario {
    pub fn beta(&self, e: Edge) -> BetaSplit {
        self.betas.get(&e).copied().unwrap_or(self.default_beta)
    }

    pub fn state_dim(&self) -> usize {
        self.model.state_dim()
    }
}

/// `-k_p (x_ℓ - d_ℓ)`.
pub fn nominal_input(scn: &Scenario, x: &[f64], leader: AgentId) -> Result<Vec<f64>> {
    if !scn.model.graph().is_leader(leader) {
        return Err(Error::NotALeader(leader));
    }
    let n = scn.state_dim();
    let target = scn.targets.get(&leader).ok_or(Error::NotALeader(leader))?;
    Ok((0..n).map(|d| -scn.k_p * (x[leader * n + d] - target[d])).collect())
}

/// Certification data for one candidate: the filtered dataset used for
/// anchor selection and the (possibly scaled) bounds.
#[derive(Debug, Clone, PartialEq)]
pub struct Fit {
    pub dataset: DerivativeDataset,
    pub bounds: JacobianBounds,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub candidate: String,
    pub raw_samples: usize,
    pub filtered_samples: usize,
    pub reduced_samples: usize,
    pub total_width: f64,
}

/// Filter, reduce and fit bounds for one raw dataset.
pub fn fit_dataset(
    raw: &DerivativeDataset,
    alpha: KInfFunction,
    eps: f64,
    k: usize,
    seed: u64,
    est: &EstimateSettings,
) -> Result<(Fit, FitSummary)> {
    let filtered = data::filter_by_barrier(raw, alpha, eps)?;
    if filtered.len() < 2 {
        return Err(Error::NotEnoughSamples {
            needed: 2,
            have: filtered.len(),
        });
    }
    let reduced = data::kmeans_reduce(&filtered, k.min(filtered.len()), seed)?;
    let b = bounds::estimate(&reduced, est)?;
    let summary = FitSummary {
        candidate: raw.candidate.id(),
        raw_samples: raw.len(),
        filtered_samples: filtered.len(),
        reduced_samples: reduced.len(),
        total_width: b.total_width(),
    };
    Ok((Fit { dataset: filtered, bounds: b }, summary))
}

/// Generate datasets and fit bounds for every candidate.
pub fn fit_all<M: SystemModel + ?Sized>(
    model: &M,
    candidates: &[BarrierCandidate],
    spec: &GenerationSpec,
    alpha: KInfFunction,
    eps: f64,
    k: usize,
) -> Result<(Vec<Fit>, Vec<FitSummary>)> {
    let raw = data::generate(model, candidates, spec, eps)?;
    let est = EstimateSettings::default();
    let fitted = map_indices(raw.len(), |i| fit_dataset(&raw[i], alpha, eps, k, spec.seed, &est))?;
    Ok(fitted.into_iter().unzip())
}

pub fn scale_fits(fits: &[Fit], factor: f64) -> Result<Vec<Fit>> {
    fits.iter()
        .map(|f| {
            Ok(Fit {
                dataset: f.dataset.clone(),
                bounds: bounds::scale(&f.bounds, factor)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    /// `Σ_t ½‖u*_t - u_nom_t‖²` over the applied steps.
    pub control_cost: f64,
    /// Minimum barrier value over all candidates for `t ≥ warm-up`; absent when any instant violated.
    pub min_h_after_warmup: Option<f64>,
    pub min_h_after_warmup_raw: f64,
    /// Post-step instants with some `h < 0`.
    pub violation_count: usize,
    pub violations_after_warmup: usize,
    pub violation_flag: bool,
    pub steps: usize,
    /// Steps where some candidate had no admissible anchor sample.
    pub uncertified_steps: usize,
    /// Steps where some filter needed positive slack.
    pub slack_steps: usize,
    pub max_slack: f64,
    pub max_iter_solves: usize,
    /// `Σ_t ‖u*_t - u*_{t-1}‖₁`, a chattering indicator.
    pub input_variation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOutput {
    pub trajectory: Trajectory,
    pub nominal: Vec<Vec<f64>>,
    pub candidate_ids: Vec<String>,
    /// `h[t][c]` for every time point and candidate.
    pub h: Vec<Vec<f64>>,
    pub metrics: RunMetrics,
}

fn eval_all(scn: &Scenario, x: &[f64], t: f64) -> Result<Vec<f64>> {
    let n = scn.state_dim();
    scn.candidates
        .iter()
        .map(|c| {
            c.eval(x, n, scn.eps).map_err(|e| Error::SimulationAborted {
                time: t,
                reason: format!("{}: {e}", c.id()),
            })
        })
        .collect()
}

/// Per-leader constraint lists at state `x`; also reports whether some
/// candidate could not be certified.
pub fn local_constraints(scn: &Scenario, fits: &[Fit], x: &[f64]) -> Result<(BTreeMap<AgentId, Vec<LocalConstraint>>, bool)> {
    let g = scn.model.graph();
    let mut by_leader: BTreeMap<AgentId, Vec<LocalConstraint>> = g.leaders().iter().map(|&l| (l, Vec::new())).collect();
    let mut uncertified = false;
    for f in fits {
        let sel = match certify::select_index(&f.dataset, &f.bounds, x, scn.eps) {
            Ok(s) => s,
            Err(Error::NoAdmissibleSample) | Err(Error::EmptyDataset) => {
                uncertified = true;
                continue;
            }
            Err(e) => return Err(e),
        };
        let beta = scn.beta(f.dataset.candidate.edge);
        for c in certify::assemble(g, &f.dataset, &f.bounds, &sel, scn.alpha, beta, x, scn.eps)? {
            by_leader.entry(c.leader).or_default().push(c);
        }
    }
    Ok((by_leader, uncertified))
}

struct StepInput {
    u: Vec<f64>,
    nominal: Vec<f64>,
    uncertified: bool,
    slack: f64,
    max_iter: usize,
}

fn control(scn: &Scenario, fits: &[Fit], x: &[f64], t: f64) -> Result<StepInput> {
    let g = scn.model.graph();
    let m = scn.model.input_dim();
    let mut u = vec![0.0; scn.model.stacked_input_len()];
    let mut nominal = u.clone();
    for &l in g.leaders() {
        nominal[l * m..(l + 1) * m].copy_from_slice(&nominal_input(scn, x, l)?);
    }
    if !scn.filter_enabled {
        return Ok(StepInput { u: nominal.clone(), nominal, uncertified: false, slack: 0.0, max_iter: 0 });
    }
    let (by_leader, uncertified) = local_constraints(scn, fits, x)?;
    let abort = |e: Error| Error::SimulationAborted { time: t, reason: e.to_string() };
    let mut slack: f64 = 0.0;
    let mut max_iter = 0;
    for (&l, cons) in &by_leader {
        let filt = build_safety_filter(l, &nominal[l * m..(l + 1) * m], cons, scn.rho, scn.input_box).map_err(abort)?;
        let sol = filt.solve(&scn.qp).map_err(abort)?;
        if sol.status == QpStatus::MaxIterations {
            max_iter += 1;
        }
        if sol.u.iter().any(|v| !v.is_finite()) {
            return Err(abort(Error::Solver("non-finite filter output".into())));
        }
        slack = sol.slack.iter().fold(slack, |a, &b| a.max(b));
        u[l * m..(l + 1) * m].copy_from_slice(&sol.u);
    }
    Ok(StepInput { u, nominal, uncertified, slack, max_iter })
}

/// Simulate the closed loop. With the filter disabled the nominal input is applied.
pub fn run_closed_loop(scn: &Scenario, fits: &[Fit]) -> Result<RunOutput> {
    check_fits(scn, fits)?;
    run_with_source(scn, |_| Ok(Cow::Borrowed(fits)))
}

/// Per-candidate certificates built from the exact `ḣ` at `x`: a single
/// sample at the current state with zero-width bounds on the true gradient.
pub fn oracle_fits(scn: &Scenario, x: &[f64]) -> Result<Vec<Fit>> {
    let (n, m) = (scn.model.state_dim(), scn.model.input_dim());
    let u = vec![0.0; scn.model.stacked_input_len()];
    scn.candidates
        .iter()
        .map(|c| {
            let hdot = analytic_hdot(c, &scn.model, x, &u, scn.eps)?;
            let g = bounds::true_gradient(c, &scn.model, x, &u, scn.eps, 1e-6)?;
            let nx = c.state_agents.len() * n;
            let b = JacobianBounds::new(c.id(), g[..nx].to_vec(), g[..nx].to_vec(), g[nx..].to_vec(), g[nx..].to_vec())?;
            let dataset = DerivativeDataset {
                candidate: c.clone(),
                state_dim: n,
                input_dim: m,
                samples: vec![DataSample {
                    hdot,
                    x_block: c.state_block(x, n),
                    u_block: c.input_block(&u, m),
                }],
                provenance: Provenance {
                    seed: 0,
                    config_hash: String::new(),
                    n_sims: 0,
                    horizon: 0.0,
                    dt: scn.dt,
                    filtered: false,
                    reduced_k: None,
                },
            };
            Ok(Fit { dataset, bounds: b })
        })
        .collect()
}

/// Closed loop with certificates rebuilt from the exact `ḣ` at every step.
pub fn run_with_oracle(scn: &Scenario) -> Result<RunOutput> {
    run_with_source(scn, |x| oracle_fits(scn, x).map(Cow::Owned))
}

fn check_fits(scn: &Scenario, fits: &[Fit]) -> Result<()> {
    if scn.filter_enabled {
        if fits.len() != scn.candidates.len() {
            return Err(Error::Config(format!(
                "{} fits for {} candidates",
                fits.len(),
                scn.candidates.len()
            )));
        }
        for (f, c) in fits.iter().zip(&scn.candidates) {
            if f.dataset.candidate.id() != c.id() || f.bounds.candidate != c.id() {
                return Err(Error::Config(format!("fit for {} does not match candidate {}", f.bounds.candidate, c.id())));
            }
        }
    }
    Ok(())
}

fn run_with_source<'a, F>(scn: &Scenario, mut source: F) -> Result<RunOutput>
where
    F: FnMut(&[f64]) -> Result<Cow<'a, [Fit]>>,
{
    if !(scn.dt > 0.0) || scn.horizon < scn.dt {
        return Err(Error::InvalidParameter("dt must be positive and no longer than the horizon".into()));
    }
    let steps = step_count(scn.horizon, scn.dt);
    let mut traj = Trajectory {
        dt: scn.dt,
        times: Vec::with_capacity(steps + 1),
        states: Vec::with_capacity(steps + 1),
        inputs: Vec::with_capacity(steps + 1),
        left_state_box: false,
    };
    let mut nominal = Vec::with_capacity(steps + 1);
    let mut hs = Vec::with_capacity(steps + 1);
    let mut met = RunMetrics {
        control_cost: 0.0,
        min_h_after_warmup: None,
        min_h_after_warmup_raw: f64::INFINITY,
        violation_count: 0,
        violations_after_warmup: 0,
        violation_flag: false,
        steps,
        uncertified_steps: 0,
        slack_steps: 0,
        max_slack: 0.0,
        max_iter_solves: 0,
        input_variation: 0.0,
    };
    let sbox = scn.model.state_box();
    let mut x = scn.x0.clone();
    for s in 0..=steps {
        let t = s as f64 * scn.dt;
        let h = eval_all(scn, &x, t)?;
        if s > 0 {
            let hmin = h.iter().copied().fold(f64::INFINITY, f64::min);
            let after = t >= scn.warmup - 1e-9;
            if hmin < 0.0 {
                met.violation_count += 1;
                if after {
                    met.violations_after_warmup += 1;
                }
            }
            if after {
                met.min_h_after_warmup_raw = met.min_h_after_warmup_raw.min(hmin);
            }
        }
        if x.iter().any(|v| !sbox.contains(*v)) {
            traj.left_state_box = true;
        }
        let step = if scn.filter_enabled {
            control(scn, &source(&x)?, &x, t)?
        } else {
            control(scn, &[], &x, t)?
        };
        if s < steps {
            met.control_cost += step
                .u
                .iter()
                .zip(&step.nominal)
                .map(|(a, b)| 0.5 * (a - b) * (a - b))
                .sum::<f64>();
            met.uncertified_steps += usize::from(step.uncertified);
            if step.slack > 1e-6 {
                met.slack_steps += 1;
            }
            met.max_slack = met.max_slack.max(step.slack);
            met.max_iter_solves += step.max_iter;
            if let Some(prev) = traj.inputs.last() {
                met.input_variation += prev.iter().zip(&step.u).map(|(a, b)| (a - b).abs()).sum::<f64>();
            }
        }
        let next = if s < steps { Some(scn.model.step(&x, &step.u, scn.dt)?) } else { None };
        traj.times.push(t);
        traj.states.push(std::mem::take(&mut x));
        traj.inputs.push(step.u);
        nominal.push(step.nominal);
        hs.push(h);
        match next {
            Some(nx) if nx.iter().all(|v| v.is_finite()) => x = nx,
            Some(_) => {
                return Err(Error::SimulationAborted {
                    time: t,
                    reason: "state became non-finite".into(),
                })
            }
            None => break,
        }
    }
    met.violation_flag = met.violation_count > 0;
    if !met.violation_flag && met.min_h_after_warmup_raw.is_finite() {
        met.min_h_after_warmup = Some(met.min_h_after_warmup_raw);
    }
    Ok(RunOutput {
        trajectory: traj,
        nominal,
        candidate_ids: scn.candidates.iter().map(|c| c.id()).collect(),
        h: hs,
        metrics: met,
    })
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    Ok(csv::Writer::from_writer(fs::File::create(path)?))
}

/// Write `trajectory.csv`, `inputs.csv`, `h_values.csv` and `metrics.json`.
pub fn write_run(out: &RunOutput, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    out.trajectory.write_csv(fs::File::create(dir.join("trajectory.csv"))?)?;

    let mut w = csv_writer(&dir.join("inputs.csv"))?;
    let nu = out.nominal.first().map_or(0, Vec::len);
    let mut header = vec!["time".to_string()];
    header.extend((0..nu).map(|i| format!("nominal_{i}")));
    header.extend((0..nu).map(|i| format!("filtered_{i}")));
    w.write_record(&header)?;
    for ((t, nom), u) in out.trajectory.times.iter().zip(&out.nominal).zip(&out.trajectory.inputs) {
        let row = std::iter::once(*t).chain(nom.iter().copied()).chain(u.iter().copied());
        w.write_record(row.map(|v| v.to_string()))?;
    }
    w.flush()?;

    let mut w = csv_writer(&dir.join("h_values.csv"))?;
    let mut header = vec!["time".to_string()];
    header.extend(out.candidate_ids.iter().cloned());
    w.write_record(&header)?;
    for (t, h) in out.trajectory.times.iter().zip(&out.h) {
        w.write_record(std::iter::once(*t).chain(h.iter().copied()).map(|v| v.to_string()))?;
    }
    w.flush()?;

    let mut f = fs::File::create(dir.join("metrics.json"))?;
    f.write_all((serde_json::to_string_pretty(&out.metrics)? + "\n").as_bytes())?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyRun {
    pub seed: u64,
    pub metrics: Option<RunMetrics>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyRow {
    pub label: String,
    pub n_sims: usize,
    pub scale: f64,
    pub runs: Vec<StudyRun>,
    pub mean_cost: Option<f64>,
    /// Averaged over runs without violations.
    pub mean_min_h: Option<f64>,
    pub violation_instants: usize,
    pub violating_runs: usize,
    pub failed_runs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyTable {
    pub rows: Vec<StudyRow>,
}

pub fn row_label(n_sims: usize, scale: f64) -> String {
    if scale == 1.0 {
        format!("{n_sims} sims")
    } else {
        format!("{n_sims} sims, {scale}x bounds")
    }
}

fn summarize(label: String, n_sims: usize, scale: f64, runs: Vec<StudyRun>) -> StudyRow {
    let ok: Vec<&RunMetrics> = runs.iter().filter_map(|r| r.metrics.as_ref()).collect();
    let mean = |v: &[f64]| if v.is_empty() { None } else { Some(v.iter().sum::<f64>() / v.len() as f64) };
    let costs: Vec<f64> = ok.iter().map(|m| m.control_cost).collect();
    let mins: Vec<f64> = ok.iter().filter_map(|m| m.min_h_after_warmup).collect();
    StudyRow {
        label,
        n_sims,
        scale,
        mean_cost: mean(&costs),
        mean_min_h: mean(&mins),
        violation_instants: ok.iter().map(|m| m.violation_count).sum(),
        violating_runs: ok.iter().filter(|m| m.violation_flag).count(),
        failed_runs: runs.len() - ok.len(),
        runs,
    }
}

/// Run every study row over every seed. Fits are shared between rows with
/// the same dataset size and seed; a failed fit or run is recorded in its row.
pub fn run_study(cfg: &ConfigFile) -> Result<StudyTable> {
    let study = cfg
        .study
        .as_ref()
        .ok_or_else(|| Error::Config("config has no study section".into()))?;
    let mut base = cfg.scenario()?;
    base.dt = study.sim_dt;
    base.horizon = study.sim_horizon;
    let alpha = base.alpha;

    let mut sizes: Vec<usize> = study.rows.iter().map(|r| r.n_sims).collect();
    sizes.sort_unstable();
    sizes.dedup();
    let jobs: Vec<(usize, u64)> = sizes.iter().flat_map(|&n| study.seeds.iter().map(move |&s| (n, s))).collect();
    let fits: Vec<std::result::Result<Vec<Fit>, String>> = map_indices(jobs.len(), |j| {
        let (n, seed) = jobs[j];
        let spec = cfg.generation_spec(Some(seed), Some(n));
        Ok(fit_all(&base.model, &base.candidates, &spec, alpha, base.eps, cfg.dataset.k)
            .map(|(f, _)| f)
            .map_err(|e| e.to_string()))
    })?;
    let fit_of = |n: usize, seed: u64| &fits[jobs.iter().position(|&j| j == (n, seed)).expect("fit job exists")];

    let cells: Vec<(usize, u64)> = (0..study.rows.len())
        .flat_map(|r| study.seeds.iter().map(move |&s| (r, s)))
        .collect();
    let runs: Vec<StudyRun> = map_indices(cells.len(), |c| {
        let (r, seed) = cells[c];
        let row = &study.rows[r];
        let result = match fit_of(row.n_sims, seed) {
            Err(e) => Err(e.clone()),
            Ok(f) => scale_fits(f, row.scale)
                .and_then(|scaled| run_closed_loop(&base, &scaled))
                .map(|o| o.metrics)
                .map_err(|e| e.to_string()),
        };
        Ok(match result {
            Ok(m) => StudyRun { seed, metrics: Some(m), error: None },
            Err(e) => StudyRun { seed, metrics: None, error: Some(e) },
        })
    })?;
    let mut runs = runs.into_iter();
    let rows = study
        .rows
        .iter()
        .map(|row| {
            let rr: Vec<StudyRun> = runs.by_ref().take(study.seeds.len()).collect();
            summarize(row_label(row.n_sims, row.scale), row.n_sims, row.scale, rr)
        })
        .collect();
    Ok(StudyTable { rows })
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"))
}

pub fn write_study_csv<W: Write>(table: &StudyTable, w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record([
        "configuration",
        "n_sims",
        "scale",
        "control_cost",
        "min_h",
        "violations",
        "violating_runs",
        "runs",
        "failed_runs",
    ])?;
    for r in &table.rows {
        out.write_record([
            r.label.clone(),
            r.n_sims.to_string(),
            r.scale.to_string(),
            opt(r.mean_cost),
            opt(r.mean_min_h),
            r.violation_instants.to_string(),
            r.violating_runs.to_string(),
            r.runs.len().to_string(),
            r.failed_runs.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

pub fn format_study(table: &StudyTable) -> String {
    let mut s = format!("{:<28}{:>14}{:>10}{:>16}\n", "Configuration", "Control cost", "Min h", "Violations");
    for r in &table.rows {
        s += &format!(
            "{:<28}{:>14}{:>10}{:>16}\n",
            r.label,
            opt(r.mean_cost),
            opt(r.mean_min_h),
            format!("{} ({})", r.violation_instants, r.violating_runs)
        );
    }
    s
}
