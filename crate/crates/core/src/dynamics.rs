//! Ground-truth agent dynamics and a fixed-step explicit Euler integrator.
//!
//! The certification pipeline never looks inside a [`SystemModel`]; it only
//! sees rollouts. Tests and oracles use the model directly.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{AgentId, CommGraph, Edge};

/// Closed scalar range applied to every component.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(Error::InvalidParameter(format!("bad interval [{lo}, {hi}]")));
        }
        Ok(Self { lo, hi })
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.lo && v <= self.hi
    }

    pub fn clamp(&self, v: f64) -> f64 {
        v.clamp(self.lo, self.hi)
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }
}

impl Default for Interval {
    fn default() -> Self {
        Self { lo: -10.0, hi: 10.0 }
    }
}

/// Control-affine leader-follower dynamics: leaders get `f_j + g_j u_j`,
/// followers only `f_j`. State and input vectors are stacked agent by agent.
pub trait SystemModel: Send + Sync {
    fn graph(&self) -> &CommGraph;
    fn state_dim(&self) -> usize;
    fn input_dim(&self) -> usize;
    fn state_box(&self) -> Interval;
    fn input_box(&self) -> Interval;

    /// Writes `f_j(x_j, x_{N_j})` into `out`.
    fn drift_into(&self, x: &[f64], j: AgentId, out: &mut [f64]);

    /// Writes `g_j(x_j) u_j` into `out` (leaders only).
    fn input_term_into(&self, x_j: &[f64], j: AgentId, u_j: &[f64], out: &mut [f64]);

    fn num_agents(&self) -> usize {
        self.graph().num_agents()
    }

    fn stacked_state_len(&self) -> usize {
        self.state_dim() * self.num_agents()
    }

    fn stacked_input_len(&self) -> usize {
        self.input_dim() * self.num_agents()
    }

    fn drift(&self, x: &[f64], j: AgentId) -> Result<Vec<f64>> {
        if j >= self.num_agents() {
            return Err(Error::VertexOutOfRange(j, self.num_agents()));
        }
        check_len("state", x.len(), self.stacked_state_len())?;
        let mut out = vec![0.0; self.state_dim()];
        self.drift_into(x, j, &mut out);
        Ok(out)
    }

    /// Stacked time derivative `ẋ`; follower inputs are ignored.
    fn derivative(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        check_len("state", x.len(), self.stacked_state_len())?;
        check_len("input", u.len(), self.stacked_input_len())?;
        let (n, m) = (self.state_dim(), self.input_dim());
        let mut dx = vec![0.0; x.len()];
        let mut tmp = vec![0.0; n];
        for j in 0..self.num_agents() {
            let out = &mut dx[j * n..(j + 1) * n];
            self.drift_into(x, j, out);
            if self.graph().is_leader(j) {
                self.input_term_into(&x[j * n..(j + 1) * n], j, &u[j * m..(j + 1) * m], &mut tmp);
                out.iter_mut().zip(&tmp).for_each(|(o, t)| *o += t);
            }
        }
        Ok(dx)
    }

    /// One explicit Euler step.
    fn step(&self, x: &[f64], u: &[f64], dt: f64) -> Result<Vec<f64>> {
        if !(dt > 0.0) {
            return Err(Error::InvalidParameter(format!("dt must be positive, got {dt}")));
        }
        let dx = self.derivative(x, u)?;
        Ok(x.iter().zip(dx).map(|(xi, di)| xi + dt * di).collect())
    }
}

fn check_len(what: &str, got: usize, want: usize) -> Result<()> {
    if got == want {
        Ok(())
    } else {
        Err(Error::Dimension(format!("{what} vector has length {got}, expected {want}")))
    }
}

/// Number of Euler steps covering `horizon` at step `dt`.
pub fn step_count(horizon: f64, dt: f64) -> usize {
    (horizon / dt + 1e-9).floor() as usize
}

/// Linear consensus dynamics `ẋ_j = -Σ_{i∈N_j} (x_j - x_i - d_ji) [+ u_j]`.
///
/// Desired displacements are given per canonical edge `(a, b)` as `d_ab`;
/// the reverse direction is `d_ba = -d_ab`.
#[derive(Debug, Clone)]
pub struct ConsensusModel {
    graph: CommGraph,
    dim: usize,
    desired: BTreeMap<Edge, Vec<f64>>,
    state_box: Interval,
    input_box: Interval,
}

impl ConsensusModel {
    pub fn new(graph: CommGraph, dim: usize, desired: BTreeMap<Edge, Vec<f64>>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidParameter("state dimension must be positive".into()));
        }
        for e in graph.edges() {
            match desired.get(e) {
                Some(d) if d.len() == dim => {}
                Some(d) => {
                    return Err(Error::Dimension(format!(
                        "desired displacement on {e} has length {}, expected {dim}",
                        d.len()
                    )))
                }
                None => return Err(Error::Config(format!("no desired displacement for edge {e}"))),
            }
        }
        if let Some(e) = desired.keys().find(|e| !graph.edges().contains(e)) {
            return Err(Error::Config(format!("desired displacement given for non-edge {e}")));
        }
        Ok(Self {
            graph,
            dim,
            desired,
            state_box: Interval::default(),
            input_box: Interval::default(),
        })
    }

    pub fn with_boxes(mut self, state_box: Interval, input_box: Interval) -> Self {
        self.state_box = state_box;
        self.input_box = input_box;
        self
    }

    /// `d_ji`, the displacement agent `j` wants relative to neighbor `i`.
    pub fn desired(&self, j: AgentId, i: AgentId) -> Option<Vec<f64>> {
        let d = self.desired.get(&Edge::new(j, i))?;
        Some(if j < i { d.clone() } else { d.iter().map(|v| -v).collect() })
    }

    pub fn desired_map(&self) -> &BTreeMap<Edge, Vec<f64>> {
        &self.desired
    }
}

impl SystemModel for ConsensusModel {
    fn graph(&self) -> &CommGraph {
        &self.graph
    }

    fn state_dim(&self) -> usize {
        self.dim
    }

    fn input_dim(&self) -> usize {
        self.dim
    }

    fn state_box(&self) -> Interval {
        self.state_box
    }

    fn input_box(&self) -> Interval {
        self.input_box
    }

    fn drift_into(&self, x: &[f64], j: AgentId, out: &mut [f64]) {
        let n = self.dim;
        out.iter_mut().for_each(|o| *o = 0.0);
        let Ok(neighbors) = self.graph.neighbors(j) else {
            return;
        };
        for &i in neighbors {
            let d = &self.desired[&Edge::new(j, i)];
            let sign = if j < i { 1.0 } else { -1.0 };
            for c in 0..n {
                out[c] -= x[j * n + c] - x[i * n + c] - sign * d[c];
            }
        }
    }

    fn input_term_into(&self, _x_j: &[f64], _j: AgentId, u_j: &[f64], out: &mut [f64]) {
        out.copy_from_slice(u_j);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub dt: f64,
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub inputs: Vec<Vec<f64>>,
    /// Set when some state left the model's state box; states are never clamped.
    pub left_state_box: bool,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// CSV with columns `time, x_0.., u_0..`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let nx = self.states.first().map_or(0, Vec::len);
        let nu = self.inputs.first().map_or(0, Vec::len);
        let mut header = vec!["time".to_string()];
        header.extend((0..nx).map(|i| format!("x_{i}")));
        header.extend((0..nu).map(|i| format!("u_{i}")));
        out.write_record(&header)?;
        for ((t, x), u) in self.times.iter().zip(&self.states).zip(&self.inputs) {
            let row = std::iter::once(*t).chain(x.iter().copied()).chain(u.iter().copied());
            out.write_record(row.map(|v| v.to_string()))?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Integrate `model` from `x0` with inputs from `policy(t)`.
///
/// Produces `⌊horizon/dt⌋ + 1` points; the input recorded at the last point is
/// the policy value there (never applied).
pub fn rollout<M, P>(model: &M, x0: &[f64], mut policy: P, horizon: f64, dt: f64) -> Result<Trajectory>
where
    M: SystemModel + ?Sized,
    P: FnMut(f64) -> Vec<f64>,
{
    if !(dt > 0.0) || !(horizon > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "rollout needs positive dt and horizon (dt = {dt}, horizon = {horizon})"
        )));
    }
    if horizon + 1e-12 < dt {
        return Err(Error::InvalidParameter(format!("horizon {horizon} shorter than dt {dt}")));
    }
    let steps = step_count(horizon, dt);
    let sbox = model.state_box();
    let mut traj = Trajectory {
        dt,
        times: Vec::with_capacity(steps + 1),
        states: Vec::with_capacity(steps + 1),
        inputs: Vec::with_capacity(steps + 1),
        left_state_box: false,
    };
    let mut x = x0.to_vec();
    for s in 0..=steps {
        let t = s as f64 * dt;
        let u = policy(t);
        if x.iter().any(|v| !sbox.contains(*v)) {
            traj.left_state_box = true;
        }
        let next = if s < steps { Some(model.step(&x, &u, dt)?) } else { None };
        traj.times.push(t);
        traj.states.push(std::mem::take(&mut x));
        traj.inputs.push(u);
        match next {
            Some(nx) => x = nx,
            None => break,
        }
    }
    Ok(traj)
}
