//! Connectivity barrier candidates for each edge class.
//!
//! Leader-follower and leader-leader edges use the pair barrier
//! `d_max² - ‖x_k - x_j‖²`. A follower-follower edge gets two barriers built
//! from the components of `x_k - x_j` parallel and orthogonal to the
//! direction between the followers' assigned leaders, so that the leaders'
//! inputs show up in the first time derivative.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::dynamics::SystemModel;
use crate::error::{Error, Result};
use crate::graph::{AgentId, CommGraph, Edge, EdgeClass, FfLeaderAssignment};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Pair,
    Parallel,
    Orthogonal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BarrierCandidate {
    pub edge: Edge,
    pub class: EdgeClass,
    pub variant: Variant,
    pub d_max: f64,
    pub ff_leaders: Option<FfLeaderAssignment>,
    /// Agents whose states appear in `h` (and whose inputs may appear in `ḣ`), sorted.
    pub input_agents: Vec<AgentId>,
    /// Agents whose states appear in `ḣ`, sorted.
    pub state_agents: Vec<AgentId>,
}

impl fmt::Display for BarrierCandidate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.id())
    }
}

impl BarrierCandidate {
    /// Pair barrier on a leader-follower or leader-leader edge.
    pub fn pair(graph: &CommGraph, edge: Edge, d_max: f64) -> Result<Self> {
        check_d_max(d_max)?;
        if !graph.edges().contains(&edge) {
            return Err(Error::InvalidGraph(format!("{edge} is not an edge")));
        }
        let class = graph.edge_class(edge);
        if class == EdgeClass::FollowerFollower {
            return Err(Error::WrongVariant {
                expected: "parallel or orthogonal (follower-follower edge)",
            });
        }
        let members = [edge.lo(), edge.hi()];
        Ok(Self {
            edge,
            class,
            variant: Variant::Pair,
            d_max,
            ff_leaders: None,
            input_agents: members.to_vec(),
            state_agents: closed_neighborhood(graph, &members)?,
        })
    }

    /// Parallel or orthogonal barrier on a follower-follower edge.
    pub fn follower_pair(graph: &CommGraph, edge: Edge, variant: Variant, d_max: f64) -> Result<Self> {
        check_d_max(d_max)?;
        if variant == Variant::Pair {
            return Err(Error::WrongVariant {
                expected: "parallel or orthogonal",
            });
        }
        let a = graph.assign_ff_leaders(edge)?;
        let members = [a.follower_k(), a.follower_j(), a.leader_k, a.leader_j];
        let mut input_agents = members.to_vec();
        input_agents.sort_unstable();
        Ok(Self {
            edge,
            class: EdgeClass::FollowerFollower,
            variant,
            d_max,
            ff_leaders: Some(a),
            input_agents,
            state_agents: closed_neighborhood(graph, &members)?,
        })
    }

    /// Every candidate of a graph: one per lf/ll edge, two per ff edge.
    pub fn all_for_graph(graph: &CommGraph, d_max: f64) -> Result<Vec<Self>> {
        let mut out = Vec::new();
        for &e in graph.edges() {
            if graph.edge_class(e) == EdgeClass::FollowerFollower {
                out.push(Self::follower_pair(graph, e, Variant::Parallel, d_max)?);
                out.push(Self::follower_pair(graph, e, Variant::Orthogonal, d_max)?);
            } else {
                out.push(Self::pair(graph, e, d_max)?);
            }
        }
        Ok(out)
    }

    /// Stable identifier used for file names and tables, e.g. `ll_0_3`, `ff_par_1_2`.
    pub fn id(&self) -> String {
        let tag = match (self.class, self.variant) {
            (_, Variant::Parallel) => "ff_par",
            (_, Variant::Orthogonal) => "ff_orth",
            (c, Variant::Pair) => c.tag(),
        };
        format!("{tag}_{}_{}", self.edge.lo(), self.edge.hi())
    }

    /// Leaders that enforce this candidate's constraint.
    pub fn enforcing_leaders(&self, graph: &CommGraph) -> Vec<AgentId> {
        match (self.class, self.ff_leaders) {
            (EdgeClass::FollowerFollower, Some(a)) => vec![a.leader_k, a.leader_j],
            _ => [self.edge.lo(), self.edge.hi()]
                .into_iter()
                .filter(|v| graph.is_leader(*v))
                .collect(),
        }
    }

    pub fn state_slot(&self, agent: AgentId) -> Option<usize> {
        self.state_agents.binary_search(&agent).ok()
    }

    pub fn input_slot(&self, agent: AgentId) -> Option<usize> {
        self.input_agents.binary_search(&agent).ok()
    }

    /// `x_{I_ḣ}` gathered from a stacked state with per-agent dimension `n`.
    pub fn state_block(&self, x: &[f64], n: usize) -> Vec<f64> {
        gather(x, &self.state_agents, n)
    }

    /// `u_{I_h}` gathered from a stacked input with per-agent dimension `m`.
    pub fn input_block(&self, u: &[f64], m: usize) -> Vec<f64> {
        gather(u, &self.input_agents, m)
    }

    /// Barrier value at a stacked state.
    pub fn eval(&self, x: &[f64], n: usize, eps: f64) -> Result<f64> {
        let agent = |a: AgentId| agent_slice(x, a, n);
        let (k, j) = (self.edge.lo(), self.edge.hi());
        match self.variant {
            Variant::Pair => eval_pair(self, agent(k)?, agent(j)?),
            _ => {
                let a = self.ff_leaders.expect("follower barrier without leader assignment");
                eval_ff(self, agent(k)?, agent(j)?, agent(a.leader_k)?, agent(a.leader_j)?, eps)
            }
        }
    }

    /// Gradient of `h` with respect to each agent in `input_agents` order.
    pub fn gradient(&self, x: &[f64], n: usize, eps: f64) -> Result<Vec<Vec<f64>>> {
        let agent = |a: AgentId| agent_slice(x, a, n);
        let (k, j) = (self.edge.lo(), self.edge.hi());
        let r: Vec<f64> = sub(agent(k)?, agent(j)?);
        let mut grads = vec![vec![0.0; n]; self.input_agents.len()];
        let mut put = |who: AgentId, g: Vec<f64>| {
            let s = self.input_slot(who).expect("gradient agent outside I_h");
            grads[s] = g;
        };
        match self.variant {
            Variant::Pair => {
                put(k, r.iter().map(|v| -2.0 * v).collect());
                put(j, r.iter().map(|v| 2.0 * v).collect());
            }
            Variant::Parallel | Variant::Orthogonal => {
                let a = self.ff_leaders.expect("follower barrier without leader assignment");
                let y = sub(agent(a.leader_k)?, agent(a.leader_j)?);
                let len = norm(&y);
                if len <= eps {
                    return Err(Error::DegenerateDirection { separation: len, eps });
                }
                let yhat: Vec<f64> = y.iter().map(|v| v / len).collect();
                let p = dot(&r, &yhat);
                // ∂p/∂y = (r - p ŷ) / ‖y‖
                let dp_dy: Vec<f64> = r.iter().zip(&yhat).map(|(ri, yi)| (ri - p * yi) / len).collect();
                let scale = |v: &[f64], s: f64| v.iter().map(|e| e * s).collect::<Vec<_>>();
                match self.variant {
                    Variant::Parallel => {
                        // h = d²/2 - p²
                        put(k, scale(&yhat, -2.0 * p));
                        put(j, scale(&yhat, 2.0 * p));
                        put(a.leader_k, scale(&dp_dy, -2.0 * p));
                        put(a.leader_j, scale(&dp_dy, 2.0 * p));
                    }
                    _ => {
                        // h = d²/2 - ‖r‖² + p²
                        let gk: Vec<f64> = r.iter().zip(&yhat).map(|(ri, yi)| -2.0 * ri + 2.0 * p * yi).collect();
                        put(j, scale(&gk, -1.0));
                        put(k, gk);
                        put(a.leader_k, scale(&dp_dy, 2.0 * p));
                        put(a.leader_j, scale(&dp_dy, -2.0 * p));
                    }
                }
            }
        }
        Ok(grads)
    }
}

fn check_d_max(d_max: f64) -> Result<()> {
    if d_max > 0.0 && d_max.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("d_max must be positive, got {d_max}")))
    }
}

fn closed_neighborhood(graph: &CommGraph, members: &[AgentId]) -> Result<Vec<AgentId>> {
    let mut set: BTreeSet<AgentId> = members.iter().copied().collect();
    for &a in members {
        set.extend(graph.neighbors(a)?.iter().copied());
    }
    Ok(set.into_iter().collect())
}

fn gather(v: &[f64], agents: &[AgentId], dim: usize) -> Vec<f64> {
    agents
        .iter()
        .flat_map(|&a| v[a * dim..(a + 1) * dim].iter().copied())
        .collect()
}

fn agent_slice(x: &[f64], a: AgentId, n: usize) -> Result<&[f64]> {
    x.get(a * n..(a + 1) * n)
        .ok_or_else(|| Error::Dimension(format!("state too short for agent {a}")))
}

pub(crate) fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `d_max² - ‖x_k - x_j‖²`.
pub fn eval_pair(c: &BarrierCandidate, x_k: &[f64], x_j: &[f64]) -> Result<f64> {
    if c.variant != Variant::Pair {
        return Err(Error::WrongVariant { expected: "pair" });
    }
    let r = sub(x_k, x_j);
    Ok(c.d_max * c.d_max - dot(&r, &r))
}

/// Split `x_k - x_j` into components parallel and orthogonal to `x_lk - x_lj`.
pub fn decompose(
    x_k: &[f64],
    x_j: &[f64],
    x_lk: &[f64],
    x_lj: &[f64],
    eps: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let y = sub(x_lk, x_lj);
    let len = norm(&y);
    if len <= eps {
        return Err(Error::DegenerateDirection { separation: len, eps });
    }
    let r = sub(x_k, x_j);
    let p = r.iter().zip(&y).map(|(a, b)| a * b).sum::<f64>() / (len * len);
    let par: Vec<f64> = y.iter().map(|v| p * v).collect();
    let perp = sub(&r, &par);
    Ok((par, perp))
}

/// `d_max²/2 - ‖x̄∥‖²` (parallel) or `d_max²/2 - ‖x̄⊥‖²` (orthogonal).
pub fn eval_ff(
    c: &BarrierCandidate,
    x_k: &[f64],
    x_j: &[f64],
    x_lk: &[f64],
    x_lj: &[f64],
    eps: f64,
) -> Result<f64> {
    let (par, perp) = decompose(x_k, x_j, x_lk, x_lj, eps)?;
    let half = 0.5 * c.d_max * c.d_max;
    match c.variant {
        Variant::Parallel => Ok(half - dot(&par, &par)),
        Variant::Orthogonal => Ok(half - dot(&perp, &perp)),
        Variant::Pair => Err(Error::WrongVariant {
            expected: "parallel or orthogonal",
        }),
    }
}

/// Linear extended class-K∞ function `α(h) = γ h`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KInfFunction {
    gain: f64,
}

impl KInfFunction {
    pub fn linear(gain: f64) -> Result<Self> {
        if gain > 0.0 && gain.is_finite() {
            Ok(Self { gain })
        } else {
            Err(Error::InvalidParameter(format!("class-K gain must be positive, got {gain}")))
        }
    }

    pub fn gain(&self) -> f64 {
        self.gain
    }

    pub fn alpha(&self, h: f64) -> f64 {
        self.gain * h
    }
}

impl Default for KInfFunction {
    fn default() -> Self {
        Self { gain: 1.0 }
    }
}

/// Exact `ḣ = ∇h · ẋ` under a known model. Only oracles and tests may call this.
pub fn analytic_hdot<M: SystemModel + ?Sized>(
    c: &BarrierCandidate,
    model: &M,
    x: &[f64],
    u: &[f64],
    eps: f64,
) -> Result<f64> {
    let n = model.state_dim();
    let dx = model.derivative(x, u)?;
    let grads = c.gradient(x, n, eps)?;
    Ok(c.input_agents
        .iter()
        .zip(&grads)
        .map(|(&a, g)| dot(g, &dx[a * n..(a + 1) * n]))
        .sum())
}
