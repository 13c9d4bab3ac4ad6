//! Anchor-sample selection and per-leader constraint assembly.
//!
//! With anchor sample `i*` and bounds `J̲ ≤ ∇ḣ ≤ J̄`, the mean value theorem
//! gives the certified lower bound
//!
//! ```text
//!     ḣ(x, u) ≥ ḣ_{i*} + Σ_c interval(J̲_c, J̄_c, z_c - z_{i*,c})
//! ```
//!
//! Every term belongs to a single agent, so the sum can be split between the
//! enforcing leaders: shared terms are weighted by `β`, each leader keeps its
//! own and exclusive-neighborhood terms.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::barriers::{norm, sub, KInfFunction, Variant};
use crate::bounds::{interval_term, JacobianBounds};
use crate::data::DerivativeDataset;
use crate::error::{Error, Result};
use crate::graph::{AgentId, CommGraph, EdgeClass};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexSelection {
    pub candidate: String,
    pub index: usize,
    pub score: f64,
}

/// `c₀ + Σ_c min(lo_c (u_c - a_c), hi_c (u_c - a_c)) ≥ rhs` over one leader's input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalConstraint {
    pub leader: AgentId,
    pub const_term: f64,
    pub input_anchor: Vec<f64>,
    pub slope_lo: Vec<f64>,
    pub slope_hi: Vec<f64>,
    pub rhs: f64,
}

impl LocalConstraint {
    pub fn lhs(&self, u: &[f64]) -> f64 {
        self.const_term
            + u.iter()
                .enumerate()
                .map(|(c, &v)| {
                    let d = v - self.input_anchor[c];
                    (self.slope_lo[c] * d).min(self.slope_hi[c] * d)
                })
                .sum::<f64>()
    }

    pub fn margin(&self, u: &[f64]) -> f64 {
        self.lhs(u) - self.rhs
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BetaSplit {
    pub beta_k: f64,
    pub beta_j: f64,
}

impl BetaSplit {
    pub fn new(beta_k: f64, beta_j: f64) -> Result<Self> {
        if beta_k < 0.0 || beta_j < 0.0 || (beta_k + beta_j - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidParameter(format!(
                "beta split ({beta_k}, {beta_j}) must be nonnegative and sum to 1"
            )));
        }
        Ok(Self { beta_k, beta_j })
    }
}

impl Default for BetaSplit {
    fn default() -> Self {
        Self { beta_k: 0.5, beta_j: 0.5 }
    }
}

fn check_shapes(ds: &DerivativeDataset, b: &JacobianBounds) -> Result<()> {
    if b.lower_x.len() != ds.x_len() || b.lower_u.len() != ds.u_len() {
        return Err(Error::Dimension(format!(
            "bounds for {} have {}+{} components, dataset has {}+{}",
            b.candidate,
            b.lower_x.len(),
            b.lower_u.len(),
            ds.x_len(),
            ds.u_len()
        )));
    }
    Ok(())
}

/// `ḣ_i + J̲_x·Δ⁺ - J̄_x·Δ⁻` with `Δ = x_block - x_{i}`.
pub fn state_score(ds: &DerivativeDataset, b: &JacobianBounds, i: usize, x_block: &[f64]) -> f64 {
    let s = &ds.samples[i];
    let mut score = s.hdot;
    for c in 0..x_block.len() {
        score += interval_term(b.lower_x[c], b.upper_x[c], x_block[c] - s.x_block[c]);
    }
    score
}

fn argmax<F: Fn(usize) -> bool>(ds: &DerivativeDataset, b: &JacobianBounds, x: &[f64], admissible: F) -> Result<IndexSelection> {
    check_shapes(ds, b)?;
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let x_block = ds.candidate.state_block(x, ds.state_dim);
    let mut best: Option<(usize, f64)> = None;
    for i in 0..ds.len() {
        if !admissible(i) {
            continue;
        }
        let s = state_score(ds, b, i, &x_block);
        if best.map_or(true, |(_, bs)| s > bs) {
            best = Some((i, s));
        }
    }
    let (index, score) = best.ok_or(Error::NoAdmissibleSample)?;
    Ok(IndexSelection {
        candidate: ds.candidate.id(),
        index,
        score,
    })
}

/// Anchor for a pair barrier (leader-follower or leader-leader edge).
pub fn select_index_pair(ds: &DerivativeDataset, b: &JacobianBounds, x: &[f64]) -> Result<IndexSelection> {
    argmax(ds, b, x, |_| true)
}

/// `min_{λ∈[0,1]} ‖a + λ(b - a)‖`.
pub fn segment_min_norm(a: &[f64], b: &[f64]) -> f64 {
    let d = sub(b, a);
    let dd: f64 = d.iter().map(|v| v * v).sum();
    let q = |lam: f64| a.iter().zip(&d).map(|(ai, di)| (ai + lam * di).powi(2)).sum::<f64>();
    let mut best = q(0.0).min(q(1.0));
    if dd > 0.0 {
        let lam = -a.iter().zip(&d).map(|(ai, di)| ai * di).sum::<f64>() / dd;
        if lam > 0.0 && lam < 1.0 {
            best = best.min(q(lam));
        }
    }
    best.max(0.0).sqrt()
}

/// Anchor for a follower-follower barrier: only samples whose leader
/// direction can be interpolated to the current one without passing within
/// `eps` of the origin are admissible.
pub fn select_index_ff(ds: &DerivativeDataset, b: &JacobianBounds, x: &[f64], eps: f64) -> Result<IndexSelection> {
    let c = &ds.candidate;
    let a = c.ff_leaders.ok_or(Error::WrongVariant {
        expected: "parallel or orthogonal",
    })?;
    let n = ds.state_dim;
    let cur = sub(&x[a.leader_k * n..(a.leader_k + 1) * n], &x[a.leader_j * n..(a.leader_j + 1) * n]);
    let sep = norm(&cur);
    if sep <= eps {
        return Err(Error::DegenerateDirection { separation: sep, eps });
    }
    let (sk, sj) = (
        c.state_slot(a.leader_k).expect("leader outside state block"),
        c.state_slot(a.leader_j).expect("leader outside state block"),
    );
    argmax(ds, b, x, |i| {
        let xb = &ds.samples[i].x_block;
        let dir = sub(&xb[sk * n..(sk + 1) * n], &xb[sj * n..(sj + 1) * n]);
        segment_min_norm(&dir, &cur) >= eps
    })
}

pub fn select_index(ds: &DerivativeDataset, b: &JacobianBounds, x: &[f64], eps: f64) -> Result<IndexSelection> {
    match ds.candidate.variant {
        Variant::Pair => select_index_pair(ds, b, x),
        _ => select_index_ff(ds, b, x, eps),
    }
}

/// Interval contribution of each agent's state block, keyed by agent.
fn state_terms(ds: &DerivativeDataset, b: &JacobianBounds, i: usize, x: &[f64]) -> Vec<(AgentId, f64)> {
    let n = ds.state_dim;
    let s = &ds.samples[i];
    ds.candidate
        .state_agents
        .iter()
        .enumerate()
        .map(|(slot, &a)| {
            let t = (0..n)
                .map(|d| {
                    let c = slot * n + d;
                    interval_term(b.lower_x[c], b.upper_x[c], x[a * n + d] - s.x_block[c])
                })
                .sum();
            (a, t)
        })
        .collect()
}

fn input_term(ds: &DerivativeDataset, b: &JacobianBounds, i: usize, agent: AgentId, u_agent: &[f64]) -> f64 {
    let m = ds.input_dim;
    let slot = ds.candidate.input_slot(agent).expect("agent outside input block");
    (0..m)
        .map(|d| {
            let c = slot * m + d;
            interval_term(b.lower_u[c], b.upper_u[c], u_agent[d] - ds.samples[i].u_block[c])
        })
        .sum()
}

fn leader_constraint(
    ds: &DerivativeDataset,
    b: &JacobianBounds,
    i: usize,
    leader: AgentId,
    const_term: f64,
    rhs: f64,
) -> LocalConstraint {
    let m = ds.input_dim;
    let slot = ds.candidate.input_slot(leader).expect("leader outside input block");
    let r = slot * m..(slot + 1) * m;
    LocalConstraint {
        leader,
        const_term,
        input_anchor: ds.samples[i].u_block[r.clone()].to_vec(),
        slope_lo: b.lower_u[r.clone()].to_vec(),
        slope_hi: b.upper_u[r].to_vec(),
        rhs,
    }
}

/// Followers carry no input in closed loop.
fn follower_input_term(ds: &DerivativeDataset, b: &JacobianBounds, i: usize, agent: AgentId) -> f64 {
    input_term(ds, b, i, agent, &vec![0.0; ds.input_dim])
}

fn check_selection(ds: &DerivativeDataset, b: &JacobianBounds, sel: &IndexSelection) -> Result<()> {
    check_shapes(ds, b)?;
    if sel.index >= ds.len() || sel.candidate != ds.candidate.id() {
        return Err(Error::InvalidParameter(format!(
            "selection {} #{} does not belong to dataset {} of {} samples",
            sel.candidate,
            sel.index,
            ds.candidate.id(),
            ds.len()
        )));
    }
    Ok(())
}

/// Single constraint for the leader of a leader-follower edge.
pub fn assemble_lf(
    graph: &CommGraph,
    ds: &DerivativeDataset,
    b: &JacobianBounds,
    sel: &IndexSelection,
    alpha: KInfFunction,
    x: &[f64],
) -> Result<LocalConstraint> {
    check_selection(ds, b, sel)?;
    let c = &ds.candidate;
    if c.class != EdgeClass::LeaderFollower {
        return Err(Error::WrongVariant { expected: "leader-follower pair" });
    }
    let (k, j) = (c.edge.lo(), c.edge.hi());
    let (leader, follower) = if graph.is_leader(k) { (k, j) } else { (j, k) };
    let i = sel.index;
    let c0 = ds.samples[i].hdot
        + state_terms(ds, b, i, x).iter().map(|(_, t)| t).sum::<f64>()
        + follower_input_term(ds, b, i, follower);
    let h = c.eval(x, ds.state_dim, 0.0)?;
    Ok(leader_constraint(ds, b, i, leader, c0, -alpha.alpha(h)))
}

struct Sides {
    own_k: BTreeSet<AgentId>,
    own_j: BTreeSet<AgentId>,
    shared: BTreeSet<AgentId>,
    only_k: BTreeSet<AgentId>,
    only_j: BTreeSet<AgentId>,
}

/// Partition of the state block into own, shared and exclusive agents.
fn sides(graph: &CommGraph, own_k: &[AgentId], own_j: &[AgentId]) -> Result<Sides> {
    let reach = |own: &[AgentId]| -> Result<BTreeSet<AgentId>> {
        let mut s = BTreeSet::new();
        for &a in own {
            s.extend(graph.neighbors(a)?.iter().copied());
        }
        Ok(s)
    };
    let (rk, rj) = (reach(own_k)?, reach(own_j)?);
    let own: BTreeSet<AgentId> = own_k.iter().chain(own_j).copied().collect();
    let shared = rk.intersection(&rj).filter(|a| !own.contains(a)).copied().collect();
    let only_k = rk.difference(&rj).filter(|a| !own.contains(a)).copied().collect();
    let only_j = rj.difference(&rk).filter(|a| !own.contains(a)).copied().collect();
    Ok(Sides {
        own_k: own_k.iter().copied().collect(),
        own_j: own_j.iter().copied().collect(),
        shared,
        only_k,
        only_j,
    })
}

fn split_pair(
    ds: &DerivativeDataset,
    b: &JacobianBounds,
    i: usize,
    x: &[f64],
    sd: &Sides,
    split: BetaSplit,
    leaders: (AgentId, AgentId),
    h: f64,
    alpha: KInfFunction,
) -> Result<(LocalConstraint, LocalConstraint)> {
    let terms = state_terms(ds, b, i, x);
    let sum_over = |set: &BTreeSet<AgentId>| terms.iter().filter(|(a, _)| set.contains(a)).map(|(_, t)| t).sum::<f64>();
    let covered = sd.own_k.len() + sd.own_j.len() + sd.shared.len() + sd.only_k.len() + sd.only_j.len();
    if covered != terms.len() {
        return Err(Error::InvalidGraph(format!(
            "neighborhood split of {} covers {covered} of {} agents",
            ds.candidate.id(),
            terms.len()
        )));
    }
    let shared = ds.samples[i].hdot + sum_over(&sd.shared);
    let follower_inputs = |own: &BTreeSet<AgentId>| {
        own.iter()
            .filter(|&&a| a != leaders.0 && a != leaders.1)
            .map(|&a| follower_input_term(ds, b, i, a))
            .sum::<f64>()
    };
    let c0_k = split.beta_k * shared + sum_over(&sd.own_k) + sum_over(&sd.only_k) + follower_inputs(&sd.own_k);
    let c0_j = split.beta_j * shared + sum_over(&sd.own_j) + sum_over(&sd.only_j) + follower_inputs(&sd.own_j);
    let a = alpha.alpha(h);
    Ok((
        leader_constraint(ds, b, i, leaders.0, c0_k, -split.beta_k * a),
        leader_constraint(ds, b, i, leaders.1, c0_j, -split.beta_j * a),
    ))
}

/// Split constraint for a leader-leader edge `(k, j)`; returns `(k side, j side)`.
pub fn assemble_ll(
    graph: &CommGraph,
    ds: &DerivativeDataset,
    b: &JacobianBounds,
    sel: &IndexSelection,
    alpha: KInfFunction,
    split: BetaSplit,
    x: &[f64],
) -> Result<(LocalConstraint, LocalConstraint)> {
    check_selection(ds, b, sel)?;
    let c = &ds.candidate;
    if c.class != EdgeClass::LeaderLeader {
        return Err(Error::WrongVariant { expected: "leader-leader pair" });
    }
    let split = BetaSplit::new(split.beta_k, split.beta_j)?;
    let (k, j) = (c.edge.lo(), c.edge.hi());
    let sd = sides(graph, &[k], &[j])?;
    let h = c.eval(x, ds.state_dim, 0.0)?;
    split_pair(ds, b, sel.index, x, &sd, split, (k, j), h, alpha)
}

/// Split constraint for a follower-follower barrier; returns `(ℓ_k side, ℓ_j side)`.
pub fn assemble_ff(
    graph: &CommGraph,
    ds: &DerivativeDataset,
    b: &JacobianBounds,
    sel: &IndexSelection,
    alpha: KInfFunction,
    split: BetaSplit,
    x: &[f64],
    eps: f64,
) -> Result<(LocalConstraint, LocalConstraint)> {
    check_selection(ds, b, sel)?;
    let c = &ds.candidate;
    let a = c.ff_leaders.ok_or(Error::WrongVariant {
        expected: "parallel or orthogonal",
    })?;
    let split = BetaSplit::new(split.beta_k, split.beta_j)?;
    let sd = sides(graph, &[a.follower_k(), a.leader_k], &[a.follower_j(), a.leader_j])?;
    let h = c.eval(x, ds.state_dim, eps)?;
    split_pair(ds, b, sel.index, x, &sd, split, (a.leader_k, a.leader_j), h, alpha)
}

/// All local constraints of one candidate at state `x`.
pub fn assemble(
    graph: &CommGraph,
    ds: &DerivativeDataset,
    b: &JacobianBounds,
    sel: &IndexSelection,
    alpha: KInfFunction,
    split: BetaSplit,
    x: &[f64],
    eps: f64,
) -> Result<Vec<LocalConstraint>> {
    Ok(match (ds.candidate.class, ds.candidate.variant) {
        (EdgeClass::LeaderFollower, _) => vec![assemble_lf(graph, ds, b, sel, alpha, x)?],
        (EdgeClass::LeaderLeader, _) => {
            let (p, q) = assemble_ll(graph, ds, b, sel, alpha, split, x)?;
            vec![p, q]
        }
        (EdgeClass::FollowerFollower, _) => {
            let (p, q) = assemble_ff(graph, ds, b, sel, alpha, split, x, eps)?;
            vec![p, q]
        }
    })
}

/// The undivided certified lower bound on `ḣ(x, u)` from anchor `index`.
pub fn coupled_lower_bound(ds: &DerivativeDataset, b: &JacobianBounds, index: usize, x: &[f64], u: &[f64]) -> f64 {
    let s = &ds.samples[index];
    let xb = ds.candidate.state_block(x, ds.state_dim);
    let ub = ds.candidate.input_block(u, ds.input_dim);
    let mut v = s.hdot;
    for c in 0..xb.len() {
        v += interval_term(b.lower_x[c], b.upper_x[c], xb[c] - s.x_block[c]);
    }
    for c in 0..ub.len() {
        v += interval_term(b.lower_u[c], b.upper_u[c], ub[c] - s.u_block[c]);
    }
    v
}
