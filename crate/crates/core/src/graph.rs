//! Communication graph with leader/follower roles.
//!
//! Edges are undirected and stored canonically as `(min, max)`. Every other
//! module addresses agents by their vertex id and relies on the neighbor
//! algebra defined here (shared/exclusive neighborhoods, two-hop sets and the
//! leader pair used by follower-follower barriers).

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type AgentId = usize;

/// Undirected edge in canonical `(min, max)` order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(from = "(usize, usize)", into = "(usize, usize)")]
pub struct Edge(AgentId, AgentId);

impl Edge {
    pub fn new(a: AgentId, b: AgentId) -> Self {
        if a <= b {
            Edge(a, b)
        } else {
            Edge(b, a)
        }
    }

    pub fn lo(&self) -> AgentId {
        self.0
    }

    pub fn hi(&self) -> AgentId {
        self.1
    }

    pub fn contains(&self, v: AgentId) -> bool {
        self.0 == v || self.1 == v
    }

    /// The endpoint opposite to `v`, if `v` is an endpoint.
    pub fn other(&self, v: AgentId) -> Option<AgentId> {
        if v == self.0 {
            Some(self.1)
        } else if v == self.1 {
            Some(self.0)
        } else {
            None
        }
    }
}

impl From<(usize, usize)> for Edge {
    fn from((a, b): (usize, usize)) -> Self {
        Edge::new(a, b)
    }
}

impl From<Edge> for (usize, usize) {
    fn from(e: Edge) -> Self {
        (e.0, e.1)
    }
}

impl fmt::Display for Edge {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.0, self.1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeClass {
    LeaderLeader,
    LeaderFollower,
    FollowerFollower,
}

impl EdgeClass {
    pub fn tag(&self) -> &'static str {
        match self {
            EdgeClass::LeaderLeader => "ll",
            EdgeClass::LeaderFollower => "lf",
            EdgeClass::FollowerFollower => "ff",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EdgePartition {
    pub ll: BTreeSet<Edge>,
    pub lf: BTreeSet<Edge>,
    pub ff: BTreeSet<Edge>,
}

/// Neighborhood split of an agent pair `(k, j)`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct NeighborSplit {
    /// `N_k ∩ N_j`
    pub shared: BTreeSet<AgentId>,
    /// `N_k \ (N_kj ∪ {j})`
    pub only_k: BTreeSet<AgentId>,
    /// `N_j \ (N_kj ∪ {k})`
    pub only_j: BTreeSet<AgentId>,
}

/// Leaders chosen to carry a follower-follower edge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FfLeaderAssignment {
    pub edge: Edge,
    /// Leader adjacent to `edge.lo()` but not to `edge.hi()`.
    pub leader_k: AgentId,
    /// Leader adjacent to `edge.hi()` but not to `edge.lo()`.
    pub leader_j: AgentId,
}

impl FfLeaderAssignment {
    pub fn follower_k(&self) -> AgentId {
        self.edge.lo()
    }

    pub fn follower_j(&self) -> AgentId {
        self.edge.hi()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommGraph {
    num_agents: usize,
    leaders: BTreeSet<AgentId>,
    followers: BTreeSet<AgentId>,
    edges: BTreeSet<Edge>,
    adjacency: Vec<BTreeSet<AgentId>>,
}

impl CommGraph {
    /// Build a graph; every vertex not listed in `leaders` is a follower.
    pub fn new(
        num_agents: usize,
        leaders: impl IntoIterator<Item = AgentId>,
        edges: impl IntoIterator<Item = (AgentId, AgentId)>,
    ) -> Result<Self> {
        if num_agents == 0 {
            return Err(Error::InvalidGraph("graph needs at least one agent".into()));
        }
        let leaders: BTreeSet<_> = leaders.into_iter().collect();
        if let Some(&bad) = leaders.iter().find(|&&l| l >= num_agents) {
            return Err(Error::VertexOutOfRange(bad, num_agents));
        }
        let followers = (0..num_agents).filter(|v| !leaders.contains(v)).collect();
        let mut edge_set = BTreeSet::new();
        let mut adjacency = vec![BTreeSet::new(); num_agents];
        for (a, b) in edges {
            for v in [a, b] {
                if v >= num_agents {
                    return Err(Error::VertexOutOfRange(v, num_agents));
                }
            }
            if a == b {
                return Err(Error::InvalidGraph(format!("self-loop at vertex {a}")));
            }
            let e = Edge::new(a, b);
            if !edge_set.insert(e) {
                return Err(Error::InvalidGraph(format!("duplicate edge {e}")));
            }
            adjacency[a].insert(b);
            adjacency[b].insert(a);
        }
        Ok(Self {
            num_agents,
            leaders,
            followers,
            edges: edge_set,
            adjacency,
        })
    }

    pub fn num_agents(&self) -> usize {
        self.num_agents
    }

    pub fn leaders(&self) -> &BTreeSet<AgentId> {
        &self.leaders
    }

    pub fn followers(&self) -> &BTreeSet<AgentId> {
        &self.followers
    }

    pub fn edges(&self) -> &BTreeSet<Edge> {
        &self.edges
    }

    pub fn is_leader(&self, v: AgentId) -> bool {
        self.leaders.contains(&v)
    }

    pub fn has_edge(&self, a: AgentId, b: AgentId) -> bool {
        self.edges.contains(&Edge::new(a, b))
    }

    fn check(&self, v: AgentId) -> Result<()> {
        if v < self.num_agents {
            Ok(())
        } else {
            Err(Error::VertexOutOfRange(v, self.num_agents))
        }
    }

    pub fn neighbors(&self, i: AgentId) -> Result<&BTreeSet<AgentId>> {
        self.check(i)?;
        Ok(&self.adjacency[i])
    }

    pub fn edge_class(&self, e: Edge) -> EdgeClass {
        match (self.is_leader(e.lo()), self.is_leader(e.hi())) {
            (true, true) => EdgeClass::LeaderLeader,
            (false, false) => EdgeClass::FollowerFollower,
            _ => EdgeClass::LeaderFollower,
        }
    }

    pub fn classify_edges(&self) -> EdgePartition {
        let mut part = EdgePartition::default();
        for &e in &self.edges {
            match self.edge_class(e) {
                EdgeClass::LeaderLeader => part.ll.insert(e),
                EdgeClass::LeaderFollower => part.lf.insert(e),
                EdgeClass::FollowerFollower => part.ff.insert(e),
            };
        }
        part
    }

    pub fn shared_and_exclusive(&self, k: AgentId, j: AgentId) -> Result<NeighborSplit> {
        self.check(k)?;
        self.check(j)?;
        if k == j {
            return Err(Error::EqualVertices(k));
        }
        let nk = &self.adjacency[k];
        let nj = &self.adjacency[j];
        let shared: BTreeSet<_> = nk.intersection(nj).copied().collect();
        let only_k = nk
            .iter()
            .filter(|v| !shared.contains(v) && **v != j)
            .copied()
            .collect();
        let only_j = nj
            .iter()
            .filter(|v| !shared.contains(v) && **v != k)
            .copied()
            .collect();
        Ok(NeighborSplit {
            shared,
            only_k,
            only_j,
        })
    }

    /// Local information set of leader `j`: itself, its neighbors and their neighbors.
    pub fn two_hop_info(&self, j: AgentId) -> Result<BTreeSet<AgentId>> {
        self.check(j)?;
        if !self.is_leader(j) {
            return Err(Error::NotALeader(j));
        }
        let mut out = BTreeSet::from([j]);
        for &k in &self.adjacency[j] {
            out.insert(k);
            out.extend(self.adjacency[k].iter().copied());
        }
        Ok(out)
    }

    /// Pick, for each follower of a follower-follower edge, the lowest-indexed
    /// leader adjacent to it and not adjacent to the other follower.
    pub fn assign_ff_leaders(&self, edge: Edge) -> Result<FfLeaderAssignment> {
        if !self.edges.contains(&edge) || self.edge_class(edge) != EdgeClass::FollowerFollower {
            return Err(Error::NotFollowerEdge(edge));
        }
        let (k, j) = (edge.lo(), edge.hi());
        let pick = |own: AgentId, other: AgentId| {
            self.adjacency[own]
                .iter()
                .copied()
                .find(|l| self.is_leader(*l) && !self.adjacency[other].contains(l))
        };
        match (pick(k, j), pick(j, k)) {
            (Some(leader_k), Some(leader_j)) if leader_k != leader_j => Ok(FfLeaderAssignment {
                edge,
                leader_k,
                leader_j,
            }),
            _ => Err(Error::NoDistinctLeaders(edge)),
        }
    }

    /// Reject graphs in which some follower-follower edge has no distinct leader pair.
    pub fn validate_ff_leaders(&self) -> Result<()> {
        for e in self.classify_edges().ff {
            self.assign_ff_leaders(e)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn case_a() -> CommGraph {
        CommGraph::new(4, [0, 3], [(0, 1), (0, 2), (2, 3), (0, 3)]).unwrap()
    }

    fn case_b() -> CommGraph {
        CommGraph::new(4, [0, 3], [(0, 1), (1, 2), (2, 3)]).unwrap()
    }

    fn set(v: &[usize]) -> BTreeSet<usize> {
        v.iter().copied().collect()
    }

    #[test]
    fn classify_case_a() {
        let p = case_a().classify_edges();
        assert_eq!(p.lf, [Edge::new(0, 1), Edge::new(0, 2), Edge::new(2, 3)].into());
        assert_eq!(p.ll, [Edge::new(0, 3)].into());
        assert!(p.ff.is_empty());
    }

    #[test]
    fn classify_case_b() {
        let p = case_b().classify_edges();
        assert_eq!(p.lf, [Edge::new(0, 1), Edge::new(2, 3)].into());
        assert!(p.ll.is_empty());
        assert_eq!(p.ff, [Edge::new(1, 2)].into());
    }

    #[test]
    fn classify_empty() {
        let g = CommGraph::new(3, [0], []).unwrap();
        assert_eq!(g.classify_edges(), EdgePartition::default());
    }

    #[test]
    fn neighbor_sets() {
        assert_eq!(case_a().neighbors(0).unwrap(), &set(&[1, 2, 3]));
        assert_eq!(case_b().neighbors(1).unwrap(), &set(&[0, 2]));
        let g = CommGraph::new(3, [0], [(0, 1)]).unwrap();
        assert!(g.neighbors(2).unwrap().is_empty());
        assert!(matches!(g.neighbors(3), Err(Error::VertexOutOfRange(3, 3))));
    }

    #[test]
    fn shared_exclusive_case_a() {
        let s = case_a().shared_and_exclusive(0, 3).unwrap();
        assert_eq!(s.shared, set(&[2]));
        assert_eq!(s.only_k, set(&[1]));
        assert!(s.only_j.is_empty());
    }

    #[test]
    fn shared_exclusive_edge_cases() {
        let g = CommGraph::new(5, [0], [(0, 1), (0, 2), (3, 4)]).unwrap();
        let s = g.shared_and_exclusive(0, 3).unwrap();
        assert!(s.shared.is_empty());
        assert_eq!(s.only_k, set(&[1, 2]));
        assert_eq!(s.only_j, set(&[4]));
        let pair = CommGraph::new(2, [0], [(0, 1)]).unwrap();
        assert_eq!(pair.shared_and_exclusive(0, 1).unwrap(), NeighborSplit::default());
        assert!(matches!(g.shared_and_exclusive(2, 2), Err(Error::EqualVertices(2))));
    }

    #[test]
    fn two_hop() {
        assert_eq!(case_b().two_hop_info(0).unwrap(), set(&[0, 1, 2]));
        let complete = CommGraph::new(4, [1], (0..4).flat_map(|a| (a + 1..4).map(move |b| (a, b))))
            .unwrap();
        assert_eq!(complete.two_hop_info(1).unwrap(), set(&[0, 1, 2, 3]));
        let lonely = CommGraph::new(2, [0], []).unwrap();
        assert_eq!(lonely.two_hop_info(0).unwrap(), set(&[0]));
        assert!(matches!(case_b().two_hop_info(1), Err(Error::NotALeader(1))));
    }

    #[test]
    fn ff_assignment_case_b() {
        let a = case_b().assign_ff_leaders(Edge::new(1, 2)).unwrap();
        assert_eq!((a.leader_k, a.leader_j), (0, 3));
    }

    #[test]
    fn ff_assignment_without_leaders_fails() {
        let g = CommGraph::new(3, [0], [(1, 2), (0, 1)]).unwrap();
        assert!(matches!(
            g.assign_ff_leaders(Edge::new(1, 2)),
            Err(Error::NoDistinctLeaders(_))
        ));
        assert!(g.validate_ff_leaders().is_err());
    }

    #[test]
    fn ff_assignment_lowest_index() {
        // follower 0 sees leaders 2 and 5, follower 1 sees leader 3
        let g = CommGraph::new(6, [2, 3, 5], [(0, 1), (0, 5), (0, 2), (1, 3)]).unwrap();
        let a = g.assign_ff_leaders(Edge::new(0, 1)).unwrap();
        assert_eq!(a.leader_k, 2);
        assert_eq!(a.leader_j, 3);
        assert_eq!(g.assign_ff_leaders(Edge::new(0, 1)).unwrap(), a);
    }

    #[test]
    fn rejects_bad_graphs() {
        assert!(CommGraph::new(2, [0], [(0, 0)]).is_err());
        assert!(CommGraph::new(2, [0], [(0, 2)]).is_err());
        assert!(CommGraph::new(2, [4], [(0, 1)]).is_err());
        assert!(CommGraph::new(2, [0], [(0, 1), (1, 0)]).is_err());
    }

    fn arb_graph() -> impl Strategy<Value = CommGraph> {
        (1usize..=12).prop_flat_map(|m| {
            let pairs: Vec<(usize, usize)> =
                (0..m).flat_map(|a| (a + 1..m).map(move |b| (a, b))).collect();
            let np = pairs.len();
            (
                Just(m),
                proptest::collection::vec(any::<bool>(), m),
                proptest::collection::vec(any::<bool>(), np),
                Just(pairs),
            )
                .prop_map(|(m, lead, keep, pairs)| {
                    let leaders = (0..m).filter(|&v| lead[v]);
                    let edges = pairs.into_iter().zip(keep).filter(|(_, k)| *k).map(|(p, _)| p);
                    CommGraph::new(m, leaders, edges).unwrap()
                })
        })
    }

    proptest! {
        #[test]
        fn partition_is_exhaustive_and_disjoint(g in arb_graph()) {
            let p = g.classify_edges();
            let union: BTreeSet<Edge> = p.ll.iter().chain(&p.lf).chain(&p.ff).copied().collect();
            prop_assert_eq!(&union, g.edges());
            prop_assert_eq!(p.ll.len() + p.lf.len() + p.ff.len(), g.edges().len());
            for e in &p.ll { prop_assert!(g.is_leader(e.lo()) && g.is_leader(e.hi())); }
            for e in &p.ff { prop_assert!(!g.is_leader(e.lo()) && !g.is_leader(e.hi())); }
            for e in &p.lf { prop_assert!(g.is_leader(e.lo()) != g.is_leader(e.hi())); }
        }

        #[test]
        fn neighbor_symmetry(g in arb_graph()) {
            for i in 0..g.num_agents() {
                for &j in g.neighbors(i).unwrap() {
                    prop_assert!(g.neighbors(j).unwrap().contains(&i));
                }
            }
        }

        #[test]
        fn two_hop_contains_self_and_neighbors(g in arb_graph()) {
            for &l in g.leaders() {
                let info = g.two_hop_info(l).unwrap();
                prop_assert!(info.contains(&l));
                prop_assert!(g.neighbors(l).unwrap().is_subset(&info));
            }
        }

        #[test]
        fn ff_assignment_invariants(g in arb_graph()) {
            for e in g.classify_edges().ff {
                if let Ok(a) = g.assign_ff_leaders(e) {
                    let (k, j) = (e.lo(), e.hi());
                    prop_assert!(a.leader_k != a.leader_j);
                    prop_assert!(g.neighbors(k).unwrap().contains(&a.leader_k));
                    prop_assert!(!g.neighbors(j).unwrap().contains(&a.leader_k));
                    prop_assert!(g.neighbors(j).unwrap().contains(&a.leader_j));
                    prop_assert!(!g.neighbors(k).unwrap().contains(&a.leader_j));
                    prop_assert_eq!(g.assign_ff_leaders(e).unwrap(), a);
                }
            }
        }
    }
}
