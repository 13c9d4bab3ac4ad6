//! JSON scenario configuration. Unknown keys are rejected everywhere.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::barriers::{BarrierCandidate, KInfFunction};
use crate::certify::BetaSplit;
use crate::data::GenerationSpec;
use crate::dynamics::{ConsensusModel, Interval, SystemModel};
use crate::error::{Error, Result};
use crate::graph::{AgentId, CommGraph, Edge};
use crate::qp::QpSettings;
use crate::sim::Scenario;

pub const CASE_A: &str = include_str!("../../../configs/case_a.json");
pub const CASE_B: &str = include_str!("../../../configs/case_b.json");
pub const STUDY: &str = include_str!("../../../configs/study.json");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphSection {
    pub num_agents: usize,
    pub leaders: Vec<AgentId>,
    pub edges: Vec<Edge>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DesiredOffset {
    pub edge: Edge,
    pub d: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub dim: usize,
    pub desired: Vec<DesiredOffset>,
    #[serde(default)]
    pub state_box: Interval,
    #[serde(default)]
    pub input_box: Interval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BetaOverride {
    pub edge: Edge,
    pub beta_k: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BarrierSection {
    pub d_max: f64,
    pub gamma: f64,
    pub eps: f64,
    /// Share of the lower-indexed side on every split edge.
    pub beta: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub beta_overrides: Vec<BetaOverride>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub n_sims: usize,
    pub horizon: f64,
    pub dt: f64,
    #[serde(rename = "box")]
    pub sample_box: Interval,
    pub k: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundsSection {
    pub scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Target {
    pub leader: AgentId,
    pub target: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerSection {
    pub k_p: f64,
    pub targets: Vec<Target>,
    pub rho: f64,
    pub input_box: Interval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSection {
    pub dt: f64,
    pub horizon: f64,
    pub initial_state: Vec<f64>,
    #[serde(default = "default_warmup")]
    pub warmup: f64,
}

fn default_warmup() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputsSection {
    pub directory: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyRowSpec {
    pub n_sims: usize,
    pub scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudySection {
    pub rows: Vec<StudyRowSpec>,
    pub seeds: Vec<u64>,
    pub sim_dt: f64,
    pub sim_horizon: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub graph: GraphSection,
    pub model: ModelSection,
    pub barrier: BarrierSection,
    pub dataset: DatasetSection,
    pub bounds: BoundsSection,
    pub controller: ControllerSection,
    pub sim: SimSection,
    pub outputs: OutputsSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub study: Option<StudySection>,
}

impl ConfigFile {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn case_a() -> Self {
        Self::from_json(CASE_A).expect("bundled case A config is valid")
    }

    pub fn case_b() -> Self {
        Self::from_json(CASE_B).expect("bundled case B config is valid")
    }

    pub fn study() -> Self {
        Self::from_json(STUDY).expect("bundled study config is valid")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let d = &self.dataset;
        if d.n_sims == 0 {
            return bad("dataset.n_sims must be at least 1".into());
        }
        if !(d.dt > 0.0) || d.horizon + 1e-12 < 3.0 * d.dt {
            return bad("dataset.horizon must cover at least three dataset steps".into());
        }
        if d.k == 0 {
            return bad("dataset.k must be at least 1".into());
        }
        if !(self.sim.dt > 0.0) || !(self.sim.horizon >= self.sim.dt) {
            return bad("sim.dt must be positive and no longer than sim.horizon".into());
        }
        if !(self.bounds.scale > 0.0) {
            return bad("bounds.scale must be positive".into());
        }
        if !(self.controller.rho > 0.0) {
            return bad("controller.rho must be positive".into());
        }
        if !(self.controller.k_p >= 0.0) {
            return bad("controller.k_p must be nonnegative".into());
        }
        if !(self.barrier.beta >= 0.0 && self.barrier.beta <= 1.0) {
            return bad("barrier.beta must lie in [0, 1]".into());
        }
        if let Some(s) = &self.study {
            if s.seeds.is_empty() || s.rows.is_empty() {
                return bad("study needs at least one seed and one row".into());
            }
            if s.rows.iter().any(|r| r.n_sims == 0 || !(r.scale > 0.0)) {
                return bad("study rows need n_sims >= 1 and a positive scale".into());
            }
        }
        // builds every derived object, which checks cross references
        self.scenario()?;
        Ok(())
    }

    pub fn comm_graph(&self) -> Result<CommGraph> {
        CommGraph::new(self.graph.num_agents, self.graph.leaders.iter().copied(), self.graph.edges.iter().map(|&e| e.into()))
    }

    pub fn model(&self) -> Result<ConsensusModel> {
        let desired: BTreeMap<Edge, Vec<f64>> = self.model.desired.iter().map(|o| (o.edge, o.d.clone())).collect();
        if desired.len() != self.model.desired.len() {
            return Err(Error::Config("duplicate edge in model.desired".into()));
        }
        Ok(ConsensusModel::new(self.comm_graph()?, self.model.dim, desired)?.with_boxes(self.model.state_box, self.model.input_box))
    }

    pub fn candidates(&self) -> Result<Vec<BarrierCandidate>> {
        BarrierCandidate::all_for_graph(&self.comm_graph()?, self.barrier.d_max)
    }

    pub fn generation_spec(&self, seed: Option<u64>, n_sims: Option<usize>) -> GenerationSpec {
        GenerationSpec {
            n_sims: n_sims.unwrap_or(self.dataset.n_sims),
            horizon: self.dataset.horizon,
            dt: self.dataset.dt,
            sample_box: self.dataset.sample_box,
            seed: seed.unwrap_or(self.dataset.seed),
        }
    }

    pub fn alpha(&self) -> Result<KInfFunction> {
        KInfFunction::linear(self.barrier.gamma)
    }

    pub fn scenario(&self) -> Result<Scenario> {
        let model = self.model()?;
        let g = model.graph().clone();
        let n = self.model.dim;
        let mut targets = BTreeMap::new();
        for t in &self.controller.targets {
            if !g.is_leader(t.leader) {
                return Err(Error::Config(format!("target given for non-leader {}", t.leader)));
            }
            if t.target.len() != n {
                return Err(Error::Config(format!("target for leader {} has wrong dimension", t.leader)));
            }
            targets.insert(t.leader, t.target.clone());
        }
        if let Some(l) = g.leaders().iter().find(|l| !targets.contains_key(l)) {
            return Err(Error::Config(format!("leader {l} has no target")));
        }
        if self.sim.initial_state.len() != n * g.num_agents() {
            return Err(Error::Config(format!(
                "sim.initial_state has {} entries, expected {}",
                self.sim.initial_state.len(),
                n * g.num_agents()
            )));
        }
        let default = BetaSplit::new(self.barrier.beta, 1.0 - self.barrier.beta)?;
        let mut betas = BTreeMap::new();
        for o in &self.barrier.beta_overrides {
            if !g.edges().contains(&o.edge) {
                return Err(Error::Config(format!("beta override for non-edge {}", o.edge)));
            }
            betas.insert(o.edge, BetaSplit::new(o.beta_k, 1.0 - o.beta_k)?);
        }
        let candidates = BarrierCandidate::all_for_graph(&g, self.barrier.d_max)?;
        Ok(Scenario {
            model,
            candidates,
            targets,
            k_p: self.controller.k_p,
            alpha: self.alpha()?,
            eps: self.barrier.eps,
            default_beta: default,
            betas,
            rho: self.controller.rho,
            input_box: self.controller.input_box,
            dt: self.sim.dt,
            horizon: self.sim.horizon,
            x0: self.sim.initial_state.clone(),
            warmup: self.sim.warmup,
            filter_enabled: true,
            qp: QpSettings::default(),
        })
    }
}
