//! Scenario files: cluster, network, timers, policies, workload and adversaries.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::workload::WorkloadSpec;
use crate::adversary::AdversaryStrategy;
use crate::consensus::{CostModel, LocalVerdicts, Protocol, TimerConfig};
use crate::netsim::SimConfig;
use crate::policy::{PolicyBinding, PolicyExpr};
use crate::types::{AccountId, ClusterConfig, ConfigError, NodeId};

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("scenario parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("cluster: {0}")]
    Cluster(#[from] ConfigError),
    #[error("{path}: {message}")]
    Invalid { path: String, message: String },
}

fn invalid(path: impl Into<String>, message: impl Into<String>) -> ScenarioError {
    ScenarioError::Invalid { path: path.into(), message: message.into() }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterSpec {
    pub n: usize,
    pub f: usize,
    /// Defaults to `n0..n{n-1}`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub node_ids: Vec<NodeId>,
}

impl ClusterSpec {
    pub fn resolve(&self) -> Result<ClusterConfig, ConfigError> {
        if self.node_ids.is_empty() {
            ClusterConfig::with_default_ids(self.n, self.f)
        } else {
            ClusterConfig::new(self.n, self.f, self.node_ids.clone())
        }
    }
}

/// Either one strategy or a list applied in order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Strategies {
    One(AdversaryStrategy),
    Many(Vec<AdversaryStrategy>),
}

impl Strategies {
    pub fn to_vec(&self) -> Vec<AdversaryStrategy> {
        match self {
            Strategies::One(s) => vec![s.clone()],
            Strategies::Many(v) => v.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Genesis {
    /// Balance of every account the workload touches, unless listed below.
    #[serde(default = "default_initial_balance")]
    pub initial_balance: i64,
    #[serde(default)]
    pub balances: BTreeMap<AccountId, i64>,
}

fn default_initial_balance() -> i64 {
    1_000
}

impl Default for Genesis {
    fn default() -> Self {
        Self { initial_balance: default_initial_balance(), balances: BTreeMap::new() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Optimizations {
    #[serde(default = "yes")]
    pub hash_only_reproposal: bool,
    #[serde(default = "yes")]
    pub dependency_reexec: bool,
}

fn yes() -> bool {
    true
}

impl Default for Optimizations {
    fn default() -> Self {
        Self { hash_only_reproposal: true, dependency_reexec: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub mode: Protocol,
    pub cluster: ClusterSpec,
    #[serde(default)]
    pub sim: SimConfig,
    /// Defaults to `2Δ + r·Δ` for every timer.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timers: Option<TimerConfig>,
    #[serde(default)]
    pub policies: Vec<PolicyBinding>,
    /// Defaults to a quorum of all nodes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default_policy: Option<PolicyExpr>,
    pub workload: WorkloadSpec,
    #[serde(default)]
    pub genesis: Genesis,
    #[serde(default)]
    pub adversaries: BTreeMap<NodeId, Strategies>,
    #[serde(default)]
    pub verdicts: BTreeMap<NodeId, LocalVerdicts>,
    pub target_heights: u64,
    #[serde(default)]
    pub optimizations: Optimizations,
    #[serde(default)]
    pub costs: CostModel,
}

impl Scenario {
    /// Parses and validates a scenario. Parse errors carry line and column.
    pub fn from_json(text: &str) -> Result<Self, ScenarioError> {
        let s: Scenario = serde_json::from_str(text)?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path).map_err(|e| invalid(path.display().to_string(), e.to_string()))?;
        Self::from_json(&text)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    pub fn cluster(&self) -> ClusterConfig {
        self.cluster.resolve().expect("validated scenario")
    }

    pub fn timers(&self) -> TimerConfig {
        self.timers.unwrap_or_else(|| TimerConfig::from_delta(self.sim.delta))
    }

    pub fn default_policy(&self) -> PolicyExpr {
        self.default_policy.clone().unwrap_or_else(|| PolicyExpr::default_for(&self.cluster()))
    }

    pub fn byzantine(&self) -> BTreeSet<NodeId> {
        self.adversaries.keys().cloned().collect()
    }

    /// Simulation deadline: explicit, or `gst + 1000Δ`.
    pub fn max_sim_time(&self) -> u64 {
        self.sim.max_sim_time.unwrap_or(self.sim.gst + 1000 * self.sim.delta)
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let cluster = self.cluster.resolve()?;
        if self.target_heights == 0 {
            return Err(invalid("target_heights", "must be at least 1"));
        }
        if self.adversaries.len() > cluster.f {
            return Err(invalid(
                "adversaries",
                format!("{} byzantine nodes exceed f={}", self.adversaries.len(), cluster.f),
            ));
        }
        let known = |path: String, id: &NodeId| {
            if cluster.contains(id) {
                Ok(())
            } else {
                Err(invalid(path, format!("unknown node {id}")))
            }
        };
        for (id, strategies) in &self.adversaries {
            known(format!("adversaries.{id}"), id)?;
            for (i, s) in strategies.to_vec().iter().enumerate() {
                for n in s.referenced_nodes() {
                    known(format!("adversaries.{id}[{i}]"), n)?;
                }
                if let AdversaryStrategy::LastMomentEndorsement { target_correct_count } = s {
                    if *target_correct_count > cluster.n - cluster.f {
                        return Err(invalid(format!("adversaries.{id}[{i}]"), "target_correct_count exceeds n - f"));
                    }
                }
            }
        }
        for id in self.verdicts.keys() {
            known(format!("verdicts.{id}"), id)?;
        }
        for (i, b) in self.policies.iter().enumerate() {
            b.validate(Some(&cluster)).map_err(|e| invalid(format!("policies[{i}]"), e.to_string()))?;
        }
        if let Some(p) = &self.default_policy {
            p.validate(Some(&cluster)).map_err(|e| invalid("default_policy", e.to_string()))?;
        }
        self.sim.validate(&cluster).map_err(|(path, msg)| invalid(format!("sim.{path}"), msg))?;
        self.workload.validate().map_err(|(path, msg)| invalid(format!("workload.{path}"), msg))?;
        if let Some(t) = &self.timers {
            for (name, b) in [("propose", t.propose), ("prevote", t.prevote), ("precommit", t.precommit)] {
                if b.base == 0 {
                    return Err(invalid(format!("timers.{name}.base"), "must be positive"));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "cluster": {"n": 4, "f": 1},
        "workload": {"conflict_free": {"tx_count": 4, "batch": 2}},
        "target_heights": 2
    }"#;

    #[test]
    fn minimal_defaults() {
        let s = Scenario::from_json(MINIMAL).unwrap();
        assert_eq!(s.sim.delta, 100);
        assert_eq!(s.timers().prevote.base, 200);
        assert!(s.optimizations.hash_only_reproposal);
        assert_eq!(s.cluster().node_ids[3].as_str(), "n3");
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let bad = "{\n  \"cluster\": {\"n\": 4, \"f\": 1},\n  \"default_policy\": {\"thresh\": 3}\n}";
        let err = Scenario::from_json(bad).unwrap_err().to_string();
        assert!(err.contains("line 3"), "{err}");
    }

    #[test]
    fn unknown_node_in_policy() {
        let text = MINIMAL.replace(
            "\"target_heights\": 2",
            "\"target_heights\": 2, \"policies\": [{\"target\": \"a0\", \"policy\": {\"node\": \"zz\"}}]",
        );
        let err = Scenario::from_json(&text).unwrap_err().to_string();
        assert!(err.starts_with("policies[0]"), "{err}");
    }

    #[test]
    fn too_many_adversaries() {
        let text = MINIMAL.replace("\"target_heights\": 2", "\"target_heights\": 2, \"adversaries\": {\"n0\": \"silent\", \"n1\": \"silent\"}");
        assert!(Scenario::from_json(&text).unwrap_err().to_string().contains("exceed f=1"));
    }
}
