//! Scenario runs and the FlexTender/EOV comparison.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use super::audit::{audit, AuditReport};
use super::metrics::{compute, Metrics};
use super::scenario::{Scenario, ScenarioError};
use super::trace::{trace_to_string, RunStatus, TraceBody, TraceRecord};
use super::workload::generate_workload;
use crate::consensus::{Node, NodeConfig, Protocol};
use crate::netsim::Simulation;
use crate::policy::PolicySet;
use crate::types::NodeId;

pub struct RunOutcome {
    pub status: RunStatus,
    pub trace: Vec<TraceRecord>,
    pub metrics: Metrics,
    /// Final world state of every correct node, by node id.
    pub final_states: BTreeMap<NodeId, crate::execution::WorldState>,
}

impl RunOutcome {
    pub fn completed(&self) -> bool {
        self.status == RunStatus::Completed
    }

    pub fn trace_text(&self) -> String {
        trace_to_string(&self.trace)
    }

    pub fn metrics_json(&self) -> String {
        serde_json::to_string_pretty(&self.metrics).expect("metrics serialize") + "\n"
    }

    pub fn audit(&self) -> AuditReport {
        audit(&self.trace).expect("a fresh trace is well formed")
    }
}

/// Runs one validated scenario with one seed.
pub fn run(s: &Scenario, seed: u64) -> RunOutcome {
    let cluster = s.cluster();
    let policies = PolicySet::new(s.policies.clone(), s.default_policy(), &cluster);
    let workload = generate_workload(&s.workload, &cluster, seed);
    let genesis = workload.genesis(&s.genesis);
    let nodes: Vec<Node> = cluster
        .node_ids
        .iter()
        .zip(workload.mempools)
        .map(|(id, mempool)| {
            let cfg = NodeConfig {
                id: id.clone(),
                cluster: cluster.clone(),
                policies: policies.clone(),
                timers: s.timers(),
                verdicts: s.verdicts.get(id).cloned().unwrap_or_default(),
                protocol: s.mode,
                batch_size: s.workload.batch(),
                hash_only_reproposal: s.optimizations.hash_only_reproposal,
                dependency_reexec: s.optimizations.dependency_reexec,
                costs: s.costs,
            };
            Node::new(Arc::new(cfg), genesis.clone(), mempool)
        })
        .collect();
    let strategies = s.adversaries.iter().map(|(id, st)| (id.clone(), st.to_vec())).collect();
    let header = TraceRecord { time: 0, node: None, body: TraceBody::Header { scenario: Box::new(s.clone()), seed } };
    let sim = Simulation::new(s.sim.clone(), seed, nodes, strategies, s.target_heights, s.max_sim_time(), vec![header]);
    let out = sim.run();

    let byz = s.byzantine();
    let correct: BTreeSet<NodeId> = cluster.node_ids.iter().filter(|n| !byz.contains(*n)).cloned().collect();
    let stats: Vec<_> = out.nodes.iter().filter(|n| correct.contains(n.id())).map(|n| n.stats()).collect();
    let metrics = compute(&out.trace, &stats, &correct, out.end_time);
    let final_states =
        out.nodes.iter().filter(|n| correct.contains(n.id())).map(|n| (n.id().clone(), n.world().clone())).collect();
    RunOutcome { status: out.status, trace: out.trace, metrics, final_states }
}

/// Parses, validates and runs.
pub fn run_json(text: &str, seed: u64) -> Result<RunOutcome, ScenarioError> {
    Ok(run(&Scenario::from_json(text)?, seed))
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModeSummary {
    pub runs: usize,
    pub completed: usize,
    pub mean_throughput: f64,
    pub mean_abort_rate: f64,
    pub removals: u64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Comparison {
    pub flextender: ModeSummary,
    pub eov: ModeSummary,
}

impl Comparison {
    /// FlexTender throughput over EOV throughput.
    pub fn throughput_ratio(&self) -> f64 {
        if self.eov.mean_throughput == 0.0 {
            f64::INFINITY
        } else {
            self.flextender.mean_throughput / self.eov.mean_throughput
        }
    }
}

fn summarize(outcomes: &[RunOutcome]) -> ModeSummary {
    let k = outcomes.len().max(1) as f64;
    ModeSummary {
        runs: outcomes.len(),
        completed: outcomes.iter().filter(|o| o.completed()).count(),
        mean_throughput: outcomes.iter().map(|o| o.metrics.throughput).sum::<f64>() / k,
        mean_abort_rate: outcomes.iter().map(|o| o.metrics.abort_rate).sum::<f64>() / k,
        removals: outcomes.iter().map(|o| o.metrics.removals.total()).sum(),
    }
}

/// Runs the scenario in both modes on seeds `0..seeds`.
pub fn compare(s: &Scenario, seeds: u64) -> Comparison {
    let in_mode = |mode| {
        let sc = Scenario { mode, ..s.clone() };
        (0..seeds).map(|seed| run(&sc, seed)).collect::<Vec<_>>()
    };
    Comparison { flextender: summarize(&in_mode(Protocol::Flextender)), eov: summarize(&in_mode(Protocol::Eov)) }
}

/// Scenario files shipped with the crate.
pub const GOLDEN: &[(&str, &str)] = &[
    ("fig4", include_str!("../../../../scenarios/fig4.json")),
    ("fig5", include_str!("../../../../scenarios/fig5.json")),
    ("fig6", include_str!("../../../../scenarios/fig6.json")),
    ("fig7", include_str!("../../../../scenarios/fig7.json")),
    ("fig10_crash_node", include_str!("../../../../scenarios/fig10_crash_node.json")),
    ("fig10_crash_endorser", include_str!("../../../../scenarios/fig10_crash_endorser.json")),
    ("happy_path", include_str!("../../../../scenarios/happy_path.json")),
    ("conflict_free", include_str!("../../../../scenarios/conflict_free.json")),
    ("all_conflict", include_str!("../../../../scenarios/all_conflict.json")),
    ("zipf", include_str!("../../../../scenarios/zipf.json")),
];

pub fn golden(name: &str) -> Option<Scenario> {
    GOLDEN.iter().find(|(n, _)| *n == name).map(|(_, text)| Scenario::from_json(text).expect("shipped scenarios are valid"))
}
