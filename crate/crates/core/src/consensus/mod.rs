//! The per-node FlexTender state machine.
//!
//! [`Node::handle`] is a deterministic transition from one input (start,
//! message delivery, timer) to a list of outputs; nothing is sent directly.

mod log;
mod message;
mod node;
mod verify;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::policy::{EndorsementView, PolicySet};
use crate::types::{ClusterConfig, NodeId, Round, TxId};

pub use log::{MessageLog, RoundMessages, SuggestionCount, RETAINED_PER_SENDER};
pub use message::{ExclusionKind, Message, Payload, Precommit, Prevote, Propose};
pub use node::{Decision, Input, Mempool, Node, NodeState, NodeStats, Output, PhaseEvent, Removal, RemovalCause, Timeout};
pub use verify::{extract, get_excluded_tx, is_subsequence, verify_endorsement, verify_reference, LogView};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Step {
    #[default]
    Propose,
    Prevote,
    Precommit,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimerKind {
    Propose,
    Prevote,
    Precommit,
}

/// `base + round * per_round` ticks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Backoff {
    pub base: u64,
    #[serde(default)]
    pub per_round: u64,
}

impl Backoff {
    pub fn at(&self, round: Round) -> u64 {
        self.base + u64::from(round) * self.per_round
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimerConfig {
    pub propose: Backoff,
    pub prevote: Backoff,
    pub precommit: Backoff,
}

impl TimerConfig {
    /// `2Δ + r·Δ` for every timer.
    pub fn from_delta(delta: u64) -> Self {
        let b = Backoff { base: 2 * delta, per_round: delta };
        Self { propose: b, prevote: b, precommit: b }
    }

    pub fn duration(&self, kind: TimerKind, round: Round) -> u64 {
        match kind {
            TimerKind::Propose => self.propose.at(round),
            TimerKind::Prevote => self.prevote.at(round),
            TimerKind::Precommit => self.precommit.at(round),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    #[default]
    Flextender,
    /// Execute-order-validate baseline: no endorsement, primary-only execution.
    Eov,
}

/// A node's own judgement of transaction results when acting as an endorser.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LocalVerdicts {
    #[serde(default)]
    pub oppose: BTreeMap<TxId, EndorsementView>,
    /// Oppose (`OPPOSE_RESULT`) any transfer that overdraws its sender.
    #[serde(default)]
    pub oppose_insufficient: bool,
}

impl LocalVerdicts {
    pub fn view_for(&self, txid: &TxId, result: &crate::execution::ExecResult) -> EndorsementView {
        if let Some(v) = self.oppose.get(txid) {
            return *v;
        }
        if self.oppose_insufficient && result.status == crate::execution::ExecStatus::Insufficient {
            EndorsementView::OpposeResult
        } else {
            EndorsementView::Endorse
        }
    }
}

/// Simulated processing time charged to a node.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostModel {
    #[serde(default)]
    pub exec_ticks_per_tx: u64,
    /// EOV primary signing cost per transaction (the "sig" variant).
    #[serde(default)]
    pub sig_ticks_per_tx: u64,
}

#[derive(Clone, Debug)]
pub struct NodeConfig {
    pub id: NodeId,
    pub cluster: ClusterConfig,
    pub policies: PolicySet,
    pub timers: TimerConfig,
    pub verdicts: LocalVerdicts,
    pub protocol: Protocol,
    pub batch_size: usize,
    pub hash_only_reproposal: bool,
    pub dependency_reexec: bool,
    pub costs: CostModel,
}

impl NodeConfig {
    /// Defaults for a FlexTender node with the quorum default policy.
    pub fn new(id: NodeId, cluster: ClusterConfig, delta: u64) -> Self {
        let policies = PolicySet::new(Vec::new(), crate::policy::PolicyExpr::default_for(&cluster), &cluster);
        Self {
            id,
            cluster,
            policies,
            timers: TimerConfig::from_delta(delta),
            verdicts: LocalVerdicts::default(),
            protocol: Protocol::Flextender,
            batch_size: 8,
            hash_only_reproposal: true,
            dependency_reexec: true,
            costs: CostModel::default(),
        }
    }
}

#[cfg(test)]
mod tests;
