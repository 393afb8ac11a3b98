//! Endorsement policies: proper endorsement, rapid-removal vetoes, dynamic
//! triggers and prevote aggregation.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::consensus::{ExclusionKind, Prevote};
use crate::execution::{ExecResult, ExecStatus};
use crate::types::{AccountId, ClusterConfig, NodeId, Transaction, TxId, Value};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PolicyError {
    #[error("`and`/`or`/`threshold` needs at least one child")]
    EmptyChildren,
    #[error("threshold t={t} outside 1..={len}")]
    BadThreshold { t: usize, len: usize },
    #[error("policy names unknown node {0}")]
    UnknownNode(NodeId),
    #[error("unknown custom trigger {0:?}")]
    UnknownTrigger(String),
}

/// Monotone expression over node identities.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyExpr {
    Node(NodeId),
    And(Vec<PolicyExpr>),
    Or(Vec<PolicyExpr>),
    Threshold { t: usize, of: Vec<PolicyExpr> },
}

impl PolicyExpr {
    pub fn node(id: &str) -> Self {
        PolicyExpr::Node(NodeId::from(id))
    }

    /// `t` of the given nodes.
    pub fn threshold_over<'a>(t: usize, nodes: impl IntoIterator<Item = &'a NodeId>) -> Self {
        PolicyExpr::Threshold { t, of: nodes.into_iter().cloned().map(PolicyExpr::Node).collect() }
    }

    /// Default policy: a quorum of all nodes.
    pub fn default_for(cluster: &ClusterConfig) -> Self {
        Self::threshold_over(crate::types::quorum_size(cluster), &cluster.node_ids)
    }

    pub fn validate(&self, cluster: Option<&ClusterConfig>) -> Result<(), PolicyError> {
        match self {
            PolicyExpr::Node(id) => match cluster {
                Some(c) if !c.contains(id) => Err(PolicyError::UnknownNode(id.clone())),
                _ => Ok(()),
            },
            PolicyExpr::And(cs) | PolicyExpr::Or(cs) => {
                if cs.is_empty() {
                    return Err(PolicyError::EmptyChildren);
                }
                cs.iter().try_for_each(|c| c.validate(cluster))
            }
            PolicyExpr::Threshold { t, of } => {
                if of.is_empty() {
                    return Err(PolicyError::EmptyChildren);
                }
                if *t == 0 || *t > of.len() {
                    return Err(PolicyError::BadThreshold { t: *t, len: of.len() });
                }
                of.iter().try_for_each(|c| c.validate(cluster))
            }
        }
    }

    pub fn is_satisfied_by(&self, set: &BTreeSet<NodeId>) -> bool {
        match self {
            PolicyExpr::Node(id) => set.contains(id),
            PolicyExpr::And(cs) => cs.iter().all(|c| c.is_satisfied_by(set)),
            PolicyExpr::Or(cs) => cs.iter().any(|c| c.is_satisfied_by(set)),
            PolicyExpr::Threshold { t, of } => of.iter().filter(|c| c.is_satisfied_by(set)).count() >= *t,
        }
    }

    /// Every node named in the expression.
    pub fn leaves(&self) -> BTreeSet<NodeId> {
        let mut out = BTreeSet::new();
        self.collect_leaves(&mut out);
        out
    }

    fn collect_leaves(&self, out: &mut BTreeSet<NodeId>) {
        match self {
            PolicyExpr::Node(id) => {
                out.insert(id.clone());
            }
            PolicyExpr::And(cs) | PolicyExpr::Or(cs) | PolicyExpr::Threshold { of: cs, .. } => {
                cs.iter().for_each(|c| c.collect_leaves(out))
            }
        }
    }
}

/// Names accepted by [`Trigger::Custom`].
pub const CUSTOM_TRIGGERS: &[&str] = &["insufficient_balance", "ok_status", "self_transfer"];

/// When a binding imposes its policy on a transaction.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trigger {
    Always,
    AmountExceeds(u64),
    Custom(String),
}

impl Trigger {
    pub fn holds(&self, tx: &Transaction, result: Option<&ExecResult>) -> bool {
        match self {
            Trigger::Always => true,
            Trigger::AmountExceeds(limit) => tx.amount > *limit,
            Trigger::Custom(name) => match name.as_str() {
                "insufficient_balance" => result.is_some_and(|r| r.status == ExecStatus::Insufficient),
                "ok_status" => result.is_some_and(|r| r.status == ExecStatus::Ok),
                "self_transfer" => tx.from == tx.to,
                _ => false,
            },
        }
    }

    /// Depends on the transaction alone, so a failure repeats in any execution context.
    pub fn is_context_free(&self) -> bool {
        matches!(self, Trigger::Always | Trigger::AmountExceeds(_))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyBinding {
    pub target: AccountId,
    pub policy: PolicyExpr,
    #[serde(default = "default_trigger")]
    pub trigger: Trigger,
}

fn default_trigger() -> Trigger {
    Trigger::Always
}

impl PolicyBinding {
    pub fn matches(&self, tx: &Transaction, result: Option<&ExecResult>) -> bool {
        (tx.from == self.target || tx.to == self.target) && self.trigger.holds(tx, result)
    }

    pub fn validate(&self, cluster: Option<&ClusterConfig>) -> Result<(), PolicyError> {
        if let Trigger::Custom(name) = &self.trigger {
            if !CUSTOM_TRIGGERS.contains(&name.as_str()) {
                return Err(PolicyError::UnknownTrigger(name.clone()));
            }
        }
        self.policy.validate(cluster)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EndorsementView {
    Endorse,
    OpposeResult,
    OpposeAlways,
}

impl EndorsementView {
    pub fn is_oppose(self) -> bool {
        !matches!(self, EndorsementView::Endorse)
    }
}

/// Per-transaction views merged from one round's prevotes for one digest.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct EndorsementRecord {
    pub views: BTreeMap<TxId, BTreeMap<NodeId, EndorsementView>>,
    /// Senders of two differing maps; they count as endorsing every transaction.
    pub endorse_all: BTreeSet<NodeId>,
}

impl EndorsementRecord {
    pub fn endorsers(&self, tx: &TxId) -> BTreeSet<NodeId> {
        let mut out = self.endorse_all.clone();
        if let Some(v) = self.views.get(tx) {
            out.extend(v.iter().filter(|(_, view)| !view.is_oppose()).map(|(n, _)| n.clone()));
        }
        out
    }

    /// Opposers, optionally restricted to `OPPOSE_ALWAYS` views.
    pub fn opposers(&self, tx: &TxId, always_only: bool) -> BTreeSet<NodeId> {
        self.views
            .get(tx)
            .into_iter()
            .flatten()
            .filter(|(n, view)| {
                !self.endorse_all.contains(*n)
                    && match view {
                        EndorsementView::Endorse => false,
                        EndorsementView::OpposeResult => !always_only,
                        EndorsementView::OpposeAlways => true,
                    }
            })
            .map(|(n, _)| n.clone())
            .collect()
    }
}

/// Merges prevotes that share `(height, round, digest)`. Messages without an
/// endorsement map contribute nothing; identical maps merge; differing maps
/// from one sender turn that sender into an endorser of everything.
pub fn aggregate_prevotes(msgs: &[&Prevote]) -> EndorsementRecord {
    let mut by_sender: BTreeMap<&NodeId, Vec<&BTreeMap<TxId, EndorsementView>>> = BTreeMap::new();
    for m in msgs {
        if let Some(map) = &m.endorsements {
            let maps = by_sender.entry(&m.sender).or_default();
            if !maps.contains(&map) {
                maps.push(map);
            }
        }
    }
    let mut rec = EndorsementRecord::default();
    for (sender, maps) in by_sender {
        if maps.len() > 1 {
            rec.endorse_all.insert(sender.clone());
            continue;
        }
        for (tx, view) in maps[0] {
            rec.views.entry(tx.clone()).or_default().insert(sender.clone(), *view);
        }
    }
    rec
}

/// Policies of matching bindings; empty means the default policy applies.
pub fn applicable_policies(tx: &Transaction, result: &ExecResult, bindings: &[PolicyBinding]) -> Vec<PolicyExpr> {
    bindings.iter().filter(|b| b.matches(tx, Some(result))).map(|b| b.policy.clone()).collect()
}

fn effective<'a>(policies: &'a [PolicyExpr], default_policy: &'a PolicyExpr) -> &'a [PolicyExpr] {
    if policies.is_empty() {
        std::slice::from_ref(default_policy)
    } else {
        policies
    }
}

pub fn is_properly_endorsed(policies: &[PolicyExpr], default_policy: &PolicyExpr, endorsers: &BTreeSet<NodeId>) -> bool {
    effective(policies, default_policy).iter().all(|p| p.is_satisfied_by(endorsers))
}

/// Some applicable policy cannot be satisfied by the nodes that did not oppose.
pub fn is_vetoed(
    policies: &[PolicyExpr],
    default_policy: &PolicyExpr,
    opposers: &BTreeSet<NodeId>,
    all_nodes: &BTreeSet<NodeId>,
) -> bool {
    let remaining: BTreeSet<NodeId> = all_nodes.difference(opposers).cloned().collect();
    effective(policies, default_policy).iter().any(|p| !p.is_satisfied_by(&remaining))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TxStatus {
    Endorsed,
    /// `always` is set when `OPPOSE_ALWAYS` views alone suffice for the veto.
    Vetoed { always: bool },
    Pending,
}

/// Bindings, the default policy and the node universe, evaluated together.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PolicySet {
    pub bindings: Vec<PolicyBinding>,
    pub default_policy: PolicyExpr,
    pub all_nodes: BTreeSet<NodeId>,
}

impl PolicySet {
    pub fn new(bindings: Vec<PolicyBinding>, default_policy: PolicyExpr, cluster: &ClusterConfig) -> Self {
        Self { bindings, default_policy, all_nodes: cluster.node_ids.iter().cloned().collect() }
    }

    fn applicable(&self, tx: &Transaction, result: &ExecResult) -> Vec<&PolicyBinding> {
        self.bindings.iter().filter(|b| b.matches(tx, Some(result))).collect()
    }

    fn policies(&self, tx: &Transaction, result: &ExecResult) -> Vec<PolicyExpr> {
        applicable_policies(tx, result, &self.bindings)
    }

    /// Nodes whose views can matter for `tx`.
    pub fn designated_endorsers(&self, tx: &Transaction, result: &ExecResult) -> BTreeSet<NodeId> {
        let bs = self.applicable(tx, result);
        if bs.is_empty() {
            self.default_policy.leaves()
        } else {
            bs.iter().flat_map(|b| b.policy.leaves()).collect()
        }
    }

    pub fn classify(&self, tx: &Transaction, result: &ExecResult, record: &EndorsementRecord) -> TxStatus {
        let policies = self.policies(tx, result);
        if is_properly_endorsed(&policies, &self.default_policy, &record.endorsers(&tx.txid)) {
            return TxStatus::Endorsed;
        }
        let opposers = record.opposers(&tx.txid, false);
        if opposers.is_empty() || !is_vetoed(&policies, &self.default_policy, &opposers, &self.all_nodes) {
            return TxStatus::Pending;
        }
        let always = is_vetoed(&policies, &self.default_policy, &record.opposers(&tx.txid, true), &self.all_nodes);
        TxStatus::Vetoed { always }
    }

    /// Suggestion kind for a transaction that is not properly endorsed.
    /// `REMOVE_ALWAYS` when vetoed by `OPPOSE_ALWAYS` views, or when every
    /// unsatisfied policy comes from a binding whose trigger depends on the
    /// transaction alone.
    pub fn exclusion_kind(&self, tx: &Transaction, result: &ExecResult, record: &EndorsementRecord) -> ExclusionKind {
        match self.classify(tx, result, record) {
            TxStatus::Vetoed { always: true } => return ExclusionKind::RemoveAlways,
            TxStatus::Vetoed { always: false } => return ExclusionKind::RemoveIfFirst,
            _ => {}
        }
        let bs = self.applicable(tx, result);
        if bs.is_empty() {
            return ExclusionKind::RemoveIfFirst;
        }
        let endorsers = record.endorsers(&tx.txid);
        let unsatisfied: Vec<_> = bs.iter().filter(|b| !b.policy.is_satisfied_by(&endorsers)).collect();
        if !unsatisfied.is_empty() && unsatisfied.iter().all(|b| b.trigger.is_context_free()) {
            ExclusionKind::RemoveAlways
        } else {
            ExclusionKind::RemoveIfFirst
        }
    }
}

/// Status of every transaction of `value`, in order. `ENDORSED` takes
/// precedence when malicious views make a transaction both endorsed and vetoed.
pub fn mutual_exclusion_check(record: &EndorsementRecord, value: &Value, policies: &PolicySet) -> Vec<TxStatus> {
    value.txs.iter().zip(&value.exec_results).map(|(tx, r)| policies.classify(tx, r, record)).collect()
}
