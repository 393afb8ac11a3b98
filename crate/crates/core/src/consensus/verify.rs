//! Reference checks, endorsement checks, exclusion computation and extraction
//! over a node's message log.

use std::collections::{BTreeMap, BTreeSet};

use super::log::MessageLog;
use super::message::ExclusionKind;
use crate::policy::{aggregate_prevotes, EndorsementRecord, PolicySet, TxStatus};
use crate::types::{quorum_size, removal_threshold, ClusterConfig, Digest, Round, TxId, Value};

/// Read-only view used by the verification functions.
#[derive(Clone, Copy)]
pub struct LogView<'a> {
    pub log: &'a MessageLog,
    pub cluster: &'a ClusterConfig,
    pub policies: &'a PolicySet,
    /// Values known by digest (from full proposals or reconstruction).
    pub known: &'a BTreeMap<Digest, Value>,
}

impl<'a> LogView<'a> {
    pub fn record(&self, r: Round, digest: &Digest) -> EndorsementRecord {
        aggregate_prevotes(&self.log.endorsement_prevotes(r, digest))
    }

    pub fn statuses(&self, r: Round, v: &Value) -> Vec<TxStatus> {
        crate::policy::mutual_exclusion_check(&self.record(r, &v.digest()), v, self.policies)
    }

    /// Values proposed with `vr = -1` at round `r` that gathered a quorum of
    /// non-nil precommits.
    pub fn examined(&self, r: Round) -> Vec<&'a Value> {
        let q = quorum_size(self.cluster);
        self.log
            .proposals(r)
            .iter()
            .filter(|p| p.vr.is_none() && self.log.precommitters(r, Some(&p.digest), false).len() >= q)
            .filter_map(|p| self.known.get(&p.digest))
            .collect()
    }
}

/// Some subset of round-`r` prevotes makes every transaction of `v` properly
/// endorsed. An empty value is trivially endorsed.
pub fn verify_endorsement(view: &LogView<'_>, r: Option<Round>, v: &Value) -> bool {
    if v.is_empty() {
        return true;
    }
    let Some(r) = r else { return false };
    view.statuses(r, v).iter().all(|s| *s == TxStatus::Endorsed)
}

/// Suggestions for every transaction not properly endorsed at round `r`.
pub fn get_excluded_tx(view: &LogView<'_>, r: Round, v: &Value) -> BTreeMap<TxId, ExclusionKind> {
    let rec = view.record(r, &v.digest());
    v.txs
        .iter()
        .zip(&v.exec_results)
        .filter(|(tx, res)| view.policies.classify(tx, res, &rec) != TxStatus::Endorsed)
        .map(|(tx, res)| (tx.txid.clone(), view.policies.exclusion_kind(tx, res, &rec)))
        .collect()
}

/// Transactions a new proposer drops from the examined value `v` of round
/// `r`: the first one backed by `f+1` suggestions of any kind, plus every one
/// backed by `f+1` `REMOVE_ALWAYS` suggestions.
pub fn extract(log: &MessageLog, cluster: &ClusterConfig, r: Round, v: &Value) -> BTreeSet<TxId> {
    let thr = removal_threshold(cluster);
    let counts = log.suggestion_counts(r, &v.digest());
    let count = |t: &TxId| counts.get(t).copied().unwrap_or_default();
    let mut removed: BTreeSet<TxId> = v.txids().filter(|t| count(t).always >= thr).cloned().collect();
    if let Some(first) = v.txids().find(|t| count(t).any >= thr) {
        removed.insert(first.clone());
    }
    removed
}

/// Every transaction of `short` appears in `long`, in order.
pub fn is_subsequence(short: &Value, long: &Value) -> bool {
    let mut it = long.txs.iter();
    short.txs.iter().all(|t| it.any(|u| u == t))
}

/// Whether `tx` shows as endorsed for `digest` in any round up to `r`.
fn endorsed_up_to(view: &LogView<'_>, r: Round, digest: &Digest, v: &Value, idx: usize) -> bool {
    (0..=r).rev().any(|round| {
        let rec = view.record(round, digest);
        view.policies.classify(&v.txs[idx], &v.exec_results[idx], &rec) == TxStatus::Endorsed
    })
}

/// `v` is a subsequence of an examined value at round `r` and every dropped
/// transaction is removable. At most one dropped transaction may rely on
/// `REMOVE_IF_FIRST`, and every transaction before it must show endorsements.
pub fn verify_reference(view: &LogView<'_>, r: Round, v: &Value) -> bool {
    view.examined(r).into_iter().any(|ex| reference_matches(view, r, ex, v))
}

fn reference_matches(view: &LogView<'_>, r: Round, ex: &Value, v: &Value) -> bool {
    if !is_subsequence(v, ex) {
        return false;
    }
    let thr = removal_threshold(view.cluster);
    let ex_digest = ex.digest();
    let counts = view.log.suggestion_counts(r, &ex_digest);
    let count = |t: &TxId| counts.get(t).copied().unwrap_or_default();
    let kept: BTreeSet<&TxId> = v.txids().collect();
    let dropped: Vec<usize> = (0..ex.txs.len()).filter(|i| !kept.contains(&ex.txs[*i].txid)).collect();
    if dropped.iter().any(|i| count(&ex.txs[*i].txid).any < thr) {
        return false;
    }
    let if_first: Vec<usize> = dropped.iter().copied().filter(|i| count(&ex.txs[*i].txid).always < thr).collect();
    match if_first.as_slice() {
        [] => true,
        [pos] => (0..*pos).all(|i| {
            let dropped_always = dropped.contains(&i);
            dropped_always || endorsed_up_to(view, r, &ex_digest, ex, i)
        }),
        _ => false,
    }
}
