//! Deterministic transfer execution, dependency DAGs and re-execution after removal.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::types::{AccountId, Height, Transaction, TxId};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ExecError {
    #[error("removed txid {0} is not in the block")]
    RemovedNotPresent(TxId),
    #[error("block for height {got} applied to state at version {expected}")]
    VersionMismatch { expected: Height, got: Height },
    #[error("previous results do not cover the block")]
    PrevResultsMismatch,
}

/// Committed balances. `version` counts applied blocks, so it equals the
/// height of the next block to apply.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorldState {
    pub balances: BTreeMap<AccountId, i64>,
    pub version: Height,
}

impl WorldState {
    pub fn genesis(balances: BTreeMap<AccountId, i64>) -> Self {
        Self { balances, version: 0 }
    }

    pub fn balance(&self, a: &AccountId) -> i64 {
        self.balances.get(a).copied().unwrap_or(0)
    }

    pub fn total(&self) -> i64 {
        self.balances.values().sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ExecStatus {
    Ok,
    /// Sender went negative; the transfer still applies.
    Insufficient,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecResult {
    pub txid: TxId,
    pub read_set: BTreeSet<AccountId>,
    pub write_set: BTreeMap<AccountId, i64>,
    pub status: ExecStatus,
}

/// Edges from each transaction to the nearest preceding transaction touching
/// each of its accounts.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DepDag {
    pub edges: BTreeMap<TxId, BTreeSet<TxId>>,
}

impl DepDag {
    pub fn build(txs: &[Transaction]) -> Self {
        let mut last: BTreeMap<&AccountId, &TxId> = BTreeMap::new();
        let mut edges = BTreeMap::new();
        for tx in txs {
            let mut deps = BTreeSet::new();
            for a in tx.accounts() {
                if let Some(prev) = last.get(a) {
                    deps.insert((*prev).clone());
                }
            }
            for a in tx.accounts() {
                last.insert(a, &tx.txid);
            }
            edges.insert(tx.txid.clone(), deps);
        }
        Self { edges }
    }

    pub fn edge_count(&self) -> usize {
        self.edges.values().map(BTreeSet::len).sum()
    }

    /// Every transaction that transitively depends on one of `roots`, roots excluded.
    pub fn dependents_of(&self, roots: &BTreeSet<TxId>) -> BTreeSet<TxId> {
        let mut children: BTreeMap<&TxId, Vec<&TxId>> = BTreeMap::new();
        for (tx, deps) in &self.edges {
            for d in deps {
                children.entry(d).or_default().push(tx);
            }
        }
        let mut out = BTreeSet::new();
        let mut stack: Vec<&TxId> = roots.iter().collect();
        while let Some(t) = stack.pop() {
            for c in children.get(t).into_iter().flatten() {
                if !roots.contains(*c) && out.insert((*c).clone()) {
                    stack.push(c);
                }
            }
        }
        out
    }
}

fn execute_one(tx: &Transaction, read: impl Fn(&AccountId) -> i64) -> ExecResult {
    let mut write_set = BTreeMap::new();
    let from_bal = read(&tx.from);
    let amount = tx.amount as i64;
    let status = if from_bal < amount { ExecStatus::Insufficient } else { ExecStatus::Ok };
    if tx.from == tx.to {
        write_set.insert(tx.from.clone(), from_bal);
    } else {
        write_set.insert(tx.from.clone(), from_bal - amount);
        write_set.insert(tx.to.clone(), read(&tx.to) + amount);
    }
    ExecResult {
        txid: tx.txid.clone(),
        read_set: tx.accounts().into_iter().cloned().collect(),
        write_set,
        status,
    }
}

/// Serial in-order execution against a scratch overlay of `state`.
pub fn execute_block(state: &WorldState, txs: &[Transaction]) -> (Vec<ExecResult>, DepDag) {
    let mut overlay: BTreeMap<AccountId, i64> = BTreeMap::new();
    let mut results = Vec::with_capacity(txs.len());
    for tx in txs {
        let r = execute_one(tx, |a| overlay.get(a).copied().unwrap_or_else(|| state.balance(a)));
        overlay.extend(r.write_set.iter().map(|(k, v)| (k.clone(), *v)));
        results.push(r);
    }
    (results, DepDag::build(txs))
}

/// Each transaction executed alone against the same snapshot (no intra-batch
/// visibility), as an EOV primary does.
pub fn execute_isolated(state: &WorldState, txs: &[Transaction]) -> Vec<ExecResult> {
    txs.iter().map(|tx| execute_one(tx, |a| state.balance(a))).collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Reexecution {
    pub results: Vec<ExecResult>,
    pub dag: DepDag,
    /// Transactions actually executed (copied results are not counted).
    pub recomputed: usize,
    /// The optimized path detected changed key sets and redid everything.
    pub fell_back: bool,
}

/// Results for `txs \ removed`. With `optimized`, only transitive dependents of
/// the removed transactions are executed and the rest are copied.
pub fn reexecute_after_removal(
    state: &WorldState,
    txs: &[Transaction],
    removed: &BTreeSet<TxId>,
    prev_results: &[ExecResult],
    prev_dag: &DepDag,
    optimized: bool,
) -> Result<Reexecution, ExecError> {
    if let Some(missing) = removed.iter().find(|id| !txs.iter().any(|t| &t.txid == *id)) {
        return Err(ExecError::RemovedNotPresent(missing.clone()));
    }
    if prev_results.len() != txs.len() || txs.iter().zip(prev_results).any(|(t, r)| t.txid != r.txid) {
        return Err(ExecError::PrevResultsMismatch);
    }
    let kept: Vec<Transaction> = txs.iter().filter(|t| !removed.contains(&t.txid)).cloned().collect();
    let full = |fell_back| {
        let (results, dag) = execute_block(state, &kept);
        Reexecution { recomputed: results.len(), results, dag, fell_back }
    };
    if !optimized {
        return Ok(full(false));
    }

    let affected = prev_dag.dependents_of(removed);
    let mut overlay: BTreeMap<AccountId, i64> = BTreeMap::new();
    let mut results = Vec::with_capacity(kept.len());
    let mut recomputed = 0;
    for (tx, prev) in txs.iter().zip(prev_results) {
        if removed.contains(&tx.txid) {
            continue;
        }
        let r = if affected.contains(&tx.txid) {
            recomputed += 1;
            let r = execute_one(tx, |a| overlay.get(a).copied().unwrap_or_else(|| state.balance(a)));
            let same_keys = r.read_set == prev.read_set && r.write_set.keys().eq(prev.write_set.keys());
            if !same_keys {
                return Ok(full(true));
            }
            r
        } else {
            prev.clone()
        };
        overlay.extend(r.write_set.iter().map(|(k, v)| (k.clone(), *v)));
        results.push(r);
    }
    Ok(Reexecution { results, dag: DepDag::build(&kept), recomputed, fell_back: false })
}

/// Applies a committed block's write sets in order.
pub fn apply_committed(state: &WorldState, height: Height, results: &[ExecResult]) -> Result<WorldState, ExecError> {
    if height != state.version {
        return Err(ExecError::VersionMismatch { expected: state.version, got: height });
    }
    let mut next = state.clone();
    for r in results {
        for (a, bal) in &r.write_set {
            next.balances.insert(a.clone(), *bal);
        }
    }
    next.version += 1;
    Ok(next)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tx(id: &str, from: &str, to: &str, amt: u64) -> Transaction {
        Transaction::transfer(id, from, to, amt)
    }

    fn state(pairs: &[(&str, i64)]) -> WorldState {
        WorldState::genesis(pairs.iter().map(|(a, b)| (AccountId::from(*a), *b)).collect())
    }

    /// Plain serial oracle over a HashMap, independent of the overlay code.
    fn oracle(state: &WorldState, txs: &[Transaction]) -> Vec<(i64, i64, bool)> {
        let mut bal: std::collections::HashMap<String, i64> =
            state.balances.iter().map(|(k, v)| (k.0.clone(), *v)).collect();
        txs.iter()
            .map(|t| {
                let f = *bal.get(&t.from.0).unwrap_or(&0);
                let insufficient = f < t.amount as i64;
                *bal.entry(t.from.0.clone()).or_insert(0) -= t.amount as i64;
                *bal.entry(t.to.0.clone()).or_insert(0) += t.amount as i64;
                (bal[&t.from.0], bal[&t.to.0], insufficient)
            })
            .collect()
    }

    #[test]
    fn empty_block() {
        let (r, dag) = execute_block(&WorldState::default(), &[]);
        assert!(r.is_empty());
        assert_eq!(dag.edge_count(), 0);
    }

    #[test]
    fn disjoint_transfers_have_no_edges() {
        let (_, dag) = execute_block(&WorldState::default(), &[tx("t1", "a", "b", 1), tx("t2", "c", "d", 1)]);
        assert_eq!(dag.edge_count(), 0);
    }

    #[test]
    fn chained_transfers() {
        let s = state(&[("A", 10), ("B", 0), ("C", 0)]);
        let txs = [tx("tx1", "A", "B", 10), tx("tx2", "B", "C", 5)];
        let (r, dag) = execute_block(&s, &txs);
        let next = apply_committed(&s, 0, &r).unwrap();
        assert_eq!(next.balance(&"A".into()), 0);
        assert_eq!(next.balance(&"B".into()), 5);
        assert_eq!(next.balance(&"C".into()), 5);
        assert_eq!(dag.edges[&TxId::from("tx2")], BTreeSet::from([TxId::from("tx1")]));
        let o = oracle(&s, &txs);
        assert_eq!(o[1], (5, 5, false));
    }

    #[test]
    fn removal_noop_and_independent_copy() {
        let s = state(&[("A", 10), ("C", 10)]);
        let txs = [tx("tx1", "A", "B", 1), tx("tx2", "C", "D", 1)];
        let (r, dag) = execute_block(&s, &txs);
        let same = reexecute_after_removal(&s, &txs, &BTreeSet::new(), &r, &dag, true).unwrap();
        assert_eq!(same.results, r);
        assert_eq!(same.recomputed, 0);
        let out = reexecute_after_removal(&s, &txs, &BTreeSet::from([TxId::from("tx1")]), &r, &dag, true).unwrap();
        assert_eq!(out.results, vec![r[1].clone()]);
        assert_eq!(out.recomputed, 0);
    }

    #[test]
    fn removal_makes_successor_insufficient() {
        let s = state(&[("A", 10), ("B", 0)]);
        let txs = [tx("tx1", "A", "B", 10), tx("tx2", "B", "C", 5)];
        let (r, dag) = execute_block(&s, &txs);
        assert_eq!(r[1].status, ExecStatus::Ok);
        let out = reexecute_after_removal(&s, &txs, &BTreeSet::from([TxId::from("tx1")]), &r, &dag, true).unwrap();
        assert_eq!(out.results[0].status, ExecStatus::Insufficient);
        assert_eq!(out.recomputed, 1);
        assert_eq!(oracle(&s, &txs[1..])[0].2, true);
    }

    #[test]
    fn unknown_removal_is_an_error() {
        let txs = [tx("tx1", "A", "B", 1)];
        let (r, dag) = execute_block(&WorldState::default(), &txs);
        let err = reexecute_after_removal(&WorldState::default(), &txs, &BTreeSet::from([TxId::from("zz")]), &r, &dag, true);
        assert_eq!(err, Err(ExecError::RemovedNotPresent(TxId::from("zz"))));
    }

    #[test]
    fn version_mismatch() {
        let s = WorldState::default();
        assert_eq!(apply_committed(&s, 0, &[]).unwrap().version, 1);
        assert!(matches!(apply_committed(&s, 3, &[]), Err(ExecError::VersionMismatch { .. })));
    }

    #[test]
    fn replay_on_two_nodes_matches() {
        let s = state(&[("a0", 5), ("a1", 5)]);
        let blocks = [vec![tx("t1", "a0", "a1", 3)], vec![tx("t2", "a1", "a2", 7), tx("t3", "a2", "a0", 1)]];
        let replay = || {
            let mut st = s.clone();
            for (h, b) in blocks.iter().enumerate() {
                let (r, _) = execute_block(&st, b);
                st = apply_committed(&st, h as u64, &r).unwrap();
            }
            st
        };
        assert_eq!(replay(), replay());
    }

    fn arb_block() -> impl Strategy<Value = (WorldState, Vec<Transaction>)> {
        let accts = 12usize;
        (
            prop::collection::vec(0i64..40, accts),
            prop::collection::vec((0usize..accts, 0usize..accts, 0u64..30), 0..24),
        )
            .prop_map(move |(bals, raw)| {
                let s = WorldState::genesis(bals.iter().enumerate().map(|(i, b)| (AccountId(format!("a{i}")), *b)).collect());
                let txs = raw
                    .iter()
                    .enumerate()
                    .map(|(i, (f, t, amt))| tx(&format!("t{i}"), &format!("a{f}"), &format!("a{t}"), *amt))
                    .collect();
                (s, txs)
            })
    }

    proptest! {
        #[test]
        fn matches_serial_oracle((s, txs) in arb_block()) {
            let (r, _) = execute_block(&s, &txs);
            let o = oracle(&s, &txs);
            for ((res, t), (fb, tb, insuf)) in r.iter().zip(&txs).zip(o) {
                prop_assert_eq!(res.write_set[&t.from], fb);
                prop_assert_eq!(res.write_set[&t.to], tb);
                prop_assert_eq!(res.status == ExecStatus::Insufficient, insuf);
            }
        }

        #[test]
        fn conservation((s, txs) in arb_block()) {
            let (r, _) = execute_block(&s, &txs);
            let next = apply_committed(&s, 0, &r).unwrap();
            prop_assert_eq!(next.total(), s.total());
        }

        #[test]
        fn dag_edges_point_backward((s, txs) in arb_block()) {
            let (_, dag) = execute_block(&s, &txs);
            let pos: BTreeMap<_, _> = txs.iter().enumerate().map(|(i, t)| (&t.txid, i)).collect();
            for (t, deps) in &dag.edges {
                for d in deps {
                    prop_assert!(pos[d] < pos[t]);
                }
            }
        }
    }
}
