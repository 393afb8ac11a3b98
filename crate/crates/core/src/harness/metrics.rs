//! Run summaries computed from a trace.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::trace::{TraceBody, TraceRecord};
use crate::consensus::{NodeStats, RemovalCause};
use crate::types::{Height, NodeId, Round, TxId};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RemovalCounts {
    pub veto: u64,
    pub timeout: u64,
}

impl RemovalCounts {
    pub fn total(&self) -> u64 {
        self.veto + self.timeout
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub heights: u64,
    pub committed_txs: u64,
    pub end_time: u64,
    /// Committed transactions per 10^6 ticks.
    pub throughput: f64,
    pub commit_rounds: Vec<Round>,
    pub rounds_per_height: BTreeMap<Round, u64>,
    pub removals: RemovalCounts,
    /// Aborted over ordered transactions; zero outside EOV mode.
    pub abort_rate: f64,
    pub block_abort_rates: Vec<f64>,
    /// Largest number of blocks a transaction spent between first being
    /// ordered and committing.
    pub max_blocks_to_commit: u64,
    pub executed_txs: u64,
    pub recomputed_txs: u64,
    pub full_recompute_txs: u64,
}

/// `correct` selects whose decisions count; the first correct decider of a
/// height speaks for it.
pub fn compute(trace: &[TraceRecord], stats: &[NodeStats], correct: &BTreeSet<NodeId>, end_time: u64) -> Metrics {
    let mut m = Metrics { end_time, ..Default::default() };
    let counts = |r: &TraceRecord| r.node.as_ref().is_some_and(|n| correct.contains(n));
    let mut seen_decide: BTreeSet<Height> = BTreeSet::new();
    let mut seen_abort: BTreeSet<Height> = BTreeSet::new();
    let mut first_ordered: BTreeMap<TxId, Height> = BTreeMap::new();
    let mut aborted = 0u64;
    let mut ordered = 0u64;
    let mut eov = false;
    for r in trace.iter().filter(|r| counts(r)) {
        match &r.body {
            TraceBody::Decide { decision } if seen_decide.insert(decision.height) => {
                m.heights += 1;
                m.commit_rounds.push(decision.round);
                *m.rounds_per_height.entry(decision.round).or_default() += 1;
                for tx in decision.value.txids() {
                    first_ordered.entry(tx.clone()).or_insert(decision.height);
                }
                for rm in &decision.removals {
                    match rm.cause {
                        RemovalCause::Veto => m.removals.veto += 1,
                        RemovalCause::Timeout => m.removals.timeout += 1,
                    }
                }
                if !eov {
                    m.committed_txs += decision.value.len() as u64;
                }
            }
            TraceBody::Abort { record } if seen_abort.insert(record.height) => {
                if !eov {
                    eov = true;
                    m.committed_txs = 0;
                }
                m.committed_txs += record.committed_txids.len() as u64;
                aborted += record.aborted_txids.len() as u64;
                ordered += (record.aborted_txids.len() + record.committed_txids.len()) as u64;
                m.block_abort_rates.push(record.abort_rate());
                for tx in record.aborted_txids.iter().chain(&record.committed_txids) {
                    first_ordered.entry(tx.clone()).or_insert(record.height);
                }
                for tx in &record.committed_txids {
                    if let Some(first) = first_ordered.get(tx) {
                        m.max_blocks_to_commit = m.max_blocks_to_commit.max(record.height - first + 1);
                    }
                }
            }
            _ => {}
        }
    }
    if !eov {
        m.max_blocks_to_commit = u64::from(m.heights > 0);
    }
    if ordered > 0 {
        m.abort_rate = aborted as f64 / ordered as f64;
    }
    if end_time > 0 {
        m.throughput = m.committed_txs as f64 * 1e6 / end_time as f64;
    }
    for s in stats {
        m.executed_txs += s.executed_txs;
        m.recomputed_txs += s.recomputed_txs;
        m.full_recompute_txs += s.full_recompute_txs;
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::consensus::Decision;
    use crate::eov::AbortRecord;
    use crate::types::{Digest, Value};

    fn rec(node: &str, body: TraceBody) -> TraceRecord {
        TraceRecord { time: 0, node: Some(NodeId::from(node)), body }
    }

    fn decide(h: Height, round: Round, txs: &[&str]) -> TraceBody {
        let value = Value {
            txs: txs.iter().map(|t| crate::types::Transaction::transfer(t, "a", "b", 1)).collect(),
            exec_results: Vec::new(),
            origin_height: h,
        };
        TraceBody::Decide { decision: Decision { height: h, round, digest: Digest([0; 32]), value, removals: Vec::new() } }
    }

    #[test]
    fn counts_each_height_once() {
        let correct: BTreeSet<NodeId> = ["n0", "n1"].into_iter().map(NodeId::from).collect();
        let trace = vec![
            rec("n0", decide(0, 0, &["t1", "t2"])),
            rec("n1", decide(0, 0, &["t1", "t2"])),
            rec("n9", decide(1, 0, &["t3"])),
            rec("n1", decide(1, 2, &["t3"])),
        ];
        let m = compute(&trace, &[], &correct, 2_000_000);
        assert_eq!(m.heights, 2);
        assert_eq!(m.committed_txs, 3);
        assert_eq!(m.commit_rounds, [0, 2]);
        assert_eq!(m.throughput, 1.5);
    }

    #[test]
    fn eov_blocks_to_commit() {
        let correct: BTreeSet<NodeId> = [NodeId::from("n0")].into();
        let abort = |h, a: &[&str], c: &[&str]| TraceBody::Abort {
            record: AbortRecord {
                height: h,
                aborted_txids: a.iter().map(|t| TxId::from(*t)).collect(),
                committed_txids: c.iter().map(|t| TxId::from(*t)).collect(),
                retry_queue_depth: a.len(),
            },
        };
        let trace = vec![
            rec("n0", decide(0, 0, &["t1", "t2"])),
            rec("n0", abort(0, &["t2"], &["t1"])),
            rec("n0", decide(1, 0, &["t2"])),
            rec("n0", abort(1, &[], &["t2"])),
        ];
        let m = compute(&trace, &[], &correct, 10);
        assert_eq!(m.committed_txs, 2);
        assert_eq!(m.max_blocks_to_commit, 2);
        assert_eq!(m.abort_rate, 1.0 / 3.0);
        assert_eq!(m.block_abort_rates, [0.5, 0.0]);
    }
}
