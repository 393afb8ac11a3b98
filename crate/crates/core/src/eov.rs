//! Execute-order-validate baseline: snapshot pre-execution at the primary and
//! read/write-set validation after ordering.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::execution::{execute_isolated, ExecResult, WorldState};
use crate::types::{AccountId, Height, NodeId, Transaction, TxId};

/// An ordered block whose read/write sets all come from one snapshot.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EovBlock {
    pub height: Height,
    pub proposer: NodeId,
    pub txs: Vec<Transaction>,
    pub rw: Vec<ExecResult>,
}

impl EovBlock {
    /// Pre-executes `txs` against `snapshot` as the primary does.
    pub fn pre_execute(height: Height, proposer: NodeId, snapshot: &WorldState, txs: Vec<Transaction>) -> Self {
        let rw = execute_isolated(snapshot, &txs);
        Self { height, proposer, txs, rw }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AbortRecord {
    pub height: Height,
    pub aborted_txids: Vec<TxId>,
    pub committed_txids: Vec<TxId>,
    /// Aborted transactions handed back to the next primary.
    pub retry_queue_depth: usize,
}

impl AbortRecord {
    pub fn abort_rate(&self) -> f64 {
        let total = self.aborted_txids.len() + self.committed_txids.len();
        if total == 0 {
            0.0
        } else {
            self.aborted_txids.len() as f64 / total as f64
        }
    }
}

/// A transaction aborts iff it read a key written by a preceding transaction
/// of the block that was not itself aborted.
pub fn eov_validate(block: &EovBlock) -> AbortRecord {
    let mut written: BTreeSet<&AccountId> = BTreeSet::new();
    let mut aborted = Vec::new();
    let mut committed = Vec::new();
    for r in &block.rw {
        if r.read_set.iter().any(|k| written.contains(k)) {
            aborted.push(r.txid.clone());
        } else {
            written.extend(r.write_set.keys());
            committed.push(r.txid.clone());
        }
    }
    AbortRecord { height: block.height, retry_queue_depth: aborted.len(), aborted_txids: aborted, committed_txids: committed }
}
