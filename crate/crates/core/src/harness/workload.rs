//! Synthetic transaction streams split into per-node mempools.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Zipf};
use serde::{Deserialize, Serialize};

use super::scenario::Genesis;
use crate::execution::WorldState;
use crate::types::{AccountId, ClusterConfig, Transaction};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum WorkloadSpec {
    /// Transaction `i` moves funds from `a{2i}` to `a{2i+1}`.
    ConflictFree { tx_count: usize, batch: usize },
    /// Every transaction moves funds from `a0` to `a1`.
    AllConflict { tx_count: usize, batch: usize },
    /// Sender and receiver drawn from a Zipf distribution over `accounts`.
    Zipf { tx_count: usize, batch: usize, accounts: usize, skew: f64 },
    Scripted { batch: usize, txs: Vec<Transaction> },
}

impl WorkloadSpec {
    pub fn batch(&self) -> usize {
        match self {
            WorkloadSpec::ConflictFree { batch, .. }
            | WorkloadSpec::AllConflict { batch, .. }
            | WorkloadSpec::Zipf { batch, .. }
            | WorkloadSpec::Scripted { batch, .. } => *batch,
        }
    }

    pub fn validate(&self) -> Result<(), (String, String)> {
        if self.batch() == 0 {
            return Err(("batch".into(), "must be at least 1".into()));
        }
        match self {
            WorkloadSpec::Zipf { accounts, skew, .. } => {
                if *accounts < 2 {
                    return Err(("zipf.accounts".into(), "needs at least 2 accounts".into()));
                }
                if !(skew.is_finite() && *skew >= 0.0) {
                    return Err(("zipf.skew".into(), "must be a non-negative number".into()));
                }
            }
            WorkloadSpec::Scripted { txs, .. } => {
                let mut seen = BTreeSet::new();
                for (i, t) in txs.iter().enumerate() {
                    if !seen.insert(&t.txid) {
                        return Err((format!("scripted.txs[{i}]"), format!("duplicate txid {}", t.txid)));
                    }
                }
            }
            _ => {}
        }
        Ok(())
    }
}

/// The global stream and its round-robin split: batch `k` goes to node `k mod n`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Workload {
    pub stream: Vec<Transaction>,
    pub mempools: Vec<Vec<Transaction>>,
}

impl Workload {
    pub fn accounts(&self) -> BTreeSet<AccountId> {
        self.stream.iter().flat_map(|t| t.accounts().into_iter().cloned()).collect()
    }

    pub fn genesis(&self, g: &Genesis) -> WorldState {
        let mut balances: BTreeMap<AccountId, i64> = self.accounts().into_iter().map(|a| (a, g.initial_balance)).collect();
        balances.extend(g.balances.iter().map(|(a, b)| (a.clone(), *b)));
        WorldState::genesis(balances)
    }
}

fn acct(i: usize) -> String {
    format!("a{i}")
}

pub fn generate_workload(spec: &WorkloadSpec, cluster: &ClusterConfig, seed: u64) -> Workload {
    let stream: Vec<Transaction> = match spec {
        WorkloadSpec::ConflictFree { tx_count, .. } => {
            (0..*tx_count).map(|i| Transaction::transfer(&format!("tx{i}"), &acct(2 * i), &acct(2 * i + 1), 1)).collect()
        }
        WorkloadSpec::AllConflict { tx_count, .. } => {
            (0..*tx_count).map(|i| Transaction::transfer(&format!("tx{i}"), "a0", "a1", 1)).collect()
        }
        WorkloadSpec::Zipf { tx_count, accounts, skew, .. } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5a17_f00d);
            let zipf = Zipf::new(*accounts as f64, *skew).expect("validated zipf parameters");
            let draw = |rng: &mut ChaCha8Rng| zipf.sample(rng) as usize - 1;
            (0..*tx_count)
                .map(|i| {
                    let from = draw(&mut rng);
                    let mut to = draw(&mut rng);
                    if to == from {
                        to = (from + 1 + rng.random_range(0..*accounts - 1)) % *accounts;
                    }
                    Transaction::transfer(&format!("tx{i}"), &acct(from), &acct(to), 1)
                })
                .collect()
        }
        WorkloadSpec::Scripted { txs, .. } => txs.clone(),
    };
    let mut mempools = vec![Vec::new(); cluster.n];
    for (k, chunk) in stream.chunks(spec.batch()).enumerate() {
        mempools[k % cluster.n].extend_from_slice(chunk);
    }
    Workload { stream, mempools }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cluster() -> ClusterConfig {
        ClusterConfig::with_default_ids(4, 1).unwrap()
    }

    #[test]
    fn conflict_free_uses_distinct_accounts() {
        let w = generate_workload(&WorkloadSpec::ConflictFree { tx_count: 8, batch: 2 }, &cluster(), 1);
        assert_eq!(w.stream.len(), 8);
        assert_eq!(w.accounts().len(), 16);
    }

    #[test]
    fn all_conflict_uses_one_pair() {
        let w = generate_workload(&WorkloadSpec::AllConflict { tx_count: 8, batch: 2 }, &cluster(), 1);
        assert_eq!(w.accounts(), BTreeSet::from([AccountId::from("a0"), AccountId::from("a1")]));
    }

    #[test]
    fn round_robin_batches() {
        let w = generate_workload(&WorkloadSpec::ConflictFree { tx_count: 10, batch: 2 }, &cluster(), 1);
        let ids = |i: usize| w.mempools[i].iter().map(|t| t.txid.as_str().to_owned()).collect::<Vec<_>>();
        assert_eq!(ids(0), ["tx0", "tx1", "tx8", "tx9"]);
        assert_eq!(ids(1), ["tx2", "tx3"]);
        assert_eq!(ids(3), ["tx6", "tx7"]);
    }

    #[test]
    fn zipf_is_deterministic_and_skewed() {
        let spec = WorkloadSpec::Zipf { tx_count: 10_000, batch: 64, accounts: 10_000, skew: 1.2 };
        let a = generate_workload(&spec, &cluster(), 7);
        assert_eq!(a, generate_workload(&spec, &cluster(), 7));
        let mut hits: BTreeMap<&AccountId, usize> = BTreeMap::new();
        for t in &a.stream {
            *hits.entry(&t.from).or_default() += 1;
            *hits.entry(&t.to).or_default() += 1;
        }
        let top = *hits.values().max().unwrap() as f64 / (2.0 * a.stream.len() as f64);
        assert!(top > 1.0 / 10_000.0 * 100.0, "top account share {top}");
    }
}
