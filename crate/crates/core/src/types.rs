//! Identifiers, values, digests and quorum arithmetic shared by every module.

use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};

use crate::execution::{ExecResult, ExecStatus};

macro_rules! string_id {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub String);

        impl $name {
            pub fn new(s: impl Into<String>) -> Self {
                Self(s.into())
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl From<&str> for $name {
            fn from(s: &str) -> Self {
                Self(s.to_owned())
            }
        }
    };
}

string_id!(
    /// Identity of a consensus node (also an endorser identity).
    NodeId
);
string_id!(
    /// Unique transaction identifier.
    TxId
);
string_id!(
    /// Account (or contract) identifier.
    AccountId
);

pub type Height = u64;
pub type Round = u32;

/// A `(height, round)` pair, ordered lexicographically.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RoundId {
    pub height: Height,
    pub round: Round,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ConfigError {
    #[error("cluster needs n >= 3f + 1 (n={n}, f={f})")]
    TooManyFaults { n: usize, f: usize },
    #[error("node_ids has {got} entries, expected n={n}")]
    NodeCount { n: usize, got: usize },
    #[error("duplicate node id {0}")]
    DuplicateNode(NodeId),
}

/// Cluster membership and fault bound.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterConfig {
    pub n: usize,
    pub f: usize,
    pub node_ids: Vec<NodeId>,
}

impl ClusterConfig {
    pub fn new(n: usize, f: usize, node_ids: Vec<NodeId>) -> Result<Self, ConfigError> {
        let cfg = Self { n, f, node_ids };
        cfg.validate()?;
        Ok(cfg)
    }

    /// `n` nodes named `n0..n{n-1}` tolerating `f` faults.
    pub fn with_default_ids(n: usize, f: usize) -> Result<Self, ConfigError> {
        Self::new(n, f, (0..n).map(|i| NodeId(format!("n{i}"))).collect())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.n < 3 * self.f + 1 {
            return Err(ConfigError::TooManyFaults { n: self.n, f: self.f });
        }
        if self.node_ids.len() != self.n {
            return Err(ConfigError::NodeCount { n: self.n, got: self.node_ids.len() });
        }
        let mut seen = std::collections::BTreeSet::new();
        for id in &self.node_ids {
            if !seen.insert(id) {
                return Err(ConfigError::DuplicateNode(id.clone()));
            }
        }
        Ok(())
    }

    /// Round-robin rotation: `node_ids[(height + round) mod n]`.
    pub fn proposer(&self, height: Height, round: Round) -> &NodeId {
        let idx = (height + u64::from(round)) % self.n as u64;
        &self.node_ids[idx as usize]
    }

    pub fn index_of(&self, id: &NodeId) -> Option<usize> {
        self.node_ids.iter().position(|x| x == id)
    }

    pub fn contains(&self, id: &NodeId) -> bool {
        self.index_of(id).is_some()
    }
}

/// `⌊(n+f)/2⌋ + 1`, which is `2f+1` when `n = 3f+1`.
pub fn quorum_size(cfg: &ClusterConfig) -> usize {
    (cfg.n + cfg.f) / 2 + 1
}

/// Number of suggestions that make a transaction removable.
pub fn removal_threshold(cfg: &ClusterConfig) -> usize {
    cfg.f + 1
}

/// An account-to-account transfer.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Transaction {
    pub txid: TxId,
    pub from: AccountId,
    pub to: AccountId,
    pub amount: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group_tag: Option<String>,
}

impl Transaction {
    pub fn transfer(txid: &str, from: &str, to: &str, amount: u64) -> Self {
        Self {
            txid: TxId::from(txid),
            from: AccountId::from(from),
            to: AccountId::from(to),
            amount,
            group_tag: None,
        }
    }

    /// Accounts read and written, `{from, to}`.
    pub fn accounts(&self) -> [&AccountId; 2] {
        [&self.from, &self.to]
    }
}

/// A proposed batch together with its execution results.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Value {
    pub txs: Vec<Transaction>,
    #[serde(default)]
    pub exec_results: Vec<ExecResult>,
    pub origin_height: Height,
}

impl Value {
    pub fn len(&self) -> usize {
        self.txs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.txs.is_empty()
    }

    pub fn digest(&self) -> Digest {
        value_digest(self)
    }

    pub fn txids(&self) -> impl Iterator<Item = &TxId> {
        self.txs.iter().map(|t| &t.txid)
    }

    /// Structural well-formedness for a proposal at `height`: unique txids,
    /// results aligned with transactions.
    pub fn is_well_formed(&self, height: Height) -> bool {
        if self.origin_height != height || self.exec_results.len() != self.txs.len() {
            return false;
        }
        let mut ids = std::collections::BTreeSet::new();
        self.txs
            .iter()
            .zip(&self.exec_results)
            .all(|(tx, r)| tx.txid == r.txid && ids.insert(&tx.txid))
    }
}

/// SHA-256 content hash of a [`Value`].
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Digest(pub [u8; 32]);

impl Digest {
    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn short(&self) -> String {
        hex::encode(&self.0[..4])
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({})", self.short())
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl Serialize for Digest {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for Digest {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        let mut out = [0u8; 32];
        hex::decode_to_slice(&s, &mut out).map_err(serde::de::Error::custom)?;
        Ok(Digest(out))
    }
}

fn put_bytes(buf: &mut Vec<u8>, b: &[u8]) {
    buf.extend_from_slice(&(b.len() as u64).to_le_bytes());
    buf.extend_from_slice(b);
}

/// Canonical length-prefixed encoding: transactions, then execution results.
pub fn canonical_bytes(v: &Value) -> Vec<u8> {
    let mut buf = Vec::with_capacity(64 + v.txs.len() * 96);
    buf.extend_from_slice(&(v.txs.len() as u64).to_le_bytes());
    for tx in &v.txs {
        put_bytes(&mut buf, tx.txid.0.as_bytes());
        put_bytes(&mut buf, tx.from.0.as_bytes());
        put_bytes(&mut buf, tx.to.0.as_bytes());
        buf.extend_from_slice(&tx.amount.to_le_bytes());
        match &tx.group_tag {
            None => buf.push(0),
            Some(tag) => {
                buf.push(1);
                put_bytes(&mut buf, tag.as_bytes());
            }
        }
    }
    buf.extend_from_slice(&(v.exec_results.len() as u64).to_le_bytes());
    for r in &v.exec_results {
        put_bytes(&mut buf, r.txid.0.as_bytes());
        buf.extend_from_slice(&(r.read_set.len() as u64).to_le_bytes());
        for a in &r.read_set {
            put_bytes(&mut buf, a.0.as_bytes());
        }
        buf.extend_from_slice(&(r.write_set.len() as u64).to_le_bytes());
        for (a, bal) in &r.write_set {
            put_bytes(&mut buf, a.0.as_bytes());
            buf.extend_from_slice(&bal.to_le_bytes());
        }
        buf.push(match r.status {
            ExecStatus::Ok => 0,
            ExecStatus::Insufficient => 1,
        });
    }
    buf
}

pub fn value_digest(v: &Value) -> Digest {
    Digest(Sha256::digest(canonical_bytes(v)).into())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg(n: usize, f: usize) -> ClusterConfig {
        ClusterConfig::with_default_ids(n, f).unwrap()
    }

    #[test]
    fn quorum_examples() {
        assert_eq!(quorum_size(&cfg(4, 1)), 3);
        assert_eq!(quorum_size(&cfg(7, 2)), 5);
        assert_eq!(quorum_size(&cfg(10, 3)), 7);
    }

    #[test]
    fn removal_threshold_examples() {
        assert_eq!(removal_threshold(&cfg(4, 1)), 2);
        assert_eq!(removal_threshold(&cfg(7, 2)), 3);
        assert_eq!(removal_threshold(&cfg(1, 0)), 1);
    }

    #[test]
    fn quorum_intersection_arithmetic() {
        for f in 0..20 {
            for n in (3 * f + 1)..(3 * f + 5) {
                let c = cfg(n, f);
                assert!(2 * quorum_size(&c) >= n + f + 1, "n={n} f={f}");
                assert!(quorum_size(&c) <= n - f, "quorum must be live with f silent, n={n} f={f}");
            }
        }
    }

    #[test]
    fn rejects_bad_clusters() {
        assert!(matches!(
            ClusterConfig::with_default_ids(3, 1),
            Err(ConfigError::TooManyFaults { .. })
        ));
        let dup = vec![NodeId::from("a"), NodeId::from("a"), NodeId::from("b"), NodeId::from("c")];
        assert!(matches!(ClusterConfig::new(4, 1, dup), Err(ConfigError::DuplicateNode(_))));
    }

    #[test]
    fn rotation_is_cyclic() {
        let c = cfg(4, 1);
        assert_eq!(c.proposer(0, 0).as_str(), "n0");
        assert_eq!(c.proposer(1, 0).as_str(), "n1");
        assert_eq!(c.proposer(1, 3).as_str(), "n0");
        let seen: std::collections::BTreeSet<_> = (0..4).map(|r| c.proposer(5, r)).collect();
        assert_eq!(seen.len(), 4);
    }

    #[test]
    fn empty_value_digest_is_pinned() {
        // sha256 of two zero u64 length prefixes
        let expected = {
            let mut h = Sha256::new();
            h.update([0u8; 16]);
            hex::encode(h.finalize())
        };
        let d = value_digest(&Value::default());
        assert_eq!(d.to_hex(), expected);
        assert_eq!(d.to_hex(), "374708fff7719dd5979ec875d56cd2286f6d3cf7ec317a3b25632aab28ec37bb");
    }

    #[test]
    fn digest_changes_with_one_result() {
        let state = crate::execution::WorldState::default();
        let txs = vec![Transaction::transfer("t1", "a", "b", 3)];
        let (results, _) = crate::execution::execute_block(&state, &txs);
        let v = Value { txs, exec_results: results, origin_height: 0 };
        let mut w = v.clone();
        w.exec_results[0].status = ExecStatus::Ok;
        assert_ne!(v.exec_results[0].status, w.exec_results[0].status);
        assert_ne!(value_digest(&v), value_digest(&w));
    }

    #[test]
    fn digest_serde_is_hex() {
        let d = value_digest(&Value::default());
        let s = serde_json::to_string(&d).unwrap();
        assert_eq!(s, format!("\"{}\"", d.to_hex()));
        let back: Digest = serde_json::from_str(&s).unwrap();
        assert_eq!(back, d);
    }

    fn arb_value() -> impl Strategy<Value = Value> {
        prop::collection::vec((0u8..6, 0u8..6, 0u64..50), 0..12).prop_map(|raw| {
            let txs: Vec<_> = raw
                .iter()
                .enumerate()
                .map(|(i, (a, b, amt))| Transaction::transfer(&format!("t{i}"), &format!("a{a}"), &format!("a{b}"), *amt))
                .collect();
            let (exec_results, _) = crate::execution::execute_block(&Default::default(), &txs);
            Value { txs, exec_results, origin_height: 0 }
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn digest_is_pure(v in arb_value()) {
            let copy = v.clone();
            prop_assert_eq!(value_digest(&v), value_digest(&copy));
            prop_assert_eq!(canonical_bytes(&v), canonical_bytes(&copy));
        }
    }
}
