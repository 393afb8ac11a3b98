//! FlexTender: Tendermint-style BFT consensus with per-transaction
//! endorsement policies, order-execute-endorse processing and removal of
//! unendorsed transactions, plus a deterministic network simulator, an
//! adversary library and an execute-order-validate baseline.
//!
//! ```
//! use flextender::harness::{golden, run};
//!
//! let scenario = golden("happy_path").unwrap();
//! let out = run(&scenario, 7);
//! assert!(out.completed());
//! assert!(out.metrics.commit_rounds.iter().all(|r| *r == 0));
//! ```

pub mod adversary;
pub mod consensus;
pub mod eov;
pub mod execution;
pub mod harness;
pub mod netsim;
pub mod policy;
pub mod types;

pub use types::{ClusterConfig, Digest, Height, NodeId, Round, Transaction, TxId, Value};

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/introduction.md")]
mod book_introduction {}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/endorsement.md")]
mod book_endorsement {}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/consensus.md")]
mod book_consensus {}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/network.md")]
mod book_network {}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/adversaries.md")]
mod book_adversaries {}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/scenarios.md")]
mod book_scenarios {}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/eov.md")]
mod book_eov {}
