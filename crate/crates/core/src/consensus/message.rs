use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::policy::EndorsementView;
use crate::types::{Digest, Height, NodeId, Round, TxId, Value};

/// What a proposal carries: the whole value, or just its digest plus the ids
/// dropped from the referenced examined value (hash-only re-proposal).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Payload {
    Full(Value),
    DigestOnly { removed: Vec<TxId> },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Propose {
    pub height: Height,
    pub round: Round,
    pub sender: NodeId,
    pub digest: Digest,
    pub payload: Payload,
    pub vr: Option<Round>,
    pub rr: Option<Round>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prevote {
    pub height: Height,
    pub round: Round,
    pub sender: NodeId,
    pub digest: Option<Digest>,
    pub endorsements: Option<BTreeMap<TxId, EndorsementView>>,
    pub con: bool,
}

impl Prevote {
    pub fn nil(height: Height, round: Round, sender: NodeId) -> Self {
        Self { height, round, sender, digest: None, endorsements: None, con: true }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ExclusionKind {
    RemoveIfFirst,
    RemoveAlways,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Precommit {
    pub height: Height,
    pub round: Round,
    pub sender: NodeId,
    pub digest: Option<Digest>,
    #[serde(default)]
    pub exclusions: BTreeMap<TxId, ExclusionKind>,
}

impl Precommit {
    pub fn nil(height: Height, round: Round, sender: NodeId) -> Self {
        Self { height, round, sender, digest: None, exclusions: BTreeMap::new() }
    }

    pub fn is_clean(&self) -> bool {
        self.exclusions.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Message {
    Propose(Propose),
    Prevote(Prevote),
    Precommit(Precommit),
}

impl Message {
    pub fn height(&self) -> Height {
        match self {
            Message::Propose(m) => m.height,
            Message::Prevote(m) => m.height,
            Message::Precommit(m) => m.height,
        }
    }

    pub fn round(&self) -> Round {
        match self {
            Message::Propose(m) => m.round,
            Message::Prevote(m) => m.round,
            Message::Precommit(m) => m.round,
        }
    }

    pub fn sender(&self) -> &NodeId {
        match self {
            Message::Propose(m) => &m.sender,
            Message::Prevote(m) => &m.sender,
            Message::Precommit(m) => &m.sender,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Message::Propose(_) => "propose",
            Message::Prevote(_) => "prevote",
            Message::Precommit(_) => "precommit",
        }
    }
}
