use std::collections::{BTreeMap, BTreeSet};

use super::message::{Message, Precommit, Prevote, Propose};
use crate::types::{Digest, NodeId, Round, TxId};

/// Retained messages per sender and round. Two is enough to detect
/// equivocation and to apply the differing-endorsement rule.
pub const RETAINED_PER_SENDER: usize = 2;

#[derive(Clone, Debug, Default)]
pub struct RoundMessages {
    /// Proposals from the round's proposer, at most two distinct digests.
    pub proposals: Vec<Propose>,
    pub prevotes: BTreeMap<NodeId, Vec<Prevote>>,
    pub precommits: BTreeMap<NodeId, Vec<Precommit>>,
}

/// Suggestion counts for one transaction: distinct senders suggesting any
/// kind of removal, and those suggesting `REMOVE_ALWAYS`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SuggestionCount {
    pub any: usize,
    pub always: usize,
}

/// All messages of the current height, indexed by round.
#[derive(Clone, Debug, Default)]
pub struct MessageLog {
    pub rounds: BTreeMap<Round, RoundMessages>,
}

fn push_distinct<T: PartialEq>(list: &mut Vec<T>, m: T, limit: usize) -> bool {
    if list.len() >= limit || list.contains(&m) {
        return false;
    }
    list.push(m);
    true
}

/// Prevotes have two budgets per sender: consensus votes, and distinct
/// endorsement maps per digest over at most `limit` digests. Sharing one
/// budget would let a sender crowd out its second map with votes and dodge
/// the differing-map rule.
fn push_prevote(list: &mut Vec<Prevote>, p: Prevote, limit: usize) -> bool {
    if list.contains(&p) {
        return false;
    }
    let vote_room = p.con && list.iter().filter(|q| q.con).count() < limit;
    let map_room = p.endorsements.as_ref().is_some_and(|m| {
        let mut maps = BTreeSet::new();
        let mut digests = BTreeSet::from([p.digest]);
        for q in list.iter() {
            if let Some(qm) = &q.endorsements {
                digests.insert(q.digest);
                if q.digest == p.digest {
                    maps.insert(qm);
                }
            }
        }
        !maps.contains(m) && maps.len() < limit && digests.len() <= limit
    });
    if vote_room || map_room {
        list.push(p);
    }
    vote_room || map_room
}

impl MessageLog {
    /// Stores a message of the current height. Returns false for duplicates
    /// and messages beyond the retention limit.
    pub fn insert(&mut self, msg: Message) -> bool {
        self.insert_limited(msg, RETAINED_PER_SENDER)
    }

    /// Stores every distinct message. Offline checks use this so that a third
    /// differing message from one sender is not lost.
    pub fn insert_unbounded(&mut self, msg: Message) -> bool {
        self.insert_limited(msg, usize::MAX)
    }

    fn insert_limited(&mut self, msg: Message, limit: usize) -> bool {
        let rm = self.rounds.entry(msg.round()).or_default();
        match msg {
            Message::Propose(p) => {
                if rm.proposals.iter().any(|q| q.digest == p.digest) || rm.proposals.len() >= limit {
                    return false;
                }
                rm.proposals.push(p);
                true
            }
            Message::Prevote(p) => push_prevote(rm.prevotes.entry(p.sender.clone()).or_default(), p, limit),
            Message::Precommit(p) => push_distinct(rm.precommits.entry(p.sender.clone()).or_default(), p, limit),
        }
    }

    pub fn round(&self, r: Round) -> Option<&RoundMessages> {
        self.rounds.get(&r)
    }

    pub fn proposals(&self, r: Round) -> &[Propose] {
        self.rounds.get(&r).map(|rm| rm.proposals.as_slice()).unwrap_or(&[])
    }

    /// Senders of consensus (`con=true`) prevotes for `target` (`None` is nil).
    pub fn prevoters(&self, r: Round, target: Option<&Digest>) -> BTreeSet<&NodeId> {
        self.prevotes_where(r, |p| p.con && p.digest.as_ref() == target)
    }

    pub fn prevoters_any(&self, r: Round) -> BTreeSet<&NodeId> {
        self.prevotes_where(r, |p| p.con)
    }

    fn prevotes_where(&self, r: Round, pred: impl Fn(&Prevote) -> bool) -> BTreeSet<&NodeId> {
        let Some(rm) = self.rounds.get(&r) else { return BTreeSet::new() };
        rm.prevotes.iter().filter(|(_, ps)| ps.iter().any(&pred)).map(|(n, _)| n).collect()
    }

    /// Prevotes carrying endorsement maps for `digest`, `con` of either value.
    pub fn endorsement_prevotes(&self, r: Round, digest: &Digest) -> Vec<&Prevote> {
        let Some(rm) = self.rounds.get(&r) else { return Vec::new() };
        rm.prevotes
            .values()
            .flatten()
            .filter(|p| p.digest.as_ref() == Some(digest) && p.endorsements.is_some())
            .collect()
    }

    pub fn precommitters(&self, r: Round, target: Option<&Digest>, clean_only: bool) -> BTreeSet<&NodeId> {
        let Some(rm) = self.rounds.get(&r) else { return BTreeSet::new() };
        rm.precommits
            .iter()
            .filter(|(_, ps)| ps.iter().any(|p| p.digest.as_ref() == target && (!clean_only || p.is_clean())))
            .map(|(n, _)| n)
            .collect()
    }

    pub fn precommitters_any(&self, r: Round) -> BTreeSet<&NodeId> {
        self.rounds.get(&r).map(|rm| rm.precommits.keys().collect()).unwrap_or_default()
    }

    /// Distinct senders of any message at round `r`.
    pub fn senders(&self, r: Round) -> BTreeSet<&NodeId> {
        let Some(rm) = self.rounds.get(&r) else { return BTreeSet::new() };
        rm.proposals
            .iter()
            .map(|p| &p.sender)
            .chain(rm.prevotes.keys())
            .chain(rm.precommits.keys())
            .collect()
    }

    pub fn suggestion_counts(&self, r: Round, digest: &Digest) -> BTreeMap<TxId, SuggestionCount> {
        let mut out: BTreeMap<TxId, SuggestionCount> = BTreeMap::new();
        let Some(rm) = self.rounds.get(&r) else { return out };
        for ps in rm.precommits.values() {
            let mut kinds: BTreeMap<&TxId, bool> = BTreeMap::new();
            for p in ps.iter().filter(|p| p.digest.as_ref() == Some(digest)) {
                for (tx, k) in &p.exclusions {
                    let always = *k == super::ExclusionKind::RemoveAlways;
                    let e = kinds.entry(tx).or_insert(false);
                    *e |= always;
                }
            }
            for (tx, always) in kinds {
                let c = out.entry(tx.clone()).or_default();
                c.any += 1;
                c.always += usize::from(always);
            }
        }
        out
    }
}
