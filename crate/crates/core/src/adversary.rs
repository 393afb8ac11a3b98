//! Byzantine behaviours. A byzantine node runs the normal state machine and
//! its outgoing messages are rewritten here before they reach the network.
//! Senders are enforced by the simulator, so strategies cannot forge.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::consensus::{Message, Payload, Precommit, Prevote, Propose};
use crate::policy::EndorsementView;
use crate::types::{Height, NodeId, Round, TxId, Value};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum AdversaryStrategy {
    /// Drop all input and output from `at` on.
    Crash { at: u64 },
    /// Strip the listed transactions (all when absent) from own endorsement maps.
    WithholdEndorsement {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        txids: Option<Vec<TxId>>,
    },
    /// Hold own endorsement prevotes and hand them to exactly
    /// `target_correct_count` correct nodes just before their prevote timers
    /// fire. Own non-nil precommits are replaced by nil ones.
    LastMomentEndorsement { target_correct_count: usize },
    /// Split own endorsement maps across the groups, one share per group.
    UnevenEndorsement { groups: Vec<Vec<NodeId>> },
    /// As proposer, send the value to half of the nodes and the value minus
    /// its last transaction to the other half.
    EquivocateProposals,
    /// As proposer, delay the proposal to the listed nodes until after their
    /// prevote timers fire.
    WithholdProposalFrom { nodes: Vec<NodeId> },
    /// Send every endorsement prevote twice with differing maps.
    DuplicatePrevoteDiffering,
    Silent,
}

impl AdversaryStrategy {
    pub fn referenced_nodes(&self) -> Vec<&NodeId> {
        match self {
            AdversaryStrategy::UnevenEndorsement { groups } => groups.iter().flatten().collect(),
            AdversaryStrategy::WithholdProposalFrom { nodes } => nodes.iter().collect(),
            _ => Vec::new(),
        }
    }

    pub fn crash_time(&self) -> Option<u64> {
        match self {
            AdversaryStrategy::Crash { at } => Some(*at),
            _ => None,
        }
    }
}

/// When a held message may be released.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Release {
    /// Deliver to the `count` correct nodes whose prevote timers for
    /// `(height, round)` are known, just before they fire.
    LastMoment { height: Height, round: Round, count: usize },
    /// Deliver to `to` right after its prevote timer for `(height, round)`.
    AfterPrevoteTimer { to: NodeId, height: Height, round: Round, since: u64 },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Route {
    Gossip,
    Direct(Vec<NodeId>),
    Hold(Release),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Planned {
    pub msg: Message,
    pub route: Route,
}

/// Everything a strategy may consult: the node set and which nodes are correct.
pub struct AdversaryContext<'a> {
    pub me: &'a NodeId,
    pub nodes: &'a [NodeId],
    pub correct: &'a [NodeId],
}

/// Rewrites one outgoing message of a byzantine node through each strategy in turn.
pub fn intercept(strategies: &[AdversaryStrategy], msg: Message, ctx: &AdversaryContext<'_>) -> Vec<Planned> {
    let mut plans = vec![Planned { msg, route: Route::Gossip }];
    for s in strategies {
        plans = plans.into_iter().flat_map(|p| apply(s, p, ctx)).collect();
    }
    plans
}

fn endorsement_map(msg: &Message) -> Option<&BTreeMap<TxId, EndorsementView>> {
    match msg {
        Message::Prevote(Prevote { endorsements: Some(e), .. }) => Some(e),
        _ => None,
    }
}

fn with_map(msg: &Message, map: BTreeMap<TxId, EndorsementView>) -> Message {
    match msg {
        Message::Prevote(p) => Message::Prevote(Prevote { endorsements: Some(map), ..p.clone() }),
        other => other.clone(),
    }
}

fn others<'a>(ctx: &'a AdversaryContext<'_>) -> impl Iterator<Item = &'a NodeId> {
    ctx.nodes.iter().filter(move |n| *n != ctx.me)
}

fn apply(s: &AdversaryStrategy, p: Planned, ctx: &AdversaryContext<'_>) -> Vec<Planned> {
    use AdversaryStrategy::*;
    match s {
        Silent => Vec::new(),
        Crash { .. } => vec![p],
        WithholdEndorsement { txids } => match endorsement_map(&p.msg) {
            Some(map) => {
                let kept = map
                    .iter()
                    .filter(|(t, _)| txids.as_ref().is_some_and(|ids| !ids.contains(t)))
                    .map(|(t, v)| (t.clone(), *v))
                    .collect();
                vec![Planned { msg: with_map(&p.msg, kept), route: p.route }]
            }
            None => vec![p],
        },
        DuplicatePrevoteDiffering => match endorsement_map(&p.msg) {
            Some(map) if !map.is_empty() => {
                let mut flipped = map.clone();
                if let Some(v) = flipped.values_mut().next() {
                    *v = if *v == EndorsementView::Endorse { EndorsementView::OpposeResult } else { EndorsementView::Endorse };
                }
                let twin = Planned { msg: with_map(&p.msg, flipped), route: p.route.clone() };
                vec![p, twin]
            }
            _ => vec![p],
        },
        UnevenEndorsement { groups } => match endorsement_map(&p.msg) {
            Some(map) if !map.is_empty() && !groups.is_empty() && p.route == Route::Gossip => {
                let k = groups.len();
                groups
                    .iter()
                    .enumerate()
                    .map(|(i, g)| {
                        let share = map.iter().enumerate().filter(|(j, _)| j % k == i).map(|(_, (t, v))| (t.clone(), *v)).collect();
                        Planned { msg: with_map(&p.msg, share), route: Route::Direct(g.clone()) }
                    })
                    .collect()
            }
            _ => vec![p],
        },
        LastMomentEndorsement { target_correct_count } => match &p.msg {
            Message::Prevote(v) if v.endorsements.as_ref().is_some_and(|m| !m.is_empty()) => vec![Planned {
                route: Route::Hold(Release::LastMoment { height: v.height, round: v.round, count: *target_correct_count }),
                msg: p.msg,
            }],
            Message::Precommit(c) if c.digest.is_some() => {
                let nil = Precommit::nil(c.height, c.round, c.sender.clone());
                vec![Planned { msg: Message::Precommit(nil), route: p.route }]
            }
            _ => vec![p],
        },
        EquivocateProposals => match &p.msg {
            Message::Propose(prop) if p.route == Route::Gossip => match &prop.payload {
                Payload::Full(v) if !v.is_empty() => {
                    let mut twin_value: Value = v.clone();
                    twin_value.txs.pop();
                    twin_value.exec_results.pop();
                    let twin = Propose { digest: twin_value.digest(), payload: Payload::Full(twin_value), ..prop.clone() };
                    let rest: Vec<NodeId> = others(ctx).cloned().collect();
                    let (a, b) = rest.split_at(rest.len() / 2);
                    vec![
                        Planned { msg: p.msg.clone(), route: Route::Direct(a.to_vec()) },
                        Planned { msg: Message::Propose(twin), route: Route::Direct(b.to_vec()) },
                    ]
                }
                _ => vec![p],
            },
            _ => vec![p],
        },
        WithholdProposalFrom { nodes } => match &p.msg {
            Message::Propose(prop) if p.route == Route::Gossip => {
                let open: Vec<NodeId> = others(ctx).filter(|n| !nodes.contains(n)).cloned().collect();
                let mut out = vec![Planned { msg: p.msg.clone(), route: Route::Direct(open) }];
                for n in nodes.iter().filter(|n| *n != ctx.me) {
                    out.push(Planned {
                        msg: p.msg.clone(),
                        route: Route::Hold(Release::AfterPrevoteTimer { to: n.clone(), height: prop.height, round: prop.round, since: 0 }),
                    });
                }
                out
            }
            _ => vec![p],
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::Digest;

    fn ids() -> Vec<NodeId> {
        (0..4).map(|i| NodeId(format!("n{i}"))).collect()
    }

    fn prevote(map: &[(&str, EndorsementView)]) -> Message {
        Message::Prevote(Prevote {
            height: 0,
            round: 0,
            sender: NodeId::from("n1"),
            digest: Some(Digest([1; 32])),
            endorsements: Some(map.iter().map(|(t, v)| (TxId::from(*t), *v)).collect()),
            con: true,
        })
    }

    fn run(s: AdversaryStrategy, msg: Message) -> Vec<Planned> {
        let nodes = ids();
        let correct: Vec<_> = nodes.iter().filter(|n| n.as_str() != "n1").cloned().collect();
        let me = NodeId::from("n1");
        intercept(&[s], msg, &AdversaryContext { me: &me, nodes: &nodes, correct: &correct })
    }

    #[test]
    fn withhold_strips_listed() {
        use EndorsementView::*;
        let out = run(
            AdversaryStrategy::WithholdEndorsement { txids: Some(vec![TxId::from("t0")]) },
            prevote(&[("t0", Endorse), ("t1", Endorse)]),
        );
        assert_eq!(endorsement_map(&out[0].msg).unwrap().keys().collect::<Vec<_>>(), [&TxId::from("t1")]);
        let out = run(AdversaryStrategy::WithholdEndorsement { txids: None }, prevote(&[("t0", Endorse)]));
        assert!(endorsement_map(&out[0].msg).unwrap().is_empty());
    }

    #[test]
    fn duplicate_differs() {
        let out = run(AdversaryStrategy::DuplicatePrevoteDiffering, prevote(&[("t0", EndorsementView::Endorse)]));
        assert_eq!(out.len(), 2);
        assert_ne!(out[0].msg, out[1].msg);
    }

    #[test]
    fn uneven_splits_into_groups() {
        use EndorsementView::*;
        let groups = vec![vec![NodeId::from("n0")], vec![NodeId::from("n2"), NodeId::from("n3")]];
        let out = run(AdversaryStrategy::UnevenEndorsement { groups }, prevote(&[("a", Endorse), ("b", Endorse), ("c", Endorse)]));
        assert_eq!(out.len(), 2);
        assert_eq!(endorsement_map(&out[0].msg).unwrap().len(), 2);
        assert_eq!(endorsement_map(&out[1].msg).unwrap().len(), 1);
    }

    #[test]
    fn last_moment_holds_and_nils_precommits() {
        let out = run(AdversaryStrategy::LastMomentEndorsement { target_correct_count: 2 }, prevote(&[("a", EndorsementView::Endorse)]));
        assert!(matches!(out[0].route, Route::Hold(Release::LastMoment { count: 2, .. })));
        let pc = Message::Precommit(Precommit {
            height: 0,
            round: 0,
            sender: NodeId::from("n1"),
            digest: Some(Digest([1; 32])),
            exclusions: Default::default(),
        });
        let out = run(AdversaryStrategy::LastMomentEndorsement { target_correct_count: 2 }, pc);
        assert!(matches!(&out[0].msg, Message::Precommit(p) if p.digest.is_none()));
    }

    #[test]
    fn silent_drops_everything() {
        assert!(run(AdversaryStrategy::Silent, prevote(&[])).is_empty());
    }

    #[test]
    fn serde_forms() {
        let s: AdversaryStrategy = serde_json::from_str(r#"{"crash":{"at":500}}"#).unwrap();
        assert_eq!(s, AdversaryStrategy::Crash { at: 500 });
        let s: AdversaryStrategy = serde_json::from_str(r#""equivocate_proposals""#).unwrap();
        assert_eq!(s, AdversaryStrategy::EquivocateProposals);
    }
}
