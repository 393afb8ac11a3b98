use std::collections::BTreeMap;
use std::sync::Arc;

use super::*;
use crate::execution::{execute_block, WorldState};
use crate::policy::{PolicyBinding, PolicyExpr, Trigger};
use crate::types::{Digest, Transaction, Value};

use EndorsementView::{Endorse, OpposeResult};
use ExclusionKind::{RemoveAlways, RemoveIfFirst};

fn cluster() -> ClusterConfig {
    ClusterConfig::with_default_ids(4, 1).unwrap()
}

fn genesis() -> WorldState {
    WorldState::genesis((0..10).map(|i| (format!("a{i}").as_str().into(), 100)).collect())
}

/// `tx{i}` moves 1 from `a{2i}` to `a{2i+1}`.
fn tx(i: usize) -> Transaction {
    Transaction::transfer(&format!("tx{i}"), &format!("a{}", 2 * i), &format!("a{}", 2 * i + 1), 1)
}

fn val(ids: &[usize]) -> Value {
    let txs: Vec<_> = ids.iter().map(|i| tx(*i)).collect();
    let (exec_results, _) = execute_block(&genesis(), &txs);
    Value { txs, exec_results, origin_height: 0 }
}

fn bind(account: &str, node: &str, trigger: Trigger) -> PolicyBinding {
    PolicyBinding { target: account.into(), policy: PolicyExpr::node(node), trigger }
}

fn config(id: &str, bindings: &[PolicyBinding]) -> NodeConfig {
    let c = cluster();
    let mut cfg = NodeConfig::new(NodeId::from(id), c.clone(), 100);
    cfg.policies = PolicySet::new(bindings.to_vec(), PolicyExpr::default_for(&c), &c);
    cfg
}

fn node(cfg: NodeConfig, mempool: &[usize]) -> Node {
    let mut n = Node::new(Arc::new(cfg), genesis(), mempool.iter().map(|i| tx(*i)).collect());
    n.handle(Input::Start);
    n
}

fn id(s: &str) -> NodeId {
    NodeId::from(s)
}

fn views(pairs: &[(usize, EndorsementView)]) -> BTreeMap<TxId, EndorsementView> {
    pairs.iter().map(|(i, v)| (tx(*i).txid, *v)).collect()
}

fn propose(round: Round, sender: &str, v: &Value, vr: Option<Round>, rr: Option<Round>) -> Input {
    Input::Deliver(Message::Propose(Propose {
        height: 0,
        round,
        sender: id(sender),
        digest: v.digest(),
        payload: Payload::Full(v.clone()),
        vr,
        rr,
    }))
}

fn prevote(round: Round, sender: &str, d: Option<Digest>, map: Option<BTreeMap<TxId, EndorsementView>>, con: bool) -> Input {
    Input::Deliver(Message::Prevote(Prevote { height: 0, round, sender: id(sender), digest: d, endorsements: map, con }))
}

fn precommit(round: Round, sender: &str, d: Option<Digest>, excl: &[(usize, ExclusionKind)]) -> Input {
    let exclusions = excl.iter().map(|(i, k)| (tx(*i).txid, *k)).collect();
    Input::Deliver(Message::Precommit(Precommit { height: 0, round, sender: id(sender), digest: d, exclusions }))
}

fn timeout(kind: TimerKind, round: Round) -> Input {
    Input::Timeout(Timeout { kind, height: 0, round })
}

fn sent(out: &[Output]) -> Vec<&Message> {
    out.iter()
        .filter_map(|o| match o {
            Output::Broadcast(m) => Some(m),
            _ => None,
        })
        .collect()
}

fn prevotes(out: &[Output]) -> Vec<&Prevote> {
    sent(out)
        .into_iter()
        .filter_map(|m| match m {
            Message::Prevote(p) => Some(p),
            _ => None,
        })
        .collect()
}

fn precommits(out: &[Output]) -> Vec<&Precommit> {
    sent(out)
        .into_iter()
        .filter_map(|m| match m {
            Message::Precommit(p) => Some(p),
            _ => None,
        })
        .collect()
}

fn timers(out: &[Output]) -> Vec<Timeout> {
    out.iter()
        .filter_map(|o| match o {
            Output::Timer { timeout, .. } => Some(*timeout),
            _ => None,
        })
        .collect()
}

#[test]
fn genesis_proposer_proposes_fresh_value() {
    let mut n = Node::new(Arc::new(config("n0", &[])), genesis(), vec![tx(0), tx(1)]);
    let out = n.handle(Input::Start);
    let Message::Propose(p) = sent(&out)[0] else { panic!("expected a proposal") };
    assert_eq!((p.vr, p.rr), (None, None));
    assert_eq!(p.digest, val(&[0, 1]).digest());
}

#[test]
fn prevotes_genesis_proposal_with_own_views() {
    let mut n = node(config("n2", &[]), &[]);
    let v = val(&[0, 1]);
    let out = n.handle(propose(0, "n0", &v, None, None));
    let pv = prevotes(&out);
    assert_eq!(pv.len(), 1);
    assert_eq!(pv[0].digest, Some(v.digest()));
    assert_eq!(pv[0].endorsements, Some(views(&[(0, Endorse), (1, Endorse)])));
    assert!(pv[0].con);
}

#[test]
fn ignores_proposal_from_wrong_proposer() {
    let mut n = node(config("n2", &[]), &[]);
    let out = n.handle(propose(0, "n1", &val(&[0]), None, None));
    assert!(sent(&out).is_empty());
}

/// Node n2 after round 0 of `v` with the given precommit exclusions from
/// n0, n1 and n3, which makes round 0 examined.
fn examined_round0(bindings: &[PolicyBinding], v: &Value, excl: [&[(usize, ExclusionKind)]; 3]) -> (Node, Vec<Output>) {
    let mut n = node(config("n2", bindings), &[]);
    let d = Some(v.digest());
    n.handle(propose(0, "n0", v, None, None));
    let mut out = Vec::new();
    for (s, e) in ["n0", "n1", "n3"].into_iter().zip(excl) {
        out.extend(n.handle(precommit(0, s, d, e)));
    }
    (n, out)
}

#[test]
fn examined_value_sets_reference_and_advances() {
    let v = val(&[1, 2, 3]);
    let (n, out) = examined_round0(&[], &v, [&[(1, RemoveIfFirst)], &[(1, RemoveIfFirst)], &[]]);
    assert_eq!(n.state().round, 1);
    assert_eq!(n.state().ref_round, Some(0));
    assert_eq!(n.state().ref_value.as_ref(), Some(&v));
    assert!(out.iter().any(|o| matches!(o, Output::Phase(PhaseEvent::Examined { round: 0, .. }))));
}

#[test]
fn proposer_drops_first_removable_from_reference() {
    // n1 proposes round 1 of height 0.
    let v = val(&[1, 2, 3]);
    let mut n = node(config("n1", &[]), &[]);
    let d = Some(v.digest());
    n.handle(propose(0, "n0", &v, None, None));
    let mut out = Vec::new();
    for s in ["n0", "n2", "n3"] {
        out = n.handle(precommit(0, s, d, &[(1, RemoveIfFirst), (2, RemoveIfFirst)]));
    }
    let Message::Propose(p) = sent(&out).into_iter().find(|m| matches!(m, Message::Propose(_))).unwrap() else { unreachable!() };
    assert_eq!(p.rr, Some(0));
    assert_eq!(p.vr, None);
    assert_eq!(p.digest, val(&[2, 3]).digest());
    assert_eq!(p.payload, Payload::DigestOnly { removed: vec![tx(1).txid] });
}

#[test]
fn valid_value_is_reproposed_unchanged() {
    let v = val(&[1, 2]);
    let d = Some(v.digest());
    let mut n = node(config("n1", &[]), &[]);
    n.handle(propose(0, "n0", &v, None, None));
    for s in ["n0", "n2"] {
        n.handle(prevote(0, s, d, Some(views(&[(1, Endorse), (2, Endorse)])), true));
    }
    assert_eq!(n.state().valid_round, Some(0));
    for s in ["n0", "n2", "n3"] {
        n.handle(precommit(0, s, None, &[]));
    }
    let out = n.handle(timeout(TimerKind::Precommit, 0));
    let p = sent(&out)
        .into_iter()
        .find_map(|m| match m {
            Message::Propose(p) => Some(p),
            _ => None,
        })
        .unwrap();
    assert_eq!((p.round, p.vr, p.rr), (1, Some(0), Some(0)));
    assert_eq!(p.digest, v.digest());
}

#[test]
fn reference_without_enough_exclusions_gets_nil_at_timeout() {
    let v = val(&[1, 2, 3]);
    // Only one precommit suggests removing tx1: below f+1.
    let (mut n, _) = examined_round0(&[], &v, [&[(1, RemoveIfFirst)], &[], &[]]);
    let reduced = val(&[2, 3]);
    let out = n.handle(propose(1, "n1", &reduced, None, Some(0)));
    assert!(prevotes(&out).is_empty(), "reference check failure waits for the timer");
    let out = n.handle(timeout(TimerKind::Propose, 1));
    let pv: Vec<_> = prevotes(&out).into_iter().filter(|p| p.con).collect();
    assert_eq!(pv.len(), 1);
    assert_eq!(pv[0].digest, None);
}

#[test]
fn dropping_a_later_removable_tx_is_rejected() {
    // tx1 and tx2 are both removable; tx1's endorsements were never seen,
    // so only tx1 may be dropped first.
    let v = val(&[1, 2, 3]);
    let both: &[(usize, ExclusionKind)] = &[(1, RemoveIfFirst), (2, RemoveIfFirst)];
    let (mut n, _) = examined_round0(&[], &v, [both, both, &[]]);
    n.handle(propose(1, "n1", &val(&[1, 3]), None, Some(0)));
    let out = n.handle(timeout(TimerKind::Propose, 1));
    assert_eq!(prevotes(&out)[0].digest, None);
}

#[test]
fn dropping_the_first_removable_tx_is_accepted() {
    let v = val(&[1, 2, 3]);
    let both: &[(usize, ExclusionKind)] = &[(1, RemoveIfFirst), (2, RemoveIfFirst)];
    let (mut n, _) = examined_round0(&[], &v, [both, both, &[]]);
    let reduced = val(&[2, 3]);
    let out = n.handle(propose(1, "n1", &reduced, None, Some(0)));
    assert_eq!(prevotes(&out)[0].digest, Some(reduced.digest()));
}

#[test]
fn requeued_valid_value_needs_endorsement_at_rr() {
    let v = val(&[1]);
    let d = Some(v.digest());
    let mut n = node(config("n2", &[]), &[]);
    // Round 0 QC for v, but the endorsements only reach 2 of the 3 needed.
    n.handle(propose(0, "n0", &v, None, None));
    n.handle(prevote(0, "n0", d, Some(views(&[(1, Endorse)])), true));
    n.handle(prevote(0, "n1", d, None, true));
    for s in ["n0", "n1", "n3"] {
        n.handle(precommit(0, s, None, &[]));
    }
    n.handle(timeout(TimerKind::Precommit, 0));
    assert_eq!(n.state().round, 1);
    n.handle(propose(1, "n1", &v, Some(0), Some(0)));
    let out = n.handle(timeout(TimerKind::Propose, 1));
    assert_eq!(prevotes(&out)[0].digest, None);
}

#[test]
fn prevote_timer_arms_once_and_ignores_con_false() {
    let mut n = node(config("n2", &[]), &[]);
    let v = val(&[1]);
    let d = Some(v.digest());
    n.handle(propose(0, "n0", &v, None, None));
    let out = n.handle(prevote(0, "n0", d, None, false));
    assert!(timers(&out).is_empty(), "con=false does not count");
    let out = n.handle(prevote(0, "n1", None, None, true));
    assert!(timers(&out).is_empty());
    let out = n.handle(prevote(0, "n3", None, None, true));
    assert!(timers(&out).iter().any(|t| t.kind == TimerKind::Prevote));
    let out = n.handle(prevote(0, "n0", None, None, true));
    assert!(timers(&out).iter().all(|t| t.kind != TimerKind::Prevote));
}

#[test]
fn endorsed_quorum_locks_and_precommits_clean() {
    let mut n = node(config("n2", &[]), &[]);
    let v = val(&[1, 2]);
    let d = Some(v.digest());
    n.handle(propose(0, "n0", &v, None, None));
    n.handle(prevote(0, "n0", d, Some(views(&[(1, Endorse), (2, Endorse)])), true));
    let out = n.handle(prevote(0, "n1", d, Some(views(&[(1, Endorse), (2, Endorse)])), true));
    let pc = precommits(&out);
    assert_eq!(pc.len(), 1);
    assert!(pc[0].is_clean() && pc[0].digest == d);
    assert_eq!(n.state().locked_round, Some(0));
}

#[test]
fn differing_maps_from_one_sender_endorse_everything() {
    // tx1 is bound to n3 alone; n3 sends two differing maps.
    let b = [bind("a2", "n3", Trigger::Always)];
    let mut n = node(config("n2", &b), &[]);
    let v = val(&[1]);
    let d = Some(v.digest());
    n.handle(propose(0, "n0", &v, None, None));
    n.handle(prevote(0, "n0", d, Some(BTreeMap::new()), true));
    n.handle(prevote(0, "n3", d, Some(BTreeMap::new()), false));
    let out = n.handle(prevote(0, "n3", d, Some(views(&[(1, OpposeResult)])), true));
    let pc = precommits(&out);
    assert_eq!(pc.len(), 1);
    assert!(pc[0].is_clean());
}

#[test]
fn silent_sole_endorser_is_suggested_at_timeout() {
    let trig = Trigger::Custom("ok_status".into());
    let b = [bind("a4", "n3", trig)];
    let mut n = node(config("n2", &b), &[]);
    let v = val(&[1, 2, 3]);
    let d = Some(v.digest());
    let m = Some(views(&[(1, Endorse), (3, Endorse)]));
    n.handle(propose(0, "n0", &v, None, None));
    n.handle(prevote(0, "n0", d, m.clone(), true));
    n.handle(prevote(0, "n1", d, m, true));
    let out = n.handle(timeout(TimerKind::Prevote, 0));
    let pc = precommits(&out);
    assert_eq!(pc[0].exclusions, BTreeMap::from([(tx(2).txid, RemoveIfFirst)]));
    assert_eq!(n.state().locked_round, None);
}

#[test]
fn context_free_binding_failure_is_remove_always() {
    let b = [bind("a4", "n3", Trigger::Always)];
    let mut n = node(config("n2", &b), &[]);
    let v = val(&[1, 2]);
    let d = Some(v.digest());
    let m = Some(views(&[(1, Endorse)]));
    n.handle(propose(0, "n0", &v, None, None));
    n.handle(prevote(0, "n0", d, m.clone(), true));
    n.handle(prevote(0, "n1", d, m, true));
    let out = n.handle(timeout(TimerKind::Prevote, 0));
    assert_eq!(precommits(&out)[0].exclusions, BTreeMap::from([(tx(2).txid, RemoveAlways)]));
}

#[test]
fn no_quorum_for_a_value_gives_nil_precommit() {
    let mut n = node(config("n2", &[]), &[]);
    n.handle(propose(0, "n0", &val(&[1]), None, None));
    n.handle(prevote(0, "n0", None, None, true));
    n.handle(prevote(0, "n1", Some(Digest([9; 32])), None, true));
    let out = n.handle(timeout(TimerKind::Prevote, 0));
    assert_eq!(precommits(&out)[0].digest, None);
}

#[test]
fn veto_triggers_rapid_removal() {
    let b = [bind("a2", "n1", Trigger::Always)];
    let mut n = node(config("n2", &b), &[]);
    let v = val(&[1, 2]);
    let d = Some(v.digest());
    n.handle(propose(0, "n0", &v, None, None));
    n.handle(prevote(0, "n0", d, Some(views(&[(2, Endorse)])), true));
    let out = n.handle(prevote(0, "n1", d, Some(views(&[(1, OpposeResult), (2, Endorse)])), true));
    let pc = precommits(&out);
    assert_eq!(pc.len(), 1, "no timer needed");
    assert_eq!(pc[0].exclusions, BTreeMap::from([(tx(1).txid, RemoveIfFirst)]));
}

#[test]
fn pending_tx_blocks_rapid_removal() {
    let b = [bind("a2", "n1", Trigger::Always), bind("a4", "n3", Trigger::Always)];
    let mut n = node(config("n2", &b), &[]);
    let v = val(&[1, 2]);
    let d = Some(v.digest());
    n.handle(propose(0, "n0", &v, None, None));
    n.handle(prevote(0, "n0", d, Some(BTreeMap::new()), true));
    let out = n.handle(prevote(0, "n1", d, Some(views(&[(1, OpposeResult)])), true));
    assert!(precommits(&out).is_empty());
}

#[test]
fn clean_quorum_commits_and_advances_height() {
    let mut n = node(config("n2", &[]), &[]);
    let v = val(&[1]);
    let d = Some(v.digest());
    n.handle(propose(0, "n0", &v, None, None));
    let mut out = Vec::new();
    for s in ["n0", "n1", "n3"] {
        out = n.handle(precommit(0, s, d, &[]));
    }
    assert!(out.iter().any(|o| matches!(o, Output::Decide(dec) if dec.value == v)));
    assert_eq!(n.state().h, 1);
    assert_eq!(n.world().version, 1);
}

#[test]
fn longer_examined_value_does_not_replace_reference() {
    let v = val(&[1, 2]);
    let (mut n, _) = examined_round0(&[], &v, [&[(1, RemoveIfFirst)], &[(1, RemoveIfFirst)], &[]]);
    // Round 1: a fresh, longer value is examined too.
    let longer = val(&[1, 2, 3]);
    let d = Some(longer.digest());
    n.handle(propose(1, "n1", &longer, None, None));
    for s in ["n0", "n1", "n3"] {
        n.handle(precommit(1, s, d, &[(3, RemoveIfFirst)]));
    }
    assert_eq!(n.state().ref_round, Some(0));
    assert_eq!(n.state().round, 2);
}

#[test]
fn crashed_proposer_leads_to_nil_prevote() {
    let mut n = node(config("n2", &[]), &[]);
    let out = n.handle(timeout(TimerKind::Propose, 0));
    assert_eq!(prevotes(&out)[0].digest, None);
    // A second firing after leaving the propose step does nothing.
    let out = n.handle(timeout(TimerKind::Propose, 0));
    assert!(sent(&out).is_empty());
}

#[test]
fn precommit_timer_moves_to_next_round() {
    let mut n = node(config("n2", &[]), &[]);
    let out = n.handle(timeout(TimerKind::Precommit, 0));
    assert_eq!(n.state().round, 1);
    assert!(timers(&out).iter().any(|t| t.kind == TimerKind::Propose && t.round == 1));
}

#[test]
fn late_endorser_sends_con_false_prevote_once() {
    let b = [bind("a2", "n2", Trigger::Always)];
    let mut n = node(config("n2", &b), &[]);
    n.handle(timeout(TimerKind::Propose, 0));
    let v = val(&[1]);
    let out = n.handle(propose(0, "n0", &v, None, None));
    let pv = prevotes(&out);
    assert_eq!(pv.len(), 1);
    assert!(!pv[0].con);
    assert_eq!(pv[0].endorsements, Some(views(&[(1, Endorse)])));
    let out = n.handle(propose(0, "n0", &v, None, None));
    assert!(prevotes(&out).is_empty());
}

#[test]
fn late_non_endorser_stays_silent() {
    let b = [bind("a2", "n3", Trigger::Always)];
    let mut n = node(config("n2", &b), &[]);
    n.handle(timeout(TimerKind::Propose, 0));
    let out = n.handle(propose(0, "n0", &val(&[1]), None, None));
    assert!(prevotes(&out).is_empty());
}

#[test]
fn equivocation_gives_nil_precommit() {
    let mut n = node(config("n2", &[]), &[]);
    n.handle(propose(0, "n0", &val(&[1]), None, None));
    let out = n.handle(propose(0, "n0", &val(&[2]), None, None));
    let pc = precommits(&out);
    assert_eq!(pc.len(), 1);
    assert_eq!(pc[0].digest, None);
    let out = n.handle(propose(0, "n0", &val(&[1]), None, None));
    assert!(sent(&out).is_empty(), "duplicates are ignored");
}

#[test]
fn extract_examples() {
    let v = val(&[1, 2, 3]);
    let c = cluster();
    let d = Some(v.digest());
    let log_with = |excl: &[(usize, ExclusionKind)]| {
        let mut log = MessageLog::default();
        for s in ["n0", "n1"] {
            let exclusions = excl.iter().map(|(i, k)| (tx(*i).txid, *k)).collect();
            log.insert(Message::Precommit(Precommit { height: 0, round: 0, sender: id(s), digest: d, exclusions }));
        }
        log
    };
    let ids = |xs: &[usize]| xs.iter().map(|i| tx(*i).txid).collect::<std::collections::BTreeSet<_>>();
    assert_eq!(extract(&log_with(&[(1, RemoveIfFirst)]), &c, 0, &v), ids(&[1]));
    assert_eq!(extract(&log_with(&[(1, RemoveIfFirst), (2, RemoveIfFirst)]), &c, 0, &v), ids(&[1]));
    assert_eq!(extract(&log_with(&[(1, RemoveIfFirst), (3, RemoveAlways)]), &c, 0, &v), ids(&[1, 3]));
}
