use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::log::MessageLog;
use super::message::{ExclusionKind, Message, Payload, Precommit, Prevote, Propose};
use super::verify::{self, LogView};
use super::{NodeConfig, Protocol, Step, TimerKind};
use crate::eov::{eov_validate, AbortRecord, EovBlock};
use crate::execution::{apply_committed, execute_block, execute_isolated, reexecute_after_removal, DepDag, WorldState};
use crate::policy::{EndorsementView, TxStatus};
use crate::types::{quorum_size, removal_threshold, Digest, Height, NodeId, Round, Transaction, TxId, Value};

/// The Tendermint and FlexTender variables of one node.
#[derive(Clone, Debug, Default)]
pub struct NodeState {
    pub h: Height,
    pub round: Round,
    pub step: Step,
    pub decision: BTreeMap<Height, Value>,
    pub locked_value: Option<Value>,
    pub locked_round: Option<Round>,
    pub valid_value: Option<Value>,
    pub valid_round: Option<Round>,
    pub ref_value: Option<Value>,
    pub ref_round: Option<Round>,
    pub msg_log: MessageLog,
    pub sent_endorsement_rounds: BTreeSet<Round>,
    pub seen_proposals: BTreeMap<Round, BTreeSet<Digest>>,
}

/// Pending transactions in proposal order.
#[derive(Clone, Debug, Default)]
pub struct Mempool {
    queue: VecDeque<Transaction>,
}

impl Mempool {
    pub fn new(txs: impl IntoIterator<Item = Transaction>) -> Self {
        Self { queue: txs.into_iter().collect() }
    }

    pub fn peek(&self, n: usize) -> Vec<Transaction> {
        self.queue.iter().take(n).cloned().collect()
    }

    pub fn remove(&mut self, ids: &BTreeSet<TxId>) {
        self.queue.retain(|t| !ids.contains(&t.txid));
    }

    /// Puts `txs` ahead of everything else, keeping their order.
    pub fn push_front(&mut self, txs: Vec<Transaction>) {
        for tx in txs.into_iter().rev() {
            self.queue.push_front(tx);
        }
    }

    pub fn len(&self) -> usize {
        self.queue.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queue.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RemovalCause {
    Veto,
    Timeout,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Removal {
    pub txid: TxId,
    /// Round whose precommits carried the suggestions.
    pub round: Round,
    pub cause: RemovalCause,
    pub kind: ExclusionKind,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Decision {
    pub height: Height,
    pub round: Round,
    pub digest: Digest,
    pub value: Value,
    /// Transactions dropped along the reference chain that led to `value`.
    pub removals: Vec<Removal>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "phase", rename_all = "snake_case")]
pub enum PhaseEvent {
    Step { height: Height, round: Round, step: Step },
    Lock { height: Height, round: Round, digest: Digest },
    Valid { height: Height, round: Round, digest: Digest, ref_round: Option<Round> },
    Examined { height: Height, round: Round, digest: Digest, vr: Option<Round>, value: Value },
    RefUpdate { height: Height, round: Round, digest: Digest, txids: Vec<TxId> },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Timeout {
    pub kind: TimerKind,
    pub height: Height,
    pub round: Round,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Input {
    Start,
    Deliver(Message),
    Timeout(Timeout),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Output {
    Broadcast(Message),
    Timer { timeout: Timeout, after: u64 },
    Decide(Decision),
    Phase(PhaseEvent),
    Abort(AbortRecord),
    /// Processing time spent on this input.
    Busy(u64),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeStats {
    pub executed_txs: u64,
    /// Executions done while deriving a value after removals.
    pub recomputed_txs: u64,
    /// What those derivations would have cost with full re-execution.
    pub full_recompute_txs: u64,
}

pub struct Node {
    cfg: Arc<NodeConfig>,
    state: NodeState,
    world: WorldState,
    mempool: Mempool,
    known: BTreeMap<Digest, Value>,
    exec_ok: BTreeMap<Digest, bool>,
    failed_derivations: BTreeSet<(Digest, Digest)>,
    malformed_rounds: BTreeSet<Round>,
    future: Vec<Message>,
    prevote_timer_armed: BTreeSet<Round>,
    precommit_timer_armed: BTreeSet<Round>,
    examined_seen: BTreeSet<(Round, Digest)>,
    endorsed_rounds: BTreeSet<Round>,
    locked_digest: Option<Digest>,
    started: bool,
    busy: u64,
    stats: NodeStats,
}

impl Node {
    pub fn new(cfg: Arc<NodeConfig>, genesis: WorldState, mempool: Vec<Transaction>) -> Self {
        Self {
            cfg,
            state: NodeState::default(),
            world: genesis,
            mempool: Mempool::new(mempool),
            known: BTreeMap::new(),
            exec_ok: BTreeMap::new(),
            failed_derivations: BTreeSet::new(),
            malformed_rounds: BTreeSet::new(),
            future: Vec::new(),
            prevote_timer_armed: BTreeSet::new(),
            precommit_timer_armed: BTreeSet::new(),
            examined_seen: BTreeSet::new(),
            endorsed_rounds: BTreeSet::new(),
            locked_digest: None,
            started: false,
            busy: 0,
            stats: NodeStats::default(),
        }
    }

    pub fn id(&self) -> &NodeId {
        &self.cfg.id
    }

    pub fn config(&self) -> &NodeConfig {
        &self.cfg
    }

    pub fn state(&self) -> &NodeState {
        &self.state
    }

    pub fn world(&self) -> &WorldState {
        &self.world
    }

    pub fn stats(&self) -> NodeStats {
        self.stats
    }

    pub fn mempool(&self) -> &Mempool {
        &self.mempool
    }

    pub fn handle(&mut self, input: Input) -> Vec<Output> {
        let mut out = Vec::new();
        match input {
            Input::Start => {
                if !self.started {
                    self.started = true;
                    self.start_round(0, &mut out);
                }
            }
            Input::Deliver(msg) => self.ingest(msg),
            Input::Timeout(t) => self.on_timeout(t, &mut out),
        }
        if self.started {
            self.drive(&mut out);
        }
        if self.busy > 0 {
            out.insert(0, Output::Busy(std::mem::take(&mut self.busy)));
        }
        out
    }

    fn eov(&self) -> bool {
        self.cfg.protocol == Protocol::Eov
    }

    fn quorum(&self) -> usize {
        quorum_size(&self.cfg.cluster)
    }

    fn view(&self) -> LogView<'_> {
        LogView { log: &self.state.msg_log, cluster: &self.cfg.cluster, policies: &self.cfg.policies, known: &self.known }
    }

    fn ve(&self, r: Option<Round>, v: &Value) -> bool {
        self.eov() || verify::verify_endorsement(&self.view(), r, v)
    }

    fn ingest(&mut self, msg: Message) {
        let h = self.state.h;
        if msg.height() > h {
            self.future.push(msg);
        } else if msg.height() == h {
            self.insert_current(msg);
        }
    }

    fn insert_current(&mut self, msg: Message) {
        if !self.cfg.cluster.contains(msg.sender()) {
            return;
        }
        if let Message::Propose(p) = &msg {
            if &p.sender != self.cfg.cluster.proposer(p.height, p.round) {
                return;
            }
            match &p.payload {
                Payload::Full(v) => {
                    if v.digest() != p.digest {
                        self.malformed_rounds.insert(p.round);
                        return;
                    }
                    self.known.entry(p.digest).or_insert_with(|| v.clone());
                }
                Payload::DigestOnly { .. } => {
                    if p.rr.is_none() || p.vr.is_some() {
                        self.malformed_rounds.insert(p.round);
                        return;
                    }
                }
            }
            self.state.seen_proposals.entry(p.round).or_default().insert(p.digest);
        }
        self.state.msg_log.insert(msg);
    }

    fn broadcast(&mut self, msg: Message, out: &mut Vec<Output>) {
        out.push(Output::Broadcast(msg.clone()));
        self.insert_current(msg);
    }

    fn set_step(&mut self, step: Step, out: &mut Vec<Output>) {
        self.state.step = step;
        out.push(Output::Phase(PhaseEvent::Step { height: self.state.h, round: self.state.round, step }));
    }

    fn schedule(&mut self, kind: TimerKind, out: &mut Vec<Output>) {
        let round = self.state.round;
        let after = self.cfg.timers.duration(kind, round);
        out.push(Output::Timer { timeout: Timeout { kind, height: self.state.h, round }, after });
    }

    fn send_prevote(
        &mut self,
        digest: Option<Digest>,
        endorsements: Option<BTreeMap<TxId, EndorsementView>>,
        out: &mut Vec<Output>,
    ) {
        let msg = Prevote {
            height: self.state.h,
            round: self.state.round,
            sender: self.cfg.id.clone(),
            digest,
            endorsements,
            con: true,
        };
        self.broadcast(Message::Prevote(msg), out);
        self.set_step(Step::Prevote, out);
    }

    fn send_precommit(&mut self, digest: Option<Digest>, exclusions: BTreeMap<TxId, ExclusionKind>, out: &mut Vec<Output>) {
        let msg = Precommit { height: self.state.h, round: self.state.round, sender: self.cfg.id.clone(), digest, exclusions };
        self.broadcast(Message::Precommit(msg), out);
        self.set_step(Step::Precommit, out);
    }

    fn charge_exec(&mut self, txs: usize) {
        self.busy += txs as u64 * self.cfg.costs.exec_ticks_per_tx;
        self.stats.executed_txs += txs as u64;
    }

    /// Whether our own execution reproduces `v`'s results. Cached per digest.
    fn exec_check(&mut self, d: &Digest, v: &Value) -> bool {
        if let Some(ok) = self.exec_ok.get(d) {
            return *ok;
        }
        self.charge_exec(v.len());
        let (results, _) = execute_block(&self.world, &v.txs);
        let ok = results == v.exec_results;
        self.exec_ok.insert(*d, ok);
        ok
    }

    fn endorsements_for(&self, v: &Value) -> BTreeMap<TxId, EndorsementView> {
        v.txs
            .iter()
            .zip(&v.exec_results)
            .filter(|(tx, r)| self.cfg.policies.designated_endorsers(tx, r).contains(&self.cfg.id))
            .map(|(tx, r)| (tx.txid.clone(), self.cfg.verdicts.view_for(&tx.txid, r)))
            .collect()
    }

    fn is_designated(&self, v: &Value) -> bool {
        v.txs
            .iter()
            .zip(&v.exec_results)
            .any(|(tx, r)| self.cfg.policies.designated_endorsers(tx, r).contains(&self.cfg.id))
    }

    /// `ex` without `removed`, with results equal to a full serial execution.
    /// Only dependents of the removed transactions are recomputed when `ex`'s
    /// results are known to be our own.
    fn derive(&mut self, ex: &Value, ex_digest: &Digest, removed: &BTreeSet<TxId>) -> Option<Value> {
        if !ex.is_well_formed(self.state.h) {
            return None;
        }
        let dag = DepDag::build(&ex.txs);
        let optimized = self.cfg.dependency_reexec && self.exec_ok.get(ex_digest) == Some(&true);
        let re = reexecute_after_removal(&self.world, &ex.txs, removed, &ex.exec_results, &dag, optimized).ok()?;
        self.charge_exec(re.recomputed);
        self.stats.recomputed_txs += re.recomputed as u64;
        self.stats.full_recompute_txs += re.results.len() as u64;
        let txs = ex.txs.iter().filter(|t| !removed.contains(&t.txid)).cloned().collect();
        Some(Value { txs, exec_results: re.results, origin_height: self.state.h })
    }

    fn fresh_value(&mut self) -> Value {
        let txs = self.mempool.peek(self.cfg.batch_size);
        let exec_results = if self.eov() {
            self.busy += txs.len() as u64 * self.cfg.costs.sig_ticks_per_tx;
            self.charge_exec(txs.len());
            execute_isolated(&self.world, &txs)
        } else {
            self.charge_exec(txs.len());
            execute_block(&self.world, &txs).0
        };
        Value { txs, exec_results, origin_height: self.state.h }
    }

    fn start_round(&mut self, round: Round, out: &mut Vec<Output>) {
        self.state.round = round;
        self.set_step(Step::Propose, out);
        let h = self.state.h;
        if self.cfg.cluster.proposer(h, round) != &self.cfg.id {
            self.schedule(TimerKind::Propose, out);
            return;
        }
        let (value, vr, rr, removed) = match (self.state.valid_value.clone(), self.state.ref_value.clone(), self.state.ref_round) {
            (Some(vv), _, _) => (vv, self.state.valid_round, self.state.ref_round, None),
            (None, Some(rv), Some(rr)) => {
                let removed = verify::extract(&self.state.msg_log, &self.cfg.cluster, rr, &rv);
                match self.derive(&rv, &rv.digest(), &removed) {
                    Some(v) => {
                        let ordered: Vec<TxId> = rv.txids().filter(|t| removed.contains(*t)).cloned().collect();
                        (v, None, Some(rr), Some(ordered))
                    }
                    None => (self.fresh_value(), None, None, None),
                }
            }
            _ => (self.fresh_value(), None, None, None),
        };
        let digest = value.digest();
        if vr.is_none() {
            self.exec_ok.insert(digest, true);
        }
        let payload = match removed {
            Some(removed) if self.cfg.hash_only_reproposal => {
                self.known.insert(digest, value);
                Payload::DigestOnly { removed }
            }
            _ => Payload::Full(value),
        };
        let msg = Propose { height: h, round, sender: self.cfg.id.clone(), digest, payload, vr, rr };
        self.broadcast(Message::Propose(msg), out);
    }

    fn on_timeout(&mut self, t: Timeout, out: &mut Vec<Output>) {
        if t.height != self.state.h || t.round != self.state.round {
            return;
        }
        match t.kind {
            TimerKind::Propose if self.state.step == Step::Propose => self.send_prevote(None, None, out),
            TimerKind::Prevote if self.state.step == Step::Prevote => self.on_timeout_prevote(out),
            TimerKind::Precommit => self.start_round(t.round + 1, out),
            _ => {}
        }
    }

    fn on_timeout_prevote(&mut self, out: &mut Vec<Output>) {
        let r = self.state.round;
        let q = self.quorum();
        let h = self.state.h;
        let target = self.state.msg_log.proposals(r).iter().find_map(|p| {
            let v = self.known.get(&p.digest)?;
            let ok = p.vr.is_none() && v.is_well_formed(h) && self.state.msg_log.prevoters(r, Some(&p.digest)).len() >= q;
            ok.then(|| (p.digest, v.clone()))
        });
        match target {
            Some((d, v)) => {
                let exclusions =
                    if self.eov() { BTreeMap::new() } else { verify::get_excluded_tx(&self.view(), r, &v) };
                if exclusions.is_empty() {
                    self.lock(d, v, out);
                }
                self.send_precommit(Some(d), exclusions, out);
            }
            None => self.send_precommit(None, BTreeMap::new(), out),
        }
    }

    fn lock(&mut self, d: Digest, v: Value, out: &mut Vec<Output>) {
        let round = self.state.round;
        self.state.locked_value = Some(v);
        self.state.locked_round = Some(round);
        self.locked_digest = Some(d);
        out.push(Output::Phase(PhaseEvent::Lock { height: self.state.h, round, digest: d }));
    }

    fn drive(&mut self, out: &mut Vec<Output>) {
        loop {
            let progressed = self.try_reconstruct()
                || self.try_commit(out)
                || self.try_round_skip(out)
                || self.try_propose(out)
                || self.try_conflicting(out)
                || self.try_lock(out)
                || self.try_rapid_removal(out)
                || self.try_nil_quorum(out)
                || self.try_prevote_timer(out)
                || self.try_valid_update(out)
                || self.try_precommit_timer(out)
                || self.try_examined(out)
                || self.try_endorsement_only(out);
            if !progressed {
                break;
            }
        }
    }

    fn try_reconstruct(&mut self) -> bool {
        let mut job = None;
        'scan: for rm in self.state.msg_log.rounds.values() {
            for p in &rm.proposals {
                let (Payload::DigestOnly { removed }, Some(rr)) = (&p.payload, p.rr) else { continue };
                if self.known.contains_key(&p.digest) {
                    continue;
                }
                for ex in self.view().examined(rr) {
                    let exd = ex.digest();
                    if !self.failed_derivations.contains(&(p.digest, exd)) {
                        job = Some((p.digest, ex.clone(), exd, removed.clone()));
                        break 'scan;
                    }
                }
            }
        }
        let Some((d, ex, exd, removed)) = job else { return false };
        let removed: BTreeSet<TxId> = removed.into_iter().collect();
        match self.derive(&ex, &exd, &removed) {
            Some(v) if v.digest() == d => {
                self.known.insert(d, v);
                self.exec_ok.insert(d, true);
            }
            _ => {
                self.failed_derivations.insert((d, exd));
            }
        }
        true
    }

    fn try_commit(&mut self, out: &mut Vec<Output>) -> bool {
        let q = self.quorum();
        let h = self.state.h;
        let log = &self.state.msg_log;
        let found = log.rounds.iter().find_map(|(r, rm)| {
            rm.proposals.iter().find_map(|p| {
                let v = self.known.get(&p.digest)?;
                (v.is_well_formed(h) && log.precommitters(*r, Some(&p.digest), true).len() >= q).then(|| (*r, v.clone()))
            })
        });
        match found {
            Some((r, v)) => {
                self.decide(r, v, out);
                true
            }
            None => false,
        }
    }

    /// Walks the reference chain behind `v` and reports every dropped transaction.
    fn lineage(&self, round: Round, v: &Value) -> Vec<Removal> {
        let view = self.view();
        let thr = removal_threshold(&self.cfg.cluster);
        let mut removals = Vec::new();
        let mut cur = v.clone();
        let mut limit = round;
        loop {
            let d = cur.digest();
            let origin = self.state.msg_log.rounds.range(..=limit).rev().find_map(|(r, rm)| {
                rm.proposals.iter().find(|p| p.digest == d && p.vr.is_none()).map(|p| (*r, p.rr))
            });
            let Some((pr, Some(rr))) = origin else { break };
            if rr >= pr {
                break;
            }
            let Some(ex) = view.examined(rr).into_iter().find(|ex| verify::is_subsequence(&cur, ex)) else { break };
            let exd = ex.digest();
            let rec = view.record(rr, &exd);
            let counts = self.state.msg_log.suggestion_counts(rr, &exd);
            let kept: BTreeSet<&TxId> = cur.txids().collect();
            let mut step = Vec::new();
            for (tx, res) in ex.txs.iter().zip(&ex.exec_results) {
                if kept.contains(&tx.txid) {
                    continue;
                }
                let cause = match self.cfg.policies.classify(tx, res, &rec) {
                    TxStatus::Vetoed { .. } => RemovalCause::Veto,
                    _ => RemovalCause::Timeout,
                };
                let always = counts.get(&tx.txid).is_some_and(|c| c.always >= thr);
                let kind = if always { ExclusionKind::RemoveAlways } else { ExclusionKind::RemoveIfFirst };
                step.push(Removal { txid: tx.txid.clone(), round: rr, cause, kind });
            }
            removals.splice(0..0, step);
            cur = ex.clone();
            limit = rr;
        }
        removals
    }

    fn decide(&mut self, round: Round, v: Value, out: &mut Vec<Output>) {
        let h = self.state.h;
        let digest = v.digest();
        let removals = if self.eov() { Vec::new() } else { self.lineage(round, &v) };
        let mut gone: BTreeSet<TxId> = v.txids().cloned().collect();
        gone.extend(removals.iter().map(|r| r.txid.clone()));
        self.mempool.remove(&gone);

        if self.eov() {
            let block = EovBlock {
                height: h,
                proposer: self.cfg.cluster.proposer(h, round).clone(),
                txs: v.txs.clone(),
                rw: v.exec_results.clone(),
            };
            let record = eov_validate(&block);
            let committed: BTreeSet<&TxId> = record.committed_txids.iter().collect();
            let results: Vec<_> = v.exec_results.iter().filter(|r| committed.contains(&r.txid)).cloned().collect();
            self.world = apply_committed(&self.world, h, &results).expect("height tracks world version");
            if self.cfg.cluster.proposer(h + 1, 0) == &self.cfg.id {
                let aborted: BTreeSet<&TxId> = record.aborted_txids.iter().collect();
                self.mempool.push_front(v.txs.iter().filter(|t| aborted.contains(&t.txid)).cloned().collect());
            }
            out.push(Output::Abort(record));
        } else {
            self.world = apply_committed(&self.world, h, &v.exec_results).expect("height tracks world version");
        }
        out.push(Output::Decide(Decision { height: h, round, digest, value: v.clone(), removals }));

        let decision = std::mem::take(&mut self.state.decision);
        self.state = NodeState { h: h + 1, decision, ..NodeState::default() };
        self.state.decision.insert(h, v);
        self.known.clear();
        self.exec_ok.clear();
        self.failed_derivations.clear();
        self.malformed_rounds.clear();
        self.prevote_timer_armed.clear();
        self.precommit_timer_armed.clear();
        self.examined_seen.clear();
        self.endorsed_rounds.clear();
        self.locked_digest = None;

        self.start_round(0, out);
        let next = h + 1;
        for m in std::mem::take(&mut self.future) {
            match m.height() {
                x if x == next => self.insert_current(m),
                x if x > next => self.future.push(m),
                _ => {}
            }
        }
    }

    fn try_round_skip(&mut self, out: &mut Vec<Output>) -> bool {
        let need = removal_threshold(&self.cfg.cluster);
        let log = &self.state.msg_log;
        let target = log.rounds.range(self.state.round + 1..).rev().map(|(r, _)| *r).find(|r| log.senders(*r).len() >= need);
        match target {
            Some(r) => {
                self.start_round(r, out);
                true
            }
            None => false,
        }
    }

    fn try_propose(&mut self, out: &mut Vec<Output>) -> bool {
        if self.state.step != Step::Propose {
            return false;
        }
        let r = self.state.round;
        let h = self.state.h;
        if self.malformed_rounds.contains(&r) {
            self.send_prevote(None, None, out);
            return true;
        }
        enum Plan {
            Nil,
            Execute(Digest, Value),
            Requeued(Digest),
        }
        let q = self.quorum();
        let mut plan = None;
        for p in self.state.msg_log.proposals(r) {
            let Some(v) = self.known.get(&p.digest) else { continue };
            if !v.is_well_formed(h) {
                plan = Some(Plan::Nil);
                break;
            }
            let lock_matches = self.locked_digest == Some(p.digest);
            match p.vr {
                None => {
                    let gate1 = match p.rr {
                        None => self.state.ref_round.is_none(),
                        Some(rr) => rr < r && verify::verify_reference(&self.view(), rr, v),
                    };
                    if !gate1 {
                        continue;
                    }
                    let lock_ok = self.state.locked_round.is_none() || lock_matches;
                    plan = Some(if lock_ok { Plan::Execute(p.digest, v.clone()) } else { Plan::Nil });
                }
                Some(vr) => {
                    if vr >= r || self.state.msg_log.prevoters(vr, Some(&p.digest)).len() < q || !self.ve(p.rr, v) {
                        continue;
                    }
                    let lock_ok = self.state.locked_round.is_none_or(|lr| lr <= vr) || lock_matches;
                    plan = Some(if lock_ok { Plan::Requeued(p.digest) } else { Plan::Nil });
                }
            }
            break;
        }
        match plan {
            None => return false,
            Some(Plan::Nil) => self.send_prevote(None, None, out),
            Some(Plan::Requeued(d)) => self.send_prevote(Some(d), None, out),
            Some(Plan::Execute(d, v)) => {
                if self.eov() {
                    self.send_prevote(Some(d), None, out);
                } else if self.exec_check(&d, &v) {
                    let endorsements = self.endorsements_for(&v);
                    self.endorsed_rounds.insert(r);
                    self.send_prevote(Some(d), Some(endorsements), out);
                } else {
                    self.send_prevote(None, None, out);
                }
            }
        }
        true
    }

    fn try_conflicting(&mut self, out: &mut Vec<Output>) -> bool {
        if self.state.step == Step::Precommit {
            return false;
        }
        let r = self.state.round;
        if self.state.seen_proposals.get(&r).is_some_and(|s| s.len() >= 2) {
            self.send_precommit(None, BTreeMap::new(), out);
            return true;
        }
        false
    }

    /// Current-round proposals backed by a prevote quorum, with their values.
    fn quorum_backed(&self, r: Round) -> Vec<(Digest, Option<Round>, Option<Round>, Value)> {
        let q = self.quorum();
        let h = self.state.h;
        self.state
            .msg_log
            .proposals(r)
            .iter()
            .filter(|p| self.state.msg_log.prevoters(r, Some(&p.digest)).len() >= q)
            .filter_map(|p| {
                let v = self.known.get(&p.digest)?;
                v.is_well_formed(h).then(|| (p.digest, p.vr, p.rr, v.clone()))
            })
            .collect()
    }

    fn try_lock(&mut self, out: &mut Vec<Output>) -> bool {
        if self.state.step != Step::Prevote {
            return false;
        }
        let r = self.state.round;
        let found = self.quorum_backed(r).into_iter().find(|(_, _, rr, v)| self.ve(*rr, v) || self.ve(Some(r), v));
        match found {
            Some((d, _, _, v)) => {
                self.lock(d, v, out);
                self.send_precommit(Some(d), BTreeMap::new(), out);
                true
            }
            None => false,
        }
    }

    fn try_rapid_removal(&mut self, out: &mut Vec<Output>) -> bool {
        if self.eov() || self.state.step != Step::Prevote {
            return false;
        }
        let r = self.state.round;
        for (d, vr, _, v) in self.quorum_backed(r) {
            if vr.is_some() {
                continue;
            }
            let statuses = self.view().statuses(r, &v);
            let decided = statuses.iter().all(|s| *s != TxStatus::Pending);
            let any_veto = statuses.iter().any(|s| matches!(s, TxStatus::Vetoed { .. }));
            if decided && any_veto {
                let exclusions = v
                    .txids()
                    .zip(&statuses)
                    .filter_map(|(t, s)| match s {
                        TxStatus::Vetoed { always: true } => Some((t.clone(), ExclusionKind::RemoveAlways)),
                        TxStatus::Vetoed { always: false } => Some((t.clone(), ExclusionKind::RemoveIfFirst)),
                        _ => None,
                    })
                    .collect();
                self.send_precommit(Some(d), exclusions, out);
                return true;
            }
        }
        false
    }

    fn try_nil_quorum(&mut self, out: &mut Vec<Output>) -> bool {
        if self.state.step != Step::Prevote {
            return false;
        }
        if self.state.msg_log.prevoters(self.state.round, None).len() >= self.quorum() {
            self.send_precommit(None, BTreeMap::new(), out);
            return true;
        }
        false
    }

    fn try_prevote_timer(&mut self, out: &mut Vec<Output>) -> bool {
        let r = self.state.round;
        if self.state.step != Step::Prevote
            || self.prevote_timer_armed.contains(&r)
            || self.state.msg_log.prevoters_any(r).len() < self.quorum()
        {
            return false;
        }
        self.prevote_timer_armed.insert(r);
        self.schedule(TimerKind::Prevote, out);
        true
    }

    fn try_valid_update(&mut self, out: &mut Vec<Output>) -> bool {
        let rounds: Vec<Round> = self
            .state
            .msg_log
            .rounds
            .keys()
            .copied()
            .filter(|r| self.state.valid_round.is_none_or(|vr| *r > vr))
            .collect();
        for r in rounds.into_iter().rev() {
            for (d, _, rr, v) in self.quorum_backed(r) {
                let at_r = self.ve(Some(r), &v);
                if !(at_r || self.ve(rr, &v)) {
                    continue;
                }
                let ref_round = if at_r { Some(r) } else { rr };
                self.state.valid_value = Some(v);
                self.state.valid_round = Some(r);
                self.state.ref_round = ref_round;
                out.push(Output::Phase(PhaseEvent::Valid { height: self.state.h, round: r, digest: d, ref_round }));
                return true;
            }
        }
        false
    }

    fn try_precommit_timer(&mut self, out: &mut Vec<Output>) -> bool {
        let r = self.state.round;
        if self.precommit_timer_armed.contains(&r) || self.state.msg_log.precommitters_any(r).len() < self.quorum() {
            return false;
        }
        self.precommit_timer_armed.insert(r);
        self.schedule(TimerKind::Precommit, out);
        true
    }

    fn try_examined(&mut self, out: &mut Vec<Output>) -> bool {
        let q = self.quorum();
        let h = self.state.h;
        let log = &self.state.msg_log;
        let found = log.rounds.iter().find_map(|(r, rm)| {
            rm.proposals.iter().find_map(|p| {
                if self.examined_seen.contains(&(*r, p.digest)) || log.precommitters(*r, Some(&p.digest), false).len() < q {
                    return None;
                }
                let v = self.known.get(&p.digest)?;
                v.is_well_formed(h).then(|| (*r, p.digest, p.vr, v.clone()))
            })
        });
        let Some((r, d, vr, v)) = found else { return false };
        self.examined_seen.insert((r, d));
        let shorter = self.state.valid_round.is_none()
            && self.state.ref_value.as_ref().is_some_and(|rv| v.len() < rv.len());
        if vr.is_none() && (self.state.ref_round.is_none() || shorter) {
            self.state.ref_round = Some(r);
            let txids = v.txids().cloned().collect();
            self.state.ref_value = Some(v.clone());
            out.push(Output::Phase(PhaseEvent::RefUpdate { height: h, round: r, digest: d, txids }));
        }
        out.push(Output::Phase(PhaseEvent::Examined { height: h, round: r, digest: d, vr, value: v }));
        if r == self.state.round {
            self.start_round(r + 1, out);
        }
        true
    }

    fn try_endorsement_only(&mut self, out: &mut Vec<Output>) -> bool {
        if self.eov() {
            return false;
        }
        let h = self.state.h;
        let cur = self.state.round;
        let mut job = None;
        for (r, rm) in self.state.msg_log.rounds.range(..=cur) {
            if self.state.sent_endorsement_rounds.contains(r) || self.endorsed_rounds.contains(r) {
                continue;
            }
            if *r == cur && self.state.step == Step::Propose {
                continue;
            }
            for p in rm.proposals.iter().filter(|p| p.vr.is_none()) {
                let Some(v) = self.known.get(&p.digest) else { continue };
                if v.is_well_formed(h) && self.is_designated(v) {
                    job = Some((*r, p.digest, v.clone()));
                    break;
                }
            }
            if job.is_some() {
                break;
            }
        }
        let Some((r, d, v)) = job else { return false };
        self.state.sent_endorsement_rounds.insert(r);
        if self.exec_check(&d, &v) {
            let msg = Prevote {
                height: h,
                round: r,
                sender: self.cfg.id.clone(),
                digest: Some(d),
                endorsements: Some(self.endorsements_for(&v)),
                con: false,
            };
            self.broadcast(Message::Prevote(msg), out);
        }
        true
    }
}
