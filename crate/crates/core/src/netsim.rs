//! Seeded discrete-event network: gossip, Δ/GST delays, timers, crashes and
//! the adversary hooks. One event loop, one RNG, no wall clock.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adversary::{intercept, AdversaryContext, AdversaryStrategy, Release, Route};
use crate::consensus::{Input, Message, Node, Output, TimerKind, Timeout};
use crate::harness::trace::{RunStatus, TraceBody, TraceRecord};
use crate::types::{ClusterConfig, Height, NodeId, Round};

/// Uniform delay in `min..=max` ticks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DelayRange {
    pub min: u64,
    pub max: u64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fanout {
    #[default]
    All,
    /// `⌈log2 n⌉` random peers per hop; the rest get a lazy copy one Δ later.
    Log2n,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinkDirection {
    Outgoing,
    Incoming,
    #[default]
    Both,
}

/// Messages to or from `node` sent in `[from, until)` arrive no earlier than
/// `until` plus a post-GST delay.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlowLink {
    pub node: NodeId,
    pub from: u64,
    pub until: u64,
    #[serde(default)]
    pub direction: LinkDirection,
}

impl SlowLink {
    fn applies(&self, from: &NodeId, to: &NodeId, at: u64) -> bool {
        let dir = match self.direction {
            LinkDirection::Outgoing => from == &self.node,
            LinkDirection::Incoming => to == &self.node,
            LinkDirection::Both => from == &self.node || to == &self.node,
        };
        dir && (self.from..self.until).contains(&at)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub delta: u64,
    pub gst: u64,
    pub pre_gst_delay: DelayRange,
    pub post_gst_delay: DelayRange,
    pub gossip_fanout: Fanout,
    pub duplicate_suppression: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_sim_time: Option<u64>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub slow_links: Vec<SlowLink>,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            delta: 100,
            gst: 0,
            pre_gst_delay: DelayRange { min: 1, max: 400 },
            post_gst_delay: DelayRange { min: 1, max: 100 },
            gossip_fanout: Fanout::All,
            duplicate_suppression: true,
            max_sim_time: None,
            slow_links: Vec::new(),
        }
    }
}

impl SimConfig {
    /// Longest post-GST time from a correct author to every correct node.
    /// Under `Log2n` the copies to non-sampled nodes leave Δ late, so it is 2Δ.
    pub fn delivery_bound(&self) -> u64 {
        match self.gossip_fanout {
            Fanout::All => self.delta,
            Fanout::Log2n => 2 * self.delta,
        }
    }

    pub fn validate(&self, cluster: &ClusterConfig) -> Result<(), (String, String)> {
        let err = |p: &str, m: &str| Err((p.to_owned(), m.to_owned()));
        if self.delta == 0 {
            return err("delta", "must be positive");
        }
        let post = self.post_gst_delay;
        if post.min == 0 || post.min > post.max || post.max > self.delta {
            return err("post_gst_delay", "need 1 <= min <= max <= delta");
        }
        let pre = self.pre_gst_delay;
        if pre.min == 0 || pre.min > pre.max {
            return err("pre_gst_delay", "need 1 <= min <= max");
        }
        for (i, l) in self.slow_links.iter().enumerate() {
            if !cluster.contains(&l.node) {
                return Err((format!("slow_links[{i}].node"), format!("unknown node {}", l.node)));
            }
            if l.from > l.until || l.until > self.gst {
                return Err((format!("slow_links[{i}]"), "need from <= until <= gst".into()));
            }
        }
        Ok(())
    }
}

/// `⌈log2 n⌉`, the per-hop target count under [`Fanout::Log2n`].
pub fn log2_fanout(n: usize) -> usize {
    if n <= 1 {
        0
    } else {
        (usize::BITS - (n - 1).leading_zeros()) as usize
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum SimEvent {
    Start(usize),
    Crash(usize),
    Deliver { to: usize, msg_id: u64, from: usize, sent_at: u64 },
    Timer { node: usize, timeout: Timeout },
}

impl SimEvent {
    /// Tie-break at equal times: starts and crashes, then deliveries, then timers.
    fn class(&self) -> u8 {
        match self {
            SimEvent::Start(_) | SimEvent::Crash(_) => 0,
            SimEvent::Deliver { .. } => 1,
            SimEvent::Timer { .. } => 2,
        }
    }
}

struct Held {
    from: usize,
    msg: Message,
    release: Release,
    since: u64,
}

/// Everything a finished run hands back.
pub struct SimOutcome {
    pub status: RunStatus,
    pub end_time: u64,
    pub trace: Vec<TraceRecord>,
    pub nodes: Vec<Node>,
}

pub struct Simulation {
    cfg: SimConfig,
    rng: ChaCha8Rng,
    ids: Vec<NodeId>,
    nodes: Vec<Node>,
    strategies: Vec<Vec<AdversaryStrategy>>,
    byzantine: Vec<bool>,
    crashed: Vec<bool>,
    queue: BTreeMap<(u64, u8, u64), SimEvent>,
    seq: u64,
    now: u64,
    msgs: Vec<Message>,
    seen: Vec<HashSet<u64>>,
    busy_until: Vec<u64>,
    prevote_deadlines: BTreeMap<(Height, Round), BTreeMap<usize, u64>>,
    held: Vec<Held>,
    holds: HashMap<(usize, u64), u64>,
    decided: BTreeSet<Height>,
    trace: Vec<TraceRecord>,
    target_heights: Height,
    max_time: u64,
}

impl Simulation {
    /// `nodes` must follow `ClusterConfig::node_ids` order. Strategies are
    /// keyed by node; nodes without any are correct.
    pub fn new(
        cfg: SimConfig,
        seed: u64,
        nodes: Vec<Node>,
        strategies: BTreeMap<NodeId, Vec<AdversaryStrategy>>,
        target_heights: Height,
        max_time: u64,
        trace: Vec<TraceRecord>,
    ) -> Self {
        let ids: Vec<NodeId> = nodes.iter().map(|n| n.id().clone()).collect();
        let n = ids.len();
        let strategies: Vec<Vec<AdversaryStrategy>> =
            ids.iter().map(|id| strategies.get(id).cloned().unwrap_or_default()).collect();
        let byzantine = ids.iter().zip(&strategies).map(|(_, s)| !s.is_empty()).collect();
        let mut sim = Self {
            cfg,
            rng: ChaCha8Rng::seed_from_u64(seed),
            ids,
            nodes,
            strategies,
            byzantine,
            crashed: vec![false; n],
            queue: BTreeMap::new(),
            seq: 0,
            now: 0,
            msgs: Vec::new(),
            seen: vec![HashSet::new(); n],
            busy_until: vec![0; n],
            prevote_deadlines: BTreeMap::new(),
            held: Vec::new(),
            holds: HashMap::new(),
            decided: BTreeSet::new(),
            trace,
            target_heights,
            max_time,
        };
        for i in 0..n {
            if let Some(at) = sim.strategies[i].iter().find_map(|s| s.crash_time()) {
                sim.push(at, SimEvent::Crash(i));
            }
        }
        for i in 0..n {
            sim.push(0, SimEvent::Start(i));
        }
        sim
    }

    fn push(&mut self, at: u64, ev: SimEvent) {
        self.seq += 1;
        self.queue.insert((at, ev.class(), self.seq), ev);
    }

    fn record(&mut self, time: u64, node: Option<usize>, body: TraceBody) {
        let node = node.map(|i| self.ids[i].clone());
        self.trace.push(TraceRecord { time, node, body });
    }

    fn is_correct(&self, i: usize) -> bool {
        !self.byzantine[i]
    }

    fn done(&self) -> bool {
        (0..self.nodes.len()).filter(|i| self.is_correct(*i)).all(|i| self.nodes[i].state().h >= self.target_heights)
    }

    pub fn run(mut self) -> SimOutcome {
        let status = loop {
            if self.done() {
                break RunStatus::Completed;
            }
            let Some((&(at, _, _), _)) = self.queue.first_key_value() else { break RunStatus::MaxTimeExceeded };
            if at > self.max_time {
                break RunStatus::MaxTimeExceeded;
            }
            let (_, ev) = self.queue.pop_first().expect("peeked");
            self.now = at;
            self.step(ev);
            self.release_held();
        };
        let end_time = self.now;
        if status == RunStatus::Completed {
            self.drain();
        }
        self.record(end_time, None, TraceBody::End { status });
        SimOutcome { status, end_time, trace: self.trace, nodes: self.nodes }
    }

    /// Lets gossip already in flight finish without waking the nodes, so the
    /// trace shows where every message ended up.
    fn drain(&mut self) {
        self.queue.retain(|_, ev| matches!(ev, SimEvent::Deliver { .. }));
        while let Some(((at, _, _), ev)) = self.queue.pop_first() {
            self.now = at;
            if let SimEvent::Deliver { to, msg_id, from, sent_at } = ev {
                self.receive(to, msg_id, from, sent_at, false);
            }
        }
    }

    fn step(&mut self, ev: SimEvent) {
        match ev {
            SimEvent::Start(i) => {
                if !self.crashed[i] {
                    let out = self.nodes[i].handle(Input::Start);
                    self.apply(i, out);
                }
            }
            SimEvent::Crash(i) => {
                self.crashed[i] = true;
                self.record(self.now, Some(i), TraceBody::Crash);
            }
            SimEvent::Deliver { to, msg_id, from, sent_at } => self.receive(to, msg_id, from, sent_at, true),
            SimEvent::Timer { node, timeout } => {
                if self.crashed[node] {
                    return;
                }
                let st = self.nodes[node].state();
                if st.h == timeout.height && st.round == timeout.round {
                    self.record(self.now, Some(node), TraceBody::Timer { timeout });
                }
                let out = self.nodes[node].handle(Input::Timeout(timeout));
                self.apply(node, out);
            }
        }
    }

    fn receive(&mut self, to: usize, msg_id: u64, from: usize, sent_at: u64, wake: bool) {
        if self.crashed[to] {
            return;
        }
        let first = self.seen[to].insert(msg_id);
        if first {
            self.record(self.now, Some(to), TraceBody::Deliver { msg_id, from: self.ids[from].clone(), sent_at });
            if self.is_correct(to) {
                self.gossip_out(to, msg_id, self.now);
            }
        }
        if wake && (first || !self.cfg.duplicate_suppression) {
            let msg = self.msgs[msg_id as usize].clone();
            let out = self.nodes[to].handle(Input::Deliver(msg));
            self.apply(to, out);
        }
    }

    fn apply(&mut self, i: usize, out: Vec<Output>) {
        let mut emit = self.now.max(self.busy_until[i]);
        for o in &out {
            if let Output::Busy(t) = o {
                emit += t;
            }
        }
        self.busy_until[i] = emit;
        for o in out {
            match o {
                Output::Busy(_) => {}
                Output::Broadcast(msg) => self.send_from(i, msg, emit),
                Output::Timer { timeout, after } => {
                    let at = emit + after;
                    if timeout.kind == TimerKind::Prevote && self.is_correct(i) {
                        self.prevote_deadlines.entry((timeout.height, timeout.round)).or_default().insert(i, at);
                    }
                    self.push(at, SimEvent::Timer { node: i, timeout });
                }
                Output::Phase(event) => self.record(emit, Some(i), TraceBody::Phase { event }),
                Output::Abort(record) => self.record(emit, Some(i), TraceBody::Abort { record }),
                Output::Decide(decision) => {
                    let h = decision.height;
                    let removals = decision.removals.clone();
                    self.record(emit, Some(i), TraceBody::Decide { decision });
                    if self.decided.insert(h) {
                        for removal in removals {
                            self.record(emit, Some(i), TraceBody::Remove { height: h, removal });
                        }
                    }
                }
            }
        }
    }

    fn send_from(&mut self, i: usize, msg: Message, at: u64) {
        if !self.byzantine[i] {
            self.dispatch(i, msg, at, None);
            return;
        }
        let correct: Vec<NodeId> = (0..self.ids.len()).filter(|j| self.is_correct(*j)).map(|j| self.ids[j].clone()).collect();
        let ctx = AdversaryContext { me: &self.ids[i], nodes: &self.ids, correct: &correct };
        let plans = intercept(&self.strategies[i], msg, &ctx);
        let mut sent = Vec::new();
        let mut withheld = Vec::new();
        for p in plans {
            match p.route {
                Route::Gossip => sent.push(self.dispatch(i, p.msg, at, None)),
                Route::Direct(t) => sent.push(self.dispatch(i, p.msg, at, Some(t))),
                Route::Hold(release) => {
                    if let Release::AfterPrevoteTimer { to, .. } = &release {
                        withheld.push(to.clone());
                    }
                    self.held.push(Held { from: i, msg: p.msg, release, since: at });
                }
            }
        }
        // Copies relayed by others must not outrun the withheld one before GST.
        if at < self.cfg.gst {
            let until = self.cfg.gst + self.cfg.post_gst_delay.max;
            for to in withheld {
                let j = self.index(&to);
                for id in &sent {
                    self.holds.insert((j, *id), until);
                }
            }
        }
    }

    fn index(&self, id: &NodeId) -> usize {
        self.ids.iter().position(|x| x == id).expect("known node")
    }

    /// Registers a new message authored by `i` and sends its first hop.
    fn dispatch(&mut self, i: usize, msg: Message, at: u64, targets: Option<Vec<NodeId>>) -> u64 {
        let id = self.register(i, msg, at, targets.clone());
        match targets {
            None => self.gossip_out(i, id, at),
            Some(t) => {
                for to in t {
                    let j = self.index(&to);
                    if j != i {
                        self.hop(i, j, id, at);
                    }
                }
            }
        }
        id
    }

    fn register(&mut self, i: usize, msg: Message, at: u64, targets: Option<Vec<NodeId>>) -> u64 {
        let id = self.msgs.len() as u64;
        self.msgs.push(msg.clone());
        self.seen[i].insert(id);
        self.record(at, Some(i), TraceBody::Send { msg_id: id, msg, targets });
        id
    }

    fn gossip_out(&mut self, i: usize, id: u64, at: u64) {
        let mut others: Vec<usize> = (0..self.ids.len()).filter(|j| *j != i).collect();
        match self.cfg.gossip_fanout {
            Fanout::All => {
                for j in others {
                    self.hop(i, j, id, at);
                }
            }
            Fanout::Log2n => {
                others.shuffle(&mut self.rng);
                let k = log2_fanout(self.ids.len());
                for (x, j) in others.into_iter().enumerate() {
                    let send = if x < k { at } else { at + self.cfg.delta };
                    self.hop(i, j, id, send);
                }
            }
        }
    }

    fn sample(&mut self, r: DelayRange) -> u64 {
        self.rng.random_range(r.min..=r.max)
    }

    fn hop(&mut self, from: usize, to: usize, id: u64, sent_at: u64) {
        let gst = self.cfg.gst;
        let mut arrival = if sent_at >= gst {
            sent_at + self.sample(self.cfg.post_gst_delay)
        } else {
            let pre = sent_at + self.sample(self.cfg.pre_gst_delay);
            pre.min(gst + self.sample(self.cfg.post_gst_delay))
        };
        let slow = self.cfg.slow_links.iter().filter(|l| l.applies(&self.ids[from], &self.ids[to], sent_at)).map(|l| l.until).max();
        if let Some(until) = slow {
            arrival = arrival.max(until + self.sample(self.cfg.post_gst_delay));
        }
        if sent_at < gst {
            if let Some(t) = self.holds.get(&(to, id)) {
                arrival = arrival.max(*t);
            }
        }
        self.push(arrival, SimEvent::Deliver { to, msg_id: id, from, sent_at });
    }

    /// Position of node `i` as (height, round).
    fn position(&self, i: usize) -> (Height, Round) {
        let st = self.nodes[i].state();
        (st.h, st.round)
    }

    fn release_held(&mut self) {
        if self.held.is_empty() {
            return;
        }
        let fallback = 20 * self.cfg.delta;
        let held = std::mem::take(&mut self.held);
        for h in held {
            match h.release.clone() {
                Release::LastMoment { height, round, count } => {
                    let correct: Vec<usize> = (0..self.ids.len()).filter(|j| self.is_correct(*j) && !self.crashed[*j]).collect();
                    if correct.iter().all(|j| self.position(*j) > (height, round)) {
                        continue;
                    }
                    let mut upcoming: Vec<(u64, usize)> = self
                        .prevote_deadlines
                        .get(&(height, round))
                        .map(|m| m.iter().filter(|(_, dl)| **dl > self.now).map(|(j, dl)| (*dl, *j)).collect())
                        .unwrap_or_default();
                    if upcoming.len() < count {
                        self.held.push(h);
                        continue;
                    }
                    upcoming.sort();
                    upcoming.truncate(count);
                    let targets: Vec<NodeId> = upcoming.iter().map(|(_, j)| self.ids[*j].clone()).collect();
                    let id = self.register(h.from, h.msg, self.now, Some(targets));
                    for (dl, j) in &upcoming {
                        let at = self.now.max(dl - 1);
                        self.push(at, SimEvent::Deliver { to: *j, msg_id: id, from: h.from, sent_at: self.now });
                    }
                    if self.now < self.cfg.gst {
                        let until = self.cfg.gst + self.cfg.post_gst_delay.max;
                        for j in correct.into_iter().filter(|j| upcoming.iter().all(|(_, t)| t != j)) {
                            self.holds.insert((j, id), until);
                        }
                    }
                }
                Release::AfterPrevoteTimer { to, height, round, .. } => {
                    let j = self.index(&to);
                    let deadline = self.prevote_deadlines.get(&(height, round)).and_then(|m| m.get(&j)).copied();
                    let at = match deadline {
                        Some(dl) => Some(self.now.max(dl + 1)),
                        None if self.position(j) > (height, round) || self.now >= h.since + fallback => Some(self.now),
                        None => None,
                    };
                    match at {
                        Some(at) => {
                            let id = self.register(h.from, h.msg, self.now, Some(vec![to]));
                            self.push(at, SimEvent::Deliver { to: j, msg_id: id, from: h.from, sent_at: self.now });
                        }
                        None => self.held.push(h),
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    use crate::consensus::NodeConfig;
    use crate::execution::WorldState;
    use crate::types::Transaction;

    #[test]
    fn fanout_sizes() {
        assert_eq!(log2_fanout(4), 2);
        assert_eq!(log2_fanout(10), 4);
        assert_eq!(log2_fanout(7), 3);
        assert_eq!(log2_fanout(1), 0);
    }

    #[test]
    fn config_validation() {
        let c = ClusterConfig::with_default_ids(4, 1).unwrap();
        assert!(SimConfig::default().validate(&c).is_ok());
        let bad = SimConfig { post_gst_delay: DelayRange { min: 1, max: 101 }, ..Default::default() };
        assert_eq!(bad.validate(&c).unwrap_err().0, "post_gst_delay");
        let bad = SimConfig {
            slow_links: vec![SlowLink { node: NodeId::from("n3"), from: 0, until: 50, direction: LinkDirection::Both }],
            ..Default::default()
        };
        assert!(bad.validate(&c).is_err(), "slow link past gst");
    }

    #[test]
    fn equal_time_order() {
        let t = Timeout { kind: TimerKind::Propose, height: 0, round: 0 };
        let d = SimEvent::Deliver { to: 0, msg_id: 0, from: 1, sent_at: 0 };
        assert!(d.class() < SimEvent::Timer { node: 0, timeout: t }.class());
    }

    fn cluster_nodes(n: usize, f: usize) -> Vec<Node> {
        let cluster = ClusterConfig::with_default_ids(n, f).unwrap();
        let txs: Vec<Transaction> = (0..4).map(|i| Transaction::transfer(&format!("t{i}"), &format!("a{i}"), "sink", 1)).collect();
        let genesis = WorldState::genesis((0..4).map(|i| (format!("a{i}").as_str().into(), 10)).collect());
        cluster
            .node_ids
            .iter()
            .map(|id| {
                let cfg = Arc::new(NodeConfig::new(id.clone(), cluster.clone(), 100));
                Node::new(cfg, genesis.clone(), txs.clone())
            })
            .collect()
    }

    fn run(cfg: SimConfig, seed: u64, heights: Height) -> SimOutcome {
        let max = cfg.gst + 1000 * cfg.delta;
        Simulation::new(cfg, seed, cluster_nodes(4, 1), BTreeMap::new(), heights, max, Vec::new()).run()
    }

    #[test]
    fn happy_path_commits_and_is_deterministic() {
        let a = run(SimConfig::default(), 3, 2);
        assert_eq!(a.status, RunStatus::Completed);
        let b = run(SimConfig::default(), 3, 2);
        assert_eq!(a.trace, b.trace);
    }

    #[test]
    fn post_gst_latency_is_bounded() {
        let cfg = SimConfig { gst: 700, ..Default::default() };
        let out = run(cfg, 11, 2);
        assert_eq!(out.status, RunStatus::Completed);
        for r in &out.trace {
            if let TraceBody::Deliver { sent_at, .. } = r.body {
                if sent_at >= 700 {
                    assert!(r.time - sent_at <= 100);
                } else {
                    assert!(r.time <= 800);
                }
            }
        }
    }

    #[test]
    fn log2n_gossip_reaches_everyone() {
        let cfg = SimConfig { gossip_fanout: Fanout::Log2n, ..Default::default() };
        let out = run(cfg, 5, 1);
        assert_eq!(out.status, RunStatus::Completed);
        let sends = out.trace.iter().filter(|r| matches!(r.body, TraceBody::Send { .. })).count();
        let delivers = out.trace.iter().filter(|r| matches!(r.body, TraceBody::Deliver { .. })).count();
        assert_eq!(delivers, 3 * sends);
    }
}
