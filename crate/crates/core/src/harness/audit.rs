//! Offline checks over a recorded trace.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use super::scenario::Scenario;
use super::trace::{RunStatus, TraceBody, TraceError, TraceRecord};
use crate::consensus::{verify_endorsement, LogView, Message, MessageLog, PhaseEvent, Precommit, Protocol, Step};
use crate::policy::{aggregate_prevotes, PolicySet, TxStatus};
use crate::types::{removal_threshold, ClusterConfig, Digest, Height, NodeId, Round, Value};

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Outcome {
    Pass,
    Fail(String),
    NotApplicable(String),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Check {
    pub name: &'static str,
    pub outcome: Outcome,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AuditReport {
    pub checks: Vec<Check>,
}

impl AuditReport {
    pub fn get(&self, name: &str) -> Option<&Outcome> {
        self.checks.iter().find(|c| c.name == name).map(|c| &c.outcome)
    }

    /// Failures other than termination.
    pub fn invariant_failures(&self) -> Vec<&Check> {
        self.checks.iter().filter(|c| c.name != "termination" && matches!(c.outcome, Outcome::Fail(_))).collect()
    }

    pub fn terminated(&self) -> bool {
        self.get("termination") == Some(&Outcome::Pass)
    }

    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| !matches!(c.outcome, Outcome::Fail(_)))
    }
}

impl fmt::Display for AuditReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            match &c.outcome {
                Outcome::Pass => writeln!(f, "{}: PASS", c.name)?,
                Outcome::Fail(m) => writeln!(f, "{}: FAIL ({m})", c.name)?,
                Outcome::NotApplicable(m) => writeln!(f, "{}: NOT APPLICABLE ({m})", c.name)?,
            }
        }
        Ok(())
    }
}

#[derive(Default)]
struct HeightData {
    all: MessageLog,
    known: BTreeMap<Digest, Value>,
    /// Correct prevotes with their send times.
    correct_prevotes: Vec<(u64, crate::consensus::Prevote)>,
    correct_precommits: Vec<(u64, Precommit)>,
    round_start: BTreeMap<Round, u64>,
    examined: Vec<(Round, Digest, Value)>,
    proposals: Vec<crate::consensus::Propose>,
}

struct Ctx {
    scenario: Scenario,
    cluster: ClusterConfig,
    policies: PolicySet,
    correct: BTreeSet<NodeId>,
    heights: BTreeMap<Height, HeightData>,
    decisions: BTreeMap<Height, Vec<(NodeId, Round, Digest, Value)>>,
}

impl Ctx {
    fn view<'a>(&'a self, d: &'a HeightData) -> LogView<'a> {
        LogView { log: &d.all, cluster: &self.cluster, policies: &self.policies, known: &d.known }
    }

    fn endorsed_at_some_round(&self, d: &HeightData, upto: Round, v: &Value) -> bool {
        (0..=upto).any(|r| verify_endorsement(&self.view(d), Some(r), v))
    }

    fn each_tx_endorsed(&self, d: &HeightData, upto: Round, v: &Value) -> bool {
        let digest = v.digest();
        let view = self.view(d);
        v.txs.iter().zip(&v.exec_results).all(|(tx, res)| {
            (0..=upto).any(|r| self.policies.classify(tx, res, &view.record(r, &digest)) == TxStatus::Endorsed)
        })
    }
}

fn corrupt(message: impl Into<String>) -> TraceError {
    TraceError::Corrupt { line: 0, message: message.into() }
}

pub fn audit(trace: &[TraceRecord]) -> Result<AuditReport, TraceError> {
    let Some(TraceRecord { body: TraceBody::Header { scenario, .. }, .. }) = trace.first() else {
        return Err(corrupt("missing HEADER record"));
    };
    let scenario = (**scenario).clone();
    scenario.validate().map_err(|e| corrupt(format!("header scenario: {e}")))?;
    let cluster = scenario.cluster();
    let policies = PolicySet::new(scenario.policies.clone(), scenario.default_policy(), &cluster);
    let byz = scenario.byzantine();
    let correct: BTreeSet<NodeId> = cluster.node_ids.iter().filter(|n| !byz.contains(*n)).cloned().collect();
    let mut ctx = Ctx { scenario, cluster, policies, correct, heights: BTreeMap::new(), decisions: BTreeMap::new() };

    let mut status = None;
    let mut sends: BTreeMap<u64, NodeId> = BTreeMap::new();
    let mut delivered: BTreeMap<u64, BTreeSet<NodeId>> = BTreeMap::new();
    let mut late = Vec::new();
    let delta = ctx.scenario.sim.delta;
    let gst = ctx.scenario.sim.gst;

    for rec in &trace[1..] {
        let node = rec.node.clone();
        let is_correct = node.as_ref().is_some_and(|n| ctx.correct.contains(n));
        match &rec.body {
            TraceBody::Header { .. } => return Err(corrupt("second HEADER record")),
            TraceBody::End { status: s } => status = Some(*s),
            TraceBody::Send { msg_id, msg, .. } => {
                let author = node.ok_or_else(|| corrupt("SEND without node"))?;
                if msg.sender() != &author {
                    return Err(corrupt(format!("message {msg_id} sent by {author} but signed by {}", msg.sender())));
                }
                sends.insert(*msg_id, author);
                let d = ctx.heights.entry(msg.height()).or_default();
                match msg {
                    Message::Propose(p) => {
                        if let crate::consensus::Payload::Full(v) = &p.payload {
                            if v.digest() == p.digest {
                                d.known.insert(p.digest, v.clone());
                            }
                        }
                        d.proposals.push(p.clone());
                    }
                    Message::Prevote(p) if is_correct => d.correct_prevotes.push((rec.time, p.clone())),
                    Message::Precommit(p) if is_correct => d.correct_precommits.push((rec.time, p.clone())),
                    _ => {}
                }
                d.all.insert_unbounded(msg.clone());
            }
            TraceBody::Deliver { msg_id, from, sent_at } => {
                let to = node.ok_or_else(|| corrupt("DELIVER without node"))?;
                if !sends.contains_key(msg_id) {
                    return Err(corrupt(format!("delivery of unknown message {msg_id}")));
                }
                let both_correct = ctx.correct.contains(from) && ctx.correct.contains(&to);
                if both_correct && *sent_at >= gst && rec.time.saturating_sub(*sent_at) > delta {
                    late.push(format!("message {msg_id} {from}->{to} took {}", rec.time - sent_at));
                }
                delivered.entry(*msg_id).or_default().insert(to);
            }
            TraceBody::Phase { event } if is_correct => match event {
                PhaseEvent::Step { height, round, step: Step::Propose } => {
                    let d = ctx.heights.entry(*height).or_default();
                    let t = d.round_start.entry(*round).or_insert(rec.time);
                    *t = (*t).min(rec.time);
                }
                PhaseEvent::Examined { height, round, digest, value, .. } => {
                    let d = ctx.heights.entry(*height).or_default();
                    d.known.insert(*digest, value.clone());
                    d.examined.push((*round, *digest, value.clone()));
                }
                _ => {}
            },
            TraceBody::Decide { decision } if is_correct => {
                let d = ctx.heights.entry(decision.height).or_default();
                d.known.insert(decision.digest, decision.value.clone());
                ctx.decisions.entry(decision.height).or_default().push((
                    node.clone().expect("correct implies node"),
                    decision.round,
                    decision.digest,
                    decision.value.clone(),
                ));
            }
            _ => {}
        }
    }
    let status = status.ok_or_else(|| corrupt("missing END record"))?;

    let eov = ctx.scenario.mode == Protocol::Eov;
    let checks = vec![
        Check { name: "termination", outcome: termination(status) },
        Check { name: "agreement", outcome: agreement(&ctx) },
        Check {
            name: "safety_with_endorsement",
            outcome: if eov { na("no endorsement in eov mode") } else { safety_with_endorsement(&ctx) },
        },
        Check { name: "invariant_1", outcome: if eov { na("no endorsement in eov mode") } else { invariant_1(&ctx) } },
        Check { name: "invariant_2", outcome: if eov { na("no endorsement in eov mode") } else { invariant_2(&ctx) } },
        Check { name: "remove_only", outcome: remove_only(&ctx) },
        Check {
            name: "post_gst_delivery",
            outcome: if late.is_empty() { Outcome::Pass } else { Outcome::Fail(late[0].clone()) },
        },
        Check { name: "eventual_delivery", outcome: eventual_delivery(&ctx, status, &sends, &delivered) },
    ];
    Ok(AuditReport { checks })
}

fn na(why: &str) -> Outcome {
    Outcome::NotApplicable(why.to_owned())
}

fn termination(status: RunStatus) -> Outcome {
    match status {
        RunStatus::Completed => Outcome::Pass,
        RunStatus::MaxTimeExceeded => Outcome::Fail("MAX_TIME_EXCEEDED".into()),
    }
}

fn agreement(ctx: &Ctx) -> Outcome {
    for (h, ds) in &ctx.decisions {
        if let Some((n, _, d, _)) = ds.iter().find(|(_, _, d, _)| *d != ds[0].2) {
            return Outcome::Fail(format!("height {h}: {} decided {} but {n} decided {}", ds[0].0, ds[0].2.short(), d.short()));
        }
    }
    Outcome::Pass
}

fn safety_with_endorsement(ctx: &Ctx) -> Outcome {
    for (h, ds) in &ctx.decisions {
        let d = &ctx.heights[h];
        for (n, r, _, v) in ds {
            if !ctx.endorsed_at_some_round(d, *r, v) {
                return Outcome::Fail(format!("height {h}: value decided by {n} at round {r} is not properly endorsed"));
            }
        }
    }
    Outcome::Pass
}

fn invariant_1(ctx: &Ctx) -> Outcome {
    let thr = removal_threshold(&ctx.cluster);
    for (h, d) in &ctx.heights {
        for (r, digest, v) in &d.examined {
            if ctx.each_tx_endorsed(d, *r, v) {
                continue;
            }
            let counts = d.all.suggestion_counts(*r, digest);
            if counts.values().any(|c| c.any >= thr) {
                continue;
            }
            return Outcome::Fail(format!("height {h} round {r}: examined {} neither endorsed nor removable", digest.short()));
        }
    }
    Outcome::Pass
}

/// Post-GST rounds with a prevote timer of at least twice the delivery bound
/// `b`: no correct precommit may suggest removing a transaction whose correct
/// endorsements were sent at least `b` before that precommit and already
/// satisfy its policies.
fn invariant_2(ctx: &Ctx) -> Outcome {
    let sim = &ctx.scenario.sim;
    let bound = sim.delivery_bound();
    let timers = ctx.scenario.timers();
    let mut applicable = false;
    for (h, d) in &ctx.heights {
        for (t, pc) in &d.correct_precommits {
            let post_gst = d.round_start.get(&pc.round).is_some_and(|s| *s >= sim.gst);
            if !post_gst || timers.prevote.at(pc.round) < 2 * bound {
                continue;
            }
            applicable = true;
            let (Some(digest), false) = (pc.digest, pc.exclusions.is_empty()) else { continue };
            let Some(v) = d.known.get(&digest) else { continue };
            let timely: Vec<&crate::consensus::Prevote> = d
                .correct_prevotes
                .iter()
                .filter(|(st, p)| p.round == pc.round && p.digest == Some(digest) && st + bound <= *t)
                .map(|(_, p)| p)
                .collect();
            let rec = aggregate_prevotes(&timely);
            for (tx, res) in v.txs.iter().zip(&v.exec_results) {
                if pc.exclusions.contains_key(&tx.txid) && ctx.policies.classify(tx, res, &rec) == TxStatus::Endorsed {
                    return Outcome::Fail(format!(
                        "height {h} round {}: {} suggested removing {} although its endorsers had endorsed it",
                        pc.round, pc.sender, tx.txid
                    ));
                }
            }
        }
    }
    if applicable {
        Outcome::Pass
    } else {
        na("no round started after gst with prevote timeout >= twice the delivery bound")
    }
}

/// Derived proposals by correct proposers only drop transactions from an
/// examined value of their reference round.
fn remove_only(ctx: &Ctx) -> Outcome {
    for (h, d) in &ctx.heights {
        for p in d.proposals.iter().filter(|p| p.vr.is_none() && ctx.correct.contains(&p.sender)) {
            let Some(rr) = p.rr else { continue };
            let examined: Vec<&Value> = d.examined.iter().filter(|(r, _, _)| *r == rr).map(|(_, _, v)| v).collect();
            let ok = match &p.payload {
                crate::consensus::Payload::Full(v) => examined.iter().any(|ex| crate::consensus::is_subsequence(v, ex)),
                crate::consensus::Payload::DigestOnly { removed } => {
                    examined.iter().any(|ex| removed.iter().all(|t| ex.txids().any(|u| u == t)))
                }
            };
            if !examined.is_empty() && !ok {
                return Outcome::Fail(format!("height {h} round {}: proposal is not a reduction of round {rr}", p.round));
            }
        }
    }
    Outcome::Pass
}

fn eventual_delivery(
    ctx: &Ctx,
    status: RunStatus,
    sends: &BTreeMap<u64, NodeId>,
    delivered: &BTreeMap<u64, BTreeSet<NodeId>>,
) -> Outcome {
    if status != RunStatus::Completed {
        return na("run did not complete");
    }
    let empty = BTreeSet::new();
    for (id, author) in sends {
        let got = delivered.get(id).unwrap_or(&empty);
        let held_by_correct = ctx.correct.contains(author) || got.iter().any(|n| ctx.correct.contains(n));
        if !held_by_correct {
            continue;
        }
        if let Some(missing) = ctx.correct.iter().find(|n| *n != author && !got.contains(*n)) {
            return Outcome::Fail(format!("message {id} from {author} never reached {missing}"));
        }
    }
    Outcome::Pass
}
