//! Deterministic discrete-event network.
//!
//! Frames are queued by `(deliver_at, seq)`, so simultaneous deliveries keep
//! submission order. Open-channel frames pass the adversary tap at
//! submission; secure-channel frames bypass it.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::actors::{Ctx, Node, Outgoing};
use crate::adversary::{Adversary, AttackRule, Decision, ScriptError};
use crate::crypto::{CryptoSuite, Entropy};
use crate::registry::Ticks;
use crate::wire::{Channel, Frame};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventKind {
    Delivered,
    Dropped,
    Injected,
    Undeliverable,
}

/// One line of the transcript.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub seq: u64,
    pub tick: Ticks,
    pub from: String,
    pub to: String,
    pub channel: Channel,
    pub kind: EventKind,
    pub frame_hex: String,
    pub outcome: Option<String>,
}

impl TraceEvent {
    pub fn payload(&self) -> Result<Vec<u8>, hex::FromHexError> {
        hex::decode(&self.frame_hex)
    }
}

/// Serializes a trace as JSON Lines, one event per line.
pub fn to_jsonl(events: &[TraceEvent]) -> String {
    let mut out = String::new();
    for e in events {
        out.push_str(&serde_json::to_string(e).expect("trace events serialize"));
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SimError {
    #[error("step budget must be positive")]
    InvalidBudget,
    #[error("livelock: budget of {budget} steps exhausted with {pending} frames pending")]
    Livelock { budget: usize, pending: usize },
    #[error("duplicate node id `{0}`")]
    DuplicateNode(String),
    #[error(transparent)]
    Script(#[from] ScriptError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NetConfig {
    pub latency: Ticks,
    pub drop_rate: f64,
    /// Extra random latency in `0..=reorder_window` per frame.
    pub reorder_window: Ticks,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            latency: 1,
            drop_rate: 0.0,
            reorder_window: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimConfig {
    pub seed: u64,
    pub ttl: Ticks,
    pub suite: CryptoSuite,
    pub net: NetConfig,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            ttl: 100,
            suite: CryptoSuite::default(),
            net: NetConfig::default(),
        }
    }
}

#[derive(Debug, Clone)]
struct Queued {
    frame: Frame,
    injected: bool,
}

pub struct Simnet {
    cfg: SimConfig,
    now: Ticks,
    next_seq: u64,
    queue: BinaryHeap<Reverse<(Ticks, u64)>>,
    in_flight: BTreeMap<u64, Queued>,
    nodes: Vec<Node>,
    pub adversary: Adversary,
    trace: Vec<TraceEvent>,
    net_rng: ChaCha20Rng,
    values: Entropy,
    coins: Entropy,
    steps: usize,
}

impl fmt::Debug for Simnet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Simnet")
            .field("now", &self.now)
            .field("next_seq", &self.next_seq)
            .field("pending", &self.in_flight.len())
            .field(
                "nodes",
                &self.nodes.iter().map(Node::id).collect::<Vec<_>>(),
            )
            .finish()
    }
}

/// Sub-seeds for the independent random streams of one run.
fn stream_seed(seed: u64, stream: u64) -> u64 {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.gen()
}

impl Simnet {
    pub fn new(cfg: SimConfig) -> Self {
        Self {
            cfg,
            now: 0,
            next_seq: 0,
            queue: BinaryHeap::new(),
            in_flight: BTreeMap::new(),
            nodes: Vec::new(),
            adversary: Adversary::default(),
            trace: Vec::new(),
            net_rng: ChaCha20Rng::seed_from_u64(stream_seed(cfg.seed, 1)),
            values: Entropy::from_seed(stream_seed(cfg.seed, 2)),
            coins: Entropy::from_seed(stream_seed(cfg.seed, 3)),
            steps: 0,
        }
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    pub fn now(&self) -> Ticks {
        self.now
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn pending(&self) -> usize {
        self.in_flight.len()
    }

    pub fn trace(&self) -> &[TraceEvent] {
        &self.trace
    }

    pub fn add_node(&mut self, node: Node) -> Result<(), SimError> {
        if self.nodes.iter().any(|n| n.id() == node.id()) {
            return Err(SimError::DuplicateNode(node.id().to_string()));
        }
        self.nodes.push(node);
        Ok(())
    }

    pub fn node(&self, id: &str) -> Option<&Node> {
        self.nodes.iter().find(|n| n.id() == id)
    }

    pub fn node_mut(&mut self, id: &str) -> Option<&mut Node> {
        self.nodes.iter_mut().find(|n| n.id() == id)
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    fn resolve(&self, addr: &str) -> Option<usize> {
        self.nodes
            .iter()
            .position(|n| n.id() == addr)
            .or_else(|| self.nodes.iter().position(|n| n.answers_to(addr)))
    }

    /// Runs `f` against node `id` with a context at the current tick.
    pub fn act<T>(&mut self, id: &str, f: impl FnOnce(&mut Node, &mut Ctx<'_>) -> T) -> Option<T> {
        let i = self.nodes.iter().position(|n| n.id() == id)?;
        let mut ctx = Ctx {
            now: self.now,
            suite: self.cfg.suite,
            ttl: self.cfg.ttl,
            values: &mut self.values,
            coins: &mut self.coins,
        };
        Some(f(&mut self.nodes[i], &mut ctx))
    }

    /// Runs `f` with the run's random streams but no node, for harness-side
    /// draws such as an adversary's guesses.
    pub fn with_ctx<T>(&mut self, f: impl FnOnce(&mut Ctx<'_>) -> T) -> T {
        let mut ctx = Ctx {
            now: self.now,
            suite: self.cfg.suite,
            ttl: self.cfg.ttl,
            values: &mut self.values,
            coins: &mut self.coins,
        };
        f(&mut ctx)
    }

    /// Puts a frame on the wire; returns its seq.
    pub fn submit(&mut self, out: Outgoing, sender: &str, injected: bool) -> u64 {
        self.submit_delayed(out, sender, injected, 0)
    }

    fn submit_delayed(&mut self, out: Outgoing, sender: &str, injected: bool, delay: Ticks) -> u64 {
        let seq = self.next_seq;
        self.next_seq += 1;
        let frame = Frame {
            seq,
            from: out.from.unwrap_or_else(|| sender.to_string()),
            to: out.to,
            channel: out.channel,
            payload: out.payload,
        };
        let decision = if frame.channel == Channel::Open {
            self.adversary.observe(&frame, injected)
        } else {
            Decision::default()
        };
        let lost = !injected
            && self.cfg.net.drop_rate > 0.0
            && self.net_rng.gen::<f64>() < self.cfg.net.drop_rate;
        if decision.suppress || lost {
            self.record(&frame, EventKind::Dropped, None);
        } else {
            let jitter = if self.cfg.net.reorder_window > 0 {
                self.net_rng.gen_range(0..=self.cfg.net.reorder_window)
            } else {
                0
            };
            let at = self.now + self.cfg.net.latency + delay + jitter;
            self.queue.push(Reverse((at, seq)));
            self.in_flight.insert(seq, Queued { frame, injected });
        }
        self.apply_injections(decision.inject);
        seq
    }

    fn apply_injections(&mut self, inject: Vec<crate::adversary::Injection>) {
        for inj in inject {
            let out = Outgoing::open(inj.to, inj.payload).sent_as(inj.from.clone());
            self.submit_delayed(out, &inj.from, true, inj.delay);
        }
    }

    /// Arms an attack rule, applying it at once to an already observed target.
    pub fn install_attack(&mut self, rule: AttackRule) -> Result<(), SimError> {
        let d = self.adversary.install(rule)?;
        self.apply_injections(d.inject);
        Ok(())
    }

    fn record(&mut self, frame: &Frame, kind: EventKind, outcome: Option<String>) -> TraceEvent {
        let ev = TraceEvent {
            seq: frame.seq,
            tick: self.now,
            from: frame.from.clone(),
            to: frame.to.clone(),
            channel: frame.channel,
            kind,
            frame_hex: hex::encode(&frame.payload),
            outcome,
        };
        self.trace.push(ev.clone());
        ev
    }

    /// Delivers the next frame. `None` when the queue is empty.
    pub fn step(&mut self) -> Option<TraceEvent> {
        let Reverse((at, seq)) = self.queue.pop()?;
        let Queued { frame, injected } = self.in_flight.remove(&seq).expect("queued frame");
        self.now = self.now.max(at);
        self.steps += 1;
        let Some(i) = self.resolve(&frame.to) else {
            let kind = if injected {
                EventKind::Injected
            } else {
                EventKind::Undeliverable
            };
            return Some(self.record(&frame, kind, None));
        };
        let mut ctx = Ctx {
            now: self.now,
            suite: self.cfg.suite,
            ttl: self.cfg.ttl,
            values: &mut self.values,
            coins: &mut self.coins,
        };
        let node = &mut self.nodes[i];
        let step = node.handle(&frame, &mut ctx);
        let sender = node.id().to_string();
        let adversarial = node.is_adversarial();
        let kind = if injected {
            EventKind::Injected
        } else {
            EventKind::Delivered
        };
        let ev = self.record(&frame, kind, Some(step.outcome.to_string()));
        for out in step.out {
            self.submit(out, &sender, adversarial);
        }
        Some(ev)
    }

    /// Steps until the queue drains. Fails if `max_steps` deliveries do not
    /// suffice.
    pub fn run_until_quiescent(&mut self, max_steps: usize) -> Result<usize, SimError> {
        if max_steps == 0 {
            return Err(SimError::InvalidBudget);
        }
        let mut n = 0;
        while !self.queue.is_empty() {
            if n == max_steps {
                return Err(SimError::Livelock {
                    budget: max_steps,
                    pending: self.in_flight.len(),
                });
            }
            self.step();
            n += 1;
        }
        Ok(n)
    }

    /// Lets time pass with nothing in flight.
    pub fn advance(&mut self, ticks: Ticks) {
        self.now += ticks;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::actors::{Cks, Node};
    use crate::crypto::generate_keypair;

    fn net(cfg: SimConfig) -> Simnet {
        let mut sim = Simnet::new(cfg);
        sim.add_node(Node::Cks(Cks::new(generate_keypair(1, "CKS"), "KDC")))
            .unwrap();
        sim
    }

    fn junk(to: &str) -> Outgoing {
        Outgoing::open(to, vec![0x26, 0, 0, 0, 0])
    }

    #[test]
    fn same_tick_frames_deliver_in_seq_order() {
        let mut sim = net(SimConfig::default());
        let a = sim.submit(junk("CKS"), "X", false);
        let b = sim.submit(junk("CKS"), "X", false);
        assert_eq!(sim.step().unwrap().seq, a);
        assert_eq!(sim.step().unwrap().seq, b);
        assert!(sim.step().is_none());
        assert_eq!(sim.now(), 1);
    }

    #[test]
    fn unknown_addressee_is_undeliverable() {
        let mut sim = net(SimConfig::default());
        sim.submit(junk("nobody"), "X", false);
        let ev = sim.step().unwrap();
        assert_eq!(ev.kind, EventKind::Undeliverable);
        assert_eq!(ev.outcome, None);
    }

    #[test]
    fn zero_budget_is_rejected_and_exhaustion_reports_livelock() {
        let mut sim = net(SimConfig::default());
        assert_eq!(sim.run_until_quiescent(0), Err(SimError::InvalidBudget));
        for _ in 0..3 {
            sim.submit(junk("CKS"), "X", false);
        }
        assert_eq!(
            sim.run_until_quiescent(2),
            Err(SimError::Livelock {
                budget: 2,
                pending: 1
            })
        );
        assert_eq!(sim.run_until_quiescent(5), Ok(1));
        assert_eq!(net(SimConfig::default()).run_until_quiescent(1), Ok(0));
    }

    #[test]
    fn full_drop_rate_delivers_nothing() {
        let mut cfg = SimConfig::default();
        cfg.net.drop_rate = 1.0;
        let mut sim = net(cfg);
        for _ in 0..10 {
            sim.submit(junk("CKS"), "X", false);
        }
        assert_eq!(sim.run_until_quiescent(10), Ok(0));
        assert!(sim.trace().iter().all(|e| e.kind == EventKind::Dropped));
        assert_eq!(sim.trace().len(), 10);
    }

    #[test]
    fn secure_frames_bypass_the_tap() {
        let mut sim = net(SimConfig::default());
        sim.submit(Outgoing::secure("CKS", vec![0x26, 0, 0, 0, 0]), "X", false);
        sim.submit(junk("CKS"), "X", false);
        sim.run_until_quiescent(10).unwrap();
        assert_eq!(sim.adversary.knowledge.observed.len(), 1);
        assert_eq!(sim.adversary.knowledge.observed[0].channel, Channel::Open);
    }

    #[test]
    fn jsonl_round_trips() {
        let mut sim = net(SimConfig::default());
        sim.submit(junk("CKS"), "X", false);
        sim.run_until_quiescent(5).unwrap();
        let text = to_jsonl(sim.trace());
        let back: Vec<TraceEvent> = text
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(back, sim.trace());
        assert!(text.contains("\"kind\":\"delivered\""));
    }
}
