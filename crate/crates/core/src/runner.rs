//! Executes a parsed scenario against a fresh network.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::ops::Range;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

use crate::actors::{
    Cks, Device, Kdc, Manufacturer, Node, Outcome, OutcomeKind, Outgoing, Phase, Role,
    ServiceProvider,
};
use crate::adversary::{Adversary, FakeCks, FakeSp, FakeUser, Impersonator, ScriptError};
use crate::crypto::{generate_keypair, AsymKeyPair, CryptoSuite, Digest};
use crate::registry::SpRecord;
use crate::scenario::{AttackSpec, FakeRole, Scenario, ScenarioStep, StepLine};
use crate::simnet::{EventKind, NetConfig, SimConfig, SimError, Simnet, TraceEvent};
use crate::wire::MessageTag;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RunError {
    #[error("line {line}: {source}")]
    Script { line: usize, source: ScriptError },
    #[error("line {line}: {source}")]
    Sim { line: usize, source: SimError },
    #[error("setup: {0}")]
    Setup(String),
}

/// An outcome that happened inside an actor without a frame, such as a
/// device refusing to start a flow.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LocalEvent {
    pub line: usize,
    pub tick: u64,
    pub actor: String,
    pub outcome: Outcome,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepSpan {
    pub line: usize,
    pub text: String,
    /// Indices into the trace produced while this step ran.
    pub events: Range<usize>,
}

pub struct Runner {
    scenario: Scenario,
    pub sim: Simnet,
    local: Vec<LocalEvent>,
    spans: Vec<StepSpan>,
}

/// Builds the network for `scn` and runs every step.
pub fn run(scn: &Scenario) -> Result<Runner, RunError> {
    let mut r = Runner::new(scn.clone())?;
    r.run_all()?;
    Ok(r)
}

fn keypairs(scn: &Scenario) -> BTreeMap<String, AsymKeyPair> {
    let mut rng = ChaCha20Rng::seed_from_u64(scn.settings.seed);
    rng.set_stream(4);
    scn.actors
        .iter()
        .filter(|a| matches!(a.role, Role::Kdc | Role::Cks))
        .map(|a| (a.id.clone(), generate_keypair(rng.gen(), &a.id)))
        .collect()
}

impl Runner {
    pub fn new(scenario: Scenario) -> Result<Self, RunError> {
        let s = &scenario.settings;
        let mut sim = Simnet::new(SimConfig {
            seed: s.seed,
            ttl: s.ttl,
            suite: CryptoSuite::new(s.crypto_mode, s.hash_alg),
            net: NetConfig {
                latency: s.latency,
                drop_rate: s.drop_rate,
                reorder_window: s.reorder,
            },
        });
        let keys = keypairs(&scenario);
        let first = |role| scenario.first(role).map(|a| a.id.clone());
        let pk = |id: &str| {
            keys.get(id)
                .map(|k| k.public.clone())
                .ok_or_else(|| RunError::Setup(format!("no key server `{id}`")))
        };
        let default_kdc = first(Role::Kdc).unwrap_or_default();
        let default_cks = first(Role::Cks).unwrap_or_default();
        for a in &scenario.actors {
            let cks = a.param("cks").unwrap_or(&default_cks).to_string();
            let node = match a.role {
                Role::Manufacturer => {
                    let kdc = a.param("kdc").unwrap_or(&default_kdc);
                    Node::Manufacturer(Manufacturer::new(&a.id, kdc, pk(kdc)?))
                }
                Role::Kdc => Node::Kdc(Kdc::new(keys[&a.id].clone(), &cks, pk(&cks)?)),
                Role::Cks => {
                    let kdc = a.param("kdc").unwrap_or(&default_kdc);
                    Node::Cks(Cks::new(keys[&a.id].clone(), kdc))
                }
                Role::Device => {
                    let machine = a.param("machine").expect("validated");
                    let dmn = a
                        .param("dmn")
                        .map(str::to_string)
                        .unwrap_or_else(|| format!("DMN-{machine}"));
                    Node::Device(Device::new(&a.id, machine, dmn, &cks, pk(&cks)?))
                }
                Role::ServiceProvider => {
                    let services: Vec<String> = a
                        .param("services")
                        .unwrap_or("")
                        .split(',')
                        .filter(|s| !s.is_empty())
                        .map(str::to_string)
                        .collect();
                    let rec = SpRecord {
                        sp_id: a.id.clone(),
                        services: services.iter().cloned().collect(),
                        nonce_last: None,
                    };
                    match sim.node_mut(&cks) {
                        Some(Node::Cks(c)) => c
                            .register_provider(rec)
                            .map_err(|e| RunError::Setup(e.to_string()))?,
                        _ => {
                            return Err(RunError::Setup(format!(
                                "sp {} needs a cks declared before it",
                                a.id
                            )))
                        }
                    }
                    Node::Provider(ServiceProvider::new(&a.id, services, &cks, pk(&cks)?))
                }
                Role::Adversary => unreachable!("not declarable"),
            };
            sim.add_node(node)
                .map_err(|e| RunError::Setup(e.to_string()))?;
        }
        sim.adversary = Adversary::new(keys.values().map(|k| k.public.clone()).collect());
        Ok(Self {
            scenario,
            sim,
            local: Vec::new(),
            spans: Vec::new(),
        })
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    pub fn trace(&self) -> &[TraceEvent] {
        self.sim.trace()
    }

    pub fn local_events(&self) -> &[LocalEvent] {
        &self.local
    }

    pub fn spans(&self) -> &[StepSpan] {
        &self.spans
    }

    pub fn device(&self, id: &str) -> Option<&Device> {
        match self.sim.node(id)? {
            Node::Device(d) => Some(d),
            _ => None,
        }
    }

    pub fn provider(&self, id: &str) -> Option<&ServiceProvider> {
        match self.sim.node(id)? {
            Node::Provider(p) => Some(p),
            _ => None,
        }
    }

    pub fn cks(&self) -> Option<&Cks> {
        self.sim.nodes().iter().find_map(|n| match n {
            Node::Cks(c) => Some(c),
            _ => None,
        })
    }

    pub fn kdc(&self) -> Option<&Kdc> {
        self.sim.nodes().iter().find_map(|n| match n {
            Node::Kdc(k) => Some(k),
            _ => None,
        })
    }

    pub fn manufacturer(&self, id: &str) -> Option<&Manufacturer> {
        match self.sim.node(id)? {
            Node::Manufacturer(m) => Some(m),
            _ => None,
        }
    }

    pub fn run_all(&mut self) -> Result<(), RunError> {
        for step in self.scenario.steps.clone() {
            self.execute(&step)?;
        }
        Ok(())
    }

    /// Runs one step, then drives the network until it is quiet.
    pub fn execute(&mut self, step: &StepLine) -> Result<(), RunError> {
        let start = self.sim.trace().len();
        let line = step.line;
        let result = self
            .dispatch(line, &step.step)
            .and_then(|()| self.settle(line));
        self.spans.push(StepSpan {
            line,
            text: step.text.clone(),
            events: start..self.sim.trace().len(),
        });
        result?;
        self.sell_inventory();
        Ok(())
    }

    /// Dispatches one step without driving the network, for callers that
    /// single-step `sim` themselves. No span is recorded.
    pub fn begin(&mut self, step: &StepLine) -> Result<(), RunError> {
        self.sell_inventory();
        self.dispatch(step.line, &step.step)
    }

    fn settle(&mut self, line: usize) -> Result<(), RunError> {
        let budget = self
            .scenario
            .settings
            .max_steps
            .saturating_sub(self.sim.steps());
        let res = if budget == 0 {
            match self.sim.pending() {
                0 => Ok(0),
                pending => Err(SimError::Livelock {
                    budget: self.scenario.settings.max_steps,
                    pending,
                }),
            }
        } else {
            self.sim.run_until_quiescent(budget)
        };
        let res = res.map_err(|e| match e {
            SimError::Livelock { pending, .. } => SimError::Livelock {
                budget: self.scenario.settings.max_steps,
                pending,
            },
            other => other,
        });
        if let Some(source) = self.sim.adversary.take_errors().into_iter().next() {
            return Err(RunError::Script { line, source });
        }
        res.map(|_| ())
            .map_err(|source| RunError::Sim { line, source })
    }

    fn sell_inventory(&mut self) {
        let wanted: Vec<(String, String)> = self
            .sim
            .nodes()
            .iter()
            .filter_map(|n| match n {
                Node::Device(d) if !d.is_provisioned() => {
                    Some((d.id().to_string(), d.machine_id().to_string()))
                }
                _ => None,
            })
            .collect();
        for (dev, machine) in wanted {
            let item = self.sim.nodes().iter().find_map(|n| match n {
                Node::Manufacturer(m) if m.inventory().iter().any(|i| i.machine_id == machine) => {
                    Some(m.id().to_string())
                }
                _ => None,
            });
            let Some(mfr) = item else { continue };
            let hw = match self.sim.node_mut(&mfr) {
                Some(Node::Manufacturer(m)) => m.sell(&machine),
                _ => None,
            };
            if let (Some(hw), Some(Node::Device(d))) = (hw, self.sim.node_mut(&dev)) {
                d.provision(hw).expect("machine ids match");
            }
        }
    }

    fn note(&mut self, line: usize, actor: &str, outcome: Outcome) {
        self.local.push(LocalEvent {
            line,
            tick: self.sim.now(),
            actor: actor.to_string(),
            outcome,
        });
    }

    fn send_from(&mut self, line: usize, actor: &str, r: Option<Result<Outgoing, Outcome>>) {
        match r.expect("validated actor") {
            Ok(out) => {
                self.sim.submit(out, actor, false);
            }
            Err(o) => self.note(line, actor, o),
        }
    }

    fn dispatch(&mut self, line: usize, step: &ScenarioStep) -> Result<(), RunError> {
        match step {
            ScenarioStep::RegisterDevice { devices, via } => {
                let mfr = match via {
                    Some(m) => m.clone(),
                    None => self
                        .scenario
                        .first(Role::Manufacturer)
                        .expect("validated")
                        .id
                        .clone(),
                };
                for dev in devices {
                    let (machine, dmn) = {
                        let d = self.device(dev).expect("validated");
                        (d.machine_id().to_string(), d.dmn().to_string())
                    };
                    let out = self
                        .sim
                        .act(&mfr, |n, ctx| match n {
                            Node::Manufacturer(m) => m.register_device(&machine, &dmn, ctx),
                            _ => unreachable!("validated role"),
                        })
                        .expect("validated actor");
                    self.sim.submit(out, &mfr, false);
                }
            }
            ScenarioStep::RegisterUser { device, user_id } => {
                let r = self.sim.act(device, |n, ctx| match n {
                    Node::Device(d) => d.begin_registration(user_id, ctx),
                    _ => unreachable!("validated role"),
                });
                self.send_from(line, device, r);
            }
            ScenarioStep::Connect { from, to } => {
                let target = match self.device(to) {
                    Some(d) => d.user_id().unwrap_or(to).to_string(),
                    None => to.clone(),
                };
                let r = self.sim.act(from, |n, ctx| match n {
                    Node::Device(d) => d.request_connection(&target, ctx),
                    _ => unreachable!("validated role"),
                });
                self.send_from(line, from, r);
            }
            ScenarioStep::RequestService {
                device,
                service,
                p2,
            } => {
                let r = self.sim.act(device, |n, ctx| {
                    let p2 = match p2 {
                        Some(p) => p.clone().into_bytes(),
                        None => hex::encode(ctx.values.fresh_passphrase()).into_bytes(),
                    };
                    match n {
                        Node::Device(d) => d.request_service(service, &p2, ctx),
                        _ => unreachable!("validated role"),
                    }
                });
                self.send_from(line, device, r);
            }
            ScenarioStep::AppMessage { from, to, text } => {
                let payload = text.as_bytes();
                let r = if self.provider(from).is_some() {
                    let peer = self
                        .device(to)
                        .and_then(Device::temp_id)
                        .unwrap_or(to)
                        .to_string();
                    self.sim.act(from, |n, ctx| match n {
                        Node::Provider(p) => p.send_app_data(&peer, payload, ctx),
                        _ => unreachable!("validated role"),
                    })
                } else {
                    let peer = match self.device(to) {
                        Some(d) => d.user_id().unwrap_or(to).to_string(),
                        None => to.clone(),
                    };
                    self.sim.act(from, |n, ctx| match n {
                        Node::Device(d) => d.send_app_data(&peer, to, payload, ctx),
                        _ => unreachable!("validated role"),
                    })
                };
                self.send_from(line, from, r);
            }
            ScenarioStep::Wait(ticks) => self.sim.advance(*ticks),
            ScenarioStep::Attack(spec) => self.attack(line, spec)?,
        }
        Ok(())
    }

    fn attack(&mut self, line: usize, spec: &AttackSpec) -> Result<(), RunError> {
        match spec {
            AttackSpec::Eavesdrop => Ok(()),
            AttackSpec::SynFlood => Err(RunError::Script {
                line,
                source: ScriptError::NotImplemented("syn-flood"),
            }),
            AttackSpec::Rule(rule) => self.sim.install_attack(rule.clone()).map_err(|e| match e {
                SimError::Script(source) => RunError::Script { line, source },
                source => RunError::Sim { line, source },
            }),
            AttackSpec::Impersonate { role, id, params } => {
                let cks = self.cks().expect("validated");
                let (cks_addr, cks_pk) = (cks.id().to_string(), cks.public_key().clone());
                let fake = match role {
                    FakeRole::Sp => Impersonator::Sp(FakeSp {
                        id: id.clone(),
                        cks_addr,
                        cks_pk,
                    }),
                    FakeRole::Cks => Impersonator::Cks(FakeCks {
                        id: id.clone(),
                        claimed_sp: params
                            .get("claim-sp")
                            .cloned()
                            .or_else(|| {
                                self.scenario
                                    .first(Role::ServiceProvider)
                                    .map(|a| a.id.clone())
                            })
                            .unwrap_or_default(),
                    }),
                    FakeRole::User => {
                        Impersonator::User(self.fake_user(line, id, params, cks_addr, cks_pk)?)
                    }
                };
                self.sim
                    .add_node(Node::Impersonator(fake))
                    .map_err(|source| RunError::Sim { line, source })?;
                let outs = self
                    .sim
                    .act(id, |n, ctx| match n {
                        Node::Impersonator(Impersonator::User(u)) => u.start(ctx),
                        _ => Vec::new(),
                    })
                    .unwrap_or_default();
                for out in outs {
                    self.sim.submit(out, id, true);
                }
                Ok(())
            }
        }
    }

    fn fake_user(
        &mut self,
        line: usize,
        id: &str,
        params: &BTreeMap<String, String>,
        cks_addr: String,
        cks_pk: crate::crypto::PublicKey,
    ) -> Result<FakeUser, RunError> {
        let bad = |msg: String| RunError::Script {
            line,
            source: ScriptError::Invalid(msg),
        };
        let like = match params.get("like") {
            Some(l) => Some(
                self.device(l)
                    .ok_or_else(|| bad(format!("like=`{l}` is not a device")))?
                    .clone(),
            ),
            None => None,
        };
        let machine_id = params
            .get("machine")
            .cloned()
            .or_else(|| like.as_ref().map(|d| d.machine_id().to_string()))
            .unwrap_or_else(|| format!("{id}-MACHINE"));
        let hash_len = self.sim.config().suite.hash("".as_bytes()).as_bytes().len();
        let mut token = match (params.get("token").map(String::as_str), &like) {
            (Some("random") | None, None) => {
                let mut b = vec![0u8; hash_len];
                self.sim.with_ctx(|ctx| ctx.coins.fill_bytes(&mut b));
                b
            }
            (Some("random"), Some(_)) => {
                return Err(bad("token=random conflicts with like=".into()))
            }
            (Some(h), _) => hex::decode(h).map_err(|e| bad(format!("token: {e}")))?,
            (None, Some(d)) => {
                let kdc = self
                    .kdc()
                    .ok_or_else(|| bad("no kdc to copy a token from".into()))?;
                kdc.log()
                    .get(d.machine_id())
                    .ok_or_else(|| bad(format!("{} has no issued token", d.id())))?
                    .token
                    .as_bytes()
                    .to_vec()
            }
        };
        if let Some(bit) = params.get("flip") {
            let bit: usize = bit.parse().map_err(|e| bad(format!("flip: {e}")))?;
            if bit >= token.len() * 8 {
                return Err(bad(format!(
                    "flip={bit} is outside a {}-bit token",
                    token.len() * 8
                )));
            }
            token[bit / 8] ^= 0x80 >> (bit % 8);
        }
        let token = Digest::from_bytes(&token)
            .ok_or_else(|| bad("token has an unsupported length".into()))?;
        let claimed_temp_id = match params.get("temp-id") {
            Some(t) => t.clone(),
            None => match like.as_ref().and_then(Device::temp_id) {
                Some(t) => t.to_string(),
                None => self.sim.with_ctx(|ctx| ctx.values.fresh_temp_id()),
            },
        };
        Ok(FakeUser {
            id: id.to_string(),
            cks_addr,
            cks_pk,
            machine_id,
            token,
            user_id: params
                .get("user")
                .cloned()
                .unwrap_or_else(|| id.to_lowercase()),
            target: params.get("target").cloned(),
            claimed_temp_id,
        })
    }

    /// Registry state of every honest node, keyed by node id.
    pub fn snapshot(&self) -> serde_json::Value {
        let mut map = serde_json::Map::new();
        for n in self.sim.nodes() {
            if !n.is_adversarial() {
                map.insert(n.id().to_string(), n.snapshot());
            }
        }
        serde_json::json!({
            "tick": self.sim.now(),
            "nodes": map,
        })
    }

    /// Human-readable timeline followed by a per-phase tally.
    pub fn summary(&self) -> String {
        let trace = self.sim.trace();
        let mut s = String::new();
        for span in &self.spans {
            let _ = writeln!(s, "line {}: {}", span.line, span.text);
            for ev in &trace[span.events.clone()] {
                let _ = writeln!(s, "  {}", describe(ev));
            }
            for l in self.local.iter().filter(|l| l.line == span.line) {
                let _ = writeln!(s, "  t={:<4} {} (local) {}", l.tick, l.actor, l.outcome);
            }
        }
        let _ = writeln!(s, "phases:");
        for (phase, t) in phase_tally(trace) {
            let _ = writeln!(
                s,
                "  {:<15} frames={} complete={} reject={} violation={} dropped={}",
                phase.as_str(),
                t.frames,
                t.complete,
                t.reject,
                t.violation,
                t.dropped
            );
        }
        s
    }
}

fn describe(ev: &TraceEvent) -> String {
    let tag = ev
        .payload()
        .ok()
        .and_then(|p| p.first().copied())
        .and_then(MessageTag::from_u8)
        .map_or("?", MessageTag::name);
    let kind = match ev.kind {
        EventKind::Delivered => "",
        EventKind::Dropped => " [dropped]",
        EventKind::Injected => " [injected]",
        EventKind::Undeliverable => " [undeliverable]",
    };
    format!(
        "t={:<4} #{:<3} {} -> {} {}{} {}",
        ev.tick,
        ev.seq,
        ev.from,
        ev.to,
        tag,
        kind,
        ev.outcome.as_deref().unwrap_or("")
    )
    .trim_end()
    .to_string()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PhaseTally {
    pub frames: usize,
    pub complete: usize,
    pub reject: usize,
    pub violation: usize,
    pub dropped: usize,
}

pub fn phase_of(tag: MessageTag) -> Option<Phase> {
    match tag.code() >> 4 {
        0 => Some(Phase::Initialization),
        1 => Some(Phase::Registration),
        2 => Some(Phase::Connection),
        3 | 4 => Some(Phase::Transaction),
        _ => None,
    }
}

pub fn phase_tally(trace: &[TraceEvent]) -> BTreeMap<Phase, PhaseTally> {
    let mut out: BTreeMap<Phase, PhaseTally> = Phase::ALL
        .iter()
        .map(|p| (*p, PhaseTally::default()))
        .collect();
    for ev in trace {
        let Some(phase) = ev
            .payload()
            .ok()
            .and_then(|p| p.first().copied())
            .and_then(MessageTag::from_u8)
            .and_then(phase_of)
        else {
            continue;
        };
        let t = out.get_mut(&phase).expect("all phases present");
        t.frames += 1;
        if ev.kind == EventKind::Dropped {
            t.dropped += 1;
        }
        match ev
            .outcome
            .as_deref()
            .and_then(|o| o.parse::<Outcome>().ok())
            .map(|o| o.kind())
        {
            Some(OutcomeKind::Complete) => t.complete += 1,
            Some(OutcomeKind::Reject) => t.reject += 1,
            Some(OutcomeKind::Violation) => t.violation += 1,
            _ => {}
        }
    }
    out
}
