//! Line-oriented scenario files.
//!
//! ```text
//! # comment
//! seed: 42
//! ttl: 100
//! actor cks CKS
//! actor device U1 machine=M001 dmn=DMN-9
//! register-device U1
//! app-message U1 U2 "hello there"
//! attack replay msg=app-data nth=1 delay=150
//! ```
//!
//! Headers are `key: value`; every other non-blank line is an actor
//! declaration, a step, or an attack.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use thiserror::Error;

use crate::actors::Role;
use crate::adversary::{AttackAction, AttackRule, Selector};
use crate::crypto::{CryptoMode, HashAlg};
use crate::registry::Ticks;
use crate::wire::MessageTag;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("line {line}: {msg}")]
pub struct ParseError {
    pub line: usize,
    pub msg: String,
}

fn err<T>(line: usize, msg: impl Into<String>) -> Result<T, ParseError> {
    Err(ParseError {
        line,
        msg: msg.into(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub seed: u64,
    pub ttl: Ticks,
    pub crypto_mode: CryptoMode,
    pub hash_alg: HashAlg,
    pub latency: Ticks,
    pub drop_rate: f64,
    pub reorder: Ticks,
    pub max_steps: usize,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            seed: 0,
            ttl: 100,
            crypto_mode: CryptoMode::Transparent,
            hash_alg: HashAlg::Sha256,
            latency: 1,
            drop_rate: 0.0,
            reorder: 0,
            max_steps: 10_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActorDecl {
    pub line: usize,
    pub role: Role,
    pub id: String,
    pub params: BTreeMap<String, String>,
}

impl ActorDecl {
    pub fn param(&self, key: &str) -> Option<&str> {
        self.params.get(key).map(String::as_str)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FakeRole {
    User,
    Sp,
    Cks,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AttackSpec {
    Eavesdrop,
    Rule(AttackRule),
    Impersonate {
        role: FakeRole,
        id: String,
        params: BTreeMap<String, String>,
    },
    SynFlood,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ScenarioStep {
    RegisterDevice {
        devices: Vec<String>,
        via: Option<String>,
    },
    RegisterUser {
        device: String,
        user_id: String,
    },
    Connect {
        from: String,
        to: String,
    },
    RequestService {
        device: String,
        service: String,
        p2: Option<String>,
    },
    AppMessage {
        from: String,
        to: String,
        text: String,
    },
    Wait(Ticks),
    Attack(AttackSpec),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepLine {
    pub line: usize,
    pub text: String,
    pub step: ScenarioStep,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub settings: Settings,
    pub actors: Vec<ActorDecl>,
    pub steps: Vec<StepLine>,
}

impl Scenario {
    pub fn actor(&self, id: &str) -> Option<&ActorDecl> {
        self.actors.iter().find(|a| a.id == id)
    }

    pub fn first(&self, role: Role) -> Option<&ActorDecl> {
        self.actors.iter().find(|a| a.role == role)
    }

    pub fn parse(text: &str) -> Result<Self, ParseError> {
        let mut scn = Scenario {
            settings: Settings::default(),
            actors: Vec::new(),
            steps: Vec::new(),
        };
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let tokens = tokenize(raw).map_err(|msg| ParseError { line, msg })?;
            let Some(first) = tokens.first() else {
                continue;
            };
            if let Some(key) = first.strip_suffix(':') {
                let value = tokens[1..].join(" ");
                scn.header(line, key, &value)?;
                continue;
            }
            let args = &tokens[1..];
            match first.as_str() {
                "actor" => scn.actors.push(parse_actor(line, args)?),
                "attack" => scn.steps.push(StepLine {
                    line,
                    text: raw.trim().to_string(),
                    step: ScenarioStep::Attack(parse_attack(line, args)?),
                }),
                verb => scn.steps.push(StepLine {
                    line,
                    text: raw.trim().to_string(),
                    step: parse_step(line, verb, args)?,
                }),
            }
        }
        scn.validate()?;
        Ok(scn)
    }

    fn header(&mut self, line: usize, key: &str, value: &str) -> Result<(), ParseError> {
        let s = &mut self.settings;
        let bad = |e: &dyn fmt::Display| ParseError {
            line,
            msg: format!("header `{key}`: {e}"),
        };
        match key {
            "seed" => s.seed = value.parse().map_err(|e| bad(&e))?,
            "ttl" => s.ttl = value.parse().map_err(|e| bad(&e))?,
            "crypto-mode" => s.crypto_mode = value.parse().map_err(|e| bad(&e))?,
            "hash-alg" => s.hash_alg = value.parse().map_err(|e| bad(&e))?,
            "latency" => s.latency = value.parse().map_err(|e| bad(&e))?,
            "drop-rate" => s.drop_rate = value.parse().map_err(|e| bad(&e))?,
            "reorder" => s.reorder = value.parse().map_err(|e| bad(&e))?,
            "max-steps" => s.max_steps = value.parse().map_err(|e| bad(&e))?,
            "name" | "description" => {}
            _ => return err(line, format!("unknown header `{key}`")),
        }
        if key == "ttl" && s.ttl == 0 {
            return err(line, "ttl must be positive");
        }
        if key == "drop-rate" && !(0.0..=1.0).contains(&s.drop_rate) {
            return err(line, "drop-rate must be within [0, 1]");
        }
        Ok(())
    }

    fn validate(&self) -> Result<(), ParseError> {
        let mut ids = BTreeSet::new();
        for a in &self.actors {
            if !ids.insert(a.id.as_str()) {
                return err(a.line, format!("duplicate actor id `{}`", a.id));
            }
        }
        for role in [Role::Kdc, Role::Cks] {
            if self.actors.iter().filter(|a| a.role == role).count() > 1 {
                let a = self
                    .actors
                    .iter()
                    .rfind(|a| a.role == role)
                    .expect("counted");
                return err(
                    a.line,
                    format!("at most one {} is supported", role.as_str()),
                );
            }
        }
        let role_of = |id: &str| self.actor(id).map(|a| a.role);
        let expect = |line, id: &str, roles: &[Role]| -> Result<(), ParseError> {
            match role_of(id) {
                Some(r) if roles.contains(&r) => Ok(()),
                Some(r) => err(
                    line,
                    format!("`{id}` is a {}, not a {}", r.as_str(), roles[0].as_str()),
                ),
                None => err(line, format!("undeclared actor `{id}`")),
            }
        };
        for s in &self.steps {
            let line = s.line;
            match &s.step {
                ScenarioStep::RegisterDevice { devices, via } => {
                    for d in devices {
                        expect(line, d, &[Role::Device])?;
                    }
                    match via {
                        Some(m) => expect(line, m, &[Role::Manufacturer])?,
                        None if self.first(Role::Manufacturer).is_none() => {
                            return err(line, "no manufacturer declared")
                        }
                        None => {}
                    }
                }
                ScenarioStep::RegisterUser { device, .. } => expect(line, device, &[Role::Device])?,
                ScenarioStep::Connect { from, .. } => expect(line, from, &[Role::Device])?,
                ScenarioStep::RequestService { device, .. } => {
                    expect(line, device, &[Role::Device])?
                }
                ScenarioStep::AppMessage { from, to, .. } => {
                    let ends = [Role::Device, Role::ServiceProvider];
                    expect(line, from, &ends)?;
                    expect(line, to, &ends)?;
                    if role_of(from) == Some(Role::ServiceProvider)
                        && role_of(to) != Some(Role::Device)
                    {
                        return err(line, "a service provider can only message a device");
                    }
                }
                ScenarioStep::Attack(AttackSpec::Impersonate { id, .. }) => {
                    if role_of(id).is_some() {
                        return err(
                            line,
                            format!("impersonator id `{id}` clashes with an actor"),
                        );
                    }
                }
                ScenarioStep::Wait(_) | ScenarioStep::Attack(_) => {}
            }
        }
        let needs_cks = self
            .actors
            .iter()
            .any(|a| matches!(a.role, Role::Device | Role::ServiceProvider | Role::Kdc));
        if needs_cks && self.first(Role::Cks).is_none() {
            return err(0, "no cks declared");
        }
        if self.first(Role::Manufacturer).is_some() && self.first(Role::Kdc).is_none() {
            return err(0, "no kdc declared");
        }
        Ok(())
    }
}

/// Splits on whitespace; double quotes group, `\"` and `\\` escape inside
/// quotes, and `#` outside quotes starts a comment.
fn tokenize(line: &str) -> Result<Vec<String>, String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    let mut in_token = false;
    let mut chars = line.chars();
    while let Some(c) = chars.next() {
        match c {
            '#' => break,
            '"' => {
                in_token = true;
                loop {
                    match chars.next() {
                        Some('"') => break,
                        Some('\\') => match chars.next() {
                            Some(e @ ('"' | '\\')) => cur.push(e),
                            Some(e) => return Err(format!("unknown escape `\\{e}`")),
                            None => return Err("unterminated string".into()),
                        },
                        Some(ch) => cur.push(ch),
                        None => return Err("unterminated string".into()),
                    }
                }
            }
            c if c.is_whitespace() => {
                if in_token {
                    out.push(std::mem::take(&mut cur));
                    in_token = false;
                }
            }
            c => {
                in_token = true;
                cur.push(c);
            }
        }
    }
    if in_token {
        out.push(cur);
    }
    Ok(out)
}

fn split_params(
    line: usize,
    args: &[String],
) -> Result<(Vec<String>, BTreeMap<String, String>), ParseError> {
    let mut positional = Vec::new();
    let mut params = BTreeMap::new();
    for a in args {
        match a.split_once('=') {
            Some((k, v)) => {
                if params.insert(k.to_string(), v.to_string()).is_some() {
                    return err(line, format!("parameter `{k}` given twice"));
                }
            }
            None if params.is_empty() => positional.push(a.clone()),
            None => return err(line, format!("positional argument `{a}` after parameters")),
        }
    }
    Ok((positional, params))
}

fn check_params(
    line: usize,
    params: &BTreeMap<String, String>,
    allowed: &[&str],
) -> Result<(), ParseError> {
    match params.keys().find(|k| !allowed.contains(&k.as_str())) {
        Some(k) => err(line, format!("unknown parameter `{k}`")),
        None => Ok(()),
    }
}

fn parse_actor(line: usize, args: &[String]) -> Result<ActorDecl, ParseError> {
    let (pos, params) = split_params(line, args)?;
    let [role, id] = pos.as_slice() else {
        return err(line, "expected `actor <role> <id> [key=value...]`");
    };
    let (role, allowed): (Role, &[&str]) = match role.as_str() {
        "manufacturer" => (Role::Manufacturer, &["kdc"]),
        "kdc" => (Role::Kdc, &["cks"]),
        "cks" => (Role::Cks, &["kdc"]),
        "device" => (Role::Device, &["machine", "dmn", "cks"]),
        "sp" => (Role::ServiceProvider, &["services", "cks"]),
        other => return err(line, format!("unknown role `{other}`")),
    };
    check_params(line, &params, allowed)?;
    if role == Role::Device && !params.contains_key("machine") {
        return err(line, "device needs machine=<id>");
    }
    Ok(ActorDecl {
        line,
        role,
        id: id.clone(),
        params,
    })
}

fn parse_step(line: usize, verb: &str, args: &[String]) -> Result<ScenarioStep, ParseError> {
    let (pos, params) = split_params(line, args)?;
    let usage = |u: &str| err(line, format!("expected `{u}`"));
    Ok(match verb {
        "register-device" => {
            check_params(line, &params, &["via"])?;
            if pos.is_empty() {
                return usage("register-device <device>... [via=<manufacturer>]");
            }
            ScenarioStep::RegisterDevice {
                devices: pos,
                via: params.get("via").cloned(),
            }
        }
        "register-user" => {
            check_params(line, &params, &[])?;
            let [device, user_id] = pos.as_slice() else {
                return usage("register-user <device> <user-id>");
            };
            ScenarioStep::RegisterUser {
                device: device.clone(),
                user_id: user_id.clone(),
            }
        }
        "connect" => {
            check_params(line, &params, &[])?;
            let [from, to] = pos.as_slice() else {
                return usage("connect <device> <device-or-user-id>");
            };
            ScenarioStep::Connect {
                from: from.clone(),
                to: to.clone(),
            }
        }
        "request-service" => {
            check_params(line, &params, &["p2"])?;
            let [device, service] = pos.as_slice() else {
                return usage("request-service <device> <service> [p2=<pass-phrase>]");
            };
            ScenarioStep::RequestService {
                device: device.clone(),
                service: service.clone(),
                p2: params.get("p2").cloned(),
            }
        }
        "app-message" => {
            check_params(line, &params, &[])?;
            let [from, to, text] = pos.as_slice() else {
                return usage("app-message <from> <to> <text>");
            };
            ScenarioStep::AppMessage {
                from: from.clone(),
                to: to.clone(),
                text: text.clone(),
            }
        }
        "wait" => {
            check_params(line, &params, &[])?;
            let [ticks] = pos.as_slice() else {
                return usage("wait <ticks>");
            };
            ScenarioStep::Wait(ticks.parse().map_err(|e| ParseError {
                line,
                msg: format!("wait: {e}"),
            })?)
        }
        other => return err(line, format!("unknown step `{other}`")),
    })
}

fn parse_num<T: std::str::FromStr>(line: usize, key: &str, v: &str) -> Result<T, ParseError>
where
    T::Err: fmt::Display,
{
    v.parse().map_err(|e: T::Err| ParseError {
        line,
        msg: format!("`{key}`: {e}"),
    })
}

fn parse_byte(line: usize, v: &str) -> Result<u8, ParseError> {
    let parsed = match v.strip_prefix("0x") {
        Some(h) => u8::from_str_radix(h, 16),
        None => v.parse(),
    };
    parsed.map_err(|e| ParseError {
        line,
        msg: format!("`byte`: {e}"),
    })
}

fn parse_selector(line: usize, params: &BTreeMap<String, String>) -> Result<Selector, ParseError> {
    match (params.get("seq"), params.get("msg")) {
        (Some(s), None) => Ok(Selector::Seq(parse_num(line, "seq", s)?)),
        (None, Some(m)) => {
            let tag = MessageTag::from_name(m).ok_or_else(|| ParseError {
                line,
                msg: format!("unknown message `{m}`"),
            })?;
            let nth = match params.get("nth") {
                Some(n) => parse_num(line, "nth", n)?,
                None => 1,
            };
            if nth == 0 {
                return err(line, "nth counts from 1");
            }
            Ok(Selector::Message { tag, nth })
        }
        _ => err(line, "give exactly one of seq=<n> or msg=<message>"),
    }
}

fn parse_attack(line: usize, args: &[String]) -> Result<AttackSpec, ParseError> {
    let (pos, params) = split_params(line, args)?;
    let Some(kind) = pos.first() else {
        return err(line, "expected `attack <kind> ...`");
    };
    let selector_keys = ["seq", "msg", "nth"];
    let with = |extra: &[&'static str]| {
        let mut v = selector_keys.to_vec();
        v.extend_from_slice(extra);
        v
    };
    let rule = |action| -> Result<AttackSpec, ParseError> {
        Ok(AttackSpec::Rule(AttackRule {
            selector: parse_selector(line, &params)?,
            action,
        }))
    };
    match kind.as_str() {
        "eavesdrop" => Ok(AttackSpec::Eavesdrop),
        "syn-flood" => Ok(AttackSpec::SynFlood),
        "replay" => {
            check_params(line, &params, &with(&["delay"]))?;
            let delay = match params.get("delay") {
                Some(d) => parse_num(line, "delay", d)?,
                None => 0,
            };
            rule(AttackAction::Replay { delay })
        }
        "tamper" => {
            check_params(line, &params, &with(&["index", "byte", "suppress"]))?;
            let index = parse_num(line, "index", params.get("index").map_or("", |s| s))?;
            let byte = parse_byte(line, params.get("byte").map_or("", |s| s))?;
            let suppress = match params.get("suppress") {
                Some(s) => parse_num(line, "suppress", s)?,
                None => true,
            };
            rule(AttackAction::Tamper {
                index,
                byte,
                suppress,
            })
        }
        "redirect" => {
            check_params(line, &params, &with(&["to"]))?;
            let Some(to) = params.get("to") else {
                return err(line, "redirect needs to=<address>");
            };
            rule(AttackAction::Redirect { to: to.clone() })
        }
        "drop" => {
            check_params(line, &params, &selector_keys)?;
            rule(AttackAction::Drop)
        }
        "impersonate" => {
            let [_, role, id] = pos.as_slice() else {
                return err(
                    line,
                    "expected `attack impersonate <user|sp|cks> <id> [key=value...]`",
                );
            };
            let (role, allowed): (FakeRole, &[&str]) = match role.as_str() {
                "user" => (
                    FakeRole::User,
                    &[
                        "machine", "token", "like", "flip", "target", "user", "temp-id",
                    ],
                ),
                "sp" => (FakeRole::Sp, &[]),
                "cks" => (FakeRole::Cks, &["claim-sp"]),
                other => return err(line, format!("cannot impersonate `{other}`")),
            };
            check_params(line, &params, allowed)?;
            Ok(AttackSpec::Impersonate {
                role,
                id: id.clone(),
                params,
            })
        }
        other => err(line, format!("unknown attack `{other}`")),
    }
}
