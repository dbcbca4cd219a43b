//! Post-hoc checks over a recorded trace.
//!
//! The trace must come from a transparent-mode run: ciphertexts then carry
//! their structure, so the verifier can rebuild every frame as a term and
//! compute what the eavesdropper, or a service provider, could derive.

pub mod closure;
pub mod term;

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;
use thiserror::Error;

use crate::actors::{Outcome, Phase};
use crate::crypto::key_ref_of;
use crate::registry::Ticks;
use crate::simnet::{EventKind, TraceEvent};
use crate::wire::{Channel, MessageTag};

pub use closure::{close, Closure};
pub use term::{parse_payload, Class, Labelled, Parsed, Term};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum VerifyError {
    #[error("incomplete trace: {0}")]
    Incomplete(String),
    #[error("mode error: {0}")]
    Mode(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Pass,
    Fail,
    Finding,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Check {
    pub property: &'static str,
    pub name: String,
    pub verdict: Verdict,
    pub detail: String,
    pub witnesses: Vec<u64>,
}

impl Check {
    fn new(
        property: &'static str,
        name: &str,
        verdict: Verdict,
        detail: String,
        mut witnesses: Vec<u64>,
    ) -> Self {
        witnesses.sort_unstable();
        witnesses.dedup();
        Self {
            property,
            name: name.to_string(),
            verdict,
            detail,
            witnesses,
        }
    }

    fn pass(property: &'static str) -> Self {
        Self::new(property, property, Verdict::Pass, String::new(), Vec::new())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Stats {
    pub events: usize,
    pub adversary_terms: usize,
    pub secrets: BTreeMap<&'static str, usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Report {
    pub ok: bool,
    pub ttl: Ticks,
    pub checks: Vec<Check>,
    pub stats: Stats,
}

impl Report {
    pub fn verdict(&self, property: &str) -> Verdict {
        self.checks
            .iter()
            .filter(|c| c.property == property && c.verdict != Verdict::Finding)
            .map(|c| c.verdict)
            .max()
            .unwrap_or(Verdict::Pass)
    }

    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| c.verdict == Verdict::Fail)
    }

    pub fn findings(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| c.verdict == Verdict::Finding)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Options {
    pub ttl: Ticks,
}

impl Default for Options {
    fn default() -> Self {
        Self { ttl: 100 }
    }
}

/// Parses JSON Lines, treating a partial or garbled line as truncation.
pub fn read_jsonl(text: &str) -> Result<Vec<TraceEvent>, VerifyError> {
    if text.trim().is_empty() {
        return Err(VerifyError::Incomplete("empty trace".into()));
    }
    if !text.ends_with('\n') {
        return Err(VerifyError::Incomplete(
            "last line is not terminated".into(),
        ));
    }
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| VerifyError::Incomplete(format!("line {}: {e}", i + 1)))
        })
        .collect()
}

const SECRET_CLASSES: [Class; 6] = [
    Class::SessionKey,
    Class::P1,
    Class::P2,
    Class::Otp,
    Class::Token,
    Class::MachineId,
];

/// A trace rebuilt as terms, with the bookkeeping the checks share.
#[derive(Debug, Clone)]
pub struct Analysis {
    events: Vec<TraceEvent>,
    parsed: Vec<Parsed>,
    adversarial: BTreeSet<String>,
    universe: BTreeSet<Vec<u8>>,
}

impl Analysis {
    pub fn new(events: &[TraceEvent]) -> Result<Self, VerifyError> {
        if events.is_empty() {
            return Err(VerifyError::Incomplete("empty trace".into()));
        }
        let seqs: BTreeSet<u64> = events.iter().map(|e| e.seq).collect();
        if seqs.len() != events.len() {
            let mut seen = BTreeSet::new();
            let dup = events
                .iter()
                .find(|e| !seen.insert(e.seq))
                .expect("a duplicate");
            return Err(VerifyError::Incomplete(format!(
                "seq {} appears twice",
                dup.seq
            )));
        }
        if let Some(missing) = (0..events.len() as u64).find(|s| !seqs.contains(s)) {
            return Err(VerifyError::Incomplete(format!("seq {missing} is missing")));
        }
        if let Some(w) = events.windows(2).find(|w| w[1].tick < w[0].tick) {
            return Err(VerifyError::Incomplete(format!(
                "tick goes backwards at seq {}",
                w[1].seq
            )));
        }
        let mut parsed = Vec::with_capacity(events.len());
        for e in events {
            let payload = e
                .payload()
                .map_err(|err| VerifyError::Incomplete(format!("seq {}: {err}", e.seq)))?;
            let p = parse_payload(&payload);
            if p.opaque {
                return Err(VerifyError::Mode(format!(
                    "seq {} carries an opaque ciphertext; verify a transparent-mode trace",
                    e.seq
                )));
            }
            parsed.push(p);
        }
        let honest: BTreeSet<&str> = events
            .iter()
            .filter(|e| e.kind != EventKind::Injected)
            .map(|e| e.from.as_str())
            .collect();
        let adversarial = events
            .iter()
            .filter(|e| e.kind == EventKind::Injected && !honest.contains(e.from.as_str()))
            .map(|e| e.from.clone())
            .collect();
        let universe = closure::universe(parsed.iter().map(|p| &p.term));
        Ok(Self {
            events: events.to_vec(),
            parsed,
            adversarial,
            universe,
        })
    }

    pub fn events(&self) -> &[TraceEvent] {
        &self.events
    }

    pub fn parsed(&self) -> &[Parsed] {
        &self.parsed
    }

    /// Senders that only ever appear on injected frames.
    pub fn adversarial_ids(&self) -> &BTreeSet<String> {
        &self.adversarial
    }

    pub fn universe(&self) -> &BTreeSet<Vec<u8>> {
        &self.universe
    }

    fn honest(&self, i: usize) -> bool {
        self.events[i].kind != EventKind::Injected
    }

    fn outcome(&self, i: usize) -> Option<Outcome> {
        self.events[i].outcome.as_deref()?.parse().ok()
    }

    fn tag(&self, i: usize) -> Option<MessageTag> {
        self.parsed[i].tag
    }

    fn labelled(&self, i: usize, class: Class) -> impl Iterator<Item = &Vec<u8>> {
        self.parsed[i]
            .atoms
            .iter()
            .filter(move |l| l.class == class)
            .map(|l| &l.value)
    }

    /// Terms a sender learns from writing a frame: the frame and everything
    /// inside any ciphertext it did not copy from `seen`.
    fn authored(t: &Term, seen: &BTreeSet<Vec<u8>>, out: &mut Vec<Term>) {
        out.push(t.clone());
        match t {
            Term::Atom(_) => {}
            Term::Tuple(ts) => ts.iter().for_each(|s| Self::authored(s, seen, out)),
            Term::Sym { raw, body, .. } | Term::Asym { raw, body, .. } => {
                if !seen.contains(raw) {
                    Self::authored(body, seen, out);
                }
            }
        }
    }

    fn raws(t: &Term, into: &mut BTreeSet<Vec<u8>>) {
        for s in t.subterms() {
            if let Some(r) = s.raw() {
                into.insert(r.to_vec());
            }
        }
    }

    /// Everything on the open channel, plus what the scripted attackers put
    /// into their own frames.
    pub fn adversary_base(&self) -> Vec<Term> {
        let mut base = Vec::new();
        let mut seen = BTreeSet::new();
        for (i, e) in self.events.iter().enumerate() {
            if e.channel != Channel::Open {
                continue;
            }
            let t = &self.parsed[i].term;
            if e.kind == EventKind::Injected && self.adversarial.contains(&e.from) {
                Self::authored(t, &seen, &mut base);
            } else {
                base.push(t.clone());
            }
            Self::raws(t, &mut seen);
        }
        base
    }

    pub fn adversary_closure(&self) -> Closure {
        close(self.adversary_base(), &self.universe, &BTreeSet::new())
    }

    /// Frames `party` received, plus its own frames opened by the sender
    /// rule.
    pub fn party_base(&self, party: &str) -> Vec<Term> {
        let mut base = Vec::new();
        let mut seen = BTreeSet::new();
        for (i, e) in self.events.iter().enumerate() {
            let t = &self.parsed[i].term;
            let received =
                e.to == party && matches!(e.kind, EventKind::Delivered | EventKind::Injected);
            if received {
                base.push(t.clone());
                Self::raws(t, &mut seen);
            } else if e.from == party && self.honest(i) {
                Self::authored(t, &seen, &mut base);
            }
        }
        base
    }

    pub fn party_closure(&self, party: &str) -> Closure {
        close(self.party_base(party), &self.universe, &BTreeSet::new())
    }

    /// Secret atoms by class, each with the seqs of honest frames carrying it.
    pub fn secrets(&self) -> BTreeMap<Class, BTreeMap<Vec<u8>, Vec<u64>>> {
        let mut out: BTreeMap<Class, BTreeMap<Vec<u8>, Vec<u64>>> = BTreeMap::new();
        for (i, p) in self.parsed.iter().enumerate() {
            if !self.honest(i) {
                continue;
            }
            for l in &p.atoms {
                if SECRET_CLASSES.contains(&l.class) || l.class == Class::UserId {
                    out.entry(l.class)
                        .or_default()
                        .entry(l.value.clone())
                        .or_default()
                        .push(self.events[i].seq);
                }
            }
        }
        out
    }

    /// Service providers: addressees of service tickets or senders of
    /// verification requests.
    pub fn providers(&self) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        for (i, e) in self.events.iter().enumerate() {
            match self.tag(i) {
                Some(MessageTag::SvcVerify) if self.honest(i) => {
                    out.insert(e.from.clone());
                }
                Some(MessageTag::SvcConfirm) if self.honest(i) => {
                    out.insert(e.to.clone());
                }
                _ => {}
            }
        }
        out.retain(|p| !self.adversarial.contains(p));
        out
    }

    pub fn check_secrecy(&self, adv: &Closure) -> Vec<Check> {
        let secrets = self.secrets();
        let mut out = Vec::new();
        for class in SECRET_CLASSES {
            for (value, seqs) in secrets.get(&class).into_iter().flatten() {
                if adv.knows(value) {
                    let mut witnesses = seqs.clone();
                    witnesses.extend(self.exposing(value));
                    out.push(Check::new(
                        "secrecy",
                        class.as_str(),
                        Verdict::Fail,
                        format!(
                            "{} {} is derivable by the eavesdropper",
                            class.as_str(),
                            short(value)
                        ),
                        witnesses,
                    ));
                }
            }
        }
        if out.is_empty() {
            out.push(Check::pass("secrecy"));
        }
        out
    }

    /// Open-channel frames carrying `atom` outside any ciphertext.
    fn exposing(&self, atom: &[u8]) -> Vec<u64> {
        self.events
            .iter()
            .zip(&self.parsed)
            .filter(|(e, p)| e.channel == Channel::Open && in_clear(&p.term, atom))
            .map(|(e, _)| e.seq)
            .collect()
    }

    /// Accepted key-bearing deliveries: (event index, receiver, K).
    fn key_acceptances(&self) -> Vec<(usize, Vec<u8>)> {
        let mut out = Vec::new();
        for i in 0..self.events.len() {
            let accepted = match (self.tag(i), self.outcome(i)) {
                (
                    Some(MessageTag::ConnKeyA | MessageTag::ConnKeyB),
                    Some(Outcome::Complete(Phase::Connection)),
                ) => true,
                (Some(MessageTag::SvcForward), Some(Outcome::Complete(Phase::Transaction))) => true,
                (Some(MessageTag::SvcConfirm), Some(Outcome::Progress(p))) => {
                    p == "grant-forwarded"
                }
                _ => false,
            };
            if !accepted {
                continue;
            }
            let k = match self.tag(i) {
                Some(MessageTag::SvcConfirm) => self.sp_part_k(i).cloned(),
                _ => self.labelled(i, Class::SessionKey).next().cloned(),
            };
            if let Some(k) = k {
                out.push((i, k));
            }
        }
        out
    }

    fn sp_part_k(&self, i: usize) -> Option<&Vec<u8>> {
        let Term::Tuple(fields) = &self.parsed[i].term else {
            return None;
        };
        let Some(Term::Sym { body, .. }) = fields.get(1) else {
            return None;
        };
        let Term::Tuple(sp) = body.as_ref() else {
            return None;
        };
        match sp.first() {
            Some(Term::Atom(k)) => Some(k),
            _ => None,
        }
    }

    pub fn check_agreement(&self, adv: &Closure) -> Vec<Check> {
        let mut out = Vec::new();
        let accepts = self.key_acceptances();
        let honest_carriers =
            |k: &Vec<u8>, tags: &[MessageTag], except_to: Option<&str>| -> Vec<usize> {
                (0..self.events.len())
                    .filter(|&j| {
                        self.honest(j)
                            && self.tag(j).is_some_and(|t| tags.contains(&t))
                            && except_to.is_none_or(|to| self.events[j].to != to)
                            && self.labelled(j, Class::SessionKey).any(|v| v == k)
                    })
                    .collect()
            };
        for (i, k) in &accepts {
            let e = &self.events[*i];
            let fail = |name: &str, detail: String, extra: &[u64]| {
                let mut w = vec![e.seq];
                w.extend_from_slice(extra);
                Check::new("agreement", name, Verdict::Fail, detail, w)
            };
            if adv.knows(k) {
                out.push(fail(
                    "compromised-key",
                    format!("{} accepted a key the adversary can derive", e.to),
                    &[],
                ));
                continue;
            }
            match self.tag(*i) {
                Some(MessageTag::ConnKeyA | MessageTag::ConnKeyB) => {
                    let peers = honest_carriers(
                        k,
                        &[MessageTag::ConnKeyA, MessageTag::ConnKeyB],
                        Some(&e.to),
                    );
                    if peers.is_empty() {
                        out.push(fail(
                            "connection-key",
                            format!(
                                "{} completed with a key the server never issued to a peer",
                                e.to
                            ),
                            &[],
                        ));
                    }
                }
                Some(MessageTag::SvcForward) => {
                    let sp_side: Vec<usize> = accepts
                        .iter()
                        .filter(|(j, kk)| {
                            kk == k
                                && self.tag(*j) == Some(MessageTag::SvcConfirm)
                                && self.honest(*j)
                        })
                        .map(|(j, _)| *j)
                        .collect();
                    if sp_side.is_empty() {
                        out.push(fail(
                            "transaction-key",
                            format!("{} completed but no provider accepted the same key", e.to),
                            &[],
                        ));
                    }
                }
                Some(MessageTag::SvcConfirm)
                    if !self.honest(*i)
                        && honest_carriers(k, &[MessageTag::SvcConfirm], None).is_empty() =>
                {
                    out.push(fail(
                        "provider-key",
                        format!("{} accepted a key the server never issued", e.to),
                        &[],
                    ));
                }
                _ => {}
            }
        }
        if out.is_empty() {
            out.push(Check::pass("agreement"));
        }
        let verifies: Vec<u64> = (0..self.events.len())
            .filter(|&i| self.tag(i) == Some(MessageTag::SvcVerify))
            .map(|i| self.events[i].seq)
            .collect();
        if !verifies.is_empty() {
            out.push(Check::new(
                "agreement",
                "svc-verify-correlation",
                Verdict::Finding,
                "the returned pass-phrase carries no flow identifier; the server matches it to a flow by the user address inside the provider's sealed identity".into(),
                verifies,
            ));
        }
        let forged_notify: Vec<u64> = (0..self.events.len())
            .filter(|&i| {
                self.tag(i) == Some(MessageTag::ConnNotify)
                    && !self.honest(i)
                    && self.outcome(i) == Some(Outcome::progress("responded"))
            })
            .map(|i| self.events[i].seq)
            .collect();
        if !forged_notify.is_empty() {
            out.push(Check::new(
                "agreement",
                "unauthenticated-notify",
                Verdict::Finding,
                "a device answered an injected connection notice, which travels unauthenticated"
                    .into(),
                forged_notify,
            ));
        }
        let mut by_token: BTreeMap<Vec<u8>, TokenUse> = BTreeMap::new();
        for i in 0..self.events.len() {
            if self.tag(i) != Some(MessageTag::InitRecord) || !self.honest(i) {
                continue;
            }
            let (Some(t), Some(m)) = (
                self.labelled(i, Class::Token).next(),
                self.labelled(i, Class::MachineId).next(),
            ) else {
                continue;
            };
            let entry = by_token.entry(t.clone()).or_default();
            entry.0.insert(m.clone());
            entry.1.push(self.events[i].seq);
        }
        for (token, (machines, seqs)) in by_token {
            if machines.len() > 1 {
                out.push(Check::new(
                    "agreement",
                    "duplicate-token",
                    Verdict::Finding,
                    format!(
                        "token {} was issued to {} devices registered in the same tick",
                        short(&token),
                        machines.len()
                    ),
                    seqs,
                ));
            }
        }
        out
    }

    pub fn check_freshness(&self, ttl: Ticks) -> Vec<Check> {
        let mut est_at: BTreeMap<(String, String), Ticks> = BTreeMap::new();
        let mut est_any: BTreeMap<String, Ticks> = BTreeMap::new();
        for (i, k) in self.key_acceptances() {
            let e = &self.events[i];
            let r = key_ref_of(k.as_slice());
            est_at.entry((e.to.clone(), r.clone())).or_insert(e.tick);
            let any = est_any.entry(r).or_insert(e.tick);
            *any = (*any).min(e.tick);
        }
        let mut out = Vec::new();
        let mut accepted: BTreeMap<&str, Vec<u64>> = BTreeMap::new();
        for (i, e) in self.events.iter().enumerate() {
            if self.tag(i) != Some(MessageTag::AppData)
                || self.outcome(i) != Some(Outcome::progress("app-data"))
            {
                continue;
            }
            accepted
                .entry(e.frame_hex.as_str())
                .or_default()
                .push(e.seq);
            let Term::Tuple(fields) = &self.parsed[i].term else {
                continue;
            };
            let Some(Term::Sym { key_ref, .. }) = fields.first() else {
                out.push(Check::new(
                    "freshness",
                    "unsealed-app-data",
                    Verdict::Fail,
                    format!(
                        "{} accepted application data that is not a ciphertext",
                        e.to
                    ),
                    vec![e.seq],
                ));
                continue;
            };
            let est = est_at
                .get(&(e.to.clone(), key_ref.clone()))
                .or_else(|| est_any.get(key_ref));
            match est {
                None => out.push(Check::new(
                    "freshness",
                    "unknown-session",
                    Verdict::Fail,
                    format!("{} accepted data under key {key_ref} that no party established", e.to),
                    vec![e.seq],
                )),
                Some(&t0) if e.tick > t0 + ttl => out.push(Check::new(
                    "freshness",
                    "expired-session",
                    Verdict::Fail,
                    format!(
                        "{} accepted data at tick {} under a key established at tick {t0} (ttl {ttl})",
                        e.to, e.tick
                    ),
                    vec![e.seq],
                )),
                Some(_) => {}
            }
        }
        if out.is_empty() {
            out.push(Check::pass("freshness"));
        }
        for seqs in accepted.into_values().filter(|s| s.len() > 1) {
            out.push(Check::new(
                "freshness",
                "within-ttl-replay",
                Verdict::Finding,
                format!(
                    "the same application frame was accepted {} times inside the session lifetime",
                    seqs.len()
                ),
                seqs,
            ));
        }
        out
    }

    pub fn check_privacy(&self) -> Vec<Check> {
        let secrets = self.secrets();
        let user_ids = secrets.get(&Class::UserId).cloned().unwrap_or_default();
        let mut out = Vec::new();
        for sp in self.providers() {
            let base = self.party_base(&sp);
            let c = close(base, &self.universe, &BTreeSet::new());
            for uid in user_ids.keys() {
                if c.knows(uid) {
                    let witnesses = self
                        .events
                        .iter()
                        .enumerate()
                        .filter(|(i, e)| {
                            (e.to == sp || e.from == sp) && self.parsed[*i].term.contains_atom(uid)
                        })
                        .map(|(_, e)| e.seq)
                        .collect();
                    out.push(Check::new(
                        "privacy",
                        "user-id-at-provider",
                        Verdict::Fail,
                        format!(
                            "{sp} can derive the user id {}",
                            String::from_utf8_lossy(uid)
                        ),
                        witnesses,
                    ));
                }
            }
        }
        if out.is_empty() {
            out.push(Check::pass("privacy"));
        }
        let notices: Vec<u64> = (0..self.events.len())
            .filter(|&i| {
                self.tag(i) == Some(MessageTag::ConnNotify)
                    && self.events[i].channel == Channel::Open
            })
            .map(|i| self.events[i].seq)
            .collect();
        if !notices.is_empty() {
            out.push(Check::new(
                "privacy",
                "conn-notify-metadata",
                Verdict::Finding,
                "connection notices name both users in clear on the open channel".into(),
                notices,
            ));
        }
        out
    }
}

/// Machines an InitRecord token was issued for, and the carrying seqs.
type TokenUse = (BTreeSet<Vec<u8>>, Vec<u64>);

fn in_clear(t: &Term, atom: &[u8]) -> bool {
    match t {
        Term::Atom(a) => a == atom,
        Term::Tuple(ts) => ts.iter().any(|t| in_clear(t, atom)),
        Term::Sym { .. } | Term::Asym { .. } => false,
    }
}

fn short(v: &[u8]) -> String {
    let h = hex::encode(v);
    if h.len() > 16 {
        format!("{}..", &h[..16])
    } else {
        h
    }
}

pub fn verify(events: &[TraceEvent], opts: Options) -> Result<Report, VerifyError> {
    let a = Analysis::new(events)?;
    let adv = a.adversary_closure();
    let mut checks = a.check_secrecy(&adv);
    checks.extend(a.check_agreement(&adv));
    checks.extend(a.check_freshness(opts.ttl));
    checks.extend(a.check_privacy());
    let secrets = a
        .secrets()
        .iter()
        .map(|(c, v)| (c.as_str(), v.len()))
        .collect();
    Ok(Report {
        ok: !checks.iter().any(|c| c.verdict == Verdict::Fail),
        ttl: opts.ttl,
        checks,
        stats: Stats {
            events: events.len(),
            adversary_terms: adv.len(),
            secrets,
        },
    })
}
