//! Role state machines.
//!
//! Every actor exposes `handle(frame, ctx) -> Step`: it consumes one inbound
//! frame and returns the outcome plus any frames to send. Initiating actions
//! (a manufacturer registering a device, a user asking for a service) are
//! separate methods that return the first frame of the flow or a local
//! outcome explaining why the flow could not start.

mod cks;
mod device;
mod kdc;
mod manufacturer;
mod provider;

use std::fmt;
use std::str::FromStr;

use serde::Serialize;

pub use cks::Cks;
pub use device::Device;
pub use kdc::{render_timestamp, Kdc};
pub use manufacturer::{Manufacturer, ProvisionedDevice};
pub use provider::ServiceProvider;

use crate::adversary::Impersonator;
use crate::crypto::{self, CryptoSuite, Entropy, PublicKey};
use crate::registry::{SessionLookup, SessionStore, Ticks};
use crate::wire::{Channel, Envelope, Frame, NonceBytes, OpenError, ProtocolMessage};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Initialization,
    Registration,
    Connection,
    Transaction,
}

impl Phase {
    pub const ALL: [Phase; 4] = [
        Phase::Initialization,
        Phase::Registration,
        Phase::Connection,
        Phase::Transaction,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Initialization => "initialization",
            Phase::Registration => "registration",
            Phase::Connection => "connection",
            Phase::Transaction => "transaction",
        }
    }
}

impl FromStr for Phase {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Phase::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| format!("unknown phase `{s}`"))
    }
}

/// Result of one actor step.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Outcome {
    Progress(String),
    Complete(Phase),
    Reject(String),
    Violation(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OutcomeKind {
    Progress,
    Complete,
    Reject,
    Violation,
}

impl Outcome {
    pub fn progress(detail: impl Into<String>) -> Self {
        Outcome::Progress(detail.into())
    }

    pub fn reject(reason: impl Into<String>) -> Self {
        Outcome::Reject(reason.into())
    }

    pub fn violation(detail: impl Into<String>) -> Self {
        Outcome::Violation(detail.into())
    }

    pub fn kind(&self) -> OutcomeKind {
        match self {
            Outcome::Progress(_) => OutcomeKind::Progress,
            Outcome::Complete(_) => OutcomeKind::Complete,
            Outcome::Reject(_) => OutcomeKind::Reject,
            Outcome::Violation(_) => OutcomeKind::Violation,
        }
    }

    pub fn is_failure(&self) -> bool {
        matches!(self, Outcome::Reject(_) | Outcome::Violation(_))
    }

    pub fn detail(&self) -> &str {
        match self {
            Outcome::Progress(d) | Outcome::Reject(d) | Outcome::Violation(d) => d,
            Outcome::Complete(p) => p.as_str(),
        }
    }
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Outcome::Progress(d) => write!(f, "progress:{d}"),
            Outcome::Complete(p) => write!(f, "complete:{}", p.as_str()),
            Outcome::Reject(r) => write!(f, "reject:{r}"),
            Outcome::Violation(d) => write!(f, "violation:{d}"),
        }
    }
}

impl FromStr for Outcome {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (kind, detail) = s.split_once(':').unwrap_or((s, ""));
        match kind {
            "progress" => Ok(Outcome::progress(detail)),
            "complete" => detail.parse().map(Outcome::Complete),
            "reject" => Ok(Outcome::reject(detail)),
            "violation" => Ok(Outcome::violation(detail)),
            _ => Err(format!("unknown outcome `{s}`")),
        }
    }
}

/// A frame an actor wants sent. `from` overrides the sender address, which
/// devices use to speak under their TempID.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Outgoing {
    pub from: Option<String>,
    pub to: String,
    pub channel: Channel,
    pub payload: Vec<u8>,
}

impl Outgoing {
    pub fn open(to: impl Into<String>, payload: Vec<u8>) -> Self {
        Self {
            from: None,
            to: to.into(),
            channel: Channel::Open,
            payload,
        }
    }

    pub fn secure(to: impl Into<String>, payload: Vec<u8>) -> Self {
        Self {
            channel: Channel::Secure,
            ..Self::open(to, payload)
        }
    }

    pub fn sent_as(mut self, from: impl Into<String>) -> Self {
        self.from = Some(from.into());
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Step {
    pub outcome: Outcome,
    pub out: Vec<Outgoing>,
}

impl Step {
    pub fn only(outcome: Outcome) -> Self {
        Self {
            outcome,
            out: Vec::new(),
        }
    }

    pub fn send(outcome: Outcome, out: Vec<Outgoing>) -> Self {
        Self { outcome, out }
    }
}

impl From<Outcome> for Step {
    fn from(outcome: Outcome) -> Self {
        Step::only(outcome)
    }
}

/// Per-step environment handed to actors by the scheduler.
///
/// `values` draws protocol values (nonces, keys, OTPs); `coins` feeds the
/// encryption randomness. Keeping them apart makes the protocol values of a
/// run independent of the crypto mode.
pub struct Ctx<'a> {
    pub now: Ticks,
    pub suite: CryptoSuite,
    pub ttl: Ticks,
    pub values: &'a mut Entropy,
    pub coins: &'a mut Entropy,
}

impl Ctx<'_> {
    pub fn seal_pk(&mut self, m: &ProtocolMessage, pk: &PublicKey) -> Vec<u8> {
        Envelope::seal_pk(m, pk, self.suite.mode, self.coins).encode()
    }

    pub fn seal_nonce(&mut self, m: &ProtocolMessage, nonce: &NonceBytes) -> Vec<u8> {
        Envelope::seal_sym(m, &crypto::nonce_key(nonce), self.suite.mode, self.coins).encode()
    }

    /// Nested ciphertext under a nonce-derived key, as raw bytes.
    pub fn nested_nonce(&mut self, plaintext: &[u8], nonce: &NonceBytes) -> Vec<u8> {
        crypto::sym_encrypt(
            self.suite.mode,
            &crypto::nonce_key(nonce),
            plaintext,
            self.coins,
        )
        .to_bytes()
    }

    pub fn nested_pk(&mut self, plaintext: &[u8], pk: &PublicKey) -> Vec<u8> {
        crypto::pk_encrypt(self.suite.mode, pk, plaintext, self.coins).to_bytes()
    }
}

/// Application payload accepted under a session key.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AppMessage {
    pub peer: String,
    pub tick: Ticks,
    #[serde(with = "crate::crypto::hex_bytes")]
    pub payload: Vec<u8>,
}

/// Opens an `AppData` ciphertext against a session store. Expiry is checked
/// before decryption.
pub(crate) fn receive_app_data(
    sessions: &SessionStore,
    ciphertext: &[u8],
    now: Ticks,
) -> Result<AppMessage, Outcome> {
    let ct = crypto::Ciphertext::from_bytes(ciphertext)
        .map_err(|e| Outcome::violation(format!("malformed app-data: {e}")))?;
    let rec = match sessions.get(&ct.key_ref, now) {
        SessionLookup::Live(rec) => rec,
        SessionLookup::Expired(_) => return Err(Outcome::reject("expired")),
        SessionLookup::NotFound => return Err(Outcome::reject("unknown-session")),
    };
    let payload = crypto::sym_decrypt(&rec.key, &ct).map_err(|_| Outcome::reject("tamper"))?;
    Ok(AppMessage {
        peer: rec.parties.1.clone(),
        tick: now,
        payload,
    })
}

pub fn plain(m: &ProtocolMessage) -> Vec<u8> {
    Envelope::plain(m.clone()).encode()
}

pub(crate) fn decode_frame(frame: &Frame) -> Result<Envelope, Outcome> {
    frame
        .envelope()
        .map_err(|e| Outcome::violation(format!("malformed frame: {e}")))
}

pub(crate) fn open_failure(what: &str, e: OpenError) -> Outcome {
    Outcome::violation(format!("cannot open {what}: {e}"))
}

pub(crate) fn unexpected(env: &Envelope, role: &str) -> Outcome {
    Outcome::violation(format!("unexpected {} at {role}", env.tag()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    Manufacturer,
    Kdc,
    Cks,
    Device,
    ServiceProvider,
    Adversary,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Manufacturer => "manufacturer",
            Role::Kdc => "kdc",
            Role::Cks => "cks",
            Role::Device => "device",
            Role::ServiceProvider => "sp",
            Role::Adversary => "adversary",
        }
    }
}

/// Any participant attached to the simulated network.
#[derive(Debug, Clone)]
#[allow(clippy::large_enum_variant)]
pub enum Node {
    Manufacturer(Manufacturer),
    Kdc(Kdc),
    Cks(Cks),
    Device(Device),
    Provider(ServiceProvider),
    Impersonator(Impersonator),
}

impl Node {
    pub fn id(&self) -> &str {
        match self {
            Node::Manufacturer(a) => a.id(),
            Node::Kdc(a) => a.id(),
            Node::Cks(a) => a.id(),
            Node::Device(a) => a.id(),
            Node::Provider(a) => a.id(),
            Node::Impersonator(a) => a.id(),
        }
    }

    pub fn role(&self) -> Role {
        match self {
            Node::Manufacturer(_) => Role::Manufacturer,
            Node::Kdc(_) => Role::Kdc,
            Node::Cks(_) => Role::Cks,
            Node::Device(_) => Role::Device,
            Node::Provider(_) => Role::ServiceProvider,
            Node::Impersonator(_) => Role::Adversary,
        }
    }

    /// Whether frames addressed to `addr` belong to this node.
    pub fn answers_to(&self, addr: &str) -> bool {
        match self {
            Node::Device(d) => d.answers_to(addr),
            other => other.id() == addr,
        }
    }

    pub fn is_adversarial(&self) -> bool {
        matches!(self, Node::Impersonator(_))
    }

    pub fn handle(&mut self, frame: &Frame, ctx: &mut Ctx<'_>) -> Step {
        match self {
            Node::Manufacturer(a) => a.handle(frame, ctx),
            Node::Kdc(a) => a.handle(frame, ctx),
            Node::Cks(a) => a.handle(frame, ctx),
            Node::Device(a) => a.handle(frame, ctx),
            Node::Provider(a) => a.handle(frame, ctx),
            Node::Impersonator(a) => a.handle(frame, ctx),
        }
    }

    /// JSON view of the registries this node owns.
    pub fn snapshot(&self) -> serde_json::Value {
        match self {
            Node::Manufacturer(a) => a.snapshot(),
            Node::Kdc(a) => a.snapshot(),
            Node::Cks(a) => a.snapshot(),
            Node::Device(a) => a.snapshot(),
            Node::Provider(a) => a.snapshot(),
            Node::Impersonator(_) => serde_json::Value::Null,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn outcome_text_round_trip() {
        for o in [
            Outcome::progress("app-data"),
            Outcome::Complete(Phase::Transaction),
            Outcome::reject("bad-otp"),
            Outcome::violation("cks-impersonation-suspected"),
            Outcome::progress(""),
        ] {
            assert_eq!(o.to_string().parse::<Outcome>().unwrap(), o);
        }
        assert!("complete:nope".parse::<Outcome>().is_err());
        assert!("weird".parse::<Outcome>().is_err());
    }
}
