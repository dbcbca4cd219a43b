//! Dolev-Yao attacker on the open channel.
//!
//! The [`Adversary`] sees every open-channel frame at submission time and
//! may suppress it or inject new frames according to installed
//! [`AttackRule`]s. Impersonators are scripted network nodes that speak the
//! protocol using only what an outsider can know.

use std::collections::BTreeMap;

use rand::RngCore;
use thiserror::Error;

use crate::actors::{plain, Ctx, Outcome, Outgoing, Step};
use crate::crypto::{self, Digest, KeyOrigin, PublicKey, SymKey};
use crate::registry::Ticks;
use crate::wire::{Channel, Envelope, Frame, MessageTag, ProtocolMessage, SpIdentity};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ScriptError {
    #[error("seq {0} has not been observed")]
    UnknownSeq(u64),
    #[error("tamper index {index} out of range for frame {seq} of {len} bytes")]
    IndexOutOfRange { seq: u64, index: usize, len: usize },
    #[error("{0} is not implemented")]
    NotImplemented(&'static str),
    #[error("{0}")]
    Invalid(String),
}

/// Which observed frame a rule targets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Selector {
    Seq(u64),
    /// The `nth` (1-based) honest frame carrying `tag`.
    Message {
        tag: MessageTag,
        nth: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AttackAction {
    Replay {
        delay: Ticks,
    },
    Tamper {
        index: usize,
        byte: u8,
        suppress: bool,
    },
    Redirect {
        to: String,
    },
    Drop,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttackRule {
    pub selector: Selector,
    pub action: AttackAction,
}

/// A frame the adversary wants put on the wire, `delay` ticks after the
/// normal hop latency.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Injection {
    pub from: String,
    pub to: String,
    pub payload: Vec<u8>,
    pub delay: Ticks,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Decision {
    pub suppress: bool,
    pub inject: Vec<Injection>,
}

#[derive(Debug, Clone, Default)]
pub struct AdversaryKnowledge {
    pub observed: Vec<Frame>,
    pub public_keys: Vec<PublicKey>,
}

#[derive(Debug, Clone)]
struct Armed {
    rule: AttackRule,
    fired: bool,
}

#[derive(Debug, Clone, Default)]
pub struct Adversary {
    pub knowledge: AdversaryKnowledge,
    rules: Vec<Armed>,
    counts: BTreeMap<MessageTag, usize>,
    honest_by_tag: BTreeMap<(MessageTag, usize), u64>,
    errors: Vec<ScriptError>,
}

impl Adversary {
    pub fn new(public_keys: Vec<PublicKey>) -> Self {
        Self {
            knowledge: AdversaryKnowledge {
                observed: Vec::new(),
                public_keys,
            },
            ..Self::default()
        }
    }

    pub fn rules_pending(&self) -> usize {
        self.rules.iter().filter(|r| !r.fired).count()
    }

    pub fn take_errors(&mut self) -> Vec<ScriptError> {
        std::mem::take(&mut self.errors)
    }

    fn observed(&self, seq: u64) -> Option<&Frame> {
        self.knowledge.observed.iter().find(|f| f.seq == seq)
    }

    /// Arms a rule. If its target was already observed it fires at once;
    /// suppression is meaningless for frames already in flight.
    pub fn install(&mut self, rule: AttackRule) -> Result<Decision, ScriptError> {
        let past = match &rule.selector {
            Selector::Seq(s) => Some(
                self.observed(*s)
                    .ok_or(ScriptError::UnknownSeq(*s))?
                    .clone(),
            ),
            Selector::Message { tag, nth } => self
                .honest_by_tag
                .get(&(*tag, *nth))
                .and_then(|s| self.observed(*s))
                .cloned(),
        };
        match past {
            Some(frame) => {
                let mut d = fire(&rule.action, &frame)?;
                d.suppress = false;
                self.rules.push(Armed { rule, fired: true });
                Ok(d)
            }
            None => {
                self.rules.push(Armed { rule, fired: false });
                Ok(Decision::default())
            }
        }
    }

    /// Tap on every open-channel submission.
    pub fn observe(&mut self, frame: &Frame, injected: bool) -> Decision {
        debug_assert_eq!(frame.channel, Channel::Open);
        self.knowledge.observed.push(frame.clone());
        if injected {
            return Decision::default();
        }
        let Some(tag) = frame.tag() else {
            return Decision::default();
        };
        let n = self.counts.entry(tag).or_default();
        *n += 1;
        let nth = *n;
        self.honest_by_tag.insert((tag, nth), frame.seq);
        let mut decision = Decision::default();
        for armed in self.rules.iter_mut().filter(|r| !r.fired) {
            let hit = match &armed.rule.selector {
                Selector::Seq(s) => *s == frame.seq,
                Selector::Message { tag: t, nth: k } => *t == tag && *k == nth,
            };
            if !hit {
                continue;
            }
            armed.fired = true;
            match fire(&armed.rule.action, frame) {
                Ok(d) => {
                    decision.suppress |= d.suppress;
                    decision.inject.extend(d.inject);
                }
                Err(e) => self.errors.push(e),
            }
        }
        decision
    }
}

fn fire(action: &AttackAction, frame: &Frame) -> Result<Decision, ScriptError> {
    let copy = |to: &str, payload: Vec<u8>, delay| Injection {
        from: frame.from.clone(),
        to: to.to_string(),
        payload,
        delay,
    };
    Ok(match action {
        AttackAction::Replay { delay } => Decision {
            suppress: false,
            inject: vec![copy(&frame.to, frame.payload.clone(), *delay)],
        },
        AttackAction::Tamper {
            index,
            byte,
            suppress,
        } => {
            if *index >= frame.payload.len() {
                return Err(ScriptError::IndexOutOfRange {
                    seq: frame.seq,
                    index: *index,
                    len: frame.payload.len(),
                });
            }
            let mut payload = frame.payload.clone();
            payload[*index] = *byte;
            Decision {
                suppress: *suppress,
                inject: vec![copy(&frame.to, payload, 0)],
            }
        }
        AttackAction::Redirect { to } => Decision {
            suppress: true,
            inject: vec![copy(to, frame.payload.clone(), 0)],
        },
        AttackAction::Drop => Decision {
            suppress: true,
            inject: Vec::new(),
        },
    })
}

/// Scripted malicious participant.
#[derive(Debug, Clone)]
pub enum Impersonator {
    User(FakeUser),
    Sp(FakeSp),
    Cks(FakeCks),
}

impl Impersonator {
    pub fn id(&self) -> &str {
        match self {
            Impersonator::User(a) => &a.id,
            Impersonator::Sp(a) => &a.id,
            Impersonator::Cks(a) => &a.id,
        }
    }

    pub fn handle(&mut self, frame: &Frame, ctx: &mut Ctx<'_>) -> Step {
        match self {
            Impersonator::Sp(a) => a.handle(frame, ctx),
            Impersonator::Cks(a) => a.handle(frame, ctx),
            Impersonator::User(_) => Outcome::progress("observed").into(),
        }
    }
}

/// Presents a forged or mutated token to the CKS.
#[derive(Debug, Clone)]
pub struct FakeUser {
    pub id: String,
    pub cks_addr: String,
    pub cks_pk: PublicKey,
    pub machine_id: String,
    pub token: Digest,
    pub user_id: String,
    /// When set, also asks the CKS for a connection to this user.
    pub target: Option<String>,
    pub claimed_temp_id: String,
}

impl FakeUser {
    /// Device authentication, a guessed-OTP user registration, and an
    /// optional connection request, all sent at once.
    pub fn start(&self, ctx: &mut Ctx<'_>) -> Vec<Outgoing> {
        let mut out = Vec::new();
        let auth = ProtocolMessage::RegDeviceAuth {
            machine_id: self.machine_id.clone(),
            token: self.token.clone(),
            n_u: ctx.values.fresh_nonce(&self.id).value,
        };
        out.push(Outgoing::open(
            &self.cks_addr,
            ctx.seal_pk(&auth, &self.cks_pk),
        ));
        let reg = ProtocolMessage::RegUser {
            id_u: self.user_id.clone(),
            otp: ctx.values.fresh_otp(),
            n_u: ctx.values.fresh_nonce(&self.id).value,
        };
        out.push(Outgoing::open(
            &self.cks_addr,
            ctx.seal_pk(&reg, &self.cks_pk),
        ));
        if let Some(target) = &self.target {
            let req = ProtocolMessage::ConnRequest {
                id_target: target.clone(),
                token_a: self.token.clone(),
                n_a: ctx.values.fresh_nonce(&self.id).value,
                temp_id: self.claimed_temp_id.clone(),
            };
            out.push(Outgoing::open(
                &self.cks_addr,
                ctx.seal_pk(&req, &self.cks_pk),
            ));
        }
        out
    }
}

/// Answers a service ticket without knowing P1.
#[derive(Debug, Clone)]
pub struct FakeSp {
    pub id: String,
    pub cks_addr: String,
    pub cks_pk: PublicKey,
}

impl FakeSp {
    fn handle(&mut self, frame: &Frame, ctx: &mut Ctx<'_>) -> Step {
        if frame.tag() != Some(MessageTag::SvcTicket) {
            return Outcome::progress("observed").into();
        }
        let forged_p1 = ctx.values.fresh_passphrase();
        let guess = SymKey::new(
            ctx.values.fresh_session_key().value,
            KeyOrigin::NonceDerived,
        );
        let enc_p1 = crypto::sym_encrypt(ctx.suite.mode, &guess, &forged_p1, ctx.coins).to_bytes();
        let identity = SpIdentity {
            n_sp: ctx.values.fresh_nonce(&self.id).value,
            id_u: frame.from.clone(),
        };
        let verify = ProtocolMessage::SvcVerify {
            enc_p1,
            enc_identity: ctx.nested_pk(&identity.encode(), &self.cks_pk),
        };
        Step::send(
            Outcome::progress("forged-verify"),
            vec![Outgoing::open(&self.cks_addr, plain(&verify))],
        )
    }
}

/// Answers a service request it cannot read with a grant under a key of its
/// own choosing.
#[derive(Debug, Clone)]
pub struct FakeCks {
    pub id: String,
    pub claimed_sp: String,
}

impl FakeCks {
    fn handle(&mut self, frame: &Frame, ctx: &mut Ctx<'_>) -> Step {
        if frame.tag() != Some(MessageTag::SvcRequest) {
            return Outcome::progress("observed").into();
        }
        let n_guess = ctx.values.fresh_nonce(&self.id).value;
        let mut p2 = vec![0u8; 8];
        ctx.coins.fill_bytes(&mut p2);
        let p1 = ctx.values.fresh_passphrase();
        let grant = ProtocolMessage::SvcGrantUser {
            k: ctx.values.fresh_session_key().value,
            enc_p1: ctx.nested_nonce(&p1, &n_guess),
            id_sp: self.claimed_sp.clone(),
            p2,
        };
        let sealed = Envelope::seal_sym(
            &grant,
            &crypto::nonce_key(&n_guess),
            ctx.suite.mode,
            ctx.coins,
        );
        Step::send(
            Outcome::progress("forged-grant"),
            vec![Outgoing::open(&frame.from, sealed.encode())],
        )
    }
}
