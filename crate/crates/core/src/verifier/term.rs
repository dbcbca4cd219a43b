//! Symbolic view of frames.

use crate::crypto::{CipherKind, Ciphertext, CryptoMode};
use crate::wire::{Envelope, MessageTag, ProtocolMessage, SpIdentity, SpPart, UserPart};

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Term {
    Atom(Vec<u8>),
    Tuple(Vec<Term>),
    /// Symmetric ciphertext; `raw` is its exact encoding.
    Sym {
        key_ref: String,
        raw: Vec<u8>,
        body: Box<Term>,
    },
    /// Public-key ciphertext for the private key named `key_id`.
    Asym {
        key_id: String,
        raw: Vec<u8>,
        body: Box<Term>,
    },
}

impl Term {
    pub fn atom(bytes: impl Into<Vec<u8>>) -> Self {
        Term::Atom(bytes.into())
    }

    pub fn raw(&self) -> Option<&[u8]> {
        match self {
            Term::Sym { raw, .. } | Term::Asym { raw, .. } => Some(raw),
            _ => None,
        }
    }

    /// Every subterm, this one included, in pre-order.
    pub fn subterms(&self) -> Vec<&Term> {
        let mut out = Vec::new();
        let mut stack = vec![self];
        while let Some(t) = stack.pop() {
            out.push(t);
            match t {
                Term::Atom(_) => {}
                Term::Tuple(ts) => stack.extend(ts.iter().rev()),
                Term::Sym { body, .. } | Term::Asym { body, .. } => stack.push(body),
            }
        }
        out
    }

    pub fn contains_atom(&self, atom: &[u8]) -> bool {
        self.subterms()
            .iter()
            .any(|t| matches!(t, Term::Atom(a) if a == atom))
    }
}

/// What a labelled atom is, for picking secrets out of a trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Class {
    SessionKey,
    P1,
    P2,
    Otp,
    Token,
    MachineId,
    UserId,
    Nonce,
    Other,
}

impl Class {
    pub fn as_str(self) -> &'static str {
        match self {
            Class::SessionKey => "K",
            Class::P1 => "P1",
            Class::P2 => "P2",
            Class::Otp => "OTP",
            Class::Token => "T",
            Class::MachineId => "machine_id",
            Class::UserId => "user_id",
            Class::Nonce => "nonce",
            Class::Other => "other",
        }
    }

    fn of(tag: MessageTag, field: &str) -> Class {
        match field {
            "k" => Class::SessionKey,
            "p1" => Class::P1,
            "p2" => Class::P2,
            "otp" => Class::Otp,
            "token" | "token_a" | "token_b" => Class::Token,
            "machine_id" => Class::MachineId,
            "id_u" if tag == MessageTag::RegUser => Class::UserId,
            "n_m" | "n_u" | "n_a" | "n_b" | "n_sp" => Class::Nonce,
            _ => Class::Other,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Labelled {
    pub class: Class,
    pub field: String,
    pub value: Vec<u8>,
}

/// A frame payload as a term, plus the schema label of each atom that could
/// be recovered.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Parsed {
    pub tag: Option<MessageTag>,
    pub term: Term,
    pub atoms: Vec<Labelled>,
    /// Set when any ciphertext in the payload is an opaque-mode record.
    pub opaque: bool,
}

#[derive(Clone, Copy)]
enum Inner {
    Atom(&'static str),
    Message(MessageTag),
    User,
    Sp,
    Identity,
}

struct Builder {
    tag: MessageTag,
    atoms: Vec<Labelled>,
    opaque: bool,
}

impl Builder {
    fn leaf(&mut self, field: &str, value: &[u8]) -> Term {
        self.atoms.push(Labelled {
            class: Class::of(self.tag, field),
            field: field.to_string(),
            value: value.to_vec(),
        });
        Term::atom(value)
    }

    fn message(&mut self, m: &ProtocolMessage) -> Term {
        let fields = m.fields();
        Term::Tuple(
            fields
                .into_iter()
                .map(|(name, value)| match nested(m.tag(), name) {
                    Some(inner) => self.cipher(value, inner),
                    None => self.leaf(name, value),
                })
                .collect(),
        )
    }

    fn body(&mut self, plaintext: &[u8], inner: Inner) -> Term {
        let fields: Option<Vec<(&str, Vec<u8>)>> = match inner {
            Inner::Atom(name) => return self.leaf(name, plaintext),
            Inner::Message(tag) => match ProtocolMessage::decode(plaintext) {
                Ok(m) if m.tag() == tag => return self.message(&m),
                _ => None,
            },
            Inner::User => UserPart::decode(plaintext).ok().map(|p| {
                vec![
                    ("p2", p.p2),
                    ("k", p.k.to_vec()),
                    ("id_sp", p.id_sp.into_bytes()),
                ]
            }),
            Inner::Sp => SpPart::decode(plaintext)
                .ok()
                .map(|p| vec![("k", p.k.to_vec()), ("id_u", p.id_u.into_bytes())]),
            Inner::Identity => SpIdentity::decode(plaintext)
                .ok()
                .map(|p| vec![("n_sp", p.n_sp.to_vec()), ("id_u", p.id_u.into_bytes())]),
        };
        match fields {
            Some(fs) => Term::Tuple(fs.iter().map(|(n, v)| self.leaf(n, v)).collect()),
            None => Term::atom(plaintext),
        }
    }

    fn cipher(&mut self, bytes: &[u8], inner: Inner) -> Term {
        let Ok(ct) = Ciphertext::from_bytes(bytes) else {
            return Term::atom(bytes);
        };
        if ct.mode == CryptoMode::Opaque {
            self.opaque = true;
            return Term::atom(bytes);
        }
        let body = Box::new(self.body(&ct.body, inner));
        match ct.kind {
            CipherKind::Sym => Term::Sym {
                key_ref: ct.key_ref,
                raw: bytes.to_vec(),
                body,
            },
            CipherKind::Asym => Term::Asym {
                key_id: ct.key_ref,
                raw: bytes.to_vec(),
                body,
            },
        }
    }
}

fn nested(tag: MessageTag, field: &str) -> Option<Inner> {
    use MessageTag as T;
    Some(match (tag, field) {
        (T::SvcGrantUser | T::SvcTicket | T::SvcVerify, "enc_p1") => Inner::Atom("p1"),
        (T::SvcVerify, "enc_identity") => Inner::Identity,
        (T::SvcConfirm | T::SvcForward, "user_part") => Inner::User,
        (T::SvcConfirm, "sp_part") => Inner::Sp,
        (T::AppData, "ciphertext") => Inner::Atom("app_payload"),
        _ => return None,
    })
}

/// Builds the term for one frame payload. Undecodable payloads become a
/// single atom.
pub fn parse_payload(payload: &[u8]) -> Parsed {
    let Ok(env) = Envelope::decode(payload) else {
        return Parsed {
            tag: None,
            term: Term::atom(payload),
            atoms: Vec::new(),
            opaque: false,
        };
    };
    let mut b = Builder {
        tag: env.tag(),
        atoms: Vec::new(),
        opaque: false,
    };
    let term = match &env {
        Envelope::Plain(m) => b.message(m),
        Envelope::Sealed { tag, ciphertext } => b.cipher(ciphertext, Inner::Message(*tag)),
    };
    Parsed {
        tag: Some(env.tag()),
        term,
        atoms: b.atoms,
        opaque: b.opaque,
    }
}
