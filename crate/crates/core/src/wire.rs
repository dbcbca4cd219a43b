//! Protocol messages and their canonical byte encoding.
//!
//! A message encodes as its one-byte tag followed by every field in
//! declaration order, each field written as a 4-byte big-endian length and
//! the raw bytes. Field order inside each message follows the concatenation
//! order of the corresponding protocol step.
//!
//! On the network a message travels inside an [`Envelope`]. Messages that the
//! protocol wraps whole in an encryption (`E_{P_CKS}(...)`, `E_{N_U}(...)`)
//! travel as `tag ‖ lp(ciphertext)` where the ciphertext's plaintext is the
//! full canonical encoding of the message. The remaining messages travel as
//! their plain encoding, with any nested ciphertexts carried as opaque byte
//! fields.

use std::fmt;

use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{
    self, CryptoError, CryptoMode, Digest, PrivateKey, PublicKey, SymKey, NONCE_LEN, SYM_KEY_LEN,
};

pub type NonceBytes = [u8; NONCE_LEN];
pub type KeyBytes = [u8; SYM_KEY_LEN];

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum WireError {
    #[error("empty input")]
    Empty,
    #[error("unknown message tag {0:#04x}")]
    UnknownMessage(u8),
    #[error("truncated input at byte {at} while reading `{field}`")]
    Truncated { at: usize, field: &'static str },
    #[error("{extra} trailing bytes after message")]
    TrailingGarbage { extra: usize },
    #[error("field `{field}`: {reason}")]
    BadField { field: &'static str, reason: String },
    #[error("envelope tag {outer:#04x} does not match sealed message tag {inner:#04x}")]
    TagMismatch { outer: u8, inner: u8 },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum OpenError {
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error(transparent)]
    Crypto(#[from] CryptoError),
    #[error("message {0} is not sealed with this kind of key")]
    WrongWrapper(MessageTag),
}

/// Which key a message is wrapped under as a whole.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Wrapper {
    /// `E_{P_KDC}`
    KdcPublicKey,
    /// `E_{P_CKS}`
    CksPublicKey,
    /// `E_{N_X}` via the nonce-derived key
    Nonce,
    /// No outer wrapper; nested ciphertexts may still appear as fields.
    Plain,
}

macro_rules! message_tags {
    ($($variant:ident = $code:literal, $name:literal, $wrapper:ident;)*) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[repr(u8)]
        pub enum MessageTag {
            $($variant = $code,)*
        }

        impl MessageTag {
            pub const ALL: &'static [MessageTag] = &[$(MessageTag::$variant,)*];

            pub fn from_u8(code: u8) -> Option<Self> {
                match code {
                    $($code => Some(MessageTag::$variant),)*
                    _ => None,
                }
            }

            /// Kebab-case name used by scenario files and trace summaries.
            pub fn name(self) -> &'static str {
                match self {
                    $(MessageTag::$variant => $name,)*
                }
            }

            pub fn from_name(name: &str) -> Option<Self> {
                match name {
                    $($name => Some(MessageTag::$variant),)*
                    _ => None,
                }
            }

            pub fn wrapper(self) -> Wrapper {
                match self {
                    $(MessageTag::$variant => Wrapper::$wrapper,)*
                }
            }
        }
    };
}

message_tags! {
    InitRegister = 0x01, "init-register", KdcPublicKey;
    InitToken = 0x02, "init-token", Nonce;
    InitRecord = 0x03, "init-record", CksPublicKey;
    RegDeviceAuth = 0x11, "reg-device-auth", CksPublicKey;
    RegDeviceAck = 0x12, "reg-device-ack", Nonce;
    RegUser = 0x13, "reg-user", CksPublicKey;
    RegUserAck = 0x14, "reg-user-ack", Nonce;
    ConnRequest = 0x21, "conn-request", CksPublicKey;
    ConnNotify = 0x22, "conn-notify", Plain;
    ConnRespond = 0x23, "conn-respond", CksPublicKey;
    ConnKeyA = 0x24, "conn-key-a", Nonce;
    ConnKeyB = 0x25, "conn-key-b", Nonce;
    ConnReject = 0x26, "conn-reject", Plain;
    SvcRequest = 0x31, "svc-request", CksPublicKey;
    SvcGrantUser = 0x32, "svc-grant-user", Nonce;
    SvcTicket = 0x33, "svc-ticket", Plain;
    SvcVerify = 0x34, "svc-verify", Plain;
    SvcConfirm = 0x35, "svc-confirm", Plain;
    SvcForward = 0x36, "svc-forward", Plain;
    AppData = 0x41, "app-data", Plain;
}

impl MessageTag {
    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn is_sealed(self) -> bool {
        self.wrapper() != Wrapper::Plain
    }
}

impl fmt::Display for MessageTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum ProtocolMessage {
    InitRegister {
        machine_id: String,
        dmn: String,
        n_m: NonceBytes,
        id_m: String,
    },
    InitToken {
        token: Digest,
    },
    InitRecord {
        machine_id: String,
        dmn: String,
        token: Digest,
    },
    RegDeviceAuth {
        machine_id: String,
        token: Digest,
        n_u: NonceBytes,
    },
    RegDeviceAck {
        ack_d: Digest,
        otp: String,
    },
    RegUser {
        id_u: String,
        otp: String,
        n_u: NonceBytes,
    },
    RegUserAck {
        ack_u: Digest,
        temp_id: String,
    },
    ConnRequest {
        id_target: String,
        token_a: Digest,
        n_a: NonceBytes,
        temp_id: String,
    },
    ConnNotify {
        id_b: String,
        id_a: String,
    },
    ConnRespond {
        token_b: Digest,
        n_b: NonceBytes,
    },
    ConnKeyA {
        k: KeyBytes,
    },
    ConnKeyB {
        k: KeyBytes,
    },
    ConnReject {
        reason: String,
    },
    SvcRequest {
        sr: String,
        p2: Vec<u8>,
        token: Digest,
        n_u: NonceBytes,
        temp_id: String,
    },
    SvcGrantUser {
        k: KeyBytes,
        enc_p1: Vec<u8>,
        id_sp: String,
        p2: Vec<u8>,
    },
    SvcTicket {
        id_sp: String,
        enc_p1: Vec<u8>,
    },
    /// `enc_identity` is `E_{P_CKS}(n_sp ‖ id_u)`, see [`SpIdentity`].
    SvcVerify {
        enc_p1: Vec<u8>,
        enc_identity: Vec<u8>,
    },
    /// `user_part` is `E_{N_U}(`[`UserPart`]`)`, `sp_part` is
    /// `E_{N_SP}(`[`SpPart`]`)`.
    SvcConfirm {
        user_part: Vec<u8>,
        sp_part: Vec<u8>,
    },
    SvcForward {
        user_part: Vec<u8>,
    },
    AppData {
        ciphertext: Vec<u8>,
    },
}

impl ProtocolMessage {
    pub fn tag(&self) -> MessageTag {
        use ProtocolMessage::*;
        match self {
            InitRegister { .. } => MessageTag::InitRegister,
            InitToken { .. } => MessageTag::InitToken,
            InitRecord { .. } => MessageTag::InitRecord,
            RegDeviceAuth { .. } => MessageTag::RegDeviceAuth,
            RegDeviceAck { .. } => MessageTag::RegDeviceAck,
            RegUser { .. } => MessageTag::RegUser,
            RegUserAck { .. } => MessageTag::RegUserAck,
            ConnRequest { .. } => MessageTag::ConnRequest,
            ConnNotify { .. } => MessageTag::ConnNotify,
            ConnRespond { .. } => MessageTag::ConnRespond,
            ConnKeyA { .. } => MessageTag::ConnKeyA,
            ConnKeyB { .. } => MessageTag::ConnKeyB,
            ConnReject { .. } => MessageTag::ConnReject,
            SvcRequest { .. } => MessageTag::SvcRequest,
            SvcGrantUser { .. } => MessageTag::SvcGrantUser,
            SvcTicket { .. } => MessageTag::SvcTicket,
            SvcVerify { .. } => MessageTag::SvcVerify,
            SvcConfirm { .. } => MessageTag::SvcConfirm,
            SvcForward { .. } => MessageTag::SvcForward,
            AppData { .. } => MessageTag::AppData,
        }
    }

    /// Field values in wire order, as raw byte slices.
    pub fn fields(&self) -> Vec<(&'static str, &[u8])> {
        use ProtocolMessage::*;
        match self {
            InitRegister {
                machine_id,
                dmn,
                n_m,
                id_m,
            } => vec![
                ("machine_id", machine_id.as_bytes()),
                ("dmn", dmn.as_bytes()),
                ("n_m", n_m),
                ("id_m", id_m.as_bytes()),
            ],
            InitToken { token } => vec![("token", token.as_bytes())],
            InitRecord {
                machine_id,
                dmn,
                token,
            } => vec![
                ("machine_id", machine_id.as_bytes()),
                ("dmn", dmn.as_bytes()),
                ("token", token.as_bytes()),
            ],
            RegDeviceAuth {
                machine_id,
                token,
                n_u,
            } => vec![
                ("machine_id", machine_id.as_bytes()),
                ("token", token.as_bytes()),
                ("n_u", n_u),
            ],
            RegDeviceAck { ack_d, otp } => {
                vec![("ack_d", ack_d.as_bytes()), ("otp", otp.as_bytes())]
            }
            RegUser { id_u, otp, n_u } => vec![
                ("id_u", id_u.as_bytes()),
                ("otp", otp.as_bytes()),
                ("n_u", n_u),
            ],
            RegUserAck { ack_u, temp_id } => {
                vec![("ack_u", ack_u.as_bytes()), ("temp_id", temp_id.as_bytes())]
            }
            ConnRequest {
                id_target,
                token_a,
                n_a,
                temp_id,
            } => vec![
                ("id_target", id_target.as_bytes()),
                ("token_a", token_a.as_bytes()),
                ("n_a", n_a),
                ("temp_id", temp_id.as_bytes()),
            ],
            ConnNotify { id_b, id_a } => vec![("id_b", id_b.as_bytes()), ("id_a", id_a.as_bytes())],
            ConnRespond { token_b, n_b } => vec![("token_b", token_b.as_bytes()), ("n_b", n_b)],
            ConnKeyA { k } | ConnKeyB { k } => vec![("k", k)],
            ConnReject { reason } => vec![("reason", reason.as_bytes())],
            SvcRequest {
                sr,
                p2,
                token,
                n_u,
                temp_id,
            } => vec![
                ("sr", sr.as_bytes()),
                ("p2", p2),
                ("token", token.as_bytes()),
                ("n_u", n_u),
                ("temp_id", temp_id.as_bytes()),
            ],
            SvcGrantUser {
                k,
                enc_p1,
                id_sp,
                p2,
            } => vec![
                ("k", k),
                ("enc_p1", enc_p1),
                ("id_sp", id_sp.as_bytes()),
                ("p2", p2),
            ],
            SvcTicket { id_sp, enc_p1 } => vec![("id_sp", id_sp.as_bytes()), ("enc_p1", enc_p1)],
            SvcVerify {
                enc_p1,
                enc_identity,
            } => vec![("enc_p1", enc_p1), ("enc_identity", enc_identity)],
            SvcConfirm { user_part, sp_part } => {
                vec![("user_part", user_part), ("sp_part", sp_part)]
            }
            SvcForward { user_part } => vec![("user_part", user_part)],
            AppData { ciphertext } => vec![("ciphertext", ciphertext)],
        }
    }

    /// Canonical encoding: tag byte, then length-prefixed fields.
    pub fn encode(&self) -> Vec<u8> {
        let mut w = FieldWriter::with_tag(self.tag());
        for (_, f) in self.fields() {
            w.field(f);
        }
        w.finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, WireError> {
        let (&code, _) = bytes.split_first().ok_or(WireError::Empty)?;
        let tag = MessageTag::from_u8(code).ok_or(WireError::UnknownMessage(code))?;
        let mut r = FieldReader::new(bytes, 1);
        let m = decode_body(tag, &mut r)?;
        r.finish()?;
        Ok(m)
    }
}

fn decode_body(tag: MessageTag, r: &mut FieldReader<'_>) -> Result<ProtocolMessage, WireError> {
    use ProtocolMessage as M;
    Ok(match tag {
        MessageTag::InitRegister => M::InitRegister {
            machine_id: r.string("machine_id")?,
            dmn: r.string("dmn")?,
            n_m: r.array("n_m")?,
            id_m: r.string("id_m")?,
        },
        MessageTag::InitToken => M::InitToken {
            token: r.digest("token")?,
        },
        MessageTag::InitRecord => M::InitRecord {
            machine_id: r.string("machine_id")?,
            dmn: r.string("dmn")?,
            token: r.digest("token")?,
        },
        MessageTag::RegDeviceAuth => M::RegDeviceAuth {
            machine_id: r.string("machine_id")?,
            token: r.digest("token")?,
            n_u: r.array("n_u")?,
        },
        MessageTag::RegDeviceAck => M::RegDeviceAck {
            ack_d: r.digest("ack_d")?,
            otp: r.string("otp")?,
        },
        MessageTag::RegUser => M::RegUser {
            id_u: r.string("id_u")?,
            otp: r.string("otp")?,
            n_u: r.array("n_u")?,
        },
        MessageTag::RegUserAck => M::RegUserAck {
            ack_u: r.digest("ack_u")?,
            temp_id: r.string("temp_id")?,
        },
        MessageTag::ConnRequest => M::ConnRequest {
            id_target: r.string("id_target")?,
            token_a: r.digest("token_a")?,
            n_a: r.array("n_a")?,
            temp_id: r.string("temp_id")?,
        },
        MessageTag::ConnNotify => M::ConnNotify {
            id_b: r.string("id_b")?,
            id_a: r.string("id_a")?,
        },
        MessageTag::ConnRespond => M::ConnRespond {
            token_b: r.digest("token_b")?,
            n_b: r.array("n_b")?,
        },
        MessageTag::ConnKeyA => M::ConnKeyA { k: r.array("k")? },
        MessageTag::ConnKeyB => M::ConnKeyB { k: r.array("k")? },
        MessageTag::ConnReject => M::ConnReject {
            reason: r.string("reason")?,
        },
        MessageTag::SvcRequest => M::SvcRequest {
            sr: r.string("sr")?,
            p2: r.bytes("p2")?,
            token: r.digest("token")?,
            n_u: r.array("n_u")?,
            temp_id: r.string("temp_id")?,
        },
        MessageTag::SvcGrantUser => M::SvcGrantUser {
            k: r.array("k")?,
            enc_p1: r.bytes("enc_p1")?,
            id_sp: r.string("id_sp")?,
            p2: r.bytes("p2")?,
        },
        MessageTag::SvcTicket => M::SvcTicket {
            id_sp: r.string("id_sp")?,
            enc_p1: r.bytes("enc_p1")?,
        },
        MessageTag::SvcVerify => M::SvcVerify {
            enc_p1: r.bytes("enc_p1")?,
            enc_identity: r.bytes("enc_identity")?,
        },
        MessageTag::SvcConfirm => M::SvcConfirm {
            user_part: r.bytes("user_part")?,
            sp_part: r.bytes("sp_part")?,
        },
        MessageTag::SvcForward => M::SvcForward {
            user_part: r.bytes("user_part")?,
        },
        MessageTag::AppData => M::AppData {
            ciphertext: r.bytes("ciphertext")?,
        },
    })
}

/// Plaintext of `E_{N_U}(P2 ‖ K ‖ ID_SP)`, carried in `SvcConfirm` and
/// `SvcForward`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UserPart {
    pub p2: Vec<u8>,
    pub k: KeyBytes,
    pub id_sp: String,
}

/// Plaintext of `E_{N_SP}(K ‖ ID_U)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpPart {
    pub k: KeyBytes,
    pub id_u: String,
}

/// Plaintext of `E_{P_CKS}(N_SP ‖ ID_U)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpIdentity {
    pub n_sp: NonceBytes,
    pub id_u: String,
}

impl UserPart {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = FieldWriter::default();
        w.field(&self.p2)
            .field(&self.k)
            .field(self.id_sp.as_bytes());
        w.finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, WireError> {
        let mut r = FieldReader::new(bytes, 0);
        let v = UserPart {
            p2: r.bytes("p2")?,
            k: r.array("k")?,
            id_sp: r.string("id_sp")?,
        };
        r.finish()?;
        Ok(v)
    }
}

impl SpPart {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = FieldWriter::default();
        w.field(&self.k).field(self.id_u.as_bytes());
        w.finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, WireError> {
        let mut r = FieldReader::new(bytes, 0);
        let v = SpPart {
            k: r.array("k")?,
            id_u: r.string("id_u")?,
        };
        r.finish()?;
        Ok(v)
    }
}

impl SpIdentity {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = FieldWriter::default();
        w.field(&self.n_sp).field(self.id_u.as_bytes());
        w.finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, WireError> {
        let mut r = FieldReader::new(bytes, 0);
        let v = SpIdentity {
            n_sp: r.array("n_sp")?,
            id_u: r.string("id_u")?,
        };
        r.finish()?;
        Ok(v)
    }
}

/// A message as it travels in a frame payload.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Envelope {
    Sealed {
        tag: MessageTag,
        ciphertext: Vec<u8>,
    },
    Plain(ProtocolMessage),
}

impl Envelope {
    pub fn tag(&self) -> MessageTag {
        match self {
            Envelope::Sealed { tag, .. } => *tag,
            Envelope::Plain(m) => m.tag(),
        }
    }

    pub fn plain(m: ProtocolMessage) -> Self {
        debug_assert!(!m.tag().is_sealed(), "{} must be sealed", m.tag());
        Envelope::Plain(m)
    }

    pub fn seal_pk<R: RngCore + CryptoRng>(
        m: &ProtocolMessage,
        pk: &PublicKey,
        mode: CryptoMode,
        rng: &mut R,
    ) -> Self {
        Envelope::Sealed {
            tag: m.tag(),
            ciphertext: crypto::pk_encrypt(mode, pk, &m.encode(), rng).to_bytes(),
        }
    }

    pub fn seal_sym<R: RngCore + CryptoRng>(
        m: &ProtocolMessage,
        key: &SymKey,
        mode: CryptoMode,
        rng: &mut R,
    ) -> Self {
        Envelope::Sealed {
            tag: m.tag(),
            ciphertext: crypto::sym_encrypt(mode, key, &m.encode(), rng).to_bytes(),
        }
    }

    pub fn open_pk(&self, sk: &PrivateKey) -> Result<ProtocolMessage, OpenError> {
        match self {
            Envelope::Sealed { tag, ciphertext } if tag.wrapper() != Wrapper::Nonce => {
                check_inner(*tag, &crypto::pk_open(sk, ciphertext)?)
            }
            other => Err(OpenError::WrongWrapper(other.tag())),
        }
    }

    pub fn open_sym(&self, key: &SymKey) -> Result<ProtocolMessage, OpenError> {
        match self {
            Envelope::Sealed { tag, ciphertext } if tag.wrapper() == Wrapper::Nonce => {
                check_inner(*tag, &crypto::sym_open(key, ciphertext)?)
            }
            other => Err(OpenError::WrongWrapper(other.tag())),
        }
    }

    /// Key reference of a sealed envelope, read from the ciphertext header.
    pub fn key_ref(&self) -> Option<String> {
        match self {
            Envelope::Sealed { ciphertext, .. } => crypto::Ciphertext::from_bytes(ciphertext)
                .ok()
                .map(|c| c.key_ref),
            Envelope::Plain(_) => None,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        match self {
            Envelope::Sealed { tag, ciphertext } => {
                let mut w = FieldWriter::with_tag(*tag);
                w.field(ciphertext);
                w.finish()
            }
            Envelope::Plain(m) => m.encode(),
        }
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, WireError> {
        let (&code, _) = bytes.split_first().ok_or(WireError::Empty)?;
        let tag = MessageTag::from_u8(code).ok_or(WireError::UnknownMessage(code))?;
        if tag.is_sealed() {
            let mut r = FieldReader::new(bytes, 1);
            let ciphertext = r.bytes("ciphertext")?;
            r.finish()?;
            Ok(Envelope::Sealed { tag, ciphertext })
        } else {
            ProtocolMessage::decode(bytes).map(Envelope::Plain)
        }
    }
}

fn check_inner(outer: MessageTag, plaintext: &[u8]) -> Result<ProtocolMessage, OpenError> {
    let m = ProtocolMessage::decode(plaintext)?;
    if m.tag() != outer {
        return Err(WireError::TagMismatch {
            outer: outer.code(),
            inner: m.tag().code(),
        }
        .into());
    }
    Ok(m)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Channel {
    Open,
    Secure,
}

impl Channel {
    pub fn as_str(self) -> &'static str {
        match self {
            Channel::Open => "open",
            Channel::Secure => "secure",
        }
    }
}

/// One unit of delivery on the simulated network.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub seq: u64,
    pub from: String,
    pub to: String,
    pub channel: Channel,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn tag(&self) -> Option<MessageTag> {
        self.payload.first().copied().and_then(MessageTag::from_u8)
    }

    pub fn envelope(&self) -> Result<Envelope, WireError> {
        Envelope::decode(&self.payload)
    }
}

#[derive(Debug, Default)]
struct FieldWriter {
    out: Vec<u8>,
}

impl FieldWriter {
    fn with_tag(tag: MessageTag) -> Self {
        Self {
            out: vec![tag.code()],
        }
    }

    fn field(&mut self, bytes: &[u8]) -> &mut Self {
        let len = u32::try_from(bytes.len()).expect("field longer than u32::MAX");
        self.out.extend_from_slice(&len.to_be_bytes());
        self.out.extend_from_slice(bytes);
        self
    }

    fn finish(self) -> Vec<u8> {
        self.out
    }
}

struct FieldReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> FieldReader<'a> {
    fn new(buf: &'a [u8], pos: usize) -> Self {
        Self { buf, pos }
    }

    fn raw(&mut self, field: &'static str) -> Result<&'a [u8], WireError> {
        let rest = &self.buf[self.pos..];
        if rest.len() < 4 {
            return Err(WireError::Truncated {
                at: self.buf.len(),
                field,
            });
        }
        let len = u32::from_be_bytes(rest[..4].try_into().unwrap()) as usize;
        if rest.len() - 4 < len {
            return Err(WireError::Truncated {
                at: self.buf.len(),
                field,
            });
        }
        let start = self.pos + 4;
        self.pos = start + len;
        Ok(&self.buf[start..start + len])
    }

    fn bytes(&mut self, field: &'static str) -> Result<Vec<u8>, WireError> {
        self.raw(field).map(<[u8]>::to_vec)
    }

    fn string(&mut self, field: &'static str) -> Result<String, WireError> {
        let raw = self.raw(field)?;
        String::from_utf8(raw.to_vec()).map_err(|_| WireError::BadField {
            field,
            reason: "not valid utf-8".into(),
        })
    }

    fn array<const N: usize>(&mut self, field: &'static str) -> Result<[u8; N], WireError> {
        let raw = self.raw(field)?;
        raw.try_into().map_err(|_| WireError::BadField {
            field,
            reason: format!("expected {N} bytes, found {}", raw.len()),
        })
    }

    fn digest(&mut self, field: &'static str) -> Result<Digest, WireError> {
        let raw = self.raw(field)?;
        Digest::from_bytes(raw).ok_or_else(|| WireError::BadField {
            field,
            reason: format!("{} bytes is not a digest length", raw.len()),
        })
    }

    fn finish(&self) -> Result<(), WireError> {
        match self.buf.len() - self.pos {
            0 => Ok(()),
            extra => Err(WireError::TrailingGarbage { extra }),
        }
    }
}
