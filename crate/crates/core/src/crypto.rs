//! Cryptographic primitives for the protocol.
//!
//! Every primitive runs in one of two modes:
//!
//!   * `opaque`: X25519 hybrid public-key wrapping and XChaCha20-Poly1305
//!     authenticated symmetric encryption. Ciphertext bodies are
//!     pseudorandom bytes.
//!   * `transparent`: ciphertexts are structured records that carry their
//!     plaintext in the clear together with an integrity check. The network
//!     still treats them as opaque frames; only the trace verifier looks
//!     inside, and it only "opens" a record when the closure holds the key.
//!
//! Both modes share the same serialized [`Ciphertext`] envelope, so the state
//! machines behave identically regardless of mode.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use chacha20poly1305::aead::{Aead, KeyInit, Payload};
use chacha20poly1305::{XChaCha20Poly1305, XNonce};
use hmac::{Hmac, Mac};
use rand::{CryptoRng, Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};
use thiserror::Error;

pub const NONCE_LEN: usize = 16;
pub const SYM_KEY_LEN: usize = 32;
pub const PASSPHRASE_LEN: usize = 16;
pub const OTP_DIGITS: usize = 8;
pub const TEMP_ID_PREFIX: &str = "TID-";

const XNONCE_LEN: usize = 24;
const X25519_LEN: usize = 32;

const NONCE_KEY_LABEL: &[u8] = b"stwa/nonce-key/v1";
const KEY_REF_LABEL: &[u8] = b"stwa/key-ref/v1";
const PK_WRAP_LABEL: &[u8] = b"stwa/pk-wrap/v1";
const TRANSPARENT_SYM_LABEL: &[u8] = b"stwa/transparent-sym/v1";
const TRANSPARENT_PK_LABEL: &[u8] = b"stwa/transparent-pk/v1";

type HmacSha256 = Hmac<Sha256>;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CryptoError {
    #[error("decryption failure: key does not match ciphertext ({0})")]
    DecryptionFailure(String),
    #[error("ciphertext failed authentication")]
    Tamper,
    #[error("malformed ciphertext: {0}")]
    Codec(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown {kind} `{value}`")]
pub struct ParseConfigError {
    kind: &'static str,
    value: String,
}

/// Hash function backing `H` in token and acknowledgement derivation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum HashAlg {
    #[default]
    #[serde(rename = "sha2-256")]
    Sha256,
    #[serde(rename = "legacy-md5")]
    LegacyMd5,
    #[serde(rename = "legacy-sha1")]
    LegacySha1,
}

impl HashAlg {
    pub fn output_len(self) -> usize {
        match self {
            HashAlg::Sha256 => 32,
            HashAlg::LegacyMd5 => 16,
            HashAlg::LegacySha1 => 20,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            HashAlg::Sha256 => "sha2-256",
            HashAlg::LegacyMd5 => "legacy-md5",
            HashAlg::LegacySha1 => "legacy-sha1",
        }
    }
}

impl FromStr for HashAlg {
    type Err = ParseConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sha2-256" => Ok(HashAlg::Sha256),
            "legacy-md5" => Ok(HashAlg::LegacyMd5),
            "legacy-sha1" => Ok(HashAlg::LegacySha1),
            other => Err(ParseConfigError {
                kind: "hash algorithm",
                value: other.to_string(),
            }),
        }
    }
}

impl fmt::Display for HashAlg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CryptoMode {
    Opaque,
    #[default]
    Transparent,
}

impl CryptoMode {
    fn code(self) -> u8 {
        match self {
            CryptoMode::Opaque => 0x00,
            CryptoMode::Transparent => 0x01,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            CryptoMode::Opaque => "opaque",
            CryptoMode::Transparent => "transparent",
        }
    }
}

impl FromStr for CryptoMode {
    type Err = ParseConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "opaque" => Ok(CryptoMode::Opaque),
            "transparent" => Ok(CryptoMode::Transparent),
            other => Err(ParseConfigError {
                kind: "crypto mode",
                value: other.to_string(),
            }),
        }
    }
}

impl fmt::Display for CryptoMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Mode plus hash selection; threaded through every actor step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CryptoSuite {
    pub mode: CryptoMode,
    pub hash_alg: HashAlg,
}

impl CryptoSuite {
    pub fn new(mode: CryptoMode, hash_alg: HashAlg) -> Self {
        Self { mode, hash_alg }
    }

    pub fn hash(&self, data: &[u8]) -> Digest {
        hash_with(self.hash_alg, data)
    }

    /// `H(a ‖ b ‖ ...)` over raw concatenation.
    pub fn hash_concat(&self, parts: &[&[u8]]) -> Digest {
        hash_with(self.hash_alg, &parts.concat())
    }
}

#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Digest(#[serde(with = "hex_bytes")] Vec<u8>);

impl Digest {
    /// Accepts any of the supported digest lengths.
    pub fn from_bytes(bytes: &[u8]) -> Option<Self> {
        matches!(bytes.len(), 16 | 20 | 32).then(|| Digest(bytes.to_vec()))
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(&self.0)
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({})", self.to_hex())
    }
}

pub fn hash_with(alg: HashAlg, data: &[u8]) -> Digest {
    let bytes = match alg {
        HashAlg::Sha256 => Sha256::digest(data).to_vec(),
        HashAlg::LegacyMd5 => md5::Md5::digest(data).to_vec(),
        HashAlg::LegacySha1 => sha1::Sha1::digest(data).to_vec(),
    };
    Digest(bytes)
}

#[derive(Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PublicKey {
    pub key_id: String,
    #[serde(with = "hex_bytes_32")]
    pub bytes: [u8; X25519_LEN],
}

#[derive(Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrivateKey {
    pub key_id: String,
    #[serde(with = "hex_bytes_32")]
    bytes: [u8; X25519_LEN],
}

impl fmt::Debug for PublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PublicKey({}, {})", self.key_id, hex::encode(self.bytes))
    }
}

impl fmt::Debug for PrivateKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PrivateKey({}, ..)", self.key_id)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AsymKeyPair {
    pub public: PublicKey,
    pub private: PrivateKey,
}

/// Deterministic key pair from a 64-bit seed.
pub fn generate_keypair(seed: u64, key_id: &str) -> AsymKeyPair {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut secret = [0u8; X25519_LEN];
    rng.fill_bytes(&mut secret);
    let static_secret = x25519_dalek::StaticSecret::from(secret);
    let public = x25519_dalek::PublicKey::from(&static_secret);
    AsymKeyPair {
        public: PublicKey {
            key_id: key_id.to_string(),
            bytes: public.to_bytes(),
        },
        private: PrivateKey {
            key_id: key_id.to_string(),
            bytes: static_secret.to_bytes(),
        },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KeyOrigin {
    NonceDerived,
    Session,
    Storage,
}

#[derive(Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SymKey {
    #[serde(with = "hex_bytes_32")]
    pub value: [u8; SYM_KEY_LEN],
    pub origin: KeyOrigin,
}

impl SymKey {
    pub fn new(value: [u8; SYM_KEY_LEN], origin: KeyOrigin) -> Self {
        Self { value, origin }
    }

    /// Public fingerprint carried in the ciphertext header.
    pub fn key_ref(&self) -> String {
        key_ref_of(&self.value)
    }
}

impl fmt::Debug for SymKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "SymKey({:?}, {})", self.origin, self.key_ref())
    }
}

/// Fingerprint of raw key material, used as the `key_ref` of symmetric
/// ciphertexts.
pub fn key_ref_of(key: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(KEY_REF_LABEL);
    h.update(key);
    hex::encode(&h.finalize()[..8])
}

#[derive(Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Nonce {
    #[serde(with = "hex_bytes_16")]
    pub value: [u8; NONCE_LEN],
    pub owner: String,
}

impl Nonce {
    pub fn key(&self) -> SymKey {
        nonce_key(&self.value)
    }
}

impl fmt::Debug for Nonce {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Nonce({}, {})", self.owner, hex::encode(self.value))
    }
}

/// Symmetric key standing in for "encrypt with the nonce": HMAC-SHA256 of the
/// nonce under a fixed domain-separation label.
pub fn nonce_key(nonce: &[u8; NONCE_LEN]) -> SymKey {
    let mut mac =
        <HmacSha256 as Mac>::new_from_slice(NONCE_KEY_LABEL).expect("hmac takes any key length");
    mac.update(nonce);
    let out = mac.finalize().into_bytes();
    let mut value = [0u8; SYM_KEY_LEN];
    value.copy_from_slice(&out);
    SymKey::new(value, KeyOrigin::NonceDerived)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CipherKind {
    Asym,
    Sym,
}

impl CipherKind {
    fn code(self) -> u8 {
        match self {
            CipherKind::Asym => 0x01,
            CipherKind::Sym => 0x02,
        }
    }
}

/// Serialized layout: `mode ‖ kind ‖ lp(key_ref) ‖ lp(body) ‖ lp(check)`,
/// `lp` being a 4-byte big-endian length prefix. `check` is empty in opaque
/// mode, where the AEAD tag lives inside `body`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Ciphertext {
    pub mode: CryptoMode,
    pub kind: CipherKind,
    pub key_ref: String,
    pub body: Vec<u8>,
    pub check: Vec<u8>,
}

impl Ciphertext {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out =
            Vec::with_capacity(14 + self.key_ref.len() + self.body.len() + self.check.len());
        out.push(self.mode.code());
        out.push(self.kind.code());
        for field in [self.key_ref.as_bytes(), &self.body, &self.check] {
            out.extend_from_slice(&(field.len() as u32).to_be_bytes());
            out.extend_from_slice(field);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CryptoError> {
        let codec = |m: &str| CryptoError::Codec(m.to_string());
        if bytes.len() < 2 {
            return Err(codec("truncated header"));
        }
        let mode = match bytes[0] {
            0x00 => CryptoMode::Opaque,
            0x01 => CryptoMode::Transparent,
            b => return Err(CryptoError::Codec(format!("unknown mode byte {b:#04x}"))),
        };
        let kind = match bytes[1] {
            0x01 => CipherKind::Asym,
            0x02 => CipherKind::Sym,
            b => return Err(CryptoError::Codec(format!("unknown kind byte {b:#04x}"))),
        };
        let mut rest = &bytes[2..];
        let mut take = || -> Result<Vec<u8>, CryptoError> {
            if rest.len() < 4 {
                return Err(codec("truncated length prefix"));
            }
            let len = u32::from_be_bytes(rest[..4].try_into().unwrap()) as usize;
            if rest.len() - 4 < len {
                return Err(codec("truncated field"));
            }
            let field = rest[4..4 + len].to_vec();
            rest = &rest[4 + len..];
            Ok(field)
        };
        let key_ref = String::from_utf8(take()?).map_err(|_| codec("key_ref is not utf-8"))?;
        let body = take()?;
        let check = take()?;
        if !rest.is_empty() {
            return Err(codec("trailing bytes"));
        }
        Ok(Ciphertext {
            mode,
            kind,
            key_ref,
            body,
            check,
        })
    }

    fn header(&self) -> Vec<u8> {
        let mut out = vec![self.mode.code(), self.kind.code()];
        out.extend_from_slice(&(self.key_ref.len() as u32).to_be_bytes());
        out.extend_from_slice(self.key_ref.as_bytes());
        out
    }

    /// Plaintext of a transparent record without any key check. Only the
    /// verifier uses this, to build the term structure of a trace.
    pub fn transparent_plaintext(&self) -> Option<&[u8]> {
        (self.mode == CryptoMode::Transparent).then_some(self.body.as_slice())
    }
}

fn transparent_sym_check(key: &SymKey, key_ref: &str, body: &[u8]) -> Vec<u8> {
    let mut mac =
        <HmacSha256 as Mac>::new_from_slice(&key.value).expect("hmac takes any key length");
    mac.update(TRANSPARENT_SYM_LABEL);
    mac.update(key_ref.as_bytes());
    mac.update(body);
    mac.finalize().into_bytes().to_vec()
}

fn transparent_pk_check(key_id: &str, body: &[u8]) -> Vec<u8> {
    let mut h = Sha256::new();
    h.update(TRANSPARENT_PK_LABEL);
    h.update((key_id.len() as u32).to_be_bytes());
    h.update(key_id.as_bytes());
    h.update(body);
    h.finalize().to_vec()
}

fn wrap_key(shared: &[u8], eph_pub: &[u8], recipient: &[u8]) -> chacha20poly1305::Key {
    let mut h = Sha256::new();
    h.update(PK_WRAP_LABEL);
    h.update(shared);
    h.update(eph_pub);
    h.update(recipient);
    h.finalize()
}

pub fn pk_encrypt<R: RngCore + CryptoRng>(
    mode: CryptoMode,
    pk: &PublicKey,
    m: &[u8],
    rng: &mut R,
) -> Ciphertext {
    let mut ct = Ciphertext {
        mode,
        kind: CipherKind::Asym,
        key_ref: pk.key_id.clone(),
        body: Vec::new(),
        check: Vec::new(),
    };
    match mode {
        CryptoMode::Transparent => {
            ct.check = transparent_pk_check(&pk.key_id, m);
            ct.body = m.to_vec();
        }
        CryptoMode::Opaque => {
            let mut eph = [0u8; X25519_LEN];
            rng.fill_bytes(&mut eph);
            let eph = x25519_dalek::StaticSecret::from(eph);
            let eph_pub = x25519_dalek::PublicKey::from(&eph);
            let shared = eph.diffie_hellman(&x25519_dalek::PublicKey::from(pk.bytes));
            let key = wrap_key(shared.as_bytes(), eph_pub.as_bytes(), &pk.bytes);
            let mut xnonce = [0u8; XNONCE_LEN];
            rng.fill_bytes(&mut xnonce);
            let aad = ct.header();
            let sealed = XChaCha20Poly1305::new(&key)
                .encrypt(XNonce::from_slice(&xnonce), Payload { msg: m, aad: &aad })
                .expect("in-memory encryption does not fail");
            ct.body = [eph_pub.as_bytes().as_slice(), &xnonce, &sealed].concat();
        }
    }
    ct
}

pub fn pk_decrypt(sk: &PrivateKey, ct: &Ciphertext) -> Result<Vec<u8>, CryptoError> {
    if ct.kind != CipherKind::Asym {
        return Err(CryptoError::DecryptionFailure(
            "not a public-key ciphertext".into(),
        ));
    }
    if ct.key_ref != sk.key_id {
        return Err(CryptoError::DecryptionFailure(format!(
            "encrypted for `{}`, decrypting as `{}`",
            ct.key_ref, sk.key_id
        )));
    }
    match ct.mode {
        CryptoMode::Transparent => {
            if ct.check != transparent_pk_check(&ct.key_ref, &ct.body) {
                return Err(CryptoError::Tamper);
            }
            Ok(ct.body.clone())
        }
        CryptoMode::Opaque => {
            if ct.body.len() < X25519_LEN + XNONCE_LEN || !ct.check.is_empty() {
                return Err(CryptoError::Tamper);
            }
            let (eph_pub, rest) = ct.body.split_at(X25519_LEN);
            let (xnonce, sealed) = rest.split_at(XNONCE_LEN);
            let eph_pub: [u8; X25519_LEN] = eph_pub.try_into().unwrap();
            let secret = x25519_dalek::StaticSecret::from(sk.bytes);
            let recipient = x25519_dalek::PublicKey::from(&secret);
            let shared = secret.diffie_hellman(&x25519_dalek::PublicKey::from(eph_pub));
            let key = wrap_key(shared.as_bytes(), &eph_pub, recipient.as_bytes());
            let aad = ct.header();
            XChaCha20Poly1305::new(&key)
                .decrypt(
                    XNonce::from_slice(xnonce),
                    Payload {
                        msg: sealed,
                        aad: &aad,
                    },
                )
                .map_err(|_| CryptoError::Tamper)
        }
    }
}

pub fn sym_encrypt<R: RngCore + CryptoRng>(
    mode: CryptoMode,
    key: &SymKey,
    m: &[u8],
    rng: &mut R,
) -> Ciphertext {
    let mut ct = Ciphertext {
        mode,
        kind: CipherKind::Sym,
        key_ref: key.key_ref(),
        body: Vec::new(),
        check: Vec::new(),
    };
    match mode {
        CryptoMode::Transparent => {
            ct.check = transparent_sym_check(key, &ct.key_ref, m);
            ct.body = m.to_vec();
        }
        CryptoMode::Opaque => {
            let mut xnonce = [0u8; XNONCE_LEN];
            rng.fill_bytes(&mut xnonce);
            let aad = ct.header();
            let sealed = XChaCha20Poly1305::new((&key.value).into())
                .encrypt(XNonce::from_slice(&xnonce), Payload { msg: m, aad: &aad })
                .expect("in-memory encryption does not fail");
            ct.body = [xnonce.as_slice(), &sealed].concat();
        }
    }
    ct
}

pub fn sym_decrypt(key: &SymKey, ct: &Ciphertext) -> Result<Vec<u8>, CryptoError> {
    if ct.kind != CipherKind::Sym {
        return Err(CryptoError::DecryptionFailure(
            "not a symmetric ciphertext".into(),
        ));
    }
    if ct.key_ref != key.key_ref() {
        return Err(CryptoError::DecryptionFailure(format!(
            "encrypted under {}, decrypting with {}",
            ct.key_ref,
            key.key_ref()
        )));
    }
    match ct.mode {
        CryptoMode::Transparent => {
            if ct.check != transparent_sym_check(key, &ct.key_ref, &ct.body) {
                return Err(CryptoError::Tamper);
            }
            Ok(ct.body.clone())
        }
        CryptoMode::Opaque => {
            if ct.body.len() < XNONCE_LEN || !ct.check.is_empty() {
                return Err(CryptoError::Tamper);
            }
            let (xnonce, sealed) = ct.body.split_at(XNONCE_LEN);
            let aad = ct.header();
            XChaCha20Poly1305::new((&key.value).into())
                .decrypt(
                    XNonce::from_slice(xnonce),
                    Payload {
                        msg: sealed,
                        aad: &aad,
                    },
                )
                .map_err(|_| CryptoError::Tamper)
        }
    }
}

/// Convenience wrappers that work on serialized ciphertext bytes.
pub fn sym_open(key: &SymKey, bytes: &[u8]) -> Result<Vec<u8>, CryptoError> {
    sym_decrypt(key, &Ciphertext::from_bytes(bytes)?)
}

pub fn pk_open(sk: &PrivateKey, bytes: &[u8]) -> Result<Vec<u8>, CryptoError> {
    pk_decrypt(sk, &Ciphertext::from_bytes(bytes)?)
}

/// Seeded randomness for one simulation run.
///
/// Protocol values (nonces, session keys, OTPs, TempIDs, pass-phrases) are
/// drawn through the `fresh_*` methods, which keep a uniqueness table and
/// redraw on collision. Raw `RngCore` access is used for encryption
/// randomness.
#[derive(Debug, Clone)]
pub struct Entropy {
    rng: ChaCha20Rng,
    issued: HashSet<(u8, Vec<u8>)>,
}

impl Entropy {
    pub fn from_seed(seed: u64) -> Self {
        Self {
            rng: ChaCha20Rng::seed_from_u64(seed),
            issued: HashSet::new(),
        }
    }

    fn unique<T, F>(&mut self, table: u8, mut draw: F) -> T
    where
        T: AsRef<[u8]>,
        F: FnMut(&mut ChaCha20Rng) -> T,
    {
        loop {
            let v = draw(&mut self.rng);
            if self.issued.insert((table, v.as_ref().to_vec())) {
                return v;
            }
        }
    }

    pub fn fresh_nonce(&mut self, owner: &str) -> Nonce {
        let value = self.unique(0, |r| r.gen::<[u8; NONCE_LEN]>());
        Nonce {
            value,
            owner: owner.to_string(),
        }
    }

    pub fn fresh_session_key(&mut self) -> SymKey {
        SymKey::new(self.unique(1, |r| r.gen()), KeyOrigin::Session)
    }

    pub fn fresh_otp(&mut self) -> String {
        self.unique(2, |r| format!("{:08}", r.gen_range(0..100_000_000u32)))
    }

    pub fn fresh_temp_id(&mut self) -> String {
        self.unique(3, |r| {
            format!("{TEMP_ID_PREFIX}{}", hex::encode(r.gen::<[u8; 8]>()))
        })
    }

    pub fn fresh_passphrase(&mut self) -> [u8; PASSPHRASE_LEN] {
        self.unique(4, |r| r.gen())
    }

    pub fn fresh_storage_key(&mut self) -> SymKey {
        SymKey::new(self.unique(5, |r| r.gen()), KeyOrigin::Storage)
    }

    pub fn next_seed(&mut self) -> u64 {
        self.rng.next_u64()
    }
}

impl RngCore for Entropy {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.rng.fill_bytes(dest)
    }

    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> Result<(), rand::Error> {
        self.rng.try_fill_bytes(dest)
    }
}

impl CryptoRng for Entropy {}

pub(crate) mod hex_bytes {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let s = String::deserialize(d)?;
        hex::decode(s).map_err(serde::de::Error::custom)
    }
}

macro_rules! hex_array_serde {
    ($name:ident, $len:expr) => {
        pub(crate) mod $name {
            use serde::{Deserialize, Deserializer, Serializer};

            pub fn serialize<S: Serializer>(bytes: &[u8; $len], s: S) -> Result<S::Ok, S::Error> {
                s.serialize_str(&hex::encode(bytes))
            }

            pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<[u8; $len], D::Error> {
                let s = String::deserialize(d)?;
                let v = hex::decode(s).map_err(serde::de::Error::custom)?;
                v.try_into()
                    .map_err(|_| serde::de::Error::custom(concat!("expected ", $len, " bytes")))
            }
        }
    };
}

hex_array_serde!(hex_bytes_16, 16);
hex_array_serde!(hex_bytes_32, 32);

#[cfg(test)]
mod tests {
    use super::*;

    fn rng() -> Entropy {
        Entropy::from_seed(99)
    }

    // Reference digests computed with coreutils `sha256sum`/`md5sum`/`sha1sum`
    // and Python's hashlib, independent of the crates used here.
    const SHA256_EMPTY: &str = "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855";
    const MD5_EMPTY: &str = "d41d8cd98f00b204e9800998ecf8427e";
    const SHA1_EMPTY: &str = "da39a3ee5e6b4b0d3255bfef95601890afd80709";
    const SHA256_TOKEN_FIXTURE: &str =
        "a0460e20943cfbce5f1c9528b29fdc712a6fe1003ea06ff06bdc69adb90e3a16";

    #[test]
    fn hash_empty_matches_reference() {
        assert_eq!(hash_with(HashAlg::Sha256, b"").to_hex(), SHA256_EMPTY);
        assert_eq!(hash_with(HashAlg::LegacyMd5, b"").to_hex(), MD5_EMPTY);
        assert_eq!(hash_with(HashAlg::LegacySha1, b"").to_hex(), SHA1_EMPTY);
    }

    #[test]
    fn hash_token_fixture() {
        let suite = CryptoSuite::default();
        let d = suite.hash_concat(&[b"MFG-01", b"2024-01-01T00:00:00Z"]);
        assert_eq!(d.to_hex(), SHA256_TOKEN_FIXTURE);
        assert_eq!(d.as_bytes().len(), 32);
        assert_eq!(d, suite.hash(b"MFG-012024-01-01T00:00:00Z"));
    }

    #[test]
    fn digest_length_follows_algorithm() {
        for alg in [HashAlg::Sha256, HashAlg::LegacyMd5, HashAlg::LegacySha1] {
            assert_eq!(hash_with(alg, b"x").as_bytes().len(), alg.output_len());
        }
    }

    #[test]
    fn keypair_is_deterministic_per_seed() {
        assert_eq!(generate_keypair(7, "CKS"), generate_keypair(7, "CKS"));
        assert_ne!(
            generate_keypair(7, "CKS").public.bytes,
            generate_keypair(8, "CKS").public.bytes
        );
    }

    #[test]
    fn pk_round_trip_both_modes() {
        let kdc = generate_keypair(1, "KDC");
        for mode in [CryptoMode::Opaque, CryptoMode::Transparent] {
            let ct = pk_encrypt(mode, &kdc.public, b"M001DMN-9", &mut rng());
            assert_eq!(pk_decrypt(&kdc.private, &ct).unwrap(), b"M001DMN-9");
            let reparsed = Ciphertext::from_bytes(&ct.to_bytes()).unwrap();
            assert_eq!(reparsed, ct);
        }
    }

    #[test]
    fn pk_wrong_key_is_decryption_failure() {
        let kdc = generate_keypair(1, "KDC");
        let cks = generate_keypair(2, "CKS");
        for mode in [CryptoMode::Opaque, CryptoMode::Transparent] {
            let ct = pk_encrypt(mode, &kdc.public, b"m", &mut rng());
            assert!(matches!(
                pk_decrypt(&cks.private, &ct),
                Err(CryptoError::DecryptionFailure(_))
            ));
        }
    }

    #[test]
    fn opaque_pk_with_forged_key_id_fails_authentication() {
        // Same label, different key material: the header matches but the
        // DH secret does not.
        let real = generate_keypair(1, "CKS");
        let fake = generate_keypair(2, "CKS");
        let ct = pk_encrypt(CryptoMode::Opaque, &fake.public, b"m", &mut rng());
        assert_eq!(pk_decrypt(&real.private, &ct), Err(CryptoError::Tamper));
    }

    #[test]
    fn transparent_pk_record_exposes_payload() {
        let cks = generate_keypair(3, "CKS");
        let ct = pk_encrypt(CryptoMode::Transparent, &cks.public, b"payload", &mut rng());
        assert_eq!(ct.key_ref, "CKS");
        assert_eq!(ct.transparent_plaintext(), Some(&b"payload"[..]));
        let opaque = pk_encrypt(CryptoMode::Opaque, &cks.public, b"payload", &mut rng());
        assert_eq!(opaque.transparent_plaintext(), None);
        assert!(!opaque.body.windows(7).any(|w| w == b"payload"));
    }

    #[test]
    fn nonce_key_is_pure_and_separates_nonces() {
        let mut e = rng();
        let n = e.fresh_nonce("U");
        assert_eq!(n.key(), nonce_key(&n.value));
        let mut other = n.value;
        other[15] ^= 1;
        assert_ne!(nonce_key(&other), n.key());
        assert_eq!(n.key().origin, KeyOrigin::NonceDerived);
    }

    #[test]
    fn sym_round_trip_and_wrong_key() {
        let mut e = rng();
        let na = e.fresh_nonce("A");
        let nb = e.fresh_nonce("B");
        for mode in [CryptoMode::Opaque, CryptoMode::Transparent] {
            let ct = sym_encrypt(mode, &na.key(), b"Ack", &mut e);
            assert_eq!(sym_decrypt(&na.key(), &ct).unwrap(), b"Ack");
            assert!(matches!(
                sym_decrypt(&nb.key(), &ct),
                Err(CryptoError::DecryptionFailure(_))
            ));
        }
    }

    #[test]
    fn sym_flipped_byte_is_rejected() {
        let mut e = rng();
        let k = e.fresh_session_key();
        for mode in [CryptoMode::Opaque, CryptoMode::Transparent] {
            let bytes = sym_encrypt(mode, &k, b"hello", &mut e).to_bytes();
            let last = bytes.len() - 1;
            let mut tampered = bytes.clone();
            tampered[last] ^= 0x01;
            assert!(sym_open(&k, &tampered).is_err());
            // Flipping a byte of the sealed body is an authentication failure.
            let body_start = 2 + 4 + k.key_ref().len() + 4;
            let mut tampered = bytes.clone();
            tampered[body_start] ^= 0x80;
            assert_eq!(sym_open(&k, &tampered), Err(CryptoError::Tamper));
        }
    }

    #[test]
    fn malformed_ciphertext_is_codec_error() {
        assert!(matches!(
            Ciphertext::from_bytes(&[]),
            Err(CryptoError::Codec(_))
        ));
        assert!(matches!(
            Ciphertext::from_bytes(&[0x07, 0x02]),
            Err(CryptoError::Codec(_))
        ));
        assert!(matches!(
            Ciphertext::from_bytes(&[0x00, 0x02, 0, 0, 0, 9]),
            Err(CryptoError::Codec(_))
        ));
    }

    #[test]
    fn fresh_values_have_expected_shapes() {
        let otp = regex::Regex::new(r"^[0-9]{8}$").unwrap();
        let tid = regex::Regex::new(r"^TID-[0-9a-f]{16}$").unwrap();
        let mut e = rng();
        for _ in 0..200 {
            assert!(otp.is_match(&e.fresh_otp()));
            assert!(tid.is_match(&e.fresh_temp_id()));
        }
    }

    #[test]
    fn fresh_values_are_reproducible_and_distinct() {
        let draw = |seed| {
            let mut e = Entropy::from_seed(seed);
            (
                e.fresh_nonce("A"),
                e.fresh_nonce("A"),
                e.fresh_otp(),
                e.fresh_temp_id(),
            )
        };
        let a = draw(5);
        assert_eq!(a, draw(5));
        assert_ne!(a.0.value, a.1.value);
        assert_ne!(a, draw(6));
    }

    #[test]
    fn uniqueness_table_rejects_repeats_of_small_domains() {
        let mut e = Entropy::from_seed(1);
        let mut seen = HashSet::new();
        for _ in 0..5_000 {
            assert!(seen.insert(e.fresh_otp()));
        }
    }

    #[test]
    fn config_names_parse() {
        assert_eq!("sha2-256".parse::<HashAlg>().unwrap(), HashAlg::Sha256);
        assert_eq!("legacy-md5".parse::<HashAlg>().unwrap(), HashAlg::LegacyMd5);
        assert_eq!("opaque".parse::<CryptoMode>().unwrap(), CryptoMode::Opaque);
        assert!("rot13".parse::<HashAlg>().is_err());
    }
}
