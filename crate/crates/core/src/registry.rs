//! Role-owned state: the KDC device log, the CKS database, session store,
//! service-provider catalog and the device's sealed token storage.
//!
//! Everything here is an in-memory map; `Serialize` is derived so that a run
//! can dump a JSON snapshot of every registry.

use std::collections::{BTreeMap, BTreeSet};

use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{self, CryptoError, CryptoMode, Digest, SymKey};
use crate::wire::NonceBytes;

pub type Ticks = u64;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RegistryError {
    #[error("duplicate {kind} `{key}`")]
    Duplicate { kind: &'static str, key: String },
    #[error("{kind} `{key}` not found")]
    NotFound { kind: &'static str, key: String },
    #[error("no provider offers `{0}`")]
    NoProvider(String),
    #[error("bad otp: {0}")]
    BadOtp(&'static str),
    #[error("user `{user}` is bound to unknown device `{machine_id}`")]
    DanglingUser { user: String, machine_id: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceRecord {
    pub machine_id: String,
    pub dmn: String,
    pub token: Digest,
    pub registered_at: Ticks,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "state", content = "value")]
pub enum OtpState {
    Issued(String),
    Consumed,
}

/// An OTP handed out after device authentication, waiting for `RegUser`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OtpEntry {
    pub machine_id: String,
    pub issued_at: Ticks,
    pub state: OtpState,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserRecord {
    pub user_id: String,
    pub temp_id: String,
    pub bound_machine_id: String,
    pub otp_state: OtpState,
    #[serde(with = "opt_hex")]
    pub p2: Option<Vec<u8>>,
    /// Network label the user registered from; used to route notifications.
    pub address: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionRecord {
    pub key: SymKey,
    pub parties: (String, String),
    pub issued_at: Ticks,
    pub ttl: Ticks,
}

impl SessionRecord {
    /// Live iff `now <= issued_at + ttl`.
    pub fn is_live(&self, now: Ticks) -> bool {
        now <= self.issued_at.saturating_add(self.ttl)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SessionLookup<'a> {
    Live(&'a SessionRecord),
    Expired(&'a SessionRecord),
    NotFound,
}

/// Sessions indexed by the key's public fingerprint.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionStore {
    records: BTreeMap<String, SessionRecord>,
}

impl SessionStore {
    pub fn put(&mut self, rec: SessionRecord) {
        assert!(rec.ttl > 0, "session ttl must be positive");
        self.records.insert(rec.key.key_ref(), rec);
    }

    pub fn get(&self, key_ref: &str, now: Ticks) -> SessionLookup<'_> {
        match self.records.get(key_ref) {
            None => SessionLookup::NotFound,
            Some(r) if r.is_live(now) => SessionLookup::Live(r),
            Some(r) => SessionLookup::Expired(r),
        }
    }

    /// Drops every session expired at `now`; returns how many were purged.
    pub fn expire(&mut self, now: Ticks) -> usize {
        let before = self.records.len();
        self.records.retain(|_, r| r.is_live(now));
        before - self.records.len()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &SessionRecord> {
        self.records.values()
    }

    pub fn find_by_peer(&self, peer: &str) -> Option<&SessionRecord> {
        self.records.values().rev().find(|r| r.parties.1 == peer)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpRecord {
    pub sp_id: String,
    pub services: BTreeSet<String>,
    #[serde(with = "opt_hex")]
    pub nonce_last: Option<Vec<u8>>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpCatalog {
    providers: BTreeMap<String, SpRecord>,
}

impl SpCatalog {
    pub fn register(&mut self, rec: SpRecord) -> Result<(), RegistryError> {
        if self.providers.contains_key(&rec.sp_id) {
            return Err(RegistryError::Duplicate {
                kind: "service provider",
                key: rec.sp_id,
            });
        }
        self.providers.insert(rec.sp_id.clone(), rec);
        Ok(())
    }

    /// Capability match, ties broken by the lexicographically smallest id.
    pub fn select(&self, service: &str) -> Result<&str, RegistryError> {
        self.providers
            .values()
            .find(|p| p.services.contains(service))
            .map(|p| p.sp_id.as_str())
            .ok_or_else(|| RegistryError::NoProvider(service.to_string()))
    }

    pub fn get(&self, sp_id: &str) -> Option<&SpRecord> {
        self.providers.get(sp_id)
    }

    pub fn record_nonce(&mut self, sp_id: &str, nonce: &NonceBytes) {
        if let Some(p) = self.providers.get_mut(sp_id) {
            p.nonce_last = Some(nonce.to_vec());
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KdcEntry {
    pub machine_id: String,
    pub dmn: String,
    pub id_m: String,
    pub token: Digest,
    pub registered_at: Ticks,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct KdcLog {
    entries: BTreeMap<String, KdcEntry>,
}

impl KdcLog {
    pub fn contains(&self, machine_id: &str) -> bool {
        self.entries.contains_key(machine_id)
    }

    pub fn record(&mut self, e: KdcEntry) -> Result<(), RegistryError> {
        if self.contains(&e.machine_id) {
            return Err(RegistryError::Duplicate {
                kind: "machine id",
                key: e.machine_id,
            });
        }
        self.entries.insert(e.machine_id.clone(), e);
        Ok(())
    }

    pub fn get(&self, machine_id: &str) -> Option<&KdcEntry> {
        self.entries.get(machine_id)
    }

    pub fn iter(&self) -> impl Iterator<Item = &KdcEntry> {
        self.entries.values()
    }
}

/// The central key server's database.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CksDatabase {
    devices: BTreeMap<String, DeviceRecord>,
    otps: BTreeMap<String, OtpEntry>,
    users: BTreeMap<String, UserRecord>,
    pub sessions: SessionStore,
    pub providers: SpCatalog,
}

impl CksDatabase {
    pub fn store_device(&mut self, rec: DeviceRecord) -> Result<(), RegistryError> {
        if self.devices.contains_key(&rec.machine_id) {
            return Err(RegistryError::Duplicate {
                kind: "machine id",
                key: rec.machine_id,
            });
        }
        self.devices.insert(rec.machine_id.clone(), rec);
        Ok(())
    }

    pub fn lookup_device(&self, machine_id: &str) -> Result<&DeviceRecord, RegistryError> {
        self.devices
            .get(machine_id)
            .ok_or_else(|| RegistryError::NotFound {
                kind: "machine id",
                key: machine_id.to_string(),
            })
    }

    /// True iff a device record holds exactly this `(machine_id, token)`.
    pub fn authenticate_device(&self, machine_id: &str, token: &Digest) -> bool {
        self.devices
            .get(machine_id)
            .is_some_and(|d| &d.token == token)
    }

    pub fn devices(&self) -> impl Iterator<Item = &DeviceRecord> {
        self.devices.values()
    }

    pub fn issue_otp(&mut self, otp: &str, machine_id: &str, now: Ticks) {
        self.otps.insert(
            otp.to_string(),
            OtpEntry {
                machine_id: machine_id.to_string(),
                issued_at: now,
                state: OtpState::Issued(otp.to_string()),
            },
        );
    }

    pub fn otp(&self, otp: &str) -> Option<&OtpEntry> {
        self.otps.get(otp)
    }

    /// Validates an OTP without consuming it. Returns the bound machine id.
    pub fn check_otp(&self, otp: &str, now: Ticks, ttl: Ticks) -> Result<&str, RegistryError> {
        let entry = self.otps.get(otp).ok_or(RegistryError::BadOtp("unknown"))?;
        match entry.state {
            OtpState::Consumed => Err(RegistryError::BadOtp("consumed")),
            OtpState::Issued(_) if now > entry.issued_at.saturating_add(ttl) => {
                Err(RegistryError::BadOtp("expired"))
            }
            OtpState::Issued(_) => Ok(&entry.machine_id),
        }
    }

    /// issued → consumed, exactly once.
    pub fn consume_otp(&mut self, otp: &str) -> Result<(), RegistryError> {
        match self.otps.get_mut(otp) {
            Some(
                e @ OtpEntry {
                    state: OtpState::Issued(_),
                    ..
                },
            ) => {
                e.state = OtpState::Consumed;
                Ok(())
            }
            Some(_) => Err(RegistryError::BadOtp("consumed")),
            None => Err(RegistryError::BadOtp("unknown")),
        }
    }

    pub fn create_user(&mut self, rec: UserRecord) -> Result<(), RegistryError> {
        if !self.devices.contains_key(&rec.bound_machine_id) {
            return Err(RegistryError::NotFound {
                kind: "machine id",
                key: rec.bound_machine_id,
            });
        }
        if self.users.contains_key(&rec.user_id) {
            return Err(RegistryError::Duplicate {
                kind: "user id",
                key: rec.user_id,
            });
        }
        if self.users.values().any(|u| u.temp_id == rec.temp_id) {
            return Err(RegistryError::Duplicate {
                kind: "temp id",
                key: rec.temp_id,
            });
        }
        self.users.insert(rec.user_id.clone(), rec);
        Ok(())
    }

    pub fn user(&self, user_id: &str) -> Option<&UserRecord> {
        self.users.get(user_id)
    }

    pub fn user_by_temp_id(&self, temp_id: &str) -> Option<&UserRecord> {
        self.users.values().find(|u| u.temp_id == temp_id)
    }

    pub fn user_by_address(&self, address: &str) -> Option<&UserRecord> {
        self.users.values().find(|u| u.address == address)
    }

    pub fn users(&self) -> impl Iterator<Item = &UserRecord> {
        self.users.values()
    }

    pub fn set_p2(&mut self, user_id: &str, p2: &[u8]) {
        if let Some(u) = self.users.get_mut(user_id) {
            u.p2 = Some(p2.to_vec());
        }
    }

    /// True iff `temp_id` names a user whose bound device carries `token`.
    pub fn authenticate_user(&self, temp_id: &str, token: &Digest) -> Option<&UserRecord> {
        self.user_by_temp_id(temp_id)
            .filter(|u| self.authenticate_device(&u.bound_machine_id, token))
    }

    pub fn check_referential_integrity(&self) -> Result<(), RegistryError> {
        for u in self.users.values() {
            if !self.devices.contains_key(&u.bound_machine_id) {
                return Err(RegistryError::DanglingUser {
                    user: u.user_id.clone(),
                    machine_id: u.bound_machine_id.clone(),
                });
            }
        }
        Ok(())
    }
}

/// Token sealed under a per-device storage key, standing in for the
/// trusted module the token is hard-coded into. Always opaque-mode AEAD,
/// whatever the wire crypto mode is.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SealedToken {
    #[serde(with = "crate::crypto::hex_bytes")]
    storage: Vec<u8>,
}

impl SealedToken {
    pub fn seal<R: RngCore + CryptoRng>(token: &Digest, storage_key: &SymKey, rng: &mut R) -> Self {
        let ct = crypto::sym_encrypt(CryptoMode::Opaque, storage_key, token.as_bytes(), rng);
        Self {
            storage: ct.to_bytes(),
        }
    }

    pub fn unseal(&self, storage_key: &SymKey) -> Result<Digest, CryptoError> {
        let raw = crypto::sym_open(storage_key, &self.storage)?;
        Digest::from_bytes(&raw).ok_or(CryptoError::Codec("sealed value is not a digest".into()))
    }

    pub fn raw_storage(&self) -> &[u8] {
        &self.storage
    }
}

mod opt_hex {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<Vec<u8>>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(b) => s.serialize_some(&hex::encode(b)),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Vec<u8>>, D::Error> {
        Option::<String>::deserialize(d)?
            .map(|s| hex::decode(s).map_err(serde::de::Error::custom))
            .transpose()
    }
}
