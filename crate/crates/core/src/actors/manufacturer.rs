use std::collections::BTreeMap;

use serde::Serialize;

use super::{decode_frame, unexpected, Ctx, Outcome, Outgoing, Phase, Step};
use crate::crypto::{self, PublicKey, SymKey};
use crate::registry::SealedToken;
use crate::wire::{Envelope, Frame, MessageTag, NonceBytes, ProtocolMessage};

/// A device that has been through initialization and is ready for sale.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ProvisionedDevice {
    pub machine_id: String,
    pub dmn: String,
    pub sealed: SealedToken,
    #[serde(skip)]
    pub storage_key: SymKey,
}

#[derive(Debug, Clone)]
struct PendingRegistration {
    machine_id: String,
    dmn: String,
}

#[derive(Debug, Clone)]
pub struct Manufacturer {
    id: String,
    kdc_addr: String,
    kdc_pk: PublicKey,
    pending: BTreeMap<NonceBytes, PendingRegistration>,
    inventory: Vec<ProvisionedDevice>,
}

impl Manufacturer {
    /// `id` doubles as the manufacturer id `ID_M` hashed into tokens.
    pub fn new(id: impl Into<String>, kdc_addr: impl Into<String>, kdc_pk: PublicKey) -> Self {
        Self {
            id: id.into(),
            kdc_addr: kdc_addr.into(),
            kdc_pk,
            pending: BTreeMap::new(),
            inventory: Vec::new(),
        }
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn register_device(&mut self, machine_id: &str, dmn: &str, ctx: &mut Ctx<'_>) -> Outgoing {
        let n_m = ctx.values.fresh_nonce(&self.id).value;
        let m = ProtocolMessage::InitRegister {
            machine_id: machine_id.to_string(),
            dmn: dmn.to_string(),
            n_m,
            id_m: self.id.clone(),
        };
        self.pending.insert(
            n_m,
            PendingRegistration {
                machine_id: machine_id.to_string(),
                dmn: dmn.to_string(),
            },
        );
        Outgoing::open(&self.kdc_addr, ctx.seal_pk(&m, &self.kdc_pk))
    }

    pub fn handle(&mut self, frame: &Frame, ctx: &mut Ctx<'_>) -> Step {
        let env = match decode_frame(frame) {
            Ok(env) => env,
            Err(o) => return o.into(),
        };
        if env.tag() != MessageTag::InitToken {
            return unexpected(&env, "manufacturer").into();
        }
        self.provision(&env, ctx).into()
    }

    fn provision(&mut self, env: &Envelope, ctx: &mut Ctx<'_>) -> Outcome {
        let key_ref = env.key_ref();
        let Some(n_m) = self
            .pending
            .keys()
            .find(|n| Some(crypto::nonce_key(n).key_ref()) == key_ref)
            .copied()
        else {
            return Outcome::violation("init-token for no pending registration");
        };
        let token = match env.open_sym(&crypto::nonce_key(&n_m)) {
            Ok(ProtocolMessage::InitToken { token }) => token,
            Ok(_) => unreachable!("open_sym checks the inner tag"),
            Err(e) => return super::open_failure("init-token", e),
        };
        let reg = self.pending.remove(&n_m).expect("nonce is pending");
        let storage_key = ctx.values.fresh_storage_key();
        let sealed = SealedToken::seal(&token, &storage_key, ctx.coins);
        self.inventory.push(ProvisionedDevice {
            machine_id: reg.machine_id,
            dmn: reg.dmn,
            sealed,
            storage_key,
        });
        Outcome::Complete(Phase::Initialization)
    }

    /// Hands a provisioned device over to its buyer.
    pub fn sell(&mut self, machine_id: &str) -> Option<ProvisionedDevice> {
        let i = self
            .inventory
            .iter()
            .position(|d| d.machine_id == machine_id)?;
        Some(self.inventory.remove(i))
    }

    pub fn inventory(&self) -> &[ProvisionedDevice] {
        &self.inventory
    }

    pub fn snapshot(&self) -> serde_json::Value {
        serde_json::json!({
            "id_m": self.id,
            "pending": self.pending.len(),
            "inventory": self.inventory,
        })
    }
}
