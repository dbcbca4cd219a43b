use std::collections::{BTreeMap, BTreeSet};

use super::{
    decode_frame, plain, receive_app_data, unexpected, AppMessage, Ctx, Outcome, Outgoing, Step,
};
use crate::crypto::{self, KeyOrigin, PublicKey, SymKey};
use crate::registry::{SessionRecord, SessionStore};
use crate::wire::{Envelope, Frame, NonceBytes, ProtocolMessage, SpIdentity, SpPart};

#[derive(Debug, Clone)]
pub struct ServiceProvider {
    id: String,
    services: BTreeSet<String>,
    cks_addr: String,
    cks_pk: PublicKey,
    /// Verification requests awaiting the CKS, keyed by the user's address.
    pending: BTreeMap<String, NonceBytes>,
    sessions: SessionStore,
    inbox: Vec<AppMessage>,
}

impl ServiceProvider {
    pub fn new(
        id: impl Into<String>,
        services: impl IntoIterator<Item = String>,
        cks_addr: impl Into<String>,
        cks_pk: PublicKey,
    ) -> Self {
        Self {
            id: id.into(),
            services: services.into_iter().collect(),
            cks_addr: cks_addr.into(),
            cks_pk,
            pending: BTreeMap::new(),
            sessions: SessionStore::default(),
            inbox: Vec::new(),
        }
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn services(&self) -> &BTreeSet<String> {
        &self.services
    }

    pub fn sessions(&self) -> &SessionStore {
        &self.sessions
    }

    pub fn inbox(&self) -> &[AppMessage] {
        &self.inbox
    }

    pub fn send_app_data(
        &mut self,
        peer: &str,
        payload: &[u8],
        ctx: &mut Ctx<'_>,
    ) -> Result<Outgoing, Outcome> {
        let rec = self
            .sessions
            .iter()
            .filter(|r| r.parties.1 == peer && r.is_live(ctx.now))
            .max_by_key(|r| r.issued_at)
            .ok_or_else(|| Outcome::violation("no-live-session"))?;
        let ct = crypto::sym_encrypt(ctx.suite.mode, &rec.key, payload, ctx.coins);
        Ok(Outgoing::open(
            peer,
            plain(&ProtocolMessage::AppData {
                ciphertext: ct.to_bytes(),
            }),
        ))
    }

    pub fn handle(&mut self, frame: &Frame, ctx: &mut Ctx<'_>) -> Step {
        let env = match decode_frame(frame) {
            Ok(env) => env,
            Err(o) => return o.into(),
        };
        let Envelope::Plain(m) = &env else {
            return unexpected(&env, "sp").into();
        };
        match m {
            ProtocolMessage::SvcTicket { id_sp, enc_p1 } => {
                if *id_sp != self.id {
                    return Outcome::violation("misaddressed-ticket").into();
                }
                let n_sp = ctx.values.fresh_nonce(&self.id).value;
                let identity = SpIdentity {
                    n_sp,
                    id_u: frame.from.clone(),
                };
                let verify = ProtocolMessage::SvcVerify {
                    enc_p1: enc_p1.clone(),
                    enc_identity: ctx.nested_pk(&identity.encode(), &self.cks_pk),
                };
                self.pending.insert(frame.from.clone(), n_sp);
                Step::send(
                    Outcome::progress("verification-requested"),
                    vec![Outgoing::open(&self.cks_addr, plain(&verify))],
                )
            }
            ProtocolMessage::SvcConfirm { user_part, sp_part } => {
                let opened = self.pending.iter().find_map(|(id_u, n_sp)| {
                    let raw = crypto::sym_open(&crypto::nonce_key(n_sp), sp_part).ok()?;
                    Some((id_u.clone(), SpPart::decode(&raw).ok()?))
                });
                let Some((id_u, part)) = opened else {
                    return Outcome::violation("undecryptable sp-part").into();
                };
                if part.id_u != id_u {
                    return Outcome::violation("sp-part names another user").into();
                }
                self.pending.remove(&id_u);
                self.sessions.put(SessionRecord {
                    key: SymKey::new(part.k, KeyOrigin::Session),
                    parties: (self.id.clone(), id_u.clone()),
                    issued_at: ctx.now,
                    ttl: ctx.ttl,
                });
                let forward = ProtocolMessage::SvcForward {
                    user_part: user_part.clone(),
                };
                Step::send(
                    Outcome::progress("grant-forwarded"),
                    vec![Outgoing::open(id_u, plain(&forward))],
                )
            }
            ProtocolMessage::AppData { ciphertext } => {
                match receive_app_data(&self.sessions, ciphertext, ctx.now) {
                    Ok(msg) => {
                        self.inbox.push(msg);
                        Outcome::progress("app-data").into()
                    }
                    Err(o) => o.into(),
                }
            }
            _ => unexpected(&env, "sp").into(),
        }
    }

    pub fn snapshot(&self) -> serde_json::Value {
        serde_json::json!({
            "sp_id": self.id,
            "services": self.services,
            "sessions": self.sessions,
        })
    }
}
