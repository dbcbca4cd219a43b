use std::collections::BTreeMap;

use super::{decode_frame, open_failure, plain, unexpected, Ctx, Outcome, Outgoing, Step};
use crate::crypto::{self, AsymKeyPair, PublicKey, SymKey, PASSPHRASE_LEN};
use crate::registry::{CksDatabase, DeviceRecord, OtpState, SessionRecord, SpRecord, UserRecord};
use crate::wire::{
    Envelope, Frame, MessageTag, NonceBytes, ProtocolMessage, SpIdentity, SpPart, UserPart,
};

/// A connection waiting for the callee's `ConnRespond`, keyed by the
/// callee's address.
#[derive(Debug, Clone)]
struct PendingConn {
    a_user: String,
    a_addr: String,
    n_a: NonceBytes,
    b_user: String,
}

/// A service flow between grant and SP confirmation, keyed by TempID.
#[derive(Debug, Clone)]
struct ServiceFlow {
    user_id: String,
    temp_id: String,
    n_u: NonceBytes,
    n_cks: NonceBytes,
    p1: [u8; PASSPHRASE_LEN],
    p2: Vec<u8>,
    k: SymKey,
    sp_id: String,
}

#[derive(Debug, Clone)]
pub struct Cks {
    id: String,
    keys: AsymKeyPair,
    kdc_addr: String,
    db: CksDatabase,
    conns: BTreeMap<String, PendingConn>,
    flows: BTreeMap<String, ServiceFlow>,
    audit: Vec<String>,
}

impl Cks {
    pub fn new(keys: AsymKeyPair, kdc_addr: impl Into<String>) -> Self {
        Self {
            id: keys.public.key_id.clone(),
            keys,
            kdc_addr: kdc_addr.into(),
            db: CksDatabase::default(),
            conns: BTreeMap::new(),
            flows: BTreeMap::new(),
            audit: Vec::new(),
        }
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn public_key(&self) -> &PublicKey {
        &self.keys.public
    }

    pub fn database(&self) -> &CksDatabase {
        &self.db
    }

    pub fn audit(&self) -> &[String] {
        &self.audit
    }

    pub fn register_provider(
        &mut self,
        rec: SpRecord,
    ) -> Result<(), crate::registry::RegistryError> {
        self.db.providers.register(rec)
    }

    pub fn handle(&mut self, frame: &Frame, ctx: &mut Ctx<'_>) -> Step {
        let env = match decode_frame(frame) {
            Ok(env) => env,
            Err(o) => return o.into(),
        };
        let tag = env.tag();
        let step = match tag {
            MessageTag::SvcVerify => match env {
                Envelope::Plain(m) => self.confirm_sp(frame, m, ctx),
                _ => unreachable!("svc-verify is a plain tag"),
            },
            MessageTag::InitRecord
            | MessageTag::RegDeviceAuth
            | MessageTag::RegUser
            | MessageTag::ConnRequest
            | MessageTag::ConnRespond
            | MessageTag::SvcRequest => match env.open_pk(&self.keys.private) {
                Ok(m) => self.dispatch(frame, m, ctx),
                Err(e) => open_failure(env.tag().name(), e).into(),
            },
            _ => unexpected(&env, "cks").into(),
        };
        if let Outcome::Reject(reason) = &step.outcome {
            self.audit
                .push(format!("{} {tag} from {}: {reason}", ctx.now, frame.from));
        }
        step
    }

    fn dispatch(&mut self, frame: &Frame, m: ProtocolMessage, ctx: &mut Ctx<'_>) -> Step {
        use ProtocolMessage as M;
        match m {
            M::InitRecord {
                machine_id,
                dmn,
                token,
            } => {
                if frame.from != self.kdc_addr {
                    return Outcome::reject("record-not-from-kdc").into();
                }
                let rec = DeviceRecord {
                    machine_id,
                    dmn,
                    token,
                    registered_at: ctx.now,
                };
                match self.db.store_device(rec) {
                    Ok(()) => Outcome::progress("device-record-stored").into(),
                    Err(_) => Outcome::reject("duplicate").into(),
                }
            }
            M::RegDeviceAuth {
                machine_id,
                token,
                n_u,
            } => {
                if !self.db.authenticate_device(&machine_id, &token) {
                    return Outcome::reject("unauthenticated-device").into();
                }
                let dmn = self
                    .db
                    .lookup_device(&machine_id)
                    .expect("authenticated")
                    .dmn
                    .clone();
                let ack_d = ctx.suite.hash_concat(&[token.as_bytes(), dmn.as_bytes()]);
                let otp = ctx.values.fresh_otp();
                self.db.issue_otp(&otp, &machine_id, ctx.now);
                let reply = ctx.seal_nonce(&M::RegDeviceAck { ack_d, otp }, &n_u);
                Step::send(
                    Outcome::progress("device-authenticated"),
                    vec![Outgoing::open(&frame.from, reply)],
                )
            }
            M::RegUser { id_u, otp, n_u } => {
                let machine_id = match self.db.check_otp(&otp, ctx.now, ctx.ttl) {
                    Ok(m) => m.to_string(),
                    Err(_) => return Outcome::reject("bad-otp").into(),
                };
                if self.db.user(&id_u).is_some() {
                    return Outcome::reject("duplicate-user").into();
                }
                let temp_id = ctx.values.fresh_temp_id();
                self.db.consume_otp(&otp).expect("checked above");
                self.db
                    .create_user(UserRecord {
                        user_id: id_u.clone(),
                        temp_id: temp_id.clone(),
                        bound_machine_id: machine_id,
                        otp_state: OtpState::Consumed,
                        p2: None,
                        address: frame.from.clone(),
                    })
                    .expect("device exists and ids are fresh");
                let ack_u = ctx.suite.hash_concat(&[id_u.as_bytes(), otp.as_bytes()]);
                let reply = ctx.seal_nonce(&M::RegUserAck { ack_u, temp_id }, &n_u);
                Step::send(
                    Outcome::progress("user-registered"),
                    vec![Outgoing::open(&frame.from, reply)],
                )
            }
            M::ConnRequest {
                id_target,
                token_a,
                n_a,
                temp_id,
            } => {
                let Some(b) = self.db.user(&id_target) else {
                    let reject = plain(&M::ConnReject {
                        reason: "unknown-target".into(),
                    });
                    return Step::send(
                        Outcome::reject("unknown-target"),
                        vec![Outgoing::open(&frame.from, reject)],
                    );
                };
                let b_addr = b.address.clone();
                let b_user = b.user_id.clone();
                let Some(a) = self.db.authenticate_user(&temp_id, &token_a) else {
                    let reject = plain(&M::ConnReject {
                        reason: "unauthorized-device".into(),
                    });
                    return Step::send(
                        Outcome::reject("unauthenticated-device"),
                        vec![Outgoing::open(b_addr, reject)],
                    );
                };
                let a_user = a.user_id.clone();
                let notify = plain(&M::ConnNotify {
                    id_b: b_user.clone(),
                    id_a: a_user.clone(),
                });
                self.conns.insert(
                    b_addr.clone(),
                    PendingConn {
                        a_user,
                        a_addr: frame.from.clone(),
                        n_a,
                        b_user,
                    },
                );
                Step::send(
                    Outcome::progress("peer-notified"),
                    vec![Outgoing::open(b_addr, notify)],
                )
            }
            M::ConnRespond { token_b, n_b } => {
                let Some(pending) = self.conns.get(&frame.from) else {
                    return Outcome::reject("no-pending-connection").into();
                };
                let b_ok = self
                    .db
                    .user_by_address(&frame.from)
                    .is_some_and(|b| self.db.authenticate_device(&b.bound_machine_id, &token_b));
                if !b_ok {
                    let reject = plain(&M::ConnReject {
                        reason: "unauthorized-device".into(),
                    });
                    return Step::send(
                        Outcome::reject("unauthenticated-device"),
                        vec![Outgoing::open(&pending.a_addr, reject)],
                    );
                }
                let pending = self.conns.remove(&frame.from).expect("present");
                let k = ctx.values.fresh_session_key();
                self.db.sessions.put(SessionRecord {
                    key: k.clone(),
                    parties: (pending.a_user, pending.b_user),
                    issued_at: ctx.now,
                    ttl: ctx.ttl,
                });
                let to_a = ctx.seal_nonce(&M::ConnKeyA { k: k.value }, &pending.n_a);
                let to_b = ctx.seal_nonce(&M::ConnKeyB { k: k.value }, &n_b);
                Step::send(
                    Outcome::progress("session-issued"),
                    vec![
                        Outgoing::open(pending.a_addr, to_a),
                        Outgoing::open(&frame.from, to_b),
                    ],
                )
            }
            M::SvcRequest {
                sr,
                p2,
                token,
                n_u,
                temp_id,
            } => {
                let Some(user) = self.db.authenticate_user(&temp_id, &token) else {
                    return Outcome::reject("unauthenticated").into();
                };
                let user_id = user.user_id.clone();
                let sp_id = match self.db.providers.select(&sr) {
                    Ok(sp) => sp.to_string(),
                    Err(_) => return Outcome::reject("no-provider").into(),
                };
                self.db.set_p2(&user_id, &p2);
                let k = ctx.values.fresh_session_key();
                let p1 = ctx.values.fresh_passphrase();
                let n_cks = ctx.values.fresh_nonce(&self.id).value;
                let enc_p1 = ctx.nested_nonce(&p1, &n_cks);
                let grant = M::SvcGrantUser {
                    k: k.value,
                    enc_p1,
                    id_sp: sp_id.clone(),
                    p2: p2.clone(),
                };
                self.flows.insert(
                    temp_id.clone(),
                    ServiceFlow {
                        user_id,
                        temp_id,
                        n_u,
                        n_cks,
                        p1,
                        p2,
                        k,
                        sp_id,
                    },
                );
                let reply = ctx.seal_nonce(&grant, &n_u);
                Step::send(
                    Outcome::progress("service-granted"),
                    vec![Outgoing::open(&frame.from, reply)],
                )
            }
            other => unexpected(&Envelope::Plain(other), "cks").into(),
        }
    }

    fn confirm_sp(&mut self, frame: &Frame, m: ProtocolMessage, ctx: &mut Ctx<'_>) -> Step {
        let ProtocolMessage::SvcVerify {
            enc_p1,
            enc_identity,
        } = m
        else {
            unreachable!("tag checked by caller");
        };
        let identity = match crypto::pk_open(&self.keys.private, &enc_identity) {
            Ok(raw) => match SpIdentity::decode(&raw) {
                Ok(id) => id,
                Err(e) => return Outcome::violation(format!("malformed sp identity: {e}")).into(),
            },
            Err(e) => return Outcome::violation(format!("cannot open sp identity: {e}")).into(),
        };
        let Some(flow) = self.flows.get(&identity.id_u) else {
            return Outcome::reject("unknown-flow").into();
        };
        if frame.from != flow.sp_id {
            return Outcome::reject("sp-not-authenticated").into();
        }
        match crypto::sym_open(&crypto::nonce_key(&flow.n_cks), &enc_p1) {
            Ok(p1) if p1 == flow.p1 => {}
            _ => return Outcome::reject("sp-not-authenticated").into(),
        }
        let flow = self.flows.remove(&identity.id_u).expect("present");
        let user_part = UserPart {
            p2: flow.p2.clone(),
            k: flow.k.value,
            id_sp: flow.sp_id.clone(),
        };
        let sp_part = SpPart {
            k: flow.k.value,
            id_u: flow.temp_id.clone(),
        };
        let confirm = ProtocolMessage::SvcConfirm {
            user_part: ctx.nested_nonce(&user_part.encode(), &flow.n_u),
            sp_part: ctx.nested_nonce(&sp_part.encode(), &identity.n_sp),
        };
        self.db.providers.record_nonce(&flow.sp_id, &identity.n_sp);
        self.db.sessions.put(SessionRecord {
            key: flow.k,
            parties: (flow.user_id, flow.sp_id.clone()),
            issued_at: ctx.now,
            ttl: ctx.ttl,
        });
        Step::send(
            Outcome::progress("sp-authenticated"),
            vec![Outgoing::open(flow.sp_id, plain(&confirm))],
        )
    }

    pub fn snapshot(&self) -> serde_json::Value {
        serde_json::json!({ "database": self.db, "audit": self.audit })
    }
}
