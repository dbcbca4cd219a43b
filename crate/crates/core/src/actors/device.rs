use super::{
    decode_frame, open_failure, plain, receive_app_data, unexpected, AppMessage, Ctx, Outcome,
    Outgoing, Phase, ProvisionedDevice, Step,
};
use crate::crypto::{self, Digest, KeyOrigin, PublicKey, SymKey};
use crate::registry::{SessionLookup, SessionRecord, SessionStore};
use crate::wire::{Envelope, Frame, KeyBytes, MessageTag, NonceBytes, ProtocolMessage, UserPart};

#[derive(Debug, Clone, PartialEq, Eq)]
enum RegFlow {
    Idle,
    AwaitDeviceAck {
        n_u: NonceBytes,
        user_id: String,
    },
    AwaitUserAck {
        n_u: NonceBytes,
        user_id: String,
        otp: String,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct ConnFlow {
    nonce: NonceBytes,
    peer: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum SvcFlow {
    Idle,
    AwaitGrant {
        n_u: NonceBytes,
        p2: Vec<u8>,
    },
    AwaitForward {
        n_u: NonceBytes,
        p2: Vec<u8>,
        k: KeyBytes,
        id_sp: String,
    },
}

/// A user's device. Until `provision` it is an empty shell with a machine id.
#[derive(Debug, Clone)]
pub struct Device {
    id: String,
    machine_id: String,
    dmn: String,
    cks_addr: String,
    cks_pk: PublicKey,
    hardware: Option<ProvisionedDevice>,
    user_id: Option<String>,
    temp_id: Option<String>,
    reg: RegFlow,
    initiating: Option<ConnFlow>,
    responding: Option<ConnFlow>,
    spent: Vec<NonceBytes>,
    svc: SvcFlow,
    sessions: SessionStore,
    inbox: Vec<AppMessage>,
}

impl Device {
    pub fn new(
        id: impl Into<String>,
        machine_id: impl Into<String>,
        dmn: impl Into<String>,
        cks_addr: impl Into<String>,
        cks_pk: PublicKey,
    ) -> Self {
        Self {
            id: id.into(),
            machine_id: machine_id.into(),
            dmn: dmn.into(),
            cks_addr: cks_addr.into(),
            cks_pk,
            hardware: None,
            user_id: None,
            temp_id: None,
            reg: RegFlow::Idle,
            initiating: None,
            responding: None,
            spent: Vec::new(),
            svc: SvcFlow::Idle,
            sessions: SessionStore::default(),
            inbox: Vec::new(),
        }
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn machine_id(&self) -> &str {
        &self.machine_id
    }

    pub fn dmn(&self) -> &str {
        &self.dmn
    }

    pub fn user_id(&self) -> Option<&str> {
        self.user_id.as_deref()
    }

    pub fn temp_id(&self) -> Option<&str> {
        self.temp_id.as_deref()
    }

    pub fn is_provisioned(&self) -> bool {
        self.hardware.is_some()
    }

    pub fn sessions(&self) -> &SessionStore {
        &self.sessions
    }

    pub fn inbox(&self) -> &[AppMessage] {
        &self.inbox
    }

    /// Key of the service flow awaiting the SP's forward, if any.
    pub fn provisional_key(&self) -> Option<KeyBytes> {
        match &self.svc {
            SvcFlow::AwaitForward { k, .. } => Some(*k),
            _ => None,
        }
    }

    pub fn answers_to(&self, addr: &str) -> bool {
        self.id == addr || self.temp_id.as_deref() == Some(addr)
    }

    pub fn provision(&mut self, hw: ProvisionedDevice) -> Result<(), String> {
        if hw.machine_id != self.machine_id {
            return Err(format!(
                "device {} has machine id {}, not {}",
                self.id, self.machine_id, hw.machine_id
            ));
        }
        self.hardware = Some(hw);
        Ok(())
    }

    fn token(&self) -> Result<Digest, Outcome> {
        let hw = self
            .hardware
            .as_ref()
            .ok_or_else(|| Outcome::violation("unprovisioned"))?;
        hw.sealed
            .unseal(&hw.storage_key)
            .map_err(|_| Outcome::violation("token-storage-corrupt"))
    }

    fn registered(&self) -> Result<(String, String), Outcome> {
        match (&self.user_id, &self.temp_id) {
            (Some(u), Some(t)) => Ok((u.clone(), t.clone())),
            _ => Err(Outcome::violation("unregistered")),
        }
    }

    pub fn begin_registration(
        &mut self,
        user_id: &str,
        ctx: &mut Ctx<'_>,
    ) -> Result<Outgoing, Outcome> {
        let token = self.token()?;
        let n_u = ctx.values.fresh_nonce(&self.id).value;
        let m = ProtocolMessage::RegDeviceAuth {
            machine_id: self.machine_id.clone(),
            token,
            n_u,
        };
        self.reg = RegFlow::AwaitDeviceAck {
            n_u,
            user_id: user_id.to_string(),
        };
        Ok(Outgoing::open(
            &self.cks_addr,
            ctx.seal_pk(&m, &self.cks_pk),
        ))
    }

    pub fn request_connection(
        &mut self,
        target_user: &str,
        ctx: &mut Ctx<'_>,
    ) -> Result<Outgoing, Outcome> {
        let (_, temp_id) = self.registered()?;
        let token_a = self.token()?;
        let n_a = ctx.values.fresh_nonce(&self.id).value;
        let m = ProtocolMessage::ConnRequest {
            id_target: target_user.to_string(),
            token_a,
            n_a,
            temp_id,
        };
        self.initiating = Some(ConnFlow {
            nonce: n_a,
            peer: target_user.to_string(),
        });
        Ok(Outgoing::open(
            &self.cks_addr,
            ctx.seal_pk(&m, &self.cks_pk),
        ))
    }

    pub fn request_service(
        &mut self,
        sr: &str,
        p2: &[u8],
        ctx: &mut Ctx<'_>,
    ) -> Result<Outgoing, Outcome> {
        let (_, temp_id) = self.registered()?;
        if p2.is_empty() {
            return Err(Outcome::violation("missing-passphrase"));
        }
        let token = self.token()?;
        let n_u = ctx.values.fresh_nonce(&self.id).value;
        let m = ProtocolMessage::SvcRequest {
            sr: sr.to_string(),
            p2: p2.to_vec(),
            token,
            n_u,
            temp_id,
        };
        self.svc = SvcFlow::AwaitGrant {
            n_u,
            p2: p2.to_vec(),
        };
        Ok(Outgoing::open(
            &self.cks_addr,
            ctx.seal_pk(&m, &self.cks_pk),
        ))
    }

    /// Encrypts `payload` under the newest live session with `peer`.
    pub fn send_app_data(
        &mut self,
        peer: &str,
        to: &str,
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
        let out = Outgoing::open(
            to,
            plain(&ProtocolMessage::AppData {
                ciphertext: ct.to_bytes(),
            }),
        );
        Ok(if self.temp_id.as_deref() == Some(rec.parties.0.as_str()) {
            out.sent_as(rec.parties.0.clone())
        } else {
            out
        })
    }

    pub fn handle(&mut self, frame: &Frame, ctx: &mut Ctx<'_>) -> Step {
        let env = match decode_frame(frame) {
            Ok(env) => env,
            Err(o) => return o.into(),
        };
        match env.tag() {
            MessageTag::RegDeviceAck => self.on_device_ack(&env, ctx),
            MessageTag::RegUserAck => self.on_user_ack(&env, ctx).into(),
            MessageTag::ConnNotify => self.on_notify(&env, ctx),
            MessageTag::ConnKeyA | MessageTag::ConnKeyB => self.on_conn_key(&env, ctx).into(),
            MessageTag::ConnReject => {
                let Envelope::Plain(ProtocolMessage::ConnReject { reason }) = env else {
                    unreachable!("conn-reject is plain");
                };
                self.initiating = None;
                Outcome::Reject(reason).into()
            }
            MessageTag::SvcGrantUser => self.on_grant(&env),
            MessageTag::SvcForward => self.on_forward(&env, ctx).into(),
            MessageTag::AppData => {
                let Envelope::Plain(ProtocolMessage::AppData { ciphertext }) = env else {
                    unreachable!("app-data is plain");
                };
                match receive_app_data(&self.sessions, &ciphertext, ctx.now) {
                    Ok(msg) => {
                        self.inbox.push(msg);
                        Outcome::progress("app-data").into()
                    }
                    Err(o) => o.into(),
                }
            }
            _ => unexpected(&env, "device").into(),
        }
    }

    fn on_device_ack(&mut self, env: &Envelope, ctx: &mut Ctx<'_>) -> Step {
        let RegFlow::AwaitDeviceAck { n_u, user_id } = self.reg.clone() else {
            return unexpected(env, "device").into();
        };
        let (ack_d, otp) = match env.open_sym(&crypto::nonce_key(&n_u)) {
            Ok(ProtocolMessage::RegDeviceAck { ack_d, otp }) => (ack_d, otp),
            Ok(_) => unreachable!("open_sym checks the inner tag"),
            Err(e) => return open_failure("reg-device-ack", e).into(),
        };
        let token = match self.token() {
            Ok(t) => t,
            Err(o) => return o.into(),
        };
        let expected = ctx
            .suite
            .hash_concat(&[token.as_bytes(), self.dmn.as_bytes()]);
        if ack_d != expected {
            self.reg = RegFlow::Idle;
            return Outcome::violation("compromised-server-or-channel").into();
        }
        let n_u2 = ctx.values.fresh_nonce(&self.id).value;
        let m = ProtocolMessage::RegUser {
            id_u: user_id.clone(),
            otp: otp.clone(),
            n_u: n_u2,
        };
        self.reg = RegFlow::AwaitUserAck {
            n_u: n_u2,
            user_id,
            otp,
        };
        Step::send(
            Outcome::progress("device-authenticated"),
            vec![Outgoing::open(
                &self.cks_addr,
                ctx.seal_pk(&m, &self.cks_pk),
            )],
        )
    }

    fn on_user_ack(&mut self, env: &Envelope, ctx: &Ctx<'_>) -> Outcome {
        let RegFlow::AwaitUserAck { n_u, user_id, otp } = self.reg.clone() else {
            return unexpected(env, "device");
        };
        let (ack_u, temp_id) = match env.open_sym(&crypto::nonce_key(&n_u)) {
            Ok(ProtocolMessage::RegUserAck { ack_u, temp_id }) => (ack_u, temp_id),
            Ok(_) => unreachable!("open_sym checks the inner tag"),
            Err(e) => return open_failure("reg-user-ack", e),
        };
        self.reg = RegFlow::Idle;
        if ack_u != ctx.suite.hash_concat(&[user_id.as_bytes(), otp.as_bytes()]) {
            return Outcome::violation("bad-ack-u");
        }
        self.user_id = Some(user_id);
        self.temp_id = Some(temp_id);
        Outcome::Complete(Phase::Registration)
    }

    fn on_notify(&mut self, env: &Envelope, ctx: &mut Ctx<'_>) -> Step {
        let Envelope::Plain(ProtocolMessage::ConnNotify { id_b, id_a }) = env else {
            unreachable!("conn-notify is plain");
        };
        let (user_id, _) = match self.registered() {
            Ok(r) => r,
            Err(o) => return o.into(),
        };
        if *id_b != user_id {
            return Outcome::violation("misaddressed-notify").into();
        }
        let token_b = match self.token() {
            Ok(t) => t,
            Err(o) => return o.into(),
        };
        let n_b = ctx.values.fresh_nonce(&self.id).value;
        self.responding = Some(ConnFlow {
            nonce: n_b,
            peer: id_a.clone(),
        });
        let m = ProtocolMessage::ConnRespond { token_b, n_b };
        Step::send(
            Outcome::progress("responded"),
            vec![Outgoing::open(
                &self.cks_addr,
                ctx.seal_pk(&m, &self.cks_pk),
            )],
        )
    }

    fn on_conn_key(&mut self, env: &Envelope, ctx: &mut Ctx<'_>) -> Outcome {
        let key_ref = env.key_ref();
        let matches = |n: &NonceBytes| Some(crypto::nonce_key(n).key_ref()) == key_ref;
        let flow = match env.tag() {
            MessageTag::ConnKeyA => &mut self.initiating,
            _ => &mut self.responding,
        };
        if let Some(f) = flow.as_ref().filter(|f| matches(&f.nonce)) {
            let k = match open_conn_key(env, &f.nonce) {
                Ok(k) => k,
                Err(o) => return o,
            };
            let f = flow.take().expect("checked");
            let user_id = self.user_id.clone().unwrap_or_default();
            self.sessions.put(SessionRecord {
                key: SymKey::new(k, KeyOrigin::Session),
                parties: (user_id, f.peer),
                issued_at: ctx.now,
                ttl: ctx.ttl,
            });
            self.spent.push(f.nonce);
            return Outcome::Complete(Phase::Connection);
        }
        let Some(spent) = self.spent.iter().find(|n| matches(n)) else {
            return unexpected(env, "device");
        };
        let k = match open_conn_key(env, spent) {
            Ok(k) => k,
            Err(o) => return o,
        };
        match self.sessions.get(&crypto::key_ref_of(&k), ctx.now) {
            SessionLookup::Live(_) => Outcome::reject("replay"),
            _ => Outcome::reject("expired"),
        }
    }

    fn on_grant(&mut self, env: &Envelope) -> Step {
        let SvcFlow::AwaitGrant { n_u, p2 } = self.svc.clone() else {
            return unexpected(env, "device").into();
        };
        let (k, enc_p1, id_sp, echoed) = match env.open_sym(&crypto::nonce_key(&n_u)) {
            Ok(ProtocolMessage::SvcGrantUser {
                k,
                enc_p1,
                id_sp,
                p2,
            }) => (k, enc_p1, id_sp, p2),
            Ok(_) => unreachable!("open_sym checks the inner tag"),
            Err(_) => return Outcome::violation("cks-impersonation-suspected").into(),
        };
        if echoed != p2 {
            self.svc = SvcFlow::Idle;
            return Outcome::violation("cks-impersonation-suspected").into();
        }
        let (_, temp_id) = match self.registered() {
            Ok(r) => r,
            Err(o) => return o.into(),
        };
        let ticket = plain(&ProtocolMessage::SvcTicket {
            id_sp: id_sp.clone(),
            enc_p1,
        });
        self.svc = SvcFlow::AwaitForward {
            n_u,
            p2,
            k,
            id_sp: id_sp.clone(),
        };
        Step::send(
            Outcome::progress("ticket-forwarded"),
            vec![Outgoing::open(id_sp, ticket).sent_as(temp_id)],
        )
    }

    fn on_forward(&mut self, env: &Envelope, ctx: &mut Ctx<'_>) -> Outcome {
        let SvcFlow::AwaitForward { n_u, p2, k, id_sp } = self.svc.clone() else {
            return unexpected(env, "device");
        };
        let Envelope::Plain(ProtocolMessage::SvcForward { user_part }) = env else {
            unreachable!("svc-forward is plain");
        };
        let part = match crypto::sym_open(&crypto::nonce_key(&n_u), user_part)
            .ok()
            .and_then(|raw| UserPart::decode(&raw).ok())
        {
            Some(p) => p,
            None => return Outcome::violation("sp-impersonation-suspected"),
        };
        self.svc = SvcFlow::Idle;
        if part.p2 != p2 || part.k != k || part.id_sp != id_sp {
            return Outcome::violation("sp-impersonation-suspected");
        }
        let temp_id = self.temp_id.clone().unwrap_or_default();
        self.sessions.put(SessionRecord {
            key: SymKey::new(k, KeyOrigin::Session),
            parties: (temp_id, id_sp),
            issued_at: ctx.now,
            ttl: ctx.ttl,
        });
        self.spent.push(n_u);
        Outcome::Complete(Phase::Transaction)
    }

    pub fn snapshot(&self) -> serde_json::Value {
        serde_json::json!({
            "id": self.id,
            "machine_id": self.machine_id,
            "user_id": self.user_id,
            "temp_id": self.temp_id,
            "sealed_token": self.hardware.as_ref().map(|h| &h.sealed),
            "sessions": self.sessions,
        })
    }
}

fn open_conn_key(env: &Envelope, nonce: &NonceBytes) -> Result<KeyBytes, Outcome> {
    match env.open_sym(&crypto::nonce_key(nonce)) {
        Ok(ProtocolMessage::ConnKeyA { k } | ProtocolMessage::ConnKeyB { k }) => Ok(k),
        Ok(_) => unreachable!("open_sym checks the inner tag"),
        Err(e) => Err(open_failure(env.tag().name(), e)),
    }
}
