use super::{decode_frame, open_failure, unexpected, Ctx, Outcome, Outgoing, Step};
use crate::crypto::{AsymKeyPair, PublicKey};
use crate::registry::{KdcEntry, KdcLog, Ticks};
use crate::wire::{Frame, MessageTag, ProtocolMessage};

/// Timestamp component of a token: the tick as 10-digit decimal.
pub fn render_timestamp(tick: Ticks) -> String {
    format!("{tick:010}")
}

#[derive(Debug, Clone)]
pub struct Kdc {
    id: String,
    keys: AsymKeyPair,
    cks_addr: String,
    cks_pk: PublicKey,
    log: KdcLog,
}

impl Kdc {
    pub fn new(keys: AsymKeyPair, cks_addr: impl Into<String>, cks_pk: PublicKey) -> Self {
        Self {
            id: keys.public.key_id.clone(),
            keys,
            cks_addr: cks_addr.into(),
            cks_pk,
            log: KdcLog::default(),
        }
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn public_key(&self) -> &PublicKey {
        &self.keys.public
    }

    pub fn log(&self) -> &KdcLog {
        &self.log
    }

    pub fn handle(&mut self, frame: &Frame, ctx: &mut Ctx<'_>) -> Step {
        let env = match decode_frame(frame) {
            Ok(env) => env,
            Err(o) => return o.into(),
        };
        if env.tag() != MessageTag::InitRegister {
            return unexpected(&env, "kdc").into();
        }
        let (machine_id, dmn, n_m, id_m) = match env.open_pk(&self.keys.private) {
            Ok(ProtocolMessage::InitRegister {
                machine_id,
                dmn,
                n_m,
                id_m,
            }) => (machine_id, dmn, n_m, id_m),
            Ok(_) => unreachable!("open_pk checks the inner tag"),
            Err(e) => return open_failure("init-register", e).into(),
        };
        if self.log.contains(&machine_id) {
            return Outcome::reject("duplicate").into();
        }
        let token = ctx
            .suite
            .hash_concat(&[id_m.as_bytes(), render_timestamp(ctx.now).as_bytes()]);
        self.log
            .record(KdcEntry {
                machine_id: machine_id.clone(),
                dmn: dmn.clone(),
                id_m,
                token: token.clone(),
                registered_at: ctx.now,
            })
            .expect("checked above");
        let to_mfr = ctx.seal_nonce(
            &ProtocolMessage::InitToken {
                token: token.clone(),
            },
            &n_m,
        );
        let to_cks = ctx.seal_pk(
            &ProtocolMessage::InitRecord {
                machine_id,
                dmn,
                token,
            },
            &self.cks_pk,
        );
        Step::send(
            Outcome::progress("token-issued"),
            vec![
                Outgoing::secure(&frame.from, to_mfr),
                Outgoing::open(&self.cks_addr, to_cks),
            ],
        )
    }

    pub fn snapshot(&self) -> serde_json::Value {
        serde_json::json!({ "log": self.log })
    }
}
