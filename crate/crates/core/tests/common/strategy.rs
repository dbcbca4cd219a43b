//! Generators for wire messages.

use proptest::prelude::*;
use stwa_core::crypto::Digest;
use stwa_core::wire::{MessageTag, ProtocolMessage};

pub fn digest() -> impl Strategy<Value = Digest> {
    prop_oneof![
        prop::collection::vec(any::<u8>(), 16),
        prop::collection::vec(any::<u8>(), 20),
        prop::collection::vec(any::<u8>(), 32),
    ]
    .prop_map(|b| Digest::from_bytes(&b).unwrap())
}

pub fn text() -> impl Strategy<Value = String> {
    any::<String>()
}

pub fn blob() -> impl Strategy<Value = Vec<u8>> {
    prop::collection::vec(any::<u8>(), 0..96)
}

pub fn message(tag: MessageTag) -> BoxedStrategy<ProtocolMessage> {
    use ProtocolMessage as M;
    let n = any::<[u8; 16]>;
    let k = any::<[u8; 32]>;
    match tag {
        MessageTag::InitRegister => (text(), text(), n(), text())
            .prop_map(|(machine_id, dmn, n_m, id_m)| M::InitRegister {
                machine_id,
                dmn,
                n_m,
                id_m,
            })
            .boxed(),
        MessageTag::InitToken => digest().prop_map(|token| M::InitToken { token }).boxed(),
        MessageTag::InitRecord => (text(), text(), digest())
            .prop_map(|(machine_id, dmn, token)| M::InitRecord {
                machine_id,
                dmn,
                token,
            })
            .boxed(),
        MessageTag::RegDeviceAuth => (text(), digest(), n())
            .prop_map(|(machine_id, token, n_u)| M::RegDeviceAuth {
                machine_id,
                token,
                n_u,
            })
            .boxed(),
        MessageTag::RegDeviceAck => (digest(), text())
            .prop_map(|(ack_d, otp)| M::RegDeviceAck { ack_d, otp })
            .boxed(),
        MessageTag::RegUser => (text(), text(), n())
            .prop_map(|(id_u, otp, n_u)| M::RegUser { id_u, otp, n_u })
            .boxed(),
        MessageTag::RegUserAck => (digest(), text())
            .prop_map(|(ack_u, temp_id)| M::RegUserAck { ack_u, temp_id })
            .boxed(),
        MessageTag::ConnRequest => (text(), digest(), n(), text())
            .prop_map(|(id_target, token_a, n_a, temp_id)| M::ConnRequest {
                id_target,
                token_a,
                n_a,
                temp_id,
            })
            .boxed(),
        MessageTag::ConnNotify => (text(), text())
            .prop_map(|(id_b, id_a)| M::ConnNotify { id_b, id_a })
            .boxed(),
        MessageTag::ConnRespond => (digest(), n())
            .prop_map(|(token_b, n_b)| M::ConnRespond { token_b, n_b })
            .boxed(),
        MessageTag::ConnKeyA => k().prop_map(|k| M::ConnKeyA { k }).boxed(),
        MessageTag::ConnKeyB => k().prop_map(|k| M::ConnKeyB { k }).boxed(),
        MessageTag::ConnReject => text().prop_map(|reason| M::ConnReject { reason }).boxed(),
        MessageTag::SvcRequest => (text(), blob(), digest(), n(), text())
            .prop_map(|(sr, p2, token, n_u, temp_id)| M::SvcRequest {
                sr,
                p2,
                token,
                n_u,
                temp_id,
            })
            .boxed(),
        MessageTag::SvcGrantUser => (k(), blob(), text(), blob())
            .prop_map(|(k, enc_p1, id_sp, p2)| M::SvcGrantUser {
                k,
                enc_p1,
                id_sp,
                p2,
            })
            .boxed(),
        MessageTag::SvcTicket => (text(), blob())
            .prop_map(|(id_sp, enc_p1)| M::SvcTicket { id_sp, enc_p1 })
            .boxed(),
        MessageTag::SvcVerify => (blob(), blob())
            .prop_map(|(enc_p1, enc_identity)| M::SvcVerify {
                enc_p1,
                enc_identity,
            })
            .boxed(),
        MessageTag::SvcConfirm => (blob(), blob())
            .prop_map(|(user_part, sp_part)| M::SvcConfirm { user_part, sp_part })
            .boxed(),
        MessageTag::SvcForward => blob()
            .prop_map(|user_part| M::SvcForward { user_part })
            .boxed(),
        MessageTag::AppData => blob()
            .prop_map(|ciphertext| M::AppData { ciphertext })
            .boxed(),
    }
}

pub fn any_message() -> BoxedStrategy<ProtocolMessage> {
    prop::sample::select(MessageTag::ALL.to_vec())
        .prop_flat_map(message)
        .boxed()
}
