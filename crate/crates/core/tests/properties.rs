mod common;

use std::collections::{BTreeSet, HashSet};

use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};
use stwa_core::crypto::{
    generate_keypair, key_ref_of, nonce_key, pk_encrypt, pk_open, sym_encrypt, sym_open,
    CryptoMode, Digest, Entropy, KeyOrigin, SymKey,
};
use stwa_core::registry::{CksDatabase, DeviceRecord, SessionLookup, SessionRecord, SessionStore};
use stwa_core::verifier::closure::{close, universe};
use stwa_core::verifier::term::Term;
use stwa_core::wire::{Envelope, MessageTag, ProtocolMessage, SpIdentity, SpPart, UserPart};

use common::strategy::{any_message, blob, message, text};

#[test]
fn codec_round_trips_every_tag() {
    for &tag in MessageTag::ALL {
        let mut runner = TestRunner::new(Config {
            failure_persistence: None,
            ..Config::with_cases(1000)
        });
        runner
            .run(&message(tag), move |m| {
                let bytes = m.encode();
                prop_assert_eq!(bytes[0], tag.code());
                prop_assert_eq!(ProtocolMessage::decode(&bytes).unwrap(), m);
                Ok(())
            })
            .unwrap_or_else(|e| panic!("{tag}: {e}"));
    }
}

proptest! {
    #![proptest_config(Config::with_cases(2000))]

    #[test]
    fn codec_is_injective(a in any_message(), b in any_message()) {
        prop_assume!(a != b);
        prop_assert_ne!(a.encode(), b.encode());
    }

    #[test]
    fn inner_parts_round_trip(p2 in blob(), k in any::<[u8; 32]>(), id in text(), n in any::<[u8; 16]>()) {
        let u = UserPart { p2, k, id_sp: id.clone() };
        prop_assert_eq!(UserPart::decode(&u.encode()).unwrap(), u);
        let s = SpPart { k, id_u: id.clone() };
        prop_assert_eq!(SpPart::decode(&s.encode()).unwrap(), s);
        let i = SpIdentity { n_sp: n, id_u: id };
        prop_assert_eq!(SpIdentity::decode(&i.encode()).unwrap(), i);
    }
}

fn mode() -> impl Strategy<Value = CryptoMode> {
    prop_oneof![Just(CryptoMode::Transparent), Just(CryptoMode::Opaque)]
}

proptest! {
    #![proptest_config(Config::with_cases(256))]

    #[test]
    fn sym_round_trip(mode in mode(), key in any::<[u8; 32]>(), m in prop::collection::vec(any::<u8>(), 0..=4096), seed in any::<u64>()) {
        let key = SymKey::new(key, KeyOrigin::Session);
        let ct = sym_encrypt(mode, &key, &m, &mut Entropy::from_seed(seed)).to_bytes();
        prop_assert_eq!(sym_open(&key, &ct).unwrap(), m);
    }

    #[test]
    fn pk_round_trip(mode in mode(), kseed in any::<u64>(), m in prop::collection::vec(any::<u8>(), 0..=4096), seed in any::<u64>()) {
        let kp = generate_keypair(kseed, "CKS");
        let ct = pk_encrypt(mode, &kp.public, &m, &mut Entropy::from_seed(seed)).to_bytes();
        prop_assert_eq!(pk_open(&kp.private, &ct).unwrap(), m);
    }

    #[test]
    fn sym_single_byte_mutation_is_rejected(
        mode in mode(),
        key in any::<[u8; 32]>(),
        m in prop::collection::vec(any::<u8>(), 0..512),
        pos in any::<prop::sample::Index>(),
        delta in 1u8..=255,
    ) {
        let key = SymKey::new(key, KeyOrigin::Session);
        let mut ct = sym_encrypt(mode, &key, &m, &mut Entropy::from_seed(3)).to_bytes();
        let i = pos.index(ct.len());
        ct[i] = ct[i].wrapping_add(delta);
        prop_assert!(sym_open(&key, &ct).is_err(), "byte {} accepted", i);
    }

    #[test]
    fn pk_single_byte_mutation_is_rejected(
        mode in mode(),
        m in prop::collection::vec(any::<u8>(), 0..512),
        pos in any::<prop::sample::Index>(),
        delta in 1u8..=255,
    ) {
        let kp = generate_keypair(11, "CKS");
        let mut ct = pk_encrypt(mode, &kp.public, &m, &mut Entropy::from_seed(3)).to_bytes();
        let i = pos.index(ct.len());
        ct[i] = ct[i].wrapping_add(delta);
        prop_assert!(pk_open(&kp.private, &ct).is_err(), "byte {} accepted", i);
    }

    #[test]
    fn sealed_envelope_mutation_is_rejected(
        mode in mode(),
        k in any::<[u8; 32]>(),
        nonce in any::<[u8; 16]>(),
        pos in any::<prop::sample::Index>(),
        delta in 1u8..=255,
    ) {
        let key = nonce_key(&nonce);
        let env = Envelope::seal_sym(&ProtocolMessage::ConnKeyA { k }, &key, mode, &mut Entropy::from_seed(5));
        let mut bytes = env.encode();
        let i = pos.index(bytes.len());
        bytes[i] = bytes[i].wrapping_add(delta);
        let opened = Envelope::decode(&bytes).map(|e| e.open_sym(&key));
        prop_assert!(!matches!(opened, Ok(Ok(_))), "byte {} accepted", i);
    }
}

#[test]
fn nonce_key_is_injective_over_many_nonces() {
    let mut rng = Entropy::from_seed(2024);
    let mut keys = HashSet::new();
    let mut refs = HashSet::new();
    for _ in 0..100_000 {
        let n = rng.fresh_nonce("X").value;
        let k = nonce_key(&n);
        assert!(keys.insert(k.value), "nonce key collision");
        assert!(refs.insert(k.key_ref()), "key ref collision");
    }
}

fn db_with_device() -> CksDatabase {
    let mut db = CksDatabase::default();
    db.store_device(DeviceRecord {
        machine_id: "M001".into(),
        dmn: "DMN-9".into(),
        token: Digest::from_bytes(&[1u8; 32]).unwrap(),
        registered_at: 0,
    })
    .unwrap();
    db
}

proptest! {
    #[test]
    fn otp_is_consumed_exactly_once(otp in "[0-9]{8}", issued in 0u64..1000, reuses in 1usize..6, ttl in 1u64..200) {
        let mut db = db_with_device();
        db.issue_otp(&otp, "M001", issued);
        prop_assert_eq!(db.check_otp(&otp, issued, ttl).unwrap(), "M001");
        prop_assert!(db.consume_otp(&otp).is_ok());
        for i in 0..reuses {
            prop_assert!(db.check_otp(&otp, issued + i as u64, ttl).is_err());
            prop_assert!(db.consume_otp(&otp).is_err());
        }
    }

    #[test]
    fn session_expiry_is_monotone(issued in 0u64..1000, ttl in 1u64..500, probes in prop::collection::vec(0u64..2000, 1..40)) {
        let mut store = SessionStore::default();
        let key = SymKey::new([4u8; 32], KeyOrigin::Session);
        let r = key.key_ref();
        store.put(SessionRecord { key, parties: ("a".into(), "b".into()), issued_at: issued, ttl });
        let mut times = probes;
        times.sort_unstable();
        let mut expired = false;
        for now in times {
            let live = matches!(store.get(&r, now), SessionLookup::Live(_));
            prop_assert!(!(expired && live), "session revived at {}", now);
            prop_assert_eq!(live, now <= issued + ttl);
            expired |= !live;
        }
    }
}

/// Small pools so that keys, nonces and ciphertexts actually meet.
fn atom() -> impl Strategy<Value = Vec<u8>> {
    prop_oneof![
        (0u8..4).prop_map(|i| vec![i; 32]),
        (0u8..4).prop_map(|i| vec![0x80 | i; 16]),
        (0u8..4).prop_map(|i| vec![b'a' + i; 3]),
    ]
}

fn term() -> impl Strategy<Value = Term> {
    atom()
        .prop_map(Term::Atom)
        .prop_recursive(4, 24, 3, |inner| {
            prop_oneof![
                prop::collection::vec(inner.clone(), 1..3).prop_map(Term::Tuple),
                ((0u8..4), inner.clone()).prop_map(|(i, b)| Term::Sym {
                    key_ref: key_ref_of(&[i; 32]),
                    raw: vec![i],
                    body: Box::new(b),
                }),
                ((0u8..4), inner.clone()).prop_map(|(i, b)| Term::Sym {
                    key_ref: nonce_key(&[0x80 | i; 16]).key_ref(),
                    raw: vec![0x80 | i],
                    body: Box::new(b),
                }),
                (prop::sample::select(vec!["A", "B"]), inner).prop_map(|(id, b)| Term::Asym {
                    key_id: id.into(),
                    raw: id.as_bytes().to_vec(),
                    body: Box::new(b),
                }),
            ]
        })
}

fn keys() -> impl Strategy<Value = BTreeSet<String>> {
    prop::collection::btree_set(
        prop::sample::select(vec!["A".to_string(), "B".to_string()]),
        0..=2,
    )
}

proptest! {
    #![proptest_config(Config::with_cases(300))]

    #[test]
    fn closure_is_monotone(base in prop::collection::vec(term(), 0..6), extra in prop::collection::vec(term(), 0..4), pk in keys()) {
        let all: Vec<Term> = base.iter().chain(&extra).cloned().collect();
        let uni = universe(&all);
        let small = close(base, &uni, &pk);
        let big = close(all, &uni, &pk);
        prop_assert!(small.terms().is_subset(big.terms()));
    }

    #[test]
    fn closure_is_a_fixed_point(base in prop::collection::vec(term(), 0..6), pk in keys()) {
        let uni = universe(&base);
        let once = close(base, &uni, &pk);
        let twice = close(once.terms().iter().cloned(), &uni, &pk);
        prop_assert_eq!(once, twice);
    }

    #[test]
    fn closure_matches_naive_oracle(base in prop::collection::vec(term(), 0..6), pk in keys()) {
        let uni = universe(&base);
        let fast = close(base.clone(), &uni, &pk);
        let slow = common::oracle_derivable(&base, &uni, &pk);
        prop_assert_eq!(fast.terms(), &slow);
    }
}
