//! Acceptance suite. Prints one line per criterion and exits non-zero if any
//! criterion fails.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use proptest::test_runner::{Config, TestRunner};
use stwa_core::actors::{Outcome, OutcomeKind, Phase};
use stwa_core::crypto::{Ciphertext, CryptoMode};
use stwa_core::runner::Runner;
use stwa_core::scenario::Scenario;
use stwa_core::simnet::{to_jsonl, EventKind, TraceEvent};
use stwa_core::verifier::closure::close;
use stwa_core::verifier::term::{parse_payload, Class};
use stwa_core::verifier::{self, Analysis, Options, Verdict};
use stwa_core::wire::{Envelope, MessageTag, ProtocolMessage};

use common::{bundled, load, oracle_derivable, run, run_named};

type Criterion = fn() -> Result<String, String>;

const ACTORS: &str = "\
actor manufacturer MFG-01
actor kdc KDC
actor cks CKS
actor device U1 machine=M001 dmn=DMN-9
actor device U2 machine=M002 dmn=DMN-7
actor sp SP1 services=pay,shop
";

const REGISTER_BOTH: &str = "\
register-device U1
wait 1
register-device U2
register-user U1 alice
register-user U2 bob
";

fn scenario(seed: u64, ttl: u64, steps: &str) -> Scenario {
    let text = format!("seed: {seed}\nttl: {ttl}\n{ACTORS}{REGISTER_BOTH}{steps}");
    Scenario::parse(&text).unwrap_or_else(|e| panic!("{e}\n{text}"))
}

fn outcome(ev: &TraceEvent) -> Option<Outcome> {
    ev.outcome.as_deref().and_then(|o| o.parse().ok())
}

fn tag(ev: &TraceEvent) -> Option<MessageTag> {
    ev.payload()
        .ok()?
        .first()
        .copied()
        .and_then(MessageTag::from_u8)
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

const PROPERTIES: [&str; 4] = ["secrecy", "agreement", "freshness", "privacy"];

fn happy_path() -> Result<String, String> {
    let scn = load("happy");
    let t0 = Instant::now();
    let r = run(&scn);
    let elapsed = t0.elapsed();
    let steps = r.sim.steps();
    for phase in Phase::ALL {
        ensure(
            r.trace()
                .iter()
                .any(|e| outcome(e) == Some(Outcome::Complete(phase))),
            || format!("{} never completed", phase.as_str()),
        )?;
    }
    ensure(steps < 100, || format!("{steps} simulation steps"))?;
    ensure(elapsed < Duration::from_secs(1), || {
        format!("took {elapsed:?}")
    })?;
    let report = verifier::verify(
        r.trace(),
        Options {
            ttl: scn.settings.ttl,
        },
    )
    .map_err(|e| e.to_string())?;
    for p in PROPERTIES {
        ensure(report.verdict(p) == Verdict::Pass, || {
            format!("{p}: {:?}", report.verdict(p))
        })?;
    }
    Ok(format!(
        "4/4 phases complete, {steps} steps, {elapsed:.1?}, 4/4 properties pass"
    ))
}

fn passive_secrecy() -> Result<String, String> {
    let r = run_named("eavesdrop");
    let a = Analysis::new(r.trace()).map_err(|e| e.to_string())?;
    let base = a.adversary_base();
    let none = BTreeSet::new();
    let fast = close(base.clone(), a.universe(), &none);
    let slow = oracle_derivable(&base, a.universe(), &none);
    ensure(fast.terms() == &slow, || {
        format!(
            "closure has {} terms, enumerator {}; {} differ",
            fast.len(),
            slow.len(),
            fast.terms().symmetric_difference(&slow).count()
        )
    })?;
    let secrets = a.secrets();
    let mut checked = 0;
    for class in [
        Class::SessionKey,
        Class::P1,
        Class::P2,
        Class::Otp,
        Class::Token,
        Class::MachineId,
    ] {
        let values = secrets
            .get(&class)
            .ok_or_else(|| format!("no {} in trace", class.as_str()))?;
        for v in values.keys() {
            ensure(!fast.knows(v), || format!("{} derivable", class.as_str()))?;
            checked += 1;
        }
    }
    Ok(format!(
        "closure = enumerator ({} terms), 0/{checked} secret values derivable",
        fast.len()
    ))
}

fn forged_tokens() -> Result<String, String> {
    let mut frames = 0;
    for i in 0..100u64 {
        let attack = if i % 2 == 0 {
            "attack impersonate user EVE token=random target=bob user=eve\n".to_string()
        } else {
            format!(
                "attack impersonate user EVE like=U1 flip={} target=bob user=eve\n",
                (i * 37) % 256
            )
        };
        let r = run(&scenario(i, 100, &attack));
        let forged: Vec<_> = r
            .trace()
            .iter()
            .filter(|e| e.from == "EVE" && e.to == "CKS")
            .collect();
        ensure(forged.len() == 3, || {
            format!("run {i}: {} forged frames reached the CKS", forged.len())
        })?;
        for e in &forged {
            ensure(outcome(e).is_some_and(|o| o.is_failure()), || {
                format!("run {i}: CKS answered seq {} with {:?}", e.seq, e.outcome)
            })?;
        }
        frames += forged.len();
        let users: BTreeSet<&str> = r
            .cks()
            .unwrap()
            .database()
            .users()
            .map(|u| u.user_id.as_str())
            .collect();
        ensure(users == BTreeSet::from(["alice", "bob"]), || {
            format!("run {i}: users {users:?}")
        })?;
    }
    Ok(format!(
        "100/100 runs rejected ({frames} forged frames), 0 forged user records"
    ))
}

/// Session key carried by an accepted svc-forward.
fn forwarded_key(ev: &TraceEvent) -> Option<Vec<u8>> {
    parse_payload(&ev.payload().ok()?)
        .atoms
        .into_iter()
        .find(|a| a.class == Class::SessionKey)
        .map(|a| a.value)
}

fn completions_match_provider(r: &Runner, label: &str) -> Result<usize, String> {
    let mut n = 0;
    for ev in r.trace() {
        if outcome(ev) != Some(Outcome::Complete(Phase::Transaction)) {
            continue;
        }
        let k = forwarded_key(ev).ok_or_else(|| format!("{label}: no key in seq {}", ev.seq))?;
        let held = r
            .sim
            .nodes()
            .iter()
            .filter_map(|n| r.provider(n.id()))
            .any(|sp| sp.sessions().iter().any(|s| s.key.value.as_slice() == k));
        ensure(held, || {
            format!(
                "{label}: device completed seq {} with a key no provider holds",
                ev.seq
            )
        })?;
        n += 1;
    }
    Ok(n)
}

fn mutual_authentication() -> Result<String, String> {
    let mut attacked = 0;
    let mut matched = 0;
    for i in 0..50u64 {
        let device = if i % 3 == 0 { "U2" } else { "U1" };
        let service = if i % 2 == 0 { "pay" } else { "shop" };
        let request =
            format!("request-service {device} {service}\napp-message {device} SP1 \"order\"\n");
        let attacks = [
            ("fake-sp", "attack impersonate sp FAKE-SP\nattack redirect msg=svc-ticket to=FAKE-SP\n"),
            ("fake-cks", "attack impersonate cks FAKE-CKS claim-sp=SP1\nattack redirect msg=svc-request to=FAKE-CKS\n"),
        ];
        for (name, attack) in attacks {
            let label = format!("{name} run {i}");
            let r = run(&scenario(1000 + i, 100, &format!("{attack}{request}")));
            let trace = r.trace();
            let stop = trace
                .iter()
                .position(|e| outcome(e).is_some_and(|o| o.is_failure()))
                .ok_or_else(|| format!("{label}: no reject or violation"))?;
            ensure(
                !trace.iter().any(|e| tag(e) == Some(MessageTag::AppData)),
                || format!("{label}: app data exchanged"),
            )?;
            ensure(
                trace[..stop]
                    .iter()
                    .all(|e| outcome(e) != Some(Outcome::Complete(Phase::Transaction))),
                || format!("{label}: completed before the attack was caught"),
            )?;
            matched += completions_match_provider(&r, &label)?;
            attacked += 1;
        }
        let control = run(&scenario(1000 + i, 100, &request));
        let n = completions_match_provider(&control, &format!("control run {i}"))?;
        ensure(n == 1, || format!("control run {i}: {n} completions"))?;
        matched += n;
    }
    Ok(format!(
        "{attacked}/{attacked} impersonation runs stopped before app data, {matched}/{matched} completions share K with the provider"
    ))
}

/// Outcome of the injected copies of `t` delivered to their target.
fn replay_outcomes(r: &Runner, t: MessageTag) -> Vec<Outcome> {
    r.trace()
        .iter()
        .filter(|e| e.kind == EventKind::Injected && tag(e) == Some(t))
        .filter_map(outcome)
        .collect()
}

fn replays() -> Result<String, String> {
    let mut reasons: BTreeMap<String, usize> = BTreeMap::new();
    let mut tally = |o: &Outcome| *reasons.entry(o.to_string()).or_default() += 1;
    for k in 0..100u64 {
        let ttl = 50;
        let steps = format!(
            "connect U1 U2\nattack replay msg=conn-key-a delay={}\n",
            ttl + 1 + k
        );
        let r = run(&scenario(k, ttl, &steps));
        let o = replay_outcomes(&r, MessageTag::ConnKeyA);
        ensure(o.len() == 1 && o[0].is_failure(), || {
            format!("conn-key replay {k}: {o:?}")
        })?;
        tally(&o[0]);

        let ttl = 40;
        let steps = format!(
            "connect U1 U2\napp-message U1 U2 \"pay 10\"\nattack replay msg=app-data nth=1 delay={}\n",
            ttl + 1 + k
        );
        let r = run(&scenario(k, ttl, &steps));
        let o = replay_outcomes(&r, MessageTag::AppData);
        ensure(o.len() == 1 && o[0].is_failure(), || {
            format!("app-data replay {k}: {o:?}")
        })?;
        tally(&o[0]);

        let r = run(&scenario(
            k,
            100,
            &format!("attack replay msg=reg-user nth=1 delay={}\n", 1 + k),
        ));
        let o = replay_outcomes(&r, MessageTag::RegUser);
        ensure(o.len() == 1 && o[0].is_failure(), || {
            format!("otp reuse {k}: {o:?}")
        })?;
        tally(&o[0]);
    }
    let mut findings = 0;
    for k in 0..10u64 {
        let steps = format!(
            "connect U1 U2\napp-message U1 U2 \"pay 10\"\nattack replay msg=app-data nth=1 delay={}\n",
            1 + k
        );
        let r = run(&scenario(k, 40, &steps));
        let report = verifier::verify(r.trace(), Options { ttl: 40 }).map_err(|e| e.to_string())?;
        let accepted = replay_outcomes(&r, MessageTag::AppData)
            .iter()
            .any(|o| !o.is_failure());
        let flagged = report.findings().any(|c| c.name == "within-ttl-replay");
        ensure(!accepted || flagged, || {
            format!("within-ttl replay {k} accepted silently")
        })?;
        findings += usize::from(flagged);
    }
    let reasons: Vec<String> = reasons
        .into_iter()
        .map(|(r, n)| format!("{r} x{n}"))
        .collect();
    Ok(format!(
        "conn-key 100/100, app-data 100/100, otp 100/100 rejected [{}]; within-ttl replay flagged {findings}/10",
        reasons.join(", ")
    ))
}

/// The message inside a frame payload, opening transparent seals.
fn inner_message(payload: &[u8]) -> ProtocolMessage {
    match Envelope::decode(payload).unwrap() {
        Envelope::Plain(m) => m,
        Envelope::Sealed { ciphertext, .. } => {
            let ct = Ciphertext::from_bytes(&ciphertext).unwrap();
            ProtocolMessage::decode(&ct.body).unwrap()
        }
    }
}

fn find_unique(haystack: &[u8], needle: &[u8]) -> Option<usize> {
    let mut hits = haystack
        .windows(needle.len())
        .enumerate()
        .filter(|(_, w)| *w == needle);
    let (first, _) = hits.next()?;
    hits.next().is_none().then_some(first)
}

fn pass_phrase_tampering() -> Result<String, String> {
    const SETUP: &str = "register-device U1\nregister-user U1 alice\n";
    const FLOW: &str = "request-service U1 pay p2=correct-horse\napp-message U1 SP1 \"order\"\n";
    let build =
        |attack: &str| Scenario::parse(&format!("seed: 5\n{ACTORS}{SETUP}{attack}{FLOW}")).unwrap();
    let completed = |r: &Runner| {
        r.trace()
            .iter()
            .any(|e| outcome(e) == Some(Outcome::Complete(Phase::Transaction)))
            || r.trace()
                .iter()
                .any(|e| tag(e) == Some(MessageTag::AppData))
    };
    let baseline = run(&build(""));
    ensure(completed(&baseline), || {
        "untampered flow does not complete".into()
    })?;

    let targets = [
        (MessageTag::SvcGrantUser, "p2"),
        (MessageTag::SvcGrantUser, "enc_p1"),
        (MessageTag::SvcTicket, "enc_p1"),
        (MessageTag::SvcVerify, "enc_p1"),
        (MessageTag::SvcConfirm, "user_part"),
        (MessageTag::SvcForward, "user_part"),
    ];
    let mut summary = Vec::new();
    let mut total = 0;
    for (t, field) in targets {
        let ev = baseline
            .trace()
            .iter()
            .find(|e| tag(e) == Some(t))
            .ok_or_else(|| format!("no {t} in baseline"))?;
        let payload = ev.payload().unwrap();
        let m = inner_message(&payload);
        let value = m
            .fields()
            .into_iter()
            .find(|(n, _)| *n == field)
            .map(|(_, v)| v.to_vec())
            .ok_or_else(|| format!("{t} has no {field}"))?;
        let start = find_unique(&payload, &value)
            .ok_or_else(|| format!("{t}.{field} not located in frame"))?;
        for (offset, original) in value.iter().enumerate() {
            let attack = format!(
                "attack tamper msg={} index={} byte={}\n",
                t.name(),
                start + offset,
                original ^ 0xff
            );
            let r = run(&build(&attack));
            ensure(!completed(&r), || {
                format!("{t}.{field} byte {offset} tampered, flow completed")
            })?;
        }
        summary.push(format!("{t}.{field} {}", value.len()));
        total += value.len();
    }
    Ok(format!(
        "{total}/{total} tampered bytes abort the flow ({})",
        summary.join(", ")
    ))
}

fn kinds(r: &Runner) -> Vec<Option<OutcomeKind>> {
    r.trace()
        .iter()
        .map(|e| outcome(e).map(|o| o.kind()))
        .collect()
}

fn determinism() -> Result<String, String> {
    let names = bundled();
    for name in &names {
        let scn = load(name);
        let a = to_jsonl(run(&scn).trace());
        let b = to_jsonl(run(&scn).trace());
        ensure(a == b, || format!("{name}: transcripts differ"))?;
        let mut opaque = scn.clone();
        opaque.settings.crypto_mode = CryptoMode::Opaque;
        let mut transparent = scn;
        transparent.settings.crypto_mode = CryptoMode::Transparent;
        ensure(kinds(&run(&transparent)) == kinds(&run(&opaque)), || {
            format!("{name}: outcome kinds differ between modes")
        })?;
    }
    Ok(format!(
        "{n}/{n} scenarios byte-identical and mode-equivalent",
        n = names.len()
    ))
}

fn codec() -> Result<String, String> {
    for &t in MessageTag::ALL {
        let mut runner = TestRunner::new(Config {
            failure_persistence: None,
            ..Config::with_cases(1000)
        });
        runner
            .run(&common::strategy::message(t), |m| {
                proptest::prop_assert_eq!(ProtocolMessage::decode(&m.encode()).unwrap(), m);
                Ok(())
            })
            .map_err(|e| format!("{t}: {e}"))?;
    }
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("testdata/frames");
    let golden = |name: &str| std::fs::read(dir.join(name)).map_err(|e| format!("{name}: {e}"));
    let init = ProtocolMessage::decode(&golden("init_register.bin")?).map_err(|e| e.to_string())?;
    ensure(
        init == ProtocolMessage::InitRegister {
            machine_id: "M001".into(),
            dmn: "DMN-9".into(),
            n_m: [0; 16],
            id_m: "MFG-01".into(),
        },
        || format!("init_register.bin decoded to {init:?}"),
    )?;
    let reject = Envelope::decode(&golden("conn_reject_empty.bin")?).map_err(|e| e.to_string())?;
    ensure(
        reject
            == Envelope::Plain(ProtocolMessage::ConnReject {
                reason: String::new(),
            }),
        || format!("conn_reject_empty.bin decoded to {reject:?}"),
    )?;
    let notify = Envelope::decode(&golden("conn_notify.bin")?).map_err(|e| e.to_string())?;
    ensure(
        notify
            == Envelope::Plain(ProtocolMessage::ConnNotify {
                id_b: "bob".into(),
                id_a: "alice".into(),
            }),
        || format!("conn_notify.bin decoded to {notify:?}"),
    )?;
    let sealed = inner_message(&golden("init_token_sealed.bin")?);
    ensure(sealed.tag() == MessageTag::InitToken, || {
        format!("init_token_sealed.bin held {sealed:?}")
    })?;
    Ok(format!(
        "1000 round trips x {} tags, 4/4 golden frames",
        MessageTag::ALL.len()
    ))
}

fn main() -> ExitCode {
    let criteria: [(&str, Criterion); 8] = [
        ("happy path", happy_path),
        ("passive secrecy", passive_secrecy),
        ("ownership authentication", forged_tokens),
        ("mutual authentication", mutual_authentication),
        ("replay and freshness", replays),
        ("pass-phrase tampering", pass_phrase_tampering),
        ("determinism", determinism),
        ("codec", codec),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let t0 = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let dt = t0.elapsed();
        match result {
            Ok(detail) => println!("criterion {} {name}: PASS ({detail}) [{dt:.2?}]", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {} {name}: FAIL ({detail}) [{dt:.2?}]", i + 1);
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} acceptance criteria failed");
        ExitCode::FAILURE
    }
}
