//! Canned single-phase runs printed as numbered message timelines.

use std::fmt::Write as _;

use crate::actors::Phase;
use crate::runner::{self, RunError};
use crate::scenario::Scenario;
use crate::simnet::{EventKind, TraceEvent};
use crate::wire::{MessageTag, Wrapper};

const SETUP: &str = "\
seed: 1
actor manufacturer MFG-01
actor kdc KDC
actor cks CKS
actor device U1 machine=M001 dmn=DMN-9
actor device U2 machine=M002 dmn=DMN-7
actor sp SP1 services=pay
";

/// Steps that run silently before the demonstrated phase, and the phase's
/// own steps.
fn script(phase: Phase) -> (&'static str, &'static str) {
    match phase {
        Phase::Initialization => ("", "register-device U1\n"),
        Phase::Registration => ("register-device U1\n", "register-user U1 alice\n"),
        Phase::Connection => (
            "register-device U1\nwait 1\nregister-device U2\nregister-user U1 alice\nregister-user U2 bob\n",
            "connect U1 U2\n",
        ),
        Phase::Transaction => (
            "register-device U1\nregister-user U1 alice\n",
            "request-service U1 pay p2=blue-lantern\napp-message U1 SP1 \"balance?\"\napp-message SP1 U1 \"balance: 42\"\n",
        ),
    }
}

fn fields(tag: MessageTag) -> &'static str {
    use MessageTag::*;
    match tag {
        InitRegister => "machine id, model number, N_M, manufacturer id",
        InitToken => "T",
        InitRecord => "machine id, model number, T",
        RegDeviceAuth => "machine id, T, N_U",
        RegDeviceAck => "Ack_D, OTP",
        RegUser => "user id, OTP, N_U",
        RegUserAck => "Ack_U, TempID",
        ConnRequest => "target user id, T_A, N_A, TempID",
        ConnNotify => "user ids of B and A",
        ConnRespond => "T_B, N_B",
        ConnKeyA | ConnKeyB => "K",
        ConnReject => "reason",
        SvcRequest => "service, P2, T, N_U, TempID",
        SvcGrantUser => "K, P1 under N_CKS, SP id, P2",
        SvcTicket => "SP id, P1 under N_CKS",
        SvcVerify => "P1 under N_CKS, (N_SP, TempID) for CKS",
        SvcConfirm => "(P2, K, SP id) under N_U, (K, TempID) under N_SP",
        SvcForward => "(P2, K, SP id) under N_U",
        AppData => "message under K",
    }
}

fn wrapper(tag: MessageTag) -> &'static str {
    match tag.wrapper() {
        Wrapper::KdcPublicKey => "sealed to KDC",
        Wrapper::CksPublicKey => "sealed to CKS",
        Wrapper::Nonce => "under requester nonce",
        Wrapper::Plain => "clear",
    }
}

/// Number of a message within its phase. Internal steps fill the gaps.
fn number(tag: MessageTag) -> u32 {
    use MessageTag::*;
    match tag {
        InitRegister | RegDeviceAuth | ConnRequest | SvcRequest => 1,
        InitToken | ConnNotify => 2,
        InitRecord | RegDeviceAck | ConnRespond | SvcGrantUser => 3,
        RegUser | ConnKeyA | ConnKeyB | ConnReject | SvcTicket => 4,
        RegUserAck | SvcVerify => 5,
        SvcConfirm => 7,
        SvcForward => 8,
        AppData => 10,
    }
}

fn internal(phase: Phase, n: u32) -> Option<&'static str> {
    match (phase, n) {
        (Phase::Registration, 2) => Some("CKS compares machine id and token against its records"),
        (Phase::Transaction, 2) => Some("CKS authenticates the user, stores P2, picks a provider"),
        (Phase::Transaction, 6) => Some("CKS opens P1 and authenticates the provider"),
        (Phase::Transaction, 9) => Some("device checks P2 and K against its own copies"),
        _ => None,
    }
}

fn arrow(ev: &TraceEvent, tag: MessageTag) -> String {
    let channel = if ev.channel == crate::wire::Channel::Secure {
        ", secure channel"
    } else {
        ""
    };
    let outcome = match (ev.kind, ev.outcome.as_deref()) {
        (EventKind::Delivered, Some(o)) => o.to_string(),
        (kind, _) => format!("{kind:?}").to_lowercase(),
    };
    format!(
        "{} -> {}: {} [{}] ({}{channel})  => {}",
        ev.from,
        ev.to,
        tag.name(),
        fields(tag),
        wrapper(tag),
        outcome
    )
}

/// Runs the canned scenario for `phase` and renders its timeline.
pub fn timeline(phase: Phase) -> Result<String, RunError> {
    let (pre, main) = script(phase);
    let text = format!("{SETUP}{pre}{main}");
    let scn = Scenario::parse(&text).expect("canned scenario parses");
    let first_main = scn.steps.len() - main.lines().count();
    let run = runner::run(&scn)?;
    let start = run.spans()[first_main].events.start;
    let mut out = String::new();
    let _ = writeln!(out, "{} phase", phase.as_str());
    let mut last = 0;
    for ev in &run.trace()[start..] {
        let Some(tag) = ev
            .payload()
            .ok()
            .and_then(|p| p.first().copied())
            .and_then(MessageTag::from_u8)
        else {
            continue;
        };
        let n = number(tag);
        for gap in last + 1..n {
            if let Some(text) = internal(phase, gap) {
                let _ = writeln!(out, "{gap:>3}. {text}");
            }
        }
        if n == last {
            let _ = writeln!(out, "     {}", arrow(ev, tag));
        } else {
            let _ = writeln!(out, "{n:>3}. {}", arrow(ev, tag));
        }
        last = n;
    }
    Ok(out)
}

/// Distinct step numbers printed for `phase`.
pub fn step_count(rendered: &str) -> usize {
    rendered
        .lines()
        .filter(|l| {
            let t = l.trim_start();
            t.split_once(". ")
                .is_some_and(|(n, _)| n.parse::<u32>().is_ok())
        })
        .count()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn step_counts_match_phase_lengths() {
        for (phase, n) in [
            (Phase::Initialization, 3),
            (Phase::Registration, 5),
            (Phase::Connection, 4),
            (Phase::Transaction, 10),
        ] {
            let t = timeline(phase).unwrap();
            assert_eq!(step_count(&t), n, "{t}");
        }
    }

    #[test]
    fn init_demo_sends_token_on_secure_channel() {
        let t = timeline(Phase::Initialization).unwrap();
        assert!(t.contains("KDC -> MFG-01: init-token"));
        assert!(t.contains("secure channel"));
    }
}
