#![allow(dead_code)]

pub mod strategy;

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use stwa_core::crypto::hash_with;
use stwa_core::crypto::HashAlg;
use stwa_core::runner::{self, Runner};
use stwa_core::scenario::Scenario;
use stwa_core::verifier::closure::refs_unlocked_by;
use stwa_core::verifier::term::Term;

pub fn scenario_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios")
}

pub fn scenario_text(name: &str) -> String {
    std::fs::read_to_string(scenario_dir().join(format!("{name}.scn"))).unwrap()
}

pub fn load(name: &str) -> Scenario {
    Scenario::parse(&scenario_text(name)).unwrap()
}

pub fn run(scn: &Scenario) -> Runner {
    runner::run(scn).unwrap_or_else(|e| panic!("{e}"))
}

pub fn run_named(name: &str) -> Runner {
    run(&load(name))
}

/// Names of every bundled scenario expected to run to completion.
pub fn bundled() -> Vec<String> {
    let mut names: Vec<String> = std::fs::read_dir(scenario_dir())
        .unwrap()
        .filter_map(|e| {
            let p = e.unwrap().path();
            (p.extension()? == "scn").then(|| p.file_stem().unwrap().to_string_lossy().into_owned())
        })
        .collect();
    names.sort();
    names
}

/// Replaces the `seed:` header of a scenario text.
pub fn with_seed(text: &str, seed: u64) -> String {
    let mut out = String::new();
    let mut replaced = false;
    for line in text.lines() {
        if line.trim_start().starts_with("seed:") {
            out.push_str(&format!("seed: {seed}\n"));
            replaced = true;
        } else {
            out.push_str(line);
            out.push('\n');
        }
    }
    if !replaced {
        out = format!("seed: {seed}\n{out}");
    }
    out
}

const ALGS: [HashAlg; 3] = [HashAlg::Sha256, HashAlg::LegacyMd5, HashAlg::LegacySha1];

/// Derivable terms by naive iteration: each pass re-examines every candidate
/// against every known term until nothing changes. Shares no code with the
/// worklist closure beyond the key fingerprint function.
pub fn oracle_derivable(
    base: &[Term],
    universe: &BTreeSet<Vec<u8>>,
    private_keys: &BTreeSet<String>,
) -> BTreeSet<Term> {
    let mut candidates: Vec<Term> = Vec::new();
    for t in base {
        for s in t.subterms() {
            candidates.push(s.clone());
        }
    }
    candidates.extend(universe.iter().cloned().map(Term::Atom));
    candidates.sort();
    candidates.dedup();

    let mut known = vec![false; candidates.len()];
    for (i, c) in candidates.iter().enumerate() {
        known[i] = base.contains(c);
    }
    loop {
        let mut changed = false;
        let known_atoms: Vec<Vec<u8>> = candidates
            .iter()
            .zip(&known)
            .filter_map(|(c, &k)| match c {
                Term::Atom(a) if k => Some(a.clone()),
                _ => None,
            })
            .collect();
        let unlocked: BTreeSet<String> = known_atoms
            .iter()
            .flat_map(|a| refs_unlocked_by(a))
            .collect();
        let mut hashes: BTreeSet<Vec<u8>> = BTreeSet::new();
        for a in &known_atoms {
            for alg in ALGS {
                hashes.insert(hash_with(alg, a).as_bytes().to_vec());
            }
            for b in &known_atoms {
                let ab = [a.as_slice(), b.as_slice()].concat();
                for alg in ALGS {
                    hashes.insert(hash_with(alg, &ab).as_bytes().to_vec());
                }
            }
        }
        for i in 0..candidates.len() {
            if known[i] {
                continue;
            }
            let target = &candidates[i];
            let from_parent = candidates.iter().zip(&known).any(|(p, &k)| {
                k && match p {
                    Term::Tuple(ts) => ts.contains(target),
                    Term::Sym { key_ref, body, .. } => {
                        **body == *target && unlocked.contains(key_ref)
                    }
                    Term::Asym { key_id, body, .. } => {
                        **body == *target && private_keys.contains(key_id)
                    }
                    Term::Atom(_) => false,
                }
            });
            let from_hash =
                matches!(target, Term::Atom(a) if universe.contains(a) && hashes.contains(a));
            if from_parent || from_hash {
                known[i] = true;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    candidates
        .into_iter()
        .zip(known)
        .filter_map(|(c, k)| k.then_some(c))
        .collect()
}
