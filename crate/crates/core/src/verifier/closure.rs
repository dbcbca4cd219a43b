//! Least fixed point of what a party can derive from a set of terms.
//!
//! Rules: split tuples; open a symmetric ciphertext when a known atom is its
//! key (directly, or as a nonce through the nonce-key derivation); open a
//! public-key ciphertext when its private key is held; hash one known atom,
//! or two concatenated, with any supported hash. Hash results are kept only
//! when they occur somewhere in the trace, which keeps the closure finite.

use std::collections::{BTreeMap, BTreeSet};

use super::term::Term;
use crate::crypto::{hash_with, key_ref_of, nonce_key, HashAlg, NONCE_LEN, SYM_KEY_LEN};

const HASHES: [HashAlg; 3] = [HashAlg::Sha256, HashAlg::LegacyMd5, HashAlg::LegacySha1];

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Closure {
    terms: BTreeSet<Term>,
    atoms: BTreeSet<Vec<u8>>,
}

impl Closure {
    pub fn contains(&self, t: &Term) -> bool {
        self.terms.contains(t)
    }

    pub fn knows(&self, atom: &[u8]) -> bool {
        self.atoms.contains(atom)
    }

    pub fn terms(&self) -> &BTreeSet<Term> {
        &self.terms
    }

    pub fn atoms(&self) -> &BTreeSet<Vec<u8>> {
        &self.atoms
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }
}

/// Key refs a raw atom would unlock if it were used as a key.
pub fn refs_unlocked_by(atom: &[u8]) -> Vec<String> {
    let mut out = Vec::new();
    if atom.len() == SYM_KEY_LEN {
        out.push(key_ref_of(atom));
    }
    if let Ok(n) = <[u8; NONCE_LEN]>::try_from(atom) {
        out.push(nonce_key(&n).key_ref());
    }
    out
}

/// Candidate hashes of `a` alone and of `a ‖ b`, `b ‖ a`.
pub fn hash_candidates(a: &[u8], b: Option<&[u8]>) -> Vec<Vec<u8>> {
    let mut inputs = vec![a.to_vec()];
    if let Some(b) = b {
        inputs.push([a, b].concat());
        inputs.push([b, a].concat());
    }
    let mut out = Vec::new();
    for input in &inputs {
        for alg in HASHES {
            out.push(hash_with(alg, input).as_bytes().to_vec());
        }
    }
    out
}

/// Every atom occurring in `terms`, at any depth.
pub fn universe<'a>(terms: impl IntoIterator<Item = &'a Term>) -> BTreeSet<Vec<u8>> {
    let mut out = BTreeSet::new();
    for t in terms {
        for s in t.subterms() {
            if let Term::Atom(a) = s {
                out.insert(a.clone());
            }
        }
    }
    out
}

pub fn close(
    base: impl IntoIterator<Item = Term>,
    universe: &BTreeSet<Vec<u8>>,
    private_keys: &BTreeSet<String>,
) -> Closure {
    let mut c = Closure::default();
    let mut refs: BTreeSet<String> = BTreeSet::new();
    let mut locked: BTreeMap<String, Vec<Term>> = BTreeMap::new();
    let mut work: Vec<Term> = base.into_iter().collect();
    while let Some(t) = work.pop() {
        if c.terms.contains(&t) {
            continue;
        }
        c.terms.insert(t.clone());
        match t {
            Term::Atom(a) => {
                for r in refs_unlocked_by(&a) {
                    if let Some(bodies) = locked.remove(&r) {
                        work.extend(bodies);
                    }
                    refs.insert(r);
                }
                let mut derived = hash_candidates(&a, None);
                for b in c.atoms.iter().chain([&a]) {
                    derived.extend(hash_candidates(&a, Some(b)));
                }
                work.extend(
                    derived
                        .into_iter()
                        .filter(|h| universe.contains(h))
                        .map(Term::Atom),
                );
                c.atoms.insert(a);
            }
            Term::Tuple(ts) => work.extend(ts),
            Term::Sym { key_ref, body, .. } => {
                if refs.contains(&key_ref) {
                    work.push(*body);
                } else {
                    locked.entry(key_ref).or_default().push(*body);
                }
            }
            Term::Asym { key_id, body, .. } => {
                if private_keys.contains(&key_id) {
                    work.push(*body);
                }
            }
        }
    }
    c
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sym(key: &[u8], body: Term) -> Term {
        Term::Sym {
            key_ref: key_ref_of(key),
            raw: vec![],
            body: Box::new(body),
        }
    }

    #[test]
    fn ciphertext_without_key_stays_closed() {
        let k = [7u8; 32];
        let m = Term::atom(b"secret".to_vec());
        let base = vec![sym(&k, m.clone())];
        let c = close(base.clone(), &universe(&base), &BTreeSet::new());
        assert!(!c.contains(&m));
    }

    #[test]
    fn ciphertext_with_key_opens() {
        let k = [7u8; 32];
        let m = Term::atom(b"secret".to_vec());
        let base = vec![sym(&k, m.clone()), Term::atom(k.to_vec())];
        let c = close(base.clone(), &universe(&base), &BTreeSet::new());
        assert!(c.contains(&m));
    }

    #[test]
    fn key_arriving_later_unlocks_earlier_ciphertext() {
        let inner = [1u8; 32];
        let outer = [2u8; 32];
        let m = Term::atom(b"m".to_vec());
        let base = vec![
            sym(&inner, m.clone()),
            sym(&outer, Term::Tuple(vec![Term::atom(inner.to_vec())])),
            Term::atom(outer.to_vec()),
        ];
        let c = close(base.clone(), &universe(&base), &BTreeSet::new());
        assert!(c.contains(&m));
    }

    #[test]
    fn nonce_opens_nonce_derived_ciphertext() {
        let n = [5u8; 16];
        let m = Term::atom(b"m".to_vec());
        let t = Term::Sym {
            key_ref: nonce_key(&n).key_ref(),
            raw: vec![],
            body: Box::new(m.clone()),
        };
        let base = vec![t, Term::atom(n.to_vec())];
        let c = close(base.clone(), &universe(&base), &BTreeSet::new());
        assert!(c.contains(&m));
    }

    #[test]
    fn hashes_only_within_universe() {
        let a = b"MFG-01".to_vec();
        let b = b"0000000000".to_vec();
        let h = hash_with(HashAlg::Sha256, &[a.clone(), b.clone()].concat());
        let target = Term::atom(h.as_bytes().to_vec());
        let base = vec![Term::atom(a.clone()), Term::atom(b.clone())];
        let mut uni = universe(&base);
        let c = close(base.clone(), &uni, &BTreeSet::new());
        assert!(!c.contains(&target));
        assert_eq!(c.len(), 2);
        uni.insert(h.as_bytes().to_vec());
        let c = close(base, &uni, &BTreeSet::new());
        assert!(c.contains(&target));
    }

    #[test]
    fn private_key_opens_asym() {
        let m = Term::atom(b"m".to_vec());
        let t = Term::Asym {
            key_id: "CKS".into(),
            raw: vec![],
            body: Box::new(m.clone()),
        };
        let base = vec![t];
        let uni = universe(&base);
        assert!(!close(base.clone(), &uni, &BTreeSet::new()).contains(&m));
        let keys = BTreeSet::from(["CKS".to_string()]);
        assert!(close(base, &uni, &keys).contains(&m));
    }
}
