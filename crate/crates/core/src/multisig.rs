//! Deterministic simulated multi-signature scheme.
//!
//! A signature is the pair (signer key, message digest). Its fields are
//! private to this module and the only constructor is [`KeyPair::sign`], so
//! inside a simulation no node can produce a signature for a key it does not
//! hold. Aggregation keeps the sorted signer set; threshold policy is left
//! to the caller of [`verify_agg`].

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::hash::{Digest, Preimage};
use crate::types::NodeId;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PublicKey(pub Digest);

#[derive(Clone, Debug)]
pub struct KeyPair {
    signer: NodeId,
    secret: Digest,
    public: PublicKey,
}

impl KeyPair {
    /// Derives the keypair of `signer` from a setup seed.
    pub fn derive(signer: NodeId, setup_seed: u64) -> Self {
        let secret = Preimage::tagged("sk")
            .u64(setup_seed)
            .field(&signer.encode())
            .finish();
        let public = PublicKey(Preimage::tagged("pk").digest(&secret).finish());
        KeyPair {
            signer,
            secret,
            public,
        }
    }

    pub fn signer(&self) -> NodeId {
        self.signer
    }

    pub fn public(&self) -> PublicKey {
        self.public
    }

    pub fn sign(&self, message: &[u8]) -> Signature {
        self.sign_digest(Digest::of(message))
    }

    pub fn sign_digest(&self, message_digest: Digest) -> Signature {
        debug_assert_ne!(self.secret, Digest::ZERO);
        Signature {
            signer: self.signer,
            key: self.public,
            message_digest,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Signature {
    signer: NodeId,
    key: PublicKey,
    message_digest: Digest,
}

impl Signature {
    pub fn signer(&self) -> NodeId {
        self.signer
    }

    pub fn message_digest(&self) -> Digest {
        self.message_digest
    }
}

pub fn verify(sig: &Signature, message: &[u8], public: &PublicKey) -> bool {
    verify_digest(sig, &Digest::of(message), public)
}

pub fn verify_digest(sig: &Signature, message_digest: &Digest, public: &PublicKey) -> bool {
    sig.key == *public && sig.message_digest == *message_digest
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AggSignature {
    signers: BTreeSet<NodeId>,
    message_digest: Digest,
    genesis: bool,
}

impl AggSignature {
    /// Sentinel certificate carried by the genesis block; every verifier
    /// accepts it.
    pub fn genesis() -> Self {
        AggSignature {
            signers: BTreeSet::new(),
            message_digest: Digest::ZERO,
            genesis: true,
        }
    }

    pub fn is_genesis(&self) -> bool {
        self.genesis
    }

    pub fn signers(&self) -> &BTreeSet<NodeId> {
        &self.signers
    }

    pub fn message_digest(&self) -> Digest {
        self.message_digest
    }
}

/// Combines signatures over `message`. `None` if `parts` is empty or any
/// part fails to verify against its key.
pub fn aggregate<'a, I>(message: &[u8], parts: I) -> Option<AggSignature>
where
    I: IntoIterator<Item = (&'a PublicKey, &'a Signature)>,
{
    aggregate_digest(&Digest::of(message), parts)
}

pub fn aggregate_digest<'a, I>(message_digest: &Digest, parts: I) -> Option<AggSignature>
where
    I: IntoIterator<Item = (&'a PublicKey, &'a Signature)>,
{
    let mut signers = BTreeSet::new();
    for (pk, sig) in parts {
        if !verify_digest(sig, message_digest, pk) {
            return None;
        }
        signers.insert(sig.signer);
    }
    if signers.is_empty() {
        return None;
    }
    Some(AggSignature {
        signers,
        message_digest: *message_digest,
        genesis: false,
    })
}

/// The public keys of the current validator set, standing in for the
/// aggregated group key.
#[derive(Clone, Debug, Default)]
pub struct ValidatorSet {
    keys: BTreeMap<NodeId, PublicKey>,
}

impl ValidatorSet {
    pub fn new(keys: impl IntoIterator<Item = (NodeId, PublicKey)>) -> Self {
        ValidatorSet {
            keys: keys.into_iter().collect(),
        }
    }

    /// Keypairs for validators `0..n` and the matching set.
    pub fn generate(n: usize, setup_seed: u64) -> (Vec<KeyPair>, ValidatorSet) {
        let pairs: Vec<KeyPair> = (0..n as u32)
            .map(|i| KeyPair::derive(NodeId::validator(i), setup_seed))
            .collect();
        let set = ValidatorSet::new(pairs.iter().map(|k| (k.signer(), k.public())));
        (pairs, set)
    }

    pub fn key(&self, id: &NodeId) -> Option<&PublicKey> {
        self.keys.get(id)
    }

    pub fn contains(&self, id: &NodeId) -> bool {
        self.keys.contains_key(id)
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    /// Verifies a single signature from a member of the set.
    pub fn verify_member(&self, sig: &Signature, message_digest: &Digest) -> bool {
        self.key(&sig.signer)
            .is_some_and(|pk| verify_digest(sig, message_digest, pk))
    }
}

pub fn verify_agg(
    agg: &AggSignature,
    message: &[u8],
    group: &ValidatorSet,
    threshold: usize,
) -> bool {
    verify_agg_digest(agg, &Digest::of(message), group, threshold)
}

pub fn verify_agg_digest(
    agg: &AggSignature,
    message_digest: &Digest,
    group: &ValidatorSet,
    threshold: usize,
) -> bool {
    if agg.genesis {
        return true;
    }
    agg.message_digest == *message_digest
        && agg.signers.iter().all(|s| group.contains(s))
        && agg.signers.len() >= threshold
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn setup() -> (Vec<KeyPair>, ValidatorSet) {
        ValidatorSet::generate(4, 7)
    }

    #[test]
    fn sign_verify_round_trip() {
        let (keys, _) = setup();
        let sig = keys[0].sign(b"m");
        assert!(verify(&sig, b"m", &keys[0].public()));
    }

    #[test]
    fn wrong_message_rejected() {
        let (keys, _) = setup();
        let sig = keys[0].sign(b"m");
        assert!(!verify(&sig, b"m2", &keys[0].public()));
    }

    #[test]
    fn wrong_key_rejected() {
        let (keys, _) = setup();
        let sig = keys[0].sign(b"m");
        assert!(!verify(&sig, b"m", &keys[1].public()));
    }

    #[test]
    fn aggregate_three_of_four() {
        let (keys, set) = setup();
        let sigs: Vec<_> = keys[..3]
            .iter()
            .map(|k| (k.public(), k.sign(b"m")))
            .collect();
        let agg = aggregate(b"m", sigs.iter().map(|(p, s)| (p, s))).unwrap();
        assert_eq!(agg.signers().len(), 3);
        assert!(verify_agg(&agg, b"m", &set, 3));
        assert!(!verify_agg(&agg, b"m", &set, 4));
        assert!(!verify_agg(&agg, b"m2", &set, 3));
    }

    #[test]
    fn aggregate_empty_is_none() {
        assert!(aggregate(b"m", std::iter::empty()).is_none());
    }

    #[test]
    fn aggregate_rejects_contamination() {
        let (keys, _) = setup();
        let mut sigs: Vec<_> = keys[..2]
            .iter()
            .map(|k| (k.public(), k.sign(b"m")))
            .collect();
        sigs.push((keys[2].public(), keys[2].sign(b"other")));
        assert!(aggregate(b"m", sigs.iter().map(|(p, s)| (p, s))).is_none());
    }

    #[test]
    fn foreign_signer_fails_verify_agg() {
        let (keys, _) = setup();
        let (_, small) = ValidatorSet::generate(2, 7);
        let sigs: Vec<_> = keys[..3]
            .iter()
            .map(|k| (k.public(), k.sign(b"m")))
            .collect();
        let agg = aggregate(b"m", sigs.iter().map(|(p, s)| (p, s))).unwrap();
        assert!(!verify_agg(&agg, b"m", &small, 1));
    }

    #[test]
    fn genesis_sentinel_accepted() {
        let (_, set) = setup();
        assert!(verify_agg(&AggSignature::genesis(), b"anything", &set, 3));
    }

    proptest! {
        #[test]
        fn aggregate_then_verify_for_every_subset_size(
            msg in proptest::collection::vec(any::<u8>(), 0..64),
            n in 1usize..11,
            k_frac in 0.0f64..1.0,
        ) {
            let (keys, set) = ValidatorSet::generate(n, 3);
            let k = 1 + ((n - 1) as f64 * k_frac) as usize;
            let sigs: Vec<_> = keys[..k].iter().map(|kp| (kp.public(), kp.sign(&msg))).collect();
            let agg = aggregate(&msg, sigs.iter().map(|(p, s)| (p, s))).unwrap();
            prop_assert!(verify_agg(&agg, &msg, &set, k));
            prop_assert!(!verify_agg(&agg, &msg, &set, k + 1));
        }
    }
}
