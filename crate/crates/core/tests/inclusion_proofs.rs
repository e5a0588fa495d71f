use sha2::{Digest as _, Sha256};

use pipesim::execution::{verify_inclusion, MerkleAccumulator};
use pipesim::types::{InclusionProof, Transaction};

fn sha(parts: &[&[u8]]) -> [u8; 32] {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p);
    }
    h.finalize().into()
}

/// Independent root: tagged leaves, pairwise levels with the last node
/// duplicated on odd widths, then the count bound in.
fn oracle_root(txns: &[Transaction]) -> [u8; 32] {
    let mut level: Vec<[u8; 32]> = txns.iter().map(|t| sha(&[&[0x00], &t.encode()])).collect();
    while level.len() > 1 {
        level = level
            .chunks(2)
            .map(|p| sha(&[&[0x01], &p[0], p.get(1).unwrap_or(&p[0])]))
            .collect();
    }
    let tag = b"log-root";
    sha(&[
        &(tag.len() as u64).to_be_bytes(),
        tag,
        &8u64.to_be_bytes(),
        &(txns.len() as u64).to_be_bytes(),
        &32u64.to_be_bytes(),
        &level[0],
    ])
}

fn txn(i: u64) -> Transaction {
    Transaction {
        payload_bytes: vec![i as u8; 4].into(),
        ..Transaction::transfer(i % 5, (i + 1) % 5, i, i / 5)
    }
}

fn flip(d: &mut pipesim::Digest) {
    d.0[0] ^= 0x80;
}

/// Every way this test corrupts a valid proof.
fn tampered(proof: &InclusionProof) -> Vec<InclusionProof> {
    let mut out = Vec::new();
    for i in 0..proof.sibling_path.len() {
        let mut p = proof.clone();
        flip(&mut p.sibling_path[i]);
        out.push(p);
    }
    let mut p = proof.clone();
    flip(&mut p.root);
    out.push(p);
    let mut p = proof.clone();
    flip(&mut p.leaf_digest);
    out.push(p);
    let mut p = proof.clone();
    p.leaf_count += 1;
    out.push(p);
    if proof.leaf_count > 1 {
        let mut p = proof.clone();
        p.leaf_count -= 1;
        out.push(p);
    }
    if let Some(last) = proof.sibling_path.last().copied() {
        let mut p = proof.clone();
        p.sibling_path.pop();
        out.push(p);
        let mut p = proof.clone();
        p.sibling_path.push(last);
        out.push(p);
    }
    out
}

#[test]
fn every_position_of_every_log_up_to_256() {
    let all: Vec<Transaction> = (0..256).map(txn).collect();
    let mut acc = MerkleAccumulator::new();
    let mut accepted_tampered = 0usize;
    let mut checked = 0usize;
    for size in 1..=256usize {
        acc.append(pipesim::execution::leaf_hash(&all[size - 1]));
        let log = &all[..size];
        assert_eq!(acc.root().0, oracle_root(log), "root of {size} leaves");
        for pos in 0..size as u64 {
            let proof = acc.prove(pos).unwrap();
            assert!(
                verify_inclusion(&proof, pos, &log[pos as usize]),
                "size {size} position {pos}"
            );
            for bad in tampered(&proof) {
                accepted_tampered += verify_inclusion(&bad, pos, &log[pos as usize]) as usize;
                checked += 1;
            }
            // right proof, wrong claim
            let other = (pos + 1) % size as u64;
            if other != pos {
                accepted_tampered += verify_inclusion(&proof, other, &log[pos as usize]) as usize;
                accepted_tampered += verify_inclusion(&proof, pos, &log[other as usize]) as usize;
                checked += 2;
            }
            accepted_tampered += verify_inclusion(&proof, pos, &txn(10_000)) as usize;
            checked += 1;
        }
        assert!(acc.prove(size as u64).is_none());
    }
    assert!(checked > 300_000);
    assert_eq!(accepted_tampered, 0);
}

#[test]
fn duplicated_last_leaf_is_not_a_member_at_the_padding_slot() {
    let log: Vec<Transaction> = (0..3).map(txn).collect();
    let mut acc = MerkleAccumulator::new();
    for t in &log {
        acc.append(pipesim::execution::leaf_hash(t));
    }
    let mut proof = acc.prove(2).unwrap();
    proof.position = 3;
    assert!(!verify_inclusion(&proof, 3, &log[2]));
}
