use std::collections::BTreeMap;

use proptest::prelude::*;
use sha2::{Digest as _, Sha256};

use pipesim::types::{compute_block_id, genesis_block, Block, NodeId, Transaction};
use pipesim::Digest;

/// Re-derives the preimage layout byte by byte.
fn oracle_id(proposer: [u8; 9], height: u64, parent: [u8; 32], txns: &[Vec<u8>]) -> [u8; 32] {
    fn field(buf: &mut Vec<u8>, bytes: &[u8]) {
        buf.extend_from_slice(&(bytes.len() as u64).to_be_bytes());
        buf.extend_from_slice(bytes);
    }
    let mut payload = Vec::new();
    field(&mut payload, &(txns.len() as u64).to_be_bytes());
    for t in txns {
        field(&mut payload, t);
    }
    let mut buf = Vec::new();
    field(&mut buf, &proposer);
    field(&mut buf, &height.to_be_bytes());
    field(&mut buf, &parent);
    field(&mut buf, &payload);
    Sha256::digest(&buf).into()
}

fn oracle_txn(t: &Transaction) -> Vec<u8> {
    let mut out = Vec::new();
    for v in [t.sender.0, t.recipient.0, t.amount, t.nonce] {
        out.extend_from_slice(&8u64.to_be_bytes());
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(&(t.payload_bytes.len() as u64).to_be_bytes());
    out.extend_from_slice(&t.payload_bytes);
    out.extend_from_slice(&8u64.to_be_bytes());
    out.extend_from_slice(&t.submit_time.to_be_bytes());
    out
}

fn empty_genesis() -> Block {
    genesis_block(&BTreeMap::new()).unwrap()
}

#[test]
fn first_empty_block_matches_oracle_and_golden() {
    let g = empty_genesis();
    let id = compute_block_id(NodeId::validator(0), 1, &g.id, &[]);
    assert_eq!(id.0, oracle_id([0u8; 9], 1, g.id.0, &[]));
    assert_eq!(id.to_hex(), GOLDEN_EMPTY_CHILD);
}

#[test]
fn block_with_transfers_matches_oracle() {
    let g = empty_genesis();
    let txns = vec![
        Transaction::transfer(1, 2, 5, 0),
        Transaction::transfer(2, 1, 3, 7),
    ];
    let id = compute_block_id(NodeId::validator(3), 9, &g.id, &txns);
    let mut v3 = [0u8; 9];
    v3[8] = 3;
    let enc: Vec<Vec<u8>> = txns.iter().map(oracle_txn).collect();
    assert_eq!(id.0, oracle_id(v3, 9, g.id.0, &enc));
}

/// Frozen from the oracle above.
const GOLDEN_EMPTY_CHILD: &str = "6f3cbff9a121db598ab378636c2381be4c5c52c3b800e7cb52f3e65cac89e341";

fn arb_txn() -> impl Strategy<Value = Transaction> {
    (
        0u64..8,
        0u64..8,
        0u64..100,
        0u64..4,
        prop::collection::vec(any::<u8>(), 0..16),
    )
        .prop_map(|(s, r, amount, nonce, payload)| Transaction {
            payload_bytes: payload.into(),
            ..Transaction::transfer(s, r, amount, nonce)
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn block_id_is_a_pure_function(
        proposer in 0u32..10,
        height in 0u64..1_000,
        parent in any::<[u8; 32]>(),
        txns in prop::collection::vec(arb_txn(), 0..4),
    ) {
        let a = compute_block_id(NodeId::validator(proposer), height, &Digest(parent), &txns);
        let b = compute_block_id(NodeId::validator(proposer), height, &Digest(parent), &txns.clone());
        prop_assert_eq!(a, b);
        let mut p = [0u8; 9];
        p[5..].copy_from_slice(&proposer.to_be_bytes());
        let enc: Vec<Vec<u8>> = txns.iter().map(oracle_txn).collect();
        prop_assert_eq!(a.0, oracle_id(p, height, parent, &enc));
        prop_assert_ne!(a, compute_block_id(NodeId::validator(proposer), height + 1, &Digest(parent), &txns));
    }
}
