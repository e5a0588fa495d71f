use criterion::{criterion_group, criterion_main, BatchSize, BenchmarkId, Criterion, Throughput};

use pipesim::types::{genesis_block, Block, NodeId};
use pipesim::{execute, GasConfig, Transaction};

fn bench(c: &mut Criterion) {
    let accounts = 256u64;
    let genesis = genesis_block(&(0..accounts).map(|a| (a, 1_000_000)).collect()).unwrap();
    let state = genesis.state.clone().unwrap();
    let gas = GasConfig {
        per_txn_gas: 1,
        block_gas_limit: u64::MAX,
        exec_time_per_gas: 1,
    };
    let mut group = c.benchmark_group("execute_block");
    for size in [10usize, 100, 1_000] {
        let txns: Vec<Transaction> = (0..size as u64)
            .map(|i| Transaction::transfer(i % accounts, (i + 1) % accounts, 1, i / accounts))
            .collect();
        let block = Block::new(NodeId::validator(0), 1, genesis.id, txns);
        group.throughput(Throughput::Elements(size as u64));
        group.bench_with_input(BenchmarkId::from_parameter(size), &block, |b, block| {
            b.iter_batched(
                || state.clone(),
                |s| execute(&s, block, &gas).unwrap(),
                BatchSize::SmallInput,
            )
        });
    }
    group.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
