use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use tsdraft::model::SpeculativeModel;
use tsdraft::nano::NanoConfig;
use tsdraft::TokenId;
use tsdraft_bench::{prompt, random_model};

fn steps(c: &mut Criterion) {
    for (name, cfg) in [("tiny", NanoConfig::tiny()), ("default", NanoConfig::default())] {
        let model = random_model(cfg, 1);
        let p = prompt(32, 2);
        let mut group = c.benchmark_group(format!("step/{name}"));
        group.throughput(Throughput::Elements(1));
        group.bench_function("draft", |b| {
            let mut cache = model.new_cache();
            model.target_step_batch(&mut cache, p.tokens()).unwrap();
            let pos = model.position(&cache);
            b.iter(|| {
                let out = model.draft_step(&mut cache, TokenId::new(7, 256).unwrap()).unwrap();
                model.rollback(&mut cache, pos).unwrap();
                black_box(out)
            })
        });
        group.bench_function("target", |b| {
            let mut cache = model.new_cache();
            model.target_step_batch(&mut cache, p.tokens()).unwrap();
            let pos = model.position(&cache);
            b.iter(|| {
                let out = model.target_step(&mut cache, TokenId::new(7, 256).unwrap()).unwrap();
                model.rollback(&mut cache, pos).unwrap();
                black_box(out)
            })
        });
        group.finish();

        let mut group = c.benchmark_group(format!("verify/{name}"));
        for k in [1usize, 4, 10] {
            let block: Vec<TokenId> = (0..=k).map(|i| TokenId::new(i as u32 * 11 % 256, 256).unwrap()).collect();
            group.throughput(Throughput::Elements(block.len() as u64));
            group.bench_with_input(BenchmarkId::from_parameter(k), &block, |b, block| {
                let mut cache = model.new_cache();
                model.target_step_batch(&mut cache, p.tokens()).unwrap();
                let pos = model.position(&cache);
                b.iter(|| {
                    let out = model.target_step_batch(&mut cache, block).unwrap();
                    model.rollback(&mut cache, pos).unwrap();
                    black_box(out)
                })
            });
        }
        group.finish();
    }
}

criterion_group!(benches, steps);
criterion_main!(benches);
