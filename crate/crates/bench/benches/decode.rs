use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use tsdraft::controllers::{ControllerConfig, ControllerKind};
use tsdraft::engine::{autoregressive_reference, decode, EngineConfig};
use tsdraft::model::ThetaSchedule;
use tsdraft::nano::NanoConfig;
use tsdraft::simulate::{run_sweep, SimConfig};
use tsdraft::Rng;
use tsdraft_bench::{predictor, prompt, random_model};

fn end_to_end(c: &mut Criterion) {
    let cfg = NanoConfig::tiny();
    let model = random_model(cfg.clone(), 5);
    let p = prompt(16, 6);
    let pred = predictor(cfg.d_model, 7);
    let mut group = c.benchmark_group("decode/tiny");
    group.bench_function("reference", |b| {
        b.iter(|| black_box(autoregressive_reference(&model, &p, 80, &[]).unwrap()))
    });
    for kind in [ControllerKind::FixedK(4), ControllerKind::BetaTs, ControllerKind::CaliTs] {
        let engine = EngineConfig::new(80, ControllerConfig::with_kind(kind));
        group.bench_with_input(BenchmarkId::from_parameter(kind.label()), &engine, |b, engine| {
            let mut rng = Rng::new(8);
            b.iter(|| black_box(decode(&model, &p, engine, Some(pred.clone()), &mut rng).unwrap()))
        });
    }
    group.finish();
}

fn simulation(c: &mut Criterion) {
    let cfg = SimConfig {
        schedule: ThetaSchedule::Constant(0.8),
        cali_ts: false,
        seeds: vec![0],
        repetitions: 1,
        ..SimConfig::default()
    };
    c.bench_function("simulate/sweep", |b| b.iter(|| black_box(run_sweep(&cfg, None).unwrap())));
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = end_to_end, simulation
}
criterion_main!(benches);
