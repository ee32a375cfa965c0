use criterion::{black_box, criterion_group, criterion_main, Criterion};
use tsdraft::controllers::{
    beta_sample, beta_update, cali_predict, cali_sample, cali_update, BetaState, CaliState, UpdateMode,
};
use tsdraft::Rng;
use tsdraft_bench::predictor;

fn sampling(c: &mut Criterion) {
    let mut rng = Rng::new(3);
    let beta = BetaState::new(12.0, 4.0).unwrap();
    c.bench_function("beta/sample", |b| b.iter(|| black_box(beta_sample(&beta, &mut rng))));
    c.bench_function("beta/update", |b| {
        b.iter(|| black_box(beta_update(&beta, 3, 6, UpdateMode::Literal).unwrap()))
    });

    let cali = CaliState::new(0.5, 0.2, 0.5).unwrap();
    c.bench_function("cali/sample", |b| b.iter(|| black_box(cali_sample(&cali, 0.7, &mut rng).unwrap())));
    c.bench_function("cali/update", |b| b.iter(|| black_box(cali_update(&cali, 4).unwrap())));

    for d in [32usize, 128] {
        let p = predictor(d, 4);
        let ht: Vec<f32> = (0..d).map(|i| (i as f32 * 0.37).sin()).collect();
        let hd: Vec<f32> = (0..d).map(|i| (i as f32 * 0.11).cos()).collect();
        c.bench_function(&format!("cali/predict/d{d}"), |b| {
            b.iter(|| black_box(cali_predict(&p, &ht, &hd, 3).unwrap()))
        });
    }
}

criterion_group!(benches, sampling);
criterion_main!(benches);
