use criterion::{criterion_group, criterion_main, Criterion};
use flashbias::harness::{
    gen_batch, init_model, train_step, Arm, TrainSettings, TrainState, WorkloadSpec,
};

fn step(c: &mut Criterion) {
    let spec = WorkloadSpec::claim3();
    let model = init_model(&spec).unwrap();
    let batch = gen_batch(&spec, 0).unwrap();
    let mut g = c.benchmark_group("train_step");
    g.sample_size(20);
    for name in ["lp", "stabilized-lp"] {
        let arm = Arm::preset(name, 32, 32, 7.0).unwrap();
        g.bench_function(name, |b| {
            b.iter_batched(
                || TrainState::new(&model),
                |mut state| {
                    train_step(
                        &mut state,
                        &batch,
                        &model.targets,
                        spec.alpha(),
                        &arm,
                        &TrainSettings::default(),
                    )
                    .unwrap()
                },
                criterion::BatchSize::SmallInput,
            )
        });
    }
    g.finish();
}

criterion_group!(benches, step);
criterion_main!(benches);
