use flashbias::harness::{
    gen_batch, record_batches, replay_batches, run_experiment, run_experiment_on, Arm,
    TrainSettings, WorkloadSpec,
};

fn spec() -> WorkloadSpec {
    WorkloadSpec {
        n: 64,
        d_model: 24,
        tie_rate: 0.5,
        seed: 3,
        ..WorkloadSpec::default()
    }
}

fn arms() -> (Arm, Arm) {
    (
        Arm::preset("lp", 16, 16, 7.0).unwrap(),
        Arm::preset("stabilized-lp", 16, 16, 7.0).unwrap(),
    )
}

fn run_with_threads(threads: usize) -> String {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .unwrap();
    let (a, b) = arms();
    pool.install(|| run_experiment(&spec(), &a, &b, 12, &TrainSettings::default()))
        .unwrap()
        .to_json()
        .unwrap()
}

#[test]
fn report_is_independent_of_thread_count() {
    let one = run_with_threads(1);
    assert_eq!(one, run_with_threads(3));
    assert_eq!(one, run_with_threads(8));
}

#[test]
fn replayed_batches_reproduce_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("batches.fbc");
    let s = spec();
    let batches: Vec<_> = (0..6).map(|i| gen_batch(&s, i).unwrap()).collect();
    record_batches(&path, &s, &batches).unwrap();
    let (s2, replayed) = replay_batches(&path).unwrap();
    assert_eq!(s2, s);

    let (a, b) = arms();
    let arms = [a.clone(), b.clone()];
    let live = run_experiment(&s, &a, &b, 6, &TrainSettings::default()).unwrap();
    let again =
        run_experiment_on(&s2, &replayed, &arms, &TrainSettings::default(), &|_, _| {}).unwrap();
    assert_eq!(live.to_json().unwrap(), again.to_json().unwrap());
}
