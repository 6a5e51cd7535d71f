use flashbias::harness::{gen_batch, init_model, run_arm, Arm, TrainSettings, WorkloadSpec};

#[test]
fn lp_bias_cumsum_rises_on_most_steps() {
    let spec = WorkloadSpec::claim3();
    let model = init_model(&spec).unwrap();
    let batches: Vec<_> = (0..200).map(|s| gen_batch(&spec, s).unwrap()).collect();
    let arm = Arm::preset("lp", 32, 32, 7.0).unwrap();
    let report = run_arm(
        &spec,
        &model,
        &batches,
        &arm,
        &TrainSettings::default(),
        &|_| {},
    )
    .unwrap();
    let c = &report.bias_cumsum;
    let rising = (0..c.len())
        .filter(|&i| c[i] > if i == 0 { 0.0 } else { c[i - 1] })
        .count();
    let frac = rising as f64 / c.len() as f64;
    assert!(frac >= 0.8, "cumsum rose on {frac:.3} of steps");
}
