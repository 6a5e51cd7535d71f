use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::workload::{gen_batch, init_model, project, Batch, Model, WorkloadSpec};
use crate::attention::{self, DeltaSource, PrecisionPlan};
use crate::diagnostics::{self, norm_tracker, GradErrorReport, NormSeries};
use crate::flash::{
    flash_backward, flash_delta_diff, flash_forward, recompute_probabilities, FlashOutput,
    TileConfig,
};
use crate::linalg::{self, Container, Mat, Vector};
use crate::numerics::{Grid, Precision};
use crate::{Error, Result};

pub const WEIGHT_NAMES: [&str; 3] = ["W_Q", "W_K", "W_V"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum LrSchedule {
    Constant,
    /// Linear warmup to the base rate, then cosine decay to `min_lr` at `total`.
    Cosine {
        warmup: usize,
        total: usize,
        min_lr: f64,
    },
}

impl LrSchedule {
    /// Rate for the 1-based `step`.
    pub fn rate(&self, base: f64, step: usize) -> f64 {
        match *self {
            LrSchedule::Constant => base,
            LrSchedule::Cosine {
                warmup,
                total,
                min_lr,
            } => {
                if step <= warmup && warmup > 0 {
                    return base * step as f64 / warmup as f64;
                }
                let span = total.saturating_sub(warmup).max(1) as f64;
                let t = ((step - warmup) as f64 / span).min(1.0);
                min_lr + 0.5 * (base - min_lr) * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

/// AdamW hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Moments {
    pub fn zeros(len: usize) -> Self {
        Moments {
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }
}

impl AdamW {
    /// One bias-corrected update of `w` at the 1-based step `t` with rate `lr`.
    pub fn update(&self, w: &mut [f64], g: &[f64], state: &mut Moments, t: usize, lr: f64) {
        let c1 = 1.0 - self.beta1.powi(t as i32);
        let c2 = 1.0 - self.beta2.powi(t as i32);
        for i in 0..w.len() {
            state.m[i] = self.beta1 * state.m[i] + (1.0 - self.beta1) * g[i];
            state.v[i] = self.beta2 * state.v[i] + (1.0 - self.beta2) * g[i] * g[i];
            let m_hat = state.m[i] / c1;
            let v_hat = state.v[i] / c2;
            w[i] -= lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * w[i]);
        }
    }
}

/// Scales all gradients together so their joint Frobenius norm is at most
/// `max_norm`. Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|x| x * x).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|x| *x *= s);
    }
    norm
}

/// One training configuration: precision plan plus tiling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Arm {
    pub name: String,
    pub plan: PrecisionPlan,
    pub tile: TileConfig,
}

impl Arm {
    /// Plan presets plus `stabilized-lp`, all with the given tile sizes.
    pub fn preset(name: &str, block_rows: usize, block_cols: usize, beta: f64) -> Result<Arm> {
        let tile = TileConfig::new(block_rows, block_cols);
        let (plan, tile) = if name == "stabilized-lp" {
            (PrecisionPlan::lp(), tile.stabilized(beta))
        } else {
            let plan = PrecisionPlan::preset(name)
                .ok_or_else(|| Error::InvalidConfig(format!("unknown arm preset `{name}`")))?;
            (plan, tile)
        };
        Ok(Arm {
            name: name.to_string(),
            plan,
            tile,
        })
    }

    /// Precision of the projections: bf16 autocast whenever the plan has
    /// an lp stage.
    pub fn projection_mode(&self) -> Precision {
        if self.plan.any_lp() {
            Precision::Lp
        } else {
            self.plan.score_mode
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    pub optimizer: AdamW,
    pub schedule: LrSchedule,
    pub clip: f64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            optimizer: AdamW::default(),
            schedule: LrSchedule::Constant,
            clip: 1.0,
        }
    }
}

/// Master weights (f64) plus optimizer state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub weights: [Mat; 3],
    pub moments: [Moments; 3],
    pub step: usize,
    /// Hex SHA-256 of every batch consumed, in order.
    pub batch_log: Vec<String>,
}

impl TrainState {
    pub fn new(model: &Model) -> Self {
        let weights = [model.w_q.clone(), model.w_k.clone(), model.w_v.clone()];
        let moments = [0, 1, 2].map(|i| Moments::zeros(weights[i].data().len()));
        TrainState {
            weights,
            moments,
            step: 0,
            batch_log: Vec::new(),
        }
    }

    pub fn w_q(&self) -> &Mat {
        &self.weights[0]
    }

    pub fn to_container(&self) -> Result<Container> {
        let mut c = Container::new();
        let meta = serde_json::json!({ "step": self.step, "batch_log": self.batch_log });
        c.push("meta", serde_json::to_vec(&meta)?);
        for (name, w) in WEIGHT_NAMES.iter().zip(&self.weights) {
            c.push_mat(*name, w);
        }
        Ok(c)
    }
}

pub fn batch_digest(batch: &Batch) -> String {
    let mut h = Sha256::new();
    for x in batch.x.data() {
        h.update(x.to_bits().to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub loss: f64,
    pub grad_norm: f64,
    pub report: GradErrorReport,
}

fn mse(o: &Mat, targets: &Mat) -> Result<(f64, Mat)> {
    let scale = 1.0 / o.data().len() as f64;
    let loss = o
        .data()
        .iter()
        .zip(targets.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        * scale;
    let d_o = o.zip_map(targets, Grid::F32, |a, b| 2.0 * (a - b) * scale)?;
    Ok((loss, d_o))
}

/// `δ_used − δ_hp`, where `δ_hp = rowsum(dO ∘ O_hp)` in f64. Output-based
/// sources are compared through their outputs in f64; the others through
/// the δ the backward pass computed.
fn used_delta_error(
    fwd: &FlashOutput,
    d_o: &Mat,
    used: &Vector,
    source: DeltaSource,
) -> Result<Vector> {
    match source {
        DeltaSource::LowPrecisionOutput => flash_delta_diff(fwd, d_o),
        DeltaSource::HighPrecisionOutput => Ok(Vector::zeros(d_o.rows(), Grid::F64)),
        DeltaSource::DpP | DeltaSource::RecomputePvHp => {
            let o_hp = fwd.o_hp.as_ref().ok_or(Error::MissingTapeField {
                field: "o_hp",
                needed_by: "delta error",
            })?;
            let hp = attention::rowsum_product(d_o, o_hp, Precision::Exact);
            let data = used.data().iter().zip(&hp).map(|(u, h)| u - h).collect();
            Vector::new(data, Grid::F64)
        }
    }
}

/// Forward through flash attention, MSE loss, backward, clip and AdamW.
/// The report's coefficients are the error of the δ the plan used.
pub fn train_step(
    state: &mut TrainState,
    batch: &Batch,
    targets: &Mat,
    alpha: f64,
    arm: &Arm,
    settings: &TrainSettings,
) -> Result<StepOutput> {
    let step = state.step + 1;
    let pm = arm.projection_mode();
    let x_qk = batch.x_qk();
    let [w_q, w_k, w_v] = &state.weights;
    let q = project(&x_qk, w_q, pm)?;
    let k = project(&x_qk, w_k, pm)?;
    let v = project(&batch.x, w_v, pm)?;

    // overflowing projections show up as non-finite scores
    let fwd = flash_forward(&q, &k, &v, alpha, &arm.tile, &arm.plan).map_err(|e| match e {
        Error::NonFinite { .. } => Error::Diverged {
            step,
            loss: f64::NAN,
        },
        other => other,
    })?;
    let (loss, d_o) = mse(&fwd.o, targets)?;
    if !loss.is_finite() {
        return Err(Error::Diverged { step, loss });
    }
    let grads = flash_backward(&q, &k, &v, alpha, &fwd, &d_o, &arm.tile, &arm.plan)?;

    let gm = arm.plan.backward_mode.promoted();
    let wg = |dy: &Mat, x: &Mat| -> Result<Vec<f64>> {
        Ok(linalg::matmul(&dy.transpose(), &x.regrid(gm.operand_grid()), gm)?.into_data())
    };
    let mut g = vec![
        wg(&grads.dq, &x_qk)?,
        wg(&grads.dk, &x_qk)?,
        wg(&grads.dv, &batch.x)?,
    ];
    let grad_norm = clip_global_norm(&mut g, settings.clip);

    let lr = settings.schedule.rate(settings.optimizer.lr, step);
    for i in 0..3 {
        settings.optimizer.update(
            state.weights[i].data_mut(),
            &g[i],
            &mut state.moments[i],
            step,
            lr,
        );
    }
    if let Some(i) = state.weights.iter().position(|w| !w.is_finite()) {
        return Err(Error::Diverged {
            step,
            loss: state.weights[i].max_abs(),
        });
    }
    state.step = step;
    state.batch_log.push(batch_digest(batch));

    let coeffs = used_delta_error(&fwd, &d_o, &grads.delta, arm.plan.delta_source)?;
    let grid = arm.plan.backward_mode.operand_grid();
    let p = recompute_probabilities(&q, &k, alpha, &fwd.lse, &arm.plan, grid);
    let report = GradErrorReport::from_parts(coeffs, &p, &k, &x_qk, alpha)?;
    Ok(StepOutput {
        loss,
        grad_norm,
        report,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmReport {
    pub arm: Arm,
    pub loss: Vec<f64>,
    pub bias_sum: Vec<f64>,
    pub bias_cumsum: Vec<f64>,
    pub low_rank_residual: Vec<f64>,
    /// Spectral norms at step 0 (initial) through the last step.
    pub norms: NormSeries,
    pub final_similarity: f64,
}

impl ArmReport {
    /// Final minus initial spectral norm of the named weight.
    pub fn norm_growth(&self, name: &str) -> Option<f64> {
        let i = self.norms.index_of(name)?;
        let col = self.norms.column(i);
        Some(col.last()? - col.first()?)
    }

    pub fn final_cumsum(&self) -> f64 {
        self.bias_cumsum.last().copied().unwrap_or(0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub version: u32,
    pub spec: WorkloadSpec,
    pub settings: TrainSettings,
    pub steps: usize,
    pub arms: Vec<ArmReport>,
}

impl ComparisonReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// `step,arm,loss,bias_sum,bias_cumsum,norm_W_Q,norm_W_K,norm_W_V`, one
    /// row per arm and step.
    pub fn write_metrics_csv(&self, mut out: impl std::io::Write) -> Result<()> {
        writeln!(
            out,
            "step,arm,loss,bias_sum,bias_cumsum,norm_W_Q,norm_W_K,norm_W_V"
        )?;
        for a in &self.arms {
            for s in 0..a.loss.len() {
                let n = &a.norms.norms[s + 1];
                writeln!(
                    out,
                    "{},{},{:?},{:?},{:?},{:?},{:?},{:?}",
                    s + 1,
                    a.arm.name,
                    a.loss[s],
                    a.bias_sum[s],
                    a.bias_cumsum[s],
                    n[0],
                    n[1],
                    n[2]
                )?;
            }
        }
        Ok(())
    }
}

/// Trains one arm over `batches`. Stops with [`Error::Diverged`] on a
/// non-finite loss; `on_diverge` receives the state at that point.
pub fn run_arm(
    spec: &WorkloadSpec,
    model: &Model,
    batches: &[Batch],
    arm: &Arm,
    settings: &TrainSettings,
    on_diverge: &(dyn Fn(&TrainState) + Sync),
) -> Result<ArmReport> {
    let mut state = TrainState::new(model);
    fn weights(s: &TrainState) -> [&Mat; 3] {
        [&s.weights[0], &s.weights[1], &s.weights[2]]
    }
    let mut norms = norm_tracker(&weights(&state), 0, NormSeries::new(WEIGHT_NAMES))?;
    let (mut loss, mut bias_sum, mut residual) = (Vec::new(), Vec::new(), Vec::new());
    let mut final_similarity = 0.0;
    for batch in batches {
        let out = match train_step(
            &mut state,
            batch,
            &model.targets,
            spec.alpha(),
            arm,
            settings,
        ) {
            Ok(out) => out,
            Err(e) => {
                if matches!(e, Error::Diverged { .. }) {
                    on_diverge(&state);
                }
                return Err(e);
            }
        };
        loss.push(out.loss);
        bias_sum.push(out.report.bias_sum);
        residual.push(out.report.low_rank_residual);
        final_similarity = diagnostics::similarity_summary(&out.report, 0.9)?;
        norms = norm_tracker(&weights(&state), state.step, norms)?;
    }
    Ok(ArmReport {
        arm: arm.clone(),
        bias_cumsum: diagnostics::cumsum(bias_sum.iter().copied()),
        loss,
        bias_sum,
        low_rank_residual: residual,
        norms,
        final_similarity,
    })
}

pub const COMPARISON_VERSION: u32 = 1;

/// Trains every arm from the same initial model over the same batches.
pub fn run_experiment_on(
    spec: &WorkloadSpec,
    batches: &[Batch],
    arms: &[Arm],
    settings: &TrainSettings,
    on_diverge: &(dyn Fn(&str, &TrainState) + Sync),
) -> Result<ComparisonReport> {
    use rayon::prelude::*;
    let model = init_model(spec)?;
    let reports = arms
        .par_iter()
        .map(|arm| {
            run_arm(spec, &model, batches, arm, settings, &|s| {
                on_diverge(&arm.name, s)
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ComparisonReport {
        version: COMPARISON_VERSION,
        spec: *spec,
        settings: *settings,
        steps: batches.len(),
        arms: reports,
    })
}

/// Generates `steps` batches and runs both arms over them.
pub fn run_experiment(
    spec: &WorkloadSpec,
    arm_a: &Arm,
    arm_b: &Arm,
    steps: usize,
    settings: &TrainSettings,
) -> Result<ComparisonReport> {
    let batches = (0..steps as u64)
        .map(|s| gen_batch(spec, s))
        .collect::<Result<Vec<_>>>()?;
    run_experiment_on(
        spec,
        &batches,
        &[arm_a.clone(), arm_b.clone()],
        settings,
        &|_, _| {},
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> WorkloadSpec {
        WorkloadSpec {
            n: 32,
            d_model: 16,
            d: 8,
            ..WorkloadSpec::claim3()
        }
    }

    #[test]
    fn adamw_two_steps_closed_form() {
        let opt = AdamW {
            lr: 0.1,
            weight_decay: 0.01,
            ..AdamW::default()
        };
        let mut w = vec![1.0];
        let mut st = Moments::zeros(1);
        opt.update(&mut w, &[0.5], &mut st, 1, opt.lr);
        // Step 1: m̂ = g, v̂ = g², update ≈ lr·(1 + wd·w).
        let w1 = 1.0 - 0.1 * (0.5 / (0.5 + 1e-8) + 0.01 * 1.0);
        assert!((w[0] - w1).abs() < 1e-15);
        opt.update(&mut w, &[-0.25], &mut st, 2, opt.lr);
        let m = 0.9 * 0.05 + 0.1 * -0.25;
        let v: f64 = 0.95 * 0.0125 + 0.05 * 0.0625;
        let m_hat = m / (1.0 - 0.81);
        let v_hat = v / (1.0 - 0.9025);
        let w2 = w1 - 0.1 * (m_hat / (v_hat.sqrt() + 1e-8) + 0.01 * w1);
        assert!((w[0] - w2).abs() < 1e-12);
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let mut g = vec![vec![3.0, 4.0], vec![12.0]];
        assert_eq!(clip_global_norm(&mut g, 1.0), 13.0);
        let n = g.iter().flatten().map(|x: &f64| x * x).sum::<f64>().sqrt();
        assert!(n <= 1.0 + 1e-12);
        let mut small = vec![vec![0.1]];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small[0][0], 0.1);
        let mut off = vec![vec![30.0]];
        clip_global_norm(&mut off, 0.0);
        assert_eq!(off[0][0], 30.0);
    }

    #[test]
    fn cosine_schedule_shape() {
        let s = LrSchedule::Cosine {
            warmup: 10,
            total: 110,
            min_lr: 0.0,
        };
        assert_eq!(s.rate(1.0, 5), 0.5);
        assert_eq!(s.rate(1.0, 10), 1.0);
        assert!((s.rate(1.0, 60) - 0.5).abs() < 1e-12);
        assert!(s.rate(1.0, 110).abs() < 1e-12);
    }

    #[test]
    fn zero_lr_leaves_weights_unchanged() {
        let spec = small();
        let model = init_model(&spec).unwrap();
        let mut state = TrainState::new(&model);
        let settings = TrainSettings {
            optimizer: AdamW {
                lr: 0.0,
                ..AdamW::default()
            },
            ..TrainSettings::default()
        };
        let arm = Arm::preset("lp", 8, 8, 7.0).unwrap();
        for s in 0..3 {
            let b = gen_batch(&spec, s).unwrap();
            train_step(
                &mut state,
                &b,
                &model.targets,
                spec.alpha(),
                &arm,
                &settings,
            )
            .unwrap();
        }
        assert!(state.w_q().bits_eq(&model.w_q));
        assert!(state.weights[2].bits_eq(&model.w_v));
        assert_eq!(state.batch_log.len(), 3);
    }

    #[test]
    fn exact_plan_has_zero_coefficients() {
        let spec = small();
        let model = init_model(&spec).unwrap();
        let mut state = TrainState::new(&model);
        let arm = Arm::preset("exact", 8, 8, 7.0).unwrap();
        for s in 0..3 {
            let b = gen_batch(&spec, s).unwrap();
            let out = train_step(
                &mut state,
                &b,
                &model.targets,
                spec.alpha(),
                &arm,
                &TrainSettings::default(),
            )
            .unwrap();
            assert!(out.report.coeffs.data().iter().all(|&c| c == 0.0));
            assert_eq!(out.report.bias_sum, 0.0);
        }
    }

    #[test]
    fn experiment_is_deterministic_and_csv_has_header_only_for_zero_steps() {
        let spec = small();
        let a = Arm::preset("lp", 8, 8, 7.0).unwrap();
        let b = Arm::preset("stabilized-lp", 8, 8, 7.0).unwrap();
        let r1 = run_experiment(&spec, &a, &b, 4, &TrainSettings::default()).unwrap();
        let r2 = run_experiment(&spec, &a, &b, 4, &TrainSettings::default()).unwrap();
        assert_eq!(r1.to_json().unwrap(), r2.to_json().unwrap());

        let empty = run_experiment(&spec, &a, &b, 0, &TrainSettings::default()).unwrap();
        let mut csv = Vec::new();
        empty.write_metrics_csv(&mut csv).unwrap();
        assert_eq!(String::from_utf8(csv).unwrap().lines().count(), 1);

        let back = ComparisonReport::from_json(&r1.to_json().unwrap()).unwrap();
        assert_eq!(back, r1);
    }
    #[test]
    fn huge_learning_rate_diverges_and_reports_state() {
        use std::sync::atomic::{AtomicUsize, Ordering};
        let spec = small();
        let model = init_model(&spec).unwrap();
        let batches: Vec<_> = (0..5).map(|s| gen_batch(&spec, s).unwrap()).collect();
        let settings = TrainSettings {
            optimizer: AdamW {
                lr: 1e38,
                ..AdamW::default()
            },
            ..TrainSettings::default()
        };
        let seen = AtomicUsize::new(0);
        let err = run_arm(
            &spec,
            &model,
            &batches,
            &Arm::preset("lp", 8, 8, 7.0).unwrap(),
            &settings,
            &|s| seen.store(s.step + 1, Ordering::SeqCst),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Diverged { .. }), "{err}");
        assert!(seen.load(Ordering::SeqCst) > 0);
    }
}
