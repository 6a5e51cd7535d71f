//! Synthetic single-head attention workloads with controllable repeated-max
//! structure.
//!
//! Feature layout of `X` (`n × d_model`):
//!
//! | column | meaning |
//! |---|---|
//! | 0 | constant 1 |
//! | 1 | sink indicator (tokens 0 and 1) |
//! | 2 | attract strength `1 + ε` (rows that tie on the sinks), else 0 |
//! | 3 | anchor indicator (token 2) |
//! | 4, 5 | value channels of sink 0 and sink 1 |
//! | 6.. | Gaussian noise |
//!
//! The two sink tokens share their query/key input row, so their keys are
//! bitwise identical and every attract row sees an exact tie at its
//! maximum, whatever the weights. Attract rows score the sinks at about
//! `sink_strength / 2` and everything else `sink_strength` lower. Other
//! rows attend to the anchor token, which leads the rest by `sink_strength`.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::attention::score_block;
use crate::linalg::{self, Mat};
use crate::numerics::{Grid, Precision};
use crate::{Error, Result};

pub const COL_CONST: usize = 0;
pub const COL_SINK: usize = 1;
pub const COL_ATTRACT: usize = 2;
pub const COL_ANCHOR: usize = 3;
pub const COL_SINK0_VALUE: usize = 4;
pub const COL_SINK1_VALUE: usize = 5;
pub const FIRST_NOISE: usize = 6;
pub const ANCHOR_TOKEN: usize = 2;

const WEIGHT_STREAM: u64 = 0x5745_4954;
const TARGET_STREAM: u64 = 0x5441_5247;
const BATCH_STREAM: u64 = 0x4241_5443;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorkloadSpec {
    /// Sequence length.
    pub n: usize,
    /// Head dimension. `α = 1/√d`.
    pub d: usize,
    /// Model (input) dimension.
    pub d_model: usize,
    pub seed: u64,
    /// Target fraction of rows with a repeated maximum.
    pub tie_rate: f64,
    /// Fraction of value features that are predominantly negative.
    pub value_sign_bias: f64,
    /// Score gap between a row's attended token(s) and the rest.
    pub sink_strength: f64,
    /// Standard deviation of the noise features.
    pub noise: f64,
    /// Standard deviation of the per-row score of the attended token(s).
    pub score_jitter: f64,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        WorkloadSpec {
            n: 128,
            d: 16,
            d_model: 32,
            seed: 0,
            tie_rate: 0.05,
            value_sign_bias: 0.5,
            sink_strength: 12.0,
            noise: 1.0,
            score_jitter: 0.5,
        }
    }
}

impl WorkloadSpec {
    /// Every ordinary row ties on the sinks, inputs nearly collinear.
    pub fn claim3() -> Self {
        WorkloadSpec {
            tie_rate: 1.0,
            noise: 0.05,
            ..Self::default()
        }
    }

    pub fn alpha(&self) -> f64 {
        1.0 / (self.d as f64).sqrt()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.n < 4 {
            return bad(format!("n must be at least 4, got {}", self.n));
        }
        if self.d < 3 {
            return bad(format!("d must be at least 3, got {}", self.d));
        }
        if self.d_model <= FIRST_NOISE {
            return bad(format!(
                "d_model must exceed {FIRST_NOISE}, got {}",
                self.d_model
            ));
        }
        for (name, v) in [
            ("tie_rate", self.tie_rate),
            ("value_sign_bias", self.value_sign_bias),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} must be in [0, 1], got {v}"));
            }
        }
        for (name, v) in [
            ("sink_strength", self.sink_strength),
            ("noise", self.noise),
            ("score_jitter", self.score_jitter),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        Ok(())
    }

    /// Number of attract rows in a batch.
    pub fn attract_count(&self) -> usize {
        let eligible = self.n - FIRST_PLAIN_TOKEN;
        ((self.tie_rate * self.n as f64).round() as usize).min(eligible)
    }
}

/// Tokens before this index are the sinks and the anchor.
pub const FIRST_PLAIN_TOKEN: usize = 3;

fn stream(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.set_word_pos(u128::from(index) << 20);
    rng
}

/// Initial weights, the fixed regression targets and the designated
/// negative value features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub w_q: Mat,
    pub w_k: Mat,
    pub w_v: Mat,
    pub targets: Mat,
    pub designated: Vec<usize>,
}

fn unit_vector(rng: &mut impl Rng, d: usize) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0).unwrap();
    let v: Vec<f64> = (0..d).map(|_| normal.sample(rng)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= n);
}

fn remove_component(v: &mut [f64], u: &[f64]) {
    let c: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
    for (a, b) in v.iter_mut().zip(u) {
        *a -= c * b;
    }
}

pub fn init_model(spec: &WorkloadSpec) -> Result<Model> {
    spec.validate()?;
    let (d, dm) = (spec.d, spec.d_model);
    let alpha = spec.alpha();
    let half = spec.sink_strength / 2.0;
    let mut rng = stream(spec.seed, WEIGHT_STREAM, 0);

    // Orthonormal u, y, w. Every key shares the u part, so pushing queries
    // along u moves all scores of a row together and leaves the gap alone.
    let u = unit_vector(&mut rng, d);
    let mut y = unit_vector(&mut rng, d);
    remove_component(&mut y, &u);
    normalize(&mut y);
    let mut w = unit_vector(&mut rng, d);
    remove_component(&mut w, &u);
    remove_component(&mut w, &y);
    normalize(&mut w);

    let n_noise = dm - FIRST_NOISE;
    let normal = Normal::new(0.0, 1.0).unwrap();
    let gap = spec.sink_strength / alpha;
    let mut w_q = Mat::zeros(d, dm, Grid::F64);
    let mut w_k = Mat::zeros(d, dm, Grid::F64);
    for i in 0..d {
        w_q.set(i, COL_CONST, w[i]);
        w_q.set(i, COL_ATTRACT, u[i] - y[i] - w[i]);
        w_k.set(i, COL_CONST, (half / alpha) * u[i] + gap * y[i]);
        w_k.set(i, COL_SINK, -gap * y[i]);
        w_k.set(i, COL_ANCHOR, gap * w[i]);
    }

    let n_neg = (spec.value_sign_bias * d as f64).round() as usize;
    let mut designated = index::sample(&mut rng, d, n_neg).into_vec();
    designated.sort_unstable();
    let unit = Uniform::new(-1.0, 1.0).unwrap();
    let noise_w = if spec.noise > 0.0 {
        0.1 / (spec.noise * (n_noise as f64).sqrt())
    } else {
        0.0
    };
    let mut w_v = Mat::zeros(d, dm, Grid::F64);
    for i in 0..d {
        let base = if designated.contains(&i) {
            -2.0
        } else {
            unit.sample(&mut rng)
        };
        w_v.set(i, COL_CONST, base);
        w_v.set(i, COL_ANCHOR, unit.sample(&mut rng));
        w_v.set(i, COL_SINK0_VALUE, 0.9 * unit.sample(&mut rng));
        w_v.set(i, COL_SINK1_VALUE, 0.9 * unit.sample(&mut rng));
        for f in FIRST_NOISE..dm {
            w_v.set(i, f, noise_w * normal.sample(&mut rng));
        }
    }

    let mut trng = stream(spec.seed, TARGET_STREAM, 0);
    let targets = Mat::from_fn(spec.n, d, Grid::F32, |_, j| {
        let z = normal.sample(&mut trng);
        if designated.contains(&j) {
            1.0
        } else {
            z
        }
    });

    Ok(Model {
        w_q,
        w_k,
        w_v,
        targets,
        designated,
    })
}

/// One batch of layer inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Batch {
    /// bf16 inputs, `n × d_model`.
    pub x: Mat,
    pub attract: Vec<bool>,
}

impl Batch {
    /// `x` with the sink value channels zeroed; feeds the query and key
    /// projections.
    pub fn x_qk(&self) -> Mat {
        let mut x = self.x.clone();
        for t in 0..x.rows() {
            x.set(t, COL_SINK0_VALUE, 0.0);
            x.set(t, COL_SINK1_VALUE, 0.0);
        }
        x
    }

    pub fn attract_rows(&self) -> Vec<usize> {
        (0..self.attract.len())
            .filter(|&t| self.attract[t])
            .collect()
    }
}

pub fn gen_batch(spec: &WorkloadSpec, step: u64) -> Result<Batch> {
    spec.validate()?;
    let (n, dm) = (spec.n, spec.d_model);
    let mut rng = stream(spec.seed, BATCH_STREAM, step);
    let normal = Normal::new(0.0, spec.noise.max(f64::MIN_POSITIVE)).unwrap();
    let noise = |rng: &mut ChaCha8Rng| {
        if spec.noise > 0.0 {
            normal.sample(rng)
        } else {
            0.0
        }
    };

    let mut attract = vec![false; n];
    for t in index::sample(&mut rng, n - FIRST_PLAIN_TOKEN, spec.attract_count()) {
        attract[t + FIRST_PLAIN_TOKEN] = true;
    }
    // An attract row's sink score is (sink_strength/2)·(1 + ε).
    let jitter = if spec.sink_strength > 0.0 {
        2.0 * spec.score_jitter / spec.sink_strength
    } else {
        0.0
    };
    let normal_std = Normal::new(0.0, 1.0).unwrap();
    let sink_noise: Vec<f64> = (FIRST_NOISE..dm).map(|_| noise(&mut rng)).collect();
    let mut data = vec![0.0; n * dm];
    for t in 0..n {
        let row = &mut data[t * dm..(t + 1) * dm];
        row[COL_CONST] = 1.0;
        match t {
            0 | 1 => {
                row[COL_SINK] = 1.0;
                row[if t == 0 {
                    COL_SINK0_VALUE
                } else {
                    COL_SINK1_VALUE
                }] = 1.0;
                row[FIRST_NOISE..].copy_from_slice(&sink_noise);
            }
            ANCHOR_TOKEN => {
                row[COL_ANCHOR] = 1.0;
                for x in &mut row[FIRST_NOISE..] {
                    *x = noise(&mut rng);
                }
            }
            _ => {
                if attract[t] {
                    row[COL_ATTRACT] = 1.0 + jitter * normal_std.sample(&mut rng);
                }
                for x in &mut row[FIRST_NOISE..] {
                    *x = noise(&mut rng);
                }
            }
        }
    }
    Ok(Batch {
        x: Mat::rounded(n, dm, data, Grid::B16)?,
        attract,
    })
}

/// `x Wᵀ` with `W` cast onto `mode`'s operand grid.
pub fn project(x: &Mat, w: &Mat, mode: Precision) -> Result<Mat> {
    linalg::matmul_nt(
        &x.regrid(mode.operand_grid()),
        &w.regrid(mode.operand_grid()),
        mode,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorkloadStats {
    /// Fraction of rows whose bf16 score maximum occurs more than once.
    pub measured_tie_rate: f64,
    /// Fraction of rows whose maximum sits in column 0.
    pub sink_rowmax_rate: f64,
}

/// Score statistics of `batch` under `model`.
pub fn workload_stats(spec: &WorkloadSpec, model: &Model, batch: &Batch) -> Result<WorkloadStats> {
    let x_qk = batch.x_qk();
    let q = project(&x_qk, &model.w_q, Precision::Lp)?;
    let k = project(&x_qk, &model.w_k, Precision::Lp)?;
    let s = score_block(
        &q,
        &k,
        0..spec.n,
        0..spec.n,
        spec.alpha(),
        Precision::Lp,
        false,
    );
    let m = linalg::rowmax(&s)?;
    let counts = linalg::rowsum_eq(&s, &m)?;
    let n = spec.n as f64;
    let ties = counts.data().iter().filter(|&&c| c >= 2.0).count();
    let sink = (0..spec.n).filter(|&t| s.get(t, 0) == m.get(t)).count();
    Ok(WorkloadStats {
        measured_tie_rate: ties as f64 / n,
        sink_rowmax_rate: sink as f64 / n,
    })
}

/// A generated workload: model, first batch and its score statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Workload {
    pub spec: WorkloadSpec,
    pub model: Model,
    pub batch: Batch,
    pub stats: WorkloadStats,
}

impl Workload {
    pub fn x(&self) -> &Mat {
        &self.batch.x
    }

    pub fn targets(&self) -> &Mat {
        &self.model.targets
    }

    /// Whether the measured tie rate is within 20% (relative) of the target,
    /// or below 1% for a zero target.
    pub fn tie_rate_reached(&self) -> bool {
        let (target, measured) = (self.spec.tie_rate, self.stats.measured_tie_rate);
        if target == 0.0 {
            measured < 0.01
        } else {
            (measured - target).abs() <= 0.2 * target
        }
    }
}

/// Builds the model and batch 0. For `n ≥ 256` an unreachable tie rate is
/// an error carrying the measured value.
pub fn gen_workload(spec: &WorkloadSpec) -> Result<Workload> {
    let model = init_model(spec)?;
    let batch = gen_batch(spec, 0)?;
    let stats = workload_stats(spec, &model, &batch)?;
    let w = Workload {
        spec: *spec,
        model,
        batch,
        stats,
    };
    if spec.n >= 256 && !w.tie_rate_reached() {
        return Err(Error::InvalidConfig(format!(
            "tie_rate {} unreachable: measured {}",
            spec.tie_rate, w.stats.measured_tie_rate
        )));
    }
    Ok(w)
}
