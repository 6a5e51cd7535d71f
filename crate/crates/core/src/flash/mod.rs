//! Tiled attention: the online-softmax forward pass, its stabilized
//! variant with the dynamic row maximum, and the tiled backward pass.
//!
//! Every accumulator keeps folding across tiles instead of being restarted
//! per tile, so the summation order of each output element is the same as in
//! [`crate::attention`]. With a single tile per axis the two paths are
//! bitwise identical.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attention::{
    self, check_inputs, compute_delta, ds_value, exp_shifted, lse_value, normalize_value,
    score_block, stat_precision, AttnGrads, DeltaInputs, PrecisionPlan,
};
use crate::error::{Error, Result};
use crate::linalg::{self, count_eq, Mat, Vector};
use crate::numerics::{Accum, Grid, Precision};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TileConfig {
    pub block_rows: usize,
    pub block_cols: usize,
    /// Multiplier for a repeated positive row maximum. Only used when stabilized.
    pub beta: f64,
    pub stabilized: bool,
    /// Also adjust rows whose repeated maximum is exactly zero (shift to 1).
    #[serde(default)]
    pub strict_zero: bool,
}

impl TileConfig {
    pub const DEFAULT_BETA: f64 = 7.0;

    pub fn new(block_rows: usize, block_cols: usize) -> Self {
        TileConfig {
            block_rows,
            block_cols,
            beta: Self::DEFAULT_BETA,
            stabilized: false,
            strict_zero: false,
        }
    }

    /// One tile covering all `n` rows and columns.
    pub fn untiled(n: usize) -> Self {
        Self::new(n, n)
    }

    pub fn stabilized(mut self, beta: f64) -> Self {
        self.stabilized = true;
        self.beta = beta;
        self
    }

    pub fn validate(&self, n_q: usize, n_k: usize) -> Result<()> {
        if self.block_rows == 0 || self.block_rows > n_q {
            return Err(Error::InvalidConfig(format!(
                "block_rows must be in 1..={n_q}, got {}",
                self.block_rows
            )));
        }
        if self.block_cols == 0 || self.block_cols > n_k {
            return Err(Error::InvalidConfig(format!(
                "block_cols must be in 1..={n_k}, got {}",
                self.block_cols
            )));
        }
        if self.stabilized && !(self.beta > 1.0 && self.beta.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "beta must be a finite value > 1, got {}",
                self.beta
            )));
        }
        Ok(())
    }
}

fn blocks(n: usize, size: usize) -> impl Iterator<Item = std::ops::Range<usize>> {
    (0..n.div_ceil(size)).map(move |b| b * size..((b + 1) * size).min(n))
}

/// Shift for one row of a score tile under the dynamic-maximum rule.
///
/// A repeated positive maximum becomes `β·r_m`, a repeated negative one 0.
/// A single maximum, a masked row, or (unless `strict_zero`) a repeated
/// zero is left as is.
pub fn adjusted_max(row: &[f64], beta: f64, strict_zero: bool) -> f64 {
    let r_m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !r_m.is_finite() {
        return r_m;
    }
    let repeated = count_eq(row, r_m) > 1;
    if !repeated {
        r_m
    } else if r_m > 0.0 {
        beta * r_m
    } else if r_m < 0.0 {
        0.0
    } else if strict_zero {
        1.0
    } else {
        r_m
    }
}

/// Per-row stabilized maximum of a score tile.
pub fn stabilized_rowmax(s_block: &Mat, beta: f64) -> Result<Vector> {
    if !(beta > 1.0) {
        return Err(Error::InvalidConfig(format!(
            "beta must be > 1, got {beta}"
        )));
    }
    linalg::rowmax(s_block)?;
    Ok(Vector::rounded(
        (0..s_block.rows())
            .map(|i| adjusted_max(s_block.row(i), beta, false))
            .collect(),
        Grid::F64,
    ))
}

/// Online-softmax state of one query tile.
#[derive(Debug, Clone)]
pub struct RunningState {
    m: Vec<f64>,
    l: Vec<Accum>,
    o: Vec<Accum>,
    o_hp: Vec<Accum>,
    width: usize,
    adjusted: usize,
}

impl RunningState {
    pub fn new(rows: usize, width: usize, plan: &PrecisionPlan) -> Self {
        RunningState {
            m: vec![f64::NEG_INFINITY; rows],
            l: vec![Accum::new(stat_precision(plan.softmax_mode)); rows],
            o: vec![Accum::new(plan.pv_mode); rows * width],
            o_hp: vec![Accum::new(plan.pv_mode.promoted()); rows * width],
            width,
            adjusted: 0,
        }
    }

    /// Running maximum per row.
    pub fn m(&self) -> &[f64] {
        &self.m
    }

    /// Running normalizer per row, unrounded.
    pub fn l(&self) -> Vec<f64> {
        self.l.iter().map(Accum::raw).collect()
    }

    /// Unnormalized output accumulator, unrounded.
    pub fn o_acc(&self) -> Vec<f64> {
        self.o.iter().map(Accum::raw).collect()
    }

    /// Rows whose tile maximum was shifted by the stabilizer so far.
    pub fn adjusted_rows(&self) -> usize {
        self.adjusted
    }

    /// Folds one score tile and the matching value rows into the state.
    pub fn absorb(&mut self, s: &Mat, v: &Mat, cfg: &TileConfig, plan: &PrecisionPlan) {
        let stat_grid = stat_precision(plan.softmax_mode).result_grid();
        let p_grid = plan.softmax_mode.result_grid();
        let (pv, pv_hp) = (plan.pv_mode, plan.pv_mode.promoted());
        let (g, g_hp) = (pv.operand_grid(), pv_hp.operand_grid());
        for r in 0..s.rows() {
            let row = s.row(r);
            let tile_max = if cfg.stabilized {
                let raw = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let adj = stat_grid.round(adjusted_max(row, cfg.beta, cfg.strict_zero));
                if adj.to_bits() != raw.to_bits() {
                    self.adjusted += 1;
                }
                adj
            } else {
                row.iter().copied().fold(f64::NEG_INFINITY, f64::max)
            };
            let m_old = self.m[r];
            let m_new = m_old.max(tile_max);
            if m_new != m_old && m_old != f64::NEG_INFINITY {
                let scale = stat_grid.round((m_old - m_new).exp());
                self.l[r].scale(scale);
                for c in 0..self.width {
                    self.o[r * self.width + c].scale(scale);
                    self.o_hp[r * self.width + c].scale(scale);
                }
            }
            self.m[r] = m_new;
            for (t, &x) in row.iter().enumerate() {
                let p = exp_shifted(x, m_new, p_grid);
                self.l[r].push(p);
                let (p_lo, p_hi) = (g.round(p), g_hp.round(p));
                let vrow = v.row(t);
                for c in 0..self.width {
                    self.o[r * self.width + c].push_product(p_lo, g.round(vrow[c]));
                    self.o_hp[r * self.width + c].push_product(p_hi, g_hp.round(vrow[c]));
                }
            }
        }
    }

    /// `(O, O_hp, m, ℓ, L)` for the rows of this tile.
    fn finish(&self, plan: &PrecisionPlan) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
        let (norm, norm_hp) = (plan.normalize_mode, plan.normalize_mode.promoted());
        let l: Vec<f64> = self.l.iter().map(Accum::finish).collect();
        let mut o = Vec::with_capacity(self.o.len());
        let mut o_hp = Vec::with_capacity(self.o.len());
        for (idx, (a, b)) in self.o.iter().zip(&self.o_hp).enumerate() {
            let li = l[idx / self.width];
            o.push(normalize_value(a.finish(), li, norm));
            o_hp.push(normalize_value(b.finish(), li, norm_hp));
        }
        let lse = self
            .m
            .iter()
            .zip(&l)
            .map(|(&m, &li)| lse_value(m, li, plan.softmax_mode))
            .collect();
        (o, o_hp, l, lse)
    }
}

/// Result of a tiled forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct FlashOutput {
    /// Output under the plan.
    pub o: Mat,
    /// Output with `P̄ V` and normalization promoted to at least f32.
    pub o_hp: Option<Mat>,
    pub m: Vector,
    pub l: Vector,
    /// Logsumexp `m + ln ℓ` per row.
    pub lse: Vector,
    /// Stabilizer adjustments summed over all tiles.
    pub adjusted_rows: usize,
    /// Digest of the inputs the logsumexp belongs to.
    pub fingerprint: [u8; 32],
}

/// SHA-256 over the shapes and bits of `q`, `k`, `v` and `alpha`.
pub fn fingerprint(q: &Mat, k: &Mat, v: &Mat, alpha: f64) -> [u8; 32] {
    let mut h = Sha256::new();
    for m in [q, k, v] {
        h.update((m.rows() as u64).to_le_bytes());
        h.update((m.cols() as u64).to_le_bytes());
        for x in m.data() {
            h.update(x.to_bits().to_le_bytes());
        }
    }
    h.update(alpha.to_bits().to_le_bytes());
    h.finalize().into()
}

/// Tiled forward pass. Uses the stabilized maximum when `cfg.stabilized`.
pub fn flash_forward(
    q: &Mat,
    k: &Mat,
    v: &Mat,
    alpha: f64,
    cfg: &TileConfig,
    plan: &PrecisionPlan,
) -> Result<FlashOutput> {
    check_inputs(q, k, v, plan)?;
    cfg.validate(q.rows(), k.rows())?;
    let row_blocks: Vec<_> = blocks(q.rows(), cfg.block_rows).collect();
    let width = v.cols();
    type Tile = (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>, usize);
    let tiles: Vec<Result<Tile>> = row_blocks
        .par_iter()
        .map(|rows| {
            let mut state = RunningState::new(rows.len(), width, plan);
            for cols in blocks(k.rows(), cfg.block_cols) {
                let s = score_block(
                    q,
                    k,
                    rows.clone(),
                    cols.clone(),
                    alpha,
                    plan.score_mode,
                    plan.causal,
                );
                if let Some(index) = s
                    .data()
                    .iter()
                    .position(|x| x.is_nan() || *x == f64::INFINITY)
                {
                    return Err(Error::NonFinite {
                        op: "flash scores",
                        index,
                        value: s.data()[index],
                    });
                }
                state.absorb(&s, &v.select_rows(cols), cfg, plan);
            }
            let (o, o_hp, l, lse) = state.finish(plan);
            Ok((o, o_hp, state.m.clone(), l, lse, state.adjusted))
        })
        .collect();

    let (mut o, mut o_hp, mut m, mut l, mut lse, mut adjusted) = (
        Vec::new(),
        Vec::new(),
        Vec::new(),
        Vec::new(),
        Vec::new(),
        0,
    );
    for tile in tiles {
        let t = tile?;
        o.extend(t.0);
        o_hp.extend(t.1);
        m.extend(t.2);
        l.extend(t.3);
        lse.extend(t.4);
        adjusted += t.5;
    }
    let n = q.rows();
    let stat = stat_precision(plan.softmax_mode).result_grid();
    Ok(FlashOutput {
        o: Mat::new(n, width, o, plan.normalize_mode.result_grid())?,
        o_hp: Some(Mat::new(
            n,
            width,
            o_hp,
            plan.normalize_mode.promoted().result_grid(),
        )?),
        m: Vector::new(m, Grid::F64)?,
        l: Vector::new(l, stat)?,
        lse: Vector::new(lse, stat)?,
        adjusted_rows: adjusted,
        fingerprint: fingerprint(q, k, v, alpha),
    })
}

/// [`flash_forward`] with `cfg.stabilized` forced on.
pub fn stabilized_flash_forward(
    q: &Mat,
    k: &Mat,
    v: &Mat,
    alpha: f64,
    cfg: &TileConfig,
    plan: &PrecisionPlan,
) -> Result<FlashOutput> {
    let mut cfg = *cfg;
    cfg.stabilized = true;
    flash_forward(q, k, v, alpha, &cfg, plan)
}

/// Full `P = exp(S − L)` on `grid`, recomputed tile by tile.
pub fn recompute_probabilities(
    q: &Mat,
    k: &Mat,
    alpha: f64,
    lse: &Vector,
    plan: &PrecisionPlan,
    grid: Grid,
) -> Mat {
    let s = score_block(
        q,
        k,
        0..q.rows(),
        0..k.rows(),
        alpha,
        plan.score_mode,
        plan.causal,
    );
    let cols = s.cols();
    let data = s
        .data()
        .iter()
        .enumerate()
        .map(|(idx, &x)| exp_shifted(x, lse.get(idx / cols), grid))
        .collect();
    Mat::from_raw(s.rows(), cols, data, grid)
}

/// Tiled backward pass in the loop order of the reference algorithm: key
/// tiles outside, query tiles inside.
///
/// Fails with [`Error::StaleLogSumExp`] if `fwd` was produced from
/// different inputs.
#[allow(clippy::too_many_arguments)]
pub fn flash_backward(
    q: &Mat,
    k: &Mat,
    v: &Mat,
    alpha: f64,
    fwd: &FlashOutput,
    d_o: &Mat,
    cfg: &TileConfig,
    plan: &PrecisionPlan,
) -> Result<AttnGrads> {
    check_inputs(q, k, v, plan)?;
    cfg.validate(q.rows(), k.rows())?;
    if fingerprint(q, k, v, alpha) != fwd.fingerprint {
        return Err(Error::StaleLogSumExp);
    }
    fwd.o.check_same_shape("flash backward (dO)", d_o)?;
    let bm = plan.backward_mode;
    let g = bm.operand_grid();
    let d_o = d_o.regrid(g);
    let (qg, kg, vg) = (q.regrid(g), k.regrid(g), v.regrid(g));
    let (n, nk, d, dv_w) = (q.rows(), k.rows(), q.cols(), v.cols());
    let lse = &fwd.lse;

    let inputs = DeltaInputs {
        d_o: &d_o,
        o_lp: &fwd.o,
        o_hp: fwd.o_hp.as_ref(),
        v,
    };
    let delta = compute_delta(
        plan.delta_source,
        &inputs,
        || {
            let p = recompute_probabilities(q, k, alpha, lse, plan, g);
            let dp = attention_dp(&d_o, &vg, bm);
            (dp, p)
        },
        bm,
    )?;

    let mut dq = vec![Accum::new(bm); n * d];
    let mut dk = vec![0.0; nk * d];
    let mut dv = vec![0.0; nk * dv_w];
    let mut ds_full = vec![0.0; n * nk];
    let mut dp_full = vec![0.0; n * nk];

    for cols in blocks(nk, cfg.block_cols) {
        let mut dk_j = vec![Accum::new(bm); cols.len() * d];
        let mut dv_j = vec![Accum::new(bm); cols.len() * dv_w];
        for rows in blocks(n, cfg.block_rows) {
            let s = score_block(
                q,
                k,
                rows.clone(),
                cols.clone(),
                alpha,
                plan.score_mode,
                plan.causal,
            );
            for (r, i) in rows.clone().enumerate() {
                let li = lse.get(i);
                let doi = d_o.row(i);
                for (c, j) in cols.clone().enumerate() {
                    let p = exp_shifted(s.get(r, c), li, g);
                    for (t, &x) in doi.iter().enumerate() {
                        dv_j[c * dv_w + t].push_product(p, x);
                    }
                    let mut acc = Accum::new(bm);
                    for (&a, &b) in doi.iter().zip(vg.row(j)) {
                        acc.push_product(a, b);
                    }
                    let dp = acc.finish();
                    let ds = ds_value(p, dp, delta.get(i), alpha, bm);
                    dp_full[i * nk + j] = dp;
                    ds_full[i * nk + j] = ds;
                    for (t, &x) in kg.row(j).iter().enumerate() {
                        dq[i * d + t].push_product(ds, x);
                    }
                    for (t, &x) in qg.row(i).iter().enumerate() {
                        dk_j[c * d + t].push_product(ds, x);
                    }
                }
            }
        }
        for (c, j) in cols.enumerate() {
            for t in 0..d {
                dk[j * d + t] = dk_j[c * d + t].finish();
            }
            for t in 0..dv_w {
                dv[j * dv_w + t] = dv_j[c * dv_w + t].finish();
            }
        }
    }
    let grid = bm.result_grid();
    Ok(AttnGrads {
        dq: Mat::new(n, d, dq.iter().map(Accum::finish).collect(), grid)?,
        dk: Mat::new(nk, d, dk, grid)?,
        dv: Mat::new(nk, dv_w, dv, grid)?,
        ds: Mat::new(n, nk, ds_full, grid)?,
        dp: Mat::new(n, nk, dp_full, grid)?,
        delta,
    })
}

fn attention_dp(d_o: &Mat, v: &Mat, mode: Precision) -> Mat {
    linalg::matmul_unchecked(d_o, v, mode)
}

/// The pair of helpers most callers want: forward through flash, then back.
pub fn flash_roundtrip(
    q: &Mat,
    k: &Mat,
    v: &Mat,
    alpha: f64,
    d_o: &Mat,
    cfg: &TileConfig,
    plan: &PrecisionPlan,
) -> Result<(FlashOutput, AttnGrads)> {
    let fwd = flash_forward(q, k, v, alpha, cfg, plan)?;
    let grads = flash_backward(q, k, v, alpha, &fwd, d_o, cfg, plan)?;
    Ok((fwd, grads))
}

/// δ difference of a flash forward's two duals, in f64.
pub fn flash_delta_diff(fwd: &FlashOutput, d_o: &Mat) -> Result<Vector> {
    let o_hp = fwd.o_hp.as_ref().ok_or(Error::MissingTapeField {
        field: "o_hp",
        needed_by: "delta_diff",
    })?;
    attention::delta_diff_of(&fwd.o, o_hp, d_o)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{backward, forward, DeltaSource};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn inputs(n: usize, d: usize, grid: Grid, seed: u64) -> (Mat, Mat, Mat, Mat) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = |scale: f64| Mat::from_fn(n, d, grid, |_, _| rng.random_range(-scale..scale));
        (m(2.0), m(2.0), m(1.0), m(1.0))
    }

    #[test]
    fn stabilized_rowmax_examples() {
        let s = Mat::from_rows(&[vec![2.0, 2.0, 1.0]], Grid::B16).unwrap();
        assert_eq!(stabilized_rowmax(&s, 2.0).unwrap().data(), &[4.0]);
        let s = Mat::from_rows(&[vec![-1.0, -1.0]], Grid::B16).unwrap();
        assert_eq!(stabilized_rowmax(&s, 2.0).unwrap().data(), &[0.0]);
        let s = Mat::from_rows(&[vec![3.0, 1.0]], Grid::B16).unwrap();
        assert_eq!(stabilized_rowmax(&s, 2.0).unwrap().data(), &[3.0]);
        let s = Mat::from_rows(&[vec![0.0, 0.0, -1.0]], Grid::B16).unwrap();
        assert_eq!(stabilized_rowmax(&s, 2.0).unwrap().data(), &[0.0]);
        assert_eq!(adjusted_max(&[0.0, -0.0], 2.0, true), 1.0);
        assert!(stabilized_rowmax(&s, 1.0).is_err());
    }

    #[test]
    fn untiled_matches_reference_bitwise() {
        for (plan, grid) in [
            (PrecisionPlan::lp(), Grid::B16),
            (PrecisionPlan::hp(), Grid::B16),
            (PrecisionPlan::exact(), Grid::F64),
            (PrecisionPlan::lp().with_causal(true), Grid::B16),
        ] {
            let (q, k, v, d_o) = inputs(12, 4, grid, 1);
            let tape = forward(&q, &k, &v, 0.5, &plan).unwrap();
            let cfg = TileConfig::untiled(12);
            let fwd = flash_forward(&q, &k, &v, 0.5, &cfg, &plan).unwrap();
            assert!(fwd.o.bits_eq(tape.o()), "{plan}");
            assert!(fwd
                .o_hp
                .as_ref()
                .unwrap()
                .bits_eq(tape.o_hp.as_ref().unwrap()));
            assert!(fwd.lse.bits_eq(&tape.lse));
            for src in DeltaSource::ALL {
                let plan = plan.with_delta(src);
                let a = backward(&tape, &d_o, &plan).unwrap();
                for c in [
                    TileConfig::untiled(12),
                    TileConfig::new(5, 3),
                    TileConfig::new(1, 1),
                ] {
                    let b = flash_backward(&q, &k, &v, 0.5, &fwd, &d_o, &c, &plan).unwrap();
                    assert!(
                        a.dq.bits_eq(&b.dq) && a.dk.bits_eq(&b.dk) && a.dv.bits_eq(&b.dv),
                        "{plan} {c:?}"
                    );
                    assert!(a.delta.bits_eq(&b.delta));
                }
            }
        }
    }

    #[test]
    fn tiling_invariance_in_exact_mode() {
        let (q, k, v, _) = inputs(8, 4, Grid::F64, 2);
        let plan = PrecisionPlan::exact();
        let full = flash_forward(&q, &k, &v, 0.5, &TileConfig::untiled(8), &plan).unwrap();
        let tiled = flash_forward(&q, &k, &v, 0.5, &TileConfig::new(2, 2), &plan).unwrap();
        assert!(linalg::rel_err_inf(tiled.o.data(), full.o.data()) < 1e-12);
        // m is nondecreasing tile by tile
        let mut st = RunningState::new(8, 4, &plan);
        let mut prev = vec![f64::NEG_INFINITY; 8];
        for cols in blocks(8, 3) {
            let s = score_block(&q, &k, 0..8, cols.clone(), 0.5, plan.score_mode, false);
            st.absorb(&s, &v.select_rows(cols), &TileConfig::new(8, 3), &plan);
            assert!(st.m().iter().zip(&prev).all(|(a, b)| a >= b));
            prev = st.m().to_vec();
        }
    }

    #[test]
    fn stale_logsumexp_is_detected() {
        let (q, k, v, d_o) = inputs(6, 4, Grid::B16, 3);
        let plan = PrecisionPlan::lp();
        let cfg = TileConfig::new(2, 2);
        let fwd = flash_forward(&q, &k, &v, 0.5, &cfg, &plan).unwrap();
        let (q2, ..) = inputs(6, 4, Grid::B16, 4);
        assert!(matches!(
            flash_backward(&q2, &k, &v, 0.5, &fwd, &d_o, &cfg, &plan),
            Err(Error::StaleLogSumExp)
        ));
    }

    #[test]
    fn config_validation() {
        let (q, k, v, _) = inputs(4, 2, Grid::B16, 5);
        let plan = PrecisionPlan::lp();
        assert!(flash_forward(&q, &k, &v, 1.0, &TileConfig::new(0, 2), &plan).is_err());
        assert!(flash_forward(&q, &k, &v, 1.0, &TileConfig::new(2, 5), &plan).is_err());
        assert!(flash_forward(
            &q,
            &k,
            &v,
            1.0,
            &TileConfig::new(2, 2).stabilized(1.0),
            &plan
        )
        .is_err());
    }

    #[test]
    fn zero_gradient_through_tiles() {
        let (q, k, v, _) = inputs(6, 4, Grid::B16, 6);
        let plan = PrecisionPlan::lp();
        let cfg = TileConfig::new(4, 4);
        let (_, g) =
            flash_roundtrip(&q, &k, &v, 0.5, &Mat::zeros(6, 4, Grid::F64), &cfg, &plan).unwrap();
        assert_eq!(g.dq.max_abs() + g.dk.max_abs() + g.dv.max_abs(), 0.0);
    }

    #[test]
    fn stabilized_matches_standard_in_exact_mode() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        // coarse grid so that ties are common
        let q = Mat::from_fn(16, 4, Grid::F64, |_, _| rng.random_range(-2i32..3) as f64);
        let k = Mat::from_fn(16, 4, Grid::F64, |_, _| rng.random_range(-2i32..3) as f64);
        let v = Mat::from_fn(16, 4, Grid::F64, |_, _| rng.random_range(-1.0..1.0));
        let plan = PrecisionPlan::exact();
        let cfg = TileConfig::new(4, 8);
        let std = flash_forward(&q, &k, &v, 0.5, &cfg, &plan).unwrap();
        let stab = stabilized_flash_forward(&q, &k, &v, 0.5, &cfg, &plan).unwrap();
        assert!(stab.adjusted_rows > 0);
        assert!(linalg::rel_err_inf(stab.o.data(), std.o.data()) < 1e-12);
        assert!(linalg::rel_err_inf(stab.lse.data(), std.lse.data()) < 1e-12);
    }
}
