//! Non-tiled single-head attention, forward and backward, with every
//! product and elementwise step under the control of a [`PrecisionPlan`].

mod plan;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Container, Mat, Vector};
use crate::numerics::{Accum, Grid, Precision};

pub use plan::{DeltaSource, PrecisionPlan};

/// Forward intermediates kept for the backward pass and the diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnTape {
    pub q: Mat,
    pub k: Mat,
    pub v: Mat,
    pub alpha: f64,
    pub plan: PrecisionPlan,
    /// `α Q Kᵀ` on the score grid, `-inf` where masked.
    pub s: Mat,
    /// `exp(S − m)` on the softmax grid.
    pub p_bar: Mat,
    pub m: Vector,
    pub l: Vector,
    /// `m + ln ℓ`.
    pub lse: Vector,
    /// `exp(S − L)` on the backward operand grid.
    pub p: Mat,
    /// Output under the plan.
    pub o_lp: Mat,
    /// Output with `P̄ V` and the normalization promoted to at least f32.
    pub o_hp: Option<Mat>,
}

impl AttnTape {
    /// The output the plan produces.
    pub fn o(&self) -> &Mat {
        &self.o_lp
    }

    pub fn o_hp(&self) -> Result<&Mat> {
        self.o_hp.as_ref().ok_or(Error::MissingTapeField {
            field: "o_hp",
            needed_by: "high-precision dual output",
        })
    }

    pub fn to_container(&self) -> Result<Container> {
        let mut c = Container::new();
        let meta = TapeMeta {
            version: 1,
            alpha: self.alpha,
            plan: self.plan,
        };
        c.push("meta", serde_json::to_vec(&meta)?);
        for (name, m) in [
            ("q", &self.q),
            ("k", &self.k),
            ("v", &self.v),
            ("s", &self.s),
            ("p_bar", &self.p_bar),
            ("p", &self.p),
            ("o_lp", &self.o_lp),
        ] {
            c.push_mat(name, m);
        }
        if let Some(o_hp) = &self.o_hp {
            c.push_mat("o_hp", o_hp);
        }
        for (name, v) in [("m", &self.m), ("l", &self.l), ("lse", &self.lse)] {
            c.push_mat(name, &v.to_row());
        }
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let meta: TapeMeta =
            serde_json::from_slice(c.get("meta").ok_or(Error::MissingTapeField {
                field: "meta",
                needed_by: "tape",
            })?)?;
        if meta.version != 1 {
            return Err(Error::Format(format!(
                "unsupported tape version {}",
                meta.version
            )));
        }
        let mat = |field: &'static str| -> Result<Mat> {
            c.mat(field)?.ok_or(Error::MissingTapeField {
                field,
                needed_by: "tape",
            })
        };
        let vector = |field: &'static str| -> Result<Vector> {
            let m = mat(field)?;
            let grid = m.grid();
            Vector::new(m.into_data(), grid)
        };
        Ok(AttnTape {
            q: mat("q")?,
            k: mat("k")?,
            v: mat("v")?,
            alpha: meta.alpha,
            plan: meta.plan,
            s: mat("s")?,
            p_bar: mat("p_bar")?,
            m: vector("m")?,
            l: vector("l")?,
            lse: vector("lse")?,
            p: mat("p")?,
            o_lp: mat("o_lp")?,
            o_hp: c.mat("o_hp")?,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct TapeMeta {
    version: u32,
    alpha: f64,
    plan: PrecisionPlan,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttnGrads {
    pub dq: Mat,
    pub dk: Mat,
    pub dv: Mat,
    pub ds: Mat,
    pub dp: Mat,
    pub delta: Vector,
}

/// One score `α q·k` under `mode`.
#[inline]
pub(crate) fn score(q: &[f64], k: &[f64], alpha: f64, mode: Precision) -> f64 {
    let mut acc = Accum::new(mode);
    for (&a, &b) in q.iter().zip(k) {
        acc.push_product(a, b);
    }
    mode.result_grid().round(mode.mul(acc.raw(), alpha))
}

/// Scores of query rows `rows` against key rows `cols`, `-inf` above the
/// diagonal when causal.
pub(crate) fn score_block(
    q: &Mat,
    k: &Mat,
    rows: std::ops::Range<usize>,
    cols: std::ops::Range<usize>,
    alpha: f64,
    mode: Precision,
    causal: bool,
) -> Mat {
    let width = cols.len();
    let mut data = vec![0.0; rows.len() * width];
    if width > 0 {
        data.par_chunks_mut(width).enumerate().for_each(|(r, out)| {
            let i = rows.start + r;
            for (c, slot) in out.iter_mut().enumerate() {
                let j = cols.start + c;
                *slot = if causal && j > i {
                    f64::NEG_INFINITY
                } else {
                    score(q.row(i), k.row(j), alpha, mode)
                };
            }
        });
    }
    Mat::from_raw(rows.len(), width, data, mode.result_grid())
}

#[inline]
pub(crate) fn exp_shifted(s: f64, shift: f64, grid: Grid) -> f64 {
    if s == f64::NEG_INFINITY {
        0.0
    } else {
        grid.round((s - shift).exp())
    }
}

/// Grid and precision of `ℓ` and `L`.
pub(crate) fn stat_precision(softmax_mode: Precision) -> Precision {
    softmax_mode.promoted()
}

#[inline]
pub(crate) fn lse_value(m: f64, l: f64, softmax_mode: Precision) -> f64 {
    stat_precision(softmax_mode).result_grid().round(m + l.ln())
}

#[inline]
pub(crate) fn ds_value(p: f64, dp: f64, delta: f64, alpha: f64, mode: Precision) -> f64 {
    let t = mode.mul(p, mode.sub(dp, delta));
    mode.result_grid().round(mode.mul(alpha, t))
}

#[inline]
pub(crate) fn normalize_value(obar: f64, l: f64, mode: Precision) -> f64 {
    mode.result_grid().round(mode.div(obar, l))
}

fn check_scores(s: &Mat) -> Result<()> {
    match s
        .data()
        .iter()
        .position(|x| x.is_nan() || *x == f64::INFINITY)
    {
        Some(index) => Err(Error::NonFinite {
            op: "attention scores",
            index,
            value: s.data()[index],
        }),
        None => Ok(()),
    }
}

pub(crate) fn check_inputs(q: &Mat, k: &Mat, v: &Mat, plan: &PrecisionPlan) -> Result<()> {
    if q.rows() == 0 || k.rows() == 0 || q.cols() == 0 {
        return Err(Error::Empty { op: "attention" });
    }
    if q.cols() != k.cols() {
        return Err(Error::DimensionMismatch {
            op: "attention",
            expected: format!("K with {} columns", q.cols()),
            found: format!("{}x{}", k.rows(), k.cols()),
        });
    }
    if k.rows() != v.rows() {
        return Err(Error::DimensionMismatch {
            op: "attention",
            expected: format!("V with {} rows", k.rows()),
            found: format!("{}x{}", v.rows(), v.cols()),
        });
    }
    if plan.causal && q.rows() > k.rows() {
        return Err(Error::DimensionMismatch {
            op: "causal attention",
            expected: format!("at most {} queries", k.rows()),
            found: format!("{}", q.rows()),
        });
    }
    let checks: [(&Mat, Precision, &'static str); 3] = [
        (q, plan.score_mode, "score_mode"),
        (k, plan.score_mode, "score_mode"),
        (v, plan.pv_mode, "pv_mode"),
    ];
    for (m, mode, name) in checks {
        let required = if plan.any_lp() {
            Grid::B16
        } else {
            mode.operand_grid()
        };
        if !m.grid().within(required) {
            return Err(Error::ModeIncompatible {
                op: "attention",
                mode: name,
                required,
                found: m.grid(),
            });
        }
    }
    Ok(())
}

/// `P̄ = exp(S − rowmax S)`, `m = rowmax S`, `ℓ = rowsum P̄`.
///
/// `P̄` lies on `mode`'s result grid; `ℓ` is accumulated in ascending order
/// in f32 (f64 for `exact`) and never rounded to bf16.
pub fn safe_softmax(s: &Mat, mode: Precision) -> Result<(Mat, Vector, Vector)> {
    let m = linalg::rowmax(s)?;
    let grid = mode.result_grid();
    let stat = stat_precision(mode);
    let mut p_bar = Vec::with_capacity(s.data().len());
    let mut l = Vec::with_capacity(s.rows());
    for i in 0..s.rows() {
        let mut acc = Accum::new(stat);
        for &x in s.row(i) {
            let e = exp_shifted(x, m.get(i), grid);
            acc.push(e);
            p_bar.push(e);
        }
        l.push(acc.finish());
    }
    Ok((
        Mat::from_raw(s.rows(), s.cols(), p_bar, grid),
        m,
        Vector::new(l, stat.result_grid())?,
    ))
}

fn pv_normalize(p_bar: &Mat, v: &Mat, l: &Vector, pv: Precision, norm: Precision) -> Result<Mat> {
    let g = pv.operand_grid();
    let obar = linalg::matmul(&p_bar.regrid(g), &v.regrid(g), pv)?;
    let cols = obar.cols();
    let data = obar
        .data()
        .iter()
        .enumerate()
        .map(|(idx, &x)| normalize_value(x, l.get(idx / cols), norm))
        .collect();
    Ok(Mat::from_raw(obar.rows(), cols, data, norm.result_grid()))
}

fn probabilities(s: &Mat, lse: &Vector, grid: Grid) -> Mat {
    let cols = s.cols();
    let data = s
        .data()
        .iter()
        .enumerate()
        .map(|(idx, &x)| exp_shifted(x, lse.get(idx / cols), grid))
        .collect();
    Mat::from_raw(s.rows(), cols, data, grid)
}

/// `O = softmax(α Q Kᵀ) V` with every intermediate kept.
pub fn forward(q: &Mat, k: &Mat, v: &Mat, alpha: f64, plan: &PrecisionPlan) -> Result<AttnTape> {
    check_inputs(q, k, v, plan)?;
    let s = score_block(
        q,
        k,
        0..q.rows(),
        0..k.rows(),
        alpha,
        plan.score_mode,
        plan.causal,
    );
    check_scores(&s)?;
    let (p_bar, m, l) = safe_softmax(&s, plan.softmax_mode)?;
    let o_lp = pv_normalize(&p_bar, v, &l, plan.pv_mode, plan.normalize_mode)?;
    let (pv_hp, norm_hp) = (plan.pv_mode.promoted(), plan.normalize_mode.promoted());
    let o_hp = if (pv_hp, norm_hp) == (plan.pv_mode, plan.normalize_mode) {
        o_lp.clone()
    } else {
        pv_normalize(&p_bar, v, &l, pv_hp, norm_hp)?
    };
    let lse = Vector::new(
        (0..s.rows())
            .map(|i| lse_value(m.get(i), l.get(i), plan.softmax_mode))
            .collect(),
        stat_precision(plan.softmax_mode).result_grid(),
    )?;
    let p = probabilities(&s, &lse, plan.backward_mode.operand_grid());
    Ok(AttnTape {
        q: q.clone(),
        k: k.clone(),
        v: v.clone(),
        alpha,
        plan: *plan,
        s,
        p_bar,
        m,
        l,
        lse,
        p,
        o_lp,
        o_hp: Some(o_hp),
    })
}

/// `rowsum(a ∘ b)` folded in `mode`.
pub(crate) fn rowsum_product(a: &Mat, b: &Mat, mode: Precision) -> Vec<f64> {
    (0..a.rows())
        .map(|i| {
            let mut acc = Accum::new(mode);
            for (&x, &y) in a.row(i).iter().zip(b.row(i)) {
                acc.push_product(x, y);
            }
            acc.finish()
        })
        .collect()
}

/// Inputs the `δ` computation may draw from.
pub(crate) struct DeltaInputs<'a> {
    pub d_o: &'a Mat,
    pub o_lp: &'a Mat,
    pub o_hp: Option<&'a Mat>,
    pub v: &'a Mat,
}

pub(crate) fn compute_delta(
    source: DeltaSource,
    inputs: &DeltaInputs<'_>,
    dp_and_p: impl FnOnce() -> (Mat, Mat),
    mode: Precision,
) -> Result<Vector> {
    let g = mode.operand_grid();
    let data = match source {
        DeltaSource::LowPrecisionOutput => rowsum_product(inputs.d_o, &inputs.o_lp.regrid(g), mode),
        DeltaSource::HighPrecisionOutput => {
            let o_hp = inputs.o_hp.ok_or(Error::MissingTapeField {
                field: "o_hp",
                needed_by: "delta_source dO_O_hp",
            })?;
            rowsum_product(inputs.d_o, &o_hp.regrid(g), mode)
        }
        DeltaSource::DpP => {
            let (dp, p) = dp_and_p();
            rowsum_product(&dp, &p, mode)
        }
        DeltaSource::RecomputePvHp => {
            let (_, p) = dp_and_p();
            let hp = mode.promoted();
            let o = linalg::matmul(
                &p.regrid(hp.operand_grid()),
                &inputs.v.regrid(hp.operand_grid()),
                hp,
            )?;
            rowsum_product(inputs.d_o, &o.regrid(g), mode)
        }
    };
    Vector::new(data, mode.result_grid())
}

/// Gradients of the attention output with respect to Q, K and V.
///
/// `dO` is cast onto the backward operand grid first. `P` is recomputed
/// from `S` and `L` if the tape was recorded for a different backward grid.
pub fn backward(tape: &AttnTape, d_o: &Mat, plan: &PrecisionPlan) -> Result<AttnGrads> {
    tape.o_lp.check_same_shape("attention backward (dO)", d_o)?;
    let bm = plan.backward_mode;
    let g = bm.operand_grid();
    let d_o = d_o.regrid(g);
    let p = if tape.p.grid() == g {
        tape.p.clone()
    } else {
        probabilities(&tape.s, &tape.lse, g)
    };
    let v = tape.v.regrid(g);
    let dp = linalg::matmul_nt(&d_o, &v, bm)?;
    let inputs = DeltaInputs {
        d_o: &d_o,
        o_lp: &tape.o_lp,
        o_hp: tape.o_hp.as_ref(),
        v: &tape.v,
    };
    let delta = compute_delta(plan.delta_source, &inputs, || (dp.clone(), p.clone()), bm)?;

    let cols = dp.cols();
    let ds_data = dp
        .data()
        .iter()
        .zip(p.data())
        .enumerate()
        .map(|(idx, (&dpv, &pv))| ds_value(pv, dpv, delta.get(idx / cols), tape.alpha, bm))
        .collect();
    let ds = Mat::from_raw(dp.rows(), cols, ds_data, bm.result_grid());

    let dq = linalg::matmul(&ds, &tape.k.regrid(g), bm)?;
    let dk = linalg::matmul(&ds.transpose(), &tape.q.regrid(g), bm)?;
    let dv = linalg::matmul(&p.transpose(), &d_o, bm)?;
    Ok(AttnGrads {
        dq,
        dk,
        dv,
        ds,
        dp,
        delta,
    })
}

/// `(δ_lp − δ_hp)[T]`, both rowsums taken in f64.
pub fn delta_diff(tape: &AttnTape, d_o: &Mat) -> Result<Vector> {
    delta_diff_of(&tape.o_lp, tape.o_hp()?, d_o)
}

pub fn delta_diff_of(o_lp: &Mat, o_hp: &Mat, d_o: &Mat) -> Result<Vector> {
    o_lp.check_same_shape("delta_diff", d_o)?;
    o_lp.check_same_shape("delta_diff", o_hp)?;
    let lp = rowsum_product(d_o, o_lp, Precision::Exact);
    let hp = rowsum_product(d_o, o_hp, Precision::Exact);
    Vector::new(lp.iter().zip(&hp).map(|(a, b)| a - b).collect(), Grid::F64)
}
