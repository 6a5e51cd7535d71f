//! Gradient-error decomposition and the series tracked across steps.
//!
//! Orientation: the query projection is `Q = X W_Qᵀ` with `W_Q` of shape
//! `d × D`, so `dW_Q = dQᵀ X` and every rank-1 term `(PK)[T]ᵀ X[T]` is `d × D`.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::attention::{delta_diff, AttnTape};
use crate::error::{Error, Result};
use crate::linalg::{self, Mat, Vector};
use crate::numerics::{Grid, Precision};

pub const REPORT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradErrorReport {
    pub version: u32,
    pub alpha: f64,
    /// `(δ_lp − δ_hp)[T]`.
    pub coeffs: Vector,
    /// `α · diag(coeffs) · (P K)`, equal to `dQ_hp − dQ_lp`.
    pub dq_diff: Mat,
    /// `α · (P K)ᵀ · diag(coeffs) · X`, equal to `dW_Q,hp − dW_Q,lp`.
    pub dwq_diff: Mat,
    /// `(P K)[T]ᵀ X[T]` per token.
    pub rank1_terms: Vec<Mat>,
    /// Cosine similarity of the flattened rank-1 terms. Rows and columns of
    /// zero-norm terms are 0.
    pub similarity: Mat,
    pub bias_sum: f64,
    /// Mean of the Frobenius-normalized nonzero rank-1 terms.
    pub r_hat: Mat,
    /// `‖dwq_diff − proj‖_F / ‖dwq_diff‖_F` where `proj` is the best multiple
    /// of `r_hat`. Zero when `dwq_diff` is zero.
    pub low_rank_residual: f64,
    pub zero_norm_count: usize,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl GradErrorReport {
    /// Builds the report from the coefficients, `P`, `K` and the layer input `X`.
    pub fn from_parts(coeffs: Vector, p: &Mat, k: &Mat, x: &Mat, alpha: f64) -> Result<Self> {
        let n = coeffs.len();
        if p.rows() != n || x.rows() != n || p.cols() != k.rows() {
            return Err(Error::DimensionMismatch {
                op: "grad_error_report",
                expected: format!("P {n}x{}, X with {n} rows", k.rows()),
                found: format!("P {}x{}, X {}x{}", p.rows(), p.cols(), x.rows(), x.cols()),
            });
        }
        let pk = linalg::matmul(&p.regrid(Grid::F64), &k.regrid(Grid::F64), Precision::Exact)?;
        let (d, dm) = (pk.cols(), x.cols());
        let c = coeffs.data();

        let dq_diff = Mat::from_fn(n, d, Grid::F64, |t, j| alpha * c[t] * pk.get(t, j));
        let rank1_terms: Vec<Mat> = (0..n)
            .map(|t| linalg::rank1_outer(pk.row(t), x.row(t)))
            .collect();
        // α (PK)ᵀ diag(c) X, folded over tokens in ascending order
        let mut acc = vec![0.0; d * dm];
        for (t, term) in rank1_terms.iter().enumerate() {
            for (a, &r) in acc.iter_mut().zip(term.data()) {
                *a += c[t] * r;
            }
        }
        let dwq_diff = Mat::new(
            d,
            dm,
            acc.into_iter().map(|v| alpha * v).collect(),
            Grid::F64,
        )?;

        let pk_norm: Vec<f64> = (0..n).map(|t| dot(pk.row(t), pk.row(t)).sqrt()).collect();
        let x_norm: Vec<f64> = (0..n).map(|t| dot(x.row(t), x.row(t)).sqrt()).collect();
        let live: Vec<bool> = (0..n).map(|t| pk_norm[t] * x_norm[t] > 0.0).collect();
        let zero_norm_count = live.iter().filter(|l| !**l).count();
        let similarity = Mat::from_fn(n, n, Grid::F64, |a, b| {
            if !(live[a] && live[b]) {
                0.0
            } else if a == b {
                1.0
            } else {
                // <u1 ⊗ x1, u2 ⊗ x2> = (u1·u2)(x1·x2)
                let cu = dot(pk.row(a), pk.row(b)) / (pk_norm[a] * pk_norm[b]);
                let cx = dot(x.row(a), x.row(b)) / (x_norm[a] * x_norm[b]);
                (cu * cx).clamp(-1.0, 1.0)
            }
        });

        let live_count = n - zero_norm_count;
        let mut r = vec![0.0; d * dm];
        for (t, term) in rank1_terms.iter().enumerate().filter(|(t, _)| live[*t]) {
            let scale = 1.0 / (pk_norm[t] * x_norm[t] * live_count as f64);
            for (a, &v) in r.iter_mut().zip(term.data()) {
                *a += v * scale;
            }
        }
        let r_hat = Mat::new(d, dm, r, Grid::F64)?;

        let w = dwq_diff.data();
        let rr = dot(r_hat.data(), r_hat.data());
        let ww = dot(w, w);
        let low_rank_residual = if ww == 0.0 {
            0.0
        } else if rr == 0.0 {
            1.0
        } else {
            let s = dot(w, r_hat.data()) / rr;
            let res: f64 = w
                .iter()
                .zip(r_hat.data())
                .map(|(a, b)| (a - s * b).powi(2))
                .sum();
            (res / ww).sqrt()
        };

        Ok(GradErrorReport {
            version: REPORT_VERSION,
            alpha,
            bias_sum: c.iter().sum(),
            coeffs,
            dq_diff,
            dwq_diff,
            rank1_terms,
            similarity,
            r_hat,
            low_rank_residual,
            zero_norm_count,
        })
    }

    /// `α Σ_T coeffs[T] · rank1_terms[T]`, skipping `skip`.
    pub fn recompose(&self, skip: Option<usize>) -> Mat {
        let (d, dm) = self.dwq_diff.shape();
        let mut acc = vec![0.0; d * dm];
        for (t, term) in self.rank1_terms.iter().enumerate() {
            if Some(t) == skip {
                continue;
            }
            let c = self.coeffs.get(t);
            for (a, &r) in acc.iter_mut().zip(term.data()) {
                *a += c * r;
            }
        }
        Mat::from_raw(
            d,
            dm,
            acc.into_iter().map(|v| self.alpha * v).collect(),
            Grid::F64,
        )
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let r: GradErrorReport = serde_json::from_str(s)?;
        if r.version != REPORT_VERSION {
            return Err(Error::Format(format!(
                "unsupported report version {}",
                r.version
            )));
        }
        Ok(r)
    }

    /// One line per token: `token,coeff,term_norm,similarity_to_r_hat`.
    pub fn write_summary_csv(&self, mut out: impl Write) -> Result<()> {
        writeln!(out, "token,coeff,term_norm,similarity_to_r_hat")?;
        let rn = self.r_hat.frobenius();
        for (t, term) in self.rank1_terms.iter().enumerate() {
            let tn = term.frobenius();
            let sim = if tn == 0.0 || rn == 0.0 {
                0.0
            } else {
                dot(term.data(), self.r_hat.data()) / (tn * rn)
            };
            writeln!(out, "{t},{:?},{tn:?},{sim:?}", self.coeffs.get(t))?;
        }
        Ok(())
    }
}

/// Report for a non-tiled tape. `X` is the layer input (N × D).
pub fn grad_error_report(
    tape: &AttnTape,
    d_o: &Mat,
    x: &Mat,
    alpha: f64,
) -> Result<GradErrorReport> {
    let coeffs = delta_diff(tape, d_o)?;
    GradErrorReport::from_parts(coeffs, &tape.p, &tape.k, x, alpha)
}

/// Running sum of `bias_sum` across reports.
pub fn bias_cumsum(reports: &[GradErrorReport]) -> Vec<f64> {
    cumsum(reports.iter().map(|r| r.bias_sum))
}

pub fn cumsum(values: impl IntoIterator<Item = f64>) -> Vec<f64> {
    values
        .into_iter()
        .scan(0.0, |acc, x| {
            *acc += x;
            Some(*acc)
        })
        .collect()
}

/// Fraction of distinct token pairs (both nonzero) with similarity above `threshold`.
pub fn similarity_summary(report: &GradErrorReport, threshold: f64) -> Result<f64> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "similarity threshold must be in (0, 1), got {threshold}"
        )));
    }
    let n = report.similarity.rows();
    let live: Vec<bool> = (0..n).map(|t| report.similarity.get(t, t) == 1.0).collect();
    let (mut total, mut above) = (0usize, 0usize);
    for a in 0..n {
        for b in a + 1..n {
            if live[a] && live[b] {
                total += 1;
                if report.similarity.get(a, b) > threshold {
                    above += 1;
                }
            }
        }
    }
    Ok(if total == 0 {
        0.0
    } else {
        above as f64 / total as f64
    })
}

pub const SPECTRAL_TOL: f64 = 1e-10;
pub const SPECTRAL_MAX_ITER: usize = 10_000;

/// Spectral norms of named matrices over training steps.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct NormSeries {
    pub names: Vec<String>,
    pub steps: Vec<usize>,
    /// `norms[k][i]` is the norm of matrix `i` at `steps[k]`.
    pub norms: Vec<Vec<f64>>,
}

impl NormSeries {
    pub fn new(names: impl IntoIterator<Item = impl Into<String>>) -> Self {
        NormSeries {
            names: names.into_iter().map(Into::into).collect(),
            steps: Vec::new(),
            norms: Vec::new(),
        }
    }

    /// Series for one matrix.
    pub fn column(&self, i: usize) -> Vec<f64> {
        self.norms.iter().map(|row| row[i]).collect()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn last(&self, i: usize) -> Option<f64> {
        self.norms.last().map(|r| r[i])
    }
}

/// Appends the spectral norm of every matrix in `weights` at `step`.
pub fn norm_tracker(weights: &[&Mat], step: usize, mut series: NormSeries) -> Result<NormSeries> {
    if weights.len() != series.names.len() {
        return Err(Error::LengthMismatch {
            op: "norm_tracker",
            left: weights.len(),
            right: series.names.len(),
        });
    }
    let norms = weights
        .iter()
        .map(|w| linalg::spectral_norm(w, SPECTRAL_TOL, SPECTRAL_MAX_ITER).map(|e| e.sigma))
        .collect::<Result<Vec<_>>>()?;
    series.steps.push(step);
    series.norms.push(norms);
    Ok(series)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn parts(seed: u64) -> (Vector, Mat, Mat, Mat) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 6;
        let mut m = |r, c| Mat::from_fn(r, c, Grid::F64, |_, _| rng.random_range(-1.0..1.0));
        let (p, k, x) = (m(n, n), m(n, 3), m(n, 5));
        let coeffs = Vector::new(p.col(0), Grid::F64).unwrap();
        (coeffs, p, k, x)
    }

    #[test]
    fn recomposition_and_annihilation() {
        let (c, p, k, x) = parts(1);
        let r = GradErrorReport::from_parts(c, &p, &k, &x, 0.5).unwrap();
        assert!(r.recompose(None).bits_eq(&r.dwq_diff));
        for t in [0, 3] {
            let without = r.recompose(Some(t));
            let delta = r.dwq_diff.sub(&without).unwrap();
            let expected = r.rank1_terms[t].scaled(0.5 * r.coeffs.get(t));
            assert!(linalg::rel_err_inf(delta.data(), expected.data()) < 1e-12);
        }
        for t in 0..6 {
            assert_eq!(r.similarity.get(t, t), 1.0);
        }
    }

    #[test]
    fn similarity_matches_flattened_cosine() {
        let (c, p, k, x) = parts(2);
        let r = GradErrorReport::from_parts(c, &p, &k, &x, 1.0).unwrap();
        for a in 0..6 {
            for b in 0..6 {
                let (u, v) = (r.rank1_terms[a].data(), r.rank1_terms[b].data());
                let brute = dot(u, v) / (dot(u, u).sqrt() * dot(v, v).sqrt());
                assert!((r.similarity.get(a, b) - brute).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn diag_identity() {
        let (c, p, k, x) = parts(3);
        let alpha = 0.25;
        let r = GradErrorReport::from_parts(c.clone(), &p, &k, &x, alpha).unwrap();
        let scaled_p = Mat::from_fn(6, 6, Grid::F64, |i, j| alpha * p.get(i, j) * c.get(i));
        let lhs = linalg::matmul(&scaled_p, &k, Precision::Exact).unwrap();
        assert!(linalg::rel_err_inf(lhs.data(), r.dq_diff.data()) < 1e-12);
    }

    #[test]
    fn zero_coefficients() {
        let (_, p, k, x) = parts(4);
        let r = GradErrorReport::from_parts(Vector::zeros(6, Grid::F64), &p, &k, &x, 1.0).unwrap();
        assert_eq!(r.dq_diff.max_abs() + r.dwq_diff.max_abs(), 0.0);
        assert_eq!(r.bias_sum, 0.0);
        assert_eq!(r.low_rank_residual, 0.0);
    }

    #[test]
    fn similarity_summary_extremes() {
        let n = 4;
        let p = Mat::identity(n, Grid::F64);
        let ones = Mat::from_fn(n, 3, Grid::F64, |_, _| 1.0);
        let c = Vector::new(vec![1.0; n], Grid::F64).unwrap();
        let same = GradErrorReport::from_parts(c.clone(), &p, &ones, &ones, 1.0).unwrap();
        assert_eq!(similarity_summary(&same, 0.9).unwrap(), 1.0);
        assert!(same.low_rank_residual < 1e-12);
        let eye = Mat::identity(n, Grid::F64);
        let orth = GradErrorReport::from_parts(c, &p, &eye, &eye, 1.0).unwrap();
        assert_eq!(similarity_summary(&orth, 0.1).unwrap(), 0.0);
        assert!(similarity_summary(&orth, 1.0).is_err());
    }

    #[test]
    fn zero_norm_terms_are_excluded() {
        let (c, p, k, mut x) = parts(5);
        for j in 0..x.cols() {
            x.set(2, j, 0.0);
        }
        let r = GradErrorReport::from_parts(c, &p, &k, &x, 1.0).unwrap();
        assert_eq!(r.zero_norm_count, 1);
        assert_eq!(r.similarity.get(2, 2), 0.0);
    }

    #[test]
    fn json_round_trip() {
        let (c, p, k, x) = parts(6);
        let r = GradErrorReport::from_parts(c, &p, &k, &x, 0.5).unwrap();
        let back = GradErrorReport::from_json(&r.to_json().unwrap()).unwrap();
        assert_eq!(back, r);
        let mut csv = Vec::new();
        r.write_summary_csv(&mut csv).unwrap();
        assert_eq!(String::from_utf8(csv).unwrap().lines().count(), 7);
    }

    #[test]
    fn cumsum_and_norm_series() {
        assert_eq!(cumsum([1.0, -1.0, 1.0, -1.0]), [1.0, 0.0, 1.0, 0.0]);
        let mut s = NormSeries::new(["w"]);
        let mut w = Mat::identity(3, Grid::F64);
        for step in 0..4 {
            s = norm_tracker(&[&w], step, s).unwrap();
            w = w.scaled(2.0);
        }
        let col = s.column(0);
        for (i, v) in col.iter().enumerate() {
            assert!((v - 2f64.powi(i as i32)).abs() < 1e-9);
        }
        assert!(norm_tracker(&[], 5, s).is_err());
    }
}
