//! Dense row-major matrices whose `f64` payloads carry a grid tag.
//!
//! Narrow formats are never stored natively. A `Mat` tagged `B16` holds
//! `f64` values that are each exactly a bfloat16 value, so every
//! intermediate can be inspected and compared against the oracle directly.

mod io;
mod spectral;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Accum, Grid, Precision};

pub use io::{read_csv, read_mat, write_csv, write_mat, Container, MAT_MAGIC};
pub use spectral::{spectral_norm, SpectralEstimate};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MatRepr")]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    grid: Grid,
}

#[derive(Deserialize)]
struct MatRepr {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    grid: Grid,
}

impl TryFrom<MatRepr> for Mat {
    type Error = Error;

    fn try_from(r: MatRepr) -> Result<Self> {
        Mat::new(r.rows, r.cols, r.data, r.grid)
    }
}

#[derive(Deserialize)]
struct VectorRepr {
    data: Vec<f64>,
    grid: Grid,
}

impl TryFrom<VectorRepr> for Vector {
    type Error = Error;

    fn try_from(r: VectorRepr) -> Result<Self> {
        Vector::new(r.data, r.grid)
    }
}

fn check_grid(op: &'static str, data: &[f64], grid: Grid) -> Result<()> {
    match data.iter().position(|&x| !grid.contains(x)) {
        Some(index) => Err(Error::OffGrid {
            op,
            index,
            value: data[index],
            grid,
        }),
        None => Ok(()),
    }
}

impl Mat {
    /// Wraps `data`, checking its length and that every element lies on `grid`.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>, grid: Grid) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::DimensionMismatch {
                op: "Mat::new",
                expected: format!("{rows}x{cols} = {} elements", rows * cols),
                found: format!("{} elements", data.len()),
            });
        }
        check_grid("Mat::new", &data, grid)?;
        Ok(Mat {
            rows,
            cols,
            data,
            grid,
        })
    }

    /// Rounds every element of `data` onto `grid`.
    pub fn rounded(rows: usize, cols: usize, mut data: Vec<f64>, grid: Grid) -> Result<Self> {
        for x in &mut data {
            *x = grid.round(*x);
        }
        Mat::new(rows, cols, data, grid)
    }

    pub(crate) fn from_raw(rows: usize, cols: usize, data: Vec<f64>, grid: Grid) -> Self {
        debug_assert_eq!(rows * cols, data.len());
        debug_assert!(check_grid("from_raw", &data, grid).is_ok());
        Mat {
            rows,
            cols,
            data,
            grid,
        }
    }

    pub fn from_fn(
        rows: usize,
        cols: usize,
        grid: Grid,
        mut f: impl FnMut(usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(grid.round(f(i, j)));
            }
        }
        Mat::from_raw(rows, cols, data, grid)
    }

    pub fn from_rows(rows: &[Vec<f64>], grid: Grid) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
            return Err(Error::DimensionMismatch {
                op: "Mat::from_rows",
                expected: format!("{cols} columns"),
                found: format!("{} columns", bad.len()),
            });
        }
        Mat::new(rows.len(), cols, rows.concat(), grid)
    }

    pub fn zeros(rows: usize, cols: usize, grid: Grid) -> Self {
        Mat::from_raw(rows, cols, vec![0.0; rows * cols], grid)
    }

    pub fn identity(n: usize, grid: Grid) -> Self {
        Mat::from_fn(n, n, grid, |i, j| if i == j { 1.0 } else { 0.0 })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn grid(&self) -> Grid {
        self.grid
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    /// Mutable payload. Callers must keep every element on the grid.
    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Stores `grid.round(value)`.
    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        self.data[i * self.cols + j] = self.grid.round(value);
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn col(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn transpose(&self) -> Mat {
        let mut data = Vec::with_capacity(self.data.len());
        for j in 0..self.cols {
            for i in 0..self.rows {
                data.push(self.get(i, j));
            }
        }
        Mat::from_raw(self.cols, self.rows, data, self.grid)
    }

    /// Rounds onto `grid`. Rounding onto a wider grid only retags.
    pub fn regrid(&self, grid: Grid) -> Mat {
        if self.grid.within(grid) {
            return Mat::from_raw(self.rows, self.cols, self.data.clone(), grid);
        }
        Mat::from_raw(
            self.rows,
            self.cols,
            self.data.iter().map(|&x| grid.round(x)).collect(),
            grid,
        )
    }

    /// Applies `f` elementwise and rounds the result onto `grid`.
    pub fn map(&self, grid: Grid, f: impl Fn(f64) -> f64) -> Mat {
        Mat::from_raw(
            self.rows,
            self.cols,
            self.data.iter().map(|&x| grid.round(f(x))).collect(),
            grid,
        )
    }

    /// Elementwise combination, rounded onto `grid`.
    pub fn zip_map(&self, other: &Mat, grid: Grid, f: impl Fn(f64, f64) -> f64) -> Result<Mat> {
        self.check_same_shape("zip_map", other)?;
        Ok(Mat::from_raw(
            self.rows,
            self.cols,
            self.data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| grid.round(f(a, b)))
                .collect(),
            grid,
        ))
    }

    /// `self - other` in f64.
    pub fn sub(&self, other: &Mat) -> Result<Mat> {
        self.zip_map(other, Grid::F64, |a, b| a - b)
    }

    pub fn scaled(&self, s: f64) -> Mat {
        self.map(Grid::F64, |x| x * s)
    }

    pub fn select_cols(&self, cols: &[usize]) -> Mat {
        Mat::from_fn(self.rows, cols.len(), self.grid, |i, j| {
            self.get(i, cols[j])
        })
    }

    pub fn select_rows(&self, range: std::ops::Range<usize>) -> Mat {
        Mat::from_raw(
            range.len(),
            self.cols,
            self.data[range.start * self.cols..range.end * self.cols].to_vec(),
            self.grid,
        )
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, &x| m.max(x.abs()))
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Bitwise equality of payloads and shape; grid tags are ignored.
    pub fn bits_eq(&self, other: &Mat) -> bool {
        self.shape() == other.shape()
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub(crate) fn check_same_shape(&self, op: &'static str, other: &Mat) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::DimensionMismatch {
                op,
                expected: format!("{}x{}", self.rows, self.cols),
                found: format!("{}x{}", other.rows, other.cols),
            });
        }
        Ok(())
    }
}

/// A precision-tagged vector (one value per row of some matrix).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "VectorRepr")]
pub struct Vector {
    data: Vec<f64>,
    grid: Grid,
}

impl Vector {
    pub fn new(data: Vec<f64>, grid: Grid) -> Result<Self> {
        check_grid("Vector::new", &data, grid)?;
        Ok(Vector { data, grid })
    }

    pub fn rounded(data: Vec<f64>, grid: Grid) -> Self {
        Vector {
            data: data.into_iter().map(|x| grid.round(x)).collect(),
            grid,
        }
    }

    pub fn zeros(len: usize, grid: Grid) -> Self {
        Vector {
            data: vec![0.0; len],
            grid,
        }
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn grid(&self) -> Grid {
        self.grid
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, i: usize) -> f64 {
        self.data[i]
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn bits_eq(&self, other: &Vector) -> bool {
        self.len() == other.len()
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// As a single-row matrix.
    pub fn to_row(&self) -> Mat {
        Mat::from_raw(1, self.len(), self.data.clone(), self.grid)
    }
}

fn check_operand(op: &'static str, m: &Mat, mode: Precision) -> Result<()> {
    let required = mode.operand_grid();
    if !m.grid().within(required) {
        return Err(Error::ModeIncompatible {
            op,
            mode: mode.name(),
            required,
            found: m.grid(),
        });
    }
    Ok(())
}

/// `a · b` under `mode`.
///
/// Every output element is an ascending-k fold: f32 products and
/// accumulation for `lp` and `hp` (rounded to bf16 at the end for `lp`),
/// f64 for `exact`. `lp` requires bf16 operands and `hp` requires f32 ones.
/// Rows are computed in parallel; the per-element order is fixed, so the
/// result does not depend on the thread count.
pub fn matmul(a: &Mat, b: &Mat, mode: Precision) -> Result<Mat> {
    if a.cols() != b.rows() {
        return Err(Error::DimensionMismatch {
            op: "matmul",
            expected: format!("{} rows in rhs", a.cols()),
            found: format!("{}x{}", b.rows(), b.cols()),
        });
    }
    check_operand("matmul", a, mode)?;
    check_operand("matmul", b, mode)?;
    Ok(matmul_unchecked(a, &b.transpose(), mode))
}

/// `a · btᵀ` where `bt` is given already transposed.
pub(crate) fn matmul_unchecked(a: &Mat, bt: &Mat, mode: Precision) -> Mat {
    let (n, m) = (a.rows(), bt.rows());
    let mut out = vec![0.0; n * m];
    if m > 0 {
        out.par_chunks_mut(m).enumerate().for_each(|(i, row)| {
            let ar = a.row(i);
            for (j, slot) in row.iter_mut().enumerate() {
                let mut acc = Accum::new(mode);
                for (&x, &y) in ar.iter().zip(bt.row(j)) {
                    acc.push_product(x, y);
                }
                *slot = acc.finish();
            }
        });
    }
    Mat::from_raw(n, m, out, mode.result_grid())
}

/// `a · bᵀ` under `mode`.
pub fn matmul_nt(a: &Mat, b: &Mat, mode: Precision) -> Result<Mat> {
    if a.cols() != b.cols() {
        return Err(Error::DimensionMismatch {
            op: "matmul_nt",
            expected: format!("{} columns in rhs", a.cols()),
            found: format!("{}x{}", b.rows(), b.cols()),
        });
    }
    check_operand("matmul_nt", a, mode)?;
    check_operand("matmul_nt", b, mode)?;
    Ok(matmul_unchecked(a, b, mode))
}

fn check_rows(op: &'static str, s: &Mat) -> Result<()> {
    if s.cols() == 0 || s.rows() == 0 {
        return Err(Error::Empty { op });
    }
    if let Some(index) = s
        .data()
        .iter()
        .position(|x| x.is_nan() || *x == f64::INFINITY)
    {
        return Err(Error::NonFinite {
            op,
            index,
            value: s.data()[index],
        });
    }
    Ok(())
}

/// Per-row maximum. `-inf` (masked) entries are allowed, NaN is not.
pub fn rowmax(s: &Mat) -> Result<Vector> {
    check_rows("rowmax", s)?;
    let data = (0..s.rows())
        .map(|i| s.row(i).iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    Ok(Vector {
        data,
        grid: s.grid(),
    })
}

/// Per-row sum, ascending column order, in f64.
pub fn rowsum(s: &Mat) -> Result<Vector> {
    check_rows("rowsum", s)?;
    let data = (0..s.rows())
        .map(|i| s.row(i).iter().fold(-0.0, |a, &x| a + x))
        .collect();
    Ok(Vector {
        data,
        grid: Grid::F64,
    })
}

/// Per-row count of elements bitwise equal to `m[i]`.
pub fn rowsum_eq(s: &Mat, m: &Vector) -> Result<Vector> {
    check_rows("rowsum_eq", s)?;
    if m.len() != s.rows() {
        return Err(Error::LengthMismatch {
            op: "rowsum_eq",
            left: s.rows(),
            right: m.len(),
        });
    }
    let data = (0..s.rows())
        .map(|i| count_eq(s.row(i), m.get(i)) as f64)
        .collect();
    Ok(Vector {
        data,
        grid: Grid::F64,
    })
}

#[inline]
pub(crate) fn count_eq(row: &[f64], m: f64) -> usize {
    // +0 and -0 are the same value; everything else compares by bits
    row.iter()
        .filter(|&&x| x.to_bits() == m.to_bits() || (x == 0.0 && m == 0.0))
        .count()
}

/// Norm-wise relative error `‖a − reference‖∞ / ‖reference‖∞`.
///
/// Falls back to the absolute error when the reference is zero.
pub fn rel_err_inf(a: &[f64], reference: &[f64]) -> f64 {
    let diff = a
        .iter()
        .zip(reference)
        .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    let scale = reference.iter().fold(0.0f64, |m, y| m.max(y.abs()));
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

/// `u vᵀ` in f64.
pub fn rank1_outer(u: &[f64], v: &[f64]) -> Mat {
    Mat::from_fn(u.len(), v.len(), Grid::F64, |i, j| u[i] * v[j])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, grid: Grid, seed: u64) -> Mat {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Mat::from_fn(rows, cols, grid, |_, _| rng.random_range(-2.0..2.0))
    }

    #[test]
    fn constructors_validate() {
        assert!(Mat::new(2, 2, vec![1.0; 3], Grid::F64).is_err());
        assert!(matches!(
            Mat::new(1, 1, vec![0.1], Grid::B16),
            Err(Error::OffGrid { index: 0, .. })
        ));
        let m = Mat::rounded(1, 1, vec![0.1], Grid::B16).unwrap();
        assert_eq!(m.get(0, 0), 0.10009765625);
    }

    #[test]
    fn identity_is_neutral_in_every_mode() {
        let a = random(5, 4, Grid::B16, 1);
        for mode in [Precision::Lp, Precision::Hp, Precision::Exact] {
            let out = matmul(&Mat::identity(5, Grid::B16), &a, mode).unwrap();
            assert!(out.bits_eq(&a), "{mode}");
            let out = matmul(&a, &Mat::identity(4, Grid::B16), mode).unwrap();
            assert!(out.bits_eq(&a), "{mode}");
        }
    }

    #[test]
    fn row_by_column_matches_dot() {
        let a = random(1, 9, Grid::B16, 2);
        let b = random(9, 1, Grid::B16, 3);
        let p: Vec<_> = a.data().iter().map(|&x| crate::B16::from_f64(x)).collect();
        let v: Vec<_> = b.data().iter().map(|&x| crate::B16::from_f64(x)).collect();
        let lp = matmul(&a, &b, Precision::Lp).unwrap();
        assert_eq!(
            lp.get(0, 0),
            crate::numerics::dot_lp(&p, &v).unwrap().0.to_f64()
        );
        let pf: Vec<f32> = a.data().iter().map(|&x| x as f32).collect();
        let vf: Vec<f32> = b.data().iter().map(|&x| x as f32).collect();
        let hp = matmul(&a, &b, Precision::Hp).unwrap();
        assert_eq!(
            hp.get(0, 0),
            crate::numerics::dot_hp(&pf, &vf).unwrap() as f64
        );
    }

    #[test]
    fn lp_within_one_ulp_of_exact() {
        let a = random(8, 8, Grid::B16, 4);
        let b = random(8, 8, Grid::B16, 5);
        let lp = matmul(&a, &b, Precision::Lp).unwrap();
        let ex = matmul(&a, &b, Precision::Exact).unwrap();
        for (x, y) in lp.data().iter().zip(ex.data()) {
            assert!((x - y).abs() <= crate::numerics::ulp_b16(*y), "{x} vs {y}");
            assert_eq!(Grid::B16.round(*x), *x);
        }
    }

    #[test]
    fn mode_grid_checks() {
        let f = random(2, 2, Grid::F32, 6);
        assert!(matches!(
            matmul(&f, &f, Precision::Lp),
            Err(Error::ModeIncompatible { .. })
        ));
        assert!(matmul(&f, &f, Precision::Hp).is_ok());
        let bad = Mat::zeros(3, 2, Grid::F64);
        assert!(matches!(
            matmul(&f, &bad, Precision::Exact),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn matmul_independent_of_thread_count() {
        let a = random(33, 17, Grid::F32, 7);
        let b = random(17, 29, Grid::F32, 8);
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| matmul(&a, &b, Precision::Hp).unwrap())
        };
        let one = run(1);
        assert!(one.bits_eq(&run(4)));
        assert!(one.bits_eq(&run(7)));
    }

    #[test]
    fn row_reductions() {
        let s = Mat::from_rows(
            &[
                vec![2.0, 2.0, 1.0],
                vec![-1.0, -1.0, -3.0],
                vec![3.0, 1.0, 0.0],
            ],
            Grid::B16,
        )
        .unwrap();
        let m = rowmax(&s).unwrap();
        assert_eq!(m.data(), &[2.0, -1.0, 3.0]);
        assert_eq!(rowsum_eq(&s, &m).unwrap().data(), &[2.0, 2.0, 1.0]);
        assert_eq!(rowsum(&s).unwrap().data(), &[5.0, -5.0, 4.0]);
        let nan = Mat::from_rows(&[vec![f64::NAN]], Grid::F64).unwrap();
        assert!(rowmax(&nan).is_err());
        assert!(rowmax(&Mat::zeros(2, 0, Grid::F64)).is_err());
    }

    #[test]
    fn outer_products() {
        let e = rank1_outer(&[0.0, 1.0], &[1.0, 0.0, 0.0]);
        assert_eq!(e.data(), &[0.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        let u = [1.5, -2.0, 0.25];
        let v = [3.0, 0.5];
        let o = rank1_outer(&u, &v);
        let col = Mat::new(3, 1, u.to_vec(), Grid::F64).unwrap();
        let row = Mat::new(1, 2, v.to_vec(), Grid::F64).unwrap();
        assert!(o.bits_eq(&matmul(&col, &row, Precision::Exact).unwrap()));
        let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((o.frobenius() - nu * nv).abs() < 1e-12);
    }
}
