use serde::{Deserialize, Serialize};

use super::Mat;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectralEstimate {
    pub sigma: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn mat_vec(w: &Mat, v: &[f64]) -> Vec<f64> {
    (0..w.rows())
        .map(|i| w.row(i).iter().zip(v).map(|(a, b)| a * b).sum())
        .collect()
}

fn mat_t_vec(w: &Mat, u: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; w.cols()];
    for (i, &ui) in u.iter().enumerate() {
        for (o, &x) in out.iter_mut().zip(w.row(i)) {
            *o += x * ui;
        }
    }
    out
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Largest singular value by power iteration on `WᵀW`.
///
/// The seed is the normalized all-ones vector. If `W` annihilates it, the
/// seed is perturbed by adding `1e-3` to its first element. Stops when two
/// successive estimates differ by less than `tol`, or after `max_iter`
/// iterations with `converged = false`.
pub fn spectral_norm(w: &Mat, tol: f64, max_iter: usize) -> Result<SpectralEstimate> {
    if w.rows() == 0 || w.cols() == 0 {
        return Err(Error::Empty {
            op: "spectral_norm",
        });
    }
    if !(tol > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "spectral_norm: tol must be > 0, got {tol}"
        )));
    }
    if w.max_abs() == 0.0 {
        return Ok(SpectralEstimate {
            sigma: 0.0,
            iterations: 0,
            converged: true,
        });
    }
    let n = w.cols();
    let mut v = vec![1.0 / (n as f64).sqrt(); n];
    if norm(&mat_vec(w, &v)) <= 1e-12 * w.frobenius() {
        v[0] += 1e-3;
        let s = norm(&v);
        v.iter_mut().for_each(|x| *x /= s);
    }

    let mut sigma = 0.0;
    for it in 1..=max_iter {
        let u = mat_vec(w, &v);
        let next = norm(&u);
        let y = mat_t_vec(w, &u);
        let ny = norm(&y);
        if ny == 0.0 {
            return Ok(SpectralEstimate {
                sigma: next,
                iterations: it,
                converged: true,
            });
        }
        v = y.into_iter().map(|x| x / ny).collect();
        let delta = (next - sigma).abs();
        sigma = next;
        if delta < tol {
            return Ok(SpectralEstimate {
                sigma,
                iterations: it,
                converged: true,
            });
        }
    }
    Ok(SpectralEstimate {
        sigma,
        iterations: max_iter,
        converged: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Grid;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// One-sided Jacobi SVD; returns singular values in descending order.
    fn jacobi_singular_values(w: &Mat) -> Vec<f64> {
        let (m, n) = w.shape();
        let mut cols: Vec<Vec<f64>> = (0..n).map(|j| w.col(j)).collect();
        for _sweep in 0..100 {
            let mut off = 0.0f64;
            for p in 0..n {
                for q in p + 1..n {
                    let a: f64 = cols[p].iter().map(|x| x * x).sum();
                    let b: f64 = cols[q].iter().map(|x| x * x).sum();
                    let c: f64 = (0..m).map(|i| cols[p][i] * cols[q][i]).sum();
                    if c == 0.0 {
                        continue;
                    }
                    off = off.max(c.abs() / (a * b).sqrt());
                    let zeta = (b - a) / (2.0 * c);
                    let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                    let cs = 1.0 / (1.0 + t * t).sqrt();
                    let sn = cs * t;
                    for i in 0..m {
                        let (x, y) = (cols[p][i], cols[q][i]);
                        cols[p][i] = cs * x - sn * y;
                        cols[q][i] = sn * x + cs * y;
                    }
                }
            }
            if off < 1e-15 {
                break;
            }
        }
        let mut s: Vec<f64> = cols.iter().map(|c| norm(c)).collect();
        s.sort_by(|a, b| b.partial_cmp(a).unwrap());
        s
    }

    #[test]
    fn simple_cases() {
        let id = Mat::identity(3, Grid::F64);
        assert_eq!(spectral_norm(&id, 1e-12, 100).unwrap().sigma, 1.0);
        let d = Mat::from_rows(&[vec![3.0, 0.0], vec![0.0, 1.0]], Grid::F64).unwrap();
        assert!((spectral_norm(&d, 1e-14, 1000).unwrap().sigma - 3.0).abs() < 1e-12);
        let z = spectral_norm(&Mat::zeros(2, 3, Grid::F64), 1e-9, 10).unwrap();
        assert_eq!((z.sigma, z.converged), (0.0, true));
    }

    #[test]
    fn orthogonal_seed_falls_back() {
        let w = Mat::from_rows(&[vec![1.0, -1.0]], Grid::F64).unwrap();
        let est = spectral_norm(&w, 1e-14, 1000).unwrap();
        assert!((est.sigma - 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn matches_jacobi_svd() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for trial in 0..5 {
            let w = Mat::from_fn(12, 12, Grid::F64, |_, _| rng.random_range(-1.0..1.0));
            let oracle = jacobi_singular_values(&w)[0];
            let est = spectral_norm(&w, 1e-15, 100_000).unwrap();
            assert!(
                (est.sigma - oracle).abs() < 1e-8,
                "trial {trial}: {} vs {oracle}",
                est.sigma
            );
            let et = spectral_norm(&w.transpose(), 1e-15, 100_000).unwrap();
            assert!((et.sigma - est.sigma).abs() < 1e-8);
        }
    }

    #[test]
    fn iteration_cap_is_flagged() {
        let w = Mat::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.999]], Grid::F64).unwrap();
        let est = spectral_norm(&w, 1e-300, 3).unwrap();
        assert!(!est.converged);
        assert_eq!(est.iterations, 3);
    }
}
