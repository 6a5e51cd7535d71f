//! Input builders shared by the benches.

use flashbias::{Grid, Mat};

/// Deterministic values in `[-scale, scale)` from a 64-bit LCG. Rounded onto `grid`.
pub fn lcg_mat(rows: usize, cols: usize, scale: f64, seed: u64, grid: Grid) -> Mat {
    let mut state = seed
        .wrapping_mul(6364136223846793005)
        .wrapping_add(1442695040888963407);
    let data = (0..rows * cols)
        .map(|_| {
            state = state
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            let u = (state >> 11) as f64 / (1u64 << 53) as f64;
            scale * (2.0 * u - 1.0)
        })
        .collect();
    Mat::rounded(rows, cols, data, grid).expect("finite")
}

/// `(Q, K, V, dO)` for an `n × d` head.
pub fn attention_inputs(n: usize, d: usize, grid: Grid) -> (Mat, Mat, Mat, Mat) {
    (
        lcg_mat(n, d, 2.0, 1, grid),
        lcg_mat(n, d, 2.0, 2, grid),
        lcg_mat(n, d, 1.0, 3, grid),
        lcg_mat(n, d, 1.0, 4, Grid::F32),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builders_are_deterministic_and_gridded() {
        let a = lcg_mat(4, 3, 1.0, 9, Grid::B16);
        assert!(a.bits_eq(&lcg_mat(4, 3, 1.0, 9, Grid::B16)));
        assert!(a.data().iter().all(|x| x.abs() <= 1.0));
        assert_eq!(attention_inputs(5, 2, Grid::B16).3.shape(), (5, 2));
    }
}
