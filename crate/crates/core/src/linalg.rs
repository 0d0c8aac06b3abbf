//! Dense helpers used by the regression-based explainers and the mixed
//! derivative.

use crate::error::{Error, Result};

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Dot product with four independent accumulators.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (x, y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn norm2(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Solve `A x = b` for symmetric positive definite `A` (p×p, row-major) by
/// Cholesky factorisation.
pub fn cholesky_solve(a: &[f64], b: &[f64], p: usize) -> Result<Vec<f64>> {
    let mut l = vec![0.0; p * p];
    for i in 0..p {
        for j in 0..=i {
            let mut s = a[i * p + j];
            for k in 0..j {
                s -= l[i * p + k] * l[j * p + k];
            }
            if i == j {
                if !(s > 0.0) || !s.is_finite() {
                    return Err(Error::Numeric(format!(
                        "normal matrix is not positive definite (pivot {i} = {s:e})"
                    )));
                }
                l[i * p + i] = s.sqrt();
            } else {
                l[i * p + j] = s / l[j * p + j];
            }
        }
    }
    let mut y = vec![0.0; p];
    for i in 0..p {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * p + k] * y[k];
        }
        y[i] = s / l[i * p + i];
    }
    let mut x = vec![0.0; p];
    for i in (0..p).rev() {
        let mut s = y[i];
        for k in i + 1..p {
            s -= l[k * p + i] * x[k];
        }
        x[i] = s / l[i * p + i];
    }
    Ok(x)
}

/// Weighted ridge regression. `design` is n×p row-major, `weights` has length
/// n. The ridge term `lambda` is added to every diagonal entry except those
/// listed in `unpenalized`.
pub fn weighted_ridge(
    design: &[f64],
    target: &[f64],
    weights: &[f64],
    p: usize,
    lambda: f64,
    unpenalized: &[usize],
) -> Result<Vec<f64>> {
    let n = target.len();
    if design.len() != n * p || weights.len() != n {
        return Err(Error::Shape(format!(
            "ridge design is {} entries for n={n}, p={p}",
            design.len()
        )));
    }
    let mut ata = vec![0.0; p * p];
    let mut atb = vec![0.0; p];
    for r in 0..n {
        let row = &design[r * p..(r + 1) * p];
        let w = weights[r];
        for i in 0..p {
            let wi = w * row[i];
            if wi == 0.0 {
                continue;
            }
            atb[i] += wi * target[r];
            for j in 0..=i {
                ata[i * p + j] += wi * row[j];
            }
        }
    }
    for i in 0..p {
        for j in 0..i {
            ata[j * p + i] = ata[i * p + j];
        }
        if !unpenalized.contains(&i) {
            ata[i * p + i] += lambda;
        }
    }
    cholesky_solve(&ata, &atb, p)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dot_matches_naive_sum() {
        let a: Vec<f64> = (0..11).map(|i| i as f64 * 0.5).collect();
        let b: Vec<f64> = (0..11).map(|i| 1.0 - i as f64).collect();
        let naive: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert!((dot(&a, &b) - naive).abs() < 1e-12);
    }

    #[test]
    fn cholesky_solves_small_system() {
        // [[4,2],[2,3]] x = [2,1] -> x = [0.5, 0]
        let x = cholesky_solve(&[4.0, 2.0, 2.0, 3.0], &[2.0, 1.0], 2).unwrap();
        assert!((x[0] - 0.5).abs() < 1e-15 && x[1].abs() < 1e-15);
    }

    #[test]
    fn cholesky_rejects_singular() {
        assert!(matches!(
            cholesky_solve(&[1.0, 1.0, 1.0, 1.0], &[1.0, 1.0], 2),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn weighted_ridge_recovers_line() {
        // y = 2 + 3x, intercept column unpenalized
        let xs = [-1.0, 0.0, 1.0, 2.0];
        let design: Vec<f64> = xs.iter().flat_map(|&x| [1.0, x]).collect();
        let y: Vec<f64> = xs.iter().map(|x| 2.0 + 3.0 * x).collect();
        let coef = weighted_ridge(&design, &y, &[1.0, 0.5, 2.0, 1.0], 2, 1e-12, &[0]).unwrap();
        assert!((coef[0] - 2.0).abs() < 1e-9);
        assert!((coef[1] - 3.0).abs() < 1e-9);
    }
}
