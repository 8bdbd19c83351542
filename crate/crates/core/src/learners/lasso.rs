//! Coordinate-descent lasso with column-scaled penalties.
//!
//! Minimizes `(1/2n) ||y - b0 - X b||^2 + sum_j lambda_j |b_j|` with
//! `lambda_j = A * sqrt(log p / n) * ||X_.j||_2 / sqrt(n)` and an
//! unpenalized intercept.

use nalgebra::{DMatrix, DVector};

use super::{fit_linear, validate_xy, FittedPredictor, PredictorPayload};
use crate::error::Result;

#[derive(Debug, Clone)]
pub struct LassoOptions {
    /// Penalty constant `A`.
    pub penalty_constant: f64,
    /// When set, `A` is chosen on a 10-point log grid by K-fold prediction
    /// error and `penalty_constant` is ignored.
    pub cv_folds: Option<usize>,
    pub max_sweeps: usize,
    pub tol: f64,
}

impl Default for LassoOptions {
    fn default() -> Self {
        Self {
            penalty_constant: 2.0,
            cv_folds: None,
            max_sweeps: 100_000,
            tol: 1e-8,
        }
    }
}

pub fn fit_lasso(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    penalty_constant: f64,
    cv_folds: Option<usize>,
) -> Result<FittedPredictor> {
    fit_lasso_with_options(
        x,
        y,
        &LassoOptions {
            penalty_constant,
            cv_folds,
            ..LassoOptions::default()
        },
    )
}

pub fn fit_lasso_with_options(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    opts: &LassoOptions,
) -> Result<FittedPredictor> {
    validate_xy(x, y)?;
    let a = match opts.cv_folds {
        Some(k) => cross_validate_a(x, y, k.max(2), opts),
        None => opts.penalty_constant,
    };
    if a == 0.0 {
        // No penalty: exact least squares.
        let m = fit_linear(x, y, 0.0)?;
        if let PredictorPayload::Linear { coef } = m.payload {
            return Ok(FittedPredictor::from_payload(PredictorPayload::Lasso {
                coef,
            }));
        }
        unreachable!();
    }
    let coef = coordinate_descent(x, y, a, opts.max_sweeps, opts.tol);
    Ok(FittedPredictor::from_payload(PredictorPayload::Lasso {
        coef,
    }))
}

fn column_penalties(x: &DMatrix<f64>, a: f64) -> Vec<f64> {
    let n = x.nrows() as f64;
    let p = x.ncols() as f64;
    let base = a * (p.max(2.0).ln() / n).sqrt();
    (0..x.ncols())
        .map(|j| base * x.column(j).norm() / n.sqrt())
        .collect()
}

/// One full objective evaluation; exposed for the monotonicity property test.
pub fn lasso_objective(x: &DMatrix<f64>, y: &DVector<f64>, a: f64, coef: &[f64]) -> f64 {
    let n = x.nrows();
    let lambda = column_penalties(x, a);
    let mut rss = 0.0;
    for i in 0..n {
        let mut pred = coef[0];
        for j in 0..x.ncols() {
            pred += coef[j + 1] * x[(i, j)];
        }
        rss += (y[i] - pred) * (y[i] - pred);
    }
    rss / (2.0 * n as f64)
        + lambda
            .iter()
            .zip(&coef[1..])
            .map(|(l, b)| l * b.abs())
            .sum::<f64>()
}

fn soft_threshold(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

fn coordinate_descent(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    a: f64,
    max_sweeps: usize,
    tol: f64,
) -> Vec<f64> {
    let n = x.nrows();
    let p = x.ncols();
    let nf = n as f64;
    let lambda = column_penalties(x, a);
    let col_sq: Vec<f64> = (0..p).map(|j| x.column(j).norm_squared() / nf).collect();
    for (j, &s) in col_sq.iter().enumerate() {
        if s == 0.0 {
            log::warn!("lasso: column {} is all zeros; coefficient fixed at 0", j + 1);
        }
    }

    let mut b0 = y.mean();
    let mut b = vec![0.0; p];
    let mut resid: DVector<f64> = y.map(|v| v - b0);

    for _ in 0..max_sweeps {
        let mut max_change = 0.0f64;

        let d0 = resid.mean();
        if d0 != 0.0 {
            b0 += d0;
            resid.add_scalar_mut(-d0);
            max_change = max_change.max(d0.abs());
        }

        for j in 0..p {
            if col_sq[j] == 0.0 {
                continue;
            }
            let col = x.column(j);
            let rho = col.dot(&resid) / nf + col_sq[j] * b[j];
            let new = soft_threshold(rho, lambda[j]) / col_sq[j];
            let delta = new - b[j];
            if delta != 0.0 {
                resid.axpy(-delta, &col.clone_owned(), 1.0);
                b[j] = new;
                max_change = max_change.max(delta.abs());
            }
        }
        if max_change < tol {
            break;
        }
    }

    let mut coef = Vec::with_capacity(p + 1);
    coef.push(b0);
    coef.extend(b);
    coef
}

/// Pick `A` on a log grid by K-fold prediction error (contiguous folds for
/// reproducibility), then return it for a full-data refit.
fn cross_validate_a(x: &DMatrix<f64>, y: &DVector<f64>, k: usize, opts: &LassoOptions) -> f64 {
    let n = x.nrows();
    let k = k.min(n);
    let grid: Vec<f64> = (0..10)
        .map(|i| 10f64.powf(-1.0 + 2.0 * i as f64 / 9.0))
        .collect();
    let mut best = (f64::INFINITY, grid[0]);
    for &a in &grid {
        let mut sse = 0.0;
        for fold in 0..k {
            let lo = fold * n / k;
            let hi = (fold + 1) * n / k;
            if hi == lo {
                continue;
            }
            let train_idx: Vec<usize> = (0..n).filter(|i| *i < lo || *i >= hi).collect();
            if train_idx.is_empty() {
                continue;
            }
            let xt = x.select_rows(train_idx.as_slice());
            let yt = y.select_rows(train_idx.as_slice());
            let coef = coordinate_descent(&xt, &yt, a, opts.max_sweeps, opts.tol.max(1e-6));
            for i in lo..hi {
                let mut pred = coef[0];
                for j in 0..x.ncols() {
                    pred += coef[j + 1] * x[(i, j)];
                }
                sse += (y[i] - pred) * (y[i] - pred);
            }
        }
        if sse < best.0 {
            best = (sse, a);
        }
    }
    best.1
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learners::predict_batch;
    use crate::seeds::rng_for;
    use crate::seeds::standard_normal;

    fn gaussian_matrix(n: usize, p: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = rng_for(seed, "lasso-test", 0);
        DMatrix::from_fn(n, p, |_, _| standard_normal(&mut rng))
    }

    #[test]
    fn huge_penalty_shrinks_all_slopes_to_zero() {
        let x = gaussian_matrix(50, 4, 1);
        let mut rng = rng_for(2, "lasso-test", 1);
        let y = DVector::from_fn(50, |_, _| standard_normal(&mut rng));
        let m = fit_lasso(&x, &y, 1e4, None).unwrap();
        let c = m.coefficients().unwrap();
        assert!((c[0] - y.mean()).abs() < 1e-10);
        for &b in &c[1..] {
            assert_eq!(b, 0.0);
        }
    }

    #[test]
    fn orthonormal_design_soft_thresholds() {
        // Columns orthogonal with ||X_j||^2 = n, signal 1 on the first
        // coordinate. Coordinate descent solves each coordinate in closed
        // form: b_1 = soft(1, lambda_1). Pick A so lambda_1 = 0.2.
        let n = 8;
        let mut x = DMatrix::zeros(n, 2);
        // Two orthogonal +-1 columns (Hadamard-style), norms sqrt(n).
        for i in 0..n {
            x[(i, 0)] = if i % 2 == 0 { 1.0 } else { -1.0 };
            x[(i, 1)] = if (i / 2) % 2 == 0 { 1.0 } else { -1.0 };
        }
        let y = x.column(0).clone_owned();
        let a = 0.2 / ((2.0f64).ln() / n as f64).sqrt();
        let m = fit_lasso(&x, &y, a, None).unwrap();
        let c = m.coefficients().unwrap();
        assert!((c[1] - 0.8).abs() < 1e-8, "{c:?}");
        assert!(c[2].abs() < 1e-8, "{c:?}");
    }

    #[test]
    fn zero_penalty_matches_least_squares() {
        let x = gaussian_matrix(40, 3, 3);
        let mut rng = rng_for(4, "lasso-test", 2);
        let y = DVector::from_fn(40, |i, _| {
            2.0 * x[(i, 0)] - x[(i, 2)] + 0.1 * standard_normal(&mut rng)
        });
        let lasso = fit_lasso(&x, &y, 0.0, None).unwrap();
        let ols = fit_linear(&x, &y, 0.0).unwrap();
        let test_x = gaussian_matrix(10, 3, 5);
        let pl = predict_batch(&lasso, &test_x).unwrap();
        let po = predict_batch(&ols, &test_x).unwrap();
        assert!((pl - po).amax() < 1e-6);
    }

    #[test]
    fn all_zero_column_stays_at_zero() {
        let mut x = gaussian_matrix(30, 3, 6);
        for i in 0..30 {
            x[(i, 1)] = 0.0;
        }
        let y = x.column(0).clone_owned();
        let m = fit_lasso(&x, &y, 0.5, None).unwrap();
        assert_eq!(m.coefficients().unwrap()[2], 0.0);
    }

    #[test]
    fn objective_decreases_across_sweeps() {
        // Run coordinate descent sweep by sweep via decreasing max_sweeps and
        // check the objective is monotone nonincreasing.
        let x = gaussian_matrix(60, 5, 7);
        let mut rng = rng_for(8, "lasso-test", 3);
        let y = DVector::from_fn(60, |i, _| {
            x[(i, 0)] + 0.5 * x[(i, 3)] + standard_normal(&mut rng)
        });
        let a = 1.0;
        let mut last = f64::INFINITY;
        for sweeps in 1..8 {
            let coef = coordinate_descent(&x, &y, a, sweeps, 0.0);
            let obj = lasso_objective(&x, &y, a, &coef);
            assert!(obj <= last + 1e-12, "sweep {sweeps}: {obj} > {last}");
            last = obj;
        }
    }

    #[test]
    fn cv_recovers_sparse_signal() {
        let x = gaussian_matrix(120, 10, 9);
        let mut rng = rng_for(10, "lasso-test", 4);
        let y = DVector::from_fn(120, |i, _| {
            1.5 * x[(i, 2)] + 0.3 * standard_normal(&mut rng)
        });
        let m = fit_lasso(&x, &y, 2.0, Some(5)).unwrap();
        let c = m.coefficients().unwrap();
        assert!((c[3] - 1.5).abs() < 0.25, "{c:?}");
    }
}
