//! Exact least-squares / ridge fits via the normal equations.

use nalgebra::{DMatrix, DVector};

use super::{validate_xy, FittedPredictor, PredictorPayload};
use crate::error::{Error, Result};

/// Minimize `sum (y - b0 - x'b)^2 + ridge * ||b||^2` (intercept unpenalized).
///
/// Solved exactly through the normal equations with a symmetric solve. With
/// `ridge = 0` and a singular Gram matrix, the minimum-norm solution is
/// returned via the eigendecomposition pseudo-inverse.
pub fn fit_linear(x: &DMatrix<f64>, y: &DVector<f64>, ridge: f64) -> Result<FittedPredictor> {
    validate_xy(x, y)?;
    if !ridge.is_finite() || ridge < 0.0 {
        return Err(Error::Fit(format!("ridge must be >= 0, got {ridge}")));
    }
    let n = x.nrows();
    let p = x.ncols();
    let mut z = DMatrix::zeros(n, p + 1);
    for i in 0..n {
        z[(i, 0)] = 1.0;
        for j in 0..p {
            z[(i, j + 1)] = x[(i, j)];
        }
    }
    let mut a = z.transpose() * &z;
    for j in 1..=p {
        a[(j, j)] += ridge;
    }
    let b = z.transpose() * y;

    let coef = match a.clone().cholesky() {
        Some(chol) => chol.solve(&b),
        None => pseudo_solve(&a, &b),
    };
    if coef.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("linear solve produced NaN/Inf".into()));
    }
    Ok(FittedPredictor::from_payload(PredictorPayload::Linear {
        coef: coef.as_slice().to_vec(),
    }))
}

/// Minimum-norm solution of `a c = b` for symmetric PSD `a`.
fn pseudo_solve(a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let eig = nalgebra::SymmetricEigen::new(a.clone());
    let lam_max = eig.eigenvalues.iter().cloned().fold(0.0f64, f64::max);
    let tol = lam_max * a.nrows() as f64 * f64::EPSILON;
    let mut coef = DVector::zeros(a.nrows());
    for (k, &lam) in eig.eigenvalues.iter().enumerate() {
        if lam > tol {
            let u = eig.eigenvectors.column(k);
            coef += u * (u.dot(b) / lam);
        }
    }
    coef
}

#[cfg(test)]
mod tests {
    use super::*;

    fn coef(m: &FittedPredictor) -> Vec<f64> {
        m.coefficients().unwrap().to_vec()
    }

    #[test]
    fn interpolates_two_points() {
        let x = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        let y = DVector::from_vec(vec![0.0, 1.0]);
        let c = coef(&fit_linear(&x, &y, 0.0).unwrap());
        assert!((c[0]).abs() < 1e-12);
        assert!((c[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_outcome_gives_intercept_only() {
        let x = DMatrix::from_row_slice(4, 2, &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 8.0]);
        let y = DVector::from_element(4, 3.25);
        let c = coef(&fit_linear(&x, &y, 0.0).unwrap());
        assert!((c[0] - 3.25).abs() < 1e-10);
        assert!(c[1].abs() < 1e-10);
        assert!(c[2].abs() < 1e-10);
    }

    // Normal equations by hand for x = (0,1,2), y = (1,2,4):
    // slope = Sxy/Sxx = 3/2, intercept = ybar - slope*xbar = 7/3 - 3/2 = 5/6.
    #[test]
    fn three_point_fit_matches_hand_solution() {
        let x = DMatrix::from_row_slice(3, 1, &[0.0, 1.0, 2.0]);
        let y = DVector::from_vec(vec![1.0, 2.0, 4.0]);
        let c = coef(&fit_linear(&x, &y, 0.0).unwrap());
        assert!((c[1] - 1.5).abs() < 1e-12, "slope {}", c[1]);
        assert!((c[0] - 5.0 / 6.0).abs() < 1e-12, "intercept {}", c[0]);
    }

    #[test]
    fn singular_design_returns_min_norm_solution() {
        // Duplicated column: infinitely many LS solutions; the minimum-norm
        // one splits the slope evenly across the two copies.
        let x = DMatrix::from_row_slice(4, 2, &[0.0, 0.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0]);
        let y = DVector::from_vec(vec![0.0, 2.0, 4.0, 6.0]);
        let c = coef(&fit_linear(&x, &y, 0.0).unwrap());
        assert!((c[1] - 1.0).abs() < 1e-8, "{c:?}");
        assert!((c[2] - 1.0).abs() < 1e-8, "{c:?}");
    }

    #[test]
    fn rejects_non_finite_input() {
        let x = DMatrix::from_row_slice(2, 1, &[0.0, f64::NAN]);
        let y = DVector::from_vec(vec![0.0, 1.0]);
        assert!(matches!(
            fit_linear(&x, &y, 0.0),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn ridge_shrinks_slopes() {
        let x = DMatrix::from_row_slice(3, 1, &[-1.0, 0.0, 1.0]);
        let y = DVector::from_vec(vec![-1.0, 0.0, 1.0]);
        let c0 = coef(&fit_linear(&x, &y, 0.0).unwrap());
        let c1 = coef(&fit_linear(&x, &y, 10.0).unwrap());
        assert!(c1[1].abs() < c0[1].abs());
        // Explicit ridge solution: slope = Sxy / (Sxx + ridge) = 2/12.
        assert!((c1[1] - 2.0 / 12.0).abs() < 1e-12);
    }
}
