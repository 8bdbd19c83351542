//! Density-ratio estimation `w(x) = dQ_X(x) / dP_X(x)` per group and split.
//!
//! The shipped estimator stacks a source half (label 0) with the target
//! covariates (label 1), fits a logistic classifier, and converts the class
//! posterior into a ratio through the Bayes formula:
//! `w(x) = (|half| / n_Q) * h(x'g) / (1 - h(x'g))` with
//! `h(z) = exp(z) / (1 + exp(z))`. An identity kind covers the
//! no-covariate-shift setting. The interface is pluggable so other
//! classifiers can substitute later; only identity and logistic ship.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::TargetSample;
use crate::error::{Error, Result};
use crate::learners::FitScope;

/// Linear predictors are clipped at this magnitude before exponentiation so
/// evaluated ratios stay bounded.
pub const LINPRED_CLIP: f64 = 30.0;

/// Coefficient norm beyond which a non-converged fit is treated as separated.
const SEPARATION_BOUND: f64 = 1e3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RatioKind {
    Identity,
    Logistic,
}

/// A positive density-ratio function estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityRatioModel {
    pub kind: RatioKind,
    /// Classifier coefficients, intercept first; absent for identity.
    pub gamma: Option<Vec<f64>>,
    /// `|split| / n_Q` prefactor.
    pub size_ratio: f64,
    pub group_id: usize,
    pub fit_scope: FitScope,
}

impl DensityRatioModel {
    /// Ratio identically equal to one (no covariate shift).
    pub fn identity(group_id: usize, fit_scope: FitScope) -> Self {
        Self {
            kind: RatioKind::Identity,
            gamma: None,
            size_ratio: 1.0,
            group_id,
            fit_scope,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.kind == RatioKind::Identity
    }

    pub fn with_group(mut self, group_id: usize) -> Self {
        self.group_id = group_id;
        self
    }

    pub fn with_scope(mut self, scope: FitScope) -> Self {
        self.fit_scope = scope;
        self
    }

    pub fn n_features(&self) -> Option<usize> {
        self.gamma.as_ref().map(|g| g.len() - 1)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Fit the Bayes-formula logistic ratio on a source half versus the full
/// target sample. `l1_penalty = 0` uses iteratively reweighted least squares;
/// a positive value switches to proximal gradient with per-column penalty
/// scaling of order `sqrt(log p / (|half| + n_Q))`.
pub fn fit_bayes_logistic(
    group_half: &DMatrix<f64>,
    target: &TargetSample,
    l1_penalty: f64,
    max_iter: usize,
) -> Result<DensityRatioModel> {
    let n_s = group_half.nrows();
    let n_q = target.n();
    if n_s == 0 {
        return Err(Error::InsufficientData(
            "ratio fit needs a non-empty source half".into(),
        ));
    }
    if group_half.ncols() != target.p() {
        return Err(Error::Shape(format!(
            "source half has {} columns, target has {}",
            group_half.ncols(),
            target.p()
        )));
    }
    let p = group_half.ncols();
    let n = n_s + n_q;

    // Stacked design with intercept column; source rows first (label 0).
    let mut z = DMatrix::zeros(n, p + 1);
    let mut labels = DVector::zeros(n);
    for i in 0..n_s {
        z[(i, 0)] = 1.0;
        for j in 0..p {
            z[(i, j + 1)] = group_half[(i, j)];
        }
    }
    for i in 0..n_q {
        z[(n_s + i, 0)] = 1.0;
        for j in 0..p {
            z[(n_s + i, j + 1)] = target.covariates()[(i, j)];
        }
        labels[n_s + i] = 1.0;
    }

    let gamma = if l1_penalty > 0.0 {
        proximal_logistic(&z, &labels, l1_penalty, max_iter)
    } else {
        irls_logistic(&z, &labels, max_iter)
    };

    Ok(DensityRatioModel {
        kind: RatioKind::Logistic,
        gamma: Some(gamma),
        size_ratio: n_s as f64 / n_q as f64,
        group_id: 0,
        fit_scope: FitScope::Full,
    })
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn clip_if_separated(gamma: &mut DVector<f64>, converged: bool) {
    let norm = gamma.norm();
    if !converged && norm > SEPARATION_BOUND {
        log::warn!(
            "logistic ratio fit looks separated (||gamma|| = {norm:.3e}); clipping to trust bound"
        );
        *gamma *= SEPARATION_BOUND / norm;
    }
}

fn irls_logistic(z: &DMatrix<f64>, labels: &DVector<f64>, max_iter: usize) -> Vec<f64> {
    let n = z.nrows();
    let d = z.ncols();
    let mut gamma = DVector::zeros(d);
    let mut converged = false;
    for _ in 0..max_iter.max(1) {
        let lin = z * &gamma;
        let mut grad = DVector::zeros(d);
        let mut hess = DMatrix::zeros(d, d);
        for i in 0..n {
            let p_i = sigmoid(lin[i]);
            let w = (p_i * (1.0 - p_i)).max(1e-10);
            let r = labels[i] - p_i;
            for a in 0..d {
                grad[a] += z[(i, a)] * r;
                for b in a..d {
                    hess[(a, b)] += w * z[(i, a)] * z[(i, b)];
                }
            }
        }
        for a in 0..d {
            for b in 0..a {
                hess[(a, b)] = hess[(b, a)];
            }
            hess[(a, a)] += 1e-10;
        }
        let step = match hess.cholesky() {
            Some(ch) => ch.solve(&grad),
            None => break,
        };
        gamma += &step;
        if step.amax() < 1e-8 {
            converged = true;
            break;
        }
        if gamma.norm() > SEPARATION_BOUND {
            break;
        }
    }
    clip_if_separated(&mut gamma, converged);
    gamma.as_slice().to_vec()
}

/// Proximal gradient on the mean negative log-likelihood with per-column
/// penalties `l1_penalty * sqrt(log p / n) * ||Z_j||_2 / sqrt(n)`
/// (intercept unpenalized).
fn proximal_logistic(
    z: &DMatrix<f64>,
    labels: &DVector<f64>,
    l1_penalty: f64,
    max_iter: usize,
) -> Vec<f64> {
    let n = z.nrows();
    let d = z.ncols();
    let nf = n as f64;
    let p = (d - 1).max(2) as f64;
    let base = l1_penalty * (p.ln() / nf).sqrt();
    let lambda: Vec<f64> = (0..d)
        .map(|j| {
            if j == 0 {
                0.0
            } else {
                base * z.column(j).norm() / nf.sqrt()
            }
        })
        .collect();

    // Lipschitz bound for the mean-NLL gradient: ||Z||_F^2 / (4n).
    let lip = z.norm_squared() / (4.0 * nf);
    let step = 1.0 / lip.max(1e-12);

    let mut gamma = DVector::zeros(d);
    let mut converged = false;
    for _ in 0..max_iter.max(1) {
        let lin = z * &gamma;
        let probs = lin.map(sigmoid);
        let grad = z.transpose() * (probs - labels) / nf;
        let mut next = &gamma - step * grad;
        for j in 1..d {
            let t = step * lambda[j];
            next[j] = if next[j] > t {
                next[j] - t
            } else if next[j] < -t {
                next[j] + t
            } else {
                0.0
            };
        }
        let change = (&next - &gamma).amax();
        gamma = next;
        if change < 1e-8 {
            converged = true;
            break;
        }
    }
    clip_if_separated(&mut gamma, converged);
    gamma.as_slice().to_vec()
}

/// Evaluate the ratio on the rows of `x`: identity returns all ones, the
/// logistic kind applies `size_ratio * exp(clip(x'gamma))`.
pub fn eval_ratio(model: &DensityRatioModel, x: &DMatrix<f64>) -> Result<DVector<f64>> {
    match model.kind {
        RatioKind::Identity => Ok(DVector::from_element(x.nrows(), 1.0)),
        RatioKind::Logistic => {
            let gamma = model
                .gamma
                .as_ref()
                .ok_or_else(|| Error::Invariant("logistic ratio without coefficients".into()))?;
            if x.ncols() + 1 != gamma.len() {
                return Err(Error::Shape(format!(
                    "ratio expects {} features, input has {} columns",
                    gamma.len() - 1,
                    x.ncols()
                )));
            }
            let mut out = DVector::zeros(x.nrows());
            for i in 0..x.nrows() {
                let mut lin = gamma[0];
                for j in 0..x.ncols() {
                    lin += gamma[j + 1] * x[(i, j)];
                }
                // h(z) / (1 - h(z)) = exp(z), clipped for boundedness.
                out[i] = model.size_ratio * lin.clamp(-LINPRED_CLIP, LINPRED_CLIP).exp();
            }
            Ok(out)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeds::{rng_for, standard_normal};

    fn gaussian(n: usize, p: usize, mean: f64, seed: u64) -> DMatrix<f64> {
        let mut rng = rng_for(seed, "ratio-test", 0);
        DMatrix::from_fn(n, p, |_, _| mean + standard_normal(&mut rng))
    }

    #[test]
    fn identity_is_one_everywhere() {
        let m = DensityRatioModel::identity(1, FitScope::HalfA);
        let x = gaussian(20, 3, 0.0, 1);
        let r = eval_ratio(&m, &x).unwrap();
        assert!(r.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn intercept_only_model_scales_by_exp() {
        let m = DensityRatioModel {
            kind: RatioKind::Logistic,
            gamma: Some(vec![3.0f64.ln(), 0.0]),
            size_ratio: 1.0,
            group_id: 1,
            fit_scope: FitScope::HalfA,
        };
        let x = gaussian(10, 1, 0.0, 2);
        let r = eval_ratio(&m, &x).unwrap();
        for v in r.iter() {
            assert!((v - 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn size_ratio_prefactor_scales() {
        let m = DensityRatioModel {
            kind: RatioKind::Logistic,
            gamma: Some(vec![0.0, 0.0]),
            size_ratio: 0.5,
            group_id: 1,
            fit_scope: FitScope::HalfB,
        };
        let x = gaussian(5, 1, 0.0, 3);
        let r = eval_ratio(&m, &x).unwrap();
        for v in r.iter() {
            assert!((v - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn identical_distributions_give_ratio_near_one() {
        let n = 2000;
        let source = gaussian(n, 2, 0.0, 4);
        let target = TargetSample::new(gaussian(n, 2, 0.0, 5)).unwrap();
        let m = fit_bayes_logistic(&source, &target, 0.0, 100).unwrap();
        assert!((m.size_ratio - 1.0).abs() < 1e-12);
        let probe = gaussian(200, 2, 0.0, 6);
        let r = eval_ratio(&m, &probe).unwrap();
        let worst = r.iter().map(|v| (v - 1.0).abs()).fold(0.0, f64::max);
        assert!(worst < 0.2, "max |ratio - 1| = {worst}");
    }

    #[test]
    fn gaussian_mean_shift_recovers_linear_log_ratio() {
        // P = N(0,1), Q = N(1,1): w(x) = exp(x - 1/2), so the logistic slope
        // converges to 1.
        let n = 5000;
        let source = gaussian(n, 1, 0.0, 7);
        let target = TargetSample::new(gaussian(n, 1, 1.0, 8)).unwrap();
        let m = fit_bayes_logistic(&source, &target, 0.0, 200).unwrap();
        let g = m.gamma.clone().unwrap();
        assert!((g[1] - 1.0).abs() < 0.15, "fitted slope {}", g[1]);
        // And the evaluated ratio tracks the analytic exp(x - 1/2).
        let probe = DMatrix::from_row_slice(3, 1, &[-1.0, 0.0, 1.0]);
        let r = eval_ratio(&m, &probe).unwrap();
        for (i, &xv) in [-1.0f64, 0.0, 1.0].iter().enumerate() {
            let truth = (xv - 0.5f64).exp();
            assert!(
                (r[i] / truth - 1.0).abs() < 0.25,
                "ratio at {xv}: {} vs {truth}",
                r[i]
            );
        }
    }

    #[test]
    fn monotone_in_linear_predictor() {
        let m = DensityRatioModel {
            kind: RatioKind::Logistic,
            gamma: Some(vec![0.3, 2.0]),
            size_ratio: 1.0,
            group_id: 1,
            fit_scope: FitScope::HalfA,
        };
        let x = DMatrix::from_row_slice(4, 1, &[-2.0, -0.5, 0.1, 3.0]);
        let r = eval_ratio(&m, &x).unwrap();
        for w in r.as_slice().windows(2) {
            assert!(w[0] < w[1]);
        }
    }

    #[test]
    fn extreme_linear_predictor_is_clipped() {
        let m = DensityRatioModel {
            kind: RatioKind::Logistic,
            gamma: Some(vec![0.0, 100.0]),
            size_ratio: 1.0,
            group_id: 1,
            fit_scope: FitScope::HalfA,
        };
        let x = DMatrix::from_row_slice(2, 1, &[50.0, -50.0]);
        let r = eval_ratio(&m, &x).unwrap();
        assert!((r[0] - LINPRED_CLIP.exp()).abs() < 1e-6);
        assert!(r[1] > 0.0);
    }

    #[test]
    fn penalized_fit_shrinks_noise_slopes() {
        let n = 800;
        let source = gaussian(n, 6, 0.0, 9);
        let mut shifted = gaussian(n, 6, 0.0, 10);
        for i in 0..n {
            shifted[(i, 0)] += 1.0;
        }
        let target = TargetSample::new(shifted).unwrap();
        let m = fit_bayes_logistic(&source, &target, 2.0, 4000).unwrap();
        let g = m.gamma.clone().unwrap();
        assert!(g[1] > 0.2, "signal slope survived: {g:?}");
        for j in 2..=6 {
            assert!(g[j].abs() < 0.15, "noise slope {j}: {}", g[j]);
        }
    }

    #[test]
    fn separated_classes_are_clipped_not_divergent() {
        // Perfectly separable in one dimension.
        let source = DMatrix::from_fn(50, 1, |i, _| -1.0 - (i as f64) * 0.01);
        let target =
            TargetSample::new(DMatrix::from_fn(50, 1, |i, _| 1.0 + (i as f64) * 0.01)).unwrap();
        let m = fit_bayes_logistic(&source, &target, 0.0, 500).unwrap();
        let g = DVector::from_vec(m.gamma.clone().unwrap());
        assert!(g.norm() <= SEPARATION_BOUND * (1.0 + 1e-9));
        let r = eval_ratio(&m, &DMatrix::from_row_slice(1, 1, &[0.0])).unwrap();
        assert!(r[0].is_finite() && r[0] > 0.0);
    }
}
