//! Estimation of the cross-model Gram matrix
//! `Gamma_{k,l} = E_{Q_X}[f^(k)(X) f^(l)(X)]`.
//!
//! Two routes ship: the plug-in sample average of fitted-model products on
//! the target covariates, and a cross-fitted bias-corrected estimator that
//! subtracts density-ratio-weighted residual-product terms computed on the
//! complementary half of each source group, averaged over the two split
//! roles.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{Half, SourceGroup, TargetSample};
use crate::error::{Error, Result};
use crate::learners::{predict_batch, FitScope, FittedPredictor};
use crate::ratio::{eval_ratio, DensityRatioModel};

/// Row-major nested-array JSON form for dense matrices.
pub(crate) mod mat_serde {
    use nalgebra::DMatrix;
    use serde::de::Error as _;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<Vec<f64>> = (0..m.nrows())
            .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
            .collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let rows: Vec<Vec<f64>> = Vec::deserialize(d)?;
        let nrows = rows.len();
        let ncols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != ncols) {
            return Err(D::Error::custom("ragged matrix rows"));
        }
        let flat: Vec<f64> = rows.into_iter().flatten().collect();
        Ok(DMatrix::from_row_slice(nrows, ncols, &flat))
    }
}

/// How a Gram matrix estimate was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Plugin,
    BiasCorrectedNoshift,
    BiasCorrectedShift,
}

/// L x L symmetric matrix of target-weighted cross-model inner products.
/// Symmetry is enforced by construction: entry (l,k) is copied from (k,l)
/// for k <= l.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GammaMatrix {
    #[serde(with = "mat_serde")]
    values: DMatrix<f64>,
    provenance: Provenance,
    psd_repaired: bool,
}

impl GammaMatrix {
    /// Wrap a raw matrix, mirroring the upper triangle onto the lower.
    pub fn from_upper(mut values: DMatrix<f64>, provenance: Provenance) -> Result<Self> {
        if values.nrows() != values.ncols() {
            return Err(Error::Shape("Gamma matrix must be square".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("Gamma matrix has NaN/Inf entries".into()));
        }
        for k in 0..values.nrows() {
            for l in k..values.ncols() {
                values[(l, k)] = values[(k, l)];
            }
        }
        Ok(Self {
            values,
            provenance,
            psd_repaired: false,
        })
    }

    pub fn l(&self) -> usize {
        self.values.nrows()
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn psd_repaired(&self) -> bool {
        self.psd_repaired
    }

    /// Smallest and largest eigenvalues (symmetric eigendecomposition).
    pub fn eigen_range(&self) -> (f64, f64) {
        let eig = nalgebra::SymmetricEigen::new(self.values.clone());
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &v in eig.eigenvalues.iter() {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        (lo, hi)
    }
}

/// Cross-fitted bias-term matrix; entry (k,l) averages
/// `w_l(X_i) * f_k(X_i) * (f_l(X_i) - Y_i)` over the evaluation half of
/// group l. Not symmetric in general.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasTermMatrix {
    #[serde(with = "mat_serde")]
    values: DMatrix<f64>,
    split_scope: FitScope,
}

impl BiasTermMatrix {
    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn split_scope(&self) -> FitScope {
        self.split_scope
    }

    /// Assemble a matrix from per-group columns (the federated layout).
    pub fn from_columns(columns: Vec<Vec<f64>>, split_scope: FitScope) -> Result<Self> {
        let l = columns.len();
        if columns.iter().any(|c| c.len() != l) {
            return Err(Error::Shape("bias-term columns must have length L".into()));
        }
        let mut values = DMatrix::zeros(l, l);
        for (li, col) in columns.iter().enumerate() {
            for (ki, &v) in col.iter().enumerate() {
                values[(ki, li)] = v;
            }
        }
        Ok(Self {
            values,
            split_scope,
        })
    }
}

fn check_bundle(
    predictors: &[FittedPredictor],
    data_p: usize,
    scope: Option<FitScope>,
) -> Result<()> {
    if predictors.is_empty() {
        return Err(Error::Shape("need at least one predictor".into()));
    }
    for m in predictors {
        if m.n_features() != data_p {
            return Err(Error::Shape(format!(
                "predictor for group {} expects {} features, data has {data_p}",
                m.group_id,
                m.n_features()
            )));
        }
        if let Some(s) = scope {
            if m.fit_scope != s && m.fit_scope != FitScope::Full {
                return Err(Error::Invariant(format!(
                    "predictor for group {} has scope {:?}, expected {:?} (or full in no-split mode)",
                    m.group_id, m.fit_scope, s
                )));
            }
        }
    }
    Ok(())
}

/// Gram matrix of prediction columns: entry (k,l) = mean_j P[j,k] * P[j,l].
fn prediction_gram(preds: &[DVector<f64>]) -> DMatrix<f64> {
    let l = preds.len();
    let n = preds[0].len() as f64;
    let mut g = DMatrix::zeros(l, l);
    for k in 0..l {
        for m in k..l {
            let mut acc = 0.0;
            for j in 0..preds[k].len() {
                acc += preds[k][j] * preds[m][j];
            }
            g[(k, m)] = acc / n;
        }
    }
    g
}

/// Plug-in estimator: `(1/n_Q) sum_j f_k(X_j) f_l(X_j)` on the target sample.
pub fn plugin_gamma(predictors: &[FittedPredictor], target: &TargetSample) -> Result<GammaMatrix> {
    check_bundle(predictors, target.p(), None)?;
    let preds: Vec<DVector<f64>> = predictors
        .iter()
        .map(|m| predict_batch(m, target.covariates()))
        .collect::<Result<_>>()?;
    GammaMatrix::from_upper(prediction_gram(&preds), Provenance::Plugin)
}

/// One column of the bias-term matrix: `D_{k,l}` for all k at fixed l,
/// evaluated on the given half of group l (the half complementary to the
/// predictors' fit scope). This is also the unit of work a source site
/// performs in the federated protocol.
pub fn bias_term_column(
    predictors_half: &[FittedPredictor],
    group: &SourceGroup,
    ratio: &DensityRatioModel,
    eval_half: Half,
) -> Result<Vec<f64>> {
    let (x_eval, y_eval) = group.half(eval_half);
    if x_eval.nrows() == 0 {
        return Err(Error::Estimation(format!(
            "group {} has an empty evaluation half",
            group.group_id()
        )));
    }
    let l_idx = group.group_id() - 1;
    if l_idx >= predictors_half.len() {
        return Err(Error::Shape(format!(
            "group id {} exceeds predictor bundle of size {}",
            group.group_id(),
            predictors_half.len()
        )));
    }
    let w = eval_ratio(ratio, &x_eval)?;
    let own = predict_batch(&predictors_half[l_idx], &x_eval)?;
    let resid = &own - &y_eval;
    let n = x_eval.nrows();
    let mut col = Vec::with_capacity(predictors_half.len());
    for m in predictors_half {
        let fk = predict_batch(m, &x_eval)?;
        let mut acc = 0.0;
        for i in 0..n {
            acc += w[i] * fk[i] * resid[i];
        }
        col.push(acc / n as f64);
    }
    Ok(col)
}

/// Full bias-term matrix for one split scope. For scope `half_a` the models
/// were fitted on the A halves and every column l is evaluated on `B_l`
/// (and vice versa for `half_b`). Identity ratios reproduce the no-shift
/// formula exactly.
pub fn bias_terms(
    predictors_half: &[FittedPredictor],
    groups: &[SourceGroup],
    ratios_half: &[DensityRatioModel],
    scope: FitScope,
) -> Result<BiasTermMatrix> {
    let eval_half = match scope {
        FitScope::HalfA => Half::B,
        FitScope::HalfB => Half::A,
        FitScope::Full => {
            return Err(Error::Invariant(
                "bias terms need a half scope (half_a or half_b)".into(),
            ))
        }
    };
    let l = groups.len();
    if predictors_half.len() != l || ratios_half.len() != l {
        return Err(Error::Shape(format!(
            "expected {l} predictors and ratios, got {} and {}",
            predictors_half.len(),
            ratios_half.len()
        )));
    }
    check_bundle(predictors_half, groups[0].p(), Some(scope))?;
    let mut columns = Vec::with_capacity(l);
    for (li, g) in groups.iter().enumerate() {
        columns.push(bias_term_column(
            predictors_half,
            g,
            &ratios_half[li],
            eval_half,
        )?);
    }
    BiasTermMatrix::from_columns(columns, scope)
}

/// Bias-corrected Gram estimate together with its per-scope bias terms.
pub struct BiasCorrectedParts {
    pub gamma: GammaMatrix,
    pub bias_a: BiasTermMatrix,
    pub bias_b: BiasTermMatrix,
}

/// Assemble the bias-corrected matrix from precomputed plug-in grams and
/// bias terms: `G^s_{k,l} = Gplug^s_{k,l} - D^s_{k,l} - D^s_{l,k}`, averaged
/// over the two scopes for k <= l and mirrored.
pub fn assemble_bias_corrected(
    plug_a: &DMatrix<f64>,
    plug_b: &DMatrix<f64>,
    bias_a: &BiasTermMatrix,
    bias_b: &BiasTermMatrix,
    provenance: Provenance,
) -> Result<GammaMatrix> {
    let l = plug_a.nrows();
    let mut values = DMatrix::zeros(l, l);
    for k in 0..l {
        for m in k..l {
            let corrected_a = plug_a[(k, m)] - bias_a.values[(k, m)] - bias_a.values[(m, k)];
            let corrected_b = plug_b[(k, m)] - bias_b.values[(k, m)] - bias_b.values[(m, k)];
            values[(k, m)] = 0.5 * (corrected_a + corrected_b);
        }
    }
    GammaMatrix::from_upper(values, provenance)
}

/// Cross-fitted bias-corrected estimator built from A- and B-scope model
/// bundles. Returns the matrix plus the bias terms for diagnostics.
pub fn bias_corrected_gamma_parts(
    predictors_a: &[FittedPredictor],
    predictors_b: &[FittedPredictor],
    groups: &[SourceGroup],
    ratios_a: &[DensityRatioModel],
    ratios_b: &[DensityRatioModel],
    target: &TargetSample,
) -> Result<BiasCorrectedParts> {
    check_bundle(predictors_a, target.p(), Some(FitScope::HalfA))?;
    check_bundle(predictors_b, target.p(), Some(FitScope::HalfB))?;
    let preds_a: Vec<DVector<f64>> = predictors_a
        .iter()
        .map(|m| predict_batch(m, target.covariates()))
        .collect::<Result<_>>()?;
    let preds_b: Vec<DVector<f64>> = predictors_b
        .iter()
        .map(|m| predict_batch(m, target.covariates()))
        .collect::<Result<_>>()?;
    let plug_a = prediction_gram(&preds_a);
    let plug_b = prediction_gram(&preds_b);
    let bias_a = bias_terms(predictors_a, groups, ratios_a, FitScope::HalfA)?;
    let bias_b = bias_terms(predictors_b, groups, ratios_b, FitScope::HalfB)?;

    let shift = ratios_a
        .iter()
        .chain(ratios_b.iter())
        .any(|r| !r.is_identity());
    let provenance = if shift {
        Provenance::BiasCorrectedShift
    } else {
        Provenance::BiasCorrectedNoshift
    };
    let gamma = assemble_bias_corrected(&plug_a, &plug_b, &bias_a, &bias_b, provenance)?;
    Ok(BiasCorrectedParts {
        gamma,
        bias_a,
        bias_b,
    })
}

/// As [`bias_corrected_gamma_parts`] but returning only the matrix.
pub fn bias_corrected_gamma(
    predictors_a: &[FittedPredictor],
    predictors_b: &[FittedPredictor],
    groups: &[SourceGroup],
    ratios_a: &[DensityRatioModel],
    ratios_b: &[DensityRatioModel],
    target: &TargetSample,
) -> Result<GammaMatrix> {
    Ok(bias_corrected_gamma_parts(
        predictors_a,
        predictors_b,
        groups,
        ratios_a,
        ratios_b,
        target,
    )?
    .gamma)
}

/// Clip negative eigenvalues to zero and add `ridge` to the diagonal. A
/// finite-sample bias-corrected Gamma can be indefinite even though the
/// population matrix is PSD; the weight solver requires convexity. No-op
/// when the input is already PSD and `ridge = 0`.
pub fn psd_repair(gamma: &GammaMatrix, ridge: f64) -> GammaMatrix {
    let eig = nalgebra::SymmetricEigen::new(gamma.values.clone());
    let lam_max = eig.eigenvalues.iter().cloned().fold(0.0f64, f64::max);
    let tol = -1e-14 * lam_max.max(1.0);
    let needs_clip = eig.eigenvalues.iter().any(|&v| v < tol);
    if !needs_clip && ridge == 0.0 {
        return gamma.clone();
    }
    let mut values = if needs_clip {
        let clipped = eig.eigenvalues.map(|v| v.max(0.0));
        let mut rec =
            &eig.eigenvectors * DMatrix::from_diagonal(&clipped) * eig.eigenvectors.transpose();
        for k in 0..rec.nrows() {
            for l in k..rec.ncols() {
                rec[(l, k)] = rec[(k, l)];
            }
        }
        rec
    } else {
        gamma.values.clone()
    };
    for i in 0..values.nrows() {
        values[(i, i)] += ridge;
    }
    GammaMatrix {
        values,
        provenance: gamma.provenance,
        psd_repaired: true,
    }
}
