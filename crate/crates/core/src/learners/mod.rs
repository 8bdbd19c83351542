//! Per-group conditional-mean estimators behind a uniform predictor
//! abstraction. Three kinds ship: exact ridge/OLS, coordinate-descent lasso,
//! and bagged CART regression forests.

mod forest;
mod lasso;
mod linear;

pub use forest::{fit_forest, ForestOptions, Tree, TreeNode};
pub use lasso::{fit_lasso, fit_lasso_with_options, lasso_objective, LassoOptions};
pub use linear::fit_linear;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which data a model was fitted on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Hash)]
#[serde(rename_all = "snake_case")]
pub enum FitScope {
    Full,
    HalfA,
    HalfB,
}

/// Kind-specific parameters of a fitted model.
///
/// Linear and lasso payloads are coefficient vectors of length `p + 1` with
/// the intercept first; forest payloads store flat node arrays per tree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload", rename_all = "snake_case")]
pub enum PredictorPayload {
    Linear { coef: Vec<f64> },
    Lasso { coef: Vec<f64> },
    Forest { n_features: usize, trees: Vec<Tree> },
}

/// An immutable fitted regression function `x -> real`.
///
/// Prediction is a pure deterministic function of the input row. The JSON
/// form is versioned and round-trips to bit-identical predictions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedPredictor {
    #[serde(default = "default_version")]
    pub version: u32,
    pub group_id: usize,
    pub fit_scope: FitScope,
    #[serde(flatten)]
    pub payload: PredictorPayload,
}

fn default_version() -> u32 {
    1
}

impl FittedPredictor {
    pub(crate) fn from_payload(payload: PredictorPayload) -> Self {
        Self {
            version: 1,
            group_id: 0,
            fit_scope: FitScope::Full,
            payload,
        }
    }

    pub fn with_group(mut self, group_id: usize) -> Self {
        self.group_id = group_id;
        self
    }

    pub fn with_scope(mut self, scope: FitScope) -> Self {
        self.fit_scope = scope;
        self
    }

    /// Number of input features the model expects.
    pub fn n_features(&self) -> usize {
        match &self.payload {
            PredictorPayload::Linear { coef } | PredictorPayload::Lasso { coef } => coef.len() - 1,
            PredictorPayload::Forest { n_features, .. } => *n_features,
        }
    }

    /// Coefficient vector (intercept first) for linear-family models.
    pub fn coefficients(&self) -> Option<&[f64]> {
        match &self.payload {
            PredictorPayload::Linear { coef } | PredictorPayload::Lasso { coef } => Some(coef),
            PredictorPayload::Forest { .. } => None,
        }
    }

    pub fn predict_row(&self, row: &[f64]) -> f64 {
        match &self.payload {
            PredictorPayload::Linear { coef } | PredictorPayload::Lasso { coef } => {
                let mut v = coef[0];
                for (j, x) in row.iter().enumerate() {
                    v += coef[j + 1] * x;
                }
                v
            }
            PredictorPayload::Forest { trees, .. } => {
                let mut s = 0.0;
                for t in trees {
                    s += t.predict_row(row);
                }
                s / trees.len() as f64
            }
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let p: FittedPredictor = serde_json::from_str(s)?;
        if p.version != 1 {
            return Err(Error::Schema(format!(
                "unsupported predictor version {}",
                p.version
            )));
        }
        Ok(p)
    }
}

/// Elementwise application of the fitted function to the rows of `x`.
pub fn predict_batch(model: &FittedPredictor, x: &DMatrix<f64>) -> Result<DVector<f64>> {
    if x.ncols() != model.n_features() {
        return Err(Error::Shape(format!(
            "predictor expects {} features, input has {} columns",
            model.n_features(),
            x.ncols()
        )));
    }
    let mut out = DVector::zeros(x.nrows());
    let mut row = vec![0.0; x.ncols()];
    for i in 0..x.nrows() {
        for c in 0..x.ncols() {
            row[c] = x[(i, c)];
        }
        out[i] = model.predict_row(&row);
    }
    Ok(out)
}

/// Declarative learner choice used by the pipeline and the CLI.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LearnerSpec {
    Linear {
        #[serde(default)]
        ridge: f64,
    },
    Lasso {
        #[serde(default = "default_penalty_constant")]
        penalty_constant: f64,
        #[serde(default)]
        cv_folds: Option<usize>,
    },
    Forest {
        #[serde(default = "default_n_trees")]
        n_trees: usize,
        #[serde(default)]
        mtry: Option<usize>,
        #[serde(default = "default_min_leaf")]
        min_leaf: usize,
        #[serde(default)]
        oob_tune: bool,
    },
}

fn default_penalty_constant() -> f64 {
    2.0
}

fn default_n_trees() -> usize {
    200
}

fn default_min_leaf() -> usize {
    5
}

impl LearnerSpec {
    pub fn linear() -> Self {
        LearnerSpec::Linear { ridge: 0.0 }
    }

    pub fn lasso() -> Self {
        LearnerSpec::Lasso {
            penalty_constant: default_penalty_constant(),
            cv_folds: None,
        }
    }

    pub fn forest() -> Self {
        LearnerSpec::Forest {
            n_trees: default_n_trees(),
            mtry: None,
            min_leaf: default_min_leaf(),
            oob_tune: false,
        }
    }

    /// Fit this learner on `(x, y)`. `seed` drives forest randomness only.
    pub fn fit(&self, x: &DMatrix<f64>, y: &DVector<f64>, seed: u64) -> Result<FittedPredictor> {
        match self {
            LearnerSpec::Linear { ridge } => fit_linear(x, y, *ridge),
            LearnerSpec::Lasso {
                penalty_constant,
                cv_folds,
            } => fit_lasso(x, y, *penalty_constant, *cv_folds),
            LearnerSpec::Forest {
                n_trees,
                mtry,
                min_leaf,
                oob_tune,
            } => {
                let mut opts = ForestOptions::defaults(x.ncols(), seed);
                opts.n_trees = *n_trees;
                if let Some(m) = mtry {
                    opts.mtry = *m;
                }
                opts.min_leaf = *min_leaf;
                opts.oob_tune = *oob_tune;
                fit_forest(x, y, &opts)
            }
        }
    }
}

pub(crate) fn validate_xy(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<()> {
    if x.nrows() == 0 {
        return Err(Error::InsufficientData("empty design matrix".into()));
    }
    if x.nrows() != y.len() {
        return Err(Error::Shape(format!(
            "{} rows but {} outcomes",
            x.nrows(),
            y.len()
        )));
    }
    if x.iter().any(|v| !v.is_finite()) || y.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("fit input contains NaN or Inf".into()));
    }
    Ok(())
}
