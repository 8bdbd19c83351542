//! Seeded scenario generators and experiment drivers.
//!
//! Three designs ship, all with standard-normal covariates and unit Gaussian
//! noise:
//! - `interaction`: p = 5, linear terms plus centered pairwise products,
//!   coefficients drawn from {0.4, 0.2, 0} with probabilities (0.3, 0.4, 0.3);
//! - `indicator`: p = 4, threshold main effects and interactions plus
//!   window terms, coefficients uniform over {8, 1.6, 0, -4};
//! - `highdim_shared`: p = 200, a shared base slope of 0.5 on the first ten
//!   coordinates plus group-specific N(0,1) slopes on coordinates 11..13.
//!
//! Every generator is bit-reproducible from its seed. Truth handles expose
//! the exact conditional means for oracle checks.

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{MixtureSpec, SourceGroup, TargetSample};
use crate::drl::{fit_drl, fit_erm, fit_plugin_drl, fit_sq_dro_l2, FitConfig, ShiftMode, SplitMode};
use crate::error::{Error, Result};
use crate::eval::{empirical_reward, LabeledSampler};
use crate::gamma::{psd_repair, GammaMatrix, Provenance};
use crate::learners::{predict_batch, LearnerSpec};
use crate::seeds::{derive_seed, rng_for, standard_normal};
use crate::weights::{solve_weights, UncertaintySet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Design {
    Interaction,
    Indicator,
    HighdimShared,
}

impl Design {
    pub fn p(&self) -> usize {
        match self {
            Design::Interaction => 5,
            Design::Indicator => 4,
            Design::HighdimShared => 200,
        }
    }
}

/// How the source sample is apportioned across groups.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GroupSizes {
    PerGroup { n: usize },
    Mixture { q_sou: MixtureSpec, n_total: usize },
}

impl GroupSizes {
    /// Deterministic largest-remainder apportionment.
    pub fn sizes(&self, l: usize) -> Result<Vec<usize>> {
        match self {
            GroupSizes::PerGroup { n } => Ok(vec![*n; l]),
            GroupSizes::Mixture { q_sou, n_total } => {
                if q_sou.len() != l {
                    return Err(Error::Shape(format!(
                        "mixture weight length {} but {l} groups",
                        q_sou.len()
                    )));
                }
                let mut sizes: Vec<usize> = q_sou
                    .weights()
                    .iter()
                    .map(|w| (w * *n_total as f64).floor() as usize)
                    .collect();
                let mut rem: Vec<(f64, usize)> = q_sou
                    .weights()
                    .iter()
                    .enumerate()
                    .map(|(i, w)| (w * *n_total as f64 - sizes[i] as f64, i))
                    .collect();
                rem.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
                let deficit = n_total - sizes.iter().sum::<usize>();
                for k in 0..deficit {
                    sizes[rem[k % l].1] += 1;
                }
                Ok(sizes)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub design: Design,
    pub l_groups: usize,
    pub group_sizes: GroupSizes,
    pub n_q: usize,
    pub seed: u64,
    /// Scale of per-group covariate mean shifts; `None` keeps every source
    /// covariate law equal to the target law.
    pub covariate_shift: Option<f64>,
    /// Degenerate draw mode: every coefficient forced to zero.
    #[serde(default)]
    pub zero_coefficients: bool,
}

/// Exact conditional mean of one group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "design", rename_all = "snake_case")]
pub enum TruthModel {
    Interaction {
        alpha: Vec<f64>,
        beta: Vec<f64>,
    },
    Indicator {
        alpha: Vec<f64>,
        beta: Vec<f64>,
        gamma: Vec<f64>,
    },
    HighdimShared {
        hetero: Vec<f64>,
    },
}

/// Upper-triangle pair order used for interaction-style coefficients:
/// (0,0), (0,1), ..., (0,p-1), (1,1), ...
fn pair_count(p: usize) -> usize {
    p * (p + 1) / 2
}

impl TruthModel {
    pub fn eval_row(&self, x: &[f64]) -> f64 {
        match self {
            TruthModel::Interaction { alpha, beta } => {
                let p = alpha.len();
                let mut v = 0.0;
                for j in 0..p {
                    v += alpha[j] * x[j];
                }
                let mut idx = 0;
                for j in 0..p {
                    for k in j..p {
                        let center = if j == k { 1.0 } else { 0.0 };
                        v += beta[idx] * (x[j] * x[k] - center);
                        idx += 1;
                    }
                }
                v
            }
            TruthModel::Indicator { alpha, beta, gamma } => {
                let p = alpha.len();
                let ind: Vec<f64> = x.iter().map(|&v| if v > 0.0 { 1.0 } else { 0.0 }).collect();
                let mut v = 0.0;
                for j in 0..p {
                    v += alpha[j] * ind[j];
                }
                let mut idx = 0;
                for j in 0..p {
                    for k in j..p {
                        v += beta[idx] * ind[j] * ind[k];
                        let lo = if x[j] < 2.0 { 1.0 } else { 0.0 };
                        let hi = if x[k] > -2.0 { 1.0 } else { 0.0 };
                        v -= gamma[idx] * lo * hi;
                        idx += 1;
                    }
                }
                v
            }
            TruthModel::HighdimShared { hetero } => {
                let mut v = 0.0;
                for j in 0..10 {
                    v += 0.5 * x[j];
                }
                for (j, h) in hetero.iter().enumerate() {
                    v += h * x[10 + j];
                }
                v
            }
        }
    }

    pub fn eval_batch(&self, x: &DMatrix<f64>) -> DVector<f64> {
        let mut row = vec![0.0; x.ncols()];
        DVector::from_fn(x.nrows(), |i, _| {
            for c in 0..x.ncols() {
                row[c] = x[(i, c)];
            }
            self.eval_row(&row)
        })
    }

    /// Full slope vector for designs that are linear in x.
    pub fn slope_vector(&self, p: usize) -> Option<Vec<f64>> {
        match self {
            TruthModel::HighdimShared { hetero } => {
                let mut v = vec![0.0; p];
                for s in v.iter_mut().take(10) {
                    *s = 0.5;
                }
                for (j, h) in hetero.iter().enumerate() {
                    v[10 + j] = *h;
                }
                Some(v)
            }
            _ => None,
        }
    }
}

fn draw_interaction_coef(rng: &mut ChaCha8Rng) -> f64 {
    let u: f64 = rng.random();
    if u < 0.3 {
        0.4
    } else if u < 0.7 {
        0.2
    } else {
        0.0
    }
}

fn draw_indicator_coef(rng: &mut ChaCha8Rng) -> f64 {
    match rng.random_range(0..4u32) {
        0 => 8.0,
        1 => 1.6,
        2 => 0.0,
        _ => -4.0,
    }
}

fn draw_truth(design: Design, zero: bool, rng: &mut ChaCha8Rng) -> TruthModel {
    let p = design.p();
    match design {
        Design::Interaction => {
            let alpha: Vec<f64> = (0..p)
                .map(|_| if zero { 0.0 } else { draw_interaction_coef(rng) })
                .collect();
            let beta: Vec<f64> = (0..pair_count(p))
                .map(|_| if zero { 0.0 } else { draw_interaction_coef(rng) })
                .collect();
            TruthModel::Interaction { alpha, beta }
        }
        Design::Indicator => {
            let alpha: Vec<f64> = (0..p)
                .map(|_| if zero { 0.0 } else { draw_indicator_coef(rng) })
                .collect();
            let beta: Vec<f64> = (0..pair_count(p))
                .map(|_| if zero { 0.0 } else { draw_indicator_coef(rng) })
                .collect();
            let gamma: Vec<f64> = (0..pair_count(p))
                .map(|_| if zero { 0.0 } else { draw_indicator_coef(rng) })
                .collect();
            TruthModel::Indicator { alpha, beta, gamma }
        }
        Design::HighdimShared => {
            let hetero: Vec<f64> = (0..3)
                .map(|_| if zero { 0.0 } else { standard_normal(rng) })
                .collect();
            TruthModel::HighdimShared { hetero }
        }
    }
}

/// A generated scenario: data plus exact truth handles.
#[derive(Debug, Clone)]
pub struct GeneratedScenario {
    pub spec: ScenarioSpec,
    pub groups: Vec<SourceGroup>,
    pub target: TargetSample,
    pub truths: Vec<TruthModel>,
    /// Fresh heterogeneous target model (high-dimensional design only).
    pub target_truth: Option<TruthModel>,
    /// Shared base slope vector (high-dimensional design only).
    pub base_coefficients: Option<Vec<f64>>,
    /// Per-group covariate means (zero vectors without shift).
    pub group_means: Vec<Vec<f64>>,
}

/// Generate a scenario. Draw order is fixed: truths, group means, group
/// data in group order, then target covariates.
pub fn generate(spec: &ScenarioSpec) -> Result<GeneratedScenario> {
    if spec.l_groups == 0 {
        return Err(Error::InsufficientData("need at least one group".into()));
    }
    let p = spec.design.p();
    let sizes = spec.group_sizes.sizes(spec.l_groups)?;
    let mut rng = rng_for(spec.seed, "scenario", 0);

    let truths: Vec<TruthModel> = (0..spec.l_groups)
        .map(|_| draw_truth(spec.design, spec.zero_coefficients, &mut rng))
        .collect();
    let target_truth = match spec.design {
        Design::HighdimShared => Some(draw_truth(spec.design, spec.zero_coefficients, &mut rng)),
        _ => None,
    };

    let group_means: Vec<Vec<f64>> = (0..spec.l_groups)
        .map(|_| match spec.covariate_shift {
            Some(scale) => (0..p)
                .map(|_| scale * (2.0 * rng.random::<f64>() - 1.0))
                .collect(),
            None => vec![0.0; p],
        })
        .collect();

    let mut groups = Vec::with_capacity(spec.l_groups);
    for (li, (&n, truth)) in sizes.iter().zip(&truths).enumerate() {
        let mean = &group_means[li];
        let x = DMatrix::from_fn(n, p, |_, c| mean[c] + standard_normal(&mut rng));
        let mut row = vec![0.0; p];
        let y = DVector::from_fn(n, |i, _| {
            for c in 0..p {
                row[c] = x[(i, c)];
            }
            truth.eval_row(&row) + standard_normal(&mut rng)
        });
        groups.push(SourceGroup::new(li + 1, (li + 1) as i64, x, y)?);
    }

    let tx = DMatrix::from_fn(spec.n_q, p, |_, _| standard_normal(&mut rng));
    let target = TargetSample::new(tx)?;

    let base_coefficients = match spec.design {
        Design::HighdimShared => {
            let mut v = vec![0.0; p];
            for s in v.iter_mut().take(10) {
                *s = 0.5;
            }
            Some(v)
        }
        _ => None,
    };

    Ok(GeneratedScenario {
        spec: spec.clone(),
        groups,
        target,
        truths,
        target_truth,
        base_coefficients,
        group_means,
    })
}

impl GeneratedScenario {
    pub fn l(&self) -> usize {
        self.truths.len()
    }

    pub fn p(&self) -> usize {
        self.spec.design.p()
    }

    /// Exact mixture conditional mean `sum_l q_l f^(l)` on rows of `x`.
    pub fn mixture_eval(&self, q: &MixtureSpec, x: &DMatrix<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(x.nrows());
        for (w, t) in q.weights().iter().zip(&self.truths) {
            if *w != 0.0 {
                out += t.eval_batch(x) * *w;
            }
        }
        out
    }

    /// Labeled test set under the target covariate law with the conditional
    /// outcome drawn from the q-mixture of group models.
    pub fn sample_labeled(
        &self,
        q: &MixtureSpec,
        n: usize,
        seed: u64,
    ) -> Result<(DMatrix<f64>, DVector<f64>)> {
        if q.len() != self.l() {
            return Err(Error::Shape(format!(
                "mixture has {} entries, scenario has {} groups",
                q.len(),
                self.l()
            )));
        }
        let p = self.p();
        let mut rng = rng_for(seed, "labeled-sample", 0);
        let x = DMatrix::from_fn(n, p, |_, _| standard_normal(&mut rng));
        let mut row = vec![0.0; p];
        let y = DVector::from_fn(n, |i, _| {
            for c in 0..p {
                row[c] = x[(i, c)];
            }
            let u: f64 = rng.random();
            let mut cum = 0.0;
            let mut pick = self.l() - 1;
            for (l, w) in q.weights().iter().enumerate() {
                cum += w;
                if u < cum {
                    pick = l;
                    break;
                }
            }
            self.truths[pick].eval_row(&row) + standard_normal(&mut rng)
        });
        Ok((x, y))
    }

    /// Labeled test set from one group's conditional law (a vertex mixture).
    pub fn sample_vertex(&self, l: usize, n: usize, seed: u64) -> Result<(DMatrix<f64>, DVector<f64>)> {
        self.sample_labeled(&MixtureSpec::vertex(l, self.l()), n, seed)
    }

    /// Labeled set from the high-dimensional design's own target model.
    pub fn sample_target_truth(&self, n: usize, seed: u64) -> Result<(DMatrix<f64>, DVector<f64>)> {
        let t = self
            .target_truth
            .as_ref()
            .ok_or_else(|| Error::Invariant("this design has no separate target model".into()))?;
        let p = self.p();
        let mut rng = rng_for(seed, "target-truth-sample", 0);
        let x = DMatrix::from_fn(n, p, |_, _| standard_normal(&mut rng));
        let f = t.eval_batch(&x);
        let y = DVector::from_fn(n, |i, _| f[i] + standard_normal(&mut rng));
        Ok((x, y))
    }

    /// Monte Carlo Gram matrix of the exact models under the target law.
    pub fn mc_gamma(&self, n_mc: usize, seed: u64) -> GammaMatrix {
        let p = self.p();
        let l = self.l();
        let mut rng = rng_for(seed, "mc-gamma", 0);
        let mut acc = DMatrix::zeros(l, l);
        let block = 20_000.min(n_mc.max(1));
        let mut done = 0;
        let mut row = vec![0.0; p];
        let mut vals = vec![0.0; l];
        while done < n_mc {
            let m = block.min(n_mc - done);
            for _ in 0..m {
                for c in row.iter_mut() {
                    *c = standard_normal(&mut rng);
                }
                for (k, t) in self.truths.iter().enumerate() {
                    vals[k] = t.eval_row(&row);
                }
                for a in 0..l {
                    for b in a..l {
                        acc[(a, b)] += vals[a] * vals[b];
                    }
                }
            }
            done += m;
        }
        GammaMatrix::from_upper(acc / n_mc as f64, Provenance::Plugin)
            .expect("finite Monte Carlo Gram")
    }

    /// Reference optimal weights: solve on a large Monte Carlo Gram matrix
    /// built from the truth handles.
    pub fn q_star(&self, h: &UncertaintySet, n_mc: usize, seed: u64) -> Result<MixtureSpec> {
        let g = psd_repair(&self.mc_gamma(n_mc, seed), 1e-12);
        Ok(solve_weights(&g, h)?.q)
    }
}

impl LabeledSampler for GeneratedScenario {
    fn sample_labeled(
        &self,
        q: &MixtureSpec,
        n: usize,
        seed: u64,
    ) -> Result<(DMatrix<f64>, DVector<f64>)> {
        GeneratedScenario::sample_labeled(self, q, n, seed)
    }
}

// ---------------------------------------------------------------------------
// Experiment registry
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    /// Desk-scale reproduction defaults.
    Paper,
    /// Small smoke-test sizes.
    Ci,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentOverrides {
    pub reps: Option<usize>,
    pub seed: Option<u64>,
    pub scale: Scale,
    pub n_per_group: Option<usize>,
}

impl Default for ExperimentOverrides {
    fn default() -> Self {
        Self {
            reps: None,
            seed: None,
            scale: Scale::Paper,
            n_per_group: None,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ExperimentDef {
    pub name: &'static str,
    pub design: Design,
    pub description: &'static str,
}

pub fn registry() -> Vec<ExperimentDef> {
    vec![
        ExperimentDef {
            name: "fig2-L2",
            design: Design::Interaction,
            description: "reward of DRL0/ERM/DRO-sq across target mixtures, L=2",
        },
        ExperimentDef {
            name: "fig4-rho",
            design: Design::Interaction,
            description: "worst-case reward over mixture balls for DRL(rho)/DRL0/ERM, L=4",
        },
        ExperimentDef {
            name: "fig7",
            design: Design::Indicator,
            description: "weight and model error of plug-in vs bias-corrected under covariate shift",
        },
        ExperimentDef {
            name: "fig8-highdim",
            design: Design::HighdimShared,
            description: "reward and base-coefficient recovery of DRL0 vs ERM with lasso learners",
        },
        ExperimentDef {
            name: "fig9-weights",
            design: Design::HighdimShared,
            description: "per-group aggregation weights across sample sizes with lasso learners",
        },
    ]
}

/// One output table with CSV-ready rows.
#[derive(Debug, Clone, Serialize)]
pub struct Table {
    pub name: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ExperimentResult {
    pub name: String,
    pub summary: serde_json::Value,
    pub tables: Vec<Table>,
}

impl ExperimentResult {
    /// Write each table as `<name>_<table>.csv` plus a JSON summary; returns
    /// the paths written.
    pub fn write_to(&self, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let mut paths = Vec::new();
        for t in &self.tables {
            let path = dir.join(format!("{}_{}.csv", self.name, t.name));
            let mut w = csv::Writer::from_path(&path)
                .map_err(|e| Error::Io(std::io::Error::other(e)))?;
            w.write_record(&t.header)
                .and_then(|()| {
                    for row in &t.rows {
                        w.write_record(row)?;
                    }
                    w.flush().map_err(csv::Error::from)
                })
                .map_err(|e| Error::Io(std::io::Error::other(e)))?;
            paths.push(path);
        }
        let spath = dir.join(format!("{}_summary.json", self.name));
        std::fs::write(&spath, serde_json::to_string_pretty(&self.summary)?)?;
        paths.push(spath);
        Ok(paths)
    }
}

fn fmt(v: f64) -> String {
    format!("{v}")
}

/// Run a registered experiment. Deterministic given the resolved seed.
pub fn run_experiment(name: &str, ov: &ExperimentOverrides) -> Result<ExperimentResult> {
    match name {
        "fig2-L2" => run_fig2_l2(ov),
        "fig4-rho" => run_fig4_rho(ov),
        "fig7" => run_fig7(ov),
        "fig8-highdim" => run_fig8_highdim(ov, false),
        "fig9-weights" => run_fig8_highdim(ov, true),
        other => Err(Error::UnknownExperiment(other.to_string())),
    }
}

struct Resolved {
    reps: usize,
    seed: u64,
    learner: LearnerSpec,
    n_total: usize,
    n_q: usize,
    n_eval: usize,
}

fn resolve(ov: &ExperimentOverrides, l: usize, paper_reps: usize) -> Resolved {
    match ov.scale {
        Scale::Paper => Resolved {
            reps: ov.reps.unwrap_or(paper_reps),
            seed: ov.seed.unwrap_or(1),
            learner: LearnerSpec::Forest {
                n_trees: 100,
                mtry: None,
                min_leaf: 5,
                oob_tune: false,
            },
            n_total: ov.n_per_group.map(|n| n * l).unwrap_or(2000 * l),
            n_q: 10_000,
            n_eval: 4000,
        },
        Scale::Ci => Resolved {
            reps: ov.reps.unwrap_or(3),
            seed: ov.seed.unwrap_or(1),
            learner: LearnerSpec::linear(),
            n_total: ov.n_per_group.map(|n| n * l).unwrap_or(200 * l),
            n_q: 400,
            n_eval: 400,
        },
    }
}

fn no_split_config(learner: &LearnerSpec, h: UncertaintySet, seed: u64) -> FitConfig {
    FitConfig {
        learner: learner.clone(),
        h_set: h,
        shift_mode: ShiftMode::None,
        split_mode: SplitMode::NoSplit,
        seed,
        psd_ridge: 1e-10,
    }
}

fn run_fig2_l2(ov: &ExperimentOverrides) -> Result<ExperimentResult> {
    let l = 2;
    let r = resolve(ov, l, 100);
    let q_sou = MixtureSpec::new(vec![0.2, 0.8])?;
    let grid_step: f64 = if ov.scale == Scale::Ci { 0.25 } else { 0.05 };
    let steps = (1.0 / grid_step).round() as usize;

    let rows: Vec<Vec<Vec<String>>> = (0..r.reps)
        .into_par_iter()
        .map(|rep| -> Result<Vec<Vec<String>>> {
            let spec = ScenarioSpec {
                design: Design::Interaction,
                l_groups: l,
                group_sizes: GroupSizes::Mixture {
                    q_sou: q_sou.clone(),
                    n_total: r.n_total,
                },
                n_q: r.n_q,
                seed: derive_seed(r.seed, "fig2-rep", rep as u64),
                covariate_shift: None,
                zero_coefficients: false,
            };
            let sc = generate(&spec)?;
            let cfg = no_split_config(&r.learner, UncertaintySet::FullSimplex, spec.seed);
            let drl0 = fit_drl(&sc.groups, &sc.target, &cfg)?;
            let erm = fit_erm(&sc.groups, &r.learner, spec.seed)?;
            let sq = fit_sq_dro_l2(&sc.groups, &sc.target, &r.learner, spec.seed)?;
            let mut out = Vec::new();
            for gi in 0..=steps {
                let q1 = (gi as f64 * grid_step).min(1.0);
                let q = MixtureSpec::new(vec![q1, 1.0 - q1])?;
                let (x, y) =
                    sc.sample_labeled(&q, r.n_eval, derive_seed(spec.seed, "fig2-eval", gi as u64))?;
                for (mname, preds) in [
                    ("DRL0", drl0.predict(&x)?),
                    ("ERM", predict_batch(&erm, &x)?),
                    ("DRO-sq", sq.predict(&x)?),
                ] {
                    let rew = empirical_reward(&preds, &y)?.reward;
                    out.push(vec![
                        rep.to_string(),
                        fmt(q1),
                        mname.to_string(),
                        fmt(rew),
                    ]);
                }
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;

    Ok(ExperimentResult {
        name: "fig2-L2".into(),
        summary: serde_json::json!({
            "design": "interaction", "l": l, "reps": r.reps, "seed": r.seed,
            "q_sou": q_sou.weights(), "n_total": r.n_total, "n_eval": r.n_eval,
            "grid_step": grid_step, "learner": r.learner,
        }),
        tables: vec![Table {
            name: "rewards".into(),
            header: vec!["rep".into(), "q_tar_1".into(), "method".into(), "reward".into()],
            rows: rows.into_iter().flatten().collect(),
        }],
    })
}

/// Worst-case reward over the mixture ball `{m : ||m - center|| <= e sqrt L}`,
/// evaluated from per-vertex rewards (the reward is linear in the mixture)
/// on a simplex mesh.
pub fn worst_reward_over_ball(
    vertex_rewards: &[f64],
    center: &MixtureSpec,
    e_radius_scaled: f64,
    mesh: f64,
) -> f64 {
    let l = vertex_rewards.len();
    let h = UncertaintySet::L2Ball {
        center: center.clone(),
        rho: e_radius_scaled,
        scaled: true,
    };
    let steps = (1.0 / mesh).round() as usize;
    let mut worst = f64::INFINITY;
    let mut m = vec![0usize; l - 1];
    // Enumerate compositions of `steps` into l parts.
    loop {
        let used: usize = m.iter().sum();
        if used <= steps {
            let mut q: Vec<f64> = m.iter().map(|&v| v as f64 * mesh).collect();
            q.push((steps - used) as f64 * mesh);
            if h.contains(&q, 1e-9) {
                let r: f64 = q.iter().zip(vertex_rewards).map(|(a, b)| a * b).sum();
                worst = worst.min(r);
            }
        }
        // Advance the mixed-radix counter.
        let mut i = 0;
        loop {
            if i == l - 1 {
                // Include the center itself and finish.
                let r: f64 = center
                    .weights()
                    .iter()
                    .zip(vertex_rewards)
                    .map(|(a, b)| a * b)
                    .sum();
                return worst.min(r);
            }
            m[i] += 1;
            if m[i] <= steps {
                break;
            }
            m[i] = 0;
            i += 1;
        }
    }
}

fn run_fig4_rho(ov: &ExperimentOverrides) -> Result<ExperimentResult> {
    let l = 4;
    let r = resolve(ov, l, 50);
    let q_sou = MixtureSpec::new(vec![0.55, 0.15, 0.15, 0.15])?;
    let rhos = [0.25, 0.15, 0.02];
    let e_grid: Vec<f64> = if ov.scale == Scale::Ci {
        vec![0.4, 0.2, 0.0]
    } else {
        (0..=40).rev().map(|i| i as f64 / 100.0).collect()
    };
    let mesh = if ov.scale == Scale::Ci { 0.05 } else { 0.01 };

    let rows: Vec<Vec<Vec<String>>> = (0..r.reps)
        .into_par_iter()
        .map(|rep| -> Result<Vec<Vec<String>>> {
            let spec = ScenarioSpec {
                design: Design::Interaction,
                l_groups: l,
                group_sizes: GroupSizes::Mixture {
                    q_sou: q_sou.clone(),
                    n_total: r.n_total,
                },
                n_q: r.n_q,
                seed: derive_seed(r.seed, "fig4-rep", rep as u64),
                covariate_shift: None,
                zero_coefficients: false,
            };
            let sc = generate(&spec)?;
            let erm = fit_erm(&sc.groups, &r.learner, spec.seed)?;
            let drl0 = fit_drl(
                &sc.groups,
                &sc.target,
                &no_split_config(&r.learner, UncertaintySet::FullSimplex, spec.seed),
            )?;
            let mut models: Vec<(String, Box<dyn Fn(&DMatrix<f64>) -> Result<DVector<f64>>>)> =
                vec![
                    ("ERM".into(), Box::new(move |x: &DMatrix<f64>| predict_batch(&erm, x))),
                    ("DRL0".into(), {
                        let m = drl0;
                        Box::new(move |x: &DMatrix<f64>| m.predict(x))
                    }),
                ];
            for &rho in &rhos {
                let h = UncertaintySet::ball(q_sou.clone(), rho);
                let m = fit_drl(&sc.groups, &sc.target, &no_split_config(&r.learner, h, spec.seed))?;
                models.push((format!("DRL-rho={rho}"), Box::new(move |x: &DMatrix<f64>| m.predict(x))));
            }
            // Per-vertex rewards per model, then worst case per e.
            let mut vertex_rewards = vec![vec![0.0; l]; models.len()];
            for v in 0..l {
                let (x, y) =
                    sc.sample_vertex(v, r.n_eval, derive_seed(spec.seed, "fig4-eval", v as u64))?;
                for (mi, (_, predict)) in models.iter().enumerate() {
                    vertex_rewards[mi][v] = empirical_reward(&predict(&x)?, &y)?.reward;
                }
            }
            let mut out = Vec::new();
            for &e in &e_grid {
                for (mi, (name, _)) in models.iter().enumerate() {
                    let w = worst_reward_over_ball(&vertex_rewards[mi], &q_sou, e, mesh);
                    out.push(vec![rep.to_string(), fmt(e), name.clone(), fmt(w)]);
                }
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;

    Ok(ExperimentResult {
        name: "fig4-rho".into(),
        summary: serde_json::json!({
            "design": "interaction", "l": l, "reps": r.reps, "seed": r.seed,
            "q_sou": q_sou.weights(), "rhos": rhos, "mesh": mesh,
            "n_total": r.n_total, "n_eval": r.n_eval, "learner": r.learner,
        }),
        tables: vec![Table {
            name: "worst_case".into(),
            header: vec!["rep".into(), "e".into(), "method".into(), "worst_reward".into()],
            rows: rows.into_iter().flatten().collect(),
        }],
    })
}

fn run_fig7(ov: &ExperimentOverrides) -> Result<ExperimentResult> {
    let l = 5;
    let r = resolve(ov, l, 100);
    let n_grid: Vec<usize> = match ov.n_per_group {
        Some(n) => vec![n],
        None => {
            if ov.scale == Scale::Ci {
                vec![100]
            } else {
                vec![200, 400, 600]
            }
        }
    };
    let n_q = if ov.scale == Scale::Ci { 300 } else { 1000 };
    let learner = if ov.scale == Scale::Ci {
        LearnerSpec::linear()
    } else {
        r.learner.clone()
    };

    let mut rows = Vec::new();
    for &n in &n_grid {
        let per_rep: Vec<Vec<Vec<String>>> = (0..r.reps)
            .into_par_iter()
            .map(|rep| -> Result<Vec<Vec<String>>> {
                let spec = ScenarioSpec {
                    design: Design::Indicator,
                    l_groups: l,
                    group_sizes: GroupSizes::PerGroup { n },
                    n_q,
                    seed: derive_seed(r.seed, "fig7-rep", (n * 100_000 + rep) as u64),
                    covariate_shift: Some(0.5),
                    zero_coefficients: false,
                };
                let sc = generate(&spec)?;
                let q_star = sc.q_star(
                    &UncertaintySet::FullSimplex,
                    100_000,
                    derive_seed(spec.seed, "qstar", 0),
                )?;
                let corrected = fit_drl(
                    &sc.groups,
                    &sc.target,
                    &FitConfig {
                        learner: learner.clone(),
                        h_set: UncertaintySet::FullSimplex,
                        shift_mode: ShiftMode::logistic(),
                        split_mode: SplitMode::Deterministic,
                        seed: spec.seed,
                        psd_ridge: 1e-10,
                    },
                )?;
                let plugin = fit_plugin_drl(
                    &sc.groups,
                    &sc.target,
                    &no_split_config(&learner, UncertaintySet::FullSimplex, spec.seed),
                )?;
                // Model error against the population robust aggregate under Q_X.
                let mut rng = rng_for(spec.seed, "fig7-eval", 0);
                let xe = DMatrix::from_fn(4000, sc.p(), |_, _| standard_normal(&mut rng));
                let f_star = sc.mixture_eval(&q_star, &xe);
                let mut out = Vec::new();
                for (name, model) in [("plugin", &plugin), ("corrected", &corrected)] {
                    let q_err: f64 = model
                        .weights()
                        .weights()
                        .iter()
                        .zip(q_star.weights())
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum();
                    let f_hat = model.predict(&xe)?;
                    let f_err = (&f_hat - &f_star).norm_squared() / xe.nrows() as f64;
                    out.push(vec![
                        rep.to_string(),
                        n.to_string(),
                        name.to_string(),
                        fmt(q_err),
                        fmt(f_err),
                    ]);
                }
                Ok(out)
            })
            .collect::<Result<_>>()?;
        rows.extend(per_rep.into_iter().flatten());
    }

    Ok(ExperimentResult {
        name: "fig7".into(),
        summary: serde_json::json!({
            "design": "indicator", "l": l, "reps": r.reps, "seed": r.seed,
            "n_grid": n_grid, "n_q": n_q, "covariate_shift": 0.5, "learner": learner,
        }),
        tables: vec![Table {
            name: "errors".into(),
            header: vec![
                "rep".into(),
                "n_per_group".into(),
                "method".into(),
                "q_err_sq".into(),
                "f_err_sq".into(),
            ],
            rows,
        }],
    })
}

fn run_fig8_highdim(ov: &ExperimentOverrides, weights_table: bool) -> Result<ExperimentResult> {
    let l = 5;
    let reps = ov.reps.unwrap_or(if ov.scale == Scale::Ci { 2 } else { 100 });
    let seed = ov.seed.unwrap_or(1);
    let n_grid: Vec<usize> = match ov.n_per_group {
        Some(n) => vec![n],
        None => {
            if ov.scale == Scale::Ci {
                vec![100]
            } else {
                vec![100, 400, 1200]
            }
        }
    };
    let n_q = if ov.scale == Scale::Ci { 200 } else { 1000 };
    let n_eval = if ov.scale == Scale::Ci { 200 } else { 2000 };
    let learner = LearnerSpec::lasso();

    let mut reward_rows = Vec::new();
    let mut weight_rows = Vec::new();
    for &n in &n_grid {
        let per_rep: Vec<(Vec<Vec<String>>, Vec<Vec<String>>)> = (0..reps)
            .into_par_iter()
            .map(|rep| -> Result<(Vec<Vec<String>>, Vec<Vec<String>>)> {
                let spec = ScenarioSpec {
                    design: Design::HighdimShared,
                    l_groups: l,
                    group_sizes: GroupSizes::PerGroup { n },
                    n_q,
                    seed: derive_seed(seed, "fig8-rep", (n * 100_000 + rep) as u64),
                    covariate_shift: None,
                    zero_coefficients: false,
                };
                let sc = generate(&spec)?;
                let drl0 = fit_drl(
                    &sc.groups,
                    &sc.target,
                    &no_split_config(&learner, UncertaintySet::FullSimplex, spec.seed),
                )?;
                let erm = fit_erm(&sc.groups, &learner, spec.seed)?;
                let base = sc.base_coefficients.clone().unwrap();
                let dist = |coef: &[f64]| -> f64 {
                    // Slopes only; the truth has no intercept.
                    coef[1..]
                        .iter()
                        .zip(&base)
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum()
                };
                let drl_dist = dist(&drl0.aggregate_coefficients().unwrap());
                let erm_dist = dist(erm.coefficients().unwrap());
                let (x, y) =
                    sc.sample_target_truth(n_eval, derive_seed(spec.seed, "fig8-eval", 0))?;
                let drl_reward = empirical_reward(&drl0.predict(&x)?, &y)?.reward;
                let erm_reward = empirical_reward(&predict_batch(&erm, &x)?, &y)?.reward;
                let rr = vec![
                    vec![
                        rep.to_string(),
                        n.to_string(),
                        "DRL0".into(),
                        fmt(drl_reward),
                        fmt(drl_dist),
                    ],
                    vec![
                        rep.to_string(),
                        n.to_string(),
                        "ERM".into(),
                        fmt(erm_reward),
                        fmt(erm_dist),
                    ],
                ];
                let wr = drl0
                    .weights()
                    .weights()
                    .iter()
                    .enumerate()
                    .map(|(g, w)| {
                        vec![rep.to_string(), n.to_string(), (g + 1).to_string(), fmt(*w)]
                    })
                    .collect();
                Ok((rr, wr))
            })
            .collect::<Result<_>>()?;
        for (rr, wr) in per_rep {
            reward_rows.extend(rr);
            weight_rows.extend(wr);
        }
    }

    let (name, tables) = if weights_table {
        (
            "fig9-weights",
            vec![Table {
                name: "weights".into(),
                header: vec!["rep".into(), "n_per_group".into(), "group".into(), "weight".into()],
                rows: weight_rows,
            }],
        )
    } else {
        (
            "fig8-highdim",
            vec![Table {
                name: "recovery".into(),
                header: vec![
                    "rep".into(),
                    "n_per_group".into(),
                    "method".into(),
                    "reward".into(),
                    "coef_dist_sq".into(),
                ],
                rows: reward_rows,
            }],
        )
    };
    Ok(ExperimentResult {
        name: name.into(),
        summary: serde_json::json!({
            "design": "highdim_shared", "l": l, "reps": reps, "seed": seed,
            "n_grid": n_grid, "n_q": n_q, "learner": learner,
        }),
        tables,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec(design: Design, seed: u64) -> ScenarioSpec {
        ScenarioSpec {
            design,
            l_groups: 2,
            group_sizes: GroupSizes::PerGroup { n: 40 },
            n_q: 50,
            seed,
            covariate_shift: None,
            zero_coefficients: false,
        }
    }

    #[test]
    fn generators_are_seed_reproducible() {
        for design in [Design::Interaction, Design::Indicator, Design::HighdimShared] {
            let a = generate(&small_spec(design, 7)).unwrap();
            let b = generate(&small_spec(design, 7)).unwrap();
            assert_eq!(a.groups[0].covariates(), b.groups[0].covariates());
            assert_eq!(a.groups[1].outcomes(), b.groups[1].outcomes());
            assert_eq!(a.target.covariates(), b.target.covariates());
            assert_eq!(a.truths, b.truths);
            let c = generate(&small_spec(design, 8)).unwrap();
            assert_ne!(a.groups[0].covariates(), c.groups[0].covariates());
        }
    }

    #[test]
    fn zero_coefficient_mode_gives_pure_noise() {
        let spec = ScenarioSpec {
            zero_coefficients: true,
            ..small_spec(Design::Interaction, 9)
        };
        let sc = generate(&spec).unwrap();
        let x = DMatrix::from_fn(5, 5, |i, j| (i + j) as f64);
        let f = sc.truths[0].eval_batch(&x);
        assert!(f.iter().all(|&v| v == 0.0));
        // ERM on pure noise has reward near zero.
        let erm = fit_erm(&sc.groups, &LearnerSpec::linear(), 0).unwrap();
        let (xe, ye) = sc
            .sample_labeled(&MixtureSpec::uniform(2), 4000, 11)
            .unwrap();
        let r = empirical_reward(&predict_batch(&erm, &xe).unwrap(), &ye).unwrap();
        assert!(r.reward.abs() < 0.1, "reward {}", r.reward);
    }

    #[test]
    fn interaction_centering_has_mean_zero() {
        // Mean of the centered interaction features over many draws ~ 0.
        let mut rng = rng_for(1, "sim-test", 0);
        let n = 200_000;
        let mut sums = vec![0.0; pair_count(5)];
        for _ in 0..n {
            let x: Vec<f64> = (0..5).map(|_| standard_normal(&mut rng)).collect();
            let mut idx = 0;
            for j in 0..5 {
                for k in j..5 {
                    let center = if j == k { 1.0 } else { 0.0 };
                    sums[idx] += x[j] * x[k] - center;
                    idx += 1;
                }
            }
        }
        for (idx, s) in sums.iter().enumerate() {
            let mean = s / n as f64;
            // Var of x_j x_k is at most 3; 3 SE ~ 3*sqrt(3/n).
            let band = 3.0 * (3.0f64 / n as f64).sqrt();
            assert!(mean.abs() < band, "feature {idx}: mean {mean}");
        }
    }

    #[test]
    fn indicator_truth_matches_hand_evaluation() {
        let sc = generate(&small_spec(Design::Indicator, 13)).unwrap();
        let (alpha, beta, gamma) = match &sc.truths[0] {
            TruthModel::Indicator { alpha, beta, gamma } => (alpha, beta, gamma),
            _ => unreachable!(),
        };
        // At x = (1,1,1,1): all x_j > 0, all x_j < 2, all x_k > -2.
        let expect: f64 = alpha.iter().sum::<f64>() + beta.iter().sum::<f64>()
            - gamma.iter().sum::<f64>();
        let got = sc.truths[0].eval_row(&[1.0, 1.0, 1.0, 1.0]);
        assert!((got - expect).abs() < 1e-12);
    }

    #[test]
    fn indicator_coefficients_have_uniform_marginals() {
        let mut rng = rng_for(2, "sim-test", 1);
        let mut counts = [0usize; 4];
        let n = 10_000;
        for _ in 0..n {
            let v = draw_indicator_coef(&mut rng);
            let idx = match v {
                8.0 => 0,
                1.6 => 1,
                0.0 => 2,
                _ => 3,
            };
            counts[idx] += 1;
        }
        // Chi-square sanity check against uniform(4): 99.9% cutoff ~ 16.27.
        let expect = n as f64 / 4.0;
        let chi2: f64 = counts
            .iter()
            .map(|&c| (c as f64 - expect) * (c as f64 - expect) / expect)
            .sum();
        assert!(chi2 < 16.27, "chi2 {chi2} counts {counts:?}");
    }

    #[test]
    fn highdim_truths_are_sparse_and_shared() {
        let sc = generate(&small_spec(Design::HighdimShared, 17)).unwrap();
        let base = sc.base_coefficients.as_ref().unwrap();
        let norm: f64 = base.iter().map(|v| v * v).sum::<f64>();
        assert!((norm.sqrt() - 0.5 * 10f64.sqrt()).abs() < 1e-12);
        for t in &sc.truths {
            let slopes = t.slope_vector(200).unwrap();
            for (j, s) in slopes.iter().enumerate() {
                if j < 10 {
                    assert_eq!(*s, 0.5);
                } else if j >= 13 {
                    assert_eq!(*s, 0.0, "coordinate {j} should be zero");
                }
            }
        }
    }

    #[test]
    fn highdim_hetero_average_shrinks_with_l() {
        // Group-averaged heterogeneous coefficients concentrate near zero as
        // L grows (mean of N(0,1) draws).
        let mut small_l_avg = 0.0;
        let mut large_l_avg = 0.0;
        let reps = 60;
        for rep in 0..reps {
            for (l, out) in [(2usize, &mut small_l_avg), (40, &mut large_l_avg)] {
                let spec = ScenarioSpec {
                    design: Design::HighdimShared,
                    l_groups: l,
                    group_sizes: GroupSizes::PerGroup { n: 10 },
                    n_q: 10,
                    seed: derive_seed(100 + rep, "hetero", l as u64),
                    covariate_shift: None,
                    zero_coefficients: false,
                };
                let sc = generate(&spec).unwrap();
                let mut mean = [0.0f64; 3];
                for t in &sc.truths {
                    if let TruthModel::HighdimShared { hetero } = t {
                        for j in 0..3 {
                            mean[j] += hetero[j];
                        }
                    }
                }
                let l_f = l as f64;
                *out += (mean.iter().map(|m| (m / l_f) * (m / l_f)).sum::<f64>()).sqrt();
            }
        }
        assert!(
            large_l_avg < small_l_avg * 0.5,
            "avg hetero magnitude: L=40 {large_l_avg} vs L=2 {small_l_avg}"
        );
    }

    #[test]
    fn truth_reward_identity() {
        // reward(f^Q) = E[f^Q^2] + 2 E[f^Q eps]; the cross term vanishes, so
        // the reward matches the mean square of the truth within MC error.
        let sc = generate(&small_spec(Design::Interaction, 21)).unwrap();
        let q = MixtureSpec::new(vec![0.3, 0.7]).unwrap();
        let n = 40_000;
        let (x, y) = sc.sample_labeled(&q, n, 31).unwrap();
        let f = sc.mixture_eval(&q, &x);
        let r = empirical_reward(&f, &y).unwrap();
        let mean_sq = f.norm_squared() / n as f64;
        let se = {
            let vals: Vec<f64> = (0..n)
                .map(|i| {
                    let yy = y[i];
                    yy * yy - (yy - f[i]) * (yy - f[i]) - f[i] * f[i]
                })
                .collect();
            let m = vals.iter().sum::<f64>() / n as f64;
            let var = vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        };
        assert!(
            (r.reward - mean_sq).abs() < 3.0 * se + 1e-9,
            "reward {} vs mean square {mean_sq} (se {se})",
            r.reward
        );
    }

    #[test]
    fn mc_gamma_matches_analytic_for_highdim() {
        // Linear truths: Gamma_{k,l} = slope_k . slope_l under N(0, I).
        let sc = generate(&small_spec(Design::HighdimShared, 23)).unwrap();
        let g = sc.mc_gamma(40_000, 5);
        let s1 = DVector::from_vec(sc.truths[0].slope_vector(200).unwrap());
        let s2 = DVector::from_vec(sc.truths[1].slope_vector(200).unwrap());
        let truth = [
            [s1.dot(&s1), s1.dot(&s2)],
            [s2.dot(&s1), s2.dot(&s2)],
        ];
        for a in 0..2 {
            for b in 0..2 {
                assert!(
                    (g.values()[(a, b)] - truth[a][b]).abs() < 0.15,
                    "({a},{b}): {} vs {}",
                    g.values()[(a, b)],
                    truth[a][b]
                );
            }
        }
    }

    #[test]
    fn worst_reward_over_ball_degenerates_to_center_at_zero_radius() {
        let center = MixtureSpec::new(vec![0.5, 0.3, 0.2]).unwrap();
        let vr = [1.0, -2.0, 0.5];
        let w0 = worst_reward_over_ball(&vr, &center, 0.0, 0.05);
        let at_center: f64 = center.weights().iter().zip(&vr).map(|(a, b)| a * b).sum();
        assert!((w0 - at_center).abs() < 1e-12);
        // Full-cover radius reaches the worst vertex.
        let w1 = worst_reward_over_ball(&vr, &center, 1.0, 0.05);
        assert!((w1 - (-2.0)).abs() < 1e-9);
    }

    #[test]
    fn unknown_experiment_errors() {
        assert!(matches!(
            run_experiment("nope", &ExperimentOverrides::default()),
            Err(Error::UnknownExperiment(_))
        ));
    }

    #[test]
    fn fig7_ci_smoke_emits_error_columns() {
        let ov = ExperimentOverrides {
            reps: Some(2),
            seed: Some(3),
            scale: Scale::Ci,
            n_per_group: Some(60),
        };
        let res = run_experiment("fig7", &ov).unwrap();
        let t = &res.tables[0];
        assert_eq!(
            t.header,
            vec!["rep", "n_per_group", "method", "q_err_sq", "f_err_sq"]
        );
        assert_eq!(t.rows.len(), 2 * 2); // reps x methods
        for row in &t.rows {
            let q: f64 = row[3].parse().unwrap();
            assert!(q.is_finite() && q >= 0.0);
        }
        // Same seed, same output.
        let res2 = run_experiment("fig7", &ov).unwrap();
        assert_eq!(
            serde_json::to_string(&res.tables[0].rows).unwrap(),
            serde_json::to_string(&res2.tables[0].rows).unwrap()
        );
    }

    #[test]
    fn fig2_ci_smoke_emits_reward_per_method_per_gridpoint() {
        let ov = ExperimentOverrides {
            reps: Some(2),
            seed: Some(4),
            scale: Scale::Ci,
            n_per_group: None,
        };
        let res = run_experiment("fig2-L2", &ov).unwrap();
        let t = &res.tables[0];
        // 2 reps x 5 grid points x 3 methods.
        assert_eq!(t.rows.len(), 2 * 5 * 3);
    }

    #[test]
    fn fig9_weights_sum_to_one_per_replication() {
        let ov = ExperimentOverrides {
            reps: Some(2),
            seed: Some(5),
            scale: Scale::Ci,
            n_per_group: Some(80),
        };
        let res = run_experiment("fig9-weights", &ov).unwrap();
        let t = &res.tables[0];
        let mut sums: std::collections::BTreeMap<String, f64> = Default::default();
        for row in &t.rows {
            *sums.entry(format!("{}-{}", row[0], row[1])).or_default() +=
                row[3].parse::<f64>().unwrap();
        }
        assert!(!sums.is_empty());
        for (k, s) in sums {
            assert!((s - 1.0).abs() < 1e-9, "rep {k} weights sum {s}");
        }
    }
}
