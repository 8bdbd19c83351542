//! Bagged CART regression forest.
//!
//! Exact greedy variance-reduction splits, bootstrap resampling per tree
//! under a seeded generator, and deterministic tie-breaking (lowest feature
//! index, then lowest threshold). Fitting is single-threaded per call;
//! distinct fits may run concurrently.

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{validate_xy, FittedPredictor, PredictorPayload};
use crate::error::{Error, Result};
use crate::seeds::rng_for;

/// Flat node record. `feature = -1` marks a leaf; interior nodes route rows
/// with `x[feature] <= threshold` to `left`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeNode {
    pub feature: i32,
    pub threshold: f64,
    pub left: i32,
    pub right: i32,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<TreeNode>,
}

impl Tree {
    pub fn predict_row(&self, row: &[f64]) -> f64 {
        let mut i = 0usize;
        loop {
            let node = &self.nodes[i];
            if node.feature < 0 {
                return node.value;
            }
            i = if row[node.feature as usize] <= node.threshold {
                node.left as usize
            } else {
                node.right as usize
            };
        }
    }
}

#[derive(Debug, Clone)]
pub struct ForestOptions {
    pub n_trees: usize,
    pub mtry: usize,
    pub min_leaf: usize,
    pub seed: u64,
    /// Bootstrap resampling per tree; disable to fit every tree on the full
    /// sample (used by interpolation checks).
    pub bootstrap: bool,
    /// Grid-search `mtry in {ceil(p/3), ceil(p/2), p}` and
    /// `min_leaf in {1, 5, 10}` by out-of-bag error before the final fit.
    pub oob_tune: bool,
}

impl ForestOptions {
    pub fn defaults(p: usize, seed: u64) -> Self {
        Self {
            n_trees: 200,
            mtry: p.div_ceil(3).max(1),
            min_leaf: 5,
            seed,
            bootstrap: true,
            oob_tune: false,
        }
    }
}

pub fn fit_forest(x: &DMatrix<f64>, y: &DVector<f64>, opts: &ForestOptions) -> Result<FittedPredictor> {
    validate_xy(x, y)?;
    let n = x.nrows();
    let p = x.ncols();
    if opts.n_trees == 0 {
        return Err(Error::Fit("n_trees must be >= 1".into()));
    }
    if opts.mtry == 0 || opts.mtry > p {
        return Err(Error::Fit(format!("mtry must be in 1..={p}, got {}", opts.mtry)));
    }
    if opts.min_leaf == 0 {
        return Err(Error::Fit("min_leaf must be >= 1".into()));
    }
    if opts.min_leaf > n {
        return Err(Error::Fit(format!(
            "min_leaf {} exceeds sample size {n}",
            opts.min_leaf
        )));
    }

    let chosen = if opts.oob_tune {
        tune_by_oob(x, y, opts)
    } else {
        (opts.mtry, opts.min_leaf)
    };

    let trees = grow_trees(x, y, opts.n_trees, chosen.0, chosen.1, opts.seed, opts.bootstrap).0;
    Ok(FittedPredictor::from_payload(PredictorPayload::Forest {
        n_features: p,
        trees,
    }))
}

fn grow_trees(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    n_trees: usize,
    mtry: usize,
    min_leaf: usize,
    seed: u64,
    bootstrap: bool,
) -> (Vec<Tree>, Vec<Vec<bool>>) {
    let n = x.nrows();
    let mut trees = Vec::with_capacity(n_trees);
    let mut in_bag = Vec::with_capacity(n_trees);
    for t in 0..n_trees {
        let mut rng = rng_for(seed, "tree", t as u64);
        let mut bag = vec![false; n];
        let idx: Vec<u32> = if bootstrap {
            (0..n)
                .map(|_| {
                    let i = rng.random_range(0..n);
                    bag[i] = true;
                    i as u32
                })
                .collect()
        } else {
            bag.iter_mut().for_each(|b| *b = true);
            (0..n as u32).collect()
        };
        trees.push(grow_tree(x, y, idx, mtry, min_leaf, &mut rng));
        in_bag.push(bag);
    }
    (trees, in_bag)
}

fn grow_tree(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    root_idx: Vec<u32>,
    mtry: usize,
    min_leaf: usize,
    rng: &mut ChaCha8Rng,
) -> Tree {
    let mut nodes: Vec<TreeNode> = Vec::new();
    // Work items: (node slot, sample indices).
    let mut stack: Vec<(usize, Vec<u32>)> = Vec::new();
    nodes.push(placeholder());
    stack.push((0, root_idx));

    while let Some((slot, idx)) = stack.pop() {
        let (sum, sum_sq) = idx.iter().fold((0.0, 0.0), |(s, ss), &i| {
            let v = y[i as usize];
            (s + v, ss + v * v)
        });
        let len = idx.len() as f64;
        let mean = sum / len;
        let variance = sum_sq / len - mean * mean;

        let split = if idx.len() >= 2 * min_leaf && variance > 0.0 {
            best_split(x, y, &idx, mtry, min_leaf, rng)
        } else {
            None
        };

        match split {
            None => {
                nodes[slot] = TreeNode {
                    feature: -1,
                    threshold: 0.0,
                    left: -1,
                    right: -1,
                    value: mean,
                };
            }
            Some((feature, threshold)) => {
                let (left_idx, right_idx): (Vec<u32>, Vec<u32>) = idx
                    .into_iter()
                    .partition(|&i| x[(i as usize, feature)] <= threshold);
                let left_slot = nodes.len();
                nodes.push(placeholder());
                let right_slot = nodes.len();
                nodes.push(placeholder());
                nodes[slot] = TreeNode {
                    feature: feature as i32,
                    threshold,
                    left: left_slot as i32,
                    right: right_slot as i32,
                    value: mean,
                };
                stack.push((right_slot, right_idx));
                stack.push((left_slot, left_idx));
            }
        }
    }
    Tree { nodes }
}

fn placeholder() -> TreeNode {
    TreeNode {
        feature: -1,
        threshold: 0.0,
        left: -1,
        right: -1,
        value: 0.0,
    }
}

/// Exact best variance-reduction split over an mtry-subset of features.
/// Candidate features are scanned in ascending index order and thresholds in
/// ascending value order with strictly-better acceptance, so ties resolve to
/// the lowest feature index, then the lowest threshold.
fn best_split(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    idx: &[u32],
    mtry: usize,
    min_leaf: usize,
    rng: &mut ChaCha8Rng,
) -> Option<(usize, f64)> {
    let p = x.ncols();
    let mut features: Vec<usize> = if mtry >= p {
        (0..p).collect()
    } else {
        sample(rng, p, mtry).into_iter().collect()
    };
    features.sort_unstable();

    let total: f64 = idx.iter().map(|&i| y[i as usize]).sum();
    let len = idx.len();
    let mut best: Option<(f64, usize, f64)> = None;
    let mut pairs: Vec<(f64, f64)> = Vec::with_capacity(len);

    for &f in &features {
        pairs.clear();
        pairs.extend(idx.iter().map(|&i| (x[(i as usize, f)], y[i as usize])));
        pairs.sort_unstable_by(|a, b| a.0.partial_cmp(&b.0).unwrap());

        let mut left_sum = 0.0;
        for c in 1..len {
            left_sum += pairs[c - 1].1;
            if c < min_leaf || len - c < min_leaf {
                continue;
            }
            let (lo, hi) = (pairs[c - 1].0, pairs[c].0);
            if lo >= hi {
                continue;
            }
            let right_sum = total - left_sum;
            let gain =
                left_sum * left_sum / c as f64 + right_sum * right_sum / (len - c) as f64;
            if best.map_or(true, |(g, _, _)| gain > g) {
                best = Some((gain, f, lo + 0.5 * (hi - lo)));
            }
        }
    }
    best.map(|(_, f, t)| (f, t))
}

fn tune_by_oob(x: &DMatrix<f64>, y: &DVector<f64>, opts: &ForestOptions) -> (usize, usize) {
    let p = x.ncols();
    let n = x.nrows();
    let mtry_grid = {
        let mut g = vec![p.div_ceil(3).max(1), p.div_ceil(2).max(1), p];
        g.dedup();
        g
    };
    let leaf_grid: Vec<usize> = [1usize, 5, 10].iter().copied().filter(|&m| m <= n).collect();
    let mut best = (f64::INFINITY, opts.mtry, opts.min_leaf);
    for (gi, &mtry) in mtry_grid.iter().enumerate() {
        for (gj, &min_leaf) in leaf_grid.iter().enumerate() {
            let seed = crate::seeds::derive_seed(opts.seed, "oob-tune", (gi * 8 + gj) as u64);
            let (trees, in_bag) = grow_trees(x, y, opts.n_trees, mtry, min_leaf, seed, true);
            let mut sse = 0.0;
            let mut count = 0usize;
            let mut row = vec![0.0; p];
            for i in 0..n {
                let mut s = 0.0;
                let mut k = 0usize;
                for (t, tree) in trees.iter().enumerate() {
                    if !in_bag[t][i] {
                        for c in 0..p {
                            row[c] = x[(i, c)];
                        }
                        s += tree.predict_row(&row);
                        k += 1;
                    }
                }
                if k > 0 {
                    let pred = s / k as f64;
                    sse += (y[i] - pred) * (y[i] - pred);
                    count += 1;
                }
            }
            if count > 0 {
                let mse = sse / count as f64;
                if mse < best.0 {
                    best = (mse, mtry, min_leaf);
                }
            }
        }
    }
    (best.1, best.2)
}
