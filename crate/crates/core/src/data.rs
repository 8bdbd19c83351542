//! Datasets, group structure, half-splits, and CSV ingestion.
//!
//! All types here are immutable after construction and safe to share across
//! threads. Group labels from input files are remapped to contiguous ids
//! `1..=L` in label-sorted order; the original label is retained for
//! reporting.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeds::rng_for;

/// Smallest usable group: both halves of the split must be non-empty and the
/// larger half must carry at least two rows.
pub const MIN_GROUP_SIZE: usize = 3;

/// One labeled source dataset together with its A/B half-split.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceGroup {
    group_id: usize,
    label: i64,
    covariates: DMatrix<f64>,
    outcomes: DVector<f64>,
    split_a: Vec<usize>,
    split_b: Vec<usize>,
}

impl SourceGroup {
    /// Build a group with the deterministic split policy: the first
    /// `floor(n/2)` rows go to half A.
    pub fn new(
        group_id: usize,
        label: i64,
        covariates: DMatrix<f64>,
        outcomes: DVector<f64>,
    ) -> Result<Self> {
        let n = covariates.nrows();
        let split_a: Vec<usize> = (0..n / 2).collect();
        let split_b: Vec<usize> = (n / 2..n).collect();
        Self::with_split(group_id, label, covariates, outcomes, split_a, split_b)
    }

    /// Build a group with an explicit split; validates the partition.
    pub fn with_split(
        group_id: usize,
        label: i64,
        covariates: DMatrix<f64>,
        outcomes: DVector<f64>,
        split_a: Vec<usize>,
        split_b: Vec<usize>,
    ) -> Result<Self> {
        let n = covariates.nrows();
        if n < MIN_GROUP_SIZE {
            return Err(Error::InsufficientData(format!(
                "group {label} has {n} rows, need at least {MIN_GROUP_SIZE}"
            )));
        }
        if outcomes.len() != n {
            return Err(Error::Shape(format!(
                "group {label}: {n} covariate rows but {} outcomes",
                outcomes.len()
            )));
        }
        if covariates.iter().any(|v| !v.is_finite()) || outcomes.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "group {label} contains NaN or infinite values"
            )));
        }
        let mut seen = vec![false; n];
        for &i in split_a.iter().chain(split_b.iter()) {
            if i >= n || seen[i] {
                return Err(Error::Invariant(format!(
                    "group {label}: split indices do not partition 0..{n}"
                )));
            }
            seen[i] = true;
        }
        if seen.iter().any(|&s| !s) || split_a.is_empty() || split_b.is_empty() {
            return Err(Error::Invariant(format!(
                "group {label}: split halves must cover all rows and be non-empty"
            )));
        }
        Ok(Self {
            group_id,
            label,
            covariates,
            outcomes,
            split_a,
            split_b,
        })
    }

    pub fn group_id(&self) -> usize {
        self.group_id
    }

    /// Original label from the input file.
    pub fn label(&self) -> i64 {
        self.label
    }

    pub fn n(&self) -> usize {
        self.covariates.nrows()
    }

    pub fn p(&self) -> usize {
        self.covariates.ncols()
    }

    pub fn covariates(&self) -> &DMatrix<f64> {
        &self.covariates
    }

    pub fn outcomes(&self) -> &DVector<f64> {
        &self.outcomes
    }

    pub fn split_a(&self) -> &[usize] {
        &self.split_a
    }

    pub fn split_b(&self) -> &[usize] {
        &self.split_b
    }

    /// Rows of the requested half as a fresh matrix/vector pair.
    pub fn half(&self, which: Half) -> (DMatrix<f64>, DVector<f64>) {
        let idx = match which {
            Half::A => &self.split_a,
            Half::B => &self.split_b,
        };
        self.rows(idx)
    }

    /// Extract the given rows (by index) as a matrix/vector pair.
    pub fn rows(&self, idx: &[usize]) -> (DMatrix<f64>, DVector<f64>) {
        let p = self.p();
        let mut x = DMatrix::zeros(idx.len(), p);
        let mut y = DVector::zeros(idx.len());
        for (r, &i) in idx.iter().enumerate() {
            for c in 0..p {
                x[(r, c)] = self.covariates[(i, c)];
            }
            y[r] = self.outcomes[i];
        }
        (x, y)
    }
}

/// Which half of a group's split.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Half {
    A,
    B,
}

/// Return a copy of `group` with half A replaced by a uniformly random
/// `floor(n/2)`-subset under the seeded generator. Deterministic given seed.
pub fn make_random_split(group: &SourceGroup, seed: u64) -> Result<SourceGroup> {
    let n = group.n();
    if n < 4 {
        return Err(Error::InsufficientData(format!(
            "random split needs at least 4 rows, group {} has {n}",
            group.label()
        )));
    }
    let k = n / 2;
    let mut rng = rng_for(seed, "random-split", group.group_id() as u64);
    let mut a: Vec<usize> = sample(&mut rng, n, k).into_iter().collect();
    a.sort_unstable();
    let in_a: Vec<bool> = {
        let mut m = vec![false; n];
        for &i in &a {
            m[i] = true;
        }
        m
    };
    let b: Vec<usize> = (0..n).filter(|&i| !in_a[i]).collect();
    SourceGroup::with_split(
        group.group_id(),
        group.label(),
        group.covariates().clone(),
        group.outcomes().clone(),
        a,
        b,
    )
}

/// Unlabeled target covariates.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetSample {
    covariates: DMatrix<f64>,
}

impl TargetSample {
    pub fn new(covariates: DMatrix<f64>) -> Result<Self> {
        if covariates.nrows() == 0 {
            return Err(Error::InsufficientData(
                "target sample has no rows".into(),
            ));
        }
        if covariates.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(
                "target sample contains NaN or infinite values".into(),
            ));
        }
        Ok(Self { covariates })
    }

    pub fn n(&self) -> usize {
        self.covariates.nrows()
    }

    pub fn p(&self) -> usize {
        self.covariates.ncols()
    }

    pub fn covariates(&self) -> &DMatrix<f64> {
        &self.covariates
    }

    /// Shape check against a reference feature count.
    pub fn check_p(&self, expected: usize) -> Result<()> {
        if self.p() != expected {
            return Err(Error::Shape(format!(
                "target sample has {} columns, expected {expected}",
                self.p()
            )));
        }
        Ok(())
    }
}

/// A point on the probability simplex.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct MixtureSpec {
    weights: Vec<f64>,
}

impl MixtureSpec {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::Shape("mixture weights must be non-empty".into()));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Invariant(format!(
                "mixture weights must be finite and non-negative, got {weights:?}"
            )));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::Invariant(format!(
                "mixture weights sum to {sum}, expected 1 within 1e-12"
            )));
        }
        Ok(Self { weights })
    }

    pub fn uniform(l: usize) -> Self {
        Self {
            weights: vec![1.0 / l as f64; l],
        }
    }

    /// The vertex `e_l` (0-based index) of the simplex.
    pub fn vertex(l: usize, len: usize) -> Self {
        let mut w = vec![0.0; len];
        w[l] = 1.0;
        Self { weights: w }
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn l2_distance(&self, other: &MixtureSpec) -> f64 {
        self.weights
            .iter()
            .zip(other.weights.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

impl TryFrom<Vec<f64>> for MixtureSpec {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        MixtureSpec::new(v)
    }
}

impl From<MixtureSpec> for Vec<f64> {
    fn from(m: MixtureSpec) -> Vec<f64> {
        m.weights
    }
}

fn parse_cell(raw: &str, row: usize, column: &str) -> Result<f64> {
    let v: f64 = raw.trim().parse().map_err(|_| Error::Parse {
        row,
        column: column.to_string(),
        message: format!("expected a number, got {raw:?}"),
    })?;
    if !v.is_finite() {
        return Err(Error::Parse {
            row,
            column: column.to_string(),
            message: format!("non-finite value {raw:?}"),
        });
    }
    Ok(v)
}

/// Ingest a labeled multi-group CSV. One `SourceGroup` per distinct label in
/// the group column, row order preserved within each group, deterministic
/// split assigned. Labels are remapped to contiguous ids in sorted order.
pub fn ingest_source_csv(
    path: impl AsRef<Path>,
    group_column: &str,
    outcome_column: &str,
) -> Result<Vec<SourceGroup>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path.as_ref())
        .map_err(|e| Error::Schema(format!("cannot read CSV: {e}")))?;
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| Error::Schema(format!("missing header row: {e}")))?
        .iter()
        .map(str::to_string)
        .collect();
    let group_idx = headers
        .iter()
        .position(|h| h == group_column)
        .ok_or_else(|| Error::Schema(format!("group column {group_column:?} not found")))?;
    let outcome_idx = headers
        .iter()
        .position(|h| h == outcome_column)
        .ok_or_else(|| Error::Schema(format!("outcome column {outcome_column:?} not found")))?;
    if group_idx == outcome_idx {
        return Err(Error::Schema(
            "group and outcome columns must differ".into(),
        ));
    }
    let feature_cols: Vec<usize> = (0..headers.len())
        .filter(|&i| i != group_idx && i != outcome_idx)
        .collect();
    if feature_cols.is_empty() {
        return Err(Error::Schema("no feature columns in CSV".into()));
    }

    let mut by_label: BTreeMap<i64, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for (r, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Parse {
            row: r + 1,
            column: "<record>".into(),
            message: e.to_string(),
        })?;
        let raw_label = record.get(group_idx).unwrap_or("");
        let label: i64 = raw_label.trim().parse().map_err(|_| Error::Parse {
            row: r + 1,
            column: group_column.to_string(),
            message: format!("expected an integer group label, got {raw_label:?}"),
        })?;
        let y = parse_cell(record.get(outcome_idx).unwrap_or(""), r + 1, outcome_column)?;
        let entry = by_label.entry(label).or_default();
        for &c in &feature_cols {
            let v = parse_cell(record.get(c).unwrap_or(""), r + 1, &headers[c])?;
            entry.0.push(v);
        }
        entry.1.push(y);
    }
    if by_label.is_empty() {
        return Err(Error::Parse {
            row: 1,
            column: "<file>".into(),
            message: "no data rows".into(),
        });
    }

    let p = feature_cols.len();
    let mut groups = Vec::with_capacity(by_label.len());
    for (gid, (label, (flat, ys))) in by_label.into_iter().enumerate() {
        let n = ys.len();
        let x = DMatrix::from_row_slice(n, p, &flat);
        let y = DVector::from_vec(ys);
        groups.push(SourceGroup::new(gid + 1, label, x, y)?);
    }
    Ok(groups)
}

/// Ingest an unlabeled numeric CSV as the target covariate sample.
pub fn ingest_target_csv(path: impl AsRef<Path>) -> Result<TargetSample> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path.as_ref())
        .map_err(|e| Error::Schema(format!("cannot read CSV: {e}")))?;
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| Error::Parse {
            row: 0,
            column: "<header>".into(),
            message: e.to_string(),
        })?
        .iter()
        .map(str::to_string)
        .collect();
    if headers.is_empty() {
        return Err(Error::Parse {
            row: 0,
            column: "<header>".into(),
            message: "empty file".into(),
        });
    }
    let mut flat: Vec<f64> = Vec::new();
    let mut n = 0usize;
    for (r, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Parse {
            row: r + 1,
            column: "<record>".into(),
            message: e.to_string(),
        })?;
        for (c, cell) in record.iter().enumerate() {
            flat.push(parse_cell(cell, r + 1, &headers[c])?);
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::Parse {
            row: 1,
            column: "<file>".into(),
            message: "no data rows".into(),
        });
    }
    TargetSample::new(DMatrix::from_row_slice(n, headers.len(), &flat))
}

/// Write groups back to CSV with the same column layout that
/// [`ingest_source_csv`] expects. Values are written in shortest
/// round-trippable form so re-ingestion reproduces the matrices bit-for-bit.
pub fn write_source_csv(
    path: impl AsRef<Path>,
    groups: &[SourceGroup],
    group_column: &str,
    outcome_column: &str,
) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path.as_ref())?);
    let p = groups.first().map(|g| g.p()).unwrap_or(0);
    let mut header = vec![group_column.to_string()];
    header.extend((1..=p).map(|j| format!("x{j}")));
    header.push(outcome_column.to_string());
    writeln!(file, "{}", header.join(","))?;
    for g in groups {
        for i in 0..g.n() {
            let mut row = vec![g.label().to_string()];
            row.extend((0..p).map(|c| format!("{}", g.covariates()[(i, c)])));
            row.push(format!("{}", g.outcomes()[i]));
            writeln!(file, "{}", row.join(","))?;
        }
    }
    Ok(())
}

/// Write a plain numeric matrix as CSV with `x1..xp` headers.
pub fn write_matrix_csv(path: impl AsRef<Path>, x: &DMatrix<f64>) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path.as_ref())?);
    let header: Vec<String> = (1..=x.ncols()).map(|j| format!("x{j}")).collect();
    writeln!(file, "{}", header.join(","))?;
    for i in 0..x.nrows() {
        let row: Vec<String> = (0..x.ncols()).map(|c| format!("{}", x[(i, c)])).collect();
        writeln!(file, "{}", row.join(","))?;
    }
    Ok(())
}
