//! Synthetic mixed-shift benchmark data, a delimited-text tabular loader,
//! and train/test environment splits.
//!
//! The simulation draws, per sample: a time index `t ~ U[0,1]`, a balanced
//! binary label, an invariant feature that agrees with the label with
//! probability `p_v` (constant in time), and a spurious feature that agrees
//! with probability `p_s(t)` (stepping at `t = 0.5` between the two training
//! segments). Test environments redraw the spurious agreement at fixed
//! probabilities so the threshold-rule accuracies are exactly `p_v` and
//! `p_s` in expectation, which makes the benchmark self-auditing.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::numerics::{DenseMatrix, Rng};

/// One environment's worth of samples (also used for minibatches).
#[derive(Debug, Clone)]
pub struct Batch {
    pub features: DenseMatrix,
    pub labels: Vec<f64>,
    /// Per-sample observed environment id, when environments are known.
    pub env_ids: Option<Vec<usize>>,
    /// Auxiliary variables for environment inference (the time index here).
    pub aux: Option<DenseMatrix>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Row-gathered sub-batch.
    pub fn gather(&self, indices: &[usize]) -> Batch {
        Batch {
            features: self.features.gather_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            env_ids: self
                .env_ids
                .as_ref()
                .map(|ids| indices.iter().map(|&i| ids[i]).collect()),
            aux: self.aux.as_ref().map(|a| a.gather_rows(indices)),
        }
    }

    /// Pools environment batches into one batch whose `env_ids` come from
    /// the position of each source batch.
    pub fn concat_envs(envs: &[Batch]) -> Result<Batch> {
        if envs.is_empty() {
            return Err(Error::input("no environments to pool"));
        }
        let dim = envs[0].features.cols();
        let total: usize = envs.iter().map(Batch::len).sum();
        let mut features = DenseMatrix::zeros(total, dim);
        let mut labels = Vec::with_capacity(total);
        let mut env_ids = Vec::with_capacity(total);
        let all_aux = envs.iter().all(|b| b.aux.is_some());
        let aux_dim = if all_aux {
            envs[0].aux.as_ref().unwrap().cols()
        } else {
            0
        };
        let mut aux = if all_aux {
            Some(DenseMatrix::zeros(total, aux_dim))
        } else {
            None
        };
        let mut row = 0;
        for (e, b) in envs.iter().enumerate() {
            if b.features.cols() != dim {
                return Err(Error::shape("feature dimensions differ across environments".to_string()));
            }
            for i in 0..b.len() {
                features.row_mut(row).copy_from_slice(b.features.row(i));
                labels.push(b.labels[i]);
                env_ids.push(e);
                if let Some(a) = aux.as_mut() {
                    a.row_mut(row)
                        .copy_from_slice(b.aux.as_ref().unwrap().row(i));
                }
                row += 1;
            }
        }
        Ok(Batch {
            features,
            labels,
            env_ids: Some(env_ids),
            aux,
        })
    }
}

/// Named train/test environment splits.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub train_envs: Vec<Batch>,
    pub test_envs: Vec<Batch>,
}

impl Dataset {
    pub fn feature_dim(&self) -> usize {
        self.train_envs
            .first()
            .map(|b| b.features.cols())
            .unwrap_or(0)
    }

    pub fn n_train_envs(&self) -> usize {
        self.train_envs.len()
    }
}

/// Generator configuration for the mixed-shift simulation.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulationSpec {
    pub n_per_env: usize,
    /// Invariant-feature agreement probability, in (0.5, 1].
    pub p_v: f64,
    /// Spurious agreement on the two training time segments.
    pub p_s_train: (f64, f64),
    /// One test environment per entry.
    pub p_s_test: Vec<f64>,
    /// Magnitudes (a, b) of the invariant and spurious features.
    pub feature_scale: (f64, f64),
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SimulationSpec {
    fn default() -> Self {
        SimulationSpec {
            n_per_env: 5000,
            p_v: 0.8,
            p_s_train: (0.999, 0.9),
            p_s_test: vec![0.9, 0.7, 0.5, 0.3, 0.1],
            feature_scale: (1.0, 1.0),
            noise_std: 0.1,
            seed: 0,
        }
    }
}

impl SimulationSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_per_env == 0 {
            return Err(Error::config("n_per_env must be positive"));
        }
        if !(self.p_v > 0.5 && self.p_v <= 1.0) {
            return Err(Error::config(format!("p_v must lie in (0.5, 1], got {}", self.p_v)));
        }
        for p in [self.p_s_train.0, self.p_s_train.1]
            .iter()
            .chain(self.p_s_test.iter())
        {
            if !(0.0..=1.0).contains(p) {
                return Err(Error::config(format!("spurious probability {p} outside [0,1]")));
            }
        }
        if self.p_s_test.is_empty() {
            return Err(Error::config("need at least one test environment"));
        }
        if !(self.feature_scale.0 > 0.0 && self.feature_scale.1 > 0.0) {
            return Err(Error::config("feature scales must be positive"));
        }
        if self.noise_std < 0.0 {
            return Err(Error::config("noise_std must be nonnegative"));
        }
        Ok(())
    }
}

fn simulate_env(
    rng: &mut Rng,
    n: usize,
    t_range: (f64, f64),
    p_s: Option<f64>,
    spec: &SimulationSpec,
    env_id: usize,
) -> Batch {
    let (a, b) = spec.feature_scale;
    let mut features = DenseMatrix::zeros(n, 2);
    let mut labels = Vec::with_capacity(n);
    let mut aux = DenseMatrix::zeros(n, 1);
    for i in 0..n {
        let t = rng.uniform(t_range.0, t_range.1);
        let y = if rng.bernoulli(0.5) { 1.0 } else { 0.0 };
        let y_inv = if rng.bernoulli(spec.p_v) { y } else { 1.0 - y };
        let x_inv = (2.0 * y_inv - 1.0) * a + rng.normal_scaled(0.0, spec.noise_std);
        let p = p_s.unwrap_or(if t < 0.5 { spec.p_s_train.0 } else { spec.p_s_train.1 });
        let y_sp = if rng.bernoulli(p) { y } else { 1.0 - y };
        let x_sp = (2.0 * y_sp - 1.0) * b + rng.normal_scaled(0.0, spec.noise_std);
        features.set(i, 0, x_inv);
        features.set(i, 1, x_sp);
        labels.push(y);
        aux.set(i, 0, t);
    }
    Batch {
        features,
        labels,
        env_ids: Some(vec![env_id; n]),
        aux: Some(aux),
    }
}

/// Seeded mixed-shift dataset: two training time segments plus one test
/// environment per `p_s_test` entry. Feature column 0 is invariant,
/// column 1 spurious; the auxiliary column is the time index.
pub fn generate_simulation(spec: &SimulationSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = Rng::new(spec.seed);
    let train_envs = vec![
        simulate_env(&mut rng, spec.n_per_env, (0.0, 0.5), None, spec, 0),
        simulate_env(&mut rng, spec.n_per_env, (0.5, 1.0), None, spec, 1),
    ];
    let test_envs: Vec<Batch> = spec
        .p_s_test
        .iter()
        .enumerate()
        .map(|(k, &q)| simulate_env(&mut rng, spec.n_per_env, (0.0, 1.0), Some(q), spec, k))
        .collect();
    Ok(Dataset {
        train_envs,
        test_envs,
    })
}

/// Accuracies of the two threshold reference rules on one environment.
#[derive(Debug, Clone, Copy)]
pub struct RuleAccuracy {
    /// Predict the label from the sign of the invariant feature.
    pub invariant: f64,
    /// Predict the label from the sign of the spurious feature.
    pub spurious: f64,
}

/// Reference accuracies per environment.
#[derive(Debug, Clone)]
pub struct RuleOracle {
    pub train: Vec<RuleAccuracy>,
    pub test: Vec<RuleAccuracy>,
}

fn rule_accuracy(batch: &Batch) -> RuleAccuracy {
    let n = batch.len() as f64;
    let mut inv_hits = 0.0;
    let mut sp_hits = 0.0;
    for i in 0..batch.len() {
        let y = batch.labels[i];
        if (batch.features.get(i, 0) > 0.0) == (y == 1.0) {
            inv_hits += 1.0;
        }
        if (batch.features.get(i, 1) > 0.0) == (y == 1.0) {
            sp_hits += 1.0;
        }
    }
    RuleAccuracy {
        invariant: inv_hits / n,
        spurious: sp_hits / n,
    }
}

/// Empirical accuracy of the invariant-only and spurious-only rules per
/// environment; the simulation's self-audit.
pub fn split_metrics_oracle(dataset: &Dataset) -> RuleOracle {
    RuleOracle {
        train: dataset.train_envs.iter().map(rule_accuracy).collect(),
        test: dataset.test_envs.iter().map(rule_accuracy).collect(),
    }
}

/// Role of one column in a delimited file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ColumnRole {
    Feature,
    Label,
    EnvId,
    Aux,
    Ignore,
}

impl ColumnRole {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "feature" => ColumnRole::Feature,
            "label" => ColumnRole::Label,
            "env_id" => ColumnRole::EnvId,
            "aux" => ColumnRole::Aux,
            "ignore" => ColumnRole::Ignore,
            other => return Err(Error::config(format!("unknown column role '{other}'"))),
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            ColumnRole::Feature => "feature",
            ColumnRole::Label => "label",
            ColumnRole::EnvId => "env_id",
            ColumnRole::Aux => "aux",
            ColumnRole::Ignore => "ignore",
        }
    }
}

/// Loader configuration for delimited tabular data.
#[derive(Debug, Clone)]
pub struct LoadSpec {
    pub train_paths: Vec<PathBuf>,
    pub test_paths: Vec<PathBuf>,
    pub roles: Vec<ColumnRole>,
    pub delimiter: char,
    /// Fit per-feature standardization on the train split and apply it to
    /// both splits. Off for generated files whose scales are already set.
    pub standardize: bool,
}

fn check_delimiter(d: char) -> Result<()> {
    if d != ',' && d != '\t' {
        return Err(Error::config(format!("delimiter must be comma or tab, got {d:?}")));
    }
    Ok(())
}

/// Parses one delimited file into a raw (unstandardized) batch.
///
/// The header row is mandatory; cells must be plain numbers with `.` as the
/// decimal point; quoting is rejected outright.
pub fn parse_delimited_file(path: &Path, roles: &[ColumnRole], delimiter: char) -> Result<Batch> {
    check_delimiter(delimiter)?;
    let label_cols = roles.iter().filter(|r| **r == ColumnRole::Label).count();
    if label_cols != 1 {
        return Err(Error::Schema(format!("schema must contain exactly one label column, found {label_cols}")));
    }
    if roles.iter().filter(|r| **r == ColumnRole::EnvId).count() > 1 {
        return Err(Error::Schema("schema has more than one env_id column".to_string()));
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::Schema(format!("{} is empty; a header row is required", path.display())))?;
    let header_cols = header.split(delimiter).count();
    if header_cols != roles.len() {
        return Err(Error::Schema(format!(
            "{} has {} columns but the schema describes {}",
            path.display(),
            header_cols,
            roles.len()
        )));
    }

    let n_features = roles.iter().filter(|r| **r == ColumnRole::Feature).count();
    let n_aux = roles.iter().filter(|r| **r == ColumnRole::Aux).count();
    let mut feat_rows: Vec<f64> = Vec::new();
    let mut aux_rows: Vec<f64> = Vec::new();
    let mut labels = Vec::new();
    let mut env_ids: Vec<usize> = Vec::new();
    let has_env = roles.contains(&ColumnRole::EnvId);
    let mut n_rows = 0usize;

    for (line_idx, line) in lines {
        if line.is_empty() {
            continue;
        }
        let row_no = line_idx + 1; // 1-based, counting the header
        let cells: Vec<&str> = line.split(delimiter).collect();
        if cells.len() != roles.len() {
            return Err(Error::Parse {
                path: path.display().to_string(),
                row: row_no,
                col: 0,
                message: format!("{} cells, expected {}", cells.len(), roles.len()),
            });
        }
        for (c, (cell, role)) in cells.iter().zip(roles).enumerate() {
            let col_no = c + 1;
            if cell.contains('"') {
                return Err(Error::Parse {
                    path: path.display().to_string(),
                    row: row_no,
                    col: col_no,
                    message: "quoted fields are not supported".to_string(),
                });
            }
            match role {
                ColumnRole::Ignore => {}
                ColumnRole::EnvId => {
                    let id: usize = cell.trim().parse().map_err(|_| Error::Parse {
                        path: path.display().to_string(),
                        row: row_no,
                        col: col_no,
                        message: format!("malformed environment id '{cell}'"),
                    })?;
                    env_ids.push(id);
                }
                _ => {
                    let v: f64 = cell.trim().parse().map_err(|_| Error::Parse {
                        path: path.display().to_string(),
                        row: row_no,
                        col: col_no,
                        message: format!("malformed numeric cell '{cell}'"),
                    })?;
                    match role {
                        ColumnRole::Feature => feat_rows.push(v),
                        ColumnRole::Label => labels.push(v),
                        ColumnRole::Aux => aux_rows.push(v),
                        _ => unreachable!(),
                    }
                }
            }
        }
        n_rows += 1;
    }
    let features = DenseMatrix::from_vec(n_rows, n_features, feat_rows)?;
    let aux = if n_aux > 0 {
        Some(DenseMatrix::from_vec(n_rows, n_aux, aux_rows)?)
    } else {
        None
    };
    Ok(Batch {
        features,
        labels,
        env_ids: if has_env { Some(env_ids) } else { None },
        aux,
    })
}

/// Splits a raw batch into per-environment batches by its env_id column;
/// a batch without env ids is one environment.
fn split_by_env(batch: Batch) -> Vec<Batch> {
    match &batch.env_ids {
        None => vec![batch],
        Some(ids) => {
            let mut distinct: Vec<usize> = ids.clone();
            distinct.sort_unstable();
            distinct.dedup();
            if distinct.len() == 1 {
                return vec![batch];
            }
            distinct
                .iter()
                .map(|&e| {
                    let idx: Vec<usize> =
                        (0..batch.len()).filter(|&i| ids[i] == e).collect();
                    batch.gather(&idx)
                })
                .collect()
        }
    }
}

/// Per-column affine standardization fitted on the train split.
#[derive(Debug, Clone)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    /// Fit over all rows of the given batches. Stds below 1e-12 floor to
    /// 1e-12 so constant columns standardize to zero.
    pub fn fit(batches: &[Batch]) -> Standardizer {
        let dim = batches[0].features.cols();
        let mut mean = vec![0.0; dim];
        let mut count = 0.0;
        for b in batches {
            for i in 0..b.len() {
                for (j, m) in mean.iter_mut().enumerate() {
                    *m += b.features.get(i, j);
                }
            }
            count += b.len() as f64;
        }
        for m in &mut mean {
            *m /= count;
        }
        let mut var = vec![0.0; dim];
        for b in batches {
            for i in 0..b.len() {
                for (j, v) in var.iter_mut().enumerate() {
                    let d = b.features.get(i, j) - mean[j];
                    *v += d * d;
                }
            }
        }
        let std = var
            .iter()
            .map(|v| (v / count).sqrt().max(1e-12))
            .collect();
        Standardizer { mean, std }
    }

    pub fn apply(&self, batch: &mut Batch) {
        for i in 0..batch.len() {
            for j in 0..self.mean.len() {
                let v = (batch.features.get(i, j) - self.mean[j]) / self.std[j];
                batch.features.set(i, j, v);
            }
        }
    }
}

/// Loads a delimited dataset: one or more train files and test files, with
/// env_id columns splitting files into environments where present.
pub fn load_delimited(spec: &LoadSpec) -> Result<Dataset> {
    if spec.train_paths.is_empty() || spec.test_paths.is_empty() {
        return Err(Error::config("need at least one train and one test file"));
    }
    let mut train_envs = Vec::new();
    for p in &spec.train_paths {
        train_envs.extend(split_by_env(parse_delimited_file(p, &spec.roles, spec.delimiter)?));
    }
    let mut test_envs = Vec::new();
    for p in &spec.test_paths {
        test_envs.extend(split_by_env(parse_delimited_file(p, &spec.roles, spec.delimiter)?));
    }
    let dim = train_envs[0].features.cols();
    for b in train_envs.iter().chain(test_envs.iter()) {
        if b.features.cols() != dim {
            return Err(Error::Schema("feature dimensionality differs across files".to_string()));
        }
    }
    if spec.standardize {
        let standardizer = Standardizer::fit(&train_envs);
        for b in train_envs.iter_mut().chain(test_envs.iter_mut()) {
            standardizer.apply(b);
        }
    }
    Ok(Dataset {
        train_envs,
        test_envs,
    })
}

/// Writes one batch as delimited text with a header row. Floats use
/// shortest round-trip formatting so files diff cleanly across runs.
pub fn save_delimited(batch: &Batch, path: &Path, delimiter: char) -> Result<()> {
    check_delimiter(delimiter)?;
    let mut out = String::new();
    let d = delimiter;
    let n_feat = batch.features.cols();
    let n_aux = batch.aux.as_ref().map_or(0, DenseMatrix::cols);
    let mut headers: Vec<String> = (0..n_feat).map(|j| format!("x{j}")).collect();
    headers.push("y".to_string());
    if batch.env_ids.is_some() {
        headers.push("env".to_string());
    }
    headers.extend((0..n_aux).map(|j| format!("aux{j}")));
    out.push_str(&headers.join(&d.to_string()));
    out.push('\n');
    for i in 0..batch.len() {
        for j in 0..n_feat {
            let _ = write!(out, "{}{}", batch.features.get(i, j), d);
        }
        let _ = write!(out, "{}", batch.labels[i]);
        if let Some(ids) = &batch.env_ids {
            let _ = write!(out, "{}{}", d, ids[i]);
        }
        if let Some(aux) = &batch.aux {
            for j in 0..n_aux {
                let _ = write!(out, "{}{}", d, aux.get(i, j));
            }
        }
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}
