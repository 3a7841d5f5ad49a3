//! Library implementations of the CLI commands: `generate`, `train`,
//! `sweep`, and `verify`. The binary is a thin argument parser over these,
//! and the crate examples call them directly.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::data::{
    generate_simulation, load_delimited, save_delimited, ColumnRole, Dataset, LoadSpec,
    SimulationSpec,
};
use crate::error::{Error, Result};
use crate::logging;
use crate::manifest::RunManifest;
use crate::numerics::{Activation, LossSpec, OptimKind};
use crate::trainer::{train, Method, RunReport, StepSizes, TrainConfig};
use crate::verify::{run_all, CheckResult, VerifyOptions};
use crate::weighting::ScoreInputs;

/// Index of the files and schema a generated dataset directory holds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    /// Name and version of the generating process.
    pub generator: String,
    pub train_files: Vec<String>,
    pub test_files: Vec<String>,
    pub schema: Vec<String>,
    pub delimiter: String,
    pub standardize: bool,
}

fn delimiter_char(name: &str) -> Result<char> {
    match name {
        "comma" => Ok(','),
        "tab" => Ok('\t'),
        other => Err(Error::config(format!("delimiter must be comma or tab, got '{other}'"))),
    }
}

/// Reads the `sim.*` section into a generator spec.
pub fn simulation_spec_from(cfg: &Config) -> Result<SimulationSpec> {
    let d = SimulationSpec::default();
    let p_s_train = cfg.get_f64_list("sim.p_s_train", &[d.p_s_train.0, d.p_s_train.1])?;
    if p_s_train.len() != 2 {
        return Err(Error::config("sim.p_s_train needs exactly two values"));
    }
    let feature_scale =
        cfg.get_f64_list("sim.feature_scale", &[d.feature_scale.0, d.feature_scale.1])?;
    if feature_scale.len() != 2 {
        return Err(Error::config("sim.feature_scale needs exactly two values"));
    }
    let spec = SimulationSpec {
        n_per_env: cfg.get_usize("sim.n_per_env", d.n_per_env)?,
        p_v: cfg.get_f64("sim.p_v", d.p_v)?,
        p_s_train: (p_s_train[0], p_s_train[1]),
        p_s_test: cfg.get_f64_list("sim.p_s_test", &d.p_s_test)?,
        feature_scale: (feature_scale[0], feature_scale[1]),
        noise_std: cfg.get_f64("sim.noise_std", d.noise_std)?,
        seed: cfg.get_u64("sim.seed", d.seed)?,
    };
    spec.validate()?;
    Ok(spec)
}

/// Reads the `train.*` section into a trainer config.
pub fn train_config_from(cfg: &Config) -> Result<TrainConfig> {
    let d = TrainConfig::default();
    let method = Method::parse(&cfg.require_str("train.method")?)?;
    let loss = match cfg.get_str("train.loss", "bce").as_str() {
        "bce" => LossSpec::BceWithLogit,
        "mse" => LossSpec::Mse,
        "cross_entropy" => LossSpec::CrossEntropy,
        other => return Err(Error::config(format!("unknown loss '{other}'"))),
    };
    let tv_variant = match cfg.get_str("train.tv_variant", "l1").as_str() {
        "l1" => crate::invariance::TvVariant::L1,
        "l2" => crate::invariance::TvVariant::L2,
        other => return Err(Error::config(format!("unknown tv variant '{other}'"))),
    };
    let activation = match cfg.get_str("train.activation", "tanh").as_str() {
        "tanh" => Activation::Tanh,
        "relu" => Activation::Relu,
        "identity" => Activation::Identity,
        other => return Err(Error::config(format!("unknown activation '{other}'"))),
    };
    let phi_optimizer = match cfg.get_str("train.phi_optimizer", "adam").as_str() {
        "adam" => OptimKind::adam_default(),
        "sgd" => OptimKind::Sgd,
        other => return Err(Error::config(format!("unknown optimizer '{other}'"))),
    };
    let tail_inputs = match cfg.get_str("train.tail_inputs", "features").as_str() {
        "features" => ScoreInputs::Features,
        "features_loss" => ScoreInputs::FeaturesPlusDetachedLoss,
        other => return Err(Error::config(format!("unknown tail input mode '{other}'"))),
    };
    let to_dims = |v: Vec<u64>| v.into_iter().map(|x| x as usize).collect::<Vec<usize>>();
    let tc = TrainConfig {
        method,
        loss,
        beta: cfg.get_f64("train.beta", d.beta)?,
        gamma: cfg.get_f64("train.gamma", d.gamma)?,
        lambda_fixed: cfg.get_f64("train.lambda_fixed", d.lambda_fixed)?,
        tv_variant,
        epochs: cfg.get_usize("train.epochs", d.epochs)?,
        batch_size: cfg.get_usize("train.batch_size", d.batch_size)?,
        step_sizes: StepSizes {
            phi: cfg.get_f64("train.lr_phi", d.step_sizes.phi)?,
            theta: cfg.get_f64("train.lr_theta", d.step_sizes.theta)?,
            psi: cfg.get_f64("train.lr_psi", d.step_sizes.psi)?,
            eta: cfg.get_f64("train.lr_eta", d.step_sizes.eta)?,
        },
        k_inner: cfg.get_usize("train.k_inner", d.k_inner)?,
        seed: cfg.get_u64("train.seed", d.seed)?,
        hidden: to_dims(cfg.get_u64_list("train.hidden", &[8])?),
        activation,
        out_dim: cfg.get_usize("train.out_dim", d.out_dim)?,
        score_hidden: to_dims(cfg.get_u64_list("train.score_hidden", &[8])?),
        tail_inputs,
        free_scores: cfg.get_bool("train.free_scores", d.free_scores)?,
        n_latent_envs: cfg.get_usize("train.n_latent_envs", d.n_latent_envs)?,
        infer_hidden: to_dims(cfg.get_u64_list("train.infer_hidden", &[8])?),
        temperature: cfg.get_f64("train.temperature", d.temperature)?,
        psi_init: cfg.get_f64("train.psi_init", d.psi_init)?,
        epsilon: cfg.get_f64("train.epsilon", d.epsilon)?,
        group_dro_step: cfg.get_f64("train.group_dro_step", d.group_dro_step)?,
        phi_optimizer,
        freeze_assignments_to_truth: cfg
            .get_bool("train.freeze_assignments_to_truth", false)?,
    };
    tc.validate()?;
    Ok(tc)
}

fn roles_from(schema: &[String]) -> Result<Vec<ColumnRole>> {
    schema.iter().map(|s| ColumnRole::parse(s)).collect()
}

/// Resolves the dataset a run trains on: a generated dataset directory, an
/// explicit file list, or an in-memory simulation.
pub fn dataset_from(cfg: &Config) -> Result<Dataset> {
    if cfg.has("data.dir") {
        let dir = PathBuf::from(cfg.require_str("data.dir")?);
        let manifest_path = dir.join("dataset.json");
        let text = std::fs::read_to_string(&manifest_path)
            .map_err(|e| Error::io(manifest_path.display().to_string(), e))?;
        let dm: DatasetManifest = serde_json::from_str(&text)
            .map_err(|e| Error::config(format!("{}: {e}", manifest_path.display())))?;
        let spec = LoadSpec {
            train_paths: dm.train_files.iter().map(|f| dir.join(f)).collect(),
            test_paths: dm.test_files.iter().map(|f| dir.join(f)).collect(),
            roles: roles_from(&dm.schema)?,
            delimiter: delimiter_char(&dm.delimiter)?,
            standardize: dm.standardize,
        };
        return load_delimited(&spec);
    }
    if cfg.has("data.train_files") {
        let spec = LoadSpec {
            train_paths: cfg
                .get_str_list("data.train_files", &[])?
                .into_iter()
                .map(PathBuf::from)
                .collect(),
            test_paths: cfg
                .get_str_list("data.test_files", &[])?
                .into_iter()
                .map(PathBuf::from)
                .collect(),
            roles: roles_from(&cfg.get_str_list("data.schema", &[])?)?,
            delimiter: delimiter_char(&cfg.get_str("data.delimiter", "comma"))?,
            standardize: cfg.get_bool("data.standardize", true)?,
        };
        return load_delimited(&spec);
    }
    if cfg.get_str("data.kind", "simulation") == "simulation" {
        return generate_simulation(&simulation_spec_from(cfg)?);
    }
    Err(Error::config(
        "no dataset: set data.dir, data.train_files, or data.kind = simulation",
    ))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))
}

/// Generates the simulation benchmark to delimited files plus manifests.
pub fn cmd_generate(cfg: &Config, out_dir: &Path) -> Result<()> {
    let spec = simulation_spec_from(cfg)?;
    let manifest = RunManifest::begin("generate", spec.seed);
    ensure_dir(out_dir)?;
    let ds = generate_simulation(&spec)?;
    let mut train_files = Vec::new();
    let mut test_files = Vec::new();
    for (i, batch) in ds.train_envs.iter().enumerate() {
        let name = format!("train_{i}.csv");
        save_delimited(batch, &out_dir.join(&name), ',')?;
        train_files.push(name);
    }
    for (i, batch) in ds.test_envs.iter().enumerate() {
        let name = format!("test_{i}.csv");
        save_delimited(batch, &out_dir.join(&name), ',')?;
        test_files.push(name);
    }
    let schema: Vec<String> = std::iter::repeat("feature".to_string())
        .take(2)
        .chain(["label".to_string(), "env_id".to_string(), "aux".to_string()])
        .collect();
    let dm = DatasetManifest {
        generator: "mixed-shift-simulation-v1".to_string(),
        train_files,
        test_files,
        schema,
        delimiter: "comma".to_string(),
        // Generated features already carry the configured scales.
        standardize: false,
    };
    let dm_json = serde_json::to_string_pretty(&dm)
        .map_err(|e| Error::config(format!("dataset manifest serialization: {e}")))?;
    std::fs::write(out_dir.join("dataset.json"), dm_json)
        .map_err(|e| Error::io(out_dir.join("dataset.json").display().to_string(), e))?;
    cfg.check_unused()?;
    manifest.finish(cfg.resolved(), &out_dir.join("manifest.json"))?;
    logging::info(format!(
        "generated {} train and {} test environments into {}",
        ds.train_envs.len(),
        ds.test_envs.len(),
        out_dir.display()
    ));
    Ok(())
}

/// One line per epoch plus a final summary record.
#[derive(Serialize)]
struct EpochLine<'a> {
    epoch: &'a crate::trainer::EpochRecord,
}

#[derive(Serialize)]
struct SummaryLine<'a> {
    summary: Summary<'a>,
}

#[derive(Serialize)]
struct Summary<'a> {
    method: &'a str,
    seed: u64,
    metric: crate::trainer::MetricKind,
    final_train: &'a crate::trainer::OuterLossBreakdown,
    per_env_metrics: &'a [f64],
    mean_metric: f64,
    worst_metric: f64,
    degenerate_event_count: usize,
    degenerate_events: &'a [crate::trainer::DegenerateEvent],
}

fn report_lines(report: &RunReport) -> Result<String> {
    let mut out = String::new();
    for epoch in &report.trace {
        let line = serde_json::to_string(&EpochLine { epoch })
            .map_err(|e| Error::config(format!("report serialization: {e}")))?;
        out.push_str(&line);
        out.push('\n');
    }
    let summary = SummaryLine {
        summary: Summary {
            method: report.method,
            seed: report.seed,
            metric: report.metric,
            final_train: &report.final_train,
            per_env_metrics: &report.per_env_metrics,
            mean_metric: report.mean_metric,
            worst_metric: report.worst_metric,
            degenerate_event_count: report.degenerate_event_count,
            degenerate_events: &report.degenerate_events,
        },
    };
    let line = serde_json::to_string(&summary)
        .map_err(|e| Error::config(format!("report serialization: {e}")))?;
    out.push_str(&line);
    out.push('\n');
    Ok(out)
}

/// Trains one run and writes `report.jsonl` plus its manifest.
pub fn cmd_train(cfg: &Config, out_dir: &Path) -> Result<RunReport> {
    let dataset = dataset_from(cfg)?;
    let tc = train_config_from(cfg)?;
    let manifest = RunManifest::begin("train", tc.seed);
    ensure_dir(out_dir)?;
    let report = train(&dataset, &tc)?;
    std::fs::write(out_dir.join("report.jsonl"), report_lines(&report)?)
        .map_err(|e| Error::io(out_dir.join("report.jsonl").display().to_string(), e))?;
    cfg.check_unused()?;
    manifest.finish(cfg.resolved(), &out_dir.join("manifest.json"))?;
    logging::info(format!(
        "{}: mean {:.4}, worst {:.4}",
        report.method, report.mean_metric, report.worst_metric
    ));
    Ok(report)
}

/// One grid point of a sweep.
#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub point: BTreeMap<String, f64>,
    pub seed: u64,
    pub mean_metric: f64,
    pub worst_metric: f64,
    pub final_r_main: f64,
    pub final_p_tv: f64,
    pub final_kl_env: f64,
}

/// Per-point aggregate over seeds (sample standard deviation).
#[derive(Debug, Clone, Serialize)]
pub struct SweepAggregate {
    pub point: BTreeMap<String, f64>,
    pub runs: usize,
    pub mean_metric_avg: f64,
    pub mean_metric_std: f64,
    pub worst_metric_avg: f64,
    pub worst_metric_std: f64,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// The swept hyperparameters: KL coefficient, per-player step sizes, seeds.
const SWEEP_PARAMS: [(&str, &str); 5] = [
    ("sweep.beta", "train.beta"),
    ("sweep.lr_phi", "train.lr_phi"),
    ("sweep.lr_theta", "train.lr_theta"),
    ("sweep.lr_psi", "train.lr_psi"),
    ("sweep.lr_eta", "train.lr_eta"),
];

/// Runs the configured grid, one row per (point, seed), plus aggregate rows
/// per point. Grid points may run in parallel worker threads; rows are
/// written in grid order through a single sink.
pub fn cmd_sweep(cfg: &Config, out_dir: &Path, jobs: usize) -> Result<()> {
    // Assemble the grid axes present in the config.
    let mut axes: Vec<(&str, Vec<f64>)> = Vec::new();
    for (sweep_key, train_key) in SWEEP_PARAMS {
        if cfg.has(sweep_key) {
            let values = cfg.get_f64_list(sweep_key, &[])?;
            if values.is_empty() {
                return Err(Error::config(format!("{sweep_key} is empty")));
            }
            axes.push((train_key, values));
        }
    }
    let seeds: Vec<u64> = if cfg.has("sweep.seeds") {
        cfg.get_u64_list("sweep.seeds", &[])?
    } else {
        Vec::new()
    };
    if axes.is_empty() && seeds.is_empty() {
        return Err(Error::config("empty grid: no sweep.* keys present"));
    }
    if seeds.is_empty() {
        return Err(Error::config("sweep.seeds must list at least one seed"));
    }

    // Cartesian product of the axes.
    let mut points: Vec<BTreeMap<String, f64>> = vec![BTreeMap::new()];
    for (key, values) in &axes {
        let mut next = Vec::with_capacity(points.len() * values.len());
        for p in &points {
            for v in values {
                let mut q = p.clone();
                q.insert(key.to_string(), *v);
                next.push(q);
            }
        }
        points = next;
    }
    let total_runs = points.len() * seeds.len();
    let cap = cfg.get_usize("sweep.max_points", 256)?;
    if total_runs > cap {
        return Err(Error::config(format!(
            "grid has {total_runs} runs, above the cap of {cap} (raise sweep.max_points to allow)"
        )));
    }

    let manifest = RunManifest::begin("sweep", seeds[0]);
    ensure_dir(out_dir)?;
    let dataset = dataset_from(cfg)?;
    let base_tc = train_config_from(cfg)?;

    // Flattened run list in deterministic grid order.
    let runs: Vec<(usize, u64)> = points
        .iter()
        .enumerate()
        .flat_map(|(pi, _)| seeds.iter().map(move |&s| (pi, s)))
        .collect();

    let run_one = |pi: usize, seed: u64| -> Result<SweepRow> {
        let point = &points[pi];
        let mut tc = base_tc.clone();
        tc.seed = seed;
        for (key, value) in point {
            match key.as_str() {
                "train.beta" => tc.beta = *value,
                "train.lr_phi" => tc.step_sizes.phi = *value,
                "train.lr_theta" => tc.step_sizes.theta = *value,
                "train.lr_psi" => tc.step_sizes.psi = *value,
                "train.lr_eta" => tc.step_sizes.eta = *value,
                other => return Err(Error::config(format!("unswept key '{other}'"))),
            }
        }
        let report = train(&dataset, &tc)?;
        Ok(SweepRow {
            point: point.clone(),
            seed,
            mean_metric: report.mean_metric,
            worst_metric: report.worst_metric,
            final_r_main: report.final_train.r_main,
            final_p_tv: report.final_train.p_tv,
            final_kl_env: report.final_train.kl_env,
        })
    };

    let jobs = jobs.max(1);
    let mut rows: Vec<Option<Result<SweepRow>>> = Vec::new();
    rows.resize_with(runs.len(), || None);
    if jobs == 1 {
        for (slot, &(pi, seed)) in rows.iter_mut().zip(&runs) {
            *slot = Some(run_one(pi, seed));
        }
    } else {
        let next = AtomicUsize::new(0);
        let collected: Vec<Vec<(usize, Result<SweepRow>)>> = std::thread::scope(|scope| {
            let handles: Vec<_> = (0..jobs)
                .map(|_| {
                    scope.spawn(|| {
                        let mut local = Vec::new();
                        loop {
                            let i = next.fetch_add(1, Ordering::SeqCst);
                            if i >= runs.len() {
                                break;
                            }
                            let (pi, seed) = runs[i];
                            local.push((i, run_one(pi, seed)));
                        }
                        local
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("sweep worker panicked")).collect()
        });
        for chunk in collected {
            for (i, r) in chunk {
                rows[i] = Some(r);
            }
        }
    }

    let mut out = String::new();
    let mut by_point: BTreeMap<usize, Vec<&SweepRow>> = BTreeMap::new();
    let mut materialized = Vec::with_capacity(rows.len());
    for row in rows.into_iter() {
        materialized.push(row.expect("row not produced")?);
    }
    for (row, &(pi, _)) in materialized.iter().zip(&runs) {
        let line = serde_json::to_string(&serde_json::json!({ "row": row }))
            .map_err(|e| Error::config(format!("sweep serialization: {e}")))?;
        out.push_str(&line);
        out.push('\n');
        by_point.entry(pi).or_default().push(row);
    }
    for (pi, rows) in &by_point {
        let means: Vec<f64> = rows.iter().map(|r| r.mean_metric).collect();
        let worsts: Vec<f64> = rows.iter().map(|r| r.worst_metric).collect();
        let (mean_avg, mean_std_v) = mean_std(&means);
        let (worst_avg, worst_std_v) = mean_std(&worsts);
        let agg = SweepAggregate {
            point: points[*pi].clone(),
            runs: rows.len(),
            mean_metric_avg: mean_avg,
            mean_metric_std: mean_std_v,
            worst_metric_avg: worst_avg,
            worst_metric_std: worst_std_v,
        };
        let line = serde_json::to_string(&serde_json::json!({ "aggregate": agg }))
            .map_err(|e| Error::config(format!("sweep serialization: {e}")))?;
        out.push_str(&line);
        out.push('\n');
    }
    std::fs::write(out_dir.join("sweep.jsonl"), out)
        .map_err(|e| Error::io(out_dir.join("sweep.jsonl").display().to_string(), e))?;
    cfg.check_unused()?;
    manifest.finish(cfg.resolved(), &out_dir.join("manifest.json"))?;
    logging::info(format!(
        "sweep complete: {} rows + {} aggregates",
        materialized.len(),
        by_point.len()
    ));
    Ok(())
}

/// Runs the oracle and invariant suites; the caller prints the lines and
/// maps overall failure to a nonzero exit.
pub fn cmd_verify(opts: &VerifyOptions) -> Vec<CheckResult> {
    run_all(opts)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sim_config(n: usize, seed: u64) -> Config {
        Config::parse(&format!(
            "data.kind = simulation\nsim.n_per_env = {n}\nsim.seed = {seed}\n"
        ))
        .unwrap()
    }

    #[test]
    fn generate_writes_expected_files_and_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let out_a = dir.path().join("a");
        let out_b = dir.path().join("b");
        let cfg = sim_config(30, 5);
        cmd_generate(&cfg, &out_a).unwrap();
        let cfg = sim_config(30, 5);
        cmd_generate(&cfg, &out_b).unwrap();
        // Paper-style config: 2 train + 5 test environments.
        for f in ["train_0.csv", "train_1.csv", "test_0.csv", "test_4.csv", "dataset.json"] {
            assert!(out_a.join(f).exists(), "{f} missing");
        }
        for f in ["train_0.csv", "train_1.csv", "test_0.csv", "test_1.csv", "test_2.csv", "test_3.csv", "test_4.csv"] {
            let a = std::fs::read(out_a.join(f)).unwrap();
            let b = std::fs::read(out_b.join(f)).unwrap();
            assert_eq!(a, b, "{f} not byte-identical");
        }
    }

    #[test]
    fn generate_rejects_zero_samples() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = sim_config(0, 5);
        assert!(cmd_generate(&cfg, dir.path()).is_err());
    }

    #[test]
    fn train_round_trips_through_generated_files() {
        let dir = tempfile::tempdir().unwrap();
        let data_dir = dir.path().join("data");
        cmd_generate(&sim_config(40, 9), &data_dir).unwrap();
        let cfg = Config::parse(&format!(
            "data.dir = {}\ntrain.method = erm\ntrain.epochs = 3\ntrain.batch_size = 16\n",
            data_dir.display()
        ))
        .unwrap();
        let out = dir.path().join("run");
        let report = cmd_train(&cfg, &out).unwrap();
        assert_eq!(report.method, "erm");
        assert!(out.join("report.jsonl").exists());
        assert!(out.join("manifest.json").exists());
        let text = std::fs::read_to_string(out.join("report.jsonl")).unwrap();
        assert_eq!(text.lines().count(), 3 + 1); // epochs + summary
        assert!(text.lines().last().unwrap().contains("\"summary\""));
    }

    #[test]
    fn train_reports_are_byte_identical_across_invocations() {
        let dir = tempfile::tempdir().unwrap();
        let mk = || {
            Config::parse(
                "data.kind = simulation\nsim.n_per_env = 24\nsim.seed = 3\ntrain.method = ectr_known\ntrain.epochs = 3\ntrain.batch_size = 16\n",
            )
            .unwrap()
        };
        let out_a = dir.path().join("a");
        let out_b = dir.path().join("b");
        cmd_train(&mk(), &out_a).unwrap();
        cmd_train(&mk(), &out_b).unwrap();
        let a = std::fs::read(out_a.join("report.jsonl")).unwrap();
        let b = std::fs::read(out_b.join("report.jsonl")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rerun_from_manifest_reproduces_report() {
        let dir = tempfile::tempdir().unwrap();
        let out_a = dir.path().join("a");
        let cfg = Config::parse(
            "data.kind = simulation\nsim.n_per_env = 24\nsim.seed = 4\ntrain.method = irm_tv_l1\ntrain.epochs = 2\ntrain.batch_size = 16\n",
        )
        .unwrap();
        cmd_train(&cfg, &out_a).unwrap();
        let out_b = dir.path().join("b");
        let cfg2 = Config::load(&out_a.join("manifest.json")).unwrap();
        cmd_train(&cfg2, &out_b).unwrap();
        let a = std::fs::read(out_a.join("report.jsonl")).unwrap();
        let b = std::fs::read(out_b.join("report.jsonl")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn unknown_method_is_a_config_error_listing_methods() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = Config::parse(
            "data.kind = simulation\nsim.n_per_env = 16\ntrain.method = nonsense\n",
        )
        .unwrap();
        let err = cmd_train(&cfg, dir.path()).unwrap_err().to_string();
        assert!(err.contains("ectr_known") && err.contains("erm"), "{err}");
    }

    #[test]
    fn sweep_counts_rows_and_aggregates() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = Config::parse(
            "data.kind = simulation\nsim.n_per_env = 16\ntrain.method = ectr_known\ntrain.epochs = 2\ntrain.batch_size = 16\nsweep.beta = 0.1, 1.0\nsweep.seeds = 0, 1, 2\n",
        )
        .unwrap();
        let out = dir.path().join("sweep");
        cmd_sweep(&cfg, &out, 2).unwrap();
        let text = std::fs::read_to_string(out.join("sweep.jsonl")).unwrap();
        let rows = text.lines().filter(|l| l.contains("\"row\"")).count();
        let aggs = text.lines().filter(|l| l.contains("\"aggregate\"")).count();
        assert_eq!(rows, 6);
        assert_eq!(aggs, 2);
    }

    #[test]
    fn sweep_rejects_empty_and_oversized_grids() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = Config::parse("data.kind = simulation\ntrain.method = erm\n").unwrap();
        assert!(cmd_sweep(&cfg, dir.path(), 1).is_err());
        let cfg = Config::parse(
            "data.kind = simulation\ntrain.method = erm\nsweep.seeds = 0,1,2,3\nsweep.max_points = 3\n",
        )
        .unwrap();
        let err = cmd_sweep(&cfg, dir.path(), 1).unwrap_err().to_string();
        assert!(err.contains("4 runs"), "{err}");
    }

    #[test]
    fn sweep_output_is_deterministic_across_job_counts() {
        let dir = tempfile::tempdir().unwrap();
        let mk = || {
            Config::parse(
                "data.kind = simulation\nsim.n_per_env = 16\ntrain.method = erm\ntrain.epochs = 2\ntrain.batch_size = 16\nsweep.seeds = 0, 1\n",
            )
            .unwrap()
        };
        let out_a = dir.path().join("j1");
        let out_b = dir.path().join("j3");
        cmd_sweep(&mk(), &out_a, 1).unwrap();
        cmd_sweep(&mk(), &out_b, 3).unwrap();
        let a = std::fs::read(out_a.join("sweep.jsonl")).unwrap();
        let b = std::fs::read(out_b.join("sweep.jsonl")).unwrap();
        assert_eq!(a, b);
    }
}
