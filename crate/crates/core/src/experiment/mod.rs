//! Seeded batch experiments: per-seed metric CSVs, an aggregate CSV and a manifest.

mod config;
mod verify_run;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use config::{apply_overrides, CoordinationParams, EnvConfig, ExperimentConfig, VerifyOptions};
pub use verify_run::{run_verify, VerifyReport};

use crate::equilibrium::{RoundRecord, RunHistory};
use crate::error::{Error, Result};
use crate::game::JointPolicy;
use crate::learners;

pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const MANIFEST_FILE: &str = "manifest.json";
pub const AGGREGATE_FILE: &str = "aggregate.csv";

/// Header of a per-seed metric CSV for `n_agents` agents.
pub fn csv_header(n_agents: usize) -> Vec<String> {
    let mut h: Vec<String> = ["round", "pse_gap", "preg_running", "policy_distance"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    h.extend((0..n_agents).map(|i| format!("value_agent_{i}")));
    h.push("wall_ms".into());
    h
}

pub fn seed_csv_name(seed: u64) -> String {
    format!("seed_{seed}.csv")
}

pub fn seed_policy_name(seed: u64) -> String {
    format!("seed_{seed}_policies.jsonl")
}

fn partial(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".partial");
    path.with_file_name(name)
}

fn metric_row(r: &RoundRecord, preg: f64, distance: Option<f64>) -> Vec<String> {
    let mut row = vec![
        r.t.to_string(),
        r.pse_gap.to_string(),
        preg.to_string(),
        distance.map_or_else(String::new, |d| d.to_string()),
    ];
    row.extend(r.values.iter().map(|v| v.to_string()));
    row.push(r.wall_ms.to_string());
    row
}

/// SHA-256 of a metric CSV with its last (`wall_ms`) column removed from every line.
pub fn checksum_without_timing(csv_text: &str) -> String {
    let mut hasher = Sha256::new();
    for line in csv_text.lines() {
        let kept = line.rsplit_once(',').map_or(line, |(head, _)| head);
        hasher.update(kept.as_bytes());
        hasher.update(b"\n");
    }
    hex::encode(hasher.finalize())
}

#[derive(Serialize)]
struct PolicySnapshot<'a> {
    round: usize,
    policy: &'a JointPolicy,
}

/// Outcome of one replication, as recorded in the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub csv: String,
    pub policies: String,
    /// SHA-256 of the CSV without the `wall_ms` column.
    pub sha256: String,
    pub rounds: usize,
    pub final_pse_gap: f64,
    pub final_preg: f64,
    pub best_iterate_round: usize,
    pub best_iterate_gap: f64,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub code_version: String,
    pub config: ExperimentConfig,
    pub environment: String,
    pub n_agents: usize,
    pub seeds: Vec<SeedSummary>,
    pub aggregate: String,
}

fn write_seed(cfg: &ExperimentConfig, seed: u64) -> Result<(SeedSummary, RunHistory)> {
    let map = cfg.env.build()?;
    let n_agents = map.base().n_agents();
    let alg = learners::AlgoConfig { seed, ..cfg.alg.clone() };
    let csv_path = cfg.output_dir.join(seed_csv_name(seed));
    let policy_path = cfg.output_dir.join(seed_policy_name(seed));

    // Stream rows as they are produced; the distance column is blank until the run ends.
    let mut stream = csv::Writer::from_path(partial(&csv_path)).map_err(csv_error)?;
    stream.write_record(csv_header(n_agents)).map_err(csv_error)?;
    let mut snapshots = BufWriter::new(File::create(partial(&policy_path))?);
    let mut preg_sum = 0.0;
    let history = learners::run_observed(&map, &alg, cfg.window, &mut |r| {
        preg_sum += r.pse_gap;
        stream
            .write_record(metric_row(r, preg_sum / r.t as f64, None))
            .map_err(csv_error)?;
        if (r.t - 1) % cfg.record_every == 0 || r.t == alg.rounds {
            serde_json::to_writer(&mut snapshots, &PolicySnapshot { round: r.t, policy: &r.policy })?;
            snapshots.write_all(b"\n")?;
        }
        Ok(())
    })?;
    stream.flush()?;
    snapshots.flush()?;
    drop(stream);
    drop(snapshots);

    let preg = history.regret_curve();
    let mut out = csv::Writer::from_writer(Vec::new());
    out.write_record(csv_header(n_agents)).map_err(csv_error)?;
    for (r, p) in history.rounds.iter().zip(&preg) {
        out.write_record(metric_row(r, *p, Some(r.policy_distance)))
            .map_err(csv_error)?;
    }
    let bytes = out.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    fs::write(&csv_path, &bytes)?;
    fs::remove_file(partial(&csv_path))?;
    fs::rename(partial(&policy_path), &policy_path)?;

    let (best_round, best_gap) = history.best_iterate().ok_or(Error::EmptyHistory)?;
    let summary = SeedSummary {
        seed,
        csv: seed_csv_name(seed),
        policies: seed_policy_name(seed),
        sha256: checksum_without_timing(std::str::from_utf8(&bytes).expect("csv is utf-8")),
        rounds: history.len(),
        final_pse_gap: history.rounds.last().map_or(f64::NAN, |r| r.pse_gap),
        final_preg: preg.last().copied().unwrap_or(f64::NAN),
        best_iterate_round: best_round,
        best_iterate_gap: best_gap,
        warnings: history.warnings.clone(),
    };
    Ok((summary, history))
}

fn csv_error(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Parse(format!("csv: {other:?}")),
    }
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn aggregate_csv(histories: &[RunHistory], n_agents: usize) -> Result<Vec<u8>> {
    let mut header = vec!["round".to_string()];
    let metrics: Vec<String> = ["pse_gap", "preg_running", "policy_distance"]
        .iter()
        .map(|s| s.to_string())
        .chain((0..n_agents).map(|i| format!("value_agent_{i}")))
        .collect();
    for m in &metrics {
        header.push(format!("{m}_mean"));
        header.push(format!("{m}_std"));
    }
    let curves: Vec<Vec<f64>> = histories.iter().map(RunHistory::regret_curve).collect();
    let rounds = histories.iter().map(RunHistory::len).min().unwrap_or(0);
    let mut out = csv::Writer::from_writer(Vec::new());
    out.write_record(&header).map_err(csv_error)?;
    for k in 0..rounds {
        let mut row = vec![(k + 1).to_string()];
        let column = |f: &dyn Fn(usize) -> f64| -> Vec<f64> { (0..histories.len()).map(f).collect() };
        let mut columns = vec![
            column(&|h| histories[h].rounds[k].pse_gap),
            column(&|h| curves[h][k]),
            column(&|h| histories[h].rounds[k].policy_distance),
        ];
        for i in 0..n_agents {
            columns.push(column(&|h| histories[h].rounds[k].values[i]));
        }
        for c in columns {
            let (m, s) = mean_std(&c);
            row.push(m.to_string());
            row.push(s.to_string());
        }
        out.write_record(row).map_err(csv_error)?;
    }
    out.into_inner().map_err(|e| Error::Io(e.into_error()))
}

/// Run every seed of `cfg` in parallel and write all outputs under `cfg.output_dir`.
///
/// On failure the streamed `.partial` files of the failing seeds are left in place.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Manifest> {
    cfg.validate()?;
    let map = cfg.env.build()?;
    let n_agents = map.base().n_agents();
    fs::create_dir_all(&cfg.output_dir)?;

    let results: Vec<Result<(SeedSummary, RunHistory)>> =
        cfg.seeds.par_iter().map(|&seed| write_seed(cfg, seed)).collect();
    let mut summaries = Vec::with_capacity(results.len());
    let mut histories = Vec::with_capacity(results.len());
    let mut failures = Vec::new();
    for (seed, r) in cfg.seeds.iter().zip(results) {
        match r {
            Ok((s, h)) => {
                summaries.push(s);
                histories.push(h);
            }
            Err(e) => failures.push(format!("seed {seed}: {e}")),
        }
    }
    if !failures.is_empty() {
        return Err(Error::Run(failures.join("; ")));
    }

    fs::write(cfg.output_dir.join(AGGREGATE_FILE), aggregate_csv(&histories, n_agents)?)?;
    let manifest = Manifest {
        code_version: CODE_VERSION.to_string(),
        config: cfg.clone(),
        environment: cfg.env.name().to_string(),
        n_agents,
        seeds: summaries,
        aggregate: AGGREGATE_FILE.to_string(),
    };
    fs::write(
        cfg.output_dir.join(MANIFEST_FILE),
        serde_json::to_string_pretty(&manifest)? + "\n",
    )?;
    Ok(manifest)
}

/// Path of the uniform-deployment snapshot written next to `path`.
pub fn snapshot_path(path: &Path) -> PathBuf {
    let stem = path.file_stem().unwrap_or_default().to_string_lossy();
    let ext = path.extension().map_or_else(|| "json".into(), |e| e.to_string_lossy());
    path.with_file_name(format!("{stem}.uniform.{ext}"))
}

/// Write the environment's base game to `path` and its deployment at the uniform
/// policy to [`snapshot_path`]`(path)`, both in the game JSON format.
pub fn emit_game(cfg: &ExperimentConfig, path: &Path) -> Result<(PathBuf, PathBuf)> {
    let map = cfg.env.build()?;
    let deployed = map.deploy(&JointPolicy::uniform_for(map.base()))?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let snapshot = snapshot_path(path);
    fs::write(path, map.base().to_json()?)?;
    fs::write(&snapshot, deployed.to_json()?)?;
    Ok((path.to_path_buf(), snapshot))
}
