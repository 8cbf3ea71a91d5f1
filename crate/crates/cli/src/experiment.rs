//! Multi-seed execution and result files.
//!
//! Every run seed gets one instance, and every selected policy is replayed on
//! it with that seed's environment streams. Runs fan out over a rayon pool and
//! are collected back in (policy, seed) order, so the output bytes do not
//! depend on scheduling.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use cqb_core::metrics::{aggregate, write_aggregate_csv, write_combined_csv, write_run_csv};
use cqb_core::policy::build_policy;
use cqb_core::rng::run_seeds;
use cqb_core::{coupled_run, AggregateSeries, MnlInstance, PolicyKind, RoundRecord};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{EnvironmentKind, ExperimentConfig};
use crate::CliError;

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyResult {
    pub kind: PolicyKind,
    /// One record series per run, in seed order.
    pub runs: Vec<Vec<RoundRecord>>,
    pub aggregate: AggregateSeries,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentResults {
    pub seeds: Vec<u64>,
    pub policies: Vec<PolicyResult>,
}

impl ExperimentResults {
    pub fn get(&self, kind: PolicyKind) -> Option<&PolicyResult> {
        self.policies.iter().find(|p| p.kind == kind)
    }
}

/// Simulates every (policy, seed) pair of `config` without touching the disk.
pub fn execute(config: &ExperimentConfig) -> Result<ExperimentResults, CliError> {
    config.validate()?;
    let kinds = config.policy_kinds()?;
    let seeds = run_seeds(config.seed, config.runs);
    let feature_map = config.feature_map()?;
    let params = config.effective_policy_params();
    let prototypes = match config.environment {
        EnvironmentKind::Tabular => Some(config.tabular_prototypes()?),
        EnvironmentKind::Linear => None,
    };
    let instances: Vec<MnlInstance> = seeds
        .par_iter()
        .map(|&s| config.instance_for(s, prototypes.as_ref()))
        .collect::<Result<_, _>>()?;
    let tasks: Vec<(usize, usize)> = (0..kinds.len())
        .flat_map(|p| (0..seeds.len()).map(move |r| (p, r)))
        .collect();
    let mut records: Vec<Vec<RoundRecord>> = tasks
        .par_iter()
        .map(|&(p, r)| {
            let inst = &instances[r];
            let mut policy = build_policy(kinds[p], inst, &params, feature_map.clone(), seeds[r])?;
            Ok(coupled_run(inst, policy.as_mut(), config.horizon, seeds[r])?)
        })
        .collect::<Result<_, CliError>>()?;
    let mut policies = Vec::with_capacity(kinds.len());
    for &kind in kinds.iter() {
        let runs: Vec<Vec<RoundRecord>> = records.drain(..seeds.len()).collect();
        let aggregate = aggregate(&runs)?;
        policies.push(PolicyResult { kind, runs, aggregate });
    }
    Ok(ExperimentResults { seeds, policies })
}

/// Provenance written next to the results.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunManifest {
    pub version: String,
    pub config: ExperimentConfig,
    pub policies: Vec<String>,
    /// Run seeds in run-id order, derived from the master seed.
    pub seeds: Vec<u64>,
    /// All policies of one seed run on the same instance and environment streams.
    pub shared_instances: bool,
    /// Files written, relative to the output directory.
    pub outputs: Vec<String>,
    /// Wall-clock start in seconds since the Unix epoch.
    pub started_unix: u64,
    pub elapsed_seconds: f64,
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| {
            CliError::Runtime(format!("cannot create {}: {e}", parent.display()))
        })?;
    }
    let file = File::create(path)
        .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))?;
    Ok(BufWriter::new(file))
}

fn finish(mut w: BufWriter<File>) -> Result<(), CliError> {
    w.flush()?;
    Ok(())
}

fn write_results(
    results: &ExperimentResults,
    out_dir: &Path,
    outputs: &mut Vec<String>,
) -> Result<(), CliError> {
    for p in &results.policies {
        let name = p.kind.as_str();
        for (run_id, run) in p.runs.iter().enumerate() {
            let rel = format!("{name}/run_{run_id:03}.csv");
            let mut w = create(&out_dir.join(&rel))?;
            write_run_csv(&mut w, name, &[(run_id, run.as_slice())])?;
            finish(w)?;
            outputs.push(rel);
        }
        let rel = format!("{name}/aggregate.csv");
        let mut w = create(&out_dir.join(&rel))?;
        write_aggregate_csv(&mut w, &p.aggregate)?;
        finish(w)?;
        outputs.push(rel);
    }
    Ok(())
}

fn write_manifest(
    config: &ExperimentConfig,
    results: &ExperimentResults,
    out_dir: &Path,
    mut outputs: Vec<String>,
    started: (SystemTime, Instant),
) -> Result<RunManifest, CliError> {
    outputs.push("manifest.json".into());
    let manifest = RunManifest {
        version: format!("{} {}", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION")),
        config: ExperimentConfig { out_dir: out_dir.to_path_buf(), ..config.clone() },
        policies: results.policies.iter().map(|p| p.kind.as_str().to_string()).collect(),
        seeds: results.seeds.clone(),
        shared_instances: true,
        outputs,
        started_unix: started.0.duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
        elapsed_seconds: started.1.elapsed().as_secs_f64(),
    };
    let mut w = create(&out_dir.join("manifest.json"))?;
    serde_json::to_writer_pretty(&mut w, &manifest)
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    writeln!(w)?;
    finish(w)?;
    Ok(manifest)
}

/// Runs `config` and writes per-run CSVs, one aggregate CSV per policy and a
/// manifest under `out_dir`.
pub fn run_experiment(
    config: &ExperimentConfig,
    out_dir: &Path,
) -> Result<(ExperimentResults, RunManifest), CliError> {
    let started = (SystemTime::now(), Instant::now());
    let results = execute(config)?;
    let mut outputs = Vec::new();
    write_results(&results, out_dir, &mut outputs)?;
    let manifest = write_manifest(config, &results, out_dir, outputs, started)?;
    Ok((results, manifest))
}

/// As [`run_experiment`], plus `compare.csv` holding every policy's aggregate
/// series under a leading `policy` column. Returns the path of that file.
pub fn compare_policies(
    config: &ExperimentConfig,
    out_dir: &Path,
) -> Result<(ExperimentResults, PathBuf), CliError> {
    let started = (SystemTime::now(), Instant::now());
    let results = execute(config)?;
    let mut outputs = Vec::new();
    write_results(&results, out_dir, &mut outputs)?;
    let path = out_dir.join("compare.csv");
    let mut w = create(&path)?;
    let series: Vec<(&str, &AggregateSeries)> =
        results.policies.iter().map(|p| (p.kind.as_str(), &p.aggregate)).collect();
    write_combined_csv(&mut w, &series)?;
    finish(w)?;
    outputs.push("compare.csv".into());
    write_manifest(config, &results, out_dir, outputs, started)?;
    Ok((results, path))
}
