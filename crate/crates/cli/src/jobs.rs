//! Standalone job configs for the non-pipeline subcommands. Each mirrors a
//! pipeline stage but takes explicit paths, resolved against the workspace
//! root.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use mergeforge_core::checkpoint::{read_checkpoint, write_checkpoint, WeightMap};
use mergeforge_core::dam::{bake, dam_train, DamConfig, TrainReport};
use mergeforge_core::evo::{bake_genome, evolve, EvoConfig, EvoHistory, Genome};
use mergeforge_core::model::{TokenBatch, TransformerConfig};
use mergeforge_core::{Error, Result};

use crate::report::{emit_report, Report};
use crate::tasks::load_batches;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DamTrainJob {
    pub base: String,
    pub models: Vec<String>,
    /// One JSON-lines dataset per model, in model order.
    pub datasets: Vec<String>,
    #[serde(default)]
    pub model: TransformerConfig,
    #[serde(default)]
    pub dam: DamConfig,
    /// Baked merged checkpoint.
    pub output: String,
    /// Trained coefficients as a safetensors file.
    pub coefficients: String,
    /// Prefix for `{prefix}.steps.jsonl` and `{prefix}.summary.json`.
    #[serde(default)]
    pub report: Option<String>,
}

pub fn run_dam_train(job: &DamTrainJob, root: &Path) -> Result<TrainReport> {
    if job.models.len() != job.datasets.len() {
        return Err(Error::Config(format!(
            "{} models but {} datasets",
            job.models.len(),
            job.datasets.len()
        )));
    }
    let base = read_checkpoint(&root.join(&job.base))?;
    let models: Vec<WeightMap> = job
        .models
        .iter()
        .map(|p| read_checkpoint(&root.join(p)))
        .collect::<Result<_>>()?;
    let refs: Vec<&WeightMap> = models.iter().collect();
    let datasets: Vec<Vec<TokenBatch>> = job
        .datasets
        .iter()
        .map(|p| load_batches(&root.join(p), job.dam.batch_size))
        .collect::<Result<_>>()?;
    let (coefficients, report) = dam_train(&base, &refs, &datasets, &job.model, &job.dam)?;
    let baked = bake(&base, &refs, &coefficients, job.dam.merge_scope)?;
    write_with_dirs(&baked, &root.join(&job.output))?;
    write_with_dirs(&coefficients.to_weight_map(), &root.join(&job.coefficients))?;
    if let Some(prefix) = &job.report {
        let mut lines = String::new();
        for record in &report.steps {
            lines.push_str(&serde_json::to_string(record)?);
            lines.push('\n');
        }
        fs::write(root.join(format!("{prefix}.steps.jsonl")), lines)?;
        fs::write(
            root.join(format!("{prefix}.summary.json")),
            serde_json::to_string_pretty(&report.summary)?,
        )?;
    }
    Ok(report)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvolveJob {
    pub base: String,
    pub models: Vec<String>,
    /// Held-out JSON-lines datasets used for fitness, one per task.
    pub datasets: Vec<String>,
    #[serde(default)]
    pub model: TransformerConfig,
    #[serde(default)]
    pub evo: EvoConfig,
    #[serde(default = "default_eval_batch")]
    pub batch_size: usize,
    pub output: String,
    #[serde(default)]
    pub history: Option<String>,
}

fn default_eval_batch() -> usize {
    8
}

pub fn run_evolve(job: &EvolveJob, root: &Path) -> Result<(Genome, EvoHistory)> {
    let base = read_checkpoint(&root.join(&job.base))?;
    let models: Vec<WeightMap> = job
        .models
        .iter()
        .map(|p| read_checkpoint(&root.join(p)))
        .collect::<Result<_>>()?;
    let refs: Vec<&WeightMap> = models.iter().collect();
    let datasets: Vec<Vec<TokenBatch>> = job
        .datasets
        .iter()
        .map(|p| load_batches(&root.join(p), job.batch_size))
        .collect::<Result<_>>()?;
    let (genome, history) = evolve(&base, &refs, &datasets, &job.model, &job.evo)?;
    let baked = bake_genome(&genome, &base, &refs, job.evo.merge_scope)?;
    write_with_dirs(&baked, &root.join(&job.output))?;
    if let Some(path) = &job.history {
        let mut lines = String::new();
        for record in &history.generations {
            lines.push_str(&serde_json::to_string(record)?);
            lines.push('\n');
        }
        fs::write(root.join(path), lines)?;
    }
    Ok((genome, history))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NamedDataset {
    pub name: String,
    pub path: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalJob {
    pub weights: String,
    #[serde(default)]
    pub model: TransformerConfig,
    pub datasets: Vec<NamedDataset>,
    #[serde(default = "default_eval_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub output: Option<String>,
}

pub fn run_eval(job: &EvalJob, root: &Path) -> Result<Vec<(String, f64)>> {
    let weights = read_checkpoint(&root.join(&job.weights))?;
    let sets: Vec<(String, Vec<TokenBatch>)> = job
        .datasets
        .iter()
        .map(|d| Ok((d.name.clone(), load_batches(&root.join(&d.path), job.batch_size)?)))
        .collect::<Result<_>>()?;
    let losses = crate::pipeline::eval_model(&weights, &job.model, &sets)?;
    let named: Vec<(String, f64)> = sets
        .iter()
        .map(|(n, _)| n.clone())
        .zip(losses)
        .collect();
    if let Some(path) = &job.output {
        let value: serde_json::Map<String, serde_json::Value> = named
            .iter()
            .map(|(n, l)| (n.clone(), serde_json::json!(l)))
            .collect();
        fs::write(
            root.join(path),
            serde_json::to_string_pretty(&serde_json::Value::Object(value))?,
        )?;
    }
    Ok(named)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportJob {
    /// An existing report.json to re-render.
    pub results: String,
    pub output_dir: String,
}

pub fn run_report(job: &ReportJob, root: &Path) -> Result<Report> {
    let report = Report::from_json(&fs::read_to_string(root.join(&job.results))?)?;
    emit_report(&report, &root.join(&job.output_dir))?;
    Ok(report)
}

fn write_with_dirs(map: &WeightMap, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    write_checkpoint(map, path)
}
