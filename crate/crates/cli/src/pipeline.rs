//! End-to-end orchestration: task generation, expert fabrication, merge
//! execution for every configured method, evaluation, and report emission.
//!
//! Stages cache on content-stamped outputs: a stage is skipped when its
//! stamp matches the current config and its output files exist, so
//! re-running an identical pipeline rewrites nothing. All stages reload
//! their inputs from disk, which keeps results identical whether a stage
//! ran this invocation or an earlier one.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use mergeforge_core::checkpoint::{read_checkpoint, write_checkpoint, WeightMap};
use mergeforge_core::dam::{bake, dam_train, DamConfig};
use mergeforge_core::evo::{bake_genome, evolve, EvoConfig};
use mergeforge_core::merge::{run_recipe, MergeMethod, MergeRecipe, MergeScope, TSchedule};
use mergeforge_core::model::{init_model, next_token_loss, train_expert, TokenBatch, TransformerConfig};
use mergeforge_core::rng::derive_seed;
use mergeforge_core::{Error, Result};

use crate::report::{emit_report, MethodRow, Report};
use crate::tasks::{gen_tasks, load_batches, TaskKind, TaskSpec};

fn default_fab_steps() -> usize {
    800
}

fn default_fab_lr() -> f64 {
    0.3
}

fn default_fab_batch() -> usize {
    8
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct FabricationConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl Default for FabricationConfig {
    fn default() -> Self {
        FabricationConfig {
            steps: default_fab_steps(),
            learning_rate: default_fab_lr(),
            batch_size: default_fab_batch(),
        }
    }
}

fn default_density() -> f64 {
    1.0
}

/// A data-free merge method entry; the pipeline supplies the checkpoint
/// paths.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecipeSpec {
    pub name: String,
    pub method: MergeMethod,
    #[serde(default)]
    pub weights: Option<Vec<f64>>,
    #[serde(default = "default_density")]
    pub density: f64,
    #[serde(default)]
    pub drop_p: f64,
    #[serde(default)]
    pub t_schedule: Option<TSchedule>,
    #[serde(default)]
    pub merge_scope: MergeScope,
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NamedDam {
    pub name: String,
    #[serde(flatten)]
    pub config: DamConfig,
}

fn default_evo_name() -> String {
    "evolve".to_string()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NamedEvo {
    #[serde(default = "default_evo_name")]
    pub name: String,
    #[serde(flatten)]
    pub config: EvoConfig,
}

fn default_eval_batch() -> usize {
    8
}

fn default_output_dir() -> String {
    "run".to_string()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub model: TransformerConfig,
    pub tasks: Vec<TaskSpec>,
    #[serde(default)]
    pub fabrication: FabricationConfig,
    #[serde(default)]
    pub recipes: Vec<RecipeSpec>,
    #[serde(default)]
    pub dam: Vec<NamedDam>,
    #[serde(default)]
    pub evo: Option<NamedEvo>,
    #[serde(default = "default_eval_batch")]
    pub eval_batch_size: usize,
    #[serde(default = "default_output_dir")]
    pub output_dir: String,
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.tasks.is_empty() {
            return Err(Error::Config("pipeline needs at least one task".into()));
        }
        for task in &self.tasks {
            task.validate(&self.model)?;
        }
        let mut names: Vec<String> = self.tasks.iter().map(|t| t.name()).collect();
        names.extend(self.method_names());
        let mut deduped = names.clone();
        deduped.sort();
        deduped.dedup();
        if deduped.len() != names.len() {
            return Err(Error::Config("task and method names must be unique".into()));
        }
        if self.eval_batch_size == 0 {
            return Err(Error::Config("eval_batch_size must be >= 1".into()));
        }
        for dam in &self.dam {
            dam.config.validate()?;
        }
        if let Some(evo) = &self.evo {
            evo.config.validate()?;
        }
        Ok(())
    }

    pub fn method_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self.recipes.iter().map(|r| r.name.clone()).collect();
        names.extend(self.dam.iter().map(|d| d.name.clone()));
        if let Some(evo) = &self.evo {
            names.push(evo.name.clone());
        }
        names
    }
}

/// The full default suite: two disjoint synthetic tasks, the four data-free
/// methods, the seven coefficient-training objective rows, and the
/// evolutionary baseline.
pub fn default_pipeline_config() -> PipelineConfig {
    let tasks = vec![
        TaskSpec {
            kind: TaskKind::Copy,
            name: None,
            vocab_lo: 2,
            vocab_hi: 10,
            seq_len: 16,
            samples: 240,
            seed: 0,
        },
        TaskSpec {
            kind: TaskKind::ModularArithmeticSequence,
            name: None,
            vocab_lo: 12,
            vocab_hi: 28,
            seq_len: 16,
            samples: 240,
            seed: 0,
        },
    ];
    let recipes = vec![
        RecipeSpec {
            name: "soup".into(),
            method: MergeMethod::Soup,
            weights: None,
            density: 1.0,
            drop_p: 0.0,
            t_schedule: None,
            merge_scope: MergeScope::LinearOnly,
            seed: None,
        },
        RecipeSpec {
            name: "slerp".into(),
            method: MergeMethod::Slerp,
            weights: None,
            density: 1.0,
            drop_p: 0.0,
            t_schedule: Some(TSchedule::UShape { lo: 0.3, hi: 0.7 }),
            merge_scope: MergeScope::LinearOnly,
            seed: None,
        },
        RecipeSpec {
            name: "ties".into(),
            method: MergeMethod::Ties,
            weights: None,
            density: 0.5,
            drop_p: 0.0,
            t_schedule: None,
            merge_scope: MergeScope::LinearOnly,
            seed: None,
        },
        RecipeSpec {
            name: "dare-ties".into(),
            method: MergeMethod::DareTies,
            weights: None,
            density: 1.0,
            drop_p: 0.5,
            t_schedule: None,
            merge_scope: MergeScope::LinearOnly,
            seed: None,
        },
    ];
    let dam = ablation_rows();
    PipelineConfig {
        seed: 0,
        model: TransformerConfig::default(),
        tasks,
        fabrication: FabricationConfig::default(),
        recipes,
        dam,
        evo: Some(NamedEvo { name: default_evo_name(), config: EvoConfig::default() }),
        eval_batch_size: default_eval_batch(),
        output_dir: default_output_dir(),
    }
}

/// The seven objective configurations compared in the ablation grid.
pub fn ablation_rows() -> Vec<NamedDam> {
    use mergeforge_core::dam::LossKind;
    let base = DamConfig::default();
    let with = |name: &str, loss: LossKind, cosine: f64, reg: f64| NamedDam {
        name: name.to_string(),
        config: DamConfig {
            loss,
            lambda_cosine: cosine,
            lambda_l1: reg,
            lambda_l2: reg,
            ..base.clone()
        },
    };
    vec![
        with("dam-kl", LossKind::Kl, 0.0, 0.0),
        with("dam-kl-reg", LossKind::Kl, 0.0, 1e-5),
        with("dam-kl-cosine", LossKind::Kl, 0.01, 0.0),
        with("dam-kl-cosine-reg", LossKind::Kl, 0.01, 1e-5),
        with("dam-mse-cosine", LossKind::Mse, 0.01, 0.0),
        with("dam-entropy", LossKind::Entropy, 0.0, 0.0),
        with("dam-entropy-cosine", LossKind::Entropy, 0.01, 0.0),
    ]
}

// ── stage caching ───────────────────────────────────────────────────────

fn stamp_path(out: &Path, stage: &str) -> PathBuf {
    out.join(".stamps").join(format!("{stage}.json"))
}

fn stage_cached(out: &Path, stage: &str, fingerprint: &str, outputs: &[PathBuf], force: bool) -> bool {
    if force {
        return false;
    }
    if outputs.iter().any(|p| !p.exists()) {
        return false;
    }
    match fs::read_to_string(stamp_path(out, stage)) {
        Ok(existing) => existing == fingerprint,
        Err(_) => false,
    }
}

fn write_stamp(out: &Path, stage: &str, fingerprint: &str) -> Result<()> {
    let path = stamp_path(out, stage);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, fingerprint)?;
    Ok(())
}

fn fingerprint(value: &impl Serialize) -> String {
    serde_json::to_value(value).expect("fingerprints serialize").to_string()
}

// ── evaluation ──────────────────────────────────────────────────────────

/// Mean next-token cross-entropy per task over eval batches.
pub fn eval_model(
    weights: &WeightMap,
    model: &TransformerConfig,
    datasets: &[(String, Vec<TokenBatch>)],
) -> Result<Vec<f64>> {
    datasets
        .iter()
        .map(|(_, batches)| {
            let mut total = 0.0;
            for batch in batches {
                total += next_token_loss(weights, model, batch)?;
            }
            Ok(total / batches.len() as f64)
        })
        .collect()
}

// ── pipeline ────────────────────────────────────────────────────────────

pub struct PipelinePaths {
    pub out: PathBuf,
    pub datasets: PathBuf,
    pub models: PathBuf,
    pub merged: PathBuf,
}

impl PipelinePaths {
    pub fn new(workspace: &Path, config: &PipelineConfig) -> Self {
        let out = workspace.join(&config.output_dir);
        PipelinePaths {
            datasets: out.join("datasets"),
            models: out.join("models"),
            merged: out.join("merged"),
            out,
        }
    }

    pub fn base(&self) -> PathBuf {
        self.models.join("base.safetensors")
    }

    pub fn expert(&self, task: &str) -> PathBuf {
        self.models.join(format!("expert-{task}.safetensors"))
    }

    pub fn merged_model(&self, method: &str) -> PathBuf {
        self.merged.join(format!("{method}.safetensors"))
    }

    pub fn train_file(&self, task: &str) -> PathBuf {
        self.datasets.join(format!("{task}.train.jsonl"))
    }

    pub fn eval_file(&self, task: &str) -> PathBuf {
        self.datasets.join(format!("{task}.eval.jsonl"))
    }
}

/// Generate datasets and fabricate base + experts (pipeline stages 1–2).
/// Returns true if anything actually ran.
pub fn fabricate(workspace: &Path, config: &PipelineConfig, force: bool) -> Result<bool> {
    config.validate()?;
    let paths = PipelinePaths::new(workspace, config);
    fs::create_dir_all(&paths.out)?;
    let task_names: Vec<String> = config.tasks.iter().map(|t| t.name()).collect();
    let mut ran = false;

    // Stage: datasets.
    let fp = fingerprint(&serde_json::json!({
        "tasks": config.tasks,
        "model": config.model,
        "seed": config.seed,
    }));
    let outputs: Vec<PathBuf> = task_names
        .iter()
        .flat_map(|t| [paths.train_file(t), paths.eval_file(t)])
        .collect();
    if !stage_cached(&paths.out, "datasets", &fp, &outputs, force) {
        gen_tasks(&config.tasks, &config.model, config.seed, &paths.datasets)?;
        write_stamp(&paths.out, "datasets", &fp)?;
        ran = true;
    }

    // Stage: base + experts.
    let fp = fingerprint(&serde_json::json!({
        "tasks": config.tasks,
        "model": config.model,
        "fabrication": config.fabrication,
        "seed": config.seed,
    }));
    let mut outputs = vec![paths.base()];
    outputs.extend(task_names.iter().map(|t| paths.expert(t)));
    if !stage_cached(&paths.out, "experts", &fp, &outputs, force) {
        fs::create_dir_all(&paths.models)?;
        let base = init_model(&config.model, derive_seed(config.seed, "base", 0))?;
        write_checkpoint(&base, &paths.base())?;
        // Reload so downstream stages always see f32-grid values.
        let base = read_checkpoint(&paths.base())?;
        for (i, task) in task_names.iter().enumerate() {
            let batches = load_batches(&paths.train_file(task), config.fabrication.batch_size)?;
            let expert = train_expert(
                &base,
                &config.model,
                &batches,
                config.fabrication.steps,
                config.fabrication.learning_rate,
                derive_seed(config.seed, "expert", i as u64),
            )?;
            write_checkpoint(&expert, &paths.expert(task))?;
        }
        check_distinguishable(config, &paths, &task_names)?;
        write_stamp(&paths.out, "experts", &fp)?;
        ran = true;
    }
    Ok(ran)
}

/// The fabrication oracle: every expert must score strictly better on its
/// own task than on each other task.
fn check_distinguishable(
    config: &PipelineConfig,
    paths: &PipelinePaths,
    task_names: &[String],
) -> Result<()> {
    let eval_sets = load_eval_sets(config, paths, task_names)?;
    for (i, task) in task_names.iter().enumerate() {
        let expert = read_checkpoint(&paths.expert(task))?;
        let losses = eval_model(&expert, &config.model, &eval_sets)?;
        for (j, other) in task_names.iter().enumerate() {
            if i != j && losses[i] >= losses[j] {
                return Err(Error::Config(format!(
                    "tasks are not distinguishable: expert `{task}` scores {:.4} on its \
                     own task but {:.4} on `{other}`",
                    losses[i], losses[j]
                )));
            }
        }
    }
    Ok(())
}

fn load_eval_sets(
    config: &PipelineConfig,
    paths: &PipelinePaths,
    task_names: &[String],
) -> Result<Vec<(String, Vec<TokenBatch>)>> {
    task_names
        .iter()
        .map(|t| Ok((t.clone(), load_batches(&paths.eval_file(t), config.eval_batch_size)?)))
        .collect()
}

/// Run the full pipeline. Stages that are already cached are skipped; the
/// report is rebuilt only when inputs changed.
pub fn run_pipeline(workspace: &Path, config: &PipelineConfig, force: bool) -> Result<Report> {
    let started = Instant::now();
    config.validate()?;
    let paths = PipelinePaths::new(workspace, config);
    let task_names: Vec<String> = config.tasks.iter().map(|t| t.name()).collect();
    let mut timings: Vec<(String, f64)> = Vec::new();
    let mut ran_any = false;

    let mut timed = |label: &str, ran: bool, secs: f64| {
        if ran {
            timings.push((label.to_string(), secs));
        }
    };

    let t0 = Instant::now();
    let ran = fabricate(workspace, config, force)?;
    ran_any |= ran;
    timed("fabricate", ran, t0.elapsed().as_secs_f64());

    let expert_rel: Vec<String> = task_names
        .iter()
        .map(|t| format!("models/expert-{t}.safetensors"))
        .collect();

    // Data-free merge stages.
    for spec in &config.recipes {
        let recipe = MergeRecipe {
            method: spec.method,
            base: "models/base.safetensors".into(),
            models: expert_rel.clone(),
            weights: spec.weights.clone(),
            density: spec.density,
            drop_p: spec.drop_p,
            t_schedule: spec.t_schedule,
            seed: spec.seed.unwrap_or_else(|| derive_seed(config.seed, &spec.name, 0)),
            merge_scope: spec.merge_scope,
            output: format!("merged/{}.safetensors", spec.name),
        };
        let fp = fingerprint(&serde_json::json!({"recipe": &recipe, "seed": config.seed}));
        let stage = format!("merge-{}", spec.name);
        let outputs = vec![paths.merged_model(&spec.name)];
        if !stage_cached(&paths.out, &stage, &fp, &outputs, force) {
            let t = Instant::now();
            run_recipe(&recipe, &paths.out)?;
            write_stamp(&paths.out, &stage, &fp)?;
            timed(&stage, true, t.elapsed().as_secs_f64());
            ran_any = true;
        }
    }

    // Coefficient-training stages.
    for named in &config.dam {
        let mut dam_config = named.config.clone();
        dam_config.seed = derive_seed(config.seed, &named.name, named.config.seed);
        let fp = fingerprint(&serde_json::json!({
            "dam": &dam_config,
            "name": &named.name,
            "seed": config.seed,
        }));
        let stage = format!("dam-{}", named.name);
        let dam_dir = paths.out.join("dam");
        let coeff_path = dam_dir.join(format!("{}.coefficients.safetensors", named.name));
        let steps_path = dam_dir.join(format!("{}.steps.jsonl", named.name));
        let summary_path = dam_dir.join(format!("{}.summary.json", named.name));
        let outputs = vec![paths.merged_model(&named.name), coeff_path.clone()];
        if !stage_cached(&paths.out, &stage, &fp, &outputs, force) {
            let t = Instant::now();
            let base = read_checkpoint(&paths.base())?;
            let experts: Vec<WeightMap> = task_names
                .iter()
                .map(|t| read_checkpoint(&paths.expert(t)))
                .collect::<Result<_>>()?;
            let refs: Vec<&WeightMap> = experts.iter().collect();
            let datasets: Vec<Vec<TokenBatch>> = task_names
                .iter()
                .map(|t| load_batches(&paths.train_file(t), dam_config.batch_size))
                .collect::<Result<_>>()?;
            let (coefficients, report) =
                dam_train(&base, &refs, &datasets, &config.model, &dam_config)?;
            let baked = bake(&base, &refs, &coefficients, dam_config.merge_scope)?;
            fs::create_dir_all(&paths.merged)?;
            fs::create_dir_all(&dam_dir)?;
            write_checkpoint(&baked, &paths.merged_model(&named.name))?;
            write_checkpoint(&coefficients.to_weight_map(), &coeff_path)?;
            let mut lines = String::new();
            for record in &report.steps {
                lines.push_str(&serde_json::to_string(record)?);
                lines.push('\n');
            }
            fs::write(&steps_path, lines)?;
            fs::write(&summary_path, serde_json::to_string_pretty(&report.summary)?)?;
            write_stamp(&paths.out, &stage, &fp)?;
            timed(&stage, true, t.elapsed().as_secs_f64());
            ran_any = true;
        }
    }

    // Evolutionary stage.
    if let Some(named) = &config.evo {
        let mut evo_config = named.config.clone();
        evo_config.seed = derive_seed(config.seed, &named.name, named.config.seed);
        let fp = fingerprint(&serde_json::json!({
            "evo": &evo_config,
            "name": &named.name,
            "seed": config.seed,
        }));
        let stage = format!("evo-{}", named.name);
        let evo_dir = paths.out.join("evo");
        let history_path = evo_dir.join(format!("{}.history.jsonl", named.name));
        let genome_path = evo_dir.join(format!("{}.genome.json", named.name));
        let outputs = vec![paths.merged_model(&named.name), history_path.clone()];
        if !stage_cached(&paths.out, &stage, &fp, &outputs, force) {
            let t = Instant::now();
            let base = read_checkpoint(&paths.base())?;
            let experts: Vec<WeightMap> = task_names
                .iter()
                .map(|t| read_checkpoint(&paths.expert(t)))
                .collect::<Result<_>>()?;
            let refs: Vec<&WeightMap> = experts.iter().collect();
            let datasets: Vec<Vec<TokenBatch>> = task_names
                .iter()
                .map(|t| load_batches(&paths.eval_file(t), config.eval_batch_size))
                .collect::<Result<_>>()?;
            let (genome, history) = evolve(&base, &refs, &datasets, &config.model, &evo_config)?;
            let baked = bake_genome(&genome, &base, &refs, evo_config.merge_scope)?;
            fs::create_dir_all(&paths.merged)?;
            fs::create_dir_all(&evo_dir)?;
            write_checkpoint(&baked, &paths.merged_model(&named.name))?;
            let mut lines = String::new();
            for record in &history.generations {
                lines.push_str(&serde_json::to_string(record)?);
                lines.push('\n');
            }
            fs::write(&history_path, lines)?;
            fs::write(&genome_path, serde_json::to_string_pretty(&genome)?)?;
            write_stamp(&paths.out, &stage, &fp)?;
            timed(&stage, true, t.elapsed().as_secs_f64());
            ran_any = true;
        }
    }

    // Evaluation + report.
    let methods = config.method_names();
    let fp = fingerprint(&serde_json::json!({
        "config": config,
        "methods": &methods,
    }));
    let report_json = paths.out.join("report.json");
    let report_txt = paths.out.join("report.txt");
    let report = if stage_cached(&paths.out, "report", &fp, &[report_json.clone(), report_txt.clone()], force)
    {
        Report::from_json(&fs::read_to_string(&report_json)?)?
    } else {
        let t = Instant::now();
        let eval_sets = load_eval_sets(config, &paths, &task_names)?;
        let mut rows = Vec::with_capacity(methods.len());
        for method in &methods {
            let weights = read_checkpoint(&paths.merged_model(method))?;
            let losses = eval_model(&weights, &config.model, &eval_sets)?;
            rows.push(MethodRow::new(method.clone(), losses));
        }
        let report = Report {
            tasks: task_names.clone(),
            rows,
            config_echo: serde_json::to_value(config)?,
            runtime_secs: 0.0,
        };
        emit_report(&report, &paths.out)?;
        write_stamp(&paths.out, "report", &fp)?;
        timed("report", true, t.elapsed().as_secs_f64());
        ran_any = true;
        report
    };

    if ran_any {
        let total = started.elapsed().as_secs_f64();
        let timing_value = serde_json::json!({
            "total_secs": total,
            "stages": timings.iter().map(|(n, s)| serde_json::json!({"stage": n, "secs": s})).collect::<Vec<_>>(),
        });
        fs::write(paths.out.join("timings.json"), serde_json::to_string_pretty(&timing_value)?)?;
    }

    let mut report = report;
    report.runtime_secs = started.elapsed().as_secs_f64();
    Ok(report)
}
