//! A minimal (μ+λ) evolution strategy over per-layer, per-model scalar merge
//! weights, serving as the automated data-informed comparator.
//!
//! A genome holds one scalar per (mergeable layer, source model); fitness
//! bakes it as a per-layer linear merge and measures mean next-token
//! cross-entropy over held-out batches. Selection is elitist: the best μ of
//! parents ∪ offspring survive, so best fitness never worsens, and the
//! exactly-uniform genome seeded into generation 0 guarantees the result is
//! never worse than the uniform soup on this metric.

use serde::{Deserialize, Serialize};

use crate::checkpoint::{require_compatible, WeightMap};
use crate::error::{Error, Result};
use crate::merge::MergeScope;
use crate::model::{next_token_loss, TokenBatch, TransformerConfig};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Per-layer, per-model merge weights: `weights[l][i]` scales model i at the
/// l-th in-scope layer (layers in lexicographic name order).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Genome {
    pub weights: Vec<Vec<f64>>,
}

impl Genome {
    pub fn uniform(layer_count: usize, model_count: usize) -> Self {
        Genome {
            weights: vec![vec![1.0 / model_count as f64; model_count]; layer_count],
        }
    }

    fn validate(&self, layer_count: usize, model_count: usize) -> Result<()> {
        if self.weights.len() != layer_count
            || self.weights.iter().any(|row| row.len() != model_count)
        {
            return Err(Error::InvalidArgument(format!(
                "genome is {}x{:?}, expected {layer_count}x{model_count}",
                self.weights.len(),
                self.weights.first().map(Vec::len)
            )));
        }
        if self.weights.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("genome holds non-finite weights".into()));
        }
        Ok(())
    }
}

fn default_population() -> usize {
    6
}

fn default_offspring() -> usize {
    12
}

fn default_sigma() -> f64 {
    0.08
}

fn default_generations() -> usize {
    10
}

fn default_fitness_batches() -> usize {
    4
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EvoConfig {
    /// μ: survivors per generation.
    pub population: usize,
    /// λ: offspring per generation.
    pub offspring: usize,
    /// Gaussian mutation scale.
    pub sigma: f64,
    pub generations: usize,
    pub seed: u64,
    /// Held-out batches per dataset used in each fitness evaluation.
    pub fitness_batches: usize,
    pub merge_scope: MergeScope,
}

impl Default for EvoConfig {
    fn default() -> Self {
        EvoConfig {
            population: default_population(),
            offspring: default_offspring(),
            sigma: default_sigma(),
            generations: default_generations(),
            seed: 0,
            fitness_batches: default_fitness_batches(),
            merge_scope: MergeScope::LinearOnly,
        }
    }
}

impl EvoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.population == 0 || self.offspring == 0 {
            return Err(Error::Config("population and offspring must be >= 1".into()));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config("sigma must be positive".into()));
        }
        if self.fitness_batches == 0 {
            return Err(Error::Config("fitness_batches must be >= 1".into()));
        }
        Ok(())
    }
}

/// In-scope layer names in genome order.
pub fn genome_layer_names(base: &WeightMap, scope: MergeScope) -> Vec<String> {
    base.names()
        .filter(|n| scope.includes(n))
        .map(str::to_string)
        .collect()
}

/// Materialize a genome as a per-layer linear merge; out-of-scope tensors
/// come from the base.
pub fn bake_genome(
    genome: &Genome,
    base: &WeightMap,
    models: &[&WeightMap],
    scope: MergeScope,
) -> Result<WeightMap> {
    let names = genome_layer_names(base, scope);
    genome.validate(names.len(), models.len())?;
    let mut all = vec![base];
    all.extend_from_slice(models);
    require_compatible(&all)?;
    let mut out = base.clone();
    for (name, row) in names.iter().zip(&genome.weights) {
        let reference = base.get(name)?;
        let mut acc = vec![0.0; reference.numel()];
        for (model, &w) in models.iter().zip(row) {
            for (a, &x) in acc.iter_mut().zip(model.get(name)?.data()) {
                *a += w * x;
            }
        }
        out.insert(name.clone(), Tensor::new(reference.shape().to_vec(), acc)?);
    }
    Ok(out)
}

/// Mean next-token cross-entropy of the baked genome over the first
/// `fitness_batches` held-out batches of every dataset (lower is better).
pub fn fitness(
    genome: &Genome,
    base: &WeightMap,
    models: &[&WeightMap],
    datasets: &[Vec<TokenBatch>],
    model_config: &TransformerConfig,
    config: &EvoConfig,
) -> Result<f64> {
    if datasets.is_empty() || datasets.iter().any(Vec::is_empty) {
        return Err(Error::InvalidArgument("fitness: empty dataset".into()));
    }
    let merged = bake_genome(genome, base, models, config.merge_scope)?;
    let mut total = 0.0;
    for dataset in datasets {
        let take = config.fitness_batches.min(dataset.len());
        let mut dataset_loss = 0.0;
        for batch in &dataset[..take] {
            dataset_loss += next_token_loss(&merged, model_config, batch)?;
        }
        total += dataset_loss / take as f64;
    }
    let score = total / datasets.len() as f64;
    if !score.is_finite() {
        return Err(Error::NonFinite { op: "fitness" });
    }
    Ok(score)
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub generation: usize,
    pub best_fitness: f64,
    pub mean_fitness: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct EvoHistory {
    pub generations: Vec<GenerationRecord>,
}

/// Run the (μ+λ)-ES. Generation 0 contains the exactly-uniform genome plus
/// jittered copies; each generation mutates uniformly chosen parents and
/// keeps the best μ of parents ∪ offspring.
pub fn evolve(
    base: &WeightMap,
    models: &[&WeightMap],
    datasets: &[Vec<TokenBatch>],
    model_config: &TransformerConfig,
    config: &EvoConfig,
) -> Result<(Genome, EvoHistory)> {
    config.validate()?;
    if models.is_empty() {
        return Err(Error::InvalidArgument("evolve: no models".into()));
    }
    let layer_count = genome_layer_names(base, config.merge_scope).len();
    if layer_count == 0 {
        return Err(Error::InvalidArgument("evolve: scope resolves to zero layers".into()));
    }
    let mut rng = Rng::new(config.seed);
    let model_count = models.len();

    let mut population: Vec<(Genome, f64)> = Vec::with_capacity(config.population);
    for idx in 0..config.population {
        let mut genome = Genome::uniform(layer_count, model_count);
        if idx > 0 {
            for row in &mut genome.weights {
                for w in row.iter_mut() {
                    *w += config.sigma * rng.next_normal();
                }
            }
        }
        let score = fitness(&genome, base, models, datasets, model_config, config)?;
        population.push((genome, score));
    }
    sort_population(&mut population);

    let mut history = EvoHistory::default();
    history.generations.push(record(0, &population));

    for generation in 1..=config.generations {
        let mut offspring = Vec::with_capacity(config.offspring);
        for _ in 0..config.offspring {
            let parent = &population[rng.next_index(population.len())].0;
            let mut child = parent.clone();
            for row in &mut child.weights {
                for w in row.iter_mut() {
                    *w += config.sigma * rng.next_normal();
                }
            }
            let score = fitness(&child, base, models, datasets, model_config, config)?;
            offspring.push((child, score));
        }
        population.extend(offspring);
        sort_population(&mut population);
        population.truncate(config.population);
        history.generations.push(record(generation, &population));
    }

    let (best, _) = population.into_iter().next().expect("population is non-empty");
    Ok((best, history))
}

fn sort_population(population: &mut [(Genome, f64)]) {
    // Stable sort: ties keep insertion order, so surviving parents win them.
    population.sort_by(|a, b| a.1.partial_cmp(&b.1).expect("finite fitness"));
}

fn record(generation: usize, population: &[(Genome, f64)]) -> GenerationRecord {
    let best_fitness = population[0].1;
    let mean_fitness = population.iter().map(|(_, f)| f).sum::<f64>() / population.len() as f64;
    GenerationRecord { generation, best_fitness, mean_fitness }
}
