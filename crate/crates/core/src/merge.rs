//! Data-free merging over task vectors: linear soup, SLERP with per-layer
//! schedules, TIES (trim / elect sign / disjoint merge), DARE sparsification,
//! and the DARE-TIES composition.
//!
//! All methods operate on models fine-tuned from one shared base. Tensors
//! outside the merge scope (embeddings and norm gains under `linear_only`)
//! are copied from the base verbatim. Every method is deterministic given
//! the recipe and seed; stochastic steps draw from per-(tensor, model)
//! streams so per-tensor work is order-independent.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{read_checkpoint, require_compatible, write_checkpoint, WeightMap};
use crate::error::{Error, Result};
use crate::model::is_linear_name;
use crate::rng::{derive_seed, Rng};
use crate::tensor::Tensor;

/// Which tensor roles participate in a merge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MergeScope {
    #[default]
    LinearOnly,
    All,
}

impl MergeScope {
    pub fn includes(self, name: &str) -> bool {
        match self {
            MergeScope::LinearOnly => is_linear_name(name),
            MergeScope::All => true,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            MergeScope::LinearOnly => "linear_only",
            MergeScope::All => "all",
        }
    }
}

/// Per-tensor delta of a fine-tuned model relative to its base, restricted
/// to the merge scope.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskVector {
    pub deltas: BTreeMap<String, Tensor>,
}

/// `model - base` over the in-scope tensor names.
pub fn task_vector(model: &WeightMap, base: &WeightMap, scope: MergeScope) -> Result<TaskVector> {
    require_compatible(&[base, model])?;
    let mut deltas = BTreeMap::new();
    for (name, base_tensor) in &base.tensors {
        if scope.includes(name) {
            deltas.insert(name.clone(), model.get(name)?.sub(base_tensor)?);
        }
    }
    Ok(TaskVector { deltas })
}

/// `base + delta` over the vector's names; other tensors come from base.
pub fn apply_task_vector(base: &WeightMap, vector: &TaskVector) -> Result<WeightMap> {
    let mut out = base.clone();
    for (name, delta) in &vector.deltas {
        out.insert(name.clone(), base.get(name)?.add(delta)?);
    }
    Ok(out)
}

/// Weighted elementwise sum of whole weight maps (Model Soups when uniform).
/// Merges every tensor; use [`apply_recipe`] for scope handling.
pub fn linear_merge(models: &[&WeightMap], weights: &[f64]) -> Result<WeightMap> {
    if models.is_empty() {
        return Err(Error::InvalidArgument("linear_merge: no models".into()));
    }
    if weights.len() != models.len() {
        return Err(Error::InvalidArgument(format!(
            "linear_merge: {} weights for {} models",
            weights.len(),
            models.len()
        )));
    }
    if models.len() >= 2 {
        require_compatible(models)?;
    }
    let mut out = WeightMap::new();
    for name in models[0].tensors.keys() {
        out.insert(name.clone(), weighted_sum(models, weights, name)?);
    }
    Ok(out)
}

fn weighted_sum(models: &[&WeightMap], weights: &[f64], name: &str) -> Result<Tensor> {
    let first = models[0].get(name)?;
    let mut acc = vec![0.0; first.numel()];
    for (model, &w) in models.iter().zip(weights) {
        for (a, &x) in acc.iter_mut().zip(model.get(name)?.data()) {
            *a += w * x;
        }
    }
    Tensor::new(first.shape().to_vec(), acc)
}

/// Per-layer interpolation parameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TSchedule {
    Constant { t: f64 },
    /// Symmetric quadratic over the normalized layer position: `hi` at both
    /// ends, `lo` at the middle.
    UShape { lo: f64, hi: f64 },
}

impl TSchedule {
    pub fn value(&self, position: f64) -> f64 {
        match *self {
            TSchedule::Constant { t } => t,
            TSchedule::UShape { lo, hi } => {
                let x = 2.0 * position - 1.0;
                lo + (hi - lo) * x * x
            }
        }
    }
}

/// Normalized depth of a tensor in [0, 1]: embedding at 0, blocks spread
/// across the middle, final norm and head at 1.
fn layer_position(name: &str, block_count: usize) -> f64 {
    if let Some(rest) = name.strip_prefix("layers.") {
        if let Some(idx) = rest.split('.').next().and_then(|s| s.parse::<usize>().ok()) {
            if block_count > 1 {
                return idx as f64 / (block_count - 1) as f64;
            }
            return 0.5;
        }
    }
    if name == "embed.tok" {
        0.0
    } else {
        1.0
    }
}

fn block_count(map: &WeightMap) -> usize {
    map.names()
        .filter_map(|n| {
            n.strip_prefix("layers.")
                .and_then(|rest| rest.split('.').next())
                .and_then(|s| s.parse::<usize>().ok())
        })
        .max()
        .map_or(0, |max| max + 1)
}

/// Spherical interpolation between exactly two models, in delta space
/// relative to the base: per in-scope tensor, flattened deltas δa and δb are
/// combined as `[sin((1−t)Ω)·δa + sin(tΩ)·δb] / sin Ω` with Ω the angle
/// between them, and added back onto the base. Falls back to linear
/// interpolation for near-zero angles or near-zero deltas (and for sin Ω
/// below 1e-12, where the spherical form is numerically meaningless).
pub fn slerp_merge(
    base: &WeightMap,
    model_a: &WeightMap,
    model_b: &WeightMap,
    schedule: &TSchedule,
    scope: MergeScope,
) -> Result<WeightMap> {
    require_compatible(&[base, model_a, model_b])?;
    let blocks = block_count(base);
    let mut out = base.clone();
    for (name, base_tensor) in &base.tensors {
        if !scope.includes(name) {
            continue;
        }
        let t = schedule.value(layer_position(name, blocks));
        let da = model_a.get(name)?.sub(base_tensor)?;
        let db = model_b.get(name)?.sub(base_tensor)?;
        let (na, nb) = (da.norm(), db.norm());
        let delta = if na < 1e-12 || nb < 1e-12 {
            lerp(&da, &db, t)?
        } else {
            let cos = (da.dot(&db)? / (na * nb)).clamp(-1.0, 1.0);
            let omega = cos.acos();
            if omega < 1e-6 || omega.sin() < 1e-12 {
                lerp(&da, &db, t)?
            } else {
                let sin = omega.sin();
                let wa = (((1.0 - t) * omega).sin()) / sin;
                let wb = ((t * omega).sin()) / sin;
                da.scale(wa)?.add(&db.scale(wb)?)?
            }
        };
        out.insert(name.clone(), base_tensor.add(&delta)?);
    }
    Ok(out)
}

fn lerp(a: &Tensor, b: &Tensor, t: f64) -> Result<Tensor> {
    a.scale(1.0 - t)?.add(&b.scale(t)?)
}

/// Keep the top `ceil(density·n)` entries by absolute value, zero the rest.
/// Ties at the threshold break toward the lower flat index.
pub fn ties_trim(delta: &Tensor, density: f64) -> Result<Tensor> {
    if !(density > 0.0 && density <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "ties density must be in (0, 1], got {density}"
        )));
    }
    let n = delta.numel();
    let keep = (density * n as f64).ceil() as usize;
    if keep >= n {
        return Ok(delta.clone());
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        delta.data()[j]
            .abs()
            .partial_cmp(&delta.data()[i].abs())
            .expect("finite values")
            .then(i.cmp(&j))
    });
    let mut data = vec![0.0; n];
    for &i in &order[..keep] {
        data[i] = delta.data()[i];
    }
    Tensor::new(delta.shape().to_vec(), data)
}

/// Per position, the sign of the summed delta values: −1, 0, or +1.
pub fn ties_elect_sign(deltas: &[&Tensor]) -> Result<Tensor> {
    let first = deltas
        .first()
        .ok_or_else(|| Error::InvalidArgument("ties_elect_sign: no deltas".into()))?;
    for d in deltas {
        if d.shape() != first.shape() {
            return Err(Error::ShapeMismatch {
                op: "ties_elect_sign",
                detail: format!("{:?} vs {:?}", d.shape(), first.shape()),
            });
        }
    }
    let data = (0..first.numel())
        .map(|i| {
            let sum: f64 = deltas.iter().map(|d| d.data()[i]).sum();
            if sum > 0.0 {
                1.0
            } else if sum < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
        .collect();
    Tensor::new(first.shape().to_vec(), data)
}

/// Sign-consistent weighted mean: positions contribute only where a delta's
/// sign matches the elected sign, renormalized by the contributing weights.
fn sign_consistent_merge(deltas: &[Tensor], weights: &[f64]) -> Result<Tensor> {
    let refs: Vec<&Tensor> = deltas.iter().collect();
    let elected = ties_elect_sign(&refs)?;
    let n = elected.numel();
    let mut data = vec![0.0; n];
    for i in 0..n {
        let sign = elected.data()[i];
        if sign == 0.0 {
            continue;
        }
        let mut num = 0.0;
        let mut den = 0.0;
        for (delta, &w) in deltas.iter().zip(weights) {
            let v = delta.data()[i];
            if (sign > 0.0 && v > 0.0) || (sign < 0.0 && v < 0.0) {
                num += w * v;
                den += w;
            }
        }
        if den != 0.0 {
            data[i] = num / den;
        }
    }
    Tensor::new(elected.shape().to_vec(), data)
}

/// TIES: trim each model's delta to `density`, elect signs over the trimmed
/// deltas, and merge sign-consistent contributions onto the base.
pub fn ties_merge(
    base: &WeightMap,
    models: &[&WeightMap],
    weights: &[f64],
    density: f64,
    scope: MergeScope,
) -> Result<WeightMap> {
    check_models_and_weights(base, models, weights)?;
    let mut out = base.clone();
    for (name, base_tensor) in &base.tensors {
        if !scope.includes(name) {
            continue;
        }
        let trimmed: Vec<Tensor> = models
            .iter()
            .map(|m| ties_trim(&m.get(name)?.sub(base_tensor)?, density))
            .collect::<Result<_>>()?;
        let merged = sign_consistent_merge(&trimmed, weights)?;
        out.insert(name.clone(), base_tensor.add(&merged)?);
    }
    Ok(out)
}

/// Drop each entry independently with probability `drop_p` and rescale the
/// survivors by `1/(1−drop_p)`, which preserves the delta in expectation.
pub fn dare_sparsify(delta: &Tensor, drop_p: f64, seed: u64) -> Result<Tensor> {
    if !(0.0..1.0).contains(&drop_p) {
        return Err(Error::InvalidArgument(format!(
            "dare drop_p must be in [0, 1), got {drop_p}"
        )));
    }
    let mut rng = Rng::new(seed);
    let keep_scale = 1.0 / (1.0 - drop_p);
    let data = delta
        .data()
        .iter()
        .map(|&v| {
            if rng.next_f64() < drop_p {
                0.0
            } else {
                v * keep_scale
            }
        })
        .collect();
    Tensor::new(delta.shape().to_vec(), data)
}

/// DARE-TIES: DARE-sparsify each delta (one stream per tensor and model,
/// derived from the recipe seed), then apply TIES sign election and the
/// sign-consistent weighted merge. The trim stage is skipped; random
/// dropping replaces it.
pub fn dare_ties_merge(
    base: &WeightMap,
    models: &[&WeightMap],
    weights: &[f64],
    drop_p: f64,
    seed: u64,
    scope: MergeScope,
) -> Result<WeightMap> {
    check_models_and_weights(base, models, weights)?;
    let mut out = base.clone();
    for (name, base_tensor) in &base.tensors {
        if !scope.includes(name) {
            continue;
        }
        let sparsified: Vec<Tensor> = models
            .iter()
            .enumerate()
            .map(|(i, m)| {
                let delta = m.get(name)?.sub(base_tensor)?;
                dare_sparsify(&delta, drop_p, derive_seed(seed, name, i as u64))
            })
            .collect::<Result<_>>()?;
        let merged = sign_consistent_merge(&sparsified, weights)?;
        out.insert(name.clone(), base_tensor.add(&merged)?);
    }
    Ok(out)
}

fn check_models_and_weights(base: &WeightMap, models: &[&WeightMap], weights: &[f64]) -> Result<()> {
    if models.is_empty() {
        return Err(Error::InvalidArgument("merge: no models".into()));
    }
    if weights.len() != models.len() {
        return Err(Error::InvalidArgument(format!(
            "merge: {} weights for {} models",
            weights.len(),
            models.len()
        )));
    }
    let mut all = vec![base];
    all.extend_from_slice(models);
    require_compatible(&all)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeMethod {
    Soup,
    Weighted,
    Slerp,
    Ties,
    DareTies,
}

impl MergeMethod {
    pub fn label(self) -> &'static str {
        match self {
            MergeMethod::Soup => "soup",
            MergeMethod::Weighted => "weighted",
            MergeMethod::Slerp => "slerp",
            MergeMethod::Ties => "ties",
            MergeMethod::DareTies => "dare_ties",
        }
    }
}

fn default_density() -> f64 {
    1.0
}

/// A full merge job description; paths are resolved against a workspace
/// root by [`run_recipe`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MergeRecipe {
    pub method: MergeMethod,
    pub base: String,
    pub models: Vec<String>,
    /// Per-model weights; defaults to uniform 1/N.
    #[serde(default)]
    pub weights: Option<Vec<f64>>,
    /// TIES trim keep-fraction in (0, 1].
    #[serde(default = "default_density")]
    pub density: f64,
    /// DARE drop probability in [0, 1).
    #[serde(default)]
    pub drop_p: f64,
    /// SLERP interpolation schedule; defaults to constant 0.5.
    #[serde(default)]
    pub t_schedule: Option<TSchedule>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub merge_scope: MergeScope,
    pub output: String,
}

impl MergeRecipe {
    fn resolved_weights(&self, n: usize) -> Result<Vec<f64>> {
        match &self.weights {
            None => Ok(vec![1.0 / n as f64; n]),
            Some(w) => {
                if w.len() != n {
                    return Err(Error::Config(format!(
                        "recipe has {} weights for {n} models",
                        w.len()
                    )));
                }
                if w.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Config("recipe weights must be finite".into()));
                }
                Ok(w.clone())
            }
        }
    }
}

/// Execute a recipe against already-loaded models. Out-of-scope tensors come
/// from the base; merge provenance is recorded in the output metadata.
pub fn apply_recipe(recipe: &MergeRecipe, base: &WeightMap, models: &[&WeightMap]) -> Result<WeightMap> {
    if models.is_empty() {
        return Err(Error::Config("recipe lists no models".into()));
    }
    let weights = recipe.resolved_weights(models.len())?;
    if recipe.method == MergeMethod::Weighted && recipe.weights.is_none() {
        return Err(Error::Config("weighted merge requires explicit weights".into()));
    }
    let scope = recipe.merge_scope;
    let mut merged = match recipe.method {
        MergeMethod::Soup | MergeMethod::Weighted => {
            check_models_and_weights(base, models, &weights)?;
            let mut out = base.clone();
            for (name, _) in base.tensors.clone() {
                if scope.includes(&name) {
                    out.insert(name.clone(), weighted_sum(models, &weights, &name)?);
                }
            }
            out
        }
        MergeMethod::Slerp => {
            if models.len() != 2 {
                return Err(Error::Config(format!(
                    "slerp merges exactly 2 models, got {}",
                    models.len()
                )));
            }
            let schedule = recipe.t_schedule.unwrap_or(TSchedule::Constant { t: 0.5 });
            slerp_merge(base, models[0], models[1], &schedule, scope)?
        }
        MergeMethod::Ties => ties_merge(base, models, &weights, recipe.density, scope)?,
        MergeMethod::DareTies => {
            dare_ties_merge(base, models, &weights, recipe.drop_p, recipe.seed, scope)?
        }
    };

    merged.metadata = BTreeMap::new();
    merged.metadata.insert("method".into(), recipe.method.label().into());
    merged.metadata.insert("merge_scope".into(), scope.label().into());
    merged.metadata.insert(
        "weights".into(),
        weights.iter().map(f64::to_string).collect::<Vec<_>>().join(","),
    );
    match recipe.method {
        MergeMethod::Ties => {
            merged.metadata.insert("density".into(), recipe.density.to_string());
        }
        MergeMethod::DareTies => {
            merged.metadata.insert("drop_p".into(), recipe.drop_p.to_string());
            merged.metadata.insert("seed".into(), recipe.seed.to_string());
        }
        MergeMethod::Slerp => {
            let schedule = recipe.t_schedule.unwrap_or(TSchedule::Constant { t: 0.5 });
            merged.metadata.insert(
                "t_schedule".into(),
                serde_json::to_string(&schedule).expect("schedule serializes"),
            );
        }
        _ => {}
    }
    Ok(merged)
}

/// Load the recipe's inputs relative to `root`, merge, and write the output
/// checkpoint.
pub fn run_recipe(recipe: &MergeRecipe, root: &Path) -> Result<WeightMap> {
    let base = read_checkpoint(&root.join(&recipe.base))?;
    let models: Vec<WeightMap> = recipe
        .models
        .iter()
        .map(|p| read_checkpoint(&root.join(p)))
        .collect::<Result<_>>()?;
    let refs: Vec<&WeightMap> = models.iter().collect();
    let merged = apply_recipe(recipe, &base, &refs)?;
    let out_path = root.join(&recipe.output);
    if let Some(parent) = out_path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    write_checkpoint(&merged, &out_path)?;
    Ok(merged)
}
