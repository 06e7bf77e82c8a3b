//! Differentiable adaptive merging: one trainable scaling coefficient per
//! weight-matrix column, per source model, per merged layer.
//!
//! The merged layer is `W = Σ_i W_i · diag(c_i)`, which the forward pass
//! evaluates as `y = Σ_i (c_i ⊙ x) · W_iᵀ`, which is algebraically identical but
//! differentiable in `c` without materializing merged weights every step.
//! Source weights stay frozen; only the coefficients train. `bake`
//! materializes the merged checkpoint once, after training.
//!
//! Objectives: a distillation term over logits (KL toward each expert on its
//! own dataset, or MSE, or the expert-free entropy objective), an optional
//! pairwise cosine penalty pushing different models' coefficient vectors
//! apart, and optional L1/L2 shrinkage on the coefficients.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{require_compatible, WeightMap};
use crate::error::{Error, Result};
use crate::merge::MergeScope;
use crate::model::{forward, forward_on_tape, LayerAccess, TokenBatch, TransformerConfig};
use crate::rng::{derive_seed, Rng};
use crate::tape::{NodeId, Parameter, ReduceAxis, Tape};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    Kl,
    Mse,
    Entropy,
}

impl LossKind {
    pub fn needs_expert_logits(self) -> bool {
        !matches!(self, LossKind::Entropy)
    }

    pub fn label(self) -> &'static str {
        match self {
            LossKind::Kl => "kl",
            LossKind::Mse => "mse",
            LossKind::Entropy => "entropy",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CoeffInit {
    /// Every coefficient at 1/N, so the step-0 merged model is exactly the
    /// uniform soup.
    #[default]
    Uniform,
    Ones,
    /// 1/N plus seeded Gaussian noise.
    Random { sigma: f64 },
}

fn default_learning_rate() -> f64 {
    2e-3
}

fn default_batch_size() -> usize {
    1
}

fn default_steps() -> usize {
    500
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DamConfig {
    pub loss: LossKind,
    pub lambda_cosine: f64,
    pub lambda_l1: f64,
    pub lambda_l2: f64,
    pub learning_rate: f64,
    /// Sequences per training batch; the harness shapes dataset streams
    /// with this.
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    pub merge_scope: MergeScope,
    pub optimizer: OptimizerKind,
    pub init: CoeffInit,
    /// Swap the KL argument order (expert distribution on the left).
    pub kl_swap: bool,
    /// Optional global-norm clip on coefficient gradients.
    pub grad_clip: Option<f64>,
}

impl Default for DamConfig {
    fn default() -> Self {
        DamConfig {
            loss: LossKind::Kl,
            lambda_cosine: 0.0,
            lambda_l1: 0.0,
            lambda_l2: 0.0,
            learning_rate: default_learning_rate(),
            batch_size: default_batch_size(),
            steps: default_steps(),
            seed: 0,
            merge_scope: MergeScope::LinearOnly,
            optimizer: OptimizerKind::Adam,
            init: CoeffInit::Uniform,
            kl_swap: false,
            grad_clip: None,
        }
    }
}

impl DamConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_cosine", self.lambda_cosine),
            ("lambda_l1", self.lambda_l1),
            ("lambda_l2", self.lambda_l2),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if let CoeffInit::Random { sigma } = self.init {
            if !(sigma.is_finite() && sigma >= 0.0) {
                return Err(Error::Config("random init sigma must be finite and >= 0".into()));
            }
        }
        Ok(())
    }
}

/// Coefficient vectors for one mergeable layer: `per_model[i]` has one entry
/// per column (input feature) of that layer's weight matrix.
#[derive(Debug, Clone)]
pub struct CoeffLayer {
    pub name: String,
    pub per_model: Vec<Parameter>,
}

/// All trainable coefficients, layers in lexicographic name order.
#[derive(Debug, Clone)]
pub struct CoefficientSet {
    pub layers: Vec<CoeffLayer>,
}

impl CoefficientSet {
    pub fn model_count(&self) -> usize {
        self.layers.first().map_or(0, |l| l.per_model.len())
    }

    pub fn coefficient_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.per_model.iter().map(|p| p.tensor.numel()).sum::<usize>())
            .sum()
    }

    pub fn layer(&self, name: &str) -> Option<&CoeffLayer> {
        self.layers.iter().find(|l| l.name == name)
    }

    /// Mean |c| per source model, over all layers.
    pub fn per_model_mean_abs(&self) -> Vec<f64> {
        let n = self.model_count();
        let mut sums = vec![0.0; n];
        let mut counts = vec![0usize; n];
        for layer in &self.layers {
            for (i, param) in layer.per_model.iter().enumerate() {
                sums[i] += param.tensor.data().iter().map(|v| v.abs()).sum::<f64>();
                counts[i] += param.tensor.numel();
            }
        }
        sums.iter()
            .zip(&counts)
            .map(|(s, &c)| if c == 0 { 0.0 } else { s / c as f64 })
            .collect()
    }

    /// Serialize as a weight map with names `dam.{layer}.model{i}`.
    pub fn to_weight_map(&self) -> WeightMap {
        let mut map = WeightMap::new();
        for layer in &self.layers {
            for (i, param) in layer.per_model.iter().enumerate() {
                map.insert(format!("dam.{}.model{i}", layer.name), param.tensor.clone());
            }
        }
        map.metadata.insert("format".into(), "dam-coefficients".into());
        map
    }

    /// Parse coefficients back out of a `dam.{layer}.model{i}` map.
    pub fn from_weight_map(map: &WeightMap, model_count: usize) -> Result<CoefficientSet> {
        let mut by_layer: BTreeMap<String, Vec<Option<Tensor>>> = BTreeMap::new();
        for (name, tensor) in &map.tensors {
            let rest = name
                .strip_prefix("dam.")
                .ok_or_else(|| Error::Config(format!("unexpected coefficient tensor `{name}`")))?;
            let (layer, model) = rest.rsplit_once(".model").ok_or_else(|| {
                Error::Config(format!("coefficient tensor `{name}` lacks a .model{{i}} suffix"))
            })?;
            let idx: usize = model
                .parse()
                .map_err(|_| Error::Config(format!("bad model index in `{name}`")))?;
            if idx >= model_count {
                return Err(Error::Config(format!(
                    "coefficient tensor `{name}` indexes model {idx}, only {model_count} models"
                )));
            }
            by_layer
                .entry(layer.to_string())
                .or_insert_with(|| vec![None; model_count])[idx] = Some(tensor.clone());
        }
        let mut layers = Vec::new();
        for (name, per_model) in by_layer {
            let per_model = per_model
                .into_iter()
                .enumerate()
                .map(|(i, t)| {
                    t.map(Parameter::trainable).ok_or_else(|| {
                        Error::Config(format!("layer `{name}` is missing model {i} coefficients"))
                    })
                })
                .collect::<Result<_>>()?;
            layers.push(CoeffLayer { name, per_model });
        }
        if layers.is_empty() {
            return Err(Error::Config("coefficient map holds no layers".into()));
        }
        Ok(CoefficientSet { layers })
    }
}

/// Coefficient vector length for a mergeable tensor: the column count of a
/// matrix, or the full length of a 1-D gain.
fn coefficient_len(shape: &[usize]) -> usize {
    match shape.len() {
        1 => shape[0],
        _ => shape[shape.len() - 1],
    }
}

/// Build the trainable coefficients for a set of compatible models.
pub fn init_coefficients(models: &[&WeightMap], config: &DamConfig) -> Result<CoefficientSet> {
    config.validate()?;
    if models.is_empty() {
        return Err(Error::InvalidArgument("init_coefficients: no models".into()));
    }
    if models.len() >= 2 {
        require_compatible(models)?;
    }
    let n = models.len();
    let mut layers = Vec::new();
    for (name, tensor) in &models[0].tensors {
        if !config.merge_scope.includes(name) {
            continue;
        }
        let len = coefficient_len(tensor.shape());
        let per_model = (0..n)
            .map(|i| {
                let tensor = match config.init {
                    CoeffInit::Uniform => Tensor::full(vec![len], 1.0 / n as f64)?,
                    CoeffInit::Ones => Tensor::full(vec![len], 1.0)?,
                    CoeffInit::Random { sigma } => {
                        let mut rng = Rng::new(derive_seed(config.seed, name, i as u64));
                        let data = (0..len)
                            .map(|_| 1.0 / n as f64 + sigma * rng.next_normal())
                            .collect();
                        Tensor::new(vec![len], data)?
                    }
                };
                Ok(Parameter::trainable(tensor))
            })
            .collect::<Result<_>>()?;
        layers.push(CoeffLayer { name: name.clone(), per_model });
    }
    if layers.is_empty() {
        return Err(Error::InvalidArgument(
            "merge scope resolves to zero mergeable layers".into(),
        ));
    }
    Ok(CoefficientSet { layers })
}

/// Layer provider that evaluates merged layers from N frozen source models
/// and trainable coefficient leaves.
pub struct DamAccess {
    base_nodes: BTreeMap<String, NodeId>,
    model_nodes: Vec<BTreeMap<String, NodeId>>,
    coeff_nodes: BTreeMap<String, Vec<NodeId>>,
    scope: MergeScope,
}

impl DamAccess {
    pub fn build(
        tape: &mut Tape,
        base: &WeightMap,
        models: &[&WeightMap],
        coefficients: &CoefficientSet,
        scope: MergeScope,
    ) -> Result<Self> {
        let mut base_nodes = BTreeMap::new();
        for (name, tensor) in &base.tensors {
            if !scope.includes(name) {
                base_nodes.insert(name.clone(), tape.leaf(tensor.clone(), false));
            }
        }
        let mut model_nodes = Vec::with_capacity(models.len());
        for model in models {
            let mut nodes = BTreeMap::new();
            for (name, tensor) in &model.tensors {
                if scope.includes(name) {
                    nodes.insert(name.clone(), tape.leaf(tensor.clone(), false));
                }
            }
            model_nodes.push(nodes);
        }
        let mut coeff_nodes = BTreeMap::new();
        for layer in &coefficients.layers {
            if layer.per_model.len() != models.len() {
                return Err(Error::InvalidArgument(format!(
                    "coefficients for `{}` cover {} models, expected {}",
                    layer.name,
                    layer.per_model.len(),
                    models.len()
                )));
            }
            let ids = layer.per_model.iter().map(|p| tape.parameter(p)).collect();
            coeff_nodes.insert(layer.name.clone(), ids);
        }
        Ok(DamAccess { base_nodes, model_nodes, coeff_nodes, scope })
    }

    /// Coefficient leaf ids in (layer, model) order matching the
    /// `CoefficientSet` layout.
    pub fn coefficient_nodes(&self) -> impl Iterator<Item = (&str, &[NodeId])> {
        self.coeff_nodes.iter().map(|(n, ids)| (n.as_str(), ids.as_slice()))
    }

    fn coeffs_for(&self, name: &str) -> Result<&[NodeId]> {
        self.coeff_nodes
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Schema(format!("no coefficients for layer `{name}`")))
    }

    fn base_node(&self, name: &str) -> Result<NodeId> {
        self.base_nodes
            .get(name)
            .copied()
            .ok_or_else(|| Error::Schema(format!("missing base tensor `{name}`")))
    }

    fn model_node(&self, model: usize, name: &str) -> Result<NodeId> {
        self.model_nodes[model]
            .get(name)
            .copied()
            .ok_or_else(|| Error::Schema(format!("missing tensor `{name}` in model {model}")))
    }
}

impl LayerAccess for DamAccess {
    fn embed(&self, tape: &mut Tape, ids: &[usize]) -> Result<NodeId> {
        if !self.scope.includes("embed.tok") {
            return tape.embedding_gather(self.base_node("embed.tok")?, ids);
        }
        let coeffs = self.coeffs_for("embed.tok")?.to_vec();
        let mut acc = None;
        for (i, &c) in coeffs.iter().enumerate() {
            let gathered = tape.embedding_gather(self.model_node(i, "embed.tok")?, ids)?;
            let scaled = tape.mul(gathered, c)?;
            acc = Some(match acc {
                None => scaled,
                Some(prev) => tape.add(prev, scaled)?,
            });
        }
        Ok(acc.expect("at least one model"))
    }

    fn norm_gain(&self, tape: &mut Tape, name: &str) -> Result<NodeId> {
        if !self.scope.includes(name) {
            return self.base_node(name);
        }
        let coeffs = self.coeffs_for(name)?.to_vec();
        let mut acc = None;
        for (i, &c) in coeffs.iter().enumerate() {
            let scaled = tape.mul(self.model_node(i, name)?, c)?;
            acc = Some(match acc {
                None => scaled,
                Some(prev) => tape.add(prev, scaled)?,
            });
        }
        Ok(acc.expect("at least one model"))
    }

    fn linear(&self, tape: &mut Tape, name: &str, x: NodeId) -> Result<NodeId> {
        if !self.scope.includes(name) {
            let wt = tape.transpose(self.base_node(name)?)?;
            return tape.matmul(x, wt);
        }
        let coeffs = self.coeffs_for(name)?.to_vec();
        let mut acc = None;
        for (i, &c) in coeffs.iter().enumerate() {
            let scaled_x = tape.mul(x, c)?;
            let wt = tape.transpose(self.model_node(i, name)?)?;
            let y = tape.matmul(scaled_x, wt)?;
            acc = Some(match acc {
                None => y,
                Some(prev) => tape.add(prev, y)?,
            });
        }
        Ok(acc.expect("at least one model"))
    }
}

/// Forward pass of the coefficient-merged model; logits `[B, T, V]`.
pub fn merged_forward(
    models: &[&WeightMap],
    coefficients: &CoefficientSet,
    base: &WeightMap,
    model_config: &TransformerConfig,
    scope: MergeScope,
    batch: &TokenBatch,
) -> Result<Tensor> {
    model_config.validate_weights(base)?;
    let mut tape = Tape::new();
    let access = DamAccess::build(&mut tape, base, models, coefficients, scope)?;
    let logits = forward_on_tape(&mut tape, &access, model_config, batch)?;
    let flat = tape.value(logits);
    Tensor::new(
        vec![batch.sequences.len(), batch.seq_len(), model_config.vocab_size],
        flat.data().to_vec(),
    )
}

/// Materialize `W = Σ_i W_i · diag(c_i)` per in-scope tensor; out-of-scope
/// tensors are copied from the base.
pub fn bake(
    base: &WeightMap,
    models: &[&WeightMap],
    coefficients: &CoefficientSet,
    scope: MergeScope,
) -> Result<WeightMap> {
    if models.is_empty() {
        return Err(Error::InvalidArgument("bake: no models".into()));
    }
    let mut all = vec![base];
    all.extend_from_slice(models);
    require_compatible(&all)?;
    let mut out = base.clone();
    for layer in &coefficients.layers {
        if !scope.includes(&layer.name) {
            continue;
        }
        let reference = base.get(&layer.name)?;
        let shape = reference.shape().to_vec();
        let cols = coefficient_len(&shape);
        let mut acc = vec![0.0; reference.numel()];
        for (model, param) in models.iter().zip(&layer.per_model) {
            let coeff = param.tensor.data();
            if coeff.len() != cols {
                return Err(Error::ShapeMismatch {
                    op: "bake",
                    detail: format!(
                        "coefficients for `{}` have length {}, layer has {cols} columns",
                        layer.name,
                        coeff.len()
                    ),
                });
            }
            let data = model.get(&layer.name)?.data();
            for (idx, (a, &w)) in acc.iter_mut().zip(data).enumerate() {
                *a += coeff[idx % cols] * w;
            }
        }
        out.insert(layer.name.clone(), Tensor::new(shape, acc)?);
    }
    out.metadata = BTreeMap::new();
    out.metadata.insert("method".into(), "dam".into());
    out.metadata.insert("merge_scope".into(), scope.label().into());
    Ok(out)
}

// ── objective terms (value level) ───────────────────────────────────────

fn check_pairs(merged: &[Tensor], individual: &[Tensor], op: &'static str) -> Result<()> {
    if merged.len() != individual.len() {
        return Err(Error::ShapeMismatch {
            op,
            detail: format!("{} merged tensors vs {} individual", merged.len(), individual.len()),
        });
    }
    for (m, e) in merged.iter().zip(individual) {
        if m.shape() != e.shape() {
            return Err(Error::ShapeMismatch {
                op,
                detail: format!("{:?} vs {:?}", m.shape(), e.shape()),
            });
        }
    }
    Ok(())
}

fn row_log_softmax_values(logits: &Tensor) -> Vec<f64> {
    let (rows, cols) = (logits.rows(), logits.cols());
    let mut out = vec![0.0; logits.numel()];
    for r in 0..rows {
        let row = &logits.data()[r * cols..(r + 1) * cols];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let log_sum = row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln() + max;
        for j in 0..cols {
            out[r * cols + j] = row[j] - log_sum;
        }
    }
    out
}

/// Position-averaged KL for one dataset's logits pair. `swap` puts the
/// individual model's distribution on the left.
pub fn kl_term(merged: &Tensor, individual: &Tensor, swap: bool) -> Result<f64> {
    check_pairs(std::slice::from_ref(merged), std::slice::from_ref(individual), "kl_loss")?;
    let (left, right) = if swap { (individual, merged) } else { (merged, individual) };
    let lp = row_log_softmax_values(left);
    let lq = row_log_softmax_values(right);
    let (rows, cols) = (left.rows(), left.cols());
    let mut total = 0.0;
    for r in 0..rows {
        for j in 0..cols {
            let idx = r * cols + j;
            total += lp[idx].exp() * (lp[idx] - lq[idx]);
        }
    }
    Ok(total / rows as f64)
}

/// `Σ_i KL(P_merged(D_i) ‖ P_i(D_i))`, positions averaged within each
/// dataset, datasets summed.
pub fn kl_loss(merged: &[Tensor], individual: &[Tensor], swap: bool) -> Result<f64> {
    check_pairs(merged, individual, "kl_loss")?;
    merged
        .iter()
        .zip(individual)
        .map(|(m, e)| kl_term(m, e, swap))
        .sum()
}

/// Mean squared difference of raw logits for one dataset.
pub fn mse_term(merged: &Tensor, individual: &Tensor) -> Result<f64> {
    check_pairs(std::slice::from_ref(merged), std::slice::from_ref(individual), "mse_loss")?;
    let total: f64 = merged
        .data()
        .iter()
        .zip(individual.data())
        .map(|(&a, &b)| (a - b) * (a - b))
        .sum();
    Ok(total / merged.numel() as f64)
}

/// Mean squared logit difference, averaged over datasets.
pub fn mse_loss(merged: &[Tensor], individual: &[Tensor]) -> Result<f64> {
    check_pairs(merged, individual, "mse_loss")?;
    if merged.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = merged
        .iter()
        .zip(individual)
        .map(|(m, e)| mse_term(m, e))
        .sum::<Result<f64>>()?;
    Ok(sum / merged.len() as f64)
}

/// Position-averaged Shannon entropy of the row-softmax for one dataset.
pub fn entropy_term(merged: &Tensor) -> f64 {
    let lp = row_log_softmax_values(merged);
    let (rows, cols) = (merged.rows(), merged.cols());
    let mut total = 0.0;
    for r in 0..rows {
        for j in 0..cols {
            let idx = r * cols + j;
            total -= lp[idx].exp() * lp[idx];
        }
    }
    total / rows as f64
}

/// `Σ_i H(P_merged(D_i))`: needs no individual-model logits.
pub fn entropy_loss(merged: &[Tensor]) -> f64 {
    merged.iter().map(entropy_term).sum()
}

/// `λ · Σ_layers Σ_{i<j} cos(c_i, c_j)`; zero-norm vectors contribute 0,
/// and fewer than two models give 0.
pub fn cosine_penalty(coefficients: &CoefficientSet, lambda: f64) -> f64 {
    let mut total = 0.0;
    for layer in &coefficients.layers {
        let n = layer.per_model.len();
        for i in 0..n {
            for j in (i + 1)..n {
                let a = &layer.per_model[i].tensor;
                let b = &layer.per_model[j].tensor;
                let (na, nb) = (a.norm(), b.norm());
                if na > 1e-12 && nb > 1e-12 {
                    total += a.dot(b).expect("same length") / (na * nb);
                }
            }
        }
    }
    lambda * total
}

/// `(λ1 Σ|c|, λ2 Σ c²)` over every coefficient.
pub fn reg_penalty_parts(coefficients: &CoefficientSet, lambda_l1: f64, lambda_l2: f64) -> (f64, f64) {
    let mut abs_sum = 0.0;
    let mut sq_sum = 0.0;
    for layer in &coefficients.layers {
        for param in &layer.per_model {
            for &v in param.tensor.data() {
                abs_sum += v.abs();
                sq_sum += v * v;
            }
        }
    }
    (lambda_l1 * abs_sum, lambda_l2 * sq_sum)
}

pub fn reg_penalty(coefficients: &CoefficientSet, lambda_l1: f64, lambda_l2: f64) -> f64 {
    let (l1, l2) = reg_penalty_parts(coefficients, lambda_l1, lambda_l2);
    l1 + l2
}

/// Loss components of one step; the total is their sum.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, Default)]
pub struct LossParts {
    pub primary: f64,
    pub cosine: f64,
    pub l1: f64,
    pub l2: f64,
}

impl LossParts {
    pub fn total(&self) -> f64 {
        self.primary + self.cosine + self.l1 + self.l2
    }
}

/// Combine the active components under a config; mirrors the training
/// objective construction.
pub fn total_objective(_config: &DamConfig, parts: &LossParts) -> f64 {
    parts.total()
}

// ── objective terms (tape level) ────────────────────────────────────────

fn kl_term_on_tape(tape: &mut Tape, merged: NodeId, expert: NodeId, swap: bool) -> Result<NodeId> {
    let (left, right) = if swap { (expert, merged) } else { (merged, expert) };
    let p = tape.row_softmax(left)?;
    let lp = tape.row_log_softmax(left)?;
    let lq = tape.row_log_softmax(right)?;
    let diff = tape.sub(lp, lq)?;
    let weighted = tape.mul(p, diff)?;
    let per_row = tape.reduce_sum(weighted, ReduceAxis::Last)?;
    tape.reduce_mean(per_row, ReduceAxis::All)
}

fn mse_term_on_tape(tape: &mut Tape, merged: NodeId, expert: NodeId) -> Result<NodeId> {
    let diff = tape.sub(merged, expert)?;
    let sq = tape.mul(diff, diff)?;
    tape.reduce_mean(sq, ReduceAxis::All)
}

fn entropy_term_on_tape(tape: &mut Tape, merged: NodeId) -> Result<NodeId> {
    let p = tape.row_softmax(merged)?;
    let lp = tape.row_log_softmax(merged)?;
    let plogp = tape.mul(p, lp)?;
    let per_row = tape.reduce_sum(plogp, ReduceAxis::Last)?;
    let mean = tape.reduce_mean(per_row, ReduceAxis::All)?;
    tape.scale(mean, -1.0)
}

fn cosine_penalty_on_tape(tape: &mut Tape, access: &DamAccess, lambda: f64) -> Result<Option<NodeId>> {
    if lambda == 0.0 {
        return Ok(None);
    }
    let layers: Vec<Vec<NodeId>> = access.coefficient_nodes().map(|(_, ids)| ids.to_vec()).collect();
    let mut acc: Option<NodeId> = None;
    for ids in layers {
        let n = ids.len();
        for i in 0..n {
            for j in (i + 1)..n {
                let (a, b) = (ids[i], ids[j]);
                let na = tape.value(a).norm();
                let nb = tape.value(b).norm();
                if na <= 1e-12 || nb <= 1e-12 {
                    continue;
                }
                let prod = tape.mul(a, b)?;
                let dot = tape.reduce_sum(prod, ReduceAxis::All)?;
                let aa = tape.mul(a, a)?;
                let a2 = tape.reduce_sum(aa, ReduceAxis::All)?;
                let bb = tape.mul(b, b)?;
                let b2 = tape.reduce_sum(bb, ReduceAxis::All)?;
                let denom_sq = tape.mul(a2, b2)?;
                let denom = tape.sqrt(denom_sq)?;
                let cos = tape.div(dot, denom)?;
                acc = Some(match acc {
                    None => cos,
                    Some(prev) => tape.add(prev, cos)?,
                });
            }
        }
    }
    match acc {
        None => Ok(None),
        Some(node) => Ok(Some(tape.scale(node, lambda)?)),
    }
}

fn reg_penalty_on_tape(
    tape: &mut Tape,
    access: &DamAccess,
    lambda_l1: f64,
    lambda_l2: f64,
) -> Result<(Option<NodeId>, Option<NodeId>)> {
    let ids: Vec<NodeId> = access
        .coefficient_nodes()
        .flat_map(|(_, ids)| ids.to_vec())
        .collect();
    let mut l1_acc: Option<NodeId> = None;
    let mut l2_acc: Option<NodeId> = None;
    for &c in &ids {
        if lambda_l1 > 0.0 {
            let a = tape.abs(c)?;
            let s = tape.reduce_sum(a, ReduceAxis::All)?;
            l1_acc = Some(match l1_acc {
                None => s,
                Some(prev) => tape.add(prev, s)?,
            });
        }
        if lambda_l2 > 0.0 {
            let sq = tape.mul(c, c)?;
            let s = tape.reduce_sum(sq, ReduceAxis::All)?;
            l2_acc = Some(match l2_acc {
                None => s,
                Some(prev) => tape.add(prev, s)?,
            });
        }
    }
    let l1 = match l1_acc {
        None => None,
        Some(node) => Some(tape.scale(node, lambda_l1)?),
    };
    let l2 = match l2_acc {
        None => None,
        Some(node) => Some(tape.scale(node, lambda_l2)?),
    };
    Ok((l1, l2))
}

/// One training step's objective on the tape, with its component values.
pub struct StepObjective {
    pub total: NodeId,
    pub parts: LossParts,
}

/// Assemble the full objective for one batch: the configured primary term
/// (KL/MSE against `expert_logits`, or entropy, with MSE carrying the 1/N
/// dataset factor) plus the active cosine and L1/L2 penalties.
pub fn build_step_objective(
    tape: &mut Tape,
    access: &DamAccess,
    model_config: &TransformerConfig,
    config: &DamConfig,
    batch: &TokenBatch,
    expert_logits: Option<&Tensor>,
    n_datasets: usize,
) -> Result<StepObjective> {
    let merged_logits = forward_on_tape(tape, access, model_config, batch)?;
    let primary_node = match config.loss {
        LossKind::Kl | LossKind::Mse => {
            let expert = expert_logits.ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "{} objective needs the owning model's logits",
                    config.loss.label()
                ))
            })?;
            let expert_node = tape.constant(expert.clone());
            match config.loss {
                LossKind::Kl => kl_term_on_tape(tape, merged_logits, expert_node, config.kl_swap)?,
                LossKind::Mse => {
                    let term = mse_term_on_tape(tape, merged_logits, expert_node)?;
                    tape.scale(term, 1.0 / n_datasets as f64)?
                }
                LossKind::Entropy => unreachable!(),
            }
        }
        LossKind::Entropy => entropy_term_on_tape(tape, merged_logits)?,
    };

    let mut total = primary_node;
    let cosine_node = cosine_penalty_on_tape(tape, access, config.lambda_cosine)?;
    if let Some(node) = cosine_node {
        total = tape.add(total, node)?;
    }
    let (l1_node, l2_node) = reg_penalty_on_tape(tape, access, config.lambda_l1, config.lambda_l2)?;
    if let Some(node) = l1_node {
        total = tape.add(total, node)?;
    }
    if let Some(node) = l2_node {
        total = tape.add(total, node)?;
    }
    let parts = LossParts {
        primary: tape.value(primary_node).scalar_value(),
        cosine: cosine_node.map_or(0.0, |n| tape.value(n).scalar_value()),
        l1: l1_node.map_or(0.0, |n| tape.value(n).scalar_value()),
        l2: l2_node.map_or(0.0, |n| tape.value(n).scalar_value()),
    };
    Ok(StepObjective { total, parts })
}

// ── optimizer ───────────────────────────────────────────────────────────

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

struct Optimizer {
    kind: OptimizerKind,
    learning_rate: f64,
    step_count: usize,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
}

impl Optimizer {
    fn new(config: &DamConfig, coefficients: &CoefficientSet) -> Self {
        let sizes: Vec<usize> = coefficients
            .layers
            .iter()
            .flat_map(|l| l.per_model.iter().map(|p| p.tensor.numel()))
            .collect();
        Optimizer {
            kind: config.optimizer,
            learning_rate: config.learning_rate,
            step_count: 0,
            first_moment: sizes.iter().map(|&s| vec![0.0; s]).collect(),
            second_moment: sizes.iter().map(|&s| vec![0.0; s]).collect(),
        }
    }

    fn apply(&mut self, coefficients: &mut CoefficientSet, grads: &[Vec<f64>]) {
        self.step_count += 1;
        let mut slot = 0;
        for layer in &mut coefficients.layers {
            for param in &mut layer.per_model {
                let grad = &grads[slot];
                let values = param.tensor.data_mut();
                match self.kind {
                    OptimizerKind::Sgd => {
                        for (v, g) in values.iter_mut().zip(grad) {
                            *v -= self.learning_rate * g;
                        }
                    }
                    OptimizerKind::Adam => {
                        let m = &mut self.first_moment[slot];
                        let s = &mut self.second_moment[slot];
                        let bc1 = 1.0 - ADAM_BETA1.powi(self.step_count as i32);
                        let bc2 = 1.0 - ADAM_BETA2.powi(self.step_count as i32);
                        for i in 0..values.len() {
                            m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * grad[i];
                            s[i] = ADAM_BETA2 * s[i] + (1.0 - ADAM_BETA2) * grad[i] * grad[i];
                            let m_hat = m[i] / bc1;
                            let s_hat = s[i] / bc2;
                            values[i] -= self.learning_rate * m_hat / (s_hat.sqrt() + ADAM_EPS);
                        }
                    }
                }
                slot += 1;
            }
        }
    }
}

// ── training ────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub dataset: usize,
    pub total: f64,
    pub primary: f64,
    pub cosine: f64,
    pub l1: f64,
    pub l2: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: usize,
    pub loss: String,
    pub initial_total: Option<f64>,
    pub final_total: Option<f64>,
    pub per_model_mean_abs: Vec<f64>,
    pub coefficient_count: usize,
    /// How many distinct expert-logit evaluations ran; 0 for the entropy
    /// objective, which never touches individual-model logits.
    pub expert_forward_evals: usize,
    pub wall_clock_secs: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: Vec<StepRecord>,
    pub summary: TrainSummary,
}

/// Train coefficients against frozen experts. Batches are drawn round-robin
/// across the per-model dataset streams (step t uses stream t mod N), each
/// step pairing the batch only with its owning model's logits.
pub fn dam_train(
    base: &WeightMap,
    models: &[&WeightMap],
    datasets: &[Vec<TokenBatch>],
    model_config: &TransformerConfig,
    config: &DamConfig,
) -> Result<(CoefficientSet, TrainReport)> {
    config.validate()?;
    model_config.validate_weights(base)?;
    if models.is_empty() {
        return Err(Error::InvalidArgument("dam_train: no models".into()));
    }
    if datasets.len() != models.len() {
        return Err(Error::InvalidArgument(format!(
            "dam_train: {} dataset streams for {} models",
            datasets.len(),
            models.len()
        )));
    }
    if datasets.iter().any(Vec::is_empty) {
        return Err(Error::InvalidArgument("dam_train: empty dataset stream".into()));
    }
    let mut all = vec![base];
    all.extend_from_slice(models);
    require_compatible(&all)?;

    let started = Instant::now();
    let mut coefficients = init_coefficients(models, config)?;
    let mut optimizer = Optimizer::new(config, &coefficients);
    let mut records = Vec::with_capacity(config.steps);
    let mut expert_cache: BTreeMap<(usize, usize), Tensor> = BTreeMap::new();
    let mut expert_forward_evals = 0usize;
    let n_datasets = datasets.len();

    for step in 0..config.steps {
        let dataset_idx = step % n_datasets;
        let batch_idx = (step / n_datasets) % datasets[dataset_idx].len();
        let batch = &datasets[dataset_idx][batch_idx];
        if batch.affinity != dataset_idx {
            return Err(Error::InvalidArgument(format!(
                "batch affinity {} does not match dataset stream {dataset_idx}",
                batch.affinity
            )));
        }

        let expert_logits = if config.loss.needs_expert_logits() {
            match expert_cache.get(&(dataset_idx, batch_idx)) {
                Some(cached) => Some(cached.clone()),
                None => {
                    let logits = forward(models[dataset_idx], model_config, batch)?;
                    let flat = Tensor::new(
                        vec![batch.sequences.len() * batch.seq_len(), model_config.vocab_size],
                        logits.data().to_vec(),
                    )?;
                    expert_forward_evals += 1;
                    expert_cache.insert((dataset_idx, batch_idx), flat.clone());
                    Some(flat)
                }
            }
        } else {
            None
        };

        let mut tape = Tape::new();
        let access = DamAccess::build(&mut tape, base, models, &coefficients, config.merge_scope)?;
        let objective = build_step_objective(
            &mut tape,
            &access,
            model_config,
            config,
            batch,
            expert_logits.as_ref(),
            n_datasets,
        )
        .map_err(|e| match e {
            Error::NonFinite { op } => Error::Diverged {
                step,
                detail: format!("non-finite values in {op}"),
            },
            other => other,
        })?;
        let total = objective.total;

        let record = StepRecord {
            step,
            dataset: dataset_idx,
            total: tape.value(total).scalar_value(),
            primary: objective.parts.primary,
            cosine: objective.parts.cosine,
            l1: objective.parts.l1,
            l2: objective.parts.l2,
        };
        if !record.total.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: format!(
                    "total={} primary={} cosine={} l1={} l2={}",
                    record.total, record.primary, record.cosine, record.l1, record.l2
                ),
            });
        }

        tape.backward(total)?;
        let mut grads: Vec<Vec<f64>> = Vec::with_capacity(coefficients.coefficient_count());
        for (_, ids) in access.coefficient_nodes() {
            for &id in ids {
                let g = tape
                    .grad(id)
                    .map(|t| t.data().to_vec())
                    .unwrap_or_else(|| vec![0.0; tape.value(id).numel()]);
                grads.push(g);
            }
        }
        if let Some(clip) = config.grad_clip {
            let norm: f64 = grads
                .iter()
                .flat_map(|g| g.iter().map(|v| v * v))
                .sum::<f64>()
                .sqrt();
            if norm > clip {
                let factor = clip / norm;
                for g in &mut grads {
                    for v in g.iter_mut() {
                        *v *= factor;
                    }
                }
            }
        }
        optimizer.apply(&mut coefficients, &grads);
        records.push(record);
    }

    let summary = TrainSummary {
        steps: config.steps,
        loss: config.loss.label().to_string(),
        initial_total: records.first().map(|r| r.total),
        final_total: records.last().map(|r| r.total),
        per_model_mean_abs: coefficients.per_model_mean_abs(),
        coefficient_count: coefficients.coefficient_count(),
        expert_forward_evals,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    Ok((coefficients, TrainReport { steps: records, summary }))
}
