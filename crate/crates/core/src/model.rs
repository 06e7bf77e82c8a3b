//! A compact decoder-only transformer for fabricating and evaluating
//! desk-scale expert models.
//!
//! Architecture: token embedding, pre-norm residual blocks of causal
//! multi-head attention and a SwiGLU-style gated MLP, RMSNorm throughout, and
//! an untied LM head. There is no positional encoding beyond causal order,
//! so the synthetic tasks the harness trains on are all solvable from
//! relative/content structure alone.
//!
//! Weight layout (`layers.{i}.*` per block):
//! `embed.tok [V×d]`, `attn_norm.g [d]`, `attn.{q,k,v,o} [d×d]`,
//! `mlp_norm.g [d]`, `mlp.{gate,up} [f×d]`, `mlp.down [d×f]`,
//! `final_norm.g [d]`, `lm_head [V×d]`. Linear weights are `[out × in]` and
//! apply as `y = x · Wᵀ`; the "linear" tensors are exactly those whose name
//! contains `.attn.` or `.mlp.` or equals `lm_head`.

use serde::{Deserialize, Serialize};

use crate::checkpoint::WeightMap;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, Rng};
use crate::tape::{NodeId, ReduceAxis, Tape};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct TransformerConfig {
    pub vocab_size: usize,
    pub model_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_dim: usize,
    pub max_seq_len: usize,
    pub rmsnorm_eps: f64,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        TransformerConfig {
            vocab_size: 64,
            model_dim: 32,
            layers: 2,
            heads: 4,
            mlp_dim: 64,
            max_seq_len: 64,
            rmsnorm_eps: 1e-5,
        }
    }
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        let extents = [
            self.vocab_size,
            self.model_dim,
            self.layers,
            self.heads,
            self.mlp_dim,
            self.max_seq_len,
        ];
        if extents.iter().any(|&e| e == 0) {
            return Err(Error::Config("all model extents must be >= 1".into()));
        }
        if self.model_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "model_dim {} not divisible by heads {}",
                self.model_dim, self.heads
            )));
        }
        if !(self.rmsnorm_eps >= 0.0 && self.rmsnorm_eps.is_finite()) {
            return Err(Error::Config("rmsnorm_eps must be finite and >= 0".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }

    /// Canonical tensor names and shapes, in schema order.
    pub fn schema(&self) -> Vec<(String, Vec<usize>)> {
        let (v, d, f) = (self.vocab_size, self.model_dim, self.mlp_dim);
        let mut out = vec![("embed.tok".to_string(), vec![v, d])];
        for i in 0..self.layers {
            out.push((format!("layers.{i}.attn_norm.g"), vec![d]));
            for proj in ["q", "k", "v", "o"] {
                out.push((format!("layers.{i}.attn.{proj}"), vec![d, d]));
            }
            out.push((format!("layers.{i}.mlp_norm.g"), vec![d]));
            out.push((format!("layers.{i}.mlp.gate"), vec![f, d]));
            out.push((format!("layers.{i}.mlp.up"), vec![f, d]));
            out.push((format!("layers.{i}.mlp.down"), vec![d, f]));
        }
        out.push(("final_norm.g".to_string(), vec![d]));
        out.push(("lm_head".to_string(), vec![v, d]));
        out
    }

    /// Check that a weight map carries exactly the schema tensors.
    pub fn validate_weights(&self, weights: &WeightMap) -> Result<()> {
        let schema = self.schema();
        for (name, shape) in &schema {
            let tensor = weights
                .tensors
                .get(name)
                .ok_or_else(|| Error::Schema(format!("missing tensor `{name}`")))?;
            if tensor.shape() != shape.as_slice() {
                return Err(Error::Schema(format!(
                    "tensor `{name}` has shape {:?}, schema requires {shape:?}",
                    tensor.shape()
                )));
            }
        }
        if weights.len() != schema.len() {
            let expected: std::collections::BTreeSet<&str> =
                schema.iter().map(|(n, _)| n.as_str()).collect();
            let extra: Vec<&str> = weights
                .names()
                .filter(|n| !expected.contains(n))
                .collect();
            return Err(Error::Schema(format!("unexpected tensors {extra:?}")));
        }
        Ok(())
    }
}

/// Linear-layer names are exactly those containing `.attn.` or `.mlp.` or
/// equal to `lm_head`.
pub fn is_linear_name(name: &str) -> bool {
    name.contains(".attn.") || name.contains(".mlp.") || name == "lm_head"
}

/// A batch of equal-length token sequences tagged with the index of the
/// expert/dataset it belongs to.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TokenBatch {
    pub sequences: Vec<Vec<usize>>,
    pub affinity: usize,
}

impl TokenBatch {
    pub fn validate(&self, config: &TransformerConfig) -> Result<()> {
        if self.sequences.is_empty() {
            return Err(Error::InvalidArgument("batch has no sequences".into()));
        }
        let len = self.sequences[0].len();
        if len == 0 {
            return Err(Error::InvalidArgument("batch holds an empty sequence".into()));
        }
        if len > config.max_seq_len {
            return Err(Error::InvalidArgument(format!(
                "sequence length {len} exceeds max_seq_len {}",
                config.max_seq_len
            )));
        }
        for seq in &self.sequences {
            if seq.len() != len {
                return Err(Error::InvalidArgument(
                    "sequences in a batch must share one length".into(),
                ));
            }
            for &id in seq {
                if id >= config.vocab_size {
                    return Err(Error::TokenOutOfRange { id, vocab: config.vocab_size });
                }
            }
        }
        Ok(())
    }

    pub fn seq_len(&self) -> usize {
        self.sequences.first().map_or(0, Vec::len)
    }

    fn flat_ids(&self) -> Vec<usize> {
        self.sequences.iter().flatten().copied().collect()
    }
}

/// Where a forward pass gets its embedding rows, norm gains, and linear
/// projections. The plain implementation reads one weight map; the merged
/// implementation combines several under trainable coefficients.
pub trait LayerAccess {
    fn embed(&self, tape: &mut Tape, ids: &[usize]) -> Result<NodeId>;
    fn norm_gain(&self, tape: &mut Tape, name: &str) -> Result<NodeId>;
    /// `y = x · Wᵀ` for the named linear layer.
    fn linear(&self, tape: &mut Tape, name: &str, x: NodeId) -> Result<NodeId>;
}

/// All tensors of one weight map inserted as tape leaves.
pub struct ModelNodes {
    nodes: std::collections::BTreeMap<String, NodeId>,
}

impl ModelNodes {
    pub fn insert(tape: &mut Tape, weights: &WeightMap, trainable: bool) -> Self {
        let nodes = weights
            .tensors
            .iter()
            .map(|(name, tensor)| (name.clone(), tape.leaf(tensor.clone(), trainable)))
            .collect();
        ModelNodes { nodes }
    }

    pub fn node(&self, name: &str) -> Result<NodeId> {
        self.nodes
            .get(name)
            .copied()
            .ok_or_else(|| Error::Schema(format!("missing tensor `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, NodeId)> {
        self.nodes.iter().map(|(n, &id)| (n.as_str(), id))
    }
}

impl LayerAccess for ModelNodes {
    fn embed(&self, tape: &mut Tape, ids: &[usize]) -> Result<NodeId> {
        tape.embedding_gather(self.node("embed.tok")?, ids)
    }

    fn norm_gain(&self, _tape: &mut Tape, name: &str) -> Result<NodeId> {
        self.node(name)
    }

    fn linear(&self, tape: &mut Tape, name: &str, x: NodeId) -> Result<NodeId> {
        let wt = tape.transpose(self.node(name)?)?;
        tape.matmul(x, wt)
    }
}

/// Additive causal mask: 0 on and below the diagonal, a large negative
/// value above. exp() of masked scores underflows to exactly 0, so logits
/// at position p never see tokens past p.
pub fn causal_mask(len: usize) -> Tensor {
    let mut data = vec![0.0; len * len];
    for i in 0..len {
        for j in (i + 1)..len {
            data[i * len + j] = -1e9;
        }
    }
    Tensor::new(vec![len, len], data).expect("mask values are finite")
}

/// Run the transformer on a batch, producing logits `[B·T × V]` on the tape.
pub fn forward_on_tape(
    tape: &mut Tape,
    access: &impl LayerAccess,
    config: &TransformerConfig,
    batch: &TokenBatch,
) -> Result<NodeId> {
    config.validate()?;
    batch.validate(config)?;
    let b = batch.sequences.len();
    let t = batch.seq_len();
    let (heads, dh) = (config.heads, config.head_dim());
    let attn_scale = 1.0 / (dh as f64).sqrt();

    let mut x = access.embed(tape, &batch.flat_ids())?;
    let mask = tape.constant(causal_mask(t));

    for layer in 0..config.layers {
        // Attention block.
        let gain = access.norm_gain(tape, &format!("layers.{layer}.attn_norm.g"))?;
        let normed = tape.rms_norm(x, gain, config.rmsnorm_eps)?;
        let q = access.linear(tape, &format!("layers.{layer}.attn.q"), normed)?;
        let k = access.linear(tape, &format!("layers.{layer}.attn.k"), normed)?;
        let v = access.linear(tape, &format!("layers.{layer}.attn.v"), normed)?;

        let mut per_sequence = Vec::with_capacity(b);
        for bi in 0..b {
            let (qb, kb, vb) = if b == 1 {
                (q, k, v)
            } else {
                (
                    tape.slice_rows(q, bi * t, (bi + 1) * t)?,
                    tape.slice_rows(k, bi * t, (bi + 1) * t)?,
                    tape.slice_rows(v, bi * t, (bi + 1) * t)?,
                )
            };
            let mut head_outputs = Vec::with_capacity(heads);
            for h in 0..heads {
                let (qh, kh, vh) = if heads == 1 {
                    (qb, kb, vb)
                } else {
                    (
                        tape.slice_cols(qb, h * dh, (h + 1) * dh)?,
                        tape.slice_cols(kb, h * dh, (h + 1) * dh)?,
                        tape.slice_cols(vb, h * dh, (h + 1) * dh)?,
                    )
                };
                let kt = tape.transpose(kh)?;
                let scores = tape.matmul(qh, kt)?;
                let scaled = tape.scale(scores, attn_scale)?;
                let masked = tape.add(scaled, mask)?;
                let probs = tape.row_softmax(masked)?;
                head_outputs.push(tape.matmul(probs, vh)?);
            }
            per_sequence.push(if heads == 1 {
                head_outputs[0]
            } else {
                tape.concat_cols(&head_outputs)?
            });
        }
        let context = if b == 1 {
            per_sequence[0]
        } else {
            tape.concat_rows(&per_sequence)?
        };
        let projected = access.linear(tape, &format!("layers.{layer}.attn.o"), context)?;
        x = tape.add(x, projected)?;

        // MLP block.
        let gain = access.norm_gain(tape, &format!("layers.{layer}.mlp_norm.g"))?;
        let normed = tape.rms_norm(x, gain, config.rmsnorm_eps)?;
        let gate = access.linear(tape, &format!("layers.{layer}.mlp.gate"), normed)?;
        let up = access.linear(tape, &format!("layers.{layer}.mlp.up"), normed)?;
        let activated = tape.silu(gate)?;
        let hidden = tape.mul(activated, up)?;
        let down = access.linear(tape, &format!("layers.{layer}.mlp.down"), hidden)?;
        x = tape.add(x, down)?;
    }

    let gain = access.norm_gain(tape, "final_norm.g")?;
    let normed = tape.rms_norm(x, gain, config.rmsnorm_eps)?;
    access.linear(tape, "lm_head", normed)
}

/// Pure forward pass: logits `[B, T, V]` as a value tensor.
pub fn forward(weights: &WeightMap, config: &TransformerConfig, batch: &TokenBatch) -> Result<Tensor> {
    config.validate_weights(weights)?;
    let mut tape = Tape::new();
    let nodes = ModelNodes::insert(&mut tape, weights, false);
    let logits = forward_on_tape(&mut tape, &nodes, config, batch)?;
    let flat = tape.value(logits);
    Tensor::new(
        vec![batch.sequences.len(), batch.seq_len(), config.vocab_size],
        flat.data().to_vec(),
    )
}

/// Mean negative log-likelihood of `targets` under row-softmax of `logits`
/// (matrix view: one row per predicted position).
pub fn cross_entropy(logits: &Tensor, targets: &[usize]) -> Result<f64> {
    let (rows, cols) = (logits.rows(), logits.cols());
    if targets.len() != rows {
        return Err(Error::ShapeMismatch {
            op: "cross_entropy",
            detail: format!("{} targets for {rows} logit rows", targets.len()),
        });
    }
    let mut total = 0.0;
    for (r, &target) in targets.iter().enumerate() {
        if target >= cols {
            return Err(Error::TokenOutOfRange { id: target, vocab: cols });
        }
        let row = &logits.data()[r * cols..(r + 1) * cols];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let log_sum = row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln() + max;
        total += log_sum - row[target];
    }
    Ok(total / rows as f64)
}

/// Differentiable cross-entropy on the tape.
pub fn cross_entropy_on_tape(tape: &mut Tape, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
    let log_probs = tape.row_log_softmax(logits)?;
    let picked = tape.select_per_row(log_probs, targets)?;
    let mean = tape.reduce_mean(picked, ReduceAxis::All)?;
    tape.scale(mean, -1.0)
}

/// Split a batch into next-token (inputs, targets): inputs drop the last
/// token of each sequence, targets are the sequences shifted left by one.
pub fn next_token_split(batch: &TokenBatch) -> Result<(TokenBatch, Vec<usize>)> {
    if batch.sequences.iter().any(|s| s.len() < 2) {
        return Err(Error::InvalidArgument(
            "next-token loss needs sequences of length >= 2".into(),
        ));
    }
    let inputs = TokenBatch {
        sequences: batch
            .sequences
            .iter()
            .map(|s| s[..s.len() - 1].to_vec())
            .collect(),
        affinity: batch.affinity,
    };
    let targets = batch.sequences.iter().flat_map(|s| s[1..].to_vec()).collect();
    Ok((inputs, targets))
}

/// Next-token cross-entropy of a batch, built on the tape.
pub fn next_token_loss_on_tape(
    tape: &mut Tape,
    access: &impl LayerAccess,
    config: &TransformerConfig,
    batch: &TokenBatch,
) -> Result<NodeId> {
    let (inputs, targets) = next_token_split(batch)?;
    let logits = forward_on_tape(tape, access, config, &inputs)?;
    cross_entropy_on_tape(tape, logits, &targets)
}

/// Next-token cross-entropy as a plain value (evaluation path).
pub fn next_token_loss(weights: &WeightMap, config: &TransformerConfig, batch: &TokenBatch) -> Result<f64> {
    let (inputs, targets) = next_token_split(batch)?;
    let logits = forward(weights, config, &inputs)?;
    cross_entropy(&logits, &targets)
}

/// Initialize a schema-conforming model: norm gains at 1, linear and
/// embedding weights from a normal with std `1/sqrt(fan_in)`. Each tensor
/// draws from its own name-derived stream, so values do not depend on
/// schema iteration order.
pub fn init_model(config: &TransformerConfig, seed: u64) -> Result<WeightMap> {
    config.validate()?;
    let mut map = WeightMap::new();
    for (name, shape) in config.schema() {
        let tensor = if shape.len() == 1 {
            Tensor::full(shape, 1.0)?
        } else {
            let fan_in = shape[1] as f64;
            let std = 1.0 / fan_in.sqrt();
            let mut rng = Rng::new(derive_seed(seed, &name, 0));
            let data = (0..shape[0] * shape[1])
                .map(|_| rng.next_normal() * std)
                .collect();
            Tensor::new(shape, data)?
        };
        map.insert(name, tensor);
    }
    Ok(map)
}

/// Fine-tune a copy of `base` on a dataset with plain gradient descent over
/// next-token cross-entropy. The base map is never modified; batch order is
/// a seeded shuffle, cycled for `steps` updates.
pub fn train_expert(
    base: &WeightMap,
    config: &TransformerConfig,
    dataset: &[TokenBatch],
    steps: usize,
    learning_rate: f64,
    seed: u64,
) -> Result<WeightMap> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("train_expert: empty dataset".into()));
    }
    config.validate_weights(base)?;
    let mut weights = base.clone();
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    Rng::new(derive_seed(seed, "train_expert.order", 0)).shuffle(&mut order);

    for step in 0..steps {
        let batch = &dataset[order[step % order.len()]];
        let mut tape = Tape::new();
        let nodes = ModelNodes::insert(&mut tape, &weights, true);
        let loss = next_token_loss_on_tape(&mut tape, &nodes, config, batch).map_err(|e| {
            match e {
                Error::NonFinite { op } => Error::Diverged {
                    step,
                    detail: format!("non-finite activations in {op}"),
                },
                other => other,
            }
        })?;
        let loss_value = tape.value(loss).scalar_value();
        if !loss_value.is_finite() {
            return Err(Error::Diverged { step, detail: format!("loss = {loss_value}") });
        }
        tape.backward(loss)?;
        for (name, node) in nodes.iter() {
            if let Some(grad) = tape.grad(node) {
                let updated = {
                    let current = weights.get(name)?;
                    current.sub(&grad.scale(learning_rate)?)?
                };
                weights.insert(name, updated);
            }
        }
    }
    Ok(weights)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> TransformerConfig {
        TransformerConfig {
            vocab_size: 16,
            model_dim: 8,
            layers: 2,
            heads: 2,
            mlp_dim: 12,
            max_seq_len: 16,
            rmsnorm_eps: 1e-5,
        }
    }

    fn batch(seqs: Vec<Vec<usize>>) -> TokenBatch {
        TokenBatch { sequences: seqs, affinity: 0 }
    }

    #[test]
    fn init_is_deterministic_and_schema_shaped() {
        let config = TransformerConfig::default();
        let a = init_model(&config, 7).unwrap();
        let b = init_model(&config, 7).unwrap();
        assert_eq!(a, b);
        config.validate_weights(&a).unwrap();
        for (name, shape) in config.schema() {
            assert_eq!(a.get(&name).unwrap().shape(), shape.as_slice(), "{name}");
        }
        let c = init_model(&config, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn forward_shape_and_determinism() {
        let config = tiny_config();
        let weights = init_model(&config, 1).unwrap();
        let b = batch(vec![vec![1, 2, 3, 4], vec![1, 2, 3, 4]]);
        let logits = forward(&weights, &config, &b).unwrap();
        assert_eq!(logits.shape(), &[2, 4, 16]);
        // identical sequences give identical logit rows
        let n = 4 * 16;
        assert_eq!(&logits.data()[..n], &logits.data()[n..]);
    }

    #[test]
    fn causality_late_tokens_do_not_leak() {
        let config = tiny_config();
        let weights = init_model(&config, 3).unwrap();
        let a = batch(vec![vec![5, 6, 7, 8, 9]]);
        let mut changed = a.clone();
        changed.sequences[0][4] = 1;
        let la = forward(&weights, &config, &a).unwrap();
        let lb = forward(&weights, &config, &changed).unwrap();
        // positions 0..4 unchanged
        let v = config.vocab_size;
        assert_eq!(&la.data()[..4 * v], &lb.data()[..4 * v]);
        assert_ne!(&la.data()[4 * v..], &lb.data()[4 * v..]);
    }

    #[test]
    fn rejects_out_of_range_token() {
        let config = tiny_config();
        let weights = init_model(&config, 1).unwrap();
        let b = batch(vec![vec![1, 99]]);
        assert!(matches!(
            forward(&weights, &config, &b),
            Err(Error::TokenOutOfRange { id: 99, .. })
        ));
    }

    #[test]
    fn rejects_schema_violation() {
        let config = tiny_config();
        let mut weights = init_model(&config, 1).unwrap();
        weights.tensors.remove("lm_head");
        let b = batch(vec![vec![1, 2]]);
        assert!(matches!(forward(&weights, &config, &b), Err(Error::Schema(_))));
    }

    #[test]
    fn cross_entropy_uniform_is_log_vocab() {
        let logits = Tensor::zeros(vec![3, 4]);
        let ce = cross_entropy(&logits, &[0, 1, 2]).unwrap();
        assert!((ce - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_vanishes_with_margin() {
        let mut prev = f64::INFINITY;
        for margin in [2.0, 5.0, 10.0, 20.0] {
            let mut data = vec![0.0; 4];
            data[1] = margin;
            let logits = Tensor::new(vec![1, 4], data).unwrap();
            let ce = cross_entropy(&logits, &[1]).unwrap();
            assert!(ce < prev);
            prev = ce;
        }
        assert!(prev < 1e-8);
    }

    #[test]
    fn cross_entropy_hand_example() {
        // Two positions over a 2-token vocab.
        let logits = Tensor::new(vec![2, 2], vec![0.0, 1.0, 2.0, 0.0]).unwrap();
        let expected = ((1.0 + 1.0f64.exp()).ln() - 1.0 + (1.0 + 2.0f64.exp()).ln() - 2.0) / 2.0;
        let ce = cross_entropy(&logits, &[1, 0]).unwrap();
        assert!((ce - expected).abs() < 1e-12);
    }

    #[test]
    fn tape_cross_entropy_matches_value_path() {
        let config = tiny_config();
        let weights = init_model(&config, 5).unwrap();
        let b = batch(vec![vec![3, 1, 4, 1, 5]]);
        let value = next_token_loss(&weights, &config, &b).unwrap();
        let mut tape = Tape::new();
        let nodes = ModelNodes::insert(&mut tape, &weights, false);
        let node = next_token_loss_on_tape(&mut tape, &nodes, &config, &b).unwrap();
        assert!((tape.value(node).scalar_value() - value).abs() < 1e-12);
    }

    #[test]
    fn train_zero_steps_returns_base() {
        let config = tiny_config();
        let base = init_model(&config, 2).unwrap();
        let data = vec![batch(vec![vec![1, 2, 3, 4]])];
        let trained = train_expert(&base, &config, &data, 0, 0.1, 0).unwrap();
        assert_eq!(trained, base);
    }

    #[test]
    fn training_reduces_loss_on_constant_sequences() {
        let config = tiny_config();
        let base = init_model(&config, 2).unwrap();
        let data = vec![batch(vec![vec![3, 5, 7, 9, 11, 13]])];
        let before = next_token_loss(&base, &config, &data[0]).unwrap();
        let trained = train_expert(&base, &config, &data, 200, 0.2, 0).unwrap();
        let after = next_token_loss(&trained, &config, &data[0]).unwrap();
        assert!(after < before, "loss did not decrease: {before} -> {after}");
        // base untouched
        assert_eq!(base, init_model(&config, 2).unwrap());
    }
}
