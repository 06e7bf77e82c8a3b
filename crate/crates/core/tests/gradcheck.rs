//! Finite-difference validation of every differentiable tape operation.
//!
//! The numeric oracle below re-evaluates the forward pass at perturbed
//! inputs; it never touches the backward sweep it certifies. Agreement is
//! required within relative error 1e-4 at step 1e-3, with the usual
//! gradcheck normalization |a−n| / max(|a|, |n|, 1) to keep near-zero
//! components meaningful, over 100 seeded trials per operation on tensors
//! of at most 64 elements.

use mergeforge_core::model::{
    next_token_loss_on_tape, ModelNodes, TokenBatch, TransformerConfig,
};
use mergeforge_core::rng::Rng;
use mergeforge_core::tape::{NodeId, ReduceAxis, Tape};
use mergeforge_core::tensor::Tensor;
use mergeforge_core::Result;

const FD_STEP: f64 = 1e-3;
const TOLERANCE: f64 = 1e-4;
const TRIALS: usize = 100;

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0)
}

/// Scalar readout: sum(w ⊙ y) with fixed random weights, so upstream
/// gradients are non-trivial for every op (a bare sum would hide softmax
/// and norm errors behind their row constraints).
fn readout(tape: &mut Tape, y: NodeId, weights: &Tensor) -> NodeId {
    let w = tape.constant(weights.clone());
    let weighted = tape.mul(y, w).unwrap();
    tape.reduce_sum(weighted, ReduceAxis::All).unwrap()
}

/// Check one op: `build` maps input leaves to the op output. Inputs are
/// sampled per trial by `sample` (giving each input control over its range).
fn gradcheck<F, S>(name: &str, shapes: &[&[usize]], sample: S, build: F)
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
    S: Fn(&mut Rng, usize) -> f64,
{
    for trial in 0..TRIALS {
        let mut rng = Rng::new(0x5EED + trial as u64);
        let inputs: Vec<Tensor> = shapes
            .iter()
            .enumerate()
            .map(|(i, shape)| {
                let data = (0..shape.iter().product::<usize>())
                    .map(|_| sample(&mut rng, i))
                    .collect();
                Tensor::new(shape.to_vec(), data).unwrap()
            })
            .collect();

        // Forward once to learn the output shape, then fix the readout.
        let out_shape = {
            let mut tape = Tape::new();
            let ids: Vec<NodeId> = inputs.iter().map(|t| tape.leaf(t.clone(), false)).collect();
            let y = build(&mut tape, &ids).unwrap();
            tape.value(y).shape().to_vec()
        };
        let w_data: Vec<f64> = (0..out_shape.iter().product::<usize>())
            .map(|_| rng.next_normal())
            .collect();
        let weights = Tensor::new(out_shape, w_data).unwrap();

        let eval = |perturbed: &[Tensor]| -> f64 {
            let mut tape = Tape::new();
            let ids: Vec<NodeId> = perturbed.iter().map(|t| tape.leaf(t.clone(), false)).collect();
            let y = build(&mut tape, &ids).unwrap();
            let loss = readout(&mut tape, y, &weights);
            tape.value(loss).scalar_value()
        };

        // Analytic gradients.
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let y = build(&mut tape, &ids).unwrap();
        let loss = readout(&mut tape, y, &weights);
        tape.backward(loss).unwrap();

        for (i, &id) in ids.iter().enumerate() {
            let zero;
            let grad = match tape.grad(id) {
                Some(g) => g.data(),
                None => {
                    zero = vec![0.0; inputs[i].numel()];
                    &zero
                }
            };
            for j in 0..inputs[i].numel() {
                let mut plus = inputs.to_vec();
                plus[i].data_at_mut(j, FD_STEP);
                let mut minus = inputs.to_vec();
                minus[i].data_at_mut(j, -FD_STEP);
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
                let err = rel_err(grad[j], numeric);
                assert!(
                    err <= TOLERANCE,
                    "{name} trial {trial}: input {i} element {j}: analytic {} vs numeric {numeric} (rel err {err:.3e})",
                    grad[j]
                );
            }
        }
    }
}

/// Test-side perturbation helper so the oracle owns its own arithmetic.
trait Perturb {
    fn data_at_mut(&mut self, index: usize, delta: f64);
}

impl Perturb for Tensor {
    fn data_at_mut(&mut self, index: usize, delta: f64) {
        let mut data = self.data().to_vec();
        data[index] += delta;
        *self = Tensor::new(self.shape().to_vec(), data).unwrap();
    }
}

fn normal(rng: &mut Rng, _input: usize) -> f64 {
    rng.next_normal()
}

#[test]
fn matmul_gradients() {
    gradcheck("matmul", &[&[3, 4], &[4, 2]], normal, |tape, ids| {
        tape.matmul(ids[0], ids[1])
    });
}

#[test]
fn elementwise_gradients() {
    gradcheck("add", &[&[3, 4], &[3, 4]], normal, |tape, ids| tape.add(ids[0], ids[1]));
    gradcheck("sub", &[&[3, 4], &[3, 4]], normal, |tape, ids| tape.sub(ids[0], ids[1]));
    gradcheck("mul", &[&[3, 4], &[3, 4]], normal, |tape, ids| tape.mul(ids[0], ids[1]));
    // divisor bounded away from zero
    let div_sample = |rng: &mut Rng, input: usize| {
        if input == 1 {
            let sign = if rng.next_f64() < 0.5 { -1.0 } else { 1.0 };
            sign * (0.5 + rng.next_f64())
        } else {
            rng.next_normal()
        }
    };
    gradcheck("div", &[&[3, 4], &[3, 4]], div_sample, |tape, ids| tape.div(ids[0], ids[1]));
}

#[test]
fn broadcast_gradients() {
    gradcheck("add_broadcast", &[&[5, 4], &[4]], normal, |tape, ids| tape.add(ids[0], ids[1]));
    gradcheck("sub_broadcast", &[&[5, 4], &[4]], normal, |tape, ids| tape.sub(ids[0], ids[1]));
    gradcheck("mul_broadcast", &[&[5, 4], &[4]], normal, |tape, ids| tape.mul(ids[0], ids[1]));
}

#[test]
fn softmax_gradients() {
    gradcheck("row_softmax", &[&[3, 5]], normal, |tape, ids| tape.row_softmax(ids[0]));
    gradcheck("row_log_softmax", &[&[3, 5]], normal, |tape, ids| {
        tape.row_log_softmax(ids[0])
    });
}

#[test]
fn rms_norm_gradients() {
    gradcheck("rms_norm", &[&[3, 4], &[4]], normal, |tape, ids| {
        tape.rms_norm(ids[0], ids[1], 1e-5)
    });
}

#[test]
fn unary_gradients() {
    gradcheck("silu", &[&[2, 6]], normal, |tape, ids| tape.silu(ids[0]));
    gradcheck("scale", &[&[2, 6]], normal, |tape, ids| tape.scale(ids[0], -1.7));
    // |x| is kinked at 0: sample away from it
    let away_from_zero = |rng: &mut Rng, _: usize| {
        let sign = if rng.next_f64() < 0.5 { -1.0 } else { 1.0 };
        sign * (0.2 + rng.next_f64())
    };
    gradcheck("abs", &[&[2, 6]], away_from_zero, |tape, ids| tape.abs(ids[0]));
    let positive = |rng: &mut Rng, _: usize| 0.5 + 2.0 * rng.next_f64();
    gradcheck("sqrt", &[&[5]], positive, |tape, ids| tape.sqrt(ids[0]));
}

#[test]
fn gather_and_select_gradients() {
    gradcheck("embedding_gather", &[&[6, 3]], normal, |tape, ids| {
        tape.embedding_gather(ids[0], &[0, 2, 5, 2])
    });
    gradcheck("select_per_row", &[&[4, 5]], normal, |tape, ids| {
        tape.select_per_row(ids[0], &[1, 0, 4, 2])
    });
}

#[test]
fn reduce_gradients() {
    gradcheck("reduce_sum_all", &[&[3, 4]], normal, |tape, ids| {
        tape.reduce_sum(ids[0], ReduceAxis::All)
    });
    gradcheck("reduce_sum_last", &[&[3, 4]], normal, |tape, ids| {
        tape.reduce_sum(ids[0], ReduceAxis::Last)
    });
    gradcheck("reduce_mean_all", &[&[3, 4]], normal, |tape, ids| {
        tape.reduce_mean(ids[0], ReduceAxis::All)
    });
    gradcheck("reduce_mean_last", &[&[3, 4]], normal, |tape, ids| {
        tape.reduce_mean(ids[0], ReduceAxis::Last)
    });
}

#[test]
fn shape_op_gradients() {
    gradcheck("reshape", &[&[2, 6]], normal, |tape, ids| tape.reshape(ids[0], vec![3, 4]));
    gradcheck("transpose", &[&[3, 4]], normal, |tape, ids| tape.transpose(ids[0]));
    gradcheck("slice_rows", &[&[4, 5]], normal, |tape, ids| tape.slice_rows(ids[0], 1, 3));
    gradcheck("slice_cols", &[&[4, 5]], normal, |tape, ids| tape.slice_cols(ids[0], 2, 5));
    gradcheck("concat_rows", &[&[2, 3], &[3, 3]], normal, |tape, ids| {
        tape.concat_rows(ids)
    });
    gradcheck("concat_cols", &[&[3, 2], &[3, 4]], normal, |tape, ids| {
        tape.concat_cols(ids)
    });
}

/// The full composite: next-token cross-entropy of the tiny transformer,
/// differentiated through every weight tensor at once and spot-checked
/// against finite differences element by element.
#[test]
fn full_transformer_objective_matches_finite_differences() {
    let config = TransformerConfig {
        vocab_size: 10,
        model_dim: 8,
        layers: 2,
        heads: 2,
        mlp_dim: 12,
        max_seq_len: 8,
        rmsnorm_eps: 1e-5,
    };
    let weights = mergeforge_core::model::init_model(&config, 42).unwrap();
    let batch = TokenBatch { sequences: vec![vec![1, 4, 2, 7, 3, 1]], affinity: 0 };

    let eval = |w: &mergeforge_core::checkpoint::WeightMap| -> f64 {
        let mut tape = Tape::new();
        let nodes = ModelNodes::insert(&mut tape, w, false);
        let loss = next_token_loss_on_tape(&mut tape, &nodes, &config, &batch).unwrap();
        tape.value(loss).scalar_value()
    };

    let mut tape = Tape::new();
    let nodes = ModelNodes::insert(&mut tape, &weights, true);
    let loss = next_token_loss_on_tape(&mut tape, &nodes, &config, &batch).unwrap();
    tape.backward(loss).unwrap();

    let mut worst: f64 = 0.0;
    for (name, _) in config.schema() {
        let node = nodes.node(&name).unwrap();
        let grad = tape.grad(node).expect("all weights are trainable").clone();
        let tensor = weights.get(&name).unwrap().clone();
        // Spot-check a deterministic spread of elements per tensor.
        let n = tensor.numel();
        let picks: Vec<usize> = [0, n / 3, n / 2, (2 * n) / 3, n - 1]
            .into_iter()
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .collect();
        for j in picks {
            let perturb = |delta: f64| {
                let mut data = tensor.data().to_vec();
                data[j] += delta;
                let mut w = weights.clone();
                w.insert(&name, Tensor::new(tensor.shape().to_vec(), data).unwrap());
                eval(&w)
            };
            let numeric = (perturb(FD_STEP) - perturb(-FD_STEP)) / (2.0 * FD_STEP);
            let err = rel_err(grad.data()[j], numeric);
            worst = worst.max(err);
            assert!(
                err <= TOLERANCE,
                "{name}[{j}]: analytic {} vs numeric {numeric} (rel err {err:.3e})",
                grad.data()[j]
            );
        }
    }
    println!("full-transformer gradcheck worst rel err: {worst:.3e}");
}

/// Identical inputs give bit-identical outputs.
#[test]
fn forward_is_bit_deterministic() {
    let config = TransformerConfig::default();
    let weights = mergeforge_core::model::init_model(&config, 9).unwrap();
    let batch = TokenBatch { sequences: vec![vec![3, 1, 4, 1, 5, 9, 2, 6]], affinity: 0 };
    let a = mergeforge_core::model::forward(&weights, &config, &batch).unwrap();
    let b = mergeforge_core::model::forward(&weights, &config, &batch).unwrap();
    assert_eq!(a, b);
}
