//! Gradient checking: central finite differences, a blended error metric, and
//! a catalog of per-primitive check cases covering every differentiable op.
//! Unit tests run the catalog at tight tolerance; the acceptance suite reruns
//! it across many seeds.
//!
//! Cases for ops with kinks (abs, relu, clamp, min/max, row max) carry a
//! validity predicate that rejects samples near the kink, where finite
//! differences are meaningless; sampling retries with a shifted seed.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor};
use crate::error::Result;

/// Central finite-difference gradient of `f` at `x` with step `h`.
pub fn finite_diff<F>(f: F, x: &[f64], h: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    let mut grad = Vec::with_capacity(x.len());
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let hi = f(&probe);
        probe[i] = orig - h;
        let lo = f(&probe);
        probe[i] = orig;
        grad.push((hi - lo) / (2.0 * h));
    }
    grad
}

/// Worst-case |a - n| / max(1, |a|, |n|) over both gradients: absolute near
/// zero, relative for large entries.
pub fn max_grad_discrepancy(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1.0))
        .fold(0.0, f64::max)
}

/// Sampling spec for one input tensor of a check case.
pub struct InputSpec {
    pub shape: Vec<usize>,
    pub lo: f64,
    pub hi: f64,
}

/// One differentiable-primitive check case.
pub struct OpCheck {
    pub name: &'static str,
    pub inputs: Vec<InputSpec>,
    pub build: fn(&[Tensor]) -> Result<Tensor>,
    /// Rejects sampled inputs too close to a kink for finite differences.
    pub valid: fn(&[Vec<f64>]) -> bool,
}

fn spec(shape: &[usize], lo: f64, hi: f64) -> InputSpec {
    InputSpec { shape: shape.to_vec(), lo, hi }
}

fn always_valid(_: &[Vec<f64>]) -> bool {
    true
}

fn away_from_zero(xs: &[Vec<f64>]) -> bool {
    xs[0].iter().all(|v| v.abs() > 0.02)
}

fn operands_separated(xs: &[Vec<f64>]) -> bool {
    let b = &xs[1];
    xs[0].iter().enumerate().all(|(i, a)| (a - b[i % b.len()]).abs() > 0.02)
}

fn away_from_clamp_edges(xs: &[Vec<f64>]) -> bool {
    xs[0].iter().all(|v| (v - CLAMP_LO).abs() > 0.02 && (v - CLAMP_HI).abs() > 0.02)
}

fn row_max_separated(xs: &[Vec<f64>]) -> bool {
    xs[0].chunks(4).all(|row| {
        let mut sorted = row.to_vec();
        sorted.sort_by(|a, b| b.partial_cmp(a).expect("finite samples"));
        sorted[0] - sorted[1] > 0.02
    })
}

const CLAMP_LO: f64 = -0.5;
const CLAMP_HI: f64 = 0.5;

/// Every differentiable primitive, including broadcast and self-operand
/// variants whose backward paths differ from the plain case.
pub fn op_catalog() -> Vec<OpCheck> {
    vec![
        OpCheck {
            name: "add",
            inputs: vec![spec(&[3, 4], -2.0, 2.0), spec(&[3, 4], -2.0, 2.0)],
            build: |t| t[0].add(&t[1]),
            valid: always_valid,
        },
        OpCheck {
            name: "add_broadcast",
            inputs: vec![spec(&[3, 4], -2.0, 2.0), spec(&[4], -2.0, 2.0)],
            build: |t| t[0].add(&t[1]),
            valid: always_valid,
        },
        OpCheck {
            name: "sub",
            inputs: vec![spec(&[3, 4], -2.0, 2.0), spec(&[3, 4], -2.0, 2.0)],
            build: |t| t[0].sub(&t[1]),
            valid: always_valid,
        },
        OpCheck {
            name: "sub_broadcast",
            inputs: vec![spec(&[3, 4], -2.0, 2.0), spec(&[4], -2.0, 2.0)],
            build: |t| t[0].sub(&t[1]),
            valid: always_valid,
        },
        OpCheck {
            name: "mul",
            inputs: vec![spec(&[3, 4], -2.0, 2.0), spec(&[3, 4], -2.0, 2.0)],
            build: |t| t[0].mul(&t[1]),
            valid: always_valid,
        },
        OpCheck {
            name: "mul_broadcast",
            inputs: vec![spec(&[3, 4], -2.0, 2.0), spec(&[4], -2.0, 2.0)],
            build: |t| t[0].mul(&t[1]),
            valid: always_valid,
        },
        OpCheck {
            name: "mul_self",
            inputs: vec![spec(&[3, 4], -2.0, 2.0)],
            build: |t| t[0].mul(&t[0]),
            valid: always_valid,
        },
        OpCheck {
            name: "div",
            inputs: vec![spec(&[3, 4], -2.0, 2.0), spec(&[3, 4], 0.5, 2.0)],
            build: |t| t[0].div(&t[1]),
            valid: always_valid,
        },
        OpCheck {
            name: "div_broadcast",
            inputs: vec![spec(&[3, 4], -2.0, 2.0), spec(&[4], 0.5, 2.0)],
            build: |t| t[0].div(&t[1]),
            valid: always_valid,
        },
        OpCheck {
            name: "min_elem",
            inputs: vec![spec(&[3, 4], -2.0, 2.0), spec(&[3, 4], -2.0, 2.0)],
            build: |t| t[0].min_elem(&t[1]),
            valid: operands_separated,
        },
        OpCheck {
            name: "max_elem",
            inputs: vec![spec(&[3, 4], -2.0, 2.0), spec(&[3, 4], -2.0, 2.0)],
            build: |t| t[0].max_elem(&t[1]),
            valid: operands_separated,
        },
        OpCheck {
            name: "add_scalar",
            inputs: vec![spec(&[3, 4], -2.0, 2.0)],
            build: |t| Ok(t[0].add_scalar(0.7)),
            valid: always_valid,
        },
        OpCheck {
            name: "mul_scalar",
            inputs: vec![spec(&[3, 4], -2.0, 2.0)],
            build: |t| Ok(t[0].mul_scalar(-1.3)),
            valid: always_valid,
        },
        OpCheck {
            name: "neg",
            inputs: vec![spec(&[3, 4], -2.0, 2.0)],
            build: |t| Ok(t[0].neg()),
            valid: always_valid,
        },
        OpCheck {
            name: "abs",
            inputs: vec![spec(&[3, 4], -2.0, 2.0)],
            build: |t| Ok(t[0].abs()),
            valid: away_from_zero,
        },
        OpCheck {
            name: "ln",
            inputs: vec![spec(&[3, 4], 0.1, 3.0)],
            build: |t| Ok(t[0].ln()),
            valid: always_valid,
        },
        OpCheck {
            name: "powf",
            inputs: vec![spec(&[3, 4], 0.2, 2.0)],
            build: |t| Ok(t[0].powf(2.3)),
            valid: always_valid,
        },
        OpCheck {
            name: "sigmoid",
            inputs: vec![spec(&[3, 4], -3.0, 3.0)],
            build: |t| Ok(t[0].sigmoid()),
            valid: always_valid,
        },
        OpCheck {
            name: "relu",
            inputs: vec![spec(&[3, 4], -2.0, 2.0)],
            build: |t| Ok(t[0].relu()),
            valid: away_from_zero,
        },
        OpCheck {
            name: "clamp",
            inputs: vec![spec(&[3, 4], -1.0, 1.0)],
            build: |t| Ok(t[0].clamp(CLAMP_LO, CLAMP_HI)),
            valid: away_from_clamp_edges,
        },
        OpCheck {
            name: "matmul",
            inputs: vec![spec(&[3, 4], -2.0, 2.0), spec(&[4, 2], -2.0, 2.0)],
            build: |t| t[0].matmul(&t[1]),
            valid: always_valid,
        },
        OpCheck {
            name: "matmul_nt",
            inputs: vec![spec(&[3, 4], -2.0, 2.0), spec(&[2, 4], -2.0, 2.0)],
            build: |t| t[0].matmul_nt(&t[1]),
            valid: always_valid,
        },
        OpCheck {
            name: "matmul_nt_self",
            inputs: vec![spec(&[3, 4], -2.0, 2.0)],
            build: |t| t[0].matmul_nt(&t[0]),
            valid: always_valid,
        },
        OpCheck {
            name: "concat_cols",
            inputs: vec![spec(&[3, 2], -2.0, 2.0), spec(&[3, 3], -2.0, 2.0)],
            build: |t| t[0].concat_cols(&t[1]),
            valid: always_valid,
        },
        OpCheck {
            name: "slice_cols",
            inputs: vec![spec(&[3, 5], -2.0, 2.0)],
            build: |t| t[0].slice_cols(1, 4),
            valid: always_valid,
        },
        OpCheck {
            name: "gather_rows",
            inputs: vec![spec(&[4, 3], -2.0, 2.0)],
            build: |t| t[0].gather_rows(&[2, 0, 2, 3, 1]),
            valid: always_valid,
        },
        OpCheck {
            name: "repeat_interleave_rows",
            inputs: vec![spec(&[3, 2], -2.0, 2.0)],
            build: |t| t[0].repeat_interleave_rows(3),
            valid: always_valid,
        },
        OpCheck {
            name: "tile_rows",
            inputs: vec![spec(&[3, 2], -2.0, 2.0)],
            build: |t| t[0].tile_rows(3),
            valid: always_valid,
        },
        OpCheck {
            name: "scale_rows",
            inputs: vec![spec(&[3, 4], -2.0, 2.0), spec(&[3], -2.0, 2.0)],
            build: |t| t[0].scale_rows(&t[1]),
            valid: always_valid,
        },
        OpCheck {
            name: "reshape",
            inputs: vec![spec(&[3, 4], -2.0, 2.0)],
            build: |t| t[0].reshape(&[2, 6]),
            valid: always_valid,
        },
        OpCheck {
            name: "sum",
            inputs: vec![spec(&[3, 4], -2.0, 2.0)],
            build: |t| Ok(t[0].sum()),
            valid: always_valid,
        },
        OpCheck {
            name: "mean",
            inputs: vec![spec(&[3, 4], -2.0, 2.0)],
            build: |t| Ok(t[0].mean()),
            valid: always_valid,
        },
        OpCheck {
            name: "max_last_dim",
            inputs: vec![spec(&[3, 4], -2.0, 2.0)],
            build: |t| t[0].max_last_dim(),
            valid: row_max_separated,
        },
        OpCheck {
            name: "softmax_last",
            inputs: vec![spec(&[3, 4], -3.0, 3.0)],
            build: |t| t[0].softmax_last(),
            valid: always_valid,
        },
        OpCheck {
            name: "layernorm_last",
            inputs: vec![spec(&[3, 4], -2.0, 2.0)],
            build: |t| t[0].layernorm_last(),
            valid: always_valid,
        },
    ]
}

/// Run one catalog case at one seed: analytic gradients via the tape, numeric
/// via central differences on a weighted-sum readout, returning the worst
/// discrepancy across all inputs. `h` is the finite-difference step.
pub fn run_op_check(op: &OpCheck, seed: u64, h: f64) -> f64 {
    let mut xs = sample_inputs(op, seed);
    let mut bump = 0;
    while !(op.valid)(&xs) {
        bump += 1;
        assert!(bump < 100, "could not sample kink-free inputs for {}", op.name);
        xs = sample_inputs(op, seed.wrapping_add(bump * 0x9e37_79b9));
    }

    let out_len = eval_output_len(op, &xs);
    let mut wrng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let weights: Vec<f64> = (0..out_len).map(|_| wrng.gen_range(-1.0..1.0)).collect();

    let analytic = eval_with_grads(op, &xs, &weights);
    let mut worst = 0.0_f64;
    for i in 0..xs.len() {
        let numeric = finite_diff(
            |xi: &[f64]| {
                let mut probe: Vec<Vec<f64>> = xs.clone();
                probe[i] = xi.to_vec();
                eval_loss(op, &probe, &weights)
            },
            &xs[i],
            h,
        );
        worst = worst.max(max_grad_discrepancy(&analytic[i], &numeric));
    }
    worst
}

fn sample_inputs(op: &OpCheck, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    op.inputs
        .iter()
        .map(|s| {
            let n: usize = s.shape.iter().product();
            (0..n).map(|_| rng.gen_range(s.lo..s.hi)).collect()
        })
        .collect()
}

fn build_leaves(op: &OpCheck, xs: &[Vec<f64>], tape: &Tape) -> Vec<Tensor> {
    op.inputs
        .iter()
        .zip(xs)
        .map(|(s, x)| tape.leaf(&s.shape, x.clone()).expect("catalog shapes are consistent"))
        .collect()
}

fn eval_output_len(op: &OpCheck, xs: &[Vec<f64>]) -> usize {
    let tape = Tape::new();
    let leaves = build_leaves(op, xs, &tape);
    (op.build)(&leaves).expect("catalog build must succeed").numel()
}

fn weighted_loss(op: &OpCheck, leaves: &[Tensor], weights: &[f64], tape: &Tape) -> Tensor {
    let out = (op.build)(leaves).expect("catalog build must succeed");
    let w = tape.leaf(&out.shape(), weights.to_vec()).expect("weights match output shape");
    out.mul(&w).expect("same-shape mul").sum()
}

fn eval_loss(op: &OpCheck, xs: &[Vec<f64>], weights: &[f64]) -> f64 {
    let tape = Tape::new();
    let leaves = build_leaves(op, xs, &tape);
    weighted_loss(op, &leaves, weights, &tape).item()
}

fn eval_with_grads(op: &OpCheck, xs: &[Vec<f64>], weights: &[f64]) -> Vec<Vec<f64>> {
    let tape = Tape::new();
    let leaves = build_leaves(op, xs, &tape);
    let loss = weighted_loss(op, &leaves, weights, &tape);
    loss.backward().expect("loss is scalar");
    leaves.iter().map(Tensor::grad).collect()
}
