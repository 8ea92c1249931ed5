//! Built-in numerical checks run by `hoattn selftest`.

use rand::Rng;

use crate::decision::FusionMode;
use crate::error::Result;
use crate::graph::{grad_check, Graph};
use crate::model::{Model, ModelConfig, ModelInput};
use crate::rng::stream;
use crate::sketch::{brute_force_sketch_outer, count_sketch, tensor_sketch_with, CountSketchParams, SketchStack};
use crate::tensor::{softmax_1d, Tensor};

pub type SketchKernel = fn(&[f64], &CountSketchParams) -> Vec<f64>;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    /// Largest observed error.
    pub error: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.error < self.tolerance
    }

    pub fn report_line(&self) -> String {
        format!(
            "{} {}: max error {:.3e} (tolerance {:.0e})",
            if self.passed() { "PASS" } else { "FAIL" },
            self.name,
            self.error,
            self.tolerance
        )
    }
}

pub fn reference_kernel(a: &[f64], p: &CountSketchParams) -> Vec<f64> {
    count_sketch(a, p).expect("input length matches sketch")
}

/// Reference kernel with the sign of the first input coordinate flipped.
pub fn sign_flipped_kernel(a: &[f64], p: &CountSketchParams) -> Vec<f64> {
    let mut out = reference_kernel(a, p);
    out[p.hashes()[0] as usize] -= 2.0 * f64::from(p.signs()[0]) * a[0];
    out
}

/// Tensor sketch through `kernel` against the materialised outer product,
/// for 2 and 3 factors, `d_in ≤ 8`, `d_out ∈ {8, 16}` and 50 seeds each.
pub fn sketch_identity(kernel: SketchKernel) -> Result<CheckResult> {
    let mut worst = 0.0f64;
    for k in [2usize, 3] {
        for d_out in [8usize, 16] {
            for seed in 0..50u64 {
                let mut rng = stream(&[0x5e1f, k as u64, d_out as u64, seed]);
                let d_ins: Vec<usize> = (0..k).map(|_| rng.random_range(1..=8)).collect();
                let stack = SketchStack::generate(&d_ins, d_out, seed);
                let vs: Vec<Vec<f64>> = d_ins
                    .iter()
                    .map(|&n| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
                    .collect();
                let refs: Vec<&[f64]> = vs.iter().map(Vec::as_slice).collect();
                let fast = tensor_sketch_with(&refs, &stack, kernel)?;
                let slow = brute_force_sketch_outer(&refs, &stack)?;
                for (a, b) in fast.iter().zip(&slow) {
                    worst = worst.max((a - b).abs());
                }
            }
        }
    }
    Ok(CheckResult {
        name: "tensor-sketch identity",
        error: worst,
        tolerance: 1e-9,
    })
}

pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        modalities: 3,
        order: 3,
        fusion: FusionMode::Mcb2,
        d: 8,
        d_feat: 5,
        n_v: 4,
        n_q: 3,
        n_a: 3,
        vocab_size: 7,
        num_classes: 5,
        sketch_dim: 16,
        hidden: 8,
        mean_field_iters: 1,
        signed_sqrt: false,
        seed: 42,
    }
}

/// Largest relative error between backpropagated and central-difference
/// gradients over every parameter of a tiny three-modality model.
pub fn model_grad_check(config: ModelConfig) -> Result<CheckResult> {
    let model = Model::new(config.clone())?;
    let mut rng = stream(&[0x9c, config.seed]);
    let feats = Tensor::new(
        vec![config.n_v, config.d_feat],
        (0..config.n_v * config.d_feat).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )?;
    let question: Vec<usize> = (0..config.n_q).map(|_| rng.random_range(0..config.vocab_size)).collect();
    let candidates: Vec<usize> = (0..config.n_a).map(|i| i % config.num_classes).collect();
    let x = ModelInput {
        features: &feats,
        question: &question,
        candidates: &candidates,
    };
    let mut g = Graph::new();
    let b = model.store.bind(&mut g);
    let f = model.forward_graph(&mut g, &b, &x, None)?;
    let loss = g.cross_entropy(f.logits, candidates[1])?;
    Ok(CheckResult {
        name: "model gradient check",
        error: grad_check(&mut g, loss, 1e-5)?,
        tolerance: 1e-4,
    })
}

/// Softmax sums to one and ignores a constant shift.
pub fn softmax_invariants() -> Result<CheckResult> {
    let mut worst = 0.0f64;
    let mut rng = stream(&[0x50f7]);
    for _ in 0..200 {
        let n = rng.random_range(1..20);
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-30.0..30.0)).collect();
        let c = rng.random_range(-100.0..100.0);
        let p = softmax_1d(&Tensor::vector(x.clone())?)?;
        let q = softmax_1d(&Tensor::vector(x.iter().map(|v| v + c).collect())?)?;
        worst = worst.max((p.sum() - 1.0).abs()).max(p.max_abs_diff(&q));
    }
    Ok(CheckResult {
        name: "softmax normalisation and shift invariance",
        error: worst,
        tolerance: 1e-12,
    })
}

/// Every check, with the tensor sketch built on `kernel`.
pub fn run_all(kernel: SketchKernel) -> Result<Vec<CheckResult>> {
    Ok(vec![
        sketch_identity(kernel)?,
        model_grad_check(tiny_model_config())?,
        softmax_invariants()?,
    ])
}
