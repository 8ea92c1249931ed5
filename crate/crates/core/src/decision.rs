//! Fusion of the attended vectors by tensor sketching, and the classifier on
//! top of it.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::dropout::{DropoutPlan, Site};
use crate::embed::apply_dropout;
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::params::{Bound, Init, ParamId, ParamStore};
use crate::sketch::{mcb, mcb_two_layer, mct, CountSketchParams, SketchStack};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    /// Bilinear pooling of image and question (two-modality mode).
    Mcb,
    /// Trilinear pooling of all three modalities in one sketch.
    Mct,
    /// Two cascaded bilinear units: `(V, Q)`, then the result with `A`.
    Mcb2,
}

impl FusionMode {
    pub fn arity(self) -> usize {
        match self {
            FusionMode::Mcb => 2,
            FusionMode::Mct | FusionMode::Mcb2 => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            FusionMode::Mcb => "mcb",
            FusionMode::Mct => "mct",
            FusionMode::Mcb2 => "mcb2",
        }
    }
}

/// The count sketches used by one fusion mode.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FusionSketches {
    pub mode: FusionMode,
    pub inner: SketchStack,
    /// Second unit of [`FusionMode::Mcb2`].
    pub outer: Option<SketchStack>,
}

impl FusionSketches {
    /// Draws every hash and sign map for attended vectors of width `d`.
    pub fn generate(mode: FusionMode, d: usize, sketch_dim: usize, seed: u64) -> Self {
        match mode {
            FusionMode::Mcb => Self {
                mode,
                inner: SketchStack::generate(&[d, d], sketch_dim, seed),
                outer: None,
            },
            FusionMode::Mct => Self {
                mode,
                inner: SketchStack::generate(&[d, d, d], sketch_dim, seed),
                outer: None,
            },
            FusionMode::Mcb2 => Self {
                mode,
                inner: SketchStack::generate(&[d, d], sketch_dim, seed),
                outer: Some(SketchStack::generate(
                    &[sketch_dim, d],
                    sketch_dim,
                    seed.wrapping_add(2),
                )),
            },
        }
    }

    pub fn new(mode: FusionMode, inner: SketchStack, outer: Option<SketchStack>) -> Result<Self> {
        let ok = match mode {
            FusionMode::Mcb => inner.arity() == 2 && outer.is_none(),
            FusionMode::Mct => inner.arity() == 3 && outer.is_none(),
            FusionMode::Mcb2 => match &outer {
                Some(o) => {
                    inner.arity() == 2
                        && o.arity() == 2
                        && o.get(0).d_in() == inner.d_out()
                        && o.d_out() == inner.d_out()
                }
                None => false,
            },
        };
        if !ok {
            return Err(Error::Config(vec![format!(
                "sketch stacks do not fit fusion mode {}",
                mode.name()
            )]));
        }
        Ok(Self { mode, inner, outer })
    }

    pub fn sketch_dim(&self) -> usize {
        self.inner.d_out()
    }

    /// Width of `[Ψ(a_V); Ψ(a_Q); (Ψ(a_A);) fused]`.
    pub fn classifier_input_dim(&self) -> usize {
        (self.mode.arity() + 1) * self.sketch_dim()
    }

    /// The count sketch applied to modality `m`'s attended vector.
    pub fn modality_sketch(&self, m: usize) -> &Arc<CountSketchParams> {
        match (self.mode, m) {
            (FusionMode::Mcb2, 2) => self.outer.as_ref().expect("mcb2 has an outer stack").get(1),
            _ => self.inner.get(m),
        }
    }

    fn check_arity(&self, n: usize) -> Result<()> {
        if n != self.mode.arity() {
            return Err(Error::Config(vec![format!(
                "fusion mode {} takes {} attended vectors, got {n}",
                self.mode.name(),
                self.mode.arity()
            )]));
        }
        Ok(())
    }
}

/// Fused correlation vector of the attended vectors (`[a_V, a_Q]` or
/// `[a_V, a_Q, a_A]`).
pub fn fuse(attended: &[&[f64]], sk: &FusionSketches) -> Result<Vec<f64>> {
    sk.check_arity(attended.len())?;
    match sk.mode {
        FusionMode::Mcb => mcb(attended[0], attended[1], &sk.inner),
        FusionMode::Mct => mct(attended[0], attended[1], attended[2], &sk.inner),
        FusionMode::Mcb2 => mcb_two_layer(
            attended[0],
            attended[1],
            attended[2],
            &sk.inner,
            sk.outer.as_ref().expect("mcb2 has an outer stack"),
        ),
    }
}

fn sketch_product(g: &mut Graph, xs: &[NodeId], stack: &SketchStack) -> Result<NodeId> {
    let mut acc = g.count_sketch(xs[0], stack.get(0).clone())?;
    for (j, &x) in xs.iter().enumerate().skip(1) {
        let s = g.count_sketch(x, stack.get(j).clone())?;
        acc = g.circ_conv(acc, s)?;
    }
    Ok(acc)
}

/// Graph form of [`fuse`].
pub fn fuse_graph(g: &mut Graph, attended: &[NodeId], sk: &FusionSketches) -> Result<NodeId> {
    sk.check_arity(attended.len())?;
    match sk.mode {
        FusionMode::Mcb | FusionMode::Mct => sketch_product(g, attended, &sk.inner),
        FusionMode::Mcb2 => {
            let mid = sketch_product(g, &attended[..2], &sk.inner)?;
            let outer = sk.outer.as_ref().expect("mcb2 has an outer stack");
            sketch_product(g, &[mid, attended[2]], outer)
        }
    }
}

/// Classifier input `[Ψ(a_V); Ψ(a_Q); (Ψ(a_A);) fused]`. With `normalize`,
/// the fused part goes through signed square root and ℓ2 normalisation.
pub fn classifier_input_graph(
    g: &mut Graph,
    attended: &[NodeId],
    sk: &FusionSketches,
    normalize: bool,
) -> Result<NodeId> {
    let mut fused = fuse_graph(g, attended, sk)?;
    if normalize {
        fused = g.signed_sqrt(fused)?;
        fused = g.l2_normalize(fused)?;
    }
    let mut parts = Vec::with_capacity(attended.len() + 1);
    for (m, &a) in attended.iter().enumerate() {
        parts.push(g.count_sketch(a, sk.modality_sketch(m).clone())?);
    }
    parts.push(fused);
    g.concat(&parts)
}

#[derive(Clone, Copy, Debug)]
pub struct ClassifierParams {
    /// `[input × hidden]`
    pub w_h: ParamId,
    pub b_h: ParamId,
    /// `[hidden × K]`
    pub w_out: ParamId,
    pub b_out: ParamId,
}

impl ClassifierParams {
    pub(crate) fn create(
        store: &mut ParamStore,
        init: &mut Init,
        input: usize,
        hidden: usize,
        classes: usize,
    ) -> Result<Self> {
        if classes < 2 {
            return Err(Error::Config(vec![format!(
                "classifier needs at least 2 classes, got {classes}"
            )]));
        }
        Ok(Self {
            w_h: store.add("classifier.hidden.w", init.xavier(input, hidden)),
            b_h: store.add("classifier.hidden.b", Tensor::zeros(&[1, hidden])),
            w_out: store.add("classifier.out.w", init.xavier(hidden, classes)),
            b_out: store.add("classifier.out.b", Tensor::zeros(&[1, classes])),
        })
    }
}

/// `logits = relu(x·W_h + b_h)·W_out + b_out`, with last-layer dropout on the
/// hidden activations when `plan` is given.
pub fn classify_graph(
    g: &mut Graph,
    b: &Bound,
    p: &ClassifierParams,
    x: NodeId,
    plan: Option<&DropoutPlan>,
) -> Result<NodeId> {
    let n = g.value(x).len();
    let row = g.reshape(x, vec![1, n])?;
    let h = g.matmul(row, b.node(p.w_h))?;
    let h = g.add(h, b.node(p.b_h))?;
    let h = g.relu(h)?;
    let h = apply_dropout(g, h, plan, Site::LastLayer)?;
    let o = g.matmul(h, b.node(p.w_out))?;
    let o = g.add(o, b.node(p.b_out))?;
    let k = g.value(o).len();
    g.reshape(o, vec![k])
}

/// Evaluation-mode logits for a classifier input vector.
pub fn classify(x: &Tensor, store: &ParamStore, p: &ClassifierParams) -> Result<Tensor> {
    let mut g = Graph::new();
    let b = store.bind(&mut g);
    let x = g.constant(x.clone());
    let out = classify_graph(&mut g, &b, p, x, None)?;
    Ok(g.value(out).clone())
}

/// Highest-scoring class among `candidates`; ties go to the earliest
/// candidate in the list.
pub fn predict_mc(logits: &[f64], candidates: &[usize]) -> Result<usize> {
    let Some(&first) = candidates.first() else {
        return Err(Error::Contract("no answer candidates".into()));
    };
    let mut best = first;
    for &c in candidates {
        if c >= logits.len() {
            return Err(Error::Contract(format!(
                "candidate {c} out of range for {} classes",
                logits.len()
            )));
        }
        if logits[c] > logits[best] {
            best = c;
        }
    }
    Ok(best)
}
