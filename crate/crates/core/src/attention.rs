//! Mean-field combination of potentials into attention distributions, and
//! the attended (probability-weighted) modality vectors.

use serde::{Deserialize, Serialize};

use crate::dropout::{DropoutPlan, Site};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::params::{Bound, Init, ParamId, ParamStore};
use crate::potentials::{
    pairwise_correlation_graph, pairwise_marginal_graph, ternary_correlation_graph,
    ternary_marginal_graph, unary_graph, PairwiseParams, TernaryParams, UnaryParams,
};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Image,
    Question,
    Answer,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Image, Modality::Question, Modality::Answer];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Image => "image",
            Modality::Question => "question",
            Modality::Answer => "answer",
        }
    }

    fn dropout_site(self) -> Site {
        match self {
            Modality::Image => Site::UnaryImage,
            Modality::Question => Site::UnaryQuestion,
            Modality::Answer => Site::UnaryAnswer,
        }
    }
}

/// Number of weights per modality in the affine combination (four potential
/// tiers plus a bias).
pub const COMBINATION_ARITY: usize = 5;

/// Initial combination weights: every tier at 1, bias 0.
pub const COMBINATION_INIT: [f64; COMBINATION_ARITY] = [1.0, 1.0, 1.0, 1.0, 0.0];

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionDistribution {
    pub modality: Modality,
    pub p: Vec<f64>,
}

/// Potentials for one modality. `pairwise` follows the combination order:
/// image `(V,Q), (A,V)`; question `(V,Q), (A,Q)`; answer `(A,V), (A,Q)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PotentialSet {
    pub unary: Tensor,
    pub pairwise: [Option<Tensor>; 2],
    pub ternary: Option<Tensor>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionShape {
    pub n_v: usize,
    pub n_q: usize,
    /// `None` in two-modality mode.
    pub n_a: Option<usize>,
    pub d: usize,
    /// 1 = unary, 2 = + pairwise, 3 = + ternary.
    pub order: usize,
}

impl AttentionShape {
    pub fn modalities(&self) -> usize {
        if self.n_a.is_some() {
            3
        } else {
            2
        }
    }

    pub fn len(&self, m: Modality) -> usize {
        match m {
            Modality::Image => self.n_v,
            Modality::Question => self.n_q,
            Modality::Answer => self.n_a.unwrap_or(0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=3).contains(&self.order) {
            return Err(Error::Config(vec![format!(
                "order must be 1, 2 or 3, got {}",
                self.order
            )]));
        }
        if self.order == 3 && self.n_a.is_none() {
            return Err(Error::Config(vec![
                "order 3 needs the answer modality".to_string()
            ]));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub shape: AttentionShape,
    /// Indexed by [`Modality::index`].
    pub unary: Vec<UnaryParams>,
    /// One `[5]` weight vector per modality (α, β, γ).
    pub combination: Vec<ParamId>,
    /// `C₂` oriented `[n_q × n_v]`.
    pub pair_vq: Option<PairwiseParams>,
    /// `[n_a × n_v]`
    pub pair_av: Option<PairwiseParams>,
    /// `[n_a × n_q]`
    pub pair_aq: Option<PairwiseParams>,
    pub ternary: Option<TernaryParams>,
}

impl AttentionParams {
    pub(crate) fn create(
        store: &mut ParamStore,
        init: &mut Init,
        shape: AttentionShape,
    ) -> Result<Self> {
        shape.validate()?;
        let mods = &Modality::ALL[..shape.modalities()];
        let d = shape.d;
        let unary = mods
            .iter()
            .map(|m| UnaryParams::create(store, init, &format!("attention.unary.{}", m.name()), d))
            .collect();
        let combination = mods
            .iter()
            .map(|m| {
                store.add(
                    format!("attention.combination.{}", m.name()),
                    Tensor::vector(COMBINATION_INIT.to_vec()).expect("non-empty"),
                )
            })
            .collect();
        let (mut pair_vq, mut pair_av, mut pair_aq, mut ternary) = (None, None, None, None);
        if shape.order >= 2 {
            pair_vq = Some(PairwiseParams::create(
                store, init, "attention.pair_vq", d, shape.n_q, shape.n_v,
            ));
            if let Some(n_a) = shape.n_a {
                pair_av = Some(PairwiseParams::create(
                    store, init, "attention.pair_av", d, n_a, shape.n_v,
                ));
                pair_aq = Some(PairwiseParams::create(
                    store, init, "attention.pair_aq", d, n_a, shape.n_q,
                ));
            }
        }
        if shape.order == 3 {
            let n_a = shape.n_a.expect("validated");
            ternary = Some(TernaryParams::create(store, init, d, shape.n_q, shape.n_v, n_a));
        }
        Ok(Self {
            shape,
            unary,
            combination,
            pair_vq,
            pair_av,
            pair_aq,
            ternary,
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct PotentialNodes {
    pub unary: NodeId,
    pub pairwise: [Option<NodeId>; 2],
    pub ternary: Option<NodeId>,
}

/// Graph nodes produced by [`attention_graph`], indexed by modality.
#[derive(Clone, Debug)]
pub struct AttentionNodes {
    pub potentials: Vec<PotentialNodes>,
    pub distributions: Vec<NodeId>,
    pub attended: Vec<NodeId>,
}

/// `softmax(w₁θ₁ + w₂θ₂ + w₃θ₃ + w₄θ₄ + w₅)`.
pub fn combine_graph(g: &mut Graph, ps: &PotentialNodes, w: NodeId) -> Result<NodeId> {
    g.weighted_softmax(&[Some(ps.unary), ps.pairwise[0], ps.pairwise[1], ps.ternary], w)
}

/// `Σ_i p[i]·features[i,:]`.
pub fn attend_graph(g: &mut Graph, features: NodeId, p: NodeId) -> Result<NodeId> {
    g.vecmat(p, features)
}

/// `w ⊙ (n·p)`: a marginal weight reweighted by the current belief over the
/// summed axis. Equal to `w` when `p` is uniform.
fn reweight(g: &mut Graph, w: NodeId, p: NodeId) -> Result<NodeId> {
    let n = g.value(p).len() as f64;
    let s = g.scale(p, n)?;
    g.mul(w, s)
}

fn reweight_outer(g: &mut Graph, m: NodeId, p1: NodeId, p2: NodeId) -> Result<NodeId> {
    let (n1, n2) = (g.value(p1).len(), g.value(p2).len());
    let a = g.reshape(p1, vec![n1, 1])?;
    let b = g.reshape(p2, vec![n2, 1])?;
    let outer = g.matmul_nt(a, b)?;
    let outer = g.scale(outer, (n1 * n2) as f64)?;
    g.mul(m, outer)
}

/// Builds potentials, distributions and attended vectors for `inputs`
/// (`[V, Q]` or `[V, Q, A]`, each `[n_m × d]`).
///
/// With `iterations > 1` each further round reweights the pairwise and
/// ternary marginal weights by `n·P` of the axes being summed, using the
/// previous round's distributions.
pub fn attention_graph(
    g: &mut Graph,
    b: &Bound,
    p: &AttentionParams,
    inputs: &[NodeId],
    iterations: usize,
    plan: Option<&DropoutPlan>,
) -> Result<AttentionNodes> {
    let mods = p.shape.modalities();
    if inputs.len() != mods {
        return Err(Error::Contract(format!(
            "attention expects {mods} modality inputs, got {}",
            inputs.len()
        )));
    }
    for (i, &x) in inputs.iter().enumerate() {
        let m = Modality::ALL[i];
        let want = [p.shape.len(m), p.shape.d];
        if g.value(x).shape() != want {
            return Err(Error::Dimension(format!(
                "{} input has shape {:?}, expected {want:?}",
                m.name(),
                g.value(x).shape()
            )));
        }
    }
    let (v, q) = (inputs[0], inputs[1]);
    let a = inputs.get(2).copied();

    let unary: Vec<NodeId> = (0..mods)
        .map(|i| {
            let u = &p.unary[i];
            let site = Modality::ALL[i].dropout_site();
            unary_graph(g, inputs[i], b.node(u.w2), b.node(u.w1), plan, site)
        })
        .collect::<Result<_>>()?;

    let corr = |g: &mut Graph, pp: &Option<PairwiseParams>, first, second| -> Result<Option<NodeId>> {
        match (pp, first) {
            (Some(pp), Some(first)) => Ok(Some(pairwise_correlation_graph(
                g,
                first,
                second,
                b.node(pp.w_first),
                b.node(pp.w_second),
            )?)),
            _ => Ok(None),
        }
    };
    let c_vq = corr(g, &p.pair_vq, Some(q), v)?;
    let c_av = corr(g, &p.pair_av, a, v)?;
    let c_aq = corr(g, &p.pair_aq, a, q)?;
    let c3 = match (&p.ternary, a) {
        (Some(t), Some(a)) => Some(ternary_correlation_graph(
            g,
            q,
            v,
            a,
            b.node(t.w_q),
            b.node(t.w_v),
            b.node(t.w_a),
        )?),
        _ => None,
    };

    let mut dists: Option<Vec<NodeId>> = None;
    let mut potentials = Vec::new();
    for _ in 0..iterations.max(1) {
        // Weights for summing over a modality axis, reweighted by its
        // current distribution after the first round.
        let weight = |g: &mut Graph, w: ParamId, over: Modality| -> Result<NodeId> {
            match &dists {
                None => Ok(b.node(w)),
                Some(d) => reweight(g, b.node(w), d[over.index()]),
            }
        };
        let weight2 = |g: &mut Graph, w: ParamId, o1: Modality, o2: Modality| -> Result<NodeId> {
            match &dists {
                None => Ok(b.node(w)),
                Some(d) => reweight_outer(g, b.node(w), d[o1.index()], d[o2.index()]),
            }
        };
        use Modality::*;
        let pair = |g: &mut Graph,
                        c: Option<NodeId>,
                        pp: &Option<PairwiseParams>,
                        first: Modality,
                        second: Modality|
         -> Result<(Option<NodeId>, Option<NodeId>)> {
            match (c, pp) {
                (Some(c), Some(pp)) => {
                    let w_s = weight(g, pp.over_second, second)?;
                    let for_first = pairwise_marginal_graph(g, c, w_s, 1)?;
                    let w_f = weight(g, pp.over_first, first)?;
                    let for_second = pairwise_marginal_graph(g, c, w_f, 0)?;
                    Ok((Some(for_first), Some(for_second)))
                }
                _ => Ok((None, None)),
            }
        };
        let (vq_q, vq_v) = pair(g, c_vq, &p.pair_vq, Question, Image)?;
        let (av_a, av_v) = pair(g, c_av, &p.pair_av, Answer, Image)?;
        let (aq_a, aq_q) = pair(g, c_aq, &p.pair_aq, Answer, Question)?;
        let mut tern = [None, None, None];
        if let (Some(c3), Some(t)) = (c3, &p.ternary) {
            let m = weight2(g, t.m_for_q, Image, Answer)?;
            tern[Question.index()] = Some(ternary_marginal_graph(g, c3, m, 0)?);
            let m = weight2(g, t.m_for_v, Question, Answer)?;
            tern[Image.index()] = Some(ternary_marginal_graph(g, c3, m, 1)?);
            let m = weight2(g, t.m_for_a, Question, Image)?;
            tern[Answer.index()] = Some(ternary_marginal_graph(g, c3, m, 2)?);
        }
        let pairs = [[vq_v, av_v], [vq_q, aq_q], [av_a, aq_a]];
        potentials = (0..mods)
            .map(|i| PotentialNodes {
                unary: unary[i],
                pairwise: pairs[i],
                ternary: tern[i],
            })
            .collect::<Vec<_>>();
        let next = potentials
            .iter()
            .zip(&p.combination)
            .map(|(ps, &w)| combine_graph(g, ps, b.node(w)))
            .collect::<Result<Vec<_>>>()?;
        dists = Some(next);
    }
    let distributions = dists.expect("at least one iteration");
    let attended = inputs
        .iter()
        .zip(&distributions)
        .map(|(&x, &d)| attend_graph(g, x, d))
        .collect::<Result<_>>()?;
    Ok(AttentionNodes {
        potentials,
        distributions,
        attended,
    })
}

/// Result of an eager [`attention_forward`]; vectors are indexed by modality.
#[derive(Clone, Debug)]
pub struct AttentionOutput {
    pub attended: Vec<Tensor>,
    pub distributions: Vec<AttentionDistribution>,
    pub potentials: Vec<PotentialSet>,
}

pub fn combine_potentials(ps: &PotentialSet, w: &[f64; COMBINATION_ARITY]) -> Result<AttentionDistribution> {
    let mut g = Graph::new();
    let u = g.constant(ps.unary.clone());
    let mut opt = |t: &Option<Tensor>| t.as_ref().map(|t| g.constant(t.clone()));
    let pairwise = [opt(&ps.pairwise[0]), opt(&ps.pairwise[1])];
    let ternary = opt(&ps.ternary);
    let wn = g.constant(Tensor::vector(w.to_vec())?);
    let nodes = PotentialNodes {
        unary: u,
        pairwise,
        ternary,
    };
    let out = combine_graph(&mut g, &nodes, wn)?;
    Ok(AttentionDistribution {
        modality: Modality::Image,
        p: g.value(out).to_vec(),
    })
}

pub fn attend(features: &Tensor, dist: &AttentionDistribution) -> Result<Tensor> {
    let mut g = Graph::new();
    let f = g.constant(features.clone());
    let p = g.constant(Tensor::vector(dist.p.clone())?);
    let out = attend_graph(&mut g, f, p)?;
    Ok(g.value(out).clone())
}

/// Evaluation-mode attention over `[V, Q]` or `[V, Q, A]`.
pub fn attention_forward(
    store: &ParamStore,
    p: &AttentionParams,
    inputs: &[&Tensor],
    iterations: usize,
) -> Result<AttentionOutput> {
    let mut g = Graph::new();
    let b = store.bind(&mut g);
    let xs: Vec<NodeId> = inputs.iter().map(|t| g.constant((*t).clone())).collect();
    let nodes = attention_graph(&mut g, &b, p, &xs, iterations, None)?;
    Ok(read_attention(&g, &nodes))
}

/// Copies the values behind `nodes` out of an evaluated graph.
pub fn read_attention(g: &Graph, nodes: &AttentionNodes) -> AttentionOutput {
    let opt = |n: Option<NodeId>| n.map(|n| g.value(n).clone());
    AttentionOutput {
        attended: nodes.attended.iter().map(|&n| g.value(n).clone()).collect(),
        distributions: nodes
            .distributions
            .iter()
            .enumerate()
            .map(|(i, &n)| AttentionDistribution {
                modality: Modality::ALL[i],
                p: g.value(n).to_vec(),
            })
            .collect(),
        potentials: nodes
            .potentials
            .iter()
            .map(|ps| PotentialSet {
                unary: g.value(ps.unary).clone(),
                pairwise: [opt(ps.pairwise[0]), opt(ps.pairwise[1])],
                ternary: opt(ps.ternary),
            })
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::grad_check;
    use crate::potentials::unary_potential;
    use crate::rng::stream;
    use crate::tensor::softmax_1d;

    fn init(seed: u64) -> Init {
        Init {
            rng: stream(&[seed, 91]),
        }
    }

    fn shape(n_a: Option<usize>, order: usize) -> AttentionShape {
        AttentionShape {
            n_v: 4,
            n_q: 3,
            n_a,
            d: 8,
            order,
        }
    }

    fn build(seed: u64, s: AttentionShape) -> (ParamStore, AttentionParams, Vec<Tensor>) {
        let mut store = ParamStore::new();
        let mut i = init(seed);
        let p = AttentionParams::create(&mut store, &mut i, s).unwrap();
        let mut xs = vec![i.uniform(&[s.n_v, s.d], 1.0), i.uniform(&[s.n_q, s.d], 1.0)];
        if let Some(n_a) = s.n_a {
            xs.push(i.uniform(&[n_a, s.d], 1.0));
        }
        (store, p, xs)
    }

    fn set(v: Vec<f64>) -> PotentialSet {
        PotentialSet {
            unary: Tensor::vector(v).unwrap(),
            pairwise: [None, None],
            ternary: None,
        }
    }

    #[test]
    fn combine_examples() {
        let z = PotentialSet {
            unary: Tensor::zeros(&[4]),
            pairwise: [Some(Tensor::zeros(&[4])), None],
            ternary: None,
        };
        let d = combine_potentials(&z, &[1.0, 2.0, 3.0, 4.0, 7.5]).unwrap();
        assert!(d.p.iter().all(|&p| (p - 0.25).abs() < 1e-15));

        let ps = PotentialSet {
            unary: Tensor::vector(vec![0.3, -1.0, 2.0]).unwrap(),
            pairwise: [Some(Tensor::vector(vec![5.0, 1.0, 0.0]).unwrap()), None],
            ternary: Some(Tensor::vector(vec![-1.0, 1.0, 3.0]).unwrap()),
        };
        let d = combine_potentials(&ps, &[1.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let want = softmax_1d(&ps.unary).unwrap();
        assert_eq!(d.p, want.to_vec());

        let bad = PotentialSet {
            unary: Tensor::zeros(&[3]),
            pairwise: [Some(Tensor::zeros(&[4])), None],
            ternary: None,
        };
        assert!(matches!(combine_potentials(&bad, &COMBINATION_INIT), Err(Error::Dimension(_))));
    }

    #[test]
    fn attend_examples() {
        let f = Tensor::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let one_hot = AttentionDistribution {
            modality: Modality::Image,
            p: vec![0.0, 1.0, 0.0],
        };
        assert_eq!(attend(&f, &one_hot).unwrap().data(), f.row(1));
        let uniform = AttentionDistribution {
            modality: Modality::Image,
            p: vec![1.0 / 3.0; 3],
        };
        let m = attend(&f, &uniform).unwrap();
        assert!((m.data()[0] - 3.0).abs() < 1e-12 && (m.data()[1] - 4.0).abs() < 1e-12);
        let short = AttentionDistribution {
            modality: Modality::Image,
            p: vec![0.5; 2],
        };
        assert!(matches!(attend(&f, &short), Err(Error::Dimension(_))));
    }

    #[test]
    fn attend_matches_loop_oracle() {
        let mut i = init(4);
        for _ in 0..20 {
            let f = i.uniform(&[5, 3], 2.0);
            let raw = i.uniform(&[5], 2.0);
            let p = softmax_1d(&raw).unwrap().to_vec();
            let got = attend(&f, &AttentionDistribution { modality: Modality::Question, p: p.clone() })
                .unwrap();
            for c in 0..3 {
                let want: f64 = (0..5).map(|r| p[r] * f.at(r, c)).sum();
                assert!((got.data()[c] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn order_one_matches_hand_wired_unary() {
        let (store, p, xs) = build(1, shape(None, 1));
        let out = attention_forward(&store, &p, &[&xs[0], &xs[1]], 1).unwrap();
        for (m, x) in xs.iter().enumerate() {
            let u = &p.unary[m];
            let theta = unary_potential(x, store.get(u.w2), store.get(u.w1)).unwrap();
            let dist = softmax_1d(&theta).unwrap();
            assert_eq!(out.distributions[m].p, dist.to_vec());
            let a = attend(x, &AttentionDistribution { modality: Modality::ALL[m], p: dist.to_vec() })
                .unwrap();
            assert!(out.attended[m].bit_eq(&a));
        }
    }

    #[test]
    fn two_modality_mode_has_no_answer_outputs() {
        let (store, p, xs) = build(2, shape(None, 2));
        let out = attention_forward(&store, &p, &[&xs[0], &xs[1]], 1).unwrap();
        assert_eq!(out.attended.len(), 2);
        assert_eq!(out.distributions.len(), 2);
        assert!(p.pair_av.is_none() && p.ternary.is_none());
        assert!(attention_forward(&store, &p, &[&xs[0], &xs[1], &xs[1]], 1).is_err());
    }

    #[test]
    fn order_three_requires_answers() {
        let mut store = ParamStore::new();
        assert!(matches!(
            AttentionParams::create(&mut store, &mut init(0), shape(None, 3)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn distributions_normalised_for_every_order() {
        for (n_a, order) in [(None, 1), (None, 2), (Some(3), 1), (Some(3), 2), (Some(3), 3)] {
            for iters in [1, 3] {
                let (store, p, xs) = build(order as u64, shape(n_a, order));
                let refs: Vec<&Tensor> = xs.iter().collect();
                let out = attention_forward(&store, &p, &refs, iters).unwrap();
                for d in &out.distributions {
                    assert!((d.p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                    assert!(d.p.iter().all(|&x| x > 0.0));
                }
            }
        }
    }

    #[test]
    fn zeroed_higher_tiers_match_unary_only_bitwise() {
        let (full_store, full, xs) = build(5, shape(Some(3), 3));
        let (mut uni_store, uni, _) = build(6, shape(None, 1));
        for m in 0..2 {
            uni_store.set(uni.unary[m].w2, full_store.get(full.unary[m].w2).clone());
            uni_store.set(uni.unary[m].w1, full_store.get(full.unary[m].w1).clone());
        }
        let mut zeroed = full_store.clone();
        zeroed.set(full.combination[0], Tensor::vector(vec![1.0, 0.0, 0.0, 0.0, 0.0]).unwrap());
        let a = attention_forward(&zeroed, &full, &[&xs[0], &xs[1], &xs[2]], 1).unwrap();
        let b = attention_forward(&uni_store, &uni, &[&xs[0], &xs[1]], 1).unwrap();
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.distributions[0].p), bits(&b.distributions[0].p));
    }

    #[test]
    fn single_iteration_ignores_reweighting() {
        let (store, p, xs) = build(8, shape(Some(3), 3));
        let refs: Vec<&Tensor> = xs.iter().collect();
        let one = attention_forward(&store, &p, &refs, 1).unwrap();
        let zero = attention_forward(&store, &p, &refs, 0).unwrap();
        assert_eq!(one.distributions, zero.distributions);
        let three = attention_forward(&store, &p, &refs, 3).unwrap();
        assert_ne!(one.distributions, three.distributions);
    }

    #[test]
    fn full_attention_passes_grad_check() {
        for iters in [1, 2] {
            let (store, p, xs) = build(7, shape(Some(3), 3));
            let mut g = Graph::new();
            let b = store.bind(&mut g);
            let inputs: Vec<NodeId> = xs.iter().map(|x| g.param(x.clone())).collect();
            let nodes = attention_graph(&mut g, &b, &p, &inputs, iters, None).unwrap();
            let cat = g.concat(&nodes.attended).unwrap();
            let mut i = init(99);
            let r = g.constant(i.uniform(&[g.value(cat).len()], 1.0));
            let prod = g.mul(cat, r).unwrap();
            let loss = g.sum_all(prod).unwrap();
            let err = grad_check(&mut g, loss, 1e-5).unwrap();
            assert!(err < 1e-4, "iters {iters}: {err}");
        }
    }

    proptest::proptest! {
        #[test]
        fn combine_is_shift_invariant(seed in 0u64..1000, c in -5.0f64..5.0) {
            let mut i = init(seed);
            let u = i.uniform(&[6], 2.0).to_vec();
            let w = [1.3, 0.0, 0.0, 0.0, -0.2];
            let base = combine_potentials(&set(u.clone()), &w).unwrap();
            let shifted = combine_potentials(&set(u.iter().map(|x| x + c).collect()), &w).unwrap();
            for (a, b) in base.p.iter().zip(&shifted.p) {
                proptest::prop_assert!((a - b).abs() < 1e-12);
            }
            proptest::prop_assert!((base.p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
