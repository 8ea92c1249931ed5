//! The full network: question encoder, image projection, answer embedding,
//! attention, fusion and classifier.

use serde::{Deserialize, Serialize};

use crate::attention::{attention_graph, read_attention, AttentionNodes, AttentionOutput, AttentionShape};
use crate::attention::AttentionParams;
use crate::decision::{classifier_input_graph, classify_graph, predict_mc, ClassifierParams, FusionMode, FusionSketches};
use crate::dropout::DropoutPlan;
use crate::embed::{answer_embed_graph, question_encode_graph, QuestionEncoderParams};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::params::{Bound, Init, ParamId, ParamStore};
use crate::rng::{mix, stream, tag};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// 2 (image, question) or 3 (+ answers).
    pub modalities: usize,
    /// 1 = unary, 2 = + pairwise, 3 = + ternary.
    pub order: usize,
    pub fusion: FusionMode,
    pub d: usize,
    pub d_feat: usize,
    pub n_v: usize,
    pub n_q: usize,
    /// Answer candidates per example (three-modality mode).
    pub n_a: usize,
    pub vocab_size: usize,
    pub num_classes: usize,
    pub sketch_dim: usize,
    pub hidden: usize,
    pub mean_field_iters: usize,
    /// Signed square root and ℓ2 normalisation of the fused vector.
    pub signed_sqrt: bool,
    pub seed: u64,
}

impl ModelConfig {
    /// Every violated constraint, or `Ok` if none.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if !(2..=3).contains(&self.modalities) {
            errs.push(format!("modalities must be 2 or 3, got {}", self.modalities));
        }
        if !(1..=3).contains(&self.order) {
            errs.push(format!("order must be 1, 2 or 3, got {}", self.order));
        }
        if self.order == 3 && self.modalities != 3 {
            errs.push("order 3 needs modalities = 3".into());
        }
        if self.fusion.arity() != self.modalities {
            errs.push(format!(
                "fusion {} fuses {} modalities, but modalities = {}",
                self.fusion.name(),
                self.fusion.arity(),
                self.modalities
            ));
        }
        if self.d == 0 || self.d % 2 != 0 {
            errs.push(format!("d must be positive and even, got {}", self.d));
        }
        for (name, v) in [
            ("d_feat", self.d_feat),
            ("n_v", self.n_v),
            ("n_q", self.n_q),
            ("n_a", self.n_a),
            ("sketch_dim", self.sketch_dim),
            ("hidden", self.hidden),
            ("mean_field_iters", self.mean_field_iters),
        ] {
            if v == 0 {
                errs.push(format!("{name} must be positive"));
            }
        }
        if self.vocab_size < 3 {
            errs.push(format!("vocab_size must be at least 3, got {}", self.vocab_size));
        }
        if self.num_classes < 2 {
            errs.push(format!("num_classes must be at least 2, got {}", self.num_classes));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    pub fn attention_shape(&self) -> AttentionShape {
        AttentionShape {
            n_v: self.n_v,
            n_q: self.n_q,
            n_a: (self.modalities == 3).then_some(self.n_a),
            d: self.d,
            order: self.order,
        }
    }

    /// Seed of the count-sketch hash and sign maps.
    pub fn sketch_seed(&self) -> u64 {
        mix(&[tag::SKETCH, self.seed])
    }
}

/// One model input. `candidates` are answer-class ids; they feed the answer
/// modality and restrict the multiple-choice prediction.
#[derive(Clone, Copy, Debug)]
pub struct ModelInput<'a> {
    /// `[n_v × d_feat]`
    pub features: &'a Tensor,
    /// Length `n_q`.
    pub question: &'a [usize],
    pub candidates: &'a [usize],
}

#[derive(Clone, Debug)]
pub struct ForwardNodes {
    pub logits: NodeId,
    pub attention: AttentionNodes,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub sketches: FusionSketches,
    question: QuestionEncoderParams,
    image_w: ParamId,
    image_b: ParamId,
    answer_table: Option<ParamId>,
    attention: AttentionParams,
    classifier: ClassifierParams,
}

impl Model {
    /// Freshly initialised model; every random draw comes from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let mut store = ParamStore::new();
        let mut init = Init {
            rng: stream(&[tag::INIT, c.seed]),
        };
        let question = QuestionEncoderParams::create(&mut store, &mut init, c.vocab_size, c.d)?;
        let image_w = store.add("image.projection.w", init.xavier(c.d_feat, c.d));
        let image_b = store.add("image.projection.b", Tensor::zeros(&[c.d]));
        let answer_table = (c.modalities == 3).then(|| {
            let bound = (3.0 / c.d as f64).sqrt();
            store.add("answer.embedding", init.uniform(&[c.num_classes + 1, c.d], bound))
        });
        let attention = AttentionParams::create(&mut store, &mut init, c.attention_shape())?;
        let sketches = FusionSketches::generate(c.fusion, c.d, c.sketch_dim, c.sketch_seed());
        let classifier = ClassifierParams::create(
            &mut store,
            &mut init,
            sketches.classifier_input_dim(),
            c.hidden,
            c.num_classes,
        )?;
        Ok(Self {
            config,
            store,
            sketches,
            question,
            image_w,
            image_b,
            answer_table,
            attention,
            classifier,
        })
    }

    /// Rebuilds a model from saved parts. `store` must hold exactly the
    /// parameters `config` implies, with matching names and shapes.
    pub fn from_parts(config: ModelConfig, store: ParamStore, sketches: FusionSketches) -> Result<Self> {
        let mut m = Self::new(config)?;
        if store.len() != m.store.len() {
            return Err(Error::Incompatible(format!(
                "expected {} parameters, found {}",
                m.store.len(),
                store.len()
            )));
        }
        for id in m.store.ids().collect::<Vec<_>>() {
            let name = m.store.name(id).to_string();
            let Some(src) = store.find(&name) else {
                return Err(Error::Incompatible(format!("missing parameter {name}")));
            };
            let (want, got) = (m.store.get(id).shape(), store.get(src).shape());
            if want != got {
                return Err(Error::Incompatible(format!(
                    "parameter {name} has shape {got:?}, expected {want:?}"
                )));
            }
            m.store.set(id, store.get(src).clone());
        }
        if sketches.mode != m.sketches.mode
            || sketches.classifier_input_dim() != m.sketches.classifier_input_dim()
            || sketches.inner.get(0).d_in() != m.sketches.inner.get(0).d_in()
        {
            return Err(Error::Incompatible("sketch maps do not fit the model configuration".into()));
        }
        m.sketches = sketches;
        Ok(m)
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_scalars()
    }

    fn check_input(&self, x: &ModelInput) -> Result<()> {
        let c = &self.config;
        if x.features.shape() != [c.n_v, c.d_feat] {
            return Err(Error::Dimension(format!(
                "image features have shape {:?}, expected [{}, {}]",
                x.features.shape(),
                c.n_v,
                c.d_feat
            )));
        }
        if x.question.len() != c.n_q {
            return Err(Error::Dimension(format!(
                "question has {} tokens, expected {}",
                x.question.len(),
                c.n_q
            )));
        }
        if x.candidates.is_empty() {
            return Err(Error::Contract("no answer candidates".into()));
        }
        if c.modalities == 3 && x.candidates.len() != c.n_a {
            return Err(Error::Dimension(format!(
                "{} answer candidates, expected {}",
                x.candidates.len(),
                c.n_a
            )));
        }
        if let Some(&bad) = x.candidates.iter().find(|&&k| k >= c.num_classes) {
            return Err(Error::Contract(format!(
                "candidate class {bad} out of range for {} classes",
                c.num_classes
            )));
        }
        Ok(())
    }

    /// Builds the forward pass into `g`. Training passes a dropout plan;
    /// evaluation passes `None`.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        b: &Bound,
        x: &ModelInput,
        plan: Option<&DropoutPlan>,
    ) -> Result<ForwardNodes> {
        self.check_input(x)?;
        let q = question_encode_graph(g, b, &self.question, x.question, plan)?;
        let feats = g.constant(x.features.clone());
        let v = g.matmul(feats, b.node(self.image_w))?;
        let v = g.add_row_bias(v, b.node(self.image_b))?;
        let mut inputs = vec![v, q];
        if let Some(table) = self.answer_table {
            let rows: Vec<usize> = x.candidates.iter().map(|&k| k + 1).collect();
            inputs.push(answer_embed_graph(g, b.node(table), &rows)?);
        }
        let attention = attention_graph(
            g,
            b,
            &self.attention,
            &inputs,
            self.config.mean_field_iters,
            plan,
        )?;
        let z = classifier_input_graph(g, &attention.attended, &self.sketches, self.config.signed_sqrt)?;
        let logits = classify_graph(g, b, &self.classifier, z, plan)?;
        Ok(ForwardNodes { logits, attention })
    }

    /// Evaluation-mode logits over all answer classes.
    pub fn logits(&self, x: &ModelInput) -> Result<Vec<f64>> {
        Ok(self.inspect(x)?.0)
    }

    /// Logits plus every potential, distribution and attended vector.
    pub fn inspect(&self, x: &ModelInput) -> Result<(Vec<f64>, AttentionOutput)> {
        let mut g = Graph::new();
        let b = self.store.bind(&mut g);
        let f = self.forward_graph(&mut g, &b, x, None)?;
        Ok((g.value(f.logits).to_vec(), read_attention(&g, &f.attention)))
    }

    /// Multiple-choice prediction among `x.candidates`.
    pub fn predict(&self, x: &ModelInput) -> Result<usize> {
        predict_mc(&self.logits(x)?, x.candidates)
    }

    /// Cross-entropy loss, its gradient for every parameter (in store order)
    /// and the logits, for one training example.
    pub fn example_gradients(
        &self,
        x: &ModelInput,
        gold: usize,
        plan: Option<&DropoutPlan>,
    ) -> Result<(f64, Vec<Tensor>, Vec<f64>)> {
        let mut g = Graph::new();
        let b = self.store.bind(&mut g);
        let f = self.forward_graph(&mut g, &b, x, plan)?;
        let loss = g.cross_entropy(f.logits, gold)?;
        g.backward(loss)?;
        let grads = b
            .nodes()
            .iter()
            .map(|&n| g.grad(n).expect("parameter gradient"))
            .collect();
        Ok((g.value(loss).item(), grads, g.value(f.logits).to_vec()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::grad_check;

    pub(crate) fn tiny(modalities: usize, order: usize, fusion: FusionMode) -> ModelConfig {
        ModelConfig {
            modalities,
            order,
            fusion,
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

    fn input_tensors(c: &ModelConfig) -> (Tensor, Vec<usize>, Vec<usize>) {
        let mut init = Init {
            rng: stream(&[9, 9]),
        };
        let feats = init.uniform(&[c.n_v, c.d_feat], 1.0);
        (feats, vec![2, 5, 0], vec![1, 4, 2])
    }

    #[test]
    fn validate_lists_every_problem() {
        let mut c = tiny(2, 3, FusionMode::Mct);
        c.d = 7;
        c.num_classes = 1;
        let Err(Error::Config(errs)) = c.validate() else {
            panic!("expected config error")
        };
        assert_eq!(errs.len(), 4, "{errs:?}");
    }

    #[test]
    fn init_is_deterministic_and_seeded() {
        let a = Model::new(tiny(3, 3, FusionMode::Mcb2)).unwrap();
        let b = Model::new(tiny(3, 3, FusionMode::Mcb2)).unwrap();
        assert_eq!(a.store, b.store);
        assert_eq!(a.sketches, b.sketches);
        let mut c = tiny(3, 3, FusionMode::Mcb2);
        c.seed = 43;
        assert_ne!(Model::new(c).unwrap().store, a.store);
    }

    #[test]
    fn forward_shapes_and_prediction() {
        for (m, o, f) in [
            (2, 1, FusionMode::Mcb),
            (2, 2, FusionMode::Mcb),
            (3, 1, FusionMode::Mct),
            (3, 2, FusionMode::Mcb2),
            (3, 3, FusionMode::Mct),
        ] {
            let c = tiny(m, o, f);
            let model = Model::new(c.clone()).unwrap();
            let (feats, q, cands) = input_tensors(&c);
            let x = ModelInput {
                features: &feats,
                question: &q,
                candidates: &cands,
            };
            let (logits, att) = model.inspect(&x).unwrap();
            assert_eq!(logits.len(), c.num_classes);
            assert_eq!(att.distributions.len(), m);
            assert!(cands.contains(&model.predict(&x).unwrap()));
        }
    }

    #[test]
    fn bad_inputs_are_rejected() {
        let c = tiny(3, 2, FusionMode::Mct);
        let model = Model::new(c.clone()).unwrap();
        let (feats, q, cands) = input_tensors(&c);
        let short = [1usize, 2];
        let x = ModelInput {
            features: &feats,
            question: &short,
            candidates: &cands,
        };
        assert!(matches!(model.logits(&x), Err(Error::Dimension(_))));
        let wrong = [9usize, 0, 1];
        let x = ModelInput {
            features: &feats,
            question: &q,
            candidates: &wrong,
        };
        assert!(matches!(model.logits(&x), Err(Error::Contract(_))));
        let oov = [1usize, 2, 99];
        let x = ModelInput {
            features: &feats,
            question: &oov,
            candidates: &cands,
        };
        assert!(matches!(model.logits(&x), Err(Error::Vocab { .. })));
    }

    #[test]
    fn full_model_passes_grad_check() {
        let c = tiny(3, 3, FusionMode::Mcb2);
        let model = Model::new(c.clone()).unwrap();
        let (feats, q, cands) = input_tensors(&c);
        let x = ModelInput {
            features: &feats,
            question: &q,
            candidates: &cands,
        };
        let mut g = Graph::new();
        let b = model.store.bind(&mut g);
        let f = model.forward_graph(&mut g, &b, &x, None).unwrap();
        let loss = g.cross_entropy(f.logits, 2).unwrap();
        let err = grad_check(&mut g, loss, 1e-5).unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn example_gradients_match_graph() {
        let c = tiny(3, 3, FusionMode::Mct);
        let model = Model::new(c.clone()).unwrap();
        let (feats, q, cands) = input_tensors(&c);
        let x = ModelInput {
            features: &feats,
            question: &q,
            candidates: &cands,
        };
        let (loss, grads, logits) = model.example_gradients(&x, 1, None).unwrap();
        assert_eq!(grads.len(), model.store.len());
        let want = crate::tensor::log_softmax_slice(&logits)[1];
        assert!((loss + want).abs() < 1e-12);
        for (id, gr) in model.store.ids().zip(&grads) {
            assert_eq!(model.store.get(id).shape(), gr.shape());
        }
    }

    #[test]
    fn from_parts_round_trips_and_checks() {
        let c = tiny(3, 3, FusionMode::Mcb2);
        let m = Model::new(c.clone()).unwrap();
        let back = Model::from_parts(c.clone(), m.store.clone(), m.sketches.clone()).unwrap();
        assert_eq!(back.store, m.store);
        let other = Model::new(tiny(3, 2, FusionMode::Mcb2)).unwrap();
        assert!(matches!(
            Model::from_parts(c, other.store, other.sketches),
            Err(Error::Incompatible(_))
        ));
    }
}
