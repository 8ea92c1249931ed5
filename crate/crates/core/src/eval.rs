//! Multiple-choice accuracy, overall and per question kind.

use std::collections::BTreeMap;

use crate::data::{bayes_oracle, question_vocab, Dataset, QuestionKind, ANSWER_CLASSES, CANDIDATES, CELLS};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::tensor::Tensor;
use crate::train::{par_map, Sample};

/// Anything that picks one of a sample's candidates.
pub trait Predictor: Sync {
    fn predict(&self, sample: &Sample) -> Result<usize>;
}

impl Predictor for Model {
    fn predict(&self, sample: &Sample) -> Result<usize> {
        Model::predict(self, &sample.input())
    }
}

/// Decodes every cell to its nearest prototype and answers exactly.
pub struct BayesOracle<'a> {
    pub prototypes: &'a Tensor,
}

impl Predictor for BayesOracle<'_> {
    fn predict(&self, sample: &Sample) -> Result<usize> {
        bayes_oracle(sample.example, self.prototypes)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Tally {
    pub correct: usize,
    pub total: usize,
}

impl Tally {
    pub fn accuracy(&self) -> f64 {
        if self.total == 0 {
            f64::NAN
        } else {
            self.correct as f64 / self.total as f64
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub overall: Tally,
    pub per_kind: BTreeMap<QuestionKind, Tally>,
}

impl EvalReport {
    pub fn accuracy(&self) -> f64 {
        self.overall.accuracy()
    }

    /// Per-kind accuracies weighted by their example counts.
    pub fn recombined(&self) -> f64 {
        let total = self.overall.total as f64;
        self.per_kind
            .values()
            .map(|t| t.accuracy() * t.total as f64 / total)
            .sum()
    }
}

pub fn evaluate(p: &dyn Predictor, samples: &[Sample], threads: usize) -> Result<EvalReport> {
    let hits = par_map(samples, threads, |_, s| p.predict(s).map(|k| k == s.example.gold));
    let mut r = EvalReport::default();
    for (s, hit) in samples.iter().zip(hits) {
        let hit = usize::from(hit?);
        let t = r.per_kind.entry(s.example.kind).or_default();
        t.correct += hit;
        t.total += 1;
        r.overall.correct += hit;
        r.overall.total += 1;
    }
    Ok(r)
}

/// Checks that a model trained elsewhere can read `ds`.
pub fn check_compatible(config: &ModelConfig, ds: &Dataset) -> Result<()> {
    let mut errs = Vec::new();
    let mut want = |what: &str, model: usize, data: usize| {
        if model != data {
            errs.push(format!("{what}: checkpoint has {model}, dataset has {data}"));
        }
    };
    want("feature width", config.d_feat, ds.config.d_feat);
    want("image regions", config.n_v, CELLS);
    want("vocabulary size", config.vocab_size, question_vocab().len());
    want("answer classes", config.num_classes, ANSWER_CLASSES.len());
    if config.modalities == 3 {
        want("answer candidates", config.n_a, CANDIDATES);
    }
    if errs.is_empty() {
        Ok(())
    } else {
        Err(Error::Incompatible(errs.join("; ")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, GenConfig, DEFAULT_NOISE};
    use crate::decision::FusionMode;
    use crate::train::prepare_samples;

    #[test]
    fn oracle_scores_everything() {
        let ds = generate_dataset(&GenConfig::new(4, 150, DEFAULT_NOISE)).unwrap();
        let samples = prepare_samples(&ds.examples, 8);
        let r = evaluate(&BayesOracle { prototypes: &ds.prototypes }, &samples, 2).unwrap();
        assert_eq!(r.overall, Tally { correct: 150, total: 150 });
        assert_eq!(r.per_kind.len(), 3);
        assert!((r.recombined() - r.accuracy()).abs() < 1e-12);
    }

    struct First;
    impl Predictor for First {
        fn predict(&self, s: &Sample) -> Result<usize> {
            Ok(s.example.candidates[0])
        }
    }

    #[test]
    fn per_kind_recombines_to_overall() {
        let ds = generate_dataset(&GenConfig::new(8, 301, DEFAULT_NOISE)).unwrap();
        let samples = prepare_samples(&ds.examples, 8);
        let r = evaluate(&First, &samples, 1).unwrap();
        let sum: usize = r.per_kind.values().map(|t| t.total).sum();
        assert_eq!(sum, 301);
        assert!((r.recombined() - r.accuracy()).abs() < 1e-12);
    }

    #[test]
    fn mismatched_dataset_is_incompatible() {
        let ds = generate_dataset(&GenConfig::new(1, 5, DEFAULT_NOISE)).unwrap();
        let mut run = crate::config::RunConfig::default();
        run.model.fusion = FusionMode::Mct;
        let mut c = crate::train::model_config(&run, &ds);
        assert!(check_compatible(&c, &ds).is_ok());
        c.d_feat += 1;
        c.num_classes = 3;
        match check_compatible(&c, &ds) {
            Err(Error::Incompatible(m)) => assert!(m.contains("feature width") && m.contains("answer classes")),
            other => panic!("{other:?}"),
        }
    }
}
