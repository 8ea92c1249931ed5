//! Loss, RMSProp and the minibatch training loop.

use std::io::Write;
use std::path::Path;
use std::thread;

use rand::seq::SliceRandom;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::{question_vocab, Dataset, QaExample, ANSWER_CLASSES, CANDIDATES, CELLS};
use crate::decision::predict_mc;
use crate::error::{Error, Result};
use crate::eval::{evaluate, Predictor};
use crate::model::{Model, ModelConfig, ModelInput};
use crate::rng::{stream, tag};
use crate::tensor::{log_softmax_slice, softmax_slice, Tensor};

pub use crate::config::HyperParams;
pub use crate::dropout::{dropout_mask, DropoutPlan, Site};

pub const THREADS_ENV: &str = "HOATTN_THREADS";
pub const METRICS_HEADER: &str = "step,loss,train_acc,val_acc";

/// `−log softmax(logits)[gold]`.
pub fn cross_entropy_loss(logits: &[f64], gold: usize) -> Result<f64> {
    check_gold(logits, gold)?;
    Ok(-log_softmax_slice(logits)[gold])
}

/// Gradient of [`cross_entropy_loss`] with respect to the logits.
pub fn cross_entropy_grad(logits: &[f64], gold: usize) -> Result<Vec<f64>> {
    check_gold(logits, gold)?;
    let mut g = softmax_slice(logits);
    g[gold] -= 1.0;
    Ok(g)
}

fn check_gold(logits: &[f64], gold: usize) -> Result<()> {
    if gold >= logits.len() {
        return Err(Error::Contract(format!(
            "gold class {gold} out of range for {} logits",
            logits.len()
        )));
    }
    Ok(())
}

/// Per-parameter squared-gradient accumulators, all starting at zero.
#[derive(Clone, Debug, PartialEq)]
pub struct RmsPropState {
    pub r: Vec<Tensor>,
}

impl RmsPropState {
    pub fn new(model: &Model) -> Self {
        Self {
            r: model.store.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect(),
        }
    }

    /// Updates every parameter of `model` in store order.
    pub fn apply(&mut self, model: &mut Model, grads: &[Tensor], hp: &HyperParams) -> Result<()> {
        if grads.len() != self.r.len() || grads.len() != model.store.len() {
            return Err(Error::Dimension(format!(
                "{} gradients, {} accumulators, {} parameters",
                grads.len(),
                self.r.len(),
                model.store.len()
            )));
        }
        let ids: Vec<_> = model.store.ids().collect();
        for ((id, g), r) in ids.into_iter().zip(grads).zip(&mut self.r) {
            let (p, r_new) = rmsprop_step(model.store.get(id), g, r, hp)?;
            model.store.set(id, p);
            *r = r_new;
        }
        Ok(())
    }
}

/// One elementwise RMSProp update; returns the new parameter and accumulator.
pub fn rmsprop_step(param: &Tensor, grad: &Tensor, r: &Tensor, hp: &HyperParams) -> Result<(Tensor, Tensor)> {
    if param.shape() != grad.shape() || param.shape() != r.shape() {
        return Err(Error::Dimension(format!(
            "rmsprop shapes differ: param {:?}, grad {:?}, state {:?}",
            param.shape(),
            grad.shape(),
            r.shape()
        )));
    }
    let (lr, alpha, eps) = (hp.learning_rate, hp.rms_alpha, hp.rms_eps);
    let n = param.len();
    let mut p_out = Vec::with_capacity(n);
    let mut r_out = Vec::with_capacity(n);
    for ((&p, &g), &r) in param.data().iter().zip(grad.data()).zip(r.data()) {
        let r = alpha * r + (1.0 - alpha) * g * g;
        p_out.push(p - lr * g / (r.sqrt() + eps));
        r_out.push(r);
    }
    Ok((
        Tensor::from_parts(param.shape().to_vec(), p_out),
        Tensor::from_parts(param.shape().to_vec(), r_out),
    ))
}

/// A dataset example with its question encoded for a given model.
#[derive(Clone, Debug)]
pub struct Sample<'a> {
    pub example: &'a QaExample,
    pub question: Vec<usize>,
}

impl Sample<'_> {
    pub fn input(&self) -> ModelInput<'_> {
        ModelInput {
            features: &self.example.scene.features,
            question: &self.question,
            candidates: &self.example.candidates,
        }
    }
}

pub fn prepare_samples(examples: &[QaExample], n_q: usize) -> Vec<Sample<'_>> {
    let vocab = question_vocab();
    examples
        .iter()
        .map(|e| Sample {
            example: e,
            question: vocab.encode(&e.question, n_q),
        })
        .collect()
}

/// Model configuration for training on `ds` with the options in `run`.
pub fn model_config(run: &RunConfig, ds: &Dataset) -> ModelConfig {
    let m = &run.model;
    ModelConfig {
        modalities: m.modalities,
        order: m.order,
        fusion: m.fusion,
        d: m.d,
        d_feat: ds.config.d_feat,
        n_v: CELLS,
        n_q: m.n_q,
        n_a: CANDIDATES,
        vocab_size: question_vocab().len(),
        num_classes: ANSWER_CLASSES.len(),
        sketch_dim: m.sketch_dim,
        hidden: m.hidden.unwrap_or(m.d),
        mean_field_iters: m.mean_field_iters,
        signed_sqrt: m.signed_sqrt,
        seed: run.hyper.seed,
    }
}

/// Worker count from `HOATTN_THREADS`, default 1.
pub fn threads_from_env() -> Result<usize> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(1),
        Ok(s) => match s.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(Error::Config(vec![format!("{THREADS_ENV} must be a positive integer, got {s:?}")])),
        },
    }
}

/// Applies `f` to every item on up to `threads` scoped workers. Output order
/// is input order.
pub(crate) fn par_map<T: Sync, R: Send>(items: &[T], threads: usize, f: impl Fn(usize, &T) -> R + Sync) -> Vec<R> {
    if threads <= 1 || items.len() <= 1 {
        return items.iter().enumerate().map(|(i, x)| f(i, x)).collect();
    }
    let chunk = items.len().div_ceil(threads);
    let f = &f;
    thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .enumerate()
            .map(|(c, part)| {
                s.spawn(move || {
                    part.iter()
                        .enumerate()
                        .map(|(i, x)| f(c * chunk + i, x))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker panicked"))
            .collect()
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
}

impl MetricsRow {
    pub fn csv_line(&self) -> String {
        format!("{},{},{},{}", self.step, self.loss, self.train_acc, self.val_acc)
    }
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.csv_line());
        s.push('\n');
    }
    s
}

pub struct TrainOutput {
    pub last: Checkpoint,
    /// Highest validation accuracy seen in this run, if it beat the
    /// resumed checkpoint's record.
    pub best: Option<Checkpoint>,
    pub metrics: Vec<MetricsRow>,
}

impl TrainOutput {
    /// Writes `metrics.csv`, `final.hoac` and (if present) `best.hoac`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut f = std::fs::File::create(dir.join("metrics.csv"))?;
        f.write_all(metrics_csv(&self.metrics).as_bytes())?;
        self.last.save(&dir.join("final.hoac"))?;
        if let Some(b) = &self.best {
            b.save(&dir.join("best.hoac"))?;
        }
        Ok(())
    }
}

/// Position `pos` of the endless shuffled stream of training indices.
struct Shuffler {
    n: usize,
    seed: u64,
    epoch: u64,
    perm: Vec<usize>,
}

impl Shuffler {
    fn new(n: usize, seed: u64) -> Self {
        Self {
            n,
            seed,
            epoch: u64::MAX,
            perm: Vec::new(),
        }
    }

    fn at(&mut self, pos: u64) -> usize {
        let epoch = pos / self.n as u64;
        if epoch != self.epoch {
            self.perm = (0..self.n).collect();
            self.perm.shuffle(&mut stream(&[tag::SHUFFLE, self.seed, epoch]));
            self.epoch = epoch;
        }
        self.perm[(pos % self.n as u64) as usize]
    }
}

/// Runs minibatch RMSProp from `resume` (or a fresh model) until
/// `run.hyper.max_iters` steps have been taken in total. `on_row` sees each
/// metrics row as it is produced.
pub fn train_loop(
    ds: &Dataset,
    run: &RunConfig,
    resume: Option<Checkpoint>,
    threads: usize,
    on_row: &mut dyn FnMut(&MetricsRow),
) -> Result<TrainOutput> {
    let hp = &run.hyper;
    let n_train = ds.train_len();
    if n_train == 0 {
        return Err(Error::Contract("training set is empty".into()));
    }
    let config = model_config(run, ds);
    let (mut model, mut opt, start, mut best_val) = match resume {
        None => {
            let model = Model::new(config.clone())?;
            let opt = RmsPropState::new(&model);
            (model, opt, 0, None)
        }
        Some(ck) => {
            if ck.model.config != config {
                return Err(Error::Incompatible(format!(
                    "checkpoint model {:?} differs from the configured model {:?}",
                    ck.model.config, config
                )));
            }
            let opt = match ck.optimizer {
                Some(r) => RmsPropState { r },
                None => RmsPropState::new(&ck.model),
            };
            (ck.model, opt, ck.step, ck.best_val)
        }
    };
    let train = prepare_samples(&ds.examples[..n_train], config.n_q);
    let val = prepare_samples(&ds.examples[n_train..], config.n_q);
    let mut shuffler = Shuffler::new(n_train, hp.seed);
    let batch = hp.batch_size;
    let threads = threads.max(1);
    let sizes: Vec<usize> = model.store.iter().map(|(_, t)| t.len()).collect();

    let mut metrics = Vec::new();
    let mut best = None;
    let (mut loss_sum, mut correct, mut seen) = (0.0, 0usize, 0usize);
    for step in start..hp.max_iters {
        let indices: Vec<usize> = (0..batch)
            .map(|j| shuffler.at(step * batch as u64 + j as u64))
            .collect();
        let mut acc: Vec<Vec<f64>> = sizes.iter().map(|&n| vec![0.0; n]).collect();
        for (wave_no, wave) in indices.chunks(threads).enumerate() {
            let results = par_map(wave, threads, |i, &idx| {
                let plan = DropoutPlan {
                    embed_rate: hp.dropout_embed,
                    last_rate: hp.dropout_last,
                    seed: hp.seed,
                    step,
                    slot: (wave_no * threads + i) as u64,
                };
                let s = &train[idx];
                model.example_gradients(&s.input(), s.example.gold, Some(&plan))
            });
            for (i, res) in results.into_iter().enumerate() {
                let (loss, grads, logits) = res?;
                let j = wave_no * threads + i;
                if !loss.is_finite() {
                    return Err(Error::NonFinite {
                        step,
                        batch_index: j,
                        example_index: indices[j],
                        loss,
                    });
                }
                loss_sum += loss;
                let s = &train[indices[j]];
                correct += usize::from(predict_mc(&logits, &s.example.candidates)? == s.example.gold);
                seen += 1;
                for (a, g) in acc.iter_mut().zip(&grads) {
                    for (x, y) in a.iter_mut().zip(g.data()) {
                        *x += y;
                    }
                }
            }
        }
        let scale = 1.0 / batch as f64;
        let grads: Vec<Tensor> = acc
            .into_iter()
            .zip(model.store.iter())
            .map(|(a, (_, p))| Tensor::from_parts(p.shape().to_vec(), a.into_iter().map(|x| x * scale).collect()))
            .collect();
        opt.apply(&mut model, &grads, hp)?;

        let done = step + 1;
        if done % hp.log_every == 0 || done == hp.max_iters {
            let val_acc = if val.is_empty() {
                f64::NAN
            } else {
                evaluate(&model as &dyn Predictor, &val, threads)?.accuracy()
            };
            let row = MetricsRow {
                step: done,
                loss: loss_sum / seen as f64,
                train_acc: correct as f64 / seen as f64,
                val_acc,
            };
            on_row(&row);
            metrics.push(row);
            (loss_sum, correct, seen) = (0.0, 0, 0);
            if val_acc > best_val.unwrap_or(f64::NEG_INFINITY) {
                best_val = Some(val_acc);
                best = Some(Checkpoint {
                    model: model.clone(),
                    run: Some(run.clone()),
                    step: done,
                    run_seed: hp.seed,
                    best_val,
                    optimizer: Some(opt.r.clone()),
                });
            }
        }
    }
    let last = Checkpoint {
        model,
        run: Some(run.clone()),
        step: start.max(hp.max_iters),
        run_seed: hp.seed,
        best_val,
        optimizer: Some(opt.r),
    };
    Ok(TrainOutput { last, best, metrics })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, GenConfig, QuestionKind, DEFAULT_NOISE};
    use crate::decision::FusionMode;
    use crate::graph::Graph;
    use proptest::prelude::*;

    fn hp() -> HyperParams {
        HyperParams::default()
    }

    #[test]
    fn cross_entropy_examples() {
        let uniform = cross_entropy_loss(&[0.3; 4], 2).unwrap();
        assert!((uniform - 4f64.ln()).abs() < 1e-15);
        assert!((uniform - 1.386294).abs() < 1e-6);
        assert!(cross_entropy_loss(&[1000.0, 0.0, 0.0, 0.0], 0).unwrap() < 1e-12);
        assert!(matches!(cross_entropy_loss(&[0.0; 3], 3), Err(Error::Contract(_))));
    }

    #[test]
    fn cross_entropy_grad_matches_central_differences() {
        let logits = [0.5, -1.25, 2.0, 0.1, -0.3];
        let g = cross_entropy_grad(&logits, 3).unwrap();
        let h = 1e-5;
        for i in 0..logits.len() {
            let mut up = logits;
            let mut dn = logits;
            up[i] += h;
            dn[i] -= h;
            let num = (cross_entropy_loss(&up, 3).unwrap() - cross_entropy_loss(&dn, 3).unwrap()) / (2.0 * h);
            assert!((num - g[i]).abs() < 1e-8, "{i}: {num} vs {}", g[i]);
        }
    }

    #[test]
    fn cross_entropy_agrees_with_graph_op() {
        let logits = vec![0.5, -1.25, 2.0, 0.1];
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(logits.clone()).unwrap());
        let l = g.cross_entropy(x, 1).unwrap();
        g.backward(l).unwrap();
        assert!((g.value(l).item() - cross_entropy_loss(&logits, 1).unwrap()).abs() < 1e-15);
        let ours = cross_entropy_grad(&logits, 1).unwrap();
        for (a, b) in g.grad(x).unwrap().data().iter().zip(&ours) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn rmsprop_zero_grad_only_decays_state() {
        let p = Tensor::vector(vec![1.0, -2.0]).unwrap();
        let r = Tensor::vector(vec![0.5, 2.0]).unwrap();
        let (p2, r2) = rmsprop_step(&p, &Tensor::zeros(&[2]), &r, &hp()).unwrap();
        assert_eq!(p2, p);
        assert_eq!(r2.data(), &[0.5 * 0.99, 2.0 * 0.99]);
    }

    #[test]
    fn rmsprop_first_step_hand_value() {
        let (p, r) = rmsprop_step(&Tensor::scalar(0.0), &Tensor::scalar(1.0), &Tensor::scalar(0.0), &hp()).unwrap();
        assert!((r.item() - 0.01).abs() < 1e-15);
        let expected = -4e-4 / (0.1 + 1e-8);
        assert!((p.item() - expected).abs() < 1e-15);
        assert!((p.item() - -3.9999996e-3).abs() < 1e-10);
    }

    #[test]
    fn rmsprop_two_steps_hand_trace() {
        // g = 0.5 twice from p = 1.
        // r1 = 0.01 * 0.25 = 0.0025, p1 = 1 - 4e-4 * 0.5 / (0.05 + 1e-8)
        // r2 = 0.99 * 0.0025 + 0.0025 = 0.004975, p2 = p1 - 4e-4 * 0.5 / (sqrt(r2) + 1e-8)
        let p1 = 1.0 - 4e-4 * 0.5 / (0.05 + 1e-8);
        let p2 = p1 - 4e-4 * 0.5 / (0.004975f64.sqrt() + 1e-8);
        let g = Tensor::scalar(0.5);
        let (a, r) = rmsprop_step(&Tensor::scalar(1.0), &g, &Tensor::scalar(0.0), &hp()).unwrap();
        let (b, r) = rmsprop_step(&a, &g, &r, &hp()).unwrap();
        assert!((a.item() - p1).abs() < 1e-15);
        assert!((r.item() - 0.004975).abs() < 1e-15);
        assert!((b.item() - p2).abs() < 1e-15);
    }

    #[test]
    fn rmsprop_shape_mismatch() {
        let e = rmsprop_step(&Tensor::zeros(&[2]), &Tensor::zeros(&[3]), &Tensor::zeros(&[2]), &hp());
        assert!(matches!(e, Err(Error::Dimension(_))));
    }

    proptest! {
        #[test]
        fn rmsprop_state_stays_nonnegative(gs in prop::collection::vec(-1e6f64..1e6, 1..40)) {
            let mut r = Tensor::scalar(0.0);
            let mut p = Tensor::scalar(0.0);
            for g in gs {
                let (p2, r2) = rmsprop_step(&p, &Tensor::scalar(g), &r, &hp()).unwrap();
                prop_assert!(r2.item() >= 0.0);
                p = p2;
                r = r2;
            }
        }
    }

    #[test]
    fn par_map_keeps_order() {
        let xs: Vec<usize> = (0..23).collect();
        for t in [1, 2, 4, 7, 30] {
            assert_eq!(par_map(&xs, t, |i, &x| (i, x * 2)), xs.iter().map(|&x| (x, x * 2)).collect::<Vec<_>>());
        }
    }

    #[test]
    fn shuffler_is_a_permutation_per_epoch() {
        let mut s = Shuffler::new(7, 3);
        for epoch in 0..3u64 {
            let mut seen: Vec<usize> = (0..7).map(|i| s.at(epoch * 7 + i)).collect();
            seen.sort();
            assert_eq!(seen, (0..7).collect::<Vec<_>>());
        }
        let mut fresh = Shuffler::new(7, 3);
        assert_eq!(fresh.at(15), s.at(15));
    }

    fn tiny_run(max_iters: u64) -> (Dataset, RunConfig) {
        let ds = generate_dataset(&GenConfig::new(2, 40, DEFAULT_NOISE).with_kinds(&[QuestionKind::WhatColor])).unwrap();
        let mut run = RunConfig::default();
        run.hyper.batch_size = 4;
        run.hyper.max_iters = max_iters;
        run.hyper.log_every = 2;
        run.hyper.learning_rate = 1e-3;
        run.model.modalities = 2;
        run.model.order = 2;
        run.model.fusion = FusionMode::Mcb;
        run.model.d = 8;
        run.model.sketch_dim = 32;
        run.model.n_q = 8;
        (ds, run)
    }

    #[test]
    fn zero_iterations_return_the_initial_model() {
        let (ds, run) = tiny_run(0);
        let out = train_loop(&ds, &run, None, 1, &mut |_| {}).unwrap();
        assert!(out.metrics.is_empty());
        assert_eq!(out.last.model.store, Model::new(model_config(&run, &ds)).unwrap().store);
        assert_eq!(out.last.step, 0);
    }

    #[test]
    fn training_is_deterministic_and_thread_count_free() {
        let (ds, run) = tiny_run(5);
        let a = train_loop(&ds, &run, None, 1, &mut |_| {}).unwrap();
        let b = train_loop(&ds, &run, None, 1, &mut |_| {}).unwrap();
        let c = train_loop(&ds, &run, None, 3, &mut |_| {}).unwrap();
        assert_eq!(metrics_csv(&a.metrics), metrics_csv(&b.metrics));
        assert_eq!(metrics_csv(&a.metrics), metrics_csv(&c.metrics));
        assert_eq!(a.last.model.store, c.last.model.store);
        assert_eq!(a.metrics.iter().map(|r| r.step).collect::<Vec<_>>(), vec![2, 4, 5]);
    }

    #[test]
    fn resume_continues_the_step_counter_and_matches_a_straight_run() {
        let (ds, run) = tiny_run(6);
        let straight = train_loop(&ds, &run, None, 1, &mut |_| {}).unwrap();
        let (_, first_half) = tiny_run(4);
        let half = train_loop(&ds, &first_half, None, 1, &mut |_| {}).unwrap();
        let rest = train_loop(&ds, &run, Some(half.last), 1, &mut |_| {}).unwrap();
        assert_eq!(rest.metrics.iter().map(|r| r.step).collect::<Vec<_>>(), vec![6]);
        assert_eq!(rest.last.model.store, straight.last.model.store);
        assert_eq!(rest.metrics[0], straight.metrics[2]);
    }

    #[test]
    fn resume_rejects_a_different_model() {
        let (ds, run) = tiny_run(2);
        let ck = train_loop(&ds, &run, None, 1, &mut |_| {}).unwrap().last;
        let mut other = run.clone();
        other.model.d = 10;
        assert!(matches!(train_loop(&ds, &other, Some(ck), 1, &mut |_| {}), Err(Error::Incompatible(_))));
    }

    #[test]
    fn non_finite_loss_aborts_with_batch_position() {
        let (ds, run) = tiny_run(3);
        let mut model = Model::new(model_config(&run, &ds)).unwrap();
        let id = model.store.find("classifier.out.b").unwrap();
        let shape = model.store.get(id).shape().to_vec();
        model.store.set(id, Tensor::full(&shape, f64::NAN));
        let ck = Checkpoint {
            model,
            run: None,
            step: 1,
            run_seed: 0,
            best_val: None,
            optimizer: None,
        };
        match train_loop(&ds, &run, Some(ck), 1, &mut |_| {}) {
            Err(Error::NonFinite { step, batch_index, .. }) => {
                assert_eq!(step, 1);
                assert_eq!(batch_index, 0);
            }
            other => panic!("expected a non-finite abort, got {:?}", other.map(|o| o.metrics)),
        }
    }
}
