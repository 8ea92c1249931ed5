//! Synthetic grid-VQA: 4×4 scenes of coloured shapes, template questions
//! with four answer candidates, and an exact Bayes oracle.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::embed::{decode_features, encode_features, Vocab};
use crate::error::{Error, Result};
use crate::rng::{stream, tag};
use crate::tensor::Tensor;

pub const GRID_SIDE: usize = 4;
pub const CELLS: usize = GRID_SIDE * GRID_SIDE;
pub const COLORS: [&str; 4] = ["red", "green", "blue", "yellow"];
pub const SHAPES: [&str; 3] = ["circle", "square", "triangle"];
/// Answer classes, indexed by class id.
pub const ANSWER_CLASSES: [&str; 10] = [
    "red", "green", "blue", "yellow", "yes", "no", "0", "1", "2", "3",
];
pub const YES: usize = 4;
pub const NO: usize = 5;
pub const COUNT_BASE: usize = 6;
pub const MAX_COUNT: usize = 3;
pub const CANDIDATES: usize = 4;
/// Question length after padding; the longest template has 6 words.
pub const QUESTION_LEN: usize = 8;
pub const DEFAULT_D_FEAT: usize = 16;
pub const DEFAULT_NOISE: f64 = 0.25;
/// Prototype row for an empty cell.
pub const EMPTY_PROTOTYPE: usize = COLORS.len() * SHAPES.len();

const QUESTION_WORDS: [&str; 17] = [
    "what", "color", "is", "the", "circle", "square", "triangle", "there", "a", "red", "green",
    "blue", "yellow", "how", "many", "objects", "are",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum QuestionKind {
    #[serde(rename = "what-color")]
    WhatColor,
    #[serde(rename = "exists")]
    Exists,
    #[serde(rename = "count-color")]
    CountColor,
}

impl QuestionKind {
    pub const ALL: [QuestionKind; 3] = [
        QuestionKind::WhatColor,
        QuestionKind::Exists,
        QuestionKind::CountColor,
    ];

    pub fn name(self) -> &'static str {
        match self {
            QuestionKind::WhatColor => "what-color",
            QuestionKind::Exists => "exists",
            QuestionKind::CountColor => "count-color",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Object {
    pub color: usize,
    pub shape: usize,
}

impl Object {
    pub fn prototype(self) -> usize {
        self.color * SHAPES.len() + self.shape
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridScene {
    pub cells: Vec<Option<Object>>,
    /// `[16 × d_feat]`, one row per cell in row-major grid order.
    pub features: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QaExample {
    pub id: u64,
    pub scene: GridScene,
    pub question: Vec<String>,
    pub kind: QuestionKind,
    /// Answer-class ids.
    pub candidates: Vec<usize>,
    pub gold: usize,
    pub target_cells: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenConfig {
    pub seed: u64,
    pub n_examples: usize,
    pub noise_sigma: f64,
    pub d_feat: usize,
    pub kinds: Vec<QuestionKind>,
}

impl GenConfig {
    /// All three question kinds at the default feature width.
    pub fn new(seed: u64, n_examples: usize, noise_sigma: f64) -> Self {
        Self {
            seed,
            n_examples,
            noise_sigma,
            d_feat: DEFAULT_D_FEAT,
            kinds: QuestionKind::ALL.to_vec(),
        }
    }

    pub fn with_kinds(mut self, kinds: &[QuestionKind]) -> Self {
        self.kinds = kinds.to_vec();
        self
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: GenConfig,
    /// `[13 × d_feat]`: one row per (colour, shape), then the empty cell.
    pub prototypes: Tensor,
    pub examples: Vec<QaExample>,
}

pub fn question_vocab() -> Vocab {
    Vocab::new(&QUESTION_WORDS).expect("fixed word list is valid")
}

fn round_f32(x: f64) -> f64 {
    f64::from(x as f32)
}

/// Fixed random prototypes for a dataset seed, rounded to `f32` so that
/// feature files store them exactly.
pub fn prototypes(seed: u64, d_feat: usize) -> Tensor {
    let mut rng = stream(&[tag::PROTOTYPES, seed]);
    let data = (0..(EMPTY_PROTOTYPE + 1) * d_feat)
        .map(|_| round_f32(rng.sample::<f64, _>(StandardNormal)))
        .collect();
    Tensor::new(vec![EMPTY_PROTOTYPE + 1, d_feat], data).expect("consistent shape")
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn min_prototype_distance(protos: &Tensor) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..protos.rows() {
        for j in 0..i {
            best = best.min(sq_dist(protos.row(i), protos.row(j)).sqrt());
        }
    }
    best
}

/// Nearest prototype to `row`; ties are an error.
fn decode_cell(row: &[f64], protos: &Tensor) -> Result<usize> {
    let mut d: Vec<(f64, usize)> = (0..protos.rows())
        .map(|p| (sq_dist(row, protos.row(p)), p))
        .collect();
    d.sort_by(|a, b| a.0.total_cmp(&b.0));
    if d[0].0 == d[1].0 {
        return Err(Error::Oracle(format!(
            "cell equidistant from prototypes {} and {}",
            d[0].1, d[1].1
        )));
    }
    Ok(d[0].1)
}

fn prototype_object(p: usize) -> Option<Object> {
    (p != EMPTY_PROTOTYPE).then(|| Object {
        color: p / SHAPES.len(),
        shape: p % SHAPES.len(),
    })
}

fn word_index(words: &[&str], w: &str) -> Result<usize> {
    words
        .iter()
        .position(|x| *x == w)
        .ok_or_else(|| Error::Oracle(format!("unknown word {w:?} in question")))
}

/// Decodes every cell by nearest prototype and answers the question
/// symbolically.
pub fn bayes_oracle(e: &QaExample, protos: &Tensor) -> Result<usize> {
    let mut cells = Vec::with_capacity(CELLS);
    for r in 0..e.scene.features.rows() {
        cells.push(prototype_object(decode_cell(e.scene.features.row(r), protos)?));
    }
    let q: Vec<&str> = e.question.iter().map(String::as_str).collect();
    match q.as_slice() {
        ["what", "color", "is", "the", shape] => {
            let s = word_index(&SHAPES, shape)?;
            let found: Vec<Object> = cells.iter().flatten().filter(|o| o.shape == s).copied().collect();
            match found.as_slice() {
                [o] => Ok(o.color),
                _ => Err(Error::Oracle(format!(
                    "{} objects of shape {shape}; expected exactly one",
                    found.len()
                ))),
            }
        }
        ["is", "there", "a", color, shape] => {
            let want = Object {
                color: word_index(&COLORS, color)?,
                shape: word_index(&SHAPES, shape)?,
            };
            Ok(if cells.contains(&Some(want)) { YES } else { NO })
        }
        ["how", "many", color, "objects", "are", "there"] => {
            let c = word_index(&COLORS, color)?;
            let n = cells.iter().flatten().filter(|o| o.color == c).count();
            if n > MAX_COUNT {
                return Err(Error::Oracle(format!("count {n} has no answer class")));
            }
            Ok(COUNT_BASE + n)
        }
        _ => Err(Error::Oracle(format!("unrecognised question {:?}", e.question))),
    }
}

fn random_scene(rng: &mut ChaCha8Rng) -> Vec<Option<Object>> {
    (0..CELLS)
        .map(|_| {
            rng.random_bool(0.5).then(|| Object {
                color: rng.random_range(0..COLORS.len()),
                shape: rng.random_range(0..SHAPES.len()),
            })
        })
        .collect()
}

/// Prototype plus Gaussian noise per cell; a cell's noise is redrawn until
/// it decodes to its own prototype.
fn render(
    cells: &[Option<Object>],
    protos: &Tensor,
    sigma: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    let d = protos.cols();
    let mut data = Vec::with_capacity(CELLS * d);
    for cell in cells {
        let p = cell.map_or(EMPTY_PROTOTYPE, Object::prototype);
        let base = protos.row(p);
        loop {
            let row: Vec<f64> = if sigma == 0.0 {
                base.to_vec()
            } else {
                base.iter()
                    .map(|&x| round_f32(x + sigma * rng.sample::<f64, _>(StandardNormal)))
                    .collect()
            };
            if decode_cell(&row, protos).ok() == Some(p) {
                data.extend(row);
                break;
            }
        }
    }
    Tensor::new(vec![CELLS, d], data)
}

fn words(s: &str) -> Vec<String> {
    s.split(' ').map(str::to_string).collect()
}

struct Draft {
    question: Vec<String>,
    candidates: Vec<usize>,
    gold: usize,
    target_cells: Vec<usize>,
}

fn cells_where(cells: &[Option<Object>], f: impl Fn(Object) -> bool) -> Vec<usize> {
    (0..cells.len()).filter(|&i| cells[i].is_some_and(&f)).collect()
}

/// A question of `kind` about `cells`, or `None` if the scene cannot host one.
fn draft_question(kind: QuestionKind, cells: &[Option<Object>], rng: &mut ChaCha8Rng) -> Option<Draft> {
    match kind {
        QuestionKind::WhatColor => {
            let unique: Vec<usize> = (0..SHAPES.len())
                .filter(|&s| cells_where(cells, |o| o.shape == s).len() == 1)
                .collect();
            let &s = unique.choose(rng)?;
            let cell = cells_where(cells, |o| o.shape == s)[0];
            let mut candidates: Vec<usize> = (0..COLORS.len()).collect();
            candidates.shuffle(rng);
            Some(Draft {
                question: words(&format!("what color is the {}", SHAPES[s])),
                candidates,
                gold: cells[cell].expect("occupied").color,
                target_cells: vec![cell],
            })
        }
        QuestionKind::Exists => {
            let present: Vec<Object> = cells.iter().flatten().copied().collect();
            let (target, gold) = if rng.random_bool(0.5) {
                let &o = present.choose(rng)?;
                (o, YES)
            } else {
                let mut absent = Vec::new();
                for s in 0..SHAPES.len() {
                    if !present.iter().any(|o| o.shape == s) {
                        continue;
                    }
                    for c in 0..COLORS.len() {
                        let o = Object { color: c, shape: s };
                        if !present.contains(&o) {
                            absent.push(o);
                        }
                    }
                }
                (*absent.choose(rng)?, NO)
            };
            let target_cells = if gold == YES {
                cells_where(cells, |o| o == target)
            } else {
                cells_where(cells, |o| o.shape == target.shape)
            };
            let others: Vec<usize> = (0..ANSWER_CLASSES.len()).filter(|&k| k != YES && k != NO).collect();
            let mut candidates = vec![YES, NO];
            candidates.extend(others.choose_multiple(rng, CANDIDATES - 2));
            candidates.shuffle(rng);
            Some(Draft {
                question: words(&format!("is there a {} {}", COLORS[target.color], SHAPES[target.shape])),
                candidates,
                gold,
                target_cells,
            })
        }
        QuestionKind::CountColor => {
            let ok: Vec<usize> = (0..COLORS.len())
                .filter(|&c| cells_where(cells, |o| o.color == c).len() <= MAX_COUNT)
                .collect();
            let &c = ok.choose(rng)?;
            let target_cells = cells_where(cells, |o| o.color == c);
            let mut candidates: Vec<usize> = (0..=MAX_COUNT).map(|n| COUNT_BASE + n).collect();
            candidates.shuffle(rng);
            Some(Draft {
                question: words(&format!("how many {} objects are there", COLORS[c])),
                candidates,
                gold: COUNT_BASE + target_cells.len(),
                target_cells,
            })
        }
    }
}

fn check_config(cfg: &GenConfig) -> Result<()> {
    let mut errs = Vec::new();
    if cfg.n_examples == 0 {
        errs.push("n_examples must be at least 1".to_string());
    }
    if cfg.d_feat == 0 {
        errs.push("d_feat must be positive".to_string());
    }
    if cfg.kinds.is_empty() {
        errs.push("at least one question kind is needed".to_string());
    }
    if !(cfg.noise_sigma >= 0.0 && cfg.noise_sigma.is_finite()) {
        errs.push(format!("noise_sigma must be finite and >= 0, got {}", cfg.noise_sigma));
    }
    if errs.is_empty() {
        Ok(())
    } else {
        Err(Error::Config(errs))
    }
}

/// Builds the dataset; a pure function of `cfg`. Example `i` depends only on
/// `(cfg, i)`.
pub fn generate_dataset(cfg: &GenConfig) -> Result<Dataset> {
    check_config(cfg)?;
    let protos = prototypes(cfg.seed, cfg.d_feat);
    let half = min_prototype_distance(&protos) / 2.0;
    if cfg.noise_sigma >= half {
        return Err(Error::Oracle(format!(
            "noise_sigma {} is not below half the minimum prototype distance ({half})",
            cfg.noise_sigma
        )));
    }
    let mut examples = Vec::with_capacity(cfg.n_examples);
    for i in 0..cfg.n_examples {
        let mut rng = stream(&[tag::SCENES, cfg.seed, i as u64]);
        let kind = *cfg.kinds.choose(&mut rng).expect("kinds non-empty");
        let (cells, draft) = loop {
            let cells = random_scene(&mut rng);
            if let Some(d) = draft_question(kind, &cells, &mut rng) {
                break (cells, d);
            }
        };
        let features = render(&cells, &protos, cfg.noise_sigma, &mut rng)?;
        let e = QaExample {
            id: i as u64,
            scene: GridScene { cells, features },
            question: draft.question,
            kind,
            candidates: draft.candidates,
            gold: draft.gold,
            target_cells: draft.target_cells,
        };
        let oracle = bayes_oracle(&e, &protos)?;
        if oracle != e.gold {
            return Err(Error::Oracle(format!(
                "example {i}: oracle answers {} but gold is {}",
                ANSWER_CLASSES[oracle], ANSWER_CLASSES[e.gold]
            )));
        }
        examples.push(e);
    }
    Ok(Dataset {
        config: cfg.clone(),
        prototypes: protos,
        examples,
    })
}

// ---- files ---------------------------------------------------------------

pub const EXAMPLES_FILE: &str = "examples.jsonl";
pub const FEATURES_FILE: &str = "features.hoaf";
pub const PROTOTYPES_FILE: &str = "prototypes.hoaf";
pub const META_FILE: &str = "meta.json";
pub const VOCAB_FILE: &str = "vocab.txt";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ExampleRecord {
    id: u64,
    kind: QuestionKind,
    question: Vec<String>,
    cells: Vec<Option<CellRecord>>,
    candidates: Vec<String>,
    gold: String,
    target_cells: Vec<usize>,
    /// First row of this example in the feature file.
    feature_row: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CellRecord {
    color: String,
    shape: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    generator: GenConfig,
    answer_classes: Vec<String>,
    question_len: usize,
    cells: usize,
}

fn class_id(name: &str) -> Result<usize> {
    ANSWER_CLASSES
        .iter()
        .position(|c| *c == name)
        .ok_or_else(|| Error::Lookup(format!("unknown answer class {name:?}")))
}

fn lookup(list: &[&str], name: &str) -> Result<usize> {
    list.iter()
        .position(|c| *c == name)
        .ok_or_else(|| Error::Lookup(format!("unknown name {name:?}")))
}

impl Dataset {
    /// Writes the examples, the concatenated feature grid, the prototypes,
    /// the generator settings and the question vocabulary into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut lines = Vec::new();
        let mut rows = Vec::with_capacity(self.examples.len() * CELLS * self.config.d_feat);
        for (i, e) in self.examples.iter().enumerate() {
            let rec = ExampleRecord {
                id: e.id,
                kind: e.kind,
                question: e.question.clone(),
                cells: e
                    .scene
                    .cells
                    .iter()
                    .map(|c| {
                        c.map(|o| CellRecord {
                            color: COLORS[o.color].to_string(),
                            shape: SHAPES[o.shape].to_string(),
                        })
                    })
                    .collect(),
                candidates: e.candidates.iter().map(|&k| ANSWER_CLASSES[k].to_string()).collect(),
                gold: ANSWER_CLASSES[e.gold].to_string(),
                target_cells: e.target_cells.clone(),
                feature_row: i * CELLS,
            };
            serde_json::to_writer(&mut lines, &rec)?;
            lines.push(b'\n');
            rows.extend_from_slice(e.scene.features.data());
        }
        fs::File::create(dir.join(EXAMPLES_FILE))?.write_all(&lines)?;
        let all = Tensor::new(vec![self.examples.len() * CELLS, self.config.d_feat], rows)?;
        fs::write(dir.join(FEATURES_FILE), encode_features(&all)?)?;
        fs::write(dir.join(PROTOTYPES_FILE), encode_features(&self.prototypes)?)?;
        let meta = Meta {
            generator: self.config.clone(),
            answer_classes: ANSWER_CLASSES.iter().map(|s| s.to_string()).collect(),
            question_len: QUESTION_LEN,
            cells: CELLS,
        };
        let mut m = serde_json::to_vec_pretty(&meta)?;
        m.push(b'\n');
        fs::write(dir.join(META_FILE), m)?;
        question_vocab().save(&dir.join(VOCAB_FILE))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta: Meta = serde_json::from_slice(&fs::read(dir.join(META_FILE))?)?;
        if meta.answer_classes != ANSWER_CLASSES || meta.cells != CELLS {
            return Err(Error::Incompatible(format!(
                "{} was written for a different answer set or grid",
                dir.display()
            )));
        }
        let feats = decode_features(&fs::read(dir.join(FEATURES_FILE))?)?;
        let protos = decode_features(&fs::read(dir.join(PROTOTYPES_FILE))?)?;
        let d = meta.generator.d_feat;
        if feats.cols() != d || protos.cols() != d {
            return Err(Error::Incompatible("feature width differs from meta.json".into()));
        }
        let text = fs::read_to_string(dir.join(EXAMPLES_FILE))?;
        let mut examples = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let rec: ExampleRecord = serde_json::from_str(line).map_err(|e| {
                Error::Lookup(format!("{} line {}: {e}", EXAMPLES_FILE, n + 1))
            })?;
            if rec.cells.len() != CELLS || rec.feature_row + CELLS > feats.rows() {
                return Err(Error::Lookup(format!(
                    "{} line {}: bad cell count or feature row",
                    EXAMPLES_FILE,
                    n + 1
                )));
            }
            let cells = rec
                .cells
                .iter()
                .map(|c| {
                    c.as_ref()
                        .map(|c| {
                            Ok(Object {
                                color: lookup(&COLORS, &c.color)?,
                                shape: lookup(&SHAPES, &c.shape)?,
                            })
                        })
                        .transpose()
                })
                .collect::<Result<Vec<_>>>()?;
            let start = rec.feature_row * d;
            let features = Tensor::new(vec![CELLS, d], feats.data()[start..start + CELLS * d].to_vec())?;
            examples.push(QaExample {
                id: rec.id,
                scene: GridScene { cells, features },
                question: rec.question,
                kind: rec.kind,
                candidates: rec.candidates.iter().map(|c| class_id(c)).collect::<Result<_>>()?,
                gold: class_id(&rec.gold)?,
                target_cells: rec.target_cells,
            });
        }
        Ok(Self {
            config: meta.generator,
            prototypes: protos,
            examples,
        })
    }

    /// Number of leading examples used for training; the rest (20%, at
    /// least one example when there are two or more) is validation.
    pub fn train_len(&self) -> usize {
        let n = self.examples.len();
        if n < 2 {
            return n;
        }
        (n - (n / 5).max(1)).max(1)
    }

    pub fn find(&self, id: u64) -> Option<&QaExample> {
        self.examples.iter().find(|e| e.id == id)
    }

    /// Gold-class histogram per question kind.
    pub fn class_counts(&self) -> BTreeMap<QuestionKind, BTreeMap<usize, usize>> {
        let mut out: BTreeMap<QuestionKind, BTreeMap<usize, usize>> = BTreeMap::new();
        for e in &self.examples {
            *out.entry(e.kind).or_default().entry(e.gold).or_default() += 1;
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64, n: usize) -> Dataset {
        generate_dataset(&GenConfig::new(seed, n, DEFAULT_NOISE)).unwrap()
    }

    #[test]
    fn same_seed_same_files() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        small(5, 60).save(a.path()).unwrap();
        small(5, 60).save(b.path()).unwrap();
        for f in [EXAMPLES_FILE, FEATURES_FILE, PROTOTYPES_FILE, META_FILE, VOCAB_FILE] {
            assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
        }
        let other = tempfile::tempdir().unwrap();
        small(6, 60).save(other.path()).unwrap();
        assert_ne!(
            fs::read(a.path().join(FEATURES_FILE)).unwrap(),
            fs::read(other.path().join(FEATURES_FILE)).unwrap()
        );
    }

    #[test]
    fn save_load_round_trip() {
        let d = small(2, 40);
        let dir = tempfile::tempdir().unwrap();
        d.save(dir.path()).unwrap();
        assert_eq!(Dataset::load(dir.path()).unwrap(), d);
    }

    #[test]
    fn zero_noise_features_are_prototypes() {
        let d = generate_dataset(&GenConfig::new(3, 20, 0.0)).unwrap();
        for e in &d.examples {
            for (r, c) in e.scene.cells.iter().enumerate() {
                let p = c.map_or(EMPTY_PROTOTYPE, Object::prototype);
                assert_eq!(e.scene.features.row(r), d.prototypes.row(p));
            }
        }
    }

    #[test]
    fn oracle_answers_every_example() {
        let d = small(11, 500);
        for e in &d.examples {
            assert_eq!(bayes_oracle(e, &d.prototypes).unwrap(), e.gold);
        }
    }

    #[test]
    fn example_contracts() {
        let d = small(7, 600);
        let vocab = question_vocab();
        for e in &d.examples {
            assert_eq!(e.candidates.len(), CANDIDATES);
            assert!(e.candidates.contains(&e.gold));
            let mut c = e.candidates.clone();
            c.sort();
            c.dedup();
            assert_eq!(c.len(), CANDIDATES);
            assert!(e.question.len() <= QUESTION_LEN);
            assert!(e.question.iter().all(|w| vocab.id(w) > 1));
            match e.kind {
                QuestionKind::WhatColor => {
                    let o = e.scene.cells[e.target_cells[0]].unwrap();
                    assert_eq!(e.target_cells.len(), 1);
                    let same: Vec<_> = e.scene.cells.iter().flatten().filter(|x| x.shape == o.shape).collect();
                    assert_eq!(same.len(), 1);
                    assert_eq!(e.gold, o.color);
                    assert!(c.iter().all(|&k| k < COLORS.len()));
                }
                QuestionKind::Exists => {
                    assert!(!e.target_cells.is_empty());
                    assert!(c.contains(&YES) && c.contains(&NO));
                }
                QuestionKind::CountColor => {
                    assert!(c.iter().all(|&k| k >= COUNT_BASE));
                    assert_eq!(e.gold - COUNT_BASE, e.target_cells.len());
                }
            }
        }
        let kinds = d.class_counts();
        assert_eq!(kinds.len(), 3);
    }

    #[test]
    fn oracle_examples_by_hand() {
        let protos = prototypes(1, DEFAULT_D_FEAT);
        let mut cells = vec![None; CELLS];
        cells[5] = Some(Object { color: 0, shape: 0 });
        cells[9] = Some(Object { color: 2, shape: 1 });
        let rows: Vec<f64> = cells
            .iter()
            .flat_map(|c: &Option<Object>| protos.row(c.map_or(EMPTY_PROTOTYPE, Object::prototype)).to_vec())
            .collect();
        let scene = GridScene {
            cells,
            features: Tensor::new(vec![CELLS, DEFAULT_D_FEAT], rows).unwrap(),
        };
        let ask = |q: &str| QaExample {
            id: 0,
            scene: scene.clone(),
            question: words(q),
            kind: QuestionKind::WhatColor,
            candidates: vec![0, 1, 2, 3],
            gold: 0,
            target_cells: vec![],
        };
        assert_eq!(bayes_oracle(&ask("what color is the circle"), &protos).unwrap(), 0);
        assert_eq!(bayes_oracle(&ask("how many yellow objects are there"), &protos).unwrap(), COUNT_BASE);
        assert_eq!(bayes_oracle(&ask("is there a blue square"), &protos).unwrap(), YES);
        assert_eq!(bayes_oracle(&ask("is there a red square"), &protos).unwrap(), NO);
        assert!(matches!(
            bayes_oracle(&ask("what color is the triangle"), &protos),
            Err(Error::Oracle(_))
        ));
    }

    #[test]
    fn excessive_noise_is_rejected() {
        let cfg = GenConfig::new(1, 5, 10.0);
        assert!(matches!(generate_dataset(&cfg), Err(Error::Oracle(_))));
        assert!(matches!(generate_dataset(&GenConfig::new(1, 0, 0.1)), Err(Error::Config(_))));
    }

    #[test]
    fn kind_filter_and_split() {
        let d = generate_dataset(&GenConfig::new(4, 50, DEFAULT_NOISE).with_kinds(&[QuestionKind::WhatColor])).unwrap();
        assert!(d.examples.iter().all(|e| e.kind == QuestionKind::WhatColor));
        assert_eq!(d.train_len(), 40);
    }
}
