//! Run configuration: a flat JSON object of training hyperparameters, model
//! options and paths. Unknown keys and out-of-range values are all reported
//! together.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::decision::FusionMode;
use crate::error::{Error, Result};

/// Optimiser and schedule settings. Defaults are the full-scale values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    pub learning_rate: f64,
    pub rms_alpha: f64,
    pub rms_eps: f64,
    pub batch_size: usize,
    /// Rate after word embeddings, after the LSTM layer and inside the unary
    /// potential units.
    pub dropout_embed: f64,
    /// Rate before the output layer of the classifier.
    pub dropout_last: f64,
    pub max_iters: u64,
    /// Steps between metrics rows.
    pub log_every: u64,
    /// Seeds the model initialisation, shuffling and dropout streams.
    pub seed: u64,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            learning_rate: 4e-4,
            rms_alpha: 0.99,
            rms_eps: 1e-8,
            batch_size: 300,
            dropout_embed: 0.5,
            dropout_last: 0.3,
            max_iters: 180_000,
            log_every: 1000,
            seed: 0,
        }
    }
}

/// Model options that do not depend on the dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelOptions {
    pub modalities: usize,
    pub order: usize,
    pub fusion: FusionMode,
    pub d: usize,
    pub sketch_dim: usize,
    pub n_q: usize,
    /// Classifier hidden width; `None` means `d`.
    pub hidden: Option<usize>,
    pub mean_field_iters: usize,
    pub signed_sqrt: bool,
}

impl Default for ModelOptions {
    fn default() -> Self {
        Self {
            modalities: 3,
            order: 3,
            fusion: FusionMode::Mct,
            d: 512,
            sketch_dim: 8192,
            n_q: 14,
            hidden: None,
            mean_field_iters: 1,
            signed_sqrt: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub dataset: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub resume_from: Option<PathBuf>,
    pub hyper: HyperParams,
    pub model: ModelOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            out_dir: PathBuf::from("run"),
            resume_from: None,
            hyper: HyperParams::default(),
            model: ModelOptions::default(),
        }
    }
}

const KEYS: [&str; 21] = [
    "dataset",
    "out_dir",
    "resume_from",
    "learning_rate",
    "rms_alpha",
    "rms_eps",
    "batch_size",
    "dropout_embed",
    "dropout_last",
    "max_iters",
    "log_every",
    "seed",
    "modalities",
    "order",
    "fusion",
    "d",
    "sketch_dim",
    "n_q",
    "hidden",
    "mean_field_iters",
    "signed_sqrt",
];

struct Reader<'a> {
    map: &'a Map<String, Value>,
    errs: Vec<String>,
}

impl Reader<'_> {
    fn get<T: serde::de::DeserializeOwned>(&mut self, key: &str, default: T) -> T {
        match self.map.get(key) {
            None => default,
            Some(v) => match T::deserialize(v) {
                Ok(x) => x,
                Err(e) => {
                    self.errs.push(format!("{key}: {e}"));
                    default
                }
            },
        }
    }

    fn check(&mut self, ok: bool, msg: impl FnOnce() -> String) {
        if !ok {
            self.errs.push(msg());
        }
    }
}

impl RunConfig {
    pub fn from_json_str(s: &str) -> Result<Self> {
        let v: Value = serde_json::from_str(s)?;
        Self::from_value(&v)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn from_value(v: &Value) -> Result<Self> {
        let Some(map) = v.as_object() else {
            return Err(Error::Config(vec!["config must be a JSON object".into()]));
        };
        let mut r = Reader {
            map,
            errs: Vec::new(),
        };
        for k in map.keys() {
            if !KEYS.contains(&k.as_str()) {
                r.errs.push(format!("unknown key {k:?}"));
            }
        }
        let d = RunConfig::default();
        let (h, m) = (&d.hyper, &d.model);
        let cfg = RunConfig {
            dataset: r.get("dataset", None),
            out_dir: r.get("out_dir", d.out_dir.clone()),
            resume_from: r.get("resume_from", None),
            hyper: HyperParams {
                learning_rate: r.get("learning_rate", h.learning_rate),
                rms_alpha: r.get("rms_alpha", h.rms_alpha),
                rms_eps: r.get("rms_eps", h.rms_eps),
                batch_size: r.get("batch_size", h.batch_size),
                dropout_embed: r.get("dropout_embed", h.dropout_embed),
                dropout_last: r.get("dropout_last", h.dropout_last),
                max_iters: r.get("max_iters", h.max_iters),
                log_every: r.get("log_every", h.log_every),
                seed: r.get("seed", h.seed),
            },
            model: ModelOptions {
                modalities: r.get("modalities", m.modalities),
                order: r.get("order", m.order),
                fusion: r.get("fusion", m.fusion),
                d: r.get("d", m.d),
                sketch_dim: r.get("sketch_dim", m.sketch_dim),
                n_q: r.get("n_q", m.n_q),
                hidden: r.get("hidden", m.hidden),
                mean_field_iters: r.get("mean_field_iters", m.mean_field_iters),
                signed_sqrt: r.get("signed_sqrt", m.signed_sqrt),
            },
        };
        let (h, m) = (&cfg.hyper, &cfg.model);
        r.check(h.learning_rate > 0.0 && h.learning_rate.is_finite(), || {
            format!("learning_rate must be positive, got {}", h.learning_rate)
        });
        r.check(h.rms_alpha > 0.0 && h.rms_alpha <= 1.0, || {
            format!("rms_alpha must be in (0, 1], got {}", h.rms_alpha)
        });
        r.check(h.rms_eps > 0.0, || format!("rms_eps must be positive, got {}", h.rms_eps));
        r.check(h.batch_size > 0, || "batch_size must be positive".into());
        for (k, v) in [("dropout_embed", h.dropout_embed), ("dropout_last", h.dropout_last)] {
            r.check((0.0..1.0).contains(&v), || format!("{k} must be in [0, 1), got {v}"));
        }
        r.check(h.log_every > 0, || "log_every must be positive".into());
        r.check(m.modalities == 2 || m.modalities == 3, || {
            format!("modalities must be 2 or 3, got {}", m.modalities)
        });
        r.check((1..=3).contains(&m.order), || format!("order must be 1, 2 or 3, got {}", m.order));
        r.check(m.order < 3 || m.modalities == 3, || "order 3 needs modalities = 3".into());
        r.check(m.fusion.arity() == m.modalities, || {
            format!(
                "fusion {} does not fit {} modalities (use mcb for 2, mct or mcb2 for 3)",
                m.fusion.name(),
                m.modalities
            )
        });
        r.check(m.d > 0 && m.d % 2 == 0, || format!("d must be positive and even, got {}", m.d));
        for (k, v) in [
            ("sketch_dim", m.sketch_dim),
            ("n_q", m.n_q),
            ("mean_field_iters", m.mean_field_iters),
            ("hidden", m.hidden.unwrap_or(1)),
        ] {
            r.check(v > 0, || format!("{k} must be positive"));
        }
        if r.errs.is_empty() {
            Ok(cfg)
        } else {
            Err(Error::Config(r.errs))
        }
    }

    /// Flat JSON form accepted by [`RunConfig::from_value`].
    pub fn to_value(&self) -> Value {
        let mut map = Map::new();
        let mut put = |k: &str, v: Value| {
            map.insert(k.to_string(), v);
        };
        let (h, m) = (&self.hyper, &self.model);
        put("dataset", serde_json::to_value(&self.dataset).expect("path"));
        put("out_dir", serde_json::to_value(&self.out_dir).expect("path"));
        put("resume_from", serde_json::to_value(&self.resume_from).expect("path"));
        put("learning_rate", h.learning_rate.into());
        put("rms_alpha", h.rms_alpha.into());
        put("rms_eps", h.rms_eps.into());
        put("batch_size", h.batch_size.into());
        put("dropout_embed", h.dropout_embed.into());
        put("dropout_last", h.dropout_last.into());
        put("max_iters", h.max_iters.into());
        put("log_every", h.log_every.into());
        put("seed", h.seed.into());
        put("modalities", m.modalities.into());
        put("order", m.order.into());
        put("fusion", serde_json::to_value(m.fusion).expect("enum"));
        put("d", m.d.into());
        put("sketch_dim", m.sketch_dim.into());
        put("n_q", m.n_q.into());
        put("hidden", serde_json::to_value(m.hidden).expect("option"));
        put("mean_field_iters", m.mean_field_iters.into());
        put("signed_sqrt", m.signed_sqrt.into());
        Value::Object(map)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_gives_defaults() {
        let c = RunConfig::from_json_str("{}").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.hyper.learning_rate, 4e-4);
        assert_eq!(c.hyper.rms_alpha, 0.99);
        assert_eq!(c.hyper.rms_eps, 1e-8);
        assert_eq!(c.hyper.batch_size, 300);
        assert_eq!(c.hyper.dropout_embed, 0.5);
        assert_eq!(c.hyper.dropout_last, 0.3);
        assert_eq!(c.model.d, 512);
        assert_eq!(c.model.sketch_dim, 8192);
    }

    #[test]
    fn every_bad_key_is_listed() {
        let err = RunConfig::from_json_str(
            r#"{"lr": 1, "depth": 3, "order": 7, "batch_size": -1, "fusion": "sum"}"#,
        )
        .unwrap_err();
        let Error::Config(msgs) = err else { panic!() };
        let text = msgs.join("\n");
        for needle in ["\"lr\"", "\"depth\"", "order", "batch_size", "fusion"] {
            assert!(text.contains(needle), "{needle} missing from {text}");
        }
    }

    #[test]
    fn value_round_trip() {
        let mut c = RunConfig::default();
        c.dataset = Some("data".into());
        c.model.fusion = FusionMode::Mcb;
        c.model.modalities = 2;
        c.model.order = 2;
        c.model.hidden = Some(16);
        c.hyper.seed = 9;
        assert_eq!(RunConfig::from_value(&c.to_value()).unwrap(), c);
    }

    #[test]
    fn fusion_must_fit_modalities() {
        assert!(RunConfig::from_json_str(r#"{"modalities": 2, "order": 2}"#).is_err());
        assert!(RunConfig::from_json_str(r#"{"modalities": 2, "order": 2, "fusion": "mcb"}"#).is_ok());
    }
}
