//! Inverted dropout with masks derived from `(seed, step, slot, site)`.

use rand::Rng;

use crate::rng::{stream, tag};
use crate::tensor::Tensor;

/// Where in the network a mask is applied.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Site {
    WordEmbedding = 0,
    Lstm = 1,
    UnaryImage = 2,
    UnaryQuestion = 3,
    UnaryAnswer = 4,
    LastLayer = 5,
}

/// Mask with entries `0` (probability `rate`) or `1/(1 − rate)`.
pub fn dropout_mask(shape: &[usize], rate: f64, seed: u64, step: u64, site: u64) -> Tensor {
    assert!((0.0..1.0).contains(&rate), "dropout rate {rate} outside [0, 1)");
    let n = shape.iter().product();
    if rate == 0.0 {
        return Tensor::ones(shape);
    }
    let keep = 1.0 / (1.0 - rate);
    let mut rng = stream(&[tag::DROPOUT, seed, step, site]);
    let data = (0..n)
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
        .collect();
    Tensor::from_parts(shape.to_vec(), data)
}

/// Dropout configuration for one training example.
#[derive(Clone, Copy, Debug)]
pub struct DropoutPlan {
    pub embed_rate: f64,
    pub last_rate: f64,
    pub seed: u64,
    pub step: u64,
    /// Position of the example within its minibatch.
    pub slot: u64,
}

impl DropoutPlan {
    pub fn rate(&self, site: Site) -> f64 {
        match site {
            Site::LastLayer => self.last_rate,
            _ => self.embed_rate,
        }
    }

    pub fn mask(&self, site: Site, shape: &[usize]) -> Option<Tensor> {
        let rate = self.rate(site);
        if rate == 0.0 {
            return None;
        }
        let site_key = (self.slot << 8) | site as u64;
        Some(dropout_mask(shape, rate, self.seed, self.step, site_key))
    }
}
