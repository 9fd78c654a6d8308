//! Dropout masks drawn from a counter-based stream.
//!
//! Each dropout layer gets its own ChaCha8 key derived from `(base_seed, layer name)`;
//! the sample index selects the stream. Mask `t` is therefore a pure function of
//! `(base_seed, layer, t)` and never depends on which worker draws it or when.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::{Layer, ModelGraph};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DropoutMask {
    pub base_seed: u64,
    pub sample_index: u64,
    /// Keep vectors indexed by layer position; `None` for non-dropout layers.
    keeps: Vec<Option<Vec<bool>>>,
}

impl DropoutMask {
    /// Mask that keeps every unit.
    pub fn all_ones(model: &ModelGraph) -> Self {
        let keeps = model
            .layers()
            .iter()
            .enumerate()
            .map(|(l, spec)| match spec.layer {
                Layer::Dropout { .. } => Some(vec![true; model.input_len_of(l)]),
                _ => None,
            })
            .collect();
        Self {
            base_seed: 0,
            sample_index: 0,
            keeps,
        }
    }

    /// Keep vector of layer `l`, if it is a dropout layer.
    pub fn layer(&self, l: usize) -> Option<&[bool]> {
        self.keeps.get(l).and_then(|k| k.as_deref())
    }

    pub fn layer_mut(&mut self, l: usize) -> Option<&mut Vec<bool>> {
        self.keeps.get_mut(l).and_then(|k| k.as_mut())
    }

    pub fn layer_count(&self) -> usize {
        self.keeps.len()
    }

    /// Fraction of kept units over all dropout layers; 1 if there are none.
    pub fn kept_fraction(&self) -> f64 {
        let (kept, total) = self
            .keeps
            .iter()
            .flatten()
            .flat_map(|k| k.iter())
            .fold((0usize, 0usize), |(k, n), &b| (k + b as usize, n + 1));
        if total == 0 {
            1.0
        } else {
            kept as f64 / total as f64
        }
    }
}

fn layer_key(base_seed: u64, layer_name: &str) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(b"mcrp-dropout-v1");
    h.update(base_seed.to_le_bytes());
    h.update((layer_name.len() as u64).to_le_bytes());
    h.update(layer_name.as_bytes());
    h.finalize().into()
}

/// Draws a keep vector of `units` entries for one layer and sample.
pub fn sample_keep_vector(
    base_seed: u64,
    layer_name: &str,
    t: u64,
    units: usize,
    keep_prob: f32,
) -> Vec<bool> {
    if keep_prob >= 1.0 {
        return vec![true; units];
    }
    let mut rng = ChaCha8Rng::from_seed(layer_key(base_seed, layer_name));
    rng.set_stream(t);
    let p = keep_prob as f64;
    (0..units).map(|_| rng.random::<f64>() < p).collect()
}

/// Samples the mask of sample `t` using each layer's declared keep probability.
pub fn sample_mask(model: &ModelGraph, base_seed: u64, t: u64) -> DropoutMask {
    sample_mask_with(model, base_seed, t, None)
}

/// As [`sample_mask`], with an optional keep probability overriding every dropout layer.
pub fn sample_mask_with(
    model: &ModelGraph,
    base_seed: u64,
    t: u64,
    keep_override: Option<f32>,
) -> DropoutMask {
    let keeps = model
        .layers()
        .iter()
        .enumerate()
        .map(|(l, spec)| match spec.layer {
            Layer::Dropout { keep_prob } => Some(sample_keep_vector(
                base_seed,
                &spec.name,
                t,
                model.input_len_of(l),
                keep_override.unwrap_or(keep_prob),
            )),
            _ => None,
        })
        .collect();
    DropoutMask {
        base_seed,
        sample_index: t,
        keeps,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{LayerSpec, ModelGraph};

    fn dropout_net(units: usize, keep_prob: f32) -> ModelGraph {
        ModelGraph::new(
            vec![units],
            vec![
                LayerSpec::new("relu", Layer::Relu),
                LayerSpec::new("drop", Layer::Dropout { keep_prob }),
            ],
            None,
        )
        .unwrap()
    }

    #[test]
    fn keep_all_is_all_ones() {
        let m = dropout_net(64, 1.0);
        let mask = sample_mask(&m, 7, 3);
        assert!(mask.layer(1).unwrap().iter().all(|&k| k));
        assert!(mask.layer(0).is_none());
        assert_eq!(mask, {
            let mut ones = DropoutMask::all_ones(&m);
            ones.base_seed = 7;
            ones.sample_index = 3;
            ones
        });
    }

    #[test]
    fn same_seed_same_mask() {
        let m = dropout_net(500, 0.5);
        assert_eq!(sample_mask(&m, 42, 9), sample_mask(&m, 42, 9));
        assert_ne!(sample_mask(&m, 42, 9), sample_mask(&m, 42, 10));
        assert_ne!(sample_mask(&m, 42, 9), sample_mask(&m, 43, 9));
    }

    #[test]
    fn order_independent() {
        let m = dropout_net(100, 0.5);
        let forward: Vec<_> = (0..20).map(|t| sample_mask(&m, 1, t)).collect();
        let backward: Vec<_> = (0..20).rev().map(|t| sample_mask(&m, 1, t)).collect();
        for (t, mask) in backward.into_iter().rev().enumerate() {
            assert_eq!(mask, forward[t]);
        }
    }

    #[test]
    fn kept_fraction_binomial_bound() {
        // 3 sigma of Binomial(10^4, 0.5) is 150 units, i.e. [0.485, 0.515] < [0.47, 0.53].
        let m = dropout_net(10_000, 0.5);
        for t in 0..5 {
            let f = sample_mask(&m, 0, t).kept_fraction();
            assert!((0.47..=0.53).contains(&f), "t={t} fraction {f}");
        }
    }

    #[test]
    fn override_replaces_declared_probability() {
        let m = dropout_net(1000, 0.5);
        let mask = sample_mask_with(&m, 0, 0, Some(1.0));
        assert_eq!(mask.kept_fraction(), 1.0);
        let mask = sample_mask_with(&m, 0, 0, Some(0.1));
        assert!(mask.kept_fraction() < 0.2);
    }
}
