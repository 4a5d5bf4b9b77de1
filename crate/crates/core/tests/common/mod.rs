#![allow(dead_code)]

use rand::seq::SliceRandom;
use rand::Rng;
use setcomplete::data::GenConfig;
use setcomplete::layers::AttentionConfig;
use setcomplete::matching::MatchConfig;
use setcomplete::model::ModelConfig;
use setcomplete::set::FeatureSet;
use setcomplete::tensor::Tensor;

pub fn small_attention() -> AttentionConfig {
    AttentionConfig {
        dim: 8,
        heads: 2,
        ff_hidden: 8,
    }
}

pub fn small_model(categories: usize) -> ModelConfig {
    ModelConfig {
        attention: small_attention(),
        slot_layers: 2,
        sab_layers: 1,
        st_layers: 1,
        categories,
    }
}

pub fn small_matcher() -> MatchConfig {
    MatchConfig {
        attention: small_attention(),
        encoder_layers: 1,
        head_hidden: 8,
    }
}

pub fn tiny_data(seed: u64) -> GenConfig {
    GenConfig {
        categories: 6,
        styles: 3,
        catalog_size: 150,
        outfits: 200,
        dim: 8,
        min_items: 3,
        max_items: 5,
        seed,
        ..GenConfig::default()
    }
}

pub fn unit_set<R: Rng>(rng: &mut R, n: usize, dim: usize) -> FeatureSet {
    FeatureSet::new(Tensor::randn(n, dim, 0.0, 1.0, rng).normalize_rows())
}

pub fn gaussian_set<R: Rng>(rng: &mut R, n: usize, dim: usize) -> FeatureSet {
    FeatureSet::new(Tensor::randn(n, dim, 0.0, 1.0, rng))
}

pub fn permutation<R: Rng>(rng: &mut R, n: usize) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(rng);
    p
}

pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.max_abs_diff(b)
}
