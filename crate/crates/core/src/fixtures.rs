//! Small seeded networks and images used by tests, benches and the bundled archives.
//!
//! Every builder is a pure function of its constants, so regenerating the archives
//! under `crates/core/fixtures/` reproduces them byte for byte.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::heatmap::{self, HeatmapError, RasterImage};
use crate::model::{save_model, Layer, LayerSpec, ModelError, ModelGraph};
use crate::tensor::Tensor;

pub const TINY_MLP: &str = "tiny-mlp";
pub const TINY_CNN: &str = "tiny-cnn";
pub const TINY_CNN_POSITIVE: &str = "tiny-cnn-positive";
pub const DEAD_COLUMN: &str = "dead-column";

pub type Builder = fn() -> ModelGraph;

/// `(name, builder)` for every bundled archive.
pub const ALL: &[(&str, Builder)] = &[
    (TINY_MLP, tiny_mlp),
    (TINY_CNN, tiny_cnn),
    (TINY_CNN_POSITIVE, tiny_cnn_positive),
    (DEAD_COLUMN, dead_column),
];

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f32) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-bound..bound))
}

fn he_bound(fan_in: usize) -> f32 {
    (6.0 / fan_in as f32).sqrt()
}

fn dense(rng: &mut ChaCha8Rng, name: &str, n_in: usize, n_out: usize, positive: bool) -> LayerSpec {
    let mut weights = uniform(rng, &[n_in, n_out], he_bound(n_in));
    let mut bias = uniform(rng, &[n_out], 0.05);
    if positive {
        weights = weights.map(f32::abs);
        bias = bias.map(f32::abs);
    }
    LayerSpec::new(
        name,
        Layer::Dense {
            weights,
            bias: Some(bias),
        },
    )
}

fn conv(rng: &mut ChaCha8Rng, name: &str, c_in: usize, c_out: usize, positive: bool) -> LayerSpec {
    let mut kernels = uniform(rng, &[c_out, c_in, 3, 3], he_bound(c_in * 9));
    let mut bias = uniform(rng, &[c_out], 0.05);
    if positive {
        kernels = kernels.map(f32::abs);
        bias = bias.map(f32::abs);
    }
    LayerSpec::new(
        name,
        Layer::Conv2d {
            kernels,
            bias: Some(bias),
            stride: 1,
            padding: 1,
        },
    )
}

/// `flatten -> fc1 (16->10) -> relu -> dropout(0.5)` on a `[1,4,4]` input.
pub fn tiny_mlp() -> ModelGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(0x4d4c50);
    ModelGraph::new(
        vec![1, 4, 4],
        vec![
            LayerSpec::new("flatten", Layer::Flatten),
            dense(&mut rng, "fc1", 16, 10, false),
            LayerSpec::new("relu1", Layer::Relu),
            LayerSpec::new("drop1", Layer::Dropout { keep_prob: 0.5 }),
        ],
        None,
    )
    .expect("tiny-mlp is well formed")
}

fn cnn(seed: u64, positive: bool) -> ModelGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ModelGraph::new(
        vec![3, 16, 16],
        vec![
            conv(&mut rng, "conv1", 3, 8, positive),
            LayerSpec::new("relu1", Layer::Relu),
            LayerSpec::new("pool1", Layer::MaxPool2d { window: 2, stride: 2 }),
            conv(&mut rng, "conv2", 8, 8, positive),
            LayerSpec::new("relu2", Layer::Relu),
            LayerSpec::new("pool2", Layer::MaxPool2d { window: 2, stride: 2 }),
            LayerSpec::new("flatten", Layer::Flatten),
            dense(&mut rng, "fc1", 128, 32, positive),
            LayerSpec::new("relu3", Layer::Relu),
            LayerSpec::new("drop1", Layer::Dropout { keep_prob: 0.5 }),
            dense(&mut rng, "fc2", 32, 10, positive),
        ],
        Some((0..10).map(|i| format!("class{i}")).collect()),
    )
    .expect("tiny-cnn is well formed")
}

/// Two conv/relu/pool stages, a 128->32 hidden layer with dropout, and 10 logits.
pub fn tiny_cnn() -> ModelGraph {
    cnn(0x434e4e, false)
}

/// [`tiny_cnn`] architecture with every weight and bias made nonnegative.
pub fn tiny_cnn_positive() -> ModelGraph {
    cnn(0x504f53, true)
}

/// MLP whose hidden unit 2 is driven by its bias alone: all its incoming weights are
/// negative, so the z+ rule cannot pass that unit's relevance on.
pub fn dead_column() -> ModelGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(0x444541);
    let mut fc1 = uniform(&mut rng, &[16, 6], he_bound(16)).map(f32::abs);
    let mut b1 = Tensor::full(&[6], 0.1);
    for i in 0..16 {
        fc1.data_mut()[i * 6 + 2] = -0.05;
    }
    b1.data_mut()[2] = 2.0;
    let fc2 = uniform(&mut rng, &[6, 3], he_bound(6)).map(f32::abs);
    ModelGraph::new(
        vec![1, 4, 4],
        vec![
            LayerSpec::new("flatten", Layer::Flatten),
            LayerSpec::new(
                "fc1",
                Layer::Dense {
                    weights: fc1,
                    bias: Some(b1),
                },
            ),
            LayerSpec::new("relu1", Layer::Relu),
            LayerSpec::new(
                "fc2",
                Layer::Dense {
                    weights: fc2,
                    bias: None,
                },
            ),
        ],
        None,
    )
    .expect("dead-column is well formed")
}

/// Deterministic RGB test image: a bright off-centre blob over a textured background,
/// every value in `[0.05, 1]`.
pub fn image(height: usize, width: usize, seed: u64) -> RasterImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (cy, cx) = (height as f32 * 0.4, width as f32 * 0.6);
    let r2 = (height.min(width) as f32 * 0.3).powi(2);
    let pixels = (0..height * width)
        .map(|p| {
            let (y, x) = ((p / width) as f32, (p % width) as f32);
            let blob = (-((y - cy).powi(2) + (x - cx).powi(2)) / r2).exp();
            let mut px = [0u8; 3];
            for (c, v) in px.iter_mut().enumerate() {
                let texture = 0.15 * ((x * 0.9 + c as f32).sin() * (y * 0.7).cos());
                let noise: f32 = rng.random_range(0.0..0.1);
                let value = (0.2 + 0.65 * blob + texture + noise).clamp(0.05, 1.0);
                *v = (value * 255.0).round() as u8;
            }
            px
        })
        .collect();
    RasterImage::new(width, height, pixels).expect("non-empty image")
}

/// The bundled image for a model input `[C,H,W]`, as the tensor the engine sees.
pub fn input_for(model: &ModelGraph, seed: u64) -> Tensor {
    let shape = model.input_shape();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    heatmap::to_model_input(&image(h, w, seed).to_tensor(), c).expect("fixture inputs have 1 or 3 channels")
}

#[derive(Debug, thiserror::Error)]
pub enum FixtureError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Image(#[from] HeatmapError),
}

/// Writes every archive as `<dir>/<name>/` plus `<dir>/images/{16x16,4x4}.png`.
pub fn write_bundled(dir: &Path) -> Result<(), FixtureError> {
    for (name, build) in ALL {
        save_model(&build(), dir.join(name))?;
    }
    let images = dir.join("images");
    std::fs::create_dir_all(&images).map_err(|source| HeatmapError::Io {
        path: images.display().to_string(),
        source,
    })?;
    heatmap::write_png(&image(16, 16, 7), images.join("16x16.png"))?;
    heatmap::write_png(&image(4, 4, 7), images.join("4x4.png"))?;
    Ok(())
}
