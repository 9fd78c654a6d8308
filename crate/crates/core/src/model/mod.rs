//! Layer graph and the stochastic forward pass.

mod archive;
mod mask;

use std::fmt;

use thiserror::Error;

use crate::tensor::{self, ArgmaxIndex, ConvGeometry, Tensor, TensorError};

pub use archive::{
    archive_checksum, encode_model, load_model, load_model_bytes, save_model, save_model_zip, BlobRef,
    Hyperparams, LayerEntry, Manifest, FORMAT_MAGIC, FORMAT_VERSION,
};
pub use mask::{sample_keep_vector, sample_mask, sample_mask_with, DropoutMask};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("zip archive: {0}")]
    Zip(String),
    #[error("manifest is not valid JSON: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("bad archive magic {found:?}, expected {FORMAT_MAGIC:?}")]
    BadMagic { found: String },
    #[error("unsupported archive format version {0}")]
    UnsupportedVersion(u32),
    #[error("layer {layer:?}: unknown layer kind {kind:?}")]
    UnknownLayerKind { layer: String, kind: String },
    #[error("layer {layer:?}: missing blob {blob:?}")]
    MissingBlob { layer: String, blob: String },
    #[error("layer {layer:?}: blob {blob:?} spans bytes {offset}..{end} but weights.bin has {available}")]
    TruncatedBlob {
        layer: String,
        blob: String,
        offset: u64,
        end: u64,
        available: u64,
    },
    #[error("layer {layer:?}: blob {blob:?} of {bytes} bytes does not hold shape {shape:?}")]
    BlobLength {
        layer: String,
        blob: String,
        bytes: u64,
        shape: Vec<usize>,
    },
    #[error("layer {layer:?}: {detail}")]
    Shape { layer: String, detail: String },
    #[error("layer {layer:?}: invalid hyperparameter: {detail}")]
    Hyperparam { layer: String, detail: String },
    #[error("duplicate layer name {0:?}")]
    DuplicateName(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LayerKind {
    Dense,
    Conv2d,
    MaxPool2d,
    Relu,
    Flatten,
    Dropout,
}

impl LayerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LayerKind::Dense => "dense",
            LayerKind::Conv2d => "conv2d",
            LayerKind::MaxPool2d => "maxpool2d",
            LayerKind::Relu => "relu",
            LayerKind::Flatten => "flatten",
            LayerKind::Dropout => "dropout",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "dense" => LayerKind::Dense,
            "conv2d" => LayerKind::Conv2d,
            "maxpool2d" => LayerKind::MaxPool2d,
            "relu" => LayerKind::Relu,
            "flatten" => LayerKind::Flatten,
            "dropout" => LayerKind::Dropout,
            _ => return None,
        })
    }
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    /// `weights` is `[in, out]`, `bias` is `[out]`.
    Dense {
        weights: Tensor,
        bias: Option<Tensor>,
    },
    /// `kernels` is `[K, C, kh, kw]`, `bias` is `[K]`.
    Conv2d {
        kernels: Tensor,
        bias: Option<Tensor>,
        stride: usize,
        padding: usize,
    },
    MaxPool2d {
        window: usize,
        stride: usize,
    },
    Relu,
    Flatten,
    Dropout {
        keep_prob: f32,
    },
}

impl Layer {
    pub fn kind(&self) -> LayerKind {
        match self {
            Layer::Dense { .. } => LayerKind::Dense,
            Layer::Conv2d { .. } => LayerKind::Conv2d,
            Layer::MaxPool2d { .. } => LayerKind::MaxPool2d,
            Layer::Relu => LayerKind::Relu,
            Layer::Flatten => LayerKind::Flatten,
            Layer::Dropout { .. } => LayerKind::Dropout,
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            Layer::Dense { weights, bias } => weights.len() + bias.as_ref().map_or(0, Tensor::len),
            Layer::Conv2d { kernels, bias, .. } => kernels.len() + bias.as_ref().map_or(0, Tensor::len),
            _ => 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub name: String,
    pub layer: Layer,
}

impl LayerSpec {
    pub fn new(name: impl Into<String>, layer: Layer) -> Self {
        Self {
            name: name.into(),
            layer,
        }
    }

    pub fn kind(&self) -> LayerKind {
        self.layer.kind()
    }
}

/// Output shape of `layer` applied to `input`, checking weight/bias consistency.
fn infer_output_shape(spec: &LayerSpec, input: &[usize]) -> Result<Vec<usize>, ModelError> {
    let shape_err = |detail: String| ModelError::Shape {
        layer: spec.name.clone(),
        detail,
    };
    let hyper_err = |detail: String| ModelError::Hyperparam {
        layer: spec.name.clone(),
        detail,
    };
    match &spec.layer {
        Layer::Dense { weights, bias } => {
            let (n_in, n_out) = match weights.shape() {
                &[i, o] => (i, o),
                s => return Err(shape_err(format!("dense weights must be [in,out], got {s:?}"))),
            };
            if input != [n_in] {
                return Err(shape_err(format!(
                    "dense layer expects input [{n_in}], previous layer produces {input:?}"
                )));
            }
            if let Some(b) = bias {
                if b.shape() != [n_out] {
                    return Err(shape_err(format!(
                        "dense bias {:?} does not match {n_out} outputs",
                        b.shape()
                    )));
                }
            }
            Ok(vec![n_out])
        }
        Layer::Conv2d {
            kernels,
            bias,
            stride,
            padding,
        } => {
            if *stride == 0 {
                return Err(hyper_err("stride must be positive".into()));
            }
            let geom = ConvGeometry::new(input, kernels.shape(), *stride, *padding)
                .map_err(|e| shape_err(e.to_string()))?;
            if let Some(b) = bias {
                if b.shape() != [geom.kernels] {
                    return Err(shape_err(format!(
                        "conv bias {:?} does not match {} kernels",
                        b.shape(),
                        geom.kernels
                    )));
                }
            }
            Ok(geom.output_shape().to_vec())
        }
        Layer::MaxPool2d { window, stride } => {
            if *window == 0 || *stride == 0 {
                return Err(hyper_err("window and stride must be positive".into()));
            }
            let (c, h, w) = match input {
                &[c, h, w] => (c, h, w),
                s => return Err(shape_err(format!("max-pool input must be [C,H,W], got {s:?}"))),
            };
            match (
                tensor::window_extent(h, *window, *stride, 0),
                tensor::window_extent(w, *window, *stride, 0),
            ) {
                (Some(oh), Some(ow)) => Ok(vec![c, oh, ow]),
                _ => Err(shape_err(format!(
                    "max-pool window {window} stride {stride} does not tile {h}x{w}"
                ))),
            }
        }
        Layer::Relu => Ok(input.to_vec()),
        Layer::Flatten => Ok(vec![input.iter().product()]),
        Layer::Dropout { keep_prob } => {
            if !(*keep_prob > 0.0 && *keep_prob <= 1.0) {
                return Err(hyper_err(format!("keep probability {keep_prob} outside (0, 1]")));
            }
            Ok(input.to_vec())
        }
    }
}

/// Validated, immutable layer graph.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph {
    input_shape: Vec<usize>,
    layers: Vec<LayerSpec>,
    class_labels: Option<Vec<String>>,
    /// Shapes at each layer boundary; `boundary_shapes[0]` is the input.
    boundary_shapes: Vec<Vec<usize>>,
}

impl ModelGraph {
    pub fn new(
        input_shape: Vec<usize>,
        layers: Vec<LayerSpec>,
        class_labels: Option<Vec<String>>,
    ) -> Result<Self, ModelError> {
        if input_shape.is_empty() || input_shape.contains(&0) {
            return Err(ModelError::Shape {
                layer: "<input>".into(),
                detail: format!("input shape {input_shape:?} must have positive extents"),
            });
        }
        let mut seen = std::collections::HashSet::new();
        let mut boundary_shapes = vec![input_shape.clone()];
        for spec in &layers {
            if !seen.insert(spec.name.as_str()) {
                return Err(ModelError::DuplicateName(spec.name.clone()));
            }
            let next = infer_output_shape(spec, boundary_shapes.last().unwrap())?;
            boundary_shapes.push(next);
        }
        if let Some(labels) = &class_labels {
            let out: usize = boundary_shapes.last().unwrap().iter().product();
            if labels.len() != out {
                return Err(ModelError::Shape {
                    layer: "<output>".into(),
                    detail: format!("{} class labels for {out} outputs", labels.len()),
                });
            }
        }
        Ok(Self {
            input_shape,
            layers,
            class_labels,
            boundary_shapes,
        })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> &[usize] {
        self.boundary_shapes.last().unwrap()
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn class_labels(&self) -> Option<&[String]> {
        self.class_labels.as_deref()
    }

    /// Shape entering layer `l` (`l == layers().len()` gives the output shape).
    pub fn boundary_shape(&self, l: usize) -> &[usize] {
        &self.boundary_shapes[l]
    }

    pub(crate) fn input_len_of(&self, l: usize) -> usize {
        self.boundary_shapes[l].iter().product()
    }

    pub fn layer_index(&self, name: &str) -> Option<usize> {
        self.layers.iter().position(|s| s.name == name)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|s| s.layer.param_count()).sum()
    }
}

/// How dropout layers treat kept units during the forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DropoutScaling {
    /// Multiply by the 0/1 mask only.
    #[default]
    Plain,
    /// Multiply kept units by `1/keep_prob`.
    Inverted,
}

#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// `activations[0]` is the input, `activations[L]` the logits.
    pub activations: Vec<Tensor>,
    pub mask: DropoutMask,
    /// Pool winners, indexed by layer; `None` for non-pool layers.
    pub argmax_indices: Vec<Option<ArgmaxIndex>>,
}

impl ForwardTrace {
    pub fn logits(&self) -> &Tensor {
        self.activations.last().unwrap()
    }
}

fn add_bias_per_channel(out: &mut Tensor, bias: &Tensor) {
    let per = out.len() / bias.len();
    for (chunk, &b) in out.data_mut().chunks_mut(per).zip(bias.data()) {
        chunk.iter_mut().for_each(|v| *v += b);
    }
}

pub fn forward(model: &ModelGraph, input: &Tensor, mask: &DropoutMask) -> Result<ForwardTrace, ModelError> {
    forward_scaled(model, input, mask, DropoutScaling::Plain)
}

pub fn forward_scaled(
    model: &ModelGraph,
    input: &Tensor,
    mask: &DropoutMask,
    scaling: DropoutScaling,
) -> Result<ForwardTrace, ModelError> {
    if input.shape() != model.input_shape() {
        return Err(TensorError::Dimension(format!(
            "input shape {:?} does not match model input {:?}",
            input.shape(),
            model.input_shape()
        ))
        .into());
    }
    if mask.layer_count() != model.layers().len() {
        return Err(TensorError::Dimension(format!(
            "mask covers {} layers, model has {}",
            mask.layer_count(),
            model.layers().len()
        ))
        .into());
    }
    let mut activations = Vec::with_capacity(model.layers().len() + 1);
    let mut argmax_indices = Vec::with_capacity(model.layers().len());
    activations.push(input.clone());
    for (l, spec) in model.layers().iter().enumerate() {
        let x = &activations[l];
        let mut pool = None;
        let y = match &spec.layer {
            Layer::Dense { weights, bias } => {
                let n_out = weights.shape()[1];
                let mut out = vec![0.0f32; n_out];
                tensor::gemm(x.data(), weights.data(), &mut out, 1, x.len(), n_out);
                if let Some(b) = bias {
                    out.iter_mut().zip(b.data()).for_each(|(o, &b)| *o += b);
                }
                Tensor::vector(out)
            }
            Layer::Conv2d {
                kernels,
                bias,
                stride,
                padding,
            } => {
                let mut out = tensor::conv2d(x, kernels, *stride, *padding)?;
                if let Some(b) = bias {
                    add_bias_per_channel(&mut out, b);
                }
                out
            }
            Layer::MaxPool2d { window, stride } => {
                let (out, idx) = tensor::maxpool2d(x, *window, *stride)?;
                pool = Some(idx);
                out
            }
            Layer::Relu => tensor::relu(x),
            Layer::Flatten => x.clone().reshape(&[x.len()])?,
            Layer::Dropout { keep_prob } => {
                let keep = mask.layer(l).ok_or_else(|| {
                    TensorError::Dimension(format!("mask has no entry for dropout layer {}", spec.name))
                })?;
                if keep.len() != x.len() {
                    return Err(TensorError::Dimension(format!(
                        "mask for {} has {} units, layer has {}",
                        spec.name,
                        keep.len(),
                        x.len()
                    ))
                    .into());
                }
                let scale = match scaling {
                    DropoutScaling::Plain => 1.0,
                    DropoutScaling::Inverted => 1.0 / keep_prob,
                };
                let mut out = x.clone();
                for (v, &k) in out.data_mut().iter_mut().zip(keep) {
                    *v = if k { *v * scale } else { 0.0 };
                }
                out
            }
        };
        argmax_indices.push(pool);
        activations.push(y);
    }
    Ok(ForwardTrace {
        activations,
        mask: mask.clone(),
        argmax_indices,
    })
}

/// Logits with dropout disabled.
pub fn predict_deterministic(model: &ModelGraph, input: &Tensor) -> Result<Tensor, ModelError> {
    let trace = forward(model, input, &DropoutMask::all_ones(model))?;
    Ok(trace.activations.into_iter().last().unwrap())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dense(name: &str, n_in: usize, n_out: usize, w: Vec<f32>, b: Vec<f32>) -> LayerSpec {
        LayerSpec::new(
            name,
            Layer::Dense {
                weights: Tensor::new(vec![n_in, n_out], w).unwrap(),
                bias: Some(Tensor::vector(b)),
            },
        )
    }

    fn small_net(keep_prob: f32) -> ModelGraph {
        ModelGraph::new(
            vec![2],
            vec![
                dense(
                    "fc1",
                    2,
                    3,
                    vec![1.0, -1.0, 0.5, 2.0, 1.0, -0.5],
                    vec![0.1, 0.2, 0.3],
                ),
                LayerSpec::new("relu1", Layer::Relu),
                LayerSpec::new("drop1", Layer::Dropout { keep_prob }),
                dense("fc2", 3, 2, vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0], vec![0.0, 0.0]),
            ],
            None,
        )
        .unwrap()
    }

    #[test]
    fn shape_chain_checked() {
        let bad = ModelGraph::new(
            vec![3],
            vec![dense("fc1", 2, 3, vec![0.0; 6], vec![0.0; 3])],
            None,
        );
        assert!(matches!(bad, Err(ModelError::Shape { layer, .. }) if layer == "fc1"));
        let flat = ModelGraph::new(
            vec![1, 4, 4],
            vec![
                LayerSpec::new("flatten", Layer::Flatten),
                dense("fc", 16, 10, vec![0.0; 160], vec![0.0; 10]),
            ],
            None,
        )
        .unwrap();
        assert_eq!(flat.output_shape(), &[10]);
        let dup = ModelGraph::new(
            vec![2],
            vec![LayerSpec::new("a", Layer::Relu), LayerSpec::new("a", Layer::Relu)],
            None,
        );
        assert!(matches!(dup, Err(ModelError::DuplicateName(_))));
        let p0 = ModelGraph::new(
            vec![2],
            vec![LayerSpec::new("d", Layer::Dropout { keep_prob: 0.0 })],
            None,
        );
        assert!(matches!(p0, Err(ModelError::Hyperparam { .. })));
    }

    #[test]
    fn deterministic_path_repeats() {
        let m = small_net(1.0);
        let x = Tensor::vector(vec![0.5, 1.5]);
        let mask = sample_mask(&m, 3, 0);
        let a = forward(&m, &x, &mask).unwrap();
        let b = forward(&m, &x, &mask).unwrap();
        assert_eq!(a.activations, b.activations);
        assert_eq!(predict_deterministic(&m, &x).unwrap(), *a.logits());
    }

    #[test]
    fn dropping_all_hidden_units_kills_logits() {
        let m = small_net(0.5);
        let mut mask = DropoutMask::all_ones(&m);
        mask.layer_mut(2).unwrap().iter_mut().for_each(|k| *k = false);
        let x = Tensor::vector(vec![0.5, 1.5]);
        let trace = forward(&m, &x, &mask).unwrap();
        assert!(trace.logits().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn inverted_scaling_divides_by_keep_prob() {
        let m = small_net(0.5);
        let x = Tensor::vector(vec![1.0, 1.0]);
        let mask = DropoutMask::all_ones(&m);
        let plain = forward(&m, &x, &mask).unwrap();
        let inv = forward_scaled(&m, &x, &mask, DropoutScaling::Inverted).unwrap();
        for (p, i) in plain.activations[3].data().iter().zip(inv.activations[3].data()) {
            assert!((p * 2.0 - i).abs() < 1e-6);
        }
    }

    #[test]
    fn input_shape_mismatch() {
        let m = small_net(1.0);
        let err = forward(&m, &Tensor::vector(vec![1.0; 3]), &DropoutMask::all_ones(&m));
        assert!(matches!(err, Err(ModelError::Tensor(TensorError::Dimension(_)))));
    }

    #[test]
    fn permuting_output_columns_permutes_logits() {
        let x = Tensor::vector(vec![0.3, 0.9]);
        let m = small_net(1.0);
        let mut layers = m.layers().to_vec();
        // swap the two output columns of fc2
        if let Layer::Dense { weights, .. } = &mut layers[3].layer {
            let d = weights.data_mut();
            for r in 0..3 {
                d.swap(r * 2, r * 2 + 1);
            }
        }
        let swapped = ModelGraph::new(vec![2], layers, None).unwrap();
        let a = predict_deterministic(&m, &x).unwrap();
        let b = predict_deterministic(&swapped, &x).unwrap();
        assert_eq!(a.data()[0], b.data()[1]);
        assert_eq!(a.data()[1], b.data()[0]);
    }
}
