//! Layer-wise relevance propagation with the z+ rule.
//!
//! For a linear layer with nonnegative inputs `x` and positive weight part `w+`,
//! relevance arriving at output `j` is split over inputs in proportion to `x_i * w+_ij`.
//! Biases take no part. Columns whose positive contribution is zero cannot pass their
//! relevance on; that amount is reported as *leak* instead of being redistributed, as is
//! the share absorbed by the `epsilon` stabilizer. Internal accumulation is `f64`.

use thiserror::Error;

use crate::model::{ForwardTrace, Layer, ModelGraph};
use crate::tensor::{ArgmaxIndex, ConvGeometry, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum RelpropError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("target class {class} out of range for {outputs} outputs")]
    TargetOutOfRange { class: usize, outputs: usize },
    #[error("NaN in relevance at boundary {boundary} (layer {layer:?})")]
    NaN { boundary: usize, layer: String },
    #[error("trace does not belong to this model: {0}")]
    TraceMismatch(String),
}

/// Relevance and the amount that could not be redistributed.
#[derive(Debug, Clone, PartialEq)]
pub struct Redistribution {
    pub relevance: Tensor,
    pub leak: f64,
}

/// Redistributes column relevances `r_out[j]` given the column sums `z[j]`.
/// Returns the per-column scale `R_j / (z_j + eps)` (0 for dead columns) and the leak.
fn column_scales(z: &[f64], r_out: &[f32], epsilon: f32) -> (Vec<f64>, f64) {
    let eps = epsilon as f64;
    let mut leak = 0.0f64;
    let scales = z
        .iter()
        .zip(r_out)
        .map(|(&zj, &rj)| {
            let rj = rj as f64;
            if zj > 0.0 {
                let s = rj / (zj + eps);
                leak += rj - zj * s;
                s
            } else {
                leak += rj;
                0.0
            }
        })
        .collect();
    (scales, leak)
}

fn check_mask(mask: Option<&[bool]>, len: usize, what: &str) -> Result<(), TensorError> {
    match mask {
        Some(m) if m.len() != len => Err(TensorError::Dimension(format!(
            "{what} mask has {} entries, expected {len}",
            m.len()
        ))),
        _ => Ok(()),
    }
}

fn masked_input(x: &Tensor, mask_in: Option<&[bool]>) -> Vec<f64> {
    match mask_in {
        Some(m) => x
            .data()
            .iter()
            .zip(m)
            .map(|(&v, &k)| if k { v as f64 } else { 0.0 })
            .collect(),
        None => x.data().iter().map(|&v| v as f64).collect(),
    }
}

fn masked_relevance(r_out: &Tensor, mask_out: Option<&[bool]>) -> (Vec<f32>, f64) {
    match mask_out {
        Some(m) => {
            let mut lost = 0.0;
            let r = r_out
                .data()
                .iter()
                .zip(m)
                .map(|(&v, &k)| {
                    if k {
                        v
                    } else {
                        lost += v as f64;
                        0.0
                    }
                })
                .collect();
            (r, lost)
        }
        None => (r_out.data().to_vec(), 0.0),
    }
}

/// z+ rule for a dense layer with weights `[in, out]`.
///
/// Masked weights are `max(w, 0) * mask_in[i] * mask_out[j]`.
pub fn zplus_dense(
    x: &Tensor,
    weights: &Tensor,
    mask_in: Option<&[bool]>,
    mask_out: Option<&[bool]>,
    r_out: &Tensor,
    epsilon: f32,
) -> Result<Redistribution, TensorError> {
    let (n_in, n_out) = match weights.shape() {
        &[i, o] => (i, o),
        s => {
            return Err(TensorError::Dimension(format!(
                "dense weights must be rank 2, got {s:?}"
            )))
        }
    };
    if x.len() != n_in || r_out.len() != n_out {
        return Err(TensorError::Dimension(format!(
            "z+ dense: input {:?} / relevance {:?} do not fit weights {:?}",
            x.shape(),
            r_out.shape(),
            weights.shape()
        )));
    }
    check_mask(mask_in, n_in, "input")?;
    check_mask(mask_out, n_out, "output")?;

    let xs = masked_input(x, mask_in);
    let (r, masked_leak) = masked_relevance(r_out, mask_out);
    let w = weights.data();

    let mut z = vec![0.0f64; n_out];
    for (i, &xi) in xs.iter().enumerate() {
        if xi == 0.0 {
            continue;
        }
        let row = &w[i * n_out..(i + 1) * n_out];
        for (zj, &wij) in z.iter_mut().zip(row) {
            if wij > 0.0 {
                *zj += xi * wij as f64;
            }
        }
    }
    let (scales, leak) = column_scales(&z, &r, epsilon);
    let relevance: Vec<f32> = xs
        .iter()
        .enumerate()
        .map(|(i, &xi)| {
            if xi == 0.0 {
                return 0.0;
            }
            let row = &w[i * n_out..(i + 1) * n_out];
            let acc: f64 = row
                .iter()
                .zip(&scales)
                .filter(|(&wij, _)| wij > 0.0)
                .map(|(&wij, &s)| wij as f64 * s)
                .sum();
            (xi * acc) as f32
        })
        .collect();
    Ok(Redistribution {
        relevance: Tensor::new(x.shape().to_vec(), relevance)?,
        leak: leak + masked_leak,
    })
}

/// z+ rule for a convolution, computed on the im2col-unrolled linear map.
#[allow(clippy::too_many_arguments)]
pub fn zplus_conv(
    x: &Tensor,
    kernels: &Tensor,
    stride: usize,
    padding: usize,
    mask_in: Option<&[bool]>,
    mask_out: Option<&[bool]>,
    r_out: &Tensor,
    epsilon: f32,
) -> Result<Redistribution, TensorError> {
    let geom = ConvGeometry::new(x.shape(), kernels.shape(), stride, padding)?;
    if r_out.shape() != geom.output_shape() {
        return Err(TensorError::Dimension(format!(
            "z+ conv: relevance {:?} does not match output {:?}",
            r_out.shape(),
            geom.output_shape()
        )));
    }
    check_mask(mask_in, x.len(), "input")?;
    check_mask(mask_out, r_out.len(), "output")?;

    let xs: Vec<f32> = masked_input(x, mask_in).into_iter().map(|v| v as f32).collect();
    let (r, masked_leak) = masked_relevance(r_out, mask_out);
    let cols = geom.im2col(&xs);
    let (k, rows, p) = (geom.kernels, geom.patch_len(), geom.positions());
    let w = kernels.data();

    let mut z = vec![0.0f64; k * p];
    for kk in 0..k {
        let zrow = &mut z[kk * p..(kk + 1) * p];
        for row in 0..rows {
            let wv = w[kk * rows + row];
            if wv <= 0.0 {
                continue;
            }
            for (zv, &c) in zrow.iter_mut().zip(&cols[row * p..(row + 1) * p]) {
                *zv += wv as f64 * c as f64;
            }
        }
    }
    let (scales, leak) = column_scales(&z, &r, epsilon);

    // Rcols[row, pos] = cols[row, pos] * sum_k w+[k, row] * s[k, pos]
    let mut rcols = vec![0.0f64; rows * p];
    for kk in 0..k {
        let srow = &scales[kk * p..(kk + 1) * p];
        for row in 0..rows {
            let wv = w[kk * rows + row];
            if wv <= 0.0 {
                continue;
            }
            for (acc, &s) in rcols[row * p..(row + 1) * p].iter_mut().zip(srow) {
                *acc += wv as f64 * s;
            }
        }
    }
    let mut r_in = vec![0.0f64; x.len()];
    geom.for_each_tap(|row, pos, flat| {
        r_in[flat] += cols[row * p + pos] as f64 * rcols[row * p + pos];
    });
    Ok(Redistribution {
        relevance: Tensor::new(x.shape().to_vec(), r_in.into_iter().map(|v| v as f32).collect())?,
        leak: leak + masked_leak,
    })
}

/// Routes each pooled relevance value to its recorded winner.
pub fn relprop_maxpool(r_out: &Tensor, argmax: &ArgmaxIndex) -> Result<Tensor, TensorError> {
    if r_out.len() != argmax.winners.len() {
        return Err(TensorError::Dimension(format!(
            "pool relevance has {} values, argmax records {}",
            r_out.len(),
            argmax.winners.len()
        )));
    }
    let mut r_in = Tensor::zeros(&argmax.input_shape);
    let data = r_in.data_mut();
    for (&w, &r) in argmax.winners.iter().zip(r_out.data()) {
        data[w] += r;
    }
    Ok(r_in)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum IdentityLike<'a> {
    Relu,
    Flatten { input_shape: &'a [usize] },
    Dropout { keep: &'a [bool] },
}

/// Relevance through ReLU (unchanged), flatten (reshape) and dropout (masked).
pub fn relprop_identitylike(kind: IdentityLike<'_>, r_out: &Tensor) -> Result<Redistribution, TensorError> {
    Ok(match kind {
        IdentityLike::Relu => Redistribution {
            relevance: r_out.clone(),
            leak: 0.0,
        },
        IdentityLike::Flatten { input_shape } => Redistribution {
            relevance: r_out.clone().reshape(input_shape)?,
            leak: 0.0,
        },
        IdentityLike::Dropout { keep } => {
            check_mask(Some(keep), r_out.len(), "dropout")?;
            let (r, lost) = masked_relevance(r_out, Some(keep));
            Redistribution {
                relevance: Tensor::new(r_out.shape().to_vec(), r)?,
                leak: lost,
            }
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeedMode {
    TargetClass(usize),
    PredictedClass,
    FullOutput,
}

/// Relevance injected at the output layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RelevanceSeed {
    pub mode: SeedMode,
    pub values: Tensor,
}

impl RelevanceSeed {
    /// Class modes keep a single entry `max(logit, 0)`; full-output keeps `relu(logits)`.
    pub fn from_logits(mode: SeedMode, logits: &Tensor) -> Result<Self, RelpropError> {
        let class = match mode {
            SeedMode::TargetClass(k) => Some(k),
            SeedMode::PredictedClass => Some(logits.argmax()),
            SeedMode::FullOutput => None,
        };
        let values = match class {
            Some(k) if k >= logits.len() => {
                return Err(RelpropError::TargetOutOfRange {
                    class: k,
                    outputs: logits.len(),
                })
            }
            Some(k) => {
                let mut v = Tensor::zeros(logits.shape());
                v.data_mut()[k] = logits.data()[k].max(0.0);
                v
            }
            None => crate::tensor::relu(logits),
        };
        Ok(Self { mode, values })
    }
}

/// Relevance at every layer boundary of one sample.
#[derive(Debug, Clone)]
pub struct RelevanceTrace {
    /// `relevances[l]` matches `ForwardTrace::activations[l]`; index 0 is the input.
    pub relevances: Vec<Tensor>,
    /// Relevance lost inside layer `l` (between boundaries `l+1` and `l`).
    pub layer_leaks: Vec<f64>,
    pub sample_index: u64,
}

impl RelevanceTrace {
    pub fn input_relevance(&self) -> &Tensor {
        &self.relevances[0]
    }

    pub fn total_leak(&self) -> f64 {
        self.layer_leaks.iter().sum()
    }
}

/// Full backward pass from the seed down to the input.
///
/// Dropout masks enter through the dropout layers themselves: dropped units have zero
/// activation (so they get no relevance from the layer above) and the dropout rule zeroes
/// their incoming relevance, which matches masking the weight columns directly.
pub fn relevance_pass(
    model: &ModelGraph,
    trace: &ForwardTrace,
    seed: &RelevanceSeed,
    epsilon: f32,
) -> Result<RelevanceTrace, RelpropError> {
    let n = model.layers().len();
    if trace.activations.len() != n + 1 {
        return Err(RelpropError::TraceMismatch(format!(
            "{} activations for {n} layers",
            trace.activations.len()
        )));
    }
    if seed.values.shape() != trace.logits().shape() {
        return Err(RelpropError::TraceMismatch(format!(
            "seed shape {:?} vs logits {:?}",
            seed.values.shape(),
            trace.logits().shape()
        )));
    }
    let mut relevances = vec![Tensor::zeros(&[1]); n + 1];
    let mut layer_leaks = vec![0.0f64; n];
    relevances[n] = seed.values.clone();
    for l in (0..n).rev() {
        let spec = &model.layers()[l];
        let x = &trace.activations[l];
        let r_out = &relevances[l + 1];
        let step = match &spec.layer {
            Layer::Dense { weights, .. } => zplus_dense(x, weights, None, None, r_out, epsilon)?,
            Layer::Conv2d {
                kernels,
                stride,
                padding,
                ..
            } => zplus_conv(x, kernels, *stride, *padding, None, None, r_out, epsilon)?,
            Layer::MaxPool2d { .. } => {
                let idx = trace.argmax_indices[l].as_ref().ok_or_else(|| {
                    RelpropError::TraceMismatch(format!("no pool winners for {}", spec.name))
                })?;
                Redistribution {
                    relevance: relprop_maxpool(r_out, idx)?,
                    leak: 0.0,
                }
            }
            Layer::Relu => relprop_identitylike(IdentityLike::Relu, r_out)?,
            Layer::Flatten => relprop_identitylike(
                IdentityLike::Flatten {
                    input_shape: x.shape(),
                },
                r_out,
            )?,
            Layer::Dropout { .. } => {
                let keep = trace
                    .mask
                    .layer(l)
                    .ok_or_else(|| RelpropError::TraceMismatch(format!("no mask for {}", spec.name)))?;
                relprop_identitylike(IdentityLike::Dropout { keep }, r_out)?
            }
        };
        if step.relevance.has_nan() {
            return Err(RelpropError::NaN {
                boundary: l,
                layer: spec.name.clone(),
            });
        }
        layer_leaks[l] = step.leak;
        relevances[l] = step.relevance;
    }
    Ok(RelevanceTrace {
        relevances,
        layer_leaks,
        sample_index: trace.mask.sample_index,
    })
}
