//! The Monte Carlo loop and its estimators.
//!
//! Sample `t` draws dropout mask `t`, runs the forward pass, propagates relevance back
//! through the same subnetwork, averages input relevance over colour channels and
//! min-max normalizes the result. Mean and variance are the biased (`/T`) moments over
//! samples; logits get the same treatment for the predictive mean and variance.

use rayon::prelude::*;
use thiserror::Error;

use crate::model::{
    forward_scaled, predict_deterministic, sample_mask_with, DropoutScaling, ModelError, ModelGraph,
};
use crate::relprop::{relevance_pass, RelevanceSeed, RelpropError, SeedMode};
use crate::tensor::{Tensor, TensorError};

/// Negative variance residue below this is reported, not just clamped.
pub const CLAMP_WARN_THRESHOLD: f64 = -1e-6;

#[derive(Debug, Error)]
pub enum McrpError {
    #[error("invalid sampling config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("sample {sample}: {source}")]
    Relprop {
        sample: u64,
        #[source]
        source: RelpropError,
    },
    #[error("sample {sample}: non-finite values in {what}")]
    NonFinite { sample: u64, what: &'static str },
}

impl McrpError {
    /// True for numerical failures (NaN/Inf) as opposed to configuration or shape errors.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            McrpError::NonFinite { .. }
                | McrpError::Relprop {
                    source: RelpropError::NaN { .. },
                    ..
                }
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplingConfig {
    pub samples: usize,
    pub base_seed: u64,
    /// Overrides every dropout layer's keep probability.
    pub keep_prob: Option<f32>,
    pub epsilon: f32,
    pub seed_mode: SeedMode,
    pub layer_taps: Vec<String>,
    /// Apply min-max normalization to each sample map; off gives raw channel-averaged relevance.
    pub normalize: bool,
    pub rescale_activations: bool,
    pub snr_epsilon: f32,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            samples: 100,
            base_seed: 0,
            keep_prob: None,
            epsilon: 1e-9,
            seed_mode: SeedMode::PredictedClass,
            layer_taps: Vec::new(),
            normalize: true,
            rescale_activations: false,
            snr_epsilon: 1e-6,
        }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<(), McrpError> {
        let bad = |m: String| Err(McrpError::InvalidConfig(m));
        if self.samples == 0 {
            return bad("sample count must be at least 1".into());
        }
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return bad(format!("epsilon {} must be finite and >= 0", self.epsilon));
        }
        if !(self.snr_epsilon >= 0.0 && self.snr_epsilon.is_finite()) {
            return bad(format!(
                "snr epsilon {} must be finite and >= 0",
                self.snr_epsilon
            ));
        }
        if let Some(p) = self.keep_prob {
            if !(p > 0.0 && p <= 1.0) {
                return bad(format!("keep probability {p} outside (0, 1]"));
            }
        }
        Ok(())
    }
}

/// A channel-summed (and optionally normalized) hidden relevance map.
#[derive(Debug, Clone, PartialEq)]
pub struct TapMap {
    pub layer: String,
    pub map: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelevanceSample {
    pub t: u64,
    /// Channel-averaged, normalized input relevance `[H, W]`.
    pub pixel_map: Tensor,
    pub logits: Tensor,
    pub taps: Vec<TapMap>,
    pub leak: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TapStats {
    pub layer: String,
    pub mean: Tensor,
    pub sigma: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyMaps {
    pub mean: Tensor,
    pub variance: Tensor,
    pub sigma: Tensor,
    pub snr: Tensor,
    pub confusion: Tensor,
    pub predictive_mean: Tensor,
    pub predictive_variance: Tensor,
    pub taps: Vec<TapStats>,
}

#[derive(Debug, Clone)]
pub struct McrpRun {
    pub samples: Vec<RelevanceSample>,
    pub maps: UncertaintyMaps,
    /// Class every sample explains; `None` in full-output mode.
    pub target_class: Option<usize>,
    pub deterministic_logits: Tensor,
    /// Variance entries below [`CLAMP_WARN_THRESHOLD`] before clamping.
    pub clamp_events: usize,
}

/// Mean over the channel axis of a `[C, H, W]` map.
pub fn channel_average(r: &Tensor) -> Result<Tensor, TensorError> {
    let (c, h, w) = r.chw()?;
    Ok(channel_reduce(r.data(), c, h, w, 1.0 / c as f64))
}

/// Sum over the channel axis of a `[C, H, W]` map.
pub fn channel_sum(r: &Tensor) -> Result<Tensor, TensorError> {
    let (c, h, w) = r.chw()?;
    Ok(channel_reduce(r.data(), c, h, w, 1.0))
}

fn channel_reduce(data: &[f32], c: usize, h: usize, w: usize, scale: f64) -> Tensor {
    let plane = h * w;
    Tensor::from_fn(&[h, w], |p| {
        let s: f64 = (0..c).map(|ch| data[ch * plane + p] as f64).sum();
        (s * scale) as f32
    })
}

/// Min-max normalization to `[0, 1]`; a constant map becomes all zeros.
pub fn normalize(r: &Tensor) -> Tensor {
    let (lo, hi) = (r.min(), r.max());
    if hi <= lo {
        return Tensor::zeros(r.shape());
    }
    let range = hi as f64 - lo as f64;
    r.map(|v| {
        if v == hi {
            1.0
        } else {
            (((v as f64 - lo as f64) / range) as f32).clamp(0.0, 1.0)
        }
    })
}

/// Biased moments `(mean, variance, clamp_events)` of equal-shape samples.
///
/// Uses the one-pass sum/sum-of-squares estimator on data shifted by the first sample,
/// which leaves both moments unchanged and keeps the result exact when every sample
/// is identical. Negative residues are clamped to 0.
pub fn moments(samples: &[&Tensor]) -> Result<(Tensor, Tensor, usize), TensorError> {
    let first = samples
        .first()
        .ok_or_else(|| TensorError::Dimension("moments of zero samples".into()))?;
    let n = first.len();
    let mut sum = vec![0.0f64; n];
    let mut sumsq = vec![0.0f64; n];
    for s in samples {
        if s.shape() != first.shape() {
            return Err(TensorError::Dimension(format!(
                "sample shapes differ: {:?} vs {:?}",
                s.shape(),
                first.shape()
            )));
        }
        for i in 0..n {
            let d = s.data()[i] as f64 - first.data()[i] as f64;
            sum[i] += d;
            sumsq[i] += d * d;
        }
    }
    let t = samples.len() as f64;
    let mut clamp_events = 0;
    let mut mean = Vec::with_capacity(n);
    let mut var = Vec::with_capacity(n);
    for i in 0..n {
        let m = sum[i] / t;
        mean.push((first.data()[i] as f64 + m) as f32);
        let mut v = sumsq[i] / t - m * m;
        if v < 0.0 {
            if v < CLAMP_WARN_THRESHOLD {
                clamp_events += 1;
            }
            v = 0.0;
        }
        var.push(v as f32);
    }
    let shape = first.shape().to_vec();
    Ok((
        Tensor::new(shape.clone(), mean)?,
        Tensor::new(shape, var)?,
        clamp_events,
    ))
}

/// Predictive mean and variance of logit samples.
pub fn predictive_stats(logits: &[&Tensor]) -> Result<(Tensor, Tensor), TensorError> {
    let (m, v, _) = moments(logits)?;
    Ok((m, v))
}

pub fn snr_map(mean: &Tensor, sigma: &Tensor, snr_epsilon: f32) -> Result<Tensor, TensorError> {
    mean.zip_map(sigma, |m, s| m / (s + snr_epsilon))
}

pub fn confusion_map(mean: &Tensor, sigma: &Tensor) -> Result<Tensor, TensorError> {
    mean.zip_map(sigma, |m, s| m * s)
}

fn hidden_map(r: &Tensor, normalized: bool) -> Result<Tensor, TensorError> {
    let map = if r.rank() == 3 { channel_sum(r)? } else { r.clone() };
    Ok(if normalized { normalize(&map) } else { map })
}

/// Target class for every sample, fixed from the dropout-free logits.
fn resolve_seed_mode(mode: SeedMode, deterministic: &Tensor) -> Result<SeedMode, McrpError> {
    match mode {
        SeedMode::PredictedClass => Ok(SeedMode::TargetClass(deterministic.argmax())),
        SeedMode::TargetClass(k) if k >= deterministic.len() => Err(McrpError::InvalidConfig(format!(
            "target class {k} out of range for {} outputs",
            deterministic.len()
        ))),
        m => Ok(m),
    }
}

fn run_sample(
    model: &ModelGraph,
    input: &Tensor,
    config: &SamplingConfig,
    mode: SeedMode,
    taps: &[(usize, String)],
    t: u64,
) -> Result<RelevanceSample, McrpError> {
    let mask = sample_mask_with(model, config.base_seed, t, config.keep_prob);
    let scaling = if config.rescale_activations {
        DropoutScaling::Inverted
    } else {
        DropoutScaling::Plain
    };
    let trace = forward_scaled(model, input, &mask, scaling)?;
    if !trace.logits().all_finite() {
        return Err(McrpError::NonFinite {
            sample: t,
            what: "logits",
        });
    }
    let seed = RelevanceSeed::from_logits(mode, trace.logits())
        .map_err(|source| McrpError::Relprop { sample: t, source })?;
    let rel = relevance_pass(model, &trace, &seed, config.epsilon)
        .map_err(|source| McrpError::Relprop { sample: t, source })?;
    let r0 = rel.input_relevance();
    let averaged = if r0.rank() == 3 {
        channel_average(r0)?
    } else {
        r0.clone()
    };
    let pixel_map = if config.normalize {
        normalize(&averaged)
    } else {
        averaged
    };
    if !pixel_map.all_finite() {
        return Err(McrpError::NonFinite {
            sample: t,
            what: "relevance map",
        });
    }
    let taps = taps
        .iter()
        .map(|(l, name)| {
            Ok(TapMap {
                layer: name.clone(),
                map: hidden_map(&rel.relevances[l + 1], config.normalize)?,
            })
        })
        .collect::<Result<Vec<_>, TensorError>>()?;
    Ok(RelevanceSample {
        t,
        pixel_map,
        logits: trace.logits().clone(),
        taps,
        leak: rel.total_leak(),
    })
}

/// Runs `config.samples` stochastic relevance passes on the current rayon pool.
///
/// Samples are computed independently and reduced in index order, so the result does not
/// depend on the number of worker threads.
pub fn run_mcrp(model: &ModelGraph, input: &Tensor, config: &SamplingConfig) -> Result<McrpRun, McrpError> {
    config.validate()?;
    let taps = config
        .layer_taps
        .iter()
        .map(|name| {
            model
                .layer_index(name)
                .map(|l| (l, name.clone()))
                .ok_or_else(|| McrpError::InvalidConfig(format!("unknown tap layer {name:?}")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let deterministic_logits = predict_deterministic(model, input)?;
    let mode = resolve_seed_mode(config.seed_mode, &deterministic_logits)?;

    let results: Vec<Result<RelevanceSample, McrpError>> = (0..config.samples as u64)
        .into_par_iter()
        .map(|t| run_sample(model, input, config, mode, &taps, t))
        .collect();
    let samples = results.into_iter().collect::<Result<Vec<_>, _>>()?;

    let maps_ref: Vec<&Tensor> = samples.iter().map(|s| &s.pixel_map).collect();
    let (mean, variance, mut clamp_events) = moments(&maps_ref)?;
    let sigma = variance.map(f32::sqrt);
    let snr = snr_map(&mean, &sigma, config.snr_epsilon)?;
    let confusion = confusion_map(&mean, &sigma)?;

    let logits_ref: Vec<&Tensor> = samples.iter().map(|s| &s.logits).collect();
    let (predictive_mean, predictive_variance) = predictive_stats(&logits_ref)?;

    let mut tap_stats = Vec::with_capacity(taps.len());
    for (i, (_, name)) in taps.iter().enumerate() {
        let maps: Vec<&Tensor> = samples.iter().map(|s| &s.taps[i].map).collect();
        let (m, v, c) = moments(&maps)?;
        clamp_events += c;
        tap_stats.push(TapStats {
            layer: name.clone(),
            mean: m,
            sigma: v.map(f32::sqrt),
        });
    }
    if clamp_events > 0 {
        log::warn!("{clamp_events} variance entries clamped from below {CLAMP_WARN_THRESHOLD}");
    }

    Ok(McrpRun {
        samples,
        maps: UncertaintyMaps {
            mean,
            variance,
            sigma,
            snr,
            confusion,
            predictive_mean,
            predictive_variance,
            taps: tap_stats,
        },
        target_class: match mode {
            SeedMode::TargetClass(k) => Some(k),
            _ => None,
        },
        deterministic_logits,
        clamp_events,
    })
}
