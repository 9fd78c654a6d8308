use std::fs;
use std::path::Path;
use std::time::Instant;

use mcrp_core::heatmap::{self, Colormap, RenderSpec};
use mcrp_core::{load_model, run_mcrp, McrpRun, SamplingConfig, SeedMode, Tensor};
use serde::{Deserialize, Serialize};

use super::{file_sha256, load_input, parse_target};
use crate::error::CliError;
use crate::{ExplainArgs, ReplayArgs};

const METRICS: &[&str] = &["mean", "variance", "sigma", "snr", "confusion"];

#[derive(Debug, Serialize, Deserialize)]
pub struct Hashed {
    pub path: String,
    pub sha256: String,
}

/// Every flag that affects output bytes.
#[derive(Debug, Serialize, Deserialize)]
pub struct ConfigRecord {
    pub samples: usize,
    pub seed: u64,
    pub keep_prob: Option<f32>,
    pub target: String,
    pub epsilon: f32,
    pub snr_epsilon: f32,
    pub metrics: Vec<String>,
    pub taps: Vec<String>,
    pub raw: bool,
    pub rescale_activations: bool,
    pub alpha: f32,
    pub colormap: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct LeakSummary {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub engine: String,
    pub engine_version: String,
    pub model: Hashed,
    pub image: Hashed,
    pub config: ConfigRecord,
    pub threads: usize,
    pub target_class: Option<usize>,
    pub target_label: Option<String>,
    pub deterministic_logits: Vec<f32>,
    pub predictive_mean: Vec<f32>,
    pub predictive_variance: Vec<f32>,
    pub leak: LeakSummary,
    pub clamp_events: usize,
    pub wall_time_seconds: f64,
    pub outputs: Vec<String>,
}

fn metric<'a>(run: &'a McrpRun, name: &str) -> &'a Tensor {
    let m = &run.maps;
    match name {
        "mean" => &m.mean,
        "variance" => &m.variance,
        "sigma" => &m.sigma,
        "snr" => &m.snr,
        _ => &m.confusion,
    }
}

fn recorded_path(p: &Path) -> String {
    fs::canonicalize(p)
        .unwrap_or_else(|_| p.to_path_buf())
        .to_string_lossy()
        .into_owned()
}

fn write_dump(t: &Tensor, dir: &Path, name: String, outputs: &mut Vec<String>) -> Result<(), CliError> {
    let path = dir.join(&name);
    heatmap::write_tensor_dump(t, &path).map_err(|e| CliError::output(&path, e))?;
    outputs.push(name);
    Ok(())
}

pub fn run(a: &ExplainArgs) -> Result<(), CliError> {
    for m in &a.metrics {
        if !METRICS.contains(&m.as_str()) {
            return Err(CliError::Usage(format!(
                "unknown metric {m:?}; expected one of {METRICS:?}"
            )));
        }
    }
    let colormap = Colormap::parse(&a.colormap)
        .ok_or_else(|| CliError::Usage(format!("unknown colormap {:?}", a.colormap)))?;
    let spec = RenderSpec {
        colormap,
        overlay_alpha: a.alpha,
        ..Default::default()
    };
    spec.validate().map_err(|e| CliError::Usage(e.to_string()))?;

    let started = Instant::now();
    let model = load_model(&a.model)?;
    let model_sha = mcrp_core::model::archive_checksum(&a.model)?;
    let loaded = load_input(&model, &a.image)?;
    let image_sha = file_sha256(&a.image)?;
    let seed_mode = parse_target(&model, &a.target)?;
    let config = SamplingConfig {
        samples: a.samples,
        base_seed: a.seed,
        keep_prob: a.keep_prob,
        epsilon: a.epsilon,
        seed_mode,
        layer_taps: a.taps.clone(),
        normalize: !a.raw,
        rescale_activations: a.rescale_activations,
        snr_epsilon: a.snr_epsilon,
    };
    config.validate()?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(a.threads)
        .build()
        .map_err(|e| CliError::Usage(format!("cannot start {} threads: {e}", a.threads)))?;
    let threads = pool.current_num_threads();
    let run = pool.install(|| run_mcrp(&model, &loaded.input, &config))?;

    fs::create_dir_all(&a.out).map_err(|e| CliError::output(&a.out, e))?;
    let mut outputs = Vec::new();
    for name in &a.metrics {
        let map = metric(&run, name);
        write_dump(map, &a.out, format!("{name}.mcrt"), &mut outputs)?;
        let png = a.out.join(format!("{name}.png"));
        let img =
            heatmap::render_heatmap(map, &loaded.display, &spec).map_err(|e| CliError::output(&png, e))?;
        heatmap::write_png(&img, &png).map_err(|e| CliError::output(&png, e))?;
        outputs.push(format!("{name}.png"));
    }
    for tap in &run.maps.taps {
        write_dump(
            &tap.mean,
            &a.out,
            format!("tap-{}-mean.mcrt", tap.layer),
            &mut outputs,
        )?;
        write_dump(
            &tap.sigma,
            &a.out,
            format!("tap-{}-sigma.mcrt", tap.layer),
            &mut outputs,
        )?;
    }

    let leaks = run.samples.iter().map(|s| s.leak);
    let leak = LeakSummary {
        mean: leaks.clone().sum::<f64>() / run.samples.len() as f64,
        min: leaks.clone().fold(f64::INFINITY, f64::min),
        max: leaks.fold(f64::NEG_INFINITY, f64::max),
    };
    let target_label = run
        .target_class
        .and_then(|k| model.class_labels().map(|l| l[k].clone()));
    outputs.push("manifest.json".into());
    let manifest = RunManifest {
        engine: "mcrp".into(),
        engine_version: mcrp_core::VERSION.into(),
        model: Hashed {
            path: recorded_path(&a.model),
            sha256: model_sha,
        },
        image: Hashed {
            path: recorded_path(&a.image),
            sha256: image_sha,
        },
        config: ConfigRecord {
            samples: config.samples,
            seed: config.base_seed,
            keep_prob: config.keep_prob,
            target: a.target.clone(),
            epsilon: config.epsilon,
            snr_epsilon: config.snr_epsilon,
            metrics: a.metrics.clone(),
            taps: a.taps.clone(),
            raw: a.raw,
            rescale_activations: a.rescale_activations,
            alpha: a.alpha,
            colormap: a.colormap.clone(),
        },
        threads,
        target_class: run.target_class,
        target_label: target_label.clone(),
        deterministic_logits: run.deterministic_logits.data().to_vec(),
        predictive_mean: run.maps.predictive_mean.data().to_vec(),
        predictive_variance: run.maps.predictive_variance.data().to_vec(),
        leak,
        clamp_events: run.clamp_events,
        wall_time_seconds: started.elapsed().as_secs_f64(),
        outputs,
    };
    let path = a.out.join("manifest.json");
    let mut json = serde_json::to_string_pretty(&manifest).map_err(|e| CliError::output(&path, e))?;
    json.push('\n');
    fs::write(&path, json).map_err(|e| CliError::output(&path, e))?;

    let target = match (config.seed_mode, run.target_class) {
        (SeedMode::FullOutput, _) | (_, None) => "all outputs".to_string(),
        (_, Some(k)) => match &target_label {
            Some(l) => format!("class {k} ({l})"),
            None => format!("class {k}"),
        },
    };
    println!(
        "explained {target} with {} samples in {:.2}s; wrote {} files to {}",
        config.samples,
        manifest.wall_time_seconds,
        manifest.outputs.len(),
        a.out.display()
    );
    Ok(())
}

/// Re-runs an earlier `explain` from its manifest, refusing if the model or image changed.
pub fn replay(r: &ReplayArgs) -> Result<(), CliError> {
    let text = fs::read_to_string(&r.manifest)
        .map_err(|e| CliError::Usage(format!("{}: {e}", r.manifest.display())))?;
    let m: RunManifest =
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", r.manifest.display())))?;
    let model_sha = mcrp_core::model::archive_checksum(&m.model.path)?;
    if model_sha != m.model.sha256 {
        return Err(CliError::Engine(format!(
            "model {} no longer matches its recorded checksum",
            m.model.path
        )));
    }
    if file_sha256(Path::new(&m.image.path))? != m.image.sha256 {
        return Err(CliError::Engine(format!(
            "image {} no longer matches its recorded checksum",
            m.image.path
        )));
    }
    let c = m.config;
    run(&ExplainArgs {
        model: m.model.path.into(),
        image: m.image.path.into(),
        samples: c.samples,
        keep_prob: c.keep_prob,
        seed: c.seed,
        target: c.target,
        epsilon: c.epsilon,
        snr_epsilon: c.snr_epsilon,
        metrics: c.metrics,
        taps: c.taps,
        out: r.out.clone(),
        raw: c.raw,
        rescale_activations: c.rescale_activations,
        threads: r.threads,
        alpha: c.alpha,
        colormap: c.colormap,
    })
}
