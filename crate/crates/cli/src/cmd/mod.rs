pub mod explain;
pub mod inspect;
pub mod validate;

use std::path::Path;

use mcrp_core::heatmap::{self, RasterImage};
use mcrp_core::{ModelGraph, SeedMode, Tensor};

use crate::error::CliError;

/// Model input tensor plus the resized RGB image used as the heatmap background.
pub struct LoadedInput {
    pub input: Tensor,
    pub display: RasterImage,
}

pub fn load_input(model: &ModelGraph, path: &Path) -> Result<LoadedInput, CliError> {
    let shape = model.input_shape();
    if shape.len() != 3 {
        return Err(CliError::Usage(format!(
            "model input {shape:?} is not an image shape [C,H,W]"
        )));
    }
    let rgb = heatmap::load_image(path, Some((shape[1], shape[2]))).map_err(CliError::Image)?;
    let input = heatmap::to_model_input(&rgb, shape[0]).map_err(CliError::Image)?;
    let display = RasterImage::from_tensor(&rgb).map_err(CliError::Image)?;
    Ok(LoadedInput { input, display })
}

pub fn parse_target(model: &ModelGraph, s: &str) -> Result<SeedMode, CliError> {
    match s {
        "auto" => return Ok(SeedMode::PredictedClass),
        "all" => return Ok(SeedMode::FullOutput),
        _ => {}
    }
    if let Ok(k) = s.parse::<usize>() {
        return Ok(SeedMode::TargetClass(k));
    }
    model
        .class_labels()
        .and_then(|labels| labels.iter().position(|l| l == s))
        .map(SeedMode::TargetClass)
        .ok_or_else(|| CliError::Usage(format!("unknown target {s:?}")))
}

pub fn file_sha256(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path).map_err(|e| {
        CliError::Image(heatmap::HeatmapError::Io {
            path: path.display().to_string(),
            source: e,
        })
    })?;
    Ok(mcrp_core::sha256_hex(&bytes))
}
