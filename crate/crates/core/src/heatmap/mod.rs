//! Image ingestion, heatmap rendering and raw tensor dumps.

mod dump;
mod image;
mod render;

use thiserror::Error;

pub use dump::{
    decode_tensor_dump, encode_tensor_dump, read_tensor_dump, write_tensor_dump, DUMP_MAGIC, DUMP_VERSION,
};
pub use image::{
    load_image, load_raster, resize_bilinear, to_model_input, write_png, write_ppm, RasterImage,
};
pub use render::{render_heatmap, Background, Colormap, RenderSpec};

#[derive(Debug, Error)]
pub enum HeatmapError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("unsupported or corrupt image: {0}")]
    Image(String),
    #[error("tensor dump: {0}")]
    Format(String),
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
    #[error("invalid render spec: {0}")]
    Spec(String),
}

pub(crate) fn io_err(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> HeatmapError + '_ {
    move |source| HeatmapError::Io {
        path: path.display().to_string(),
        source,
    }
}
