//! Colormapped heatmaps composited over a greyscale copy of the input.

use super::image::RasterImage;
use super::HeatmapError;
use crate::tensor::Tensor;

pub const RAMP_LEN: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Colormap {
    /// black, red, yellow, white
    #[default]
    BlackBody,
    Gray,
}

impl Colormap {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "blackbody" | "black-body" => Some(Colormap::BlackBody),
            "gray" | "grey" => Some(Colormap::Gray),
            _ => None,
        }
    }

    fn anchors(self) -> &'static [(f32, [f32; 3])] {
        match self {
            Colormap::BlackBody => &[
                (0.0, [0.0, 0.0, 0.0]),
                (0.35, [230.0, 0.0, 0.0]),
                (0.7, [255.0, 210.0, 0.0]),
                (1.0, [255.0, 255.0, 255.0]),
            ],
            Colormap::Gray => &[(0.0, [0.0, 0.0, 0.0]), (1.0, [255.0, 255.0, 255.0])],
        }
    }

    pub fn ramp(self) -> Vec<[u8; 3]> {
        let anchors = self.anchors();
        (0..RAMP_LEN)
            .map(|i| {
                let v = i as f32 / (RAMP_LEN - 1) as f32;
                let seg = anchors
                    .windows(2)
                    .find(|w| v <= w[1].0)
                    .unwrap_or(&anchors[anchors.len() - 2..]);
                let (a, b) = (seg[0], seg[1]);
                let f = ((v - a.0) / (b.0 - a.0)).clamp(0.0, 1.0);
                std::array::from_fn(|c| (a.1[c] + (b.1[c] - a.1[c]) * f).round() as u8)
            })
            .collect()
    }

    /// Ramp index for a value in `[0, 1]`; non-decreasing in `v`.
    pub fn index(v: f32) -> usize {
        (v.clamp(0.0, 1.0) * (RAMP_LEN - 1) as f32).round() as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Background {
    #[default]
    Grayscale,
    /// Blend over black.
    None,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderSpec {
    pub colormap: Colormap,
    pub overlay_alpha: f32,
    pub background: Background,
    pub gamma: f32,
}

impl Default for RenderSpec {
    fn default() -> Self {
        Self {
            colormap: Colormap::BlackBody,
            overlay_alpha: 0.6,
            background: Background::Grayscale,
            gamma: 1.0,
        }
    }
}

impl RenderSpec {
    pub fn validate(&self) -> Result<(), HeatmapError> {
        if !(0.0..=1.0).contains(&self.overlay_alpha) {
            return Err(HeatmapError::Spec(format!(
                "alpha {} outside [0, 1]",
                self.overlay_alpha
            )));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(HeatmapError::Spec(format!(
                "gamma {} must be positive",
                self.gamma
            )));
        }
        Ok(())
    }
}

/// Maps that already lie in `[0, 1]` are shown as is; others are min-max rescaled.
fn display_values(map: &Tensor) -> Vec<f32> {
    let (lo, hi) = (map.min(), map.max());
    if lo >= 0.0 && hi <= 1.0 {
        return map.data().to_vec();
    }
    if hi <= lo {
        return vec![0.0; map.len()];
    }
    map.data().iter().map(|&v| (v - lo) / (hi - lo)).collect()
}

pub fn render_heatmap(
    map: &Tensor,
    original: &RasterImage,
    spec: &RenderSpec,
) -> Result<RasterImage, HeatmapError> {
    spec.validate()?;
    let (h, w) = match map.shape() {
        &[h, w] => (h, w),
        s => {
            return Err(
                crate::tensor::TensorError::Dimension(format!("heatmap must be [H,W], got {s:?}")).into(),
            )
        }
    };
    if (h, w) != (original.height, original.width) {
        return Err(crate::tensor::TensorError::Dimension(format!(
            "map is {h}x{w} but image is {}x{}",
            original.height, original.width
        ))
        .into());
    }
    if !map.all_finite() {
        return Err(HeatmapError::Spec("map contains non-finite values".into()));
    }
    let ramp = spec.colormap.ramp();
    let alpha = spec.overlay_alpha;
    let pixels = display_values(map)
        .into_iter()
        .zip(&original.pixels)
        .map(|(v, &orig)| {
            let v = if spec.gamma == 1.0 { v } else { v.powf(spec.gamma) };
            let color = ramp[Colormap::index(v)];
            let bg = match spec.background {
                Background::Grayscale => super::image::luma(orig),
                Background::None => 0,
            };
            let mut px = [0u8; 3];
            for c in 0..3 {
                px[c] = (alpha * color[c] as f32 + (1.0 - alpha) * bg as f32)
                    .round()
                    .clamp(0.0, 255.0) as u8;
            }
            px
        })
        .collect();
    RasterImage::new(w, h, pixels)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(w: usize, h: usize) -> RasterImage {
        RasterImage::new(w, h, (0..w * h).map(|i| [(i * 40) as u8, 90, 200]).collect()).unwrap()
    }

    #[test]
    fn zero_map_full_alpha_is_lowest_color() {
        let spec = RenderSpec {
            overlay_alpha: 1.0,
            ..Default::default()
        };
        let out = render_heatmap(&Tensor::zeros(&[2, 3]), &img(3, 2), &spec).unwrap();
        let low = Colormap::BlackBody.ramp()[0];
        assert!(out.pixels.iter().all(|&p| p == low));
    }

    #[test]
    fn zero_alpha_is_grayscale_original() {
        let spec = RenderSpec {
            overlay_alpha: 0.0,
            ..Default::default()
        };
        let orig = img(3, 2);
        let out = render_heatmap(&Tensor::full(&[2, 3], 0.7), &orig, &spec).unwrap();
        assert_eq!(out, orig.grayscale());
    }

    #[test]
    fn endpoints_hit_ramp_ends() {
        let spec = RenderSpec {
            overlay_alpha: 1.0,
            ..Default::default()
        };
        let map = Tensor::new(vec![1, 2], vec![0.0, 1.0]).unwrap();
        let out = render_heatmap(&map, &img(2, 1), &spec).unwrap();
        let ramp = Colormap::BlackBody.ramp();
        assert_eq!(out.pixels, vec![ramp[0], ramp[RAMP_LEN - 1]]);
        assert_eq!(ramp[0], [0, 0, 0]);
        assert_eq!(ramp[RAMP_LEN - 1], [255, 255, 255]);
    }

    #[test]
    fn out_of_range_maps_are_rescaled() {
        let spec = RenderSpec {
            overlay_alpha: 1.0,
            colormap: Colormap::Gray,
            ..Default::default()
        };
        let map = Tensor::new(vec![1, 3], vec![10.0, 15.0, 20.0]).unwrap();
        let out = render_heatmap(&map, &img(3, 1), &spec).unwrap();
        assert_eq!(out.pixels[0], [0, 0, 0]);
        assert_eq!(out.pixels[2], [255, 255, 255]);
    }

    #[test]
    fn shape_mismatch_and_bad_spec() {
        let spec = RenderSpec::default();
        assert!(render_heatmap(&Tensor::zeros(&[2, 2]), &img(3, 2), &spec).is_err());
        let bad = RenderSpec {
            overlay_alpha: 1.5,
            ..Default::default()
        };
        assert!(render_heatmap(&Tensor::zeros(&[2, 3]), &img(3, 2), &bad).is_err());
    }

    #[test]
    fn ramp_index_is_monotone() {
        let mut last = 0;
        for i in 0..=10_000 {
            let idx = Colormap::index(i as f32 / 10_000.0);
            assert!(idx >= last);
            last = idx;
        }
        assert_eq!(last, RAMP_LEN - 1);
    }

    #[test]
    fn rendering_is_pure() {
        let map = Tensor::from_fn(&[2, 3], |i| i as f32 / 5.0);
        let spec = RenderSpec::default();
        let a = render_heatmap(&map, &img(3, 2), &spec)
            .unwrap()
            .to_png_bytes()
            .unwrap();
        let b = render_heatmap(&map, &img(3, 2), &spec)
            .unwrap()
            .to_png_bytes()
            .unwrap();
        assert_eq!(a, b);
    }
}
