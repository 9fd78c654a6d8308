//! 8-bit raster images: PNG and binary/ASCII PPM/PGM.

use std::fs;
use std::io::Cursor;
use std::path::Path;

use super::{io_err, HeatmapError};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RasterImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<[u8; 3]>,
}

impl RasterImage {
    pub fn new(width: usize, height: usize, pixels: Vec<[u8; 3]>) -> Result<Self, HeatmapError> {
        if width == 0 || height == 0 || pixels.len() != width * height {
            return Err(HeatmapError::Image(format!(
                "{} pixels for a {width}x{height} image",
                pixels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    /// `[3, H, W]` tensor in `[0, 1]`.
    pub fn to_tensor(&self) -> Tensor {
        let plane = self.width * self.height;
        Tensor::from_fn(&[3, self.height, self.width], |i| {
            self.pixels[i % plane][i / plane] as f32 / 255.0
        })
    }

    /// Inverse of [`to_tensor`](Self::to_tensor); a single channel is replicated to grey.
    pub fn from_tensor(t: &Tensor) -> Result<Self, HeatmapError> {
        let (c, h, w) = t.chw()?;
        if c != 1 && c != 3 {
            return Err(HeatmapError::Image(format!("cannot display {c} channels")));
        }
        let plane = h * w;
        let q = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        let pixels = (0..plane)
            .map(|p| {
                if c == 1 {
                    let g = q(t.data()[p]);
                    [g, g, g]
                } else {
                    [q(t.data()[p]), q(t.data()[plane + p]), q(t.data()[2 * plane + p])]
                }
            })
            .collect();
        Self::new(w, h, pixels)
    }

    pub fn grayscale(&self) -> Self {
        Self {
            width: self.width,
            height: self.height,
            pixels: self
                .pixels
                .iter()
                .map(|&p| {
                    let g = luma(p);
                    [g, g, g]
                })
                .collect(),
        }
    }

    pub fn to_png_bytes(&self) -> Result<Vec<u8>, HeatmapError> {
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut out, self.width as u32, self.height as u32);
            enc.set_color(png::ColorType::Rgb);
            enc.set_depth(png::BitDepth::Eight);
            let mut writer = enc
                .write_header()
                .map_err(|e| HeatmapError::Image(e.to_string()))?;
            let raw: Vec<u8> = self.pixels.iter().flatten().copied().collect();
            writer
                .write_image_data(&raw)
                .map_err(|e| HeatmapError::Image(e.to_string()))?;
        }
        Ok(out)
    }

    pub fn to_ppm_bytes(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.pixels.iter().flatten());
        out
    }
}

/// ITU-R BT.601 luma, rounded.
pub(crate) fn luma([r, g, b]: [u8; 3]) -> u8 {
    (0.299 * r as f32 + 0.587 * g as f32 + 0.114 * b as f32)
        .round()
        .clamp(0.0, 255.0) as u8
}

fn decode_png(bytes: &[u8]) -> Result<RasterImage, HeatmapError> {
    let err = |e: png::DecodingError| HeatmapError::Image(e.to_string());
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::normalize_to_color8());
    let mut reader = decoder.read_info().map_err(err)?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| HeatmapError::Image("PNG too large".into()))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(err)?;
    let buf = &buf[..info.buffer_size()];
    let (w, h) = (info.width as usize, info.height as usize);
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => return Err(HeatmapError::Image("palette PNG was not expanded".into())),
    };
    let pixels = buf
        .chunks_exact(channels)
        .map(|px| match channels {
            1 | 2 => [px[0]; 3],
            _ => [px[0], px[1], px[2]],
        })
        .collect();
    RasterImage::new(w, h, pixels)
}

struct PnmTokens<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> PnmTokens<'a> {
    fn next(&mut self) -> Option<&'a [u8]> {
        loop {
            while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
                self.pos += 1;
            }
            if self.pos < self.bytes.len() && self.bytes[self.pos] == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
                continue;
            }
            break;
        }
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        (self.pos > start).then(|| &self.bytes[start..self.pos])
    }

    fn number(&mut self) -> Result<usize, HeatmapError> {
        self.next()
            .and_then(|t| std::str::from_utf8(t).ok())
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| HeatmapError::Image("malformed PNM header".into()))
    }
}

fn decode_pnm(bytes: &[u8]) -> Result<RasterImage, HeatmapError> {
    let mut tok = PnmTokens { bytes, pos: 0 };
    let magic = tok.next().unwrap_or_default();
    let (channels, binary) = match magic {
        b"P2" => (1, false),
        b"P3" => (3, false),
        b"P5" => (1, true),
        b"P6" => (3, true),
        _ => return Err(HeatmapError::Image("unsupported PNM variant".into())),
    };
    let w = tok.number()?;
    let h = tok.number()?;
    let maxval = tok.number()?;
    if maxval == 0 || maxval > 255 {
        return Err(HeatmapError::Image(format!("PNM maxval {maxval} is not 8-bit")));
    }
    let n = w * h * channels;
    let samples: Vec<u8> = if binary {
        // exactly one whitespace byte separates the header from the raster
        let start = tok.pos + 1;
        if bytes.len() < start + n {
            return Err(HeatmapError::Image("truncated PNM raster".into()));
        }
        bytes[start..start + n].to_vec()
    } else {
        (0..n)
            .map(|_| tok.number().map(|v| v.min(maxval) as u8))
            .collect::<Result<_, _>>()?
    };
    let scale = |v: u8| ((v as u32 * 255 + maxval as u32 / 2) / maxval as u32) as u8;
    let pixels = samples
        .chunks_exact(channels)
        .map(|px| {
            if channels == 1 {
                [scale(px[0]); 3]
            } else {
                [scale(px[0]), scale(px[1]), scale(px[2])]
            }
        })
        .collect();
    RasterImage::new(w, h, pixels)
}

/// Reads a PNG, PPM or PGM file.
pub fn load_raster(path: impl AsRef<Path>) -> Result<RasterImage, HeatmapError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(io_err(path))?;
    if bytes.starts_with(b"\x89PNG\r\n\x1a\n") {
        decode_png(&bytes)
    } else if bytes.first() == Some(&b'P') {
        decode_pnm(&bytes)
    } else {
        Err(HeatmapError::Image(format!(
            "{}: unrecognised format",
            path.display()
        )))
    }
}

/// Bilinear resize of a `[C, H, W]` tensor with half-pixel centres and edge clamping.
pub fn resize_bilinear(t: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor, HeatmapError> {
    let (c, h, w) = t.chw()?;
    if out_h == 0 || out_w == 0 {
        return Err(HeatmapError::Image("resize target must be non-empty".into()));
    }
    if (h, w) == (out_h, out_w) {
        return Ok(t.clone());
    }
    let taps = |out: usize, src: usize| -> Vec<(usize, usize, f32)> {
        let scale = src as f64 / out as f64;
        (0..out)
            .map(|o| {
                let s = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(src - 1);
                (i0, i1, (s - i0 as f64) as f32)
            })
            .collect()
    };
    let ys = taps(out_h, h);
    let xs = taps(out_w, w);
    let d = t.data();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let at = |y: usize, x: usize| d[(ch * h + y) * w + x];
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bot = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                out.push(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    Ok(Tensor::new(vec![c, out_h, out_w], out)?)
}

/// Loads an image as a `[3, H, W]` tensor in `[0, 1]`, optionally resized to `(H, W)`.
pub fn load_image(path: impl AsRef<Path>, resize: Option<(usize, usize)>) -> Result<Tensor, HeatmapError> {
    let t = load_raster(path)?.to_tensor();
    match resize {
        Some((h, w)) => resize_bilinear(&t, h, w),
        None => Ok(t),
    }
}

/// Converts a `[3, H, W]` image to `channels` (3 or 1; one channel is the channel mean).
pub fn to_model_input(rgb: &Tensor, channels: usize) -> Result<Tensor, HeatmapError> {
    let (c, h, w) = rgb.chw()?;
    match (c, channels) {
        (a, b) if a == b => Ok(rgb.clone()),
        (3, 1) => {
            let plane = h * w;
            let d = rgb.data();
            Ok(Tensor::from_fn(&[1, h, w], |p| {
                (d[p] + d[plane + p] + d[2 * plane + p]) / 3.0
            }))
        }
        _ => Err(HeatmapError::Image(format!(
            "cannot feed a {c}-channel image to a {channels}-channel input"
        ))),
    }
}

pub fn write_png(img: &RasterImage, path: impl AsRef<Path>) -> Result<(), HeatmapError> {
    let path = path.as_ref();
    fs::write(path, img.to_png_bytes()?).map_err(io_err(path))
}

pub fn write_ppm(img: &RasterImage, path: impl AsRef<Path>) -> Result<(), HeatmapError> {
    let path = path.as_ref();
    fs::write(path, img.to_ppm_bytes()).map_err(io_err(path))
}
