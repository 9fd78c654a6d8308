//! Dense row-major `f32` tensors and the numeric kernels the engine is built on.
//!
//! Images use `[channels, height, width]` order. Kernels take shared references and
//! return fresh tensors, so concurrent workers can share inputs freely.

use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("tensor shape {shape:?} needs {expected} values, got {actual}")]
    Length {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
}

pub type Result<T> = std::result::Result<T, TensorError>;

fn dim_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(TensorError::Dimension(msg.into()))
}

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.contains(&0) {
            return dim_err(format!("shape {shape:?} has a zero extent"));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::Length {
                shape,
                expected,
                actual: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    /// Rank-1 tensor over `values`.
    pub fn vector(values: Vec<f32>) -> Self {
        Self {
            shape: vec![values.len()],
            data: values,
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f32) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f32, f32) -> f32) -> Result<Self> {
        if self.shape != other.shape {
            return dim_err(format!(
                "elementwise shapes differ: {:?} vs {:?}",
                self.shape, other.shape
            ));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// Sum accumulated in `f64`.
    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    pub fn min(&self) -> f32 {
        self.data.iter().copied().fold(f32::INFINITY, f32::min)
    }

    pub fn max(&self) -> f32 {
        self.data.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }

    /// Index of the largest element; first occurrence wins ties.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.data.iter().enumerate() {
            if v > self.data[best] {
                best = i;
            }
        }
        best
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn has_nan(&self) -> bool {
        self.data.iter().any(|v| v.is_nan())
    }

    /// Interprets the tensor as `[C,H,W]`.
    pub fn chw(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => dim_err(format!("expected a [C,H,W] tensor, got {:?}", self.shape)),
        }
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOWN: usize = 16;
        write!(f, "Tensor{:?} ", self.shape)?;
        if self.data.len() <= SHOWN {
            write!(f, "{:?}", self.data)
        } else {
            write!(f, "{:?}..", &self.data[..SHOWN])
        }
    }
}

/// `[m,k] x [k,n] -> [m,n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = match a.shape[..] {
        [m, k] => (m, k),
        _ => return dim_err(format!("matmul lhs must be rank 2, got {:?}", a.shape)),
    };
    let (k2, n) = match b.shape[..] {
        [k2, n] => (k2, n),
        _ => return dim_err(format!("matmul rhs must be rank 2, got {:?}", b.shape)),
    };
    if k != k2 {
        return dim_err(format!(
            "matmul inner extents disagree: {:?} x {:?}",
            a.shape, b.shape
        ));
    }
    let mut out = vec![0.0f32; m * n];
    gemm(&a.data, &b.data, &mut out, m, k, n);
    Ok(Tensor {
        shape: vec![m, n],
        data: out,
    })
}

/// `out += a[m,k] * b[k,n]`, i-k-j order so the inner loop streams rows of `b`.
pub(crate) fn gemm(a: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// Output extent of a sliding window, or `None` if it is not a positive integer.
pub fn window_extent(size: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    if stride == 0 || kernel == 0 {
        return None;
    }
    let padded = size + 2 * padding;
    if padded < kernel || !(padded - kernel).is_multiple_of(stride) {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Geometry of a 2-D convolution, shared by the forward kernel and the relevance rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernels: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(input: &[usize], kernel: &[usize], stride: usize, padding: usize) -> Result<Self> {
        let (c, h, w) = match input[..] {
            [c, h, w] => (c, h, w),
            _ => return dim_err(format!("conv input must be [C,H,W], got {input:?}")),
        };
        let (k, kc, kh, kw) = match kernel[..] {
            [k, kc, kh, kw] => (k, kc, kh, kw),
            _ => return dim_err(format!("conv kernels must be [K,C,kh,kw], got {kernel:?}")),
        };
        if kc != c {
            return dim_err(format!("conv kernel expects {kc} channels, input has {c}"));
        }
        let out_h = window_extent(h, kh, stride, padding);
        let out_w = window_extent(w, kw, stride, padding);
        match (out_h, out_w) {
            (Some(out_h), Some(out_w)) => Ok(Self {
                channels: c,
                height: h,
                width: w,
                kernels: k,
                kh,
                kw,
                stride,
                padding,
                out_h,
                out_w,
            }),
            _ => dim_err(format!(
                "conv of {input:?} with kernel {kh}x{kw}, stride {stride}, padding {padding} has non-integral output extent"
            )),
        }
    }

    /// Rows of the unrolled patch matrix: `C*kh*kw`.
    pub fn patch_len(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    /// Columns of the unrolled patch matrix: `H'*W'`.
    pub fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn output_shape(&self) -> [usize; 3] {
        [self.kernels, self.out_h, self.out_w]
    }

    /// Visits every (patch row, output position, input flat index) triple that lands
    /// inside the unpadded input.
    #[inline]
    pub(crate) fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (h, w) = (self.height as isize, self.width as isize);
        for c in 0..self.channels {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    for oy in 0..self.out_h {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= h {
                            continue;
                        }
                        for ox in 0..self.out_w {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix < 0 || ix >= w {
                                continue;
                            }
                            let pos = oy * self.out_w + ox;
                            let flat = (c * self.height + iy as usize) * self.width + ix as usize;
                            f(row, pos, flat);
                        }
                    }
                }
            }
        }
    }

    /// Unrolls `input` into a `[C*kh*kw, H'*W']` patch matrix (zero padding).
    pub(crate) fn im2col(&self, input: &[f32]) -> Vec<f32> {
        let p = self.positions();
        let mut cols = vec![0.0f32; self.patch_len() * p];
        self.for_each_tap(|row, pos, flat| cols[row * p + pos] = input[flat]);
        cols
    }
}

/// Cross-correlation with zero padding; no bias.
pub fn conv2d(input: &Tensor, kernels: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let geom = ConvGeometry::new(&input.shape, &kernels.shape, stride, padding)?;
    let cols = geom.im2col(&input.data);
    let mut out = vec![0.0f32; geom.kernels * geom.positions()];
    gemm(
        &kernels.data,
        &cols,
        &mut out,
        geom.kernels,
        geom.patch_len(),
        geom.positions(),
    );
    Tensor::new(geom.output_shape().to_vec(), out)
}

/// Winner positions of a max-pool, as flat indices into the pooled input.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArgmaxIndex {
    pub input_shape: [usize; 3],
    pub window: usize,
    pub stride: usize,
    pub winners: Vec<usize>,
}

impl ArgmaxIndex {
    /// Row-major offset of the winner of pooled output `out` within its own window.
    pub fn local_index(&self, out: usize) -> usize {
        let [_, h, w] = self.input_shape;
        let out_w = (w - self.window) / self.stride + 1;
        let out_h = (h - self.window) / self.stride + 1;
        let flat = self.winners[out];
        let pos = out % (out_h * out_w);
        let (oy, ox) = (pos / out_w, pos % out_w);
        let (iy, ix) = ((flat % (h * w)) / w, flat % w);
        (iy - oy * self.stride) * self.window + (ix - ox * self.stride)
    }
}

pub fn maxpool2d(input: &Tensor, window: usize, stride: usize) -> Result<(Tensor, ArgmaxIndex)> {
    let (c, h, w) = input.chw()?;
    let (out_h, out_w) = match (
        window_extent(h, window, stride, 0),
        window_extent(w, window, stride, 0),
    ) {
        (Some(a), Some(b)) => (a, b),
        _ => {
            return dim_err(format!(
                "max-pool window {window} stride {stride} does not tile {h}x{w}"
            ))
        }
    };
    let mut values = Vec::with_capacity(c * out_h * out_w);
    let mut winners = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        for oy in 0..out_h {
            for ox in 0..out_w {
                let mut best_idx = (ch * h + oy * stride) * w + ox * stride;
                let mut best = input.data[best_idx];
                for dy in 0..window {
                    for dx in 0..window {
                        let idx = (ch * h + oy * stride + dy) * w + ox * stride + dx;
                        if input.data[idx] > best {
                            best = input.data[idx];
                            best_idx = idx;
                        }
                    }
                }
                values.push(best);
                winners.push(best_idx);
            }
        }
    }
    Ok((
        Tensor {
            shape: vec![c, out_h, out_w],
            data: values,
        },
        ArgmaxIndex {
            input_shape: [c, h, w],
            window,
            stride,
            winners,
        },
    ))
}

pub fn relu(input: &Tensor) -> Tensor {
    input.map(|v| v.max(0.0))
}

/// Numerically stable softmax over all elements. Never part of the relevance path.
pub fn softmax(logits: &Tensor) -> Tensor {
    let max = logits.max();
    let exps: Vec<f64> = logits.data.iter().map(|&v| ((v - max) as f64).exp()).collect();
    let total: f64 = exps.iter().sum();
    Tensor {
        shape: logits.shape.clone(),
        data: exps.iter().map(|&e| (e / total) as f32).collect(),
    }
}
