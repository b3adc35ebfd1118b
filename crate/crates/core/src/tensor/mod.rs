//! Dense feature maps and the forward/backward kernels of every layer the
//! network uses.
//!
//! Storage is `(channel, row, column)` row-major. Every kernel is a pure
//! function of its inputs.

mod conv;

pub use conv::{conv2d_backward, conv2d_forward, ConvKernel, KERNEL_SIZE};

use crate::error::{BsrnError, Result};

/// A `channels × height × width` array of `f32`.
///
/// Zero-channel maps are valid; they carry the block state of the `s = 0`
/// configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl FeatureMap {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(BsrnError::shape(format!(
                "buffer of {} values cannot back a {channels}x{height}x{width} map",
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    /// Builds a map by evaluating `f(channel, row, column)` at every element.
    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Self {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self {
            channels,
            height,
            width,
            data,
        }
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    /// `(channels, height, width)`.
    #[inline]
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    #[inline]
    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn index(&self, c: usize, y: usize, x: usize) -> usize {
        debug_assert!(c < self.channels && y < self.height && x < self.width);
        (c * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[self.index(c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, value: f32) {
        let i = self.index(c, y, x);
        self.data[i] = value;
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn same_shape(&self, other: &FeatureMap) -> bool {
        self.shape() == other.shape()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> FeatureMap {
        FeatureMap {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, factor: f32) -> FeatureMap {
        self.map(|v| v * factor)
    }

    /// Clamps every element into `[0, 1]`.
    pub fn clamp_unit(&self) -> FeatureMap {
        self.map(|v| v.clamp(0.0, 1.0))
    }

    /// Mean over channels, giving a single-channel map. A zero-channel map
    /// averages to all zeros.
    pub fn mean_over_channels(&self) -> FeatureMap {
        let n = self.plane_len();
        let mut acc = vec![0.0f64; n];
        for c in 0..self.channels {
            for (a, &v) in acc.iter_mut().zip(self.channel(c)) {
                *a += f64::from(v);
            }
        }
        let denom = self.channels.max(1) as f64;
        FeatureMap {
            channels: 1,
            height: self.height,
            width: self.width,
            data: acc.into_iter().map(|v| (v / denom) as f32).collect(),
        }
    }

    /// Copies out the spatial window `[y0, y0 + h) × [x0, x0 + w)` of every channel.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<FeatureMap> {
        if y0 + h > self.height || x0 + w > self.width {
            return Err(BsrnError::shape(format!(
                "crop {h}x{w} at ({y0}, {x0}) exceeds {}x{} map",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(self.channels * h * w);
        for c in 0..self.channels {
            for y in y0..y0 + h {
                let start = self.index(c, y, x0);
                data.extend_from_slice(&self.data[start..start + w]);
            }
        }
        Ok(FeatureMap {
            channels: self.channels,
            height: h,
            width: w,
            data,
        })
    }
}

fn ensure_same_shape(a: &FeatureMap, b: &FeatureMap, what: &str) -> Result<()> {
    if !a.same_shape(b) {
        return Err(BsrnError::shape(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

pub fn relu_forward(input: &FeatureMap) -> FeatureMap {
    input.map(|v| v.max(0.0))
}

/// Passes the gradient where the forward input was strictly positive.
pub fn relu_backward(input: &FeatureMap, grad_output: &FeatureMap) -> Result<FeatureMap> {
    ensure_same_shape(input, grad_output, "relu_backward")?;
    let data = input
        .data
        .iter()
        .zip(&grad_output.data)
        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
        .collect();
    FeatureMap::from_vec(input.channels, input.height, input.width, data)
}

pub fn add(a: &FeatureMap, b: &FeatureMap) -> Result<FeatureMap> {
    ensure_same_shape(a, b, "add")?;
    let data = a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect();
    FeatureMap::from_vec(a.channels, a.height, a.width, data)
}

/// In-place `acc += other`.
pub fn add_assign(acc: &mut FeatureMap, other: &FeatureMap) -> Result<()> {
    ensure_same_shape(acc, other, "add_assign")?;
    for (a, b) in acc.data.iter_mut().zip(&other.data) {
        *a += b;
    }
    Ok(())
}

/// The sum routes its gradient unchanged to both addends.
pub fn add_backward(grad_output: &FeatureMap) -> (FeatureMap, FeatureMap) {
    (grad_output.clone(), grad_output.clone())
}

pub fn concat_channels(a: &FeatureMap, b: &FeatureMap) -> Result<FeatureMap> {
    if a.height != b.height || a.width != b.width {
        return Err(BsrnError::shape(format!(
            "concat of {}x{} and {}x{} maps",
            a.height, a.width, b.height, b.width
        )));
    }
    let mut data = Vec::with_capacity(a.data.len() + b.data.len());
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    FeatureMap::from_vec(a.channels + b.channels, a.height, a.width, data)
}

/// Splits off the leading `first` channels. `first == channels` yields an
/// empty second half.
pub fn split_channels(x: &FeatureMap, first: usize) -> Result<(FeatureMap, FeatureMap)> {
    if first > x.channels {
        return Err(BsrnError::shape(format!(
            "cannot split {} leading channels from a {}-channel map",
            first, x.channels
        )));
    }
    let cut = first * x.plane_len();
    let head = FeatureMap::from_vec(first, x.height, x.width, x.data[..cut].to_vec())?;
    let tail = FeatureMap::from_vec(
        x.channels - first,
        x.height,
        x.width,
        x.data[cut..].to_vec(),
    )?;
    Ok((head, tail))
}

/// Rearranges `f²·c` channels into an `f`-times larger grid of `c` channels.
///
/// `out[co][y][x] = in[co·f² + (y mod f)·f + (x mod f)][y / f][x / f]`.
pub fn depth_to_space(input: &FeatureMap, factor: usize) -> Result<FeatureMap> {
    let f2 = factor * factor;
    if factor == 0 || !input.channels.is_multiple_of(f2) {
        return Err(BsrnError::shape(format!(
            "depth_to_space: {} channels not divisible by {factor}²",
            input.channels
        )));
    }
    let (c_out, h, w) = (input.channels / f2, input.height, input.width);
    let (oh, ow) = (h * factor, w * factor);
    let mut out = vec![0.0f32; input.data.len()];
    for co in 0..c_out {
        for y in 0..oh {
            let (iy, fy) = (y / factor, y % factor);
            let row = &mut out[(co * oh + y) * ow..(co * oh + y + 1) * ow];
            for (x, o) in row.iter_mut().enumerate() {
                let ci = co * f2 + fy * factor + x % factor;
                *o = input.data[(ci * h + iy) * w + x / factor];
            }
        }
    }
    FeatureMap::from_vec(c_out, oh, ow, out)
}

/// Exact inverse of [`depth_to_space`]; also its backward pass.
pub fn space_to_depth(input: &FeatureMap, factor: usize) -> Result<FeatureMap> {
    if factor == 0 || !input.height.is_multiple_of(factor) || !input.width.is_multiple_of(factor) {
        return Err(BsrnError::shape(format!(
            "space_to_depth: {}x{} not divisible by {factor}",
            input.height, input.width
        )));
    }
    let f2 = factor * factor;
    let (c_in, oh, ow) = (input.channels, input.height, input.width);
    let (h, w) = (oh / factor, ow / factor);
    let mut out = vec![0.0f32; input.data.len()];
    for co in 0..c_in {
        for y in 0..oh {
            let (iy, fy) = (y / factor, y % factor);
            let row = &input.data[(co * oh + y) * ow..(co * oh + y + 1) * ow];
            for (x, &v) in row.iter().enumerate() {
                let ci = co * f2 + fy * factor + x % factor;
                out[(ci * h + iy) * w + x / factor] = v;
            }
        }
    }
    FeatureMap::from_vec(c_in * f2, h, w, out)
}

pub fn depth_to_space_backward(grad_output: &FeatureMap, factor: usize) -> Result<FeatureMap> {
    space_to_depth(grad_output, factor)
}
