//! 3×3 same-size convolution with zero padding, lowered onto a single-precision
//! GEMM through an im2col buffer. Convolutions with very few output channels
//! skip the buffer and accumulate shifted rows directly.
//!
//! The reduction axis of the GEMM is ordered `(in_channel, ky, kx)`. Both
//! paths fix the accumulation order of every output element run to run.

use super::FeatureMap;
use crate::error::{BsrnError, Result};

pub const KERNEL_SIZE: usize = 3;
const TAPS: usize = KERNEL_SIZE * KERNEL_SIZE;

/// Weights laid out as `[ky][kx][in_channel][out_channel]`, plus one bias per
/// output channel. Gradients use the same type.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvKernel {
    in_channels: usize,
    out_channels: usize,
    weights: Vec<f32>,
    bias: Vec<f32>,
}

impl ConvKernel {
    pub fn zeros(in_channels: usize, out_channels: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            weights: vec![0.0; TAPS * in_channels * out_channels],
            bias: vec![0.0; out_channels],
        }
    }

    pub fn from_parts(
        in_channels: usize,
        out_channels: usize,
        weights: Vec<f32>,
        bias: Vec<f32>,
    ) -> Result<Self> {
        if weights.len() != TAPS * in_channels * out_channels || bias.len() != out_channels {
            return Err(BsrnError::shape(format!(
                "{}/{} values cannot back a 3x3x{in_channels}x{out_channels} kernel",
                weights.len(),
                bias.len()
            )));
        }
        Ok(Self {
            in_channels,
            out_channels,
            weights,
            bias,
        })
    }

    #[inline]
    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    #[inline]
    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn weights(&self) -> &[f32] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f32] {
        &mut self.weights
    }

    pub fn bias(&self) -> &[f32] {
        &self.bias
    }

    pub fn bias_mut(&mut self) -> &mut [f32] {
        &mut self.bias
    }

    pub fn parts_mut(&mut self) -> (&mut [f32], &mut [f32]) {
        (&mut self.weights, &mut self.bias)
    }

    /// Dimensions of the weight tensor, `[3, 3, in, out]`.
    pub fn weight_dims(&self) -> [usize; 4] {
        [KERNEL_SIZE, KERNEL_SIZE, self.in_channels, self.out_channels]
    }

    #[inline]
    pub fn weight_index(&self, ky: usize, kx: usize, i: usize, o: usize) -> usize {
        ((ky * KERNEL_SIZE + kx) * self.in_channels + i) * self.out_channels + o
    }

    #[inline]
    pub fn weight(&self, ky: usize, kx: usize, i: usize, o: usize) -> f32 {
        self.weights[self.weight_index(ky, kx, i, o)]
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    pub fn same_shape(&self, other: &ConvKernel) -> bool {
        self.in_channels == other.in_channels && self.out_channels == other.out_channels
    }

    /// `self += other`, elementwise over weights and bias.
    pub fn accumulate(&mut self, other: &ConvKernel) {
        debug_assert!(self.same_shape(other));
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a += b;
        }
        for (a, b) in self.bias.iter_mut().zip(&other.bias) {
            *a += b;
        }
    }

    /// Weights repacked as a row-major `out × (in·9)` matrix whose columns
    /// follow the im2col row order.
    fn packed(&self) -> Vec<f32> {
        let k = self.in_channels * TAPS;
        let mut a = vec![0.0f32; self.out_channels * k];
        for ky in 0..KERNEL_SIZE {
            for kx in 0..KERNEL_SIZE {
                for i in 0..self.in_channels {
                    let col = (i * KERNEL_SIZE + ky) * KERNEL_SIZE + kx;
                    let src = self.weight_index(ky, kx, i, 0);
                    for o in 0..self.out_channels {
                        a[o * k + col] = self.weights[src + o];
                    }
                }
            }
        }
        a
    }
}

fn check_spatial(input: &FeatureMap) -> Result<()> {
    if input.height() == 0 || input.width() == 0 {
        return Err(BsrnError::shape(format!(
            "convolution over an empty {}x{} map",
            input.height(),
            input.width()
        )));
    }
    Ok(())
}

/// Builds the `(in·9) × (h·w)` patch matrix; out-of-bounds taps are zero.
fn im2col(input: &FeatureMap) -> Vec<f32> {
    let (c, h, w) = input.shape();
    let p = h * w;
    let mut col = vec![0.0f32; c * TAPS * p];
    let src = input.data();
    for i in 0..c {
        for ky in 0..KERNEL_SIZE {
            for kx in 0..KERNEL_SIZE {
                let row = (i * KERNEL_SIZE + ky) * KERNEL_SIZE + kx;
                let dst = &mut col[row * p..(row + 1) * p];
                let x_lo = usize::from(kx == 0);
                let x_hi = if kx == 2 { w - 1 } else { w };
                for y in 0..h {
                    let sy = y + ky;
                    if sy == 0 || sy > h {
                        continue;
                    }
                    let sy = sy - 1;
                    if x_lo >= x_hi {
                        continue;
                    }
                    let s0 = (i * h + sy) * w + x_lo + kx - 1;
                    let len = x_hi - x_lo;
                    dst[y * w + x_lo..y * w + x_hi].copy_from_slice(&src[s0..s0 + len]);
                }
            }
        }
    }
    col
}

/// Scatters a patch-matrix gradient back onto the input grid.
fn col2im(col: &[f32], c: usize, h: usize, w: usize) -> Vec<f32> {
    let p = h * w;
    let mut out = vec![0.0f32; c * p];
    for i in 0..c {
        for ky in 0..KERNEL_SIZE {
            for kx in 0..KERNEL_SIZE {
                let row = (i * KERNEL_SIZE + ky) * KERNEL_SIZE + kx;
                let g = &col[row * p..(row + 1) * p];
                let x_lo = usize::from(kx == 0);
                let x_hi = if kx == 2 { w - 1 } else { w };
                if x_lo >= x_hi {
                    continue;
                }
                for y in 0..h {
                    let sy = y + ky;
                    if sy == 0 || sy > h {
                        continue;
                    }
                    let base = (i * h + sy - 1) * w;
                    for x in x_lo..x_hi {
                        out[base + x + kx - 1] += g[y * w + x];
                    }
                }
            }
        }
    }
    out
}

/// `c[m×n] = alpha·a[m×k]·b[k×n] + beta·c`, every operand given by (row, column) strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_strides: (isize, isize),
    b: &[f32],
    b_strides: (isize, isize),
    beta: f32,
    c: &mut [f32],
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(c.len() >= m * n);
    // SAFETY: callers pass buffers exactly covering the strided extents
    // (a: m·k, b: k·n, c: m·n elements), and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Below this many output channels the convolution runs as shifted row
/// updates instead of im2col and GEMM; the patch matrix would dwarf the work.
const DIRECT_MAX_OUT: usize = 4;

/// Valid `(row, source_row)` and `(x_lo, x_hi, source_offset)` ranges for tap `(ky, kx)`.
#[inline]
fn tap_extent(h: usize, w: usize, ky: usize, kx: usize) -> (usize, usize, usize, usize) {
    let y_lo = usize::from(ky == 0);
    let y_hi = if ky == 2 { h - 1 } else { h };
    let x_lo = usize::from(kx == 0);
    let x_hi = if kx == 2 { w - 1 } else { w };
    (y_lo, y_hi.max(y_lo), x_lo, x_hi.max(x_lo))
}

fn direct_forward(input: &FeatureMap, kernel: &ConvKernel, out: &mut [f32]) {
    let (c, h, w) = input.shape();
    let p = h * w;
    let src = input.data();
    for (o, plane) in out.chunks_exact_mut(p).enumerate() {
        for ky in 0..KERNEL_SIZE {
            for kx in 0..KERNEL_SIZE {
                let (y_lo, y_hi, x_lo, x_hi) = tap_extent(h, w, ky, kx);
                for i in 0..c {
                    let wv = kernel.weight(ky, kx, i, o);
                    let chan = &src[i * p..(i + 1) * p];
                    for y in y_lo..y_hi {
                        let s0 = (y + ky - 1) * w + x_lo + kx - 1;
                        let dst = &mut plane[y * w + x_lo..y * w + x_hi];
                        let row = &chan[s0..s0 + x_hi - x_lo];
                        for (d, &v) in dst.iter_mut().zip(row) {
                            *d += wv * v;
                        }
                    }
                }
            }
        }
    }
}

/// Eight-lane f32 dot product with a fixed reduction order.
#[inline]
fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0.0f32; 8];
    let (ac, bc) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: f32 = ac.remainder().iter().zip(bc.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ac.zip(bc) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    acc.iter().sum::<f32>() + tail
}

fn direct_backward(input: &FeatureMap, g: &[f32], grad: &mut ConvKernel, kernel: &ConvKernel) -> Vec<f32> {
    let (c, h, w) = input.shape();
    let p = h * w;
    let src = input.data();
    let mut grad_input = vec![0.0f32; c * p];
    for ky in 0..KERNEL_SIZE {
        for kx in 0..KERNEL_SIZE {
            let (y_lo, y_hi, x_lo, x_hi) = tap_extent(h, w, ky, kx);
            for i in 0..c {
                let chan = &src[i * p..(i + 1) * p];
                for o in 0..kernel.out_channels {
                    let go = &g[o * p..(o + 1) * p];
                    let wv = kernel.weight(ky, kx, i, o);
                    let gi = &mut grad_input[i * p..(i + 1) * p];
                    let mut acc = 0.0f32;
                    for y in y_lo..y_hi {
                        let s0 = (y + ky - 1) * w + x_lo + kx - 1;
                        let grow = &go[y * w + x_lo..y * w + x_hi];
                        acc += dot(grow, &chan[s0..s0 + x_hi - x_lo]);
                        for (d, &v) in gi[s0..s0 + x_hi - x_lo].iter_mut().zip(grow) {
                            *d += wv * v;
                        }
                    }
                    let idx = grad.weight_index(ky, kx, i, o);
                    grad.weights[idx] = acc;
                }
            }
        }
    }
    grad_input
}

/// Same-size 3×3 convolution with zero padding of one pixel on every border.
pub fn conv2d_forward(input: &FeatureMap, kernel: &ConvKernel) -> Result<FeatureMap> {
    if input.channels() != kernel.in_channels {
        return Err(BsrnError::shape(format!(
            "convolution expects {} input channels, got {}",
            kernel.in_channels,
            input.channels()
        )));
    }
    check_spatial(input)?;
    let (h, w) = (input.height(), input.width());
    let p = h * w;
    let (m, k) = (kernel.out_channels, kernel.in_channels * TAPS);

    let mut out = vec![0.0f32; m * p];
    for (o, plane) in out.chunks_exact_mut(p).enumerate() {
        plane.fill(kernel.bias[o]);
    }
    if m <= DIRECT_MAX_OUT {
        direct_forward(input, kernel, &mut out);
    } else if k > 0 {
        let col = im2col(input);
        let a = kernel.packed();
        gemm(m, k, p, &a, (k as isize, 1), &col, (p as isize, 1), 1.0, &mut out);
    }
    FeatureMap::from_vec(m, h, w, out)
}

/// Returns `(∂L/∂input, ∂L/∂kernel)` given `∂L/∂output`.
pub fn conv2d_backward(
    input: &FeatureMap,
    kernel: &ConvKernel,
    grad_output: &FeatureMap,
) -> Result<(FeatureMap, ConvKernel)> {
    if input.channels() != kernel.in_channels {
        return Err(BsrnError::shape(format!(
            "convolution expects {} input channels, got {}",
            kernel.in_channels,
            input.channels()
        )));
    }
    check_spatial(input)?;
    let (c, h, w) = input.shape();
    if grad_output.shape() != (kernel.out_channels, h, w) {
        return Err(BsrnError::shape(format!(
            "output gradient {:?} does not match convolution output {:?}",
            grad_output.shape(),
            (kernel.out_channels, h, w)
        )));
    }
    let p = h * w;
    let (m, k) = (kernel.out_channels, c * TAPS);
    let g = grad_output.data();

    let mut grad = ConvKernel::zeros(c, m);
    for (o, plane) in g.chunks_exact(p).enumerate() {
        grad.bias[o] = plane.iter().map(|&v| f64::from(v)).sum::<f64>() as f32;
    }
    if k == 0 {
        return Ok((FeatureMap::zeros(0, h, w), grad));
    }
    if m <= DIRECT_MAX_OUT {
        let grad_input = direct_backward(input, g, &mut grad, kernel);
        return Ok((FeatureMap::from_vec(c, h, w, grad_input)?, grad));
    }

    let col = im2col(input);
    // ∂W (m×k) = g (m×p) · colᵀ (p×k)
    let mut grad_packed = vec![0.0f32; m * k];
    gemm(m, p, k, g, (p as isize, 1), &col, (1, p as isize), 0.0, &mut grad_packed);
    for ky in 0..KERNEL_SIZE {
        for kx in 0..KERNEL_SIZE {
            for i in 0..c {
                let col_idx = (i * KERNEL_SIZE + ky) * KERNEL_SIZE + kx;
                let dst = grad.weight_index(ky, kx, i, 0);
                for o in 0..m {
                    grad.weights[dst + o] = grad_packed[o * k + col_idx];
                }
            }
        }
    }

    // ∂col (k×p) = Aᵀ (k×m) · g (m×p)
    let a = kernel.packed();
    let mut grad_col = vec![0.0f32; k * p];
    gemm(k, m, p, &a, (1, k as isize), g, (p as isize, 1), 0.0, &mut grad_col);
    let grad_input = FeatureMap::from_vec(c, h, w, col2im(&grad_col, c, h, w))?;
    Ok((grad_input, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Direct six-loop evaluation of the convolution definition.
    fn conv_oracle(input: &FeatureMap, kernel: &ConvKernel) -> Vec<f64> {
        let (c, h, w) = input.shape();
        let m = kernel.out_channels();
        let mut out = vec![0.0f64; m * h * w];
        for o in 0..m {
            for y in 0..h {
                for x in 0..w {
                    let mut acc = f64::from(kernel.bias()[o]);
                    for i in 0..c {
                        for dy in 0..3 {
                            for dx in 0..3 {
                                let (sy, sx) = (y as isize + dy as isize - 1, x as isize + dx as isize - 1);
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                    continue;
                                }
                                acc += f64::from(input.get(i, sy as usize, sx as usize))
                                    * f64::from(kernel.weight(dy, dx, i, o));
                            }
                        }
                    }
                    out[(o * h + y) * w + x] = acc;
                }
            }
        }
        out
    }

    fn random_map(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> FeatureMap {
        FeatureMap::from_fn(c, h, w, |_, _, _| rng.random_range(-1.0..1.0))
    }

    fn random_kernel(rng: &mut ChaCha8Rng, i: usize, o: usize) -> ConvKernel {
        let w = (0..9 * i * o).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b = (0..o).map(|_| rng.random_range(-1.0..1.0)).collect();
        ConvKernel::from_parts(i, o, w, b).unwrap()
    }

    #[test]
    fn identity_kernel_reproduces_input() {
        let input = FeatureMap::from_fn(1, 3, 3, |_, y, x| (y * 3 + x) as f32);
        let mut k = ConvKernel::zeros(1, 1);
        let idx = k.weight_index(1, 1, 0, 0);
        k.weights_mut()[idx] = 1.0;
        assert_eq!(conv2d_forward(&input, &k).unwrap(), input);
    }

    #[test]
    fn zero_weights_give_bias_planes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let input = random_map(&mut rng, 2, 4, 5);
        let k = ConvKernel::from_parts(2, 3, vec![0.0; 54], vec![0.5, -1.0, 2.0]).unwrap();
        let out = conv2d_forward(&input, &k).unwrap();
        for o in 0..3 {
            assert!(out.channel(o).iter().all(|&v| v == k.bias()[o]));
        }
    }

    #[test]
    fn matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &(c, o, h, w) in &[(2, 3, 4, 4), (1, 1, 1, 1), (3, 2, 1, 5), (4, 4, 6, 2), (5, 7, 3, 3)] {
            let input = random_map(&mut rng, c, h, w);
            let k = random_kernel(&mut rng, c, o);
            let got = conv2d_forward(&input, &k).unwrap();
            let want = conv_oracle(&input, &k);
            assert_eq!(got.shape(), (o, h, w));
            for (g, w) in got.data().iter().zip(&want) {
                assert!((f64::from(*g) - w).abs() < 1e-5, "{g} vs {w}");
            }
        }
    }

    #[test]
    fn shape_errors() {
        let k = ConvKernel::zeros(2, 1);
        assert!(conv2d_forward(&FeatureMap::zeros(3, 2, 2), &k).is_err());
        assert!(conv2d_forward(&FeatureMap::zeros(2, 0, 2), &k).is_err());
        let input = FeatureMap::zeros(2, 2, 2);
        assert!(conv2d_backward(&input, &k, &FeatureMap::zeros(1, 2, 3)).is_err());
        assert!(ConvKernel::from_parts(1, 1, vec![0.0; 8], vec![0.0]).is_err());
    }

    #[test]
    fn zero_grad_output_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let input = random_map(&mut rng, 2, 3, 3);
        let k = random_kernel(&mut rng, 2, 2);
        let (gi, gk) = conv2d_backward(&input, &k, &FeatureMap::zeros(2, 3, 3)).unwrap();
        assert!(gi.data().iter().all(|&v| v == 0.0));
        assert!(gk.weights().iter().chain(gk.bias()).all(|&v| v == 0.0));
    }

    #[test]
    fn single_pixel_gradient() {
        let v = 0.75;
        let input = FeatureMap::from_vec(1, 1, 1, vec![v]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let k = random_kernel(&mut rng, 1, 1);
        let (_, gk) = conv2d_backward(&input, &k, &FeatureMap::filled(1, 1, 1, 1.0)).unwrap();
        for ky in 0..3 {
            for kx in 0..3 {
                let expected = if (ky, kx) == (1, 1) { v } else { 0.0 };
                assert_eq!(gk.weight(ky, kx, 0, 0), expected);
            }
        }
        assert_eq!(gk.bias(), &[1.0]);
    }

    #[test]
    fn backward_matches_adjoint_oracle() {
        // For the linear map, ⟨g, conv(x)⟩ derivatives are exact sums; compare
        // against the brute-force definition evaluated per parameter.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        // Both the direct path and the GEMM path, with rows long enough to
        // exercise the vector lanes.
        for &(c, o, h, w) in &[(3, 2, 4, 5), (2, 6, 3, 19), (4, 1, 2, 9)] {
            check_adjoint(&mut rng, c, o, h, w);
        }
    }

    fn check_adjoint(rng: &mut ChaCha8Rng, c: usize, o: usize, h: usize, w: usize) {
        let input = random_map(rng, c, h, w);
        let k = random_kernel(rng, c, o);
        let g = random_map(rng, o, h, w);
        let (gi, gk) = conv2d_backward(&input, &k, &g).unwrap();

        for i in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let mut want = 0.0f64;
                    for oo in 0..o {
                        for dy in 0..3 {
                            for dx in 0..3 {
                                // input (y, x) feeds output (y - dy + 1, x - dx + 1)
                                let (oy, ox) = (y as isize - dy as isize + 1, x as isize - dx as isize + 1);
                                if oy < 0 || ox < 0 || oy >= h as isize || ox >= w as isize {
                                    continue;
                                }
                                want += f64::from(g.get(oo, oy as usize, ox as usize))
                                    * f64::from(k.weight(dy, dx, i, oo));
                            }
                        }
                    }
                    assert!((f64::from(gi.get(i, y, x)) - want).abs() < 1e-5);
                }
            }
        }
        for dy in 0..3 {
            for dx in 0..3 {
                for i in 0..c {
                    for oo in 0..o {
                        let mut want = 0.0f64;
                        for y in 0..h {
                            for x in 0..w {
                                let (sy, sx) = (y as isize + dy as isize - 1, x as isize + dx as isize - 1);
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                    continue;
                                }
                                want += f64::from(g.get(oo, y, x))
                                    * f64::from(input.get(i, sy as usize, sx as usize));
                            }
                        }
                        assert!((f64::from(gk.weight(dy, dx, i, oo)) - want).abs() < 1e-5);
                    }
                }
            }
        }
    }

    #[test]
    fn linear_in_input_without_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let input = random_map(&mut rng, 3, 5, 4);
        let mut k = random_kernel(&mut rng, 3, 2);
        k.bias_mut().fill(0.0);
        let base = conv2d_forward(&input, &k).unwrap();
        // Power-of-two scaling is exact in binary floating point.
        let doubled = conv2d_forward(&input.scale(2.0), &k).unwrap();
        assert_eq!(doubled, base.scale(2.0));
        let alpha = 0.3f32;
        let scaled = conv2d_forward(&input.scale(alpha), &k).unwrap();
        let bound: f32 = input.data().iter().map(|v| v.abs()).sum::<f32>();
        for (s, b) in scaled.data().iter().zip(base.data()) {
            assert!((s - alpha * b).abs() <= 4.0 * f32::EPSILON * bound);
        }
    }

    #[test]
    fn deterministic_across_calls() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let input = random_map(&mut rng, 6, 9, 7);
        let k = random_kernel(&mut rng, 6, 5);
        let a = conv2d_forward(&input, &k).unwrap();
        let b = conv2d_forward(&input, &k).unwrap();
        assert_eq!(a.data(), b.data());
    }
}
