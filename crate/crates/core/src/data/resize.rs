//! Separable bicubic resampling (cubic convolution, `a = −0.5`) with
//! edge-clamped taps and center-aligned coordinates:
//! `src = (dst + 0.5) · in/out − 0.5`.

use crate::error::{BsrnError, Result};
use crate::tensor::FeatureMap;

pub const CUBIC_A: f64 = -0.5;

/// The cubic convolution kernel.
pub fn cubic_kernel(x: f64) -> f64 {
    let a = CUBIC_A;
    let x = x.abs();
    if x <= 1.0 {
        ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a
    } else {
        0.0
    }
}

/// Four `(source index, weight)` taps per output index along one axis.
fn axis_taps(in_len: usize, out_len: usize) -> Vec<[(usize, f64); 4]> {
    let ratio = in_len as f64 / out_len as f64;
    let last = in_len as isize - 1;
    (0..out_len)
        .map(|dst| {
            let src = (dst as f64 + 0.5) * ratio - 0.5;
            let base = src.floor();
            let t = src - base;
            std::array::from_fn(|k| {
                let offset = k as isize - 1;
                let idx = (base as isize + offset).clamp(0, last) as usize;
                (idx, cubic_kernel(t - offset as f64))
            })
        })
        .collect()
}

/// Resizes every channel to `out_h × out_w`. Values are not clamped.
pub fn bicubic_resize(img: &FeatureMap, out_h: usize, out_w: usize) -> Result<FeatureMap> {
    if out_h == 0 || out_w == 0 {
        return Err(BsrnError::shape("resize target must be at least 1x1"));
    }
    let (c, h, w) = img.shape();
    if h == 0 || w == 0 {
        return Err(BsrnError::shape("cannot resize an empty image"));
    }
    let cols = axis_taps(w, out_w);
    let rows = axis_taps(h, out_h);

    let mut horizontal = vec![0.0f64; c * h * out_w];
    for ch in 0..c {
        let plane = img.channel(ch);
        for y in 0..h {
            let src = &plane[y * w..(y + 1) * w];
            let dst = &mut horizontal[(ch * h + y) * out_w..(ch * h + y + 1) * out_w];
            for (d, taps) in dst.iter_mut().zip(&cols) {
                *d = taps.iter().map(|&(i, wt)| wt * f64::from(src[i])).sum();
            }
        }
    }

    Ok(FeatureMap::from_fn(c, out_h, out_w, |ch, y, x| {
        rows[y]
            .iter()
            .map(|&(i, wt)| wt * horizontal[(ch * h + i) * out_w + x])
            .sum::<f64>() as f32
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_values() {
        assert_eq!(cubic_kernel(0.0), 1.0);
        assert_eq!(cubic_kernel(1.0), 0.0);
        assert_eq!(cubic_kernel(2.0), 0.0);
        assert!((cubic_kernel(0.5) - 0.5625).abs() < 1e-15);
        assert!((cubic_kernel(1.5) + 0.0625).abs() < 1e-15);
    }

    #[test]
    fn constant_stays_constant() {
        let img = FeatureMap::filled(3, 7, 5, 0.37);
        for (h, w) in [(3, 2), (14, 10), (21, 15), (7, 5), (1, 1)] {
            let out = bicubic_resize(&img, h, w).unwrap();
            assert!(out.data().iter().all(|&v| (v - 0.37).abs() < 1e-7));
        }
    }

    #[test]
    fn identity_resize() {
        let img = FeatureMap::from_fn(2, 5, 6, |c, y, x| ((c * 31 + y * 7 + x * 3) % 10) as f32 / 10.0);
        let out = bicubic_resize(&img, 5, 6).unwrap();
        for (a, b) in out.data().iter().zip(img.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn ramp_downsample_matches_kernel_formula() {
        // A horizontal ramp of width 8 downsampled to 4: output x samples
        // src = 2x + 0.5, taps 2x-1 .. 2x+2 at distances 1.5, 0.5, 0.5, 1.5.
        let n = 8usize;
        let img = FeatureMap::from_fn(1, 1, n, |_, _, x| x as f32 / (n - 1) as f32);
        let out = bicubic_resize(&img, 1, n / 2).unwrap();
        for x in 0..n / 2 {
            let mut want = 0.0f64;
            for (k, dist) in [(-1isize, 1.5f64), (0, 0.5), (1, 0.5), (2, 1.5)] {
                let idx = (2 * x as isize + k).clamp(0, n as isize - 1) as f64;
                want += cubic_kernel(dist) * idx / (n - 1) as f64;
            }
            assert!((f64::from(out.get(0, 0, x)) - want).abs() < 1e-6);
        }
        // Interior samples of a ramp land exactly on the midpoint.
        assert!((out.get(0, 0, 1) - 2.5 / 7.0).abs() < 1e-6);
    }

    #[test]
    fn rejects_empty_target() {
        assert!(bicubic_resize(&FeatureMap::zeros(1, 2, 2), 0, 1).is_err());
    }
}
