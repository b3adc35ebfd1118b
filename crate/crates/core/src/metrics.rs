//! Luma PSNR and SSIM on 8-bit-range Y maps.

use crate::error::{BsrnError, Result};
use crate::tensor::FeatureMap;

pub const PEAK: f64 = 255.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// A single-channel map in `[0, 255]`, kept in f64.
#[derive(Clone, Debug, PartialEq)]
pub struct LumaMap {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl LumaMap {
    pub fn from_vec(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(BsrnError::shape(format!(
                "{} luma values for a {height}x{width} map",
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let data = (0..height * width).map(|i| f(i / width, i % width)).collect();
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    fn shaved(&self, shave: usize) -> Result<LumaMap> {
        if 2 * shave >= self.height || 2 * shave >= self.width {
            return Err(BsrnError::Metric(format!(
                "shave {shave} leaves nothing of a {}x{} map",
                self.height, self.width
            )));
        }
        let (h, w) = (self.height - 2 * shave, self.width - 2 * shave);
        Ok(Self::from_fn(h, w, |y, x| self.get(y + shave, x + shave)))
    }
}

/// Studio-swing BT.601 luma of one RGB pixel in `[0, 1]`.
pub fn luma(r: f64, g: f64, b: f64) -> f64 {
    16.0 + 65.481 * r + 128.553 * g + 24.966 * b
}

/// Studio-swing BT.601 luma of an RGB map in `[0, 1]`.
pub fn rgb_to_y(img: &FeatureMap) -> Result<LumaMap> {
    if img.channels() != 3 {
        return Err(BsrnError::shape(format!(
            "luma needs 3 channels, got {}",
            img.channels()
        )));
    }
    let (r, g, b) = (img.channel(0), img.channel(1), img.channel(2));
    let data = (0..img.plane_len())
        .map(|i| luma(f64::from(r[i]), f64::from(g[i]), f64::from(b[i])))
        .collect();
    Ok(LumaMap {
        height: img.height(),
        width: img.width(),
        data,
    })
}

fn check_pair(a: &LumaMap, b: &LumaMap) -> Result<()> {
    if (a.height, a.width) != (b.height, b.width) {
        return Err(BsrnError::Metric(format!(
            "size mismatch: {}x{} vs {}x{}",
            a.height, a.width, b.height, b.width
        )));
    }
    Ok(())
}

/// PSNR in dB after removing `shave` pixels from every border.
/// Identical crops give `f64::INFINITY`.
pub fn psnr(a: &LumaMap, b: &LumaMap, shave: usize) -> Result<f64> {
    check_pair(a, b)?;
    let (a, b) = (a.shaved(shave)?, b.shaved(shave)?);
    let sse: f64 = a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum();
    if sse == 0.0 {
        return Ok(f64::INFINITY);
    }
    let mse = sse / a.data.len() as f64;
    Ok(10.0 * (PEAK * PEAK / mse).log10())
}

/// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
pub fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let half = (SSIM_WINDOW / 2) as f64;
    let mut taps: [f64; SSIM_WINDOW] = std::array::from_fn(|i| {
        let d = i as f64 - half;
        (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
    });
    let total: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= total);
    taps
}

/// Gaussian-weighted sums over every fully contained window.
fn filter_valid(src: &[f64], h: usize, w: usize, taps: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let k = SSIM_WINDOW;
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        let line = &src[y * w..(y + 1) * w];
        for x in 0..ow {
            rows[y * ow + x] = taps.iter().zip(&line[x..x + k]).map(|(t, v)| t * v).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|j| taps[j] * rows[(y + j) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM over valid 11×11 Gaussian windows after shaving the borders.
pub fn ssim(a: &LumaMap, b: &LumaMap, shave: usize) -> Result<f64> {
    check_pair(a, b)?;
    let (a, b) = (a.shaved(shave)?, b.shaved(shave)?);
    let (h, w) = (a.height, a.width);
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(BsrnError::Metric(format!(
            "{h}x{w} crop is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"
        )));
    }
    let taps = gaussian_taps();
    let sq = |m: &[f64], n: &[f64]| -> Vec<f64> { m.iter().zip(n).map(|(x, y)| x * y).collect() };
    let mu_a = filter_valid(&a.data, h, w, &taps);
    let mu_b = filter_valid(&b.data, h, w, &taps);
    let e_aa = filter_valid(&sq(&a.data, &a.data), h, w, &taps);
    let e_bb = filter_valid(&sq(&b.data, &b.data), h, w, &taps);
    let e_ab = filter_valid(&sq(&a.data, &b.data), h, w, &taps);

    let c1 = (SSIM_K1 * PEAK).powi(2);
    let c2 = (SSIM_K2 * PEAK).powi(2);
    let n = mu_a.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let var_a = e_aa[i] - ma * ma;
            let var_b = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (var_a + var_b + c2))
        })
        .sum();
    Ok(total / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_map(rng: &mut ChaCha8Rng, h: usize, w: usize) -> LumaMap {
        let data = (0..h * w).map(|_| rng.random_range(16.0..235.0)).collect();
        LumaMap::from_vec(h, w, data).unwrap()
    }

    /// Straight per-window double sum with explicit 2-D weights.
    #[allow(clippy::needless_range_loop)]
    fn ssim_oracle(a: &LumaMap, b: &LumaMap) -> f64 {
        let k = SSIM_WINDOW;
        let mut weights = [[0.0f64; SSIM_WINDOW]; SSIM_WINDOW];
        let mut total_w = 0.0;
        for (i, row) in weights.iter_mut().enumerate() {
            for (j, wt) in row.iter_mut().enumerate() {
                let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
                *wt = (-(di * di + dj * dj) / (2.0 * 1.5 * 1.5)).exp();
                total_w += *wt;
            }
        }
        let (c1, c2) = ((0.01f64 * 255.0).powi(2), (0.03f64 * 255.0).powi(2));
        let mut sum = 0.0;
        let mut count = 0;
        for y0 in 0..=a.height() - k {
            for x0 in 0..=a.width() - k {
                let (mut ma, mut mb) = (0.0, 0.0);
                for i in 0..k {
                    for j in 0..k {
                        let wt = weights[i][j] / total_w;
                        ma += wt * a.get(y0 + i, x0 + j);
                        mb += wt * b.get(y0 + i, x0 + j);
                    }
                }
                let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
                for i in 0..k {
                    for j in 0..k {
                        let wt = weights[i][j] / total_w;
                        let (da, db) = (a.get(y0 + i, x0 + j) - ma, b.get(y0 + i, x0 + j) - mb);
                        va += wt * da * da;
                        vb += wt * db * db;
                        cov += wt * da * db;
                    }
                }
                sum += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                    / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
        sum / count as f64
    }

    #[test]
    fn luma_reference_colors() {
        let y = |v: f32| rgb_to_y(&FeatureMap::filled(3, 1, 1, v)).unwrap().get(0, 0);
        assert!((y(0.0) - 16.0).abs() < 1e-12);
        assert!((y(1.0) - 235.0).abs() < 1e-9);
        assert!((y(0.5) - 125.5).abs() < 1e-9);
        assert!(rgb_to_y(&FeatureMap::zeros(1, 2, 2)).is_err());
    }

    #[test]
    fn psnr_closed_forms() {
        let a = LumaMap::from_fn(20, 20, |y, x| 50.0 + (y * 3 + x) as f64);
        let b = LumaMap::from_fn(20, 20, |y, x| a.get(y, x) + 1.0);
        let one = psnr(&a, &b, 2).unwrap();
        assert!((one - 20.0 * 255f64.log10()).abs() < 1e-9);
        assert!((one - 48.1308).abs() < 1e-3);
        let c = LumaMap::from_fn(20, 20, |y, x| a.get(y, x) + 2.0);
        let two = psnr(&a, &c, 2).unwrap();
        assert!((one - two - 20.0 * 2f64.log10()).abs() < 1e-9);
        assert_eq!(psnr(&a, &a, 0).unwrap(), f64::INFINITY);
    }

    #[test]
    fn psnr_ignores_shaved_border() {
        let a = LumaMap::from_fn(10, 10, |_, _| 100.0);
        let b = LumaMap::from_fn(10, 10, |y, x| if y == 0 || x == 9 { 0.0 } else { 100.0 });
        assert_eq!(psnr(&a, &b, 1).unwrap(), f64::INFINITY);
        assert!(psnr(&a, &b, 0).unwrap().is_finite());
        assert!(psnr(&a, &b, 5).is_err());
        let small = LumaMap::from_fn(9, 10, |_, _| 0.0);
        assert!(psnr(&a, &small, 0).is_err());
    }

    #[test]
    fn ssim_matches_direct_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..3 {
            let a = random_map(&mut rng, 17, 14);
            let noise = random_map(&mut rng, 17, 14);
            let b = LumaMap::from_fn(17, 14, |y, x| {
                0.6 * a.get(y, x) + 0.4 * noise.get(y, x) + (y + x) as f64
            });
            let got = ssim(&a, &b, 0).unwrap();
            let want = ssim_oracle(&a, &b);
            assert!((got - want).abs() < 1e-6, "{got} vs {want}");
        }
    }

    #[test]
    fn ssim_of_inverted_image_is_low() {
        let a = LumaMap::from_fn(32, 32, |y, x| {
            128.0 + 60.0 * ((y as f64 / 3.0).sin() * (x as f64 / 4.0).cos())
        });
        let inv = LumaMap::from_fn(32, 32, |y, x| 255.0 - a.get(y, x));
        assert!(ssim(&a, &inv, 0).unwrap() < 0.5);
    }

    #[test]
    fn ssim_rejects_small_crops() {
        let a = LumaMap::from_fn(14, 14, |_, _| 1.0);
        assert!(ssim(&a, &a, 0).is_ok());
        assert!(ssim(&a, &a, 2).is_err());
    }

    #[test]
    fn psnr_monotone_in_single_pixel_error() {
        let a = LumaMap::from_fn(8, 8, |y, x| (y * 8 + x) as f64);
        let mut prev = f64::INFINITY;
        for e in 1..6 {
            let mut d = a.data().to_vec();
            d[27] += e as f64 * 0.5;
            let v = psnr(&a, &LumaMap::from_vec(8, 8, d).unwrap(), 1).unwrap();
            assert!(v < prev);
            prev = v;
        }
    }

    fn luma_strategy() -> impl Strategy<Value = (usize, usize, Vec<f64>, Vec<f64>)> {
        (11usize..16, 11usize..16).prop_flat_map(|(h, w)| {
            (
                Just(h),
                Just(w),
                proptest::collection::vec(0.0f64..255.0, h * w),
                proptest::collection::vec(0.0f64..255.0, h * w),
            )
        })
    }

    proptest! {
        #[test]
        fn metrics_are_symmetric((h, w, a, b) in luma_strategy()) {
            let a = LumaMap::from_vec(h, w, a).unwrap();
            let b = LumaMap::from_vec(h, w, b).unwrap();
            prop_assert_eq!(psnr(&a, &b, 0).unwrap(), psnr(&b, &a, 0).unwrap());
            prop_assert_eq!(ssim(&a, &b, 0).unwrap(), ssim(&b, &a, 0).unwrap());
        }

        #[test]
        fn ssim_self_is_one((h, w, a, _b) in luma_strategy()) {
            let a = LumaMap::from_vec(h, w, a).unwrap();
            prop_assert_eq!(ssim(&a, &a, 0).unwrap(), 1.0);
        }

        #[test]
        fn luma_is_affine(p in proptest::array::uniform3(0.0f64..1.0),
                          q in proptest::array::uniform3(0.0f64..1.0),
                          alpha in 0.0f64..1.0) {
            let mix: Vec<f64> = p.iter().zip(&q).map(|(a, b)| alpha * a + (1.0 - alpha) * b).collect();
            let want = alpha * luma(p[0], p[1], p[2]) + (1.0 - alpha) * luma(q[0], q[1], q[2]);
            prop_assert!((luma(mix[0], mix[1], mix[2]) - want).abs() < 1e-6);
        }
    }
}
