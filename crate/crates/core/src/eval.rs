//! Per-image evaluation against ground truth, with a bicubic baseline.
//!
//! Network and baseline outputs are clamped and rounded to 8 bits before
//! scoring, exactly as they would be written to disk.

use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::data::{bicubic_resize, downsample, mod_crop, ImageRGB8};
use crate::error::{BsrnError, Result};
use crate::metrics::{psnr, rgb_to_y, ssim};
use crate::model::{forward, Inference, ModelParams};
use crate::tensor::FeatureMap;

#[derive(Clone, Debug, PartialEq)]
pub struct ImageScores {
    pub name: String,
    pub psnr: f64,
    pub ssim: f64,
    pub bicubic_psnr: f64,
    pub bicubic_ssim: f64,
    /// Median wall-clock seconds of one network upscale.
    pub seconds: f64,
}

/// Rounds through the 8-bit export path.
pub fn quantize(img: &FeatureMap) -> Result<FeatureMap> {
    Ok(ImageRGB8::from_feature_map(img)?.to_feature_map())
}

/// Y-channel PSNR and SSIM with `shave` border pixels removed.
pub fn score(output: &FeatureMap, truth: &FeatureMap, shave: usize) -> Result<(f64, f64)> {
    let (a, b) = (rgb_to_y(output)?, rgb_to_y(truth)?);
    Ok((psnr(&a, &b, shave)?, ssim(&a, &b, shave)?))
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => values[n / 2],
        _ => 0.5 * (values[n / 2 - 1] + values[n / 2]),
    }
}

/// Median seconds over `runs` timed calls after one untimed warm-up.
pub fn time_median(runs: usize, mut f: impl FnMut() -> Result<()>) -> Result<f64> {
    f()?;
    let mut times = Vec::with_capacity(runs);
    for _ in 0..runs.max(1) {
        let start = Instant::now();
        f()?;
        times.push(start.elapsed().as_secs_f64());
    }
    Ok(median(&mut times))
}

/// Evaluates one ground-truth image. `scale == 1` skips the network and
/// scores the image against itself.
pub fn evaluate_image(
    name: &str,
    truth: &FeatureMap,
    params: Option<&ModelParams>,
    scale: usize,
    freq_control: Option<usize>,
    timing_runs: usize,
) -> Result<ImageScores> {
    if scale == 1 {
        let (p, s) = score(truth, truth, 1)?;
        return Ok(ImageScores {
            name: name.to_string(),
            psnr: p,
            ssim: s,
            bicubic_psnr: p,
            bicubic_ssim: s,
            seconds: 0.0,
        });
    }
    let params = params.ok_or_else(|| BsrnError::config("a checkpoint is needed above scale 1"))?;
    let hr = mod_crop(truth, scale)?;
    let lr = downsample(&hr, scale)?;
    let mut inference = Inference::new(params.config(), scale);
    if let Some(r) = freq_control {
        inference = inference.with_freq_control(r);
    }

    let output = forward(&lr, params, &inference)?.output;
    let seconds = time_median(timing_runs, || forward(&lr, params, &inference).map(|_| ()))?;
    let (p, s) = score(&quantize(&output)?, &hr, scale)?;

    let baseline = bicubic_resize(&lr, hr.height(), hr.width())?;
    let (bp, bs) = score(&quantize(&baseline)?, &hr, scale)?;
    Ok(ImageScores {
        name: name.to_string(),
        psnr: p,
        ssim: s,
        bicubic_psnr: bp,
        bicubic_ssim: bs,
        seconds,
    })
}

pub fn mean_scores(rows: &[ImageScores]) -> ImageScores {
    let n = rows.len() as f64;
    let mean = |f: fn(&ImageScores) -> f64| rows.iter().map(f).sum::<f64>() / n;
    ImageScores {
        name: "mean".to_string(),
        psnr: mean(|r| r.psnr),
        ssim: mean(|r| r.ssim),
        bicubic_psnr: mean(|r| r.bicubic_psnr),
        bicubic_ssim: mean(|r| r.bicubic_ssim),
        seconds: mean(|r| r.seconds),
    }
}

pub const CSV_HEADER: [&str; 6] = ["image", "psnr", "ssim", "bicubic_psnr", "bicubic_ssim", "seconds"];

/// Writes the per-image rows followed by their mean.
pub fn write_csv<W: std::io::Write>(out: W, rows: &[ImageScores]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let err = |e: csv::Error| BsrnError::Metric(format!("writing CSV: {e}"));
    w.write_record(CSV_HEADER).map_err(err)?;
    for r in rows.iter().chain(std::iter::once(&mean_scores(rows))) {
        w.write_record([
            r.name.clone(),
            r.psnr.to_string(),
            r.ssim.to_string(),
            r.bicubic_psnr.to_string(),
            r.bicubic_ssim.to_string(),
            r.seconds.to_string(),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(|e| BsrnError::io(PathBuf::from("<csv>"), e))
}

pub fn display_name(path: &Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, ModelConfig};

    fn textured(h: usize, w: usize) -> FeatureMap {
        FeatureMap::from_fn(3, h, w, |c, y, x| {
            0.5 + 0.4 * ((y as f32 * 0.7 + c as f32).sin() * (x as f32 * 0.45).cos())
        })
    }

    #[test]
    fn identity_mode_is_perfect() {
        let s = evaluate_image("a", &textured(20, 20), None, 1, None, 1).unwrap();
        assert_eq!(s.psnr, f64::INFINITY);
        assert_eq!(s.ssim, 1.0);
    }

    #[test]
    fn evaluation_runs_through_the_model() {
        let config = ModelConfig::new(4, 2, 2, 1, &[2]).unwrap();
        let params = init_params(&config, 0).unwrap();
        let s = evaluate_image("b", &textured(31, 30), Some(&params), 2, Some(2), 1).unwrap();
        assert!(s.psnr.is_finite() && s.bicubic_psnr.is_finite());
        assert!(s.bicubic_psnr > 20.0);
        assert!(s.seconds > 0.0);
        assert!(evaluate_image("b", &textured(31, 30), Some(&params), 3, None, 1).is_err());
        assert!(evaluate_image("b", &textured(31, 30), None, 2, None, 1).is_err());
    }

    #[test]
    fn mean_row_and_csv() {
        let row = |name: &str, p: f64| ImageScores {
            name: name.into(),
            psnr: p,
            ssim: 0.5,
            bicubic_psnr: 1.0,
            bicubic_ssim: 0.25,
            seconds: 2.0,
        };
        let rows = [row("x", 30.0), row("y", 33.0)];
        assert_eq!(mean_scores(&rows).psnr, 31.5);
        let mut buf = Vec::new();
        write_csv(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next().unwrap(), "image,psnr,ssim,bicubic_psnr,bicubic_ssim,seconds");
        assert_eq!(text.lines().last().unwrap(), "mean,31.5,0.5,1,0.25,2");
    }

    #[test]
    fn median_of_runs() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
        let mut calls = 0;
        time_median(5, || {
            calls += 1;
            Ok(())
        })
        .unwrap();
        assert_eq!(calls, 6);
    }
}
