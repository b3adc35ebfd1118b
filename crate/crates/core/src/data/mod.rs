//! Training data: image loading, low-resolution synthesis, aligned patch
//! sampling and dihedral augmentation.
//!
//! Every map leaving this module lies in `[0, 1]`. All randomness comes from
//! the caller's generator.

mod image_io;
mod resize;

use std::path::{Path, PathBuf};

use rand::Rng;

pub use image_io::{
    decode_ppm, encode_pgm, encode_ppm, load_image, save_gray_map, save_image, ImageRGB8,
};
pub use resize::{bicubic_resize, cubic_kernel, CUBIC_A};

use crate::error::{BsrnError, Result};
use crate::tensor::FeatureMap;

const IMAGE_EXTENSIONS: [&str; 2] = ["ppm", "png"];

/// Aligned low/high-resolution crops: `hr` is exactly `scale` times `lr`.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchPair {
    pub lr: FeatureMap,
    pub hr: FeatureMap,
    pub scale: usize,
}

/// Crops the bottom/right remainder so both dims are multiples of `scale`.
pub fn mod_crop(img: &FeatureMap, scale: usize) -> Result<FeatureMap> {
    let (h, w) = (img.height() / scale * scale, img.width() / scale * scale);
    if h == 0 || w == 0 {
        return Err(BsrnError::shape(format!(
            "{}x{} image is smaller than scale {scale}",
            img.height(),
            img.width()
        )));
    }
    img.crop(0, 0, h, w)
}

/// Bicubic downsampling by an integer factor, clamped to `[0, 1]`. The input
/// dims must be multiples of `scale`.
pub fn downsample(hr: &FeatureMap, scale: usize) -> Result<FeatureMap> {
    if scale == 0 || !hr.height().is_multiple_of(scale) || !hr.width().is_multiple_of(scale) {
        return Err(BsrnError::shape(format!(
            "{}x{} is not divisible by {scale}",
            hr.height(),
            hr.width()
        )));
    }
    Ok(bicubic_resize(hr, hr.height() / scale, hr.width() / scale)?.clamp_unit())
}

/// A training image at one scale: the mod-cropped original and its
/// downsampled counterpart.
#[derive(Clone, Debug)]
pub struct ScaledImage {
    pub source: PathBuf,
    pub scale: usize,
    pub hr: FeatureMap,
    pub lr: FeatureMap,
}

impl ScaledImage {
    pub fn new(source: impl Into<PathBuf>, image: &FeatureMap, scale: usize) -> Result<Self> {
        let hr = mod_crop(image, scale)?;
        let lr = downsample(&hr, scale)?;
        Ok(Self {
            source: source.into(),
            scale,
            hr,
            lr,
        })
    }

    fn check_patch(&self, patch: usize) -> Result<()> {
        if patch == 0 || self.lr.height() < patch || self.lr.width() < patch {
            return Err(BsrnError::Sampling {
                path: self.source.clone(),
                message: format!(
                    "{}x{} image cannot supply a {p}x{p} patch at x{}",
                    self.hr.height(),
                    self.hr.width(),
                    self.scale,
                    p = patch * self.scale,
                ),
            });
        }
        Ok(())
    }

    /// The pair whose low-resolution corner is `(y0, x0)`.
    pub fn patch_at(&self, patch: usize, y0: usize, x0: usize) -> Result<PatchPair> {
        self.check_patch(patch)?;
        let f = self.scale;
        Ok(PatchPair {
            lr: self.lr.crop(y0, x0, patch, patch)?,
            hr: self.hr.crop(f * y0, f * x0, f * patch, f * patch)?,
            scale: f,
        })
    }
}

/// Uniformly placed patch. The corner is drawn on the low-resolution grid, so
/// the high-resolution offsets are exact multiples of the scale.
pub fn sample_patch<R: Rng + ?Sized>(
    image: &ScaledImage,
    patch: usize,
    rng: &mut R,
) -> Result<PatchPair> {
    image.check_patch(patch)?;
    let y0 = rng.random_range(0..=image.lr.height() - patch);
    let x0 = rng.random_range(0..=image.lr.width() - patch);
    image.patch_at(patch, y0, x0)
}

/// One of the eight symmetries of the square: `rotations` quarter turns
/// clockwise, then an optional horizontal mirror.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Dihedral {
    pub rotations: u8,
    pub mirror: bool,
}

impl Dihedral {
    pub const IDENTITY: Dihedral = Dihedral {
        rotations: 0,
        mirror: false,
    };

    pub fn all() -> [Dihedral; 8] {
        std::array::from_fn(|i| Dihedral {
            rotations: (i % 4) as u8,
            mirror: i >= 4,
        })
    }

    pub fn apply(&self, map: &FeatureMap) -> Result<FeatureMap> {
        let n = map.height();
        if map.width() != n {
            return Err(BsrnError::shape(format!(
                "dihedral transforms need square maps, got {}x{}",
                map.height(),
                map.width()
            )));
        }
        Ok(FeatureMap::from_fn(map.channels(), n, n, |c, y, x| {
            let (mut sy, mut sx) = (y, x);
            for _ in 0..self.rotations % 4 {
                (sy, sx) = (n - 1 - sx, sy);
            }
            if self.mirror {
                sx = n - 1 - sx;
            }
            map.get(c, sy, sx)
        }))
    }

    pub fn apply_pair(&self, pair: &PatchPair) -> Result<PatchPair> {
        Ok(PatchPair {
            lr: self.apply(&pair.lr)?,
            hr: self.apply(&pair.hr)?,
            scale: pair.scale,
        })
    }
}

/// Applies one uniformly drawn dihedral transform to both halves of the pair.
pub fn augment<R: Rng + ?Sized>(pair: &PatchPair, rng: &mut R) -> Result<PatchPair> {
    let t = Dihedral::all()[rng.random_range(0..8)];
    t.apply_pair(pair)
}

pub fn sample_scale<R: Rng + ?Sized>(rng: &mut R, scales: &[usize]) -> Result<usize> {
    if scales.is_empty() {
        return Err(BsrnError::config("no scales to sample from"));
    }
    Ok(scales[rng.random_range(0..scales.len())])
}

/// Image files directly inside `dir`, sorted by file name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| BsrnError::io(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| BsrnError::io(dir, e))?.path();
        let known = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| IMAGE_EXTENSIONS.iter().any(|k| e.eq_ignore_ascii_case(k)));
        if known && path.is_file() {
            files.push(path);
        }
    }
    files.sort_by(|a, b| a.file_name().cmp(&b.file_name()));
    Ok(files)
}

/// Images held in memory, preprocessed for every training scale.
#[derive(Clone, Debug)]
pub struct Dataset {
    scales: Vec<usize>,
    /// `per_scale[i]` holds every image at `scales[i]`.
    per_scale: Vec<Vec<ScaledImage>>,
}

impl Dataset {
    /// Loads every image of `dir` in file-name order and checks it can
    /// supply `patch`-sized crops at every scale.
    pub fn load_dir(dir: &Path, scales: &[usize], patch: usize) -> Result<Self> {
        let files = list_images(dir)?;
        if files.is_empty() {
            return Err(BsrnError::config(format!(
                "no .ppm or .png images in {}",
                dir.display()
            )));
        }
        let images = files
            .into_iter()
            .map(|p| Ok((load_image(&p)?.to_feature_map(), p)))
            .collect::<Result<Vec<_>>>()?;
        Self::from_images(images, scales, patch)
    }

    pub fn from_images(
        images: Vec<(FeatureMap, PathBuf)>,
        scales: &[usize],
        patch: usize,
    ) -> Result<Self> {
        if images.is_empty() {
            return Err(BsrnError::config("empty dataset"));
        }
        let per_scale = scales
            .iter()
            .map(|&f| {
                images
                    .iter()
                    .map(|(img, path)| {
                        let scaled = ScaledImage::new(path.clone(), img, f)?;
                        scaled.check_patch(patch)?;
                        Ok(scaled)
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            scales: scales.to_vec(),
            per_scale,
        })
    }

    pub fn len(&self) -> usize {
        self.per_scale.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn images(&self, scale: usize) -> Result<&[ScaledImage]> {
        let i = self
            .scales
            .iter()
            .position(|&f| f == scale)
            .ok_or_else(|| BsrnError::config(format!("dataset not prepared for x{scale}")))?;
        Ok(&self.per_scale[i])
    }

    /// `batch` augmented pairs; each draws an image, a position, then a transform.
    pub fn sample_batch<R: Rng + ?Sized>(
        &self,
        rng: &mut R,
        scale: usize,
        batch: usize,
        patch: usize,
    ) -> Result<Vec<PatchPair>> {
        let images = self.images(scale)?;
        (0..batch)
            .map(|_| {
                let image = &images[rng.random_range(0..images.len())];
                let pair = sample_patch(image, patch, rng)?;
                augment(&pair, rng)
            })
            .collect()
    }
}
