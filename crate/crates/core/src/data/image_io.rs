//! 8-bit RGB images on disk: binary PPM (`P6`, maxval 255) always, PNG by
//! file extension. Grayscale visualisations are written as binary PGM (`P5`).

use std::fs;
use std::io::BufReader;
use std::path::Path;

use crate::error::{BsrnError, Result};
use crate::tensor::FeatureMap;

/// Interleaved 8-bit RGB, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageRGB8 {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl ImageRGB8 {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(BsrnError::shape("image dimensions must be at least 1x1"));
        }
        if pixels.len() != 3 * width * height {
            return Err(BsrnError::shape(format!(
                "{} bytes cannot back a {width}x{height} RGB image",
                pixels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    /// Planar `3 × h × w` map with values `v / 255`.
    pub fn to_feature_map(&self) -> FeatureMap {
        let (w, h) = (self.width, self.height);
        FeatureMap::from_fn(3, h, w, |c, y, x| {
            f32::from(self.pixels[(y * w + x) * 3 + c]) / 255.0
        })
    }

    /// Clamps to `[0, 1]` and rounds to the nearest 8-bit level.
    pub fn from_feature_map(map: &FeatureMap) -> Result<Self> {
        if map.channels() != 3 {
            return Err(BsrnError::shape(format!(
                "RGB export needs 3 channels, got {}",
                map.channels()
            )));
        }
        let (h, w) = (map.height(), map.width());
        let mut pixels = Vec::with_capacity(3 * h * w);
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    pixels.push(to_u8(map.get(c, y, x)));
                }
            }
        }
        Self::new(w, h, pixels)
    }
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

struct HeaderCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl HeaderCursor<'_> {
    fn skip_whitespace_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&b| b != b'\n') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_whitespace_and_comments();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(BsrnError::parse(start, format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| BsrnError::parse(start, format!("{what} out of range")))
    }
}

/// Parses a netpbm header with the given magic; returns `(width, height, payload offset)`.
fn parse_netpbm_header(bytes: &[u8], magic: &[u8; 2]) -> Result<(usize, usize, usize)> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(BsrnError::parse(
            0,
            format!("missing {} magic", String::from_utf8_lossy(magic)),
        ));
    }
    let mut cur = HeaderCursor { bytes, pos: 2 };
    let width = cur.number("width")?;
    let height = cur.number("height")?;
    let maxval_at = cur.pos;
    let maxval = cur.number("maxval")?;
    if maxval != 255 {
        return Err(BsrnError::parse(maxval_at, format!("unsupported maxval {maxval}")));
    }
    match bytes.get(cur.pos) {
        Some(b) if b.is_ascii_whitespace() => {}
        _ => return Err(BsrnError::parse(cur.pos, "expected whitespace after maxval")),
    }
    if width == 0 || height == 0 {
        return Err(BsrnError::parse(2, "zero image dimension"));
    }
    Ok((width, height, cur.pos + 1))
}

/// Decodes a binary `P6` image. The payload must be exactly `3·w·h` bytes.
pub fn decode_ppm(bytes: &[u8]) -> Result<ImageRGB8> {
    let (width, height, offset) = parse_netpbm_header(bytes, b"P6")?;
    let expected = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(3))
        .ok_or_else(|| BsrnError::parse(2, "image dimensions overflow"))?;
    let payload = &bytes[offset..];
    if payload.len() != expected {
        return Err(BsrnError::parse(
            offset + payload.len().min(expected),
            format!(
                "payload holds {} bytes, header declares {expected}",
                payload.len()
            ),
        ));
    }
    ImageRGB8::new(width, height, payload.to_vec())
}

pub fn encode_ppm(img: &ImageRGB8) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

pub fn encode_pgm(width: usize, height: usize, gray: &[u8]) -> Vec<u8> {
    debug_assert_eq!(gray.len(), width * height);
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(gray);
    out
}

fn is_png(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("png"))
}

fn decode_png(path: &Path) -> Result<ImageRGB8> {
    let file = fs::File::open(path).map_err(|e| BsrnError::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let png_err = |e: png::DecodingError| BsrnError::parse(0, format!("{}: {e}", path.display()));
    let mut reader = decoder.read_info().map_err(png_err)?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| BsrnError::parse(0, "PNG too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(png_err)?;
    let (w, h) = (info.width as usize, info.height as usize);
    let bytes = &buf[..info.buffer_size()];
    let pixels = match info.color_type {
        png::ColorType::Rgb => bytes.to_vec(),
        png::ColorType::Rgba => bytes.chunks_exact(4).flat_map(|p| [p[0], p[1], p[2]]).collect(),
        png::ColorType::Grayscale => bytes.iter().flat_map(|&g| [g, g, g]).collect(),
        png::ColorType::GrayscaleAlpha => bytes.chunks_exact(2).flat_map(|p| [p[0]; 3]).collect(),
        png::ColorType::Indexed => {
            return Err(BsrnError::parse(0, "indexed PNG was not expanded"));
        }
    };
    ImageRGB8::new(w, h, pixels)
}

fn encode_png(img: &ImageRGB8, path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| BsrnError::io(path, e))?;
    let mut encoder = png::Encoder::new(
        std::io::BufWriter::new(file),
        img.width as u32,
        img.height as u32,
    );
    encoder.set_color(png::ColorType::Rgb);
    encoder.set_depth(png::BitDepth::Eight);
    let to_io = |e: png::EncodingError| BsrnError::io(path, std::io::Error::other(e));
    let mut writer = encoder.write_header().map_err(to_io)?;
    writer.write_image_data(&img.pixels).map_err(to_io)?;
    writer.finish().map_err(to_io)
}

/// Loads a `.png` (by extension) or binary PPM.
pub fn load_image(path: impl AsRef<Path>) -> Result<ImageRGB8> {
    let path = path.as_ref();
    if is_png(path) {
        return decode_png(path);
    }
    let bytes = fs::read(path).map_err(|e| BsrnError::io(path, e))?;
    decode_ppm(&bytes)
}

/// Writes PNG for a `.png` extension, binary PPM otherwise.
pub fn save_image(img: &ImageRGB8, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if is_png(path) {
        return encode_png(img, path);
    }
    fs::write(path, encode_ppm(img)).map_err(|e| BsrnError::io(path, e))
}

/// Writes a single-channel map as an 8-bit PGM, min-max stretched to `[0, 255]`.
/// A constant map is written as mid-gray.
pub fn save_gray_map(map: &FeatureMap, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if map.channels() != 1 {
        return Err(BsrnError::shape("gray map export needs exactly one channel"));
    }
    let (lo, hi) = map
        .data()
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = hi - lo;
    let gray: Vec<u8> = map
        .data()
        .iter()
        .map(|&v| {
            if span > 0.0 {
                (((v - lo) / span) * 255.0).round() as u8
            } else {
                128
            }
        })
        .collect();
    fs::write(path, encode_pgm(map.width(), map.height(), &gray)).map_err(|e| BsrnError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn white_pixel() {
        let mut bytes = b"P6\n1 1\n255\n".to_vec();
        bytes.extend_from_slice(&[255, 255, 255]);
        let img = decode_ppm(&bytes).unwrap();
        assert_eq!((img.width(), img.height()), (1, 1));
        assert_eq!(img.pixels(), &[255, 255, 255]);
        assert_eq!(encode_ppm(&img), bytes);
    }

    #[test]
    fn header_comments_are_skipped() {
        let mut bytes = b"P6 # made by hand\n2 # width\n1\n255\n".to_vec();
        bytes.extend_from_slice(&[1, 2, 3, 4, 5, 6]);
        assert_eq!(decode_ppm(&bytes).unwrap().pixels(), &[1, 2, 3, 4, 5, 6]);
    }

    #[test]
    fn payload_mismatch_is_an_error() {
        let mut bytes = b"P6\n2 2\n255\n".to_vec();
        bytes.extend_from_slice(&[0; 11]);
        match decode_ppm(&bytes) {
            Err(BsrnError::Parse { offset, .. }) => assert_eq!(offset, 22),
            other => panic!("expected parse error, got {other:?}"),
        }
        bytes.extend_from_slice(&[0; 2]);
        assert!(decode_ppm(&bytes).is_err());
    }

    #[test]
    fn malformed_headers() {
        assert!(matches!(decode_ppm(b"P5\n1 1\n255\n\0"), Err(BsrnError::Parse { offset: 0, .. })));
        assert!(matches!(decode_ppm(b"P6\nx 1\n255\n"), Err(BsrnError::Parse { offset: 3, .. })));
        assert!(decode_ppm(b"P6\n1 1\n65535\n\0\0\0\0\0\0").is_err());
        assert!(decode_ppm(b"P6\n1 1\n255").is_err());
        assert!(decode_ppm(b"P6\n0 1\n255\n").is_err());
    }

    #[test]
    fn feature_map_conversion() {
        let img = ImageRGB8::new(2, 1, vec![0, 51, 255, 10, 20, 30]).unwrap();
        let map = img.to_feature_map();
        assert_eq!(map.shape(), (3, 1, 2));
        assert_eq!(map.get(1, 0, 0), 0.2);
        assert_eq!(map.get(2, 0, 0), 1.0);
        assert_eq!(ImageRGB8::from_feature_map(&map).unwrap(), img);
        let wild = FeatureMap::from_vec(3, 1, 1, vec![-1.0, 2.0, 0.5]).unwrap();
        assert_eq!(ImageRGB8::from_feature_map(&wild).unwrap().pixels(), &[0, 255, 128]);
    }

    #[test]
    fn file_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let img = ImageRGB8::new(3, 2, (0..18).map(|v| v * 13).collect()).unwrap();
        for name in ["a.ppm", "b.png"] {
            let path = dir.path().join(name);
            save_image(&img, &path).unwrap();
            assert_eq!(load_image(&path).unwrap(), img);
        }
        let map = FeatureMap::from_vec(1, 1, 3, vec![-1.0, 0.0, 1.0]).unwrap();
        let path = dir.path().join("g.pgm");
        save_gray_map(&map, &path).unwrap();
        assert_eq!(fs::read(&path).unwrap(), encode_pgm(3, 1, &[0, 128, 255]));
        assert!(matches!(load_image(dir.path().join("missing.ppm")), Err(BsrnError::Io { .. })));
    }

    proptest! {
        #[test]
        fn ppm_round_trip(w in 1usize..6, h in 1usize..6, seed in any::<u64>()) {
            let pixels: Vec<u8> = (0..3 * w * h).map(|i| (seed.wrapping_mul(i as u64 + 7) >> 13) as u8).collect();
            let img = ImageRGB8::new(w, h, pixels).unwrap();
            prop_assert_eq!(decode_ppm(&encode_ppm(&img)).unwrap(), img);
        }
    }
}
