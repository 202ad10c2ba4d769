//! Byte-to-image conversion and pixel scaling.
//!
//! A binary becomes an `n×n` grayscale image by reading its first `n²`
//! bytes in row-major order. Files shorter than `n²` bytes are not converted.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use image::{DynamicImage, GrayImage as RawGray, ImageFormat};
use log::warn;

use crate::corpus::{family_dirs, sorted_files, DatasetManifest, Realness, SampleRecord, SkippedFile};
use crate::error::{Error, Result};

/// `n×n` 8-bit image, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    size: usize,
    pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(size: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != size * size {
            return Err(Error::Shape { expected: format!("{} pixels", size * size), got: pixels.len().to_string() });
        }
        Ok(GrayImage { size, pixels })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixel(&self, row: usize, col: usize) -> u8 {
        self.pixels[row * self.size + col]
    }

    pub fn write_png(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let raw = RawGray::from_raw(self.size as u32, self.size as u32, self.pixels.clone())
            .expect("pixel count checked at construction");
        raw.save_with_format(path, ImageFormat::Png).map_err(|source| Error::Image { path: path.to_path_buf(), source })
    }
}

/// `n×n` image with values in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaledImage {
    size: usize,
    values: Vec<f64>,
}

impl ScaledImage {
    pub fn new(size: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != size * size {
            return Err(Error::Shape { expected: format!("{} values", size * size), got: values.len().to_string() });
        }
        Ok(ScaledImage { size, values })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Maps `[-1, 1]` back to 8-bit with `v ↦ round(127.5·(v+1))`.
    pub fn to_gray(&self) -> GrayImage {
        let pixels = self.values.iter().map(|&v| (127.5 * (v.clamp(-1.0, 1.0) + 1.0)).round() as u8).collect();
        GrayImage { size: self.size, pixels }
    }
}

/// Row-major fill from the first `n²` bytes of `data`.
pub fn bytes_to_image(data: &[u8], n: usize) -> Result<GrayImage> {
    let needed = n * n;
    if data.len() < needed {
        return Err(Error::InsufficientBytes { needed, got: data.len() });
    }
    Ok(GrayImage { size: n, pixels: data[..needed].to_vec() })
}

/// Centers on the image mean and divides by the largest absolute deviation,
/// so the result spans `[-1, 1]`. A constant image maps to all zeros.
pub fn scale_pixels(img: &GrayImage) -> ScaledImage {
    let count = img.pixels.len() as f64;
    let mean = img.pixels.iter().map(|&p| p as f64).sum::<f64>() / count;
    let spread = img.pixels.iter().map(|&p| (p as f64 - mean).abs()).fold(0.0f64, f64::max);
    let values = if spread == 0.0 {
        vec![0.0; img.pixels.len()]
    } else {
        img.pixels.iter().map(|&p| (p as f64 - mean) / spread).collect()
    };
    ScaledImage { size: img.size, values }
}

/// Reads at most `limit` leading bytes of a file.
pub fn read_prefix(path: &Path, limit: usize) -> std::io::Result<Vec<u8>> {
    let file = fs::File::open(path)?;
    let mut buf = Vec::with_capacity(limit);
    file.take(limit as u64).read_to_end(&mut buf)?;
    Ok(buf)
}

/// Decodes an 8-bit single-channel image; any other pixel mode is rejected.
pub fn read_gray(path: &Path) -> Result<GrayImage> {
    let img = image::open(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })?;
    match img {
        DynamicImage::ImageLuma8(raw) => {
            if raw.width() != raw.height() {
                return Err(Error::Shape {
                    expected: "square image".into(),
                    got: format!("{}x{}", raw.width(), raw.height()),
                });
            }
            Ok(GrayImage { size: raw.width() as usize, pixels: raw.into_raw() })
        }
        other => Err(Error::Shape { expected: "8-bit grayscale".into(), got: format!("{:?}", other.color()) }),
    }
}

/// Like [`read_gray`], resizing to `n×n` when the stored size differs.
/// Non-square inputs are accepted here and stretched.
pub fn read_gray_resized(path: &Path, n: usize) -> Result<GrayImage> {
    let img = image::open(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })?;
    let raw = match img {
        DynamicImage::ImageLuma8(raw) => raw,
        other => return Err(Error::Shape { expected: "8-bit grayscale".into(), got: format!("{:?}", other.color()) }),
    };
    let raw = if raw.width() as usize == n && raw.height() as usize == n {
        raw
    } else {
        image::imageops::resize(&raw, n as u32, n as u32, image::imageops::FilterType::Triangle)
    };
    Ok(GrayImage { size: n, pixels: raw.into_raw() })
}

/// Reads and scales every record of a manifest; returns `len × n²` values.
pub fn load_scaled_images(manifest: &DatasetManifest) -> Result<Vec<f64>> {
    let n = manifest.image_size();
    let mut out = Vec::with_capacity(manifest.len() * n * n);
    for r in manifest.records() {
        out.extend_from_slice(scale_pixels(&read_gray_resized(&r.path, n)?).values());
    }
    Ok(out)
}

/// Output path for a converted sample: `<out>/<family>/<stem>_<n>.png`.
pub fn converted_path(out_dir: &Path, family: &str, source: &Path, n: usize) -> PathBuf {
    let stem = source.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    out_dir.join(family).join(format!("{stem}_{n}.png"))
}

#[derive(Debug, Clone)]
pub struct ConversionReport {
    pub manifest: DatasetManifest,
    /// Inputs shorter than `n²` bytes.
    pub too_short: Vec<PathBuf>,
    /// Inputs that failed with an I/O error.
    pub skipped: Vec<SkippedFile>,
}

/// Converts every qualifying binary under `in_dir/<family>/` to a PNG under
/// `out_dir/<family>/`. Manifest rows point at the written images.
pub fn convert_corpus(in_dir: &Path, n: usize, out_dir: &Path) -> Result<ConversionReport> {
    if n == 0 {
        return Err(Error::field("size", "must be positive"));
    }
    let needed = n * n;
    let mut records = Vec::new();
    let mut too_short = Vec::new();
    let mut skipped = Vec::new();
    for (family, dir) in family_dirs(in_dir)? {
        for source in sorted_files(&dir)? {
            let bytes = match read_prefix(&source, needed) {
                Ok(b) => b,
                Err(e) => {
                    warn!("skipping {}: {e}", source.display());
                    skipped.push(SkippedFile { path: source, reason: e.to_string() });
                    continue;
                }
            };
            let img = match bytes_to_image(&bytes, n) {
                Ok(img) => img,
                Err(_) => {
                    too_short.push(source);
                    continue;
                }
            };
            let target = converted_path(out_dir, &family, &source, n);
            if let Err(e) = img.write_png(&target) {
                warn!("skipping {}: {e}", source.display());
                skipped.push(SkippedFile { path: source, reason: e.to_string() });
                continue;
            }
            let len = fs::metadata(&target).map_err(|e| Error::io(&target, e))?.len();
            records.push(SampleRecord::new(target, family.clone(), Realness::Real, len));
        }
    }
    if records.is_empty() {
        return Err(Error::Empty(format!("no sample under {} has at least {needed} bytes", in_dir.display())));
    }
    Ok(ConversionReport { manifest: DatasetManifest::from_records(records, n, 0)?, too_short, skipped })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ramp_fills_row_major() {
        let data: Vec<u8> = (0..1024u32).map(|i| (i % 256) as u8).collect();
        let img = bytes_to_image(&data, 32).unwrap();
        assert_eq!(img.pixel(0, 0), 0);
        assert_eq!(img.pixel(31, 31), 255);
        for r in 0..32 {
            for c in 0..32 {
                assert_eq!(img.pixel(r, c) as usize, (32 * r + c) % 256);
            }
        }
    }

    #[test]
    fn short_input_is_rejected() {
        match bytes_to_image(&[0u8; 1000], 32) {
            Err(Error::InsufficientBytes { needed, got }) => assert_eq!((needed, got), (1024, 1000)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn constant_image_scales_to_zero() {
        let img = GrayImage::new(4, vec![7; 16]).unwrap();
        assert!(scale_pixels(&img).values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn half_and_half_scales_to_unit() {
        let mut px = vec![0u8; 8];
        px.extend(vec![255u8; 8]);
        let scaled = scale_pixels(&GrayImage::new(4, px).unwrap());
        assert!(scaled.values()[..8].iter().all(|&v| v == -1.0));
        assert!(scaled.values()[8..].iter().all(|&v| v == 1.0));
    }

    #[test]
    fn ramp_scaling_matches_two_pass_oracle() {
        let px: Vec<u8> = (0..64u32).map(|i| (i * 3 % 256) as u8).collect();
        let scaled = scale_pixels(&GrayImage::new(8, px.clone()).unwrap());
        let mut sum = 0.0;
        for &p in &px {
            sum += p as f64;
        }
        let mean = sum / 64.0;
        let mut dev = 0.0f64;
        for &p in &px {
            if (p as f64 - mean).abs() > dev {
                dev = (p as f64 - mean).abs();
            }
        }
        for (i, &p) in px.iter().enumerate() {
            assert!((scaled.values()[i] - (p as f64 - mean) / dev).abs() < 1e-9);
        }
    }

    #[test]
    fn to_gray_maps_endpoints() {
        let s = ScaledImage::new(1, vec![-1.0]).unwrap();
        assert_eq!(s.to_gray().pixels(), [0]);
        let s = ScaledImage::new(1, vec![1.0]).unwrap();
        assert_eq!(s.to_gray().pixels(), [255]);
        let s = ScaledImage::new(1, vec![0.0]).unwrap();
        assert_eq!(s.to_gray().pixels(), [128]);
    }

    #[test]
    fn rgb_image_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rgb.png");
        image::RgbImage::new(4, 4).save(&path).unwrap();
        assert!(read_gray(&path).is_err());
    }

    proptest! {
        #[test]
        fn appending_bytes_never_changes_image(data in prop::collection::vec(any::<u8>(), 64..200), extra in prop::collection::vec(any::<u8>(), 0..50)) {
            let base = bytes_to_image(&data, 8).unwrap();
            let mut longer = data.clone();
            longer.extend(extra);
            prop_assert_eq!(base, bytes_to_image(&longer, 8).unwrap());
        }

        #[test]
        fn scaled_values_in_range_with_zero_mean(px in prop::collection::vec(any::<u8>(), 64)) {
            let scaled = scale_pixels(&GrayImage::new(8, px.clone()).unwrap());
            prop_assert!(scaled.values().iter().all(|v| (-1.0..=1.0).contains(v)));
            let mean = scaled.values().iter().sum::<f64>() / 64.0;
            prop_assert!(mean.abs() < 1e-6);
        }

        #[test]
        fn png_round_trip(px in prop::collection::vec(any::<u8>(), 36)) {
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("x.png");
            let img = GrayImage::new(6, px).unwrap();
            img.write_png(&path).unwrap();
            prop_assert_eq!(read_gray(&path).unwrap(), img);
        }
    }
}
