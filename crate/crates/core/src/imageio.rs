//! 8-bit image I/O and directory pairing.
//!
//! Saliency values are written as `round(255·s)` (half up) and read back as
//! `v / 255`; ground-truth masks are foreground where the gray level is ≥ 128.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};
use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};

use crate::error::{format_err, usage_err, Error, Result};
use crate::metrics::EvalPair;
use crate::tensor::{Float, Shape, Tensor};
use crate::train::Sample;

pub const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

/// Gray level of a value in `[0, 1]`, rounding half up.
pub fn quantize_u8(s: Float) -> u8 {
    (255.0 * s.clamp(0.0, 1.0)).round() as u8
}

pub fn dequantize_u8(v: u8) -> Float {
    v as Float / 255.0
}

fn decode_err(path: &Path, e: image::ImageError) -> Error {
    match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => format_err!("{}: {other}", path.display()),
    }
}

/// Grayscale image as `(height, width, row-major levels)`.
pub fn read_gray(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let img = image::open(path).map_err(|e| decode_err(path, e))?.into_luma8();
    Ok((img.height() as usize, img.width() as usize, img.into_raw()))
}

pub fn write_gray(path: &Path, height: usize, width: usize, levels: &[u8]) -> Result<()> {
    let img: GrayImage = ImageBuffer::from_raw(width as u32, height as u32, levels.to_vec())
        .ok_or_else(|| usage_err!("{} levels do not fill {height}×{width}", levels.len()))?;
    img.save(path).map_err(|e| decode_err(path, e))
}

/// Writes a `[1, 1, H, W]` (or single-item) saliency map as an 8-bit PNG.
pub fn write_saliency(path: &Path, map: &Tensor) -> Result<()> {
    let s = map.shape();
    if s.item() != s.plane() {
        return Err(usage_err!("saliency map must be single-channel, got {s}"));
    }
    let levels: Vec<u8> = map.batch_item(0).iter().map(|&v| quantize_u8(v)).collect();
    write_gray(path, s.height(), s.width(), &levels)
}

/// RGB image as a `[1, 3, H, W]` tensor in `[0, 1]`, resized (bilinear) to
/// `size` when given.
pub fn read_rgb(path: &Path, size: Option<(usize, usize)>) -> Result<Tensor> {
    let mut img = image::open(path).map_err(|e| decode_err(path, e))?.into_rgb8();
    if let Some((h, w)) = size {
        if (img.height() as usize, img.width() as usize) != (h, w) {
            img = imageops::resize(&img, w as u32, h as u32, FilterType::Triangle);
        }
    }
    Ok(rgb_to_tensor(&img))
}

fn rgb_to_tensor(img: &RgbImage) -> Tensor {
    let (h, w) = (img.height() as usize, img.width() as usize);
    let mut t = Tensor::zeros(Shape::new(1, 3, h, w));
    for (x, y, Rgb(px)) in img.enumerate_pixels() {
        for (c, &v) in px.iter().enumerate() {
            t.set(0, c, y as usize, x as usize, dequantize_u8(v));
        }
    }
    t
}

/// Writes one item of a `[B, 3, H, W]` tensor as an RGB PNG.
pub fn write_rgb(path: &Path, image: &Tensor, item: usize) -> Result<()> {
    let s = image.shape();
    if s.channels() != 3 {
        return Err(usage_err!("RGB output needs 3 channels, got {s}"));
    }
    let img = RgbImage::from_fn(s.width() as u32, s.height() as u32, |x, y| {
        Rgb(std::array::from_fn(|c| {
            quantize_u8(image.at(item, c, y as usize, x as usize))
        }))
    });
    img.save(path).map_err(|e| decode_err(path, e))
}

/// Writes one item of a `[B, 1, H, W]` binary mask as 0/255 levels.
pub fn write_mask(path: &Path, mask: &Tensor, item: usize) -> Result<()> {
    let levels: Vec<u8> = mask
        .batch_item(item)
        .iter()
        .map(|&v| if v >= 0.5 { 255 } else { 0 })
        .collect();
    let s = mask.shape();
    write_gray(path, s.height(), s.width(), &levels)
}

/// Mask as a `[1, 1, H, W]` tensor of 0/1, resized (nearest) to `size` when given.
pub fn read_mask(path: &Path, size: Option<(usize, usize)>) -> Result<Tensor> {
    let mut img = image::open(path).map_err(|e| decode_err(path, e))?.into_luma8();
    if let Some((h, w)) = size {
        if (img.height() as usize, img.width() as usize) != (h, w) {
            img = imageops::resize(&img, w as u32, h as u32, FilterType::Nearest);
        }
    }
    let (h, w) = (img.height() as usize, img.width() as usize);
    let data = img.pixels().map(|Luma([v])| if *v >= 128 { 1.0 } else { 0.0 }).collect();
    Tensor::from_vec(Shape::new(1, 1, h, w), data)
}

/// Image files of a directory keyed by file stem. Extensions are matched
/// case-insensitively; when two files share a stem the first in name order wins.
pub fn list_images(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        })
        .collect();
    entries.sort();
    let mut out = BTreeMap::new();
    for p in entries {
        if let Some(stem) = p.file_stem().and_then(|s| s.to_str()) {
            out.entry(stem.to_owned()).or_insert(p);
        }
    }
    Ok(out)
}

/// Files present in both directories, paired by stem and sorted by it.
pub fn pair_by_stem(a: &Path, b: &Path) -> Result<Vec<(String, PathBuf, PathBuf)>> {
    let left = list_images(a)?;
    let mut right = list_images(b)?;
    Ok(left
        .into_iter()
        .filter_map(|(stem, pa)| right.remove(&stem).map(|pb| (stem, pa, pb)))
        .collect())
}

/// Loads prediction/ground-truth pairs from two directories. A prediction
/// whose size differs from its mask is resized (bilinear) to the mask size.
pub fn load_eval_pairs(pred_dir: &Path, gt_dir: &Path) -> Result<(Vec<String>, Vec<EvalPair>)> {
    let paired = pair_by_stem(pred_dir, gt_dir)?;
    if paired.is_empty() {
        return Err(usage_err!(
            "no files with matching stems in {} and {}",
            pred_dir.display(),
            gt_dir.display()
        ));
    }
    let mut stems = Vec::with_capacity(paired.len());
    let mut pairs = Vec::with_capacity(paired.len());
    for (stem, pp, gp) in paired {
        let (gh, gw, mask) = read_gray(&gp)?;
        let mut pred = image::open(&pp).map_err(|e| decode_err(&pp, e))?.into_luma8();
        if (pred.height() as usize, pred.width() as usize) != (gh, gw) {
            pred = imageops::resize(&pred, gw as u32, gh as u32, FilterType::Triangle);
        }
        pairs.push(EvalPair::from_u8(gh, gw, pred.as_raw(), &mask)?);
        stems.push(stem);
    }
    Ok((stems, pairs))
}

/// Training samples from `dir/images` and `dir/masks`, paired by stem and
/// resized to `size` (bilinear for images, nearest for masks).
pub fn load_samples(dir: &Path, size: (usize, usize)) -> Result<Vec<Sample>> {
    let (images, masks) = (dir.join("images"), dir.join("masks"));
    let paired = pair_by_stem(&images, &masks)?;
    if paired.is_empty() {
        return Err(usage_err!(
            "no files with matching stems in {} and {}",
            images.display(),
            masks.display()
        ));
    }
    paired
        .into_iter()
        .map(|(_, ip, mp)| Ok(Sample::new(read_rgb(&ip, Some(size))?, read_mask(&mp, Some(size))?)))
        .collect()
}

/// Writes samples as `images/{index:04}.png` and `masks/…` under `dir`.
pub fn write_samples(dir: &Path, samples: &[Sample]) -> Result<()> {
    let (images, masks) = (dir.join("images"), dir.join("masks"));
    for d in [&images, &masks] {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    for (i, s) in samples.iter().enumerate() {
        let name = format!("{i:04}.png");
        write_rgb(&images.join(&name), &s.image, 0)?;
        write_mask(&masks.join(&name), &s.mask, 0)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantization_rounds_half_up() {
        assert_eq!(quantize_u8(0.5), 128);
        assert_eq!(quantize_u8(0.0), 0);
        assert_eq!(quantize_u8(1.0), 255);
        assert_eq!(quantize_u8(1.0 / 510.0), 1);
        for v in 0..=255u8 {
            assert_eq!(quantize_u8(dequantize_u8(v)), v);
        }
    }

    #[test]
    fn gray_round_trip_and_pairing() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a");
        let b = dir.path().join("b");
        fs::create_dir_all(&a).unwrap();
        fs::create_dir_all(&b).unwrap();
        let levels: Vec<u8> = (0..12).map(|i| (i * 20) as u8).collect();
        write_gray(&a.join("x.png"), 3, 4, &levels).unwrap();
        write_gray(&a.join("only_a.png"), 3, 4, &levels).unwrap();
        write_gray(&b.join("x.PNG"), 3, 4, &levels).unwrap();
        assert_eq!(read_gray(&a.join("x.png")).unwrap(), (3, 4, levels));
        let pairs = pair_by_stem(&a, &b).unwrap();
        assert_eq!(pairs.len(), 1);
        assert_eq!(pairs[0].0, "x");
        let (stems, eval) = load_eval_pairs(&a, &b).unwrap();
        assert_eq!(stems, vec!["x"]);
        assert_eq!(eval[0].foreground(), 5);
        fs::remove_file(b.join("x.PNG")).unwrap();
        assert!(matches!(load_eval_pairs(&a, &b), Err(Error::Usage(_))));
    }

    #[test]
    fn samples_round_trip_through_png() {
        use crate::train::{generate_synthetic, SyntheticDatasetSpec};
        let data = generate_synthetic(&SyntheticDatasetSpec {
            n_train: 3,
            n_test: 0,
            canvas: (32, 32),
            size_range: (0.2, 0.5),
            ..Default::default()
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_samples(dir.path(), &data.train).unwrap();
        let back = load_samples(dir.path(), (32, 32)).unwrap();
        assert_eq!(back.len(), 3);
        for (a, b) in data.train.iter().zip(&back) {
            assert_eq!(a.image, b.image);
            assert_eq!(a.mask, b.mask);
        }
    }

    #[test]
    fn corrupt_file_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.png");
        fs::write(&p, b"not a png").unwrap();
        assert!(matches!(read_gray(&p), Err(Error::Format(_))));
    }
}
