//! Weighted F-measure.
//!
//! Errors on the background are replaced by the error of the nearest
//! foreground pixel, smoothed with a Gaussian to model pixel dependency, and
//! background pixels are down-weighted by distance to the foreground.

use super::EvalPair;
use crate::tensor::Float;

pub const WF_KERNEL_SIZE: usize = 7;
pub const WF_SIGMA: Float = 5.0;
/// Background importance is `2 − exp(WF_DECAY · distance)`.
pub const WF_DECAY: Float = std::f64::consts::LN_2 / -5.0;
pub const WF_BETA_SQ: Float = 1.0;

/// Normalized `size × size` Gaussian, row-major.
pub fn gaussian_kernel(size: usize, sigma: Float) -> Vec<Float> {
    let half = (size as Float - 1.0) / 2.0;
    let mut k: Vec<Float> = (0..size * size)
        .map(|i| {
            let (y, x) = ((i / size) as Float - half, (i % size) as Float - half);
            (-(x * x + y * y) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let total: Float = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    k
}

/// Euclidean distance of every pixel to the nearest foreground pixel, with
/// the flat index of that pixel. Ties go to the smallest column, then the
/// smallest row.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceMap {
    pub distance: Vec<Float>,
    pub nearest: Vec<usize>,
}

/// Exact distance transform; `None` when `mask` has no foreground.
pub fn distance_transform(mask: &[bool], height: usize, width: usize) -> Option<DistanceMap> {
    // Nearest foreground row within each column, per row (above wins ties).
    let mut col_nearest = vec![None::<usize>; height * width];
    let mut column_has_fg = vec![false; width];
    for x in 0..width {
        let mut last = None;
        for y in 0..height {
            if mask[y * width + x] {
                last = Some(y);
                column_has_fg[x] = true;
            }
            col_nearest[y * width + x] = last;
        }
        let mut next = None;
        for y in (0..height).rev() {
            if mask[y * width + x] {
                next = Some(y);
            }
            let i = y * width + x;
            col_nearest[i] = match (col_nearest[i], next) {
                (Some(a), Some(b)) => Some(if y - a <= b - y { a } else { b }),
                (a, b) => a.or(b),
            };
        }
    }
    if !column_has_fg.iter().any(|&c| c) {
        return None;
    }

    let mut distance = vec![0.0; height * width];
    let mut nearest = vec![0; height * width];
    for y in 0..height {
        for x in 0..width {
            let mut best = (usize::MAX, 0);
            for q in (0..width).filter(|&q| column_has_fg[q]) {
                let row = col_nearest[y * width + q].expect("column has foreground");
                let d2 = x.abs_diff(q).pow(2) + y.abs_diff(row).pow(2);
                if d2 < best.0 {
                    best = (d2, row * width + q);
                }
            }
            distance[y * width + x] = (best.0 as Float).sqrt();
            nearest[y * width + x] = best.1;
        }
    }
    Some(DistanceMap { distance, nearest })
}

/// Correlation with a square kernel, zero outside the image.
fn filter_zero_padded(src: &[Float], height: usize, width: usize, kernel: &[Float], size: usize) -> Vec<Float> {
    let half = (size / 2) as isize;
    let mut out = vec![0.0; height * width];
    for y in 0..height as isize {
        for x in 0..width as isize {
            let mut acc = 0.0;
            for ky in 0..size as isize {
                let sy = y + ky - half;
                if sy < 0 || sy >= height as isize {
                    continue;
                }
                for kx in 0..size as isize {
                    let sx = x + kx - half;
                    if sx < 0 || sx >= width as isize {
                        continue;
                    }
                    acc += kernel[(ky * size as isize + kx) as usize]
                        * src[(sy * width as isize + sx) as usize];
                }
            }
            out[(y * width as isize + x) as usize] = acc;
        }
    }
    out
}

/// Weighted F-measure of one image; `None` if the ground truth has no foreground.
pub fn weighted_f_image(pair: &EvalPair) -> Option<Float> {
    let (h, w) = (pair.height, pair.width);
    let gt = &pair.ground_truth;
    let dt = distance_transform(gt, h, w)?;
    let err: Vec<Float> = pair
        .prediction
        .iter()
        .zip(gt)
        .map(|(&s, &g)| (s - if g { 1.0 } else { 0.0 }).abs())
        .collect();

    let propagated: Vec<Float> = (0..h * w)
        .map(|i| if gt[i] { err[i] } else { err[dt.nearest[i]] })
        .collect();
    let kernel = gaussian_kernel(WF_KERNEL_SIZE, WF_SIGMA);
    let smoothed = filter_zero_padded(&propagated, h, w, &kernel, WF_KERNEL_SIZE);

    let (mut fg_err, mut bg_err, mut fg_count) = (0.0, 0.0, 0usize);
    for i in 0..h * w {
        if gt[i] {
            fg_err += if smoothed[i] < err[i] { smoothed[i] } else { err[i] };
            fg_count += 1;
        } else {
            bg_err += err[i] * (2.0 - (WF_DECAY * dt.distance[i]).exp());
        }
    }
    let eps = Float::EPSILON;
    let tp = fg_count as Float - fg_err;
    let recall = 1.0 - fg_err / fg_count as Float;
    let precision = tp / (eps + tp + bg_err);
    Some((1.0 + WF_BETA_SQ) * recall * precision / (eps + recall + WF_BETA_SQ * precision))
}
