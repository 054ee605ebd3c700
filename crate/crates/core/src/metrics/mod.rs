//! Saliency evaluation: PR and F-measure curves, adaptive-threshold F
//! (avgF), maximum F (maxF), weighted F (wF) and MAE.
//!
//! Conventions shared by every metric:
//!
//! * curve thresholds are the integers `0..=256`; a pixel is salient at
//!   threshold `t` iff `round(255·s) ≥ t`, so `t = 256` predicts nothing;
//! * precision of an empty prediction is 1, recall against an empty ground
//!   truth is 1;
//! * dataset values are means of per-image values (per threshold for curves).

mod weighted;

use std::fmt::Write as _;

use crate::error::{usage_err, Result};
use crate::tensor::{Float, Tensor};

pub use weighted::{
    distance_transform, gaussian_kernel, weighted_f_image, DistanceMap, WF_BETA_SQ,
    WF_DECAY, WF_KERNEL_SIZE, WF_SIGMA,
};

/// `β²` of the evaluation F-measure.
pub const BETA_SQ: Float = 0.3;
/// Number of curve points (thresholds `0..=256`).
pub const CURVE_POINTS: usize = 257;

/// One prediction / ground-truth pair.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalPair {
    pub height: usize,
    pub width: usize,
    /// Saliency in `[0, 1]`, row-major.
    pub prediction: Vec<Float>,
    pub ground_truth: Vec<bool>,
}

impl EvalPair {
    pub fn new(
        height: usize,
        width: usize,
        prediction: Vec<Float>,
        ground_truth: Vec<bool>,
    ) -> Result<Self> {
        let n = height * width;
        if n == 0 || prediction.len() != n || ground_truth.len() != n {
            return Err(usage_err!(
                "pair of {height}×{width} needs {n} values, got {} and {}",
                prediction.len(),
                ground_truth.len()
            ));
        }
        if let Some(v) = prediction.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(usage_err!("prediction value {v} outside [0, 1]"));
        }
        Ok(EvalPair {
            height,
            width,
            prediction,
            ground_truth,
        })
    }

    /// From an 8-bit prediction (divided by 255) and an 8-bit mask (foreground iff ≥ 128).
    pub fn from_u8(height: usize, width: usize, prediction: &[u8], mask: &[u8]) -> Result<Self> {
        Self::new(
            height,
            width,
            prediction.iter().map(|&v| v as Float / 255.0).collect(),
            mask.iter().map(|&v| v >= 128).collect(),
        )
    }

    /// Splits `[B, 1, H, W]` predictions and binary targets into per-image pairs.
    pub fn from_batch(prediction: &Tensor, target: &Tensor) -> Result<Vec<Self>> {
        let s = prediction.shape();
        if s != target.shape() || s.channels() != 1 {
            return Err(usage_err!(
                "need matching single-channel batches, got {s} and {}",
                target.shape()
            ));
        }
        (0..s.batch())
            .map(|b| {
                Self::new(
                    s.height(),
                    s.width(),
                    prediction.batch_item(b).to_vec(),
                    target.batch_item(b).iter().map(|&v| v >= 0.5).collect(),
                )
            })
            .collect()
    }

    pub fn len(&self) -> usize {
        self.prediction.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prediction.is_empty()
    }

    pub fn foreground(&self) -> usize {
        self.ground_truth.iter().filter(|&&g| g).count()
    }
}

/// `(1 + β²)·p·r / (β²·p + r)`, or 0 when the denominator vanishes.
pub fn f_measure(precision: Float, recall: Float, beta_sq: Float) -> Float {
    let den = beta_sq * precision + recall;
    if den == 0.0 {
        0.0
    } else {
        (1.0 + beta_sq) * precision * recall / den
    }
}

/// Precision and recall of a binary prediction given counts, with the
/// empty-set conventions of this module.
pub fn precision_recall(true_pos: usize, predicted: usize, actual: usize) -> (Float, Float) {
    let p = if predicted == 0 {
        1.0
    } else {
        true_pos as Float / predicted as Float
    };
    let r = if actual == 0 {
        1.0
    } else {
        true_pos as Float / actual as Float
    };
    (p, r)
}

/// 8-bit level of a saliency value (round half up).
#[inline]
pub fn quantize(s: Float) -> usize {
    (255.0 * s).round() as usize
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurvePoint {
    pub threshold: usize,
    pub precision: Float,
    pub recall: Float,
    pub f_measure: Float,
}

/// PR curve and F-measure curve on the 257 integer thresholds.
#[derive(Clone, Debug, PartialEq)]
pub struct Curve {
    pub points: Vec<CurvePoint>,
}

impl Curve {
    /// CSV with header `threshold,precision,recall,f_measure` and one row per threshold.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("threshold,precision,recall,f_measure\n");
        for p in &self.points {
            let _ = writeln!(s, "{},{},{},{}", p.threshold, p.precision, p.recall, p.f_measure);
        }
        s
    }
}

/// Per-threshold precision and recall of one image.
fn image_pr(pair: &EvalPair) -> Vec<(Float, Float)> {
    let mut all = [0usize; 256];
    let mut fg = [0usize; 256];
    for (&s, &g) in pair.prediction.iter().zip(&pair.ground_truth) {
        let q = quantize(s);
        all[q] += 1;
        if g {
            fg[q] += 1;
        }
    }
    let actual = pair.foreground();
    let mut out = vec![(0.0, 0.0); CURVE_POINTS];
    let (mut predicted, mut true_pos) = (0, 0);
    out[256] = precision_recall(0, 0, actual);
    for t in (0..256).rev() {
        predicted += all[t];
        true_pos += fg[t];
        out[t] = precision_recall(true_pos, predicted, actual);
    }
    out
}

fn non_empty(pairs: &[EvalPair]) -> Result<()> {
    if pairs.is_empty() {
        Err(usage_err!("no evaluation pairs"))
    } else {
        Ok(())
    }
}

pub fn pr_curve(pairs: &[EvalPair]) -> Result<Curve> {
    non_empty(pairs)?;
    let mut sums = vec![(0.0, 0.0); CURVE_POINTS];
    for pair in pairs {
        for (acc, (p, r)) in sums.iter_mut().zip(image_pr(pair)) {
            acc.0 += p;
            acc.1 += r;
        }
    }
    let n = pairs.len() as Float;
    let points = sums
        .into_iter()
        .enumerate()
        .map(|(threshold, (p, r))| {
            let (precision, recall) = (p / n, r / n);
            CurvePoint {
                threshold,
                precision,
                recall,
                f_measure: f_measure(precision, recall, BETA_SQ),
            }
        })
        .collect();
    Ok(Curve { points })
}

pub fn max_f(curve: &Curve) -> Float {
    curve.points.iter().map(|p| p.f_measure).fold(0.0, Float::max)
}

/// Per-image binarization threshold `min(2·mean(S), 1)`.
pub fn adaptive_threshold(prediction: &[Float]) -> Float {
    let mean = prediction.iter().sum::<Float>() / prediction.len() as Float;
    (2.0 * mean).min(1.0)
}

/// F-measure of one image binarized at its adaptive threshold (`s ≥ threshold`).
pub fn adaptive_f_image(pair: &EvalPair) -> Float {
    let thr = adaptive_threshold(&pair.prediction);
    let (mut tp, mut predicted) = (0, 0);
    for (&s, &g) in pair.prediction.iter().zip(&pair.ground_truth) {
        if s >= thr {
            predicted += 1;
            if g {
                tp += 1;
            }
        }
    }
    let (p, r) = precision_recall(tp, predicted, pair.foreground());
    f_measure(p, r, BETA_SQ)
}

pub fn avg_f(pairs: &[EvalPair]) -> Result<Float> {
    non_empty(pairs)?;
    Ok(pairs.iter().map(adaptive_f_image).sum::<Float>() / pairs.len() as Float)
}

pub fn mae_image(pair: &EvalPair) -> Float {
    pair.prediction
        .iter()
        .zip(&pair.ground_truth)
        .map(|(&s, &g)| (s - if g { 1.0 } else { 0.0 }).abs())
        .sum::<Float>()
        / pair.len() as Float
}

pub fn mae(pairs: &[EvalPair]) -> Result<Float> {
    non_empty(pairs)?;
    Ok(pairs.iter().map(mae_image).sum::<Float>() / pairs.len() as Float)
}

/// Mean weighted F over images with foreground, and the number of images
/// skipped because their ground truth has none.
pub fn weighted_f_detailed(pairs: &[EvalPair]) -> Result<(Float, usize)> {
    non_empty(pairs)?;
    let scores: Vec<Float> = pairs.iter().filter_map(weighted_f_image).collect();
    if scores.is_empty() {
        return Err(usage_err!("weighted F needs at least one ground truth with foreground"));
    }
    Ok((
        scores.iter().sum::<Float>() / scores.len() as Float,
        pairs.len() - scores.len(),
    ))
}

pub fn weighted_f(pairs: &[EvalPair]) -> Result<Float> {
    weighted_f_detailed(pairs).map(|(v, _)| v)
}

/// Mean of `|2s − 1|`: 1 for fully confident maps, 0 for a flat 0.5 map.
pub fn sharpness(pairs: &[EvalPair]) -> Result<Float> {
    non_empty(pairs)?;
    let total: Float = pairs
        .iter()
        .map(|p| p.prediction.iter().map(|s| (2.0 * s - 1.0).abs()).sum::<Float>() / p.len() as Float)
        .sum();
    Ok(total / pairs.len() as Float)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub avg_f: Float,
    pub weighted_f: Float,
    pub max_f: Float,
    pub mae: Float,
    /// Both the PR curve and the F-measure curve (one point per threshold).
    pub curve: Curve,
    pub n_images: usize,
    /// Images left out of wF because their ground truth is all background.
    pub weighted_f_skipped: usize,
}

impl MetricsReport {
    pub fn to_text(&self) -> String {
        format!(
            "n_images={}\navgF={:.6}\nwF={:.6}\nmaxF={:.6}\nMAE={:.6}\nwF_skipped={}\n",
            self.n_images, self.avg_f, self.weighted_f, self.max_f, self.mae, self.weighted_f_skipped
        )
    }
}

pub fn evaluate(pairs: &[EvalPair]) -> Result<MetricsReport> {
    let curve = pr_curve(pairs)?;
    let (weighted_f, weighted_f_skipped) = weighted_f_detailed(pairs)?;
    Ok(MetricsReport {
        avg_f: avg_f(pairs)?,
        weighted_f,
        max_f: max_f(&curve),
        mae: mae(pairs)?,
        curve,
        n_images: pairs.len(),
        weighted_f_skipped,
    })
}
