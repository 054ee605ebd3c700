//! Sharpening loss `L_S = L_F + λ·L_MAE` and the cross-entropy baseline.
//!
//! `L_F` is one minus a soft F-measure whose precision and recall are first
//! averaged over the batch and only then combined:
//!
//! ```text
//! P_m = Σ s·g / (Σ s + ε)        R_m = Σ s·g / (Σ g + ε)
//! P̄ = Σ_m P_m / M               R̄ = Σ_m R_m / M
//! L_F = 1 − (1 + β²)·P̄·R̄ / (β²·P̄ + R̄ + ε)
//! ```
//!
//! Batches are `[M, C, H, W]` tensors; each batch item is one image.

use std::fmt;
use std::str::FromStr;

use crate::autograd::{Tape, Var};
use crate::error::{config_err, usage_err, Error, Result};
use crate::tensor::{Float, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    /// Weight `λ` of the MAE term.
    pub lambda: Float,
    /// `β²` of the soft F-measure.
    pub beta_sq: Float,
    /// Regularizer `ε` in every denominator.
    pub epsilon: Float,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda: 1.75,
            beta_sq: 0.3,
            epsilon: 1e-7,
        }
    }
}

impl LossConfig {
    pub fn with_lambda(lambda: Float) -> Self {
        LossConfig {
            lambda,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(config_err!("lambda must be a finite value >= 0, got {}", self.lambda));
        }
        if !(self.beta_sq > 0.0) || !self.beta_sq.is_finite() {
            return Err(config_err!("beta_sq must be > 0, got {}", self.beta_sq));
        }
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(config_err!("epsilon must be > 0, got {}", self.epsilon));
        }
        Ok(())
    }
}

/// Training objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LossKind {
    Sharpening(LossConfig),
    /// Pixel-mean binary cross-entropy with predictions clamped to `[ε, 1 − ε]`.
    CrossEntropy { epsilon: Float },
}

impl Default for LossKind {
    fn default() -> Self {
        LossKind::Sharpening(LossConfig::default())
    }
}

impl LossKind {
    pub fn name(&self) -> &'static str {
        match self {
            LossKind::Sharpening(_) => "sharpening",
            LossKind::CrossEntropy { .. } => "cross_entropy",
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sharpening" => Ok(LossKind::Sharpening(LossConfig::default())),
            "cross_entropy" => Ok(LossKind::CrossEntropy {
                epsilon: LossConfig::default().epsilon,
            }),
            other => Err(config_err!(
                "unknown loss {other:?} (expected sharpening or cross_entropy)"
            )),
        }
    }
}

/// Decomposed sharpening loss of one batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BatchLossReport {
    /// `L_S = L_F + λ·L_MAE`.
    pub total: Float,
    pub f_loss: Float,
    pub mae: Float,
    pub mean_precision: Float,
    pub mean_recall: Float,
}

fn check_pair(s: &Tensor, g: &Tensor) -> Result<usize> {
    if s.shape() != g.shape() {
        return Err(usage_err!(
            "prediction {} and ground truth {} differ in shape",
            s.shape(),
            g.shape()
        ));
    }
    let m = s.shape().batch();
    if m == 0 || s.shape().item() == 0 {
        return Err(usage_err!("empty batch"));
    }
    Ok(m)
}

fn check_image(s: &[Float], g: &[Float]) -> Result<()> {
    if s.len() != g.len() {
        return Err(usage_err!(
            "prediction has {} pixels, ground truth {}",
            s.len(),
            g.len()
        ));
    }
    Ok(())
}

/// `Σ s·g / (Σ s + ε)` for one image.
pub fn precision_term(s: &[Float], g: &[Float], epsilon: Float) -> Result<Float> {
    check_image(s, g)?;
    let (inter, total) = s
        .iter()
        .zip(g)
        .fold((0.0, 0.0), |(i, t), (&sv, &gv)| (i + sv * gv, t + sv));
    Ok(inter / (total + epsilon))
}

/// `Σ s·g / (Σ g + ε)` for one image.
pub fn recall_term(s: &[Float], g: &[Float], epsilon: Float) -> Result<Float> {
    check_image(s, g)?;
    let (inter, total) = s
        .iter()
        .zip(g)
        .fold((0.0, 0.0), |(i, t), (&sv, &gv)| (i + sv * gv, t + gv));
    Ok(inter / (total + epsilon))
}

/// Per-image sums `(Σ s·g, Σ s, Σ g, Σ |s − g|)`.
fn image_sums(s: &[Float], g: &[Float]) -> (Float, Float, Float, Float) {
    s.iter().zip(g).fold((0.0, 0.0, 0.0, 0.0), |acc, (&sv, &gv)| {
        (acc.0 + sv * gv, acc.1 + sv, acc.2 + gv, acc.3 + (sv - gv).abs())
    })
}

struct BatchStats {
    m: usize,
    n: usize,
    sums: Vec<(Float, Float, Float, Float)>,
    mean_p: Float,
    mean_r: Float,
}

fn batch_stats(s: &Tensor, g: &Tensor, epsilon: Float) -> Result<BatchStats> {
    let m = check_pair(s, g)?;
    let sums: Vec<_> = (0..m)
        .map(|b| image_sums(s.batch_item(b), g.batch_item(b)))
        .collect();
    let mean_p = sums.iter().map(|&(i, ss, _, _)| i / (ss + epsilon)).sum::<Float>() / m as Float;
    let mean_r = sums.iter().map(|&(i, _, gs, _)| i / (gs + epsilon)).sum::<Float>() / m as Float;
    Ok(BatchStats {
        m,
        n: s.shape().item(),
        sums,
        mean_p,
        mean_r,
    })
}

fn f_loss_from_means(p: Float, r: Float, cfg: &LossConfig) -> Float {
    1.0 - (1.0 + cfg.beta_sq) * p * r / (cfg.beta_sq * p + r + cfg.epsilon)
}

/// `L_F` for a batch: batch-mean precision and recall combined into one F-measure.
pub fn f_measure_loss(s: &Tensor, g: &Tensor, cfg: &LossConfig) -> Result<Float> {
    let st = batch_stats(s, g, cfg.epsilon)?;
    Ok(f_loss_from_means(st.mean_p, st.mean_r, cfg))
}

/// `L_MAE`: mean over images of the per-image mean absolute error.
pub fn mae_loss(s: &Tensor, g: &Tensor) -> Result<Float> {
    let m = check_pair(s, g)?;
    let n = s.shape().item() as Float;
    Ok((0..m)
        .map(|b| {
            s.batch_item(b)
                .iter()
                .zip(g.batch_item(b))
                .map(|(a, c)| (a - c).abs())
                .sum::<Float>()
                / n
        })
        .sum::<Float>()
        / m as Float)
}

fn report_from(st: &BatchStats, cfg: &LossConfig) -> BatchLossReport {
    let f_loss = f_loss_from_means(st.mean_p, st.mean_r, cfg);
    let mae = st.sums.iter().map(|&(_, _, _, a)| a / st.n as Float).sum::<Float>() / st.m as Float;
    BatchLossReport {
        total: f_loss + cfg.lambda * mae,
        f_loss,
        mae,
        mean_precision: st.mean_p,
        mean_recall: st.mean_r,
    }
}

pub fn sharpening_loss(s: &Tensor, g: &Tensor, cfg: &LossConfig) -> Result<BatchLossReport> {
    cfg.validate()?;
    Ok(report_from(&batch_stats(s, g, cfg.epsilon)?, cfg))
}

/// Loss report together with `∂L_S/∂S`.
pub fn sharpening_loss_grad(
    s: &Tensor,
    g: &Tensor,
    cfg: &LossConfig,
) -> Result<(BatchLossReport, Tensor)> {
    cfg.validate()?;
    let st = batch_stats(s, g, cfg.epsilon)?;
    let report = report_from(&st, cfg);

    let (p, r, b2) = (st.mean_p, st.mean_r, cfg.beta_sq);
    let num = (1.0 + b2) * p * r;
    let den = b2 * p + r + cfg.epsilon;
    let dl_dp = -((1.0 + b2) * r * den - num * b2) / (den * den) / st.m as Float;
    let dl_dr = -((1.0 + b2) * p * den - num) / (den * den) / st.m as Float;
    let mae_scale = cfg.lambda / (st.m * st.n) as Float;

    let mut grad = Tensor::zeros(s.shape());
    for (b, &(inter, ss, gs, _)) in st.sums.iter().enumerate() {
        let ps = ss + cfg.epsilon;
        let rs = gs + cfg.epsilon;
        let offset = b * st.n;
        let sv = s.batch_item(b);
        let gv = g.batch_item(b);
        for (i, d) in grad.data_mut()[offset..offset + st.n].iter_mut().enumerate() {
            let dp = gv[i] / ps - inter / (ps * ps);
            let dr = gv[i] / rs;
            let diff = sv[i] - gv[i];
            let sign = if diff > 0.0 {
                1.0
            } else if diff < 0.0 {
                -1.0
            } else {
                0.0
            };
            *d = dl_dp * dp + dl_dr * dr + mae_scale * sign;
        }
    }
    Ok((report, grad))
}

fn clamp_prob(v: Float, epsilon: Float) -> Float {
    v.clamp(epsilon, 1.0 - epsilon)
}

/// Mean over every pixel of `−[g·ln s + (1 − g)·ln(1 − s)]`, `s` clamped to `[ε, 1 − ε]`.
pub fn cross_entropy_loss(s: &Tensor, g: &Tensor, epsilon: Float) -> Result<Float> {
    check_pair(s, g)?;
    let n = s.len() as Float;
    Ok(s.data()
        .iter()
        .zip(g.data())
        .map(|(&sv, &gv)| {
            let p = clamp_prob(sv, epsilon);
            -(gv * p.ln() + (1.0 - gv) * (1.0 - p).ln())
        })
        .sum::<Float>()
        / n)
}

pub fn cross_entropy_grad(s: &Tensor, g: &Tensor, epsilon: Float) -> Result<(Float, Tensor)> {
    let value = cross_entropy_loss(s, g, epsilon)?;
    let n = s.len() as Float;
    let mut grad = Tensor::zeros(s.shape());
    for ((d, &sv), &gv) in grad.data_mut().iter_mut().zip(s.data()).zip(g.data()) {
        // Zero slope where the clamp is active.
        if sv > epsilon && sv < 1.0 - epsilon {
            *d = (-gv / sv + (1.0 - gv) / (1.0 - sv)) / n;
        }
    }
    Ok((value, grad))
}

/// Records `L_S` of the saliency maps `s` against the constant `target`.
pub fn sharpening_loss_on(
    tape: &mut Tape,
    s: Var,
    target: &Tensor,
    cfg: &LossConfig,
) -> Result<(Var, BatchLossReport)> {
    let (report, grad) = sharpening_loss_grad(tape.value(s), target, cfg)?;
    if !report.total.is_finite() {
        return Err(Error::Numeric(format!("sharpening loss is {}", report.total)));
    }
    Ok((tape.scalar_fn(s, report.total, grad)?, report))
}

pub fn cross_entropy_on(tape: &mut Tape, s: Var, target: &Tensor, epsilon: Float) -> Result<Var> {
    let (value, grad) = cross_entropy_grad(tape.value(s), target, epsilon)?;
    if !value.is_finite() {
        return Err(Error::Numeric(format!("cross-entropy loss is {value}")));
    }
    tape.scalar_fn(s, value, grad)
}

pub fn mae_on(tape: &mut Tape, s: Var, target: &Tensor) -> Result<Var> {
    let value = mae_loss(tape.value(s), target)?;
    let (m, n) = (target.shape().batch(), target.shape().item());
    let scale = 1.0 / (m * n) as Float;
    let mut grad = tape.value(s).clone();
    for (d, &gv) in grad.data_mut().iter_mut().zip(target.data()) {
        let diff = *d - gv;
        *d = if diff > 0.0 {
            scale
        } else if diff < 0.0 {
            -scale
        } else {
            0.0
        };
    }
    tape.scalar_fn(s, value, grad)
}

/// Loss of `s` under `kind`, recorded on `tape`. Returns the scalar and the
/// sharpening decomposition when applicable.
pub fn loss_on(
    tape: &mut Tape,
    s: Var,
    target: &Tensor,
    kind: &LossKind,
) -> Result<(Var, Option<BatchLossReport>)> {
    match kind {
        LossKind::Sharpening(cfg) => {
            let (v, r) = sharpening_loss_on(tape, s, target, cfg)?;
            Ok((v, Some(r)))
        }
        LossKind::CrossEntropy { epsilon } => Ok((cross_entropy_on(tape, s, target, *epsilon)?, None)),
    }
}
