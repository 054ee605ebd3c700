//! Ablation and λ-sweep drivers: every arm gets the same data, budget and seeds.

use std::fmt::Write as _;

use super::synth::{Dataset, Sample};
use super::trainer::{train, History, TrainConfig};
use crate::error::{config_err, Result};
use crate::imageio::{dequantize_u8, quantize_u8};
use crate::loss::{LossConfig, LossKind};
use crate::metrics::{evaluate, sharpness, EvalPair, MetricsReport};
use crate::model::{DfnetConfig, DfnetModel, ModelVariant};
use crate::tensor::{Float, Tensor};

/// Name of the arm that swaps the sharpening loss for cross-entropy.
pub const CROSS_ENTROPY_ARM: &str = "cross_entropy";
const EVAL_BATCH: usize = 16;

/// One row of the comparison: an architecture variant trained with a loss.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentArm {
    pub name: String,
    pub variant: ModelVariant,
    pub loss: LossKind,
}

impl ExperimentArm {
    /// Resolves an arm name: any model variant name, or `cross_entropy`
    /// (full model, cross-entropy loss).
    pub fn by_name(name: &str, sharpening: LossConfig) -> Result<Self> {
        if name == CROSS_ENTROPY_ARM {
            return Ok(ExperimentArm {
                name: name.into(),
                variant: ModelVariant::Full,
                loss: LossKind::CrossEntropy {
                    epsilon: sharpening.epsilon,
                },
            });
        }
        let variant: ModelVariant = name.parse().map_err(|_| {
            config_err!("unknown variant {name:?}; valid variants: {}", arm_names().join(", "))
        })?;
        Ok(ExperimentArm {
            name: variant.name().into(),
            variant,
            loss: LossKind::Sharpening(sharpening),
        })
    }
}

pub fn arm_names() -> Vec<&'static str> {
    ModelVariant::ALL
        .iter()
        .map(|v| v.name())
        .chain([CROSS_ENTROPY_ARM])
        .collect()
}

/// The full model, the four structural ablations and the cross-entropy arm.
pub fn ablation_arms(sharpening: LossConfig) -> Vec<ExperimentArm> {
    arm_names()
        .into_iter()
        .map(|n| ExperimentArm::by_name(n, sharpening).expect("built-in arm name"))
        .collect()
}

/// `0.5, 0.75, …, 2.5`.
pub fn default_lambdas() -> Vec<Float> {
    (0..9).map(|i| 0.5 + 0.25 * i as Float).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub sharpness: Float,
    pub history: History,
}

/// Predictions of `model` on `samples`, as evaluation pairs on the 8-bit
/// grid, i.e. exactly what scoring the written saliency maps would see.
/// Unquantized maps make the clipped adaptive threshold of large objects
/// select only pixels whose sigmoid rounds to exactly 1.0.
pub fn predict_pairs(model: &DfnetModel, samples: &[Sample]) -> Result<Vec<EvalPair>> {
    let mut pairs = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_BATCH) {
        let images: Vec<Tensor> = chunk.iter().map(|s| s.image.clone()).collect();
        let masks: Vec<Tensor> = chunk.iter().map(|s| s.mask.clone()).collect();
        let pred = model.predict(&Tensor::stack(&images)?)?;
        pairs.extend(EvalPair::from_batch(&pred, &Tensor::stack(&masks)?)?);
    }
    for p in &mut pairs {
        for v in &mut p.prediction {
            *v = dequantize_u8(quantize_u8(*v));
        }
    }
    Ok(pairs)
}

/// Builds a model from `model_cfg`, trains it on the train split and scores
/// it on the test split.
pub fn train_and_evaluate(
    model_cfg: &DfnetConfig,
    train_cfg: &TrainConfig,
    data: &Dataset,
) -> Result<(DfnetModel, Evaluation)> {
    let mut model = DfnetModel::new(model_cfg.clone())?;
    let history = train(&mut model, &data.train, train_cfg)?;
    let pairs = predict_pairs(&model, &data.test)?;
    let evaluation = Evaluation {
        report: evaluate(&pairs)?,
        sharpness: sharpness(&pairs)?,
        history,
    };
    Ok((model, evaluation))
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: String,
    pub seed: u64,
    pub avg_f: Float,
    pub weighted_f: Float,
    pub max_f: Float,
    pub mae: Float,
    pub sharpness: Float,
}

/// Trains every arm once per seed. The seed drives both initialization and
/// the shuffle/augmentation stream; `on_row` sees each row as it finishes.
pub fn run_ablation(
    model_cfg: &DfnetConfig,
    train_cfg: &TrainConfig,
    arms: &[ExperimentArm],
    seeds: &[u64],
    data: &Dataset,
    mut on_row: impl FnMut(&AblationRow),
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(arms.len() * seeds.len());
    for &seed in seeds {
        for arm in arms {
            let mc = DfnetConfig {
                variant: arm.variant,
                seed,
                ..model_cfg.clone()
            };
            let tc = TrainConfig {
                loss: arm.loss,
                seed,
                ..train_cfg.clone()
            };
            let (_, ev) = train_and_evaluate(&mc, &tc, data)?;
            let row = AblationRow {
                variant: arm.name.clone(),
                seed,
                avg_f: ev.report.avg_f,
                weighted_f: ev.report.weighted_f,
                max_f: ev.report.max_f,
                mae: ev.report.mae,
                sharpness: ev.sharpness,
            };
            on_row(&row);
            rows.push(row);
        }
    }
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("variant,seed,avgF,wF,maxF,MAE,sharpness\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.variant, r.seed, r.avg_f, r.weighted_f, r.max_f, r.mae, r.sharpness
        );
    }
    s
}

/// Median of `metric` over the rows of one arm (mean of the two middle
/// values for an even count); `None` if the arm has no rows.
pub fn median_by_arm(rows: &[AblationRow], arm: &str, metric: impl Fn(&AblationRow) -> Float) -> Option<Float> {
    let mut v: Vec<Float> = rows.iter().filter(|r| r.variant == arm).map(metric).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(Float::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub lambda: Float,
    pub avg_f: Float,
    pub weighted_f: Float,
    pub max_f: Float,
    pub mae: Float,
}

/// One training per `λ` with the sharpening loss; other loss constants come
/// from `train_cfg.loss` when it is a sharpening loss.
pub fn run_lambda_sweep(
    model_cfg: &DfnetConfig,
    train_cfg: &TrainConfig,
    lambdas: &[Float],
    data: &Dataset,
    mut on_row: impl FnMut(&SweepRow),
) -> Result<Vec<SweepRow>> {
    let base = match train_cfg.loss {
        LossKind::Sharpening(cfg) => cfg,
        LossKind::CrossEntropy { .. } => LossConfig::default(),
    };
    let mut rows = Vec::with_capacity(lambdas.len());
    for &lambda in lambdas {
        let tc = TrainConfig {
            loss: LossKind::Sharpening(LossConfig { lambda, ..base }),
            ..train_cfg.clone()
        };
        let (_, ev) = train_and_evaluate(model_cfg, &tc, data)?;
        let row = SweepRow {
            lambda,
            avg_f: ev.report.avg_f,
            weighted_f: ev.report.weighted_f,
            max_f: ev.report.max_f,
            mae: ev.report.mae,
        };
        on_row(&row);
        rows.push(row);
    }
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("lambda,avgF,wF,maxF,MAE\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{},{}", r.lambda, r.avg_f, r.weighted_f, r.max_f, r.mae);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_grid_has_nine_quarter_steps() {
        let l = default_lambdas();
        assert_eq!(l.len(), 9);
        assert_eq!(l[0], 0.5);
        assert_eq!(l[8], 2.5);
        assert!(l.windows(2).all(|w| (w[1] - w[0] - 0.25).abs() < 1e-15));
        assert!(l.contains(&1.75));
    }

    #[test]
    fn six_arms_with_one_cross_entropy() {
        let arms = ablation_arms(LossConfig::default());
        assert_eq!(arms.len(), 6);
        assert_eq!(arms.iter().filter(|a| matches!(a.loss, LossKind::CrossEntropy { .. })).count(), 1);
        let err = ExperimentArm::by_name("without_everything", LossConfig::default()).unwrap_err();
        assert!(err.to_string().contains("without_mag_and_ami"));
    }

    #[test]
    fn median_of_odd_and_even_counts() {
        let row = |v: &str, x: Float| AblationRow {
            variant: v.into(),
            seed: 0,
            avg_f: x,
            weighted_f: 0.0,
            max_f: 0.0,
            mae: 0.0,
            sharpness: 0.0,
        };
        let rows = vec![row("a", 0.3), row("a", 0.9), row("a", 0.5), row("b", 1.0), row("b", 2.0)];
        assert_eq!(median_by_arm(&rows, "a", |r| r.avg_f), Some(0.5));
        assert_eq!(median_by_arm(&rows, "b", |r| r.avg_f), Some(1.5));
        assert_eq!(median_by_arm(&rows, "c", |r| r.avg_f), None);
    }
}
