//! Feature extraction network (backbone taps → MAG → 1×1 fuse) and feature
//! integration network (AMI chain → head → sigmoid saliency map).

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::blocks::{AmiModule, BranchSpec, MagModule};
use crate::checkpoint;
use crate::error::{config_err, format_err, usage_err, Error, Result};
use crate::kernels::Conv2dOptions;
use crate::params::{Binding, ParamId, ParamStore};
use crate::tensor::{Float, Shape, Tensor};

/// Per-pixel value subtracted from every input channel, centring `[0, 1]` images.
pub const INPUT_MEAN: Float = 0.5;

/// Width of the two stem convolutions that precede the first tapped stage.
const STEM_WIDTHS: [usize; 2] = [8, 16];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BackboneKind {
    /// Three taps at `H/4, H/8, H/16`.
    Tiny3,
    /// Four taps at `H/4 … H/32`.
    Tiny4,
    /// No backbone: stage features are supplied by the caller.
    ExternalFeatures,
}

impl fmt::Display for BackboneKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BackboneKind::Tiny3 => "tiny3",
            BackboneKind::Tiny4 => "tiny4",
            BackboneKind::ExternalFeatures => "external",
        })
    }
}

impl FromStr for BackboneKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tiny3" => Ok(BackboneKind::Tiny3),
            "tiny4" => Ok(BackboneKind::Tiny4),
            "external" => Ok(BackboneKind::ExternalFeatures),
            other => Err(config_err!(
                "unknown backbone {other:?} (expected tiny3, tiny4 or external)"
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StageSpec {
    pub name: String,
    /// Stage resolution is the input resolution divided by `2^downsample_exponent`.
    pub downsample_exponent: u32,
    pub channels: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BackboneSpec {
    pub kind: BackboneKind,
    pub stages: Vec<StageSpec>,
}

impl BackboneSpec {
    fn with_widths(kind: BackboneKind, widths: &[usize]) -> Self {
        BackboneSpec {
            kind,
            stages: widths
                .iter()
                .enumerate()
                .map(|(i, &channels)| StageSpec {
                    name: format!("stage{i}"),
                    downsample_exponent: 2 + i as u32,
                    channels,
                })
                .collect(),
        }
    }

    /// Three stages of widths 32, 64, 128.
    pub fn tiny3() -> Self {
        Self::with_widths(BackboneKind::Tiny3, &[32, 64, 128])
    }

    /// Four stages of widths 16, 32, 64, 128.
    pub fn tiny4() -> Self {
        Self::with_widths(BackboneKind::Tiny4, &[16, 32, 64, 128])
    }

    pub fn with_stage_channels(kind: BackboneKind, widths: &[usize]) -> Self {
        Self::with_widths(kind, widths)
    }

    pub fn max_exponent(&self) -> u32 {
        self.stages.iter().map(|s| s.downsample_exponent).max().unwrap_or(0)
    }

    pub fn min_exponent(&self) -> u32 {
        self.stages.iter().map(|s| s.downsample_exponent).min().unwrap_or(0)
    }

    fn validate(&self) -> Result<()> {
        let n = self.stages.len();
        let expected = match self.kind {
            BackboneKind::Tiny3 => Some(3),
            BackboneKind::Tiny4 => Some(4),
            BackboneKind::ExternalFeatures => None,
        };
        if !(3..=4).contains(&n) || expected.is_some_and(|e| e != n) {
            return Err(config_err!("{} backbone with {n} stages", self.kind));
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.channels == 0 {
                return Err(config_err!("stage {} has zero channels", s.name));
            }
            if i > 0 && s.downsample_exponent != self.stages[i - 1].downsample_exponent + 1 {
                return Err(config_err!(
                    "stages must be ordered shallow to deep with consecutive exponents"
                ));
            }
        }
        if self.kind != BackboneKind::ExternalFeatures && self.stages[0].downsample_exponent < 2
        {
            return Err(config_err!("the tiny backbone's first tap is at exponent 2 or deeper"));
        }
        Ok(())
    }
}

/// Structural ablations of the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ModelVariant {
    Full,
    /// Each MAG module replaced by one 3×3 convolution of the same output width.
    WithoutMag,
    /// Each AMI module replaced by plain concatenation + 3×3 convolution.
    WithoutAmi,
    WithoutMagAndAmi,
    /// Channel attention removed from both MAG and AMI modules.
    WithoutCas,
}

impl ModelVariant {
    pub const ALL: [ModelVariant; 5] = [
        ModelVariant::Full,
        ModelVariant::WithoutMag,
        ModelVariant::WithoutAmi,
        ModelVariant::WithoutMagAndAmi,
        ModelVariant::WithoutCas,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelVariant::Full => "full",
            ModelVariant::WithoutMag => "without_mag",
            ModelVariant::WithoutAmi => "without_ami",
            ModelVariant::WithoutMagAndAmi => "without_mag_and_ami",
            ModelVariant::WithoutCas => "without_cas",
        }
    }

    fn uses_mag(self) -> bool {
        matches!(
            self,
            ModelVariant::Full | ModelVariant::WithoutAmi | ModelVariant::WithoutCas
        )
    }

    fn mag_attention(self) -> bool {
        matches!(self, ModelVariant::Full | ModelVariant::WithoutAmi)
    }

    fn ami_attention(self) -> bool {
        matches!(self, ModelVariant::Full | ModelVariant::WithoutMag)
    }
}

impl fmt::Display for ModelVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| config_err!("unknown model variant {s:?}"))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DfnetConfig {
    pub backbone: BackboneSpec,
    /// Output channels of each MAG branch.
    pub branch_channels: usize,
    /// Width `N` of the 1×1 fuse after each MAG module.
    pub fuse_channels: usize,
    /// Output width of each integration step.
    pub ami_channels: usize,
    /// `(height, width)` of network inputs.
    pub input_size: (usize, usize),
    pub seed: u64,
    pub variant: ModelVariant,
}

impl Default for DfnetConfig {
    fn default() -> Self {
        DfnetConfig {
            backbone: BackboneSpec::tiny4(),
            branch_channels: 8,
            fuse_channels: 32,
            ami_channels: 32,
            input_size: (64, 64),
            seed: 0,
            variant: ModelVariant::Full,
        }
    }
}

impl DfnetConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.branch_channels == 0 || self.fuse_channels == 0 || self.ami_channels == 0 {
            return Err(config_err!("channel widths must be positive"));
        }
        let factor = 1usize << self.backbone.max_exponent();
        let (h, w) = self.input_size;
        if h == 0 || w == 0 || h % factor != 0 || w % factor != 0 {
            return Err(config_err!(
                "input size {h}×{w} is not divisible by {factor}"
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
struct ConvParams {
    weight: ParamId,
    bias: ParamId,
}

impl ConvParams {
    fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        in_c: usize,
        out_c: usize,
        k: usize,
    ) -> Result<Self> {
        Ok(ConvParams {
            weight: store.kaiming(
                format!("{prefix}.weight"),
                [out_c, in_c, k, k],
                in_c * k * k,
                rng,
            )?,
            bias: store.zeros(format!("{prefix}.bias"), [1, out_c, 1, 1])?,
        })
    }

    fn apply(&self, tape: &mut Tape, p: &Binding, x: Var) -> Result<Var> {
        tape.conv2d(
            x,
            p.var(self.weight),
            Some(p.var(self.bias)),
            &Conv2dOptions::default(),
        )
    }

    fn apply_relu(&self, tape: &mut Tape, p: &Binding, x: Var) -> Result<Var> {
        let y = self.apply(tape, p, x)?;
        tape.relu(y)
    }
}

#[derive(Clone, Debug, PartialEq)]
enum MultiScale {
    Mag(MagModule),
    Plain(ConvParams),
}

#[derive(Clone, Debug, PartialEq)]
struct ExtractionStage {
    in_channels: usize,
    multi_scale: MultiScale,
    fuse: ConvParams,
}

#[derive(Clone, Debug, PartialEq)]
struct Head {
    refine: ConvParams,
    out: ConvParams,
}

/// Network topology plus its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct DfnetModel {
    pub config: DfnetConfig,
    pub params: ParamStore,
    /// One 3×3 conv per resolution level; level `l` runs after `l` poolings.
    backbone: Vec<ConvParams>,
    stages: Vec<ExtractionStage>,
    /// `integrators[i]` fuses stage `i` with the upsampled result of the deeper chain.
    integrators: Vec<AmiModule>,
    head: Head,
}

impl DfnetModel {
    /// Builds a model with parameters drawn deterministically from `config.seed`.
    pub fn new(config: DfnetConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let variant = config.variant;
        let stages_spec = &config.backbone.stages;

        let mut backbone = Vec::new();
        if config.backbone.kind != BackboneKind::ExternalFeatures {
            let first = stages_spec[0].downsample_exponent as usize;
            let mut in_c = 3;
            for level in 0..=config.backbone.max_exponent() as usize {
                let out_c = if level < first {
                    STEM_WIDTHS[level.min(STEM_WIDTHS.len() - 1)]
                } else {
                    stages_spec[level - first].channels
                };
                backbone.push(ConvParams::new(
                    &mut params,
                    &mut rng,
                    &format!("backbone.level{level}"),
                    in_c,
                    out_c,
                    3,
                )?);
                in_c = out_c;
            }
        }

        let branch_table = BranchSpec::default_table(config.branch_channels);
        let multi_width = branch_table.iter().map(|b| b.out_channels).sum::<usize>();
        let mut stages = Vec::with_capacity(stages_spec.len());
        for (i, s) in stages_spec.iter().enumerate() {
            let prefix = format!("stage{i}");
            let multi_scale = if variant.uses_mag() {
                MultiScale::Mag(MagModule::new(
                    &mut params,
                    &mut rng,
                    &format!("{prefix}.mag"),
                    s.channels,
                    &branch_table,
                    variant.mag_attention(),
                )?)
            } else {
                MultiScale::Plain(ConvParams::new(
                    &mut params,
                    &mut rng,
                    &format!("{prefix}.plain"),
                    s.channels,
                    multi_width,
                    3,
                )?)
            };
            let fuse = ConvParams::new(
                &mut params,
                &mut rng,
                &format!("{prefix}.fuse"),
                multi_width,
                config.fuse_channels,
                1,
            )?;
            stages.push(ExtractionStage {
                in_channels: s.channels,
                multi_scale,
                fuse,
            });
        }

        // Deepest step first, matching execution order.
        let n = stages.len();
        let mut integrators = Vec::with_capacity(n - 1);
        let mut high = config.fuse_channels;
        for i in (0..n - 1).rev() {
            integrators.push(AmiModule::new(
                &mut params,
                &mut rng,
                &format!("integrate{i}"),
                config.fuse_channels,
                high,
                config.ami_channels,
                variant.ami_attention(),
            )?);
            high = config.ami_channels;
        }
        integrators.reverse();

        let head = Head {
            refine: ConvParams::new(
                &mut params,
                &mut rng,
                "head.refine",
                config.ami_channels,
                config.fuse_channels,
                3,
            )?,
            out: ConvParams::new(&mut params, &mut rng, "head.out", config.fuse_channels, 1, 1)?,
        };

        Ok(DfnetModel {
            config,
            params,
            backbone,
            stages,
            integrators,
            head,
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.params.numel()
    }

    pub fn integration_steps(&self) -> usize {
        self.integrators.len()
    }

    /// Channels entering each stage's multi-scale module.
    pub fn stage_channels(&self) -> Vec<usize> {
        self.stages.iter().map(|s| s.in_channels).collect()
    }

    /// Output width of each stage's multi-scale module (before the fuse).
    pub fn multi_scale_channels(&self) -> Vec<usize> {
        self.stages
            .iter()
            .map(|s| match &s.multi_scale {
                MultiScale::Mag(m) => m.out_channels(),
                MultiScale::Plain(_) => 6 * self.config.branch_channels,
            })
            .collect()
    }

    pub fn mag_modules(&self) -> Vec<&MagModule> {
        self.stages
            .iter()
            .filter_map(|s| match &s.multi_scale {
                MultiScale::Mag(m) => Some(m),
                MultiScale::Plain(_) => None,
            })
            .collect()
    }

    /// Parameter ids of the head's output 1×1 conv (weight, bias).
    pub fn head_output_params(&self) -> (ParamId, ParamId) {
        (self.head.out.weight, self.head.out.bias)
    }

    /// Raw backbone taps, shallow to deep. Images in `[0, 1]` are shifted by
    /// [`INPUT_MEAN`] before the first convolution.
    pub fn backbone_forward(&self, tape: &mut Tape, p: &Binding, images: Var) -> Result<Vec<Var>> {
        if self.config.backbone.kind == BackboneKind::ExternalFeatures {
            return Err(usage_err!(
                "model expects external stage features, not images"
            ));
        }
        let s = tape.shape(images);
        if s.channels() != 3 {
            return Err(usage_err!("images must have 3 channels, got {s}"));
        }
        let factor = 1usize << self.config.backbone.max_exponent();
        if !s.height().is_multiple_of(factor) || !s.width().is_multiple_of(factor) {
            return Err(usage_err!(
                "image size {}×{} is not divisible by {factor}",
                s.height(),
                s.width()
            ));
        }
        let first = self.config.backbone.stages[0].downsample_exponent as usize;
        let mut taps = Vec::with_capacity(self.stages.len());
        let shift = tape.constant(Tensor::full(s, -INPUT_MEAN));
        let mut x = tape.add(images, shift)?;
        for (level, conv) in self.backbone.iter().enumerate() {
            if level > 0 {
                x = tape.max_pool2(x)?;
            }
            x = conv.apply_relu(tape, p, x)?;
            if level >= first {
                taps.push(x);
            }
        }
        Ok(taps)
    }

    /// Multi-scale module + fuse on each raw stage tensor.
    pub fn extract_from_taps(&self, tape: &mut Tape, p: &Binding, taps: &[Var]) -> Result<Vec<Var>> {
        if taps.len() != self.stages.len() {
            return Err(config_err!(
                "expected {} stage inputs, got {}",
                self.stages.len(),
                taps.len()
            ));
        }
        self.stages
            .iter()
            .zip(taps)
            .map(|(stage, &x)| {
                let c = tape.shape(x).channels();
                if c != stage.in_channels {
                    return Err(config_err!(
                        "stage built for {} channels got {c}",
                        stage.in_channels
                    ));
                }
                let y = match &stage.multi_scale {
                    MultiScale::Mag(mag) => mag.forward(tape, p, x)?,
                    MultiScale::Plain(conv) => conv.apply_relu(tape, p, x)?,
                };
                stage.fuse.apply_relu(tape, p, y)
            })
            .collect()
    }

    /// Fused stage features, shallow to deep, each with `fuse_channels` channels.
    pub fn extraction_forward(&self, tape: &mut Tape, p: &Binding, images: Var) -> Result<Vec<Var>> {
        let taps = self.backbone_forward(tape, p, images)?;
        self.extract_from_taps(tape, p, &taps)
    }

    /// Saliency map `[B, 1, H, W]` in `(0, 1)` from fused stage features.
    pub fn integration_forward(&self, tape: &mut Tape, p: &Binding, features: &[Var]) -> Result<Var> {
        if features.len() != self.stages.len() {
            return Err(config_err!(
                "expected {} stage features, got {}",
                self.stages.len(),
                features.len()
            ));
        }
        for pair in features.windows(2) {
            let (lo, hi) = (tape.shape(pair[0]), tape.shape(pair[1]));
            if lo.height() != 2 * hi.height() || lo.width() != 2 * hi.width() {
                return Err(config_err!(
                    "stage features must halve in size from shallow to deep: {lo} then {hi}"
                ));
            }
        }
        let mut current = *features.last().expect("at least three stages");
        for (i, ami) in self.integrators.iter().enumerate().rev() {
            let up = tape.upsample_bilinear(current, 2)?;
            current = ami.forward(tape, p, features[i], up)?;
        }
        let x = self.head.refine.apply_relu(tape, p, current)?;
        let logits = self.head.out.apply(tape, p, x)?;
        let factor = 1usize << self.config.backbone.min_exponent();
        let up = tape.upsample_bilinear(logits, factor)?;
        tape.sigmoid(up)
    }

    pub fn forward(&self, tape: &mut Tape, p: &Binding, images: Var) -> Result<Var> {
        let features = self.extraction_forward(tape, p, images)?;
        self.integration_forward(tape, p, &features)
    }

    /// Saliency maps for stage features supplied from outside (external backbone).
    pub fn forward_features(&self, tape: &mut Tape, p: &Binding, stage_inputs: &[Var]) -> Result<Var> {
        let features = self.extract_from_taps(tape, p, stage_inputs)?;
        self.integration_forward(tape, p, &features)
    }

    /// Inference on a frozen copy of the parameters.
    pub fn predict(&self, images: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let x = tape.constant(images.clone());
        let y = self.forward(&mut tape, &p, x)?;
        Ok(tape.value(y).clone())
    }
}

/// Loads precomputed backbone features stored as `stage0`, `stage1`, … in the
/// checkpoint tensor format.
pub fn load_external_stage_features(path: &Path) -> Result<Vec<Tensor>> {
    let entries = checkpoint::read_tensors(path)?;
    validate_stage_features(&entries)?;
    Ok(entries.into_iter().map(|(_, t)| t).collect())
}

fn validate_stage_features(entries: &[(String, Tensor)]) -> Result<()> {
    if !(3..=4).contains(&entries.len()) {
        return Err(format_err!(
            "expected 3 or 4 stage tensors, found {}",
            entries.len()
        ));
    }
    let mut prev: Option<Shape> = None;
    for (i, (name, t)) in entries.iter().enumerate() {
        if *name != format!("stage{i}") {
            return Err(format_err!("tensor {i} is named {name:?}, expected \"stage{i}\""));
        }
        let s = t.shape();
        if let Some(p) = prev {
            if s.batch() != p.batch() || p.height() != 2 * s.height() || p.width() != 2 * s.width() {
                return Err(format_err!(
                    "stage{i} shape {s} does not halve stage{} shape {p}",
                    i - 1
                ));
            }
        }
        prev = Some(s);
    }
    Ok(())
}

/// Writes stage features in the layout read by [`load_external_stage_features`].
pub fn save_external_stage_features(path: &Path, features: &[Tensor]) -> Result<()> {
    let entries: Vec<(String, Tensor)> = features
        .iter()
        .enumerate()
        .map(|(i, t)| (format!("stage{i}"), t.clone()))
        .collect();
    validate_stage_features(&entries)?;
    checkpoint::write_tensors(path, entries.iter().map(|(n, t)| (n.as_str(), t)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(kind: BackboneKind, widths: &[usize], size: usize) -> DfnetConfig {
        DfnetConfig {
            backbone: BackboneSpec::with_stage_channels(kind, widths),
            branch_channels: 2,
            fuse_channels: 4,
            ami_channels: 4,
            input_size: (size, size),
            seed: 9,
            variant: ModelVariant::Full,
        }
    }

    #[test]
    fn config_validation() {
        assert!(DfnetConfig::default().validate().is_ok());
        let mut c = DfnetConfig { input_size: (48, 64), ..Default::default() };
        assert!(c.validate().is_err());
        c = DfnetConfig::default();
        c.backbone.stages.truncate(2);
        assert!(c.validate().is_err());
        c = DfnetConfig::default();
        c.fuse_channels = 0;
        assert!(DfnetModel::new(c).is_err());
    }

    #[test]
    fn variant_names_round_trip() {
        for v in ModelVariant::ALL {
            assert_eq!(v.name().parse::<ModelVariant>().unwrap(), v);
        }
        assert!("without_everything".parse::<ModelVariant>().is_err());
    }

    #[test]
    fn integration_rejects_misordered_features() {
        let model = DfnetModel::new(small(BackboneKind::Tiny3, &[4, 4, 4], 16)).unwrap();
        let mut tape = Tape::new();
        let p = model.params.bind(&mut tape, false);
        let f: Vec<Var> = [1usize, 2, 4]
            .iter()
            .map(|&s| tape.constant(Tensor::zeros([1, 4, s, s])))
            .collect();
        assert!(model.integration_forward(&mut tape, &p, &f).is_err());
        assert!(model.integration_forward(&mut tape, &p, &f[..2]).is_err());
    }

    #[test]
    fn external_model_takes_features() {
        let mut cfg = small(BackboneKind::ExternalFeatures, &[3, 5, 7], 32);
        cfg.backbone.stages.iter_mut().for_each(|s| s.downsample_exponent += 1);
        let model = DfnetModel::new(cfg).unwrap();
        let mut tape = Tape::new();
        let p = model.params.bind(&mut tape, false);
        let feats: Vec<Var> = [(3usize, 8usize), (5, 4), (7, 2)]
            .iter()
            .map(|&(c, s)| tape.constant(Tensor::full([2, c, s, s], 0.1)))
            .collect();
        let y = model.forward_features(&mut tape, &p, &feats).unwrap();
        assert_eq!(tape.shape(y).0, [2, 1, 64, 64]);
        let img = tape.constant(Tensor::zeros([1, 3, 32, 32]));
        assert!(matches!(model.forward(&mut tape, &p, img), Err(Error::Usage(_))));
    }
}
