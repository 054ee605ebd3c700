//! Channel attention, multi-scale attention guided (MAG) and attention-based
//! multi-level integrator (AMI) blocks.
//!
//! Blocks hold [`ParamId`]s into a [`ParamStore`]; their `forward` methods
//! read parameters through a [`Binding`] so the same block can run on any tape.

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::error::{config_err, Result};
use crate::kernels::{self, Conv2dOptions};
use crate::params::{Binding, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Default squeeze ratio of the channel attention bottleneck.
pub const CA_REDUCTION: usize = 4;

/// Kernel extents covered by the six MAG branches, in branch order.
pub const MAG_EXTENTS: [usize; 6] = [1, 3, 5, 7, 9, 11];

/// Squeeze-excitation style channel gating:
/// `x · sigmoid(dense2(relu(dense1(gap(x)))))`.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelAttention {
    pub channels: usize,
    pub hidden: usize,
    pub dense1_w: ParamId,
    pub dense1_b: ParamId,
    pub dense2_w: ParamId,
    pub dense2_b: ParamId,
}

impl ChannelAttention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        prefix: &str,
        channels: usize,
        reduction: usize,
    ) -> Result<Self> {
        if channels == 0 || reduction == 0 {
            return Err(config_err!(
                "channel attention needs channels and reduction >= 1 (got {channels}, {reduction})"
            ));
        }
        let hidden = (channels / reduction).max(1);
        Ok(ChannelAttention {
            channels,
            hidden,
            dense1_w: store.kaiming(
                format!("{prefix}.dense1.weight"),
                [hidden, channels, 1, 1],
                channels,
                rng,
            )?,
            dense1_b: store.zeros(format!("{prefix}.dense1.bias"), [1, hidden, 1, 1])?,
            dense2_w: store.kaiming(
                format!("{prefix}.dense2.weight"),
                [channels, hidden, 1, 1],
                hidden,
                rng,
            )?,
            dense2_b: store.zeros(format!("{prefix}.dense2.bias"), [1, channels, 1, 1])?,
        })
    }

    /// Per-channel weights in `(0, 1)`, shaped `[B, C, 1, 1]`.
    pub fn weights(&self, tape: &mut Tape, p: &Binding, x: Var) -> Result<Var> {
        let c = tape.shape(x).channels();
        if c != self.channels {
            return Err(config_err!(
                "channel attention built for {} channels got {c}",
                self.channels
            ));
        }
        let squeezed = tape.global_avg_pool(x)?;
        let h = tape.dense(squeezed, p.var(self.dense1_w), Some(p.var(self.dense1_b)))?;
        let h = tape.relu(h)?;
        let h = tape.dense(h, p.var(self.dense2_w), Some(p.var(self.dense2_b)))?;
        tape.sigmoid(h)
    }

    pub fn forward(&self, tape: &mut Tape, p: &Binding, x: Var) -> Result<Var> {
        let w = self.weights(tape, p, x)?;
        tape.scale_channels(x, w)
    }
}

/// How one MAG branch realizes its target kernel extent.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BranchSpec {
    pub target_extent: usize,
    pub base_kernel: usize,
    pub dilation: usize,
    /// `1×k` then `k×1` instead of one `k×k` convolution.
    pub factorized: bool,
    pub out_channels: usize,
}

impl BranchSpec {
    /// The six-branch table: direct 1×1 and 3×3, 3×3 dilated by 2 (5), factorized
    /// 7, 3×3 dilated by 4 (9) and factorized 3 dilated by 5 (11).
    pub fn default_table(out_channels: usize) -> [BranchSpec; 6] {
        let spec = |target_extent, base_kernel, dilation, factorized| BranchSpec {
            target_extent,
            base_kernel,
            dilation,
            factorized,
            out_channels,
        };
        [
            spec(1, 1, 1, false),
            spec(3, 3, 1, false),
            spec(5, 3, 2, false),
            spec(7, 7, 1, true),
            spec(9, 3, 4, false),
            spec(11, 3, 5, true),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_kernel == 0 || self.dilation == 0 || self.out_channels == 0 {
            return Err(config_err!("degenerate branch {self:?}"));
        }
        let extent = effective_kernel_extent(self);
        if extent != self.target_extent {
            return Err(config_err!(
                "branch realizes extent {extent} but targets {}",
                self.target_extent
            ));
        }
        Ok(())
    }
}

/// Receptive extent of a branch: `k + (k − 1)(r − 1)`. Factorized branches
/// cover the same extent as their square equivalent.
pub fn effective_kernel_extent(spec: &BranchSpec) -> usize {
    kernels::dilated_extent(spec.base_kernel, spec.dilation)
}

#[derive(Clone, Debug, PartialEq)]
enum BranchConv {
    Square {
        weight: ParamId,
    },
    Factorized {
        /// `[out, in, 1, k]`, no bias.
        row: ParamId,
        /// `[out, out, k, 1]`.
        col: ParamId,
    },
}

/// A realized branch: convolution(s) with "same" padding, bias, then ReLU.
#[derive(Clone, Debug, PartialEq)]
pub struct Branch {
    pub spec: BranchSpec,
    conv: BranchConv,
    bias: ParamId,
}

impl Branch {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        prefix: &str,
        in_channels: usize,
        spec: BranchSpec,
    ) -> Result<Self> {
        spec.validate()?;
        let (k, out) = (spec.base_kernel, spec.out_channels);
        let conv = if spec.factorized {
            BranchConv::Factorized {
                row: store.kaiming(
                    format!("{prefix}.row.weight"),
                    [out, in_channels, 1, k],
                    in_channels * k,
                    rng,
                )?,
                col: store.kaiming(format!("{prefix}.col.weight"), [out, out, k, 1], out * k, rng)?,
            }
        } else {
            BranchConv::Square {
                weight: store.kaiming(
                    format!("{prefix}.weight"),
                    [out, in_channels, k, k],
                    in_channels * k * k,
                    rng,
                )?,
            }
        };
        let bias = store.zeros(format!("{prefix}.bias"), [1, out, 1, 1])?;
        Ok(Branch { spec, conv, bias })
    }

    pub fn forward(&self, tape: &mut Tape, p: &Binding, x: Var) -> Result<Var> {
        let opts = Conv2dOptions::dilated(self.spec.dilation);
        let bias = Some(p.var(self.bias));
        let y = match &self.conv {
            BranchConv::Square { weight } => tape.conv2d(x, p.var(*weight), bias, &opts)?,
            BranchConv::Factorized { row, col } => {
                let h = tape.conv2d(x, p.var(*row), None, &opts)?;
                tape.conv2d(h, p.var(*col), bias, &opts)?
            }
        };
        tape.relu(y)
    }

    /// The equivalent undilated `n×n` kernel and its bias, built by composing
    /// factorized kernels and zero-inflating dilated ones.
    pub fn dense_equivalent(&self, store: &ParamStore) -> Result<(Tensor, Tensor)> {
        let base = match &self.conv {
            BranchConv::Square { weight } => store.get(*weight).clone(),
            BranchConv::Factorized { row, col } => {
                kernels::compose_separable(store.get(*row), store.get(*col))?
            }
        };
        Ok((
            kernels::zero_inflate(&base, self.spec.dilation),
            store.get(self.bias).clone(),
        ))
    }
}

/// Six parallel branches of extents 1–11, concatenated and (optionally)
/// re-weighted by channel attention.
#[derive(Clone, Debug, PartialEq)]
pub struct MagModule {
    pub in_channels: usize,
    pub branches: Vec<Branch>,
    pub ca: Option<ChannelAttention>,
}

impl MagModule {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        prefix: &str,
        in_channels: usize,
        specs: &[BranchSpec],
        with_attention: bool,
    ) -> Result<Self> {
        let mut extents: Vec<usize> = specs.iter().map(|s| s.target_extent).collect();
        extents.sort_unstable();
        if extents != MAG_EXTENTS {
            return Err(config_err!(
                "MAG needs exactly one branch per extent {MAG_EXTENTS:?}, got {extents:?}"
            ));
        }
        let branches = specs
            .iter()
            .enumerate()
            .map(|(i, &spec)| Branch::new(store, rng, &format!("{prefix}.branch{i}"), in_channels, spec))
            .collect::<Result<Vec<_>>>()?;
        let out: usize = specs.iter().map(|s| s.out_channels).sum();
        let ca = if with_attention {
            Some(ChannelAttention::new(store, rng, &format!("{prefix}.ca"), out, CA_REDUCTION)?)
        } else {
            None
        };
        Ok(MagModule {
            in_channels,
            branches,
            ca,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.branches.iter().map(|b| b.spec.out_channels).sum()
    }

    pub fn forward(&self, tape: &mut Tape, p: &Binding, x: Var) -> Result<Var> {
        let c = tape.shape(x).channels();
        if c != self.in_channels {
            return Err(config_err!(
                "MAG module built for {} input channels got {c}",
                self.in_channels
            ));
        }
        let outs = self
            .branches
            .iter()
            .map(|b| b.forward(tape, p, x))
            .collect::<Result<Vec<_>>>()?;
        let stacked = tape.concat_channels(&outs)?;
        match &self.ca {
            Some(ca) => ca.forward(tape, p, stacked),
            None => Ok(stacked),
        }
    }
}

/// Concatenates a low stage with an already upsampled high stage, gates the
/// result with channel attention (optional), then applies `relu(conv3×3)`.
#[derive(Clone, Debug, PartialEq)]
pub struct AmiModule {
    pub low_channels: usize,
    pub high_channels: usize,
    pub out_channels: usize,
    pub ca: Option<ChannelAttention>,
    pub refine_w: ParamId,
    pub refine_b: ParamId,
}

impl AmiModule {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        prefix: &str,
        low_channels: usize,
        high_channels: usize,
        out_channels: usize,
        with_attention: bool,
    ) -> Result<Self> {
        let cat = low_channels + high_channels;
        if low_channels == 0 || high_channels == 0 || out_channels == 0 {
            return Err(config_err!("AMI module with zero channels"));
        }
        let ca = if with_attention {
            Some(ChannelAttention::new(store, rng, &format!("{prefix}.ca"), cat, CA_REDUCTION)?)
        } else {
            None
        };
        Ok(AmiModule {
            low_channels,
            high_channels,
            out_channels,
            ca,
            refine_w: store.kaiming(
                format!("{prefix}.refine.weight"),
                [out_channels, cat, 3, 3],
                cat * 9,
                rng,
            )?,
            refine_b: store.zeros(format!("{prefix}.refine.bias"), [1, out_channels, 1, 1])?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, p: &Binding, low: Var, high: Var) -> Result<Var> {
        let (ls, hs) = (tape.shape(low), tape.shape(high));
        if (ls.batch(), ls.height(), ls.width()) != (hs.batch(), hs.height(), hs.width()) {
            return Err(config_err!("AMI inputs disagree spatially: low {ls}, high {hs}"));
        }
        if ls.channels() != self.low_channels || hs.channels() != self.high_channels {
            return Err(config_err!(
                "AMI module built for {}+{} channels got {}+{}",
                self.low_channels,
                self.high_channels,
                ls.channels(),
                hs.channels()
            ));
        }
        let cat = tape.concat_channels(&[low, high])?;
        let gated = match &self.ca {
            Some(ca) => ca.forward(tape, p, cat)?,
            None => cat,
        };
        let y = tape.conv2d(
            gated,
            p.var(self.refine_w),
            Some(p.var(self.refine_b)),
            &Conv2dOptions::default(),
        )?;
        tape.relu(y)
    }
}
