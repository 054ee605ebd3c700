//! Synthetic salient-object scenes: one foreground shape on a smooth noise
//! texture, with sizes from small local objects to large ones.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{config_err, Result};
use crate::imageio::{dequantize_u8, quantize_u8};
use crate::tensor::{Float, Shape, Tensor};

/// Minimum gap between any foreground pixel and the image border.
pub const BORDER_MARGIN: usize = 4;
/// Cell size of the coarse noise grid behind the background texture.
const NOISE_CELL: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Disk,
    Rectangle,
    BlobUnion,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Disk, ShapeKind::Rectangle, ShapeKind::BlobUnion];
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDatasetSpec {
    pub n_train: usize,
    pub n_test: usize,
    /// `(height, width)`.
    pub canvas: (usize, usize),
    /// Object area as a fraction of the canvas area.
    pub size_range: (Float, Float),
    /// Per-channel offset between object and background colour.
    pub contrast_range: (Float, Float),
    pub seed: u64,
}

impl Default for SyntheticDatasetSpec {
    fn default() -> Self {
        SyntheticDatasetSpec {
            n_train: 200,
            n_test: 500,
            canvas: (64, 64),
            size_range: (0.1, 0.7),
            contrast_range: (0.2, 0.5),
            seed: 0,
        }
    }
}

impl SyntheticDatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.canvas;
        let (lo, hi) = self.size_range;
        if !(0.0 < lo && lo <= hi) {
            return Err(config_err!("size range [{lo}, {hi}] must be a positive interval"));
        }
        let room = (h.saturating_sub(2 * BORDER_MARGIN) * w.saturating_sub(2 * BORDER_MARGIN)) as Float;
        let canvas = (h * w) as Float;
        if hi * canvas > room || lo * canvas < 1.0 {
            return Err(config_err!(
                "size range [{lo}, {hi}] does not fit a {h}×{w} canvas with a {BORDER_MARGIN} px margin"
            ));
        }
        let (clo, chi) = self.contrast_range;
        if !(0.0 < clo && clo <= chi && chi <= 0.5) {
            return Err(config_err!("contrast range [{clo}, {chi}] must lie in (0, 0.5]"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[1, 3, H, W]`, values on the 8-bit grid `k / 255`.
    pub image: Tensor,
    /// `[1, 1, H, W]` of 0/1.
    pub mask: Tensor,
    /// Generator shape, for synthetic samples.
    pub kind: Option<ShapeKind>,
    /// Requested area fraction, for synthetic samples.
    pub size_fraction: Option<Float>,
}

impl Sample {
    pub fn new(image: Tensor, mask: Tensor) -> Self {
        Sample {
            image,
            mask,
            kind: None,
            size_fraction: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl Dataset {
    /// Stacks samples into `([B, 3, H, W], [B, 1, H, W])`.
    pub fn batch(samples: &[&Sample]) -> Result<(Tensor, Tensor)> {
        let images: Vec<Tensor> = samples.iter().map(|s| s.image.clone()).collect();
        let masks: Vec<Tensor> = samples.iter().map(|s| s.mask.clone()).collect();
        Ok((Tensor::stack(&images)?, Tensor::stack(&masks)?))
    }
}

/// Smooth texture: a coarse uniform grid, bilinearly interpolated.
fn noise_texture(rng: &mut ChaCha8Rng, h: usize, w: usize, amplitude: Float) -> Vec<Float> {
    let (gh, gw) = (h / NOISE_CELL + 2, w / NOISE_CELL + 2);
    let grid: Vec<Float> = (0..gh * gw).map(|_| rng.gen_range(-amplitude..=amplitude)).collect();
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        let fy = y as Float / NOISE_CELL as Float;
        let (y0, ay) = (fy.floor() as usize, fy.fract());
        for x in 0..w {
            let fx = x as Float / NOISE_CELL as Float;
            let (x0, ax) = (fx.floor() as usize, fx.fract());
            let g = |yy: usize, xx: usize| grid[yy * gw + xx];
            out[y * w + x] = (g(y0, x0) * (1.0 - ax) + g(y0, x0 + 1) * ax) * (1.0 - ay)
                + (g(y0 + 1, x0) * (1.0 - ax) + g(y0 + 1, x0 + 1) * ax) * ay;
        }
    }
    out
}

/// Shape geometry in units of a scale `t`, centred on the origin. Every
/// part contains the origin, so the scaled shape grows monotonically with `t`.
enum Geometry {
    Disk,
    /// Half-height and half-width multipliers.
    Rectangle(Float, Float),
    /// `(dy, dx, radius)` of each disk, with `|(dy, dx)| ≤ radius`.
    Blobs(Vec<(Float, Float, Float)>),
}

impl Geometry {
    fn sample(rng: &mut ChaCha8Rng, kind: ShapeKind) -> Self {
        match kind {
            ShapeKind::Disk => Geometry::Disk,
            ShapeKind::Rectangle => {
                let short = rng.gen_range(0.5..=1.0);
                if rng.gen::<bool>() {
                    Geometry::Rectangle(1.0, short)
                } else {
                    Geometry::Rectangle(short, 1.0)
                }
            }
            ShapeKind::BlobUnion => {
                let n = rng.gen_range(2..=4);
                Geometry::Blobs(
                    (0..n)
                        .map(|_| {
                            let r: Float = rng.gen_range(0.45..=0.8);
                            let angle = rng.gen_range(0.0..std::f64::consts::TAU);
                            let d = r * rng.gen_range(0.3..=0.9);
                            (d * angle.sin(), d * angle.cos(), r)
                        })
                        .collect(),
                )
            }
        }
    }

    fn contains(&self, dy: Float, dx: Float, t: Float) -> bool {
        match self {
            Geometry::Disk => dy * dy + dx * dx <= t * t,
            Geometry::Rectangle(hy, hx) => dy.abs() <= hy * t && dx.abs() <= hx * t,
            Geometry::Blobs(parts) => parts.iter().any(|&(oy, ox, r)| {
                let (ey, ex) = (dy - oy * t, dx - ox * t);
                ey * ey + ex * ex <= r * r * t * t
            }),
        }
    }
}

/// Pixels whose centres fall inside the scaled shape and inside the margin box.
fn rasterize(geo: &Geometry, h: usize, w: usize, cy: Float, cx: Float, t: Float) -> Vec<bool> {
    let mut mask = vec![false; h * w];
    for y in BORDER_MARGIN..h - BORDER_MARGIN {
        for x in BORDER_MARGIN..w - BORDER_MARGIN {
            mask[y * w + x] = geo.contains(y as Float - cy, x as Float - cx, t);
        }
    }
    mask
}

fn area(mask: &[bool]) -> usize {
    mask.iter().filter(|&&v| v).count()
}

/// Mask whose pixel area is as close as the shape allows to `target`.
fn shape_mask(rng: &mut ChaCha8Rng, kind: ShapeKind, h: usize, w: usize, target: Float) -> Vec<bool> {
    let geo = Geometry::sample(rng, kind);
    let m = BORDER_MARGIN as Float;
    // Keep the centre far enough from the margins that a disk of the target
    // area fits when it can.
    let half = (target / std::f64::consts::PI).sqrt();
    let centre = |rng: &mut ChaCha8Rng, side: usize| {
        let (lo, hi) = (m + half, side as Float - 1.0 - m - half);
        if lo < hi {
            rng.gen_range(lo..=hi)
        } else {
            (side as Float - 1.0) / 2.0
        }
    };
    let (cy, cx) = (centre(rng, h), centre(rng, w));

    // Bisection on the scale; area is a non-decreasing step function of it.
    let (mut lo, mut hi) = (0.0, (h + w) as Float);
    for _ in 0..50 {
        let mid = 0.5 * (lo + hi);
        if (area(&rasterize(&geo, h, w, cy, cx, mid)) as Float) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let below = rasterize(&geo, h, w, cy, cx, lo);
    let above = rasterize(&geo, h, w, cy, cx, hi);
    let mut mask = if target - area(&below) as Float <= area(&above) as Float - target && area(&below) > 0 {
        below
    } else {
        above
    };
    if area(&mask) == 0 {
        let (y, x) = (cy.round() as usize, cx.round() as usize);
        mask[y * w + x] = true;
    }
    mask
}

fn generate_sample(rng: &mut ChaCha8Rng, spec: &SyntheticDatasetSpec) -> Result<Sample> {
    let (h, w) = spec.canvas;
    let kind = ShapeKind::ALL[rng.gen_range(0..ShapeKind::ALL.len())];
    let size_fraction = rng.gen_range(spec.size_range.0..=spec.size_range.1);
    let mask = shape_mask(rng, kind, h, w, size_fraction * (h * w) as Float);
    let mut image = Tensor::zeros(Shape::new(1, 3, h, w));
    for c in 0..3 {
        let bg = rng.gen_range(0.25..=0.75);
        let contrast = rng.gen_range(spec.contrast_range.0..=spec.contrast_range.1);
        let fg = if rng.gen::<bool>() { bg + contrast } else { bg - contrast };
        let bg_tex = noise_texture(rng, h, w, 0.12);
        let fg_tex = noise_texture(rng, h, w, 0.05);
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let v = if mask[i] { fg + fg_tex[i] } else { bg + bg_tex[i] };
                image.set(0, c, y, x, dequantize_u8(quantize_u8(v)));
            }
        }
    }
    let mask = Tensor::from_vec(
        Shape::new(1, 1, h, w),
        mask.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect(),
    )?;
    Ok(Sample {
        image,
        mask,
        kind: Some(kind),
        size_fraction: Some(size_fraction),
    })
}

/// Deterministic train and test splits; the two splits use independent
/// random streams so changing `n_train` leaves the test split unchanged.
pub fn generate_synthetic(spec: &SyntheticDatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let split = |stream: u64, n: usize| -> Result<Vec<Sample>> {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(stream);
        (0..n).map(|_| generate_sample(&mut rng, spec)).collect()
    };
    Ok(Dataset {
        train: split(0, spec.n_train)?,
        test: split(1, spec.n_test)?,
    })
}
