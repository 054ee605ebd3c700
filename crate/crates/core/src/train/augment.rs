use rand::Rng;

use crate::error::{config_err, usage_err, Result};
use crate::tensor::{Float, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentConfig {
    pub enabled: bool,
    pub hflip_probability: Float,
    /// Rotation angle is drawn uniformly from this range, in degrees.
    pub rotation_range_degrees: (Float, Float),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            enabled: true,
            hflip_probability: 0.5,
            rotation_range_degrees: (0.0, 12.0),
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.hflip_probability) {
            return Err(config_err!("hflip_probability must be in [0, 1], got {}", self.hflip_probability));
        }
        let (lo, hi) = self.rotation_range_degrees;
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(config_err!("rotation range [{lo}, {hi}] is not an interval"));
        }
        Ok(())
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> AugmentParams {
        let flip = rng.gen::<Float>() < self.hflip_probability;
        let (lo, hi) = self.rotation_range_degrees;
        let u: Float = rng.gen();
        AugmentParams {
            flip,
            angle_degrees: lo + (hi - lo) * u,
        }
    }
}

/// One concrete transform: optional horizontal flip, then rotation about the
/// image center.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentParams {
    pub flip: bool,
    pub angle_degrees: Float,
}

impl AugmentParams {
    pub const IDENTITY: AugmentParams = AugmentParams {
        flip: false,
        angle_degrees: 0.0,
    };
}

/// Source coordinate of output pixel `(x, y)` under a rotation by `angle`.
#[inline]
fn rotate_back(x: Float, y: Float, cx: Float, cy: Float, cos: Float, sin: Float) -> (Float, Float) {
    let (dx, dy) = (x - cx, y - cy);
    (cos * dx + sin * dy + cx, -sin * dx + cos * dy + cy)
}

/// Applies `params` to a `[1, C, H, W]` image (bilinear, edge replicate) and
/// a `[1, 1, H, W]` mask (nearest neighbour, zero fill).
pub fn apply_augmentation(image: &Tensor, mask: &Tensor, params: AugmentParams) -> Result<(Tensor, Tensor)> {
    let (is, ms) = (image.shape(), mask.shape());
    if is.batch() != 1 || ms.batch() != 1 || ms.channels() != 1 || is.plane() != ms.plane()
        || is.height() != ms.height()
    {
        return Err(usage_err!("augmentation needs one image and one mask of equal size, got {is} and {ms}"));
    }
    let (h, w) = (is.height(), is.width());
    let (cx, cy) = ((w as Float - 1.0) / 2.0, (h as Float - 1.0) / 2.0);
    let theta = params.angle_degrees.to_radians();
    let (sin, cos) = theta.sin_cos();
    let mut out_img = Tensor::zeros(is);
    let mut out_mask = Tensor::zeros(ms);
    let clamp = |v: Float, n: usize| v.clamp(0.0, (n - 1) as Float);
    for y in 0..h {
        for x in 0..w {
            // Flip first, then rotate: sample the flipped source.
            let (sx, sy) = rotate_back(x as Float, y as Float, cx, cy, cos, sin);
            let sx = if params.flip { (w - 1) as Float - sx } else { sx };

            let (mx, my) = (sx.round(), sy.round());
            if mx >= 0.0 && my >= 0.0 && mx < w as Float && my < h as Float {
                out_mask.set(0, 0, y, x, mask.at(0, 0, my as usize, mx as usize));
            }

            let (fx, fy) = (clamp(sx, w), clamp(sy, h));
            let (x0, y0) = (fx.floor() as usize, fy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
            let (ax, ay) = (fx - x0 as Float, fy - y0 as Float);
            for c in 0..is.channels() {
                let top = image.at(0, c, y0, x0) * (1.0 - ax) + image.at(0, c, y0, x1) * ax;
                let bottom = image.at(0, c, y1, x0) * (1.0 - ax) + image.at(0, c, y1, x1) * ax;
                out_img.set(0, c, y, x, top * (1.0 - ay) + bottom * ay);
            }
        }
    }
    Ok((out_img, out_mask))
}

/// Draws a transform from `cfg` and applies it to both tensors.
pub fn augment<R: Rng + ?Sized>(
    image: &Tensor,
    mask: &Tensor,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Result<(Tensor, Tensor)> {
    let params = if cfg.enabled { cfg.sample(rng) } else { AugmentParams::IDENTITY };
    apply_augmentation(image, mask, params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample(rng: &mut ChaCha8Rng) -> (Tensor, Tensor) {
        let img = Tensor::uniform([1, 3, 12, 10], 0.0, 1.0, rng);
        let mask = Tensor::from_vec(
            [1, 1, 12, 10],
            (0..120).map(|i| if (i / 10) % 5 < 2 && i % 10 > 3 { 1.0 } else { 0.0 }).collect(),
        )
        .unwrap();
        (img, mask)
    }

    #[test]
    fn zero_angle_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (img, mask) = sample(&mut rng);
        let (a, b) = apply_augmentation(&img, &mask, AugmentParams::IDENTITY).unwrap();
        assert_eq!(a, img);
        assert_eq!(b, mask);
    }

    #[test]
    fn double_flip_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (img, mask) = sample(&mut rng);
        let flip = AugmentParams { flip: true, angle_degrees: 0.0 };
        let (a, b) = apply_augmentation(&img, &mask, flip).unwrap();
        assert_ne!(b, mask);
        assert_eq!(a.at(0, 1, 3, 0), img.at(0, 1, 3, 9));
        let (a2, b2) = apply_augmentation(&a, &b, flip).unwrap();
        assert_eq!(a2, img);
        assert_eq!(b2, mask);
    }

    #[test]
    fn mask_stays_binary() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = AugmentConfig::default();
        for _ in 0..100 {
            let (img, mask) = sample(&mut rng);
            let (_, m) = augment(&img, &mask, &cfg, &mut rng).unwrap();
            assert!(m.data().iter().all(|&v| v == 0.0 || v == 1.0));
        }
    }

    #[test]
    fn angles_stay_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = AugmentConfig::default();
        let flips = (0..1000)
            .map(|_| cfg.sample(&mut rng))
            .inspect(|p| assert!((0.0..=12.0).contains(&p.angle_degrees)))
            .filter(|p| p.flip)
            .count();
        assert!((400..600).contains(&flips));
    }
}
