//! Every dataset metric against a direct, loop-per-definition re-implementation
//! on random 8×8 pairs.

use dfnet::metrics::{avg_f, evaluate, f_measure, mae, max_f, pr_curve, weighted_f, EvalPair, BETA_SQ};
use dfnet::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SIDE: usize = 8;
const PAIRS: usize = 100;
const TOL: Float = 1e-12;

/// Mixed predictions: continuous values, 8-bit levels and exact 0/1, with
/// occasional empty or full masks.
fn random_pairs(seed: u64) -> Vec<EvalPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..PAIRS)
        .map(|i| {
            let n = SIDE * SIDE;
            let fg_rate = [0.0, 0.1, 0.3, 0.5, 1.0][i % 5];
            let g: Vec<bool> = (0..n).map(|_| rng.gen::<Float>() < fg_rate).collect();
            let s: Vec<Float> = (0..n)
                .map(|_| match i % 3 {
                    0 => rng.gen::<Float>(),
                    1 => rng.gen_range(0..=255) as Float / 255.0,
                    _ => [0.0, 1.0][rng.gen_range(0..2)],
                })
                .collect();
            EvalPair::new(SIDE, SIDE, s, g).unwrap()
        })
        .collect()
}

fn oracle_f(p: Float, r: Float, b2: Float) -> Float {
    if b2 * p + r == 0.0 {
        0.0
    } else {
        (1.0 + b2) * p * r / (b2 * p + r)
    }
}

/// Precision/recall of the set `{i : salient(i)}`, empty-set values 1.
fn oracle_pr(pair: &EvalPair, salient: impl Fn(Float) -> bool) -> (Float, Float) {
    let mut tp = 0.0;
    let mut predicted = 0.0;
    let mut actual = 0.0;
    for i in 0..pair.len() {
        let hit = salient(pair.prediction[i]);
        if hit {
            predicted += 1.0;
        }
        if pair.ground_truth[i] {
            actual += 1.0;
            if hit {
                tp += 1.0;
            }
        }
    }
    let p = if predicted == 0.0 { 1.0 } else { tp / predicted };
    let r = if actual == 0.0 { 1.0 } else { tp / actual };
    (p, r)
}

fn oracle_curve(pairs: &[EvalPair]) -> Vec<(Float, Float, Float)> {
    (0..=256u32)
        .map(|t| {
            let (mut ps, mut rs) = (0.0, 0.0);
            for pair in pairs {
                let (p, r) = oracle_pr(pair, |s| (255.0 * s).round() >= t as Float);
                ps += p;
                rs += r;
            }
            let (p, r) = (ps / pairs.len() as Float, rs / pairs.len() as Float);
            (p, r, oracle_f(p, r, 0.3))
        })
        .collect()
}

fn oracle_avg_f(pairs: &[EvalPair]) -> Float {
    pairs
        .iter()
        .map(|pair| {
            let mean = pair.prediction.iter().sum::<Float>() / pair.len() as Float;
            let thr = if 2.0 * mean > 1.0 { 1.0 } else { 2.0 * mean };
            let (p, r) = oracle_pr(pair, |s| s >= thr);
            oracle_f(p, r, 0.3)
        })
        .sum::<Float>()
        / pairs.len() as Float
}

fn oracle_mae(pairs: &[EvalPair]) -> Float {
    let mut total = 0.0;
    for pair in pairs {
        let mut e = 0.0;
        for i in 0..pair.len() {
            let g = if pair.ground_truth[i] { 1.0 } else { 0.0 };
            e += (pair.prediction[i] - g).abs();
        }
        total += e / pair.len() as Float;
    }
    total / pairs.len() as Float
}

/// Weighted F of one image following the reference algorithm step by step:
/// brute-force nearest foreground pixel (column-major first on ties),
/// 7×7 Gaussian σ=5 with zeros outside, min with the raw error on the
/// foreground, background weight 2 − exp(ln(0.5)/5 · d), β² = 1.
fn oracle_wf_image(pair: &EvalPair) -> Option<Float> {
    let (h, w) = (pair.height, pair.width);
    let g = |y: usize, x: usize| pair.ground_truth[y * w + x];
    let fg: Vec<(usize, usize)> = (0..w)
        .flat_map(|x| (0..h).map(move |y| (y, x)))
        .filter(|&(y, x)| g(y, x))
        .collect();
    if fg.is_empty() {
        return None;
    }
    let err = |y: usize, x: usize| (pair.prediction[y * w + x] - if g(y, x) { 1.0 } else { 0.0 }).abs();
    let mut dist = vec![0.0; h * w];
    let mut propagated = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut best: Option<(i64, (usize, usize))> = None;
            for &(fy, fx) in &fg {
                let d2 = (fy as i64 - y as i64).pow(2) + (fx as i64 - x as i64).pow(2);
                if best.is_none_or(|(b, _)| d2 < b) {
                    best = Some((d2, (fy, fx)));
                }
            }
            let (d2, (ny, nx)) = best.unwrap();
            dist[y * w + x] = (d2 as Float).sqrt();
            propagated[y * w + x] = err(ny, nx);
        }
    }
    let sigma: Float = 5.0;
    let mut kernel = [[0.0; 7]; 7];
    let mut ksum = 0.0;
    for (a, row) in kernel.iter_mut().enumerate() {
        for (b, v) in row.iter_mut().enumerate() {
            let (dy, dx) = (a as Float - 3.0, b as Float - 3.0);
            *v = (-(dy * dy + dx * dx) / (2.0 * sigma * sigma)).exp();
            ksum += *v;
        }
    }
    let mut weighted_err = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let e = err(y, x);
            if g(y, x) {
                let mut acc = 0.0;
                for (a, row) in kernel.iter().enumerate() {
                    for (b, k) in row.iter().enumerate() {
                        let (sy, sx) = (y as i64 + a as i64 - 3, x as i64 + b as i64 - 3);
                        if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                            acc += k / ksum * propagated[sy as usize * w + sx as usize];
                        }
                    }
                }
                weighted_err[y * w + x] = if acc < e { acc } else { e };
            } else {
                let alpha = (0.5 as Float).ln() / 5.0;
                weighted_err[y * w + x] = e * (2.0 - (alpha * dist[y * w + x]).exp());
            }
        }
    }
    let (mut fg_sum, mut bg_sum) = (0.0, 0.0);
    for (&truth, &e) in pair.ground_truth.iter().zip(&weighted_err) {
        if truth {
            fg_sum += e;
        } else {
            bg_sum += e;
        }
    }
    let eps = Float::EPSILON;
    let n_fg = fg.len() as Float;
    let tp = n_fg - fg_sum;
    let r = 1.0 - fg_sum / n_fg;
    let p = tp / (eps + tp + bg_sum);
    Some(2.0 * r * p / (eps + r + p))
}

pub fn curve_matches_per_threshold_counting() {
    let pairs = random_pairs(1);
    let curve = pr_curve(&pairs).unwrap();
    let want = oracle_curve(&pairs);
    assert_eq!(curve.points.len(), 257);
    for (pt, (p, r, f)) in curve.points.iter().zip(want) {
        assert!((pt.precision - p).abs() < TOL, "t={} precision", pt.threshold);
        assert!((pt.recall - r).abs() < TOL, "t={} recall", pt.threshold);
        assert!((pt.f_measure - f).abs() < TOL, "t={} F", pt.threshold);
    }
    let best = oracle_curve(&pairs).iter().map(|x| x.2).fold(0.0, Float::max);
    assert!((max_f(&curve) - best).abs() < TOL);
}

pub fn adaptive_f_matches_direct_binarization() {
    let pairs = random_pairs(2);
    assert!((avg_f(&pairs).unwrap() - oracle_avg_f(&pairs)).abs() < TOL);
}

pub fn mae_matches_direct_sum() {
    let pairs = random_pairs(3);
    assert!((mae(&pairs).unwrap() - oracle_mae(&pairs)).abs() < TOL);
}

pub fn weighted_f_matches_reference_steps() {
    let pairs = random_pairs(4);
    let scores: Vec<Float> = pairs.iter().filter_map(oracle_wf_image).collect();
    let want = scores.iter().sum::<Float>() / scores.len() as Float;
    assert!((weighted_f(&pairs).unwrap() - want).abs() < TOL);
    let report = evaluate(&pairs).unwrap();
    assert_eq!(report.weighted_f_skipped, pairs.len() - scores.len());
    assert_eq!(report.n_images, PAIRS);
}

pub fn f_of_equal_precision_and_recall_is_that_value() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..100 {
        let p: Float = rng.gen();
        assert!((f_measure(p, p, BETA_SQ) - p).abs() < TOL);
    }
    assert_eq!(f_measure(0.0, 0.0, BETA_SQ), 0.0);
}

pub fn prediction_equal_to_truth_is_perfect() {
    let pairs: Vec<EvalPair> = random_pairs(6)
        .into_iter()
        .filter(|p| p.foreground() > 0)
        .map(|p| {
            let s = p.ground_truth.iter().map(|&g| if g { 1.0 } else { 0.0 }).collect();
            EvalPair::new(SIDE, SIDE, s, p.ground_truth).unwrap()
        })
        .collect();
    let r = evaluate(&pairs).unwrap();
    assert_eq!((r.avg_f, r.max_f, r.weighted_f, r.mae), (1.0, 1.0, 1.0, 0.0));
}

// Each check is a plain function so the acceptance gate can call it too.
#[cfg(test)]
mod tests {
    #[test]
    fn curve_matches_per_threshold_counting() {
        super::curve_matches_per_threshold_counting()
    }
    #[test]
    fn adaptive_f_matches_direct_binarization() {
        super::adaptive_f_matches_direct_binarization()
    }
    #[test]
    fn mae_matches_direct_sum() {
        super::mae_matches_direct_sum()
    }
    #[test]
    fn weighted_f_matches_reference_steps() {
        super::weighted_f_matches_reference_steps()
    }
    #[test]
    fn f_of_equal_precision_and_recall_is_that_value() {
        super::f_of_equal_precision_and_recall_is_that_value()
    }
    #[test]
    fn prediction_equal_to_truth_is_perfect() {
        super::prediction_equal_to_truth_is_perfect()
    }
}
