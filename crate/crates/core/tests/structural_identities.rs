//! Convolution identities behind the multi-scale branches: a dilated kernel is
//! an undilated kernel with zeros between the taps, and `1×k` followed by
//! `k×1` is one `k×k` convolution with the outer-product kernel.

use dfnet::blocks::{effective_kernel_extent, BranchSpec, MagModule, MAG_EXTENTS};
use dfnet::kernels::{compose_separable, dilated_extent, zero_inflate, Conv2dOptions, Padding};
use dfnet::params::ParamStore;
use dfnet::{Float, Shape, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const CASES: usize = 50;
const TOL: Float = 1e-6;

fn random(rng: &mut ChaCha8Rng, shape: impl Into<Shape>) -> Tensor {
    let shape = shape.into();
    let data = (0..shape.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::from_vec(shape, data).unwrap()
}

/// Direct scalar convolution (cross-correlation), zero outside the image,
/// stride 1, with `pad_top/pad_left` rows/cols of zeros before the image.
fn naive_conv(x: &Tensor, w: &Tensor, dilation: usize, pad_top: usize, pad_left: usize, out_hw: (usize, usize)) -> Tensor {
    let [b, c, h, wd] = x.shape().0;
    let [o, i, kh, kw] = w.shape().0;
    assert_eq!(c, i);
    let mut out = Tensor::zeros([b, o, out_hw.0, out_hw.1]);
    for n in 0..b {
        for oc in 0..o {
            for y in 0..out_hw.0 {
                for xx in 0..out_hw.1 {
                    let mut acc = 0.0;
                    for ic in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let sy = (y + ky * dilation) as isize - pad_top as isize;
                                let sx = (xx + kx * dilation) as isize - pad_left as isize;
                                if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < wd {
                                    acc += w.at(oc, ic, ky, kx) * x.at(n, ic, sy as usize, sx as usize);
                                }
                            }
                        }
                    }
                    out.set(n, oc, y, xx, acc);
                }
            }
        }
    }
    out
}

/// "Same" padding as documented: total `extent − 1`, extra pixel after the image.
fn same_pad(extent: usize) -> usize {
    (extent - 1) / 2
}

fn tape_conv(x: &Tensor, w: &Tensor, opts: &Conv2dOptions) -> Tensor {
    let mut tape = Tape::new();
    let (xv, wv) = (tape.constant(x.clone()), tape.constant(w.clone()));
    let y = tape.conv2d(xv, wv, None, opts).unwrap();
    tape.value(y).clone()
}

pub fn library_convolution_matches_direct_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..CASES {
        let (c, o) = (rng.gen_range(1..=3), rng.gen_range(1..=3));
        let (kh, kw) = (rng.gen_range(1..=4), rng.gen_range(1..=4));
        let d = rng.gen_range(1..=3);
        let (h, w) = (rng.gen_range(5..=10), rng.gen_range(5..=10));
        let x = random(&mut rng, [2, c, h, w]);
        let k = random(&mut rng, [o, c, kh, kw]);
        let got = tape_conv(&x, &k, &Conv2dOptions::dilated(d));
        let (eh, ew) = (dilated_extent(kh, d), dilated_extent(kw, d));
        let want = naive_conv(&x, &k, d, same_pad(eh), same_pad(ew), (h, w));
        assert!(got.max_abs_diff(&want) < 1e-12, "k={kh}x{kw} d={d}");

        let explicit = Conv2dOptions {
            padding: Padding::Explicit(0, 1),
            ..Default::default()
        };
        if h >= kh && w + 2 >= kw {
            let got = tape_conv(&x, &k, &explicit);
            let want = naive_conv(&x, &k, 1, 0, 1, (h - kh + 1, w + 2 - kw + 1));
            assert!(got.max_abs_diff(&want) < 1e-12);
        }
    }
}

pub fn dilation_equals_zero_inflated_kernel() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: Float = 0.0;
    for _ in 0..CASES {
        let (c, o) = (rng.gen_range(1..=4), rng.gen_range(1..=4));
        let k = [1, 3, 5][rng.gen_range(0..3)];
        let d = rng.gen_range(1..=5);
        let side = rng.gen_range(6..=14);
        let x = random(&mut rng, [1, c, side, side]);
        let w = random(&mut rng, [o, c, k, k]);
        let dilated = tape_conv(&x, &w, &Conv2dOptions::dilated(d));
        let inflated_kernel = zero_inflate(&w, d);
        assert_eq!(inflated_kernel.shape().height(), k + (k - 1) * (d - 1));
        let inflated = tape_conv(&x, &inflated_kernel, &Conv2dOptions::default());
        worst = worst.max(dilated.max_abs_diff(&inflated));
    }
    assert!(worst < TOL, "max deviation {worst}");
}

pub fn factorized_pair_equals_composed_kernel() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: Float = 0.0;
    for _ in 0..CASES {
        let (c, m, o) = (rng.gen_range(1..=3), rng.gen_range(1..=3), rng.gen_range(1..=3));
        let k = [3, 5, 7][rng.gen_range(0..3)];
        let d = rng.gen_range(1..=3);
        let side = rng.gen_range(6..=12);
        let x = random(&mut rng, [2, c, side, side]);
        let row = random(&mut rng, [m, c, 1, k]);
        let col = random(&mut rng, [o, m, k, 1]);
        let opts = Conv2dOptions::dilated(d);
        let two_step = tape_conv(&tape_conv(&x, &row, &opts), &col, &opts);

        // Outer-product kernel built here, independently of the library.
        let mut dense = Tensor::zeros([o, c, k, k]);
        for a in 0..o {
            for b in 0..c {
                for y in 0..k {
                    for xx in 0..k {
                        let v: Float = (0..m).map(|j| col.at(a, j, y, 0) * row.at(j, b, 0, xx)).sum();
                        dense.set(a, b, y, xx, v);
                    }
                }
            }
        }
        assert!(compose_separable(&row, &col).unwrap().max_abs_diff(&dense) < 1e-12);
        let one_step = tape_conv(&x, &dense, &opts);
        worst = worst.max(two_step.max_abs_diff(&one_step));
    }
    assert!(worst < TOL, "max deviation {worst}");
}

pub fn default_branch_table_covers_extents_one_to_eleven() {
    let extents: Vec<usize> = BranchSpec::default_table(4).iter().map(effective_kernel_extent).collect();
    assert_eq!(extents, vec![1, 3, 5, 7, 9, 11]);
    assert_eq!(MAG_EXTENTS, [1, 3, 5, 7, 9, 11]);
    // n + (r − 1)·(n − 1) with the dilations of the table.
    assert_eq!(dilated_extent(3, 2), 5);
    assert_eq!(dilated_extent(3, 4), 9);
    assert_eq!(dilated_extent(3, 5), 11);
}

pub fn every_branch_equals_its_dense_kernel() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::new();
    let table = BranchSpec::default_table(3);
    let mag = MagModule::new(&mut store, &mut rng, "mag", 2, &table, false).unwrap();
    // Non-zero biases so they are part of the comparison.
    for t in store.tensors_mut() {
        if t.shape().0[0] == 1 && t.shape().height() == 1 {
            t.data_mut().iter_mut().for_each(|v| *v = 0.1);
        }
    }
    let x = random(&mut rng, [1, 2, 16, 16]);
    for branch in &mag.branches {
        let (kernel, bias) = branch.dense_equivalent(&store).unwrap();
        let extent = effective_kernel_extent(&branch.spec);
        assert_eq!(kernel.shape().height(), extent);
        assert_eq!(kernel.shape().width(), extent);

        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let y = branch.forward(&mut tape, &p, xv).unwrap();
        let got = tape.value(y).clone();

        let pad = same_pad(extent);
        let mut want = naive_conv(&x, &kernel, 1, pad, pad, (16, 16));
        let s = want.shape();
        for oc in 0..s.channels() {
            for yy in 0..16 {
                for xx in 0..16 {
                    let v = want.at(0, oc, yy, xx) + bias.data()[oc];
                    want.set(0, oc, yy, xx, v.max(0.0));
                }
            }
        }
        assert!(got.max_abs_diff(&want) < TOL, "extent {extent}");
    }
}

// Each check is a plain function so the acceptance gate can call it too.
#[cfg(test)]
mod tests {
    #[test]
    fn library_convolution_matches_direct_sum() {
        super::library_convolution_matches_direct_sum()
    }
    #[test]
    fn dilation_equals_zero_inflated_kernel() {
        super::dilation_equals_zero_inflated_kernel()
    }
    #[test]
    fn factorized_pair_equals_composed_kernel() {
        super::factorized_pair_equals_composed_kernel()
    }
    #[test]
    fn default_branch_table_covers_extents_one_to_eleven() {
        super::default_branch_table_covers_extents_one_to_eleven()
    }
    #[test]
    fn every_branch_equals_its_dense_kernel() {
        super::every_branch_equals_its_dense_kernel()
    }
}
