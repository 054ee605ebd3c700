//! Raw forward/backward kernels over [`Tensor`] buffers.
//!
//! These routines know nothing about the tape; `autograd` wires them together.
//! Every loop runs in a fixed order on the calling thread, so results are
//! bit-reproducible.

use crate::error::{config_err, Result};
use crate::tensor::{Float, Shape, Tensor};

/// Spatial padding of a convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding that keeps `ceil(extent / stride)` outputs per axis. When
    /// the total padding is odd the extra pixel goes to the bottom/right.
    Same,
    /// Symmetric zero padding of `(rows, cols)` on each side.
    Explicit(usize, usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dOptions {
    pub stride: usize,
    pub dilation: usize,
    pub padding: Padding,
}

impl Default for Conv2dOptions {
    fn default() -> Self {
        Conv2dOptions {
            stride: 1,
            dilation: 1,
            padding: Padding::Same,
        }
    }
}

impl Conv2dOptions {
    pub fn dilated(dilation: usize) -> Self {
        Conv2dOptions {
            dilation,
            ..Default::default()
        }
    }
}

/// Number of input pixels spanned by `k` taps spaced `dilation` apart.
pub fn dilated_extent(k: usize, dilation: usize) -> usize {
    k + (k.saturating_sub(1)) * (dilation.saturating_sub(1))
}

/// Resolved index arithmetic for one convolution call.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_channels: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub stride: usize,
    pub dilation: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub out_h: usize,
    pub out_w: usize,
}

fn axis_geometry(
    extent: usize,
    k: usize,
    stride: usize,
    dilation: usize,
    padding: Option<usize>,
) -> Result<(usize, usize)> {
    let eff = dilated_extent(k, dilation);
    match padding {
        None => {
            let out = extent.div_ceil(stride);
            let total = ((out - 1) * stride + eff).saturating_sub(extent);
            Ok((total / 2, out))
        }
        Some(p) => {
            let padded = extent + 2 * p;
            if padded < eff {
                return Err(config_err!(
                    "kernel extent {eff} exceeds padded input extent {padded}"
                ));
            }
            Ok((p, (padded - eff) / stride + 1))
        }
    }
}

impl ConvGeometry {
    pub fn new(input: Shape, weight: Shape, opts: &Conv2dOptions) -> Result<Self> {
        let [out_channels, w_in, k_h, k_w] = weight.0;
        if input.channels() != w_in {
            return Err(config_err!(
                "conv2d input has {} channels but weight {weight} expects {w_in}",
                input.channels()
            ));
        }
        if opts.stride == 0 || opts.dilation == 0 {
            return Err(config_err!(
                "conv2d needs stride >= 1 and dilation >= 1, got {} and {}",
                opts.stride,
                opts.dilation
            ));
        }
        if k_h == 0 || k_w == 0 || out_channels == 0 {
            return Err(config_err!("degenerate conv2d weight {weight}"));
        }
        if input.height() == 0 || input.width() == 0 {
            return Err(config_err!("conv2d input {input} has an empty plane"));
        }
        let (pad_h, pad_w) = match opts.padding {
            Padding::Same => (None, None),
            Padding::Explicit(ph, pw) => (Some(ph), Some(pw)),
        };
        let (pad_top, out_h) =
            axis_geometry(input.height(), k_h, opts.stride, opts.dilation, pad_h)?;
        let (pad_left, out_w) =
            axis_geometry(input.width(), k_w, opts.stride, opts.dilation, pad_w)?;
        Ok(ConvGeometry {
            in_channels: w_in,
            in_h: input.height(),
            in_w: input.width(),
            out_channels,
            k_h,
            k_w,
            stride: opts.stride,
            dilation: opts.dilation,
            pad_top,
            pad_left,
            out_h,
            out_w,
        })
    }

    /// Rows of the unfolded input matrix.
    fn patch_len(&self) -> usize {
        self.in_channels * self.k_h * self.k_w
    }

    fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }

    /// A 1×1, stride 1, unpadded convolution reads the input as its own column matrix.
    fn is_pointwise(&self) -> bool {
        self.k_h == 1
            && self.k_w == 1
            && self.stride == 1
            && self.pad_top == 0
            && self.pad_left == 0
            && self.out_h == self.in_h
            && self.out_w == self.in_w
    }

    /// Input row for output row `oy` and kernel row `ky`, if inside the image.
    #[inline]
    fn src_row(&self, oy: usize, ky: usize) -> Option<usize> {
        (oy * self.stride + ky * self.dilation)
            .checked_sub(self.pad_top)
            .filter(|&y| y < self.in_h)
    }

    #[inline]
    fn src_col(&self, ox: usize, kx: usize) -> Option<usize> {
        (ox * self.stride + kx * self.dilation)
            .checked_sub(self.pad_left)
            .filter(|&x| x < self.in_w)
    }

    /// Unfolds one image (`[C, H, W]`) into `cols` (`[C·kH·kW, outH·outW]`).
    fn im2col(&self, image: &[Float], cols: &mut [Float]) {
        let plane = self.out_plane();
        let mut row = 0;
        for c in 0..self.in_channels {
            let chan = &image[c * self.in_h * self.in_w..(c + 1) * self.in_h * self.in_w];
            for ky in 0..self.k_h {
                for kx in 0..self.k_w {
                    let dst = &mut cols[row * plane..(row + 1) * plane];
                    for oy in 0..self.out_h {
                        let out_row = &mut dst[oy * self.out_w..(oy + 1) * self.out_w];
                        match self.src_row(oy, ky) {
                            None => out_row.fill(0.0),
                            Some(y) => {
                                let src = &chan[y * self.in_w..(y + 1) * self.in_w];
                                for (ox, v) in out_row.iter_mut().enumerate() {
                                    *v = self.src_col(ox, kx).map_or(0.0, |x| src[x]);
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    /// Folds `cols` back onto one image gradient, accumulating overlaps.
    fn col2im(&self, cols: &[Float], image: &mut [Float]) {
        let plane = self.out_plane();
        let mut row = 0;
        for c in 0..self.in_channels {
            let chan = &mut image[c * self.in_h * self.in_w..(c + 1) * self.in_h * self.in_w];
            for ky in 0..self.k_h {
                for kx in 0..self.k_w {
                    let src = &cols[row * plane..(row + 1) * plane];
                    for oy in 0..self.out_h {
                        if let Some(y) = self.src_row(oy, ky) {
                            let dst = &mut chan[y * self.in_w..(y + 1) * self.in_w];
                            for ox in 0..self.out_w {
                                if let Some(x) = self.src_col(ox, kx) {
                                    dst[x] += src[oy * self.out_w + ox];
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Strided matrix view used by [`gemm`].
#[derive(Clone, Copy)]
struct MatRef<'a> {
    data: &'a [Float],
    row_stride: usize,
    col_stride: usize,
}

impl<'a> MatRef<'a> {
    fn row_major(data: &'a [Float], cols: usize) -> Self {
        MatRef {
            data,
            row_stride: cols,
            col_stride: 1,
        }
    }

    /// Transposed view of a row-major matrix with `cols` columns.
    fn transposed(data: &'a [Float], cols: usize) -> Self {
        MatRef {
            data,
            row_stride: 1,
            col_stride: cols,
        }
    }

    fn fits(&self, rows: usize, cols: usize) -> bool {
        rows == 0
            || cols == 0
            || (rows - 1) * self.row_stride + (cols - 1) * self.col_stride < self.data.len()
    }
}

/// `c = a·b + beta·c` for an `m×k` by `k×n` product into row-major `c`.
fn gemm(m: usize, k: usize, n: usize, a: MatRef, b: MatRef, beta: Float, c: &mut [Float]) {
    assert!(a.fits(m, k) && b.fits(k, n) && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the asserts above keep every strided access inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.row_stride as isize,
            a.col_stride as isize,
            b.data.as_ptr(),
            b.row_stride as isize,
            b.col_stride as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn conv2d_forward(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    geom: &ConvGeometry,
) -> Tensor {
    let batch = input.shape().batch();
    let plane = geom.out_plane();
    let patch = geom.patch_len();
    let mut out = Tensor::zeros([batch, geom.out_channels, geom.out_h, geom.out_w]);
    let mut cols = if geom.is_pointwise() {
        Vec::new()
    } else {
        vec![0.0; patch * plane]
    };
    for b in 0..batch {
        let image = input.batch_item(b);
        let cols_ref = if geom.is_pointwise() {
            image
        } else {
            geom.im2col(image, &mut cols);
            &cols
        };
        let dst = &mut out.data_mut()[b * geom.out_channels * plane..][..geom.out_channels * plane];
        if let Some(bias) = bias {
            for (oc, chunk) in dst.chunks_exact_mut(plane).enumerate() {
                chunk.fill(bias.data()[oc]);
            }
        }
        gemm(
            geom.out_channels,
            patch,
            plane,
            MatRef::row_major(weight.data(), patch),
            MatRef::row_major(cols_ref, plane),
            if bias.is_some() { 1.0 } else { 0.0 },
            dst,
        );
    }
    out
}

/// Gradients of a convolution with respect to the requested operands.
pub struct Conv2dGrads {
    pub input: Option<Tensor>,
    pub weight: Option<Tensor>,
    pub bias: Option<Tensor>,
}

pub fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
    geom: &ConvGeometry,
    want: [bool; 3],
) -> Conv2dGrads {
    let [want_input, want_weight, want_bias] = want;
    let batch = input.shape().batch();
    let plane = geom.out_plane();
    let patch = geom.patch_len();
    let oc = geom.out_channels;

    let mut d_input = want_input.then(|| Tensor::zeros(input.shape()));
    let mut d_weight = want_weight.then(|| Tensor::zeros(weight.shape()));
    let mut d_bias = want_bias.then(|| Tensor::zeros([1, oc, 1, 1]));
    let mut cols = vec![0.0; if geom.is_pointwise() { 0 } else { patch * plane }];
    let mut d_cols = vec![0.0; if want_input { patch * plane } else { 0 }];

    for b in 0..batch {
        let g = &grad_out.data()[b * oc * plane..][..oc * plane];
        if let Some(db) = d_bias.as_mut() {
            for (o, chunk) in g.chunks_exact(plane).enumerate() {
                db.data_mut()[o] += chunk.iter().sum::<Float>();
            }
        }
        if let Some(dw) = d_weight.as_mut() {
            let image = input.batch_item(b);
            let cols_ref = if geom.is_pointwise() {
                image
            } else {
                geom.im2col(image, &mut cols);
                &cols
            };
            gemm(
                oc,
                plane,
                patch,
                MatRef::row_major(g, plane),
                MatRef::transposed(cols_ref, plane),
                1.0,
                dw.data_mut(),
            );
        }
        if let Some(di) = d_input.as_mut() {
            let n = input.shape().item();
            let dst = &mut di.data_mut()[b * n..(b + 1) * n];
            if geom.is_pointwise() {
                gemm(
                    patch,
                    oc,
                    plane,
                    MatRef::transposed(weight.data(), patch),
                    MatRef::row_major(g, plane),
                    0.0,
                    dst,
                );
            } else {
                gemm(
                    patch,
                    oc,
                    plane,
                    MatRef::transposed(weight.data(), patch),
                    MatRef::row_major(g, plane),
                    0.0,
                    &mut d_cols,
                );
                geom.col2im(&d_cols, dst);
            }
        }
    }
    Conv2dGrads {
        input: d_input,
        weight: d_weight,
        bias: d_bias,
    }
}

/// 2×2 max pooling with stride 2. Returns the output and, per output element,
/// the flat input index that won (first maximum in row-major window order).
pub fn max_pool2_forward(input: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let [b, c, h, w] = input.shape().0;
    if h < 2 || w < 2 {
        return Err(config_err!("max_pool2 needs at least 2×2 planes, got {}", input.shape()));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros([b, c, oh, ow]);
    let mut argmax = Vec::with_capacity(out.len());
    let src = input.data();
    let dst = out.data_mut();
    let mut o = 0;
    for plane in 0..b * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if src[i] > src[best] {
                        best = i;
                    }
                }
                dst[o] = src[best];
                argmax.push(best);
                o += 1;
            }
        }
    }
    Ok((out, argmax))
}

/// Source taps `(i0, i1, frac)` for each output coordinate of a half-pixel
/// (align-corners = false) bilinear resize by an integer factor.
fn bilinear_taps(extent: usize, factor: usize) -> Vec<(usize, usize, Float)> {
    (0..extent * factor)
        .map(|o| {
            let src = ((o as Float + 0.5) / factor as Float - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(extent - 1);
            let i1 = (i0 + 1).min(extent - 1);
            (i0, i1, src - i0 as Float)
        })
        .collect()
}

pub fn upsample_bilinear_forward(input: &Tensor, factor: usize) -> Tensor {
    let [b, c, h, w] = input.shape().0;
    let (oh, ow) = (h * factor, w * factor);
    let ty = bilinear_taps(h, factor);
    let tx = bilinear_taps(w, factor);
    let mut out = Tensor::zeros([b, c, oh, ow]);
    let src = input.data();
    let dst = out.data_mut();
    for plane in 0..b * c {
        let s = &src[plane * h * w..(plane + 1) * h * w];
        let d = &mut dst[plane * oh * ow..(plane + 1) * oh * ow];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let top = s[y0 * w + x0] * (1.0 - fx) + s[y0 * w + x1] * fx;
                let bottom = s[y1 * w + x0] * (1.0 - fx) + s[y1 * w + x1] * fx;
                d[oy * ow + ox] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    out
}

pub fn upsample_bilinear_backward(grad_out: &Tensor, input_shape: Shape, factor: usize) -> Tensor {
    let [b, c, h, w] = input_shape.0;
    let (oh, ow) = (h * factor, w * factor);
    let ty = bilinear_taps(h, factor);
    let tx = bilinear_taps(w, factor);
    let mut grad = Tensor::zeros(input_shape);
    let g = grad_out.data();
    let d = grad.data_mut();
    for plane in 0..b * c {
        let gs = &g[plane * oh * ow..(plane + 1) * oh * ow];
        let ds = &mut d[plane * h * w..(plane + 1) * h * w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let v = gs[oy * ow + ox];
                ds[y0 * w + x0] += v * (1.0 - fy) * (1.0 - fx);
                ds[y0 * w + x1] += v * (1.0 - fy) * fx;
                ds[y1 * w + x0] += v * fy * (1.0 - fx);
                ds[y1 * w + x1] += v * fy * fx;
            }
        }
    }
    grad
}

/// Spreads the taps of `kernel` (`[O, I, kH, kW]`) `dilation` pixels apart,
/// filling the gaps with zeros. A dilated convolution with `kernel` equals an
/// undilated one with the inflated kernel.
pub fn zero_inflate(kernel: &Tensor, dilation: usize) -> Tensor {
    let [o, i, kh, kw] = kernel.shape().0;
    let (eh, ew) = (dilated_extent(kh, dilation), dilated_extent(kw, dilation));
    let mut out = Tensor::zeros([o, i, eh, ew]);
    for a in 0..o {
        for b in 0..i {
            for y in 0..kh {
                for x in 0..kw {
                    out.set(a, b, y * dilation, x * dilation, kernel.at(a, b, y, x));
                }
            }
        }
    }
    out
}

/// Dense kernel of a `1×kW` convolution (`row`, `[M, I, 1, kW]`) followed by a
/// `kH×1` convolution (`col`, `[O, M, kH, 1]`): `K[o,i,y,x] = Σ_m col[o,m,y]·row[m,i,x]`.
pub fn compose_separable(row: &Tensor, col: &Tensor) -> Result<Tensor> {
    let [m, i, rh, kw] = row.shape().0;
    let [o, cm, kh, cw] = col.shape().0;
    if rh != 1 || cw != 1 || cm != m {
        return Err(config_err!(
            "cannot compose row kernel {} with column kernel {}",
            row.shape(),
            col.shape()
        ));
    }
    let mut out = Tensor::zeros([o, i, kh, kw]);
    for a in 0..o {
        for b in 0..i {
            for y in 0..kh {
                for x in 0..kw {
                    let v = (0..m).map(|c| col.at(a, c, y, 0) * row.at(c, b, 0, x)).sum();
                    out.set(a, b, y, x, v);
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_padding_puts_extra_pixel_bottom_right() {
        // k=2: total padding 1, all of it after the image.
        let g = ConvGeometry::new(
            Shape::new(1, 1, 4, 4),
            Shape::new(1, 1, 2, 2),
            &Conv2dOptions::default(),
        )
        .unwrap();
        assert_eq!((g.pad_top, g.pad_left, g.out_h, g.out_w), (0, 0, 4, 4));
        let g = ConvGeometry::new(
            Shape::new(1, 1, 5, 5),
            Shape::new(1, 1, 3, 3),
            &Conv2dOptions::dilated(2),
        )
        .unwrap();
        assert_eq!((g.pad_top, g.out_h), (2, 5));
    }

    #[test]
    fn explicit_and_strided_geometry() {
        let opts = Conv2dOptions {
            stride: 2,
            dilation: 1,
            padding: Padding::Explicit(1, 1),
        };
        let g = ConvGeometry::new(Shape::new(1, 2, 7, 8), Shape::new(3, 2, 3, 3), &opts).unwrap();
        assert_eq!((g.out_h, g.out_w), (4, 4));
        let same = Conv2dOptions {
            stride: 2,
            ..Default::default()
        };
        let g = ConvGeometry::new(Shape::new(1, 2, 7, 8), Shape::new(3, 2, 3, 3), &same).unwrap();
        assert_eq!((g.out_h, g.out_w), (4, 4));
    }

    #[test]
    fn geometry_rejects_bad_arguments() {
        let w = Shape::new(1, 2, 3, 3);
        assert!(ConvGeometry::new(Shape::new(1, 3, 4, 4), w, &Conv2dOptions::default()).is_err());
        let zero_stride = Conv2dOptions {
            stride: 0,
            ..Default::default()
        };
        assert!(ConvGeometry::new(Shape::new(1, 2, 4, 4), w, &zero_stride).is_err());
        assert!(ConvGeometry::new(Shape::new(1, 2, 4, 4), w, &Conv2dOptions::dilated(0)).is_err());
        let tight = Conv2dOptions {
            padding: Padding::Explicit(0, 0),
            ..Default::default()
        };
        assert!(ConvGeometry::new(Shape::new(1, 2, 2, 2), w, &tight).is_err());
    }

    #[test]
    fn bilinear_taps_clamp_at_borders() {
        let taps = bilinear_taps(3, 2);
        assert_eq!(taps[0], (0, 1, 0.0));
        assert_eq!(taps[1], (0, 1, 0.25));
        assert_eq!(taps[5], (2, 2, 0.25));
    }

    #[test]
    fn max_pool_picks_first_maximum() {
        let t = Tensor::from_vec([1, 1, 2, 2], vec![1.0, 3.0, 3.0, 0.0]).unwrap();
        let (out, arg) = max_pool2_forward(&t).unwrap();
        assert_eq!(out.data(), &[3.0]);
        assert_eq!(arg, vec![1]);
    }
}
