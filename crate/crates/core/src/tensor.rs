//! Dense rank-4 tensors in `[batch, channels, height, width]` layout.

use std::fmt;

use rand::Rng;

use crate::error::{config_err, Error, Result};

/// Element type for every tensor in the crate.
pub type Float = f64;

/// Extents of a rank-4 tensor, `[batch, channels, height, width]`.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape(pub [usize; 4]);

impl Shape {
    pub const fn new(batch: usize, channels: usize, height: usize, width: usize) -> Self {
        Shape([batch, channels, height, width])
    }

    pub const fn scalar() -> Self {
        Shape([1, 1, 1, 1])
    }

    #[inline]
    pub fn batch(&self) -> usize {
        self.0[0]
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.0[1]
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.0[2]
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.0[3]
    }

    /// Number of elements in one `[height, width]` plane.
    #[inline]
    pub fn plane(&self) -> usize {
        self.0[2] * self.0[3]
    }

    /// Number of elements belonging to one batch item.
    #[inline]
    pub fn item(&self) -> usize {
        self.0[1] * self.0[2] * self.0[3]
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    pub fn is_scalar(&self) -> bool {
        *self == Shape::scalar()
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [b, c, h, w] = self.0;
        write!(f, "[{b}, {c}, {h}, {w}]")
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

impl From<[usize; 4]> for Shape {
    fn from(dims: [usize; 4]) -> Self {
        Shape(dims)
    }
}

/// Contiguous row-major tensor.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<Float>,
}

impl Tensor {
    pub fn zeros(shape: impl Into<Shape>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: impl Into<Shape>, value: Float) -> Self {
        let shape = shape.into();
        Tensor {
            data: vec![value; shape.numel()],
            shape,
        }
    }

    pub fn scalar(value: Float) -> Self {
        Tensor {
            shape: Shape::scalar(),
            data: vec![value],
        }
    }

    pub fn from_vec(shape: impl Into<Shape>, data: Vec<Float>) -> Result<Self> {
        let shape = shape.into();
        if data.len() != shape.numel() {
            return Err(config_err!(
                "tensor of shape {shape} needs {} values, got {}",
                shape.numel(),
                data.len()
            ));
        }
        Ok(Tensor { shape, data })
    }

    /// Samples every element independently from `U[low, high)`.
    pub fn uniform<R: Rng + ?Sized>(
        shape: impl Into<Shape>,
        low: Float,
        high: Float,
        rng: &mut R,
    ) -> Self {
        let shape = shape.into();
        let data = (0..shape.numel()).map(|_| rng.gen_range(low..high)).collect();
        Tensor { shape, data }
    }

    #[inline]
    pub fn shape(&self) -> Shape {
        self.shape
    }

    #[inline]
    pub fn data(&self) -> &[Float] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [Float] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<Float> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn offset(&self, b: usize, c: usize, y: usize, x: usize) -> usize {
        let [_, ch, h, w] = self.shape.0;
        ((b * ch + c) * h + y) * w + x
    }

    #[inline]
    pub fn at(&self, b: usize, c: usize, y: usize, x: usize) -> Float {
        self.data[self.offset(b, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, b: usize, c: usize, y: usize, x: usize, value: Float) {
        let i = self.offset(b, c, y, x);
        self.data[i] = value;
    }

    /// Value of a `[1, 1, 1, 1]` tensor.
    pub fn item(&self) -> Float {
        debug_assert!(self.shape.is_scalar());
        self.data[0]
    }

    /// Slice holding batch item `b`.
    pub fn batch_item(&self, b: usize) -> &[Float] {
        let n = self.shape.item();
        &self.data[b * n..(b + 1) * n]
    }

    /// Copies batch item `b` into a tensor with batch extent one.
    pub fn select_batch(&self, b: usize) -> Tensor {
        let [_, c, h, w] = self.shape.0;
        Tensor {
            shape: Shape::new(1, c, h, w),
            data: self.batch_item(b).to_vec(),
        }
    }

    /// Stacks tensors of identical `[1, C, H, W]`-compatible item shape along batch.
    pub fn stack(items: &[Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| config_err!("cannot stack an empty tensor list"))?;
        let [_, c, h, w] = first.shape.0;
        let mut data = Vec::with_capacity(items.iter().map(Tensor::len).sum());
        let mut batch = 0;
        for t in items {
            let [b, tc, th, tw] = t.shape.0;
            if (tc, th, tw) != (c, h, w) {
                return Err(config_err!(
                    "cannot stack {} with {}",
                    t.shape,
                    first.shape
                ));
            }
            batch += b;
            data.extend_from_slice(&t.data);
        }
        Ok(Tensor {
            shape: Shape::new(batch, c, h, w),
            data,
        })
    }

    pub fn reshape(mut self, shape: impl Into<Shape>) -> Result<Tensor> {
        let shape = shape.into();
        if shape.numel() != self.shape.numel() {
            return Err(config_err!("cannot reshape {} into {shape}", self.shape));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(Float) -> Float) -> Tensor {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sum(&self) -> Float {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Float {
        assert_eq!(self.shape, other.shape, "shape mismatch in max_abs_diff");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, Float::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Fails with a numeric error naming `what` if any element is NaN or infinite.
    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(i) => Err(Error::Numeric(format!(
                "{what} produced {} at flat index {i}",
                self.data[i]
            ))),
        }
    }

    /// Adds `other` element-wise into `self`.
    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const PREVIEW: usize = 8;
        write!(f, "Tensor{} [", self.shape)?;
        for (i, v) in self.data.iter().take(PREVIEW).enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{v:.6}")?;
        }
        if self.data.len() > PREVIEW {
            write!(f, ", ...")?;
        }
        write!(f, "]")
    }
}
