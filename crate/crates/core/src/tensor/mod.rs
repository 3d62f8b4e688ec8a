//! Dense rank-4 tensors and the forward kernels the models are built from.
//!
//! Layout is always NCHW, row-major: element `(i, j, y, x)` lives at
//! `((i * c + j) * h + y) * w + x`. Kernels are generic over [`Scalar`] so the
//! same code runs in `f32` for training and `f64` for gradient checking.

mod io;
pub(crate) mod ops;

use std::fmt;

pub use io::{read_t4f1, read_t4f1_from, write_t4f1, write_t4f1_to, T4F1_MAGIC};
pub use ops::{
    batch_norm2d, channel_scale, concat_channels, conv2d, conv_transpose2x, maxpool2x, maxpool2x_with_argmax, relu,
    upsample_nearest2x, BatchNormMode, NormStats,
};
pub(crate) use ops::{conv2d_backward, conv_transpose2x_backward, slice_channels};

use crate::error::{Error, Result};

/// Floating-point sample type. Implemented for `f32` and `f64`.
pub trait Scalar:
    num_traits::Float + num_traits::NumAssign + Default + Send + Sync + fmt::Debug + fmt::Display + std::iter::Sum + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;

    /// `C = alpha * A·B + beta * C` on strided row/column layouts.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );
}

macro_rules! impl_scalar {
    ($t:ty, $gemm:path) => {
        impl Scalar for $t {
            #[inline]
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            #[inline]
            fn to_f64(self) -> f64 {
                self as f64
            }
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
                rsc: isize,
                csc: isize,
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: callers pass slices that cover every strided index
                // touched for the given m/k/n; checked by the debug assertions.
                debug_assert!(k == 0 || a.len() >= extent(m, k, rsa, csa));
                debug_assert!(k == 0 || b.len() >= extent(k, n, rsb, csb));
                debug_assert!(c.len() >= extent(m, n, rsc, csc));
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        rsc,
                        csc,
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

fn extent(rows: usize, cols: usize, rs: isize, cs: isize) -> usize {
    ((rows as isize - 1) * rs + (cols as isize - 1) * cs) as usize + 1
}

/// Dimensions of a [`Tensor4`]: batch, channels, rows, columns.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Shape4 {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape4 {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape4 { n, c, h, w }
    }

    pub const fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    /// Elements in one channel plane.
    pub const fn plane(&self) -> usize {
        self.h * self.w
    }

    pub const fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }
}

impl fmt::Display for Shape4 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

/// Dense NCHW tensor.
///
/// Batch and spatial dimensions are always at least 1. The channel count may be
/// zero so that an empty feature map can act as the identity of
/// [`concat_channels`].
#[derive(Clone, PartialEq)]
pub struct Tensor4<T> {
    shape: Shape4,
    data: Vec<T>,
}

impl<T: fmt::Debug> fmt::Debug for Tensor4<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<_> = self.data.iter().take(8).collect();
        f.debug_struct("Tensor4")
            .field("shape", &self.shape)
            .field("head", &preview)
            .finish()
    }
}

impl<T: Scalar> Tensor4<T> {
    pub fn zeros(shape: Shape4) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: Shape4, value: T) -> Self {
        assert_valid_shape(shape);
        Tensor4 {
            shape,
            data: vec![value; shape.numel()],
        }
    }

    pub fn from_vec(shape: Shape4, data: Vec<T>) -> Result<Self> {
        if shape.n == 0 || shape.h == 0 || shape.w == 0 {
            return Err(Error::shape(
                "tensor",
                format!("batch and spatial dims must be >= 1, got {shape}"),
            ));
        }
        if data.len() != shape.numel() {
            return Err(Error::shape(
                "tensor",
                format!(
                    "data length {} does not match {shape} ({} elements)",
                    data.len(),
                    shape.numel()
                ),
            ));
        }
        Ok(Tensor4 { shape, data })
    }

    pub fn from_fn(shape: Shape4, mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Self {
        assert_valid_shape(shape);
        let mut data = Vec::with_capacity(shape.numel());
        for i in 0..shape.n {
            for j in 0..shape.c {
                for y in 0..shape.h {
                    for x in 0..shape.w {
                        data.push(f(i, j, y, x));
                    }
                }
            }
        }
        Tensor4 { shape, data }
    }

    /// Per-channel vector stored as a `1×c×1×1` tensor.
    pub fn vector(values: &[T]) -> Self {
        Tensor4 {
            shape: Shape4::new(1, values.len(), 1, 1),
            data: values.to_vec(),
        }
    }

    pub fn shape(&self) -> Shape4 {
        self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, y: usize, x: usize) -> usize {
        let s = self.shape;
        ((i * s.c + j) * s.h + y) * s.w + x
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize, y: usize, x: usize) -> T {
        self.data[self.index(i, j, y, x)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, y: usize, x: usize, v: T) {
        let idx = self.index(i, j, y, x);
        self.data[idx] = v;
    }

    /// Same data, new shape with the same element count.
    pub fn reshape(self, shape: Shape4) -> Result<Self> {
        Tensor4::from_vec(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor4 {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    /// Elementwise `self += other`.
    pub fn add_assign(&mut self, other: &Tensor4<T>) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor4<T>) -> T {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// One batch item as a `1×c×h×w` tensor.
    pub fn batch_item(&self, i: usize) -> Self {
        let s = self.shape;
        let len = s.c * s.plane();
        Tensor4 {
            shape: Shape4::new(1, s.c, s.h, s.w),
            data: self.data[i * len..(i + 1) * len].to_vec(),
        }
    }

    /// Stack equally shaped `1×c×h×w` tensors into a batch.
    pub fn stack(items: &[&Tensor4<T>]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::shape("stack", "no tensors to stack"))?
            .shape;
        let mut data = Vec::with_capacity(first.numel() * items.len());
        for t in items {
            let s = t.shape;
            if s.c != first.c || s.h != first.h || s.w != first.w {
                return Err(Error::shape("stack", format!("item shape {s} differs from {first}")));
            }
            data.extend_from_slice(&t.data);
        }
        let n: usize = items.iter().map(|t| t.shape.n).sum();
        Tensor4::from_vec(Shape4::new(n, first.c, first.h, first.w), data)
    }

    pub fn cast<U: Scalar>(&self) -> Tensor4<U> {
        Tensor4 {
            shape: self.shape,
            data: self.data.iter().map(|&v| U::from_f64(v.to_f64())).collect(),
        }
    }
}

fn assert_valid_shape(shape: Shape4) {
    assert!(
        shape.n >= 1 && shape.h >= 1 && shape.w >= 1,
        "tensor batch and spatial dims must be >= 1, got {shape}"
    );
}

/// Geometry of a 2-D convolution. Spatial output follows
/// `floor((h + 2·padding − dilation·(k − 1) − 1) / stride) + 1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl Default for ConvGeom {
    fn default() -> Self {
        ConvGeom {
            stride: 1,
            padding: 0,
            dilation: 1,
            groups: 1,
        }
    }
}

impl ConvGeom {
    /// Stride-1 geometry whose padding keeps spatial dims for an odd kernel.
    pub fn same(k: usize, dilation: usize, groups: usize) -> Self {
        ConvGeom {
            stride: 1,
            padding: dilation * (k - 1) / 2,
            dilation,
            groups,
        }
    }

    pub fn extent(&self, k: usize) -> usize {
        self.dilation * (k - 1) + 1
    }

    /// Output length along one spatial axis, or `None` when it would be < 1.
    pub fn out_len(&self, len: usize, k: usize) -> Option<usize> {
        let padded = len + 2 * self.padding;
        let extent = self.extent(k);
        if padded < extent || self.stride == 0 {
            return None;
        }
        Some((padded - extent) / self.stride + 1)
    }
}

/// Weight, bias and geometry of one convolution layer.
#[derive(Clone, Debug)]
pub struct ConvParams<T> {
    /// `(out_ch, in_ch / groups, k, k)`.
    pub weight: Tensor4<T>,
    /// One entry per output channel.
    pub bias: Vec<T>,
    pub geom: ConvGeom,
}

impl<T: Scalar> ConvParams<T> {
    pub fn new(weight: Tensor4<T>, bias: Vec<T>, geom: ConvGeom) -> Result<Self> {
        let ws = weight.shape();
        if ws.h != ws.w {
            return Err(Error::shape(
                "conv2d",
                format!("kernel must be square, got {}x{}", ws.h, ws.w),
            ));
        }
        if bias.len() != ws.n {
            return Err(Error::shape(
                "conv2d",
                format!("bias length {} != out channels {}", bias.len(), ws.n),
            ));
        }
        if geom.groups == 0 || !ws.n.is_multiple_of(geom.groups) {
            return Err(Error::shape(
                "conv2d",
                format!("groups {} must divide out channels {}", geom.groups, ws.n),
            ));
        }
        if geom.stride == 0 || geom.dilation == 0 {
            return Err(Error::config("stride and dilation must be positive"));
        }
        Ok(ConvParams { weight, bias, geom })
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape().n
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape().c * self.geom.groups
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape().h
    }
}
