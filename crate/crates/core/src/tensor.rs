//! Dense row-major tensors and the element types they can hold.
//!
//! Image tensors use the layout `(batch, channels, height, width)`; a single
//! image without a batch axis is `(channels, height, width)`. A scalar has an
//! empty shape and exactly one element.

use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

/// On-disk element type code, shared by the checkpoint format.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// Row/column strides of a matrix operand, in elements.
#[derive(Clone, Copy, Debug)]
pub struct Strides {
    pub row: isize,
    pub col: isize,
}

impl Strides {
    /// Row-major `rows x cols` storage.
    pub fn row_major(cols: usize) -> Self {
        Strides {
            row: cols as isize,
            col: 1,
        }
    }

    /// The transpose of a row-major matrix with `cols` columns.
    pub fn transposed(cols: usize) -> Self {
        Strides {
            row: 1,
            col: cols as isize,
        }
    }

    fn extent(self, rows: usize, cols: usize) -> usize {
        if rows == 0 || cols == 0 {
            return 0;
        }
        (rows as isize - 1) as usize * self.row as usize + (cols as isize - 1) as usize * self.col as usize + 1
    }
}

/// Floating-point element type usable in tensors and on the tape.
pub trait Element: Float + FromPrimitive + ToPrimitive + Default + Debug + Display + Send + Sync + 'static {
    const DTYPE: DType;

    /// `c = a * b + beta * c` for an `m x k` by `k x n` product.
    ///
    /// The reduction over `k` runs in a fixed order, so repeated calls with the
    /// same operands are bitwise reproducible.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        sa: Strides,
        b: &[Self],
        sb: Strides,
        beta: Self,
        c: &mut [Self],
        sc: Strides,
    );

    fn write_le(self, out: &mut Vec<u8>);

    fn read_le(bytes: &[u8]) -> Self;

    fn from_f64_lossy(value: f64) -> Self {
        Self::from_f64(value).expect("every f64 is representable after rounding")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("float to f64 is infallible")
    }
}

/// `max(v, 0)` that keeps NaN as NaN.
pub(crate) fn clamp_non_negative<T: Float>(v: T) -> T {
    if v < T::zero() {
        T::zero()
    } else {
        v
    }
}

#[allow(clippy::too_many_arguments)]
fn check_gemm_bounds<T>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    sa: Strides,
    b: &[T],
    sb: Strides,
    c: &[T],
    sc: Strides,
) {
    assert!(sa.row >= 0 && sa.col >= 0 && sb.row >= 0 && sb.col >= 0 && sc.row >= 0 && sc.col >= 0);
    assert!(sa.extent(m, k) <= a.len(), "gemm: lhs operand out of bounds");
    assert!(sb.extent(k, n) <= b.len(), "gemm: rhs operand out of bounds");
    assert!(sc.extent(m, n) <= c.len(), "gemm: output out of bounds");
}

impl Element for f32 {
    const DTYPE: DType = DType::F32;

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[f32],
        sa: Strides,
        b: &[f32],
        sb: Strides,
        beta: f32,
        c: &mut [f32],
        sc: Strides,
    ) {
        check_gemm_bounds(m, k, n, a, sa, b, sb, c, sc);
        // SAFETY: every operand extent was checked against its slice length above.
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                sa.row,
                sa.col,
                b.as_ptr(),
                sb.row,
                sb.col,
                beta,
                c.as_mut_ptr(),
                sc.row,
                sc.col,
            );
        }
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().unwrap())
    }
}

impl Element for f64 {
    const DTYPE: DType = DType::F64;

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[f64],
        sa: Strides,
        b: &[f64],
        sb: Strides,
        beta: f64,
        c: &mut [f64],
        sc: Strides,
    ) {
        check_gemm_bounds(m, k, n, a, sa, b, sb, c, sc);
        // SAFETY: every operand extent was checked against its slice length above.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                sa.row,
                sa.col,
                b.as_ptr(),
                sb.row,
                sb.col,
                beta,
                c.as_mut_ptr(),
                sc.row,
                sc.col,
            );
        }
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().unwrap())
    }
}

/// Dense tensor with a contiguous row-major buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Element> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::InvalidShape {
                op: "tensor",
                detail: format!("shape {:?} needs {} elements, got {}", shape, expected, data.len()),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let len = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; len],
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> T) -> Self {
        let shape = shape.into();
        let len: usize = shape.iter().product();
        Tensor {
            shape,
            data: (0..len).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.iter().all(|&d| d == 1)
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.data.len() != 1 {
            return Err(Error::InvalidShape {
                op: "item",
                detail: format!("expected one element, shape is {:?}", self.shape),
            });
        }
        Ok(self.data[0])
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64_lossy(v.as_f64())).collect(),
        }
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    /// Extents of a rank-4 `(B, C, H, W)` tensor.
    pub fn dims4(&self) -> Result<[usize; 4]> {
        match self.shape[..] {
            [b, c, h, w] => Ok([b, c, h, w]),
            _ => Err(Error::InvalidShape {
                op: "dims4",
                detail: format!("expected (B, C, H, W), got {:?}", self.shape),
            }),
        }
    }

    /// Extents of a rank-3 `(C, H, W)` tensor.
    pub fn dims3(&self) -> Result<[usize; 3]> {
        match self.shape[..] {
            [c, h, w] => Ok([c, h, w]),
            _ => Err(Error::InvalidShape {
                op: "dims3",
                detail: format!("expected (C, H, W), got {:?}", self.shape),
            }),
        }
    }

    /// Stack equally-shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor<T>]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::InvalidArgument("cannot stack zero tensors".into()))?;
        let mut data = Vec::with_capacity(first.len() * items.len());
        for item in items {
            if item.shape != first.shape {
                return Err(Error::ShapeMismatch {
                    op: "stack",
                    lhs: first.shape.clone(),
                    rhs: item.shape.clone(),
                });
            }
            data.extend_from_slice(&item.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Tensor { shape, data })
    }

    /// The `index`-th slice along the leading axis.
    pub fn index_outer(&self, index: usize) -> Result<Self> {
        let (&outer, rest) = self.shape.split_first().ok_or_else(|| Error::InvalidShape {
            op: "index_outer",
            detail: "scalar has no outer axis".into(),
        })?;
        if index >= outer {
            return Err(Error::InvalidArgument(format!(
                "index {} out of range for extent {}",
                index, outer
            )));
        }
        let inner: usize = rest.iter().product();
        Ok(Tensor {
            shape: rest.to_vec(),
            data: self.data[index * inner..(index + 1) * inner].to_vec(),
        })
    }

    /// Concatenate two rank-4 tensors along the channel axis.
    pub fn concat_channels(a: &Tensor<T>, b: &Tensor<T>) -> Result<Self> {
        let [ba, ca, ha, wa] = a.dims4()?;
        let [bb, cb, hb, wb] = b.dims4()?;
        if (ba, ha, wa) != (bb, hb, wb) {
            return Err(Error::ShapeMismatch {
                op: "concat_channels",
                lhs: a.shape.clone(),
                rhs: b.shape.clone(),
            });
        }
        let plane = ha * wa;
        let mut data = Vec::with_capacity(a.len() + b.len());
        for n in 0..ba {
            data.extend_from_slice(&a.data[n * ca * plane..(n + 1) * ca * plane]);
            data.extend_from_slice(&b.data[n * cb * plane..(n + 1) * cb * plane]);
        }
        Ok(Tensor {
            shape: vec![ba, ca + cb, ha, wa],
            data,
        })
    }

    /// Channels `start..start + count` of a rank-4 tensor.
    pub fn slice_channels(&self, start: usize, count: usize) -> Result<Self> {
        let [b, c, h, w] = self.dims4()?;
        if start + count > c {
            return Err(Error::InvalidArgument(format!(
                "channel slice {}..{} exceeds extent {}",
                start,
                start + count,
                c
            )));
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(b * count * plane);
        for n in 0..b {
            let base = (n * c + start) * plane;
            data.extend_from_slice(&self.data[base..base + count * plane]);
        }
        Ok(Tensor {
            shape: vec![b, count, h, w],
            data,
        })
    }

    /// Spatial window of a `(C, H, W)` image.
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        let [c, h, w] = self.dims3()?;
        if top + height > h || left + width > w {
            return Err(Error::InvalidArgument(format!(
                "crop {}x{} at ({}, {}) exceeds {}x{}",
                height, width, top, left, h, w
            )));
        }
        let mut data = Vec::with_capacity(c * height * width);
        for ch in 0..c {
            for y in top..top + height {
                let row = (ch * h + y) * w;
                data.extend_from_slice(&self.data[row + left..row + left + width]);
            }
        }
        Ok(Tensor {
            shape: vec![c, height, width],
            data,
        })
    }

    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v)
    }

    pub fn mean(&self) -> T {
        self.sum() / T::from_usize(self.len().max(1)).unwrap()
    }

    pub fn min_value(&self) -> T {
        self.data.iter().fold(T::infinity(), |acc, &v| acc.min(v))
    }

    pub fn max_value(&self) -> T {
        self.data.iter().fold(T::neg_infinity(), |acc, &v| acc.max(v))
    }
}
