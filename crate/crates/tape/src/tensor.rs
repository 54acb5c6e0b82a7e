//! Dense row-major tensors and the numeric kernels behind every tape op.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive};

/// Floating point element type usable on a tape.
pub trait Real:
    Float + FromPrimitive + Default + Debug + Display + Sum + Send + Sync + 'static
{
    /// Short dtype tag used by serializers.
    const DTYPE: &'static str;
    /// Byte width of one element.
    const BYTES: usize;

    /// `c = alpha * a * b + beta * c` over strided matrices.
    ///
    /// # Safety
    /// Pointers and strides must describe valid `m×k`, `k×n` and `m×n` matrices.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal representable")
    }
}

impl Real for f32 {
    const DTYPE: &'static str = "f32";
    const BYTES: usize = 4;

    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, 0.0, c, rsc, csc);
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Real for f64 {
    const DTYPE: &'static str = "f64";
    const BYTES: usize = 8;

    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, 0.0, c, rsc, csc);
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

/// An owned, contiguous, row-major array.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Debug> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

impl<T: Real> Tensor<T> {
    pub fn from_vec(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Self {
        let shape = shape.into();
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {shape:?} does not match {} elements",
            data.len()
        );
        Self { shape, data }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros([n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Rows of a rank-2 tensor.
    pub fn rows(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "expected a matrix, got {:?}", self.shape);
        self.shape[0]
    }

    /// Columns of a rank-2 tensor.
    pub fn cols(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "expected a matrix, got {:?}", self.shape);
        self.shape[1]
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

    pub fn row(&self, r: usize) -> &[T] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn at(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols() + c]
    }

    /// The single element of a one-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshaped(mut self, shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        assert_eq!(shape.iter().product::<usize>(), self.data.len());
        self.shape = shape;
        self
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        assert_eq!(self.shape, other.shape, "elementwise shape mismatch");
        Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum_all(&self) -> T {
        self.data.iter().copied().sum()
    }

    /// Converts element type through `f64`.
    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| U::lit(v.to_f64().expect("finite")))
                .collect(),
        }
    }

    pub fn transpose(&self) -> Self {
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Self::from_vec([c, r], out)
    }
}

/// `op(a) · op(b)` where `op` optionally transposes.
pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>, ta: bool, tb: bool) -> Tensor<T> {
    let (ar, ac) = (a.rows(), a.cols());
    let (br, bc) = (b.rows(), b.cols());
    let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
    let (k2, n) = if tb { (bc, br) } else { (br, bc) };
    assert_eq!(k, k2, "matmul inner dimension mismatch: {:?} x {:?} (ta={ta}, tb={tb})", a.shape, b.shape);
    let mut out = vec![T::zero(); m * n];
    if m > 0 && n > 0 && k > 0 {
        let (rsa, csa) = if ta { (1, ac as isize) } else { (ac as isize, 1) };
        let (rsb, csb) = if tb { (1, bc as isize) } else { (bc as isize, 1) };
        // SAFETY: strides derived from the owned, contiguous buffers above.
        unsafe {
            T::gemm(
                m,
                k,
                n,
                a.data.as_ptr(),
                rsa,
                csa,
                b.data.as_ptr(),
                rsb,
                csb,
                out.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
    Tensor::from_vec([m, n], out)
}

/// Adds `bias` (length `cols`) to every row.
pub fn add_row<T: Real>(a: &Tensor<T>, bias: &Tensor<T>) -> Tensor<T> {
    let c = a.cols();
    assert_eq!(bias.len(), c, "bias length mismatch");
    let mut out = a.clone();
    for row in out.data.chunks_mut(c) {
        for (v, &b) in row.iter_mut().zip(&bias.data) {
            *v = *v + b;
        }
    }
    out
}

pub fn sum_rows<T: Real>(a: &Tensor<T>) -> Tensor<T> {
    let c = a.cols();
    let mut out = vec![T::zero(); c];
    for row in a.data.chunks(c) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o = *o + v;
        }
    }
    Tensor::from_vec([c], out)
}

pub fn broadcast_rows<T: Real>(v: &Tensor<T>, n: usize) -> Tensor<T> {
    let c = v.len();
    let mut out = Vec::with_capacity(n * c);
    for _ in 0..n {
        out.extend_from_slice(&v.data);
    }
    Tensor::from_vec([n, c], out)
}

pub fn gather_rows<T: Real>(a: &Tensor<T>, idx: &[usize]) -> Tensor<T> {
    let c = a.cols();
    let mut out = Vec::with_capacity(idx.len() * c);
    for &i in idx {
        out.extend_from_slice(&a.data[i * c..(i + 1) * c]);
    }
    Tensor::from_vec([idx.len(), c], out)
}

pub fn scatter_add_rows<T: Real>(a: &Tensor<T>, idx: &[usize], n: usize) -> Tensor<T> {
    let c = a.cols();
    assert_eq!(a.rows(), idx.len());
    let mut out = vec![T::zero(); n * c];
    for (r, &i) in idx.iter().enumerate() {
        let src = &a.data[r * c..(r + 1) * c];
        for (o, &v) in out[i * c..(i + 1) * c].iter_mut().zip(src) {
            *o = *o + v;
        }
    }
    Tensor::from_vec([n, c], out)
}

pub fn gather_flat<T: Real>(a: &Tensor<T>, idx: &[usize], shape: &[usize]) -> Tensor<T> {
    Tensor::from_vec(shape.to_vec(), idx.iter().map(|&i| a.data[i]).collect())
}

pub fn scatter_add_flat<T: Real>(a: &Tensor<T>, idx: &[usize], shape: &[usize]) -> Tensor<T> {
    let mut out = Tensor::zeros(shape.to_vec());
    for (&i, &v) in idx.iter().zip(&a.data) {
        out.data[i] = out.data[i] + v;
    }
    out
}

/// Patch-extraction geometry for a square-kernel 2D convolution over
/// NHWC activations stored as a `[batch·height·width, channels]` matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.channels
    }

    fn for_each_tap(&self, mut f: impl FnMut(usize, usize)) {
        let (ho, wo) = (self.out_height(), self.out_width());
        let k = self.kernel;
        let c = self.channels;
        let plen = self.patch_len();
        for b in 0..self.batch {
            for oy in 0..ho {
                for ox in 0..wo {
                    let row = (b * ho + oy) * wo + ox;
                    for ky in 0..k {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= self.height as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix < 0 || ix >= self.width as isize {
                                continue;
                            }
                            let src = ((b * self.height + iy as usize) * self.width + ix as usize) * c;
                            let dst = row * plen + (ky * k + kx) * c;
                            f(src, dst);
                        }
                    }
                }
            }
        }
    }
}

/// `[B·H·W, C]` → `[B·Ho·Wo, k·k·C]` with column order `(ky, kx, c)`.
pub fn im2col<T: Real>(a: &Tensor<T>, g: &ConvGeometry) -> Tensor<T> {
    assert_eq!(a.shape(), [g.batch * g.height * g.width, g.channels]);
    let rows = g.batch * g.out_height() * g.out_width();
    let mut out = vec![T::zero(); rows * g.patch_len()];
    let c = g.channels;
    g.for_each_tap(|src, dst| out[dst..dst + c].copy_from_slice(&a.data[src..src + c]));
    Tensor::from_vec([rows, g.patch_len()], out)
}

/// Adjoint of [`im2col`]: overlapping taps are summed.
pub fn col2im<T: Real>(a: &Tensor<T>, g: &ConvGeometry) -> Tensor<T> {
    let rows = g.batch * g.out_height() * g.out_width();
    assert_eq!(a.shape(), [rows, g.patch_len()]);
    let mut out = vec![T::zero(); g.batch * g.height * g.width * g.channels];
    let c = g.channels;
    g.for_each_tap(|src, dst| {
        for (o, &v) in out[src..src + c].iter_mut().zip(&a.data[dst..dst + c]) {
            *o = *o + v;
        }
    });
    Tensor::from_vec([g.batch * g.height * g.width, c], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_transpose_flags_agree_with_explicit_transpose() {
        let a = Tensor::from_vec([2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = Tensor::from_vec([3, 2], vec![0.5, -1.0, 2.0, 0.0, 1.0, 3.0]);
        let ab = matmul(&a, &b, false, false);
        assert_eq!(ab.data(), &[7.5, 8.0, 18.0, 14.0]);
        let at = a.transpose();
        let bt = b.transpose();
        assert_eq!(matmul(&at, &b, true, false), ab);
        assert_eq!(matmul(&a, &bt, false, true), ab);
        assert_eq!(matmul(&at, &bt, true, true), ab);
    }

    #[test]
    fn im2col_and_col2im_are_adjoint() {
        let g = ConvGeometry {
            batch: 2,
            height: 5,
            width: 4,
            channels: 3,
            kernel: 3,
            stride: 2,
            padding: 1,
        };
        let x: Tensor<f64> = Tensor::from_vec(
            [40, 3],
            (0..120).map(|i| ((i * 37 % 17) as f64) - 8.0).collect(),
        );
        let rows = g.batch * g.out_height() * g.out_width();
        let y: Tensor<f64> = Tensor::from_vec(
            [rows, 27],
            (0..rows * 27).map(|i| ((i * 13 % 11) as f64) * 0.5 - 2.0).collect(),
        );
        let lhs: f64 = im2col(&x, &g).data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(col2im(&y, &g).data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9);
    }

    #[test]
    fn gather_and_scatter_rows_are_adjoint() {
        let a: Tensor<f64> = Tensor::from_vec([3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let idx = [2, 0, 2, 1];
        let g = gather_rows(&a, &idx);
        assert_eq!(g.data(), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0, 3.0, 4.0]);
        let s = scatter_add_rows(&g, &idx, 3);
        assert_eq!(s.data(), &[1.0, 2.0, 3.0, 4.0, 10.0, 12.0]);
    }
}
