//! Dense NCHW tensors and the convolution / GEMM kernels the network runs on.
//!
//! Convolutions are stride-1 and "same" padded. The production path unfolds
//! receptive fields with [`im2col`] and multiplies by the reshaped weight
//! matrix; [`conv2d_forward_direct`] is the plain loop nest kept as the
//! reference the fast path is tested against.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::AddAssign;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Element type of a tensor. Implemented for `f32` (default) and `f64`
/// (used for finite-difference gradient checks).
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + AddAssign + Sum + Default + Debug + Send + Sync + 'static
{
    const NAME: &'static str;

    /// `c = a * b + beta * c` on strided row/column views.
    ///
    /// # Safety
    /// Every index reachable through the given dimensions and strides must be
    /// in bounds for the respective slice.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

pub(crate) fn cast<T: Scalar>(v: f64) -> T {
    T::from_f64(v).expect("f64 is representable in every Scalar")
}

/// Dense row-major array of up to four extents.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if shape.is_empty() || shape.len() > 4 {
            return Err(Error::config(format!(
                "tensor rank must be 1..=4, got {}",
                shape.len()
            )));
        }
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::config(format!(
                "shape {shape:?} needs {len} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..len).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `(N, C, H, W)` of a rank-4 tensor.
    pub fn dims4(&self) -> Result<[usize; 4]> {
        match self.shape.as_slice() {
            &[n, c, h, w] => Ok([n, c, h, w]),
            s => Err(Error::config(format!(
                "expected a rank-4 tensor, got shape {s:?}"
            ))),
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != self.data.len() {
            return Err(Error::config(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| cast(v.to_f64().unwrap_or(f64::NAN)))
                .collect(),
        }
    }

    pub fn fill(&mut self, value: T) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    /// Elementwise `self += other`.
    pub fn add_assign(&mut self, other: &Tensor<T>) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::config(format!(
                "cannot accumulate {:?} into {:?}",
                other.shape, self.shape
            )));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn ensure_finite(&self, what: &str) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(i) => Err(Error::numeric(format!(
                "{what}: non-finite value at flat index {i}"
            ))),
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff on mismatched shapes");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (*a - *b).abs().to_f64().unwrap_or(f64::INFINITY))
            .fold(0.0, f64::max)
    }

    /// Copy of batch item `n` as a `1×C×H×W` tensor.
    pub fn batch_item(&self, n: usize) -> Result<Tensor<T>> {
        let [nn, c, h, w] = self.dims4()?;
        if n >= nn {
            return Err(Error::config(format!("batch index {n} out of range {nn}")));
        }
        let plane = c * h * w;
        Tensor::new(
            &[1, c, h, w],
            self.data[n * plane..(n + 1) * plane].to_vec(),
        )
    }

    /// Stack equally shaped `1×C×H×W` (or `N×C×H×W`) tensors along the batch axis.
    pub fn stack(items: &[Tensor<T>]) -> Result<Tensor<T>> {
        let first = items
            .first()
            .ok_or_else(|| Error::config("cannot stack zero tensors"))?;
        let [_, c, h, w] = first.dims4()?;
        let mut n = 0;
        let mut data = Vec::new();
        for t in items {
            let [tn, tc, th, tw] = t.dims4()?;
            if (tc, th, tw) != (c, h, w) {
                return Err(Error::config(format!(
                    "cannot stack {:?} with {:?}",
                    t.shape, first.shape
                )));
            }
            n += tn;
            data.extend_from_slice(&t.data);
        }
        Tensor::new(&[n, c, h, w], data)
    }
}

/// Stride-1, same-padded 2-D convolution geometry.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub pad_h: usize,
    pub pad_w: usize,
}

impl ConvSpec {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel_h: usize,
        kernel_w: usize,
    ) -> Result<Self> {
        if in_channels == 0 || out_channels == 0 {
            return Err(Error::config("convolution channel counts must be >= 1"));
        }
        if kernel_h % 2 == 0 || kernel_w % 2 == 0 {
            return Err(Error::config(format!(
                "kernel {kernel_h}x{kernel_w} must have odd extents for same padding"
            )));
        }
        Ok(ConvSpec {
            in_channels,
            out_channels,
            kernel_h,
            kernel_w,
            pad_h: (kernel_h - 1) / 2,
            pad_w: (kernel_w - 1) / 2,
        })
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [
            self.out_channels,
            self.in_channels,
            self.kernel_h,
            self.kernel_w,
        ]
    }

    /// Rows of the unfolded patch matrix: `C·KH·KW`.
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    pub fn param_count(&self) -> usize {
        self.out_channels * self.patch_len() + self.out_channels
    }

    fn check(&self, x: &[usize; 4], w: &[usize], b: &[usize]) -> Result<()> {
        if x[1] != self.in_channels {
            return Err(Error::config(format!(
                "input has {} channels, convolution expects {}",
                x[1], self.in_channels
            )));
        }
        if w != self.weight_shape() {
            return Err(Error::config(format!(
                "weight shape {w:?} does not match {:?}",
                self.weight_shape()
            )));
        }
        if b != [self.out_channels] {
            return Err(Error::config(format!(
                "bias shape {b:?} does not match [{}]",
                self.out_channels
            )));
        }
        if x.iter().any(|&e| e == 0) {
            return Err(Error::config(format!(
                "input extents must be >= 1, got {x:?}"
            )));
        }
        Ok(())
    }
}

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix<T = f32> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::config(format!(
                "{rows}x{cols} matrix needs {} elements, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = T::one();
        }
        m
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }
}

/// Strided read-only view used to express transposes without copying.
#[derive(Clone, Copy)]
struct View<'a, T> {
    data: &'a [T],
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

impl<'a, T> View<'a, T> {
    fn row_major(data: &'a [T], rows: usize, cols: usize) -> Self {
        View {
            data,
            rows,
            cols,
            rs: cols,
            cs: 1,
        }
    }

    fn transposed(self) -> Self {
        View {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }

    fn max_index(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            0
        } else {
            (self.rows - 1) * self.rs + (self.cols - 1) * self.cs
        }
    }
}

/// `c = a·b + beta·c`, with `c` row-major `a.rows × b.cols`.
fn gemm_into<T: Scalar>(a: View<'_, T>, b: View<'_, T>, beta: T, c: &mut [T]) {
    assert_eq!(a.cols, b.rows, "gemm inner dimensions");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert!(c.len() >= m * n, "gemm output buffer too small");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in &mut c[..m * n] {
            *v = *v * beta;
        }
        return;
    }
    assert!(a.max_index() < a.data.len() && b.max_index() < b.data.len());
    // SAFETY: the asserts above bound every index matrixmultiply touches.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Standard matrix product `a · b`.
pub fn gemm<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.cols != b.rows {
        return Err(Error::config(format!(
            "gemm dimension mismatch: {}x{} times {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    gemm_into(
        View::row_major(&a.data, a.rows, a.cols),
        View::row_major(&b.data, b.rows, b.cols),
        T::zero(),
        &mut out.data,
    );
    Ok(out)
}

// Upper bound on unfolded patch-matrix elements materialized at once.
const COL_BUDGET: usize = 1 << 18;

/// Image rows (over the flattened `N·H` axis) unfolded per chunk.
fn rows_per_chunk(spec: &ConvSpec, n: usize, h: usize, w: usize) -> usize {
    (COL_BUDGET / (spec.patch_len() * w).max(1)).clamp(1, n * h)
}

/// Unfold global image rows `r0..r1` (row `r` is image `r / h`, line `r % h`)
/// into a `patch_len × (r1-r0)·w` matrix appended to `col`.
fn im2col_rows<T: Scalar>(
    x: &[T],
    dims: [usize; 4],
    spec: &ConvSpec,
    r0: usize,
    r1: usize,
    col: &mut Vec<T>,
) {
    let [_, c, h, w] = dims;
    col.reserve(spec.patch_len() * (r1 - r0) * w);
    let zero = T::zero();
    for ci in 0..c {
        for dy in 0..spec.kernel_h {
            for dx in 0..spec.kernel_w {
                // Valid output columns: 0 <= x + dx - pad < w.
                let x_lo = spec.pad_w.saturating_sub(dx);
                let x_hi = (w + spec.pad_w).saturating_sub(dx).min(w);
                for r in r0..r1 {
                    let (ni, y) = (r / h, r % h);
                    let iy = y as isize + dy as isize - spec.pad_h as isize;
                    if iy < 0 || iy >= h as isize || x_lo >= x_hi {
                        col.extend(std::iter::repeat_n(zero, w));
                        continue;
                    }
                    let src = &x[((ni * c + ci) * h + iy as usize) * w..][..w];
                    let off = x_lo + dx - spec.pad_w;
                    col.extend(std::iter::repeat_n(zero, x_lo));
                    col.extend_from_slice(&src[off..off + (x_hi - x_lo)]);
                    col.extend(std::iter::repeat_n(zero, w - x_hi));
                }
            }
        }
    }
}

/// Adjoint of [`im2col_rows`]: scatter-add a patch matrix back into `grad_x`.
fn col2im_rows<T: Scalar>(
    col: &[T],
    dims: [usize; 4],
    spec: &ConvSpec,
    r0: usize,
    r1: usize,
    grad_x: &mut [T],
) {
    let [_, c, h, w] = dims;
    let ncols = (r1 - r0) * w;
    for ci in 0..c {
        for dy in 0..spec.kernel_h {
            for dx in 0..spec.kernel_w {
                let row = (ci * spec.kernel_h + dy) * spec.kernel_w + dx;
                let src_row = &col[row * ncols..(row + 1) * ncols];
                let x_lo = spec.pad_w.saturating_sub(dx);
                let x_hi = (w + spec.pad_w).saturating_sub(dx).min(w);
                if x_lo >= x_hi {
                    continue;
                }
                for r in r0..r1 {
                    let (ni, y) = (r / h, r % h);
                    let iy = y as isize + dy as isize - spec.pad_h as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &src_row[(r - r0) * w..(r - r0 + 1) * w];
                    let dst = &mut grad_x[((ni * c + ci) * h + iy as usize) * w..][..w];
                    let off = x_lo + dx - spec.pad_w;
                    for (d, &s) in dst[off..off + (x_hi - x_lo)]
                        .iter_mut()
                        .zip(&src[x_lo..x_hi])
                    {
                        *d += s;
                    }
                }
            }
        }
    }
}

/// Unfold each batch item into a `(C·KH·KW) × (H·W)` patch matrix, rows
/// ordered `(channel, dy, dx)`, columns in raster order of output positions.
pub fn im2col<T: Scalar>(x: &Tensor<T>, spec: &ConvSpec) -> Result<Vec<Matrix<T>>> {
    let dims = x.dims4()?;
    let [n, c, h, w] = dims;
    if c != spec.in_channels {
        return Err(Error::config(format!(
            "input has {c} channels, convolution expects {}",
            spec.in_channels
        )));
    }
    (0..n)
        .map(|ni| {
            let mut data = Vec::new();
            im2col_rows(x.data(), dims, spec, ni * h, (ni + 1) * h, &mut data);
            Matrix::new(spec.patch_len(), h * w, data)
        })
        .collect()
}

fn check_conv_inputs<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    spec: &ConvSpec,
) -> Result<[usize; 4]> {
    let dims = x.dims4()?;
    spec.check(&dims, weight.shape(), bias.shape())?;
    x.ensure_finite("convolution input")?;
    weight.ensure_finite("convolution weight")?;
    bias.ensure_finite("convolution bias")?;
    Ok(dims)
}

/// Same-padded convolution through the im2col + GEMM path.
pub fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    let dims = check_conv_inputs(x, weight, bias, spec)?;
    let [n, _, h, w] = dims;
    let o = spec.out_channels;
    let k = spec.patch_len();
    let step = rows_per_chunk(spec, n, h, w);
    let starts: Vec<usize> = (0..n * h).step_by(step).collect();

    let chunks: Vec<Vec<T>> = starts
        .par_iter()
        .map(|&r0| {
            let r1 = (r0 + step).min(n * h);
            let ncols = (r1 - r0) * w;
            let mut col = Vec::new();
            im2col_rows(x.data(), dims, spec, r0, r1, &mut col);
            let mut out = vec![T::zero(); o * ncols];
            gemm_into(
                View::row_major(weight.data(), o, k),
                View::row_major(&col, k, ncols),
                T::zero(),
                &mut out,
            );
            out
        })
        .collect();

    let mut out = Tensor::zeros(&[n, o, h, w]);
    let od = out.data_mut();
    for (&r0, chunk) in starts.iter().zip(&chunks) {
        let r1 = (r0 + step).min(n * h);
        let ncols = (r1 - r0) * w;
        for oc in 0..o {
            let bo = bias.data()[oc];
            for r in r0..r1 {
                let (ni, y) = (r / h, r % h);
                let src = &chunk[oc * ncols + (r - r0) * w..][..w];
                let dst = &mut od[((ni * o + oc) * h + y) * w..][..w];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = s + bo;
                }
            }
        }
    }
    Ok(out)
}

/// Reference convolution: the textbook loop nest, no unfolding.
pub fn conv2d_forward_direct<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    let [n, c, h, w] = check_conv_inputs(x, weight, bias, spec)?;
    let o = spec.out_channels;
    let (kh, kw) = (spec.kernel_h, spec.kernel_w);
    let xd = x.data();
    let wd = weight.data();
    let mut out = Tensor::zeros(&[n, o, h, w]);
    let od = out.data_mut();
    for ni in 0..n {
        for oc in 0..o {
            for y in 0..h {
                for xx in 0..w {
                    let mut acc = bias.data()[oc];
                    for ci in 0..c {
                        for dy in 0..kh {
                            let iy = y as isize + dy as isize - spec.pad_h as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for dx in 0..kw {
                                let ix = xx as isize + dx as isize - spec.pad_w as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                acc += wd[((oc * c + ci) * kh + dy) * kw + dx]
                                    * xd[((ni * c + ci) * h + iy as usize) * w + ix as usize];
                            }
                        }
                    }
                    od[((ni * o + oc) * h + y) * w + xx] = acc;
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of a same-padded convolution.
#[derive(Clone, Debug)]
pub struct ConvGrads<T = f32> {
    pub grad_x: Tensor<T>,
    pub grad_w: Tensor<T>,
    pub grad_b: Tensor<T>,
}

/// Reverse-mode companion of [`conv2d_forward`].
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    spec: &ConvSpec,
) -> Result<ConvGrads<T>> {
    let dims = x.dims4()?;
    let [n, _, h, w] = dims;
    spec.check(&dims, weight.shape(), &[spec.out_channels])?;
    let o = spec.out_channels;
    if grad_out.shape() != [n, o, h, w] {
        return Err(Error::config(format!(
            "gradient shape {:?} does not match convolution output [{n}, {o}, {h}, {w}]",
            grad_out.shape()
        )));
    }
    let k = spec.patch_len();
    let step = rows_per_chunk(spec, n, h, w);

    let mut grad_x = Tensor::zeros(&[n, spec.in_channels, h, w]);
    let mut grad_w = Tensor::zeros(&spec.weight_shape());
    let mut grad_b = Tensor::zeros(&[o]);
    let god = grad_out.data();
    let mut go = Vec::new();
    let mut col = Vec::new();

    for r0 in (0..n * h).step_by(step) {
        let r1 = (r0 + step).min(n * h);
        let ncols = (r1 - r0) * w;

        go.clear();
        for oc in 0..o {
            for r in r0..r1 {
                let (ni, y) = (r / h, r % h);
                go.extend_from_slice(&god[((ni * o + oc) * h + y) * w..][..w]);
            }
        }
        for (oc, gb) in grad_b.data_mut().iter_mut().enumerate() {
            for &g in &go[oc * ncols..(oc + 1) * ncols] {
                *gb += g;
            }
        }

        col.clear();
        im2col_rows(x.data(), dims, spec, r0, r1, &mut col);
        gemm_into(
            View::row_major(&go, o, ncols),
            View::row_major(&col, k, ncols).transposed(),
            T::one(),
            grad_w.data_mut(),
        );

        gemm_into(
            View::row_major(weight.data(), o, k).transposed(),
            View::row_major(&go, o, ncols),
            T::zero(),
            &mut col,
        );
        col2im_rows(&col, dims, spec, r0, r1, grad_x.data_mut());
    }

    Ok(ConvGrads {
        grad_x,
        grad_w,
        grad_b,
    })
}

/// Channel-to-space rearrangement: `(N, C·r², H, W) -> (N, C, H·r, W·r)` with
/// `out[n,c,y,x] = in[n, c·r² + r·(y mod r) + (x mod r), y/r, x/r]`.
pub fn pixel_shuffle<T: Scalar>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let [n, cin, h, w] = x.dims4()?;
    if r == 0 || cin % (r * r) != 0 {
        return Err(Error::config(format!(
            "pixel shuffle by {r} needs channels divisible by {}, got {cin}",
            r * r
        )));
    }
    let c = cin / (r * r);
    let (oh, ow) = (h * r, w * r);
    let xd = x.data();
    let mut out = Vec::with_capacity(x.len());
    for ni in 0..n {
        for ci in 0..c {
            for y in 0..oh {
                for xx in 0..ow {
                    let src_c = ci * r * r + r * (y % r) + (xx % r);
                    out.push(xd[((ni * cin + src_c) * h + y / r) * w + xx / r]);
                }
            }
        }
    }
    Tensor::new(&[n, c, oh, ow], out)
}

/// Inverse of [`pixel_shuffle`]; also its backward pass.
pub fn pixel_unshuffle<T: Scalar>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let [n, c, oh, ow] = x.dims4()?;
    if r == 0 || oh % r != 0 || ow % r != 0 {
        return Err(Error::config(format!(
            "pixel unshuffle by {r} needs spatial extents divisible by {r}, got {oh}x{ow}"
        )));
    }
    let (h, w) = (oh / r, ow / r);
    let cout = c * r * r;
    let xd = x.data();
    let mut out = vec![T::zero(); x.len()];
    for ni in 0..n {
        for ci in 0..c {
            for y in 0..oh {
                for xx in 0..ow {
                    let dst_c = ci * r * r + r * (y % r) + (xx % r);
                    out[((ni * cout + dst_c) * h + y / r) * w + xx / r] =
                        xd[((ni * c + ci) * oh + y) * ow + xx];
                }
            }
        }
    }
    Tensor::new(&[n, cout, h, w], out)
}
