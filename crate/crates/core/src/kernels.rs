//! Convolution and transposed convolution kernels.
//!
//! Both are lowered to `im2col` + GEMM (large stride-1 kernels may take a
//! frequency-domain path instead, see [`conv2d`]). The column buffer is built for a
//! band of output rows at a time so large kernels (25x25) stay within a
//! fixed memory budget. Band boundaries depend only on the geometry, so
//! results are bit-reproducible.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

/// Upper bound on column buffer elements per band.
const COLUMN_BUDGET: usize = 1 << 21;

/// Sliding-window geometry: a `channels x height x width` image scanned by
/// a `kernel x kernel` window with the given stride and zero padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        if kernel == 0 || stride == 0 {
            return Err(Error::invalid(
                "convolution",
                alloc::format!("kernel {kernel} and stride {stride} must be positive"),
            ));
        }
        if height + 2 * pad < kernel {
            return Err(Error::shape(
                "conv2d",
                alloc::format!("height {height} + 2*padding {pad} is smaller than kernel {kernel}"),
            ));
        }
        if width + 2 * pad < kernel {
            return Err(Error::shape(
                "conv2d",
                alloc::format!("width {width} + 2*padding {pad} is smaller than kernel {kernel}"),
            ));
        }
        Ok(ConvGeometry {
            channels,
            height,
            width,
            kernel,
            stride,
            pad,
            out_h: (height + 2 * pad - kernel) / stride + 1,
            out_w: (width + 2 * pad - kernel) / stride + 1,
        })
    }

    /// Rows of the column matrix: `channels * kernel^2`.
    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }

    fn bands(&self) -> impl Iterator<Item = (usize, usize)> {
        let per_row = self.col_rows() * self.out_w;
        let rows = (COLUMN_BUDGET / per_row.max(1)).clamp(1, self.out_h);
        let out_h = self.out_h;
        (0..out_h)
            .step_by(rows)
            .map(move |y0| (y0, (y0 + rows).min(out_h)))
    }

    /// Valid output columns `[lo, hi)` for kernel offset `kx`.
    #[inline]
    fn x_range(&self, kx: usize) -> (usize, usize) {
        // ox * stride + kx - pad in [0, width)
        let lo = if kx >= self.pad {
            0
        } else {
            (self.pad - kx).div_ceil(self.stride)
        };
        let hi = if self.width + self.pad > kx {
            ((self.width + self.pad - kx - 1) / self.stride + 1).min(self.out_w)
        } else {
            0
        };
        (lo.min(hi), hi)
    }
}

/// Fills `col` (`col_rows x (y1 - y0) * out_w`) from output rows `y0..y1`.
pub fn im2col<T: Scalar>(img: &[T], g: &ConvGeometry, y0: usize, y1: usize, col: &mut [T]) {
    let np = (y1 - y0) * g.out_w;
    let k = g.kernel;
    for ci in 0..g.channels {
        let plane = &img[ci * g.height * g.width..(ci + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let r = (ci * k + ky) * k + kx;
                let row = &mut col[r * np..(r + 1) * np];
                let (lo, hi) = g.x_range(kx);
                for oy in y0..y1 {
                    let dst = &mut row[(oy - y0) * g.out_w..(oy - y0 + 1) * g.out_w];
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize || lo >= hi {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    dst[..lo].fill(T::zero());
                    dst[hi..].fill(T::zero());
                    let base = lo * g.stride + kx - g.pad;
                    if g.stride == 1 {
                        dst[lo..hi].copy_from_slice(&src[base..base + hi - lo]);
                    } else {
                        for (j, d) in dst[lo..hi].iter_mut().enumerate() {
                            *d = src[base + j * g.stride];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds `col` back into `img`.
pub fn col2im_add<T: Scalar>(col: &[T], g: &ConvGeometry, y0: usize, y1: usize, img: &mut [T]) {
    let np = (y1 - y0) * g.out_w;
    let k = g.kernel;
    for ci in 0..g.channels {
        let plane = &mut img[ci * g.height * g.width..(ci + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let r = (ci * k + ky) * k + kx;
                let row = &col[r * np..(r + 1) * np];
                let (lo, hi) = g.x_range(kx);
                if lo >= hi {
                    continue;
                }
                for oy in y0..y1 {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let src = &row[(oy - y0) * g.out_w..(oy - y0 + 1) * g.out_w];
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    let base = lo * g.stride + kx - g.pad;
                    for (j, s) in src[lo..hi].iter().enumerate() {
                        let d = &mut dst[base + j * g.stride];
                        *d = *d + *s;
                    }
                }
            }
        }
    }
}

struct View<'a, T> {
    data: &'a [T],
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

impl<'a, T> View<'a, T> {
    fn new(data: &'a [T], rows: usize, cols: usize, rs: usize, cs: usize) -> Self {
        assert!(rows == 0 || cols == 0 || (rows - 1) * rs + (cols - 1) * cs < data.len());
        View {
            data,
            rows,
            cols,
            rs,
            cs,
        }
    }

    fn transposed(&self) -> Self {
        View {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }
}

/// `c <- a * b + beta * c` with `c` given as a strided mutable view.
fn gemm<T: Scalar>(a: View<'_, T>, b: View<'_, T>, beta: T, c: &mut [T], rsc: usize, csc: usize) {
    assert_eq!(a.cols, b.rows);
    let (m, k, n) = (a.rows, a.cols, b.cols);
    if m == 0 || n == 0 {
        return;
    }
    assert!((m - 1) * rsc + (n - 1) * csc < c.len());
    if n <= SKINNY_COLS && (a.cs == 1 || a.rs == 1) {
        skinny_gemm(&a, &b, beta, c, rsc, csc);
        return;
    }
    if m <= SKINNY_COLS && (b.cs == 1 || b.rs == 1) {
        // Few rows: the transposed product has few columns.
        skinny_gemm(&b.transposed(), &a.transposed(), beta, c, csc, rsc);
        return;
    }
    if k <= SKINNY_COLS && b.cs == 1 && csc == 1 {
        thin_gemm(&a, &b, beta, c, rsc);
        return;
    }
    // SAFETY: extents checked above; `c` is a distinct mutable borrow.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        )
    }
}

/// Widest right-hand side handled by [`skinny_gemm`]. Packing the left
/// operand costs as much as the product itself below this.
const SKINNY_COLS: usize = 4;

/// Matrix times a few columns, streaming `a` once without packing.
fn skinny_gemm<T: Scalar>(a: &View<'_, T>, b: &View<'_, T>, beta: T, c: &mut [T], rsc: usize, csc: usize) {
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let mut acc = vec![T::zero(); m];
    let mut column = vec![T::zero(); k];
    for j in 0..n {
        for (p, v) in column.iter_mut().enumerate() {
            *v = b.data[p * b.rs + j * b.cs];
        }
        if a.cs == 1 {
            for (i, out) in acc.iter_mut().enumerate() {
                let row = &a.data[i * a.rs..i * a.rs + k];
                *out = dot(row, &column);
            }
        } else {
            acc.iter_mut().for_each(|v| *v = T::zero());
            for (p, &y) in column.iter().enumerate() {
                let col = &a.data[p * a.cs..p * a.cs + m];
                acc.iter_mut().zip(col).for_each(|(s, &x)| *s = *s + x * y);
            }
        }
        for (i, &v) in acc.iter().enumerate() {
            let d = &mut c[i * rsc + j * csc];
            *d = if beta == T::zero() { v } else { beta * *d + v };
        }
    }
}

/// Product with a short inner dimension as a sum of `k` scaled rows of
/// `b` per output row. Needs contiguous rows in `b` and `c`.
fn thin_gemm<T: Scalar>(a: &View<'_, T>, b: &View<'_, T>, beta: T, c: &mut [T], rsc: usize) {
    let (m, k, n) = (a.rows, a.cols, b.cols);
    for i in 0..m {
        let out = &mut c[i * rsc..i * rsc + n];
        if beta == T::zero() {
            out.fill(T::zero());
        } else if beta != T::one() {
            out.iter_mut().for_each(|v| *v = beta * *v);
        }
        for p in 0..k {
            let x = a.data[i * a.rs + p * a.cs];
            let row = &b.data[p * b.rs..p * b.rs + n];
            out.iter_mut().zip(row).for_each(|(o, &y)| *o = *o + x * y);
        }
    }
}

/// Dot product with eight independent partial sums, so it vectorizes.
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut lanes = [T::zero(); 8];
    let (ac, bc) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: T = ac.remainder().iter().zip(bc.remainder()).fold(T::zero(), |s, (&x, &y)| s + x * y);
    for (x, y) in ac.zip(bc) {
        for l in 0..8 {
            lanes[l] = lanes[l] + x[l] * y[l];
        }
    }
    lanes.iter().fold(tail, |s, &v| s + v)
}

fn check_weight(op: &'static str, w: Shape) -> Result<()> {
    if w.h != w.w {
        return Err(Error::shape(
            op,
            alloc::format!("kernel must be square, weight is {w}"),
        ));
    }
    Ok(())
}

fn check_bias(op: &'static str, b: Option<&Shape>, channels: usize) -> Result<()> {
    if let Some(b) = b {
        if *b != Shape::new(1, channels, 1, 1) {
            return Err(Error::shape(
                op,
                alloc::format!("bias {b} must be (1, {channels}, 1, 1)"),
            ));
        }
    }
    Ok(())
}

fn add_bias<T: Scalar>(out: &mut [T], bias: &[T], plane: usize) {
    for (chunk, &b) in out.chunks_mut(plane).zip(bias.iter().cycle()) {
        for v in chunk {
            *v = *v + b;
        }
    }
}

/// Per-channel sum of an output gradient: the bias gradient.
pub fn bias_grad<T: Scalar>(gout: &Tensor<T>) -> Tensor<T> {
    let s = gout.shape();
    let mut g = vec![T::zero(); s.c];
    for (i, chunk) in gout.data().chunks(s.plane()).enumerate() {
        let acc = &mut g[i % s.c];
        *acc = chunk.iter().fold(*acc, |a, &v| a + v);
    }
    Tensor::from_vec(Shape::new(1, s.c, 1, 1), g).expect("bias shape")
}

/// Geometry of a convolution of `input` by a `(c_out, c_in, k, k)` weight.
pub fn conv2d_geometry(input: Shape, weight: Shape, stride: usize, pad: usize) -> Result<ConvGeometry> {
    check_weight("conv2d", weight)?;
    if input.c != weight.c {
        return Err(Error::shape(
            "conv2d",
            alloc::format!("input channels {} != weight c_in {}", input.c, weight.c),
        ));
    }
    ConvGeometry::new(input.c, input.h, input.w, weight.h, stride, pad)
}

/// Zero-padded cross-correlation. `weight` is `(c_out, c_in, k, k)`,
/// `bias` is `(1, c_out, 1, 1)`.
///
/// With the `std` feature, stride-1 convolutions on square inputs may be
/// evaluated in the frequency domain when that is estimated to be faster
/// (see [`crate::fft::preferred`]); everything else uses [`conv2d_gemm`].
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    #[cfg(feature = "std")]
    {
        let g = conv2d_geometry(input.shape(), weight.shape(), stride, pad)?;
        if crate::fft::preferred(&g, weight.shape().n, input.shape().n) {
            check_bias("conv2d", bias.map(|b| b.shape()).as_ref(), weight.shape().n)?;
            let mut out = crate::fft::conv2d(input, weight, &g);
            if let Some(b) = bias {
                add_bias(out.data_mut(), b.data(), g.out_plane());
            }
            return Ok(out);
        }
    }
    conv2d_gemm(input, weight, bias, stride, pad)
}

/// [`conv2d`] lowered to `im2col` + GEMM for every geometry.
pub fn conv2d_gemm<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let (xs, ws) = (input.shape(), weight.shape());
    let g = conv2d_geometry(xs, ws, stride, pad)?;
    check_bias("conv2d", bias.map(|b| b.shape()).as_ref(), ws.n)?;
    let cout = ws.n;
    let kk = g.col_rows();
    let p = g.out_plane();
    let out_shape = Shape::new(xs.n, cout, g.out_h, g.out_w);
    let mut out = vec![T::zero(); out_shape.numel()];
    let mut col = Vec::new();
    let img_len = xs.c * xs.plane();
    for n in 0..xs.n {
        let img = &input.data()[n * img_len..(n + 1) * img_len];
        let dst = &mut out[n * cout * p..(n + 1) * cout * p];
        for (y0, y1) in g.bands() {
            let np = (y1 - y0) * g.out_w;
            col.resize(kk * np, T::zero());
            im2col(img, &g, y0, y1, &mut col);
            gemm(
                View::new(weight.data(), cout, kk, kk, 1),
                View::new(&col, kk, np, np, 1),
                T::zero(),
                &mut dst[y0 * g.out_w..],
                p,
                1,
            );
        }
    }
    if let Some(b) = bias {
        add_bias(&mut out, b.data(), p);
    }
    Tensor::from_vec(out_shape, out)
}

/// Gradients of [`conv2d`] with respect to its input and weight.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    gout: &Tensor<T>,
    stride: usize,
    pad: usize,
    want_input: bool,
    want_weight: bool,
) -> Result<(Option<Tensor<T>>, Option<Tensor<T>>)> {
    #[cfg(feature = "std")]
    {
        let (xs, ws) = (input.shape(), weight.shape());
        let g = conv2d_geometry(xs, ws, stride, pad)?;
        if crate::fft::preferred(&g, ws.n, xs.n) {
            check_grad_shape(gout.shape(), Shape::new(xs.n, ws.n, g.out_h, g.out_w))?;
            return Ok(crate::fft::conv2d_backward(input, weight, gout, &g, want_input, want_weight));
        }
    }
    conv2d_backward_gemm(input, weight, gout, stride, pad, want_input, want_weight)
}

fn check_grad_shape(got: Shape, want: Shape) -> Result<()> {
    if got != want {
        return Err(Error::shape("conv2d_backward", alloc::format!("gradient {got}, expected {want}")));
    }
    Ok(())
}

/// [`conv2d_backward`] through `im2col` + GEMM for every geometry.
pub fn conv2d_backward_gemm<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    gout: &Tensor<T>,
    stride: usize,
    pad: usize,
    want_input: bool,
    want_weight: bool,
) -> Result<(Option<Tensor<T>>, Option<Tensor<T>>)> {
    let (xs, ws) = (input.shape(), weight.shape());
    let g = conv2d_geometry(xs, ws, stride, pad)?;
    let cout = ws.n;
    let kk = g.col_rows();
    let p = g.out_plane();
    check_grad_shape(gout.shape(), Shape::new(xs.n, cout, g.out_h, g.out_w))?;
    let img_len = xs.c * xs.plane();
    let mut gx = want_input.then(|| vec![T::zero(); xs.numel()]);
    let mut gw = want_weight.then(|| vec![T::zero(); ws.numel()]);
    let mut col = Vec::new();
    for n in 0..xs.n {
        let go = &gout.data()[n * cout * p..(n + 1) * cout * p];
        for (y0, y1) in g.bands() {
            let np = (y1 - y0) * g.out_w;
            col.resize(kk * np, T::zero());
            let go_band = &go[y0 * g.out_w..];
            if let Some(gw) = gw.as_mut() {
                im2col(&input.data()[n * img_len..(n + 1) * img_len], &g, y0, y1, &mut col);
                gemm(
                    View::new(go_band, cout, np, p, 1),
                    View::new(&col, np, kk, 1, np),
                    T::one(),
                    gw,
                    kk,
                    1,
                );
            }
            if let Some(gx) = gx.as_mut() {
                gemm(
                    View::new(weight.data(), kk, cout, 1, kk),
                    View::new(go_band, cout, np, p, 1),
                    T::zero(),
                    &mut col,
                    np,
                    1,
                );
                col2im_add(&col, &g, y0, y1, &mut gx[n * img_len..(n + 1) * img_len]);
            }
        }
    }
    Ok((
        gx.map(|d| Tensor::from_vec(xs, d).expect("input shape")),
        gw.map(|d| Tensor::from_vec(ws, d).expect("weight shape")),
    ))
}

/// Geometry of a transposed convolution, expressed as the forward
/// convolution it is the adjoint of: the "image" is the deconvolution
/// output and the window positions are the deconvolution input pixels.
pub fn deconv2d_geometry(input: Shape, weight: Shape, stride: usize, pad: usize) -> Result<ConvGeometry> {
    check_weight("deconv2d", weight)?;
    if input.c != weight.n {
        return Err(Error::shape(
            "deconv2d",
            alloc::format!("input channels {} != weight c_in {}", input.c, weight.n),
        ));
    }
    if stride == 0 {
        return Err(Error::invalid("deconv2d", "stride must be positive"));
    }
    let k = weight.h;
    let out = |d: usize| ((d - 1) * stride + k) as isize - 2 * pad as isize;
    let (oh, ow) = (out(input.h), out(input.w));
    if oh < 1 || ow < 1 {
        return Err(Error::shape(
            "deconv2d",
            alloc::format!("non-positive output size {oh}x{ow}"),
        ));
    }
    let g = ConvGeometry::new(weight.c, oh as usize, ow as usize, k, stride, pad)?;
    debug_assert_eq!((g.out_h, g.out_w), (input.h, input.w));
    Ok(g)
}

/// Transposed convolution. `weight` is `(c_in, c_out, k, k)`; output
/// spatial size is `(h - 1) * stride - 2 * pad + k`.
pub fn deconv2d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let (xs, ws) = (input.shape(), weight.shape());
    let g = deconv2d_geometry(xs, ws, stride, pad)?;
    check_bias("deconv2d", bias.map(|b| b.shape()).as_ref(), ws.c)?;
    let cin = ws.n;
    let kk = g.col_rows();
    let p_in = xs.plane();
    let out_shape = Shape::new(xs.n, ws.c, g.height, g.width);
    let out_len = ws.c * g.height * g.width;
    let mut out = vec![T::zero(); out_shape.numel()];
    let mut col = Vec::new();
    for n in 0..xs.n {
        let x = &input.data()[n * cin * p_in..(n + 1) * cin * p_in];
        for (y0, y1) in g.bands() {
            let np = (y1 - y0) * g.out_w;
            col.resize(kk * np, T::zero());
            gemm(
                View::new(weight.data(), kk, cin, 1, kk),
                View::new(&x[y0 * g.out_w..], cin, np, p_in, 1),
                T::zero(),
                &mut col,
                np,
                1,
            );
            col2im_add(&col, &g, y0, y1, &mut out[n * out_len..(n + 1) * out_len]);
        }
    }
    if let Some(b) = bias {
        add_bias(&mut out, b.data(), g.height * g.width);
    }
    Tensor::from_vec(out_shape, out)
}

/// Gradients of [`deconv2d`] with respect to its input and weight.
pub fn deconv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    gout: &Tensor<T>,
    stride: usize,
    pad: usize,
    want_input: bool,
    want_weight: bool,
) -> Result<(Option<Tensor<T>>, Option<Tensor<T>>)> {
    let (xs, ws) = (input.shape(), weight.shape());
    let g = deconv2d_geometry(xs, ws, stride, pad)?;
    let cin = ws.n;
    let kk = g.col_rows();
    let p_in = xs.plane();
    let out_len = ws.c * g.height * g.width;
    if gout.shape() != Shape::new(xs.n, ws.c, g.height, g.width) {
        return Err(Error::shape("deconv2d_backward", alloc::format!("gradient {}", gout.shape())));
    }
    let mut gx = want_input.then(|| vec![T::zero(); xs.numel()]);
    let mut gw = want_weight.then(|| vec![T::zero(); ws.numel()]);
    let mut col = Vec::new();
    for n in 0..xs.n {
        let gy = &gout.data()[n * out_len..(n + 1) * out_len];
        for (y0, y1) in g.bands() {
            let np = (y1 - y0) * g.out_w;
            col.resize(kk * np, T::zero());
            im2col(gy, &g, y0, y1, &mut col);
            if let Some(gx) = gx.as_mut() {
                gemm(
                    View::new(weight.data(), cin, kk, kk, 1),
                    View::new(&col, kk, np, np, 1),
                    T::zero(),
                    &mut gx[n * cin * p_in + y0 * g.out_w..],
                    p_in,
                    1,
                );
            }
            if let Some(gw) = gw.as_mut() {
                let x = &input.data()[n * cin * p_in..(n + 1) * cin * p_in];
                gemm(
                    View::new(&x[y0 * g.out_w..], cin, np, p_in, 1),
                    View::new(&col, np, kk, 1, np),
                    T::one(),
                    gw,
                    kk,
                    1,
                );
            }
        }
    }
    Ok((
        gx.map(|d| Tensor::from_vec(xs, d).expect("input shape")),
        gw.map(|d| Tensor::from_vec(ws, d).expect("weight shape")),
    ))
}
