//! Frequency-domain evaluation of stride-1 convolutions, used where it is
//! cheaper than the unfolded GEMM: large kernels, or few output channels.
//!
//! All planes are embedded in an `N x N` grid with `N` large enough that
//! circular correlation never wraps onto valid samples, then transformed in
//! `f64`. Spectra are kept in transposed layout, which is harmless because
//! they are only ever multiplied elementwise.

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;
use std::vec;
use std::vec::Vec;

use realfft::num_complex::Complex64;
use realfft::{ComplexToReal, RealFftPlanner, RealToComplex};
use rustfft::{Fft, FftPlanner};

use crate::kernels::ConvGeometry;
use crate::tensor::{Scalar, Shape, Tensor};

/// Geometries this path can evaluate: stride 1 on square inputs.
pub fn supports(g: &ConvGeometry) -> bool {
    g.stride == 1 && g.height == g.width
}

/// Whether this path is expected to beat `im2col` + GEMM for a batch of
/// `batch` images producing `c_out` channels.
///
/// Both estimates are nanoseconds for one forward plus one backward pass
/// on a single core. The unfolded GEMM pays for every kernel tap of every
/// input channel, plus memory traffic that dominates when `c_out` is
/// small. The transform pays per plane, with one transform per weight
/// plane in each direction.
pub fn preferred(g: &ConvGeometry, c_out: usize, batch: usize) -> bool {
    if !supports(g) {
        return false;
    }
    let (cin, cout, b) = (g.channels as f64, c_out as f64, batch as f64);
    let k2 = (g.kernel * g.kernel) as f64;
    let gemm = 0.12 * b * g.out_plane() as f64 * k2 * cin * (cout + 23.0);
    let n = grid_side(g) as f64;
    let per_transform = 1.5 * n * n * n.log2();
    let transforms = 3.0 * cin * cout + b * (3.0 * cin + 2.0 * cout);
    let products = 6.0 * b * cin * cout * n * (n / 2.0 + 1.0);
    per_transform * transforms + products < gemm
}

fn grid_side(g: &ConvGeometry) -> usize {
    smooth_size((g.height + g.pad).max(g.out_h))
}

/// Smallest even `n >= min` whose only prime factors are 2, 3 and 5.
fn smooth_size(min: usize) -> usize {
    (min.max(2)..)
        .find(|&n| {
            let mut m = n;
            for p in [2, 3, 5] {
                while m % p == 0 {
                    m /= p;
                }
            }
            m == 1 && n % 2 == 0
        })
        .expect("unbounded search")
}

#[derive(Clone)]
struct Plans {
    r2c: Arc<dyn RealToComplex<f64>>,
    c2r: Arc<dyn ComplexToReal<f64>>,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

std::thread_local! {
    /// Planning costs more than a small convolution, so plans are kept
    /// per transform length.
    static PLANS: RefCell<HashMap<usize, Plans>> = RefCell::new(HashMap::new());
}

fn plans(n: usize) -> Plans {
    PLANS.with(|cache| {
        cache
            .borrow_mut()
            .entry(n)
            .or_insert_with(|| {
                let mut real = RealFftPlanner::<f64>::new();
                let mut planner = FftPlanner::new();
                Plans {
                    r2c: real.plan_fft_forward(n),
                    c2r: real.plan_fft_inverse(n),
                    fwd: planner.plan_fft_forward(n),
                    inv: planner.plan_fft_inverse(n),
                }
            })
            .clone()
    })
}

/// Real 2-D transforms on an `n x n` grid. A spectrum holds `n/2 + 1`
/// rows (one per non-negative column frequency) of `n` entries.
struct Grid {
    n: usize,
    half: usize,
    r2c: Arc<dyn RealToComplex<f64>>,
    c2r: Arc<dyn ComplexToReal<f64>>,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
    real_scratch: Vec<Complex64>,
    scratch: Vec<Complex64>,
    row: Vec<f64>,
    rows: Vec<Complex64>,
    /// Natural-layout output of the last [`invert`](Self::invert).
    plane: Vec<f64>,
}

impl Grid {
    fn new(g: &ConvGeometry) -> Self {
        let n = grid_side(g);
        let half = n / 2 + 1;
        let Plans { r2c, c2r, fwd, inv } = plans(n);
        let real_len = r2c.get_scratch_len().max(c2r.get_scratch_len());
        let len = fwd.get_inplace_scratch_len().max(inv.get_inplace_scratch_len());
        Grid {
            n,
            half,
            r2c,
            c2r,
            fwd,
            inv,
            real_scratch: vec![Complex64::default(); real_len],
            scratch: vec![Complex64::default(); len],
            row: vec![0.0; n],
            rows: vec![Complex64::default(); n * half],
            plane: vec![0.0; n * n],
        }
    }

    fn area(&self) -> usize {
        self.n * self.half
    }

    fn wrap(&self, i: usize, shift: isize) -> usize {
        (i as isize + shift).rem_euclid(self.n as isize) as usize
    }

    /// Spectrum of a `side x side` real plane whose sample `(r, c)` sits at
    /// grid position `((r + shift) mod n, (c + shift) mod n)`.
    fn spectrum<T: Scalar>(&mut self, plane: &[T], side: usize, shift: isize, out: &mut [Complex64]) {
        let (n, half) = (self.n, self.half);
        self.rows.fill(Complex64::default());
        for r in 0..side {
            self.row.fill(0.0);
            for c in 0..side {
                let dst = self.wrap(c, shift);
                self.row[dst] = plane[r * side + c].as_f64();
            }
            let dst = self.wrap(r, shift) * half;
            self.r2c
                .process_with_scratch(&mut self.row, &mut self.rows[dst..dst + half], &mut self.real_scratch)
                .expect("buffer sizes match the plan");
        }
        for r in 0..n {
            for c in 0..half {
                out[c * n + r] = self.rows[r * half + c];
            }
        }
        self.fwd.process_with_scratch(out, &mut self.scratch);
    }

    /// Inverts `spec` (clobbering it) into `self.plane`, unscaled, filling
    /// only grid rows `r + shift` for `r < side`.
    fn invert(&mut self, spec: &mut [Complex64], side: usize, shift: isize) {
        let (n, half) = (self.n, self.half);
        self.inv.process_with_scratch(spec, &mut self.scratch);
        for c in 0..half {
            for r in 0..n {
                self.rows[r * half + c] = spec[c * n + r];
            }
        }
        for i in 0..side {
            let r = self.wrap(i, shift);
            let row = &mut self.rows[r * half..(r + 1) * half];
            // Exactly real for a Hermitian spectrum; drop rounding residue.
            row[0].im = 0.0;
            row[half - 1].im = 0.0;
            self.c2r
                .process_with_scratch(row, &mut self.plane[r * n..(r + 1) * n], &mut self.real_scratch)
                .expect("buffer sizes match the plan");
        }
    }

    /// Reads the `side x side` window at `shift` from the last inversion,
    /// scaled by `1 / n^2`.
    fn read<T: Scalar>(&self, side: usize, shift: isize, out: &mut [T]) {
        let n = self.n;
        let scale = 1.0 / (n * n) as f64;
        for r in 0..side {
            let src = self.wrap(r, shift) * n;
            for c in 0..side {
                out[r * side + c] = T::from_f64(self.plane[src + self.wrap(c, shift)] * scale);
            }
        }
    }
}

fn spectra<T: Scalar>(grid: &mut Grid, data: &[T], count: usize, side: usize, shift: isize) -> Vec<Complex64> {
    let area = grid.area();
    let plane = side * side;
    let mut out = vec![Complex64::default(); count * area];
    for i in 0..count {
        grid.spectrum(&data[i * plane..(i + 1) * plane], side, shift, &mut out[i * area..(i + 1) * area]);
    }
    out
}

/// `acc += a * b` (or `a * conj(b)`).
fn mul_acc(acc: &mut [Complex64], a: &[Complex64], b: &[Complex64], conj_b: bool) {
    if conj_b {
        for ((z, x), y) in acc.iter_mut().zip(a).zip(b) {
            *z += x * y.conj();
        }
    } else {
        for ((z, x), y) in acc.iter_mut().zip(a).zip(b) {
            *z += x * y;
        }
    }
}

/// Forward convolution without bias.
pub fn conv2d<T: Scalar>(input: &Tensor<T>, weight: &Tensor<T>, g: &ConvGeometry) -> Tensor<T> {
    let (xs, ws) = (input.shape(), weight.shape());
    let (cin, cout, k) = (xs.c, ws.n, g.kernel);
    let mut grid = Grid::new(g);
    let area = grid.area();
    let wspec = spectra(&mut grid, weight.data(), cout * cin, k, 0);
    let out_shape = Shape::new(xs.n, cout, g.out_h, g.out_w);
    let oplane = g.out_plane();
    let mut out = vec![T::zero(); out_shape.numel()];
    let mut acc = vec![Complex64::default(); area];
    for b in 0..xs.n {
        let img = &input.data()[b * cin * xs.plane()..(b + 1) * cin * xs.plane()];
        let xspec = spectra(&mut grid, img, cin, g.height, 0);
        for o in 0..cout {
            acc.fill(Complex64::default());
            for c in 0..cin {
                let w = &wspec[(o * cin + c) * area..(o * cin + c + 1) * area];
                mul_acc(&mut acc, &xspec[c * area..(c + 1) * area], w, true);
            }
            let shift = -(g.pad as isize);
            grid.invert(&mut acc, g.out_h, shift);
            grid.read(g.out_h, shift, &mut out[(b * cout + o) * oplane..(b * cout + o + 1) * oplane]);
        }
    }
    Tensor::from_vec(out_shape, out).expect("output shape")
}

/// Input and weight gradients of [`conv2d`].
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    gout: &Tensor<T>,
    g: &ConvGeometry,
    want_input: bool,
    want_weight: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>) {
    let (xs, ws) = (input.shape(), weight.shape());
    let (cin, cout, k) = (xs.c, ws.n, g.kernel);
    let mut grid = Grid::new(g);
    let area = grid.area();
    let wspec = want_input.then(|| spectra(&mut grid, weight.data(), cout * cin, k, 0));
    let mut gx = want_input.then(|| vec![T::zero(); xs.numel()]);
    let mut gw_spec = want_weight.then(|| vec![Complex64::default(); cout * cin * area]);
    let mut acc = vec![Complex64::default(); area];
    let oplane = g.out_plane();
    for b in 0..xs.n {
        let go = &gout.data()[b * cout * oplane..(b + 1) * cout * oplane];
        let gspec = spectra(&mut grid, go, cout, g.out_h, -(g.pad as isize));
        if let (Some(gx), Some(wspec)) = (gx.as_mut(), wspec.as_ref()) {
            for c in 0..cin {
                acc.fill(Complex64::default());
                for o in 0..cout {
                    let w = &wspec[(o * cin + c) * area..(o * cin + c + 1) * area];
                    mul_acc(&mut acc, &gspec[o * area..(o + 1) * area], w, false);
                }
                let plane = xs.plane();
                grid.invert(&mut acc, g.height, 0);
                grid.read(g.height, 0, &mut gx[(b * cin + c) * plane..(b * cin + c + 1) * plane]);
            }
        }
        if let Some(gws) = gw_spec.as_mut() {
            let img = &input.data()[b * cin * xs.plane()..(b + 1) * cin * xs.plane()];
            let xspec = spectra(&mut grid, img, cin, g.height, 0);
            for o in 0..cout {
                for c in 0..cin {
                    let dst = &mut gws[(o * cin + c) * area..(o * cin + c + 1) * area];
                    mul_acc(dst, &xspec[c * area..(c + 1) * area], &gspec[o * area..(o + 1) * area], true);
                }
            }
        }
    }
    let gw = gw_spec.map(|mut spec| {
        let mut gw = vec![T::zero(); ws.numel()];
        for (i, chunk) in spec.chunks_mut(area).enumerate() {
            grid.invert(chunk, k, 0);
            grid.read(k, 0, &mut gw[i * k * k..(i + 1) * k * k]);
        }
        Tensor::from_vec(ws, gw).expect("weight shape")
    });
    (gx.map(|d| Tensor::from_vec(xs, d).expect("input shape")), gw)
}
