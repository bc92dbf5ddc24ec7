//! Direct nested-loop convolution and transposed convolution, compared
//! against the optimized kernels on random geometries.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use relight_core::{fft, kernels};
use relight_core::{Shape, Tensor};

const KERNELS: [usize; 6] = [1, 3, 4, 7, 8, 25];
const STRIDES: [usize; 4] = [1, 2, 4, 8];
const CONFIGS: usize = 200;
const ABS_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug)]
struct Geom {
    n: usize,
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    k: usize,
    s: usize,
    p: usize,
}

fn at(t: &Tensor<f64>, n: usize, c: usize, y: usize, x: usize) -> f64 {
    t.at(n, c, y, x)
}

fn idx(s: Shape, n: usize, c: usize, y: usize, x: usize) -> usize {
    ((n * s.c + c) * s.h + y) * s.w + x
}

/// Input position of output `o` and tap `u`, if inside the image.
fn tap(o: usize, u: usize, s: usize, p: usize, len: usize) -> Option<usize> {
    let v = (o * s + u) as isize - p as isize;
    (v >= 0 && (v as usize) < len).then_some(v as usize)
}

fn conv_out(g: &Geom) -> (usize, usize) {
    ((g.h + 2 * g.p - g.k) / g.s + 1, (g.w + 2 * g.p - g.k) / g.s + 1)
}

/// `y[n,o,i,j] = b[o] + Σ x[n,c,i·s+u−p, j·s+v−p]·w[o,c,u,v]`.
fn conv_ref(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, g: &Geom) -> Tensor<f64> {
    let (oh, ow) = conv_out(g);
    let shape = Shape::new(g.n, g.cout, oh, ow);
    let mut y = Tensor::zeros(shape);
    for n in 0..g.n {
        for o in 0..g.cout {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = b.data()[o];
                    for c in 0..g.cin {
                        for u in 0..g.k {
                            for v in 0..g.k {
                                if let (Some(yy), Some(xx)) = (tap(i, u, g.s, g.p, g.h), tap(j, v, g.s, g.p, g.w)) {
                                    acc += at(x, n, c, yy, xx) * at(w, o, c, u, v);
                                }
                            }
                        }
                    }
                    y.data_mut()[idx(shape, n, o, i, j)] = acc;
                }
            }
        }
    }
    y
}

/// Gradients of the direct convolution for an upstream gradient `gy`.
fn conv_grad_ref(x: &Tensor<f64>, w: &Tensor<f64>, gy: &Tensor<f64>, g: &Geom) -> (Tensor<f64>, Tensor<f64>) {
    let (oh, ow) = conv_out(g);
    let mut gx = Tensor::zeros(x.shape());
    let mut gw = Tensor::zeros(w.shape());
    for n in 0..g.n {
        for o in 0..g.cout {
            for i in 0..oh {
                for j in 0..ow {
                    let d = at(gy, n, o, i, j);
                    for c in 0..g.cin {
                        for u in 0..g.k {
                            for v in 0..g.k {
                                if let (Some(yy), Some(xx)) = (tap(i, u, g.s, g.p, g.h), tap(j, v, g.s, g.p, g.w)) {
                                    gx.data_mut()[idx(x.shape(), n, c, yy, xx)] += d * at(w, o, c, u, v);
                                    gw.data_mut()[idx(w.shape(), o, c, u, v)] += d * at(x, n, c, yy, xx);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (gx, gw)
}

fn deconv_out(g: &Geom) -> (usize, usize) {
    ((g.h - 1) * g.s + g.k - 2 * g.p, (g.w - 1) * g.s + g.k - 2 * g.p)
}

/// Scatter form: every input pixel adds `x·w[c,o,u,v]` at `i·s+u−p`.
fn deconv_ref(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, g: &Geom) -> Tensor<f64> {
    let (oh, ow) = deconv_out(g);
    let shape = Shape::new(g.n, g.cout, oh, ow);
    let mut y = Tensor::zeros(shape);
    for n in 0..g.n {
        for o in 0..g.cout {
            for yy in 0..oh {
                for xx in 0..ow {
                    y.data_mut()[idx(shape, n, o, yy, xx)] = b.data()[o];
                }
            }
        }
        for c in 0..g.cin {
            for i in 0..g.h {
                for j in 0..g.w {
                    for o in 0..g.cout {
                        for u in 0..g.k {
                            for v in 0..g.k {
                                if let (Some(yy), Some(xx)) = (tap(i, u, g.s, g.p, oh), tap(j, v, g.s, g.p, ow)) {
                                    y.data_mut()[idx(shape, n, o, yy, xx)] += at(x, n, c, i, j) * at(w, c, o, u, v);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    y
}

fn deconv_grad_ref(x: &Tensor<f64>, w: &Tensor<f64>, gy: &Tensor<f64>, g: &Geom) -> (Tensor<f64>, Tensor<f64>) {
    let (oh, ow) = deconv_out(g);
    let mut gx = Tensor::zeros(x.shape());
    let mut gw = Tensor::zeros(w.shape());
    for n in 0..g.n {
        for c in 0..g.cin {
            for i in 0..g.h {
                for j in 0..g.w {
                    for o in 0..g.cout {
                        for u in 0..g.k {
                            for v in 0..g.k {
                                if let (Some(yy), Some(xx)) = (tap(i, u, g.s, g.p, oh), tap(j, v, g.s, g.p, ow)) {
                                    let d = at(gy, n, o, yy, xx);
                                    gx.data_mut()[idx(x.shape(), n, c, i, j)] += d * at(w, c, o, u, v);
                                    gw.data_mut()[idx(w.shape(), c, o, u, v)] += d * at(x, n, c, i, j);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (gx, gw)
}

fn rand_tensor(rng: &mut ChaCha8Rng, s: Shape) -> Tensor<f64> {
    Tensor::rand_uniform(s, -1.0, 1.0, rng)
}

/// Random geometry valid for a convolution. Every fifth config is a
/// stride-1 square one with the largest kernel, so the frequency-domain
/// path is exercised on large kernels as well as small ones.
fn random_conv_geom(rng: &mut ChaCha8Rng, i: usize) -> Geom {
    let large = i % 5 == 0;
    let k = if large { 25 } else { KERNELS[rng.random_range(0..KERNELS.len())] };
    let s = if large { 1 } else { STRIDES[rng.random_range(0..STRIDES.len())] };
    let p = rng.random_range(0..k);
    let min = (k as isize - 2 * p as isize).max(1) as usize;
    let h = rng.random_range(min..min + 10);
    let w = if large { h } else { rng.random_range(min..min + 10) };
    Geom {
        n: rng.random_range(1..=2),
        cin: rng.random_range(1..=3),
        cout: rng.random_range(1..=3),
        h,
        w,
        k,
        s,
        p,
    }
}

fn random_deconv_geom(rng: &mut ChaCha8Rng) -> Geom {
    let k = KERNELS[rng.random_range(0..KERNELS.len())];
    let s = STRIDES[rng.random_range(0..STRIDES.len())];
    Geom {
        n: rng.random_range(1..=2),
        cin: rng.random_range(1..=3),
        cout: rng.random_range(1..=3),
        h: rng.random_range(1..=6),
        w: rng.random_range(1..=6),
        k,
        s,
        p: rng.random_range(0..=(k - 1) / 2),
    }
}

fn assert_close(what: &str, g: &Geom, got: &Tensor<f64>, want: &Tensor<f64>) {
    assert_eq!(got.shape(), want.shape(), "{what} shape for {g:?}");
    let d = got.max_abs_diff(want);
    assert!(d <= ABS_TOL, "{what} off by {d:e} for {g:?}");
}

pub fn conv_matches_direct_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for i in 0..CONFIGS {
        let g = random_conv_geom(&mut rng, i);
        let x = rand_tensor(&mut rng, Shape::new(g.n, g.cin, g.h, g.w));
        let w = rand_tensor(&mut rng, Shape::new(g.cout, g.cin, g.k, g.k));
        let b = rand_tensor(&mut rng, Shape::new(1, g.cout, 1, 1));
        let want = conv_ref(&x, &w, &b, &g);
        assert_close("conv2d", &g, &kernels::conv2d(&x, &w, Some(&b), g.s, g.p).unwrap(), &want);
        assert_close("conv2d_gemm", &g, &kernels::conv2d_gemm(&x, &w, Some(&b), g.s, g.p).unwrap(), &want);

        let gy = rand_tensor(&mut rng, want.shape());
        let (gx_want, gw_want) = conv_grad_ref(&x, &w, &gy, &g);
        let (gx, gw) = kernels::conv2d_backward(&x, &w, &gy, g.s, g.p, true, true).unwrap();
        assert_close("conv2d input grad", &g, &gx.unwrap(), &gx_want);
        assert_close("conv2d weight grad", &g, &gw.unwrap(), &gw_want);
        let (gx, gw) = kernels::conv2d_backward_gemm(&x, &w, &gy, g.s, g.p, true, true).unwrap();
        assert_close("conv2d_gemm input grad", &g, &gx.unwrap(), &gx_want);
        assert_close("conv2d_gemm weight grad", &g, &gw.unwrap(), &gw_want);
        check_frequency_path(&g, &x, &w, &b, &want, &gy, &gx_want, &gw_want);
    }
}

/// The frequency-domain kernels against the loops, on every geometry they
/// accept, whether or not the dispatcher would pick them.
#[allow(clippy::too_many_arguments)]
fn check_frequency_path(
    g: &Geom,
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    b: &Tensor<f64>,
    want: &Tensor<f64>,
    gy: &Tensor<f64>,
    gx_want: &Tensor<f64>,
    gw_want: &Tensor<f64>,
) {
    let geom = kernels::conv2d_geometry(x.shape(), w.shape(), g.s, g.p).unwrap();
    if !fft::supports(&geom) {
        return;
    }
    let mut y = fft::conv2d(x, w, &geom);
    let s = y.shape();
    for (i, v) in y.data_mut().iter_mut().enumerate() {
        *v += b.data()[(i / s.plane()) % s.c];
    }
    assert_close("fft conv2d", g, &y, want);
    let (gx, gw) = fft::conv2d_backward(x, w, gy, &geom, true, true);
    assert_close("fft input grad", g, &gx.unwrap(), gx_want);
    assert_close("fft weight grad", g, &gw.unwrap(), gw_want);
}

pub fn deconv_matches_direct_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(4202);
    for _ in 0..CONFIGS {
        let g = random_deconv_geom(&mut rng);
        let x = rand_tensor(&mut rng, Shape::new(g.n, g.cin, g.h, g.w));
        let w = rand_tensor(&mut rng, Shape::new(g.cin, g.cout, g.k, g.k));
        let b = rand_tensor(&mut rng, Shape::new(1, g.cout, 1, 1));
        let want = deconv_ref(&x, &w, &b, &g);
        assert_close("deconv2d", &g, &kernels::deconv2d(&x, &w, Some(&b), g.s, g.p).unwrap(), &want);

        let gy = rand_tensor(&mut rng, want.shape());
        let (gx_want, gw_want) = deconv_grad_ref(&x, &w, &gy, &g);
        let (gx, gw) = kernels::deconv2d_backward(&x, &w, &gy, g.s, g.p, true, true).unwrap();
        assert_close("deconv2d input grad", &g, &gx.unwrap(), &gx_want);
        assert_close("deconv2d weight grad", &g, &gw.unwrap(), &gw_want);
    }
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// `<conv(x), y> = <x, deconv(y)>` when both share the weight and the
/// deconvolution restores the convolution's input size exactly.
pub fn transposed_convolution_is_the_adjoint() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for i in 0..CONFIGS {
        let mut g = random_conv_geom(&mut rng, i);
        g.p = rng.random_range(0..=(g.k - 1) / 2);
        let (oh, ow) = (rng.random_range(1..=5), rng.random_range(1..=5));
        g.h = (oh - 1) * g.s + g.k - 2 * g.p;
        g.w = if i % 5 == 0 { g.h } else { (ow - 1) * g.s + g.k - 2 * g.p };
        let x = rand_tensor(&mut rng, Shape::new(g.n, g.cin, g.h, g.w));
        let w = rand_tensor(&mut rng, Shape::new(g.cout, g.cin, g.k, g.k));
        let cx = kernels::conv2d(&x, &w, None, g.s, g.p).unwrap();
        let y = rand_tensor(&mut rng, cx.shape());
        let dy = kernels::deconv2d(&y, &w, None, g.s, g.p).unwrap();
        assert_eq!(dy.shape(), x.shape(), "{g:?}");
        let (lhs, rhs) = (dot(&cx, &y), dot(&x, &dy));
        let rel = (lhs - rhs).abs() / lhs.abs().max(rhs.abs()).max(1e-12);
        assert!(rel < 1e-5, "adjoint mismatch {lhs} vs {rhs} for {g:?}");
    }
}

/// Every case above, in order.
pub const CASES: &[(&str, fn())] = &[
    ("conv_matches_direct_loops", conv_matches_direct_loops),
    ("deconv_matches_direct_loops", deconv_matches_direct_loops),
    ("transposed_convolution_is_the_adjoint", transposed_convolution_is_the_adjoint),
];
