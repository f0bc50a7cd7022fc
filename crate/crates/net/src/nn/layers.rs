//! Numeric kernels for individual layers, forward and transposed.

use lwe_core::{Image, Scalar};
use rayon::prelude::*;

use super::graph::Activation;

/// Scalars with a matrix-multiply kernel.
pub trait Float: Scalar {
    /// `C = A B + beta C` for an `m x k` by `k x n` product with explicit
    /// row/column strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        rsa: usize,
        csa: usize,
        b: &[Self],
        rsb: usize,
        csb: usize,
        beta: Self,
        c: &mut [Self],
        rsc: usize,
        csc: usize,
    );
}

fn span(rows: usize, cols: usize, rs: usize, cs: usize) -> usize {
    if rows == 0 || cols == 0 {
        0
    } else {
        (rows - 1) * rs + (cols - 1) * cs + 1
    }
}

macro_rules! impl_float {
    ($t:ty, $f:path) => {
        impl Float for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                rsa: usize,
                csa: usize,
                b: &[Self],
                rsb: usize,
                csb: usize,
                beta: Self,
                c: &mut [Self],
                rsc: usize,
                csc: usize,
            ) {
                assert!(span(m, k, rsa, csa) <= a.len(), "gemm: A out of bounds");
                assert!(span(k, n, rsb, csb) <= b.len(), "gemm: B out of bounds");
                assert!(span(m, n, rsc, csc) <= c.len(), "gemm: C out of bounds");
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: the asserts above bound every index the kernel touches.
                unsafe {
                    $f(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa as isize,
                        csa as isize,
                        b.as_ptr(),
                        rsb as isize,
                        csb as isize,
                        beta,
                        c.as_mut_ptr(),
                        rsc as isize,
                        csc as isize,
                    )
                }
            }
        }
    };
}

impl_float!(f32, matrixmultiply::sgemm);
impl_float!(f64, matrixmultiply::dgemm);

/// Output pixels processed per im2col tile.
const TILE_PIXELS: usize = 4096;

#[derive(Clone, Copy, Debug)]
pub struct ConvGeom {
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        self.h.div_ceil(self.stride)
    }

    pub fn out_w(&self) -> usize {
        self.w.div_ceil(self.stride)
    }

    fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.cin
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1
    }

    fn tile_rows(&self) -> usize {
        (TILE_PIXELS / self.out_w()).max(1)
    }

    // patch rows for output rows [r0, r1) laid out (pixel, ky, kx, cin)
    fn im2col<T: Float>(&self, x: &[T], r0: usize, r1: usize, cols: &mut Vec<T>) {
        let (ow, k, cin) = (self.out_w(), self.kernel, self.cin);
        let pad = (k / 2) as isize;
        cols.clear();
        cols.reserve((r1 - r0) * ow * self.patch_len());
        for oy in r0..r1 {
            for ox in 0..ow {
                for ky in 0..k {
                    let sy = ((oy * self.stride) as isize + ky as isize - pad).clamp(0, self.h as isize - 1) as usize;
                    for kx in 0..k {
                        let sx =
                            ((ox * self.stride) as isize + kx as isize - pad).clamp(0, self.w as isize - 1) as usize;
                        let at = (sy * self.w + sx) * cin;
                        cols.extend_from_slice(&x[at..at + cin]);
                    }
                }
            }
        }
    }

    // transpose of im2col: scatter-add patch gradients back onto the input
    fn col2im<T: Float>(&self, dcols: &[T], r0: usize, r1: usize, dx: &mut [T]) {
        let (ow, k, cin) = (self.out_w(), self.kernel, self.cin);
        let pad = (k / 2) as isize;
        let mut p = 0;
        for oy in r0..r1 {
            for ox in 0..ow {
                for ky in 0..k {
                    let sy = ((oy * self.stride) as isize + ky as isize - pad).clamp(0, self.h as isize - 1) as usize;
                    for kx in 0..k {
                        let sx =
                            ((ox * self.stride) as isize + kx as isize - pad).clamp(0, self.w as isize - 1) as usize;
                        let at = (sy * self.w + sx) * cin;
                        for (d, g) in dx[at..at + cin].iter_mut().zip(&dcols[p..p + cin]) {
                            *d = *d + *g;
                        }
                        p += cin;
                    }
                }
            }
        }
    }
}

// Direct convolution with the output channel count fixed at compile time,
// so the per-pixel accumulator lives in registers. Rows run in parallel;
// each row is computed independently, so the result does not depend on
// the thread count.
fn conv_direct<T: Float, const CO: usize>(g: &ConvGeom, x: &[T], kernel: &[T], bias: &[T]) -> Vec<T> {
    let (oh, ow, cin, k, s) = (g.out_h(), g.out_w(), g.cin, g.kernel, g.stride);
    let pad = (k / 2) as isize;
    let clamp = |v: usize, t: usize, n: usize| (v as isize + t as isize - pad).clamp(0, n as isize - 1) as usize;
    let col_at: Vec<usize> = (0..ow)
        .flat_map(|ox| (0..k).map(move |kx| clamp(ox * s, kx, g.w) * cin))
        .collect();
    let mut b = [T::zero(); CO];
    b.copy_from_slice(bias);
    let mut out = vec![T::zero(); oh * ow * CO];
    out.par_chunks_mut(ow * CO).enumerate().for_each(|(oy, orow)| {
        for (ox, o) in orow.chunks_exact_mut(CO).enumerate() {
            let mut acc = b;
            for ky in 0..k {
                let row = &x[clamp(oy * s, ky, g.h) * g.w * cin..];
                for kx in 0..k {
                    let src = &row[col_at[ox * k + kx]..][..cin];
                    let taps = &kernel[(ky * k + kx) * cin * CO..][..cin * CO];
                    for (&v, kr) in src.iter().zip(taps.chunks_exact(CO)) {
                        let kr: &[T; CO] = kr.try_into().expect("chunk of CO");
                        for co in 0..CO {
                            acc[co] = acc[co] + v * kr[co];
                        }
                    }
                }
            }
            o.copy_from_slice(&acc);
        }
    });
    out
}

// Stride-1 convolution on a channel-planar copy of the input whose rows
// carry a clamped border, so every tap is a contiguous row saxpy the
// compiler can vectorize. Output rows run in parallel and independently.
fn conv_planar<T: Float>(g: &ConvGeom, x: &[T], kernel: &[T], bias: &[T]) -> Vec<T> {
    let (h, w, cin, cout, k) = (g.h, g.w, g.cin, g.cout, g.kernel);
    let pad = k / 2;
    let pw = w + 2 * pad;
    let mut planes = vec![T::zero(); cin * h * pw];
    for y in 0..h {
        for px in 0..pw {
            let sx = px.saturating_sub(pad).min(w - 1);
            let src = &x[(y * w + sx) * cin..][..cin];
            for (ci, &v) in src.iter().enumerate() {
                planes[(ci * h + y) * pw + px] = v;
            }
        }
    }
    let mut out = vec![T::zero(); h * w * cout];
    out.par_chunks_mut(w * cout).enumerate().for_each(|(oy, orow)| {
        let mut acc = vec![T::zero(); cout * w];
        for (co, a) in acc.chunks_exact_mut(w).enumerate() {
            a.fill(bias[co]);
        }
        for ky in 0..k {
            let sy = (oy + ky).saturating_sub(pad).min(h - 1);
            for ci in 0..cin {
                let src = &planes[(ci * h + sy) * pw..][..pw];
                for kx in 0..k {
                    let s = &src[kx..kx + w];
                    let taps = &kernel[((ky * k + kx) * cin + ci) * cout..][..cout];
                    for (a, &kv) in acc.chunks_exact_mut(w).zip(taps) {
                        for (o, &v) in a.iter_mut().zip(s) {
                            *o = *o + kv * v;
                        }
                    }
                }
            }
        }
        for (ox, o) in orow.chunks_exact_mut(cout).enumerate() {
            for (co, v) in o.iter_mut().enumerate() {
                *v = acc[co * w + ox];
            }
        }
    });
    out
}

/// Kernel laid out `(kh, kw, cin, cout)`, i.e. a row-major
/// `(kh*kw*cin) x cout` matrix.
pub fn conv_forward<T: Float>(g: &ConvGeom, x: &[T], kernel: &[T], bias: &[T]) -> Vec<T> {
    let (oh, ow, cout) = (g.out_h(), g.out_w(), g.cout);
    let kl = g.patch_len();
    if g.stride == 1 && g.kernel > 1 {
        return conv_planar(g, x, kernel, bias);
    }
    if !g.is_pointwise() {
        match cout {
            1 => return conv_direct::<T, 1>(g, x, kernel, bias),
            3 => return conv_direct::<T, 3>(g, x, kernel, bias),
            4 => return conv_direct::<T, 4>(g, x, kernel, bias),
            6 => return conv_direct::<T, 6>(g, x, kernel, bias),
            8 => return conv_direct::<T, 8>(g, x, kernel, bias),
            _ => {}
        }
    }
    let mut out = Vec::with_capacity(oh * ow * cout);
    for _ in 0..oh * ow {
        out.extend_from_slice(bias);
    }
    if g.is_pointwise() {
        T::gemm(oh * ow, kl, cout, x, kl, 1, kernel, cout, 1, T::one(), &mut out, cout, 1);
        return out;
    }
    let mut cols = Vec::new();
    let rows = g.tile_rows();
    let mut r0 = 0;
    while r0 < oh {
        let r1 = (r0 + rows).min(oh);
        g.im2col(x, r0, r1, &mut cols);
        let px = (r1 - r0) * ow;
        let c = &mut out[r0 * ow * cout..r1 * ow * cout];
        T::gemm(px, kl, cout, &cols, kl, 1, kernel, cout, 1, T::one(), c, cout, 1);
        r0 = r1;
    }
    out
}

/// Accumulates kernel and bias gradients into `dk`/`db` and returns the
/// input gradient.
pub fn conv_backward<T: Float>(g: &ConvGeom, x: &[T], kernel: &[T], dy: &[T], dk: &mut [T], db: &mut [T]) -> Vec<T> {
    let (oh, ow, cout) = (g.out_h(), g.out_w(), g.cout);
    let kl = g.patch_len();
    for px in dy.chunks_exact(cout) {
        for (b, v) in db.iter_mut().zip(px) {
            *b = *b + *v;
        }
    }
    let mut dx = vec![T::zero(); g.h * g.w * g.cin];
    if g.is_pointwise() {
        let p = oh * ow;
        T::gemm(kl, p, cout, x, 1, kl, dy, cout, 1, T::one(), dk, cout, 1);
        T::gemm(p, cout, kl, dy, cout, 1, kernel, 1, cout, T::zero(), &mut dx, kl, 1);
        return dx;
    }
    let mut cols = Vec::new();
    let mut dcols = Vec::new();
    let rows = g.tile_rows();
    let mut r0 = 0;
    while r0 < oh {
        let r1 = (r0 + rows).min(oh);
        let px = (r1 - r0) * ow;
        g.im2col(x, r0, r1, &mut cols);
        let gy = &dy[r0 * ow * cout..r1 * ow * cout];
        T::gemm(kl, px, cout, &cols, 1, kl, gy, cout, 1, T::one(), dk, cout, 1);
        dcols.clear();
        dcols.resize(px * kl, T::zero());
        T::gemm(px, cout, kl, gy, cout, 1, kernel, 1, cout, T::zero(), &mut dcols, kl, 1);
        g.col2im(&dcols, r0, r1, &mut dx);
        r0 = r1;
    }
    dx
}

pub fn activation_forward<T: Float>(a: Activation, x: &Image<T>) -> Image<T> {
    match a {
        Activation::Relu => x.map(|v| v.max(T::zero())),
        Activation::Sigmoid => x.map(|v| T::one() / (T::one() + (-v).exp())),
        Activation::Tanh => x.map(|v| v.tanh()),
        Activation::Softmax => {
            let c = x.channels();
            let mut out = x.clone();
            for px in out.data_mut().chunks_exact_mut(c) {
                let m = px.iter().copied().fold(T::neg_infinity(), T::max);
                let mut s = T::zero();
                for v in px.iter_mut() {
                    *v = (*v - m).exp();
                    s = s + *v;
                }
                for v in px.iter_mut() {
                    *v = *v / s;
                }
            }
            out
        }
    }
}

/// Input gradient from the activation's output `y` and output gradient `dy`.
pub fn activation_backward<T: Float>(a: Activation, y: &Image<T>, dy: &Image<T>) -> Image<T> {
    let one = T::one();
    let ew = |f: &dyn Fn(T, T) -> T| {
        let data = y.data().iter().zip(dy.data()).map(|(&y, &g)| f(y, g)).collect();
        Image::from_vec(y.height(), y.width(), y.channels(), data).expect("same shape")
    };
    match a {
        Activation::Relu => ew(&|y, g| if y > T::zero() { g } else { T::zero() }),
        Activation::Sigmoid => ew(&|y, g| g * y * (one - y)),
        Activation::Tanh => ew(&|y, g| g * (one - y * y)),
        Activation::Softmax => {
            let c = y.channels();
            let mut out = dy.clone();
            for (o, yp) in out.data_mut().chunks_exact_mut(c).zip(y.data().chunks_exact(c)) {
                let dot = o.iter().zip(yp).fold(T::zero(), |s, (g, y)| s + *g * *y);
                for (g, y) in o.iter_mut().zip(yp) {
                    *g = *y * (*g - dot);
                }
            }
            out
        }
    }
}

// source taps of half-pixel 2x bilinear upsampling along one axis
fn up_taps(o: usize, n: usize) -> [(usize, f64); 2] {
    let k = o / 2;
    let last = n - 1;
    if o % 2 == 0 {
        [(k.saturating_sub(1), 0.25), (k, 0.75)]
    } else {
        [(k, 0.75), ((k + 1).min(last), 0.25)]
    }
}

pub fn upsample2x_forward<T: Float>(x: &Image<T>) -> Image<T> {
    let (h, w, c) = x.shape();
    let mut out = Image::zeros(2 * h, 2 * w, c);
    let yt: Vec<_> = (0..2 * h).map(|o| up_taps(o, h)).collect();
    let xt: Vec<_> = (0..2 * w).map(|o| up_taps(o, w)).collect();
    let src = x.data();
    let dst = out.data_mut();
    for (oy, ty) in yt.iter().enumerate() {
        for (ox, tx) in xt.iter().enumerate() {
            let o = (oy * 2 * w + ox) * c;
            for &(sy, wy) in ty {
                for &(sx, wx) in tx {
                    let wgt = T::of_f64(wy * wx);
                    let s = (sy * w + sx) * c;
                    for ch in 0..c {
                        dst[o + ch] = dst[o + ch] + wgt * src[s + ch];
                    }
                }
            }
        }
    }
    out
}

pub fn upsample2x_backward<T: Float>(dy: &Image<T>) -> Image<T> {
    let (h2, w2, c) = dy.shape();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut out = Image::zeros(h, w, c);
    let g = dy.data();
    let dst = out.data_mut();
    for oy in 0..h2 {
        let ty = up_taps(oy, h);
        for ox in 0..w2 {
            let tx = up_taps(ox, w);
            let o = (oy * w2 + ox) * c;
            for &(sy, wy) in &ty {
                for &(sx, wx) in &tx {
                    let wgt = T::of_f64(wy * wx);
                    let s = (sy * w + sx) * c;
                    for ch in 0..c {
                        dst[s + ch] = dst[s + ch] + wgt * g[o + ch];
                    }
                }
            }
        }
    }
    out
}

pub fn avgpool2x_forward<T: Float>(x: &Image<T>) -> Image<T> {
    let (h, w, c) = x.shape();
    let q = T::of_f64(0.25);
    Image::from_fn(h / 2, w / 2, c, |y, xx, ch| {
        (x.get(2 * y, 2 * xx, ch) + x.get(2 * y, 2 * xx + 1, ch) + x.get(2 * y + 1, 2 * xx, ch)
            + x.get(2 * y + 1, 2 * xx + 1, ch))
            * q
    })
}

pub fn avgpool2x_backward<T: Float>(dy: &Image<T>) -> Image<T> {
    let (h, w, c) = dy.shape();
    let q = T::of_f64(0.25);
    Image::from_fn(2 * h, 2 * w, c, |y, x, ch| dy.get(y / 2, x / 2, ch) * q)
}
