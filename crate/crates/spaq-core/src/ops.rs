//! Floating-point layer kernels, generic over f32/f64.
//!
//! Convolution is cross-correlation (no kernel flip), computed as im2col
//! followed by a GEMM. Everything here works on raw slices plus explicit
//! shapes; the executor in `engine` owns the Tensor plumbing. The f64
//! instantiation exists for gradient checking only.

use crate::error::{Error, Result};

/// Minimal float abstraction so kernels compile once for f32 and f64.
pub trait Real:
    Copy
    + PartialOrd
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
    + Send
    + Sync
    + 'static
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn tanh(self) -> Self;
    fn sqrt(self) -> Self;
    /// Row-major GEMM: c = alpha * a(m,k) * b(k,n) + beta * c(m,n).
    fn gemm(m: usize, k: usize, n: usize, alpha: Self, a: &[Self], b: &[Self], beta: Self, c: &mut [Self]);
}

impl Real for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        f64::from(self)
    }
    fn exp(self) -> Self {
        self.exp()
    }
    fn tanh(self) -> Self {
        self.tanh()
    }
    fn sqrt(self) -> Self {
        self.sqrt()
    }
    fn gemm(m: usize, k: usize, n: usize, alpha: Self, a: &[Self], b: &[Self], beta: Self, c: &mut [Self]) {
        debug_assert_eq!(a.len(), m * k);
        debug_assert_eq!(b.len(), k * n);
        debug_assert_eq!(c.len(), m * n);
        unsafe {
            matrixmultiply::sgemm(
                m, k, n, alpha,
                a.as_ptr(), k as isize, 1,
                b.as_ptr(), n as isize, 1,
                beta,
                c.as_mut_ptr(), n as isize, 1,
            );
        }
    }
}

impl Real for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn exp(self) -> Self {
        self.exp()
    }
    fn tanh(self) -> Self {
        self.tanh()
    }
    fn sqrt(self) -> Self {
        self.sqrt()
    }
    fn gemm(m: usize, k: usize, n: usize, alpha: Self, a: &[Self], b: &[Self], beta: Self, c: &mut [Self]) {
        debug_assert_eq!(a.len(), m * k);
        debug_assert_eq!(b.len(), k * n);
        debug_assert_eq!(c.len(), m * n);
        unsafe {
            matrixmultiply::dgemm(
                m, k, n, alpha,
                a.as_ptr(), k as isize, 1,
                b.as_ptr(), n as isize, 1,
                beta,
                c.as_mut_ptr(), n as isize, 1,
            );
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvShape {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub in_hw: (usize, usize),
    pub out_hw: (usize, usize),
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

impl ConvShape {
    pub fn col_rows(&self) -> usize {
        self.in_channels * self.kernel.0 * self.kernel.1
    }
    pub fn positions(&self) -> usize {
        self.out_hw.0 * self.out_hw.1
    }
}

/// Scatter one sample into a (Ci*Kh*Kw, Ho*Wo) patch matrix. Out-of-range
/// taps stay zero, which is exactly zero padding.
fn im2col<T: Real>(x: &[T], s: &ConvShape, col: &mut [T]) {
    let (h, w) = s.in_hw;
    let (ho, wo) = s.out_hw;
    let (kh, kw) = s.kernel;
    let (sh, sw) = s.stride;
    let (ph, pw) = s.padding;
    for v in col.iter_mut() {
        *v = T::ZERO;
    }
    for ci in 0..s.in_channels {
        let x_c = &x[ci * h * w..(ci + 1) * h * w];
        for dkh in 0..kh {
            for dkw in 0..kw {
                let row = (ci * kh + dkh) * kw + dkw;
                let out = &mut col[row * ho * wo..(row + 1) * ho * wo];
                for oh in 0..ho {
                    let ih = (oh * sh + dkh) as isize - ph as isize;
                    if ih < 0 || ih as usize >= h {
                        continue;
                    }
                    let src = &x_c[ih as usize * w..(ih as usize + 1) * w];
                    let dst = &mut out[oh * wo..(oh + 1) * wo];
                    for ow in 0..wo {
                        let iw = (ow * sw + dkw) as isize - pw as isize;
                        if iw >= 0 && (iw as usize) < w {
                            dst[ow] = src[iw as usize];
                        }
                    }
                }
            }
        }
    }
}

/// Transpose of `im2col`: accumulate patch-matrix gradients back into dx.
fn col2im_accumulate<T: Real>(col: &[T], s: &ConvShape, dx: &mut [T]) {
    let (h, w) = s.in_hw;
    let (ho, wo) = s.out_hw;
    let (kh, kw) = s.kernel;
    let (sh, sw) = s.stride;
    let (ph, pw) = s.padding;
    for ci in 0..s.in_channels {
        let dx_c = &mut dx[ci * h * w..(ci + 1) * h * w];
        for dkh in 0..kh {
            for dkw in 0..kw {
                let row = (ci * kh + dkh) * kw + dkw;
                let src_row = &col[row * ho * wo..(row + 1) * ho * wo];
                for oh in 0..ho {
                    let ih = (oh * sh + dkh) as isize - ph as isize;
                    if ih < 0 || ih as usize >= h {
                        continue;
                    }
                    let dst = &mut dx_c[ih as usize * w..(ih as usize + 1) * w];
                    let src = &src_row[oh * wo..(oh + 1) * wo];
                    for ow in 0..wo {
                        let iw = (ow * sw + dkw) as isize - pw as isize;
                        if iw >= 0 && (iw as usize) < w {
                            dst[iw as usize] += src[ow];
                        }
                    }
                }
            }
        }
    }
}

/// y[n] = weight(Co, Ci*Kh*Kw) @ col(x[n]) (+ bias).
pub fn conv2d_forward<T: Real>(
    x: &[T],
    w: &[T],
    bias: Option<&[T]>,
    s: &ConvShape,
) -> Vec<T> {
    let p = s.positions();
    let rows = s.col_rows();
    let mut y = vec![T::ZERO; s.batch * s.out_channels * p];
    let mut col = vec![T::ZERO; rows * p];
    let in_plane = s.in_channels * s.in_hw.0 * s.in_hw.1;
    for n in 0..s.batch {
        im2col(&x[n * in_plane..(n + 1) * in_plane], s, &mut col);
        let y_n = &mut y[n * s.out_channels * p..(n + 1) * s.out_channels * p];
        T::gemm(s.out_channels, rows, p, T::ONE, w, &col, T::ZERO, y_n);
        if let Some(b) = bias {
            for co in 0..s.out_channels {
                let add = b[co];
                for v in &mut y_n[co * p..(co + 1) * p] {
                    *v += add;
                }
            }
        }
    }
    y
}

pub struct ConvGrads<T> {
    pub dx: Vec<T>,
    pub dw: Vec<T>,
    pub db: Option<Vec<T>>,
}

pub fn conv2d_backward<T: Real>(
    dy: &[T],
    x: &[T],
    w: &[T],
    has_bias: bool,
    s: &ConvShape,
) -> ConvGrads<T> {
    let p = s.positions();
    let rows = s.col_rows();
    let in_plane = s.in_channels * s.in_hw.0 * s.in_hw.1;
    let mut dx = vec![T::ZERO; s.batch * in_plane];
    let mut dw = vec![T::ZERO; s.out_channels * rows];
    let mut db = if has_bias {
        Some(vec![T::ZERO; s.out_channels])
    } else {
        None
    };
    let mut col = vec![T::ZERO; rows * p];
    let mut dcol = vec![T::ZERO; rows * p];
    for n in 0..s.batch {
        let dy_n = &dy[n * s.out_channels * p..(n + 1) * s.out_channels * p];
        im2col(&x[n * in_plane..(n + 1) * in_plane], s, &mut col);
        // dW += dY (Co,P) @ col^T (P,rows); express with gemm by swapping strides:
        // we instead materialize col transposed once per sample.
        // Cheaper: dW[co,row] += sum_p dy[co,p]*col[row,p] == dY @ col^T.
        gemm_nt(s.out_channels, p, rows, dy_n, &col, &mut dw);
        // dcol = W^T (rows,Co) @ dY (Co,P)
        gemm_tn(rows, s.out_channels, p, w, dy_n, &mut dcol);
        col2im_accumulate(&dcol, s, &mut dx[n * in_plane..(n + 1) * in_plane]);
        if let Some(db) = db.as_mut() {
            for co in 0..s.out_channels {
                let mut acc = T::ZERO;
                for &v in &dy_n[co * p..(co + 1) * p] {
                    acc += v;
                }
                db[co] += acc;
            }
        }
    }
    ConvGrads { dx, dw, db }
}

/// c(m,n) += a(m,k) @ b(n,k)^T — row-major, b used transposed.
fn gemm_nt<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    unsafe {
        gemm_raw(
            m, k, n,
            a.as_ptr(), k as isize, 1,
            b.as_ptr(), 1, k as isize,
            c.as_mut_ptr(), n as isize, 1,
            T::ONE,
        );
    }
}

/// c(m,n) = a(k,m)^T @ b(k,n) — row-major, a used transposed, c overwritten.
fn gemm_tn<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    unsafe {
        gemm_raw(
            m, k, n,
            a.as_ptr(), 1, m as isize,
            b.as_ptr(), n as isize, 1,
            c.as_mut_ptr(), n as isize, 1,
            T::ZERO,
        );
    }
}

unsafe fn gemm_raw<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: *const T,
    rsa: isize,
    csa: isize,
    b: *const T,
    rsb: isize,
    csb: isize,
    c: *mut T,
    rsc: isize,
    csc: isize,
    beta: T,
) {
    // Dispatch through the two concrete monomorphizations.
    if std::any::TypeId::of::<T>() == std::any::TypeId::of::<f32>() {
        matrixmultiply::sgemm(
            m, k, n, 1.0,
            a as *const f32, rsa, csa,
            b as *const f32, rsb, csb,
            beta.to_f64() as f32,
            c as *mut f32, rsc, csc,
        );
    } else {
        matrixmultiply::dgemm(
            m, k, n, 1.0,
            a as *const f64, rsa, csa,
            b as *const f64, rsb, csb,
            beta.to_f64(),
            c as *mut f64, rsc, csc,
        );
    }
}

// ── InstanceNorm ────────────────────────────────────────────────────────────

/// Per-(sample, channel) normalization over H*W with affine, biased variance.
pub fn instance_norm_forward<T: Real>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    batch: usize,
    channels: usize,
    plane: usize,
    eps: f64,
) -> Result<Vec<T>> {
    if plane == 0 {
        return Err(Error::ShapeMismatch("instance norm over empty plane".into()));
    }
    let mut y = vec![T::ZERO; x.len()];
    let inv_m = T::from_f64(1.0 / plane as f64);
    let eps = T::from_f64(eps);
    for n in 0..batch {
        for c in 0..channels {
            let base = (n * channels + c) * plane;
            let xs = &x[base..base + plane];
            let mut mean = T::ZERO;
            for &v in xs {
                mean += v;
            }
            mean = mean * inv_m;
            let mut var = T::ZERO;
            for &v in xs {
                let d = v - mean;
                var += d * d;
            }
            var = var * inv_m;
            let inv_std = T::ONE / (var + eps).sqrt();
            let g = gamma[c];
            let b = beta[c];
            let ys = &mut y[base..base + plane];
            for (o, &v) in ys.iter_mut().zip(xs) {
                *o = (v - mean) * inv_std * g + b;
            }
        }
    }
    Ok(y)
}

pub struct NormGrads<T> {
    pub dx: Vec<T>,
    pub dgamma: Vec<T>,
    pub dbeta: Vec<T>,
}

pub fn instance_norm_backward<T: Real>(
    dy: &[T],
    x: &[T],
    gamma: &[T],
    batch: usize,
    channels: usize,
    plane: usize,
    eps: f64,
) -> NormGrads<T> {
    let mut dx = vec![T::ZERO; x.len()];
    let mut dgamma = vec![T::ZERO; channels];
    let mut dbeta = vec![T::ZERO; channels];
    let inv_m = T::from_f64(1.0 / plane as f64);
    let eps = T::from_f64(eps);
    for n in 0..batch {
        for c in 0..channels {
            let base = (n * channels + c) * plane;
            let xs = &x[base..base + plane];
            let dys = &dy[base..base + plane];
            let mut mean = T::ZERO;
            for &v in xs {
                mean += v;
            }
            mean = mean * inv_m;
            let mut var = T::ZERO;
            for &v in xs {
                let d = v - mean;
                var += d * d;
            }
            var = var * inv_m;
            let inv_std = T::ONE / (var + eps).sqrt();

            let mut sum_dy = T::ZERO;
            let mut sum_dy_xhat = T::ZERO;
            for (&g, &v) in dys.iter().zip(xs) {
                let xhat = (v - mean) * inv_std;
                sum_dy += g;
                sum_dy_xhat += g * xhat;
            }
            dgamma[c] += sum_dy_xhat;
            dbeta[c] += sum_dy;

            let mean_dy = sum_dy * inv_m;
            let mean_dy_xhat = sum_dy_xhat * inv_m;
            let scale = gamma[c] * inv_std;
            let dxs = &mut dx[base..base + plane];
            for ((o, &g), &v) in dxs.iter_mut().zip(dys).zip(xs) {
                let xhat = (v - mean) * inv_std;
                *o = scale * (g - mean_dy - xhat * mean_dy_xhat);
            }
        }
    }
    NormGrads { dx, dgamma, dbeta }
}

// ── Activations ─────────────────────────────────────────────────────────────

pub fn relu<T: Real>(x: &[T]) -> Vec<T> {
    x.iter()
        .map(|&v| if v > T::ZERO { v } else { T::ZERO })
        .collect()
}

pub fn sigmoid<T: Real>(x: &[T]) -> Vec<T> {
    // Branch on sign to avoid exp overflow for large negative inputs.
    x.iter()
        .map(|&v| {
            if v >= T::ZERO {
                T::ONE / (T::ONE + (-v).exp())
            } else {
                let e = v.exp();
                e / (T::ONE + e)
            }
        })
        .collect()
}

pub fn tanh<T: Real>(x: &[T]) -> Vec<T> {
    x.iter().map(|&v| v.tanh()).collect()
}

/// d/dx from the saved *output*: relu' = [y > 0].
pub fn relu_backward<T: Real>(dy: &[T], y: &[T]) -> Vec<T> {
    dy.iter()
        .zip(y)
        .map(|(&g, &o)| if o > T::ZERO { g } else { T::ZERO })
        .collect()
}

pub fn sigmoid_backward<T: Real>(dy: &[T], y: &[T]) -> Vec<T> {
    dy.iter().zip(y).map(|(&g, &o)| g * o * (T::ONE - o)).collect()
}

pub fn tanh_backward<T: Real>(dy: &[T], y: &[T]) -> Vec<T> {
    dy.iter().zip(y).map(|(&g, &o)| g * (T::ONE - o * o)).collect()
}

// ── ConvGRU step ────────────────────────────────────────────────────────────

/// Intermediates saved by the forward pass for reuse in backward.
pub struct GruSaved<T> {
    pub cat_zr: Vec<T>,
    pub z: Vec<T>,
    pub r: Vec<T>,
    pub cat_h: Vec<T>,
    pub htilde: Vec<T>,
}

pub struct GruWeights<'a, T> {
    pub wz: &'a [T],
    pub bz: &'a [T],
    pub wr: &'a [T],
    pub br: &'a [T],
    pub wh: &'a [T],
    pub bh: &'a [T],
}

pub fn gru_conv_shape(batch: usize, ch: usize, cx: usize, hw: (usize, usize), kernel: (usize, usize)) -> ConvShape {
    ConvShape {
        batch,
        in_channels: ch + cx,
        out_channels: ch,
        in_hw: hw,
        out_hw: hw,
        kernel,
        stride: (1, 1),
        padding: ((kernel.0 - 1) / 2, (kernel.1 - 1) / 2),
    }
}

pub(crate) fn concat_channels<T: Real>(a: &[T], ca: usize, b: &[T], cb: usize, batch: usize, plane: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; batch * (ca + cb) * plane];
    for n in 0..batch {
        let dst = &mut out[n * (ca + cb) * plane..(n + 1) * (ca + cb) * plane];
        dst[..ca * plane].copy_from_slice(&a[n * ca * plane..(n + 1) * ca * plane]);
        dst[ca * plane..].copy_from_slice(&b[n * cb * plane..(n + 1) * cb * plane]);
    }
    out
}

fn split_channels<T: Real>(cat: &[T], ca: usize, cb: usize, batch: usize, plane: usize) -> (Vec<T>, Vec<T>) {
    let mut a = vec![T::ZERO; batch * ca * plane];
    let mut b = vec![T::ZERO; batch * cb * plane];
    for n in 0..batch {
        let src = &cat[n * (ca + cb) * plane..(n + 1) * (ca + cb) * plane];
        a[n * ca * plane..(n + 1) * ca * plane].copy_from_slice(&src[..ca * plane]);
        b[n * cb * plane..(n + 1) * cb * plane].copy_from_slice(&src[ca * plane..]);
    }
    (a, b)
}

/// One ConvGRU update:
///   z = σ(Conv_z([h, x]))
///   r = σ(Conv_r([h, x]))
///   h̃ = tanh(Conv_h([r ⊙ h, x]))
///   h' = (1 − z) ⊙ h + z ⊙ h̃
/// Concatenation order is hidden-first, fixed.
pub fn gru_forward<T: Real>(
    h: &[T],
    x: &[T],
    w: &GruWeights<T>,
    batch: usize,
    ch: usize,
    cx: usize,
    hw: (usize, usize),
    kernel: (usize, usize),
) -> (Vec<T>, GruSaved<T>) {
    let plane = hw.0 * hw.1;
    let s = gru_conv_shape(batch, ch, cx, hw, kernel);
    let cat_zr = concat_channels(h, ch, x, cx, batch, plane);
    let z = sigmoid(&conv2d_forward(&cat_zr, w.wz, Some(w.bz), &s));
    let r = sigmoid(&conv2d_forward(&cat_zr, w.wr, Some(w.br), &s));
    let rh: Vec<T> = r.iter().zip(h).map(|(&a, &b)| a * b).collect();
    let cat_h = concat_channels(&rh, ch, x, cx, batch, plane);
    let htilde = tanh(&conv2d_forward(&cat_h, w.wh, Some(w.bh), &s));
    let hp: Vec<T> = h
        .iter()
        .zip(&z)
        .zip(&htilde)
        .map(|((&hv, &zv), &tv)| (T::ONE - zv) * hv + zv * tv)
        .collect();
    (hp, GruSaved { cat_zr, z, r, cat_h, htilde })
}

pub struct GruGrads<T> {
    pub dh: Vec<T>,
    pub dx: Vec<T>,
    pub dwz: Vec<T>,
    pub dbz: Vec<T>,
    pub dwr: Vec<T>,
    pub dbr: Vec<T>,
    pub dwh: Vec<T>,
    pub dbh: Vec<T>,
}

pub fn gru_backward<T: Real>(
    dhp: &[T],
    h: &[T],
    saved: &GruSaved<T>,
    w: &GruWeights<T>,
    batch: usize,
    ch: usize,
    cx: usize,
    hw: (usize, usize),
    kernel: (usize, usize),
) -> GruGrads<T> {
    let plane = hw.0 * hw.1;
    let s = gru_conv_shape(batch, ch, cx, hw, kernel);

    // h' = (1 − z) ⊙ h + z ⊙ h̃
    let mut dh: Vec<T> = dhp
        .iter()
        .zip(&saved.z)
        .map(|(&g, &zv)| g * (T::ONE - zv))
        .collect();
    let dz: Vec<T> = dhp
        .iter()
        .zip(&saved.htilde)
        .zip(h)
        .map(|((&g, &tv), &hv)| g * (tv - hv))
        .collect();
    let dhtilde: Vec<T> = dhp.iter().zip(&saved.z).map(|(&g, &zv)| g * zv).collect();

    // Through h̃ = tanh(Conv_h([r ⊙ h, x]))
    let dah = tanh_backward(&dhtilde, &saved.htilde);
    let gh = conv2d_backward(&dah, &saved.cat_h, w.wh, true, &s);
    let (drh, dx_h) = split_channels(&gh.dx, ch, cx, batch, plane);
    let dr: Vec<T> = drh.iter().zip(h).map(|(&g, &hv)| g * hv).collect();
    for ((o, &g), &rv) in dh.iter_mut().zip(&drh).zip(&saved.r) {
        *o += g * rv;
    }

    // Through the two sigmoid gates on [h, x].
    let dar = sigmoid_backward(&dr, &saved.r);
    let gr = conv2d_backward(&dar, &saved.cat_zr, w.wr, true, &s);
    let daz = sigmoid_backward(&dz, &saved.z);
    let gz = conv2d_backward(&daz, &saved.cat_zr, w.wz, true, &s);
    let dcat_zr: Vec<T> = gr.dx.iter().zip(&gz.dx).map(|(&a, &b)| a + b).collect();
    let (dh_zr, dx_zr) = split_channels(&dcat_zr, ch, cx, batch, plane);
    for (o, &g) in dh.iter_mut().zip(&dh_zr) {
        *o += g;
    }
    let dx: Vec<T> = dx_h.iter().zip(&dx_zr).map(|(&a, &b)| a + b).collect();

    GruGrads {
        dh,
        dx,
        dwz: gz.dw,
        dbz: gz.db.unwrap(),
        dwr: gr.dw,
        dbr: gr.db.unwrap(),
        dwh: gh.dw,
        dbh: gh.db.unwrap(),
    }
}
