//! Slice-level numeric kernels shared by the forward and backward passes.
//!
//! Every loop runs in a fixed index order so that results are bit-reproducible.

/// `out[m,n] = a[m,k] * b[k,n]`
pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `out[m,k] = g[m,n] * b[k,n]^T`
pub(crate) fn matmul_nt(g: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    // Row-major accumulation over a transposed copy vectorises; per-element
    // dot products would serialise on the add latency.
    matmul(g, &transpose(b, k, n), m, n, k)
}

/// `out[k,n] = a[m,k]^T * g[m,n]`
pub(crate) fn matmul_tn(a: &[f64], g: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
    out
}

pub(crate) fn transpose(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

/// Splits a shape around `axis` into `(outer, len, inner)`.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn softmax(x: &[f64], outer: usize, len: usize, inner: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    if inner == 1 {
        for (src, dst) in x.chunks_exact(len).zip(out.chunks_exact_mut(len)) {
            let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for (d, &v) in dst.iter_mut().zip(src) {
                *d = (v - max).exp();
                total += *d;
            }
            let inv = 1.0 / total;
            dst.iter_mut().for_each(|d| *d *= inv);
        }
        return out;
    }
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| o * len * inner + k * inner + i;
            let max = (0..len).map(|k| x[at(k)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for k in 0..len {
                let e = (x[at(k)] - max).exp();
                out[at(k)] = e;
                total += e;
            }
            for k in 0..len {
                out[at(k)] /= total;
            }
        }
    }
    out
}

pub(crate) fn log_softmax(x: &[f64], outer: usize, len: usize, inner: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| o * len * inner + k * inner + i;
            let max = (0..len).map(|k| x[at(k)]).fold(f64::NEG_INFINITY, f64::max);
            let lse = max + (0..len).map(|k| (x[at(k)] - max).exp()).sum::<f64>().ln();
            for k in 0..len {
                out[at(k)] = x[at(k)] - lse;
            }
        }
    }
    out
}

/// Geometry of a "same"-padded 2-D cross-correlation.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub depthwise: bool,
}

impl ConvGeom {
    fn input_channels(&self, o: usize) -> std::ops::Range<usize> {
        if self.depthwise {
            o..o + 1
        } else {
            0..self.c_in
        }
    }

    fn kernel_offset(&self, o: usize, i: usize) -> usize {
        if self.depthwise {
            o * self.kh * self.kw
        } else {
            (o * self.c_in + i) * self.kh * self.kw
        }
    }

    /// Visits every (output row, input row, column span) triple for a tap.
    #[inline]
    fn for_each_row(&self, dy: usize, dx: usize, mut f: impl FnMut(usize, usize, usize, usize, usize)) {
        let oy = dy as isize - (self.kh / 2) as isize;
        let ox = dx as isize - (self.kw / 2) as isize;
        let (h, w) = (self.h as isize, self.w as isize);
        let y_lo = (-oy).max(0);
        let y_hi = (h - oy).min(h);
        let x_lo = (-ox).max(0);
        let x_hi = (w - ox).min(w);
        if x_lo >= x_hi {
            return;
        }
        for y in y_lo..y_hi {
            let sy = y + oy;
            f(
                y as usize,
                sy as usize,
                x_lo as usize,
                x_hi as usize,
                (x_lo + ox) as usize,
            );
        }
    }
}

/// Unfolds a dense conv input into `[c_in * kh * kw, h * w]` patch rows.
fn im2col(x: &[f64], g: ConvGeom) -> Vec<f64> {
    let plane = g.h * g.w;
    let taps = g.kh * g.kw;
    let mut col = vec![0.0; g.c_in * taps * plane];
    for i in 0..g.c_in {
        for dy in 0..g.kh {
            for dx in 0..g.kw {
                let row = (i * taps + dy * g.kw + dx) * plane;
                g.for_each_row(dy, dx, |y, sy, x_lo, x_hi, sx_lo| {
                    let n = x_hi - x_lo;
                    let src = i * plane + sy * g.w + sx_lo;
                    col[row + y * g.w + x_lo..row + y * g.w + x_hi].copy_from_slice(&x[src..src + n]);
                });
            }
        }
    }
    col
}

/// Adjoint of [`im2col`].
fn col2im(col: &[f64], g: ConvGeom) -> Vec<f64> {
    let plane = g.h * g.w;
    let taps = g.kh * g.kw;
    let mut x = vec![0.0; g.c_in * plane];
    for i in 0..g.c_in {
        for dy in 0..g.kh {
            for dx in 0..g.kw {
                let row = (i * taps + dy * g.kw + dx) * plane;
                g.for_each_row(dy, dx, |y, sy, x_lo, x_hi, sx_lo| {
                    let src = &col[row + y * g.w + x_lo..row + y * g.w + x_hi];
                    let start = i * plane + sy * g.w + sx_lo;
                    for (d, v) in x[start..start + src.len()].iter_mut().zip(src) {
                        *d += v;
                    }
                });
            }
        }
    }
    x
}

pub(crate) fn conv2d(x: &[f64], k: &[f64], g: ConvGeom) -> Vec<f64> {
    let plane = g.h * g.w;
    if !g.depthwise {
        let rows = g.c_in * g.kh * g.kw;
        if g.kh * g.kw == 1 {
            return matmul(k, x, g.c_out, rows, plane);
        }
        return matmul(k, &im2col(x, g), g.c_out, rows, plane);
    }
    let mut out = vec![0.0; g.c_out * plane];
    for o in 0..g.c_out {
        for i in g.input_channels(o) {
            let kbase = g.kernel_offset(o, i);
            for dy in 0..g.kh {
                for dx in 0..g.kw {
                    let wv = k[kbase + dy * g.kw + dx];
                    g.for_each_row(dy, dx, |y, sy, x_lo, x_hi, sx_lo| {
                        let dst = &mut out[o * plane + y * g.w + x_lo..o * plane + y * g.w + x_hi];
                        let src = &x[i * plane + sy * g.w + sx_lo..];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += wv * s;
                        }
                    });
                }
            }
        }
    }
    out
}

/// Returns `(grad_input, grad_kernel)`.
pub(crate) fn conv2d_backward(
    x: &[f64],
    k: &[f64],
    grad: &[f64],
    g: ConvGeom,
) -> (Vec<f64>, Vec<f64>) {
    let plane = g.h * g.w;
    if !g.depthwise {
        let rows = g.c_in * g.kh * g.kw;
        let gcol = matmul_tn(k, grad, g.c_out, rows, plane);
        if g.kh * g.kw == 1 {
            return (gcol, matmul_nt(grad, x, g.c_out, plane, rows));
        }
        let col = im2col(x, g);
        return (col2im(&gcol, g), matmul_nt(grad, &col, g.c_out, plane, rows));
    }
    let mut gx = vec![0.0; x.len()];
    let mut gk = vec![0.0; k.len()];
    for o in 0..g.c_out {
        for i in g.input_channels(o) {
            let kbase = g.kernel_offset(o, i);
            for dy in 0..g.kh {
                for dx in 0..g.kw {
                    let wv = k[kbase + dy * g.kw + dx];
                    let mut acc = 0.0;
                    g.for_each_row(dy, dx, |y, sy, x_lo, x_hi, sx_lo| {
                        let gout = &grad[o * plane + y * g.w + x_lo..o * plane + y * g.w + x_hi];
                        let start = i * plane + sy * g.w + sx_lo;
                        let src = &x[start..start + gout.len()];
                        for (gv, s) in gout.iter().zip(src) {
                            acc += gv * s;
                        }
                        let dst = &mut gx[start..start + gout.len()];
                        for (d, gv) in dst.iter_mut().zip(gout) {
                            *d += wv * gv;
                        }
                    });
                    gk[kbase + dy * g.kw + dx] += acc;
                }
            }
        }
    }
    (gx, gk)
}

/// One output coordinate's bilinear source pair and weight on the second.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Lerp {
    pub lo: usize,
    pub hi: usize,
    pub t: f64,
}

/// Half-pixel-centre sampling table for resizing `src` samples to `dst`.
pub(crate) fn lerp_table(src: usize, dst: usize) -> Vec<Lerp> {
    let ratio = src as f64 / dst as f64;
    (0..dst)
        .map(|d| {
            let s = ((d as f64 + 0.5) * ratio - 0.5).clamp(0.0, (src - 1) as f64);
            let lo = s.floor() as usize;
            let hi = (lo + 1).min(src - 1);
            Lerp { lo, hi, t: s - lo as f64 }
        })
        .collect()
}

pub(crate) fn bilinear(x: &[f64], c: usize, h: usize, w: usize, ys: &[Lerp], xs: &[Lerp]) -> Vec<f64> {
    let (oh, ow) = (ys.len(), xs.len());
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        let src = &x[ch * h * w..(ch + 1) * h * w];
        for (oy, ly) in ys.iter().enumerate() {
            for (ox, lx) in xs.iter().enumerate() {
                let top = src[ly.lo * w + lx.lo] * (1.0 - lx.t) + src[ly.lo * w + lx.hi] * lx.t;
                let bot = src[ly.hi * w + lx.lo] * (1.0 - lx.t) + src[ly.hi * w + lx.hi] * lx.t;
                out[(ch * oh + oy) * ow + ox] = top * (1.0 - ly.t) + bot * ly.t;
            }
        }
    }
    out
}

pub(crate) fn bilinear_backward(
    grad: &[f64],
    c: usize,
    h: usize,
    w: usize,
    ys: &[Lerp],
    xs: &[Lerp],
) -> Vec<f64> {
    let (oh, ow) = (ys.len(), xs.len());
    let mut gx = vec![0.0; c * h * w];
    for ch in 0..c {
        let dst = &mut gx[ch * h * w..(ch + 1) * h * w];
        for (oy, ly) in ys.iter().enumerate() {
            for (ox, lx) in xs.iter().enumerate() {
                let g = grad[(ch * oh + oy) * ow + ox];
                let gt = g * (1.0 - ly.t);
                let gb = g * ly.t;
                dst[ly.lo * w + lx.lo] += gt * (1.0 - lx.t);
                dst[ly.lo * w + lx.hi] += gt * lx.t;
                dst[ly.hi * w + lx.lo] += gb * (1.0 - lx.t);
                dst[ly.hi * w + lx.hi] += gb * lx.t;
            }
        }
    }
    gx
}
