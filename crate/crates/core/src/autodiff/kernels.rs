//! Dense kernels shared by the forward and backward passes.
//!
//! Linear and convolution kernels accumulate in the element type, one lane
//! per output channel, so the loops vectorize while the summation order stays
//! fixed. Zero inputs (common after relu) are skipped.

use super::tensor::Scalar;

#[inline]
pub(crate) fn dot_f64<T: Scalar>(a: &[f64], b: &[T]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (xa, xb) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += xa[l] * xb[l].as_f64();
        }
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y.as_f64();
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// `acc += alpha * x`
#[inline]
pub(crate) fn axpy<T: Scalar>(acc: &mut [f64], alpha: f64, x: &[T]) {
    for (a, v) in acc.iter_mut().zip(x) {
        *a += alpha * v.as_f64();
    }
}

/// `[rows, cols]` to `[cols, rows]`.
fn transpose<T: Scalar>(w: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut t = vec![T::zero(); w.len()];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = w[r * cols + c];
        }
    }
    t
}

/// `acc += alpha * x`, in the element type. `N > 0` fixes the length so the
/// loop unrolls for the common channel counts.
#[inline(always)]
fn axpy_n<T: Scalar, const N: usize>(acc: &mut [T], alpha: T, x: &[T]) {
    if N > 0 {
        let acc = &mut acc[..N];
        let x = &x[..N];
        for i in 0..N {
            acc[i] = acc[i] + alpha * x[i];
        }
    } else {
        for (a, &v) in acc.iter_mut().zip(x) {
            *a = *a + alpha * v;
        }
    }
}

#[inline(always)]
fn axpy_t<T: Scalar>(acc: &mut [T], alpha: T, x: &[T]) {
    axpy_n::<T, 0>(acc, alpha, x)
}

/// `y[n, o] = x[n, :] . w[o, :] + b[o]`
pub(crate) fn linear_forward<T: Scalar>(
    x: &[T],
    w: &[T],
    b: Option<&[T]>,
    rows: usize,
    d_in: usize,
    d_out: usize,
) -> Vec<T> {
    match d_out {
        16 => linear_forward_n::<T, 16>(x, w, b, rows, d_in, d_out),
        32 => linear_forward_n::<T, 32>(x, w, b, rows, d_in, d_out),
        _ => linear_forward_n::<T, 0>(x, w, b, rows, d_in, d_out),
    }
}

fn linear_forward_n<T: Scalar, const N: usize>(
    x: &[T],
    w: &[T],
    b: Option<&[T]>,
    rows: usize,
    d_in: usize,
    d_out: usize,
) -> Vec<T> {
    let wt = transpose(w, d_out, d_in);
    let mut out = vec![T::zero(); rows * d_out];
    if d_out == 0 {
        return out;
    }
    for (xr, yr) in x.chunks_exact(d_in).zip(out.chunks_exact_mut(d_out)) {
        if let Some(b) = b {
            yr.copy_from_slice(b);
        }
        for (&xi, wi) in xr.iter().zip(wt.chunks_exact(d_out)) {
            if xi != T::zero() {
                axpy_n::<T, N>(yr, xi, wi);
            }
        }
    }
    out
}

pub(crate) struct LinearGrads {
    pub x: Option<Vec<f64>>,
    pub w: Option<Vec<f64>>,
    pub b: Option<Vec<f64>>,
}

fn to_f64<T: Scalar>(v: Vec<T>) -> Vec<f64> {
    v.into_iter().map(|x| x.as_f64()).collect()
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn linear_backward<T: Scalar>(
    g: &[f64],
    x: &[T],
    w: &[T],
    rows: usize,
    d_in: usize,
    d_out: usize,
    need: (bool, bool, bool),
) -> LinearGrads {
    let gt: Vec<T> = g.iter().map(|&v| T::from_f64(v)).collect();
    let gx = need.0.then(|| {
        let mut gx = vec![T::zero(); rows * d_in];
        for (acc, gr) in gx.chunks_exact_mut(d_in).zip(gt.chunks_exact(d_out)) {
            for (&go, wo) in gr.iter().zip(w.chunks_exact(d_in)) {
                if go != T::zero() {
                    axpy_t(acc, go, wo);
                }
            }
        }
        to_f64(gx)
    });
    let gw = need.1.then(|| {
        // Accumulated as [in, out] so the inner loop runs over outputs.
        let mut gwt = vec![T::zero(); d_in * d_out];
        for (xr, gr) in x.chunks_exact(d_in).zip(gt.chunks_exact(d_out)) {
            if gr.iter().all(|&v| v == T::zero()) {
                continue;
            }
            for (&xi, acc) in xr.iter().zip(gwt.chunks_exact_mut(d_out)) {
                if xi != T::zero() {
                    axpy_t(acc, xi, gr);
                }
            }
        }
        to_f64(transpose(&gwt, d_in, d_out))
    });
    let gb = need.2.then(|| {
        let mut gb = vec![0.0; d_out];
        for gr in g.chunks_exact(d_out) {
            for (a, v) in gb.iter_mut().zip(gr) {
                *a += v;
            }
        }
        gb
    });
    LinearGrads { x: gx, w: gw, b: gb }
}

/// `c[n, m] = a[n, k] b[k, m]`
pub(crate) fn matmul_forward<T: Scalar>(a: &[T], b: &[T], n: usize, k: usize, m: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(n * m);
    let mut acc = vec![0.0f64; m];
    for i in 0..n {
        acc.iter_mut().for_each(|v| *v = 0.0);
        for p in 0..k {
            let aip = a[i * k + p].as_f64();
            if aip != 0.0 {
                axpy(&mut acc, aip, &b[p * m..(p + 1) * m]);
            }
        }
        out.extend(acc.iter().map(|&v| T::from_f64(v)));
    }
    out
}

pub(crate) fn matmul_backward<T: Scalar>(
    g: &[f64],
    a: &[T],
    b: &[T],
    n: usize,
    k: usize,
    m: usize,
    need: (bool, bool),
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let ga = need.0.then(|| {
        let mut ga = vec![0.0; n * k];
        for i in 0..n {
            let gi = &g[i * m..(i + 1) * m];
            for p in 0..k {
                ga[i * k + p] = dot_f64(gi, &b[p * m..(p + 1) * m]);
            }
        }
        ga
    });
    let gb = need.1.then(|| {
        let mut gb = vec![0.0; k * m];
        for i in 0..n {
            let gi = &g[i * m..(i + 1) * m];
            for p in 0..k {
                let aip = a[i * k + p].as_f64();
                if aip != 0.0 {
                    for (acc, gv) in gb[p * m..(p + 1) * m].iter_mut().zip(gi) {
                        *acc += aip * gv;
                    }
                }
            }
        }
        gb
    });
    (ga, gb)
}

/// Geometry of a stride-1, zero-padded 2-D convolution over an `[H, W, C]` map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub height: usize,
    pub width: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
}

impl ConvGeom {
    pub fn patch_len(&self) -> usize {
        self.kh * self.kw * self.c_in
    }
}

fn for_each_pixel(geom: &ConvGeom, active: Option<&[u32]>, mut f: impl FnMut(usize)) {
    match active {
        Some(list) => list.iter().for_each(|&p| f(p as usize)),
        None => (0..geom.height * geom.width).for_each(f),
    }
}

/// Output pixels outside `active` (when given) are left at zero.
pub(crate) fn conv2d_forward<T: Scalar>(
    x: &[T],
    w: &[T],
    b: Option<&[T]>,
    geom: &ConvGeom,
    active: Option<&[u32]>,
) -> Vec<T> {
    match geom.c_out {
        16 => conv2d_forward_n::<T, 16>(x, w, b, geom, active),
        32 => conv2d_forward_n::<T, 32>(x, w, b, geom, active),
        _ => conv2d_forward_n::<T, 0>(x, w, b, geom, active),
    }
}

fn conv2d_forward_n<T: Scalar, const N: usize>(
    x: &[T],
    w: &[T],
    b: Option<&[T]>,
    geom: &ConvGeom,
    active: Option<&[u32]>,
) -> Vec<T> {
    let (k, co, ci) = (geom.patch_len(), geom.c_out, geom.c_in);
    let wt = transpose(w, co, k);
    let (ry, rx) = ((geom.kh / 2) as isize, (geom.kw / 2) as isize);
    let mut out = vec![T::zero(); geom.height * geom.width * co];
    for_each_pixel(geom, active, |p| {
        let (py, px) = ((p / geom.width) as isize, (p % geom.width) as isize);
        let dst = &mut out[p * co..(p + 1) * co];
        if let Some(b) = b {
            dst.copy_from_slice(b);
        }
        let mut tap = 0;
        for dy in -ry..=ry {
            let y = py + dy;
            for dx in -rx..=rx {
                let xx = px + dx;
                if y >= 0 && xx >= 0 && y < geom.height as isize && xx < geom.width as isize {
                    let q = (y as usize * geom.width + xx as usize) * ci;
                    for (c, &xi) in x[q..q + ci].iter().enumerate() {
                        if xi != T::zero() {
                            let r = (tap + c) * co;
                            axpy_n::<T, N>(dst, xi, &wt[r..r + co]);
                        }
                    }
                }
                tap += ci;
            }
        }
    });
    out
}

pub(crate) fn conv2d_backward<T: Scalar>(
    g: &[f64],
    x: &[T],
    w: &[T],
    geom: &ConvGeom,
    active: Option<&[u32]>,
    need: (bool, bool, bool),
) -> LinearGrads {
    let (k, co, ci) = (geom.patch_len(), geom.c_out, geom.c_in);
    let (ry, rx) = ((geom.kh / 2) as isize, (geom.kw / 2) as isize);
    let mut gx = need.0.then(|| vec![T::zero(); x.len()]);
    // Weight gradient accumulated as [k, c_out].
    let mut gwt = need.1.then(|| vec![T::zero(); k * co]);
    let mut gb = need.2.then(|| vec![0.0; co]);
    let mut gp = vec![T::zero(); co];
    for_each_pixel(geom, active, |p| {
        let gs = &g[p * co..(p + 1) * co];
        if gs.iter().all(|&v| v == 0.0) {
            return;
        }
        if let Some(gb) = gb.as_mut() {
            for (a, v) in gb.iter_mut().zip(gs) {
                *a += v;
            }
        }
        for (d, &v) in gp.iter_mut().zip(gs) {
            *d = T::from_f64(v);
        }
        let (py, px) = ((p / geom.width) as isize, (p % geom.width) as isize);
        let mut tap = 0;
        for dy in -ry..=ry {
            let y = py + dy;
            for dx in -rx..=rx {
                let xx = px + dx;
                if y >= 0 && xx >= 0 && y < geom.height as isize && xx < geom.width as isize {
                    let q = (y as usize * geom.width + xx as usize) * ci;
                    if let Some(gwt) = gwt.as_mut() {
                        for (c, &xi) in x[q..q + ci].iter().enumerate() {
                            if xi != T::zero() {
                                let r = (tap + c) * co;
                                axpy_t(&mut gwt[r..r + co], xi, &gp);
                            }
                        }
                    }
                    if let Some(gx) = gx.as_mut() {
                        for (o, &go) in gp.iter().enumerate() {
                            if go != T::zero() {
                                let r = o * k + tap;
                                axpy_t(&mut gx[q..q + ci], go, &w[r..r + ci]);
                            }
                        }
                    }
                }
                tap += ci;
            }
        }
    });
    LinearGrads { x: gx.map(to_f64), w: gwt.map(|t| to_f64(transpose(&t, k, co))), b: gb }
}

#[inline]
pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_matches_naive_sum() {
        let (rows, d_in) = (3, 37);
        for d_out in [5, 16, 32] {
            let x: Vec<f64> = (0..rows * d_in).map(|i| (i as f64 * 0.37).sin()).collect();
            let w: Vec<f64> = (0..d_out * d_in).map(|i| (i as f64 * 0.11).cos()).collect();
            let b: Vec<f64> = (0..d_out).map(|i| i as f64).collect();
            let y = linear_forward(&x, &w, Some(&b), rows, d_in, d_out);
            for r in 0..rows {
                for o in 0..d_out {
                    let naive: f64 = b[o] + (0..d_in).map(|i| x[r * d_in + i] * w[o * d_in + i]).sum::<f64>();
                    assert!((y[r * d_out + o] - naive).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn matmul_small() {
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let b = [5.0f64, 6.0, 7.0, 8.0];
        assert_eq!(matmul_forward(&a, &b, 2, 2, 2), vec![19.0, 22.0, 43.0, 50.0]);
    }
}
