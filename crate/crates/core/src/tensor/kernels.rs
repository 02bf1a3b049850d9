//! Raw numeric kernels behind the tensor ops. No graph knowledge here; all
//! functions are pure over slices, with shapes validated by the callers.
//!
//! Convolution runs as im2col + matmul. The transposed convolution family
//! reuses the same kernels with input/output roles swapped, which keeps one
//! hot path. Summation orders are fixed, so results are deterministic.

use crate::scalar::Scalar;

/// Shape bundle for one convolution configuration.
#[derive(Clone, Copy, Debug)]
pub struct ConvDims {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvDims {
    pub fn kk(&self) -> usize {
        self.c_in * self.kh * self.kw
    }
    pub fn in_plane(&self) -> usize {
        self.h * self.w
    }
    pub fn out_plane(&self) -> usize {
        self.oh * self.ow
    }
}

/// C += A·B with A `[m,k]`, B `[k,n]`, C `[m,n]`, all row-major.
pub fn matmul_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// C += A·Bᵀ with A `[m,k]`, B `[n,k]`, C `[m,n]`.
pub fn matmul_nt_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (j, cv) in crow.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&av, &bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            *cv += acc;
        }
    }
}

/// C += Aᵀ·B with A `[k,m]`, B `[k,n]`, C `[m,n]` (rank-1 update per row of A).
pub fn matmul_tn_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

pub fn transpose<T: Scalar>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// Unfold one `[C,H,W]` sample into `[C·kh·kw, oh·ow]` patch columns.
/// Out-of-range taps read as zero padding.
pub fn im2col<T: Scalar>(x: &[T], d: &ConvDims, cols: &mut [T]) {
    let (h, w, ow) = (d.h, d.w, d.ow);
    debug_assert_eq!(cols.len(), d.kk() * d.out_plane());
    let mut row = 0usize;
    for c in 0..d.c_in {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for ki in 0..d.kh {
            for kj in 0..d.kw {
                let dst = &mut cols[row * d.out_plane()..(row + 1) * d.out_plane()];
                row += 1;
                for oy in 0..d.oh {
                    let iy = (oy * d.stride + ki) as isize - d.pad as isize;
                    let drow = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        for v in drow.iter_mut() {
                            *v = T::zero();
                        }
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, v) in drow.iter_mut().enumerate() {
                        let ix = (ox * d.stride + kj) as isize - d.pad as isize;
                        *v = if ix < 0 || ix >= w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Fold `[C·kh·kw, oh·ow]` columns back into a `[C,H,W]` sample, accumulating
/// overlapping taps. Adjoint of [`im2col`].
pub fn col2im_acc<T: Scalar>(cols: &[T], d: &ConvDims, x: &mut [T]) {
    let (h, w, ow) = (d.h, d.w, d.ow);
    let mut row = 0usize;
    for c in 0..d.c_in {
        let plane = &mut x[c * h * w..(c + 1) * h * w];
        for ki in 0..d.kh {
            for kj in 0..d.kw {
                let src = &cols[row * d.out_plane()..(row + 1) * d.out_plane()];
                row += 1;
                for oy in 0..d.oh {
                    let iy = (oy * d.stride + ki) as isize - d.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let srow = &src[oy * ow..(oy + 1) * ow];
                    for (ox, &v) in srow.iter().enumerate() {
                        let ix = (ox * d.stride + kj) as isize - d.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Forward convolution (cross-correlation). `weight` is `[c_out, c_in·kh·kw]`
/// row-major; output `[n, c_out, oh, ow]`.
pub fn conv2d_fwd<T: Scalar>(x: &[T], weight: &[T], bias: Option<&[T]>, d: &ConvDims) -> Vec<T> {
    let (kk, ip, op) = (d.kk(), d.c_in * d.in_plane(), d.out_plane());
    let mut out = vec![T::zero(); d.n * d.c_out * op];
    let mut cols = vec![T::zero(); kk * op];
    for s in 0..d.n {
        im2col(&x[s * ip..(s + 1) * ip], d, &mut cols);
        let dst = &mut out[s * d.c_out * op..(s + 1) * d.c_out * op];
        matmul_acc(weight, &cols, dst, d.c_out, kk, op);
        if let Some(b) = bias {
            for o in 0..d.c_out {
                let bo = b[o];
                for v in dst[o * op..(o + 1) * op].iter_mut() {
                    *v += bo;
                }
            }
        }
    }
    out
}

/// Gradient w.r.t. the convolution input: col2im(Wᵀ · dy) per sample.
pub fn conv2d_bwd_input<T: Scalar>(dy: &[T], weight: &[T], d: &ConvDims) -> Vec<T> {
    let (kk, ip, op) = (d.kk(), d.c_in * d.in_plane(), d.out_plane());
    let wt = transpose(weight, d.c_out, kk);
    let mut dx = vec![T::zero(); d.n * ip];
    let mut dcols = vec![T::zero(); kk * op];
    for s in 0..d.n {
        dcols.iter_mut().for_each(|v| *v = T::zero());
        matmul_acc(
            &wt,
            &dy[s * d.c_out * op..(s + 1) * d.c_out * op],
            &mut dcols,
            kk,
            d.c_out,
            op,
        );
        col2im_acc(&dcols, d, &mut dx[s * ip..(s + 1) * ip]);
    }
    dx
}

/// Gradient w.r.t. the convolution weight, summed over the batch in sample
/// order. Returns `[c_out, c_in·kh·kw]`.
pub fn conv2d_bwd_weight<T: Scalar>(x: &[T], dy: &[T], d: &ConvDims) -> Vec<T> {
    let (kk, ip, op) = (d.kk(), d.c_in * d.in_plane(), d.out_plane());
    let mut dw = vec![T::zero(); d.c_out * kk];
    let mut cols = vec![T::zero(); kk * op];
    for s in 0..d.n {
        im2col(&x[s * ip..(s + 1) * ip], d, &mut cols);
        matmul_nt_acc(
            &dy[s * d.c_out * op..(s + 1) * d.c_out * op],
            &cols,
            &mut dw,
            d.c_out,
            op,
            kk,
        );
    }
    dw
}

pub fn conv2d_bwd_bias<T: Scalar>(dy: &[T], d: &ConvDims) -> Vec<T> {
    let op = d.out_plane();
    let mut db = vec![T::zero(); d.c_out];
    for s in 0..d.n {
        for o in 0..d.c_out {
            let base = (s * d.c_out + o) * op;
            let mut acc = T::zero();
            for &v in &dy[base..base + op] {
                acc += v;
            }
            db[o] += acc;
        }
    }
    db
}

// ── batchnorm ────────────────────────────────────────────────────────

/// Per-channel batch statistics over `[N, C, plane]`: biased variance.
pub fn bn_batch_stats<T: Scalar>(x: &[T], n: usize, c: usize, plane: usize) -> (Vec<T>, Vec<T>) {
    let count = T::from_f64((n * plane) as f64);
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut acc = T::zero();
        for s in 0..n {
            let base = (s * c + ch) * plane;
            for &v in &x[base..base + plane] {
                acc += v;
            }
        }
        mean[ch] = acc / count;
    }
    for ch in 0..c {
        let m = mean[ch];
        let mut acc = T::zero();
        for s in 0..n {
            let base = (s * c + ch) * plane;
            for &v in &x[base..base + plane] {
                let dv = v - m;
                acc += dv * dv;
            }
        }
        var[ch] = acc / count;
    }
    (mean, var)
}

/// Normalize with given per-channel mean and inverse standard deviation.
pub fn bn_apply<T: Scalar>(
    x: &[T],
    mean: &[T],
    inv_std: &[T],
    gamma: &[T],
    beta: &[T],
    n: usize,
    c: usize,
    plane: usize,
) -> Vec<T> {
    let mut y = vec![T::zero(); x.len()];
    for s in 0..n {
        for ch in 0..c {
            let (m, is, g, b) = (mean[ch], inv_std[ch], gamma[ch], beta[ch]);
            let base = (s * c + ch) * plane;
            for (yo, &xv) in y[base..base + plane].iter_mut().zip(&x[base..base + plane]) {
                *yo = (xv - m) * is * g + b;
            }
        }
    }
    y
}

/// Training-mode backward through the batch statistics.
#[allow(clippy::too_many_arguments)]
pub fn bn_bwd_train<T: Scalar>(
    x: &[T],
    dy: &[T],
    mean: &[T],
    inv_std: &[T],
    gamma: &[T],
    n: usize,
    c: usize,
    plane: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let count = T::from_f64((n * plane) as f64);
    let mut dx = vec![T::zero(); x.len()];
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for ch in 0..c {
        let (m, is, g) = (mean[ch], inv_std[ch], gamma[ch]);
        let mut sum_dy = T::zero();
        let mut sum_dy_xhat = T::zero();
        for s in 0..n {
            let base = (s * c + ch) * plane;
            for (&dv, &xv) in dy[base..base + plane].iter().zip(&x[base..base + plane]) {
                sum_dy += dv;
                sum_dy_xhat += dv * (xv - m) * is;
            }
        }
        dgamma[ch] = sum_dy_xhat;
        dbeta[ch] = sum_dy;
        let mean_dy = sum_dy / count;
        let mean_dy_xhat = sum_dy_xhat / count;
        for s in 0..n {
            let base = (s * c + ch) * plane;
            for i in base..base + plane {
                let xhat = (x[i] - m) * is;
                dx[i] = g * is * (dy[i] - mean_dy - xhat * mean_dy_xhat);
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Eval-mode backward: running statistics are constants.
#[allow(clippy::too_many_arguments)]
pub fn bn_bwd_eval<T: Scalar>(
    x: &[T],
    dy: &[T],
    mean: &[T],
    inv_std: &[T],
    gamma: &[T],
    n: usize,
    c: usize,
    plane: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut dx = vec![T::zero(); x.len()];
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for ch in 0..c {
        let (m, is, g) = (mean[ch], inv_std[ch], gamma[ch]);
        for s in 0..n {
            let base = (s * c + ch) * plane;
            for i in base..base + plane {
                dx[i] = dy[i] * g * is;
                dgamma[ch] += dy[i] * (x[i] - m) * is;
                dbeta[ch] += dy[i];
            }
        }
    }
    (dx, dgamma, dbeta)
}

// ── rows (softmax family over [N, K]) ────────────────────────────────

/// Temperature softmax per row, stabilized by row-max subtraction.
pub fn softmax_rows<T: Scalar>(x: &[T], n: usize, k: usize, t: T) -> Vec<T> {
    let mut y = vec![T::zero(); x.len()];
    for r in 0..n {
        let row = &x[r * k..(r + 1) * k];
        let yrow = &mut y[r * k..(r + 1) * k];
        let mut mx = row[0];
        for &v in row.iter() {
            if v > mx {
                mx = v;
            }
        }
        let mut sum = T::zero();
        for (yo, &v) in yrow.iter_mut().zip(row) {
            let e = ((v - mx) / t).exp();
            *yo = e;
            sum += e;
        }
        for yo in yrow.iter_mut() {
            *yo = *yo / sum;
        }
    }
    y
}

/// Stable log-softmax per row (temperature 1).
pub fn log_softmax_rows<T: Scalar>(x: &[T], n: usize, k: usize) -> Vec<T> {
    let mut y = vec![T::zero(); x.len()];
    for r in 0..n {
        let row = &x[r * k..(r + 1) * k];
        let yrow = &mut y[r * k..(r + 1) * k];
        let mut mx = row[0];
        for &v in row.iter() {
            if v > mx {
                mx = v;
            }
        }
        let mut sum = T::zero();
        for &v in row.iter() {
            sum += (v - mx).exp();
        }
        let lse = mx + sum.ln();
        for (yo, &v) in yrow.iter_mut().zip(row) {
            *yo = v - lse;
        }
    }
    y
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        // [1 2; 3 4] x [5 6; 7 8] = [19 22; 43 50]
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        matmul_acc(&a, &b, &mut c, 2, 2, 2);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn transpose_roundtrip() {
        let a = [1.0f32, 2.0, 3.0, 4.0, 5.0, 6.0];
        let t = transpose(&a, 2, 3);
        assert_eq!(t, vec![1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        assert_eq!(transpose(&t, 3, 2), a.to_vec());
    }

    #[test]
    fn im2col_col2im_adjoint_identity() {
        // <im2col(x), y> == <x, col2im(y)> for the linear maps to be adjoint.
        let d = ConvDims {
            n: 1,
            c_in: 2,
            h: 4,
            w: 5,
            c_out: 1,
            kh: 3,
            kw: 3,
            stride: 2,
            pad: 1,
            oh: 2,
            ow: 3,
        };
        let x: Vec<f64> = (0..d.c_in * d.h * d.w).map(|i| (i as f64).sin()).collect();
        let y: Vec<f64> = (0..d.kk() * d.out_plane())
            .map(|i| (i as f64 * 0.7).cos())
            .collect();
        let mut cols = vec![0.0; d.kk() * d.out_plane()];
        im2col(&x, &d, &mut cols);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; x.len()];
        col2im_acc(&y, &d, &mut back);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
