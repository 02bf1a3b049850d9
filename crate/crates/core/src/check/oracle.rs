//! Brute-force reference implementations. Direct nested loops, independent
//! of the im2col/matmul production path; answers are compared against the
//! engine by the suite and by tests.

/// Direct cross-correlation. `x` is `[n,c,h,w]`, `weight` `[o,c,kh,kw]`.
#[allow(clippy::too_many_arguments)]
pub fn naive_conv2d(
    x: &[f64],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    weight: &[f64],
    o: usize,
    kh: usize,
    kw: usize,
    bias: Option<&[f64]>,
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * o * oh * ow];
    for s in 0..n {
        for oc in 0..o {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias.map(|b| b[oc]).unwrap_or(0.0);
                    for ic in 0..c {
                        for ki in 0..kh {
                            for kj in 0..kw {
                                let iy = (oy * stride + ki) as isize - pad as isize;
                                let ix = (ox * stride + kj) as isize - pad as isize;
                                if iy < 0 || iy >= h as isize || ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let xv = x[((s * c + ic) * h + iy as usize) * w + ix as usize];
                                let wv = weight[((oc * c + ic) * kh + ki) * kw + kj];
                                acc += xv * wv;
                            }
                        }
                    }
                    out[((s * o + oc) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    out
}

/// Direct transposed convolution via scattering. `x` is `[n,c,h,w]`,
/// `weight` `[c,o,kh,kw]`; output `[n,o,(h-1)s-2p+kh,(w-1)s-2p+kw]`.
#[allow(clippy::too_many_arguments)]
pub fn naive_conv_transpose2d(
    x: &[f64],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    weight: &[f64],
    o: usize,
    kh: usize,
    kw: usize,
    bias: Option<&[f64]>,
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let oh = (h - 1) * stride + kh - 2 * pad;
    let ow = (w - 1) * stride + kw - 2 * pad;
    let mut out = vec![0.0; n * o * oh * ow];
    if let Some(b) = bias {
        for s in 0..n {
            for oc in 0..o {
                let base = (s * o + oc) * oh * ow;
                for v in out[base..base + oh * ow].iter_mut() {
                    *v = b[oc];
                }
            }
        }
    }
    for s in 0..n {
        for ic in 0..c {
            for iy in 0..h {
                for ix in 0..w {
                    let xv = x[((s * c + ic) * h + iy) * w + ix];
                    for oc in 0..o {
                        for ki in 0..kh {
                            for kj in 0..kw {
                                let oy = (iy * stride + ki) as isize - pad as isize;
                                let ox = (ix * stride + kj) as isize - pad as isize;
                                if oy < 0 || oy >= oh as isize || ox < 0 || ox >= ow as isize {
                                    continue;
                                }
                                let wv = weight[((ic * o + oc) * kh + ki) * kw + kj];
                                out[((s * o + oc) * oh + oy as usize) * ow + ox as usize] +=
                                    xv * wv;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Direct affine map: `x[n,f] · w[o,f]ᵀ + b[o]`.
pub fn naive_linear(x: &[f64], n: usize, f: usize, w: &[f64], o: usize, b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; n * o];
    for r in 0..n {
        for j in 0..o {
            let mut acc = b[j];
            for p in 0..f {
                acc += x[r * f + p] * w[j * f + p];
            }
            out[r * o + j] = acc;
        }
    }
    out
}

/// Softened-softmax KL divergence computed with explicit exponentials:
/// `T² · mean_n Σ_k p(ln p − ln q)` with `p = softmax(teacher/T)`,
/// `q = softmax(student/T)`.
pub fn direct_kd(student: &[f64], teacher: &[f64], n: usize, k: usize, t: f64) -> f64 {
    let softmax = |row: &[f64]| -> Vec<f64> {
        let exps: Vec<f64> = row.iter().map(|&v| (v / t).exp()).collect();
        let sum: f64 = exps.iter().sum();
        exps.iter().map(|&e| e / sum).collect()
    };
    let mut acc = 0.0;
    for r in 0..n {
        let p = softmax(&teacher[r * k..(r + 1) * k]);
        let q = softmax(&student[r * k..(r + 1) * k]);
        for j in 0..k {
            acc += p[j] * (p[j].ln() - q[j].ln());
        }
    }
    t * t * acc / n as f64
}

/// Per-sample squared euclidean distance averaged over the batch.
pub fn direct_reconstruction(x: &[f64], px: &[f64], n: usize) -> f64 {
    let d = x.len() / n;
    let mut acc = 0.0;
    for r in 0..n {
        for i in 0..d {
            let diff = x[r * d + i] - px[r * d + i];
            acc += diff * diff;
        }
    }
    acc / n as f64
}

/// Factor-transfer distance computed directly: flatten per sample,
/// l2-normalize, p-norm of the difference, batch mean.
pub fn direct_factor_distance(ft: &[f64], fs: &[f64], n: usize, p: u8) -> f64 {
    let d = ft.len() / n;
    let normalize = |row: &[f64]| -> Vec<f64> {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        row.iter().map(|v| v / norm).collect()
    };
    let mut acc = 0.0;
    for r in 0..n {
        let a = normalize(&ft[r * d..(r + 1) * d]);
        let b = normalize(&fs[r * d..(r + 1) * d]);
        let dist = match p {
            1 => a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>(),
            2 => a
                .iter()
                .zip(&b)
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt(),
            _ => unreachable!("p is 1 or 2"),
        };
        acc += dist;
    }
    acc / n as f64
}
