//! Hot numeric kernels.  Everything is plain safe Rust shaped so that LLVM
//! auto-vectorizes it (contiguous streams, fixed-width accumulator arrays,
//! `chunks_exact` to elide bounds checks).  All matmul kernels *accumulate*
//! into `c`; callers pass a zeroed buffer when they want a plain product.

/// `c[p x r] += a[p x q] * b[q x r]`, all row-major.
///
/// Dispatches on the output width: narrow products (per-head attention-times-
/// values) keep whole output rows in register accumulators; everything else
/// uses a 4x16 register tile.  Both shapes were chosen by measurement on the
/// attention workload; wider tiles spill and fall off a cliff.
pub fn mm_nn(a: &[f64], b: &[f64], c: &mut [f64], p: usize, q: usize, r: usize) {
    debug_assert_eq!(a.len(), p * q);
    debug_assert_eq!(b.len(), q * r);
    debug_assert_eq!(c.len(), p * r);
    match r {
        64 => mm_nn_narrow::<64>(a, b, c, p, q),
        32 => mm_nn_narrow::<32>(a, b, c, p, q),
        16 => mm_nn_narrow::<16>(a, b, c, p, q),
        _ => mm_nn_tiled(a, b, c, p, q, r),
    }
}

/// Whole-row accumulation for `r == R`: two output rows live entirely in
/// registers while B streams through once per row pair.
fn mm_nn_narrow<const R: usize>(a: &[f64], b: &[f64], c: &mut [f64], p: usize, q: usize) {
    debug_assert_eq!(b.len(), q * R);
    let mut it = 0;
    while it + 2 <= p {
        let a0 = &a[it * q..(it + 1) * q];
        let a1 = &a[(it + 1) * q..(it + 2) * q];
        let mut acc0 = [0.0f64; R];
        let mut acc1 = [0.0f64; R];
        for (k, brow) in b.chunks_exact(R).enumerate() {
            let brow: &[f64; R] = brow.try_into().unwrap();
            let (x0, x1) = (a0[k], a1[k]);
            for l in 0..R {
                acc0[l] += x0 * brow[l];
                acc1[l] += x1 * brow[l];
            }
        }
        for (cv, av) in c[it * R..(it + 1) * R].iter_mut().zip(&acc0) {
            *cv += av;
        }
        for (cv, av) in c[(it + 1) * R..(it + 2) * R].iter_mut().zip(&acc1) {
            *cv += av;
        }
        it += 2;
    }
    if it < p {
        let a0 = &a[it * q..(it + 1) * q];
        let mut acc = [0.0f64; R];
        for (k, brow) in b.chunks_exact(R).enumerate() {
            let brow: &[f64; R] = brow.try_into().unwrap();
            let x0 = a0[k];
            for l in 0..R {
                acc[l] += x0 * brow[l];
            }
        }
        for (cv, av) in c[it * R..(it + 1) * R].iter_mut().zip(&acc) {
            *cv += av;
        }
    }
}

/// General 4-row by 16-column register tile with scalar remainder edges.
fn mm_nn_tiled(a: &[f64], b: &[f64], c: &mut [f64], p: usize, q: usize, r: usize) {
    const MR: usize = 4;
    const NR: usize = 16;
    let mut jt = 0;
    while jt + NR <= r {
        let mut it = 0;
        while it + MR <= p {
            let mut acc = [[0.0f64; NR]; MR];
            let a0 = &a[it * q..(it + 1) * q];
            let a1 = &a[(it + 1) * q..(it + 2) * q];
            let a2 = &a[(it + 2) * q..(it + 3) * q];
            let a3 = &a[(it + 3) * q..(it + 4) * q];
            for k in 0..q {
                let brow: &[f64; NR] = b[k * r + jt..k * r + jt + NR].try_into().unwrap();
                let av = [a0[k], a1[k], a2[k], a3[k]];
                for i in 0..MR {
                    for l in 0..NR {
                        acc[i][l] += av[i] * brow[l];
                    }
                }
            }
            for (i, acc_row) in acc.iter().enumerate() {
                for (cv, av) in c[(it + i) * r + jt..(it + i) * r + jt + NR]
                    .iter_mut()
                    .zip(acc_row)
                {
                    *cv += av;
                }
            }
            it += MR;
        }
        while it < p {
            let a0 = &a[it * q..(it + 1) * q];
            let mut acc = [0.0f64; NR];
            for k in 0..q {
                let brow: &[f64; NR] = b[k * r + jt..k * r + jt + NR].try_into().unwrap();
                let x = a0[k];
                for l in 0..NR {
                    acc[l] += x * brow[l];
                }
            }
            for (cv, av) in c[it * r + jt..it * r + jt + NR].iter_mut().zip(&acc) {
                *cv += av;
            }
            it += 1;
        }
        jt += NR;
    }
    if jt < r {
        let rem = r - jt;
        for (a_row, c_full) in a.chunks_exact(q).zip(c.chunks_exact_mut(r)) {
            let c_row = &mut c_full[jt..];
            for (k, &ak) in a_row.iter().enumerate() {
                let b_row = &b[k * r + jt..k * r + jt + rem];
                for (cj, bj) in c_row.iter_mut().zip(b_row) {
                    *cj += ak * bj;
                }
            }
        }
    }
}

/// `c_row += k0*b0 + k1*b1 + k2*b2 + k3*b3`; one pass over `c_row`, so the
/// c-loads and stores are amortized over four fused multiply-adds.
#[allow(clippy::too_many_arguments)]
#[inline]
fn axpy4(
    k0: f64,
    k1: f64,
    k2: f64,
    k3: f64,
    b0: &[f64],
    b1: &[f64],
    b2: &[f64],
    b3: &[f64],
    c_row: &mut [f64],
) {
    for ((((cj, &x0), &x1), &x2), &x3) in
        c_row.iter_mut().zip(b0).zip(b1).zip(b2).zip(b3)
    {
        *cj += k0 * x0 + k1 * x1 + k2 * x2 + k3 * x3;
    }
}

/// `c[p x r] += a[p x q] * b[r x q]^T`: rows of `a` dotted with rows of `b`.
/// This is the natural layout for attention scores (Q rows against K rows)
/// and the tied output head (hidden rows against embedding rows).
///
/// For tall outputs the transpose of `b` is materialized once and the work
/// routed through the tiled [`mm_nn`]; the copy is linear and the tiled
/// product is 2-3x faster than accumulating row dots.
pub fn mm_nt(a: &[f64], b: &[f64], c: &mut [f64], p: usize, q: usize, r: usize) {
    debug_assert_eq!(a.len(), p * q);
    debug_assert_eq!(b.len(), r * q);
    debug_assert_eq!(c.len(), p * r);
    // Cap the scratch transpose at ~64 MB; beyond that (huge-vocab heads on
    // short inputs) plain row dots win anyway.
    if p >= 32 && r >= 16 && q * r <= (1 << 23) {
        let mut bt = vec![0.0f64; q * r];
        for (i, brow) in b.chunks_exact(q).enumerate() {
            for (j, &v) in brow.iter().enumerate() {
                bt[j * r + i] = v;
            }
        }
        mm_nn(a, &bt, c, p, q, r);
        return;
    }
    mm_nt_dots(a, b, c, p, q, r);
}

/// Row-dot fallback for short or extremely wide products.
fn mm_nt_dots(a: &[f64], b: &[f64], c: &mut [f64], _p: usize, q: usize, r: usize) {
    for (a_row, c_row) in a.chunks_exact(q).zip(c.chunks_exact_mut(r)) {
        let mut j = 0;
        // Four b-rows per pass share each a-load and give the FMA units four
        // independent dependency chains.
        while j + 4 <= r {
            let b0 = &b[j * q..(j + 1) * q];
            let b1 = &b[(j + 1) * q..(j + 2) * q];
            let b2 = &b[(j + 2) * q..(j + 3) * q];
            let b3 = &b[(j + 3) * q..(j + 4) * q];
            let mut s0 = [0.0f64; 8];
            let mut s1 = [0.0f64; 8];
            let mut s2 = [0.0f64; 8];
            let mut s3 = [0.0f64; 8];
            let mut ac = a_row.chunks_exact(8);
            let mut c0 = b0.chunks_exact(8);
            let mut c1 = b1.chunks_exact(8);
            let mut c2 = b2.chunks_exact(8);
            let mut c3 = b3.chunks_exact(8);
            for av in ac.by_ref() {
                let x0 = c0.next().unwrap();
                let x1 = c1.next().unwrap();
                let x2 = c2.next().unwrap();
                let x3 = c3.next().unwrap();
                for l in 0..8 {
                    s0[l] += av[l] * x0[l];
                    s1[l] += av[l] * x1[l];
                    s2[l] += av[l] * x2[l];
                    s3[l] += av[l] * x3[l];
                }
            }
            let (mut t0, mut t1, mut t2, mut t3) = (
                s0.iter().sum::<f64>(),
                s1.iter().sum::<f64>(),
                s2.iter().sum::<f64>(),
                s3.iter().sum::<f64>(),
            );
            let tail = ac.remainder();
            let base = q - tail.len();
            for (l, &av) in tail.iter().enumerate() {
                t0 += av * b0[base + l];
                t1 += av * b1[base + l];
                t2 += av * b2[base + l];
                t3 += av * b3[base + l];
            }
            c_row[j] += t0;
            c_row[j + 1] += t1;
            c_row[j + 2] += t2;
            c_row[j + 3] += t3;
            j += 4;
        }
        while j < r {
            c_row[j] += dot(a_row, &b[j * q..(j + 1) * q]);
            j += 1;
        }
    }
}

/// `c[q x r] += a[p x q]^T * b[p x r]`: the weight-gradient shape
/// (inputs-transposed times output-gradients), a sum of rank-1 updates.
pub fn mm_tn(a: &[f64], b: &[f64], c: &mut [f64], p: usize, q: usize, r: usize) {
    debug_assert_eq!(a.len(), p * q);
    debug_assert_eq!(b.len(), p * r);
    debug_assert_eq!(c.len(), q * r);
    let mut i = 0;
    while i + 4 <= p {
        let a0 = &a[i * q..(i + 1) * q];
        let a1 = &a[(i + 1) * q..(i + 2) * q];
        let a2 = &a[(i + 2) * q..(i + 3) * q];
        let a3 = &a[(i + 3) * q..(i + 4) * q];
        let b0 = &b[i * r..(i + 1) * r];
        let b1 = &b[(i + 1) * r..(i + 2) * r];
        let b2 = &b[(i + 2) * r..(i + 3) * r];
        let b3 = &b[(i + 3) * r..(i + 4) * r];
        for (kq, c_row) in c.chunks_exact_mut(r).enumerate() {
            axpy4(a0[kq], a1[kq], a2[kq], a3[kq], b0, b1, b2, b3, c_row);
        }
        i += 4;
    }
    while i < p {
        let a_row = &a[i * q..(i + 1) * q];
        let b_row = &b[i * r..(i + 1) * r];
        for (&ak, c_row) in a_row.iter().zip(c.chunks_exact_mut(r)) {
            for (cj, bj) in c_row.iter_mut().zip(b_row) {
                *cj += ak * bj;
            }
        }
        i += 1;
    }
}

/// Unrolled dot product with eight independent partial sums.
pub(crate) fn dot(x: &[f64], y: &[f64]) -> f64 {
    debug_assert_eq!(x.len(), y.len());
    let mut acc = [0.0f64; 8];
    let mut xc = x.chunks_exact(8);
    let mut yc = y.chunks_exact(8);
    for xs in xc.by_ref() {
        let ys = yc.next().unwrap();
        for l in 0..8 {
            acc[l] += xs[l] * ys[l];
        }
    }
    let mut s: f64 = acc.iter().sum();
    for (xv, yv) in xc.remainder().iter().zip(yc.remainder()) {
        s += xv * yv;
    }
    s
}

/// Row-wise numerically-stable softmax, in place.
pub(crate) fn softmax_rows_inplace(x: &mut [f64], cols: usize) {
    for row in x.chunks_exact_mut(cols) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        let inv = 1.0 / sum;
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
}

/// Softmax backward from the *output* `y`: `dx_j += (dy_j - dy.y) * y_j`.
pub(crate) fn softmax_rows_bwd(y: &[f64], dy: &[f64], dx: &mut [f64], cols: usize) {
    for ((yr, dyr), dxr) in y
        .chunks_exact(cols)
        .zip(dy.chunks_exact(cols))
        .zip(dx.chunks_exact_mut(cols))
    {
        let s = dot(dyr, yr);
        for ((dxj, &yj), &dyj) in dxr.iter_mut().zip(yr).zip(dyr) {
            *dxj += (dyj - s) * yj;
        }
    }
}

/// Row-wise layer norm with learned gain and bias; biased (1/H) variance.
pub(crate) fn layer_norm_fwd(
    x: &[f64],
    gain: &[f64],
    bias: &[f64],
    eps: f64,
    out: &mut [f64],
    cols: usize,
) {
    for (xr, or) in x.chunks_exact(cols).zip(out.chunks_exact_mut(cols)) {
        let inv_n = 1.0 / cols as f64;
        let mu = xr.iter().sum::<f64>() * inv_n;
        let var = xr.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() * inv_n;
        let inv_sd = 1.0 / (var + eps).sqrt();
        for (((oj, &xj), &gj), &bj) in or.iter_mut().zip(xr).zip(gain).zip(bias) {
            *oj = (xj - mu) * inv_sd * gj + bj;
        }
    }
}

/// Layer-norm backward; recomputes the row statistics instead of caching them.
pub(crate) fn layer_norm_bwd(
    x: &[f64],
    gain: &[f64],
    dy: &[f64],
    eps: f64,
    dx: &mut [f64],
    dgain: &mut [f64],
    dbias: &mut [f64],
    cols: usize,
) {
    let inv_n = 1.0 / cols as f64;
    for ((xr, dyr), dxr) in x
        .chunks_exact(cols)
        .zip(dy.chunks_exact(cols))
        .zip(dx.chunks_exact_mut(cols))
    {
        let mu = xr.iter().sum::<f64>() * inv_n;
        let var = xr.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() * inv_n;
        let inv_sd = 1.0 / (var + eps).sqrt();
        // w = dy * gain is the gradient flowing into the normalized value.
        let mut m1 = 0.0;
        let mut m2 = 0.0;
        for ((&xj, &dyj), &gj) in xr.iter().zip(dyr).zip(gain.iter()) {
            let xhat = (xj - mu) * inv_sd;
            let w = dyj * gj;
            m1 += w;
            m2 += w * xhat;
        }
        m1 *= inv_n;
        m2 *= inv_n;
        for ((((dxj, &xj), &dyj), &gj), (dgj, dbj)) in dxr
            .iter_mut()
            .zip(xr)
            .zip(dyr)
            .zip(gain.iter())
            .zip(dgain.iter_mut().zip(dbias.iter_mut()))
        {
            let xhat = (xj - mu) * inv_sd;
            *dxj += (dyj * gj - m1 - xhat * m2) * inv_sd;
            *dgj += dyj * xhat;
            *dbj += dyj;
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximation GELU, elementwise.
pub(crate) fn gelu_fwd(x: &[f64], out: &mut [f64]) {
    for (o, &v) in out.iter_mut().zip(x) {
        let u = GELU_C * (v + GELU_A * v * v * v);
        *o = 0.5 * v * (1.0 + u.tanh());
    }
}

/// Derivative of the tanh-approximation GELU.
pub(crate) fn gelu_bwd(x: &[f64], dy: &[f64], dx: &mut [f64]) {
    for ((dxj, &v), &dyj) in dx.iter_mut().zip(x).zip(dy) {
        let u = GELU_C * (v + GELU_A * v * v * v);
        let t = u.tanh();
        let du = GELU_C * (1.0 + 3.0 * GELU_A * v * v);
        *dxj += dyj * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du);
    }
}
