//! Raw slice kernels shared by the graph ops.

use super::AttentionLayout;

/// `c = beta * c + op(a) * op(b)` with `op(a)` of shape `m x k` and `op(b)` of
/// shape `k x n`. A transposed operand is passed as its stored (untransposed)
/// row-major buffer.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    m: usize,
    k: usize,
    n: usize,
    c: &mut [f64],
    beta: f64,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above pin every slice length, and the strides
    // address exactly the row-major layout (or its transpose) of each buffer.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
}

/// Softmax over the middle index of an `[outer, len, inner]` view.
pub(crate) fn softmax_strided(x: &[f64], outer: usize, len: usize, inner: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * len + j) * inner + i;
            let m = (0..len).map(|j| x[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..len {
                let e = (x[idx(j)] - m).exp();
                out[idx(j)] = e;
                z += e;
            }
            for j in 0..len {
                out[idx(j)] /= z;
            }
        }
    }
    out
}

/// Per-row standardization `(x - mean) / sqrt(var + eps)` with the biased
/// variance. Returns the standardized values and each row's `1/sqrt(var+eps)`.
pub(crate) fn standardize(x: &[f64], c: usize, eps: f64) -> (Vec<f64>, Vec<f64>) {
    let rows = x.len() / c;
    let mut out = vec![0.0; x.len()];
    let mut inv = vec![0.0; rows];
    for r in 0..rows {
        let row = &x[r * c..(r + 1) * c];
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let is = 1.0 / (var + eps).sqrt();
        inv[r] = is;
        for (o, v) in out[r * c..(r + 1) * c].iter_mut().zip(row) {
            *o = (v - mean) * is;
        }
    }
    (out, inv)
}

pub(crate) fn standardize_backward(
    gy: &[f64],
    gain: &[f64],
    xhat: &[f64],
    inv_std: &[f64],
    c: usize,
    dx: &mut [f64],
) {
    let cf = c as f64;
    for (r, &is) in inv_std.iter().enumerate() {
        let span = r * c..(r + 1) * c;
        let gyr = &gy[span.clone()];
        let xh = &xhat[span.clone()];
        let mut sum_g = 0.0;
        let mut sum_gx = 0.0;
        for j in 0..c {
            let gh = gyr[j] * gain[j];
            sum_g += gh;
            sum_gx += gh * xh[j];
        }
        for (j, o) in dx[span].iter_mut().enumerate() {
            let gh = gyr[j] * gain[j];
            *o += is / cf * (cf * gh - sum_g - xh[j] * sum_gx);
        }
    }
}

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact GELU, `x * Phi(x)`.
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2));
    cdf + x * FRAC_1_SQRT_2PI * (-0.5 * x * x).exp()
}

fn visible(layout: &AttentionLayout, i: usize) -> usize {
    if layout.causal {
        i + 1 + layout.kv_len - layout.q_len
    } else {
        layout.kv_len
    }
}

pub(crate) fn attention_forward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    d: usize,
    layout: &AttentionLayout,
) -> (Vec<f64>, Vec<f64>) {
    let AttentionLayout {
        batch,
        q_len,
        kv_len,
        heads,
        shared_kv,
        ..
    } = *layout;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; batch * q_len * d];
    let mut probs = vec![0.0; batch * heads * q_len * kv_len];
    let mut scores = vec![0.0; kv_len];
    for b in 0..batch {
        let kb = if shared_kv { 0 } else { b };
        for h in 0..heads {
            let off = h * dh;
            for i in 0..q_len {
                let qrow = &q[(b * q_len + i) * d + off..][..dh];
                let lim = visible(layout, i);
                let mut m = f64::NEG_INFINITY;
                for (j, s) in scores.iter_mut().enumerate().take(lim) {
                    let krow = &k[(kb * kv_len + j) * d + off..][..dh];
                    *s = dot(qrow, krow) * scale;
                    m = m.max(*s);
                }
                let p = &mut probs[((b * heads + h) * q_len + i) * kv_len..][..kv_len];
                let mut z = 0.0;
                for j in 0..lim {
                    p[j] = (scores[j] - m).exp();
                    z += p[j];
                }
                let orow = &mut out[(b * q_len + i) * d + off..][..dh];
                for j in 0..lim {
                    p[j] /= z;
                    let vrow = &v[(kb * kv_len + j) * d + off..][..dh];
                    for (o, &x) in orow.iter_mut().zip(vrow) {
                        *o += p[j] * x;
                    }
                }
            }
        }
    }
    (out, probs)
}

pub(crate) fn attention_backward(
    gout: &[f64],
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    d: usize,
    layout: &AttentionLayout,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let AttentionLayout {
        batch,
        q_len,
        kv_len,
        heads,
        shared_kv,
        ..
    } = *layout;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = vec![0.0; q.len()];
    let mut dk = vec![0.0; k.len()];
    let mut dv = vec![0.0; v.len()];
    let mut dp = vec![0.0; kv_len];
    for b in 0..batch {
        let kb = if shared_kv { 0 } else { b };
        for h in 0..heads {
            let off = h * dh;
            for i in 0..q_len {
                let lim = visible(layout, i);
                let p = &probs[((b * heads + h) * q_len + i) * kv_len..][..kv_len];
                let qi = (b * q_len + i) * d + off;
                let go = &gout[qi..qi + dh];
                let mut sum = 0.0;
                for j in 0..lim {
                    let kj = (kb * kv_len + j) * d + off;
                    dp[j] = dot(go, &v[kj..kj + dh]);
                    sum += p[j] * dp[j];
                    for (o, &g) in dv[kj..kj + dh].iter_mut().zip(go) {
                        *o += p[j] * g;
                    }
                }
                for j in 0..lim {
                    let ds = p[j] * (dp[j] - sum) * scale;
                    let kj = (kb * kv_len + j) * d + off;
                    for t in 0..dh {
                        dq[qi + t] += ds * k[kj + t];
                        dk[kj + t] += ds * q[qi + t];
                    }
                }
            }
        }
    }
    (dq, dk, dv)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
