//! Dense row-major kernels used by the encoder and its backward pass.

/// Strided view into a matrix held in a flat buffer.
#[derive(Clone, Copy)]
pub(crate) struct View {
    pub off: usize,
    pub rs: usize,
    pub cs: usize,
}

impl View {
    /// Contiguous `rows × cols` matrix starting at `off`.
    pub fn rows(off: usize, cols: usize) -> View {
        View { off, rs: cols, cs: 1 }
    }

    /// Transpose of a contiguous `rows × cols` matrix.
    pub fn t(off: usize, cols: usize) -> View {
        View { off, rs: 1, cs: cols }
    }

    fn last(&self, rows: usize, cols: usize) -> usize {
        self.off + (rows.max(1) - 1) * self.rs + (cols.max(1) - 1) * self.cs
    }
}

/// `C = alpha·A·B + beta·C` with `A: m×k`, `B: k×n`, `C: m×n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    av: View,
    b: &[f64],
    bv: View,
    beta: f64,
    c: &mut [f64],
    cv: View,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(av.last(m, k) < a.len().max(1) || k == 0);
    assert!(bv.last(k, n) < b.len().max(1) || k == 0);
    assert!(cv.last(m, n) < c.len());
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                c[cv.off + i * cv.rs + j * cv.cs] *= beta;
            }
        }
        return;
    }
    // SAFETY: every element touched lies inside the bounds checked above, and
    // `c` is borrowed mutably so it cannot alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr().add(av.off),
            av.rs as isize,
            av.cs as isize,
            b.as_ptr().add(bv.off),
            bv.rs as isize,
            bv.cs as isize,
            beta,
            c.as_mut_ptr().add(cv.off),
            cv.rs as isize,
            cv.cs as isize,
        );
    }
}

/// `out = x·w + b` for contiguous `x: n×din`, `w: din×dout`.
pub(crate) fn linear(x: &[f64], n: usize, din: usize, w: &[f64], b: &[f64], dout: usize, out: &mut [f64]) {
    for row in out[..n * dout].chunks_exact_mut(dout) {
        row.copy_from_slice(b);
    }
    gemm(n, din, dout, 1.0, x, View::rows(0, din), w, View::rows(0, dout), 1.0, out, View::rows(0, dout));
}

/// Backward of [`linear`]: accumulates into `dw`, `db` and `dx`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn linear_backward(
    x: &[f64],
    n: usize,
    din: usize,
    w: &[f64],
    dout: usize,
    dy: &[f64],
    dw: &mut [f64],
    db: &mut [f64],
    dx: &mut [f64],
) {
    gemm(din, n, dout, 1.0, x, View::t(0, din), dy, View::rows(0, dout), 1.0, dw, View::rows(0, dout));
    for row in dy[..n * dout].chunks_exact(dout) {
        for (g, v) in db.iter_mut().zip(row) {
            *g += v;
        }
    }
    gemm(n, dout, din, 1.0, dy, View::rows(0, dout), w, View::t(0, dout), 1.0, dx, View::rows(0, din));
}

pub(crate) const LN_EPS: f64 = 1e-5;

/// Row-wise layer normalization. Keeps the normalized rows and inverse
/// standard deviations for the backward pass.
pub(crate) fn layer_norm(
    x: &[f64],
    d: usize,
    gamma: &[f64],
    beta: &[f64],
    out: &mut [f64],
    xhat: &mut [f64],
    rstd: &mut [f64],
) {
    for (r, row) in x.chunks_exact(d).enumerate() {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let s = 1.0 / (var + LN_EPS).sqrt();
        rstd[r] = s;
        for j in 0..d {
            let h = (row[j] - mean) * s;
            xhat[r * d + j] = h;
            out[r * d + j] = h * gamma[j] + beta[j];
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn layer_norm_backward(
    dy: &[f64],
    d: usize,
    gamma: &[f64],
    xhat: &[f64],
    rstd: &[f64],
    dgamma: &mut [f64],
    dbeta: &mut [f64],
    dx: &mut [f64],
) {
    for (r, g) in dy.chunks_exact(d).enumerate() {
        let h = &xhat[r * d..(r + 1) * d];
        let mut sum_g = 0.0;
        let mut sum_gh = 0.0;
        for j in 0..d {
            dgamma[j] += g[j] * h[j];
            dbeta[j] += g[j];
            let gh = g[j] * gamma[j];
            sum_g += gh;
            sum_gh += gh * h[j];
        }
        let inv_d = 1.0 / d as f64;
        for j in 0..d {
            let gh = g[j] * gamma[j];
            dx[r * d + j] += rstd[r] * (gh - inv_d * sum_g - h[j] * inv_d * sum_gh);
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh approximation of GELU.
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// In-place softmax of one row restricted to `keep`; other entries become 0.
pub(crate) fn masked_softmax(row: &mut [f64], keep: &[bool]) {
    let max = row.iter().zip(keep).filter(|(_, k)| **k).map(|(v, _)| *v).fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (v, k) in row.iter_mut().zip(keep) {
        *v = if *k { (*v - max).exp() } else { 0.0 };
        sum += *v;
    }
    if sum > 0.0 {
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_transposes() {
        // A = [[1,2,3],[4,5,6]]
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let mut c = [0.0; 4];
        // A·Aᵀ
        gemm(2, 3, 2, 1.0, &a, View::rows(0, 3), &a, View::t(0, 3), 0.0, &mut c, View::rows(0, 2));
        assert_eq!(c, [14.0, 32.0, 32.0, 77.0]);
        let mut c = [0.0; 9];
        // Aᵀ·A
        gemm(3, 2, 3, 1.0, &a, View::t(0, 3), &a, View::rows(0, 3), 0.0, &mut c, View::rows(0, 3));
        assert_eq!(c, [17.0, 22.0, 27.0, 22.0, 29.0, 36.0, 27.0, 36.0, 45.0]);
    }

    #[test]
    fn gelu_derivative() {
        for x in [-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8, "{x}");
        }
    }

    #[test]
    fn softmax_ignores_masked() {
        let mut row = [1.0, 50.0, 1.0];
        masked_softmax(&mut row, &[true, false, true]);
        assert_eq!(row, [0.5, 0.0, 0.5]);
    }
}
