//! Dense kernels and their derivatives. All buffers are row-major `f64`.

/// Strided view of a matrix stored in a slice.
#[derive(Clone, Copy)]
pub(crate) struct View<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a> View<'a> {
    pub fn new(data: &'a [f64], rows: usize, cols: usize) -> Self {
        Self {
            data,
            rows,
            cols,
            rs: cols,
            cs: 1,
        }
    }

    /// A column block `[col0, col0 + cols)` of a row-major matrix with
    /// `stride` columns.
    pub fn block(data: &'a [f64], rows: usize, stride: usize, col0: usize, cols: usize) -> Self {
        Self {
            data: &data[col0..],
            rows,
            cols,
            rs: stride,
            cs: 1,
        }
    }

    pub fn t(self) -> Self {
        Self {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }

    fn check(&self) {
        if self.rows > 0 && self.cols > 0 {
            let last = (self.rows - 1) * self.rs + (self.cols - 1) * self.cs;
            assert!(last < self.data.len(), "matrix view out of bounds");
        }
    }
}

/// Mutable strided destination.
pub(crate) struct ViewMut<'a> {
    pub data: &'a mut [f64],
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a> ViewMut<'a> {
    pub fn new(data: &'a mut [f64], rows: usize, cols: usize) -> Self {
        Self {
            data,
            rows,
            cols,
            rs: cols,
            cs: 1,
        }
    }

    pub fn block(data: &'a mut [f64], rows: usize, stride: usize, col0: usize, cols: usize) -> Self {
        Self {
            data: &mut data[col0..],
            rows,
            cols,
            rs: stride,
            cs: 1,
        }
    }
}

/// `c = a·b + beta·c`.
pub(crate) fn gemm(a: View, b: View, beta: f64, c: ViewMut) {
    assert_eq!(a.cols, b.rows, "inner dimensions differ");
    assert_eq!((a.rows, b.cols), (c.rows, c.cols), "output shape differs");
    a.check();
    b.check();
    if c.rows > 0 && c.cols > 0 {
        let last = (c.rows - 1) * c.rs + (c.cols - 1) * c.cs;
        assert!(last < c.data.len(), "output view out of bounds");
    }
    if c.rows == 0 || c.cols == 0 {
        return;
    }
    // SAFETY: every index touched is bounded by the checks above and the
    // output does not alias the inputs (distinct borrows).
    unsafe {
        matrixmultiply::dgemm(
            a.rows,
            a.cols,
            b.cols,
            1.0,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.data.as_mut_ptr(),
            c.rs as isize,
            c.cs as isize,
        );
    }
}

/// `out[rows × n] = x[rows × k] · w[k × n] + bias`.
pub(crate) fn linear(x: &[f64], rows: usize, k: usize, w: &[f64], bias: &[f64], out: &mut [f64]) {
    let n = bias.len();
    for row in out.chunks_exact_mut(n) {
        row.copy_from_slice(bias);
    }
    gemm(
        View::new(x, rows, k),
        View::new(w, k, n),
        1.0,
        ViewMut::new(out, rows, n),
    );
}

/// Backward of [`linear`]: accumulates `dw += xᵀ·dy`, `db += Σ dy` and
/// writes (or accumulates, when `accumulate_dx`) `dx = dy·wᵀ`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn linear_backward(
    x: &[f64],
    rows: usize,
    k: usize,
    w: &[f64],
    dy: &[f64],
    dw: &mut [f64],
    db: &mut [f64],
    dx: Option<(&mut [f64], bool)>,
) {
    let n = db.len();
    gemm(
        View::new(x, rows, k).t(),
        View::new(dy, rows, n),
        1.0,
        ViewMut::new(dw, k, n),
    );
    for row in dy.chunks_exact(n) {
        for (acc, v) in db.iter_mut().zip(row) {
            *acc += v;
        }
    }
    if let Some((dx, accumulate)) = dx {
        let beta = if accumulate { 1.0 } else { 0.0 };
        gemm(
            View::new(dy, rows, n),
            View::new(w, k, n).t(),
            beta,
            ViewMut::new(dx, rows, k),
        );
    }
}

pub(crate) const LAYER_NORM_EPS: f64 = 1e-6;

/// Parameter-free layer norm over rows of width `dim`. Writes the
/// normalized rows and returns each row's inverse standard deviation.
pub(crate) fn layer_norm(x: &[f64], dim: usize, out: &mut [f64]) -> Vec<f64> {
    let mut inv_std = Vec::with_capacity(x.len() / dim);
    for (row, dst) in x.chunks_exact(dim).zip(out.chunks_exact_mut(dim)) {
        let mean = row.iter().sum::<f64>() / dim as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / dim as f64;
        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        for (d, v) in dst.iter_mut().zip(row) {
            *d = (v - mean) * inv;
        }
        inv_std.push(inv);
    }
    inv_std
}

/// Accumulates `dx += LN'(x)ᵀ·dy` given normalized rows `y`.
pub(crate) fn layer_norm_backward(dy: &[f64], y: &[f64], inv_std: &[f64], dim: usize, dx: &mut [f64]) {
    let n = dim as f64;
    for (((g, yr), dxr), &inv) in dy
        .chunks_exact(dim)
        .zip(y.chunks_exact(dim))
        .zip(dx.chunks_exact_mut(dim))
        .zip(inv_std)
    {
        let mean_g = g.iter().sum::<f64>() / n;
        let mean_gy = g.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n;
        for ((d, &gi), &yi) in dxr.iter_mut().zip(g).zip(yr) {
            *d += inv * (gi - mean_g - yi * mean_gy);
        }
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/π)
const GELU_C: f64 = 0.044_715;

/// Tanh-approximated GELU.
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let th = (GELU_K * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub(crate) fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

pub(crate) fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// Row-wise softmax in place; entries equal to `-inf` become exactly 0.
pub(crate) fn softmax_rows(x: &mut [f64], width: usize) {
    for row in x.chunks_exact_mut(width) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            row.fill(0.0);
            continue;
        }
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}
