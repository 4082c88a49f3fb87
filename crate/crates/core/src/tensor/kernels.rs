//! Raw slice kernels shared by forward and backward passes.

/// `out += a (m x k) * b (k x n)`
pub(crate) fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// `out += a (m x n) * b^T` where `b` is `k x n`; `out` is `m x k`.
pub(crate) fn matmul_nt_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let a_row = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let b_row = &b[p * n..(p + 1) * n];
            let dot: f64 = a_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
            out[i * k + p] += dot;
        }
    }
}

/// `out += a^T * b` where `a` is `m x k`, `b` is `m x n`; `out` is `k x n`.
pub(crate) fn matmul_tn_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// Layout of the 1-D slices of a rank-2 `[rows, cols]` buffer along `axis`:
/// `(slice_count, slice_len, stride)`, where slice `s` starts at `start(s)`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct AxisSlices {
    pub count: usize,
    pub len: usize,
    pub stride: usize,
    rows: usize,
    cols: usize,
    axis: usize,
}

impl AxisSlices {
    pub fn new(rows: usize, cols: usize, axis: usize) -> Self {
        if axis == 1 {
            Self {
                count: rows,
                len: cols,
                stride: 1,
                rows,
                cols,
                axis,
            }
        } else {
            Self {
                count: cols,
                len: rows,
                stride: cols,
                rows,
                cols,
                axis,
            }
        }
    }

    #[inline]
    pub fn start(&self, s: usize) -> usize {
        if self.axis == 1 {
            s * self.cols
        } else {
            s
        }
    }

    #[inline]
    pub fn index(&self, s: usize, i: usize) -> usize {
        self.start(s) + i * self.stride
    }

    /// Shape of a reduction along this axis with the reduced dim kept as 1.
    pub fn reduced_shape(&self) -> Vec<usize> {
        if self.axis == 1 {
            vec![self.rows, 1]
        } else {
            vec![1, self.cols]
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub(crate) fn smooth_l1(d: f64, beta: f64) -> f64 {
    let a = d.abs();
    if a < beta {
        0.5 * d * d / beta
    } else {
        a - 0.5 * beta
    }
}

pub(crate) fn smooth_l1_grad(d: f64, beta: f64) -> f64 {
    if d.abs() < beta {
        d / beta
    } else if d > 0.0 {
        1.0
    } else if d < 0.0 {
        -1.0
    } else {
        0.0
    }
}
