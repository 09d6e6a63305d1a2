//! Row-oriented dense kernels shared by the autodiff tape and the cached
//! inference path.
//!
//! Every kernel computes each output row from the matching input row only, with
//! a fixed accumulation order. Running a kernel over one row therefore produces
//! the same bits as the corresponding row of a full-matrix call, which is what
//! lets incremental decoding match full recomputation exactly.

/// GPT-2 uses the tanh approximation of GELU.
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// `a[m×k] · b[k×n]`, accumulating over `k` in ascending order.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &b_pj) in out_row.iter_mut().zip(b_row) {
                *o += a_ip * b_pj;
            }
        }
    }
    out
}

/// `grad_a += grad_out[m×n] · bᵀ` where `b` is `[k×n]`.
pub fn matmul_grad_lhs(grad_out: &[f64], b: &[f64], m: usize, k: usize, n: usize, grad_a: &mut [f64]) {
    for i in 0..m {
        let g_row = &grad_out[i * n..(i + 1) * n];
        for p in 0..k {
            let b_row = &b[p * n..(p + 1) * n];
            grad_a[i * k + p] += dot(g_row, b_row);
        }
    }
}

/// Four-lane dot product so the reduction vectorizes.
fn dot(x: &[f64], y: &[f64]) -> f64 {
    let mut lanes = [0.0; 4];
    let split = x.len() / 4 * 4;
    for (xc, yc) in x[..split].chunks_exact(4).zip(y[..split].chunks_exact(4)) {
        for l in 0..4 {
            lanes[l] += xc[l] * yc[l];
        }
    }
    let mut tail = 0.0;
    for (a, b) in x[split..].iter().zip(&y[split..]) {
        tail += a * b;
    }
    (lanes[0] + lanes[1]) + (lanes[2] + lanes[3]) + tail
}

/// `grad_b += aᵀ · grad_out` where `a` is `[m×k]` and `grad_out` is `[m×n]`.
pub fn matmul_grad_rhs(a: &[f64], grad_out: &[f64], m: usize, k: usize, n: usize, grad_b: &mut [f64]) {
    for i in 0..m {
        let g_row = &grad_out[i * n..(i + 1) * n];
        for p in 0..k {
            let a_ip = a[i * k + p];
            if a_ip == 0.0 {
                continue;
            }
            let gb_row = &mut grad_b[p * n..(p + 1) * n];
            for (gb, &g) in gb_row.iter_mut().zip(g_row) {
                *gb += a_ip * g;
            }
        }
    }
}

pub fn transpose(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

/// In-place softmax of one row.
pub fn softmax_row(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Log-softmax of one row, returned as a new vector.
pub fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
    let log_z = max + sum.ln();
    row.iter().map(|v| v - log_z).collect()
}

/// Normalizes one row and applies the affine map; returns `(mean, 1/std)`.
pub fn layer_norm_row(x: &[f64], gain: &[f64], shift: &[f64], eps: f64, out: &mut [f64]) -> (f64, f64) {
    let d = x.len() as f64;
    let mean = x.iter().sum::<f64>() / d;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    let rstd = 1.0 / (var + eps).sqrt();
    for (((o, &v), &g), &s) in out.iter_mut().zip(x).zip(gain).zip(shift) {
        *o = (v - mean) * rstd * g + s;
    }
    (mean, rstd)
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let th = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du
}

/// Adds `bias[n]` to every row of `x[m×n]`.
pub fn add_row_bias(x: &mut [f64], bias: &[f64]) {
    let n = bias.len();
    for row in x.chunks_mut(n) {
        for (v, b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}
