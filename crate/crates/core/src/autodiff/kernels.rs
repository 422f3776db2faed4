//! Shared numeric kernels. Both the tape ops and the inference path call
//! these, so the two routes stay bit-identical.

/// C = A(m×k) · B(k×n), row-major.
pub fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// C = A(m×k) · B(n×k)ᵀ; rows dotted with rows, both contiguous.
pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] = dot(arow, brow);
        }
    }
    out
}

/// C = A(k×m)ᵀ · B(k×n); rank-1 updates keep the inner loop contiguous.
pub fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    // Four independent accumulators so the loop vectorizes without
    // reassociation flags; the split is fixed, so results are reproducible.
    let chunks = a.len() / 4 * 4;
    let mut acc = [0.0f64; 4];
    let mut i = 0;
    while i < chunks {
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
        i += 4;
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    while i < a.len() {
        s += a[i] * b[i];
        i += 1;
    }
    s
}

pub fn transpose(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

/// Softmax along `axis` of a tensor with the given shape, max-subtracted.
pub fn softmax_axis(data: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let lane = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = vec![0.0; data.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * lane * inner + i;
            let mut mx = f64::NEG_INFINITY;
            for l in 0..lane {
                mx = mx.max(data[base + l * inner]);
            }
            let mut sum = 0.0;
            for l in 0..lane {
                let e = (data[base + l * inner] - mx).exp();
                out[base + l * inner] = e;
                sum += e;
            }
            for l in 0..lane {
                out[base + l * inner] /= sum;
            }
        }
    }
    out
}

/// d(softmax)/dx given the softmax output `p` and upstream grad `dy`.
pub fn softmax_backward(p: &[f64], dy: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let lane = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut dx = vec![0.0; p.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * lane * inner + i;
            let mut s = 0.0;
            for l in 0..lane {
                let idx = base + l * inner;
                s += dy[idx] * p[idx];
            }
            for l in 0..lane {
                let idx = base + l * inner;
                dx[idx] = p[idx] * (dy[idx] - s);
            }
        }
    }
    dx
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Row-wise layer norm over the last axis: zero mean, unit variance, affine.
pub fn layer_norm(x: &[f64], gain: &[f64], bias: &[f64], d: usize) -> Vec<f64> {
    let rows = x.len() / d;
    let mut out = vec![0.0; x.len()];
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        let orow = &mut out[r * d..(r + 1) * d];
        for j in 0..d {
            orow[j] = (row[j] - mean) * inv * gain[j] + bias[j];
        }
    }
    out
}

/// Gradients for [`layer_norm`]: returns (dx, dgain, dbias).
pub fn layer_norm_backward(
    x: &[f64],
    gain: &[f64],
    dy: &[f64],
    d: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let rows = x.len() / d;
    let mut dx = vec![0.0; x.len()];
    let mut dgain = vec![0.0; d];
    let mut dbias = vec![0.0; d];
    let df = d as f64;
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let dyr = &dy[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / df;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / df;
        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        let mut sum_g = 0.0; // Σ gain·dy
        let mut sum_gx = 0.0; // Σ gain·dy·x̂
        for j in 0..d {
            let xhat = (row[j] - mean) * inv;
            let g = gain[j] * dyr[j];
            sum_g += g;
            sum_gx += g * xhat;
            dgain[j] += dyr[j] * xhat;
            dbias[j] += dyr[j];
        }
        let dxr = &mut dx[r * d..(r + 1) * d];
        for j in 0..d {
            let xhat = (row[j] - mean) * inv;
            dxr[j] = inv * (gain[j] * dyr[j] - sum_g / df - xhat * sum_gx / df);
        }
    }
    (dx, dgain, dbias)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Smooth tanh-form gelu; smoothness keeps finite differences honest.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_dx(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Per-row log-sum-exp of an m×n matrix.
pub fn log_sum_exp_rows(x: &[f64], n: usize) -> Vec<f64> {
    let m = x.len() / n;
    let mut out = vec![0.0; m];
    for r in 0..m {
        let row = &x[r * n..(r + 1) * n];
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = row.iter().map(|v| (v - mx).exp()).sum();
        out[r] = mx + s.ln();
    }
    out
}
