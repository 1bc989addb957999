//! Row-wise compute kernels shared by the tape and the inference path.
//!
//! Every kernel computes an output row from its input row with a fixed operation
//! order that does not depend on how many rows are in flight. Incremental decoding
//! relies on this to reproduce full-sequence results bit for bit.

/// `a (n x k) . b (k x m)`.
pub fn matmul(a: &[f32], n: usize, k: usize, b: &[f32], m: usize) -> Vec<f32> {
    debug_assert_eq!(a.len(), n * k);
    debug_assert_eq!(b.len(), k * m);
    let mut out = vec![0.0f32; n * m];
    for i in 0..n {
        let row = &mut out[i * m..(i + 1) * m];
        let a_row = &a[i * k..(i + 1) * k];
        for (l, &a_il) in a_row.iter().enumerate() {
            let b_row = &b[l * m..(l + 1) * m];
            for (o, &b_lj) in row.iter_mut().zip(b_row) {
                *o += a_il * b_lj;
            }
        }
    }
    out
}

/// `a (n x k) . b^T` where `b` is `m x k`.
pub fn matmul_nt(a: &[f32], n: usize, k: usize, b: &[f32], m: usize) -> Vec<f32> {
    debug_assert_eq!(a.len(), n * k);
    debug_assert_eq!(b.len(), m * k);
    let mut out = vec![0.0f32; n * m];
    for i in 0..n {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..m {
            out[i * m + j] = dot(a_row, &b[j * k..(j + 1) * k]);
        }
    }
    out
}

/// `a^T . b` where `a` is `r x n` and `b` is `r x m`; sums over rows in order.
pub fn matmul_tn(a: &[f32], r: usize, n: usize, b: &[f32], m: usize) -> Vec<f32> {
    debug_assert_eq!(a.len(), r * n);
    debug_assert_eq!(b.len(), r * m);
    let mut out = vec![0.0f32; n * m];
    for row in 0..r {
        let a_row = &a[row * n..(row + 1) * n];
        let b_row = &b[row * m..(row + 1) * m];
        for (i, &a_ri) in a_row.iter().enumerate() {
            let o = &mut out[i * m..(i + 1) * m];
            for (oj, &b_rj) in o.iter_mut().zip(b_row) {
                *oj += a_ri * b_rj;
            }
        }
    }
    out
}

#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).fold(0.0f32, |acc, (x, y)| acc + x * y)
}

pub fn add_row_bias(x: &mut [f32], cols: usize, bias: &[f32]) {
    for row in x.chunks_mut(cols) {
        for (v, b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

/// Column sums over rows, in row order.
pub fn column_sums(x: &[f32], cols: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; cols];
    for row in x.chunks(cols) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    out
}

const GELU_C: f32 = 0.797_884_6; // sqrt(2 / pi)
const GELU_A: f32 = 0.044_715;

/// tanh approximation of GELU.
pub fn gelu(x: f32) -> f32 {
    let inner = GELU_C * (x + GELU_A * x * x * x);
    0.5 * x * (1.0 + inner.tanh())
}

pub fn gelu_grad(x: f32) -> f32 {
    let inner = GELU_C * (x + GELU_A * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Normalizes each row; returns `(y, mean, rstd)`.
pub fn layer_norm(x: &[f32], cols: usize, gamma: &[f32], beta: &[f32], eps: f32) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let rows = x.len().checked_div(cols).unwrap_or(0);
    let mut y = vec![0.0f32; x.len()];
    let mut means = Vec::with_capacity(rows);
    let mut rstds = Vec::with_capacity(rows);
    let inv_n = 1.0 / cols as f32;
    for (r, row) in x.chunks(cols).enumerate() {
        let mean = row.iter().fold(0.0f32, |a, v| a + v) * inv_n;
        let var = row.iter().fold(0.0f32, |a, v| a + (v - mean) * (v - mean)) * inv_n;
        let rstd = 1.0 / (var + eps).sqrt();
        let out = &mut y[r * cols..(r + 1) * cols];
        for c in 0..cols {
            out[c] = (row[c] - mean) * rstd * gamma[c] + beta[c];
        }
        means.push(mean);
        rstds.push(rstd);
    }
    (y, means, rstds)
}

pub fn softmax_row(row: &[f32], out: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

pub fn log_softmax_row(row: &[f32], out: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let sum = row.iter().fold(0.0f32, |acc, &v| acc + (v - max).exp());
    let log_z = max + sum.ln();
    for (o, &v) in out.iter_mut().zip(row) {
        *o = v - log_z;
    }
}

/// Geometry of a multi-head scaled dot-product attention call.
///
/// Queries are `batch * q_len` rows and keys/values `batch * k_len` rows, all
/// `heads * head_dim` wide. Query row `i` of sentence `b` sits at absolute
/// position `q_offset + i` and attends to keys `0..key_lens[b]`, further limited
/// to positions `<= q_offset + i` when `causal`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionSpec {
    pub batch: usize,
    pub q_len: usize,
    pub k_len: usize,
    pub heads: usize,
    pub key_lens: Vec<usize>,
    pub causal: bool,
    pub q_offset: usize,
}

impl AttentionSpec {
    fn key_limit(&self, b: usize, i: usize) -> usize {
        let mut limit = self.key_lens[b].min(self.k_len);
        if self.causal {
            limit = limit.min(self.q_offset + i + 1);
        }
        limit
    }

    fn probs_index(&self, b: usize, h: usize, i: usize) -> usize {
        ((b * self.heads + h) * self.q_len + i) * self.k_len
    }
}

/// Returns `(output, probabilities)`; probabilities are laid out as
/// `batch x heads x q_len x k_len` with zeros outside the attended range.
pub fn attention_forward(q: &[f32], k: &[f32], v: &[f32], dim: usize, spec: &AttentionSpec) -> (Vec<f32>, Vec<f32>) {
    let head_dim = dim / spec.heads;
    let scale = 1.0 / (head_dim as f32).sqrt();
    let mut out = vec![0.0f32; spec.batch * spec.q_len * dim];
    let mut probs = vec![0.0f32; spec.batch * spec.heads * spec.q_len * spec.k_len];
    let mut scores = vec![0.0f32; spec.k_len];
    for b in 0..spec.batch {
        for i in 0..spec.q_len {
            let limit = spec.key_limit(b, i);
            let q_row = &q[(b * spec.q_len + i) * dim..(b * spec.q_len + i + 1) * dim];
            for h in 0..spec.heads {
                if limit == 0 {
                    continue;
                }
                let cols = h * head_dim..(h + 1) * head_dim;
                let qh = &q_row[cols.clone()];
                for (j, s) in scores[..limit].iter_mut().enumerate() {
                    let k_row = &k[(b * spec.k_len + j) * dim..(b * spec.k_len + j + 1) * dim];
                    *s = dot(qh, &k_row[cols.clone()]) * scale;
                }
                let p = &mut probs[spec.probs_index(b, h, i)..spec.probs_index(b, h, i) + spec.k_len];
                softmax_row(&scores[..limit], &mut p[..limit]);
                let o = &mut out
                    [(b * spec.q_len + i) * dim + h * head_dim..(b * spec.q_len + i) * dim + (h + 1) * head_dim];
                for (j, &pj) in p[..limit].iter().enumerate() {
                    let v_row = &v[(b * spec.k_len + j) * dim..(b * spec.k_len + j + 1) * dim];
                    for (oc, &vc) in o.iter_mut().zip(&v_row[cols.clone()]) {
                        *oc += pj * vc;
                    }
                }
            }
        }
    }
    (out, probs)
}

/// Gradients `(dq, dk, dv)` of [`attention_forward`].
pub fn attention_backward(
    q: &[f32],
    k: &[f32],
    v: &[f32],
    probs: &[f32],
    d_out: &[f32],
    dim: usize,
    spec: &AttentionSpec,
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let head_dim = dim / spec.heads;
    let scale = 1.0 / (head_dim as f32).sqrt();
    let mut dq = vec![0.0f32; q.len()];
    let mut dk = vec![0.0f32; k.len()];
    let mut dv = vec![0.0f32; v.len()];
    let mut dp = vec![0.0f32; spec.k_len];
    for b in 0..spec.batch {
        for i in 0..spec.q_len {
            let limit = spec.key_limit(b, i);
            if limit == 0 {
                continue;
            }
            let q_base = (b * spec.q_len + i) * dim;
            for h in 0..spec.heads {
                let c0 = h * head_dim;
                let p = &probs[spec.probs_index(b, h, i)..spec.probs_index(b, h, i) + limit];
                let go = &d_out[q_base + c0..q_base + c0 + head_dim];
                for j in 0..limit {
                    let vb = (b * spec.k_len + j) * dim + c0;
                    dp[j] = dot(go, &v[vb..vb + head_dim]);
                    for c in 0..head_dim {
                        dv[vb + c] += p[j] * go[c];
                    }
                }
                let weighted = p.iter().zip(&dp[..limit]).fold(0.0f32, |a, (pj, dj)| a + pj * dj);
                for j in 0..limit {
                    let ds = p[j] * (dp[j] - weighted) * scale;
                    let kb = (b * spec.k_len + j) * dim + c0;
                    for c in 0..head_dim {
                        dq[q_base + c0 + c] += ds * k[kb + c];
                        dk[kb + c] += ds * q[q_base + c0 + c];
                    }
                }
            }
        }
    }
    (dq, dk, dv)
}

/// Sinusoidal position encodings for absolute positions `positions`, `dim` wide.
///
/// Column `2i` holds `sin(pos / 10000^(2i/dim))`, column `2i + 1` the cosine.
pub fn sinusoidal_positions(positions: impl IntoIterator<Item = usize>, dim: usize) -> Vec<f32> {
    let mut out = Vec::new();
    for pos in positions {
        for c in 0..dim {
            let i = (c / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * i / dim as f64);
            out.push(if c % 2 == 0 { angle.sin() } else { angle.cos() } as f32);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        // [1 2; 3 4] . [5; 6]
        let out = matmul(&[1.0, 2.0, 3.0, 4.0], 2, 2, &[5.0, 6.0], 1);
        assert_eq!(out, vec![17.0, 39.0]);
        let nt = matmul_nt(&[1.0, 2.0, 3.0, 4.0], 2, 2, &[5.0, 6.0], 1);
        assert_eq!(nt, vec![17.0, 39.0]);
        let tn = matmul_tn(&[1.0, 2.0, 3.0, 4.0], 2, 2, &[5.0, 6.0], 1);
        assert_eq!(tn, vec![1.0 * 5.0 + 3.0 * 6.0, 2.0 * 5.0 + 4.0 * 6.0]);
    }

    #[test]
    fn matmul_rows_are_independent_of_batch() {
        let a: Vec<f32> = (0..12).map(|i| (i as f32 * 0.37).sin()).collect();
        let b: Vec<f32> = (0..12).map(|i| (i as f32 * 0.11).cos()).collect();
        let full = matmul(&a, 3, 4, &b, 3);
        let last = matmul(&a[8..], 1, 4, &b, 3);
        assert_eq!(&full[6..], &last[..]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let row = [0.3f32, -2.0, 5.0, 1.0];
        let mut out = [0.0f32; 4];
        softmax_row(&row, &mut out);
        let s: f32 = out.iter().sum();
        assert!((s - 1.0).abs() < 1e-6);
        let mut log = [0.0f32; 4];
        log_softmax_row(&row, &mut log);
        for (p, l) in out.iter().zip(&log) {
            assert!((p.ln() - l).abs() < 1e-5);
        }
    }

    #[test]
    fn attention_probabilities_are_normalized() {
        let spec = AttentionSpec {
            batch: 2,
            q_len: 3,
            k_len: 3,
            heads: 2,
            key_lens: vec![3, 2],
            causal: true,
            q_offset: 0,
        };
        let dim = 4;
        let q: Vec<f32> = (0..24).map(|i| (i as f32 * 0.7).sin()).collect();
        let k: Vec<f32> = (0..24).map(|i| (i as f32 * 0.3).cos()).collect();
        let (_, probs) = attention_forward(&q, &k, &q, dim, &spec);
        for row in probs.chunks(3) {
            let s: f32 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-6, "{row:?}");
        }
        // sentence 1 has 2 keys: no query ever looks at key 2
        for h in 0..2 {
            for i in 0..3 {
                assert_eq!(probs[spec.probs_index(1, h, i) + 2], 0.0);
            }
        }
    }

    #[test]
    fn positions_start_with_sin_cos() {
        let p = sinusoidal_positions([0, 1], 4);
        assert_eq!(&p[..4], &[0.0, 1.0, 0.0, 1.0]);
        assert!((p[4] - 1f32.sin()).abs() < 1e-7);
    }
}
