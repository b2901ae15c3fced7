//! Raw numeric kernels shared by the autodiff tape and the direct (no-tape)
//! evaluator. Keeping a single implementation of each primitive is what makes
//! the relaxed pipeline reduce bit-exactly to the hard pipeline on one-hot
//! inputs: both paths execute the same loops in the same order.

/// out = a @ b, with a: m×k, b: k×n, all row-major.
pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    out.fill(0.0);
    matmul_acc(a, b, m, k, n, out);
}

/// out += a @ b.
pub(crate) fn matmul_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &aip) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += aip * bv;
            }
        }
    }
}

/// out += a @ b^T, with a: m×k, b: n×k, out: m×n.
pub(crate) fn matmul_a_bt_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (j, o) in orow.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (&av, &bv) in arow.iter().zip(brow.iter()) {
                acc += av * bv;
            }
            *o += acc;
        }
    }
}

/// out += a^T @ b, with a: m×k, b: m×n, out: k×n.
pub(crate) fn matmul_at_b_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += av * bv;
            }
        }
    }
}

/// In-place numerically stable softmax of one row (max subtraction).
pub(crate) fn softmax_row(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
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

pub(crate) const LAYER_NORM_EPS: f64 = 1e-5;

/// out = (x - mean) / sqrt(var + eps) * gamma + beta for a single row.
pub(crate) fn layer_norm_row(x: &[f64], gamma: &[f64], beta: &[f64], out: &mut [f64]) {
    let d = x.len() as f64;
    let mean = x.iter().sum::<f64>() / d;
    let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d;
    let inv_std = 1.0 / (var + LAYER_NORM_EPS).sqrt();
    for ((o, &xv), (&g, &b)) in out.iter_mut().zip(x.iter()).zip(gamma.iter().zip(beta.iter())) {
        *o = (xv - mean) * inv_std * g + b;
    }
}

/// Accumulates layer-norm gradients for one row.
pub(crate) fn layer_norm_row_backward(
    x: &[f64],
    gamma: &[f64],
    dy: &[f64],
    dx: &mut [f64],
    dgamma: &mut [f64],
    dbeta: &mut [f64],
) {
    let d = x.len();
    let df = d as f64;
    let mean = x.iter().sum::<f64>() / df;
    let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / df;
    let inv_std = 1.0 / (var + LAYER_NORM_EPS).sqrt();

    let mut dxhat_sum = 0.0;
    let mut dxhat_xhat_sum = 0.0;
    for i in 0..d {
        let xhat = (x[i] - mean) * inv_std;
        let dxhat = dy[i] * gamma[i];
        dgamma[i] += dy[i] * xhat;
        dbeta[i] += dy[i];
        dxhat_sum += dxhat;
        dxhat_xhat_sum += dxhat * xhat;
    }
    for i in 0..d {
        let xhat = (x[i] - mean) * inv_std;
        let dxhat = dy[i] * gamma[i];
        dx[i] += inv_std / df * (df * dxhat - dxhat_sum - xhat * dxhat_xhat_sum);
    }
}

/// Shape descriptor for blocked multi-head attention: `blocks` independent
/// sequences laid out contiguously, each contributing `lq` query rows that
/// attend over `lk` key rows. Query `i` of a block sees keys `j <= lk - lq + i`,
/// which is standard causal masking when `lq == lk` and full visibility of a
/// cache when `lq == 1`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct AttnShape {
    pub blocks: usize,
    pub lq: usize,
    pub lk: usize,
    pub heads: usize,
    pub d: usize,
}

impl AttnShape {
    pub(crate) fn probs_len(&self) -> usize {
        self.blocks * self.heads * self.lq * self.lk
    }
}

/// Multi-head scaled dot-product attention with causal visibility.
/// `probs` receives the post-softmax attention weights (masked entries zero)
/// for reuse in the backward pass.
pub(crate) fn attention_forward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    s: AttnShape,
    out: &mut [f64],
    probs: &mut [f64],
) {
    let dh = s.d / s.heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let offset = s.lk - s.lq;
    out.fill(0.0);
    probs.fill(0.0);
    for blk in 0..s.blocks {
        let qb = &q[blk * s.lq * s.d..(blk + 1) * s.lq * s.d];
        let kb = &k[blk * s.lk * s.d..(blk + 1) * s.lk * s.d];
        let vb = &v[blk * s.lk * s.d..(blk + 1) * s.lk * s.d];
        let ob = &mut out[blk * s.lq * s.d..(blk + 1) * s.lq * s.d];
        for h in 0..s.heads {
            let hc = h * dh;
            for i in 0..s.lq {
                let visible = offset + i + 1;
                let qi = &qb[i * s.d + hc..i * s.d + hc + dh];
                let prow = &mut probs
                    [((blk * s.heads + h) * s.lq + i) * s.lk..((blk * s.heads + h) * s.lq + i + 1) * s.lk];
                for j in 0..visible {
                    let kj = &kb[j * s.d + hc..j * s.d + hc + dh];
                    let mut acc = 0.0;
                    for (&qv, &kv) in qi.iter().zip(kj.iter()) {
                        acc += qv * kv;
                    }
                    prow[j] = acc * scale;
                }
                softmax_row(&mut prow[..visible]);
                let oi = &mut ob[i * s.d + hc..i * s.d + hc + dh];
                for j in 0..visible {
                    let pj = prow[j];
                    let vj = &vb[j * s.d + hc..j * s.d + hc + dh];
                    for (o, &vv) in oi.iter_mut().zip(vj.iter()) {
                        *o += pj * vv;
                    }
                }
            }
        }
    }
}

/// Backward of [`attention_forward`]; accumulates into dq/dk/dv.
pub(crate) fn attention_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    dout: &[f64],
    s: AttnShape,
    dq: &mut [f64],
    dk: &mut [f64],
    dv: &mut [f64],
) {
    let dh = s.d / s.heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let offset = s.lk - s.lq;
    let mut dscores = vec![0.0; s.lk];
    for blk in 0..s.blocks {
        let qb = &q[blk * s.lq * s.d..(blk + 1) * s.lq * s.d];
        let kb = &k[blk * s.lk * s.d..(blk + 1) * s.lk * s.d];
        let vb = &v[blk * s.lk * s.d..(blk + 1) * s.lk * s.d];
        let dob = &dout[blk * s.lq * s.d..(blk + 1) * s.lq * s.d];
        let dqb = &mut dq[blk * s.lq * s.d..(blk + 1) * s.lq * s.d];
        let dkb_lo = blk * s.lk * s.d;
        for h in 0..s.heads {
            let hc = h * dh;
            for i in 0..s.lq {
                let visible = offset + i + 1;
                let doi = &dob[i * s.d + hc..i * s.d + hc + dh];
                let prow = &probs
                    [((blk * s.heads + h) * s.lq + i) * s.lk..((blk * s.heads + h) * s.lq + i + 1) * s.lk];
                // dv and d(probs)
                let mut dp_dot = 0.0;
                for j in 0..visible {
                    let vj = &vb[j * s.d + hc..j * s.d + hc + dh];
                    let dvj = &mut dv[dkb_lo + j * s.d + hc..dkb_lo + j * s.d + hc + dh];
                    let mut dp = 0.0;
                    for ((&dov, &vv), dvv) in doi.iter().zip(vj.iter()).zip(dvj.iter_mut()) {
                        dp += dov * vv;
                        *dvv += prow[j] * dov;
                    }
                    dscores[j] = dp;
                    dp_dot += dp * prow[j];
                }
                // softmax backward, then q/k grads
                let qi = &qb[i * s.d + hc..i * s.d + hc + dh];
                let dqi = &mut dqb[i * s.d + hc..i * s.d + hc + dh];
                for j in 0..visible {
                    let ds = prow[j] * (dscores[j] - dp_dot) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let kj = &kb[j * s.d + hc..j * s.d + hc + dh];
                    let dkj = &mut dk[dkb_lo + j * s.d + hc..dkb_lo + j * s.d + hc + dh];
                    for ((dqv, &kv), (dkv, &qv)) in
                        dqi.iter_mut().zip(kj.iter()).zip(dkj.iter_mut().zip(qi.iter()))
                    {
                        *dqv += ds * kv;
                        *dkv += ds * qv;
                    }
                }
            }
        }
    }
}
