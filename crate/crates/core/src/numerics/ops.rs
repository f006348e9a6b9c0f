//! Forward kernels and their vector-Jacobian products.
//!
//! Every function here is pure. The tape in [`super::tape`] records which
//! kernel produced a node and calls the matching `*_backward` during the
//! reverse sweep.

use crate::error::{shape_err, Error, Result};

use super::tensor::{axpy, dot, Tensor2};

pub const RMS_EPS: f64 = 1e-6;

/// Boolean query×key attention mask. `true` means the key is visible.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttnMask {
    queries: usize,
    keys: usize,
    allowed: Vec<bool>,
}

impl AttnMask {
    pub fn full(queries: usize, keys: usize) -> Self {
        Self { queries, keys, allowed: vec![true; queries * keys] }
    }

    pub fn none(queries: usize, keys: usize) -> Self {
        Self { queries, keys, allowed: vec![false; queries * keys] }
    }

    pub fn from_fn(queries: usize, keys: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut allowed = Vec::with_capacity(queries * keys);
        for q in 0..queries {
            for k in 0..keys {
                allowed.push(f(q, k));
            }
        }
        Self { queries, keys, allowed }
    }

    pub fn from_rows(rows: &[Vec<bool>]) -> Result<Self> {
        let keys = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != keys) {
            return shape_err("ragged mask rows");
        }
        Ok(Self { queries: rows.len(), keys, allowed: rows.concat() })
    }

    pub fn queries(&self) -> usize {
        self.queries
    }

    pub fn keys(&self) -> usize {
        self.keys
    }

    #[inline]
    pub fn allowed(&self, q: usize, k: usize) -> bool {
        self.allowed[q * self.keys + k]
    }

    pub fn set(&mut self, q: usize, k: usize, v: bool) {
        self.allowed[q * self.keys + k] = v;
    }

    pub fn row(&self, q: usize) -> &[bool] {
        &self.allowed[q * self.keys..(q + 1) * self.keys]
    }

    /// Rows `start..start+len` of the mask.
    pub fn slice_queries(&self, start: usize, len: usize) -> AttnMask {
        AttnMask {
            queries: len,
            keys: self.keys,
            allowed: self.allowed[start * self.keys..(start + len) * self.keys].to_vec(),
        }
    }

    pub fn allowed_count(&self) -> usize {
        self.allowed.iter().filter(|&&a| a).count()
    }

    pub fn validate(&self) -> Result<()> {
        for q in 0..self.queries {
            if !self.row(q).iter().any(|&a| a) {
                return Err(Error::EmptyMaskRow(q));
            }
        }
        Ok(())
    }
}

/// Single-head scaled dot-product attention. `mask = None` allows every key.
pub fn attention(q: &Tensor2, k: &Tensor2, v: &Tensor2, mask: Option<&AttnMask>) -> Result<Tensor2> {
    Ok(multi_head_attention(q, k, v, mask, 1)?.0)
}

/// Multi-head attention over column blocks of `q`, `k`, `v`.
///
/// Returns the output and the per-head probability matrices (queries×keys),
/// which the backward pass reuses.
pub fn multi_head_attention(
    q: &Tensor2,
    k: &Tensor2,
    v: &Tensor2,
    mask: Option<&AttnMask>,
    heads: usize,
) -> Result<(Tensor2, Vec<Tensor2>)> {
    let (tq, d) = q.shape();
    let tk = k.rows();
    if k.cols() != d || v.rows() != tk {
        return shape_err(format!(
            "attention q {:?} k {:?} v {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        ));
    }
    if heads == 0 || d % heads != 0 || !v.cols().is_multiple_of(heads) {
        return shape_err(format!("{d} columns do not split into {heads} heads"));
    }
    if let Some(m) = mask {
        if m.queries() != tq || m.keys() != tk {
            return shape_err(format!(
                "mask {}x{} for {tq} queries and {tk} keys",
                m.queries(),
                m.keys()
            ));
        }
        m.validate()?;
    }
    if tk == 0 {
        return Err(Error::EmptyMaskRow(0));
    }
    let dh = d / heads;
    let dv = v.cols() / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = Tensor2::zeros(tq, v.cols());
    let mut probs = Vec::with_capacity(heads);
    let mut scores = vec![0.0; tk];
    for h in 0..heads {
        let mut p = Tensor2::zeros(tq, tk);
        for i in 0..tq {
            let qi = &q.row(i)[h * dh..(h + 1) * dh];
            let mut max = f64::NEG_INFINITY;
            for (j, s) in scores.iter_mut().enumerate() {
                // additive -inf masking
                *s = if mask.is_none_or(|m| m.allowed(i, j)) {
                    dot(qi, &k.row(j)[h * dh..(h + 1) * dh]) * scale
                } else {
                    f64::NEG_INFINITY
                };
                max = max.max(*s);
            }
            let prow = p.row_mut(i);
            let mut z = 0.0;
            for (pj, &s) in prow.iter_mut().zip(&scores) {
                *pj = (s - max).exp();
                z += *pj;
            }
            let orow = &mut out.row_mut(i)[h * dv..(h + 1) * dv];
            for (j, pj) in prow.iter_mut().enumerate() {
                *pj /= z;
                if *pj != 0.0 {
                    axpy(*pj, &v.row(j)[h * dv..(h + 1) * dv], orow);
                }
            }
        }
        probs.push(p);
    }
    Ok((out, probs))
}

/// Gradients of [`multi_head_attention`] with respect to `q`, `k`, `v`.
pub fn multi_head_attention_backward(
    q: &Tensor2,
    k: &Tensor2,
    v: &Tensor2,
    probs: &[Tensor2],
    d_out: &Tensor2,
) -> (Tensor2, Tensor2, Tensor2) {
    let heads = probs.len();
    let (tq, d) = q.shape();
    let tk = k.rows();
    let dh = d / heads;
    let dv = v.cols() / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = Tensor2::zeros(tq, d);
    let mut dk = Tensor2::zeros(tk, d);
    let mut dvt = Tensor2::zeros(tk, v.cols());
    let mut dp = vec![0.0; tk];
    for (h, p) in probs.iter().enumerate() {
        for i in 0..tq {
            let go = &d_out.row(i)[h * dv..(h + 1) * dv];
            let prow = p.row(i);
            let mut acc = 0.0;
            for j in 0..tk {
                if prow[j] == 0.0 {
                    dp[j] = 0.0;
                    continue;
                }
                dp[j] = dot(go, &v.row(j)[h * dv..(h + 1) * dv]);
                acc += dp[j] * prow[j];
                axpy(prow[j], go, &mut dvt.row_mut(j)[h * dv..(h + 1) * dv]);
            }
            let qi = &q.row(i)[h * dh..(h + 1) * dh];
            for j in 0..tk {
                if prow[j] == 0.0 {
                    continue;
                }
                let ds = prow[j] * (dp[j] - acc) * scale;
                axpy(ds, &k.row(j)[h * dh..(h + 1) * dh], &mut dq.row_mut(i)[h * dh..(h + 1) * dh]);
                axpy(ds, qi, &mut dk.row_mut(j)[h * dh..(h + 1) * dh]);
            }
        }
    }
    (dq, dk, dvt)
}

/// Row-wise RMS normalisation. Returns the output and the per-row `1/rms`.
pub fn rms_norm(x: &Tensor2, gain: &[f64]) -> Result<(Tensor2, Vec<f64>)> {
    if gain.len() != x.cols() {
        return shape_err(format!("rms_norm gain {} for {} columns", gain.len(), x.cols()));
    }
    let mut out = x.clone();
    let mut inv = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = out.row_mut(r);
        let ms = row.iter().map(|v| v * v).sum::<f64>() / gain.len() as f64;
        let s = 1.0 / (ms + RMS_EPS).sqrt();
        for (o, g) in row.iter_mut().zip(gain) {
            *o *= s * g;
        }
        inv.push(s);
    }
    Ok((out, inv))
}

pub fn rms_norm_backward(x: &Tensor2, gain: &[f64], inv: &[f64], dy: &Tensor2) -> (Tensor2, Vec<f64>) {
    let d = x.cols();
    let mut dx = Tensor2::zeros(x.rows(), d);
    let mut dg = vec![0.0; d];
    for r in 0..x.rows() {
        let xr = x.row(r);
        let gr = dy.row(r);
        let s = inv[r];
        let mut proj = 0.0;
        for j in 0..d {
            proj += gr[j] * gain[j] * xr[j];
            dg[j] += gr[j] * xr[j] * s;
        }
        let c = s * s * s * proj / d as f64;
        let out = dx.row_mut(r);
        for j in 0..d {
            out[j] = s * gr[j] * gain[j] - c * xr[j];
        }
    }
    (dx, dg)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh-approximated GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Rotary embedding over column pairs inside each head; row `r` is rotated by
/// `positions[r] * base^(-2i/head_dim)`. `sign = -1` applies the inverse.
pub fn rope(x: &Tensor2, positions: &[f64], heads: usize, base: f64, sign: f64) -> Result<Tensor2> {
    if positions.len() != x.rows() {
        return shape_err(format!("rope: {} positions for {} rows", positions.len(), x.rows()));
    }
    let d = x.cols();
    if heads == 0 || !d.is_multiple_of(heads) || !(d / heads).is_multiple_of(2) {
        return shape_err(format!("rope needs an even head dim ({d} cols, {heads} heads)"));
    }
    let dh = d / heads;
    let freqs: Vec<f64> = (0..dh / 2).map(|i| base.powf(-2.0 * i as f64 / dh as f64)).collect();
    let mut out = x.clone();
    for (r, &p) in positions.iter().enumerate() {
        if p == 0.0 {
            continue;
        }
        let row = out.row_mut(r);
        for h in 0..heads {
            for (i, f) in freqs.iter().enumerate() {
                let (s, c) = (sign * p * f).sin_cos();
                let a = h * dh + 2 * i;
                let (x0, x1) = (row[a], row[a + 1]);
                row[a] = x0 * c - x1 * s;
                row[a + 1] = x0 * s + x1 * c;
            }
        }
    }
    Ok(out)
}

/// Numerically stable log-softmax of one row.
pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

/// Mean next-token cross entropy; returns the loss and softmax probabilities.
pub fn cross_entropy(logits: &Tensor2, targets: &[usize]) -> Result<(f64, Tensor2)> {
    if targets.len() != logits.rows() {
        return shape_err(format!("{} targets for {} logit rows", targets.len(), logits.rows()));
    }
    let mut probs = Tensor2::zeros(logits.rows(), logits.cols());
    let mut loss = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        if t >= logits.cols() {
            return Err(Error::Invalid(format!("target id {t} outside vocab {}", logits.cols())));
        }
        let lp = log_softmax(logits.row(r));
        loss -= lp[t];
        for (p, l) in probs.row_mut(r).iter_mut().zip(&lp) {
            *p = l.exp();
        }
    }
    Ok((loss / targets.len().max(1) as f64, probs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dense_attention_oracle(q: &Tensor2, k: &Tensor2, v: &Tensor2, mask: &AttnMask) -> Tensor2 {
        let d = q.cols() as f64;
        let mut out = Tensor2::zeros(q.rows(), v.cols());
        for i in 0..q.rows() {
            let scores: Vec<f64> = (0..k.rows())
                .map(|j| {
                    let s: f64 = q.row(i).iter().zip(k.row(j)).map(|(a, b)| a * b).sum();
                    s / d.sqrt() + if mask.allowed(i, j) { 0.0 } else { f64::NEG_INFINITY }
                })
                .collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for j in 0..k.rows() {
                for c in 0..v.cols() {
                    out.set(i, c, out.get(i, c) + e[j] / z * v.get(j, c));
                }
            }
        }
        out
    }

    #[test]
    fn single_key_returns_value_row() {
        let q = Tensor2::row_vector(&[0.3, -1.2]);
        let k = Tensor2::row_vector(&[2.0, 5.0]);
        let v = Tensor2::row_vector(&[7.0, -3.5]);
        assert_eq!(attention(&q, &k, &v, None).unwrap(), v);
    }

    #[test]
    fn identical_keys_average_values() {
        let q = Tensor2::row_vector(&[1.0, 2.0]);
        let k = Tensor2::from_rows(&[vec![0.5, 0.5], vec![0.5, 0.5]]).unwrap();
        let v = Tensor2::from_rows(&[vec![1.0, 3.0], vec![5.0, -1.0]]).unwrap();
        let out = attention(&q, &k, &v, None).unwrap();
        assert!(out.max_abs_diff(&Tensor2::row_vector(&[3.0, 1.0])) < 1e-15);
    }

    #[test]
    fn random_masked_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let q = Tensor2::randn(4, 4, 1.0, &mut rng);
            let k = Tensor2::randn(4, 4, 1.0, &mut rng);
            let v = Tensor2::randn(4, 4, 1.0, &mut rng);
            let mask = AttnMask::from_fn(4, 4, |i, j| j <= i || (i + j) % 3 == 0);
            let got = attention(&q, &k, &v, Some(&mask)).unwrap();
            let want = dense_attention_oracle(&q, &k, &v, &mask);
            assert!(got.max_abs_diff(&want) < 1e-12);
        }
    }

    #[test]
    fn masked_keys_get_zero_weight() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = Tensor2::randn(3, 4, 1.0, &mut rng);
        let k = Tensor2::randn(5, 4, 1.0, &mut rng);
        let v = Tensor2::randn(5, 4, 1.0, &mut rng);
        let mask = AttnMask::from_fn(3, 5, |i, j| j <= i);
        let (_, probs) = multi_head_attention(&q, &k, &v, Some(&mask), 2).unwrap();
        for p in &probs {
            for i in 0..3 {
                for j in 0..5 {
                    if !mask.allowed(i, j) {
                        assert_eq!(p.get(i, j), 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn all_allowed_mask_equals_no_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = Tensor2::randn(5, 8, 1.0, &mut rng);
        let k = Tensor2::randn(6, 8, 1.0, &mut rng);
        let v = Tensor2::randn(6, 8, 1.0, &mut rng);
        let a = multi_head_attention(&q, &k, &v, None, 2).unwrap().0;
        let b = multi_head_attention(&q, &k, &v, Some(&AttnMask::full(5, 6)), 2).unwrap().0;
        assert_eq!(a, b);
    }

    #[test]
    fn attention_errors() {
        let q = Tensor2::zeros(2, 4);
        let k = Tensor2::zeros(3, 4);
        assert!(attention(&q, &k, &Tensor2::zeros(2, 4), None).is_err());
        assert!(attention(&q, &Tensor2::zeros(3, 3), &Tensor2::zeros(3, 4), None).is_err());
        let mut mask = AttnMask::full(2, 3);
        for j in 0..3 {
            mask.set(1, j, false);
        }
        assert!(matches!(
            attention(&q, &k, &Tensor2::zeros(3, 4), Some(&mask)),
            Err(Error::EmptyMaskRow(1))
        ));
    }

    #[test]
    fn rms_norm_cases() {
        let ones = Tensor2::filled(1, 6, 1.0);
        let (y, _) = rms_norm(&ones, &[1.0; 6]).unwrap();
        assert!(y.max_abs_diff(&ones) < 1e-6);

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor2::randn(3, 5, 2.0, &mut rng);
        let g: Vec<f64> = (0..5).map(|i| 0.5 + i as f64).collect();
        let (y1, _) = rms_norm(&x, &g).unwrap();
        let (y2, _) = rms_norm(&x.scale(37.0), &g).unwrap();
        // equal up to the epsilon inside the square root
        assert!(y1.max_abs_diff(&y2) < 1e-6);

        for r in 0..3 {
            let row = x.row(r);
            let ms: f64 = row.iter().map(|v| v * v).sum::<f64>() / 5.0;
            for c in 0..5 {
                let want = row[c] / (ms + 1e-6).sqrt() * g[c];
                assert!((y1.get(r, c) - want).abs() < 1e-14);
            }
        }
        assert!(rms_norm(&x, &[1.0; 4]).is_err());
    }

    #[test]
    fn rope_inverse_and_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor2::randn(3, 8, 1.0, &mut rng);
        let pos = [0.0, 1.0, 5.0];
        let y = rope(&x, &pos, 2, 10.0, 1.0).unwrap();
        let back = rope(&y, &pos, 2, 10.0, -1.0).unwrap();
        assert!(back.max_abs_diff(&x) < 1e-12);
        assert_eq!(y.row(0), x.row(0));
        for r in 0..3 {
            let n0: f64 = x.row(r).iter().map(|v| v * v).sum();
            let n1: f64 = y.row(r).iter().map(|v| v * v).sum();
            assert!((n0 - n1).abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_logits_cross_entropy_is_log_vocab() {
        let logits = Tensor2::zeros(3, 32);
        let (loss, _) = cross_entropy(&logits, &[0, 5, 31]).unwrap();
        assert!((loss - 32f64.ln()).abs() < 1e-12);
        assert!((loss - 3.4657).abs() < 1e-4);
        assert!(cross_entropy(&logits, &[0, 5, 32]).is_err());
    }

    #[test]
    fn confident_logits_cross_entropy_vanishes() {
        let mut logits = Tensor2::zeros(2, 8);
        logits.set(0, 3, 60.0);
        logits.set(1, 1, 60.0);
        let (loss, _) = cross_entropy(&logits, &[3, 1]).unwrap();
        assert!(loss < 1e-20);
    }

    #[test]
    fn cross_entropy_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let logits = Tensor2::randn(4, 6, 2.0, &mut rng);
        let targets = [1usize, 0, 5, 2];
        let mut want = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let z: f64 = logits.row(r).iter().map(|v| v.exp()).sum();
            want += -(logits.get(r, t).exp() / z).ln();
        }
        want /= 4.0;
        let (got, _) = cross_entropy(&logits, &targets).unwrap();
        assert!((got - want).abs() < 1e-12);
    }
}
