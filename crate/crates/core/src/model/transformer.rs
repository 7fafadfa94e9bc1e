//! Pre-norm decoder stack with rotary attention and exact reverse-mode
//! gradients.
//!
//! Every row of every intermediate depends only on rows at or before it, and
//! each row is computed with the same summation order whatever the sequence
//! length, so logits at position `t` are bit-identical under any change to
//! tokens after `t`.

use std::ops::Range;

use super::{Batch, ModelError, TinyModelParams};
use crate::rope::{rotate_in_place, AngularSpectrum};

const NORM_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_K: f64 = 0.044_715;

#[inline]
fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let j = 4 * i;
        acc[0] += a[j] * b[j];
        acc[1] += a[j + 1] * b[j + 1];
        acc[2] += a[j + 2] * b[j + 2];
        acc[3] += a[j + 3] * b[j + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for j in 4 * chunks..a.len() {
        s += a[j] * b[j];
    }
    s
}

#[inline]
fn axpy(y: &mut [f64], alpha: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `a[rows x inner] * w[inner x cols]`.
fn matmul(a: &[f64], w: &[f64], rows: usize, inner: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        let orow = &mut out[i * cols..(i + 1) * cols];
        for k in 0..inner {
            axpy(orow, a[i * inner + k], &w[k * cols..(k + 1) * cols]);
        }
    }
    out
}

/// `d[rows x cols] * w[inner x cols]^T`.
fn matmul_bt(d: &[f64], w: &[f64], rows: usize, inner: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * inner];
    for i in 0..rows {
        let drow = &d[i * cols..(i + 1) * cols];
        for k in 0..inner {
            out[i * inner + k] = dot(drow, &w[k * cols..(k + 1) * cols]);
        }
    }
    out
}

/// `dw[inner x cols] += a[rows x inner]^T * d[rows x cols]`.
fn accumulate_at_b(dw: &mut [f64], a: &[f64], d: &[f64], rows: usize, inner: usize, cols: usize) {
    for i in 0..rows {
        let drow = &d[i * cols..(i + 1) * cols];
        for k in 0..inner {
            let aik = a[i * inner + k];
            if aik != 0.0 {
                axpy(&mut dw[k * cols..(k + 1) * cols], aik, drow);
            }
        }
    }
}

fn rms_norm(x: &[f64], gain: &[f64], rows: usize, c: usize) -> (Vec<f64>, Vec<f64>) {
    let mut out = vec![0.0; rows * c];
    let mut rms = vec![0.0; rows];
    for i in 0..rows {
        let xr = &x[i * c..(i + 1) * c];
        let r = (dot(xr, xr) / c as f64 + NORM_EPS).sqrt();
        rms[i] = r;
        for ((o, xv), g) in out[i * c..(i + 1) * c].iter_mut().zip(xr).zip(gain) {
            *o = g * xv / r;
        }
    }
    (out, rms)
}

/// Adds the input gradient of an RMS norm to `dx` and the gain gradient to `dgain`.
fn rms_norm_backward(
    dy: &[f64],
    x: &[f64],
    rms: &[f64],
    gain: &[f64],
    rows: usize,
    c: usize,
    dx: &mut [f64],
    dgain: &mut [f64],
) {
    let mut gdy = vec![0.0; c];
    for i in 0..rows {
        let xr = &x[i * c..(i + 1) * c];
        let dyr = &dy[i * c..(i + 1) * c];
        let r = rms[i];
        for k in 0..c {
            dgain[k] += dyr[k] * xr[k] / r;
            gdy[k] = gain[k] * dyr[k];
        }
        let proj = dot(&gdy, xr) / (c as f64 * r * r * r);
        for k in 0..c {
            dx[i * c + k] += gdy[k] / r - xr[k] * proj;
        }
    }
}

struct LayerCache {
    x_in: Vec<f64>,
    rms1: Vec<f64>,
    n1: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// Per head, row-major `T x T`; only the causal lower triangle is written.
    probs: Vec<Vec<f64>>,
    att: Vec<f64>,
    x_mid: Vec<f64>,
    rms2: Vec<f64>,
    n2: Vec<f64>,
    hpre: Vec<f64>,
    hact: Vec<f64>,
}

struct ForwardCache {
    layers: Vec<LayerCache>,
    x_final: Vec<f64>,
    rms_f: Vec<f64>,
    nf: Vec<f64>,
}

pub(crate) fn validate_sequence(
    params: &TinyModelParams,
    tokens: &[u32],
    positions: &[f64],
) -> Result<(), ModelError> {
    if tokens.is_empty() {
        return Err(ModelError::EmptySequence);
    }
    if tokens.len() != positions.len() {
        return Err(ModelError::ShapeMismatch(format!(
            "{} tokens but {} positions",
            tokens.len(),
            positions.len()
        )));
    }
    let vocab = params.config.vocab_size;
    if let Some(&token) = tokens.iter().find(|&&t| t as usize >= vocab) {
        return Err(ModelError::TokenOutOfRange { token, vocab });
    }
    if let Some(i) = positions.iter().position(|p| !p.is_finite()) {
        return Err(ModelError::NonIncreasingPositions { index: i });
    }
    if let Some(i) = positions.windows(2).position(|w| w[0] >= w[1]) {
        return Err(ModelError::NonIncreasingPositions { index: i + 1 });
    }
    Ok(())
}

fn check_finite(values: &[f64], layer: impl FnOnce() -> String) -> Result<(), ModelError> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(ModelError::NumericOverflow { layer: layer() })
    }
}

/// Runs the stack and returns logits for the rows in `logit_rows`
/// (`logit_rows.len() x V`, row-major).
fn forward_impl(
    params: &TinyModelParams,
    spectrum: &AngularSpectrum,
    tokens: &[u32],
    positions: &[f64],
    logit_rows: Range<usize>,
    mut cache: Option<&mut ForwardCache>,
) -> Result<Vec<f64>, ModelError> {
    // Without a cache nothing after the last requested row is needed, and
    // causality makes dropping it exact.
    let (tokens, positions) = match cache {
        None => (&tokens[..logit_rows.end], &positions[..logit_rows.end]),
        Some(_) => (tokens, positions),
    };
    let cfg = &params.config;
    let (t_len, c, nh, hd, f, v) = (
        tokens.len(),
        cfg.model_dim,
        cfg.num_heads,
        cfg.head_dim(),
        cfg.mlp_dim(),
        cfg.vocab_size,
    );
    let lay = &params.layout;
    let w = &params.data;
    let freqs = spectrum.freqs();
    let scale = 1.0 / (hd as f64).sqrt();

    let mut x = vec![0.0; t_len * c];
    for (row, &tok) in x.chunks_exact_mut(c).zip(tokens) {
        let e = lay.embed + tok as usize * c;
        row.copy_from_slice(&w[e..e + c]);
    }

    for (li, lo) in lay.layers.iter().enumerate() {
        let (n1, rms1) = rms_norm(&x, &w[lo.attn_norm..lo.attn_norm + c], t_len, c);
        let mut q = matmul(&n1, &w[lo.wq..lo.wq + c * c], t_len, c, c);
        let mut k = matmul(&n1, &w[lo.wk..lo.wk + c * c], t_len, c, c);
        let vv = matmul(&n1, &w[lo.wv..lo.wv + c * c], t_len, c, c);
        for (i, &p) in positions.iter().enumerate() {
            for h in 0..nh {
                let span = i * c + h * hd..i * c + (h + 1) * hd;
                rotate_in_place(&mut q[span.clone()], p, freqs);
                rotate_in_place(&mut k[span], p, freqs);
            }
        }
        let mut att = vec![0.0; t_len * c];
        let mut probs: Vec<Vec<f64>> = Vec::new();
        let keep = cache.is_some();
        for h in 0..nh {
            let mut ph = if keep { vec![0.0; t_len * t_len] } else { Vec::new() };
            let mut row = vec![0.0; t_len];
            for i in 0..t_len {
                let qi = &q[i * c + h * hd..i * c + (h + 1) * hd];
                let mut max = f64::NEG_INFINITY;
                for j in 0..=i {
                    let s = dot(qi, &k[j * c + h * hd..j * c + (h + 1) * hd]) * scale;
                    row[j] = s;
                    max = max.max(s);
                }
                let mut sum = 0.0;
                for r in &mut row[..=i] {
                    *r = (*r - max).exp();
                    sum += *r;
                }
                let inv = 1.0 / sum;
                let out = &mut att[i * c + h * hd..i * c + (h + 1) * hd];
                for j in 0..=i {
                    let pj = row[j] * inv;
                    row[j] = pj;
                    axpy(out, pj, &vv[j * c + h * hd..j * c + (h + 1) * hd]);
                }
                if keep {
                    ph[i * t_len..i * t_len + i + 1].copy_from_slice(&row[..=i]);
                }
            }
            if keep {
                probs.push(ph);
            }
        }
        let proj = matmul(&att, &w[lo.wo..lo.wo + c * c], t_len, c, c);
        let x_in = std::mem::take(&mut x);
        let x_mid: Vec<f64> = x_in.iter().zip(&proj).map(|(a, b)| a + b).collect();
        let (n2, rms2) = rms_norm(&x_mid, &w[lo.mlp_norm..lo.mlp_norm + c], t_len, c);
        let hpre = matmul(&n2, &w[lo.w_in..lo.w_in + c * f], t_len, c, f);
        let hact: Vec<f64> = hpre.iter().map(|&u| gelu(u)).collect();
        let mlp = matmul(&hact, &w[lo.w_out..lo.w_out + f * c], t_len, f, c);
        x = x_mid.iter().zip(&mlp).map(|(a, b)| a + b).collect();
        check_finite(&x, || format!("layers.{li}"))?;
        if let Some(cache) = cache.as_deref_mut() {
            cache.layers.push(LayerCache {
                x_in,
                rms1,
                n1,
                q,
                k,
                v: vv,
                probs,
                att,
                x_mid,
                rms2,
                n2,
                hpre,
                hact,
            });
        }
    }

    let (nf, rms_f) = rms_norm(&x, &w[lay.final_norm..lay.final_norm + c], t_len, c);
    let mut logits = vec![0.0; logit_rows.len() * v];
    for (out, i) in logits.chunks_exact_mut(v).zip(logit_rows.clone()) {
        let nrow = &nf[i * c..(i + 1) * c];
        for (tok, o) in out.iter_mut().enumerate() {
            let hrow = lay.head + tok * c;
            *o = dot(nrow, &w[hrow..hrow + c]);
        }
    }
    check_finite(&logits, || "head".to_string())?;
    if let Some(cache) = cache {
        cache.x_final = x;
        cache.rms_f = rms_f;
        cache.nf = nf;
    }
    Ok(logits)
}

/// Weighted negative log-likelihood with its normalizer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValue {
    /// `sum_l w_l * nll_l`.
    pub sum: f64,
    pub weight_sum: f64,
}

impl LossValue {
    /// `sum / weight_sum`, undefined when every weight is zero.
    pub fn mean(&self) -> Option<f64> {
        (self.weight_sum > 0.0).then(|| self.sum / self.weight_sum)
    }

    pub fn add(&mut self, other: LossValue) {
        self.sum += other.sum;
        self.weight_sum += other.weight_sum;
    }
}

/// Per-row `-log softmax(logits)[target]`.
pub fn token_nll(logits: &[f64], vocab: usize, targets: &[u32]) -> Result<Vec<f64>, ModelError> {
    if logits.len() != targets.len() * vocab {
        return Err(ModelError::ShapeMismatch(format!(
            "{} logits for {} targets of vocab {}",
            logits.len(),
            targets.len(),
            vocab
        )));
    }
    targets
        .iter()
        .zip(logits.chunks_exact(vocab))
        .map(|(&t, row)| {
            if t as usize >= vocab {
                return Err(ModelError::TokenOutOfRange { token: t, vocab });
            }
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
            Ok(lse - row[t as usize])
        })
        .collect()
}

/// `sum_l w_l * nll_l` over rows of `logits` (`targets.len() x vocab`).
pub fn weighted_nll(
    logits: &[f64],
    vocab: usize,
    targets: &[u32],
    weights: &[f64],
) -> Result<LossValue, ModelError> {
    if weights.len() != targets.len() {
        return Err(ModelError::ShapeMismatch(format!(
            "{} weights for {} targets",
            weights.len(),
            targets.len()
        )));
    }
    if let Some(&w) = weights.iter().find(|w| !(**w >= 0.0 && w.is_finite())) {
        return Err(ModelError::InvalidWeight(w));
    }
    let nll = token_nll(logits, vocab, targets)?;
    let mut loss = LossValue { sum: 0.0, weight_sum: 0.0 };
    for (w, l) in weights.iter().zip(&nll) {
        if *w != 0.0 {
            loss.sum += w * l;
        }
        loss.weight_sum += w;
    }
    Ok(loss)
}

impl TinyModelParams {
    pub fn spectrum(&self) -> AngularSpectrum {
        AngularSpectrum::new(self.config.head_dim(), self.config.rotary_base)
            .expect("validated config has a valid spectrum")
    }

    /// Logits for every position of one sequence (`T x V`).
    pub fn forward_sequence(&self, tokens: &[u32], positions: &[f64]) -> Result<Vec<f64>, ModelError> {
        self.logits_for_rows(tokens, positions, 0..tokens.len())
    }

    /// Logits for positions `rows` only; earlier rows are still computed
    /// internally but never projected to the vocabulary.
    pub fn logits_for_rows(
        &self,
        tokens: &[u32],
        positions: &[f64],
        rows: Range<usize>,
    ) -> Result<Vec<f64>, ModelError> {
        validate_sequence(self, tokens, positions)?;
        if rows.end > tokens.len() || rows.start > rows.end {
            return Err(ModelError::ShapeMismatch(format!("rows {rows:?} out of range")));
        }
        forward_impl(self, &self.spectrum(), tokens, positions, rows, None)
    }

    /// Batched forward: `B` sequences of equal length, logits `B x T x V`.
    pub fn forward(&self, tokens: &[Vec<u32>], positions: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, ModelError> {
        if tokens.len() != positions.len() {
            return Err(ModelError::ShapeMismatch("batch sizes differ".into()));
        }
        tokens
            .iter()
            .zip(positions)
            .map(|(t, p)| self.forward_sequence(t, p))
            .collect()
    }

    /// Loss and parameter gradient for one sequence. Targets are `tokens[1..]`
    /// and `weights[l]` applies to the prediction of `tokens[l + 1]`.
    pub fn sequence_gradient(
        &self,
        tokens: &[u32],
        positions: &[f64],
        weights: &[f64],
        grad: &mut [f64],
    ) -> Result<LossValue, ModelError> {
        validate_sequence(self, tokens, positions)?;
        let t_len = tokens.len();
        if weights.len() + 1 != t_len {
            return Err(ModelError::ShapeMismatch(format!(
                "{} weights for a sequence of {} tokens",
                weights.len(),
                t_len
            )));
        }
        if let Some(&w) = weights.iter().find(|w| !(**w >= 0.0 && w.is_finite())) {
            return Err(ModelError::InvalidWeight(w));
        }
        if weights.iter().all(|&w| w == 0.0) {
            return Ok(LossValue { sum: 0.0, weight_sum: 0.0 });
        }
        let spectrum = self.spectrum();
        let mut cache = ForwardCache {
            layers: Vec::with_capacity(self.config.num_layers),
            x_final: Vec::new(),
            rms_f: Vec::new(),
            nf: Vec::new(),
        };
        let rows = t_len - 1;
        let logits = forward_impl(self, &spectrum, tokens, positions, 0..rows, Some(&mut cache))?;
        let vocab = self.config.vocab_size;
        let loss = weighted_nll(&logits, vocab, &tokens[1..], weights)?;

        // dL/dlogits = w * (softmax - onehot)
        let mut dlogits = logits;
        for ((row, &target), &wt) in dlogits.chunks_exact_mut(vocab).zip(&tokens[1..]).zip(weights) {
            if wt == 0.0 {
                row.fill(0.0);
                continue;
            }
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for z in row.iter_mut() {
                *z = (*z - max).exp();
                sum += *z;
            }
            for z in row.iter_mut() {
                *z *= wt / sum;
            }
            row[target as usize] -= wt;
        }
        self.backward_from_logits(&spectrum, tokens, positions, &cache, &dlogits, grad)?;
        Ok(loss)
    }

    fn backward_from_logits(
        &self,
        spectrum: &AngularSpectrum,
        tokens: &[u32],
        positions: &[f64],
        cache: &ForwardCache,
        dlogits: &[f64],
        grad: &mut [f64],
    ) -> Result<(), ModelError> {
        let cfg = &self.config;
        let (t_len, c, nh, hd, f, v) = (
            tokens.len(),
            cfg.model_dim,
            cfg.num_heads,
            cfg.head_dim(),
            cfg.mlp_dim(),
            cfg.vocab_size,
        );
        let rows = dlogits.len() / v;
        let lay = &self.layout;
        let w = &self.data;
        let freqs = spectrum.freqs();
        let scale = 1.0 / (hd as f64).sqrt();

        // output head
        let mut dnf = vec![0.0; t_len * c];
        for i in 0..rows {
            let drow = &dlogits[i * v..(i + 1) * v];
            let dn = &mut dnf[i * c..(i + 1) * c];
            let nrow = &cache.nf[i * c..(i + 1) * c];
            for (tok, &g) in drow.iter().enumerate() {
                if g != 0.0 {
                    let hrow = lay.head + tok * c;
                    axpy(dn, g, &w[hrow..hrow + c]);
                    axpy(&mut grad[hrow..hrow + c], g, nrow);
                }
            }
        }
        let mut dx = vec![0.0; t_len * c];
        {
            let (head_part, gain_part) = (lay.final_norm, lay.final_norm + c);
            let gain = &w[head_part..gain_part];
            rms_norm_backward(
                &dnf,
                &cache.x_final,
                &cache.rms_f,
                gain,
                t_len,
                c,
                &mut dx,
                &mut grad[head_part..gain_part],
            );
        }
        check_finite(&dx, || "final_norm".to_string())?;

        for (li, (lo, lc)) in lay.layers.iter().zip(&cache.layers).enumerate().rev() {
            // MLP block
            let w_out = &w[lo.w_out..lo.w_out + f * c];
            let mut dh = matmul_bt(&dx, w_out, t_len, f, c);
            accumulate_at_b(&mut grad[lo.w_out..lo.w_out + f * c], &lc.hact, &dx, t_len, f, c);
            for (d, &u) in dh.iter_mut().zip(&lc.hpre) {
                *d *= gelu_grad(u);
            }
            let w_in = &w[lo.w_in..lo.w_in + c * f];
            let dn2 = matmul_bt(&dh, w_in, t_len, c, f);
            accumulate_at_b(&mut grad[lo.w_in..lo.w_in + c * f], &lc.n2, &dh, t_len, c, f);
            let mut dx_mid = dx;
            rms_norm_backward(
                &dn2,
                &lc.x_mid,
                &lc.rms2,
                &w[lo.mlp_norm..lo.mlp_norm + c],
                t_len,
                c,
                &mut dx_mid,
                &mut grad[lo.mlp_norm..lo.mlp_norm + c],
            );

            // attention block
            let wo = &w[lo.wo..lo.wo + c * c];
            let datt = matmul_bt(&dx_mid, wo, t_len, c, c);
            accumulate_at_b(&mut grad[lo.wo..lo.wo + c * c], &lc.att, &dx_mid, t_len, c, c);
            let mut dq = vec![0.0; t_len * c];
            let mut dk = vec![0.0; t_len * c];
            let mut dv = vec![0.0; t_len * c];
            let mut dp = vec![0.0; t_len];
            for h in 0..nh {
                let probs = &lc.probs[h];
                let hs = h * hd;
                for i in 0..t_len {
                    let dout = &datt[i * c + hs..i * c + hs + hd];
                    let prow = &probs[i * t_len..i * t_len + i + 1];
                    let mut inner = 0.0;
                    for j in 0..=i {
                        let g = dot(dout, &lc.v[j * c + hs..j * c + hs + hd]);
                        dp[j] = g;
                        inner += prow[j] * g;
                        axpy(&mut dv[j * c + hs..j * c + hs + hd], prow[j], dout);
                    }
                    let qi = &lc.q[i * c + hs..i * c + hs + hd];
                    for j in 0..=i {
                        let ds = prow[j] * (dp[j] - inner) * scale;
                        if ds != 0.0 {
                            axpy(&mut dq[i * c + hs..i * c + hs + hd], ds, &lc.k[j * c + hs..j * c + hs + hd]);
                            axpy(&mut dk[j * c + hs..j * c + hs + hd], ds, qi);
                        }
                    }
                }
            }
            // gradients flow back through the rotation as its transpose
            for (i, &p) in positions.iter().enumerate() {
                for h in 0..nh {
                    let span = i * c + h * hd..i * c + (h + 1) * hd;
                    rotate_in_place(&mut dq[span.clone()], -p, freqs);
                    rotate_in_place(&mut dk[span], -p, freqs);
                }
            }
            let mut dn1 = matmul_bt(&dq, &w[lo.wq..lo.wq + c * c], t_len, c, c);
            for (a, b) in dn1.iter_mut().zip(matmul_bt(&dk, &w[lo.wk..lo.wk + c * c], t_len, c, c)) {
                *a += b;
            }
            for (a, b) in dn1.iter_mut().zip(matmul_bt(&dv, &w[lo.wv..lo.wv + c * c], t_len, c, c)) {
                *a += b;
            }
            accumulate_at_b(&mut grad[lo.wq..lo.wq + c * c], &lc.n1, &dq, t_len, c, c);
            accumulate_at_b(&mut grad[lo.wk..lo.wk + c * c], &lc.n1, &dk, t_len, c, c);
            accumulate_at_b(&mut grad[lo.wv..lo.wv + c * c], &lc.n1, &dv, t_len, c, c);
            let mut dx_in = dx_mid;
            rms_norm_backward(
                &dn1,
                &lc.x_in,
                &lc.rms1,
                &w[lo.attn_norm..lo.attn_norm + c],
                t_len,
                c,
                &mut dx_in,
                &mut grad[lo.attn_norm..lo.attn_norm + c],
            );
            check_finite(&dx_in, || format!("layers.{li}"))?;
            dx = dx_in;
        }

        for (row, &tok) in dx.chunks_exact(c).zip(tokens) {
            let e = lay.embed + tok as usize * c;
            axpy(&mut grad[e..e + c], 1.0, row);
        }
        Ok(())
    }

    /// Weighted loss over a batch and its gradient, summed over rows in order.
    pub fn backward(&self, batch: &Batch) -> Result<(LossValue, Vec<f64>), ModelError> {
        let mut total = self.zeros_like();
        let mut loss = LossValue { sum: 0.0, weight_sum: 0.0 };
        let mut row_grad = self.zeros_like();
        for row in batch.rows() {
            row_grad.fill(0.0);
            let positions = batch.effective_positions(row);
            loss.add(self.sequence_gradient(&row.tokens, &positions, &row.weights, &mut row_grad)?);
            axpy(&mut total, 1.0, &row_grad);
        }
        Ok((loss, total))
    }

    /// Same result as [`Self::backward`], with rows evaluated on the current
    /// rayon pool. Row gradients are reduced in row order, so the output is
    /// bit-identical to the sequential path.
    pub fn backward_parallel(&self, batch: &Batch) -> Result<(LossValue, Vec<f64>), ModelError> {
        use rayon::prelude::*;
        let per_row: Vec<Result<(LossValue, Vec<f64>), ModelError>> = batch
            .rows()
            .par_iter()
            .map(|row| {
                let mut g = self.zeros_like();
                let positions = batch.effective_positions(row);
                let l = self.sequence_gradient(&row.tokens, &positions, &row.weights, &mut g)?;
                Ok((l, g))
            })
            .collect();
        let mut total = self.zeros_like();
        let mut loss = LossValue { sum: 0.0, weight_sum: 0.0 };
        for r in per_row {
            let (l, g) = r?;
            loss.add(l);
            axpy(&mut total, 1.0, &g);
        }
        Ok((loss, total))
    }

    /// Weighted loss of a batch without gradients.
    pub fn batch_loss(&self, batch: &Batch) -> Result<LossValue, ModelError> {
        let mut loss = LossValue { sum: 0.0, weight_sum: 0.0 };
        for row in batch.rows() {
            let positions = batch.effective_positions(row);
            let rows = row.tokens.len() - 1;
            let logits = self.logits_for_rows(&row.tokens, &positions, 0..rows)?;
            loss.add(weighted_nll(&logits, self.config.vocab_size, &row.tokens[1..], &row.weights)?);
        }
        Ok(loss)
    }
}
