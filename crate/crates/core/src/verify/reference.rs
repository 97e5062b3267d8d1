//! A from-scratch standard-transformer forward pass, written against the
//! architecture's mathematical definition rather than the tensor engine: plain
//! nested loops over `Vec<f64>`, with its own softmax, layer norm, GELU, and
//! position-bucket code.  It shares nothing with the engine except the weight
//! values it reads out of a [`Model`], which makes it a meaningful oracle for
//! the degenerate-layout equivalence property: a model whose blocks all have
//! size one must reproduce these logits to floating-point roundoff.

use crate::error::{Error, Result};
use crate::model::{Model, LN_EPS};

/// `a [p,q] * b [q,r]`, row-major, naive triple loop.
fn matmul(a: &[f64], b: &[f64], p: usize, q: usize, r: usize) -> Vec<f64> {
    let mut c = vec![0.0; p * r];
    for i in 0..p {
        for j in 0..r {
            let mut s = 0.0;
            for t in 0..q {
                s += a[i * q + t] * b[t * r + j];
            }
            c[i * r + j] = s;
        }
    }
    c
}

/// Adds a length-`r` bias to every row of `x [p,r]`.
fn add_bias(x: &mut [f64], bias: &[f64], r: usize) {
    for row in x.chunks_exact_mut(r) {
        for (v, b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

fn softmax_row(row: &mut [f64]) {
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

/// Row-wise layer norm with biased (1/H) variance and epsilon under the root.
fn layer_norm(x: &[f64], gain: &[f64], bias: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (xr, or) in x.chunks_exact(cols).zip(out.chunks_exact_mut(cols)) {
        let mean = xr.iter().sum::<f64>() / cols as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        let denom = (var + LN_EPS).sqrt();
        for (j, o) in or.iter_mut().enumerate() {
            *o = (xr[j] - mean) / denom * gain[j] + bias[j];
        }
    }
    out
}

/// Tanh-approximation GELU.
fn gelu(x: &mut [f64]) {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    for v in x.iter_mut() {
        let inner = c * (*v + 0.044715 * *v * *v * *v);
        *v = 0.5 * *v * (1.0 + inner.tanh());
    }
}

/// Bidirectional relative-position bucket for offset `j - i`: half the buckets
/// per sign, exact buckets for small distances, logarithmic sharing out to
/// `max_distance`, clamped beyond.
fn bucket(offset: i64, num_buckets: usize, max_distance: usize) -> usize {
    let half = num_buckets / 2;
    let sign_base = if offset > 0 { half } else { 0 };
    let dist = offset.unsigned_abs() as usize;
    let exact = half / 2;
    if exact == 0 {
        return sign_base;
    }
    if dist < exact {
        return sign_base + dist;
    }
    let log_pos = (dist as f64 / exact as f64).ln() / (max_distance as f64 / exact as f64).ln()
        * (half - exact) as f64;
    sign_base + (exact + log_pos as usize).min(half - 1)
}

/// Runs a standard transformer encoder (every layer computes its own
/// attention) over `tokens` using the weights of `model`, returning `[n *
/// vocab]` logits in row-major order.  The model must have a degenerate
/// layout — all blocks of size one — since only those models carry
/// query/key projections in every layer.
pub fn reference_forward(model: &Model, tokens: &[u32]) -> Result<Vec<f64>> {
    let cfg = model.config();
    if cfg.layout.blocks().iter().any(|&b| b != 1) {
        return Err(Error::Contract(
            "reference forward requires a layout of single-layer blocks".into(),
        ));
    }
    let n = tokens.len();
    if n == 0 || n > cfg.max_seq_len {
        return Err(Error::Length {
            what: "reference input sequence",
            got: n,
            limit: cfg.max_seq_len,
        });
    }
    for &t in tokens {
        if t as usize >= cfg.vocab_size {
            return Err(Error::Vocab(format!(
                "token id {t} outside vocabulary of {}",
                cfg.vocab_size
            )));
        }
    }
    let (hd, heads) = (cfg.embed_dim, cfg.num_heads);
    let d = hd / heads;
    let scale = 1.0 / (d as f64).sqrt();
    let w = |name: &str| -> Result<&[f64]> {
        model
            .tensor_by_name(name)
            .map(|t| t.data())
            .ok_or_else(|| Error::Contract(format!("reference forward: no parameter {name}")))
    };

    // Embeddings: word + absolute position, then layer norm.
    let word = w("embeddings.word")?;
    let pos = w("embeddings.position")?;
    let mut x = vec![0.0; n * hd];
    for (i, &t) in tokens.iter().enumerate() {
        for j in 0..hd {
            x[i * hd + j] = word[t as usize * hd + j] + pos[i * hd + j];
        }
    }
    x = layer_norm(&x, w("embeddings.norm.gain")?, w("embeddings.norm.bias")?, hd);

    let rel = w("attention.rel_bias")?;
    let num_layers = cfg.layout.total_layers();
    for layer in 0..num_layers {
        let p = |suffix: &str| format!("layer{layer}.{suffix}");

        // Q, K, V projections.
        let mut q = matmul(&x, w(&p("attn.wq"))?, n, hd, hd);
        add_bias(&mut q, w(&p("attn.bq"))?, hd);
        let mut k = matmul(&x, w(&p("attn.wk"))?, n, hd, hd);
        add_bias(&mut k, w(&p("attn.bk"))?, hd);
        let mut v = matmul(&x, w(&p("attn.wv"))?, n, hd, hd);
        add_bias(&mut v, w(&p("attn.bv"))?, hd);

        // Scaled dot-product attention per head, with the relative bias
        // looked up cell by cell.
        let mut ctx = vec![0.0; n * hd];
        for head in 0..heads {
            let off = head * d;
            let mut scores = vec![0.0; n * n];
            for i in 0..n {
                for j in 0..n {
                    let mut s = 0.0;
                    for t in 0..d {
                        s += q[i * hd + off + t] * k[j * hd + off + t];
                    }
                    let b = bucket(j as i64 - i as i64, cfg.num_rel_buckets, cfg.rel_max_distance);
                    scores[i * n + j] = s * scale + rel[b * heads + head];
                }
            }
            for row in scores.chunks_exact_mut(n) {
                softmax_row(row);
            }
            for i in 0..n {
                for t in 0..d {
                    let mut s = 0.0;
                    for j in 0..n {
                        s += scores[i * n + j] * v[j * hd + off + t];
                    }
                    ctx[i * hd + off + t] = s;
                }
            }
        }
        let mut attn = matmul(&ctx, w(&p("attn.wo"))?, n, hd, hd);
        add_bias(&mut attn, w(&p("attn.bo"))?, hd);

        // Post-norm residual around attention.
        for (a, &xv) in attn.iter_mut().zip(x.iter()) {
            *a += xv;
        }
        let x1 = layer_norm(&attn, w(&p("attn.norm.gain"))?, w(&p("attn.norm.bias"))?, hd);

        // Feed-forward with GELU, then the second post-norm residual.
        let wdim = cfg.ffn_width;
        let mut h1 = matmul(&x1, w(&p("ffn.w1"))?, n, hd, wdim);
        add_bias(&mut h1, w(&p("ffn.b1"))?, wdim);
        gelu(&mut h1);
        let mut h2 = matmul(&h1, w(&p("ffn.w2"))?, n, wdim, hd);
        add_bias(&mut h2, w(&p("ffn.b2"))?, hd);
        for (h, &xv) in h2.iter_mut().zip(x1.iter()) {
            *h += xv;
        }
        x = layer_norm(&h2, w(&p("ffn.norm.gain"))?, w(&p("ffn.norm.bias"))?, hd);
    }

    // Tied head: logits against the word-embedding rows plus a vocab bias.
    let head_bias = w("head.bias")?;
    let mut logits = vec![0.0; n * cfg.vocab_size];
    for i in 0..n {
        for c in 0..cfg.vocab_size {
            let mut s = 0.0;
            for j in 0..hd {
                s += x[i * hd + j] * word[c * hd + j];
            }
            logits[i * cfg.vocab_size + c] = s + head_bias[c];
        }
    }
    Ok(logits)
}
