//! Multi-head self-attention with a relative-position bias, split into two
//! entry points: [`compute_attention`] builds the per-head attention
//! distributions from its own input, and [`reuse_attention`] consumes
//! distributions cached by an earlier layer of the same block, projecting only
//! fresh values.  The cache hands out the post-softmax, pre-dropout
//! probabilities; each consuming layer applies its own independent dropout at
//! training time, and gradients flow through the cached handles back to the
//! layer that computed them.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::fault;
use crate::rng::Rng;
use crate::tensor::{Tape, Var};

/// Attention-probability dropout policy for one forward pass.
#[derive(Debug, Clone, Copy)]
pub enum DropoutPolicy {
    /// No dropout (evaluation, or attention dropout disabled).
    Off,
    /// Drop attention probabilities with probability `p` (training only).
    Train { p: f64 },
}

/// Weights of one attention layer, bound to a tape for the current pass.
/// Computing layers carry the full set; reusing layers have no query or key
/// projections at all — that is where the parameter savings come from.
#[derive(Debug)]
pub struct AttentionParams {
    pub wq: Option<Var>,
    pub bq: Option<Var>,
    pub wk: Option<Var>,
    pub bk: Option<Var>,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
    pub num_heads: usize,
}

impl AttentionParams {
    /// Full parameter set for a distribution-computing layer.
    #[allow(clippy::too_many_arguments)]
    pub fn computing(
        wq: Var,
        bq: Var,
        wk: Var,
        bk: Var,
        wv: Var,
        bv: Var,
        wo: Var,
        bo: Var,
        num_heads: usize,
    ) -> Result<Self> {
        let p = AttentionParams {
            wq: Some(wq),
            bq: Some(bq),
            wk: Some(wk),
            bk: Some(bk),
            wv,
            bv,
            wo,
            bo,
            num_heads,
        };
        p.validate()?;
        Ok(p)
    }

    /// Reduced parameter set for a distribution-reusing layer.
    pub fn reusing(wv: Var, bv: Var, wo: Var, bo: Var, num_heads: usize) -> Result<Self> {
        let p = AttentionParams {
            wq: None,
            bq: None,
            wk: None,
            bk: None,
            wv,
            bv,
            wo,
            bo,
            num_heads,
        };
        p.validate()?;
        Ok(p)
    }

    fn validate(&self) -> Result<()> {
        let h = self.embed_dim();
        if self.num_heads == 0 || h % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "embed dim {h} not divisible by {} heads",
                self.num_heads
            )));
        }
        if self.wq.is_some() != self.wk.is_some()
            || self.wq.is_some() != self.bq.is_some()
            || self.wk.is_some() != self.bk.is_some()
        {
            return Err(Error::Config(
                "query/key projections must be present together or absent together".into(),
            ));
        }
        for w in [&self.wv, &self.wo].into_iter().chain(self.wq.iter()).chain(self.wk.iter()) {
            if w.shape() != [h, h] {
                return Err(Error::Shape {
                    op: "attention weight",
                    lhs: w.shape().to_vec(),
                    rhs: vec![h, h],
                });
            }
        }
        Ok(())
    }

    pub fn is_computing(&self) -> bool {
        self.wq.is_some()
    }

    pub fn embed_dim(&self) -> usize {
        self.wv.shape()[0]
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim() / self.num_heads
    }
}

/// The learned relative-position bias: one scalar per (bucket, head), added to
/// the attention logits before softmax.
pub struct RelativeBias {
    /// `[num_buckets, num_heads]` table, bound to the current tape.
    pub table: Var,
    pub num_buckets: usize,
    pub max_distance: usize,
}

/// Maps a signed offset `j - i` (key minus query position) to a bucket.
/// Bidirectional bucketing: half the buckets cover each sign; within a sign,
/// small offsets get exact buckets and larger ones share logarithmically
/// spaced buckets out to `max_distance`, beyond which everything clamps into
/// the last bucket.  Offset zero is always bucket zero.
pub fn relative_bucket(offset: i64, num_buckets: usize, max_distance: usize) -> usize {
    let per_sign = num_buckets / 2;
    let base = if offset > 0 { per_sign } else { 0 };
    let n = offset.unsigned_abs() as usize;
    let max_exact = per_sign / 2;
    if max_exact == 0 || per_sign == 0 {
        return base;
    }
    let bucket = if n < max_exact {
        n
    } else {
        let scaled = (n as f64 / max_exact as f64).ln()
            / (max_distance as f64 / max_exact as f64).ln()
            * (per_sign - max_exact) as f64;
        (max_exact + scaled as usize).min(per_sign - 1)
    };
    base + bucket
}

/// Flattened `[n, n]` base indices into a `[num_buckets, num_heads]` bias
/// table: entry `(i, j)` holds `bucket(j - i) * num_heads`, so adding a head
/// index yields the flat table position.  Built once per forward pass and
/// shared by every computing layer.
pub fn bucket_base_indices(
    n: usize,
    num_buckets: usize,
    max_distance: usize,
    num_heads: usize,
) -> Rc<Vec<u32>> {
    // Memoize over the 2n-1 distinct offsets, then fill by diagonal shift.
    let by_offset: Vec<u32> = (-(n as i64 - 1)..=(n as i64 - 1))
        .map(|off| (relative_bucket(off, num_buckets, max_distance) * num_heads) as u32)
        .collect();
    let mut idx = vec![0u32; n * n];
    for (i, row) in idx.chunks_exact_mut(n).enumerate() {
        let start = n - 1 - i; // offset j - i = -(n-1) is at by_offset[0]
        row.copy_from_slice(&by_offset[start..start + n]);
    }
    Rc::new(idx)
}

/// Per-head post-softmax attention distributions, as produced by a computing
/// layer and consumed by the reusing layers above it in the same block.
#[derive(Debug)]
pub struct AttentionCache {
    probs: Vec<Var>,
    seq_len: usize,
}

impl AttentionCache {
    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn num_heads(&self) -> usize {
        self.probs.len()
    }

    /// Read access to one head's cached distribution (pre-dropout).
    pub fn head(&self, h: usize) -> &Var {
        &self.probs[h]
    }
}

/// Full attention for a block's first layer: projects Q, K, V from `x`,
/// forms scaled dot-product logits plus the relative bias, softmaxes them,
/// and returns both the attended output and the cache of distributions.
pub fn compute_attention(
    tape: &Tape,
    x: &Var,
    params: &AttentionParams,
    bias: &RelativeBias,
    bias_idx: &Rc<Vec<u32>>,
    dropout: DropoutPolicy,
    rng: &mut Rng,
) -> Result<(Var, AttentionCache)> {
    if !params.is_computing() {
        return Err(Error::Contract(
            "compute_attention called with reusing-layer parameters".into(),
        ));
    }
    let (n, h) = (x.shape()[0], x.shape()[1]);
    if h != params.embed_dim() {
        return Err(Error::Shape {
            op: "compute_attention input",
            lhs: x.shape().to_vec(),
            rhs: vec![n, params.embed_dim()],
        });
    }
    if bias_idx.len() != n * n {
        return Err(Error::Length {
            what: "bias index table",
            got: bias_idx.len(),
            limit: n * n,
        });
    }
    let d = params.head_dim();
    let scale = 1.0 / (d as f64).sqrt();

    let q = {
        let t = tape.matmul(x, params.wq.as_ref().expect("computing params"))?;
        tape.add_row_bias(t, params.bq.as_ref().expect("computing params"))?
    };
    let k = {
        let t = tape.matmul(x, params.wk.as_ref().expect("computing params"))?;
        tape.add_row_bias(t, params.bk.as_ref().expect("computing params"))?
    };
    let v = {
        let t = tape.matmul(x, &params.wv)?;
        tape.add_row_bias(t, &params.bv)?
    };

    let mut probs = Vec::with_capacity(params.num_heads);
    let mut attended = Vec::with_capacity(params.num_heads);
    for head in 0..params.num_heads {
        let qh = tape.slice_cols(&q, head * d, d)?;
        let kh = tape.slice_cols(&k, head * d, d)?;
        let vh = tape.slice_cols(&v, head * d, d)?;
        let scores = tape.matmul_nt(&qh, &kh)?;
        let scaled = tape.scale(scores, scale)?;
        let biased = tape.add_gather(scaled, &bias.table, bias_idx, head)?;
        let p = tape.softmax_rows(biased)?;
        let used = apply_dropout(tape, &p, dropout, rng)?;
        attended.push(tape.matmul(&used, &vh)?);
        probs.push(p);
    }
    let merged = tape.concat_cols(&attended)?;
    let out = {
        let t = tape.matmul(&merged, &params.wo)?;
        tape.add_row_bias(t, &params.bo)?
    };
    Ok((out, AttentionCache { probs, seq_len: n }))
}

/// Attention for a reusing layer: fresh values from its own input, combined
/// under the distributions cached by the block's computing layer.  No query
/// or key work, no softmax.
pub fn reuse_attention(
    tape: &Tape,
    x: &Var,
    params: &AttentionParams,
    cache: &AttentionCache,
    dropout: DropoutPolicy,
    rng: &mut Rng,
) -> Result<Var> {
    if params.is_computing() {
        return Err(Error::Contract(
            "reuse_attention called with computing-layer parameters".into(),
        ));
    }
    let (n, h) = (x.shape()[0], x.shape()[1]);
    if h != params.embed_dim() {
        return Err(Error::Shape {
            op: "reuse_attention input",
            lhs: x.shape().to_vec(),
            rhs: vec![n, params.embed_dim()],
        });
    }
    if cache.seq_len != n {
        return Err(Error::Cache(format!(
            "cached distributions are for sequence length {}, input has {n}",
            cache.seq_len
        )));
    }
    if cache.num_heads() != params.num_heads {
        return Err(Error::Cache(format!(
            "cache holds {} heads, layer expects {}",
            cache.num_heads(),
            params.num_heads
        )));
    }
    let d = params.head_dim();
    let v = {
        let t = tape.matmul(x, &params.wv)?;
        tape.add_row_bias(t, &params.bv)?
    };
    let mut attended = Vec::with_capacity(params.num_heads);
    for head in 0..params.num_heads {
        let vh = tape.slice_cols(&v, head * d, d)?;
        let mut p = cache.probs[head].clone();
        if fault::reuse_renormalize() {
            // Planted defect (feature-gated): redundantly renormalizes the
            // cached distribution, which trips the softmax-count law.
            p = tape.softmax_rows(p)?;
        }
        let used = apply_dropout(tape, &p, dropout, rng)?;
        attended.push(tape.matmul(&used, &vh)?);
    }
    let merged = tape.concat_cols(&attended)?;
    let out = {
        let t = tape.matmul(&merged, &params.wo)?;
        tape.add_row_bias(t, &params.bo)?
    };
    Ok(out)
}

fn apply_dropout(tape: &Tape, p: &Var, policy: DropoutPolicy, rng: &mut Rng) -> Result<Var> {
    match policy {
        DropoutPolicy::Off => Ok(p.clone()),
        DropoutPolicy::Train { p: prob } => tape.dropout(p.clone(), prob, rng),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{ParamId, Tape, Tensor};
    use std::sync::Arc;

    #[test]
    fn bucket_zero_offset_is_bucket_zero() {
        assert_eq!(relative_bucket(0, 32, 128), 0);
        assert_eq!(relative_bucket(0, 16, 40), 0);
    }

    #[test]
    fn bucket_table_matches_independent_reference() {
        // Frozen from an independently written implementation of the
        // bidirectional bucketing scheme; offsets -10..=10.
        let expect_32_128 = [
            8, 8, 8, 7, 6, 5, 4, 3, 2, 1, 0, 17, 18, 19, 20, 21, 22, 23, 24, 24, 24,
        ];
        let got: Vec<usize> = (-10..=10).map(|o| relative_bucket(o, 32, 128)).collect();
        assert_eq!(got, expect_32_128);

        let expect_16_40 = [
            5, 5, 5, 4, 4, 4, 4, 3, 2, 1, 0, 9, 10, 11, 12, 12, 12, 12, 13, 13, 13,
        ];
        let got: Vec<usize> = (-10..=10).map(|o| relative_bucket(o, 16, 40)).collect();
        assert_eq!(got, expect_16_40);
    }

    #[test]
    fn bucket_far_offsets_clamp() {
        for o in [-128, -200, -5000] {
            assert_eq!(relative_bucket(o, 32, 128), 15);
        }
        for o in [128, 200, 5000] {
            assert_eq!(relative_bucket(o, 32, 128), 31);
        }
    }

    #[test]
    fn bucket_monotone_in_distance_per_sign() {
        let mut prev = 0;
        for o in 0..300 {
            let b = relative_bucket(-o, 32, 128);
            assert!(b >= prev, "negative side must be nondecreasing in |offset|");
            prev = b;
        }
        let mut prev = 16;
        for o in 1..300 {
            let b = relative_bucket(o, 32, 128);
            assert!(b >= prev, "positive side must be nondecreasing in offset");
            prev = b;
        }
    }

    #[test]
    fn bucket_indices_fill_matches_direct_evaluation() {
        let n = 9;
        let heads = 3;
        let idx = bucket_base_indices(n, 16, 40, heads);
        for i in 0..n {
            for j in 0..n {
                let direct = relative_bucket(j as i64 - i as i64, 16, 40) * heads;
                assert_eq!(idx[i * n + j], direct as u32, "at ({i},{j})");
            }
        }
    }

    struct Fixture {
        tensors: Vec<Arc<Tensor>>,
    }

    impl Fixture {
        fn new() -> Self {
            Fixture { tensors: Vec::new() }
        }

        fn mk(&mut self, tape: &Tape, shape: Vec<usize>, seed: u64) -> Var {
            let mut rng = crate::rng::stream(seed, 77);
            let t = Arc::new(Tensor::randn(shape, 0.3, &mut rng));
            let id = ParamId(self.tensors.len() as u32);
            self.tensors.push(Arc::clone(&t));
            tape.param(&t, id, &format!("t{}", id.0)).unwrap()
        }
    }

    fn bias_fixture(fx: &mut Fixture, tape: &Tape, heads: usize) -> RelativeBias {
        RelativeBias {
            table: fx.mk(tape, vec![8, heads], 99),
            num_buckets: 8,
            max_distance: 16,
        }
    }

    #[test]
    fn reuse_with_shared_values_matches_computing_layer_output() {
        let tape = Tape::recording();
        let mut fx = Fixture::new();
        let h = 8;
        let heads = 2;
        let n = 5;
        let x = fx.mk(&tape, vec![n, h], 1);
        let full = AttentionParams::computing(
            fx.mk(&tape, vec![h, h], 2),
            fx.mk(&tape, vec![h], 3),
            fx.mk(&tape, vec![h, h], 4),
            fx.mk(&tape, vec![h], 5),
            fx.mk(&tape, vec![h, h], 6),
            fx.mk(&tape, vec![h], 7),
            fx.mk(&tape, vec![h, h], 8),
            fx.mk(&tape, vec![h], 9),
            heads,
        )
        .unwrap();
        let bias = bias_fixture(&mut fx, &tape, heads);
        let idx = bucket_base_indices(n, 8, 16, heads);
        let mut rng = crate::rng::stream(0, 0);
        let (out, cache) =
            compute_attention(&tape, &x, &full, &bias, &idx, DropoutPolicy::Off, &mut rng)
                .unwrap();
        // A reusing layer given the same input and the same V/O weights must
        // reproduce the computing layer's output exactly.
        let reduced = AttentionParams::reusing(
            full.wv.clone(),
            full.bv.clone(),
            full.wo.clone(),
            full.bo.clone(),
            heads,
        )
        .unwrap();
        let out2 =
            reuse_attention(&tape, &x, &reduced, &cache, DropoutPolicy::Off, &mut rng).unwrap();
        assert_eq!(out.value().data(), out2.value().data());
    }

    #[test]
    fn gradient_reaches_query_weights_through_reused_distributions() {
        // The lazy mechanism's defining property: a reusing layer's loss
        // depends on the computing layer's Q/K weights via the cached probs.
        let tape = Tape::recording();
        let mut fx = Fixture::new();
        let h = 8;
        let heads = 2;
        let n = 4;
        let x = fx.mk(&tape, vec![n, h], 11);
        let wq = fx.mk(&tape, vec![h, h], 12);
        let full = AttentionParams::computing(
            wq.clone(),
            fx.mk(&tape, vec![h], 13),
            fx.mk(&tape, vec![h, h], 14),
            fx.mk(&tape, vec![h], 15),
            fx.mk(&tape, vec![h, h], 16),
            fx.mk(&tape, vec![h], 17),
            fx.mk(&tape, vec![h, h], 18),
            fx.mk(&tape, vec![h], 19),
            heads,
        )
        .unwrap();
        let bias = bias_fixture(&mut fx, &tape, heads);
        let idx = bucket_base_indices(n, 8, 16, heads);
        let mut rng = crate::rng::stream(0, 1);
        let (_, cache) =
            compute_attention(&tape, &x, &full, &bias, &idx, DropoutPolicy::Off, &mut rng)
                .unwrap();
        let reduced = AttentionParams::reusing(
            fx.mk(&tape, vec![h, h], 20),
            fx.mk(&tape, vec![h], 21),
            fx.mk(&tape, vec![h, h], 22),
            fx.mk(&tape, vec![h], 23),
            heads,
        )
        .unwrap();
        let out = reuse_attention(&tape, &x, &reduced, &cache, DropoutPolicy::Off, &mut rng)
            .unwrap();
        let loss = tape.sum(&out).unwrap();
        tape.backward(&loss).unwrap();
        let g = wq.grad().expect("gradient must flow back through the cache");
        assert!(g.iter().any(|&v| v != 0.0), "wq gradient all zero");
    }

    #[test]
    fn softmax_runs_once_per_head_across_compute_and_reuse() {
        let tape = Tape::inference();
        let mut fx = Fixture::new();
        let h = 8;
        let heads = 2;
        let n = 6;
        let x = fx.mk(&tape, vec![n, h], 31);
        let full = AttentionParams::computing(
            fx.mk(&tape, vec![h, h], 32),
            fx.mk(&tape, vec![h], 33),
            fx.mk(&tape, vec![h, h], 34),
            fx.mk(&tape, vec![h], 35),
            fx.mk(&tape, vec![h, h], 36),
            fx.mk(&tape, vec![h], 37),
            fx.mk(&tape, vec![h, h], 38),
            fx.mk(&tape, vec![h], 39),
            heads,
        )
        .unwrap();
        let bias = bias_fixture(&mut fx, &tape, heads);
        let idx = bucket_base_indices(n, 8, 16, heads);
        let mut rng = crate::rng::stream(0, 2);
        let (_, cache) =
            compute_attention(&tape, &x, &full, &bias, &idx, DropoutPolicy::Off, &mut rng)
                .unwrap();
        let reduced = AttentionParams::reusing(
            fx.mk(&tape, vec![h, h], 40),
            fx.mk(&tape, vec![h], 41),
            fx.mk(&tape, vec![h, h], 42),
            fx.mk(&tape, vec![h], 43),
            heads,
        )
        .unwrap();
        for _ in 0..3 {
            reuse_attention(&tape, &x, &reduced, &cache, DropoutPolicy::Off, &mut rng).unwrap();
        }
        assert_eq!(
            tape.softmax_square_calls(),
            heads as u64,
            "reuse must not re-run softmax"
        );
    }

    #[test]
    fn cache_sequence_length_mismatch_is_a_cache_error() {
        let tape = Tape::recording();
        let mut fx = Fixture::new();
        let h = 8;
        let heads = 2;
        let x = fx.mk(&tape, vec![5, h], 51);
        let full = AttentionParams::computing(
            fx.mk(&tape, vec![h, h], 52),
            fx.mk(&tape, vec![h], 53),
            fx.mk(&tape, vec![h, h], 54),
            fx.mk(&tape, vec![h], 55),
            fx.mk(&tape, vec![h, h], 56),
            fx.mk(&tape, vec![h], 57),
            fx.mk(&tape, vec![h, h], 58),
            fx.mk(&tape, vec![h], 59),
            heads,
        )
        .unwrap();
        let bias = bias_fixture(&mut fx, &tape, heads);
        let idx = bucket_base_indices(5, 8, 16, heads);
        let mut rng = crate::rng::stream(0, 3);
        let (_, cache) =
            compute_attention(&tape, &x, &full, &bias, &idx, DropoutPolicy::Off, &mut rng)
                .unwrap();
        let reduced = AttentionParams::reusing(
            fx.mk(&tape, vec![h, h], 60),
            fx.mk(&tape, vec![h], 61),
            fx.mk(&tape, vec![h, h], 62),
            fx.mk(&tape, vec![h], 63),
            heads,
        )
        .unwrap();
        let x_short = fx.mk(&tape, vec![3, h], 64);
        let err = reuse_attention(&tape, &x_short, &reduced, &cache, DropoutPolicy::Off, &mut rng)
            .unwrap_err();
        assert!(matches!(err, Error::Cache(_)), "got {err:?}");
    }

    #[test]
    fn wrong_parameter_kind_is_rejected_by_both_entry_points() {
        let tape = Tape::recording();
        let mut fx = Fixture::new();
        let h = 8;
        let reduced = AttentionParams::reusing(
            fx.mk(&tape, vec![h, h], 70),
            fx.mk(&tape, vec![h], 71),
            fx.mk(&tape, vec![h, h], 72),
            fx.mk(&tape, vec![h], 73),
            2,
        )
        .unwrap();
        let x = fx.mk(&tape, vec![4, h], 74);
        let bias = bias_fixture(&mut fx, &tape, 2);
        let idx = bucket_base_indices(4, 8, 16, 2);
        let mut rng = crate::rng::stream(0, 4);
        let err = compute_attention(&tape, &x, &reduced, &bias, &idx, DropoutPolicy::Off, &mut rng)
            .unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn heads_must_divide_embed_dim() {
        let tape = Tape::recording();
        let mut fx = Fixture::new();
        let err = AttentionParams::reusing(
            fx.mk(&tape, vec![10, 10], 80),
            fx.mk(&tape, vec![10], 81),
            fx.mk(&tape, vec![10, 10], 82),
            fx.mk(&tape, vec![10], 83),
            3,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn consuming_layers_draw_independent_dropout() {
        let tape = Tape::recording();
        let mut fx = Fixture::new();
        let h = 8;
        let heads = 2;
        let n = 6;
        let x = fx.mk(&tape, vec![n, h], 91);
        let full = AttentionParams::computing(
            fx.mk(&tape, vec![h, h], 92),
            fx.mk(&tape, vec![h], 93),
            fx.mk(&tape, vec![h, h], 94),
            fx.mk(&tape, vec![h], 95),
            fx.mk(&tape, vec![h, h], 96),
            fx.mk(&tape, vec![h], 97),
            fx.mk(&tape, vec![h, h], 98),
            fx.mk(&tape, vec![h], 99),
            heads,
        )
        .unwrap();
        let bias = bias_fixture(&mut fx, &tape, heads);
        let idx = bucket_base_indices(n, 8, 16, heads);
        let mut rng = crate::rng::stream(5, 5);
        let dp = DropoutPolicy::Train { p: 0.5 };
        let (_, cache) = compute_attention(&tape, &x, &full, &bias, &idx, dp, &mut rng).unwrap();
        let reduced = AttentionParams::reusing(
            full.wv.clone(),
            full.bv.clone(),
            full.wo.clone(),
            full.bo.clone(),
            heads,
        )
        .unwrap();
        let a = reuse_attention(&tape, &x, &reduced, &cache, dp, &mut rng).unwrap();
        let b = reuse_attention(&tape, &x, &reduced, &cache, dp, &mut rng).unwrap();
        assert_ne!(
            a.value().data(),
            b.value().data(),
            "two consuming layers must draw distinct dropout masks"
        );
        // and the cached distributions themselves stay pre-dropout (rows sum to 1)
        for head in 0..heads {
            for row in cache.head(head).value().data().chunks_exact(n) {
                let s: f64 = row.iter().sum();
                assert!((s - 1.0).abs() < 1e-12, "cache row sum {s}");
            }
        }
    }
}
