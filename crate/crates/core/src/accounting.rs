//! Analytic parameter and FLOP accounting.
//!
//! Two views of cost live here:
//!
//! 1. **Exact mirrors.**  [`count_params`] enumerates parameters with the same
//!    formulas model assembly instantiates, and [`CostReport::total_flops`]
//!    replays the inference forward pass op by op using the engine's own
//!    per-op constants ([`crate::tensor::cost`]).  Both are testable against
//!    the instantiated model and the tape's live counter with zero tolerance.
//! 2. **The idealized speedup model.**  [`predicted_speedup`] treats the whole
//!    quadratic attention cost as paid once per block — per-layer cost drops
//!    from `O(n^2) + p` to `O(n^2/m) + p` with `p` the dense-layer cost — so
//!    the ratio rises monotonically with sequence length toward `k/b`.  Real
//!    layers still apply the cached distributions to fresh values, so measured
//!    wall-clock gains sit below this curve; it is the model's upper bound.

use crate::error::{Error, Result};
use crate::model::{Layout, Model, ModelConfig};
use crate::tensor::cost;

/// Scalar parameter counts per group; groups partition the registry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamGroups {
    /// Word and absolute-position embedding tables.
    pub embeddings: usize,
    /// Q/K/V/O projections with biases, plus the relative-bias table.
    pub attention: usize,
    /// Feed-forward matrices and biases.
    pub ffn: usize,
    /// Every layer-norm gain and bias, including the embedding norm.
    pub norms: usize,
    /// The output head's per-vocab bias (weights are tied to embeddings).
    pub head: usize,
}

impl ParamGroups {
    pub fn total(&self) -> usize {
        self.embeddings + self.attention + self.ffn + self.norms + self.head
    }
}

/// Parameter counts plus a FLOP breakdown of one inference forward pass at a
/// reference sequence length.
#[derive(Debug, Clone)]
pub struct CostReport {
    config: ModelConfig,
    pub params: ParamGroups,
    pub total_params: usize,
    /// Sequence length at which the `*_flops` fields below are evaluated.
    pub seq_len: usize,
    /// All ops issued by computing-layer attention (projections, scores,
    /// bias, softmax, weighted values).
    pub attention_flops_compute: u64,
    /// All ops issued by reusing-layer attention (value/output projections
    /// and applying cached distributions).
    pub attention_flops_reuse: u64,
    /// Feed-forward sublayers across all layers.
    pub ffn_flops: u64,
    /// Everything else: embedding assembly, residual adds, layer norms, and
    /// the tied output head.
    pub other_flops: u64,
}

/// Exact parameter enumeration using the same shapes model assembly creates.
/// Matches `Model::param_count` to the scalar for every valid config.
pub fn count_params(config: &ModelConfig) -> Result<CostReport> {
    CostReport::build(config, config.max_seq_len)
}

/// FLOP model of one inference forward pass at sequence length `n`, mirroring
/// the engine's op charges exactly (training-phase dropout charges excluded).
pub fn flop_model(config: &ModelConfig, n: usize) -> Result<CostReport> {
    CostReport::build(config, n)
}

/// [`cost::matmul`] widened to `u128`: same two-ops-per-inner-step charge,
/// safe for the very large analytic `n` the speedup curve is probed at.
/// Agreement with the engine constant is pinned by the exact-mirror tests.
fn matmul_wide(p: usize, q: usize, r: usize) -> u128 {
    2 * p as u128 * q as u128 * r as u128
}

/// Ops of one computing-layer attention: Q/K/V/O projections with biases,
/// then per head scores (`matmul_nt`), scale, bias gather-add, softmax,
/// and the weighted-value matmul.  Returned as `u128` so per-layer costs
/// stay exact even at the very large analytic `n` used for asymptotics.
fn attn_compute_layer(config: &ModelConfig, n: usize) -> u128 {
    let h = config.embed_dim;
    let nh = config.num_heads as u128;
    let d = h / config.num_heads;
    let nn = n as u128 * n as u128;
    4 * matmul_wide(n, h, h)                       // wq, wk, wv, wo
        + 4 * (n as u128 * h as u128) * cost::ELEMWISE as u128 // their biases
        + nh * matmul_wide(n, d, n)                // q . k^T per head
        + nh * nn * cost::ELEMWISE as u128         // 1/sqrt(d) scaling
        + nh * nn * cost::ELEMWISE as u128         // relative-bias add
        + nh * nn * cost::SOFTMAX as u128
        + nh * matmul_wide(n, n, d)                // distributions . values
}

/// Ops of one reusing-layer attention: V and O projections with biases
/// plus the per-head weighted-value matmul over cached distributions.
fn attn_reuse_layer(config: &ModelConfig, n: usize) -> u128 {
    let h = config.embed_dim;
    let nh = config.num_heads as u128;
    let d = h / config.num_heads;
    2 * matmul_wide(n, h, h)
        + 2 * (n as u128 * h as u128) * cost::ELEMWISE as u128
        + nh * matmul_wide(n, n, d)
}

/// Ops of one feed-forward sublayer: two matmuls, two biases, GELU.
fn ffn_layer(config: &ModelConfig, n: usize) -> u128 {
    let h = config.embed_dim;
    let w = config.ffn_width;
    matmul_wide(n, h, w)
        + (n as u128 * w as u128) * cost::ELEMWISE as u128
        + (n as u128 * w as u128) * cost::GELU as u128
        + matmul_wide(n, w, h)
        + (n as u128 * h as u128) * cost::ELEMWISE as u128
}

/// Embedding assembly, per-layer residual/norm glue, and the tied head.
fn other_flops(config: &ModelConfig, n: usize) -> u128 {
    let h = config.embed_dim;
    let v = config.vocab_size;
    let k = config.layout.total_layers() as u128;
    let nh = n as u128 * h as u128;
    let embed = nh * cost::ELEMWISE as u128 + nh * cost::LAYER_NORM as u128;
    let glue = k * (2 * nh * cost::ELEMWISE as u128 + 2 * nh * cost::LAYER_NORM as u128);
    let head = matmul_wide(n, h, v) + (n as u128 * v as u128) * cost::ELEMWISE as u128;
    embed + glue + head
}


impl CostReport {
    pub fn build(config: &ModelConfig, n: usize) -> Result<Self> {
        config.validate()?;
        let h = config.embed_dim;
        let w = config.ffn_width;
        let v = config.vocab_size;
        let s = config.max_seq_len;
        let k = config.layout.total_layers();
        let b = config.layout.num_blocks();

        let params = ParamGroups {
            embeddings: v * h + s * h,
            // per layer: wv/wo + biases; computing layers additionally wq/wk
            // + biases; plus the shared relative-bias table
            attention: config.num_rel_buckets * config.num_heads
                + k * (2 * h * h + 2 * h)
                + b * (2 * h * h + 2 * h),
            ffn: k * (2 * h * w + w + h),
            norms: (1 + 2 * k) * 2 * h,
            head: v,
        };

        let mut report = CostReport {
            config: config.clone(),
            params,
            total_params: params.total(),
            seq_len: n,
            attention_flops_compute: 0,
            attention_flops_reuse: 0,
            ffn_flops: 0,
            other_flops: 0,
        };
        let narrow = |x: u128| -> Result<u64> {
            u64::try_from(x).map_err(|_| {
                Error::Config(format!("FLOP totals overflow 64 bits at sequence length {n}"))
            })
        };
        report.attention_flops_compute = narrow(b as u128 * attn_compute_layer(config, n))?;
        report.attention_flops_reuse = narrow((k - b) as u128 * attn_reuse_layer(config, n))?;
        report.ffn_flops = narrow(k as u128 * ffn_layer(config, n))?;
        report.other_flops = narrow(other_flops(config, n))?;
        Ok(report)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Total FLOPs of one inference forward pass at sequence length `n`;
    /// at `n == self.seq_len` this equals the sum of the breakdown fields.
    ///
    /// Panics if the total exceeds 64 bits, which cannot happen for any
    /// sequence length a model can actually run.
    pub fn total_flops(&self, n: usize) -> u64 {
        let k = self.config.layout.total_layers() as u128;
        let b = self.config.layout.num_blocks() as u128;
        let total = b * attn_compute_layer(&self.config, n)
            + (k - b) * attn_reuse_layer(&self.config, n)
            + k * ffn_layer(&self.config, n)
            + other_flops(&self.config, n);
        u64::try_from(total).expect("FLOP total overflows 64 bits")
    }

    /// Human-readable summary table.
    pub fn table(&self) -> String {
        let g = &self.params;
        let mut out = String::new();
        out.push_str(&format!("layout          {}\n", self.config.layout));
        out.push_str(&format!(
            "dims            W={} H={} N={}\n",
            self.config.ffn_width, self.config.embed_dim, self.config.num_heads
        ));
        out.push_str("group            parameters\n");
        for (name, count) in [
            ("embeddings", g.embeddings),
            ("attention", g.attention),
            ("ffn", g.ffn),
            ("norms", g.norms),
            ("head", g.head),
        ] {
            out.push_str(&format!("  {name:<14} {count:>12}\n"));
        }
        out.push_str(&format!("  {:<14} {:>12}\n", "total", self.total_params));
        out.push_str(&format!(
            "flops(n={})   compute-attn {} | reuse-attn {} | ffn {} | other {} | total {}\n",
            self.seq_len,
            self.attention_flops_compute,
            self.attention_flops_reuse,
            self.ffn_flops,
            self.other_flops,
            self.total_flops(self.seq_len),
        ));
        out
    }

    /// Machine-readable JSON lines: one record per parameter group, then one
    /// summary record.  All keys and values are plain integers or `[A-Za-z0-9x]`
    /// layout strings, so no escaping is required.
    pub fn json_lines(&self) -> String {
        let g = &self.params;
        let mut out = String::new();
        for (name, count) in [
            ("embeddings", g.embeddings),
            ("attention", g.attention),
            ("ffn", g.ffn),
            ("norms", g.norms),
            ("head", g.head),
        ] {
            out.push_str(&format!("{{\"group\":\"{name}\",\"params\":{count}}}\n"));
        }
        out.push_str(&format!(
            "{{\"group\":\"total\",\"params\":{},\"layout\":\"{}\",\"seq_len\":{},\"flops\":{}}}\n",
            self.total_params,
            self.config.layout,
            self.seq_len,
            self.total_flops(self.seq_len),
        ));
        out
    }
}

/// Verifies the closed form against an instantiated model, scalar for scalar.
pub fn audit_against_model(model: &Model) -> Result<CostReport> {
    let report = count_params(model.config())?;
    if report.total_params != model.param_count() {
        return Err(Error::Contract(format!(
            "parameter audit mismatch: closed form {} vs instantiated {}",
            report.total_params,
            model.param_count()
        )));
    }
    Ok(report)
}

/// Widened feed-forward dimension that restores the parameters removed with
/// the per-block Q/K projections: `W' = W + (k - b) * H / k`, rounded to the
/// nearest multiple of 64 (ties round up).  Each of the `k - b` reusing
/// layers drops `2 H^2` parameters; spending them as FFN width adds `2 H dW`
/// per layer across `k` layers, giving the closed form.
pub fn compensated_width(base_w: usize, h: usize, k: usize, layout: &Layout) -> usize {
    let b = layout.num_blocks();
    assert!(
        b <= k && k > 0,
        "layout has {b} blocks which must not exceed the {k} layers"
    );
    let numer = (base_w * k + (k - b) * h) as u64;
    let denom = k as u64;
    // nearest multiple of 64 of numer/denom
    let units = (2 * numer + denom * 64) / (2 * denom * 64);
    (units * 64) as usize
}

/// The idealized speedup of a lazy layout over the uniform single-layer-block
/// baseline of the same depth and widths, as a function of sequence length.
///
/// Model: a baseline layer costs `q(n) + p(n)` where `q` is the quadratic
/// attention term and `p` everything linear in `n`; the lazy variant pays `q`
/// once per block.  The ratio starts near 1 for short sequences, increases
/// monotonically, and approaches `k / b` (the mean block size) from below.
pub fn predicted_speedup(config: &ModelConfig, n: usize) -> Result<f64> {
    config.validate()?;
    if n == 0 {
        return Err(Error::Config(
            "predicted speedup needs a sequence length of at least 1".into(),
        ));
    }
    let k = config.layout.total_layers() as u128;
    let b = config.layout.num_blocks() as u128;
    let h = config.embed_dim as u128;
    let heads = config.num_heads as u128;
    let nn = n as u128 * n as u128;
    // n^2-proportional ops of one attention computation: scores, scale,
    // bias, softmax, weighted values
    let quad = 4 * nn * h + (2 * cost::ELEMWISE as u128 + cost::SOFTMAX as u128) * nn * heads;
    // baseline of the same depth and widths: every layer computes.  The
    // length is analytic and deliberately unbounded by `max_seq_len`; all
    // arithmetic is u128/f64, so any probe point is safe.
    let std_total = (k * (attn_compute_layer(config, n) + ffn_layer(config, n))
        + other_flops(config, n)) as f64;
    let ideal_lazy = std_total - ((k - b) * quad) as f64;
    Ok(std_total / ideal_lazy)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Model;

    fn cfg(layout: &str, w: usize, h: usize, nh: usize) -> ModelConfig {
        ModelConfig::new(
            Layout::parse(layout).unwrap(),
            w,
            h,
            nh,
            32768,
            512,
        )
    }

    #[test]
    fn base_depth12_total_is_exact() {
        let r = count_params(&cfg("M1x12", 3072, 768, 12)).unwrap();
        assert_eq!(r.total_params, 110_648_192);
        assert_eq!(r.params.total(), r.total_params);
        // published figure: 112M, within 2%
        assert!((r.total_params as f64 / 112e6 - 1.0).abs() < 0.02);
    }

    #[test]
    fn lazy_widened_and_enlarged_totals_match_published_figures() {
        // two-layer blocks at compensated width: same budget as the baseline
        let r = count_params(&cfg("M2x6", 3456, 768, 12)).unwrap();
        assert_eq!(r.total_params, 110_643_584);
        assert!((r.total_params as f64 / 112e6 - 1.0).abs() < 0.02);

        // enlarged variant (4480, 896, 14): published as 157M
        let r = count_params(&cfg("M2x6", 4480, 896, 14)).unwrap();
        assert_eq!(r.total_params, 155_232_960);
        assert!((r.total_params as f64 / 157e6 - 1.0).abs() < 0.02);

        // three-layer blocks at base widths: the "about 100M" configuration
        let r = count_params(&cfg("M3x4", 3072, 768, 12)).unwrap();
        assert_eq!(r.total_params, 101_198_720);
        assert!((r.total_params as f64 / 100e6 - 1.0).abs() < 0.02);

        // two-layer blocks at base widths, for the record
        let r = count_params(&cfg("M2x6", 3072, 768, 12)).unwrap();
        assert_eq!(r.total_params, 103_561_088);
    }

    #[test]
    fn closed_form_matches_instantiated_models_exactly() {
        for (layout, w, h, nh, vocab, seq) in [
            ("M2x2", 32, 16, 4, 23, 12),
            ("M1x3", 48, 16, 2, 31, 8),
            ("M5M3M2M2", 64, 32, 4, 101, 16),
            ("M3x2", 40, 24, 3, 57, 10),
        ] {
            let mut config = ModelConfig::new(Layout::parse(layout).unwrap(), w, h, nh, vocab, seq);
            config.num_rel_buckets = 8;
            config.rel_max_distance = 16;
            let model = Model::new(config.clone(), 1).unwrap();
            let report = count_params(&config).unwrap();
            assert_eq!(
                report.total_params,
                model.param_count(),
                "closed form diverges from registry for {layout}"
            );
            audit_against_model(&model).unwrap();
        }
    }

    #[test]
    fn group_partition_sums_to_total() {
        let r = count_params(&cfg("M5M3M2M2", 3584, 768, 12)).unwrap();
        let g = r.params;
        assert_eq!(
            g.embeddings + g.attention + g.ffn + g.norms + g.head,
            r.total_params
        );
    }

    #[test]
    fn compensated_width_reproduces_published_values() {
        let h = 768;
        let k = 12;
        let w = 3072;
        let case = |layout: &str| compensated_width(w, h, k, &Layout::parse(layout).unwrap());
        assert_eq!(case("M2x6"), 3456);
        assert_eq!(case("M3x4"), 3584);
        assert_eq!(case("M4x3"), 3648);
        assert_eq!(case("M6x2"), 3712);
        assert_eq!(case("M12x1"), 3776);
        // identity when every block has one layer
        assert_eq!(case("M1x12"), w);
        // mixed layouts compensate by block count alone
        assert_eq!(case("M5M3M2M2"), 3584);
    }

    #[test]
    fn compensated_width_monotone_decreasing_in_block_count() {
        let widths: Vec<usize> = [1usize, 2, 3, 4, 6, 12]
            .iter()
            .map(|&b| {
                let layout = Layout::from_blocks(vec![12 / b; b]).unwrap();
                compensated_width(3072, 768, 12, &layout)
            })
            .collect();
        for pair in widths.windows(2) {
            assert!(pair[0] >= pair[1], "width must not grow with more blocks");
        }
        assert!(widths[0] > widths[5]);
    }

    #[test]
    fn flop_model_matches_live_op_counter_exactly() {
        for (layout, n) in [("M2x2", 7usize), ("M3x2", 12), ("M1x3", 5)] {
            let mut config =
                ModelConfig::new(Layout::parse(layout).unwrap(), 32, 16, 4, 23, 12);
            config.num_rel_buckets = 8;
            config.rel_max_distance = 16;
            let model = Model::new(config.clone(), 1).unwrap();
            let tokens: Vec<u32> = (0..n as u32).map(|i| 4 + (i % 19)).collect();
            let (_, stats) = model.forward_logits(&tokens).unwrap();
            let report = flop_model(&config, n).unwrap();
            assert_eq!(
                report.total_flops(n),
                stats.flops,
                "closed form diverges from tape counter for {layout} at n={n}"
            );
            let parts = report.attention_flops_compute
                + report.attention_flops_reuse
                + report.ffn_flops
                + report.other_flops;
            assert_eq!(parts, report.total_flops(n), "breakdown must sum to total");
        }
    }

    #[test]
    fn computing_attention_flops_halve_with_two_layer_blocks() {
        let n = 128;
        let a = flop_model(&cfg("M1x12", 3072, 768, 12), n).unwrap();
        let b = flop_model(&cfg("M2x6", 3072, 768, 12), n).unwrap();
        assert_eq!(a.attention_flops_compute, 2 * b.attention_flops_compute);
        assert!(b.attention_flops_reuse > 0);
        assert_eq!(a.attention_flops_reuse, 0);
        assert_eq!(a.ffn_flops, b.ffn_flops);
    }

    #[test]
    fn predicted_speedup_monotone_and_approaches_mean_block_size() {
        let config = cfg("M2x6", 3072, 768, 12);
        let mut last = 0.0;
        for n in [16usize, 64, 256, 1024, 4096, 16384, 65536] {
            let s = predicted_speedup(&config, n).unwrap();
            assert!(s > last, "speedup must rise with n: {s} after {last}");
            assert!(s < 2.0, "bounded above by mean block size");
            last = s;
        }
        // the long-sequence limit is k/b = 2
        let far = predicted_speedup(&config, 5_000_000).unwrap();
        assert!(far > 1.99 && far < 2.0, "limit approach, got {far}");
        // the uniform single-layer-block layout gains nothing
        let base = cfg("M1x12", 3072, 768, 12);
        for n in [64usize, 1024, 16384] {
            let s = predicted_speedup(&base, n).unwrap();
            assert!((s - 1.0).abs() < 1e-12);
        }
        // mixed layout with 4 blocks over 12 layers approaches 3
        let mixed = cfg("M5M3M2M2", 3072, 768, 12);
        let far = predicted_speedup(&mixed, 5_000_000).unwrap();
        assert!(far > 2.9 && far < 3.0, "mixed limit approach, got {far}");
    }

    #[test]
    fn report_serializations_contain_every_group() {
        let r = count_params(&cfg("M2x6", 3456, 768, 12)).unwrap();
        let table = r.table();
        let json = r.json_lines();
        for group in ["embeddings", "attention", "ffn", "norms", "head", "total"] {
            assert!(table.contains(group), "table missing {group}");
            assert!(json.contains(&format!("\"group\":\"{group}\"")));
        }
        assert_eq!(json.lines().count(), 6);
        assert!(json.contains("\"params\":110643584"));
        assert!(json.contains("\"layout\":\"M2x6\""));
    }
}
