//! Wall-clock benchmark harness contrasting lazy-block layouts against a
//! baseline across sequence lengths.  Runs one cell at a time in the calling
//! thread (the tensor engine is single-threaded), shares identical random
//! inputs across configs at each length, and reports median and median
//! absolute deviation over the timed iterations — a desk machine's scheduler
//! is noisy, so order statistics beat means.  Absolute times are only
//! meaningful relative to the baseline rows.

use std::fmt;
use std::time::Instant;

use rand::Rng as _;

use lazyblock::accounting;
use lazyblock::rng::{self, salt};
use lazyblock::{Error, Model, ModelConfig, Phase, Result, Tape};

/// What the timed region covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Measure {
    /// Inference pass only.
    Forward,
    /// Recording pass, mean-cross-entropy loss, and full backward sweep.
    ForwardBackward,
}

impl fmt::Display for Measure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Measure::Forward => write!(f, "forward"),
            Measure::ForwardBackward => write!(f, "forward-backward"),
        }
    }
}

/// A benchmark request: which models, which sequence lengths, how many runs.
#[derive(Debug, Clone)]
pub struct BenchPlan {
    /// Labeled configurations; exactly one must be labeled `baseline`.
    pub configs: Vec<(String, ModelConfig)>,
    pub seq_lens: Vec<usize>,
    /// Timed iterations per cell (at least 3).
    pub iters: usize,
    /// Discarded warmup iterations per cell (at least 1).
    pub warmup_iters: usize,
    pub measure: Measure,
    /// Seeds both model initialization and the shared random inputs.
    pub seed: u64,
}

impl BenchPlan {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.configs.is_empty() {
            return fail("benchmark plan has no configurations".into());
        }
        if self.configs.iter().filter(|(l, _)| l == "baseline").count() != 1 {
            return fail("benchmark plan needs exactly one config labeled \"baseline\"".into());
        }
        for (label, config) in &self.configs {
            if label.is_empty() || label.contains(',') || label.contains('|') {
                return fail(format!("label {label:?} is empty or contains a delimiter"));
            }
            if self.configs.iter().filter(|(l, _)| l == label).count() != 1 {
                return fail(format!("duplicate label {label:?}"));
            }
            config.validate()?;
        }
        if self.seq_lens.is_empty() {
            return fail("benchmark plan has no sequence lengths".into());
        }
        for (i, &n) in self.seq_lens.iter().enumerate() {
            if self.seq_lens[..i].contains(&n) {
                return fail(format!("duplicate sequence length {n}"));
            }
            for (label, config) in &self.configs {
                if n == 0 || n > config.max_seq_len {
                    return Err(Error::Length {
                        what: "benchmark sequence length",
                        got: n,
                        limit: config.max_seq_len,
                    });
                }
                let _ = label;
            }
        }
        if self.iters < 3 {
            return fail(format!("iters {} below the minimum of 3", self.iters));
        }
        if self.warmup_iters < 1 {
            return fail("at least one warmup iteration is required".into());
        }
        Ok(())
    }
}

/// One measured (model, sequence length) combination.
#[derive(Debug, Clone)]
pub struct Cell {
    pub label: String,
    pub n: usize,
    pub median_ms: f64,
    pub mad_ms: f64,
    /// Baseline median over this cell's median at the same `n`.
    pub speedup: f64,
}

/// All cells plus the provenance needed to reproduce them.
#[derive(Debug, Clone)]
pub struct BenchResult {
    pub cells: Vec<Cell>,
    /// Echo of the plan's configs, for the markdown report's detail columns.
    pub configs: Vec<(String, ModelConfig)>,
    pub measure: Measure,
    pub seed: u64,
    /// Engine threads inside the timed region (the engine is single-threaded).
    pub threads: usize,
    pub profile: &'static str,
}

/// Median of an unordered, nonempty sample (mean of the middle two when even).
pub fn median(xs: &[f64]) -> f64 {
    assert!(!xs.is_empty(), "median of an empty sample");
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite timings"));
    let mid = v.len() / 2;
    if v.len() % 2 == 1 {
        v[mid]
    } else {
        0.5 * (v[mid - 1] + v[mid])
    }
}

/// Median absolute deviation from the median.
pub fn mad(xs: &[f64]) -> f64 {
    let m = median(xs);
    let dev: Vec<f64> = xs.iter().map(|x| (x - m).abs()).collect();
    median(&dev)
}

/// Spearman rank correlation between two equal-length samples; ties share
/// averaged ranks.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "rank correlation needs paired samples");
    assert!(a.len() >= 2, "rank correlation needs at least two pairs");
    let ra = ranks(a);
    let rb = ranks(b);
    let n = a.len() as f64;
    let mean = (n + 1.0) / 2.0;
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - mean) * (y - mean);
        va += (x - mean) * (x - mean);
        vb += (y - mean) * (y - mean);
    }
    if va == 0.0 || vb == 0.0 {
        return 0.0;
    }
    cov / (va * vb).sqrt()
}

fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&i, &j| xs[i].partial_cmp(&xs[j]).expect("finite samples"));
    let mut out = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let shared = (i + j) as f64 / 2.0 + 1.0; // average 1-based rank of the tie group
        for &idx in &order[i..=j] {
            out[idx] = shared;
        }
        i = j + 1;
    }
    out
}

fn time_once(model: &Model, tokens: &[u32], labels: &[i64], measure: Measure) -> Result<f64> {
    match measure {
        Measure::Forward => {
            let tape = Tape::inference();
            let mut rng = rng::stream(0, 0);
            let start = Instant::now();
            let (logits, _) = model.forward(&tape, tokens, Phase::Eval, &mut rng)?;
            let elapsed = start.elapsed().as_secs_f64() * 1e3;
            std::hint::black_box(logits.value().data().first());
            Ok(elapsed)
        }
        Measure::ForwardBackward => {
            let tape = Tape::recording();
            let mut rng = rng::stream(0, 0);
            let start = Instant::now();
            let (logits, _) = model.forward(&tape, tokens, Phase::Eval, &mut rng)?;
            let loss = tape.mean_cross_entropy(&logits, labels)?;
            tape.backward(&loss)?;
            let elapsed = start.elapsed().as_secs_f64() * 1e3;
            std::hint::black_box(loss.value().item()?);
            Ok(elapsed)
        }
    }
}

/// Runs every (config, sequence-length) cell of the plan: per cell,
/// `warmup_iters` discarded runs then `iters` timed runs, reported as median
/// and MAD.  Inputs are drawn once per sequence length and shared across
/// configs.  Cells run strictly one at a time; do not interleave other work
/// with a benchmark process.
pub fn run_bench(plan: &BenchPlan) -> Result<BenchResult> {
    plan.validate()?;
    let models: Vec<(String, Model)> = plan
        .configs
        .iter()
        .map(|(label, config)| Ok((label.clone(), Model::new(config.clone(), plan.seed)?)))
        .collect::<Result<_>>()?;
    let min_vocab = plan
        .configs
        .iter()
        .map(|(_, c)| c.vocab_size)
        .min()
        .expect("validated nonempty");

    let mut cells = Vec::new();
    let mut input_rng = rng::stream(plan.seed, salt::BENCH);
    for &n in &plan.seq_lens {
        let tokens: Vec<u32> = (0..n)
            .map(|_| input_rng.random_range(0..min_vocab as u32))
            .collect();
        let labels: Vec<i64> = tokens.iter().map(|&t| t as i64).collect();
        let mut medians = Vec::new();
        for (label, model) in &models {
            for _ in 0..plan.warmup_iters {
                time_once(model, &tokens, &labels, plan.measure)?;
            }
            let times: Vec<f64> = (0..plan.iters)
                .map(|_| time_once(model, &tokens, &labels, plan.measure))
                .collect::<Result<_>>()?;
            medians.push((label.clone(), median(&times), mad(&times)));
        }
        let base = medians
            .iter()
            .find(|(l, _, _)| l == "baseline")
            .expect("validated baseline presence")
            .1;
        for (label, med, dev) in medians {
            cells.push(Cell {
                label,
                n,
                speedup: base / med,
                median_ms: med,
                mad_ms: dev,
            });
        }
    }
    Ok(BenchResult {
        cells,
        configs: plan.configs.clone(),
        measure: plan.measure,
        seed: plan.seed,
        threads: 1,
        profile: env!("LAZYBLOCK_BENCH_PROFILE"),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Markdown,
}

fn group_digits(mut n: usize) -> String {
    let mut parts = Vec::new();
    loop {
        if n < 1000 {
            parts.push(n.to_string());
            break;
        }
        parts.push(format!("{:03}", n % 1000));
        n /= 1000;
    }
    parts.reverse();
    parts.join(",")
}

/// Renders a result as CSV (`label,n,median_ms,mad_ms,speedup` with a
/// provenance header comment) or as a Table-2-style markdown table per
/// sequence length (model, parameter count, (W, H, N), time, speedup).
pub fn emit_report(result: &BenchResult, format: ReportFormat) -> Result<String> {
    if result.cells.is_empty() {
        return Err(Error::Config("cannot report an empty benchmark result".into()));
    }
    let mut out = String::new();
    match format {
        ReportFormat::Csv => {
            out.push_str(&format!(
                "# threads={} profile={} seed={} measure={}\n",
                result.threads, result.profile, result.seed, result.measure
            ));
            out.push_str("label,n,median_ms,mad_ms,speedup\n");
            for c in &result.cells {
                out.push_str(&format!(
                    "{},{},{:.3},{:.4},{:.3}\n",
                    c.label, c.n, c.median_ms, c.mad_ms, c.speedup
                ));
            }
        }
        ReportFormat::Markdown => {
            out.push_str(&format!(
                "Benchmark: measure={}, seed={}, threads={}, profile={}.\n",
                result.measure, result.seed, result.threads, result.profile
            ));
            let mut seen = Vec::new();
            for c in &result.cells {
                if seen.contains(&c.n) {
                    continue;
                }
                seen.push(c.n);
                out.push_str(&format!("\n### Sequence length {}\n\n", c.n));
                out.push_str("| Model | Params | (W, H, N) | Time (ms) | Speedup |\n");
                out.push_str("|---|---|---|---|---|\n");
                for cell in result.cells.iter().filter(|x| x.n == c.n) {
                    let config = result
                        .configs
                        .iter()
                        .find(|(l, _)| *l == cell.label)
                        .map(|(_, cfg)| cfg)
                        .ok_or_else(|| {
                            Error::Config(format!("result lacks the config for {:?}", cell.label))
                        })?;
                    let params = accounting::count_params(config)?.total_params;
                    out.push_str(&format!(
                        "| {} | {} | ({}, {}, {}) | {:.3} | {:.3} |\n",
                        cell.label,
                        group_digits(params),
                        config.ffn_width,
                        config.embed_dim,
                        config.num_heads,
                        cell.median_ms,
                        cell.speedup
                    ));
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use lazyblock::Layout;

    fn tiny(layout: &str, max_seq: usize) -> ModelConfig {
        let mut c = ModelConfig::new(Layout::parse(layout).unwrap(), 32, 16, 2, 23, max_seq);
        c.num_rel_buckets = 8;
        c.rel_max_distance = 16;
        c
    }

    fn tiny_plan() -> BenchPlan {
        BenchPlan {
            configs: vec![
                ("baseline".into(), tiny("M1x2", 64)),
                ("lazy".into(), tiny("M2x1", 64)),
            ],
            seq_lens: vec![8, 16],
            iters: 3,
            warmup_iters: 1,
            measure: Measure::Forward,
            seed: 7,
        }
    }

    #[test]
    fn plan_validation_rejects_bad_plans() {
        let mut p = tiny_plan();
        p.iters = 2;
        assert!(matches!(p.validate(), Err(Error::Config(_))));

        let mut p = tiny_plan();
        p.warmup_iters = 0;
        assert!(matches!(p.validate(), Err(Error::Config(_))));

        let mut p = tiny_plan();
        p.configs[0].0 = "base".into();
        assert!(matches!(p.validate(), Err(Error::Config(_))), "baseline label required");

        let mut p = tiny_plan();
        p.configs[1].0 = "baseline".into();
        assert!(matches!(p.validate(), Err(Error::Config(_))), "duplicate baseline");

        let mut p = tiny_plan();
        p.seq_lens = vec![8, 8];
        assert!(matches!(p.validate(), Err(Error::Config(_))));

        // An over-long sequence length fails before any run.
        let mut p = tiny_plan();
        p.seq_lens = vec![8, 65];
        assert!(matches!(run_bench(&p), Err(Error::Length { .. })));
    }

    #[test]
    fn baseline_speedup_is_exactly_one_and_cells_cover_the_grid() {
        let result = run_bench(&tiny_plan()).unwrap();
        assert_eq!(result.cells.len(), 4);
        for n in [8usize, 16] {
            let base = result
                .cells
                .iter()
                .find(|c| c.label == "baseline" && c.n == n)
                .unwrap();
            assert_eq!(base.speedup, 1.0);
            assert!(base.median_ms > 0.0 && base.mad_ms >= 0.0);
        }
        assert!(result.cells.iter().any(|c| c.label == "lazy" && c.n == 16));
    }

    #[test]
    fn median_resists_one_large_outlier() {
        let clean = [10.0, 10.2, 9.9, 10.1, 10.05];
        let m0 = median(&clean);
        let spread = mad(&clean);
        let mut dirty = clean.to_vec();
        dirty.push(101.0); // one 10x outlier run
        let m1 = median(&dirty);
        assert!(
            (m1 - m0).abs() < spread,
            "outlier moved the median by {} with MAD {spread}",
            (m1 - m0).abs()
        );
    }

    #[test]
    fn median_and_mad_basics() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert_eq!(mad(&[1.0, 1.0, 5.0]), 0.0);
        assert_eq!(mad(&[1.0, 2.0, 4.0, 8.0]), 1.5);
    }

    #[test]
    fn spearman_rank_correlation() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0];
        let up = [2.0, 4.0, 9.0, 16.0, 30.0];
        let down = [5.0, 4.0, 3.0, 2.0, 1.0];
        assert!((spearman(&a, &up) - 1.0).abs() < 1e-12);
        assert!((spearman(&a, &down) + 1.0).abs() < 1e-12);
        // one adjacent swap in six values stays above 0.9
        let six = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let swapped = [1.0, 2.0, 4.0, 3.0, 5.0, 6.0];
        let rho = spearman(&six, &swapped);
        assert!(rho > 0.9 && rho < 1.0, "rho {rho}");
        // ties share averaged ranks without panicking
        let tied = [1.0, 1.0, 2.0, 3.0, 3.0, 4.0];
        assert!(spearman(&tied, &six) > 0.9);
    }

    #[test]
    fn csv_and_markdown_reports_are_well_formed() {
        let result = run_bench(&tiny_plan()).unwrap();
        let csv = emit_report(&result, ReportFormat::Csv).unwrap();
        let mut lines = csv.lines();
        let header = lines.next().unwrap();
        assert!(header.starts_with("# threads=1 profile="));
        assert!(header.contains("seed=7") && header.contains("measure=forward"));
        assert_eq!(lines.next().unwrap(), "label,n,median_ms,mad_ms,speedup");
        assert_eq!(csv.lines().count(), 2 + 4);
        assert!(csv.lines().any(|l| l.starts_with("baseline,8,")));

        let md = emit_report(&result, ReportFormat::Markdown).unwrap();
        let header_pos = md.find("| Model | Params | (W, H, N) | Time (ms) | Speedup |").unwrap();
        assert!(header_pos > 0);
        assert!(md.contains("### Sequence length 8"));
        assert!(md.contains("### Sequence length 16"));
        // Params column carries the real count for the tiny baseline config.
        let expect = accounting::count_params(&tiny("M1x2", 64)).unwrap().total_params;
        assert!(md.contains(&group_digits(expect)));
    }

    #[test]
    fn forward_backward_mode_times_successfully() {
        let mut p = tiny_plan();
        p.measure = Measure::ForwardBackward;
        p.seq_lens = vec![8];
        let result = run_bench(&p).unwrap();
        assert_eq!(result.cells.len(), 2);
        assert!(result.cells.iter().all(|c| c.median_ms > 0.0));
        let csv = emit_report(&result, ReportFormat::Csv).unwrap();
        assert!(csv.contains("measure=forward-backward"));
    }

    #[test]
    fn group_digits_formats_thousands() {
        assert_eq!(group_digits(0), "0");
        assert_eq!(group_digits(999), "999");
        assert_eq!(group_digits(1000), "1,000");
        assert_eq!(group_digits(110_648_192), "110,648,192");
    }
}
