//! Fast invariant suite behind the `verify` command: a handful of
//! self-contained properties that each exercise one structural guarantee of
//! the library — degenerate-layout equivalence against an independently
//! written reference, gradient correctness against central differences, the
//! masking statistics, the learning-rate schedule endpoints, the
//! one-softmax-per-block law, and checkpoint fidelity.  Every property is
//! deterministic: two runs print byte-identical reports.

mod reference;

pub use reference::reference_forward;

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::model::{Layout, Model, ModelConfig};
use crate::pretrain::{apply_masking, lr_at, LrSchedule, MaskingPolicy, NUM_SPECIALS};
use crate::rng::{self, salt};
use crate::tensor::{Phase, Tape};

/// Outcome of one verification property.
#[derive(Debug, Clone)]
pub struct PropertyResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl PropertyResult {
    fn from_run(name: &'static str, run: Result<(bool, String)>) -> Self {
        match run {
            Ok((passed, detail)) => PropertyResult {
                name,
                passed,
                detail,
            },
            Err(e) => PropertyResult {
                name,
                passed: false,
                detail: format!("error: {e}"),
            },
        }
    }
}

/// Runs every property and returns the results in a fixed order.
pub fn run_all() -> Vec<PropertyResult> {
    vec![
        PropertyResult::from_run("degenerate-equivalence", prop_equivalence()),
        PropertyResult::from_run("gradient-check", prop_gradient_check()),
        PropertyResult::from_run("masking-statistics", prop_masking()),
        PropertyResult::from_run("schedule-endpoints", prop_schedule()),
        PropertyResult::from_run("lazy-count-law", prop_lazy_count()),
        PropertyResult::from_run("checkpoint-roundtrip", prop_checkpoint()),
    ]
}

/// One `[PASS]`/`[FAIL]` line per property plus a summary line.
pub fn report(results: &[PropertyResult]) -> String {
    let mut out = String::new();
    for r in results {
        let tag = if r.passed { "[PASS]" } else { "[FAIL]" };
        out.push_str(&format!("{tag} {}: {}\n", r.name, r.detail));
    }
    let ok = results.iter().filter(|r| r.passed).count();
    out.push_str(&format!("{ok}/{} properties passed\n", results.len()));
    out
}

pub fn all_passed(results: &[PropertyResult]) -> bool {
    results.iter().all(|r| r.passed)
}

fn small_config(layout: &str, ffn: usize, dim: usize, heads: usize, vocab: usize, seq: usize) -> Result<ModelConfig> {
    let mut c = ModelConfig::new(Layout::parse(layout)?, ffn, dim, heads, vocab, seq);
    c.num_rel_buckets = 8;
    c.rel_max_distance = 16;
    c.validate()?;
    Ok(c)
}

/// Largest absolute logit difference between the engine forward pass and the
/// independent reference, over `inputs_per_len` random token sequences at each
/// length in `seq_lens`.  The config must use a degenerate (all-blocks-one)
/// layout.
pub fn equivalence_max_diff(
    config: &ModelConfig,
    model_seed: u64,
    input_seed: u64,
    seq_lens: &[usize],
    inputs_per_len: usize,
) -> Result<f64> {
    let model = Model::new(config.clone(), model_seed)?;
    let mut rng = rng::stream(input_seed, salt::VERIFY);
    let mut worst = 0.0f64;
    for &n in seq_lens {
        for _ in 0..inputs_per_len {
            let tokens: Vec<u32> = (0..n)
                .map(|_| rng.random_range(0..config.vocab_size as u32))
                .collect();
            let (logits, _) = model.forward_logits(&tokens)?;
            let expect = reference_forward(&model, &tokens)?;
            for (a, b) in logits.data().iter().zip(&expect) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    Ok(worst)
}

fn prop_equivalence() -> Result<(bool, String)> {
    let config = small_config("M1x3", 64, 32, 4, 60, 32)?;
    let worst = equivalence_max_diff(&config, 41, 42, &[1, 5, 16], 2)?;
    Ok((
        worst < 1e-10,
        format!("M1x3 vs independent reference, max |logit diff| {worst:.3e} over 6 inputs (limit 1e-10)"),
    ))
}

/// Central-difference gradient check over every parameter coordinate.
#[derive(Debug)]
pub struct GradCheck {
    /// Total coordinates compared.
    pub coords: usize,
    /// Largest absolute difference between analytic and numeric gradients.
    pub max_abs_diff: f64,
    /// Largest relative error among coordinates with a meaningful magnitude.
    pub max_rel_err: f64,
    /// Coordinate with the largest relative error, as `name[index]`.
    pub worst: String,
    /// Coordinates failing both the absolute and the relative tolerance.
    pub failures: Vec<String>,
}

/// Compares the analytic gradient of the mean-cross-entropy loss against
/// central differences with step `h`, for every coordinate of every parameter
/// tensor.  A coordinate passes when the absolute difference is at most
/// `abs_tol` or the relative error is at most `rel_tol`.
pub fn gradient_check(
    model: &mut Model,
    tokens: &[u32],
    labels: &[i64],
    h: f64,
    abs_tol: f64,
    rel_tol: f64,
) -> Result<GradCheck> {
    let analytic = {
        let tape = Tape::recording();
        let mut rng = rng::stream(0, 0);
        let (logits, _) = model.forward(&tape, tokens, Phase::Eval, &mut rng)?;
        let loss = tape.mean_cross_entropy(&logits, labels)?;
        tape.backward(&loss)?;
        tape.param_grads()
    };
    let eval_loss = |m: &Model| -> Result<f64> {
        let tape = Tape::inference();
        let mut rng = rng::stream(0, 0);
        let (logits, _) = m.forward(&tape, tokens, Phase::Eval, &mut rng)?;
        let loss = tape.mean_cross_entropy(&logits, labels)?;
        loss.value().item()
    };
    let entries: Vec<(crate::tensor::ParamId, String, usize)> = model
        .param_iter()
        .map(|(id, name, t, _)| (id, name.to_string(), t.numel()))
        .collect();

    let mut out = GradCheck {
        coords: 0,
        max_abs_diff: 0.0,
        max_rel_err: 0.0,
        worst: String::new(),
        failures: Vec::new(),
    };
    for (id, name, numel) in entries {
        let zeros;
        let ga: &[f64] = match analytic.get(id) {
            Some(g) => g,
            None => {
                zeros = vec![0.0; numel];
                &zeros
            }
        };
        for i in 0..numel {
            let orig = model.tensor(id).data()[i];
            model.tensor_mut(id).data_mut()[i] = orig + h;
            let plus = eval_loss(model)?;
            model.tensor_mut(id).data_mut()[i] = orig - h;
            let minus = eval_loss(model)?;
            model.tensor_mut(id).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let diff = (ga[i] - numeric).abs();
            let scale = ga[i].abs().max(numeric.abs());
            out.coords += 1;
            out.max_abs_diff = out.max_abs_diff.max(diff);
            if scale > abs_tol {
                let rel = diff / scale;
                if rel > out.max_rel_err {
                    out.max_rel_err = rel;
                    out.worst = format!("{name}[{i}]");
                }
            }
            if diff > abs_tol && (scale == 0.0 || diff / scale > rel_tol) {
                out.failures.push(format!(
                    "{name}[{i}]: analytic {:.6e} numeric {numeric:.6e}",
                    ga[i]
                ));
            }
        }
    }
    Ok(out)
}

fn prop_gradient_check() -> Result<(bool, String)> {
    // One block of two layers: the reusing layer drives its gradients through
    // the cached attention distributions of the computing layer below it.
    let config = small_config("M2x1", 16, 8, 2, 21, 8)?;
    let mut model = Model::new(config, 17)?;
    let tokens = [4u32, 9, 15, 4, 20, 7];
    let labels = [5i64, -1, 14, -1, 19, 8];
    let check = gradient_check(&mut model, &tokens, &labels, 1e-5, 1e-7, 1e-4)?;
    let passed = check.failures.is_empty();
    let detail = if passed {
        format!(
            "{} coordinates within tolerance (abs 1e-7 or rel 1e-4); \
             max |analytic-numeric| {:.3e}, worst rel {:.3e} at {}",
            check.coords, check.max_abs_diff, check.max_rel_err, check.worst
        )
    } else {
        format!(
            "{} of {} coordinates failed; first: {}",
            check.failures.len(),
            check.coords,
            check.failures[0]
        )
    };
    Ok((passed, detail))
}

/// Empirical masking statistics over `positions` content tokens.
#[derive(Debug, Clone, Copy)]
pub struct MaskStats {
    pub positions: usize,
    /// Fraction of positions selected for prediction.
    pub selected_frac: f64,
    /// Of the selected: fraction replaced by the mask token.
    pub mask_frac: f64,
    /// Of the selected: fraction replaced by a random content token.
    pub random_frac: f64,
    /// Of the selected: fraction left unchanged.
    pub keep_frac: f64,
}

/// Applies the default masking policy to `positions` uniformly drawn content
/// tokens and reports the observed selection and replacement fractions.
pub fn masking_stats(positions: usize, vocab_size: u32, seed: u64) -> Result<MaskStats> {
    if vocab_size <= NUM_SPECIALS {
        return Err(Error::Config(
            "masking statistics need a vocabulary beyond the specials".into(),
        ));
    }
    let mut token_rng = rng::stream(seed, salt::VERIFY);
    let tokens: Vec<u32> = (0..positions)
        .map(|_| token_rng.random_range(NUM_SPECIALS..vocab_size))
        .collect();
    let policy = MaskingPolicy::default();
    let mut mask_rng = rng::stream(seed, salt::MASKING);
    let (out, labels) = apply_masking(&tokens, &policy, vocab_size, &mut mask_rng)?;
    let (mut sel, mut masked, mut random) = (0usize, 0usize, 0usize);
    for ((&orig, &now), &label) in tokens.iter().zip(&out).zip(&labels) {
        if label < 0 {
            continue;
        }
        sel += 1;
        if now == policy.mask_token_id {
            masked += 1;
        } else if now != orig {
            random += 1;
        }
    }
    let of_sel = |k: usize| k as f64 / sel.max(1) as f64;
    Ok(MaskStats {
        positions,
        selected_frac: sel as f64 / positions as f64,
        mask_frac: of_sel(masked),
        random_frac: of_sel(random),
        keep_frac: of_sel(sel - masked - random),
    })
}

fn prop_masking() -> Result<(bool, String)> {
    let s = masking_stats(100_000, 200, 11)?;
    let passed = (s.selected_frac - 0.15).abs() < 0.01
        && (s.mask_frac - 0.80).abs() < 0.02
        && (s.random_frac - 0.10).abs() < 0.02
        && (s.keep_frac - 0.10).abs() < 0.02;
    Ok((
        passed,
        format!(
            "selected {:.4} (want 0.15±0.01), split {:.3}/{:.3}/{:.3} (want 0.80/0.10/0.10 ±0.02)",
            s.selected_frac, s.mask_frac, s.random_frac, s.keep_frac
        ),
    ))
}

fn prop_schedule() -> Result<(bool, String)> {
    let sched = LrSchedule::new(1e-4, 10_000, 1_000_000)?;
    let checks = [
        (0u64, 0.0),
        (5_000, 5e-5),
        (10_000, 1e-4),
        (505_000, 5e-5),
        (1_000_000, 0.0),
    ];
    let mut bad = Vec::new();
    for &(step, want) in &checks {
        let got = lr_at(step, &sched);
        if got != want {
            bad.push(format!("lr({step}) = {got:e}, want {want:e}"));
        }
    }
    Ok((
        bad.is_empty(),
        if bad.is_empty() {
            "start/warmup-peak/midpoint/decay-midpoint/final all exact".into()
        } else {
            bad.join("; ")
        },
    ))
}

fn prop_lazy_count() -> Result<(bool, String)> {
    let mut lines = Vec::new();
    let mut ok = true;
    for layout in ["M1x12", "M2x6", "M3x4", "M5M3M2M2"] {
        let config = small_config(layout, 32, 16, 2, 23, 16)?;
        let blocks = config.layout.num_blocks();
        let model = Model::new(config, 3)?;
        let tokens: Vec<u32> = (0..8).map(|i| (i * 5 + 1) % 23).collect();
        let (_, stats) = model.forward_logits(&tokens)?;
        let want = (blocks * 2) as u64; // one softmax per block and head
        let good = stats.softmax_square_calls == want && stats.attention_computations == blocks;
        ok &= good;
        lines.push(format!(
            "{layout} {}/{want}",
            stats.softmax_square_calls
        ));
    }
    Ok((ok, format!("softmax calls per layout: {}", lines.join(", "))))
}

fn prop_checkpoint() -> Result<(bool, String)> {
    let config = small_config("M2x2", 32, 16, 4, 23, 12)?;
    let model = Model::new(config, 29)?;
    let path = std::env::temp_dir().join(format!(
        "lazyblock-verify-{}.ckpt",
        std::process::id()
    ));
    let outcome = (|| -> Result<(bool, String)> {
        model.save(&path)?;
        let loaded = Model::load(&path)?;
        let same_params = model
            .param_iter()
            .zip(loaded.param_iter())
            .all(|((_, na, ta, _), (_, nb, tb, _))| na == nb && ta.data() == tb.data());
        let tokens = [1u32, 7, 3, 19, 11];
        let (a, _) = model.forward_logits(&tokens)?;
        let (b, _) = loaded.forward_logits(&tokens)?;
        let same_logits = a.data() == b.data();
        Ok((
            same_params && same_logits,
            format!(
                "parameters {}identical, logits {}identical after reload",
                if same_params { "" } else { "NOT " },
                if same_logits { "" } else { "NOT " }
            ),
        ))
    })();
    let _ = std::fs::remove_file(&path);
    outcome
}
