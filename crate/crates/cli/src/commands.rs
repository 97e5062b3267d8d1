//! The four subcommand bodies.  Each returns the process exit code: 0 for
//! success, 1 for a failed run (training aborted, verification found
//! failures), 2 for configuration or usage problems.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use lazyblock::accounting;
use lazyblock::pretrain::{pack_corpus, LrSchedule, MaskingPolicy, Trainer, TrainerConfig, Vocab};
use lazyblock::verify;
use lazyblock::{fault, Error, Layout, Model, ModelConfig, Result};
use lazyblock_bench::{emit_report, run_bench, BenchPlan, Measure, ReportFormat};

use crate::config::{parse_file, RunConfig};
use crate::log::{info, Level};

fn model_config_from(cfg: &RunConfig, vocab_size: usize) -> ModelConfig {
    let mut mc = ModelConfig::new(
        cfg.layout.clone(),
        cfg.ffn_width,
        cfg.embed_dim,
        cfg.num_heads,
        vocab_size,
        cfg.max_seq_len,
    );
    mc.hidden_dropout_p = cfg.hidden_dropout;
    mc.attention_dropout = cfg.attention_dropout;
    mc.num_rel_buckets = cfg.rel_buckets;
    mc.rel_max_distance = cfg.rel_max_distance;
    mc
}

pub fn cmd_train(config_path: &Path) -> Result<i32> {
    let cfg = parse_file(config_path)?;

    // Validate every input path before any compute.
    for (what, path) in [("corpus", &cfg.corpus), ("vocabulary", &cfg.vocab)] {
        if !path.is_file() {
            return Err(Error::Config(format!(
                "{what} file {} does not exist",
                path.display()
            )));
        }
    }
    let vocab = Vocab::load(&cfg.vocab)?;
    let model_config = model_config_from(&cfg, vocab.len());
    model_config.validate()?;

    let text = fs::read_to_string(&cfg.corpus)?;
    let packed = pack_corpus(&vocab, &text);
    info(
        Level::Info,
        &format!(
            "corpus: {} tokens packed from {}; vocabulary: {} entries",
            packed.len(),
            cfg.corpus.display(),
            vocab.len()
        ),
    );

    let schedule = LrSchedule::new(cfg.peak_lr, cfg.warmup_steps, cfg.schedule_max_steps())?;
    let masking = MaskingPolicy {
        mask_prob: cfg.mask_prob,
        ..MaskingPolicy::default()
    };
    fs::create_dir_all(&cfg.out_dir)?;
    let log_path = cfg.log_path();
    if let Some(parent) = log_path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }

    let model = Model::new(model_config, cfg.seed)?;
    info(
        Level::Info,
        &format!(
            "model: layout {}, {} parameters, seed {}",
            cfg.layout,
            model.param_count(),
            cfg.seed
        ),
    );
    let trainer_config = TrainerConfig {
        seed: cfg.seed,
        steps: cfg.steps,
        batch_size: cfg.batch_size,
        seq_len: cfg.seq_len,
        schedule,
        masking,
        checkpoint_every: cfg.checkpoint_every,
        out_dir: Some(cfg.out_dir.clone()),
    };
    let mut trainer = Trainer::new(model, packed, trainer_config)?;
    let mut log = std::io::BufWriter::new(fs::File::create(&log_path)?);
    let run = trainer.run(&mut log)?;
    log.flush()?;

    let final_loss = run.records.last().map(|r| r.loss);
    println!(
        "trained {} steps; final loss {}; log: {}{}",
        run.records.len(),
        final_loss.map_or("-".into(), |l| format!("{l:.6}")),
        log_path.display(),
        run.final_checkpoint
            .as_deref()
            .map(|p| format!("; checkpoint: {}", p.display()))
            .unwrap_or_default()
    );
    Ok(0)
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_count(
    layout: &str,
    ffn_width: usize,
    embed_dim: usize,
    num_heads: usize,
    vocab_size: usize,
    max_seq_len: usize,
    seq_len: Option<usize>,
    json: bool,
) -> Result<i32> {
    let layout = Layout::parse(layout)?;
    let config = ModelConfig::new(
        layout.clone(),
        ffn_width,
        embed_dim,
        num_heads,
        vocab_size,
        max_seq_len,
    );
    let n = seq_len.unwrap_or(max_seq_len);
    let report = accounting::flop_model(&config, n)?;
    if json {
        print!("{}", report.json_lines());
    } else {
        print!("{}", report.table());
        let k = layout.total_layers();
        let compensated = accounting::compensated_width(ffn_width, embed_dim, k, &layout);
        if compensated != ffn_width {
            println!(
                "width compensation: to match a standard model of FFN width {ffn_width}, \
                 use ffn_width = {compensated} (restores the removed query/key parameters)"
            );
        } else {
            println!("width compensation: none needed (every layer computes attention)");
        }
        let speedup = accounting::predicted_speedup(&config, n)?;
        let asymptote = layout.total_layers() as f64 / layout.num_blocks() as f64;
        println!(
            "predicted forward speedup at n={n}: {speedup:.3}x \
             (idealized; rises toward {asymptote:.3}x with sequence length)"
        );
    }
    Ok(0)
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_bench(
    layouts: &str,
    seq_lens: &str,
    iters: usize,
    warmup: usize,
    mode: &str,
    out: Option<&Path>,
    format: &str,
    seed: u64,
    ffn_width: usize,
    embed_dim: usize,
    num_heads: usize,
    vocab_size: usize,
) -> Result<i32> {
    let seq_lens: Vec<usize> = seq_lens
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| Error::Parse(format!("bad sequence length '{s}'")))
        })
        .collect::<Result<_>>()?;
    let max_n = seq_lens.iter().copied().max().unwrap_or(0);
    let measure = match mode {
        "forward" => Measure::Forward,
        "forward-backward" => Measure::ForwardBackward,
        other => {
            return Err(Error::Parse(format!(
                "mode '{other}' must be 'forward' or 'forward-backward'"
            )))
        }
    };
    let format = match format {
        "csv" => ReportFormat::Csv,
        "markdown" => ReportFormat::Markdown,
        other => {
            return Err(Error::Parse(format!(
                "format '{other}' must be 'csv' or 'markdown'"
            )))
        }
    };
    let mut configs = Vec::new();
    for (i, spec) in layouts.split(',').enumerate() {
        let spec = spec.trim();
        let layout = Layout::parse(spec)?;
        let config = ModelConfig::new(
            layout,
            ffn_width,
            embed_dim,
            num_heads,
            vocab_size,
            max_n.max(1),
        );
        let label = if i == 0 { "baseline".to_string() } else { spec.to_string() };
        if i == 0 {
            info(Level::Info, &format!("baseline layout: {spec}"));
        }
        configs.push((label, config));
    }
    let plan = BenchPlan {
        configs,
        seq_lens,
        iters,
        warmup_iters: warmup,
        measure,
        seed,
    };
    plan.validate()?;
    let cells = plan.configs.len() * plan.seq_lens.len();
    info(
        Level::Info,
        &format!(
            "running {cells} cell{} ({} iters + {} warmup each); one cell at a time, keep the machine idle",
            if cells == 1 { "" } else { "s" },
            plan.iters,
            plan.warmup_iters
        ),
    );
    let result = run_bench(&plan)?;
    let text = emit_report(&result, format)?;
    match out {
        Some(path) => {
            fs::write(path, &text)?;
            info(Level::Info, &format!("report written to {}", path.display()));
        }
        None => print!("{text}"),
    }
    Ok(0)
}

pub fn cmd_verify(inject_fault: Option<&str>) -> Result<i32> {
    if let Some(kind) = inject_fault {
        if kind != "reuse-renormalize" {
            return Err(Error::Config(format!(
                "unknown fault '{kind}'; available: reuse-renormalize"
            )));
        }
        if !fault::set_reuse_renormalize(true) {
            return Err(Error::Config(
                "fault injection requires a build with the fault-inject feature \
                 (it is compiled out of release binaries)"
                    .into(),
            ));
        }
        info(Level::Info, "fault injected: reusing layers renormalize cached distributions");
    }
    let results = verify::run_all();
    fault::set_reuse_renormalize(false);
    print!("{}", verify::report(&results));
    Ok(if verify::all_passed(&results) { 0 } else { 1 })
}

/// Maps an error to its exit code: bad input or environment is 2, a failure
/// inside an otherwise valid run is 1.
pub fn exit_code_for(err: &Error) -> i32 {
    match err {
        Error::Config(_)
        | Error::Parse(_)
        | Error::Vocab(_)
        | Error::Checkpoint(_)
        | Error::Length { .. }
        | Error::Io(_) => 2,
        Error::NonFinite(_) | Error::Contract(_) | Error::Cache(_) | Error::Shape { .. } => 1,
    }
}
