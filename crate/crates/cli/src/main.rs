//! `lazyblock` — train, benchmark, and audit lazy-block transformer models.
//!
//! Exit codes: 0 success; 1 a validly-configured run failed (training aborted
//! on a non-finite value, verification found failing properties); 2 bad
//! usage, configuration, or input files.

mod commands;
mod config;
mod log;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use commands::{cmd_bench, cmd_count, cmd_train, cmd_verify, exit_code_for};

#[derive(Parser)]
#[command(
    name = "lazyblock",
    version,
    about = "Lazy-block transformers: compute attention once per block, reuse it above",
    long_about = "Lazy-block transformers: the first layer of each block computes the \
self-attention distribution from the block input, and the remaining layers of the block \
reuse it, projecting only fresh values.  Layouts are written M<size>x<count> (uniform \
blocks, lowest first) or M<s1>M<s2>... (mixed); M1x12 is a standard 12-layer encoder.\n\n\
Set LAZYBLOCK_LOG=quiet|info|debug to control stderr verbosity."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain a masked language model from a config file.
    ///
    /// The config is strict `key = value` text under [model], [training],
    /// and [output] sections; unknown keys are errors.  Defaults are
    /// desk-scale (M1x4, embed dim 128, batch 8, 1000 steps on the bundled
    /// synthetic corpus).  The full-scale reference recipe this mirrors is
    /// M1x12 with embed dim 768, FFN width 3072, 12 heads, 32768-word
    /// vocabulary, 512-token sequences, batch 256, peak lr 1e-4, and 10k
    /// warmup steps of a 1M-step schedule — far beyond one desktop CPU.
    /// Paths in the config are resolved from the working directory.
    Train {
        /// Path to the run configuration file.
        #[arg(long)]
        config: PathBuf,
    },
    /// Print parameter counts, a FLOP breakdown, and width compensation.
    Count {
        /// Layout, e.g. M2x6 or M5M3M2M2.
        layout: String,
        /// FFN inner width W.
        ffn_width: usize,
        /// Embedding dimension H.
        embed_dim: usize,
        /// Attention heads N.
        num_heads: usize,
        /// Vocabulary size.
        #[arg(default_value_t = 32768)]
        vocab_size: usize,
        /// Maximum sequence length (position table rows).
        #[arg(default_value_t = 512)]
        max_seq_len: usize,
        /// Sequence length for the FLOP columns (default: max_seq_len).
        #[arg(long)]
        seq_len: Option<usize>,
        /// Emit machine-readable JSON lines instead of the table.
        #[arg(long)]
        json: bool,
    },
    /// Time layouts against a baseline across sequence lengths.
    ///
    /// The first layout listed becomes the `baseline` row; speedups are
    /// relative to it at the same sequence length.  Keep the machine idle:
    /// cells run one at a time and absolute times are only meaningful
    /// relative to the baseline.
    Bench {
        /// Comma-separated layouts; the first is the baseline.
        #[arg(long, default_value = "M1x12,M2x6")]
        layouts: String,
        /// Comma-separated sequence lengths.
        #[arg(long, default_value = "128,512,2048")]
        seq_lens: String,
        /// Timed iterations per cell (minimum 3).
        #[arg(long, default_value_t = 5)]
        iters: usize,
        /// Discarded warmup iterations per cell (minimum 1).
        #[arg(long, default_value_t = 1)]
        warmup: usize,
        /// What to time: `forward` or `forward-backward`.
        #[arg(long, default_value = "forward")]
        mode: String,
        /// Write the report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Report format: `csv` or `markdown`.
        #[arg(long, default_value = "csv")]
        format: String,
        /// Seed for model initialization and shared random inputs.
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// FFN inner width W of every timed model.
        #[arg(long, default_value_t = 1024)]
        ffn_width: usize,
        /// Embedding dimension H of every timed model.
        #[arg(long, default_value_t = 256)]
        embed_dim: usize,
        /// Attention heads N of every timed model.
        #[arg(long, default_value_t = 4)]
        num_heads: usize,
        /// Vocabulary size of every timed model.
        #[arg(long, default_value_t = 8192)]
        vocab_size: usize,
    },
    /// Run the fast invariant suite and report pass/fail per property.
    Verify {
        /// Deliberately break an invariant first (test builds only).
        /// Available fault: `reuse-renormalize`.
        #[arg(long, value_name = "FAULT")]
        inject_fault: Option<String>,
    },
}

fn main() {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Train { config } => cmd_train(&config),
        Command::Count {
            layout,
            ffn_width,
            embed_dim,
            num_heads,
            vocab_size,
            max_seq_len,
            seq_len,
            json,
        } => cmd_count(
            &layout, ffn_width, embed_dim, num_heads, vocab_size, max_seq_len, seq_len, json,
        ),
        Command::Bench {
            layouts,
            seq_lens,
            iters,
            warmup,
            mode,
            out,
            format,
            seed,
            ffn_width,
            embed_dim,
            num_heads,
            vocab_size,
        } => cmd_bench(
            &layouts,
            &seq_lens,
            iters,
            warmup,
            &mode,
            out.as_deref(),
            &format,
            seed,
            ffn_width,
            embed_dim,
            num_heads,
            vocab_size,
        ),
        Command::Verify { inject_fault } => cmd_verify(inject_fault.as_deref()),
    };
    let code = match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code_for(&e)
        }
    };
    std::process::exit(code);
}
