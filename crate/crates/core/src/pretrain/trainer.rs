//! The training loop: per step, sample a batch of windows, corrupt them for
//! MLM, run forward/backward on one tape, and apply the optimizer under the
//! warmup/decay schedule.  Every stochastic choice derives from the run seed
//! and the step index, so a run is bitwise reproducible.

use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use crate::error::{Error, Result};
use crate::model::Model;
use crate::pretrain::masking::{apply_masking, MaskingPolicy};
use crate::pretrain::schedule::{lr_at, LrSchedule};
use crate::pretrain::{corpus, AdamW};
use crate::rng::{salt, stream_at};
use crate::tensor::{Phase, Tape};

#[derive(Debug, Clone)]
pub struct TrainerConfig {
    pub seed: u64,
    pub steps: u64,
    pub batch_size: usize,
    pub seq_len: usize,
    pub schedule: LrSchedule,
    pub masking: MaskingPolicy,
    /// Write a numbered checkpoint every this many steps; 0 disables the
    /// periodic ones.  A final checkpoint is always written by [`Trainer::run`]
    /// when `out_dir` is set.
    pub checkpoint_every: u64,
    /// Where checkpoints go; `None` trains without writing any.
    pub out_dir: Option<PathBuf>,
}

/// One logged step: the CSV columns.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub wall_ms: f64,
}

/// Everything [`Trainer::run`] produced.
#[derive(Debug)]
pub struct TrainRun {
    pub records: Vec<StepRecord>,
    pub final_checkpoint: Option<PathBuf>,
}

pub struct Trainer {
    model: Model,
    opt: AdamW,
    packed: Vec<u32>,
    config: TrainerConfig,
}

impl Trainer {
    /// `packed` is the id stream produced by [`corpus::pack_corpus`].
    pub fn new(model: Model, packed: Vec<u32>, config: TrainerConfig) -> Result<Self> {
        config.schedule.validate()?;
        config.masking.validate()?;
        if config.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if config.seq_len == 0 || config.seq_len > model.config().max_seq_len {
            return Err(Error::Config(format!(
                "sequence length {} outside 1..={}",
                config.seq_len,
                model.config().max_seq_len
            )));
        }
        if packed.len() < config.seq_len {
            return Err(Error::Length {
                what: "packed corpus",
                got: packed.len(),
                limit: config.seq_len,
            });
        }
        Ok(Trainer {
            model,
            opt: AdamW::new(),
            packed,
            config,
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    /// Runs one optimization step (0-based index), returning the logged row.
    ///
    /// The loss is the mean cross-entropy over every labeled position in the
    /// batch.  A batch with no labeled positions (possible only at extreme
    /// policies) records loss 0 and still applies weight decay.
    pub fn train_step(&mut self, step: u64) -> Result<StepRecord> {
        let t0 = Instant::now();
        let cfg = &self.config;
        let vocab_size = self.model.config().vocab_size as u32;
        let mut batch_rng = stream_at(cfg.seed, salt::BATCH, step);
        let mut mask_rng = stream_at(cfg.seed, salt::MASKING, step);
        let mut drop_rng = stream_at(cfg.seed, salt::DROPOUT, step);

        let windows =
            corpus::sample_windows(&self.packed, cfg.seq_len, cfg.batch_size, &mut batch_rng)?;
        let tape = Tape::recording();
        let mut seq_losses = Vec::with_capacity(cfg.batch_size);
        let mut total_labels = 0usize;
        for window in &windows {
            let (corrupted, labels) =
                apply_masking(window, &cfg.masking, vocab_size, &mut mask_rng)?;
            let labeled = labels.iter().filter(|&&l| l >= 0).count();
            if labeled == 0 {
                continue;
            }
            let (logits, _) =
                self.model
                    .forward(&tape, &corrupted, Phase::Train, &mut drop_rng)?;
            let loss = tape.mean_cross_entropy(&logits, &labels)?;
            seq_losses.push((loss, labeled));
            total_labels += labeled;
        }

        let lr = lr_at(step, &cfg.schedule);
        let loss_value = if seq_losses.is_empty() {
            let mut grads = crate::tensor::Gradients::default();
            self.opt.step(&mut self.model, &mut grads, lr)?;
            0.0
        } else {
            // weight per-sequence means so the batch loss is the mean over
            // all labeled positions
            let mut total: Option<crate::tensor::Var> = None;
            for (loss, labeled) in seq_losses {
                let weighted = tape.scale(loss, labeled as f64 / total_labels as f64)?;
                total = Some(match total {
                    None => weighted,
                    Some(acc) => tape.add(&acc, &weighted)?,
                });
            }
            let total = total.expect("nonempty");
            let value = total.value().item()?;
            tape.backward(&total)?;
            let mut grads = tape.param_grads();
            self.opt.step(&mut self.model, &mut grads, lr)?;
            value
        };

        Ok(StepRecord {
            step,
            loss: loss_value,
            lr,
            wall_ms: t0.elapsed().as_secs_f64() * 1e3,
        })
    }

    /// Runs the configured number of steps, writing CSV rows
    /// (`step,loss,lr,wall_ms`) to `log`, periodic checkpoints, and a final
    /// checkpoint.  Returns every step record.
    pub fn run(&mut self, log: &mut dyn Write) -> Result<TrainRun> {
        writeln!(log, "step,loss,lr,wall_ms")?;
        if let Some(dir) = &self.config.out_dir {
            std::fs::create_dir_all(dir)?;
        }
        let mut records = Vec::with_capacity(self.config.steps as usize);
        for step in 0..self.config.steps {
            let rec = self.train_step(step)?;
            writeln!(
                log,
                "{},{:.6},{:.3e},{:.3}",
                rec.step, rec.loss, rec.lr, rec.wall_ms
            )?;
            if self.config.checkpoint_every > 0
                && (step + 1) % self.config.checkpoint_every == 0
            {
                if let Some(dir) = self.config.out_dir.clone() {
                    self.model
                        .save(&dir.join(format!("checkpoint-{:06}.bin", step + 1)))?;
                }
            }
            records.push(rec);
        }
        log.flush()?;
        let final_checkpoint = match &self.config.out_dir {
            Some(dir) => {
                let path = dir.join("checkpoint-final.bin");
                self.model.save(&path)?;
                Some(path)
            }
            None => None,
        };
        Ok(TrainRun {
            records,
            final_checkpoint,
        })
    }
}

/// Moving average with window `w` (for loss-trend checks); output index `i`
/// averages inputs `i ..= i + w - 1`.
pub fn moving_average(xs: &[f64], w: usize) -> Vec<f64> {
    if w == 0 || xs.len() < w {
        return Vec::new();
    }
    let mut out = Vec::with_capacity(xs.len() - w + 1);
    let mut sum: f64 = xs[..w].iter().sum();
    out.push(sum / w as f64);
    for i in w..xs.len() {
        sum += xs[i] - xs[i - w];
        out.push(sum / w as f64);
    }
    out
}
