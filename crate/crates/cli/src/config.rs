//! Strict parsing of the training run configuration: flat `key = value` lines
//! under `[model]`, `[training]`, and `[output]` sections.  Unknown sections
//! or keys, duplicate keys, and malformed values are all errors that cite the
//! offending line — silent typos in experiment configs are how results die.

use std::path::{Path, PathBuf};

use lazyblock::{Error, Layout, Result};

/// Everything `train` needs, with desk-scale defaults for every key except
/// the corpus and vocabulary paths, which default to the bundled synthetic
/// data.  Paths are interpreted relative to the current working directory.
#[derive(Debug, Clone)]
pub struct RunConfig {
    // [model]
    pub layout: Layout,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub ffn_width: usize,
    pub max_seq_len: usize,
    pub hidden_dropout: f64,
    pub attention_dropout: bool,
    pub rel_buckets: usize,
    pub rel_max_distance: usize,
    // [training]
    pub seed: u64,
    pub steps: u64,
    pub batch_size: usize,
    pub seq_len: usize,
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub max_steps: Option<u64>,
    pub mask_prob: f64,
    pub checkpoint_every: u64,
    pub corpus: PathBuf,
    pub vocab: PathBuf,
    // [output]
    pub out_dir: PathBuf,
    pub log: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            layout: Layout::uniform(1, 4).expect("static layout"),
            embed_dim: 128,
            num_heads: 4,
            ffn_width: 512,
            max_seq_len: 128,
            hidden_dropout: 0.1,
            attention_dropout: false,
            rel_buckets: 32,
            rel_max_distance: 128,
            seed: 42,
            steps: 1000,
            batch_size: 8,
            seq_len: 64,
            peak_lr: 1e-3,
            warmup_steps: 100,
            max_steps: None,
            mask_prob: 0.15,
            checkpoint_every: 0,
            corpus: PathBuf::from("data/corpus.txt"),
            vocab: PathBuf::from("data/vocab.txt"),
            out_dir: PathBuf::from("runs/default"),
            log: None,
        }
    }
}

impl RunConfig {
    /// The training log CSV path: explicit `log` key, or `train.csv` inside
    /// the output directory.
    pub fn log_path(&self) -> PathBuf {
        self.log
            .clone()
            .unwrap_or_else(|| self.out_dir.join("train.csv"))
    }

    /// Schedule horizon: explicit `max_steps`, or the run length.
    pub fn schedule_max_steps(&self) -> u64 {
        self.max_steps.unwrap_or(self.steps)
    }
}

pub fn parse_file(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        Error::Config(format!("cannot read config {}: {e}", path.display()))
    })?;
    parse_str(&text)
}

pub fn parse_str(text: &str) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    let mut section: Option<&str> = None;
    let mut seen: Vec<(String, String)> = Vec::new();

    for (idx, raw) in text.lines().enumerate() {
        let lineno = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
            continue;
        }
        if let Some(name) = line.strip_prefix('[') {
            let name = name
                .strip_suffix(']')
                .ok_or_else(|| Error::Parse(format!("line {lineno}: unterminated section header")))?
                .trim();
            section = match name {
                "model" => Some("model"),
                "training" => Some("training"),
                "output" => Some("output"),
                other => {
                    return Err(Error::Parse(format!(
                        "line {lineno}: unknown section [{other}] (expected [model], [training], or [output])"
                    )))
                }
            };
            continue;
        }
        let Some(sect) = section else {
            return Err(Error::Parse(format!(
                "line {lineno}: key outside any section; start with [model], [training], or [output]"
            )));
        };
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::Parse(format!(
                "line {lineno}: expected `key = value`, got {line:?}"
            )));
        };
        let key = key.trim();
        let value = value.trim();
        if seen.iter().any(|(s, k)| s == sect && k == key) {
            return Err(Error::Parse(format!(
                "line {lineno}: duplicate key '{key}' in [{sect}]"
            )));
        }
        seen.push((sect.to_string(), key.to_string()));
        apply(&mut cfg, sect, key, value, lineno)?;
    }
    Ok(cfg)
}

fn apply(cfg: &mut RunConfig, section: &str, key: &str, value: &str, lineno: usize) -> Result<()> {
    let bad = |what: &str| {
        Error::Parse(format!(
            "line {lineno}: cannot parse '{value}' as {what} for key '{key}'"
        ))
    };
    let as_usize = || value.parse::<usize>().map_err(|_| bad("an integer"));
    let as_u64 = || value.parse::<u64>().map_err(|_| bad("an integer"));
    let as_f64 = || value.parse::<f64>().map_err(|_| bad("a number"));
    let as_bool = || match value {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(bad("a boolean")),
    };

    match (section, key) {
        ("model", "layout") => {
            cfg.layout = Layout::parse(value).map_err(|e| {
                Error::Parse(format!("line {lineno}: {e}"))
            })?
        }
        ("model", "embed_dim") => cfg.embed_dim = as_usize()?,
        ("model", "num_heads") => cfg.num_heads = as_usize()?,
        ("model", "ffn_width") => cfg.ffn_width = as_usize()?,
        ("model", "max_seq_len") => cfg.max_seq_len = as_usize()?,
        ("model", "hidden_dropout") => cfg.hidden_dropout = as_f64()?,
        ("model", "attention_dropout") => cfg.attention_dropout = as_bool()?,
        ("model", "rel_buckets") => cfg.rel_buckets = as_usize()?,
        ("model", "rel_max_distance") => cfg.rel_max_distance = as_usize()?,
        ("training", "seed") => cfg.seed = as_u64()?,
        ("training", "steps") => cfg.steps = as_u64()?,
        ("training", "batch_size") => cfg.batch_size = as_usize()?,
        ("training", "seq_len") => cfg.seq_len = as_usize()?,
        ("training", "peak_lr") => cfg.peak_lr = as_f64()?,
        ("training", "warmup_steps") => cfg.warmup_steps = as_u64()?,
        ("training", "max_steps") => cfg.max_steps = Some(as_u64()?),
        ("training", "mask_prob") => cfg.mask_prob = as_f64()?,
        ("training", "checkpoint_every") => cfg.checkpoint_every = as_u64()?,
        ("training", "corpus") => cfg.corpus = PathBuf::from(value),
        ("training", "vocab") => cfg.vocab = PathBuf::from(value),
        ("output", "dir") => cfg.out_dir = PathBuf::from(value),
        ("output", "log") => cfg.log = Some(PathBuf::from(value)),
        (sect, key) => {
            return Err(Error::Parse(format!(
                "line {lineno}: unknown key '{key}' in [{sect}]"
            )))
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_an_empty_config() {
        let cfg = parse_str("").unwrap();
        assert_eq!(cfg.embed_dim, 128);
        assert_eq!(cfg.layout.to_string(), "M1x4");
        assert_eq!(cfg.steps, 1000);
        assert_eq!(cfg.log_path(), PathBuf::from("runs/default/train.csv"));
        assert_eq!(cfg.schedule_max_steps(), 1000);
    }

    #[test]
    fn full_config_parses() {
        let text = "\
# quickstart
[model]
layout = M2x2
embed_dim = 64
num_heads = 2
ffn_width = 256
max_seq_len = 96
hidden_dropout = 0.0
attention_dropout = off

[training]
seed = 7
steps = 25
batch_size = 4
seq_len = 48
peak_lr = 5e-4
warmup_steps = 5
max_steps = 50
checkpoint_every = 10
corpus = /tmp/c.txt
vocab = /tmp/v.txt

[output]
dir = /tmp/run
log = /tmp/run/x.csv
";
        let cfg = parse_str(text).unwrap();
        assert_eq!(cfg.layout.to_string(), "M2x2");
        assert_eq!(cfg.seq_len, 48);
        assert_eq!(cfg.max_steps, Some(50));
        assert!(!cfg.attention_dropout);
        assert_eq!(cfg.log_path(), PathBuf::from("/tmp/run/x.csv"));
    }

    #[test]
    fn unknown_keys_and_sections_cite_their_line() {
        let err = parse_str("[model]\nlayout = M1x2\nwidth = 3\n").unwrap_err();
        assert!(matches!(&err, Error::Parse(m) if m.contains("line 3") && m.contains("width")), "{err}");

        let err = parse_str("[models]\n").unwrap_err();
        assert!(matches!(&err, Error::Parse(m) if m.contains("line 1") && m.contains("[models]")), "{err}");

        let err = parse_str("layout = M1x2\n").unwrap_err();
        assert!(matches!(&err, Error::Parse(m) if m.contains("outside any section")), "{err}");

        let err = parse_str("[model]\nlayout = M1x2\nlayout = M1x3\n").unwrap_err();
        assert!(matches!(&err, Error::Parse(m) if m.contains("duplicate")), "{err}");

        let err = parse_str("[training]\nsteps = soon\n").unwrap_err();
        assert!(matches!(&err, Error::Parse(m) if m.contains("line 2") && m.contains("'soon'")), "{err}");

        let err = parse_str("[model]\nlayout = M0x6\n").unwrap_err();
        assert!(matches!(&err, Error::Parse(m) if m.contains("line 2")), "{err}");
    }
}
