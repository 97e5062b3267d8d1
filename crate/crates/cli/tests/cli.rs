//! End-to-end tests of the `lazyblock` binary: each test spawns the compiled
//! CLI as a subprocess and checks exit codes, stdout/stderr contracts, and
//! on-disk artifacts.  Subprocesses also isolate the fault-injection switch,
//! which is process-global state.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_lazyblock"));
    // Keep stderr deterministic for assertions; info chatter is opt-out.
    cmd.env("LAZYBLOCK_LOG", "quiet");
    cmd
}

fn data_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../data")
        .canonicalize()
        .expect("bundled data directory")
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).expect("utf8 stdout")
}

fn stderr(out: &Output) -> String {
    String::from_utf8(out.stderr.clone()).expect("utf8 stderr")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

/// A small training config over the bundled corpus.
fn write_train_config(dir: &Path, name: &str, seed: u64, steps: usize, out_dir: &Path) -> PathBuf {
    let data = data_dir();
    let text = format!(
        "[model]\n\
         layout = M2x1\n\
         embed_dim = 32\n\
         num_heads = 2\n\
         ffn_width = 64\n\
         max_seq_len = 16\n\
         \n\
         [training]\n\
         seed = {seed}\n\
         steps = {steps}\n\
         batch_size = 2\n\
         seq_len = 16\n\
         peak_lr = 1e-3\n\
         warmup_steps = 3\n\
         corpus = {corpus}\n\
         vocab = {vocab}\n\
         \n\
         [output]\n\
         dir = {out}\n",
        corpus = data.join("corpus.txt").display(),
        vocab = data.join("vocab.txt").display(),
        out = out_dir.display(),
    );
    let path = dir.join(name);
    std::fs::write(&path, text).expect("write config");
    path
}

#[test]
fn train_writes_log_rows_and_final_checkpoint() {
    let tmp = tempfile::tempdir().expect("tempdir");
    let out_dir = tmp.path().join("run");
    let config = write_train_config(tmp.path(), "train.cfg", 5, 10, &out_dir);
    let out = bin().args(["train", "--config"]).arg(&config).output().expect("spawn");
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    assert!(stdout(&out).contains("trained 10 steps"), "stdout: {}", stdout(&out));

    let log = std::fs::read_to_string(out_dir.join("train.csv")).expect("train.csv");
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines[0], "step,loss,lr,wall_ms");
    assert_eq!(lines.len(), 11, "header plus one row per step:\n{log}");
    for (i, line) in lines[1..].iter().enumerate() {
        assert!(line.starts_with(&format!("{i},")), "row {i}: {line}");
        let fields: Vec<&str> = line.split(',').collect();
        assert_eq!(fields.len(), 4, "row {i}: {line}");
        let loss: f64 = fields[1].parse().expect("loss field");
        assert!(loss.is_finite() && loss > 0.0, "row {i} loss {loss}");
    }
    assert!(out_dir.join("checkpoint-final.bin").is_file());
}

#[test]
fn training_is_deterministic_for_a_fixed_seed() {
    let tmp = tempfile::tempdir().expect("tempdir");
    let mut losses = Vec::new();
    for run in ["a", "b"] {
        let out_dir = tmp.path().join(run);
        let config =
            write_train_config(tmp.path(), &format!("{run}.cfg"), 11, 6, &out_dir);
        let out = bin().args(["train", "--config"]).arg(&config).output().expect("spawn");
        assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
        let log = std::fs::read_to_string(out_dir.join("train.csv")).expect("train.csv");
        let cols: Vec<String> = log
            .lines()
            .skip(1)
            .map(|l| l.split(',').nth(1).expect("loss column").to_string())
            .collect();
        losses.push(cols);
    }
    assert_eq!(losses[0], losses[1], "same seed must reproduce every loss");
}

#[test]
fn train_rejects_a_malformed_layout_with_the_grammar() {
    let tmp = tempfile::tempdir().expect("tempdir");
    let out_dir = tmp.path().join("run");
    let config = write_train_config(tmp.path(), "bad.cfg", 5, 1, &out_dir);
    let text = std::fs::read_to_string(&config).unwrap().replace("M2x1", "M0x6");
    std::fs::write(&config, text).unwrap();
    let out = bin().args(["train", "--config"]).arg(&config).output().expect("spawn");
    assert_eq!(code(&out), 2);
    let err = stderr(&out);
    assert!(err.contains("M0x6"), "stderr: {err}");
    assert!(err.contains("the grammar is M<size>x<count>"), "stderr: {err}");
}

#[test]
fn train_rejects_an_unknown_config_key_with_its_line() {
    let tmp = tempfile::tempdir().expect("tempdir");
    let path = tmp.path().join("bad.cfg");
    std::fs::write(&path, "[model]\nlayout = M1x1\nbogus_knob = 3\n").unwrap();
    let out = bin().args(["train", "--config"]).arg(&path).output().expect("spawn");
    assert_eq!(code(&out), 2);
    let err = stderr(&out);
    assert!(err.contains("bogus_knob"), "stderr: {err}");
    assert!(err.contains("line 3"), "stderr: {err}");
}

#[test]
fn train_reports_a_missing_corpus_file() {
    let tmp = tempfile::tempdir().expect("tempdir");
    let out_dir = tmp.path().join("run");
    let config = write_train_config(tmp.path(), "missing.cfg", 5, 1, &out_dir);
    let text = std::fs::read_to_string(&config)
        .unwrap()
        .replace("corpus.txt", "no-such-corpus.txt");
    std::fs::write(&config, text).unwrap();
    let out = bin().args(["train", "--config"]).arg(&config).output().expect("spawn");
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("no-such-corpus.txt"), "stderr: {}", stderr(&out));
}

#[test]
fn count_prints_totals_and_compensation() {
    let out = bin().args(["count", "M2x6", "3456", "768", "12"]).output().expect("spawn");
    assert_eq!(code(&out), 0);
    let text = stdout(&out);
    assert!(text.contains("110643584"), "stdout: {text}");
    assert!(text.contains("use ffn_width = 3840"), "stdout: {text}");
    assert!(text.contains("predicted forward speedup"), "stdout: {text}");
    assert!(text.contains("2.000x"), "stdout: {text}");
}

#[test]
fn count_json_is_line_structured() {
    let out = bin()
        .args(["count", "M2x6", "3072", "768", "12", "--json"])
        .output()
        .expect("spawn");
    assert_eq!(code(&out), 0);
    let text = stdout(&out);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 6, "stdout: {text}");
    for line in &lines {
        assert!(line.starts_with('{') && line.ends_with('}'), "line: {line}");
    }
    assert!(lines[5].contains("\"params\":103561088"), "stdout: {text}");
    assert!(lines[5].contains("\"layout\":\"M2x6\""), "stdout: {text}");
}

#[test]
fn count_rejects_bad_layouts_with_usage_exit_code() {
    let out = bin().args(["count", "M2y6", "64", "32", "2"]).output().expect("spawn");
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("the grammar is"), "stderr: {}", stderr(&out));
}

#[test]
fn bench_emits_well_formed_csv() {
    let out = bin()
        .args([
            "bench",
            "--layouts", "M1x2,M2x1",
            "--seq-lens", "8,16",
            "--iters", "3",
            "--warmup", "1",
            "--embed-dim", "32",
            "--ffn-width", "64",
            "--num-heads", "2",
            "--vocab-size", "64",
            "--seed", "3",
        ])
        .output()
        .expect("spawn");
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    let text = stdout(&out);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 6, "stdout: {text}");
    assert!(lines[0].starts_with("# threads=1 profile="), "stdout: {text}");
    assert!(lines[0].contains("seed=3"), "stdout: {text}");
    assert!(lines[0].contains("measure=forward"), "stdout: {text}");
    assert_eq!(lines[1], "label,n,median_ms,mad_ms,speedup");
    for row in &lines[2..] {
        let fields: Vec<&str> = row.split(',').collect();
        assert_eq!(fields.len(), 5, "row: {row}");
        let _: usize = fields[1].parse().expect("n");
        let med: f64 = fields[2].parse().expect("median");
        assert!(med > 0.0, "row: {row}");
        if fields[0] == "baseline" {
            assert_eq!(fields[4], "1.000", "baseline speedup must be exact: {row}");
        }
    }
    assert!(lines[2].starts_with("baseline,8,"), "stdout: {text}");
    assert!(lines[3].starts_with("M2x1,8,"), "stdout: {text}");
}

#[test]
fn bench_writes_markdown_reports_to_a_file() {
    let tmp = tempfile::tempdir().expect("tempdir");
    let report = tmp.path().join("bench.md");
    let out = bin()
        .args([
            "bench",
            "--layouts", "M1x2,M2x1",
            "--seq-lens", "8",
            "--iters", "3",
            "--warmup", "1",
            "--embed-dim", "32",
            "--ffn-width", "64",
            "--num-heads", "2",
            "--vocab-size", "64",
            "--format", "markdown",
        ])
        .arg("--out")
        .arg(&report)
        .output()
        .expect("spawn");
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    assert!(stdout(&out).is_empty(), "report goes to the file, not stdout");
    let text = std::fs::read_to_string(&report).expect("report file");
    assert!(text.contains("### Sequence length 8"), "report: {text}");
    assert!(text.contains("| Model | Params | (W, H, N) | Time (ms) | Speedup |"));
    assert!(text.contains("| baseline |"), "report: {text}");
}

#[test]
fn verify_passes_and_is_byte_identical_across_runs() {
    let first = bin().arg("verify").output().expect("spawn");
    assert_eq!(code(&first), 0, "stderr: {}", stderr(&first));
    let text = stdout(&first);
    assert_eq!(text.matches("[PASS]").count(), 6, "stdout: {text}");
    assert!(!text.contains("[FAIL]"), "stdout: {text}");
    assert!(text.contains("6/6 properties passed"), "stdout: {text}");

    let second = bin().arg("verify").output().expect("spawn");
    assert_eq!(first.stdout, second.stdout, "verify output must be deterministic");
}

#[test]
fn injected_reuse_fault_is_caught_by_the_count_law() {
    // The test-profile binary carries the fault-inject feature via this
    // crate's dev-dependency, so the switch is live here and inert in
    // release builds.
    let out = bin()
        .args(["verify", "--inject-fault", "reuse-renormalize"])
        .output()
        .expect("spawn");
    assert_eq!(code(&out), 1, "stderr: {}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("[FAIL] lazy-count-law"), "stdout: {text}");
    assert!(
        text.contains("[PASS] checkpoint-roundtrip"),
        "unrelated properties still pass: {text}"
    );
}

#[test]
fn unknown_fault_names_are_usage_errors() {
    let out = bin().args(["verify", "--inject-fault", "bogus"]).output().expect("spawn");
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("reuse-renormalize"), "stderr: {}", stderr(&out));
}
