//! Minimal stderr logging controlled by the `LAZYBLOCK_LOG` environment
//! variable: `quiet` silences informational notes, `info` (the default)
//! prints them, `debug` additionally prints diagnostic detail.

use std::sync::OnceLock;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Level {
    Quiet,
    Info,
    Debug,
}

fn threshold() -> Level {
    static LEVEL: OnceLock<Level> = OnceLock::new();
    *LEVEL.get_or_init(|| match std::env::var("LAZYBLOCK_LOG").as_deref() {
        Ok("quiet") => Level::Quiet,
        Ok("debug") => Level::Debug,
        _ => Level::Info,
    })
}

/// Prints `msg` to stderr when the environment allows messages of `level`.
pub fn info(level: Level, msg: &str) {
    if level <= threshold() && threshold() != Level::Quiet {
        eprintln!("[lazyblock] {msg}");
    }
}
