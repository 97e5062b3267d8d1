fn main() {
    // The report header records which cargo profile produced the numbers;
    // `PROFILE` is only visible to build scripts, so re-export it.
    println!(
        "cargo:rustc-env=LAZYBLOCK_BENCH_PROFILE={}",
        std::env::var("PROFILE").unwrap_or_else(|_| "unknown".into())
    );
}
