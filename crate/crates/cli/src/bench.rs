use std::fs;
use std::path::PathBuf;

use radiomamba_core::diagnostics::bench_scan;
use radiomamba_core::kv::parse_list;
use radiomamba_core::Result;
use serde_json::json;

#[derive(clap::Args)]
pub struct Args {
    #[arg(long, default_value = "256,1024,4096,16384")]
    scan_lengths: String,
    #[arg(long, default_value_t = 16)]
    channels: usize,
    #[arg(long, default_value_t = 8)]
    state: usize,
    /// Best of this many measurements per length
    #[arg(long, default_value_t = 5)]
    repeats: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the timings and slopes as JSON
    #[arg(long)]
    report: Option<PathBuf>,
}

pub fn run(a: Args) -> Result<()> {
    let lengths: Vec<usize> = parse_list("scan_lengths", &a.scan_lengths)?;
    let b = bench_scan(&lengths, a.channels, a.state, a.repeats, a.seed)?;
    println!("{:>8} {:>14} {:>14}", "L", "sequential_ms", "parallel_ms");
    for r in &b.rows {
        println!(
            "{:>8} {:>14.4} {:>14.4}",
            r.len,
            r.sequential_secs * 1e3,
            r.parallel_secs * 1e3
        );
    }
    println!(
        "log-log slope: sequential {:.3}, parallel {:.3}",
        b.sequential_slope, b.parallel_slope
    );
    if let Some(path) = &a.report {
        let rows: Vec<_> = b
            .rows
            .iter()
            .map(|r| json!({ "len": r.len, "sequential_s": r.sequential_secs, "parallel_s": r.parallel_secs }))
            .collect();
        let report = json!({
            "channels": b.channels,
            "state": b.state,
            "repeats": a.repeats,
            "rows": rows,
            "sequential_slope": b.sequential_slope,
            "parallel_slope": b.parallel_slope,
        });
        fs::write(path, serde_json::to_string_pretty(&report).expect("json"))?;
    }
    Ok(())
}
