//! Synthetic transfer experiment: pretraining on a related high-resource
//! language, then fine-tuning, against training on the low-resource
//! language alone.
//!
//! cargo run --release --example transfer_experiment -- [seeds] [work_dir]

use std::path::PathBuf;
use std::time::Instant;

use anyhow::Result;
use tigmt::metrics::render_table;
use tigmt::synthetic::{transfer_pipeline, write_transfer_task, TransferSizes};
use tigmt::trainer::run_experiment;

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let seeds: u64 = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(1);
    let work: PathBuf = std::env::args()
        .nth(2)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("tigmt-transfer"));

    let mut wins = 0;
    for seed in 0..seeds {
        let t0 = Instant::now();
        let dir = work.join(format!("seed{seed}"));
        let files = write_transfer_task(&dir.join("data"), TransferSizes::default(), seed)?;
        let config = transfer_pipeline(&files, &dir.join("runs"), seed);
        let (_, staged, rows) = run_experiment(&config)?;
        let base = rows[0].bleu.unwrap_or(0.0);
        let best = staged.last().and_then(|o| o.report.bleu).unwrap_or(0.0);
        if best >= base {
            wins += 1;
        }
        println!("seed {seed} ({:.0}s)", t0.elapsed().as_secs_f64());
        print!("{}", render_table(&rows));
    }
    println!("staged >= baseline in {wins} of {seeds} seeds");
    Ok(())
}
