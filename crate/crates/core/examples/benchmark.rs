//! Runs the phantom benchmark and prints its evaluation summary.
//!
//! Usage: `benchmark [generator_steps] [batch_size] [seed]`

use std::time::Instant;

use reconscan::benchmark::{run_benchmark, BenchmarkConfig};

fn main() -> reconscan::Result<()> {
    let args: Vec<u64> = std::env::args()
        .skip(1)
        .map(|a| a.parse().expect("integer argument"))
        .collect();
    let mut config = BenchmarkConfig::default().with_seed(args.get(2).copied().unwrap_or(0));
    if let Some(&steps) = args.first() {
        config.train.generator_steps = steps as usize;
    }
    if let Some(&bs) = args.get(1) {
        config.train.batch_size = bs as usize;
    }
    let start = Instant::now();
    let report = run_benchmark(&config)?;
    for r in &report.reports {
        print!("{}", r.to_text());
    }
    println!("elapsed {:.1}s", start.elapsed().as_secs_f64());
    Ok(())
}
