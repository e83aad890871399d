//! Evaluates a trained three-branch model at every observation length from
//! 1 to 10 and shows which branch each length is routed to.
//!
//! Usage: cargo run --release --example generality_sweep [epochs]

use flexilength::data::{generate_synthetic, split_dataset, SynthConfig};
use flexilength::eval::{generality_sweep, sweep_csv};
use flexilength::trainstrat::{train_fln, train_isolated, TrainConfig};

fn main() -> flexilength::Result<()> {
    let epochs = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(8);
    let cfg = TrainConfig { epochs, ..TrainConfig::default() };
    // histories longer than any branch
    let raw = generate_synthetic(&SynthConfig { scenes: 600, obs_len: 10, ..SynthConfig::default() })?;
    let split = split_dataset(&raw, cfg.backbone.horizon)?;
    let lengths: Vec<usize> = (1..=10).collect();

    let fln = train_fln(&split, &cfg)?;
    let single = train_isolated(&split, cfg.branch.lengths.long, &cfg)?;
    let fln_rows = generality_sweep(&fln.params, &split.test, &lengths, &cfg.eval);
    let single_rows = generality_sweep(&single.params, &split.test, &lengths, &cfg.eval);
    println!("  H'  branch  FLN ADE   single-length ADE");
    for (f, s) in fln_rows.iter().zip(&single_rows) {
        match (f.metrics, s.metrics) {
            (Some(fm), Some(sm)) => println!("{:>4}  {:>6}  {:.4}    {:.4}", f.length, fm.branch.to_string(), fm.ade, sm.ade),
            _ => println!("{:>4}  {}", f.length, f.error.as_deref().or(s.error.as_deref()).unwrap_or("")),
        }
    }
    print!("\n{}", sweep_csv(&fln_rows));
    Ok(())
}
