//! Trains the three-branch model on synthetic scenes and reports test
//! ADE/FDE at each branch length.
//!
//! Usage: cargo run --release --example train_fln [scenes] [epochs]

use flexilength::backbone::BranchId;
use flexilength::data::{generate_synthetic, split_dataset, SynthConfig};
use flexilength::eval::evaluate;
use flexilength::fln::count_parameters;
use flexilength::trainstrat::{train_fln, TrainConfig};

fn main() -> flexilength::Result<()> {
    let args: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let cfg = TrainConfig { epochs: args.get(1).copied().unwrap_or(10), validate: true, ..TrainConfig::default() };
    let raw = generate_synthetic(&SynthConfig { scenes: args.first().copied().unwrap_or(600), ..SynthConfig::default() })?;
    let split = split_dataset(&raw, cfg.backbone.horizon)?;

    let trained = train_fln(&split, &cfg)?;
    for r in &trained.log.rows {
        let val: Vec<String> = r.val.iter().map(|v| format!("H={} {:.3}", v.length, v.ade)).collect();
        println!("epoch {:>3}  L_reg {:+.4}  L_kl {:.4}  val ADE {}", r.epoch, r.l_reg, r.l_kl, val.join(" "));
    }
    let count = count_parameters(&trained.params);
    println!("{} parameters, {:.2}% over a single-length model", count.total, 100.0 * count.overhead);
    for b in BranchId::ALL {
        let h = trained.params.branch_len(b)?;
        let m = evaluate(&trained.params, &split.test, h, &cfg.eval)?;
        println!("test H={h} ({b}): ADE_{} {:.4}  FDE_{} {:.4}", m.k, m.ade, m.k, m.fde);
    }
    Ok(())
}
