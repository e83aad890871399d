//! Positional-encoding deviation between observation lengths, and per-position
//! layer-norm input statistics of models trained at different lengths.
//!
//! Usage: cargo run --release --example probes [epochs]

use flexilength::backbone::BranchId;
use flexilength::data::{generate_synthetic, split_dataset, SynthConfig};
use flexilength::eval::{ln_statistics_probe, max_mean_gap, pe_deviation_report};
use flexilength::trainstrat::{train_fln, train_isolated, TrainConfig};

fn main() -> flexilength::Result<()> {
    let epochs = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(8);
    let cfg = TrainConfig { epochs, ..TrainConfig::default() };
    let d = cfg.backbone.d_model;
    for (h1, h2) in [(8, 8), (8, 6), (8, 2)] {
        let r = pe_deviation_report(d, h1, h2);
        let cells: Vec<String> = r.distances.iter().map(|x| format!("{x:.3}")).collect();
        println!("PE deviation H1={h1} H2={h2}: [{}]", cells.join(", "));
    }

    let raw = generate_synthetic(&SynthConfig { scenes: 600, ..SynthConfig::default() })?;
    let split = split_dataset(&raw, cfg.backbone.horizon)?;
    let horizon = cfg.backbone.horizon;
    let (short, long) = (cfg.branch.lengths.short, cfg.branch.lengths.long);
    let it_short = train_isolated(&split, short, &cfg)?;
    let it_long = train_isolated(&split, long, &cfg)?;
    let fln = train_fln(&split, &cfg)?;

    let a = ln_statistics_probe(&it_short.params, &split.test, short, BranchId::L, horizon)?;
    let b = ln_statistics_probe(&it_long.params, &split.test, long, BranchId::L, horizon)?;
    let c = ln_statistics_probe(&fln.params, &split.test, short, BranchId::S, horizon)?;
    for site in &a.sites {
        let m: Vec<String> = site.mean.iter().map(|x| format!("{x:+.3}")).collect();
        println!("IT H={short} {}: mean per position [{}]", site.site, m.join(", "));
    }
    println!("max mean gap, IT H={short} vs IT H={long}: {:.4}", max_mean_gap(&a, &b));
    println!("max mean gap, FLN branch S vs IT H={short}: {:.4}", max_mean_gap(&c, &a));
    Ok(())
}
