//! Synthetic multi-agent scenes, the seeded train/val/test split, and the
//! observation windows each branch sees.
//!
//! Usage: cargo run --example synthetic_data [scenes]

use flexilength::backbone::{BranchId, BranchLengths};
use flexilength::data::{derive_observations, generate_synthetic, parse_trajnet, split_dataset, DeriveMode, SynthConfig};

fn main() -> flexilength::Result<()> {
    let scenes = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(200);
    let cfg = SynthConfig { scenes, ..SynthConfig::default() };
    let raw = generate_synthetic(&cfg)?;
    let agents: usize = raw.iter().map(|s| s.agents()).sum();
    println!("{} scenes, {agents} agents, {} frames each at dt {}", raw.len(), raw[0].frames(), raw[0].dt);
    let first = &raw[0];
    for a in 0..first.agents() {
        let start = first.at(a, 0);
        let end = first.at(a, first.frames() - 1);
        println!("  scene 0 agent {a}: ({:.2}, {:.2}) -> ({:.2}, {:.2})", start[0], start[1], end[0], end[1]);
    }

    let split = split_dataset(&raw, cfg.horizon)?;
    println!("split train/val/test = {}/{}/{}", split.train.len(), split.val.len(), split.test.len());
    println!("normalization scale {:.3} m", split.stats.scale);

    let lengths = BranchLengths::new(2, 6, 8)?;
    for mode in [DeriveMode::Truncation, DeriveMode::Sliding] {
        let b = derive_observations(&split.train[0], lengths, cfg.horizon, mode)?;
        let shapes: Vec<String> = BranchId::ALL.iter().map(|&id| format!("{id}: {:?}", b.input(id).shape())).collect();
        println!("{mode:?} inputs  {}", shapes.join("  "));
    }

    let text = "0 1 0.0 0.0\n0 2 1.0 0.0\n10 1 0.4 0.1\n10 2 1.4 0.1\n20 1 0.8 0.2\n20 2 1.8 0.2\n";
    let parsed = parse_trajnet(text, 3, 1, 0.4)?;
    println!("parsed {} scene(s) from frame-agent-x-y text, {} agents", parsed.len(), parsed[0].agents());
    Ok(())
}
