//! Observation length shift on synthetic data: a model trained at the
//! longest length, isolated per-length models, and the three-branch model,
//! each evaluated at every training length.
//!
//! Usage: cargo run --release --example length_shift [scenes] [epochs] [seeds]

use flexilength::backbone::BackboneConfig;
use flexilength::data::{generate_synthetic, split_dataset, SynthConfig};
use flexilength::eval::{evaluate, EvalSpec};
use flexilength::trainstrat::{train_fln, train_isolated, TrainConfig};

fn main() -> flexilength::Result<()> {
    let args: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let scenes = args.first().copied().unwrap_or(2000);
    let epochs = args.get(1).copied().unwrap_or(10);
    let seeds = args.get(2).copied().unwrap_or(3);
    let lengths = [2usize, 6, 8];
    let mut rows = Vec::new();
    for seed in 0..seeds as u64 {
        let t0 = std::time::Instant::now();
        let raw = generate_synthetic(&SynthConfig { scenes, seed, ..SynthConfig::default() })?;
        let split = split_dataset(&raw, 12)?;
        let cfg = TrainConfig {
            epochs,
            seed,
            backbone: BackboneConfig::default(),
            ..TrainConfig::default()
        };
        let spec = EvalSpec { samples: 3, horizon: 12, ..EvalSpec::default() };
        let fln = train_fln(&split, &cfg)?;
        let its: Vec<_> = lengths.iter().map(|&h| train_isolated(&split, h, &cfg)).collect::<Result<_, _>>()?;
        let mut row = Vec::new();
        for (i, &h) in lengths.iter().enumerate() {
            let proto = evaluate(&its[2].params, &split.test, h, &spec)?.ade;
            let it = evaluate(&its[i].params, &split.test, h, &spec)?.ade;
            let f = evaluate(&fln.params, &split.test, h, &spec)?.ade;
            row.push((h, proto, it, f));
        }
        println!("seed {seed} ({:.1}s)", t0.elapsed().as_secs_f64());
        for (h, p, it, f) in &row {
            println!("  H={h}: prototype {p:.4}  isolated {it:.4}  fln {f:.4}");
        }
        rows.push(row);
    }
    for i in 0..lengths.len() {
        let mean = |k: usize| rows.iter().map(|r| [r[i].1, r[i].2, r[i].3][k]).sum::<f64>() / rows.len() as f64;
        println!("mean H={}: prototype {:.4}  isolated {:.4}  fln {:.4}", lengths[i], mean(0), mean(1), mean(2));
    }
    Ok(())
}
