//! Every training strategy on the same small dataset, evaluated at each
//! observation length.
//!
//! Usage: cargo run --release --example baselines [epochs]

use flexilength::backbone::FlnParams;
use flexilength::data::{generate_synthetic, split_dataset, SynthConfig};
use flexilength::eval::evaluate;
use flexilength::trainstrat::{train, Strategy, TrainConfig, TrainOutput};

fn main() -> flexilength::Result<()> {
    let epochs = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(6);
    let raw = generate_synthetic(&SynthConfig { scenes: 400, ..SynthConfig::default() })?;
    let base = TrainConfig { epochs, finetune_max_epochs: epochs, ..TrainConfig::default() };
    let split = split_dataset(&raw, base.backbone.horizon)?;
    let l = base.branch.lengths;
    let lengths = [l.short, l.medium, l.long];

    let report = |name: &str, models: &[(usize, &FlnParams)]| -> flexilength::Result<()> {
        let mut line = format!("{name:<12}");
        for &h in &lengths {
            let p = models.iter().find(|(len, _)| *len == h).or(models.last()).map(|m| m.1).expect("a model");
            line.push_str(&format!("  H={h}: {:.4}", evaluate(p, &split.test, h, &base.eval)?.ade));
        }
        println!("{line}");
        Ok(())
    };

    for strategy in [Strategy::Fln, Strategy::Mixed, Strategy::Finetune, Strategy::Joint] {
        match train(&split, &TrainConfig { strategy, ..base.clone() })? {
            TrainOutput::Single(t) => report(&strategy.to_string(), &[(0, &t.params)])?,
            TrainOutput::Finetune { pretrained, tuned } => {
                report("prototype", &[(0, &pretrained.params)])?;
                report(&strategy.to_string(), &[(tuned.eval_lengths[0], &tuned.params), (0, &pretrained.params)])?;
            }
            TrainOutput::Joint(ms) => report(&strategy.to_string(), &ms.iter().map(|m| (m.eval_lengths[0], &m.params)).collect::<Vec<_>>())?,
        }
    }
    let isolated: Vec<_> = lengths
        .iter()
        .map(|&h| train(&split, &TrainConfig { strategy: Strategy::Isolated, length: Some(h), ..base.clone() }))
        .collect::<Result<_, _>>()?;
    let params: Vec<(usize, &FlnParams)> = isolated
        .iter()
        .zip(lengths)
        .map(|(o, h)| match o {
            TrainOutput::Single(t) => (h, &t.params),
            _ => unreachable!("isolated training returns one model"),
        })
        .collect();
    report("isolated", &params)
}
