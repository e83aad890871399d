//! Saves a briefly trained model with its optimizer state and configuration,
//! reloads it, and checks the round trip is bit-identical.

use flexilength::cli::{Checkpoint, RunConfig};
use flexilength::data::{generate_synthetic, split_dataset};
use flexilength::eval::evaluate;
use flexilength::trainstrat::train_fln;

fn main() -> flexilength::Result<()> {
    let mut cfg = RunConfig::parse_text("scenes = 120\nepochs = 2\nseed = 11\n")?;
    cfg.apply_overrides(&["batch_size=16".to_string()])?;
    let split = split_dataset(&generate_synthetic(&cfg.synth)?, cfg.train.backbone.horizon)?;
    let trained = train_fln(&split, &cfg.train)?;

    let dir = std::env::temp_dir().join(format!("fln-checkpoint-example-{}", std::process::id()));
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("model.ckpt");
    let ck = Checkpoint::from_trained(&cfg, &trained);
    ck.save(&path)?;
    let loaded = Checkpoint::load(&path)?;
    println!("wrote {} bytes to {}", std::fs::metadata(&path)?.len(), path.display());
    println!("epochs {}, eval lengths {:?}, adam step {}", loaded.epoch, loaded.eval_lengths, loaded.adam.as_ref().map_or(0, |a| a.t));
    println!("identical after reload: {}", loaded == ck && loaded.to_bytes()? == ck.to_bytes()?);

    let h = cfg.train.branch.lengths.medium;
    let before = evaluate(&trained.params, &split.test, h, &cfg.train.eval)?;
    let after = evaluate(&loaded.params, &split.test, h, &cfg.train.eval)?;
    println!("test ADE at H={h}: {:.6} before, {:.6} after", before.ade, after.ade);
    print!("\nconfiguration:\n{}", loaded.config.to_text());
    std::fs::remove_dir_all(&dir)?;
    Ok(())
}
