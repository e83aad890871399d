mod common;

use common::{synthetic_split, tiny_backbone};
use flexilength::backbone::{BranchLengths, FlnParams};
use flexilength::data::{generate_synthetic, split_dataset, MotionMix, SynthConfig};
use flexilength::eval::EvalSpec;
use flexilength::fln::BranchConfig;
use flexilength::trainstrat::{
    expand_joint, renormalize, train, train_finetune, train_fln, train_isolated, train_joint, train_mixed, LengthSampler, Strategy, TrainConfig,
    TrainOutput, Trained,
};

fn cfg(epochs: usize) -> TrainConfig {
    let backbone = tiny_backbone();
    TrainConfig {
        epochs,
        batch_size: 8,
        seed: 3,
        eval: EvalSpec { samples: 2, horizon: backbone.horizon, ..EvalSpec::default() },
        backbone,
        branch: BranchConfig { lengths: BranchLengths::new(2, 3, 4).unwrap(), ..BranchConfig::default() },
        ..TrainConfig::default()
    }
}

fn same_run(a: &Trained, b: &Trained) {
    assert_eq!(a.params, b.params);
    assert_eq!(a.adam, b.adam);
    assert_eq!(a.log.rows.len(), b.log.rows.len());
    for (x, y) in a.log.rows.iter().zip(&b.log.rows) {
        assert_eq!((x.l_reg, x.l_kl, x.total, &x.val), (y.l_reg, y.l_kl, y.total, &y.val));
    }
}

#[test]
fn every_strategy_is_seed_deterministic() {
    let split = synthetic_split(60, 4, 3, 1);
    let base = TrainConfig { finetune_max_epochs: 2, finetune_target: 2, length: Some(3), ..cfg(2) };
    for strategy in [Strategy::Fln, Strategy::Isolated, Strategy::Mixed, Strategy::Finetune, Strategy::Joint] {
        let c = TrainConfig { strategy, ..base.clone() };
        match (train(&split, &c).unwrap(), train(&split, &c).unwrap()) {
            (TrainOutput::Single(a), TrainOutput::Single(b)) => same_run(&a, &b),
            (TrainOutput::Finetune { pretrained: a0, tuned: a1 }, TrainOutput::Finetune { pretrained: b0, tuned: b1 }) => {
                same_run(&a0, &b0);
                same_run(&a1, &b1);
            }
            (TrainOutput::Joint(a), TrainOutput::Joint(b)) => a.iter().zip(&b).for_each(|(x, y)| same_run(x, y)),
            _ => panic!("{strategy}: output kinds differ"),
        }
    }
    let other = train_fln(&split, &TrainConfig { seed: 4, ..base.clone() }).unwrap();
    assert_ne!(other.params, train_fln(&split, &base).unwrap().params);
}

#[test]
fn mixed_with_only_the_long_length_is_isolated_training() {
    let split = synthetic_split(60, 4, 3, 2);
    for epochs in 1..=3 {
        let c = cfg(epochs);
        let mixed = train_mixed(&split, [0.0, 0.0, 1.0], &c).unwrap();
        let isolated = train_isolated(&split, 4, &c).unwrap();
        same_run(&mixed, &isolated);
    }
}

#[test]
fn length_draws_match_rho() {
    assert_eq!(renormalize([0.5, 0.5, 0.5]), [1.0 / 3.0; 3]);
    let rho = [0.2, 0.3, 0.5];
    let n = 10_000;
    let mut s = LengthSampler::new(rho, 7).unwrap();
    let mut counts = [0usize; 3];
    for _ in 0..n {
        counts[s.draw()] += 1;
    }
    for (c, p) in counts.iter().zip(rho) {
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        assert!((*c as f64 - n as f64 * p).abs() < 3.0 * sigma, "{counts:?}");
    }
    assert!(LengthSampler::new([0.0, 0.0, 0.0], 1).is_err());
}

#[test]
fn loss_halves_on_noiseless_constant_velocity_data() {
    let raw = generate_synthetic(&SynthConfig {
        scenes: 120,
        max_agents: 2,
        obs_len: 4,
        horizon: 3,
        noise: 0.0,
        repulsion: 0.0,
        mix: MotionMix { constant_velocity: 1.0, turn: 0.0, stop_and_go: 0.0 },
        ..SynthConfig::default()
    })
    .unwrap();
    let split = split_dataset(&raw, 3).unwrap();
    let t = train_fln(&split, &cfg(30)).unwrap();
    let first = t.log.rows[0].total;
    let last = t.log.rows.last().unwrap().total;
    assert!(first - last >= 0.5 * first.abs(), "loss {first} -> {last}");
}

#[test]
fn zero_lambda_leaves_short_branches_out_of_the_loss() {
    let split = synthetic_split(40, 4, 3, 5);
    let c = TrainConfig { branch: BranchConfig { lambda: 0.0, ..cfg(1).branch }, ..cfg(1) };
    let t = train_fln(&split, &c).unwrap();
    for e in t.params.store.entries() {
        if e.name.contains(".S.") || e.name.contains(".M.") {
            let init = FlnParams::flexi(c.backbone.clone(), c.branch.lengths, c.branch.switches, c.init_seed()).unwrap();
            assert_eq!(&e.value, init.store.get(&e.name).unwrap(), "{}", e.name);
        }
    }
    assert!(t.log.rows.iter().all(|r| r.total == r.l_reg));
}

#[test]
fn joint_trains_three_models_on_three_times_the_data() {
    let split = synthetic_split(40, 4, 3, 6);
    let expanded = expand_joint(&split.train, &[2, 3, 4], 3).unwrap();
    assert_eq!(expanded.len(), 3 * split.train.len());
    let models = train_joint(&split, &cfg(1)).unwrap();
    assert_eq!(models.len(), 3);
    assert_eq!(models.iter().map(|m| m.eval_lengths[0]).collect::<Vec<_>>(), vec![2, 3, 4]);
    let single = train_isolated(&split, 4, &cfg(1)).unwrap().params.store.numel();
    assert_eq!(models.iter().map(|m| m.params.store.numel()).sum::<usize>(), 3 * single);
    assert_ne!(models[0].params, models[1].params);
}

#[test]
fn finetune_keeps_the_pretrained_model_and_stops_on_plateau() {
    let split = synthetic_split(80, 4, 3, 7);
    let c = TrainConfig { finetune_target: 2, patience: 1, finetune_max_epochs: 6, ..cfg(2) };
    let (pre, tuned) = train_finetune(&split, &c).unwrap();
    assert_eq!(pre.params, train_isolated(&split, 4, &c).unwrap().params);
    assert_eq!(tuned.eval_lengths, vec![2]);
    let tuning: Vec<_> = tuned.log.rows.iter().filter(|r| r.phase == "finetune").collect();
    assert!(!tuning.is_empty() && tuning.len() <= 6);
    let best = tuning.iter().map(|r| r.val[0].ade).fold(f64::INFINITY, f64::min);
    let m = flexilength::eval::evaluate(&tuned.params, &split.val, 2, &c.eval).unwrap();
    assert_eq!(m.ade, best);
    assert!(train_finetune(&split, &TrainConfig { finetune_target: 9, ..c }).is_err());
}

#[test]
fn invalid_configs_are_rejected() {
    let split = synthetic_split(20, 4, 3, 8);
    assert!(train_fln(&split, &TrainConfig { lr: 0.0, ..cfg(1) }).is_err());
    assert!(train_mixed(&split, [0.0, 0.0, 0.0], &cfg(1)).is_err());
    assert!(train(&split, &TrainConfig { strategy: Strategy::Isolated, length: None, ..cfg(1) }).is_err());
    let mut empty = split.clone();
    empty.train.clear();
    assert!(train_fln(&empty, &cfg(1)).is_err());
    assert_eq!("joint".parse::<Strategy>().unwrap(), Strategy::Joint);
}

#[test]
fn validation_rows_are_logged_when_enabled() {
    let split = synthetic_split(40, 4, 3, 9);
    let t = train_fln(&split, &TrainConfig { validate: true, ..cfg(2) }).unwrap();
    assert!(t.log.rows.iter().all(|r| r.val.iter().map(|v| v.length).eq([2, 3, 4])));
    let csv = t.log.to_csv();
    assert!(csv.starts_with("epoch,phase,l_reg,l_kl,total,val_ade_2,val_fde_2"));
    assert_eq!(csv.lines().count(), 3);
}
