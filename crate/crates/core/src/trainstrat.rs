//! Optimizer and training loops: the three-branch model plus isolated,
//! mixed-sampling, fine-tuning and joint baselines.

use std::fmt::Write as _;
use std::time::Instant;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneConfig, BranchId, FlnParams};
use crate::data::{derive_observations, derive_seed, make_batches, observation_at, DatasetSplit, DeriveMode, ObservationBundle, Scene};
use crate::distributions::nll;
use crate::eval::{evaluate, EvalSpec};
use crate::fln::{fln_loss, BranchConfig};
use crate::params::{Bound, ParamStore};
use crate::tensorgrad::{Tape, Tensor, Var};
use crate::{Error, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

const INIT_STREAM: u64 = 1;
const SHUFFLE_STREAM: u64 = 2;
const LENGTH_STREAM: u64 = 3;
const JOINT_STREAM: u64 = 16;

/// Adam moments, one pair per parameter in store order.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store.entries().iter().map(|e| Tensor::zeros(e.value.shape())).collect();
        Adam {
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One bias-corrected update. Parameters whose gradient is `None` are
    /// left untouched, moments included.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>], lr: f64) -> Result<()> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return Err(Error::Config(format!(
                "optimizer holds {} slots, store {} and gradients {}",
                self.m.len(),
                store.len(),
                grads.len()
            )));
        }
        self.t += 1;
        let c1 = 1.0 - BETA1.powi(self.t as i32);
        let c2 = 1.0 - BETA2.powi(self.t as i32);
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = store.value_at_mut(i).data_mut();
            for j in 0..p.len() {
                let gj = g.data()[j];
                m[j] = BETA1 * m[j] + (1.0 - BETA1) * gj;
                v[j] = BETA2 * v[j] + (1.0 - BETA2) * gj * gj;
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                p[j] -= lr * mh / (vh.sqrt() + ADAM_EPS);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Fln,
    Isolated,
    Mixed,
    Finetune,
    Joint,
}

impl std::str::FromStr for Strategy {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "fln" => Ok(Strategy::Fln),
            "isolated" => Ok(Strategy::Isolated),
            "mixed" => Ok(Strategy::Mixed),
            "finetune" => Ok(Strategy::Finetune),
            "joint" => Ok(Strategy::Joint),
            other => Err(format!("unknown strategy `{other}`")),
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Strategy::Fln => "fln",
            Strategy::Isolated => "isolated",
            Strategy::Mixed => "mixed",
            Strategy::Finetune => "finetune",
            Strategy::Joint => "joint",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub strategy: Strategy,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub backbone: BackboneConfig,
    pub branch: BranchConfig,
    /// Length draw probabilities for mixed sampling, S, M, L; renormalized.
    pub rho: [f64; 3],
    /// Observation length of isolated training.
    pub length: Option<usize>,
    /// Length fine-tuning moves to.
    pub finetune_target: usize,
    pub patience: usize,
    pub finetune_max_epochs: usize,
    pub derive_mode: DeriveMode,
    /// Record validation metrics after every epoch.
    pub validate: bool,
    pub eval: EvalSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let backbone = BackboneConfig::default();
        TrainConfig {
            strategy: Strategy::Fln,
            epochs: 20,
            batch_size: 32,
            lr: 3e-3,
            seed: 0,
            eval: EvalSpec {
                samples: backbone.modes,
                horizon: backbone.horizon,
                ..EvalSpec::default()
            },
            backbone,
            branch: BranchConfig::default(),
            rho: [1.0, 1.0, 1.0],
            length: None,
            finetune_target: 2,
            patience: 5,
            finetune_max_epochs: 50,
            derive_mode: DeriveMode::Truncation,
            validate: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.branch.validate()?;
        if self.epochs == 0 || self.batch_size == 0 || !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("epochs, batch size and learning rate must be positive".into()));
        }
        if self.rho.iter().any(|&r| !(0.0..=1.0).contains(&r)) || self.rho.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Config(format!("rho values must lie in [0, 1] and not all be zero: {:?}", self.rho)));
        }
        if self.strategy == Strategy::Isolated {
            match self.length {
                Some(h) if h >= 1 => {}
                _ => return Err(Error::Config("isolated training requires a length".into())),
            }
        }
        if self.strategy == Strategy::Finetune
            && (self.finetune_target == 0 || self.finetune_target > self.branch.lengths.long || self.patience == 0)
        {
            return Err(Error::Config(format!(
                "fine-tune target must lie in 1..={} with positive patience",
                self.branch.lengths.long
            )));
        }
        if self.eval.horizon != self.backbone.horizon {
            return Err(Error::Config("evaluation horizon differs from the model horizon".into()));
        }
        Ok(())
    }

    pub fn init_seed(&self) -> u64 {
        derive_seed(self.seed, INIT_STREAM)
    }

    fn shuffle_rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(derive_seed(self.seed, SHUFFLE_STREAM))
    }

    fn lengths(&self) -> [usize; 3] {
        let l = self.branch.lengths;
        [l.short, l.medium, l.long]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LengthScore {
    pub length: usize,
    pub ade: f64,
    pub fde: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub phase: String,
    pub l_reg: f64,
    pub l_kl: f64,
    pub total: f64,
    pub val: Vec<LengthScore>,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub rows: Vec<EpochRow>,
}

impl TrainLog {
    /// One row per epoch; validation columns for every length seen.
    pub fn to_csv(&self) -> String {
        let mut lengths: Vec<usize> = self.rows.iter().flat_map(|r| r.val.iter().map(|v| v.length)).collect();
        lengths.sort_unstable();
        lengths.dedup();
        let mut out = String::from("epoch,phase,l_reg,l_kl,total");
        for h in &lengths {
            write!(out, ",val_ade_{h},val_fde_{h}").expect("string write");
        }
        out.push_str(",seconds\n");
        for r in &self.rows {
            write!(out, "{},{},{},{},{}", r.epoch, r.phase, r.l_reg, r.l_kl, r.total).expect("string write");
            for h in &lengths {
                match r.val.iter().find(|v| v.length == *h) {
                    Some(v) => write!(out, ",{},{}", v.ade, v.fde),
                    None => write!(out, ",,"),
                }
                .expect("string write");
            }
            writeln!(out, ",{}", r.seconds).expect("string write");
        }
        out
    }

    pub fn summary(&self) -> serde_json::Value {
        let last = self.rows.last();
        serde_json::json!({
            "epochs": self.rows.len(),
            "final_total": last.map(|r| r.total),
            "final_l_reg": last.map(|r| r.l_reg),
            "final_l_kl": last.map(|r| r.l_kl),
            "final_val": last.map(|r| r.val.clone()),
            "seconds": self.rows.iter().map(|r| r.seconds).sum::<f64>(),
        })
    }
}

#[derive(Debug, Clone)]
pub struct Trained {
    pub params: FlnParams,
    pub adam: Adam,
    pub log: TrainLog,
    /// Lengths this model is meant to be evaluated at.
    pub eval_lengths: Vec<usize>,
}

#[derive(Debug, Clone)]
#[allow(clippy::large_enum_variant)]
pub enum TrainOutput {
    Single(Trained),
    Finetune { pretrained: Trained, tuned: Trained },
    Joint(Vec<Trained>),
}

struct StepLoss {
    total: Var,
    l_reg: Var,
    l_kl: Option<Var>,
}

/// Runs one epoch over `batches`, stepping Adam after each.
fn run_epoch<F>(params: &mut FlnParams, adam: &mut Adam, batches: &[Vec<usize>], lr: f64, mut loss: F) -> Result<[f64; 3]>
where
    F: FnMut(&mut Tape, &FlnParams, &Bound, &[usize]) -> Result<StepLoss>,
{
    let mut sums = [0.0; 3];
    for batch in batches {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, true)?;
        let l = loss(&mut tape, params, &bound, batch)?;
        sums[0] += tape.value(l.l_reg).item()?;
        sums[1] += l.l_kl.map_or(Ok(0.0), |v| tape.value(v).item())?;
        sums[2] += tape.value(l.total).item()?;
        tape.backward(l.total)?;
        adam.step(&mut params.store, &bound.grads(&tape), lr)?;
    }
    let n = batches.len().max(1) as f64;
    Ok(sums.map(|s| s / n))
}

fn validation(params: &FlnParams, val: &[Scene], lengths: &[usize], cfg: &TrainConfig) -> Result<Vec<LengthScore>> {
    if !cfg.validate || val.is_empty() {
        return Ok(Vec::new());
    }
    lengths
        .iter()
        .map(|&h| {
            let m = evaluate(params, val, h, &cfg.eval)?;
            Ok(LengthScore { length: h, ade: m.ade, fde: m.fde })
        })
        .collect()
}

fn stack_pairs(pairs: &[(Tensor, Tensor)], idx: &[usize]) -> Result<(Tensor, Tensor)> {
    let cat = |get: &dyn Fn(&(Tensor, Tensor)) -> &Tensor| -> Result<Tensor> {
        let mut shape = get(&pairs[idx[0]]).shape().to_vec();
        shape[0] = idx.len();
        let data = idx.iter().flat_map(|&i| get(&pairs[i]).data().iter().copied()).collect();
        Ok(Tensor::new(shape, data)?)
    };
    Ok((cat(&|p| &p.0)?, cat(&|p| &p.1)?))
}

fn require_train(split: &DatasetSplit) -> Result<()> {
    if split.train.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    Ok(())
}

/// Trains all three branches jointly on the combined loss.
pub fn train_fln(split: &DatasetSplit, cfg: &TrainConfig) -> Result<Trained> {
    cfg.validate()?;
    require_train(split)?;
    let bc = cfg.branch;
    let mut params = FlnParams::flexi(cfg.backbone.clone(), bc.lengths, bc.switches, cfg.init_seed())?;
    let mut adam = Adam::new(&params.store);
    let bundles: Vec<ObservationBundle> = split
        .train
        .iter()
        .map(|s| derive_observations(s, bc.lengths, cfg.backbone.horizon, cfg.derive_mode))
        .collect::<std::result::Result<_, _>>()?;
    let keys: Vec<usize> = bundles.iter().map(|b| b.agents()).collect();
    let mut rng = cfg.shuffle_rng();
    let mut log = TrainLog::default();
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let batches = make_batches(&keys, cfg.batch_size, Some(&mut rng));
        let [l_reg, l_kl, total] = run_epoch(&mut params, &mut adam, &batches, cfg.lr, |tape, p, bound, idx| {
            let parts: Vec<&ObservationBundle> = idx.iter().map(|&i| &bundles[i]).collect();
            let batch = ObservationBundle::stack(&parts)?;
            let (l, _) = fln_loss(tape, p, bound, &batch, &bc)?;
            Ok(StepLoss {
                total: l.total,
                l_reg: l.l_reg,
                l_kl: Some(l.l_kl),
            })
        })?;
        log.rows.push(EpochRow {
            epoch,
            phase: "fln".into(),
            l_reg,
            l_kl,
            total,
            val: validation(&params, &split.val, &cfg.lengths(), cfg)?,
            seconds: start.elapsed().as_secs_f64(),
        });
    }
    Ok(Trained {
        params,
        adam,
        log,
        eval_lengths: cfg.lengths().to_vec(),
    })
}

/// Single-length training loop shared by isolated, mixed and fine-tune
/// training. `draw` picks the observed length of each batch.
#[allow(clippy::too_many_arguments)]
fn train_single_loop(
    params: &mut FlnParams,
    adam: &mut Adam,
    samples: &[Vec<(Tensor, Tensor)>],
    keys: &[usize],
    epochs: usize,
    phase: &str,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
    mut draw: impl FnMut(&[usize]) -> usize,
    mut after_epoch: impl FnMut(&FlnParams, &mut EpochRow) -> Result<bool>,
    log: &mut TrainLog,
) -> Result<()> {
    for _ in 0..epochs {
        let start = Instant::now();
        let batches = make_batches(keys, cfg.batch_size, Some(rng));
        let [l_reg, _, total] = run_epoch(params, adam, &batches, cfg.lr, |tape, p, bound, idx| {
            let slot = draw(idx);
            let (obs, fut) = stack_pairs(&samples[slot], idx)?;
            let pred = p.forward_open(tape, bound, &obs, BranchId::L, None)?;
            let l = nll(tape, &pred, &fut)?;
            Ok(StepLoss { total: l, l_reg: l, l_kl: None })
        })?;
        let mut row = EpochRow {
            epoch: log.rows.len(),
            phase: phase.to_string(),
            l_reg,
            l_kl: 0.0,
            total,
            val: Vec::new(),
            seconds: 0.0,
        };
        let stop = after_epoch(params, &mut row)?;
        row.seconds = start.elapsed().as_secs_f64();
        log.rows.push(row);
        if stop {
            break;
        }
    }
    Ok(())
}

fn pairs_at(scenes: &[Scene], h: usize, horizon: usize) -> Result<Vec<(Tensor, Tensor)>> {
    Ok(scenes
        .iter()
        .map(|s| observation_at(s, h, horizon))
        .collect::<std::result::Result<_, _>>()?)
}

/// A single-length model trained and validated at `h` only.
pub fn train_isolated(split: &DatasetSplit, h: usize, cfg: &TrainConfig) -> Result<Trained> {
    let cfg = TrainConfig {
        strategy: Strategy::Isolated,
        length: Some(h),
        ..cfg.clone()
    };
    cfg.validate()?;
    require_train(split)?;
    let mut params = FlnParams::single(cfg.backbone.clone(), h, cfg.init_seed())?;
    let mut adam = Adam::new(&params.store);
    let samples = vec![pairs_at(&split.train, h, cfg.backbone.horizon)?];
    let keys: Vec<usize> = split.train.iter().map(|s| s.agents()).collect();
    let mut rng = cfg.shuffle_rng();
    let mut log = TrainLog::default();
    train_single_loop(
        &mut params,
        &mut adam,
        &samples,
        &keys,
        cfg.epochs,
        "isolated",
        &cfg,
        &mut rng,
        |_| 0,
        |p, row| {
            row.val = validation(p, &split.val, &[h], &cfg)?;
            Ok(false)
        },
        &mut log,
    )?;
    Ok(Trained {
        params,
        adam,
        log,
        eval_lengths: vec![h],
    })
}

/// Normalized length-draw weights.
pub fn renormalize(rho: [f64; 3]) -> [f64; 3] {
    let s: f64 = rho.iter().sum();
    rho.map(|r| r / s)
}

/// Seeded sampler of branch slots (0 = S, 1 = M, 2 = L) with probabilities `rho`.
pub struct LengthSampler {
    dist: WeightedIndex<f64>,
    rng: ChaCha8Rng,
}

impl LengthSampler {
    pub fn new(rho: [f64; 3], seed: u64) -> Result<Self> {
        let dist = WeightedIndex::new(renormalize(rho)).map_err(|e| Error::Config(format!("rho: {e}")))?;
        Ok(LengthSampler {
            dist,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn draw(&mut self) -> usize {
        self.dist.sample(&mut self.rng)
    }
}

/// One model of capacity `H^L`; every batch is fed a length drawn from `rho`.
pub fn train_mixed(split: &DatasetSplit, rho: [f64; 3], cfg: &TrainConfig) -> Result<Trained> {
    let cfg = TrainConfig {
        strategy: Strategy::Mixed,
        rho,
        ..cfg.clone()
    };
    cfg.validate()?;
    require_train(split)?;
    let lengths = cfg.lengths();
    let mut params = FlnParams::single(cfg.backbone.clone(), lengths[2], cfg.init_seed())?;
    let mut adam = Adam::new(&params.store);
    let samples = lengths
        .iter()
        .map(|&h| pairs_at(&split.train, h, cfg.backbone.horizon))
        .collect::<Result<Vec<_>>>()?;
    let keys: Vec<usize> = split.train.iter().map(|s| s.agents()).collect();
    let mut rng = cfg.shuffle_rng();
    let mut sampler = LengthSampler::new(rho, derive_seed(cfg.seed, LENGTH_STREAM))?;
    let mut log = TrainLog::default();
    train_single_loop(
        &mut params,
        &mut adam,
        &samples,
        &keys,
        cfg.epochs,
        "mixed",
        &cfg,
        &mut rng,
        |_| sampler.draw(),
        |p, row| {
            row.val = validation(p, &split.val, &lengths, &cfg)?;
            Ok(false)
        },
        &mut log,
    )?;
    Ok(Trained {
        params,
        adam,
        log,
        eval_lengths: lengths.to_vec(),
    })
}

/// Trains at `H^L`, then continues at the target length until validation
/// ADE stops improving for `patience` epochs. Returns the model before
/// fine-tuning and the best fine-tuned one.
pub fn train_finetune(split: &DatasetSplit, cfg: &TrainConfig) -> Result<(Trained, Trained)> {
    let cfg = TrainConfig {
        strategy: Strategy::Finetune,
        ..cfg.clone()
    };
    cfg.validate()?;
    if split.val.is_empty() {
        return Err(Error::Config("fine-tuning needs a validation split".into()));
    }
    let long = cfg.branch.lengths.long;
    let target = cfg.finetune_target;
    let pre = train_isolated(split, long, &cfg)?;

    let mut params = pre.params.clone();
    let mut adam = pre.adam.clone();
    let mut log = pre.log.clone();
    let samples = vec![pairs_at(&split.train, target, cfg.backbone.horizon)?];
    let keys: Vec<usize> = split.train.iter().map(|s| s.agents()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, SHUFFLE_STREAM + 100));
    let eval_cfg = TrainConfig { validate: true, ..cfg.clone() };
    let mut best: Option<(f64, FlnParams)> = None;
    let mut since_best = 0;
    train_single_loop(
        &mut params,
        &mut adam,
        &samples,
        &keys,
        cfg.finetune_max_epochs,
        "finetune",
        &cfg,
        &mut rng,
        |_| 0,
        |p, row| {
            row.val = validation(p, &split.val, &[target], &eval_cfg)?;
            let ade = row.val[0].ade;
            if best.as_ref().is_none_or(|b| ade < b.0) {
                best = Some((ade, p.clone()));
                since_best = 0;
            } else {
                since_best += 1;
            }
            Ok(since_best >= cfg.patience)
        },
        &mut log,
    )?;
    let tuned = Trained {
        params: best.map_or(params, |b| b.1),
        adam,
        log,
        eval_lengths: vec![target],
    };
    Ok((pre, tuned))
}

/// One model per branch length, each trained on observations at all three
/// lengths (three samples per scene).
pub fn train_joint(split: &DatasetSplit, cfg: &TrainConfig) -> Result<Vec<Trained>> {
    let cfg = TrainConfig {
        strategy: Strategy::Joint,
        ..cfg.clone()
    };
    cfg.validate()?;
    require_train(split)?;
    let lengths = cfg.lengths();
    let expanded = expand_joint(&split.train, &lengths, cfg.backbone.horizon)?;
    let keys: Vec<usize> = expanded.iter().map(|(slot, pair)| pair.0.shape()[1] * 3 + slot).collect();
    let mut per_slot: Vec<Vec<(Tensor, Tensor)>> = vec![Vec::new(); 3];
    let mut local = Vec::with_capacity(expanded.len());
    for (slot, pair) in expanded {
        local.push((slot, per_slot[slot].len()));
        per_slot[slot].push(pair);
    }
    let mut models = Vec::with_capacity(3);
    for (b, &h) in lengths.iter().enumerate() {
        let model_cfg = TrainConfig {
            seed: derive_seed(cfg.seed, JOINT_STREAM + b as u64),
            ..cfg.clone()
        };
        let mut params = FlnParams::single(cfg.backbone.clone(), lengths[2], model_cfg.init_seed())?;
        let mut adam = Adam::new(&params.store);
        let mut rng = model_cfg.shuffle_rng();
        let mut log = TrainLog::default();
        for _ in 0..cfg.epochs {
            let start = Instant::now();
            let batches = make_batches(&keys, cfg.batch_size, Some(&mut rng));
            let [l_reg, _, total] = run_epoch(&mut params, &mut adam, &batches, cfg.lr, |tape, p, bound, idx| {
                let slot = local[idx[0]].0;
                let within: Vec<usize> = idx.iter().map(|&i| local[i].1).collect();
                let (obs, fut) = stack_pairs(&per_slot[slot], &within)?;
                let pred = p.forward_open(tape, bound, &obs, BranchId::L, None)?;
                let l = nll(tape, &pred, &fut)?;
                Ok(StepLoss { total: l, l_reg: l, l_kl: None })
            })?;
            log.rows.push(EpochRow {
                epoch: log.rows.len(),
                phase: format!("joint@{h}"),
                l_reg,
                l_kl: 0.0,
                total,
                val: validation(&params, &split.val, &[h], &cfg)?,
                seconds: start.elapsed().as_secs_f64(),
            });
        }
        models.push(Trained {
            params,
            adam,
            log,
            eval_lengths: vec![h],
        });
    }
    Ok(models)
}

/// Every scene observed at each of `lengths`, tagged with the length's slot.
pub fn expand_joint(scenes: &[Scene], lengths: &[usize; 3], horizon: usize) -> Result<Vec<(usize, (Tensor, Tensor))>> {
    let mut out = Vec::with_capacity(scenes.len() * 3);
    for s in scenes {
        for (slot, &h) in lengths.iter().enumerate() {
            out.push((slot, observation_at(s, h, horizon)?));
        }
    }
    Ok(out)
}

/// Dispatches on `cfg.strategy`.
pub fn train(split: &DatasetSplit, cfg: &TrainConfig) -> Result<TrainOutput> {
    match cfg.strategy {
        Strategy::Fln => Ok(TrainOutput::Single(train_fln(split, cfg)?)),
        Strategy::Isolated => {
            let h = cfg.length.ok_or_else(|| Error::Config("isolated training requires a length".into()))?;
            Ok(TrainOutput::Single(train_isolated(split, h, cfg)?))
        }
        Strategy::Mixed => Ok(TrainOutput::Single(train_mixed(split, cfg.rho, cfg)?)),
        Strategy::Finetune => {
            let (pretrained, tuned) = train_finetune(split, cfg)?;
            Ok(TrainOutput::Finetune { pretrained, tuned })
        }
        Strategy::Joint => Ok(TrainOutput::Joint(train_joint(split, cfg)?)),
    }
}
