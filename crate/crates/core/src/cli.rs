//! Run configuration, checkpoints and the `fln` command set.
//!
//! Configuration files are flat `key = value` text; `#` starts a comment.
//! Every key has a default, so an empty file is valid. Keys:
//!
//! | key | meaning |
//! |-----|---------|
//! | `seed` | seed for generation and training |
//! | `scenes`, `min_agents`, `max_agents` | synthetic dataset size |
//! | `dt`, `noise`, `repulsion`, `repulsion_radius` | synthetic dynamics |
//! | `min_speed`, `max_speed`, `min_turn_rate`, `max_turn_rate`, `min_period`, `max_period` | motion ranges |
//! | `mix` | motion weights `cv,turn,stop_and_go` |
//! | `lengths` | branch observation lengths `S,M,L` |
//! | `horizon` | predicted steps |
//! | `d_model`, `heads`, `layers`, `ff_width`, `decoder_hidden`, `modes` | backbone size |
//! | `pe` | `sinusoidal` or `learnable` |
//! | `activation` | `gelu` or `relu` |
//! | `lambda`, `detach_teacher` | distillation weight and teacher gradient stop |
//! | `ws`, `td`, `ipe`, `sln`, `decoder_sln` | ablation switches |
//! | `strategy` | `fln`, `isolated`, `mixed`, `finetune` or `joint` |
//! | `epochs`, `batch_size`, `lr` | optimisation |
//! | `rho` | mixed-sampling weights `S,M,L` |
//! | `length` | isolated training length |
//! | `finetune_target`, `patience`, `finetune_max_epochs` | fine-tuning |
//! | `derive_mode` | `truncation` or `sliding` |
//! | `validate` | per-epoch validation metrics |
//! | `samples`, `sample_mode`, `eval_batch` | evaluation |

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::backbone::{Activation, BranchId, BranchLengths, FlnParams, ModelKind, PeKind};
use crate::data::{load_trajnet, read_dataset, split_dataset, write_atomic, write_dataset, DatasetSplit, SynthConfig};
use crate::distributions::SampleMode;
use crate::eval::{
    evaluate, generality_sweep, ln_report_csv, ln_statistics_probe, metrics_csv, pe_deviation_report, pe_report_csv,
    pe_table_deviation, sweep_csv,
};
use crate::params::{ParamScope, ParamStore};
use crate::tensorgrad::Tensor;
use crate::trainstrat::{train, Adam, Strategy, TrainConfig, TrainOutput, Trained};
use crate::{Error, Result};

/// Every tunable setting of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        let synth = SynthConfig {
            obs_len: train.branch.lengths.long,
            horizon: train.backbone.horizon,
            ..SynthConfig::default()
        };
        RunConfig { synth, train }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "on" | "1" | "yes" => Ok(true),
        "false" | "off" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean `{value}` for `{key}`"))),
    }
}

fn parse_triple<T: std::str::FromStr + Copy>(key: &str, value: &str) -> Result<[T; 3]> {
    let parts: Vec<T> = value
        .split(',')
        .map(|p| parse(key, p.trim()))
        .collect::<Result<_>>()?;
    parts
        .try_into()
        .map_err(|_| Error::Config(format!("`{key}` needs three comma-separated values")))
}

impl RunConfig {
    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.train;
        let s = &mut self.synth;
        match key {
            "seed" => {
                let v = parse(key, value)?;
                t.seed = v;
                s.seed = v;
            }
            "scenes" => s.scenes = parse(key, value)?,
            "min_agents" => s.min_agents = parse(key, value)?,
            "max_agents" => s.max_agents = parse(key, value)?,
            "dt" => s.dt = parse(key, value)?,
            "noise" => s.noise = parse(key, value)?,
            "repulsion" => s.repulsion = parse(key, value)?,
            "repulsion_radius" => s.repulsion_radius = parse(key, value)?,
            "min_speed" => s.min_speed = parse(key, value)?,
            "max_speed" => s.max_speed = parse(key, value)?,
            "min_turn_rate" => s.min_turn_rate = parse(key, value)?,
            "max_turn_rate" => s.max_turn_rate = parse(key, value)?,
            "min_period" => s.min_period = parse(key, value)?,
            "max_period" => s.max_period = parse(key, value)?,
            "mix" => {
                let [a, b, c] = parse_triple(key, value)?;
                s.mix = crate::data::MotionMix {
                    constant_velocity: a,
                    turn: b,
                    stop_and_go: c,
                };
            }
            "lengths" => {
                let [a, b, c] = parse_triple(key, value)?;
                t.branch.lengths = BranchLengths { short: a, medium: b, long: c };
                s.obs_len = c;
            }
            "horizon" => {
                let v = parse(key, value)?;
                t.backbone.horizon = v;
                t.eval.horizon = v;
                s.horizon = v;
            }
            "d_model" => t.backbone.d_model = parse(key, value)?,
            "heads" => t.backbone.heads = parse(key, value)?,
            "layers" => t.backbone.layers = parse(key, value)?,
            "ff_width" => t.backbone.ff_width = parse(key, value)?,
            "decoder_hidden" => t.backbone.decoder_hidden = parse(key, value)?,
            "modes" => t.backbone.modes = parse(key, value)?,
            "pe" => {
                t.backbone.pe = match value {
                    "sinusoidal" => PeKind::Sinusoidal,
                    "learnable" => PeKind::Learnable,
                    _ => return Err(Error::Config(format!("invalid value `{value}` for `pe`"))),
                }
            }
            "activation" => {
                t.backbone.activation = match value {
                    "gelu" => Activation::Gelu,
                    "relu" => Activation::Relu,
                    _ => return Err(Error::Config(format!("invalid value `{value}` for `activation`"))),
                }
            }
            "lambda" => t.branch.lambda = parse(key, value)?,
            "detach_teacher" => t.branch.detach_teacher = parse_bool(key, value)?,
            "ws" => t.branch.switches.weight_sharing = parse_bool(key, value)?,
            "td" => t.branch.switches.temporal_distillation = parse_bool(key, value)?,
            "ipe" => t.branch.switches.independent_pe = parse_bool(key, value)?,
            "sln" => t.branch.switches.specialized_ln = parse_bool(key, value)?,
            "decoder_sln" => t.branch.switches.decoder_sln = parse_bool(key, value)?,
            "strategy" => t.strategy = value.parse().map_err(Error::Config)?,
            "epochs" => t.epochs = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "lr" => t.lr = parse(key, value)?,
            "rho" => t.rho = parse_triple(key, value)?,
            "length" => t.length = Some(parse(key, value)?),
            "finetune_target" => t.finetune_target = parse(key, value)?,
            "patience" => t.patience = parse(key, value)?,
            "finetune_max_epochs" => t.finetune_max_epochs = parse(key, value)?,
            "derive_mode" => t.derive_mode = value.parse().map_err(Error::Config)?,
            "validate" => t.validate = parse_bool(key, value)?,
            "samples" => t.eval.samples = parse(key, value)?,
            "sample_mode" => t.eval.sample_mode = value.parse().map_err(Error::Config)?,
            "eval_batch" => t.eval.batch_size = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Parses configuration text on top of the defaults.
    pub fn parse_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
            cfg.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse_text(&fs::read_to_string(path)?)
    }

    /// Applies `key=value` overrides.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.train.validate()?;
        let t = &self.train;
        if t.eval.samples == 0 || (t.eval.sample_mode == SampleMode::ModeMeans && t.eval.samples > t.backbone.modes) {
            return Err(Error::Config(format!(
                "samples must lie in 1..={} with mode-means sampling",
                t.backbone.modes
            )));
        }
        Ok(())
    }

    /// The configuration as `key = value` text that parses back to itself.
    pub fn to_text(&self) -> String {
        let (t, s) = (&self.train, &self.synth);
        let b = &t.backbone;
        let sw = &t.branch.switches;
        let l = t.branch.lengths;
        let mut lines = vec![
            format!("seed = {}", t.seed),
            format!("scenes = {}", s.scenes),
            format!("min_agents = {}", s.min_agents),
            format!("max_agents = {}", s.max_agents),
            format!("dt = {}", s.dt),
            format!("noise = {}", s.noise),
            format!("repulsion = {}", s.repulsion),
            format!("repulsion_radius = {}", s.repulsion_radius),
            format!("min_speed = {}", s.min_speed),
            format!("max_speed = {}", s.max_speed),
            format!("min_turn_rate = {}", s.min_turn_rate),
            format!("max_turn_rate = {}", s.max_turn_rate),
            format!("min_period = {}", s.min_period),
            format!("max_period = {}", s.max_period),
            format!("mix = {},{},{}", s.mix.constant_velocity, s.mix.turn, s.mix.stop_and_go),
            format!("lengths = {},{},{}", l.short, l.medium, l.long),
            format!("horizon = {}", b.horizon),
            format!("d_model = {}", b.d_model),
            format!("heads = {}", b.heads),
            format!("layers = {}", b.layers),
            format!("ff_width = {}", b.ff_width),
            format!("decoder_hidden = {}", b.decoder_hidden),
            format!("modes = {}", b.modes),
            format!("pe = {}", if b.pe == PeKind::Sinusoidal { "sinusoidal" } else { "learnable" }),
            format!("activation = {}", if b.activation == Activation::Gelu { "gelu" } else { "relu" }),
            format!("lambda = {}", t.branch.lambda),
            format!("detach_teacher = {}", t.branch.detach_teacher),
            format!("ws = {}", sw.weight_sharing),
            format!("td = {}", sw.temporal_distillation),
            format!("ipe = {}", sw.independent_pe),
            format!("sln = {}", sw.specialized_ln),
            format!("decoder_sln = {}", sw.decoder_sln),
            format!("strategy = {}", t.strategy),
            format!("epochs = {}", t.epochs),
            format!("batch_size = {}", t.batch_size),
            format!("lr = {}", t.lr),
            format!("rho = {},{},{}", t.rho[0], t.rho[1], t.rho[2]),
            format!("finetune_target = {}", t.finetune_target),
            format!("patience = {}", t.patience),
            format!("finetune_max_epochs = {}", t.finetune_max_epochs),
            format!(
                "derive_mode = {}",
                if t.derive_mode == crate::data::DeriveMode::Truncation { "truncation" } else { "sliding" }
            ),
            format!("validate = {}", t.validate),
            format!("samples = {}", t.eval.samples),
            format!(
                "sample_mode = {}",
                if t.eval.sample_mode == SampleMode::ModeMeans { "mode-means" } else { "stochastic" }
            ),
            format!("eval_batch = {}", t.eval.batch_size),
        ];
        if let Some(h) = t.length {
            lines.push(format!("length = {h}"));
        }
        lines.join("\n") + "\n"
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"FLNCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    scope: ParamScope,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct OptimizerHeader {
    step: u64,
    /// First-moment and second-moment tensors follow the parameters in payload order.
    offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    version: u32,
    config: RunConfig,
    kind: ModelKind,
    backbone: crate::backbone::BackboneConfig,
    tensors: Vec<TensorEntry>,
    optimizer: Option<OptimizerHeader>,
    epoch: usize,
    eval_lengths: Vec<usize>,
    payload_len: usize,
}

/// A trained model with the configuration that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub params: FlnParams,
    pub adam: Option<Adam>,
    /// Number of completed epochs.
    pub epoch: usize,
    pub eval_lengths: Vec<usize>,
}

impl Checkpoint {
    pub fn from_trained(config: &RunConfig, t: &Trained) -> Self {
        Checkpoint {
            config: config.clone(),
            params: t.params.clone(),
            adam: Some(t.adam.clone()),
            epoch: t.log.rows.len(),
            eval_lengths: t.eval_lengths.clone(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut payload: Vec<f64> = Vec::new();
        let mut tensors = Vec::with_capacity(self.params.store.len());
        for e in self.params.store.entries() {
            tensors.push(TensorEntry {
                name: e.name.clone(),
                shape: e.value.shape().to_vec(),
                offset: payload.len(),
                scope: e.scope,
            });
            payload.extend_from_slice(e.value.data());
        }
        let optimizer = match &self.adam {
            Some(a) => {
                let offset = payload.len();
                for m in &a.m {
                    payload.extend_from_slice(m.data());
                }
                for v in &a.v {
                    payload.extend_from_slice(v.data());
                }
                Some(OptimizerHeader { step: a.t, offset })
            }
            None => None,
        };
        let header = Header {
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            kind: self.params.kind,
            backbone: self.params.backbone.clone(),
            tensors,
            optimizer,
            epoch: self.epoch,
            eval_lengths: self.eval_lengths.clone(),
            payload_len: payload.len(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + json.len() + payload.len() * 8);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for v in payload {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        if bytes.len() < 16 + hlen {
            return Err(bad("truncated header"));
        }
        let header: Header = serde_json::from_slice(&bytes[16..16 + hlen])?;
        if header.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {}", header.version)));
        }
        let body = &bytes[16 + hlen..];
        if body.len() != header.payload_len * 8 {
            return Err(bad("payload length does not match header"));
        }
        let payload: Vec<f64> = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();

        let template = FlnParams::build(header.backbone.clone(), header.kind, 0)?;
        if template.store.len() != header.tensors.len() {
            return Err(bad("parameter set does not match the model description"));
        }
        let mut cursor = 0;
        let mut store = ParamStore::new();
        for (e, t) in header.tensors.iter().zip(template.store.entries()) {
            if e.name != t.name || e.shape != t.value.shape() || e.scope != t.scope {
                return Err(Error::Checkpoint(format!("unexpected parameter `{}`", e.name)));
            }
            if e.offset != cursor {
                return Err(bad("manifest offsets do not tile the payload"));
            }
            let n: usize = e.shape.iter().product();
            store.insert(e.name.clone(), Tensor::new(e.shape.clone(), payload[cursor..cursor + n].to_vec())?, e.scope);
            cursor += n;
        }
        let adam = match &header.optimizer {
            Some(o) => {
                if o.offset != cursor {
                    return Err(bad("optimizer offset does not follow the parameters"));
                }
                let mut take = |shape: &[usize]| -> Result<Tensor> {
                    let n: usize = shape.iter().product();
                    let t = Tensor::new(shape.to_vec(), payload[cursor..cursor + n].to_vec())?;
                    cursor += n;
                    Ok(t)
                };
                let m = header.tensors.iter().map(|e| take(&e.shape)).collect::<Result<Vec<_>>>()?;
                let v = header.tensors.iter().map(|e| take(&e.shape)).collect::<Result<Vec<_>>>()?;
                Some(Adam { t: o.step, m, v })
            }
            None => None,
        };
        if cursor != payload.len() {
            return Err(bad("manifest offsets do not tile the payload"));
        }
        Ok(Checkpoint {
            config: header.config,
            params: FlnParams {
                backbone: header.backbone,
                kind: header.kind,
                store,
            },
            adam,
            epoch: header.epoch,
            eval_lengths: header.eval_lengths,
        })
    }

    /// Writes atomically: a crash leaves any previous file intact.
    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(write_atomic(path, &self.to_bytes()?)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}

#[derive(Debug, Parser)]
#[command(name = "fln", version, about = "Multi-length trajectory prediction experiments")]
pub struct Cli {
    /// Configuration file of `key = value` lines.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Run single-threaded for bit-exact reproducibility.
    #[arg(long, global = true)]
    pub deterministic: bool,
    /// Extra `key=value` settings applied after the config file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ProbeKind {
    Ln,
    Pe,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitName {
    Train,
    Val,
    Test,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset, or convert a "frame agent x y" text file.
    Generate {
        #[arg(long)]
        trajnet: Option<PathBuf>,
        /// Frames between consecutive scene windows of a text file.
        #[arg(long)]
        step: Option<usize>,
    },
    /// Train a model with the configured strategy.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        strategy: Option<Strategy>,
        /// Observation length for isolated training.
        #[arg(long)]
        length: Option<usize>,
    },
    /// ADE/FDE of a checkpoint at one observation length.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        length: usize,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitName,
    },
    /// Layer-norm statistics or positional-encoding deviation reports.
    Probe {
        #[arg(value_enum)]
        kind: ProbeKind,
        #[arg(long = "checkpoint")]
        checkpoints: Vec<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Observation length for the layer-norm probe; defaults to each checkpoint's branch length.
        #[arg(long)]
        length: Option<usize>,
        #[arg(long)]
        branch: Option<BranchId>,
        #[arg(long)]
        h1: Option<usize>,
        #[arg(long)]
        h2: Option<usize>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitName,
    },
    /// Evaluate a checkpoint over a range of observation lengths.
    Sweep {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// `a..b` (inclusive) or a comma-separated list.
        #[arg(long)]
        lengths: String,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitName,
    },
}

/// Parses `a..b` (inclusive) or `a,b,c`.
pub fn parse_lengths(spec: &str) -> Result<Vec<usize>> {
    let spec = spec.trim();
    let out: Vec<usize> = if let Some((a, b)) = spec.split_once("..") {
        let a: usize = parse("lengths", a.trim())?;
        let b: usize = parse("lengths", b.trim().trim_start_matches('='))?;
        if a > b {
            return Err(Error::Config(format!("empty length range `{spec}`")));
        }
        (a..=b).collect()
    } else {
        spec.split(',').map(|p| parse("lengths", p.trim())).collect::<Result<_>>()?
    };
    if out.is_empty() || out.contains(&0) {
        return Err(Error::Config(format!("invalid lengths `{spec}`")));
    }
    Ok(out)
}

/// Loads configuration from the file and flags, validated.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply_overrides(&cli.overrides)?;
    if let Some(s) = cli.seed {
        cfg.set("seed", &s.to_string())?;
    }
    Ok(cfg)
}

fn load_split(data: &Path, horizon: usize) -> Result<DatasetSplit> {
    let (_, scenes) = read_dataset(data)?;
    Ok(split_dataset(&scenes, horizon)?)
}

fn pick(split: &DatasetSplit, which: SplitName) -> &[crate::data::Scene] {
    match which {
        SplitName::Train => &split.train,
        SplitName::Val => &split.val,
        SplitName::Test => &split.test,
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    Ok(write_atomic(path, serde_json::to_string_pretty(value)?.as_bytes())?)
}

pub fn cmd_generate(cfg: &RunConfig, out: &Path, trajnet: Option<&Path>, step: Option<usize>) -> Result<String> {
    cfg.validate()?;
    let horizon = cfg.train.backbone.horizon;
    let obs_len = cfg.train.branch.lengths.long;
    let (scenes, synth) = match trajnet {
        Some(path) => {
            let window = obs_len + horizon;
            (load_trajnet(path, window, step.unwrap_or(window), cfg.synth.dt)?, None)
        }
        None => (crate::data::generate_synthetic(&cfg.synth)?, Some(&cfg.synth)),
    };
    if scenes.is_empty() {
        return Err(Error::Config("no scenes produced".into()));
    }
    let manifest = write_dataset(out, &scenes, synth, obs_len, horizon)?;
    fs::write(out.join("config.txt"), cfg.to_text())?;
    let agents: usize = scenes.iter().map(|s| s.agents()).sum();
    Ok(format!(
        "wrote {} scenes ({} agents) to {} (seed {})",
        manifest.count,
        agents,
        out.display(),
        manifest.seed.map_or("n/a".to_string(), |s| s.to_string())
    ))
}

pub fn cmd_train(
    cfg: &RunConfig,
    data: &Path,
    out: &Path,
    strategy: Option<Strategy>,
    length: Option<usize>,
) -> Result<String> {
    let mut cfg = cfg.clone();
    if let Some(s) = strategy {
        cfg.train.strategy = s;
    }
    if let Some(h) = length {
        cfg.train.length = Some(h);
    }
    cfg.validate()?;
    let split = load_split(data, cfg.train.backbone.horizon)?;
    fs::create_dir_all(out)?;
    let output = train(&split, &cfg.train)?;
    let mut written = Vec::new();
    let mut save = |name: &str, t: &Trained| -> Result<()> {
        let path = out.join(name);
        Checkpoint::from_trained(&cfg, t).save(&path)?;
        written.push(path.display().to_string());
        Ok(())
    };
    let log = match &output {
        TrainOutput::Single(t) => {
            save("model.ckpt", t)?;
            t.log.clone()
        }
        TrainOutput::Finetune { pretrained, tuned } => {
            save("pretrained.ckpt", pretrained)?;
            save("model.ckpt", tuned)?;
            tuned.log.clone()
        }
        TrainOutput::Joint(models) => {
            let mut log = crate::trainstrat::TrainLog::default();
            for m in models {
                save(&format!("model_len{}.ckpt", m.eval_lengths[0]), m)?;
                log.rows.extend(m.log.rows.iter().cloned());
            }
            log
        }
    };
    write_atomic(&out.join("train_log.csv"), log.to_csv().as_bytes())?;
    let summary = serde_json::json!({
        "strategy": cfg.train.strategy.to_string(),
        "seed": cfg.train.seed,
        "checkpoints": written,
        "log": log.summary(),
    });
    write_json(&out.join("train_summary.json"), &summary)?;
    fs::write(out.join("config.txt"), cfg.to_text())?;
    Ok(format!(
        "trained {} (seed {}), wrote {}",
        cfg.train.strategy,
        cfg.train.seed,
        written.join(", ")
    ))
}

pub fn cmd_eval(
    cfg: &RunConfig,
    checkpoint: &Path,
    data: &Path,
    out: &Path,
    length: usize,
    samples: Option<usize>,
    split: SplitName,
) -> Result<String> {
    let ck = Checkpoint::load(checkpoint)?;
    let mut spec = ck.config.train.eval;
    spec.seed = cfg.train.seed;
    if let Some(k) = samples {
        spec.samples = k;
    }
    let data_split = load_split(data, ck.params.backbone.horizon)?;
    let m = evaluate(&ck.params, pick(&data_split, split), length, &spec)?;
    fs::create_dir_all(out)?;
    write_atomic(&out.join("eval.csv"), metrics_csv(&[m]).as_bytes())?;
    write_json(&out.join("eval.json"), &serde_json::json!({ "seed": spec.seed, "metrics": m }))?;
    let branch = if ck.params.is_flexi() { format!(" branch {}", m.branch) } else { String::new() };
    Ok(format!(
        "H'={}{} ADE_{}={:.4} FDE_{}={:.4} over {} scenes",
        m.length, branch, m.k, m.ade, m.k, m.fde, m.scenes
    ))
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_probe(
    cfg: &RunConfig,
    kind: ProbeKind,
    checkpoints: &[PathBuf],
    data: Option<&Path>,
    out: &Path,
    length: Option<usize>,
    branch: Option<BranchId>,
    h1: Option<usize>,
    h2: Option<usize>,
    split: SplitName,
) -> Result<String> {
    match kind {
        ProbeKind::Pe => {
            let report = match checkpoints {
                [] => {
                    let (h1, h2) = match (h1, h2) {
                        (Some(a), Some(b)) if a > 0 && b > 0 => (a, b),
                        _ => return Err(Error::Config("pe probe needs --h1 and --h2, or two checkpoints".into())),
                    };
                    pe_deviation_report(cfg.train.backbone.d_model, h1, h2)
                }
                [a, b] => {
                    let (a, b) = (Checkpoint::load(a)?, Checkpoint::load(b)?);
                    let br = branch.unwrap_or(BranchId::L);
                    pe_table_deviation(&a.params, br, &b.params, br)?
                }
                _ => return Err(Error::Config("pe probe takes zero or two checkpoints".into())),
            };
            fs::create_dir_all(out)?;
            write_atomic(&out.join("pe_deviation.csv"), pe_report_csv(&report).as_bytes())?;
            write_json(&out.join("pe_deviation.json"), &report)?;
            let max = report.distances.iter().copied().fold(0.0, f64::max);
            Ok(format!("pe deviation H1={} H2={}: max {:.6}", report.h1, report.h2, max))
        }
        ProbeKind::Ln => {
            if checkpoints.is_empty() {
                return Err(Error::Config("ln probe needs at least one --checkpoint".into()));
            }
            let data = data.ok_or_else(|| Error::Config("ln probe needs --data".into()))?;
            fs::create_dir_all(out)?;
            let mut lines = Vec::new();
            for (i, path) in checkpoints.iter().enumerate() {
                let ck = Checkpoint::load(path)?;
                let br = branch.unwrap_or(BranchId::L);
                let h = match length {
                    Some(h) => h,
                    None => ck.params.branch_len(br)?,
                };
                let horizon = ck.params.backbone.horizon;
                let data_split = load_split(data, horizon)?;
                let report = ln_statistics_probe(&ck.params, pick(&data_split, split), h, br, horizon)?;
                write_atomic(&out.join(format!("ln_probe_{i}.csv")), ln_report_csv(&report).as_bytes())?;
                write_json(&out.join(format!("ln_probe_{i}.json")), &report)?;
                lines.push(format!("{}: {} sites x {} positions", path.display(), report.sites.len(), h));
            }
            Ok(lines.join("\n"))
        }
    }
}

pub fn cmd_sweep(cfg: &RunConfig, checkpoint: &Path, data: &Path, out: &Path, lengths: &str, split: SplitName) -> Result<String> {
    let lengths = parse_lengths(lengths)?;
    let ck = Checkpoint::load(checkpoint)?;
    let mut spec = ck.config.train.eval;
    spec.seed = cfg.train.seed;
    let data_split = load_split(data, ck.params.backbone.horizon)?;
    let rows = generality_sweep(&ck.params, pick(&data_split, split), &lengths, &spec);
    fs::create_dir_all(out)?;
    write_atomic(&out.join("sweep.csv"), sweep_csv(&rows).as_bytes())?;
    write_json(&out.join("sweep.json"), &serde_json::json!({ "seed": spec.seed, "rows": rows }))?;
    Ok(format!("swept {} lengths, wrote {}", rows.len(), out.join("sweep.csv").display()))
}

/// Executes a parsed command line.
pub fn run(cli: &Cli) -> Result<String> {
    if cli.deterministic {
        // Fails only if a pool already exists, in which case it is reused.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(1).build_global();
    }
    let cfg = resolve_config(cli)?;
    cfg.validate()?;
    let out = cli.out.as_path();
    match &cli.command {
        Command::Generate { trajnet, step } => cmd_generate(&cfg, out, trajnet.as_deref(), *step),
        Command::Train { data, strategy, length } => cmd_train(&cfg, data, out, *strategy, *length),
        Command::Eval {
            checkpoint,
            data,
            length,
            samples,
            split,
        } => cmd_eval(&cfg, checkpoint, data, out, *length, *samples, *split),
        Command::Probe {
            kind,
            checkpoints,
            data,
            length,
            branch,
            h1,
            h2,
            split,
        } => cmd_probe(&cfg, *kind, checkpoints, data.as_deref(), out, *length, *branch, *h1, *h2, *split),
        Command::Sweep {
            checkpoint,
            data,
            lengths,
            split,
        } => cmd_sweep(&cfg, checkpoint, data, out, lengths, *split),
    }
}
