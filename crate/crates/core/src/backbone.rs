//! Transformer trajectory predictor with branch-conditional positional
//! encodings and layer-normalization affines.
//!
//! The network is split into four parts: a spatial encoder (per-timestep
//! perceptron over position and velocity), a positional encoder, a pre-norm
//! transformer encoder attending jointly over all agent-time tokens, and a
//! mixture decoder reading each agent's most recent token.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::distributions::{DistError, MixtureVars};
use crate::params::{Bound, ParamScope, ParamStore};
use crate::tensorgrad::{Tape, Tensor, TensorError, Var};

pub const LN_EPS: f64 = 1e-5;
pub const SCALE_FLOOR: f64 = 1e-3;
/// Position and velocity per timestep.
pub const INPUT_FEATURES: usize = 4;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Dist(#[from] DistError),
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("branch {branch} expects observation length {expected}, got {got}")]
    LengthMismatch { branch: BranchId, expected: usize, got: usize },
    #[error("observations must have shape [B, N, H, 2] with H >= 1, got {0:?}")]
    Observation(Vec<usize>),
    #[error("model has no branch {0}")]
    UnknownBranch(BranchId),
    #[error("unknown layer-norm site `{0}`")]
    UnknownSite(String),
    #[error("timestep {t} out of range for length {len}")]
    Timestep { t: usize, len: usize },
    #[error("missing parameter `{0}`")]
    MissingParam(String),
    #[error("observed length {observed} is shorter than every branch (shortest {shortest})")]
    RouteTooShort { observed: usize, shortest: usize },
}

/// One of the three length-specific streams, ordered by observation length.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum BranchId {
    S,
    M,
    L,
}

impl BranchId {
    pub const ALL: [BranchId; 3] = [BranchId::S, BranchId::M, BranchId::L];

    pub fn as_str(self) -> &'static str {
        match self {
            BranchId::S => "S",
            BranchId::M => "M",
            BranchId::L => "L",
        }
    }
}

impl fmt::Display for BranchId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for BranchId {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "S" | "s" => Ok(BranchId::S),
            "M" | "m" => Ok(BranchId::M),
            "L" | "l" => Ok(BranchId::L),
            other => Err(format!("unknown branch `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PeKind {
    Sinusoidal,
    Learnable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Gelu,
    Relu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub ff_width: usize,
    pub decoder_hidden: usize,
    pub modes: usize,
    pub horizon: usize,
    pub pe: PeKind,
    pub activation: Activation,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            d_model: 16,
            heads: 2,
            layers: 1,
            ff_width: 32,
            decoder_hidden: 32,
            modes: 3,
            horizon: 12,
            pe: PeKind::Sinusoidal,
            activation: Activation::Gelu,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let counts = [
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("layers", self.layers),
            ("ff_width", self.ff_width),
            ("decoder_hidden", self.decoder_hidden),
            ("modes", self.modes),
            ("horizon", self.horizon),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(ModelError::Config(format!("{name} must be >= 1")));
            }
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(ModelError::Config(format!(
                "d_model {} not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        Ok(())
    }

    fn output_width(&self) -> usize {
        4 * self.horizon * self.modes + self.modes
    }

    /// Layer-norm sites inside the transformer encoder.
    pub fn encoder_sites(&self) -> Vec<String> {
        (0..self.layers)
            .flat_map(|l| [format!("enc{l}.ln1"), format!("enc{l}.ln2")])
            .collect()
    }
}

pub const DECODER_SITE: &str = "dec.ln";

/// Observation lengths of the short, medium and long branches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BranchLengths {
    pub short: usize,
    pub medium: usize,
    pub long: usize,
}

impl BranchLengths {
    pub fn new(short: usize, medium: usize, long: usize) -> Result<Self, ModelError> {
        let l = BranchLengths { short, medium, long };
        l.validate()?;
        Ok(l)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.short >= 1 && self.short < self.medium && self.medium <= self.long {
            Ok(())
        } else {
            Err(ModelError::Config(format!(
                "branch lengths must satisfy 1 <= S < M <= L, got {}/{}/{}",
                self.short, self.medium, self.long
            )))
        }
    }

    pub fn get(&self, b: BranchId) -> usize {
        match b {
            BranchId::S => self.short,
            BranchId::M => self.medium,
            BranchId::L => self.long,
        }
    }
}

/// Ablation switches. All on is the full model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Switches {
    pub weight_sharing: bool,
    pub temporal_distillation: bool,
    pub independent_pe: bool,
    pub specialized_ln: bool,
    /// Also specialize the decoder's layer norm.
    pub decoder_sln: bool,
}

impl Default for Switches {
    fn default() -> Self {
        Switches {
            weight_sharing: true,
            temporal_distillation: true,
            independent_pe: true,
            specialized_ln: true,
            decoder_sln: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ModelKind {
    /// A conventional single-length model; its only branch is `L`.
    Single { capacity: usize },
    /// Three branches over shared weights.
    Flexi { lengths: BranchLengths, switches: Switches },
}

/// Model parameters: shared weights plus branch-specific positional tables
/// and layer-norm affines.
#[derive(Debug, Clone, PartialEq)]
pub struct FlnParams {
    pub backbone: BackboneConfig,
    pub kind: ModelKind,
    pub store: ParamStore,
}

/// Intermediate values recorded during a forward pass.
#[derive(Debug, Default, Clone)]
pub struct Capture {
    /// Input of every layer-norm site, as `(site, [B, tokens, d])`.
    pub ln_inputs: Vec<(String, Tensor)>,
    /// Attention probabilities `[B, heads, tokens, tokens]` per layer.
    pub attention: Vec<Tensor>,
}

/// Sinusoidal positional feature for timestep `t` under length shift `shift`.
pub fn sinusoidal(t: usize, shift: usize, d_model: usize) -> Vec<f64> {
    let pos = (t + shift) as f64;
    (0..d_model)
        .map(|k| {
            if k % 2 == 0 {
                (pos / 10000f64.powf(k as f64 / d_model as f64)).sin()
            } else {
                (pos / 10000f64.powf((k - 1) as f64 / d_model as f64)).cos()
            }
        })
        .collect()
}

/// Rows `0..rows` of the sinusoidal table with length shift `shift`.
pub fn sinusoidal_table(rows: usize, shift: usize, d_model: usize) -> Tensor {
    let data = (0..rows).flat_map(|t| sinusoidal(t, shift, d_model)).collect();
    Tensor::new(vec![rows, d_model], data).expect("table shape")
}

fn theta_names(cfg: &BackboneConfig) -> Vec<(String, usize, Vec<usize>)> {
    // (name, fan-in, shape)
    let d = cfg.d_model;
    let mut v = vec![
        ("spatial.w1".to_string(), INPUT_FEATURES, vec![INPUT_FEATURES, d]),
        ("spatial.b1".to_string(), INPUT_FEATURES, vec![d]),
        ("spatial.w2".to_string(), d, vec![d, d]),
        ("spatial.b2".to_string(), d, vec![d]),
    ];
    for l in 0..cfg.layers {
        for p in ["q", "k", "v", "o"] {
            v.push((format!("enc{l}.attn.w{p}"), d, vec![d, d]));
            v.push((format!("enc{l}.attn.b{p}"), d, vec![d]));
        }
        v.push((format!("enc{l}.ff.w1"), d, vec![d, cfg.ff_width]));
        v.push((format!("enc{l}.ff.b1"), d, vec![cfg.ff_width]));
        v.push((format!("enc{l}.ff.w2"), cfg.ff_width, vec![cfg.ff_width, d]));
        v.push((format!("enc{l}.ff.b2"), cfg.ff_width, vec![d]));
    }
    let out = cfg.output_width();
    v.push(("dec.w1".to_string(), d, vec![d, cfg.decoder_hidden]));
    v.push(("dec.b1".to_string(), d, vec![cfg.decoder_hidden]));
    v.push(("dec.w2".to_string(), cfg.decoder_hidden, vec![cfg.decoder_hidden, out]));
    v.push(("dec.b2".to_string(), cfg.decoder_hidden, vec![out]));
    v
}

impl FlnParams {
    /// A single-length model accepting observations up to `capacity` steps.
    pub fn single(backbone: BackboneConfig, capacity: usize, seed: u64) -> Result<Self, ModelError> {
        if capacity == 0 {
            return Err(ModelError::Config("capacity must be >= 1".into()));
        }
        Self::build(backbone, ModelKind::Single { capacity }, seed)
    }

    pub fn flexi(
        backbone: BackboneConfig,
        lengths: BranchLengths,
        switches: Switches,
        seed: u64,
    ) -> Result<Self, ModelError> {
        lengths.validate()?;
        Self::build(backbone, ModelKind::Flexi { lengths, switches }, seed)
    }

    pub fn build(backbone: BackboneConfig, kind: ModelKind, seed: u64) -> Result<Self, ModelError> {
        backbone.validate()?;
        let mut p = FlnParams {
            backbone,
            kind,
            store: ParamStore::new(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = p.backbone.d_model;

        let theta_slots: Vec<(String, ParamScope)> = match kind {
            ModelKind::Flexi { switches, .. } if !switches.weight_sharing => BranchId::ALL
                .iter()
                .map(|&b| (format!("theta.{b}."), ParamScope::Branch(b)))
                .collect(),
            _ => vec![("theta.".to_string(), ParamScope::Shared)],
        };
        for (prefix, scope) in &theta_slots {
            for (name, fan_in, shape) in theta_names(&p.backbone) {
                let bound = 1.0 / (fan_in as f64).sqrt();
                let t = Tensor::from_fn(&shape, |_| rng.random_range(-bound..bound));
                p.store.insert(format!("{prefix}{name}"), t, *scope);
            }
        }

        let mut sites = p.backbone.encoder_sites();
        sites.push(DECODER_SITE.to_string());
        for site in sites {
            let branches = p.affine_branches(&site);
            if branches.is_empty() {
                p.store.insert(format!("ln.{site}.gamma"), Tensor::ones(&[d]), ParamScope::Shared);
                p.store.insert(format!("ln.{site}.beta"), Tensor::zeros(&[d]), ParamScope::Shared);
            } else {
                for b in branches {
                    let scope = ParamScope::Branch(b);
                    p.store.insert(format!("ln.{site}.{b}.gamma"), Tensor::ones(&[d]), scope);
                    p.store.insert(format!("ln.{site}.{b}.beta"), Tensor::zeros(&[d]), scope);
                }
            }
        }

        if p.backbone.pe == PeKind::Learnable {
            match kind {
                ModelKind::Single { capacity } => {
                    p.store.insert("pe", Tensor::zeros(&[capacity, d]), ParamScope::Shared)
                }
                ModelKind::Flexi { lengths, switches } if switches.independent_pe => {
                    for b in BranchId::ALL {
                        p.store.insert(
                            format!("pe.{b}"),
                            Tensor::zeros(&[lengths.get(b), d]),
                            ParamScope::Branch(b),
                        );
                    }
                }
                ModelKind::Flexi { lengths, .. } => {
                    p.store.insert("pe", Tensor::zeros(&[lengths.long, d]), ParamScope::Shared)
                }
            }
        }
        Ok(p)
    }

    /// Branches owning their own affine at `site`; empty when shared.
    fn affine_branches(&self, site: &str) -> Vec<BranchId> {
        match self.kind {
            ModelKind::Flexi { switches, .. } => {
                let specialized = !switches.weight_sharing
                    || if site == DECODER_SITE {
                        switches.decoder_sln
                    } else {
                        switches.specialized_ln
                    };
                if specialized {
                    BranchId::ALL.to_vec()
                } else {
                    Vec::new()
                }
            }
            ModelKind::Single { .. } => Vec::new(),
        }
    }

    pub fn branches(&self) -> Vec<BranchId> {
        match self.kind {
            ModelKind::Single { .. } => vec![BranchId::L],
            ModelKind::Flexi { .. } => BranchId::ALL.to_vec(),
        }
    }

    /// Native observation length of `branch`.
    pub fn branch_len(&self, branch: BranchId) -> Result<usize, ModelError> {
        match self.kind {
            ModelKind::Single { capacity } if branch == BranchId::L => Ok(capacity),
            ModelKind::Single { .. } => Err(ModelError::UnknownBranch(branch)),
            ModelKind::Flexi { lengths, .. } => Ok(lengths.get(branch)),
        }
    }

    pub fn is_flexi(&self) -> bool {
        matches!(self.kind, ModelKind::Flexi { .. })
    }

    pub fn theta_prefix(&self, branch: BranchId) -> String {
        match self.kind {
            ModelKind::Flexi { switches, .. } if !switches.weight_sharing => format!("theta.{branch}."),
            _ => "theta.".to_string(),
        }
    }

    /// Name prefix of the `(gamma, beta)` used by `branch` at `site`.
    pub fn affine_prefix(&self, site: &str, branch: BranchId) -> Result<String, ModelError> {
        let mut sites = self.backbone.encoder_sites();
        sites.push(DECODER_SITE.to_string());
        if !sites.iter().any(|s| s == site) {
            return Err(ModelError::UnknownSite(site.to_string()));
        }
        if self.affine_branches(site).is_empty() {
            Ok(format!("ln.{site}"))
        } else {
            Ok(format!("ln.{site}.{branch}"))
        }
    }

    /// Name of the learnable positional table used by `branch`.
    pub fn pe_table_name(&self, branch: BranchId) -> Option<String> {
        if self.backbone.pe != PeKind::Learnable {
            return None;
        }
        match self.kind {
            ModelKind::Flexi { switches, .. } if switches.independent_pe => Some(format!("pe.{branch}")),
            _ => Some("pe".to_string()),
        }
    }

    /// Length shift of the sinusoidal table for `branch` fed `h` steps.
    fn sinusoidal_shift(&self, branch: BranchId, h: usize) -> usize {
        match self.kind {
            ModelKind::Single { .. } => h,
            ModelKind::Flexi { lengths, switches } => {
                if switches.independent_pe {
                    lengths.get(branch)
                } else {
                    lengths.long
                }
            }
        }
    }

    /// Positional feature of timestep `t` on `branch`.
    pub fn positional_encode(&self, t: usize, branch: BranchId) -> Result<Vec<f64>, ModelError> {
        let len = self.branch_len(branch)?;
        if t >= len {
            return Err(ModelError::Timestep { t, len });
        }
        let d = self.backbone.d_model;
        match self.pe_table_name(branch) {
            Some(name) => {
                let table = self.store.get(&name).ok_or(ModelError::MissingParam(name))?;
                Ok(table.data()[t * d..(t + 1) * d].to_vec())
            }
            None => Ok(sinusoidal(t, self.sinusoidal_shift(branch, len), d)),
        }
    }

    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> Result<Bound, ModelError> {
        Ok(self.store.bind(tape, requires_grad)?)
    }

    pub fn net<'a>(&'a self, bound: &'a Bound, branch: BranchId) -> Result<Net<'a>, ModelError> {
        self.branch_len(branch)?;
        Ok(Net {
            params: self,
            bound,
            branch,
        })
    }

    /// Full forward on observations `[B, N, H, 2]` whose length must equal the branch's.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        obs: &Tensor,
        branch: BranchId,
    ) -> Result<MixtureVars, ModelError> {
        let expected = self.branch_len(branch)?;
        let got = obs_len(obs)?;
        if got != expected {
            return Err(ModelError::LengthMismatch { branch, expected, got });
        }
        self.net(bound, branch)?.forward(tape, obs, None)
    }

    /// Forward accepting any observation length from 1 up to the branch's length.
    ///
    /// Shorter inputs read the first `H` positional rows without
    /// compensation; single models shift sinusoidal features by `H` itself.
    pub fn forward_open(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        obs: &Tensor,
        branch: BranchId,
        capture: Option<&mut Capture>,
    ) -> Result<MixtureVars, ModelError> {
        let expected = self.branch_len(branch)?;
        let got = obs_len(obs)?;
        if got > expected {
            return Err(ModelError::LengthMismatch { branch, expected, got });
        }
        self.net(bound, branch)?.forward(tape, obs, capture)
    }
}

fn obs_len(obs: &Tensor) -> Result<usize, ModelError> {
    let s = obs.shape();
    if s.len() != 4 || s[3] != 2 || s[2] == 0 || s[0] == 0 || s[1] == 0 {
        return Err(ModelError::Observation(s.to_vec()));
    }
    Ok(s[2])
}

/// Position-plus-velocity features `[B, N, H, 4]`; the first step's velocity
/// duplicates the second's.
pub fn input_features(obs: &Tensor) -> Result<Tensor, ModelError> {
    obs_len(obs)?;
    let s = obs.shape();
    let (b, n, h) = (s[0], s[1], s[2]);
    let x = obs.data();
    let mut out = vec![0.0; b * n * h * INPUT_FEATURES];
    for row in 0..b * n {
        let p = &x[row * h * 2..(row + 1) * h * 2];
        for t in 0..h {
            let (vx, vy) = if h == 1 {
                (0.0, 0.0)
            } else {
                let tt = t.max(1);
                (p[tt * 2] - p[(tt - 1) * 2], p[tt * 2 + 1] - p[(tt - 1) * 2 + 1])
            };
            let o = (row * h + t) * INPUT_FEATURES;
            out[o..o + 4].copy_from_slice(&[p[t * 2], p[t * 2 + 1], vx, vy]);
        }
    }
    Ok(Tensor::new(vec![b, n, h, INPUT_FEATURES], out)?)
}

/// A model bound to a tape and specialised to one branch.
pub struct Net<'a> {
    params: &'a FlnParams,
    bound: &'a Bound,
    branch: BranchId,
}

impl Net<'_> {
    fn var(&self, name: &str) -> Result<Var, ModelError> {
        self.params
            .store
            .position(name)
            .map(|i| self.bound.var(i))
            .ok_or_else(|| ModelError::MissingParam(name.to_string()))
    }

    fn theta(&self, name: &str) -> Result<Var, ModelError> {
        self.var(&format!("{}{name}", self.params.theta_prefix(self.branch)))
    }

    fn linear(&self, tape: &mut Tape, x: Var, w: &str, b: &str) -> Result<Var, ModelError> {
        let (w, b) = (self.theta(w)?, self.theta(b)?);
        let y = tape.matmul(x, w)?;
        Ok(tape.add(y, b)?)
    }

    fn act(&self, tape: &mut Tape, x: Var) -> Result<Var, ModelError> {
        Ok(match self.params.backbone.activation {
            Activation::Gelu => tape.gelu(x)?,
            Activation::Relu => tape.relu(x)?,
        })
    }

    /// Per-timestep embedding `[B, N, H, d]`.
    pub fn spatial_encode(&self, tape: &mut Tape, obs: &Tensor) -> Result<Var, ModelError> {
        let feats = tape.constant(input_features(obs)?)?;
        let h = self.linear(tape, feats, "spatial.w1", "spatial.b1")?;
        let h = self.act(tape, h)?;
        self.linear(tape, h, "spatial.w2", "spatial.b2")
    }

    /// Positional rows `[h, d]` for an `h`-step input.
    pub fn positional_rows(&self, tape: &mut Tape, h: usize) -> Result<Var, ModelError> {
        let len = self.params.branch_len(self.branch)?;
        if h > len {
            return Err(ModelError::Timestep { t: h - 1, len });
        }
        let d = self.params.backbone.d_model;
        match self.params.pe_table_name(self.branch) {
            Some(name) => {
                let table = self.var(&name)?;
                Ok(tape.narrow(table, 0, 0, h)?)
            }
            None => {
                let shift = self.params.sinusoidal_shift(self.branch, h);
                Ok(tape.constant(sinusoidal_table(h, shift, d))?)
            }
        }
    }

    /// Normalizes over the last axis, then applies this branch's affine at `site`.
    pub fn specialized_layer_norm(
        &self,
        tape: &mut Tape,
        x: Var,
        site: &str,
        capture: Option<&mut Capture>,
    ) -> Result<Var, ModelError> {
        let prefix = self.params.affine_prefix(site, self.branch)?;
        if let Some(c) = capture {
            c.ln_inputs.push((site.to_string(), tape.value(x).clone()));
        }
        let y = normalize_last(tape, x)?;
        let gamma = self.var(&format!("{prefix}.gamma"))?;
        let beta = self.var(&format!("{prefix}.beta"))?;
        let y = tape.mul(y, gamma)?;
        Ok(tape.add(y, beta)?)
    }

    fn attention(
        &self,
        tape: &mut Tape,
        x: Var,
        layer: usize,
        capture: Option<&mut Capture>,
    ) -> Result<Var, ModelError> {
        let cfg = &self.params.backbone;
        let (heads, d) = (cfg.heads, cfg.d_model);
        let dh = d / heads;
        let s = tape.shape(x).to_vec();
        let (b, len) = (s[0], s[1]);
        let proj = |tape: &mut Tape, p: &str| -> Result<Var, ModelError> {
            let y = self.linear(tape, x, &format!("enc{layer}.attn.w{p}"), &format!("enc{layer}.attn.b{p}"))?;
            let y = tape.reshape(y, &[b, len, heads, dh])?;
            Ok(tape.permute(y, &[0, 2, 1, 3])?)
        };
        let q = proj(tape, "q")?;
        let k = proj(tape, "k")?;
        let v = proj(tape, "v")?;
        let kt = tape.transpose(k)?;
        let scores = tape.matmul(q, kt)?;
        let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt())?;
        let attn = tape.softmax(scores, 3)?;
        if let Some(c) = capture {
            c.attention.push(tape.value(attn).clone());
        }
        let ctx = tape.matmul(attn, v)?;
        let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = tape.reshape(ctx, &[b, len, d])?;
        self.linear(tape, ctx, &format!("enc{layer}.attn.wo"), &format!("enc{layer}.attn.bo"))
    }

    /// Pre-norm encoder over agent-major tokens `[B, N*H, d]`.
    pub fn transformer_encode(
        &self,
        tape: &mut Tape,
        tokens: Var,
        mut capture: Option<&mut Capture>,
    ) -> Result<Var, ModelError> {
        let mut x = tokens;
        for l in 0..self.params.backbone.layers {
            let n1 = self.specialized_layer_norm(tape, x, &format!("enc{l}.ln1"), capture.as_deref_mut())?;
            let a = self.attention(tape, n1, l, capture.as_deref_mut())?;
            x = tape.add(x, a)?;
            let n2 = self.specialized_layer_norm(tape, x, &format!("enc{l}.ln2"), capture.as_deref_mut())?;
            let f = self.linear(tape, n2, &format!("enc{l}.ff.w1"), &format!("enc{l}.ff.b1"))?;
            let f = self.act(tape, f)?;
            let f = self.linear(tape, f, &format!("enc{l}.ff.w2"), &format!("enc{l}.ff.b2"))?;
            x = tape.add(x, f)?;
        }
        Ok(x)
    }

    /// Mixture head over each agent's final token; means are offsets from `last_pos` `[B, N, 2]`.
    pub fn decode(
        &self,
        tape: &mut Tape,
        encoded: Var,
        agents: usize,
        last_pos: &Tensor,
        capture: Option<&mut Capture>,
    ) -> Result<MixtureVars, ModelError> {
        let cfg = &self.params.backbone;
        let s = tape.shape(encoded).to_vec();
        let (b, d) = (s[0], s[2]);
        let h = s[1] / agents;
        let (t, k) = (cfg.horizon, cfg.modes);
        let x = tape.reshape(encoded, &[b, agents, h, d])?;
        let x = tape.narrow(x, 2, h - 1, 1)?;
        let x = tape.reshape(x, &[b, agents, d])?;
        let x = self.specialized_layer_norm(tape, x, DECODER_SITE, capture)?;
        let x = self.linear(tape, x, "dec.w1", "dec.b1")?;
        let x = self.act(tape, x)?;
        let out = self.linear(tape, x, "dec.w2", "dec.b2")?;

        let block = t * k * 2;
        let means = tape.narrow(out, 2, 0, block)?;
        let means = tape.reshape(means, &[b, agents, t, k, 2])?;
        let origin = tape.constant(last_pos.reshape(&[b, agents, 1, 1, 2])?)?;
        let means = tape.add(means, origin)?;
        let raw = tape.narrow(out, 2, block, block)?;
        let raw = tape.reshape(raw, &[b, agents, t, k, 2])?;
        let scales = tape.softplus(raw)?;
        let scales = tape.add_scalar(scales, SCALE_FLOOR)?;
        let logits = tape.narrow(out, 2, 2 * block, k)?;
        Ok(MixtureVars { means, scales, logits })
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        obs: &Tensor,
        mut capture: Option<&mut Capture>,
    ) -> Result<MixtureVars, ModelError> {
        let h = obs_len(obs)?;
        let s = obs.shape();
        let (b, n) = (s[0], s[1]);
        let d = self.params.backbone.d_model;
        let feats = self.spatial_encode(tape, obs)?;
        let pe = self.positional_rows(tape, h)?;
        let x = tape.add(feats, pe)?;
        let tokens = tape.reshape(x, &[b, n * h, d])?;
        let enc = self.transformer_encode(tape, tokens, capture.as_deref_mut())?;
        let last = last_positions(obs);
        self.decode(tape, enc, n, &last, capture)
    }
}

/// `(x - mean) / sqrt(var + eps)` along the last axis (population variance).
pub fn normalize_last(tape: &mut Tape, x: Var) -> Result<Var, ModelError> {
    let axis = tape.shape(x).len() - 1;
    let mu = tape.reduce_keep(crate::tensorgrad::ReduceOp::Mean, x, Some(axis), true)?;
    let xc = tape.sub(x, mu)?;
    let sq = tape.mul(xc, xc)?;
    let var = tape.reduce_keep(crate::tensorgrad::ReduceOp::Mean, sq, Some(axis), true)?;
    let var = tape.add_scalar(var, LN_EPS)?;
    let inv = tape.powf(var, -0.5)?;
    Ok(tape.mul(xc, inv)?)
}

/// Final observed position of every agent, `[B, N, 2]`.
pub fn last_positions(obs: &Tensor) -> Tensor {
    let s = obs.shape();
    let (b, n, h) = (s[0], s[1], s[2]);
    let data = obs
        .data()
        .chunks(h * 2)
        .flat_map(|row| row[(h - 1) * 2..h * 2].to_vec())
        .collect();
    Tensor::new(vec![b, n, 2], data).expect("last positions")
}
