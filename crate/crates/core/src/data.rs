//! Trajectory scenes: synthetic generation, text ingestion, normalization,
//! splitting, batching and the multi-length observation bundles used for
//! training.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{BranchId, BranchLengths};
use crate::tensorgrad::{Tensor, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("scene has {got} frames, needs at least {needed}")]
    TooShort { needed: usize, got: usize },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("no trajectory rows found")]
    Empty,
    #[error("invalid dataset: {0}")]
    Format(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// SplitMix64 finalizer.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent child seed for a named stream.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    splitmix64(seed ^ splitmix64(stream))
}

/// One multi-agent episode. `positions` is `[N, frames, 2]`.
///
/// `origin` and `scale` record the normalization applied so far:
/// raw = positions * scale + origin.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub id: u64,
    pub dt: f64,
    pub positions: Tensor,
    pub origin: [f64; 2],
    pub scale: f64,
}

impl Scene {
    pub fn new(id: u64, dt: f64, positions: Tensor) -> Result<Self, DataError> {
        let s = positions.shape();
        if s.len() != 3 || s[2] != 2 || s[0] == 0 {
            return Err(DataError::Format(format!("scene positions must be [N, F, 2], got {s:?}")));
        }
        if !positions.is_finite() {
            return Err(DataError::Format(format!("scene {id} has non-finite coordinates")));
        }
        Ok(Scene {
            id,
            dt,
            positions,
            origin: [0.0, 0.0],
            scale: 1.0,
        })
    }

    pub fn agents(&self) -> usize {
        self.positions.shape()[0]
    }

    pub fn frames(&self) -> usize {
        self.positions.shape()[1]
    }

    pub fn at(&self, agent: usize, frame: usize) -> [f64; 2] {
        let f = self.frames();
        let o = (agent * f + frame) * 2;
        let d = self.positions.data();
        [d[o], d[o + 1]]
    }

    /// Frames `[start, start + len)` of every agent as `[1, N, len, 2]`.
    pub fn window(&self, start: usize, len: usize) -> Result<Tensor, DataError> {
        let (n, f) = (self.agents(), self.frames());
        if start + len > f {
            return Err(DataError::TooShort { needed: start + len, got: f });
        }
        let d = self.positions.data();
        let mut out = Vec::with_capacity(n * len * 2);
        for a in 0..n {
            out.extend_from_slice(&d[(a * f + start) * 2..(a * f + start + len) * 2]);
        }
        Ok(Tensor::new(vec![1, n, len, 2], out)?)
    }
}

/// Relative frequency of each motion primitive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MotionMix {
    pub constant_velocity: f64,
    pub turn: f64,
    pub stop_and_go: f64,
}

impl Default for MotionMix {
    fn default() -> Self {
        MotionMix {
            constant_velocity: 1.0,
            turn: 1.0,
            stop_and_go: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Motion {
    ConstantVelocity,
    Turn,
    StopAndGo,
}

impl MotionMix {
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    fn validate(&self) -> Result<(), DataError> {
        let w = [self.constant_velocity, self.turn, self.stop_and_go];
        if w.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) || w.iter().sum::<f64>() <= 0.0 {
            return Err(DataError::Config(format!("invalid motion mix {w:?}")));
        }
        Ok(())
    }

    fn pick(&self, rng: &mut ChaCha8Rng) -> Motion {
        let total = self.constant_velocity + self.turn + self.stop_and_go;
        let u = rng.random::<f64>() * total;
        if u < self.constant_velocity {
            Motion::ConstantVelocity
        } else if u < self.constant_velocity + self.turn {
            Motion::Turn
        } else {
            Motion::StopAndGo
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub scenes: usize,
    pub min_agents: usize,
    pub max_agents: usize,
    pub obs_len: usize,
    pub horizon: usize,
    pub dt: f64,
    pub mix: MotionMix,
    /// Velocity noise, m/s per sqrt(s).
    pub noise: f64,
    pub min_speed: f64,
    pub max_speed: f64,
    /// Turn-rate magnitude range in rad/s.
    pub min_turn_rate: f64,
    pub max_turn_rate: f64,
    /// Stop-and-go period range in seconds.
    pub min_period: f64,
    pub max_period: f64,
    /// Peak repulsive speed between two coincident agents, m/s.
    pub repulsion: f64,
    pub repulsion_radius: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            scenes: 2000,
            min_agents: 1,
            max_agents: 3,
            obs_len: 8,
            horizon: 12,
            dt: 0.4,
            mix: MotionMix::default(),
            noise: 0.05,
            min_speed: 0.5,
            max_speed: 1.5,
            min_turn_rate: 0.2,
            max_turn_rate: 0.6,
            min_period: 2.0,
            max_period: 5.0,
            repulsion: 0.5,
            repulsion_radius: 1.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<(), DataError> {
        if self.scenes == 0 || self.min_agents == 0 || self.max_agents < self.min_agents {
            return Err(DataError::Config("scene and agent counts must be positive".into()));
        }
        if self.obs_len == 0 || self.horizon == 0 {
            return Err(DataError::Config("obs_len and horizon must be positive".into()));
        }
        if !(self.dt > 0.0) || !(self.noise >= 0.0) || !(self.repulsion >= 0.0) {
            return Err(DataError::Config("dt must be positive; noise and repulsion non-negative".into()));
        }
        if !(self.min_speed <= self.max_speed)
            || !(self.min_turn_rate <= self.max_turn_rate)
            || !(self.min_period > 0.0 && self.min_period <= self.max_period)
            || !(self.repulsion_radius > 0.0)
        {
            return Err(DataError::Config("invalid kinematic ranges".into()));
        }
        self.mix.validate()
    }
}

struct Agent {
    pos: [f64; 2],
    heading: f64,
    speed: f64,
    turn_rate: f64,
    motion: Motion,
    period: f64,
    phase: f64,
}

impl Agent {
    fn speed_at(&self, t: f64) -> f64 {
        match self.motion {
            Motion::StopAndGo => self.speed * 0.5 * (1.0 + (2.0 * PI * t / self.period + self.phase).cos()),
            _ => self.speed,
        }
    }

    /// Noise-free displacement over one step starting at time `t`.
    fn step(&mut self, t: f64, dt: f64) -> [f64; 2] {
        let v = self.speed_at(t);
        match self.motion {
            Motion::Turn if self.turn_rate != 0.0 => {
                let h0 = self.heading;
                let h1 = h0 + self.turn_rate * dt;
                self.heading = h1;
                let r = v / self.turn_rate;
                [r * (h1.sin() - h0.sin()), r * (h0.cos() - h1.cos())]
            }
            _ => [v * dt * self.heading.cos(), v * dt * self.heading.sin()],
        }
    }
}

fn generate_scene(cfg: &SynthConfig, index: usize) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, index as u64));
    let n = rng.random_range(cfg.min_agents..=cfg.max_agents);
    let frames = cfg.obs_len + cfg.horizon;
    let extent = 1.0 + n as f64;
    let mut agents: Vec<Agent> = (0..n)
        .map(|_| {
            let motion = cfg.mix.pick(&mut rng);
            let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
            Agent {
                pos: [rng.random_range(-extent..=extent), rng.random_range(-extent..=extent)],
                heading: rng.random_range(-PI..PI),
                speed: rng.random_range(cfg.min_speed..=cfg.max_speed),
                turn_rate: sign * rng.random_range(cfg.min_turn_rate..=cfg.max_turn_rate),
                motion,
                period: rng.random_range(cfg.min_period..=cfg.max_period),
                phase: rng.random_range(0.0..2.0 * PI),
            }
        })
        .collect();
    let mut traj = vec![0.0; n * frames * 2];
    let noise_scale = cfg.noise * cfg.dt.sqrt();
    for f in 0..frames {
        for (a, ag) in agents.iter().enumerate() {
            let o = (a * frames + f) * 2;
            traj[o] = ag.pos[0];
            traj[o + 1] = ag.pos[1];
        }
        if f + 1 == frames {
            break;
        }
        let snapshot: Vec<[f64; 2]> = agents.iter().map(|a| a.pos).collect();
        let t = f as f64 * cfg.dt;
        for (i, ag) in agents.iter_mut().enumerate() {
            let mut d = ag.step(t, cfg.dt);
            if cfg.repulsion > 0.0 {
                for (j, q) in snapshot.iter().enumerate() {
                    if j == i {
                        continue;
                    }
                    let (dx, dy) = (snapshot[i][0] - q[0], snapshot[i][1] - q[1]);
                    let dist = (dx * dx + dy * dy).sqrt().max(1e-6);
                    let push = cfg.repulsion * (-dist / cfg.repulsion_radius).exp() * cfg.dt;
                    d[0] += push * dx / dist;
                    d[1] += push * dy / dist;
                }
            }
            if noise_scale > 0.0 {
                let e0: f64 = StandardNormal.sample(&mut rng);
                let e1: f64 = StandardNormal.sample(&mut rng);
                d[0] += noise_scale * e0;
                d[1] += noise_scale * e1;
            }
            ag.pos[0] += d[0];
            ag.pos[1] += d[1];
        }
    }
    let positions = Tensor::new(vec![n, frames, 2], traj).expect("scene shape");
    Scene {
        id: index as u64,
        dt: cfg.dt,
        positions,
        origin: [0.0, 0.0],
        scale: 1.0,
    }
}

/// Seeded synthetic scenes with ids `0..cfg.scenes`, each of `obs_len + horizon` frames.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<Vec<Scene>, DataError> {
    cfg.validate()?;
    Ok((0..cfg.scenes).into_par_iter().map(|i| generate_scene(cfg, i)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DeriveMode {
    #[default]
    Truncation,
    Sliding,
}

impl std::str::FromStr for DeriveMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "truncation" => Ok(DeriveMode::Truncation),
            "sliding" => Ok(DeriveMode::Sliding),
            other => Err(format!("unknown derivation mode `{other}`")),
        }
    }
}

/// Short, medium and long observations with their futures.
///
/// Tensors carry a leading batch axis: inputs are `[B, N, H^*, 2]` and
/// futures `[B, N, T, 2]`, indexed S, M, L. In truncation mode the three
/// futures are identical.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationBundle {
    pub inputs: [Tensor; 3],
    pub futures: [Tensor; 3],
    pub mode: DeriveMode,
}

fn slot(b: BranchId) -> usize {
    match b {
        BranchId::S => 0,
        BranchId::M => 1,
        BranchId::L => 2,
    }
}

impl ObservationBundle {
    pub fn input(&self, b: BranchId) -> &Tensor {
        &self.inputs[slot(b)]
    }

    pub fn future(&self, b: BranchId) -> &Tensor {
        &self.futures[slot(b)]
    }

    pub fn batch(&self) -> usize {
        self.inputs[0].shape()[0]
    }

    pub fn agents(&self) -> usize {
        self.inputs[0].shape()[1]
    }

    /// Concatenates bundles along the batch axis.
    pub fn stack(parts: &[&ObservationBundle]) -> Result<ObservationBundle, DataError> {
        let first = parts.first().ok_or(DataError::Empty)?;
        if parts.iter().any(|p| p.mode != first.mode) {
            return Err(DataError::Format("cannot stack bundles of different modes".into()));
        }
        let cat = |get: &dyn Fn(&ObservationBundle) -> &Tensor| -> Result<Tensor, DataError> {
            let s0 = get(first).shape().to_vec();
            let mut data = Vec::new();
            for p in parts {
                let t = get(p);
                if t.shape()[1..] != s0[1..] {
                    return Err(DataError::Format(format!(
                        "cannot stack shapes {:?} and {:?}",
                        s0,
                        t.shape()
                    )));
                }
                data.extend_from_slice(t.data());
            }
            let mut shape = s0.clone();
            shape[0] = parts.iter().map(|p| get(p).shape()[0]).sum();
            Ok(Tensor::new(shape, data)?)
        };
        Ok(ObservationBundle {
            inputs: [cat(&|b| &b.inputs[0])?, cat(&|b| &b.inputs[1])?, cat(&|b| &b.inputs[2])?],
            futures: [cat(&|b| &b.futures[0])?, cat(&|b| &b.futures[1])?, cat(&|b| &b.futures[2])?],
            mode: first.mode,
        })
    }
}

/// Three aligned observations of `scene` for a `horizon`-step future.
///
/// Only the final `H^L + T` frames are used. Truncation takes the last `H^*`
/// frames before the prediction point and shares the remaining `T` frames as
/// future. Sliding starts every window at the first used frame and gives each
/// its own future.
pub fn derive_observations(
    scene: &Scene,
    lengths: BranchLengths,
    horizon: usize,
    mode: DeriveMode,
) -> Result<ObservationBundle, DataError> {
    lengths.validate().map_err(|e| DataError::Config(e.to_string()))?;
    let hl = lengths.long;
    if scene.frames() < hl + horizon {
        return Err(DataError::TooShort {
            needed: hl + horizon,
            got: scene.frames(),
        });
    }
    let lens = [lengths.short, lengths.medium, lengths.long];
    let base = scene.frames() - hl - horizon;
    match mode {
        DeriveMode::Truncation => {
            let end = base + hl;
            let fut = scene.window(end, horizon)?;
            Ok(ObservationBundle {
                inputs: [
                    scene.window(end - lens[0], lens[0])?,
                    scene.window(end - lens[1], lens[1])?,
                    scene.window(base, hl)?,
                ],
                futures: [fut.clone(), fut.clone(), fut],
                mode,
            })
        }
        DeriveMode::Sliding => Ok(ObservationBundle {
            inputs: [
                scene.window(base, lens[0])?,
                scene.window(base, lens[1])?,
                scene.window(base, lens[2])?,
            ],
            futures: [
                scene.window(base + lens[0], horizon)?,
                scene.window(base + lens[1], horizon)?,
                scene.window(base + lens[2], horizon)?,
            ],
            mode,
        }),
    }
}

/// The last `h` frames before the prediction point (`horizon` frames from
/// the end), with the future after it.
pub fn observation_at(scene: &Scene, h: usize, horizon: usize) -> Result<(Tensor, Tensor), DataError> {
    let f = scene.frames();
    if h == 0 || h + horizon > f {
        return Err(DataError::TooShort { needed: h.max(1) + horizon, got: f });
    }
    let end = f - horizon;
    Ok((scene.window(end - h, h)?, scene.window(end, horizon)?))
}

/// Reads "frame agent x y" rows and cuts them into scenes of `window` frames.
///
/// Windows start every `step` frames. Only agents present in every frame of
/// a window are kept; windows without agents are skipped.
pub fn load_trajnet(path: &Path, window: usize, step: usize, dt: f64) -> Result<Vec<Scene>, DataError> {
    let text = fs::read_to_string(path)?;
    parse_trajnet(&text, window, step, dt)
}

pub fn parse_trajnet(text: &str, window: usize, step: usize, dt: f64) -> Result<Vec<Scene>, DataError> {
    if window == 0 || step == 0 {
        return Err(DataError::Config("window and step must be positive".into()));
    }
    // frame -> agent -> position
    let mut rows: BTreeMap<i64, BTreeMap<i64, [f64; 2]>> = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(DataError::Parse {
                line: line_no,
                msg: format!("expected 4 fields, found {}", fields.len()),
            });
        }
        let num = |k: usize, what: &str| -> Result<f64, DataError> {
            let v: f64 = fields[k].parse().map_err(|_| DataError::Parse {
                line: line_no,
                msg: format!("{what} `{}` is not a number", fields[k]),
            })?;
            if !v.is_finite() {
                return Err(DataError::Parse {
                    line: line_no,
                    msg: format!("{what} is not finite"),
                });
            }
            Ok(v)
        };
        let frame = num(0, "frame")?;
        let agent = num(1, "agent")?;
        let (x, y) = (num(2, "x")?, num(3, "y")?);
        if frame.fract() != 0.0 || agent.fract() != 0.0 {
            return Err(DataError::Parse {
                line: line_no,
                msg: "frame and agent ids must be integers".into(),
            });
        }
        rows.entry(frame as i64).or_default().insert(agent as i64, [x, y]);
    }
    if rows.is_empty() {
        return Err(DataError::Empty);
    }
    let frames: Vec<i64> = rows.keys().copied().collect();
    let stride = frames.windows(2).map(|w| w[1] - w[0]).min().unwrap_or(1);
    if frames.windows(2).any(|w| (w[1] - w[0]) % stride != 0) {
        return Err(DataError::Format(format!("frame ids are not on a fixed stride of {stride}")));
    }
    let first = frames[0];
    let last = *frames.last().expect("non-empty");
    let total = ((last - first) / stride + 1) as usize;
    let empty = BTreeMap::new();
    let frame_rows = |k: usize| rows.get(&(first + k as i64 * stride)).unwrap_or(&empty);

    let mut scenes = Vec::new();
    let mut start = 0;
    while start + window <= total {
        let agents: Vec<i64> = frame_rows(start)
            .keys()
            .copied()
            .filter(|a| (start..start + window).all(|k| frame_rows(k).contains_key(a)))
            .collect();
        if !agents.is_empty() {
            let mut data = Vec::with_capacity(agents.len() * window * 2);
            for a in &agents {
                for k in start..start + window {
                    data.extend_from_slice(&frame_rows(k)[a]);
                }
            }
            let pos = Tensor::new(vec![agents.len(), window, 2], data)?;
            scenes.push(Scene::new(start as u64, dt, pos)?);
        }
        start += step;
    }
    Ok(scenes)
}

/// Global coordinate scale shared by every split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub scale: f64,
}

/// Centroid of all agents at `frame`.
fn centroid(scene: &Scene, frame: usize) -> [f64; 2] {
    let n = scene.agents() as f64;
    let mut c = [0.0, 0.0];
    for a in 0..scene.agents() {
        let p = scene.at(a, frame);
        c[0] += p[0];
        c[1] += p[1];
    }
    [c[0] / n, c[1] / n]
}

fn translated(scene: &Scene, anchor: usize) -> Scene {
    let c = centroid(scene, anchor);
    let mut s = scene.clone();
    for (i, v) in s.positions.data_mut().iter_mut().enumerate() {
        *v -= c[i % 2];
    }
    s.origin = [scene.origin[0] + c[0] * scene.scale, scene.origin[1] + c[1] * scene.scale];
    s
}

fn anchor_frame(scene: &Scene, horizon: usize) -> Result<usize, DataError> {
    if scene.frames() <= horizon {
        return Err(DataError::TooShort { needed: horizon + 1, got: scene.frames() });
    }
    Ok(scene.frames() - horizon - 1)
}

/// Root-mean-square coordinate of `scenes` after centring each on its
/// centroid at the last observed frame.
pub fn compute_stats(scenes: &[Scene], horizon: usize) -> Result<NormStats, DataError> {
    let (mut sq, mut count) = (0.0, 0usize);
    for s in scenes {
        let t = translated(s, anchor_frame(s, horizon)?);
        sq += t.positions.data().iter().map(|v| v * v).sum::<f64>();
        count += t.positions.numel();
    }
    let scale = if count == 0 { 1.0 } else { (sq / count as f64).sqrt() };
    Ok(NormStats {
        scale: if scale > 0.0 && scale.is_finite() { scale } else { 1.0 },
    })
}

/// Centres every scene on its centroid at the last observed frame (`horizon`
/// frames before the end) and divides by the global scale.
pub fn normalize(scenes: &[Scene], horizon: usize, stats: &NormStats) -> Result<Vec<Scene>, DataError> {
    scenes
        .iter()
        .map(|s| {
            let mut t = translated(s, anchor_frame(s, horizon)?);
            t.positions.data_mut().iter_mut().for_each(|v| *v /= stats.scale);
            t.scale = s.scale * stats.scale;
            Ok(t)
        })
        .collect()
}

/// Maps scene-frame coordinates `[.., 2]` back to raw meters.
pub fn denormalize_coords(scene: &Scene, t: &Tensor) -> Tensor {
    let mut out = t.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        *v = *v * scene.scale + scene.origin[i % 2];
    }
    out
}

pub fn denormalize(scene: &Scene) -> Scene {
    Scene {
        id: scene.id,
        dt: scene.dt,
        positions: denormalize_coords(scene, &scene.positions),
        origin: [0.0, 0.0],
        scale: 1.0,
    }
}

/// Scenes partitioned 70/15/15 by a hash of their id, normalized with
/// train statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<Scene>,
    pub val: Vec<Scene>,
    pub test: Vec<Scene>,
    pub stats: NormStats,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Part {
    Train,
    Val,
    Test,
}

pub fn part_of(id: u64) -> Part {
    match splitmix64(id) % 100 {
        0..70 => Part::Train,
        70..85 => Part::Val,
        _ => Part::Test,
    }
}

pub fn split_dataset(scenes: &[Scene], horizon: usize) -> Result<DatasetSplit, DataError> {
    let mut sorted: Vec<&Scene> = scenes.iter().collect();
    sorted.sort_by_key(|s| s.id);
    let pick = |p: Part| -> Vec<Scene> { sorted.iter().filter(|s| part_of(s.id) == p).map(|s| (*s).clone()).collect() };
    let (train, val, test) = (pick(Part::Train), pick(Part::Val), pick(Part::Test));
    let stats = compute_stats(&train, horizon)?;
    Ok(DatasetSplit {
        train: normalize(&train, horizon, &stats)?,
        val: normalize(&val, horizon, &stats)?,
        test: normalize(&test, horizon, &stats)?,
        stats,
    })
}

/// Groups item indices into batches of equal agent count.
///
/// Without an RNG, batches follow (agent count, index) order; with one,
/// items within a group and the batch order are shuffled.
pub fn make_batches(agent_counts: &[usize], batch_size: usize, rng: Option<&mut ChaCha8Rng>) -> Vec<Vec<usize>> {
    let batch_size = batch_size.max(1);
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &n) in agent_counts.iter().enumerate() {
        groups.entry(n).or_default().push(i);
    }
    let mut batches = Vec::new();
    match rng {
        None => {
            for idx in groups.values() {
                batches.extend(idx.chunks(batch_size).map(|c| c.to_vec()));
            }
        }
        Some(rng) => {
            for idx in groups.values_mut() {
                idx.shuffle(rng);
                batches.extend(idx.chunks(batch_size).map(|c| c.to_vec()));
            }
            batches.shuffle(rng);
        }
    }
    batches
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const COORDS_FILE: &str = "coords.bin";
pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneEntry {
    pub id: u64,
    pub agents: usize,
    pub frames: usize,
    pub dt: f64,
}

/// Sidecar describing a coordinate file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub count: usize,
    pub dt: f64,
    pub seed: Option<u64>,
    pub motion_mix: Option<MotionMix>,
    pub obs_len: usize,
    pub horizon: usize,
    pub scenes: Vec<SceneEntry>,
}

/// Writes `manifest.json` and `coords.bin` (little-endian f64, scene by scene).
pub fn write_dataset(dir: &Path, scenes: &[Scene], synth: Option<&SynthConfig>, obs_len: usize, horizon: usize) -> Result<Manifest, DataError> {
    fs::create_dir_all(dir)?;
    let manifest = Manifest {
        version: DATASET_VERSION,
        count: scenes.len(),
        dt: scenes.first().map_or(synth.map_or(0.4, |s| s.dt), |s| s.dt),
        seed: synth.map(|s| s.seed),
        motion_mix: synth.map(|s| s.mix),
        obs_len,
        horizon,
        scenes: scenes
            .iter()
            .map(|s| SceneEntry {
                id: s.id,
                agents: s.agents(),
                frames: s.frames(),
                dt: s.dt,
            })
            .collect(),
    };
    let mut bytes = Vec::with_capacity(scenes.iter().map(|s| s.positions.numel() * 8).sum());
    for s in scenes {
        for v in s.positions.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    write_atomic(&dir.join(COORDS_FILE), &bytes)?;
    write_atomic(&dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    Ok(manifest)
}

pub fn read_dataset(dir: &Path) -> Result<(Manifest, Vec<Scene>), DataError> {
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
    if manifest.version != DATASET_VERSION {
        return Err(DataError::Format(format!("unsupported dataset version {}", manifest.version)));
    }
    if manifest.count != manifest.scenes.len() {
        return Err(DataError::Format("scene count does not match entries".into()));
    }
    let bytes = fs::read(dir.join(COORDS_FILE))?;
    let expected: usize = manifest.scenes.iter().map(|e| e.agents * e.frames * 2 * 8).sum();
    if bytes.len() != expected {
        return Err(DataError::Format(format!(
            "coordinate file has {} bytes, manifest implies {expected}",
            bytes.len()
        )));
    }
    let mut offset = 0;
    let mut scenes = Vec::with_capacity(manifest.count);
    for e in &manifest.scenes {
        let n = e.agents * e.frames * 2;
        let data = bytes[offset..offset + n * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        offset += n * 8;
        scenes.push(Scene::new(e.id, e.dt, Tensor::new(vec![e.agents, e.frames, 2], data)?)?);
    }
    Ok((manifest, scenes))
}

/// Writes to a sibling temporary file, then renames over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> SynthConfig {
        SynthConfig {
            scenes: 20,
            obs_len: 8,
            horizon: 12,
            seed,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn generation_is_seeded() {
        let a = generate_synthetic(&small(3)).unwrap();
        let b = generate_synthetic(&small(3)).unwrap();
        let c = generate_synthetic(&small(4)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.iter().all(|s| s.frames() == 20 && (1..=3).contains(&s.agents())));
    }

    #[test]
    fn noiseless_constant_velocity_is_linear() {
        let cfg = SynthConfig {
            mix: MotionMix { constant_velocity: 1.0, turn: 0.0, stop_and_go: 0.0 },
            noise: 0.0,
            repulsion: 0.0,
            ..small(1)
        };
        for s in generate_synthetic(&cfg).unwrap() {
            for a in 0..s.agents() {
                for f in 2..s.frames() {
                    let (p0, p1, p2) = (s.at(a, f - 2), s.at(a, f - 1), s.at(a, f));
                    for k in 0..2 {
                        assert!((p2[k] - 2.0 * p1[k] + p0[k]).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn truncation_suffixes() {
        let s = &generate_synthetic(&small(2)).unwrap()[0];
        let b = derive_observations(s, BranchLengths::new(2, 6, 8).unwrap(), 12, DeriveMode::Truncation).unwrap();
        let n = s.agents();
        for a in 0..n {
            for (k, len) in [(0, 2), (1, 6)] {
                for t in 0..len {
                    for c in 0..2 {
                        let x = b.inputs[k].at(&[0, a, t, c]);
                        assert_eq!(x, b.inputs[2].at(&[0, a, 8 - len + t, c]));
                    }
                }
            }
        }
        assert_eq!(b.futures[0], b.futures[2]);
    }

    #[test]
    fn sliding_futures_are_offset() {
        let s = &generate_synthetic(&small(2)).unwrap()[1];
        let b = derive_observations(s, BranchLengths::new(2, 6, 8).unwrap(), 12, DeriveMode::Sliding).unwrap();
        assert_eq!(b.futures[0].at(&[0, 0, 0, 0]), s.at(0, 2)[0]);
        assert_eq!(b.futures[1].at(&[0, 0, 0, 1]), s.at(0, 6)[1]);
        assert_ne!(b.futures[0], b.futures[2]);
    }

    #[test]
    fn too_short_scene() {
        let s = Scene::new(0, 0.4, Tensor::zeros(&[1, 10, 2])).unwrap();
        let r = derive_observations(&s, BranchLengths::new(2, 6, 8).unwrap(), 12, DeriveMode::Truncation);
        assert!(matches!(r, Err(DataError::TooShort { needed: 20, got: 10 })));
    }

    #[test]
    fn trajnet_parsing() {
        let mut text = String::new();
        for f in 0..20 {
            text += &format!("{} 1 {} 0.0\n{} 2 0.0 {}\n", f * 10, f, f * 10, f);
            if (5..15).contains(&f) {
                text += &format!("{} 3 1.0 1.0\n", f * 10);
            }
        }
        let scenes = parse_trajnet(&text, 20, 20, 0.4).unwrap();
        assert_eq!(scenes.len(), 1);
        assert_eq!(scenes[0].agents(), 2);
        assert_eq!(scenes[0].at(0, 19), [19.0, 0.0]);

        let err = parse_trajnet("0 1 0.0 0.0\n10 1 abc 0.0\n", 2, 2, 0.4).unwrap_err();
        assert!(matches!(err, DataError::Parse { line: 2, .. }));
        assert!(err.to_string().contains("line 2"));
        assert!(matches!(parse_trajnet("\n# nothing\n", 2, 2, 0.4), Err(DataError::Empty)));
    }

    #[test]
    fn normalize_round_trip_and_zero_centred() {
        let scenes = generate_synthetic(&small(5)).unwrap();
        let stats = compute_stats(&scenes, 12).unwrap();
        let norm = normalize(&scenes, 12, &stats).unwrap();
        for (raw, n) in scenes.iter().zip(&norm) {
            assert!(denormalize(n).positions.max_abs_diff(&raw.positions) < 1e-12);
            let c = centroid(n, 7);
            assert!(c[0].abs() < 1e-12 && c[1].abs() < 1e-12);
        }
        let centred = translated(&norm[0], 7);
        assert!(centred.positions.max_abs_diff(&norm[0].positions) < 1e-15);
    }

    #[test]
    fn split_is_disjoint_and_uses_train_stats() {
        let scenes = generate_synthetic(&SynthConfig { scenes: 200, ..small(9) }).unwrap();
        let split = split_dataset(&scenes, 12).unwrap();
        assert_eq!(split.train.len() + split.val.len() + split.test.len(), 200);
        let raw_train: Vec<Scene> = scenes.iter().filter(|s| part_of(s.id) == Part::Train).cloned().collect();
        assert_eq!(split.stats, compute_stats(&raw_train, 12).unwrap());
        let mut ids: Vec<u64> = split.train.iter().chain(&split.val).chain(&split.test).map(|s| s.id).collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 200);
    }

    #[test]
    fn batches_group_by_agent_count() {
        let counts = [1, 2, 1, 3, 2, 1, 1];
        let plain = make_batches(&counts, 2, None);
        assert_eq!(plain, vec![vec![0, 2], vec![5, 6], vec![1, 4], vec![3]]);
        let mut r1 = ChaCha8Rng::seed_from_u64(1);
        let mut r2 = ChaCha8Rng::seed_from_u64(1);
        let a = make_batches(&counts, 2, Some(&mut r1));
        assert_eq!(a, make_batches(&counts, 2, Some(&mut r2)));
        for b in &a {
            assert!(b.iter().all(|&i| counts[i] == counts[b[0]]));
        }
    }

    #[test]
    fn dataset_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small(8);
        let scenes = generate_synthetic(&cfg).unwrap();
        write_dataset(dir.path(), &scenes, Some(&cfg), 8, 12).unwrap();
        let (m, back) = read_dataset(dir.path()).unwrap();
        assert_eq!(m.count, 20);
        assert_eq!(back, scenes);
    }
}
