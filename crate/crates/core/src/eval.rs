//! Displacement metrics, per-length evaluation, length sweeps and the
//! positional-encoding and layer-norm diagnostics.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{sinusoidal, BranchId, Capture, FlnParams, DECODER_SITE};
use crate::data::{derive_seed, denormalize_coords, observation_at, Scene};
use crate::distributions::{draw_samples, SampleMode};
use crate::fln::{predict, route};
use crate::tensorgrad::{Tape, Tensor};
use crate::{Error, Result};

fn check_samples(samples: &Tensor, gt: &Tensor) -> Result<(usize, usize, usize)> {
    let s = samples.shape();
    let g = gt.shape();
    if s.len() != 4 || g.len() != 3 || s[1..] != g[..] || s[3] != 2 {
        return Err(Error::Config(format!("samples {s:?} do not match ground truth {g:?}")));
    }
    if s[0] == 0 {
        return Err(Error::Config("at least one sample is required".into()));
    }
    if s[2] == 0 {
        return Err(Error::Config("empty horizon".into()));
    }
    Ok((s[0], s[1], s[2]))
}

/// Per agent, the best sample's mean and final displacement.
fn per_agent(samples: &Tensor, gt: &Tensor) -> Result<Vec<(f64, f64)>> {
    let (k, n, t) = check_samples(samples, gt)?;
    let (sd, gd) = (samples.data(), gt.data());
    let mut out = Vec::with_capacity(n);
    for a in 0..n {
        let mut best = (f64::INFINITY, f64::INFINITY);
        for s in 0..k {
            let mut total = 0.0;
            let mut last = 0.0;
            for step in 0..t {
                let o = ((s * n + a) * t + step) * 2;
                let g = (a * t + step) * 2;
                last = (sd[o] - gd[g]).hypot(sd[o + 1] - gd[g + 1]);
                total += last;
            }
            best.0 = best.0.min(total / t as f64);
            best.1 = best.1.min(last);
        }
        out.push(best);
    }
    Ok(out)
}

/// Best-of-K average displacement, `samples` `[K, N, T, 2]` against `gt` `[N, T, 2]`.
pub fn ade(samples: &Tensor, gt: &Tensor) -> Result<f64> {
    let v = per_agent(samples, gt)?;
    Ok(v.iter().map(|p| p.0).sum::<f64>() / v.len() as f64)
}

/// Best-of-K final displacement.
pub fn fde(samples: &Tensor, gt: &Tensor) -> Result<f64> {
    let v = per_agent(samples, gt)?;
    Ok(v.iter().map(|p| p.1).sum::<f64>() / v.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalSpec {
    pub samples: usize,
    pub sample_mode: SampleMode,
    pub seed: u64,
    pub batch_size: usize,
    pub horizon: usize,
}

impl Default for EvalSpec {
    fn default() -> Self {
        EvalSpec {
            samples: 3,
            sample_mode: SampleMode::ModeMeans,
            seed: 0,
            batch_size: 64,
            horizon: 12,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Observed length fed to the model.
    pub length: usize,
    pub k: usize,
    pub scenes: usize,
    pub agents: usize,
    pub ade: f64,
    pub fde: f64,
    pub branch: BranchId,
    /// Steps the branch actually consumed.
    pub used_len: usize,
}

/// Scenes in id order, chunked into batches of equal agent count.
fn scene_batches(scenes: &[Scene], batch_size: usize) -> Vec<Vec<&Scene>> {
    let mut sorted: Vec<&Scene> = scenes.iter().collect();
    sorted.sort_by_key(|s| s.id);
    let mut groups: BTreeMap<usize, Vec<&Scene>> = BTreeMap::new();
    for s in sorted {
        groups.entry(s.agents()).or_default().push(s);
    }
    groups
        .into_values()
        .flat_map(|g| g.chunks(batch_size.max(1)).map(|c| c.to_vec()).collect::<Vec<_>>())
        .collect()
}

fn stack(parts: &[Tensor]) -> Result<Tensor> {
    let mut shape = parts[0].shape().to_vec();
    shape[0] = parts.iter().map(|p| p.shape()[0]).sum();
    let data = parts.iter().flat_map(|p| p.data().iter().copied()).collect();
    Ok(Tensor::new(shape, data)?)
}

/// Slice `b` of a `[B, ...]` tensor, without the batch axis.
fn item(t: &Tensor, b: usize) -> Tensor {
    let inner: usize = t.shape()[1..].iter().product();
    Tensor::new(t.shape()[1..].to_vec(), t.data()[b * inner..(b + 1) * inner].to_vec()).expect("item")
}

struct BatchResult {
    ade_sum: f64,
    fde_sum: f64,
    agents: usize,
    branch: BranchId,
    used_len: usize,
}

fn eval_batch(params: &FlnParams, batch: &[&Scene], h: usize, spec: &EvalSpec) -> Result<BatchResult> {
    let mut obs = Vec::with_capacity(batch.len());
    let mut fut = Vec::with_capacity(batch.len());
    for s in batch {
        let (o, f) = observation_at(s, h, spec.horizon)?;
        obs.push(o);
        fut.push(f);
    }
    let obs = stack(&obs)?;
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false)?;
    let routed = predict(&mut tape, params, &bound, &obs)?;
    let pred = routed.pred.values(&tape);
    let samples = draw_samples(&pred, spec.samples, spec.sample_mode, derive_seed(spec.seed, batch[0].id))?;
    let mut res = BatchResult {
        ade_sum: 0.0,
        fde_sum: 0.0,
        agents: 0,
        branch: routed.branch,
        used_len: routed.used_len,
    };
    for (b, s) in batch.iter().enumerate() {
        let pred_m = denormalize_coords(s, &item(&samples, b));
        let gt_m = denormalize_coords(s, &item(&fut[b], 0));
        for (a, f) in per_agent(&pred_m, &gt_m)? {
            res.ade_sum += a;
            res.fde_sum += f;
        }
        res.agents += s.agents();
    }
    Ok(res)
}

/// ADE/FDE in meters over `scenes` observed for `h` steps.
///
/// Multi-branch models route `h`; single models use their one branch.
pub fn evaluate(params: &FlnParams, scenes: &[Scene], h: usize, spec: &EvalSpec) -> Result<Metrics> {
    if scenes.is_empty() {
        return Err(Error::Config("no scenes to evaluate".into()));
    }
    let batches = scene_batches(scenes, spec.batch_size);
    let results: Vec<BatchResult> = batches
        .par_iter()
        .map(|b| eval_batch(params, b, h, spec))
        .collect::<Result<_>>()?;
    let (mut ade_sum, mut fde_sum, mut agents) = (0.0, 0.0, 0);
    for r in &results {
        ade_sum += r.ade_sum;
        fde_sum += r.fde_sum;
        agents += r.agents;
    }
    Ok(Metrics {
        length: h,
        k: spec.samples,
        scenes: scenes.len(),
        agents,
        ade: ade_sum / agents as f64,
        fde: fde_sum / agents as f64,
        branch: results[0].branch,
        used_len: results[0].used_len,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub length: usize,
    pub metrics: Option<Metrics>,
    pub error: Option<String>,
}

/// Evaluates every length in `lengths`; lengths the model cannot take are
/// recorded with their error.
pub fn generality_sweep(params: &FlnParams, scenes: &[Scene], lengths: &[usize], spec: &EvalSpec) -> Vec<SweepRow> {
    lengths
        .iter()
        .map(|&h| match evaluate(params, scenes, h, spec) {
            Ok(m) => SweepRow {
                length: h,
                metrics: Some(m),
                error: None,
            },
            Err(e) => SweepRow {
                length: h,
                metrics: None,
                error: Some(e.to_string()),
            },
        })
        .collect()
}

/// Branch the model uses for length `h`, if any.
pub fn routed_branch(params: &FlnParams, h: usize) -> Option<BranchId> {
    match params.kind {
        crate::backbone::ModelKind::Flexi { lengths, .. } => route(h, &lengths).ok(),
        crate::backbone::ModelKind::Single { .. } => (h >= 1).then_some(BranchId::L),
    }
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("length,branch,used_len,ade,fde,k,scenes,agents,error\n");
    for r in rows {
        match &r.metrics {
            Some(m) => writeln!(
                out,
                "{},{},{},{},{},{},{},{},",
                r.length, m.branch, m.used_len, m.ade, m.fde, m.k, m.scenes, m.agents
            ),
            None => writeln!(
                out,
                "{},,,,,,,,\"{}\"",
                r.length,
                r.error.as_deref().unwrap_or("").replace('"', "'")
            ),
        }
        .expect("string write");
    }
    out
}

pub fn metrics_csv(rows: &[Metrics]) -> String {
    let mut out = String::from("length,branch,used_len,ade,fde,k,scenes,agents\n");
    for m in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            m.length, m.branch, m.used_len, m.ade, m.fde, m.k, m.scenes, m.agents
        )
        .expect("string write");
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteStats {
    pub site: String,
    /// Per observed position, the average per-token feature mean.
    pub mean: Vec<f64>,
    /// Per observed position, the average per-token feature standard deviation.
    pub std: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LnStatReport {
    pub length: usize,
    pub branch: BranchId,
    pub sites: Vec<SiteStats>,
}

/// Statistics of the features entering each encoder layer norm, for
/// `scenes` observed over their last `h` steps on `branch`.
pub fn ln_statistics_probe(
    params: &FlnParams,
    scenes: &[Scene],
    h: usize,
    branch: BranchId,
    horizon: usize,
) -> Result<LnStatReport> {
    if scenes.is_empty() {
        return Err(Error::Config("no probe scenes".into()));
    }
    let d = params.backbone.d_model;
    let batches = scene_batches(scenes, 64);
    // per batch: site -> (sum of means, sum of stds) per position, token count per position
    type Partial = BTreeMap<String, (Vec<f64>, Vec<f64>)>;
    let partials: Vec<(Partial, usize)> = batches
        .par_iter()
        .map(|batch| -> Result<(Partial, usize)> {
            let obs = stack(
                &batch
                    .iter()
                    .map(|s| observation_at(s, h, horizon).map(|p| p.0))
                    .collect::<std::result::Result<Vec<_>, _>>()?,
            )?;
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape, false)?;
            let mut cap = Capture::default();
            params.forward_open(&mut tape, &bound, &obs, branch, Some(&mut cap))?;
            let n = batch[0].agents();
            let mut acc = Partial::new();
            for (site, x) in cap.ln_inputs {
                if site == DECODER_SITE {
                    continue;
                }
                let entry = acc.entry(site).or_insert_with(|| (vec![0.0; h], vec![0.0; h]));
                for (tok, row) in x.data().chunks(d).enumerate() {
                    let t = tok % (n * h) % h;
                    let mu = row.iter().sum::<f64>() / d as f64;
                    let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
                    entry.0[t] += mu;
                    entry.1[t] += var.sqrt();
                }
            }
            Ok((acc, batch.len() * n))
        })
        .collect::<Result<_>>()?;
    let mut total = Partial::new();
    let mut tokens_per_position = 0;
    for (p, count) in partials {
        tokens_per_position += count;
        for (site, (m, s)) in p {
            let e = total.entry(site).or_insert_with(|| (vec![0.0; h], vec![0.0; h]));
            for t in 0..h {
                e.0[t] += m[t];
                e.1[t] += s[t];
            }
        }
    }
    let c = tokens_per_position as f64;
    let mut sites: Vec<SiteStats> = total
        .into_iter()
        .map(|(site, (m, s))| SiteStats {
            site,
            mean: m.iter().map(|v| v / c).collect(),
            std: s.iter().map(|v| v / c).collect(),
        })
        .collect();
    let order = params.backbone.encoder_sites();
    sites.sort_by_key(|s| order.iter().position(|o| *o == s.site));
    Ok(LnStatReport { length: h, branch, sites })
}

/// Largest gap between two reports' per-position means, aligning positions
/// from the most recent step backwards.
pub fn max_mean_gap(a: &LnStatReport, b: &LnStatReport) -> f64 {
    let mut gap: f64 = 0.0;
    for sa in &a.sites {
        let Some(sb) = b.sites.iter().find(|s| s.site == sa.site) else { continue };
        let m = sa.mean.len().min(sb.mean.len());
        for i in 0..m {
            let x = sa.mean[sa.mean.len() - m + i];
            let y = sb.mean[sb.mean.len() - m + i];
            gap = gap.max((x - y).abs());
        }
    }
    gap
}

pub fn ln_report_csv(r: &LnStatReport) -> String {
    let mut out = String::from("site,position,mean,std\n");
    for s in &r.sites {
        for t in 0..s.mean.len() {
            writeln!(out, "{},{},{},{}", s.site, t, s.mean[t], s.std[t]).expect("string write");
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeDeviationReport {
    pub h1: usize,
    pub h2: usize,
    /// Euclidean distance per timestep over the shared range.
    pub distances: Vec<f64>,
}

/// Distance between sinusoidal encodings of each timestep when the observed
/// length is `h1` versus `h2`.
pub fn pe_deviation_report(d_model: usize, h1: usize, h2: usize) -> PeDeviationReport {
    let distances = (0..h1.min(h2))
        .map(|t| distance(&sinusoidal(t, h1, d_model), &sinusoidal(t, h2, d_model)))
        .collect();
    PeDeviationReport { h1, h2, distances }
}

/// Distance between the positional rows two models feed their branches.
pub fn pe_table_deviation(a: &FlnParams, ba: BranchId, b: &FlnParams, bb: BranchId) -> Result<PeDeviationReport> {
    let (h1, h2) = (a.branch_len(ba)?, b.branch_len(bb)?);
    let distances = (0..h1.min(h2))
        .map(|t| Ok(distance(&a.positional_encode(t, ba)?, &b.positional_encode(t, bb)?)))
        .collect::<Result<_>>()?;
    Ok(PeDeviationReport { h1, h2, distances })
}

fn distance(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
}

pub fn pe_report_csv(r: &PeDeviationReport) -> String {
    let mut out = String::from("timestep,distance\n");
    for (t, d) in r.distances.iter().enumerate() {
        writeln!(out, "{t},{d}").expect("string write");
    }
    out
}
