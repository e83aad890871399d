#![allow(dead_code)]

use flexilength::backbone::{Activation, BackboneConfig, BranchLengths, FlnParams, PeKind};
use flexilength::data::{derive_observations, generate_synthetic, split_dataset, DatasetSplit, DeriveMode, ObservationBundle, SynthConfig};
use flexilength::distributions::MixturePrediction;
use flexilength::fln::{fln_loss, BranchConfig};
use flexilength::tensorgrad::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;

/// |a - n| / max(|a|, |n|, 1e-6)
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Largest relative error between the tape gradient of `f` and central
/// finite differences, over every element of every input.
pub fn gradcheck<F>(inputs: &[Tensor], f: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone()).unwrap()).collect();
    let out = f(&mut tape, &vars);
    tape.backward(out).unwrap();
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let eval = |xs: &[Tensor]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.constant(t.clone()).unwrap()).collect();
        let out = f(&mut tape, &vars);
        tape.value(out).item().unwrap()
    };
    let mut worst: f64 = 0.0;
    let mut xs = inputs.to_vec();
    for i in 0..xs.len() {
        for j in 0..xs[i].numel() {
            let x0 = xs[i].data()[j];
            xs[i].data_mut()[j] = x0 + FD_STEP;
            let up = eval(&xs);
            xs[i].data_mut()[j] = x0 - FD_STEP;
            let down = eval(&xs);
            xs[i].data_mut()[j] = x0;
            let numeric = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic[i].data()[j], numeric));
        }
    }
    worst
}

/// Same check over every parameter of a model, with `loss` built from a bound store.
#[allow(clippy::needless_range_loop)]
pub fn gradcheck_params<F>(params: &FlnParams, loss: F) -> f64
where
    F: Fn(&mut Tape, &FlnParams, &flexilength::params::Bound) -> Var,
{
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, true).unwrap();
    let out = loss(&mut tape, params, &bound);
    tape.backward(out).unwrap();
    let grads = bound.grads(&tape);

    let eval = |p: &FlnParams| {
        let mut tape = Tape::new();
        let bound = p.bind(&mut tape, false).unwrap();
        let out = loss(&mut tape, p, &bound);
        tape.value(out).item().unwrap()
    };
    let mut p = params.clone();
    let mut worst: f64 = 0.0;
    for i in 0..p.store.len() {
        for j in 0..p.store.entries()[i].value.numel() {
            let x0 = p.store.entries()[i].value.data()[j];
            p.store.value_at_mut(i).data_mut()[j] = x0 + FD_STEP;
            let up = eval(&p);
            p.store.value_at_mut(i).data_mut()[j] = x0 - FD_STEP;
            let down = eval(&p);
            p.store.value_at_mut(i).data_mut()[j] = x0;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let a = grads[i].as_ref().map_or(0.0, |g| g.data()[j]);
            worst = worst.max(rel_err(a, numeric));
        }
    }
    worst
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// A random mixture with scales in [0.3, 1.5].
pub fn random_mixture(rng: &mut ChaCha8Rng, b: usize, n: usize, t: usize, k: usize) -> MixturePrediction {
    MixturePrediction::new(
        random_tensor(rng, &[b, n, t, k, 2], -1.0, 1.0),
        random_tensor(rng, &[b, n, t, k, 2], 0.3, 1.5),
        random_tensor(rng, &[b, n, k], -1.0, 1.0),
    )
    .unwrap()
}

/// Direct summation of the mixture density, averaged over batch, agents and steps.
pub fn mixture_nll_oracle(p: &MixturePrediction, gt: &Tensor) -> f64 {
    let s = p.means.shape();
    let (b, n, t, k) = (s[0], s[1], s[2], s[3]);
    let mut total = 0.0;
    for bi in 0..b {
        for a in 0..n {
            let z: f64 = (0..k).map(|m| p.logits.at(&[bi, a, m]).exp()).sum();
            for st in 0..t {
                let mut density = 0.0;
                for m in 0..k {
                    let w = p.logits.at(&[bi, a, m]).exp() / z;
                    let mut pdf = 1.0;
                    for c in 0..2 {
                        let mu = p.means.at(&[bi, a, st, m, c]);
                        let sd = p.scales.at(&[bi, a, st, m, c]);
                        let y = gt.at(&[bi, a, st, c]);
                        pdf *= (-(y - mu) * (y - mu) / (2.0 * sd * sd)).exp() / (sd * (2.0 * std::f64::consts::PI).sqrt());
                    }
                    density += w * pdf;
                }
                total -= density.ln();
            }
        }
    }
    total / (b * n * t) as f64
}

/// Monte-Carlo KL between two diagonal bivariate Gaussians.
pub fn mc_gaussian_kl(mu_p: [f64; 2], sd_p: [f64; 2], mu_q: [f64; 2], sd_q: [f64; 2], samples: usize, seed: u64) -> f64 {
    use rand_distr::{Distribution, StandardNormal};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let log_pdf = |x: f64, mu: f64, sd: f64| -0.5 * ((x - mu) / sd).powi(2) - sd.ln();
    let mut acc = 0.0;
    for _ in 0..samples {
        for c in 0..2 {
            let z: f64 = StandardNormal.sample(&mut rng);
            let x = mu_p[c] + sd_p[c] * z;
            acc += log_pdf(x, mu_p[c], sd_p[c]) - log_pdf(x, mu_q[c], sd_q[c]);
        }
    }
    acc / samples as f64
}

/// Best-of-K (ADE, FDE) by explicit loops, `samples` `[K, N, T, 2]`, `gt` `[N, T, 2]`.
pub fn displacement_oracle(samples: &Tensor, gt: &Tensor) -> (f64, f64) {
    let s = samples.shape();
    let (k, n, t) = (s[0], s[1], s[2]);
    let mut ade = 0.0;
    let mut fde = 0.0;
    for a in 0..n {
        let mut best_avg = f64::INFINITY;
        let mut best_final = f64::INFINITY;
        for m in 0..k {
            let d: Vec<f64> = (0..t)
                .map(|st| {
                    let dx = samples.at(&[m, a, st, 0]) - gt.at(&[a, st, 0]);
                    let dy = samples.at(&[m, a, st, 1]) - gt.at(&[a, st, 1]);
                    (dx * dx + dy * dy).sqrt()
                })
                .collect();
            best_avg = best_avg.min(d.iter().sum::<f64>() / t as f64);
            best_final = best_final.min(d[t - 1]);
        }
        ade += best_avg;
        fde += best_final;
    }
    (ade / n as f64, fde / n as f64)
}

/// d_model 8, one layer, K = 2, T = 3.
pub fn tiny_backbone() -> BackboneConfig {
    BackboneConfig {
        d_model: 8,
        heads: 2,
        layers: 1,
        ff_width: 8,
        decoder_hidden: 8,
        modes: 2,
        horizon: 3,
        pe: PeKind::Sinusoidal,
        activation: Activation::Gelu,
    }
}

pub fn tiny_bundle(lengths: BranchLengths, agents: usize, horizon: usize, seed: u64) -> ObservationBundle {
    let cfg = SynthConfig {
        scenes: 1,
        min_agents: agents,
        max_agents: agents,
        obs_len: lengths.long,
        horizon,
        seed,
        ..SynthConfig::default()
    };
    let s = &generate_synthetic(&cfg).unwrap()[0];
    derive_observations(s, lengths, horizon, DeriveMode::Truncation).unwrap()
}

pub fn fln_loss_gradcheck(params: &FlnParams, bundle: &ObservationBundle, cfg: &BranchConfig) -> f64 {
    gradcheck_params(params, |tape, p, bound| fln_loss(tape, p, bound, bundle, cfg).unwrap().0.total)
}

/// A normalized synthetic split.
pub fn synthetic_split(scenes: usize, obs_len: usize, horizon: usize, seed: u64) -> DatasetSplit {
    let raw = generate_synthetic(&SynthConfig {
        scenes,
        obs_len,
        horizon,
        seed,
        ..SynthConfig::default()
    })
    .unwrap();
    split_dataset(&raw, horizon).unwrap()
}
