//! Diagonal bivariate Gaussian mixture heads.
//!
//! Shapes carry a leading batch axis `B`:
//! means and scales are `[B, N, T, K, 2]`, mode logits are `[B, N, K]`,
//! and ground-truth futures are `[B, N, T, 2]`. Mode weights are per agent
//! and shared by every future timestep.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensorgrad::{Tape, Tensor, TensorError, Var};

pub const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DistError {
    #[error("mixture shape mismatch: {0}")]
    Shape(String),
    #[error("mixture scales must be strictly positive")]
    NonPositiveScale,
    #[error("requested {requested} mode means but the mixture has {modes} modes")]
    TooManySamples { requested: usize, modes: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Mixture parameters recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub struct MixtureVars {
    pub means: Var,
    pub scales: Var,
    pub logits: Var,
}

/// Owned mixture parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct MixturePrediction {
    pub means: Tensor,
    pub scales: Tensor,
    pub logits: Tensor,
}

/// Extents of a mixture: batch, agents, horizon, modes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MixtureDims {
    pub batch: usize,
    pub agents: usize,
    pub horizon: usize,
    pub modes: usize,
}

impl MixturePrediction {
    pub fn new(means: Tensor, scales: Tensor, logits: Tensor) -> Result<Self, DistError> {
        let p = MixturePrediction { means, scales, logits };
        p.dims()?;
        if p.scales.data().iter().any(|&s| s <= 0.0) {
            return Err(DistError::NonPositiveScale);
        }
        Ok(p)
    }

    pub fn dims(&self) -> Result<MixtureDims, DistError> {
        dims_of(self.means.shape(), self.scales.shape(), self.logits.shape())
    }

    /// Records the parameters as tape leaves.
    pub fn record(&self, tape: &mut Tape, requires_grad: bool) -> Result<MixtureVars, DistError> {
        Ok(MixtureVars {
            means: tape.leaf(self.means.clone(), requires_grad)?,
            scales: tape.leaf(self.scales.clone(), requires_grad)?,
            logits: tape.leaf(self.logits.clone(), requires_grad)?,
        })
    }

    /// Per-agent mode probabilities `[B, N, K]`.
    pub fn weights(&self) -> Tensor {
        let d = self.dims().expect("validated");
        let mut out = self.logits.clone();
        for row in out.data_mut().chunks_mut(d.modes) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        out
    }
}

impl MixtureVars {
    pub fn values(&self, tape: &Tape) -> MixturePrediction {
        MixturePrediction {
            means: tape.value(self.means).clone(),
            scales: tape.value(self.scales).clone(),
            logits: tape.value(self.logits).clone(),
        }
    }

    pub fn dims(&self, tape: &Tape) -> Result<MixtureDims, DistError> {
        dims_of(
            tape.shape(self.means),
            tape.shape(self.scales),
            tape.shape(self.logits),
        )
    }

    fn check_scales(&self, tape: &Tape) -> Result<(), DistError> {
        if tape.value(self.scales).data().iter().any(|&s| s <= 0.0) {
            return Err(DistError::NonPositiveScale);
        }
        Ok(())
    }
}

fn dims_of(means: &[usize], scales: &[usize], logits: &[usize]) -> Result<MixtureDims, DistError> {
    if means.len() != 5 || means[4] != 2 {
        return Err(DistError::Shape(format!("means must be [B,N,T,K,2], got {means:?}")));
    }
    if scales != means {
        return Err(DistError::Shape(format!("scales {scales:?} differ from means {means:?}")));
    }
    if logits != [means[0], means[1], means[3]] {
        return Err(DistError::Shape(format!(
            "logits {logits:?} inconsistent with means {means:?}"
        )));
    }
    Ok(MixtureDims {
        batch: means[0],
        agents: means[1],
        horizon: means[2],
        modes: means[3],
    })
}

/// Mean over agents and timesteps of the mixture negative log-likelihood of `gt`.
pub fn nll(tape: &mut Tape, pred: &MixtureVars, gt: &Tensor) -> Result<Var, DistError> {
    let d = pred.dims(tape)?;
    pred.check_scales(tape)?;
    if gt.shape() != [d.batch, d.agents, d.horizon, 2] {
        return Err(DistError::Shape(format!(
            "ground truth {:?} does not match [B,N,T,2] = [{}, {}, {}, 2]",
            gt.shape(),
            d.batch,
            d.agents,
            d.horizon
        )));
    }
    let y = tape.constant(gt.reshape(&[d.batch, d.agents, d.horizon, 1, 2])?)?;
    let diff = tape.sub(y, pred.means)?;
    let z = tape.div(diff, pred.scales)?;
    let z2 = tape.mul(z, z)?;
    let quad = tape.scale(z2, -0.5)?;
    let log_sigma = tape.log(pred.scales)?;
    let per_dim = tape.sub(quad, log_sigma)?;
    let per_dim = tape.add_scalar(per_dim, -HALF_LN_2PI)?;
    let log_pdf = tape.sum(per_dim, Some(4))?; // [B,N,T,K]
    let log_w = tape.log_softmax(pred.logits, 2)?;
    let log_w = tape.reshape(log_w, &[d.batch, d.agents, 1, d.modes])?;
    let joint = tape.add(log_pdf, log_w)?;
    let log_lik = tape.logsumexp(joint, 3)?; // [B,N,T]
    let mean = tape.mean(log_lik, None)?;
    Ok(tape.neg(mean)?)
}

/// Closed-form distillation loss from `teacher` to `student`.
///
/// Sum of the mean index-matched per-mode Gaussian KL (over agents, timesteps
/// and modes, coordinates summed) and the mean categorical KL between mode
/// weights (over agents). With `detach_teacher`, no gradient reaches the
/// teacher's parameters.
pub fn kl_distill(
    tape: &mut Tape,
    teacher: &MixtureVars,
    student: &MixtureVars,
    detach_teacher: bool,
) -> Result<Var, DistError> {
    let dt = teacher.dims(tape)?;
    let ds = student.dims(tape)?;
    if dt != ds {
        return Err(DistError::Shape(format!("teacher {dt:?} vs student {ds:?}")));
    }
    teacher.check_scales(tape)?;
    student.check_scales(tape)?;
    let t = if detach_teacher {
        MixtureVars {
            means: tape.detach(teacher.means),
            scales: tape.detach(teacher.scales),
            logits: tape.detach(teacher.logits),
        }
    } else {
        *teacher
    };
    let s = student;

    // ln(s_s / s_t) + (s_t^2 + (m_t - m_s)^2) / (2 s_s^2) - 1/2, per coordinate
    let log_ratio = {
        let ls = tape.log(s.scales)?;
        let lt = tape.log(t.scales)?;
        tape.sub(ls, lt)?
    };
    let var_t = tape.mul(t.scales, t.scales)?;
    let var_s = tape.mul(s.scales, s.scales)?;
    let dm = tape.sub(t.means, s.means)?;
    let dm2 = tape.mul(dm, dm)?;
    let num = tape.add(var_t, dm2)?;
    let den = tape.scale(var_s, 2.0)?;
    let frac = tape.div(num, den)?;
    let per_dim = tape.add(log_ratio, frac)?;
    let per_dim = tape.add_scalar(per_dim, -0.5)?;
    let per_mode = tape.sum(per_dim, Some(4))?;
    let gauss = tape.mean(per_mode, None)?;

    let lpt = tape.log_softmax(t.logits, 2)?;
    let lps = tape.log_softmax(s.logits, 2)?;
    let pt = tape.softmax(t.logits, 2)?;
    let lr = tape.sub(lpt, lps)?;
    let terms = tape.mul(pt, lr)?;
    let per_agent = tape.sum(terms, Some(2))?;
    let cat = tape.mean(per_agent, None)?;

    Ok(tape.add(gauss, cat)?)
}

/// How best-of-K candidate trajectories are drawn from a mixture.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SampleMode {
    /// Per-mode mean trajectories, highest weight first.
    ModeMeans,
    /// Mode index from the weights, then Gaussian noise per step.
    Stochastic,
}

impl std::str::FromStr for SampleMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "mode-means" => Ok(SampleMode::ModeMeans),
            "stochastic" => Ok(SampleMode::Stochastic),
            other => Err(format!("unknown sample mode `{other}`")),
        }
    }
}

/// Draws `k_eval` candidate futures per scene, shaped `[B, k_eval, N, T, 2]`.
pub fn draw_samples(
    pred: &MixturePrediction,
    k_eval: usize,
    mode: SampleMode,
    seed: u64,
) -> Result<Tensor, DistError> {
    let d = pred.dims()?;
    if mode == SampleMode::ModeMeans && k_eval > d.modes {
        return Err(DistError::TooManySamples {
            requested: k_eval,
            modes: d.modes,
        });
    }
    let weights = pred.weights();
    let (w, mu, sd) = (weights.data(), pred.means.data(), pred.scales.data());
    let (n, t, k) = (d.agents, d.horizon, d.modes);
    let mut out = vec![0.0; d.batch * k_eval * n * t * 2];
    let at = |b: usize, a: usize, s: usize, m: usize, c: usize| (((b * n + a) * t + s) * k + m) * 2 + c;
    let dst = |b: usize, e: usize, a: usize, s: usize, c: usize| (((b * k_eval + e) * n + a) * t + s) * 2 + c;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for b in 0..d.batch {
        for a in 0..n {
            let wrow = &w[(b * n + a) * k..(b * n + a + 1) * k];
            match mode {
                SampleMode::ModeMeans => {
                    let mut order: Vec<usize> = (0..k).collect();
                    order.sort_by(|&i, &j| wrow[j].total_cmp(&wrow[i]));
                    for (e, &m) in order.iter().take(k_eval).enumerate() {
                        for s in 0..t {
                            for c in 0..2 {
                                out[dst(b, e, a, s, c)] = mu[at(b, a, s, m, c)];
                            }
                        }
                    }
                }
                SampleMode::Stochastic => {
                    for e in 0..k_eval {
                        let u: f64 = rng.random();
                        let mut acc = 0.0;
                        let mut m = k - 1;
                        for (i, &wi) in wrow.iter().enumerate() {
                            acc += wi;
                            if u < acc {
                                m = i;
                                break;
                            }
                        }
                        for s in 0..t {
                            for c in 0..2 {
                                let z: f64 = StandardNormal.sample(&mut rng);
                                out[dst(b, e, a, s, c)] = mu[at(b, a, s, m, c)] + sd[at(b, a, s, m, c)] * z;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::new(vec![d.batch, k_eval, n, t, 2], out)?)
}
