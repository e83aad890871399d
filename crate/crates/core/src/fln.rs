//! Three-branch training loss, length routing and parameter accounting.

use serde::{Deserialize, Serialize};

use crate::backbone::{BranchId, BranchLengths, FlnParams, ModelError, ModelKind, Switches};
use crate::data::{DeriveMode, ObservationBundle};
use crate::distributions::{kl_distill, nll, MixtureVars};
use crate::params::{Bound, ParamScope};
use crate::tensorgrad::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BranchConfig {
    pub lengths: BranchLengths,
    /// Weight of the distillation term.
    pub lambda: f64,
    /// Stop gradients flowing into the long branch through distillation.
    pub detach_teacher: bool,
    pub switches: Switches,
}

impl Default for BranchConfig {
    fn default() -> Self {
        BranchConfig {
            lengths: BranchLengths { short: 2, medium: 6, long: 8 },
            lambda: 1.0,
            detach_teacher: false,
            switches: Switches::default(),
        }
    }
}

impl BranchConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        self.lengths.validate()?;
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(ModelError::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub total: Var,
    pub l_reg: Var,
    /// Distillation term, or the direct short/medium likelihood when
    /// distillation does not apply.
    pub l_kl: Var,
}

/// Branch outputs indexed S, M, L.
pub type BranchOutputs = [MixtureVars; 3];

/// Runs all three branches on `bundle` and combines
/// `nll(long) + lambda * (KL(long || medium) + KL(long || short))`.
///
/// With distillation disabled, or for sliding-window bundles that lack a
/// shared future, the second term is the likelihood of the medium and short
/// predictions on their own futures.
pub fn fln_loss(
    tape: &mut Tape,
    params: &FlnParams,
    bound: &Bound,
    bundle: &ObservationBundle,
    cfg: &BranchConfig,
) -> Result<(LossParts, BranchOutputs), ModelError> {
    cfg.validate()?;
    match params.kind {
        ModelKind::Flexi { lengths, .. } if lengths == cfg.lengths => {}
        ModelKind::Flexi { lengths, .. } => {
            return Err(ModelError::Config(format!(
                "model lengths {lengths:?} differ from loss lengths {:?}",
                cfg.lengths
            )))
        }
        ModelKind::Single { .. } => return Err(ModelError::Config("fln_loss needs a three-branch model".into())),
    }
    let long = params.forward(tape, bound, bundle.input(BranchId::L), BranchId::L)?;
    let medium = params.forward(tape, bound, bundle.input(BranchId::M), BranchId::M)?;
    let short = params.forward(tape, bound, bundle.input(BranchId::S), BranchId::S)?;

    let l_reg = nll(tape, &long, bundle.future(BranchId::L))?;
    let distill = cfg.switches.temporal_distillation && bundle.mode == DeriveMode::Truncation;
    let l_kl = if distill {
        let km = kl_distill(tape, &long, &medium, cfg.detach_teacher)?;
        let ks = kl_distill(tape, &long, &short, cfg.detach_teacher)?;
        tape.add(km, ks)?
    } else {
        let nm = nll(tape, &medium, bundle.future(BranchId::M))?;
        let ns = nll(tape, &short, bundle.future(BranchId::S))?;
        tape.add(nm, ns)?
    };
    let weighted = tape.scale(l_kl, cfg.lambda)?;
    let total = tape.add(l_reg, weighted)?;
    Ok((LossParts { total, l_reg, l_kl }, [short, medium, long]))
}

/// Branch whose length is nearest `observed`; ties go to the longer branch.
pub fn route(observed: usize, lengths: &BranchLengths) -> Result<BranchId, ModelError> {
    if observed < lengths.short {
        return Err(ModelError::RouteTooShort {
            observed,
            shortest: lengths.short,
        });
    }
    let mut best = BranchId::S;
    for b in BranchId::ALL {
        if observed.abs_diff(lengths.get(b)) <= observed.abs_diff(lengths.get(best)) {
            best = b;
        }
    }
    Ok(best)
}

/// The most recent `len` steps of observations `[B, N, H, 2]`.
pub fn keep_recent(obs: &Tensor, len: usize) -> Result<Tensor, ModelError> {
    let s = obs.shape();
    if s.len() != 4 || s[3] != 2 {
        return Err(ModelError::Observation(s.to_vec()));
    }
    let h = s[2];
    if len >= h {
        return Ok(obs.clone());
    }
    let data = obs
        .data()
        .chunks(h * 2)
        .flat_map(|row| row[(h - len) * 2..].iter().copied())
        .collect();
    Ok(Tensor::new(vec![s[0], s[1], len, 2], data)?)
}

#[derive(Debug, Clone, Copy)]
pub struct Routed {
    pub branch: BranchId,
    /// Steps actually fed to the branch.
    pub used_len: usize,
    pub pred: MixtureVars,
}

/// Predicts from observations of any supported length.
///
/// Three-branch models route to the nearest branch; single models always use
/// their one branch. Inputs longer than the branch keep their most recent
/// steps, shorter ones run at their own length.
pub fn predict(tape: &mut Tape, params: &FlnParams, bound: &Bound, obs: &Tensor) -> Result<Routed, ModelError> {
    let s = obs.shape();
    if s.len() != 4 || s[2] == 0 {
        return Err(ModelError::Observation(s.to_vec()));
    }
    let h = s[2];
    let branch = match params.kind {
        ModelKind::Flexi { lengths, .. } => route(h, &lengths)?,
        ModelKind::Single { .. } => BranchId::L,
    };
    let len = params.branch_len(branch)?;
    let input = keep_recent(obs, len)?;
    let pred = params.forward_open(tape, bound, &input, branch, None)?;
    Ok(Routed {
        branch,
        used_len: h.min(len),
        pred,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamCount {
    pub shared: usize,
    /// Branch-owned parameters, indexed S, M, L.
    pub per_branch: [usize; 3],
    pub total: usize,
    /// Parameters a single-length model of the same backbone would hold.
    pub single_branch_total: usize,
    pub overhead: f64,
}

pub fn count_parameters(params: &FlnParams) -> ParamCount {
    let mut shared = 0;
    let mut per_branch = [0; 3];
    for e in params.store.entries() {
        match e.scope {
            ParamScope::Shared => shared += e.value.numel(),
            ParamScope::Branch(b) => per_branch[b as usize] += e.value.numel(),
        }
    }
    let total = shared + per_branch.iter().sum::<usize>();
    let single_branch_total = shared + per_branch[BranchId::L as usize];
    ParamCount {
        shared,
        per_branch,
        total,
        single_branch_total,
        overhead: overhead_fraction(single_branch_total as f64, total as f64),
    }
}

/// Relative growth from a single-model parameter count to a multi-branch one.
pub fn overhead_fraction(single_total: f64, multi_total: f64) -> f64 {
    (multi_total - single_total) / single_total
}
