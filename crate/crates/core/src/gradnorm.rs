//! Adaptive loss weights by gradient normalisation.
//!
//! Each epoch the weighted gradient norm `beta_i * g_i` of every term is
//! pulled toward `G_bar * R_i / R_bar`, where `R_i = L_i(t) / L_i(0)` is the
//! term's inverse training rate. The weights take one sign step on
//! `sum_i |beta_i g_i - G_bar R_i / R_bar|` (the target held fixed), are
//! floored, and are rescaled so the active weights sum to their count.

use crate::autodiff::{Gradients, NodeId, Tape};
use crate::error::{Error, Result};

pub const DEFAULT_BETA_LR: f64 = 0.025;
pub const BETA_FLOOR: f64 = 1e-4;
pub const LOSS_GUARD: f64 = 1e-12;
/// Relative gap below which a term counts as on target.
const ON_TARGET: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct WeightState {
    beta: [f64; 3],
    active: [bool; 3],
    initial_losses: Option<[f64; 3]>,
    pub beta_lr: f64,
}

impl WeightState {
    /// All three terms active, `beta = (1, 1, 1)`.
    pub fn new(beta_lr: f64) -> Self {
        WeightState {
            beta: [1.0; 3],
            active: [true; 3],
            initial_losses: None,
            beta_lr,
        }
    }

    /// Starts from `beta`; zero entries mark disabled terms, which keep
    /// weight zero. Active weights are rescaled to sum to their count.
    pub fn with_initial(beta: [f64; 3], beta_lr: f64) -> Result<Self> {
        if beta.iter().any(|b| !(b.is_finite() && *b >= 0.0)) {
            return Err(Error::Config(format!("initial weights {beta:?} must be non-negative")));
        }
        let active = beta.map(|b| b > 0.0);
        if !active.iter().any(|&a| a) {
            return Err(Error::Config("at least one loss weight must be positive".into()));
        }
        let mut s = WeightState {
            beta,
            active,
            initial_losses: None,
            beta_lr,
        };
        s.renormalize();
        Ok(s)
    }

    pub fn beta(&self) -> [f64; 3] {
        self.beta
    }

    pub fn active(&self) -> [bool; 3] {
        self.active
    }

    pub fn initial_losses(&self) -> Option<[f64; 3]> {
        self.initial_losses
    }

    /// Stores `L_i(0)` the first time it is called.
    pub fn record_initial(&mut self, losses: [f64; 3]) {
        if self.initial_losses.is_none() {
            self.initial_losses = Some(losses);
        }
    }

    fn renormalize(&mut self) {
        let count = self.active.iter().filter(|&&a| a).count() as f64;
        for (b, &a) in self.beta.iter_mut().zip(&self.active) {
            *b = if a { b.max(BETA_FLOOR) } else { 0.0 };
        }
        let total: f64 = self.beta.iter().sum();
        for b in &mut self.beta {
            *b *= count / total;
        }
    }
}

/// Norms of the three term gradients with respect to the shared parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradNorms {
    /// `|d L_i / d W|`.
    pub raw: [f64; 3],
    /// `|d (beta_i L_i) / d W| = beta_i * raw_i`.
    pub weighted: [f64; 3],
}

/// One backward pass per term; the norm is taken jointly over all tensors
/// in `shared`.
pub fn grad_norms(tape: &Tape, shared: &[NodeId], losses: [NodeId; 3], beta: [f64; 3]) -> Result<GradNorms> {
    if shared.is_empty() || shared.iter().all(|&id| tape.value(id).is_empty()) {
        return Err(Error::Contract("gradient norms need at least one shared parameter".into()));
    }
    let grads = [
        tape.backward(losses[0])?,
        tape.backward(losses[1])?,
        tape.backward(losses[2])?,
    ];
    Ok(grad_norms_from(&grads, shared, beta))
}

/// [`grad_norms`] from gradients that are already computed, one set per
/// term.
pub fn grad_norms_from(grads: &[Gradients; 3], shared: &[NodeId], beta: [f64; 3]) -> GradNorms {
    let raw = [0, 1, 2].map(|k| {
        shared
            .iter()
            .filter_map(|&id| grads[k].get(id))
            .map(|t| t.data().iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    });
    GradNorms {
        raw,
        weighted: [0, 1, 2].map(|k| beta[k] * raw[k]),
    }
}

/// `L_i(t) / L_i(0)` with non-positive initial values raised to
/// [`LOSS_GUARD`].
pub fn loss_ratios(current: [f64; 3], initial: [f64; 3]) -> [f64; 3] {
    [0, 1, 2].map(|k| {
        let base = if initial[k] > 0.0 {
            initial[k]
        } else {
            log::warn!("initial loss {k} is {}; guarded", initial[k]);
            LOSS_GUARD
        };
        current[k] / base
    })
}

/// `sum_i |beta_i g_i - G_bar R_i / R_bar|` over active terms.
pub fn gradnorm_objective(beta: [f64; 3], raw: [f64; 3], ratios: [f64; 3], active: [bool; 3]) -> f64 {
    let targets = targets(beta, raw, ratios, active);
    (0..3)
        .filter(|&k| active[k])
        .map(|k| gap(beta[k] * raw[k], targets[k]).abs())
        .sum()
}

/// `weighted - target`, or zero within rounding of the target.
fn gap(weighted: f64, target: f64) -> f64 {
    let d = weighted - target;
    if d.abs() <= ON_TARGET * weighted.abs().max(target.abs()) {
        0.0
    } else {
        d
    }
}

fn targets(beta: [f64; 3], raw: [f64; 3], ratios: [f64; 3], active: [bool; 3]) -> [f64; 3] {
    let idx: Vec<usize> = (0..3).filter(|&k| active[k]).collect();
    let count = idx.len() as f64;
    let g_bar = idx.iter().map(|&k| beta[k] * raw[k]).sum::<f64>() / count;
    let r_bar = idx.iter().map(|&k| ratios[k]).sum::<f64>() / count;
    let r_bar = if r_bar > 0.0 { r_bar } else { LOSS_GUARD };
    [0, 1, 2].map(|k| g_bar * ratios[k] / r_bar)
}

/// One update of the weights from raw gradient norms and loss ratios.
pub fn gradnorm_step(state: &mut WeightState, raw: [f64; 3], ratios: [f64; 3]) -> [f64; 3] {
    let t = targets(state.beta, raw, ratios, state.active);
    for k in 0..3 {
        if !state.active[k] {
            continue;
        }
        let grad = gap(state.beta[k] * raw[k], t[k]).signum() * raw[k];
        if grad != 0.0 && grad.is_finite() {
            state.beta[k] -= state.beta_lr * grad.signum();
        }
    }
    state.renormalize();
    state.beta
}
