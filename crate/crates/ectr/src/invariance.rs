//! Scale-probe stationarity: per-sample probe derivatives, per-environment
//! aggregates on the weighted risks, the TV penalties, and the
//! softplus-parameterized invariance dual.
//!
//! The probe is a scalar `w` multiplying all logits, fixed at 1. For a
//! sample with logits `f` and loss `l(z, y)`,
//! `d = d l(w f, y) / d w |_{w=1} = <f, grad_z l>`, and
//! `d d / d f = grad_z l + H_z l . f`, which is why the loss API exposes a
//! Hessian-vector product instead of a full Hessian.

use crate::error::{Error, Result};
use crate::numerics::{loss_value_grad_hvp, sigmoid, softplus, DenseMatrix, LossSpec};
use crate::weighting::{env_weighted_sum, WeightState};

/// Per-sample probe derivatives for one batch.
#[derive(Debug, Clone)]
pub struct ProbeRecord {
    /// `d_i = <f_i, grad_z l_i>`.
    pub d: Vec<f64>,
    /// `d d_i / d f_i`, shape N x K.
    pub dgrad_f: DenseMatrix,
    /// Loss values `l_i` (shared by the risk terms).
    pub losses: Vec<f64>,
    /// Loss gradients `grad_z l_i`, shape N x K.
    pub loss_grad: DenseMatrix,
}

/// Probe derivatives for a whole batch of logits.
pub fn probe_batch(spec: LossSpec, logits: &DenseMatrix, labels: &[f64]) -> Result<ProbeRecord> {
    let n = logits.rows();
    if labels.len() != n {
        return Err(Error::shape(format!("{} labels for {} logit rows", labels.len(), n)));
    }
    if !logits.all_finite() {
        return Err(Error::numeric("phi", "non-finite logits"));
    }
    let k = logits.cols();
    let mut d = vec![0.0; n];
    let mut dgrad_f = DenseMatrix::zeros(n, k);
    let mut losses = vec![0.0; n];
    let mut loss_grad = DenseMatrix::zeros(n, k);
    for i in 0..n {
        let f = logits.row(i);
        let (value, grad, hvp) = loss_value_grad_hvp(spec, f, labels[i], f)?;
        losses[i] = value;
        d[i] = f.iter().zip(&grad).map(|(fi, gi)| fi * gi).sum();
        for j in 0..k {
            dgrad_f.set(i, j, grad[j] + hvp[j]);
            loss_grad.set(i, j, grad[j]);
        }
    }
    Ok(ProbeRecord {
        d,
        dgrad_f,
        losses,
        loss_grad,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TvVariant {
    L1,
    L2,
}

/// Environment-averaged stationarity penalty on the weighted risks.
#[derive(Debug, Clone)]
pub struct TvPenalty {
    pub variant: TvVariant,
    /// `g_e = sum_i pi(i|e) d_i`; zero for degenerate environments.
    pub per_env_g: Vec<f64>,
    /// Environments included in the average.
    pub used_envs: usize,
    /// `(1/E) sum_e |g_e|` or `(1/E) sum_e g_e^2`.
    pub value: f64,
}

/// Computes `g_e` per used environment and the penalty value.
pub fn tv_penalty(state: &WeightState, probes: &ProbeRecord, variant: TvVariant) -> Result<TvPenalty> {
    let n_envs = state.n_envs();
    if n_envs == 0 {
        return Err(Error::input("no environments"));
    }
    if probes.d.len() != state.pi_global.len() {
        return Err(Error::shape("probe record does not match weight state"));
    }
    let mut per_env_g = vec![0.0; n_envs];
    let mut acc = 0.0;
    let mut used = 0usize;
    for e in 0..n_envs {
        if !state.is_used(e) {
            continue;
        }
        used += 1;
        let g = env_weighted_sum(state, e, &probes.d);
        per_env_g[e] = g;
        acc += match variant {
            TvVariant::L1 => g.abs(),
            TvVariant::L2 => g * g,
        };
    }
    if used == 0 {
        return Err(Error::input("every environment is degenerate in this batch"));
    }
    Ok(TvPenalty {
        variant,
        per_env_g,
        used_envs: used,
        value: acc / used as f64,
    })
}

/// Per-environment outer derivative of the penalty in `g_e`:
/// `sign(g_e)` for l1 (with `sign(0) = 0`), `2 g_e` for l2.
pub fn tv_outer_weight(variant: TvVariant, g: f64) -> f64 {
    match variant {
        TvVariant::L1 => {
            if g > 0.0 {
                1.0
            } else if g < 0.0 {
                -1.0
            } else {
                0.0
            }
        }
        TvVariant::L2 => 2.0 * g,
    }
}

/// Upstream logit gradients of the TV penalty with the weights held fixed:
/// `u_i = (1/E) sum_e w_e pi(i|e) dgrad_f(i)` where `w_e` is
/// [`tv_outer_weight`]. This is the analytic expansion that replaces nested
/// differentiation of the probe.
pub fn tv_grad_wrt_logits(
    state: &WeightState,
    probes: &ProbeRecord,
    penalty: &TvPenalty,
) -> DenseMatrix {
    let n = probes.d.len();
    let k = probes.dgrad_f.cols();
    let mut upstream = DenseMatrix::zeros(n, k);
    let inv_e = 1.0 / penalty.used_envs as f64;
    for e in 0..state.n_envs() {
        if !state.is_used(e) {
            continue;
        }
        let w = tv_outer_weight(penalty.variant, penalty.per_env_g[e]) * inv_e;
        if w == 0.0 {
            continue;
        }
        for i in 0..n {
            let c = state.pi_cond.get(i, e);
            if c == 0.0 {
                continue;
            }
            for j in 0..k {
                upstream.set(i, j, upstream.get(i, j) + w * c * probes.dgrad_f.get(i, j));
            }
        }
    }
    upstream
}

/// The invariance dual `lambda = softplus(psi)`.
#[derive(Debug, Clone, Copy)]
pub struct InvarianceDual {
    pub psi: f64,
}

impl InvarianceDual {
    pub fn new(psi: f64) -> Self {
        InvarianceDual { psi }
    }

    pub fn lambda(&self) -> f64 {
        lambda_of(self.psi)
    }

    /// `d lambda / d psi = sigmoid(psi)`; the ascent direction on psi is
    /// this times the TV penalty value.
    pub fn lambda_grad(&self) -> f64 {
        sigmoid(self.psi)
    }
}

/// Overflow-safe softplus, `ln(1 + e^psi)`.
pub fn lambda_of(psi: f64) -> f64 {
    softplus(psi)
}
