//! The minimax trainers: the outer objective
//! `R_main + lambda * P_TV - beta * KL_env`, one alternating-update
//! iteration over the players, the full training loop, baselines, and test
//! evaluation.
//!
//! Update semantics within one iteration are simultaneous: every player's
//! gradient is taken at the pre-update state, then the predictor descends
//! while the tail adversary and the invariance dual ascend. Under inferred
//! environments each iteration is followed by `k_inner` ascent steps of the
//! inference adversary on the TV penalty alone.

use serde::Serialize;

use crate::data::{Batch, Dataset};
use crate::envinfer::{infer_assignments, inner_step, EnvInferenceNet, InnerState};
use crate::error::{Error, Result};
use crate::invariance::{
    probe_batch, tv_grad_wrt_logits, tv_outer_weight, tv_penalty, InvarianceDual, ProbeRecord,
    TvPenalty, TvVariant,
};
use crate::logging;
use crate::numerics::{
    backprop, forward, Activation, DenseMatrix, Direction, LossSpec, OptimKind, Optimizer,
    PredictorParams, Rng,
};
use crate::weighting::{
    add_score_grad, condition_on_envs, global_softmax, kl_env_per_env, EnvAssignment, ScoreInputs,
    TailAdversary, WeightState, DEFAULT_EPSILON,
};

/// Training methods: the full game in known- and inferred-environment form,
/// plus the baselines it is compared against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Erm,
    Irmv1,
    GroupDro,
    IrmTvL1,
    OodTvIrmL1,
    EctrKnown,
    EctrInferred,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Erm,
        Method::Irmv1,
        Method::GroupDro,
        Method::IrmTvL1,
        Method::OodTvIrmL1,
        Method::EctrKnown,
        Method::EctrInferred,
    ];

    pub fn parse(s: &str) -> Result<Method> {
        for m in Method::ALL {
            if m.name() == s {
                return Ok(m);
            }
        }
        let valid: Vec<&str> = Method::ALL.iter().map(|m| m.name()).collect();
        Err(Error::config(format!(
            "unknown method '{s}'; valid methods: {}",
            valid.join(", ")
        )))
    }

    pub fn name(&self) -> &'static str {
        match self {
            Method::Erm => "erm",
            Method::Irmv1 => "irmv1",
            Method::GroupDro => "group_dro",
            Method::IrmTvL1 => "irm_tv_l1",
            Method::OodTvIrmL1 => "ood_tv_irm_l1",
            Method::EctrKnown => "ectr_known",
            Method::EctrInferred => "ectr_inferred",
        }
    }

    /// Methods whose objective uses the observed environment partition.
    pub fn needs_env_ids(&self) -> bool {
        matches!(
            self,
            Method::Irmv1
                | Method::GroupDro
                | Method::IrmTvL1
                | Method::OodTvIrmL1
                | Method::EctrKnown
        )
    }

    fn has_tail_adversary(&self) -> bool {
        matches!(self, Method::EctrKnown | Method::EctrInferred)
    }

    fn has_dual(&self) -> bool {
        matches!(self, Method::OodTvIrmL1 | Method::EctrKnown | Method::EctrInferred)
    }
}

/// Per-player step sizes.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct StepSizes {
    pub phi: f64,
    pub theta: f64,
    pub psi: f64,
    pub eta: f64,
}

impl Default for StepSizes {
    fn default() -> Self {
        StepSizes {
            phi: 0.01,
            theta: 0.1,
            psi: 0.05,
            eta: 0.1,
        }
    }
}

/// Full trainer configuration. Defaults follow the desk-scale setup: adam
/// for the predictor, plain sgd for the adversaries, `psi = 0` at start.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub method: Method,
    pub loss: LossSpec,
    /// KL stabilizer coefficient.
    pub beta: f64,
    /// IRMv1 squared-penalty weight.
    pub gamma: f64,
    /// Fixed TV multiplier for the non-dual TV baseline.
    pub lambda_fixed: f64,
    pub tv_variant: TvVariant,
    pub epochs: usize,
    pub batch_size: usize,
    pub step_sizes: StepSizes,
    /// Inference ascent steps per outer iteration.
    pub k_inner: usize,
    pub seed: u64,
    /// Predictor hidden widths; empty for a linear model.
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub out_dim: usize,
    /// Score network hidden widths.
    pub score_hidden: Vec<usize>,
    pub tail_inputs: ScoreInputs,
    /// Analysis mode: one free score per training sample (full batch only).
    pub free_scores: bool,
    /// Latent environment count for inference.
    pub n_latent_envs: usize,
    pub infer_hidden: Vec<usize>,
    pub temperature: f64,
    pub psi_init: f64,
    pub epsilon: f64,
    /// Exponentiated-gradient step for group DRO.
    pub group_dro_step: f64,
    pub phi_optimizer: OptimKind,
    /// Reduction-check hook: inferred mode runs with the true hard
    /// assignments injected and the inference adversary frozen.
    pub freeze_assignments_to_truth: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            method: Method::Erm,
            loss: LossSpec::BceWithLogit,
            beta: 0.5,
            gamma: 1.0,
            lambda_fixed: 1.0,
            tv_variant: TvVariant::L1,
            epochs: 500,
            batch_size: 128,
            step_sizes: StepSizes::default(),
            k_inner: 1,
            seed: 0,
            hidden: vec![8],
            activation: Activation::Tanh,
            out_dim: 1,
            score_hidden: vec![8],
            tail_inputs: ScoreInputs::Features,
            free_scores: false,
            n_latent_envs: 2,
            infer_hidden: vec![8],
            temperature: 1.0,
            psi_init: 0.0,
            epsilon: DEFAULT_EPSILON,
            group_dro_step: 0.01,
            phi_optimizer: OptimKind::adam_default(),
            freeze_assignments_to_truth: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beta < 0.0 {
            return Err(Error::config("beta must be nonnegative"));
        }
        if self.gamma < 0.0 {
            return Err(Error::config("gamma must be nonnegative"));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("epochs and batch_size must be positive"));
        }
        if self.method == Method::EctrInferred && self.n_latent_envs < 2 {
            return Err(Error::config("inferred environments require n_latent_envs >= 2"));
        }
        if self.out_dim == 0 {
            return Err(Error::config("out_dim must be positive"));
        }
        Ok(())
    }
}

/// One evaluation of the outer objective, exactly as composed.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct OuterLossBreakdown {
    pub r_main: f64,
    pub p_tv: f64,
    pub kl_env: f64,
    pub lambda: f64,
    pub total: f64,
}

/// All trainable state of the game.
#[derive(Debug, Clone)]
pub struct Players {
    pub predictor: PredictorParams,
    pub tail: TailAdversary,
    pub dual: InvarianceDual,
    pub inference: Option<EnvInferenceNet>,
    /// Group-DRO environment weights.
    pub group_weights: Option<Vec<f64>>,
}

/// A step size of zero freezes the player (no update at all).
pub struct PlayerOptimizers {
    pub phi: Option<Optimizer>,
    pub theta: Option<Optimizer>,
    pub psi: Option<Optimizer>,
    pub eta: Option<Optimizer>,
}

fn maybe_optimizer(kind: OptimKind, lr: f64) -> Result<Option<Optimizer>> {
    if lr == 0.0 {
        Ok(None)
    } else {
        Optimizer::new(kind, lr).map(Some)
    }
}

impl PlayerOptimizers {
    pub fn from_config(cfg: &TrainConfig) -> Result<Self> {
        Ok(PlayerOptimizers {
            phi: maybe_optimizer(cfg.phi_optimizer, cfg.step_sizes.phi)?,
            theta: maybe_optimizer(OptimKind::Sgd, cfg.step_sizes.theta)?,
            psi: maybe_optimizer(OptimKind::Sgd, cfg.step_sizes.psi)?,
            eta: maybe_optimizer(OptimKind::Sgd, cfg.step_sizes.eta)?,
        })
    }
}

/// Everything computed from one batch at the pre-update state.
#[derive(Debug)]
pub struct BatchState {
    pub logits: DenseMatrix,
    pub cache: crate::numerics::ForwardCache,
    pub probes: ProbeRecord,
    pub scores: Vec<f64>,
    pub score_input: DenseMatrix,
    pub score_cache: Option<crate::numerics::ForwardCache>,
    pub assign: EnvAssignment,
    pub wstate: WeightState,
    pub r_envs: Vec<f64>,
    pub penalty: TvPenalty,
    pub kl_per_env: Vec<f64>,
    pub breakdown: OuterLossBreakdown,
}

/// Weighted per-environment risks and their environment mean.
pub fn tail_risks(state: &WeightState, losses: &[f64]) -> (Vec<f64>, f64) {
    let mut r_envs = vec![0.0; state.n_envs()];
    let mut acc = 0.0;
    let mut used = 0usize;
    for (e, r) in r_envs.iter_mut().enumerate() {
        if !state.is_used(e) {
            continue;
        }
        *r = crate::weighting::env_weighted_sum(state, e, losses);
        acc += *r;
        used += 1;
    }
    let r_main = if used > 0 { acc / used as f64 } else { 0.0 };
    (r_envs, r_main)
}

fn batch_assignment(players: &Players, batch: &Batch, cfg: &TrainConfig) -> Result<EnvAssignment> {
    match cfg.method {
        Method::Erm => Ok(EnvAssignment::single(batch.len())),
        Method::EctrInferred if !cfg.freeze_assignments_to_truth => {
            let net = players
                .inference
                .as_ref()
                .ok_or_else(|| Error::config("inferred method without an inference net"))?;
            infer_assignments(net, &inference_input(batch))
        }
        Method::EctrInferred => {
            // Frozen at the truth: one-hot soft assignments stand in for the
            // inference output, exercising the same downstream path.
            let ids = batch.env_ids.as_ref().ok_or_else(|| {
                Error::config("freeze_assignments_to_truth needs environment ids".to_string())
            })?;
            let n_envs = ids.iter().copied().max().map_or(1, |m| m + 1);
            let mut m = DenseMatrix::zeros(ids.len(), n_envs);
            for (i, &g) in ids.iter().enumerate() {
                m.set(i, g, 1.0);
            }
            EnvAssignment::soft(m)
        }
        _ => {
            let ids = batch.env_ids.as_ref().ok_or_else(|| {
                Error::config(format!(
                    "method {} requires environment ids",
                    cfg.method.name()
                ))
            })?;
            let n_envs = ids.iter().copied().max().map_or(1, |m| m + 1);
            EnvAssignment::hard(ids.clone(), n_envs)
        }
    }
}

/// Auxiliary variables when present, else the features.
fn inference_input(batch: &Batch) -> DenseMatrix {
    batch.aux.clone().unwrap_or_else(|| batch.features.clone())
}

fn score_input(batch: &Batch, losses: &[f64], inputs: ScoreInputs) -> DenseMatrix {
    match inputs {
        ScoreInputs::Features => batch.features.clone(),
        ScoreInputs::FeaturesPlusDetachedLoss => {
            let n = batch.len();
            let d = batch.features.cols();
            let mut m = DenseMatrix::zeros(n, d + 1);
            for i in 0..n {
                m.row_mut(i)[..d].copy_from_slice(batch.features.row(i));
                m.set(i, d, losses[i]);
            }
            m
        }
    }
}

/// Evaluates the full outer state on one batch at the current parameters.
pub fn compute_batch_state(players: &Players, batch: &Batch, cfg: &TrainConfig) -> Result<BatchState> {
    if batch.is_empty() {
        return Err(Error::input("empty batch"));
    }
    let (logits, cache) = forward(&players.predictor, &batch.features)?;
    let probes = probe_batch(cfg.loss, &logits, &batch.labels)?;

    let (scores, score_input, score_cache) = if cfg.method.has_tail_adversary() {
        let input = score_input(batch, &probes.losses, players.tail.score_inputs());
        let (s, c) = players.tail.scores(&input)?;
        (s, input, c)
    } else {
        // Uniform global weights for every baseline.
        (vec![0.0; batch.len()], batch.features.clone(), None)
    };
    let pi = global_softmax(&scores)?;
    let assign = batch_assignment(players, batch, cfg)?;
    let wstate = condition_on_envs(&pi, &assign, cfg.epsilon)?;
    let (r_envs, r_main_mean) = tail_risks(&wstate, &probes.losses);

    let variant = if cfg.method == Method::Irmv1 { TvVariant::L2 } else { cfg.tv_variant };
    let penalty = tv_penalty(&wstate, &probes, variant)?;

    let (kl_per_env, kl_value) = if cfg.method.has_tail_adversary() && cfg.beta != 0.0 {
        let per_env = kl_env_per_env(&wstate, &assign)?;
        let used = wstate.used_envs().max(1) as f64;
        let v = per_env.iter().sum::<f64>() / used;
        (per_env, v)
    } else {
        (vec![0.0; wstate.n_envs()], 0.0)
    };

    let lambda = match cfg.method {
        Method::Erm | Method::GroupDro => 0.0,
        Method::Irmv1 => cfg.gamma,
        Method::IrmTvL1 => cfg.lambda_fixed,
        Method::OodTvIrmL1 | Method::EctrKnown | Method::EctrInferred => players.dual.lambda(),
    };

    let r_main = if cfg.method == Method::GroupDro {
        let q = players
            .group_weights
            .as_ref()
            .ok_or_else(|| Error::config("group DRO without group weights"))?;
        if q.len() != r_envs.len() {
            return Err(Error::shape(format!(
                "{} group weights for {} environments",
                q.len(),
                r_envs.len()
            )));
        }
        q.iter().zip(&r_envs).map(|(qe, re)| qe * re).sum()
    } else {
        r_main_mean
    };

    let beta = if cfg.method.has_tail_adversary() { cfg.beta } else { 0.0 };
    let total = r_main + lambda * penalty.value - beta * kl_value;
    if !total.is_finite() {
        return Err(Error::numeric(
            "outer",
            format!(
                "non-finite outer loss: r_main={r_main} p_tv={} kl={kl_value} lambda={lambda}",
                penalty.value
            ),
        ));
    }
    let breakdown = OuterLossBreakdown {
        r_main,
        p_tv: penalty.value,
        kl_env: kl_value,
        lambda,
        total,
    };
    Ok(BatchState {
        logits,
        cache,
        probes,
        scores,
        score_input,
        score_cache,
        assign,
        wstate,
        r_envs,
        penalty,
        kl_per_env,
        breakdown,
    })
}

/// Gradient of the outer objective with respect to the predictor, as the
/// upstream matrix over logits. The score-network loss input is detached,
/// so no path flows from the losses through the scores.
pub(crate) fn phi_upstream(state: &BatchState, players: &Players, cfg: &TrainConfig) -> DenseMatrix {
    let n = state.logits.rows();
    let k = state.logits.cols();
    let used = state.penalty.used_envs.max(1) as f64;
    let mut upstream = DenseMatrix::zeros(n, k);

    // Risk term: per-sample coefficient sum_e w_e pi(i|e), with w_e = 1/E for
    // environment means and w_e = q_e for group DRO.
    for i in 0..n {
        let mut coeff = 0.0;
        for e in 0..state.wstate.n_envs() {
            if !state.wstate.is_used(e) {
                continue;
            }
            let w = match (&players.group_weights, cfg.method) {
                (Some(q), Method::GroupDro) => q[e],
                _ => 1.0 / used,
            };
            coeff += w * state.wstate.pi_cond.get(i, e);
        }
        for j in 0..k {
            upstream.set(i, j, coeff * state.probes.loss_grad.get(i, j));
        }
    }

    // TV term, scaled by the current multiplier.
    let lambda = state.breakdown.lambda;
    if lambda != 0.0 {
        let tv_up = tv_grad_wrt_logits(&state.wstate, &state.probes, &state.penalty);
        for i in 0..n {
            for j in 0..k {
                upstream.set(i, j, upstream.get(i, j) + lambda * tv_up.get(i, j));
            }
        }
    }
    upstream
}

/// Gradient of the outer objective with respect to the tail scores:
/// risk, TV, and KL terms all flow through the conditional weights.
pub(crate) fn theta_score_grad(state: &BatchState, cfg: &TrainConfig) -> Vec<f64> {
    let n = state.scores.len();
    let used = state.penalty.used_envs.max(1) as f64;
    let mut grad = vec![0.0; n];
    let lambda = state.breakdown.lambda;
    for e in 0..state.wstate.n_envs() {
        if !state.wstate.is_used(e) {
            continue;
        }
        // d R_main / d s.
        add_score_grad(&mut grad, &state.wstate, e, &state.probes.losses, state.r_envs[e], 1.0 / used);
        // d (lambda P_TV) / d s.
        let w = tv_outer_weight(state.penalty.variant, state.penalty.per_env_g[e]);
        if lambda != 0.0 && w != 0.0 {
            add_score_grad(
                &mut grad,
                &state.wstate,
                e,
                &state.probes.d,
                state.penalty.per_env_g[e],
                lambda * w / used,
            );
        }
        // -beta d KL / d s, via sum_i c (ln(c/U) - KL_e).
        if cfg.beta != 0.0 {
            let base = match state.assign.uniform_base(e) {
                Ok(b) => b,
                Err(_) => continue,
            };
            let ln_ratio: Vec<f64> = (0..n)
                .map(|i| {
                    let c = state.wstate.pi_cond.get(i, e);
                    if c > 0.0 && base[i] > 0.0 {
                        (c / base[i]).ln()
                    } else {
                        0.0
                    }
                })
                .collect();
            add_score_grad(
                &mut grad,
                &state.wstate,
                e,
                &ln_ratio,
                state.kl_per_env[e],
                -cfg.beta / used,
            );
        }
    }
    grad
}

/// Outcome of one outer iteration.
pub struct StepOutcome {
    pub breakdown: OuterLossBreakdown,
    /// Environments that were degenerate in this batch.
    pub degenerate_envs: Vec<usize>,
}

/// One simultaneous iteration: every gradient is computed at the pre-update
/// state, then theta and psi ascend and phi descends. The inference
/// adversary is untouched here; `train` interleaves its inner steps.
pub fn outer_step(
    players: &mut Players,
    opts: &mut PlayerOptimizers,
    batch: &Batch,
    cfg: &TrainConfig,
) -> Result<StepOutcome> {
    let state = compute_batch_state(players, batch, cfg)?;

    // Phi gradient.
    let upstream = phi_upstream(&state, players, cfg);
    let phi_grads = backprop(&players.predictor, &state.cache, &upstream)?;

    // Theta gradient (scores, then through the score network if present).
    let theta_grads = if cfg.method.has_tail_adversary() {
        let gs = theta_score_grad(&state, cfg);
        match &players.tail {
            TailAdversary::FreeScores { .. } => Some((None, gs)),
            TailAdversary::ScoreNetwork { net, .. } => {
                let mut up = DenseMatrix::zeros(gs.len(), 1);
                for (i, g) in gs.iter().enumerate() {
                    up.set(i, 0, *g);
                }
                let cache = state
                    .score_cache
                    .as_ref()
                    .ok_or_else(|| Error::numeric("theta", "missing score cache"))?;
                let grads = backprop(net, cache, &up)?;
                Some((Some(grads), gs))
            }
        }
    } else {
        None
    };

    // Psi gradient: softplus'(psi) * P_TV.
    let psi_grad = if cfg.method.has_dual() {
        Some(players.dual.lambda_grad() * state.penalty.value)
    } else {
        None
    };

    // Group-DRO weights: exponentiated-gradient ascent on per-env risks,
    // applied before the predictor step.
    if cfg.method == Method::GroupDro {
        let q = players.group_weights.as_mut().expect("validated above");
        for (e, qe) in q.iter_mut().enumerate() {
            if state.wstate.is_used(e) {
                *qe *= (cfg.group_dro_step * state.r_envs[e]).exp();
            }
        }
        let z: f64 = q.iter().sum();
        for qe in q.iter_mut() {
            *qe /= z;
        }
    }

    // Apply the updates.
    if let (Some((net_grads, score_grad)), Some(theta_opt)) = (theta_grads, opts.theta.as_mut()) {
        match &mut players.tail {
            TailAdversary::FreeScores { scores } => {
                theta_opt.step(
                    &mut [&mut scores[..]],
                    &[&score_grad[..]],
                    Direction::Ascent,
                    "theta",
                )?;
            }
            TailAdversary::ScoreNetwork { net, .. } => {
                let grads = net_grads.expect("score network gradients");
                let tensors = grads.tensors();
                let mut params = net.tensors_mut();
                theta_opt.step(&mut params, &tensors, Direction::Ascent, "theta")?;
            }
        }
    }
    if let (Some(g), Some(psi_opt)) = (psi_grad, opts.psi.as_mut()) {
        let mut psi = [players.dual.psi];
        psi_opt.step(&mut [&mut psi], &[&[g]], Direction::Ascent, "psi")?;
        players.dual.psi = psi[0];
    }
    if let Some(phi_opt) = opts.phi.as_mut() {
        let tensors = phi_grads.tensors();
        let mut params = players.predictor.tensors_mut();
        phi_opt.step(&mut params, &tensors, Direction::Descent, "phi")?;
    }

    let degenerate_envs = (0..state.wstate.n_envs())
        .filter(|&e| state.wstate.degenerate[e])
        .collect();
    Ok(StepOutcome {
        breakdown: state.breakdown,
        degenerate_envs,
    })
}

/// A degenerate-mass event: an environment skipped in one batch's averages.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct DegenerateEvent {
    pub epoch: usize,
    pub step: usize,
    pub env: usize,
}

/// Test metric family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Accuracy,
    Mse,
}

/// Per-epoch outer-objective trace entry (mean over the epoch's batches).
#[derive(Debug, Clone, Copy, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub r_main: f64,
    pub p_tv: f64,
    pub kl_env: f64,
    pub lambda: f64,
    pub total: f64,
}

/// Complete record of one training run.
#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub method: &'static str,
    pub seed: u64,
    pub metric: MetricKind,
    pub trace: Vec<EpochRecord>,
    /// Outer objective on the full training set at the final parameters.
    pub final_train: OuterLossBreakdown,
    pub per_env_metrics: Vec<f64>,
    pub mean_metric: f64,
    pub worst_metric: f64,
    pub degenerate_event_count: usize,
    /// First few degenerate-mass events, for the audit trail.
    pub degenerate_events: Vec<DegenerateEvent>,
}

/// Per-environment test metrics with the mean/worst aggregation rule:
/// worst is the minimum accuracy, or the maximum MSE.
pub fn evaluate(
    predictor: &PredictorParams,
    loss: LossSpec,
    test_envs: &[Batch],
) -> Result<(Vec<f64>, f64, f64, MetricKind)> {
    if test_envs.is_empty() {
        return Err(Error::input("no test environments"));
    }
    let kind = if loss == LossSpec::Mse { MetricKind::Mse } else { MetricKind::Accuracy };
    let mut per_env = Vec::new();
    for (e, batch) in test_envs.iter().enumerate() {
        if batch.is_empty() {
            logging::warn(format!("test environment {e} is empty; excluded"));
            continue;
        }
        let (logits, _) = forward(predictor, &batch.features)?;
        let metric = match kind {
            MetricKind::Accuracy => {
                let mut hits = 0.0;
                for i in 0..batch.len() {
                    let correct = if logits.cols() == 1 {
                        // Threshold at probability 0.5, i.e. logit 0.
                        (logits.get(i, 0) > 0.0) == (batch.labels[i] == 1.0)
                    } else {
                        let row = logits.row(i);
                        let argmax = row
                            .iter()
                            .enumerate()
                            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                            .map(|(j, _)| j)
                            .unwrap();
                        argmax == batch.labels[i] as usize
                    };
                    if correct {
                        hits += 1.0;
                    }
                }
                hits / batch.len() as f64
            }
            MetricKind::Mse => {
                let mut acc = 0.0;
                for i in 0..batch.len() {
                    let r = logits.get(i, 0) - batch.labels[i];
                    acc += r * r;
                }
                acc / batch.len() as f64
            }
        };
        per_env.push(metric);
    }
    if per_env.is_empty() {
        return Err(Error::input("every test environment was empty"));
    }
    let mean = per_env.iter().sum::<f64>() / per_env.len() as f64;
    let worst = match kind {
        MetricKind::Accuracy => per_env.iter().cloned().fold(f64::MAX, f64::min),
        MetricKind::Mse => per_env.iter().cloned().fold(f64::MIN, f64::max),
    };
    Ok((per_env, mean, worst, kind))
}

/// Initializes all players from the dataset geometry and the config. The
/// draw order (predictor, tail, inference) is fixed so runs that share a
/// seed and differ only in later players still initialize earlier players
/// identically.
pub fn init_players(dataset: &Dataset, cfg: &TrainConfig, rng: &mut Rng) -> Result<Players> {
    let d = dataset.feature_dim();
    let mut dims = vec![d];
    dims.extend(&cfg.hidden);
    dims.push(cfg.out_dim);
    let predictor = PredictorParams::init(&dims, cfg.activation, rng)?;

    let n_total: usize = dataset.train_envs.iter().map(Batch::len).sum();
    let tail = if !cfg.method.has_tail_adversary() {
        TailAdversary::FreeScores { scores: vec![0.0; n_total] }
    } else if cfg.free_scores {
        TailAdversary::FreeScores { scores: vec![0.0; n_total] }
    } else {
        let in_dim = d + match cfg.tail_inputs {
            ScoreInputs::Features => 0,
            ScoreInputs::FeaturesPlusDetachedLoss => 1,
        };
        let mut sdims = vec![in_dim];
        sdims.extend(&cfg.score_hidden);
        sdims.push(1);
        TailAdversary::ScoreNetwork {
            net: PredictorParams::init(&sdims, Activation::Tanh, rng)?,
            inputs: cfg.tail_inputs,
        }
    };

    let inference = if cfg.method == Method::EctrInferred && !cfg.freeze_assignments_to_truth {
        let aux_dim = dataset.train_envs[0]
            .aux
            .as_ref()
            .map_or(d, DenseMatrix::cols);
        let mut idims = vec![aux_dim];
        idims.extend(&cfg.infer_hidden);
        idims.push(cfg.n_latent_envs);
        Some(EnvInferenceNet::init(&idims, cfg.temperature, rng)?)
    } else {
        None
    };

    let group_weights = if cfg.method == Method::GroupDro {
        let e = dataset.n_train_envs();
        Some(vec![1.0 / e as f64; e])
    } else {
        None
    };

    Ok(Players {
        predictor,
        tail,
        dual: InvarianceDual::new(cfg.psi_init),
        inference,
        group_weights,
    })
}

/// Full training loop: stratified minibatches for known-environment
/// methods, pooled shuffled minibatches otherwise, per-epoch trace, final
/// full-train breakdown, and test evaluation.
pub fn train(dataset: &Dataset, cfg: &TrainConfig) -> Result<RunReport> {
    train_with_players(dataset, cfg).map(|(report, _)| report)
}

/// [`train`], also returning the final players for checks that inspect the
/// trained adversaries.
pub fn train_with_players(dataset: &Dataset, cfg: &TrainConfig) -> Result<(RunReport, Players)> {
    cfg.validate()?;
    if dataset.train_envs.is_empty() {
        return Err(Error::config("dataset has no training environments"));
    }
    if cfg.method.needs_env_ids() && dataset.n_train_envs() < 2 {
        return Err(Error::config(format!(
            "method {} requires at least two training environments",
            cfg.method.name()
        )));
    }
    let n_envs = dataset.n_train_envs();
    let n_total: usize = dataset.train_envs.iter().map(Batch::len).sum();
    if cfg.batch_size < 2 * n_envs {
        logging::warn(format!(
            "batch_size {} is below the recommended 2 * E = {}",
            cfg.batch_size,
            2 * n_envs
        ));
    }
    if cfg.free_scores && cfg.batch_size < n_total {
        return Err(Error::config(format!(
            "free scores need full batches: batch_size {} < {n_total} samples",
            cfg.batch_size
        )));
    }

    let mut rng = Rng::new(cfg.seed);
    let mut players = init_players(dataset, cfg, &mut rng)?;
    let mut opts = PlayerOptimizers::from_config(cfg)?;

    let stratified = cfg.method.needs_env_ids();
    let pooled = Batch::concat_envs(&dataset.train_envs)?;

    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut degenerate_events: Vec<DegenerateEvent> = Vec::new();
    let mut degenerate_count = 0usize;

    for epoch in 0..cfg.epochs {
        let mut sums = [0.0f64; 5];
        let mut steps_done = 0usize;

        let batches: Vec<Batch> = if stratified {
            let per_env = (cfg.batch_size / n_envs).max(1);
            let min_n = dataset.train_envs.iter().map(Batch::len).min().unwrap();
            let steps = (min_n / per_env).max(1).min(min_n);
            let full_batch = steps == 1 && per_env * n_envs >= n_total;
            let mut env_order: Vec<Vec<usize>> = dataset
                .train_envs
                .iter()
                .map(|b| (0..b.len()).collect())
                .collect();
            if !full_batch {
                for order in &mut env_order {
                    rng.shuffle(order);
                }
            }
            (0..steps)
                .map(|s| {
                    let parts: Vec<Batch> = dataset
                        .train_envs
                        .iter()
                        .zip(&env_order)
                        .map(|(b, order)| {
                            let lo = s * per_env;
                            let hi = ((s + 1) * per_env).min(order.len());
                            b.gather(&order[lo..hi])
                        })
                        .collect();
                    Batch::concat_envs(&parts)
                })
                .collect::<Result<Vec<_>>>()?
        } else {
            let steps = (n_total / cfg.batch_size).max(1);
            let full_batch = steps == 1 && cfg.batch_size >= n_total;
            let mut order: Vec<usize> = (0..n_total).collect();
            if !full_batch {
                rng.shuffle(&mut order);
            }
            (0..steps)
                .map(|s| {
                    let lo = s * cfg.batch_size;
                    let hi = ((s + 1) * cfg.batch_size).min(n_total);
                    pooled.gather(&order[lo..hi])
                })
                .collect()
        };

        for (step, batch) in batches.iter().enumerate() {
            let outcome = outer_step(&mut players, &mut opts, batch, cfg)?;
            for &e in &outcome.degenerate_envs {
                degenerate_count += 1;
                if degenerate_events.len() < 100 {
                    degenerate_events.push(DegenerateEvent { epoch, step, env: e });
                }
            }
            let b = outcome.breakdown;
            sums[0] += b.r_main;
            sums[1] += b.p_tv;
            sums[2] += b.kl_env;
            sums[3] += b.lambda;
            sums[4] += b.total;
            steps_done += 1;

            if cfg.method == Method::EctrInferred && !cfg.freeze_assignments_to_truth {
                if let Some(eta_opt) = opts.eta.as_mut() {
                    for _ in 0..cfg.k_inner {
                        let (logits, _) = forward(&players.predictor, &batch.features)?;
                        let probes = probe_batch(cfg.loss, &logits, &batch.labels)?;
                        let input = score_input(batch, &probes.losses, players.tail.score_inputs());
                        let (scores, _) = players.tail.scores(&input)?;
                        let pi = global_softmax(&scores)?;
                        let aux = inference_input(batch);
                        let inner = InnerState {
                            aux: &aux,
                            pi_global: &pi,
                            probes: &probes,
                            variant: cfg.tv_variant,
                            epsilon: cfg.epsilon,
                        };
                        let net = players.inference.as_mut().expect("inferred method");
                        inner_step(net, eta_opt, &inner)?;
                    }
                }
            }
        }

        let inv = 1.0 / steps_done.max(1) as f64;
        trace.push(EpochRecord {
            epoch,
            r_main: sums[0] * inv,
            p_tv: sums[1] * inv,
            kl_env: sums[2] * inv,
            lambda: sums[3] * inv,
            total: sums[4] * inv,
        });
    }

    // Full-train-set breakdown at the final parameters. Free scores are
    // aligned with the pooled sample order used throughout.
    let final_train = compute_batch_state(&players, &pooled, cfg)?.breakdown;
    let (per_env_metrics, mean_metric, worst_metric, metric) =
        evaluate(&players.predictor, cfg.loss, &dataset.test_envs)?;

    debug_assert_eq!(players.predictor.probe_w(), 1.0);
    let report = RunReport {
        method: cfg.method.name(),
        seed: cfg.seed,
        metric,
        trace,
        final_train,
        per_env_metrics,
        mean_metric,
        worst_metric,
        degenerate_event_count: degenerate_count,
        degenerate_events,
    };
    Ok((report, players))
}
