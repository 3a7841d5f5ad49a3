//! Tail-score adversary, environment-conditioned sample weights, the
//! environment-wise KL-to-uniform stabilizer, and the KL-regularized DRO
//! closed form with its brute-force oracle.
//!
//! The weight pipeline is: scores `s_i` -> global softmax `pi(i)` ->
//! per-environment conditionals `pi(i|e) = pi(i) m_ie / mass_e`, with
//! `mass_e + epsilon` used for the division and each used column exactly
//! renormalized afterwards so the simplex invariant holds to machine
//! precision.

use crate::error::{Error, Result};
use crate::numerics::{forward, DenseMatrix, ForwardCache, PredictorParams};

/// Default mass-stability epsilon.
pub const DEFAULT_EPSILON: f64 = 1e-8;

/// What the score network sees per sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreInputs {
    /// Raw features only.
    Features,
    /// Features plus the per-sample loss as an extra column. The loss value
    /// carries no gradient back to the predictor.
    FeaturesPlusDetachedLoss,
}

/// The tail-weighting adversary `theta`.
#[derive(Debug, Clone)]
pub enum TailAdversary {
    /// A small network mapping per-sample inputs to a scalar score.
    ScoreNetwork {
        net: PredictorParams,
        inputs: ScoreInputs,
    },
    /// One free score per sample; analysis mode for fixed small datasets.
    FreeScores { scores: Vec<f64> },
}

impl TailAdversary {
    pub fn score_inputs(&self) -> ScoreInputs {
        match self {
            TailAdversary::ScoreNetwork { inputs, .. } => *inputs,
            TailAdversary::FreeScores { .. } => ScoreInputs::Features,
        }
    }

    /// Emits one finite score per sample. For `ScoreNetwork` the cache is
    /// returned for the ascent backprop.
    pub fn scores(&self, input: &DenseMatrix) -> Result<(Vec<f64>, Option<ForwardCache>)> {
        match self {
            TailAdversary::ScoreNetwork { net, .. } => {
                if net.out_dim() != 1 {
                    return Err(Error::config("score network must have a single output".to_string()));
                }
                let (logits, cache) = forward(net, input)?;
                let scores: Vec<f64> = (0..logits.rows()).map(|i| logits.get(i, 0)).collect();
                if scores.iter().any(|s| !s.is_finite()) {
                    return Err(Error::numeric("theta", "non-finite tail score"));
                }
                Ok((scores, Some(cache)))
            }
            TailAdversary::FreeScores { scores } => {
                if scores.len() != input.rows() {
                    return Err(Error::shape(format!(
                        "free scores hold {} entries but the batch has {} samples",
                        scores.len(),
                        input.rows()
                    )));
                }
                Ok((scores.clone(), None))
            }
        }
    }
}

/// Per-sample environment membership mass `m_ie`.
#[derive(Debug, Clone, PartialEq)]
pub enum EnvAssignment {
    /// Observed environments: `m_ie = 1[g_i = e]`.
    Hard { ids: Vec<usize>, n_envs: usize },
    /// Soft membership rows on the simplex (inferred environments).
    Soft { m: DenseMatrix },
}

impl EnvAssignment {
    pub fn hard(ids: Vec<usize>, n_envs: usize) -> Result<Self> {
        if n_envs == 0 {
            return Err(Error::input("need at least one environment"));
        }
        if let Some(&bad) = ids.iter().find(|&&g| g >= n_envs) {
            return Err(Error::input(format!("environment id {bad} out of range 0..{n_envs}")));
        }
        Ok(EnvAssignment::Hard { ids, n_envs })
    }

    pub fn soft(m: DenseMatrix) -> Result<Self> {
        for i in 0..m.rows() {
            let row = m.row(i);
            if row.iter().any(|&v| !(0.0..=1.0 + 1e-12).contains(&v)) {
                return Err(Error::input(format!("soft assignment row {i} has entries outside [0,1]")));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(Error::input(format!("soft assignment row {i} sums to {s}")));
            }
        }
        Ok(EnvAssignment::Soft { m })
    }

    /// Everyone in one environment; the degenerate ERM view of a batch.
    pub fn single(n: usize) -> Self {
        EnvAssignment::Hard {
            ids: vec![0; n],
            n_envs: 1,
        }
    }

    pub fn n_samples(&self) -> usize {
        match self {
            EnvAssignment::Hard { ids, .. } => ids.len(),
            EnvAssignment::Soft { m } => m.rows(),
        }
    }

    pub fn n_envs(&self) -> usize {
        match self {
            EnvAssignment::Hard { n_envs, .. } => *n_envs,
            EnvAssignment::Soft { m } => m.cols(),
        }
    }

    #[inline]
    pub fn membership(&self, i: usize, e: usize) -> f64 {
        match self {
            EnvAssignment::Hard { ids, .. } => {
                if ids[i] == e {
                    1.0
                } else {
                    0.0
                }
            }
            EnvAssignment::Soft { m } => m.get(i, e),
        }
    }

    /// Total membership mass `M_e = sum_i m_ie`.
    pub fn env_total_mass(&self, e: usize) -> f64 {
        (0..self.n_samples()).map(|i| self.membership(i, e)).sum()
    }

    /// The environment-uniform base distribution `Unif_e(i) = m_ie / M_e`.
    pub fn uniform_base(&self, e: usize) -> Result<Vec<f64>> {
        let total = self.env_total_mass(e);
        if total <= 0.0 {
            return Err(Error::input(format!("environment {e} has zero membership mass")));
        }
        Ok((0..self.n_samples())
            .map(|i| self.membership(i, e) / total)
            .collect())
    }
}

/// Global and environment-conditioned weights for one batch.
#[derive(Debug, Clone)]
pub struct WeightState {
    /// Global sample distribution `pi(i)`.
    pub pi_global: Vec<f64>,
    /// True per-environment masses `mass_e = sum_i pi(i) m_ie` (pre-epsilon).
    pub mass: Vec<f64>,
    /// Conditionals `pi(i|e)`, N x E; degenerate columns are zero.
    pub pi_cond: DenseMatrix,
    /// Environments whose batch mass fell below `10 * epsilon`.
    pub degenerate: Vec<bool>,
    pub epsilon: f64,
    /// Environment-wise KL value, filled by the training pipeline.
    pub kl_env: f64,
}

impl WeightState {
    pub fn n_envs(&self) -> usize {
        self.mass.len()
    }

    /// Environments that participate in batch averages.
    pub fn used_envs(&self) -> usize {
        self.degenerate.iter().filter(|d| !**d).count()
    }

    pub fn is_used(&self, e: usize) -> bool {
        !self.degenerate[e]
    }
}

/// Max-shifted softmax over scores.
pub fn global_softmax(scores: &[f64]) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(Error::input("empty batch"));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::numeric("theta", "non-finite score in softmax"));
    }
    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
    let z: f64 = out.iter().sum();
    for v in &mut out {
        *v /= z;
    }
    Ok(out)
}

/// Conditions the global distribution on each environment.
///
/// `mass_e + epsilon` guards the division; used columns are then exactly
/// renormalized. Environments with `mass_e < 10 * epsilon` are marked
/// degenerate and their columns zeroed so they can be skipped upstream.
pub fn condition_on_envs(
    pi: &[f64],
    assign: &EnvAssignment,
    epsilon: f64,
) -> Result<WeightState> {
    let n = pi.len();
    if assign.n_samples() != n {
        return Err(Error::shape(format!(
            "assignment covers {} samples, pi has {}",
            assign.n_samples(),
            n
        )));
    }
    let total: f64 = pi.iter().sum();
    if (total - 1.0).abs() > 1e-6 || pi.iter().any(|&p| p < 0.0) {
        return Err(Error::input(format!("pi is not on the simplex (sum {total})")));
    }
    let n_envs = assign.n_envs();
    let mut mass = vec![0.0; n_envs];
    let mut pi_cond = DenseMatrix::zeros(n, n_envs);
    let mut degenerate = vec![false; n_envs];
    for e in 0..n_envs {
        let mut acc = 0.0;
        for (i, &p) in pi.iter().enumerate() {
            acc += p * assign.membership(i, e);
        }
        mass[e] = acc;
        if acc < 10.0 * epsilon {
            degenerate[e] = true;
            continue;
        }
        let denom = acc + epsilon;
        // The pre-normalization column sums to mass/(mass+eps) analytically;
        // dividing by that value renormalizes without accumulation error.
        let col_sum = acc / denom;
        for (i, &p) in pi.iter().enumerate() {
            let u = p * assign.membership(i, e) / denom;
            pi_cond.set(i, e, u / col_sum);
        }
    }
    Ok(WeightState {
        pi_global: pi.to_vec(),
        mass,
        pi_cond,
        degenerate,
        epsilon,
        kl_env: 0.0,
    })
}

/// Per-environment KL to the uniform base, `KL(pi(.|e) || Unif_e)` with
/// `0 log 0 = 0`; zero entries for degenerate environments.
pub fn kl_env_per_env(state: &WeightState, assign: &EnvAssignment) -> Result<Vec<f64>> {
    let n_envs = state.n_envs();
    if assign.n_envs() != n_envs || assign.n_samples() != state.pi_global.len() {
        return Err(Error::shape("assignment does not match weight state"));
    }
    let mut out = vec![0.0; n_envs];
    for (e, slot) in out.iter_mut().enumerate() {
        if !state.is_used(e) {
            continue;
        }
        let base = assign.uniform_base(e)?;
        let mut kl = 0.0;
        for i in 0..state.pi_global.len() {
            let c = state.pi_cond.get(i, e);
            if c == 0.0 {
                continue;
            }
            let u = base[i];
            if u == 0.0 {
                return Err(Error::numeric(
                    "theta",
                    format!("support violation: pi({i}|{e}) > 0 where Unif is 0"),
                ));
            }
            kl += c * (c / u).ln();
        }
        // Mathematically nonnegative; absorb rounding noise near uniform.
        *slot = kl.max(0.0);
    }
    Ok(out)
}

/// Environment-wise KL averaged over used environments:
/// `(1/E) sum_e KL(pi(.|e) || Unif_e)`.
///
/// Under inferred environments the assignment carries no gradient through
/// this term (the detach rule); only the value is computed here, and the
/// eta-side gradient path deliberately omits it.
pub fn kl_env(state: &WeightState, assign: &EnvAssignment) -> Result<f64> {
    let per_env = kl_env_per_env(state, assign)?;
    let used = state.used_envs();
    if used == 0 {
        return Ok(0.0);
    }
    Ok(per_env.iter().sum::<f64>() / used as f64)
}

/// Weighted sum `F_e = sum_i pi(i|e) a_i` over one environment.
pub fn env_weighted_sum(state: &WeightState, e: usize, a: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (i, &v) in a.iter().enumerate() {
        acc += state.pi_cond.get(i, e) * v;
    }
    acc
}

/// Accumulates the score-gradient of `F_e = sum_i pi(i|e) a_i`:
/// `d F_e / d s_k = pi(k|e) (a_k - F_e)`, the chain through both the
/// environment conditioning and the global softmax Jacobian.
pub fn add_score_grad(
    grad_s: &mut [f64],
    state: &WeightState,
    e: usize,
    a: &[f64],
    value: f64,
    coeff: f64,
) {
    for (k, g) in grad_s.iter_mut().enumerate() {
        *g += coeff * state.pi_cond.get(k, e) * (a[k] - value);
    }
}

/// Accumulates the membership-gradient of `F_e = sum_i pi(i|e) a_i`:
/// `d F_e / d m_ke = (pi(k) / mass_e) (a_k - F_e)`.
pub fn add_mass_grad(
    grad_m: &mut DenseMatrix,
    state: &WeightState,
    e: usize,
    a: &[f64],
    value: f64,
    coeff: f64,
) {
    let mass = state.mass[e];
    for k in 0..grad_m.rows() {
        let g = coeff * state.pi_global[k] / mass * (a[k] - value);
        grad_m.set(k, e, grad_m.get(k, e) + g);
    }
}

/// Full (non-detached) membership gradient of the environment-wise KL,
/// `(1/E) d KL_e / d m_ke`. The production eta path never uses this; it
/// exists for the detach-rule checks and their mutation control.
pub fn kl_env_mass_grad(state: &WeightState, assign: &EnvAssignment) -> Result<DenseMatrix> {
    let n = state.pi_global.len();
    let n_envs = state.n_envs();
    let used = state.used_envs().max(1) as f64;
    let mut grad = DenseMatrix::zeros(n, n_envs);
    for e in 0..n_envs {
        if !state.is_used(e) {
            continue;
        }
        let base = assign.uniform_base(e)?;
        let total_mass = assign.env_total_mass(e);
        let mut kl = 0.0;
        for i in 0..n {
            let c = state.pi_cond.get(i, e);
            if c > 0.0 {
                kl += c * (c / base[i]).ln();
            }
        }
        for k in 0..n {
            let c = state.pi_cond.get(k, e);
            let u = base[k];
            let ratio = if u > 0.0 { c / u } else { 0.0 };
            let log_term = if c > 0.0 && u > 0.0 { (c / u).ln() } else { 0.0 };
            let g = state.pi_global[k] / state.mass[e] * (log_term - kl)
                - (ratio - 1.0) / total_mass;
            grad.set(k, e, g / used);
        }
    }
    Ok(grad)
}

/// Closed-form maximizer of `sum_i pi_i l_i - beta KL(pi || base)`:
/// `pi*(i) = base_i exp(l_i / beta) / Z`, computed in the log domain.
pub fn gibbs_tail_distribution(losses: &[f64], base: &[f64], beta: f64) -> Result<Vec<f64>> {
    if !(beta > 0.0) {
        return Err(Error::input(format!("beta must be positive, got {beta}")));
    }
    if losses.len() != base.len() || losses.is_empty() {
        return Err(Error::shape("losses and base must be equal-length and nonempty"));
    }
    let logw: Vec<f64> = losses
        .iter()
        .zip(base)
        .map(|(&l, &b)| if b > 0.0 { b.ln() + l / beta } else { f64::NEG_INFINITY })
        .collect();
    let m = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return Err(Error::input("base has no support"));
    }
    let mut out: Vec<f64> = logw.iter().map(|&w| (w - m).exp()).collect();
    let z: f64 = out.iter().sum();
    for v in &mut out {
        *v /= z;
    }
    Ok(out)
}

/// The analytic optimum of the KL-regularized objective,
/// `beta * ln sum_i base_i exp(l_i / beta)`.
pub fn kl_dro_optimal_value(losses: &[f64], base: &[f64], beta: f64) -> Result<f64> {
    if !(beta > 0.0) {
        return Err(Error::input(format!("beta must be positive, got {beta}")));
    }
    let scaled: Vec<f64> = losses
        .iter()
        .zip(base)
        .map(|(&l, &b)| if b > 0.0 { b.ln() + l / beta } else { f64::NEG_INFINITY })
        .collect();
    let m = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + scaled.iter().map(|&w| (w - m).exp()).sum::<f64>().ln();
    Ok(beta * lse)
}

/// Objective `sum pi l - beta KL(pi || base)`; `-inf` off the base support.
pub fn kl_dro_objective(pi: &[f64], losses: &[f64], base: &[f64], beta: f64) -> f64 {
    let mut acc = 0.0;
    for ((&p, &l), &b) in pi.iter().zip(losses).zip(base) {
        if p == 0.0 {
            continue;
        }
        if b == 0.0 {
            return f64::NEG_INFINITY;
        }
        acc += p * l - beta * p * (p / b).ln();
    }
    acc
}

fn compositions_best(
    losses: &[f64],
    base: &[f64],
    beta: f64,
    resolution: usize,
) -> (Vec<f64>, f64) {
    let n = losses.len();
    let mut counts = vec![0usize; n];
    let mut best_pi = vec![1.0 / n as f64; n];
    let mut best_obj = kl_dro_objective(&best_pi, losses, base, beta);
    let mut pi = vec![0.0; n];
    // Depth-first enumeration of all count vectors summing to `resolution`.
    fn recurse(
        idx: usize,
        remaining: usize,
        counts: &mut [usize],
        pi: &mut [f64],
        resolution: usize,
        losses: &[f64],
        base: &[f64],
        beta: f64,
        best_pi: &mut Vec<f64>,
        best_obj: &mut f64,
    ) {
        let n = counts.len();
        if idx == n - 1 {
            counts[idx] = remaining;
            for (p, &c) in pi.iter_mut().zip(counts.iter()) {
                *p = c as f64 / resolution as f64;
            }
            let obj = kl_dro_objective(pi, losses, base, beta);
            if obj > *best_obj {
                *best_obj = obj;
                best_pi.copy_from_slice(pi);
            }
            return;
        }
        for c in 0..=remaining {
            counts[idx] = c;
            recurse(
                idx + 1,
                remaining - c,
                counts,
                pi,
                resolution,
                losses,
                base,
                beta,
                best_pi,
                best_obj,
            );
        }
    }
    recurse(
        0,
        resolution,
        &mut counts,
        &mut pi,
        resolution,
        losses,
        base,
        beta,
        &mut best_pi,
        &mut best_obj,
    );
    (best_pi, best_obj)
}

fn binom_at_most(n: usize, k: usize, cap: u128) -> u128 {
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc.saturating_mul((n - i) as u128) / (i + 1) as u128;
        if acc > cap {
            return cap + 1;
        }
    }
    acc
}

/// Brute-force maximizer of the KL-regularized reweighting objective:
/// simplex grid search followed by projected gradient polish. Test oracle
/// for [`gibbs_tail_distribution`]; restricted to small `N`.
pub fn brute_force_kl_dro(
    losses: &[f64],
    base: &[f64],
    beta: f64,
    grid_resolution: usize,
) -> Result<(Vec<f64>, f64)> {
    let n = losses.len();
    if n == 0 || n > 6 {
        return Err(Error::input(format!("brute force supports 1..=6 samples, got {n}")));
    }
    if grid_resolution < 200 {
        return Err(Error::input(format!(
            "grid resolution must be at least 200, got {grid_resolution}"
        )));
    }
    if !(beta > 0.0) {
        return Err(Error::input(format!("beta must be positive, got {beta}")));
    }
    if losses.len() != base.len() {
        return Err(Error::shape("losses and base length mismatch"));
    }

    // Cap the enumeration so high-dimensional calls stay tractable; the
    // projected polish recovers the requested accuracy.
    const MAX_POINTS: u128 = 3_000_000;
    let mut resolution = grid_resolution;
    while resolution > 8 && binom_at_most(resolution + n - 1, n - 1, MAX_POINTS) > MAX_POINTS {
        resolution /= 2;
    }
    let (grid_pi, grid_obj) = compositions_best(losses, base, beta, resolution);

    // Multiplicative-weights ascent in the log domain polishes the grid
    // argmax. The update pi' ∝ pi * exp(eta * grad) with eta = 0.5 / beta
    // contracts the log-iterates by a factor 1/2 per step, so the boundary
    // conditioning that defeats Euclidean steps is harmless here.
    let polish = |start: &[f64]| -> (Vec<f64>, f64) {
        let mut logpi: Vec<f64> = start
            .iter()
            .zip(base)
            .map(|(&p, &b)| if b > 0.0 { p.max(1e-12).ln() } else { f64::NEG_INFINITY })
            .collect();
        let eta = 0.5 / beta;
        for _ in 0..200 {
            // grad_i = l_i - beta (ln(pi_i / b_i) + 1); constants drop in the
            // renormalization, so track only the varying part.
            for ((y, &l), &b) in logpi.iter_mut().zip(losses).zip(base) {
                if b > 0.0 {
                    *y += eta * (l - beta * (*y - b.ln()));
                }
            }
            let m = logpi.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z = logpi.iter().map(|&y| (y - m).exp()).sum::<f64>().ln() + m;
            for y in &mut logpi {
                *y -= z;
            }
        }
        let pi: Vec<f64> = logpi.iter().map(|&y| y.exp()).collect();
        let obj = kl_dro_objective(&pi, losses, base, beta);
        (pi, obj)
    };

    let (p1, o1) = polish(&grid_pi);
    let (p2, o2) = polish(base);
    let (mut best_pi, mut best_obj) = if o1 >= o2 { (p1, o1) } else { (p2, o2) };
    if grid_obj > best_obj {
        best_pi = grid_pi;
        best_obj = grid_obj;
    }
    Ok((best_pi, best_obj))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
    }

    #[test]
    fn softmax_symmetry() {
        let pi = global_softmax(&[0.0, 0.0, 0.0]).unwrap();
        for p in &pi {
            assert_close(*p, 1.0 / 3.0, 1e-15);
        }
    }

    #[test]
    fn softmax_direct_evaluation() {
        let pi = global_softmax(&[0.0, 3.0_f64.ln()]).unwrap();
        assert_close(pi[0], 0.25, 1e-14);
        assert_close(pi[1], 0.75, 1e-14);
    }

    #[test]
    fn softmax_empty_batch_errors() {
        assert!(global_softmax(&[]).is_err());
    }

    #[test]
    fn conditioning_hand_arithmetic() {
        let pi = [0.1, 0.2, 0.3, 0.4];
        let assign = EnvAssignment::hard(vec![0, 0, 1, 1], 2).unwrap();
        let state = condition_on_envs(&pi, &assign, DEFAULT_EPSILON).unwrap();
        assert_close(state.pi_cond.get(0, 0), 1.0 / 3.0, 1e-12);
        assert_close(state.pi_cond.get(1, 0), 2.0 / 3.0, 1e-12);
        assert_close(state.pi_cond.get(2, 0), 0.0, 0.0);
        assert_close(state.pi_cond.get(2, 1), 3.0 / 7.0, 1e-12);
        assert_close(state.pi_cond.get(3, 1), 4.0 / 7.0, 1e-12);
        assert_close(state.mass[0], 0.3, 1e-15);
        assert_close(state.mass[1], 0.7, 1e-15);
    }

    #[test]
    fn single_environment_conditional_equals_global() {
        let pi = [0.1, 0.2, 0.3, 0.4];
        let assign = EnvAssignment::single(4);
        let state = condition_on_envs(&pi, &assign, DEFAULT_EPSILON).unwrap();
        for (i, &p) in pi.iter().enumerate() {
            assert_close(state.pi_cond.get(i, 0), p, 1e-12);
        }
    }

    #[test]
    fn uniform_soft_rows_give_global_conditionals() {
        let pi = [0.4, 0.1, 0.2, 0.3];
        let m = DenseMatrix::from_rows(&[
            vec![0.5, 0.5],
            vec![0.5, 0.5],
            vec![0.5, 0.5],
            vec![0.5, 0.5],
        ])
        .unwrap();
        let assign = EnvAssignment::soft(m).unwrap();
        let state = condition_on_envs(&pi, &assign, DEFAULT_EPSILON).unwrap();
        for e in 0..2 {
            for (i, &p) in pi.iter().enumerate() {
                assert_close(state.pi_cond.get(i, e), p, 1e-12);
            }
        }
    }

    #[test]
    fn kl_uniform_conditionals_are_exactly_zero() {
        // Directly feed the uniform base as the conditional.
        let assign = EnvAssignment::hard(vec![0, 0, 1, 1, 1], 2).unwrap();
        let mut pi_cond = DenseMatrix::zeros(5, 2);
        for e in 0..2 {
            let base = assign.uniform_base(e).unwrap();
            for (i, &b) in base.iter().enumerate() {
                pi_cond.set(i, e, b);
            }
        }
        let state = WeightState {
            pi_global: vec![0.2; 5],
            mass: vec![0.4, 0.6],
            pi_cond,
            degenerate: vec![false, false],
            epsilon: DEFAULT_EPSILON,
            kl_env: 0.0,
        };
        assert_eq!(kl_env(&state, &assign).unwrap(), 0.0);
    }

    #[test]
    fn kl_point_mass_hand_values() {
        // E=1, conditional [1,0] against Unif [0.5,0.5] -> ln 2.
        let assign = EnvAssignment::single(2);
        let state = WeightState {
            pi_global: vec![0.5, 0.5],
            mass: vec![1.0],
            pi_cond: DenseMatrix::from_rows(&[vec![1.0], vec![0.0]]).unwrap(),
            degenerate: vec![false],
            epsilon: DEFAULT_EPSILON,
            kl_env: 0.0,
        };
        assert_close(kl_env(&state, &assign).unwrap(), std::f64::consts::LN_2, 1e-12);

        // Point mass on one of four uniform-base samples -> ln 4.
        let assign = EnvAssignment::single(4);
        let state = WeightState {
            pi_global: vec![0.25; 4],
            mass: vec![1.0],
            pi_cond: DenseMatrix::from_rows(&[vec![1.0], vec![0.0], vec![0.0], vec![0.0]]).unwrap(),
            degenerate: vec![false],
            epsilon: DEFAULT_EPSILON,
            kl_env: 0.0,
        };
        assert_close(kl_env(&state, &assign).unwrap(), 4.0_f64.ln(), 1e-12);
    }

    #[test]
    fn kl_support_violation_is_an_error() {
        // pi(0|0) > 0 but sample 0 is not in env 0's base.
        let assign = EnvAssignment::hard(vec![1, 0], 2).unwrap();
        let state = WeightState {
            pi_global: vec![0.5, 0.5],
            mass: vec![0.5, 0.5],
            pi_cond: DenseMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap(),
            degenerate: vec![false, false],
            epsilon: DEFAULT_EPSILON,
            kl_env: 0.0,
        };
        assert!(kl_env(&state, &assign).is_err());
    }

    #[test]
    fn gibbs_direct_evaluation() {
        let pi = gibbs_tail_distribution(&[1.0, 2.0], &[0.5, 0.5], 1.0).unwrap();
        assert_close(pi[0], 0.2689, 1e-4);
        assert_close(pi[1], 0.7311, 1e-4);
    }

    #[test]
    fn gibbs_limits() {
        let losses = [0.3, 1.7, 0.9];
        let base = [0.2, 0.5, 0.3];
        let near_base = gibbs_tail_distribution(&losses, &base, 1e6).unwrap();
        for (p, b) in near_base.iter().zip(&base) {
            assert_close(*p, *b, 1e-6);
        }
        let near_onehot = gibbs_tail_distribution(&losses, &base, 1e-6).unwrap();
        assert_close(near_onehot[1], 1.0, 1e-6);
    }

    #[test]
    fn gibbs_rejects_bad_beta() {
        assert!(gibbs_tail_distribution(&[1.0], &[1.0], 0.0).is_err());
        assert!(gibbs_tail_distribution(&[1.0], &[1.0], -1.0).is_err());
    }

    #[test]
    fn brute_force_matches_gibbs_and_analytic_value() {
        let mut rng = Rng::new(2024);
        for _ in 0..12 {
            let n = 2 + rng.below(3);
            let losses: Vec<f64> = (0..n).map(|_| rng.uniform(-1.0, 2.0)).collect();
            let base = rng.simplex(n);
            let beta = [0.1, 1.0, 10.0][rng.below(3)];
            let gibbs = gibbs_tail_distribution(&losses, &base, beta).unwrap();
            let (bf, bf_obj) = brute_force_kl_dro(&losses, &base, beta, 200).unwrap();
            for (g, b) in gibbs.iter().zip(&bf) {
                assert!((g - b).abs() <= 1e-3, "gibbs {g} vs brute {b} (beta {beta})");
            }
            let analytic = kl_dro_optimal_value(&losses, &base, beta).unwrap();
            assert!((bf_obj - analytic).abs() <= 1e-6, "obj {bf_obj} vs {analytic}");
        }
    }

    #[test]
    fn brute_force_limits_and_optimality() {
        let losses = [0.5, 1.5, 1.0];
        let base = [0.3, 0.3, 0.4];
        let (pi, _) = brute_force_kl_dro(&losses, &base, 1e6, 200).unwrap();
        for (p, b) in pi.iter().zip(&base) {
            assert_close(*p, *b, 1e-4);
        }
        let (pi, obj) = brute_force_kl_dro(&losses, &base, 1.0, 200).unwrap();
        assert!(obj >= kl_dro_objective(&base, &losses, &base, 1.0));
        for i in 0..3 {
            let mut onehot = vec![0.0; 3];
            onehot[i] = 1.0;
            assert!(obj >= kl_dro_objective(&onehot, &losses, &base, 1.0));
        }
        let s: f64 = pi.iter().sum();
        assert_close(s, 1.0, 1e-9);
    }

    #[test]
    fn brute_force_rejects_large_n() {
        let losses = vec![1.0; 7];
        let base = vec![1.0 / 7.0; 7];
        assert!(brute_force_kl_dro(&losses, &base, 1.0, 200).is_err());
    }

    #[test]
    fn environment_isolation_under_hard_assignments() {
        let mut rng = Rng::new(55);
        let scores: Vec<f64> = (0..8).map(|_| rng.uniform(-2.0, 2.0)).collect();
        let ids = vec![0, 0, 0, 0, 1, 1, 1, 1];
        let assign = EnvAssignment::hard(ids, 2).unwrap();
        let pi = global_softmax(&scores).unwrap();
        let state = condition_on_envs(&pi, &assign, DEFAULT_EPSILON).unwrap();
        // Perturb only env-1 scores; env-0 conditionals must not move.
        let mut perturbed = scores.clone();
        for s in perturbed.iter_mut().skip(4) {
            *s += rng.uniform(-1.0, 1.0);
        }
        let pi2 = global_softmax(&perturbed).unwrap();
        let state2 = condition_on_envs(&pi2, &assign, DEFAULT_EPSILON).unwrap();
        for i in 0..8 {
            assert!(
                (state.pi_cond.get(i, 0) - state2.pi_cond.get(i, 0)).abs() <= 1e-9,
                "env 0 drifted at sample {i}"
            );
        }
    }

    #[test]
    fn score_grad_matches_finite_differences() {
        let mut rng = Rng::new(99);
        let n = 6;
        let scores: Vec<f64> = (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let a: Vec<f64> = (0..n).map(|_| rng.uniform(-2.0, 2.0)).collect();
        let assign = EnvAssignment::hard(vec![0, 0, 0, 1, 1, 1], 2).unwrap();
        let eval = |s: &[f64], e: usize| -> f64 {
            let pi = global_softmax(s).unwrap();
            let st = condition_on_envs(&pi, &assign, DEFAULT_EPSILON).unwrap();
            env_weighted_sum(&st, e, &a)
        };
        let pi = global_softmax(&scores).unwrap();
        let state = condition_on_envs(&pi, &assign, DEFAULT_EPSILON).unwrap();
        for e in 0..2 {
            let value = env_weighted_sum(&state, e, &a);
            let mut grad = vec![0.0; n];
            add_score_grad(&mut grad, &state, e, &a, value, 1.0);
            let h = 1e-6;
            for k in 0..n {
                let mut sp = scores.clone();
                sp[k] += h;
                let up = eval(&sp, e);
                sp[k] -= 2.0 * h;
                let dn = eval(&sp, e);
                let fd = (up - dn) / (2.0 * h);
                assert!(
                    (grad[k] - fd).abs() <= 1e-6 * grad[k].abs().max(1.0),
                    "env {e} score {k}: {} vs {}",
                    grad[k],
                    fd
                );
            }
        }
    }

    #[test]
    fn mass_grad_matches_finite_differences() {
        let mut rng = Rng::new(7);
        let n = 5;
        let scores: Vec<f64> = (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let a: Vec<f64> = (0..n).map(|_| rng.uniform(-2.0, 2.0)).collect();
        let mut m = DenseMatrix::zeros(n, 2);
        for i in 0..n {
            let p = rng.uniform(0.2, 0.8);
            m.set(i, 0, p);
            m.set(i, 1, 1.0 - p);
        }
        let pi = global_softmax(&scores).unwrap();
        let eval = |mm: &DenseMatrix, e: usize| -> f64 {
            // Free-coordinate view of m; conditioning renormalizes anyway.
            let assign = EnvAssignment::Soft { m: mm.clone() };
            let st = condition_on_envs(&pi, &assign, DEFAULT_EPSILON).unwrap();
            env_weighted_sum(&st, e, &a)
        };
        let assign = EnvAssignment::Soft { m: m.clone() };
        let state = condition_on_envs(&pi, &assign, DEFAULT_EPSILON).unwrap();
        for e in 0..2 {
            let value = env_weighted_sum(&state, e, &a);
            let mut grad = DenseMatrix::zeros(n, 2);
            add_mass_grad(&mut grad, &state, e, &a, value, 1.0);
            let h = 1e-7;
            for k in 0..n {
                let orig = m.get(k, e);
                m.set(k, e, orig + h);
                let up = eval(&m, e);
                m.set(k, e, orig - h);
                let dn = eval(&m, e);
                m.set(k, e, orig);
                let fd = (up - dn) / (2.0 * h);
                assert!(
                    (grad.get(k, e) - fd).abs() <= 1e-5 * fd.abs().max(1.0),
                    "env {e} m[{k}]: {} vs {}",
                    grad.get(k, e),
                    fd
                );
            }
        }
    }

    #[test]
    fn kl_mass_grad_matches_finite_differences() {
        let mut rng = Rng::new(13);
        let n = 5;
        let scores: Vec<f64> = (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let mut m = DenseMatrix::zeros(n, 2);
        for i in 0..n {
            let p = rng.uniform(0.2, 0.8);
            m.set(i, 0, p);
            m.set(i, 1, 1.0 - p);
        }
        let pi = global_softmax(&scores).unwrap();
        let eval = |mm: &DenseMatrix| -> f64 {
            let assign = EnvAssignment::Soft { m: mm.clone() };
            let st = condition_on_envs(&pi, &assign, DEFAULT_EPSILON).unwrap();
            kl_env(&st, &assign).unwrap()
        };
        let assign = EnvAssignment::Soft { m: m.clone() };
        let state = condition_on_envs(&pi, &assign, DEFAULT_EPSILON).unwrap();
        let grad = kl_env_mass_grad(&state, &assign).unwrap();
        let h = 1e-7;
        for e in 0..2 {
            for k in 0..n {
                let orig = m.get(k, e);
                m.set(k, e, orig + h);
                let up = eval(&m);
                m.set(k, e, orig - h);
                let dn = eval(&m);
                m.set(k, e, orig);
                let fd = (up - dn) / (2.0 * h);
                assert!(
                    (grad.get(k, e) - fd).abs() <= 1e-5 * fd.abs().max(1.0),
                    "kl mass grad env {e} m[{k}]: {} vs {}",
                    grad.get(k, e),
                    fd
                );
            }
        }
    }

    #[test]
    fn degenerate_environment_is_flagged_and_skipped() {
        // Env 1 has no members at all.
        let pi = [0.5, 0.5];
        let assign = EnvAssignment::hard(vec![0, 0], 2).unwrap();
        let state = condition_on_envs(&pi, &assign, DEFAULT_EPSILON).unwrap();
        assert!(state.degenerate[1]);
        assert!(!state.degenerate[0]);
        assert_eq!(state.used_envs(), 1);
    }

    #[test]
    fn free_scores_length_checked() {
        let adv = TailAdversary::FreeScores { scores: vec![0.0; 3] };
        let x = DenseMatrix::zeros(4, 2);
        assert!(adv.scores(&x).is_err());
    }
}
