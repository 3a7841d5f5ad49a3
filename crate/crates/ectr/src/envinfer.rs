//! Latent-environment inference: a small network maps auxiliary variables
//! (or features when none exist) to soft environment assignments, and is
//! updated by ascent on the TV penalty alone. The KL stabilizer contributes
//! no gradient here — that is the detach rule, and the only way a KL term
//! can reach this player is through the explicit leak hook used by the
//! mutation-control check.

use crate::error::{Error, Result};
use crate::invariance::{tv_outer_weight, tv_penalty, ProbeRecord, TvVariant};
use crate::numerics::{
    backprop, forward, DenseMatrix, Direction, NetGrads, Optimizer, PredictorParams, Rng,
};
use crate::weighting::{
    add_mass_grad, condition_on_envs, kl_env_mass_grad, EnvAssignment, WeightState,
};

/// The inference adversary `eta`.
#[derive(Debug, Clone)]
pub struct EnvInferenceNet {
    net: PredictorParams,
    temperature: f64,
}

impl EnvInferenceNet {
    /// `dims = [aux_dim, hidden..., n_envs]`; the output dimension is the
    /// number of latent environments and must be at least 2.
    pub fn init(dims: &[usize], temperature: f64, rng: &mut Rng) -> Result<Self> {
        let net = PredictorParams::init(dims, crate::numerics::Activation::Tanh, rng)?;
        Self::from_net(net, temperature)
    }

    pub fn from_net(net: PredictorParams, temperature: f64) -> Result<Self> {
        if net.out_dim() < 2 {
            return Err(Error::config("environment inference needs at least 2 environments"));
        }
        if !(temperature > 0.0) {
            return Err(Error::config(format!("temperature must be positive, got {temperature}")));
        }
        Ok(EnvInferenceNet { net, temperature })
    }

    pub fn n_envs(&self) -> usize {
        self.net.out_dim()
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn net(&self) -> &PredictorParams {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut PredictorParams {
        &mut self.net
    }
}

/// Row-stochastic soft assignments `m_ie = softmax_e(z_ie / T)`.
pub fn infer_assignments(net: &EnvInferenceNet, aux: &DenseMatrix) -> Result<EnvAssignment> {
    Ok(EnvAssignment::Soft {
        m: assignment_matrix(net, aux)?,
    })
}

fn assignment_matrix(net: &EnvInferenceNet, aux: &DenseMatrix) -> Result<DenseMatrix> {
    if aux.rows() == 0 {
        return Err(Error::input("empty batch"));
    }
    let (logits, _) = forward(&net.net, aux)?;
    let n = logits.rows();
    let e = logits.cols();
    let mut m = DenseMatrix::zeros(n, e);
    for i in 0..n {
        let row = logits.row(i);
        let mx = row.iter().map(|z| z / net.temperature).fold(f64::NEG_INFINITY, f64::max);
        let mut z_sum = 0.0;
        for (j, &z) in row.iter().enumerate() {
            let v = (z / net.temperature - mx).exp();
            m.set(i, j, v);
            z_sum += v;
        }
        for j in 0..e {
            m.set(i, j, m.get(i, j) / z_sum);
        }
    }
    Ok(m)
}

/// Everything the inner objective needs from the surrounding batch state.
pub struct InnerState<'a> {
    pub aux: &'a DenseMatrix,
    pub pi_global: &'a [f64],
    pub probes: &'a ProbeRecord,
    pub variant: TvVariant,
    pub epsilon: f64,
}

/// Analytic gradient of the inner objective (the TV penalty) with respect
/// to the inference parameters, plus the penalty value.
///
/// `kl_leak = Some(beta)` deliberately violates the detach rule by adding
/// `-beta * dKL/d eta`; it exists so the detach check has a mutation
/// control and is never set by any training path.
pub fn inner_gradient(
    net: &EnvInferenceNet,
    state: &InnerState<'_>,
    kl_leak: Option<f64>,
) -> Result<(NetGrads, f64)> {
    let (logits, cache) = forward(&net.net, state.aux)?;
    let m = assignment_matrix(net, state.aux)?;
    let assign = EnvAssignment::Soft { m: m.clone() };
    let wstate: WeightState = condition_on_envs(state.pi_global, &assign, state.epsilon)?;
    let penalty = tv_penalty(&wstate, state.probes, state.variant)?;

    let n = logits.rows();
    let n_envs = logits.cols();
    // dP_TV/dm, with the optional KL leak folded in.
    let mut grad_m = DenseMatrix::zeros(n, n_envs);
    let inv_used = 1.0 / penalty.used_envs as f64;
    for e in 0..n_envs {
        if !wstate.is_used(e) {
            continue;
        }
        let w = tv_outer_weight(state.variant, penalty.per_env_g[e]) * inv_used;
        if w != 0.0 {
            add_mass_grad(&mut grad_m, &wstate, e, &state.probes.d, penalty.per_env_g[e], w);
        }
    }
    if let Some(beta) = kl_leak {
        let kl_grad = kl_env_mass_grad(&wstate, &assign)?;
        for e in 0..n_envs {
            for i in 0..n {
                grad_m.set(i, e, grad_m.get(i, e) - beta * kl_grad.get(i, e));
            }
        }
    }

    // Chain through the per-row softmax with temperature.
    let mut upstream = DenseMatrix::zeros(n, n_envs);
    for i in 0..n {
        let mut inner = 0.0;
        for e in 0..n_envs {
            inner += m.get(i, e) * grad_m.get(i, e);
        }
        for e in 0..n_envs {
            upstream.set(
                i,
                e,
                m.get(i, e) / net.temperature * (grad_m.get(i, e) - inner),
            );
        }
    }
    let grads = backprop(&net.net, &cache, &upstream)?;
    Ok((grads, penalty.value))
}

/// One ascent step on the TV penalty for the inference parameters only.
/// Returns the penalty value at the pre-update point.
pub fn inner_step(
    net: &mut EnvInferenceNet,
    optimizer: &mut Optimizer,
    state: &InnerState<'_>,
) -> Result<f64> {
    let (grads, value) = inner_gradient(net, state, None)?;
    let grad_tensors = grads.tensors();
    let mut params = net.net.tensors_mut();
    optimizer.step(&mut params, &grad_tensors, Direction::Ascent, "eta")?;
    Ok(value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::invariance::probe_batch;
    use crate::numerics::{Activation, LossSpec, OptimKind};
    use crate::weighting::DEFAULT_EPSILON;

    fn probes_from(d: Vec<f64>) -> ProbeRecord {
        let n = d.len();
        ProbeRecord {
            d,
            dgrad_f: DenseMatrix::zeros(n, 1),
            losses: vec![0.0; n],
            loss_grad: DenseMatrix::zeros(n, 1),
        }
    }

    #[test]
    fn zero_net_gives_uniform_rows() {
        let net = EnvInferenceNet::from_net(
            PredictorParams::zeros(&[1, 3], Activation::Tanh).unwrap(),
            1.0,
        )
        .unwrap();
        let aux = DenseMatrix::from_rows(&[vec![0.3], vec![-0.8]]).unwrap();
        let assign = infer_assignments(&net, &aux).unwrap();
        for i in 0..2 {
            for e in 0..3 {
                assert!((assign.membership(i, e) - 1.0 / 3.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn low_temperature_sharpens_to_one_hot() {
        let mut rng = Rng::new(3);
        let base = PredictorParams::init(&[1, 2], Activation::Tanh, &mut rng).unwrap();
        let net = EnvInferenceNet::from_net(base, 1e-3).unwrap();
        let aux = DenseMatrix::from_rows(&[vec![1.0], vec![-1.0]]).unwrap();
        let assign = infer_assignments(&net, &aux).unwrap();
        for i in 0..2 {
            let row_max = (0..2).map(|e| assign.membership(i, e)).fold(f64::MIN, f64::max);
            assert!(row_max > 1.0 - 1e-9, "row {i} max {row_max}");
        }
    }

    #[test]
    fn identical_aux_rows_get_identical_assignments() {
        let mut rng = Rng::new(4);
        let net = EnvInferenceNet::init(&[2, 4, 2], 1.0, &mut rng).unwrap();
        let aux = DenseMatrix::from_rows(&[vec![0.5, -0.2], vec![0.5, -0.2]]).unwrap();
        let assign = infer_assignments(&net, &aux).unwrap();
        for e in 0..2 {
            assert_eq!(assign.membership(0, e).to_bits(), assign.membership(1, e).to_bits());
        }
    }

    #[test]
    fn rows_sum_to_one() {
        let mut rng = Rng::new(6);
        let net = EnvInferenceNet::init(&[1, 4, 3], 0.7, &mut rng).unwrap();
        let aux = DenseMatrix::from_rows(&[vec![0.1], vec![0.6], vec![0.9]]).unwrap();
        let assign = infer_assignments(&net, &aux).unwrap();
        for i in 0..3 {
            let s: f64 = (0..3).map(|e| assign.membership(i, e)).sum();
            assert!((s - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn empty_batch_is_an_error() {
        let net = EnvInferenceNet::from_net(
            PredictorParams::zeros(&[1, 2], Activation::Tanh).unwrap(),
            1.0,
        )
        .unwrap();
        let aux = DenseMatrix::zeros(0, 1);
        assert!(infer_assignments(&net, &aux).is_err());
    }

    #[test]
    fn zero_probes_leave_net_unchanged() {
        let mut rng = Rng::new(8);
        let mut net = EnvInferenceNet::init(&[1, 4, 2], 1.0, &mut rng).unwrap();
        let before = net.net().clone();
        let aux = DenseMatrix::from_rows(&[vec![0.1], vec![0.9], vec![0.4], vec![0.6]]).unwrap();
        let probes = probes_from(vec![0.0; 4]);
        let pi = vec![0.25; 4];
        let state = InnerState {
            aux: &aux,
            pi_global: &pi,
            probes: &probes,
            variant: TvVariant::L1,
            epsilon: DEFAULT_EPSILON,
        };
        let (grads, _) = inner_gradient(&net, &state, None).unwrap();
        assert!(grads.tensors().iter().all(|t| t.iter().all(|&g| g == 0.0)));
        let mut opt = Optimizer::new(OptimKind::Sgd, 0.1).unwrap();
        inner_step(&mut net, &mut opt, &state).unwrap();
        assert_eq!(net.net(), &before);
    }

    #[test]
    fn ascent_separates_opposite_probes_and_increases_tv() {
        // Two clusters with opposite-sign probe derivatives; aux carries the
        // cluster. The soft partition should pull them apart, raising P_TV.
        let mut rng = Rng::new(12);
        let mut net = EnvInferenceNet::init(&[1, 4, 2], 1.0, &mut rng).unwrap();
        let aux = DenseMatrix::from_rows(&[vec![0.1], vec![0.2], vec![0.8], vec![0.9]]).unwrap();
        let probes = probes_from(vec![1.0, 1.0, -1.0, -1.0]);
        let pi = vec![0.25; 4];
        let state = InnerState {
            aux: &aux,
            pi_global: &pi,
            probes: &probes,
            variant: TvVariant::L1,
            epsilon: DEFAULT_EPSILON,
        };
        let mut opt = Optimizer::new(OptimKind::Sgd, 0.5).unwrap();
        let mut values = Vec::new();
        for _ in 0..40 {
            values.push(inner_step(&mut net, &mut opt, &state).unwrap());
        }
        for w in values[..6].windows(2) {
            assert!(w[1] >= w[0] - 1e-12, "P_TV not monotone early: {values:?}");
        }
        assert!(*values.last().unwrap() > 0.5, "partition failed to separate: {values:?}");
    }

    #[test]
    fn inner_gradient_matches_finite_differences() {
        let mut rng = Rng::new(23);
        let mut net = EnvInferenceNet::init(&[2, 3, 2], 0.8, &mut rng).unwrap();
        let aux = DenseMatrix::from_rows(&[
            vec![0.2, 0.7],
            vec![-0.4, 0.1],
            vec![0.9, -0.3],
            vec![-0.6, -0.8],
        ])
        .unwrap();
        let logits = DenseMatrix::from_rows(&[vec![0.5], vec![-1.2], vec![0.3], vec![2.0]]).unwrap();
        let labels = vec![1.0, 0.0, 0.0, 1.0];
        let probes = probe_batch(LossSpec::BceWithLogit, &logits, &labels).unwrap();
        let scores = [0.3, -0.1, 0.4, 0.0];
        let pi = crate::weighting::global_softmax(&scores).unwrap();
        let state = InnerState {
            aux: &aux,
            pi_global: &pi,
            probes: &probes,
            variant: TvVariant::L1,
            epsilon: DEFAULT_EPSILON,
        };
        let (grads, _) = inner_gradient(&net, &state, None).unwrap();
        let h = 1e-6;
        let n_params = net.net().num_params();
        for p in 0..n_params {
            let orig = net.net().get_flat(p);
            net.net_mut().set_flat(p, orig + h);
            let up = inner_gradient(&net, &state, None).unwrap().1;
            net.net_mut().set_flat(p, orig - h);
            let dn = inner_gradient(&net, &state, None).unwrap().1;
            net.net_mut().set_flat(p, orig);
            let fd = (up - dn) / (2.0 * h);
            let analytic = grads.get_flat(p);
            let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1.0);
            assert!(rel <= 1e-4, "eta param {p}: analytic {analytic} vs fd {fd}");
        }
    }

    #[test]
    fn kl_leak_changes_the_gradient() {
        let mut rng = Rng::new(29);
        let net = EnvInferenceNet::init(&[1, 3, 2], 1.0, &mut rng).unwrap();
        let aux = DenseMatrix::from_rows(&[vec![0.2], vec![0.8], vec![0.5], vec![0.4]]).unwrap();
        let probes = probes_from(vec![0.5, -0.3, 0.8, -0.9]);
        let scores = [0.5, -0.5, 0.2, -0.2];
        let pi = crate::weighting::global_softmax(&scores).unwrap();
        let state = InnerState {
            aux: &aux,
            pi_global: &pi,
            probes: &probes,
            variant: TvVariant::L1,
            epsilon: DEFAULT_EPSILON,
        };
        let (clean, _) = inner_gradient(&net, &state, None).unwrap();
        let (leaky, _) = inner_gradient(&net, &state, Some(0.5)).unwrap();
        let differs = clean
            .tensors()
            .iter()
            .zip(leaky.tensors().iter())
            .any(|(a, b)| a.iter().zip(b.iter()).any(|(x, y)| (x - y).abs() > 1e-12));
        assert!(differs, "leak hook had no effect");
    }

    #[test]
    fn relabeling_environments_preserves_values() {
        let mut rng = Rng::new(41);
        let net = EnvInferenceNet::init(&[1, 3, 2], 1.0, &mut rng).unwrap();
        let aux = DenseMatrix::from_rows(&[vec![0.2], vec![0.8], vec![0.5], vec![0.1]]).unwrap();
        let probes = probes_from(vec![0.5, -0.3, 0.8, -0.9]);
        let scores = [0.5, -0.5, 0.2, -0.2];
        let pi = crate::weighting::global_softmax(&scores).unwrap();

        // Swap the output-layer rows: environment 0 <-> 1.
        let mut swapped_net = net.clone();
        {
            let last = swapped_net.net_mut().layers_mut().last_mut().unwrap();
            let w0: Vec<f64> = last.weight.row(0).to_vec();
            let w1: Vec<f64> = last.weight.row(1).to_vec();
            last.weight.row_mut(0).copy_from_slice(&w1);
            last.weight.row_mut(1).copy_from_slice(&w0);
            last.bias.swap(0, 1);
        }

        let eval = |n: &EnvInferenceNet| -> (f64, f64, f64) {
            let assign = infer_assignments(n, &aux).unwrap();
            let st = condition_on_envs(&pi, &assign, DEFAULT_EPSILON).unwrap();
            let pen = tv_penalty(&st, &probes, TvVariant::L1).unwrap();
            let kl = crate::weighting::kl_env(&st, &assign).unwrap();
            let mut r_main = 0.0;
            for e in 0..2 {
                r_main += crate::weighting::env_weighted_sum(&st, e, &probes.d);
            }
            (pen.value, kl, r_main / 2.0)
        };
        let (tv_a, kl_a, rm_a) = eval(&net);
        let (tv_b, kl_b, rm_b) = eval(&swapped_net);
        assert!((tv_a - tv_b).abs() <= 1e-12);
        assert!((kl_a - kl_b).abs() <= 1e-12);
        assert!((rm_a - rm_b).abs() <= 1e-12);
    }
}
