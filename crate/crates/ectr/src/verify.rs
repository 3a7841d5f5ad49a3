//! Oracle and invariant check suites: the closed-form-versus-brute-force
//! comparison, finite-difference validation of every player's gradient,
//! normalization and environment-isolation invariants, the KL detach rule
//! with its mutation control, reduction checks against plain baselines,
//! and the two KL-coefficient endpoint behaviors.
//!
//! The `verify` subcommand runs these; the acceptance test suite asserts
//! them at the pinned tolerances.

use std::time::Instant;

use crate::data::{generate_simulation, Batch, SimulationSpec};
use crate::envinfer::{inner_gradient, EnvInferenceNet, InnerState};
use crate::invariance::{probe_batch, tv_penalty, TvVariant};
use crate::numerics::{backprop, forward, DenseMatrix, LossSpec, Rng};
use crate::trainer::{
    compute_batch_state, init_players, phi_upstream, theta_score_grad, train_with_players, Method,
    Players, StepSizes, TrainConfig,
};
use crate::weighting::{
    brute_force_kl_dro, condition_on_envs, gibbs_tail_distribution, global_softmax,
    kl_dro_optimal_value, kl_env_per_env, EnvAssignment, ScoreInputs, TailAdversary,
    DEFAULT_EPSILON,
};

/// Outcome of one check suite.
#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

impl CheckResult {
    pub fn line(&self) -> String {
        format!(
            "[{}] {}: {} ({:.2}s)",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.detail,
            self.seconds
        )
    }
}

/// Options for the verify suites.
#[derive(Debug, Clone)]
pub struct VerifyOptions {
    /// Relative tolerance for the finite-difference checks.
    pub fd_tolerance: f64,
    /// Mutation control: leak the KL gradient into the inference player so
    /// the detach check demonstrably fails.
    pub inject_kl_detach_violation: bool,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions {
            fd_tolerance: 1e-4,
            inject_kl_detach_violation: false,
        }
    }
}

/// The five verification suites, in dependency order.
pub fn run_all(opts: &VerifyOptions) -> Vec<CheckResult> {
    vec![
        check_gibbs_oracle(),
        check_gradient_suite(opts.fd_tolerance),
        check_normalization(),
        check_detach(opts.inject_kl_detach_violation),
        check_reductions(),
    ]
}

/// Closed-form Gibbs distribution against the brute-force maximizer over 50
/// random instances, and the objective against the analytic log-sum-exp.
pub fn check_gibbs_oracle() -> CheckResult {
    let started = Instant::now();
    let mut rng = Rng::new(0x61bb5);
    let mut worst_linf: f64 = 0.0;
    let mut worst_obj: f64 = 0.0;
    for trial in 0..50 {
        let n = 2 + trial % 3;
        let losses: Vec<f64> = (0..n).map(|_| rng.uniform(-1.0, 2.0)).collect();
        let base = rng.simplex(n);
        let beta = [0.1, 1.0, 10.0][rng.below(3)];
        let gibbs = gibbs_tail_distribution(&losses, &base, beta).unwrap();
        let (bf, bf_obj) = brute_force_kl_dro(&losses, &base, beta, 200).unwrap();
        for (g, b) in gibbs.iter().zip(&bf) {
            worst_linf = worst_linf.max((g - b).abs());
        }
        let analytic = kl_dro_optimal_value(&losses, &base, beta).unwrap();
        worst_obj = worst_obj.max((bf_obj - analytic).abs());
    }
    let seconds = started.elapsed().as_secs_f64();
    CheckResult {
        name: "gibbs_oracle",
        passed: worst_linf <= 1e-3 && worst_obj <= 1e-6 && seconds < 30.0,
        detail: format!("max Linf {worst_linf:.2e} (tol 1e-3), max objective gap {worst_obj:.2e} (tol 1e-6)"),
        seconds,
    }
}

struct GradePoint {
    players: Players,
    inference: EnvInferenceNet,
    batch: Batch,
    cfg: TrainConfig,
}

/// Draws a random parameter point on a 2-env, 8-sample batch with a
/// width-4 one-hidden-layer predictor, rejecting points near the l1 kink
/// (any |g_e| < 1e-3, in both the hard-env and inferred-env weighting).
fn draw_grad_point(seed: u64) -> Option<GradePoint> {
    let ds = generate_simulation(&SimulationSpec {
        n_per_env: 4,
        seed,
        noise_std: 0.3,
        ..Default::default()
    })
    .ok()?;
    let batch = Batch::concat_envs(&ds.train_envs).ok()?;
    let mut local = Rng::new(seed ^ 0x9e37);
    let cfg = TrainConfig {
        method: Method::EctrKnown,
        hidden: vec![4],
        score_hidden: vec![4],
        tail_inputs: ScoreInputs::FeaturesPlusDetachedLoss,
        psi_init: local.uniform(-1.0, 1.0),
        beta: 0.5,
        seed,
        batch_size: 8,
        ..Default::default()
    };
    let mut rng = Rng::new(seed);
    let players = init_players(&ds, &cfg, &mut rng).ok()?;
    let inference = EnvInferenceNet::init(&[1, 4, 2], 1.0, &mut rng).ok()?;

    let state = compute_batch_state(&players, &batch, &cfg).ok()?;
    if state.penalty.per_env_g.iter().any(|g| g.abs() < 1e-3) {
        return None;
    }
    // Kink check under the inferred assignment as well.
    let aux = batch.aux.clone()?;
    let assign = crate::envinfer::infer_assignments(&inference, &aux).ok()?;
    let pi = global_softmax(&state.scores).ok()?;
    let wstate = condition_on_envs(&pi, &assign, DEFAULT_EPSILON).ok()?;
    let pen = tv_penalty(&wstate, &state.probes, TvVariant::L1).ok()?;
    if pen.per_env_g.iter().any(|g| g.abs() < 1e-3) {
        return None;
    }
    Some(GradePoint {
        players,
        inference,
        batch,
        cfg,
    })
}

/// Analytic gradients of all four players against central finite
/// differences (h = 1e-5) at 20 random kink-free points.
pub fn check_gradient_suite(tol: f64) -> CheckResult {
    let started = Instant::now();
    let h = 1e-5;
    let mut worst_rel: f64 = 0.0;
    let mut worst_label = String::new();
    let mut points = 0usize;
    let mut seed = 40_000u64;
    let mut attempts = 0usize;

    while points < 20 && attempts < 400 {
        attempts += 1;
        seed += 1;
        let Some(mut point) = draw_grad_point(seed) else { continue };
        points += 1;
        let mut track = |rel: f64, label: String| {
            if rel > worst_rel {
                worst_rel = rel;
                worst_label = label;
            }
        };

        let state = compute_batch_state(&point.players, &point.batch, &point.cfg).unwrap();

        // Predictor: the analytic gradient treats the score input as
        // detached, so the FD target freezes the scores at their base values.
        let upstream = phi_upstream(&state, &point.players, &point.cfg);
        let phi_grads = backprop(&point.players.predictor, &state.cache, &upstream).unwrap();
        let mut frozen = point.players.clone();
        frozen.tail = TailAdversary::FreeScores {
            scores: state.scores.clone(),
        };
        for p in 0..frozen.predictor.num_params() {
            let orig = frozen.predictor.get_flat(p);
            frozen.predictor.set_flat(p, orig + h);
            let up = compute_batch_state(&frozen, &point.batch, &point.cfg)
                .unwrap()
                .breakdown
                .total;
            frozen.predictor.set_flat(p, orig - h);
            let dn = compute_batch_state(&frozen, &point.batch, &point.cfg)
                .unwrap()
                .breakdown
                .total;
            frozen.predictor.set_flat(p, orig);
            let fd = (up - dn) / (2.0 * h);
            let analytic = phi_grads.get_flat(p);
            let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1.0);
            track(rel, format!("phi[{p}] point {seed}"));
        }

        // Tail adversary: scores through the score network.
        let score_grad = theta_score_grad(&state, &point.cfg);
        let mut up_mat = DenseMatrix::zeros(score_grad.len(), 1);
        for (i, g) in score_grad.iter().enumerate() {
            up_mat.set(i, 0, *g);
        }
        let (theta_grads, n_theta) = match &point.players.tail {
            TailAdversary::ScoreNetwork { net, .. } => {
                let cache = state.score_cache.as_ref().unwrap();
                (backprop(net, cache, &up_mat).unwrap(), net.num_params())
            }
            TailAdversary::FreeScores { .. } => unreachable!("suite uses a score network"),
        };
        fn set_theta(players: &mut Players, p: usize, v: f64) {
            if let TailAdversary::ScoreNetwork { net, .. } = &mut players.tail {
                net.set_flat(p, v);
            }
        }
        fn get_theta(players: &Players, p: usize) -> f64 {
            match &players.tail {
                TailAdversary::ScoreNetwork { net, .. } => net.get_flat(p),
                TailAdversary::FreeScores { .. } => unreachable!(),
            }
        }
        for p in 0..n_theta {
            let orig = get_theta(&point.players, p);
            set_theta(&mut point.players, p, orig + h);
            let up = compute_batch_state(&point.players, &point.batch, &point.cfg)
                .unwrap()
                .breakdown
                .total;
            set_theta(&mut point.players, p, orig - h);
            let dn = compute_batch_state(&point.players, &point.batch, &point.cfg)
                .unwrap()
                .breakdown
                .total;
            set_theta(&mut point.players, p, orig);
            let fd = (up - dn) / (2.0 * h);
            let analytic = theta_grads.get_flat(p);
            let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1.0);
            track(rel, format!("theta[{p}] point {seed}"));
        }

        // Invariance dual.
        {
            let analytic = point.players.dual.lambda_grad() * state.penalty.value;
            let orig = point.players.dual.psi;
            point.players.dual.psi = orig + h;
            let up = compute_batch_state(&point.players, &point.batch, &point.cfg)
                .unwrap()
                .breakdown
                .total;
            point.players.dual.psi = orig - h;
            let dn = compute_batch_state(&point.players, &point.batch, &point.cfg)
                .unwrap()
                .breakdown
                .total;
            point.players.dual.psi = orig;
            let fd = (up - dn) / (2.0 * h);
            let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1.0);
            track(rel, format!("psi point {seed}"));
        }

        // Inference adversary on its inner objective.
        {
            let aux = point.batch.aux.clone().unwrap();
            let pi = global_softmax(&state.scores).unwrap();
            let istate = InnerState {
                aux: &aux,
                pi_global: &pi,
                probes: &state.probes,
                variant: TvVariant::L1,
                epsilon: DEFAULT_EPSILON,
            };
            let (eta_grads, _) = inner_gradient(&point.inference, &istate, None).unwrap();
            for p in 0..point.inference.net().num_params() {
                let orig = point.inference.net().get_flat(p);
                point.inference.net_mut().set_flat(p, orig + h);
                let up = inner_gradient(&point.inference, &istate, None).unwrap().1;
                point.inference.net_mut().set_flat(p, orig - h);
                let dn = inner_gradient(&point.inference, &istate, None).unwrap().1;
                point.inference.net_mut().set_flat(p, orig);
                let fd = (up - dn) / (2.0 * h);
                let analytic = eta_grads.get_flat(p);
                let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1.0);
                track(rel, format!("eta[{p}] point {seed}"));
            }
        }
    }

    let seconds = started.elapsed().as_secs_f64();
    CheckResult {
        name: "gradient_suite",
        passed: points == 20 && worst_rel <= tol && seconds < 60.0,
        detail: format!("{points}/20 points, worst rel err {worst_rel:.2e} at {worst_label} (tol {tol:.0e})"),
        seconds,
    }
}

/// Simplex normalization over 1000 random weight states, exact-zero KL at
/// uniform conditionals, nonnegativity, and environment isolation.
pub fn check_normalization() -> CheckResult {
    let started = Instant::now();
    let mut rng = Rng::new(0x57a7e);
    let mut worst_sum_err: f64 = 0.0;
    let mut min_kl = f64::MAX;
    let mut failures = Vec::new();

    for trial in 0..1000 {
        let n = 4 + rng.below(13);
        let n_envs = 1 + rng.below(3);
        let scores: Vec<f64> = (0..n).map(|_| rng.uniform(-4.0, 4.0)).collect();
        let assign = if rng.bernoulli(0.5) {
            EnvAssignment::hard((0..n).map(|_| rng.below(n_envs)).collect(), n_envs).unwrap()
        } else {
            let mut m = DenseMatrix::zeros(n, n_envs);
            for i in 0..n {
                let row = rng.simplex(n_envs);
                for (e, v) in row.iter().enumerate() {
                    m.set(i, e, *v);
                }
            }
            EnvAssignment::soft(m).unwrap()
        };
        let pi = global_softmax(&scores).unwrap();
        let state = condition_on_envs(&pi, &assign, DEFAULT_EPSILON).unwrap();
        for e in 0..n_envs {
            if !state.is_used(e) {
                continue;
            }
            let s: f64 = (0..n).map(|i| state.pi_cond.get(i, e)).sum();
            let err = (s - 1.0).abs();
            worst_sum_err = worst_sum_err.max(err);
            if err > 1e-9 {
                failures.push(format!("trial {trial}: column sum off by {err:.2e}"));
            }
        }
        let kl = crate::weighting::kl_env(&state, &assign).unwrap();
        min_kl = min_kl.min(kl);
        if kl < 0.0 {
            failures.push(format!("trial {trial}: negative KL {kl}"));
        }
    }

    // Exact zero at uniform conditionals.
    {
        let assign = EnvAssignment::hard(vec![0, 0, 0, 1, 1], 2).unwrap();
        let mut pi_cond = DenseMatrix::zeros(5, 2);
        for e in 0..2 {
            for (i, b) in assign.uniform_base(e).unwrap().iter().enumerate() {
                pi_cond.set(i, e, *b);
            }
        }
        let state = crate::weighting::WeightState {
            pi_global: vec![0.2; 5],
            mass: vec![0.6, 0.4],
            pi_cond,
            degenerate: vec![false, false],
            epsilon: DEFAULT_EPSILON,
            kl_env: 0.0,
        };
        let kl = crate::weighting::kl_env(&state, &assign).unwrap();
        if kl != 0.0 {
            failures.push(format!("uniform conditionals gave KL {kl}, expected exactly 0"));
        }
    }

    // Environment isolation under hard assignments.
    {
        let mut iso_worst: f64 = 0.0;
        for trial in 0..50 {
            let mut r = Rng::new(5000 + trial);
            let n = 10;
            let ids: Vec<usize> = (0..n).map(|i| usize::from(i >= 5)).collect();
            let assign = EnvAssignment::hard(ids, 2).unwrap();
            let scores: Vec<f64> = (0..n).map(|_| r.uniform(-2.0, 2.0)).collect();
            let mut perturbed = scores.clone();
            for s in perturbed.iter_mut().skip(5) {
                *s += r.uniform(-3.0, 3.0);
            }
            let a = condition_on_envs(&global_softmax(&scores).unwrap(), &assign, DEFAULT_EPSILON).unwrap();
            let b = condition_on_envs(&global_softmax(&perturbed).unwrap(), &assign, DEFAULT_EPSILON).unwrap();
            for i in 0..n {
                iso_worst = iso_worst.max((a.pi_cond.get(i, 0) - b.pi_cond.get(i, 0)).abs());
            }
        }
        if iso_worst > 1e-9 {
            failures.push(format!("environment isolation drift {iso_worst:.2e}"));
        }
    }

    let seconds = started.elapsed().as_secs_f64();
    CheckResult {
        name: "normalization",
        passed: failures.is_empty(),
        detail: if failures.is_empty() {
            format!("1000 states: max column-sum error {worst_sum_err:.2e}, min KL {min_kl:.2e}")
        } else {
            failures.join("; ")
        },
        seconds,
    }
}

/// The detach rule: the gradient the inference player trains on carries an
/// identically-zero KL contribution, and matches finite differences of the
/// TV penalty alone. With the violation hook the check must fail.
pub fn check_detach(violate_kl_detach: bool) -> CheckResult {
    let started = Instant::now();
    let mut rng = Rng::new(0xde7ac);
    let mut max_kl_component: f64 = 0.0;
    let mut max_fd_rel: f64 = 0.0;
    let beta = 0.5;

    for trial in 0..10 {
        let ds = generate_simulation(&SimulationSpec {
            n_per_env: 4,
            seed: 900 + trial,
            noise_std: 0.3,
            ..Default::default()
        })
        .unwrap();
        let batch = Batch::concat_envs(&ds.train_envs).unwrap();
        let mut net = EnvInferenceNet::init(&[1, 4, 2], 1.0, &mut rng).unwrap();
        let predictor_cfg = TrainConfig {
            method: Method::EctrKnown,
            hidden: vec![4],
            seed: 700 + trial,
            ..Default::default()
        };
        let mut prng = Rng::new(predictor_cfg.seed);
        let players = init_players(&ds, &predictor_cfg, &mut prng).unwrap();
        let (logits, _) = forward(&players.predictor, &batch.features).unwrap();
        let probes = probe_batch(LossSpec::BceWithLogit, &logits, &batch.labels).unwrap();
        let scores: Vec<f64> = (0..batch.len()).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let pi = global_softmax(&scores).unwrap();
        let aux = batch.aux.clone().unwrap();
        let istate = InnerState {
            aux: &aux,
            pi_global: &pi,
            probes: &probes,
            variant: TvVariant::L1,
            epsilon: DEFAULT_EPSILON,
        };

        // The gradient the training path applies (the hook corrupts it).
        let leak = if violate_kl_detach { Some(beta) } else { None };
        let (used, _) = inner_gradient(&net, &istate, leak).unwrap();
        // Pure TV-penalty gradient.
        let (reference, _) = inner_gradient(&net, &istate, None).unwrap();
        for (a, b) in used.tensors().iter().zip(reference.tensors().iter()) {
            for (x, y) in a.iter().zip(b.iter()) {
                max_kl_component = max_kl_component.max((x - y).abs());
            }
        }

        // Cross-check the reference against finite differences of P_TV.
        let h = 1e-6;
        for p in 0..net.net().num_params() {
            let orig = net.net().get_flat(p);
            net.net_mut().set_flat(p, orig + h);
            let up = inner_gradient(&net, &istate, None).unwrap().1;
            net.net_mut().set_flat(p, orig - h);
            let dn = inner_gradient(&net, &istate, None).unwrap().1;
            net.net_mut().set_flat(p, orig);
            let fd = (up - dn) / (2.0 * h);
            let analytic = reference.get_flat(p);
            let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1.0);
            max_fd_rel = max_fd_rel.max(rel);
        }
    }

    let seconds = started.elapsed().as_secs_f64();
    CheckResult {
        name: "detach",
        passed: max_kl_component == 0.0 && max_fd_rel <= 1e-4,
        detail: format!(
            "KL contribution to eta gradient: max |component| {max_kl_component:.2e} (must be 0); P_TV gradient fd rel err {max_fd_rel:.2e}"
        ),
        seconds,
    }
}

/// Reduction checks: (a) the degenerate game configuration reproduces the
/// plain ERM trajectory bit for bit; (b) inferred mode frozen at one-hot
/// truth reproduces the known-environment run; (c) uniform weights make the
/// TV penalty equal the unweighted per-environment formulation.
pub fn check_reductions() -> CheckResult {
    let started = Instant::now();
    let mut failures: Vec<String> = Vec::new();

    // (a) beta -> infinity limit with lambda forced to zero, uniform frozen
    // free scores: parameter trajectories must match ERM exactly.
    {
        let ds = generate_simulation(&SimulationSpec {
            n_per_env: 4,
            seed: 77,
            ..Default::default()
        })
        .unwrap();
        for epochs in [1usize, 3, 5] {
            let erm_cfg = TrainConfig {
                method: Method::Erm,
                epochs,
                batch_size: 8,
                ..Default::default()
            };
            let ectr_cfg = TrainConfig {
                method: Method::EctrKnown,
                epochs,
                batch_size: 8,
                free_scores: true,
                beta: 1e9,
                psi_init: -1000.0,
                step_sizes: StepSizes {
                    theta: 0.0,
                    psi: 0.0,
                    ..Default::default()
                },
                ..Default::default()
            };
            let (_, erm_players) = train_with_players(&ds, &erm_cfg).unwrap();
            let (_, ectr_players) = train_with_players(&ds, &ectr_cfg).unwrap();
            let mut max_diff = 0.0f64;
            for p in 0..erm_players.predictor.num_params() {
                let a = erm_players.predictor.get_flat(p);
                let b = ectr_players.predictor.get_flat(p);
                if a.to_bits() != b.to_bits() {
                    max_diff = max_diff.max((a - b).abs().max(1e-300));
                }
            }
            if max_diff > 0.0 {
                failures.push(format!("(a) epochs {epochs}: trajectories diverged by {max_diff:.2e}"));
            }
        }
    }

    // (b) inferred mode frozen at the one-hot truth vs known environments.
    {
        let ds = generate_simulation(&SimulationSpec {
            n_per_env: 4,
            seed: 78,
            ..Default::default()
        })
        .unwrap();
        let known_cfg = TrainConfig {
            method: Method::EctrKnown,
            epochs: 5,
            batch_size: 8,
            ..Default::default()
        };
        let frozen_cfg = TrainConfig {
            method: Method::EctrInferred,
            freeze_assignments_to_truth: true,
            epochs: 5,
            batch_size: 8,
            ..Default::default()
        };
        let (known_report, known_players) = train_with_players(&ds, &known_cfg).unwrap();
        let (frozen_report, frozen_players) = train_with_players(&ds, &frozen_cfg).unwrap();
        let mut max_diff = 0.0f64;
        for (a, b) in known_report.trace.iter().zip(&frozen_report.trace) {
            max_diff = max_diff.max((a.total - b.total).abs());
        }
        for p in 0..known_players.predictor.num_params() {
            max_diff = max_diff.max(
                (known_players.predictor.get_flat(p) - frozen_players.predictor.get_flat(p)).abs(),
            );
        }
        if max_diff > 1e-10 {
            failures.push(format!("(b) frozen-truth run diverged by {max_diff:.2e} (tol 1e-10)"));
        }
    }

    // (c) uniform-weight TV penalty equals the unweighted per-environment
    // formulation computed directly.
    {
        let mut rng = Rng::new(0xc0de);
        let mut worst = 0.0f64;
        for _ in 0..20 {
            let n = 6 + 2 * rng.below(4);
            let n_envs = 2 + rng.below(2);
            let ids: Vec<usize> = (0..n).map(|i| i % n_envs).collect();
            let d: Vec<f64> = (0..n).map(|_| rng.uniform(-2.0, 2.0)).collect();
            let assign = EnvAssignment::hard(ids.clone(), n_envs).unwrap();
            let pi = vec![1.0 / n as f64; n];
            let state = condition_on_envs(&pi, &assign, DEFAULT_EPSILON).unwrap();
            let probes = crate::invariance::ProbeRecord {
                d: d.clone(),
                dgrad_f: DenseMatrix::zeros(n, 1),
                losses: vec![0.0; n],
                loss_grad: DenseMatrix::zeros(n, 1),
            };
            let pen = tv_penalty(&state, &probes, TvVariant::L1).unwrap();
            let mut direct = 0.0;
            for e in 0..n_envs {
                let members: Vec<usize> = (0..n).filter(|&i| ids[i] == e).collect();
                let g: f64 = members.iter().map(|&i| d[i]).sum::<f64>() / members.len() as f64;
                direct += g.abs();
            }
            direct /= n_envs as f64;
            worst = worst.max((pen.value - direct).abs());
        }
        if worst > 1e-12 {
            failures.push(format!("(c) uniform-weight TV mismatch {worst:.2e} (tol 1e-12)"));
        }
    }

    let seconds = started.elapsed().as_secs_f64();
    CheckResult {
        name: "reductions",
        passed: failures.is_empty(),
        detail: if failures.is_empty() {
            "erm trajectory exact; frozen-truth run within 1e-10; uniform TV within 1e-12".to_string()
        } else {
            failures.join("; ")
        },
        seconds,
    }
}

/// Ascent of a free-score tail adversary on fixed losses, used by the
/// KL-coefficient endpoint checks: returns the final per-environment
/// weighted risks.
pub fn free_score_ascent(
    losses: &[f64],
    ids: &[usize],
    n_envs: usize,
    beta: f64,
    alpha: f64,
    steps: usize,
) -> Vec<f64> {
    let n = losses.len();
    let assign = EnvAssignment::hard(ids.to_vec(), n_envs).unwrap();
    let mut scores = vec![0.0; n];
    let mut r_envs = vec![0.0; n_envs];
    for _ in 0..steps {
        let pi = global_softmax(&scores).unwrap();
        let state = condition_on_envs(&pi, &assign, DEFAULT_EPSILON).unwrap();
        let used = state.used_envs().max(1) as f64;
        let kl_per_env = kl_env_per_env(&state, &assign).unwrap();
        let mut grad = vec![0.0; n];
        for e in 0..n_envs {
            if !state.is_used(e) {
                continue;
            }
            let r = crate::weighting::env_weighted_sum(&state, e, losses);
            r_envs[e] = r;
            crate::weighting::add_score_grad(&mut grad, &state, e, losses, r, 1.0 / used);
            if beta != 0.0 {
                let base = assign.uniform_base(e).unwrap();
                let ln_ratio: Vec<f64> = (0..n)
                    .map(|i| {
                        let c = state.pi_cond.get(i, e);
                        if c > 0.0 && base[i] > 0.0 {
                            (c / base[i]).ln()
                        } else {
                            0.0
                        }
                    })
                    .collect();
                crate::weighting::add_score_grad(
                    &mut grad,
                    &state,
                    e,
                    &ln_ratio,
                    kl_per_env[e],
                    -beta / used,
                );
            }
        }
        for (s, g) in scores.iter_mut().zip(&grad) {
            *s += alpha * g;
        }
    }
    r_envs
}

/// The two KL-coefficient endpoints on fixed losses: a huge coefficient
/// drives each weighted risk to the per-environment mean, a vanishing one
/// to the per-environment max.
pub fn check_remark1_endpoints() -> CheckResult {
    let started = Instant::now();
    let mut rng = Rng::new(0x2e31);
    let n_envs = 2;
    let ids = vec![0, 0, 0, 0, 1, 1, 1, 1];
    let losses: Vec<f64> = (0..8).map(|_| rng.uniform(0.0, 2.0)).collect();
    let mut mean_e = vec![0.0; n_envs];
    let mut max_e = vec![f64::MIN; n_envs];
    let mut counts = vec![0.0; n_envs];
    for (i, &l) in losses.iter().enumerate() {
        mean_e[ids[i]] += l;
        counts[ids[i]] += 1.0;
        max_e[ids[i]] = max_e[ids[i]].max(l);
    }
    for (m, c) in mean_e.iter_mut().zip(&counts) {
        *m /= c;
    }

    let r_mean = free_score_ascent(&losses, &ids, n_envs, 1e6, 5e-6, 300);
    let mut mean_err: f64 = 0.0;
    for e in 0..n_envs {
        mean_err = mean_err.max((r_mean[e] - mean_e[e]).abs());
    }

    let r_max = free_score_ascent(&losses, &ids, n_envs, 1e-6, 20.0, 4000);
    let mut max_err: f64 = 0.0;
    for e in 0..n_envs {
        max_err = max_err.max((r_max[e] - max_e[e]).abs());
    }

    let seconds = started.elapsed().as_secs_f64();
    CheckResult {
        name: "remark1_endpoints",
        passed: mean_err <= 1e-4 && max_err <= 1e-3 && seconds < 30.0,
        detail: format!(
            "beta 1e6: max |R_e - mean_e| {mean_err:.2e} (tol 1e-4); beta 1e-6: max |R_e - max_e| {max_err:.2e} (tol 1e-3)"
        ),
        seconds,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_suites_pass_on_a_fresh_build() {
        for check in run_all(&VerifyOptions::default()) {
            assert!(check.passed, "{}", check.line());
        }
    }

    #[test]
    fn detach_check_fails_under_the_violation_hook() {
        let check = check_detach(true);
        assert!(!check.passed, "mutation control did not trip: {}", check.line());
    }

    #[test]
    fn tightened_tolerance_fails_gradient_suite() {
        let check = check_gradient_suite(1e-12);
        assert!(!check.passed, "1e-12 tolerance should be unattainable for fd checks");
    }

    #[test]
    fn remark1_endpoints_hold() {
        let check = check_remark1_endpoints();
        assert!(check.passed, "{}", check.line());
    }

    #[test]
    fn beta_zero_ascent_reaches_per_env_max() {
        let losses = vec![0.3, 1.1, 0.7, 0.2, 1.9, 0.5];
        let ids = vec![0, 0, 0, 1, 1, 1];
        let r = free_score_ascent(&losses, &ids, 2, 0.0, 20.0, 4000);
        assert!((r[0] - 1.1).abs() <= 1e-3, "env 0 risk {}", r[0]);
        assert!((r[1] - 1.9).abs() <= 1e-3, "env 1 risk {}", r[1]);
    }
}
