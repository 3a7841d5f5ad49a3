//! Per-sample losses on logits, exposing value, gradient, and
//! Hessian-vector product so the scale-probe derivatives have closed forms.

use crate::error::{Error, Result};

/// Loss family. Values, gradients, and HVPs are all taken with respect to
/// the logit vector `z`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossSpec {
    /// Squared error `(z - y)^2` on a single logit.
    Mse,
    /// `ln(1 + e^z) - y z` on a single logit, `y` in {0, 1}.
    BceWithLogit,
    /// `logsumexp(z) - z_y` over class logits, `y` a class index.
    CrossEntropy,
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn check_label(spec: LossSpec, logits: &[f64], label: f64) -> Result<()> {
    match spec {
        LossSpec::Mse | LossSpec::BceWithLogit => {
            if logits.len() != 1 {
                return Err(Error::shape(format!(
                    "{spec:?} expects a single logit, got {}",
                    logits.len()
                )));
            }
            if spec == LossSpec::BceWithLogit && label != 0.0 && label != 1.0 {
                return Err(Error::input(format!("binary label must be 0 or 1, got {label}")));
            }
        }
        LossSpec::CrossEntropy => {
            let k = label as usize;
            if label < 0.0 || label.fract() != 0.0 || k >= logits.len() {
                return Err(Error::input(format!(
                    "class label {label} invalid for {} logits",
                    logits.len()
                )));
            }
        }
    }
    Ok(())
}

/// Loss value at `z = logits`.
pub fn loss_value(spec: LossSpec, logits: &[f64], label: f64) -> Result<f64> {
    check_label(spec, logits, label)?;
    Ok(match spec {
        LossSpec::Mse => {
            let r = logits[0] - label;
            r * r
        }
        LossSpec::BceWithLogit => softplus(logits[0]) - label * logits[0],
        LossSpec::CrossEntropy => {
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + logits.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
            lse - logits[label as usize]
        }
    })
}

/// Value, gradient `∇_z ℓ`, and Hessian-vector product `H_z ℓ · v` in one pass.
pub fn loss_value_grad_hvp(
    spec: LossSpec,
    logits: &[f64],
    label: f64,
    v: &[f64],
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    check_label(spec, logits, label)?;
    if v.len() != logits.len() {
        return Err(Error::shape(format!(
            "hvp direction length {} does not match {} logits",
            v.len(),
            logits.len()
        )));
    }
    let out = match spec {
        LossSpec::Mse => {
            let r = logits[0] - label;
            (r * r, vec![2.0 * r], vec![2.0 * v[0]])
        }
        LossSpec::BceWithLogit => {
            let z = logits[0];
            let p = sigmoid(z);
            let value = softplus(z) - label * z;
            (value, vec![p - label], vec![p * (1.0 - p) * v[0]])
        }
        LossSpec::CrossEntropy => {
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
            let sum: f64 = exps.iter().sum();
            let p: Vec<f64> = exps.iter().map(|e| e / sum).collect();
            let value = m + sum.ln() - logits[label as usize];
            let mut grad = p.clone();
            grad[label as usize] -= 1.0;
            // H = diag(p) - p p^T, so Hv = p∘v - p (p·v).
            let pv: f64 = p.iter().zip(v).map(|(pi, vi)| pi * vi).sum();
            let hvp: Vec<f64> = p.iter().zip(v).map(|(pi, vi)| pi * (vi - pv)).collect();
            (value, grad, hvp)
        }
    };
    for g in out.1.iter().chain(out.2.iter()) {
        if !g.is_finite() {
            return Err(Error::numeric("loss", "non-finite loss derivative"));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    // Central finite differences of the loss value.
    fn fd_grad(spec: LossSpec, logits: &[f64], label: f64) -> Vec<f64> {
        let h = 1e-5;
        let mut g = vec![0.0; logits.len()];
        let mut z = logits.to_vec();
        for k in 0..z.len() {
            let orig = z[k];
            z[k] = orig + h;
            let up = loss_value(spec, &z, label).unwrap();
            z[k] = orig - h;
            let dn = loss_value(spec, &z, label).unwrap();
            z[k] = orig;
            g[k] = (up - dn) / (2.0 * h);
        }
        g
    }

    // Central finite differences of the gradient along direction v.
    fn fd_hvp(spec: LossSpec, logits: &[f64], label: f64, v: &[f64]) -> Vec<f64> {
        let h = 1e-5;
        let plus: Vec<f64> = logits.iter().zip(v).map(|(z, vi)| z + h * vi).collect();
        let minus: Vec<f64> = logits.iter().zip(v).map(|(z, vi)| z - h * vi).collect();
        let gp = loss_value_grad_hvp(spec, &plus, label, v).unwrap().1;
        let gm = loss_value_grad_hvp(spec, &minus, label, v).unwrap().1;
        gp.iter().zip(&gm).map(|(a, b)| (a - b) / (2.0 * h)).collect()
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1.0)
    }

    #[test]
    fn mse_symbolic_values() {
        let (v, g, h) = loss_value_grad_hvp(LossSpec::Mse, &[2.0], 1.0, &[1.0]).unwrap();
        assert_eq!(v, 1.0);
        assert_eq!(g, vec![2.0]);
        assert_eq!(h, vec![2.0]);
    }

    #[test]
    fn bce_symbolic_values() {
        let (v, g, h) = loss_value_grad_hvp(LossSpec::BceWithLogit, &[0.0], 1.0, &[1.0]).unwrap();
        assert!((v - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((g[0] - (-0.5)).abs() < 1e-15);
        assert!((h[0] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_two_class_symmetric() {
        let (v, g, _) =
            loss_value_grad_hvp(LossSpec::CrossEntropy, &[0.0, 0.0], 0.0, &[1.0, 0.0]).unwrap();
        assert!((v - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((g[0] + 0.5).abs() < 1e-15);
        assert!((g[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn zero_direction_gives_zero_hvp() {
        for spec in [LossSpec::Mse, LossSpec::BceWithLogit] {
            let (_, _, h) = loss_value_grad_hvp(spec, &[0.7], 1.0, &[0.0]).unwrap();
            assert_eq!(h, vec![0.0]);
        }
        let (_, _, h) =
            loss_value_grad_hvp(LossSpec::CrossEntropy, &[0.3, -0.2, 0.9], 2.0, &[0.0; 3]).unwrap();
        assert_eq!(h, vec![0.0; 3]);
    }

    #[test]
    fn invalid_labels_rejected() {
        assert!(loss_value(LossSpec::BceWithLogit, &[0.0], 0.5).is_err());
        assert!(loss_value(LossSpec::CrossEntropy, &[0.0, 0.0], 2.0).is_err());
        assert!(loss_value(LossSpec::Mse, &[0.0, 0.0], 1.0).is_err());
    }

    #[test]
    fn derivatives_match_finite_differences_over_random_draws() {
        let mut rng = Rng::new(1234);
        for trial in 0..120 {
            let (spec, logits, label) = match trial % 3 {
                0 => (LossSpec::Mse, vec![rng.uniform(-3.0, 3.0)], rng.uniform(-2.0, 2.0)),
                1 => (
                    LossSpec::BceWithLogit,
                    vec![rng.uniform(-3.0, 3.0)],
                    if rng.bernoulli(0.5) { 1.0 } else { 0.0 },
                ),
                _ => {
                    let k = 2 + rng.below(4);
                    let logits: Vec<f64> = (0..k).map(|_| rng.uniform(-3.0, 3.0)).collect();
                    (LossSpec::CrossEntropy, logits, rng.below(k) as f64)
                }
            };
            let v: Vec<f64> = (0..logits.len()).map(|_| rng.uniform(-1.0, 1.0)).collect();
            let (_, grad, hvp) = loss_value_grad_hvp(spec, &logits, label, &v).unwrap();
            let fg = fd_grad(spec, &logits, label);
            let fh = fd_hvp(spec, &logits, label, &v);
            for (a, b) in grad.iter().zip(&fg) {
                assert!(rel_err(*a, *b) <= 1e-4, "{spec:?} grad {a} vs fd {b}");
            }
            for (a, b) in hvp.iter().zip(&fh) {
                assert!(rel_err(*a, *b) <= 1e-4, "{spec:?} hvp {a} vs fd {b}");
            }
        }
    }
}
