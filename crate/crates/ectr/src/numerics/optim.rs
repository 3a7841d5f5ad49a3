//! First-order optimizer steps over flat tensor views.
//!
//! Each minimax player owns one `Optimizer`; `Direction` selects descent or
//! ascent so the same machinery serves all of them.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Descent,
    Ascent,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimKind {
    Sgd,
    SgdMomentum { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimKind {
    pub fn adam_default() -> Self {
        OptimKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimKind,
    lr: f64,
    /// First-moment buffers (momentum / adam m), one per tensor.
    m: Vec<Vec<f64>>,
    /// Second-moment buffers (adam v).
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Optimizer {
    pub fn new(kind: OptimKind, lr: f64) -> Result<Self> {
        if !(lr > 0.0) {
            return Err(Error::config(format!("step size must be positive, got {lr}")));
        }
        Ok(Optimizer {
            kind,
            lr,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        })
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    fn ensure_buffers(&mut self, shapes: &[usize]) -> Result<()> {
        let needs_m = !matches!(self.kind, OptimKind::Sgd);
        let needs_v = matches!(self.kind, OptimKind::Adam { .. });
        if self.m.is_empty() && needs_m {
            self.m = shapes.iter().map(|&n| vec![0.0; n]).collect();
        }
        if self.v.is_empty() && needs_v {
            self.v = shapes.iter().map(|&n| vec![0.0; n]).collect();
        }
        if needs_m && (self.m.len() != shapes.len() || self.m.iter().map(Vec::len).ne(shapes.iter().copied())) {
            return Err(Error::shape("optimizer buffers do not match parameter shapes"));
        }
        if needs_v && (self.v.len() != shapes.len() || self.v.iter().map(Vec::len).ne(shapes.iter().copied())) {
            return Err(Error::shape("optimizer buffers do not match parameter shapes"));
        }
        Ok(())
    }

    /// One update over parallel parameter/gradient tensor lists.
    /// `player` labels numeric failures with the offending player.
    pub fn step(
        &mut self,
        params: &mut [&mut [f64]],
        grads: &[&[f64]],
        direction: Direction,
        player: &str,
    ) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::shape(format!(
                "{} parameter tensors but {} gradient tensors",
                params.len(),
                grads.len()
            )));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.len() != g.len() {
                return Err(Error::shape(format!(
                    "parameter tensor of {} entries got gradient of {}",
                    p.len(),
                    g.len()
                )));
            }
        }
        for g in grads {
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::numeric(player, "non-finite gradient"));
            }
        }
        let shapes: Vec<usize> = params.iter().map(|p| p.len()).collect();
        self.ensure_buffers(&shapes)?;
        self.t += 1;
        let sign = match direction {
            Direction::Descent => -1.0,
            Direction::Ascent => 1.0,
        };
        match self.kind {
            OptimKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    for (pv, gv) in p.iter_mut().zip(*g) {
                        *pv += sign * self.lr * gv;
                    }
                }
            }
            OptimKind::SgdMomentum { momentum } => {
                for ((p, g), m) in params.iter_mut().zip(grads).zip(&mut self.m) {
                    for ((pv, gv), mv) in p.iter_mut().zip(*g).zip(m) {
                        *mv = momentum * *mv + gv;
                        *pv += sign * self.lr * *mv;
                    }
                }
            }
            OptimKind::Adam { beta1, beta2, eps } => {
                let bc1 = 1.0 - beta1.powi(self.t as i32);
                let bc2 = 1.0 - beta2.powi(self.t as i32);
                for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
                    for (((pv, gv), mv), vv) in p.iter_mut().zip(*g).zip(m.iter_mut()).zip(v.iter_mut()) {
                        *mv = beta1 * *mv + (1.0 - beta1) * gv;
                        *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
                        let mhat = *mv / bc1;
                        let vhat = *vv / bc2;
                        *pv += sign * self.lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_descent_arithmetic() {
        let mut opt = Optimizer::new(OptimKind::Sgd, 0.1).unwrap();
        let mut p = vec![1.0];
        opt.step(&mut [&mut p], &[&[2.0]], Direction::Descent, "phi").unwrap();
        assert!((p[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut opt = Optimizer::new(OptimKind::adam_default(), 0.1).unwrap();
        let mut p = vec![1.5, -2.5];
        opt.step(&mut [&mut p], &[&[0.0, 0.0]], Direction::Descent, "phi").unwrap();
        assert_eq!(p, vec![1.5, -2.5]);
    }

    #[test]
    fn sgd_ascent_then_descent_restores() {
        // Dyadic values so the float round trip is exact.
        let mut opt = Optimizer::new(OptimKind::Sgd, 0.125).unwrap();
        let mut p = vec![1.0, -0.5];
        let g = vec![2.0, 4.0];
        opt.step(&mut [&mut p], &[&g], Direction::Ascent, "theta").unwrap();
        opt.step(&mut [&mut p], &[&g], Direction::Descent, "theta").unwrap();
        assert_eq!(p, vec![1.0, -0.5]);
    }

    #[test]
    fn non_finite_gradient_names_player() {
        let mut opt = Optimizer::new(OptimKind::Sgd, 0.1).unwrap();
        let mut p = vec![1.0];
        let err = opt
            .step(&mut [&mut p], &[&[f64::NAN]], Direction::Descent, "psi")
            .unwrap_err();
        assert!(err.to_string().contains("psi"));
        assert_eq!(p, vec![1.0]);
    }

    #[test]
    fn adam_first_step_matches_formula() {
        let lr = 0.01;
        let (b1, b2, eps) = (0.9, 0.999, 1e-8);
        let mut opt = Optimizer::new(OptimKind::Adam { beta1: b1, beta2: b2, eps }, lr).unwrap();
        let g = 3.0;
        let mut p = vec![0.0];
        opt.step(&mut [&mut p], &[&[g]], Direction::Descent, "phi").unwrap();
        let mhat = (1.0 - b1) * g / (1.0 - b1);
        let vhat = (1.0 - b2) * g * g / (1.0 - b2);
        let expected = -lr * mhat / (vhat.sqrt() + eps);
        assert!((p[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn momentum_accumulates() {
        let mut opt = Optimizer::new(OptimKind::SgdMomentum { momentum: 0.5 }, 0.1).unwrap();
        let mut p = vec![0.0];
        opt.step(&mut [&mut p], &[&[1.0]], Direction::Descent, "phi").unwrap();
        assert!((p[0] + 0.1).abs() < 1e-15);
        opt.step(&mut [&mut p], &[&[1.0]], Direction::Descent, "phi").unwrap();
        // velocity = 0.5*1 + 1 = 1.5; p = -0.1 - 0.15
        assert!((p[0] + 0.25).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut opt = Optimizer::new(OptimKind::Sgd, 0.1).unwrap();
        let mut p = vec![1.0, 2.0];
        assert!(opt.step(&mut [&mut p], &[&[1.0]], Direction::Descent, "phi").is_err());
    }
}
