//! Update rules: plain gradient descent, AdamW with a cosine schedule, and
//! the two-evaluation SAM step.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::Mat;

/// A differentiable scalar function of a parameter matrix, returning the
/// value and the gradient.
pub trait Objective {
    fn eval(&self, x: &Mat) -> Result<(f64, Mat)>;
}

impl<F> Objective for F
where
    F: Fn(&Mat) -> Result<(f64, Mat)>,
{
    fn eval(&self, x: &Mat) -> Result<(f64, Mat)> {
        self(x)
    }
}

/// `θ − lr·g`.
pub fn gd_step(theta: &Mat, grad: &Mat, lr: f64) -> Result<Mat> {
    theta.add_scaled(grad, -lr)
}

/// Cosine decay from `base_lr` at step 0 to 0 at `total_steps`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CosineSchedule {
    pub base_lr: f64,
    pub total_steps: usize,
}

impl CosineSchedule {
    pub fn lr(&self, step: usize) -> f64 {
        if self.total_steps == 0 || step >= self.total_steps {
            return 0.0;
        }
        let frac = step as f64 / self.total_steps as f64;
        0.5 * self.base_lr * (1.0 + (std::f64::consts::PI * frac).cos())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Rule {
    Gd,
    Adamw,
    SamWrapped,
}

/// Optimizer state for one parameter matrix.
#[derive(Clone, Debug)]
pub struct OptState {
    pub rule: Rule,
    pub step: usize,
    pub schedule: CosineSchedule,
    pub adamw: AdamWConfig,
    m: Mat,
    v: Mat,
}

impl OptState {
    pub fn adamw(shape: (usize, usize), schedule: CosineSchedule, adamw: AdamWConfig) -> Self {
        Self {
            rule: Rule::Adamw,
            step: 0,
            schedule,
            adamw,
            m: Mat::zeros(shape.0, shape.1),
            v: Mat::zeros(shape.0, shape.1),
        }
    }

    /// Learning rate the next step will use.
    pub fn current_lr(&self) -> f64 {
        self.schedule.lr(self.step)
    }
}

/// One AdamW update with bias correction and decoupled weight decay; the
/// learning rate comes from the state's schedule at the current step.
pub fn adamw_step(state: &mut OptState, theta: &Mat, grad: &Mat) -> Result<Mat> {
    if !theta.same_shape(grad) || !theta.same_shape(&state.m) {
        return Err(Error::Shape("adamw: parameter, gradient and state shapes differ".into()));
    }
    let AdamWConfig { beta1, beta2, eps, weight_decay } = state.adamw;
    let lr = state.schedule.lr(state.step);
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);

    let mut out = theta.clone();
    let m = state.m.data_mut();
    let v = state.v.data_mut();
    for (i, (x, &g)) in out.data_mut().iter_mut().zip(grad.data()).enumerate() {
        m[i] = beta1 * m[i] + (1.0 - beta1) * g;
        v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        *x -= lr * weight_decay * *x;
        *x -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(out)
}

/// Result of a SAM step.
#[derive(Clone, Debug)]
pub struct SamOutcome {
    pub theta: Mat,
    /// Gradient at the starting point was zero; `theta` is unchanged.
    pub degenerate: bool,
    pub loss: f64,
    pub perturbation: Mat,
}

/// `θ' = θ − lr·∇L(θ + ε̂)` with `ε̂ = ρ·∇L(θ)/‖∇L(θ)‖`.
pub fn sam_step(theta: &Mat, objective: &impl Objective, lr: f64, rho: f64) -> Result<SamOutcome> {
    if !(rho >= 0.0) {
        return Err(Error::Config(format!("SAM rho must be >= 0, got {rho}")));
    }
    let (loss, g) = objective.eval(theta)?;
    let gnorm = g.frobenius();
    if gnorm == 0.0 {
        return Ok(SamOutcome {
            theta: theta.clone(),
            degenerate: true,
            loss,
            perturbation: Mat::zeros(theta.rows(), theta.cols()),
        });
    }
    if rho == 0.0 {
        return Ok(SamOutcome {
            theta: gd_step(theta, &g, lr)?,
            degenerate: false,
            loss,
            perturbation: Mat::zeros(theta.rows(), theta.cols()),
        });
    }
    let eps = g.scale(rho / gnorm);
    let (_, g_pert) = objective.eval(&theta.add(&eps)?)?;
    Ok(SamOutcome { theta: gd_step(theta, &g_pert, lr)?, degenerate: false, loss, perturbation: eps })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn half_sq(x: &Mat) -> Result<(f64, Mat)> {
        Ok((0.5 * x.frobenius_sq(), x.clone()))
    }

    #[test]
    fn gd_examples() {
        let th = Mat::row_vector(vec![1.0, -2.0]);
        assert_eq!(gd_step(&th, &Mat::zeros(1, 2), 0.3).unwrap(), th);
        assert_eq!(gd_step(&th, &th, 1.0).unwrap(), Mat::zeros(1, 2));
        // f = ‖θ‖², ∇f = 2θ: θ ← 0.8θ per step
        let mut x = Mat::row_vector(vec![1.0, 1.0]);
        for _ in 0..2 {
            let g = x.scale(2.0);
            x = gd_step(&x, &g, 0.1).unwrap();
        }
        assert!((x.data()[0] - 0.64).abs() < 1e-15 && (x.data()[1] - 0.64).abs() < 1e-15);
    }

    #[test]
    fn schedule_endpoints_and_monotone() {
        let s = CosineSchedule { base_lr: 0.01, total_steps: 100 };
        assert_eq!(s.lr(0), 0.01);
        assert_eq!(s.lr(100), 0.0);
        for i in 0..100 {
            assert!(s.lr(i + 1) <= s.lr(i));
        }
    }

    #[test]
    fn adamw_zero_gradient_is_identity() {
        let th = Mat::row_vector(vec![0.5, -1.0, 2.0]);
        let mut st = OptState::adamw((1, 3), CosineSchedule { base_lr: 0.1, total_steps: 10 }, AdamWConfig::default());
        let out = adamw_step(&mut st, &th, &Mat::zeros(1, 3)).unwrap();
        assert_eq!(out, th);
    }

    #[test]
    fn adamw_first_step_is_sign_like() {
        let th = Mat::zeros(1, 3);
        let g = Mat::row_vector(vec![3.0, -0.02, 500.0]);
        let mut st = OptState::adamw((1, 3), CosineSchedule { base_lr: 0.1, total_steps: 10 }, AdamWConfig::default());
        let out = adamw_step(&mut st, &th, &g).unwrap();
        for (o, gi) in out.data().iter().zip(g.data()) {
            assert!((o + 0.1 * gi.signum()).abs() < 1e-6, "{o}");
        }
    }

    #[test]
    fn sam_quadratic_example() {
        let th = Mat::row_vector(vec![1.0, 0.0]);
        let out = sam_step(&th, &half_sq, 1.0, 0.1).unwrap();
        assert!(!out.degenerate);
        assert!((out.perturbation.data()[0] - 0.1).abs() < 1e-15);
        assert!((out.theta.data()[0] + 0.1).abs() < 1e-15);
        assert_eq!(out.theta.data()[1], 0.0);
    }

    #[test]
    fn sam_zero_rho_is_gd_and_zero_grad_is_degenerate() {
        let th = Mat::row_vector(vec![0.3, -0.7]);
        let sam = sam_step(&th, &half_sq, 0.25, 0.0).unwrap();
        let gd = gd_step(&th, &th, 0.25).unwrap();
        assert_eq!(sam.theta, gd);
        let zero = Mat::zeros(1, 2);
        let out = sam_step(&zero, &half_sq, 1.0, 0.1).unwrap();
        assert!(out.degenerate);
        assert_eq!(out.theta, zero);
    }
}
