//! Scalar objectives over text features.
//!
//! Every loss has a tape form (returns a [`LossValue`] whose node can be
//! differentiated) and, where convenient, a plain value form on [`Mat`].

use serde::{Deserialize, Serialize};

use crate::encoder::{AugmentedViews, Prompt, SynthEncoder};
use crate::error::{Error, Result};
use crate::numkit::{Mat, Tape, Var, Vector};

/// Class probabilities for one image feature.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbVector {
    pub probs: Vec<f64>,
    pub tau: f64,
}

impl ProbVector {
    pub fn predicted(&self) -> usize {
        argmax(&self.probs)
    }

    pub fn confidence(&self) -> f64 {
        self.probs.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn entropy(&self) -> f64 {
        crate::numkit::entropy(&self.probs)
    }
}

/// A recorded scalar loss.
#[derive(Clone, Copy, Debug)]
pub struct LossValue {
    pub value: f64,
    pub node: Var,
}

impl LossValue {
    fn of(tape: &Tape, node: Var) -> Self {
        Self { value: tape.scalar(node), node }
    }
}

/// Which feature-geometry regularizer a regularized method adds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regularizer {
    /// Negative mean distance to the feature centroid.
    Ctpt,
    /// Squared Frobenius deviation of the Gram matrix from identity.
    Otpt,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Distance {
    /// Euclidean distance per row.
    L2,
    /// Squared Euclidean distance per row.
    SqL2,
    /// One minus cosine similarity per row.
    Cos,
}

pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Index of the class whose feature row has the highest cosine with `v`.
pub fn argmax_class(t: &Mat, v: &Vector) -> usize {
    let scores: Vec<f64> = (0..t.rows())
        .map(|k| t.row(k).iter().zip(v.as_slice()).map(|(a, b)| a * b).sum())
        .collect();
    argmax(&scores)
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidTemperature(tau))
    }
}

/// Temperature-scaled softmax over cosine similarities between `v` and the
/// rows of `t`.
pub fn predict(t: &Mat, v: &Vector, tau: f64) -> Result<ProbVector> {
    check_tau(tau)?;
    if t.cols() != v.len() {
        return Err(Error::Shape(format!("features are {}-dim, image is {}-dim", t.cols(), v.len())));
    }
    let vn = v.norm();
    let mut probs: Vec<f64> = (0..t.rows())
        .map(|k| {
            let row = t.row(k);
            let tn = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            let dot: f64 = row.iter().zip(v.as_slice()).map(|(a, b)| a * b).sum();
            dot / (tn * vn) / tau
        })
        .collect();
    crate::numkit::softmax_in_place(&mut probs);
    Ok(ProbVector { probs, tau })
}

/// Number of views kept for a selection fraction.
pub fn selected_count(n: usize, select_frac: f64) -> usize {
    ((select_frac * n as f64 - 1e-9).ceil() as usize).clamp(1, n)
}

/// Entropy-minimization loss: entropy of the probability vector averaged over
/// the `⌈select_frac·N⌉` lowest-entropy views.
pub fn em_loss(
    tape: &mut Tape,
    t: Var,
    views: &AugmentedViews,
    tau: f64,
    select_frac: f64,
) -> Result<LossValue> {
    em_loss_mat(tape, t, &views.views, tau, select_frac)
}

pub(crate) fn em_loss_mat(
    tape: &mut Tape,
    t: Var,
    views: &Mat,
    tau: f64,
    select_frac: f64,
) -> Result<LossValue> {
    check_tau(tau)?;
    if !(select_frac > 0.0 && select_frac <= 1.0) {
        return Err(Error::Config(format!("select_frac must be in (0, 1], got {select_frac}")));
    }
    let v = tape.constant(views.clone());
    let logits = tape.matmul_nt(v, t)?;
    let logits = tape.scale(logits, 1.0 / tau);
    let probs = tape.softmax_rows(logits);
    let keep = lowest_entropy_rows(tape.value(probs), selected_count(views.rows(), select_frac));
    let chosen = tape.select_rows(probs, &keep)?;
    let mean = tape.mean_rows(chosen);
    let h = tape.entropy_rows(mean);
    Ok(LossValue::of(tape, h))
}

/// Row indices of the `count` lowest-entropy rows, ties broken by index.
pub(crate) fn lowest_entropy_rows(probs: &Mat, count: usize) -> Vec<usize> {
    let ent: Vec<f64> = (0..probs.rows()).map(|r| crate::numkit::entropy(probs.row(r))).collect();
    let mut idx: Vec<usize> = (0..probs.rows()).collect();
    idx.sort_by(|&a, &b| ent[a].total_cmp(&ent[b]).then(a.cmp(&b)));
    idx.truncate(count);
    idx
}

/// `-(1/K) Σ_k ‖t_k − μ‖₂`.
pub fn ctpt_reg(tape: &mut Tape, t: Var) -> Result<LossValue> {
    let k = tape.value(t).rows();
    let mu = tape.mean_rows(t);
    let mu = tape.broadcast_rows(mu, k)?;
    let centered = tape.sub(t, mu)?;
    let norms = tape.row_norms(centered);
    let total = tape.sum(norms);
    let out = tape.scale(total, -1.0 / k as f64);
    Ok(LossValue::of(tape, out))
}

/// `‖T Tᵀ − I_K‖²_F`.
pub fn otpt_reg(tape: &mut Tape, t: Var) -> Result<LossValue> {
    let k = tape.value(t).rows();
    let gram = tape.matmul_nt(t, t)?;
    let eye = tape.constant(Mat::identity(k));
    let resid = tape.sub(gram, eye)?;
    let sq = tape.mul(resid, resid)?;
    let out = tape.sum(sq);
    Ok(LossValue::of(tape, out))
}

pub fn reg_loss(tape: &mut Tape, t: Var, reg: Regularizer) -> Result<LossValue> {
    match reg {
        Regularizer::Ctpt => ctpt_reg(tape, t),
        Regularizer::Otpt => otpt_reg(tape, t),
    }
}

/// `em_loss + λ·reg`; with `reg = None` (or λ = 0) this is the EM loss.
pub fn total_loss(
    tape: &mut Tape,
    t: Var,
    views: &AugmentedViews,
    tau: f64,
    select_frac: f64,
    reg: Option<Regularizer>,
    lambda: f64,
) -> Result<LossValue> {
    if !(lambda >= 0.0) {
        return Err(Error::Config(format!("lambda must be >= 0, got {lambda}")));
    }
    let em = em_loss(tape, t, views, tau, select_frac)?;
    match reg {
        Some(r) if lambda != 0.0 => {
            let reg = reg_loss(tape, t, r)?;
            let weighted = tape.scale(reg.node, lambda);
            let out = tape.add(em.node, weighted)?;
            Ok(LossValue::of(tape, out))
        }
        _ => Ok(em),
    }
}

/// `-‖P T‖²_F` with the centering projector `P = I − 11ᵀ/K`.
pub fn disp_surrogate(tape: &mut Tape, t: Var) -> Result<LossValue> {
    let k = tape.value(t).rows();
    let mu = tape.mean_rows(t);
    let mu = tape.broadcast_rows(mu, k)?;
    let centered = tape.sub(t, mu)?;
    let sq = tape.mul(centered, centered)?;
    let total = tape.sum(sq);
    let out = tape.scale(total, -1.0);
    Ok(LossValue::of(tape, out))
}

/// `Σ_{i<j} t_iᵀ t_j`, computed as `(‖Σ_i t_i‖² − ‖T‖²_F) / 2`.
pub fn orth_surrogate(tape: &mut Tape, t: Var) -> Result<LossValue> {
    let k = tape.value(t).rows() as f64;
    let mu = tape.mean_rows(t);
    let mu_sq = tape.mul(mu, mu)?;
    let mu_sq = tape.sum(mu_sq);
    let all_sq = tape.mul(t, t)?;
    let all_sq = tape.sum(all_sq);
    let a = tape.scale(mu_sq, k * k / 2.0);
    let b = tape.scale(all_sq, -0.5);
    let out = tape.add(a, b)?;
    Ok(LossValue::of(tape, out))
}

/// Dispersion statistic `S(T) = K − K‖μ‖²`.
pub fn s_stat(t: &Mat) -> f64 {
    let k = t.rows() as f64;
    let mu = t.mean_rows();
    k - k * mu.frobenius_sq()
}

/// Value-only helper: evaluates a tape loss at a fixed feature matrix.
pub fn eval_on_features(
    t: &Mat,
    f: impl FnOnce(&mut Tape, Var) -> Result<LossValue>,
) -> Result<f64> {
    let mut tape = Tape::new();
    let v = tape.constant(t.clone());
    Ok(f(&mut tape, v)?.value)
}

/// Mean row-wise distance between two `K × D` feature matrices.
fn row_distance(tape: &mut Tape, a: Var, b: Var, distance: Distance) -> Result<Var> {
    let k = tape.value(a).rows() as f64;
    match distance {
        Distance::Cos => {
            let an = tape.normalize_rows(a);
            let bn = tape.normalize_rows(b);
            let cos = tape.row_dots(an, bn)?;
            let total = tape.sum(cos);
            Ok(tape.affine(total, -1.0 / k, 1.0))
        }
        Distance::L2 => {
            let diff = tape.sub(a, b)?;
            let norms = tape.row_norms(diff);
            let total = tape.sum(norms);
            Ok(tape.scale(total, 1.0 / k))
        }
        Distance::SqL2 => {
            let diff = tape.sub(a, b)?;
            let sq = tape.row_dots(diff, diff)?;
            let total = tape.sum(sq);
            Ok(tape.scale(total, 1.0 / k))
        }
    }
}

/// Output change under perturbation of classes and prompt:
/// `dist(f(C+ε1, θ+ε2), f(C, θ))`, row-averaged. Both branches carry
/// gradients with respect to `θ` (and `C` if it is a parameter).
pub fn flat_loss(
    tape: &mut Tape,
    enc: &SynthEncoder,
    classes: Var,
    prompt: Var,
    eps_classes: &Mat,
    eps_prompt: &Mat,
    distance: Distance,
) -> Result<LossValue> {
    if !tape.value(classes).same_shape(eps_classes) || !tape.value(prompt).same_shape(eps_prompt) {
        return Err(Error::Shape("perturbations must match class and prompt shapes".into()));
    }
    if eps_classes.data().iter().chain(eps_prompt.data()).all(|&x| x == 0.0) {
        // Identical branches: the loss is 0 for every θ, so its gradient is
        // exactly zero rather than normalization roundoff.
        let zero = tape.constant(Mat::zeros(1, 1));
        return Ok(LossValue::of(tape, zero));
    }
    let e1 = tape.constant(eps_classes.clone());
    let e2 = tape.constant(eps_prompt.clone());
    let c_pert = tape.add(classes, e1)?;
    let p_pert = tape.add(prompt, e2)?;
    let perturbed = enc.encode_on(tape, c_pert, p_pert)?;
    let clean = enc.encode_on(tape, classes, prompt)?;
    let out = row_distance(tape, perturbed, clean, distance)?;
    Ok(LossValue::of(tape, out))
}

/// Distance between the features of `prompt` and those of the fixed anchor
/// prompt `theta_zs` (no gradient through the anchor).
pub fn align_loss(
    tape: &mut Tape,
    enc: &SynthEncoder,
    classes: Var,
    prompt: Var,
    theta_zs: &Prompt,
    distance: Distance,
) -> Result<LossValue> {
    if !tape.value(prompt).same_shape(&theta_zs.0) {
        return Err(Error::Shape("prompt and anchor prompt differ in shape".into()));
    }
    let anchor = enc.encode_mats(tape.value(classes), &theta_zs.0)?;
    let anchor = tape.constant(anchor);
    let current = enc.encode_on(tape, classes, prompt)?;
    let out = row_distance(tape, current, anchor, distance)?;
    Ok(LossValue::of(tape, out))
}

/// Class-count dependent flatness weight `γ1 + γ2/K`.
pub fn fpp_lambda(gamma1: f64, gamma2: f64, k: usize) -> f64 {
    gamma1 + gamma2 / k as f64
}

#[allow(clippy::too_many_arguments)]
/// `align + λ·flat`.
pub fn fpp_objective(
    tape: &mut Tape,
    enc: &SynthEncoder,
    classes: Var,
    prompt: Var,
    theta_zs: &Prompt,
    eps_classes: &Mat,
    eps_prompt: &Mat,
    lambda: f64,
    align_distance: Distance,
    flat_distance: Distance,
) -> Result<(LossValue, LossValue, LossValue)> {
    let align = align_loss(tape, enc, classes, prompt, theta_zs, align_distance)?;
    let flat = flat_loss(tape, enc, classes, prompt, eps_classes, eps_prompt, flat_distance)?;
    let weighted = tape.scale(flat.node, lambda);
    let total = tape.add(align.node, weighted)?;
    Ok((LossValue::of(tape, total), align, flat))
}
