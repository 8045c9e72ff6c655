//! Loss-landscape probes: first-order SAM sharpness, Hutchinson estimates of
//! encoder Jacobian norms, and the small-perturbation link between the
//! flatness loss and those norms.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::{ClassSet, Prompt, SynthEncoder};
use crate::error::{Error, Result};
use crate::losses::Distance;
use crate::numkit::{pairwise_sum, Mat, Rng, Tape};
use crate::optim::Objective;

/// Default ρ for sharpness readings.
pub const DEFAULT_PROBE_RHO: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SharpnessReading {
    /// `L(θ + ε̂) − L(θ)`.
    pub value: f64,
    pub rho: f64,
    pub loss: f64,
    pub loss_perturbed: f64,
    /// The gradient vanished; `value` is 0 by convention.
    pub degenerate: bool,
}

/// Loss increase along the normalized gradient: `ε̂ = ρ·∇L/‖∇L‖`.
pub fn sharpness(theta: &Mat, objective: &impl Objective, rho: f64) -> Result<SharpnessReading> {
    if !(rho > 0.0) {
        return Err(Error::Probe(format!("rho must be > 0, got {rho}")));
    }
    let (loss, g) = objective.eval(theta)?;
    if !loss.is_finite() {
        return Err(Error::Probe("non-finite loss at the probe point".into()));
    }
    let gnorm = g.frobenius();
    if gnorm == 0.0 {
        return Ok(SharpnessReading { value: 0.0, rho, loss, loss_perturbed: loss, degenerate: true });
    }
    let (loss_perturbed, _) = objective.eval(&theta.add_scaled(&g, rho / gnorm)?)?;
    if !loss_perturbed.is_finite() {
        return Err(Error::Probe("non-finite loss at the perturbed point".into()));
    }
    Ok(SharpnessReading { value: loss_perturbed - loss, rho, loss, loss_perturbed, degenerate: false })
}

/// Which encoder input a Jacobian is taken with respect to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Wrt {
    Classes,
    Prompt,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JacobianEstimate {
    /// Estimate of `‖J‖_F`.
    pub norm: f64,
    /// Standard error of `norm` (delta method).
    pub norm_stderr: f64,
    /// Unbiased estimate of `‖J‖²_F`.
    pub norm_sq: f64,
    pub norm_sq_stderr: f64,
    pub n_probe: usize,
}

/// Hutchinson estimate of the Frobenius norm of `∂encode/∂(classes|prompt)`.
///
/// Each probe draws a standard Gaussian `w` shaped like the output and
/// computes `‖Jᵀw‖²` with one reverse pass; its expectation is `‖J‖²_F`.
/// Probe `i` uses `rng.fork(i)`, so results do not depend on thread count.
pub fn jacobian_norm(
    enc: &SynthEncoder,
    classes: &ClassSet,
    prompt: &Prompt,
    wrt: Wrt,
    n_probe: usize,
    rng: &Rng,
) -> Result<JacobianEstimate> {
    if n_probe < 1 {
        return Err(Error::Probe("n_probe must be >= 1".into()));
    }
    let k = classes.k();
    let d = enc.dims().d;
    let samples = (0..n_probe)
        .into_par_iter()
        .map(|i| {
            let mut r = rng.fork(i as u64);
            let w = r.gaussian_mat(k, d, 1.0);
            let mut tape = Tape::new();
            let (c, p) = match wrt {
                Wrt::Classes => (tape.param(classes.embeddings.clone()), tape.constant(prompt.0.clone())),
                Wrt::Prompt => (tape.constant(classes.embeddings.clone()), tape.param(prompt.0.clone())),
            };
            let out = enc.encode_on(&mut tape, c, p)?;
            let w = tape.constant(w);
            let proj = tape.mul(out, w)?;
            let s = tape.sum(proj);
            let target = if wrt == Wrt::Classes { c } else { p };
            Ok(tape.grad(s, target)?.frobenius_sq())
        })
        .collect::<Result<Vec<f64>>>()?;
    let (mean, stderr) = mean_stderr(&samples);
    let norm = mean.max(0.0).sqrt();
    let norm_stderr = if norm > 0.0 { stderr / (2.0 * norm) } else { 0.0 };
    Ok(JacobianEstimate { norm, norm_stderr, norm_sq: mean, norm_sq_stderr: stderr, n_probe })
}

/// Mean and standard error (sample std with `n − 1`, over `√n`).
pub(crate) fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = pairwise_sum(xs) / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let dev: Vec<f64> = xs.iter().map(|x| (x - mean) * (x - mean)).collect();
    let var = pairwise_sum(&dev) / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Flatness loss value without a tape, given the clean features.
pub fn flat_value(
    enc: &SynthEncoder,
    classes: &Mat,
    prompt: &Mat,
    clean: &Mat,
    eps_classes: &Mat,
    eps_prompt: &Mat,
    distance: Distance,
) -> Result<f64> {
    let pert = enc.encode_mats(&classes.add(eps_classes)?, &prompt.add(eps_prompt)?)?;
    let k = clean.rows() as f64;
    let per_row: Vec<f64> = (0..clean.rows())
        .map(|r| {
            let (a, b) = (pert.row(r), clean.row(r));
            match distance {
                Distance::Cos => {
                    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
                    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
                    1.0 - dot / (na * nb)
                }
                Distance::L2 => a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt(),
                Distance::SqL2 => a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>(),
            }
        })
        .collect();
    Ok(per_row.iter().sum::<f64>() / k)
}

/// Monte Carlo statistics of the flatness loss under Gaussian perturbations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlatMoments {
    pub mean: f64,
    pub stderr: f64,
    /// Mean of `(L(ε) + L(−ε)) / 2`: the even (curvature) part along each
    /// drawn direction.
    pub even_mean: f64,
    /// Mean of `(L(ε) − L(−ε)) / 2`: third- and higher odd-order terms.
    pub odd_mean: f64,
    pub odd_stderr: f64,
    pub n_mc: usize,
}

/// `E[L_flat]` over `n_mc` draws of per-entry Gaussian perturbations with
/// std `sigma1` (classes) and `sigma2` (prompt), cosine distance. Draw `i`
/// uses `rng.fork(i)`; calling twice with the same `rng` and different σ
/// reuses the same standard normals.
pub fn expected_flat_loss(
    enc: &SynthEncoder,
    classes: &ClassSet,
    prompt: &Prompt,
    sigma1: f64,
    sigma2: f64,
    n_mc: usize,
    rng: &Rng,
) -> Result<FlatMoments> {
    if n_mc < 2 {
        return Err(Error::Probe("n_mc must be >= 2".into()));
    }
    let c = &classes.embeddings;
    let p = &prompt.0;
    let clean = enc.encode_mats(c, p)?;
    let pairs = (0..n_mc)
        .into_par_iter()
        .map(|i| {
            let mut r = rng.fork(i as u64);
            let e1 = r.gaussian_mat(c.rows(), c.cols(), sigma1);
            let e2 = r.gaussian_mat(p.rows(), p.cols(), sigma2);
            let plus = flat_value(enc, c, p, &clean, &e1, &e2, Distance::Cos)?;
            let minus = flat_value(enc, c, p, &clean, &e1.scale(-1.0), &e2.scale(-1.0), Distance::Cos)?;
            Ok((plus, minus))
        })
        .collect::<Result<Vec<(f64, f64)>>>()?;
    let plus: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let even: Vec<f64> = pairs.iter().map(|p| 0.5 * (p.0 + p.1)).collect();
    let odd: Vec<f64> = pairs.iter().map(|p| 0.5 * (p.0 - p.1)).collect();
    let (mean, stderr) = mean_stderr(&plus);
    let (even_mean, _) = mean_stderr(&even);
    let (odd_mean, odd_stderr) = mean_stderr(&odd);
    Ok(FlatMoments { mean, stderr, even_mean, odd_mean, odd_stderr, n_mc })
}

/// Above this perturbation scale the quadratic band is reported but not
/// enforced.
pub const SMALL_SIGMA: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvatureReport {
    pub sigma1: f64,
    pub sigma2: f64,
    pub k: usize,
    pub flat: FlatMoments,
    pub jacobian_classes: JacobianEstimate,
    pub jacobian_prompt: JacobianEstimate,
    /// `(σ1²‖J_C‖² + σ2²‖J_θ‖²) / (2K)`.
    pub predicted: f64,
    /// `flat.mean / predicted`; 1 when both vanish.
    pub ratio: f64,
    /// Whether the factor-of-2 band applies (both σ ≤ [`SMALL_SIGMA`]).
    pub band_checked: bool,
    pub failed: bool,
}

/// Compares Monte Carlo `E[L_flat]` with its second-order prediction from
/// the Jacobian norms.
#[allow(clippy::too_many_arguments)]
pub fn flatness_curvature_link(
    enc: &SynthEncoder,
    classes: &ClassSet,
    prompt: &Prompt,
    sigma1: f64,
    sigma2: f64,
    n_mc: usize,
    n_probe: usize,
    rng: &Rng,
) -> Result<CurvatureReport> {
    if !(sigma1 >= 0.0 && sigma2 >= 0.0) {
        return Err(Error::Probe(format!("sigmas must be >= 0, got {sigma1}, {sigma2}")));
    }
    if n_mc < 100 {
        return Err(Error::Probe(format!("n_mc must be >= 100, got {n_mc}")));
    }
    let flat = expected_flat_loss(enc, classes, prompt, sigma1, sigma2, n_mc, &rng.fork(0))?;
    let jacobian_classes = jacobian_norm(enc, classes, prompt, Wrt::Classes, n_probe, &rng.fork(1))?;
    let jacobian_prompt = jacobian_norm(enc, classes, prompt, Wrt::Prompt, n_probe, &rng.fork(2))?;
    let k = classes.k();
    let predicted = (sigma1 * sigma1 * jacobian_classes.norm_sq + sigma2 * sigma2 * jacobian_prompt.norm_sq)
        / (2.0 * k as f64);
    let ratio = if predicted == 0.0 && flat.mean == 0.0 { 1.0 } else { flat.mean / predicted };
    let band_checked = sigma1 <= SMALL_SIGMA && sigma2 <= SMALL_SIGMA;
    let failed = band_checked && !(0.5..=2.0).contains(&ratio);
    Ok(CurvatureReport {
        sigma1,
        sigma2,
        k,
        flat,
        jacobian_classes,
        jacobian_prompt,
        predicted,
        ratio,
        band_checked,
        failed,
    })
}

/// Accepted range for `E[L_flat](σ) / E[L_flat](σ/2)`.
pub const HALVING_BAND: (f64, f64) = (3.5, 4.5);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HalvingReport {
    /// `(σ1, σ2)` at each level, largest first.
    pub sigmas: Vec<(f64, f64)>,
    pub means: Vec<f64>,
    /// `means[i] / means[i + 1]`.
    pub ratios: Vec<f64>,
    pub passed: bool,
}

/// Monte Carlo `E[L_flat]` at `(σ1, σ2)` and `halvings` successive halvings,
/// all from the same standard normals.
#[allow(clippy::too_many_arguments)]
pub fn sigma_halving(
    enc: &SynthEncoder,
    classes: &ClassSet,
    prompt: &Prompt,
    sigma1: f64,
    sigma2: f64,
    halvings: usize,
    n_mc: usize,
    rng: &Rng,
) -> Result<HalvingReport> {
    if halvings < 1 {
        return Err(Error::Probe("need at least one halving".into()));
    }
    let sigmas: Vec<(f64, f64)> =
        (0..=halvings).map(|i| (sigma1 / 2f64.powi(i as i32), sigma2 / 2f64.powi(i as i32))).collect();
    let means = sigmas
        .iter()
        .map(|&(s1, s2)| Ok(expected_flat_loss(enc, classes, prompt, s1, s2, n_mc, rng)?.mean))
        .collect::<Result<Vec<f64>>>()?;
    let ratios: Vec<f64> = means.windows(2).map(|w| w[0] / w[1]).collect();
    let passed = ratios.iter().all(|r| (HALVING_BAND.0..=HALVING_BAND.1).contains(r));
    Ok(HalvingReport { sigmas, means, ratios, passed })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GainReport {
    pub base: f64,
    /// `E[L_flat]` for the encoder whose prompt Jacobian is doubled.
    pub doubled: f64,
    pub increased: bool,
}

/// Compares `E[L_flat]` for the encoder and for its reparametrization with
/// the prompt Jacobian doubled and identical clean features.
pub fn doubled_jacobian_check(
    enc: &SynthEncoder,
    classes: &ClassSet,
    prompt: &Prompt,
    sigma1: f64,
    sigma2: f64,
    n_mc: usize,
    rng: &Rng,
) -> Result<GainReport> {
    let base = expected_flat_loss(enc, classes, prompt, sigma1, sigma2, n_mc, rng)?.mean;
    let scaled = Prompt(prompt.0.scale(0.5));
    let doubled = expected_flat_loss(&enc.with_prompt_gain(2.0), classes, &scaled, sigma1, sigma2, n_mc, rng)?.mean;
    Ok(GainReport { base, doubled, increased: doubled > base })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderDims;

    fn half_sq(x: &Mat) -> Result<(f64, Mat)> {
        Ok((0.5 * x.frobenius_sq(), x.clone()))
    }

    #[test]
    fn quadratic_sharpness() {
        let r = sharpness(&Mat::row_vector(vec![1.0, 0.0]), &half_sq, 0.1).unwrap();
        assert!((r.value - 0.105).abs() < 1e-15, "{r:?}");
    }

    #[test]
    fn linear_sharpness_is_rho_grad_norm() {
        let a = Mat::row_vector(vec![3.0, -4.0]);
        let lin = |x: &Mat| -> Result<(f64, Mat)> {
            Ok((x.data().iter().zip(a.data()).map(|(x, a)| x * a).sum(), a.clone()))
        };
        let r = sharpness(&Mat::row_vector(vec![0.2, 0.7]), &lin, 0.05).unwrap();
        assert!((r.value - 0.25).abs() < 1e-12);
    }

    #[test]
    fn translation_consistent_and_degenerate() {
        let th = Mat::row_vector(vec![0.4, -0.9, 1.3]);
        let shifted = |x: &Mat| -> Result<(f64, Mat)> { Ok((0.5 * x.frobenius_sq() + 7.0, x.clone())) };
        let a = sharpness(&th, &half_sq, 0.2).unwrap().value;
        let b = sharpness(&th, &shifted, 0.2).unwrap().value;
        assert!((a - b).abs() < 1e-12);
        let z = sharpness(&Mat::zeros(1, 3), &half_sq, 0.2).unwrap();
        assert!(z.degenerate && z.value == 0.0);
        assert!(sharpness(&th, &half_sq, 0.0).is_err());
    }

    fn fixture() -> (SynthEncoder, ClassSet, Prompt) {
        let dims = EncoderDims { p: 4, e: 16, h: 64, d: 64 };
        let enc = SynthEncoder::linear_fixture(dims, 11).unwrap();
        let mut rng = Rng::new(5);
        let c = ClassSet::new(rng.gaussian_mat(10, 16, 1.0)).unwrap();
        let p = Prompt(rng.gaussian_mat(4, 16, 1.0));
        (enc, c, p)
    }

    #[test]
    fn linear_fixture_jacobian_matches_exact_norm() {
        let (enc, c, p) = fixture();
        let (w1p, w1c) = enc.w1_blocks();
        let k = c.k() as f64;
        let exact_p = (k * enc.w2().matmul(&w1p).unwrap().frobenius_sq() / 4.0).sqrt();
        let exact_c = (k * enc.w2().matmul(&w1c).unwrap().frobenius_sq()).sqrt();
        let rng = Rng::new(8);
        let ep = jacobian_norm(&enc, &c, &p, Wrt::Prompt, 200, &rng).unwrap();
        let ec = jacobian_norm(&enc, &c, &p, Wrt::Classes, 200, &rng).unwrap();
        assert!((ep.norm / exact_p - 1.0).abs() < 0.05, "{} vs {exact_p}", ep.norm);
        assert!((ec.norm / exact_c - 1.0).abs() < 0.05, "{} vs {exact_c}", ec.norm);
    }

    #[test]
    fn w2_scaling_doubles_estimate() {
        let (enc, c, p) = fixture();
        let rng = Rng::new(9);
        let a = jacobian_norm(&enc, &c, &p, Wrt::Prompt, 50, &rng).unwrap().norm;
        let b = jacobian_norm(&enc.with_w2_scale(2.0), &c, &p, Wrt::Prompt, 50, &rng).unwrap().norm;
        assert!((1.8..=2.2).contains(&(b / a)));
    }

    #[test]
    fn flat_value_matches_tape_loss() {
        let enc = SynthEncoder::new(EncoderDims { p: 3, e: 6, h: 12, d: 8 }, 2).unwrap();
        let mut rng = Rng::new(3);
        let c = rng.gaussian_mat(4, 6, 1.0);
        let p = rng.gaussian_mat(3, 6, 1.0);
        let e1 = rng.gaussian_mat(4, 6, 0.1);
        let e2 = rng.gaussian_mat(3, 6, 0.1);
        let clean = enc.encode_mats(&c, &p).unwrap();
        for dist in [Distance::Cos, Distance::L2, Distance::SqL2] {
            let v = flat_value(&enc, &c, &p, &clean, &e1, &e2, dist).unwrap();
            let mut tape = Tape::new();
            let cv = tape.constant(c.clone());
            let pv = tape.param(p.clone());
            let l = crate::losses::flat_loss(&mut tape, &enc, cv, pv, &e1, &e2, dist).unwrap();
            assert!((v - l.value).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_sigma_gives_zero_flat_loss() {
        let enc = SynthEncoder::new(EncoderDims { p: 2, e: 4, h: 8, d: 6 }, 1).unwrap();
        let mut rng = Rng::new(1);
        let c = ClassSet::new(rng.gaussian_mat(3, 4, 1.0)).unwrap();
        let p = Prompt(rng.gaussian_mat(2, 4, 1.0));
        let r = flatness_curvature_link(&enc, &c, &p, 0.0, 0.0, 100, 10, &Rng::new(2)).unwrap();
        assert_eq!(r.flat.mean, 0.0);
        assert!(!r.failed);
    }

    #[test]
    fn small_sigma_band_holds_on_tanh_encoder() {
        let enc = SynthEncoder::new(EncoderDims { p: 4, e: 16, h: 64, d: 64 }, 4).unwrap();
        let mut rng = Rng::new(6);
        let c = ClassSet::new(rng.gaussian_mat(10, 16, 1.0)).unwrap();
        let p = Prompt(rng.gaussian_mat(4, 16, 1.0));
        let r = flatness_curvature_link(&enc, &c, &p, 1e-3, 5e-4, 400, 200, &Rng::new(7)).unwrap();
        assert!(r.band_checked && !r.failed, "{r:?}");
        assert!((r.ratio - 1.0).abs() < 0.2, "{}", r.ratio);
    }

    #[test]
    fn halving_shrinks_by_four() {
        let enc = SynthEncoder::new(EncoderDims { p: 4, e: 16, h: 64, d: 64 }, 4).unwrap();
        let mut rng = Rng::new(8);
        let c = ClassSet::new(rng.gaussian_mat(10, 16, 1.0)).unwrap();
        let p = Prompt(rng.gaussian_mat(4, 16, 1.0));
        let r = sigma_halving(&enc, &c, &p, 0.02f64.sqrt(), 0.005f64.sqrt(), 3, 200, &Rng::new(1)).unwrap();
        assert!(r.passed, "{:?}", r.ratios);
        let g = doubled_jacobian_check(&enc, &c, &p, 0.02f64.sqrt(), 0.005f64.sqrt(), 200, &Rng::new(1)).unwrap();
        assert!(g.increased, "{g:?}");
    }
}
