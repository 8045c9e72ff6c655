//! Monte Carlo checks of the large-`D` entropy expansion
//!
//! ```text
//! E_v[H(softmax(T v))] = α·L_reg(T) + β + remainder,   v ~ Unif(S^{D-1})
//! ```
//!
//! for both regularizer surrogates. Everything here runs at temperature 1:
//! the expansion is in the raw logits `s = T v`, which are `O(D^{-1/2})`.
//!
//! The remainder is tiny (about 1e-7 at `D = 512`, `K = 10`), far below
//! plain Monte Carlo noise at practical sample counts. [`verify_theorem1`]
//! therefore estimates it with antithetic pairs `(v, −v)` and the control
//! variate `‖P T v‖²/(2K)`, whose expectation `S(T)/(2KD)` is known exactly.
//! The plain estimate is reported next to it.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::s_stat;
use crate::numkit::{pairwise_sum, Mat, Rng};

/// Which surrogate the expansion is written in.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SurrogateTag {
    Disp,
    Orth,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpansionConstants {
    pub reg: SurrogateTag,
    pub k: usize,
    pub d: usize,
    pub alpha: f64,
    pub beta: f64,
}

impl ExpansionConstants {
    /// Surrogate value as a function of `S(T)`.
    pub fn surrogate(&self, s: f64) -> f64 {
        let k = self.k as f64;
        match self.reg {
            SurrogateTag::Disp => -s,
            SurrogateTag::Orth => 0.5 * k * (k - 1.0 - s),
        }
    }

    /// `α·L_reg + β` at dispersion `s`.
    pub fn predicted(&self, s: f64) -> f64 {
        self.alpha * self.surrogate(s) + self.beta
    }
}

pub fn constants(reg: SurrogateTag, k: usize, d: usize) -> Result<ExpansionConstants> {
    if k < 2 || d < 2 {
        return Err(Error::InvalidDimension(format!("need K >= 2 and D >= 2, got K={k} D={d}")));
    }
    let (kf, df) = (k as f64, d as f64);
    let (alpha, beta) = match reg {
        SurrogateTag::Disp => (1.0 / (2.0 * kf * df), kf.ln()),
        SurrogateTag::Orth => (1.0 / (kf * kf * df), kf.ln() - (kf - 1.0) / (2.0 * kf * df)),
    };
    Ok(ExpansionConstants { reg, k, d, alpha, beta })
}

/// Entropy of `softmax(logits)` via log-sum-exp.
fn softmax_entropy(logits: &[f64]) -> f64 {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    let mut zs = 0.0;
    for &s in logits {
        let e = (s - m).exp();
        z += e;
        zs += e * (s - m);
    }
    z.ln() - zs / z
}

const SHARD: usize = 2048;

fn shard_ranges(n: usize) -> Vec<(usize, usize)> {
    (0..n.div_ceil(SHARD)).map(|s| (s * SHARD, ((s + 1) * SHARD).min(n))).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub estimate: f64,
    pub stderr: f64,
    pub n: usize,
}

fn estimate_from_sums(sum: f64, sum_sq: f64, n: usize) -> McEstimate {
    let nf = n as f64;
    let mean = sum / nf;
    let var = ((sum_sq - nf * mean * mean) / (nf - 1.0)).max(0.0);
    McEstimate { estimate: mean, stderr: (var / nf).sqrt(), n }
}

/// Plain Monte Carlo estimate of `E_v[H(softmax(T v / τ))]` over the unit
/// sphere. Shard `s` of 2048 draws uses `rng.fork(s)`; shard totals are
/// merged by pairwise summation.
pub fn expected_entropy_mc(t: &Mat, tau: f64, n_samples: usize, rng: &Rng) -> Result<McEstimate> {
    if !(tau > 0.0) {
        return Err(Error::InvalidTemperature(tau));
    }
    if n_samples < 1000 {
        return Err(Error::Config(format!("n_samples must be >= 1000, got {n_samples}")));
    }
    let (k, d) = t.shape();
    if d < 2 {
        return Err(Error::InvalidDimension(format!("feature dimension must be >= 2, got {d}")));
    }
    // Sums are taken about ln K, the value every draw has when all rows
    // coincide, which keeps the variance computation well conditioned.
    let ln_k = (k as f64).ln();
    let shards: Vec<(f64, f64)> = shard_ranges(n_samples)
        .into_par_iter()
        .enumerate()
        .map(|(s, (lo, hi))| {
            let mut r = rng.fork(s as u64);
            let mut v = vec![0.0; d];
            let mut logits = vec![0.0; k];
            let (mut sum, mut sum_sq) = (0.0, 0.0);
            for _ in lo..hi {
                r.fill_sphere(&mut v);
                for (j, l) in logits.iter_mut().enumerate() {
                    *l = crate::numkit::dot_slices(t.row(j), &v) / tau;
                }
                let h = softmax_entropy(&logits) - ln_k;
                sum += h;
                sum_sq += h * h;
            }
            (sum, sum_sq)
        })
        .collect();
    let sum = pairwise_sum(&shards.iter().map(|s| s.0).collect::<Vec<_>>());
    let sum_sq = pairwise_sum(&shards.iter().map(|s| s.1).collect::<Vec<_>>());
    let mut est = estimate_from_sums(sum, sum_sq, n_samples);
    est.estimate += ln_k;
    Ok(est)
}

/// One member of the verification family: `t_k = √λ·u + √(1−λ)·e_k` with
/// orthonormal `u, e_1..e_K`. Rows are unit norm and `S(T) = (K−1)(1−λ)`.
pub fn family_member(k: usize, d: usize, lambda_mix: f64) -> Result<Mat> {
    if d < k + 1 {
        return Err(Error::InvalidDimension(format!("family needs D >= K + 1, got K={k} D={d}")));
    }
    if !(0.0..=1.0).contains(&lambda_mix) {
        return Err(Error::Config(format!("mixing weight must be in [0, 1], got {lambda_mix}")));
    }
    let mut t = Mat::zeros(k, d);
    for r in 0..k {
        t.set(r, k, lambda_mix.sqrt());
        t.set(r, r, (1.0 - lambda_mix).sqrt());
    }
    Ok(t)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemberResult {
    pub lambda_mix: f64,
    pub s: f64,
    pub l_reg: f64,
    /// Plain Monte Carlo mean of the entropy.
    pub h_mc: f64,
    pub h_stderr: f64,
    /// `h_mc − (α·L_reg + β)`.
    pub residual_plain: f64,
    /// Variance-reduced estimate of the same remainder.
    pub residual: f64,
    pub residual_stderr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DimensionResult {
    pub d: usize,
    pub constants: ExpansionConstants,
    pub members: Vec<MemberResult>,
    /// `max_T |residual|`.
    pub max_residual: f64,
    pub max_residual_stderr: f64,
    pub max_residual_plain: f64,
    /// Spearman correlation between `L_reg` and `h_mc` across the family.
    pub rank_correlation: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Theorem1Report {
    pub reg: SurrogateTag,
    pub k: usize,
    pub tau: f64,
    pub family_size: usize,
    pub n_mc: usize,
    pub dims: Vec<DimensionResult>,
    /// Least-squares slope of `log max_residual` against `log D`.
    pub exponent: f64,
    /// Same slope from the plain Monte Carlo residuals.
    pub exponent_plain: f64,
    /// Number of increases of `max_residual` along the `D` sweep.
    pub monotonicity_violations: usize,
    /// Residual of the orthonormal member (`S = K − 1`) at the largest `D`.
    pub orthonormal_residual: f64,
    /// `5 / (K·D)` at the largest `D`.
    pub orthonormal_bound: f64,
    /// Monte Carlo error is not small enough to resolve some residual.
    pub inconclusive: bool,
    pub suggested_n_mc: Option<usize>,
}

pub const CSV_SCHEMA_VERSION: u32 = 1;

impl Theorem1Report {
    /// One row per `(D, family member)`.
    pub fn to_csv(&self) -> String {
        let mut out = format!(
            "# schema_version={CSV_SCHEMA_VERSION}\nd,s,l_reg,h_mc,h_stderr,residual,residual_stderr,residual_plain\n"
        );
        for dim in &self.dims {
            for m in &dim.members {
                out.push_str(&format!(
                    "{},{:e},{:e},{:e},{:e},{:e},{:e},{:e}\n",
                    dim.d, m.s, m.l_reg, m.h_mc, m.h_stderr, m.residual, m.residual_stderr, m.residual_plain
                ));
            }
        }
        out
    }

    pub fn rank_correlation_at_max_d(&self) -> f64 {
        self.dims.last().map_or(f64::NAN, |d| d.rank_correlation)
    }
}

/// Per-member running sums for one shard.
#[derive(Clone)]
struct Sums {
    /// Entropy minus ln K.
    h: Vec<f64>,
    h_sq: Vec<f64>,
    y: Vec<f64>,
    y_sq: Vec<f64>,
}

fn sample_family(k: usize, d: usize, lambdas: &[f64], n_mc: usize, rng: &Rng) -> Vec<Sums> {
    let f = lambdas.len();
    let ln_k = (k as f64).ln();
    let coef: Vec<(f64, f64)> = lambdas.iter().map(|&l| (l.sqrt(), (1.0 - l).sqrt())).collect();
    shard_ranges(n_mc)
        .into_par_iter()
        .enumerate()
        .map(|(s, (lo, hi))| {
            let mut r = rng.fork(s as u64);
            let mut v = vec![0.0; d];
            let mut logits = vec![0.0; k];
            let mut sums = Sums { h: vec![0.0; f], h_sq: vec![0.0; f], y: vec![0.0; f], y_sq: vec![0.0; f] };
            for _ in lo..hi {
                r.fill_sphere(&mut v);
                let proj_u = v[k];
                let e = &v[..k];
                let e_mean = e.iter().sum::<f64>() / k as f64;
                let e_var: f64 = e.iter().map(|x| (x - e_mean) * (x - e_mean)).sum();
                for (j, &(a, b)) in coef.iter().enumerate() {
                    // The shared component shifts every logit equally, so the
                    // centered logits are b·(e − ē).
                    let cv = b * b * e_var / (2.0 * k as f64);
                    for (l, &x) in logits.iter_mut().zip(e) {
                        *l = a * proj_u + b * x;
                    }
                    let h_plus = softmax_entropy(&logits);
                    for l in logits.iter_mut() {
                        *l = -*l;
                    }
                    let h_minus = softmax_entropy(&logits);
                    let y = 0.5 * (h_plus - ln_k) + 0.5 * (h_minus - ln_k) + cv;
                    sums.h[j] += h_plus - ln_k;
                    sums.h_sq[j] += (h_plus - ln_k) * (h_plus - ln_k);
                    sums.y[j] += y;
                    sums.y_sq[j] += y * y;
                }
            }
            sums
        })
        .collect()
}

fn merge(shards: &[Sums], pick: impl Fn(&Sums) -> &Vec<f64>, j: usize) -> f64 {
    pairwise_sum(&shards.iter().map(|s| pick(s)[j]).collect::<Vec<_>>())
}

/// Average ranks (ties share the mean rank).
fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]).then(a.cmp(&b)));
    let mut out = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &p in &idx[i..=j] {
            out[p] = r;
        }
        i = j + 1;
    }
    out
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma) * (x - ma)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb) * (y - mb)).sum();
    cov / (va * vb).sqrt()
}

pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    pearson(&ranks(a), &ranks(b))
}

/// Least-squares slope of `y` against `x`.
pub fn fit_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

/// Sweeps a one-parameter family of feature matrices over each `D` and
/// measures how far the expected entropy is from its expansion.
pub fn verify_theorem1(
    reg: SurrogateTag,
    k: usize,
    d_list: &[usize],
    family_size: usize,
    n_mc: usize,
    rng: &Rng,
) -> Result<Theorem1Report> {
    if d_list.len() < 3 || d_list.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config(format!("D list must be strictly increasing with >= 3 entries, got {d_list:?}")));
    }
    if family_size < 20 {
        return Err(Error::Config(format!("family_size must be >= 20, got {family_size}")));
    }
    if n_mc < 1000 {
        return Err(Error::Config(format!("n_mc must be >= 1000, got {n_mc}")));
    }
    let lambdas: Vec<f64> = (0..family_size).map(|j| j as f64 / (family_size - 1) as f64).collect();

    let mut dims = Vec::with_capacity(d_list.len());
    let mut needed_n: Option<usize> = None;
    for &d in d_list {
        let c = constants(reg, k, d)?;
        let shards = sample_family(k, d, &lambdas, n_mc, &rng.fork(d as u64));
        let mut members = Vec::with_capacity(family_size);
        for (j, &lambda_mix) in lambdas.iter().enumerate() {
            let s = s_stat(&family_member(k, d, lambda_mix)?);
            let mut h = estimate_from_sums(merge(&shards, |s| &s.h, j), merge(&shards, |s| &s.h_sq, j), n_mc);
            h.estimate += (k as f64).ln();
            let y = estimate_from_sums(merge(&shards, |s| &s.y, j), merge(&shards, |s| &s.y_sq, j), n_mc);
            let predicted = c.predicted(s);
            // y estimates E[H] − ln K + S/(2KD), and α·L_reg + β = ln K − S/(2KD).
            let residual = y.estimate;
            members.push(MemberResult {
                lambda_mix,
                s,
                l_reg: c.surrogate(s),
                h_mc: h.estimate,
                h_stderr: h.stderr,
                residual_plain: h.estimate - predicted,
                residual,
                residual_stderr: y.stderr,
            });
        }
        let worst = members
            .iter()
            .max_by(|a, b| a.residual.abs().total_cmp(&b.residual.abs()))
            .expect("family is non-empty");
        let (max_residual, max_residual_stderr) = (worst.residual.abs(), worst.residual_stderr);
        if 2.0 * max_residual_stderr > max_residual {
            let factor = (2.0 * max_residual_stderr / max_residual.max(f64::MIN_POSITIVE)).powi(2) * 1.5;
            let n = ((n_mc as f64) * factor).ceil().min(usize::MAX as f64 / 2.0) as usize;
            needed_n = Some(needed_n.map_or(n, |m| m.max(n)));
        }
        let max_residual_plain = members.iter().map(|m| m.residual_plain.abs()).fold(0.0, f64::max);
        let l_reg: Vec<f64> = members.iter().map(|m| m.l_reg).collect();
        let h_mc: Vec<f64> = members.iter().map(|m| m.h_mc).collect();
        let rank_correlation = spearman(&l_reg, &h_mc);
        dims.push(DimensionResult {
            d,
            constants: c,
            members,
            max_residual,
            max_residual_stderr,
            max_residual_plain,
            rank_correlation,
        });
    }

    let log_d: Vec<f64> = d_list.iter().map(|&d| (d as f64).ln()).collect();
    let log_r: Vec<f64> = dims.iter().map(|d| d.max_residual.ln()).collect();
    let log_rp: Vec<f64> = dims.iter().map(|d| d.max_residual_plain.ln()).collect();
    let monotonicity_violations = dims.windows(2).filter(|w| w[1].max_residual > w[0].max_residual).count();
    let last = dims.last().expect("at least three dimensions");
    let orthonormal_residual = last.members[0].residual.abs();
    let orthonormal_bound = 5.0 / (k as f64 * last.d as f64);
    Ok(Theorem1Report {
        reg,
        k,
        tau: 1.0,
        family_size,
        n_mc,
        exponent: fit_slope(&log_d, &log_r),
        exponent_plain: fit_slope(&log_d, &log_rp),
        monotonicity_violations,
        orthonormal_residual,
        orthonormal_bound,
        inconclusive: needed_n.is_some(),
        suggested_n_mc: needed_n,
        dims,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_values() {
        let c = constants(SurrogateTag::Disp, 10, 512).unwrap();
        assert_eq!(c.alpha, 1.0 / 10240.0);
        assert_eq!(c.beta, 10f64.ln());
        let c = constants(SurrogateTag::Orth, 10, 512).unwrap();
        assert_eq!(c.alpha, 1.0 / 51200.0);
        assert!((c.beta - (10f64.ln() - 9.0 / 10240.0)).abs() < 1e-15);
        let c = constants(SurrogateTag::Disp, 2, 2).unwrap();
        assert_eq!((c.alpha, c.beta), (0.125, 2f64.ln()));
        assert!(constants(SurrogateTag::Orth, 1, 5).is_err());
    }

    #[test]
    fn both_tags_predict_the_same_entropy() {
        for s in [0.0, 1.3, 9.0] {
            let a = constants(SurrogateTag::Disp, 10, 64).unwrap().predicted(s);
            let b = constants(SurrogateTag::Orth, 10, 64).unwrap().predicted(s);
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn identical_rows_give_log_k_with_zero_stderr() {
        let t = Mat::from_rows(&vec![vec![0.6, 0.8, 0.0]; 4]).unwrap();
        let e = expected_entropy_mc(&t, 1.0, 2000, &Rng::new(1)).unwrap();
        assert!((e.estimate - 4f64.ln()).abs() < 1e-14);
        assert!(e.stderr < 1e-14);
    }

    #[test]
    fn antipodal_circle_matches_quadrature() {
        let t = Mat::from_rows(&[vec![1.0, 0.0], vec![-1.0, 0.0]]).unwrap();
        let e = expected_entropy_mc(&t, 1.0, 200_000, &Rng::new(3)).unwrap();
        let n = 20_000;
        let quad = (0..n)
            .map(|i| {
                let c = (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos();
                softmax_entropy(&[c, -c])
            })
            .sum::<f64>()
            / n as f64;
        assert!((e.estimate - quad).abs() < 3.0 * e.stderr, "{} vs {quad} ({})", e.estimate, e.stderr);
    }

    #[test]
    fn family_spans_dispersion_range() {
        for lam in [0.0, 0.3, 1.0] {
            let t = family_member(10, 16, lam).unwrap();
            for n in t.row_norms() {
                assert!((n - 1.0).abs() < 1e-12);
            }
            assert!((s_stat(&t) - 9.0 * (1.0 - lam)).abs() < 1e-12);
        }
    }

    #[test]
    fn specialized_sampler_agrees_with_general_one() {
        let (k, d) = (4, 12);
        let lambdas = [0.0, 0.5];
        let rng = Rng::new(21);
        let shards = sample_family(k, d, &lambdas, 4000, &rng);
        for (j, &l) in lambdas.iter().enumerate() {
            let h = merge(&shards, |s| &s.h, j) / 4000.0 + (k as f64).ln();
            let direct = expected_entropy_mc(&family_member(k, d, l).unwrap(), 1.0, 4000, &rng).unwrap();
            assert!((h - direct.estimate).abs() < 1e-12, "{h} vs {}", direct.estimate);
        }
    }

    #[test]
    fn spearman_handles_ties_and_order() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]) - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
        assert_eq!(ranks(&[5.0, 1.0, 5.0]), vec![2.5, 1.0, 2.5]);
    }

    #[test]
    fn small_sweep_runs_and_serializes() {
        let rep = verify_theorem1(SurrogateTag::Orth, 4, &[16, 32, 64], 20, 4000, &Rng::new(2)).unwrap();
        assert_eq!(rep.dims.len(), 3);
        assert!(rep.dims.iter().all(|d| d.max_residual >= 0.0));
        let csv = rep.to_csv();
        assert!(csv.starts_with("# schema_version=1\n"));
        assert_eq!(csv.lines().count(), 2 + 3 * 20);
        assert!(verify_theorem1(SurrogateTag::Orth, 4, &[16, 8, 64], 20, 4000, &Rng::new(2)).is_err());
    }
}
