//! Adaptation procedures: per-sample test-time prompt tuning and its
//! regularized, SAM and sequential variants, the regularized-step
//! equivalence check, flatness-aware prompt pretraining, and the multi-seed
//! experiment runner.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::{CalibrationReport, PredictionLog, PredictionRecord, DEFAULT_BINS};
use crate::encoder::{augment, AugmentedViews, Prompt, SynthEncoder, SynthTask, TestSample};
use crate::error::{Error, Result};
use crate::losses::{self, fpp_lambda, Distance, Regularizer};
use crate::numkit::{Mat, Rng, Tape};
use crate::optim::{adamw_step, gd_step, sam_step, AdamWConfig, CosineSchedule, OptState};
use crate::probes::{sharpness, SharpnessReading, DEFAULT_PROBE_RHO};

const SAMPLE_STREAM: u64 = 0x5A3B_1E00;
const FPP_STREAM: u64 = 0xF0F0_0001;
const FPP_EVAL_STREAM: u64 = 0xF0F0_0002;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Tpt,
    Ctpt,
    Otpt,
    TptSam,
    FppInitTpt,
    Sequential,
}

/// Step order for the sequential ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SeqOrder {
    EntEnt,
    EntReg,
    RegEnt,
}

impl SeqOrder {
    pub const ALL: [SeqOrder; 3] = [SeqOrder::EntEnt, SeqOrder::EntReg, SeqOrder::RegEnt];
}

pub const DEFAULT_LAMBDA_CTPT: f64 = 50.0;
pub const DEFAULT_LAMBDA_OTPT: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TTAConfig {
    pub method: Method,
    /// Regularizer weight; `None` picks the method's default.
    pub lambda_reg: Option<f64>,
    pub lr: f64,
    pub tau: f64,
    pub n_views: usize,
    pub select_frac: f64,
    pub sigma_aug: f64,
    pub sam_rho: f64,
    /// Step order when `method = sequential`.
    pub order: SeqOrder,
    /// Regularizer used by the sequential ablation.
    pub seq_regularizer: Regularizer,
    pub record_sharpness: bool,
    pub probe_rho: f64,
}

impl Default for TTAConfig {
    fn default() -> Self {
        Self {
            method: Method::Tpt,
            lambda_reg: None,
            lr: 0.005,
            tau: 0.01,
            n_views: 64,
            select_frac: 0.1,
            sigma_aug: 0.5,
            sam_rho: 0.05,
            order: SeqOrder::EntEnt,
            seq_regularizer: Regularizer::Otpt,
            record_sharpness: true,
            probe_rho: DEFAULT_PROBE_RHO,
        }
    }
}

impl TTAConfig {
    pub fn with_method(method: Method) -> Self {
        Self { method, ..Self::default() }
    }

    /// Regularizer and weight of the method's objective, if any.
    pub fn regularizer(&self) -> Option<(Regularizer, f64)> {
        let reg = match self.method {
            Method::Ctpt => Regularizer::Ctpt,
            Method::Otpt => Regularizer::Otpt,
            Method::Sequential => self.seq_regularizer,
            _ => return None,
        };
        let default = match reg {
            Regularizer::Ctpt => DEFAULT_LAMBDA_CTPT,
            Regularizer::Otpt => DEFAULT_LAMBDA_OTPT,
        };
        Some((reg, self.lambda_reg.unwrap_or(default)))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: String| Err(Error::Config(format!("tta.{key}: {msg}")));
        if let Some(l) = self.lambda_reg {
            if !(l >= 0.0 && l.is_finite()) {
                return bad("lambda_reg", format!("must be finite and >= 0, got {l}"));
            }
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr", format!("must be finite and >= 0, got {}", self.lr));
        }
        if !(self.tau > 0.0) {
            return bad("tau", format!("must be > 0, got {}", self.tau));
        }
        if self.n_views < 1 {
            return bad("n_views", "must be >= 1".into());
        }
        if !(self.select_frac > 0.0 && self.select_frac <= 1.0) {
            return bad("select_frac", format!("must be in (0, 1], got {}", self.select_frac));
        }
        if !(self.sigma_aug >= 0.0) {
            return bad("sigma_aug", format!("must be >= 0, got {}", self.sigma_aug));
        }
        if !(self.sam_rho >= 0.0) {
            return bad("sam_rho", format!("must be >= 0, got {}", self.sam_rho));
        }
        if !(self.probe_rho > 0.0) {
            return bad("probe_rho", format!("must be > 0, got {}", self.probe_rho));
        }
        Ok(())
    }
}

/// What a single gradient step minimizes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum StepLoss {
    Em,
    /// `λ·L_reg` alone.
    Reg(Regularizer, f64),
    /// `L_em + λ·L_reg`.
    Total(Regularizer, f64),
}

/// Value and prompt gradient of a per-sample loss.
#[allow(clippy::too_many_arguments)]
pub fn prompt_loss(
    enc: &SynthEncoder,
    classes: &Mat,
    views: &AugmentedViews,
    tau: f64,
    select_frac: f64,
    kind: StepLoss,
    theta: &Mat,
) -> Result<(f64, Mat)> {
    let mut tape = Tape::new();
    let c = tape.constant(classes.clone());
    let p = tape.param(theta.clone());
    let t = enc.encode_on(&mut tape, c, p)?;
    let loss = match kind {
        StepLoss::Em => losses::em_loss(&mut tape, t, views, tau, select_frac)?,
        StepLoss::Reg(reg, lambda) => {
            let r = losses::reg_loss(&mut tape, t, reg)?;
            let node = tape.scale(r.node, lambda);
            losses::LossValue { value: tape.scalar(node), node }
        }
        StepLoss::Total(reg, lambda) => {
            losses::total_loss(&mut tape, t, views, tau, select_frac, Some(reg), lambda)?
        }
    };
    if !loss.value.is_finite() {
        return Err(Error::Evaluation("non-finite loss".into()));
    }
    Ok((loss.value, tape.grad(loss.node, p)?))
}

fn em_value(enc: &SynthEncoder, classes: &Mat, views: &AugmentedViews, cfg: &TTAConfig, theta: &Mat) -> Result<f64> {
    let t = enc.encode_mats(classes, theta)?;
    losses::eval_on_features(&t, |tape, t| losses::em_loss(tape, t, views, cfg.tau, cfg.select_frac))
}

/// Outcome of adapting to one test sample.
#[derive(Clone, Debug)]
pub struct SampleOutcome {
    pub theta: Prompt,
    pub record: PredictionRecord,
    /// EM loss on the sample's views before and after adaptation.
    pub em_before: f64,
    pub em_after: f64,
    pub sharpness: Option<SharpnessReading>,
}

fn record_for(
    enc: &SynthEncoder,
    classes: &Mat,
    theta: &Mat,
    sample: &TestSample,
    index: usize,
    tau: f64,
) -> Result<PredictionRecord> {
    let t = enc.encode_mats(classes, theta)?;
    let p = losses::predict(&t, &sample.feature, tau)?;
    Ok(PredictionRecord::from_probs(index, p.probs, sample.label))
}

/// Applies the method's update(s) to `theta` for fixed views.
fn adapt_theta(
    enc: &SynthEncoder,
    classes: &Mat,
    theta: &Mat,
    views: &AugmentedViews,
    cfg: &TTAConfig,
) -> Result<Mat> {
    let step = |kind: StepLoss, th: &Mat| -> Result<Mat> {
        let (_, g) = prompt_loss(enc, classes, views, cfg.tau, cfg.select_frac, kind, th)?;
        gd_step(th, &g, cfg.lr)
    };
    match cfg.method {
        Method::Tpt | Method::FppInitTpt => step(StepLoss::Em, theta),
        Method::Ctpt | Method::Otpt => {
            let (reg, lambda) = cfg.regularizer().expect("regularized method");
            step(StepLoss::Total(reg, lambda), theta)
        }
        Method::TptSam => {
            let obj = |th: &Mat| prompt_loss(enc, classes, views, cfg.tau, cfg.select_frac, StepLoss::Em, th);
            Ok(sam_step(theta, &obj, cfg.lr, cfg.sam_rho)?.theta)
        }
        Method::Sequential => {
            let (reg, lambda) = cfg.regularizer().expect("sequential uses a regularizer");
            let (first, second) = match cfg.order {
                SeqOrder::EntEnt => (StepLoss::Em, StepLoss::Em),
                SeqOrder::EntReg => (StepLoss::Em, StepLoss::Reg(reg, lambda)),
                SeqOrder::RegEnt => (StepLoss::Reg(reg, lambda), StepLoss::Em),
            };
            let mid = step(first, theta)?;
            step(second, &mid)
        }
    }
}

/// One test-time adaptation from `theta_init` on a single sample. The
/// prompt is not carried over between samples.
///
/// If the loss turns non-finite the record falls back to the prediction at
/// `theta_init` and is marked failed.
pub fn tpt_step(
    enc: &SynthEncoder,
    classes: &Mat,
    theta_init: &Prompt,
    sample: &TestSample,
    index: usize,
    cfg: &TTAConfig,
    rng: &mut Rng,
) -> Result<SampleOutcome> {
    let views = augment(rng, &sample.feature, cfg.n_views, cfg.sigma_aug)?;
    let attempt = || -> Result<SampleOutcome> {
        let em_before = em_value(enc, classes, &views, cfg, &theta_init.0)?;
        let theta = adapt_theta(enc, classes, &theta_init.0, &views, cfg)?;
        if !theta.is_finite() {
            return Err(Error::Evaluation("non-finite prompt after the update".into()));
        }
        let em_after = em_value(enc, classes, &views, cfg, &theta)?;
        let sharpness = if cfg.record_sharpness {
            let obj = |th: &Mat| prompt_loss(enc, classes, &views, cfg.tau, cfg.select_frac, StepLoss::Em, th);
            Some(sharpness(&theta, &obj, cfg.probe_rho)?)
        } else {
            None
        };
        let mut record = record_for(enc, classes, &theta, sample, index, cfg.tau)?;
        record.sharpness = sharpness.as_ref().map(|s| s.value);
        Ok(SampleOutcome { theta: Prompt(theta), record, em_before, em_after, sharpness })
    };
    match attempt() {
        Ok(out) => Ok(out),
        Err(Error::Evaluation(_)) | Err(Error::Probe(_)) => {
            let mut record = record_for(enc, classes, &theta_init.0, sample, index, cfg.tau)?;
            record.failed = true;
            Ok(SampleOutcome {
                theta: theta_init.clone(),
                record,
                em_before: f64::NAN,
                em_after: f64::NAN,
                sharpness: None,
            })
        }
        Err(e) => Err(e),
    }
}

/// Sequential two-step ablation: the named single-loss steps in order.
#[allow(clippy::too_many_arguments)]
pub fn sequential_ablation(
    enc: &SynthEncoder,
    classes: &Mat,
    theta_init: &Prompt,
    sample: &TestSample,
    index: usize,
    order: SeqOrder,
    lambda: f64,
    cfg: &TTAConfig,
    rng: &mut Rng,
) -> Result<SampleOutcome> {
    let cfg = TTAConfig { method: Method::Sequential, order, lambda_reg: Some(lambda), ..cfg.clone() };
    tpt_step(enc, classes, theta_init, sample, index, &cfg, rng)
}

#[derive(Clone, Debug)]
pub struct EquivalenceResult {
    /// `max |A − B|` over prompt entries.
    pub deviation: f64,
    /// One regularized step from `θ0`.
    pub path_a: Mat,
    /// Regularizer-shifted start, then an EM step with the gradient taken at
    /// the shifted start plus the shift.
    pub path_b: Mat,
}

/// Checks that one regularized step at unit learning rate equals a plain EM
/// step taken from the regularizer-shifted initialization, with the EM
/// gradient evaluated back at the original point.
#[allow(clippy::too_many_arguments)]
pub fn equivalence_check(
    enc: &SynthEncoder,
    classes: &Mat,
    theta0: &Prompt,
    views: &AugmentedViews,
    tau: f64,
    select_frac: f64,
    reg: Regularizer,
    lambda: f64,
) -> Result<EquivalenceResult> {
    let lr = 1.0;
    let th0 = &theta0.0;
    let (_, g_total) = prompt_loss(enc, classes, views, tau, select_frac, StepLoss::Total(reg, lambda), th0)?;
    let path_a = gd_step(th0, &g_total, lr)?;

    let (_, g_reg) = prompt_loss(enc, classes, views, tau, select_frac, StepLoss::Reg(reg, lambda), th0)?;
    let theta_reg = th0.add_scaled(&g_reg, -lr)?;
    let eval_at = theta_reg.add_scaled(&g_reg, lr)?;
    let (_, g_em) = prompt_loss(enc, classes, views, tau, select_frac, StepLoss::Em, &eval_at)?;
    let path_b = gd_step(&theta_reg, &g_em, lr)?;
    Ok(EquivalenceResult { deviation: path_a.max_abs_diff(&path_b)?, path_a, path_b })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LambdaMode {
    /// `γ1 + γ2/K`.
    Dynamic,
    Fixed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FppOptimizer {
    Adamw,
    Gd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FPPConfig {
    pub gamma1: f64,
    pub gamma2: f64,
    /// Per-entry std of the class-embedding perturbation.
    pub sigma1: f64,
    /// Per-entry std of the prompt perturbation.
    pub sigma2: f64,
    /// Multiplies both perturbation std devs.
    pub sigma_scale: f64,
    pub iterations: usize,
    pub base_lr: f64,
    pub optimizer: FppOptimizer,
    pub lambda_mode: LambdaMode,
    /// Weight used when `lambda_mode = fixed`.
    pub lambda_fixed: f64,
    pub align_distance: Distance,
    pub flat_distance: Distance,
    /// Perturbation draws used to compare the objective before and after.
    pub n_eval: usize,
}

impl Default for FPPConfig {
    fn default() -> Self {
        Self {
            gamma1: 1.0,
            gamma2: 0.15,
            sigma1: 0.2,
            sigma2: 0.3,
            sigma_scale: 1.0,
            iterations: 1000,
            base_lr: 0.01,
            optimizer: FppOptimizer::Adamw,
            lambda_mode: LambdaMode::Dynamic,
            lambda_fixed: 1.0,
            align_distance: Distance::SqL2,
            flat_distance: Distance::Cos,
            n_eval: 32,
        }
    }
}

impl FPPConfig {
    pub fn lambda(&self, k: usize) -> f64 {
        match self.lambda_mode {
            LambdaMode::Dynamic => fpp_lambda(self.gamma1, self.gamma2, k),
            LambdaMode::Fixed => self.lambda_fixed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: String| Err(Error::Config(format!("fpp.{key}: {msg}")));
        if self.iterations < 1 {
            return bad("iterations", "must be >= 1".into());
        }
        for (key, v) in [("sigma1", self.sigma1), ("sigma2", self.sigma2), ("sigma_scale", self.sigma_scale)] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(key, format!("must be finite and >= 0, got {v}"));
            }
        }
        if self.lambda_mode == LambdaMode::Dynamic && !(self.gamma1 > 0.0 && self.gamma2 > 0.0) {
            return bad("gamma1", format!("gammas must be > 0, got {} and {}", self.gamma1, self.gamma2));
        }
        if self.lambda_mode == LambdaMode::Fixed && !(self.lambda_fixed >= 0.0) {
            return bad("lambda_fixed", format!("must be >= 0, got {}", self.lambda_fixed));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad("base_lr", format!("must be finite and > 0, got {}", self.base_lr));
        }
        if self.n_eval < 1 {
            return bad("n_eval", "must be >= 1".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub lr: f64,
    pub lambda: f64,
    pub total: f64,
    pub align: f64,
    pub flat: f64,
}

#[derive(Clone, Debug)]
pub struct FppOutcome {
    pub theta: Prompt,
    /// Objective per iteration, evaluated before that iteration's update.
    pub trace: Vec<TraceRow>,
    /// Objective at the initial and final prompts, averaged over the same
    /// `n_eval` perturbation draws.
    pub initial_eval: f64,
    pub final_eval: f64,
}

fn fpp_eval(
    enc: &SynthEncoder,
    classes: &Mat,
    theta: &Mat,
    theta_zs: &Prompt,
    draws: &[(Mat, Mat)],
    lambda: f64,
    cfg: &FPPConfig,
) -> Result<f64> {
    let mut total = 0.0;
    for (e1, e2) in draws {
        let mut tape = Tape::new();
        let c = tape.constant(classes.clone());
        let p = tape.constant(theta.clone());
        let (l, _, _) = losses::fpp_objective(
            &mut tape, enc, c, p, theta_zs, e1, e2, lambda, cfg.align_distance, cfg.flat_distance,
        )?;
        total += l.value;
    }
    Ok(total / draws.len() as f64)
}

/// Pretrains a prompt to keep its features close to those of `theta_zs`
/// while making them insensitive to Gaussian perturbations of the class
/// embeddings and of the prompt. Starts at `theta_zs`; one perturbation
/// draw per iteration.
pub fn fpp_pretrain(
    enc: &SynthEncoder,
    classes: &Mat,
    theta_zs: &Prompt,
    cfg: &FPPConfig,
    rng: &mut Rng,
) -> Result<FppOutcome> {
    cfg.validate()?;
    let k = classes.rows();
    let lambda = cfg.lambda(k);
    let s1 = cfg.sigma1 * cfg.sigma_scale;
    let s2 = cfg.sigma2 * cfg.sigma_scale;
    let (pr, pc) = theta_zs.0.shape();
    let schedule = CosineSchedule { base_lr: cfg.base_lr, total_steps: cfg.iterations };
    let mut state = OptState::adamw((pr, pc), schedule, AdamWConfig::default());

    let mut eval_rng = rng.fork(FPP_EVAL_STREAM);
    let draws: Vec<(Mat, Mat)> = (0..cfg.n_eval)
        .map(|_| (eval_rng.gaussian_mat(k, classes.cols(), s1), eval_rng.gaussian_mat(pr, pc, s2)))
        .collect();
    let initial_eval = fpp_eval(enc, classes, &theta_zs.0, theta_zs, &draws, lambda, cfg)?;

    let mut theta = theta_zs.0.clone();
    let mut trace = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let e1 = rng.gaussian_mat(k, classes.cols(), s1);
        let e2 = rng.gaussian_mat(pr, pc, s2);
        let mut tape = Tape::new();
        let c = tape.constant(classes.clone());
        let p = tape.param(theta.clone());
        let (total, align, flat) = losses::fpp_objective(
            &mut tape, enc, c, p, theta_zs, &e1, &e2, lambda, cfg.align_distance, cfg.flat_distance,
        )?;
        let lr = match cfg.optimizer {
            FppOptimizer::Adamw => state.current_lr(),
            FppOptimizer::Gd => schedule.lr(it),
        };
        trace.push(TraceRow { iteration: it + 1, lr, lambda, total: total.value, align: align.value, flat: flat.value });
        if !total.value.is_finite() {
            return Err(Error::RunFailed(format!("FPP objective became non-finite at iteration {}", it + 1)));
        }
        let g = tape.grad(total.node, p)?;
        theta = match cfg.optimizer {
            FppOptimizer::Adamw => adamw_step(&mut state, &theta, &g)?,
            FppOptimizer::Gd => gd_step(&theta, &g, lr)?,
        };
    }
    let final_eval = fpp_eval(enc, classes, &theta, theta_zs, &draws, lambda, cfg)?;
    Ok(FppOutcome { theta: Prompt(theta), trace, initial_eval, final_eval })
}

/// Everything needed to run one method on a task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub tta: TTAConfig,
    pub fpp: FPPConfig,
    pub bins: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self { tta: TTAConfig::default(), fpp: FPPConfig::default(), bins: DEFAULT_BINS }
    }
}

impl ExperimentConfig {
    pub fn with_method(method: Method) -> Self {
        Self { tta: TTAConfig::with_method(method), ..Self::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub seed: u64,
    pub method: Method,
    pub report: CalibrationReport,
    pub failed_samples: usize,
    /// Prompt every sample started from.
    pub theta_init: Prompt,
    #[serde(skip)]
    pub log: PredictionLog,
    #[serde(skip)]
    pub wall_time_s: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    /// Sample standard deviation (`n − 1`); 0 for a single value.
    pub std: f64,
}

impl Stat {
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let std = if xs.len() < 2 {
            0.0
        } else {
            (xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Self { mean, std }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub n_seeds: usize,
    pub acc: Stat,
    pub ece: Stat,
    pub sce: Stat,
    pub aece: Stat,
    pub mce: Stat,
    pub aurc: Stat,
    pub sharpness: Option<Stat>,
}

impl Aggregate {
    pub fn of(runs: &[RunResult]) -> Self {
        let pick = |f: fn(&CalibrationReport) -> f64| Stat::of(&runs.iter().map(|r| f(&r.report)).collect::<Vec<_>>());
        let sharp: Option<Vec<f64>> = runs.iter().map(|r| r.report.mean_sharpness).collect();
        Self {
            n_seeds: runs.len(),
            acc: pick(|r| r.accuracy),
            ece: pick(|r| r.ece),
            sce: pick(|r| r.sce),
            aece: pick(|r| r.aece),
            mce: pick(|r| r.mce),
            aurc: pick(|r| r.aurc),
            sharpness: sharp.map(|s| Stat::of(&s)),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ExperimentResult {
    pub runs: Vec<RunResult>,
    pub aggregate: Aggregate,
}

/// Per-sample random stream: depends on the run seed and the sample index
/// only.
pub fn sample_rng(seed: u64, index: usize) -> Rng {
    Rng::keyed(seed, &[SAMPLE_STREAM, index as u64])
}

/// Random stream of the FPP pretraining for a run seed.
pub fn fpp_rng(seed: u64) -> Rng {
    Rng::keyed(seed, &[FPP_STREAM])
}

/// Initial prompt for a run: the zero-shot prompt, or its FPP-pretrained
/// version for `fpp-init-tpt`.
pub fn initial_prompt(task: &SynthTask, cfg: &ExperimentConfig, seed: u64) -> Result<Prompt> {
    match cfg.tta.method {
        Method::FppInitTpt => {
            let mut rng = fpp_rng(seed);
            Ok(fpp_pretrain(&task.encoder, &task.classes.embeddings, &task.theta_zs, &cfg.fpp, &mut rng)?.theta)
        }
        _ => Ok(task.theta_zs.clone()),
    }
}

/// Adapts to every test sample from `theta_init` and scores the log.
pub fn run_with_prompt(task: &SynthTask, cfg: &ExperimentConfig, seed: u64, theta_init: &Prompt) -> Result<RunResult> {
    cfg.tta.validate()?;
    let start = Instant::now();
    let classes = &task.classes.embeddings;
    let records = task
        .samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let mut rng = sample_rng(seed, i);
            Ok(tpt_step(&task.encoder, classes, theta_init, s, i, &cfg.tta, &mut rng)?.record)
        })
        .collect::<Result<Vec<_>>>()?;
    let failed_samples = records.iter().filter(|r| r.failed).count();
    if failed_samples * 20 > records.len() {
        return Err(Error::RunFailed(format!(
            "{failed_samples} of {} samples failed (limit 5%)",
            records.len()
        )));
    }
    let log = PredictionLog::new(records)?;
    let report = CalibrationReport::compute(&log, cfg.bins)?;
    Ok(RunResult {
        seed,
        method: cfg.tta.method,
        report,
        failed_samples,
        theta_init: theta_init.clone(),
        log,
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}

/// Full pipeline for each seed, then mean and std across seeds.
pub fn run_experiment(task: &SynthTask, cfg: &ExperimentConfig, seeds: &[u64]) -> Result<ExperimentResult> {
    if seeds.is_empty() {
        return Err(Error::Config("need at least one seed".into()));
    }
    cfg.tta.validate()?;
    cfg.fpp.validate()?;
    let runs = seeds
        .iter()
        .map(|&seed| {
            let theta = initial_prompt(task, cfg, seed)?;
            run_with_prompt(task, cfg, seed, &theta)
        })
        .collect::<Result<Vec<_>>>()?;
    let aggregate = Aggregate::of(&runs);
    Ok(ExperimentResult { runs, aggregate })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{gen_task, TaskSpec};

    fn small_task(seed: u64) -> SynthTask {
        let spec = TaskSpec { k: 5, n_test: 40, ..TaskSpec::default() };
        gen_task(&mut Rng::new(seed), &spec).unwrap()
    }

    #[test]
    fn zero_lr_reproduces_zero_shot() {
        let task = small_task(1);
        let mut cfg = ExperimentConfig::with_method(Method::Tpt);
        cfg.tta.lr = 0.0;
        cfg.tta.record_sharpness = false;
        let res = run_experiment(&task, &cfg, &[3]).unwrap();
        assert_eq!(res.runs[0].report.accuracy, task.zero_shot_accuracy);
    }

    #[test]
    fn equivalence_is_exact_to_rounding() {
        let task = small_task(2);
        let mut rng = Rng::new(5);
        for (i, s) in task.samples.iter().take(5).enumerate() {
            let views = augment(&mut rng, &s.feature, 16, 0.5).unwrap();
            for reg in [Regularizer::Ctpt, Regularizer::Otpt] {
                let r = equivalence_check(
                    &task.encoder, &task.classes.embeddings, &task.theta_zs, &views, 0.01, 0.1, reg, 0.3,
                )
                .unwrap();
                assert!(r.deviation < 1e-12, "sample {i} {reg:?}: {}", r.deviation);
            }
        }
    }

    #[test]
    fn zero_sigma_fpp_stays_at_init() {
        let task = small_task(3);
        let cfg = FPPConfig { sigma1: 0.0, sigma2: 0.0, iterations: 5, ..FPPConfig::default() };
        let out = fpp_pretrain(&task.encoder, &task.classes.embeddings, &task.theta_zs, &cfg, &mut Rng::new(1)).unwrap();
        assert_eq!(out.theta, task.theta_zs);
        assert!(out.trace.iter().all(|r| r.total == 0.0));
        let cfg = FPPConfig { iterations: 0, ..FPPConfig::default() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn dynamic_lambda_used_every_step() {
        let task = gen_task(&mut Rng::new(4), &TaskSpec { n_test: 20, ..TaskSpec::default() }).unwrap();
        let cfg = FPPConfig { iterations: 3, ..FPPConfig::default() };
        let out = fpp_pretrain(&task.encoder, &task.classes.embeddings, &task.theta_zs, &cfg, &mut Rng::new(1)).unwrap();
        assert!(out.trace.iter().all(|r| (r.lambda - 1.015).abs() < 1e-15));
    }

    #[test]
    fn stat_uses_sample_std() {
        let s = Stat::of(&[1.0, 2.0, 4.0]);
        let mean = 7.0 / 3.0;
        let var = ((1.0f64 - mean).powi(2) + (2.0f64 - mean).powi(2) + (4.0f64 - mean).powi(2)) / 2.0;
        assert!((s.mean - mean).abs() < 1e-15 && (s.std - var.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn lambda_defaults_follow_method() {
        assert_eq!(TTAConfig::with_method(Method::Ctpt).regularizer(), Some((Regularizer::Ctpt, 50.0)));
        assert_eq!(TTAConfig::with_method(Method::Otpt).regularizer(), Some((Regularizer::Otpt, 0.5)));
        assert_eq!(TTAConfig::with_method(Method::Tpt).regularizer(), None);
    }

    #[test]
    fn reg_then_ent_with_zero_lambda_is_one_em_step() {
        let task = small_task(6);
        let s = &task.samples[0];
        let cfg = TTAConfig { record_sharpness: false, ..TTAConfig::default() };
        let seq = sequential_ablation(
            &task.encoder, &task.classes.embeddings, &task.theta_zs, s, 0, SeqOrder::RegEnt, 0.0, &cfg,
            &mut sample_rng(1, 0),
        )
        .unwrap();
        let plain = tpt_step(&task.encoder, &task.classes.embeddings, &task.theta_zs, s, 0, &cfg, &mut sample_rng(1, 0)).unwrap();
        assert_eq!(seq.theta, plain.theta);
    }
}
