//! Synthetic text encoder and task generator.
//!
//! The encoder maps a class set `C` (K × E) and a prompt `θ` (P × E) to unit
//! text features (K × D):
//!
//! ```text
//! row k = normalize(W2 · tanh(W1 · [mean_p θ_p ; c_k] + b1))
//! ```
//!
//! It is smooth, fixed after construction, and records on a [`Tape`] so that
//! gradients with respect to both `θ` and `C` are available.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses;
use crate::numkit::{Mat, Rng, Tape, Var, Vector};

const WEIGHT_STREAM: u64 = 0xE4C0_DE00;
/// Std of `W1` entries, relative to `1/sqrt(2E)`.
const W1_GAIN: f64 = 1.5;
const B1_STD: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderDims {
    /// Prompt tokens.
    pub p: usize,
    /// Token embedding width.
    pub e: usize,
    /// Hidden width.
    pub h: usize,
    /// Feature dimension.
    pub d: usize,
}

impl EncoderDims {
    pub fn validate(&self) -> Result<()> {
        if self.p < 1 || self.e < 2 || self.h < 2 || self.d < 2 {
            return Err(Error::InvalidDimension(format!(
                "encoder dims need P >= 1 and E, H, D >= 2, got {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Tanh,
    Identity,
}

/// Learnable prompt token embeddings, `P × E`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Prompt(pub Mat);

impl Prompt {
    pub fn tokens(&self) -> &Mat {
        &self.0
    }
}

/// Class-name embeddings, `K × E`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassSet {
    pub embeddings: Mat,
    pub names: Vec<String>,
}

impl ClassSet {
    pub fn new(embeddings: Mat) -> Result<Self> {
        if embeddings.rows() < 2 {
            return Err(Error::InvalidDimension(format!(
                "need at least 2 classes, got {}",
                embeddings.rows()
            )));
        }
        let names = (0..embeddings.rows()).map(|k| format!("class_{k}")).collect();
        Ok(Self { embeddings, names })
    }

    pub fn k(&self) -> usize {
        self.embeddings.rows()
    }

    /// Same names, perturbed embeddings.
    pub fn perturbed(&self, eps: &Mat) -> Result<Self> {
        Ok(Self { embeddings: self.embeddings.add(eps)?, names: self.names.clone() })
    }
}

/// Two-layer encoder with fixed random weights.
#[derive(Clone, Debug)]
pub struct SynthEncoder {
    dims: EncoderDims,
    weight_seed: u64,
    w1: Mat,
    b1: Mat,
    w2: Mat,
    activation: Activation,
    normalize_output: bool,
}

impl SynthEncoder {
    pub fn new(dims: EncoderDims, weight_seed: u64) -> Result<Self> {
        dims.validate()?;
        let mut rng = Rng::keyed(weight_seed, &[WEIGHT_STREAM]);
        let in_dim = 2 * dims.e;
        let w1 = rng.gaussian_mat(dims.h, in_dim, W1_GAIN / (in_dim as f64).sqrt());
        let b1 = rng.gaussian_mat(1, dims.h, B1_STD);
        let w2 = rng.gaussian_mat(dims.d, dims.h, 1.0 / (dims.h as f64).sqrt());
        Ok(Self {
            dims,
            weight_seed,
            w1,
            b1,
            w2,
            activation: Activation::Tanh,
            normalize_output: true,
        })
    }

    /// Same weights with the nonlinearity and output normalization removed.
    /// Its Jacobians are constant and known in closed form, which makes it
    /// a reference for the curvature probes.
    pub fn linear_fixture(dims: EncoderDims, weight_seed: u64) -> Result<Self> {
        let mut enc = Self::new(dims, weight_seed)?;
        enc.activation = Activation::Identity;
        enc.normalize_output = false;
        Ok(enc)
    }

    pub fn dims(&self) -> EncoderDims {
        self.dims
    }

    pub fn weight_seed(&self) -> u64 {
        self.weight_seed
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn normalizes_output(&self) -> bool {
        self.normalize_output
    }

    /// Copy with `W2` multiplied by `s`.
    pub fn with_w2_scale(&self, s: f64) -> Self {
        let mut enc = self.clone();
        enc.w2 = enc.w2.scale(s);
        enc
    }

    /// Copy whose prompt-half of `W1` is multiplied by `gain`. Encoding the
    /// prompt `θ / gain` with it reproduces the original features exactly
    /// while every prompt Jacobian is multiplied by `gain`.
    pub fn with_prompt_gain(&self, gain: f64) -> Self {
        let mut enc = self.clone();
        let e = self.dims.e;
        for r in 0..enc.w1.rows() {
            for x in &mut enc.w1.row_mut(r)[..e] {
                *x *= gain;
            }
        }
        enc
    }

    /// Prompt-half (`H × E`) and class-half (`H × E`) of `W1`.
    pub fn w1_blocks(&self) -> (Mat, Mat) {
        let e = self.dims.e;
        let h = self.dims.h;
        let mut prompt = Vec::with_capacity(h * e);
        let mut class = Vec::with_capacity(h * e);
        for r in 0..h {
            prompt.extend_from_slice(&self.w1.row(r)[..e]);
            class.extend_from_slice(&self.w1.row(r)[e..]);
        }
        (Mat::from_raw(h, e, prompt), Mat::from_raw(h, e, class))
    }

    pub fn w2(&self) -> &Mat {
        &self.w2
    }

    fn check(&self, classes: &Mat, prompt: &Mat) -> Result<()> {
        if classes.cols() != self.dims.e || prompt.cols() != self.dims.e || prompt.rows() != self.dims.p {
            return Err(Error::Shape(format!(
                "encoder expects classes Kx{e} and prompt {p}x{e}, got {}x{} and {}x{}",
                classes.rows(),
                classes.cols(),
                prompt.rows(),
                prompt.cols(),
                e = self.dims.e,
                p = self.dims.p
            )));
        }
        if classes.rows() < 2 {
            return Err(Error::InvalidDimension("need at least 2 classes".into()));
        }
        Ok(())
    }

    /// Records the forward pass; `classes` and `prompt` may be parameters or
    /// constants.
    pub fn encode_on(&self, tape: &mut Tape, classes: Var, prompt: Var) -> Result<Var> {
        self.check(tape.value(classes), tape.value(prompt))?;
        let k = tape.value(classes).rows();
        let pooled = tape.mean_rows(prompt);
        let pooled = tape.broadcast_rows(pooled, k)?;
        let x = tape.concat_cols(pooled, classes)?;
        let w1 = tape.constant(self.w1.clone());
        let b1 = tape.constant(self.b1.clone());
        let w2 = tape.constant(self.w2.clone());
        let z = tape.matmul_nt(x, w1)?;
        let z = tape.add_row(z, b1)?;
        let a = match self.activation {
            Activation::Tanh => tape.tanh(z),
            Activation::Identity => z,
        };
        let out = tape.matmul_nt(a, w2)?;
        Ok(if self.normalize_output { tape.normalize_rows(out) } else { out })
    }

    /// Text features `T` (K × D) for a class set and prompt.
    pub fn encode(&self, classes: &ClassSet, prompt: &Prompt) -> Result<Mat> {
        self.encode_mats(&classes.embeddings, &prompt.0)
    }

    pub fn encode_mats(&self, classes: &Mat, prompt: &Mat) -> Result<Mat> {
        let mut tape = Tape::new();
        let c = tape.constant(classes.clone());
        let p = tape.constant(prompt.clone());
        let t = self.encode_on(&mut tape, c, p)?;
        Ok(tape.value(t).clone())
    }
}

/// Generator parameters for a synthetic classification task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSpec {
    pub k: usize,
    pub p: usize,
    pub e: usize,
    pub h: usize,
    pub d: usize,
    /// Per-entry std of the zero-shot prompt's offset from the ground truth.
    pub sigma_offset: f64,
    /// Image-feature noise; isotropic with expected norm `sigma_noise`.
    pub sigma_noise: f64,
    /// Length of the fixed domain-shift vector added to every feature.
    pub sigma_shift: f64,
    /// Std of the class-embedding entries. Smaller values make the class
    /// features share more of a common direction.
    pub class_std: f64,
    pub n_test: usize,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            k: 10,
            p: 4,
            e: 16,
            h: 128,
            d: 64,
            sigma_offset: 0.6,
            sigma_noise: 1.6,
            sigma_shift: 0.3,
            class_std: 0.3,
            n_test: 300,
        }
    }
}

impl TaskSpec {
    pub fn dims(&self) -> EncoderDims {
        EncoderDims { p: self.p, e: self.e, h: self.h, d: self.d }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 2 || self.p < 2 || self.e < 2 || self.h < 2 || self.d < 2 {
            return Err(Error::InvalidDimension(format!(
                "task dims must all be >= 2, got K={} P={} E={} H={} D={}",
                self.k, self.p, self.e, self.h, self.d
            )));
        }
        if self.n_test < self.k {
            return Err(Error::InvalidDimension(format!(
                "n_test ({}) must be >= K ({})",
                self.n_test, self.k
            )));
        }
        for (name, v) in [
            ("sigma_offset", self.sigma_offset),
            ("sigma_noise", self.sigma_noise),
            ("sigma_shift", self.sigma_shift),
            ("class_std", self.class_std),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("task.{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestSample {
    pub feature: Vector,
    pub label: usize,
}

/// A generated task: classes, ground-truth and zero-shot prompts, and test
/// samples on `S^{D-1}`.
#[derive(Clone, Debug)]
pub struct SynthTask {
    pub spec: TaskSpec,
    pub seed: u64,
    pub encoder: SynthEncoder,
    pub classes: ClassSet,
    pub theta_star: Prompt,
    pub theta_zs: Prompt,
    pub shift: Vector,
    pub samples: Vec<TestSample>,
    pub zero_shot_accuracy: f64,
    /// Number of generation attempts, including the accepted one.
    pub attempts: usize,
}

const MAX_ATTEMPTS: usize = 20;

/// Generates a task whose zero-shot accuracy lies strictly between
/// `1/K + 0.05` and `0.98`, retrying on fresh substreams of `rng`.
pub fn gen_task(rng: &mut Rng, spec: &TaskSpec) -> Result<SynthTask> {
    spec.validate()?;
    let seed = rng.seed();
    let encoder = SynthEncoder::new(spec.dims(), rng.next_u64())?;
    let lower = 1.0 / spec.k as f64 + 0.05;
    for attempt in 0..MAX_ATTEMPTS {
        let mut sub = rng.fork(attempt as u64);
        let task = gen_attempt(&mut sub, spec, seed, encoder.clone(), attempt + 1)?;
        if task.zero_shot_accuracy > lower && task.zero_shot_accuracy < 0.98 {
            return Ok(task);
        }
    }
    Err(Error::UngeneratableTask { attempts: MAX_ATTEMPTS, params: format!("{spec:?}") })
}

fn gen_attempt(
    rng: &mut Rng,
    spec: &TaskSpec,
    seed: u64,
    encoder: SynthEncoder,
    attempts: usize,
) -> Result<SynthTask> {
    let classes = ClassSet::new(rng.gaussian_mat(spec.k, spec.e, spec.class_std))?;
    let theta_star = Prompt(rng.gaussian_mat(spec.p, spec.e, 1.0));
    let offset = rng.gaussian_mat(spec.p, spec.e, spec.sigma_offset);
    let theta_zs = Prompt(theta_star.0.add(&offset)?);
    let shift = Vector::from_raw(rng.gaussian_vec(spec.d, 1.0)).normalized();

    let prototypes = encoder.encode(&classes, &theta_star)?;
    let noise_std = spec.sigma_noise / (spec.d as f64).sqrt();
    let samples = (0..spec.n_test)
        .map(|_| {
            let label = rng.below(spec.k);
            let noise = rng.gaussian_vec(spec.d, noise_std);
            let raw: Vec<f64> = prototypes
                .row(label)
                .iter()
                .zip(&noise)
                .zip(shift.as_slice())
                .map(|((t, n), s)| t + n + spec.sigma_shift * s)
                .collect();
            TestSample { feature: Vector::from_raw(raw).normalized(), label }
        })
        .collect::<Vec<_>>();

    let zs_features = encoder.encode(&classes, &theta_zs)?;
    let correct = samples
        .iter()
        .filter(|s| losses::argmax_class(&zs_features, &s.feature) == s.label)
        .count();
    let zero_shot_accuracy = correct as f64 / samples.len() as f64;

    Ok(SynthTask {
        spec: spec.clone(),
        seed,
        encoder,
        classes,
        theta_star,
        theta_zs,
        shift,
        samples,
        zero_shot_accuracy,
        attempts,
    })
}

/// Version of the task JSON layout written by [`SynthTask::to_json`].
pub const TASK_SCHEMA_VERSION: u32 = 1;

/// On-disk form of a task. The encoder is stored as its dims and weight
/// seed and rebuilt on load.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TaskFile {
    schema_version: u32,
    spec: TaskSpec,
    seed: u64,
    weight_seed: u64,
    classes: ClassSet,
    theta_star: Prompt,
    theta_zs: Prompt,
    shift: Vector,
    samples: Vec<TestSample>,
    zero_shot_accuracy: f64,
    attempts: usize,
}

impl SynthTask {
    pub fn to_json(&self) -> Result<String> {
        let file = TaskFile {
            schema_version: TASK_SCHEMA_VERSION,
            spec: self.spec.clone(),
            seed: self.seed,
            weight_seed: self.encoder.weight_seed(),
            classes: self.classes.clone(),
            theta_star: self.theta_star.clone(),
            theta_zs: self.theta_zs.clone(),
            shift: self.shift.clone(),
            samples: self.samples.clone(),
            zero_shot_accuracy: self.zero_shot_accuracy,
            attempts: self.attempts,
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let f: TaskFile = serde_json::from_str(text)?;
        if f.schema_version != TASK_SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "task schema version {} is not supported (expected {TASK_SCHEMA_VERSION})",
                f.schema_version
            )));
        }
        f.spec.validate()?;
        let encoder = SynthEncoder::new(f.spec.dims(), f.weight_seed)?;
        encoder.check(&f.classes.embeddings, &f.theta_zs.0)?;
        encoder.check(&f.classes.embeddings, &f.theta_star.0)?;
        for s in &f.samples {
            if s.label >= f.classes.k() || s.feature.len() != f.spec.d {
                return Err(Error::Shape(format!("sample with label {} and dim {} does not fit the task", s.label, s.feature.len())));
            }
        }
        Ok(Self {
            spec: f.spec,
            seed: f.seed,
            encoder,
            classes: f.classes,
            theta_star: f.theta_star,
            theta_zs: f.theta_zs,
            shift: f.shift,
            samples: f.samples,
            zero_shot_accuracy: f.zero_shot_accuracy,
            attempts: f.attempts,
        })
    }
}

/// A test feature together with its augmented views.
#[derive(Clone, Debug)]
pub struct AugmentedViews {
    pub base: Vector,
    /// `N × D`; row 0 is the unperturbed feature.
    pub views: Mat,
    pub sigma_aug: f64,
}

impl AugmentedViews {
    pub fn n(&self) -> usize {
        self.views.rows()
    }
}

/// Row 0 is `v`; rows `1..N` are `normalize(v + noise)` with isotropic noise
/// of expected norm `sigma_aug`.
pub fn augment(rng: &mut Rng, v: &Vector, n: usize, sigma_aug: f64) -> Result<AugmentedViews> {
    if n < 1 {
        return Err(Error::InvalidDimension("need at least one view".into()));
    }
    if (v.norm() - 1.0).abs() > 1e-9 {
        return Err(Error::Shape(format!("base feature must be unit norm, got {}", v.norm())));
    }
    let d = v.len();
    let std = sigma_aug / (d as f64).sqrt();
    let mut data = Vec::with_capacity(n * d);
    data.extend_from_slice(v.as_slice());
    for _ in 1..n {
        if sigma_aug == 0.0 {
            data.extend_from_slice(v.as_slice());
            continue;
        }
        let view: Vec<f64> = v.as_slice().iter().map(|x| x + std * rng.gaussian()).collect();
        data.extend(Vector::from_raw(view).normalized().into_inner());
    }
    Ok(AugmentedViews { base: v.clone(), views: Mat::from_raw(n, d, data), sigma_aug })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_dims() -> EncoderDims {
        EncoderDims { p: 3, e: 5, h: 8, d: 6 }
    }

    #[test]
    fn encode_rows_are_unit_and_deterministic() {
        let enc = SynthEncoder::new(small_dims(), 3).unwrap();
        let mut rng = Rng::new(1);
        let c = ClassSet::new(rng.gaussian_mat(4, 5, 1.0)).unwrap();
        let th = Prompt(rng.gaussian_mat(3, 5, 1.0));
        let t1 = enc.encode(&c, &th).unwrap();
        let t2 = SynthEncoder::new(small_dims(), 3).unwrap().encode(&c, &th).unwrap();
        assert_eq!(t1, t2);
        for n in t1.row_norms() {
            assert!((n - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn encode_rejects_shape_mismatch() {
        let enc = SynthEncoder::new(small_dims(), 3).unwrap();
        let c = ClassSet::new(Mat::zeros(4, 4)).unwrap();
        let th = Prompt(Mat::zeros(3, 5));
        assert!(matches!(enc.encode(&c, &th), Err(Error::Shape(_))));
    }

    #[test]
    fn prompt_gain_reparametrization_preserves_features() {
        let enc = SynthEncoder::new(small_dims(), 9).unwrap();
        let mut rng = Rng::new(2);
        let c = ClassSet::new(rng.gaussian_mat(4, 5, 1.0)).unwrap();
        let th = Prompt(rng.gaussian_mat(3, 5, 1.0));
        let scaled = Prompt(th.0.scale(0.5));
        let a = enc.encode(&c, &th).unwrap();
        let b = enc.with_prompt_gain(2.0).encode(&c, &scaled).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() < 1e-12);
    }

    #[test]
    fn noiseless_task_is_rejected() {
        let spec = TaskSpec { sigma_offset: 0.0, sigma_noise: 0.0, sigma_shift: 0.0, ..TaskSpec::default() };
        let err = gen_task(&mut Rng::new(7), &spec).unwrap_err();
        assert!(matches!(err, Error::UngeneratableTask { attempts: 20, .. }), "{err}");
    }

    #[test]
    fn augment_edge_cases() {
        let mut rng = Rng::new(4);
        let v = crate::numkit::sphere_uniform(&mut rng, 8).unwrap();
        let same = augment(&mut rng, &v, 5, 0.0).unwrap();
        for r in 0..5 {
            assert_eq!(same.views.row(r), v.as_slice());
        }
        let one = augment(&mut rng, &v, 1, 0.3).unwrap();
        assert_eq!(one.n(), 1);
        assert_eq!(one.views.row(0), v.as_slice());
        let many = augment(&mut rng, &v, 16, 0.5).unwrap();
        for n in many.views.row_norms() {
            assert!((n - 1.0).abs() < 1e-12);
        }
        assert!(augment(&mut rng, &v, 0, 0.1).is_err());
    }

    #[test]
    fn task_json_round_trip_is_exact() {
        let spec = TaskSpec { n_test: 40, ..TaskSpec::default() };
        let task = gen_task(&mut Rng::new(11), &spec).unwrap();
        let back = SynthTask::from_json(&task.to_json().unwrap()).unwrap();
        assert_eq!(back.classes, task.classes);
        assert_eq!(back.theta_zs, task.theta_zs);
        assert_eq!(back.samples, task.samples);
        assert_eq!(back.encoder.encode(&back.classes, &back.theta_zs).unwrap(), task.encoder.encode(&task.classes, &task.theta_zs).unwrap());
        let bad = task.to_json().unwrap().replace("\"schema_version\":1", "\"schema_version\":9");
        assert!(SynthTask::from_json(&bad).is_err());
    }

    #[test]
    fn generation_is_reproducible() {
        let spec = TaskSpec { n_test: 50, ..TaskSpec::default() };
        let a = gen_task(&mut Rng::new(21), &spec).unwrap();
        let b = gen_task(&mut Rng::new(21), &spec).unwrap();
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
    }

    #[test]
    fn seed_seven_accuracy_fixture() {
        let task = gen_task(&mut Rng::new(7), &TaskSpec::default()).unwrap();
        let acc = task.zero_shot_accuracy;
        assert!(acc > 0.15 && acc < 0.98, "{acc}");
        assert_eq!((task.attempts, (acc * 300.0).round() as usize), SEED7_FIXTURE);
        for s in &task.samples {
            assert!(s.label < 10);
            assert!((s.feature.norm() - 1.0).abs() < 1e-12);
        }
    }

    /// (attempts, correct out of 300) observed for seed 7 with the defaults.
    const SEED7_FIXTURE: (usize, usize) = (1, 158);

    #[test]
    fn label_histogram_is_multinomial() {
        let spec = TaskSpec { n_test: 1000, ..TaskSpec::default() };
        let task = gen_task(&mut Rng::new(3), &spec).unwrap();
        let mut counts = [0usize; 10];
        for s in &task.samples {
            counts[s.label] += 1;
        }
        let mean = 100.0;
        let sd = (1000.0 * 0.1 * 0.9f64).sqrt();
        for c in counts {
            assert!((c as f64 - mean).abs() <= 3.0 * sd, "{counts:?}");
        }
    }

    fn spectral_norm(m: &Mat) -> f64 {
        let mut x = vec![1.0; m.cols()];
        let mut s = 0.0;
        for _ in 0..500 {
            let y = m.matmul(&Mat::from_raw(m.cols(), 1, x.clone())).unwrap();
            let z = m.transpose().matmul(&y).unwrap();
            let n = z.frobenius();
            s = n.sqrt();
            x = z.data().iter().map(|v| v / n).collect();
        }
        s
    }

    #[test]
    fn prompt_perturbation_is_lipschitz_bounded() {
        let dims = EncoderDims { p: 4, e: 16, h: 64, d: 64 };
        let enc = SynthEncoder::new(dims, 5).unwrap();
        let mut rng = Rng::new(6);
        let c = ClassSet::new(rng.gaussian_mat(10, 16, 1.0)).unwrap();
        let th = Prompt(rng.gaussian_mat(4, 16, 1.0));
        let (w1p, _) = enc.w1_blocks();
        // Pre-normalization row norms at θ.
        let raw = SynthEncoder { normalize_output: false, ..enc.clone() }.encode(&c, &th).unwrap();
        let inv_sq: f64 = raw.row_norms().iter().map(|n| 1.0 / (n * n)).sum();
        let lip = 2.0 * spectral_norm(&w1p) * spectral_norm(enc.w2()) * inv_sq.sqrt() / (dims.p as f64).sqrt();
        let base = enc.encode(&c, &th).unwrap();
        for i in 0..100 {
            let delta = rng.gaussian_mat(4, 16, 0.01 * (1 + i % 10) as f64);
            let moved = enc.encode(&c, &Prompt(th.0.add(&delta).unwrap())).unwrap();
            let change = moved.sub(&base).unwrap().frobenius();
            assert!(change <= lip * delta.frobenius(), "{change} > {lip} * {}", delta.frobenius());
        }
    }

    #[test]
    fn view_cosine_matches_brute_force() {
        use rand::SeedableRng;
        use rand_distr::{Distribution, StandardNormal};
        let d = 64;
        let sigma = 0.1;
        let n = 10_000;
        let mut rng = Rng::new(8);
        let v = crate::numkit::sphere_uniform(&mut rng, d).unwrap();
        let views = augment(&mut rng, &v, n + 1, sigma).unwrap();
        let ours: f64 = (1..=n).map(|r| crate::numkit::dot_slices(views.views.row(r), v.as_slice())).sum::<f64>() / n as f64;

        // Independent oracle: by symmetry only the component along v matters.
        let mut g = rand_chacha::ChaCha8Rng::seed_from_u64(99);
        let s = sigma / (d as f64).sqrt();
        let mut acc = 0.0;
        for _ in 0..n {
            let mut along = 1.0;
            let mut perp = 0.0;
            for j in 0..d {
                let z: f64 = StandardNormal.sample(&mut g);
                if j == 0 {
                    along += s * z;
                } else {
                    perp += (s * z) * (s * z);
                }
            }
            acc += along / (along * along + perp).sqrt();
        }
        let oracle = acc / n as f64;
        assert!((ours - oracle).abs() < 0.01, "{ours} vs {oracle}");
    }
}
