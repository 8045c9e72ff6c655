//! Run configuration: a TOML file with `task`, `tta`, `fpp`, `metrics`,
//! `verify`, `output` and optional `sweep` tables. Unknown keys are errors.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adapt::{ExperimentConfig, FPPConfig, TTAConfig};
use crate::calibration::DEFAULT_BINS;
use crate::encoder::TaskSpec;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Seeds of the generated tasks; one task per entry.
    pub task_seeds: Vec<u64>,
    /// Run seeds (augmentation and FPP draws) applied to every task.
    pub seeds: Vec<u64>,
    pub task: TaskSpec,
    pub tta: TTAConfig,
    pub fpp: FPPConfig,
    pub metrics: MetricsConfig,
    pub verify: VerifyConfig,
    /// Paths are reported in output metadata, not in the config echo, so
    /// that identical runs into different directories match byte for byte.
    #[serde(skip_serializing)]
    pub output: OutputConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSpec>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            task_seeds: (0..10).collect(),
            seeds: vec![0, 1, 2],
            task: TaskSpec::default(),
            tta: TTAConfig::default(),
            fpp: FPPConfig::default(),
            metrics: MetricsConfig::default(),
            verify: VerifyConfig::default(),
            output: OutputConfig::default(),
            sweep: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    pub bins: usize,
    /// Groups for the ascending-sharpness split.
    pub sharpness_groups: usize,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self { bins: DEFAULT_BINS, sharpness_groups: 3 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    /// Output directory; `--out` overrides it. Defaults to `out`.
    pub dir: Option<PathBuf>,
    /// FPP artifact path; defaults to `<dir>/fpp_artifact.json`.
    pub artifact: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifyConfig {
    pub k: usize,
    pub d_list: Vec<usize>,
    pub family_size: usize,
    pub n_mc: usize,
    pub equivalence_trials: usize,
    pub curvature_points: usize,
    pub curvature_n_mc: usize,
    pub halvings: usize,
    /// Seed for every Monte Carlo stream in `verify`.
    pub seed: u64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            k: 10,
            d_list: vec![64, 128, 256, 512],
            family_size: 21,
            n_mc: 200_000,
            equivalence_trials: 100,
            curvature_points: 20,
            curvature_n_mc: 200,
            halvings: 3,
            seed: 0,
        }
    }
}

/// One parameter varied over a list of values, everything else fixed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    /// Dotted path into the config, e.g. `fpp.sigma_scale`.
    pub param: String,
    pub values: Vec<toml::Value>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn experiment(&self) -> ExperimentConfig {
        ExperimentConfig { tta: self.tta.clone(), fpp: self.fpp.clone(), bins: self.metrics.bins }
    }

    pub fn out_dir(&self) -> PathBuf {
        self.output.dir.clone().unwrap_or_else(|| PathBuf::from("out"))
    }

    pub fn artifact_path(&self) -> PathBuf {
        self.output.artifact.clone().unwrap_or_else(|| self.out_dir().join("fpp_artifact.json"))
    }

    /// Checks every range before anything runs; messages name the key.
    pub fn validate(&self) -> Result<()> {
        if self.task_seeds.is_empty() {
            return Err(Error::Config("task_seeds: must not be empty".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds: must not be empty".into()));
        }
        self.task.validate().map_err(|e| Error::Config(format!("task: {e}")))?;
        self.tta.validate()?;
        self.fpp.validate()?;
        if self.metrics.bins < 1 {
            return Err(Error::Config("metrics.bins: must be >= 1".into()));
        }
        if self.metrics.sharpness_groups < 1 {
            return Err(Error::Config("metrics.sharpness_groups: must be >= 1".into()));
        }
        let v = &self.verify;
        if v.k < 2 {
            return Err(Error::Config("verify.k: must be >= 2".into()));
        }
        if v.d_list.len() < 3 || v.d_list.windows(2).any(|w| w[0] >= w[1]) || v.d_list[0] < v.k {
            return Err(Error::Config(format!(
                "verify.d_list: need >= 3 strictly increasing entries, each >= k, got {:?}",
                v.d_list
            )));
        }
        if v.family_size < 20 {
            return Err(Error::Config("verify.family_size: must be >= 20".into()));
        }
        if v.n_mc < 1000 {
            return Err(Error::Config("verify.n_mc: must be >= 1000".into()));
        }
        if v.curvature_n_mc < 100 {
            return Err(Error::Config("verify.curvature_n_mc: must be >= 100".into()));
        }
        if v.halvings < 1 {
            return Err(Error::Config("verify.halvings: must be >= 1".into()));
        }
        if let Some(s) = &self.sweep {
            if s.values.is_empty() {
                return Err(Error::Config("sweep.values: must not be empty".into()));
            }
            for value in &s.values {
                self.with_override(&s.param, value)?;
            }
        }
        Ok(())
    }

    /// Copy with the value at a dotted path replaced, re-validated.
    pub fn with_override(&self, path: &str, value: &toml::Value) -> Result<Self> {
        if path.starts_with("output") || path.starts_with("sweep") {
            return Err(Error::Config(format!("sweep.param: `{path}` cannot be swept")));
        }
        let mut tree = serde_json::to_value(self)?;
        let new = serde_json::to_value(value)?;
        let mut node = &mut tree;
        for key in path.split('.') {
            node = node
                .get_mut(key)
                .ok_or_else(|| Error::Config(format!("sweep.param: unknown key `{path}`")))?;
        }
        *node = new;
        let mut out: RunConfig =
            serde_json::from_value(tree).map_err(|e| Error::Config(format!("sweep value for `{path}`: {e}")))?;
        out.output = self.output.clone();
        out.sweep = None;
        let check = RunConfig { sweep: None, ..out.clone() };
        check.validate()?;
        out.sweep = self.sweep.clone();
        Ok(out)
    }
}

/// Text of a sweep value for tables: strings unquoted.
pub fn value_label(v: &toml::Value) -> String {
    match v {
        toml::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapt::Method;

    #[test]
    fn defaults_validate_and_empty_file_is_default() {
        let cfg = RunConfig::from_toml("").unwrap();
        assert_eq!(cfg, RunConfig::default());
    }

    #[test]
    fn unknown_key_is_rejected_with_its_name() {
        let err = RunConfig::from_toml("[fpp]\niteratons = 3\n").unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(err.to_string().contains("iteratons"), "{err}");
    }

    #[test]
    fn range_errors_name_the_key() {
        let err = RunConfig::from_toml("[fpp]\niterations = 0\n").unwrap_err();
        assert!(err.to_string().contains("fpp.iterations"), "{err}");
        let err = RunConfig::from_toml("[tta]\ntau = -1.0\n").unwrap_err();
        assert!(err.to_string().contains("tta.tau"), "{err}");
    }

    #[test]
    fn override_sets_nested_values() {
        let cfg = RunConfig::default();
        let c = cfg.with_override("fpp.sigma_scale", &toml::Value::Float(4.0)).unwrap();
        assert_eq!(c.fpp.sigma_scale, 4.0);
        let c = cfg.with_override("tta.method", &toml::Value::String("fpp-init-tpt".into())).unwrap();
        assert_eq!(c.tta.method, Method::FppInitTpt);
        assert!(cfg.with_override("fpp.nope", &toml::Value::Float(1.0)).is_err());
        assert!(cfg.with_override("fpp.iterations", &toml::Value::Integer(0)).is_err());
    }

    #[test]
    fn sweep_spec_parses_and_checks_values() {
        let cfg = RunConfig::from_toml("[sweep]\nparam = \"fpp.sigma_scale\"\nvalues = [0.25, 1.0, 4.0]\n").unwrap();
        assert_eq!(cfg.sweep.unwrap().values.len(), 3);
        assert!(RunConfig::from_toml("[sweep]\nparam = \"fpp.sigma_scale\"\nvalues = []\n").is_err());
        assert!(RunConfig::from_toml("[sweep]\nparam = \"fpp.iterations\"\nvalues = [0]\n").is_err());
    }
}
