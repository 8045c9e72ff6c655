//! The five subcommands. Each returns its report value after writing all
//! files; reports are deterministic apart from `metadata`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::config::{value_label, RunConfig};
use super::output::{csv_header, metadata, pct, write_atomic, write_json};
use crate::adapt::{
    equivalence_check, fpp_pretrain, fpp_rng, initial_prompt, run_with_prompt, Aggregate, FPPConfig, Method,
    RunResult, Stat,
};
use crate::calibration::{sharpness_groups, SharpnessGroup};
use crate::encoder::{augment, gen_task, ClassSet, EncoderDims, Prompt, SynthEncoder, SynthTask, TaskSpec};
use crate::error::{Error, Result};
use crate::losses::Regularizer;
use crate::numkit::Rng;
use crate::probes::{doubled_jacobian_check, flatness_curvature_link, sigma_halving};
use crate::theory::{verify_theorem1, SurrogateTag, Theorem1Report};

pub const ARTIFACT_SCHEMA_VERSION: u32 = 1;

/// Generates one task per entry of `task_seeds`.
pub fn battery_tasks(spec: &TaskSpec, task_seeds: &[u64]) -> Result<Vec<SynthTask>> {
    task_seeds.iter().map(|&s| gen_task(&mut Rng::new(s), spec)).collect()
}

// ---------------------------------------------------------------- pretrain

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArtifactEntry {
    pub task_seed: u64,
    pub seed: u64,
    pub theta: Prompt,
    /// Objective at the start and end over common evaluation draws.
    pub initial_eval: f64,
    pub final_eval: f64,
}

/// Pretrained prompts for every `(task seed, run seed)` pair, together with
/// the settings that produced them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FppArtifact {
    pub schema_version: u32,
    pub task: TaskSpec,
    pub fpp: FPPConfig,
    pub entries: Vec<ArtifactEntry>,
}

impl FppArtifact {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::MissingArtifact(format!("{}: {e}", path.display())))?;
        let a: FppArtifact = serde_json::from_str(&text)?;
        if a.schema_version != ARTIFACT_SCHEMA_VERSION {
            return Err(Error::MissingArtifact(format!(
                "{} has schema version {}, expected {ARTIFACT_SCHEMA_VERSION}",
                path.display(),
                a.schema_version
            )));
        }
        Ok(a)
    }

    /// Prompt for one pair, if the artifact was built with matching settings.
    pub fn lookup(&self, cfg: &RunConfig, task_seed: u64, seed: u64) -> Result<Prompt> {
        if self.task != cfg.task || self.fpp != cfg.fpp {
            return Err(Error::MissingArtifact(
                "artifact was pretrained with different task or fpp settings; rerun pretrain".into(),
            ));
        }
        self.entries
            .iter()
            .find(|e| e.task_seed == task_seed && e.seed == seed)
            .map(|e| e.theta.clone())
            .ok_or_else(|| Error::MissingArtifact(format!("no pretrained prompt for task seed {task_seed}, seed {seed}")))
    }
}

pub fn cmd_pretrain(cfg: &RunConfig) -> Result<Value> {
    let out = cfg.out_dir();
    let tasks = battery_tasks(&cfg.task, &cfg.task_seeds)?;
    let pairs: Vec<(usize, u64)> =
        (0..tasks.len()).flat_map(|t| cfg.seeds.iter().map(move |&s| (t, s))).collect();
    let results = pairs
        .par_iter()
        .map(|&(t, seed)| {
            let task = &tasks[t];
            let o = fpp_pretrain(&task.encoder, &task.classes.embeddings, &task.theta_zs, &cfg.fpp, &mut fpp_rng(seed))?;
            Ok((t, seed, o))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut trace = csv_header("task_seed,seed,iteration,lr,lambda,total,align,flat");
    let mut entries = Vec::with_capacity(results.len());
    let mut summary = Vec::with_capacity(results.len());
    for (t, seed, o) in &results {
        let task_seed = &cfg.task_seeds[*t];
        for r in &o.trace {
            let _ = writeln!(
                trace,
                "{task_seed},{seed},{},{},{},{},{},{}",
                r.iteration, r.lr, r.lambda, r.total, r.align, r.flat
            );
        }
        let first = o.trace.first().map_or(f64::NAN, |r| r.total);
        let last = o.trace.last().map_or(f64::NAN, |r| r.total);
        summary.push(json!({
            "task_seed": task_seed,
            "seed": seed,
            "initial_eval": o.initial_eval,
            "final_eval": o.final_eval,
            "first_iteration_loss": first,
            "last_iteration_loss": last,
            "prompt_shift": o.theta.0.sub(&tasks[*t].theta_zs.0)?.frobenius(),
        }));
        entries.push(ArtifactEntry {
            task_seed: *task_seed,
            seed: *seed,
            theta: o.theta.clone(),
            initial_eval: o.initial_eval,
            final_eval: o.final_eval,
        });
    }
    let artifact = FppArtifact {
        schema_version: ARTIFACT_SCHEMA_VERSION,
        task: cfg.task.clone(),
        fpp: cfg.fpp.clone(),
        entries,
    };
    let artifact_path = cfg.artifact_path();
    write_json(&artifact_path, &artifact)?;
    write_atomic(&out.join("fpp_trace.csv"), trace.as_bytes())?;
    let mut meta = metadata("pretrain", &out);
    meta["artifact"] = json!(artifact_path.display().to_string());
    let report = json!({
        "metadata": meta,
        "config": cfg,
        "runs": summary,
    });
    write_json(&out.join("pretrain.json"), &report)?;
    Ok(report)
}

// ------------------------------------------------------------------ adapt

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskReport {
    pub task_seed: u64,
    pub zero_shot_accuracy: f64,
    pub attempts: usize,
    pub runs: Vec<RunResult>,
    pub aggregate: Aggregate,
    /// Ascending-sharpness split of all seeds' predictions pooled.
    pub sharpness_groups: Option<Vec<SharpnessGroup>>,
}

/// Mean and spread over tasks of the per-task means.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatteryReport {
    pub n_tasks: usize,
    pub acc: Stat,
    pub ece: Stat,
    pub sce: Stat,
    pub aece: Stat,
    pub mce: Stat,
    pub aurc: Stat,
    pub sharpness: Option<Stat>,
    /// Tasks whose flattest group has ECE at most that of the sharpest.
    pub groups_flat_le_sharp: Option<usize>,
}

impl BatteryReport {
    pub fn of(tasks: &[TaskReport]) -> Self {
        let pick = |f: fn(&Aggregate) -> f64| Stat::of(&tasks.iter().map(|t| f(&t.aggregate)).collect::<Vec<_>>());
        let sharp: Option<Vec<f64>> = tasks.iter().map(|t| t.aggregate.sharpness.map(|s| s.mean)).collect();
        let groups: Option<usize> = tasks
            .iter()
            .map(|t| {
                t.sharpness_groups.as_ref().map(|g| {
                    let (first, last) = (&g[0], &g[g.len() - 1]);
                    usize::from(first.ece <= last.ece)
                })
            })
            .sum();
        Self {
            n_tasks: tasks.len(),
            acc: pick(|a| a.acc.mean),
            ece: pick(|a| a.ece.mean),
            sce: pick(|a| a.sce.mean),
            aece: pick(|a| a.aece.mean),
            mce: pick(|a| a.mce.mean),
            aurc: pick(|a| a.aurc.mean),
            sharpness: sharp.map(|s| Stat::of(&s)),
            groups_flat_le_sharp: groups,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptReport {
    pub metadata: Value,
    pub config: RunConfig,
    pub tasks: Vec<TaskReport>,
    pub battery: BatteryReport,
}

/// Where `fpp-init-tpt` runs take their starting prompt from.
pub enum InitSource<'a> {
    /// Pretrain in-process.
    Inline,
    Artifact(&'a FppArtifact),
}

/// Runs the configured method on every task and seed.
pub fn run_battery(cfg: &RunConfig, tasks: &[SynthTask], init: &InitSource) -> Result<Vec<TaskReport>> {
    let exp = cfg.experiment();
    tasks
        .iter()
        .zip(&cfg.task_seeds)
        .map(|(task, &task_seed)| {
            let runs = cfg
                .seeds
                .iter()
                .map(|&seed| {
                    let theta = match (init, cfg.tta.method) {
                        (InitSource::Artifact(a), Method::FppInitTpt) => a.lookup(cfg, task_seed, seed)?,
                        _ => initial_prompt(task, &exp, seed)?,
                    };
                    run_with_prompt(task, &exp, seed, &theta)
                })
                .collect::<Result<Vec<_>>>()?;
            task_report(cfg, task, task_seed, runs)
        })
        .collect()
}

fn task_report(cfg: &RunConfig, task: &SynthTask, task_seed: u64, runs: Vec<RunResult>) -> Result<TaskReport> {
    let aggregate = Aggregate::of(&runs);
    let groups = if cfg.tta.record_sharpness {
        let mut records = Vec::new();
        for (i, r) in runs.iter().enumerate() {
            // Distinct indices across seeds keep the pooled log canonical.
            records.extend(r.log.records.iter().map(|rec| {
                let mut rec = rec.clone();
                rec.index += i * task.samples.len();
                rec
            }));
        }
        let pooled = crate::calibration::PredictionLog::new(records)?;
        Some(sharpness_groups(&pooled, cfg.metrics.sharpness_groups, cfg.metrics.bins)?)
    } else {
        None
    };
    Ok(TaskReport {
        task_seed,
        zero_shot_accuracy: task.zero_shot_accuracy,
        attempts: task.attempts,
        runs,
        aggregate,
        sharpness_groups: groups,
    })
}

pub fn cmd_adapt(cfg: &RunConfig) -> Result<AdaptReport> {
    let out = cfg.out_dir();
    let artifact = match cfg.tta.method {
        Method::FppInitTpt => Some(FppArtifact::load(&cfg.artifact_path())?),
        _ => None,
    };
    // Fail on a stale or incomplete artifact before any work.
    if let Some(a) = &artifact {
        for &t in &cfg.task_seeds {
            for &s in &cfg.seeds {
                a.lookup(cfg, t, s)?;
            }
        }
    }
    let init = artifact.as_ref().map_or(InitSource::Inline, InitSource::Artifact);
    let tasks = battery_tasks(&cfg.task, &cfg.task_seeds)?;
    let reports = run_battery(cfg, &tasks, &init)?;

    let mut reliability = csv_header("task_seed,seed,bin_low,bin_high,count,conf,acc");
    for t in &reports {
        for r in &t.runs {
            let name = format!("predictions/task{}_seed{}.ndjson", t.task_seed, r.seed);
            write_atomic(&out.join(name), r.log.to_ndjson().as_bytes())?;
            for b in &r.report.reliability.bins {
                if b.count == 0 {
                    let _ = writeln!(reliability, "{},{},{},{},0,,", t.task_seed, r.seed, b.low, b.high);
                } else {
                    let _ = writeln!(
                        reliability,
                        "{},{},{},{},{},{},{}",
                        t.task_seed, r.seed, b.low, b.high, b.count, b.conf, b.acc
                    );
                }
            }
        }
    }
    write_atomic(&out.join("reliability.csv"), reliability.as_bytes())?;
    let report = AdaptReport {
        metadata: metadata("adapt", &out),
        config: cfg.clone(),
        battery: BatteryReport::of(&reports),
        tasks: reports,
    };
    write_json(&out.join("metrics.json"), &report)?;
    Ok(report)
}

// ----------------------------------------------------------------- verify

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: Value,
}

fn check(name: &str, passed: bool, detail: Value) -> Check {
    Check { name: name.to_string(), passed, detail }
}

/// Maximum deviation between a regularized step and the shifted-init plain
/// step over random tasks, samples and regularizers.
pub fn equivalence_sweep(spec: &TaskSpec, trials: usize, seed: u64) -> Result<(f64, Vec<f64>)> {
    let small = TaskSpec { n_test: spec.k.max(20), ..spec.clone() };
    let devs = (0..trials)
        .into_par_iter()
        .map(|i| {
            let mut rng = Rng::keyed(seed, &[0xE0_0001, i as u64]);
            let task = gen_task(&mut rng.fork(0), &small)?;
            let sample = &task.samples[rng.below(task.samples.len())];
            let views = augment(&mut rng, &sample.feature, 64, 0.5)?;
            let (reg, lambda) = if i % 2 == 0 { (Regularizer::Ctpt, 50.0) } else { (Regularizer::Otpt, 0.5) };
            let r = equivalence_check(
                &task.encoder,
                &task.classes.embeddings,
                &task.theta_zs,
                &views,
                0.01,
                0.1,
                reg,
                lambda,
            )?;
            Ok(r.deviation)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok((devs.iter().copied().fold(0.0, f64::max), devs))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvaturePoint {
    pub ratios: Vec<f64>,
    pub halving_passed: bool,
    pub base: f64,
    pub doubled: f64,
    pub increased: bool,
}

/// σ-halving and doubled-Jacobian checks at random `(C, θ)`, starting from
/// the default FPP perturbation scales.
pub fn curvature_sweep(
    dims: EncoderDims,
    k: usize,
    points: usize,
    halvings: usize,
    n_mc: usize,
    seed: u64,
) -> Result<Vec<CurvaturePoint>> {
    let (s1, s2) = (0.02f64.sqrt(), 0.005f64.sqrt());
    (0..points)
        .map(|i| {
            let mut rng = Rng::keyed(seed, &[0xC0_0001, i as u64]);
            let enc = SynthEncoder::new(dims, rng.next_u64())?;
            let c = ClassSet::new(rng.gaussian_mat(k, dims.e, 1.0))?;
            let p = Prompt(rng.gaussian_mat(dims.p, dims.e, 1.0));
            let mc = rng.fork(1);
            let h = sigma_halving(&enc, &c, &p, s1, s2, halvings, n_mc, &mc)?;
            let g = doubled_jacobian_check(&enc, &c, &p, s1, s2, n_mc, &mc)?;
            Ok(CurvaturePoint {
                ratios: h.ratios,
                halving_passed: h.passed,
                base: g.base,
                doubled: g.doubled,
                increased: g.increased,
            })
        })
        .collect()
}

/// Theorem-1 checks on one report.
pub fn theorem1_checks(r: &Theorem1Report, tag: &str) -> Vec<Check> {
    let rho = r.rank_correlation_at_max_d();
    vec![
        check(&format!("theorem1_{tag}_rank_correlation"), rho >= 0.95, json!({"value": rho, "min": 0.95})),
        check(
            &format!("theorem1_{tag}_orthonormal_residual"),
            r.orthonormal_residual < r.orthonormal_bound,
            json!({"value": r.orthonormal_residual, "bound": r.orthonormal_bound}),
        ),
        check(
            &format!("theorem1_{tag}_residual_exponent"),
            (-1.9..=-1.1).contains(&r.exponent),
            json!({"value": r.exponent, "plain_mc": r.exponent_plain, "range": [-1.9, -1.1]}),
        ),
    ]
}

pub fn cmd_verify(cfg: &RunConfig) -> Result<Value> {
    let out = cfg.out_dir();
    let v = &cfg.verify;
    let mut checks = Vec::new();

    let (max_dev, _) = equivalence_sweep(&cfg.task, v.equivalence_trials, v.seed)?;
    checks.push(check(
        "equivalence",
        max_dev < 1e-12,
        json!({"max_deviation": max_dev, "trials": v.equivalence_trials, "tolerance": 1e-12}),
    ));

    let mut t1 = BTreeMap::new();
    let mut suggested: Option<usize> = None;
    for (tag, reg) in [("disp", SurrogateTag::Disp), ("orth", SurrogateTag::Orth)] {
        let r = verify_theorem1(reg, v.k, &v.d_list, v.family_size, v.n_mc, &Rng::keyed(v.seed, &[0x7E_0001]))?;
        if r.inconclusive {
            suggested = suggested.max(r.suggested_n_mc);
        }
        checks.extend(theorem1_checks(&r, tag));
        write_atomic(&out.join(format!("theorem1_{tag}.csv")), r.to_csv().as_bytes())?;
        t1.insert(tag, r);
    }

    let dims = cfg.task.dims();
    let points = curvature_sweep(dims, cfg.task.k, v.curvature_points, v.halvings, v.curvature_n_mc, v.seed)?;
    let all_ratios: Vec<f64> = points.iter().flat_map(|p| p.ratios.iter().copied()).collect();
    checks.push(check(
        "curvature_sigma_halving",
        points.iter().all(|p| p.halving_passed),
        json!({
            "min_ratio": all_ratios.iter().copied().fold(f64::INFINITY, f64::min),
            "max_ratio": all_ratios.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            "band": [3.5, 4.5],
            "points": points.len(),
        }),
    ));
    checks.push(check(
        "curvature_doubled_jacobian",
        points.iter().all(|p| p.increased),
        json!({"increased": points.iter().filter(|p| p.increased).count(), "points": points.len()}),
    ));
    let link = {
        let mut rng = Rng::keyed(v.seed, &[0xC0_0002]);
        let enc = SynthEncoder::new(dims, rng.next_u64())?;
        let c = ClassSet::new(rng.gaussian_mat(cfg.task.k, dims.e, 1.0))?;
        let p = Prompt(rng.gaussian_mat(dims.p, dims.e, 1.0));
        flatness_curvature_link(&enc, &c, &p, 1e-3, 5e-4, 400, 200, &rng.fork(1))?
    };
    checks.push(check("curvature_small_sigma_band", !link.failed, json!({"ratio": link.ratio, "band": [0.5, 2.0]})));

    let report = json!({
        "metadata": metadata("verify", &out),
        "config": cfg,
        "passed": checks.iter().all(|c| c.passed),
        "checks": checks,
        "theorem1": t1,
        "curvature_points": points,
        "curvature_link": link,
    });
    write_json(&out.join("verify.json"), &report)?;
    if let Some(n) = suggested {
        return Err(Error::Inconclusive { what: "Theorem-1 residuals are within Monte Carlo noise".into(), suggested_n_mc: n });
    }
    let failed: Vec<&str> = checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
    if !failed.is_empty() {
        return Err(Error::VerificationFailed(failed.join(", ")));
    }
    Ok(report)
}

// ------------------------------------------------------------------ sweep

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: String,
    /// `None` marks the aggregate row for this value.
    pub seed: Option<u64>,
    pub acc: Stat,
    pub ece: Stat,
    pub sce: Stat,
    pub sharpness: Option<Stat>,
}

/// Per-seed rows are task averages; aggregate rows are mean and std of
/// those over seeds.
pub fn run_sweep(cfg: &RunConfig) -> Result<Vec<SweepRow>> {
    let spec = cfg.sweep.as_ref().ok_or_else(|| Error::Config("sweep: missing [sweep] table".into()))?;
    let configs = spec.values.iter().map(|v| cfg.with_override(&spec.param, v)).collect::<Result<Vec<_>>>()?;
    let task_sets = configs
        .iter()
        .map(|c| battery_tasks(&c.task, &c.task_seeds))
        .collect::<Result<Vec<_>>>()?;
    let pairs: Vec<(usize, u64)> =
        (0..configs.len()).flat_map(|i| cfg.seeds.iter().map(move |&s| (i, s))).collect();
    let per_seed = pairs
        .par_iter()
        .map(|&(i, seed)| {
            let c = RunConfig { seeds: vec![seed], ..configs[i].clone() };
            let reports = run_battery(&c, &task_sets[i], &InitSource::Inline)?;
            let mean = |f: fn(&Aggregate) -> f64| reports.iter().map(|t| f(&t.aggregate)).sum::<f64>() / reports.len() as f64;
            let sharp: Option<Vec<f64>> = reports.iter().map(|t| t.aggregate.sharpness.map(|s| s.mean)).collect();
            Ok(SweepRow {
                value: value_label(&spec.values[i]),
                seed: Some(seed),
                acc: Stat { mean: mean(|a| a.acc.mean), std: 0.0 },
                ece: Stat { mean: mean(|a| a.ece.mean), std: 0.0 },
                sce: Stat { mean: mean(|a| a.sce.mean), std: 0.0 },
                sharpness: sharp.map(|s| Stat { mean: s.iter().sum::<f64>() / s.len() as f64, std: 0.0 }),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut rows = Vec::new();
    for (i, value) in spec.values.iter().enumerate() {
        let seeds: Vec<&SweepRow> = per_seed.iter().zip(&pairs).filter(|(_, p)| p.0 == i).map(|(r, _)| r).collect();
        let stat = |f: fn(&SweepRow) -> f64| Stat::of(&seeds.iter().map(|r| f(r)).collect::<Vec<_>>());
        let sharp: Option<Vec<f64>> = seeds.iter().map(|r| r.sharpness.map(|s| s.mean)).collect();
        rows.extend(seeds.iter().map(|r| (*r).clone()));
        rows.push(SweepRow {
            value: value_label(value),
            seed: None,
            acc: stat(|r| r.acc.mean),
            ece: stat(|r| r.ece.mean),
            sce: stat(|r| r.sce.mean),
            sharpness: sharp.map(|s| Stat::of(&s)),
        });
    }
    Ok(rows)
}

pub fn sweep_csv(param: &str, rows: &[SweepRow]) -> String {
    let mut out = csv_header("param,value,row,seed,acc,acc_std,ece,ece_std,sce,sce_std,sharpness,sharpness_std");
    for r in rows {
        let (kind, seed) = match r.seed {
            Some(s) => ("seed", s.to_string()),
            None => ("aggregate", String::new()),
        };
        let (sh, sh_std) = r.sharpness.map_or((String::new(), String::new()), |s| (s.mean.to_string(), s.std.to_string()));
        let _ = writeln!(
            out,
            "{param},{},{kind},{seed},{},{},{},{},{},{},{sh},{sh_std}",
            r.value, r.acc.mean, r.acc.std, r.ece.mean, r.ece.std, r.sce.mean, r.sce.std
        );
    }
    out
}

pub fn cmd_sweep(cfg: &RunConfig) -> Result<Value> {
    let out = cfg.out_dir();
    let rows = run_sweep(cfg)?;
    let param = cfg.sweep.as_ref().map(|s| s.param.clone()).unwrap_or_default();
    write_atomic(&out.join("sweep.csv"), sweep_csv(&param, &rows).as_bytes())?;
    let report = json!({
        "metadata": metadata("sweep", &out),
        "config": cfg,
        "param": param,
        "rows": rows,
    });
    write_json(&out.join("sweep.json"), &report)?;
    Ok(report)
}

// ----------------------------------------------------------------- report

/// Markdown summary of whatever reports exist in `dir`; accuracy and the
/// calibration errors are shown in percent.
pub fn cmd_report(dir: &Path) -> Result<String> {
    let mut md = String::new();
    let mut table = csv_header("task_seed,acc_pct,acc_std_pct,ece_pct,ece_std_pct,sce_pct,aece_pct,mce_pct,aurc,sharpness");
    let mut found = false;

    let metrics = dir.join("metrics.json");
    if metrics.exists() {
        found = true;
        let r: AdaptReport = serde_json::from_str(&std::fs::read_to_string(&metrics)?)?;
        let method = serde_json::to_value(r.config.tta.method)?;
        let _ = writeln!(md, "## adapt: {}\n", method.as_str().unwrap_or("?"));
        md.push_str("| task | zero-shot acc | acc | ECE | SCE | AECE | MCE | AURC | sharpness |\n");
        md.push_str("|---|---|---|---|---|---|---|---|---|\n");
        for t in &r.tasks {
            let a = &t.aggregate;
            let sharp = a.sharpness.map_or("-".into(), |s| format!("{:.5}", s.mean));
            let _ = writeln!(
                md,
                "| {} | {} | {} ± {} | {} ± {} | {} | {} | {} | {:.4} | {sharp} |",
                t.task_seed,
                pct(t.zero_shot_accuracy),
                pct(a.acc.mean),
                pct(a.acc.std),
                pct(a.ece.mean),
                pct(a.ece.std),
                pct(a.sce.mean),
                pct(a.aece.mean),
                pct(a.mce.mean),
                a.aurc.mean,
            );
            let _ = writeln!(
                table,
                "{},{},{},{},{},{},{},{},{},{}",
                t.task_seed,
                pct(a.acc.mean),
                pct(a.acc.std),
                pct(a.ece.mean),
                pct(a.ece.std),
                pct(a.sce.mean),
                pct(a.aece.mean),
                pct(a.mce.mean),
                a.aurc.mean,
                a.sharpness.map_or(String::new(), |s| s.mean.to_string())
            );
        }
        let b = &r.battery;
        let _ = writeln!(
            md,
            "\nbattery over {} tasks: acc {} ± {}, ECE {} ± {}, SCE {}, sharpness {}",
            b.n_tasks,
            pct(b.acc.mean),
            pct(b.acc.std),
            pct(b.ece.mean),
            pct(b.ece.std),
            pct(b.sce.mean),
            b.sharpness.map_or("-".into(), |s| format!("{:.5}", s.mean)),
        );
        if let Some(g) = b.groups_flat_le_sharp {
            let _ = writeln!(md, "flattest-group ECE <= sharpest-group ECE in {g} of {} tasks", b.n_tasks);
        }
        md.push('\n');
        write_atomic(&dir.join("table.csv"), table.as_bytes())?;
    }

    let sweep = dir.join("sweep.json");
    if sweep.exists() {
        found = true;
        let v: Value = serde_json::from_str(&std::fs::read_to_string(&sweep)?)?;
        let rows: Vec<SweepRow> = serde_json::from_value(v["rows"].clone())?;
        let _ = writeln!(md, "## sweep: {}\n", v["param"].as_str().unwrap_or("?"));
        md.push_str("| value | acc | ECE | SCE | sharpness |\n|---|---|---|---|---|\n");
        for r in rows.iter().filter(|r| r.seed.is_none()) {
            let _ = writeln!(
                md,
                "| {} | {} ± {} | {} ± {} | {} | {} |",
                r.value,
                pct(r.acc.mean),
                pct(r.acc.std),
                pct(r.ece.mean),
                pct(r.ece.std),
                pct(r.sce.mean),
                r.sharpness.map_or("-".into(), |s| format!("{:.5}", s.mean)),
            );
        }
        md.push('\n');
    }

    let verify = dir.join("verify.json");
    if verify.exists() {
        found = true;
        let v: Value = serde_json::from_str(&std::fs::read_to_string(&verify)?)?;
        let checks: Vec<Check> = serde_json::from_value(v["checks"].clone())?;
        md.push_str("## verify\n\n| check | result | detail |\n|---|---|---|\n");
        for c in &checks {
            let _ = writeln!(md, "| {} | {} | `{}` |", c.name, if c.passed { "pass" } else { "FAIL" }, c.detail);
        }
        md.push('\n');
    }

    if !found {
        return Err(Error::MissingArtifact(format!(
            "no metrics.json, sweep.json or verify.json in {}",
            dir.display()
        )));
    }
    write_atomic(&dir.join("report.md"), md.as_bytes())?;
    Ok(md)
}
