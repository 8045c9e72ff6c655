//! Parameter exploration for the synthetic task generator and the
//! test-time methods. Prints zero-shot accuracy statistics for a task spec
//! and, optionally, per-method metrics on a small battery.
//!
//! ```text
//! cargo run --release --example explore -- key=value ...
//! ```
//!
//! Keys: any `TaskSpec` field, `tasks`, `seeds`, `lr`, `sigma_aug`,
//! `n_views`, `methods` (comma list), `fpp_iters`, `fpp_lr`, `sigma_scale`, `sigma1`, `sigma2`, `gamma1`, `order`,
//! `task_seed` (first task seed), `lambda_ctpt`, `lambda_otpt`.

use std::collections::BTreeMap;

use flatcal::adapt::{run_experiment, ExperimentConfig, Method};
use flatcal::encoder::{gen_task, TaskSpec};
use flatcal::numkit::Rng;

fn parse_method(s: &str) -> Method {
    serde_json::from_value(serde_json::Value::String(s.to_string())).expect("method name")
}

fn main() -> flatcal::Result<()> {
    let args: BTreeMap<String, String> = std::env::args()
        .skip(1)
        .filter_map(|a| a.split_once('=').map(|(k, v)| (k.to_string(), v.to_string())))
        .collect();
    let num = |k: &str, d: f64| args.get(k).map_or(d, |v| v.parse().expect("number"));

    let mut spec_json = serde_json::to_value(TaskSpec::default())?;
    for (k, v) in &args {
        if spec_json.get(k).is_some() {
            spec_json[k] = serde_json::from_str(v)?;
        }
    }
    let spec: TaskSpec = serde_json::from_value(spec_json)?;
    let n_tasks = num("tasks", 10.0) as u64;
    let seeds: Vec<u64> = (0..num("seeds", 1.0) as u64).collect();
    let methods: Vec<Method> = args.get("methods").map_or(vec![], |m| m.split(',').map(parse_method).collect());

    let mut tasks = Vec::new();
    for t in 0..n_tasks {
        match gen_task(&mut Rng::new(num("task_seed", 1000.0) as u64 + t), &spec) {
            Ok(task) => {
                let feats = task.encoder.encode(&task.classes, &task.theta_zs)?;
                let gram = feats.matmul_nt(&feats)?;
                let k = feats.rows();
                let off = (gram.data().iter().sum::<f64>() - k as f64) / (k * (k - 1)) as f64;
                let conf = task
                    .samples
                    .iter()
                    .map(|s| flatcal::losses::predict(&feats, &s.feature, 0.01).map(|p| p.confidence()))
                    .sum::<flatcal::Result<f64>>()?
                    / task.samples.len() as f64;
                println!(
                    "task {t}: zero-shot acc {:.3} conf {conf:.3} class cos {off:.3} after {} attempt(s)",
                    task.zero_shot_accuracy, task.attempts
                );
                tasks.push(task);
            }
            Err(e) => println!("task {t}: {e}"),
        }
    }

    for method in methods {
        let mut cfg = ExperimentConfig::with_method(method);
        cfg.tta.lr = num("lr", cfg.tta.lr);
        cfg.tta.sigma_aug = num("sigma_aug", cfg.tta.sigma_aug);
        cfg.tta.n_views = num("n_views", cfg.tta.n_views as f64) as usize;
        cfg.fpp.iterations = num("fpp_iters", cfg.fpp.iterations as f64) as usize;
        cfg.fpp.base_lr = num("fpp_lr", cfg.fpp.base_lr);
        cfg.fpp.sigma_scale = num("sigma_scale", 1.0);
        cfg.fpp.sigma1 = num("sigma1", cfg.fpp.sigma1);
        cfg.fpp.sigma2 = num("sigma2", cfg.fpp.sigma2);
        cfg.fpp.gamma1 = num("gamma1", cfg.fpp.gamma1);
        if let Some(o) = args.get("order") {
            cfg.tta.order = serde_json::from_value(serde_json::Value::String(o.clone()))?;
        }
        if let Some(l) = args.get(&format!("lambda_{}", serde_json::to_value(method)?.as_str().unwrap_or(""))) {
            cfg.tta.lambda_reg = Some(l.parse().expect("number"));
        }
        let (mut acc, mut ece, mut sharp, mut g13) = (0.0, 0.0, 0.0, 0usize);
        for task in &tasks {
            let res = run_experiment(task, &cfg, &seeds)?;
            acc += res.aggregate.acc.mean;
            ece += res.aggregate.ece.mean;
            sharp += res.aggregate.sharpness.map_or(f64::NAN, |s| s.mean);
            let mut records = Vec::new();
            for r in &res.runs {
                records.extend(r.log.records.iter().cloned());
            }
            let log = flatcal::calibration::PredictionLog { records };
            if let Ok(g) = flatcal::calibration::sharpness_groups(&log, 3, 15) {
                g13 += (g[0].ece <= g[2].ece) as usize;
            }
        }
        let n = tasks.len() as f64;
        println!(
            "{method:?}: acc {:.4} ece {:.4} sharpness {:.5} group1<=group3 in {g13}/{}",
            acc / n,
            ece / n,
            sharp / n,
            tasks.len()
        );
    }
    Ok(())
}
