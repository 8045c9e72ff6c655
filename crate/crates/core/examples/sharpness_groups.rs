//! Splits TPT predictions into flat, middle and sharp thirds by per-sample
//! sharpness and compares their calibration.

use flatcal::adapt::{run_experiment, ExperimentConfig, Method};
use flatcal::calibration::{sharpness_groups, PredictionLog, DEFAULT_BINS};
use flatcal::encoder::{gen_task, TaskSpec};
use flatcal::numkit::Rng;

fn main() -> flatcal::Result<()> {
    for task_seed in 0..3 {
        let task = gen_task(&mut Rng::new(task_seed), &TaskSpec::default())?;
        let runs = run_experiment(&task, &ExperimentConfig::with_method(Method::Tpt), &[0, 1, 2])?.runs;
        let n = task.samples.len();
        let pooled: Vec<_> = runs
            .iter()
            .enumerate()
            .flat_map(|(i, r)| {
                r.log.records.iter().map(move |rec| {
                    let mut rec = rec.clone();
                    rec.index += i * n;
                    rec
                })
            })
            .collect();
        let groups = sharpness_groups(&PredictionLog::new(pooled)?, 3, DEFAULT_BINS)?;
        println!("task {task_seed}:");
        for (g, name) in groups.iter().zip(["flat", "middle", "sharp"]) {
            println!(
                "  {name:<6} n={:<4} sharpness [{:.4}, {:.4}]  acc {:.3}  ECE {:.4}",
                g.count, g.min_sharpness, g.max_sharpness, g.accuracy, g.ece
            );
        }
    }
    Ok(())
}
