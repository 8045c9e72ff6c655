//! Every adaptation method on a small battery, three seeds each.
//!
//! Usage: `cargo run --release --example tpt_battery [n_tasks]` (default 3).

use flatcal::adapt::{run_experiment, ExperimentConfig, Method, Stat};
use flatcal::cli::battery_tasks;
use flatcal::encoder::TaskSpec;

fn main() -> flatcal::Result<()> {
    let n: u64 = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(3);
    let tasks = battery_tasks(&TaskSpec::default(), &(0..n).collect::<Vec<_>>())?;
    let seeds = [0, 1, 2];
    let mut zs = ExperimentConfig::with_method(Method::Tpt);
    zs.tta.lr = 0.0;
    let methods = [
        ("zero-shot", zs),
        ("tpt", ExperimentConfig::with_method(Method::Tpt)),
        ("c-tpt", ExperimentConfig::with_method(Method::Ctpt)),
        ("o-tpt", ExperimentConfig::with_method(Method::Otpt)),
        ("tpt-sam", ExperimentConfig::with_method(Method::TptSam)),
        ("fpp-init-tpt", ExperimentConfig::with_method(Method::FppInitTpt)),
    ];
    println!("{:<13} {:>8} {:>8} {:>8} {:>10}", "method", "acc %", "ECE %", "SCE %", "sharpness");
    for (name, cfg) in &methods {
        let (mut acc, mut ece, mut sce, mut sharp) = (vec![], vec![], vec![], vec![]);
        for task in &tasks {
            let a = run_experiment(task, cfg, &seeds)?.aggregate;
            acc.push(a.acc.mean);
            ece.push(a.ece.mean);
            sce.push(a.sce.mean);
            sharp.push(a.sharpness.map_or(f64::NAN, |s| s.mean));
        }
        let m = |xs: &[f64]| Stat::of(xs).mean;
        println!(
            "{name:<13} {:>8.2} {:>8.2} {:>8.2} {:>10.5}",
            100.0 * m(&acc),
            100.0 * m(&ece),
            100.0 * m(&sce),
            m(&sharp)
        );
    }
    Ok(())
}
