//! Joint EM + O-TPT steps against the three sequential two-step orderings,
//! compared by mean EM sharpness after adaptation.

use flatcal::adapt::{run_experiment, ExperimentConfig, Method, SeqOrder};
use flatcal::cli::battery_tasks;
use flatcal::encoder::TaskSpec;

fn main() -> flatcal::Result<()> {
    let tasks = battery_tasks(&TaskSpec { n_test: 150, ..TaskSpec::default() }, &[0, 1, 2])?;
    let mut variants = vec![("joint", ExperimentConfig::with_method(Method::Otpt))];
    for order in SeqOrder::ALL {
        let mut cfg = ExperimentConfig::with_method(Method::Sequential);
        cfg.tta.order = order;
        variants.push((
            match order {
                SeqOrder::EntEnt => "ent->ent",
                SeqOrder::EntReg => "ent->reg",
                SeqOrder::RegEnt => "reg->ent",
            },
            cfg,
        ));
    }
    for (name, cfg) in &variants {
        let mut sharp = 0.0;
        let mut ece = 0.0;
        for task in &tasks {
            let a = run_experiment(task, cfg, &[0])?.aggregate;
            sharp += a.sharpness.map_or(f64::NAN, |s| s.mean);
            ece += a.ece.mean;
        }
        let n = tasks.len() as f64;
        println!("{name:<9} sharpness {:.5}  ECE {:.4}", sharp / n, ece / n);
    }
    Ok(())
}
