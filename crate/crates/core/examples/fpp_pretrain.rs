//! FPP pretraining on one task: loss trace, Jacobian norms and EM sharpness
//! before and after.

use flatcal::adapt::{fpp_pretrain, fpp_rng, prompt_loss, FPPConfig, StepLoss};
use flatcal::encoder::{augment, gen_task, Prompt, TaskSpec};
use flatcal::numkit::Rng;
use flatcal::probes::{jacobian_norm, sharpness, Wrt, DEFAULT_PROBE_RHO};

fn mean_sharpness(task: &flatcal::encoder::SynthTask, theta: &Prompt) -> flatcal::Result<f64> {
    let c = &task.classes.embeddings;
    let mut total = 0.0;
    for (i, s) in task.samples.iter().take(50).enumerate() {
        let views = augment(&mut Rng::new(i as u64), &s.feature, 64, 0.5)?;
        let obj = |th: &flatcal::numkit::Mat| prompt_loss(&task.encoder, c, &views, 0.01, 0.1, StepLoss::Em, th);
        total += sharpness(&theta.0, &obj, DEFAULT_PROBE_RHO)?.value;
    }
    Ok(total / 50.0)
}

fn main() -> flatcal::Result<()> {
    let task = gen_task(&mut Rng::new(0), &TaskSpec::default())?;
    let cfg = FPPConfig::default();
    let out = fpp_pretrain(&task.encoder, &task.classes.embeddings, &task.theta_zs, &cfg, &mut fpp_rng(0))?;

    println!("iteration  lr        total      align      flat");
    for row in out.trace.iter().filter(|r| r.iteration == 1 || r.iteration % 100 == 0) {
        println!("{:>9}  {:.2e}  {:.4e} {:.4e} {:.4e}", row.iteration, row.lr, row.total, row.align, row.flat);
    }
    println!("objective over common draws: {:.4e} -> {:.4e}", out.initial_eval, out.final_eval);
    println!("‖θ_fpp − θ_zs‖ = {:.4}", out.theta.0.sub(&task.theta_zs.0)?.frobenius());

    let probe = Rng::new(99);
    for (name, theta) in [("zero-shot", &task.theta_zs), ("fpp", &out.theta)] {
        let jc = jacobian_norm(&task.encoder, &task.classes, theta, Wrt::Classes, 200, &probe)?;
        let jt = jacobian_norm(&task.encoder, &task.classes, theta, Wrt::Prompt, 200, &probe)?;
        println!(
            "{name:>9}: ‖J_C‖={:.3}  ‖J_θ‖={:.3}  mean EM sharpness (50 samples)={:.5}",
            jc.norm,
            jt.norm,
            mean_sharpness(&task, theta)?
        );
    }
    Ok(())
}
