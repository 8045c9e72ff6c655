//! One regularized TPT step at unit learning rate equals a plain EM step from
//! the regularizer-shifted prompt. Prints the largest deviation per
//! regularizer over random tasks and samples.

use flatcal::adapt::equivalence_check;
use flatcal::encoder::{augment, gen_task, TaskSpec};
use flatcal::losses::Regularizer;
use flatcal::numkit::Rng;

fn main() -> flatcal::Result<()> {
    let spec = TaskSpec { n_test: 20, ..TaskSpec::default() };
    for (reg, lambda) in [(Regularizer::Ctpt, 50.0), (Regularizer::Otpt, 0.5)] {
        let mut worst = 0.0f64;
        for trial in 0..25 {
            let mut rng = Rng::new(trial);
            let task = gen_task(&mut rng, &spec)?;
            let sample = &task.samples[rng.below(task.samples.len())];
            let views = augment(&mut rng, &sample.feature, 64, 0.5)?;
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
            worst = worst.max(r.deviation);
        }
        println!("{reg:?} (λ={lambda}): max deviation {worst:.3e}");
    }
    Ok(())
}
