//! Finite-difference checks of every differentiable loss, at one random point
//! each. The acceptance suite repeats this at 20 points per loss.

use flatcal::encoder::{augment, EncoderDims, Prompt, SynthEncoder};
use flatcal::losses::{self, Distance, Regularizer};
use flatcal::numkit::{finite_diff_check, sphere_uniform, Mat, Rng};

fn unit_rows(rng: &mut Rng, k: usize, d: usize) -> Mat {
    rng.gaussian_mat(k, d, 1.0).normalize_rows()
}

fn main() -> flatcal::Result<()> {
    let mut rng = Rng::new(1);
    let (k, d) = (5, 12);
    let t = unit_rows(&mut rng, k, d);
    let v = sphere_uniform(&mut rng, d)?;
    let views = augment(&mut rng, &v, 16, 0.3)?;
    let h = 1e-3;

    let report = |name: &str, r: flatcal::numkit::FiniteDiffReport| {
        println!(
            "{name:<22} max rel err {:.2e}  (worst coord {}: {:+.6e} vs {:+.6e})",
            r.max_rel_error, r.worst_index, r.analytic, r.numeric
        );
    };
    report("em", finite_diff_check(|tp, x| Ok(losses::em_loss(tp, x, &views, 0.5, 0.25)?.node), &t, h)?);
    report("ctpt", finite_diff_check(|tp, x| Ok(losses::ctpt_reg(tp, x)?.node), &t, h)?);
    report("otpt", finite_diff_check(|tp, x| Ok(losses::otpt_reg(tp, x)?.node), &t, h)?);
    for reg in [Regularizer::Ctpt, Regularizer::Otpt] {
        let r = finite_diff_check(|tp, x| Ok(losses::total_loss(tp, x, &views, 0.5, 0.25, Some(reg), 0.7)?.node), &t, h)?;
        report(&format!("total {reg:?}"), r);
    }
    report("disp surrogate", finite_diff_check(|tp, x| Ok(losses::disp_surrogate(tp, x)?.node), &t, h)?);
    report("orth surrogate", finite_diff_check(|tp, x| Ok(losses::orth_surrogate(tp, x)?.node), &t, h)?);

    let dims = EncoderDims { p: 3, e: 6, h: 16, d };
    let enc = SynthEncoder::new(dims, 7)?;
    let c = rng.gaussian_mat(k, 6, 1.0);
    let theta = rng.gaussian_mat(3, 6, 1.0);
    let theta_zs = Prompt(rng.gaussian_mat(3, 6, 1.0));
    let e1 = rng.gaussian_mat(k, 6, 0.1);
    let e2 = rng.gaussian_mat(3, 6, 0.1);
    let flat = |tp: &mut flatcal::numkit::Tape, x| {
        let cv = tp.constant(c.clone());
        Ok(losses::flat_loss(tp, &enc, cv, x, &e1, &e2, Distance::Cos)?.node)
    };
    report("flat (prompt)", finite_diff_check(flat, &theta, h)?);
    let flat_c = |tp: &mut flatcal::numkit::Tape, x| {
        let pv = tp.constant(theta.clone());
        Ok(losses::flat_loss(tp, &enc, x, pv, &e1, &e2, Distance::Cos)?.node)
    };
    report("flat (classes)", finite_diff_check(flat_c, &c, h)?);
    for dist in [Distance::L2, Distance::SqL2] {
        let align = |tp: &mut flatcal::numkit::Tape, x| {
            let cv = tp.constant(c.clone());
            Ok(losses::align_loss(tp, &enc, cv, x, &theta_zs, dist)?.node)
        };
        report(&format!("align {dist:?}"), finite_diff_check(align, &theta, h)?);
    }
    let fpp = |tp: &mut flatcal::numkit::Tape, x| {
        let cv = tp.constant(c.clone());
        let (total, _, _) =
            losses::fpp_objective(tp, &enc, cv, x, &theta_zs, &e1, &e2, 1.015, Distance::SqL2, Distance::Cos)?;
        Ok(total.node)
    };
    report("fpp objective", finite_diff_check(fpp, &theta, h)?);
    Ok(())
}
