//! How the flatness loss relates to the encoder Jacobians: quadratic growth
//! in σ, agreement with `(σ1²‖J_C‖² + σ2²‖J_θ‖²)/(2K)` at small σ, and the
//! increase when the prompt Jacobian is doubled.

use flatcal::encoder::{ClassSet, EncoderDims, Prompt, SynthEncoder};
use flatcal::numkit::Rng;
use flatcal::probes::{doubled_jacobian_check, flatness_curvature_link, sigma_halving};

fn main() -> flatcal::Result<()> {
    let dims = EncoderDims { p: 4, e: 32, h: 128, d: 64 };
    let k = 10;
    let mut rng = Rng::new(11);
    let enc = SynthEncoder::new(dims, 5)?;
    let classes = ClassSet::new(rng.gaussian_mat(k, dims.e, 1.0))?;
    let prompt = Prompt(rng.gaussian_mat(dims.p, dims.e, 1.0));
    let mc = Rng::new(12);

    let (s1, s2) = (0.02f64.sqrt(), 0.005f64.sqrt());
    let h = sigma_halving(&enc, &classes, &prompt, s1, s2, 3, 2000, &mc)?;
    for (i, ((a, b), m)) in h.sigmas.iter().zip(&h.means).enumerate() {
        let ratio = if i > 0 { format!("  ratio {:.3}", h.ratios[i - 1]) } else { String::new() };
        println!("σ1={a:.4} σ2={b:.4}  E[L_flat]={m:.4e}{ratio}");
    }
    println!("halving band passed: {}\n", h.passed);

    for scale in [1.0, 0.1, 1e-3] {
        let r = flatness_curvature_link(&enc, &classes, &prompt, s1 * scale, s2 * scale, 2000, 200, &mc)?;
        println!(
            "scale {scale:>6}: MC {:.4e}  predicted {:.4e}  ratio {:.3}{}",
            r.flat.mean,
            r.predicted,
            r.ratio,
            if r.band_checked { "  (band enforced)" } else { "" }
        );
    }

    let g = doubled_jacobian_check(&enc, &classes, &prompt, s1, s2, 2000, &mc)?;
    println!("\ndoubled prompt Jacobian: {:.4e} -> {:.4e} (increased: {})", g.base, g.doubled, g.increased);
    Ok(())
}
