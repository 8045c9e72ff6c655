//! Uniform sampling on the unit sphere, checked against its exact moments:
//! `E[x₁²] = 1/D` and `E[x₁⁴] = 3/(D(D+2))`.

use flatcal::numkit::{sphere_uniform, Rng};

fn main() -> flatcal::Result<()> {
    let n = 200_000;
    for d in [3, 16, 64, 512] {
        let mut rng = Rng::new(d as u64);
        let (mut m1, mut m2, mut m4) = (0.0, 0.0, 0.0);
        for _ in 0..n {
            let x = sphere_uniform(&mut rng, d)?.as_slice()[0];
            m1 += x;
            m2 += x * x;
            m4 += x.powi(4);
        }
        let n = n as f64;
        let d = d as f64;
        println!(
            "D={d:>4}: E[x1]={:+.5}  E[x1^2]={:.6} (exact {:.6})  E[x1^4]={:.3e} (exact {:.3e})",
            m1 / n,
            m2 / n,
            1.0 / d,
            m4 / n,
            3.0 / (d * (d + 2.0))
        );
    }
    Ok(())
}
