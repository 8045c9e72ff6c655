//! Monte Carlo check of the expected-entropy expansion over a sweep of
//! feature dimensions.
//!
//! ```text
//! cargo run --release --example theorem1 -- [n_mc]
//! ```

use flatcal::numkit::Rng;
use flatcal::theory::{verify_theorem1, SurrogateTag};

fn main() -> flatcal::Result<()> {
    let n_mc = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(200_000);
    let d_list = [64, 128, 256, 512];
    for reg in [SurrogateTag::Disp, SurrogateTag::Orth] {
        let rep = verify_theorem1(reg, 10, &d_list, 20, n_mc, &Rng::new(2024))?;
        println!("{reg:?}: K={} n_mc={}", rep.k, rep.n_mc);
        println!("{:>5} {:>12} {:>10} {:>12} {:>8}", "D", "residual", "stderr", "plain", "spearman");
        for d in &rep.dims {
            println!(
                "{:>5} {:>12.3e} {:>10.1e} {:>12.3e} {:>8.4}",
                d.d, d.max_residual, d.max_residual_stderr, d.max_residual_plain, d.rank_correlation
            );
        }
        println!(
            "exponent {:.3} (plain MC {:.3}); orthonormal residual {:.2e} vs bound {:.2e}; inconclusive: {}\n",
            rep.exponent, rep.exponent_plain, rep.orthonormal_residual, rep.orthonormal_bound, rep.inconclusive
        );
    }
    Ok(())
}
