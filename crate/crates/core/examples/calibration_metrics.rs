//! Calibration metrics on a synthetic log whose confidences are too high by
//! a known amount, plus the reliability table and an NDJSON round trip.

use flatcal::calibration::{self, CalibrationReport, PredictionLog, PredictionRecord};
use flatcal::numkit::Rng;

fn main() -> flatcal::Result<()> {
    let mut rng = Rng::new(3);
    let k = 4;
    let records: Vec<PredictionRecord> = (0..2000)
        .map(|i| {
            // True accuracy is `conf - 0.1`; the top class is always class 0.
            let conf = 0.4 + 0.6 * rng.uniform();
            let rest = (1.0 - conf) / (k - 1) as f64;
            let mut probs = vec![rest; k];
            probs[0] = conf;
            let correct = rng.uniform() < (conf - 0.1).max(0.0);
            let label = if correct { 0 } else { 1 + rng.below(k - 1) };
            PredictionRecord::from_probs(i, probs, label)
        })
        .collect();
    let log = PredictionLog::new(records)?;

    let r = CalibrationReport::compute(&log, calibration::DEFAULT_BINS)?;
    println!("n={} acc={:.4}", r.n, r.accuracy);
    println!("ECE={:.4} (built-in gap 0.1)  SCE={:.4}  AECE={:.4}  MCE={:.4}  AURC={:.4}", r.ece, r.sce, r.aece, r.mce, r.aurc);
    println!("\nreliability table:\n{}", r.reliability.to_csv());

    let back = PredictionLog::read_ndjson(log.to_ndjson().as_bytes())?;
    println!("ndjson round trip exact: {}", back == log);
    Ok(())
}
