//! Calibration and selective-prediction metrics over prediction logs.
//!
//! Equal-width bins are right-closed: bin `b` of `B` covers `(b/B, (b+1)/B]`,
//! and the first bin also contains 0.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_BINS: usize = 15;
pub const CSV_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    /// Position of the sample in its task; stable across reorderings.
    pub index: usize,
    pub confidence: f64,
    pub predicted: usize,
    pub label: usize,
    pub probs: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sharpness: Option<f64>,
    /// Adaptation failed and the zero-shot prediction was used.
    #[serde(default)]
    pub failed: bool,
}

impl PredictionRecord {
    /// Record whose confidence and prediction are read off `probs`.
    pub fn from_probs(index: usize, probs: Vec<f64>, label: usize) -> Self {
        let predicted = crate::losses::argmax(&probs);
        let confidence = probs[predicted];
        Self { index, confidence, predicted, label, probs, sharpness: None, failed: false }
    }

    pub fn correct(&self) -> bool {
        self.predicted == self.label
    }

    fn validate(&self) -> Result<()> {
        let k = self.probs.len();
        if k < 2 {
            return Err(Error::Metric(format!("record {}: need >= 2 class probabilities", self.index)));
        }
        if self.predicted >= k || self.label >= k {
            return Err(Error::Metric(format!("record {}: class index out of range", self.index)));
        }
        if self.probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Metric(format!("record {}: probability outside [0, 1]", self.index)));
        }
        let max = self.probs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if (self.confidence - max).abs() > 1e-9 {
            return Err(Error::Metric(format!(
                "record {}: confidence {} differs from max probability {max}",
                self.index, self.confidence
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PredictionLog {
    pub records: Vec<PredictionRecord>,
}

impl PredictionLog {
    pub fn new(records: Vec<PredictionRecord>) -> Result<Self> {
        for r in &records {
            r.validate()?;
        }
        if let Some(first) = records.first() {
            let k = first.probs.len();
            if records.iter().any(|r| r.probs.len() != k) {
                return Err(Error::Metric("records disagree on the number of classes".into()));
            }
        }
        Ok(Self { records })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.records.first().map_or(0, |r| r.probs.len())
    }

    pub fn accuracy(&self) -> Result<f64> {
        self.non_empty()?;
        Ok(self.records.iter().filter(|r| r.correct()).count() as f64 / self.len() as f64)
    }

    fn non_empty(&self) -> Result<()> {
        if self.is_empty() {
            Err(Error::Metric("empty prediction log".into()))
        } else {
            Ok(())
        }
    }

    /// Newline-delimited JSON, one record per line.
    pub fn write_ndjson(&self, mut w: impl Write) -> Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_ndjson(&self) -> String {
        let mut buf = Vec::new();
        self.write_ndjson(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("JSON is UTF-8")
    }

    pub fn read_ndjson(r: impl BufRead) -> Result<Self> {
        let mut records = Vec::new();
        for line in r.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            records.push(serde_json::from_str(&line)?);
        }
        Self::new(records)
    }
}

fn check_bins(b: usize) -> Result<()> {
    if b < 1 {
        return Err(Error::Metric("number of bins must be >= 1".into()));
    }
    Ok(())
}

/// Right-closed equal-width bin of `x ∈ [0, 1]`.
pub fn bin_index(x: f64, b: usize) -> usize {
    let bf = b as f64;
    let mut i = ((x * bf).ceil() as isize - 1).clamp(0, b as isize - 1) as usize;
    while i + 1 < b && x > (i + 1) as f64 / bf {
        i += 1;
    }
    while i > 0 && x <= i as f64 / bf {
        i -= 1;
    }
    i
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bin {
    pub low: f64,
    pub high: f64,
    pub count: usize,
    /// Mean confidence; 0 for an empty bin.
    pub conf: f64,
    /// Accuracy; 0 for an empty bin.
    pub acc: f64,
}

impl Bin {
    fn gap(&self) -> f64 {
        (self.acc - self.conf).abs()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityBins {
    pub bins: Vec<Bin>,
    pub total: usize,
}

impl ReliabilityBins {
    pub fn ece(&self) -> f64 {
        let m = self.total as f64;
        self.bins.iter().map(|b| b.count as f64 / m * b.gap()).sum()
    }

    pub fn mce(&self) -> f64 {
        self.bins.iter().filter(|b| b.count > 0).map(Bin::gap).fold(0.0, f64::max)
    }

    /// `bin_low,bin_high,count,conf,acc`; conf and acc are blank for empty
    /// bins.
    pub fn to_csv(&self) -> String {
        let mut out = format!("# schema_version={CSV_SCHEMA_VERSION}\nbin_low,bin_high,count,conf,acc\n");
        for b in &self.bins {
            if b.count == 0 {
                out.push_str(&format!("{},{},0,,\n", b.low, b.high));
            } else {
                out.push_str(&format!("{},{},{},{},{}\n", b.low, b.high, b.count, b.conf, b.acc));
            }
        }
        out
    }
}

/// Records in index order, so that sums inside a bin do not depend on how
/// the log happens to be ordered.
fn canonical(log: &PredictionLog) -> Vec<&PredictionRecord> {
    let mut recs: Vec<&PredictionRecord> = log.records.iter().collect();
    recs.sort_by(|a, b| a.index.cmp(&b.index).then(a.confidence.total_cmp(&b.confidence)));
    recs
}

/// Averages `(bin, score, hit)` triples per bin.
fn binned(items: impl Iterator<Item = (usize, f64, bool)>, edges: Vec<(f64, f64)>) -> ReliabilityBins {
    let mut conf_sum = vec![0.0; edges.len()];
    let mut hits = vec![0usize; edges.len()];
    let mut counts = vec![0usize; edges.len()];
    let mut total = 0;
    for (bin, conf, hit) in items {
        conf_sum[bin] += conf;
        hits[bin] += hit as usize;
        counts[bin] += 1;
        total += 1;
    }
    let bins = edges
        .into_iter()
        .enumerate()
        .map(|(i, (low, high))| {
            let n = counts[i];
            let (conf, acc) = if n == 0 { (0.0, 0.0) } else { (conf_sum[i] / n as f64, hits[i] as f64 / n as f64) };
            Bin { low, high, count: n, conf, acc }
        })
        .collect();
    ReliabilityBins { bins, total }
}

fn equal_width_edges(b: usize) -> Vec<(f64, f64)> {
    (0..b).map(|i| (i as f64 / b as f64, (i + 1) as f64 / b as f64)).collect()
}

pub fn reliability(log: &PredictionLog, b: usize) -> Result<ReliabilityBins> {
    log.non_empty()?;
    check_bins(b)?;
    Ok(binned(
        canonical(log).into_iter().map(|r| (bin_index(r.confidence, b), r.confidence, r.correct())),
        equal_width_edges(b),
    ))
}

/// Expected calibration error with `b` equal-width bins.
pub fn ece(log: &PredictionLog, b: usize) -> Result<f64> {
    Ok(reliability(log, b)?.ece())
}

/// Largest per-bin gap among non-empty equal-width bins.
pub fn mce(log: &PredictionLog, b: usize) -> Result<f64> {
    Ok(reliability(log, b)?.mce())
}

/// Static calibration error: every sample enters each class's binning with
/// its probability for that class; a hit means the label is that class.
pub fn sce(log: &PredictionLog, b: usize, k: usize) -> Result<f64> {
    log.non_empty()?;
    check_bins(b)?;
    if k != log.num_classes() {
        return Err(Error::Metric(format!("log has {} classes, expected {k}", log.num_classes())));
    }
    let total: f64 = (0..k)
        .map(|c| {
            binned(
                canonical(log).into_iter().map(|r| (bin_index(r.probs[c], b), r.probs[c], r.label == c)),
                equal_width_edges(b),
            )
            .ece()
        })
        .sum();
    Ok(total / k as f64)
}

/// Equal-mass bins over the sorted confidences; tied confidences all go to
/// the lowest bin any of them would occupy.
pub fn adaptive_reliability(log: &PredictionLog, b: usize) -> Result<ReliabilityBins> {
    log.non_empty()?;
    check_bins(b)?;
    let recs = canonical(log);
    let m = recs.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&x, &y| recs[x].confidence.total_cmp(&recs[y].confidence).then(x.cmp(&y)));
    let mut assign = vec![0usize; m];
    let mut prev: Option<(f64, usize)> = None;
    for (pos, &i) in order.iter().enumerate() {
        let c = recs[i].confidence;
        let bin = match prev {
            Some((pc, pb)) if pc == c => pb,
            _ => pos * b / m,
        };
        assign[i] = bin;
        prev = Some((c, bin));
    }
    let mut edges = vec![(f64::INFINITY, f64::NEG_INFINITY); b];
    for (i, r) in recs.iter().enumerate() {
        let e = &mut edges[assign[i]];
        e.0 = e.0.min(r.confidence);
        e.1 = e.1.max(r.confidence);
    }
    let edges = edges.into_iter().map(|(lo, hi)| if lo > hi { (f64::NAN, f64::NAN) } else { (lo, hi) }).collect();
    Ok(binned(recs.iter().enumerate().map(|(i, r)| (assign[i], r.confidence, r.correct())), edges))
}

/// ECE over equal-mass bins.
pub fn aece(log: &PredictionLog, b: usize) -> Result<f64> {
    Ok(adaptive_reliability(log, b)?.ece())
}

/// Area under the risk–coverage curve: samples sorted by descending
/// confidence (ties by original index), mean over `i` of the error rate
/// among the first `i`.
pub fn aurc(log: &PredictionLog) -> Result<f64> {
    log.non_empty()?;
    let mut order: Vec<&PredictionRecord> = log.records.iter().collect();
    order.sort_by(|a, b| b.confidence.total_cmp(&a.confidence).then(a.index.cmp(&b.index)));
    let mut errors = 0usize;
    let mut total = 0.0;
    for (i, r) in order.iter().enumerate() {
        errors += !r.correct() as usize;
        total += errors as f64 / (i + 1) as f64;
    }
    Ok(total / order.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SharpnessGroup {
    pub count: usize,
    pub min_sharpness: f64,
    pub max_sharpness: f64,
    pub mean_sharpness: f64,
    pub ece: f64,
    pub accuracy: f64,
}

/// Sorts records by sharpness (ties by index) and splits them into
/// `n_groups` equal groups, the remainder going to the last one.
pub fn sharpness_groups(log: &PredictionLog, n_groups: usize, b: usize) -> Result<Vec<SharpnessGroup>> {
    if n_groups < 1 || log.len() < n_groups {
        return Err(Error::Grouping(format!("cannot split {} records into {n_groups} groups", log.len())));
    }
    let mut recs: Vec<(f64, &PredictionRecord)> = log
        .records
        .iter()
        .map(|r| {
            r.sharpness
                .map(|s| (s, r))
                .ok_or_else(|| Error::Grouping(format!("record {} has no sharpness reading", r.index)))
        })
        .collect::<Result<_>>()?;
    recs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.index.cmp(&b.1.index)));
    let size = recs.len() / n_groups;
    (0..n_groups)
        .map(|g| {
            let end = if g + 1 == n_groups { recs.len() } else { (g + 1) * size };
            let chunk = &recs[g * size..end];
            let sub = PredictionLog { records: chunk.iter().map(|(_, r)| (*r).clone()).collect() };
            let s: Vec<f64> = chunk.iter().map(|c| c.0).collect();
            Ok(SharpnessGroup {
                count: chunk.len(),
                min_sharpness: s[0],
                max_sharpness: s[s.len() - 1],
                mean_sharpness: s.iter().sum::<f64>() / s.len() as f64,
                ece: ece(&sub, b)?,
                accuracy: sub.accuracy()?,
            })
        })
        .collect()
}

/// All metrics for one log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub n: usize,
    pub bins: usize,
    pub accuracy: f64,
    pub ece: f64,
    pub sce: f64,
    pub aece: f64,
    pub mce: f64,
    pub aurc: f64,
    pub mean_sharpness: Option<f64>,
    pub failed_samples: usize,
    pub reliability: ReliabilityBins,
}

impl CalibrationReport {
    pub fn compute(log: &PredictionLog, b: usize) -> Result<Self> {
        let reliability = reliability(log, b)?;
        let sharp: Vec<f64> = log.records.iter().filter_map(|r| r.sharpness).collect();
        let mean_sharpness =
            (sharp.len() == log.len()).then(|| sharp.iter().sum::<f64>() / sharp.len() as f64);
        Ok(Self {
            n: log.len(),
            bins: b,
            accuracy: log.accuracy()?,
            ece: reliability.ece(),
            sce: sce(log, b, log.num_classes())?,
            aece: aece(log, b)?,
            mce: reliability.mce(),
            aurc: aurc(log)?,
            mean_sharpness,
            failed_samples: log.records.iter().filter(|r| r.failed).count(),
            reliability,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Two-class record with the given confidence and correctness.
    fn rec(index: usize, conf: f64, correct: bool) -> PredictionRecord {
        let label = if correct { 0 } else { 1 };
        PredictionRecord::from_probs(index, vec![conf, 1.0 - conf], label)
    }

    fn log(items: &[(f64, bool)]) -> PredictionLog {
        PredictionLog::new(items.iter().enumerate().map(|(i, &(c, h))| rec(i, c, h)).collect()).unwrap()
    }

    #[test]
    fn bin_edges_are_right_closed() {
        assert_eq!(bin_index(0.0, 10), 0);
        assert_eq!(bin_index(0.1, 10), 0);
        assert_eq!(bin_index(0.1000001, 10), 1);
        assert_eq!(bin_index(0.55, 10), 5);
        assert_eq!(bin_index(1.0, 10), 9);
        for i in 0..=15 {
            let x = i as f64 / 15.0;
            let b = bin_index(x, 15);
            assert!(x <= (b + 1) as f64 / 15.0 && (b == 0 || x > b as f64 / 15.0));
        }
    }

    #[test]
    fn ece_examples() {
        assert_eq!(ece(&log(&[(1.0, true), (1.0, true)]), 15).unwrap(), 0.0);
        let l = log(&[(0.9, false), (0.9, true)]);
        assert!((ece(&l, 10).unwrap() - 0.4).abs() < 1e-15);
        // 3 of 4 right at 0.75, 1 of 2 right at 0.5.
        let cal = log(&[(0.75, true), (0.75, true), (0.75, true), (0.75, false), (0.5, true), (0.5, false)]);
        assert_eq!(ece(&cal, 10).unwrap(), 0.0);
        for bin in reliability(&cal, 10).unwrap().bins.iter().filter(|b| b.count > 0) {
            assert!((bin.acc - bin.conf).abs() < 1e-12);
        }
        assert!(ece(&PredictionLog::default(), 10).is_err());
        assert!(ece(&l, 0).is_err());
    }

    #[test]
    fn reliability_single_sample() {
        let r = reliability(&log(&[(0.55, true)]), 10).unwrap();
        assert_eq!(r.bins[5].count, 1);
        assert_eq!((r.bins[5].conf, r.bins[5].acc), (0.55, 1.0));
        assert_eq!(r.bins.iter().map(|b| b.count).sum::<usize>(), 1);
    }

    #[test]
    fn sce_examples() {
        let balanced = PredictionLog::new(
            (0..4).map(|i| PredictionRecord::from_probs(i, vec![0.5, 0.5], i % 2)).collect(),
        )
        .unwrap();
        assert_eq!(sce(&balanced, 15, 2).unwrap(), 0.0);
        let onehot = PredictionLog::new(
            (0..3).map(|i| PredictionRecord::from_probs(i, vec![(i == 0) as u8 as f64, (i == 1) as u8 as f64, (i == 2) as u8 as f64], i)).collect(),
        )
        .unwrap();
        assert_eq!(sce(&onehot, 15, 3).unwrap(), 0.0);
        assert!(sce(&onehot, 15, 4).is_err());
    }

    #[test]
    fn sce_small_log_by_hand() {
        let probs = [
            (vec![0.7, 0.2, 0.1], 0),
            (vec![0.3, 0.6, 0.1], 2),
            (vec![0.2, 0.2, 0.6], 2),
            (vec![0.4, 0.35, 0.25], 1),
            (vec![0.1, 0.1, 0.8], 0),
        ];
        let l = PredictionLog::new(
            probs.iter().enumerate().map(|(i, (p, y))| PredictionRecord::from_probs(i, p.clone(), *y)).collect(),
        )
        .unwrap();
        // B=2: bins [0, 0.5] and (0.5, 1].
        // class 0: low {0.3,0.2,0.4,0.1} hits {y=0 at 0.1} -> |1/4 - 0.25| = 0; high {0.7} hit -> 0.3
        let c0 = 4.0 / 5.0 * (0.25f64 - 0.25).abs() + 1.0 / 5.0 * (1.0f64 - 0.7).abs();
        // class 1: low {0.2,0.2,0.35,0.1} one hit -> |0.25 - 0.2125|; high {0.6} miss -> 0.6
        let c1 = 4.0 / 5.0 * (0.25f64 - 0.2125).abs() + 1.0 / 5.0 * 0.6;
        // class 2: low {0.1,0.1,0.25} one hit -> |1/3 - 0.15|; high {0.6,0.8} one hit -> |0.5 - 0.7|
        let c2 = 3.0 / 5.0 * (1.0f64 / 3.0 - 0.15).abs() + 2.0 / 5.0 * (0.5f64 - 0.7).abs();
        let expect = (c0 + c1 + c2) / 3.0;
        assert!((sce(&l, 2, 3).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn mce_aece_aurc_examples() {
        assert_eq!(mce(&log(&[(1.0, true)]), 15).unwrap(), 0.0);
        assert!((mce(&log(&[(0.8, true), (0.8, true)]), 15).unwrap() - 0.2).abs() < 1e-15);
        let same = log(&[(0.7, true), (0.7, false), (0.7, true), (0.7, true)]);
        let a = adaptive_reliability(&same, 4).unwrap();
        assert_eq!(a.bins.iter().filter(|b| b.count > 0).count(), 1);
        assert!((aece(&same, 4).unwrap() - 0.05).abs() < 1e-12);
        let l = log(&[(0.9, true), (0.8, true), (0.7, false), (0.6, true)]);
        assert!((aurc(&l).unwrap() - (0.0 + 0.0 + 1.0 / 3.0 + 0.25) / 4.0).abs() < 1e-15);
    }

    #[test]
    fn sharpness_groups_split_in_order() {
        let mut recs: Vec<PredictionRecord> = (0..10).map(|i| rec(i, 0.6, i % 3 != 0)).collect();
        for (i, r) in recs.iter_mut().enumerate() {
            r.sharpness = Some((10 - i) as f64);
        }
        let l = PredictionLog::new(recs).unwrap();
        let g = sharpness_groups(&l, 3, 15).unwrap();
        assert_eq!(g.iter().map(|g| g.count).collect::<Vec<_>>(), vec![3, 3, 4]);
        assert_eq!((g[0].min_sharpness, g[0].max_sharpness), (1.0, 3.0));
        assert!(g.windows(2).all(|w| w[0].max_sharpness <= w[1].min_sharpness));
        let short = PredictionLog::new(l.records[..2].to_vec()).unwrap();
        assert!(matches!(sharpness_groups(&short, 3, 15), Err(Error::Grouping(_))));
        let no_sharp = log(&[(0.6, true), (0.7, true), (0.8, false)]);
        assert!(matches!(sharpness_groups(&no_sharp, 3, 15), Err(Error::Grouping(_))));
    }

    #[test]
    fn ndjson_round_trip_and_validation() {
        let mut l = log(&[(0.9, true), (0.6, false)]);
        l.records[0].sharpness = Some(0.01);
        let back = PredictionLog::read_ndjson(l.to_ndjson().as_bytes()).unwrap();
        assert_eq!(back, l);
        let mut bad = rec(0, 0.7, true);
        bad.confidence = 0.5;
        assert!(PredictionLog::new(vec![bad]).is_err());
    }

    #[test]
    fn reliability_csv_has_schema_header() {
        let csv = reliability(&log(&[(0.55, true)]), 4).unwrap().to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "# schema_version=1");
        assert_eq!(lines[1], "bin_low,bin_high,count,conf,acc");
        assert_eq!(lines.len(), 6);
    }

    fn arb_log() -> impl Strategy<Value = PredictionLog> {
        prop::collection::vec((prop::collection::vec(0.01f64..1.0, 3), 0usize..3), 1..60).prop_map(|items| {
            let recs = items
                .into_iter()
                .enumerate()
                .map(|(i, (w, y))| {
                    let s: f64 = w.iter().sum();
                    PredictionRecord::from_probs(i, w.iter().map(|x| x / s).collect(), y)
                })
                .collect();
            PredictionLog::new(recs).unwrap()
        })
    }

    proptest! {
        #[test]
        fn metric_ranges_and_mce_bound(l in arb_log(), b in 1usize..20) {
            let e = ece(&l, b).unwrap();
            prop_assert!((0.0..=1.0).contains(&e));
            prop_assert!(mce(&l, b).unwrap() >= e - 1e-15);
            let s = sce(&l, b, 3).unwrap();
            prop_assert!((0.0..=1.0).contains(&s));
            prop_assert!((0.0..=1.0).contains(&aurc(&l).unwrap()));
        }

        #[test]
        fn permutation_invariance(l in arb_log(), seed in 0u64..1000) {
            let mut shuffled = l.clone();
            let n = shuffled.records.len();
            let mut r = crate::numkit::Rng::new(seed);
            for i in (1..n).rev() {
                let j = r.below(i + 1);
                shuffled.records.swap(i, j);
            }
            prop_assert!((ece(&l, 15).unwrap() - ece(&shuffled, 15).unwrap()).abs() < 1e-12);
            prop_assert!((sce(&l, 15, 3).unwrap() - sce(&shuffled, 15, 3).unwrap()).abs() < 1e-12);
            prop_assert!((aece(&l, 15).unwrap() - aece(&shuffled, 15).unwrap()).abs() < 1e-12);
            prop_assert_eq!(mce(&l, 15).unwrap(), mce(&shuffled, 15).unwrap());
            prop_assert!((aurc(&l).unwrap() - aurc(&shuffled).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn aece_single_bin_is_global_gap(l in arb_log()) {
            let acc = l.accuracy().unwrap();
            let conf = l.records.iter().map(|r| r.confidence).sum::<f64>() / l.len() as f64;
            prop_assert!((aece(&l, 1).unwrap() - (acc - conf).abs()).abs() < 1e-12);
        }
    }
}
