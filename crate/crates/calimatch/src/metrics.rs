//! Evaluation: top-1 accuracy, expected calibration error with reliability
//! tables, rejection F1 for unseen-class detection, and the confidence
//! threshold sweep.
//!
//! Calibration error uses equal-width half-open bins `((b-1)/B, b/B]` with
//! `B = 15` by default; a confidence of exactly zero falls into the first
//! bin. Unseen-class detection is scored as binary classification with the
//! unseen class as the positive: a sample is declared unseen when its
//! rejection score `u = 1 - s` exceeds one half, and the reported binary
//! confidence is `max(s, u)`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::calibration::bin_index;
use crate::data::MismatchDataset;
use crate::error::{Error, Result};
use crate::model::{argmax_row, ModelParams};
use crate::selection::score;

/// Default bin count for calibration error.
pub const DEFAULT_ECE_BINS: usize = 15;

/// Rejection-score cutoff for declaring a sample unseen.
pub const OOD_DECISION_THRESHOLD: f64 = 0.5;

/// The confidence grid of the threshold sweep.
pub const SWEEP_TAU1_GRID: [f64; 4] = [0.5, 0.6, 0.7, 0.8];

/// One reliability bin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub mean_confidence: f64,
    pub accuracy: f64,
    pub gap: f64,
}

/// Per-bin confidence/accuracy table backing a reliability diagram.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityTable {
    pub bins: Vec<ReliabilityBin>,
    pub n: usize,
}

impl ReliabilityTable {
    /// Recompute the calibration error from the table alone.
    pub fn ece(&self) -> f64 {
        self.bins
            .iter()
            .map(|b| b.count as f64 / self.n as f64 * b.gap)
            .sum()
    }
}

/// Expected calibration error plus its reliability table.
pub fn ece(confidences: &[f64], correct: &[bool], b: usize) -> Result<(f64, ReliabilityTable)> {
    if b == 0 {
        return Err(Error::config("bin count must be at least 1"));
    }
    if confidences.is_empty() {
        return Err(Error::validation(
            "cannot compute calibration error on an empty sample set",
        ));
    }
    if confidences.len() != correct.len() {
        return Err(Error::validation(
            "confidences and correctness flags must have equal length",
        ));
    }
    if let Some(&bad) = confidences.iter().find(|c| !(0.0..=1.0).contains(*c)) {
        return Err(Error::validation(format!(
            "confidence {bad} outside [0, 1]"
        )));
    }
    let n = confidences.len();
    let mut counts = vec![0usize; b];
    let mut conf_sums = vec![0.0f64; b];
    let mut hits = vec![0usize; b];
    for (&c, &ok) in confidences.iter().zip(correct) {
        let idx = bin_index(c, b);
        counts[idx] += 1;
        conf_sums[idx] += c;
        if ok {
            hits[idx] += 1;
        }
    }
    let mut bins = Vec::with_capacity(b);
    let mut total = 0.0;
    for i in 0..b {
        let (mean_confidence, accuracy, gap) = if counts[i] == 0 {
            (0.0, 0.0, 0.0)
        } else {
            let mc = conf_sums[i] / counts[i] as f64;
            let acc = hits[i] as f64 / counts[i] as f64;
            (mc, acc, (acc - mc).abs())
        };
        total += counts[i] as f64 / n as f64 * gap;
        bins.push(ReliabilityBin {
            lo: i as f64 / b as f64,
            hi: (i + 1) as f64 / b as f64,
            count: counts[i],
            mean_confidence,
            accuracy,
            gap,
        });
    }
    Ok((total, ReliabilityTable { bins, n }))
}

/// F1 with the stated undefined-marker convention: `None` only when there are
/// neither positive predictions nor positives.
pub fn f1_from_counts(tp: usize, fp: usize, fn_: usize) -> Option<f64> {
    if tp + fp == 0 && tp + fn_ == 0 {
        return None;
    }
    let precision = if tp + fp == 0 {
        0.0
    } else {
        tp as f64 / (tp + fp) as f64
    };
    let recall = if tp + fn_ == 0 {
        0.0
    } else {
        tp as f64 / (tp + fn_) as f64
    };
    if precision + recall == 0.0 {
        Some(0.0)
    } else {
        Some(2.0 * precision * recall / (precision + recall))
    }
}

/// Which probability view supplies the reported classification confidence.
///
/// Calibrated runs report the scaled view; ablations trained without the
/// classifier calibration loss report the raw view.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ConfidenceSource {
    #[default]
    Scaled,
    Raw,
}

/// Evaluation knobs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalConfig {
    pub ece_bins: usize,
    pub confidence_source: ConfidenceSource,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            ece_bins: DEFAULT_ECE_BINS,
            confidence_source: ConfidenceSource::Scaled,
        }
    }
}

/// One row of the confidence threshold sweep.
///
/// `accuracy` is top-1 accuracy over seen-class test samples whose binary
/// confidence `max(s, u)` exceeds `tau1`; `f1` is the rejection F1 over the
/// confident subset of the all-classes test split; `selected_fraction` is the
/// fraction of seen-class test samples that are confident.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub tau1: f64,
    pub accuracy: Option<f64>,
    pub f1: Option<f64>,
    pub selected_fraction: Option<f64>,
}

/// Scalar evaluation results plus the sweep.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub top1_accuracy: f64,
    pub multiclass_ece: f64,
    pub confidence_source: ConfidenceSource,
    pub ood_f1: Option<f64>,
    pub binary_ood_ece: f64,
    pub n_test_seen: usize,
    pub n_test_all: usize,
    pub sweep: Vec<SweepRow>,
}

/// Report plus the reliability tables behind its calibration numbers.
#[derive(Debug, Clone)]
pub struct EvaluationArtifacts {
    pub report: MetricsReport,
    pub multiclass_reliability: ReliabilityTable,
    pub binary_ood_reliability: ReliabilityTable,
}

/// Rejection metrics from precomputed seen-class scores.
///
/// Factored out of [`evaluate`] so score-level cases (a perfect detector, a
/// hand-built confusion matrix) can be driven directly.
pub fn ood_metrics_from_scores(
    s: &[f64],
    unseen_truth: &[bool],
    ece_bins: usize,
) -> Result<(Option<f64>, f64, ReliabilityTable)> {
    if s.len() != unseen_truth.len() {
        return Err(Error::validation("scores and truth disagree in length"));
    }
    let mut tp = 0;
    let mut fp = 0;
    let mut fn_ = 0;
    let mut confs = Vec::with_capacity(s.len());
    let mut correct = Vec::with_capacity(s.len());
    for (&si, &unseen) in s.iter().zip(unseen_truth) {
        let u = 1.0 - si;
        let decide_unseen = u > OOD_DECISION_THRESHOLD;
        match (decide_unseen, unseen) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
        confs.push(si.max(u).clamp(0.0, 1.0));
        correct.push(decide_unseen == unseen);
    }
    let f1 = f1_from_counts(tp, fp, fn_);
    let (e, table) = ece(&confs, &correct, ece_bins)?;
    Ok((f1, e, table))
}

/// Evaluate trained parameters on a dataset's test splits.
pub fn evaluate(
    params: &ModelParams,
    dataset: &MismatchDataset,
    cfg: &EvalConfig,
) -> Result<EvaluationArtifacts> {
    let seen_rows = dataset.test_seen_indices();
    if dataset.test.labels.is_empty() {
        return Err(Error::config("dataset has no test split"));
    }
    if seen_rows.is_empty() {
        return Err(Error::config("test split has no seen-class samples"));
    }

    let (outputs, _) = params.forward(dataset.test.x.view())?;
    let n_all = dataset.test.labels.len();

    // Classification on the seen-class subset.
    let mut hits = 0usize;
    let mut confs = Vec::with_capacity(seen_rows.len());
    let mut correct = Vec::with_capacity(seen_rows.len());
    for &i in &seen_rows {
        let truth = dataset
            .seen_position(dataset.test.labels[i])
            .expect("seen row has a seen label");
        let pred = argmax_row(outputs.p.row(i));
        let conf_row = match cfg.confidence_source {
            ConfidenceSource::Scaled => outputs.p_s.row(i),
            ConfidenceSource::Raw => outputs.p.row(i),
        };
        let conf = conf_row[argmax_row(conf_row)];
        if pred == truth {
            hits += 1;
        }
        confs.push(conf);
        correct.push(pred == truth);
    }
    let top1_accuracy = hits as f64 / seen_rows.len() as f64;
    let (multiclass_ece, multiclass_reliability) = ece(&confs, &correct, cfg.ece_bins)?;

    // Rejection metrics over the all-classes test split.
    let mut s_values = Vec::with_capacity(n_all);
    for i in 0..n_all {
        let (s, _, _) = score(&outputs, i);
        s_values.push(s);
    }
    let unseen_truth: Vec<bool> = dataset.test.seen.iter().map(|&s| !s).collect();
    let (ood_f1, binary_ood_ece, binary_ood_reliability) =
        ood_metrics_from_scores(&s_values, &unseen_truth, cfg.ece_bins)?;

    // Threshold sweep on the binary confidence max(s, u).
    let bin_conf: Vec<f64> = s_values.iter().map(|&s| s.max(1.0 - s)).collect();
    let mut sweep = Vec::new();
    for &tau1 in &SWEEP_TAU1_GRID {
        let mut acc_hits = 0usize;
        let mut acc_total = 0usize;
        let mut seen_confident = 0usize;
        let mut sub_s = Vec::new();
        let mut sub_unseen = Vec::new();
        for i in 0..n_all {
            let confident = bin_conf[i] > tau1;
            if dataset.test.seen[i] && confident {
                seen_confident += 1;
                acc_total += 1;
                let truth = dataset
                    .seen_position(dataset.test.labels[i])
                    .expect("seen row has a seen label");
                if argmax_row(outputs.p.row(i)) == truth {
                    acc_hits += 1;
                }
            }
            if confident {
                sub_s.push(s_values[i]);
                sub_unseen.push(!dataset.test.seen[i]);
            }
        }
        let accuracy = (acc_total > 0).then(|| acc_hits as f64 / acc_total as f64);
        let f1 = if sub_s.is_empty() {
            None
        } else {
            let mut tp = 0;
            let mut fp = 0;
            let mut fn_ = 0;
            for (&si, &unseen) in sub_s.iter().zip(&sub_unseen) {
                let decide = (1.0 - si) > OOD_DECISION_THRESHOLD;
                match (decide, unseen) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, true) => fn_ += 1,
                    (false, false) => {}
                }
            }
            f1_from_counts(tp, fp, fn_)
        };
        let selected_fraction = Some(seen_confident as f64 / seen_rows.len() as f64);
        sweep.push(SweepRow {
            tau1,
            accuracy,
            f1,
            selected_fraction,
        });
    }

    Ok(EvaluationArtifacts {
        report: MetricsReport {
            top1_accuracy,
            multiclass_ece,
            confidence_source: cfg.confidence_source,
            ood_f1,
            binary_ood_ece,
            n_test_seen: seen_rows.len(),
            n_test_all: n_all,
            sweep,
        },
        multiclass_reliability,
        binary_ood_reliability,
    })
}

/// Write a reliability table as CSV (`bin_lo,bin_hi,count,mean_confidence,accuracy,gap`).
pub fn emit_reliability_data(table: &ReliabilityTable, path: &Path) -> Result<()> {
    let mut out = String::from("bin_lo,bin_hi,count,mean_confidence,accuracy,gap\n");
    for b in &table.bins {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            b.lo, b.hi, b.count, b.mean_confidence, b.accuracy, b.gap
        ));
    }
    fs::write(path, out).map_err(|e| Error::io(format!("{}: {e}", path.display())))
}

/// Read back an emitted reliability CSV; used to verify round trips.
pub fn read_reliability_data(path: &Path) -> Result<ReliabilityTable> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(format!("{}: {e}", path.display())))?;
    let mut bins = Vec::new();
    let mut n = 0usize;
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 6 {
            return Err(Error::io(format!("malformed reliability row: {line}")));
        }
        let parse = |s: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|e| Error::io(format!("bad float {s}: {e}")))
        };
        let count: usize = parts[2]
            .parse()
            .map_err(|e| Error::io(format!("bad count: {e}")))?;
        n += count;
        bins.push(ReliabilityBin {
            lo: parse(parts[0])?,
            hi: parse(parts[1])?,
            count,
            mean_confidence: parse(parts[3])?,
            accuracy: parse(parts[4])?,
            gap: parse(parts[5])?,
        });
    }
    Ok(ReliabilityTable { bins, n })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_synthetic, SyntheticConfig};
    use crate::model::make_toy_model;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Independent recount: bin by explicit interval comparison, then fold.
    fn brute_force_ece(confidences: &[f64], correct: &[bool], b: usize) -> f64 {
        let n = confidences.len() as f64;
        let mut total = 0.0;
        for bin in 0..b {
            let lo = bin as f64 / b as f64;
            let hi = (bin + 1) as f64 / b as f64;
            let members: Vec<usize> = (0..confidences.len())
                .filter(|&i| {
                    let c = confidences[i];
                    (c > lo && c <= hi) || (bin == 0 && c == 0.0)
                })
                .collect();
            if members.is_empty() {
                continue;
            }
            let mc: f64 =
                members.iter().map(|&i| confidences[i]).sum::<f64>() / members.len() as f64;
            let acc = members.iter().filter(|&&i| correct[i]).count() as f64
                / members.len() as f64;
            total += members.len() as f64 / n * (acc - mc).abs();
        }
        total
    }

    #[test]
    fn hand_case_is_exactly_point_four() {
        let (e, table) = ece(&[0.9, 0.9, 0.6, 0.6], &[true, false, true, true], 15).unwrap();
        assert_eq!(e, 0.4);
        assert_eq!(table.bins.len(), 15);
        assert_eq!(table.n, 4);
    }

    #[test]
    fn perfect_predictions_have_zero_error() {
        let (e, _) = ece(&[1.0, 1.0, 1.0], &[true, true, true], 15).unwrap();
        assert_eq!(e, 0.0);
    }

    #[test]
    fn matches_brute_force_recount() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let n = rng.gen_range(1..200);
            let confs: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..=1.0)).collect();
            let ok: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
            let b = rng.gen_range(1..20);
            let (e, _) = ece(&confs, &ok, b).unwrap();
            let brute = brute_force_ece(&confs, &ok, b);
            assert!((e - brute).abs() < 1e-12, "{e} vs {brute}");
        }
    }

    #[test]
    fn calibrated_stream_scores_below_one_percent() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 100_000;
        let confs: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let ok: Vec<bool> = confs.iter().map(|&c| rng.gen_bool(c)).collect();
        let (e, _) = ece(&confs, &ok, 15).unwrap();
        assert!(e < 0.01, "calibrated stream scored {e}");
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(ece(&[], &[], 15).is_err());
        assert!(ece(&[0.5], &[true], 0).is_err());
        assert!(ece(&[1.5], &[true], 15).is_err());
        assert!(ece(&[0.5, 0.5], &[true], 15).is_err());
    }

    #[test]
    fn f1_conventions() {
        // 3 seen / 3 unseen with one error each side: tp=2, fp=1, fn=1.
        assert_eq!(f1_from_counts(2, 1, 1), Some(2.0 / 3.0));
        // No positives anywhere: undefined.
        assert_eq!(f1_from_counts(0, 0, 0), None);
        // Positives exist but none predicted: zero, not undefined.
        assert_eq!(f1_from_counts(0, 0, 3), Some(0.0));
        assert_eq!(f1_from_counts(0, 2, 0), Some(0.0));
    }

    #[test]
    fn f1_matches_confusion_matrix_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let n = 64;
            let s: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
            let unseen: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.4)).collect();
            let (f1, _, _) = ood_metrics_from_scores(&s, &unseen, 15).unwrap();
            // Oracle: rebuild the confusion matrix from scratch.
            let mut tp = 0.0;
            let mut fp = 0.0;
            let mut fn_ = 0.0;
            for i in 0..n {
                let decide = (1.0 - s[i]) > 0.5;
                if decide && unseen[i] {
                    tp += 1.0;
                } else if decide {
                    fp += 1.0;
                } else if unseen[i] {
                    fn_ += 1.0;
                }
            }
            let expect = if tp + fp == 0.0 && tp + fn_ == 0.0 {
                None
            } else {
                let p = if tp + fp == 0.0 { 0.0 } else { tp / (tp + fp) };
                let r = if tp + fn_ == 0.0 { 0.0 } else { tp / (tp + fn_) };
                Some(if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) })
            };
            assert_eq!(f1, expect);
        }
    }

    #[test]
    fn oracle_scores_are_perfect() {
        // s = 1 for seen, 0 for unseen.
        let s = vec![1.0, 1.0, 1.0, 0.0, 0.0, 0.0];
        let unseen = vec![false, false, false, true, true, true];
        let (f1, e, _) = ood_metrics_from_scores(&s, &unseen, 15).unwrap();
        assert_eq!(f1, Some(1.0));
        assert_eq!(e, 0.0);
    }

    #[test]
    fn evaluate_produces_a_complete_report() {
        let cfg = SyntheticConfig {
            seed: 3,
            num_seen: 3,
            num_unseen: 2,
            kappa: 0.5,
            n_labeled: 60,
            n_unlabeled: 100,
            n_test: 120,
            dim: 4,
            cluster_spread: 0.8,
            ..SyntheticConfig::default()
        };
        let ds = make_synthetic(&cfg).unwrap();
        let params = make_toy_model(1, 4, &[16], 3).unwrap();
        let arts = evaluate(&params, &ds, &EvalConfig::default()).unwrap();
        let r = &arts.report;
        assert!((0.0..=1.0).contains(&r.top1_accuracy));
        assert!((0.0..=1.0).contains(&r.multiclass_ece));
        assert!((0.0..=1.0).contains(&r.binary_ood_ece));
        if let Some(f1) = r.ood_f1 {
            assert!((0.0..=1.0).contains(&f1));
        }
        assert_eq!(r.n_test_all, 120);
        let taus: Vec<f64> = r.sweep.iter().map(|s| s.tau1).collect();
        assert_eq!(taus, vec![0.5, 0.6, 0.7, 0.8]);
        // Raw confidence source also works and reports the same accuracy.
        let raw = evaluate(
            &params,
            &ds,
            &EvalConfig {
                confidence_source: ConfidenceSource::Raw,
                ..EvalConfig::default()
            },
        )
        .unwrap();
        assert_eq!(raw.report.top1_accuracy, r.top1_accuracy);
    }

    #[test]
    fn reliability_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let confs: Vec<f64> = (0..500).map(|_| rng.gen_range(0.0..1.0)).collect();
        let ok: Vec<bool> = (0..500).map(|_| rng.gen_bool(0.6)).collect();
        let (e, table) = ece(&confs, &ok, 15).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("reliability.csv");
        emit_reliability_data(&table, &path).unwrap();

        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 16, "15 data rows plus header");

        // Re-emission is byte-identical.
        let path2 = dir.path().join("again.csv");
        emit_reliability_data(&table, &path2).unwrap();
        assert_eq!(text, fs::read_to_string(&path2).unwrap());

        // Recomputing the error from the file reproduces it.
        let loaded = read_reliability_data(&path).unwrap();
        assert!((loaded.ece() - e).abs() < 1e-9);
    }

    proptest! {
        /// Calibration error lives in [0, 1].
        #[test]
        fn ece_is_a_rate(
            confs in proptest::collection::vec(0.0f64..=1.0, 1..100),
            flip in 0u64..1000,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(flip);
            let ok: Vec<bool> = confs.iter().map(|_| rng.gen_bool(0.5)).collect();
            let (e, table) = ece(&confs, &ok, 15).unwrap();
            prop_assert!((0.0..=1.0).contains(&e));
            prop_assert_eq!(table.bins.iter().map(|b| b.count).sum::<usize>(), confs.len());
        }
    }
}
