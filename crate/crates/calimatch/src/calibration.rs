//! Reference-confidence tables and adaptively smoothed targets.
//!
//! A [`ReferenceTable`] partitions `[0, 1]` into `M` equal bins and stores the
//! validation accuracy observed in each bin. During training the table is
//! rebuilt once per epoch and queried per sample: the accuracy of the bin a
//! sample's confidence falls into becomes the true-class mass of its smoothed
//! training target. Bins that received no validation samples fall back to the
//! overall validation accuracy.

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{argmax_row, ModelOutputs, ModelParams};

/// Default bin count for the smoothing tables.
pub const DEFAULT_BINS: usize = 30;

/// Per-bin validation accuracies over `M` half-open bins `((m-1)/M, m/M]`.
///
/// A confidence of exactly zero is assigned to the first bin so the lookup is
/// total on `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceTable {
    /// Number of bins.
    pub m: usize,
    /// `m + 1` evenly spaced edges from 0 to 1.
    pub edges: Vec<f64>,
    /// Accuracy per bin; empty bins hold `fallback`.
    pub values: Vec<f64>,
    /// Samples observed per bin.
    pub counts: Vec<usize>,
    /// Overall accuracy, used for empty bins.
    pub fallback: f64,
}

/// Bin index (0-based) for a confidence in `[0, 1]`.
pub fn bin_index(confidence: f64, m: usize) -> usize {
    if confidence <= 0.0 {
        return 0;
    }
    let idx = (confidence * m as f64).ceil() as usize;
    idx.saturating_sub(1).min(m - 1)
}

/// Build a table from per-sample confidences and correctness flags.
pub fn build_reference_table(
    confidences: &[f64],
    correct: &[bool],
    m: usize,
) -> Result<ReferenceTable> {
    if m == 0 {
        return Err(Error::config("bin count must be at least 1"));
    }
    if confidences.is_empty() {
        return Err(Error::validation(
            "cannot build a reference table from an empty sample set",
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
    let mut counts = vec![0usize; m];
    let mut hits = vec![0usize; m];
    let mut total_hits = 0usize;
    for (&c, &ok) in confidences.iter().zip(correct) {
        let b = bin_index(c, m);
        counts[b] += 1;
        if ok {
            hits[b] += 1;
            total_hits += 1;
        }
    }
    let fallback = total_hits as f64 / confidences.len() as f64;
    let values = counts
        .iter()
        .zip(&hits)
        .map(|(&n, &h)| if n == 0 { fallback } else { h as f64 / n as f64 })
        .collect();
    let edges = (0..=m).map(|i| i as f64 / m as f64).collect();
    Ok(ReferenceTable {
        m,
        edges,
        values,
        counts,
        fallback,
    })
}

/// Accuracy of the bin the confidence falls into.
pub fn lookup_reference(table: &ReferenceTable, confidence: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&confidence) {
        return Err(Error::validation(format!(
            "confidence {confidence} outside [0, 1]"
        )));
    }
    Ok(table.values[bin_index(confidence, table.m)])
}

/// Rebuild both smoothing tables from a labeled validation set.
///
/// The classifier table uses `max_k p_k` as confidence and `argmax_k p_k == y`
/// as correctness; the one-vs-rest table uses `max_k q_k` and
/// `argmax_k q_k == y`. Both are computed from the raw (unscaled) views.
pub fn refresh_tables(
    params: &ModelParams,
    val_x: ArrayView2<'_, f64>,
    val_y: &[usize],
    m: usize,
) -> Result<(ReferenceTable, ReferenceTable)> {
    if val_x.nrows() == 0 {
        return Err(Error::validation("validation set is empty"));
    }
    if val_x.nrows() != val_y.len() {
        return Err(Error::validation(
            "validation features and labels disagree in length",
        ));
    }
    let (outputs, _) = params.forward(val_x)?;
    let n = outputs.batch_size();
    let mut p_conf = Vec::with_capacity(n);
    let mut p_ok = Vec::with_capacity(n);
    let mut q_conf = Vec::with_capacity(n);
    let mut q_ok = Vec::with_capacity(n);
    for i in 0..n {
        let p_row = outputs.p.row(i);
        let q_row = outputs.q.row(i);
        let p_arg = argmax_row(p_row);
        let q_arg = argmax_row(q_row);
        p_conf.push(p_row[p_arg]);
        p_ok.push(p_arg == val_y[i]);
        q_conf.push(q_row[q_arg]);
        q_ok.push(q_arg == val_y[i]);
    }
    let gamma = build_reference_table(&p_conf, &p_ok, m)?;
    let delta = build_reference_table(&q_conf, &q_ok, m)?;
    Ok((gamma, delta))
}

/// Per-sample classifier references for a batch: the table value at
/// `max_k p_k` of each sample.
pub fn gamma_for_batch(table: &ReferenceTable, outputs: &ModelOutputs) -> Vec<f64> {
    (0..outputs.batch_size())
        .map(|i| {
            let row = outputs.p.row(i);
            table.values[bin_index(row[argmax_row(row)], table.m)]
        })
        .collect()
}

/// Per-sample one-vs-rest references for a batch: the table value at
/// `max_k q_k` of each sample.
pub fn delta_for_batch(table: &ReferenceTable, outputs: &ModelOutputs) -> Vec<f64> {
    (0..outputs.batch_size())
        .map(|i| {
            let row = outputs.q.row(i);
            table.values[bin_index(row[argmax_row(row)], table.m)]
        })
        .collect()
}

/// A per-sample smoothed target: the reference value and the full per-class
/// distribution it induces for the classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoothedTarget {
    /// Reference value in `[0, 1]` (true-class mass).
    pub reference: f64,
    /// Per-class target; sums to one.
    pub target: Vec<f64>,
}

impl SmoothedTarget {
    /// Classifier target: `reference` on the true class and the remaining
    /// mass split evenly over the other `K - 1` classes.
    pub fn classifier(reference: f64, true_class: usize, num_classes: usize) -> Result<Self> {
        if !(0.0..=1.0).contains(&reference) {
            return Err(Error::validation(format!(
                "reference value {reference} outside [0, 1]"
            )));
        }
        if num_classes < 2 || true_class >= num_classes {
            return Err(Error::config("invalid class layout for a smoothed target"));
        }
        let off = (1.0 - reference) / (num_classes as f64 - 1.0);
        let target = (0..num_classes)
            .map(|k| if k == true_class { reference } else { off })
            .collect();
        Ok(SmoothedTarget { reference, target })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::make_toy_model;
    use ndarray::Array2;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn hand_counted_two_bin_table() {
        let table =
            build_reference_table(&[0.3, 0.3, 0.8, 0.8], &[true, false, true, true], 2).unwrap();
        assert_eq!(table.counts, vec![2, 2]);
        assert_eq!(table.values, vec![0.5, 1.0]);
        assert_eq!(table.fallback, 0.75);
        assert_eq!(table.edges, vec![0.0, 0.5, 1.0]);
    }

    #[test]
    fn default_bin_count_is_thirty() {
        let table = build_reference_table(&[0.5], &[true], DEFAULT_BINS).unwrap();
        assert_eq!(table.m, 30);
        assert_eq!(table.values.len(), 30);
        assert_eq!(table.edges.len(), 31);
    }

    #[test]
    fn all_correct_means_every_populated_bin_is_one() {
        let confs = [0.1, 0.4, 0.9, 0.95, 0.2];
        let table = build_reference_table(&confs, &[true; 5], 10).unwrap();
        for (v, &n) in table.values.iter().zip(&table.counts) {
            if n > 0 {
                assert_eq!(*v, 1.0);
            }
        }
    }

    #[test]
    fn empty_bins_take_the_fallback() {
        let table = build_reference_table(&[0.05, 0.05, 0.95], &[true, false, true], 10).unwrap();
        let fallback = 2.0 / 3.0;
        assert!((table.fallback - fallback).abs() < 1e-15);
        for (v, &n) in table.values.iter().zip(&table.counts) {
            if n == 0 {
                assert_eq!(*v, table.fallback);
            }
        }
        // Lookup in an empty bin returns the fallback.
        let mid = lookup_reference(&table, 0.55).unwrap();
        assert_eq!(mid, table.fallback);
    }

    #[test]
    fn boundary_conventions() {
        // Exactly 1.0 belongs to the last bin.
        assert_eq!(bin_index(1.0, 30), 29);
        // 0.97 * 30 = 29.1, so the interval (29/30, 1] — last bin again.
        assert_eq!(bin_index(0.97, 30), 29);
        // Zero is assigned to the first bin by convention.
        assert_eq!(bin_index(0.0, 30), 0);
        // An interior edge is inclusive on the right.
        assert_eq!(bin_index(0.5, 2), 0);
        // Out-of-domain confidences are rejected.
        let table = build_reference_table(&[0.5], &[true], 2).unwrap();
        assert!(lookup_reference(&table, 1.2).is_err());
        assert!(lookup_reference(&table, -0.1).is_err());
    }

    #[test]
    fn rejects_degenerate_inputs() {
        assert!(build_reference_table(&[], &[], 5).is_err());
        assert!(build_reference_table(&[0.5], &[true], 0).is_err());
        assert!(build_reference_table(&[1.5], &[true], 5).is_err());
    }

    #[test]
    fn rebuilding_is_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let confs: Vec<f64> = (0..200).map(|_| rng.gen_range(0.0..1.0)).collect();
        let ok: Vec<bool> = (0..200).map(|_| rng.gen_bool(0.7)).collect();
        let a = build_reference_table(&confs, &ok, 30).unwrap();
        let b = build_reference_table(&confs, &ok, 30).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn uniform_model_populates_a_single_bin() {
        // Zeroed heads produce uniform p, so every confidence is exactly 1/K.
        let mut params = make_toy_model(3, 2, &[8], 6).unwrap();
        params.classifier.w.fill(0.0);
        params.classifier.b.fill(0.0);
        params.ood_head.w.fill(0.0);
        params.ood_head.b.fill(0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Array2::from_shape_fn((40, 2), |_| rng.gen_range(-1.0..1.0));
        let y: Vec<usize> = (0..40).map(|i| i % 6).collect();
        let (gamma, _) = refresh_tables(&params, x.view(), &y, 30).unwrap();
        let populated: Vec<usize> = (0..30).filter(|&b| gamma.counts[b] > 0).collect();
        assert_eq!(populated, vec![bin_index(1.0 / 6.0, 30)]);
        for b in 0..30 {
            if gamma.counts[b] == 0 {
                assert_eq!(gamma.values[b], gamma.fallback);
            }
        }
    }

    /// Independent recount: assign each validation sample to its interval by
    /// direct comparison against the edges, then recompute the per-bin means.
    #[test]
    fn refresh_matches_brute_force_recount() {
        let params = make_toy_model(11, 2, &[16, 16], 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let x = Array2::from_shape_fn((100, 2), |_| rng.gen_range(-3.0..3.0));
        let y: Vec<usize> = (0..100).map(|_| rng.gen_range(0..4)).collect();
        let m = 30;
        let (gamma, delta) = refresh_tables(&params, x.view(), &y, m).unwrap();

        let (outputs, _) = params.forward(x.view()).unwrap();
        for (table, probs) in [(&gamma, &outputs.p), (&delta, &outputs.q)] {
            let mut counts = vec![0usize; m];
            let mut hits = vec![0usize; m];
            let mut total_hits = 0;
            for i in 0..100 {
                let row = probs.row(i);
                let arg = argmax_row(row);
                let conf = row[arg];
                let mut bin = 0;
                for b in 0..m {
                    let lo = b as f64 / m as f64;
                    let hi = (b + 1) as f64 / m as f64;
                    if (conf > lo || (b == 0 && conf == 0.0)) && conf <= hi {
                        bin = b;
                        break;
                    }
                }
                counts[bin] += 1;
                if arg == y[i] {
                    hits[bin] += 1;
                    total_hits += 1;
                }
            }
            assert_eq!(table.counts, counts);
            let fallback = total_hits as f64 / 100.0;
            assert_eq!(table.fallback, fallback);
            for b in 0..m {
                let expect = if counts[b] == 0 {
                    fallback
                } else {
                    hits[b] as f64 / counts[b] as f64
                };
                assert_eq!(table.values[b], expect, "bin {b}");
            }
        }
    }

    #[test]
    fn calibrated_stream_recovers_bin_midpoints() {
        // Confidence uniform, correctness Bernoulli(confidence): per-bin
        // accuracy concentrates on the bin midpoint. Ten bins keep ~1000
        // samples per bin so the 0.05 tolerance sits at ~3 sigma.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 10_000;
        let m = 10;
        let confs: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let ok: Vec<bool> = confs.iter().map(|&c| rng.gen_bool(c)).collect();
        let table = build_reference_table(&confs, &ok, m).unwrap();
        for b in 0..m {
            if table.counts[b] > 0 {
                let midpoint = (table.edges[b] + table.edges[b + 1]) / 2.0;
                assert!(
                    (table.values[b] - midpoint).abs() < 0.05,
                    "bin {b}: {} vs midpoint {midpoint}",
                    table.values[b]
                );
            }
        }
    }

    #[test]
    fn smoothed_target_sums_to_one() {
        let t = SmoothedTarget::classifier(0.9, 1, 6).unwrap();
        assert!((t.target.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(t.target[1], 0.9);
        for k in [0, 2, 3, 4, 5] {
            assert!((t.target[k] - 0.02).abs() < 1e-12);
        }
        assert!(SmoothedTarget::classifier(1.2, 0, 3).is_err());
        assert!(SmoothedTarget::classifier(0.5, 3, 3).is_err());
    }

    proptest! {
        /// Every sample lands in exactly one bin and the counts add up.
        #[test]
        fn partition_property(
            confs in proptest::collection::vec(0.0f64..=1.0, 1..200),
            m in 1usize..40,
        ) {
            let ok = vec![true; confs.len()];
            let table = build_reference_table(&confs, &ok, m).unwrap();
            prop_assert_eq!(table.counts.iter().sum::<usize>(), confs.len());
            for &c in &confs {
                let b = bin_index(c, m);
                prop_assert!(b < m);
                if c > 0.0 {
                    prop_assert!(c <= table.edges[b + 1] + 1e-15);
                    prop_assert!(c > table.edges[b] - 1e-9 || b == 0);
                }
            }
        }
    }
}
