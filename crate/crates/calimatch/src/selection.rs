//! Reliable-subset selection for unlabeled batches.
//!
//! Each unlabeled sample is scored from the scaled views of its weak
//! augmentation: the seen-class score `s = sum_k p_s_k * q_s_k`, the
//! confidence `c = max_k p_s_k`, and the rejection score `u = 1 - s`. A
//! sample enters the reliable subset only if `s > tau1` and `c > tau2`, both
//! strict.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{argmax_row, ModelOutputs};

/// Default thresholds for the two gates.
pub const DEFAULT_TAU1: f64 = 0.5;
pub const DEFAULT_TAU2: f64 = 0.95;

/// Diagnostic cutoffs for the learning-curve quantities: "high confidence"
/// means `c > 0.95` and "low rejection score" means `u < 0.5`.
pub const HIGH_CONFIDENCE: f64 = 0.95;
pub const LOW_OOD: f64 = 0.5;

/// Scores and gate decision for one unlabeled sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionRecord {
    /// Seen-class score `sum_k p_s_k * q_s_k`.
    pub s: f64,
    /// Calibrated confidence `max_k p_s_k`.
    pub c: f64,
    /// Rejection score `1 - s`.
    pub u: f64,
    /// Argmax of the raw classifier view on the weak augmentation.
    pub pseudo_label: usize,
    /// Both gates passed.
    pub selected: bool,
}

/// Seen-class score, confidence, and rejection score for one sample.
pub fn score(outputs: &ModelOutputs, row: usize) -> (f64, f64, f64) {
    let p_s = outputs.p_s.row(row);
    let q_s = outputs.q_s.row(row);
    let s: f64 = p_s.iter().zip(q_s.iter()).map(|(a, b)| a * b).sum();
    let c = p_s[argmax_row(p_s)];
    (s, c, 1.0 - s)
}

/// Which gates to apply when selecting.
///
/// The full gate requires both scores; the confidence-only gate is used when
/// the one-vs-rest head is ablated and no seen-class score is meaningful.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GateMode {
    #[default]
    SeenAndConfidence,
    ConfidenceOnly,
}

/// Score and gate every sample of a weak-view batch.
pub fn select_batch(
    weak: &ModelOutputs,
    tau1: f64,
    tau2: f64,
    mode: GateMode,
) -> Result<Vec<SelectionRecord>> {
    for (name, tau) in [("tau1", tau1), ("tau2", tau2)] {
        if !(tau > 0.0 && tau < 1.0) {
            return Err(Error::config(format!("{name} must lie in (0, 1), got {tau}")));
        }
    }
    let mut records = Vec::with_capacity(weak.batch_size());
    for i in 0..weak.batch_size() {
        let (s, c, u) = score(weak, i);
        let pseudo_label = argmax_row(weak.p.row(i));
        let selected = match mode {
            GateMode::SeenAndConfidence => s > tau1 && c > tau2,
            GateMode::ConfidenceOnly => c > tau2,
        };
        records.push(SelectionRecord {
            s,
            c,
            u,
            pseudo_label,
            selected,
        });
    }
    Ok(records)
}

/// Hidden ground truth for evaluation-side diagnostics.
#[derive(Debug, Clone, Copy)]
pub struct HiddenTruth {
    /// True label as an index into the seen-class set, when the sample is
    /// from a seen class.
    pub label: Option<usize>,
    /// Whether the sample's true class is in the seen set.
    pub seen: bool,
}

/// The four learning-curve quantities for one batch of records.
///
/// Quantities whose denominator is empty are `None` rather than zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionDiagnostics {
    /// Pseudo-label accuracy among selected seen-class samples.
    pub pseudo_label_accuracy: Option<f64>,
    /// Fraction of seen-class samples that were selected.
    pub seen_selected_fraction: Option<f64>,
    /// Fraction of unseen samples among the high-confidence ones.
    pub unseen_among_high_confidence: Option<f64>,
    /// Fraction of unseen samples among those with low rejection score and
    /// high confidence.
    pub unseen_among_low_ood_high_confidence: Option<f64>,
    /// Empirical selection-error rate: the fraction of selected samples that
    /// are unseen or carry a wrong pseudo-label.
    pub selection_error_rate: Option<f64>,
}

/// Compute the learning-curve quantities from records plus hidden truth.
pub fn selection_diagnostics(
    records: &[SelectionRecord],
    truth: &[HiddenTruth],
) -> Result<SelectionDiagnostics> {
    if records.len() != truth.len() {
        return Err(Error::validation(
            "records and hidden truth must have equal length",
        ));
    }
    let mut selected_seen = 0usize;
    let mut selected_seen_correct = 0usize;
    let mut seen_total = 0usize;
    let mut seen_selected = 0usize;
    let mut high_conf = 0usize;
    let mut high_conf_unseen = 0usize;
    let mut low_ood_high_conf = 0usize;
    let mut low_ood_high_conf_unseen = 0usize;
    let mut selected = 0usize;
    let mut selected_bad = 0usize;
    for (r, t) in records.iter().zip(truth) {
        if t.seen {
            seen_total += 1;
            if r.selected {
                seen_selected += 1;
                selected_seen += 1;
                if t.label == Some(r.pseudo_label) {
                    selected_seen_correct += 1;
                }
            }
        }
        if r.selected {
            selected += 1;
            let wrong = !t.seen || t.label != Some(r.pseudo_label);
            if wrong {
                selected_bad += 1;
            }
        }
        if r.c > HIGH_CONFIDENCE {
            high_conf += 1;
            if !t.seen {
                high_conf_unseen += 1;
            }
            if r.u < LOW_OOD {
                low_ood_high_conf += 1;
                if !t.seen {
                    low_ood_high_conf_unseen += 1;
                }
            }
        }
    }
    let ratio = |num: usize, den: usize| {
        if den == 0 {
            None
        } else {
            Some(num as f64 / den as f64)
        }
    };
    Ok(SelectionDiagnostics {
        pseudo_label_accuracy: ratio(selected_seen_correct, selected_seen),
        seen_selected_fraction: ratio(seen_selected, seen_total),
        unseen_among_high_confidence: ratio(high_conf_unseen, high_conf),
        unseen_among_low_ood_high_confidence: ratio(low_ood_high_conf_unseen, low_ood_high_conf),
        selection_error_rate: ratio(selected_bad, selected),
    })
}
