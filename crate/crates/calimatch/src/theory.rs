//! Empirical verification of the selection-error bound and the
//! gradient-alignment bound.
//!
//! The alignment analysis compares the gradient of the pseudo-label loss over
//! a gated batch against the gradient of true-label cross-entropy over the
//! in-distribution part of that batch, both in sum reduction over the strong
//! views. The two differ exactly by a sum of per-sample residuals: for a
//! mislabeled in-distribution sample the residual is the difference of its
//! two cross-entropy gradients, for an out-of-distribution sample it is its
//! full pseudo-label gradient. With `B` the largest residual in logit space
//! and `L` the largest per-sample Jacobian norm, the gradient difference is
//! bounded by `L * B * (number of erroneous samples)`.
//!
//! The selection-error simulation drives threshold selection on a synthetic
//! calibrated score stream with adjustable per-bin calibration error and
//! checks the empirical error rate against `1 - min(tau1, tau2) + eta`.

use ndarray::ArrayView2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::calibration::bin_index;
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::selection::HiddenTruth;

/// One gated sample as seen by the alignment analysis: its pseudo-label and
/// the hidden truth.
#[derive(Debug, Clone, Copy)]
pub struct SelectedSample {
    pub pseudo_label: usize,
    pub truth: HiddenTruth,
}

/// Results of the gradient-alignment analysis over one gated batch.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AlignmentReport {
    /// Fraction of gated samples that are out-of-distribution or mislabeled.
    pub epsilon_hat: f64,
    pub n_selected: usize,
    pub n_errors: usize,
    /// Norm of the gradient difference between the pseudo-label loss and the
    /// restricted true-label loss.
    pub grad_diff_norm: f64,
    /// Norm of the independently accumulated residual sum.
    pub residual_sum_norm: f64,
    /// Norm of (gradient difference - residual sum); the exact-decomposition
    /// check.
    pub identity_gap: f64,
    /// Parameter-space residual norm per erroneous sample.
    pub residual_norms: Vec<f64>,
    /// Largest per-sample logit-gradient difference norm among the errors.
    pub b_hat: f64,
    /// Largest per-sample Jacobian Frobenius norm over the batch.
    pub l_hat: f64,
    /// `l_hat * b_hat * epsilon_hat * n_selected`.
    pub bound: f64,
    pub bound_holds: bool,
}

fn flat_l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn add_into(acc: &mut [f64], v: &[f64]) {
    for (a, b) in acc.iter_mut().zip(v) {
        *a += b;
    }
}

/// Per-sample cross-entropy gradient (sum reduction) for one strong-view row
/// against an arbitrary label, flattened over all parameters.
fn sample_ce_grad(params: &ModelParams, row: ArrayView2<'_, f64>, label: usize) -> Result<Vec<f64>> {
    let (outputs, cache) = params.forward(row)?;
    let k = outputs.num_classes();
    if label >= k {
        return Err(Error::validation(format!(
            "label {label} out of range for {k} classes"
        )));
    }
    let mut d_zf = outputs.p.clone();
    d_zf[[0, label]] -= 1.0;
    Ok(params.backward(&cache, Some(&d_zf), None).to_flat())
}

/// Gradient of true-label cross-entropy over the in-distribution part of a
/// gated batch (sum reduction, strong views). An empty restricted set yields
/// the zero vector.
pub fn ideal_gradient(
    params: &ModelParams,
    x_strong: ArrayView2<'_, f64>,
    true_labels: &[usize],
) -> Result<Vec<f64>> {
    if x_strong.nrows() != true_labels.len() {
        return Err(Error::validation(
            "strong views and labels disagree in length",
        ));
    }
    let mut acc = vec![0.0; params.n_params()];
    for (i, &y) in true_labels.iter().enumerate() {
        let row = x_strong.slice(ndarray::s![i..i + 1, ..]);
        let g = sample_ce_grad(params, row, y)?;
        add_into(&mut acc, &g);
    }
    Ok(acc)
}

/// Frobenius norm of the per-sample Jacobian of the classifier logits with
/// respect to every parameter, via one backward pass per class.
fn jacobian_frobenius(params: &ModelParams, row: ArrayView2<'_, f64>) -> Result<f64> {
    let (outputs, cache) = params.forward(row)?;
    let k = outputs.num_classes();
    let mut sq = 0.0;
    for class in 0..k {
        let mut seed = ndarray::Array2::<f64>::zeros((1, k));
        seed[[0, class]] = 1.0;
        let g = params.backward(&cache, Some(&seed), None).to_flat();
        sq += g.iter().map(|v| v * v).sum::<f64>();
    }
    Ok(sq.sqrt())
}

/// Run the gradient-alignment analysis on a gated batch.
///
/// `x_strong` holds the strong views of the gated samples, row-aligned with
/// `samples`. Gradients are compared in sum reduction.
pub fn alignment_report(
    params: &ModelParams,
    x_strong: ArrayView2<'_, f64>,
    samples: &[SelectedSample],
) -> Result<AlignmentReport> {
    if x_strong.nrows() != samples.len() {
        return Err(Error::validation(
            "strong views and sample records disagree in length",
        ));
    }
    let n_params = params.n_params();
    let n_selected = samples.len();
    let mut fix_grad = vec![0.0; n_params];
    let mut ideal_grad_acc = vec![0.0; n_params];
    let mut residual_sum = vec![0.0; n_params];
    let mut residual_norms = Vec::new();
    let mut b_hat = 0.0f64;
    let mut l_hat = 0.0f64;
    let mut n_errors = 0usize;

    for (i, sample) in samples.iter().enumerate() {
        let row = x_strong.slice(ndarray::s![i..i + 1, ..]);
        let (outputs, cache) = params.forward(row)?;
        let k = outputs.num_classes();
        if sample.pseudo_label >= k {
            return Err(Error::validation("pseudo-label out of range"));
        }

        let grad_for = |label: usize| -> Vec<f64> {
            let mut d_zf = outputs.p.clone();
            d_zf[[0, label]] -= 1.0;
            params.backward(&cache, Some(&d_zf), None).to_flat()
        };

        let fix_i = grad_for(sample.pseudo_label);
        add_into(&mut fix_grad, &fix_i);

        l_hat = l_hat.max(jacobian_frobenius(params, row)?);

        if let (true, Some(y)) = (sample.truth.seen, sample.truth.label) {
            let ideal_i = grad_for(y);
            add_into(&mut ideal_grad_acc, &ideal_i);
            if y != sample.pseudo_label {
                n_errors += 1;
                // Residual of a mislabeled in-distribution sample: the two
                // softmax terms cancel, leaving one-hot(y) - one-hot(pseudo)
                // in logit space.
                let residual: Vec<f64> = fix_i
                    .iter()
                    .zip(&ideal_i)
                    .map(|(a, b)| a - b)
                    .collect();
                residual_norms.push(flat_l2(&residual));
                add_into(&mut residual_sum, &residual);
                b_hat = b_hat.max(2.0f64.sqrt());
            }
        } else {
            // Out-of-distribution: present in the pseudo-label loss only.
            n_errors += 1;
            residual_norms.push(flat_l2(&fix_i));
            add_into(&mut residual_sum, &fix_i);
            let mut logit_grad = outputs.p.row(0).to_vec();
            logit_grad[sample.pseudo_label] -= 1.0;
            b_hat = b_hat.max(flat_l2(&logit_grad));
        }
    }

    let diff: Vec<f64> = fix_grad
        .iter()
        .zip(&ideal_grad_acc)
        .map(|(a, b)| a - b)
        .collect();
    let gap: Vec<f64> = diff
        .iter()
        .zip(&residual_sum)
        .map(|(a, b)| a - b)
        .collect();
    let epsilon_hat = if n_selected == 0 {
        0.0
    } else {
        n_errors as f64 / n_selected as f64
    };
    let grad_diff_norm = flat_l2(&diff);
    let bound = l_hat * b_hat * epsilon_hat * n_selected as f64;
    Ok(AlignmentReport {
        epsilon_hat,
        n_selected,
        n_errors,
        grad_diff_norm,
        residual_sum_norm: flat_l2(&residual_sum),
        identity_gap: flat_l2(&gap),
        residual_norms,
        b_hat,
        l_hat,
        bound,
        bound_holds: grad_diff_norm <= bound + 1e-9,
    })
}

// ---------------------------------------------------------------------------
// Selection-error simulation

/// Synthetic score generator with controllable per-bin calibration error.
///
/// Each sample draws a confidence and a seen-class score uniformly; the
/// conditional accuracy of each channel is its score minus `eta` (clamped),
/// the adverse direction. A single latent uniform drives both channels, so
/// the event "correctly pseudo-labeled and in-distribution" has probability
/// `min(acc_confidence, acc_seen_score)` — the nested-failure structure the
/// selection-error bound describes.
#[derive(Debug, Clone, Copy)]
pub struct CalibratedOracle {
    /// Maximum per-bin deviation of accuracy from confidence.
    pub eta: f64,
    /// Bin count used when checking the realized deviation.
    pub bins: usize,
}

/// One simulated sample.
#[derive(Debug, Clone, Copy)]
pub struct OracleSample {
    /// Classification confidence `c`.
    pub confidence: f64,
    /// Seen-class score `s`.
    pub seen_score: f64,
    /// Pseudo-label is correct.
    pub correct: bool,
    /// Sample is in-distribution.
    pub in_distribution: bool,
}

impl CalibratedOracle {
    pub fn new(eta: f64, bins: usize) -> Result<Self> {
        if !(0.0..1.0).contains(&eta) {
            return Err(Error::config("eta must lie in [0, 1)"));
        }
        if bins == 0 {
            return Err(Error::config("bin count must be at least 1"));
        }
        Ok(CalibratedOracle { eta, bins })
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng) -> OracleSample {
        let confidence = rng.gen_range(0.0..1.0);
        let seen_score = rng.gen_range(0.0..1.0);
        let latent = rng.gen_range(0.0..1.0);
        let acc_c = (confidence - self.eta).clamp(0.0, 1.0);
        let acc_s = (seen_score - self.eta).clamp(0.0, 1.0);
        OracleSample {
            confidence,
            seen_score,
            correct: latent <= acc_c,
            in_distribution: latent <= acc_s,
        }
    }
}

/// Outcome of one selection-error simulation cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LemmaReport {
    pub tau1: f64,
    pub tau2: f64,
    pub eta: f64,
    pub n: usize,
    pub n_selected: usize,
    /// Empirical rate of erroneous samples among the selected; `None` when
    /// nothing was selected.
    pub epsilon_hat: Option<f64>,
    /// `1 - min(tau1, tau2) + eta`.
    pub bound: f64,
    /// Binomial standard deviation of the estimate at the bound.
    pub sigma: f64,
    /// Empirical rate exceeded bound + 3 sigma.
    pub violated: bool,
}

/// Simulate threshold selection on an oracle stream and compare the
/// empirical selection-error rate to the bound.
pub fn lemma_check(
    oracle: &CalibratedOracle,
    tau1: f64,
    tau2: f64,
    n: usize,
    seed: u64,
) -> Result<LemmaReport> {
    for (name, tau) in [("tau1", tau1), ("tau2", tau2)] {
        if !(tau > 0.0 && tau < 1.0) {
            return Err(Error::config(format!("{name} must lie in (0, 1)")));
        }
    }
    if n == 0 {
        return Err(Error::config("simulation size must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut n_selected = 0usize;
    let mut n_bad = 0usize;
    for _ in 0..n {
        let s = oracle.sample(&mut rng);
        if s.seen_score > tau1 && s.confidence > tau2 {
            n_selected += 1;
            if !(s.correct && s.in_distribution) {
                n_bad += 1;
            }
        }
    }
    let bound = 1.0 - tau1.min(tau2) + oracle.eta;
    let epsilon_hat = (n_selected > 0).then(|| n_bad as f64 / n_selected as f64);
    let p = bound.clamp(0.0, 1.0);
    let sigma = if n_selected == 0 {
        0.0
    } else {
        (p * (1.0 - p) / n_selected as f64).sqrt()
    };
    let violated = match epsilon_hat {
        Some(e) => e > bound + 3.0 * sigma,
        None => false,
    };
    Ok(LemmaReport {
        tau1,
        tau2,
        eta: oracle.eta,
        n,
        n_selected,
        epsilon_hat,
        bound,
        sigma,
        violated,
    })
}

/// Realized per-bin calibration deviation of an oracle stream, for checking
/// that the generator honors its `eta` contract.
pub fn oracle_realized_deviation(
    oracle: &CalibratedOracle,
    n: usize,
    seed: u64,
) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = oracle.bins;
    let mut counts = vec![0usize; m];
    let mut conf_sums = vec![0.0; m];
    let mut hits = vec![0usize; m];
    let mut s_counts = vec![0usize; m];
    let mut s_sums = vec![0.0; m];
    let mut s_hits = vec![0usize; m];
    for _ in 0..n {
        let s = oracle.sample(&mut rng);
        let b = bin_index(s.confidence, m);
        counts[b] += 1;
        conf_sums[b] += s.confidence;
        if s.correct {
            hits[b] += 1;
        }
        let b2 = bin_index(s.seen_score, m);
        s_counts[b2] += 1;
        s_sums[b2] += s.seen_score;
        if s.in_distribution {
            s_hits[b2] += 1;
        }
    }
    let max_dev = |counts: &[usize], sums: &[f64], hits: &[usize]| {
        let mut worst = 0.0f64;
        for b in 0..m {
            if counts[b] == 0 {
                continue;
            }
            let mean_conf = sums[b] / counts[b] as f64;
            let acc = hits[b] as f64 / counts[b] as f64;
            worst = worst.max((acc - mean_conf).abs());
        }
        worst
    };
    (
        max_dev(&counts, &conf_sums, &hits),
        max_dev(&s_counts, &s_sums, &s_hits),
    )
}

/// The per-sample logit-space gradient difference between two one-hot
/// cross-entropy gradients; exposed for the bound's sanity checks.
pub fn logit_gradient_difference(p: &[f64], pseudo: usize, truth: Option<usize>) -> Vec<f64> {
    match truth {
        Some(y) => {
            let mut d = vec![0.0; p.len()];
            d[y] += 1.0;
            d[pseudo] -= 1.0;
            d
        }
        None => {
            let mut d = p.to_vec();
            d[pseudo] -= 1.0;
            d
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::make_toy_model;
    use ndarray::Array2;
    use rand::Rng;

    fn toy() -> ModelParams {
        make_toy_model(19, 3, &[12, 12], 4).unwrap()
    }

    fn random_batch(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Array2<f64> {
        Array2::from_shape_fn((n, dim), |_| rng.gen_range(-2.0..2.0))
    }

    fn id_sample(pseudo: usize, label: usize) -> SelectedSample {
        SelectedSample {
            pseudo_label: pseudo,
            truth: HiddenTruth {
                label: Some(label),
                seen: true,
            },
        }
    }

    fn ood_sample(pseudo: usize) -> SelectedSample {
        SelectedSample {
            pseudo_label: pseudo,
            truth: HiddenTruth {
                label: None,
                seen: false,
            },
        }
    }

    #[test]
    fn empty_restricted_set_gives_zero_gradient() {
        let params = toy();
        let x = Array2::<f64>::zeros((0, 3));
        let g = ideal_gradient(&params, x.view(), &[]).unwrap();
        assert_eq!(g.len(), params.n_params());
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn correct_sample_contributes_identically_to_both_losses() {
        let params = toy();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_batch(&mut rng, 1, 3);
        let report =
            alignment_report(&params, x.view(), &[id_sample(2, 2)]).unwrap();
        assert_eq!(report.n_errors, 0);
        assert_eq!(report.epsilon_hat, 0.0);
        assert_eq!(report.grad_diff_norm, 0.0);
        assert!(report.bound_holds);

        // The pseudo-label gradient of a correct sample equals the ideal one.
        let ideal = ideal_gradient(&params, x.view(), &[2]).unwrap();
        let fix = sample_ce_grad(&params, x.view(), 2).unwrap();
        assert_eq!(ideal, fix);
    }

    #[test]
    fn batch_gradient_is_additive_over_samples() {
        let params = toy();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_batch(&mut rng, 10, 3);
        let labels: Vec<usize> = (0..10).map(|_| rng.gen_range(0..4)).collect();
        let whole = ideal_gradient(&params, x.view(), &labels).unwrap();
        let mut acc = vec![0.0; params.n_params()];
        for i in 0..10 {
            let row = x.slice(ndarray::s![i..i + 1, ..]);
            let gi = ideal_gradient(&params, row, &labels[i..i + 1]).unwrap();
            add_into(&mut acc, &gi);
        }
        for (a, b) in whole.iter().zip(&acc) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn clean_batch_has_exact_alignment() {
        let params = toy();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_batch(&mut rng, 8, 3);
        let samples: Vec<SelectedSample> = (0..8)
            .map(|i| id_sample(i % 4, i % 4))
            .collect();
        let report = alignment_report(&params, x.view(), &samples).unwrap();
        assert_eq!(report.epsilon_hat, 0.0);
        assert!(report.grad_diff_norm <= 1e-9);
        assert!(report.identity_gap <= 1e-9);
        assert!(report.bound_holds);
    }

    #[test]
    fn single_flip_matches_its_residual_exactly() {
        let params = toy();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random_batch(&mut rng, 6, 3);
        let mut samples: Vec<SelectedSample> =
            (0..6).map(|i| id_sample(i % 4, i % 4)).collect();
        samples[3] = id_sample(1, 2); // one deliberately flipped pseudo-label
        let report = alignment_report(&params, x.view(), &samples).unwrap();
        assert_eq!(report.n_errors, 1);
        assert_eq!(report.residual_norms.len(), 1);
        assert!(
            (report.grad_diff_norm - report.residual_norms[0]).abs() < 1e-9,
            "{} vs {}",
            report.grad_diff_norm,
            report.residual_norms[0]
        );
        assert!(report.identity_gap <= 1e-9);
        assert!(report.bound_holds);
    }

    #[test]
    fn random_batches_satisfy_identity_and_bound() {
        let params = toy();
        for seed in 0..30 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = rng.gen_range(2..12);
            let x = random_batch(&mut rng, n, 3);
            let samples: Vec<SelectedSample> = (0..n)
                .map(|_| {
                    if rng.gen_bool(0.3) {
                        ood_sample(rng.gen_range(0..4))
                    } else {
                        let y = rng.gen_range(0..4);
                        let pseudo = if rng.gen_bool(0.3) {
                            (y + 1) % 4
                        } else {
                            y
                        };
                        id_sample(pseudo, y)
                    }
                })
                .collect();
            let report = alignment_report(&params, x.view(), &samples).unwrap();
            assert!(report.identity_gap <= 1e-9, "seed {seed}");
            assert!(report.bound_holds, "seed {seed}");
            assert!(
                (report.grad_diff_norm - report.residual_sum_norm).abs() <= 1e-9,
                "seed {seed}"
            );
        }
    }

    #[test]
    fn logit_gradient_difference_is_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let k = rng.gen_range(2..8);
            let raw: Vec<f64> = (0..k).map(|_| rng.gen_range(0.1..1.0)).collect();
            let sum: f64 = raw.iter().sum();
            let p: Vec<f64> = raw.iter().map(|v| v / sum).collect();
            let pseudo = rng.gen_range(0..k);
            let truth = if rng.gen_bool(0.5) {
                Some(rng.gen_range(0..k))
            } else {
                None
            };
            let d = logit_gradient_difference(&p, pseudo, truth);
            let l1: f64 = d.iter().map(|v| v.abs()).sum();
            let linf = d.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let l2 = flat_l2(&d);
            assert!(l1 <= 2.0 + 1e-12);
            assert!(linf <= 1.0 + 1e-12);
            assert!(l2 <= 2.0);
        }
    }

    #[test]
    fn lemma_bound_hand_values() {
        let oracle = CalibratedOracle::new(0.02, 30).unwrap();
        let report = lemma_check(&oracle, 0.95, 0.95, 10_000, 1).unwrap();
        assert!((report.bound - 0.07).abs() < 1e-12);
        assert!(!report.violated);

        // The bound grows linearly with eta.
        let r0 = lemma_check(&CalibratedOracle::new(0.0, 30).unwrap(), 0.95, 0.95, 1000, 1)
            .unwrap();
        let r2 = lemma_check(&CalibratedOracle::new(0.2, 30).unwrap(), 0.95, 0.95, 1000, 1)
            .unwrap();
        assert!((r2.bound - r0.bound - 0.2).abs() < 1e-12);
    }

    #[test]
    fn perfectly_calibrated_oracle_respects_the_threshold() {
        let oracle = CalibratedOracle::new(0.0, 30).unwrap();
        let report = lemma_check(&oracle, 0.95, 0.95, 50_000, 7).unwrap();
        assert!(!report.violated);
        if let Some(e) = report.epsilon_hat {
            assert!(e <= 0.05 + 3.0 * report.sigma, "{e}");
        }
    }

    #[test]
    fn grid_has_no_violations() {
        for &tau in &[0.5, 0.7, 0.95] {
            for &eta in &[0.0, 0.1, 0.2] {
                let oracle = CalibratedOracle::new(eta, 30).unwrap();
                let report = lemma_check(&oracle, tau, tau, 10_000, 99).unwrap();
                assert!(
                    !report.violated,
                    "tau {tau} eta {eta}: {:?} > {} + 3*{}",
                    report.epsilon_hat, report.bound, report.sigma
                );
            }
        }
    }

    #[test]
    fn oracle_deviation_stays_within_eta() {
        for &eta in &[0.0, 0.1, 0.2] {
            let oracle = CalibratedOracle::new(eta, 10).unwrap();
            let (dev_c, dev_s) = oracle_realized_deviation(&oracle, 50_000, 11);
            // ~5000 samples per bin: allow eta plus generous sampling noise.
            assert!(dev_c <= eta + 0.03, "confidence channel: {dev_c}");
            assert!(dev_s <= eta + 0.03, "seen-score channel: {dev_s}");
        }
    }
}
