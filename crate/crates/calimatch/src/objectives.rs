//! The loss terms of the training objective, each as a pure function of model
//! outputs, labels, targets, and masks, returning both the value and analytic
//! gradients with respect to the logits and temperatures.
//!
//! Gradient conventions: losses that consume the raw views (`p`, `q`) report
//! gradients only against the producing head's logits; losses on the scaled
//! views (`p_s`, `q_s`) additionally report a temperature gradient. Pseudo-
//! labels and smoothing references are constants — no gradient flows through
//! them.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{argmax_row, ModelOutputs};

/// Probabilities are clamped into `[PROB_FLOOR, 1 - PROB_FLOOR]` before any
/// logarithm so saturated outputs cannot produce infinite losses.
pub const PROB_FLOOR: f64 = 1e-7;

fn ln_clamped(p: f64) -> f64 {
    p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR).ln()
}

/// Batch reduction for every loss.
///
/// The loss formulas are written as sums over the batch; `Mean` divides by the
/// batch length so coefficient choices do not depend on batch size. For the
/// pseudo-label consistency loss the divisor is the full batch length, not the
/// number of gated samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    #[default]
    Mean,
    Sum,
}

impl Reduction {
    fn scale(&self, batch: usize) -> f64 {
        match self {
            Reduction::Mean => 1.0 / batch.max(1) as f64,
            Reduction::Sum => 1.0,
        }
    }
}

/// How the min-term of the one-vs-rest calibration loss picks its index.
///
/// `Verbatim` takes the minimum of the weighted `log(1 - q_s_k)` terms over
/// all classes exactly as the objective is defined. `HardNegative` restricts
/// the minimum to non-true classes, mirroring the hardest-negative form of the
/// one-vs-rest classification loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OcalMinMode {
    #[default]
    Verbatim,
    HardNegative,
}

/// Validated class labels for a batch (conceptually one-hot rows).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Labels {
    indices: Vec<usize>,
    num_classes: usize,
}

impl Labels {
    pub fn from_indices(indices: &[usize], num_classes: usize) -> Result<Self> {
        if let Some(&bad) = indices.iter().find(|&&y| y >= num_classes) {
            return Err(Error::validation(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(Labels {
            indices: indices.to_vec(),
            num_classes,
        })
    }

    /// Validate a one-hot matrix: every row must contain exactly one `1.0`
    /// and zeros elsewhere.
    pub fn from_one_hot(one_hot: ArrayView2<'_, f64>) -> Result<Self> {
        let mut indices = Vec::with_capacity(one_hot.nrows());
        for (i, row) in one_hot.rows().into_iter().enumerate() {
            let mut hot = None;
            for (k, &v) in row.iter().enumerate() {
                if v == 1.0 {
                    if hot.is_some() {
                        return Err(Error::validation(format!(
                            "row {i} has more than one active class"
                        )));
                    }
                    hot = Some(k);
                } else if v != 0.0 {
                    return Err(Error::validation(format!(
                        "row {i} is not one-hot: entry {v} at class {k}"
                    )));
                }
            }
            indices.push(
                hot.ok_or_else(|| Error::validation(format!("row {i} has no active class")))?,
            );
        }
        Ok(Labels {
            indices,
            num_classes: one_hot.ncols(),
        })
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }
}

/// A loss value with gradients against one or both logit batches and the
/// temperatures.
#[derive(Debug, Clone)]
pub struct LossGrad {
    pub value: f64,
    pub d_zf: Option<Array2<f64>>,
    pub d_zg: Option<Array2<f64>>,
    pub d_t_m: f64,
    pub d_t_o: f64,
}

impl LossGrad {
    fn new(value: f64) -> Self {
        LossGrad {
            value,
            d_zf: None,
            d_zg: None,
            d_t_m: 0.0,
            d_t_o: 0.0,
        }
    }
}

/// Value and per-view gradients of the consistency loss between two weakly
/// augmented forwards of the same samples.
#[derive(Debug, Clone)]
pub struct ConsistencyGrad {
    pub value: f64,
    pub d_zg_first: Array2<f64>,
    pub d_zg_second: Array2<f64>,
}

fn check_labels(outputs: &ModelOutputs, labels: &Labels) -> Result<()> {
    if labels.len() != outputs.batch_size() {
        return Err(Error::validation(format!(
            "label count {} does not match batch size {}",
            labels.len(),
            outputs.batch_size()
        )));
    }
    if labels.num_classes() != outputs.num_classes() {
        return Err(Error::validation(format!(
            "label classes {} do not match output classes {}",
            labels.num_classes(),
            outputs.num_classes()
        )));
    }
    Ok(())
}

/// Cross-entropy of the raw classifier view against one-hot labels.
pub fn loss_ce(outputs: &ModelOutputs, labels: &Labels, reduction: Reduction) -> Result<LossGrad> {
    check_labels(outputs, labels)?;
    let n = outputs.batch_size();
    let k = outputs.num_classes();
    let w = reduction.scale(n);
    let mut value = 0.0;
    let mut d_zf = Array2::<f64>::zeros((n, k));
    for (i, &y) in labels.indices().iter().enumerate() {
        value -= ln_clamped(outputs.p[[i, y]]);
        for j in 0..k {
            d_zf[[i, j]] = w * (outputs.p[[i, j]] - if j == y { 1.0 } else { 0.0 });
        }
    }
    let mut out = LossGrad::new(value * w);
    out.d_zf = Some(d_zf);
    Ok(out)
}

/// One-vs-rest binary cross-entropy: the true-class head is pushed up and the
/// hardest other head is pushed down.
pub fn loss_ood(outputs: &ModelOutputs, labels: &Labels, reduction: Reduction) -> Result<LossGrad> {
    check_labels(outputs, labels)?;
    let k = outputs.num_classes();
    if k < 2 {
        return Err(Error::config("one-vs-rest loss needs at least two classes"));
    }
    let n = outputs.batch_size();
    let w = reduction.scale(n);
    let mut value = 0.0;
    let mut d_zg = Array2::<f64>::zeros((n, k));
    for (i, &y) in labels.indices().iter().enumerate() {
        let qy = outputs.q[[i, y]];
        value -= ln_clamped(qy);
        d_zg[[i, y]] += w * (qy - 1.0);
        // min over l != y of log(1 - q_l): the largest q_l wins.
        let mut best = usize::MAX;
        let mut best_term = f64::INFINITY;
        for l in 0..k {
            if l == y {
                continue;
            }
            let term = ln_clamped(1.0 - outputs.q[[i, l]]);
            if term < best_term {
                best_term = term;
                best = l;
            }
        }
        value -= best_term;
        d_zg[[i, best]] += w * outputs.q[[i, best]];
    }
    let mut out = LossGrad::new(value * w);
    out.d_zg = Some(d_zg);
    Ok(out)
}

/// Squared difference between the one-vs-rest sigmoid views of two weak
/// augmentations of the same samples.
pub fn loss_soft_consistency(
    first: &ModelOutputs,
    second: &ModelOutputs,
    reduction: Reduction,
) -> Result<ConsistencyGrad> {
    if first.batch_size() != second.batch_size() || first.num_classes() != second.num_classes() {
        return Err(Error::validation(format!(
            "consistency views disagree in shape: {}x{} vs {}x{}",
            first.batch_size(),
            first.num_classes(),
            second.batch_size(),
            second.num_classes()
        )));
    }
    let n = first.batch_size();
    let k = first.num_classes();
    let w = reduction.scale(n);
    let mut value = 0.0;
    let mut d1 = Array2::<f64>::zeros((n, k));
    let mut d2 = Array2::<f64>::zeros((n, k));
    for i in 0..n {
        for j in 0..k {
            let a = first.q[[i, j]];
            let b = second.q[[i, j]];
            let diff = a - b;
            value += diff * diff;
            d1[[i, j]] = w * 2.0 * diff * a * (1.0 - a);
            d2[[i, j]] = -w * 2.0 * diff * b * (1.0 - b);
        }
    }
    Ok(ConsistencyGrad {
        value: value * w,
        d_zg_first: d1,
        d_zg_second: d2,
    })
}

/// Adaptively smoothed cross-entropy on the scaled classifier view.
///
/// The true class carries the per-sample reference `gamma`, every other class
/// `(1 - gamma) / (K - 1)`. Gradients flow to the classifier logits and `t_m`.
pub fn loss_mcal(
    outputs: &ModelOutputs,
    labels: &Labels,
    gammas: &[f64],
    reduction: Reduction,
) -> Result<LossGrad> {
    check_labels(outputs, labels)?;
    if gammas.len() != labels.len() {
        return Err(Error::validation("one gamma per sample is required"));
    }
    if let Some(&g) = gammas.iter().find(|&&g| !(0.0..=1.0).contains(&g)) {
        return Err(Error::validation(format!(
            "reference value {g} outside [0, 1]"
        )));
    }
    let n = outputs.batch_size();
    let k = outputs.num_classes();
    if k < 2 {
        return Err(Error::config("smoothing needs at least two classes"));
    }
    let w = reduction.scale(n);
    let t = outputs.t_m;
    let mut value = 0.0;
    let mut d_zf = Array2::<f64>::zeros((n, k));
    let mut d_t_m = 0.0;
    for (i, (&y, &gamma)) in labels.indices().iter().zip(gammas).enumerate() {
        let off = (1.0 - gamma) / (k as f64 - 1.0);
        for j in 0..k {
            let target = if j == y { gamma } else { off };
            value -= target * ln_clamped(outputs.p_s[[i, j]]);
            // d/d(scaled logit) of -sum target*log softmax = p_s - target,
            // because the targets sum to one.
            let da = outputs.p_s[[i, j]] - target;
            d_zf[[i, j]] = w * da / t;
            d_t_m += -w * da * outputs.z_f[[i, j]] / (t * t);
        }
    }
    let mut out = LossGrad::new(value * w);
    out.d_zf = Some(d_zf);
    out.d_t_m = d_t_m;
    Ok(out)
}

/// Adaptively smoothed one-vs-rest calibration loss on the scaled view.
///
/// Per sample, with `delta` the reference value, the loss is
/// `-( sum_k w_k log q_s_k + min_k v_k log(1 - q_s_k) )` where `w_k` is
/// `delta` on the true class and `1 - delta` elsewhere, and `v_k` is the
/// complement. Gradients flow to the one-vs-rest logits and `t_o`.
pub fn loss_ocal(
    outputs: &ModelOutputs,
    labels: &Labels,
    deltas: &[f64],
    min_mode: OcalMinMode,
    reduction: Reduction,
) -> Result<LossGrad> {
    check_labels(outputs, labels)?;
    if deltas.len() != labels.len() {
        return Err(Error::validation("one delta per sample is required"));
    }
    if let Some(&d) = deltas.iter().find(|&&d| !(0.0..=1.0).contains(&d)) {
        return Err(Error::validation(format!(
            "reference value {d} outside [0, 1]"
        )));
    }
    let n = outputs.batch_size();
    let k = outputs.num_classes();
    let w = reduction.scale(n);
    let t = outputs.t_o;
    let mut value = 0.0;
    let mut d_zg = Array2::<f64>::zeros((n, k));
    let mut d_t_o = 0.0;
    for (i, (&y, &delta)) in labels.indices().iter().zip(deltas).enumerate() {
        // Gradient of this sample's loss with respect to the scaled logits.
        let mut d_scaled = vec![0.0; k];
        let mut weight_sum = 0.0;
        for j in 0..k {
            let wk = if j == y { delta } else { 1.0 - delta };
            value -= wk * ln_clamped(outputs.q_s[[i, j]]);
            d_scaled[j] -= wk;
            weight_sum += wk;
        }
        // -sum_k w_k log softmax(b)_k has gradient (sum w) * q_s - w.
        for j in 0..k {
            d_scaled[j] += weight_sum * outputs.q_s[[i, j]];
        }

        let mut best = usize::MAX;
        let mut best_term = f64::INFINITY;
        for j in 0..k {
            if min_mode == OcalMinMode::HardNegative && j == y {
                continue;
            }
            let vk = if j == y { 1.0 - delta } else { delta };
            let term = vk * ln_clamped(1.0 - outputs.q_s[[i, j]]);
            if term < best_term {
                best_term = term;
                best = j;
            }
        }
        value -= best_term;
        let v_best = if best == y { 1.0 - delta } else { delta };
        let q_best = outputs.q_s[[i, best]].clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
        // -v log(1 - q_best): d/db_j = v * q_best * (I[j=best] - q_s_j) / (1 - q_best)
        let factor = v_best * q_best / (1.0 - q_best);
        for j in 0..k {
            let ind = if j == best { 1.0 } else { 0.0 };
            d_scaled[j] += factor * (ind - outputs.q_s[[i, j]]);
        }

        for j in 0..k {
            d_zg[[i, j]] = w * d_scaled[j] / t;
            d_t_o += -w * d_scaled[j] * outputs.z_g[[i, j]] / (t * t);
        }
    }
    let mut out = LossGrad::new(value * w);
    out.d_zg = Some(d_zg);
    out.d_t_o = d_t_o;
    Ok(out)
}

/// Pseudo-label cross-entropy between a weak view (argmax label, detached) and
/// a strong view, restricted to gated samples.
///
/// Returns a gradient for the strong-view classifier logits only; the weak
/// view contributes nothing beyond the detached argmax.
pub fn loss_fix(
    weak: &ModelOutputs,
    strong: &ModelOutputs,
    mask: &[bool],
    reduction: Reduction,
) -> Result<LossGrad> {
    if weak.batch_size() != strong.batch_size()
        || weak.num_classes() != strong.num_classes()
        || mask.len() != weak.batch_size()
    {
        return Err(Error::validation(
            "weak view, strong view, and mask must agree in length",
        ));
    }
    let n = weak.batch_size();
    let k = weak.num_classes();
    let w = reduction.scale(n);
    let mut value = 0.0;
    let mut d_zf = Array2::<f64>::zeros((n, k));
    for i in 0..n {
        if !mask[i] {
            continue;
        }
        let pseudo = argmax_row(weak.p.row(i));
        value -= ln_clamped(strong.p[[i, pseudo]]);
        for j in 0..k {
            d_zf[[i, j]] = w * (strong.p[[i, j]] - if j == pseudo { 1.0 } else { 0.0 });
        }
    }
    let mut out = LossGrad::new(value * w);
    out.d_zf = Some(d_zf);
    Ok(out)
}

/// Per-step decomposition of the training objective.
///
/// Terms that are inactive (warm-up phase or ablated) are `None`; `total` is
/// the weighted sum of the active terms in the order of the objective.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_ce: f64,
    pub l_ood: Option<f64>,
    pub l_sc: Option<f64>,
    pub l_mcal: Option<f64>,
    pub l_ocal: Option<f64>,
    pub l_fix: Option<f64>,
    pub total: f64,
    pub lambda_o: f64,
    pub lambda_ocal: f64,
    pub lambda_s: f64,
}

impl LossBreakdown {
    /// Recompute `total` from the components; used both by the trainer and by
    /// the invariants suite.
    pub fn compute_total(&self) -> f64 {
        let mut total = self.l_ce;
        if let Some(v) = self.l_ood {
            total += self.lambda_o * v;
        }
        if let Some(v) = self.l_sc {
            total += self.lambda_s * v;
        }
        if let Some(v) = self.l_mcal {
            total += v;
        }
        if let Some(v) = self.l_ocal {
            total += self.lambda_ocal * v;
        }
        if let Some(v) = self.l_fix {
            total += v;
        }
        total
    }

    /// Error naming the first non-finite component, if any.
    pub fn check_finite(&self) -> Result<()> {
        let named = [
            ("l_ce", Some(self.l_ce)),
            ("l_ood", self.l_ood),
            ("l_sc", self.l_sc),
            ("l_mcal", self.l_mcal),
            ("l_ocal", self.l_ocal),
            ("l_fix", self.l_fix),
            ("total", Some(self.total)),
        ];
        for (name, v) in named {
            if let Some(v) = v {
                if !v.is_finite() {
                    return Err(Error::numeric(name, format!("value {v}")));
                }
            }
        }
        Ok(())
    }
}
