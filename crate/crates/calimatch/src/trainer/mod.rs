//! The training loop: warm-up gating, joint first-order updates of the
//! network and both temperatures, per-epoch reference-table refresh,
//! learning-curve diagnostics, and checkpointing.
//!
//! Per iteration the objective is
//! `L = L_ce + lambda_o * L_ood + lambda_s * L_sc` during warm-up, extended by
//! `L_mcal + lambda_ocal * L_ocal + L_fix` from the warm-up epoch onward
//! (1-based: warm-up covers epochs `1..warmup_epochs`). Reference tables are
//! rebuilt from the validation split at the end of every epoch and consumed
//! throughout the next one. Ablation flags remove individual terms; the
//! presets in [`presets`] bundle the flag combinations that recover the
//! baseline objectives.

mod optimizer;
mod presets;

pub use optimizer::{make_optimizer, Optimizer, OPTIMIZER_NAMES};
pub use presets::{apply_preset, preset_names, preset_registry, Preset};

use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::calibration::{
    delta_for_batch, gamma_for_batch, refresh_tables, ReferenceTable, DEFAULT_BINS,
};
use crate::data::{augment, AugmentKind, AugmentationPair, MismatchDataset, TrainView};
use crate::error::{Error, Result};
use crate::model::{argmax_row, make_toy_model, ModelParams, ParamGrads};
use crate::objectives::{
    loss_ce, loss_fix, loss_mcal, loss_ocal, loss_ood, loss_soft_consistency, Labels,
    LossBreakdown, OcalMinMode, Reduction,
};
use crate::selection::{
    select_batch, selection_diagnostics, GateMode, HiddenTruth, SelectionDiagnostics,
    SelectionRecord,
};

/// Full training configuration. The JSON schema is exactly this struct;
/// unknown keys are rejected.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Iterations per epoch; `None` derives `ceil(n_unlabeled / batch_unlabeled)`.
    pub iters_per_epoch: Option<usize>,
    /// 1-based epoch at which the calibration and pseudo-label terms join.
    pub warmup_epochs: usize,
    pub lr: f64,
    pub lr_decay_factor: f64,
    /// Global iteration at which the learning rate decays once; `None`
    /// derives 80% of the total iteration count.
    pub lr_decay_at: Option<usize>,
    pub batch_labeled: usize,
    pub batch_unlabeled: usize,
    pub lambda_o: f64,
    pub lambda_ocal: f64,
    pub lambda_s: f64,
    pub tau1: f64,
    pub tau2: f64,
    /// Bin count of the smoothing reference tables.
    pub bins: usize,
    pub seed: u64,
    pub hidden_dims: Vec<usize>,
    pub optimizer: String,
    pub sigma_weak: f64,
    pub sigma_strong: f64,
    pub dropout_rate: f64,
    /// Validation accuracy is evaluated every this many epochs.
    pub val_period_epochs: usize,
    /// Dump the per-epoch selection records of the unlabeled pool to
    /// `selection.csv` for offline threshold-sweep analysis.
    pub dump_selection_records: bool,
    pub disable_mcal: bool,
    pub disable_ocal: bool,
    pub disable_ood_head: bool,
    pub disable_fix: bool,
    pub ocal_min_mode: OcalMinMode,
    pub reduction: Reduction,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            iters_per_epoch: None,
            warmup_epochs: 5,
            lr: 0.003,
            lr_decay_factor: 0.2,
            lr_decay_at: None,
            batch_labeled: 50,
            batch_unlabeled: 50,
            lambda_o: 0.1,
            lambda_ocal: 0.001,
            lambda_s: 0.5,
            tau1: 0.5,
            tau2: 0.95,
            bins: DEFAULT_BINS,
            seed: 0,
            hidden_dims: vec![16],
            optimizer: "adam".to_string(),
            sigma_weak: 0.1,
            sigma_strong: 0.4,
            dropout_rate: 0.0,
            val_period_epochs: 1,
            disable_mcal: false,
            disable_ocal: false,
            disable_ood_head: false,
            disable_fix: false,
            ocal_min_mode: OcalMinMode::Verbatim,
            reduction: Reduction::Mean,
        }
    }
}

impl TrainConfig {
    /// Every key the JSON schema accepts, for whole-config error reporting.
    pub const FIELDS: [&'static str; 27] = [
        "epochs",
        "iters_per_epoch",
        "warmup_epochs",
        "lr",
        "lr_decay_factor",
        "lr_decay_at",
        "batch_labeled",
        "batch_unlabeled",
        "lambda_o",
        "lambda_ocal",
        "lambda_s",
        "tau1",
        "tau2",
        "bins",
        "seed",
        "hidden_dims",
        "optimizer",
        "sigma_weak",
        "sigma_strong",
        "dropout_rate",
        "val_period_epochs",
        "disable_mcal",
        "disable_ocal",
        "disable_ood_head",
        "disable_fix",
        "ocal_min_mode",
        "reduction",
    ];

    /// Parse a JSON config, reporting every unknown key and every semantic
    /// violation at once.
    pub fn from_json_str(text: &str) -> Result<TrainConfig> {
        let value: serde_json::Value = serde_json::from_str(text)
            .map_err(|e| Error::config(format!("config is not valid JSON: {e}")))?;
        let map = value
            .as_object()
            .ok_or_else(|| Error::config("config must be a JSON object"))?;
        let unknown: Vec<String> = map
            .keys()
            .filter(|k| !Self::FIELDS.contains(&k.as_str()))
            .map(|k| format!("unknown field '{k}'"))
            .collect();
        if !unknown.is_empty() {
            return Err(Error::config(format!(
                "invalid config: {}",
                unknown.join("; ")
            )));
        }
        let config: TrainConfig = serde_json::from_value(value)
            .map_err(|e| Error::config(format!("invalid config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    /// Semantic validation; reports every violated field at once.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.epochs == 0 {
            problems.push("epochs must be at least 1".to_string());
        }
        if self.warmup_epochs == 0 {
            problems.push("warmup_epochs must be at least 1 (epochs are 1-based)".to_string());
        }
        if self.warmup_epochs > self.epochs {
            problems.push(format!(
                "warmup_epochs ({}) must not exceed epochs ({})",
                self.warmup_epochs, self.epochs
            ));
        }
        if self.batch_labeled == 0 || self.batch_unlabeled == 0 {
            problems.push("batch sizes must be at least 1".to_string());
        }
        for (name, v) in [
            ("lambda_o", self.lambda_o),
            ("lambda_ocal", self.lambda_ocal),
            ("lambda_s", self.lambda_s),
        ] {
            if !(v >= 0.0) {
                problems.push(format!("{name} must be nonnegative, got {v}"));
            }
        }
        for (name, v) in [("tau1", self.tau1), ("tau2", self.tau2)] {
            if !(v > 0.0 && v < 1.0) {
                problems.push(format!("{name} must lie in (0, 1), got {v}"));
            }
        }
        if self.bins == 0 {
            problems.push("bins must be at least 1".to_string());
        }
        if !(self.lr > 0.0) {
            problems.push(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.lr_decay_factor > 0.0) {
            problems.push(format!(
                "lr_decay_factor must be positive, got {}",
                self.lr_decay_factor
            ));
        }
        if self.hidden_dims.is_empty() {
            problems.push("hidden_dims must be nonempty".to_string());
        }
        if !OPTIMIZER_NAMES.contains(&self.optimizer.as_str()) {
            problems.push(format!(
                "optimizer '{}' is unknown; valid: {}",
                self.optimizer,
                OPTIMIZER_NAMES.join(", ")
            ));
        }
        for (name, v) in [
            ("sigma_weak", self.sigma_weak),
            ("sigma_strong", self.sigma_strong),
        ] {
            if !(v >= 0.0) {
                problems.push(format!("{name} must be nonnegative, got {v}"));
            }
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            problems.push(format!(
                "dropout_rate must lie in [0, 1), got {}",
                self.dropout_rate
            ));
        }
        if self.val_period_epochs == 0 {
            problems.push("val_period_epochs must be at least 1".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::config(format!(
                "invalid config: {}",
                problems.join("; ")
            )))
        }
    }

    fn augmentation(&self) -> AugmentationPair {
        AugmentationPair {
            sigma_weak: self.sigma_weak,
            sigma_strong: self.sigma_strong,
            dropout_rate: self.dropout_rate,
        }
    }

    fn gate_mode(&self) -> GateMode {
        if self.disable_ood_head {
            GateMode::ConfidenceOnly
        } else {
            GateMode::SeenAndConfidence
        }
    }
}

/// SHA-256 of the canonical JSON serialization of a config.
pub fn config_hash(config: &TrainConfig) -> String {
    let json = serde_json::to_string(config).expect("config serializes");
    let mut hasher = Sha256::new();
    hasher.update(json.as_bytes());
    hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Mutable training state threaded through the step function.
pub struct TrainState {
    pub params: ModelParams,
    pub gamma: Option<ReferenceTable>,
    pub delta: Option<ReferenceTable>,
    /// 1-based epoch currently running.
    pub epoch: usize,
    /// Global 0-based iteration counter (increments after each step).
    pub iteration: usize,
    optimizer: Box<dyn Optimizer>,
    pub rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(params: ModelParams, config: &TrainConfig) -> Result<Self> {
        let optimizer = make_optimizer(&config.optimizer, params.n_params())?;
        Ok(TrainState {
            params,
            gamma: None,
            delta: None,
            epoch: 1,
            iteration: 0,
            optimizer,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
        })
    }
}

/// Result of one optimization step.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub breakdown: LossBreakdown,
    /// Gated-subset size when pseudo-label training was active.
    pub n_selected: Option<usize>,
}

fn effective_lr(config: &TrainConfig, iteration: usize, decay_at: usize) -> f64 {
    if iteration >= decay_at {
        config.lr * config.lr_decay_factor
    } else {
        config.lr
    }
}

/// One minibatch update: compute the active loss terms, backpropagate, and
/// step every parameter including both temperatures.
pub fn train_step(
    state: &mut TrainState,
    labeled_x: ArrayView2<'_, f64>,
    labeled_y: &[usize],
    unlabeled_x: ArrayView2<'_, f64>,
    config: &TrainConfig,
    decay_at: usize,
) -> Result<StepOutcome> {
    let reduction = config.reduction;
    let full_phase = state.epoch >= config.warmup_epochs;
    let use_ood = !config.disable_ood_head;
    let use_mcal = full_phase && !config.disable_mcal;
    let use_ocal = full_phase && !config.disable_ocal && !config.disable_ood_head;
    let use_fix = full_phase && !config.disable_fix;
    let needs_unlabeled = use_ood || use_fix;

    let k = state.params.num_classes();
    let labels = Labels::from_indices(labeled_y, k)?;
    let pair = config.augmentation();

    let mut grads = ParamGrads::zeros_like(&state.params);
    let mut d_t_m = 0.0;
    let mut d_t_o = 0.0;

    // Labeled batch: one forward feeds every labeled-side term.
    let (out_l, cache_l) = state.params.forward(labeled_x)?;
    let ce = loss_ce(&out_l, &labels, reduction)?;
    let mut d_zf_l = ce.d_zf.expect("classification loss has classifier grads");
    let mut d_zg_l: Option<Array2<f64>> = None;

    let l_ood = if use_ood {
        let ood = loss_ood(&out_l, &labels, reduction)?;
        let mut d = ood.d_zg.expect("rejection loss has head grads");
        d *= config.lambda_o;
        d_zg_l = Some(d);
        Some(ood.value)
    } else {
        None
    };

    let l_mcal = if use_mcal {
        let gamma = state.gamma.as_ref().ok_or_else(|| {
            Error::validation("internal invariant violation: smoothing table absent")
        })?;
        let gammas = gamma_for_batch(gamma, &out_l);
        let mcal = loss_mcal(&out_l, &labels, &gammas, reduction)?;
        d_zf_l += &mcal.d_zf.expect("smoothing loss has classifier grads");
        d_t_m += mcal.d_t_m;
        Some(mcal.value)
    } else {
        None
    };

    let l_ocal = if use_ocal {
        let delta = state.delta.as_ref().ok_or_else(|| {
            Error::validation("internal invariant violation: smoothing table absent")
        })?;
        let deltas = delta_for_batch(delta, &out_l);
        let ocal = loss_ocal(&out_l, &labels, &deltas, config.ocal_min_mode, reduction)?;
        let mut d = ocal.d_zg.expect("head calibration loss has head grads");
        d *= config.lambda_ocal;
        match &mut d_zg_l {
            Some(acc) => *acc += &d,
            None => d_zg_l = Some(d),
        }
        d_t_o += config.lambda_ocal * ocal.d_t_o;
        Some(ocal.value)
    } else {
        None
    };

    grads.add_assign(&state.params.backward(&cache_l, Some(&d_zf_l), d_zg_l.as_ref()));

    // Unlabeled batch: two weak views; the first also feeds selection.
    let mut l_sc = None;
    let mut l_fix = None;
    let mut n_selected = None;
    if needs_unlabeled {
        let weak1_x = augment(&pair, unlabeled_x, AugmentKind::Weak, &mut state.rng);
        let weak2_x = augment(&pair, unlabeled_x, AugmentKind::Weak, &mut state.rng);
        let (out_w1, cache_w1) = state.params.forward(weak1_x.view())?;

        if use_ood {
            let (out_w2, cache_w2) = state.params.forward(weak2_x.view())?;
            let sc = loss_soft_consistency(&out_w1, &out_w2, reduction)?;
            let mut d1 = sc.d_zg_first;
            d1 *= config.lambda_s;
            let mut d2 = sc.d_zg_second;
            d2 *= config.lambda_s;
            grads.add_assign(&state.params.backward(&cache_w1, None, Some(&d1)));
            grads.add_assign(&state.params.backward(&cache_w2, None, Some(&d2)));
            l_sc = Some(sc.value);
        }

        if use_fix {
            let records = select_batch(&out_w1, config.tau1, config.tau2, config.gate_mode())?;
            let mask: Vec<bool> = records.iter().map(|r| r.selected).collect();
            n_selected = Some(mask.iter().filter(|&&m| m).count());
            let strong_x = augment(&pair, unlabeled_x, AugmentKind::Strong, &mut state.rng);
            let (out_s, cache_s) = state.params.forward(strong_x.view())?;
            let fix = loss_fix(&out_w1, &out_s, &mask, reduction)?;
            grads.add_assign(&state.params.backward(
                &cache_s,
                Some(&fix.d_zf.expect("pseudo-label loss has classifier grads")),
                None,
            ));
            l_fix = Some(fix.value);
        }
    }

    grads.t_m = d_t_m;
    grads.t_o = d_t_o;

    let mut breakdown = LossBreakdown {
        l_ce: ce.value,
        l_ood,
        l_sc,
        l_mcal,
        l_ocal,
        l_fix,
        total: 0.0,
        lambda_o: config.lambda_o,
        lambda_ocal: config.lambda_ocal,
        lambda_s: config.lambda_s,
    };
    breakdown.total = breakdown.compute_total();
    breakdown.check_finite()?;

    let lr = effective_lr(config, state.iteration, decay_at);
    let mut flat = state.params.to_flat();
    let flat_grads = grads.to_flat();
    state.optimizer.step(&mut flat, &flat_grads, lr);
    state.params.set_flat(&flat);
    state.params.clamp_temperatures();
    state.iteration += 1;

    Ok(StepOutcome {
        breakdown,
        n_selected,
    })
}

/// One row of the per-iteration log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IterationRow {
    pub iteration: usize,
    pub epoch: usize,
    /// `warmup` or `full`.
    pub phase: String,
    pub breakdown: LossBreakdown,
    pub lr: f64,
    pub t_m: f64,
    pub t_o: f64,
    pub n_selected: Option<usize>,
}

/// One row of the per-epoch log: table summaries plus learning-curve
/// diagnostics over the unlabeled pool.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub val_accuracy: Option<f64>,
    pub t_m: f64,
    pub t_o: f64,
    pub gamma_fallback: f64,
    pub gamma_populated_bins: usize,
    pub delta_fallback: f64,
    pub delta_populated_bins: usize,
    pub diagnostics: SelectionDiagnostics,
    pub n_selected_pool: usize,
}

/// Per-epoch snapshot of one reference table, flattened to rows.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TableRow {
    pub epoch: usize,
    pub table: String,
    pub bin: usize,
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub value: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub iterations: Vec<IterationRow>,
    pub epochs: Vec<EpochRow>,
    pub tables: Vec<TableRow>,
}

/// Everything a finished run hands back.
pub struct TrainOutcome {
    pub params: ModelParams,
    pub gamma: ReferenceTable,
    pub delta: ReferenceTable,
    pub best_params: ModelParams,
    pub best_gamma: ReferenceTable,
    pub best_delta: ReferenceTable,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    pub log: TrainLog,
}

fn gather_rows(x: ArrayView2<'_, f64>, idx: &[usize]) -> Array2<f64> {
    Array2::from_shape_fn((idx.len(), x.ncols()), |(i, j)| x[[idx[i], j]])
}

fn validation_accuracy(params: &ModelParams, x: ArrayView2<'_, f64>, y: &[usize]) -> Result<f64> {
    let (out, _) = params.forward(x)?;
    let hits = (0..y.len())
        .filter(|&i| argmax_row(out.p.row(i)) == y[i])
        .count();
    Ok(hits as f64 / y.len() as f64)
}

fn pool_diagnostics(
    params: &ModelParams,
    dataset: &MismatchDataset,
    config: &TrainConfig,
) -> Result<(SelectionDiagnostics, usize, Vec<SelectionRecord>)> {
    // Diagnostics run on the raw unlabeled features (no augmentation) so the
    // per-epoch curves are deterministic given the parameters.
    let (out, _) = params.forward(dataset.unlabeled_x.view())?;
    let records = select_batch(&out, config.tau1, config.tau2, config.gate_mode())?;
    let truth = dataset.unlabeled_truth();
    let hidden: Vec<HiddenTruth> = truth
        .labels
        .iter()
        .zip(&truth.seen)
        .map(|(&label, &seen)| HiddenTruth {
            label: if seen {
                dataset.seen_position(label)
            } else {
                None
            },
            seen,
        })
        .collect();
    let diag = selection_diagnostics(&records, &hidden)?;
    let n_selected = records.iter().filter(|r| r.selected).count();
    Ok((diag, n_selected, records))
}

/// Run the full training loop on a dataset.
pub fn train(dataset: &MismatchDataset, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let view: TrainView<'_> = dataset.train_view();
    let n_labeled = view.labeled.len();
    let n_unlabeled = view.unlabeled_x.nrows();
    let k = dataset.num_seen();
    if k < 2 {
        return Err(Error::config("training needs at least two seen classes"));
    }
    if n_labeled == 0 {
        return Err(Error::config("labeled split is empty"));
    }
    if dataset.validation.is_empty() {
        return Err(Error::config("validation split is empty"));
    }
    if config.batch_unlabeled > n_unlabeled {
        return Err(Error::config(format!(
            "batch_unlabeled ({}) exceeds the unlabeled pool ({n_unlabeled})",
            config.batch_unlabeled
        )));
    }

    let params = make_toy_model(config.seed, dataset.dim(), &config.hidden_dims, k)?;
    let mut state = TrainState::new(params, config)?;
    let iters = config
        .iters_per_epoch
        .unwrap_or_else(|| n_unlabeled.div_ceil(config.batch_unlabeled));
    let total_iters = iters * config.epochs;
    let decay_at = config
        .lr_decay_at
        .unwrap_or_else(|| (0.8 * total_iters as f64).round() as usize);

    // A warm-up of one epoch consumes the tables before the first epoch-end
    // refresh; seed them from the untrained model in that case.
    if config.warmup_epochs == 1 && !(config.disable_mcal && config.disable_ocal) {
        let (gamma, delta) = refresh_tables(
            &state.params,
            dataset.validation.x.view(),
            &dataset.validation.y,
            config.bins,
        )?;
        state.gamma = Some(gamma);
        state.delta = Some(delta);
    }

    let mut log = TrainLog::default();
    let mut best_val = f64::NEG_INFINITY;
    let mut best_epoch = 0;
    let mut best_params = state.params.clone();
    let mut best_tables: Option<(ReferenceTable, ReferenceTable)> = None;

    let mut unlabeled_perm: Vec<usize> = (0..n_unlabeled).collect();
    let mut cursor = n_unlabeled; // force a shuffle on first use

    for epoch in 1..=config.epochs {
        state.epoch = epoch;
        for _ in 0..iters {
            // Labeled batch with replacement.
            let labeled_idx: Vec<usize> = (0..config.batch_labeled)
                .map(|_| state.rng.gen_range(0..n_labeled))
                .collect();
            let lx = gather_rows(view.labeled.x.view(), &labeled_idx);
            let ly: Vec<usize> = labeled_idx.iter().map(|&i| view.labeled.y[i]).collect();

            // Unlabeled batch from a shuffled pass over the pool.
            if cursor + config.batch_unlabeled > n_unlabeled {
                for i in (1..unlabeled_perm.len()).rev() {
                    let j = state.rng.gen_range(0..=i);
                    unlabeled_perm.swap(i, j);
                }
                cursor = 0;
            }
            let u_idx = &unlabeled_perm[cursor..cursor + config.batch_unlabeled];
            cursor += config.batch_unlabeled;
            let ux = gather_rows(view.unlabeled_x, u_idx);

            let lr = effective_lr(config, state.iteration, decay_at);
            let outcome = train_step(&mut state, lx.view(), &ly, ux.view(), config, decay_at)?;
            log.iterations.push(IterationRow {
                iteration: state.iteration,
                epoch,
                phase: if epoch >= config.warmup_epochs {
                    "full".to_string()
                } else {
                    "warmup".to_string()
                },
                breakdown: outcome.breakdown,
                lr,
                t_m: state.params.t_m,
                t_o: state.params.t_o,
                n_selected: outcome.n_selected,
            });
        }

        // Epoch end: refresh both tables from the validation split.
        let (gamma, delta) = refresh_tables(
            &state.params,
            dataset.validation.x.view(),
            &dataset.validation.y,
            config.bins,
        )?;
        for (name, table) in [("gamma", &gamma), ("delta", &delta)] {
            for b in 0..table.m {
                log.tables.push(TableRow {
                    epoch,
                    table: name.to_string(),
                    bin: b + 1,
                    lo: table.edges[b],
                    hi: table.edges[b + 1],
                    count: table.counts[b],
                    value: table.values[b],
                });
            }
        }

        let val_accuracy = if epoch % config.val_period_epochs == 0 || epoch == config.epochs {
            Some(validation_accuracy(
                &state.params,
                dataset.validation.x.view(),
                &dataset.validation.y,
            )?)
        } else {
            None
        };
        let (diagnostics, n_selected_pool, _) = pool_diagnostics(&state.params, dataset, config)?;
        log.epochs.push(EpochRow {
            epoch,
            val_accuracy,
            t_m: state.params.t_m,
            t_o: state.params.t_o,
            gamma_fallback: gamma.fallback,
            gamma_populated_bins: gamma.counts.iter().filter(|&&c| c > 0).count(),
            delta_fallback: delta.fallback,
            delta_populated_bins: delta.counts.iter().filter(|&&c| c > 0).count(),
            diagnostics,
            n_selected_pool,
        });

        if let Some(acc) = val_accuracy {
            if acc > best_val {
                best_val = acc;
                best_epoch = epoch;
                best_params = state.params.clone();
                best_tables = Some((gamma.clone(), delta.clone()));
            }
        }

        state.gamma = Some(gamma);
        state.delta = Some(delta);
    }

    let gamma = state.gamma.expect("tables exist after the final epoch");
    let delta = state.delta.expect("tables exist after the final epoch");
    let (best_gamma, best_delta) =
        best_tables.unwrap_or_else(|| (gamma.clone(), delta.clone()));
    Ok(TrainOutcome {
        params: state.params,
        gamma,
        delta,
        best_params,
        best_gamma,
        best_delta,
        best_epoch,
        best_val_accuracy: best_val,
        log,
    })
}

// ---------------------------------------------------------------------------
// Checkpoints and log files

pub const CHECKPOINT_SCHEMA: &str = "checkpoint/1";

/// A self-contained snapshot: parameters, both reference tables, and the
/// creating configuration with its hash.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub schema: String,
    pub config_hash: String,
    pub config: TrainConfig,
    pub epoch: usize,
    pub val_accuracy: Option<f64>,
    pub params: ModelParams,
    pub gamma: ReferenceTable,
    pub delta: ReferenceTable,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(self)?;
        fs::write(path, json).map_err(|e| Error::io(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let text =
            fs::read_to_string(path).map_err(|e| Error::io(format!("{}: {e}", path.display())))?;
        let ckpt: Checkpoint = serde_json::from_str(&text)?;
        if ckpt.schema != CHECKPOINT_SCHEMA {
            return Err(Error::config(format!(
                "unsupported checkpoint schema {}",
                ckpt.schema
            )));
        }
        Ok(ckpt)
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x}"),
        None => "NA".to_string(),
    }
}

fn fmt_opt_usize(v: Option<usize>) -> String {
    match v {
        Some(x) => format!("{x}"),
        None => "NA".to_string(),
    }
}

/// Write `log.csv`, `epochs.csv`, and `tables.csv` into `dir`.
pub fn write_log_files(log: &TrainLog, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut iter_csv = String::from(
        "iteration,epoch,phase,l_ce,l_ood,l_sc,l_mcal,l_ocal,l_fix,total,lambda_o,lambda_ocal,lambda_s,lr,t_m,t_o,n_selected\n",
    );
    for row in &log.iterations {
        let b = &row.breakdown;
        iter_csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            row.iteration,
            row.epoch,
            row.phase,
            b.l_ce,
            fmt_opt(b.l_ood),
            fmt_opt(b.l_sc),
            fmt_opt(b.l_mcal),
            fmt_opt(b.l_ocal),
            fmt_opt(b.l_fix),
            b.total,
            b.lambda_o,
            b.lambda_ocal,
            b.lambda_s,
            row.lr,
            row.t_m,
            row.t_o,
            fmt_opt_usize(row.n_selected),
        ));
    }
    fs::write(dir.join("log.csv"), iter_csv)?;

    let mut epoch_csv = String::from(
        "epoch,val_accuracy,t_m,t_o,gamma_fallback,gamma_populated_bins,delta_fallback,delta_populated_bins,pseudo_label_accuracy,seen_selected_fraction,unseen_among_high_confidence,unseen_among_low_ood_high_confidence,selection_error_rate,n_selected_pool\n",
    );
    for row in &log.epochs {
        let d = &row.diagnostics;
        epoch_csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            row.epoch,
            fmt_opt(row.val_accuracy),
            row.t_m,
            row.t_o,
            row.gamma_fallback,
            row.gamma_populated_bins,
            row.delta_fallback,
            row.delta_populated_bins,
            fmt_opt(d.pseudo_label_accuracy),
            fmt_opt(d.seen_selected_fraction),
            fmt_opt(d.unseen_among_high_confidence),
            fmt_opt(d.unseen_among_low_ood_high_confidence),
            fmt_opt(d.selection_error_rate),
            row.n_selected_pool,
        ));
    }
    fs::write(dir.join("epochs.csv"), epoch_csv)?;

    let mut table_csv = String::from("epoch,table,bin,lo,hi,count,value\n");
    for row in &log.tables {
        table_csv.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            row.epoch, row.table, row.bin, row.lo, row.hi, row.count, row.value
        ));
    }
    fs::write(dir.join("tables.csv"), table_csv)?;
    Ok(())
}

/// Train and write every artifact (logs plus best/last checkpoints) to `dir`.
pub fn run_training_to_dir(
    dataset: &MismatchDataset,
    config: &TrainConfig,
    dir: &Path,
) -> Result<TrainOutcome> {
    let outcome = train(dataset, config)?;
    fs::create_dir_all(dir)?;
    write_log_files(&outcome.log, dir)?;
    let hash = config_hash(config);
    Checkpoint {
        schema: CHECKPOINT_SCHEMA.to_string(),
        config_hash: hash.clone(),
        config: config.clone(),
        epoch: outcome.best_epoch,
        val_accuracy: Some(outcome.best_val_accuracy),
        params: outcome.best_params.clone(),
        gamma: outcome.best_gamma.clone(),
        delta: outcome.best_delta.clone(),
    }
    .save(&dir.join("checkpoint-best"))?;
    Checkpoint {
        schema: CHECKPOINT_SCHEMA.to_string(),
        config_hash: hash,
        config: config.clone(),
        epoch: config.epochs,
        val_accuracy: outcome.log.epochs.last().and_then(|e| e.val_accuracy),
        params: outcome.params.clone(),
        gamma: outcome.gamma.clone(),
        delta: outcome.delta.clone(),
    }
    .save(&dir.join("checkpoint-last"))?;
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_synthetic, SyntheticConfig};

    fn tiny_dataset() -> MismatchDataset {
        make_synthetic(&SyntheticConfig {
            seed: 5,
            num_seen: 3,
            num_unseen: 2,
            kappa: 0.4,
            n_labeled: 60,
            n_unlabeled: 120,
            n_test: 60,
            dim: 3,
            cluster_spread: 0.7,
            ..SyntheticConfig::default()
        })
        .unwrap()
    }

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            epochs: 3,
            warmup_epochs: 2,
            batch_labeled: 16,
            batch_unlabeled: 24,
            hidden_dims: vec![8],
            seed: 1,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn defaults_follow_the_reference_hyperparameters() {
        let c = TrainConfig::default();
        assert_eq!(c.lr, 0.003);
        assert_eq!(c.lr_decay_factor, 0.2);
        assert_eq!(c.tau1, 0.5);
        assert_eq!(c.tau2, 0.95);
        assert_eq!(c.bins, 30);
        assert_eq!(c.warmup_epochs, 5);
        assert_eq!(c.lambda_s, 0.5);
        assert_eq!(c.lambda_o, 0.1);
        assert_eq!(c.lambda_ocal, 0.001);
        assert_eq!(c.optimizer, "adam");
    }

    #[test]
    fn config_schema_matches_the_field_list() {
        let json = serde_json::to_value(TrainConfig::default()).unwrap();
        let keys: Vec<&str> = json.as_object().unwrap().keys().map(|k| k.as_str()).collect();
        let mut expected: Vec<&str> = TrainConfig::FIELDS.to_vec();
        expected.sort_unstable();
        let mut got = keys.clone();
        got.sort_unstable();
        assert_eq!(got, expected);
    }

    #[test]
    fn unknown_keys_are_all_reported() {
        let text = r#"{"epochs": 2, "leerning_rate": 0.1, "bogus": true}"#;
        let err = TrainConfig::from_json_str(text).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("leerning_rate"), "{msg}");
        assert!(msg.contains("bogus"), "{msg}");
    }

    #[test]
    fn semantic_violations_are_all_reported() {
        let bad = TrainConfig {
            epochs: 2,
            warmup_epochs: 5,
            tau1: 1.5,
            lambda_o: -1.0,
            ..TrainConfig::default()
        };
        let err = bad.validate().unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("warmup_epochs"), "{msg}");
        assert!(msg.contains("tau1"), "{msg}");
        assert!(msg.contains("lambda_o"), "{msg}");
    }

    #[test]
    fn warmup_boundary_gates_the_loss_terms() {
        let ds = tiny_dataset();
        let outcome = train(&ds, &tiny_config()).unwrap();
        let rows = &outcome.log.iterations;
        let last_warmup = rows.iter().filter(|r| r.epoch == 1).last().unwrap();
        assert!(last_warmup.breakdown.l_mcal.is_none());
        assert!(last_warmup.breakdown.l_ocal.is_none());
        assert!(last_warmup.breakdown.l_fix.is_none());
        assert!(last_warmup.breakdown.l_ood.is_some());
        assert!(last_warmup.breakdown.l_sc.is_some());
        let first_full = rows.iter().find(|r| r.epoch == 2).unwrap();
        assert!(first_full.breakdown.l_mcal.is_some());
        assert!(first_full.breakdown.l_ocal.is_some());
        assert!(first_full.breakdown.l_fix.is_some());
        assert_eq!(first_full.phase, "full");
        // Totals reconstruct from the components in every row.
        for r in rows {
            assert!((r.breakdown.total - r.breakdown.compute_total()).abs() < 1e-12);
        }
    }

    #[test]
    fn temperatures_stay_clamped_and_frozen_when_ablated() {
        let ds = tiny_dataset();
        let mut config = tiny_config();
        for row in train(&ds, &config).unwrap().log.iterations {
            assert!((0.05..=10.0).contains(&row.t_m));
            assert!((0.05..=10.0).contains(&row.t_o));
        }
        // With both calibration losses off, no gradient reaches either
        // temperature, so they stay exactly at initialization.
        apply_preset("openmatch", &mut config).unwrap();
        let outcome = train(&ds, &config).unwrap();
        assert_eq!(outcome.params.t_m, 1.5);
        assert_eq!(outcome.params.t_o, 1.5);
    }

    #[test]
    fn identical_seeds_give_identical_trajectories() {
        let ds = tiny_dataset();
        let config = tiny_config();
        let a = train(&ds, &config).unwrap();
        let b = train(&ds, &config).unwrap();
        assert_eq!(a.params.to_flat(), b.params.to_flat());
        let totals_a: Vec<f64> = a.log.iterations.iter().map(|r| r.breakdown.total).collect();
        let totals_b: Vec<f64> = b.log.iterations.iter().map(|r| r.breakdown.total).collect();
        assert_eq!(totals_a, totals_b);
    }

    #[test]
    fn smoke_run_writes_one_row_and_checkpoints() {
        let ds = tiny_dataset();
        let config = TrainConfig {
            epochs: 1,
            warmup_epochs: 1,
            iters_per_epoch: Some(1),
            batch_labeled: 8,
            batch_unlabeled: 8,
            hidden_dims: vec![8],
            ..TrainConfig::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let outcome = run_training_to_dir(&ds, &config, dir.path()).unwrap();
        assert_eq!(outcome.log.iterations.len(), 1);
        assert_eq!(outcome.log.epochs.len(), 1);
        for name in ["log.csv", "epochs.csv", "tables.csv", "checkpoint-best", "checkpoint-last"] {
            assert!(dir.path().join(name).exists(), "{name} missing");
        }
        let ckpt = Checkpoint::load(&dir.path().join("checkpoint-last")).unwrap();
        assert_eq!(ckpt.config_hash, config_hash(&config));
        assert_eq!(ckpt.params.num_classes(), 3);
    }

    #[test]
    fn epoch_log_is_complete() {
        let ds = tiny_dataset();
        let outcome = train(&ds, &tiny_config()).unwrap();
        assert_eq!(outcome.log.epochs.len(), 3);
        for row in &outcome.log.epochs {
            assert!(row.val_accuracy.is_some());
            assert!(row.gamma_populated_bins > 0);
            assert!(row.delta_populated_bins > 0);
        }
        // 30 bins per table per epoch.
        assert_eq!(outcome.log.tables.len(), 3 * 2 * 30);
    }

    #[test]
    fn oversized_unlabeled_batch_is_rejected_before_any_step() {
        let ds = tiny_dataset();
        let config = TrainConfig {
            batch_unlabeled: 100_000,
            ..tiny_config()
        };
        assert!(matches!(train(&ds, &config), Err(Error::Config(_))));
    }

    #[test]
    fn config_hash_is_stable_and_sensitive() {
        let a = TrainConfig::default();
        let mut b = TrainConfig::default();
        assert_eq!(config_hash(&a), config_hash(&b));
        b.lr = 0.001;
        assert_ne!(config_hash(&a), config_hash(&b));
    }
}
