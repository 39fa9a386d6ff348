//! Named ablation presets: each preset is a strategy that rewrites the
//! ablation flags of a configuration to recover one training objective.
//!
//! - `calimatch`: the full objective (all terms active).
//! - `openmatch`: both calibration losses disabled; rejection head, soft
//!   consistency, and gated pseudo-labeling stay.
//! - `fixmatch`: additionally drops the rejection head, so gating is by
//!   confidence alone.
//! - `supervised`: labeled cross-entropy only.

use super::TrainConfig;
use crate::error::{Error, Result};

pub trait Preset: Sync {
    fn name(&self) -> &'static str;
    fn describe(&self) -> &'static str;
    /// Rewrite the ablation flags; other hyperparameters are untouched.
    fn apply(&self, config: &mut TrainConfig);
}

struct Calimatch;

impl Preset for Calimatch {
    fn name(&self) -> &'static str {
        "calimatch"
    }

    fn describe(&self) -> &'static str {
        "full objective: calibration losses, rejection head, gated pseudo-labeling"
    }

    fn apply(&self, config: &mut TrainConfig) {
        config.disable_mcal = false;
        config.disable_ocal = false;
        config.disable_ood_head = false;
        config.disable_fix = false;
    }
}

struct Openmatch;

impl Preset for Openmatch {
    fn name(&self) -> &'static str {
        "openmatch"
    }

    fn describe(&self) -> &'static str {
        "both calibration losses disabled; everything else as in calimatch"
    }

    fn apply(&self, config: &mut TrainConfig) {
        config.disable_mcal = true;
        config.disable_ocal = true;
        config.disable_ood_head = false;
        config.disable_fix = false;
    }
}

struct Fixmatch;

impl Preset for Fixmatch {
    fn name(&self) -> &'static str {
        "fixmatch"
    }

    fn describe(&self) -> &'static str {
        "confidence-gated pseudo-labeling only: no rejection head, no calibration"
    }

    fn apply(&self, config: &mut TrainConfig) {
        config.disable_mcal = true;
        config.disable_ocal = true;
        config.disable_ood_head = true;
        config.disable_fix = false;
    }
}

struct Supervised;

impl Preset for Supervised {
    fn name(&self) -> &'static str {
        "supervised"
    }

    fn describe(&self) -> &'static str {
        "labeled cross-entropy only"
    }

    fn apply(&self, config: &mut TrainConfig) {
        config.disable_mcal = true;
        config.disable_ocal = true;
        config.disable_ood_head = true;
        config.disable_fix = true;
    }
}

/// All registered presets.
pub fn preset_registry() -> &'static [&'static dyn Preset] {
    static REGISTRY: [&dyn Preset; 4] = [&Calimatch, &Openmatch, &Fixmatch, &Supervised];
    &REGISTRY
}

pub fn preset_names() -> Vec<&'static str> {
    preset_registry().iter().map(|p| p.name()).collect()
}

/// Apply a preset by name; unknown names list the valid ones.
pub fn apply_preset(name: &str, config: &mut TrainConfig) -> Result<()> {
    for preset in preset_registry() {
        if preset.name() == name {
            preset.apply(config);
            return Ok(());
        }
    }
    Err(Error::config(format!(
        "unknown preset '{name}'; valid presets: {}",
        preset_names().join(", ")
    )))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_set_the_expected_flags() {
        let mut c = TrainConfig::default();
        apply_preset("openmatch", &mut c).unwrap();
        assert!(c.disable_mcal && c.disable_ocal);
        assert!(!c.disable_ood_head && !c.disable_fix);

        apply_preset("fixmatch", &mut c).unwrap();
        assert!(c.disable_mcal && c.disable_ocal && c.disable_ood_head);
        assert!(!c.disable_fix);

        apply_preset("supervised", &mut c).unwrap();
        assert!(c.disable_fix);

        apply_preset("calimatch", &mut c).unwrap();
        assert!(!c.disable_mcal && !c.disable_ocal && !c.disable_ood_head && !c.disable_fix);
    }

    #[test]
    fn unknown_preset_lists_the_valid_ones() {
        let mut c = TrainConfig::default();
        let err = apply_preset("mixmatch", &mut c).unwrap_err();
        let msg = err.to_string();
        for name in ["calimatch", "openmatch", "fixmatch", "supervised"] {
            assert!(msg.contains(name), "{msg}");
        }
    }
}
