//! Declarative run configuration.
//!
//! A single TOML document whose field names mirror the library types
//! (`TestConfig`, `PolicyConfig`, `SynthSpec`), merged with command-line
//! overrides and the `OWRA_SEED` environment variable. Precedence per value:
//! flag > config file > environment > built-in default.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use owra_core::dist_stats::FitMethod;
use owra_core::policy::{OndParams, PolicyVariant};
use owra_core::testbed::{SynthSpec, TestConfig};

use crate::commands::CliError;

/// Seed used when neither flags, config, nor `OWRA_SEED` provide one.
pub const DEFAULT_SEED: u64 = 0;

/// Validation runs (threshold selection) perturb the root seed so that
/// validation and evaluation trials never share sequences.
pub const VALIDATION_SEED_XOR: u64 = 0x5a5a;

/// Raw config file contents; everything optional.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FileConfig {
    pub seed: Option<u64>,
    /// `raw_moments` or `truncated_moment_match`.
    pub fit_method: Option<FitMethod>,
    /// Calibration sample size drawn from the pools.
    pub calibration_sample: Option<usize>,
    /// Phase-2 unknown percentages to evaluate.
    pub unknown_pcts: Option<Vec<u32>>,
    pub test: TestSection,
    pub policies: PoliciesSection,
    pub ond: Option<OndParams>,
    pub pools: PoolsSection,
}

/// Mirrors the seed-free part of `TestConfig`.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TestSection {
    pub total_images: Option<usize>,
    pub phase1_len: Option<usize>,
    pub phase1_unknowns: Option<usize>,
    pub batch_size: Option<usize>,
    pub trials: Option<usize>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PoliciesSection {
    /// Policies to run; defaults to all five.
    pub enabled: Option<Vec<PolicyVariant>>,
    /// Threshold-selection regime: `max-true-detection`,
    /// `max-total-accuracy`, or `false-cap:<pct>`.
    pub regime: Option<String>,
    /// Unknown percentage of the validation runs used for selection.
    pub validation_pct: Option<u32>,
    pub validation_trials: Option<usize>,
    /// Explicit tolerances by policy name; policies listed here skip the
    /// validation sweep.
    pub tolerances: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PoolsSection {
    /// Score CSV with `is_unknown` flags; when absent, pools are synthetic.
    pub file: Option<PathBuf>,
    /// Full synthetic pool spec; when absent, library defaults.
    pub synth: Option<SynthSpec>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<FileConfig, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text)
            .map_err(|e| CliError::usage(format!("bad config {}: {e}", path.display())))
    }
}

/// Command-line overrides shared by the experiment commands.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub fit: Option<FitMethod>,
    pub trials: Option<usize>,
    pub batch_size: Option<usize>,
    pub policies: Option<Vec<PolicyVariant>>,
    pub pcts: Option<Vec<u32>>,
    pub pools_file: Option<PathBuf>,
    pub validation_pct: Option<u32>,
    pub regime: Option<String>,
}

/// Fully resolved settings; serialized verbatim into the run manifest as the
/// effective configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSettings {
    pub seed: u64,
    pub fit_method: FitMethod,
    pub calibration_sample: usize,
    pub unknown_pcts: Vec<u32>,
    pub total_images: usize,
    pub phase1_len: usize,
    pub phase1_unknowns: usize,
    pub batch_size: usize,
    pub trials: usize,
    pub policies: Vec<PolicyVariant>,
    pub regime: String,
    pub validation_pct: u32,
    pub validation_trials: usize,
    pub tolerances: BTreeMap<String, f64>,
    pub ond: OndParams,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pools_file: Option<PathBuf>,
    pub synth: SynthSpec,
}

impl RunSettings {
    /// `TestConfig` at one unknown percentage under these settings.
    pub fn test_config(&self, pct: u32) -> TestConfig {
        TestConfig {
            total_images: self.total_images,
            phase1_len: self.phase1_len,
            phase1_unknowns: self.phase1_unknowns,
            phase2_unknown_pct: pct,
            batch_size: self.batch_size,
            trials: self.trials,
            seed: self.seed,
        }
    }

    /// Validation `TestConfig` used for threshold selection.
    pub fn validation_config(&self) -> TestConfig {
        TestConfig {
            trials: self.validation_trials,
            seed: self.seed ^ VALIDATION_SEED_XOR,
            ..self.test_config(self.validation_pct)
        }
    }
}

fn seed_from_env() -> Result<Option<u64>, CliError> {
    match std::env::var("OWRA_SEED") {
        Err(_) => Ok(None),
        Ok(v) => v
            .parse::<u64>()
            .map(Some)
            .map_err(|_| CliError::usage(format!("OWRA_SEED must be an unsigned integer, got {v:?}"))),
    }
}

/// Merge a config file with command-line overrides into effective settings.
pub fn resolve(file: &FileConfig, ov: &Overrides) -> Result<RunSettings, CliError> {
    let seed = match (ov.seed, file.seed) {
        (Some(s), _) => s,
        (None, Some(s)) => s,
        (None, None) => seed_from_env()?.unwrap_or(DEFAULT_SEED),
    };
    let trials = ov.trials.or(file.test.trials).unwrap_or(200);
    let settings = RunSettings {
        seed,
        fit_method: ov.fit.or(file.fit_method).unwrap_or_default(),
        calibration_sample: file.calibration_sample.unwrap_or(20_000),
        unknown_pcts: ov
            .pcts
            .clone()
            .or_else(|| file.unknown_pcts.clone())
            .unwrap_or_else(|| vec![2, 3, 5, 8, 12, 18, 25]),
        total_images: file.test.total_images.unwrap_or(4000),
        phase1_len: file.test.phase1_len.unwrap_or(2000),
        phase1_unknowns: file.test.phase1_unknowns.unwrap_or(20),
        batch_size: ov.batch_size.or(file.test.batch_size).unwrap_or(100),
        trials,
        policies: ov
            .policies
            .clone()
            .or_else(|| file.policies.enabled.clone())
            .unwrap_or_else(|| PolicyVariant::ALL.to_vec()),
        regime: ov
            .regime
            .clone()
            .or_else(|| file.policies.regime.clone())
            .unwrap_or_else(|| "max-true-detection".to_string()),
        validation_pct: ov.validation_pct.or(file.policies.validation_pct).unwrap_or(2),
        validation_trials: file.policies.validation_trials.unwrap_or(trials),
        tolerances: file.policies.tolerances.clone(),
        ond: file.ond.unwrap_or_default(),
        pools_file: ov.pools_file.clone().or_else(|| file.pools.file.clone()),
        synth: file.pools.synth.clone().unwrap_or_default(),
    };
    if settings.unknown_pcts.is_empty() {
        return Err(CliError::usage("unknown_pcts must be nonempty"));
    }
    if settings.policies.is_empty() {
        return Err(CliError::usage("policies must be nonempty"));
    }
    for name in settings.tolerances.keys() {
        name.parse::<PolicyVariant>()
            .map_err(|e| CliError::usage(format!("tolerances: {e}")))?;
    }
    settings
        .regime
        .parse::<owra_core::testbed::SelectionRegime>()
        .map_err(|e| CliError::usage(e.to_string()))?;
    Ok(settings)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_without_config() {
        let s = resolve(&FileConfig::default(), &Overrides::default()).unwrap();
        assert_eq!(s.trials, 200);
        assert_eq!(s.batch_size, 100);
        assert_eq!(s.policies.len(), 5);
        assert_eq!(s.unknown_pcts, vec![2, 3, 5, 8, 12, 18, 25]);
        assert_eq!(s.validation_pct, 2);
    }

    #[test]
    fn flag_beats_file() {
        let file = FileConfig {
            seed: Some(7),
            ..FileConfig::default()
        };
        let ov = Overrides {
            seed: Some(9),
            ..Overrides::default()
        };
        assert_eq!(resolve(&file, &ov).unwrap().seed, 9);
        assert_eq!(resolve(&file, &Overrides::default()).unwrap().seed, 7);
    }

    #[test]
    fn toml_round_trip() {
        let text = r#"
            seed = 42
            fit_method = "raw_moments"
            unknown_pcts = [2, 5]

            [test]
            trials = 10
            batch_size = 50

            [policies]
            enabled = ["kl-evm", "ond"]
            regime = "false-cap:1"

            [policies.tolerances]
            kl-evm = 0.5

            [ond]
            delta = 0.4
            rho_hat = 0.02
        "#;
        let file: FileConfig = toml::from_str(text).unwrap();
        let s = resolve(&file, &Overrides::default()).unwrap();
        assert_eq!(s.seed, 42);
        assert_eq!(s.fit_method, FitMethod::RawMoments);
        assert_eq!(s.trials, 10);
        assert_eq!(s.batch_size, 50);
        assert_eq!(s.policies, vec![PolicyVariant::KlEvm, PolicyVariant::Ond]);
        assert_eq!(s.tolerances["kl-evm"], 0.5);
        assert_eq!(s.ond.delta, 0.4);
        assert_eq!(s.validation_trials, 10);
    }

    #[test]
    fn unknown_key_rejected() {
        assert!(toml::from_str::<FileConfig>("sseed = 1").is_err());
    }

    #[test]
    fn bad_regime_rejected() {
        let file = FileConfig {
            policies: PoliciesSection {
                regime: Some("maximize-vibes".into()),
                ..PoliciesSection::default()
            },
            ..FileConfig::default()
        };
        assert!(resolve(&file, &Overrides::default()).is_err());
    }
}
