//! Experiment configuration: TOML on disk, JSON for tooling.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use rase_core::estimators::ExtractOptions;
use rase_core::model::{linspace, DecayScaling};
use rase_core::synth::{NoiseModel, SequenceConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

pub const CONFIG_FORMAT_VERSION: u32 = 1;

/// The shipped defaults, reproducing the published experiment.
pub const PAPER_DEFAULTS: &str = include_str!("../configs/paper_defaults.toml");

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grid {
    pub start: f64,
    pub stop: f64,
    pub points: usize,
}

impl Grid {
    pub fn values(&self) -> Vec<f64> {
        linspace(self.start, self.stop, self.points)
    }

    fn validate(&self, name: &str, lo: f64, hi: f64) -> CliResult<()> {
        let ok = self.points >= 1
            && self.start.is_finite()
            && self.stop.is_finite()
            && self.start <= self.stop
            && self.start >= lo
            && self.stop <= hi;
        if !ok {
            return Err(CliError::Config(format!(
                "{name}: need {lo} <= start <= stop <= {hi} and points >= 1, got {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisOptions {
    pub b_grid: Grid,
    pub alpha_grid: Grid,
    pub extract: ExtractOptions,
    pub bootstrap: bool,
    pub bootstrap_resamples: usize,
    pub bootstrap_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Transition {
    pub ground: String,
    pub excited: String,
    pub strength: f64,
}

/// Hyperfine labels and relative oscillator strengths. Metadata only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LevelScheme {
    pub ground: Vec<String>,
    pub excited: Vec<String>,
    pub transitions: Vec<Transition>,
}

impl LevelScheme {
    pub fn validate(&self) -> CliResult<()> {
        let mut seen = HashSet::new();
        for label in self.ground.iter().chain(&self.excited) {
            if !seen.insert(label) {
                return Err(CliError::Config(format!("level_scheme: duplicate label '{label}'")));
            }
        }
        let mut pairs = HashSet::new();
        for t in &self.transitions {
            if !self.ground.contains(&t.ground) || !self.excited.contains(&t.excited) {
                return Err(CliError::Config(format!(
                    "level_scheme: transition {}-{} uses an undeclared level",
                    t.ground, t.excited
                )));
            }
            if !(t.strength > 0.0 && t.strength <= 1.0) {
                return Err(CliError::Config(format!(
                    "level_scheme: strength {} of {}-{} must lie in (0, 1]",
                    t.strength, t.ground, t.excited
                )));
            }
            if !pairs.insert((&t.ground, &t.excited)) {
                return Err(CliError::Config(format!("level_scheme: transition {}-{} listed twice", t.ground, t.excited)));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub format_version: u32,
    pub output_dir: PathBuf,
    /// Timeline, gain feature (`[sequence.gain]`) and run size.
    pub sequence: SequenceConfig,
    pub noise: NoiseModel,
    pub decay: DecayScaling,
    pub analysis: AnalysisOptions,
    pub level_scheme: LevelScheme,
}

impl ExperimentConfig {
    pub fn paper_defaults() -> Self {
        Self::from_toml_str(PAPER_DEFAULTS).expect("shipped defaults parse")
    }

    pub fn from_toml_str(text: &str) -> CliResult<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json_str(text: &str) -> CliResult<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads TOML, or JSON when the file name ends in `.json`.
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let parsed = if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json")) {
            Self::from_json_str(&text)
        } else {
            Self::from_toml_str(&text)
        };
        parsed.map_err(|e| match e {
            CliError::Config(msg) => CliError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> CliResult<String> {
        toml::to_string(self).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn to_json_string(&self) -> CliResult<String> {
        serde_json::to_string_pretty(self).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn validate(&self) -> CliResult<()> {
        if self.format_version != CONFIG_FORMAT_VERSION {
            return Err(CliError::Config(format!(
                "config format_version {} is not supported (expected {CONFIG_FORMAT_VERSION})",
                self.format_version
            )));
        }
        let ctx = |section: &'static str| move |e: rase_core::Error| CliError::Config(format!("[{section}] {e}"));
        self.sequence.validate().map_err(ctx("sequence"))?;
        self.noise.validate().map_err(ctx("noise"))?;
        self.decay.validate().map_err(ctx("decay"))?;
        self.analysis.extract.windows(&self.sequence).map_err(ctx("analysis.extract"))?;
        if !(self.analysis.extract.span_hz > 0.0) {
            return Err(CliError::Config("[analysis.extract] span_hz must be > 0".into()));
        }
        self.analysis.b_grid.validate("analysis.b_grid", 0.0, 1.0)?;
        self.analysis.alpha_grid.validate("analysis.alpha_grid", 0.0, 50.0)?;
        if self.analysis.bootstrap && self.analysis.bootstrap_resamples < 2 {
            return Err(CliError::Config("analysis.bootstrap_resamples must be >= 2".into()));
        }
        self.level_scheme.validate()
    }

    /// SHA-256 of the canonical JSON form, ignoring where outputs are written.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        let json = serde_json::to_vec(&c).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_carry_published_parameters() {
        let c = ExperimentConfig::paper_defaults();
        assert_eq!(c.sequence, SequenceConfig::default());
        assert_eq!(c.noise, NoiseModel::default());
        assert_eq!(c.decay, DecayScaling::default());
        assert_eq!(c.analysis.extract, ExtractOptions::default());
        assert_eq!(c.sequence.gain.transmission_l, 0.11);
        assert_eq!(c.decay.tau_us, 59.2);
        assert_eq!(c.sequence.tau_s_us, 5.0);
        assert_eq!(c.level_scheme.transitions.len(), 5);
        assert_eq!(c.analysis.alpha_grid.values()[10], 1.0);
    }

    #[test]
    fn unknown_keys_are_rejected_with_location() {
        let text = PAPER_DEFAULTS.replace("tau_us = 59.2", "tau_us = 59.2\ntua_us = 1.0");
        let err = ExperimentConfig::from_toml_str(&text).unwrap_err().to_string();
        assert!(err.contains("tua_us"), "{err}");
        assert!(err.contains("line"), "{err}");
    }

    #[test]
    fn nested_invariants_are_checked_on_load() {
        let bad = PAPER_DEFAULTS.replace("transmission_l = 0.11", "transmission_l = 1.5");
        assert!(matches!(ExperimentConfig::from_toml_str(&bad), Err(CliError::Config(_))));
        let bad = PAPER_DEFAULTS.replace("strength = 0.05", "strength = 0.0");
        assert!(matches!(ExperimentConfig::from_toml_str(&bad), Err(CliError::Config(_))));
        let bad = PAPER_DEFAULTS.replace("format_version = 1", "format_version = 2");
        assert!(matches!(ExperimentConfig::from_toml_str(&bad), Err(CliError::Config(_))));
    }

    #[test]
    fn hash_ignores_output_dir_only() {
        let a = ExperimentConfig::paper_defaults();
        let mut b = a.clone();
        b.output_dir = "elsewhere".into();
        assert_eq!(a.hash(), b.hash());
        b.sequence.rng_seed += 1;
        assert_ne!(a.hash(), b.hash());
    }
}
