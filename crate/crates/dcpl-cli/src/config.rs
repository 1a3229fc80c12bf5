//! Resolved run configuration: defaults, then an optional JSON file, then flags.

use std::path::{Path, PathBuf};

use clap::ValueEnum;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum OutputFormat {
    Json,
    Csv,
    BinaryField,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub subcommand: String,
    #[serde(rename = "R")]
    pub r: u64,
    #[serde(rename = "R_list")]
    pub r_list: Vec<u64>,
    pub families: Vec<String>,
    pub beta: f64,
    pub p: f64,
    pub q: f64,
    /// Explicit amplitudes; empty selects the quantile or the default grid.
    pub alpha: Vec<f64>,
    pub alpha_quantile: f64,
    pub cp: f64,
    pub sigma: usize,
    pub kappa_near: f64,
    pub kappa_dichotomy: f64,
    pub kappa_domination: f64,
    pub level: usize,
    /// `caps` lists the small caps for `beta` instead of a ladder level.
    pub small_caps: bool,
    pub nodes: usize,
    pub perturb: usize,
    pub seed: u64,
    pub output: Option<PathBuf>,
    pub format: OutputFormat,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            subcommand: String::new(),
            r: 256,
            r_list: Vec::new(),
            families: vec!["random_phase".into()],
            beta: 0.5,
            p: 4.0,
            q: 4.0,
            alpha: Vec::new(),
            alpha_quantile: 0.5,
            cp: dcpl_core::pruning::DEFAULT_CP,
            sigma: 4,
            kappa_near: 1.0,
            kappa_dichotomy: 1.0,
            kappa_domination: 10.0,
            level: 1,
            small_caps: false,
            nodes: 10_000,
            perturb: 0,
            seed: 7,
            output: None,
            format: OutputFormat::Json,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| format!("invalid config {}: {e}", path.display()))
    }

    /// `R_list` when given, otherwise the single `R`.
    pub fn rs(&self) -> Vec<u64> {
        if self.r_list.is_empty() {
            vec![self.r]
        } else {
            self.r_list.clone()
        }
    }
}

/// Overwrites `dst` when the flag was given.
pub fn set<T>(dst: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *dst = v;
    }
}

/// Overwrites `dst` when the list flag is non-empty.
pub fn set_list<T: Clone>(dst: &mut Vec<T>, flag: &[T]) {
    if !flag.is_empty() {
        *dst = flag.to_vec();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_config_keeps_defaults() {
        let cfg: RunConfig = serde_json::from_str(r#"{"R": 1024, "families": ["flat"]}"#).unwrap();
        assert_eq!(cfg.r, 1024);
        assert_eq!(cfg.families, vec!["flat".to_string()]);
        assert_eq!(cfg.sigma, 4);
        assert_eq!(cfg.rs(), vec![1024]);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"radius": 3}"#).is_err());
    }

    #[test]
    fn round_trip() {
        let cfg = RunConfig {
            format: OutputFormat::BinaryField,
            ..RunConfig::default()
        };
        let back: RunConfig = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }
}
