//! JSON run configurations. Every field is optional; command-line flags take
//! precedence over the file, and unknown keys are rejected.

use std::path::{Path, PathBuf};

use isnn::gate::GateConfig;
use serde::de::DeserializeOwned;
use serde::Deserialize;

use crate::Failure;

/// Reads a config file, or the default when no path is given.
pub fn load<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T, Failure> {
    let Some(path) = path else { return Ok(T::default()) };
    let text = std::fs::read_to_string(path).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))
}

/// The flag if given, else the file value.
pub fn pick<T>(flag: Option<T>, file: Option<T>) -> Option<T> {
    flag.or(file)
}

pub fn require<T>(value: Option<T>, name: &str) -> Result<T, Failure> {
    value.ok_or_else(|| Failure::Config(format!("missing required setting `{name}`")))
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenFile {
    pub n: Option<usize>,
    pub nf: Option<usize>,
    pub lo: Option<f64>,
    pub hi: Option<f64>,
    pub delta: Option<f64>,
    pub mu_grid: Option<usize>,
    pub beta_grid: Option<usize>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainFile {
    pub arch: Option<String>,
    pub dataset: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub epochs: Option<usize>,
    pub lr: Option<f64>,
    pub seeds: Option<usize>,
    pub width: Option<usize>,
    pub layers: Option<usize>,
    pub log_every: Option<usize>,
    pub jobs: Option<usize>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifyFile {
    pub arch: Option<String>,
    pub trials: Option<usize>,
    pub deriv_trials: Option<usize>,
    pub seed: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchFile {
    pub sizes: Option<Vec<usize>>,
    pub repeats: Option<usize>,
    pub seeds: Option<usize>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GateFile {
    pub dataset: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub training: Option<GateConfig>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InvertFile {
    pub model: Option<PathBuf>,
    pub targets: Option<PathBuf>,
    pub bounds: Option<Vec<[f64; 2]>>,
    pub seeds: Option<usize>,
    pub sigma0: Option<f64>,
    pub max_evals: Option<usize>,
    pub jobs: Option<usize>,
    pub out: Option<PathBuf>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<TrainFile>(r#"{"epochs": 5, "epoch": 5}"#).is_err());
        assert!(serde_json::from_str::<GateFile>(r#"{"training": {"epochs": 5, "bogus": 1}}"#).is_err());
        let t: TrainFile = serde_json::from_str(r#"{"epochs": 5}"#).unwrap();
        assert_eq!(pick(Some(7), t.epochs), Some(7));
        assert_eq!(pick(None, t.epochs), Some(5));
    }
}
