//! Run configuration file and flag/config/default resolution.

use std::path::{Path, PathBuf};

use clap::parser::ValueSource;
use clap::ArgMatches;
use maxent::gp::KernelFamily;
use serde::Deserialize;

use crate::CliError;

/// Seed as given on the command line or in the config: a number or `auto`.
#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
#[serde(untagged)]
pub enum SeedValue {
    Number(u64),
    Text(String),
}

/// JSON config file; every field is optional and flags override it.
#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub n_moments: Option<usize>,
    pub v_min: Option<f64>,
    pub v_max: Option<f64>,
    pub quad_order: Option<usize>,
    pub b: Option<f64>,
    pub lambda_box: Option<Vec<[f64; 2]>>,
    pub omega_p: Option<Vec<[f64; 2]>>,
    pub epsilon: Option<f64>,
    pub max_rejections: Option<usize>,
    pub count: Option<usize>,
    pub kernel: Option<KernelFamily>,
    pub data: Option<PathBuf>,
    pub test_data: Option<PathBuf>,
    pub models: Option<Vec<PathBuf>>,
    pub out: Option<PathBuf>,
    pub seed: Option<SeedValue>,
    pub threads: Option<usize>,
    pub m_train: Option<usize>,
    pub starts: Option<usize>,
    pub max_iters: Option<usize>,
    pub repeats: Option<usize>,
    pub noise: Option<f64>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))
    }
}

/// The flag value if it was given explicitly, else the config value, else the
/// flag's built-in default.
pub fn pick<T>(m: &ArgMatches, id: &str, flag: T, config: Option<T>) -> T {
    match m.value_source(id) {
        Some(ValueSource::CommandLine) => flag,
        _ => config.unwrap_or(flag),
    }
}

/// Resolves `--seed`; stochastic commands refuse to run without one.
pub fn resolve_seed(flag: Option<&str>, config: Option<&SeedValue>) -> Result<u64, CliError> {
    let text = match (flag, config) {
        (Some(s), _) => s.to_string(),
        (None, Some(SeedValue::Number(n))) => return Ok(*n),
        (None, Some(SeedValue::Text(s))) => s.clone(),
        (None, None) => {
            return Err(CliError::Usage(
                "this command is stochastic: pass --seed <u64> or --seed auto".into(),
            ))
        }
    };
    if text == "auto" {
        let seed = rand::random::<u64>();
        log::warn!("using automatically chosen seed {seed}");
        return Ok(seed);
    }
    text.parse()
        .map_err(|_| CliError::Usage(format!("invalid seed '{text}': expected an unsigned integer or 'auto'")))
}

/// Parses a comma-separated list of numbers.
pub fn parse_list<T: std::str::FromStr>(text: &str, what: &str) -> Result<Vec<T>, CliError> {
    text.split(',')
        .map(|s| s.trim())
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse()
                .map_err(|_| CliError::Usage(format!("invalid {what} '{s}' in '{text}'")))
        })
        .collect()
}
