//! Run configuration: one declarative TOML file; defaults mirror the
//! recommended certification settings so a minimal config exercises them
//! verbatim.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

use certkit::data::model::ModelAdapter;
use certkit::data::OperatingRange;
use certkit::lipschitz::LayerSpec;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub dataset: Option<DatasetConfig>,
    /// Operating range per content dimension (required by the ood suite).
    #[serde(default)]
    pub range: Option<RangeConfig>,
    #[serde(default)]
    pub adapter: Option<ModelAdapter>,
    #[serde(default)]
    pub suites: SuiteSelection,
    #[serde(default)]
    pub params: Params,
    #[serde(default)]
    pub lipschitz: Option<LipschitzConfig>,
    #[serde(default)]
    pub simstudy: SimstudyConfig,
    /// Desk-scale toy training for the disentanglement suite; when enabled
    /// the suite trains on generated pairs instead of reading dataset
    /// latents.
    #[serde(default)]
    pub toy: Option<ToyConfig>,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("certkit-out")
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub path: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RangeConfig {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl RangeConfig {
    pub fn to_range(&self) -> anyhow::Result<OperatingRange> {
        Ok(OperatingRange::new(self.lo.clone(), self.hi.clone())?)
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteSelection {
    #[serde(default)]
    pub calibration: bool,
    #[serde(default)]
    pub disentanglement: bool,
    #[serde(default)]
    pub generalization: bool,
    #[serde(default)]
    pub ood: bool,
    #[serde(default)]
    pub lipschitz: bool,
    #[serde(default)]
    pub simstudy: bool,
}


#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Params {
    #[serde(default = "d_eps")]
    pub eps: f64,
    #[serde(default = "d_significance")]
    pub significance_level: f64,
    #[serde(default = "d_tau_ood")]
    pub tau_ood: f64,
    #[serde(default = "d_n_min")]
    pub n_min: usize,
    #[serde(default = "d_delta")]
    pub delta: f64,
    #[serde(default = "d_margin")]
    pub margin: f64,
    #[serde(default = "d_n_repeat")]
    pub n_repeat: usize,
    #[serde(default = "d_train_fraction")]
    pub train_fraction: f64,
    #[serde(default = "d_p_fail")]
    pub p_fail: f64,
    #[serde(default = "d_thresh")]
    pub thresh: f64,
    #[serde(default)]
    pub pairwise_conditioning: bool,
    /// Content dimension for the feature-collapse check; requires an
    /// encoder-capable adapter.
    #[serde(default)]
    pub collapse_content_index: Option<usize>,
    /// Reject threshold for the ood suite: maximum tolerated fraction of
    /// flagged records (1.0 = informational).
    #[serde(default = "d_one")]
    pub max_ood_fraction: f64,
    /// Latent-variance threshold for the ensemble-disagreement report;
    /// unset skips the report. Never tune this on labeled OOD data.
    #[serde(default)]
    pub disagreement_tau: Option<f64>,
    #[serde(default = "d_rate")]
    pub expected_fp_rate: f64,
    #[serde(default = "d_rate")]
    pub expected_fn_rate: f64,
}

fn d_rate() -> f64 {
    0.05
}

fn d_eps() -> f64 {
    0.10
}
fn d_significance() -> f64 {
    0.05
}
fn d_tau_ood() -> f64 {
    0.15
}
fn d_n_min() -> usize {
    10_000
}
fn d_delta() -> f64 {
    0.2
}
fn d_margin() -> f64 {
    0.1
}
fn d_n_repeat() -> usize {
    20
}
fn d_train_fraction() -> f64 {
    0.80
}
fn d_p_fail() -> f64 {
    0.01
}
fn d_thresh() -> f64 {
    0.001
}
fn d_one() -> f64 {
    1.0
}

impl Default for Params {
    fn default() -> Self {
        toml::from_str("").expect("defaults")
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LipschitzConfig {
    pub layers: Vec<LayerSpec>,
    #[serde(default)]
    pub min_lower: Option<f64>,
    #[serde(default)]
    pub max_upper: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimstudyConfig {
    #[serde(default = "default_n_grid")]
    pub n_grid: Vec<usize>,
    #[serde(default = "default_eps_grid")]
    pub eps_grid: Vec<f64>,
    #[serde(default = "default_n_trials")]
    pub n_trials: usize,
    #[serde(default = "d_target_failure")]
    pub target_failure: f64,
    /// Which eps the sample-size recommendation is made for.
    #[serde(default = "d_eps")]
    pub recommend_eps: f64,
}

fn default_n_grid() -> Vec<usize> {
    vec![10, 100, 1_000, 10_000, 100_000]
}
fn default_eps_grid() -> Vec<f64> {
    vec![0.05, 0.10, 0.20]
}
fn default_n_trials() -> usize {
    100
}
fn d_target_failure() -> f64 {
    0.01
}

impl Default for SimstudyConfig {
    fn default() -> Self {
        toml::from_str("").expect("defaults")
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyConfig {
    #[serde(default = "d_toy_pairs")]
    pub n_pairs: usize,
    #[serde(default = "d_toy_k")]
    pub content_dims: usize,
    #[serde(default = "d_toy_l")]
    pub style_dims: usize,
    /// Latent style dimensions; chosen larger than the obvious style count.
    #[serde(default)]
    pub latent_style_dims: Option<usize>,
    /// Observation dimension. Needs to be generous: with few Bernoulli
    /// output dimensions the reconstruction term cannot pay the KL cost of
    /// informative latents and the posterior collapses.
    #[serde(default = "d_toy_input_dim")]
    pub input_dim: usize,
    #[serde(default = "d_toy_noise")]
    pub noise_sd: f64,
    #[serde(default = "d_toy_epochs")]
    pub epochs: usize,
    #[serde(default = "d_toy_lr")]
    pub learning_rate: f64,
    #[serde(default = "d_toy_eval")]
    pub n_eval: usize,
}

fn d_toy_input_dim() -> usize {
    60
}
fn d_toy_noise() -> f64 {
    0.15
}

fn d_toy_pairs() -> usize {
    2_000
}
fn d_toy_k() -> usize {
    2
}
fn d_toy_l() -> usize {
    1
}
fn d_toy_epochs() -> usize {
    8_000
}
fn d_toy_lr() -> f64 {
    1e-2
}
fn d_toy_eval() -> usize {
    500
}

/// Parses and validates a config file; all referenced paths must exist and
/// parameters must lie in their documented domains.
pub fn load_config(path: &Path) -> anyhow::Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read config {}", path.display()))?;
    let config: RunConfig = toml::from_str(&text).context("cannot parse config")?;
    validate(&config)?;
    Ok(config)
}

pub fn validate(config: &RunConfig) -> anyhow::Result<()> {
    let p = &config.params;
    if !(0.0..1.0).contains(&p.eps) {
        bail!("params.eps must be in [0,1), got {}", p.eps);
    }
    if !(p.significance_level > 0.0 && p.significance_level < 1.0) {
        bail!("params.significance_level must be in (0,1)");
    }
    if !(p.tau_ood > 0.0 && p.tau_ood < 1.0) {
        bail!("params.tau_ood must be in (0,1)");
    }
    if p.n_min < 1 {
        bail!("params.n_min must be >= 1");
    }
    if !(p.delta > 0.0) {
        bail!("params.delta must be > 0");
    }
    if !(p.train_fraction > 0.0 && p.train_fraction < 1.0) {
        bail!("params.train_fraction must be in (0,1)");
    }
    if !(0.0..=1.0).contains(&p.p_fail) || !(0.0..=1.0).contains(&p.thresh) {
        bail!("params.p_fail and params.thresh must be probabilities");
    }
    if let Some(ds) = &config.dataset {
        if !ds.path.exists() {
            bail!("dataset path {} does not exist", ds.path.display());
        }
    }
    if let Some(r) = &config.range {
        r.to_range()?;
    }
    if let Some(a) = &config.adapter {
        a.validate()?;
    }
    let needs_dataset = config.suites.calibration
        || config.suites.generalization
        || config.suites.ood
        || (config.suites.disentanglement && config.toy.is_none());
    if needs_dataset && config.dataset.is_none() {
        bail!("enabled suites need a [dataset] section");
    }
    if config.suites.lipschitz && config.lipschitz.is_none() {
        bail!("the lipschitz suite needs a [lipschitz] section with layers");
    }
    if config.suites.ood && config.range.is_none() {
        bail!("the ood suite needs a [range] section");
    }
    Ok(())
}
