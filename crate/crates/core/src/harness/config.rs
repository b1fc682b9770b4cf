//! Experiment configuration.
//!
//! Config files are TOML; flat `section.key = value` lines work as dotted
//! keys. Any field can be overridden with `key=value` strings, where the
//! value is parsed as a TOML literal and falls back to a plain string.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::baselines::MfConfig;
use crate::error::{Error, Result};
use crate::events::{self, CsvFormat, Day, EventLog, TemporalSplit};
use crate::hcf::HcfConfig;
use crate::params::OptimizerKind;
use crate::synthetic::{self, SyntheticConfig};
use crate::training::FitConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Historical,
    MfImplicit,
    MfBpr,
    Hcf,
}

impl ModelKind {
    pub fn tag(self) -> &'static str {
        match self {
            ModelKind::Historical => "historical",
            ModelKind::MfImplicit => "mf_implicit",
            ModelKind::MfBpr => "mf_bpr",
            ModelKind::Hcf => "hcf",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        [
            ModelKind::Historical,
            ModelKind::MfImplicit,
            ModelKind::MfBpr,
            ModelKind::Hcf,
        ]
        .into_iter()
        .find(|k| k.tag() == s)
        .ok_or_else(|| Error::Config(format!("unknown model kind `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceKind {
    Csv,
    Synthetic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: SourceKind,
    pub csv_path: String,
    pub csv_format: CsvFormat,
    pub synthetic: SyntheticConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: SourceKind::Synthetic,
            csv_path: String::new(),
            csv_format: CsvFormat::default(),
            synthetic: SyntheticConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    /// Last training day; windows end here during validation.
    pub train_end: Day,
    pub valid: (Day, Day),
    pub test: (Day, Day),
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            train_end: 299,
            valid: (300, 329),
            test: (330, 359),
        }
    }
}

impl SplitConfig {
    pub fn to_split(&self) -> Result<TemporalSplit> {
        TemporalSplit::new((0, self.train_end), self.valid, self.test)
    }
}

/// Full-batch gradient descent settings for the implicit-feedback factorization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ImplicitFitConfig {
    pub lr: f64,
    pub patience: usize,
    pub max_epochs: usize,
}

impl Default for ImplicitFitConfig {
    fn default() -> Self {
        ImplicitFitConfig {
            lr: 5e-5,
            patience: 5,
            max_epochs: 100,
        }
    }
}

/// Ranges sampled by the random hyperparameter search.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchConfig {
    pub model: ModelKind,
    pub trials: usize,
    pub window_days: u32,
    /// Log-uniform.
    pub lr: (f64, f64),
    /// Log-uniform; L2 for factorizations, embedding decay for HCF.
    pub lambda: (f64, f64),
    pub d: (usize, usize),
    pub n: (usize, usize),
    pub hidden_width: (usize, usize),
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            model: ModelKind::Hcf,
            trials: 10,
            window_days: 90,
            lr: (1e-3, 5e-2),
            lambda: (1e-6, 1e-2),
            d: (8, 48),
            n: (5, 40),
            hidden_width: (4, 16),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub models: Vec<ModelKind>,
    pub window_sizes_days: Vec<u32>,
    /// Training window of the sliding study; 0 uses each model's best validation window.
    pub sliding_window_days: u32,
    /// Start each sliding retrain from the previous day's parameters.
    pub slide_warm_start: bool,
    /// Training window of the `train` subcommand; 0 uses every day up to `split.train_end`.
    pub train_window_days: u32,
    /// Record wall-clock seconds in outputs (breaks byte-identical reruns).
    pub timings: bool,
    pub ewma_alpha: f64,
    pub data: DataConfig,
    pub split: SplitConfig,
    pub hcf: HcfConfig,
    pub hcf_fit: FitConfig,
    pub mf_bpr: MfConfig,
    pub mf_bpr_fit: FitConfig,
    /// History capacity defining the negative sampler's exclusion sets for MF-BPR.
    pub mf_bpr_sampler_n: usize,
    pub mf_implicit: MfConfig,
    pub mf_implicit_fit: ImplicitFitConfig,
    pub search: SearchConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 1,
            models: vec![
                ModelKind::Historical,
                ModelKind::MfImplicit,
                ModelKind::MfBpr,
                ModelKind::Hcf,
            ],
            window_sizes_days: vec![7, 30, 60, 90, 180, 365],
            sliding_window_days: 0,
            slide_warm_start: false,
            train_window_days: 0,
            timings: false,
            ewma_alpha: 0.2,
            data: DataConfig::default(),
            split: SplitConfig::default(),
            hcf: HcfConfig {
                d: 32,
                n: 20,
                hidden: vec![8, 8],
                ..HcfConfig::default()
            },
            hcf_fit: FitConfig {
                optimizer: OptimizerKind::Adam,
                lr: 1e-2,
                max_epochs: 60,
                patience: 3,
                ..FitConfig::default()
            },
            mf_bpr: MfConfig {
                d: 32,
                lambda: 1e-3,
                ..MfConfig::default()
            },
            mf_bpr_fit: FitConfig {
                optimizer: OptimizerKind::Adam,
                lr: 1e-2,
                max_epochs: 60,
                patience: 3,
                ..FitConfig::default()
            },
            mf_bpr_sampler_n: 20,
            mf_implicit: MfConfig::default(),
            mf_implicit_fit: ImplicitFitConfig::default(),
            search: SearchConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Applies `dotted.key=value` overrides.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        if overrides.is_empty() {
            return Ok(self.clone());
        }
        let mut root = toml::Value::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        for item in overrides {
            let item = item.as_ref();
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{item}` is not key=value")))?;
            let value = parse_value(raw.trim());
            set_path(&mut root, key.trim(), value)?;
        }
        let cfg: ExperimentConfig = root
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.split.to_split()?;
        if self.models.is_empty() {
            return Err(Error::Config("no models selected".into()));
        }
        if let Some(w) = self.window_sizes_days.iter().find(|&&w| w < 7) {
            return Err(Error::Config(format!("window size {w} is below one week")));
        }
        if self.sliding_window_days != 0 && self.sliding_window_days < 7 {
            return Err(Error::Config("sliding window below one week".into()));
        }
        if !(self.ewma_alpha > 0.0 && self.ewma_alpha <= 1.0) {
            return Err(Error::Config("ewma_alpha must lie in (0, 1]".into()));
        }
        if self.hcf.d == 0
            || self.hcf.n == 0
            || self.mf_bpr.d == 0
            || self.mf_implicit.d == 0
            || self.mf_bpr_sampler_n == 0
        {
            return Err(Error::Config("dimensions and history sizes must be positive".into()));
        }
        self.hcf_fit.validate()?;
        self.mf_bpr_fit.validate()?;
        if self.data.source == SourceKind::Synthetic {
            self.data.synthetic.validate()?;
        } else if self.data.csv_path.is_empty() {
            return Err(Error::Config("data.csv_path is required for csv sources".into()));
        }
        Ok(())
    }

    /// History capacity used when training or scoring `kind`.
    pub fn history_capacity(&self, kind: ModelKind) -> usize {
        match kind {
            ModelKind::Hcf => self.hcf.n,
            ModelKind::MfBpr => self.mf_bpr_sampler_n,
            ModelKind::Historical | ModelKind::MfImplicit => 1,
        }
    }

    pub fn load_data(&self) -> Result<EventLog> {
        match self.data.source {
            SourceKind::Csv => events::ingest_csv(&PathBuf::from(&self.data.csv_path), &self.data.csv_format),
            SourceKind::Synthetic => Ok(synthetic::generate_synthetic(&self.data.synthetic)),
        }
    }

    /// Bytes identifying the input data: the CSV file, or the generator config.
    pub fn input_bytes(&self) -> Result<Vec<u8>> {
        match self.data.source {
            SourceKind::Csv => std::fs::read(&self.data.csv_path).map_err(|e| Error::io(&self.data.csv_path, e)),
            SourceKind::Synthetic => Ok(serde_json::to_vec(&self.data.synthetic)?),
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_owned()))
}

fn set_path(root: &mut toml::Value, key: &str, value: toml::Value) -> Result<()> {
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (k, part) in parts.iter().enumerate() {
        let table = node
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{key}`: `{part}` is not inside a section")))?;
        if k + 1 == parts.len() {
            if !table.contains_key(*part) {
                return Err(Error::Config(format!("unknown config key `{key}`")));
            }
            table.insert((*part).to_owned(), value);
            return Ok(());
        }
        node = table
            .get_mut(*part)
            .ok_or_else(|| Error::Config(format!("unknown config section in `{key}`")))?;
    }
    unreachable!("split yields at least one part")
}

/// SplitMix64 finalizer; derives independent seeds from a base seed and labels.
pub fn derive_seed(base: u64, labels: &[u64]) -> u64 {
    let mut z = base;
    for &l in labels {
        z = z
            .wrapping_add(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(l.wrapping_mul(0xBF58_476D_1CE4_E5B9));
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_toml().unwrap();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn flat_dotted_keys() {
        let cfg = ExperimentConfig::from_toml("seed = 9\nhcf.d = 12\nhcf_fit.lr = 0.05\nmodels = [\"hcf\"]\n").unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.hcf.d, 12);
        assert_eq!(cfg.hcf_fit.lr, 0.05);
        assert_eq!(cfg.models, vec![ModelKind::Hcf]);
        assert!(ExperimentConfig::from_toml("bogus = 1\n").is_err());
    }

    #[test]
    fn overrides() {
        let cfg = ExperimentConfig::default()
            .with_overrides(&[
                "hcf.hidden=[4]",
                "data.synthetic.num_days=40",
                "split.train_end=19",
                "split.valid=[20,29]",
                "split.test=[30,39]",
                "models=[\"mf_bpr\"]",
            ])
            .unwrap();
        assert_eq!(cfg.hcf.hidden, vec![4]);
        assert_eq!(cfg.data.synthetic.num_days, 40);
        assert_eq!(cfg.models, vec![ModelKind::MfBpr]);
        assert!(ExperimentConfig::default().with_overrides(&["hcf.nope=1"]).is_err());
        assert!(ExperimentConfig::default()
            .with_overrides(&["window_sizes_days=[3]"])
            .is_err());
        assert!(ExperimentConfig::default()
            .with_overrides(&["split.train_end=310"])
            .is_err());
        let csv = ExperimentConfig::default()
            .with_overrides(&["data.source=csv", "data.csv_path=/tmp/x.csv"])
            .unwrap();
        assert_eq!(csv.data.source, SourceKind::Csv);
        assert_eq!(csv.data.csv_path, "/tmp/x.csv");
    }

    #[test]
    fn seeds_differ_by_label() {
        assert_ne!(derive_seed(1, &[0, 7]), derive_seed(1, &[0, 8]));
        assert_eq!(derive_seed(1, &[0, 7]), derive_seed(1, &[0, 7]));
    }
}
