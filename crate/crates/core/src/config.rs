//! Experiment configuration.
//!
//! The on-disk format is plain `key=value` lines with dotted namespaces
//! (`privacy.p=95`). Blank lines and lines starting with `#` are ignored.
//! Command-line overrides use the same keys as `--key value`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::data::FederationConfig;
use crate::error::{Error, Result};
use crate::metrics::StdConvention;
use crate::model::AdamConfig;
use crate::privacy::{PrivacyConfig, PrivacyMode};

pub const OUTPUT_ENV: &str = "ADPFED_OUT";
/// Desk-scale learning rate. The reference 1e-4 assumes tens of thousands of
/// optimizer steps; the toy preset takes about 600, so the rate is scaled up.
pub const DESK_LEARNING_RATE: f64 = 1e-2;
pub const DEFAULT_PERCENTILES: [f64; 6] = [70.0, 75.0, 80.0, 85.0, 90.0, 95.0];

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub rounds: usize,
    pub repeats: usize,
    pub output_dir: PathBuf,
    /// Site layout; its `seed` field is replaced by the run seed.
    pub data: FederationConfig,
    pub hidden: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Start every round with fresh Adam moments instead of keeping them.
    pub reset_optimizer: bool,
    pub privacy: PrivacyConfig,
    /// Non-private rounds used to calibrate the static threshold.
    pub warmup_rounds: usize,
    pub sample_std: bool,
    pub percentiles: Vec<f64>,
    /// A run whose global weights exceed this l2 norm is stopped as diverged.
    pub max_weight_norm: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            rounds: 100,
            repeats: 3,
            output_dir: PathBuf::from("out"),
            data: FederationConfig::default(),
            hidden: 16,
            local_epochs: 1,
            batch_size: 16,
            adam: AdamConfig {
                lr: DESK_LEARNING_RATE,
                ..AdamConfig::default()
            },
            reset_optimizer: false,
            privacy: PrivacyConfig::default(),
            warmup_rounds: 5,
            sample_std: false,
            percentiles: DEFAULT_PERCENTILES.to_vec(),
            max_weight_norm: 1e6,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::config(format!("cannot parse `{value}` for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::config(format!("expected true/false for {key}, got `{value}`"))),
    }
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    pub fn std_convention(&self) -> StdConvention {
        if self.sample_std {
            StdConvention::Sample
        } else {
            StdConvention::Population
        }
    }

    /// Sets one dotted key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "seed" => self.seed = parse(key, v)?,
            "rounds" => self.rounds = parse(key, v)?,
            "repeats" => self.repeats = parse(key, v)?,
            "output_dir" => self.output_dir = PathBuf::from(v),
            "data.sizes" => self.data.sizes = parse_list(key, v)?,
            "data.test_size" => self.data.test_size = parse(key, v)?,
            "data.heterogeneity" => self.data.heterogeneity = parse(key, v)?,
            "data.image_size" => self.data.image_size = parse(key, v)?,
            "model.hidden" => self.hidden = parse(key, v)?,
            "train.local_epochs" => self.local_epochs = parse(key, v)?,
            "train.batch_size" => self.batch_size = parse(key, v)?,
            "optim.lr" => self.adam.lr = parse(key, v)?,
            "optim.weight_decay" => self.adam.weight_decay = parse(key, v)?,
            "optim.beta1" => self.adam.beta1 = parse(key, v)?,
            "optim.beta2" => self.adam.beta2 = parse(key, v)?,
            "optim.eps" => self.adam.eps = parse(key, v)?,
            "optim.reset_each_round" => self.reset_optimizer = parse_bool(key, v)?,
            "privacy.mode" => self.privacy.mode = v.parse::<PrivacyMode>()?,
            "privacy.q" => self.privacy.q = parse(key, v)?,
            "privacy.p" => self.privacy.p = parse(key, v)?,
            "privacy.fixed_threshold" => {
                self.privacy.fixed_threshold = match v {
                    "auto" => None,
                    _ => Some(parse(key, v)?),
                }
            }
            "privacy.epsilon" => self.privacy.epsilon = parse(key, v)?,
            "privacy.sigma" => self.privacy.sigma = parse(key, v)?,
            "privacy.warmup_rounds" => self.warmup_rounds = parse(key, v)?,
            "privacy.percentile_includes_zeros" => {
                self.privacy.percentile_includes_zeros = parse_bool(key, v)?
            }
            "privacy.noise_on_support_only" => self.privacy.noise_on_support_only = parse_bool(key, v)?,
            "report.sample_std" => self.sample_std = parse_bool(key, v)?,
            "sweep.percentiles" => self.percentiles = parse_list(key, v)?,
            "divergence.max_norm" => self.max_weight_norm = parse(key, v)?,
            other => return Err(Error::config(format!("unknown configuration key `{other}`"))),
        }
        Ok(())
    }

    /// Every key with its current value, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let p = &self.privacy;
        vec![
            ("seed", self.seed.to_string()),
            ("rounds", self.rounds.to_string()),
            ("repeats", self.repeats.to_string()),
            ("output_dir", self.output_dir.display().to_string()),
            ("data.sizes", join(&self.data.sizes)),
            ("data.test_size", self.data.test_size.to_string()),
            ("data.heterogeneity", self.data.heterogeneity.to_string()),
            ("data.image_size", self.data.image_size.to_string()),
            ("model.hidden", self.hidden.to_string()),
            ("train.local_epochs", self.local_epochs.to_string()),
            ("train.batch_size", self.batch_size.to_string()),
            ("optim.lr", self.adam.lr.to_string()),
            ("optim.weight_decay", self.adam.weight_decay.to_string()),
            ("optim.beta1", self.adam.beta1.to_string()),
            ("optim.beta2", self.adam.beta2.to_string()),
            ("optim.eps", self.adam.eps.to_string()),
            ("optim.reset_each_round", self.reset_optimizer.to_string()),
            ("privacy.mode", p.mode.to_string()),
            ("privacy.q", p.q.to_string()),
            ("privacy.p", p.p.to_string()),
            (
                "privacy.fixed_threshold",
                p.fixed_threshold.map_or_else(|| "auto".to_string(), |c| c.to_string()),
            ),
            ("privacy.epsilon", p.epsilon.to_string()),
            ("privacy.sigma", p.sigma.to_string()),
            ("privacy.warmup_rounds", self.warmup_rounds.to_string()),
            ("privacy.percentile_includes_zeros", p.percentile_includes_zeros.to_string()),
            ("privacy.noise_on_support_only", p.noise_on_support_only.to_string()),
            ("report.sample_std", self.sample_std.to_string()),
            ("sweep.percentiles", join(&self.percentiles)),
            ("divergence.max_norm", self.max_weight_norm.to_string()),
        ]
    }

    /// Applies `key=value` lines on top of the current values.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected key=value", lineno + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::ConfigFile {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_text(&text)
    }

    /// Applies `--key value` pairs.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, args: &[S]) -> Result<()> {
        let mut it = args.iter().map(AsRef::as_ref);
        while let Some(flag) = it.next() {
            let key = flag
                .strip_prefix("--")
                .ok_or_else(|| Error::config(format!("expected --key, got `{flag}`")))?;
            if let Some((k, v)) = key.split_once('=') {
                self.set(k, v)?;
                continue;
            }
            let value = it
                .next()
                .ok_or_else(|| Error::config(format!("missing value for --{key}")))?;
            self.set(key, value)?;
        }
        Ok(())
    }

    /// The resolved configuration in the same format it is read from.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(out, "{k}={v}");
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.adam.validate()?;
        self.privacy.validate()?;
        if self.repeats == 0 {
            return Err(Error::config("repeats must be at least 1"));
        }
        if self.hidden == 0 {
            return Err(Error::config("model.hidden must be at least 1"));
        }
        if self.local_epochs == 0 {
            return Err(Error::config("train.local_epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size must be at least 1"));
        }
        if !(self.max_weight_norm > 0.0) {
            return Err(Error::config("divergence.max_norm must be positive"));
        }
        if self.privacy.mode == PrivacyMode::Static
            && self.privacy.fixed_threshold.is_none()
            && self.warmup_rounds == 0
        {
            return Err(Error::config(
                "static mode needs privacy.fixed_threshold or privacy.warmup_rounds >= 1",
            ));
        }
        validate_percentiles(&self.percentiles)
    }
}

pub fn validate_percentiles(list: &[f64]) -> Result<()> {
    if list.is_empty() {
        return Err(Error::config("percentile list is empty"));
    }
    for (i, &p) in list.iter().enumerate() {
        if !(p > 0.0 && p <= 100.0) {
            return Err(Error::config(format!("percentile {p} outside (0, 100]")));
        }
        if list[..i].contains(&p) {
            return Err(Error::config(format!("duplicate percentile {p}")));
        }
    }
    Ok(())
}
