//! Run configuration: `key = value` files with `#` comments, overridable key by key.

use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{ConfigError, Error, Result};
use crate::kahg::Dims;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Graph message-passing rounds.
    #[serde(rename = "T")]
    pub iterations: usize,
    pub gamma: f64,
    pub top_k: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub shots: Vec<usize>,
    /// Training normals; each gets one synthetic anomaly.
    pub n_train: usize,
    /// Test normals; the test split has as many anomalies.
    pub n_test: usize,
    #[serde(flatten)]
    pub dims: Dims,
    pub graph_enabled: bool,
    pub kernel_enabled: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: 50,
            lr: 1e-3,
            batch_size: 8,
            iterations: 5,
            gamma: 0.1,
            top_k: 30,
            lambda1: 1.0,
            lambda2: 1.0,
            shots: vec![1, 2, 4],
            n_train: 200,
            n_test: 50,
            dims: Dims::default(),
            graph_enabled: true,
            kernel_enabled: true,
        }
    }
}

pub const KEYS: [&str; 20] = [
    "seed",
    "epochs",
    "lr",
    "batch_size",
    "T",
    "gamma",
    "top_k",
    "lambda1",
    "lambda2",
    "shots",
    "n_train",
    "n_test",
    "layers",
    "c_enc",
    "c_prime",
    "c_cls",
    "grid",
    "image",
    "graph_enabled",
    "kernel_enabled",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
    value.parse().map_err(|_| ConfigError::InvalidValue { key: key.into(), value: value.into() })
}

fn constraint(key: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Constraint { key: key.into(), reason: reason.into() }
}

impl RunConfig {
    /// Parses a config file body on top of the defaults and validates it.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(Self::parse(&text)?)
    }

    /// File values, then overrides, then validation.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(p) = path {
            cfg.apply_text(&std::fs::read_to_string(p)?)?;
        }
        for (k, v) in overrides {
            cfg.set(k, v)?;
        }
        cfg.validate().map_err(Error::from)?;
        Ok(cfg)
    }

    /// Applies `key = value` lines without validating.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| ConfigError::Syntax { line: n + 1, text: raw.to_string() })?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        match key {
            "seed" => self.seed = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "T" => self.iterations = parse(key, value)?,
            "gamma" => self.gamma = parse(key, value)?,
            "top_k" => self.top_k = parse(key, value)?,
            "lambda1" => self.lambda1 = parse(key, value)?,
            "lambda2" => self.lambda2 = parse(key, value)?,
            "shots" => {
                self.shots = value
                    .split(',')
                    .map(|s| parse(key, s.trim()))
                    .collect::<Result<_, _>>()
                    .map_err(|_| ConfigError::InvalidValue { key: key.into(), value: value.into() })?
            }
            "n_train" => self.n_train = parse(key, value)?,
            "n_test" => self.n_test = parse(key, value)?,
            "layers" => self.dims.layers = parse(key, value)?,
            "c_enc" => self.dims.c_enc = parse(key, value)?,
            "c_prime" => self.dims.c_prime = parse(key, value)?,
            "c_cls" => self.dims.c_cls = parse(key, value)?,
            "grid" => self.dims.grid = parse(key, value)?,
            "image" => self.dims.image = parse(key, value)?,
            "graph_enabled" => self.graph_enabled = parse(key, value)?,
            "kernel_enabled" => self.kernel_enabled = parse(key, value)?,
            _ => return Err(ConfigError::UnknownKey(key.into())),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let counts = [
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("top_k", self.top_k),
            ("n_train", self.n_train),
            ("n_test", self.n_test),
            ("layers", self.dims.layers),
            ("c_enc", self.dims.c_enc),
            ("c_prime", self.dims.c_prime),
            ("c_cls", self.dims.c_cls),
            ("grid", self.dims.grid),
            ("image", self.dims.image),
        ];
        for (key, v) in counts {
            // Zero epochs is allowed: it yields the initialisation checkpoint.
            if v == 0 && key != "epochs" {
                return Err(constraint(key, "must be >= 1"));
            }
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(constraint("lr", "must be > 0"));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(constraint("gamma", "must lie in [0, 1]"));
        }
        for (key, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(constraint(key, "must be >= 0"));
            }
        }
        if self.shots.is_empty() || self.shots.contains(&0) {
            return Err(constraint("shots", "needs one or more positive shot counts"));
        }
        if self.shots.iter().any(|&s| s > self.n_train) {
            return Err(constraint("shots", "shot count exceeds n_train"));
        }
        if !self.dims.c_prime.is_multiple_of(2) {
            return Err(constraint("c_prime", "must be even"));
        }
        if !self.dims.image.is_multiple_of(self.dims.grid) {
            return Err(constraint("image", "must be a multiple of grid"));
        }
        Ok(())
    }

    /// Message-passing rounds actually run: zero when the graph is disabled.
    pub fn effective_iterations(&self) -> usize {
        if self.graph_enabled {
            self.iterations
        } else {
            0
        }
    }

    pub fn max_shots(&self) -> usize {
        self.shots.iter().copied().max().unwrap_or(1)
    }

    /// Renders the config as a file that parses back to `self`.
    pub fn to_text(&self) -> String {
        let shots: Vec<String> = self.shots.iter().map(|s| s.to_string()).collect();
        let d = &self.dims;
        let values = [
            self.seed.to_string(),
            self.epochs.to_string(),
            format!("{:?}", self.lr),
            self.batch_size.to_string(),
            self.iterations.to_string(),
            format!("{:?}", self.gamma),
            self.top_k.to_string(),
            format!("{:?}", self.lambda1),
            format!("{:?}", self.lambda2),
            shots.join(","),
            self.n_train.to_string(),
            self.n_test.to_string(),
            d.layers.to_string(),
            d.c_enc.to_string(),
            d.c_prime.to_string(),
            d.c_cls.to_string(),
            d.grid.to_string(),
            d.image.to_string(),
            self.graph_enabled.to_string(),
            self.kernel_enabled.to_string(),
        ];
        KEYS.iter().zip(values).map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c = RunConfig::parse("").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!((c.lr, c.iterations, c.gamma, c.top_k, c.epochs), (1e-3, 5, 0.1, 30, 50));
        assert_eq!((c.lambda1, c.lambda2), (1.0, 1.0));
    }

    #[test]
    fn parses_values_and_comments() {
        let c = RunConfig::parse("# toy\nT = 3\n  gamma=0.25 # inline\nshots = 1, 4\ngraph_enabled = false\n").unwrap();
        assert_eq!(c.iterations, 3);
        assert_eq!(c.gamma, 0.25);
        assert_eq!(c.shots, vec![1, 4]);
        assert_eq!(c.effective_iterations(), 0);
    }

    #[test]
    fn distinct_errors_name_the_key() {
        assert_eq!(RunConfig::parse("gamma = 1.5"), Err(constraint("gamma", "must lie in [0, 1]")));
        assert_eq!(RunConfig::parse("beta = 1"), Err(ConfigError::UnknownKey("beta".into())));
        assert_eq!(
            RunConfig::parse("lr = fast"),
            Err(ConfigError::InvalidValue { key: "lr".into(), value: "fast".into() })
        );
        assert!(matches!(RunConfig::parse("T 5"), Err(ConfigError::Syntax { line: 1, .. })));
        assert!(matches!(RunConfig::parse("lr = 0"), Err(ConfigError::Constraint { key, .. }) if key == "lr"));
        assert!(matches!(RunConfig::parse("top_k = 0"), Err(ConfigError::Constraint { key, .. }) if key == "top_k"));
    }

    #[test]
    fn overrides_take_precedence() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(&path, "T = 5\n").unwrap();
        let c = RunConfig::load(Some(&path), &[("T".into(), "3".into())]).unwrap();
        assert_eq!(c.iterations, 3);
    }

    #[test]
    fn text_roundtrip() {
        let mut c = RunConfig::default();
        c.set("lr", "0.0003").unwrap();
        c.set("shots", "2").unwrap();
        c.kernel_enabled = false;
        assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
        let json = serde_json::to_string(&c).unwrap();
        assert!(json.contains("\"T\":5"));
        assert_eq!(serde_json::from_str::<RunConfig>(&json).unwrap(), c);
    }
}
