//! Flat key=value run configuration shared by every CLI command. Section
//! headers in config files are allowed but carry no meaning; later keys win,
//! and command-line `--key value` pairs override the file.

use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config: unknown key `{0}`")]
    UnknownKey(String),
    #[error("config: bad value for `{key}`: {reason}")]
    BadValue { key: String, reason: String },
    #[error("config: {file}:{line}: {reason}")]
    BadLine {
        file: String,
        line: usize,
        reason: String,
    },
    #[error("config: {0}")]
    Invalid(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ConfigError>;

trait FromConfigValue: Sized {
    fn parse_value(s: &str) -> std::result::Result<Self, String>;
    fn render(&self) -> String;
}

impl FromConfigValue for usize {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        s.parse().map_err(|_| format!("`{s}` is not a non-negative integer"))
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

impl FromConfigValue for u64 {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        s.parse().map_err(|_| format!("`{s}` is not a non-negative integer"))
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

impl FromConfigValue for f64 {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        s.parse().map_err(|_| format!("`{s}` is not a number"))
    }
    fn render(&self) -> String {
        format!("{self}")
    }
}

impl FromConfigValue for bool {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        match s {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" => Ok(false),
            _ => Err(format!("`{s}` is not a boolean")),
        }
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

impl FromConfigValue for String {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        Ok(s.to_string())
    }
    fn render(&self) -> String {
        self.clone()
    }
}

macro_rules! run_config {
    ($( $key:ident : $ty:ty = $default:expr ),+ $(,)?) => {
        #[derive(Debug, Clone)]
        pub struct RunConfig {
            $( pub $key: $ty, )+
        }

        impl Default for RunConfig {
            fn default() -> Self {
                RunConfig { $( $key: $default, )+ }
            }
        }

        impl RunConfig {
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $( stringify!($key) => {
                        self.$key = <$ty as FromConfigValue>::parse_value(value)
                            .map_err(|reason| ConfigError::BadValue {
                                key: key.to_string(),
                                reason,
                            })?;
                        Ok(())
                    } )+
                    _ => Err(ConfigError::UnknownKey(key.to_string())),
                }
            }

            /// Sorted key=value lines; the basis for the config hash in run
            /// manifests.
            pub fn canonical_string(&self) -> String {
                let mut pairs = vec![
                    $( (stringify!($key), self.$key.render()), )+
                ];
                pairs.sort_by(|a, b| a.0.cmp(b.0));
                pairs
                    .into_iter()
                    .map(|(k, v)| format!("{k}={v}\n"))
                    .collect()
            }
        }
    };
}

run_config! {
    // data generation and ingestion
    data_dir: String = "data".to_string(),
    relations_file: String = "relations.csv".to_string(),
    out_dir: String = "out".to_string(),
    indicators: String = "close,open,high".to_string(),
    checkpoint: String = "".to_string(),
    n_stocks: usize = 8,
    n_clusters: usize = 2,
    t_len: usize = 400,
    follower_coupling: f64 = 0.0,
    factor_weight: f64 = 0.8,
    vol: f64 = 0.02,
    random_edges: usize = 0,

    // windowing and splits
    window: usize = 16,
    horizon: usize = 1,
    dead_zone: f64 = 0.0,
    train_frac: f64 = 0.7,
    val_frac: f64 = 0.15,

    // adaptive noise
    k_steps: usize = 100,
    beta_base_max: f64 = 0.2,
    gamma: f64 = 0.5,
    alpha: f64 = 0.5,
    var_window: usize = 5,
    loss_weighting: bool = false,

    // denoiser
    d_model: usize = 16,
    n_masked_heads: usize = 12,
    n_unmasked_heads: usize = 4,
    n_encoder_layers: usize = 2,
    conv_kernel: usize = 3,
    dilations: String = "1,2,4,8".to_string(),
    ff_dim: usize = 64,
    emb_dim: usize = 32,
    emb_base: f64 = 1e4,
    head_dim: usize = 0,

    // training
    batch_size: usize = 16,
    lr: f64 = 1e-4,
    epochs: usize = 100,
    max_steps: usize = 0,
    lr_decay: f64 = 1.0,
    seed: u64 = 42,

    // sampling and evaluation
    n_samples: usize = 32,
    portfolio_k: usize = 3,
    cost_bps: f64 = 0.0,
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        cfg.merge_file(path)?;
        Ok(cfg)
    }

    pub fn merge_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)?;
        let file = path.display().to_string();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if line.starts_with('[') && line.ends_with(']') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(ConfigError::BadLine {
                    file,
                    line: i + 1,
                    reason: format!("expected key=value, got `{line}`"),
                });
            };
            self.set(key.trim(), value.trim()).map_err(|e| match e {
                ConfigError::UnknownKey(k) => ConfigError::BadLine {
                    file: file.clone(),
                    line: i + 1,
                    reason: format!("unknown key `{k}`"),
                },
                ConfigError::BadValue { key, reason } => ConfigError::BadLine {
                    file: file.clone(),
                    line: i + 1,
                    reason: format!("bad value for `{key}`: {reason}"),
                },
                other => other,
            })?;
        }
        Ok(())
    }

    pub fn apply_overrides(&mut self, pairs: &[(String, String)]) -> Result<()> {
        for (k, v) in pairs {
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn parsed_dilations(&self) -> Result<Vec<usize>> {
        self.dilations
            .split(',')
            .map(|s| {
                s.trim().parse::<usize>().map_err(|_| ConfigError::BadValue {
                    key: "dilations".to_string(),
                    reason: format!("`{s}` is not an integer"),
                })
            })
            .collect()
    }

    pub fn indicator_names(&self) -> Vec<String> {
        self.indicators
            .split(',')
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty())
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_stocks", self.n_stocks),
            ("t_len", self.t_len),
            ("window", self.window),
            ("horizon", self.horizon),
            ("k_steps", self.k_steps),
            ("d_model", self.d_model),
            ("n_encoder_layers", self.n_encoder_layers),
            ("conv_kernel", self.conv_kernel),
            ("ff_dim", self.ff_dim),
            ("emb_dim", self.emb_dim),
            ("batch_size", self.batch_size),
            ("epochs", self.epochs),
            ("n_samples", self.n_samples),
            ("portfolio_k", self.portfolio_k),
            ("var_window", self.var_window),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(ConfigError::Invalid(format!("{name} must be >= 1")));
            }
        }
        if !(self.beta_base_max > 0.0 && self.beta_base_max < 1.0) {
            return Err(ConfigError::Invalid(format!(
                "beta_base_max must lie in (0, 1), got {}",
                self.beta_base_max
            )));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(ConfigError::Invalid(format!(
                "gamma must lie in [0, 1], got {}",
                self.gamma
            )));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(ConfigError::Invalid(format!(
                "alpha must lie in [0, 1], got {}",
                self.alpha
            )));
        }
        if self.lr <= 0.0 {
            return Err(ConfigError::Invalid(format!(
                "lr must be positive, got {}",
                self.lr
            )));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(ConfigError::Invalid(format!(
                "lr_decay must lie in (0, 1], got {}",
                self.lr_decay
            )));
        }
        if self.train_frac <= 0.0
            || self.val_frac < 0.0
            || self.train_frac + self.val_frac >= 1.0
        {
            return Err(ConfigError::Invalid(format!(
                "train_frac {} and val_frac {} must be positive and sum below 1",
                self.train_frac, self.val_frac
            )));
        }
        if self.n_masked_heads == 0 || self.n_masked_heads > 12 {
            return Err(ConfigError::Invalid(format!(
                "n_masked_heads must lie in 1..=12, got {}",
                self.n_masked_heads
            )));
        }
        if self.dead_zone < 0.0 {
            return Err(ConfigError::Invalid(format!(
                "dead_zone must be non-negative, got {}",
                self.dead_zone
            )));
        }
        if self.cost_bps < 0.0 {
            return Err(ConfigError::Invalid(format!(
                "cost_bps must be non-negative, got {}",
                self.cost_bps
            )));
        }
        self.parsed_dilations()?;
        if self.indicator_names().is_empty() {
            return Err(ConfigError::Invalid("indicators must not be empty".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn file_parsing_with_sections_comments_and_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(
            &path,
            "# run settings\n[training]\nlr = 0.003\nbatch_size=4\n\n[noise]\ngamma = 0.25\n",
        )
        .unwrap();
        let mut cfg = RunConfig::from_file(&path).unwrap();
        assert_eq!(cfg.lr, 0.003);
        assert_eq!(cfg.batch_size, 4);
        assert_eq!(cfg.gamma, 0.25);
        cfg.apply_overrides(&[("lr".into(), "0.01".into())]).unwrap();
        assert_eq!(cfg.lr, 0.01);
    }

    #[test]
    fn errors_name_the_offending_key_and_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.cfg");
        std::fs::write(&path, "lr = 0.01\nnot_a_key = 3\n").unwrap();
        let err = RunConfig::from_file(&path).unwrap_err().to_string();
        assert!(err.contains("not_a_key"), "{err}");
        assert!(err.contains(":2"), "{err}");

        std::fs::write(&path, "batch_size = many\n").unwrap();
        let err = RunConfig::from_file(&path).unwrap_err().to_string();
        assert!(err.contains("batch_size"), "{err}");

        let mut cfg = RunConfig::default();
        assert!(cfg.set("gamma", "2.0").is_ok());
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("gamma"), "{err}");
    }

    #[test]
    fn canonical_string_is_sorted_and_stable() {
        let cfg = RunConfig::default();
        let s = cfg.canonical_string();
        let lines: Vec<&str> = s.lines().collect();
        let mut sorted = lines.clone();
        sorted.sort();
        assert_eq!(lines, sorted);
        assert_eq!(s, RunConfig::default().canonical_string());
        let mut other = RunConfig::default();
        other.set("seed", "7").unwrap();
        assert_ne!(s, other.canonical_string());
    }

    #[test]
    fn dilation_and_indicator_lists_parse() {
        let mut cfg = RunConfig::default();
        cfg.set("dilations", "1, 2, 4").unwrap();
        assert_eq!(cfg.parsed_dilations().unwrap(), vec![1, 2, 4]);
        cfg.set("dilations", "1,x").unwrap();
        assert!(cfg.parsed_dilations().is_err());
        cfg.set("indicators", "close, volume").unwrap();
        assert_eq!(cfg.indicator_names(), vec!["close", "volume"]);
    }
}
