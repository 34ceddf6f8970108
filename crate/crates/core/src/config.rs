//! Run configuration: defaults, flat `key = value` files, and overrides.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::network::HyperParams;
use crate::training::TrainConfig;
use crate::transfer::Regime;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{source_name}:{line}: {message}")]
    Syntax {
        source_name: String,
        line: usize,
        message: String,
    },
    #[error("unknown key {0:?}")]
    UnknownKey(String),
    #[error("bad value {value:?} for {key}: {reason}")]
    BadValue {
        key: String,
        value: String,
        reason: String,
    },
    #[error("missing required setting {0}")]
    Missing(&'static str),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Synthetic cohort settings.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSettings {
    pub subjects: usize,
    pub epochs_per_subject: usize,
    pub profile: String,
    pub mismatch: String,
}

impl Default for SynthSettings {
    fn default() -> Self {
        Self {
            subjects: 20,
            epochs_per_subject: 200,
            profile: "eeg_like".into(),
            mismatch: "none".into(),
        }
    }
}

/// Everything a subcommand may need.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub hp: HyperParams,
    pub train: TrainConfig,
    pub synth: SynthSettings,
    pub regime: Regime,
    /// Train LOSO folds from a fresh initialization instead of a checkpoint.
    pub scratch: bool,
    pub jobs: usize,
    pub data: Option<PathBuf>,
    pub val: Option<PathBuf>,
    pub init: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub log: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            hp: HyperParams::default(),
            train: TrainConfig::default(),
            synth: SynthSettings::default(),
            regime: Regime::EntireNetwork,
            scratch: false,
            jobs: 1,
            data: None,
            val: None,
            init: None,
            model: None,
            out: None,
            log: None,
        }
    }
}

/// Every key accepted by [`RunConfig::set`].
pub const KEYS: &[&str] = &[
    "n_filters",
    "ernn_hidden",
    "attention_size",
    "seqrnn_hidden",
    "seq_len",
    "dropout",
    "l2",
    "epochs",
    "batch_size",
    "lr",
    "beta1",
    "beta2",
    "adam_eps",
    "clip_norm",
    "patience",
    "eval_every",
    "max_steps",
    "reset_optimizer",
    "class_balanced",
    "seed",
    "jobs",
    "regime",
    "scratch",
    "subjects",
    "epochs_per_subject",
    "profile",
    "mismatch",
    "data",
    "val",
    "init",
    "model",
    "out",
    "log",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e: T::Err| ConfigError::BadValue {
        key: key.into(),
        value: value.into(),
        reason: e.to_string(),
    })
}

fn parse_bool(key: &str, value: &str) -> Result<bool, ConfigError> {
    match value {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(ConfigError::BadValue {
            key: key.into(),
            value: value.into(),
            reason: "expected true or false".into(),
        }),
    }
}

/// `key = value` pairs of a config text. Blank lines and `#` comments are
/// skipped.
pub fn parse_pairs(text: &str, source_name: &str) -> Result<Vec<(String, String)>, ConfigError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
            source_name: source_name.into(),
            line: i + 1,
            message: format!("expected key = value, got {line:?}"),
        })?;
        out.push((k.trim().replace('-', "_"), v.trim().to_string()));
    }
    Ok(out)
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let path = || Some(PathBuf::from(value));
        match key {
            "n_filters" => self.hp.n_filters = parse(key, value)?,
            "ernn_hidden" => self.hp.ernn_hidden = parse(key, value)?,
            "attention_size" => self.hp.attention_size = parse(key, value)?,
            "seqrnn_hidden" => self.hp.seqrnn_hidden = parse(key, value)?,
            "seq_len" => self.hp.seq_len = parse(key, value)?,
            "dropout" => self.hp.dropout = parse(key, value)?,
            "l2" => self.hp.l2 = parse(key, value)?,
            "epochs" => self.train.epochs = parse(key, value)?,
            "batch_size" => self.train.batch_size = parse(key, value)?,
            "lr" => self.train.lr = parse(key, value)?,
            "beta1" => self.train.beta1 = parse(key, value)?,
            "beta2" => self.train.beta2 = parse(key, value)?,
            "adam_eps" => self.train.eps = parse(key, value)?,
            "clip_norm" => self.train.clip_norm = parse(key, value)?,
            "patience" => self.train.early_stop_patience = parse(key, value)?,
            "eval_every" => self.train.eval_every = parse(key, value)?,
            "max_steps" => self.train.max_steps = parse(key, value)?,
            "reset_optimizer" => self.train.reset_optimizer = parse_bool(key, value)?,
            "class_balanced" => self.train.class_balanced = parse_bool(key, value)?,
            "seed" => self.train.seed = parse(key, value)?,
            "jobs" => self.jobs = parse(key, value)?,
            "regime" => self.regime = parse(key, value)?,
            "scratch" => self.scratch = parse_bool(key, value)?,
            "subjects" => self.synth.subjects = parse(key, value)?,
            "epochs_per_subject" => self.synth.epochs_per_subject = parse(key, value)?,
            "profile" => self.synth.profile = value.into(),
            "mismatch" => self.synth.mismatch = value.into(),
            "data" => self.data = path(),
            "val" => self.val = path(),
            "init" => self.init = path(),
            "model" => self.model = path(),
            "out" => self.out = path(),
            "log" => self.log = path(),
            other => return Err(ConfigError::UnknownKey(other.into())),
        }
        Ok(())
    }

    /// Defaults, then the file (if any), then `overrides` in order.
    pub fn resolve(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        if let Some(path) = file {
            let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
                path: path.to_path_buf(),
                source,
            })?;
            for (k, v) in parse_pairs(&text, &path.display().to_string())? {
                cfg.set(&k, &v)?;
            }
        }
        for (k, v) in overrides {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    /// The effective settings as a config file that reproduces them.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let h = &self.hp;
        let t = &self.train;
        let pairs: Vec<(&str, String)> = vec![
            ("n_filters", h.n_filters.to_string()),
            ("ernn_hidden", h.ernn_hidden.to_string()),
            ("attention_size", h.attention_size.to_string()),
            ("seqrnn_hidden", h.seqrnn_hidden.to_string()),
            ("seq_len", h.seq_len.to_string()),
            ("dropout", h.dropout.to_string()),
            ("l2", h.l2.to_string()),
            ("epochs", t.epochs.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("lr", t.lr.to_string()),
            ("beta1", t.beta1.to_string()),
            ("beta2", t.beta2.to_string()),
            ("adam_eps", t.eps.to_string()),
            ("clip_norm", t.clip_norm.to_string()),
            ("patience", t.early_stop_patience.to_string()),
            ("eval_every", t.eval_every.to_string()),
            ("max_steps", t.max_steps.to_string()),
            ("reset_optimizer", t.reset_optimizer.to_string()),
            ("class_balanced", t.class_balanced.to_string()),
            ("seed", t.seed.to_string()),
            ("regime", self.regime.to_string()),
            ("scratch", self.scratch.to_string()),
        ];
        for (k, v) in pairs {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn require<'a>(&self, value: &'a Option<PathBuf>, name: &'static str) -> Result<&'a Path, ConfigError> {
        value.as_deref().ok_or(ConfigError::Missing(name))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_the_stated_training_setup() {
        let c = RunConfig::default();
        assert_eq!(c.hp.seq_len, 20);
        assert_eq!(c.train.batch_size, 32);
        assert_eq!(c.train.lr, 1e-4);
        assert_eq!(c.train.epochs, 10);
        assert_eq!(c.train.early_stop_patience, 50);
    }

    #[test]
    fn flags_override_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        fs::write(&path, "# comment\nlr = 0.001\nseq-len = 5\n\nregime = softmax\n").unwrap();
        let cfg = RunConfig::resolve(Some(&path), &[("lr".into(), "0.01".into())]).unwrap();
        assert_eq!(cfg.train.lr, 0.01);
        assert_eq!(cfg.hp.seq_len, 5);
        assert_eq!(cfg.regime, Regime::SoftmaxOnly);
    }

    #[test]
    fn errors_name_the_problem() {
        let err = parse_pairs("lr 0.1", "x.cfg").unwrap_err();
        assert_eq!(err.to_string(), "x.cfg:1: expected key = value, got \"lr 0.1\"");
        let mut c = RunConfig::default();
        assert!(matches!(c.set("colour", "red"), Err(ConfigError::UnknownKey(_))));
        assert!(matches!(c.set("lr", "fast"), Err(ConfigError::BadValue { .. })));
    }

    #[test]
    fn every_listed_key_is_settable_and_text_round_trips() {
        let mut c = RunConfig::default();
        c.train.lr = 3e-4;
        c.regime = Regime::SoftmaxPlusArnn;
        let pairs = parse_pairs(&c.to_text(), "t").unwrap();
        let back = RunConfig::resolve(None, &pairs).unwrap();
        assert_eq!(back, c);
        for key in KEYS {
            let mut probe = RunConfig::default();
            let r = probe.set(key, "1");
            assert!(!matches!(r, Err(ConfigError::UnknownKey(_))), "{key}");
        }
    }
}
