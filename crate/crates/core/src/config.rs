//! Flat dotted-key configuration.
//!
//! One resolved [`Config`] drives every stage. Values come from compiled-in
//! defaults, then an optional TOML file of flat dotted keys, then `key=value`
//! command-line overrides, in that order. Unknown keys are rejected with the
//! full list of valid keys. The resolved snapshot serializes to plain
//! `key = value` lines (stored in checkpoints and provenance records).

use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::networks::ModelConfig;
use crate::tcsan::TcsanConfig;
use crate::training::{AblationVariant, TrainConfig};

#[derive(Debug, Clone)]
pub struct DataConfig {
    pub fps: f64,
    pub sample_rate: u32,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            fps: 25.0,
            sample_rate: 16000,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Config {
    pub data: DataConfig,
    pub tcsan: TcsanConfig,
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub train: TrainConfig,
    pub variant: AblationVariant,
}

/// One settable key with its default and a short description.
pub struct KeySpec {
    pub key: &'static str,
    pub default: String,
    pub help: &'static str,
}

macro_rules! keys {
    ($(($key:literal, $get:expr, $set:expr, $help:literal)),+ $(,)?) => {
        /// All valid configuration keys with defaults and help text.
        pub fn key_specs() -> Vec<KeySpec> {
            let d = Config::default();
            vec![$(KeySpec { key: $key, default: ($get)(&d), help: $help }),+]
        }

        impl Config {
            /// Current value of a key, as text.
            pub fn get(&self, key: &str) -> Result<String> {
                match key {
                    $($key => Ok(($get)(self)),)+
                    _ => Err(unknown_key(key)),
                }
            }

            /// Set a key from text.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $($key => ($set)(self, value),)+
                    _ => Err(unknown_key(key)),
                }
            }
        }
    };
}

fn unknown_key(key: &str) -> Error {
    let valid: Vec<&str> = key_specs().iter().map(|k| k.key).collect();
    Error::Config(format!(
        "unknown config key: {key}; valid keys: {}",
        valid.join(", ")
    ))
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse::<T>()
        .map_err(|_| Error::Config(format!("bad value {value:?} for key {key}")))
}

keys![
    ("data.fps", |c: &Config| format!("{}", c.data.fps),
     |c: &mut Config, v: &str| { c.data.fps = parse("data.fps", v)?; Ok(()) },
     "video frame rate"),
    ("data.sample_rate", |c: &Config| format!("{}", c.data.sample_rate),
     |c: &mut Config, v: &str| { c.data.sample_rate = parse("data.sample_rate", v)?; Ok(()) },
     "audio sample rate (Hz)"),
    ("tcsan.layers", |c: &Config| format!("{}", c.tcsan.layers),
     |c: &mut Config, v: &str| { c.tcsan.layers = parse("tcsan.layers", v)?; Ok(()) },
     "residual attention blocks (dilation doubles per block)"),
    ("tcsan.kernel", |c: &Config| format!("{}", c.tcsan.kernel),
     |c: &mut Config, v: &str| { c.tcsan.kernel = parse("tcsan.kernel", v)?; Ok(()) },
     "temporal filter size (odd)"),
    ("tcsan.heads", |c: &Config| format!("{}", c.tcsan.heads),
     |c: &mut Config, v: &str| { c.tcsan.heads = parse("tcsan.heads", v)?; Ok(()) },
     "attention heads"),
    ("tcsan.group", |c: &Config| format!("{}", c.tcsan.group),
     |c: &mut Config, v: &str| { c.tcsan.group = parse("tcsan.group", v)?; Ok(()) },
     "channels per attention token"),
    ("tcsan.out_channels", |c: &Config| format!("{}", c.tcsan.out_channels),
     |c: &mut Config, v: &str| { c.tcsan.out_channels = parse("tcsan.out_channels", v)?; Ok(()) },
     "fused output width fed to the decoder"),
    ("model.id_base", |c: &Config| format!("{}", c.model.id_base),
     |c: &mut Config, v: &str| { c.model.id_base = parse("model.id_base", v)?; Ok(()) },
     "identity encoder stage-1 channels"),
    ("model.audio_base", |c: &Config| format!("{}", c.model.audio_base),
     |c: &mut Config, v: &str| { c.model.audio_base = parse("model.audio_base", v)?; Ok(()) },
     "audio encoder stage-1 channels"),
    ("model.auclf_base", |c: &Config| format!("{}", c.model.auclf_base),
     |c: &mut Config, v: &str| { c.model.auclf_base = parse("model.auclf_base", v)?; Ok(()) },
     "AU classifier stage-1 channels"),
    ("model.a2au_hidden", |c: &Config| format!("{}", c.model.a2au_hidden),
     |c: &mut Config, v: &str| { c.model.a2au_hidden = parse("model.a2au_hidden", v)?; Ok(()) },
     "audio-to-AU LSTM hidden width"),
    ("model.perc_base", |c: &Config| format!("{}", c.model.perc_base),
     |c: &mut Config, v: &str| { c.model.perc_base = parse("model.perc_base", v)?; Ok(()) },
     "perceptual pyramid stage-1 channels"),
    ("loss.rec", |c: &Config| format!("{}", c.loss.rec),
     |c: &mut Config, v: &str| { c.loss.rec = parse("loss.rec", v)?; Ok(()) },
     "reconstruction loss weight"),
    ("loss.id", |c: &Config| format!("{}", c.loss.id),
     |c: &mut Config, v: &str| { c.loss.id = parse("loss.id", v)?; Ok(()) },
     "identity loss weight"),
    ("loss.per", |c: &Config| format!("{}", c.loss.per),
     |c: &mut Config, v: &str| { c.loss.per = parse("loss.per", v)?; Ok(()) },
     "perceptual loss weight"),
    ("loss.au", |c: &Config| format!("{}", c.loss.au),
     |c: &mut Config, v: &str| { c.loss.au = parse("loss.au", v)?; Ok(()) },
     "AU loss weight"),
    ("loss.dice_eps", |c: &Config| format!("{}", c.loss.dice_eps),
     |c: &mut Config, v: &str| { c.loss.dice_eps = parse("loss.dice_eps", v)?; Ok(()) },
     "Dice smoothing term"),
    ("train.epochs", |c: &Config| format!("{}", c.train.epochs),
     |c: &mut Config, v: &str| { c.train.epochs = parse("train.epochs", v)?; Ok(()) },
     "training epochs (used when train.steps = 0)"),
    ("train.steps", |c: &Config| format!("{}", c.train.steps),
     |c: &mut Config, v: &str| { c.train.steps = parse("train.steps", v)?; Ok(()) },
     "total optimizer steps (0 = epochs * clips)"),
    ("train.batch_clips", |c: &Config| format!("{}", c.train.batch_clips),
     |c: &mut Config, v: &str| { c.train.batch_clips = parse("train.batch_clips", v)?; Ok(()) },
     "clips per optimizer step"),
    ("train.lr_main", |c: &Config| format!("{}", c.train.lr_main),
     |c: &mut Config, v: &str| { c.train.lr_main = parse("train.lr_main", v)?; Ok(()) },
     "main-network learning rate"),
    ("train.adam_beta1", |c: &Config| format!("{}", c.train.adam_beta1),
     |c: &mut Config, v: &str| { c.train.adam_beta1 = parse("train.adam_beta1", v)?; Ok(()) },
     "Adam beta1"),
    ("train.adam_beta2", |c: &Config| format!("{}", c.train.adam_beta2),
     |c: &mut Config, v: &str| { c.train.adam_beta2 = parse("train.adam_beta2", v)?; Ok(()) },
     "Adam beta2"),
    ("train.lr_audio2au_ft", |c: &Config| format!("{}", c.train.lr_audio2au_ft),
     |c: &mut Config, v: &str| { c.train.lr_audio2au_ft = parse("train.lr_audio2au_ft", v)?; Ok(()) },
     "audio-to-AU fine-tune learning rate"),
    ("train.lr_auclf_ft", |c: &Config| format!("{}", c.train.lr_auclf_ft),
     |c: &mut Config, v: &str| { c.train.lr_auclf_ft = parse("train.lr_auclf_ft", v)?; Ok(()) },
     "AU classifier fine-tune learning rate"),
    ("train.lr_pretrain", |c: &Config| format!("{}", c.train.lr_pretrain),
     |c: &mut Config, v: &str| { c.train.lr_pretrain = parse("train.lr_pretrain", v)?; Ok(()) },
     "learning rate for the pretraining stages"),
    ("train.seed", |c: &Config| format!("{}", c.train.seed),
     |c: &mut Config, v: &str| { c.train.seed = parse("train.seed", v)?; Ok(()) },
     "seed for initialization and batch order"),
    ("train.ckpt_every", |c: &Config| format!("{}", c.train.ckpt_every),
     |c: &mut Config, v: &str| { c.train.ckpt_every = parse("train.ckpt_every", v)?; Ok(()) },
     "checkpoint interval in steps (0 = final only)"),
    ("train.log_every", |c: &Config| format!("{}", c.train.log_every),
     |c: &mut Config, v: &str| { c.train.log_every = parse("train.log_every", v)?; Ok(()) },
     "console log interval in steps"),
    ("variant", |c: &Config| c.variant.name().to_string(),
     |c: &mut Config, v: &str| { c.variant = AblationVariant::parse(v)?; Ok(()) },
     "generator/loss variant (full, baseline, rec-per, rec-per-id, tcsan, tcsan-au, audio2au)"),
];

impl Config {
    /// Resolved snapshot as `key = value` lines.
    pub fn to_flat_text(&self) -> String {
        let mut out = String::new();
        for spec in key_specs() {
            out.push_str(&format!("{} = {}\n", spec.key, self.get(spec.key).unwrap()));
        }
        out
    }

    /// Parse a snapshot produced by [`Config::to_flat_text`].
    pub fn from_flat_text(text: &str) -> Result<Config> {
        let mut cfg = Config::default();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("bad config line: {line}")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }

    /// Apply a TOML file of flat dotted keys (`loss.per = 0.07`).
    pub fn apply_file(&mut self, path: &std::path::Path) -> Result<()> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let table: toml::Table = text
            .parse()
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut flat = Vec::new();
        flatten_toml("", &toml::Value::Table(table), &mut flat);
        for (k, v) in flat {
            self.set(&k, &v)?;
        }
        Ok(())
    }

    /// Apply one `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override must be key=value, got {kv:?}")))?;
        self.set(k.trim(), v.trim())
    }
}

fn flatten_toml(prefix: &str, value: &toml::Value, out: &mut Vec<(String, String)>) {
    match value {
        toml::Value::Table(t) => {
            for (k, v) in t {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten_toml(&key, v, out);
            }
        }
        toml::Value::String(s) => out.push((prefix.to_string(), s.clone())),
        other => out.push((prefix.to_string(), other.to_string())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_flat_text() {
        let cfg = Config::default();
        let text = cfg.to_flat_text();
        let back = Config::from_flat_text(&text).unwrap();
        assert_eq!(back.to_flat_text(), text);
    }

    #[test]
    fn unknown_keys_are_rejected_with_the_full_list() {
        let mut cfg = Config::default();
        let err = cfg.set("loss.bogus", "1").unwrap_err().to_string();
        assert!(err.contains("unknown config key: loss.bogus"));
        for spec in key_specs() {
            assert!(err.contains(spec.key), "error must list {}", spec.key);
        }
    }

    #[test]
    fn overrides_win_over_defaults() {
        let mut cfg = Config::default();
        cfg.apply_override("loss.per=0.0").unwrap();
        assert_eq!(cfg.loss.per, 0.0);
        cfg.apply_override("train.seed=99").unwrap();
        assert_eq!(cfg.train.seed, 99);
        assert!(cfg.apply_override("no-equals").is_err());
    }

    #[test]
    fn toml_files_with_dotted_keys_parse() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "tcsan.layers = 3\nloss.per = 0.5\nvariant = \"baseline\"\n")
            .unwrap();
        let mut cfg = Config::default();
        cfg.apply_file(&path).unwrap();
        assert_eq!(cfg.tcsan.layers, 3);
        assert_eq!(cfg.loss.per, 0.5);
        assert_eq!(cfg.variant.name(), "baseline");
    }

    #[test]
    fn defaults_match_published_training_settings() {
        let cfg = Config::default();
        assert_eq!(cfg.loss.rec, 1.5);
        assert_eq!(cfg.loss.id, 1.5);
        assert_eq!(cfg.loss.per, 0.07);
        assert_eq!(cfg.loss.au, 0.02);
        assert_eq!(cfg.train.lr_main, 2e-4);
        assert_eq!(cfg.train.adam_beta1, 0.5);
        assert_eq!(cfg.train.lr_audio2au_ft, 1e-6);
        assert_eq!(cfg.train.lr_auclf_ft, 1e-7);
        assert_eq!(cfg.train.epochs, 20);
        assert_eq!(cfg.tcsan.kernel, 3);
        assert_eq!(cfg.tcsan.heads, 4);
    }
}
