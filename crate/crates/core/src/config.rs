//! Model and training configuration.
//!
//! [`ExperimentConfig::default`] carries the full-scale hyperparameters;
//! [`ExperimentConfig::desk`] is the small profile the tests and CLI default
//! to. Both serialise to a flat `key = value` text table (TOML syntax) that
//! is also embedded in checkpoints.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::AdamConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Raw clip-feature width.
    pub d_in: usize,
    /// Hidden width of the encoders.
    pub d: usize,
    pub heads: usize,
    /// Per-head width; `heads * head_dim` need not equal `d`.
    pub head_dim: usize,
    pub layers: usize,
    pub d_ff: usize,
    /// Clips per video (`T`).
    pub clips: usize,
    pub classes: usize,
    /// Clip-level decomposer count.
    pub n_clip: usize,
    /// Video-level decomposer count.
    pub n_video: usize,
    /// Low-rank width of every decomposer.
    pub rank: usize,
    pub positional_encoding: bool,
    pub disc_hidden: usize,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_in: 2048,
            d: 512,
            heads: 6,
            head_dim: 64,
            layers: 2,
            d_ff: 4 * 512,
            clips: 12,
            classes: 8,
            n_clip: 6,
            n_video: 6,
            rank: 64,
            positional_encoding: false,
            disc_hidden: 256,
            init_std: 0.02,
        }
    }
}

impl ModelConfig {
    pub fn desk() -> Self {
        ModelConfig {
            d_in: 64,
            d: 64,
            heads: 2,
            head_dim: 32,
            layers: 2,
            d_ff: 4 * 64,
            clips: 12,
            classes: 5,
            n_clip: 6,
            n_video: 6,
            rank: 8,
            positional_encoding: false,
            disc_hidden: 32,
            init_std: 0.02,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_in", self.d_in),
            ("d", self.d),
            ("heads", self.heads),
            ("head_dim", self.head_dim),
            ("layers", self.layers),
            ("d_ff", self.d_ff),
            ("clips", self.clips),
            ("rank", self.rank),
            ("disc_hidden", self.disc_hidden),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.classes < 2 {
            return Err(Error::Config("classes must be at least 2".into()));
        }
        if self.n_clip < 2 || self.n_video < 2 {
            return Err(Error::Config(
                "decomposer counts must be at least 2 for the sharing schedule".into(),
            ));
        }
        if !(self.init_std.is_finite() && self.init_std >= 0.0) {
            return Err(Error::Config("init_std must be finite and non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    Pretrain,
    Adapt,
}

/// Which objective terms take part in adaptation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossToggles {
    pub cls: bool,
    pub dd: bool,
    pub rd: bool,
    pub ac: bool,
    pub ada: bool,
}

impl Default for LossToggles {
    fn default() -> Self {
        LossToggles {
            cls: true,
            dd: true,
            rd: true,
            ac: true,
            ada: true,
        }
    }
}

impl LossToggles {
    /// Classification only.
    pub fn cls_only() -> Self {
        LossToggles {
            cls: true,
            dd: false,
            rd: false,
            ac: false,
            ada: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stage: Stage,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    /// Labelled target samples per class.
    pub k: usize,
    pub toggles: LossToggles,
    pub lambda_ada: f64,
    /// Scale the reversal coefficient by `2 / (1 + exp(-10 p)) - 1`, with
    /// `p` the fraction of adaptation steps done.
    pub lambda_ramp: bool,
    pub ema_momentum: f64,
    pub exact_source_mean: bool,
}

impl TrainConfig {
    pub fn pretrain() -> Self {
        TrainConfig {
            stage: Stage::Pretrain,
            epochs: 2,
            lr: 1e-5,
            batch_size: 128,
            seed: 0,
            adam: AdamConfig::default(),
            k: 5,
            toggles: LossToggles::default(),
            lambda_ada: 1.0,
            lambda_ramp: false,
            ema_momentum: 0.9,
            exact_source_mean: false,
        }
    }

    pub fn adapt() -> Self {
        TrainConfig {
            stage: Stage::Adapt,
            epochs: 50,
            lr: 1e-4,
            ..TrainConfig::pretrain()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config("lr must be positive".into()));
        }
        if self.stage == Stage::Adapt && self.batch_size < 2 {
            return Err(Error::Config("adaptation batches need room for both domains".into()));
        }
        if !(0.0..1.0).contains(&self.ema_momentum) {
            return Err(Error::Config("ema_momentum must lie in [0, 1)".into()));
        }
        if self.k == 0 {
            return Err(Error::Config("k must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub pretrain: TrainConfig,
    pub adapt: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            model: ModelConfig::default(),
            pretrain: TrainConfig::pretrain(),
            adapt: TrainConfig::adapt(),
        }
    }
}

fn parse_err(key: &str, value: &toml::Value) -> Error {
    Error::Config(format!("bad value for `{key}`: {value}"))
}

fn as_usize(key: &str, v: &toml::Value) -> Result<usize> {
    v.as_integer()
        .and_then(|i| usize::try_from(i).ok())
        .ok_or_else(|| parse_err(key, v))
}

fn as_f64(key: &str, v: &toml::Value) -> Result<f64> {
    v.as_float()
        .or_else(|| v.as_integer().map(|i| i as f64))
        .ok_or_else(|| parse_err(key, v))
}

fn as_bool(key: &str, v: &toml::Value) -> Result<bool> {
    v.as_bool().ok_or_else(|| parse_err(key, v))
}

/// Formats a float so that TOML reads it back as the same `f64`.
fn fmt_f64(x: f64) -> String {
    let s = format!("{x:?}");
    if s.contains(['.', 'e', 'E']) || s.contains("inf") || s.contains("NaN") {
        s
    } else {
        format!("{s}.0")
    }
}

impl ExperimentConfig {
    /// Small dimensions and a training schedule that converges in seconds.
    pub fn desk() -> Self {
        ExperimentConfig {
            model: ModelConfig::desk(),
            pretrain: TrainConfig {
                epochs: 8,
                lr: 1e-3,
                batch_size: 16,
                ..TrainConfig::pretrain()
            },
            adapt: TrainConfig {
                epochs: 10,
                lr: 1e-3,
                batch_size: 16,
                ..TrainConfig::adapt()
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.pretrain.validate()?;
        self.adapt.validate()
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.pretrain.seed = seed;
        self.adapt.seed = seed;
    }

    /// Applies flat `key = value` overrides.
    pub fn apply_table(&mut self, table: &toml::Table) -> Result<()> {
        for (key, v) in table {
            let m = &mut self.model;
            match key.as_str() {
                "profile" => {} // consumed by the caller before overrides
                "d_in" => m.d_in = as_usize(key, v)?,
                "d" => m.d = as_usize(key, v)?,
                "heads" => m.heads = as_usize(key, v)?,
                "head_dim" => m.head_dim = as_usize(key, v)?,
                "layers" => m.layers = as_usize(key, v)?,
                "d_ff" => m.d_ff = as_usize(key, v)?,
                "clips" => m.clips = as_usize(key, v)?,
                "classes" => m.classes = as_usize(key, v)?,
                "n_clip" => m.n_clip = as_usize(key, v)?,
                "n_video" => m.n_video = as_usize(key, v)?,
                "rank" => m.rank = as_usize(key, v)?,
                "positional_encoding" => m.positional_encoding = as_bool(key, v)?,
                "disc_hidden" => m.disc_hidden = as_usize(key, v)?,
                "init_std" => m.init_std = as_f64(key, v)?,
                "pretrain_epochs" => self.pretrain.epochs = as_usize(key, v)?,
                "pretrain_lr" => self.pretrain.lr = as_f64(key, v)?,
                "adapt_epochs" => self.adapt.epochs = as_usize(key, v)?,
                "adapt_lr" => self.adapt.lr = as_f64(key, v)?,
                "batch_size" => {
                    let b = as_usize(key, v)?;
                    self.pretrain.batch_size = b;
                    self.adapt.batch_size = b;
                }
                "seed" => {
                    let s = v.as_integer().ok_or_else(|| parse_err(key, v))?;
                    self.set_seed(s as u64);
                }
                "k" => {
                    let k = as_usize(key, v)?;
                    self.pretrain.k = k;
                    self.adapt.k = k;
                }
                "ldd" => self.adapt.toggles.dd = as_bool(key, v)?,
                "lrd" => self.adapt.toggles.rd = as_bool(key, v)?,
                "lac" => self.adapt.toggles.ac = as_bool(key, v)?,
                "lada" => self.adapt.toggles.ada = as_bool(key, v)?,
                "lcls" => self.adapt.toggles.cls = as_bool(key, v)?,
                "lambda_ada" => self.adapt.lambda_ada = as_f64(key, v)?,
                "lambda_ramp" => self.adapt.lambda_ramp = as_bool(key, v)?,
                "ema_momentum" => self.adapt.ema_momentum = as_f64(key, v)?,
                "exact_source_mean" => self.adapt.exact_source_mean = as_bool(key, v)?,
                "adam_beta1" => {
                    let b = as_f64(key, v)?;
                    self.pretrain.adam.beta1 = b;
                    self.adapt.adam.beta1 = b;
                }
                "adam_beta2" => {
                    let b = as_f64(key, v)?;
                    self.pretrain.adam.beta2 = b;
                    self.adapt.adam.beta2 = b;
                }
                "adam_eps" => {
                    let e = as_f64(key, v)?;
                    self.pretrain.adam.eps = e;
                    self.adapt.adam.eps = e;
                }
                other => return Err(Error::Config(format!("unknown key `{other}`"))),
            }
        }
        Ok(())
    }

    /// Parses a flat config file. A `profile = "desk"` or `"full"` entry
    /// selects the base before the remaining keys are applied.
    pub fn from_flat_str(text: &str) -> Result<Self> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let mut cfg = match table.get("profile").and_then(|v| v.as_str()) {
            None | Some("full") => ExperimentConfig::default(),
            Some("desk") => ExperimentConfig::desk(),
            Some(other) => return Err(Error::Config(format!("unknown profile `{other}`"))),
        };
        cfg.apply_table(&table)?;
        Ok(cfg)
    }

    /// Renders every key in a fixed order.
    pub fn to_flat_string(&self) -> String {
        let m = &self.model;
        let (p, a) = (&self.pretrain, &self.adapt);
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("d_in", m.d_in.to_string());
        kv("d", m.d.to_string());
        kv("heads", m.heads.to_string());
        kv("head_dim", m.head_dim.to_string());
        kv("layers", m.layers.to_string());
        kv("d_ff", m.d_ff.to_string());
        kv("clips", m.clips.to_string());
        kv("classes", m.classes.to_string());
        kv("n_clip", m.n_clip.to_string());
        kv("n_video", m.n_video.to_string());
        kv("rank", m.rank.to_string());
        kv("positional_encoding", m.positional_encoding.to_string());
        kv("disc_hidden", m.disc_hidden.to_string());
        kv("init_std", fmt_f64(m.init_std));
        kv("pretrain_epochs", p.epochs.to_string());
        kv("pretrain_lr", fmt_f64(p.lr));
        kv("adapt_epochs", a.epochs.to_string());
        kv("adapt_lr", fmt_f64(a.lr));
        kv("batch_size", a.batch_size.to_string());
        kv("seed", (a.seed as i64).to_string());
        kv("k", a.k.to_string());
        kv("lcls", a.toggles.cls.to_string());
        kv("ldd", a.toggles.dd.to_string());
        kv("lrd", a.toggles.rd.to_string());
        kv("lac", a.toggles.ac.to_string());
        kv("lada", a.toggles.ada.to_string());
        kv("lambda_ada", fmt_f64(a.lambda_ada));
        kv("lambda_ramp", a.lambda_ramp.to_string());
        kv("ema_momentum", fmt_f64(a.ema_momentum));
        kv("exact_source_mean", a.exact_source_mean.to_string());
        kv("adam_beta1", fmt_f64(a.adam.beta1));
        kv("adam_beta2", fmt_f64(a.adam.beta2));
        kv("adam_eps", fmt_f64(a.adam.eps));
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_round_trip() {
        let mut cfg = ExperimentConfig::desk();
        cfg.adapt.toggles.dd = false;
        cfg.set_seed(42);
        cfg.adapt.lambda_ada = 0.3;
        cfg.adapt.lambda_ramp = true;
        let text = cfg.to_flat_string();
        let back = ExperimentConfig::from_flat_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn profile_and_overrides() {
        let cfg = ExperimentConfig::from_flat_str("profile = \"desk\"\nrank = 4\nadapt_lr = 0.01\n").unwrap();
        assert_eq!(cfg.model.rank, 4);
        assert_eq!(cfg.model.d, 64);
        assert_eq!(cfg.adapt.lr, 0.01);
        assert!(ExperimentConfig::from_flat_str("nope = 1").is_err());
        assert!(ExperimentConfig::from_flat_str("rank = \"x\"").is_err());
    }

    #[test]
    fn single_decomposer_is_rejected() {
        let mut m = ModelConfig::desk();
        m.n_clip = 1;
        assert!(m.validate().is_err());
    }
}
