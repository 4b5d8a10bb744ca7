//! Line-oriented `key = value` run configuration.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::metrics::EvalProtocol;
use crate::model::CsrnetConfig;
use crate::optim::{AdamState, Optimizer, OptimizerKind, ScheduleState};

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScheduleConfig {
    pub t0_epochs: f64,
    pub t_mult: f64,
    pub eta_min: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub train_dir: PathBuf,
    /// HR patch side in pixels.
    pub patch: usize,
    pub batch: usize,
    pub epochs: usize,
    /// 0 means one patch per training image per epoch.
    pub iterations_per_epoch: usize,
    pub seed: u64,
    pub augment: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    /// `None` shaves `scale` pixels.
    pub shave: Option<usize>,
    pub quantize: bool,
    pub y_only: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogConfig {
    pub out_dir: PathBuf,
    /// Epochs between checkpoints; 0 disables periodic checkpoints.
    pub checkpoint_interval: usize,
}

/// Everything a training or evaluation run needs.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: CsrnetConfig,
    pub optimizer: OptimizerConfig,
    pub schedule: ScheduleConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
    pub log: LogConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: CsrnetConfig::default(),
            optimizer: OptimizerConfig {
                kind: OptimizerKind::Adam,
                lr: 1e-4,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
            },
            schedule: ScheduleConfig {
                t0_epochs: 10.0,
                t_mult: 2.0,
                eta_min: 1e-7,
            },
            data: DataConfig {
                train_dir: PathBuf::from("data/DIV2K"),
                patch: 48,
                batch: 16,
                epochs: 300,
                iterations_per_epoch: 0,
                seed: 0,
                augment: true,
            },
            eval: EvalConfig {
                shave: None,
                quantize: true,
                y_only: true,
            },
            log: LogConfig {
                out_dir: PathBuf::from("runs/csrnet"),
                checkpoint_interval: 10,
            },
        }
    }
}

pub const KEYS: &[&str] = &[
    "model.features",
    "model.n_pairs",
    "model.scale",
    "model.local_tap_src",
    "model.local_tap_dst",
    "model.variant",
    "optimizer.kind",
    "optimizer.lr",
    "optimizer.beta1",
    "optimizer.beta2",
    "optimizer.eps",
    "schedule.t0_epochs",
    "schedule.t_mult",
    "schedule.eta_min",
    "data.train_dir",
    "data.patch",
    "data.batch",
    "data.epochs",
    "data.iterations_per_epoch",
    "data.seed",
    "data.augment",
    "eval.shave",
    "eval.quantize",
    "eval.y_only",
    "log.out_dir",
    "log.checkpoint_interval",
];

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .parse()
        .map_err(|_| Error::config(format!("{key}: cannot parse '{value}'")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(Error::config(format!(
            "{key}: expected true/false, got '{value}'"
        ))),
    }
}

impl RunConfig {
    /// Defaults overridden by the `key = value` lines of `text`.
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::parse_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            self.apply_assignment(line)
                .map_err(|e| Error::config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    /// Apply one `key=value` override.
    pub fn apply_assignment(&mut self, assignment: &str) -> Result<()> {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| Error::config(format!("expected key = value, got '{assignment}'")))?;
        self.set(key.trim(), value.trim())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "model.features" => self.model.features = parse(key, value)?,
            "model.n_pairs" => self.model.n_pairs = parse(key, value)?,
            "model.scale" => self.model.scale = parse(key, value)?,
            "model.local_tap_src" => self.model.local_tap_src = parse(key, value)?,
            "model.local_tap_dst" => self.model.local_tap_dst = parse(key, value)?,
            "model.variant" => self.model.variant = value.parse()?,
            "optimizer.kind" => self.optimizer.kind = value.parse()?,
            "optimizer.lr" => self.optimizer.lr = parse(key, value)?,
            "optimizer.beta1" => self.optimizer.beta1 = parse(key, value)?,
            "optimizer.beta2" => self.optimizer.beta2 = parse(key, value)?,
            "optimizer.eps" => self.optimizer.eps = parse(key, value)?,
            "schedule.t0_epochs" => self.schedule.t0_epochs = parse(key, value)?,
            "schedule.t_mult" => self.schedule.t_mult = parse(key, value)?,
            "schedule.eta_min" => self.schedule.eta_min = parse(key, value)?,
            "data.train_dir" => self.data.train_dir = PathBuf::from(value),
            "data.patch" => self.data.patch = parse(key, value)?,
            "data.batch" => self.data.batch = parse(key, value)?,
            "data.epochs" => self.data.epochs = parse(key, value)?,
            "data.iterations_per_epoch" => self.data.iterations_per_epoch = parse(key, value)?,
            "data.seed" => self.data.seed = parse(key, value)?,
            "data.augment" => self.data.augment = parse_bool(key, value)?,
            "eval.shave" => {
                self.eval.shave = if value == "auto" {
                    None
                } else {
                    Some(parse(key, value)?)
                }
            }
            "eval.quantize" => self.eval.quantize = parse_bool(key, value)?,
            "eval.y_only" => self.eval.y_only = parse_bool(key, value)?,
            "log.out_dir" => self.log.out_dir = PathBuf::from(value),
            "log.checkpoint_interval" => self.log.checkpoint_interval = parse(key, value)?,
            other => return Err(Error::config(format!("unknown key '{other}'"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Result<String> {
        Ok(match key {
            "model.features" => self.model.features.to_string(),
            "model.n_pairs" => self.model.n_pairs.to_string(),
            "model.scale" => self.model.scale.to_string(),
            "model.local_tap_src" => self.model.local_tap_src.to_string(),
            "model.local_tap_dst" => self.model.local_tap_dst.to_string(),
            "model.variant" => self.model.variant.to_string(),
            "optimizer.kind" => self.optimizer.kind.to_string(),
            "optimizer.lr" => self.optimizer.lr.to_string(),
            "optimizer.beta1" => self.optimizer.beta1.to_string(),
            "optimizer.beta2" => self.optimizer.beta2.to_string(),
            "optimizer.eps" => self.optimizer.eps.to_string(),
            "schedule.t0_epochs" => self.schedule.t0_epochs.to_string(),
            "schedule.t_mult" => self.schedule.t_mult.to_string(),
            "schedule.eta_min" => self.schedule.eta_min.to_string(),
            "data.train_dir" => self.data.train_dir.display().to_string(),
            "data.patch" => self.data.patch.to_string(),
            "data.batch" => self.data.batch.to_string(),
            "data.epochs" => self.data.epochs.to_string(),
            "data.iterations_per_epoch" => self.data.iterations_per_epoch.to_string(),
            "data.seed" => self.data.seed.to_string(),
            "data.augment" => self.data.augment.to_string(),
            "eval.shave" => self.eval.shave.map_or("auto".into(), |s| s.to_string()),
            "eval.quantize" => self.eval.quantize.to_string(),
            "eval.y_only" => self.eval.y_only.to_string(),
            "log.out_dir" => self.log.out_dir.display().to_string(),
            "log.checkpoint_interval" => self.log.checkpoint_interval.to_string(),
            other => return Err(Error::config(format!("unknown key '{other}'"))),
        })
    }

    /// Every key with its effective value, parseable by [`RunConfig::parse_str`].
    pub fn dump(&self) -> String {
        let mut s = String::new();
        for key in KEYS {
            let _ = writeln!(s, "{key} = {}", self.get(key).expect("listed key"));
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let o = &self.optimizer;
        if !(o.lr > 0.0 && o.lr.is_finite()) {
            return Err(Error::config(format!(
                "optimizer.lr must be > 0, got {}",
                o.lr
            )));
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
            return Err(Error::config("optimizer betas must lie in [0, 1)"));
        }
        if !(o.eps > 0.0) {
            return Err(Error::config("optimizer.eps must be > 0"));
        }
        self.schedule_state()?;
        let d = &self.data;
        if d.batch == 0 {
            return Err(Error::config("data.batch must be >= 1"));
        }
        if d.patch == 0 || d.patch % self.model.scale != 0 {
            return Err(Error::config(format!(
                "data.patch must be a positive multiple of the scale {}, got {}",
                self.model.scale, d.patch
            )));
        }
        Ok(())
    }

    pub fn schedule_state(&self) -> Result<ScheduleState> {
        ScheduleState::new(
            self.schedule.t0_epochs,
            self.schedule.t_mult,
            self.schedule.eta_min,
            self.optimizer.lr,
        )
    }

    pub fn optimizer(&self) -> Optimizer {
        let o = &self.optimizer;
        match o.kind {
            OptimizerKind::Adam => Optimizer::Adam(AdamState::new(o.beta1, o.beta2, o.eps)),
            OptimizerKind::Sgd => Optimizer::Sgd,
        }
    }

    pub fn eval_protocol(&self) -> EvalProtocol {
        EvalProtocol {
            shave: self.eval.shave.unwrap_or(self.model.scale),
            quantize: self.eval.quantize,
            y_only: self.eval.y_only,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Variant;

    #[test]
    fn defaults() {
        let c = RunConfig::default();
        assert_eq!(c.data.batch, 16);
        assert_eq!(c.data.epochs, 300);
        assert_eq!(c.data.patch, 48);
        assert_eq!(c.optimizer.lr, 1e-4);
        assert_eq!(c.schedule.t0_epochs, 10.0);
        assert_eq!(c.model.n_pairs, 16);
        c.validate().unwrap();
    }

    #[test]
    fn parse_with_comments() {
        let c = RunConfig::parse_str(
            "# run\nmodel.features = 32 # narrower\n\nmodel.variant=eeb_only\n",
        )
        .unwrap();
        assert_eq!(c.model.features, 32);
        assert_eq!(c.model.variant, Variant::EebOnly);
    }

    #[test]
    fn unknown_key_is_rejected() {
        let err = RunConfig::parse_str("model.feature = 3").unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(err.to_string().contains("line 1"));
        assert!(RunConfig::parse_str("model.features").is_err());
        assert!(RunConfig::parse_str("data.augment = maybe").is_err());
    }

    #[test]
    fn dump_round_trips() {
        let mut c = RunConfig::default();
        c.set("eval.shave", "3").unwrap();
        c.set("optimizer.lr", "0.00025").unwrap();
        c.set("data.train_dir", "/tmp/some dir").unwrap();
        let back = RunConfig::parse_str(&c.dump()).unwrap();
        assert_eq!(back, c);
        assert_eq!(c.dump().lines().count(), KEYS.len());
    }

    #[test]
    fn validation() {
        let mut c = RunConfig::default();
        c.set("data.patch", "47").unwrap();
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.set("optimizer.lr", "0").unwrap();
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.set("model.scale", "5").unwrap();
        assert!(c.validate().is_err());
    }

    #[test]
    fn shave_defaults_to_scale() {
        let mut c = RunConfig::default();
        c.set("model.scale", "3").unwrap();
        assert_eq!(c.eval_protocol().shave, 3);
    }
}
