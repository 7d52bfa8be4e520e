//! `key = value` training configuration.

use std::fmt::Write as _;

use crate::config::Preset;
use crate::losses::{LossWeights, Mode};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub power: f64,
    pub epochs: usize,
    /// Labeled samples per step.
    pub batch: usize,
    /// Unlabeled samples per step in semi mode.
    pub unlabeled_batch: usize,
    pub weights: LossWeights,
    /// Expected labeled fraction; `None` accepts whatever the manifest says.
    pub label_ratio: Option<f64>,
    pub seed: u64,
    pub mode: Mode,
    pub freeze_teachers: bool,
    pub preset: Preset,
    /// Overrides the schedule length when nonzero.
    pub max_steps: usize,
    pub augment: bool,
    pub eval_count: usize,
    /// Evaluate every this many steps (0: only at the end).
    pub eval_every: usize,
    /// Write a checkpoint every this many steps (0: only at the end).
    pub checkpoint_every: usize,
    pub filter_d0: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            power: 0.9,
            epochs: 30,
            batch: 8,
            unlabeled_batch: 8,
            weights: LossWeights::default(),
            label_ratio: None,
            seed: 0,
            mode: Mode::Semi,
            freeze_teachers: false,
            preset: Preset::Desk,
            max_steps: 0,
            augment: true,
            eval_count: 64,
            eval_every: 0,
            checkpoint_every: 0,
            filter_d0: None,
        }
    }
}

/// Every accepted key with its description, in file order.
pub const SCHEMA: &[(&str, &str)] = &[
    ("lr0", "initial learning rate"),
    ("momentum", "SGD momentum"),
    ("weight_decay", "L2 weight decay added to gradients"),
    ("power", "exponent of the polynomial learning-rate decay"),
    ("epochs", "passes over the labeled set"),
    ("batch", "labeled samples per step"),
    ("unlabeled_batch", "unlabeled samples per step (semi mode)"),
    ("lambda1", "spatial distillation weight"),
    ("lambda2", "attention distillation weight"),
    ("lambda", "cross pseudo supervision weight"),
    ("label_ratio", "expected labeled fraction, e.g. 1/8 (auto: take the manifest)"),
    ("seed", "seed for initialization, batch order and augmentation"),
    ("mode", "semi or supervised"),
    ("freeze_teachers", "stop distillation gradients into the conv and vit encoders"),
    ("preset", "desk or paper"),
    ("max_steps", "schedule length override in steps (0: epochs x steps per epoch)"),
    ("augment", "random scale, rotation, crop and flip"),
    ("eval_count", "held-out samples used for evaluation"),
    ("eval_every", "evaluation interval in steps (0: end only)"),
    ("checkpoint_every", "checkpoint interval in steps (0: end only)"),
    ("filter_d0", "Gaussian filter cutoff in frequency bins (auto: min(H,W)/4)"),
];

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config { key: key.into(), detail: format!("cannot parse `{v}`") })
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config { key: key.into(), detail: format!("expected true or false, got `{v}`") }),
    }
}

fn parse_auto<T: std::str::FromStr>(key: &str, v: &str) -> Result<Option<T>> {
    if v == "auto" {
        Ok(None)
    } else {
        parse(key, v).map(Some)
    }
}

impl TrainConfig {
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let v = v.trim();
        match key {
            "lr0" => self.lr0 = parse(key, v)?,
            "momentum" => self.momentum = parse(key, v)?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "power" => self.power = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "batch" => self.batch = parse(key, v)?,
            "unlabeled_batch" => self.unlabeled_batch = parse(key, v)?,
            "lambda1" => self.weights.spa = parse(key, v)?,
            "lambda2" => self.weights.att = parse(key, v)?,
            "lambda" => self.weights.cps = parse(key, v)?,
            "label_ratio" => {
                self.label_ratio = if v == "auto" { None } else { Some(crate::data::parse_ratio(v)?) };
            }
            "seed" => self.seed = parse(key, v)?,
            "mode" => self.mode = v.parse()?,
            "freeze_teachers" => self.freeze_teachers = parse_bool(key, v)?,
            "preset" => self.preset = v.parse()?,
            "max_steps" => self.max_steps = parse(key, v)?,
            "augment" => self.augment = parse_bool(key, v)?,
            "eval_count" => self.eval_count = parse(key, v)?,
            "eval_every" => self.eval_every = parse(key, v)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, v)?,
            "filter_d0" => self.filter_d0 = parse_auto(key, v)?,
            _ => return Err(Error::Config { key: key.into(), detail: "unknown key".into() }),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let auto = |o: Option<f64>| o.map_or("auto".to_string(), |v| v.to_string());
        Some(match key {
            "lr0" => self.lr0.to_string(),
            "momentum" => self.momentum.to_string(),
            "weight_decay" => self.weight_decay.to_string(),
            "power" => self.power.to_string(),
            "epochs" => self.epochs.to_string(),
            "batch" => self.batch.to_string(),
            "unlabeled_batch" => self.unlabeled_batch.to_string(),
            "lambda1" => self.weights.spa.to_string(),
            "lambda2" => self.weights.att.to_string(),
            "lambda" => self.weights.cps.to_string(),
            "label_ratio" => auto(self.label_ratio),
            "seed" => self.seed.to_string(),
            "mode" => self.mode.to_string(),
            "freeze_teachers" => self.freeze_teachers.to_string(),
            "preset" => self.preset.to_string(),
            "max_steps" => self.max_steps.to_string(),
            "augment" => self.augment.to_string(),
            "eval_count" => self.eval_count.to_string(),
            "eval_every" => self.eval_every.to_string(),
            "checkpoint_every" => self.checkpoint_every.to_string(),
            "filter_d0" => auto(self.filter_d0),
            _ => return None,
        })
    }

    /// Parses config text: one `key = value` per line, `#` comments.
    pub fn parse_text(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Config {
                key: format!("line {}", n + 1),
                detail: format!("expected `key = value`, got `{line}`"),
            })?;
            cfg.set(k.trim(), v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Canonical text form; parses back to an equal config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, _) in SCHEMA {
            let _ = writeln!(s, "{k} = {}", self.get(k).expect("schema key"));
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, detail: String| Err(Error::Config { key: key.into(), detail });
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad("lr0", format!("must be positive, got {}", self.lr0));
        }
        if !(self.power > 0.0 && self.power.is_finite()) {
            return bad("power", format!("must be positive, got {}", self.power));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum", format!("must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay", format!("must be non-negative, got {}", self.weight_decay));
        }
        if self.batch == 0 {
            return bad("batch", "must be at least 1".into());
        }
        if self.mode == Mode::Semi && self.unlabeled_batch == 0 {
            return bad("unlabeled_batch", "must be at least 1 in semi mode".into());
        }
        if self.epochs == 0 && self.max_steps == 0 {
            return bad("epochs", "no steps to run: epochs and max_steps are both 0".into());
        }
        if self.eval_count == 0 {
            return bad("eval_count", "must be at least 1".into());
        }
        if let Some(d0) = self.filter_d0 {
            if !(d0 > 0.0) {
                return bad("filter_d0", format!("must be positive, got {d0}"));
            }
        }
        self.weights.validate()
    }

    /// `--help` text listing every key with its default.
    pub fn help() -> String {
        let d = TrainConfig::default();
        let mut s = String::from("Config keys (key = value, one per line, # comments):\n");
        for (k, doc) in SCHEMA {
            let _ = writeln!(s, "  {k:<17} {doc} [default: {}]", d.get(k).expect("schema key"));
        }
        s
    }
}
