//! Flat `key = value` run configuration.
//!
//! One assignment per line, `#` starts a comment. Unknown keys are errors.
//! `feat_dim` and `num_patches` normally come from the data instead.

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

pub const KEYS: &[&str] = &[
    "heads",
    "num_slots",
    "slot_dim",
    "feat_dim",
    "num_patches",
    "iters",
    "epsilon",
    "slot_mlp_hidden",
    "decoder_hidden",
    "layer_norm",
    "pos_encoding",
    "lr",
    "warmup_frac",
    "decay_rate",
    "epochs",
    "max_steps",
    "batch_size",
    "mask_strategy",
    "mask_percent",
    "head_select",
    "fusion_metric",
    "fusion_matcher",
    "seed",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("bad boolean `{value}` for `{key}`"))),
    }
}

impl RunConfig {
    /// Settings at the scale of the original experiments.
    pub fn paper() -> Self {
        Self::default()
    }

    /// Small settings that train in minutes on one CPU core.
    pub fn desk() -> Self {
        let mut cfg = Self::default();
        cfg.model.heads = 2;
        cfg.model.num_slots = 4;
        cfg.model.slot_dim = 32;
        cfg.model.slot_mlp_hidden = 64;
        cfg.model.decoder_hidden = 64;
        cfg.model.feat_dim = 16;
        cfg.model.num_patches = 64;
        cfg.train.max_steps = Some(200);
        cfg.train.lr_base = 1e-3;
        cfg
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let (m, t) = (&mut self.model, &mut self.train);
        match key {
            "heads" => m.heads = parse(key, value)?,
            "num_slots" => m.num_slots = parse(key, value)?,
            "slot_dim" => m.slot_dim = parse(key, value)?,
            "feat_dim" => m.feat_dim = parse(key, value)?,
            "num_patches" => m.num_patches = parse(key, value)?,
            "iters" => m.iters = parse(key, value)?,
            "epsilon" => m.epsilon = parse(key, value)?,
            "slot_mlp_hidden" => m.slot_mlp_hidden = parse(key, value)?,
            "decoder_hidden" => m.decoder_hidden = parse(key, value)?,
            "layer_norm" => m.layer_norm = parse_bool(key, value)?,
            "pos_encoding" => m.pos_encoding = value.parse()?,
            "lr" => t.lr_base = parse(key, value)?,
            "warmup_frac" => t.warmup_frac = parse(key, value)?,
            "decay_rate" => t.decay_rate = parse(key, value)?,
            "epochs" => t.epochs = parse(key, value)?,
            "max_steps" => {
                t.max_steps = match value {
                    "none" => None,
                    v => Some(parse(key, v)?),
                }
            }
            "batch_size" => t.batch_size = parse(key, value)?,
            "mask_strategy" => t.masking.strategy = value.parse()?,
            "mask_percent" => t.masking.m_percent = parse(key, value)?,
            "head_select" => t.head_select = value.parse()?,
            "fusion_metric" => t.fusion_metric = value.parse()?,
            "fusion_matcher" => t.fusion_matcher = value.parse()?,
            "seed" => {
                t.seed = parse(key, value)?;
                t.masking.seed = t.seed;
            }
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Applies `key=value` assignments from `text` on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            self.apply_assignment(line)
                .map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn apply_assignment(&mut self, assignment: &str) -> Result<()> {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected key=value, got `{assignment}`")))?;
        self.set(key.trim(), value.trim().trim_matches('"'))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }

    pub fn to_text(&self) -> String {
        let (m, t) = (&self.model, &self.train);
        let max_steps = t.max_steps.map_or("none".to_string(), |s| s.to_string());
        let lines = [
            format!("heads = {}", m.heads),
            format!("num_slots = {}", m.num_slots),
            format!("slot_dim = {}", m.slot_dim),
            format!("feat_dim = {}", m.feat_dim),
            format!("num_patches = {}", m.num_patches),
            format!("iters = {}", m.iters),
            format!("epsilon = {:e}", m.epsilon),
            format!("slot_mlp_hidden = {}", m.slot_mlp_hidden),
            format!("decoder_hidden = {}", m.decoder_hidden),
            format!("layer_norm = {}", m.layer_norm),
            format!("pos_encoding = {}", m.pos_encoding),
            format!("lr = {:e}", t.lr_base),
            format!("warmup_frac = {}", t.warmup_frac),
            format!("decay_rate = {}", t.decay_rate),
            format!("epochs = {}", t.epochs),
            format!("max_steps = {max_steps}"),
            format!("batch_size = {}", t.batch_size),
            format!("mask_strategy = {}", t.masking.strategy),
            format!("mask_percent = {}", t.masking.m_percent),
            format!("head_select = {}", t.head_select),
            format!("fusion_metric = {}", t.fusion_metric),
            format!("fusion_matcher = {}", t.fusion_matcher),
            format!("seed = {}", t.seed),
        ];
        lines.join("\n") + "\n"
    }
}
