//! Flat `key = value` run configuration.
//!
//! Keys are the field names of `RunConfig` and `EncoderConfig`. Values from
//! the file override built-in defaults; command-line flags override the file.

use std::path::Path;

use anyhow::{bail, Context, Result};
use ssml_core::encoder::EncoderConfig;
use ssml_core::losses::{MAGNATAGATUNE_R, MTG_JAMENDO_R};
use ssml_core::training::RunConfig;

#[derive(Debug, Clone, Default)]
pub struct Settings {
    pub run: RunConfig,
    pub encoder: EncoderConfig,
}

/// Named values of the base balancing factor `r`.
pub fn balance_preset(name: &str) -> Result<f64> {
    match name {
        "mtat" | "magnatagatune" => Ok(MAGNATAGATUNE_R),
        "mtg" | "mtg-jamendo" => Ok(MTG_JAMENDO_R),
        other => bail!("unknown balance preset {other:?} (expected mtat or mtg)"),
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e| anyhow::anyhow!("{key} = {value:?}: {e}"))
}

impl Settings {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let r = &mut self.run;
        let e = &mut self.encoder;
        match key {
            "fine_tune_augment" => r.fine_tune_augment = parse(key, value)?,
            "fine_tune_contrastive" => r.fine_tune_contrastive = parse(key, value)?,
            "load_pretrain" => r.load_pretrain = parse(key, value)?,
            "alpha" => r.alpha = parse(key, value)?,
            "balance_r" => {
                r.balance_r = match value.parse() {
                    Ok(v) => v,
                    Err(_) => balance_preset(value)?,
                }
            }
            "label_rate" => r.label_rate = parse(key, value)?,
            "batch_size" => r.batch_size = parse(key, value)?,
            "pretrain_lr" => r.pretrain_lr = parse(key, value)?,
            "finetune_lr" => r.finetune_lr = parse(key, value)?,
            "beta1" => r.beta1 = parse(key, value)?,
            "beta2" => r.beta2 = parse(key, value)?,
            "weight_decay" => r.weight_decay = parse(key, value)?,
            "max_epochs" => r.max_epochs = parse(key, value)?,
            "early_stop_patience" => r.early_stop_patience = parse(key, value)?,
            "plateau_patience" => r.plateau_patience = parse(key, value)?,
            "plateau_factor" => r.plateau_factor = parse(key, value)?,
            "temperature" => r.temperature = parse(key, value)?,
            "seed" => r.seed = parse(key, value)?,
            "levels" => e.levels = parse(key, value)?,
            "base_channels" => e.base_channels = parse(key, value)?,
            "embed_dim" => e.embed_dim = parse(key, value)?,
            "proj_dim" => e.proj_dim = parse(key, value)?,
            "tag_count" => e.tag_count = parse(key, value)?,
            other => bail!("unknown config key {other:?}"),
        }
        Ok(())
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                bail!("line {}: expected key = value", n + 1);
            };
            self.set(k.trim(), v.trim())
                .with_context(|| format!("line {}", n + 1))?;
        }
        Ok(())
    }

    pub fn load(path: Option<&Path>) -> Result<Self> {
        let mut s = Settings::default();
        if let Some(p) = path {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            s.apply_text(&text)
                .with_context(|| format!("in config {}", p.display()))?;
        }
        Ok(s)
    }
}
