//! Flat key/value configuration for the CLI.
//!
//! Precedence, lowest to highest: built-in defaults, config file, CLI flags,
//! the MAMKIT_SEED environment variable. Unknown keys are rejected so typos
//! fail loudly. `rates` accepts fractions ("1/64") or decimals.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{bail, Context, Result};

use crate::model::MamConfig;
use crate::train::TrainConfig;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AppConfig {
    pub model: MamConfig,
    pub train: TrainConfig,
}

pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (ln, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            bail!("line {}: expected key = value, got {raw:?}", ln + 1);
        };
        let key = k.trim().to_string();
        if map.insert(key.clone(), v.trim().to_string()).is_some() {
            bail!("line {}: duplicate key {key}", ln + 1);
        }
    }
    Ok(map)
}

fn parse_rate(s: &str) -> Result<f64> {
    if let Some((n, d)) = s.split_once('/') {
        let n: f64 = n.trim().parse().context("rate numerator")?;
        let d: f64 = d.trim().parse().context("rate denominator")?;
        anyhow::ensure!(d != 0.0, "rate denominator is zero");
        Ok(n / d)
    } else {
        s.trim().parse().context("rate value")
    }
}

/// Apply parsed keys onto a config; every key must be known.
pub fn apply(map: &BTreeMap<String, String>, cfg: &mut AppConfig) -> Result<()> {
    for (key, value) in map {
        let ctx = || format!("config key {key}");
        match key.as_str() {
            "batch_size" => cfg.train.batch_size = value.parse().with_context(ctx)?,
            "lr_cnn" => cfg.train.lr_conv = value.parse().with_context(ctx)?,
            "lr_transformer" => cfg.train.lr_transformer = value.parse().with_context(ctx)?,
            "epochs" => cfg.train.max_epochs = value.parse().with_context(ctx)?,
            "patience" => cfg.train.patience = value.parse().with_context(ctx)?,
            "seed" => cfg.train.seed = value.parse().with_context(ctx)?,
            "rates" => {
                let parts: Vec<&str> = value.split(',').collect();
                anyhow::ensure!(parts.len() == 4, "rates needs 4 comma-separated values");
                for (i, p) in parts.iter().enumerate() {
                    cfg.model.cluster.rates[i] = parse_rate(p)?;
                }
            }
            "temperature" => cfg.model.cluster.temperature = value.parse().with_context(ctx)?,
            "model_width" => cfg.model.encoder.width = value.parse().with_context(ctx)?,
            "depth" => cfg.model.encoder.depth = value.parse().with_context(ctx)?,
            "heads" => cfg.model.encoder.heads = value.parse().with_context(ctx)?,
            "input" => {
                let n: usize = value.parse().with_context(ctx)?;
                cfg.model.input = (n, n);
            }
            _ => bail!("unknown config key {key}"),
        }
    }
    Ok(())
}

/// Load a config file (if any), then apply the env seed override.
pub fn load(path: Option<&Path>) -> Result<AppConfig> {
    let mut cfg = AppConfig::default();
    if let Some(p) = path {
        let text =
            std::fs::read_to_string(p).with_context(|| format!("read config {}", p.display()))?;
        apply(&parse_kv(&text)?, &mut cfg)?;
    }
    Ok(cfg)
}

/// MAMKIT_SEED wins over file and CLI values.
pub fn env_seed_override(cfg: &mut AppConfig) -> Result<()> {
    if let Ok(v) = std::env::var("MAMKIT_SEED") {
        cfg.train.seed = v
            .parse()
            .with_context(|| format!("MAMKIT_SEED value {v:?}"))?;
    }
    Ok(())
}
