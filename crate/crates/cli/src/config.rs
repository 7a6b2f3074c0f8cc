//! Flat key=value run configuration: optional file, then overrides,
//! with typed accessors and a canonical single-line echo that travels
//! inside checkpoints.

use depthformer_core::decoder::DepthRange;
use depthformer_core::model::ModelConfig;
use depthformer_core::train::TrainConfig;
use depthformer_core::{Error, Result};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

const KEYS: &[&str] = &[
    // model
    "patch_size",
    "embed_dim",
    "depths",
    "window",
    "heads",
    "num_levels",
    "conv_channels",
    "attn_heads",
    "attn_points",
    "use_conv_branch",
    "use_hahi",
    "silog_lambda",
    "silog_alpha",
    "d_min",
    "d_max",
    // optimization
    "iterations",
    "batch_size",
    "base_lr",
    "weight_decay",
    "warmup_frac",
    "seed",
    // synthetic data
    "scene_count",
    "scene_seed",
    "scene_h",
    "scene_w",
    "scene_rects",
];

#[derive(Clone, Debug, Default)]
pub struct RunConfig {
    map: BTreeMap<String, String>,
}

impl RunConfig {
    pub fn from_sources(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut cfg = RunConfig::default();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)?;
            for (lineno, line) in text.lines().enumerate() {
                let line = line.split('#').next().unwrap_or("").trim();
                if line.is_empty() {
                    continue;
                }
                cfg.set_pair(line).map_err(|e| {
                    Error::invalid(format!("{}:{}: {e}", path.display(), lineno + 1))
                })?;
            }
        }
        for pair in overrides {
            cfg.set_pair(pair)?;
        }
        Ok(cfg)
    }

    /// Parse the echo line a checkpoint carries.
    pub fn from_echo(echo: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for pair in echo.split_whitespace() {
            cfg.set_pair(pair)?;
        }
        Ok(cfg)
    }

    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (key, value) = pair
            .split_once('=')
            .ok_or_else(|| Error::invalid(format!("expected key=value, got {pair:?}")))?;
        let (key, value) = (key.trim(), value.trim());
        if !KEYS.contains(&key) {
            return Err(Error::invalid(format!(
                "unknown config key {key:?} (known: {})",
                KEYS.join(", ")
            )));
        }
        if value.contains(char::is_whitespace) || value.is_empty() {
            return Err(Error::invalid(format!("bad value for {key}: {value:?}")));
        }
        self.map.insert(key.to_string(), value.to_string());
        Ok(())
    }

    /// Canonical one-line form: every key that differs from nothing,
    /// sorted, space-separated.
    pub fn echo(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.map {
            let sep = if out.is_empty() { "" } else { " " };
            let _ = write!(out, "{sep}{k}={v}");
        }
        out
    }

    fn parse<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.map.get(key) {
            None => Ok(default),
            Some(raw) => raw
                .parse()
                .map_err(|_| Error::invalid(format!("bad value for {key}: {raw:?}"))),
        }
    }

    fn parse_list(&self, key: &str, default: &[usize]) -> Result<Vec<usize>> {
        match self.map.get(key) {
            None => Ok(default.to_vec()),
            Some(raw) => raw
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse()
                        .map_err(|_| Error::invalid(format!("bad value for {key}: {raw:?}")))
                })
                .collect(),
        }
    }

    pub fn model(&self) -> Result<ModelConfig> {
        let mut cfg = ModelConfig::desk_default();
        cfg.swin.patch_size = self.parse("patch_size", cfg.swin.patch_size)?;
        cfg.swin.embed_dim = self.parse("embed_dim", cfg.swin.embed_dim)?;
        cfg.swin.depths = self.parse_list("depths", &cfg.swin.depths)?;
        cfg.swin.window = self.parse("window", cfg.swin.window)?;
        cfg.swin.heads = self.parse_list("heads", &cfg.swin.heads)?;
        cfg.swin.num_levels = self.parse("num_levels", cfg.swin.num_levels)?;
        cfg.conv.channels = self.parse("conv_channels", cfg.conv.channels)?;
        cfg.attn.heads = self.parse("attn_heads", cfg.attn.heads)?;
        cfg.attn.points = self.parse("attn_points", cfg.attn.points)?;
        cfg.use_conv_branch = self.parse("use_conv_branch", cfg.use_conv_branch)?;
        cfg.use_hahi = self.parse("use_hahi", cfg.use_hahi)?;
        cfg.silog_lambda = self.parse("silog_lambda", cfg.silog_lambda)?;
        cfg.silog_alpha = self.parse("silog_alpha", cfg.silog_alpha)?;
        cfg.range = DepthRange {
            d_min: self.parse("d_min", cfg.range.d_min)?,
            d_max: self.parse("d_max", cfg.range.d_max)?,
        };
        Ok(cfg)
    }

    pub fn train(&self) -> Result<TrainConfig> {
        let d = TrainConfig::default();
        Ok(TrainConfig {
            iterations: self.parse("iterations", d.iterations)?,
            batch_size: self.parse("batch_size", d.batch_size)?,
            base_lr: self.parse("base_lr", d.base_lr)?,
            weight_decay: self.parse("weight_decay", d.weight_decay)?,
            warmup_frac: self.parse("warmup_frac", d.warmup_frac)?,
            seed: self.parse("seed", d.seed)?,
        })
    }

    pub fn scene_specs(&self) -> Result<Vec<depthformer_core::scene::SceneSpec>> {
        let model = self.model()?;
        Ok(depthformer_core::scene::scene_set(
            self.parse("scene_count", 8usize)?,
            self.parse("scene_seed", 42u64)?,
            self.parse("scene_h", 64usize)?,
            self.parse("scene_w", 64usize)?,
            model.range.d_min,
            model.range.d_max,
            self.parse("scene_rects", 4usize)?,
        ))
    }
}
