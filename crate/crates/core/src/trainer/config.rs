//! Flat `key = value` configuration with dotted keys.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::data::SyntheticSpec;
use crate::error::{Error, Result};
use crate::helix::{EmbedMode, VariantKind};
use crate::model::ModelConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct Stage1Config {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch: usize,
    pub epochs: usize,
    pub decay_epochs: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stage2Config {
    pub lr: f64,
    pub backbone_momentum: f64,
    pub backbone_weight_decay: f64,
    pub epochs: usize,
    pub decay_epochs: Vec<usize>,
    pub episodes_per_epoch: usize,
    pub val_every: usize,
    pub val_episodes: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeConfig {
    pub way: usize,
    pub shot: usize,
    pub query_per_class: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
    pub episode: EpisodeConfig,
    /// Learning-rate multiplier applied at each decay epoch.
    pub decay_factor: f64,
    pub eval_episodes: usize,
    pub seed: u64,
    pub synth: SyntheticSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            stage1: Stage1Config {
                lr: 0.1,
                momentum: 0.9,
                weight_decay: 5e-4,
                batch: 128,
                epochs: 200,
                decay_epochs: vec![85, 170],
            },
            stage2: Stage2Config {
                lr: 1e-3,
                backbone_momentum: 0.9,
                backbone_weight_decay: 1e-3,
                epochs: 130,
                decay_epochs: vec![70, 110],
                episodes_per_epoch: 100,
                val_every: 5,
                val_episodes: 200,
            },
            episode: EpisodeConfig {
                way: 5,
                shot: 1,
                query_per_class: 15,
            },
            decay_factor: 0.1,
            eval_episodes: 2000,
            seed: 0,
            synth: SyntheticSpec::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    if value.trim().is_empty() {
        return Ok(vec![]);
    }
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn parse_switch(key: &str, value: &str) -> Result<bool> {
    match value {
        "on" | "true" | "1" => Ok(true),
        "off" | "false" | "0" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected on/off, got {value:?}"))),
    }
}

fn list(v: &[usize]) -> String {
    v.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(",")
}

impl TrainConfig {
    /// Every key with its current value, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let m = &self.model;
        let h = &m.helix;
        let s1 = &self.stage1;
        let s2 = &self.stage2;
        let sy = &self.synth;
        vec![
            ("seed", self.seed.to_string()),
            ("model.channels", m.channels.to_string()),
            ("model.image_size", m.image_size.to_string()),
            ("model.pooled_blocks", m.pooled_blocks.to_string()),
            ("helix.variant", h.variant.to_string()),
            ("helix.heads", h.heads.to_string()),
            ("helix.stack", h.stack.to_string()),
            ("helix.embed", h.embed.to_string()),
            ("helix.rep", if h.rep { "on" } else { "off" }.into()),
            ("episode.way", self.episode.way.to_string()),
            ("episode.shot", self.episode.shot.to_string()),
            ("episode.query", self.episode.query_per_class.to_string()),
            ("train.decay_factor", self.decay_factor.to_string()),
            ("stage1.lr", s1.lr.to_string()),
            ("stage1.momentum", s1.momentum.to_string()),
            ("stage1.weight_decay", s1.weight_decay.to_string()),
            ("stage1.batch", s1.batch.to_string()),
            ("stage1.epochs", s1.epochs.to_string()),
            ("stage1.decay_epochs", list(&s1.decay_epochs)),
            ("stage2.lr", s2.lr.to_string()),
            ("stage2.backbone_momentum", s2.backbone_momentum.to_string()),
            ("stage2.backbone_weight_decay", s2.backbone_weight_decay.to_string()),
            ("stage2.epochs", s2.epochs.to_string()),
            ("stage2.decay_epochs", list(&s2.decay_epochs)),
            ("stage2.episodes", s2.episodes_per_epoch.to_string()),
            ("stage2.val_every", s2.val_every.to_string()),
            ("stage2.val_episodes", s2.val_episodes.to_string()),
            ("eval.episodes", self.eval_episodes.to_string()),
            ("synth.genera", sy.genera.to_string()),
            ("synth.species", sy.species_per_genus.to_string()),
            ("synth.samples", sy.samples_per_species.to_string()),
            ("synth.image_size", sy.image_size.to_string()),
            ("synth.part_size", sy.part_size.to_string()),
            ("synth.max_rotation", sy.max_rotation.to_string()),
            ("synth.max_translation", sy.max_translation.to_string()),
            ("synth.max_hue", sy.max_hue.to_string()),
            ("synth.noise", sy.noise_std.to_string()),
            ("synth.val_genera", sy.val_genera.to_string()),
            ("synth.novel_genera", sy.novel_genera.to_string()),
        ]
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let k = key.trim();
        match k {
            "seed" => self.seed = parse(k, v)?,
            "model.channels" => self.model.channels = parse(k, v)?,
            "model.image_size" => self.model.image_size = parse(k, v)?,
            "model.pooled_blocks" => self.model.pooled_blocks = parse(k, v)?,
            "helix.variant" => self.model.helix.variant = v.parse::<VariantKind>()?,
            "helix.heads" => self.model.helix.heads = parse(k, v)?,
            "helix.stack" => self.model.helix.stack = parse(k, v)?,
            "helix.embed" => self.model.helix.embed = v.parse::<EmbedMode>()?,
            "helix.rep" => self.model.helix.rep = parse_switch(k, v)?,
            "episode.way" => self.episode.way = parse(k, v)?,
            "episode.shot" => self.episode.shot = parse(k, v)?,
            "episode.query" => self.episode.query_per_class = parse(k, v)?,
            "train.decay_factor" => self.decay_factor = parse(k, v)?,
            "stage1.lr" => self.stage1.lr = parse(k, v)?,
            "stage1.momentum" => self.stage1.momentum = parse(k, v)?,
            "stage1.weight_decay" => self.stage1.weight_decay = parse(k, v)?,
            "stage1.batch" => self.stage1.batch = parse(k, v)?,
            "stage1.epochs" => self.stage1.epochs = parse(k, v)?,
            "stage1.decay_epochs" => self.stage1.decay_epochs = parse_list(k, v)?,
            "stage2.lr" => self.stage2.lr = parse(k, v)?,
            "stage2.backbone_momentum" => self.stage2.backbone_momentum = parse(k, v)?,
            "stage2.backbone_weight_decay" => self.stage2.backbone_weight_decay = parse(k, v)?,
            "stage2.epochs" => self.stage2.epochs = parse(k, v)?,
            "stage2.decay_epochs" => self.stage2.decay_epochs = parse_list(k, v)?,
            "stage2.episodes" => self.stage2.episodes_per_epoch = parse(k, v)?,
            "stage2.val_every" => self.stage2.val_every = parse(k, v)?,
            "stage2.val_episodes" => self.stage2.val_episodes = parse(k, v)?,
            "eval.episodes" => self.eval_episodes = parse(k, v)?,
            "synth.genera" => self.synth.genera = parse(k, v)?,
            "synth.species" => self.synth.species_per_genus = parse(k, v)?,
            "synth.samples" => self.synth.samples_per_species = parse(k, v)?,
            "synth.image_size" => self.synth.image_size = parse(k, v)?,
            "synth.part_size" => self.synth.part_size = parse(k, v)?,
            "synth.max_rotation" => self.synth.max_rotation = parse(k, v)?,
            "synth.max_translation" => self.synth.max_translation = parse(k, v)?,
            "synth.max_hue" => self.synth.max_hue = parse(k, v)?,
            "synth.noise" => self.synth.noise_std = parse(k, v)?,
            "synth.val_genera" => self.synth.val_genera = parse(k, v)?,
            "synth.novel_genera" => self.synth.novel_genera = parse(k, v)?,
            _ => return Err(Error::Config(format!("unknown key {k:?}"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of the current values. Blank lines
    /// and `#` comments are skipped; a repeated key keeps its last value.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            self.set(k, v)
                .map_err(|e| Error::Config(format!("line {}: {}", n + 1, strip_prefix(&e))))?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        for (name, decays, total) in [
            ("stage1", &self.stage1.decay_epochs, self.stage1.epochs),
            ("stage2", &self.stage2.decay_epochs, self.stage2.epochs),
        ] {
            if decays.windows(2).any(|w| w[0] >= w[1]) || decays.last().is_some_and(|&d| d > total) {
                return Err(Error::Config(format!(
                    "{name}.decay_epochs must be strictly increasing and at most {name}.epochs"
                )));
            }
        }
        if self.episode.way < 2 || self.episode.shot == 0 || self.episode.query_per_class == 0 {
            return Err(Error::Config("episodes need way >= 2 and positive shot/query".into()));
        }
        if self.stage1.batch == 0 || self.stage2.val_every == 0 {
            return Err(Error::Config("stage1.batch and stage2.val_every must be positive".into()));
        }
        Ok(())
    }
}

fn strip_prefix(e: &Error) -> String {
    match e {
        Error::Config(m) => m.clone(),
        other => other.to_string(),
    }
}

/// Piecewise-constant schedule: `base · factor^k` where `k` counts decay
/// epochs at or before `epoch` (0-based).
pub fn lr_at(base: f64, decay_epochs: &[usize], factor: f64, epoch: usize) -> f64 {
    let k = decay_epochs.iter().filter(|&&d| d <= epoch).count();
    base * factor.powi(k as i32)
}
