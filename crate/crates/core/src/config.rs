//! Flat `section.key=value` run configuration.
//!
//! Every key has a default; a config file overrides defaults and explicit
//! overrides (command-line flags) win over the file. Unknown keys and
//! malformed values are errors.

use std::collections::BTreeMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::image::{AugmentConfig, ChannelStats};
use crate::loss::LossConfig;
use crate::model::{BlockKind, Init, ModelConfig, PathConfig, PoolMode, StageSpec};

/// How the vision path is frozen over the run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Strategy {
    /// Both paths from scratch (Xavier vision init), trained jointly.
    Scratch = 1,
    /// Vision path frozen for the whole run.
    FrozenVision = 2,
    /// Both paths trained jointly from the standard vision init.
    Joint = 3,
    /// Vision frozen in stage 1, released in stage 2.
    TwoStage = 4,
}

impl Strategy {
    pub fn from_id(id: u32) -> Result<Self> {
        match id {
            1 => Ok(Strategy::Scratch),
            2 => Ok(Strategy::FrozenVision),
            3 => Ok(Strategy::Joint),
            4 => Ok(Strategy::TwoStage),
            other => Err(Error::Config(format!("strategy must be 1..4, got {other}"))),
        }
    }

    pub fn id(self) -> u32 {
        self as u32
    }
}

/// What stage 2 releases of the vision path.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Unfreeze {
    All,
    /// Only the last two residual stages.
    LastStages,
}

/// How normalization layers inside frozen vision stages behave in training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FrozenNorm {
    /// Normalize with batch statistics and keep refreshing the running ones.
    Batch,
    /// Normalize with the stored running statistics.
    Running,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ScheduleKind {
    /// The per-epoch table as is, one row per epoch.
    Full,
    /// The table squeezed so its first 80 epochs span the whole run.
    Compressed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Preset {
    Desk,
    Full,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

struct KeySpec {
    key: &'static str,
    default: &'static str,
    help: &'static str,
}

const KEYS: &[KeySpec] = &[
    KeySpec { key: "seed", default: "0", help: "top-level seed for every random stream" },
    KeySpec { key: "data.dir", default: "data", help: "dataset directory holding manifest.tsv" },
    KeySpec { key: "data.height", default: "96", help: "image height fed to the vision path" },
    KeySpec { key: "data.width", default: "32", help: "image width fed to the vision path" },
    KeySpec { key: "text.len", default: "120", help: "padded caption length" },
    KeySpec { key: "text.embed_dim", default: "64", help: "word embedding width" },
    KeySpec { key: "model.preset", default: "desk", help: "desk|full base architecture" },
    KeySpec { key: "model.pool", default: "gmp", help: "gap|gmp|both" },
    KeySpec { key: "model.gb", default: "on", help: "gated block on|off" },
    KeySpec { key: "model.reduction", default: "16", help: "gated block reduction ratio" },
    KeySpec { key: "model.batch_norm", default: "on", help: "normalization layers inside the paths" },
    KeySpec { key: "model.vision.init", default: "kaiming", help: "kaiming|xavier (strategy 1 forces xavier)" },
    KeySpec { key: "model.vision.widths", default: "", help: "stage widths, empty for the preset" },
    KeySpec { key: "model.vision.blocks", default: "", help: "blocks per stage, empty for the preset" },
    KeySpec { key: "model.vision.strides", default: "", help: "per-stage strides like 1x1,2x2" },
    KeySpec { key: "model.vision.kernel", default: "", help: "stage kernel like 3x3" },
    KeySpec { key: "model.vision.block", default: "", help: "basic|bottleneck" },
    KeySpec { key: "model.vision.stem_width", default: "", help: "stem output channels, empty for the preset" },
    KeySpec { key: "model.text.init", default: "xavier", help: "kaiming|xavier" },
    KeySpec { key: "model.text.widths", default: "", help: "stage widths, empty for the preset" },
    KeySpec { key: "model.text.blocks", default: "", help: "blocks per stage, empty for the preset" },
    KeySpec { key: "model.text.strides", default: "", help: "per-stage strides like 1x2" },
    KeySpec { key: "model.text.kernel", default: "", help: "stage kernel like 1x3" },
    KeySpec { key: "model.text.block", default: "", help: "basic|bottleneck" },
    KeySpec { key: "model.text.stem_width", default: "", help: "stem output channels, empty for the preset" },
    KeySpec { key: "loss.cmpm", default: "on", help: "projection matching loss" },
    KeySpec { key: "loss.cmpc", default: "on", help: "projection classification loss" },
    KeySpec { key: "loss.eps", default: "1e-8", help: "guard added to the match distribution" },
    KeySpec { key: "train.strategy", default: "4", help: "1..4 freezing strategy" },
    KeySpec { key: "train.stage1_epochs", default: "20", help: "epochs in stage 1" },
    KeySpec { key: "train.stage2_epochs", default: "20", help: "epochs in stage 2" },
    KeySpec { key: "train.batch", default: "16", help: "image-caption pairs per step" },
    KeySpec { key: "train.momentum", default: "0.9", help: "SGD momentum" },
    KeySpec { key: "train.schedule", default: "compressed", help: "full|compressed learning-rate table" },
    KeySpec { key: "train.unfreeze", default: "all", help: "all|last vision stages released in stage 2" },
    KeySpec { key: "train.bn_momentum", default: "0.1", help: "running-statistics update rate" },
    KeySpec { key: "train.frozen_bn", default: "batch", help: "batch|running statistics in frozen vision stages" },
    KeySpec { key: "train.lr_scale", default: "1", help: "multiplier on the learning-rate table" },
    KeySpec { key: "train.clip_norm", default: "1", help: "global gradient-norm ceiling, 0 disables" },
    KeySpec { key: "augment.pad", default: "3", help: "zero padding before the random crop" },
    KeySpec { key: "augment.flip", default: "0.5", help: "horizontal flip probability" },
];

fn spec(key: &str) -> Result<&'static KeySpec> {
    KEYS.iter()
        .find(|k| k.key == key)
        .ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))
}

fn parse_switch(key: &str, v: &str) -> Result<bool> {
    match v {
        "on" | "true" | "1" => Ok(true),
        "off" | "false" | "0" => Ok(false),
        _ => Err(Error::Config(format!("`{key}` must be on or off, got `{v}`"))),
    }
}

fn parse_list(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| Error::Config(format!("`{key}`: bad list entry `{s}`")))
        })
        .collect()
}

fn parse_pair(key: &str, v: &str) -> Result<(usize, usize)> {
    let (a, b) = v
        .split_once('x')
        .ok_or_else(|| Error::Config(format!("`{key}`: expected HxW, got `{v}`")))?;
    let p = |s: &str| {
        s.trim()
            .parse::<usize>()
            .map_err(|_| Error::Config(format!("`{key}`: bad extent `{s}`")))
    };
    Ok((p(a)?, p(b)?))
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            values: KEYS
                .iter()
                .map(|k| (k.key.to_owned(), k.default.to_owned()))
                .collect(),
        }
    }
}

impl RunConfig {
    /// `(key, default, help)` for every recognised key.
    pub fn documented_keys() -> impl Iterator<Item = (&'static str, &'static str, &'static str)> {
        KEYS.iter().map(|k| (k.key, k.default, k.help))
    }

    /// Parses `key=value` lines over the defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", n + 1)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        spec(key)?;
        if value.contains(['\n', '#']) {
            return Err(Error::Config(format!("`{key}`: value may not contain newlines or `#`")));
        }
        self.values.insert(key.to_owned(), value.to_owned());
        Ok(())
    }

    pub fn get(&self, key: &str) -> &str {
        spec(key).expect("documented key");
        &self.values[key]
    }

    /// Canonical text: every key, sorted, one `key=value` per line.
    pub fn to_text(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    /// First eight bytes of the SHA-256 of the canonical text.
    pub fn fingerprint(&self) -> u64 {
        let digest = Sha256::digest(self.to_text().as_bytes());
        u64::from_le_bytes(digest[..8].try_into().unwrap())
    }

    fn usize(&self, key: &str) -> Result<usize> {
        self.get(key)
            .parse()
            .map_err(|_| Error::Config(format!("`{key}` must be a non-negative integer, got `{}`", self.get(key))))
    }

    fn f64(&self, key: &str) -> Result<f64> {
        let v: f64 = self
            .get(key)
            .parse()
            .map_err(|_| Error::Config(format!("`{key}` must be a number, got `{}`", self.get(key))))?;
        if !v.is_finite() {
            return Err(Error::Config(format!("`{key}` must be finite")));
        }
        Ok(v)
    }

    fn switch(&self, key: &str) -> Result<bool> {
        parse_switch(key, self.get(key))
    }

    pub fn seed(&self) -> Result<u64> {
        self.get("seed")
            .parse()
            .map_err(|_| Error::Config(format!("`seed` must be an unsigned integer, got `{}`", self.get("seed"))))
    }

    pub fn data_dir(&self) -> &str {
        self.get("data.dir")
    }

    pub fn image_size(&self) -> Result<(usize, usize)> {
        Ok((self.usize("data.height")?, self.usize("data.width")?))
    }

    pub fn seq_len(&self) -> Result<usize> {
        self.usize("text.len")
    }

    pub fn embed_dim(&self) -> Result<usize> {
        self.usize("text.embed_dim")
    }

    pub fn preset(&self) -> Result<Preset> {
        match self.get("model.preset") {
            "desk" => Ok(Preset::Desk),
            "full" => Ok(Preset::Full),
            other => Err(Error::Config(format!("unknown preset `{other}` (desk|full)"))),
        }
    }

    pub fn strategy(&self) -> Result<Strategy> {
        let id = self
            .get("train.strategy")
            .parse()
            .map_err(|_| Error::Config("`train.strategy` must be 1..4".into()))?;
        Strategy::from_id(id)
    }

    pub fn stage_epochs(&self) -> Result<(usize, usize)> {
        Ok((self.usize("train.stage1_epochs")?, self.usize("train.stage2_epochs")?))
    }

    pub fn total_epochs(&self) -> Result<usize> {
        let (a, b) = self.stage_epochs()?;
        Ok(a + b)
    }

    pub fn batch_size(&self) -> Result<usize> {
        self.usize("train.batch")
    }

    pub fn momentum(&self) -> Result<f64> {
        self.f64("train.momentum")
    }

    pub fn bn_momentum(&self) -> Result<f64> {
        self.f64("train.bn_momentum")
    }

    pub fn schedule(&self) -> Result<ScheduleKind> {
        match self.get("train.schedule") {
            "full" => Ok(ScheduleKind::Full),
            "compressed" => Ok(ScheduleKind::Compressed),
            other => Err(Error::Config(format!("unknown schedule `{other}` (full|compressed)"))),
        }
    }

    pub fn frozen_norm(&self) -> Result<FrozenNorm> {
        match self.get("train.frozen_bn") {
            "batch" => Ok(FrozenNorm::Batch),
            "running" => Ok(FrozenNorm::Running),
            other => Err(Error::Config(format!("unknown frozen_bn mode `{other}` (batch|running)"))),
        }
    }

    pub fn lr_scale(&self) -> Result<f64> {
        let s = self.f64("train.lr_scale")?;
        if !(s.is_finite() && s > 0.0) {
            return Err(Error::Config(format!("`train.lr_scale` {s} must be positive")));
        }
        Ok(s)
    }

    /// Gradient-norm ceiling, `None` when clipping is off.
    pub fn clip_norm(&self) -> Result<Option<f64>> {
        let c = self.f64("train.clip_norm")?;
        if !(c.is_finite() && c >= 0.0) {
            return Err(Error::Config(format!("`train.clip_norm` {c} must be non-negative")));
        }
        Ok((c > 0.0).then_some(c))
    }

    pub fn unfreeze(&self) -> Result<Unfreeze> {
        match self.get("train.unfreeze") {
            "all" => Ok(Unfreeze::All),
            "last" => Ok(Unfreeze::LastStages),
            other => Err(Error::Config(format!("unknown unfreeze mode `{other}` (all|last)"))),
        }
    }

    pub fn loss(&self) -> Result<LossConfig> {
        let cfg = LossConfig {
            eps: self.f64("loss.eps")?,
            cmpm: self.switch("loss.cmpm")?,
            cmpc: self.switch("loss.cmpc")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn augment(&self, stats: ChannelStats) -> Result<AugmentConfig> {
        let cfg = AugmentConfig {
            pad: self.usize("augment.pad")?,
            hflip_prob: self.f64("augment.flip")?,
            stats,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn path_config(&self, which: &str, base: PathConfig) -> Result<PathConfig> {
        let mut p = base;
        let key = |s: &str| format!("model.{which}.{s}");
        p.init = self.get(&key("init")).parse::<Init>()?;
        p.batch_norm = self.switch("model.batch_norm")?;
        let kernel = self.get(&key("kernel"));
        if !kernel.is_empty() {
            p.kernel = parse_pair(&key("kernel"), kernel)?;
        }
        match self.get(&key("block")) {
            "" => {}
            "basic" => p.block = BlockKind::Basic,
            "bottleneck" => p.block = BlockKind::Bottleneck,
            other => return Err(Error::Config(format!("unknown block kind `{other}`"))),
        }
        let stem = self.get(&key("stem_width"));
        if !stem.is_empty() {
            p.stem.width = self.usize(&key("stem_width"))?;
        }
        let widths = self.get(&key("widths"));
        let blocks = self.get(&key("blocks"));
        let strides = self.get(&key("strides"));
        if !(widths.is_empty() && blocks.is_empty() && strides.is_empty()) {
            let n = p.stages.len();
            let widths = if widths.is_empty() { p.stages.iter().map(|s| s.width).collect() } else { parse_list(&key("widths"), widths)? };
            let blocks = if blocks.is_empty() { p.stages.iter().map(|s| s.blocks).collect() } else { parse_list(&key("blocks"), blocks)? };
            let strides = if strides.is_empty() {
                p.stages.iter().map(|s| s.stride).collect()
            } else {
                strides.split(',').map(|s| parse_pair(&key("strides"), s)).collect::<Result<Vec<_>>>()?
            };
            if widths.len() != blocks.len() || widths.len() != strides.len() {
                return Err(Error::Config(format!(
                    "model.{which}: widths, blocks and strides must list the same number of stages (preset has {n})"
                )));
            }
            p.stages = widths
                .into_iter()
                .zip(blocks)
                .zip(strides)
                .map(|((width, blocks), stride)| StageSpec { blocks, width, stride })
                .collect();
        }
        Ok(p)
    }

    /// Architecture for `num_classes` training identities. Strategy 1
    /// always initializes the vision path with Xavier.
    pub fn model_config(&self, num_classes: usize) -> Result<ModelConfig> {
        let dim = self.embed_dim()?;
        let (vision, text) = match self.preset()? {
            Preset::Desk => (PathConfig::vision_desk(), PathConfig::text_desk(dim)),
            Preset::Full => (PathConfig::vision_full(), PathConfig::text_full(dim)),
        };
        let mut vision = self.path_config("vision", vision)?;
        if self.strategy()? == Strategy::Scratch {
            vision.init = Init::Xavier;
        }
        let text = self.path_config("text", text)?;
        let cfg = ModelConfig {
            vision,
            text,
            pool: self.get("model.pool").parse::<PoolMode>()?,
            gated: self.switch("model.gb")?,
            reduction: self.usize("model.reduction")?,
            num_classes,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Checks every typed accessor so errors surface at load time.
    pub fn validate(&self) -> Result<()> {
        self.seed()?;
        let (h, w) = self.image_size()?;
        let len = self.seq_len()?;
        if len < 3 {
            return Err(Error::Config("`text.len` must leave room for a word".into()));
        }
        if self.embed_dim()? == 0 {
            return Err(Error::Config("`text.embed_dim` must be positive".into()));
        }
        self.strategy()?;
        self.stage_epochs()?;
        if self.batch_size()? < 2 {
            return Err(Error::Config("`train.batch` must be at least 2".into()));
        }
        let m = self.momentum()?;
        if !(0.0..1.0).contains(&m) {
            return Err(Error::Config(format!("momentum {m} outside [0, 1)")));
        }
        let bm = self.bn_momentum()?;
        if !(0.0..=1.0).contains(&bm) {
            return Err(Error::Config(format!("`train.bn_momentum` {bm} outside [0, 1]")));
        }
        self.schedule()?;
        self.unfreeze()?;
        self.frozen_norm()?;
        self.lr_scale()?;
        self.clip_norm()?;
        self.loss()?;
        self.augment(ChannelStats::default())?;
        let model = self.model_config(1)?;
        model.vision.output_shape(h, w)?;
        model.text.output_shape(1, len)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::DEFAULT_SEQ_LEN;

    #[test]
    fn defaults_are_valid_desk_settings() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.strategy().unwrap(), Strategy::TwoStage);
        assert_eq!(cfg.stage_epochs().unwrap(), (20, 20));
        assert_eq!(cfg.batch_size().unwrap(), 16);
        assert_eq!(cfg.seq_len().unwrap(), DEFAULT_SEQ_LEN);
        let m = cfg.model_config(32).unwrap();
        assert_eq!(m.pool, PoolMode::Gmp);
        assert!(m.gated);
    }

    #[test]
    fn unknown_keys_and_bad_values_fail() {
        assert!(matches!(RunConfig::parse("model.colour=red"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse("model.pool=median"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse("train.strategy=5"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse("text.len=42"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse("just words"), Err(Error::Config(_))));
    }

    #[test]
    fn fingerprint_ignores_key_order_and_comments() {
        let a = RunConfig::parse("seed=3\nmodel.pool=gap\n").unwrap();
        let b = RunConfig::parse("# reordered\nmodel.pool=gap  \n\nseed=3 # trailing\n").unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
        let c = RunConfig::parse("seed=4\nmodel.pool=gap\n").unwrap();
        assert_ne!(a.fingerprint(), c.fingerprint());
    }

    #[test]
    fn text_round_trips() {
        let a = RunConfig::parse("model.text.strides=1x1,1x2,1x2,1x1\nloss.cmpc=off").unwrap();
        assert_eq!(RunConfig::parse(&a.to_text()).unwrap(), a);
    }

    #[test]
    fn stage_overrides_reshape_the_path() {
        let cfg = RunConfig::parse("model.vision.widths=4,8,16,64\nmodel.text.widths=4,8,16,64").unwrap();
        let m = cfg.model_config(5).unwrap();
        assert_eq!(m.vision.stages[1].width, 8);
        assert_eq!(m.descriptor_dim(), 64);
    }
}
