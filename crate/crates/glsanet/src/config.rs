//! Run configuration: a flat `key = value` UTF-8 text format with `#`
//! comments. Unknown keys are rejected, and every cross-field invariant is
//! validated before any computation starts.

use crate::classifier::{BackboneConfig, LocalAggregation};
use crate::error::{Error, Result};
use crate::glsa::{GLSAConfig, Grouping};
use crate::grid::GridSpec;
use crate::saliency::ScoreSelect;
use sha2::{Digest, Sha256};
use std::path::Path;

/// How the scalar score X^o is chosen when building saliency targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum XoMode {
    Argmax,
    MeanPositive,
}

impl XoMode {
    pub fn as_score_select(self) -> ScoreSelect {
        match self {
            XoMode::Argmax => ScoreSelect::Argmax,
            XoMode::MeanPositive => ScoreSelect::MeanPositive,
        }
    }
}

/// Every tunable of the pipeline. See `Default` for the stock values.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub n: usize,
    pub s_n: usize,
    pub s_w: usize,
    pub s_h: usize,
    pub tau: f32,
    pub proximity: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub embed_dim: usize,
    pub conv_depth: usize,
    pub lr: f32,
    pub momentum: f32,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub input_size: usize,
    pub xo_mode: XoMode,
    pub grouping: Grouping,
    pub local_aggregation: LocalAggregation,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            n: 4,
            s_n: 6,
            s_w: 16,
            s_h: 16,
            tau: 0.5,
            proximity: 4,
            heads: 4,
            head_dim: 8,
            embed_dim: 32,
            conv_depth: 2,
            lr: 0.05,
            momentum: 0.9,
            epochs: 6,
            batch_size: 16,
            seed: 42,
            input_size: 64,
            xo_mode: XoMode::Argmax,
            grouping: Grouping::RowMajor,
            local_aggregation: LocalAggregation::ShareAndMean,
        }
    }
}

impl RunConfig {
    /// Parse `key = value` lines over the defaults. Unknown keys and
    /// malformed values fail; the result is validated.
    pub fn parse(text: &str) -> Result<Self> {
        let mut config = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`, got {raw:?}", lineno + 1))
            })?;
            config.set(key.trim(), value.trim()).map_err(|e| match e {
                Error::Config(msg) => Error::Config(format!("line {}: {msg}", lineno + 1)),
                other => other,
            })?;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("bad value {value:?} for key {key:?}")))
        }
        match key {
            "n" => self.n = num(key, value)?,
            "s_n" => self.s_n = num(key, value)?,
            "s_w" => self.s_w = num(key, value)?,
            "s_h" => self.s_h = num(key, value)?,
            "tau" => self.tau = num(key, value)?,
            "proximity" => self.proximity = num(key, value)?,
            "heads" => self.heads = num(key, value)?,
            "head_dim" => self.head_dim = num(key, value)?,
            "embed_dim" => self.embed_dim = num(key, value)?,
            "conv_depth" => self.conv_depth = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "momentum" => self.momentum = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "input_size" => self.input_size = num(key, value)?,
            "xo_mode" => {
                self.xo_mode = match value {
                    "argmax" => XoMode::Argmax,
                    "mean-positive" => XoMode::MeanPositive,
                    _ => {
                        return Err(Error::Config(format!(
                            "xo_mode must be argmax or mean-positive, got {value:?}"
                        )))
                    }
                }
            }
            "grouping" => {
                self.grouping = match value {
                    "row-major" => Grouping::RowMajor,
                    "2d-block" => Grouping::Block2d,
                    _ => {
                        return Err(Error::Config(format!(
                            "grouping must be row-major or 2d-block, got {value:?}"
                        )))
                    }
                }
            }
            "local_aggregation" => {
                self.local_aggregation = match value {
                    "share-and-mean" => LocalAggregation::ShareAndMean,
                    "stack-channels" => LocalAggregation::StackChannels,
                    _ => {
                        return Err(Error::Config(format!(
                            "local_aggregation must be share-and-mean or stack-channels, got {value:?}"
                        )))
                    }
                }
            }
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Check every invariant that is decidable from the config alone.
    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 {
            return Err(Error::Config("input_size must be >= 1".into()));
        }
        self.grid_spec().validate_for(self.input_size, self.input_size)?;
        if self.input_size / self.n < 3 {
            return Err(Error::Config(format!(
                "entities are {}x{} pixels, below the 3x3 depthwise kernel",
                self.input_size / self.n,
                self.input_size / self.n
            )));
        }
        self.glsa_config().validate()?;
        if self.lr < 0.0 {
            return Err(Error::Config(format!("lr = {} must be >= 0", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum = {} outside [0,1)", self.momentum)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        Ok(())
    }

    pub fn grid_spec(&self) -> GridSpec {
        GridSpec { n: self.n, s_n: self.s_n, s_w: self.s_w, s_h: self.s_h, tau: self.tau }
    }

    pub fn glsa_config(&self) -> GLSAConfig {
        GLSAConfig {
            n: self.n,
            embed_dim: self.embed_dim,
            proximity: self.proximity,
            heads: self.heads,
            head_dim: self.head_dim,
            conv_depth: self.conv_depth,
            grouping: self.grouping,
        }
    }

    pub fn backbone_config(&self) -> BackboneConfig {
        BackboneConfig::small()
    }

    /// Canonical rendering: every key once, sorted, `key = value` per line.
    /// The config hash is computed over exactly this text.
    pub fn canonical_string(&self) -> String {
        let xo = match self.xo_mode {
            XoMode::Argmax => "argmax",
            XoMode::MeanPositive => "mean-positive",
        };
        let grouping = match self.grouping {
            Grouping::RowMajor => "row-major",
            Grouping::Block2d => "2d-block",
        };
        let agg = match self.local_aggregation {
            LocalAggregation::ShareAndMean => "share-and-mean",
            LocalAggregation::StackChannels => "stack-channels",
        };
        let mut pairs = vec![
            ("batch_size", self.batch_size.to_string()),
            ("conv_depth", self.conv_depth.to_string()),
            ("embed_dim", self.embed_dim.to_string()),
            ("epochs", self.epochs.to_string()),
            ("grouping", grouping.to_string()),
            ("head_dim", self.head_dim.to_string()),
            ("heads", self.heads.to_string()),
            ("input_size", self.input_size.to_string()),
            ("local_aggregation", agg.to_string()),
            ("lr", format!("{}", self.lr)),
            ("momentum", format!("{}", self.momentum)),
            ("n", self.n.to_string()),
            ("proximity", self.proximity.to_string()),
            ("s_h", self.s_h.to_string()),
            ("s_n", self.s_n.to_string()),
            ("s_w", self.s_w.to_string()),
            ("seed", self.seed.to_string()),
            ("tau", format!("{}", self.tau)),
            ("xo_mode", xo.to_string()),
        ];
        pairs.sort_by(|a, b| a.0.cmp(b.0));
        pairs.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// First 8 bytes of the SHA-256 of the canonical rendering, hex.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical_string().as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}
