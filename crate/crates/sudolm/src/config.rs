//! Run configuration: one JSON file covering every stage, validated before
//! anything runs and copied alongside every artifact for provenance.
//!
//! Seed precedence: command-line flag, then config file, then the
//! `SUDOLM_SEED` environment variable, then the built-in default. All
//! stage randomness derives from this single global seed.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{self, SplitSpec};
use crate::error::{Error, Result};
use crate::rng::StageSeeds;
use crate::tokenizer::fnv1a64;

pub const DEFAULT_SEED: u64 = 7;
pub const SEED_ENV_VAR: &str = "SUDOLM_SEED";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub n_entities: usize,
    pub attrs_per_entity: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            n_entities: 200,
            attrs_per_entity: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    Record,
    Domain,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub mode: SplitMode,
    /// Record mode: fraction of entities that are privileged.
    pub fraction: f64,
    /// Domain mode: privileged attribute names.
    pub attributes: Vec<String>,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            mode: SplitMode::Record,
            fraction: 0.10,
            attributes: Vec::new(),
        }
    }
}

impl SplitConfig {
    pub fn spec(&self) -> SplitSpec {
        match self.mode {
            SplitMode::Record => SplitSpec::Record {
                fraction: self.fraction,
            },
            SplitMode::Domain => SplitSpec::Domain {
                attributes: self.attributes.iter().cloned().collect::<BTreeSet<_>>(),
            },
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KeyConfig {
    pub length: usize,
}

impl Default for KeyConfig {
    fn default() -> Self {
        KeyConfig { length: 10 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelShapeConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub context_len: usize,
}

impl Default for ModelShapeConfig {
    fn default() -> Self {
        ModelShapeConfig {
            n_layers: 4,
            n_heads: 4,
            d_model: 128,
            d_ff: 512,
            context_len: 128,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SftStageConfig {
    pub epochs: usize,
    pub lr: f32,
    pub batch_size: usize,
}

impl Default for SftStageConfig {
    fn default() -> Self {
        SftStageConfig {
            epochs: 30,
            lr: 3e-4,
            batch_size: 16,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlignStageConfig {
    pub epochs: usize,
    pub lr: f32,
    pub beta: f32,
    pub batch_size: usize,
    pub holdout_fraction: f64,
}

impl Default for AlignStageConfig {
    fn default() -> Self {
        AlignStageConfig {
            epochs: 4,
            lr: 1e-4,
            beta: 0.1,
            batch_size: 8,
            holdout_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalStageConfig {
    /// Privileged queries to evaluate (default: all).
    pub n_priv: Option<usize>,
    /// Public queries to evaluate (default: all).
    pub n_pub: Option<usize>,
    /// Also evaluate public queries with the key prefixed.
    pub keyed_public: bool,
    pub max_new: usize,
}

impl Default for EvalStageConfig {
    fn default() -> Self {
        EvalStageConfig {
            n_priv: None,
            n_pub: None,
            keyed_public: false,
            max_new: 14,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackStageConfig {
    pub lengths: Vec<usize>,
    pub keys_per_length: usize,
    /// Refusal status is decided by the response opening, so attack
    /// generations can stop early.
    pub max_new: usize,
}

impl Default for AttackStageConfig {
    fn default() -> Self {
        AttackStageConfig {
            lengths: vec![5, 10, 20],
            keys_per_length: 10,
            max_new: 8,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub out_dir: PathBuf,
    pub world: WorldConfig,
    pub split: SplitConfig,
    pub key: KeyConfig,
    pub model: ModelShapeConfig,
    pub sft: SftStageConfig,
    pub align: AlignStageConfig,
    pub eval: EvalStageConfig,
    pub attack: AttackStageConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: None,
            out_dir: PathBuf::from("runs/default"),
            world: WorldConfig::default(),
            split: SplitConfig::default(),
            key: KeyConfig::default(),
            model: ModelShapeConfig::default(),
            sft: SftStageConfig::default(),
            align: AlignStageConfig::default(),
            eval: EvalStageConfig::default(),
            attack: AttackStageConfig::default(),
        }
    }
}

/// Command-line overrides applied on top of the config file
/// (flag > file > default).
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            line: e.line(),
            msg: format!("config: {e}"),
        })
    }

    /// Loads the optional config file, applies overrides and the seed
    /// fallback chain, and validates.
    pub fn resolve(path: Option<&Path>, overrides: &Overrides) -> Result<RunConfig> {
        let mut cfg = match path {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = overrides.seed {
            cfg.seed = Some(seed);
        }
        if cfg.seed.is_none() {
            if let Ok(v) = std::env::var(SEED_ENV_VAR) {
                let parsed = v.parse::<u64>().map_err(|_| {
                    Error::InvalidArgument(format!("{SEED_ENV_VAR}={v:?} is not a u64"))
                })?;
                cfg.seed = Some(parsed);
            }
        }
        if cfg.seed.is_none() {
            cfg.seed = Some(DEFAULT_SEED);
        }
        if let Some(out) = &overrides.out_dir {
            cfg.out_dir = out.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn global_seed(&self) -> u64 {
        self.seed.expect("seed resolved")
    }

    pub fn stage_seeds(&self) -> StageSeeds {
        StageSeeds::derive(self.global_seed())
    }

    pub fn validate(&self) -> Result<()> {
        if self.world.n_entities < 2 || self.world.attrs_per_entity < 2 {
            return Err(Error::InvalidArgument(
                "world needs at least 2 entities and 2 attributes".into(),
            ));
        }
        if self.world.attrs_per_entity > corpus::max_attributes() {
            return Err(Error::InvalidArgument(format!(
                "attrs_per_entity {} exceeds the attribute bank ({})",
                self.world.attrs_per_entity,
                corpus::max_attributes()
            )));
        }
        match self.split.mode {
            SplitMode::Record => {
                if !(self.split.fraction > 0.0 && self.split.fraction < 1.0) {
                    return Err(Error::InvalidArgument(format!(
                        "split fraction must be in (0, 1), got {}",
                        self.split.fraction
                    )));
                }
            }
            SplitMode::Domain => {
                if self.split.attributes.is_empty() {
                    return Err(Error::InvalidArgument(
                        "domain split needs at least one attribute".into(),
                    ));
                }
            }
        }
        if self.key.length == 0 {
            return Err(Error::InvalidArgument("key length must be >= 1".into()));
        }
        if self.model.d_model == 0 || self.model.n_heads == 0 {
            return Err(Error::InvalidArgument("model dims must be positive".into()));
        }
        if self.model.d_model % self.model.n_heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "d_model {} not divisible by n_heads {}",
                self.model.d_model, self.model.n_heads
            )));
        }
        if self.sft.lr <= 0.0 || self.align.lr <= 0.0 || self.align.beta <= 0.0 {
            return Err(Error::InvalidArgument(
                "learning rates and beta must be positive".into(),
            ));
        }
        if self.sft.batch_size == 0 || self.align.batch_size == 0 {
            return Err(Error::InvalidArgument("batch sizes must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.align.holdout_fraction) {
            return Err(Error::InvalidArgument(
                "holdout fraction must be in [0, 1)".into(),
            ));
        }
        if self.eval.max_new == 0 || self.attack.max_new == 0 {
            return Err(Error::InvalidArgument("max_new must be positive".into()));
        }
        if self.attack.lengths.is_empty() || self.attack.keys_per_length == 0 {
            return Err(Error::InvalidArgument(
                "attack needs at least one length and one key per length".into(),
            ));
        }
        Ok(())
    }

    /// Canonical JSON (stable field order) written next to artifacts.
    pub fn to_canonical_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn hash(&self) -> u64 {
        fnv1a64(self.to_canonical_json().as_bytes())
    }
}
