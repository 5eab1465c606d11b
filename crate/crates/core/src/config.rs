//! Declarative run configuration: one TOML file, dotted `--set` overrides,
//! validation that names the offending field.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::catalog::CatalogConfig;
use crate::dataset::DatasetConfig;
use crate::error::{Error, Result};
use crate::eval::{EvalConfig, SweepAxis};
use crate::index::Bm25Params;
use crate::reward::RewardConfig;
use crate::rl::{DpoConfig, RlConfig};
use crate::serving::DEFAULT_TTL_SECS;
use crate::sft::SftConfig;

/// Environment variable naming the default config file.
pub const CONFIG_ENV: &str = "QRALIGN_CONFIG";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    pub bm25: Bm25Params,
    /// Depth of every recall set the engine returns.
    pub recall_depth: usize,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            bm25: Bm25Params::default(),
            recall_depth: 15,
        }
    }
}

/// Training stages run by `train`, in order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    /// Multi-task SFT (rewrite + tag).
    Sft,
    /// Rewrite-only SFT baseline.
    SftSingle,
    Grpo,
    Dpo,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Sft => "sft",
            Stage::SftSingle => "sft-single",
            Stage::Grpo => "grpo",
            Stage::Dpo => "dpo",
        }
    }

    /// Checkpoint file written by the stage, relative to the run directory.
    pub fn checkpoint(self) -> String {
        format!("checkpoints/{}.ckpt", self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub stages: Vec<Stage>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stages: vec![Stage::Sft, Stage::SftSingle, Stage::Grpo],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub axis: SweepAxis,
    pub values: Vec<usize>,
    /// Checkpoint decoded by the rewrite-number sweep. The beam-size sweep
    /// always retrains GRPO from the SFT checkpoint.
    pub model: Stage,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            axis: SweepAxis::RewriteNumber,
            values: vec![3, 4, 5],
            model: Stage::Grpo,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServeConfig {
    /// Stage whose checkpoint is served.
    pub model: Stage,
    pub ttl_secs: u64,
    /// Cache file, relative to the run directory.
    pub cache_file: PathBuf,
}

impl Default for ServeConfig {
    fn default() -> Self {
        Self {
            model: Stage::Grpo,
            ttl_secs: DEFAULT_TTL_SECS,
            cache_file: PathBuf::from("serve/cache.tsv"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub run_dir: PathBuf,
    pub catalog: CatalogConfig,
    pub engine: EngineConfig,
    pub dataset: DatasetConfig,
    pub reward: RewardConfig,
    pub sft: SftConfig,
    pub grpo: RlConfig,
    pub dpo: DpoConfig,
    pub eval: EvalConfig,
    pub train: TrainConfig,
    pub sweep: SweepConfig,
    pub serve: ServeConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            run_dir: PathBuf::from("runs/default"),
            catalog: CatalogConfig::default(),
            engine: EngineConfig::default(),
            dataset: DatasetConfig::default(),
            reward: RewardConfig::default(),
            sft: SftConfig::default(),
            grpo: RlConfig::default(),
            dpo: DpoConfig::default(),
            eval: EvalConfig::default(),
            train: TrainConfig::default(),
            sweep: SweepConfig::default(),
            serve: ServeConfig::default(),
        }
    }
}

fn check(ok: bool, message: impl FnOnce() -> String) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::Config(message()))
    }
}

impl RunConfig {
    /// Parses TOML, applies `key=value` overrides and validates.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let config: RunConfig = RunConfig::deserialize(toml::Value::Table(table))
            .map_err(|e| Error::Config(e.message().to_string()))?;
        config.validate()?;
        Ok(config)
    }

    /// Loads `path`, or the defaults when no path is given.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| match e.kind() {
                std::io::ErrorKind::NotFound => Error::Config(format!("config file {} not found", p.display())),
                _ => Error::io(p, e),
            })?,
            None => String::new(),
        };
        Self::from_toml(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).unwrap_or_default()
    }

    pub fn validate(&self) -> Result<()> {
        let c = &self.catalog;
        check(c.brands > 0, || "catalog.brands must be >= 1".into())?;
        check(c.categories > 0, || "catalog.categories must be >= 1".into())?;
        check(c.modifiers > 0, || "catalog.modifiers must be >= 1".into())?;
        check((0.0..=1.0).contains(&c.synonym_fraction), || {
            format!("catalog.synonym_fraction must lie in [0, 1], got {}", c.synonym_fraction)
        })?;
        check((0.0..=1.0).contains(&c.title_alias_rate), || {
            format!("catalog.title_alias_rate must lie in [0, 1], got {}", c.title_alias_rate)
        })?;
        let e = &self.engine;
        check(e.bm25.k1 >= 0.0 && e.bm25.k1.is_finite(), || "engine.bm25.k1 must be >= 0".into())?;
        check((0.0..=1.0).contains(&e.bm25.b), || "engine.bm25.b must lie in [0, 1]".into())?;
        check(e.recall_depth > 0, || "engine.recall_depth must be >= 1".into())?;
        let d = &self.dataset;
        check(d.rewrites_per_query > 0, || "dataset.rewrites_per_query must be >= 1".into())?;
        check((0.0..=1.0).contains(&d.alias_probability), || {
            "dataset.alias_probability must lie in [0, 1]".into()
        })?;
        check(d.eval_fraction > 0.0 && d.eval_fraction < 1.0, || {
            "dataset.eval_fraction must lie in (0, 1)".into()
        })?;
        check(d.click_depth > 0, || "dataset.click_depth must be >= 1".into())?;
        check(d.surfaces_per_intent > 0, || "dataset.surfaces_per_intent must be >= 1".into())?;
        self.reward.validate()?;
        self.sft.validate()?;
        self.grpo.validate()?;
        self.dpo.validate()?;
        self.eval.validate()?;
        check(!self.train.stages.is_empty(), || "train.stages must not be empty".into())?;
        check(!self.sweep.values.is_empty(), || "sweep.values must not be empty".into())?;
        check(self.sweep.values.iter().all(|&v| v > 0), || "sweep.values must all be >= 1".into())?;
        check(self.serve.ttl_secs > 0, || "serve.ttl_secs must be >= 1".into())?;
        check(!self.run_dir.as_os_str().is_empty(), || "run_dir must not be empty".into())?;
        check(self.serve.cache_file.is_relative(), || {
            "serve.cache_file must be relative to run_dir".into()
        })?;
        Ok(())
    }

    pub fn path(&self, relative: impl AsRef<Path>) -> PathBuf {
        self.run_dir.join(relative)
    }
}

/// Applies one `a.b.c=value` override. The value is read as a TOML literal
/// and falls back to a plain string.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {assignment:?} is not KEY=VALUE")))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(Error::Config(format!("override {assignment:?} has an empty key segment")));
    }
    let value = parse_literal(raw.trim());
    let mut segments: Vec<&str> = key.split('.').collect();
    let last = segments.pop().unwrap_or_default();
    let mut cursor = table;
    let mut walked = String::new();
    for seg in segments {
        if !walked.is_empty() {
            walked.push('.');
        }
        walked.push_str(seg);
        let slot = cursor
            .entry(seg.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cursor = slot
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("{walked} is not a section")))?;
    }
    cursor.insert(last.to_string(), value);
    Ok(())
}

fn parse_literal(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(RunConfig::from_toml("", &[]).unwrap(), RunConfig::default());
    }

    #[test]
    fn toml_round_trip() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&c.to_toml(), &[]).unwrap(), c);
    }

    #[test]
    fn dotted_overrides() {
        let c = RunConfig::from_toml(
            "[sft]\nepochs = 3\n",
            &[
                "sft.optimizer.learning_rate=0.5".into(),
                "grpo.reward=relevance".into(),
                "seed=9".into(),
                "run_dir=out/x".into(),
                "train.stages=[\"sft\", \"dpo\"]".into(),
            ],
        )
        .unwrap();
        assert_eq!(c.sft.epochs, 3);
        assert_eq!(c.sft.optimizer.learning_rate, 0.5);
        assert_eq!(c.grpo.reward, crate::reward::RewardKind::Relevance);
        assert_eq!(c.seed, 9);
        assert_eq!(c.run_dir, PathBuf::from("out/x"));
        assert_eq!(c.train.stages, [Stage::Sft, Stage::Dpo]);
    }

    #[test]
    fn unknown_field_is_named() {
        let err = RunConfig::from_toml("[sft]\nepochz = 3\n", &[]).unwrap_err().to_string();
        assert!(err.contains("epochz"), "{err}");
        let err = RunConfig::from_toml("", &["grpo.clipeps=0.1".into()]).unwrap_err().to_string();
        assert!(err.contains("clipeps"), "{err}");
    }

    #[test]
    fn invalid_value_names_field() {
        let err = RunConfig::from_toml("", &["grpo.clip_eps=1.5".into()]).unwrap_err().to_string();
        assert!(err.contains("grpo.clip_eps"), "{err}");
        let err = RunConfig::from_toml("", &["engine.recall_depth=0".into()]).unwrap_err().to_string();
        assert!(err.contains("engine.recall_depth"), "{err}");
        assert!(RunConfig::from_toml("", &["nokey".into()]).is_err());
        assert!(RunConfig::from_toml("", &["seed.x=1".into()]).is_err());
    }
}
