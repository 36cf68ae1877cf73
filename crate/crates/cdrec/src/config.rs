//! Run configuration: one TOML table per module, unknown keys rejected.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use cdrec_core::{DenoiserConfig, MfConfig, NoiseSchedule, SamplingPlan, TrainConfig};
use serde::{Deserialize, Serialize};

/// Environment variable naming the data root.
pub const DATA_ROOT_ENV: &str = "CDREC_DATA_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    /// Minimum rating kept as an implicit interaction.
    pub threshold: f64,
    /// Train : validation : test proportions.
    pub ratios: [u32; 3],
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            threshold: 3.0,
            ratios: [8, 1, 1],
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CollabConfig {
    /// Externally trained embedding file; BPR-MF is trained when absent.
    pub embeddings: Option<PathBuf>,
    pub mf: MfConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub ks: Vec<usize>,
    /// One evaluation run per seed; several are averaged.
    pub seeds: Vec<u64>,
    /// Score the validation split every this many epochs during training.
    pub validate_every: usize,
    /// Sampling steps used for validation scoring.
    pub validation_steps: usize,
    /// Also exclude validation items from test-time candidates.
    pub exclude_validation: bool,
    /// Write a checkpoint every this many epochs (0 disables).
    pub checkpoint_every: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            ks: vec![5, 10],
            seeds: vec![0],
            validate_every: 1,
            validation_steps: 1,
            exclude_validation: false,
            checkpoint_every: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub data_root: PathBuf,
    /// Ratings file, relative to `data_root` unless absolute.
    pub ratings: PathBuf,
    /// Directory receiving every artifact of a run.
    pub out_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            data_root: PathBuf::from("data"),
            ratings: PathBuf::from("ml-100k/ratings.tsv"),
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

impl PathsConfig {
    pub fn ratings_path(&self) -> PathBuf {
        if self.ratings.is_absolute() {
            self.ratings.clone()
        } else {
            self.data_root.join(&self.ratings)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub corpus: CorpusConfig,
    pub schedule: NoiseSchedule,
    pub denoiser: DenoiserConfig,
    pub train: TrainConfig,
    pub sampler: SamplingPlan,
    pub collab: CollabConfig,
    pub eval: EvalConfig,
    pub paths: PathsConfig,
}

/// A `section.key=value` override; the value is read as a TOML literal and
/// falls back to a plain string.
pub fn parse_override(spec: &str) -> Result<(Vec<String>, toml::Value)> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| anyhow!("override `{spec}` is not of the form section.key=value"))?;
    let path: Vec<String> = key.trim().split('.').map(str::to_string).collect();
    if path.len() < 2 || path.iter().any(String::is_empty) {
        bail!("override key `{key}` must name a section and a field");
    }
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    Ok((path, value))
}

fn set_path(root: &mut toml::Table, path: &[String], value: toml::Value) -> Result<()> {
    let (last, parents) = path.split_last().expect("non-empty override path");
    let mut table = root;
    for p in parents {
        let entry = table.entry(p.clone()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| anyhow!("`{p}` is not a table"))?;
    }
    table.insert(last.clone(), value);
    Ok(())
}

impl RunConfig {
    /// Builds a configuration from an optional TOML file, the data-root
    /// environment variable and `section.key=value` overrides, in that order
    /// of precedence (later wins).
    pub fn load(file: Option<&Path>, data_root_env: Option<&str>, overrides: &[String]) -> Result<Self> {
        let mut table = match file {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                toml::from_str::<toml::Table>(&text).with_context(|| format!("parsing config {}", p.display()))?
            }
            None => toml::Table::new(),
        };
        if let Some(root) = data_root_env {
            set_path(&mut table, &["paths".into(), "data_root".into()], toml::Value::String(root.to_string()))?;
        }
        for o in overrides {
            let (path, value) = parse_override(o)?;
            set_path(&mut table, &path, value)?;
        }
        Self::from_table(table)
    }

    /// Deserializes a TOML table. A schedule horizon given without a bump
    /// width gets the default width `T / 10`.
    pub fn from_table(mut table: toml::Table) -> Result<Self> {
        if let Some(toml::Value::Table(s)) = table.get_mut("schedule") {
            if !s.contains_key("sigma") {
                if let Some(h) = s.get("horizon").and_then(|v| v.as_float().or(v.as_integer().map(|i| i as f64))) {
                    s.insert("sigma".into(), toml::Value::Float(h / 10.0));
                }
            }
        }
        let cfg: RunConfig = toml::Value::Table(table).try_into().context("invalid configuration")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        let mut table = toml::Table::try_from(self).context("serializing configuration")?;
        for o in overrides {
            let (path, value) = parse_override(o)?;
            set_path(&mut table, &path, value)?;
        }
        Self::from_table(table)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        self.denoiser.validate()?;
        self.train.validate()?;
        self.sampler.validate()?;
        if self.sampler.horizon != self.schedule.horizon {
            bail!(
                "sampler.horizon ({}) must equal schedule.horizon ({})",
                self.sampler.horizon,
                self.schedule.horizon
            );
        }
        if (self.denoiser.max_time as f64) < self.schedule.horizon {
            bail!(
                "denoiser.max_time ({}) must cover schedule.horizon ({})",
                self.denoiser.max_time,
                self.schedule.horizon
            );
        }
        if self.collab.mf.dim != self.denoiser.dim {
            bail!(
                "collab.mf.dim ({}) must equal denoiser.dim ({})",
                self.collab.mf.dim,
                self.denoiser.dim
            );
        }
        if self.eval.ks.is_empty() || self.eval.ks.contains(&0) {
            bail!("eval.ks must be a non-empty list of positive cutoffs");
        }
        if self.eval.validate_every == 0 || self.eval.validation_steps == 0 {
            bail!("eval.validate_every and eval.validation_steps must be positive");
        }
        if self.corpus.ratios.iter().sum::<u32>() == 0 {
            bail!("corpus.ratios must not all be zero");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let text = cfg.to_toml().unwrap();
        let back = RunConfig::from_table(toml::from_str(&text).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn overrides_and_unknown_keys() {
        let cfg = RunConfig::load(
            None,
            Some("/tmp/data"),
            &["train.lambda1=0.7".into(), "sampler.steps=5".into(), "train.pair_method=one_step".into()],
        )
        .unwrap();
        assert_eq!(cfg.train.lambda1, 0.7);
        assert_eq!(cfg.sampler.steps, 5);
        assert_eq!(cfg.train.pair_method, cdrec_core::PairMethod::OneStep);
        assert_eq!(cfg.paths.data_root, PathBuf::from("/tmp/data"));

        assert!(RunConfig::load(None, None, &["train.bogus=1".into()]).is_err());
        assert!(RunConfig::load(None, None, &["nosection=1".into()]).is_err());
        assert!(RunConfig::load(None, None, &["train.lambda1=3".into()]).is_err());
    }

    #[test]
    fn horizon_carries_default_width() {
        let cfg = RunConfig::load(
            None,
            None,
            &["schedule.horizon=100.0".into(), "sampler.horizon=100.0".into(), "denoiser.max_time=100".into()],
        )
        .unwrap();
        assert_eq!(cfg.schedule.sigma, 10.0);
        assert!(RunConfig::load(None, None, &["schedule.horizon=100.0".into()]).is_err());
    }
}
