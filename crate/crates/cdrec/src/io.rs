//! File formats: ratings input, split manifests, embedding tables and
//! checkpoints.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use cdrec_core::autograd::ParamStore;
use cdrec_core::corpus::{self, IdMaps};
use cdrec_core::{EmbeddingBundle, EmbeddingSource, Event, InteractionLog, SplitBundle};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;

/// Reads a `user item rating timestamp` file (tab or comma separated).
pub fn load_interactions(path: &Path, threshold: f64) -> Result<(InteractionLog, IdMaps)> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    corpus::parse_interactions(&text, threshold).with_context(|| format!("parsing {}", path.display()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitStats {
    pub n_users: usize,
    pub n_items: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
}

/// A split together with the original identifiers of its dense ids.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedSplit {
    pub split: SplitBundle,
    pub ids: IdMaps,
}

impl PreparedSplit {
    pub fn stats(&self) -> SplitStats {
        SplitStats {
            n_users: self.split.train.n_users,
            n_items: self.split.train.n_items,
            n_train: self.split.train.len(),
            n_val: self.split.validation.len(),
            n_test: self.split.test.len(),
        }
    }
}

fn write_events(path: &Path, log: &InteractionLog) -> Result<()> {
    let mut out = String::new();
    for e in &log.events {
        writeln!(out, "{}\t{}\t{}\t{}", e.user, e.item, e.rating, e.timestamp)?;
    }
    fs::write(path, out).with_context(|| format!("writing {}", path.display()))
}

fn read_events(path: &Path, n_users: usize, n_items: usize) -> Result<InteractionLog> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut events = Vec::new();
    for (no, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 4 {
            bail!("{}:{}: expected 4 tab-separated fields", path.display(), no + 1);
        }
        let bad = |what: &str| anyhow!("{}:{}: bad {what}", path.display(), no + 1);
        events.push(Event {
            user: f[0].parse().map_err(|_| bad("user"))?,
            item: f[1].parse().map_err(|_| bad("item"))?,
            rating: f[2].parse().map_err(|_| bad("rating"))?,
            timestamp: f[3].parse().map_err(|_| bad("timestamp"))?,
        });
    }
    let log = InteractionLog {
        events,
        n_users,
        n_items,
    };
    log.validate().with_context(|| format!("validating {}", path.display()))?;
    Ok(log)
}

fn write_lines(path: &Path, lines: &[String]) -> Result<()> {
    let mut text = lines.join("\n");
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    Ok(fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))?
        .lines()
        .map(str::to_string)
        .collect())
}

/// Writes `train.tsv`, `valid.tsv`, `test.tsv` (dense ids), `users.txt`,
/// `items.txt` (original ids by dense id) and `stats.json` into `dir`.
pub fn write_split(dir: &Path, prepared: &PreparedSplit) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    write_events(&dir.join("train.tsv"), &prepared.split.train)?;
    write_events(&dir.join("valid.tsv"), &prepared.split.validation)?;
    write_events(&dir.join("test.tsv"), &prepared.split.test)?;
    write_lines(&dir.join("users.txt"), &prepared.ids.users)?;
    write_lines(&dir.join("items.txt"), &prepared.ids.items)?;
    let stats = serde_json::to_string_pretty(&prepared.stats())?;
    fs::write(dir.join("stats.json"), stats + "\n")?;
    Ok(())
}

pub fn read_split(dir: &Path) -> Result<PreparedSplit> {
    let stats_path = dir.join("stats.json");
    let stats: SplitStats = serde_json::from_str(
        &fs::read_to_string(&stats_path).with_context(|| format!("reading {}", stats_path.display()))?,
    )?;
    let (n, m) = (stats.n_users, stats.n_items);
    let split = SplitBundle {
        train: read_events(&dir.join("train.tsv"), n, m)?,
        validation: read_events(&dir.join("valid.tsv"), n, m)?,
        test: read_events(&dir.join("test.tsv"), n, m)?,
    };
    let ids = IdMaps {
        users: read_lines(&dir.join("users.txt"))?,
        items: read_lines(&dir.join("items.txt"))?,
    };
    if ids.users.len() != n || ids.items.len() != m {
        bail!("id maps in {} do not match stats.json", dir.display());
    }
    let prepared = PreparedSplit { split, ids };
    if prepared.stats() != stats {
        bail!("split files in {} do not match stats.json", dir.display());
    }
    Ok(prepared)
}

/// Text embedding file: a header `n m d`, then `n` user rows and `m` item
/// rows of `d` space-separated reals. Values are written in shortest
/// round-trip form.
pub fn write_embeddings(path: &Path, bundle: &EmbeddingBundle) -> Result<()> {
    bundle.validate()?;
    let mut out = format!("{} {} {}\n", bundle.n_users, bundle.n_items, bundle.dim);
    for row in bundle.users.chunks(bundle.dim).chain(bundle.items.chunks(bundle.dim)) {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        out.push_str(&cells.join(" "));
        out.push('\n');
    }
    fs::write(path, out).with_context(|| format!("writing {}", path.display()))
}

/// Reads an embedding file and checks it against the corpus dimensions.
pub fn load_embeddings(path: &Path, n_users: usize, n_items: usize) -> Result<EmbeddingBundle> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or_else(|| anyhow!("{}: empty embedding file", path.display()))?;
    let dims: Vec<usize> = header
        .split_whitespace()
        .map(str::parse)
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| anyhow!("{}: header must be `n m d`", path.display()))?;
    let [n, m, d] = dims[..] else {
        bail!("{}: header must be `n m d`", path.display());
    };
    if n != n_users || m != n_items {
        bail!(
            "{}: embedding tables are {n} users x {m} items, corpus expects {n_users} x {n_items}",
            path.display()
        );
    }
    let mut values = Vec::with_capacity((n + m) * d);
    let mut rows = 0;
    for (no, line) in lines {
        let row: Vec<f64> = line
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| anyhow!("{}:{}: unparsable value", path.display(), no + 1))?;
        if row.len() != d {
            bail!("{}:{}: expected {d} values, found {}", path.display(), no + 1, row.len());
        }
        if let Some(v) = row.iter().find(|v| !v.is_finite()) {
            bail!("{}:{}: non-finite entry {v}", path.display(), no + 1);
        }
        values.extend(row);
        rows += 1;
    }
    if rows != n + m {
        bail!("{}: expected {} rows, found {rows}", path.display(), n + m);
    }
    let items = values.split_off(n * d);
    let bundle = EmbeddingBundle {
        n_users: n,
        n_items: m,
        dim: d,
        users: values,
        items,
        source: EmbeddingSource::Loaded,
    };
    bundle.validate()?;
    Ok(bundle)
}

pub const CHECKPOINT_FORMAT: &str = "cdrec-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Denoiser weights, EMA target and the configuration that produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub epoch: usize,
    pub config: RunConfig,
    pub n_users: usize,
    pub n_items: usize,
    pub params: ParamStore,
    /// EMA target; absent in intermediate checkpoints.
    pub target: Option<ParamStore>,
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let text = serde_json::to_string(ckpt)?;
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, text).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("renaming into {}", path.display()))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let ckpt: Checkpoint = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    if ckpt.format != CHECKPOINT_FORMAT || ckpt.version != CHECKPOINT_VERSION {
        bail!(
            "{}: unsupported checkpoint {} v{}",
            path.display(),
            ckpt.format,
            ckpt.version
        );
    }
    Ok(ckpt)
}
