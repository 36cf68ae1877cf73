//! Experiment orchestration: prepare, embed, train, evaluate, recommend,
//! sweep and trace, each reading and writing files under `paths.out_dir`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use cdrec_core::collab::train_fallback_mf;
use cdrec_core::corpus::split_chronological;
use cdrec_core::metrics::{self, evaluate_ranker, MostPopular};
use cdrec_core::rng::{self, purpose};
use cdrec_core::sampler::{masking_time_correlation, trace_forward};
use cdrec_core::training::{FitSummary, Trainer, TrainingSet};
use cdrec_core::{Denoiser, EmbeddingBundle, MetricsReport, SamplingPlan};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::io::{self, Checkpoint, PreparedSplit, SplitStats};

/// Artifact layout of one run directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunPaths {
    pub root: PathBuf,
}

impl RunPaths {
    pub fn new(cfg: &RunConfig) -> Self {
        RunPaths {
            root: cfg.paths.out_dir.clone(),
        }
    }
    pub fn split_dir(&self) -> PathBuf {
        self.root.join("split")
    }
    pub fn embeddings(&self) -> PathBuf {
        self.root.join("embeddings.txt")
    }
    pub fn checkpoint_dir(&self) -> PathBuf {
        self.root.join("checkpoints")
    }
    pub fn best_checkpoint(&self) -> PathBuf {
        self.checkpoint_dir().join("best.json")
    }
    pub fn model(&self) -> PathBuf {
        self.root.join("model.json")
    }
    pub fn train_log(&self) -> PathBuf {
        self.root.join("train_log.jsonl")
    }
    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.json")
    }
    pub fn baselines(&self) -> PathBuf {
        self.root.join("baselines.json")
    }
    pub fn config(&self) -> PathBuf {
        self.root.join("config.toml")
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

/// Ingests the ratings file and writes the chronological split.
pub fn prepare(cfg: &RunConfig) -> Result<SplitStats> {
    let paths = RunPaths::new(cfg);
    let (log, ids) = io::load_interactions(&cfg.paths.ratings_path(), cfg.corpus.threshold)?;
    let [a, b, c] = cfg.corpus.ratios;
    let split = split_chronological(&log, (a, b, c))?;
    let prepared = PreparedSplit { split, ids };
    io::write_split(&paths.split_dir(), &prepared)?;
    fs::write(paths.config(), cfg.to_toml()?)?;
    let stats = prepared.stats();
    log::info!(
        "prepared {} users, {} items: {} train / {} validation / {} test events",
        stats.n_users,
        stats.n_items,
        stats.n_train,
        stats.n_val,
        stats.n_test
    );
    Ok(stats)
}

/// Loads the configured external embeddings or trains BPR-MF on the train
/// split, and writes the tables to the run directory.
pub fn embed(cfg: &RunConfig) -> Result<EmbeddingBundle> {
    let paths = RunPaths::new(cfg);
    let prepared = io::read_split(&paths.split_dir())?;
    let train = &prepared.split.train;
    let bundle = match &cfg.collab.embeddings {
        Some(p) => {
            let b = io::load_embeddings(p, train.n_users, train.n_items)?;
            log::info!("loaded {}x{} / {}x{} embeddings from {}", b.n_users, b.dim, b.n_items, b.dim, p.display());
            b
        }
        None => {
            let t = Instant::now();
            let (b, losses) = train_fallback_mf(train, &cfg.collab.mf)?;
            log::info!(
                "trained fallback MF in {:.1}s, final epoch loss {:.4}",
                t.elapsed().as_secs_f64(),
                losses.last().copied().unwrap_or(f64::NAN)
            );
            b
        }
    };
    if bundle.dim != cfg.denoiser.dim {
        bail!("embedding width {} differs from denoiser.dim {}", bundle.dim, cfg.denoiser.dim);
    }
    io::write_embeddings(&paths.embeddings(), &bundle)?;
    Ok(bundle)
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLogLine {
    pub epoch: usize,
    pub con: f64,
    pub diff: f64,
    pub cl: f64,
    pub total: f64,
    pub val_recall10: Option<f64>,
    pub val_ndcg10: Option<f64>,
    pub wall_seconds: f64,
}

fn training_set(cfg: &RunConfig, prepared: &PreparedSplit) -> Result<TrainingSet> {
    Ok(TrainingSet::new(&prepared.split.train, cfg.denoiser.seq_len)?)
}

fn checkpoint(cfg: &RunConfig, epoch: usize, trainer: &Trainer) -> Checkpoint {
    Checkpoint {
        format: io::CHECKPOINT_FORMAT.into(),
        version: io::CHECKPOINT_VERSION,
        epoch,
        config: cfg.clone(),
        n_users: trainer.model.n_users,
        n_items: trainer.model.n_items,
        params: trainer.model.params.clone(),
        target: Some(trainer.target.clone()),
    }
}

/// Trains the denoiser from the run directory's split and embeddings,
/// logging every epoch and keeping the best validation checkpoint. The
/// restored best model is written to `model.json`.
pub fn train(cfg: &RunConfig) -> Result<FitSummary> {
    let paths = RunPaths::new(cfg);
    let prepared = io::read_split(&paths.split_dir())?;
    let (n, m) = (prepared.split.train.n_users, prepared.split.train.n_items);
    let bundle = io::load_embeddings(&paths.embeddings(), n, m)?;
    let set = training_set(cfg, &prepared)?;
    let mut init = rng::stream(cfg.train.seed, rng::stream_id(purpose::INIT, 0, 0));
    let model = Denoiser::new(cfg.denoiser.clone(), &bundle, &mut init)?;
    let mut trainer = Trainer::new(model, cfg.schedule, cfg.train.clone())?;
    let val_relevant = prepared.split.validation.user_items();
    let val_plan = SamplingPlan {
        steps: cfg.eval.validation_steps,
        seed: cfg.train.seed,
        ..cfg.sampler.clone()
    };
    let schedule = cfg.schedule;
    fs::create_dir_all(&paths.root)?;
    let mut log_file = fs::File::create(paths.train_log())?;
    let start = Instant::now();
    let mut best = f64::NEG_INFINITY;
    let mut io_error: Option<anyhow::Error> = None;

    let summary = trainer.fit(&set, |report, model| {
        let scored = (report.epoch + 1) % cfg.eval.validate_every == 0;
        let val = if scored {
            Some(metrics::evaluate(model, &set, &val_relevant, &schedule, &val_plan, &[10], &[val_plan.seed])?)
        } else {
            None
        };
        let line = EpochLogLine {
            epoch: report.epoch,
            con: report.loss.con,
            diff: report.loss.diff,
            cl: report.loss.cl,
            total: report.loss.total,
            val_recall10: val.as_ref().map(|v| v.recall[&10]),
            val_ndcg10: val.as_ref().map(|v| v.ndcg[&10]),
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {} total {:.4} (con {:.4} diff {:.4} cl {:.4}) val recall@10 {}",
            line.epoch,
            line.total,
            line.con,
            line.diff,
            line.cl,
            line.val_recall10.map_or("-".to_string(), |v| format!("{v:.4}"))
        );
        if let Err(e) = serde_json::to_writer(&mut log_file, &line)
            .map_err(anyhow::Error::from)
            .and_then(|_| writeln!(log_file).map_err(anyhow::Error::from))
        {
            io_error.get_or_insert(e);
        }
        let snapshot = || Checkpoint {
            format: io::CHECKPOINT_FORMAT.into(),
            version: io::CHECKPOINT_VERSION,
            epoch: report.epoch,
            config: cfg.clone(),
            n_users: model.n_users,
            n_items: model.n_items,
            params: model.params.clone(),
            target: None,
        };
        let score = line.val_recall10;
        if score.is_some_and(|s| s > best) {
            best = score.unwrap_or(best);
            if let Err(e) = io::save_checkpoint(&paths.best_checkpoint(), &snapshot()) {
                io_error.get_or_insert(e);
            }
        }
        if cfg.eval.checkpoint_every > 0 && (report.epoch + 1) % cfg.eval.checkpoint_every == 0 {
            let p = paths.checkpoint_dir().join(format!("epoch{:04}.json", report.epoch));
            if let Err(e) = io::save_checkpoint(&p, &snapshot()) {
                io_error.get_or_insert(e);
            }
        }
        Ok(score)
    })?;
    if let Some(e) = io_error {
        return Err(e.context("writing training artifacts"));
    }
    let final_epoch = summary.best_epoch.unwrap_or(trainer.epochs_done().saturating_sub(1));
    io::save_checkpoint(&paths.model(), &checkpoint(cfg, final_epoch, &trainer))?;
    log::info!(
        "trained {} epochs in {:.1}s; best validation recall@10 {:?} at epoch {:?}",
        summary.epochs.len(),
        start.elapsed().as_secs_f64(),
        summary.best_score,
        summary.best_epoch
    );
    Ok(summary)
}

/// Rebuilds the denoiser stored in a checkpoint.
pub fn model_from_checkpoint(ckpt: &Checkpoint) -> Result<Denoiser> {
    Ok(Denoiser::from_store(ckpt.config.denoiser.clone(), ckpt.n_users, ckpt.n_items, ckpt.params.clone())?)
}

fn candidate_set(cfg: &RunConfig, prepared: &PreparedSplit) -> Result<TrainingSet> {
    let mut set = training_set(cfg, prepared)?;
    if cfg.eval.exclude_validation {
        for e in &prepared.split.validation.events {
            let items = &mut set.interacted[e.user];
            if let Err(pos) = items.binary_search(&e.item) {
                items.insert(pos, e.item);
            }
        }
    }
    Ok(set)
}

/// One row of the optional timing table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub phase: String,
    pub seed: u64,
    pub steps: usize,
    pub seq_len: usize,
    pub users: usize,
    pub denoiser_calls: usize,
    pub seconds: f64,
}

/// Full-ranking test evaluation of a trained model, one run per seed.
/// Writes `metrics.json` (and `baselines.json` with MostPopular).
pub fn evaluate(cfg: &RunConfig, model: &Denoiser) -> Result<(MetricsReport, Vec<TimingRow>)> {
    let paths = RunPaths::new(cfg);
    let prepared = io::read_split(&paths.split_dir())?;
    let set = candidate_set(cfg, &prepared)?;
    let relevant = prepared.split.test.user_items();
    let seeds = if cfg.eval.seeds.is_empty() { vec![cfg.sampler.seed] } else { cfg.eval.seeds.clone() };
    let mut runs = Vec::new();
    let mut timing = Vec::new();
    for &seed in &seeds {
        let plan = SamplingPlan { seed, ..cfg.sampler.clone() };
        let t = Instant::now();
        let mut report = metrics::evaluate(model, &set, &relevant, &cfg.schedule, &plan, &cfg.eval.ks, &[seed])?;
        timing.push(TimingRow {
            phase: "generate_and_rank".into(),
            seed,
            steps: plan.steps,
            seq_len: cfg.denoiser.seq_len,
            users: report.n_users_evaluated,
            denoiser_calls: report.n_users_evaluated * plan.steps,
            seconds: t.elapsed().as_secs_f64(),
        });
        report.seeds = vec![seed];
        runs.push(report);
    }
    let report = if runs.len() == 1 { runs.pop().unwrap() } else { MetricsReport::mean(&runs) };
    write_json(&paths.metrics(), &report)?;
    write_json(&paths.baselines(), &most_popular(cfg, &prepared)?)?;
    Ok((report, timing))
}

/// The MostPopular reference on the test split.
pub fn most_popular(cfg: &RunConfig, prepared: &PreparedSplit) -> Result<BTreeMap<String, MetricsReport>> {
    let set = candidate_set(cfg, prepared)?;
    let mp = MostPopular::fit(&prepared.split.train);
    let report = evaluate_ranker(&prepared.split.test.user_items(), &cfg.eval.ks, |u, k| {
        Ok(Some(mp.rank(k, &set.interacted[u])))
    })?;
    Ok(BTreeMap::from([("most_popular".to_string(), report)]))
}

pub fn write_timing_csv(path: &Path, rows: &[TimingRow]) -> Result<()> {
    let mut out = String::from("phase,seed,steps,seq_len,users,denoiser_calls,seconds\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.phase, r.seed, r.steps, r.seq_len, r.users, r.denoiser_calls, r.seconds
        ));
    }
    fs::write(path, out).with_context(|| format!("writing {}", path.display()))
}

/// One `recommend` output line, with original identifiers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecommendationLine {
    pub user: String,
    pub items: Vec<String>,
    pub scores: Vec<f64>,
}

/// Top-`k` recommendations for the named users (all users with a training
/// sequence when `users` is empty), as JSON lines.
pub fn recommend<W: Write>(cfg: &RunConfig, model: &Denoiser, users: &[String], k: usize, out: &mut W) -> Result<usize> {
    let paths = RunPaths::new(cfg);
    let prepared = io::read_split(&paths.split_dir())?;
    let set = candidate_set(cfg, &prepared)?;
    let index: BTreeMap<usize, usize> = set.sequences.iter().enumerate().map(|(i, s)| (s.user, i)).collect();
    let wanted: Vec<usize> = if users.is_empty() {
        index.keys().copied().collect()
    } else {
        users
            .iter()
            .map(|name| {
                prepared
                    .ids
                    .users
                    .iter()
                    .position(|u| u == name)
                    .ok_or_else(|| anyhow!("unknown user `{name}`"))
            })
            .collect::<Result<_>>()?
    };
    let mut written = 0;
    for u in wanted {
        let idx = *index.get(&u).ok_or_else(|| anyhow!("user `{}` has no training history", prepared.ids.users[u]))?;
        let (rec, _) = metrics::recommend_sequence(model, &set, idx, &cfg.schedule, &cfg.sampler, k)?;
        let line = RecommendationLine {
            user: prepared.ids.users[u].clone(),
            items: rec.items.iter().map(|&v| prepared.ids.items[v].clone()).collect(),
            scores: rec.scores,
        };
        serde_json::to_writer(&mut *out, &line)?;
        writeln!(out)?;
        written += 1;
    }
    Ok(written)
}

/// Parses `section.key=v1,v2,...` into a grid axis.
pub fn parse_axis(spec: &str) -> Result<(String, Vec<String>)> {
    let (key, values) = spec
        .split_once('=')
        .ok_or_else(|| anyhow!("grid axis `{spec}` is not of the form section.key=v1,v2"))?;
    let values: Vec<String> = values.split(',').map(|v| v.trim().to_string()).filter(|v| !v.is_empty()).collect();
    if values.is_empty() {
        bail!("grid axis `{key}` has no values");
    }
    Ok((key.trim().to_string(), values))
}

/// Cartesian product of the axes, first axis varying slowest.
pub fn grid_points(axes: &[(String, Vec<String>)]) -> Vec<Vec<(String, String)>> {
    let mut points = vec![Vec::new()];
    for (key, values) in axes {
        points = points
            .into_iter()
            .flat_map(|p| {
                values.iter().map(move |v| {
                    let mut q = p.clone();
                    q.push((key.clone(), v.clone()));
                    q
                })
            })
            .collect();
    }
    points
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub point: Vec<(String, String)>,
    pub report: Option<MetricsReport>,
    pub train_seconds: f64,
    pub eval_seconds: f64,
    pub error: Option<String>,
}

fn only_evaluation_keys(point: &[(String, String)]) -> bool {
    point.iter().all(|(k, _)| k.starts_with("sampler.") || k.starts_with("eval."))
}

/// Trains and evaluates every grid point in its own subdirectory of
/// `<out_dir>/sweep`. Points that only change sampling or evaluation keys
/// share one trained model. Failures are recorded and the sweep goes on.
pub fn sweep(cfg: &RunConfig, axes: &[(String, Vec<String>)]) -> Result<Vec<SweepRow>> {
    if axes.is_empty() {
        bail!("sweep needs at least one grid axis");
    }
    let base = cfg.paths.out_dir.join("sweep");
    let points = grid_points(axes);
    let shared = points.iter().all(|p| only_evaluation_keys(p));
    let mut shared_model: Option<(Denoiser, f64)> = None;
    let mut rows = Vec::with_capacity(points.len());
    for (i, point) in points.iter().enumerate() {
        let mut overrides: Vec<String> = point.iter().map(|(k, v)| format!("{k}={v}")).collect();
        let dir = if shared { base.join("shared") } else { base.join(format!("point{i:03}")) };
        overrides.push(format!("paths.out_dir={}", toml::Value::String(dir.display().to_string())));
        let result = (|| -> Result<(MetricsReport, f64, f64)> {
            let pcfg = cfg.with_overrides(&overrides)?;
            let (model, train_seconds) = match (&shared_model, shared) {
                (Some((m, s)), true) => (m.clone(), *s),
                _ => {
                    let t = Instant::now();
                    prepare(&pcfg)?;
                    embed(&pcfg)?;
                    train(&pcfg)?;
                    let model = model_from_checkpoint(&io::load_checkpoint(&RunPaths::new(&pcfg).model())?)?;
                    let secs = t.elapsed().as_secs_f64();
                    if shared {
                        shared_model = Some((model.clone(), secs));
                    }
                    (model, secs)
                }
            };
            let t = Instant::now();
            let (report, _) = evaluate(&pcfg, &model)?;
            Ok((report, train_seconds, t.elapsed().as_secs_f64()))
        })();
        let row = match result {
            Ok((report, train_seconds, eval_seconds)) => SweepRow {
                point: point.clone(),
                report: Some(report),
                train_seconds,
                eval_seconds,
                error: None,
            },
            Err(e) => {
                log::error!("sweep point {point:?} failed: {e:#}");
                SweepRow {
                    point: point.clone(),
                    report: None,
                    train_seconds: 0.0,
                    eval_seconds: 0.0,
                    error: Some(format!("{e:#}")),
                }
            }
        };
        rows.push(row);
    }
    Ok(rows)
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn write_sweep_csv(path: &Path, ks: &[usize], rows: &[SweepRow]) -> Result<()> {
    let keys: Vec<String> = rows.first().map(|r| r.point.iter().map(|(k, _)| k.clone()).collect()).unwrap_or_default();
    let mut header = keys.clone();
    header.push("status".into());
    header.push("n_users".into());
    header.extend(ks.iter().map(|k| format!("recall@{k}")));
    header.extend(ks.iter().map(|k| format!("ndcg@{k}")));
    header.extend(["train_seconds", "eval_seconds", "error"].map(String::from));
    let mut out = header.join(",") + "\n";
    for r in rows {
        let mut cells: Vec<String> = r.point.iter().map(|(_, v)| csv_field(v)).collect();
        match &r.report {
            Some(rep) => {
                cells.push("ok".into());
                cells.push(rep.n_users_evaluated.to_string());
                cells.extend(ks.iter().map(|k| rep.recall.get(k).map_or(String::new(), |v| v.to_string())));
                cells.extend(ks.iter().map(|k| rep.ndcg.get(k).map_or(String::new(), |v| v.to_string())));
            }
            None => {
                cells.push("failed".into());
                cells.push(String::new());
                cells.extend(ks.iter().flat_map(|_| [String::new(), String::new()]));
            }
        }
        cells.push(r.train_seconds.to_string());
        cells.push(r.eval_seconds.to_string());
        cells.push(csv_field(r.error.as_deref().unwrap_or("")));
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    fs::write(path, out).with_context(|| format!("writing {}", path.display()))
}

/// Writes one forward trajectory of `user` as CSV and returns the
/// popularity / masking-time Spearman correlation over `runs` trajectories
/// across all training sequences.
pub fn trace(cfg: &RunConfig, user: &str, steps: usize, runs: usize, out: &Path) -> Result<f64> {
    let paths = RunPaths::new(cfg);
    let prepared = io::read_split(&paths.split_dir())?;
    let set = training_set(cfg, &prepared)?;
    let u = prepared
        .ids
        .users
        .iter()
        .position(|x| x == user)
        .ok_or_else(|| anyhow!("unknown user `{user}`"))?;
    let idx = set
        .sequences
        .iter()
        .position(|s| s.user == u)
        .ok_or_else(|| anyhow!("user `{user}` has no training history"))?;
    let seed = cfg.sampler.seed;
    let mut r = rng::stream(seed, rng::stream_id(purpose::TRACE, idx as u64, u32::MAX as u64));
    let rows = trace_forward(&set.sequences[idx], &set.deviations[idx], &cfg.schedule, steps, &mut r)?;
    let mut text = String::from("t,position,item_id,I,beta_bar,masked\n");
    for row in &rows {
        text.push_str(&format!(
            "{},{},{},{},{},{}\n",
            row.t,
            row.position,
            csv_field(&prepared.ids.items[row.item_id]),
            row.deviation,
            row.beta_bar,
            u8::from(row.masked)
        ));
    }
    if let Some(dir) = out.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(out, text).with_context(|| format!("writing {}", out.display()))?;
    let rho = masking_time_correlation(&set, &cfg.schedule, runs, steps, seed)?;
    log::info!("Spearman(I, mean masking time) over {runs} trajectories: {rho:.4}");
    Ok(rho)
}
