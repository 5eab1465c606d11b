//! Command implementations behind the CLI. Every artifact lives under the
//! run directory and is recorded in `manifest.json` by path and sha256.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::catalog::{generate_catalog, Catalog};
use crate::config::{RunConfig, Stage};
use crate::dataset::{self, build_datasets, DatasetBundle, RecallEvalRecord, RlRecord, TaggedExample, TaggingEvalRecord};
use crate::engine::SearchEngine;
use crate::error::{Error, Result};
use crate::eval::{evaluate, run_sweep, sweep_table, MetricsReport, SweepAxis, SweepInputs};
use crate::policy::{catalog_vocab, checkpoint, Policy};
use crate::rl::{train_dpo, train_grpo, DIAGNOSTICS_HEADER};
use crate::seed::{self, sha256_hex};
use crate::serving::{checkpoint_hash, RewriteCache, Server, SystemClock};
use crate::sft::{train_sft, SftTask, LOG_HEADER};

pub const MANIFEST: &str = "manifest.json";
pub const LOCK: &str = ".qralign.lock";

pub const CATALOG_FILE: &str = "data/catalog.tsv";
pub const SYNONYMS_FILE: &str = "data/synonyms.tsv";
pub const SFT_FILE: &str = "data/sft.txt";
pub const RL_FILE: &str = "data/rl.tsv";
pub const TAGGING_FILE: &str = "data/tagging_eval.tsv";
pub const RECALL_FILE: &str = "data/recall_eval.tsv";
pub const TRAIN_QUERIES_FILE: &str = "data/train_queries.txt";
pub const EVAL_QUERIES_FILE: &str = "data/eval_queries.txt";
pub const STATS_FILE: &str = "data/stats.json";
pub const METRICS_TSV: &str = "eval/metrics.tsv";
pub const METRICS_JSON: &str = "eval/metrics.json";
pub const TIMINGS_FILE: &str = "logs/timings.tsv";

/// Exit status of a failed command.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::MissingArtifact(_) => 3,
        Error::CorruptArtifact { .. } => 4,
        _ => 2,
    }
}

/// Exclusive hold on a run directory, released on drop.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(run_dir: &Path) -> Result<Self> {
        fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
        let path = run_dir.join(LOCK);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Locked(path)),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub config_sha256: String,
    /// Relative artifact path to sha256 of its bytes.
    pub files: BTreeMap<String, String>,
    /// Frozen reference checkpoint used by the GRPO and DPO stages.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub references: BTreeMap<String, String>,
}

impl Manifest {
    pub fn load(run_dir: &Path) -> Result<Self> {
        let path = run_dir.join(MANIFEST);
        match fs::read_to_string(&path) {
            Ok(text) => serde_json::from_str(&text).map_err(|e| Error::CorruptArtifact {
                path,
                reason: e.to_string(),
            }),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Self::default()),
            Err(e) => Err(Error::io(&path, e)),
        }
    }

    pub fn save(&self, run_dir: &Path) -> Result<()> {
        let path = run_dir.join(MANIFEST);
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Malformed(e.to_string()))? + "\n";
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}

/// Shared state of one command invocation.
pub struct Run {
    pub config: RunConfig,
    pub verbose: bool,
    manifest: Manifest,
    _lock: RunLock,
    started: Instant,
}

impl Run {
    pub fn open(config: RunConfig, verbose: bool) -> Result<Self> {
        let lock = RunLock::acquire(&config.run_dir)?;
        let mut manifest = Manifest::load(&config.run_dir)?;
        manifest.seed = config.seed;
        // the run directory is where the run lives, not what it computes
        let hashed = RunConfig {
            run_dir: PathBuf::new(),
            ..config.clone()
        };
        manifest.config_sha256 = sha256_hex(hashed.to_toml().as_bytes());
        Ok(Self {
            config,
            verbose,
            manifest,
            _lock: lock,
            started: Instant::now(),
        })
    }

    pub fn log(&self, message: impl AsRef<str>) {
        if self.verbose {
            eprintln!("[qralign] {}", message.as_ref());
        }
    }

    pub fn path(&self, relative: &str) -> PathBuf {
        self.config.run_dir.join(relative)
    }

    /// Writes an artifact and records its hash.
    pub fn write(&mut self, relative: &str, contents: &str) -> Result<()> {
        let path = self.path(relative);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(&path, contents).map_err(|e| Error::io(&path, e))?;
        self.manifest
            .files
            .insert(relative.to_string(), sha256_hex(contents.as_bytes()));
        self.log(format!("wrote {}", path.display()));
        Ok(())
    }

    pub fn read(&self, relative: &str) -> Result<String> {
        let path = self.path(relative);
        fs::read_to_string(&path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingArtifact(path.clone()),
            _ => Error::io(&path, e),
        })
    }

    fn parse<T>(&self, relative: &str, parse: impl FnOnce(&str) -> Result<T>) -> Result<T> {
        let text = self.read(relative)?;
        parse(&text).map_err(|e| Error::CorruptArtifact {
            path: self.path(relative),
            reason: e.to_string(),
        })
    }

    pub fn load_checkpoint(&self, stage: Stage) -> Result<Policy> {
        checkpoint::load(&self.path(&stage.checkpoint()))
    }

    pub fn save_checkpoint(&mut self, relative: &str, policy: &Policy) -> Result<String> {
        let text = checkpoint::to_text(policy);
        self.write(relative, &text)?;
        Ok(sha256_hex(text.as_bytes()))
    }

    /// Saves the manifest and appends the wall-clock time of the command to
    /// the (unhashed) timings log.
    pub fn finish(self, command: &str) -> Result<()> {
        self.manifest.save(&self.config.run_dir)?;
        let path = self.path(TIMINGS_FILE);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        writeln!(f, "{command}\t{:.3}", self.started.elapsed().as_secs_f64()).map_err(|e| Error::io(&path, e))?;
        Ok(())
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    /// Engine rebuilt from the catalog files on disk.
    pub fn load_engine(&self) -> Result<SearchEngine> {
        let catalog_text = self.read(CATALOG_FILE)?;
        let synonyms_text = self.read(SYNONYMS_FILE)?;
        let catalog = Catalog::from_tsv(&catalog_text, &synonyms_text, self.config.catalog.seed).map_err(|e| {
            Error::CorruptArtifact {
                path: self.path(CATALOG_FILE),
                reason: e.to_string(),
            }
        })?;
        SearchEngine::new(catalog, self.config.engine.bm25, self.config.engine.recall_depth)
    }

    pub fn load_sft_data(&self) -> Result<Vec<TaggedExample>> {
        self.parse(SFT_FILE, dataset::sft_from_text)
    }

    pub fn load_rl_data(&self) -> Result<Vec<RlRecord>> {
        self.parse(RL_FILE, dataset::rl_from_tsv)
    }

    pub fn load_eval_data(&self) -> Result<(Vec<TaggingEvalRecord>, Vec<RecallEvalRecord>)> {
        Ok((
            self.parse(TAGGING_FILE, dataset::tagging_eval_from_tsv)?,
            self.parse(RECALL_FILE, dataset::recall_eval_from_tsv)?,
        ))
    }
}

/// Catalog, engine and datasets built in memory from a config.
pub struct World {
    pub engine: SearchEngine,
    pub data: DatasetBundle,
}

impl World {
    pub fn build(config: &RunConfig) -> Result<Self> {
        let catalog = generate_catalog(&config.catalog)?;
        let engine = SearchEngine::new(catalog, config.engine.bm25, config.engine.recall_depth)?;
        let data = build_datasets(
            &engine,
            &config.dataset,
            config.reward.top_m,
            config.reward.tau_relev,
            config.seed,
        )?;
        Ok(Self { engine, data })
    }
}

/// Per-stage seeds derived from the global seed.
pub fn stage_seeds(seed: u64, stage: Stage) -> (u64, u64) {
    (
        seed::derive(seed, "init", stage.name()),
        seed::derive(seed, "training", stage.name()),
    )
}

/// Fresh SFT policy for the catalog's vocabulary.
pub fn initial_policy(catalog: &Catalog, config: &RunConfig, task: SftTask, stage: Stage) -> Policy {
    let (init_seed, _) = stage_seeds(config.seed, stage);
    Policy::new(
        catalog_vocab(catalog),
        config.sft.hidden,
        task.grammar(),
        init_seed,
        config.sft.init_scale,
    )
}

/// Trains an SFT policy in memory; `on_epoch` receives each log row.
pub fn run_sft(
    config: &RunConfig,
    catalog: &Catalog,
    examples: &[TaggedExample],
    task: SftTask,
    mut on_epoch: impl FnMut(&str),
) -> Result<Policy> {
    let stage = match task {
        SftTask::MultiTask => Stage::Sft,
        SftTask::SingleTask => Stage::SftSingle,
    };
    let (_, train_seed) = stage_seeds(config.seed, stage);
    let policy = initial_policy(catalog, config, task, stage);
    let outcome = train_sft(&config.sft, task, examples, policy, train_seed, |row, _| {
        on_epoch(&row.tsv());
        Ok(())
    })?;
    Ok(outcome.policy)
}

pub fn cmd_gen_data(config: RunConfig, verbose: bool) -> Result<DatasetBundle> {
    let mut run = Run::open(config, verbose)?;
    let world = World::build(&run.config)?;
    let d = &world.data;
    run.log(format!("{:?}", d.stats));
    run.write(CATALOG_FILE, &world.engine.catalog.to_tsv())?;
    run.write(SYNONYMS_FILE, &world.engine.catalog.synonyms_to_tsv())?;
    run.write(SFT_FILE, &dataset::sft_to_text(&d.sft))?;
    run.write(RL_FILE, &dataset::rl_to_tsv(&d.rl))?;
    run.write(TAGGING_FILE, &dataset::tagging_eval_to_tsv(&d.tagging_eval))?;
    run.write(RECALL_FILE, &dataset::recall_eval_to_tsv(&d.recall_eval))?;
    run.write(TRAIN_QUERIES_FILE, &dataset::queries_to_text(&d.train_queries))?;
    run.write(EVAL_QUERIES_FILE, &dataset::queries_to_text(&d.eval_queries))?;
    let stats = serde_json::to_string_pretty(&d.stats).map_err(|e| Error::Malformed(e.to_string()))? + "\n";
    run.write(STATS_FILE, &stats)?;
    run.finish("gen-data")?;
    Ok(world.data)
}

fn log_table(header: &str, rows: &[String]) -> String {
    let mut out = String::from(header);
    out.push('\n');
    for r in rows {
        out.push_str(r);
        out.push('\n');
    }
    out
}

pub fn cmd_train(config: RunConfig, stages: &[Stage], verbose: bool) -> Result<()> {
    let mut run = Run::open(config, verbose)?;
    let stages = if stages.is_empty() {
        run.config.train.stages.clone()
    } else {
        stages.to_vec()
    };
    for stage in stages {
        run.log(format!("stage {}", stage.name()));
        match stage {
            Stage::Sft | Stage::SftSingle => train_sft_stage(&mut run, stage)?,
            Stage::Grpo => train_grpo_stage(&mut run)?,
            Stage::Dpo => train_dpo_stage(&mut run)?,
        }
    }
    run.finish("train")
}

fn train_sft_stage(run: &mut Run, stage: Stage) -> Result<()> {
    let task = if stage == Stage::Sft {
        SftTask::MultiTask
    } else {
        SftTask::SingleTask
    };
    let engine = run.load_engine()?;
    let examples = run.load_sft_data()?;
    let mut rows = Vec::new();
    let verbose = run.verbose;
    let policy = run_sft(&run.config, &engine.catalog, &examples, task, |row| {
        if verbose {
            eprintln!("[qralign] {} {row}", stage.name());
        }
        rows.push(row.to_string());
    })?;
    run.write(&format!("logs/{}.tsv", stage.name()), &log_table(LOG_HEADER, &rows))?;
    run.save_checkpoint(&stage.checkpoint(), &policy)?;
    Ok(())
}

fn train_grpo_stage(run: &mut Run) -> Result<()> {
    let sft = run.load_checkpoint(Stage::Sft)?;
    let reference = checkpoint_hash(&sft);
    let engine = run.load_engine()?;
    let records = run.load_rl_data()?;
    let (_, train_seed) = stage_seeds(run.config.seed, Stage::Grpo);
    let every = run.config.grpo.checkpoint_every;
    let mut snapshots = Vec::new();
    let outcome = train_grpo(
        &run.config.grpo,
        &sft,
        &records,
        &engine,
        &run.config.reward,
        train_seed,
        |d, policy| {
            if every > 0 && d.step % every == 0 {
                snapshots.push((d.step, checkpoint::to_text(policy)));
            }
            if run.verbose {
                eprintln!("[qralign] grpo {}", d.tsv());
            }
            Ok(())
        },
    )?;
    for (step, text) in snapshots {
        run.write(&format!("checkpoints/grpo-step-{step}.ckpt"), &text)?;
    }
    let rows: Vec<String> = outcome.diagnostics.iter().map(|d| d.tsv()).collect();
    run.write("logs/grpo.tsv", &log_table(DIAGNOSTICS_HEADER, &rows))?;
    run.save_checkpoint(&Stage::Grpo.checkpoint(), &outcome.policy)?;
    run.manifest.references.insert(Stage::Grpo.name().into(), reference);
    Ok(())
}

fn train_dpo_stage(run: &mut Run) -> Result<()> {
    let sft = run.load_checkpoint(Stage::Sft)?;
    let reference = checkpoint_hash(&sft);
    let engine = run.load_engine()?;
    let records = run.load_rl_data()?;
    let (_, train_seed) = stage_seeds(run.config.seed, Stage::Dpo);
    let outcome = train_dpo(&run.config.dpo, &sft, &records, &engine, &run.config.reward, train_seed)?;
    let rows: Vec<String> = outcome
        .epoch_losses
        .iter()
        .enumerate()
        .map(|(i, l)| format!("{}\t{l:.6}", i + 1))
        .collect();
    let header = format!(
        "epoch\tloss\t# pairs={} skipped_short={} skipped_flat={}",
        outcome.pairs.pairs.len(),
        outcome.pairs.skipped_short,
        outcome.pairs.skipped_flat
    );
    run.write("logs/dpo.tsv", &log_table(&header, &rows))?;
    run.save_checkpoint(&Stage::Dpo.checkpoint(), &outcome.policy)?;
    run.manifest.references.insert(Stage::Dpo.name().into(), reference);
    Ok(())
}

pub const EVAL_ORDER: [Stage; 4] = [Stage::Sft, Stage::SftSingle, Stage::Grpo, Stage::Dpo];

/// Evaluates every stage checkpoint present in the run directory.
pub fn cmd_eval(config: RunConfig, verbose: bool) -> Result<BTreeMap<String, MetricsReport>> {
    let mut run = Run::open(config, verbose)?;
    let engine = run.load_engine()?;
    let (tagging, recall) = run.load_eval_data()?;
    let mut reports = BTreeMap::new();
    let mut tsv = format!("model\t{}\n", MetricsReport::TSV_HEADER);
    for stage in EVAL_ORDER {
        if !run.path(&stage.checkpoint()).exists() {
            continue;
        }
        let policy = run.load_checkpoint(stage)?;
        let report = evaluate(&policy, &tagging, &recall, &engine, &run.config.eval, &run.config.reward)?;
        run.log(format!("{} {}", stage.name(), report.tsv_row()));
        tsv.push_str(&format!("{}\t{}\n", stage.name(), report.tsv_row()));
        reports.insert(stage.name().to_string(), report);
    }
    if reports.is_empty() {
        return Err(Error::MissingArtifact(run.path("checkpoints")));
    }
    let json = serde_json::to_string_pretty(&reports).map_err(|e| Error::Malformed(e.to_string()))? + "\n";
    run.write(METRICS_TSV, &tsv)?;
    run.write(METRICS_JSON, &json)?;
    print!("{tsv}");
    run.finish("eval")?;
    Ok(reports)
}

pub fn cmd_sweep(config: RunConfig, verbose: bool) -> Result<String> {
    let mut run = Run::open(config, verbose)?;
    let engine = run.load_engine()?;
    let (tagging, recall) = run.load_eval_data()?;
    let axis = run.config.sweep.axis;
    let (policy, rl_records) = match axis {
        SweepAxis::BeamSize => (run.load_checkpoint(Stage::Sft)?, run.load_rl_data()?),
        SweepAxis::RewriteNumber => (run.load_checkpoint(run.config.sweep.model)?, Vec::new()),
    };
    let (_, train_seed) = stage_seeds(run.config.seed, Stage::Grpo);
    let inputs = SweepInputs {
        engine: &engine,
        policy: &policy,
        rl_records: &rl_records,
        tagging: &tagging,
        recall: &recall,
        eval: run.config.eval,
        rl: run.config.grpo,
        reward: run.config.reward,
        seed: train_seed,
    };
    let rows = run_sweep(axis, &run.config.sweep.values, &inputs)?;
    let table = sweep_table(axis, &rows);
    run.write(&format!("sweep/{}.tsv", axis.name()), &table)?;
    print!("{table}");
    run.finish("sweep")?;
    Ok(table)
}

/// Serves each query through the persisted cache and prints the rewrites one
/// per line (prefixed by the query when several are given).
pub fn cmd_serve(config: RunConfig, queries: &[String], verbose: bool) -> Result<Vec<Vec<String>>> {
    let run = Run::open(config, verbose)?;
    let policy = run.load_checkpoint(run.config.serve.model)?;
    let hash = checkpoint_hash(&policy);
    let cache_path = run.path(&run.config.serve.cache_file.to_string_lossy());
    let cache = RewriteCache::load_or_new(&cache_path, &hash, run.config.serve.ttl_secs).map_err(|e| {
        Error::CorruptArtifact {
            path: cache_path.clone(),
            reason: e.to_string(),
        }
    })?;
    let server = Server::new(policy, cache, SystemClock, &run.config.eval)?;
    let mut out = Vec::new();
    for q in queries {
        let served = server.serve(q)?;
        run.log(format!(
            "{q:?}: cache {} ({} rewrites)",
            if served.cache_hit { "hit" } else { "miss" },
            served.rewrites.len()
        ));
        for r in &served.rewrites {
            if queries.len() > 1 {
                println!("{q}\t{r}");
            } else {
                println!("{r}");
            }
        }
        out.push(served.rewrites);
    }
    if let Some(parent) = cache_path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    server.cache.save(&cache_path)?;
    run.log(format!("decodes: {}", server.decodes()));
    run.finish("serve")?;
    Ok(out)
}
