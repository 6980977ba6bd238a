//! End-to-end pipelines: corpus, pretraining, washing by any method,
//! evaluation and ablation sweeps, each recorded in a rerunnable manifest.
//!
//! Output files are written atomically. Reports and washed checkpoints carry
//! the method tag and the config hash in their names.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{generate, load_bundle, save_bundle, CorpusBundle, CorpusConfig, FactTriple};
use crate::editor::{self, DeltaMatrix, EditRequest};
use crate::error::{Error, Result};
use crate::eval::{full_report, WashReport};
use crate::fsutil::{read_json, write_json, write_jsonl};
use crate::kv_memory::{estimate_key_stats, KeyStats, DEFAULT_SAMPLES};
use crate::model::{load_checkpoint, save_checkpoint, Model};
use crate::tensorfile::file_checksum;
use crate::trainer::{finetune_eos, finetune_reverse, pretrain, EpochMetrics, TrainConfig};
use crate::washer::{successive_wash, BetaPolicy, InitMode, WashConfig, WashTrace};

/// Version string recorded when the caller supplies none.
pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    #[default]
    #[serde(rename = "law")]
    Law,
    #[serde(rename = "memit")]
    Memit,
    #[serde(rename = "ft")]
    Ft,
    #[serde(rename = "ft-ul")]
    FtUl,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Law, Method::Memit, Method::Ft, Method::FtUl];

    pub fn tag(self) -> &'static str {
        match self {
            Method::Law => "law",
            Method::Memit => "memit",
            Method::Ft => "ft",
            Method::FtUl => "ft-ul",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.tag() == s)
            .ok_or_else(|| Error::Config(format!("method {s:?} is not one of law, memit, ft, ft-ul")))
    }
}

/// Everything that determines an experiment's outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub corpus: CorpusConfig,
    pub train: TrainConfig,
    pub method: Method,
    pub wash: WashConfig,
    /// `None` means `max(1, number of washed facts)`.
    pub lambda: Option<f64>,
    pub key_samples: usize,
    pub key_seed: u64,
    /// Used by the `ft` and `ft-ul` methods.
    pub finetune: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            corpus: CorpusConfig::default(),
            train: TrainConfig::default(),
            method: Method::default(),
            wash: WashConfig::default(),
            lambda: None,
            key_samples: DEFAULT_SAMPLES,
            key_seed: 0,
            finetune: TrainConfig::finetune(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.train.validate()?;
        self.finetune.validate()?;
        self.wash.validate()?;
        if let Some(l) = self.lambda {
            if !(l > 0.0 && l.is_finite()) {
                return Err(Error::Config(format!("lambda must be positive, got {l}")));
            }
        }
        if self.key_samples == 0 {
            return Err(Error::Config("key_samples must be positive".into()));
        }
        Ok(())
    }

    pub fn resolved_lambda(&self, n_wash: usize) -> f64 {
        self.lambda.unwrap_or((n_wash as f64).max(1.0))
    }

    /// First 12 hex digits of the SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> Result<String> {
        let bytes = serde_json::to_vec(self)?;
        let digest = Sha256::digest(&bytes);
        Ok(digest.iter().take(6).map(|b| format!("{b:02x}")).collect())
    }
}

/// `report-<method>-<hash>.json`
pub fn report_file_name(method: Method, hash: &str) -> String {
    format!("report-{method}-{hash}.json")
}

/// `washed-<method>-<hash>.ckpt`
pub fn washed_file_name(method: Method, hash: &str) -> String {
    format!("washed-{method}-{hash}.ckpt")
}

/// Key statistics over the training filler for every layer the wash touches.
pub fn compute_key_stats(model: &Model, corpus: &CorpusBundle, cfg: &ExperimentConfig, n_wash: usize) -> Result<Vec<KeyStats>> {
    let texts = corpus.encode_filler(&corpus.filler_texts)?;
    let lambda = cfg.resolved_lambda(n_wash);
    cfg.wash
        .layers
        .iter()
        .map(|&l| estimate_key_stats(model, &texts, l, cfg.key_samples, cfg.key_seed, lambda))
        .collect()
}

/// Result of applying one method.
#[derive(Clone, Debug)]
pub struct WashOutcome {
    pub model: Model,
    /// Applied `W_out` updates; empty for the fine-tuning methods.
    pub deltas: Vec<DeltaMatrix>,
    /// Per-layer record; only `law` fills it.
    pub trace: WashTrace,
    /// Fine-tuning losses; only `ft` and `ft-ul` fill it.
    pub finetune_log: Vec<EpochMetrics>,
}

/// Removes `facts` from `model` with the configured method. `stats` is only
/// read by `law` and `memit`.
pub fn apply_method(model: &Model, facts: &[FactTriple], cfg: &ExperimentConfig, stats: &[KeyStats]) -> Result<WashOutcome> {
    let plain = |model: Model| WashOutcome { model, deltas: Vec::new(), trace: Vec::new(), finetune_log: Vec::new() };
    match cfg.method {
        Method::Law => {
            let (m, deltas, trace) = successive_wash(model, facts, &cfg.wash, stats)?;
            Ok(WashOutcome { model: m, deltas, trace, finetune_log: Vec::new() })
        }
        Method::Memit => {
            editor::check_layers(model, &cfg.wash.layers)?;
            let mut m = model.clone();
            let mut requests = EditRequest::eos_requests(model, facts)?;
            if requests.is_empty() {
                return Ok(plain(m));
            }
            let top = *cfg.wash.layers.last().unwrap();
            editor::solve_values(model, &mut requests, top, &cfg.wash.target)?;
            let deltas = editor::spread_edit(&mut m, &requests, &cfg.wash.layers, stats, cfg.wash.ridge_scale)?;
            Ok(WashOutcome { deltas, ..plain(m) })
        }
        Method::Ft => {
            let (m, log) = finetune_eos(model, facts, &cfg.finetune)?;
            Ok(WashOutcome { finetune_log: log, ..plain(m) })
        }
        Method::FtUl => {
            let (m, log) = finetune_reverse(model, facts, &cfg.finetune)?;
            Ok(WashOutcome { finetune_log: log, ..plain(m) })
        }
    }
}

/// A file written or read by a run.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileRecord {
    pub path: PathBuf,
    pub sha256: String,
}

impl FileRecord {
    pub fn of(path: &Path) -> Result<Self> {
        Ok(Self { path: path.to_path_buf(), sha256: file_checksum(path)? })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Corpus, pretraining, wash and evaluation from the config alone.
    Pipeline,
    /// Pretraining on an existing corpus directory.
    Train,
    /// Washing an existing checkpoint.
    Wash,
}

/// Enough to repeat a run and check that it reproduces.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub stage: Stage,
    pub code_version: String,
    pub config: ExperimentConfig,
    pub config_hash: String,
    /// Path of the corpus directory, for the stages that read one.
    pub corpus_dir: Option<PathBuf>,
    pub inputs: BTreeMap<String, FileRecord>,
    pub outputs: BTreeMap<String, FileRecord>,
}

pub const MANIFEST_NAME: &str = "manifest.json";

impl RunManifest {
    fn new(stage: Stage, code_version: &str, config: &ExperimentConfig) -> Result<Self> {
        Ok(Self {
            stage,
            code_version: code_version.to_string(),
            config: config.clone(),
            config_hash: config.hash()?,
            corpus_dir: None,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }

    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(MANIFEST_NAME);
        write_json(&path, self)?;
        Ok(path)
    }
}

/// What a pipeline or wash run produced.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub manifest: RunManifest,
    pub report: Option<WashReport>,
    pub trace: WashTrace,
}

fn write_wash_outputs(
    out: &Path,
    cfg: &ExperimentConfig,
    hash: &str,
    washed: &WashOutcome,
    report: &WashReport,
    manifest: &mut RunManifest,
) -> Result<()> {
    let ckpt = out.join(washed_file_name(cfg.method, hash));
    save_checkpoint(&washed.model, &ckpt)?;
    manifest.outputs.insert("washed".into(), FileRecord::of(&ckpt)?);
    let report_path = out.join(report_file_name(cfg.method, hash));
    write_json(&report_path, report)?;
    manifest.outputs.insert("report".into(), FileRecord::of(&report_path)?);
    if !washed.trace.is_empty() {
        let trace_path = out.join(format!("trace-{hash}.jsonl"));
        write_jsonl(&trace_path, &washed.trace)?;
        manifest.outputs.insert("trace".into(), FileRecord::of(&trace_path)?);
    }
    Ok(())
}

/// Generates the corpus, pretrains, washes `facts_wash` and evaluates,
/// writing everything under `out`.
pub fn run_pipeline(cfg: &ExperimentConfig, out: &Path, code_version: &str) -> Result<RunOutcome> {
    cfg.validate()?;
    let mut manifest = RunManifest::new(Stage::Pipeline, code_version, cfg)?;
    let hash = manifest.config_hash.clone();
    fs::create_dir_all(out)?;
    let corpus = generate(&cfg.corpus)?;
    let corpus_dir = out.join("corpus");
    save_bundle(&corpus, &corpus_dir)?;
    manifest.outputs.insert("corpus_manifest".into(), FileRecord::of(&corpus_dir.join("manifest.json"))?);

    let (base, log) = pretrain(&corpus, &cfg.train)?;
    let base_path = out.join("pretrained.ckpt");
    save_checkpoint(&base, &base_path)?;
    manifest.outputs.insert("pretrained".into(), FileRecord::of(&base_path)?);
    write_jsonl(&out.join("train_log.jsonl"), &log)?;

    let stats = compute_key_stats(&base, &corpus, cfg, corpus.facts_wash.len())?;
    let washed = apply_method(&base, &corpus.facts_wash, cfg, &stats)?;
    let report = full_report(&base, &washed.model, &corpus, cfg.method.tag())?;
    write_wash_outputs(out, cfg, &hash, &washed, &report, &mut manifest)?;
    manifest.save(out)?;
    Ok(RunOutcome { manifest, report: Some(report), trace: washed.trace })
}

/// Pretrains on the corpus in `corpus_dir` and writes `pretrained.ckpt`.
pub fn run_train(cfg: &ExperimentConfig, corpus_dir: &Path, out: &Path, code_version: &str) -> Result<(RunManifest, Vec<EpochMetrics>)> {
    cfg.train.validate()?;
    let mut manifest = RunManifest::new(Stage::Train, code_version, cfg)?;
    let corpus = load_bundle(corpus_dir)?;
    manifest.corpus_dir = Some(corpus_dir.to_path_buf());
    manifest.inputs.insert("corpus_manifest".into(), FileRecord::of(&corpus_dir.join("manifest.json"))?);
    fs::create_dir_all(out)?;
    let (model, log) = pretrain(&corpus, &cfg.train)?;
    let path = out.join("pretrained.ckpt");
    save_checkpoint(&model, &path)?;
    manifest.outputs.insert("pretrained".into(), FileRecord::of(&path)?);
    write_jsonl(&out.join("train_log.jsonl"), &log)?;
    manifest.save(out)?;
    Ok((manifest, log))
}

/// Washes a saved checkpoint. `facts` defaults to the corpus wash split.
/// The input checkpoint is only read.
pub fn run_wash(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    corpus_dir: &Path,
    facts: Option<&Path>,
    out: &Path,
    code_version: &str,
) -> Result<RunOutcome> {
    cfg.wash.validate()?;
    let mut manifest = RunManifest::new(Stage::Wash, code_version, cfg)?;
    let hash = manifest.config_hash.clone();
    let corpus = load_bundle(corpus_dir)?;
    manifest.corpus_dir = Some(corpus_dir.to_path_buf());
    manifest.inputs.insert("corpus_manifest".into(), FileRecord::of(&corpus_dir.join("manifest.json"))?);
    let base = load_checkpoint(checkpoint)?;
    manifest.inputs.insert("checkpoint".into(), FileRecord::of(checkpoint)?);
    let wash_facts = match facts {
        Some(p) => {
            manifest.inputs.insert("facts".into(), FileRecord::of(p)?);
            crate::corpus::load_facts(p)?
        }
        None => corpus.facts_wash.clone(),
    };
    fs::create_dir_all(out)?;
    let stats = match cfg.method {
        Method::Law | Method::Memit => compute_key_stats(&base, &corpus, cfg, wash_facts.len())?,
        Method::Ft | Method::FtUl => Vec::new(),
    };
    let washed = apply_method(&base, &wash_facts, cfg, &stats)?;
    let report = full_report(&base, &washed.model, &corpus, cfg.method.tag())?;
    write_wash_outputs(out, cfg, &hash, &washed, &report, &mut manifest)?;
    manifest.save(out)?;
    Ok(RunOutcome { manifest, report: Some(report), trace: washed.trace })
}

/// Outcome of repeating a manifest.
#[derive(Clone, Debug)]
pub struct Rerun {
    pub manifest: RunManifest,
    /// Output names whose checksum differs from the original run.
    pub mismatches: Vec<String>,
}

impl Rerun {
    pub fn identical(&self) -> bool {
        self.mismatches.is_empty()
    }
}

/// Repeats the run described by the manifest at `path` into `out` and
/// compares every output checksum with the recorded one.
pub fn rerun(path: &Path, out: &Path, code_version: &str) -> Result<Rerun> {
    let original = RunManifest::load(path)?;
    if original.config.hash()? != original.config_hash {
        return Err(Error::Format(format!("{}: config hash does not match its config", path.display())));
    }
    for (name, rec) in &original.inputs {
        let now = file_checksum(&rec.path)?;
        if now != rec.sha256 {
            return Err(Error::Format(format!("input {name} at {} changed since the recorded run", rec.path.display())));
        }
    }
    let corpus_dir = || {
        original
            .corpus_dir
            .clone()
            .ok_or_else(|| Error::Format("manifest lacks a corpus directory".into()))
    };
    let manifest = match original.stage {
        Stage::Pipeline => run_pipeline(&original.config, out, code_version)?.manifest,
        Stage::Train => run_train(&original.config, &corpus_dir()?, out, code_version)?.0,
        Stage::Wash => {
            let ckpt = &original.inputs.get("checkpoint").ok_or_else(|| Error::Format("manifest lacks its checkpoint".into()))?.path;
            let facts = original.inputs.get("facts").map(|r| r.path.clone());
            run_wash(&original.config, ckpt, &corpus_dir()?, facts.as_deref(), out, code_version)?.manifest
        }
    };
    let mut mismatches = Vec::new();
    for (name, rec) in &original.outputs {
        match manifest.outputs.get(name) {
            Some(new) if new.sha256 == rec.sha256 => {}
            _ => mismatches.push(name.clone()),
        }
    }
    Ok(Rerun { manifest, mismatches })
}

/// One axis of an ablation sweep.
#[derive(Clone, Debug, PartialEq)]
pub enum Sweep {
    /// Relative β multipliers.
    Beta(Vec<f64>),
    Init(Vec<InitMode>),
    /// Successive elimination on or off.
    Se(Vec<bool>),
}

impl FromStr for Sweep {
    type Err = Error;

    /// Parses `beta=1.05,1.1,1.5`, `init=memit,random` or `se=on,off`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = |why: &str| Error::Config(format!("sweep {s:?}: {why}"));
        let (axis, values) = s.split_once('=').ok_or_else(|| bad("expected axis=v1,v2,..."))?;
        let values: Vec<&str> = values.split(',').map(str::trim).filter(|v| !v.is_empty()).collect();
        if values.is_empty() {
            return Err(bad("no values"));
        }
        match axis {
            "beta" => values
                .iter()
                .map(|v| {
                    let m: f64 = v.parse().map_err(|_| bad("beta values must be numbers"))?;
                    BetaPolicy::Relative(m).validate()?;
                    Ok(m)
                })
                .collect::<Result<_>>()
                .map(Sweep::Beta),
            "init" => values.iter().map(|v| v.parse()).collect::<Result<_>>().map(Sweep::Init),
            "se" => values
                .iter()
                .map(|v| match *v {
                    "on" => Ok(true),
                    "off" => Ok(false),
                    _ => Err(bad("se values are on or off")),
                })
                .collect::<Result<_>>()
                .map(Sweep::Se),
            _ => Err(bad("axis must be beta, init or se")),
        }
    }
}

impl Sweep {
    /// `(label, config)` for every point, based on `base`.
    pub fn points(&self, base: &WashConfig) -> Vec<(String, WashConfig)> {
        match self {
            Sweep::Beta(ms) => ms
                .iter()
                .map(|&m| (format!("beta=rel:{m}"), WashConfig { beta: BetaPolicy::Relative(m), ..base.clone() }))
                .collect(),
            Sweep::Init(modes) => modes
                .iter()
                .map(|&i| {
                    let label = match i {
                        InitMode::Memit => "init=memit",
                        InitMode::Random => "init=random",
                    };
                    (label.to_string(), WashConfig { init: i, ..base.clone() })
                })
                .collect(),
            Sweep::Se(flags) => flags
                .iter()
                .map(|&on| (format!("se={}", if on { "on" } else { "off" }), WashConfig { successive_elimination: on, ..base.clone() }))
                .collect(),
        }
    }
}

/// One (point, seed) cell of an ablation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub seed: u64,
    pub config_hash: String,
    pub report: WashReport,
}

/// Per-point means over seeds, in sweep order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationSummary {
    pub label: String,
    pub seeds: usize,
    pub washed_acc: f64,
    pub retained_acc: f64,
    pub reasoning_acc: f64,
    pub fluency_log_ppl: f64,
}

/// Runs `law` at every sweep point for every seed on a fixed model. A seed
/// sets both the key-sampling seed and the washer seed.
pub fn run_ablation(model: &Model, corpus: &CorpusBundle, base: &ExperimentConfig, sweep: &Sweep, seeds: &[u64]) -> Result<Vec<AblationRow>> {
    let facts = &corpus.facts_wash;
    let mut rows = Vec::new();
    for &seed in seeds {
        let seeded = ExperimentConfig { method: Method::Law, key_seed: seed, ..base.clone() };
        let stats = compute_key_stats(model, corpus, &seeded, facts.len())?;
        for (label, wash) in sweep.points(&seeded.wash) {
            let cfg = ExperimentConfig { wash: WashConfig { seed, ..wash }, ..seeded.clone() };
            cfg.validate()?;
            let washed = apply_method(model, facts, &cfg, &stats)?;
            let report = full_report(model, &washed.model, corpus, &label)?;
            rows.push(AblationRow { label, seed, config_hash: cfg.hash()?, report });
        }
    }
    Ok(rows)
}

pub fn summarize(rows: &[AblationRow]) -> Vec<AblationSummary> {
    let mut order: Vec<String> = Vec::new();
    for r in rows {
        if !order.contains(&r.label) {
            order.push(r.label.clone());
        }
    }
    order
        .into_iter()
        .map(|label| {
            let cell: Vec<&AblationRow> = rows.iter().filter(|r| r.label == label).collect();
            let n = cell.len() as f64;
            let mean = |f: fn(&AblationRow) -> f64| cell.iter().map(|r| f(r)).sum::<f64>() / n;
            AblationSummary {
                label,
                seeds: cell.len(),
                washed_acc: mean(|r| r.report.after.washed_acc),
                retained_acc: mean(|r| r.report.after.retained_acc),
                reasoning_acc: mean(|r| r.report.after.reasoning_acc),
                fluency_log_ppl: mean(|r| r.report.after.fluency_log_ppl),
            }
        })
        .collect()
}

/// Writes each row as `report-<label>-s<seed>-<hash>.json` plus `ablation.jsonl`
/// with the per-point means.
pub fn write_ablation(out: &Path, rows: &[AblationRow]) -> Result<Vec<AblationSummary>> {
    fs::create_dir_all(out)?;
    for r in rows {
        let label = r.label.replace([':', '='], "-");
        write_json(&out.join(format!("report-law-{label}-s{}-{}.json", r.seed, r.config_hash)), &r.report)?;
    }
    let summary = summarize(rows);
    write_jsonl(&out.join("ablation.jsonl"), &summary)?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.tag().parse::<Method>().unwrap(), m);
            assert_eq!(serde_json::to_string(&m).unwrap(), format!("\"{}\"", m.tag()));
        }
        assert!("rome".parse::<Method>().is_err());
    }

    #[test]
    fn hash_tracks_config() {
        let a = ExperimentConfig::default();
        let b = ExperimentConfig { method: Method::Memit, ..a.clone() };
        assert_eq!(a.hash().unwrap(), a.clone().hash().unwrap());
        assert_ne!(a.hash().unwrap(), b.hash().unwrap());
        assert_eq!(a.hash().unwrap().len(), 12);
    }

    #[test]
    fn lambda_defaults_to_wash_size() {
        let c = ExperimentConfig::default();
        assert_eq!(c.resolved_lambda(100), 100.0);
        assert_eq!(c.resolved_lambda(0), 1.0);
        assert_eq!(ExperimentConfig { lambda: Some(7.0), ..c }.resolved_lambda(100), 7.0);
    }

    #[test]
    fn sweep_parsing() {
        assert_eq!("beta=1.05,1.1,1.5".parse::<Sweep>().unwrap(), Sweep::Beta(vec![1.05, 1.1, 1.5]));
        assert_eq!("se=on,off".parse::<Sweep>().unwrap(), Sweep::Se(vec![true, false]));
        assert_eq!("init=memit,random".parse::<Sweep>().unwrap(), Sweep::Init(vec![InitMode::Memit, InitMode::Random]));
        assert!("beta=0.5".parse::<Sweep>().is_err());
        assert!("depth=1".parse::<Sweep>().is_err());
    }

    #[test]
    fn toml_rejects_unknown_keys() {
        assert!(ExperimentConfig::from_toml("method = \"memit\"\nlambda = 50.0\n").is_ok());
        assert!(ExperimentConfig::from_toml("mehtod = \"memit\"\n").is_err());
        assert!(ExperimentConfig::from_toml("lambda = -1.0\n").is_err());
    }
}
