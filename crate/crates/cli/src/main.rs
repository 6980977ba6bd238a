use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use washlab::corpus::{generate, load_bundle, save_bundle};
use washlab::eval::full_report;
use washlab::experiment::{self, ExperimentConfig, Method, Sweep};
use washlab::model::load_checkpoint;
use washlab::washer::{BetaPolicy, InitMode, Objective};
use washlab::{Error, Result};

const CODE_VERSION: &str = env!("WASHLAB_CODE_VERSION");

#[derive(Parser)]
#[command(name = "washlab", version = CODE_VERSION, about = "Train a toy LM on synthetic facts and wash facts out of it")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a corpus directory.
    GenCorpus {
        #[arg(long)]
        seed: Option<u64>,
        /// Wash plus retain facts.
        #[arg(long)]
        facts: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Pretrain on a corpus directory.
    Train {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Wash facts out of a checkpoint with one method.
    Wash {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Facts to wash (JSON lines); defaults to the corpus wash split.
        #[arg(long)]
        facts: Option<PathBuf>,
        #[command(flatten)]
        wash: WashFlags,
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a checkpoint, optionally against the model it came from.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Reference model for the "before" column; defaults to the checkpoint itself.
        #[arg(long)]
        before: Option<PathBuf>,
        /// Print one JSON record instead of the table.
        #[arg(long)]
        json: bool,
    },
    /// Sweep one washing knob over several seeds.
    Ablate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// beta=1.05,1.1,1.5 | init=memit,random | se=on,off
        #[arg(long)]
        sweep: String,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        #[command(flatten)]
        wash: WashFlags,
        #[command(flatten)]
        common: Common,
    },
    /// Corpus, pretraining, wash and evaluation in one go.
    Run {
        #[command(flatten)]
        wash: WashFlags,
        #[command(flatten)]
        common: Common,
    },
    /// Repeat a recorded run and compare its outputs.
    Rerun {
        #[arg(long)]
        manifest: PathBuf,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML); flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, env = "WASHLAB_OUT")]
    out: PathBuf,
}

#[derive(Args, Default)]
struct WashFlags {
    #[arg(long)]
    method: Option<Method>,
    /// Inclusive layer range lo:hi.
    #[arg(long, value_parser = parse_layers)]
    layers: Option<LayerRange>,
    /// rel:<m> or const:<v>
    #[arg(long)]
    beta: Option<BetaPolicy>,
    #[arg(long)]
    lambda: Option<f64>,
    /// Disable successive elimination.
    #[arg(long)]
    no_se: bool,
    /// memit or random
    #[arg(long)]
    init: Option<InitMode>,
    /// constrained or gamma:<v>
    #[arg(long)]
    objective: Option<Objective>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone)]
struct LayerRange(Vec<usize>);

fn parse_layers(s: &str) -> std::result::Result<LayerRange, String> {
    let (lo, hi) = s.split_once(':').ok_or_else(|| format!("{s:?} is not lo:hi"))?;
    let lo: usize = lo.parse().map_err(|_| format!("bad layer {lo:?}"))?;
    let hi: usize = hi.parse().map_err(|_| format!("bad layer {hi:?}"))?;
    if lo > hi {
        return Err(format!("empty layer range {s}"));
    }
    Ok(LayerRange((lo..=hi).collect()))
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::from_toml(&fs::read_to_string(p)?),
        None => Ok(ExperimentConfig::default()),
    }
}

impl WashFlags {
    fn apply(&self, cfg: &mut ExperimentConfig) -> Result<()> {
        if let Some(m) = self.method {
            cfg.method = m;
        }
        if let Some(l) = &self.layers {
            cfg.wash.layers = l.0.clone();
        }
        if let Some(b) = self.beta {
            cfg.wash.beta = b;
        }
        if self.lambda.is_some() {
            cfg.lambda = self.lambda;
        }
        if self.no_se {
            cfg.wash.successive_elimination = false;
        }
        if let Some(i) = self.init {
            cfg.wash.init = i;
        }
        if let Some(o) = self.objective {
            cfg.wash.objective = o;
        }
        if let Some(s) = self.seed {
            cfg.wash.seed = s;
            cfg.key_seed = s;
        }
        cfg.validate()
    }
}

fn print_manifest_summary(m: &experiment::RunManifest, out: &Path) {
    println!("config hash {}", m.config_hash);
    for (name, rec) in &m.outputs {
        println!("{name:<16} {} {}", rec.sha256, rec.path.display());
    }
    println!("manifest {}", out.join(experiment::MANIFEST_NAME).display());
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenCorpus { seed, facts, common } => {
            let mut cfg = load_config(common.config.as_deref())?;
            if let Some(s) = seed {
                cfg.corpus.seed = s;
            }
            if let Some(n) = facts {
                cfg.corpus.n_facts = n;
            }
            let bundle = generate(&cfg.corpus)?;
            let m = save_bundle(&bundle, &common.out)?;
            println!(
                "corpus seed {} facts {} wash {} retain {} reasoning {} vocab {} -> {}",
                m.seed,
                m.facts_train,
                m.facts_wash,
                m.facts_retain,
                m.reasoning_train + m.reasoning_eval,
                m.vocab_size,
                common.out.display()
            );
        }
        Command::Train { corpus, seed, epochs, common } => {
            let mut cfg = load_config(common.config.as_deref())?;
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            let (manifest, log) = experiment::run_train(&cfg, &corpus, &common.out, CODE_VERSION)?;
            if let Some(last) = log.last() {
                println!("epoch {} loss {:.4}", last.epoch, last.loss);
            }
            print_manifest_summary(&manifest, &common.out);
        }
        Command::Wash { checkpoint, corpus, facts, wash, common } => {
            let mut cfg = load_config(common.config.as_deref())?;
            wash.apply(&mut cfg)?;
            let out = experiment::run_wash(&cfg, &checkpoint, &corpus, facts.as_deref(), &common.out, CODE_VERSION)?;
            for rec in &out.trace {
                println!("{}", serde_json::to_string(rec).map_err(Error::from)?);
            }
            if let Some(r) = &out.report {
                println!("{r}");
            }
            print_manifest_summary(&out.manifest, &common.out);
        }
        Command::Eval { checkpoint, corpus, before, json } => {
            let bundle = load_bundle(&corpus)?;
            let after = load_checkpoint(&checkpoint)?;
            let base = match &before {
                Some(p) => load_checkpoint(p)?,
                None => after.clone(),
            };
            let report = full_report(&base, &after, &bundle, "eval")?;
            if json {
                println!("{}", report.to_json_line()?);
            } else {
                println!("{report}");
            }
        }
        Command::Ablate { checkpoint, corpus, sweep, seeds, wash, common } => {
            let mut cfg = load_config(common.config.as_deref())?;
            wash.apply(&mut cfg)?;
            let sweep: Sweep = sweep.parse()?;
            let bundle = load_bundle(&corpus)?;
            let model = load_checkpoint(&checkpoint)?;
            let rows = experiment::run_ablation(&model, &bundle, &cfg, &sweep, &seeds)?;
            let summary = experiment::write_ablation(&common.out, &rows)?;
            println!("{:<16} {:>6} {:>8} {:>8} {:>9} {:>8}", "point", "seeds", "washed", "retained", "reasoning", "log_ppl");
            for s in summary {
                println!(
                    "{:<16} {:>6} {:>8.4} {:>8.4} {:>9.4} {:>8.4}",
                    s.label, s.seeds, s.washed_acc, s.retained_acc, s.reasoning_acc, s.fluency_log_ppl
                );
            }
        }
        Command::Run { wash, common } => {
            let mut cfg = load_config(common.config.as_deref())?;
            wash.apply(&mut cfg)?;
            let out = experiment::run_pipeline(&cfg, &common.out, CODE_VERSION)?;
            if let Some(r) = &out.report {
                println!("{r}");
            }
            print_manifest_summary(&out.manifest, &common.out);
        }
        Command::Rerun { manifest, common } => {
            if common.config.is_some() {
                return Err(Error::Config("rerun takes its config from the manifest".into()));
            }
            let r = experiment::rerun(&manifest, &common.out, CODE_VERSION)?;
            print_manifest_summary(&r.manifest, &common.out);
            if r.identical() {
                println!("identical to the recorded run");
            } else {
                return Err(Error::Format(format!("outputs differ from the recorded run: {}", r.mismatches.join(", "))));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 4 } else { 3 })
        }
    }
}
