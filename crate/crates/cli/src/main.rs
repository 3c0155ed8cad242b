mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand, ValueEnum};
use sha2::{Digest, Sha256};
use tqnet::augment::AugmentConfig;
use tqnet::DType;
use tqnet::config::ExperimentConfig;
use tqnet::corpus::{build_vocab, generate_synthetic_corpus, load_corpus, write_corpus, CorpusBundle, EncodedCorpus, TokenVocab};
use tqnet::evaluate::{eval_kp, eval_similar, EvalReport, Subset};
use tqnet::finetune::{finetune, Method};
use tqnet::model::{Checkpoint, FusionKind};
use tqnet::pretrain::{init_checkpoint, pretrain, pretrain_from, Scope, Strategy};
use tqnet::verify::{run_verification, VerifyOptions};
use tqnet::{Result, TqError};

use manifest::{append_experiment, append_manifest, integrity_problems, read_manifest, RunManifest};

/// Exit code for verification or metric failures.
const EXIT_FAILED: u8 = 1;
/// Exit code for usage, configuration and input errors.
const EXIT_USAGE: u8 = 2;

#[derive(Parser)]
#[command(name = "tqnet", version, about = "Contrastive representation learning for text+image test questions")]
struct Cli {
    /// Experiment configuration (JSON). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the global seed of the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output root; the TQNET_OUT environment variable takes precedence.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus.
    GenData {
        #[arg(long)]
        force: bool,
    },
    /// Unsupervised pretraining.
    Pretrain {
        #[arg(long, value_enum)]
        strategy: Option<StrategyArg>,
        #[arg(long, value_enum)]
        scope: Option<ScopeArg>,
        #[arg(long, value_enum)]
        fusion: Option<FusionArg>,
        /// Continue from this checkpoint instead of a fresh model.
        #[arg(long)]
        from: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Supervised fine-tuning on labelled pairs.
    Finetune {
        #[arg(long, value_enum)]
        method: Option<MethodArg>,
        /// Starting checkpoint; a random initialisation when omitted.
        #[arg(long)]
        from: Option<PathBuf>,
        #[arg(long, value_enum)]
        fusion: Option<FusionArg>,
        #[arg(long)]
        force: bool,
    },
    /// Evaluate a checkpoint.
    Eval {
        #[arg(long, value_enum, default_value = "similar")]
        task: TaskArg,
        #[arg(long, default_value = "all")]
        subset: String,
        #[arg(long)]
        from: PathBuf,
    },
    /// Run the built-in verification suite.
    Verify {
        /// Only the fast oracle checks.
        #[arg(long)]
        quick: bool,
        /// Momentum coefficients for the contraction check.
        #[arg(long = "momentum", num_args = 1..)]
        momentum: Vec<f64>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    Mlm,
    Cl,
    Mcl,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScopeArg {
    Uni,
    Seq,
    Cross,
}

#[derive(Clone, Copy, ValueEnum)]
enum FusionArg {
    Coordinated,
    Joint,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Pair,
    Scl,
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Similar,
    Kp,
}

enum Outcome {
    Ok,
    Failed(String),
}

struct Ctx {
    cfg: ExperimentConfig,
    root: PathBuf,
}

impl Ctx {
    fn new(cli: &Cli) -> Result<Self> {
        let mut cfg = match &cli.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = cli.seed {
            cfg.seed = s;
        }
        let cfg = cfg.seeded();
        let root = std::env::var_os("TQNET_OUT")
            .map(PathBuf::from)
            .or_else(|| cli.out.clone())
            .unwrap_or_else(|| cfg.output_dir.clone());
        Ok(Self { cfg, root })
    }

    fn corpus_dir(&self) -> PathBuf {
        self.root.join("corpus")
    }

    fn load_corpus(&self) -> Result<(CorpusBundle, TokenVocab, EncodedCorpus)> {
        let dir = self.corpus_dir();
        if !dir.join("questions.jsonl").exists() {
            return Err(TqError::Argument(format!(
                "no corpus at {}; run gen-data first",
                dir.display()
            )));
        }
        let bundle = load_corpus(&dir)?;
        let vocab = build_vocab(&bundle, self.cfg.corpus.min_freq)?;
        let max_len = self.max_len(&bundle);
        let corpus = EncodedCorpus::encode(&bundle, &vocab, max_len, self.cfg.model.image_size)?;
        Ok((bundle, vocab, corpus))
    }

    fn max_len(&self, bundle: &CorpusBundle) -> usize {
        if self.cfg.model.max_len > 0 {
            self.cfg.model.max_len
        } else {
            bundle
                .generator
                .as_ref()
                .map(|g| g.max_len)
                .unwrap_or_else(|| bundle.questions.iter().map(|q| q.text.len()).max().unwrap_or(1))
        }
    }

    fn run_key(&self, command: &str, flags: &str) -> String {
        let mut h = Sha256::new();
        h.update(command.as_bytes());
        h.update(self.cfg.hash().as_bytes());
        h.update(flags.as_bytes());
        format!("{:x}", h.finalize())
    }

    fn guard(&self, key: &str, force: bool) -> Result<()> {
        if force {
            return Ok(());
        }
        if read_manifest(&self.root)?.iter().any(|e| e.run_key == key) {
            return Err(TqError::Argument(
                "this run was already recorded with the same configuration; pass --force to redo it".to_string(),
            ));
        }
        Ok(())
    }

    fn record(&self, command: &str, key: String, outputs: Vec<String>, parent: Option<String>, started: Instant) -> Result<()> {
        append_manifest(
            &self.root,
            &RunManifest {
                command: command.to_string(),
                run_key: key,
                config_hash: self.cfg.hash(),
                code_version: env!("CARGO_PKG_VERSION").to_string(),
                outputs,
                parent,
                wall_clock_secs: started.elapsed().as_secs_f64(),
                unix_time: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
            },
        )
    }

    fn save_checkpoint(&self, ckpt: &Checkpoint) -> Result<String> {
        let name = format!("{}-{}", ckpt.manifest.stages.join("_").replace('-', ""), ckpt.manifest.id);
        let name = name.trim_start_matches('-').to_string();
        let rel = format!("checkpoints/{name}");
        ckpt.save(&self.root.join(&rel))?;
        Ok(rel)
    }
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    if !path.join("manifest.json").exists() {
        return Err(TqError::Argument(format!("no checkpoint at {}", path.display())));
    }
    Checkpoint::load(path)
}

fn cmd_gen_data(ctx: &Ctx, force: bool) -> Result<Outcome> {
    let started = Instant::now();
    let key = ctx.run_key("gen-data", "");
    ctx.guard(&key, force)?;
    let bundle = generate_synthetic_corpus(&ctx.cfg.corpus.generator, ctx.cfg.seed)?;
    let dir = ctx.corpus_dir();
    if dir.exists() {
        std::fs::remove_dir_all(&dir)?;
    }
    write_corpus(&bundle, &dir)?;
    ctx.record("gen-data", key, vec!["corpus".to_string()], None, started)?;
    println!("{}", dir.display());
    Ok(Outcome::Ok)
}

fn cmd_pretrain(
    ctx: &Ctx,
    strategy: Option<StrategyArg>,
    scope: Option<ScopeArg>,
    fusion: Option<FusionArg>,
    from: Option<&Path>,
    force: bool,
) -> Result<Outcome> {
    let started = Instant::now();
    let mut cfg = ctx.cfg.pretrain.clone();
    if let Some(s) = strategy {
        cfg.strategy = match s {
            StrategyArg::Mlm => Strategy::Mlm,
            StrategyArg::Cl => Strategy::Cl,
            StrategyArg::Mcl => Strategy::Mcl,
        };
    }
    if let Some(s) = scope {
        cfg.scope = match s {
            ScopeArg::Uni => Scope::Uni,
            ScopeArg::Seq => Scope::Seq,
            ScopeArg::Cross => Scope::Cross,
        };
    }
    let mut model_cfg = ctx.cfg.model.clone();
    if let Some(f) = fusion {
        model_cfg.fusion = fusion_kind(f);
    }
    let flags = format!("{}|{}|{}|{:?}", cfg.strategy, cfg.scope, model_cfg.fusion.as_str(), from);
    let key = ctx.run_key("pretrain", &flags);
    ctx.guard(&key, force)?;
    let (bundle, vocab, corpus) = ctx.load_corpus()?;
    if cfg.scope == Scope::Cross && cfg.strategy != Strategy::Mlm && !bundle.questions.iter().any(|q| q.has_images()) {
        return Err(TqError::Argument("cross scope needs a corpus with images".to_string()));
    }
    let augment: &AugmentConfig = &ctx.cfg.augment;
    let dtype = DType::F32;
    let ckpt = match from {
        Some(p) => {
            let init = load_checkpoint(p)?;
            if init.manifest.vocab_hash != vocab.hash() {
                return Err(TqError::Integrity("checkpoint vocabulary differs from the corpus vocabulary".into()));
            }
            pretrain_from(&init, &corpus, augment, &cfg, dtype)?
        }
        None => {
            let model_cfg = model_cfg.resolved(vocab.len(), ctx.max_len(&bundle));
            pretrain(&corpus, &vocab, &model_cfg, augment, &cfg, dtype)?
        }
    };
    let rel = ctx.save_checkpoint(&ckpt)?;
    ctx.record("pretrain", key, vec![rel.clone()], ckpt.manifest.parent.clone(), started)?;
    println!("{}", ctx.root.join(rel).display());
    Ok(Outcome::Ok)
}

fn fusion_kind(f: FusionArg) -> FusionKind {
    match f {
        FusionArg::Coordinated => FusionKind::Coordinated,
        FusionArg::Joint => FusionKind::Joint,
    }
}

fn cmd_finetune(ctx: &Ctx, method: Option<MethodArg>, from: Option<&Path>, fusion: Option<FusionArg>, force: bool) -> Result<Outcome> {
    let started = Instant::now();
    let mut cfg = ctx.cfg.finetune.clone();
    if let Some(m) = method {
        cfg.method = match m {
            MethodArg::Pair => Method::Pair,
            MethodArg::Scl => Method::Scl,
        };
    }
    let flags = format!("{}|{:?}|{:?}", cfg.method.as_str(), from, fusion.map(|f| fusion_kind(f).as_str()));
    let key = ctx.run_key("finetune", &flags);
    ctx.guard(&key, force)?;
    let init = match from {
        Some(p) => Some(load_checkpoint(p)?),
        None => None,
    };
    let (bundle, vocab, corpus) = ctx.load_corpus()?;
    let dtype = DType::F32;
    let init = match init {
        Some(c) => c,
        None => {
            let mut model_cfg = ctx.cfg.model.resolved(vocab.len(), ctx.max_len(&bundle));
            if let Some(f) = fusion {
                model_cfg.fusion = fusion_kind(f);
            }
            init_checkpoint(&vocab, &model_cfg, ctx.cfg.seed, dtype)?
        }
    };
    if init.manifest.vocab_hash != vocab.hash() {
        return Err(TqError::Integrity("checkpoint vocabulary differs from the corpus vocabulary".into()));
    }
    let ckpt = finetune(&init, &bundle, &corpus, &cfg, dtype)?;
    let rel = ctx.save_checkpoint(&ckpt)?;
    ctx.record("finetune", key, vec![rel.clone()], ckpt.manifest.parent.clone(), started)?;
    println!("{}", ctx.root.join(rel).display());
    Ok(Outcome::Ok)
}

fn cmd_eval(ctx: &Ctx, task: TaskArg, subset: &str, from: &Path) -> Result<Outcome> {
    let started = Instant::now();
    let subset: Subset = subset.parse()?;
    let ckpt = load_checkpoint(from)?;
    let (bundle, vocab, corpus) = ctx.load_corpus()?;
    let dtype = DType::F32;
    let report: EvalReport = match task {
        TaskArg::Similar => eval_similar(&ckpt, &bundle, &vocab, &corpus, subset, &ctx.cfg.eval, dtype)?,
        TaskArg::Kp => {
            if subset != Subset::All {
                return Err(TqError::Argument("the kp task has no pair subsets".to_string()));
            }
            eval_kp(&ckpt, &bundle, &vocab, &corpus, &ctx.cfg.eval, dtype)?
        }
    };
    for w in &report.warnings {
        log::warn!("{w}");
    }
    let rel = format!("reports/{}-{}-{}.json", report.task, report.subset, ckpt.manifest.id);
    let path = ctx.root.join(&rel);
    std::fs::create_dir_all(path.parent().expect("reports dir"))?;
    std::fs::write(&path, serde_json::to_string_pretty(&report)?)?;
    append_experiment(&ctx.root, EvalReport::CSV_HEADER, &report.csv_row())?;
    let key = ctx.run_key("eval", &rel);
    ctx.record("eval", key, vec![rel, manifest::EXPERIMENTS_FILE.to_string()], Some(ckpt.manifest.id.clone()), started)?;
    println!("{}", serde_json::to_string(&report)?);
    if !(0.0..=1.0).contains(&report.metric.value) {
        return Ok(Outcome::Failed(format!("metric {} out of range", report.metric.value)));
    }
    Ok(Outcome::Ok)
}

fn cmd_verify(ctx: &Ctx, quick: bool, momentum: Vec<f64>) -> Result<Outcome> {
    let mut opts = VerifyOptions {
        quick,
        seed: ctx.cfg.seed,
        ..VerifyOptions::default()
    };
    if !momentum.is_empty() {
        opts.momentum_values = momentum;
    }
    let report = run_verification(&opts);
    let mut checks = report.checks.clone();
    let integrity = match integrity_problems(&ctx.root) {
        Ok(p) if p.is_empty() => (true, "manifest and output tree agree".to_string()),
        Ok(p) => (false, p.join("; ")),
        Err(e) => (false, format!("error: {e}")),
    };
    checks.push(tqnet::verify::CheckResult {
        name: "manifest_integrity".to_string(),
        passed: integrity.0,
        detail: integrity.1,
    });
    for c in &checks {
        println!("{} {:<28} {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    let failed: Vec<&str> = checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
    if failed.is_empty() {
        Ok(Outcome::Ok)
    } else {
        Ok(Outcome::Failed(format!("failed checks: {}", failed.join(", "))))
    }
}

fn run(cli: Cli) -> Result<Outcome> {
    let ctx = Ctx::new(&cli)?;
    match cli.command {
        Command::GenData { force } => cmd_gen_data(&ctx, force),
        Command::Pretrain {
            strategy,
            scope,
            fusion,
            from,
            force,
        } => cmd_pretrain(&ctx, strategy, scope, fusion, from.as_deref(), force),
        Command::Finetune {
            method,
            from,
            fusion,
            force,
        } => cmd_finetune(&ctx, method, from.as_deref(), fusion, force),
        Command::Eval { task, subset, from } => cmd_eval(&ctx, task, &subset, &from),
        Command::Verify { quick, momentum } => cmd_verify(&ctx, quick, momentum),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::Failed(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_FAILED)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_USAGE)
        }
    }
}
