//! `flowfix` command-line driver.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use flowfix_core::degrade::Split;
use flowfix_core::image::{read_ppm, write_ppm};
use flowfix_core::lora::LoraAdapter;
use flowfix_core::metrics::{degraded_floor, evaluate, FeatureExtractor, MetricReport, MetricRow};
use flowfix_core::rng::{derive_seed, rng_for, tag};
use flowfix_core::text::prompt_for;
use flowfix_core::{
    Checkpoint, Error as CoreError, FlowTransformer, Pipeline, PromptVocab, Regime, RunConfig, SampleConfig, Task,
    TextEmbedder, TrainMode, Trainer,
};

pub mod manifest;

use manifest::{load_split, write_dataset};

pub const CHECKPOINT_FILE: &str = "checkpoint.e2rc";
pub const ADAPTER_FILE: &str = "adapter.e2ra";
pub const LOSS_FILE: &str = "loss.csv";

/// Bad arguments or configuration (exit code 2).
#[derive(Debug)]
pub struct UsageError(pub String);

/// Missing, malformed or inconsistent input data (exit code 3).
#[derive(Debug)]
pub struct DataError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl fmt::Display for DataError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}
impl std::error::Error for DataError {}

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;

/// Maps an error chain onto the documented exit codes.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if cause.downcast_ref::<UsageError>().is_some() {
            return EXIT_USAGE;
        }
        if cause.downcast_ref::<DataError>().is_some() {
            return EXIT_DATA;
        }
        if let Some(e) = cause.downcast_ref::<CoreError>() {
            return match e {
                CoreError::NonFinite(_) => EXIT_NUMERICAL,
                CoreError::InvalidConfig(_)
                | CoreError::UnknownToken { .. }
                | CoreError::PromptTooLong { .. }
                | CoreError::UnknownSite(_)
                | CoreError::RankTooLarge { .. } => EXIT_USAGE,
                _ => EXIT_DATA,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() || cause.downcast_ref::<serde_json::Error>().is_some() {
            return EXIT_DATA;
        }
    }
    1
}

fn parse_task(s: &str) -> std::result::Result<Task, String> {
    s.parse::<Task>().map_err(|e| e.to_string())
}

#[derive(Parser, Debug)]
#[command(name = "flowfix", version, about = "Few-shot image restoration with LoRA-adapted rectified flow")]
pub struct Cli {
    /// JSON run configuration (sections: model, train, sample, data, eval).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a paired dataset directory.
    Degrade(DegradeArgs),
    /// Train an adapter (or a full base model).
    Train(TrainArgs),
    /// Restore one PPM image.
    Restore(RestoreArgs),
    /// Score a checkpoint on a dataset's eval split.
    Eval(EvalArgs),
    /// Run a grid of training runs and summarize them.
    Sweep(SweepArgs),
    /// Inspect or merge adapter files.
    #[command(subcommand)]
    Adapter(AdapterCommand),
    /// Print the effective configuration as JSON.
    Config,
}

#[derive(Args, Debug)]
pub struct DegradeArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Pairs per task in the training split.
    #[arg(long)]
    pub n: Option<usize>,
    /// Pairs per task in the eval split.
    #[arg(long)]
    pub eval_n: Option<usize>,
    /// Comma-separated subset of noise, rain, haze.
    #[arg(long, value_delimiter = ',', value_parser = parse_task)]
    pub tasks: Option<Vec<Task>>,
    /// Draw the training split from the pre-training corpus instead.
    #[arg(long)]
    pub pretrain: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum RegimeArg {
    Unified,
    PerTask,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ModeArg {
    Lora,
    Full,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Dataset directory (or manifest path).
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Checkpoint providing the base transformer and prompt embedder.
    #[arg(long)]
    pub base: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub regime: Option<RegimeArg>,
    #[arg(long, value_parser = parse_task)]
    pub task: Option<Task>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    #[arg(long)]
    pub iterations: Option<usize>,
    /// Train the prompt embedder alongside the adapter.
    #[arg(long)]
    pub text_trainable: bool,
    /// Continue from `<out>/checkpoint.e2rc` when present.
    #[arg(long)]
    pub resume: bool,
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Args, Debug)]
pub struct RestoreArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Adapter file to apply instead of the checkpoint's own adapter.
    #[arg(long)]
    pub adapter: Option<PathBuf>,
    /// Ignore any adapter and use the base model.
    #[arg(long)]
    pub no_adapter: bool,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// One of the prompt templates, e.g. "remove the rain from the image".
    #[arg(long, conflicts_with_all = ["task", "prompt_free"])]
    pub prompt: Option<String>,
    /// Shorthand for the task's template prompt.
    #[arg(long, value_parser = parse_task, conflicts_with = "prompt_free")]
    pub task: Option<Task>,
    /// Use the unconditional prompt.
    #[arg(long)]
    pub prompt_free: bool,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub guidance: Option<f64>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub adapter: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    /// Output CSV; a JSON sidecar is written next to it.
    #[arg(long)]
    pub report: PathBuf,
    /// Add rows for the base model without its adapter.
    #[arg(long)]
    pub with_baseline: bool,
    /// Add rows for the unrestored degraded inputs.
    #[arg(long)]
    pub with_floor: bool,
    #[arg(long)]
    pub prompt_free: bool,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub label: Option<String>,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Base checkpoint shared by every run.
    #[arg(long)]
    pub base: PathBuf,
    /// Pairs per task for the unified runs.
    #[arg(long, value_delimiter = ',', default_value = "16,32,64,128")]
    pub n: Vec<usize>,
    /// Pairs per task at which per-task adapters are also trained.
    #[arg(long, value_delimiter = ',')]
    pub per_task_n: Vec<usize>,
    /// Also train every configuration with a trainable prompt embedder.
    #[arg(long)]
    pub text_both: bool,
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Subcommand, Debug)]
pub enum AdapterCommand {
    /// Print an adapter file's header and parameter count.
    Info { path: PathBuf },
    /// Fold an adapter into a checkpoint's base weights.
    Merge {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        adapter: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Loads the configuration and applies `--seed`.
pub fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.data.seed = seed;
        cfg.train.seed = seed;
        cfg.sample.seed = seed;
        cfg.eval.seed = seed;
    }
    Ok(cfg)
}

/// Sets the worker count from `E2R_THREADS` when present.
pub fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("E2R_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| UsageError(format!("E2R_THREADS must be a positive integer, got {v:?}")))?;
        if n == 0 {
            bail!(UsageError("E2R_THREADS must be positive".into()));
        }
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    init_threads()?;
    let cfg = load_config(&cli)?;
    match cli.command {
        Command::Degrade(a) => cmd_degrade(&cfg, &a),
        Command::Train(a) => cmd_train(&cfg, &a),
        Command::Restore(a) => cmd_restore(&cfg, &a),
        Command::Eval(a) => cmd_eval(&cfg, &a),
        Command::Sweep(a) => cmd_sweep(&cfg, &a),
        Command::Adapter(a) => cmd_adapter(&a),
        Command::Config => {
            println!("{}", cfg.to_json());
            Ok(())
        }
    }
}

pub fn cmd_degrade(cfg: &RunConfig, a: &DegradeArgs) -> Result<()> {
    let mut data = cfg.data.clone();
    if let Some(n) = a.n {
        data.n_per_task = n;
    }
    if let Some(n) = a.eval_n {
        data.eval_per_task = n;
    }
    if let Some(t) = &a.tasks {
        data.tasks = t.clone();
    }
    if !flowfix_core::degrade::is_sweep_count(data.n_per_task) {
        eprintln!(
            "note: {} pairs per task is outside the 16/32/64/128 grid",
            data.n_per_task
        );
    }
    let m = if a.pretrain {
        manifest::write_pretrain(&a.out, &data, cfg.model.image_size)?
    } else {
        write_dataset(&a.out, &data, cfg.model.image_size)?
    };
    println!(
        "wrote {} train and {} eval records to {}",
        m.records.iter().filter(|r| r.split != Split::Eval).count(),
        m.count(Split::Eval),
        a.out.display()
    );
    Ok(())
}

fn fresh_base(cfg: &RunConfig) -> Result<(FlowTransformer, TextEmbedder)> {
    let mut rng = rng_for(cfg.train.seed, &[tag::INIT, 0]);
    let model = FlowTransformer::new(cfg.model.clone(), &mut rng)?;
    let text = TextEmbedder::new(PromptVocab::with_max_len(cfg.model.text_len), cfg.model.d_model, &mut rng);
    Ok((model, text))
}

fn load_base(path: &Path) -> Result<(FlowTransformer, TextEmbedder)> {
    let ck = Checkpoint::load(path).with_context(|| format!("loading base checkpoint {}", path.display()))?;
    let model = match &ck.adapter {
        Some(a) => a.merged(&ck.model)?,
        None => ck.model,
    };
    Ok((model, ck.text))
}

pub fn cmd_train(cfg: &RunConfig, a: &TrainArgs) -> Result<()> {
    let mut tc = cfg.train.clone();
    if let Some(r) = a.regime {
        tc.regime = match r {
            RegimeArg::Unified => Regime::Unified,
            RegimeArg::PerTask => Regime::PerTask,
        };
    }
    if a.task.is_some() {
        tc.task = a.task;
    }
    if let Some(m) = a.mode {
        tc.mode = match m {
            ModeArg::Lora => TrainMode::Lora,
            ModeArg::Full => TrainMode::Full,
        };
    }
    if let Some(n) = a.iterations {
        tc.iterations = n;
        tc.warmup_steps = tc.warmup_steps.min(n);
    }
    if a.text_trainable {
        tc.text_encoder_trainable = true;
    }
    tc.validate()?;

    let data = load_training_records(&a.data)?;
    let ck_path = a.out.join(CHECKPOINT_FILE);
    let mut trainer = if a.resume && ck_path.exists() {
        let ck = Checkpoint::load(&ck_path)?;
        if ck.train_config != tc {
            bail!(UsageError(format!(
                "{} was written with a different training configuration",
                ck_path.display()
            )));
        }
        Trainer::resume(&ck, &data)?
    } else {
        let (model, text) = match &a.base {
            Some(p) => load_base(p)?,
            None => fresh_base(cfg)?,
        };
        if model.config != cfg.model && a.base.is_none() {
            bail!(UsageError("model configuration mismatch".into()));
        }
        Trainer::new(model, text, &data, tc.clone())?
    };
    println!("{}", trainer.summary());
    match (tc.regime, tc.task) {
        (Regime::PerTask, Some(t)) => println!("regime: per-task ({t}), {} records", trainer.pool_len()),
        _ => println!("regime: unified, {} records", trainer.pool_len()),
    }
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    fs::write(a.out.join("config.json"), cfg.to_json())?;
    let quiet = a.quiet;
    trainer.run(Some(&ck_path), |r| {
        if !quiet && (r.iteration % 100 == 0 || r.iteration == 1) {
            println!("iter {:>5}  loss {:.5}  lr {:.2e}{}", r.iteration, r.loss, r.lr_lora, if r.clipped { "  clipped" } else { "" });
        }
    })?;
    fs::write(a.out.join(LOSS_FILE), trainer.log_csv())?;
    if let Some(ad) = &trainer.adapter {
        ad.save(&a.out.join(ADAPTER_FILE))?;
    }
    println!("saved {}", ck_path.display());
    Ok(())
}

/// Every non-eval record of a dataset directory.
fn load_training_records(dir: &Path) -> Result<flowfix_core::PairedDataset> {
    let mut ds = load_split(dir, Split::Train).or_else(|_| load_split(dir, Split::Pretrain))?;
    if let Ok(extra) = load_split(dir, Split::Pretrain) {
        if ds.records.first().map(|r| r.split) == Some(Split::Train) {
            ds.records.extend(extra.records);
        }
    }
    Ok(ds)
}

fn pipeline_for(ck: &Checkpoint, adapter: Option<&Path>, no_adapter: bool) -> Result<Pipeline> {
    let adapter = if no_adapter {
        None
    } else {
        match adapter {
            Some(p) => Some(LoraAdapter::load(p).with_context(|| format!("loading adapter {}", p.display()))?),
            None => ck.adapter.clone(),
        }
    };
    Ok(Pipeline::new(ck.model.clone(), ck.text.clone(), adapter)?)
}

pub fn cmd_restore(cfg: &RunConfig, a: &RestoreArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)
        .with_context(|| format!("loading checkpoint {}", a.checkpoint.display()))?;
    let pipeline = pipeline_for(&ck, a.adapter.as_deref(), a.no_adapter)?;
    let prompt = if a.prompt_free {
        String::new()
    } else if let Some(t) = a.task {
        t.prompt()
    } else if let Some(p) = &a.prompt {
        if !Task::ALL.iter().any(|t| &t.prompt() == p) {
            bail!(UsageError(format!(
                "prompt must be one of the templates: {}",
                Task::ALL.map(|t| format!("{:?}", prompt_for(t.name()))).join(", ")
            )));
        }
        p.clone()
    } else {
        bail!(UsageError("pass --prompt, --task or --prompt-free".into()));
    };
    let sc = SampleConfig {
        steps: a.steps.unwrap_or(cfg.sample.steps),
        guidance: a.guidance.unwrap_or(cfg.sample.guidance),
        seed: cfg.sample.seed,
        prompt,
    };
    let img = read_ppm(&a.input)?;
    let out = pipeline.merged()?.restore(&img, &sc)?;
    write_ppm(&a.out, &out)?;
    println!(
        "restored {}x{} image to {}",
        out.shape()[1],
        out.shape()[0],
        a.out.display()
    );
    Ok(())
}

pub fn cmd_eval(cfg: &RunConfig, a: &EvalArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)
        .with_context(|| format!("loading checkpoint {}", a.checkpoint.display()))?;
    let eval = load_split(&a.data, Split::Eval)?;
    let mut ec = cfg.eval.clone();
    if a.prompt_free {
        ec.prompt_free = true;
    }
    if let Some(s) = a.steps {
        ec.steps = s;
    }
    let pipeline = pipeline_for(&ck, a.adapter.as_deref(), false)?;
    let label = a
        .label
        .clone()
        .unwrap_or_else(|| if pipeline.adapter.is_some() { "adapted" } else { "base" }.to_string());
    let mut report = MetricReport::default();
    if a.with_floor {
        let fx = FeatureExtractor::new(ec.extractor_seed);
        report.extend(degraded_floor("degraded", &eval.records, &fx)?);
    }
    if a.with_baseline {
        let base = Pipeline::new(ck.model.clone(), ck.text.clone(), None)?;
        report.extend(evaluate("baseline", &base, &eval.records, &ec)?);
    }
    report.extend(evaluate(&label, &pipeline, &eval.records, &ec)?);
    report.write(&a.report, ec.extractor_seed)?;
    print!("{}", report.to_csv());
    Ok(())
}

struct SweepRun {
    label: String,
    group: String,
    n: usize,
    regime: Regime,
    task: Option<Task>,
    text_trainable: bool,
}

fn sweep_runs(a: &SweepArgs) -> Vec<SweepRun> {
    let mut runs = Vec::new();
    let te_arms: &[bool] = if a.text_both { &[false, true] } else { &[false] };
    for &te in te_arms {
        let te_label = if te { "-te" } else { "" };
        for &n in &a.n {
            runs.push(SweepRun {
                label: format!("unified-{n}{te_label}"),
                group: format!("unified-{n}{te_label}"),
                n,
                regime: Regime::Unified,
                task: None,
                text_trainable: te,
            });
        }
        for &n in &a.per_task_n {
            for task in Task::ALL {
                runs.push(SweepRun {
                    label: format!("{task}-{n}{te_label}"),
                    group: format!("task-specific-{n}{te_label}"),
                    n,
                    regime: Regime::PerTask,
                    task: Some(task),
                    text_trainable: te,
                });
            }
        }
    }
    runs
}

pub fn cmd_sweep(cfg: &RunConfig, a: &SweepArgs) -> Result<()> {
    let (model, text) = load_base(&a.base)?;
    let runs = sweep_runs(a);
    println!("sweep: {} runs", runs.len());
    let mut rows: Vec<(String, usize, String, bool, MetricRow)> = Vec::new();
    for (i, run) in runs.iter().enumerate() {
        let dir = a.out.join("runs").join(&run.label);
        let data_dir = a.out.join("data").join(format!("n{}", run.n));
        if !data_dir.join(manifest::MANIFEST).exists() {
            let mut d = cfg.data.clone();
            d.n_per_task = run.n;
            write_dataset(&data_dir, &d, cfg.model.image_size)?;
        }
        let ck_path = dir.join(CHECKPOINT_FILE);
        let mut tc = cfg.train.clone();
        tc.regime = run.regime;
        tc.task = run.task;
        tc.text_encoder_trainable = run.text_trainable;
        tc.seed = derive_seed(cfg.train.seed, &[tag::SWEEP, i as u64]);
        let done = Checkpoint::load(&ck_path)
            .map(|c| c.iteration == tc.iterations && c.train_config == tc)
            .unwrap_or(false);
        if done {
            println!("[{}/{}] {}: complete, skipping", i + 1, runs.len(), run.label);
        } else {
            println!("[{}/{}] {}: training", i + 1, runs.len(), run.label);
            let data = load_split(&data_dir, Split::Train)?;
            let mut trainer = Trainer::new(model.clone(), text.clone(), &data, tc.clone())?;
            let quiet = a.quiet;
            trainer.run(Some(&ck_path), |r| {
                if !quiet && r.iteration % 500 == 0 {
                    println!("  iter {:>5}  loss {:.5}", r.iteration, r.loss);
                }
            })?;
            fs::write(dir.join(LOSS_FILE), trainer.log_csv())?;
            if let Some(ad) = &trainer.adapter {
                ad.save(&dir.join(ADAPTER_FILE))?;
            }
        }
        let ck = Checkpoint::load(&ck_path)?;
        let pipeline = pipeline_for(&ck, None, false)?;
        let eval = load_split(&data_dir, Split::Eval)?;
        let eval = match run.task {
            Some(t) => eval.filter(|r| r.task == t),
            None => eval,
        };
        let report_rows = evaluate(&run.label, &pipeline, &eval.records, &cfg.eval)?;
        let mut report = MetricReport::default();
        report.extend(report_rows.clone());
        report.write(&dir.join("report.csv"), cfg.eval.extractor_seed)?;
        let regime = match run.regime {
            Regime::Unified => "unified",
            Regime::PerTask => "per-task",
        };
        for r in report_rows.into_iter().filter(|r| r.sigma.is_none()) {
            rows.push((run.group.clone(), run.n, regime.to_string(), run.text_trainable, r));
        }
    }
    let summary = sweep_summary(&rows);
    fs::write(a.out.join("summary.csv"), &summary)?;
    print!("{summary}");
    Ok(())
}

/// One line per configuration with per-task metric columns.
fn sweep_summary(rows: &[(String, usize, String, bool, MetricRow)]) -> String {
    let mut out = String::from("config,pairs_per_task,regime,text_encoder");
    for t in Task::ALL {
        out.push_str(&format!(",{t}_psnr,{t}_ssim,{t}_fid,{t}_mmd"));
    }
    out.push('\n');
    let mut groups: Vec<&str> = Vec::new();
    for (g, ..) in rows {
        if !groups.contains(&g.as_str()) {
            groups.push(g);
        }
    }
    for g in groups {
        let members: Vec<_> = rows.iter().filter(|r| r.0 == g).collect();
        let (_, n, regime, te, _) = members[0];
        out.push_str(&format!("{g},{n},{regime},{}", if *te { "trainable" } else { "frozen" }));
        for t in Task::ALL {
            match members.iter().find(|r| r.4.task == t) {
                Some(r) => out.push_str(&format!(",{:.4},{:.4},{:.6},{:.6}", r.4.psnr, r.4.ssim, r.4.fid, r.4.mmd)),
                None => out.push_str(",,,,"),
            }
        }
        out.push('\n');
    }
    out
}

pub fn cmd_adapter(a: &AdapterCommand) -> Result<()> {
    match a {
        AdapterCommand::Info { path } => {
            let ad = LoraAdapter::load(path).with_context(|| format!("loading adapter {}", path.display()))?;
            let bytes = fs::metadata(path)?.len();
            println!("task_tag: {}", ad.task_tag);
            println!("rank: {}", ad.rank);
            println!("alpha: {}", ad.alpha);
            println!("scale: {}", ad.scale());
            println!("sites: {}", ad.sites.len());
            for (name, f) in &ad.sites {
                println!("  {name}: A {:?}, B {:?}", f.a.shape(), f.b.shape());
            }
            println!("parameters: {}", ad.numel());
            println!("file bytes: {bytes}");
            Ok(())
        }
        AdapterCommand::Merge { checkpoint, adapter, out } => {
            let mut ck = Checkpoint::load(checkpoint)
                .with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
            let ad = match adapter {
                Some(p) => LoraAdapter::load(p)?,
                None => ck
                    .adapter
                    .clone()
                    .ok_or_else(|| anyhow!(DataError(format!("{} holds no adapter", checkpoint.display()))))?,
            };
            ad.merge(&mut ck.model)?;
            ck.adapter = None;
            ck.moments.clear();
            ck.save(out)?;
            println!("merged {} sites into {}", ad.sites.len(), out.display());
            Ok(())
        }
    }
}

