use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use mgvmoe::autodiff::OptimizerKind;
use mgvmoe::data::{generate_dataset, split_zero_shot, Dataset, DatasetConfig, DatasetSplit};
use mgvmoe::encoders::Task;
use mgvmoe::harness::{
    ablate, evaluate, expert_report, expert_rows_to_csv, export_embeddings, rows_to_csv, sweep_beta, sweep_experts,
    train, Checkpoint, MetricsReport, TrainConfig,
};

#[derive(Parser)]
#[command(name = "mgvmoe", version, about = "Zero-shot multimodal entity typing and relation extraction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset directory.
    Generate(GenerateArgs),
    /// Train on the seen categories of one split.
    Train(TrainArgs),
    /// Score a checkpoint on one category set.
    Evaluate(EvalArgs),
    /// Train and evaluate for each expert count.
    SweepExperts(SweepArgs),
    /// Train and evaluate for each loss weight.
    SweepBeta(SweepArgs),
    /// Full model against the single-component ablations.
    Ablate(SweepArgs),
    /// Evaluate with each expert forced on in turn.
    ExpertReport(EvalArgs),
    /// Write the fused token and entity representation per sample as CSV.
    ExportEmbeddings(EvalArgs),
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long, value_enum, default_value = "met")]
    task: TaskArg,
    /// Dataset config file (key = value); flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    samples_per_category: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Met,
    Mre,
}

impl From<TaskArg> for Task {
    fn from(t: TaskArg) -> Self {
        match t {
            TaskArg::Met => Task::Met,
            TaskArg::Mre => Task::Mre,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum OptimizerArg {
    Adam,
    Sgd,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Training config file (key = value); flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Named defaults: desk or large.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    experts: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    task: Option<TaskArg>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    h: Option<usize>,
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    xi: Option<f64>,
    #[arg(long, value_enum)]
    optimizer: Option<OptimizerArg>,
    #[arg(long)]
    no_vmoe: bool,
    #[arg(long)]
    no_mgvat: bool,
}

impl ConfigArgs {
    fn resolve(&self, dataset: &Dataset) -> anyhow::Result<TrainConfig> {
        let mut c = match (&self.config, &self.preset) {
            (Some(path), _) => TrainConfig::load(path)?,
            (None, Some(name)) => TrainConfig::preset(name)?,
            (None, None) => TrainConfig::default(),
        };
        c.task = dataset.config.task;
        macro_rules! set {
            ($($field:ident),*) => { $(if let Some(v) = self.$field { c.$field = v; })* };
        }
        set!(beta, experts, lr, batch_size, epochs, seed, d, h, eps, xi);
        if let Some(t) = self.task {
            c.task = t.into();
        }
        if let Some(o) = self.optimizer {
            c.optimizer = match o {
                OptimizerArg::Adam => OptimizerKind::Adam,
                OptimizerArg::Sgd => OptimizerKind::Sgd,
            };
        }
        c.no_vmoe |= self.no_vmoe;
        c.no_mgvat |= self.no_mgvat;
        c.validate()?;
        Ok(c)
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory written by `generate`.
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum SetArg {
    Seen,
    Validation,
    Unseen,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Category set to score; the split is re-derived from the checkpoint seed.
    #[arg(long, value_enum, default_value = "unseen")]
    set: SetArg,
    /// Output file; metrics go to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Comma-separated values to sweep (expert counts or loss weights).
    #[arg(long, value_delimiter = ',')]
    values: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    seeds: Vec<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn metrics_csv(r: &MetricsReport) -> String {
    let mut out = String::from("category,precision,recall,f1,support\n");
    out.push_str(&format!("macro,{},{},{},{}\n", r.precision, r.recall, r.f1, r.per_category.iter().map(|c| c.support).sum::<usize>()));
    for c in &r.per_category {
        out.push_str(&format!("{},{},{},{},{}\n", c.category, c.precision, c.recall, c.f1, c.support));
    }
    out.push_str(&format!("accuracy,,,{},\n", r.accuracy));
    out
}

fn emit(out: Option<&Path>, text: &str) -> anyhow::Result<()> {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{text}"),
    }
    Ok(())
}

fn split_for(dataset: &Dataset, seed: u64) -> anyhow::Result<DatasetSplit> {
    let ids: Vec<usize> = dataset.categories.iter().map(|c| c.id).collect();
    Ok(split_zero_shot(&ids, &dataset.samples, dataset.config.split, seed)?)
}

fn pick(split: &DatasetSplit, set: SetArg) -> (&[mgvmoe::data::Sample], &[usize]) {
    match set {
        SetArg::Seen => (&split.train, &split.seen),
        SetArg::Validation => (&split.val, &split.validation),
        SetArg::Unseen => (&split.test, &split.unseen),
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Generate(a) => {
            let mut cfg = match &a.config {
                Some(p) => DatasetConfig::load(p)?,
                None => DatasetConfig::for_task(a.task.into()),
            };
            if let Some(s) = a.seed {
                cfg.seed = s;
            }
            if let Some(n) = a.samples_per_category {
                cfg.samples_per_category = n;
            }
            if let Some(n) = a.noise {
                cfg.noise = n;
            }
            let ds = generate_dataset(&cfg)?;
            ds.save(&a.out)?;
            println!("wrote {} samples over {} categories to {}", ds.samples.len(), ds.categories.len(), a.out.display());
        }
        Command::Train(a) => {
            let ds = Dataset::load(&a.data)?;
            let cfg = a.cfg.resolve(&ds)?;
            let split = split_for(&ds, cfg.seed)?;
            fs::create_dir_all(&a.out)?;
            let outcome = train(&cfg, &ds, &split)?;
            outcome.best.save(&a.out.join("best.ckpt"))?;
            outcome.last.save(&a.out.join("last.ckpt"))?;
            let mut log = String::new();
            for e in &outcome.log {
                log.push_str(&serde_json::to_string(e)?);
                log.push('\n');
            }
            fs::write(a.out.join("log.jsonl"), log)?;
            let split_record = serde_json::json!({
                "seed": cfg.seed,
                "seen": split.seen,
                "validation": split.validation,
                "unseen": split.unseen,
            });
            fs::write(a.out.join("split.json"), format!("{split_record}\n"))?;
            cfg.save(&a.out.join("train.toml"))?;
            let test = evaluate(&outcome.best.model, &ds, &split.test, &split.unseen)?;
            fs::write(a.out.join("metrics.csv"), metrics_csv(&test.report))?;
            println!(
                "best epoch {}: unseen f1 {:.4} accuracy {:.4}",
                outcome.best.epoch, test.report.f1, test.report.accuracy
            );
        }
        Command::Evaluate(a) => {
            let ds = Dataset::load(&a.data)?;
            let ck = Checkpoint::load(&a.checkpoint)?;
            let split = split_for(&ds, ck.model.config.seed)?;
            let (samples, cats) = pick(&split, a.set);
            let ev = evaluate(&ck.model, &ds, samples, cats)?;
            emit(a.out.as_deref(), &metrics_csv(&ev.report))?;
        }
        Command::ExpertReport(a) => {
            let ds = Dataset::load(&a.data)?;
            let ck = Checkpoint::load(&a.checkpoint)?;
            let split = split_for(&ds, ck.model.config.seed)?;
            let (samples, cats) = pick(&split, a.set);
            let rows = expert_report(&ck.model, &ds, samples, cats)?;
            emit(a.out.as_deref(), &expert_rows_to_csv(&rows))?;
        }
        Command::ExportEmbeddings(a) => {
            let ds = Dataset::load(&a.data)?;
            let ck = Checkpoint::load(&a.checkpoint)?;
            let split = split_for(&ds, ck.model.config.seed)?;
            let (samples, _) = pick(&split, a.set);
            let Some(out) = a.out else { bail!("--out is required") };
            export_embeddings(&ck.model, &ds, samples, &out)?;
        }
        Command::SweepExperts(a) => {
            let ds = Dataset::load(&a.data)?;
            let cfg = a.cfg.resolve(&ds)?;
            let ks = if a.values.is_empty() {
                vec![1, 2, 4, 8]
            } else {
                a.values.iter().map(|v| v.parse::<usize>().with_context(|| format!("bad expert count `{v}`"))).collect::<anyhow::Result<_>>()?
            };
            let rows = sweep_experts(&cfg, &ds, &ks, &a.seeds)?;
            emit(a.out.as_deref(), &rows_to_csv(&rows))?;
        }
        Command::SweepBeta(a) => {
            let ds = Dataset::load(&a.data)?;
            let cfg = a.cfg.resolve(&ds)?;
            let betas = if a.values.is_empty() {
                vec![0.0, 0.1, 1.0, 10.0]
            } else {
                a.values.iter().map(|v| v.parse::<f64>().with_context(|| format!("bad beta `{v}`"))).collect::<anyhow::Result<_>>()?
            };
            let rows = sweep_beta(&cfg, &ds, &betas, &a.seeds)?;
            emit(a.out.as_deref(), &rows_to_csv(&rows))?;
        }
        Command::Ablate(a) => {
            let ds = Dataset::load(&a.data)?;
            let cfg = a.cfg.resolve(&ds)?;
            if !a.values.is_empty() {
                bail!("ablate takes no --values");
            }
            let rows = ablate(&cfg, &ds, &a.seeds)?;
            emit(a.out.as_deref(), &rows_to_csv(&rows))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            eprintln!("error: {}", first.trim_start_matches("error: "));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
