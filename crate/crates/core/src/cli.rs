//! Command-line front end: `train`, `eval`, `analyze`, `params`,
//! `gradcheck` and `gen-data`.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::adapter::{count_trainable, VariantSpec};
use crate::analysis::{analyze, write_report};
use crate::backbone::{init_backbone, BackboneConfig};
use crate::checkpoint::{load_checkpoint, save_checkpoint, save_dataset_cache};
use crate::data::{
    generate_keyword_sentiment, generate_reflexive_agreement, load_tsv, write_tsv, Column, Dataset, TaskSpec,
    TsvSchema, Vocab,
};
use crate::error::{Error, Result};
use crate::l0::L0Config;
use crate::training::{evaluate, run_seeds, seeded_gradcheck_problem, adapter_gradient_check, worker_threads, Hyperparams};

/// Largest relative error `gradcheck` accepts.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneSection {
    /// `bert-base-shape` or `bert-large-shape`; the fields below are ignored
    /// apart from `seed` and `max_len` when set.
    pub preset: Option<String>,
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub ffn_dim: usize,
    pub num_heads: usize,
    pub max_len: Option<usize>,
    pub seed: u64,
    pub init_std: Option<f64>,
}

impl Default for BackboneSection {
    fn default() -> Self {
        Self {
            preset: None,
            num_layers: 4,
            hidden_dim: 32,
            ffn_dim: 64,
            num_heads: 2,
            max_len: None,
            seed: 0,
            init_std: None,
        }
    }
}

impl BackboneSection {
    pub fn resolve(&self, vocab_size: usize, num_classes: usize) -> Result<BackboneConfig> {
        let mut cfg = match &self.preset {
            Some(name) => BackboneConfig::preset(name)?,
            None => BackboneConfig::tiny(self.num_layers, self.hidden_dim, self.ffn_dim, self.num_heads, vocab_size),
        };
        if let Some(m) = self.max_len {
            cfg.max_len = m;
        }
        if let Some(s) = self.init_std {
            cfg.init_std = s;
        }
        cfg.num_classes = num_classes;
        cfg.seed = self.seed;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VariantSection {
    pub name: String,
    /// Turns on L0 gating of the weight head with these settings.
    pub l0: Option<L0Config>,
}

impl Default for VariantSection {
    fn default() -> Self {
        Self {
            name: "adapterbias".into(),
            l0: None,
        }
    }
}

impl VariantSection {
    pub fn resolve(&self) -> Result<VariantSpec> {
        let mut v = VariantSpec::from_name(&self.name)?;
        if let Some(l0) = self.l0 {
            v.l0 = Some(l0);
        }
        v.validate()?;
        Ok(v)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    KeywordSentiment,
    ReflexiveAgreement,
    Tsv,
}

fn default_schema() -> TsvSchema {
    TsvSchema::single(Column::Index(0), Column::Index(1), true)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSection {
    pub kind: TaskKind,
    pub synthetic: TaskSpec,
    pub train_tsv: Option<PathBuf>,
    pub dev_tsv: Option<PathBuf>,
    pub schema: TsvSchema,
}

impl Default for TaskSection {
    fn default() -> Self {
        Self {
            kind: TaskKind::KeywordSentiment,
            synthetic: TaskSpec::default(),
            train_tsv: None,
            dev_tsv: None,
            schema: default_schema(),
        }
    }
}

impl TaskSection {
    /// Train and dev splits; TSV dev labels reuse the train label names.
    pub fn load(&self) -> Result<(Dataset, Dataset)> {
        match self.kind {
            TaskKind::KeywordSentiment => generate_keyword_sentiment(&self.synthetic),
            TaskKind::ReflexiveAgreement => generate_reflexive_agreement(&self.synthetic),
            TaskKind::Tsv => {
                let need = |p: &Option<PathBuf>, what: &str| {
                    p.clone()
                        .ok_or_else(|| Error::Config(format!("task.kind = \"tsv\" needs task.{what}")))
                };
                let train = load_tsv(&need(&self.train_tsv, "train_tsv")?, &self.schema, None)?.dataset;
                let dev = load_tsv(&need(&self.dev_tsv, "dev_tsv")?, &self.schema, Some(&train.label_names))?.dataset;
                Ok((train, dev))
            }
        }
    }
}

/// Everything needed to reproduce a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    pub seeds: Vec<u64>,
    pub backbone: BackboneSection,
    pub variant: VariantSection,
    pub task: TaskSection,
    pub hyper: Hyperparams,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("runs/default"),
            seeds: vec![0],
            backbone: BackboneSection::default(),
            variant: VariantSection::default(),
            task: TaskSection::default(),
            hyper: Hyperparams::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {}", path.display(), e.message())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        self.hyper.validate()?;
        self.variant.resolve()?;
        Ok(())
    }
}

#[derive(Parser, Debug)]
#[command(name = "adapterbias-lab", version, about = "Token-dependent representation shifts on a frozen encoder")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train an adapter and write summary.json, adapter.ckpt and a config echo.
    Train(TrainArgs),
    /// Evaluate a trained run on its dev split or a TSV file.
    Eval(EvalArgs),
    /// Write α statistics, token weights and shift PCA tables for a run.
    Analyze(AnalyzeArgs),
    /// Print the per-task trainable parameter count of a variant.
    Params(ParamsArgs),
    /// Finite-difference check of adapter gradients on a seeded micro-batch.
    Gradcheck(GradcheckArgs),
    /// Write a synthetic task to train.tsv / dev.tsv.
    GenData(GenDataArgs),
}

#[derive(Args, Debug, Default)]
pub struct Overrides {
    /// TOML run configuration; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    /// adapterbias, no-l-alpha, share-v, share-l-alpha, share-both, adapterbias-l0, bitfit, full
    #[arg(long)]
    pub variant: Option<String>,
    /// Comma-separated seeds, e.g. 0,1,2.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// L0 penalty weight; enables gating for AdapterBias variants.
    #[arg(long)]
    pub l0_lambda: Option<f64>,
    #[arg(long, value_enum)]
    pub task: Option<TaskKind>,
    #[arg(long)]
    pub train_tsv: Option<PathBuf>,
    #[arg(long)]
    pub dev_tsv: Option<PathBuf>,
    /// Seed of the synthetic task generator.
    #[arg(long)]
    pub task_seed: Option<u64>,
    /// Seed of the frozen backbone.
    #[arg(long)]
    pub backbone_seed: Option<u64>,
    #[arg(long)]
    pub preset: Option<String>,
}

impl Overrides {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::from_toml_file(p)?,
            None => RunConfig::default(),
        };
        if let Some(v) = &self.output_dir {
            cfg.output_dir = v.clone();
        }
        if let Some(v) = &self.variant {
            cfg.variant.name = v.clone();
        }
        if let Some(v) = &self.seeds {
            cfg.seeds = v.clone();
        }
        if let Some(v) = self.epochs {
            cfg.hyper.epochs = v;
        }
        if let Some(v) = self.learning_rate {
            cfg.hyper.learning_rate = v;
        }
        if let Some(v) = self.batch_size {
            cfg.hyper.batch_size = v;
        }
        if let Some(v) = self.weight_decay {
            cfg.hyper.weight_decay = v;
        }
        if let Some(v) = self.l0_lambda {
            let base = cfg.variant.l0.unwrap_or_default();
            cfg.variant.l0 = Some(L0Config { lambda: v, ..base });
        }
        if let Some(v) = self.task {
            cfg.task.kind = v;
        }
        if let Some(v) = &self.train_tsv {
            cfg.task.train_tsv = Some(v.clone());
        }
        if let Some(v) = &self.dev_tsv {
            cfg.task.dev_tsv = Some(v.clone());
        }
        if let Some(v) = self.task_seed {
            cfg.task.synthetic.seed = v;
        }
        if let Some(v) = self.backbone_seed {
            cfg.backbone.seed = v;
        }
        if let Some(v) = &self.preset {
            cfg.backbone.preset = Some(v.clone());
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Directory written by `train`.
    #[arg(long)]
    pub run_dir: PathBuf,
    /// TSV to evaluate instead of the run's dev split (run's schema).
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub run_dir: PathBuf,
    /// Output directory; defaults to <run-dir>/analysis.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Sentences used for the shift PCA.
    #[arg(long, default_value_t = 50)]
    pub max_sentences: usize,
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ParamsArgs {
    /// bert-base-shape or bert-large-shape.
    #[arg(long, default_value = "bert-base-shape")]
    pub preset: String,
    #[arg(long, default_value = "adapterbias")]
    pub variant: String,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = crate::training::GRADCHECK_EPS)]
    pub eps: f64,
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub task: Option<TaskKind>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write train.cache / dev.cache in the container format.
    #[arg(long)]
    pub cache: bool,
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn out_line(out: &mut dyn Write, line: &str) -> Result<()> {
    writeln!(out, "{line}").map_err(|e| Error::io(Path::new("<stdout>"), e))
}

fn vocab_for(train: &Dataset, dev: &Dataset) -> Vocab {
    Vocab::build(train.texts().chain(dev.texts()))
}

pub fn cmd_train(args: &TrainArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = args.overrides.resolve()?;
    let (train, dev) = cfg.task.load()?;
    let vocab = vocab_for(&train, &dev);
    let backbone = cfg.backbone.resolve(vocab.len(), train.num_classes().max(dev.num_classes()))?;
    let variant = cfg.variant.resolve()?;
    let model = init_backbone(&backbone)?;
    let dir = &cfg.output_dir;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_file(&dir.join("config.toml"), cfg.to_toml()?.as_bytes())?;
    write_file(&dir.join("vocab.txt"), vocab.to_lines().as_bytes())?;

    let threads = worker_threads().min(cfg.seeds.len());
    let (report, adapters) = run_seeds(&model, &variant, &vocab, &train, &dev, &cfg.hyper, &cfg.seeds, threads)?;
    let best = report.runs.iter().position(|r| r.seed == report.best_seed).expect("best seed present");
    write_file(
        &dir.join("summary.json"),
        &serde_json::to_vec_pretty(&report.runs[best].summary)?,
    )?;
    save_checkpoint(&model, &adapters[best], &dir.join("adapter.ckpt"))?;
    if report.runs.len() > 1 {
        write_file(&dir.join("seeds.json"), &serde_json::to_vec_pretty(&report)?)?;
        for (run, adapter) in report.runs.iter().zip(&adapters) {
            save_checkpoint(&model, adapter, &dir.join(format!("adapter-seed{}.ckpt", run.seed)))?;
        }
    }
    out_line(
        out,
        &format!(
            "best_seed={} best_dev_accuracy={:.4} mean_dev_accuracy={:.4} trainable_parameters={} output_dir={}",
            report.best_seed,
            report.best_dev_accuracy,
            report.mean_dev_accuracy,
            report.runs[best].summary.trainable_parameters,
            dir.display()
        ),
    )
}

struct LoadedRun {
    cfg: RunConfig,
    vocab: Vocab,
    model: crate::backbone::BackboneModel,
    adapter: crate::adapter::AdapterState,
}

fn load_run(run_dir: &Path) -> Result<LoadedRun> {
    let cfg = RunConfig::from_toml_file(&run_dir.join("config.toml"))?;
    let vocab_path = run_dir.join("vocab.txt");
    let text = std::fs::read_to_string(&vocab_path).map_err(|e| Error::io(&vocab_path, e))?;
    let vocab = Vocab::from_lines(&text)?;
    let (model, adapter) = load_checkpoint(&run_dir.join("adapter.ckpt"))?;
    Ok(LoadedRun {
        cfg,
        vocab,
        model,
        adapter,
    })
}

fn eval_set(run: &LoadedRun, data: &Option<PathBuf>) -> Result<Dataset> {
    match data {
        Some(p) => {
            let (train, _) = run.cfg.task.load()?;
            Ok(load_tsv(p, &run.cfg.task.schema, Some(&train.label_names))?.dataset)
        }
        None => Ok(run.cfg.task.load()?.1),
    }
}

pub fn cmd_eval(args: &EvalArgs, out: &mut dyn Write) -> Result<()> {
    let run = load_run(&args.run_dir)?;
    let data = eval_set(&run, &args.data)?;
    let h = &run.cfg.hyper;
    let m = evaluate(&run.model, &run.adapter, &run.vocab, &data, h.batch_size, h.max_len)?;
    out_line(out, &serde_json::to_string(&m)?)
}

pub fn cmd_analyze(args: &AnalyzeArgs, out: &mut dyn Write) -> Result<()> {
    let run = load_run(&args.run_dir)?;
    let data = eval_set(&run, &args.data)?;
    let h = &run.cfg.hyper;
    let report = analyze(&run.model, &run.adapter, &run.vocab, &data, args.max_sentences, h.batch_size, h.max_len)?;
    let dir = args.out.clone().unwrap_or_else(|| args.run_dir.join("analysis"));
    write_report(&report, &dir)?;
    out_line(out, &format!("wrote {}", dir.display()))
}

pub fn cmd_params(args: &ParamsArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = BackboneConfig::preset(&args.preset)?;
    let n = count_trainable(&cfg, &VariantSpec::from_name(&args.variant)?)?;
    out_line(out, &n.to_string())
}

pub fn cmd_gradcheck(args: &GradcheckArgs, out: &mut dyn Write) -> Result<()> {
    let (model, adapter, batch) = seeded_gradcheck_problem(args.seed)?;
    let err = adapter_gradient_check(&model, &adapter, &batch, args.eps)?;
    out_line(out, &format!("{err:e}"))?;
    if err < GRADCHECK_TOLERANCE {
        Ok(())
    } else {
        Err(Error::NonFinite(format!(
            "max relative gradient error {err:e} exceeds {GRADCHECK_TOLERANCE:e}"
        )))
    }
}

pub fn cmd_gen_data(args: &GenDataArgs, out: &mut dyn Write) -> Result<()> {
    let mut task = match &args.config {
        Some(p) => RunConfig::from_toml_file(p)?.task,
        None => TaskSection::default(),
    };
    if let Some(k) = args.task {
        task.kind = k;
    }
    if let Some(s) = args.seed {
        task.synthetic.seed = s;
    }
    if task.kind == TaskKind::Tsv {
        return Err(Error::Config("gen-data needs a synthetic task".into()));
    }
    let (train, dev) = task.load()?;
    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    write_tsv(&train, &args.out.join("train.tsv"))?;
    write_tsv(&dev, &args.out.join("dev.tsv"))?;
    if args.cache {
        save_dataset_cache(&train, &args.out.join("train.cache"))?;
        save_dataset_cache(&dev, &args.out.join("dev.cache"))?;
    }
    out_line(
        out,
        &format!("train={} dev={} dir={}", train.len(), dev.len(), args.out.display()),
    )
}

pub fn run(cli: &Cli, out: &mut dyn Write) -> Result<()> {
    match &cli.command {
        Command::Train(a) => cmd_train(a, out),
        Command::Eval(a) => cmd_eval(a, out),
        Command::Analyze(a) => cmd_analyze(a, out),
        Command::Params(a) => cmd_params(a, out),
        Command::Gradcheck(a) => cmd_gradcheck(a, out),
        Command::GenData(a) => cmd_gen_data(a, out),
    }
}

/// One-line JSON error record.
pub fn error_line(kind: &str, message: &str) -> String {
    serde_json::json!({ "error": kind, "message": message.replace('\n', " ") }).to_string()
}

/// Parses `argv`, runs the command and returns the process exit code.
/// Failures print one JSON line to `err`.
pub fn dispatch<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = write!(out, "{}", e.render());
                return 0;
            }
            let msg = e.kind().as_str().map_or_else(|| e.to_string(), |k| {
                let detail = e.to_string();
                let first = detail.lines().next().unwrap_or(k).trim_start_matches("error: ").to_string();
                first
            });
            let _ = writeln!(err, "{}", error_line("usage", &msg));
            return 2;
        }
    };
    match run(&cli, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "{}", error_line(e.kind(), &e.to_string()));
            1
        }
    }
}
