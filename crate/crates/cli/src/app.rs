//! Argument parsing and subcommand dispatch.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime error.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use promptseg::corpus::{generate_prompt_corpus, read_corpus, write_corpus, PromptCorpusConfig, Split};
use promptseg::experiment::CanonicalConfig;
use promptseg::fusion::{load_checkpoint, save_checkpoint};
use promptseg::grid::{Dims, LabelMap, DEFAULT_CLASSES};
use promptseg::io::{load_labels, load_logits, load_volume, save_labels, save_logits, save_volume};
use promptseg::kv::KeyValues;
use promptseg::metrics::evaluate_labelmaps;
use promptseg::phantom::{
    canonical_phantom_spec, generate_phantom, normalize_intensity, oracle_logits, IntensityClassifier, LogitOracleConfig, PhantomSpec,
};
use promptseg::pipeline::{evaluate_run, infer, write_run_report, InferenceConfig, TrainRunConfig, TrainingVolume, VisualInput, VisualSource};
use promptseg::prompt::{parse_prompt, Lexicon};
use promptseg::refine::{finetune_refinement, load_refine_checkpoint, save_refine_checkpoint, RefineTrainConfig};

use crate::dataset::{case_name, case_paths, case_seed, list_cases, IMAGES, LABELS, LOGITS, MODELS, SPECS};
use crate::summary::{ParseSummary, SegmentSummary};

pub const DEFAULT_PORT: u16 = 8080;

#[derive(Debug, Parser)]
#[command(name = "promptseg", version, about = "Text-conditioned logit fusion for volumetric segmentation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic phantoms, labels, classifiers and oracle logits.
    GenData(GenDataArgs),
    /// Generate a prompt corpus aligned to a data directory's label maps.
    GenPrompts(GenPromptsArgs),
    /// Train the fusion head against frozen oracle logits.
    TrainFusion(TrainFusionArgs),
    /// Fine-tune the residual refinement head on stored logits.
    FinetuneRh(FinetuneArgs),
    /// Segment one volume with a prompt.
    Infer(InferArgs),
    /// Compare predicted and ground-truth label maps (files or directories).
    Eval(EvalArgs),
    /// Show how a prompt is parsed.
    ParsePrompt(ParsePromptArgs),
    /// Serve the HTTP API.
    Serve(ServeArgs),
}

/// Oracle settings; defaults are the canonical experiment's.
#[derive(Debug, Clone, Args)]
pub struct OracleArgs {
    #[arg(long, default_value_t = CanonicalConfig::default().oracle.scale)]
    pub oracle_scale: f64,
    #[arg(long, default_value_t = CanonicalConfig::default().oracle.noise_sigma)]
    pub noise: f64,
    #[arg(long, default_value_t = CanonicalConfig::default().oracle.suppression_margin)]
    pub margin: f64,
}

impl OracleArgs {
    fn config(&self, seed: u64) -> LogitOracleConfig {
        LogitOracleConfig {
            classes: DEFAULT_CLASSES,
            scale: self.oracle_scale,
            noise_sigma: self.noise,
            suppression_margin: self.margin,
            seed,
            ..Default::default()
        }
    }
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Number of canonical phantoms; ignored with --spec.
    #[arg(long, default_value_t = 12)]
    pub count: usize,
    #[arg(long, default_value_t = CanonicalConfig::default().data_seed)]
    pub seed: u64,
    /// A single phantom spec file instead of the canonical layout.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Organ ids hidden in the stored oracle logits, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub suppress: Vec<u8>,
    #[arg(long)]
    pub no_logits: bool,
    #[command(flatten)]
    pub oracle: OracleArgs,
}

#[derive(Debug, Args)]
pub struct GenPromptsArgs {
    /// Data directory whose labels/ the prompts are drawn from.
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for train.tsv and val.tsv.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 650)]
    pub n_train: usize,
    #[arg(long, default_value_t = 130)]
    pub n_val: usize,
    #[arg(long, default_value_t = 0.2)]
    pub relation_prob: f64,
    #[arg(long, default_value_t = 0.3)]
    pub synonym_prob: f64,
    #[arg(long, default_value_t = 1)]
    pub organs_min: usize,
    #[arg(long, default_value_t = 3)]
    pub organs_max: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct TrainFusionArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Corpus file (tab-separated prompt, presence bits, relations).
    #[arg(long)]
    pub prompts: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Training log; defaults to `<out>.log.tsv`.
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// key=value run configuration; flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Cubic patch edge in voxels.
    #[arg(long)]
    pub patch: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub no_augment: bool,
    #[command(flatten)]
    pub oracle: OracleArgs,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    /// Data directory with logits/ and labels/.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub cycles: Option<usize>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub patch: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
#[command(group = clap::ArgGroup::new("visual").required(true).args(["logits", "volume"]))]
pub struct InferArgs {
    /// Frozen visual logits.
    #[arg(long)]
    pub logits: Option<PathBuf>,
    /// Raw HU volume; needs --classifier.
    #[arg(long, requires = "classifier")]
    pub volume: Option<PathBuf>,
    #[arg(long)]
    pub classifier: Option<PathBuf>,
    #[arg(long)]
    pub prompt: String,
    #[arg(long)]
    pub fusion: PathBuf,
    #[arg(long)]
    pub refine: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Map foreground classes the prompt does not mention to background.
    #[arg(long)]
    pub restrict: bool,
    #[arg(long)]
    pub lexicon: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ReportFormat {
    Table,
    Kv,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long, default_value_t = DEFAULT_CLASSES)]
    pub classes: usize,
    #[arg(long, value_enum, default_value_t = ReportFormat::Table)]
    pub format: ReportFormat,
    /// Directory for per-volume and aggregate report files.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub lexicon: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ParsePromptArgs {
    #[arg(long)]
    pub prompt: String,
    #[arg(long)]
    pub lexicon: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub fusion: PathBuf,
    #[arg(long)]
    pub refine: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_PORT)]
    pub port: u16,
    #[arg(long)]
    pub lexicon: Option<PathBuf>,
}

/// `PORT` wins over the flag when it parses.
pub fn resolve_port(flag: u16, env: Option<&str>) -> u16 {
    env.and_then(|v| v.trim().parse().ok()).unwrap_or(flag)
}

/// Parses `args` (program name first) and runs the subcommand.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            2
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData(a) => gen_data(&a),
        Command::GenPrompts(a) => gen_prompts(&a),
        Command::TrainFusion(a) => train(&a),
        Command::FinetuneRh(a) => finetune(&a),
        Command::Infer(a) => infer_cmd(&a),
        Command::Eval(a) => eval(&a),
        Command::ParsePrompt(a) => {
            let lex = load_lexicon(a.lexicon.as_deref())?;
            print_json(&ParseSummary::new(&parse_prompt(&a.prompt, &lex), &lex))
        }
        Command::Serve(a) => serve(&a),
    }
}

pub fn load_lexicon(path: Option<&Path>) -> Result<Lexicon> {
    match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Ok(Lexicon::parse(&text)?)
        }
        None => Ok(Lexicon::default()),
    }
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn create_dirs(root: &Path, subs: &[&str]) -> Result<()> {
    for s in subs {
        let d = root.join(s);
        std::fs::create_dir_all(&d).with_context(|| format!("creating {}", d.display()))?;
    }
    Ok(())
}

fn gen_data(a: &GenDataArgs) -> Result<()> {
    let specs: Vec<PhantomSpec> = match &a.spec {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            vec![PhantomSpec::parse(&text)?]
        }
        None => (0..a.count).map(|i| canonical_phantom_spec(i, a.seed)).collect(),
    };
    if specs.is_empty() {
        bail!("nothing to generate: --count is 0");
    }
    create_dirs(&a.out, &[IMAGES, LABELS, SPECS, MODELS])?;
    if !a.no_logits {
        create_dirs(&a.out, &[LOGITS])?;
    }
    for (i, spec) in specs.iter().enumerate() {
        let paths = case_paths(&a.out, &case_name(i));
        let (volume, labels) = generate_phantom(spec)?;
        save_volume(&volume, &paths.image)?;
        save_labels(&labels, &paths.labels)?;
        std::fs::write(&paths.spec, spec.to_text())?;
        let classifier = IntensityClassifier::from_spec(spec, DEFAULT_CLASSES)?;
        std::fs::write(&paths.model, classifier.to_kv().to_text())?;
        if !a.no_logits {
            let mut oracle = a.oracle.config(case_seed(a.seed, i));
            oracle.suppressed = a.suppress.clone();
            save_logits(&oracle_logits(&labels, &oracle)?, &paths.logits)?;
        }
    }
    eprintln!("wrote {} cases to {}", specs.len(), a.out.display());
    Ok(())
}

fn load_label_dir(root: &Path) -> Result<Vec<LabelMap>> {
    list_cases(root, LABELS)?
        .iter()
        .map(|n| Ok(load_labels(case_paths(root, n).labels)?))
        .collect()
}

fn gen_prompts(a: &GenPromptsArgs) -> Result<()> {
    let labels = load_label_dir(&a.data)?;
    let cfg = PromptCorpusConfig {
        n_train: a.n_train,
        n_val: a.n_val,
        organs_min: a.organs_min,
        organs_max: a.organs_max,
        relation_probability: a.relation_prob,
        synonym_probability: a.synonym_prob,
        seed: a.seed,
    };
    let corpus = generate_prompt_corpus(&labels, &Lexicon::default(), &cfg)?;
    std::fs::create_dir_all(&a.out)?;
    for (split, file) in [(Split::Train, "train.tsv"), (Split::Val, "val.tsv")] {
        let entries: Vec<_> = corpus.iter().filter(|e| e.split == split).map(|e| e.parsed.clone()).collect();
        write_corpus(&entries, a.out.join(file))?;
    }
    eprintln!("wrote {} prompts to {}", corpus.len(), a.out.display());
    Ok(())
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn train_config(a: &TrainFusionArgs) -> Result<TrainRunConfig> {
    let mut cfg = match &a.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            TrainRunConfig::from_kv(&KeyValues::parse(&text)?)?
        }
        None => CanonicalConfig::default().train,
    };
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.iterations {
        cfg.iterations_per_epoch = v;
    }
    if let Some(v) = a.lr {
        cfg.lr = v;
    }
    if let Some(v) = a.weight_decay {
        cfg.weight_decay = v;
    }
    if let Some(v) = a.patch {
        cfg.patch = Dims::cube(v);
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if a.no_augment {
        cfg.augment = None;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train(a: &TrainFusionArgs) -> Result<()> {
    let cfg = train_config(a)?;
    let data: Vec<TrainingVolume> = list_cases(&a.data, LABELS)?
        .iter()
        .map(|n| {
            let p = case_paths(&a.data, n);
            Ok(TrainingVolume {
                volume: normalize_intensity(&load_volume(&p.image)?),
                labels: load_labels(&p.labels)?,
            })
        })
        .collect::<Result<_>>()?;
    let corpus = read_corpus(&a.prompts)?;
    let source = VisualSource::Oracle(a.oracle.config(cfg.seed));
    let (ckpt, log) = promptseg::pipeline::train_fusion(&data, &source, &corpus, DEFAULT_CLASSES, &cfg)?;
    save_checkpoint(&ckpt, &a.out)?;
    let log_path = a.log.clone().unwrap_or_else(|| with_suffix(&a.out, ".log.tsv"));
    std::fs::write(&log_path, log.to_tsv())?;
    let mut kv = cfg.to_kv();
    kv.push("oracle_scale", a.oracle.oracle_scale)
        .push("oracle_noise", a.oracle.noise)
        .push("oracle_margin", a.oracle.margin);
    std::fs::write(with_suffix(&a.out, ".config"), kv.to_text())?;
    let last = log.epochs();
    let mean = |e| log.epoch_mean(e, |_| true, |x| x.loss.total).unwrap_or(f64::NAN);
    eprintln!(
        "trained {} epochs: total loss {:.4} -> {:.4}; alpha {:.4} beta {:.4}",
        last,
        mean(1),
        mean(last),
        ckpt.params.alpha,
        ckpt.params.beta
    );
    Ok(())
}

fn finetune(a: &FinetuneArgs) -> Result<()> {
    let mut cfg = RefineTrainConfig {
        seed: a.seed,
        ..Default::default()
    };
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.cycles {
        cfg.cycles = v;
    }
    if let Some(v) = a.iterations {
        cfg.iterations_per_epoch = v;
    }
    if let Some(v) = a.lr {
        cfg.lr = v;
    }
    if let Some(v) = a.patch {
        cfg.patch = Dims::cube(v);
    }
    let pairs = list_cases(&a.data, LOGITS)?
        .iter()
        .map(|n| {
            let p = case_paths(&a.data, n);
            Ok((load_logits(&p.logits)?, load_labels(&p.labels)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let (ckpt, log) = finetune_refinement(&pairs, &cfg)?;
    save_refine_checkpoint(&ckpt, &a.out)?;
    let mut tsv = String::from("epoch\titeration\tlr\tdice\tfocal\n");
    for e in &log {
        tsv.push_str(&format!("{}\t{}\t{:e}\t{:e}\t{:e}\n", e.epoch, e.iteration, e.lr, e.dice, e.focal));
    }
    let log_path = a.log.clone().unwrap_or_else(|| with_suffix(&a.out, ".log.tsv"));
    std::fs::write(&log_path, tsv)?;
    eprintln!("fine-tuned refinement head over {} volumes", pairs.len());
    Ok(())
}

fn infer_cmd(a: &InferArgs) -> Result<()> {
    let lex = load_lexicon(a.lexicon.as_deref())?;
    let fusion = load_checkpoint(&a.fusion, None, None)?;
    let classes = fusion.params.classes;
    let refine = a.refine.as_ref().map(|p| load_refine_checkpoint(p, Some(classes))).transpose()?;
    let cfg = InferenceConfig {
        restrict_to_prompt: a.restrict,
        ..Default::default()
    };
    let refine_params = refine.as_ref().map(|r| &r.params);
    let result = match (&a.logits, &a.volume, &a.classifier) {
        (Some(l), _, _) => {
            let logits = load_logits(l)?;
            infer(VisualInput::Logits(&logits), &a.prompt, &lex, &fusion.params, refine_params, &cfg)?
        }
        (None, Some(v), Some(c)) => {
            let volume = load_volume(v)?;
            let text = std::fs::read_to_string(c).with_context(|| format!("reading {}", c.display()))?;
            let classifier = IntensityClassifier::parse(&text)?;
            infer(
                VisualInput::Volume {
                    volume: &volume,
                    classifier: &classifier,
                },
                &a.prompt,
                &lex,
                &fusion.params,
                refine_params,
                &cfg,
            )?
        }
        _ => bail!("either --logits or --volume with --classifier is required"),
    };
    if a.restrict && result.fallback_visual_only {
        bail!("prompt names no organ; nothing to restrict to");
    }
    save_labels(&result.mask, &a.out)?;
    print_json(&SegmentSummary::new(&result, classes, None))
}

fn eval(a: &EvalArgs) -> Result<()> {
    let lex = load_lexicon(a.lexicon.as_deref())?;
    let name = |id: u8| lex.name(id).to_string();
    let emit = |r: &promptseg::metrics::MetricsReport| match a.format {
        ReportFormat::Table => r.to_table(name),
        ReportFormat::Kv => r.to_kv().to_text(),
    };
    let mut out = std::io::stdout().lock();
    if a.pred.is_dir() && a.gt.is_dir() {
        let report = evaluate_run(&a.pred, &a.gt, a.classes)?;
        for (vol, r) in &report.volumes {
            writeln!(out, "# {vol}\n{}", emit(r))?;
        }
        writeln!(out, "# aggregate\n{}", emit(&report.aggregate))?;
        if let Some(dir) = &a.out {
            write_run_report(&report, dir, name)?;
        }
    } else if a.pred.is_file() && a.gt.is_file() {
        let report = evaluate_labelmaps(&load_labels(&a.pred)?, &load_labels(&a.gt)?, a.classes)?;
        write!(out, "{}", emit(&report))?;
        if let Some(dir) = &a.out {
            std::fs::create_dir_all(dir)?;
            std::fs::write(dir.join("report.metrics"), report.to_kv().to_text())?;
            std::fs::write(dir.join("report.txt"), report.to_table(name))?;
        }
    } else {
        bail!("--pred and --gt must both be files or both be directories");
    }
    Ok(())
}

fn serve(a: &ServeArgs) -> Result<()> {
    let state = crate::service::ServiceState::load(&a.data, &a.fusion, a.refine.as_deref(), a.lexicon.as_deref())?;
    let port = resolve_port(a.port, std::env::var("PORT").ok().as_deref());
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(("0.0.0.0", port))
            .await
            .with_context(|| format!("binding port {port}"))?;
        eprintln!("listening on {}", listener.local_addr()?);
        axum::serve(listener, crate::service::router(std::sync::Arc::new(state))).await?;
        Ok(())
    })
}
