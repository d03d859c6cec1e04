//! The `patchfold` command-line tool.
//!
//! Every subcommand starts from a [`RunConfig`] (defaults, or `--config`),
//! applies its flags on top, validates the result and writes a `run.json`
//! manifest next to its outputs with the effective configuration, the seed
//! and the exact argument list.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use rand::Rng as _;
use serde::Serialize;
use serde_json::Value;

use crate::compositor::{
    compose_dataset, filter_small_boxes, load_annotations, AeSource, CvaeSource, FixedPatch, PatchMode, PatchSource,
    PcaSource, ScaleAnchor, SetSource, SourcedPatch,
};
use crate::config::RunConfig;
use crate::detector::{CachedDetector, DetectionCache, Detector, FileDetector, HttpDetector};
use crate::eigen::{fit_pca, fit_weight_distribution, sample_pca_patch, EigenBasis, WeightDistribution};
use crate::embedding::{distance_stats, load_activations, perplexity_affinities, tsne_optimize, LabeledVector};
use crate::error::{Error, Result};
use crate::evaluation::{
    attack_eval, evaluate_clean, format_latex, format_report, report_csv, EvalReport, EvalRow, Interpolation,
};
use crate::manifold::{
    reconstruction_report, sample_ae_patch, sample_cvae_patch, train_ae, train_cvae, AeModel, CvaeModel, LatentBox,
    Reconstructor,
};
use crate::patch::{load_patch, load_patch_set, read_manifest, save_patch, ManifestEntry, PatchFormat, PatchSet};
use crate::rng;
use crate::tensor_file::load_records;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;
pub const EXIT_UNREACHABLE: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "patchfold", version, about = "Eigenpatches, autoencoder manifolds and mAP attack evaluation")]
pub struct Cli {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Run seed, copied into every stage.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Maximum number of worker threads.
    #[arg(long, global = true, value_name = "N")]
    pub jobs: Option<usize>,
    /// More log output (repeat for debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit eigenpatches and the weight distribution of a patch set.
    FitPca(FitPcaArgs),
    /// Reconstruct a patch set through a fitted model.
    Reconstruct(ReconstructArgs),
    /// Draw new patches from a fitted model.
    Sample(SampleArgs),
    /// Train the convolutional autoencoder.
    TrainAe(TrainArgs),
    /// Train the conditional variational autoencoder.
    TrainCvae(TrainArgs),
    /// Paste patches into annotated images.
    Compose(ComposeArgs),
    /// Measure detector mAP on patched images.
    EvalAttack(EvalArgs),
    /// Embed patches or activation vectors with t-SNE.
    EmbedTsne(TsneArgs),
    /// Render evaluation reports as a table.
    Report(ReportArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Self::FitPca(_) => "fit-pca",
            Self::Reconstruct(_) => "reconstruct",
            Self::Sample(_) => "sample",
            Self::TrainAe(_) => "train-ae",
            Self::TrainCvae(_) => "train-cvae",
            Self::Compose(_) => "compose",
            Self::EvalAttack(_) => "eval-attack",
            Self::EmbedTsne(_) => "embed-tsne",
            Self::Report(_) => "report",
        }
    }
}

#[derive(Debug, Args)]
pub struct PatchInput {
    /// Directory of patch files.
    #[arg(long, value_name = "DIR")]
    pub patches: Option<PathBuf>,
    /// Manifest listing the patches (default: <patches>/manifest.json).
    #[arg(long, value_name = "FILE")]
    pub manifest: Option<PathBuf>,
}

impl PatchInput {
    fn dir(&self, cfg: &RunConfig) -> Option<PathBuf> {
        self.patches.clone().or_else(|| cfg.paths.patches.clone())
    }

    fn manifest(&self, cfg: &RunConfig) -> Option<PathBuf> {
        self.manifest
            .clone()
            .or_else(|| self.dir(cfg).map(|d| d.join("manifest.json")))
    }

    fn load(&self, cfg: &RunConfig) -> Result<PatchSet> {
        load_patch_set(&self.dir(cfg).unwrap(), &self.manifest(cfg).unwrap())
    }
}

#[derive(Debug, Args)]
pub struct FitPcaArgs {
    #[command(flatten)]
    pub input: PatchInput,
    /// Number of components.
    #[arg(long)]
    pub k: Option<usize>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReconstructArgs {
    /// Model directory written by fit-pca, train-ae or train-cvae.
    #[arg(long, value_name = "DIR")]
    pub model: PathBuf,
    #[command(flatten)]
    pub input: PatchInput,
    /// Use only the first K eigenpatches of a PCA model.
    #[arg(long)]
    pub k: Option<usize>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Pca,
    Ae,
    Cvae,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    /// Model directory written by fit-pca, train-ae or train-cvae.
    #[arg(long, value_name = "DIR")]
    pub model: PathBuf,
    /// Expected model type; checked against the model directory.
    #[arg(long, value_enum)]
    pub method: Option<Method>,
    /// Number of patches.
    #[arg(long, default_value_t = 10)]
    pub count: usize,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub input: PatchInput,
    #[arg(long)]
    pub epochs: Option<u32>,
    #[arg(long)]
    pub batch: Option<usize>,
    /// Initial learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SourceKind {
    File,
    Set,
    Pca,
    Ae,
    Cvae,
}

#[derive(Debug, Args)]
pub struct SourceArgs {
    /// Where pasted patches come from.
    #[arg(long, value_enum, default_value_t = SourceKind::Set)]
    pub patch_source: SourceKind,
    /// Patch file for `--patch-source file`.
    #[arg(long, value_name = "FILE")]
    pub patch: Option<PathBuf>,
    #[command(flatten)]
    pub input: PatchInput,
    /// Model directory for pca, ae and cvae sources.
    #[arg(long, value_name = "DIR")]
    pub model: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DatasetArgs {
    /// JSON annotation file, or a directory with images/ and labels/.
    #[arg(long, value_name = "PATH")]
    pub annotations: Option<PathBuf>,
    /// Directory of <image id>.png files (default: <annotations>/images).
    #[arg(long, value_name = "DIR")]
    pub images: Option<PathBuf>,
    /// Boxes with fewer pixels are dropped before anything else.
    #[arg(long)]
    pub min_box_area: Option<f64>,
}

impl DatasetArgs {
    fn annotations(&self, cfg: &RunConfig) -> Option<PathBuf> {
        self.annotations.clone().or_else(|| cfg.paths.annotations.clone())
    }

    fn images(&self, cfg: &RunConfig) -> Option<PathBuf> {
        self.images.clone().or_else(|| cfg.paths.images.clone()).or_else(|| {
            self.annotations(cfg)
                .filter(|a| a.is_dir())
                .map(|a| a.join("images"))
        })
    }
}

#[derive(Debug, Args)]
pub struct ComposeArgs {
    #[command(flatten)]
    pub dataset: DatasetArgs,
    #[command(flatten)]
    pub source: SourceArgs,
    /// Probability that a box receives a patch.
    #[arg(long)]
    pub pi: Option<f64>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    #[arg(long, value_enum)]
    pub anchor: Option<AnchorArg>,
    #[arg(long)]
    pub resize_min: Option<f64>,
    #[arg(long)]
    pub resize_max: Option<f64>,
    /// Largest rotation in degrees.
    #[arg(long)]
    pub rotation_max: Option<f64>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Single,
    MultiShared,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AnchorArg {
    Width,
    Height,
    Area,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub dataset: DatasetArgs,
    #[command(flatten)]
    pub input: PatchInput,
    /// Draw the patches from this model instead of a patch directory.
    #[arg(long, value_name = "DIR", conflicts_with = "patches")]
    pub model: Option<PathBuf>,
    /// Number of patches drawn from --model.
    #[arg(long, default_value_t = 10)]
    pub count: usize,
    /// Row label in the report (default "Patches", or "None" with
    /// --clean-only).
    #[arg(long)]
    pub mode_name: Option<String>,
    /// Also evaluate the unpatched images as a "None" row.
    #[arg(long)]
    pub include_clean: bool,
    /// Evaluate only the unpatched images.
    #[arg(long, conflicts_with_all = ["patches", "model"])]
    pub clean_only: bool,
    /// Detector endpoint, e.g. http://127.0.0.1:8080.
    #[arg(long, value_name = "URL", conflicts_with = "detections_dir")]
    pub detector_url: Option<String>,
    /// Directory of ingested detection JSON-lines files.
    #[arg(long, value_name = "DIR")]
    pub detections_dir: Option<PathBuf>,
    /// Detection cache directory.
    #[arg(long, value_name = "DIR")]
    pub cache: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub interpolation: Option<InterpArg>,
    /// Add rows to an existing report instead of replacing it.
    #[arg(long)]
    pub append: bool,
    /// Report CSV; the JSON report, text table and per-patch runs are
    /// written next to it.
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum InterpArg {
    #[value(name = "101")]
    P101,
    #[value(name = "11")]
    P11,
}

#[derive(Debug, Args)]
pub struct TsneArgs {
    /// Patch directory (with manifest.json), .ptf file or activation
    /// .jsonl file; repeatable, all inputs are embedded jointly.
    #[arg(long, value_name = "PATH", required = true)]
    pub input: Vec<PathBuf>,
    #[arg(long)]
    pub perplexity: Option<f64>,
    #[arg(long)]
    pub iterations: Option<usize>,
    /// Pair the i-th point of every later input with the i-th point of the
    /// first input and report distance statistics.
    #[arg(long)]
    pub pair_with_first: bool,
    /// Points CSV.
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ReportFormat {
    Text,
    Latex,
    Csv,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Report JSON files; rows are concatenated in order.
    #[arg(long, value_name = "FILE", required = true)]
    pub fixtures: Vec<PathBuf>,
    #[arg(long, value_enum, default_value_t = ReportFormat::Text)]
    pub format: ReportFormat,
    /// Write here instead of standard output.
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

/// Long help of the tool and of every subcommand.
pub fn help_text() -> String {
    let mut cmd = Cli::command();
    let mut out = cmd.render_long_help().to_string();
    let names: Vec<String> = cmd.get_subcommands().map(|s| s.get_name().to_string()).collect();
    for name in names {
        let sub = cmd.find_subcommand_mut(&name).unwrap();
        let mut sub = sub.clone().bin_name(format!("patchfold {name}"));
        writeln!(out, "\n==== patchfold {name} ====").unwrap();
        out.push_str(&sub.render_long_help().to_string());
    }
    out
}

#[derive(Serialize)]
struct RunManifest<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    argv: Vec<String>,
    seed: u64,
    config: &'a RunConfig,
    outputs: Vec<String>,
}

struct Ctx {
    cfg: RunConfig,
    command: &'static str,
    argv: Vec<String>,
}

impl Ctx {
    fn write_manifest(&self, path: &Path, outputs: Vec<String>) -> Result<()> {
        let m = RunManifest {
            tool: "patchfold",
            version: env!("CARGO_PKG_VERSION"),
            command: self.command,
            argv: self.argv.clone(),
            seed: self.cfg.seed,
            config: &self.cfg,
            outputs,
        };
        let mut text = serde_json::to_string_pretty(&m)?;
        text.push('\n');
        fs::write(path, text).map_err(Error::file(path))
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(Error::file(path))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(Error::file(dir))
}

/// `foo/report.csv` + `.json` → `foo/report.json`.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}{suffix}"))
}

enum Model {
    Pca(EigenBasis, Option<WeightDistribution>),
    Ae(AeModel, Option<LatentBox>),
    Cvae(CvaeModel),
}

impl Model {
    fn load(dir: &Path) -> Result<Self> {
        if dir.join("basis.json").is_file() {
            let (b, d) = EigenBasis::load(dir)?;
            return Ok(Self::Pca(b, d));
        }
        let header = dir.join("model.json");
        let text = fs::read_to_string(&header).map_err(Error::file(&header))?;
        let v: Value = serde_json::from_str(&text)?;
        match v.get("kind").and_then(Value::as_str) {
            Some("ae") => {
                let (m, b) = AeModel::load(dir)?;
                Ok(Self::Ae(m, b))
            }
            Some("cvae") => Ok(Self::Cvae(CvaeModel::load(dir)?)),
            other => Err(Error::Format(format!("{}: unknown model kind {other:?}", header.display()))),
        }
    }

    fn method(&self) -> Method {
        match self {
            Self::Pca(..) => Method::Pca,
            Self::Ae(..) => Method::Ae,
            Self::Cvae(_) => Method::Cvae,
        }
    }

    fn into_source(self, dir: &Path) -> Result<Box<dyn PatchSource>> {
        let missing = |what: &str| Error::invalid(format!("{}: model has no saved {what}", dir.display()));
        Ok(match self {
            Self::Pca(basis, d) => Box::new(PcaSource {
                basis,
                distribution: d.ok_or_else(|| missing("weight distribution"))?,
            }),
            Self::Ae(model, b) => Box::new(AeSource {
                model,
                latent_box: b.ok_or_else(|| missing("latent box"))?,
            }),
            Self::Cvae(model) => Box::new(CvaeSource { model }),
        })
    }
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default())
        .filter_level(level)
        .parse_default_env()
        .try_init();
    if let Some(j) = cli.jobs {
        if rayon::ThreadPoolBuilder::new().num_threads(j.max(1)).build_global().is_err() {
            log::debug!("thread pool already initialised; --jobs ignored");
        }
    }
    let argv = args.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    match run(cli, argv) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => EXIT_CONFIG,
        Error::DetectorUnreachable(_) => EXIT_UNREACHABLE,
        _ => EXIT_RUNTIME,
    }
}

pub fn run(cli: Cli, argv: Vec<String>) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.train.seed = cfg.seed;
    cfg.placement.seed = cfg.seed;
    cfg.tsne.seed = cfg.seed;
    let command = cli.command.name();
    let mut ctx = Ctx {
        cfg,
        command,
        argv,
    };
    match cli.command {
        Command::FitPca(a) => fit_pca_cmd(&mut ctx, a),
        Command::Reconstruct(a) => reconstruct_cmd(&mut ctx, a),
        Command::Sample(a) => sample_cmd(&mut ctx, a),
        Command::TrainAe(a) => train_cmd(&mut ctx, a, Method::Ae),
        Command::TrainCvae(a) => train_cmd(&mut ctx, a, Method::Cvae),
        Command::Compose(a) => compose_cmd(&mut ctx, a),
        Command::EvalAttack(a) => eval_cmd(&mut ctx, a),
        Command::EmbedTsne(a) => tsne_cmd(&mut ctx, a),
        Command::Report(a) => report_cmd(&mut ctx, a),
    }
}

fn fit_pca_cmd(ctx: &mut Ctx, a: FitPcaArgs) -> Result<()> {
    if let Some(k) = a.k {
        ctx.cfg.pca.k = k;
    }
    let (dir, manifest) = (a.input.dir(&ctx.cfg), a.input.manifest(&ctx.cfg));
    ctx.cfg
        .validate(&[("patches", dir.as_deref()), ("manifest", manifest.as_deref())])?;
    let set = a.input.load(&ctx.cfg)?;
    let basis = fit_pca(&set, ctx.cfg.pca.k)?;
    let dist = fit_weight_distribution(&basis, &set)?;
    create_dir(&a.out)?;
    basis.save(&a.out, Some(&dist))?;
    let mut csv = String::from("component,singular_value,explained_variance,cumulative\n");
    for j in 0..basis.k() {
        let cum = basis.explained_variance(j + 1);
        let own = cum - basis.explained_variance(j);
        writeln!(csv, "{},{},{own},{cum}", j + 1, basis.singular_values()[j]).unwrap();
    }
    write(&a.out.join("explained_variance.csv"), &csv)?;
    if basis.is_rank_deficient() {
        log::warn!("patch set has rank {} < k = {}", basis.rank(), basis.k());
    }
    ctx.write_manifest(
        &a.out.join("run.json"),
        vec!["basis.json".into(), "mean.ptf".into(), "components.ptf".into(), "explained_variance.csv".into()],
    )
}

fn write_patch_dir(dir: &Path, prefix: &str, patches: &[(crate::patch::Patch, Option<String>)]) -> Result<Vec<String>> {
    create_dir(dir)?;
    let mut entries = Vec::with_capacity(patches.len());
    for (i, (p, group)) in patches.iter().enumerate() {
        let file = format!("{prefix}_{i:04}.png");
        save_patch(p, &dir.join(&file), PatchFormat::Png8)?;
        entries.push(ManifestEntry {
            file,
            group: group.clone(),
        });
    }
    crate::patch::write_manifest(&dir.join("manifest.json"), &entries)?;
    let mut files: Vec<String> = entries.into_iter().map(|e| e.file).collect();
    files.push("manifest.json".into());
    Ok(files)
}

fn reconstruct_cmd(ctx: &mut Ctx, a: ReconstructArgs) -> Result<()> {
    let (dir, manifest) = (a.input.dir(&ctx.cfg), a.input.manifest(&ctx.cfg));
    ctx.cfg.validate(&[
        ("model", Some(&a.model)),
        ("patches", dir.as_deref()),
        ("manifest", manifest.as_deref()),
    ])?;
    let set = a.input.load(&ctx.cfg)?;
    let model = Model::load(&a.model)?;
    let truncated;
    let recon: &dyn Reconstructor = match &model {
        Model::Pca(b, _) => match a.k {
            Some(k) => {
                truncated = b.truncated(k)?;
                &truncated
            }
            None => b,
        },
        Model::Ae(m, _) => m,
        Model::Cvae(m) => m,
    };
    let patches = recon.reconstruct_set(&set)?;
    let report = reconstruction_report(recon, &set)?;
    let labelled: Vec<_> = patches
        .into_iter()
        .zip(set.labels())
        .map(|(p, l)| (p, l.map(|g| g.to_string())))
        .collect();
    let mut outputs = write_patch_dir(&a.out, "recon", &labelled)?;
    write(&a.out.join("mse.csv"), &report.to_csv(set.labels()))?;
    let mut groups = String::from("group,mse\n");
    for (g, m) in &report.per_group {
        writeln!(groups, "{g},{m}").unwrap();
    }
    writeln!(groups, "all,{}", report.mean).unwrap();
    write(&a.out.join("mse_by_group.csv"), &groups)?;
    outputs.extend(["mse.csv".into(), "mse_by_group.csv".into()]);
    ctx.write_manifest(&a.out.join("run.json"), outputs)
}

fn sample_cmd(ctx: &mut Ctx, a: SampleArgs) -> Result<()> {
    ctx.cfg.validate(&[("model", Some(&a.model))])?;
    let model = Model::load(&a.model)?;
    if let Some(m) = a.method {
        if m != model.method() {
            return Err(Error::Config(vec![format!(
                "--method {m:?} does not match the {:?} model in {}",
                model.method(),
                a.model.display()
            )]));
        }
    }
    let mut r = rng::derived(ctx.cfg.seed, "sample");
    let seeds: Vec<u64> = (0..a.count).map(|_| r.random()).collect();
    let patches = seeds
        .iter()
        .map(|&s| {
            Ok(match &model {
                Model::Pca(b, d) => {
                    let d = d
                        .as_ref()
                        .ok_or_else(|| Error::invalid("PCA model has no saved weight distribution"))?;
                    (sample_pca_patch(b, d, s)?, None)
                }
                Model::Ae(m, b) => {
                    let b = b.as_ref().ok_or_else(|| Error::invalid("AE model has no saved latent box"))?;
                    (sample_ae_patch(m, b, s)?, None)
                }
                Model::Cvae(m) => {
                    let (p, g) = sample_cvae_patch(m, s)?;
                    (p, Some(g.to_string()))
                }
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let outputs = write_patch_dir(&a.out, "sample", &patches)?;
    ctx.write_manifest(&a.out.join("run.json"), outputs)
}

fn train_cmd(ctx: &mut Ctx, a: TrainArgs, method: Method) -> Result<()> {
    if let Some(e) = a.epochs {
        ctx.cfg.train.epochs = e;
    }
    if let Some(b) = a.batch {
        ctx.cfg.train.batch = b;
    }
    if let Some(lr) = a.lr {
        ctx.cfg.train.schedule.initial = lr;
    }
    let (dir, manifest) = (a.input.dir(&ctx.cfg), a.input.manifest(&ctx.cfg));
    ctx.cfg
        .validate(&[("patches", dir.as_deref()), ("manifest", manifest.as_deref())])?;
    let set = a.input.load(&ctx.cfg)?;
    create_dir(&a.out)?;
    let report = match method {
        Method::Ae => {
            let (m, report) = train_ae(&set, &ctx.cfg.train)?;
            m.save(&a.out, Some(&m.latent_box(&set)?))?;
            report
        }
        _ => {
            let (m, report) = train_cvae(&set, &ctx.cfg.train)?;
            m.save(&a.out)?;
            report
        }
    };
    write(&a.out.join("loss.csv"), &report.to_csv())?;
    if let Some(e) = report.diverged_at {
        log::warn!("training diverged in epoch {e}; the last finite weights were kept");
    }
    ctx.write_manifest(&a.out.join("run.json"), vec!["model.json".into(), "loss.csv".into()])
}

fn build_source(cfg: &RunConfig, s: &SourceArgs) -> Result<Box<dyn PatchSource>> {
    Ok(match s.patch_source {
        SourceKind::File => {
            let path = s.patch.as_ref().unwrap();
            Box::new(FixedPatch {
                id: path.file_name().unwrap_or_default().to_string_lossy().into_owned(),
                patch: load_patch(path)?,
            })
        }
        SourceKind::Set => Box::new(SetSource {
            set: s.input.load(cfg)?,
        }),
        kind => {
            let dir = s.model.as_ref().unwrap();
            let model = Model::load(dir)?;
            let want = match kind {
                SourceKind::Pca => Method::Pca,
                SourceKind::Ae => Method::Ae,
                _ => Method::Cvae,
            };
            if model.method() != want {
                return Err(Error::Config(vec![format!(
                    "--patch-source {want:?} does not match the {:?} model in {}",
                    model.method(),
                    dir.display()
                )]));
            }
            model.into_source(dir)?
        }
    })
}

fn source_paths(cfg: &RunConfig, s: &SourceArgs) -> Vec<(&'static str, Option<PathBuf>)> {
    match s.patch_source {
        SourceKind::File => vec![("--patch", s.patch.clone())],
        SourceKind::Set => vec![("patches", s.input.dir(cfg)), ("manifest", s.input.manifest(cfg))],
        _ => vec![("--model", s.model.clone())],
    }
}

fn compose_cmd(ctx: &mut Ctx, a: ComposeArgs) -> Result<()> {
    let p = &mut ctx.cfg.placement;
    if let Some(v) = a.pi {
        p.pi = v;
    }
    if let Some(m) = a.mode {
        p.mode = match m {
            ModeArg::Single => PatchMode::Single,
            ModeArg::MultiShared => PatchMode::MultiShared,
        };
    }
    if let Some(an) = a.anchor {
        p.anchor = match an {
            AnchorArg::Width => ScaleAnchor::Width,
            AnchorArg::Height => ScaleAnchor::Height,
            AnchorArg::Area => ScaleAnchor::Area,
        };
    }
    if let Some(v) = a.resize_min {
        p.resize_range[0] = v;
    }
    if let Some(v) = a.resize_max {
        p.resize_range[1] = v;
    }
    if let Some(v) = a.rotation_max {
        p.rotation_max = v;
    }
    if let Some(v) = a.dataset.min_box_area {
        ctx.cfg.eval.min_box_area = v;
    }
    let (ann, images) = (a.dataset.annotations(&ctx.cfg), a.dataset.images(&ctx.cfg));
    let mut required = vec![("annotations", ann.clone()), ("images", images.clone())];
    required.extend(source_paths(&ctx.cfg, &a.source));
    let req: Vec<(&str, Option<&Path>)> = required.iter().map(|(n, p)| (*n, p.as_deref())).collect();
    ctx.cfg.validate(&req)?;

    let source = build_source(&ctx.cfg, &a.source)?;
    let (anns, counts) = filter_small_boxes(&load_annotations(&ann.unwrap())?, ctx.cfg.eval.min_box_area);
    log::info!(
        "{} images, {} of {} boxes kept",
        counts.images,
        counts.boxes_after,
        counts.boxes_before
    );
    let records = compose_dataset(&anns, &images.unwrap(), source.as_ref(), &ctx.cfg.placement, &a.out)?;
    fs::write(a.out.join("annotations.json"), serde_json::to_string_pretty(&anns)? + "\n")
        .map_err(Error::file(a.out.join("annotations.json")))?;
    fs::write(a.out.join("filter_counts.json"), serde_json::to_string_pretty(&counts)? + "\n")
        .map_err(Error::file(a.out.join("filter_counts.json")))?;
    let patched = records.iter().filter(|r| r.patched).count();
    log::info!("patched {patched} of {} boxes", records.len());
    let mut outputs: Vec<String> = anns.iter().map(|x| format!("{}.png", x.image)).collect();
    outputs.extend(["placements.jsonl".into(), "annotations.json".into(), "filter_counts.json".into()]);
    ctx.write_manifest(&a.out.join("run.json"), outputs)
}

fn eval_patches(ctx: &Ctx, a: &EvalArgs) -> Result<Vec<SourcedPatch>> {
    if let Some(dir) = &a.model {
        let source = Model::load(dir)?.into_source(dir)?;
        let mut r = rng::derived(ctx.cfg.seed, "eval-patches");
        return (0..a.count).map(|_| source.draw(&mut r)).collect();
    }
    let set = a.input.load(&ctx.cfg)?;
    let names = read_manifest(&a.input.manifest(&ctx.cfg).unwrap())?;
    Ok(set
        .patches()
        .iter()
        .zip(names)
        .map(|(p, e)| SourcedPatch {
            id: e.file,
            patch: p.clone(),
        })
        .collect())
}

fn eval_cmd(ctx: &mut Ctx, a: EvalArgs) -> Result<()> {
    if let Some(v) = a.dataset.min_box_area {
        ctx.cfg.eval.min_box_area = v;
    }
    if let Some(i) = a.interpolation {
        ctx.cfg.eval.interpolation = match i {
            InterpArg::P101 => Interpolation::Point101,
            InterpArg::P11 => Interpolation::Point11,
        };
    }
    if let Some(url) = &a.detector_url {
        ctx.cfg.detector.base_url = url.clone();
    } else {
        ctx.cfg.detector = ctx.cfg.detector.clone().with_env_override();
    }
    if let Some(c) = &a.cache {
        ctx.cfg.paths.cache = Some(c.clone());
    }
    let (ann, images) = (a.dataset.annotations(&ctx.cfg), a.dataset.images(&ctx.cfg));
    let mut required = vec![("annotations", ann.clone()), ("images", images.clone())];
    if !a.clean_only {
        if a.model.is_some() {
            required.push(("--model", a.model.clone()));
        } else {
            required.push(("patches", a.input.dir(&ctx.cfg)));
            required.push(("manifest", a.input.manifest(&ctx.cfg)));
        }
    }
    if let Some(d) = &a.detections_dir {
        required.push(("--detections-dir", Some(d.clone())));
    }
    let req: Vec<(&str, Option<&Path>)> = required.iter().map(|(n, p)| (*n, p.as_deref())).collect();
    ctx.cfg.validate(&req)?;

    let (anns, _) = filter_small_boxes(&load_annotations(&ann.unwrap())?, ctx.cfg.eval.min_box_area);
    let images = images.unwrap();
    let detector: Box<dyn Detector> = match (&a.detections_dir, &ctx.cfg.paths.cache) {
        (Some(d), _) => Box::new(FileDetector::from_dir(d, &anns)?),
        (None, Some(c)) => Box::new(CachedDetector::new(
            HttpDetector::new(ctx.cfg.detector.clone())?,
            DetectionCache::open(c)?,
        )),
        (None, None) => Box::new(HttpDetector::new(ctx.cfg.detector.clone())?),
    };
    let interp = ctx.cfg.eval.interpolation;

    let report_json = sibling(&a.out, ".json");
    let mut report = if a.append && report_json.is_file() {
        EvalReport::load(&report_json)?
    } else {
        EvalReport {
            interpolation: interp,
            rows: Vec::new(),
        }
    };
    if report.interpolation != interp {
        return Err(Error::Config(vec![format!(
            "{} uses {:?} interpolation, this run {interp:?}",
            report_json.display(),
            report.interpolation
        )]));
    }
    let mut push = |row: EvalRow| {
        report.rows.retain(|r| r.mode != row.mode);
        report.rows.push(row);
    };
    let mut runs_csv = String::from("mode,patch_id,map50,map5095\n");
    if a.include_clean || a.clean_only {
        let label = match (&a.mode_name, a.clean_only) {
            (Some(m), true) => m.as_str(),
            _ => "None",
        };
        let row = evaluate_clean(label, &anns, &images, detector.as_ref(), interp)?;
        writeln!(runs_csv, "{label},{},{},{}", crate::evaluation::CLEAN_ID, row.map50.mean, row.map5095.mean).unwrap();
        push(row);
    }
    if !a.clean_only {
        let mode = a.mode_name.as_deref().unwrap_or("Patches");
        let patches = eval_patches(ctx, &a)?;
        let (row, runs) = attack_eval(
            mode,
            &patches,
            &anns,
            &images,
            detector.as_ref(),
            &ctx.cfg.placement,
            interp,
        )?;
        for (p, r) in patches.iter().zip(&runs) {
            writeln!(runs_csv, "{mode},{},{},{}", p.id, r.0, r.1).unwrap();
        }
        push(row);
    }
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    let table = format_report(&report.rows)?;
    write(&a.out, &report_csv(&report.rows))?;
    report.save(&report_json)?;
    write(&sibling(&a.out, ".txt"), &table)?;
    let runs_path = sibling(&a.out, "_runs.csv");
    if a.append && runs_path.is_file() {
        let old = fs::read_to_string(&runs_path).map_err(Error::file(&runs_path))?;
        let body: String = runs_csv.lines().skip(1).map(|l| format!("{l}\n")).collect();
        write(&runs_path, &(old + &body))?;
    } else {
        write(&runs_path, &runs_csv)?;
    }
    print!("{table}");
    let name = |p: &Path| p.file_name().unwrap_or_default().to_string_lossy().into_owned();
    ctx.write_manifest(
        &sibling(&a.out, ".run.json"),
        vec![name(&a.out), name(&report_json), name(&sibling(&a.out, ".txt")), name(&runs_path)],
    )
}

fn tsne_inputs(path: &Path) -> Result<Vec<LabeledVector>> {
    let as_f64 = |d: &[f32]| d.iter().map(|&v| f64::from(v)).collect::<Vec<f64>>();
    let stem = path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
    if path.is_dir() {
        let manifest = path.join("manifest.json");
        let set = load_patch_set(path, &manifest)?;
        let entries = read_manifest(&manifest)?;
        return Ok(set
            .iter()
            .zip(entries)
            .map(|((p, g), e)| LabeledVector {
                label: format!("{stem}/{}", e.file),
                group: g.map(|g| g.to_string()).unwrap_or_default(),
                map: None,
                vector: as_f64(p.data()),
            })
            .collect());
    }
    match path.extension().and_then(|e| e.to_str()) {
        Some("ptf") => Ok(load_records(path)?
            .iter()
            .enumerate()
            .map(|(i, r)| LabeledVector {
                label: format!("{stem}/{i}"),
                group: String::new(),
                map: None,
                vector: as_f64(&r.data),
            })
            .collect()),
        Some("jsonl") => load_activations(path),
        _ => Err(Error::Format(format!(
            "{}: expected a patch directory, .ptf or .jsonl file",
            path.display()
        ))),
    }
}

fn tsne_cmd(ctx: &mut Ctx, a: TsneArgs) -> Result<()> {
    if let Some(p) = a.perplexity {
        ctx.cfg.tsne.perplexity = p;
    }
    if let Some(i) = a.iterations {
        ctx.cfg.tsne.iterations = i;
    }
    let req: Vec<(&str, Option<&Path>)> = a.input.iter().map(|p| ("--input", Some(p.as_path()))).collect();
    ctx.cfg.validate(&req)?;
    let mut all = Vec::new();
    let mut spans = Vec::new();
    for p in &a.input {
        let v = tsne_inputs(p)?;
        spans.push((p.clone(), all.len(), v.len()));
        all.extend(v);
    }
    let vectors: Vec<Vec<f64>> = all.iter().map(|v| v.vector.clone()).collect();
    let p = perplexity_affinities(&vectors, ctx.cfg.tsne.perplexity)?;
    let mut result = tsne_optimize(&p, &ctx.cfg.tsne)?;
    result.labels = all.iter().map(|v| v.label.clone()).collect();
    result.groups = all.iter().map(|v| v.group.clone()).collect();
    result.map = all.iter().map(|v| v.map).collect();
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write(&a.out, &result.to_csv())?;
    let mut outputs = vec![a.out.file_name().unwrap_or_default().to_string_lossy().into_owned()];
    let mut kl = String::from("iteration,kl\n");
    for (i, v) in result.kl_history.iter().enumerate() {
        writeln!(kl, "{},{v}", i + 1).unwrap();
    }
    let kl_path = sibling(&a.out, "_kl.csv");
    write(&kl_path, &kl)?;
    outputs.push(kl_path.file_name().unwrap().to_string_lossy().into_owned());
    if a.pair_with_first {
        let (_, _, n0) = spans[0];
        let mut csv = String::from("input,n,mean,std\n");
        for (path, start, len) in &spans[1..] {
            if *len != n0 {
                return Err(Error::invalid(format!(
                    "{} has {len} points but the first input has {n0}",
                    path.display()
                )));
            }
            let pairs: Vec<(usize, usize)> = (0..*len).map(|i| (start + i, i)).collect();
            let s = distance_stats(&result, &pairs)?;
            let std = s.std.map(|v| v.to_string()).unwrap_or_default();
            writeln!(csv, "{},{len},{},{std}", path.display(), s.mean).unwrap();
        }
        let d = sibling(&a.out, "_distances.csv");
        write(&d, &csv)?;
        outputs.push(d.file_name().unwrap().to_string_lossy().into_owned());
    }
    if let Some(t) = result.diverged_at {
        log::warn!("t-SNE stopped at iteration {t}: non-finite gradient");
    }
    ctx.write_manifest(&sibling(&a.out, ".run.json"), outputs)
}

fn report_cmd(ctx: &mut Ctx, a: ReportArgs) -> Result<()> {
    let req: Vec<(&str, Option<&Path>)> = a.fixtures.iter().map(|p| ("--fixtures", Some(p.as_path()))).collect();
    ctx.cfg.validate(&req)?;
    let mut rows = Vec::new();
    for f in &a.fixtures {
        rows.extend(EvalReport::load(f)?.rows);
    }
    let text = match a.format {
        ReportFormat::Text => format_report(&rows)?,
        ReportFormat::Latex => format_latex(&rows)?,
        ReportFormat::Csv => report_csv(&rows),
    };
    match &a.out {
        Some(path) => {
            write(path, &text)?;
            ctx.write_manifest(
                &sibling(path, ".run.json"),
                vec![path.file_name().unwrap_or_default().to_string_lossy().into_owned()],
            )
        }
        None => {
            print!("{text}");
            Ok(())
        }
    }
}
