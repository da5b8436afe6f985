use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ovam_core::backend::trace_io::{read_trace, write_trace, TRACE_IMAGE_FILE};
use ovam_core::dataset::{
    area_filter, build_prompts, clip_filter, generate_dataset, ClassToken, DatasetManifest,
    GenerateOptions, ImageTextScorer, PrecomputedScorer, PromptKind, MANIFEST_FILE,
};
use ovam_core::eval::evaluate_dataset;
use ovam_core::mask::{sidecar_path, write_mask};
use ovam_core::optimizer::{
    init_attribution_tokens, optimize_tokens_with, read_token_file, write_token_file,
    GroundTruthMask, OptimizerConfig, TokenFileMeta, TrainingPair,
};
use ovam_core::ovam::{write_heatmap, Normalization, SelectionConfig, TimestepSelection};
use ovam_core::raster::BoolGrid;
use serde_json::json;

use crate::config::Config;
use crate::error::{CliError, CliResult};
use crate::ops::{self, ResolvedTokens};

#[derive(Debug, Parser)]
#[command(name = "ovam", version, about = "Open-vocabulary attention maps for diffusion models")]
pub struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate an image and record its denoising trace.
    Generate(GenerateArgs),
    /// Attribution heatmap of one token on a recorded trace.
    Heatmap(HeatmapArgs),
    /// Binary pseudo-mask of one token on a recorded trace.
    Mask(MaskArgs),
    /// Train an attribution token against annotated images.
    Optimize(OptimizeArgs),
    /// Generate a synthetic segmentation dataset.
    Dataset(DatasetArgs),
    /// Apply the similarity and mask-area filters to a dataset.
    Filter(FilterArgs),
    /// Score a dataset's masks against ground truth.
    Eval(EvalArgs),
    /// Run the HTTP service.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub prompt: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Trace directory to create.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TokenArgs {
    /// Attribution prompt.
    #[arg(long, conflicts_with = "token_file", required_unless_present = "token_file")]
    pub prompt: Option<String>,
    /// Directory holding token.json and token.f32.
    #[arg(long)]
    pub token_file: Option<PathBuf>,
    /// Row of the attribution prompt, counting the start marker as 0.
    /// Defaults to the last word, or the last row of a token file.
    #[arg(long)]
    pub token_index: Option<usize>,
}

impl TokenArgs {
    fn resolve(&self, cfg: &Config) -> CliResult<ResolvedTokens> {
        Ok(match (&self.prompt, &self.token_file) {
            (Some(p), _) => ResolvedTokens::from_prompt(&*cfg.backend()?, p, self.token_index)?,
            (None, Some(dir)) => ResolvedTokens::from_token_file(dir, self.token_index)?,
            (None, None) => return Err(CliError::invalid("need --prompt or --token-file")),
        })
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum NormalizationArg {
    RawSum,
    MeanOverSlices,
}

#[derive(Debug, Args)]
pub struct SelectionArgs {
    /// Cross-attention block ids, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub blocks: Vec<String>,
    /// Head indices, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub heads: Vec<usize>,
    /// `all`, `single:T`, `early:T` or `late:T`.
    #[arg(long, value_parser = parse_timesteps)]
    pub timesteps: Option<TimestepSelection>,
    /// `WIDTHxHEIGHT`.
    #[arg(long, value_parser = parse_size)]
    pub output_size: Option<(usize, usize)>,
    #[arg(long, value_enum)]
    pub normalization: Option<NormalizationArg>,
}

impl SelectionArgs {
    pub fn apply(&self, base: &SelectionConfig) -> SelectionConfig {
        let mut s = base.clone();
        if !self.blocks.is_empty() {
            s.blocks = Some(self.blocks.clone());
        }
        if !self.heads.is_empty() {
            s.heads = Some(self.heads.clone());
        }
        if let Some(t) = self.timesteps {
            s.timesteps = t;
        }
        if let Some(o) = self.output_size {
            s.output_size = Some(o);
        }
        if let Some(n) = self.normalization {
            s.normalization = match n {
                NormalizationArg::RawSum => Normalization::RawSum,
                NormalizationArg::MeanOverSlices => Normalization::MeanOverSlices,
            };
        }
        s
    }
}

fn parse_timesteps(s: &str) -> Result<TimestepSelection, String> {
    if s == "all" {
        return Ok(TimestepSelection::All);
    }
    let (mode, step) = s.split_once(':').ok_or("expected all or MODE:STEP")?;
    let step: usize = step.parse().map_err(|e| format!("step: {e}"))?;
    match mode {
        "single" => Ok(TimestepSelection::Single(step)),
        "early" => Ok(TimestepSelection::Early(step)),
        "late" => Ok(TimestepSelection::Late(step)),
        _ => Err(format!("unknown timestep mode `{mode}`")),
    }
}

fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let (w, h) = s.split_once('x').ok_or("expected WIDTHxHEIGHT")?;
    let w: usize = w.parse().map_err(|e| format!("width: {e}"))?;
    let h: usize = h.parse().map_err(|e| format!("height: {e}"))?;
    Ok((w, h))
}

#[derive(Debug, Args)]
pub struct HeatmapArgs {
    #[arg(long)]
    pub trace: PathBuf,
    #[command(flatten)]
    pub token: TokenArgs,
    #[command(flatten)]
    pub selection: SelectionArgs,
    /// Output prefix; writes PREFIX.f32, PREFIX.json and PREFIX.png.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct MaskArgs {
    #[arg(long)]
    pub trace: PathBuf,
    #[command(flatten)]
    pub token: TokenArgs,
    #[command(flatten)]
    pub selection: SelectionArgs,
    /// Defaults depend on the token kind (see the config file).
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub no_crf: bool,
    #[arg(long)]
    pub no_self_attention: bool,
    #[arg(long)]
    pub threshold_at_latent: bool,
    /// Mask PNG; a JSON sidecar is written next to it.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct OptimizeArgs {
    /// `TRACE_DIR[:MASK_PNG]`; the mask defaults to TRACE_DIR/annotation.png.
    #[arg(long = "image-pair", required = true)]
    pub image_pairs: Vec<String>,
    #[arg(long = "class")]
    pub class: String,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub decay: Option<f64>,
    #[arg(long)]
    pub decay_every: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Token file directory to write.
    #[arg(long)]
    pub out: PathBuf,
}

impl OptimizeArgs {
    pub fn optimizer_config(&self, cfg: &Config) -> OptimizerConfig {
        let mut c = cfg.optimizer.clone();
        if let Some(v) = self.lr {
            c.learning_rate = v;
        }
        if let Some(v) = self.decay {
            c.decay_factor = v;
        }
        if let Some(v) = self.decay_every {
            c.decay_every = v;
        }
        if let Some(v) = self.epochs {
            c.epochs = v;
        }
        c
    }
}

pub const ANNOTATION_FILE: &str = "annotation.png";

/// Loads a trace and its class annotation as a training pair.
pub fn load_pair(spec: &str) -> CliResult<TrainingPair> {
    let (trace_dir, mask) = match spec.split_once(':') {
        Some((t, m)) => (PathBuf::from(t), PathBuf::from(m)),
        None => (PathBuf::from(spec), Path::new(spec).join(ANNOTATION_FILE)),
    };
    let trace = read_trace(&trace_dir)?;
    let gt = BoolGrid::load_png(&mask)?;
    Ok(TrainingPair::new(Arc::new(trace), GroundTruthMask::from_class_mask(gt))?)
}

#[derive(Debug, Args)]
pub struct DatasetArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Class names, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub classes: Vec<String>,
    #[arg(long)]
    pub per_class: Option<usize>,
    /// Prompt template containing `{classname}`.
    #[arg(long)]
    pub template: Option<String>,
    /// Caption file (JSON lines `{caption, id}`); switches to caption prompts.
    #[arg(long)]
    pub captions: Option<PathBuf>,
    #[arg(long)]
    pub seed_base: Option<u64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub workers: Option<usize>,
    /// `CLASS=TOKEN_DIR`: mask this class with a trained token.
    #[arg(long = "token", value_parser = parse_class_token)]
    pub tokens: Vec<(String, PathBuf)>,
}

fn parse_class_token(s: &str) -> Result<(String, PathBuf), String> {
    let (c, p) = s.split_once('=').ok_or("expected CLASS=TOKEN_DIR")?;
    Ok((c.to_string(), PathBuf::from(p)))
}

#[derive(Debug, Args)]
pub struct FilterArgs {
    /// Dataset directory (holding manifest.jsonl).
    #[arg(long)]
    pub dataset: PathBuf,
    /// Precomputed image-text scores, JSON lines `{id, score}`.
    #[arg(long)]
    pub scores: Option<PathBuf>,
    #[arg(long)]
    pub keep: Option<f64>,
    #[arg(long)]
    pub clip_template: Option<String>,
    #[arg(long)]
    pub area_low: Option<f64>,
    #[arg(long)]
    pub area_high: Option<f64>,
    #[arg(long)]
    pub no_clip: bool,
    #[arg(long)]
    pub no_area: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Dataset directory or its manifest.jsonl.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Ground-truth directory with one `<id>.png` per entry.
    #[arg(long)]
    pub gt: PathBuf,
    /// Classes to average, comma separated; default: those in the manifest.
    #[arg(long, value_delimiter = ',')]
    pub classes: Vec<String>,
    /// Print the full report as JSON instead of the table.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub bind: Option<String>,
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
}

fn print_json(out: &mut dyn Write, v: &serde_json::Value) -> CliResult<()> {
    writeln!(out, "{}", serde_json::to_string_pretty(v)?)?;
    Ok(())
}

/// Runs one command, writing its report to `out`.
pub fn run(cli: Cli, out: &mut dyn Write) -> CliResult<()> {
    let cfg = Config::load(cli.config.as_deref())?;
    match cli.command {
        Command::Generate(a) => generate(&cfg, a, out),
        Command::Heatmap(a) => heatmap(&cfg, a, out),
        Command::Mask(a) => mask(&cfg, a, out),
        Command::Optimize(a) => optimize(&cfg, a, out),
        Command::Dataset(a) => dataset(&cfg, a, out),
        Command::Filter(a) => filter(&cfg, a, out),
        Command::Eval(a) => eval(a, out),
        Command::Serve(a) => serve(cfg, a),
    }
}

fn generate(cfg: &Config, a: GenerateArgs, out: &mut dyn Write) -> CliResult<()> {
    let backend = cfg.backend()?;
    let trace = backend.generate_with_trace(&a.prompt, a.seed, a.steps.unwrap_or(cfg.steps))?;
    write_trace(&trace, &a.out)?;
    let (w, h) = trace.image_dims();
    print_json(
        out,
        &json!({
            "trace": a.out,
            "image": a.out.join(TRACE_IMAGE_FILE),
            "backend": trace.backend_id,
            "width": w,
            "height": h,
        }),
    )
}

fn heatmap(cfg: &Config, a: HeatmapArgs, out: &mut dyn Write) -> CliResult<()> {
    let trace = read_trace(&a.trace)?;
    let tokens = a.token.resolve(cfg)?;
    let selection = a.selection.apply(&cfg.selection);
    let (map, hm) = ops::heatmap(&trace, &tokens, &selection)?;
    let [raw, meta, png] = write_heatmap(&a.out, &map, tokens.label(), hm.normalization, hm.slices)?;
    let stats = ops::heatmap_stats(&map, tokens.defaults(&cfg.mask).tau)?;
    print_json(
        out,
        &json!({
            "raw": raw,
            "meta": meta,
            "png": png,
            "token": tokens.label(),
            "slices": hm.slices,
            "stats": stats,
        }),
    )
}

fn mask(cfg: &Config, a: MaskArgs, out: &mut dyn Write) -> CliResult<()> {
    let trace = read_trace(&a.trace)?;
    let tokens = a.token.resolve(cfg)?;
    let mut params = tokens.defaults(&cfg.mask);
    if let Some(t) = a.tau {
        params.tau = t;
    }
    if let Some(v) = a.alpha {
        params.alpha = v;
    }
    params.use_crf &= !a.no_crf;
    params.use_self_attention &= !a.no_self_attention;
    params.threshold_at_latent |= a.threshold_at_latent;
    let selection = a.selection.apply(&cfg.selection);
    let m = ops::mask(&trace, &tokens, &params, &selection, &*cfg.refiner())?;
    write_mask(&a.out, &m, &params)?;
    print_json(
        out,
        &json!({
            "mask": a.out,
            "sidecar": sidecar_path(&a.out),
            "token": tokens.label(),
            "area_fraction": m.area_fraction,
            "tau": params.tau,
            "alpha": params.alpha,
        }),
    )
}

fn optimize(cfg: &Config, a: OptimizeArgs, out: &mut dyn Write) -> CliResult<()> {
    let backend = cfg.backend()?;
    let opt = a.optimizer_config(cfg);
    let pairs = a
        .image_pairs
        .iter()
        .map(|s| load_pair(s))
        .collect::<CliResult<Vec<_>>>()?;
    let init = init_attribution_tokens(&a.class, &*backend)?;
    let log_every = (opt.epochs / 10).max(1);
    let res = optimize_tokens_with(&pairs, &init, &opt, |e| {
        if e.epoch % log_every == 0 {
            log::info!("epoch {} loss {:.6} lr {}", e.epoch, e.loss, e.lr);
        }
    })?;
    let meta = TokenFileMeta::from_result(&a.class, backend.id(), &res, &opt, pairs.len());
    write_token_file(&a.out, &res.best_tokens, &meta)?;
    print_json(
        out,
        &json!({
            "token_dir": a.out,
            "best_loss": res.best_loss,
            "best_epoch": res.best_epoch,
            "initial_loss": res.loss_history.first(),
            "epochs": res.loss_history.len(),
        }),
    )
}

fn dataset(cfg: &Config, a: DatasetArgs, out: &mut dyn Write) -> CliResult<()> {
    let backend = cfg.backend()?;
    let mut src = cfg.dataset.prompt_source();
    if !a.classes.is_empty() {
        src.classes = a.classes.clone();
    }
    if let Some(n) = a.per_class {
        src.per_class_count = n;
    }
    if let Some(t) = &a.template {
        src.template = t.clone();
    }
    if let Some(s) = a.seed_base {
        src.seed_base = s;
    }
    if let Some(c) = &a.captions {
        src.kind = PromptKind::Captions;
        src.caption_file = Some(c.clone());
    }
    let plan = build_prompts(&src)?;
    for c in &plan.unmatched {
        log::warn!("no caption mentions class `{c}`");
    }
    let mut tokens = BTreeMap::new();
    for (class, dir) in &a.tokens {
        let (x, _) = read_token_file(dir)?;
        tokens.insert(class.clone(), ClassToken::Optimized(x));
    }
    let opts = GenerateOptions {
        steps: a.steps.unwrap_or(cfg.steps),
        workers: a.workers.unwrap_or(cfg.dataset.workers),
        natural: cfg.mask.natural,
        optimized: cfg.mask.optimized,
    };
    let manifest = generate_dataset(&*backend, &plan.items, &tokens, &*cfg.refiner(), &a.out, &opts)?;
    print_json(out, &serde_json::to_value(manifest.summary())?)
}

fn filter(cfg: &Config, a: FilterArgs, out: &mut dyn Write) -> CliResult<()> {
    let mut manifest = DatasetManifest::read(&a.dataset)?;
    if !a.no_clip {
        let scorer = a.scores.as_deref().map(PrecomputedScorer::from_jsonl).transpose()?;
        manifest = clip_filter(
            &manifest,
            scorer.as_ref().map(|s| s as &dyn ImageTextScorer),
            a.keep.unwrap_or(cfg.dataset.keep_fraction),
            a.clip_template.as_deref().unwrap_or(&cfg.dataset.clip_template),
            &a.dataset,
        )?;
    }
    if !a.no_area {
        manifest = area_filter(
            &manifest,
            a.area_low.unwrap_or(cfg.dataset.area_low),
            a.area_high.unwrap_or(cfg.dataset.area_high),
        )?;
    }
    manifest.write(&a.dataset)?;
    print_json(out, &serde_json::to_value(manifest.summary())?)
}

fn eval(a: EvalArgs, out: &mut dyn Write) -> CliResult<()> {
    let root = if a.manifest.is_file() {
        a.manifest.parent().map(Path::to_path_buf).unwrap_or_default()
    } else {
        a.manifest.clone()
    };
    if a.manifest.is_file() && a.manifest.file_name() != Some(MANIFEST_FILE.as_ref()) {
        return Err(CliError::invalid(format!(
            "expected a dataset directory or {MANIFEST_FILE}"
        )));
    }
    let manifest = DatasetManifest::read(&root)?;
    let report = evaluate_dataset(&manifest, &root, &a.gt, &a.classes)?;
    if a.json {
        print_json(out, &serde_json::to_value(&report)?)?;
    } else {
        write!(out, "{}", report.table())?;
    }
    if !report.missing_gt.is_empty() {
        return Err(CliError::new(
            "missing_ground_truth",
            format!(
                "{} kept entries have no ground truth, first: {}",
                report.missing_gt.len(),
                report.missing_gt[0].display()
            ),
        ));
    }
    Ok(())
}

fn serve(cfg: Config, a: ServeArgs) -> CliResult<()> {
    let bind = a.bind.unwrap_or_else(|| cfg.service.bind.clone());
    let data_dir = a.data_dir.unwrap_or_else(|| cfg.service.data_dir.clone());
    let state = crate::service::AppState::new(cfg, data_dir)?;
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&bind).await?;
        log::info!("listening on {}", listener.local_addr()?);
        axum::serve(listener, crate::service::router(state)).await
    })?;
    Ok(())
}
