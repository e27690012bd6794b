//! Command-line driver. Every command exits 0 on success, 1 on a user error
//! and 2 on an internal failure, printing one `error: <stage>: <reason>` line.

use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::{Preset, RunConfig, ServeConfig};
use crate::data::{
    gen_component_dataset, gen_pair_dataset, read_components, read_image_pairs, read_triplets, write_components,
    write_triplets, DataError,
};
use crate::diffusion::{Checkpoint, DenoiserParams, DiffusionError, Trainer};
use crate::imaging::{binarize, load_color, load_image, ColorImage};
use crate::metrics::{eval_report, MetricReport, MetricsError};
use crate::pipeline::{
    generate_render, train_item, ComposeRequest, PipelineError, PipelinePlan, RetrieveRequest, Workspace,
};
use crate::retrieval::{build_index, ComponentIndex, DEFAULT_VOCABULARY_SIZE};
use crate::service;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    User,
    Internal,
}

#[derive(Debug)]
pub struct CliError {
    pub kind: ErrorKind,
    pub stage: &'static str,
    pub message: String,
}

impl CliError {
    pub fn user(stage: &'static str, message: impl Into<String>) -> Self {
        CliError { kind: ErrorKind::User, stage, message: message.into() }
    }

    pub fn internal(stage: &'static str, message: impl Into<String>) -> Self {
        CliError { kind: ErrorKind::Internal, stage, message: message.into() }
    }

    pub fn exit_code(&self) -> i32 {
        match self.kind {
            ErrorKind::User => 1,
            ErrorKind::Internal => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        // One line, whatever the message contains.
        write!(f, "error: {}: {}", self.stage, self.message.replace('\n', " "))
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        let kind = if e.is_user_error() { ErrorKind::User } else { ErrorKind::Internal };
        CliError { kind, stage: e.stage(), message: e.to_string() }
    }
}

fn data_err(stage: &'static str, e: DataError) -> CliError {
    match e {
        DataError::Io(_) => CliError::internal(stage, e.to_string()),
        _ => CliError::user(stage, e.to_string()),
    }
}

fn io_err(stage: &'static str, path: &Path, e: std::io::Error) -> CliError {
    CliError::internal(stage, format!("{}: {e}", path.display()))
}

fn write_file(stage: &'static str, path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|e| io_err(stage, path, e))
}

fn create_dir(stage: &'static str, path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| io_err(stage, path, e))
}

fn load_checkpoint(stage: &'static str, path: &Path) -> Result<Checkpoint, CliError> {
    if !path.exists() {
        return Err(CliError::user(stage, format!("checkpoint not found: {}", path.display())));
    }
    Checkpoint::load(path).map_err(|e| CliError::user(stage, format!("checkpoint {}: {e}", path.display())))
}

fn load_index(path: &Path) -> Result<ComponentIndex, CliError> {
    if !path.exists() {
        return Err(CliError::user("retrieve", format!("index not found: {}", path.display())));
    }
    ComponentIndex::load(path).map_err(|e| CliError::user("retrieve", format!("index {}: {e}", path.display())))
}

// ---------------------------------------------------------------------------
// Argument parsing

#[derive(Debug, Parser)]
#[command(name = "archsketch", version, about = "Sketch-to-rendering pipeline for school facades")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic component or facade dataset.
    Dataset(DatasetArgs),
    /// Build a retrieval index from a component manifest.
    Index(IndexArgs),
    /// Train the generator on a facade manifest.
    Train(TrainArgs),
    /// Run segment, retrieve, compose and generate on one sketch.
    Pipeline(PipelineArgs),
    /// Compute PSNR, SSIM and the proxy distance over image pairs.
    Eval(EvalArgs),
    /// Serve the HTTP API.
    Serve(ServeArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DatasetKind {
    Components,
    Pairs,
}

#[derive(Debug, Clone, Args)]
pub struct DatasetArgs {
    #[arg(long, value_enum)]
    pub kind: DatasetKind,
    /// Defaults to the preset's dataset size.
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = Preset::Desk)]
    pub preset: Preset,
    /// Facade resolution; defaults to the preset's.
    #[arg(long)]
    pub resolution: Option<usize>,
    /// Output directory; the manifest is `<out>/<kind>.jsonl`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct IndexArgs {
    /// Component manifest.
    #[arg(long)]
    pub components: PathBuf,
    #[arg(long, default_value_t = DEFAULT_VOCABULARY_SIZE)]
    pub vocabulary: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    /// Facade triplet manifest.
    #[arg(long)]
    pub dataset: PathBuf,
    /// Directory for `loss.csv` and checkpoints.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = Preset::Desk)]
    pub preset: Preset,
    /// TOML or JSON file overriding preset fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
    /// Continue from this checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Permit presets too large for a desk machine.
    #[arg(long)]
    pub allow_large: bool,
    /// Gradient worker threads. Above 1, items are differentiated separately
    /// and reduced in item order; results do not depend on the count.
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
}

#[derive(Debug, Clone, Args)]
pub struct PipelineArgs {
    #[arg(long)]
    pub sketch: PathBuf,
    /// JSON plan of region steps and the final generation.
    #[arg(long)]
    pub prompts: PathBuf,
    #[arg(long)]
    pub index: PathBuf,
    /// Generator checkpoint; required when the plan generates.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// 1-channel checkpoint for inpainting compose steps.
    #[arg(long)]
    pub refine_checkpoint: Option<PathBuf>,
    /// Reference render for PSNR/SSIM of the generation.
    #[arg(long)]
    pub reference: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    /// Image-pair manifests (generated vs reference), one report row each.
    #[arg(long)]
    pub pairs: Vec<PathBuf>,
    /// Facade manifests: each sketch is rendered with the checkpoint and
    /// compared with its render.
    #[arg(long)]
    pub triplets: Vec<PathBuf>,
    /// Row labels, in the order pairs then triplets.
    #[arg(long)]
    pub label: Vec<String>,
    /// Enables generation for triplets and the proxy column.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = crate::diffusion::DEFAULT_SAMPLING_STEPS)]
    pub steps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Directory for `report.txt` and `report.json`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub index: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub refine_checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub host: Option<String>,
    #[arg(long)]
    pub port: Option<u16>,
    #[arg(long)]
    pub session_ttl_secs: Option<u64>,
}

// ---------------------------------------------------------------------------
// Commands

pub fn cmd_dataset(a: &DatasetArgs) -> Result<PathBuf, CliError> {
    let preset = RunConfig::preset(a.preset);
    create_dir("dataset", &a.out)?;
    match a.kind {
        DatasetKind::Components => {
            let count = a.count.unwrap_or(preset.component_count);
            if count == 0 {
                return Err(CliError::user("dataset", "--count must be at least 1"));
            }
            let records = gen_component_dataset(count, a.seed).map_err(|e| data_err("dataset", e))?;
            let path = a.out.join("components.jsonl");
            write_components(&records, &path).map_err(|e| data_err("dataset", e))?;
            Ok(path)
        }
        DatasetKind::Pairs => {
            let count = a.count.unwrap_or(preset.pair_count);
            if count == 0 {
                return Err(CliError::user("dataset", "--count must be at least 1"));
            }
            let res = a.resolution.unwrap_or(preset.resolution);
            let triplets = gen_pair_dataset(count, res, a.seed).map_err(|e| data_err("dataset", e))?;
            let path = a.out.join("pairs.jsonl");
            write_triplets(&triplets, &path).map_err(|e| data_err("dataset", e))?;
            Ok(path)
        }
    }
}

pub fn cmd_index(a: &IndexArgs) -> Result<ComponentIndex, CliError> {
    let records = read_components(&a.components).map_err(|e| data_err("index", e))?;
    let index = build_index(&records, a.vocabulary, a.seed).map_err(|e| CliError::user("index", e.to_string()))?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir("index", dir)?;
    }
    index.save(&a.out).map_err(|e| CliError::internal("index", e.to_string()))?;
    Ok(index)
}

/// Resolved run configuration for `train`: file, then flags.
pub fn train_config(a: &TrainArgs) -> Result<RunConfig, CliError> {
    let mut c = match &a.config {
        Some(p) => RunConfig::from_file(p, a.preset).map_err(|e| CliError::user("config", e.to_string()))?,
        None => RunConfig::preset(a.preset),
    };
    if let Some(v) = a.steps {
        c.train_steps = v;
    }
    if let Some(v) = a.seed {
        c.seed = v;
    }
    if let Some(v) = a.lr {
        c.lr = v;
    }
    if let Some(v) = a.batch_size {
        c.batch_size = v;
    }
    if let Some(v) = a.checkpoint_every {
        c.checkpoint_every = v;
    }
    c.validate().map_err(|e| CliError::user("config", e.to_string()))?;
    Ok(c)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub first_step: u64,
    pub last_step: u64,
    /// `(step, loss)` for the steps run by this invocation.
    pub losses: Vec<(u64, f64)>,
    pub checkpoint: PathBuf,
}

pub const LOSS_CSV_HEADER: &str = "step,loss";

/// Keeps the header and rows up to `step` of an existing loss log.
fn truncated_log(path: &Path, step: u64) -> String {
    let mut out = format!("{LOSS_CSV_HEADER}\n");
    if let Ok(text) = fs::read_to_string(path) {
        for line in text.lines().skip(1) {
            let s = line.split(',').next().and_then(|s| s.parse::<u64>().ok());
            if s.is_some_and(|s| s <= step) {
                out.push_str(line);
                out.push('\n');
            }
        }
    }
    out
}

pub fn cmd_train(a: &TrainArgs) -> Result<TrainSummary, CliError> {
    let config = train_config(a)?;
    if config.is_large() && !a.allow_large {
        return Err(CliError::user(
            "train",
            format!("{}; this preset is not meant for a desk machine, pass --allow-large to run it", config.summary()),
        ));
    }
    log::info!("{}", config.summary());
    let triplets = read_triplets(&a.dataset).map_err(|e| data_err("train", e))?;
    if triplets.is_empty() {
        return Err(CliError::user("train", "dataset is empty"));
    }
    if let Some(t) =
        triplets.iter().find(|t| t.sketch.width() != config.resolution || t.sketch.height() != config.resolution)
    {
        return Err(CliError::user(
            "train",
            format!(
                "dataset images are {}x{}, config resolution is {}",
                t.sketch.width(),
                t.sketch.height(),
                config.resolution
            ),
        ));
    }
    let items: Vec<_> = triplets.iter().map(train_item).collect();
    let mut trainer = match &a.resume {
        Some(p) => load_checkpoint("train", p)?.into_trainer(),
        None => {
            let params = DenoiserParams::init(&config.model, config.model_seed)
                .map_err(|e| CliError::user("train", e.to_string()))?;
            let schedule = config.schedule.build().map_err(|e| CliError::user("train", e.to_string()))?;
            Trainer::new(params, schedule, config.lr, config.batch_size, config.seed)
        }
    };
    trainer.threads = a.threads;
    create_dir("train", &a.out)?;
    let log_path = a.out.join("loss.csv");
    let start = trainer.step();
    let mut log_text = truncated_log(&log_path, if a.resume.is_some() { start } else { 0 });
    let mut losses = Vec::new();
    let save = |t: &Trainer, path: &Path| {
        Checkpoint::from_trainer(t).save(path).map_err(|e| CliError::internal("train", e.to_string()))
    };
    for step in start + 1..=config.train_steps {
        let loss = match trainer.step_on(&items) {
            Ok(l) => l,
            Err(e @ DiffusionError::Divergence { .. }) => {
                write_file("train", &log_path, log_text.as_bytes())?;
                return Err(CliError::internal("train", e.to_string()));
            }
            Err(e) => return Err(CliError::internal("train", e.to_string())),
        };
        losses.push((step, loss));
        log_text.push_str(&format!("{step},{loss}\n"));
        if step % 100 == 0 {
            log::info!("step {step} loss {loss:.5}");
        }
        if step % config.checkpoint_every == 0 {
            save(&trainer, &a.out.join(format!("checkpoint-{step:07}.ck")))?;
            write_file("train", &log_path, log_text.as_bytes())?;
        }
    }
    write_file("train", &log_path, log_text.as_bytes())?;
    let checkpoint = a.out.join("checkpoint.ck");
    save(&trainer, &checkpoint)?;
    Ok(TrainSummary { first_step: start + 1, last_step: trainer.step(), losses, checkpoint })
}

/// Runs the plan and writes every intermediate to `out`:
/// `rough.png`, `region-{i}.png`, `candidates-{i}.json`, `detailed-{i}.png`,
/// `detailed.png`, `provenance.json`, `render.png` and `summary.json`.
pub fn cmd_pipeline(a: &PipelineArgs) -> Result<Workspace, CliError> {
    let sketch = load_image(&a.sketch).map_err(|e| CliError::user("input", format!("{}: {e}", a.sketch.display())))?;
    let plan_text =
        fs::read_to_string(&a.prompts).map_err(|e| CliError::user("input", format!("{}: {e}", a.prompts.display())))?;
    let plan: PipelinePlan = serde_json::from_str(&plan_text)
        .map_err(|e| CliError::user("input", format!("{}: {e}", a.prompts.display())))?;
    let index = load_index(&a.index)?;
    let model = match &a.checkpoint {
        Some(p) => Some(load_checkpoint("generate", p)?),
        None if plan.generate.is_some() => {
            return Err(CliError::user("generate", "the plan generates but no --checkpoint was given"))
        }
        None => None,
    };
    let refine = a.refine_checkpoint.as_deref().map(|p| load_checkpoint("compose", p)).transpose()?;
    let reference = match &a.reference {
        Some(p) => Some(load_color(p).map_err(|e| CliError::user("input", format!("{}: {e}", p.display())))?),
        None => None,
    };

    create_dir("output", &a.out)?;
    let mut ws = Workspace::new(binarize(&sketch));
    ws.reference = reference;
    let emit = |ws: &Workspace, name: &str| -> Result<(), CliError> {
        let bytes = ws.image_png(name).ok_or_else(|| CliError::internal("output", format!("no image {name}")))?;
        write_file("output", &a.out.join(name), &bytes)
    };
    emit(&ws, "rough.png")?;
    let mut regions = Vec::new();
    for (i, step) in plan.regions.iter().enumerate() {
        let rid = ws.segment(&step.prompt)?;
        emit(&ws, &format!("region-{rid}.png"))?;
        let cands =
            ws.retrieve(&index, &RetrieveRequest { region_id: rid, query: step.query.clone(), top_k: step.top_k })?;
        let json = serde_json::to_vec_pretty(&cands).expect("candidates serialize");
        write_file("output", &a.out.join(format!("candidates-{i}.json")), &json)?;
        let pick = cands.get(step.pick).ok_or_else(|| {
            CliError::user("compose", format!("step {i}: pick {} but only {} candidates", step.pick, cands.len()))
        })?;
        let req = ComposeRequest {
            region_id: rid,
            component_id: pick.component_id,
            mode: step.mode,
            prompt: step.inpaint_prompt.clone(),
            steps: step.inpaint_steps,
            seed: step.inpaint_seed,
        };
        ws.compose(&index, refine.as_ref(), &req)?;
        let bytes = ws.image_png("detailed.png").expect("detailed sketch exists");
        write_file("output", &a.out.join(format!("detailed-{i}.png")), &bytes)?;
        let r = &ws.regions[rid];
        regions.push(serde_json::json!({
            "region_id": rid,
            "bbox": r.bbox(),
            "area": r.area(),
            "confidence": r.confidence,
            "component_id": pick.component_id,
        }));
    }
    emit(&ws, "detailed.png")?;
    let prov = serde_json::to_vec_pretty(ws.provenance()).expect("provenance serializes");
    write_file("output", &a.out.join("provenance.json"), &prov)?;
    let mut metrics = None;
    if let (Some(g), Some(m)) = (&plan.generate, &model) {
        let (_, met) = ws.generate(m, g)?;
        metrics = met;
        emit(&ws, "render.png")?;
    }
    let summary = serde_json::json!({ "regions": regions, "generated": ws.render.is_some(), "metrics": metrics });
    write_file("output", &a.out.join("summary.json"), &serde_json::to_vec_pretty(&summary).expect("json"))?;
    Ok(ws)
}

fn label_for(labels: &[String], i: usize, path: &Path) -> String {
    labels.get(i).cloned().unwrap_or_else(|| {
        path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| format!("row{i}"))
    })
}

pub fn cmd_eval(a: &EvalArgs) -> Result<MetricReport, CliError> {
    if a.pairs.is_empty() && a.triplets.is_empty() {
        return Err(CliError::user("eval", "give at least one --pairs or --triplets manifest"));
    }
    let model = a.checkpoint.as_deref().map(|p| load_checkpoint("eval", p)).transpose()?;
    let metric_err = |e: MetricsError| CliError::user("eval", e.to_string());
    let mut report = MetricReport::new(0);
    let mut row = 0;
    for path in &a.pairs {
        let pairs = read_image_pairs(path).map_err(|e| data_err("eval", e))?;
        let images: Vec<(ColorImage, ColorImage)> = pairs.into_iter().map(|p| (p.generated, p.reference)).collect();
        let r = eval_report(&images, &label_for(&a.label, row, path), model.as_ref().map(|m| &m.params))
            .map_err(metric_err)?;
        report.pairs += r.pairs;
        report.rows.extend(r.rows);
        row += 1;
    }
    for path in &a.triplets {
        let m = model.as_ref().ok_or_else(|| CliError::user("eval", "--triplets needs --checkpoint"))?;
        let triplets = read_triplets(path).map_err(|e| data_err("eval", e))?;
        let mut images = Vec::with_capacity(triplets.len());
        for (i, t) in triplets.iter().enumerate() {
            let g = generate_render(m, &t.sketch, &t.prompt, a.steps, a.seed + i as u64)?;
            images.push((g, t.render.clone()));
        }
        let r = eval_report(&images, &label_for(&a.label, row, path), Some(&m.params)).map_err(metric_err)?;
        report.pairs += r.pairs;
        report.rows.extend(r.rows);
        row += 1;
    }
    if let Some(out) = &a.out {
        create_dir("eval", out)?;
        write_file("eval", &out.join("report.txt"), report.to_text().as_bytes())?;
        let json = serde_json::to_vec_pretty(&report.to_json()).expect("json");
        write_file("eval", &out.join("report.json"), &json)?;
    }
    Ok(report)
}

pub fn serve_config(a: &ServeArgs) -> Result<ServeConfig, CliError> {
    let mut c = match &a.config {
        Some(p) => ServeConfig::from_file(p).map_err(|e| CliError::user("config", e.to_string()))?,
        None => ServeConfig::default(),
    };
    if a.index.is_some() {
        c.index = a.index.clone();
    }
    if a.checkpoint.is_some() {
        c.checkpoint = a.checkpoint.clone();
    }
    if a.refine_checkpoint.is_some() {
        c.refine_checkpoint = a.refine_checkpoint.clone();
    }
    if let Some(h) = &a.host {
        c.host = h.clone();
    }
    if let Some(p) = a.port {
        c.port = p;
    }
    if let Some(t) = a.session_ttl_secs {
        c.session_ttl_secs = t;
    }
    Ok(c)
}

fn cmd_serve(a: &ServeArgs) -> Result<(), CliError> {
    let config = serve_config(a)?;
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| CliError::internal("serve", e.to_string()))?;
    rt.block_on(service::serve(config)).map_err(|e| CliError::user("serve", e))
}

fn execute(cli: Cli) -> Result<(), CliError> {
    let mut stdout = std::io::stdout();
    match cli.command {
        Command::Dataset(a) => {
            let p = cmd_dataset(&a)?;
            let _ = writeln!(stdout, "{}", p.display());
        }
        Command::Index(a) => {
            let idx = cmd_index(&a)?;
            let _ =
                writeln!(stdout, "{} components, {} visual words -> {}", idx.len(), idx.vocabulary.k, a.out.display());
        }
        Command::Train(a) => {
            let s = cmd_train(&a)?;
            if let (Some(f), Some(l)) = (s.losses.first(), s.losses.last()) {
                let _ = writeln!(stdout, "steps {}..={} loss {:.5} -> {:.5}", s.first_step, s.last_step, f.1, l.1);
            }
            let _ = writeln!(stdout, "{}", s.checkpoint.display());
        }
        Command::Pipeline(a) => {
            let ws = cmd_pipeline(&a)?;
            let _ = writeln!(stdout, "{} regions composed -> {}", ws.provenance().len(), a.out.display());
        }
        Command::Eval(a) => {
            let r = cmd_eval(&a)?;
            let _ = write!(stdout, "{}", r.to_text());
        }
        Command::Serve(a) => cmd_serve(&a)?,
    }
    Ok(())
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind as K;
            return match e.kind() {
                K::DisplayHelp | K::DisplayVersion => {
                    let _ = e.print();
                    0
                }
                _ => {
                    let msg = e.to_string();
                    let first = msg.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
                    eprintln!("{}", CliError::user("usage", first));
                    1
                }
            };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}
