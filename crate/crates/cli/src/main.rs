mod error;
mod server;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rrcomm::clip::VideoClip;
use rrcomm::dataset::{self, DatasetManifest, GenerateConfig, NormStats, DEFAULT_TRAIN_FRACTION};
use rrcomm::dsl::{bundled_library, load_library, parse_script, Library};
use rrcomm::eval::{self, compare_variants, MetricsReport};
use rrcomm::kinematics::{simulate, RobotProfile};
use rrcomm::nn::{load_checkpoint, save_checkpoint};
use rrcomm::render::{condition_by_id, hard_conditions, render_clip, EnvCondition, ViewAngle, Viewpoint, CONDITIONS};
use rrcomm::rrcommnet::{train, ModelConfig, RrCommNet, TrainOptions};
use rrcomm::study::{Study, StudyContent};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::CliError;

#[derive(Parser)]
#[command(name = "rrcomm", version, about = "Gestural messaging for underwater robots")]
struct Cli {
    /// Base seed for every random choice the command makes.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Where to write the effective configuration (default depends on the command).
    #[arg(long, global = true)]
    sidecar: Option<PathBuf>,
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate and render one gesture script to a clip file.
    Render(RenderArgs),
    /// Generate or split a synthetic dataset.
    #[command(subcommand)]
    Dataset(DatasetCommand),
    /// Train a recognition model on a split dataset.
    Train(TrainArgs),
    /// Ten-crop evaluation of a trained model on the TEST split.
    Eval(EvalArgs),
    /// Compare two evaluation reports (second relative to first).
    Compare(CompareArgs),
    /// Predict the message shown in one clip.
    Infer(InferArgs),
    /// Human transcription study.
    #[command(subcommand)]
    Study(StudyCommand),
}

#[derive(Args, Serialize)]
struct RenderArgs {
    #[arg(long)]
    script: PathBuf,
    #[arg(long, default_value = "HEAD_ON")]
    viewpoint: ViewAngle,
    /// Condition id, or a JSON file describing a condition.
    #[arg(long, default_value = "0")]
    env: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 5.0)]
    fps: f64,
    #[arg(long, default_value_t = 40)]
    height: usize,
    #[arg(long, default_value_t = 40)]
    width: usize,
    /// Camera distance in meters.
    #[arg(long)]
    distance: Option<f64>,
    /// Robot profile JSON.
    #[arg(long)]
    profile: Option<PathBuf>,
}

#[derive(Subcommand)]
enum DatasetCommand {
    Gen(GenArgs),
    Split(SplitArgs),
}

#[derive(Args, Serialize)]
struct GenArgs {
    /// Output directory (default `$RRCOMM_HOME/data`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Use the first N standard conditions.
    #[arg(long, default_value_t = 25)]
    conditions: usize,
    /// Explicit condition ids instead of `--conditions`.
    #[arg(long, value_delimiter = ',')]
    condition_ids: Vec<u32>,
    /// Use the held-out hard conditions.
    #[arg(long)]
    hard: bool,
    #[arg(long, default_value_t = 1)]
    instances: usize,
    #[arg(long, default_value_t = 5.0)]
    fps: f64,
    #[arg(long, default_value_t = 40)]
    height: usize,
    #[arg(long, default_value_t = 40)]
    width: usize,
    #[arg(long, default_value = "HEAD_ON")]
    viewpoint: ViewAngle,
    /// Directory of `.gest` scripts (default: the bundled library).
    #[arg(long)]
    library: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    threads: usize,
}

#[derive(Args, Serialize)]
struct SplitArgs {
    #[arg(long)]
    dir: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_TRAIN_FRACTION)]
    train_fraction: f64,
}

#[derive(Args, Serialize)]
struct TrainArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    /// Run directory for the checkpoint, model description and history.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Model config JSON; missing fields take the desk defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Start from the large reference dimensions instead of the desk ones.
    #[arg(long)]
    full_scale: bool,
    #[arg(long)]
    skip: bool,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, default_value_t = 2)]
    windows_per_clip: usize,
    #[arg(long, default_value_t = 0.0)]
    val_fraction: f64,
}

#[derive(Args, Serialize)]
struct EvalArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    /// Report directory (default `<model>/report`).
    #[arg(long)]
    reports: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct CompareArgs {
    first: PathBuf,
    second: PathBuf,
}

#[derive(Args, Serialize)]
struct InferArgs {
    #[arg(long)]
    clip: PathBuf,
    #[arg(long)]
    model: Option<PathBuf>,
    /// Normalization statistics from this dataset instead of the model's.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Subcommand)]
enum StudyCommand {
    /// Render the clips shown to participants.
    Content(ContentArgs),
    /// Serve the study HTTP API.
    Serve(ServeArgs),
    /// Print the report for the recorded transcriptions.
    Report(StudyPaths),
}

#[derive(Args, Serialize)]
struct ContentArgs {
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 10.0)]
    fps: f64,
    #[arg(long, default_value_t = 120)]
    height: usize,
    #[arg(long, default_value_t = 160)]
    width: usize,
    #[arg(long)]
    library: Option<PathBuf>,
}

#[derive(Args, Serialize, Clone)]
struct StudyPaths {
    /// Study content directory (default `$RRCOMM_HOME/study/content`).
    #[arg(long)]
    content: Option<PathBuf>,
    /// Append-only answer log (default `$RRCOMM_HOME/study/log.jsonl`).
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct ServeArgs {
    #[command(flatten)]
    paths: StudyPaths,
    #[arg(long, default_value = "127.0.0.1:8080")]
    addr: String,
}

/// Everything needed to rebuild a trained network.
#[derive(Debug, Serialize, Deserialize)]
struct ModelInfo {
    config: ModelConfig,
    norm: NormStats,
    best_epoch: usize,
    seed: u64,
}

const MODEL_INFO: &str = "model.json";
const MODEL_CHECKPOINT: &str = "model.ckpt";

fn home() -> PathBuf {
    std::env::var_os("RRCOMM_HOME").map_or_else(|| PathBuf::from("rrcomm-home"), PathBuf::from)
}

fn or_home(path: &Option<PathBuf>, rel: &str) -> PathBuf {
    path.clone().unwrap_or_else(|| home().join(rel))
}

fn write_sidecar(cli_path: &Option<PathBuf>, default: PathBuf, command: &str, seed: u64, args: Value) -> Result<(), CliError> {
    let path = cli_path.clone().unwrap_or(default);
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let doc = json!({ "command": command, "seed": seed, "version": env!("CARGO_PKG_VERSION"), "args": args });
    fs::write(path, serde_json::to_string_pretty(&doc)?)?;
    Ok(())
}

fn library(path: &Option<PathBuf>) -> Result<Library, CliError> {
    match path {
        Some(p) => Ok(load_library(p)?),
        None => Ok(bundled_library()),
    }
}

fn condition(spec: &str) -> Result<EnvCondition, CliError> {
    if let Ok(id) = spec.parse::<u32>() {
        return condition_by_id(id).ok_or_else(|| CliError::user("condition", format!("no condition with id {id}")));
    }
    let text = fs::read_to_string(spec)?;
    Ok(serde_json::from_str(&text)?)
}

fn print_json(v: &impl Serialize) -> Result<(), CliError> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn load_model(dir: &Path) -> Result<(RrCommNet, NormStats), CliError> {
    let info: ModelInfo = serde_json::from_str(&fs::read_to_string(dir.join(MODEL_INFO))?)?;
    let params = load_checkpoint(&dir.join(MODEL_CHECKPOINT))?;
    Ok((RrCommNet::new(info.config, params)?, info.norm))
}

fn run(cli: Cli) -> Result<(), CliError> {
    let seed = cli.seed;
    match cli.command {
        Command::Render(a) => {
            let text = fs::read_to_string(&a.script)?;
            let script = parse_script(&text)?;
            let env = condition(&a.env)?;
            let profile = match &a.profile {
                Some(p) => RobotProfile::from_json(&fs::read_to_string(p)?)?,
                None => RobotProfile::default(),
            }
            .with_controller(env.controller);
            let traj = simulate(&script, &profile, a.fps, seed)?;
            let mut viewpoint = Viewpoint::new(a.viewpoint);
            viewpoint.distance = a.distance;
            let mut rendered = render_clip(&traj, &viewpoint, &env, (a.height, a.width), rrcomm::derive_seed(seed, &[1]))?;
            rendered.clip.label = Some(script.message);
            if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(parent)?;
            }
            rendered.clip.save(&a.out)?;
            let sidecar = a.out.with_extension("config.json");
            write_sidecar(&cli.sidecar, sidecar, "render", seed, serde_json::to_value(&a)?)?;
            print_json(&json!({
                "clip": a.out,
                "message": script.message,
                "frames": rendered.clip.t,
                "truncated_at": rendered.degenerate_at,
            }))
        }
        Command::Dataset(DatasetCommand::Gen(a)) => {
            let out = or_home(&a.out, "data");
            let conditions: Vec<EnvCondition> = if a.hard {
                hard_conditions()
            } else if !a.condition_ids.is_empty() {
                a.condition_ids.iter().map(|id| condition(&id.to_string())).collect::<Result<_, _>>()?
            } else {
                if a.conditions > CONDITIONS.len() {
                    return Err(CliError::user("dataset", format!("only {} standard conditions exist", CONDITIONS.len())));
                }
                CONDITIONS[..a.conditions].to_vec()
            };
            let mut config = GenerateConfig::new(conditions, a.instances, seed);
            config.fps = a.fps;
            config.resolution = [a.height, a.width];
            config.viewpoint = a.viewpoint;
            config.threads = a.threads;
            let manifest = dataset::generate_dataset(&library(&a.library)?, &config, &out)?;
            let mut args = serde_json::to_value(&a)?;
            args["out"] = json!(out);
            write_sidecar(&cli.sidecar, out.join("gen.config.json"), "dataset gen", seed, args)?;
            print_json(&json!({ "dir": out, "clips": manifest.entries.len() }))
        }
        Command::Dataset(DatasetCommand::Split(a)) => {
            let dir = or_home(&a.dir, "data");
            let manifest = DatasetManifest::load(&dir)?;
            let mut manifest = dataset::split(&manifest, a.train_fraction, seed)?;
            manifest.norm = None;
            manifest.norm = Some(dataset::compute_norm_stats(&manifest, &dir)?);
            manifest.save(&dir)?;
            let mut args = serde_json::to_value(&a)?;
            args["dir"] = json!(dir);
            write_sidecar(&cli.sidecar, dir.join("split.config.json"), "dataset split", seed, args)?;
            let train = manifest.entries_in(dataset::Split::Train).count();
            print_json(&json!({ "dir": dir, "train": train, "test": manifest.entries.len() - train, "norm": manifest.norm }))
        }
        Command::Train(a) => {
            let data = or_home(&a.data, "data");
            let out = or_home(&a.out, "runs/model");
            let mut config = match &a.config {
                Some(p) => serde_json::from_str(&fs::read_to_string(p)?)?,
                None if a.full_scale => ModelConfig::full_scale(),
                None => ModelConfig::default(),
            };
            if a.skip {
                config.skip = true;
            }
            if let Some(e) = a.epochs {
                config.epochs = e;
            }
            if let Some(lr) = a.lr {
                config.lr = lr;
            }
            config.validate()?;
            let manifest = DatasetManifest::load(&data)?;
            if manifest.entries_in(dataset::Split::Train).next().is_none() {
                return Err(CliError::user("dataset", "dataset has no TRAIN entries; run `dataset split` first"));
            }
            fs::create_dir_all(&out)?;
            let mut args = serde_json::to_value(&a)?;
            args["data"] = json!(data);
            args["out"] = json!(out);
            args["model"] = serde_json::to_value(&config)?;
            write_sidecar(&cli.sidecar, out.join("train.config.json"), "train", seed, args)?;
            let opts = TrainOptions {
                seed,
                windows_per_clip: a.windows_per_clip,
                val_fraction: a.val_fraction,
                checkpoint: Some(out.join(MODEL_CHECKPOINT)),
                history: Some(out.join("history.jsonl")),
            };
            let outcome = train(&manifest, &data, &config, &opts)?;
            save_checkpoint(&outcome.params, &out.join(MODEL_CHECKPOINT))?;
            let info = ModelInfo {
                config,
                norm: outcome.norm,
                best_epoch: outcome.best_epoch,
                seed,
            };
            fs::write(out.join(MODEL_INFO), serde_json::to_string_pretty(&info)?)?;
            let best = &outcome.history[outcome.best_epoch];
            print_json(&json!({ "model": out, "best_epoch": outcome.best_epoch, "top1": best.top1, "top3": best.top3 }))
        }
        Command::Eval(a) => {
            let data = or_home(&a.data, "data");
            let model = or_home(&a.model, "runs/model");
            let reports = a.reports.clone().unwrap_or_else(|| model.join("report"));
            let (net, norm) = load_model(&model)?;
            let manifest = DatasetManifest::load(&data)?;
            let report = eval::evaluate_entries(manifest.entries_in(dataset::Split::Test), &data, &net, &norm)?;
            report.save(&reports)?;
            let args = json!({ "data": data, "model": model, "reports": reports });
            write_sidecar(&cli.sidecar, reports.join("eval.config.json"), "eval", seed, args)?;
            print_json(&json!({
                "reports": reports,
                "accuracy": report.overall_accuracy,
                "probability": report.overall_probability,
                "time": report.overall_time,
            }))
        }
        Command::Compare(a) => {
            let read = |p: &Path| -> Result<MetricsReport, CliError> { Ok(serde_json::from_str(&fs::read_to_string(p)?)?) };
            let trade = compare_variants(&read(&a.first)?, &read(&a.second)?)?;
            let default = a.second.with_extension("compare.config.json");
            write_sidecar(&cli.sidecar, default, "compare", seed, serde_json::to_value(&a)?)?;
            print_json(&trade)
        }
        Command::Infer(a) => {
            let model = or_home(&a.model, "runs/model");
            let (net, mut norm) = load_model(&model)?;
            if let Some(d) = &a.data {
                let m = DatasetManifest::load(d)?;
                norm = match m.norm {
                    Some(n) => n,
                    None => dataset::compute_norm_stats(&m, d)?,
                };
            }
            let clip = VideoClip::load(&a.clip)?;
            let p = eval::predict(&clip, &net, &norm)?;
            let mut args = serde_json::to_value(&a)?;
            args["model"] = json!(model);
            write_sidecar(&cli.sidecar, a.clip.with_extension("infer.config.json"), "infer", seed, args)?;
            print_json(&json!({
                "predicted": p.predicted,
                "probability": p.probability_of(p.predicted),
                "probabilities": rrcomm::dsl::MessageId::ALL
                    .iter()
                    .zip(&p.probabilities)
                    .map(|(m, v)| (m.name().to_string(), json!(v)))
                    .collect::<serde_json::Map<_, _>>(),
                "inference_time": p.inference_time,
            }))
        }
        Command::Study(StudyCommand::Content(a)) => {
            let out = or_home(&a.out, "study/content");
            let content = StudyContent::generate(&library(&a.library)?, &out, seed, a.fps, [a.height, a.width])?;
            content.check()?;
            let mut args = serde_json::to_value(&a)?;
            args["out"] = json!(out);
            write_sidecar(&cli.sidecar, out.join("content.config.json"), "study content", seed, args)?;
            print_json(&json!({ "content": out, "clips": 3 * rrcomm::dsl::MessageId::COUNT }))
        }
        Command::Study(StudyCommand::Serve(a)) => {
            let (content_dir, log) = study_paths(&a.paths);
            let content = StudyContent::load(&content_dir)?;
            content.check()?;
            let study = Study::open(content, &log)?;
            let args = json!({ "content": content_dir, "log": log, "addr": a.addr });
            write_sidecar(&cli.sidecar, log.with_extension("serve.config.json"), "study serve", seed, args)?;
            server::serve(study, &a.addr, seed)
        }
        Command::Study(StudyCommand::Report(a)) => {
            let (content_dir, log) = study_paths(&a);
            if !log.exists() {
                return Err(CliError::env("io", format!("no study log at {}", log.display())));
            }
            let study = Study::open(StudyContent::new(&content_dir, []), &log)?;
            let report = study.report()?;
            let args = json!({ "content": content_dir, "log": log });
            write_sidecar(&cli.sidecar, log.with_extension("report.config.json"), "study report", seed, args)?;
            print_json(&report)
        }
    }
}

fn study_paths(p: &StudyPaths) -> (PathBuf, PathBuf) {
    (or_home(&p.content, "study/content"), or_home(&p.log, "study/log.jsonl"))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.code as u8)
        }
    }
}
