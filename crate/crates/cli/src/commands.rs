//! Subcommand definitions and their runners.

use std::fs;
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use posekit_core::classifier::{Extractor, LossKind};
use posekit_core::cluster::{build_pose_classes, membership_histogram, membership_sets, PoseClassSet};
use posekit_core::data::synth::generate_synthetic;
use posekit_core::data::{flip_augment, load_dataset, parse_pts, save_dataset, serialize_pts, Dataset};
use posekit_core::eval::{
    bench_head_scaling, head_scaling_table, interactive_eval, interactive_table, interactive_tolerance, loss_scaling_experiment,
    loss_scaling_table, pipeline_eval, pipeline_table, ClickPolicy,
};
use posekit_core::model::{load_model, save_model, train_model, FrameSource, Model};
use posekit_core::shape::Shape;
use posekit_core::temporal::lowpass_smooth;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::config::{require, BenchKind, EvalPolicy, RunConfig};
use crate::exit::UsageError;
use crate::server::{self, AppState};

/// Environment variable holding the default model path.
pub const MODEL_ENV: &str = "POSEKIT_MODEL";

#[derive(Debug, Parser)]
#[command(name = "posekit", version, about = "Landmark alignment as large-scale pose classification")]
pub struct Cli {
    /// TOML config file; flags override its values
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic landmark dataset
    GenData(GenDataArgs),
    /// Cluster training shapes into pose classes
    Cluster(ClusterArgs),
    /// Train a model (classes, classifier head, regressors)
    Train(TrainArgs),
    /// Evaluate a model on a dataset
    Eval(EvalArgs),
    /// Scaling experiments
    Bench(BenchArgs),
    /// Low-pass smooth a directory of .pts frames
    Smooth(SmoothArgs),
    /// Serve the annotation HTTP API
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// output dataset directory
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub n_examples: Option<usize>,
    #[arg(long)]
    pub n_videos: Option<usize>,
    #[arg(long)]
    pub frames_per_video: Option<usize>,
    #[arg(long)]
    pub n_landmarks: Option<usize>,
    #[arg(long)]
    pub image_size: Option<usize>,
    #[arg(long)]
    pub noise_level: Option<f64>,
    #[arg(long)]
    pub occlusion_prob: Option<f64>,
}

#[derive(Debug, Args)]
pub struct ClusterArgs {
    /// dataset directory
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// output JSON with centers, bandwidths and the membership histogram
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// validation dataset used to pick the cascade ridge strength
    #[arg(long)]
    pub val: Option<PathBuf>,
    /// output model file
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// JSON training report
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// add mirrored copies of the training records
    #[arg(long)]
    pub flip: bool,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub tau: Option<f64>,
    /// softmax, soft_target or multi_label
    #[arg(long, value_parser = parse_serde::<LossKind>)]
    pub loss: Option<LossKind>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, env = MODEL_ENV)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub policy: Option<EvalPolicy>,
    /// directory for the .tsv table and its .json twin
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// click tolerance in canonical units
    #[arg(long)]
    pub tolerance: Option<f64>,
    /// clicked landmark for the 1pt policy
    #[arg(long)]
    pub landmark: Option<usize>,
    /// smoothing window of the pipeline report
    #[arg(long)]
    pub window: Option<usize>,
    /// ground_truth or detection
    #[arg(long, value_parser = parse_serde::<FrameSource>)]
    pub frame: Option<FrameSource>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, value_enum)]
    pub kind: Option<BenchKind>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// comma separated class counts
    #[arg(long, value_delimiter = ',')]
    pub k_grid: Option<Vec<usize>>,
    #[arg(long)]
    pub repetitions: Option<usize>,
    /// training data for the loss experiment
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub val: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SmoothArgs {
    /// directory of .pts files, one per frame in name order
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub window: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, env = MODEL_ENV)]
    pub model: Option<PathBuf>,
    /// dataset whose records and videos sessions refer to
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub host: Option<String>,
    #[arg(long)]
    pub port: Option<u16>,
}

fn parse_serde<T: DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

fn load_data(path: &Path) -> anyhow::Result<Dataset> {
    load_dataset(path).with_context(|| format!("loading dataset {}", path.display()))
}

fn load_model_at(path: &Path) -> anyhow::Result<Model> {
    load_model(path).with_context(|| format!("loading model {}", path.display()))
}

fn check_schema(model: &Model, data: &Dataset) -> anyhow::Result<()> {
    if model.n_points() != data.schema.n_points {
        return Err(posekit_core::Error::Schema(format!(
            "model has {} landmarks, dataset {}",
            model.n_points(),
            data.schema.n_points
        ))
        .into());
    }
    Ok(())
}

fn write_file(path: &Path, contents: &[u8]) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn to_json<T: Serialize>(v: &T) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(v).expect("report serializes");
    s.push('\n');
    s.into_bytes()
}

/// Prints a table and, with `out_dir`, writes `<name>.tsv` and `<name>.json`.
fn emit<T: Serialize>(out: &mut dyn Write, out_dir: Option<&Path>, name: &str, table: &str, data: &T) -> anyhow::Result<()> {
    out.write_all(table.as_bytes())?;
    if let Some(dir) = out_dir {
        write_file(&dir.join(format!("{name}.tsv")), table.as_bytes())?;
        write_file(&dir.join(format!("{name}.json")), &to_json(data))?;
    }
    Ok(())
}

pub fn run(cli: Cli, out: &mut dyn Write) -> anyhow::Result<()> {
    let cfg = RunConfig::load_opt(cli.config.as_deref())?;
    match cli.command {
        Command::GenData(a) => gen_data(a, cfg, out),
        Command::Cluster(a) => cluster(a, cfg, out),
        Command::Train(a) => train(a, cfg, out),
        Command::Eval(a) => eval(a, cfg, out),
        Command::Bench(a) => bench(a, cfg, out),
        Command::Smooth(a) => smooth(a, cfg, out),
        Command::Serve(a) => serve(a, cfg),
    }
}

fn gen_data(a: GenDataArgs, cfg: RunConfig, out: &mut dyn Write) -> anyhow::Result<()> {
    let dir = require(a.out.or(cfg.gen_data.out), "--out")?;
    let mut s = cfg.gen_data.synth;
    s.seed = a.seed.unwrap_or(s.seed);
    s.n_examples = a.n_examples.unwrap_or(s.n_examples);
    s.n_videos = a.n_videos.unwrap_or(s.n_videos);
    s.frames_per_video = a.frames_per_video.unwrap_or(s.frames_per_video);
    s.n_landmarks = a.n_landmarks.unwrap_or(s.n_landmarks);
    s.image_size = a.image_size.unwrap_or(s.image_size);
    s.noise_level = a.noise_level.unwrap_or(s.noise_level);
    s.occlusion_prob = a.occlusion_prob.unwrap_or(s.occlusion_prob);
    let data = generate_synthetic(&s)?;
    save_dataset(&data, &dir).with_context(|| format!("writing dataset {}", dir.display()))?;
    writeln!(out, "wrote {} records to {}", data.len(), dir.display())?;
    Ok(())
}

#[derive(Serialize)]
struct ClusterReport {
    classes: PoseClassSet,
    tau: f64,
    /// membership set size -> number of examples
    membership_histogram: std::collections::BTreeMap<usize, usize>,
    sse_history: Vec<f64>,
}

fn cluster(a: ClusterArgs, cfg: RunConfig, out: &mut dyn Write) -> anyhow::Result<()> {
    let c = cfg.cluster;
    let data = load_data(&require(a.data.or(c.data), "--data")?)?;
    let out_path = require(a.out.or(c.out), "--out")?;
    let shapes = data.shapes()?;
    let k = a.k.or(c.k).unwrap_or(shapes.len());
    let tau = a.tau.unwrap_or(c.tau);
    let (classes, km) = build_pose_classes(&shapes, k, a.seed.unwrap_or(c.seed))?;
    let mem = membership_sets(&classes, &shapes, tau)?;
    let hist = membership_histogram(&mem);
    let mut table = String::from("membership_size\texamples\n");
    for (size, n) in &hist {
        table.push_str(&format!("{size}\t{n}\n"));
    }
    out.write_all(table.as_bytes())?;
    let report = ClusterReport {
        classes,
        tau,
        membership_histogram: hist,
        sse_history: km.sse_history,
    };
    write_file(&out_path, &to_json(&report))
}

fn train(a: TrainArgs, cfg: RunConfig, out: &mut dyn Write) -> anyhow::Result<()> {
    let t = cfg.train;
    let data_path = require(a.data.or(t.data), "--data")?;
    let out_path = require(a.out.or(t.out), "--out")?;
    let mut data = load_data(&data_path)?;
    if a.flip || t.flip {
        data = flip_augment(&data);
    }
    let val = a.val.or(t.val).map(|p| load_data(&p)).transpose()?;
    let mut mc = t.model;
    mc.k = a.k.or(mc.k);
    mc.tau = a.tau.unwrap_or(mc.tau);
    mc.train.loss = a.loss.unwrap_or(mc.train.loss);
    mc.train.epochs = a.epochs.unwrap_or(mc.train.epochs);
    if let Some(seed) = a.seed {
        mc.seed = seed;
        mc.train.seed = seed;
    }
    let (model, report) = train_model(&data, val.as_ref(), &mc).context("training")?;
    save_model(&model, &out_path).with_context(|| format!("saving model {}", out_path.display()))?;
    if let Some(p) = a.report.or(t.report) {
        write_file(&p, &to_json(&report))?;
    }
    let last = report.epochs.last();
    writeln!(
        out,
        "trained K={} on M={} examples; final loss {:.6}; model {}",
        report.k,
        report.m,
        last.map_or(f64::NAN, |e| e.loss),
        out_path.display()
    )?;
    Ok(())
}

fn eval(a: EvalArgs, cfg: RunConfig, out: &mut dyn Write) -> anyhow::Result<()> {
    let e = cfg.eval;
    let model = load_model_at(&require(a.model.or(e.model), "--model")?)?;
    let data = load_data(&require(a.data.or(e.data), "--data")?)?;
    check_schema(&model, &data)?;
    let out_dir = a.out_dir.or(e.out_dir);
    match a.policy.unwrap_or(e.policy) {
        EvalPolicy::Pipeline => {
            let mut pc = e.pipeline;
            pc.window = a.window.unwrap_or(pc.window);
            pc.frame = a.frame.unwrap_or(pc.frame);
            let rows = pipeline_eval(&model, &data, &pc)?;
            emit(out, out_dir.as_deref(), "pipeline", &pipeline_table(&rows), &rows)
        }
        policy => {
            // clicks are simulated in the ground-truth frame
            let posts: Vec<_> = model
                .predict_dataset(&data, FrameSource::GroundTruth, false)?
                .into_iter()
                .map(|(_, p)| p)
                .collect();
            let shapes = data.shapes()?;
            let tol = a.tolerance.or(e.tolerance).unwrap_or_else(|| interactive_tolerance(model.tau()));
            let landmark = a.landmark.or(e.landmark).unwrap_or(data.schema.nose_index);
            if landmark >= model.n_points() {
                return Err(UsageError(format!("landmark {landmark} out of range for {} points", model.n_points())).into());
            }
            let policies: &[ClickPolicy] = match policy {
                EvalPolicy::None => &[ClickPolicy::None],
                _ => &[ClickPolicy::None, ClickPolicy::FixedPoint(landmark), ClickPolicy::BestPoint],
            };
            let rows = policies
                .iter()
                .map(|&p| interactive_eval(&posts, &shapes, &model.classes, tol, p))
                .collect::<posekit_core::Result<Vec<_>>>()?;
            emit(out, out_dir.as_deref(), "interactive", &interactive_table(&rows), &rows)
        }
    }
}

#[derive(Serialize)]
struct Machine {
    os: &'static str,
    arch: &'static str,
    threads: usize,
}

#[derive(Serialize)]
struct HeadBenchReport<T> {
    machine: Machine,
    rows: Vec<T>,
}

fn bench(a: BenchArgs, cfg: RunConfig, out: &mut dyn Write) -> anyhow::Result<()> {
    let b = cfg.bench;
    let out_dir = a.out_dir.or(b.out_dir);
    match a.kind.unwrap_or(b.kind) {
        BenchKind::Head => {
            let h = b.head;
            let extractor = Extractor::new(h.extractor, h.patch.len(), h.seed)?;
            let k_grid = a.k_grid.unwrap_or(h.k_grid);
            let rows = bench_head_scaling(&extractor, &k_grid, a.repetitions.unwrap_or(h.repetitions), h.seed)?;
            let report = HeadBenchReport {
                machine: Machine {
                    os: std::env::consts::OS,
                    arch: std::env::consts::ARCH,
                    threads: std::thread::available_parallelism().map_or(1, |n| n.get()),
                },
                rows,
            };
            emit(out, out_dir.as_deref(), "head_scaling", &head_scaling_table(&report.rows), &report)
        }
        BenchKind::Loss => {
            let l = b.loss;
            let mut train = load_data(&require(a.data.or(l.data), "--data")?)?;
            if l.flip {
                train = flip_augment(&train);
            }
            let val = load_data(&require(a.val.or(l.val), "--val")?)?;
            let mut sc = l.scaling;
            if let Some(k) = a.k_grid {
                sc.k_grid = k;
            }
            let rows = loss_scaling_experiment(&train, &val, &sc)?;
            emit(out, out_dir.as_deref(), "loss_scaling", &loss_scaling_table(&rows), &rows)
        }
    }
}

fn smooth(a: SmoothArgs, cfg: RunConfig, out: &mut dyn Write) -> anyhow::Result<()> {
    let s = cfg.smooth;
    let input = require(a.input.or(s.input), "--input")?;
    let out_dir = require(a.out.or(s.out), "--out")?;
    let window = a.window.unwrap_or(s.window);
    let mut files: Vec<PathBuf> = fs::read_dir(&input)
        .with_context(|| format!("reading {}", input.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<_, _>>()
        .with_context(|| format!("reading {}", input.display()))?;
    files.retain(|p| p.extension().is_some_and(|e| e == "pts"));
    files.sort();
    if files.is_empty() {
        return Err(posekit_core::Error::NotFound(format!("no .pts files in {}", input.display())).into());
    }
    let shapes = files
        .iter()
        .map(|p| {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            let pts = parse_pts(&text).with_context(|| format!("parsing {}", p.display()))?;
            Ok(Shape::from_points(&pts)?)
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    if let Some(i) = shapes.iter().position(|s| s.n_points() != shapes[0].n_points()) {
        return Err(posekit_core::Error::Schema(format!(
            "{} has {} points, {} has {}",
            files[i].display(),
            shapes[i].n_points(),
            files[0].display(),
            shapes[0].n_points()
        ))
        .into());
    }
    let smoothed = lowpass_smooth(&shapes, window)?;
    for (p, s) in files.iter().zip(&smoothed) {
        let pts: Vec<_> = s.points().collect();
        write_file(&out_dir.join(p.file_name().expect("listed file has a name")), serialize_pts(&pts).as_bytes())?;
    }
    writeln!(out, "smoothed {} frames with window {window} into {}", files.len(), out_dir.display())?;
    Ok(())
}

fn serve(a: ServeArgs, cfg: RunConfig) -> anyhow::Result<()> {
    let s = cfg.serve;
    let model = load_model_at(&require(a.model.or(s.model), "--model")?)?;
    let data = load_data(&require(a.data.or(s.data), "--data")?)?;
    check_schema(&model, &data)?;
    let host = a.host.unwrap_or(s.host);
    let port = a.port.unwrap_or(s.port);
    let addr: SocketAddr = format!("{host}:{port}")
        .parse()
        .map_err(|e| UsageError(format!("bad listen address {host}:{port}: {e}")))?;
    let state = AppState::new(model, data, s.frame, s.refine);
    let rt = tokio::runtime::Runtime::new().context("starting runtime")?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .with_context(|| format!("binding {addr}"))?;
        server::serve(listener, state).await.context("serving")
    })
}
