//! `predloc`: train, localize, evaluate, synthesize and inspect.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 data error,
//! 4 numeric failure.

mod manifest;

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use predloc::checkpoint::{load_checkpoint, model_from_records, read_records, save_checkpoint};
use predloc::engine::{Model, StepReport, Trainer, VideoStream};
use predloc::eval::{evaluate, pool_video_feature, EvalOptions, GroundTruth, RankMode};
use predloc::io::{synth_sequence, write_sequence, FormatError, SequenceReader, SynthSpec};
use predloc::localizer::LocalizationRecord;
use predloc::{Error, RunConfig};

#[derive(Parser)]
#[command(name = "predloc", version, about = "Streaming self-supervised actor localization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on every sequence of a manifest, once, in order.
    Train(TrainArgs),
    /// Localize the actor in every frame with a trained checkpoint.
    Localize(LocalizeArgs),
    /// Score localization output and pooled features against annotations.
    Evaluate(EvaluateArgs),
    /// Write a synthetic sequence.
    Synth(SynthArgs),
    /// Summarize a sequence or checkpoint file.
    Inspect(InspectArgs),
}

#[derive(Args, Debug, Default)]
struct ConfigArgs {
    /// JSON file with configuration overrides; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    hidden_dim: Option<usize>,
    #[arg(long)]
    attention_dim: Option<usize>,
    /// Attended grid cells per frame.
    #[arg(long = "K")]
    top_k: Option<usize>,
    /// Boxes per frame.
    #[arg(long = "N")]
    boxes_per_frame: Option<usize>,
    #[arg(long)]
    lambda1: Option<f64>,
    #[arg(long)]
    lambda2: Option<f64>,
    #[arg(long)]
    lr0: Option<f64>,
    /// Single-layer prediction stack.
    #[arg(long)]
    no_hierarchy: bool,
    /// Drop the center and size terms of the actor loss.
    #[arg(long)]
    no_geometry_loss: bool,
    /// Drop the feature term of the actor loss.
    #[arg(long)]
    no_feature_loss: bool,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Checkpoint to write.
    #[arg(long)]
    out: PathBuf,
    /// JSONL metrics log, one row per update.
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Only train on manifest entries tagged with this domain.
    #[arg(long)]
    train_domain: Option<String>,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args, Debug)]
struct LocalizeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// JSONL output; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// JSONL file receiving the max-pooled actor feature of each video.
    #[arg(long)]
    features_out: Option<PathBuf>,
    /// Keep learning while localizing (each video starts from the checkpoint).
    #[arg(long)]
    continual: bool,
    /// Only localize manifest entries tagged with this domain.
    #[arg(long)]
    eval_domain: Option<String>,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum RankArg {
    Margin,
    TubeIou,
    Unranked,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    /// Localization JSONL.
    #[arg(long)]
    predictions: PathBuf,
    /// Manifest of annotated sequences.
    #[arg(long)]
    manifest: PathBuf,
    /// Pooled feature JSONL from `localize --features-out`.
    #[arg(long)]
    features: Option<PathBuf>,
    /// Cluster count; defaults to the number of annotated classes.
    #[arg(long)]
    k: Option<usize>,
    /// Also scan k over k_gt..=3 k_gt and report the best.
    #[arg(long)]
    scan_k: bool,
    #[arg(long, value_enum, default_value = "margin")]
    rank: RankArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    eval_domain: Option<String>,
    /// Report JSON; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Per-video rows as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "synth")]
    video_id: String,
    #[arg(long)]
    label: Option<i32>,
    #[arg(long, default_value_t = 8)]
    width: usize,
    #[arg(long, default_value_t = 8)]
    height: usize,
    #[arg(long, default_value_t = 16)]
    channels: usize,
    #[arg(long, default_value_t = 200)]
    frames: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    no_actor: bool,
    #[arg(long, default_value_t = 5)]
    distractors: usize,
    #[arg(long, default_value_t = 0.05)]
    move_prob: f64,
    #[arg(long, default_value_t = 1.0)]
    actor_noise: f64,
}

#[derive(Args, Debug)]
struct InspectArgs {
    path: PathBuf,
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }

    fn data(message: impl Into<String>) -> Self {
        Self {
            code: 3,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::InvalidArgument(_) => 2,
            Error::Format(_) | Error::Io(_) | Error::Shape { .. } => 3,
            Error::NonFinite(_) | Error::StaleCache(_) => 4,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl From<FormatError> for Failure {
    fn from(e: FormatError) -> Self {
        Error::from(e).into()
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Error::from(e).into()
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => train(a),
        Command::Localize(a) => localize(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Synth(a) => synth(a),
        Command::Inspect(a) => inspect(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

impl ConfigArgs {
    fn resolve(&self) -> CliResult<RunConfig> {
        let mut c = match &self.config {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Failure::usage(format!("cannot read config {}: {e}", p.display())))?;
                serde_json::from_str(&text).map_err(|e| Failure::usage(format!("config {}: {e}", p.display())))?
            }
            None => RunConfig::default(),
        };
        macro_rules! set {
            ($($field:ident),*) => {$(if let Some(v) = self.$field { c.$field = v; })*};
        }
        set!(seed, layers, hidden_dim, attention_dim, top_k, boxes_per_frame, lambda1, lambda2, lr0);
        if self.no_hierarchy {
            c.layers = 1;
        }
        if self.no_geometry_loss {
            c.geometry_loss = false;
        }
        if self.no_feature_loss {
            c.feature_loss = false;
        }
        c.validate()?;
        Ok(c)
    }
}

fn echo<T: Serialize>(label: &str, value: &T) {
    eprintln!("{label}: {}", serde_json::to_string(value).expect("serializable"));
}

/// Prints a document to stdout; a closed pipe is not an error.
fn print_stdout(text: &str) -> CliResult {
    let mut out = io::stdout().lock();
    match writeln!(out, "{text}").and_then(|_| out.flush()) {
        Err(e) if e.kind() != io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Failure::data(format!("cannot create {}: {e}", path.display())))
}

fn load_manifest(path: &Path, domain: Option<&str>) -> CliResult<Vec<manifest::Entry>> {
    let entries = manifest::load(path, domain).map_err(Failure::usage)?;
    if entries.is_empty() {
        return Err(Failure::usage(format!("manifest {} lists no sequences", path.display())));
    }
    Ok(entries)
}

#[derive(Serialize)]
struct MetricsRow<'a> {
    video_id: &'a str,
    frame: usize,
    event_scalar: f64,
    feature: f64,
    center: f64,
    geometry: f64,
    total: f64,
    lr: f64,
    wall_time_ms: f64,
    event_map: &'a [f64],
}

fn metrics_row<'a>(video_id: &'a str, r: &'a StepReport) -> MetricsRow<'a> {
    MetricsRow {
        video_id,
        frame: r.frame_index,
        event_scalar: r.loss.event_scalar,
        feature: r.loss.object_feature,
        center: r.loss.object_center,
        geometry: r.loss.object_geometry,
        total: r.loss.total,
        lr: r.lr,
        wall_time_ms: r.elapsed_ms,
        event_map: &r.loss.event_map,
    }
}

fn train(args: TrainArgs) -> CliResult {
    let config = args.config.resolve()?;
    let entries = load_manifest(&args.manifest, args.train_domain.as_deref())?;
    echo("config", &config);

    let mut metrics = args.metrics.as_deref().map(create).transpose()?;
    let mut trainer: Option<Trainer> = None;
    let mut skipped = 0usize;
    for entry in &entries {
        let mut reader = match SequenceReader::open(&entry.path) {
            Ok(r) => r,
            Err(e) => {
                eprintln!("warning: skipping {}: {e}", entry.path.display());
                skipped += 1;
                continue;
            }
        };
        let header = reader.header().clone();
        let (w, h, d) = header.dims;
        config.validate_for_grid(w, h)?;
        let t = match trainer.as_mut() {
            Some(t) => t,
            None => trainer.insert(Trainer::new(Model::init(d, &config)?, config.clone())?),
        };
        if t.model().feature_dim() != d {
            eprintln!(
                "warning: skipping {}: feature width {d} differs from the model's {}",
                entry.path.display(),
                t.model().feature_dim()
            );
            skipped += 1;
            continue;
        }
        let mut stream = VideoStream::new(t.model(), header.dims, &config)?;
        let mut steps = 0usize;
        loop {
            let frame = match reader.next_frame() {
                Ok(Some(f)) => f,
                Ok(None) => break,
                Err(e) => {
                    eprintln!("warning: {} ends early after {steps} updates: {e}", entry.path.display());
                    skipped += 1;
                    break;
                }
            };
            if let Some(report) = stream.push_train(t, frame)? {
                steps += 1;
                if let Some(m) = metrics.as_mut() {
                    serde_json::to_writer(&mut *m, &metrics_row(&header.video_id, &report))
                        .map_err(|e| Failure::data(e.to_string()))?;
                    m.write_all(b"\n")?;
                }
            }
        }
        eprintln!("trained on {}: {steps} updates", header.video_id);
    }
    if let Some(m) = metrics.as_mut() {
        m.flush()?;
    }
    let trainer = trainer.ok_or_else(|| Failure::data("no readable sequence in the manifest"))?;
    save_checkpoint(trainer.model(), &args.out)?;
    eprintln!("wrote {} ({} updates)", args.out.display(), trainer.updates());
    if skipped > 0 {
        return Err(Failure::data(format!("{skipped} sequence(s) skipped or incomplete")));
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct FeatureRow {
    video_id: String,
    feature: Vec<f64>,
}

struct VideoOutput {
    video_id: String,
    records: Vec<LocalizationRecord>,
    feature: Option<Vec<f64>>,
}

fn localize_one(model: &Model, config: &RunConfig, path: &Path, continual: bool) -> CliResult<VideoOutput> {
    let mut reader = SequenceReader::open(path)?;
    let header = reader.header().clone();
    let (w, h, d) = header.dims;
    if d != model.feature_dim() {
        return Err(Failure::data(format!(
            "{}: sequence dims {w}x{h}x{d} do not match the checkpoint's feature width {}",
            path.display(),
            model.feature_dim()
        )));
    }
    config.validate_for_grid(w, h)?;
    let mut stream = VideoStream::new(model, header.dims, config)?;
    let mut trainer = if continual {
        Some(Trainer::new(model.clone(), config.clone())?)
    } else {
        None
    };
    let mut reports = Vec::new();
    let mut last_index = None;
    while let Some(frame) = reader.next_frame()? {
        last_index = Some(frame.index);
        let report = match trainer.as_mut() {
            Some(t) => stream.push_train(t, frame)?,
            None => stream.push_frozen(model, config, frame)?,
        };
        reports.extend(report);
    }
    reader.finish()?;

    let mut records: Vec<LocalizationRecord> = reports
        .iter()
        .map(|r| LocalizationRecord::new(&header.video_id, &r.localization))
        .collect();
    // The final frame has no successor to predict; it inherits the last result.
    if let (Some(last), Some(index)) = (records.last().cloned(), last_index) {
        records.push(LocalizationRecord { frame: index, ..last });
    }
    let feature = if reports.is_empty() {
        None
    } else {
        let frames: Vec<Vec<f64>> = reports.iter().map(|r| r.actor_feature.clone()).collect();
        Some(pool_video_feature(&frames)?)
    };
    Ok(VideoOutput {
        video_id: header.video_id,
        records,
        feature,
    })
}

fn localize(args: LocalizeArgs) -> CliResult {
    let mut config = args.config.resolve()?;
    let entries = load_manifest(&args.manifest, args.eval_domain.as_deref())?;
    let model = load_checkpoint(&args.checkpoint)?;
    config.layers = model.stack.depth();
    config.hidden_dim = model.stack.hidden_dim();
    config.attention_dim = model.attention.attn_dim();
    echo("config", &config);
    eprintln!("mode: {}", if args.continual { "continual" } else { "frozen" });

    let results: Vec<(usize, CliResult<VideoOutput>)> = entries
        .par_iter()
        .enumerate()
        .map(|(i, e)| (i, localize_one(&model, &config, &e.path, args.continual)))
        .collect();

    let mut outputs = Vec::new();
    let mut first_failure = None;
    for (i, r) in results {
        match r {
            Ok(o) => outputs.push(o),
            Err(f) => {
                eprintln!("error: {}: {}", entries[i].path.display(), f.message);
                first_failure.get_or_insert(f);
            }
        }
    }
    outputs.sort_by(|a, b| a.video_id.cmp(&b.video_id));

    let mut out: Box<dyn Write> = match &args.out {
        Some(p) => Box::new(create(p)?),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    };
    for o in &outputs {
        for r in &o.records {
            serde_json::to_writer(&mut out, r).map_err(|e| Failure::data(e.to_string()))?;
            out.write_all(b"\n")?;
        }
    }
    out.flush()?;
    if let Some(p) = &args.features_out {
        let mut f = create(p)?;
        for o in &outputs {
            if let Some(feature) = &o.feature {
                let row = FeatureRow {
                    video_id: o.video_id.clone(),
                    feature: feature.clone(),
                };
                serde_json::to_writer(&mut f, &row).map_err(|e| Failure::data(e.to_string()))?;
                f.write_all(b"\n")?;
            }
        }
        f.flush()?;
    }
    match first_failure {
        Some(f) => Err(f),
        None => Ok(()),
    }
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<Vec<T>> {
    let file = File::open(path).map_err(|e| Failure::data(format!("cannot open {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (no, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Failure::data(format!("{} line {}: {e}", path.display(), no + 1)))?,
        );
    }
    Ok(out)
}

fn read_ground_truth(path: &Path) -> CliResult<GroundTruth> {
    let mut reader = SequenceReader::open(path)?;
    let header = reader.header().clone();
    let mut boxes = BTreeMap::new();
    while let Some(frame) = reader.next_frame()? {
        if !frame.gt_boxes.is_empty() {
            boxes.insert(frame.index, frame.gt_boxes);
        }
    }
    Ok(GroundTruth {
        video_id: header.video_id,
        label: header.label,
        boxes,
    })
}

fn evaluate_cmd(args: EvaluateArgs) -> CliResult {
    let options = EvalOptions {
        k: args.k,
        scan_k: args.scan_k,
        seed: args.seed,
        rank_mode: match args.rank {
            RankArg::Margin => RankMode::Margin,
            RankArg::TubeIou => RankMode::TubeIou,
            RankArg::Unranked => RankMode::Unranked,
        },
    };
    if args.k == Some(0) {
        return Err(Failure::usage("k must be at least 1"));
    }
    let entries = load_manifest(&args.manifest, args.eval_domain.as_deref())?;
    echo("options", &options);

    let predictions: Vec<LocalizationRecord> = read_jsonl(&args.predictions)?;
    let ground_truth = entries
        .par_iter()
        .map(|e| read_ground_truth(&e.path))
        .collect::<CliResult<Vec<_>>>()?;
    let features = match &args.features {
        Some(p) => Some(
            read_jsonl::<FeatureRow>(p)?
                .into_iter()
                .map(|r| (r.video_id, r.feature))
                .collect::<BTreeMap<_, _>>(),
        ),
        None => None,
    };
    let report = evaluate(&predictions, &ground_truth, features.as_ref(), &options)?;
    if report.warnings > 0 {
        eprintln!(
            "warning: {} issue(s): missing ground truth {:?}, missing predictions {:?}, missing features {:?}",
            report.warnings, report.missing_ground_truth, report.missing_predictions, report.missing_features
        );
    }
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    match &args.out {
        Some(p) => {
            let mut f = create(p)?;
            f.write_all(json.as_bytes())?;
            f.write_all(b"\n")?;
            f.flush()?;
        }
        None => print_stdout(&json)?,
    }
    if let Some(p) = &args.csv {
        std::fs::write(p, report.to_csv())?;
    }
    Ok(())
}

fn synth(args: SynthArgs) -> CliResult {
    if args.width < 2 || args.height < 2 || args.channels == 0 {
        return Err(Failure::usage("synthetic grid must be at least 2x2 with at least one channel"));
    }
    if !(0.0..=1.0).contains(&args.move_prob) || !(args.actor_noise >= 0.0) {
        return Err(Failure::usage("move_prob must lie in [0, 1] and actor_noise must be non-negative"));
    }
    let spec = SynthSpec {
        video_id: args.video_id,
        label: args.label,
        width: args.width,
        height: args.height,
        channels: args.channels,
        frames: args.frames,
        actor: !args.no_actor,
        distractors: args.distractors,
        move_prob: args.move_prob,
        actor_noise: args.actor_noise,
        ..SynthSpec::default()
    };
    eprintln!("spec: {spec:?}, seed {}", args.seed);
    let seq = synth_sequence(&spec, args.seed);
    write_sequence(&seq, &args.out)?;
    Ok(())
}

#[derive(Serialize)]
struct SequenceSummary {
    kind: &'static str,
    video_id: String,
    label: Option<i32>,
    dims: (usize, usize, usize),
    frames: usize,
    proposals: usize,
    annotated_frames: usize,
}

#[derive(Serialize)]
struct CheckpointSummary {
    kind: &'static str,
    feature_dim: Option<usize>,
    layers: Option<usize>,
    hidden_dim: Option<usize>,
    attention_dim: Option<usize>,
    parameters: usize,
    tensors: Vec<(String, Vec<usize>)>,
}

fn inspect(args: InspectArgs) -> CliResult {
    let mut magic = [0u8; 5];
    File::open(&args.path)?
        .read_exact(&mut magic)
        .map_err(|e| Failure::data(format!("{}: {e}", args.path.display())))?;
    let json = match &magic {
        b"PSVID" => {
            let mut reader = SequenceReader::open(&args.path)?;
            let header = reader.header().clone();
            let (mut frames, mut proposals, mut annotated) = (0, 0, 0);
            while let Some(f) = reader.next_frame()? {
                frames += 1;
                proposals += f.proposals.len();
                annotated += usize::from(!f.gt_boxes.is_empty());
            }
            reader.finish()?;
            serde_json::to_string_pretty(&SequenceSummary {
                kind: "sequence",
                video_id: header.video_id,
                label: header.label,
                dims: header.dims,
                frames,
                proposals,
                annotated_frames: annotated,
            })
        }
        b"PSTRM" => {
            let records = read_records(BufReader::new(File::open(&args.path)?))?;
            let tensors: Vec<(String, Vec<usize>)> = records.iter().map(|r| (r.name.clone(), r.shape.clone())).collect();
            let parameters = records.iter().map(|r| r.data.len()).sum();
            let model = model_from_records(records).ok();
            serde_json::to_string_pretty(&CheckpointSummary {
                kind: "checkpoint",
                feature_dim: model.as_ref().map(|m| m.feature_dim()),
                layers: model.as_ref().map(|m| m.stack.depth()),
                hidden_dim: model.as_ref().map(|m| m.stack.hidden_dim()),
                attention_dim: model.as_ref().map(|m| m.attention.attn_dim()),
                parameters,
                tensors,
            })
        }
        other => return Err(Failure::data(format!("unrecognized file magic {other:?}"))),
    }
    .expect("summary serializes");
    print_stdout(&json)
}
