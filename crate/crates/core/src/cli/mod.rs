//! Command-line front end.

mod config;
mod svg;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

pub use config::{parse_pairs, ContextMode, RunConfig};
pub use svg::line_chart;

use crate::checkpoint::load_checkpoint;
use crate::error::{Error, Result};
use crate::metrics::{score_video, MetricsAccumulator, MetricsReport, VideoScores, CSV_HEADER};
use crate::model::{model_forward, param_count, predict_labels, ModelConfig, ModelParams};
use crate::seqdata::{
    chunk_sequence, downsample, load_dataset, load_features, load_manifest, save_labels, segments_from_labels,
    synth_generate, ChunkMode, ClassMap, LabelSequence, LabeledVideo,
};
use crate::train::{fit, FitOptions, TrainHistory};

#[derive(Debug, Parser)]
#[command(name = "ltcontext", version, about = "Temporal action segmentation with long-term context attention")]
pub struct Cli {
    /// Run configuration (`key = value` lines).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the training seed (and the synthetic data seed).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Dataset manifest; overrides the configuration.
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,
    /// Extra `key=value` settings applied after the configuration file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model; writes model.ckpt, history.csv and config.txt.
    Train,
    /// Score a checkpoint; writes metrics.json and per_video.csv.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Write frame-wise label files for every video in the manifest.
    Predict {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train on chunks of varying length and evaluate on full videos.
    ContextStudy {
        #[arg(long, value_delimiter = ',')]
        fractions: Vec<f64>,
        /// fixed or video_specific
        #[arg(long)]
        mode: Option<String>,
    },
    /// Train and evaluate at several temporal downsampling rates.
    DownsampleStudy {
        #[arg(long, value_delimiter = ',')]
        rates: Vec<usize>,
    },
    /// One train/eval run per value of a model setting.
    Ablate {
        #[arg(long)]
        axis: Option<String>,
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
    },
    /// Generate a synthetic dataset.
    Synth,
}

/// Model settings that `ablate` can sweep.
pub const ABLATION_AXES: [&str; 10] = [
    "attention_mode",
    "W",
    "G",
    "overlap_windows",
    "attention_order",
    "cross_attention",
    "conv_mode",
    "N",
    "heads",
    "S",
];

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run_from_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn resolve(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let cwd = Path::new("");
    for kv in &cli.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Argument(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v.trim(), cwd)?;
    }
    if let Some(s) = cli.seed {
        cfg.train.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    }
    if let Some(m) = &cli.manifest {
        cfg.manifest = Some(m.clone());
    }
    Ok(cfg)
}

pub fn run(cli: Cli) -> Result<()> {
    let mut cfg = resolve(&cli)?;
    match cli.command {
        Command::Train => cmd_train(&cfg).map(|_| ()),
        Command::Eval { checkpoint } => {
            if checkpoint.is_some() {
                cfg.checkpoint = checkpoint;
            }
            cmd_eval(&cfg).map(|_| ())
        }
        Command::Predict { checkpoint } => {
            if checkpoint.is_some() {
                cfg.checkpoint = checkpoint;
            }
            cmd_predict(&cfg)
        }
        Command::ContextStudy { fractions, mode } => {
            if !fractions.is_empty() {
                cfg.context_fractions = fractions;
            }
            if let Some(m) = mode {
                cfg.context_mode = m.parse()?;
            }
            cmd_context_study(&cfg).map(|_| ())
        }
        Command::DownsampleStudy { rates } => {
            if !rates.is_empty() {
                cfg.downsample_rates = rates;
            }
            cmd_downsample_study(&cfg).map(|_| ())
        }
        Command::Ablate { axis, values } => {
            if axis.is_some() {
                cfg.ablate_axis = axis;
            }
            if !values.is_empty() {
                cfg.ablate_values = values;
            }
            cmd_ablate(&cfg).map(|_| ())
        }
        Command::Synth => cmd_synth(&cfg, cli.seed.unwrap_or(cfg.train.seed)).map(|_| ()),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn load_set(manifest: &Path, mapping: &Path) -> Result<(Vec<LabeledVideo>, ClassMap)> {
    let m = load_manifest(manifest, mapping)?;
    let videos = load_dataset(&m)?;
    Ok((videos, m.classes))
}

/// Fills `d_in` and `classes` from the data, rejecting explicit mismatches.
fn model_for_data(cfg: &ModelConfig, videos: &[LabeledVideo], classes: &ClassMap) -> Result<ModelConfig> {
    let mut m = cfg.clone();
    let dim = videos.first().map_or(0, |v| v.features.frames.cols());
    if let Some(v) = videos.iter().find(|v| v.features.frames.cols() != dim) {
        return Err(Error::Config(format!(
            "video {} has feature width {}, others have {dim}",
            v.id(),
            v.features.frames.cols()
        )));
    }
    for (name, slot, actual) in [("d_in", &mut m.d_in, dim), ("classes", &mut m.classes, classes.len())] {
        if *slot == 0 {
            *slot = actual;
        } else if *slot != actual {
            return Err(Error::Config(format!("{name} = {slot} but the data has {actual}")));
        }
    }
    m.validate()?;
    Ok(m)
}

/// Scores of one evaluated model.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub per_video: Vec<(String, VideoScores)>,
    /// Frame accuracy (percent) restricted to every video's last ground-truth segment.
    pub final_segment_acc: f64,
}

pub fn evaluate_model(params: &ModelParams<f32>, videos: &[LabeledVideo]) -> Result<Evaluation> {
    let mut acc = MetricsAccumulator::new();
    let mut per_video = Vec::with_capacity(videos.len());
    let (mut final_correct, mut final_total) = (0usize, 0usize);
    for v in videos {
        if v.features.frames.cols() != params.config.d_in {
            return Err(Error::Config(format!(
                "video {} has feature width {} but the model expects {}",
                v.id(),
                v.features.frames.cols(),
                params.config.d_in
            )));
        }
        let out = model_forward(params, &v.features.frames).map_err(|e| e.in_video(v.id()))?;
        let pred = LabelSequence {
            labels: predict_labels(&out.last().expect("at least one stage").probs),
            num_classes: params.config.classes,
        };
        let scores = score_video(&pred, &v.labels).map_err(|e| e.in_video(v.id()))?;
        if let Some(last) = segments_from_labels(&v.labels).as_slice().last() {
            final_correct += (last.start..last.end).filter(|&t| pred.labels[t] == last.class).count();
            final_total += last.end - last.start;
        }
        acc.add(&scores);
        per_video.push((v.id().to_string(), scores));
    }
    let final_segment_acc =
        if final_total == 0 { 0.0 } else { 100.0 * final_correct as f64 / final_total as f64 };
    Ok(Evaluation { report: acc.report(), per_video, final_segment_acc })
}

fn train_quietly(
    videos: &[LabeledVideo],
    model: &ModelConfig,
    cfg: &RunConfig,
    checkpoint: Option<PathBuf>,
    label: &str,
) -> Result<(ModelParams<f32>, TrainHistory)> {
    let epochs = cfg.train.epochs;
    let mut log = |r: &crate::train::EpochRecord| {
        eprintln!(
            "[{label}] epoch {}/{epochs} lr {:.3e} loss {:.4} (ce {:.4}, smooth {:.4}) {:.1}s",
            r.epoch + 1,
            r.lr,
            r.total,
            r.ce,
            r.smooth,
            r.wall_secs
        );
    };
    fit(videos, model, &cfg.train, FitOptions { checkpoint, on_epoch: Some(&mut log) })
}

/// Outputs of `train`.
pub struct TrainOutcome {
    pub params: ModelParams<f32>,
    pub history: TrainHistory,
    pub checkpoint: PathBuf,
}

pub fn cmd_train(cfg: &RunConfig) -> Result<TrainOutcome> {
    let manifest = cfg.require_manifest()?;
    let (videos, classes) = load_set(manifest, &cfg.mapping_path()?)?;
    let model = model_for_data(&cfg.model, &videos, &classes)?;
    create_dir(&cfg.out)?;
    let mut resolved = cfg.clone();
    resolved.model = model.clone();
    write(&cfg.out.join("config.txt"), &resolved.to_text())?;
    let checkpoint = cfg.out.join("model.ckpt");
    let (params, history) = train_quietly(&videos, &model, cfg, Some(checkpoint.clone()), "train")?;
    write(&cfg.out.join("history.csv"), &history.to_csv())?;
    println!(
        "trained {} parameters on {} videos; final loss {:.4}; checkpoint {}",
        param_count(&model),
        videos.len(),
        history.records.last().map_or(f64::NAN, |r| r.total),
        checkpoint.display()
    );
    Ok(TrainOutcome { params, history, checkpoint })
}

fn checkpoint_path(cfg: &RunConfig) -> PathBuf {
    cfg.checkpoint.clone().unwrap_or_else(|| cfg.out.join("model.ckpt"))
}

pub fn per_video_csv(eval: &Evaluation) -> String {
    let mut s = format!("video_id,{CSV_HEADER}\n");
    for (id, v) in &eval.per_video {
        let _ = writeln!(s, "{id},{}", v.report.csv_row());
    }
    s
}

pub fn cmd_eval(cfg: &RunConfig) -> Result<Evaluation> {
    let params = load_checkpoint(&checkpoint_path(cfg))?;
    let manifest = cfg.require_manifest()?;
    let (videos, classes) = load_set(manifest, &cfg.mapping_path()?)?;
    if classes.len() != params.config.classes {
        return Err(Error::Config(format!(
            "checkpoint predicts {} classes but the mapping has {}",
            params.config.classes,
            classes.len()
        )));
    }
    let eval = evaluate_model(&params, &videos)?;
    create_dir(&cfg.out)?;
    let json = serde_json::to_string_pretty(&eval.report.to_json()).expect("plain JSON");
    write(&cfg.out.join("metrics.json"), &(json + "\n"))?;
    write(&cfg.out.join("per_video.csv"), &per_video_csv(&eval))?;
    let r = eval.report;
    println!(
        "F1@10 {:.2}  F1@25 {:.2}  F1@50 {:.2}  Edit {:.2}  Acc {:.2}  ({} videos)",
        r.f1_10,
        r.f1_25,
        r.f1_50,
        r.edit,
        r.acc,
        eval.per_video.len()
    );
    Ok(eval)
}

pub fn cmd_predict(cfg: &RunConfig) -> Result<()> {
    let params = load_checkpoint(&checkpoint_path(cfg))?;
    let manifest = load_manifest(cfg.require_manifest()?, &cfg.mapping_path()?)?;
    let dir = cfg.out.join("predictions");
    create_dir(&dir)?;
    for e in &manifest.entries {
        let features = load_features(&e.feature_path).map_err(|err| err.in_video(&e.video_id))?;
        let out = model_forward(&params, &features.frames).map_err(|err| err.in_video(&e.video_id))?;
        let labels = LabelSequence {
            labels: predict_labels(&out.last().expect("at least one stage").probs),
            num_classes: params.config.classes,
        };
        save_labels(&dir.join(format!("{}.txt", e.video_id)), &labels, &manifest.classes)?;
    }
    println!("wrote {} prediction files to {}", manifest.entries.len(), dir.display());
    Ok(())
}

fn study_sets(cfg: &RunConfig) -> Result<(Vec<LabeledVideo>, Vec<LabeledVideo>, ModelConfig)> {
    let mapping = cfg.mapping_path()?;
    let (train, classes) = load_set(cfg.require_manifest()?, &mapping)?;
    let test = match &cfg.test_manifest {
        Some(p) => load_set(p, &mapping)?.0,
        None => train.clone(),
    };
    let model = model_for_data(&cfg.model, &train, &classes)?;
    Ok((train, test, model))
}

const METRIC_NAMES: [&str; 5] = ["f1_10", "f1_25", "f1_50", "edit", "acc"];

fn metric_series(reports: &[MetricsReport]) -> Vec<(String, Vec<f64>)> {
    let pick: [fn(&MetricsReport) -> f64; 5] =
        [|r| r.f1_10, |r| r.f1_25, |r| r.f1_50, |r| r.edit, |r| r.acc];
    METRIC_NAMES.iter().zip(pick).map(|(n, f)| (n.to_string(), reports.iter().map(f).collect())).collect()
}

/// One row per context fraction.
#[derive(Debug, Clone)]
pub struct StudyRow {
    pub setting: f64,
    pub report: MetricsReport,
    pub final_segment_acc: f64,
}

pub fn chunk_mode(mode: ContextMode, fraction: f64, videos: &[LabeledVideo]) -> Result<Option<ChunkMode>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Argument(format!("context fraction {fraction} outside (0, 1]")));
    }
    if fraction >= 1.0 {
        return Ok(None);
    }
    Ok(Some(match mode {
        ContextMode::VideoSpecific => ChunkMode::VideoSpecific { percent: fraction },
        ContextMode::Fixed => {
            let mean = videos.iter().map(LabeledVideo::len).sum::<usize>() as f64 / videos.len().max(1) as f64;
            ChunkMode::Fixed { window_frames: ((fraction * mean).round() as usize).max(1) }
        }
    }))
}

pub fn cmd_context_study(cfg: &RunConfig) -> Result<Vec<StudyRow>> {
    let (train, test, model) = study_sets(cfg)?;
    create_dir(&cfg.out)?;
    let mut rows = Vec::new();
    let mut csv = format!("fraction,mode,{CSV_HEADER},final_segment_acc\n");
    for &fraction in &cfg.context_fractions {
        let chunks = match chunk_mode(cfg.context_mode, fraction, &train)? {
            None => train.clone(),
            Some(mode) => {
                let mut all = Vec::new();
                for v in &train {
                    all.extend(chunk_sequence(v, mode)?);
                }
                all
            }
        };
        let (params, _) = train_quietly(&chunks, &model, cfg, None, &format!("context {fraction}"))?;
        let eval = evaluate_model(&params, &test)?;
        let _ = writeln!(
            csv,
            "{fraction},{},{},{:.4}",
            cfg.context_mode,
            eval.report.csv_row(),
            eval.final_segment_acc
        );
        rows.push(StudyRow { setting: fraction, report: eval.report, final_segment_acc: eval.final_segment_acc });
    }
    write(&cfg.out.join("context_study.csv"), &csv)?;
    let xs: Vec<f64> = rows.iter().map(|r| 100.0 * r.setting).collect();
    let mut series = metric_series(&rows.iter().map(|r| r.report).collect::<Vec<_>>());
    series.push(("final_segment_acc".into(), rows.iter().map(|r| r.final_segment_acc).collect()));
    let title = format!("Training context ({})", cfg.context_mode);
    write(&cfg.out.join("context_study.svg"), &line_chart(&title, "context (% of video length)", &xs, &series))?;
    println!("context study: {} rows written to {}", rows.len(), cfg.out.join("context_study.csv").display());
    Ok(rows)
}

pub fn cmd_downsample_study(cfg: &RunConfig) -> Result<Vec<StudyRow>> {
    let (train, test, model) = study_sets(cfg)?;
    create_dir(&cfg.out)?;
    let mut rows = Vec::new();
    let mut csv = format!("rate,{CSV_HEADER}\n");
    for &rate in &cfg.downsample_rates {
        let tr: Vec<LabeledVideo> = train.iter().map(|v| downsample(v, rate)).collect::<Result<_>>()?;
        let te: Vec<LabeledVideo> = test.iter().map(|v| downsample(v, rate)).collect::<Result<_>>()?;
        let (params, _) = train_quietly(&tr, &model, cfg, None, &format!("rate {rate}"))?;
        let eval = evaluate_model(&params, &te)?;
        let _ = writeln!(csv, "{rate},{}", eval.report.csv_row());
        rows.push(StudyRow { setting: rate as f64, report: eval.report, final_segment_acc: eval.final_segment_acc });
    }
    write(&cfg.out.join("downsample_study.csv"), &csv)?;
    let xs: Vec<f64> = rows.iter().map(|r| r.setting).collect();
    let series = metric_series(&rows.iter().map(|r| r.report).collect::<Vec<_>>());
    write(&cfg.out.join("downsample_study.svg"), &line_chart("Downsampling", "rate", &xs, &series))?;
    println!("downsample study: {} rows", rows.len());
    Ok(rows)
}

/// Row of the ablation table.
#[derive(Debug, Clone)]
pub struct AblationRow {
    pub value: String,
    pub param_count: usize,
    pub report: MetricsReport,
}

pub fn cmd_ablate(cfg: &RunConfig) -> Result<Vec<AblationRow>> {
    let axis = cfg.ablate_axis.as_deref().ok_or_else(|| {
        Error::Argument(format!("no ablation axis given; valid axes: {}", ABLATION_AXES.join(", ")))
    })?;
    if !ABLATION_AXES.contains(&axis) {
        return Err(Error::Argument(format!(
            "unknown ablation axis {axis:?}; valid axes: {}",
            ABLATION_AXES.join(", ")
        )));
    }
    if cfg.ablate_values.is_empty() {
        return Err(Error::Argument("no ablation values given".into()));
    }
    let (train, test, base) = study_sets(cfg)?;
    create_dir(&cfg.out)?;
    let mut csv = format!("axis,value,seed,param_count,{CSV_HEADER}\n");
    let mut rows = Vec::new();
    for value in &cfg.ablate_values {
        let mut model = base.clone();
        model.set(axis, value)?;
        model.validate()?;
        let (params, _) = train_quietly(&train, &model, cfg, None, &format!("{axis}={value}"))?;
        let eval = evaluate_model(&params, &test)?;
        let count = param_count(&model);
        let _ = writeln!(csv, "{axis},{value},{},{count},{}", cfg.train.seed, eval.report.csv_row());
        rows.push(AblationRow { value: value.clone(), param_count: count, report: eval.report });
    }
    write(&cfg.out.join("ablation.csv"), &csv)?;
    println!("ablation over {axis}: {} rows", rows.len());
    Ok(rows)
}

pub fn cmd_synth(cfg: &RunConfig, seed: u64) -> Result<PathBuf> {
    let data = synth_generate(&cfg.synth, seed)?;
    create_dir(&cfg.out)?;
    data.write_to(&cfg.out)?;
    let manifest = cfg.out.join("manifest.txt");
    println!("wrote {} videos to {}", data.videos.len(), manifest.display());
    Ok(manifest)
}
