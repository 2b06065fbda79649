//! Batch-oriented command line: feature extraction, speaker splitting,
//! training, evaluation, report rendering, and the synthetic-data
//! generator.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind as ClapErrorKind;
use clap::{Parser, Subcommand};
use rayon::prelude::*;

use crate::audio;
use crate::autograd::AutogradError;
use crate::cache;
use crate::config::{ConfigError, RunConfig};
use crate::metrics;
use crate::model::{
    head_names, load_checkpoint, save_checkpoint, write_sidecar_manifest, EmotionModel, HeadKind,
};
use crate::train::{
    self, audio_cache_path, evaluate, generate_synthetic, history_to_csv, load_features,
    read_manifest, read_split, speaker_split, train as run_train, video_cache_path, ManifestEntry,
    Partition, TrainError,
};
use crate::video;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

const SEED_ENV: &str = "EMOSEQ_SEED";

#[derive(Parser)]
#[command(name = "emoseq", version, about = "Multimodal emotion recognition over audio/video clips")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic audio/video dataset with a manifest.
    Synth {
        /// Output directory (created if needed).
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = train::synth::DEFAULT_SPEAKERS)]
        speakers: usize,
        #[arg(long, default_value_t = train::synth::DEFAULT_CLIPS_PER_SPEAKER)]
        clips_per_speaker: usize,
    },
    /// Extract 9x40x40 MFCC feature tensors for every manifest clip.
    ExtractAudio {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        cache_dir: PathBuf,
    },
    /// Extract 50x64x64x1 frame feature tensors for every manifest clip.
    ExtractVideo {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        cache_dir: PathBuf,
    },
    /// Write a speaker-disjoint train/val/test split.
    Split {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 10)]
        val_speakers: usize,
        #[arg(long, default_value_t = 10)]
        test_speakers: usize,
    },
    /// Train one model and write checkpoint + history.
    Train {
        /// Sequence head: lstm, gru, transformer, or maxpool.
        #[arg(long)]
        head: Option<String>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        split: Option<PathBuf>,
        #[arg(long)]
        cache_dir: Option<PathBuf>,
        /// Output directory for checkpoint, history, and resolved config.
        #[arg(long)]
        out: PathBuf,
        /// key=value config file; flags override file values.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Extra key=value overrides (repeatable).
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        max_epochs: Option<usize>,
        #[arg(long)]
        patience: Option<usize>,
    },
    /// Evaluate a checkpoint on the test partition and write the report CSV.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        split: PathBuf,
        #[arg(long)]
        cache_dir: PathBuf,
        /// Report path (default: report.csv next to the checkpoint).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Optional consistency check against the checkpoint's head.
        #[arg(long)]
        head: Option<String>,
    },
    /// Render a saved report CSV as a console table.
    Report {
        #[arg(long)]
        report: PathBuf,
    },
}

enum CliError {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl CliError {
    fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Data(_) => EXIT_DATA,
            CliError::Numeric(_) => EXIT_NUMERIC,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Numeric(m) => m,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match &e {
            TrainError::NonFiniteLoss { .. } => CliError::Numeric(e.to_string()),
            TrainError::Autograd(AutogradError::NonFiniteGradient(_)) => {
                CliError::Numeric(e.to_string())
            }
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<audio::AudioError> for CliError {
    fn from(e: audio::AudioError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<video::VideoError> for CliError {
    fn from(e: video::VideoError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<cache::CacheError> for CliError {
    fn from(e: cache::CacheError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<metrics::MetricsError> for CliError {
    fn from(e: metrics::MetricsError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<crate::model::CheckpointError> for CliError {
    fn from(e: crate::model::CheckpointError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<crate::model::ModelError> for CliError {
    fn from(e: crate::model::ModelError) -> Self {
        CliError::Usage(e.to_string())
    }
}

/// Parse argv, run one subcommand, and map errors to exit codes.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            return match e.kind() {
                ClapErrorKind::DisplayHelp | ClapErrorKind::DisplayVersion => {
                    print!("{e}");
                    EXIT_OK
                }
                _ => {
                    eprint!("{e}");
                    EXIT_USAGE
                }
            };
        }
    };
    match dispatch(cli.cmd) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.code()
        }
    }
}

fn dispatch(cmd: Cmd) -> Result<(), CliError> {
    match cmd {
        Cmd::Synth { out, seed, speakers, clips_per_speaker } => {
            let seed = resolve_seed(seed, None);
            let entries = generate_synthetic(&out, seed, speakers, clips_per_speaker)?;
            println!("generated {} clips under {} (seed {seed})", entries.len(), out.display());
            Ok(())
        }
        Cmd::ExtractAudio { manifest, cache_dir } => {
            let entries = read_manifest(&manifest)?;
            ensure_dir(&cache_dir)?;
            extract_all(&entries, &cache_dir, Modality::Audio)?;
            println!("extracted audio features for {} clips into {}", entries.len(), cache_dir.display());
            Ok(())
        }
        Cmd::ExtractVideo { manifest, cache_dir } => {
            let entries = read_manifest(&manifest)?;
            ensure_dir(&cache_dir)?;
            extract_all(&entries, &cache_dir, Modality::Video)?;
            println!("extracted video features for {} clips into {}", entries.len(), cache_dir.display());
            Ok(())
        }
        Cmd::Split { manifest, out, seed, val_speakers, test_speakers } => {
            let seed = resolve_seed(seed, None);
            let entries = read_manifest(&manifest)?;
            let split = speaker_split(&entries, val_speakers, test_speakers, seed)?;
            train::write_split(&out, &split)?;
            println!(
                "split {} speakers into {}/{}/{} (train/val/test), seed {seed} -> {}",
                split.train.len() + split.val.len() + split.test.len(),
                split.train.len(),
                split.val.len(),
                split.test.len(),
                out.display()
            );
            Ok(())
        }
        Cmd::Train {
            head,
            manifest,
            split,
            cache_dir,
            out,
            config,
            set,
            seed,
            batch_size,
            lr,
            max_epochs,
            patience,
        } => cmd_train(TrainArgs {
            head,
            manifest,
            split,
            cache_dir,
            out,
            config,
            set,
            seed,
            batch_size,
            lr,
            max_epochs,
            patience,
        }),
        Cmd::Evaluate { checkpoint, manifest, split, cache_dir, out, head } => {
            cmd_evaluate(checkpoint, manifest, split, cache_dir, out, head)
        }
        Cmd::Report { report } => {
            let text = std::fs::read_to_string(&report)
                .map_err(|e| CliError::Data(format!("{}: {e}", report.display())))?;
            print!("{}", metrics::render_report_table(&text)?);
            Ok(())
        }
    }
}

struct TrainArgs {
    head: Option<String>,
    manifest: Option<PathBuf>,
    split: Option<PathBuf>,
    cache_dir: Option<PathBuf>,
    out: PathBuf,
    config: Option<PathBuf>,
    set: Vec<String>,
    seed: Option<u64>,
    batch_size: Option<usize>,
    lr: Option<f64>,
    max_epochs: Option<usize>,
    patience: Option<usize>,
}

fn cmd_train(args: TrainArgs) -> Result<(), CliError> {
    let mut cfg = RunConfig::new(HeadKind::Lstm);
    let mut head_set = false;

    // Precedence: env seed < config file < --set pairs < dedicated flags.
    if let Some(env_seed) = env_seed() {
        cfg.set_seed(env_seed);
    }
    if let Some(path) = &args.config {
        let before = cfg.model.head;
        cfg.apply_file(path)?;
        head_set |= cfg.model.head != before || file_sets_head(path);
    }
    for pair in &args.set {
        let (key, value) = pair
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got {pair:?}")))?;
        cfg.apply_kv(key.trim(), value.trim())?;
        head_set |= key.trim() == "head";
    }
    if let Some(head) = &args.head {
        let kind = HeadKind::parse(head).ok_or_else(|| {
            CliError::Usage(format!("unknown head {head:?}; valid heads: {}", head_names().join(", ")))
        })?;
        cfg.model.head = kind;
        head_set = true;
    }
    if !head_set {
        return Err(CliError::Usage(format!(
            "no head selected; pass --head with one of: {}",
            head_names().join(", ")
        )));
    }
    if let Some(seed) = args.seed {
        cfg.set_seed(seed);
    }
    if let Some(b) = args.batch_size {
        cfg.apply_kv("batch_size", &b.to_string())?;
    }
    if let Some(lr) = args.lr {
        cfg.apply_kv("lr", &lr.to_string())?;
    }
    if let Some(m) = args.max_epochs {
        cfg.apply_kv("max_epochs", &m.to_string())?;
    }
    if let Some(p) = args.patience {
        cfg.apply_kv("patience", &p.to_string())?;
    }
    if let Some(p) = args.manifest {
        cfg.manifest = Some(p);
    }
    if let Some(p) = args.split {
        cfg.split = Some(p);
    }
    if let Some(p) = args.cache_dir {
        cfg.cache_dir = Some(p);
    }

    let manifest_path =
        cfg.manifest.clone().ok_or_else(|| CliError::Usage("missing --manifest".into()))?;
    let split_path = cfg.split.clone().ok_or_else(|| CliError::Usage("missing --split".into()))?;
    let cache_dir =
        cfg.cache_dir.clone().ok_or_else(|| CliError::Usage("missing --cache-dir".into()))?;

    ensure_dir(&args.out)?;
    let resolved = cfg.resolved();
    std::fs::write(args.out.join("config.txt"), &resolved)
        .map_err(|e| CliError::Data(format!("writing config.txt: {e}")))?;
    print!("{resolved}");

    let entries = read_manifest(&manifest_path)?;
    let split = read_split(&split_path)?;
    let train_entries = split.select(&entries, Partition::Train);
    let val_entries = split.select(&entries, Partition::Val);
    let train_set = load_features(&train_entries, &cache_dir)?;
    let val_set = load_features(&val_entries, &cache_dir)?;
    eprintln!(
        "training head={} on {} clips, validating on {}",
        cfg.model.head,
        train_set.clips.len(),
        val_set.clips.len()
    );

    let mut model = EmotionModel::new(cfg.model.clone())?;
    let outcome = run_train(&mut model, &train_set, &val_set, &cfg.train)?;
    for h in &outcome.history {
        eprintln!(
            "epoch {}/{}: train_loss={:.4} train_acc={:.3} val_loss={:.4} val_acc={:.3}",
            h.epoch, cfg.train.max_epochs, h.train_loss, h.train_acc, h.val_loss, h.val_acc
        );
    }

    let ckpt = args.out.join("model.ckpt");
    save_checkpoint(&ckpt, &model)?;
    write_sidecar_manifest(&args.out.join("model.manifest.txt"), &model)?;
    std::fs::write(args.out.join("history.csv"), history_to_csv(&outcome.history))
        .map_err(|e| CliError::Data(format!("writing history.csv: {e}")))?;
    println!(
        "trained {} epochs (best epoch {}), checkpoint -> {}",
        outcome.history.len(),
        outcome.best_epoch,
        ckpt.display()
    );
    Ok(())
}

fn cmd_evaluate(
    checkpoint: PathBuf,
    manifest: PathBuf,
    split: PathBuf,
    cache_dir: PathBuf,
    out: Option<PathBuf>,
    head: Option<String>,
) -> Result<(), CliError> {
    let mut model = load_checkpoint(&checkpoint)?;
    if let Some(head) = &head {
        let kind = HeadKind::parse(head).ok_or_else(|| {
            CliError::Usage(format!("unknown head {head:?}; valid heads: {}", head_names().join(", ")))
        })?;
        if kind != model.head_kind() {
            return Err(CliError::Data(format!(
                "head mismatch: checkpoint {} was trained with head {}, but --head {} was requested",
                checkpoint.display(),
                model.head_kind(),
                kind
            )));
        }
    }
    let entries = read_manifest(&manifest)?;
    let split = read_split(&split)?;
    let test_entries = split.select(&entries, Partition::Test);
    let test_set = load_features(&test_entries, &cache_dir)?;
    let outcome = evaluate(&mut model, &test_set)?;

    let report_path = out.unwrap_or_else(|| {
        checkpoint.parent().unwrap_or_else(|| Path::new(".")).join("report.csv")
    });
    metrics::write_report_csv(&report_path, &outcome.report, outcome.aggregate.as_ref())?;
    let csv_text = metrics::report_to_csv(&outcome.report, outcome.aggregate.as_ref());
    print!("{}", metrics::render_report_table(&csv_text)?);
    println!("accuracy {:.4} over {} clips; report -> {}", outcome.accuracy, test_set.clips.len(), report_path.display());
    if outcome.aggregate.is_none() {
        eprintln!("warning: harmonic aggregate undefined (some class has a zero metric)");
    }
    Ok(())
}

enum Modality {
    Audio,
    Video,
}

fn extract_all(entries: &[ManifestEntry], cache_dir: &Path, modality: Modality) -> Result<(), CliError> {
    let results: Vec<Result<(), String>> = entries
        .par_iter()
        .map(|entry| match modality {
            Modality::Audio => audio::audio_features(&entry.audio_path)
                .map(|t| (audio_cache_path(cache_dir, &entry.clip_id), t.to_record()))
                .map_err(|e| format!("clip {}: {e}", entry.clip_id))
                .and_then(|(path, rec)| {
                    cache::write_record_file(&path, &rec)
                        .map_err(|e| format!("clip {}: {e}", entry.clip_id))
                }),
            Modality::Video => video::video_features(&entry.video_path)
                .map(|t| (video_cache_path(cache_dir, &entry.clip_id), t.to_record()))
                .map_err(|e| format!("clip {}: {e}", entry.clip_id))
                .and_then(|(path, rec)| {
                    cache::write_record_file(&path, &rec)
                        .map_err(|e| format!("clip {}: {e}", entry.clip_id))
                }),
        })
        .collect();
    for result in results {
        result.map_err(CliError::Data)?;
    }
    Ok(())
}

fn ensure_dir(path: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(path)
        .map_err(|e| CliError::Data(format!("creating {}: {e}", path.display())))
}

fn env_seed() -> Option<u64> {
    std::env::var(SEED_ENV).ok().and_then(|v| v.parse().ok())
}

fn resolve_seed(flag: Option<u64>, file: Option<u64>) -> u64 {
    flag.or(file).or_else(env_seed).unwrap_or(0)
}

fn file_sets_head(path: &Path) -> bool {
    std::fs::read_to_string(path)
        .map(|text| {
            text.lines().any(|l| {
                let l = l.trim();
                !l.starts_with('#') && l.split_once('=').map(|(k, _)| k.trim() == "head").unwrap_or(false)
            })
        })
        .unwrap_or(false)
}
