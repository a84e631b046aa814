//! Command-line interface.
//!
//! Settings come from the defaults, then `--config`, then `--set key=value`
//! overrides, then the dedicated flags of each subcommand. Exit codes: 0
//! success or accept, 1 reject, 2 usage or data error, 3 numerical error.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;
use rayon::prelude::*;

use crate::dsp::{read_wav, AudioBuffer};
use crate::fsutil::write_atomic;
use crate::model::{load_checkpoint, save_checkpoint, Amcrn};
use crate::profiler::{emit_cost_report, format_csv, format_table, DEFAULT_DURATIONS};
use crate::runconfig::{parse_truncate, RunConfig};
use crate::scoring::{
    decide, format_scores, plda_train, read_trials, run_trials, sweep, sweep_csv, with_pool, Backend, BackendKind,
    Decision, DirSource, EmbeddingCache, PldaModel, Truncation,
};
use crate::store::{mean_embedding, EmbeddingStore, StoreRecord};
use crate::train::{make_toy_dataset, train, write_dataset, write_history_csv, Dataset};
use crate::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "amcrn", version, about = "Speaker verification with attentive multi-scale convolutional recurrent networks")]
pub struct Cli {
    /// Flat `key = value` configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for initialization, data order, augmentation and truncation.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Override one configuration key (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a network and write the best checkpoint.
    Train(TrainArgs),
    /// Enroll a speaker from one or more WAV files.
    Enroll(EnrollArgs),
    /// Verify a test WAV against an enrolled speaker.
    Verify(VerifyArgs),
    /// Print the embedding of one WAV file.
    Embed(EmbedArgs),
    /// Score a trial list and report EER and minDCF.
    Eval(EvalArgs),
    /// Print parameter and MAC counts.
    Profile(ProfileArgs),
    /// Write a synthetic speaker corpus.
    Toygen(ToygenArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Directory with one subdirectory of WAV files per speaker.
    #[arg(long, conflicts_with = "toy")]
    pub data: Option<PathBuf>,
    /// Train on a synthetic corpus; optional `speakers=N utts=M seconds=S`.
    #[arg(long, num_args = 0.., value_name = "KEY=VALUE")]
    pub toy: Option<Vec<String>>,
    /// Output checkpoint.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Use the small network.
    #[arg(long)]
    pub tiny: bool,
    /// Loss history CSV (default `<out>.loss.csv`).
    #[arg(long)]
    pub loss_csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EnrollArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub store: PathBuf,
    #[arg(long)]
    pub speaker: String,
    /// Enrollment WAVs; several are averaged.
    #[arg(required = true)]
    pub wavs: Vec<PathBuf>,
    /// Replace an existing record with the same id.
    #[arg(long)]
    pub overwrite: bool,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub store: PathBuf,
    #[arg(long)]
    pub speaker: String,
    pub wav: PathBuf,
    #[arg(long)]
    pub backend: Option<BackendKind>,
    #[arg(long)]
    pub threshold: Option<f64>,
    /// PLDA model (default `<checkpoint>.plda`).
    #[arg(long)]
    pub plda: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EmbedArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    pub wav: PathBuf,
    /// Write to this file instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Lines of `<label> <enroll> <test>`, paths relative to --audio-root.
    #[arg(long)]
    pub trials: PathBuf,
    #[arg(long)]
    pub audio_root: PathBuf,
    #[arg(long)]
    pub backend: Option<BackendKind>,
    /// Test segment length: 2, 3, 5 (seconds) or whole.
    #[arg(long)]
    pub truncate: Option<String>,
    /// PLDA model (default `<checkpoint>.plda`).
    #[arg(long)]
    pub plda: Option<PathBuf>,
    /// Scored trial list output (default `<trials>.scores`).
    #[arg(long)]
    pub scores: Option<PathBuf>,
    /// Report output (default `<trials>.report`).
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Also write the FAR/FRR threshold sweep as CSV.
    #[arg(long)]
    pub sweep: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ProfileArgs {
    /// Use the small network.
    #[arg(long)]
    pub tiny: bool,
    /// Comma-separated durations in seconds.
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_DURATIONS.to_vec())]
    pub durations: Vec<f64>,
    /// Also write the per-layer CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ToygenArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub speakers: Option<usize>,
    #[arg(long)]
    pub utts: Option<usize>,
    #[arg(long)]
    pub seconds: Option<f64>,
    /// Utterances per speaker held out into `<out>/test` with a trial list;
    /// the rest go to `<out>/train`.
    #[arg(long)]
    pub heldout: Option<usize>,
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Default PLDA sidecar of a checkpoint.
pub fn plda_path(checkpoint: &Path) -> PathBuf {
    with_suffix(checkpoint, ".plda")
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let pairs = cli
        .overrides
        .iter()
        .map(|o| {
            o.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| Error::config(format!("--set expects KEY=VALUE, got `{o}`")))
        })
        .collect::<Result<Vec<_>>>()?;
    cfg.apply(&pairs)?;
    if let Some(s) = cli.seed {
        cfg.train.seed = s;
        cfg.toy.seed = s;
    }
    Ok(cfg)
}

fn load_plda(explicit: &Option<PathBuf>, checkpoint: &Path) -> Result<PldaModel> {
    let path = explicit.clone().unwrap_or_else(|| plda_path(checkpoint));
    if !path.is_file() {
        return Err(Error::config(format!("PLDA model {} not found", path.display())));
    }
    PldaModel::load(&path)
}

fn embed_all(model: &Amcrn, audio: &[&AudioBuffer]) -> Result<Vec<Vec<f64>>> {
    with_pool(|| {
        audio
            .par_iter()
            .map(|a| Ok(model.embed_audio(a)?.as_f64()))
            .collect::<Result<Vec<_>>>()
    })?
}

/// Fits the PLDA back end on the training utterances of `dataset`.
pub fn fit_plda(model: &Amcrn, dataset: &Dataset) -> Result<PldaModel> {
    let audio: Vec<&AudioBuffer> = dataset.items.iter().map(|i| &i.audio).collect();
    let embs = embed_all(model, &audio)?;
    let data: Vec<(usize, Vec<f64>)> = dataset.items.iter().map(|i| i.speaker).zip(embs).collect();
    plda_train(&data)
}

fn cmd_train(cfg: &mut RunConfig, a: &TrainArgs) -> Result<i32> {
    if a.tiny {
        cfg.apply_preset("tiny")?;
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    if let Some(b) = a.batch_size {
        cfg.train.batch_size = b;
    }
    let dataset = match (&a.data, &a.toy) {
        (Some(dir), None) => Dataset::from_dir(dir)?,
        (None, Some(kv)) => {
            for item in kv {
                let (k, v) = item
                    .split_once('=')
                    .ok_or_else(|| Error::config(format!("--toy expects KEY=VALUE, got `{item}`")))?;
                let key = match k {
                    "speakers" => "toy_speakers",
                    "utts" => "toy_utterances",
                    "seconds" => "toy_seconds",
                    "seed" => "toy_seed",
                    _ => return Err(Error::config(format!("unknown --toy key `{k}`"))),
                };
                cfg.set(key, v)?;
            }
            make_toy_dataset(&cfg.toy)?
        }
        _ => return Err(Error::config("train needs --data DIR or --toy")),
    };
    cfg.model.n_classes = dataset.n_speakers();
    cfg.validate()?;
    info!(
        "training on {} utterances of {} speakers",
        dataset.len(),
        dataset.n_speakers()
    );
    let model = Amcrn::with_frontend(cfg.model.clone(), cfg.frontend, cfg.train.seed)?;
    let outcome = train(model, &dataset, &cfg.train)?;
    save_checkpoint(&outcome.best, &a.out)?;
    let csv = a.loss_csv.clone().unwrap_or_else(|| with_suffix(&a.out, ".loss.csv"));
    write_history_csv(&csv, &outcome.history)?;
    fit_plda(&outcome.best, &dataset)?.save(&plda_path(&a.out))?;
    println!(
        "best epoch {} (val loss {}), checkpoint {}",
        outcome.best_epoch,
        outcome.history[outcome.best_epoch].val_loss,
        a.out.display()
    );
    Ok(0)
}

fn cmd_enroll(a: &EnrollArgs) -> Result<i32> {
    let model = load_checkpoint(&a.checkpoint)?;
    let mut store = EmbeddingStore::load(&a.store)?;
    if !a.overwrite && store.get(&a.speaker).is_ok() {
        return Err(Error::DuplicateId(a.speaker.clone()));
    }
    let audio = a.wavs.iter().map(|p| read_wav(p)).collect::<Result<Vec<_>>>()?;
    let embs = a
        .wavs
        .iter()
        .zip(&audio)
        .map(|(_, x)| Ok(model.embed_audio(x)?.values))
        .collect::<Result<Vec<_>>>()?;
    let values = if embs.len() == 1 {
        embs[0].clone()
    } else {
        mean_embedding(&embs)?
    };
    store.insert(
        &a.speaker,
        StoreRecord {
            n_utterances: embs.len(),
            values,
        },
        a.overwrite,
    )?;
    store.save(&a.store)?;
    println!("enrolled {} from {} utterance(s)", a.speaker, embs.len());
    Ok(0)
}

fn cmd_verify(cfg: &RunConfig, a: &VerifyArgs) -> Result<i32> {
    let model = load_checkpoint(&a.checkpoint)?;
    let store = EmbeddingStore::load(&a.store)?;
    let enrolled: Vec<f64> = store.get(&a.speaker)?.values.iter().map(|&v| v as f64).collect();
    let test = model.embed_audio(&read_wav(&a.wav)?)?.as_f64();
    let backend = a.backend.unwrap_or(cfg.backend);
    let threshold = a.threshold.unwrap_or(cfg.threshold);
    let plda;
    let b = match backend {
        BackendKind::Csm => Backend::Csm,
        BackendKind::Plda => {
            plda = load_plda(&a.plda, &a.checkpoint)?;
            Backend::Plda(&plda)
        }
    };
    let score = b.score(&enrolled, &test)?;
    let decision = decide(score, threshold);
    println!("score={score} threshold={threshold} decision={decision}");
    Ok(match decision {
        Decision::Accept => 0,
        Decision::Reject => 1,
    })
}

fn cmd_embed(a: &EmbedArgs) -> Result<i32> {
    let model = load_checkpoint(&a.checkpoint)?;
    let e = model.embed_audio(&read_wav(&a.wav)?)?;
    let line = e.values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(" ") + "\n";
    match &a.out {
        Some(p) => write_atomic(p, line.as_bytes())?,
        None => print!("{line}"),
    }
    Ok(0)
}

fn cmd_eval(cfg: &RunConfig, a: &EvalArgs) -> Result<i32> {
    let model = load_checkpoint(&a.checkpoint)?;
    let trials = read_trials(&a.trials)?;
    let backend = a.backend.unwrap_or(cfg.backend);
    let truncate = match &a.truncate {
        Some(t) => parse_truncate(t)?,
        None => cfg.truncate,
    };
    let plda;
    let b = match backend {
        BackendKind::Csm => Backend::Csm,
        BackendKind::Plda => {
            plda = load_plda(&a.plda, &a.checkpoint)?;
            Backend::Plda(&plda)
        }
    };
    let source = DirSource {
        root: a.audio_root.clone(),
    };
    let truncation = truncate.map(|seconds| Truncation {
        seconds,
        seed: cfg.train.seed,
    });
    let (scores, report) = run_trials(&model, &trials, &source, b, truncation, &mut EmbeddingCache::new())?;
    let scores_path = a.scores.clone().unwrap_or_else(|| with_suffix(&a.trials, ".scores"));
    let report_path = a.report.clone().unwrap_or_else(|| with_suffix(&a.trials, ".report"));
    write_atomic(&scores_path, format_scores(&scores).as_bytes())?;
    write_atomic(&report_path, report.to_text().as_bytes())?;
    if let Some(p) = &a.sweep {
        let labeled: Vec<(bool, f64)> = scores.iter().map(|(t, s)| (t.target, *s)).collect();
        write_atomic(p, sweep_csv(&sweep(&labeled)?).as_bytes())?;
    }
    print!("{}", report.to_text());
    Ok(0)
}

fn cmd_profile(cfg: &mut RunConfig, a: &ProfileArgs) -> Result<i32> {
    if a.tiny {
        cfg.apply_preset("tiny")?;
    }
    let reports = emit_cost_report(&cfg.model, &a.durations)?;
    print!("{}", format_table(&cfg.model, &reports)?);
    if let Some(p) = &a.csv {
        write_atomic(p, format_csv(&reports).as_bytes())?;
    }
    Ok(0)
}

/// All unordered pairs of `ids` as trial lines; targets share the part
/// before the first `/`.
pub fn pair_trials(ids: &[String]) -> String {
    let mut s = String::new();
    let spk = |id: &str| id.split('/').next().unwrap_or("").to_string();
    for (i, a) in ids.iter().enumerate() {
        for b in &ids[i + 1..] {
            s.push_str(&format!("{} {a}.wav {b}.wav\n", u8::from(spk(a) == spk(b))));
        }
    }
    s
}

fn cmd_toygen(cfg: &mut RunConfig, a: &ToygenArgs) -> Result<i32> {
    if let Some(n) = a.speakers {
        cfg.toy.n_speakers = n;
    }
    if let Some(n) = a.utts {
        cfg.toy.utterances_per_speaker = n;
    }
    if let Some(s) = a.seconds {
        cfg.toy.utterance_seconds = s;
    }
    let ds = make_toy_dataset(&cfg.toy)?;
    match a.heldout {
        None => write_dataset(&ds, &a.out)?,
        Some(k) => {
            if k == 0 || k >= cfg.toy.utterances_per_speaker {
                return Err(Error::config("--heldout must lie between 1 and utts - 1"));
            }
            let (train_part, test_part) = ds.split_per_speaker(cfg.toy.utterances_per_speaker - k);
            write_dataset(&train_part, &a.out.join("train"))?;
            let test_dir = a.out.join("test");
            write_dataset(&test_part, &test_dir)?;
            let ids: Vec<String> = test_part.items.iter().map(|i| i.id.clone()).collect();
            write_atomic(&test_dir.join("trials.txt"), pair_trials(&ids).as_bytes())?;
        }
    }
    println!("wrote {} utterances of {} speakers to {}", ds.len(), ds.n_speakers(), a.out.display());
    Ok(0)
}

/// Runs a parsed command line and returns the process exit code.
pub fn run(cli: &Cli) -> Result<i32> {
    let mut cfg = load_config(cli)?;
    match &cli.command {
        Command::Train(a) => cmd_train(&mut cfg, a),
        Command::Enroll(a) => cmd_enroll(a),
        Command::Verify(a) => cmd_verify(&cfg, a),
        Command::Embed(a) => cmd_embed(a),
        Command::Eval(a) => cmd_eval(&cfg, a),
        Command::Profile(a) => cmd_profile(&mut cfg, a),
        Command::Toygen(a) => cmd_toygen(&mut cfg, a),
    }
}

/// In-memory audio keyed by id, for tests and notebooks.
pub fn audio_map(dataset: &Dataset) -> HashMap<String, AudioBuffer> {
    dataset.items.iter().map(|i| (i.id.clone(), i.audio.clone())).collect()
}
