//! Back-end scoring and trial evaluation.
//!
//! Embeddings are compared with cosine similarity (CSM) or a two-covariance
//! PLDA model. [`run_trials`] embeds every referenced utterance once, in
//! parallel, scores each trial and reduces the scores to EER and minDCF.

mod metrics;
mod plda;

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::dsp::{read_wav, AudioBuffer};
use crate::model::Amcrn;
use crate::{Error, Result};

pub use metrics::{compute_eer, compute_mindcf, sweep, sweep_csv, EvalReport, SweepPoint, P_TARGET};
pub use plda::{plda_score, plda_train, PldaModel, PLDA_RIDGE};

/// Default accept threshold.
pub const DEFAULT_THRESHOLD: f64 = 0.5;
/// Environment variable capping the number of worker threads.
pub const THREADS_ENV: &str = "AMCRN_THREADS";

/// Cosine similarity.
pub fn csm(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape(format!("csm of lengths {} and {}", a.len(), b.len())));
    }
    let na: f64 = a.iter().map(|v| v * v).sum();
    let nb: f64 = b.iter().map(|v| v * v).sum();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::DegenerateInput("cosine similarity of a zero vector".into()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    // sqrt(x * x) == x exactly, so csm(a, a) is exactly 1
    Ok((dot / (na * nb).sqrt()).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Accept,
    Reject,
}

impl fmt::Display for Decision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Decision::Accept => "accept",
            Decision::Reject => "reject",
        })
    }
}

/// Rejects strictly below the threshold.
pub fn decide(score: f64, threshold: f64) -> Decision {
    if score < threshold {
        Decision::Reject
    } else {
        Decision::Accept
    }
}

/// Scoring back end.
#[derive(Debug, Clone, Copy)]
pub enum Backend<'a> {
    Csm,
    Plda(&'a PldaModel),
}

impl Backend<'_> {
    pub fn score(&self, enroll: &[f64], test: &[f64]) -> Result<f64> {
        match self {
            Backend::Csm => csm(enroll, test),
            Backend::Plda(m) => plda_score(m, enroll, test),
        }
    }
}

/// Back-end selector as spelled on the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackendKind {
    Csm,
    Plda,
}

impl FromStr for BackendKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csm" => Ok(BackendKind::Csm),
            "plda" => Ok(BackendKind::Plda),
            _ => Err(Error::config(format!("unknown backend `{s}` (expected csm or plda)"))),
        }
    }
}

/// One verification trial. `enroll` may list several utterances separated
/// by commas; their embeddings are averaged.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trial {
    pub target: bool,
    pub enroll: String,
    pub test: String,
}

impl Trial {
    pub fn enroll_refs(&self) -> impl Iterator<Item = &str> {
        self.enroll.split(',')
    }
}

/// Scored trials in list order.
pub type ScoreSet = Vec<(Trial, f64)>;

/// Parses `<label> <enroll> <test>` lines; label 1 is target, 0 nontarget.
/// Blank lines and `#` comments are skipped.
pub fn parse_trials(text: &str, path: &Path) -> Result<Vec<Trial>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |msg: &str| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: msg.to_string(),
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(err("expected `<label> <enroll> <test>`"));
        }
        let target = match fields[0] {
            "1" => true,
            "0" => false,
            _ => return Err(err("label must be 0 or 1")),
        };
        out.push(Trial {
            target,
            enroll: fields[1].to_string(),
            test: fields[2].to_string(),
        });
    }
    Ok(out)
}

pub fn read_trials(path: &Path) -> Result<Vec<Trial>> {
    parse_trials(&std::fs::read_to_string(path)?, path)
}

/// Trial lines with the score appended.
pub fn format_scores(scores: &ScoreSet) -> String {
    let mut s = String::new();
    for (t, score) in scores {
        s.push_str(&format!("{} {} {} {}\n", u8::from(t.target), t.enroll, t.test, score));
    }
    s
}

/// Labels and scores, the input of the metric functions.
pub fn labeled(scores: &ScoreSet) -> Vec<(bool, f64)> {
    scores.iter().map(|(t, s)| (t.target, *s)).collect()
}

/// A random contiguous segment of `seconds`. Returns the whole input and
/// `false` when the audio is not longer than the request.
pub fn truncate_segments(audio: &AudioBuffer, seconds: f64, seed: u64) -> Result<(AudioBuffer, bool)> {
    if !(seconds > 0.0) {
        return Err(Error::config("truncation duration must be positive"));
    }
    let len = (seconds * audio.sample_rate() as f64).round() as usize;
    if audio.len() <= len {
        return Ok((audio.clone(), false));
    }
    let start = ChaCha8Rng::seed_from_u64(seed).random_range(0..=audio.len() - len);
    Ok((audio.slice(start, len), true))
}

/// Test-side truncation: every test utterance is cut to `seconds` at an
/// offset drawn from `seed` and the utterance id.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Truncation {
    pub seconds: f64,
    pub seed: u64,
}

/// FNV-1a of the id mixed with the run seed.
fn utterance_seed(seed: u64, id: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for b in id.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Resolves utterance references to audio.
pub trait AudioSource: Sync {
    fn load(&self, id: &str) -> Result<AudioBuffer>;
}

/// WAV files addressed by path relative to a root directory.
#[derive(Debug, Clone)]
pub struct DirSource {
    pub root: PathBuf,
}

impl AudioSource for DirSource {
    fn load(&self, id: &str) -> Result<AudioBuffer> {
        let path = self.root.join(id);
        if !path.is_file() {
            return Err(Error::MissingUtterance(id.to_string()));
        }
        read_wav(&path)
    }
}

impl AudioSource for HashMap<String, AudioBuffer> {
    fn load(&self, id: &str) -> Result<AudioBuffer> {
        self.get(id).cloned().ok_or_else(|| Error::MissingUtterance(id.to_string()))
    }
}

/// Cache key: utterance id plus the truncation that produced the audio.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CacheKey {
    pub id: String,
    pub seed: u64,
    /// Segment length in milliseconds; `None` for the whole utterance.
    pub duration_ms: Option<u64>,
}

impl CacheKey {
    fn new(id: &str, truncation: Option<Truncation>) -> Self {
        match truncation {
            None => Self {
                id: id.to_string(),
                seed: 0,
                duration_ms: None,
            },
            Some(t) => Self {
                id: id.to_string(),
                seed: t.seed,
                duration_ms: Some((t.seconds * 1000.0).round() as u64),
            },
        }
    }
}

/// Embeddings computed so far, reusable across runs with the same model.
pub type EmbeddingCache = HashMap<CacheKey, Vec<f64>>;

/// Number of worker threads: `AMCRN_THREADS` when set, else all cores.
pub fn worker_threads() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Runs `f` on a pool of [`worker_threads`] threads.
pub fn with_pool<T: Send>(f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(worker_threads())
        .build()
        .map_err(|e| Error::config(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

/// Embeds `id`, truncated when requested.
pub fn embed_utterance(
    model: &Amcrn,
    source: &dyn AudioSource,
    id: &str,
    truncation: Option<Truncation>,
) -> Result<Vec<f64>> {
    let audio = source.load(id)?;
    let audio = match truncation {
        Some(t) => truncate_segments(&audio, t.seconds, utterance_seed(t.seed, id))?.0,
        None => audio,
    };
    Ok(model.embed_audio(&audio)?.as_f64())
}

fn mean(vs: &[&Vec<f64>]) -> Vec<f64> {
    let mut out = vec![0.0; vs[0].len()];
    for v in vs {
        for (o, x) in out.iter_mut().zip(v.iter()) {
            *o += x;
        }
    }
    out.iter().map(|o| o / vs.len() as f64).collect()
}

/// Scores every trial and evaluates the result.
pub fn run_trials(
    model: &Amcrn,
    trials: &[Trial],
    source: &dyn AudioSource,
    backend: Backend<'_>,
    truncation: Option<Truncation>,
    cache: &mut EmbeddingCache,
) -> Result<(ScoreSet, EvalReport)> {
    let mut needed = BTreeSet::new();
    for t in trials {
        for e in t.enroll_refs() {
            needed.insert(CacheKey::new(e, None));
        }
        needed.insert(CacheKey::new(&t.test, truncation));
    }
    let missing: Vec<CacheKey> = needed.into_iter().filter(|k| !cache.contains_key(k)).collect();
    let computed: Vec<Result<(CacheKey, Vec<f64>)>> = with_pool(|| {
        missing
            .into_par_iter()
            .map(|k| {
                let t = k.duration_ms.map(|ms| Truncation {
                    seconds: ms as f64 / 1000.0,
                    seed: k.seed,
                });
                let e = embed_utterance(model, source, &k.id, t)?;
                Ok((k, e))
            })
            .collect()
    })?;
    for r in computed {
        let (k, e) = r?;
        cache.insert(k, e);
    }
    let cache = &*cache;
    let scores: Vec<Result<f64>> = with_pool(|| {
        trials
            .par_iter()
            .map(|t| {
                let enroll: Vec<&Vec<f64>> = t.enroll_refs().map(|e| &cache[&CacheKey::new(e, None)]).collect();
                let enroll = mean(&enroll);
                backend.score(&enroll, &cache[&CacheKey::new(&t.test, truncation)])
            })
            .collect()
    })?;
    let set: ScoreSet = trials
        .iter()
        .cloned()
        .zip(scores)
        .map(|(t, s)| s.map(|s| (t, s)))
        .collect::<Result<_>>()?;
    let report = EvalReport::from_scores(&labeled(&set))?;
    Ok((set, report))
}
