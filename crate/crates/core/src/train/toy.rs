//! Synthetic multi-speaker corpus.
//!
//! Each speaker owns a vocal-tract filter of three resonances, a small
//! inventory of vowels (fixed scalings of those resonances) and a pitch
//! range, all drawn once from the speaker seed. An utterance is a sequence
//! of syllables: a glottal pulse train (with jitter and an intonation
//! contour) plus breath noise, shaped by the resonances of one vowel with
//! a little per-syllable jitter, under a smooth amplitude envelope with
//! pauses in between. A faint background noise is always present.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{Dataset, LabeledAudio};
use crate::dsp::write_wav;
use crate::dsp::{AudioBuffer, SAMPLE_RATE};
use crate::{Error, Result};

/// Size and seed of a synthetic corpus.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToySpeakerSpec {
    pub n_speakers: usize,
    pub utterances_per_speaker: usize,
    pub utterance_seconds: f64,
    pub seed: u64,
}

impl Default for ToySpeakerSpec {
    fn default() -> Self {
        Self {
            n_speakers: 20,
            utterances_per_speaker: 10,
            utterance_seconds: 6.0,
            seed: 0,
        }
    }
}

/// Vowels per speaker.
pub const VOWELS: usize = 4;

/// Fixed characteristics of one synthetic speaker.
#[derive(Debug, Clone)]
pub struct ToyVoice {
    /// Resonance centre frequencies in Hz.
    pub formants: [f64; 3],
    /// Resonance bandwidths in Hz.
    pub bandwidths: [f64; 3],
    /// Per-vowel scale factors of the three resonances.
    pub vowels: [[f64; 3]; VOWELS],
    /// Median fundamental frequency in Hz.
    pub f0: f64,
    /// Ratio of breath noise to voiced excitation.
    pub breathiness: f64,
}

impl ToyVoice {
    pub fn sample(rng: &mut impl Rng) -> Self {
        Self {
            formants: [
                rng.random_range(300.0..900.0),
                rng.random_range(1000.0..2400.0),
                rng.random_range(2600.0..4200.0),
            ],
            bandwidths: [
                rng.random_range(60.0..140.0),
                rng.random_range(80.0..180.0),
                rng.random_range(120.0..260.0),
            ],
            vowels: std::array::from_fn(|_| std::array::from_fn(|_| rng.random_range(0.8..1.25))),
            f0: rng.random_range(85.0..260.0),
            breathiness: rng.random_range(0.02..0.2),
        }
    }
}

/// Two-pole resonator normalized to unit gain at its centre frequency.
struct Resonator {
    a1: f64,
    a2: f64,
    gain: f64,
    y1: f64,
    y2: f64,
}

impl Resonator {
    fn new(freq: f64, bw: f64, sr: f64) -> Self {
        let r = (-PI * bw / sr).exp();
        let theta = 2.0 * PI * freq / sr;
        Self {
            a1: 2.0 * r * theta.cos(),
            a2: -r * r,
            gain: 1.0 - r,
            y1: 0.0,
            y2: 0.0,
        }
    }

    fn retune(&mut self, freq: f64, bw: f64, sr: f64) {
        let fresh = Self::new(freq, bw, sr);
        self.a1 = fresh.a1;
        self.a2 = fresh.a2;
        self.gain = fresh.gain;
    }

    fn tick(&mut self, x: f64) -> f64 {
        let y = self.gain * x + self.a1 * self.y1 + self.a2 * self.y2;
        self.y2 = self.y1;
        self.y1 = y;
        y
    }
}

fn utterance_seed(spec_seed: u64, speaker: usize, utt: usize) -> u64 {
    spec_seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add((speaker as u64) << 32 | utt as u64)
}

/// Renders one utterance of `voice`.
pub fn synthesize(voice: &ToyVoice, seconds: f64, seed: u64) -> Result<AudioBuffer> {
    if !(seconds > 0.0) {
        return Err(Error::config("utterance length must be positive"));
    }
    let sr = SAMPLE_RATE as f64;
    let n = (seconds * sr).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![0.0f64; n];
    let mut res: Vec<Resonator> = (0..3)
        .map(|k| Resonator::new(voice.formants[k], voice.bandwidths[k], sr))
        .collect();
    let mut pos = (rng.random_range(0.05..0.3) * sr) as usize;
    let mut phase = 0.0f64;
    while pos < n {
        let syl = (rng.random_range(0.12..0.35) * sr) as usize;
        let end = (pos + syl).min(n);
        let vowel = voice.vowels[rng.random_range(0..VOWELS)];
        for (k, r) in res.iter_mut().enumerate() {
            let jitter = rng.random_range(0.97..1.03);
            r.retune(voice.formants[k] * vowel[k] * jitter, voice.bandwidths[k], sr);
        }
        let level = rng.random_range(0.5..1.0);
        let f0_start = voice.f0 * rng.random_range(0.9..1.12);
        let f0_end = voice.f0 * rng.random_range(0.85..1.05);
        let len = (end - pos).max(1) as f64;
        for i in pos..end {
            let u = (i - pos) as f64 / len;
            let f0 = (f0_start + (f0_end - f0_start) * u) * (1.0 + 0.01 * rng.random::<f64>());
            phase += f0 / sr;
            let pulse = if phase >= 1.0 {
                phase -= 1.0;
                1.0
            } else {
                0.0
            };
            let breath: f64 = rng.sample::<f64, _>(StandardNormal) * voice.breathiness;
            let mut y = pulse + breath;
            for r in res.iter_mut() {
                y = r.tick(y) * 4.0;
            }
            let env = (PI * u).sin().powf(0.7);
            out[i] += level * env * y;
        }
        pos = end + (rng.random_range(0.03..0.25) * sr) as usize;
    }
    let peak = out.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let scale = if peak > 0.0 { 0.5 / peak } else { 1.0 };
    let samples = out
        .iter()
        .map(|v| (v * scale + 1e-3 * rng.sample::<f64, _>(StandardNormal)).clamp(-1.0, 1.0) as f32)
        .collect();
    AudioBuffer::new(samples, SAMPLE_RATE)
}

/// Deterministic synthetic corpus. Utterance ids are `spkNN/uttMM`.
pub fn make_toy_dataset(spec: &ToySpeakerSpec) -> Result<Dataset> {
    if spec.n_speakers < 2 {
        return Err(Error::config("a toy corpus needs at least 2 speakers"));
    }
    if spec.utterances_per_speaker == 0 {
        return Err(Error::config("a toy corpus needs at least 1 utterance per speaker"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut ds = Dataset::default();
    for s in 0..spec.n_speakers {
        let voice = ToyVoice::sample(&mut rng);
        let name = format!("spk{s:02}");
        for u in 0..spec.utterances_per_speaker {
            ds.items.push(LabeledAudio {
                id: format!("{name}/utt{u:02}"),
                speaker: s,
                audio: synthesize(&voice, spec.utterance_seconds, utterance_seed(spec.seed, s, u))?,
            });
        }
        ds.speakers.push(name);
    }
    Ok(ds)
}

/// Writes a dataset as `root/<speaker>/<utt>.wav`.
pub fn write_dataset(ds: &Dataset, root: &Path) -> Result<()> {
    for item in &ds.items {
        let path = root.join(format!("{}.wav", item.id));
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        write_wav(&path, &item.audio)?;
    }
    Ok(())
}
