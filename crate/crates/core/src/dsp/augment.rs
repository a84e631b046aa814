//! Synthetic data augmentation: additive noise, music-like and babble-like
//! interferers mixed at a target SNR, and exponentially decaying reverberation.

use std::f64::consts::PI;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::AudioBuffer;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AugmentKind {
    Noise,
    Music,
    Babble,
    Reverb,
}

impl AugmentKind {
    pub const ALL: [AugmentKind; 4] = [
        AugmentKind::Noise,
        AugmentKind::Music,
        AugmentKind::Babble,
        AugmentKind::Reverb,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AugmentKind::Noise => "noise",
            AugmentKind::Music => "music",
            AugmentKind::Babble => "babble",
            AugmentKind::Reverb => "reverb",
        }
    }
}

impl FromStr for AugmentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "noise" => Ok(AugmentKind::Noise),
            "music" | "music-like" => Ok(AugmentKind::Music),
            "babble" | "babble-like" => Ok(AugmentKind::Babble),
            "reverb" => Ok(AugmentKind::Reverb),
            other => Err(Error::config(format!("unknown augmentation kind `{other}`"))),
        }
    }
}

fn mean_power(x: &[f64]) -> f64 {
    if x.is_empty() {
        0.0
    } else {
        x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64
    }
}

fn finish(samples: impl Iterator<Item = f64>, sample_rate: u32) -> Result<AudioBuffer> {
    AudioBuffer::new(
        samples.map(|v| v.clamp(-1.0, 1.0) as f32).collect(),
        sample_rate,
    )
}

/// Adds `interferer` (same length) scaled so that clean/interferer power equals
/// `snr_db`, then clips to [-1, 1]. An infinite SNR returns the input unchanged.
pub fn mix_at_snr(audio: &AudioBuffer, interferer: &[f64], snr_db: f64) -> Result<AudioBuffer> {
    if snr_db.is_nan() || snr_db == f64::NEG_INFINITY {
        return Err(Error::config(format!("invalid SNR {snr_db} dB")));
    }
    if interferer.len() != audio.len() {
        return Err(Error::shape("interferer length differs from the audio"));
    }
    if snr_db == f64::INFINITY {
        return Ok(audio.clone());
    }
    let clean: Vec<f64> = audio.samples().iter().map(|&v| v as f64).collect();
    let p_clean = mean_power(&clean);
    let p_int = mean_power(interferer);
    if p_int == 0.0 || p_clean == 0.0 {
        return Ok(audio.clone());
    }
    let gain = (p_clean / (p_int * 10f64.powf(snr_db / 10.0))).sqrt();
    finish(
        clean.iter().zip(interferer).map(|(c, n)| c + gain * n),
        audio.sample_rate(),
    )
}

/// Mixes a recorded interferer (looped from a random offset) at `snr_db`.
/// This is the hook for real noise/music/babble corpora.
pub fn mix_interferer(
    audio: &AudioBuffer,
    interferer: &AudioBuffer,
    snr_db: f64,
    seed: u64,
) -> Result<AudioBuffer> {
    if interferer.is_empty() {
        return Err(Error::DegenerateInput("empty interferer".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let offset = rng.random_range(0..interferer.len());
    let src = interferer.samples();
    let looped: Vec<f64> = (0..audio.len())
        .map(|i| src[(offset + i) % src.len()] as f64)
        .collect();
    mix_at_snr(audio, &looped, snr_db)
}

/// One-pole lowpass over white Gaussian noise; `pole` in [0, 1).
fn colored_noise(n: usize, pole: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut y = 0.0;
    (0..n)
        .map(|_| {
            let w: f64 = rng.sample(StandardNormal);
            y = pole * y + (1.0 - pole) * w;
            y
        })
        .collect()
}

/// Two-pole resonator applied in place.
fn resonate(x: &mut [f64], freq: f64, bandwidth: f64, sample_rate: f64) {
    let r = (-PI * bandwidth / sample_rate).exp();
    let a1 = 2.0 * r * (2.0 * PI * freq / sample_rate).cos();
    let a2 = -r * r;
    let g = 1.0 - r;
    let (mut y1, mut y2) = (0.0, 0.0);
    for v in x.iter_mut() {
        let y = g * *v + a1 * y1 + a2 * y2;
        y2 = y1;
        y1 = y;
        *v = y;
    }
}

fn music_like(n: usize, sr: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut out = vec![0.0; n];
    let voices = rng.random_range(2..=4);
    for _ in 0..voices {
        let mut start = 0usize;
        while start < n {
            let note_len = ((rng.random_range(0.15..0.5)) * sr) as usize;
            let end = (start + note_len).min(n);
            let midi: f64 = rng.random_range(45.0..84.0f64).round();
            let f0 = 440.0 * 2f64.powf((midi - 69.0) / 12.0);
            let amp = rng.random_range(0.3..1.0);
            let phase = rng.random_range(0.0..2.0 * PI);
            for (i, o) in out[start..end].iter_mut().enumerate() {
                let t = i as f64 / sr;
                let env = (-3.0 * t / (note_len as f64 / sr)).exp() * (1.0 - (-200.0 * t).exp());
                let mut s = 0.0;
                for h in 1..=3 {
                    let f = f0 * h as f64;
                    if f < sr / 2.0 {
                        s += (2.0 * PI * f * t + phase).sin() / h as f64;
                    }
                }
                *o += amp * env * s;
            }
            start = end;
        }
    }
    out
}

fn babble_like(n: usize, sr: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut out = vec![0.0; n];
    let talkers = rng.random_range(3..=7);
    for _ in 0..talkers {
        let mut x = colored_noise(n, 0.3, rng);
        let center = rng.random_range(300.0..3000.0);
        resonate(&mut x, center, center * 0.5, sr);
        // Syllable-rate on/off gating.
        let mut i = 0usize;
        let mut on = rng.random_bool(0.5);
        while i < n {
            let len = (rng.random_range(0.08..0.35) * sr) as usize;
            let end = (i + len).min(n);
            if on {
                for k in i..end {
                    out[k] += x[k];
                }
            }
            on = !on;
            i = end;
        }
    }
    out
}

/// Linear convolution via FFT, truncated to `x.len()` samples.
pub fn fft_convolve(x: &[f64], h: &[f64]) -> Vec<f64> {
    if x.is_empty() || h.is_empty() {
        return vec![0.0; x.len()];
    }
    let n = (x.len() + h.len() - 1).next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let mut a: Vec<Complex<f64>> = (0..n)
        .map(|i| Complex::new(x.get(i).copied().unwrap_or(0.0), 0.0))
        .collect();
    let mut b: Vec<Complex<f64>> = (0..n)
        .map(|i| Complex::new(h.get(i).copied().unwrap_or(0.0), 0.0))
        .collect();
    fwd.process(&mut a);
    fwd.process(&mut b);
    for (u, v) in a.iter_mut().zip(&b) {
        *u *= v;
    }
    inv.process(&mut a);
    a[..x.len()].iter().map(|c| c.re / n as f64).collect()
}

/// Late reverberation tail: exponentially decaying Gaussian noise after a
/// short pre-delay, with RT60 drawn from [0.2, 0.8] s.
fn reverb_tail(x: &[f64], sr: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let rt60 = rng.random_range(0.2..0.8);
    let predelay = (rng.random_range(0.002..0.01) * sr) as usize;
    let len = (rt60 * sr) as usize;
    let mut h = vec![0.0; predelay + len];
    for (i, v) in h[predelay..].iter_mut().enumerate() {
        let g: f64 = rng.sample(StandardNormal);
        *v = g * (-6.9 * i as f64 / (rt60 * sr)).exp();
    }
    fft_convolve(x, &h)
}

/// Applies one augmentation. For additive kinds `snr_db` is the clean to
/// interferer power ratio; for reverb it is the direct to reverberant ratio.
/// `f64::INFINITY` leaves the input untouched. Deterministic in `seed`.
pub fn augment(audio: &AudioBuffer, kind: AugmentKind, snr_db: f64, seed: u64) -> Result<AudioBuffer> {
    if snr_db.is_nan() || snr_db == f64::NEG_INFINITY {
        return Err(Error::config(format!("invalid SNR {snr_db} dB")));
    }
    if snr_db == f64::INFINITY {
        return Ok(audio.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = audio.len();
    let sr = audio.sample_rate() as f64;
    let interferer = match kind {
        AugmentKind::Noise => {
            let pole = rng.random_range(0.0..0.95);
            colored_noise(n, pole, &mut rng)
        }
        AugmentKind::Music => music_like(n, sr, &mut rng),
        AugmentKind::Babble => babble_like(n, sr, &mut rng),
        AugmentKind::Reverb => {
            let x: Vec<f64> = audio.samples().iter().map(|&v| v as f64).collect();
            reverb_tail(&x, sr, &mut rng)
        }
    };
    mix_at_snr(audio, &interferer, snr_db)
}
