//! Audio front end: framing, Hamming window, power spectrum, mel filterbank,
//! log compression and sliding-window mean/variance normalization.

mod augment;
mod wav;

use std::f64::consts::PI;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::{Error, Result};

pub use augment::{augment, fft_convolve, mix_at_snr, mix_interferer, AugmentKind};
pub use wav::{read_wav, write_wav};

/// The only sample rate the front end accepts.
pub const SAMPLE_RATE: u32 = 16_000;
/// Floor applied to filterbank energies before the logarithm.
pub const LOG_FLOOR: f64 = 1e-10;
/// Floor applied to the sliding-window standard deviation.
pub const STD_FLOOR: f64 = 1e-8;
/// Default normalization window in seconds.
pub const CMVN_WINDOW_S: f64 = 3.0;

/// Mono PCM audio with amplitudes in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct AudioBuffer {
    samples: Vec<f32>,
    sample_rate: u32,
}

impl AudioBuffer {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::config("sample rate must be positive"));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::DegenerateInput(format!("sample {i} is not finite")));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Copy of `len` samples starting at `start`.
    pub fn slice(&self, start: usize, len: usize) -> AudioBuffer {
        AudioBuffer {
            samples: self.samples[start..start + len].to_vec(),
            sample_rate: self.sample_rate,
        }
    }

    pub fn into_samples(self) -> Vec<f32> {
        self.samples
    }
}

/// Framing and filterbank parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameSpec {
    /// Frame length in seconds.
    pub frame_len: f64,
    /// Frame shift in seconds.
    pub frame_shift: f64,
    pub n_fft: usize,
    pub n_mels: usize,
    pub f_min: f64,
    pub f_max: f64,
}

impl Default for FrameSpec {
    fn default() -> Self {
        Self {
            frame_len: 0.025,
            frame_shift: 0.010,
            n_fft: 512,
            n_mels: 80,
            f_min: 20.0,
            f_max: 7600.0,
        }
    }
}

impl FrameSpec {
    /// Frame length in samples.
    pub fn frame_samples(&self, sample_rate: u32) -> usize {
        (self.frame_len * sample_rate as f64).round() as usize
    }

    /// Frame shift in samples.
    pub fn shift_samples(&self, sample_rate: u32) -> usize {
        (self.frame_shift * sample_rate as f64).round() as usize
    }

    /// Number of frames produced for `n_samples` input samples, if any.
    pub fn n_frames(&self, n_samples: usize, sample_rate: u32) -> usize {
        let l = self.frame_samples(sample_rate);
        let s = self.shift_samples(sample_rate);
        if n_samples < l || s == 0 {
            0
        } else {
            (n_samples - l) / s + 1
        }
    }

    pub fn validate(&self, sample_rate: u32) -> Result<()> {
        let l = self.frame_samples(sample_rate);
        let s = self.shift_samples(sample_rate);
        if l < 2 || s == 0 {
            return Err(Error::config("frame length and shift must cover at least 2 and 1 samples"));
        }
        if self.frame_shift > self.frame_len {
            return Err(Error::config("frame shift exceeds frame length"));
        }
        if !self.n_fft.is_power_of_two() || self.n_fft < l {
            return Err(Error::config(format!(
                "n_fft = {} must be a power of two >= frame length {l}",
                self.n_fft
            )));
        }
        if self.n_mels == 0 {
            return Err(Error::config("n_mels must be positive"));
        }
        let nyquist = sample_rate as f64 / 2.0;
        if !(0.0 <= self.f_min && self.f_min < self.f_max && self.f_max <= nyquist) {
            return Err(Error::config(format!(
                "need 0 <= f_min < f_max <= {nyquist} Hz, got [{}, {}]",
                self.f_min, self.f_max
            )));
        }
        Ok(())
    }
}

/// Dense row-major matrix of reals.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    /// Rows `start..start + len` as a new matrix.
    pub fn row_range(&self, start: usize, len: usize) -> Matrix {
        Matrix {
            rows: len,
            cols: self.cols,
            data: self.data[start * self.cols..(start + len) * self.cols].to_vec(),
        }
    }
}

/// Log-mel spectrum: T frames by `n_mels` bins.
#[derive(Debug, Clone, PartialEq)]
pub struct LmsFeature {
    pub values: Matrix,
    pub frame_spec: FrameSpec,
}

impl LmsFeature {
    pub fn n_frames(&self) -> usize {
        self.values.rows()
    }

    pub fn n_mels(&self) -> usize {
        self.values.cols()
    }

    /// Frames `start..start + len`.
    pub fn crop(&self, start: usize, len: usize) -> LmsFeature {
        LmsFeature {
            values: self.values.row_range(start, len),
            frame_spec: self.frame_spec,
        }
    }
}

/// Hamming window of length `len`.
pub fn hamming(len: usize) -> Vec<f64> {
    let denom = (len - 1) as f64;
    (0..len)
        .map(|n| 0.54 - 0.46 * (2.0 * PI * n as f64 / denom).cos())
        .collect()
}

/// Splits audio into overlapping Hamming-windowed frames (T x frame length).
pub fn frame_and_window(audio: &AudioBuffer, spec: &FrameSpec) -> Result<Matrix> {
    let sr = audio.sample_rate();
    let l = spec.frame_samples(sr);
    let s = spec.shift_samples(sr);
    if l < 2 || s == 0 || spec.frame_shift > spec.frame_len {
        return Err(Error::config("invalid frame length/shift"));
    }
    if audio.len() < l {
        return Err(Error::InputTooShort {
            needed: l,
            got: audio.len(),
            unit: "samples",
        });
    }
    let t = (audio.len() - l) / s + 1;
    let window = hamming(l);
    let x = audio.samples();
    let mut out = Matrix::zeros(t, l);
    for f in 0..t {
        let src = &x[f * s..f * s + l];
        for ((o, &v), &w) in out.row_mut(f).iter_mut().zip(src).zip(&window) {
            *o = v as f64 * w;
        }
    }
    Ok(out)
}

/// |DFT|^2 of each zero-padded frame over the first `n_fft / 2 + 1` bins.
pub fn power_spectrum(frames: &Matrix, n_fft: usize) -> Result<Matrix> {
    if !n_fft.is_power_of_two() {
        return Err(Error::config(format!("n_fft = {n_fft} is not a power of two")));
    }
    if n_fft < frames.cols() {
        return Err(Error::config(format!(
            "n_fft = {n_fft} shorter than frame length {}",
            frames.cols()
        )));
    }
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n_fft);
    let n_bins = n_fft / 2 + 1;
    let mut out = Matrix::zeros(frames.rows(), n_bins);
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    let mut scratch = vec![Complex::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    for t in 0..frames.rows() {
        buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
        for (b, &v) in buf.iter_mut().zip(frames.row(t)) {
            b.re = v;
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        for (o, c) in out.row_mut(t).iter_mut().zip(&buf[..n_bins]) {
            *o = c.norm_sqr();
        }
    }
    Ok(out)
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Center frequencies (Hz) of the mel filters for `spec`.
pub fn mel_centers(spec: &FrameSpec) -> Vec<f64> {
    let lo = hz_to_mel(spec.f_min);
    let step = (hz_to_mel(spec.f_max) - lo) / (spec.n_mels + 1) as f64;
    (1..=spec.n_mels)
        .map(|m| mel_to_hz(lo + step * m as f64))
        .collect()
}

/// Triangular filters (n_mels x (n_fft/2 + 1)) equally spaced on the mel scale.
///
/// Each triangle is linear in mel between its two neighbours' centers, so the
/// peak lands on the bin closest to the center on the mel axis.
pub fn mel_filterbank(spec: &FrameSpec, sample_rate: u32) -> Result<Matrix> {
    spec.validate(sample_rate)?;
    let n_bins = spec.n_fft / 2 + 1;
    let lo = hz_to_mel(spec.f_min);
    let step = (hz_to_mel(spec.f_max) - lo) / (spec.n_mels + 1) as f64;
    let bin_mel: Vec<f64> = (0..n_bins)
        .map(|k| hz_to_mel(k as f64 * sample_rate as f64 / spec.n_fft as f64))
        .collect();
    let mut fb = Matrix::zeros(spec.n_mels, n_bins);
    for m in 0..spec.n_mels {
        let left = lo + step * m as f64;
        let center = left + step;
        let right = center + step;
        for (w, &mk) in fb.row_mut(m).iter_mut().zip(&bin_mel) {
            if mk > left && mk < right {
                *w = if mk <= center {
                    (mk - left) / (center - left)
                } else {
                    (right - mk) / (right - center)
                };
            }
        }
        if fb.row(m).iter().all(|&w| w == 0.0) {
            return Err(Error::config(format!(
                "mel filter {m} covers no FFT bin; increase n_fft or reduce n_mels"
            )));
        }
    }
    Ok(fb)
}

/// Log-mel spectrum of 16 kHz audio.
pub fn extract_lms(audio: &AudioBuffer, spec: &FrameSpec) -> Result<LmsFeature> {
    if audio.sample_rate() != SAMPLE_RATE {
        return Err(Error::config(format!(
            "unsupported sample rate {} Hz (expected {SAMPLE_RATE})",
            audio.sample_rate()
        )));
    }
    spec.validate(audio.sample_rate())?;
    let frames = frame_and_window(audio, spec)?;
    let power = power_spectrum(&frames, spec.n_fft)?;
    let fb = mel_filterbank(spec, audio.sample_rate())?;
    let mut out = Matrix::zeros(power.rows(), spec.n_mels);
    for t in 0..power.rows() {
        let p = power.row(t);
        for (m, o) in out.row_mut(t).iter_mut().enumerate() {
            let e: f64 = fb.row(m).iter().zip(p).map(|(w, v)| w * v).sum();
            *o = e.max(LOG_FLOOR).ln();
        }
    }
    Ok(LmsFeature {
        values: out,
        frame_spec: *spec,
    })
}

/// Number of frames in a normalization window of `window_s` seconds.
pub fn cmvn_window_frames(window_s: f64, frame_shift: f64) -> usize {
    ((window_s / frame_shift).round() as usize).max(1)
}

/// Frame range `[start, end)` of the normalization window centered on frame `t`.
pub fn cmvn_window_range(t: usize, n_frames: usize, window: usize) -> (usize, usize) {
    let half = window / 2;
    let start = t.saturating_sub(half);
    let end = (t + window - half).min(n_frames);
    (start, end)
}

/// Sliding-window mean/variance normalization with a window of `window_s`
/// seconds centered on each frame and clipped at the utterance edges.
pub fn apply_cmvn(lms: &LmsFeature, window_s: f64) -> LmsFeature {
    let t_len = lms.n_frames();
    let m_len = lms.n_mels();
    let w = cmvn_window_frames(window_s, lms.frame_spec.frame_shift);
    let x = &lms.values;
    let mut out = Matrix::zeros(t_len, m_len);
    if t_len == 0 {
        return LmsFeature {
            values: out,
            frame_spec: lms.frame_spec,
        };
    }
    // Sums are kept relative to frame 0 to avoid cancellation on flat inputs.
    let shift: Vec<f64> = x.row(0).to_vec();
    let mut sum = vec![0.0; m_len];
    let mut sum_sq = vec![0.0; m_len];
    let (mut lo, mut hi) = (0usize, 0usize);
    for t in 0..t_len {
        let (start, end) = cmvn_window_range(t, t_len, w);
        while hi < end {
            for (m, v) in x.row(hi).iter().enumerate() {
                let d = v - shift[m];
                sum[m] += d;
                sum_sq[m] += d * d;
            }
            hi += 1;
        }
        while lo < start {
            for (m, v) in x.row(lo).iter().enumerate() {
                let d = v - shift[m];
                sum[m] -= d;
                sum_sq[m] -= d * d;
            }
            lo += 1;
        }
        let n = (end - start) as f64;
        let row = x.row(t);
        for (m, o) in out.row_mut(t).iter_mut().enumerate() {
            let mean = sum[m] / n;
            let var = (sum_sq[m] / n - mean * mean).max(0.0);
            let std = var.sqrt().max(STD_FLOOR);
            *o = ((row[m] - shift[m]) - mean) / std;
        }
    }
    LmsFeature {
        values: out,
        frame_spec: lms.frame_spec,
    }
}

/// LMS followed by sliding-window normalization: the network input.
pub fn features(audio: &AudioBuffer, spec: &FrameSpec, cmvn_window_s: f64) -> Result<LmsFeature> {
    Ok(apply_cmvn(&extract_lms(audio, spec)?, cmvn_window_s))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn audio(samples: Vec<f32>) -> AudioBuffer {
        AudioBuffer::new(samples, SAMPLE_RATE).unwrap()
    }

    fn sine(freq: f64, seconds: f64, amp: f64) -> AudioBuffer {
        let n = (seconds * SAMPLE_RATE as f64) as usize;
        audio(
            (0..n)
                .map(|i| (amp * (2.0 * PI * freq * i as f64 / SAMPLE_RATE as f64).sin()) as f32)
                .collect(),
        )
    }

    // Direct O(n^2) DFT power.
    fn dft_power(x: &[f64], n_fft: usize) -> Vec<f64> {
        (0..n_fft / 2 + 1)
            .map(|k| {
                let (mut re, mut im) = (0.0, 0.0);
                for (n, &v) in x.iter().enumerate() {
                    let a = -2.0 * PI * (k * n) as f64 / n_fft as f64;
                    re += v * a.cos();
                    im += v * a.sin();
                }
                re * re + im * im
            })
            .collect()
    }

    #[test]
    fn one_second_gives_98_frames() {
        let frames = frame_and_window(&audio(vec![0.1; 16000]), &FrameSpec::default()).unwrap();
        assert_eq!(frames.rows(), 98);
        assert_eq!(frames.cols(), 400);
    }

    #[test]
    fn unit_input_frames_are_the_window() {
        let frames = frame_and_window(&audio(vec![1.0; 1000]), &FrameSpec::default()).unwrap();
        let w = hamming(400);
        for t in 0..frames.rows() {
            assert_eq!(frames.row(t), &w[..]);
        }
        assert!((w[0] - 0.08).abs() < 1e-12 && (w[399] - 0.08).abs() < 1e-12);
    }

    #[test]
    fn frame_t_starts_at_t_times_shift() {
        let x: Vec<f32> = (0..2000).map(|i| i as f32 / 2000.0).collect();
        let frames = frame_and_window(&audio(x.clone()), &FrameSpec::default()).unwrap();
        let w = hamming(400);
        for t in [0usize, 1, 5] {
            assert!((frames.get(t, 1) - x[t * 160 + 1] as f64 * w[1]).abs() < 1e-15);
        }
    }

    #[test]
    fn short_input_is_rejected() {
        let err = frame_and_window(&audio(vec![0.0; 399]), &FrameSpec::default()).unwrap_err();
        assert!(matches!(err, Error::InputTooShort { needed: 400, got: 399, .. }));
    }

    #[test]
    fn power_spectrum_of_zero_frame_is_zero() {
        let p = power_spectrum(&Matrix::zeros(2, 400), 512).unwrap();
        assert_eq!(p.cols(), 257);
        assert!(p.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn power_spectrum_rejects_short_fft() {
        assert!(matches!(
            power_spectrum(&Matrix::zeros(1, 400), 256),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            power_spectrum(&Matrix::zeros(1, 400), 500),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn bin_centered_cosine_matches_direct_dft() {
        let n_fft = 512;
        let k0 = 37;
        let x: Vec<f64> = (0..400)
            .map(|n| (2.0 * PI * (k0 * n) as f64 / n_fft as f64).cos())
            .collect();
        let p = power_spectrum(&Matrix::from_vec(1, 400, x.clone()).unwrap(), n_fft).unwrap();
        let oracle = dft_power(&x, n_fft);
        let peak = oracle[k0];
        for (a, b) in p.row(0).iter().zip(&oracle) {
            assert!((a - b).abs() <= 1e-9 * peak);
        }
        let argmax = (0..p.cols())
            .max_by(|&a, &b| p.get(0, a).total_cmp(&p.get(0, b)))
            .unwrap();
        assert_eq!(argmax, k0);
    }

    #[test]
    fn parseval_holds() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x: Vec<f64> = (0..400).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n_fft = 512;
        let p = power_spectrum(&Matrix::from_vec(1, 400, x.clone()).unwrap(), n_fft).unwrap();
        let half = p.row(0);
        // Full spectrum from the one-sided half of a real signal.
        let full: f64 = half[0] + half[n_fft / 2] + 2.0 * half[1..n_fft / 2].iter().sum::<f64>();
        let energy: f64 = x.iter().map(|v| v * v).sum();
        assert!((full - n_fft as f64 * energy).abs() <= 1e-6 * full);
    }

    #[test]
    fn filterbank_rows_are_compact_triangles() {
        let spec = FrameSpec::default();
        let fb = mel_filterbank(&spec, SAMPLE_RATE).unwrap();
        assert_eq!(fb.rows(), 80);
        assert_eq!(fb.cols(), 257);
        let centers = mel_centers(&spec);
        let bin_hz = SAMPLE_RATE as f64 / spec.n_fft as f64;
        for m in 0..80 {
            let row = fb.row(m);
            assert!(row.iter().all(|&w| (0.0..=1.0).contains(&w)));
            assert!(row.iter().any(|&w| w > 0.0));
            let support: Vec<usize> = (0..row.len()).filter(|&k| row[k] > 0.0).collect();
            // Contiguous support.
            assert_eq!(support.last().unwrap() - support[0] + 1, support.len());
            // Peak at the bin nearest (on the mel axis) to the center.
            let argmax = (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
            let cm = hz_to_mel(centers[m]);
            let nearest = (0..row.len())
                .min_by(|&a, &b| {
                    let da = (hz_to_mel(a as f64 * bin_hz) - cm).abs();
                    let db = (hz_to_mel(b as f64 * bin_hz) - cm).abs();
                    da.total_cmp(&db)
                })
                .unwrap();
            assert_eq!(argmax, nearest, "filter {m}");
        }
    }

    #[test]
    fn filterbank_covers_the_band() {
        let spec = FrameSpec::default();
        let fb = mel_filterbank(&spec, SAMPLE_RATE).unwrap();
        let bin_hz = SAMPLE_RATE as f64 / spec.n_fft as f64;
        for k in 0..fb.cols() {
            let f = k as f64 * bin_hz;
            if f > spec.f_min && f < spec.f_max {
                let col: f64 = (0..fb.rows()).map(|m| fb.get(m, k)).sum();
                assert!(col > 0.0, "bin {k} at {f} Hz uncovered");
            }
        }
    }

    #[test]
    fn filterbank_rejects_band_above_nyquist() {
        let spec = FrameSpec {
            f_max: 9000.0,
            ..FrameSpec::default()
        };
        assert!(matches!(mel_filterbank(&spec, SAMPLE_RATE), Err(Error::Config(_))));
    }

    #[test]
    fn silence_maps_to_log_floor() {
        let lms = extract_lms(&audio(vec![0.0; 16000]), &FrameSpec::default()).unwrap();
        assert_eq!(lms.n_mels(), 80);
        assert!(lms.values.as_slice().iter().all(|&v| v == LOG_FLOOR.ln()));
    }

    #[test]
    fn sine_peaks_at_nearest_filter() {
        let spec = FrameSpec::default();
        let lms = extract_lms(&sine(1000.0, 0.5, 0.5), &spec).unwrap();
        let centers = mel_centers(&spec);
        let nearest = (0..centers.len())
            .min_by(|&a, &b| (centers[a] - 1000.0).abs().total_cmp(&(centers[b] - 1000.0).abs()))
            .unwrap();
        for t in 0..lms.n_frames() {
            let row = lms.values.row(t);
            let argmax = (0..80).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
            assert_eq!(argmax, nearest);
        }
    }

    #[test]
    fn other_sample_rates_are_rejected() {
        let a = AudioBuffer::new(vec![0.0; 8000], 8000).unwrap();
        assert!(matches!(extract_lms(&a, &FrameSpec::default()), Err(Error::Config(_))));
    }

    #[test]
    fn extraction_is_deterministic_and_shift_covariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x: Vec<f32> = (0..8000).map(|_| rng.random_range(-0.5..0.5)).collect();
        let spec = FrameSpec::default();
        let a = extract_lms(&audio(x.clone()), &spec).unwrap();
        let b = extract_lms(&audio(x.clone()), &spec).unwrap();
        assert_eq!(a, b);
        let k = 3;
        let shifted = extract_lms(&audio(x[k * 160..].to_vec()), &spec).unwrap();
        for t in 0..shifted.n_frames() {
            for m in 0..80 {
                assert!((shifted.values.get(t, m) - a.values.get(t + k, m)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn cmvn_window_is_300_frames() {
        assert_eq!(cmvn_window_frames(3.0, 0.010), 300);
    }

    #[test]
    fn cmvn_of_constant_feature_is_zero() {
        let lms = LmsFeature {
            values: Matrix::from_vec(50, 3, [1.5, -2.0, 7.25].repeat(50)).unwrap(),
            frame_spec: FrameSpec::default(),
        };
        let out = apply_cmvn(&lms, 0.2);
        assert!(out.values.as_slice().iter().all(|&v| v == 0.0));
    }
}
