use std::path::Path;

use super::{AudioBuffer, SAMPLE_RATE};
use crate::{Error, Result};

/// Reads a 16-bit PCM mono 16 kHz WAV file; samples are scaled by 1/32768.
pub fn read_wav(path: &Path) -> Result<AudioBuffer> {
    let mut reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::Format(format!(
            "{}: expected mono audio, found {} channels",
            path.display(),
            spec.channels
        )));
    }
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(Error::Format(format!(
            "{}: expected 16-bit integer PCM",
            path.display()
        )));
    }
    if spec.sample_rate != SAMPLE_RATE {
        return Err(Error::Config(format!(
            "{}: unsupported sample rate {} Hz (expected {SAMPLE_RATE})",
            path.display(),
            spec.sample_rate
        )));
    }
    let samples = reader
        .samples::<i16>()
        .map(|s| s.map(|v| v as f32 / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    AudioBuffer::new(samples, spec.sample_rate)
}

/// Writes 16-bit PCM mono; samples are clamped to the representable range.
pub fn write_wav(path: &Path, audio: &AudioBuffer) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: audio.sample_rate(),
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut bytes = Vec::new();
    {
        let mut w = hound::WavWriter::new(std::io::Cursor::new(&mut bytes), spec)?;
        for &s in audio.samples() {
            let v = (s as f64 * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
            w.write_sample(v)?;
        }
        w.finalize()?;
    }
    crate::fsutil::write_atomic(path, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_quantized_samples() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wav");
        let samples: Vec<f32> = [-32768i32, -1, 0, 1, 12345, 32767]
            .iter()
            .map(|&v| v as f32 / 32768.0)
            .collect();
        let a = AudioBuffer::new(samples, SAMPLE_RATE).unwrap();
        write_wav(&p, &a).unwrap();
        assert_eq!(read_wav(&p).unwrap(), a);
    }

    #[test]
    fn rejects_other_rates() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wav");
        write_wav(&p, &AudioBuffer::new(vec![0.0; 10], 8000).unwrap()).unwrap();
        assert!(matches!(read_wav(&p), Err(Error::Config(_))));
    }
}
