//! Minimal WAV path: decode PCM with `hound`, then reduce each video frame's
//! worth of samples to `Da` features in (0, 1).
//!
//! Channel 0 is the frame's log RMS energy, which is what the synthetic
//! corpus uses as its lip driver. The remaining channels are log energies of
//! equal-width FFT bands.

use std::path::Path;

use ndarray::Array2;
use rustfft::{num_complex::Complex, FftPlanner};

use crate::error::{MmgtError, Result};
use crate::pose::AudioFeatureSequence;

#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

/// Reads a PCM WAV file, averaging channels to mono.
pub fn read_wav(path: &Path) -> Result<Waveform> {
    if !path.exists() {
        return Err(MmgtError::NotFound(path.to_path_buf()));
    }
    let integrity = |e: hound::Error| MmgtError::Integrity {
        path: path.display().to_string(),
        reason: e.to_string(),
    };
    let mut reader = hound::WavReader::open(path).map_err(integrity)?;
    let spec = reader.spec();
    let channels = spec.channels.max(1) as usize;
    let interleaved: Vec<f32> = match spec.sample_format {
        hound::SampleFormat::Float => reader.samples::<f32>().collect::<std::result::Result<_, _>>().map_err(integrity)?,
        hound::SampleFormat::Int => {
            let scale = (1i64 << (spec.bits_per_sample - 1)) as f32;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f32 / scale))
                .collect::<std::result::Result<_, _>>()
                .map_err(integrity)?
        }
    };
    let samples = interleaved
        .chunks(channels)
        .map(|c| c.iter().sum::<f32>() / channels as f32)
        .collect();
    Ok(Waveform {
        samples,
        sample_rate: spec.sample_rate,
    })
}

/// Writes mono 16-bit PCM.
pub fn write_wav(path: &Path, wave: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: wave.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut buf = std::io::Cursor::new(Vec::new());
    {
        let mut w = hound::WavWriter::new(&mut buf, spec).map_err(|e| MmgtError::invalid(e.to_string()))?;
        for s in &wave.samples {
            let v = (s.clamp(-1.0, 1.0) * i16::MAX as f32).round() as i16;
            w.write_sample(v).map_err(|e| MmgtError::invalid(e.to_string()))?;
        }
        w.finalize().map_err(|e| MmgtError::invalid(e.to_string()))?;
    }
    crate::formats::write_atomic(path, &buf.into_inner())
}

fn squash(log_energy: f64) -> f32 {
    // log energies of speech-like signals sit roughly in [-12, 0]
    (1.0 / (1.0 + (-(log_energy + 6.0) / 2.0).exp())) as f32
}

/// Frame-rate features: one row per video frame.
pub fn audio_features(wave: &Waveform, fps: f32, dim: usize) -> Result<AudioFeatureSequence> {
    if dim < 2 {
        return Err(MmgtError::invalid("audio feature dim must be at least 2"));
    }
    if !(fps > 0.0) || wave.sample_rate == 0 {
        return Err(MmgtError::invalid("fps and sample rate must be positive"));
    }
    let hop = (wave.sample_rate as f64 / fps as f64).round().max(1.0) as usize;
    let frames = wave.samples.len() / hop;
    if frames == 0 {
        return Err(MmgtError::InsufficientData(format!(
            "waveform of {} samples is shorter than one video frame",
            wave.samples.len()
        )));
    }
    let fft = FftPlanner::<f64>::new().plan_fft_forward(hop);
    let bins = hop / 2 + 1;
    let bands = dim - 1;
    let mut out = Array2::<f32>::zeros((frames, dim));
    for f in 0..frames {
        let chunk = &wave.samples[f * hop..(f + 1) * hop];
        let energy = chunk.iter().map(|&s| (s as f64).powi(2)).sum::<f64>() / hop as f64;
        out[[f, 0]] = squash((energy + 1e-12).ln());
        let mut buf: Vec<Complex<f64>> = chunk.iter().map(|&s| Complex::new(s as f64, 0.0)).collect();
        fft.process(&mut buf);
        for b in 0..bands {
            let lo = b * bins / bands;
            let hi = ((b + 1) * bins / bands).max(lo + 1).min(bins);
            let e = buf[lo..hi].iter().map(|c| c.norm_sqr()).sum::<f64>() / (hop * hop) as f64;
            out[[f, b + 1]] = squash((e + 1e-12).ln());
        }
    }
    AudioFeatureSequence::new(out, fps)
}

/// Renders features back into a waveform: band `c` becomes a sinusoid whose
/// amplitude follows the feature. Used to give the demo pipeline a WAV input.
pub fn synthesize_wav(features: &AudioFeatureSequence, sample_rate: u32) -> Waveform {
    let hop = (sample_rate as f64 / features.fps as f64).round().max(1.0) as usize;
    let dim = features.dim();
    let mut samples = Vec::with_capacity(features.frames() * hop);
    for f in 0..features.frames() {
        let row = features.data.row(f);
        for i in 0..hop {
            let t = (f * hop + i) as f64 / sample_rate as f64;
            let mut s = 0.0;
            for c in 1..dim {
                let freq = 120.0 * (c as f64) + 80.0;
                s += row[c] as f64 * (std::f64::consts::TAU * freq * t).sin();
            }
            samples.push((0.5 * row[0] as f64 * s / (dim - 1) as f64) as f32);
        }
    }
    Waveform { samples, sample_rate }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wav_round_trip_and_missing_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wav");
        let wave = Waveform {
            samples: (0..1600).map(|i| ((i as f32) * 0.05).sin() * 0.5).collect(),
            sample_rate: 16000,
        };
        write_wav(&p, &wave).unwrap();
        let back = read_wav(&p).unwrap();
        assert_eq!(back.sample_rate, 16000);
        for (a, b) in wave.samples.iter().zip(&back.samples) {
            assert!((a - b).abs() < 1e-4);
        }
        match read_wav(&dir.path().join("missing.wav")) {
            Err(MmgtError::NotFound(q)) => assert!(q.ends_with("missing.wav")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn features_follow_loudness() {
        let sr = 8000;
        let mut samples = vec![0.0f32; 320 * 4];
        for (i, s) in samples.iter_mut().enumerate().skip(640) {
            *s = (i as f32 * 0.3).sin() * 0.8;
        }
        let f = audio_features(&Waveform { samples, sample_rate: sr }, 25.0, 4).unwrap();
        assert_eq!(f.data.dim(), (4, 4));
        assert!(f.data[[3, 0]] > f.data[[0, 0]] + 0.5);
        assert!(f.data.iter().all(|v| *v > 0.0 && *v < 1.0));
    }
}
