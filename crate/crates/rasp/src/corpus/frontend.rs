//! Log-mel frontend for real audio.
//!
//! 80 mel bands over 25 ms Hann windows with a 10 ms shift at 16 kHz, with
//! per-dimension mean subtraction over the utterance. Produces the same
//! `F x T` log-power frame matrices as the synthetic corpus.

use std::path::Path;

use rustfft::{num_complex::Complex, FftPlanner};

use super::FrameMatrix;
use crate::tensor::Tensor;
use crate::{Error, Result};

pub const SAMPLE_RATE: u32 = 16_000;
pub const WINDOW: usize = 400; // 25 ms
pub const HOP: usize = 160; // 10 ms
pub const NFFT: usize = 512;
pub const MEL_BANDS: usize = 80;
const POWER_FLOOR: f64 = 1e-10;

/// Read a 16-bit mono PCM WAV file into `[-1, 1]` samples.
pub fn read_wav_mono16(path: &Path) -> Result<Vec<f64>> {
    let mut reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    if spec.channels != 1 || spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int
    {
        return Err(Error::Format(format!(
            "{}: expected 16-bit mono PCM, got {} ch / {} bit",
            path.display(),
            spec.channels,
            spec.bits_per_sample
        )));
    }
    if spec.sample_rate != SAMPLE_RATE {
        return Err(Error::InvalidArgument(format!(
            "{}: unsupported sample rate {} (need {})",
            path.display(),
            spec.sample_rate,
            SAMPLE_RATE
        )));
    }
    let samples: std::result::Result<Vec<i16>, _> = reader.samples::<i16>().collect();
    Ok(samples?.into_iter().map(|s| f64::from(s) / 32768.0).collect())
}

/// HTK mel scale.
fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular mel filterbank weights, `MEL_BANDS x (NFFT/2 + 1)`.
pub fn mel_filterbank(sample_rate: u32) -> Vec<Vec<f64>> {
    let bins = NFFT / 2 + 1;
    let f_max = f64::from(sample_rate) / 2.0;
    let m_max = hz_to_mel(f_max);
    let points: Vec<f64> = (0..MEL_BANDS + 2)
        .map(|j| mel_to_hz(m_max * j as f64 / (MEL_BANDS + 1) as f64))
        .collect();
    let bin_hz: Vec<f64> = (0..bins)
        .map(|b| b as f64 * f64::from(sample_rate) / NFFT as f64)
        .collect();
    (0..MEL_BANDS)
        .map(|j| {
            let (lo, mid, hi) = (points[j], points[j + 1], points[j + 2]);
            bin_hz
                .iter()
                .map(|&f| {
                    if f <= lo || f >= hi {
                        0.0
                    } else if f <= mid {
                        (f - lo) / (mid - lo)
                    } else {
                        (hi - f) / (hi - mid)
                    }
                })
                .collect()
        })
        .collect()
}

/// Frequency range `(lo, hi)` covered by mel band `j`.
pub fn mel_band_range(sample_rate: u32, j: usize) -> (f64, f64) {
    let f_max = f64::from(sample_rate) / 2.0;
    let m_max = hz_to_mel(f_max);
    let hz = |idx: usize| mel_to_hz(m_max * idx as f64 / (MEL_BANDS + 1) as f64);
    (hz(j), hz(j + 2))
}

/// 80-band log-mel features with utterance-level mean normalization.
pub fn logmel_frontend(pcm: &[f64], sample_rate: u32) -> Result<FrameMatrix> {
    let mut m = logmel_energies(pcm, sample_rate)?;
    let frames = m.shape()[1];
    let data = m.data_mut();
    for j in 0..MEL_BANDS {
        let row = &mut data[j * frames..(j + 1) * frames];
        // anchored mean: exact cancellation when all frames are equal
        let base = row[0];
        let mean = base + row.iter().map(|v| v - base).sum::<f64>() / frames as f64;
        for v in row.iter_mut() {
            *v -= mean;
        }
    }
    Ok(m)
}

/// Log-mel energies without mean normalization.
pub fn logmel_energies(pcm: &[f64], sample_rate: u32) -> Result<FrameMatrix> {
    if sample_rate != SAMPLE_RATE {
        return Err(Error::InvalidArgument(format!(
            "unsupported sample rate {sample_rate} (need {SAMPLE_RATE})"
        )));
    }
    if pcm.len() < WINDOW {
        return Err(Error::InvalidArgument(format!(
            "input too short: {} samples, need at least {WINDOW}",
            pcm.len()
        )));
    }
    let frames = (pcm.len() - WINDOW) / HOP + 1;
    // periodic Hann
    let hann: Vec<f64> = (0..WINDOW)
        .map(|i| 0.5 * (1.0 - (std::f64::consts::TAU * i as f64 / WINDOW as f64).cos()))
        .collect();
    let filters = mel_filterbank(sample_rate);
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(NFFT);

    let bins = NFFT / 2 + 1;
    let mut mel = vec![0.0; MEL_BANDS * frames];
    let mut buf = vec![Complex::new(0.0, 0.0); NFFT];
    let mut power = vec![0.0; bins];
    for t in 0..frames {
        let start = t * HOP;
        for i in 0..NFFT {
            let v = if i < WINDOW { pcm[start + i] * hann[i] } else { 0.0 };
            buf[i] = Complex::new(v, 0.0);
        }
        fft.process(&mut buf);
        for (b, p) in power.iter_mut().enumerate() {
            *p = buf[b].norm_sqr();
        }
        for (j, filt) in filters.iter().enumerate() {
            let e: f64 = filt.iter().zip(&power).map(|(w, p)| w * p).sum();
            mel[j * frames + t] = e.max(POWER_FLOOR).ln();
        }
    }
    Tensor::new(vec![MEL_BANDS, frames], mel)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_second_yields_98_frames() {
        let pcm = vec![0.0; 16_000];
        let m = logmel_frontend(&pcm, 16_000).unwrap();
        // framing arithmetic: floor((16000 - 400) / 160) + 1
        assert_eq!(m.shape(), &[80, 98]);
    }

    #[test]
    fn all_zero_waveform_normalizes_to_exact_zero() {
        let pcm = vec![0.0; 8000];
        let m = logmel_frontend(&pcm, 16_000).unwrap();
        assert!(m.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_unsupported_rate_and_short_input() {
        assert!(logmel_frontend(&vec![0.0; 16_000], 8_000).is_err());
        assert!(logmel_frontend(&vec![0.0; 100], 16_000).is_err());
    }

    #[test]
    fn pure_tone_energy_lands_in_covering_mel_bands() {
        // 1 kHz tone; energy must peak in a band whose triangle covers 1 kHz
        let freq = 1000.0;
        let pcm: Vec<f64> = (0..16_000)
            .map(|i| (std::f64::consts::TAU * freq * i as f64 / 16_000.0).sin())
            .collect();
        let m = logmel_energies(&pcm, 16_000).unwrap();
        let frames = m.shape()[1];
        let t = frames / 2;
        let best = (0..MEL_BANDS)
            .max_by(|&a, &b| m.at(a, t).total_cmp(&m.at(b, t)))
            .unwrap();
        // oracle: which bands cover 1 kHz, from the filter placement math
        let covering: Vec<usize> = (0..MEL_BANDS)
            .filter(|&j| {
                let (lo, hi) = mel_band_range(16_000, j);
                lo < freq && freq < hi
            })
            .collect();
        assert!(
            covering.contains(&best),
            "peak band {best} not among covering bands {covering:?}"
        );
    }

    #[test]
    fn wav_roundtrip_via_hound() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.wav");
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 16_000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut writer = hound::WavWriter::create(&path, spec).unwrap();
        for i in 0..1600i32 {
            writer.write_sample((i % 100) as i16).unwrap();
        }
        writer.finalize().unwrap();
        let pcm = read_wav_mono16(&path).unwrap();
        assert_eq!(pcm.len(), 1600);
        assert!((pcm[1] - 1.0 / 32768.0).abs() < 1e-12);
    }
}
