//! Spectral front-end: STFT, linear spectrogram, mel filterbank, f0 tracking.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::audio::Waveform;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FFT_SIZE: usize = 1024;
pub const WIN_SIZE: usize = 1024;
pub const HOP_SIZE: usize = 256;
pub const SPEC_BINS: usize = FFT_SIZE / 2 + 1; // 513

pub fn hann_window(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| {
            let x = std::f64::consts::PI * i as f64 / n as f64;
            let s = x.sin();
            s * s
        })
        .collect()
}

/// Magnitude STFT with reflect-padded centered framing.
///
/// Frame `t` is centered at sample `t*hop`; the frame count is
/// `ceil(len / hop)` for every input.
pub fn stft_magnitude(samples: &[f64], nfft: usize, win: usize, hop: usize) -> Tensor {
    assert!(win <= nfft);
    let n = samples.len();
    let frames = n.div_ceil(hop);
    let bins = nfft / 2 + 1;
    let window = hann_window(win);
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(nfft);
    let mut out = Tensor::zeros(vec![bins, frames]);
    let mut buf = vec![Complex::new(0.0, 0.0); nfft];
    let half = win / 2;
    for f in 0..frames {
        let center = (f * hop) as isize;
        for (j, slot) in buf.iter_mut().enumerate().take(win) {
            let idx = center - half as isize + j as isize;
            let v = samples[reflect_index(idx, n)];
            *slot = Complex::new(v * window[j], 0.0);
        }
        for slot in buf.iter_mut().skip(win) {
            *slot = Complex::new(0.0, 0.0);
        }
        fft.process(&mut buf);
        for b in 0..bins {
            out.data_mut()[b * frames + f] = buf[b].norm();
        }
    }
    out
}

fn reflect_index(idx: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut i = idx.rem_euclid(period);
    if i >= n as isize {
        i = period - i;
    }
    i as usize
}

/// 513-bin magnitude spectrogram at the documented FFT/window/hop settings.
/// Requires 24 kHz input.
pub fn linear_spectrogram(w: &Waveform) -> Result<Tensor> {
    if w.sample_rate != crate::audio::DEFAULT_SAMPLE_RATE {
        return Err(Error::InvalidInput(format!(
            "linear_spectrogram expects 24000 Hz input, got {}",
            w.sample_rate
        )));
    }
    Ok(stft_magnitude(&w.samples, FFT_SIZE, WIN_SIZE, HOP_SIZE))
}

/// Triangular mel filterbank `[n_mels, n_bins]` (HTK mel scale, peak 1).
pub fn mel_filterbank(n_mels: usize, n_bins: usize, sample_rate: f64, f_min: f64, f_max: f64) -> Tensor {
    let to_mel = |f: f64| 2595.0 * (1.0 + f / 700.0).log10();
    let to_hz = |m: f64| 700.0 * (10f64.powf(m / 2595.0) - 1.0);
    let m_lo = to_mel(f_min);
    let m_hi = to_mel(f_max);
    let centers: Vec<f64> = (0..n_mels + 2)
        .map(|i| to_hz(m_lo + (m_hi - m_lo) * i as f64 / (n_mels + 1) as f64))
        .collect();
    let nyquist = sample_rate / 2.0;
    let mut fb = Tensor::zeros(vec![n_mels, n_bins]);
    for m in 0..n_mels {
        let (lo, c, hi) = (centers[m], centers[m + 1], centers[m + 2]);
        for b in 0..n_bins {
            let f = b as f64 * nyquist / (n_bins - 1) as f64;
            let w = if f >= lo && f <= c {
                (f - lo) / (c - lo)
            } else if f > c && f <= hi {
                (hi - f) / (hi - c)
            } else {
                0.0
            };
            fb.data_mut()[m * n_bins + b] = w;
        }
    }
    fb
}

/// log10 mel magnitude spectrogram of a waveform (off-tape feature path).
pub fn log_mel_spectrogram(w: &Waveform, n_mels: usize) -> Result<Tensor> {
    let spec = linear_spectrogram(w)?;
    let fb = mel_filterbank(n_mels, SPEC_BINS, w.sample_rate as f64, 0.0, w.sample_rate as f64 / 2.0);
    let mel = fb.matmul(&spec);
    Ok(mel.map(|v| (v + MEL_FLOOR).log10()))
}

/// Floor added before the log in mel features; fixes the dynamic range of the
/// "normalized log-mel" unit used by the reconstruction metric.
pub const MEL_FLOOR: f64 = 1e-5;

/// Autocorrelation f0 estimate per frame; returns NaN for unvoiced frames.
pub fn track_f0(w: &Waveform, frame: usize, hop: usize, f_lo: f64, f_hi: f64) -> Vec<f64> {
    let n = w.samples.len();
    let sr = w.sample_rate as f64;
    let lag_lo = (sr / f_hi).floor() as usize;
    let lag_hi = ((sr / f_lo).ceil() as usize).min(frame / 2);
    let frames = if n >= frame { (n - frame) / hop + 1 } else { 0 };
    let mut out = Vec::with_capacity(frames);
    for f in 0..frames {
        let seg = &w.samples[f * hop..f * hop + frame];
        let energy: f64 = seg.iter().map(|s| s * s).sum();
        if energy < 1e-6 {
            out.push(f64::NAN);
            continue;
        }
        let mut best_lag = 0;
        let mut best = 0.0;
        for lag in lag_lo..=lag_hi {
            let mut acc = 0.0;
            for i in 0..frame - lag {
                acc += seg[i] * seg[i + lag];
            }
            let norm = acc / energy;
            if norm > best {
                best = norm;
                best_lag = lag;
            }
        }
        if best > 0.5 && best_lag > 0 {
            out.push(sr / best_lag as f64);
        } else {
            out.push(f64::NAN);
        }
    }
    out
}

/// Least-squares slope of the voiced f0 trajectory in Hz per second.
pub fn f0_slope(f0: &[f64], hop: usize, sample_rate: u32) -> f64 {
    let dt = hop as f64 / sample_rate as f64;
    let pts: Vec<(f64, f64)> = f0
        .iter()
        .enumerate()
        .filter(|(_, v)| v.is_finite())
        .map(|(i, v)| (i as f64 * dt, *v))
        .collect();
    if pts.len() < 2 {
        return 0.0;
    }
    let n = pts.len() as f64;
    let sx: f64 = pts.iter().map(|p| p.0).sum();
    let sy: f64 = pts.iter().map(|p| p.1).sum();
    let sxx: f64 = pts.iter().map(|p| p.0 * p.0).sum();
    let sxy: f64 = pts.iter().map(|p| p.0 * p.1).sum();
    let denom = n * sxx - sx * sx;
    if denom.abs() < 1e-12 {
        0.0
    } else {
        (n * sxy - sx * sy) / denom
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::Waveform;

    fn tone(freq: f64, n: usize, sr: u32) -> Waveform {
        let samples: Vec<f64> =
            (0..n).map(|i| (2.0 * std::f64::consts::PI * freq * i as f64 / sr as f64).sin() * 0.8).collect();
        Waveform::new(samples, sr).unwrap()
    }

    #[test]
    fn spectrogram_has_513_rows_and_ceil_frames() {
        let w = tone(440.0, 24000, 24000);
        let s = linear_spectrogram(&w).unwrap();
        assert_eq!(s.rows(), 513);
        assert_eq!(s.cols(), 94); // ceil(24000/256)
        let w2 = tone(440.0, 25600, 24000);
        assert_eq!(linear_spectrogram(&w2).unwrap().cols(), 100);
    }

    #[test]
    fn pure_tone_peaks_at_expected_bin() {
        let w = tone(1000.0, 24000, 24000);
        let s = linear_spectrogram(&w).unwrap();
        // middle frame
        let f = s.cols() / 2;
        let mut best = 0;
        let mut best_v = 0.0;
        for b in 0..s.rows() {
            let v = s.at2(b, f);
            if v > best_v {
                best_v = v;
                best = b;
            }
        }
        assert_eq!(best, 43); // round(1000 * 1024 / 24000)
    }

    #[test]
    fn f0_tracker_finds_tone() {
        let w = tone(220.0, 24000, 24000);
        let f0 = track_f0(&w, 1024, 256, 70.0, 500.0);
        let voiced: Vec<f64> = f0.iter().copied().filter(|v| v.is_finite()).collect();
        assert!(!voiced.is_empty());
        let mean = voiced.iter().sum::<f64>() / voiced.len() as f64;
        assert!((mean - 220.0).abs() < 6.0, "f0 {mean}");
    }

    #[test]
    fn mel_filterbank_covers_all_bands() {
        let fb = mel_filterbank(80, 513, 24000.0, 0.0, 12000.0);
        for m in 0..80 {
            let row_sum: f64 = (0..513).map(|b| fb.at2(m, b)).sum();
            assert!(row_sum > 0.0, "empty mel band {m}");
        }
    }
}
