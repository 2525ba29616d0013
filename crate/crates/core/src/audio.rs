//! Waveform type, 16-bit PCM WAV I/O and rational resampling.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const DEFAULT_SAMPLE_RATE: u32 = 24_000;

/// Mono PCM audio held as f64 samples in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InvalidInput("waveform must contain at least one sample".into()));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::InvalidInput("waveform contains non-finite samples".into()));
        }
        Ok(Waveform { samples, sample_rate })
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

    /// Scale so the peak absolute amplitude is `peak` (no-op on silence).
    pub fn peak_normalize(&mut self, peak: f64) {
        let max = self.samples.iter().fold(0.0f64, |m, s| m.max(s.abs()));
        if max > 0.0 {
            let gain = peak / max;
            for s in &mut self.samples {
                *s *= gain;
            }
        }
    }
}

// ---- WAV I/O (mono 16-bit PCM) ----

pub fn write_wav(path: &Path, w: &Waveform) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    let data_len = (w.samples.len() * 2) as u32;
    let mut header = Vec::with_capacity(44);
    header.extend_from_slice(b"RIFF");
    header.extend_from_slice(&(36 + data_len).to_le_bytes());
    header.extend_from_slice(b"WAVE");
    header.extend_from_slice(b"fmt ");
    header.extend_from_slice(&16u32.to_le_bytes());
    header.extend_from_slice(&1u16.to_le_bytes()); // PCM
    header.extend_from_slice(&1u16.to_le_bytes()); // mono
    header.extend_from_slice(&w.sample_rate.to_le_bytes());
    header.extend_from_slice(&(w.sample_rate * 2).to_le_bytes());
    header.extend_from_slice(&2u16.to_le_bytes());
    header.extend_from_slice(&16u16.to_le_bytes());
    header.extend_from_slice(b"data");
    header.extend_from_slice(&data_len.to_le_bytes());
    file.write_all(&header)?;
    let mut pcm = Vec::with_capacity(w.samples.len() * 2);
    for &s in &w.samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        pcm.extend_from_slice(&v.to_le_bytes());
    }
    file.write_all(&pcm)?;
    Ok(())
}

pub fn read_wav(path: &Path) -> Result<Waveform> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    parse_wav(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

fn parse_wav(bytes: &[u8]) -> std::result::Result<Waveform, String> {
    if bytes.len() < 44 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err("not a RIFF/WAVE file".into());
    }
    let mut pos = 12;
    let mut format: Option<(u16, u16, u32, u16)> = None;
    let mut data: Option<&[u8]> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32::from_le_bytes(bytes[pos + 4..pos + 8].try_into().unwrap()) as usize;
        let body_end = (pos + 8 + size).min(bytes.len());
        let body = &bytes[pos + 8..body_end];
        match id {
            b"fmt " => {
                if body.len() < 16 {
                    return Err("fmt chunk too short".into());
                }
                let audio_format = u16::from_le_bytes(body[0..2].try_into().unwrap());
                let channels = u16::from_le_bytes(body[2..4].try_into().unwrap());
                let rate = u32::from_le_bytes(body[4..8].try_into().unwrap());
                let bits = u16::from_le_bytes(body[14..16].try_into().unwrap());
                format = Some((audio_format, channels, rate, bits));
            }
            b"data" => data = Some(body),
            _ => {}
        }
        pos += 8 + size + (size & 1);
    }
    let (audio_format, channels, rate, bits) = format.ok_or("missing fmt chunk")?;
    let data = data.ok_or("missing data chunk")?;
    if audio_format != 1 || bits != 16 {
        return Err(format!("unsupported encoding: format {audio_format}, {bits}-bit (need 16-bit PCM)"));
    }
    if channels == 0 {
        return Err("zero channels".into());
    }
    let ch = channels as usize;
    let frames = data.len() / (2 * ch);
    if frames == 0 {
        return Err("empty data chunk".into());
    }
    // Multichannel input is mixed down to mono.
    let mut samples = Vec::with_capacity(frames);
    for f in 0..frames {
        let mut acc = 0.0;
        for c in 0..ch {
            let off = (f * ch + c) * 2;
            let v = i16::from_le_bytes(data[off..off + 2].try_into().unwrap());
            acc += v as f64 / 32768.0;
        }
        samples.push(acc / ch as f64);
    }
    Waveform::new(samples, rate).map_err(|e| e.to_string())
}

// ---- resampling ----

/// Rational resampler with a Kaiser-windowed sinc kernel (polyphase).
pub fn resample(w: &Waveform, target_rate: u32) -> Result<Waveform> {
    if w.sample_rate == target_rate {
        return Ok(w.clone());
    }
    if target_rate == 0 {
        return Err(Error::Config("target sample rate must be positive".into()));
    }
    let g = gcd(w.sample_rate as u64, target_rate as u64);
    let up = (target_rate as u64 / g) as usize; // L
    let down = (w.sample_rate as u64 / g) as usize; // M
    let cutoff = 0.45 / up.max(down) as f64; // normalized to the upsampled rate
    let taps_per_phase = 24;
    let half = (taps_per_phase / 2 * up) as isize;
    let beta = 8.6;
    let n_in = w.samples.len();
    let n_out = (n_in * up).div_ceil(down);
    let mut out = Vec::with_capacity(n_out);
    let denom = bessel_i0(beta);
    for m in 0..n_out {
        // position of output sample m on the upsampled grid
        let pos = (m * down) as isize;
        let mut acc = 0.0;
        // contributing input samples: x[i] sits at up*i on the grid
        let i_lo = (pos - half + up as isize - 1).div_euclid(up as isize);
        let i_hi = (pos + half).div_euclid(up as isize);
        for i in i_lo..=i_hi {
            if i < 0 || i as usize >= n_in {
                continue;
            }
            let d = (pos - i * up as isize) as f64; // offset on upsampled grid
            let x = d * cutoff;
            let sinc = if x == 0.0 {
                1.0
            } else {
                let px = std::f64::consts::PI * x;
                px.sin() / px
            };
            let frac = d / half as f64;
            if frac.abs() > 1.0 {
                continue;
            }
            let kaiser = bessel_i0(beta * (1.0 - frac * frac).sqrt()) / denom;
            acc += w.samples[i as usize] * sinc * kaiser;
        }
        out.push(acc * (2.0 * cutoff * up as f64));
    }
    Waveform::new(out, target_rate)
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn bessel_i0(x: f64) -> f64 {
    // series expansion, converges quickly for the beta range used here
    let mut sum = 1.0;
    let mut term = 1.0;
    let half_x = x / 2.0;
    for k in 1..32 {
        term *= (half_x / k as f64) * (half_x / k as f64);
        sum += term;
        if term < 1e-16 * sum {
            break;
        }
    }
    sum
}
