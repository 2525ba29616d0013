//! Discrete audio codes from a self-trained mini residual vector quantizer,
//! plus the adapter boundary for an external pretrained codec.
//!
//! The analyzer is a fixed strided filterbank front-end: stride 320 samples at
//! 24 kHz gives exactly 75 frames per second; each frame is a vector of mel
//! band magnitudes. The codebooks are trained stage by stage with k-means++
//! initialization, Lloyd refinement and EMA smoothing. Stages after the first
//! pin index 0 to the zero codeword so a stage can always abstain, which makes
//! the residual-energy sequence non-increasing for every input.

use std::io::Read;
use std::path::Path;
use std::process::Command;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::audio::Waveform;
use crate::dsp;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_STRIDE: usize = 320;
pub const DEFAULT_LATENT_DIM: usize = 32;
pub const DEFAULT_CODEBOOKS: usize = 8;
pub const DEFAULT_CODEBOOK_SIZE: usize = 64;

/// D x T integer code indices with codec metadata.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodeMatrix {
    /// Codebook-major, time-minor: `indices[d * frames + t]`.
    pub indices: Vec<u16>,
    pub num_codebooks: usize,
    pub codebook_size: usize,
    /// Frames per second times 1000 (kept integral for the file format).
    pub frame_rate_millihertz: u32,
}

impl CodeMatrix {
    pub fn frames(&self) -> usize {
        if self.num_codebooks == 0 {
            0
        } else {
            self.indices.len() / self.num_codebooks
        }
    }

    pub fn at(&self, codebook: usize, frame: usize) -> u16 {
        self.indices[codebook * self.frames() + frame]
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_codebooks == 0 || self.frames() == 0 {
            return Err(Error::InvalidInput("empty code matrix".into()));
        }
        if self.indices.len() != self.num_codebooks * self.frames() {
            return Err(Error::InvalidInput("ragged code matrix".into()));
        }
        if let Some(bad) = self.indices.iter().find(|&&i| i as usize >= self.codebook_size) {
            return Err(Error::InvalidInput(format!(
                "code index {bad} out of range for codebook size {}",
                self.codebook_size
            )));
        }
        Ok(())
    }
}

/// Configuration of the mini quantizer.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize, PartialEq)]
pub struct MiniRvqConfig {
    pub sample_rate: u32,
    pub stride: usize,
    pub latent_dim: usize,
    pub num_codebooks: usize,
    pub codebook_size: usize,
}

impl Default for MiniRvqConfig {
    fn default() -> Self {
        MiniRvqConfig {
            sample_rate: crate::audio::DEFAULT_SAMPLE_RATE,
            stride: DEFAULT_STRIDE,
            latent_dim: DEFAULT_LATENT_DIM,
            num_codebooks: DEFAULT_CODEBOOKS,
            codebook_size: DEFAULT_CODEBOOK_SIZE,
        }
    }
}

/// Mini residual vector quantizer: fixed analyzer plus trained codebooks.
#[derive(Debug, Clone, PartialEq)]
pub struct MiniRvq {
    pub config: MiniRvqConfig,
    /// One `[K, d]` table per stage.
    pub codebooks: Vec<Tensor>,
    /// One `[K]` EMA usage count vector per stage.
    pub ema_counts: Vec<Tensor>,
    /// Fixed analyzer filterbank `[d, window_bins]` captured at build time.
    analyzer: Analyzer,
}

#[derive(Debug, Clone, PartialEq)]
struct Analyzer {
    window: Vec<f64>,
    filterbank: Tensor, // [d, bins]
    nfft: usize,
}

impl Analyzer {
    fn new(cfg: &MiniRvqConfig) -> Self {
        let win = 2 * cfg.stride;
        let nfft = win.next_power_of_two();
        let bins = nfft / 2 + 1;
        let filterbank = dsp::mel_filterbank(
            cfg.latent_dim,
            bins,
            cfg.sample_rate as f64,
            0.0,
            cfg.sample_rate as f64 / 2.0,
        );
        Analyzer { window: dsp::hann_window(win), filterbank, nfft }
    }

    /// Latent frames `[T, d]`; frame t covers samples `[t*stride, t*stride + 2*stride)`
    /// with zero padding past the end. Zero input maps to the zero latent.
    fn latents(&self, w: &Waveform, stride: usize) -> Tensor {
        let n = w.samples.len();
        let frames = n.div_ceil(stride);
        let spec = self.frame_spectra(&w.samples, stride, frames);
        let mel = self.filterbank.matmul(&spec); // [d, T]
        let d = mel.rows();
        let mut out = Tensor::zeros(vec![frames, d]);
        for t in 0..frames {
            for c in 0..d {
                // magnitude (sqrt energy) keeps zero -> zero
                out.data_mut()[t * d + c] = mel.at2(c, t).sqrt();
            }
        }
        out
    }

    fn frame_spectra(&self, samples: &[f64], stride: usize, frames: usize) -> Tensor {
        use rustfft::num_complex::Complex;
        let mut planner = rustfft::FftPlanner::new();
        let fft = planner.plan_fft_forward(self.nfft);
        let bins = self.nfft / 2 + 1;
        let win = self.window.len();
        let mut out = Tensor::zeros(vec![bins, frames]);
        let mut buf = vec![Complex::new(0.0, 0.0); self.nfft];
        for f in 0..frames {
            for (j, slot) in buf.iter_mut().enumerate().take(win) {
                let idx = f * stride + j;
                let v = if idx < samples.len() { samples[idx] } else { 0.0 };
                *slot = Complex::new(v * self.window[j], 0.0);
            }
            for slot in buf.iter_mut().skip(win) {
                *slot = Complex::new(0.0, 0.0);
            }
            fft.process(&mut buf);
            for b in 0..bins {
                out.data_mut()[b * frames + f] = buf[b].norm_sqr();
            }
        }
        out
    }
}

impl MiniRvq {
    /// Quantizer with all-zero codebooks (train or load before serious use).
    pub fn untrained(config: MiniRvqConfig) -> Self {
        let analyzer = Analyzer::new(&config);
        let codebooks = (0..config.num_codebooks)
            .map(|_| Tensor::zeros(vec![config.codebook_size, config.latent_dim]))
            .collect();
        let ema_counts =
            (0..config.num_codebooks).map(|_| Tensor::zeros(vec![config.codebook_size])).collect();
        MiniRvq { config, codebooks, ema_counts, analyzer }
    }

    pub fn frame_rate(&self) -> f64 {
        self.config.sample_rate as f64 / self.config.stride as f64
    }

    /// Latent analysis frames `[T, d]` for a waveform.
    pub fn latents(&self, w: &Waveform) -> Result<Tensor> {
        if w.sample_rate != self.config.sample_rate {
            return Err(Error::Config(format!(
                "waveform rate {} does not match codec rate {}",
                w.sample_rate, self.config.sample_rate
            )));
        }
        if w.samples.is_empty() {
            return Err(Error::InvalidInput("empty waveform".into()));
        }
        Ok(self.analyzer.latents(w, self.config.stride))
    }

    /// Greedy residual quantization of one latent vector.
    ///
    /// Returns the per-stage indices, the reconstructed (summed) vector and the
    /// residual energy after each stage. Ties pick the lowest index.
    pub fn quantize_residual(&self, latent: &[f64]) -> Result<(Vec<u16>, Vec<f64>, Vec<f64>)> {
        let d = self.config.latent_dim;
        if latent.len() != d {
            return Err(Error::InvalidInput(format!(
                "latent dim {} does not match quantizer dim {d}",
                latent.len()
            )));
        }
        if latent.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite latent".into()));
        }
        let mut residual = latent.to_vec();
        let mut quantized = vec![0.0; d];
        let mut indices = Vec::with_capacity(self.config.num_codebooks);
        let mut energies = Vec::with_capacity(self.config.num_codebooks);
        for table in &self.codebooks {
            let (idx, _) = nearest_codeword(table, &residual);
            let row = &table.data()[idx * d..(idx + 1) * d];
            for i in 0..d {
                residual[i] -= row[i];
                quantized[i] += row[i];
            }
            indices.push(idx as u16);
            energies.push(residual.iter().map(|v| v * v).sum::<f64>());
        }
        Ok((indices, quantized, energies))
    }

    /// Encode a waveform to a `D x T` code matrix.
    pub fn encode(&self, w: &Waveform) -> Result<CodeMatrix> {
        if w.samples.len() < self.config.stride {
            return Err(Error::InvalidInput(format!(
                "waveform shorter than one analysis stride ({} < {})",
                w.samples.len(),
                self.config.stride
            )));
        }
        let latents = self.latents(w)?;
        let frames = latents.rows();
        let d_stages = self.config.num_codebooks;
        let mut indices = vec![0u16; d_stages * frames];
        for t in 0..frames {
            let lat = &latents.data()[t * self.config.latent_dim..(t + 1) * self.config.latent_dim];
            let (idx, _, _) = self.quantize_residual(lat)?;
            for (stage, &i) in idx.iter().enumerate() {
                indices[stage * frames + t] = i;
            }
        }
        Ok(CodeMatrix {
            indices,
            num_codebooks: d_stages,
            codebook_size: self.config.codebook_size,
            frame_rate_millihertz: (self.frame_rate() * 1000.0).round() as u32,
        })
    }

    /// Inverse lookup: sum the indexed codewords per frame -> `[T, d]`.
    pub fn dequantize(&self, codes: &CodeMatrix) -> Result<Tensor> {
        if codes.num_codebooks != self.config.num_codebooks {
            return Err(Error::InvalidInput(format!(
                "code matrix has {} codebooks, quantizer has {}",
                codes.num_codebooks, self.config.num_codebooks
            )));
        }
        codes.validate()?;
        if codes.codebook_size > self.config.codebook_size {
            return Err(Error::InvalidInput("code matrix codebook size exceeds quantizer's".into()));
        }
        let d = self.config.latent_dim;
        let frames = codes.frames();
        let mut out = Tensor::zeros(vec![frames, d]);
        for t in 0..frames {
            for stage in 0..codes.num_codebooks {
                let idx = codes.at(stage, t) as usize;
                let row = &self.codebooks[stage].data()[idx * d..(idx + 1) * d];
                for i in 0..d {
                    out.data_mut()[t * d + i] += row[i];
                }
            }
        }
        Ok(out)
    }

    /// Mean squared residual after using the first `stages` codebooks.
    pub fn reconstruction_error(&self, latents: &Tensor, stages: usize) -> f64 {
        let d = self.config.latent_dim;
        let mut total = 0.0;
        for t in 0..latents.rows() {
            let lat = &latents.data()[t * d..(t + 1) * d];
            let mut residual = lat.to_vec();
            for table in self.codebooks.iter().take(stages) {
                let (idx, _) = nearest_codeword(table, &residual);
                let row = &table.data()[idx * d..(idx + 1) * d];
                for i in 0..d {
                    residual[i] -= row[i];
                }
            }
            total += residual.iter().map(|v| v * v).sum::<f64>();
        }
        total / latents.rows().max(1) as f64
    }

    /// Fraction of codebook entries of a stage used at least once on `latents`.
    pub fn codebook_usage(&self, latents: &Tensor, stage: usize) -> f64 {
        let d = self.config.latent_dim;
        let k = self.config.codebook_size;
        let mut used = vec![false; k];
        for t in 0..latents.rows() {
            let lat = &latents.data()[t * d..(t + 1) * d];
            let mut residual = lat.to_vec();
            for (s, table) in self.codebooks.iter().enumerate().take(stage + 1) {
                let (idx, _) = nearest_codeword(table, &residual);
                if s == stage {
                    used[idx] = true;
                    break;
                }
                let row = &table.data()[idx * d..(idx + 1) * d];
                for i in 0..d {
                    residual[i] -= row[i];
                }
            }
        }
        used.iter().filter(|u| **u).count() as f64 / k as f64
    }
}

fn nearest_codeword(table: &Tensor, v: &[f64]) -> (usize, f64) {
    let k = table.rows();
    let d = table.cols();
    let mut best = 0usize;
    let mut best_d = f64::INFINITY;
    for i in 0..k {
        let row = &table.data()[i * d..(i + 1) * d];
        let mut acc = 0.0;
        for j in 0..d {
            let diff = v[j] - row[j];
            acc += diff * diff;
        }
        if acc < best_d {
            best_d = acc;
            best = i;
        }
    }
    (best, best_d)
}

// ---- training ----

#[derive(Debug, Clone)]
pub struct RvqTrainConfig {
    pub lloyd_iters: usize,
    pub ema_passes: usize,
    pub ema_decay: f64,
    pub seed: u64,
    /// Frames subsampled for fitting (cost control); 0 means all.
    pub max_fit_frames: usize,
}

impl Default for RvqTrainConfig {
    fn default() -> Self {
        RvqTrainConfig { lloyd_iters: 12, ema_passes: 5, ema_decay: 0.99, seed: 0, max_fit_frames: 20_000 }
    }
}

/// Fit codebooks stage by stage on the analyzer latents of a corpus.
pub fn train_mini_rvq(
    corpus: &[Waveform],
    config: MiniRvqConfig,
    train_cfg: &RvqTrainConfig,
) -> Result<MiniRvq> {
    if corpus.is_empty() {
        return Err(Error::Config("empty training corpus".into()));
    }
    let mut rvq = MiniRvq::untrained(config.clone());
    let mut frames: Vec<Vec<f64>> = Vec::new();
    for w in corpus {
        let lat = rvq.latents(w)?;
        let d = config.latent_dim;
        for t in 0..lat.rows() {
            frames.push(lat.data()[t * d..(t + 1) * d].to_vec());
        }
    }
    if frames.len() < config.codebook_size * config.num_codebooks {
        return Err(Error::Config(format!(
            "insufficient frames for training: {} < K*D = {}",
            frames.len(),
            config.codebook_size * config.num_codebooks
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(train_cfg.seed);
    if train_cfg.max_fit_frames > 0 && frames.len() > train_cfg.max_fit_frames {
        frames.shuffle(&mut rng);
        frames.truncate(train_cfg.max_fit_frames);
    }
    let mut residuals = frames;
    for stage in 0..config.num_codebooks {
        let pinned_zero = stage > 0;
        let table = fit_stage(&residuals, &config, train_cfg, &mut rng, pinned_zero);
        // counts from a final assignment pass
        let mut counts = vec![0.0f64; config.codebook_size];
        for r in residuals.iter_mut() {
            let (idx, _) = nearest_codeword(&table, r);
            counts[idx] += 1.0;
            let row = &table.data()[idx * config.latent_dim..(idx + 1) * config.latent_dim];
            for j in 0..config.latent_dim {
                r[j] -= row[j];
            }
        }
        rvq.codebooks[stage] = table;
        rvq.ema_counts[stage] = Tensor::from_vec(counts);
    }
    Ok(rvq)
}

fn fit_stage(
    points: &[Vec<f64>],
    cfg: &MiniRvqConfig,
    tc: &RvqTrainConfig,
    rng: &mut ChaCha8Rng,
    pin_zero: bool,
) -> Tensor {
    let k = cfg.codebook_size;
    let d = cfg.latent_dim;
    let free_lo = usize::from(pin_zero);
    let mut table = Tensor::zeros(vec![k, d]);

    // k-means++ seeding over the free entries
    let first = rng.gen_range(0..points.len());
    table.data_mut()[free_lo * d..(free_lo + 1) * d].copy_from_slice(&points[first]);
    let mut dist2: Vec<f64> = points
        .iter()
        .map(|p| {
            let mut acc = 0.0;
            for j in 0..d {
                let diff = p[j] - points[first][j];
                acc += diff * diff;
            }
            if pin_zero {
                // zero codeword also competes from the start
                acc.min(p.iter().map(|v| v * v).sum())
            } else {
                acc
            }
        })
        .collect();
    for c in (free_lo + 1)..k {
        let total: f64 = dist2.iter().sum();
        let chosen = if total <= 0.0 {
            rng.gen_range(0..points.len())
        } else {
            let mut threshold = rng.gen::<f64>() * total;
            let mut pick = points.len() - 1;
            for (i, &w) in dist2.iter().enumerate() {
                threshold -= w;
                if threshold <= 0.0 {
                    pick = i;
                    break;
                }
            }
            pick
        };
        table.data_mut()[c * d..(c + 1) * d].copy_from_slice(&points[chosen]);
        for (i, p) in points.iter().enumerate() {
            let mut acc = 0.0;
            for j in 0..d {
                let diff = p[j] - points[chosen][j];
                acc += diff * diff;
            }
            if acc < dist2[i] {
                dist2[i] = acc;
            }
        }
    }

    // Lloyd iterations (exact means), dead entries reseeded from the
    // highest-error frame
    for _ in 0..tc.lloyd_iters {
        let mut sums = vec![0.0f64; k * d];
        let mut counts = vec![0usize; k];
        let mut worst: (f64, usize) = (-1.0, 0);
        for (i, p) in points.iter().enumerate() {
            let (idx, dist) = nearest_codeword(&table, p);
            counts[idx] += 1;
            for j in 0..d {
                sums[idx * d + j] += p[j];
            }
            if dist > worst.0 {
                worst = (dist, i);
            }
        }
        for c in free_lo..k {
            if counts[c] == 0 {
                table.data_mut()[c * d..(c + 1) * d].copy_from_slice(&points[worst.1]);
            } else {
                for j in 0..d {
                    table.data_mut()[c * d + j] = sums[c * d + j] / counts[c] as f64;
                }
            }
        }
    }

    // EMA smoothing passes
    let decay = tc.ema_decay;
    let mut ema_sum: Vec<f64> = table.data().to_vec();
    let mut ema_count = vec![1.0f64; k];
    for _ in 0..tc.ema_passes {
        let mut sums = vec![0.0f64; k * d];
        let mut counts = vec![0.0f64; k];
        for p in points {
            let (idx, _) = nearest_codeword(&table, p);
            counts[idx] += 1.0;
            for j in 0..d {
                sums[idx * d + j] += p[j];
            }
        }
        for c in free_lo..k {
            ema_count[c] = decay * ema_count[c] + (1.0 - decay) * counts[c];
            for j in 0..d {
                ema_sum[c * d + j] = decay * ema_sum[c * d + j] + (1.0 - decay) * sums[c * d + j];
            }
            if ema_count[c] > 1e-9 && counts[c] > 0.0 {
                for j in 0..d {
                    table.data_mut()[c * d + j] = ema_sum[c * d + j] / ema_count[c];
                }
            }
        }
    }
    if pin_zero {
        for j in 0..d {
            table.data_mut()[j] = 0.0;
        }
    }
    table
}

// ---- DCMX code-matrix file format ----

const DCMX_MAGIC: &[u8; 4] = b"DCMX";

/// Serialize: magic `DCMX`, LE u32 D, T, K, frame_rate_millihertz, then
/// D*T LE u16 indices, codebook-major time-minor.
pub fn write_code_matrix(path: &Path, m: &CodeMatrix) -> Result<()> {
    m.validate()?;
    let mut buf = Vec::with_capacity(20 + m.indices.len() * 2);
    buf.extend_from_slice(DCMX_MAGIC);
    buf.extend_from_slice(&(m.num_codebooks as u32).to_le_bytes());
    buf.extend_from_slice(&(m.frames() as u32).to_le_bytes());
    buf.extend_from_slice(&(m.codebook_size as u32).to_le_bytes());
    buf.extend_from_slice(&m.frame_rate_millihertz.to_le_bytes());
    for &i in &m.indices {
        buf.extend_from_slice(&i.to_le_bytes());
    }
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn read_code_matrix(path: &Path) -> Result<CodeMatrix> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 20 || &bytes[0..4] != DCMX_MAGIC {
        return Err(Error::Format(format!("{}: not a DCMX file", path.display())));
    }
    let rd = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let d = rd(4) as usize;
    let t = rd(8) as usize;
    let k = rd(12) as usize;
    let frame_rate_millihertz = rd(16);
    let need = 20 + d * t * 2;
    if bytes.len() != need {
        return Err(Error::Format(format!(
            "{}: expected {need} bytes for {d}x{t} indices, found {}",
            path.display(),
            bytes.len()
        )));
    }
    let mut indices = Vec::with_capacity(d * t);
    for i in 0..d * t {
        indices.push(u16::from_le_bytes(bytes[20 + 2 * i..22 + 2 * i].try_into().unwrap()));
    }
    let m = CodeMatrix { indices, num_codebooks: d, codebook_size: k, frame_rate_millihertz };
    m.validate()?;
    Ok(m)
}

// ---- MiniRvq checkpoint ----

const MRVQ_MAGIC: &[u8; 4] = b"MRVQ";
const MRVQ_VERSION: u32 = 1;

/// Versioned binary blob: magic, version, config fields, then per stage the
/// codebook and EMA counts as LE f64. Stable within a major version.
pub fn save_mini_rvq(path: &Path, rvq: &MiniRvq) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MRVQ_MAGIC);
    buf.extend_from_slice(&MRVQ_VERSION.to_le_bytes());
    buf.extend_from_slice(&rvq.config.sample_rate.to_le_bytes());
    buf.extend_from_slice(&(rvq.config.stride as u32).to_le_bytes());
    buf.extend_from_slice(&(rvq.config.latent_dim as u32).to_le_bytes());
    buf.extend_from_slice(&(rvq.config.num_codebooks as u32).to_le_bytes());
    buf.extend_from_slice(&(rvq.config.codebook_size as u32).to_le_bytes());
    for stage in 0..rvq.config.num_codebooks {
        for v in rvq.codebooks[stage].data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for v in rvq.ema_counts[stage].data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_mini_rvq(path: &Path) -> Result<MiniRvq> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 28 || &bytes[0..4] != MRVQ_MAGIC {
        return Err(Error::Format(format!("{}: not a MRVQ checkpoint", path.display())));
    }
    let rd = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let version = rd(4);
    if version != MRVQ_VERSION {
        return Err(Error::Format(format!(
            "{}: unsupported MRVQ version {version} (expected {MRVQ_VERSION})",
            path.display()
        )));
    }
    let config = MiniRvqConfig {
        sample_rate: rd(8),
        stride: rd(12) as usize,
        latent_dim: rd(16) as usize,
        num_codebooks: rd(20) as usize,
        codebook_size: rd(24) as usize,
    };
    let mut rvq = MiniRvq::untrained(config.clone());
    let k = config.codebook_size;
    let d = config.latent_dim;
    let per_stage = k * d + k;
    let need = 28 + config.num_codebooks * per_stage * 8;
    if bytes.len() != need {
        return Err(Error::Format(format!(
            "{}: expected {need} bytes, found {}",
            path.display(),
            bytes.len()
        )));
    }
    let mut off = 28;
    let rd_f64 = |off: &mut usize| {
        let v = f64::from_le_bytes(bytes[*off..*off + 8].try_into().unwrap());
        *off += 8;
        v
    };
    for stage in 0..config.num_codebooks {
        let mut cb = Tensor::zeros(vec![k, d]);
        for i in 0..k * d {
            cb.data_mut()[i] = rd_f64(&mut off);
        }
        let mut counts = Tensor::zeros(vec![k]);
        for i in 0..k {
            counts.data_mut()[i] = rd_f64(&mut off);
        }
        rvq.codebooks[stage] = cb;
        rvq.ema_counts[stage] = counts;
    }
    Ok(rvq)
}

// ---- external codec adapter ----

/// Adapter boundary for a pretrained external codec. The command is invoked as
/// `cmd <input.wav> <output.dcmx>` and must write a DCMX file.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize, Default)]
pub struct ExternalCodecAdapter {
    /// Path to the executable; `None` means not configured.
    pub command: Option<String>,
    /// Expected codebook count; mismatch is a configuration error.
    pub expect_codebooks: usize,
    /// Expected codebook size; mismatch is a configuration error.
    pub expect_codebook_size: usize,
}

impl ExternalCodecAdapter {
    pub fn encode(&self, w: &Waveform, workdir: &Path) -> Result<CodeMatrix> {
        let Some(cmd) = &self.command else {
            return Err(Error::Environment(
                "external codec adapter is not configured; set `command` to an executable \
                 that maps a wav file to a DCMX file, or use the built-in mini quantizer"
                    .into(),
            ));
        };
        let in_path = workdir.join("adapter_in.wav");
        let out_path = workdir.join("adapter_out.dcmx");
        crate::audio::write_wav(&in_path, w)?;
        let status = Command::new(cmd)
            .arg(&in_path)
            .arg(&out_path)
            .status()
            .map_err(|e| {
                Error::Environment(format!(
                    "external codec command `{cmd}` could not be started: {e}; \
                     install the adapter or switch to the built-in mini quantizer"
                ))
            })?;
        if !status.success() {
            return Err(Error::Environment(format!(
                "external codec command `{cmd}` exited with {status}"
            )));
        }
        let m = read_code_matrix(&out_path)?;
        if m.num_codebooks != self.expect_codebooks {
            return Err(Error::Config(format!(
                "adapter produced {} codebooks, configuration expects {}",
                m.num_codebooks, self.expect_codebooks
            )));
        }
        if m.codebook_size != self.expect_codebook_size {
            return Err(Error::Config(format!(
                "adapter reports codebook size {}, configuration expects {}",
                m.codebook_size, self.expect_codebook_size
            )));
        }
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone_wave(freq: f64, n: usize) -> Waveform {
        let samples: Vec<f64> =
            (0..n).map(|i| (2.0 * std::f64::consts::PI * freq * i as f64 / 24000.0).sin() * 0.8).collect();
        Waveform::new(samples, 24000).unwrap()
    }

    fn tiny_rvq(k: usize, d_stages: usize, dim: usize) -> MiniRvq {
        MiniRvq::untrained(MiniRvqConfig {
            codebook_size: k,
            num_codebooks: d_stages,
            latent_dim: dim,
            ..MiniRvqConfig::default()
        })
    }

    #[test]
    fn encode_shape_contract() {
        // 24000 samples / stride 320 -> 75 frames, 8 codebooks
        let rvq = MiniRvq::untrained(MiniRvqConfig::default());
        let m = rvq.encode(&tone_wave(440.0, 24000)).unwrap();
        assert_eq!(m.num_codebooks, 8);
        assert_eq!(m.frames(), 75);
        assert_eq!(m.frame_rate_millihertz, 75_000);
    }

    #[test]
    fn zero_waveform_gives_constant_columns() {
        let mut rvq = tiny_rvq(4, 2, DEFAULT_LATENT_DIM);
        // non-trivial codebooks so the nearest-to-zero index is not 0
        for s in 0..2 {
            for i in 0..4 * DEFAULT_LATENT_DIM {
                rvq.codebooks[s].data_mut()[i] = ((i * 7 + s) % 5) as f64 - 1.0;
            }
        }
        let w = Waveform::new(vec![0.0; 3200], 24000).unwrap();
        let m = rvq.encode(&w).unwrap();
        for stage in 0..2 {
            let first = m.at(stage, 0);
            for t in 0..m.frames() {
                assert_eq!(m.at(stage, t), first, "stage {stage} frame {t}");
            }
        }
    }

    #[test]
    fn quantize_residual_exact_match_reaches_zero() {
        let mut rvq = tiny_rvq(3, 2, 4);
        rvq.config.latent_dim = 4;
        // stage 0 contains the target codeword at index 2; stage 1 all zeros
        let target = [1.0, -2.0, 0.5, 3.0];
        rvq.codebooks[0].data_mut()[2 * 4..3 * 4].copy_from_slice(&target);
        let (idx, q, energy) = rvq.quantize_residual(&target).unwrap();
        assert_eq!(idx, vec![2, 0]);
        assert_eq!(q, target.to_vec());
        assert_eq!(energy[1], 0.0);
        assert!(energy[0] <= 1e-24);
    }

    #[test]
    fn residual_energy_non_increasing_on_random_latents() {
        let corpus: Vec<Waveform> =
            (0..6).map(|i| tone_wave(150.0 + 60.0 * i as f64, 24000)).collect();
        let cfg = MiniRvqConfig { codebook_size: 16, ..MiniRvqConfig::default() };
        let rvq = train_mini_rvq(&corpus, cfg, &RvqTrainConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..1000 {
            let latent: Vec<f64> = (0..DEFAULT_LATENT_DIM).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let (_, _, energy) = rvq.quantize_residual(&latent).unwrap();
            for i in 1..energy.len() {
                assert!(
                    energy[i] <= energy[i - 1] + 1e-12,
                    "stage {i}: {} > {}",
                    energy[i],
                    energy[i - 1]
                );
            }
        }
    }

    #[test]
    fn greedy_matches_exhaustive_on_orthogonal_codebooks() {
        // stage 0 lives in dims {0,1}, stage 1 in dims {2,3}: greedy is optimal
        let mut rvq = tiny_rvq(4, 2, 4);
        let s0 = [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]];
        let s1 = [[0.0, 0.0], [2.0, 0.0], [0.0, 2.0], [2.0, 2.0]];
        for (i, v) in s0.iter().enumerate() {
            rvq.codebooks[0].data_mut()[i * 4] = v[0];
            rvq.codebooks[0].data_mut()[i * 4 + 1] = v[1];
        }
        for (i, v) in s1.iter().enumerate() {
            rvq.codebooks[1].data_mut()[i * 4 + 2] = v[0];
            rvq.codebooks[1].data_mut()[i * 4 + 3] = v[1];
        }
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut divergences = 0;
        for _ in 0..200 {
            let latent: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.5..2.5)).collect();
            let (greedy_idx, _, energy) = rvq.quantize_residual(&latent).unwrap();
            // exhaustive search over all K^D paths
            let mut best = f64::INFINITY;
            let mut best_path = (0usize, 0usize);
            for i0 in 0..4 {
                for i1 in 0..4 {
                    let mut err = 0.0;
                    for j in 0..4 {
                        let rec = rvq.codebooks[0].at2(i0, j) + rvq.codebooks[1].at2(i1, j);
                        let diff = latent[j] - rec;
                        err += diff * diff;
                    }
                    if err < best {
                        best = err;
                        best_path = (i0, i1);
                    }
                }
            }
            let greedy_total = energy[1];
            if (greedy_total - best).abs() > 1e-12 {
                divergences += 1;
            } else {
                assert_eq!(
                    (greedy_idx[0] as usize, greedy_idx[1] as usize),
                    best_path,
                    "greedy equals exhaustive when totals match"
                );
            }
        }
        assert_eq!(divergences, 0, "orthogonal construction must have no divergences");
    }

    #[test]
    fn dequantize_manual_sum_oracle() {
        let mut rvq = tiny_rvq(2, 2, 3);
        rvq.codebooks[0] = Tensor::new(vec![2, 3], vec![1.0, 0.0, 2.0, -1.0, 0.5, 0.0]);
        rvq.codebooks[1] = Tensor::new(vec![2, 3], vec![0.0, 0.0, 0.0, 0.25, 0.25, -0.5]);
        let codes = CodeMatrix {
            indices: vec![0, 1, 0, 1, 1, 0], // stage0: [0,1,0], stage1: [1,1,0]
            num_codebooks: 2,
            codebook_size: 2,
            frame_rate_millihertz: 75_000,
        };
        let lat = rvq.dequantize(&codes).unwrap();
        // frame 0: cb0[0] + cb1[1]
        assert_eq!(&lat.data()[0..3], &[1.25, 0.25, 1.5]);
        // frame 1: cb0[1] + cb1[1]
        assert_eq!(&lat.data()[3..6], &[-0.75, 0.75, -0.5]);
        // frame 2: cb0[0] + cb1[0]
        assert_eq!(&lat.data()[6..9], &[1.0, 0.0, 2.0]);
    }

    #[test]
    fn dequantize_rejects_out_of_range() {
        let rvq = tiny_rvq(2, 1, 3);
        let codes = CodeMatrix {
            indices: vec![5],
            num_codebooks: 1,
            codebook_size: 2,
            frame_rate_millihertz: 75_000,
        };
        assert!(matches!(rvq.dequantize(&codes), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn train_k1_converges_to_mean_latent() {
        let corpus = vec![tone_wave(200.0, 24000)];
        let cfg = MiniRvqConfig { codebook_size: 1, num_codebooks: 1, ..MiniRvqConfig::default() };
        let rvq = train_mini_rvq(&corpus, cfg, &RvqTrainConfig { max_fit_frames: 0, ..Default::default() })
            .unwrap();
        let lat = rvq.latents(&corpus[0]).unwrap();
        let d = rvq.config.latent_dim;
        let mut mean = vec![0.0; d];
        for t in 0..lat.rows() {
            for j in 0..d {
                mean[j] += lat.at2(t, j);
            }
        }
        for m in mean.iter_mut() {
            *m /= lat.rows() as f64;
        }
        for j in 0..d {
            assert!(
                (rvq.codebooks[0].at2(0, j) - mean[j]).abs() < 1e-9,
                "dim {j}: {} vs {}",
                rvq.codebooks[0].at2(0, j),
                mean[j]
            );
        }
    }

    #[test]
    fn reconstruction_error_non_increasing_in_stages() {
        let corpus: Vec<Waveform> = (0..8)
            .map(|i| tone_wave(120.0 + 45.0 * i as f64, 16000))
            .collect();
        let cfg = MiniRvqConfig { codebook_size: 16, ..MiniRvqConfig::default() };
        let rvq = train_mini_rvq(&corpus, cfg, &RvqTrainConfig::default()).unwrap();
        let held_out = tone_wave(333.0, 16000);
        let lat = rvq.latents(&held_out).unwrap();
        let errs: Vec<f64> = (1..=8).map(|s| rvq.reconstruction_error(&lat, s)).collect();
        for i in 1..errs.len() {
            assert!(errs[i] <= errs[i - 1] + 1e-12, "stage {}: {:?}", i, errs);
        }
    }

    #[test]
    fn two_separated_clusters_recovered() {
        // two constant signals -> two tight latent clusters; K=2 must recover
        // both cluster means at stage 0
        let loud: Vec<f64> = (0..24000)
            .map(|i| (2.0 * std::f64::consts::PI * 300.0 * i as f64 / 24000.0).sin() * 0.9)
            .collect();
        let soft: Vec<f64> = (0..24000)
            .map(|i| (2.0 * std::f64::consts::PI * 1500.0 * i as f64 / 24000.0).sin() * 0.9)
            .collect();
        let corpus =
            vec![Waveform::new(loud, 24000).unwrap(), Waveform::new(soft, 24000).unwrap()];
        let cfg = MiniRvqConfig { codebook_size: 2, num_codebooks: 1, ..MiniRvqConfig::default() };
        let rvq = train_mini_rvq(&corpus, cfg, &RvqTrainConfig { max_fit_frames: 0, ..Default::default() })
            .unwrap();
        // cluster means computed directly
        let d = rvq.config.latent_dim;
        let mut means = Vec::new();
        for w in &corpus {
            let lat = rvq.latents(w).unwrap();
            let mut m = vec![0.0; d];
            for t in 0..lat.rows() {
                for j in 0..d {
                    m[j] += lat.at2(t, j);
                }
            }
            for v in m.iter_mut() {
                *v /= lat.rows() as f64;
            }
            means.push(m);
        }
        // each cluster mean must be close to some codeword
        for m in &means {
            let (_, dist) = nearest_codeword(&rvq.codebooks[0], m);
            let scale: f64 = m.iter().map(|v| v * v).sum();
            assert!(dist < 0.05 * scale.max(1e-9), "cluster mean missed: dist {dist}");
        }
    }

    #[test]
    fn encode_deterministic() {
        let corpus: Vec<Waveform> = (0..4).map(|i| tone_wave(200.0 + 100.0 * i as f64, 12000)).collect();
        let cfg = MiniRvqConfig { codebook_size: 8, ..MiniRvqConfig::default() };
        let rvq = train_mini_rvq(&corpus, cfg, &RvqTrainConfig::default()).unwrap();
        let w = tone_wave(275.0, 9999);
        assert_eq!(rvq.encode(&w).unwrap(), rvq.encode(&w).unwrap());
    }

    #[test]
    fn sample_rate_mismatch_is_config_error() {
        let rvq = MiniRvq::untrained(MiniRvqConfig::default());
        let w = Waveform::new(vec![0.1; 1000], 16000).unwrap();
        assert!(matches!(rvq.encode(&w), Err(Error::Config(_))));
    }

    #[test]
    fn dcmx_round_trip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.dcmx");
        let m = CodeMatrix {
            indices: vec![3, 1, 4, 1, 5, 9, 2, 6],
            num_codebooks: 2,
            codebook_size: 16,
            frame_rate_millihertz: 75_000,
        };
        write_code_matrix(&path, &m).unwrap();
        let bytes1 = std::fs::read(&path).unwrap();
        let r = read_code_matrix(&path).unwrap();
        assert_eq!(r, m);
        write_code_matrix(&path, &r).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), bytes1);
    }

    #[test]
    fn mrvq_checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("q.mrvq");
        let corpus = vec![tone_wave(420.0, 24000)];
        let cfg = MiniRvqConfig { codebook_size: 4, num_codebooks: 2, ..MiniRvqConfig::default() };
        let rvq = train_mini_rvq(&corpus, cfg, &RvqTrainConfig::default()).unwrap();
        save_mini_rvq(&path, &rvq).unwrap();
        let bytes1 = std::fs::read(&path).unwrap();
        let loaded = load_mini_rvq(&path).unwrap();
        assert_eq!(loaded, rvq);
        save_mini_rvq(&path, &loaded).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), bytes1);
    }

    #[test]
    fn adapter_unconfigured_is_environment_error() {
        let adapter = ExternalCodecAdapter::default();
        let dir = tempfile::tempdir().unwrap();
        let w = tone_wave(440.0, 2400);
        match adapter.encode(&w, dir.path()) {
            Err(Error::Environment(msg)) => assert!(msg.contains("not configured")),
            other => panic!("expected environment error, got {other:?}"),
        }
    }

    #[test]
    fn adapter_missing_command_is_environment_error() {
        let adapter = ExternalCodecAdapter {
            command: Some("/nonexistent/codec-cmd".into()),
            expect_codebooks: 8,
            expect_codebook_size: 64,
        };
        let dir = tempfile::tempdir().unwrap();
        let w = tone_wave(440.0, 2400);
        assert!(matches!(adapter.encode(&w, dir.path()), Err(Error::Environment(_))));
    }

    #[cfg(unix)]
    #[test]
    fn adapter_metadata_mismatch_is_config_error() {
        use std::os::unix::fs::PermissionsExt;
        let dir = tempfile::tempdir().unwrap();
        // fake adapter: emits a fixed 8x2 DCMX with K=1024
        let m = CodeMatrix {
            indices: vec![0; 16],
            num_codebooks: 8,
            codebook_size: 1024,
            frame_rate_millihertz: 75_000,
        };
        let fixed = dir.path().join("fixed.dcmx");
        write_code_matrix(&fixed, &m).unwrap();
        let script = dir.path().join("fake_codec.sh");
        std::fs::write(&script, format!("#!/bin/sh\ncp {} \"$2\"\n", fixed.display())).unwrap();
        std::fs::set_permissions(&script, std::fs::Permissions::from_mode(0o755)).unwrap();

        let w = tone_wave(440.0, 24000);
        // matching expectations succeed
        let good = ExternalCodecAdapter {
            command: Some(script.display().to_string()),
            expect_codebooks: 8,
            expect_codebook_size: 1024,
        };
        let got = good.encode(&w, dir.path()).unwrap();
        assert_eq!(got.num_codebooks, 8);
        // K mismatch is a configuration error, never a silent fallback
        let bad = ExternalCodecAdapter {
            command: Some(script.display().to_string()),
            expect_codebooks: 8,
            expect_codebook_size: 64,
        };
        assert!(matches!(bad.encode(&w, dir.path()), Err(Error::Config(_))));
    }

    #[test]
    fn codebook_usage_above_half_after_training() {
        let mut corpus = Vec::new();
        // varied corpus: tones with different frequencies and amplitudes
        for i in 0..12 {
            let f = 100.0 + 85.0 * i as f64;
            let a = 0.2 + 0.06 * i as f64;
            let samples: Vec<f64> = (0..16000)
                .map(|n| {
                    let t = n as f64 / 24000.0;
                    (2.0 * std::f64::consts::PI * f * t).sin() * a
                        + (2.0 * std::f64::consts::PI * 2.7 * f * t).sin() * a * 0.4
                })
                .collect();
            corpus.push(Waveform::new(samples, 24000).unwrap());
        }
        let cfg = MiniRvqConfig { codebook_size: 16, ..MiniRvqConfig::default() };
        let rvq = train_mini_rvq(&corpus, cfg, &RvqTrainConfig::default()).unwrap();
        let mut all = Vec::new();
        for w in &corpus {
            all.push(rvq.latents(w).unwrap());
        }
        let total_rows: usize = all.iter().map(|t| t.rows()).sum();
        let d = rvq.config.latent_dim;
        let mut merged = Tensor::zeros(vec![total_rows, d]);
        let mut row = 0;
        for t in &all {
            merged.data_mut()[row * d..(row + t.rows()) * d].copy_from_slice(t.data());
            row += t.rows();
        }
        for stage in 0..rvq.config.num_codebooks {
            let usage = rvq.codebook_usage(&merged, stage);
            assert!(usage >= 0.5, "stage {stage} usage {usage}");
        }
    }
}
