//! Dataset ingestion, manifests, the character tokenizer and the synthetic
//! factorized prosody corpus.
//!
//! Manifest format: UTF-8, one record per line, tab-separated
//! `utt_id, speaker_id, relative audio path, duration_s, split, text`.
//! Audio is stored as 16-bit PCM mono at 24 kHz. The synthetic label table is
//! tab-separated `utt_id, content_class, prosody_class, speaker_class`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::audio::{self, Waveform, DEFAULT_SAMPLE_RATE};
use crate::error::{Error, Result};

pub const MIN_DURATION_S: f64 = 0.7;
pub const VAL_PER_SPEAKER: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Split> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Format(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UtteranceRecord {
    pub utt_id: String,
    pub speaker_id: String,
    pub audio_path: String,
    pub duration_s: f64,
    pub split: Split,
    pub text: String,
}

#[derive(Debug, Clone, Default)]
pub struct Manifest {
    pub records: Vec<UtteranceRecord>,
}

impl Manifest {
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for r in &self.records {
            writeln!(
                out,
                "{}\t{}\t{}\t{:.6}\t{}\t{}",
                r.utt_id,
                r.speaker_id,
                r.audio_path,
                r.duration_s,
                r.split.as_str(),
                r.text
            )
            .expect("string write");
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Manifest> {
        let text = std::fs::read_to_string(path)?;
        let mut records = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 6 {
                return Err(Error::Format(format!(
                    "{}:{}: expected 6 tab-separated fields, found {}",
                    path.display(),
                    lineno + 1,
                    fields.len()
                )));
            }
            records.push(UtteranceRecord {
                utt_id: fields[0].to_string(),
                speaker_id: fields[1].to_string(),
                audio_path: fields[2].to_string(),
                duration_s: fields[3].parse().map_err(|e| {
                    Error::Format(format!("{}:{}: bad duration: {e}", path.display(), lineno + 1))
                })?,
                split: Split::parse(fields[4])?,
                text: fields[5].to_string(),
            });
        }
        let manifest = Manifest { records };
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for r in &self.records {
            if !seen.insert(&r.utt_id) {
                return Err(Error::Format(format!("duplicate utt_id `{}`", r.utt_id)));
            }
            if r.duration_s < MIN_DURATION_S {
                return Err(Error::Format(format!(
                    "record `{}` retained with duration {:.3}s below the {MIN_DURATION_S}s floor",
                    r.utt_id, r.duration_s
                )));
            }
        }
        Ok(())
    }

    pub fn split(&self, split: Split) -> Vec<&UtteranceRecord> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    pub fn hours(&self, split: Split) -> f64 {
        self.split(split).iter().map(|r| r.duration_s).sum::<f64>() / 3600.0
    }
}

// ---- tokenizer ----

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const BLANK_ID: usize = 2;
const INVENTORY: &str = "abcdefghijklmnopqrstuvwxyz0123456789 .,!?'-";

/// Character tokenizer over a fixed inventory with pad/unk/blank symbols.
#[derive(Debug, Clone)]
pub struct Tokenizer {
    /// Interleave blank ids between tokens (and at both ends).
    pub add_blank: bool,
}

impl Default for Tokenizer {
    fn default() -> Self {
        Tokenizer { add_blank: true }
    }
}

impl Tokenizer {
    pub fn vocab_size(&self) -> usize {
        3 + INVENTORY.chars().count()
    }

    /// Lowercase, collapse whitespace, then map through the inventory.
    /// Unknown characters map to the UNK id; their count is returned.
    pub fn tokenize(&self, text: &str) -> Result<(Vec<usize>, usize)> {
        let lowered = text.to_lowercase();
        let mut normalized = String::with_capacity(lowered.len());
        let mut last_space = true;
        for ch in lowered.chars() {
            if ch.is_whitespace() {
                if !last_space {
                    normalized.push(' ');
                    last_space = true;
                }
            } else {
                normalized.push(ch);
                last_space = false;
            }
        }
        let normalized = normalized.trim_end().to_string();
        if normalized.is_empty() {
            return Err(Error::InvalidInput("text empty after normalization".into()));
        }
        let mut unknown = 0usize;
        let mut ids = Vec::with_capacity(normalized.len());
        for ch in normalized.chars() {
            match INVENTORY.chars().position(|c| c == ch) {
                Some(p) => ids.push(3 + p),
                None => {
                    ids.push(UNK_ID);
                    unknown += 1;
                }
            }
        }
        if unknown > 0 {
            log::warn!("tokenizer mapped {unknown} unsupported characters to UNK");
        }
        if self.add_blank {
            let mut with_blanks = Vec::with_capacity(ids.len() * 2 + 1);
            with_blanks.push(BLANK_ID);
            for id in ids {
                with_blanks.push(id);
                with_blanks.push(BLANK_ID);
            }
            ids = with_blanks;
        }
        Ok((ids, unknown))
    }
}

// ---- corpus preparation ----

#[derive(Debug, Clone)]
pub struct PrepareConfig {
    pub target_rate: u32,
    pub seed: u64,
}

impl Default for PrepareConfig {
    fn default() -> Self {
        PrepareConfig { target_rate: DEFAULT_SAMPLE_RATE, seed: 0 }
    }
}

#[derive(Debug, Clone, Default, serde::Serialize)]
pub struct PrepareStats {
    pub scanned: usize,
    pub excluded_short: usize,
    pub excluded_unreadable: usize,
    pub missing_transcript: usize,
    pub train_hours: f64,
    pub val_hours: f64,
    pub test_hours: f64,
    pub speakers: usize,
    pub fallback_speakers: Vec<String>,
}

/// Ingest a directory of speech: resample to 24 kHz, peak-normalize, drop
/// clips under 0.7 s, split 9:1 train:test per speaker and move ten training
/// items per speaker to validation. Layout: `<source>/<speaker>/<utt>.wav`
/// with an optional sibling `<utt>.txt` transcript (file stem used otherwise).
pub fn prepare_corpus(
    source_dir: &Path,
    out_dir: &Path,
    cfg: &PrepareConfig,
) -> Result<(Manifest, PrepareStats)> {
    let mut stats = PrepareStats::default();
    let mut by_speaker: BTreeMap<String, Vec<(String, PathBuf, String)>> = BTreeMap::new();
    let mut wavs = Vec::new();
    scan_wavs(source_dir, &mut wavs)?;
    wavs.sort();
    for path in wavs {
        stats.scanned += 1;
        let speaker = path
            .parent()
            .filter(|p| *p != source_dir)
            .and_then(|p| p.file_name())
            .map(|s| s.to_string_lossy().to_string())
            .unwrap_or_else(|| "spk".to_string());
        let stem = path.file_stem().unwrap_or_default().to_string_lossy().to_string();
        let txt_path = path.with_extension("txt");
        let text = if txt_path.exists() {
            std::fs::read_to_string(&txt_path)?.trim().replace(['\t', '\n'], " ")
        } else {
            stats.missing_transcript += 1;
            stem.replace('_', " ")
        };
        by_speaker.entry(speaker).or_default().push((stem, path, text));
    }
    if by_speaker.is_empty() {
        return Err(Error::InvalidInput(format!(
            "no wav files found under {}",
            source_dir.display()
        )));
    }

    std::fs::create_dir_all(out_dir.join("audio"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut manifest = Manifest::default();
    stats.speakers = by_speaker.len();

    for (speaker, mut items) in by_speaker {
        // resample and filter first so the split sees only usable items
        let mut usable: Vec<(String, Waveform, String)> = Vec::new();
        for (stem, path, text) in items.drain(..) {
            let w = match audio::read_wav(&path) {
                Ok(w) => w,
                Err(e) => {
                    log::warn!("skipping unreadable {}: {e}", path.display());
                    stats.excluded_unreadable += 1;
                    continue;
                }
            };
            let mut w = audio::resample(&w, cfg.target_rate)?;
            w.peak_normalize(0.95);
            if w.duration_s() < MIN_DURATION_S {
                stats.excluded_short += 1;
                continue;
            }
            usable.push((stem, w, text));
        }
        if usable.is_empty() {
            continue;
        }
        usable.sort_by(|a, b| a.0.cmp(&b.0));
        let n = usable.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);

        // 9:1 per speaker; speakers with fewer than 12 usable items fall back
        // proportionally (at least one test item; one val item when more than
        // two remain after the test cut)
        let n_test = ((n as f64 / 10.0).round() as usize).max(1);
        let n_val = if n >= 12 {
            VAL_PER_SPEAKER.min(n - n_test - 1)
        } else {
            stats.fallback_speakers.push(speaker.clone());
            log::warn!("speaker {speaker} has only {n} usable items; proportional fallback");
            usize::from(n - n_test > 2)
        };
        for (rank, &i) in order.iter().enumerate() {
            let split = if rank < n_test {
                Split::Test
            } else if rank < n_test + n_val {
                Split::Val
            } else {
                Split::Train
            };
            let (stem, w, text) = &usable[i];
            let utt_id = format!("{speaker}_{stem}");
            let rel = format!("audio/{utt_id}.wav");
            audio::write_wav(&out_dir.join(&rel), w)?;
            manifest.records.push(UtteranceRecord {
                utt_id,
                speaker_id: speaker.clone(),
                audio_path: rel,
                duration_s: w.duration_s(),
                split,
                text: text.clone(),
            });
        }
    }
    manifest.records.sort_by(|a, b| a.utt_id.cmp(&b.utt_id));
    manifest.validate()?;
    stats.train_hours = manifest.hours(Split::Train);
    stats.val_hours = manifest.hours(Split::Val);
    stats.test_hours = manifest.hours(Split::Test);
    manifest.write(&out_dir.join("manifest.tsv"))?;
    Ok((manifest, stats))
}

fn scan_wavs(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in std::fs::read_dir(dir)? {
        let entry = entry?;
        let path = entry.path();
        if path.is_dir() {
            scan_wavs(&path, out)?;
        } else if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav")) {
            out.push(path);
        }
    }
    Ok(())
}

// ---- synthetic factorized corpus ----

/// Fully crossed corpus spec: every (content, prosody, speaker) cell is
/// generated `n_per_cell` times, which makes the three factors exactly
/// independent over the manifest.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SyntheticSpec {
    pub content_classes: usize,
    pub prosody_classes: usize,
    pub speaker_classes: usize,
    pub n_per_cell: usize,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.content_classes < 2
            || self.prosody_classes < 2
            || self.speaker_classes < 2
            || self.n_per_cell < 1
        {
            return Err(Error::Config(
                "synthetic corpus needs at least 2 classes per factor and n_per_cell >= 1".into(),
            ));
        }
        if self.content_classes > CONTENTS.len()
            || self.prosody_classes > PROSODIES.len()
            || self.speaker_classes > SPEAKERS.len()
        {
            return Err(Error::Config(format!(
                "at most {} content, {} prosody and {} speaker classes are defined",
                CONTENTS.len(),
                PROSODIES.len(),
                SPEAKERS.len()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticLabel {
    pub utt_id: String,
    pub content_class: usize,
    pub prosody_class: usize,
    pub speaker_class: usize,
}

pub fn write_label_table(path: &Path, labels: &[SyntheticLabel]) -> Result<()> {
    let mut out = String::new();
    for l in labels {
        writeln!(out, "{}\t{}\t{}\t{}", l.utt_id, l.content_class, l.prosody_class, l.speaker_class)
            .expect("string write");
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_label_table(path: &Path) -> Result<Vec<SyntheticLabel>> {
    let text = std::fs::read_to_string(path)?;
    let mut labels = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 4 {
            return Err(Error::Format(format!(
                "{}:{}: expected 4 fields",
                path.display(),
                lineno + 1
            )));
        }
        let parse = |s: &str| -> Result<usize> {
            s.parse().map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), lineno + 1)))
        };
        labels.push(SyntheticLabel {
            utt_id: f[0].to_string(),
            content_class: parse(f[1])?,
            prosody_class: parse(f[2])?,
            speaker_class: parse(f[3])?,
        });
    }
    Ok(labels)
}

// same six syllables in different orders: contents differ only in sequencing,
// so their long-term spectral statistics stay close
const CONTENTS: [&str; 4] = [
    "ba di gu me to ka",
    "di ka ba to gu me",
    "gu me ka di ba to",
    "to gu me ka di ba",
];

struct ProsodyClass {
    rate_syl_per_s: f64,
    contour: fn(f64) -> f64,
    energy: fn(f64) -> f64,
}

fn contour_flat(_: f64) -> f64 {
    1.0
}
fn contour_rise(u: f64) -> f64 {
    0.8 + 0.55 * u
}
fn contour_fall(u: f64) -> f64 {
    1.35 - 0.55 * u
}
fn contour_wave(u: f64) -> f64 {
    1.0 + 0.2 * (2.0 * std::f64::consts::PI * 2.5 * u).sin()
}
fn energy_flat(_: f64) -> f64 {
    1.0
}
fn energy_rise(u: f64) -> f64 {
    0.6 + 0.6 * u
}
fn energy_fall(u: f64) -> f64 {
    1.2 - 0.6 * u
}
fn energy_pulse(u: f64) -> f64 {
    1.0 + 0.4 * (2.0 * std::f64::consts::PI * 2.5 * u).cos()
}

const PROSODIES: [ProsodyClass; 4] = [
    ProsodyClass { rate_syl_per_s: 4.6, contour: contour_flat, energy: energy_flat },
    ProsodyClass { rate_syl_per_s: 5.8, contour: contour_rise, energy: energy_rise },
    ProsodyClass { rate_syl_per_s: 3.6, contour: contour_fall, energy: energy_fall },
    ProsodyClass { rate_syl_per_s: 5.2, contour: contour_wave, energy: energy_pulse },
];

struct SpeakerClass {
    base_f0: f64,
    tilt_db_per_oct: f64,
    formant_scale: f64,
}

const SPEAKERS: [SpeakerClass; 4] = [
    SpeakerClass { base_f0: 110.0, tilt_db_per_oct: -2.0, formant_scale: 1.0 },
    SpeakerClass { base_f0: 150.0, tilt_db_per_oct: -4.5, formant_scale: 1.1 },
    SpeakerClass { base_f0: 205.0, tilt_db_per_oct: -7.0, formant_scale: 0.9 },
    SpeakerClass { base_f0: 280.0, tilt_db_per_oct: -9.5, formant_scale: 1.2 },
];

// vowel -> two formant-like spectral bumps (Hz)
fn vowel_formants(v: char) -> (f64, f64) {
    match v {
        'a' => (700.0, 1200.0),
        'i' => (300.0, 2300.0),
        'u' => (350.0, 800.0),
        'e' => (500.0, 1900.0),
        'o' => (450.0, 900.0),
        _ => (500.0, 1500.0),
    }
}

/// Deterministic harmonic-plus-noise rendering of one synthetic utterance.
fn render_item(
    content: usize,
    prosody: usize,
    speaker: usize,
    jitter_rng: &mut ChaCha8Rng,
) -> (String, Waveform) {
    let sr = DEFAULT_SAMPLE_RATE as f64;
    let text = CONTENTS[content];
    let p = &PROSODIES[prosody];
    let s = &SPEAKERS[speaker];
    let syllables: Vec<&str> = text.split_whitespace().collect();
    let n_syl = syllables.len();
    let rate_jitter = 1.0 + jitter_rng.gen_range(-0.04..0.04);
    let f0_jitter = 1.0 + jitter_rng.gen_range(-0.03..0.03);
    let syl_dur = rate_jitter / p.rate_syl_per_s;
    let voiced_frac = 0.62;
    let burst_frac = 0.14;
    let tail_s = 0.12;
    let total_s = n_syl as f64 * syl_dur + tail_s;
    let n = (total_s * sr).ceil() as usize;
    let mut samples = vec![0.0f64; n];
    let n_harm = 14usize;
    let mut phases = vec![0.0f64; n_harm];
    for (si, syl) in syllables.iter().enumerate() {
        let vowel = syl.chars().nth(1).unwrap_or('a');
        let (f1, f2) = vowel_formants(vowel);
        let (f1, f2) = (f1 * s.formant_scale, f2 * s.formant_scale);
        let start = (si as f64 * syl_dur * sr) as usize;
        let burst_len = (syl_dur * burst_frac * sr) as usize;
        let voiced_len = (syl_dur * voiced_frac * sr) as usize;
        // consonant burst: shaped noise
        for i in 0..burst_len {
            let idx = start + i;
            if idx >= n {
                break;
            }
            let env = (i as f64 / burst_len.max(1) as f64 * std::f64::consts::PI).sin();
            samples[idx] += 0.25 * env * (jitter_rng.gen::<f64>() * 2.0 - 1.0);
        }
        // voiced vowel: harmonic stack with formant-weighted amplitudes
        for i in 0..voiced_len {
            let idx = start + burst_len + i;
            if idx >= n {
                break;
            }
            let u_global = idx as f64 / n as f64;
            let f0 = s.base_f0 * f0_jitter * (p.contour)(u_global);
            let env_att = (i as f64 / (0.01 * sr)).min(1.0);
            let env_rel = ((voiced_len - i) as f64 / (0.015 * sr)).min(1.0);
            let amp = (p.energy)(u_global) * env_att * env_rel;
            let mut acc = 0.0;
            for (h, phase) in phases.iter_mut().enumerate() {
                let fh = f0 * (h + 1) as f64;
                if fh > sr / 2.0 - 500.0 {
                    break;
                }
                *phase += 2.0 * std::f64::consts::PI * fh / sr;
                // source tilt plus two formant bumps
                let octaves = (fh / s.base_f0).log2().max(0.0);
                let tilt = 10f64.powf(s.tilt_db_per_oct * octaves / 20.0);
                let bump = |f: f64, c: f64| {
                    let z = (f - c) / (0.25 * c);
                    (-0.5 * z * z).exp()
                };
                let formant = 0.3 + bump(fh, f1) + 0.7 * bump(fh, f2);
                acc += tilt * formant * phase.sin();
            }
            samples[idx] += 0.22 * amp * acc;
        }
    }
    let mut w = Waveform::new(samples, DEFAULT_SAMPLE_RATE).expect("non-empty synthetic signal");
    w.peak_normalize(0.9);
    (text.to_string(), w)
}

/// Generate the corpus: audio files, manifest and label table, all
/// deterministic under the seed (bit-identical re-runs).
pub fn generate_synthetic_corpus(
    spec: &SyntheticSpec,
    out_dir: &Path,
    seed: u64,
) -> Result<(Manifest, Vec<SyntheticLabel>)> {
    spec.validate()?;
    std::fs::create_dir_all(out_dir.join("audio"))?;
    let mut manifest = Manifest::default();
    let mut labels = Vec::new();
    for c in 0..spec.content_classes {
        for p in 0..spec.prosody_classes {
            for s in 0..spec.speaker_classes {
                for i in 0..spec.n_per_cell {
                    let cell_seed =
                        seed ^ ((c as u64) << 40) ^ ((p as u64) << 28) ^ ((s as u64) << 16) ^ i as u64;
                    let mut rng = ChaCha8Rng::seed_from_u64(cell_seed);
                    let (text, w) = render_item(c, p, s, &mut rng);
                    let utt_id = format!("syn_c{c}_p{p}_s{s}_{i:03}");
                    let rel = format!("audio/{utt_id}.wav");
                    audio::write_wav(&out_dir.join(&rel), &w)?;
                    // deterministic split: last item of each cell goes to test
                    let split = if spec.n_per_cell >= 2 && i == spec.n_per_cell - 1 {
                        Split::Test
                    } else {
                        Split::Train
                    };
                    manifest.records.push(UtteranceRecord {
                        utt_id: utt_id.clone(),
                        speaker_id: format!("spk{s}"),
                        audio_path: rel,
                        duration_s: w.duration_s(),
                        split,
                        text,
                    });
                    labels.push(SyntheticLabel {
                        utt_id,
                        content_class: c,
                        prosody_class: p,
                        speaker_class: s,
                    });
                }
            }
        }
    }
    manifest.validate()?;
    manifest.write(&out_dir.join("manifest.tsv"))?;
    write_label_table(&out_dir.join("labels.tsv"), &labels)?;
    Ok((manifest, labels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp;

    #[test]
    fn tokenizer_normalizes_and_is_deterministic() {
        let tk = Tokenizer { add_blank: false };
        let (a, unk_a) = tk.tokenize("Ab  c").unwrap();
        let (b, _) = tk.tokenize("ab c").unwrap();
        assert_eq!(a, b);
        assert_eq!(unk_a, 0);
        let (c1, _) = tk.tokenize("hello world").unwrap();
        let (c2, _) = tk.tokenize("hello world").unwrap();
        assert_eq!(c1, c2);
    }

    #[test]
    fn tokenizer_unknown_symbols_map_to_unk() {
        let tk = Tokenizer { add_blank: false };
        let (ids, unk) = tk.tokenize("€€€").unwrap();
        assert_eq!(ids, vec![UNK_ID; 3]);
        assert_eq!(unk, 3);
    }

    #[test]
    fn tokenizer_rejects_empty_after_normalization() {
        let tk = Tokenizer::default();
        assert!(matches!(tk.tokenize("   \t\n  "), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn tokenizer_blank_interleaving() {
        let tk = Tokenizer { add_blank: true };
        let (ids, _) = tk.tokenize("ab").unwrap();
        assert_eq!(ids.len(), 5);
        assert_eq!(ids[0], BLANK_ID);
        assert_eq!(ids[2], BLANK_ID);
        assert_eq!(ids[4], BLANK_ID);
    }

    #[test]
    fn synthetic_corpus_counts_and_determinism() {
        let dir1 = tempfile::tempdir().unwrap();
        let dir2 = tempfile::tempdir().unwrap();
        let spec = SyntheticSpec {
            content_classes: 2,
            prosody_classes: 2,
            speaker_classes: 2,
            n_per_cell: 3,
        };
        let (m1, l1) = generate_synthetic_corpus(&spec, dir1.path(), 7).unwrap();
        let (m2, _) = generate_synthetic_corpus(&spec, dir2.path(), 7).unwrap();
        assert_eq!(m1.records.len(), 24); // 2*2*2*3
        assert_eq!(l1.len(), 24);
        // bit-identical audio
        for r in &m1.records {
            let a = std::fs::read(dir1.path().join(&r.audio_path)).unwrap();
            let b = std::fs::read(dir2.path().join(&r.audio_path)).unwrap();
            assert_eq!(a, b, "audio differs for {}", r.utt_id);
        }
        assert_eq!(
            std::fs::read(dir1.path().join("manifest.tsv")).unwrap(),
            std::fs::read(dir2.path().join("manifest.tsv")).unwrap()
        );
        for r in &m1.records {
            assert!(r.duration_s >= MIN_DURATION_S);
        }
        let _ = m2;
    }

    #[test]
    fn prosody_classes_differ_in_measured_f0_slope() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (text_r, rise) = render_item(0, 1, 0, &mut rng);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (text_f, fall) = render_item(0, 2, 0, &mut rng);
        assert_eq!(text_r, text_f, "same content class, same tokens");
        let f0_r = dsp::track_f0(&rise, 1024, 256, 70.0, 450.0);
        let f0_f = dsp::track_f0(&fall, 1024, 256, 70.0, 450.0);
        let slope_r = dsp::f0_slope(&f0_r, 256, 24000);
        let slope_f = dsp::f0_slope(&f0_f, 256, 24000);
        assert!(slope_r - slope_f > 30.0, "rising vs falling slopes: {slope_r} vs {slope_f}");
        assert!(slope_r > 10.0, "rising contour slope {slope_r}");
        assert!(slope_f < -10.0, "falling contour slope {slope_f}");
    }

    #[test]
    fn speakers_differ_in_f0_register() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (_, low) = render_item(0, 0, 0, &mut rng);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (_, high) = render_item(0, 0, 3, &mut rng);
        let mean_f0 = |w: &Waveform| {
            let f0 = dsp::track_f0(w, 1024, 256, 70.0, 450.0);
            let v: Vec<f64> = f0.into_iter().filter(|x| x.is_finite()).collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        let (lo, hi) = (mean_f0(&low), mean_f0(&high));
        assert!(hi > lo + 100.0, "speaker registers: {lo} vs {hi}");
    }

    #[test]
    fn fully_crossed_labels_have_zero_mutual_information() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SyntheticSpec {
            content_classes: 2,
            prosody_classes: 3,
            speaker_classes: 2,
            n_per_cell: 2,
        };
        let (_, labels) = generate_synthetic_corpus(&spec, dir.path(), 3).unwrap();
        let n = labels.len() as f64;
        let mut joint = std::collections::HashMap::new();
        let mut pc = std::collections::HashMap::new();
        let mut pp = std::collections::HashMap::new();
        for l in &labels {
            *joint.entry((l.content_class, l.prosody_class)).or_insert(0.0) += 1.0 / n;
            *pc.entry(l.content_class).or_insert(0.0) += 1.0 / n;
            *pp.entry(l.prosody_class).or_insert(0.0) += 1.0 / n;
        }
        let mut mi = 0.0;
        for ((c, p), pj) in &joint {
            mi += pj * (pj / (pc[c] * pp[p])).ln();
        }
        assert!(mi.abs() < 1e-12, "mutual information {mi}");
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.tsv");
        let m = Manifest {
            records: vec![UtteranceRecord {
                utt_id: "a_1".into(),
                speaker_id: "a".into(),
                audio_path: "audio/a_1.wav".into(),
                duration_s: 1.25,
                split: Split::Train,
                text: "hello there".into(),
            }],
        };
        m.write(&path).unwrap();
        let r = Manifest::read(&path).unwrap();
        assert_eq!(r.records, m.records);
    }

    #[test]
    fn prepare_corpus_split_arithmetic() {
        let src = tempfile::tempdir().unwrap();
        let out = tempfile::tempdir().unwrap();
        let spk = src.path().join("p001");
        std::fs::create_dir_all(&spk).unwrap();
        // 20 usable items and one too-short item
        for i in 0..20 {
            let samples: Vec<f64> = (0..24000)
                .map(|n| (2.0 * std::f64::consts::PI * (200.0 + i as f64) * n as f64 / 24000.0).sin())
                .collect();
            let w = Waveform::new(samples, 24000).unwrap();
            audio::write_wav(&spk.join(format!("utt{i:02}.wav")), &w).unwrap();
            std::fs::write(spk.join(format!("utt{i:02}.txt")), format!("sentence {i}")).unwrap();
        }
        let short = Waveform::new(vec![0.1; 12000], 24000).unwrap(); // 0.5 s
        audio::write_wav(&spk.join("short.wav"), &short).unwrap();

        let (manifest, stats) =
            prepare_corpus(src.path(), out.path(), &PrepareConfig::default()).unwrap();
        assert_eq!(stats.excluded_short, 1);
        assert_eq!(manifest.records.len(), 20);
        assert_eq!(manifest.split(Split::Test).len(), 2); // round(20/10)
        assert_eq!(manifest.split(Split::Val).len(), 10);
        assert_eq!(manifest.split(Split::Train).len(), 8);
        let mut ids = std::collections::HashSet::new();
        for r in &manifest.records {
            assert!(ids.insert(r.utt_id.clone()), "splits disjoint over unique ids");
        }
    }

    #[test]
    fn prepare_corpus_resamples_48k() {
        let src = tempfile::tempdir().unwrap();
        let out = tempfile::tempdir().unwrap();
        let spk = src.path().join("s");
        std::fs::create_dir_all(&spk).unwrap();
        let samples: Vec<f64> = (0..48000)
            .map(|n| (2.0 * std::f64::consts::PI * 300.0 * n as f64 / 48000.0).sin())
            .collect();
        let w = Waveform::new(samples, 48000).unwrap();
        audio::write_wav(&spk.join("a.wav"), &w).unwrap();
        let (manifest, _) =
            prepare_corpus(src.path(), out.path(), &PrepareConfig::default()).unwrap();
        assert_eq!(manifest.records.len(), 1);
        let stored = audio::read_wav(&out.path().join(&manifest.records[0].audio_path)).unwrap();
        assert_eq!(stored.sample_rate, 24000);
        assert_eq!(stored.len(), 24000);
    }
}
