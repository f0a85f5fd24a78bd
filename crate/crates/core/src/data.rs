//! Mixture synthesis at exact SNRs, synthetic speech and noise sources,
//! manifests, and zero-padded batches.

use std::fmt;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::dsp::{read_wav, StftConfig};
use crate::error::{Error, Result};

/// RMS level of generated speech and noise.
pub const SYNTH_RMS: f64 = 0.05;

/// Mean-square power in `f64`.
pub fn power(x: &[f32]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    x.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>() / x.len() as f64
}

fn scale_to_rms(x: &mut [f64], rms: f64) {
    let p = x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64;
    if p > 0.0 {
        let g = rms / p.sqrt();
        x.iter_mut().for_each(|v| *v *= g);
    }
}

/// Harmonic "speech": voiced syllables with gliding fundamentals between
/// 100 and 300 Hz, ten harmonics shaped by two formant resonances, a
/// syllable envelope with slow amplitude modulation, and silent gaps.
pub fn synth_speech(seed: u64, len: usize, sample_rate: u32) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sr = sample_rate as f64;
    let mut out = vec![0.0f64; len];
    let mut pos = (rng.gen_range(0.02..0.08) * sr) as usize;
    while pos < len {
        let dur = ((rng.gen_range(0.12..0.30) * sr) as usize).min(len - pos);
        let f0_start: f64 = rng.gen_range(100.0..300.0);
        let f0_end = (f0_start * rng.gen_range(0.8..1.2)).clamp(100.0, 300.0);
        let formants = [rng.gen_range(300.0..900.0), rng.gen_range(900.0..2500.0)];
        let am_rate = rng.gen_range(3.0..6.0);
        let am_phase = rng.gen_range(0.0..std::f64::consts::TAU);
        let mut phase = [0.0f64; 10];
        for (k, p) in phase.iter_mut().enumerate() {
            *p = rng.gen_range(0.0..std::f64::consts::TAU) * (k as f64 / 10.0);
        }
        for i in 0..dur {
            let u = i as f64 / dur as f64;
            let f0 = f0_start + (f0_end - f0_start) * u;
            let env = (std::f64::consts::PI * u).sin().powf(0.7)
                * (1.0 + 0.3 * (std::f64::consts::TAU * am_rate * i as f64 / sr + am_phase).sin());
            let mut s = 0.0;
            for (k, p) in phase.iter_mut().enumerate() {
                let fk = f0 * (k + 1) as f64;
                if fk >= sr / 2.0 {
                    break;
                }
                let gain: f64 = formants
                    .iter()
                    .map(|&fc| {
                        let bw = 0.25 * fc;
                        1.0 / (1.0 + ((fk - fc) / bw).powi(2))
                    })
                    .sum::<f64>()
                    + 0.05;
                *p += std::f64::consts::TAU * fk / sr;
                s += gain / (k + 1) as f64 * p.sin();
            }
            out[pos + i] = env * s;
        }
        pos += dur + (rng.gen_range(0.03..0.15) * sr) as usize;
    }
    scale_to_rms(&mut out, SYNTH_RMS);
    out.into_iter().map(|v| v as f32).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NoiseKind {
    White,
    Pink,
}

/// Gaussian white or pink noise at [`SYNTH_RMS`].
pub fn synth_noise(kind: NoiseKind, seed: u64, len: usize) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut white = (0..len).map(|_| rng.sample::<f64, _>(StandardNormal));
    let mut out: Vec<f64> = match kind {
        NoiseKind::White => white.collect(),
        NoiseKind::Pink => {
            // Paul Kellet's economy pink filter
            let mut b = [0.0f64; 3];
            white
                .by_ref()
                .map(|w| {
                    b[0] = 0.99765 * b[0] + w * 0.0990460;
                    b[1] = 0.96300 * b[1] + w * 0.2965164;
                    b[2] = 0.57000 * b[2] + w * 1.0526913;
                    b[0] + b[1] + b[2] + w * 0.1848
                })
                .collect()
        }
    };
    scale_to_rms(&mut out, SYNTH_RMS);
    out.into_iter().map(|v| v as f32).collect()
}

/// A clean or noise source: a WAV file or a generator.
///
/// Generators are written `synth:<kind>:<seed>:<seconds>` with kind one of
/// `speech`, `white` or `pink`.
#[derive(Clone, Debug, PartialEq)]
pub enum Source {
    Wav(PathBuf),
    Speech { seed: u64, seconds: f64 },
    Noise { kind: NoiseKind, seed: u64, seconds: f64 },
}

impl Source {
    /// Parses a source reference; relative WAV paths are resolved against `base`.
    pub fn parse(s: &str, base: Option<&Path>) -> Result<Self> {
        let Some(rest) = s.strip_prefix("synth:") else {
            let p = PathBuf::from(s);
            return Ok(Source::Wav(match base {
                Some(b) if p.is_relative() => b.join(p),
                _ => p,
            }));
        };
        let parts: Vec<&str> = rest.split(':').collect();
        let [kind, seed, secs] = parts.as_slice() else {
            return Err(Error::Format(format!("bad generator reference '{s}'")));
        };
        let seed = seed.parse().map_err(|_| Error::Format(format!("bad seed in '{s}'")))?;
        let seconds: f64 = secs.parse().map_err(|_| Error::Format(format!("bad duration in '{s}'")))?;
        if !(seconds > 0.0 && seconds.is_finite()) {
            return Err(Error::Format(format!("duration must be positive in '{s}'")));
        }
        match *kind {
            "speech" => Ok(Source::Speech { seed, seconds }),
            "white" => Ok(Source::Noise { kind: NoiseKind::White, seed, seconds }),
            "pink" => Ok(Source::Noise { kind: NoiseKind::Pink, seed, seconds }),
            other => Err(Error::Format(format!("unknown generator '{other}'"))),
        }
    }

    pub fn load(&self, sample_rate: u32) -> Result<Vec<f32>> {
        let n = |secs: f64| (secs * sample_rate as f64).round() as usize;
        Ok(match self {
            Source::Wav(p) => read_wav(p, sample_rate)?,
            Source::Speech { seed, seconds } => synth_speech(*seed, n(*seconds), sample_rate),
            Source::Noise { kind, seed, seconds } => synth_noise(*kind, *seed, n(*seconds)),
        })
    }
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Source::Wav(p) => write!(f, "{}", p.display()),
            Source::Speech { seed, seconds } => write!(f, "synth:speech:{seed}:{seconds}"),
            Source::Noise { kind, seed, seconds } => {
                let k = if *kind == NoiseKind::White { "white" } else { "pink" };
                write!(f, "synth:{k}:{seed}:{seconds}")
            }
        }
    }
}

/// Concatenates noise sources in order. WAV files must match `sample_rate`.
pub fn build_noise_track(sources: &[Source], sample_rate: u32) -> Result<Vec<f32>> {
    let mut track = Vec::new();
    for s in sources {
        track.extend(s.load(sample_rate)?);
    }
    Ok(track)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mixture {
    pub mixture: Vec<f32>,
    pub scaled_noise: Vec<f32>,
    pub offset: usize,
    pub gain: f64,
}

/// Mixes `clean` with a randomly placed excerpt of `noise_track` scaled so
/// that the mean-square SNR equals `snr_db`.
pub fn mix_at_snr(clean: &[f32], noise_track: &[f32], snr_db: f64, seed: u64) -> Result<Mixture> {
    if !snr_db.is_finite() {
        return Err(Error::Config(format!("target SNR {snr_db} is not finite")));
    }
    if noise_track.len() < clean.len() {
        return Err(Error::Length(format!(
            "noise track has {} samples, clean signal needs {}",
            noise_track.len(),
            clean.len()
        )));
    }
    let pc = power(clean);
    if !(pc > 0.0) {
        return Err(Error::UndefinedMetric("clean signal is silent, SNR is undefined".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let offset = rng.gen_range(0..=noise_track.len() - clean.len());
    let excerpt = &noise_track[offset..offset + clean.len()];
    let pn = power(excerpt);
    if !(pn > 0.0) {
        return Err(Error::UndefinedMetric(format!("noise excerpt at offset {offset} is silent")));
    }
    let gain = (pc / (pn * 10f64.powf(snr_db / 10.0))).sqrt();
    let scaled_noise: Vec<f32> = excerpt.iter().map(|&v| (v as f64 * gain) as f32).collect();
    let mixture = clean.iter().zip(&scaled_noise).map(|(&c, &n)| c + n).collect();
    Ok(Mixture { mixture, scaled_noise, offset, gain })
}

#[derive(Clone, Debug, PartialEq)]
pub struct MixtureSpec {
    pub clean: Source,
    pub noise: Vec<Source>,
    pub snr_db: f64,
    pub seed: u64,
}

/// A rendered mixture together with its clean reference.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderedMixture {
    pub clean: Vec<f32>,
    pub mixture: Mixture,
}

impl MixtureSpec {
    pub fn render(&self, sample_rate: u32) -> Result<RenderedMixture> {
        let clean = self.clean.load(sample_rate)?;
        let track = build_noise_track(&self.noise, sample_rate)?;
        let mixture = mix_at_snr(&clean, &track, self.snr_db, self.seed)?;
        Ok(RenderedMixture { clean, mixture })
    }
}

/// One manifest line: `clean_path  noise_id  snr_db  seed  split`, tab
/// separated. `noise_id` is a comma-separated list of noise sources that
/// are concatenated into the noise track.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub clean_path: String,
    pub noise_id: String,
    pub snr_db: f64,
    pub seed: u64,
    pub split: String,
}

impl ManifestEntry {
    pub fn to_spec(&self, base: Option<&Path>) -> Result<MixtureSpec> {
        let noise = self
            .noise_id
            .split(',')
            .map(|s| Source::parse(s.trim(), base))
            .collect::<Result<Vec<_>>>()?;
        Ok(MixtureSpec {
            clean: Source::parse(&self.clean_path, base)?,
            noise,
            snr_db: self.snr_db,
            seed: self.seed,
        })
    }

    /// Identifier used for output files and report rows.
    pub fn id(&self, line: usize) -> String {
        format!("{}_{line:05}", self.split)
    }
}

pub const MANIFEST_HEADER: &str = "clean_path\tnoise_id\tsnr_db\tseed\tsplit";

/// Parses a manifest. Blank lines, `#` comments and a header line are skipped.
pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>> {
    let mut out = Vec::new();
    for (no, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') || line == MANIFEST_HEADER {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        let bad = |what: &str| Error::Format(format!("manifest line {}: {what}", no + 1));
        if f.len() != 5 {
            return Err(bad(&format!("expected 5 tab-separated fields, found {}", f.len())));
        }
        let snr_db: f64 = f[2].parse().map_err(|_| bad("bad snr_db"))?;
        if !snr_db.is_finite() {
            return Err(bad("snr_db is not finite"));
        }
        out.push(ManifestEntry {
            clean_path: f[0].to_string(),
            noise_id: f[1].to_string(),
            snr_db,
            seed: f[3].parse().map_err(|_| bad("bad seed"))?,
            split: f[4].to_string(),
        });
    }
    Ok(out)
}

pub fn format_manifest(entries: &[ManifestEntry]) -> String {
    let mut s = String::from(MANIFEST_HEADER);
    s.push('\n');
    for e in entries {
        s.push_str(&format!("{}\t{}\t{}\t{}\t{}\n", e.clean_path, e.noise_id, e.snr_db, e.seed, e.split));
    }
    s
}

/// Tail-padded waveforms with per-item lengths and a frame validity mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    waveforms: Vec<Vec<f32>>,
    lengths: Vec<usize>,
    valid_frames: Vec<usize>,
    frames: usize,
    config: StftConfig,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.waveforms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.waveforms.is_empty()
    }

    pub fn waveforms(&self) -> &[Vec<f32>] {
        &self.waveforms
    }

    pub fn lengths(&self) -> &[usize] {
        &self.lengths
    }

    /// Frames per item counted on the unpadded utterance.
    pub fn valid_frames(&self) -> &[usize] {
        &self.valid_frames
    }

    /// Frames of the padded batch.
    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn padded_len(&self) -> usize {
        self.waveforms.first().map_or(0, Vec::len)
    }

    pub fn config(&self) -> &StftConfig {
        &self.config
    }

    /// Validity per `(item, frame)`, indexed `item * frames + frame`.
    pub fn frame_mask(&self) -> Vec<bool> {
        let mut m = Vec::with_capacity(self.len() * self.frames);
        for &v in &self.valid_frames {
            m.extend((0..self.frames).map(|t| t < v));
        }
        m
    }
}

pub fn make_batch(utterances: &[&[f32]], config: &StftConfig) -> Result<Batch> {
    config.validate()?;
    if utterances.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let max_len = utterances.iter().map(|u| u.len()).max().unwrap_or(0);
    let frames = config.num_frames(max_len).ok_or_else(|| {
        Error::Length(format!("longest utterance has {max_len} samples, less than one window"))
    })?;
    let waveforms = utterances
        .iter()
        .map(|u| {
            let mut w = u.to_vec();
            w.resize(max_len, 0.0);
            w
        })
        .collect();
    Ok(Batch {
        waveforms,
        lengths: utterances.iter().map(|u| u.len()).collect(),
        valid_frames: utterances.iter().map(|u| config.num_frames(u.len()).unwrap_or(0)).collect(),
        frames,
        config: *config,
    })
}
