//! Short-time Fourier analysis and synthesis plus polar conversions.
//!
//! Frames are anchored at sample 0 without centering, so frame `t` covers
//! samples `t*hop .. t*hop + win_len`. Transforms run in `f64`; spectra are
//! stored as `f32` planes in row-major `T x F` order.

pub mod wav;

use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

pub use wav::{read_wav, write_wav, WavEncoding};

/// Tolerance of the unit-norm check performed by [`polar_combine`].
pub const PHASE_TOLERANCE: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum WindowKind {
    #[default]
    Hamming,
    Hann,
    Rectangular,
}

impl WindowKind {
    /// Periodic window of length `len`.
    pub fn coefficients(self, len: usize) -> Vec<f64> {
        let n = len as f64;
        (0..len)
            .map(|i| {
                let ph = 2.0 * std::f64::consts::PI * i as f64 / n;
                match self {
                    WindowKind::Hamming => 0.54 - 0.46 * ph.cos(),
                    WindowKind::Hann => 0.5 - 0.5 * ph.cos(),
                    WindowKind::Rectangular => 1.0,
                }
            })
            .collect()
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "hamming" => Ok(WindowKind::Hamming),
            "hann" | "hanning" => Ok(WindowKind::Hann),
            "rect" | "rectangular" => Ok(WindowKind::Rectangular),
            other => Err(Error::Config(format!("unknown window kind '{other}'"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            WindowKind::Hamming => "hamming",
            WindowKind::Hann => "hann",
            WindowKind::Rectangular => "rectangular",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StftConfig {
    pub sample_rate: u32,
    pub win_len: usize,
    pub hop: usize,
    pub fft_size: usize,
    pub window: WindowKind,
}

impl Default for StftConfig {
    fn default() -> Self {
        StftConfig {
            sample_rate: 16000,
            win_len: 320,
            hop: 160,
            fft_size: 320,
            window: WindowKind::Hamming,
        }
    }
}

impl StftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hop == 0 || self.hop > self.win_len || self.win_len > self.fft_size {
            return Err(Error::Config(format!(
                "need 0 < hop <= win_len <= fft_size, got hop={} win_len={} fft_size={}",
                self.hop, self.win_len, self.fft_size
            )));
        }
        if self.sample_rate == 0 {
            return Err(Error::Config("sample rate must be positive".into()));
        }
        Ok(())
    }

    pub fn bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    /// Number of full frames in a signal of `len` samples, or `None` when the
    /// signal is shorter than one window.
    pub fn num_frames(&self, len: usize) -> Option<usize> {
        (len >= self.win_len).then(|| (len - self.win_len) / self.hop + 1)
    }

    /// Length of the signal synthesized from `frames` frames.
    pub fn synthesis_len(&self, frames: usize) -> usize {
        if frames == 0 {
            0
        } else {
            (frames - 1) * self.hop + self.win_len
        }
    }
}

fn check_plane(name: &str, plane: &[f32], frames: usize, bins: usize) -> Result<()> {
    if plane.len() != frames * bins {
        return Err(Error::Dimension(format!(
            "{name} plane has {} values, expected {frames}x{bins}",
            plane.len()
        )));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram {
    frames: usize,
    bins: usize,
    real: Vec<f32>,
    imag: Vec<f32>,
    config: StftConfig,
}

impl Spectrogram {
    pub fn new(frames: usize, real: Vec<f32>, imag: Vec<f32>, config: StftConfig) -> Result<Self> {
        let bins = config.bins();
        check_plane("real", &real, frames, bins)?;
        check_plane("imag", &imag, frames, bins)?;
        if !real.iter().chain(&imag).all(|v| v.is_finite()) {
            return Err(Error::Numeric("spectrogram contains non-finite values".into()));
        }
        Ok(Spectrogram { frames, bins, real, imag, config })
    }

    pub fn zeros(frames: usize, config: StftConfig) -> Self {
        let n = frames * config.bins();
        Spectrogram { frames, bins: config.bins(), real: vec![0.0; n], imag: vec![0.0; n], config }
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn real(&self) -> &[f32] {
        &self.real
    }

    pub fn imag(&self) -> &[f32] {
        &self.imag
    }

    pub fn config(&self) -> &StftConfig {
        &self.config
    }

    pub fn into_planes(self) -> (Vec<f32>, Vec<f32>) {
        (self.real, self.imag)
    }

    /// Keeps only the first `frames` frames.
    pub fn truncate(&mut self, frames: usize) {
        if frames < self.frames {
            self.frames = frames;
            self.real.truncate(frames * self.bins);
            self.imag.truncate(frames * self.bins);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Magnitude {
    frames: usize,
    bins: usize,
    values: Vec<f32>,
}

impl Magnitude {
    pub fn new(frames: usize, bins: usize, values: Vec<f32>) -> Result<Self> {
        check_plane("magnitude", &values, frames, bins)?;
        if let Some(v) = values.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
            return Err(Error::Invariant(format!("magnitude value {v} is not a finite non-negative number")));
        }
        Ok(Magnitude { frames, bins, values })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }
}

/// Unit-modulus phase as a pair of cosine and sine planes.
///
/// Construction only checks shapes. Values produced by [`mag_phase`] satisfy
/// the unit-norm property to within 1e-6, and [`polar_combine`] re-checks it
/// so that hand-built phases cannot slip through.
#[derive(Clone, Debug, PartialEq)]
pub struct UnitPhase {
    frames: usize,
    bins: usize,
    cos: Vec<f32>,
    sin: Vec<f32>,
}

impl UnitPhase {
    pub fn new(frames: usize, bins: usize, cos: Vec<f32>, sin: Vec<f32>) -> Result<Self> {
        check_plane("cos", &cos, frames, bins)?;
        check_plane("sin", &sin, frames, bins)?;
        Ok(UnitPhase { frames, bins, cos, sin })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn cos_plane(&self) -> &[f32] {
        &self.cos
    }

    pub fn sin_plane(&self) -> &[f32] {
        &self.sin
    }

    /// Largest deviation of `cos^2 + sin^2` from one.
    pub fn max_norm_error(&self) -> f64 {
        self.cos
            .iter()
            .zip(&self.sin)
            .map(|(&c, &s)| ((c as f64).powi(2) + (s as f64).powi(2) - 1.0).abs())
            .fold(0.0, f64::max)
    }

    pub fn check(&self, tol: f64) -> Result<()> {
        for (k, (&c, &s)) in self.cos.iter().zip(&self.sin).enumerate() {
            let e = ((c as f64).powi(2) + (s as f64).powi(2) - 1.0).abs();
            if !(e <= tol) {
                return Err(Error::Invariant(format!(
                    "phase at frame {} bin {} has squared norm {}",
                    k / self.bins,
                    k % self.bins,
                    1.0 + e
                )));
            }
        }
        Ok(())
    }
}

struct Transform {
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
}

impl Transform {
    fn new(cfg: &StftConfig, inverse: bool) -> Self {
        let mut planner = FftPlanner::new();
        let fft = if inverse {
            planner.plan_fft_inverse(cfg.fft_size)
        } else {
            planner.plan_fft_forward(cfg.fft_size)
        };
        Transform { window: cfg.window.coefficients(cfg.win_len), fft }
    }
}

pub fn stft(waveform: &[f32], cfg: &StftConfig) -> Result<Spectrogram> {
    cfg.validate()?;
    let frames = cfg.num_frames(waveform.len()).ok_or_else(|| {
        Error::Length(format!(
            "waveform has {} samples, shorter than one {}-sample window",
            waveform.len(),
            cfg.win_len
        ))
    })?;
    let tr = Transform::new(cfg, false);
    let bins = cfg.bins();
    let mut real = Vec::with_capacity(frames * bins);
    let mut imag = Vec::with_capacity(frames * bins);
    let mut buf = vec![Complex64::default(); cfg.fft_size];
    for t in 0..frames {
        buf.fill(Complex64::default());
        let seg = &waveform[t * cfg.hop..t * cfg.hop + cfg.win_len];
        for ((b, &x), &w) in buf.iter_mut().zip(seg).zip(&tr.window) {
            b.re = x as f64 * w;
        }
        tr.fft.process(&mut buf);
        for c in &buf[..bins] {
            real.push(c.re as f32);
            imag.push(c.im as f32);
        }
    }
    Spectrogram::new(frames, real, imag, *cfg)
}

pub fn istft(spec: &Spectrogram) -> Result<Vec<f32>> {
    let cfg = spec.config;
    cfg.validate()?;
    let (frames, bins) = (spec.frames, spec.bins);
    let len = cfg.synthesis_len(frames);
    let tr = Transform::new(&cfg, true);
    let mut out = vec![0.0f64; len];
    let mut norm = vec![0.0f64; len];
    let mut buf = vec![Complex64::default(); cfg.fft_size];
    let n = cfg.fft_size;
    let scale = 1.0 / n as f64;
    for t in 0..frames {
        for (f, b) in buf.iter_mut().enumerate() {
            // Rebuild the full spectrum from the one-sided half by Hermitian symmetry.
            let (k, conj) = if f < bins { (f, false) } else { (n - f, true) };
            let re = spec.real[t * bins + k] as f64;
            let im = spec.imag[t * bins + k] as f64;
            *b = Complex64::new(re, if conj { -im } else { im });
        }
        // DC and Nyquist bins of a real signal are real.
        buf[0].im = 0.0;
        if n % 2 == 0 {
            buf[n / 2].im = 0.0;
        }
        tr.fft.process(&mut buf);
        let off = t * cfg.hop;
        for (i, &w) in tr.window.iter().enumerate() {
            out[off + i] += buf[i].re * scale * w;
            norm[off + i] += w * w;
        }
    }
    let edge = cfg.win_len - cfg.hop;
    for (i, (o, &d)) in out.iter_mut().zip(&norm).enumerate() {
        if d > 1e-12 {
            *o /= d;
        } else if i < edge || i >= len - edge {
            *o = 0.0;
        } else {
            return Err(Error::Config(format!(
                "window/hop pair leaves sample {i} with a zero overlap-add normalizer"
            )));
        }
    }
    Ok(out.into_iter().map(|v| v as f32).collect())
}

pub fn mag_phase(spec: &Spectrogram) -> (Magnitude, UnitPhase) {
    let n = spec.real.len();
    let (mut mag, mut cos, mut sin) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    for (&r, &i) in spec.real.iter().zip(&spec.imag) {
        let (r, i) = (r as f64, i as f64);
        let m = r.hypot(i);
        mag.push(m as f32);
        if m > 0.0 {
            cos.push((r / m) as f32);
            sin.push((i / m) as f32);
        } else {
            cos.push(1.0);
            sin.push(0.0);
        }
    }
    (
        Magnitude { frames: spec.frames, bins: spec.bins, values: mag },
        UnitPhase { frames: spec.frames, bins: spec.bins, cos, sin },
    )
}

pub fn polar_combine(mag: &Magnitude, phase: &UnitPhase, config: &StftConfig) -> Result<Spectrogram> {
    if (mag.frames, mag.bins) != (phase.frames, phase.bins) || mag.bins != config.bins() {
        return Err(Error::Dimension(format!(
            "magnitude {}x{} and phase {}x{} do not match a {}-bin config",
            mag.frames,
            mag.bins,
            phase.frames,
            phase.bins,
            config.bins()
        )));
    }
    phase.check(PHASE_TOLERANCE)?;
    let real = mag.values.iter().zip(&phase.cos).map(|(m, c)| m * c).collect();
    let imag = mag.values.iter().zip(&phase.sin).map(|(m, s)| m * s).collect();
    Spectrogram::new(mag.frames, real, imag, *config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(len: usize, seed: u64) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..len).map(|_| rng.gen_range(-1.0f32..1.0)).collect()
    }

    #[test]
    fn frame_count_matches_direct_framing_loop() {
        let cfg = StftConfig::default();
        let x = vec![0.0f32; 16000];
        let s = stft(&x, &cfg).unwrap();
        let mut loop_frames = 0;
        let mut start = 0;
        while start + cfg.win_len <= x.len() {
            loop_frames += 1;
            start += cfg.hop;
        }
        assert_eq!((s.frames(), s.bins()), (loop_frames, 161));
        assert_eq!(loop_frames, 99);
        assert!(s.real().iter().chain(s.imag()).all(|&v| v == 0.0));
    }

    #[test]
    fn short_input_is_a_length_error() {
        let cfg = StftConfig::default();
        assert!(matches!(stft(&[0.0; 319], &cfg), Err(Error::Length(_))));
    }

    #[test]
    fn cosine_peak_matches_naive_dft() {
        let cfg = StftConfig::default();
        let x: Vec<f32> = (0..4000)
            .map(|n| (2.0 * std::f64::consts::PI * 1000.0 * n as f64 / 16000.0).cos() as f32)
            .collect();
        let s = stft(&x, &cfg).unwrap();
        let w = cfg.window.coefficients(cfg.win_len);
        // naive DFT of frame 3
        let frame = &x[3 * cfg.hop..3 * cfg.hop + cfg.win_len];
        let naive: Vec<(f64, f64)> = (0..cfg.bins())
            .map(|k| {
                frame.iter().zip(&w).enumerate().fold((0.0, 0.0), |(re, im), (n, (&v, &wn))| {
                    let a = -2.0 * std::f64::consts::PI * (k * n) as f64 / cfg.fft_size as f64;
                    (re + v as f64 * wn * a.cos(), im + v as f64 * wn * a.sin())
                })
            })
            .collect();
        let peak = |mags: Vec<f64>| {
            mags.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0
        };
        assert_eq!(peak(naive.iter().map(|(r, i)| r.hypot(*i)).collect()), 20);
        for t in 0..s.frames() {
            let m: Vec<f64> = (0..161)
                .map(|f| (s.real()[t * 161 + f] as f64).hypot(s.imag()[t * 161 + f] as f64))
                .collect();
            assert_eq!(peak(m), 20);
        }
        for (k, (r, i)) in naive.iter().enumerate() {
            assert!((s.real()[3 * 161 + k] as f64 - r).abs() < 1e-4);
            assert!((s.imag()[3 * 161 + k] as f64 - i).abs() < 1e-4);
        }
    }

    #[test]
    fn round_trip_reconstructs_signal() {
        let cfg = StftConfig::default();
        for seed in 0..4 {
            let x = noise(3200 + 160 * seed as usize, seed);
            let y = istft(&stft(&x, &cfg).unwrap()).unwrap();
            assert_eq!(y.len(), x.len());
            let peak = x.iter().fold(0.0f32, |m, v| m.max(v.abs()));
            let err = x.iter().zip(&y).fold(0.0f32, |m, (a, b)| m.max((a - b).abs()));
            assert!(err < 1e-6 * peak, "seed {seed}: err {err}");
        }
    }

    #[test]
    fn istft_output_length_and_zero_input() {
        let cfg = StftConfig::default();
        let y = istft(&Spectrogram::zeros(7, cfg)).unwrap();
        assert_eq!(y.len(), 6 * 160 + 320);
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn istft_is_linear() {
        let cfg = StftConfig::default();
        let a = stft(&noise(1600, 1), &cfg).unwrap();
        let b = stft(&noise(1600, 2), &cfg).unwrap();
        let sum = Spectrogram::new(
            a.frames(),
            a.real().iter().zip(b.real()).map(|(x, y)| x + y).collect(),
            a.imag().iter().zip(b.imag()).map(|(x, y)| x + y).collect(),
            cfg,
        )
        .unwrap();
        let (ya, yb, ys) = (istft(&a).unwrap(), istft(&b).unwrap(), istft(&sum).unwrap());
        for k in 0..ys.len() {
            // the planes are f32, so the bound is relative to f32 resolution
            assert!(((ya[k] + yb[k]) as f64 - ys[k] as f64).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_interior_normalizer_is_a_config_error() {
        let cfg = StftConfig { win_len: 160, hop: 160, window: WindowKind::Hann, ..Default::default() };
        // periodic Hann is zero at its first sample, and hop == win_len gives
        // no overlap to cover it
        let spec = Spectrogram::zeros(4, cfg);
        assert!(matches!(istft(&spec), Err(Error::Config(_))));
    }

    #[test]
    fn hann_edges_are_clamped_not_rejected() {
        let cfg = StftConfig { window: WindowKind::Hann, ..Default::default() };
        let x = noise(2000, 9);
        let y = istft(&stft(&x, &cfg).unwrap()).unwrap();
        assert_eq!(y[0], 0.0);
        // partial-overlap edges divide by tiny squared-window sums
        for k in 160..y.len() - 160 {
            assert!((x[k] - y[k]).abs() < 1e-5);
        }
    }

    #[test]
    fn polar_examples() {
        let cfg = StftConfig { fft_size: 2, win_len: 2, hop: 1, ..Default::default() };
        let s = Spectrogram::new(1, vec![3.0, 0.0], vec![4.0, 0.0], cfg).unwrap();
        let (m, p) = mag_phase(&s);
        assert_eq!(m.values(), &[5.0, 0.0]);
        assert_eq!(p.cos_plane(), &[0.6, 1.0]);
        assert_eq!(p.sin_plane(), &[0.8, 0.0]);
        let back = polar_combine(&m, &p, &cfg).unwrap();
        assert!((back.real()[0] - 3.0).abs() < 1e-6 && (back.imag()[0] - 4.0).abs() < 1e-6);
        assert_eq!((back.real()[1], back.imag()[1]), (0.0, 0.0));

        let bad = UnitPhase::new(1, 2, vec![1.0, 1.0], vec![0.0, 0.5f32.sqrt()]).unwrap();
        assert!(matches!(polar_combine(&m, &bad, &cfg), Err(Error::Invariant(_))));
    }

    #[test]
    fn negative_magnitude_is_rejected() {
        assert!(matches!(Magnitude::new(1, 2, vec![1.0, -0.5]), Err(Error::Invariant(_))));
    }

    #[test]
    fn parseval_ratio_is_constant_for_stationary_input() {
        // A sum of sinusoids at exact bin frequencies is stationary across
        // frames; with fft_size == win_len the one-sided spectral energy and
        // the windowed-frame energy are tied by Parseval's identity.
        let cfg = StftConfig::default();
        let x: Vec<f32> = (0..8000)
            .map(|n| {
                let t = n as f64 / 16000.0;
                (0.3 * (2.0 * std::f64::consts::PI * 500.0 * t).sin()
                    + 0.2 * (2.0 * std::f64::consts::PI * 2150.0 * t).cos()) as f32
            })
            .collect();
        let s = stft(&x, &cfg).unwrap();
        let w = cfg.window.coefficients(cfg.win_len);
        let n = cfg.fft_size as f64;
        let ratios: Vec<f64> = (0..s.frames())
            .map(|t| {
                let frame = &x[t * cfg.hop..t * cfg.hop + cfg.win_len];
                let e_time: f64 = frame.iter().zip(&w).map(|(&v, &wn)| (v as f64 * wn).powi(2)).sum();
                let e_freq: f64 = (0..s.bins())
                    .map(|f| {
                        let p = (s.real()[t * 161 + f] as f64).powi(2) + (s.imag()[t * 161 + f] as f64).powi(2);
                        if f == 0 || f == s.bins() - 1 { p } else { 2.0 * p }
                    })
                    .sum::<f64>()
                    / n;
                e_freq / e_time
            })
            .collect();
        for r in &ratios {
            assert!((r - ratios[0]).abs() < 1e-6 * ratios[0], "{r} vs {}", ratios[0]);
        }
    }
}
