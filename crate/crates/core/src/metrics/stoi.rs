//! Short-time objective intelligibility.
//!
//! Follows the reference algorithm: resample to 10 kHz, drop frames more
//! than 40 dB below the loudest clean frame, group a 512-point spectrum into
//! 15 third-octave bands, and average clipped, normalized envelope
//! correlations over 30-frame segments.

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{Error, Result};

const EPS: f64 = f64::EPSILON;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StoiConfig {
    pub sample_rate: u32,
    pub frame_len: usize,
    pub fft_size: usize,
    pub num_bands: usize,
    pub min_freq: f64,
    pub segment_len: usize,
    pub beta_db: f64,
    pub dyn_range_db: f64,
}

impl Default for StoiConfig {
    fn default() -> Self {
        StoiConfig {
            sample_rate: 10000,
            frame_len: 256,
            fft_size: 512,
            num_bands: 15,
            min_freq: 150.0,
            segment_len: 30,
            beta_db: -15.0,
            dyn_range_db: 40.0,
        }
    }
}

/// Modified Bessel function of the first kind, order zero.
fn bessel_i0(x: f64) -> f64 {
    let (mut sum, mut term, mut k) = (1.0f64, 1.0f64, 1.0f64);
    while term > 1e-17 * sum {
        term *= (x / (2.0 * k)).powi(2);
        sum += term;
        k += 1.0;
    }
    sum
}

/// Polyphase resampler by `up/down` with a Kaiser (beta 5) windowed-sinc
/// lowpass of `20*max(up,down)+1` taps, cut off at the lower Nyquist rate
/// and centered so that the output is not delayed.
fn resample_poly(x: &[f32], up: usize, down: usize) -> Vec<f64> {
    let max_rate = up.max(down);
    let half = 10 * max_rate;
    let taps = 2 * half + 1;
    let cutoff = 1.0 / max_rate as f64;
    let beta = 5.0;
    let i0b = bessel_i0(beta);
    let mut h: Vec<f64> = (0..taps)
        .map(|n| {
            let m = n as f64 - half as f64;
            let arg = std::f64::consts::PI * cutoff * m;
            let sinc = if m == 0.0 { 1.0 } else { arg.sin() / arg };
            let r = 2.0 * n as f64 / (taps - 1) as f64 - 1.0;
            cutoff * sinc * bessel_i0(beta * (1.0 - r * r).max(0.0).sqrt()) / i0b
        })
        .collect();
    let s: f64 = h.iter().sum();
    h.iter_mut().for_each(|v| *v *= up as f64 / s);
    let n_out = (x.len() * up).div_ceil(down);
    (0..n_out)
        .map(|m| {
            // y[m] = sum_n x[n] h[m*down - n*up + half]
            let c = (m * down + half) as isize;
            let n_hi = (c / up as isize).min(x.len() as isize - 1);
            let n_lo = ((c - (taps as isize - 1)) as f64 / up as f64).ceil().max(0.0) as isize;
            (n_lo..=n_hi)
                .map(|n| x[n as usize] as f64 * h[(c - n * up as isize) as usize])
                .sum()
        })
        .collect()
}

/// Converts a 16 kHz signal to the 10 kHz rate used internally.
pub fn resample_16k_to_10k(x: &[f32]) -> Vec<f64> {
    resample_poly(x, 5, 8)
}

/// Symmetric Hann window of `len` points without its zero end points.
fn hanning_open(len: usize) -> Vec<f64> {
    (1..=len)
        .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / (len + 1) as f64).cos())
        .collect()
}

fn frame_starts(len: usize, frame: usize, hop: usize) -> impl Iterator<Item = usize> {
    // mirrors range(0, len - frame, hop): the last full frame is excluded
    (0..len.saturating_sub(frame)).step_by(hop)
}

fn remove_silent_frames(x: &[f64], y: &[f64], cfg: &StoiConfig) -> (Vec<f64>, Vec<f64>) {
    let (n, hop) = (cfg.frame_len, cfg.frame_len / 2);
    let w = hanning_open(n);
    let starts: Vec<usize> = frame_starts(x.len(), n, hop).collect();
    let energy = |s: usize| {
        let e: f64 = (0..n).map(|i| (w[i] * x[s + i]).powi(2)).sum();
        20.0 * (e.sqrt() + EPS).log10()
    };
    let energies: Vec<f64> = starts.iter().map(|&s| energy(s)).collect();
    let peak = energies.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let kept: Vec<usize> = starts
        .iter()
        .zip(&energies)
        .filter(|(_, &e)| peak - cfg.dyn_range_db - e < 0.0)
        .map(|(&s, _)| s)
        .collect();
    if kept.is_empty() {
        return (Vec::new(), Vec::new());
    }
    let out_len = (kept.len() - 1) * hop + n;
    let (mut xs, mut ys) = (vec![0.0; out_len], vec![0.0; out_len]);
    for (k, &s) in kept.iter().enumerate() {
        for i in 0..n {
            xs[k * hop + i] += w[i] * x[s + i];
            ys[k * hop + i] += w[i] * y[s + i];
        }
    }
    (xs, ys)
}

/// Band energies `[band][frame]` of the third-octave grouped spectrum.
fn band_envelopes(x: &[f64], cfg: &StoiConfig, bands: &[(usize, usize)]) -> Vec<Vec<f64>> {
    let (n, hop) = (cfg.frame_len, cfg.frame_len / 2);
    let w = hanning_open(n);
    let fft = FftPlanner::new().plan_fft_forward(cfg.fft_size);
    let mut buf = vec![Complex64::default(); cfg.fft_size];
    let mut out = vec![Vec::new(); bands.len()];
    for s in frame_starts(x.len(), n, hop) {
        buf.fill(Complex64::default());
        for i in 0..n {
            buf[i].re = w[i] * x[s + i];
        }
        fft.process(&mut buf);
        for (b, &(lo, hi)) in bands.iter().enumerate() {
            out[b].push(buf[lo..hi].iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt());
        }
    }
    out
}

/// Bin ranges `[lo, hi)` of the third-octave bands, snapped to the nearest
/// FFT bins.
fn third_octave_bands(cfg: &StoiConfig) -> Vec<(usize, usize)> {
    let bins = cfg.fft_size / 2 + 1;
    let freqs: Vec<f64> = (0..bins).map(|k| k as f64 * cfg.sample_rate as f64 / cfg.fft_size as f64).collect();
    let nearest = |f: f64| {
        let mut best = 0;
        for (k, &fk) in freqs.iter().enumerate() {
            if (fk - f).powi(2) < (freqs[best] - f).powi(2) {
                best = k;
            }
        }
        best
    };
    (0..cfg.num_bands)
        .map(|k| {
            let k = k as f64;
            let lo = cfg.min_freq * 2f64.powf((2.0 * k - 1.0) / 6.0);
            let hi = cfg.min_freq * 2f64.powf((2.0 * k + 1.0) / 6.0);
            (nearest(lo), nearest(hi))
        })
        .collect()
}

fn normalize(v: &mut [f64]) {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    v.iter_mut().for_each(|x| *x -= mean);
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt() + EPS;
    v.iter_mut().for_each(|x| *x /= norm);
}

/// STOI of `processed` against `clean`, both at 16 kHz.
pub fn stoi(clean: &[f32], processed: &[f32]) -> Result<f64> {
    stoi_with(clean, processed, &StoiConfig::default())
}

pub fn stoi_with(clean: &[f32], processed: &[f32], cfg: &StoiConfig) -> Result<f64> {
    if clean.len() != processed.len() {
        return Err(Error::Dimension(format!(
            "stoi: lengths {} and {} differ",
            clean.len(),
            processed.len()
        )));
    }
    if clean.iter().all(|&v| v == 0.0) {
        return Err(Error::UndefinedMetric("stoi: clean signal is silent".into()));
    }
    let x = resample_16k_to_10k(clean);
    let y = resample_16k_to_10k(processed);
    let (x, y) = remove_silent_frames(&x, &y, cfg);
    let bands = third_octave_bands(cfg);
    let xb = band_envelopes(&x, cfg, &bands);
    let yb = band_envelopes(&y, cfg, &bands);
    let frames = xb.first().map_or(0, Vec::len);
    if frames < cfg.segment_len {
        return Err(Error::UndefinedMetric(format!(
            "stoi: {frames} non-silent frames, at least {} needed",
            cfg.segment_len
        )));
    }
    let clip = 10f64.powf(-cfg.beta_db / 20.0);
    let n = cfg.segment_len;
    let segments = frames - n + 1;
    let mut total = 0.0;
    for m in n..=frames {
        for (xband, yband) in xb.iter().zip(&yb) {
            let mut xs = xband[m - n..m].to_vec();
            let ys = &yband[m - n..m];
            let xn = xs.iter().map(|v| v * v).sum::<f64>().sqrt();
            let yn = ys.iter().map(|v| v * v).sum::<f64>().sqrt();
            let scale = xn / (yn + EPS);
            let mut yp: Vec<f64> = ys
                .iter()
                .zip(&xs)
                .map(|(&yv, &xv)| (yv * scale).min(xv * (1.0 + clip)))
                .collect();
            normalize(&mut yp);
            normalize(&mut xs);
            total += yp.iter().zip(&xs).map(|(a, b)| a * b).sum::<f64>();
        }
    }
    Ok(total / (segments * cfg.num_bands) as f64)
}
