//! Objective measures: STOI, scale-invariant SDR, plain SNR and the
//! phase-difference map.

mod phase;
mod stoi;

use std::io::Write;

use crate::error::{Error, Result};

pub use phase::{phase_diff_map, PhaseDiffMap};
pub use stoi::{resample_16k_to_10k, stoi, StoiConfig};

/// Bound applied to [`si_sdr`]; exact scaled copies would otherwise be infinite.
pub const SI_SDR_CAP_DB: f64 = 60.0;

fn same_len(a: &[f32], b: &[f32], what: &str) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!("{what}: lengths {} and {} differ", a.len(), b.len())));
    }
    Ok(())
}

/// Scale-invariant signal-to-distortion ratio of `est` against `reference`,
/// clamped to `±SI_SDR_CAP_DB`.
pub fn si_sdr(reference: &[f32], est: &[f32]) -> Result<f64> {
    same_len(reference, est, "si_sdr")?;
    let rr: f64 = reference.iter().map(|&r| (r as f64).powi(2)).sum();
    if !(rr > 0.0) {
        return Err(Error::UndefinedMetric("si_sdr reference is all zeros".into()));
    }
    let re: f64 = reference.iter().zip(est).map(|(&r, &e)| r as f64 * e as f64).sum();
    let alpha = re / rr;
    let (mut target, mut resid) = (0.0f64, 0.0f64);
    for (&r, &e) in reference.iter().zip(est) {
        let t = alpha * r as f64;
        target += t * t;
        resid += (e as f64 - t).powi(2);
    }
    let db = if resid == 0.0 {
        if target > 0.0 { f64::INFINITY } else { f64::NEG_INFINITY }
    } else if target == 0.0 {
        f64::NEG_INFINITY
    } else {
        10.0 * (target / resid).log10()
    };
    Ok(db.clamp(-SI_SDR_CAP_DB, SI_SDR_CAP_DB))
}

/// `10 log10(P_signal / P_noise)` with mean-square powers.
pub fn snr_db(signal: &[f32], noise: &[f32]) -> Result<f64> {
    same_len(signal, noise, "snr_db")?;
    let pn = crate::data::power(noise);
    if !(pn > 0.0) {
        return Err(Error::UndefinedMetric("noise is all zeros".into()));
    }
    Ok(10.0 * (crate::data::power(signal) / pn).log10())
}

/// One row of an evaluation report.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub utterance_id: String,
    pub snr_db: f64,
    pub stoi_noisy: f64,
    pub stoi_enhanced: f64,
    pub sisdr_noisy: f64,
    pub sisdr_enhanced: f64,
}

pub const REPORT_HEADER: &str = "utterance_id,snr_db,stoi_noisy,stoi_enhanced,sisdr_noisy,sisdr_enhanced";

pub fn write_report(w: &mut impl Write, rows: &[EvalRow]) -> Result<()> {
    writeln!(w, "{REPORT_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{:.6},{:.6},{:.4},{:.4}",
            r.utterance_id, r.snr_db, r.stoi_noisy, r.stoi_enhanced, r.sisdr_noisy, r.sisdr_enhanced
        )?;
    }
    Ok(())
}
