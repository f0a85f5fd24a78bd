use std::io::Write;

use crate::dsp::UnitPhase;
use crate::error::{Error, Result};

/// `cos(P_a - P_b)` per time-frequency bin, row-major `[frames, bins]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PhaseDiffMap {
    frames: usize,
    bins: usize,
    values: Vec<f32>,
}

impl PhaseDiffMap {
    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn get(&self, frame: usize, bin: usize) -> f32 {
        self.values[frame * self.bins + bin]
    }

    /// One line per frame, bins separated by commas.
    pub fn write_csv(&self, w: &mut impl Write) -> Result<()> {
        for row in self.values.chunks(self.bins) {
            let line: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
            writeln!(w, "{}", line.join(","))?;
        }
        Ok(())
    }
}

/// Cosine of the phase difference, computed as `cos_a cos_b + sin_a sin_b`
/// from the unit-phase planes. Rounding can push the product of two unit
/// vectors a few ulps past one, so the result is clamped to `[-1, 1]`.
pub fn phase_diff_map(a: &UnitPhase, b: &UnitPhase) -> Result<PhaseDiffMap> {
    if (a.frames(), a.bins()) != (b.frames(), b.bins()) {
        return Err(Error::Dimension(format!(
            "phase maps {}x{} and {}x{} differ",
            a.frames(),
            a.bins(),
            b.frames(),
            b.bins()
        )));
    }
    let values = a
        .cos_plane()
        .iter()
        .zip(a.sin_plane())
        .zip(b.cos_plane().iter().zip(b.sin_plane()))
        .map(|((&ca, &sa), (&cb, &sb))| {
            (ca as f64 * cb as f64 + sa as f64 * sb as f64).clamp(-1.0, 1.0) as f32
        })
        .collect();
    Ok(PhaseDiffMap { frames: a.frames(), bins: a.bins(), values })
}
