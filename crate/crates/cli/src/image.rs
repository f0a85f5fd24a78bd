use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use anyhow::Context;
use twinspec_core::metrics::PhaseDiffMap;

/// Gray level of a value in `[-1, 1]`: -1 is black, +1 is white.
pub fn gray(v: f32) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

/// One pixel per (frame, bin), frames left to right and frequency rising
/// from the bottom row.
pub fn phase_map_pixels(map: &PhaseDiffMap) -> Vec<u8> {
    let (frames, bins) = (map.frames(), map.bins());
    let mut pixels = Vec::with_capacity(frames * bins);
    for row in 0..bins {
        let bin = bins - 1 - row;
        pixels.extend((0..frames).map(|t| gray(map.get(t, bin))));
    }
    pixels
}

pub fn write_phase_png(map: &PhaseDiffMap, path: &Path) -> anyhow::Result<()> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), map.frames() as u32, map.bins() as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let mut w = enc.write_header()?;
    w.write_image_data(&phase_map_pixels(map))?;
    w.finish()?;
    Ok(())
}
