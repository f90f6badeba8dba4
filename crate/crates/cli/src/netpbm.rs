//! ASCII NetPBM writers (P2 grayscale, P3 color, maxval 255).

use std::fmt::Write as _;

use crate::container::FormatError;

/// Min-max scales `values` to `0..=255`, rounding to nearest. A map whose
/// entries are all equal becomes all zeros.
pub fn normalize_map(values: &[f64]) -> Vec<u8> {
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let range = hi - lo;
    values
        .iter()
        .map(|&v| {
            if range > 0.0 {
                (255.0 * (v - lo) / range).round() as u8
            } else {
                0
            }
        })
        .collect()
}

fn check_len(width: usize, height: usize, channels: usize, len: usize) -> Result<(), FormatError> {
    if width * height * channels != len {
        return Err(FormatError::Invalid(format!(
            "{width}x{height} image with {channels} channels needs {} samples, got {len}",
            width * height * channels
        )));
    }
    Ok(())
}

fn encode(magic: &str, width: usize, height: usize, samples: &[u8], per_row: usize) -> String {
    let mut out = format!("{magic}\n{width} {height}\n255\n");
    for row in samples.chunks(per_row.max(1)) {
        let mut sep = "";
        for v in row {
            let _ = write!(out, "{sep}{v}");
            sep = " ";
        }
        out.push('\n');
    }
    out
}

/// Row-major grayscale samples as a P2 file.
pub fn encode_pgm(width: usize, height: usize, gray: &[u8]) -> Result<String, FormatError> {
    check_len(width, height, 1, gray.len())?;
    Ok(encode("P2", width, height, gray, width))
}

/// Row-major interleaved RGB samples as a P3 file.
pub fn encode_ppm(width: usize, height: usize, rgb: &[u8]) -> Result<String, FormatError> {
    check_len(width, height, 3, rgb.len())?;
    Ok(encode("P3", width, height, rgb, width * 3))
}
