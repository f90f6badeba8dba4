//! Attention-map export.
//!
//! Tokens are numbered across streams in stream order. Each map is drawn on
//! its stream's feature grid; video grids place their temporal slices side
//! by side, so a `(T', H', W')` grid becomes a `T'·W'` by `H'` picture.

use std::path::{Path, PathBuf};

use divtok_core::data::Example;
use divtok_core::model::{stream_input, Model};
use divtok_core::nn::ParameterStore;
use divtok_core::tokenizer::StreamSpec;
use divtok_core::Tensor;

use crate::container::{write_file, FormatError};
use crate::netpbm::{encode_pgm, encode_ppm, normalize_map};

#[derive(Debug, thiserror::Error)]
pub enum VisualizeError {
    #[error(transparent)]
    Model(#[from] divtok_core::Error),
    #[error(transparent)]
    Format(#[from] FormatError),
}

/// Lays a `(T', H', W')` grid of samples out as `H'` rows of `T'·W'`.
fn tile_slices(grid: (usize, usize, usize), values: &[u8]) -> Vec<u8> {
    let (gt, gh, gw) = grid;
    let mut out = Vec::with_capacity(values.len());
    for y in 0..gh {
        for t in 0..gt {
            out.extend_from_slice(&values[(t * gh + y) * gw..][..gw]);
        }
    }
    out
}

/// The stream's input with each pixel scaled by `weight / max weight` of the
/// feature cell covering it, frames side by side.
fn grounded(input: &Tensor, spec: &StreamSpec, map: &[f64]) -> (usize, usize, Vec<u8>) {
    let (_, gh, gw) = spec.grid();
    let peak = map.iter().copied().fold(0.0, f64::max);
    let scale = |w: f64| if peak > 0.0 { w / peak } else { 0.0 };
    let (frames, h, w) = (spec.frames, spec.height, spec.width);
    let px = input.data();
    let mut out = Vec::with_capacity(frames * h * w * 3);
    for y in 0..h {
        for f in 0..frames {
            for x in 0..w {
                let cell = ((f / spec.tubelet) * gh + y / spec.patch) * gw + x / spec.patch;
                let k = scale(map[cell]);
                let at = ((f * h + y) * w + x) * 3;
                out.extend(px[at..at + 3].iter().map(|&v| (255.0 * v * k).round().clamp(0.0, 255.0) as u8));
            }
        }
    }
    (frames * w, h, out)
}

/// Writes `layer{l}_token{i}.pgm` for every layer and token, plus
/// `grounded_token{i}.ppm` for the last layer, into `out`. Returns the
/// written paths in order.
pub fn export_attention_maps(
    model: &Model,
    params: &ParameterStore,
    example: &Example,
    out: &Path,
) -> Result<Vec<PathBuf>, VisualizeError> {
    model.check_store(params)?;
    let maps = model.attention_maps(params, &example.visual, &example.question_ids)?;
    let input = model.input_tensor(&example.visual)?;
    let specs = &model.config.streams;
    let mut written = Vec::new();
    let mut save = |name: String, text: String| -> Result<(), FormatError> {
        let path = out.join(name);
        write_file(&path, text.as_bytes())?;
        written.push(path);
        Ok(())
    };
    for (layer, streams) in maps.iter().enumerate() {
        let last = layer + 1 == maps.len();
        let mut token = 0;
        for (spec, stream_maps) in specs.iter().zip(streams) {
            let grid = spec.grid();
            let resampled = if last { Some(stream_input(&input, spec)?) } else { None };
            let positions = stream_maps.shape()[1];
            for map in stream_maps.data().chunks(positions) {
                let gray = tile_slices(grid, &normalize_map(map));
                save(format!("layer{layer}_token{token}.pgm"), encode_pgm(grid.0 * grid.2, grid.1, &gray)?)?;
                if let Some(resampled) = &resampled {
                    let (w, h, rgb) = grounded(resampled, spec, map);
                    save(format!("grounded_token{token}.ppm"), encode_ppm(w, h, &rgb)?)?;
                }
                token += 1;
            }
        }
    }
    Ok(written)
}
