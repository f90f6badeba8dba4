//! `DTDS` dataset files.
//!
//! ```text
//! "DTDS" | u32 version = 1 | u8 mode (0 image, 1 video) | u32 count
//! per example:
//!   u32 extents (H, W for images; T, H, W for videos)
//!   raw RGB bytes
//!   u32 length + UTF-8 question, u32 length + UTF-8 answer
//! u32 CRC32 of everything before it
//! ```
//!
//! All integers are little-endian.

use std::path::Path;

use divtok_core::data::{Example, Visual, Vocab};
use divtok_core::model::Mode;

use crate::container::{read_file, to_u32, write_file, FormatError, Reader, Writer};

const MAGIC: &[u8; 4] = b"DTDS";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub mode: Mode,
    pub examples: Vec<Example>,
}

pub fn encode_dataset(mode: Mode, examples: &[Example]) -> Result<Vec<u8>, FormatError> {
    let mut w = Writer::new(MAGIC);
    w.u32(VERSION);
    w.u8(match mode {
        Mode::Image => 0,
        Mode::Video => 1,
    });
    w.u32(to_u32(examples.len(), "example count")?);
    for ex in examples {
        if ex.visual.is_video() != (mode == Mode::Video) {
            return Err(FormatError::Invalid("example does not match the dataset mode".into()));
        }
        for d in ex.visual.dims() {
            w.u32(to_u32(d, "extent")?);
        }
        w.bytes(ex.visual.pixels());
        for text in [&ex.question, &ex.answer] {
            w.u32(to_u32(text.len(), "string length")?);
            w.bytes(text.as_bytes());
        }
    }
    Ok(w.finish())
}

/// Decodes a dataset, re-deriving token ids with `vocab`.
pub fn decode_dataset(bytes: &[u8], vocab: &Vocab) -> Result<Dataset, FormatError> {
    let mut r = Reader::open(bytes, MAGIC)?;
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(FormatError::UnsupportedVersion {
            what: "dataset",
            version,
        });
    }
    let mode = match r.u8("mode")? {
        0 => Mode::Image,
        1 => Mode::Video,
        other => return Err(FormatError::Invalid(format!("unknown mode byte {other}"))),
    };
    let count = r.u32("count")?;
    let mut examples = Vec::new();
    for _ in 0..count {
        let rank = if mode == Mode::Video { 3 } else { 2 };
        let dims = (0..rank)
            .map(|_| r.u32("extent").map(|v| v as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let len = dims
            .iter()
            .try_fold(3usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| FormatError::Invalid("pixel count overflows".into()))?;
        let pixels = r.bytes(len, "pixels")?.to_vec();
        let visual = match dims.as_slice() {
            [h, w] => Visual::new_image(*h, *w, pixels),
            [t, h, w] => Visual::new_video(*t, *h, *w, pixels),
            _ => unreachable!("rank is 2 or 3"),
        }
        .map_err(|e| FormatError::Invalid(e.to_string()))?;
        let mut text = || -> Result<String, FormatError> {
            let n = r.u32("string length")? as usize;
            String::from_utf8(r.bytes(n, "string")?.to_vec()).map_err(|e| FormatError::Invalid(e.to_string()))
        };
        let question = text()?;
        let answer = text()?;
        examples.push(Example::new(visual, &question, &answer, vocab).map_err(|e| FormatError::Invalid(e.to_string()))?);
    }
    r.finish()?;
    Ok(Dataset { mode, examples })
}

pub fn write_dataset(path: &Path, mode: Mode, examples: &[Example]) -> Result<(), FormatError> {
    write_file(path, &encode_dataset(mode, examples)?)
}

pub fn read_dataset(path: &Path, vocab: &Vocab) -> Result<Dataset, FormatError> {
    decode_dataset(&read_file(path)?, vocab)
}

#[cfg(test)]
mod tests {
    use super::*;
    use divtok_core::data::{gen_image_example, gen_video_example, ImageScene, VideoScene};

    #[test]
    fn round_trips_both_modes() {
        let vocab = Vocab::grammar();
        let images: Vec<Example> = (0..5)
            .map(|s| gen_image_example(s, ImageScene { size: 32, grid: 2 }, &vocab).unwrap())
            .collect();
        let bytes = encode_dataset(Mode::Image, &images).unwrap();
        assert_eq!(decode_dataset(&bytes, &vocab).unwrap().examples, images);

        let videos: Vec<Example> = (0..3)
            .map(|s| gen_video_example(s, VideoScene { frames: 4, size: 16 }, &vocab).unwrap())
            .collect();
        let bytes = encode_dataset(Mode::Video, &videos).unwrap();
        let back = decode_dataset(&bytes, &vocab).unwrap();
        assert_eq!((back.mode, back.examples), (Mode::Video, videos));
        assert!(encode_dataset(Mode::Video, &images).is_err());
    }

    #[test]
    fn empty_dataset_is_valid() {
        let vocab = Vocab::grammar();
        let bytes = encode_dataset(Mode::Image, &[]).unwrap();
        assert_eq!(bytes.len(), 4 + 4 + 1 + 4 + 4);
        assert!(decode_dataset(&bytes, &vocab).unwrap().examples.is_empty());
    }
}
