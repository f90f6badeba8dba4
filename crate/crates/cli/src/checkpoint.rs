//! `DTOK` parameter checkpoints and `DOPT` optimizer sidecars.
//!
//! ```text
//! magic | u32 version = 1 | u32 entry count
//! per entry, in store order:
//!   u16 name length | UTF-8 name | u8 rank | u32 extents | f32 values
//! u32 CRC32 of everything before it
//! ```
//!
//! A `DOPT` file uses the same layout with entries `m/<name>` and
//! `v/<name>` for the Adam moments of each parameter, then `state/step` and
//! `state/rng`. The two counters are 64-bit integers stored as four 16-bit
//! limbs (least significant first), each limb an exactly representable f32.

use std::path::Path;

use divtok_core::model::ModelConfig;
use divtok_core::nn::ParameterStore;
use divtok_core::rng::Rng;
use divtok_core::train::{AdamState, TrainConfig, TrainingState};
use divtok_core::Tensor;

use crate::container::{read_file, to_u32, write_file, FormatError, Reader, Writer};

const CHECKPOINT_MAGIC: &[u8; 4] = b"DTOK";
const OPTIMIZER_MAGIC: &[u8; 4] = b"DOPT";
const VERSION: u32 = 1;

fn encode_entries<'a>(magic: &[u8; 4], entries: impl ExactSizeIterator<Item = (String, &'a Tensor)>) -> Result<Vec<u8>, FormatError> {
    let mut w = Writer::new(magic);
    w.u32(VERSION);
    w.u32(to_u32(entries.len(), "entry count")?);
    for (name, t) in entries {
        let len = u16::try_from(name.len()).map_err(|_| FormatError::Invalid(format!("name {name:?} too long")))?;
        w.u16(len);
        w.bytes(name.as_bytes());
        let rank = u8::try_from(t.rank()).map_err(|_| FormatError::Invalid(format!("rank of {name} too large")))?;
        w.u8(rank);
        for &d in t.shape() {
            w.u32(to_u32(d, "extent")?);
        }
        for &v in t.data() {
            w.f32(v as f32);
        }
    }
    Ok(w.finish())
}

fn decode_entries(bytes: &[u8], magic: &[u8; 4]) -> Result<Vec<(String, Tensor)>, FormatError> {
    let mut r = Reader::open(bytes, magic)?;
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(FormatError::UnsupportedVersion {
            what: "checkpoint",
            version,
        });
    }
    let count = r.u32("entry count")?;
    let mut out = Vec::new();
    for _ in 0..count {
        let len = r.u16("name length")? as usize;
        let name = String::from_utf8(r.bytes(len, "name")?.to_vec()).map_err(|e| FormatError::Invalid(e.to_string()))?;
        let rank = r.u8("rank")? as usize;
        let shape = (0..rank)
            .map(|_| r.u32("extent").map(|v| v as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| FormatError::Invalid(format!("{name}: element count overflows")))?;
        let data = (0..n)
            .map(|_| r.f32("values").map(f64::from))
            .collect::<Result<Vec<_>, _>>()?;
        let t = Tensor::new(&shape, data).map_err(|e| FormatError::Invalid(format!("{name}: {e}")))?;
        out.push((name, t));
    }
    r.finish()?;
    Ok(out)
}

pub fn encode_checkpoint(store: &ParameterStore) -> Result<Vec<u8>, FormatError> {
    let entries: Vec<(String, &Tensor)> = store.iter().map(|(n, t)| (n.to_string(), t)).collect();
    encode_entries(CHECKPOINT_MAGIC, entries.into_iter())
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ParameterStore, FormatError> {
    let mut store = ParameterStore::new();
    for (name, t) in decode_entries(bytes, CHECKPOINT_MAGIC)? {
        store.add(&name, t).map_err(|e| FormatError::Invalid(e.to_string()))?;
    }
    Ok(store)
}

pub fn save_checkpoint(path: &Path, store: &ParameterStore) -> Result<(), FormatError> {
    write_file(path, &encode_checkpoint(store)?)
}

pub fn load_checkpoint(path: &Path) -> Result<ParameterStore, FormatError> {
    decode_checkpoint(&read_file(path)?)
}

fn counter_tensor(v: u64) -> Tensor {
    Tensor::from_fn(&[4], |i| ((v >> (16 * i)) & 0xFFFF) as f64)
}

fn counter_value(t: &Tensor) -> Result<u64, FormatError> {
    if t.shape() != [4] {
        return Err(FormatError::Invalid("counter must have four limbs".into()));
    }
    t.data().iter().enumerate().try_fold(0u64, |acc, (i, &limb)| {
        if limb.fract() != 0.0 || !(0.0..65536.0).contains(&limb) {
            return Err(FormatError::Invalid(format!("bad counter limb {limb}")));
        }
        Ok(acc | ((limb as u64) << (16 * i)))
    })
}

pub fn encode_optimizer(state: &TrainingState) -> Result<Vec<u8>, FormatError> {
    let names: Vec<&str> = state.params.iter().map(|(n, _)| n).collect();
    let step = counter_tensor(state.step);
    let rng = counter_tensor(state.rng.state());
    let entries: Vec<(String, &Tensor)> = names
        .iter()
        .zip(&state.adam.m)
        .map(|(n, t)| (format!("m/{n}"), t))
        .chain(names.iter().zip(&state.adam.v).map(|(n, t)| (format!("v/{n}"), t)))
        .chain([("state/step".to_string(), &step), ("state/rng".to_string(), &rng)])
        .collect();
    encode_entries(OPTIMIZER_MAGIC, entries.into_iter())
}

/// Rebuilds a training state from a checkpoint and its sidecar.
pub fn decode_training_state(
    checkpoint: &[u8],
    optimizer: &[u8],
    model: ModelConfig,
    train: TrainConfig,
) -> Result<TrainingState, FormatError> {
    let params = decode_checkpoint(checkpoint)?;
    let mut entries = decode_entries(optimizer, OPTIMIZER_MAGIC)?.into_iter();
    let mut expect = |name: String, shape: &[usize]| -> Result<Tensor, FormatError> {
        match entries.next() {
            Some((n, t)) if n == name && t.shape() == shape => Ok(t),
            Some((n, _)) => Err(FormatError::Invalid(format!("expected {name}, found {n}"))),
            None => Err(FormatError::Truncated("optimizer entries")),
        }
    };
    let m = params
        .iter()
        .map(|(n, t)| expect(format!("m/{n}"), t.shape()))
        .collect::<Result<Vec<_>, _>>()?;
    let v = params
        .iter()
        .map(|(n, t)| expect(format!("v/{n}"), t.shape()))
        .collect::<Result<Vec<_>, _>>()?;
    let step = counter_value(&expect("state/step".into(), &[4])?)?;
    let rng = counter_value(&expect("state/rng".into(), &[4])?)?;
    if entries.next().is_some() {
        return Err(FormatError::Invalid("unexpected optimizer entries".into()));
    }
    Ok(TrainingState {
        step,
        adam: AdamState { step, m, v },
        params,
        rng: Rng::new(rng),
        model,
        train,
    })
}

pub fn save_optimizer(path: &Path, state: &TrainingState) -> Result<(), FormatError> {
    write_file(path, &encode_optimizer(state)?)
}

pub fn load_training_state(
    checkpoint: &Path,
    optimizer: &Path,
    model: ModelConfig,
    train: TrainConfig,
) -> Result<TrainingState, FormatError> {
    decode_training_state(&read_file(checkpoint)?, &read_file(optimizer)?, model, train)
}
