//! `key = value` run configuration.
//!
//! Blank lines and `#` comments are ignored; a later assignment overrides an
//! earlier one. Unknown keys produce warnings. Every known key is typed and
//! range-checked, and a bad value is reported with its line number.
//!
//! | key | default |
//! |---|---|
//! | `mode` | `image` (`image` or `video`) |
//! | `seed` | `0`; seeds initialization, batch order and data |
//! | `channels`, `heads`, `ff_hidden` | `64`, `4`, `128` |
//! | `encoder_layers`, `decoder_layers` | `2`, `2` |
//! | `tokens` | `16` for images, `8` for videos |
//! | `lambda`, `div_layers` | `0.1`, `all` (`all` or `last`) |
//! | `max_question_len`, `max_answer_len` | `12`, `4` |
//! | `image_size`, `patch`, `grid` | `32`, `8`, `2` |
//! | `frames`, `video_size` | `16`, `32` |
//! | `streams` | `8x32x32:2x8, 16x16x16:4x4` (`FxHxW:TUBELETxPATCH`) |
//! | `steps`, `batch_size`, `eval_every` | `3000`, `8`, `500` |
//! | `lr`, `weight_decay`, `clip_norm` | `1e-3`, `1e-4`, `1.0` (`0` disables clipping) |
//! | `empty_tau` | `0.5` |
//! | `train_examples`, `val_examples` | `2000`, `200` |

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use divtok_core::data::{ImageScene, SceneKind, VideoScene, Vocab};
use divtok_core::diversity::DivLayers;
use divtok_core::model::{Mode, ModelConfig};
use divtok_core::tokenizer::{split_token_budget, StreamSpec};
use divtok_core::train::{AdamConfig, TrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub line: Option<usize>,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(l) => write!(f, "line {l}: {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DataConfig {
    pub scene: SceneKind,
    pub train_examples: usize,
    pub val_examples: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub source: Option<PathBuf>,
    /// `(line, key)` of every unrecognized key.
    pub unknown_keys: Vec<(usize, String)>,
}

impl RunConfig {
    pub fn defaults(mode: Mode) -> Self {
        parse_settings(&[], mode).expect("defaults are valid")
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.model.seed = seed;
        self.train.seed = seed;
        self.data.seed = seed;
    }

    pub fn warnings(&self) -> Vec<String> {
        self.unknown_keys
            .iter()
            .map(|(line, key)| format!("line {line}: unknown key {key:?} ignored"))
            .collect()
    }
}

/// Parses `FxHxW:TUBELETxPATCH`, comma-separated, leaving token quotas at 0.
pub fn parse_streams(text: &str) -> Result<Vec<StreamSpec>, String> {
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|item| {
            let bad = || format!("stream {item:?} is not FxHxW:TUBELETxPATCH");
            let (dims, cut) = item.split_once(':').ok_or_else(bad)?;
            let nums = |s: &str| -> Result<Vec<usize>, String> { s.split('x').map(|n| n.trim().parse().map_err(|_| bad())).collect() };
            match (nums(dims)?.as_slice(), nums(cut)?.as_slice()) {
                (&[frames, height, width], &[tubelet, patch]) => Ok(StreamSpec {
                    frames,
                    height,
                    width,
                    tubelet,
                    patch,
                    tokens: 0,
                }),
                _ => Err(bad()),
            }
        })
        .collect()
}

struct Entry<'a> {
    line: usize,
    key: &'a str,
    value: &'a str,
}

fn entries(text: &str) -> Result<Vec<Entry<'_>>, ConfigError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| ConfigError {
            line: Some(i + 1),
            message: format!("expected `key = value`, got {line:?}"),
        })?;
        out.push(Entry {
            line: i + 1,
            key: key.trim(),
            value: value.trim(),
        });
    }
    Ok(out)
}

pub fn parse_config_str(text: &str) -> Result<RunConfig, ConfigError> {
    let entries = entries(text)?;
    let mode = match entries.iter().rev().find(|e| e.key == "mode") {
        Some(e) => e.value.parse::<Mode>().map_err(|err| ConfigError {
            line: Some(e.line),
            message: err.to_string(),
        })?,
        None => Mode::Image,
    };
    parse_settings(&entries, mode)
}

pub fn parse_config(path: &Path) -> Result<RunConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError {
        line: None,
        message: format!("{}: {e}", path.display()),
    })?;
    let mut cfg = parse_config_str(&text)?;
    cfg.source = Some(path.to_path_buf());
    Ok(cfg)
}

fn typed<T: FromStr>(e: &Entry<'_>) -> Result<T, ConfigError> {
    e.value.parse().map_err(|_| ConfigError {
        line: Some(e.line),
        message: format!("invalid value {:?} for {}", e.value, e.key),
    })
}

fn positive(e: &Entry<'_>) -> Result<usize, ConfigError> {
    let v: usize = typed(e)?;
    if v == 0 {
        return Err(ConfigError {
            line: Some(e.line),
            message: format!("{} must be positive", e.key),
        });
    }
    Ok(v)
}

fn non_negative(e: &Entry<'_>) -> Result<f64, ConfigError> {
    let v: f64 = typed(e)?;
    if !v.is_finite() || v < 0.0 {
        return Err(ConfigError {
            line: Some(e.line),
            message: format!("{} must be finite and non-negative", e.key),
        });
    }
    Ok(v)
}

fn parse_settings(entries: &[Entry<'_>], mode: Mode) -> Result<RunConfig, ConfigError> {
    let vocab = Vocab::grammar();
    let mut model = match mode {
        Mode::Image => ModelConfig::image(vocab.len()),
        Mode::Video => ModelConfig::video(vocab.len()),
    };
    let mut train = TrainConfig::default();
    let mut adam = AdamConfig::default();
    let (mut image_size, mut patch, mut grid) = (32usize, 8usize, 2usize);
    let (mut frames, mut video_size) = (16usize, 32usize);
    let mut streams: Option<(usize, Vec<StreamSpec>)> = None;
    let mut tokens = model.tokens;
    let (mut train_examples, mut val_examples) = (2000usize, 200usize);
    let mut seed = 0u64;
    let mut unknown_keys = Vec::new();

    for e in entries {
        match e.key {
            "mode" => {}
            "seed" => seed = typed(e)?,
            "channels" => model.channels = positive(e)?,
            "encoder_layers" => model.encoder_layers = positive(e)?,
            "decoder_layers" => model.decoder_layers = positive(e)?,
            "heads" => model.heads = positive(e)?,
            "ff_hidden" => model.ff_hidden = positive(e)?,
            "tokens" => tokens = positive(e)?,
            "lambda" => model.lambda = non_negative(e)?,
            "div_layers" => model.div_layers = typed::<DivLayers>(e)?,
            "max_question_len" => model.max_question_len = positive(e)?,
            "max_answer_len" => model.max_answer_len = positive(e)?,
            "image_size" => image_size = positive(e)?,
            "patch" => patch = positive(e)?,
            "grid" => grid = positive(e)?,
            "frames" => frames = positive(e)?,
            "video_size" => video_size = positive(e)?,
            "streams" => {
                let parsed = parse_streams(e.value).map_err(|message| ConfigError {
                    line: Some(e.line),
                    message,
                })?;
                if parsed.is_empty() {
                    return Err(ConfigError {
                        line: Some(e.line),
                        message: "streams must list at least one stream".into(),
                    });
                }
                streams = Some((e.line, parsed));
            }
            "steps" => train.steps = typed(e)?,
            "batch_size" => train.batch_size = positive(e)?,
            "eval_every" => train.eval_every = typed(e)?,
            "lr" => adam.lr = non_negative(e)?,
            "weight_decay" => adam.weight_decay = non_negative(e)?,
            "clip_norm" => {
                let v = non_negative(e)?;
                train.clip_norm = (v > 0.0).then_some(v);
            }
            "empty_tau" => train.empty_tau = non_negative(e)?,
            "train_examples" => train_examples = positive(e)?,
            "val_examples" => val_examples = typed(e)?,
            other => unknown_keys.push((e.line, other.to_string())),
        }
    }
    train.adam = adam;

    let cross = |message: String, line: Option<usize>| ConfigError { line, message };
    let scene = match mode {
        Mode::Image => {
            model.input = (1, image_size, image_size);
            model.streams = vec![StreamSpec {
                frames: 1,
                height: image_size,
                width: image_size,
                tubelet: 1,
                patch,
                tokens,
            }];
            SceneKind::Image(ImageScene { size: image_size, grid })
        }
        Mode::Video => {
            model.input = (frames, video_size, video_size);
            if let Some((_, s)) = &streams {
                model.streams = s.clone();
            }
            SceneKind::Video(VideoScene {
                frames,
                size: video_size,
            })
        }
    };
    let quotas = split_token_budget(tokens, model.streams.len()).map_err(|e| cross(e.to_string(), None))?;
    for (s, q) in model.streams.iter_mut().zip(quotas) {
        s.tokens = q;
    }
    model.tokens = tokens;
    model.seed = seed;
    train.seed = seed;
    model.validate().map_err(|e| cross(e.to_string(), streams.as_ref().map(|s| s.0)))?;
    match scene {
        SceneKind::Image(s) => s.validate(),
        SceneKind::Video(s) => s.validate(),
    }
    .map_err(|e| cross(e.to_string(), None))?;
    Ok(RunConfig {
        model,
        train,
        data: DataConfig {
            scene,
            train_examples,
            val_examples,
            seed,
        },
        source: None,
        unknown_keys,
    })
}
