//! Visual question answering model: per-stream tubelet embedders feed a
//! text-conditioned co-tokenizing encoder whose output a transformer decoder
//! turns into a free-form answer.
//!
//! Images are treated as single-frame videos, so both modes share one path.
//! Every stream sees the raw input resampled to its own resolution: frames
//! are subsampled with a fixed stride and pixels are average-pooled.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::Var;
use crate::data::{detokenize, Example, Visual, Vocab, END, START};
use crate::diversity::{combined_loss, pairwise_overlap_matrix, DivLayers, OverlapMatrix};
use crate::error::{Error, Result};
use crate::gradcheck::{finite_difference_grad, max_rel_error};
use crate::nn::{Decoder, Embedding, FeatureMap, FrameEmbed, LayerNorm, ParamId, ParameterStore, Session};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::tokenizer::{split_token_budget, AttentionMaps, CoTokenizer, StreamSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Image,
    Video,
}

impl core::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "image" => Ok(Mode::Image),
            "video" => Ok(Mode::Video),
            other => Err(Error::Config(format!("mode must be image or video, got {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub mode: Mode,
    pub vocab_size: usize,
    /// Input extents `(frames, height, width)`; images use one frame.
    pub input: (usize, usize, usize),
    pub channels: usize,
    /// Co-tokenization layers, each followed by one encoder block.
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    pub ff_hidden: usize,
    /// Total learned tokens per layer, the sum of the stream quotas.
    pub tokens: usize,
    pub streams: Vec<StreamSpec>,
    pub lambda: f64,
    pub div_layers: DivLayers,
    pub max_question_len: usize,
    pub max_answer_len: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// Desk-scale image model: 32x32 inputs cut into 8x8 patches, 16 tokens.
    pub fn image(vocab_size: usize) -> Self {
        ModelConfig {
            mode: Mode::Image,
            vocab_size,
            input: (1, 32, 32),
            channels: 64,
            encoder_layers: 2,
            decoder_layers: 2,
            heads: 4,
            ff_hidden: 128,
            tokens: 16,
            streams: vec![StreamSpec {
                frames: 1,
                height: 32,
                width: 32,
                tubelet: 1,
                patch: 8,
                tokens: 16,
            }],
            lambda: 0.1,
            div_layers: DivLayers::All,
            max_question_len: 12,
            max_answer_len: 4,
            seed: 0,
        }
    }

    /// Desk-scale video model over 16 frames of 32x32: one stream with every
    /// other frame at full resolution, one with all frames at half
    /// resolution, 8 tokens split between them.
    pub fn video(vocab_size: usize) -> Self {
        ModelConfig {
            mode: Mode::Video,
            input: (16, 32, 32),
            tokens: 8,
            streams: vec![
                StreamSpec {
                    frames: 8,
                    height: 32,
                    width: 32,
                    tubelet: 2,
                    patch: 8,
                    tokens: 4,
                },
                StreamSpec {
                    frames: 16,
                    height: 16,
                    width: 16,
                    tubelet: 4,
                    patch: 4,
                    tokens: 4,
                },
            ],
            ..Self::image(vocab_size)
        }
    }

    /// Sets the token budget and re-splits it over the streams.
    pub fn set_tokens(&mut self, tokens: usize) -> Result<()> {
        let quotas = split_token_budget(tokens, self.streams.len())?;
        for (s, q) in self.streams.iter_mut().zip(quotas) {
            s.tokens = q;
        }
        self.tokens = tokens;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.heads == 0 || !self.channels.is_multiple_of(self.heads) {
            return fail(format!("channels {} not divisible by heads {}", self.channels, self.heads));
        }
        if self.tokens == 0 || self.streams.is_empty() {
            return fail("need at least one token and one stream".into());
        }
        if self.streams.iter().map(|s| s.tokens).sum::<usize>() != self.tokens {
            return fail(format!("stream quotas do not sum to {} tokens", self.tokens));
        }
        let (t, h, w) = self.input;
        if self.mode == Mode::Image && (t != 1 || self.streams.len() != 1) {
            return fail("image mode takes one frame and one stream".into());
        }
        for s in &self.streams {
            s.validate()?;
            if s.frames > t || t % s.frames != 0 || s.height > h || h % s.height != 0 || s.width > w || w % s.width != 0 {
                return fail(format!("stream {s:?} cannot be resampled from input {:?}", self.input));
            }
        }
        if self.vocab_size <= END + 2 {
            return fail(format!("vocabulary of {} words is too small", self.vocab_size));
        }
        if [self.encoder_layers, self.decoder_layers, self.ff_hidden, self.max_question_len, self.max_answer_len].contains(&0) {
            return fail("layer counts, widths and length limits must be positive".into());
        }
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return fail(format!("lambda must be finite and non-negative, got {}", self.lambda));
        }
        Ok(())
    }
}

/// Resamples `[T, H, W, 3]` to the stream's resolution by taking every
/// `T / frames`-th frame and averaging `(H / height) x (W / width)` blocks.
pub fn stream_input(video: &Tensor, spec: &StreamSpec) -> Result<Tensor> {
    let shape = video.shape();
    if shape.len() != 4 || shape[3] != 3 {
        return Err(Error::InvalidArgument(format!("expected [T, H, W, 3] input, got {shape:?}")));
    }
    let (t, h, w) = (shape[0], shape[1], shape[2]);
    if t % spec.frames != 0 || h % spec.height != 0 || w % spec.width != 0 {
        return Err(Error::ShapeMismatch {
            op: "stream_input",
            lhs: shape.to_vec(),
            rhs: vec![spec.frames, spec.height, spec.width, 3],
        });
    }
    let (stride, ph, pw) = (t / spec.frames, h / spec.height, w / spec.width);
    if (stride, ph, pw) == (1, 1, 1) {
        return Ok(video.clone());
    }
    let x = video.data();
    let norm = 1.0 / (ph * pw) as f64;
    let mut out = Vec::with_capacity(spec.frames * spec.height * spec.width * 3);
    for f in 0..spec.frames {
        let frame = f * stride;
        for y in 0..spec.height {
            for xo in 0..spec.width {
                let mut acc = [0.0; 3];
                for dy in 0..ph {
                    for dx in 0..pw {
                        let at = ((frame * h + y * ph + dy) * w + xo * pw + dx) * 3;
                        for (a, v) in acc.iter_mut().zip(&x[at..at + 3]) {
                            *a += v;
                        }
                    }
                }
                out.extend(acc.iter().map(|a| a * norm));
            }
        }
    }
    Tensor::new(&[spec.frames, spec.height, spec.width, 3], out)
}

/// Encoder output for one example.
#[derive(Debug, Clone)]
pub struct Encoded {
    /// Normalized `[T_text + M, C]` sequence the decoder attends to.
    pub memory: Var,
    /// `maps[layer][stream]`, each `[m_s, S_s]`.
    pub maps: Vec<Vec<Var>>,
}

/// Per-example loss pieces inside one session.
#[derive(Debug, Clone)]
pub struct ExampleLoss {
    pub total: Var,
    pub task: Var,
    pub maps: Vec<Vec<Var>>,
}

/// Batch loss values, each a mean over examples.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub task: f64,
    /// Mean diversity penalty over the layers selected by `div_layers`,
    /// reported even when `lambda == 0`.
    pub diversity: f64,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    embeds: Vec<FrameEmbed>,
    words: Embedding,
    question_pos: ParamId,
    answer_pos: ParamId,
    encoder: CoTokenizer,
    ln_memory: LayerNorm,
    decoder: Decoder,
}

impl Model {
    /// Builds the model and a freshly initialized parameter store from
    /// `config.seed`.
    pub fn new(config: ModelConfig) -> Result<(Self, ParameterStore)> {
        config.validate()?;
        let mut rng = Rng::new(config.seed);
        let mut store = ParameterStore::new();
        let c = config.channels;
        let embeds = config
            .streams
            .iter()
            .enumerate()
            .map(|(i, s)| {
                FrameEmbed::new(
                    &mut store,
                    &mut rng,
                    &format!("embed/stream{i}"),
                    (s.frames, s.height, s.width),
                    (s.tubelet, s.patch),
                    c,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let words = Embedding::new(&mut store, &mut rng, "words", config.vocab_size, c)?;
        let question_pos = store.add("question/pos", Tensor::zeros(&[config.max_question_len, c]))?;
        let answer_pos = store.add("answer/pos", Tensor::zeros(&[config.max_answer_len + 1, c]))?;
        let quotas: Vec<usize> = config.streams.iter().map(|s| s.tokens).collect();
        let encoder = CoTokenizer::new(
            &mut store,
            &mut rng,
            "encoder",
            config.encoder_layers,
            &quotas,
            c,
            config.heads,
            config.ff_hidden,
        )?;
        let ln_memory = LayerNorm::new(&mut store, "encoder/ln_out", c)?;
        let decoder = Decoder::new(
            &mut store,
            &mut rng,
            "decoder",
            config.decoder_layers,
            c,
            config.heads,
            config.ff_hidden,
            config.vocab_size,
        )?;
        let model = Model {
            config,
            embeds,
            words,
            question_pos,
            answer_pos,
            encoder,
            ln_memory,
            decoder,
        };
        Ok((model, store))
    }

    /// Checks that `store` has exactly this model's parameter names and
    /// shapes, e.g. after loading a checkpoint.
    pub fn check_store(&self, store: &ParameterStore) -> Result<()> {
        let (_, fresh) = Model::new(self.config.clone())?;
        if fresh.same_layout(store) {
            Ok(())
        } else {
            Err(Error::Config("parameters do not match the model configuration".into()))
        }
    }

    /// Validates `visual` against the configured input and returns `[T, H, W, 3]`.
    pub fn input_tensor(&self, visual: &Visual) -> Result<Tensor> {
        let (t, h, w) = self.config.input;
        let expect = match self.config.mode {
            Mode::Image => vec![h, w],
            Mode::Video => vec![t, h, w],
        };
        if visual.dims() != expect {
            return Err(Error::ShapeMismatch {
                op: "model input",
                lhs: visual.dims(),
                rhs: expect,
            });
        }
        let x = visual.to_tensor();
        x.reshape(&[t, h, w, 3])
    }

    fn check_ids(&self, ids: &[usize], limit: usize, what: &str) -> Result<()> {
        if ids.is_empty() || ids.len() > limit {
            return Err(Error::InvalidArgument(format!("{what} length {} outside 1..={limit}", ids.len())));
        }
        if let Some(&bad) = ids.iter().find(|&&id| id >= self.config.vocab_size) {
            return Err(Error::IndexOutOfRange {
                index: bad,
                extent: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// Word embeddings plus the first `ids.len()` rows of `pos`.
    fn embed_words(&self, s: &mut Session, ids: &[usize], pos: ParamId) -> Result<Var> {
        let e = self.words.forward(s, ids)?;
        let p = s.var(pos);
        let p = s.graph.slice(p, 0, 0, ids.len())?;
        s.graph.add(e, p)
    }

    pub fn encode(&self, s: &mut Session, visual: &Visual, question: &[usize]) -> Result<Encoded> {
        self.check_ids(question, self.config.max_question_len, "question")?;
        let x = self.input_tensor(visual)?;
        let streams = self
            .config
            .streams
            .iter()
            .zip(&self.embeds)
            .map(|(spec, embed)| embed.forward(s, &stream_input(&x, spec)?))
            .collect::<Result<Vec<FeatureMap>>>()?;
        let text = self.embed_words(s, question, self.question_pos)?;
        let out = self.encoder.forward(s, &streams, text)?;
        let memory = self.ln_memory.forward(s, out.sequence)?;
        Ok(Encoded { memory, maps: out.maps })
    }

    /// Teacher-forced logits `[len(answer) + 1, vocab]` for decoder inputs
    /// `[START] + answer`.
    pub fn answer_logits(&self, s: &mut Session, memory: Var, answer: &[usize]) -> Result<Var> {
        self.check_ids(answer, self.config.max_answer_len, "answer")?;
        let inputs: Vec<usize> = core::iter::once(START).chain(answer.iter().copied()).collect();
        let y = self.embed_words(s, &inputs, self.answer_pos)?;
        self.decoder.decoder_step(s, y, memory)
    }

    /// Cross-entropy against `answer + [END]` plus the weighted diversity
    /// penalty of this example's maps.
    pub fn example_loss(&self, s: &mut Session, example: &Example) -> Result<ExampleLoss> {
        let enc = self.encode(s, &example.visual, &example.question_ids)?;
        let logits = self.answer_logits(s, enc.memory, &example.answer_ids)?;
        let targets: Vec<usize> = example.answer_ids.iter().copied().chain(core::iter::once(END)).collect();
        let task = s.graph.cross_entropy(logits, &targets, None)?;
        let selected = self.config.div_layers.select(&enc.maps);
        let total = combined_loss(&mut s.graph, task, &selected, self.config.lambda)?;
        Ok(ExampleLoss {
            total,
            task,
            maps: enc.maps,
        })
    }

    /// Mean of the per-example losses, all recorded in one session.
    pub fn batch_loss(&self, s: &mut Session, batch: &[&Example]) -> Result<(Var, LossParts)> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let scale = 1.0 / batch.len() as f64;
        let mut sum: Option<Var> = None;
        let mut parts = LossParts {
            total: 0.0,
            task: 0.0,
            diversity: 0.0,
        };
        for ex in batch {
            let l = self.example_loss(s, ex)?;
            parts.task += s.graph.value(l.task).item().unwrap_or(f64::NAN) * scale;
            parts.diversity += self.diversity_value(s, &l.maps) * scale;
            sum = Some(match sum {
                None => l.total,
                Some(acc) => s.graph.add(acc, l.total)?,
            });
        }
        let loss = s.graph.scale(sum.expect("non-empty batch"), scale)?;
        parts.total = s.graph.value(loss).item().unwrap_or(f64::NAN);
        Ok((loss, parts))
    }

    fn diversity_value(&self, s: &Session, maps: &[Vec<Var>]) -> f64 {
        let selected = self.config.div_layers.select(maps);
        let total: f64 = selected
            .iter()
            .map(|&m| overlap_of(s.graph.value(m)).off_diagonal_sum())
            .sum();
        total / selected.len().max(1) as f64
    }

    /// Batch loss without gradients.
    pub fn loss(&self, store: &ParameterStore, batch: &[&Example]) -> Result<LossParts> {
        let mut s = Session::new(store, false)?;
        Ok(self.batch_loss(&mut s, batch)?.1)
    }

    /// Largest relative error between the backward-pass gradient of the
    /// batch loss and central differences with step `h`, over every
    /// parameter element.
    pub fn gradient_check(&self, store: &ParameterStore, batch: &[&Example], h: f64) -> Result<f64> {
        let (_, grads) = self.loss_and_grads(store, batch)?;
        let mut probe = store.clone();
        let mut worst: f64 = 0.0;
        for (i, analytic) in grads.iter().enumerate() {
            let numeric = finite_difference_grad(
                |t| {
                    probe.tensors_mut()[i] = t.clone();
                    Ok(self.loss(&probe, batch)?.total)
                },
                &store.tensors()[i],
                h,
            )?;
            probe.tensors_mut()[i] = store.tensors()[i].clone();
            worst = worst.max(max_rel_error(analytic, &numeric));
        }
        Ok(worst)
    }

    /// Batch loss and one gradient per parameter in store order.
    pub fn loss_and_grads(&self, store: &ParameterStore, batch: &[&Example]) -> Result<(LossParts, Vec<Tensor>)> {
        let mut s = Session::new(store, true)?;
        let (loss, parts) = self.batch_loss(&mut s, batch)?;
        let grads = s.backward(loss)?;
        Ok((parts, grads))
    }

    /// Teacher-forced logits `[N, t, vocab]` and per-layer, per-stream maps
    /// `[N, m_s, S_s]`. All answers must have the same length.
    pub fn forward(&self, store: &ParameterStore, batch: &[&Example]) -> Result<(Tensor, Vec<Vec<AttentionMaps>>)> {
        let first = batch.first().ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
        let t = first.answer_ids.len();
        let mut s = Session::new(store, false)?;
        let mut logits = Vec::new();
        let mut maps: Vec<Vec<Vec<Tensor>>> = Vec::new();
        for ex in batch {
            if ex.answer_ids.len() != t {
                return Err(Error::ShapeMismatch {
                    op: "forward",
                    lhs: vec![t],
                    rhs: vec![ex.answer_ids.len()],
                });
            }
            let enc = self.encode(&mut s, &ex.visual, &ex.question_ids)?;
            let l = self.answer_logits(&mut s, enc.memory, &ex.answer_ids)?;
            logits.extend_from_slice(s.graph.value(l).data());
            maps.push(map_values(&s, &enc.maps));
        }
        let logits = Tensor::new(&[batch.len(), t + 1, self.config.vocab_size], logits)?;
        let stacked = (0..self.config.encoder_layers)
            .map(|l| {
                (0..self.config.streams.len())
                    .map(|st| AttentionMaps::stack(&maps.iter().map(|m| &m[l][st]).collect::<Vec<_>>()))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((logits, stacked))
    }

    /// Attention maps of one example as `maps[layer][stream]`, `[m_s, S_s]`.
    pub fn attention_maps(&self, store: &ParameterStore, visual: &Visual, question: &[usize]) -> Result<Vec<Vec<Tensor>>> {
        let mut s = Session::new(store, false)?;
        let enc = self.encode(&mut s, visual, question)?;
        Ok(map_values(&s, &enc.maps))
    }

    /// Greedy decoding from the start token until the end token or
    /// `max_answer_len` words. Returns the generated ids and the maps.
    pub fn generate_ids(&self, store: &ParameterStore, visual: &Visual, question: &[usize]) -> Result<Generated> {
        let mut s = Session::new(store, false)?;
        let enc = self.encode(&mut s, visual, question)?;
        let ids = self.greedy(&mut s, enc.memory)?;
        Ok(Generated {
            ids,
            maps: map_values(&s, &enc.maps),
        })
    }

    /// Greedy answer plus the teacher-forced cross-entropy of `example`,
    /// sharing one encoder pass.
    pub fn assess(&self, store: &ParameterStore, example: &Example) -> Result<Assessment> {
        let mut s = Session::new(store, false)?;
        let enc = self.encode(&mut s, &example.visual, &example.question_ids)?;
        let logits = self.answer_logits(&mut s, enc.memory, &example.answer_ids)?;
        let targets: Vec<usize> = example.answer_ids.iter().copied().chain(core::iter::once(END)).collect();
        let task = s.graph.cross_entropy(logits, &targets, None)?;
        let task_loss = s.graph.value(task).item().unwrap_or(f64::NAN);
        let ids = self.greedy(&mut s, enc.memory)?;
        Ok(Assessment {
            generated: Generated {
                ids,
                maps: map_values(&s, &enc.maps),
            },
            task_loss,
        })
    }

    fn greedy(&self, s: &mut Session, memory: Var) -> Result<Vec<usize>> {
        let mut prefix = vec![START];
        while prefix.len() <= self.config.max_answer_len {
            let y = self.embed_words(s, &prefix, self.answer_pos)?;
            let logits = self.decoder.decoder_step(s, y, memory)?;
            let v = s.graph.value(logits);
            let row = &v.data()[(prefix.len() - 1) * self.config.vocab_size..];
            let next = argmax(row);
            if next == END {
                break;
            }
            prefix.push(next);
        }
        Ok(prefix.split_off(1))
    }

    pub fn generate(&self, store: &ParameterStore, visual: &Visual, question: &[usize], vocab: &Vocab) -> Result<String> {
        Ok(detokenize(&self.generate_ids(store, visual, question)?.ids, vocab))
    }
}

fn map_values(s: &Session, maps: &[Vec<Var>]) -> Vec<Vec<Tensor>> {
    maps.iter()
        .map(|layer| layer.iter().map(|&m| s.graph.value(m).clone()).collect())
        .collect()
}

/// Output of [`Model::assess`].
#[derive(Debug, Clone, PartialEq)]
pub struct Assessment {
    pub generated: Generated,
    pub task_loss: f64,
}

/// Result of greedy decoding.
#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    pub ids: Vec<usize>,
    /// `maps[layer][stream]`, `[m_s, S_s]`.
    pub maps: Vec<Vec<Tensor>>,
}

impl Generated {
    /// Overlap matrices of the selected layers, flattened over layers and
    /// streams.
    pub fn overlaps(&self, layers: DivLayers) -> Vec<OverlapMatrix> {
        let chosen = match layers {
            DivLayers::All => &self.maps[..],
            DivLayers::Last => &self.maps[self.maps.len().saturating_sub(1)..],
        };
        chosen.iter().flatten().map(overlap_of).collect()
    }
}

/// Overlap matrix of one `[M, S]` map set.
fn overlap_of(maps: &Tensor) -> OverlapMatrix {
    let (tokens, positions) = (maps.shape()[0], maps.shape()[1]);
    let wrapped = AttentionMaps::unchecked(maps.reshape(&[1, tokens, positions]).expect("same element count"));
    pairwise_overlap_matrix(&wrapped).remove(0)
}

/// Index of the first maximum.
fn argmax(xs: &[f64]) -> usize {
    xs.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}
