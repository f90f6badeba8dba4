//! Adaptive token learning over visual feature grids, conditioned on text.
//!
//! For every token `i` a small MLP scores each grid position from the
//! position's features and a conditioning vector; a softmax over positions
//! turns the scores into an attention map `alpha_i`, and the token is the
//! spatial mean of the features weighted by that map:
//!
//! ```text
//! z_i[c] = (1/S) * sum_s alpha_i[s] * X[s, c]
//! ```
//!
//! Multi-stream video inputs get one map set per stream; the per-stream
//! tokens are concatenated and passed through a shared projection. In
//! iterative mode the whole procedure is repeated before every encoder
//! layer, conditioned on the previous layer's output.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{glorot, EncoderLayer, FeatureMap, Linear, ParamId, ParameterStore, Session};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// One visual stream: the resolution it sees and how it is cut into
/// tubelets. Images are streams with `frames == tubelet == 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamSpec {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub tubelet: usize,
    pub patch: usize,
    /// Token quota of this stream.
    pub tokens: usize,
}

impl StreamSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = self.tubelet > 0
            && self.patch > 0
            && self.frames > 0
            && self.frames.is_multiple_of(self.tubelet)
            && self.height.is_multiple_of(self.patch)
            && self.width.is_multiple_of(self.patch)
            && self.height > 0
            && self.width > 0
            && self.tokens > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid stream {self:?}")))
        }
    }

    /// Feature grid `(T', H', W')`.
    pub fn grid(&self) -> (usize, usize, usize) {
        (self.frames / self.tubelet, self.height / self.patch, self.width / self.patch)
    }

    pub fn positions(&self) -> usize {
        let (t, h, w) = self.grid();
        t * h * w
    }
}

/// Splits `total` tokens evenly over `streams`, the remainder going to the
/// first stream.
pub fn split_token_budget(total: usize, streams: usize) -> Result<Vec<usize>> {
    if streams == 0 || total < streams {
        return Err(Error::Config(format!("cannot split {total} tokens over {streams} streams")));
    }
    let mut quotas = vec![total / streams; streams];
    quotas[0] += total % streams;
    Ok(quotas)
}

/// Attention maps `[N, M, S]`: for each example and token a distribution
/// over the `S` grid positions.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMaps(Tensor);

impl AttentionMaps {
    /// Wraps a `[N, M, S]` tensor after checking every map is a probability
    /// distribution (entries in `[0, 1]`, sums within 1e-6 of one).
    pub fn new(t: Tensor) -> Result<Self> {
        if t.rank() != 3 {
            return Err(Error::InvalidArgument(format!("attention maps must be [N, M, S], got {:?}", t.shape())));
        }
        let s = t.shape()[2];
        for map in t.data().chunks(s) {
            let total: f64 = map.iter().sum();
            if map.iter().any(|v| !(0.0..=1.0).contains(v)) || libm::fabs(total - 1.0) > 1e-6 {
                return Err(Error::InvalidArgument("attention map is not a distribution".into()));
            }
        }
        Ok(Self(t))
    }

    /// Wraps without validation, for diagnostics over arbitrary maps.
    pub fn unchecked(t: Tensor) -> Self {
        Self(t)
    }

    /// Stacks per-example `[M, S]` maps into `[N, M, S]`.
    pub fn stack(maps: &[&Tensor]) -> Result<Self> {
        let first = maps.first().ok_or_else(|| Error::InvalidArgument("no maps to stack".into()))?;
        let shape = first.shape().to_vec();
        let mut data = Vec::with_capacity(first.numel() * maps.len());
        for m in maps {
            if m.shape() != shape.as_slice() || shape.len() != 2 {
                return Err(Error::ShapeMismatch {
                    op: "AttentionMaps::stack",
                    lhs: shape,
                    rhs: m.shape().to_vec(),
                });
            }
            data.extend_from_slice(m.data());
        }
        Self::new(Tensor::new(&[maps.len(), shape[0], shape[1]], data)?)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn examples(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn tokens(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn positions(&self) -> usize {
        self.0.shape()[2]
    }

    pub fn map(&self, example: usize, token: usize) -> &[f64] {
        let (m, s) = (self.tokens(), self.positions());
        let start = (example * m + token) * s;
        &self.0.data()[start..start + s]
    }
}

/// Map-scoring MLP for one stream: `relu(X W_f + b_f + cond W_c) W_o + b_o`,
/// i.e. a two-layer MLP over `[features(s) ; cond]` applied at each position.
#[derive(Debug, Clone, Copy)]
pub struct TokenLearner {
    pub features: Linear,
    pub cond: ParamId,
    pub out: Linear,
    pub tokens: usize,
}

impl TokenLearner {
    pub fn new(store: &mut ParameterStore, rng: &mut Rng, name: &str, channels: usize, hidden: usize, tokens: usize) -> Result<Self> {
        if tokens == 0 {
            return Err(Error::Config("token count must be at least 1".into()));
        }
        let features = Linear::new(store, rng, &format!("{name}/mlp_feat"), channels, hidden)?;
        // the concatenated input has fan-in 2C
        let cond = store.add(&format!("{name}/mlp_cond/w"), glorot(rng, &[channels, hidden], 2 * channels, hidden))?;
        let out = Linear::new(store, rng, &format!("{name}/mlp_out"), hidden, tokens)?;
        Ok(Self {
            features,
            cond,
            out,
            tokens,
        })
    }

    /// `[M, S]` maps for features `[S, C]` conditioned on `cond [C]`.
    pub fn spatial_attention_maps(&self, s: &mut Session, features: &FeatureMap, cond: Var) -> Result<Var> {
        let fshape = s.graph.shape(features.features).to_vec();
        let wshape = s.graph.value(s.var(self.features.w)).shape().to_vec();
        if fshape.len() != 2 || fshape[1] != wshape[0] || s.graph.shape(cond) != [wshape[0]] {
            return Err(Error::ShapeMismatch {
                op: "spatial_attention_maps",
                lhs: fshape,
                rhs: wshape,
            });
        }
        let h = self.features.forward(s, features.features)?;
        let wc = s.var(self.cond);
        let c = s.graph.reshape(cond, &[1, wshape[0]])?;
        let c = s.graph.matmul(c, wc)?;
        let h = s.graph.add(h, c)?;
        let h = s.graph.relu(h)?;
        let logits = self.out.forward(s, h)?;
        let logits = s.graph.transpose(logits)?;
        s.graph.softmax(logits, 1)
    }
}

/// `z[.., i, c] = mean_s maps[.., i, s] * features[.., s, c]`: maps `[M, S]`
/// with features `[S, C]`, or batched `[N, M, S]` with `[N, S, C]`.
pub fn tokenize(g: &mut Graph, features: Var, maps: Var) -> Result<Var> {
    let fs = g.shape(features).to_vec();
    let ms = g.shape(maps).to_vec();
    let compatible = fs.len() == ms.len()
        && (fs.len() == 2 || fs.len() == 3)
        && fs[fs.len() - 2] == ms[ms.len() - 1]
        && fs[..fs.len() - 2] == ms[..ms.len() - 2];
    if !compatible {
        return Err(Error::ShapeMismatch {
            op: "tokenize",
            lhs: fs,
            rhs: ms,
        });
    }
    let positions = ms[ms.len() - 1];
    let pooled = g.matmul(maps, features)?;
    g.scale(pooled, 1.0 / positions as f64)
}

/// Concatenates per-stream token sets `[m_s, C]` along the token axis in the
/// given order and applies the shared projection `C -> C`.
pub fn fuse_streams(g: &mut Graph, tokensets: &[Var], w: Var, b: Var) -> Result<Var> {
    let first = tokensets
        .first()
        .ok_or_else(|| Error::InvalidArgument("no token sets to fuse".into()))?;
    let c = g.shape(*first).last().copied().unwrap_or(0);
    for &t in tokensets {
        let sh = g.shape(t);
        if sh.len() != 2 || sh[1] != c {
            return Err(Error::ShapeMismatch {
                op: "fuse_streams",
                lhs: g.shape(*first).to_vec(),
                rhs: sh.to_vec(),
            });
        }
    }
    let joined = g.concat(tokensets, 0)?;
    crate::nn::linear(g, joined, w, b)
}

/// Parameters of one co-tokenization layer.
#[derive(Debug, Clone)]
pub struct CoTokenizerLayer {
    pub learners: Vec<TokenLearner>,
    pub fuse: Linear,
    pub encoder: EncoderLayer,
}

/// Output of [`CoTokenizer::forward`].
#[derive(Debug, Clone)]
pub struct CoTokenized {
    /// Final `[T_text + M, C]` sequence.
    pub sequence: Var,
    /// `maps[layer][stream]`, each `[m_s, S_s]`.
    pub maps: Vec<Vec<Var>>,
    pub text_len: usize,
}

/// Iterative tokenization interleaved with encoder layers.
#[derive(Debug, Clone)]
pub struct CoTokenizer {
    pub layers: Vec<CoTokenizerLayer>,
    pub quotas: Vec<usize>,
}

impl CoTokenizer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParameterStore,
        rng: &mut Rng,
        name: &str,
        layers: usize,
        quotas: &[usize],
        channels: usize,
        heads: usize,
        ff_hidden: usize,
    ) -> Result<Self> {
        if layers == 0 {
            return Err(Error::Config("co-tokenization needs at least one layer".into()));
        }
        if quotas.is_empty() {
            return Err(Error::Config("co-tokenization needs at least one stream".into()));
        }
        let layers = (0..layers)
            .map(|l| {
                let learners = quotas
                    .iter()
                    .enumerate()
                    .map(|(si, &m)| TokenLearner::new(store, rng, &format!("{name}/layer{l}/tok/stream{si}"), channels, channels, m))
                    .collect::<Result<Vec<_>>>()?;
                Ok(CoTokenizerLayer {
                    learners,
                    fuse: Linear::new(store, rng, &format!("{name}/layer{l}/fuse"), channels, channels)?,
                    encoder: EncoderLayer::new(store, rng, &format!("{name}/layer{l}/block"), channels, heads, ff_hidden)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            layers,
            quotas: quotas.to_vec(),
        })
    }

    pub fn total_tokens(&self) -> usize {
        self.quotas.iter().sum()
    }

    /// Layer `l` conditions on the mean of the previous output (layer 0: the
    /// mean text embedding), re-derives every stream's maps and tokens from
    /// the cached feature grids, fuses them, appends them to the text half of
    /// the previous output and applies one encoder layer.
    pub fn forward(&self, s: &mut Session, streams: &[FeatureMap], text: Var) -> Result<CoTokenized> {
        if streams.len() != self.quotas.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} streams, got {}",
                self.quotas.len(),
                streams.len()
            )));
        }
        let tshape = s.graph.shape(text).to_vec();
        if tshape.len() != 2 {
            return Err(Error::InvalidArgument("text must be [T, C]".into()));
        }
        let text_len = tshape[0];
        let mut text_half = text;
        let mut prev = text;
        let mut all_maps = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let cond = s.graph.mean(prev, &[0])?;
            let mut tokensets = Vec::with_capacity(streams.len());
            let mut maps = Vec::with_capacity(streams.len());
            for (learner, fm) in layer.learners.iter().zip(streams) {
                let m = learner.spatial_attention_maps(s, fm, cond)?;
                tokensets.push(tokenize(&mut s.graph, fm.features, m)?);
                maps.push(m);
            }
            let (fw, fb) = (s.var(layer.fuse.w), s.var(layer.fuse.b));
            let fused = fuse_streams(&mut s.graph, &tokensets, fw, fb)?;
            let seq = s.graph.concat(&[text_half, fused], 0)?;
            prev = layer.encoder.forward(s, seq)?;
            text_half = s.graph.slice(prev, 0, 0, text_len)?;
            all_maps.push(maps);
        }
        Ok(CoTokenized {
            sequence: prev,
            maps: all_maps,
            text_len,
        })
    }
}

/// Per-token emptiness statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenMass {
    pub example: usize,
    pub token: usize,
    pub max_weight: f64,
    /// Natural-log entropy of the map.
    pub entropy: f64,
    pub empty_like: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenMassReport {
    pub tokens: Vec<TokenMass>,
    pub empty_count: usize,
}

/// Flags a token as empty-like when its peak weight is within `tau / S` of
/// the uniform level, i.e. `max_s alpha[s] < (1 + tau) / S`.
pub fn token_mass_diagnostic(maps: &AttentionMaps, tau: f64) -> TokenMassReport {
    let s = maps.positions();
    let threshold = (1.0 + tau) / s as f64;
    let mut tokens = Vec::with_capacity(maps.examples() * maps.tokens());
    for n in 0..maps.examples() {
        for i in 0..maps.tokens() {
            let map = maps.map(n, i);
            let max_weight = map.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let entropy = -map
                .iter()
                .filter(|&&a| a > 0.0)
                .map(|&a| a * libm::log(a))
                .sum::<f64>();
            tokens.push(TokenMass {
                example: n,
                token: i,
                max_weight,
                entropy,
                empty_like: max_weight < threshold,
            });
        }
    }
    let empty_count = tokens.iter().filter(|t| t.empty_like).count();
    TokenMassReport { tokens, empty_count }
}
