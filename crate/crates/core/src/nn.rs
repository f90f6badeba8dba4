//! Transformer building blocks: parameter storage, affine maps, layer
//! normalization, multi-head attention, pre-norm encoder/decoder layers and
//! the patch/tubelet embedders that turn pixels into feature grids.
//!
//! Blocks are plain structs of [`ParamId`]s. A forward pass binds the whole
//! [`ParameterStore`] into a fresh [`Session`] (one computation record) and
//! every block reads its parameters from there.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Additive mask value for disallowed attention positions. Finite so that
/// masked logits still satisfy the no-NaN/Inf invariant.
pub const MASK_VALUE: f64 = -1e9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameters in insertion order. Names are slash-delimited paths such
/// as `encoder/layer0/attn/wq`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: BTreeMap<String, usize>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter {name}")));
        }
        if !value.all_finite() {
            return Err(Error::NonFinite("ParameterStore::add"));
        }
        self.index.insert(name.to_string(), self.tensors.len());
        self.names.push(name.to_string());
        self.tensors.push(value);
        Ok(ParamId(self.tensors.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn num_elements(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Copy with every value rounded to the nearest `f32`, the precision of
    /// checkpoint files.
    pub fn rounded_to_f32(&self) -> Self {
        let mut out = self.clone();
        for t in &mut out.tensors {
            t.data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
        out
    }

    /// Same names and shapes, in the same order.
    pub fn same_layout(&self, other: &ParameterStore) -> bool {
        self.names == other.names
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.shape() == b.shape())
    }
}

/// One forward pass: a computation record with every parameter bound as a
/// leaf.
#[derive(Debug)]
pub struct Session {
    pub graph: Graph,
    params: Vec<Var>,
}

impl Session {
    /// Binds all parameters; with `track_grads == false` they become
    /// constants and nothing is differentiable.
    pub fn new(store: &ParameterStore, track_grads: bool) -> Result<Self> {
        let mut graph = Graph::new();
        let params = store
            .tensors()
            .iter()
            .map(|t| graph.leaf(t.clone(), track_grads))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { graph, params })
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.params[id.0]
    }

    /// Runs backward from `loss` and returns one gradient per parameter, in
    /// store order.
    pub fn backward(&mut self, loss: Var) -> Result<Vec<Tensor>> {
        self.graph.backward(loss)?;
        self.params
            .iter()
            .map(|&v| {
                self.graph
                    .grad(v)
                    .ok_or_else(|| Error::InvalidArgument("session was built without gradients".into()))
            })
            .collect()
    }
}

/// Uniform(-s, s) with s = sqrt(6 / (fan_in + fan_out)).
pub fn glorot(rng: &mut Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
    let s = libm::sqrt(6.0 / (fan_in + fan_out) as f64);
    Tensor::from_fn(shape, |_| rng.uniform(-s, s))
}

// ---- functional forms ------------------------------------------------------

/// Affine map over the last axis: `x [..., din] . w [din, dout] + b [dout]`.
pub fn linear(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
    let xs = g.shape(x).to_vec();
    let ws = g.shape(w).to_vec();
    if ws.len() != 2 || xs.last() != Some(&ws[0]) || g.shape(b) != [ws[1]] {
        return Err(Error::ShapeMismatch {
            op: "linear",
            lhs: xs,
            rhs: ws,
        });
    }
    let y = if xs.len() == 1 {
        let row = g.reshape(x, &[1, xs[0]])?;
        let y = g.matmul(row, w)?;
        g.reshape(y, &[ws[1]])?
    } else {
        g.matmul(x, w)?
    };
    g.add(y, b)
}

pub fn softmax(g: &mut Graph, x: Var, axis: usize) -> Result<Var> {
    g.softmax(x, axis)
}

pub fn layer_norm(g: &mut Graph, x: Var, gamma: Var, beta: Var) -> Result<Var> {
    g.layer_norm(x, gamma, beta)
}

/// `[t, t]` additive mask: 0 on and below the diagonal, [`MASK_VALUE`] above.
pub fn causal_mask(t: usize) -> Tensor {
    Tensor::from_fn(&[t, t], |i| if i % t > i / t { MASK_VALUE } else { 0.0 })
}

/// Projection weights of one attention block, already bound to a graph.
#[derive(Debug, Clone, Copy)]
pub struct AttentionVars {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
}

/// Scaled dot-product attention with `heads` heads over `q [sq, d]`,
/// `k, v [sk, d]`, followed by the output projection. `mask`, when given, is
/// an additive `[sq, sk]` tensor applied to every head's scores.
pub fn multi_head_attention(
    g: &mut Graph,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    p: &AttentionVars,
    mask: Option<Var>,
) -> Result<Var> {
    let qs = g.shape(q).to_vec();
    let ks = g.shape(k).to_vec();
    if qs.len() != 2 || ks.len() != 2 || g.shape(v) != ks.as_slice() || ks[1] != qs[1] {
        return Err(Error::ShapeMismatch {
            op: "multi_head_attention",
            lhs: qs,
            rhs: ks,
        });
    }
    let (sq, d, sk) = (qs[0], qs[1], ks[0]);
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!("width {d} not divisible by {heads} heads")));
    }
    if let Some(m) = mask {
        if g.shape(m) != [sq, sk] {
            return Err(Error::ShapeMismatch {
                op: "attention mask",
                lhs: vec![sq, sk],
                rhs: g.shape(m).to_vec(),
            });
        }
    }
    let dh = d / heads;
    let split = |g: &mut Graph, x: Var, n: usize| -> Result<Var> {
        let x = g.reshape(x, &[n, heads, dh])?;
        g.permute(x, &[1, 0, 2])
    };
    let qp = linear(g, q, p.wq, p.bq)?;
    let kp = linear(g, k, p.wk, p.bk)?;
    let vp = linear(g, v, p.wv, p.bv)?;
    let qh = split(g, qp, sq)?;
    let kh = split(g, kp, sk)?;
    let vh = split(g, vp, sk)?;
    let kt = g.transpose(kh)?;
    let scores = g.matmul(qh, kt)?;
    let mut scores = g.scale(scores, 1.0 / libm::sqrt(dh as f64))?;
    if let Some(m) = mask {
        scores = g.add(scores, m)?;
    }
    let weights = g.softmax(scores, 2)?;
    let ctx = g.matmul(weights, vh)?;
    let ctx = g.permute(ctx, &[1, 0, 2])?;
    let ctx = g.reshape(ctx, &[sq, d])?;
    linear(g, ctx, p.wo, p.bo)
}

// ---- parameterized blocks --------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParameterStore, rng: &mut Rng, name: &str, din: usize, dout: usize) -> Result<Self> {
        let w = store.add(&format!("{name}/w"), glorot(rng, &[din, dout], din, dout))?;
        let b = store.add(&format!("{name}/b"), Tensor::zeros(&[dout]))?;
        Ok(Self { w, b })
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let (w, b) = (s.var(self.w), s.var(self.b));
        linear(&mut s.graph, x, w, b)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParameterStore, name: &str, d: usize) -> Result<Self> {
        let gamma = store.add(&format!("{name}/gamma"), Tensor::full(&[d], 1.0))?;
        let beta = store.add(&format!("{name}/beta"), Tensor::zeros(&[d]))?;
        Ok(Self { gamma, beta })
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let (gm, bt) = (s.var(self.gamma), s.var(self.beta));
        s.graph.layer_norm(x, gm, bt)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new(store: &mut ParameterStore, rng: &mut Rng, name: &str, d: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(Error::Config(format!("width {d} not divisible by {heads} heads")));
        }
        Ok(Self {
            q: Linear::new(store, rng, &format!("{name}/wq"), d, d)?,
            k: Linear::new(store, rng, &format!("{name}/wk"), d, d)?,
            v: Linear::new(store, rng, &format!("{name}/wv"), d, d)?,
            o: Linear::new(store, rng, &format!("{name}/wo"), d, d)?,
            heads,
        })
    }

    pub fn vars(&self, s: &Session) -> AttentionVars {
        AttentionVars {
            wq: s.var(self.q.w),
            bq: s.var(self.q.b),
            wk: s.var(self.k.w),
            bk: s.var(self.k.b),
            wv: s.var(self.v.w),
            bv: s.var(self.v.b),
            wo: s.var(self.o.w),
            bo: s.var(self.o.b),
        }
    }

    pub fn forward(&self, s: &mut Session, q: Var, kv: Var, mask: Option<Var>) -> Result<Var> {
        let vars = self.vars(s);
        multi_head_attention(&mut s.graph, q, kv, kv, self.heads, &vars, mask)
    }
}

/// Two-layer ReLU feed-forward.
#[derive(Debug, Clone, Copy)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParameterStore, rng: &mut Rng, name: &str, d: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            up: Linear::new(store, rng, &format!("{name}/up"), d, hidden)?,
            down: Linear::new(store, rng, &format!("{name}/down"), hidden, d)?,
        })
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let h = self.up.forward(s, x)?;
        let h = s.graph.relu(h)?;
        self.down.forward(s, h)
    }
}

/// Pre-norm self-attention and feed-forward, each with a residual path.
#[derive(Debug, Clone, Copy)]
pub struct EncoderLayer {
    pub ln_attn: LayerNorm,
    pub attn: Attention,
    pub ln_ff: LayerNorm,
    pub ff: FeedForward,
}

impl EncoderLayer {
    pub fn new(store: &mut ParameterStore, rng: &mut Rng, name: &str, d: usize, heads: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            ln_attn: LayerNorm::new(store, &format!("{name}/ln_attn"), d)?,
            attn: Attention::new(store, rng, &format!("{name}/attn"), d, heads)?,
            ln_ff: LayerNorm::new(store, &format!("{name}/ln_ff"), d)?,
            ff: FeedForward::new(store, rng, &format!("{name}/ff"), d, hidden)?,
        })
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let h = self.ln_attn.forward(s, x)?;
        let a = self.attn.forward(s, h, h, None)?;
        let x = s.graph.add(x, a)?;
        let h = self.ln_ff.forward(s, x)?;
        let f = self.ff.forward(s, h)?;
        s.graph.add(x, f)
    }
}

/// Causal self-attention, cross-attention over the encoder memory, then
/// feed-forward; all pre-norm with residuals.
#[derive(Debug, Clone, Copy)]
pub struct DecoderLayer {
    pub ln_self: LayerNorm,
    pub self_attn: Attention,
    pub ln_cross: LayerNorm,
    pub cross_attn: Attention,
    pub ln_ff: LayerNorm,
    pub ff: FeedForward,
}

impl DecoderLayer {
    pub fn new(store: &mut ParameterStore, rng: &mut Rng, name: &str, d: usize, heads: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            ln_self: LayerNorm::new(store, &format!("{name}/ln_self"), d)?,
            self_attn: Attention::new(store, rng, &format!("{name}/self_attn"), d, heads)?,
            ln_cross: LayerNorm::new(store, &format!("{name}/ln_cross"), d)?,
            cross_attn: Attention::new(store, rng, &format!("{name}/cross_attn"), d, heads)?,
            ln_ff: LayerNorm::new(store, &format!("{name}/ln_ff"), d)?,
            ff: FeedForward::new(store, rng, &format!("{name}/ff"), d, hidden)?,
        })
    }

    pub fn forward(&self, s: &mut Session, y: Var, memory: Var, mask: Var) -> Result<Var> {
        let h = self.ln_self.forward(s, y)?;
        let a = self.self_attn.forward(s, h, h, Some(mask))?;
        let y = s.graph.add(y, a)?;
        let h = self.ln_cross.forward(s, y)?;
        let c = self.cross_attn.forward(s, h, memory, None)?;
        let y = s.graph.add(y, c)?;
        let h = self.ln_ff.forward(s, y)?;
        let f = self.ff.forward(s, h)?;
        s.graph.add(y, f)
    }
}

/// Decoder stack plus final norm and vocabulary projection.
#[derive(Debug, Clone)]
pub struct Decoder {
    pub layers: Vec<DecoderLayer>,
    pub ln_out: LayerNorm,
    pub head: Linear,
}

impl Decoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParameterStore,
        rng: &mut Rng,
        name: &str,
        layers: usize,
        d: usize,
        heads: usize,
        hidden: usize,
        vocab: usize,
    ) -> Result<Self> {
        let layers = (0..layers)
            .map(|l| DecoderLayer::new(store, rng, &format!("{name}/layer{l}"), d, heads, hidden))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            layers,
            ln_out: LayerNorm::new(store, &format!("{name}/ln_out"), d)?,
            head: Linear::new(store, rng, &format!("{name}/head"), d, vocab)?,
        })
    }

    /// Logits `[t, vocab]` for every position of the embedded prefix
    /// `y_prefix [t, d]`, attending causally to itself and fully to
    /// `memory [m, d]`.
    pub fn decoder_step(&self, s: &mut Session, y_prefix: Var, memory: Var) -> Result<Var> {
        let shape = s.graph.shape(y_prefix).to_vec();
        if shape.len() != 2 {
            return Err(Error::InvalidArgument("decoder prefix must be [t, d]".into()));
        }
        let mask = s.graph.constant(causal_mask(shape[0]))?;
        let mut y = y_prefix;
        for layer in &self.layers {
            y = layer.forward(s, y, memory, mask)?;
        }
        let y = self.ln_out.forward(s, y)?;
        self.head.forward(s, y)
    }
}

/// Token-id lookup table.
#[derive(Debug, Clone, Copy)]
pub struct Embedding {
    pub table: ParamId,
}

impl Embedding {
    pub fn new(store: &mut ParameterStore, rng: &mut Rng, name: &str, vocab: usize, d: usize) -> Result<Self> {
        let table = store.add(&format!("{name}/table"), glorot(rng, &[vocab, d], vocab, d))?;
        Ok(Self { table })
    }

    pub fn forward(&self, s: &mut Session, ids: &[usize]) -> Result<Var> {
        let t = s.var(self.table);
        s.graph.gather_rows(t, ids)
    }
}

/// Spatial or spatio-temporal grid of channel vectors, stored flattened as
/// `[positions, channels]` with the grid extents alongside.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    pub features: Var,
    pub grid: Vec<usize>,
}

impl FeatureMap {
    pub fn positions(&self) -> usize {
        self.grid.iter().product()
    }
}

fn check_divisible(what: &str, extent: usize, by: usize) -> Result<()> {
    if by == 0 || !extent.is_multiple_of(by) {
        return Err(Error::InvalidArgument(format!("{what} extent {extent} not divisible by {by}")));
    }
    Ok(())
}

/// Non-overlapping `p x p` patches of an `[H, W, 3]` image, one row per
/// patch in row-major grid order; each row is the patch's pixels in
/// `(dy, dx, channel)` order.
pub fn extract_patches(image: &Tensor, p: usize) -> Result<Tensor> {
    let s = image.shape();
    if s.len() != 3 || s[2] != 3 {
        return Err(Error::InvalidArgument(format!("expected [H, W, 3] image, got {s:?}")));
    }
    extract_tubelets(&image.reshape(&[1, s[0], s[1], 3])?, 1, p)
}

/// Non-overlapping `pt x p x p` tubelets of a `[T, H, W, 3]` video, one row
/// per tubelet in `(t', y', x')` order; each row is `(dt, dy, dx, channel)`.
pub fn extract_tubelets(video: &Tensor, pt: usize, p: usize) -> Result<Tensor> {
    let s = video.shape();
    if s.len() != 4 || s[3] != 3 {
        return Err(Error::InvalidArgument(format!("expected [T, H, W, 3] video, got {s:?}")));
    }
    let (t, h, w) = (s[0], s[1], s[2]);
    check_divisible("temporal", t, pt)?;
    check_divisible("height", h, p)?;
    check_divisible("width", w, p)?;
    let (gt, gh, gw) = (t / pt, h / p, w / p);
    let row = pt * p * p * 3;
    let x = video.data();
    let mut data = Vec::with_capacity(gt * gh * gw * row);
    for ti in 0..gt {
        for yi in 0..gh {
            for xi in 0..gw {
                for dt in 0..pt {
                    for dy in 0..p {
                        let base = (((ti * pt + dt) * h + yi * p + dy) * w + xi * p) * 3;
                        data.extend_from_slice(&x[base..base + p * 3]);
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![gt * gh * gw, row], data))
}

/// Linear patch projection plus learned 2-D position embedding.
#[derive(Debug, Clone, Copy)]
pub struct PatchEmbed {
    pub patch: usize,
    pub grid: (usize, usize),
    pub proj: Linear,
    pub pos: ParamId,
}

impl PatchEmbed {
    pub fn new(store: &mut ParameterStore, rng: &mut Rng, name: &str, image: (usize, usize), patch: usize, d: usize) -> Result<Self> {
        check_divisible("height", image.0, patch)?;
        check_divisible("width", image.1, patch)?;
        let grid = (image.0 / patch, image.1 / patch);
        let proj = Linear::new(store, rng, &format!("{name}/proj"), patch * patch * 3, d)?;
        let pos = store.add(&format!("{name}/pos"), Tensor::zeros(&[grid.0 * grid.1, d]))?;
        Ok(Self { patch, grid, proj, pos })
    }

    /// Patch projection without the position term, `[S, C]`.
    pub fn project(&self, s: &mut Session, image: &Tensor) -> Result<Var> {
        let shape = image.shape();
        if shape.len() != 3 || (shape[0] / self.patch, shape[1] / self.patch) != self.grid {
            return Err(Error::ShapeMismatch {
                op: "patch_embed",
                lhs: shape.to_vec(),
                rhs: vec![self.grid.0 * self.patch, self.grid.1 * self.patch, 3],
            });
        }
        let patches = s.graph.constant(extract_patches(image, self.patch)?)?;
        self.proj.forward(s, patches)
    }

    pub fn forward(&self, s: &mut Session, image: &Tensor) -> Result<FeatureMap> {
        let x = self.project(s, image)?;
        let pos = s.var(self.pos);
        let features = s.graph.add(x, pos)?;
        Ok(FeatureMap {
            features,
            grid: vec![self.grid.0, self.grid.1],
        })
    }
}

/// Tubelet projection plus learned 3-D position embedding.
#[derive(Debug, Clone, Copy)]
pub struct FrameEmbed {
    pub tubelet: usize,
    pub patch: usize,
    pub grid: (usize, usize, usize),
    pub proj: Linear,
    pub pos: ParamId,
}

impl FrameEmbed {
    pub fn new(
        store: &mut ParameterStore,
        rng: &mut Rng,
        name: &str,
        video: (usize, usize, usize),
        (tubelet, patch): (usize, usize),
        d: usize,
    ) -> Result<Self> {
        check_divisible("temporal", video.0, tubelet)?;
        check_divisible("height", video.1, patch)?;
        check_divisible("width", video.2, patch)?;
        let grid = (video.0 / tubelet, video.1 / patch, video.2 / patch);
        let proj = Linear::new(store, rng, &format!("{name}/proj"), tubelet * patch * patch * 3, d)?;
        let pos = store.add(&format!("{name}/pos"), Tensor::zeros(&[grid.0 * grid.1 * grid.2, d]))?;
        Ok(Self {
            tubelet,
            patch,
            grid,
            proj,
            pos,
        })
    }

    pub fn project(&self, s: &mut Session, video: &Tensor) -> Result<Var> {
        let shape = video.shape();
        let expect = [self.grid.0 * self.tubelet, self.grid.1 * self.patch, self.grid.2 * self.patch, 3];
        if shape != expect {
            return Err(Error::ShapeMismatch {
                op: "frame_embed",
                lhs: shape.to_vec(),
                rhs: expect.to_vec(),
            });
        }
        let tubes = s.graph.constant(extract_tubelets(video, self.tubelet, self.patch)?)?;
        self.proj.forward(s, tubes)
    }

    pub fn forward(&self, s: &mut Session, video: &Tensor) -> Result<FeatureMap> {
        let x = self.project(s, video)?;
        let pos = s.var(self.pos);
        let features = s.graph.add(x, pos)?;
        Ok(FeatureMap {
            features,
            grid: vec![self.grid.0, self.grid.1, self.grid.2],
        })
    }
}
