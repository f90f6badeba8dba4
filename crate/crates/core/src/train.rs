//! Optimizer, training loop, answer metrics and evaluation.

use alloc::boxed::Box;
use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use crate::data::{detokenize, Example, Vocab};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::nn::ParameterStore;
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::tokenizer::{token_mass_diagnostic, AttentionMaps};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// First and second moment estimates, one pair per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &ParameterStore) -> Self {
        let zeros = || params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        AdamState {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

/// One Adam update with decoupled weight decay: every parameter is first
/// scaled by `1 - lr * weight_decay`, then moved by the bias-corrected
/// moment ratio. Nothing is modified when a gradient is misshapen or
/// non-finite.
pub fn adam_step(params: &mut ParameterStore, state: &mut AdamState, grads: &[Tensor], cfg: &AdamConfig) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::InvalidArgument(format!(
            "{} gradients and {}/{} moments for {} parameters",
            grads.len(),
            state.m.len(),
            state.v.len(),
            params.len()
        )));
    }
    for (i, ((g, p), m)) in grads.iter().zip(params.tensors()).zip(&state.m).enumerate() {
        if g.shape() != p.shape() || m.shape() != p.shape() {
            return Err(Error::ShapeMismatch {
                op: "adam_step",
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        if !g.all_finite() {
            return Err(Error::InvalidArgument(format!(
                "non-finite gradient for parameter {}",
                params.iter().nth(i).map_or("?", |(name, _)| name)
            )));
        }
    }
    state.step += 1;
    let t = state.step as f64;
    let correct1 = 1.0 - libm::pow(cfg.beta1, t);
    let correct2 = 1.0 - libm::pow(cfg.beta2, t);
    let decay = 1.0 - cfg.lr * cfg.weight_decay;
    for (((p, g), m), v) in params
        .tensors_mut()
        .iter_mut()
        .zip(grads)
        .zip(&mut state.m)
        .zip(&mut state.v)
    {
        for (((p, &g), m), v) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *p *= decay;
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            let m_hat = *m / correct1;
            let v_hat = *v / correct2;
            *p -= cfg.lr * m_hat / (libm::sqrt(v_hat) + cfg.eps);
        }
    }
    Ok(())
}

/// Rescales `grads` so their joint L2 norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = libm::sqrt(grads.iter().flat_map(|g| g.data()).map(|v| v * v).sum());
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= scale);
        }
    }
    norm
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Global gradient-norm cap; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Validation interval in steps; the final step is always evaluated.
    pub eval_every: u64,
    /// Threshold for empty-like tokens, see [`token_mass_diagnostic`].
    pub empty_tau: f64,
    /// Seed of the batch order.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 3000,
            batch_size: 8,
            adam: AdamConfig::default(),
            clip_norm: Some(1.0),
            eval_every: 500,
            empty_tau: 0.5,
            seed: 0,
        }
    }
}

/// Everything needed to resume training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingState {
    pub step: u64,
    pub params: ParameterStore,
    pub adam: AdamState,
    /// Source of the batch order; epoch `e` is shuffled by a generator
    /// seeded from this state and `e`.
    pub rng: Rng,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl TrainingState {
    pub fn new(params: ParameterStore, model: ModelConfig, train: TrainConfig) -> Self {
        TrainingState {
            step: 0,
            adam: AdamState::new(&params),
            params,
            rng: Rng::new(train.seed),
            model,
            train,
        }
    }

    /// Example indices of the batch taken at `step`: consecutive slices of
    /// a stream of per-epoch permutations.
    pub fn batch_indices(&self, step: u64, dataset_len: usize) -> Vec<usize> {
        let b = self.train.batch_size as u64;
        let n = dataset_len as u64;
        let mut cached: Option<(u64, Vec<usize>)> = None;
        (step * b..step * b + b)
            .map(|pos| {
                let epoch = pos / n;
                if cached.as_ref().map(|c| c.0) != Some(epoch) {
                    cached = Some((epoch, epoch_order(self.rng.state(), epoch, dataset_len)));
                }
                cached.as_ref().expect("just filled").1[(pos % n) as usize]
            })
            .collect()
    }
}

fn epoch_order(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut rng = Rng::new(seed ^ epoch.wrapping_mul(0xA076_1D64_78BD_642F));
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    order
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRecord {
    pub step: u64,
    pub task_loss: f64,
    pub div_loss: f64,
    pub mean_overlap: f64,
    pub em: f64,
    pub f1: f64,
    pub empty_tokens: usize,
}

impl MetricsRecord {
    pub const HEADER: &'static str = "step\ttask_loss\tdiv_loss\tmean_overlap\tem\tf1\tempty_tokens";

    pub fn from_report(step: u64, r: &MetricsReport) -> Self {
        MetricsRecord {
            step,
            task_loss: r.task_loss,
            div_loss: r.diversity,
            mean_overlap: r.mean_overlap,
            em: r.exact_match,
            f1: r.f1,
            empty_tokens: r.empty_tokens,
        }
    }

    pub fn parse(line: &str) -> Result<Self> {
        let fields: Vec<&str> = line.split('\t').collect();
        let bad = || Error::InvalidArgument(format!("malformed metrics line {line:?}"));
        if fields.len() != 7 {
            return Err(bad());
        }
        let float = |i: usize| fields[i].parse::<f64>().map_err(|_| bad());
        Ok(MetricsRecord {
            step: fields[0].parse().map_err(|_| bad())?,
            task_loss: float(1)?,
            div_loss: float(2)?,
            mean_overlap: float(3)?,
            em: float(4)?,
            f1: float(5)?,
            empty_tokens: fields[6].parse().map_err(|_| bad())?,
        })
    }
}

/// Tab-separated, with shortest round-trip float formatting.
impl fmt::Display for MetricsRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            self.step, self.task_loss, self.div_loss, self.mean_overlap, self.em, self.f1, self.empty_tokens
        )
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("training set is empty")]
    EmptyTrainSet,
    #[error("training diverged at step {step}: {cause}")]
    Diverged {
        step: u64,
        cause: Error,
        /// State after the last successful step.
        last_good: Box<TrainingState>,
    },
    #[error(transparent)]
    Model(#[from] Error),
}

fn is_numeric_failure(e: &Error) -> bool {
    match e {
        Error::NonFinite(_) | Error::LogDomain => true,
        Error::InvalidArgument(msg) => msg.starts_with("non-finite gradient"),
        _ => false,
    }
}

/// Runs `state` forward to `state.train.steps`, evaluating on `val` every
/// `eval_every` steps and at the end. Evaluation uses the parameters
/// rounded to 32-bit floats, exactly as a checkpoint stores them, so a
/// saved checkpoint reproduces the logged metrics. `on_record` sees each
/// record as it is produced.
pub fn train(
    model: &Model,
    mut state: TrainingState,
    train_set: &[Example],
    val_set: &[Example],
    vocab: &Vocab,
    mut on_record: impl FnMut(&MetricsRecord),
) -> Result<(TrainingState, Vec<MetricsRecord>), TrainError> {
    if train_set.is_empty() {
        return Err(TrainError::EmptyTrainSet);
    }
    model.check_store(&state.params)?;
    let cfg = state.train;
    let mut log = Vec::new();
    while state.step < cfg.steps {
        let indices = state.batch_indices(state.step, train_set.len());
        let batch: Vec<&Example> = indices.iter().map(|&i| &train_set[i]).collect();
        let outcome = model.loss_and_grads(&state.params, &batch).and_then(|(parts, mut grads)| {
            if !parts.total.is_finite() {
                return Err(Error::NonFinite("training loss"));
            }
            if let Some(max) = cfg.clip_norm {
                clip_global_norm(&mut grads, max);
            }
            let mut next = state.params.clone();
            let mut adam = state.adam.clone();
            adam_step(&mut next, &mut adam, &grads, &cfg.adam)?;
            Ok((next, adam))
        });
        match outcome {
            Ok((params, adam)) => {
                state.params = params;
                state.adam = adam;
                state.step += 1;
            }
            Err(e) if is_numeric_failure(&e) => {
                return Err(TrainError::Diverged {
                    step: state.step,
                    cause: e,
                    last_good: Box::new(state),
                })
            }
            Err(e) => return Err(e.into()),
        }
        let due = (cfg.eval_every > 0 && state.step.is_multiple_of(cfg.eval_every)) || state.step == cfg.steps;
        if due && !val_set.is_empty() {
            let report = evaluate(model, &state.params.rounded_to_f32(), val_set, vocab, cfg.empty_tau)?;
            let record = MetricsRecord::from_report(state.step, &report);
            on_record(&record);
            log.push(record);
        }
    }
    Ok((state, log))
}

/// Lowercase, ASCII punctuation removed, whitespace collapsed to single
/// spaces.
pub fn normalize_answer(s: &str) -> String {
    let cleaned: String = s
        .chars()
        .filter(|c| !c.is_ascii_punctuation())
        .flat_map(char::to_lowercase)
        .collect();
    cleaned.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Whether the normalized prediction equals any normalized gold answer.
pub fn exact_match(pred: &str, golds: &[&str]) -> bool {
    let p = normalize_answer(pred);
    golds.iter().any(|g| normalize_answer(g) == p)
}

/// Bag-of-words F1 between the normalized prediction and each gold answer,
/// maximized over golds. Two empty answers match with F1 1.
pub fn token_f1(pred: &str, golds: &[&str]) -> f64 {
    let bag = |s: &str| {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for w in normalize_answer(s).split_whitespace() {
            *counts.entry(w.into()).or_default() += 1;
        }
        counts
    };
    let p = bag(pred);
    let p_len: usize = p.values().sum();
    golds
        .iter()
        .map(|g| {
            let g = bag(g);
            let g_len: usize = g.values().sum();
            if p_len == 0 || g_len == 0 {
                return if p_len == g_len { 1.0 } else { 0.0 };
            }
            let common: usize = p.iter().map(|(w, &c)| c.min(g.get(w).copied().unwrap_or(0))).sum();
            if common == 0 {
                return 0.0;
            }
            let precision = common as f64 / p_len as f64;
            let recall = common as f64 / g_len as f64;
            2.0 * precision * recall / (precision + recall)
        })
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsReport {
    pub exact_match: f64,
    pub f1: f64,
    /// Mean teacher-forced cross-entropy.
    pub task_loss: f64,
    /// Mean diversity penalty of the layers selected by the model config.
    pub diversity: f64,
    /// Mean off-diagonal entry of the same overlap matrices.
    pub mean_overlap: f64,
    /// Empty-like tokens in the last layer, summed over examples.
    pub empty_tokens: usize,
    pub examples: usize,
}

/// Greedy-decodes every example and aggregates answer and attention-map
/// statistics. Sums run in dataset order.
pub fn evaluate(model: &Model, params: &ParameterStore, dataset: &[Example], vocab: &Vocab, empty_tau: f64) -> Result<MetricsReport> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("cannot evaluate an empty dataset".into()));
    }
    let mut sums = [0.0f64; 5];
    let mut empty_tokens = 0;
    for ex in dataset {
        let a = model.assess(params, ex)?;
        let pred = detokenize(&a.generated.ids, vocab);
        sums[0] += f64::from(u8::from(exact_match(&pred, &[&ex.answer])));
        sums[1] += token_f1(&pred, &[&ex.answer]);
        sums[2] += a.task_loss;
        let overlaps = a.generated.overlaps(model.config.div_layers);
        let n = overlaps.len().max(1) as f64;
        sums[3] += overlaps.iter().map(|o| o.off_diagonal_sum()).sum::<f64>() / n;
        sums[4] += overlaps.iter().map(|o| o.mean_off_diagonal()).sum::<f64>() / n;
        if let Some(last) = a.generated.maps.last() {
            for m in last {
                let maps = AttentionMaps::unchecked(m.reshape(&[1, m.shape()[0], m.shape()[1]])?);
                empty_tokens += token_mass_diagnostic(&maps, empty_tau).empty_count;
            }
        }
    }
    let n = dataset.len() as f64;
    Ok(MetricsReport {
        exact_match: sums[0] / n,
        f1: sums[1] / n,
        task_loss: sums[2] / n,
        diversity: sums[3] / n,
        mean_overlap: sums[4] / n,
        empty_tokens,
        examples: dataset.len(),
    })
}
