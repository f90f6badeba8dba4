//! Pairwise orthogonality penalty on attention maps.
//!
//! For each example the loss sums the squared inner products of every
//! ordered pair of distinct maps:
//!
//! ```text
//! L = (1/N) * sum_k sum_{i != j} <alpha_i^k, alpha_j^k>^2
//! ```
//!
//! Each unordered pair therefore contributes twice. The batch mean keeps the
//! weight of the term independent of batch size.

use alloc::format;
use alloc::vec::Vec;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::tokenizer::AttentionMaps;

/// Which co-tokenization layers contribute to the penalty.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DivLayers {
    #[default]
    All,
    Last,
}

impl DivLayers {
    /// Flattens `maps[layer][stream]` into the list the penalty averages over.
    pub fn select(self, maps: &[Vec<Var>]) -> Vec<Var> {
        match self {
            DivLayers::All => maps.iter().flatten().copied().collect(),
            DivLayers::Last => maps.last().cloned().unwrap_or_default(),
        }
    }
}

impl core::str::FromStr for DivLayers {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(DivLayers::All),
            "last" => Ok(DivLayers::Last),
            other => Err(Error::Config(format!("div_layers must be all or last, got {other:?}"))),
        }
    }
}

/// Differentiable penalty for maps `[M, S]` (one example) or `[N, M, S]`.
pub fn diversity_loss(g: &mut Graph, maps: Var) -> Result<Var> {
    let shape = g.shape(maps).to_vec();
    let (n, m) = match shape.as_slice() {
        [m, _] => (1, *m),
        [n, m, _] => (*n, *m),
        _ => {
            return Err(Error::InvalidArgument(format!(
                "diversity_loss expects [M, S] or [N, M, S] maps, got {shape:?}"
            )))
        }
    };
    let t = g.transpose(maps)?;
    let gram = g.matmul(maps, t)?;
    let sq = g.square(gram)?;
    let off_diagonal = Tensor::from_fn(&[m, m], |i| if i / m == i % m { 0.0 } else { 1.0 });
    let mask = g.constant(off_diagonal)?;
    let masked = g.mul(sq, mask)?;
    let total = g.sum_all(masked)?;
    g.scale(total, 1.0 / n as f64)
}

/// `task + lambda * mean(diversity_loss(maps))`. With `lambda == 0` the task
/// loss itself is returned, so the objective is the unregularized one.
pub fn combined_loss(g: &mut Graph, task: Var, maps: &[Var], lambda: f64) -> Result<Var> {
    if !lambda.is_finite() || lambda < 0.0 {
        return Err(Error::Config(format!("lambda must be finite and non-negative, got {lambda}")));
    }
    if lambda == 0.0 {
        return Ok(task);
    }
    if maps.is_empty() {
        return Err(Error::InvalidArgument("combined_loss needs at least one map set".into()));
    }
    let mut total = diversity_loss(g, maps[0])?;
    for &m in &maps[1..] {
        let d = diversity_loss(g, m)?;
        total = g.add(total, d)?;
    }
    let weighted = g.scale(total, lambda / maps.len() as f64)?;
    g.add(task, weighted)
}

/// `O[i][j] = <alpha_i, alpha_j>^2` for one example.
#[derive(Debug, Clone, PartialEq)]
pub struct OverlapMatrix {
    tokens: usize,
    entries: Vec<f64>,
}

impl OverlapMatrix {
    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.tokens + j]
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    fn off_diagonal(&self) -> impl Iterator<Item = f64> + '_ {
        let m = self.tokens;
        self.entries
            .iter()
            .enumerate()
            .filter(move |(k, _)| k / m != k % m)
            .map(|(_, &v)| v)
    }

    pub fn off_diagonal_sum(&self) -> f64 {
        self.off_diagonal().sum()
    }

    /// Zero when `M == 1`.
    pub fn max_off_diagonal(&self) -> f64 {
        self.off_diagonal().fold(0.0, f64::max)
    }

    /// Zero when `M == 1`.
    pub fn mean_off_diagonal(&self) -> f64 {
        let pairs = self.tokens * (self.tokens - 1);
        if pairs == 0 {
            0.0
        } else {
            self.off_diagonal_sum() / pairs as f64
        }
    }
}

pub fn pairwise_overlap_matrix(maps: &AttentionMaps) -> Vec<OverlapMatrix> {
    let m = maps.tokens();
    (0..maps.examples())
        .map(|n| {
            let mut entries = alloc::vec![0.0; m * m];
            for i in 0..m {
                for j in i..m {
                    let dot: f64 = maps.map(n, i).iter().zip(maps.map(n, j)).map(|(a, b)| a * b).sum();
                    entries[i * m + j] = dot * dot;
                    entries[j * m + i] = dot * dot;
                }
            }
            OverlapMatrix { tokens: m, entries }
        })
        .collect()
}

/// Value-level penalty: mean over examples of the off-diagonal overlap sum.
pub fn diversity_value(maps: &AttentionMaps) -> f64 {
    let per_example = pairwise_overlap_matrix(maps);
    per_example.iter().map(OverlapMatrix::off_diagonal_sum).sum::<f64>() / per_example.len() as f64
}
