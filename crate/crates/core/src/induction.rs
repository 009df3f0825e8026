//! Repeated-sequence induction experiment: per-token loss and per-head scores.

use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::hooks::{FlexWrapper, HookFunction};
use crate::parallel::{ModelInput, ShardedModel, TokenBatch};
use crate::rng::RngStream;
use crate::tensor::{cross_entropy_per_token, Tensor};

const STOCHASTIC_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RepeatedSequence {
    pub k: usize,
    /// Length `2k`; the second half repeats the first.
    pub tokens: Vec<usize>,
}

pub fn sample_repeated_sequence(k: usize, vocab: usize, seed: u64) -> Result<RepeatedSequence> {
    if k < 2 || vocab < 2 {
        return Err(Error::Config(format!("need k >= 2 and vocab >= 2, got k={k}, vocab={vocab}")));
    }
    let mut rng = RngStream::new(seed);
    let mut tokens: Vec<usize> = (0..k).map(|_| rng.below(vocab)).collect();
    tokens.extend_from_within(..);
    Ok(RepeatedSequence { k, tokens })
}

/// Loss of predicting token `i+1` from position `i`; length `S−1`.
pub fn per_token_loss(logits: &Tensor<f64>, tokens: &[usize]) -> Result<Tensor<f64>> {
    if logits.rank() != 2 || logits.dim(0) != tokens.len() || tokens.len() < 2 {
        return Err(Error::shape(
            "per_token_loss",
            format!("logits {:?} for {} tokens", logits.shape(), tokens.len()),
        ));
    }
    let s = tokens.len();
    cross_entropy_per_token(&logits.narrow(0, 0, s - 1)?, &tokens[1..])
}

/// Mean of `A[i, i−(k−1)]` over `i ∈ [k, 2k)`.
///
/// `A` must be a `[2k, 2k]` causal, row-stochastic attention map.
pub fn induction_score(a: &Tensor<f64>, k: usize) -> Result<f64> {
    let n = 2 * k;
    if k < 1 || a.shape() != [n, n] {
        return Err(Error::shape("induction_score", format!("map {:?} for k={k}", a.shape())));
    }
    for i in 0..n {
        let row = &a.data()[i * n..(i + 1) * n];
        if let Some(j) = (i + 1..n).find(|&j| row[j] != 0.0) {
            return Err(Error::Config(format!(
                "attention map is not causal: A[{i},{j}] = {}",
                row[j]
            )));
        }
        let sum: f64 = row.iter().sum();
        if row.iter().any(|&x| !(x >= 0.0)) || (sum - 1.0).abs() > STOCHASTIC_TOL {
            return Err(Error::InvalidDistribution { which: "attention", row: i });
        }
    }
    let total: f64 = (k..n).map(|i| a.at(&[i, i + 1 - k])).sum();
    Ok(total / k as f64)
}

/// `scores[layer][head]`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct InductionScoreGrid {
    pub scores: Vec<Vec<f64>>,
}

impl InductionScoreGrid {
    pub fn n_layers(&self) -> usize {
        self.scores.len()
    }

    pub fn n_heads(&self) -> usize {
        self.scores.first().map_or(0, Vec::len)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["layer", "head", "score"])?;
        for (l, row) in self.scores.iter().enumerate() {
            for (h, s) in row.iter().enumerate() {
                w.write_record([l.to_string(), h.to_string(), s.to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// One character per head, darker for higher scores.
    pub fn ascii_heatmap(&self) -> String {
        const RAMP: &[u8] = b" .:-=+*#%@";
        let mut out = String::new();
        for (l, row) in self.scores.iter().enumerate() {
            let _ = write!(out, "L{l:<3}");
            for &s in row {
                let idx = ((s.clamp(0.0, 1.0) * (RAMP.len() - 1) as f64).round()) as usize;
                out.push(RAMP[idx] as char);
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ClassifiedHead {
    pub layer: usize,
    pub head: usize,
    pub score: f64,
}

/// Heads scoring at least `threshold`, best first; ties by `(layer, head)`.
pub fn classify_heads(grid: &InductionScoreGrid, threshold: f64) -> Result<Vec<ClassifiedHead>> {
    if !(threshold > 0.0) {
        return Err(Error::Config(format!("threshold must be positive, got {threshold}")));
    }
    let mut out: Vec<ClassifiedHead> = grid
        .scores
        .iter()
        .enumerate()
        .flat_map(|(layer, row)| {
            row.iter().enumerate().map(move |(head, &score)| ClassifiedHead { layer, head, score })
        })
        .filter(|c| c.score >= threshold)
        .collect();
    out.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then((a.layer, a.head).cmp(&(b.layer, b.head)))
    });
    Ok(out)
}

/// Everything the induction experiment produces for one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct InductionRun {
    pub grid: InductionScoreGrid,
    /// `[2k, V]` logits of the first batch row.
    pub logits: Tensor<f64>,
    pub loss: Tensor<f64>,
}

impl InductionRun {
    /// Mean loss predicting the first copy, positions `0..k−1`.
    pub fn first_half_loss(&self, k: usize) -> f64 {
        mean(&self.loss.data()[..k - 1])
    }

    /// Mean loss predicting the second copy, positions `k..2k−1`.
    pub fn second_half_loss(&self, k: usize) -> f64 {
        mean(&self.loss.data()[k..])
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn write_loss_csv(loss: &Tensor<f64>, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["position", "loss"])?;
    for (i, l) in loss.data().iter().enumerate() {
        w.write_record([i.to_string(), l.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Retrieves every `layers.{l}.attn.scores` map for `seq` and scores each head.
///
/// The sequence is replicated once per DP replica so the batch divides
/// evenly; analysis uses the first row. Hooks added here are removed again.
pub fn score_all_heads<M: ShardedModel<f64>>(
    wrapper: &mut FlexWrapper<f64, M>,
    seq: &RepeatedSequence,
    n_layers: usize,
    n_heads: usize,
    vocab: usize,
) -> Result<InductionRun> {
    let s = seq.tokens.len();
    let batch = wrapper.mesh().dp_size();
    let mut handles = Vec::new();
    for l in 0..n_layers {
        handles.push(wrapper.register_hook_function(HookFunction::new(
            format!("layers.{l}.attn.scores"),
            vec![Some(batch), Some(n_heads), Some(s), Some(s)],
        ))?);
    }
    wrapper.store().clear();
    let ids: Vec<usize> = (0..batch).flat_map(|_| seq.tokens.iter().copied()).collect();
    let run = wrapper.forward(&ModelInput::Tokens(TokenBatch::new(batch, s, ids)?));
    for h in handles {
        wrapper.remove_hook(h);
    }
    let out = run?;
    let mut scores = Vec::with_capacity(n_layers);
    for l in 0..n_layers {
        let site = format!("layers.{l}.attn.scores");
        let maps = wrapper.store().latest(&site).cloned().ok_or_else(|| Error::Pipeline {
            site: site.clone(),
            detail: "no attention map retrieved".into(),
        })?;
        let mut row = Vec::with_capacity(n_heads);
        for h in 0..n_heads {
            let a = Tensor::from_parts(vec![s, s], maps.data()[h * s * s..(h + 1) * s * s].to_vec())?;
            row.push(induction_score(&a, seq.k)?);
        }
        scores.push(row);
    }
    wrapper.store().clear();
    let logits = out.output.narrow(0, 0, 1)?.reshape(&[s, vocab])?;
    let loss = per_token_loss(&logits, &seq.tokens)?;
    Ok(InductionRun {
        grid: InductionScoreGrid { scores },
        logits,
        loss,
    })
}
