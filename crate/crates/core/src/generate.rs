//! Autoregressive report generation from an embedding through the mapper
//! and the (frozen) LM. Greedy is the default; beam search uses
//! length-normalized log probabilities with lexicographic tie breaking.

use serde::{Deserialize, Serialize};

use crate::corpus::{Vocabulary, BOS_ID, EOS_ID};
use crate::graph::Graph;
use crate::lm::{lm_forward, LmConfig, LmHandles};
use crate::mapper::{map_embedding, MapperConfig, MapperHandles};
use crate::store::ParameterStore;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Greedy,
    Beam { width: usize },
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeConfig {
    pub strategy: Strategy,
    pub max_len: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            strategy: Strategy::Greedy,
            max_len: 64,
        }
    }
}

fn check_budget(lm_config: &LmConfig, mapper_config: &MapperConfig, max_len: usize) -> Result<()> {
    let needed = mapper_config.prefix_length + 1 + max_len;
    if needed > lm_config.max_seq {
        return Err(Error::Length {
            needed,
            max_seq: lm_config.max_seq,
            context: " (prefix_length + 1 + max_len)".into(),
        });
    }
    Ok(())
}

/// Log-softmax of the last logits row for the sequence so far.
fn next_token_logprobs(
    store: &ParameterStore,
    lm_config: &LmConfig,
    mapper_config: &MapperConfig,
    embedding: &[f32],
    ids: &[usize],
) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let mh = MapperHandles::bind(&mut g, store, mapper_config)?;
    let lh = LmHandles::bind(&mut g, store, lm_config)?;
    let prefix = map_embedding(&mut g, &mh, mapper_config, embedding)?;
    let out = lm_forward(&mut g, &lh, lm_config, Some(prefix), ids)?;
    let logits = g.value(out.logits);
    let v = logits.cols();
    let last = &logits.data[(logits.rows() - 1) * v..];
    let max = last.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_z = last.iter().map(|x| (x - max).exp()).sum::<f64>().ln() + max;
    Ok(last.iter().map(|x| x - log_z).collect())
}

/// Append the argmax token each step (ties broken by lowest id); stop at EOS
/// or after max_len tokens.
pub fn greedy_decode(
    store: &ParameterStore,
    lm_config: &LmConfig,
    mapper_config: &MapperConfig,
    vocab: &Vocabulary,
    embedding: &[f32],
    config: &DecodeConfig,
) -> Result<String> {
    check_budget(lm_config, mapper_config, config.max_len)?;
    let mut ids = vec![BOS_ID];
    for _ in 0..config.max_len {
        let logprobs = next_token_logprobs(store, lm_config, mapper_config, embedding, &ids)?;
        let best = logprobs
            .iter()
            .enumerate()
            .max_by(|(ia, a), (ib, b)| a.partial_cmp(b).unwrap().then(ib.cmp(ia)))
            .map(|(i, _)| i)
            .expect("non-empty vocab");
        if best == EOS_ID {
            break;
        }
        ids.push(best);
    }
    Ok(vocab.decode(&ids))
}

#[derive(Clone, Debug)]
struct Hypothesis {
    ids: Vec<usize>,
    sum_logprob: f64,
}

impl Hypothesis {
    /// Length-normalized score; generated token count excludes BOS.
    fn score(&self) -> f64 {
        let n = self.ids.len().saturating_sub(1).max(1);
        self.sum_logprob / n as f64
    }
}

fn better(a: &Hypothesis, b: &Hypothesis) -> std::cmp::Ordering {
    a.score()
        .partial_cmp(&b.score())
        .unwrap()
        .then_with(|| b.ids.cmp(&a.ids))
}

/// Length-normalized beam search. Hypotheses retire at EOS; the best retired
/// (or best live at max_len) wins. Ties break lexicographically by token ids.
pub fn beam_decode(
    store: &ParameterStore,
    lm_config: &LmConfig,
    mapper_config: &MapperConfig,
    vocab: &Vocabulary,
    embedding: &[f32],
    config: &DecodeConfig,
) -> Result<String> {
    let width = match config.strategy {
        Strategy::Beam { width } if width >= 1 => width,
        Strategy::Beam { width } => {
            return Err(Error::Config(format!("beam width must be >= 1, got {width}")))
        }
        Strategy::Greedy => 1,
    };
    check_budget(lm_config, mapper_config, config.max_len)?;

    let mut live = vec![Hypothesis {
        ids: vec![BOS_ID],
        sum_logprob: 0.0,
    }];
    let mut completed: Vec<Hypothesis> = Vec::new();
    for _ in 0..config.max_len {
        let mut candidates: Vec<Hypothesis> = Vec::new();
        for hyp in &live {
            let logprobs =
                next_token_logprobs(store, lm_config, mapper_config, embedding, &hyp.ids)?;
            for (tok, lp) in logprobs.iter().enumerate() {
                let mut ids = hyp.ids.clone();
                ids.push(tok);
                candidates.push(Hypothesis {
                    ids,
                    sum_logprob: hyp.sum_logprob + lp,
                });
            }
        }
        candidates.sort_by(|a, b| better(b, a));
        candidates.truncate(width);
        live = Vec::new();
        for cand in candidates {
            if *cand.ids.last().unwrap() == EOS_ID {
                completed.push(cand);
            } else {
                live.push(cand);
            }
        }
        if live.is_empty() {
            break;
        }
    }
    let best = completed
        .into_iter()
        .chain(live)
        .max_by(|a, b| better(a, b))
        .expect("at least one hypothesis");
    Ok(vocab.decode(&best.ids))
}

/// Decode with the configured strategy.
pub fn decode(
    store: &ParameterStore,
    lm_config: &LmConfig,
    mapper_config: &MapperConfig,
    vocab: &Vocabulary,
    embedding: &[f32],
    config: &DecodeConfig,
) -> Result<String> {
    match config.strategy {
        Strategy::Greedy => {
            greedy_decode(store, lm_config, mapper_config, vocab, embedding, config)
        }
        Strategy::Beam { .. } => {
            beam_decode(store, lm_config, mapper_config, vocab, embedding, config)
        }
    }
}
