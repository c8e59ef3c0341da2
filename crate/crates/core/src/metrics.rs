//! Corpus-level BLEU-1..4: modified n-gram precision with per-segment
//! clipping, summed numerators/denominators over the corpus, corpus-level
//! brevity penalty, single reference, no smoothing.

use std::collections::HashMap;

use serde::Serialize;

use crate::corpus::{preprocess_report, EmbeddingRecord, Vocabulary};
use crate::generate::{decode, DecodeConfig};
use crate::lm::LmConfig;
use crate::mapper::MapperConfig;
use crate::store::ParameterStore;
use crate::{Error, Result};

pub const MAX_ORDER: usize = 4;

#[derive(Clone, Debug, Serialize)]
pub struct BleuReport {
    /// Modified precisions p1..p4.
    pub precisions: [f64; MAX_ORDER],
    pub brevity_penalty: f64,
    /// BLEU-1..BLEU-4.
    pub bleu: [f64; MAX_ORDER],
    pub hyp_len: usize,
    pub ref_len: usize,
}

/// Multiset of contiguous n-grams; sequences shorter than n give an empty map.
pub fn ngram_counts<'a>(tokens: &'a [&'a str], n: usize) -> HashMap<Vec<&'a str>, usize> {
    let mut counts = HashMap::new();
    if n == 0 || tokens.len() < n {
        return counts;
    }
    for window in tokens.windows(n) {
        *counts.entry(window.to_vec()).or_insert(0) += 1;
    }
    counts
}

/// Corpus BLEU over (hypothesis, reference) pairs.
pub fn corpus_bleu(pairs: &[(String, String)]) -> Result<BleuReport> {
    if pairs.is_empty() {
        return Err(Error::InvalidBatch("empty evaluation corpus".into()));
    }
    let mut numer = [0usize; MAX_ORDER];
    let mut denom = [0usize; MAX_ORDER];
    let mut hyp_len = 0usize;
    let mut ref_len = 0usize;
    for (hyp, refr) in pairs {
        let h: Vec<&str> = hyp.split_whitespace().collect();
        let r: Vec<&str> = refr.split_whitespace().collect();
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=MAX_ORDER {
            let hc = ngram_counts(&h, n);
            let rc = ngram_counts(&r, n);
            for (gram, count) in &hc {
                let clipped = (*count).min(rc.get(gram).copied().unwrap_or(0));
                numer[n - 1] += clipped;
                denom[n - 1] += count;
            }
        }
    }

    let mut precisions = [0.0f64; MAX_ORDER];
    for n in 0..MAX_ORDER {
        if denom[n] > 0 {
            precisions[n] = numer[n] as f64 / denom[n] as f64;
        }
    }
    let brevity_penalty = if hyp_len == 0 {
        0.0
    } else if hyp_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    let mut bleu = [0.0f64; MAX_ORDER];
    for n in 0..MAX_ORDER {
        if precisions[..=n].iter().all(|&p| p > 0.0) && hyp_len > 0 {
            let log_mean =
                precisions[..=n].iter().map(|p| p.ln()).sum::<f64>() / (n + 1) as f64;
            bleu[n] = brevity_penalty * log_mean.exp();
        }
    }
    Ok(BleuReport {
        precisions,
        brevity_penalty,
        bleu,
        hyp_len,
        ref_len,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct RecordOutput {
    pub id: String,
    pub hypothesis: String,
    pub reference: String,
}

/// Decode every record, preprocess both sides identically, and score.
pub fn evaluate_split(
    store: &ParameterStore,
    lm_config: &LmConfig,
    mapper_config: &MapperConfig,
    vocab: &Vocabulary,
    records: &[EmbeddingRecord],
    decode_config: &DecodeConfig,
) -> Result<(BleuReport, Vec<RecordOutput>)> {
    let mut outputs = Vec::with_capacity(records.len());
    let mut pairs = Vec::with_capacity(records.len());
    for rec in records {
        let raw = decode(
            store,
            lm_config,
            mapper_config,
            vocab,
            &rec.embedding,
            decode_config,
        )?;
        let hypothesis = preprocess_report(&raw).unwrap_or_default();
        let reference = preprocess_report(&rec.report).unwrap_or_default();
        pairs.push((hypothesis.clone(), reference.clone()));
        outputs.push(RecordOutput {
            id: rec.id.clone(),
            hypothesis,
            reference,
        });
    }
    Ok((corpus_bleu(&pairs)?, outputs))
}
