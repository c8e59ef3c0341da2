//! Miniature decoder-only causal transformer: pretrainable on corpus text,
//! then frozen and conditioned through prefix vectors.
//!
//! Pre-norm blocks, GELU MLP, learned positional embeddings, output
//! projection tied to the token embedding. Prefix rows enter the sequence
//! as-is (no token embedding) and receive positional embeddings like
//! ordinary tokens.

use rand::{seq::SliceRandom, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Vocabulary;
use crate::graph::{Graph, NodeId, Value};
use crate::store::{AdamHyper, ParameterStore};
use crate::tensor::Tensor;
use crate::{Error, Result};

pub const MLP_RATIO: usize = 4;
pub const LN_EPS: f64 = 1e-5;
const INIT_STD: f32 = 0.02;
const MASK_NEG: f64 = -1e9;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LmConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_seq: usize,
}

impl Default for LmConfig {
    fn default() -> Self {
        LmConfig {
            vocab_size: 0,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            max_seq: 128,
        }
    }
}

impl LmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.vocab_size == 0 || self.max_seq == 0 {
            return Err(Error::Config(format!(
                "lm config extents must be positive: {self:?}"
            )));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    /// Element count of every registered "lm." tensor.
    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        self.vocab_size * d + self.max_seq * d + self.n_layers * block_param_count(d) + 2 * d
    }
}

pub(crate) fn block_param_count(d: usize) -> usize {
    let h = MLP_RATIO * d;
    // attention: 4 projections + biases; 2 layer norms; MLP in/out + biases
    4 * (d * d + d) + 2 * 2 * d + (d * h + h) + (h * d + d)
}

/// Register transformer block tensors under `{prefix}block{i}.`.
pub(crate) fn init_block<R: rand::Rng>(
    store: &mut ParameterStore,
    prefix: &str,
    i: usize,
    d: usize,
    rng: &mut R,
) {
    let h = MLP_RATIO * d;
    let p = format!("{prefix}block{i}");
    store.insert(&format!("{p}.ln1.gamma"), Tensor::full(vec![d], 1.0));
    store.insert(&format!("{p}.ln1.beta"), Tensor::zeros(vec![d]));
    for w in ["wq", "wk", "wv", "wo"] {
        store.insert(
            &format!("{p}.attn.{w}"),
            Tensor::randn(vec![d, d], INIT_STD, rng),
        );
    }
    for b in ["bq", "bk", "bv", "bo"] {
        store.insert(&format!("{p}.attn.{b}"), Tensor::zeros(vec![d]));
    }
    store.insert(&format!("{p}.ln2.gamma"), Tensor::full(vec![d], 1.0));
    store.insert(&format!("{p}.ln2.beta"), Tensor::zeros(vec![d]));
    store.insert(&format!("{p}.mlp.w1"), Tensor::randn(vec![d, h], INIT_STD, rng));
    store.insert(&format!("{p}.mlp.b1"), Tensor::zeros(vec![h]));
    store.insert(&format!("{p}.mlp.w2"), Tensor::randn(vec![h, d], INIT_STD, rng));
    store.insert(&format!("{p}.mlp.b2"), Tensor::zeros(vec![d]));
}

/// Seeded initialization of all "lm." tensors into the store.
pub fn lm_init(store: &mut ParameterStore, config: &LmConfig, seed: u64) -> Result<()> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    store.insert(
        "lm.tok_emb",
        Tensor::randn(vec![config.vocab_size, config.d_model], INIT_STD, &mut rng),
    );
    store.insert(
        "lm.pos_emb",
        Tensor::randn(vec![config.max_seq, config.d_model], INIT_STD, &mut rng),
    );
    for i in 0..config.n_layers {
        init_block(store, "lm.", i, config.d_model, &mut rng);
    }
    store.insert("lm.ln_f.gamma", Tensor::full(vec![config.d_model], 1.0));
    store.insert("lm.ln_f.beta", Tensor::zeros(vec![config.d_model]));
    Ok(())
}

pub(crate) struct BlockHandles {
    ln1: (NodeId, NodeId),
    wq: NodeId,
    bq: NodeId,
    wk: NodeId,
    bk: NodeId,
    wv: NodeId,
    bv: NodeId,
    wo: NodeId,
    bo: NodeId,
    ln2: (NodeId, NodeId),
    w1: NodeId,
    b1: NodeId,
    w2: NodeId,
    b2: NodeId,
}

impl BlockHandles {
    pub(crate) fn bind(g: &mut Graph, store: &ParameterStore, prefix: &str, i: usize) -> Result<Self> {
        let p = format!("{prefix}block{i}");
        Ok(BlockHandles {
            ln1: (
                g.param(store, &format!("{p}.ln1.gamma"))?,
                g.param(store, &format!("{p}.ln1.beta"))?,
            ),
            wq: g.param(store, &format!("{p}.attn.wq"))?,
            bq: g.param(store, &format!("{p}.attn.bq"))?,
            wk: g.param(store, &format!("{p}.attn.wk"))?,
            bk: g.param(store, &format!("{p}.attn.bk"))?,
            wv: g.param(store, &format!("{p}.attn.wv"))?,
            bv: g.param(store, &format!("{p}.attn.bv"))?,
            wo: g.param(store, &format!("{p}.attn.wo"))?,
            bo: g.param(store, &format!("{p}.attn.bo"))?,
            ln2: (
                g.param(store, &format!("{p}.ln2.gamma"))?,
                g.param(store, &format!("{p}.ln2.beta"))?,
            ),
            w1: g.param(store, &format!("{p}.mlp.w1"))?,
            b1: g.param(store, &format!("{p}.mlp.b1"))?,
            w2: g.param(store, &format!("{p}.mlp.w2"))?,
            b2: g.param(store, &format!("{p}.mlp.b2"))?,
        })
    }

    /// Pre-norm residual block. Attention probability nodes are pushed into
    /// `probs_sink` so callers can inspect the distributions.
    pub(crate) fn forward(
        &self,
        g: &mut Graph,
        x: NodeId,
        n_heads: usize,
        causal_mask: Option<NodeId>,
        probs_sink: &mut Vec<NodeId>,
    ) -> Result<NodeId> {
        let d = g.value(x).cols();
        let dh = d / n_heads;
        let xn = g.layer_norm(x, self.ln1.0, self.ln1.1, LN_EPS)?;
        let q = g.matmul(xn, self.wq)?;
        let q = g.add_bias(q, self.bq)?;
        let k = g.matmul(xn, self.wk)?;
        let k = g.add_bias(k, self.bk)?;
        let v = g.matmul(xn, self.wv)?;
        let v = g.add_bias(v, self.bv)?;

        // concat(ctx_h)·Wo computed as a sum of per-head projections
        let mut attn_out: Option<NodeId> = None;
        for h in 0..n_heads {
            let qh = g.slice_cols(q, h * dh, dh)?;
            let kh = g.slice_cols(k, h * dh, dh)?;
            let vh = g.slice_cols(v, h * dh, dh)?;
            let scores = g.matmul_nt(qh, kh)?;
            let mut scores = g.scale(scores, 1.0 / (dh as f64).sqrt())?;
            if let Some(mask) = causal_mask {
                scores = g.add(scores, mask)?;
            }
            let probs = g.softmax_rows(scores)?;
            probs_sink.push(probs);
            let ctx = g.matmul(probs, vh)?;
            let wo_h = g.slice_rows(self.wo, h * dh, dh)?;
            let proj = g.matmul(ctx, wo_h)?;
            attn_out = Some(match attn_out {
                None => proj,
                Some(acc) => g.add(acc, proj)?,
            });
        }
        let attn = g.add_bias(attn_out.expect("n_heads >= 1"), self.bo)?;
        let x = g.add(x, attn)?;

        let xn = g.layer_norm(x, self.ln2.0, self.ln2.1, LN_EPS)?;
        let m = g.matmul(xn, self.w1)?;
        let m = g.add_bias(m, self.b1)?;
        let m = g.gelu(m)?;
        let m = g.matmul(m, self.w2)?;
        let m = g.add_bias(m, self.b2)?;
        g.add(x, m)
    }
}

/// Parameter leaves for one forward/backward pass; bind once per graph.
pub struct LmHandles {
    pub(crate) tok_emb: NodeId,
    pos_emb: NodeId,
    blocks: Vec<BlockHandles>,
    ln_f: (NodeId, NodeId),
}

impl LmHandles {
    pub fn bind(g: &mut Graph, store: &ParameterStore, config: &LmConfig) -> Result<Self> {
        Ok(LmHandles {
            tok_emb: g.param(store, "lm.tok_emb")?,
            pos_emb: g.param(store, "lm.pos_emb")?,
            blocks: (0..config.n_layers)
                .map(|i| BlockHandles::bind(g, store, "lm.", i))
                .collect::<Result<_>>()?,
            ln_f: (
                g.param(store, "lm.ln_f.gamma")?,
                g.param(store, "lm.ln_f.beta")?,
            ),
        })
    }
}

pub struct LmOutput {
    /// Logits at every position, shape (p+t)×vocab_size.
    pub logits: NodeId,
    /// Attention probability nodes across layers and heads.
    pub attn_probs: Vec<NodeId>,
}

fn causal_mask(g: &mut Graph, s: usize) -> Result<NodeId> {
    let mut data = vec![0.0f64; s * s];
    for i in 0..s {
        for j in (i + 1)..s {
            data[i * s + j] = MASK_NEG;
        }
    }
    g.constant_value(Value::new(vec![s, s], data))
}

/// Causal forward pass. The prefix rows (if any) are used as-is; positional
/// embeddings span the whole prefix+token sequence.
pub fn lm_forward(
    g: &mut Graph,
    handles: &LmHandles,
    config: &LmConfig,
    prefix: Option<NodeId>,
    token_ids: &[usize],
) -> Result<LmOutput> {
    let p = prefix.map_or(0, |id| g.value(id).rows());
    let s = p + token_ids.len();
    if s > config.max_seq {
        return Err(Error::Length {
            needed: s,
            max_seq: config.max_seq,
            context: String::new(),
        });
    }
    if s == 0 {
        return Err(Error::InvalidBatch("empty input sequence".into()));
    }

    let tokens = g.gather(handles.tok_emb, token_ids)?;
    let seq = match prefix {
        Some(pfx) if token_ids.is_empty() => pfx,
        Some(pfx) => g.concat_rows(pfx, tokens)?,
        None => tokens,
    };
    let pos = g.slice_rows(handles.pos_emb, 0, s)?;
    let mut x = g.add(seq, pos)?;

    let mask = causal_mask(g, s)?;
    let mut attn_probs = Vec::new();
    for block in &handles.blocks {
        x = block.forward(g, x, config.n_heads, Some(mask), &mut attn_probs)?;
    }
    let x = g.layer_norm(x, handles.ln_f.0, handles.ln_f.1, LN_EPS)?;
    let logits = g.matmul_nt(x, handles.tok_emb)?;
    Ok(LmOutput { logits, attn_probs })
}

/// Next-token pretraining over report texts (no prefix). Returns per-epoch
/// mean training loss. All "lm." parameters train; the caller decides what
/// to freeze afterwards.
pub fn lm_pretrain(
    store: &mut ParameterStore,
    vocab: &Vocabulary,
    reports: &[String],
    config: &LmConfig,
    epochs: usize,
    batch_size: usize,
    hyper: &AdamHyper,
    seed: u64,
) -> Result<Vec<f64>> {
    if reports.is_empty() {
        return Err(Error::InvalidCorpus("empty pretraining corpus".into()));
    }
    store.set_frozen(Vec::new());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..reports.len()).collect();
    let mut log = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0f64;
        let mut batches = 0usize;
        for chunk in order.chunks(batch_size.max(1)) {
            let mut g = Graph::new();
            let handles = LmHandles::bind(&mut g, store, config)?;
            let mut total: Option<NodeId> = None;
            for &ri in chunk {
                let ids = vocab.encode(&reports[ri]);
                let inputs = &ids[..ids.len() - 1];
                let targets = &ids[1..];
                let out = lm_forward(&mut g, &handles, config, None, inputs)?;
                let mask = vec![true; targets.len()];
                let loss = g.cross_entropy(out.logits, targets, &mask)?;
                total = Some(match total {
                    None => loss,
                    Some(acc) => g.add(acc, loss)?,
                });
            }
            let loss = g.scale(total.expect("non-empty chunk"), 1.0 / chunk.len() as f64)?;
            g.backward(loss)?;
            store.zero_grad();
            g.accumulate_param_grads(store)?;
            store.adam_step(hyper)?;
            epoch_loss += g.value(loss).data[0];
            batches += 1;
        }
        log.push(epoch_loss / batches as f64);
    }
    Ok(log)
}

/// The `p` rarest tokens of an encoded report, kept in report order and
/// padded with PAD. Vocabulary ids are frequency-ranked (rarer = larger), so
/// rarity is just the id. Reserved ids never qualify.
pub fn salient_ids(encoded: &[usize], p: usize) -> Vec<usize> {
    let mut positions: Vec<usize> = (0..encoded.len())
        .filter(|&i| encoded[i] >= crate::corpus::RESERVED)
        .collect();
    positions.sort_by_key(|&i| std::cmp::Reverse(encoded[i]));
    positions.truncate(p);
    positions.sort_unstable();
    let mut out: Vec<usize> = positions.iter().map(|&i| encoded[i]).collect();
    out.resize(p, crate::corpus::PAD_ID);
    out
}

/// Next-token pretraining with each report's own salient words embedded at
/// the prefix positions (derived from the text alone). The model learns to
/// read prefix rows, which is what later conditioning relies on. Loss is
/// taken over report positions only.
pub fn lm_pretrain_prefixed(
    store: &mut ParameterStore,
    vocab: &Vocabulary,
    reports: &[String],
    config: &LmConfig,
    prefix_length: usize,
    epochs: usize,
    batch_size: usize,
    hyper: &AdamHyper,
    seed: u64,
) -> Result<Vec<f64>> {
    if reports.is_empty() {
        return Err(Error::InvalidCorpus("empty pretraining corpus".into()));
    }
    store.set_frozen(Vec::new());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..reports.len()).collect();
    let mut log = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0f64;
        let mut batches = 0usize;
        for chunk in order.chunks(batch_size.max(1)) {
            let mut g = Graph::new();
            let handles = LmHandles::bind(&mut g, store, config)?;
            let mut total: Option<NodeId> = None;
            for &ri in chunk {
                let ids = vocab.encode(&reports[ri]);
                let inputs = &ids[..ids.len() - 1];
                let keywords = salient_ids(&ids, prefix_length);
                let prefix = g.gather(handles.tok_emb, &keywords)?;
                let out = lm_forward(&mut g, &handles, config, Some(prefix), inputs)?;
                let mut targets = vec![0usize; prefix_length];
                targets.extend_from_slice(&ids[1..]);
                let mut mask = vec![false; prefix_length];
                mask.extend(std::iter::repeat(true).take(inputs.len()));
                let loss = g.cross_entropy(out.logits, &targets, &mask)?;
                total = Some(match total {
                    None => loss,
                    Some(acc) => g.add(acc, loss)?,
                });
            }
            let loss = g.scale(total.expect("non-empty chunk"), 1.0 / chunk.len() as f64)?;
            g.backward(loss)?;
            store.zero_grad();
            g.accumulate_param_grads(store)?;
            store.adam_step(hyper)?;
            epoch_loss += g.value(loss).data[0];
            batches += 1;
        }
        log.push(epoch_loss / batches as f64);
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;

    fn toy_config(vocab_size: usize) -> LmConfig {
        LmConfig {
            vocab_size,
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            max_seq: 32,
        }
    }

    fn init_store(config: &LmConfig, seed: u64) -> ParameterStore {
        let mut store = ParameterStore::new();
        lm_init(&mut store, config, seed).unwrap();
        store
    }

    #[test]
    fn init_deterministic() {
        let c = toy_config(11);
        let a = init_store(&c, 5);
        let b = init_store(&c, 5);
        for name in a.names() {
            assert_eq!(a.get(name).unwrap().data, b.get(name).unwrap().data);
        }
    }

    #[test]
    fn invalid_head_divisibility() {
        let c = LmConfig {
            vocab_size: 10,
            d_model: 64,
            n_layers: 1,
            n_heads: 5,
            max_seq: 16,
        };
        let mut store = ParameterStore::new();
        assert!(matches!(lm_init(&mut store, &c, 0), Err(Error::Config(_))));
    }

    #[test]
    fn param_count_matches_enumeration() {
        let c = toy_config(11);
        let store = init_store(&c, 1);
        assert_eq!(store.total_param_count(), c.param_count());
    }

    #[test]
    fn forward_shapes() {
        let c = toy_config(9);
        let store = init_store(&c, 2);
        let mut g = Graph::new();
        let h = LmHandles::bind(&mut g, &store, &c).unwrap();
        let out = lm_forward(&mut g, &h, &c, None, &[1, 4, 5]).unwrap();
        assert_eq!(g.value(out.logits).shape, vec![3, 9]);
    }

    #[test]
    fn forward_with_prefix_shapes() {
        let c = toy_config(9);
        let store = init_store(&c, 2);
        let mut g = Graph::new();
        let h = LmHandles::bind(&mut g, &store, &c).unwrap();
        let pfx = g
            .constant(&Tensor::randn(
                vec![4, c.d_model],
                0.5,
                &mut ChaCha8Rng::seed_from_u64(0),
            ))
            .unwrap();
        let out = lm_forward(&mut g, &h, &c, Some(pfx), &[1, 2]).unwrap();
        assert_eq!(g.value(out.logits).shape, vec![6, 9]);
    }

    #[test]
    fn sequence_overflow_rejected() {
        let c = toy_config(9);
        let store = init_store(&c, 2);
        let mut g = Graph::new();
        let h = LmHandles::bind(&mut g, &store, &c).unwrap();
        let ids = vec![1usize; c.max_seq + 1];
        assert!(matches!(
            lm_forward(&mut g, &h, &c, None, &ids),
            Err(Error::Length { .. })
        ));
    }

    #[test]
    fn causal_mask_blocks_future_bitwise() {
        let c = toy_config(9);
        let store = init_store(&c, 3);
        let ids_a = [1usize, 4, 7, 2, 5];
        let mut ids_b = ids_a;
        ids_b[4] = 8; // mutate last token

        let run = |ids: &[usize]| {
            let mut g = Graph::new();
            let h = LmHandles::bind(&mut g, &store, &c).unwrap();
            let out = lm_forward(&mut g, &h, &c, None, ids).unwrap();
            g.value(out.logits).data.clone()
        };
        let la = run(&ids_a);
        let lb = run(&ids_b);
        for pos in 0..4 {
            for v in 0..9 {
                assert_eq!(
                    la[pos * 9 + v].to_bits(),
                    lb[pos * 9 + v].to_bits(),
                    "logit changed at earlier position {pos}"
                );
            }
        }
    }

    #[test]
    fn attention_rows_are_distributions() {
        let c = toy_config(9);
        let store = init_store(&c, 4);
        let mut g = Graph::new();
        let h = LmHandles::bind(&mut g, &store, &c).unwrap();
        let out = lm_forward(&mut g, &h, &c, None, &[1, 2, 3, 4]).unwrap();
        assert!(!out.attn_probs.is_empty());
        for &p in &out.attn_probs {
            let v = g.value(p);
            let n = v.cols();
            for r in 0..v.rows() {
                let sum: f64 = v.data[r * n..(r + 1) * n].iter().sum();
                assert!((sum - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn untrained_loss_near_uniform() {
        let c = toy_config(50);
        let store = init_store(&c, 5);
        let mut g = Graph::new();
        let h = LmHandles::bind(&mut g, &store, &c).unwrap();
        let ids = [1usize, 10, 20, 30, 40, 2];
        let out = lm_forward(&mut g, &h, &c, None, &ids[..5]).unwrap();
        let loss = g
            .cross_entropy(out.logits, &ids[1..], &[true; 5])
            .unwrap();
        let expect = (50f64).ln();
        let got = g.value(loss).data[0];
        assert!(
            (got - expect).abs() / expect < 0.05,
            "loss {got} vs ln V {expect}"
        );
    }

    #[test]
    fn distinct_prefixes_change_logits() {
        let c = toy_config(9);
        let store = init_store(&c, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let p = 3usize;
        let mut differing = 0;
        for _ in 0..100 {
            let a = Tensor::randn(vec![p, c.d_model], 1.0, &mut rng);
            let b = Tensor::randn(vec![p, c.d_model], 1.0, &mut rng);
            let run = |t: &Tensor| {
                let mut g = Graph::new();
                let h = LmHandles::bind(&mut g, &store, &c).unwrap();
                let pfx = g.constant(t).unwrap();
                let out = lm_forward(&mut g, &h, &c, Some(pfx), &[1, 2]).unwrap();
                // logits at position p (first token position)
                g.value(out.logits).data[p * 9..(p + 1) * 9].to_vec()
            };
            if run(&a) != run(&b) {
                differing += 1;
            }
        }
        assert!(differing >= 99, "only {differing}/100 prefixes changed logits");
    }

    #[test]
    fn grad_check_full_lm() {
        let c = LmConfig {
            vocab_size: 7,
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            max_seq: 8,
        };
        let mut store = init_store(&c, 8);
        let ids = [1usize, 4, 5, 2];
        let worst = grad_check(
            |s: &mut ParameterStore| {
                let mut g = Graph::new();
                let h = LmHandles::bind(&mut g, s, &c)?;
                let out = lm_forward(&mut g, &h, &c, None, &ids[..3])?;
                let loss = g.cross_entropy(out.logits, &ids[1..], &[true; 3])?;
                g.backward(loss)?;
                g.accumulate_param_grads(s)?;
                Ok(g.value(loss).data[0])
            },
            &mut store,
            60,
            // 1e-3 is too coarse here: central-difference truncation on
            // high-curvature coordinates alone exceeds the 1e-4 bound
            1e-4,
            99,
        )
        .unwrap();
        assert!(worst < 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn pretrain_reduces_loss() {
        let c = toy_config(0); // vocab filled below
        let reports = vec![
            "the lungs are clear .".to_string(),
            "no acute disease .".to_string(),
        ];
        let vocab = Vocabulary::build(&reports, 1).unwrap();
        let c = LmConfig {
            vocab_size: vocab.size(),
            ..c
        };
        let mut store = init_store(&c, 9);
        let log = lm_pretrain(
            &mut store,
            &vocab,
            &reports,
            &c,
            5,
            2,
            &AdamHyper::default(),
            1,
        )
        .unwrap();
        assert_eq!(log.len(), 5);
        assert!(log.last().unwrap() < &log[0], "loss log {log:?}");
    }

    #[test]
    fn pretrain_zero_epochs_keeps_init() {
        let reports = vec!["a b .".to_string()];
        let vocab = Vocabulary::build(&reports, 1).unwrap();
        let c = LmConfig {
            vocab_size: vocab.size(),
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            max_seq: 16,
        };
        let mut store = init_store(&c, 10);
        let before: Vec<Vec<f32>> = store
            .names()
            .map(|n| store.get(n).unwrap().data.clone())
            .collect();
        let log = lm_pretrain(
            &mut store,
            &vocab,
            &reports,
            &c,
            0,
            1,
            &AdamHyper::default(),
            1,
        )
        .unwrap();
        assert!(log.is_empty());
        let after: Vec<Vec<f32>> = store
            .names()
            .map(|n| store.get(n).unwrap().data.clone())
            .collect();
        assert_eq!(before, after);
    }

    #[test]
    fn pretrain_deterministic() {
        let reports = vec!["a b c .".to_string(), "c b a .".to_string()];
        let vocab = Vocabulary::build(&reports, 1).unwrap();
        let c = LmConfig {
            vocab_size: vocab.size(),
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            max_seq: 16,
        };
        let run = || {
            let mut store = init_store(&c, 11);
            lm_pretrain(
                &mut store,
                &vocab,
                &reports,
                &c,
                3,
                2,
                &AdamHyper::default(),
                2,
            )
            .unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn salient_ids_picks_rarest_in_report_order() {
        // vocab ids are frequency-ranked; larger id = rarer token
        let encoded = vec![1, 9, 4, 7, 5, 2]; // BOS, rare, common, rare, mid, EOS
        assert_eq!(salient_ids(&encoded, 2), vec![9, 7]);
        assert_eq!(salient_ids(&encoded, 3), vec![9, 7, 5]);
        // padding with PAD when the report is short
        assert_eq!(salient_ids(&encoded, 5), vec![9, 4, 7, 5, 0]);
        // reserved ids are never selected
        assert_eq!(salient_ids(&[1, 2], 2), vec![0, 0]);
    }

    #[test]
    fn prefixed_pretrain_reduces_loss_and_is_deterministic() {
        let reports = vec![
            "findings consistent with edema .".to_string(),
            "findings consistent with opacity .".to_string(),
            "findings consistent with edema and opacity .".to_string(),
        ];
        let vocab = Vocabulary::build(&reports, 1).unwrap();
        let c = LmConfig {
            vocab_size: vocab.size(),
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            max_seq: 32,
        };
        let run = || {
            let mut store = init_store(&c, 12);
            lm_pretrain_prefixed(
                &mut store,
                &vocab,
                &reports,
                &c,
                2,
                5,
                2,
                &AdamHyper::default(),
                3,
            )
            .unwrap()
        };
        let log = run();
        assert_eq!(log.len(), 5);
        assert!(log.last().unwrap() < &log[0], "loss log {log:?}");
        assert_eq!(log, run());
    }
}
