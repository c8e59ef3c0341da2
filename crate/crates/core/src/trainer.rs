//! End-to-end mapper training with the freeze contract, plus the binary
//! checkpoint format shared by pretraining and training.
//!
//! Checkpoint layout: 8-byte magic "PFXBRDG1", u32 little-endian header
//! length, UTF-8 JSON header {version, configs, vocab, manifest}, then a
//! contiguous little-endian f32 payload.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::{seq::SliceRandom, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{EmbeddingRecord, SplitSet, Vocabulary};
use crate::graph::{Graph, NodeId};
use crate::lm::{lm_forward, LmConfig, LmHandles};
use crate::mapper::{map_embedding, MapperConfig, MapperHandles};
use crate::store::{AdamHyper, ParameterStore};
use crate::tensor::Tensor;
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"PFXBRDG1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrainMode {
    #[serde(rename = "prefix")]
    PrefixTuning,
    #[serde(rename = "finetune")]
    FineTuning,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamHyper,
    pub seed: u64,
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: TrainMode::PrefixTuning,
            epochs: 30,
            batch_size: 16,
            adam: AdamHyper::default(),
            seed: 0,
            shuffle: true,
        }
    }
}

/// Frozen name prefixes for a training mode: prefix tuning freezes the whole
/// LM; fine-tuning trains everything. The mapper is trainable in both.
pub fn freeze_mask(mode: TrainMode) -> Vec<String> {
    match mode {
        TrainMode::PrefixTuning => vec!["lm.".to_string()],
        TrainMode::FineTuning => Vec::new(),
    }
}

/// Mean conditioned teacher-forcing loss over a batch. Prefix positions are
/// masked out of the loss; each token position predicts the next token (EOS
/// included). With `train` set, runs backward and accumulates gradients.
pub fn loss_step(
    store: &mut ParameterStore,
    lm_config: &LmConfig,
    mapper_config: &MapperConfig,
    vocab: &Vocabulary,
    batch: &[EmbeddingRecord],
    train: bool,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::InvalidBatch("empty batch".into()));
    }
    let p = mapper_config.prefix_length;
    let mut g = Graph::new();
    let mh = MapperHandles::bind(&mut g, store, mapper_config)?;
    let lh = LmHandles::bind(&mut g, store, lm_config)?;
    let mut total: Option<NodeId> = None;
    for rec in batch {
        let ids = vocab.encode(&rec.report);
        let inputs = &ids[..ids.len() - 1];
        if p + inputs.len() > lm_config.max_seq {
            return Err(Error::Length {
                needed: p + inputs.len(),
                max_seq: lm_config.max_seq,
                context: format!(" (record {})", rec.id),
            });
        }
        let prefix = map_embedding(&mut g, &mh, mapper_config, &rec.embedding)?;
        let out = lm_forward(&mut g, &lh, lm_config, Some(prefix), inputs)?;
        let mut targets = vec![0usize; p];
        targets.extend_from_slice(&ids[1..]);
        let mut mask = vec![false; p];
        mask.extend(std::iter::repeat(true).take(inputs.len()));
        let loss = g.cross_entropy(out.logits, &targets, &mask)?;
        total = Some(match total {
            None => loss,
            Some(acc) => g.add(acc, loss)?,
        });
    }
    let loss = g.scale(total.expect("non-empty batch"), 1.0 / batch.len() as f64)?;
    if train {
        g.backward(loss)?;
        g.accumulate_param_grads(store)?;
    }
    Ok(g.value(loss).data[0])
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

/// Train the mapper (and, in fine-tuning mode, the LM) on the train split.
/// The store must already hold initialized "lm." and "mapper." tensors.
pub fn train(
    splits: &SplitSet,
    store: &mut ParameterStore,
    lm_config: &LmConfig,
    mapper_config: &MapperConfig,
    vocab: &Vocabulary,
    config: &TrainConfig,
) -> Result<Vec<EpochMetrics>> {
    if splits.train.is_empty() && config.epochs > 0 {
        return Err(Error::InvalidCorpus("empty train split".into()));
    }
    store.set_frozen(freeze_mask(config.mode));
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..splits.train.len()).collect();
    let mut log = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        if config.shuffle {
            order.shuffle(&mut rng);
        }
        let mut train_loss = 0.0f64;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size.max(1)) {
            let batch: Vec<EmbeddingRecord> =
                chunk.iter().map(|&i| splits.train[i].clone()).collect();
            store.zero_grad();
            train_loss += loss_step(store, lm_config, mapper_config, vocab, &batch, true)?;
            store.adam_step(&config.adam)?;
            batches += 1;
        }
        let train_loss = train_loss / batches as f64;
        let val_loss = if splits.val.is_empty() {
            f64::NAN
        } else {
            eval_loss(store, lm_config, mapper_config, vocab, &splits.val, config.batch_size)?
        };
        log.push(EpochMetrics {
            epoch: epoch + 1,
            train_loss,
            val_loss,
        });
    }
    Ok(log)
}

/// Mean loss over a split without gradient updates.
pub fn eval_loss(
    store: &mut ParameterStore,
    lm_config: &LmConfig,
    mapper_config: &MapperConfig,
    vocab: &Vocabulary,
    records: &[EmbeddingRecord],
    batch_size: usize,
) -> Result<f64> {
    let mut total = 0.0f64;
    let mut n = 0usize;
    for chunk in records.chunks(batch_size.max(1)) {
        total += loss_step(store, lm_config, mapper_config, vocab, chunk, false)? * chunk.len() as f64;
        n += chunk.len();
    }
    Ok(total / n as f64)
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    lm_config: LmConfig,
    mapper_config: Option<MapperConfig>,
    train_config: Option<TrainConfig>,
    vocab: Vocabulary,
    manifest: Vec<ManifestEntry>,
}

/// Everything a checkpoint persists. Adam state and freeze flags are
/// runtime concerns and are not stored.
pub struct Checkpoint {
    pub lm_config: LmConfig,
    pub mapper_config: Option<MapperConfig>,
    pub train_config: Option<TrainConfig>,
    pub vocab: Vocabulary,
    pub store: ParameterStore,
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let mut manifest = Vec::new();
    let mut payload: Vec<u8> = Vec::new();
    for name in ckpt.store.names() {
        let t = ckpt.store.get(name)?;
        manifest.push(ManifestEntry {
            name: name.to_string(),
            shape: t.shape.clone(),
            offset: payload.len() as u64,
        });
        for v in &t.data {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = Header {
        version: CHECKPOINT_VERSION,
        lm_config: ckpt.lm_config.clone(),
        mapper_config: ckpt.mapper_config.clone(),
        train_config: ckpt.train_config.clone(),
        vocab: ckpt.vocab.clone(),
        manifest,
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let mut f = fs::File::create(path)?;
    f.write_all(CHECKPOINT_MAGIC)?;
    f.write_all(&(header_bytes.len() as u32).to_le_bytes())?;
    f.write_all(&header_bytes)?;
    f.write_all(&payload)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 12 {
        return Err(Error::Format("file shorter than magic + header length".into()));
    }
    if &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if 12 + header_len > bytes.len() {
        return Err(Error::Format("truncated header".into()));
    }
    let header: Header = serde_json::from_slice(&bytes[12..12 + header_len])
        .map_err(|e| Error::Format(format!("header parse: {e}")))?;
    if header.version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: header.version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let payload = &bytes[12 + header_len..];

    let mut store = ParameterStore::new();
    let mut expected_offset = 0u64;
    for entry in &header.manifest {
        if entry.offset != expected_offset {
            return Err(Error::Format(format!(
                "manifest offset for {} is {}, expected {}",
                entry.name, entry.offset, expected_offset
            )));
        }
        let n: usize = entry.shape.iter().product();
        let nbytes = n * 4;
        let start = entry.offset as usize;
        if start + nbytes > payload.len() {
            return Err(Error::Format(format!(
                "tensor {} extends past end of payload",
                entry.name
            )));
        }
        let data: Vec<f32> = payload[start..start + nbytes]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        store.insert(&entry.name, Tensor::new(entry.shape.clone(), data)?);
        expected_offset += nbytes as u64;
    }
    if expected_offset as usize != payload.len() {
        return Err(Error::Format(format!(
            "payload length {} does not match manifest total {}",
            payload.len(),
            expected_offset
        )));
    }
    let mut vocab = header.vocab;
    vocab.rebuild_index();
    Ok(Checkpoint {
        lm_config: header.lm_config,
        mapper_config: header.mapper_config,
        train_config: header.train_config,
        vocab,
        store,
    })
}
