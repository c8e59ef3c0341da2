//! Transformer mapping network: projects a clip-space embedding into
//! clip-length pseudo-tokens, prepends a learnable prefix constant, runs
//! bidirectional self-attention, and returns the transformed prefix rows as
//! the LM prefix.
//!
//! No positional embeddings, no causal mask, no terminal layer norm.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::graph::{Graph, NodeId, Value};
use crate::lm::{block_param_count, init_block, BlockHandles};
use crate::store::ParameterStore;
use crate::tensor::Tensor;
use crate::{Error, Result};

const INIT_STD: f32 = 0.02;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MapperConfig {
    pub clip_dim: usize,
    pub d_model: usize,
    pub clip_length: usize,
    pub prefix_length: usize,
    pub n_layers: usize,
    pub n_heads: usize,
}

impl Default for MapperConfig {
    fn default() -> Self {
        MapperConfig {
            clip_dim: 512,
            d_model: 64,
            clip_length: 4,
            prefix_length: 4,
            n_layers: 1,
            n_heads: 4,
        }
    }
}

impl MapperConfig {
    pub fn validate(&self) -> Result<()> {
        if self.clip_dim == 0 || self.d_model == 0 || self.clip_length == 0
            || self.prefix_length == 0 || self.n_heads == 0
        {
            return Err(Error::Config(format!(
                "mapper config extents must be positive: {self:?}"
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
}

/// Seeded initialization of all "mapper." tensors into the store.
pub fn mapper_init(store: &mut ParameterStore, config: &MapperConfig, seed: u64) -> Result<()> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let wide = config.clip_length * config.d_model;
    store.insert(
        "mapper.proj.w",
        Tensor::randn(vec![config.clip_dim, wide], INIT_STD, &mut rng),
    );
    store.insert("mapper.proj.b", Tensor::zeros(vec![wide]));
    store.insert(
        "mapper.prefix_const",
        Tensor::randn(vec![config.prefix_length, config.d_model], INIT_STD, &mut rng),
    );
    for i in 0..config.n_layers {
        init_block(store, "mapper.", i, config.d_model, &mut rng);
    }
    Ok(())
}

/// Per-tensor manifest (name, shape) and the closed-form total count.
pub fn count_params(config: &MapperConfig) -> (usize, Vec<(String, Vec<usize>)>) {
    let d = config.d_model;
    let h = crate::lm::MLP_RATIO * d;
    let wide = config.clip_length * d;
    let mut manifest: Vec<(String, Vec<usize>)> = vec![
        ("mapper.proj.w".into(), vec![config.clip_dim, wide]),
        ("mapper.proj.b".into(), vec![wide]),
        ("mapper.prefix_const".into(), vec![config.prefix_length, d]),
    ];
    for i in 0..config.n_layers {
        let p = format!("mapper.block{i}");
        manifest.push((format!("{p}.ln1.gamma"), vec![d]));
        manifest.push((format!("{p}.ln1.beta"), vec![d]));
        for w in ["wq", "wk", "wv", "wo"] {
            manifest.push((format!("{p}.attn.{w}"), vec![d, d]));
        }
        for b in ["bq", "bk", "bv", "bo"] {
            manifest.push((format!("{p}.attn.{b}"), vec![d]));
        }
        manifest.push((format!("{p}.ln2.gamma"), vec![d]));
        manifest.push((format!("{p}.ln2.beta"), vec![d]));
        manifest.push((format!("{p}.mlp.w1"), vec![d, h]));
        manifest.push((format!("{p}.mlp.b1"), vec![h]));
        manifest.push((format!("{p}.mlp.w2"), vec![h, d]));
        manifest.push((format!("{p}.mlp.b2"), vec![d]));
    }
    let closed_form = config.clip_dim * wide + wide
        + config.prefix_length * d
        + config.n_layers * block_param_count(d);
    (closed_form, manifest)
}

pub struct MapperHandles {
    proj_w: NodeId,
    proj_b: NodeId,
    prefix_const: NodeId,
    blocks: Vec<BlockHandles>,
}

impl MapperHandles {
    pub fn bind(g: &mut Graph, store: &ParameterStore, config: &MapperConfig) -> Result<Self> {
        Ok(MapperHandles {
            proj_w: g.param(store, "mapper.proj.w")?,
            proj_b: g.param(store, "mapper.proj.b")?,
            prefix_const: g.param(store, "mapper.prefix_const")?,
            blocks: (0..config.n_layers)
                .map(|i| BlockHandles::bind(g, store, "mapper.", i))
                .collect::<Result<_>>()?,
        })
    }
}

/// Map one embedding to a prefix_length × d_model prefix.
pub fn map_embedding(
    g: &mut Graph,
    handles: &MapperHandles,
    config: &MapperConfig,
    embedding: &[f32],
) -> Result<NodeId> {
    if embedding.len() != config.clip_dim {
        return Err(Error::Dimension {
            op: "map_embedding".into(),
            lhs: vec![embedding.len()],
            rhs: vec![config.clip_dim],
        });
    }
    let e = g.constant_value(Value::new(
        vec![1, config.clip_dim],
        embedding.iter().map(|&v| v as f64).collect(),
    ))?;
    let wide = g.matmul(e, handles.proj_w)?;
    let wide = g.add_bias(wide, handles.proj_b)?;
    let clip_tokens = g.reshape(wide, vec![config.clip_length, config.d_model])?;
    let mut x = g.concat_rows(handles.prefix_const, clip_tokens)?;
    let mut probs_sink = Vec::new();
    for block in &handles.blocks {
        x = block.forward(g, x, config.n_heads, None, &mut probs_sink)?;
    }
    g.slice_rows(x, 0, config.prefix_length)
}
