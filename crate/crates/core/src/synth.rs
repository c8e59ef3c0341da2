//! Deterministic synthetic stand-in for the vision encoder + dataset:
//! each embedding is the normalized sum of per-finding basis vectors plus
//! gaussian noise, and the report names exactly those findings, so decoding
//! accuracy is directly measurable.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::corpus::{EmbeddingRecord, SplitSet, View};
use crate::{Error, Result};

const FIXED_NAMES: [&str; 8] = [
    "cardiomegaly",
    "edema",
    "consolidation",
    "atelectasis",
    "effusion",
    "pneumothorax",
    "fracture",
    "opacity",
];

const MAX_COLLINEARITY_RETRIES: usize = 100;
const COLLINEARITY_LIMIT: f32 = 0.99;

/// Seeded set of unit-norm finding vectors.
#[derive(Clone, Debug)]
pub struct FindingBasis {
    pub seed: u64,
    pub names: Vec<String>,
    pub vectors: Vec<Vec<f32>>,
}

impl FindingBasis {
    pub fn k(&self) -> usize {
        self.vectors.len()
    }

    pub fn clip_dim(&self) -> usize {
        self.vectors.first().map_or(0, |v| v.len())
    }
}

#[derive(Clone, Debug)]
pub struct SynthConfig {
    pub basis: FindingBasis,
    pub noise_sigma: f32,
    pub max_findings_per_sample: usize,
}

impl SynthConfig {
    pub fn new(basis: FindingBasis) -> Self {
        SynthConfig {
            basis,
            noise_sigma: 0.05,
            max_findings_per_sample: 3,
        }
    }
}

fn unit_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f32> {
    let normal = Normal::new(0.0f32, 1.0).unwrap();
    loop {
        let mut v: Vec<f32> = (0..dim).map(|_| normal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt();
        if norm > 1e-6 {
            v.iter_mut().for_each(|x| *x /= norm);
            return v;
        }
    }
}

fn cosine(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// K pseudorandom unit vectors, pairwise |cos| < 0.99, deterministic per seed.
pub fn gen_basis(seed: u64, k: usize, clip_dim: usize) -> Result<FindingBasis> {
    if k < 1 || clip_dim < 1 {
        return Err(Error::Config(format!(
            "gen_basis requires k >= 1 and clip_dim >= 1, got k={k}, clip_dim={clip_dim}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut vectors: Vec<Vec<f32>> = Vec::with_capacity(k);
    for _ in 0..k {
        let mut retries = 0;
        loop {
            let v = unit_vector(&mut rng, clip_dim);
            if vectors
                .iter()
                .all(|u| cosine(u, &v).abs() < COLLINEARITY_LIMIT)
            {
                vectors.push(v);
                break;
            }
            retries += 1;
            if retries > MAX_COLLINEARITY_RETRIES {
                return Err(Error::DegenerateBasis(MAX_COLLINEARITY_RETRIES));
            }
        }
    }
    let names = (0..k)
        .map(|i| {
            FIXED_NAMES
                .get(i)
                .map(|s| s.to_string())
                .unwrap_or_else(|| format!("finding{i}"))
        })
        .collect();
    Ok(FindingBasis {
        seed,
        names,
        vectors,
    })
}

/// Template report naming the findings in fixed basis order.
pub fn render_report(basis: &FindingBasis, subset: &[usize]) -> String {
    let names: Vec<&str> = subset.iter().map(|&i| basis.names[i].as_str()).collect();
    format!("findings consistent with {} .", names.join(" and "))
}

/// One deterministic sample. `subset` holds finding indices; it is sorted
/// into fixed basis order before use.
pub fn synth_record(
    subset: &[usize],
    config: &SynthConfig,
    sample_seed: u64,
) -> Result<EmbeddingRecord> {
    if subset.is_empty() {
        return Err(Error::InvalidSample("empty finding subset".into()));
    }
    if subset.len() > config.max_findings_per_sample {
        return Err(Error::InvalidSample(format!(
            "subset size {} exceeds max_findings_per_sample {}",
            subset.len(),
            config.max_findings_per_sample
        )));
    }
    let k = config.basis.k();
    if let Some(&bad) = subset.iter().find(|&&i| i >= k) {
        return Err(Error::InvalidSample(format!(
            "finding index {bad} out of range {k}"
        )));
    }
    let mut sorted: Vec<usize> = subset.to_vec();
    sorted.sort_unstable();
    sorted.dedup();

    let dim = config.basis.clip_dim();
    let mut embedding = vec![0.0f32; dim];
    for &i in &sorted {
        for (e, b) in embedding.iter_mut().zip(&config.basis.vectors[i]) {
            *e += b;
        }
    }
    if config.noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(sample_seed);
        let normal = Normal::new(0.0f32, config.noise_sigma).unwrap();
        for e in embedding.iter_mut() {
            *e += normal.sample(&mut rng);
        }
    }
    let norm = embedding.iter().map(|x| x * x).sum::<f32>().sqrt();
    if norm > 0.0 {
        embedding.iter_mut().for_each(|x| *x /= norm);
    }

    Ok(EmbeddingRecord {
        id: format!("synth-{sample_seed:016x}"),
        view: if sample_seed % 2 == 0 { View::Ap } else { View::Pa },
        embedding,
        report: render_report(&config.basis, &sorted),
    })
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn binomial(n: usize, k: usize) -> u64 {
    if k > n {
        return 0;
    }
    let mut acc = 1u64;
    for i in 0..k {
        acc = acc * (n - i) as u64 / (i + 1) as u64;
    }
    acc
}

/// Uniform nonempty finding subset of size <= max_findings_per_sample.
fn sample_subset(rng: &mut ChaCha8Rng, k: usize, max_size: usize) -> Vec<usize> {
    let weights: Vec<u64> = (1..=max_size).map(|s| binomial(k, s)).collect();
    let total: u64 = weights.iter().sum();
    let mut pick = rng.gen_range(0..total);
    let mut size = max_size;
    for (i, w) in weights.iter().enumerate() {
        if pick < *w {
            size = i + 1;
            break;
        }
        pick -= w;
    }
    // partial Fisher-Yates over finding indices
    let mut pool: Vec<usize> = (0..k).collect();
    for i in 0..size {
        let j = rng.gen_range(i..k);
        pool.swap(i, j);
    }
    pool.truncate(size);
    pool
}

/// Deterministic synthetic split with disjoint ids
/// ("synth-train-0001", ...). Each sample derives its own seed from
/// (seed, split, index), so generation order never changes content.
pub fn gen_split(
    n_train: usize,
    n_val: usize,
    n_test: usize,
    config: &SynthConfig,
    seed: u64,
) -> Result<SplitSet> {
    let make = |split_tag: u64, split_name: &str, n: usize| -> Result<Vec<EmbeddingRecord>> {
        let mut records = Vec::with_capacity(n);
        for i in 0..n {
            let sample_seed = splitmix64(seed ^ splitmix64(split_tag) ^ (i as u64));
            let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(sample_seed));
            let subset = sample_subset(
                &mut rng,
                config.basis.k(),
                config.max_findings_per_sample,
            );
            let mut rec = synth_record(&subset, config, sample_seed)?;
            rec.id = format!("synth-{split_name}-{:04}", i + 1);
            records.push(rec);
        }
        Ok(records)
    };
    Ok(SplitSet {
        train: make(1, "train", n_train)?,
        val: make(2, "val", n_val)?,
        test: make(3, "test", n_test)?,
    })
}
