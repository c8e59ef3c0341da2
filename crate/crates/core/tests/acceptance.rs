//! Release gate: one test per criterion, each printing a PASS/FAIL line
//! (visible with `cargo test --test acceptance -- --nocapture`).

use std::collections::HashMap;
use std::sync::OnceLock;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use prefix_bridge::corpus::{preprocess_report, Vocabulary};
use prefix_bridge::generate::DecodeConfig;
use prefix_bridge::gradcheck::grad_check;
use prefix_bridge::graph::Graph;
use prefix_bridge::lm::{lm_forward, lm_init, lm_pretrain_prefixed, LmConfig, LmHandles};
use prefix_bridge::mapper::{count_params, map_embedding, mapper_init, MapperConfig, MapperHandles};
use prefix_bridge::metrics::{corpus_bleu, evaluate_split};
use prefix_bridge::store::ParameterStore;
use prefix_bridge::synth::{gen_basis, gen_split, SynthConfig};
use prefix_bridge::trainer::{
    load_checkpoint, loss_step, save_checkpoint, train, Checkpoint, EpochMetrics, TrainConfig,
    TrainMode,
};
use prefix_bridge::Error;

fn verdict(criterion: usize, name: &str, pass: bool, detail: &str) {
    println!(
        "criterion {criterion} ({name}): {} — {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "criterion {criterion} ({name}) failed: {detail}");
}

// ---------------------------------------------------------------- pipeline

struct PipelineOutcome {
    metrics_csv: String,
    bleu4: f64,
    trainable: usize,
    elapsed_s: f64,
}

fn metrics_csv(log: &[EpochMetrics]) -> String {
    let mut csv = String::from("epoch,train_loss,val_loss\n");
    for m in log {
        csv.push_str(&format!("{},{:.6},{:.6}\n", m.epoch, m.train_loss, m.val_loss));
    }
    csv
}

/// Synthetic end-to-end run: synth data, prefixed LM pretraining (10 epochs,
/// then frozen under prefix mode), 30 mapper epochs, greedy decoding on test.
fn run_pipeline(lc_base: &LmConfig, mc: &MapperConfig, mode: TrainMode, seed: u64) -> PipelineOutcome {
    let t0 = Instant::now();
    let basis = gen_basis(seed, 8, mc.clip_dim).unwrap();
    let splits = gen_split(500, 100, 100, &SynthConfig::new(basis), seed).unwrap();
    let reports: Vec<String> = splits
        .train
        .iter()
        .map(|r| preprocess_report(&r.report).unwrap())
        .collect();
    let vocab = Vocabulary::build(&reports, 1).unwrap();
    let mut lc = lc_base.clone();
    lc.vocab_size = vocab.size();
    let mut store = ParameterStore::new();
    lm_init(&mut store, &lc, seed).unwrap();
    lm_pretrain_prefixed(
        &mut store,
        &vocab,
        &reports,
        &lc,
        mc.prefix_length,
        10,
        16,
        &Default::default(),
        seed,
    )
    .unwrap();
    mapper_init(&mut store, mc, seed + 1).unwrap();
    let tc = TrainConfig {
        mode,
        epochs: 30,
        seed,
        ..TrainConfig::default()
    };
    let log = train(&splits, &mut store, &lc, mc, &vocab, &tc).unwrap();
    let (report, _) =
        evaluate_split(&store, &lc, mc, &vocab, &splits.test, &DecodeConfig::default()).unwrap();
    PipelineOutcome {
        metrics_csv: metrics_csv(&log),
        bleu4: report.bleu[3],
        trainable: store.trainable_param_count(),
        elapsed_s: t0.elapsed().as_secs_f64(),
    }
}

fn toy_lm() -> LmConfig {
    LmConfig::default() // d_model 64, 2 layers, 4 heads, max_seq 128
}

fn small_mapper_deep_lm() -> (LmConfig, MapperConfig) {
    (
        LmConfig {
            vocab_size: 0,
            d_model: 32,
            n_layers: 7,
            n_heads: 4,
            max_seq: 96,
        },
        MapperConfig {
            clip_dim: 16,
            d_model: 32,
            clip_length: 1,
            prefix_length: 4,
            n_layers: 1,
            n_heads: 2,
        },
    )
}

fn criterion3_outcome() -> &'static PipelineOutcome {
    static OUTCOME: OnceLock<PipelineOutcome> = OnceLock::new();
    OUTCOME.get_or_init(|| {
        run_pipeline(&toy_lm(), &MapperConfig::default(), TrainMode::PrefixTuning, 11)
    })
}

// --------------------------------------------------------------- criteria

#[test]
fn criterion_1_gradient_correctness() {
    let lc = LmConfig {
        vocab_size: 9,
        d_model: 32,
        n_layers: 1,
        n_heads: 4,
        max_seq: 16,
    };
    let mc = MapperConfig {
        clip_dim: 16,
        d_model: 32,
        clip_length: 2,
        prefix_length: 2,
        n_layers: 1,
        n_heads: 2,
    };
    let mut store = ParameterStore::new();
    lm_init(&mut store, &lc, 5).unwrap();
    mapper_init(&mut store, &mc, 6).unwrap();
    store.set_frozen(vec!["lm.".to_string()]);
    let embedding: Vec<f32> = (0..mc.clip_dim).map(|i| (i as f32 * 0.31).cos()).collect();
    let ids = [1usize, 5, 6, 7, 8, 2];
    let t0 = Instant::now();
    let worst = grad_check(
        |s: &mut ParameterStore| {
            let mut g = Graph::new();
            let mh = MapperHandles::bind(&mut g, s, &mc)?;
            let lh = LmHandles::bind(&mut g, s, &lc)?;
            let prefix = map_embedding(&mut g, &mh, &mc, &embedding)?;
            let out = lm_forward(&mut g, &lh, &lc, Some(prefix), &ids[..5])?;
            let mut targets = vec![0usize; mc.prefix_length];
            targets.extend_from_slice(&ids[1..]);
            let mut mask = vec![false; mc.prefix_length];
            mask.extend([true; 5]);
            let loss = g.cross_entropy(out.logits, &targets, &mask)?;
            g.backward(loss)?;
            g.accumulate_param_grads(s)?;
            Ok(g.value(loss).data[0])
        },
        &mut store,
        200,
        1e-4,
        77,
    )
    .unwrap();
    let elapsed = t0.elapsed().as_secs_f64();
    verdict(
        1,
        "gradient correctness",
        worst < 1e-4 && elapsed < 60.0,
        &format!("max relative error {worst:.2e} over 200 probes in {elapsed:.1}s"),
    );
}

#[test]
fn criterion_2_freeze_invariance() {
    let lc = LmConfig {
        vocab_size: 0,
        d_model: 32,
        n_layers: 1,
        n_heads: 4,
        max_seq: 64,
    };
    let mc = MapperConfig {
        clip_dim: 16,
        d_model: 32,
        clip_length: 2,
        prefix_length: 2,
        n_layers: 1,
        n_heads: 2,
    };
    let basis = gen_basis(21, 8, mc.clip_dim).unwrap();
    let splits = gen_split(8, 0, 0, &SynthConfig::new(basis), 21).unwrap();
    let reports: Vec<String> = splits.train.iter().map(|r| r.report.clone()).collect();
    let vocab = Vocabulary::build(&reports, 1).unwrap();
    let lc = LmConfig {
        vocab_size: vocab.size(),
        ..lc
    };
    let mut store = ParameterStore::new();
    lm_init(&mut store, &lc, 21).unwrap();
    mapper_init(&mut store, &mc, 22).unwrap();
    let before: Vec<(String, Vec<u32>)> = store
        .names()
        .filter(|n| n.starts_with("lm."))
        .map(|n| {
            (
                n.to_string(),
                store.get(n).unwrap().data.iter().map(|v| v.to_bits()).collect(),
            )
        })
        .collect();
    store.set_frozen(vec!["lm.".to_string()]);
    for _ in 0..100 {
        store.zero_grad();
        loss_step(&mut store, &lc, &mc, &vocab, &splits.train, true).unwrap();
        store.adam_step(&Default::default()).unwrap();
    }
    let unchanged = before.iter().all(|(name, bits)| {
        store
            .get(name)
            .unwrap()
            .data
            .iter()
            .map(|v| v.to_bits())
            .eq(bits.iter().copied())
    });
    let trainable = store.trainable_param_count();
    let expected = count_params(&mc).0;
    verdict(
        2,
        "freeze invariance",
        unchanged && trainable == expected,
        &format!(
            "lm tensors bitwise unchanged after 100 steps: {unchanged}; trainable {trainable} == count_params(mapper) {expected}"
        ),
    );
}

#[test]
fn criterion_3_end_to_end_learning() {
    let o = criterion3_outcome();
    verdict(
        3,
        "end-to-end learning",
        o.bleu4 >= 0.90 && o.elapsed_s < 600.0,
        &format!("test BLEU-4 {:.4} (threshold 0.90) in {:.0}s", o.bleu4, o.elapsed_s),
    );
}

#[test]
fn criterion_4_mode_comparison() {
    let (lc, mc) = small_mapper_deep_lm();
    let prefix = run_pipeline(&lc, &mc, TrainMode::PrefixTuning, 12);
    let finetune = run_pipeline(&lc, &mc, TrainMode::FineTuning, 12);
    println!("  mode          bleu4   trainable");
    println!("  PrefixTuning  {:.4}  {}", prefix.bleu4, prefix.trainable);
    println!("  FineTuning    {:.4}  {}", finetune.bleu4, finetune.trainable);
    let ratio = prefix.trainable as f64 / finetune.trainable as f64;
    verdict(
        4,
        "mode comparison",
        prefix.bleu4 >= 0.85 && finetune.bleu4 >= 0.85 && ratio < 0.15,
        &format!(
            "prefix BLEU-4 {:.4}, finetune BLEU-4 {:.4}, trainable ratio {:.1}% (< 15%)",
            prefix.bleu4,
            finetune.bleu4,
            ratio * 100.0
        ),
    );
}

/// Independent n-gram recount: per-pair window enumeration, no shared code.
fn bleu_oracle(pairs: &[(String, String)]) -> ([f64; 4], f64) {
    let mut numer = [0usize; 4];
    let mut denom = [0usize; 4];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (hyp, refr) in pairs {
        let h: Vec<&str> = hyp.split_whitespace().collect();
        let r: Vec<&str> = refr.split_whitespace().collect();
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=4 {
            let mut hc: HashMap<&[&str], usize> = HashMap::new();
            for w in h.windows(n) {
                *hc.entry(w).or_insert(0) += 1;
            }
            for (gram, count) in hc {
                let in_ref = r.windows(n).filter(|w| *w == gram).count();
                numer[n - 1] += count.min(in_ref);
                denom[n - 1] += count;
            }
        }
    }
    let mut p = [0.0f64; 4];
    for n in 0..4 {
        if denom[n] > 0 {
            p[n] = numer[n] as f64 / denom[n] as f64;
        }
    }
    let bp = if hyp_len == 0 {
        0.0
    } else if hyp_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    (p, bp)
}

#[test]
fn criterion_5_bleu_oracle_equivalence() {
    let words = ["the", "lungs", "are", "clear", "no", "edema", "seen", "."];
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let mut sentence = |rng: &mut ChaCha8Rng| {
        let len = rng.gen_range(1..=8);
        (0..len)
            .map(|_| words[rng.gen_range(0..words.len())])
            .collect::<Vec<_>>()
            .join(" ")
    };
    let mut mismatches = 0;
    for _ in 0..100 {
        let n = rng.gen_range(1..=5);
        let pairs: Vec<(String, String)> = (0..n)
            .map(|_| (sentence(&mut rng), sentence(&mut rng)))
            .collect();
        let got = corpus_bleu(&pairs).unwrap();
        let (p, bp) = bleu_oracle(&pairs);
        if got.precisions != p || got.brevity_penalty != bp {
            mismatches += 1;
        }
    }
    let bp_fix = corpus_bleu(&[("lungs are clear".into(), "the lungs are clear".into())]).unwrap();
    let clip_fix =
        corpus_bleu(&[("the the the the the".into(), "the the the".into())]).unwrap();
    let fixtures_ok = (bp_fix.brevity_penalty - 0.7165).abs() < 5e-5
        && (bp_fix.bleu[2] - 0.7165).abs() < 5e-5
        && (clip_fix.bleu[0] - 0.6).abs() < 5e-5;
    verdict(
        5,
        "BLEU oracle equivalence",
        mismatches == 0 && fixtures_ok,
        &format!(
            "{mismatches}/100 corpora mismatched; BP fixture {:.4}, clipping fixture {:.4}",
            bp_fix.brevity_penalty, clip_fix.bleu[0]
        ),
    );
}

#[test]
fn criterion_6_causal_mask_property() {
    let lc = LmConfig {
        vocab_size: 11,
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        max_seq: 16,
    };
    let mut store = ParameterStore::new();
    lm_init(&mut store, &lc, 66).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(67);
    let logits_bits = |ids: &[usize], store: &ParameterStore| -> Vec<u64> {
        let mut g = Graph::new();
        let h = LmHandles::bind(&mut g, store, &lc).unwrap();
        let out = lm_forward(&mut g, &h, &lc, None, ids).unwrap();
        g.value(out.logits).data.iter().map(|v| v.to_bits()).collect()
    };
    let mut violations = 0;
    for _ in 0..50 {
        let len = rng.gen_range(3..=10);
        let ids: Vec<usize> = (0..len).map(|_| rng.gen_range(0..lc.vocab_size)).collect();
        let j = rng.gen_range(1..len);
        let mut mutated = ids.clone();
        mutated[j] = (mutated[j] + 1 + rng.gen_range(0..lc.vocab_size - 1)) % lc.vocab_size;
        let a = logits_bits(&ids, &store);
        let b = logits_bits(&mutated, &store);
        if a[..j * lc.vocab_size] != b[..j * lc.vocab_size] {
            violations += 1;
        }
    }
    verdict(
        6,
        "causal mask property",
        violations == 0,
        &format!("{violations}/50 probes leaked future tokens into earlier logits"),
    );
}

#[test]
fn criterion_7_checkpoint_integrity() {
    let dir = tempfile::tempdir().unwrap();
    let lc = LmConfig {
        vocab_size: 0,
        d_model: 16,
        n_layers: 1,
        n_heads: 2,
        max_seq: 32,
    };
    let vocab = Vocabulary::build(&["alpha beta gamma .".to_string()], 1).unwrap();
    let lc = LmConfig {
        vocab_size: vocab.size(),
        ..lc
    };
    let mut store = ParameterStore::new();
    lm_init(&mut store, &lc, 71).unwrap();
    let ckpt = Checkpoint {
        lm_config: lc,
        mapper_config: None,
        train_config: None,
        vocab,
        store,
    };
    let p1 = dir.path().join("a.ckpt");
    let p2 = dir.path().join("b.ckpt");
    save_checkpoint(&ckpt, &p1).unwrap();
    let loaded = load_checkpoint(&p1).unwrap();
    save_checkpoint(
        &Checkpoint {
            lm_config: loaded.lm_config,
            mapper_config: loaded.mapper_config,
            train_config: loaded.train_config,
            vocab: loaded.vocab,
            store: loaded.store,
        },
        &p2,
    )
    .unwrap();
    let bytes1 = std::fs::read(&p1).unwrap();
    let bytes2 = std::fs::read(&p2).unwrap();
    let roundtrip = bytes1 == bytes2;

    let p3 = dir.path().join("truncated.ckpt");
    std::fs::write(&p3, &bytes1[..bytes1.len() / 2]).unwrap();
    let truncated_rejected = matches!(load_checkpoint(&p3), Err(Error::Format(_)));

    let p4 = dir.path().join("badmagic.ckpt");
    let mut corrupt = bytes1.clone();
    corrupt[0] ^= 0xFF;
    std::fs::write(&p4, &corrupt).unwrap();
    let magic_rejected = matches!(load_checkpoint(&p4), Err(Error::Format(_)));

    let p5 = dir.path().join("versioned.ckpt");
    let text = String::from_utf8_lossy(&bytes1).into_owned();
    let bumped = text.replacen("\"version\":1", "\"version\":9", 1);
    std::fs::write(&p5, bumped.as_bytes()).unwrap();
    let version_rejected = matches!(
        load_checkpoint(&p5),
        Err(Error::Version { found: 9, expected: 1 })
    );

    verdict(
        7,
        "checkpoint integrity",
        roundtrip && truncated_rejected && magic_rejected && version_rejected,
        &format!(
            "save-load-save byte-identical: {roundtrip}; truncated rejected: {truncated_rejected}; bad magic rejected: {magic_rejected}; version bump rejected: {version_rejected}"
        ),
    );
}

#[test]
fn criterion_8_determinism() {
    let first = criterion3_outcome();
    let second = run_pipeline(&toy_lm(), &MapperConfig::default(), TrainMode::PrefixTuning, 11);
    verdict(
        8,
        "determinism",
        first.metrics_csv == second.metrics_csv,
        &format!(
            "two identically-seeded runs produced {} metrics CSVs",
            if first.metrics_csv == second.metrics_csv {
                "identical"
            } else {
                "different"
            }
        ),
    );
}

#[test]
fn criterion_9_parameter_counting() {
    let fixture = MapperConfig {
        clip_dim: 8,
        d_model: 16,
        clip_length: 2,
        prefix_length: 2,
        n_layers: 1,
        n_heads: 2,
    };
    let fixture_ok = count_params(&fixture).0 == 3600;

    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut mismatches = 0;
    for _ in 0..50 {
        let n_heads = 1 << rng.gen_range(0..3u32);
        let mc = MapperConfig {
            clip_dim: rng.gen_range(1..=64),
            d_model: n_heads * rng.gen_range(1..=16),
            clip_length: rng.gen_range(1..=6),
            prefix_length: rng.gen_range(1..=6),
            n_layers: rng.gen_range(0..=3),
            n_heads,
        };
        let (closed, manifest) = count_params(&mc);
        let enumerated: usize = manifest
            .iter()
            .map(|(_, shape)| shape.iter().product::<usize>())
            .sum();
        let mut store = ParameterStore::new();
        mapper_init(&mut store, &mc, 1).unwrap();
        let registered: usize = store
            .names()
            .map(|n| store.get(n).unwrap().data.len())
            .sum();
        if closed != enumerated || closed != registered {
            mismatches += 1;
        }
    }
    verdict(
        9,
        "parameter counting",
        fixture_ok && mismatches == 0,
        &format!(
            "3600-parameter fixture: {}; {mismatches}/50 random configs mismatched",
            count_params(&fixture).0
        ),
    );
}
