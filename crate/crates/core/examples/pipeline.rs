//! Minimal end-to-end run: synthesize data, pretrain the LM, prefix-tune the
//! mapper, and score the test split.

use prefix_bridge::corpus::{preprocess_report, Vocabulary};
use prefix_bridge::generate::DecodeConfig;
use prefix_bridge::lm::{lm_init, lm_pretrain_prefixed, LmConfig};
use prefix_bridge::mapper::{mapper_init, MapperConfig};
use prefix_bridge::metrics::evaluate_split;
use prefix_bridge::store::ParameterStore;
use prefix_bridge::synth::{gen_basis, gen_split, SynthConfig};
use prefix_bridge::trainer::{train, TrainConfig, TrainMode};

fn main() {
    let seed = 7u64;
    let mc = MapperConfig {
        clip_dim: 32,
        d_model: 32,
        clip_length: 2,
        prefix_length: 4,
        n_layers: 1,
        n_heads: 2,
    };
    let basis = gen_basis(seed, 8, mc.clip_dim).unwrap();
    let splits = gen_split(200, 40, 40, &SynthConfig::new(basis), seed).unwrap();
    let reports: Vec<String> = splits
        .train
        .iter()
        .map(|r| preprocess_report(&r.report).unwrap())
        .collect();
    let vocab = Vocabulary::build(&reports, 1).unwrap();
    let lc = LmConfig {
        vocab_size: vocab.size(),
        d_model: 32,
        n_layers: 2,
        n_heads: 4,
        max_seq: 96,
    };

    let mut store = ParameterStore::new();
    lm_init(&mut store, &lc, seed).unwrap();
    let pre = lm_pretrain_prefixed(
        &mut store, &vocab, &reports, &lc, mc.prefix_length, 10, 16, &Default::default(), seed,
    )
    .unwrap();
    println!("pretrain loss: {:.3} -> {:.3}", pre[0], pre.last().unwrap());

    mapper_init(&mut store, &mc, seed + 1).unwrap();
    let tc = TrainConfig {
        mode: TrainMode::PrefixTuning,
        epochs: 20,
        seed,
        ..TrainConfig::default()
    };
    let log = train(&splits, &mut store, &lc, &mc, &vocab, &tc).unwrap();
    println!(
        "mapper training: train {:.3}, val {:.3}",
        log.last().unwrap().train_loss,
        log.last().unwrap().val_loss
    );

    let (report, outputs) =
        evaluate_split(&store, &lc, &mc, &vocab, &splits.test, &DecodeConfig::default()).unwrap();
    println!("test BLEU-4: {:.4}", report.bleu[3]);
    for o in outputs.iter().take(3) {
        println!("  {} | hyp: {}", o.id, o.hypothesis);
    }
}
