//! Subcommand implementations. Each writes its artifacts plus a run.json
//! provenance record into the output location.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use prefix_bridge::corpus::{load_dataset, load_records, preprocess_report, save_dataset, Vocabulary};
use prefix_bridge::generate::{decode, DecodeConfig, Strategy};
use prefix_bridge::lm::{lm_init, lm_pretrain_prefixed};
use prefix_bridge::mapper::mapper_init;
use prefix_bridge::metrics::evaluate_split;
use prefix_bridge::synth::{gen_basis, gen_split, SynthConfig};
use prefix_bridge::trainer::{load_checkpoint, save_checkpoint, train, Checkpoint, EpochMetrics, TrainMode};
use prefix_bridge::{Error, Result};

use crate::config::RunConfig;

#[derive(Serialize)]
struct RunRecord<'a> {
    command: &'a str,
    version: &'a str,
    seed: u64,
    config_sha256: String,
    config: &'a RunConfig,
}

/// Provenance record written alongside every command's outputs.
fn write_run_record(dir: &Path, command: &str, config: &RunConfig) -> Result<()> {
    let config_json = serde_json::to_vec(config)?;
    let record = RunRecord {
        command,
        version: env!("CARGO_PKG_VERSION"),
        seed: config.train.seed,
        config_sha256: format!("{:x}", Sha256::digest(&config_json)),
        config,
    };
    fs::create_dir_all(dir)?;
    fs::write(dir.join("run.json"), serde_json::to_string_pretty(&record)?)?;
    Ok(())
}

fn parent_dir(path: &Path) -> &Path {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    }
}

pub fn cmd_synth(
    config: &RunConfig,
    out: &Path,
    seed: u64,
    n_train: usize,
    n_val: usize,
    n_test: usize,
) -> Result<()> {
    let basis = gen_basis(seed, config.synth.k, config.effective_clip_dim())?;
    let sc = SynthConfig {
        basis,
        noise_sigma: config.synth.noise_sigma,
        max_findings_per_sample: config.synth.max_findings,
    };
    let splits = gen_split(n_train, n_val, n_test, &sc, seed)?;
    fs::create_dir_all(out)?;
    save_dataset(&splits, out)?;
    write_run_record(out, "synth", config)?;
    println!(
        "wrote {} train / {} val / {} test records to {}",
        splits.train.len(),
        splits.val.len(),
        splits.test.len(),
        out.display()
    );
    Ok(())
}

pub fn cmd_pretrain_lm(config: &RunConfig, data: &Path, out: &Path, epochs: usize) -> Result<()> {
    let splits = load_dataset(data, config.effective_clip_dim())?;
    let reports: Vec<String> = splits
        .train
        .iter()
        .map(|r| preprocess_report(&r.report))
        .collect::<Result<_>>()?;
    let vocab = Vocabulary::build(&reports, 1)?;
    let mut lm_config = config.lm.clone();
    lm_config.vocab_size = vocab.size();
    let mut store = prefix_bridge::store::ParameterStore::new();
    lm_init(&mut store, &lm_config, config.train.seed)?;
    let losses = lm_pretrain_prefixed(
        &mut store,
        &vocab,
        &reports,
        &lm_config,
        config.mapper.prefix_length,
        epochs,
        config.train.batch_size,
        &config.train.adam,
        config.train.seed,
    )?;
    if let Some(last) = losses.last() {
        println!("pretrained {} epochs, final loss {last:.4}", losses.len());
    }
    let ckpt = Checkpoint {
        lm_config,
        mapper_config: None,
        train_config: None,
        vocab,
        store,
    };
    fs::create_dir_all(parent_dir(out))?;
    save_checkpoint(&ckpt, out)?;
    write_run_record(parent_dir(out), "pretrain-lm", config)?;
    Ok(())
}

pub fn metrics_csv(log: &[EpochMetrics]) -> String {
    let mut csv = String::from("epoch,train_loss,val_loss\n");
    for m in log {
        csv.push_str(&format!("{},{:.6},{:.6}\n", m.epoch, m.train_loss, m.val_loss));
    }
    csv
}

pub fn cmd_train(
    config: &RunConfig,
    data: &Path,
    lm_path: &Path,
    out: &Path,
    mode: Option<TrainMode>,
) -> Result<()> {
    let ckpt = load_checkpoint(lm_path)?;
    let mut store = ckpt.store;
    let vocab = ckpt.vocab;
    let lm_config = ckpt.lm_config;
    let mapper_config = config.mapper.clone();
    let mut train_config = config.train.clone();
    if let Some(m) = mode {
        train_config.mode = m;
    }
    if ckpt.mapper_config.is_none() {
        mapper_init(&mut store, &mapper_config, train_config.seed.wrapping_add(1))?;
    }
    let splits = load_dataset(data, mapper_config.clip_dim)?;
    let log = train(&splits, &mut store, &lm_config, &mapper_config, &vocab, &train_config)?;
    if let Some(last) = log.last() {
        println!(
            "trained {} epochs ({}), final train loss {:.4}, val loss {:.4}",
            log.len(),
            match train_config.mode {
                TrainMode::PrefixTuning => "prefix",
                TrainMode::FineTuning => "finetune",
            },
            last.train_loss,
            last.val_loss
        );
    }
    fs::create_dir_all(out)?;
    fs::write(out.join("metrics.csv"), metrics_csv(&log))?;
    let ckpt = Checkpoint {
        lm_config,
        mapper_config: Some(mapper_config),
        train_config: Some(train_config),
        vocab,
        store,
    };
    save_checkpoint(&ckpt, &out.join("model.ckpt"))?;
    write_run_record(out, "train", config)?;
    Ok(())
}

fn decode_config(config: &RunConfig, beam: Option<usize>, max_len: Option<usize>) -> DecodeConfig {
    let mut dc = config.decode;
    if let Some(w) = beam {
        dc.strategy = Strategy::Beam { width: w };
    }
    if let Some(n) = max_len {
        dc.max_len = n;
    }
    dc
}

pub fn cmd_generate(
    config: &RunConfig,
    ckpt_path: &Path,
    input: &Path,
    out: &Path,
    beam: Option<usize>,
    max_len: Option<usize>,
) -> Result<()> {
    let ckpt = load_checkpoint(ckpt_path)?;
    let mapper_config = ckpt
        .mapper_config
        .ok_or_else(|| Error::Config("checkpoint has no mapper; run train first".into()))?;
    let records = load_records(input, mapper_config.clip_dim)?;
    let dc = decode_config(config, beam, max_len);
    fs::create_dir_all(parent_dir(out))?;
    let mut f = fs::File::create(out)?;
    for rec in &records {
        let report = decode(
            &ckpt.store,
            &ckpt.lm_config,
            &mapper_config,
            &ckpt.vocab,
            &rec.embedding,
            &dc,
        )?;
        writeln!(f, "{}", serde_json::json!({ "id": rec.id, "report": report }))?;
    }
    write_run_record(parent_dir(out), "generate", config)?;
    println!("wrote {} reports to {}", records.len(), out.display());
    Ok(())
}

pub fn cmd_evaluate(config: &RunConfig, ckpt_path: &Path, data: &Path, out: &Path) -> Result<()> {
    let ckpt = load_checkpoint(ckpt_path)?;
    let mapper_config = ckpt
        .mapper_config
        .ok_or_else(|| Error::Config("checkpoint has no mapper; run train first".into()))?;
    let splits = load_dataset(data, mapper_config.clip_dim)?;
    let (report, outputs) = evaluate_split(
        &ckpt.store,
        &ckpt.lm_config,
        &mapper_config,
        &ckpt.vocab,
        &splits.test,
        &config.decode,
    )?;
    fs::create_dir_all(out)?;
    let mut csv = String::from("metric,value\n");
    for (i, b) in report.bleu.iter().enumerate() {
        csv.push_str(&format!("bleu{},{:.6}\n", i + 1, b));
    }
    csv.push_str(&format!("bp,{:.6}\n", report.brevity_penalty));
    csv.push_str(&format!("hyp_len,{}\n", report.hyp_len));
    csv.push_str(&format!("ref_len,{}\n", report.ref_len));
    fs::write(out.join("metrics.csv"), csv)?;
    let mut f = fs::File::create(out.join("records.jsonl"))?;
    for rec in &outputs {
        writeln!(f, "{}", serde_json::to_string(rec)?)?;
    }
    write_run_record(out, "evaluate", config)?;
    // x100 convention for readability
    println!(
        "bleu1 {:.3}  bleu2 {:.3}  bleu3 {:.3}  bleu4 {:.3}  bp {:.3}",
        report.bleu[0] * 100.0,
        report.bleu[1] * 100.0,
        report.bleu[2] * 100.0,
        report.bleu[3] * 100.0,
        report.brevity_penalty
    );
    Ok(())
}
