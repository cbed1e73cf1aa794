//! Trains a desk-scale model to copy its input and translates a few sentences.
//!
//! cargo run --release --example copy_task -- [max_steps]

use std::time::Instant;

use anyhow::Result;
use tigmt::corpus::split;
use tigmt::model::{Checkpoint, ModelConfig};
use tigmt::synthetic::copy_corpus;
use tigmt::trainer::pipeline::build_codec;
use tigmt::trainer::{run_stage, BpeConfig, CorpusSelector, LrSchedule, StageConfig, TrainOptions};
use tigmt::translate::Translator;

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let max_steps: u64 = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(3000);

    let corpus = copy_corpus(5_200, 30, 10, 7);
    let parts = split(&corpus, 0, 200, 11)?;
    let codec = build_codec(&parts.train, &BpeConfig { src_merges: 0, tgt_merges: 0, corpus: None });
    let train = codec.encode_corpus(&parts.train);
    let dev = codec.encode_corpus(&parts.dev);

    let mut config = ModelConfig::desk(0, 0);
    config.max_position = 64;
    let start = Checkpoint::init(config, codec.src_vocab.clone(), codec.tgt_vocab.clone(), 1)?;
    let stage = StageConfig {
        name: "copy".into(),
        train: CorpusSelector::new("unused"),
        dev: CorpusSelector::new("unused"),
        token_batch: 256,
        patience: 5,
        validation_interval: 250,
        max_steps: Some(max_steps),
        seed: 3,
    };
    let opts = TrainOptions {
        schedule: LrSchedule { warmup: 400, scale: 2.0, reset_per_stage: false },
        ..Default::default()
    };
    let t0 = Instant::now();
    let (best, log) = run_stage(&start, &stage, &train, &dev, &opts)?;
    println!("trained in {:.1}s", t0.elapsed().as_secs_f64());
    print!("{}", log.lines());
    println!("best step {:?}, stop {:?}", log.best_step, log.stop_reason);

    let translator = Translator::new(best, codec.src_bpe, codec.tgt_bpe);
    for text in ["w1 w2 w3", "w17 w4 w4 w29 w0", "w9"] {
        println!("{text} -> {}", translator.translate(text, None)?.translation);
    }
    Ok(())
}
