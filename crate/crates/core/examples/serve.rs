//! Running the HTTP translation service.
//!
//! cargo run --release --example serve -- [checkpoint] [port]
//!
//! Without a checkpoint an untrained toy model is written to a temporary
//! directory, which is enough to try the JSON contract:
//!
//! curl -s localhost:8090/translate -d '{"text": "ሰላም ዓለም።"}'

use std::net::SocketAddr;
use std::path::PathBuf;

use anyhow::Result;
use tigmt::cli::serve::{serve, ServeConfig, DEFAULT_PORT};
use tigmt::corpus::Language;
use tigmt::model::{Checkpoint, ModelConfig};
use tigmt::synthetic::TransferTask;
use tigmt::trainer::pipeline::build_codec;
use tigmt::trainer::BpeConfig;
use tigmt::translate::{SRC_BPE_FILE, TGT_BPE_FILE};

fn toy_checkpoint() -> Result<PathBuf> {
    let dir = std::env::temp_dir().join("tigmt-serve");
    std::fs::create_dir_all(&dir)?;
    let corpus = TransferTask::new(100, 0).sample(Language::Tigrinya, 500, "toy", 0);
    let codec = build_codec(&corpus, &BpeConfig { src_merges: 100, tgt_merges: 100, corpus: None });
    let ck = Checkpoint::init(ModelConfig::desk(0, 0), codec.src_vocab, codec.tgt_vocab, 0)?;
    let path = dir.join("toy.ckpt");
    ck.save(&path)?;
    codec.src_bpe.save(dir.join(SRC_BPE_FILE))?;
    codec.tgt_bpe.save(dir.join(TGT_BPE_FILE))?;
    Ok(path)
}

#[tokio::main]
async fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let model = match std::env::args().nth(1) {
        Some(p) => PathBuf::from(p),
        None => toy_checkpoint()?,
    };
    let port = std::env::args().nth(2).map(|p| p.parse()).transpose()?.unwrap_or(DEFAULT_PORT);
    serve(ServeConfig {
        model,
        src_bpe: None,
        tgt_bpe: None,
        addr: SocketAddr::from(([127, 0, 0, 1], port)),
        static_dir: None,
        workers: 2,
    })
    .await
}
