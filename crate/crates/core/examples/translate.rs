//! Training a small pipeline on disk, then loading its artifacts to translate.
//!
//! cargo run --release --example translate -- [checkpoint] [text]

use std::path::PathBuf;

use anyhow::Result;
use tigmt::synthetic::{transfer_pipeline, write_transfer_task, TransferSizes, TransferTask};
use tigmt::corpus::Language;
use tigmt::trainer::run_pipeline;
use tigmt::translate::Translator;

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args: Vec<String> = std::env::args().skip(1).collect();
    let checkpoint = match args.first() {
        Some(path) => PathBuf::from(path),
        None => train_demo_model()?,
    };

    let translator = Translator::load(&checkpoint, None, None)?;
    println!("model {} ({} parameters)", translator.model_id(), translator.checkpoint().model.num_parameters());
    let inputs: Vec<String> = match args.get(1) {
        Some(text) => vec![text.clone()],
        None => TransferTask::new(150, 0)
            .sample(Language::Tigrinya, 5, "demo", 99)
            .iter()
            .map(|p| p.source.clone())
            .collect(),
    };
    for text in inputs {
        let t = translator.translate(&text, None)?;
        println!("{text}\n  -> {}", t.translation);
    }
    Ok(())
}

/// Trains the single-stage low-resource model of the synthetic task and
/// returns its checkpoint path; `src.bpe`/`tgt.bpe` sit beside it.
fn train_demo_model() -> Result<PathBuf> {
    let work = std::env::temp_dir().join("tigmt-translate");
    let sizes = TransferSizes { lang_a: 2_000, ..Default::default() };
    let files = write_transfer_task(&work.join("data"), sizes, 0)?;
    let mut config = transfer_pipeline(&files, &work.join("model"), 0);
    config.stages.truncate(1);
    config.stages[0].max_steps = Some(400);
    let outcomes = run_pipeline(&config)?;
    Ok(work.join("model").join(format!("{}.ckpt", outcomes[0].name)))
}
