//! Mixing, filtering and splitting tagged parallel corpora.
//!
//! cargo run --example corpus -- [out_dir]

use std::path::PathBuf;

use anyhow::Result;
use tigmt::corpus::{filter_by_language, length_ratio_filter, mix_and_shuffle, split, Language, Manifest};
use tigmt::synthetic::{write_transfer_task, TransferSizes};

fn main() -> Result<()> {
    let out: PathBuf = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("tigmt-corpus"));
    let sizes = TransferSizes { words: 50, lang_a: 400, lang_b: 100, dev: 20, test: 20 };
    let files = write_transfer_task(&out.join("data"), sizes, 1)?;

    // The mix manifest lists one Amharic-tagged and one Tigrinya-tagged dataset.
    let manifest = Manifest::load(&files.mix)?;
    let corpora = manifest.load_all()?;
    for c in &corpora {
        let first = c.iter().next().expect("non-empty dataset");
        println!("{} ({}): {} pairs, e.g. {} => {}", first.dataset, first.language, c.len(), first.source, first.target);
    }

    let mixed = mix_and_shuffle(&corpora, 42);
    let kept = length_ratio_filter(&mixed, 50, 2.0);
    println!("mixed {} pairs, {} within the length filter", mixed.len(), kept.len());
    println!("tigrinya-tagged pairs: {}", filter_by_language(&kept, Language::Tigrinya).len());

    let parts = split(&kept, 50, 50, 7)?;
    println!("train {} / dev {} / test {}", parts.train.len(), parts.dev.len(), parts.test.len());
    let dir = out.join("split");
    std::fs::create_dir_all(&dir)?;
    parts.train.write_aligned(&dir.join("train.src"), &dir.join("train.tgt"), Some(&dir.join("train.tags")))?;
    println!("wrote {}", dir.display());
    Ok(())
}
