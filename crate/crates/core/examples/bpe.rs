//! Learning, applying and storing a byte-pair-encoding model.
//!
//! cargo run --example bpe

use anyhow::Result;
use tigmt::subword::{apply_bpe, count_words, decode_bpe, train_bpe, vocabulary, BpeModel, Vocab, WordCountTable};
use tigmt::textnorm::{tokenize_geez, Script};

fn main() -> Result<()> {
    let mut counts = WordCountTable::new();
    for (w, c) in [("low", 5), ("lower", 2), ("newest", 6), ("widest", 3)] {
        counts.add(w, c);
    }
    let model = train_bpe(&counts, 10);
    for (i, (a, b)) in model.merges().iter().enumerate() {
        println!("merge {i}: {a} + {b}");
    }
    for w in ["lowest", "newer", "wider"] {
        println!("{w} -> {:?}", model.encode_word(w));
    }

    // Ge'ez text, segmented and restored.
    let text = ["ሰላም ዓለም ።", "ሰላማዊ ዓለማዊ ።", "ሰላም ሰላም ዓለም ።"];
    let sentences: Vec<_> = text.iter().map(|t| tokenize_geez(t)).collect();
    let geez_counts = count_words(&sentences);
    let geez = train_bpe(&geez_counts, 8);
    let probe = tokenize_geez("ሰላማዊ ሰላም");
    let pieces = apply_bpe(&probe, &geez);
    println!("{:?} -> {pieces:?}", probe.tokens);
    println!("restored: {:?}", decode_bpe(&pieces, geez.eow_marker(), Script::Geez).tokens);

    let vocab = Vocab::new(vocabulary(&geez, &geez_counts));
    println!("vocabulary of {} symbols, ids {:?}", vocab.len(), vocab.encode(&pieces));

    let path = std::env::temp_dir().join("tigmt-example.bpe");
    geez.save(&path)?;
    assert_eq!(BpeModel::load(&path)?, geez);
    println!("saved to {}", path.display());
    Ok(())
}
