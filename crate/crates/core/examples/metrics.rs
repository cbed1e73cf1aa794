//! Scoring hypotheses against references.
//!
//! cargo run --example metrics

use anyhow::Result;
use tigmt::metrics::{bleu, chrf, meteor_lite, pairs_from_lines, perplexity, render_table, Metric, MetricReport, MeteorParams};

fn main() -> Result<()> {
    let hyps = ["the cat sat on the mat", "there is a book on the table", "he went home", "she reads a good book every day"];
    let refs = ["the cat is on the mat", "a book is on the table", "he went home", "she reads a good book every evening"];
    let pairs = pairs_from_lines(&hyps, &refs)?;

    println!("bleu        {:.2}", bleu(&pairs, 4)?);
    println!("chrf        {:.2}", chrf(&pairs, 6, 2.0)?);
    println!("meteor_lite {:.2}", meteor_lite(&pairs, MeteorParams::default())?);
    println!("perplexity of a uniform 8-way guess: {}", perplexity(8f64.ln() * 10.0, 10)?);

    let a = MetricReport::evaluate("system-a", &pairs, &Metric::ALL)?;
    let identical = pairs_from_lines(&refs, &refs)?;
    let b = MetricReport::evaluate("oracle", &identical, &Metric::ALL)?;
    print!("\n{}", render_table(&[a.clone(), b]));
    print!("\n{}", a.key_values());
    Ok(())
}
