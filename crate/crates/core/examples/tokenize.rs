//! Script-aware tokenization of Tigrinya and English text.
//!
//! cargo run --example tokenize

use tigmt::textnorm::{detokenize, tokenize_geez, tokenize_latin};

fn main() {
    let geez = ["ሰላም፡ዓለም። ከመይ ኣለኻ?", "ኣብ 2019 ዓ.ም፣ 3.5 ሚልዮን ሰባት ነይሮም፤"];
    for line in geez {
        let s = tokenize_geez(line);
        println!("{line}\n  -> {:?}", s.tokens);
    }

    let latin = ["Hello, World! It's a well-known fact.", "Pi is 3.14 (roughly)."];
    for line in latin {
        let s = tokenize_latin(line);
        println!("{line}\n  -> {}\n  <- {}", s.joined(), detokenize(&s.tokens));
    }
}
