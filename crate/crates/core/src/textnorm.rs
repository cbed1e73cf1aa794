//! Script-aware sentence tokenization for Latin and Ge'ez text.
//!
//! Both tokenizers first bring the input into Unicode NFC. The Latin path is a
//! reduced Moses-style rule set: ASCII lowercasing plus punctuation detachment,
//! keeping apostrophes and hyphens that sit inside a word and decimal points
//! between digits. The Ge'ez path separates Ethiopic and ASCII punctuation and
//! treats the Ethiopic wordspace (U+1361) as a delimiter. Ethiopic numerals
//! (U+1369..U+137C) are ordinary word characters.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use unicode_categories::UnicodeCategories;
use unicode_normalization::UnicodeNormalization;

/// Ethiopic wordspace, consumed as a word delimiter.
pub const ETHIOPIC_WORDSPACE: char = '\u{1361}';

/// Which writing system a sentence is tokenized as.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Script {
    Latin,
    Geez,
}

impl fmt::Display for Script {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Script::Latin => f.write_str("latin"),
            Script::Geez => f.write_str("geez"),
        }
    }
}

impl FromStr for Script {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "latin" => Ok(Script::Latin),
            "geez" | "ge'ez" | "ethiopic" => Ok(Script::Geez),
            other => Err(format!("unknown script `{other}` (expected latin or geez)")),
        }
    }
}

/// A tokenized sentence. Tokens are never empty and never contain whitespace.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenizedSentence {
    pub tokens: Vec<String>,
    pub script: Script,
}

impl TokenizedSentence {
    /// Builds a sentence from already-split tokens, dropping empty ones and
    /// splitting any token that still contains whitespace.
    pub fn from_tokens<I, S>(tokens: I, script: Script) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let tokens = tokens
            .into_iter()
            .flat_map(|t| {
                t.as_ref()
                    .split_whitespace()
                    .map(str::to_owned)
                    .collect::<Vec<_>>()
            })
            .collect();
        Self { tokens, script }
    }

    /// Splits an already tokenized, space-joined line.
    pub fn from_joined(line: &str, script: Script) -> Self {
        Self::from_tokens(line.split_whitespace(), script)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Space-joined form, as written to tokenized line files.
    pub fn joined(&self) -> String {
        self.tokens.join(" ")
    }
}

/// Tokenizes with the rules for `script`.
pub fn tokenize(text: &str, script: Script) -> TokenizedSentence {
    match script {
        Script::Latin => tokenize_latin(text),
        Script::Geez => tokenize_geez(text),
    }
}

fn is_latin_joiner(c: char) -> bool {
    matches!(c, '\'' | '\u{2019}' | '-' | '\u{2010}' | '\u{2011}')
}

/// Lowercases ASCII and detaches punctuation into standalone tokens.
pub fn tokenize_latin(text: &str) -> TokenizedSentence {
    let chars: Vec<char> = text
        .nfc()
        .map(|c| c.to_ascii_lowercase())
        .collect();
    let mut tokens = Vec::new();
    let mut current = String::new();

    for (i, &c) in chars.iter().enumerate() {
        if c.is_whitespace() {
            flush(&mut current, &mut tokens);
            continue;
        }
        if !c.is_punctuation() {
            current.push(c);
            continue;
        }
        let prev = i.checked_sub(1).map(|p| chars[p]);
        let next = chars.get(i + 1).copied();
        let interior = match (prev, next) {
            (Some(p), Some(n)) if is_latin_joiner(c) => p.is_alphanumeric() && n.is_alphanumeric(),
            (Some(p), Some(n)) if c == '.' => p.is_numeric() && n.is_numeric(),
            _ => false,
        };
        if interior {
            current.push(c);
        } else {
            flush(&mut current, &mut tokens);
            tokens.push(c.to_string());
        }
    }
    flush(&mut current, &mut tokens);
    TokenizedSentence {
        tokens,
        script: Script::Latin,
    }
}

/// Ethiopic punctuation emitted as tokens (U+1362..=U+1368).
pub fn is_ethiopic_punctuation(c: char) -> bool {
    ('\u{1362}'..='\u{1368}').contains(&c)
}

/// Separates Ethiopic and ASCII punctuation; U+1361 and whitespace delimit words.
pub fn tokenize_geez(text: &str) -> TokenizedSentence {
    let mut tokens = Vec::new();
    let mut current = String::new();

    for c in text.nfc() {
        if c.is_whitespace() || c == ETHIOPIC_WORDSPACE {
            flush(&mut current, &mut tokens);
        } else if is_ethiopic_punctuation(c) || c.is_ascii_punctuation() {
            flush(&mut current, &mut tokens);
            tokens.push(c.to_string());
        } else {
            current.push(c);
        }
    }
    flush(&mut current, &mut tokens);
    TokenizedSentence {
        tokens,
        script: Script::Geez,
    }
}

fn flush(current: &mut String, tokens: &mut Vec<String>) {
    if !current.is_empty() {
        tokens.push(std::mem::take(current));
    }
}

fn is_closing_punctuation(token: &str) -> bool {
    let mut chars = token.chars();
    match (chars.next(), chars.next()) {
        (Some(c), None) => matches!(
            c,
            '.' | ',' | '!' | '?' | ';' | ':' | '።' | '፣' | '፤' | '፥' | '፦' | '፧'
        ),
        _ => false,
    }
}

/// Joins tokens for display, attaching closing punctuation to the preceding word.
///
/// This is a best-effort inverse; it does not undo lowercasing.
pub fn detokenize(tokens: &[String]) -> String {
    let mut out = String::new();
    for (i, token) in tokens.iter().enumerate() {
        if i > 0 && !is_closing_punctuation(token) {
            out.push(' ');
        }
        out.push_str(token);
    }
    out
}
