//! Word lists for the repetition penalty.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use glacnet_core::corpus::Vocabulary;
use glacnet_core::special;

use crate::IoError;

/// The list compiled into the binary, used when no file is configured.
pub const DEFAULT_EXEMPT_WORDS: &str = include_str!("../data/exempt_words.txt");

/// Parses one word per line. Surrounding whitespace is trimmed; empty lines
/// and lines whose first non-blank character is `#` are skipped.
pub fn parse_exempt_words(text: &str) -> Vec<String> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_string)
        .collect()
}

pub fn read_exempt_words(path: &Path) -> Result<Vec<String>, IoError> {
    let text = fs::read_to_string(path).map_err(|e| IoError::open(path, e))?;
    Ok(parse_exempt_words(&text))
}

/// Ids of the listed words that are in `vocab`, plus every reserved token.
pub fn exempt_ids(words: &[String], vocab: &Vocabulary) -> BTreeSet<usize> {
    let mut ids: BTreeSet<usize> = (0..special::NAMES.len()).collect();
    ids.extend(words.iter().filter_map(|w| vocab.get(w)));
    ids
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn comments_and_blanks() {
        let words = parse_exempt_words("# header\n\nthe\n  a  \n#x\nof\n");
        assert_eq!(words, ["the", "a", "of"]);
    }

    #[test]
    fn default_list_has_function_words() {
        let words = parse_exempt_words(DEFAULT_EXEMPT_WORDS);
        for w in ["the", "then", ".", "and", "he"] {
            assert!(words.iter().any(|x| x == w), "{w}");
        }
    }
}
