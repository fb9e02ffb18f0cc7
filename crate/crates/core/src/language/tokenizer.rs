//! Character-bigram tokenizer over a fixed symbol set.
//!
//! Text is lowercased and split into non-overlapping character pairs; an odd
//! tail is padded. Characters outside the alphabet map to an unknown symbol.
//! Ids 0 and 1 are the start and end sentinels.

pub const ALPHABET: &str = "abcdefghijklmnopqrstuvwxyz0123456789 .,'-";
pub const SOT: usize = 0;
pub const EOT: usize = 1;
const FIRST_BIGRAM: usize = 2;

fn symbols() -> usize {
    // alphabet + unknown + pad
    ALPHABET.chars().count() + 2
}

pub fn vocab_size() -> usize {
    FIRST_BIGRAM + symbols() * symbols()
}

fn symbol(c: char) -> usize {
    ALPHABET.chars().position(|a| a == c).unwrap_or(symbols() - 2)
}

/// Bigram ids of `text`, without sentinels.
pub fn tokenize(text: &str) -> Vec<usize> {
    let syms: Vec<usize> = text.trim().to_lowercase().chars().map(symbol).collect();
    let pad = symbols() - 1;
    syms.chunks(2)
        .map(|pair| FIRST_BIGRAM + pair[0] * symbols() + pair.get(1).copied().unwrap_or(pad))
        .collect()
}

/// Inverse of [`tokenize`] for in-alphabet text.
pub fn detokenize(tokens: &[usize]) -> String {
    let alphabet: Vec<char> = ALPHABET.chars().collect();
    let mut out = String::new();
    for &t in tokens {
        if t < FIRST_BIGRAM {
            continue;
        }
        let id = t - FIRST_BIGRAM;
        for s in [id / symbols(), id % symbols()] {
            match alphabet.get(s) {
                Some(&c) => out.push(c),
                None if s == symbols() - 2 => out.push('?'),
                None => {}
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn four_letter_name_is_two_tokens() {
        assert_eq!(tokenize("road").len(), 2);
        assert_eq!(tokenize("car").len(), 2);
    }

    #[test]
    fn roundtrip_and_case() {
        let s = "there is a traffic sign in the scene.";
        assert_eq!(detokenize(&tokenize(s)), s);
        assert_eq!(tokenize("Road"), tokenize("road"));
        assert!(tokenize("road").iter().all(|&t| t < vocab_size()));
    }

    #[test]
    fn unknown_characters_share_a_symbol() {
        assert_eq!(tokenize("a#"), tokenize("a!"));
        assert_ne!(tokenize("a#"), tokenize("a "));
    }
}
