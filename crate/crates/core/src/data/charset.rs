use crate::error::{Error, Result};

/// Symbols in class order: digits, then lowercase letters. The pad class follows them.
pub const SYMBOLS: &str = "0123456789abcdefghijklmnopqrstuvwxyz";
pub const PAD: usize = 36;
pub const NUM_CLASSES: usize = 37;

pub fn index_of(c: char) -> Option<usize> {
    match c.to_ascii_lowercase() {
        d @ '0'..='9' => Some(d as usize - '0' as usize),
        l @ 'a'..='z' => Some(10 + l as usize - 'a' as usize),
        _ => None,
    }
}

pub fn symbol(index: usize) -> Option<char> {
    SYMBOLS.as_bytes().get(index).map(|&b| b as char)
}

/// A fixed-length class-index sequence padded with [`PAD`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub indices: Vec<usize>,
    pub true_length: usize,
}

/// Lowercases and checks `text` against the charset.
pub fn normalize(text: &str) -> Result<String> {
    if text.is_empty() {
        return Err(Error::Charset("empty label".into()));
    }
    text.chars()
        .map(|c| match index_of(c) {
            Some(_) => Ok(c.to_ascii_lowercase()),
            None => Err(Error::Charset(format!("character {c:?} in {text:?} is not in [0-9a-z]"))),
        })
        .collect()
}

/// Encodes `text` into `max_len` positions; at least one trailing pad is required.
pub fn encode(text: &str, max_len: usize) -> Result<TokenSequence> {
    let text = normalize(text)?;
    let n = text.chars().count();
    if n + 1 > max_len {
        return Err(Error::Charset(format!("{text:?} has {n} characters; at most {} fit", max_len.saturating_sub(1))));
    }
    let mut indices: Vec<usize> = text.chars().map(|c| index_of(c).expect("normalized")).collect();
    indices.resize(max_len, PAD);
    Ok(TokenSequence { indices, true_length: n })
}

/// Reads symbols up to the first pad (or an out-of-range index).
pub fn decode(indices: &[usize]) -> String {
    indices.iter().map_while(|&i| if i == PAD { None } else { symbol(i) }).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encode_example() {
        let t = encode("ab7", 25).unwrap();
        let mut want = vec![10, 11, 7];
        want.resize(25, PAD);
        assert_eq!(t.indices, want);
        assert_eq!(t.true_length, 3);
    }

    #[test]
    fn bijective_over_symbols() {
        for (i, c) in SYMBOLS.chars().enumerate() {
            assert_eq!(index_of(c), Some(i));
            assert_eq!(symbol(i), Some(c));
        }
        assert_eq!(symbol(PAD), None);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(encode("a-b", 10).is_err());
        assert!(encode("", 10).is_err());
        assert!(encode("abcd", 4).is_err());
        assert_eq!(encode("AbC", 5).unwrap(), encode("abc", 5).unwrap());
    }
}
