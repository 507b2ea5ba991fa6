//! Name normalization and the word/punctuation splitter shared by the
//! linker, the tokenizer and the metrics.

use alloc::string::String;
use alloc::vec::Vec;

/// Special markers that the template emits as single tokens.
pub const MARKERS: [&str; 7] = ["<sep>", "<triple>", "<user>", "<assistant>", "<pad>", "<bos>", "<eos>"];

/// Trims and collapses internal whitespace runs to one space.
pub fn normalize_name(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for word in s.split_whitespace() {
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(word);
    }
    out
}

/// [`normalize_name`] plus lowercasing; the key space of the alias lexicon.
pub fn normalize_key(s: &str) -> String {
    normalize_name(s).to_lowercase()
}

#[inline]
pub fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '_'
}

/// A piece of text with its byte range in the source.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Piece<'a> {
    pub text: &'a str,
    pub start: usize,
    pub end: usize,
}

/// Splits into word runs, single punctuation characters and whole markers.
///
/// Whitespace only separates pieces and is never emitted.
pub fn split_pieces(s: &str) -> Vec<Piece<'_>> {
    let mut out = Vec::new();
    let mut iter = s.char_indices().peekable();
    while let Some((i, c)) = iter.next() {
        if c.is_whitespace() {
            continue;
        }
        if c == '<' {
            if let Some(m) = MARKERS.iter().find(|m| s[i..].starts_with(**m)) {
                let end = i + m.len();
                out.push(Piece { text: &s[i..end], start: i, end });
                while iter.peek().is_some_and(|&(j, _)| j < end) {
                    iter.next();
                }
                continue;
            }
        }
        if is_word_char(c) {
            let mut end = i + c.len_utf8();
            while let Some(&(j, d)) = iter.peek() {
                if !is_word_char(d) {
                    break;
                }
                end = j + d.len_utf8();
                iter.next();
            }
            out.push(Piece { text: &s[i..end], start: i, end });
        } else {
            let end = i + c.len_utf8();
            out.push(Piece { text: &s[i..end], start: i, end });
        }
    }
    out
}

pub fn is_marker(s: &str) -> bool {
    MARKERS.contains(&s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn splits_words_punctuation_and_markers() {
        let texts: Vec<&str> = split_pieces("Who directed X-Men 2?<user>hi").iter().map(|p| p.text).collect();
        assert_eq!(texts, vec!["Who", "directed", "X", "-", "Men", "2", "?", "<user>", "hi"]);
    }

    #[test]
    fn underscore_is_a_word_char() {
        let texts: Vec<&str> = split_pieces("directed_by").iter().map(|p| p.text).collect();
        assert_eq!(texts, vec!["directed_by"]);
    }

    #[test]
    fn partial_marker_is_punctuation() {
        let texts: Vec<&str> = split_pieces("<use>").iter().map(|p| p.text).collect();
        assert_eq!(texts, vec!["<", "use", ">"]);
    }

    #[test]
    fn normalization() {
        assert_eq!(normalize_name("  a \t b  "), "a b");
        assert_eq!(normalize_key("X-Men  2"), "x-men 2");
    }
}
