//! Offset-preserving tokenization, sentence splitting and syllable counting.
//!
//! Every other stage works on [`Document`]s produced here. Offsets are counted
//! in Unicode scalar values (chars), never bytes.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TextError {
    #[error("replacement index {index} is out of range for a document of {len} tokens")]
    IndexOutOfRange { index: usize, len: usize },
}

/// A maximal run of letters, digits or punctuation, with the whitespace that
/// follows it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token {
    pub text: String,
    pub start: usize,
    pub end: usize,
    pub trailing_gap: String,
}

/// Inclusive token range of one sentence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentenceSpan {
    pub first_token: usize,
    pub last_token: usize,
}

impl SentenceSpan {
    pub fn len(&self) -> usize {
        self.last_token - self.first_token + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, index: usize) -> bool {
        (self.first_token..=self.last_token).contains(&index)
    }
}

/// Immutable text plus its aligned token sequence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub text: String,
    /// Whitespace preceding the first token.
    pub leading_gap: String,
    pub tokens: Vec<Token>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum CharClass {
    Space,
    Letter,
    Digit,
    Punct,
}

fn classify(c: char) -> CharClass {
    if c.is_whitespace() {
        CharClass::Space
    } else if c.is_alphabetic() {
        CharClass::Letter
    } else if c.is_numeric() {
        CharClass::Digit
    } else {
        CharClass::Punct
    }
}

/// Splits `text` on whitespace and on every change between letters, digits
/// and punctuation.
pub fn tokenize(text: &str) -> Document {
    tokenize_with_id("", text)
}

pub fn tokenize_with_id(id: &str, text: &str) -> Document {
    let mut tokens: Vec<Token> = Vec::new();
    let mut leading_gap = String::new();
    let mut current: Option<(CharClass, String, usize)> = None;

    for (pos, c) in text.chars().enumerate() {
        let class = classify(c);
        match (&mut current, class) {
            (Some((cls, buf, _)), _) if *cls == class && class != CharClass::Space => buf.push(c),
            (_, CharClass::Space) => {
                if let Some((_, buf, start)) = current.take() {
                    let len = buf.chars().count();
                    tokens.push(Token {
                        text: buf,
                        start,
                        end: start + len,
                        trailing_gap: String::new(),
                    });
                }
                match tokens.last_mut() {
                    Some(last) => last.trailing_gap.push(c),
                    None => leading_gap.push(c),
                }
            }
            _ => {
                if let Some((_, buf, start)) = current.take() {
                    let len = buf.chars().count();
                    tokens.push(Token {
                        text: buf,
                        start,
                        end: start + len,
                        trailing_gap: String::new(),
                    });
                }
                current = Some((class, c.to_string(), pos));
            }
        }
    }
    if let Some((_, buf, start)) = current {
        let len = buf.chars().count();
        tokens.push(Token {
            text: buf,
            start,
            end: start + len,
            trailing_gap: String::new(),
        });
    }

    Document {
        id: id.to_string(),
        text: text.to_string(),
        leading_gap,
        tokens,
    }
}

impl Document {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token_texts(&self) -> Vec<String> {
        self.tokens.iter().map(|t| t.text.clone()).collect()
    }

    pub fn lowercase_tokens(&self) -> Vec<String> {
        self.tokens.iter().map(|t| t.text.to_lowercase()).collect()
    }

    /// Smallest inclusive token range covering the char range `[start, end)`,
    /// or `None` when no token intersects it.
    pub fn covering_tokens(&self, start: usize, end: usize) -> Option<(usize, usize)> {
        let first = self.tokens.iter().position(|t| t.end > start)?;
        let last = self.tokens.iter().rposition(|t| t.start < end)?;
        (first <= last).then_some((first, last))
    }

    /// Whether `[start, end)` begins and ends exactly on token boundaries.
    pub fn is_token_aligned(&self, start: usize, end: usize) -> bool {
        match self.covering_tokens(start, end) {
            Some((f, l)) => self.tokens[f].start == start && self.tokens[l].end == end,
            None => false,
        }
    }

    pub fn render(&self, replacements: &BTreeMap<usize, String>) -> Result<String, TextError> {
        render(self, replacements)
    }
}

/// Substitutes tokens in place, preserving every gap and untouched token.
pub fn render(doc: &Document, replacements: &BTreeMap<usize, String>) -> Result<String, TextError> {
    if let Some((&index, _)) = replacements.iter().next_back() {
        if index >= doc.tokens.len() {
            return Err(TextError::IndexOutOfRange {
                index,
                len: doc.tokens.len(),
            });
        }
    }
    let mut out = String::with_capacity(doc.text.len());
    out.push_str(&doc.leading_gap);
    for (i, token) in doc.tokens.iter().enumerate() {
        match replacements.get(&i) {
            Some(r) => out.push_str(r),
            None => out.push_str(&token.text),
        }
        out.push_str(&token.trailing_gap);
    }
    Ok(out)
}

fn is_terminator(token: &Token) -> bool {
    token.text.chars().all(|c| classify(c) == CharClass::Punct) && token.text.contains(['.', '!', '?'])
}

fn is_blank_line_gap(gap: &str) -> bool {
    gap.matches('\n').count() >= 2
}

/// Sentences end at a punctuation token containing `.`, `!` or `?`, or at a
/// gap holding a blank line. Trailing material forms a final sentence.
pub fn split_sentences(doc: &Document) -> Vec<SentenceSpan> {
    let mut spans = Vec::new();
    let mut first = 0;
    for (i, token) in doc.tokens.iter().enumerate() {
        if is_terminator(token) || is_blank_line_gap(&token.trailing_gap) {
            spans.push(SentenceSpan {
                first_token: first,
                last_token: i,
            });
            first = i + 1;
        }
    }
    if first < doc.tokens.len() {
        spans.push(SentenceSpan {
            first_token: first,
            last_token: doc.tokens.len() - 1,
        });
    }
    spans
}

fn is_vowel(c: char) -> bool {
    matches!(c, 'a' | 'e' | 'i' | 'o' | 'u' | 'y')
}

/// Vowel-group syllable heuristic with a silent final `e`.
///
/// A final `e` preceded by a consonant is dropped when at least one syllable
/// remains. Any word containing a letter counts at least one syllable.
pub fn count_syllables(word: &str) -> usize {
    if !word.chars().any(char::is_alphabetic) {
        return 0;
    }
    let lower: Vec<char> = word.to_lowercase().chars().collect();
    let mut groups = 0;
    let mut in_group = false;
    for &c in &lower {
        if is_vowel(c) {
            if !in_group {
                groups += 1;
            }
            in_group = true;
        } else {
            in_group = false;
        }
    }
    let n = lower.len();
    if n >= 2 && lower[n - 1] == 'e' && !is_vowel(lower[n - 2]) && groups > 1 {
        groups -= 1;
    }
    groups.max(1)
}

/// Whether a token counts as a word for readability purposes.
pub fn is_word(token: &str) -> bool {
    token.chars().any(char::is_alphabetic)
}

pub fn is_punctuation(token: &str) -> bool {
    !token.is_empty() && token.chars().all(|c| classify(c) == CharClass::Punct)
}

pub fn is_numeric(token: &str) -> bool {
    !token.is_empty() && token.chars().all(char::is_numeric)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn texts(doc: &Document) -> Vec<&str> {
        doc.tokens.iter().map(|t| t.text.as_str()).collect()
    }

    #[test]
    fn splits_on_class_boundaries() {
        let doc = tokenize("BP 120/80.");
        assert_eq!(texts(&doc), ["BP", "120", "/", "80", "."]);
        assert_eq!(doc.tokens[1].start, 3);
        assert_eq!(doc.tokens[1].end, 6);
    }

    #[test]
    fn empty_and_single_word() {
        assert!(tokenize("").tokens.is_empty());
        let doc = tokenize("abc");
        assert_eq!(doc.tokens.len(), 1);
        assert_eq!((doc.tokens[0].start, doc.tokens[0].end), (0, 3));
    }

    #[test]
    fn punctuation_runs_stay_together() {
        let doc = tokenize("wait...) ok");
        assert_eq!(texts(&doc), ["wait", "...)", "ok"]);
    }

    #[test]
    fn offsets_are_chars_not_bytes() {
        let doc = tokenize("café ok");
        assert_eq!(doc.tokens[0].end, 4);
        assert_eq!(doc.tokens[1].start, 5);
    }

    #[test]
    fn sentence_examples() {
        assert_eq!(split_sentences(&tokenize("Hi. Bye.")).len(), 2);
        assert_eq!(split_sentences(&tokenize("no terminator")).len(), 1);
        let spans = split_sentences(&tokenize("Dose: 5 mg.\n\nStable"));
        assert_eq!(spans.len(), 2);
        assert_eq!(
            spans[1],
            SentenceSpan {
                first_token: 5,
                last_token: 5
            }
        );
    }

    #[test]
    fn blank_line_ends_sentence_without_terminator() {
        let spans = split_sentences(&tokenize("HISTORY\n\nThe patient"));
        assert_eq!(spans.len(), 2);
    }

    #[test]
    fn syllables() {
        assert_eq!(count_syllables("cat"), 1);
        assert_eq!(count_syllables("care"), 1);
        assert_eq!(count_syllables("120"), 0);
        assert_eq!(count_syllables("the"), 1);
        assert_eq!(count_syllables("hmm"), 1);
        assert_eq!(count_syllables("agree"), 2);
        assert_eq!(count_syllables("medication"), 4);
    }

    #[test]
    fn render_examples() {
        let doc = tokenize("a b c");
        let mut r = BTreeMap::new();
        r.insert(1, "x".to_string());
        assert_eq!(render(&doc, &r).unwrap(), "a x c");
        assert_eq!(render(&doc, &BTreeMap::new()).unwrap(), "a b c");

        let doc = tokenize("Hi.\n\nBye.");
        let mut r = BTreeMap::new();
        r.insert(2, "Yo".to_string());
        assert_eq!(render(&doc, &r).unwrap(), "Hi.\n\nYo.");
    }

    #[test]
    fn render_rejects_out_of_range() {
        let doc = tokenize("a b");
        let mut r = BTreeMap::new();
        r.insert(5, "x".to_string());
        assert_eq!(render(&doc, &r), Err(TextError::IndexOutOfRange { index: 5, len: 2 }));
    }

    #[test]
    fn covering_tokens_expands_partial_matches() {
        let doc = tokenize("Mr Johnson left");
        assert_eq!(doc.covering_tokens(4, 6), Some((1, 1)));
        assert_eq!(doc.covering_tokens(0, 10), Some((0, 1)));
        assert!(!doc.is_token_aligned(4, 6));
        assert!(doc.is_token_aligned(3, 10));
    }

    proptest! {
        #[test]
        fn round_trip(text in "[ a-zA-Z0-9.,/\\-\n\té]{0,60}") {
            let doc = tokenize(&text);
            prop_assert_eq!(render(&doc, &BTreeMap::new()).unwrap(), text.clone());
            let chars: Vec<char> = text.chars().collect();
            let mut prev_end = 0;
            for t in &doc.tokens {
                prop_assert!(t.start < t.end);
                prop_assert!(t.start >= prev_end);
                prev_end = t.end;
                let slice: String = chars[t.start..t.end].iter().collect();
                prop_assert_eq!(&slice, &t.text);
                prop_assert!(!t.text.chars().any(char::is_whitespace));
            }
            let again = tokenize(&render(&doc, &BTreeMap::new()).unwrap());
            prop_assert_eq!(again, doc.clone());

            let spans = split_sentences(&doc);
            let mut next = 0;
            for s in &spans {
                prop_assert_eq!(s.first_token, next);
                prop_assert!(s.first_token <= s.last_token);
                next = s.last_token + 1;
            }
            prop_assert_eq!(next, doc.tokens.len());
            for t in &doc.tokens {
                if is_word(&t.text) {
                    prop_assert!(count_syllables(&t.text) >= 1);
                }
            }
        }
    }
}
