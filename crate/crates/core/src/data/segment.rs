use crate::tokenizer::{BpeVocab, TokenSequence};

pub const MAX_SENTENCE_TOKENS: usize = 256;
pub const MIN_SENTENCE_TOKENS: usize = 10;

/// Splits after `.`, `!` or `?` when the terminator is followed by whitespace
/// or ends the text. No abbreviation handling. Sentences are trimmed and
/// empty ones dropped.
pub fn split_sentences(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut chars = text.char_indices().peekable();
    while let Some((i, c)) = chars.next() {
        if matches!(c, '.' | '!' | '?') {
            let end = i + c.len_utf8();
            let boundary = match chars.peek() {
                None => true,
                Some(&(_, n)) => n.is_whitespace(),
            };
            if boundary {
                out.push(&text[start..end]);
                start = end;
            }
        }
    }
    out.push(&text[start..]);
    out.into_iter().map(str::trim).filter(|s| !s.is_empty()).collect()
}

/// One token sequence per sentence: truncated to 256 tokens, dropped below 10.
pub fn segment_document(text: &str, tokenizer: &BpeVocab) -> Vec<TokenSequence> {
    split_sentences(text)
        .into_iter()
        .filter_map(|s| {
            let mut ids = tokenizer.encode(s);
            ids.truncate(MAX_SENTENCE_TOKENS);
            (ids.len() >= MIN_SENTENCE_TOKENS).then_some(ids)
        })
        .collect()
}
