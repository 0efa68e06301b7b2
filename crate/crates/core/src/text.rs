//! Answer normalization shared by matching metrics and the lexical scorer.

const ARTICLES: [&str; 3] = ["a", "an", "the"];

/// Lowercase, drop punctuation, drop the articles a/an/the, collapse whitespace.
///
/// This is a local convention in the style of SQuAD-like scorers; it does not
/// strip units or reformat numbers.
pub fn normalize_answer(text: &str) -> String {
    normalized_tokens(text).join(" ")
}

/// Tokens of [`normalize_answer`], in order.
pub fn normalized_tokens(text: &str) -> Vec<String> {
    let lowered: String = text
        .to_lowercase()
        .chars()
        .filter(|c| !c.is_ascii_punctuation() && !is_unicode_punct(*c))
        .collect();
    lowered
        .split_whitespace()
        .filter(|t| !ARTICLES.contains(t))
        .map(str::to_string)
        .collect()
}

fn is_unicode_punct(c: char) -> bool {
    matches!(c, '‘' | '’' | '“' | '”' | '–' | '—' | '…' | '¿' | '¡' | '«' | '»')
}
