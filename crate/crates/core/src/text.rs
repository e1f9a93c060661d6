//! Tokenization and truncation shared by every stage of the pipeline.

/// Lowercases and splits on whitespace and punctuation.
///
/// Alphanumeric runs (apostrophes allowed inside a word) become one token;
/// every other non-space character becomes a token of its own. The output is
/// a fixed point: `tokenize(&tokens.join(" ")) == tokens`.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut current = String::new();
    let chars: Vec<char> = text.chars().collect();
    for (i, &ch) in chars.iter().enumerate() {
        let inner_apostrophe = ch == '\''
            && !current.is_empty()
            && chars.get(i + 1).is_some_and(|c| c.is_alphanumeric());
        if ch.is_alphanumeric() || inner_apostrophe {
            current.extend(ch.to_lowercase());
        } else {
            if !current.is_empty() {
                tokens.push(std::mem::take(&mut current));
            }
            if !ch.is_whitespace() {
                tokens.push(ch.to_lowercase().collect());
            }
        }
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    tokens
}

/// True when the token is made only of punctuation/symbol characters.
pub fn is_punctuation(token: &str) -> bool {
    !token.is_empty() && token.chars().all(|c| !c.is_alphanumeric())
}

/// Keeps the last `max` tokens.
pub fn truncate_tail(tokens: &[String], max: usize) -> Vec<String> {
    let start = tokens.len().saturating_sub(max);
    tokens[start..].to_vec()
}

/// Keeps the first `max` tokens.
pub fn truncate_head(tokens: &[String], max: usize) -> Vec<String> {
    tokens[..tokens.len().min(max)].to_vec()
}

pub fn detokenize(tokens: &[String]) -> String {
    tokens.join(" ")
}
