//! Small text utilities: whitespace normalization, content tokens, stop words.

/// Collapses runs of whitespace to a single space and trims both ends.
pub fn normalize_ws(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Common English function words ignored when comparing content.
pub const STOP_WORDS: [&str; 50] = [
    "a", "an", "the", "and", "or", "but", "of", "to", "in", "on", "for", "with", "at", "by",
    "from", "as", "is", "are", "was", "were", "be", "been", "it", "its", "they", "them",
    "their", "he", "his", "she", "her", "this", "that", "these", "those", "both", "can",
    "could", "will", "would", "not", "so", "if", "than", "then", "also", "very", "all", "has",
    "have",
];

pub fn is_stop_word(token: &str) -> bool {
    STOP_WORDS.contains(&token)
}

/// Lowercased alphanumeric tokens; punctuation acts as a separator except for
/// inner apostrophes and hyphens.
pub fn word_tokens(s: &str) -> Vec<String> {
    s.split(|c: char| !(c.is_alphanumeric() || c == '\'' || c == '-'))
        .map(|t| t.trim_matches(|c| c == '\'' || c == '-').to_lowercase())
        .filter(|t| !t.is_empty())
        .collect()
}

/// Word tokens with stop words removed.
pub fn content_tokens(s: &str) -> Vec<String> {
    word_tokens(s).into_iter().filter(|t| !is_stop_word(t)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stop_word_list_has_no_duplicates() {
        let mut v = STOP_WORDS.to_vec();
        v.sort();
        v.dedup();
        assert_eq!(v.len(), 50);
    }

    #[test]
    fn tokens_strip_punctuation() {
        assert_eq!(word_tokens("Men's T-Shirt, (Blue)!"), ["men's", "t-shirt", "blue"]);
        assert_eq!(content_tokens("they both have pockets."), ["pockets"]);
    }
}
