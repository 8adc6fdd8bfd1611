//! Shared text normaliser used by the tokenizer, the judges and every metric.
//!
//! Lowercases, splits on whitespace and emits each punctuation character as its
//! own token. The light stemmer strips `ing`, `es` and `s` with a small list of
//! exceptions.

/// Closed-class words that never carry scene evidence.
pub const STOP_WORDS: &[&str] = &[
    "a", "an", "the", "of", "in", "on", "at", "to", "is", "are", "was", "were", "be", "been",
    "being", "with", "and", "or", "but", "for", "by", "this", "that", "these", "those", "it",
    "its", "there", "here", "as", "from", "into", "onto", "which", "who", "while", "than",
    "then", "so", "very", "also", "has", "have", "had", "not", "no",
];

/// Relational and verbal words that describe configuration rather than
/// objects or attributes. Excluded from hallucination checks on top of
/// [`STOP_WORDS`].
pub const FUNCTION_WORDS: &[&str] = &[
    "near", "next", "beside", "behind", "front", "left", "right", "top", "bottom", "side",
    "above", "below", "under", "underneath", "between", "against", "across", "along",
    "around", "inside", "outside", "over", "up", "down", "back", "middle", "center", "centre",
    "close", "far", "away", "toward", "towards", "facing", "faces", "sits", "sit", "sitting",
    "stands", "stand", "standing", "placed", "located", "lies", "lying", "lie", "can", "seen",
    "appears", "one", "two", "three", "four", "some", "several", "many", "other", "another",
    "each", "both", "all", "only", "where", "when", "you", "your", "we", "they", "their",
];

const STEM_EXCEPTIONS: &[&str] = &[
    "is", "was", "has", "this", "his", "its", "yes", "gas", "bus", "lens", "series", "species",
    "always", "perhaps", "across", "glass", "grass", "chess", "class", "bas", "plus", "atlas",
    "canvas", "thus", "ceiling", "building", "thing", "nothing", "something", "king", "ring",
    "wing", "bring", "spring", "string", "during", "evening", "morning", "railing", "painting",
    "clothes", "shoes", "stairs", "does", "goes", "tiles",
];

/// Lowercased word and punctuation tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            word.extend(ch.to_lowercase());
        } else {
            if !word.is_empty() {
                out.push(std::mem::take(&mut word));
            }
            if !ch.is_whitespace() {
                out.push(ch.to_string());
            }
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

pub fn is_punctuation(token: &str) -> bool {
    !token.is_empty() && token.chars().all(|c| !c.is_alphanumeric())
}

/// Word tokens only (punctuation dropped); the unit every metric counts.
pub fn words(text: &str) -> Vec<String> {
    tokenize(text)
        .into_iter()
        .filter(|t| !is_punctuation(t))
        .collect()
}

pub fn stem(word: &str) -> String {
    if STEM_EXCEPTIONS.contains(&word) {
        return word.to_string();
    }
    let n = word.len();
    if n >= 6 && word.ends_with("ing") {
        return word[..n - 3].to_string();
    }
    if n >= 4 && word.ends_with("es") {
        let base = &word[..n - 2];
        if ["s", "x", "z", "ch", "sh"].iter().any(|s| base.ends_with(s)) {
            return base.to_string();
        }
    }
    if n >= 4 && word.ends_with('s') && !word.ends_with("ss") && !word.ends_with("us") {
        return word[..n - 1].to_string();
    }
    word.to_string()
}

pub fn is_stop_word(word: &str) -> bool {
    STOP_WORDS.contains(&word)
}

pub fn is_function_word(word: &str) -> bool {
    is_stop_word(word) || FUNCTION_WORDS.contains(&word)
}

/// Word tokens minus stop words.
pub fn content_words(text: &str) -> Vec<String> {
    words(text)
        .into_iter()
        .filter(|w| !is_stop_word(w))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn punctuation_split_and_lowercase() {
        assert_eq!(tokenize("The chair."), vec!["the", "chair", "."]);
        assert_eq!(tokenize("  A,b  "), vec!["a", ",", "b"]);
        assert_eq!(words("The chair."), vec!["the", "chair"]);
    }

    #[test]
    fn stemmer_rules() {
        assert_eq!(stem("chairs"), "chair");
        assert_eq!(stem("boxes"), "box");
        assert_eq!(stem("benches"), "bench");
        assert_eq!(stem("parking"), "park");
        assert_eq!(stem("glass"), "glass");
        assert_eq!(stem("is"), "is");
        assert_eq!(stem("building"), "building");
        assert_eq!(stem("bus"), "bus");
        assert_eq!(stem("tables"), "table");
    }

    #[test]
    fn content_words_drop_stop_words() {
        assert_eq!(content_words("a road beside a building"), vec!["road", "beside", "building"]);
    }
}
