/// Lowercases and splits on Unicode whitespace and ASCII punctuation.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| c.is_whitespace() || c.is_ascii_punctuation())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splits_on_whitespace_and_punctuation() {
        assert_eq!(tokenize("Hello, World!  foo-bar\tBaz"), vec!["hello", "world", "foo", "bar", "baz"]);
    }

    #[test]
    fn prefix_separator_is_not_a_token() {
        assert_eq!(tokenize("search_query: q"), vec!["search", "query", "q"]);
    }

    #[test]
    fn empty_and_punctuation_only() {
        assert!(tokenize("").is_empty());
        assert!(tokenize(" ..., ").is_empty());
    }

    #[test]
    fn unicode_is_lowercased_not_split() {
        assert_eq!(tokenize("Ärger über"), vec!["ärger", "über"]);
    }
}
