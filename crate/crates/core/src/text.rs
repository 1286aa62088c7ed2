/// Lowercases `text` and splits it into words at every character that is not
/// alphanumeric. Punctuation never survives as a token.
pub fn words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}
