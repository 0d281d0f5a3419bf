/// Lowercased runs of alphanumeric characters. No stemming, digits kept.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splits_possessives_and_keeps_digits() {
        assert_eq!(
            tokenize("Teuvo was born in 1912 in Washington D.C."),
            ["teuvo", "was", "born", "in", "1912", "in", "washington", "d", "c"]
        );
        assert_eq!(tokenize("Sheryl's"), ["sheryl", "s"]);
        assert!(tokenize(" ?! ").is_empty());
    }
}
