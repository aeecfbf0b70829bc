/// Lowercases, splits on whitespace and detaches every non-alphanumeric
/// character (except an apostrophe inside a word) into its own token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    let chars: Vec<char> = text.chars().collect();
    for (i, &ch) in chars.iter().enumerate() {
        if ch.is_whitespace() {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
        } else if ch.is_alphanumeric()
            || (ch == '\''
                && !cur.is_empty()
                && chars.get(i + 1).is_some_and(|c| c.is_alphanumeric()))
        {
            cur.extend(ch.to_lowercase());
        } else {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            out.push(ch.to_string());
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn punctuation_is_detached() {
        assert_eq!(
            tokenize("Great service, didn't wait!!"),
            ["great", "service", ",", "didn't", "wait", "!", "!"]
        );
        assert_eq!(tokenize("  "), Vec::<String>::new());
        assert_eq!(tokenize("'quoted'"), ["'", "quoted", "'"]);
    }
}
