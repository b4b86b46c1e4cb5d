//! Small string helpers shared by matching code.

/// Lower-cases, trims and collapses internal whitespace. Underscores count as
/// whitespace so `blurred_vision` and `Blurred  vision` normalize alike.
pub fn normalize_name(s: &str) -> String {
    s.split(|c: char| c.is_whitespace() || c == '_')
        .filter(|t| !t.is_empty())
        .map(|t| t.to_lowercase())
        .collect::<Vec<_>>()
        .join(" ")
}

/// Lower-case ASCII slug for generated ids.
pub fn slug(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut dash = false;
    for c in s.chars() {
        if c.is_ascii_alphanumeric() {
            out.push(c.to_ascii_lowercase());
            dash = false;
        } else if !dash && !out.is_empty() {
            out.push('-');
            dash = true;
        }
    }
    while out.ends_with('-') {
        out.pop();
    }
    if out.is_empty() {
        out.push('x');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize() {
        assert_eq!(normalize_name("  Blurred_Vision "), "blurred vision");
        assert_eq!(normalize_name("a\tb  c"), "a b c");
        assert_eq!(normalize_name(""), "");
    }

    #[test]
    fn slugs() {
        assert_eq!(
            slug("Caffeine Withdrawal (headache)"),
            "caffeine-withdrawal-headache"
        );
        assert_eq!(slug("***"), "x");
    }
}
