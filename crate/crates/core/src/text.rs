//! Label normalization shared by the name index, exact matching, and embedding caches.

/// Casefold, trim, and collapse internal whitespace runs to one space.
///
/// Punctuation is kept: "Diabetes mellitus (no complication)" and
/// "Diabetes mellitus, no complication" stay distinct labels.
pub fn normalize_label(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for (i, word) in text.split_whitespace().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        out.extend(word.chars().flat_map(char::to_lowercase));
    }
    out
}

/// Truncate to at most `max_chars` characters on a char boundary.
pub fn truncate_chars(text: &str, max_chars: usize) -> &str {
    match text.char_indices().nth(max_chars) {
        Some((idx, _)) => &text[..idx],
        None => text,
    }
}
