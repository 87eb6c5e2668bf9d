//! Paragraph chunking of raw book text.

pub const MIN_PASSAGE_WORDS: usize = 30;
pub const MAX_PASSAGE_WORDS: usize = 60;

/// Number of maximal runs of non-whitespace characters.
pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

/// Splits `text` into paragraphs separated by one or more blank (whitespace-only) lines.
/// Paragraphs are trimmed; empty ones are never produced.
pub fn paragraphs(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start: Option<usize> = None;
    let mut end = 0;
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        let blank = line.trim().is_empty();
        if blank {
            if let Some(s) = start.take() {
                out.push(text[s..end].trim());
            }
        } else {
            if start.is_none() {
                start = Some(offset);
            }
            end = offset + line.len();
        }
        offset += line.len();
    }
    if let Some(s) = start {
        out.push(text[s..end].trim());
    }
    out
}

/// Keeps exactly the paragraphs whose word count lies in `[30, 60]`, in order.
pub fn chunk_book(text: &str) -> Vec<String> {
    paragraphs(text)
        .into_iter()
        .filter(|p| (MIN_PASSAGE_WORDS..=MAX_PASSAGE_WORDS).contains(&word_count(p)))
        .map(str::to_string)
        .collect()
}
