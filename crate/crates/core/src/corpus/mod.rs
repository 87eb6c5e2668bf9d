//! Corpus construction: book paragraphs labelled with genres, and image–caption pairs.

mod captions;
mod catalog;
mod chunk;
mod genre;

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use captions::{load_coco_captions, subsample, ImageCaptionPair, Split};
pub use catalog::{match_genres, normalize_title, GenreCatalog};
pub use chunk::{chunk_book, paragraphs, word_count, MAX_PASSAGE_WORDS, MIN_PASSAGE_WORDS};
pub use genre::Genre;

use crate::error::{Error, Result};

/// Number of leading catalog genres consulted when deciding a passage's style.
pub const STYLE_GENRE_WINDOW: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StyledPassage {
    pub text: String,
    pub word_count: usize,
    pub genres: Vec<Genre>,
    pub source_title: String,
}

impl StyledPassage {
    pub fn new(text: impl Into<String>, genres: Vec<Genre>, source_title: impl Into<String>) -> Result<Self> {
        let text = text.into();
        let source_title = source_title.into();
        let wc = word_count(&text);
        if !(MIN_PASSAGE_WORDS..=MAX_PASSAGE_WORDS).contains(&wc) {
            return Err(Error::input(&source_title, format!("passage has {wc} words")));
        }
        if genres.is_empty() {
            return Err(Error::input(&source_title, "passage without genres"));
        }
        if paragraphs(&text).len() != 1 {
            return Err(Error::input(&source_title, "passage spans a paragraph break"));
        }
        Ok(Self {
            text,
            word_count: wc,
            genres,
            source_title,
        })
    }

    /// True iff `genre` is among the first three labels.
    pub fn has_style(&self, genre: Genre) -> bool {
        self.genres.iter().take(STYLE_GENRE_WINDOW).any(|&g| g == genre)
    }
}

/// Retains passages whose first three genres include `style`.
pub fn filter_by_style(passages: &[StyledPassage], style: &str) -> Result<Vec<StyledPassage>> {
    let genre = Genre::from_style(style)?;
    Ok(passages.iter().filter(|p| p.has_style(genre)).cloned().collect())
}

/// A raw book as read from disk.
#[derive(Debug, Clone)]
pub struct Book {
    pub title: String,
    pub text: String,
}

/// Reads every `*.txt` file in `dir` (non-recursive). Titles come from the file stem with
/// underscores read as spaces. Books are returned sorted by file name.
pub fn load_books(dir: &Path) -> Result<Vec<Book>> {
    let mut entries: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|e| e == "txt"))
        .collect();
    entries.sort();
    entries
        .into_iter()
        .map(|p| {
            let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
            let title = p
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or_default()
                .replace('_', " ");
            Ok(Book { title, text })
        })
        .collect()
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
pub struct CorpusStats {
    pub books_total: usize,
    pub books_matched: usize,
    pub passages: usize,
    /// Passages carrying each genre anywhere in their label list; all sixteen keys present.
    pub genre_counts: BTreeMap<String, usize>,
}

/// Chunks and labels books. Unmatched books are dropped. Output is sorted by
/// `(source_title, passage index)` regardless of input order.
pub fn build_styled_corpus(books: &[Book], catalog: &GenreCatalog) -> (Vec<StyledPassage>, CorpusStats) {
    let mut keyed: Vec<((String, usize), StyledPassage)> = Vec::new();
    let mut stats = CorpusStats {
        books_total: books.len(),
        genre_counts: Genre::ALL.iter().map(|g| (g.label().to_string(), 0)).collect(),
        ..Default::default()
    };
    for book in books {
        let Some(genres) = match_genres(&book.title, catalog) else {
            tracing::debug!(title = %book.title, "no catalog entry; book excluded");
            continue;
        };
        stats.books_matched += 1;
        for (i, text) in chunk_book(&book.text).into_iter().enumerate() {
            let wc = word_count(&text);
            keyed.push((
                (book.title.clone(), i),
                StyledPassage {
                    text,
                    word_count: wc,
                    genres: genres.clone(),
                    source_title: book.title.clone(),
                },
            ));
        }
    }
    keyed.sort_by(|a, b| a.0.cmp(&b.0));
    let passages: Vec<StyledPassage> = keyed.into_iter().map(|(_, p)| p).collect();
    for p in &passages {
        for g in &p.genres {
            *stats.genre_counts.entry(g.label().to_string()).or_default() += 1;
        }
    }
    stats.passages = passages.len();
    (passages, stats)
}
