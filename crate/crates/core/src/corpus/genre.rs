use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The sixteen book genres used to label passages. Catalog labels outside this set
/// collapse to [`Genre::Other`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum Genre {
    Romance,
    Fantasy,
    ScienceFiction,
    NewAdult,
    YoungAdult,
    Thriller,
    Mystery,
    Vampires,
    Horror,
    Teen,
    Adventure,
    Literature,
    Humor,
    Historical,
    Themes,
    Other,
}

impl Genre {
    pub const ALL: [Genre; 16] = [
        Genre::Romance,
        Genre::Fantasy,
        Genre::ScienceFiction,
        Genre::NewAdult,
        Genre::YoungAdult,
        Genre::Thriller,
        Genre::Mystery,
        Genre::Vampires,
        Genre::Horror,
        Genre::Teen,
        Genre::Adventure,
        Genre::Literature,
        Genre::Humor,
        Genre::Historical,
        Genre::Themes,
        Genre::Other,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Genre::Romance => "romance",
            Genre::Fantasy => "fantasy",
            Genre::ScienceFiction => "science fiction",
            Genre::NewAdult => "new adult",
            Genre::YoungAdult => "young adult",
            Genre::Thriller => "thriller",
            Genre::Mystery => "mystery",
            Genre::Vampires => "vampires",
            Genre::Horror => "horror",
            Genre::Teen => "teen",
            Genre::Adventure => "adventure",
            Genre::Literature => "literature",
            Genre::Humor => "humor",
            Genre::Historical => "historical",
            Genre::Themes => "themes",
            Genre::Other => "other",
        }
    }

    /// Strict lookup of a canonical label after case-folding and treating `-`/`_` as spaces.
    pub fn from_canonical(label: &str) -> Option<Genre> {
        let norm = normalize_label(label);
        Genre::ALL.iter().copied().find(|g| g.label() == norm)
    }

    /// Lenient lookup used when ingesting catalogs: anything unknown is `Other`.
    pub fn from_catalog_label(label: &str) -> Genre {
        Genre::from_canonical(label).unwrap_or(Genre::Other)
    }

    /// Resolves a style name to the genre whose passages train it. Besides the canonical
    /// labels, `action` is accepted and selects adventure-labelled books.
    pub fn from_style(style: &str) -> Result<Genre> {
        let norm = normalize_label(style);
        if let Some(g) = Genre::from_canonical(&norm) {
            return Ok(g);
        }
        match norm.as_str() {
            "action" => Ok(Genre::Adventure),
            _ => Err(Error::config(format!("unknown style label `{style}`"))),
        }
    }
}

fn normalize_label(label: &str) -> String {
    label
        .to_lowercase()
        .replace(['-', '_'], " ")
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

impl fmt::Display for Genre {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Genre {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Genre::from_canonical(s).ok_or_else(|| Error::config(format!("unknown genre `{s}`")))
    }
}

impl From<Genre> for String {
    fn from(g: Genre) -> String {
        g.label().to_string()
    }
}

impl TryFrom<String> for Genre {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}
