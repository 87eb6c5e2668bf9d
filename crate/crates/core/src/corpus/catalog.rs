use std::collections::BTreeMap;
use std::path::Path;

use super::genre::Genre;
use crate::error::{Error, Result};

/// Case-folds, collapses internal whitespace and strips leading/trailing punctuation.
pub fn normalize_title(title: &str) -> String {
    let folded = title.to_lowercase();
    let collapsed = folded.split_whitespace().collect::<Vec<_>>().join(" ");
    collapsed
        .trim_matches(|c: char| c.is_ascii_punctuation() || c.is_whitespace() || is_unicode_punct(c))
        .to_string()
}

fn is_unicode_punct(c: char) -> bool {
    matches!(c, '“' | '”' | '‘' | '’' | '«' | '»' | '—' | '–' | '…' | '¿' | '¡')
}

/// Book title → ordered genre labels.
#[derive(Debug, Clone, Default)]
pub struct GenreCatalog {
    entries: BTreeMap<String, Vec<Genre>>,
}

impl GenreCatalog {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts an entry; labels are mapped onto the canonical set and de-duplicated
    /// keeping first occurrence.
    pub fn insert<S: AsRef<str>>(&mut self, title: &str, labels: &[S]) {
        let mut genres: Vec<Genre> = Vec::new();
        for label in labels {
            let label = label.as_ref().trim();
            if label.is_empty() {
                continue;
            }
            let g = Genre::from_catalog_label(label);
            if !genres.contains(&g) {
                genres.push(g);
            }
        }
        if !genres.is_empty() {
            self.entries.insert(normalize_title(title), genres);
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, title: &str) -> Option<&[Genre]> {
        self.entries.get(&normalize_title(title)).map(Vec::as_slice)
    }

    /// Reads a delimited table with `title` and `genres` columns; genres are
    /// semicolon-separated and order-significant. `.tsv` files are tab-delimited,
    /// everything else comma-delimited.
    pub fn from_path(path: &Path) -> Result<Self> {
        let delimiter = match path.extension().and_then(|e| e.to_str()) {
            Some("tsv") => b'\t',
            _ => b',',
        };
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_reader(file, delimiter, &path.display().to_string())
    }

    pub fn from_reader<R: std::io::Read>(reader: R, delimiter: u8, name: &str) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .delimiter(delimiter)
            .flexible(true)
            .from_reader(reader);
        let headers = rdr
            .headers()
            .map_err(|e| Error::input(name, e.to_string()))?
            .clone();
        let col = |want: &str| {
            headers
                .iter()
                .position(|h| h.trim().eq_ignore_ascii_case(want))
                .ok_or_else(|| Error::input(name, format!("missing `{want}` column")))
        };
        let title_col = col("title")?;
        let genres_col = col("genres")?;
        let mut catalog = GenreCatalog::new();
        for row in rdr.records() {
            let row = row.map_err(|e| Error::input(name, e.to_string()))?;
            let (Some(title), Some(genres)) = (row.get(title_col), row.get(genres_col)) else {
                continue;
            };
            let labels: Vec<&str> = genres.split(';').collect();
            catalog.insert(title, &labels);
        }
        Ok(catalog)
    }
}

/// Catalog lookup on the normalized title. `None` means the book is excluded.
pub fn match_genres(title: &str, catalog: &GenreCatalog) -> Option<Vec<Genre>> {
    catalog.get(title).map(<[Genre]>::to_vec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn normalization_identity() {
        let mut cat = GenreCatalog::new();
        cat.insert("the long road", &["romance", "fantasy"]);
        assert_eq!(
            match_genres("The Long Road", &cat),
            Some(vec![Genre::Romance, Genre::Fantasy])
        );
        assert_eq!(match_genres("Another Book", &cat), None);
    }

    #[test]
    fn normalize_strips_and_collapses() {
        assert_eq!(normalize_title("  \"The   Long Road!\" "), "the long road");
        assert_eq!(normalize_title("…Dawn’s Edge…"), "dawn’s edge");
    }

    #[test]
    fn non_canonical_labels_become_other() {
        let mut cat = GenreCatalog::new();
        cat.insert("x", &["Erotica", "Romance", "Poetry"]);
        assert_eq!(cat.get("x").unwrap(), &[Genre::Other, Genre::Romance]);
    }

    #[test]
    fn perturbed_titles_all_match() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut cat = GenreCatalog::new();
        let titles: Vec<String> = (0..100)
            .map(|i| format!("the secret of book number {i}"))
            .collect();
        for t in &titles {
            cat.insert(t, &["mystery"]);
        }
        let puncts = ['"', '\'', '.', '!', '?', ',', ':', '(', ')'];
        let mut matched = 0;
        for t in &titles {
            let mut s: String = t
                .chars()
                .map(|c| if rng.random_bool(0.5) { c.to_ascii_uppercase() } else { c })
                .collect();
            s = s.replace(' ', if rng.random_bool(0.3) { "   " } else { " " });
            for _ in 0..rng.random_range(0..3) {
                s.insert(0, puncts[rng.random_range(0..puncts.len())]);
            }
            for _ in 0..rng.random_range(0..3) {
                s.push(puncts[rng.random_range(0..puncts.len())]);
            }
            if rng.random_bool(0.5) {
                s = format!("  {s}\t");
            }
            if match_genres(&s, &cat).is_some() {
                matched += 1;
            }
        }
        assert_eq!(matched, 100);
    }

    #[test]
    fn reads_delimited_tables() {
        let csv = "title,genres\n\"The Long Road\",romance;fantasy;teen\nEmpty,\n";
        let cat = GenreCatalog::from_reader(csv.as_bytes(), b',', "mem").unwrap();
        assert_eq!(cat.len(), 1);
        assert_eq!(cat.get("the long road").unwrap()[2], Genre::Teen);

        let tsv = "genres\ttitle\nhorror;vampires\tNight\n";
        let cat = GenreCatalog::from_reader(tsv.as_bytes(), b'\t', "mem").unwrap();
        assert_eq!(cat.get("NIGHT").unwrap(), &[Genre::Horror, Genre::Vampires]);

        let bad = "name,labels\nx,y\n";
        assert!(GenreCatalog::from_reader(bad.as_bytes(), b',', "mem").is_err());
    }
}
