use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generation::GenerationRecord;
use crate::vision::{resolve_image, ContrastiveEncoder, EmbeddingCache};

use super::external::{ScorerClient, ScorerItem, ScorerRequest};
use super::{chrf_pp, clip_score, display_scale, rouge_l_text, CLIP_SCORE_WEIGHT, COLUMNS, EXTERNAL_METRICS};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub label: String,
    pub per_item: BTreeMap<String, BTreeMap<String, f64>>,
    /// Mean over items of each metric, on the raw scale.
    pub corpus: BTreeMap<String, f64>,
    pub unavailable: Vec<String>,
    pub diagnostics: Vec<String>,
    /// Items whose story exceeded the text window for CLIPScore: `[kept, total]` tokens.
    pub clip_truncation: BTreeMap<String, [usize; 2]>,
}

impl MetricReport {
    /// Recomputes corpus means from `per_item`, summing in item-id order.
    pub fn aggregate(&mut self) {
        let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
        for scores in self.per_item.values() {
            for (m, v) in scores {
                let e = sums.entry(m.clone()).or_default();
                e.0 += v;
                e.1 += 1;
            }
        }
        self.corpus = sums.into_iter().map(|(m, (s, n))| (m, s / n as f64)).collect();
    }
}

pub struct EvalContext<'a> {
    pub images_root: Option<&'a Path>,
    pub encoder: Option<&'a dyn ContrastiveEncoder>,
    pub cache: Option<&'a mut EmbeddingCache>,
    pub scorer: Option<&'a ScorerClient>,
}

impl EvalContext<'_> {
    pub fn text_only() -> Self {
        Self {
            images_root: None,
            encoder: None,
            cache: None,
            scorer: None,
        }
    }
}

pub fn item_ids(records: &[GenerationRecord]) -> Vec<String> {
    let mut seen: BTreeMap<&str, usize> = BTreeMap::new();
    records
        .iter()
        .map(|r| {
            let n = seen.entry(r.image_ref.as_str()).or_insert(0);
            *n += 1;
            if *n == 1 {
                r.image_ref.clone()
            } else {
                format!("{}#{}", r.image_ref, n)
            }
        })
        .collect()
}

/// Scores every record against its image's gold captions. Records without references
/// are skipped with a diagnostic; metrics whose backend is missing or failing are listed
/// as unavailable rather than zeroed.
pub fn evaluate_run(
    label: &str,
    records: &[GenerationRecord],
    gold: &BTreeMap<String, Vec<String>>,
    ctx: &mut EvalContext<'_>,
) -> Result<MetricReport> {
    let mut report = MetricReport {
        label: label.to_string(),
        ..Default::default()
    };
    let mut kept: Vec<(String, &GenerationRecord, &[String])> = Vec::new();
    for (id, rec) in item_ids(records).into_iter().zip(records) {
        if let Some(err) = &rec.error {
            report.diagnostics.push(format!("{id}: generation failed ({err}); item skipped"));
            continue;
        }
        match gold.get(&rec.image_ref).filter(|refs| !refs.is_empty()) {
            Some(refs) => kept.push((id, rec, refs)),
            None => report.diagnostics.push(format!("{id}: no gold captions; item skipped")),
        }
    }

    for (id, rec, refs) in &kept {
        let refs: Vec<&str> = refs.iter().map(String::as_str).collect();
        let scores = report.per_item.entry(id.clone()).or_default();
        scores.insert("rouge_l".into(), rouge_l_text(&rec.story, &refs).f);
        scores.insert("chrf_pp".into(), chrf_pp(&rec.story, &refs));
    }

    match (ctx.encoder, ctx.images_root) {
        (Some(enc), Some(root)) => {
            for (id, rec, _) in &kept {
                let path = resolve_image(root, &rec.image_ref);
                let image = match ctx.cache.as_deref_mut() {
                    Some(c) => c.image(enc, &path, &rec.image_ref),
                    None => enc.encode_image(&path, &rec.image_ref),
                };
                let text = if rec.story.trim().is_empty() {
                    Err(Error::input(id.clone(), "empty story"))
                } else {
                    match ctx.cache.as_deref_mut() {
                        Some(c) => c.text(enc, &rec.story),
                        None => enc.encode_text(&rec.story),
                    }
                };
                match image.and_then(|i| text.and_then(|t| clip_score(&i, &t, CLIP_SCORE_WEIGHT))) {
                    Ok(s) => {
                        report.per_item.get_mut(id).expect("item present").insert("clip_score".into(), s);
                        let (used, total) = enc.text_window_usage(&rec.story);
                        if used < total {
                            report.clip_truncation.insert(id.clone(), [used, total]);
                        }
                    }
                    Err(e) => report.diagnostics.push(format!("{id}: CLIPScore not computed: {e}")),
                }
            }
        }
        _ => report.unavailable.push("clip_score".into()),
    }

    for metric in EXTERNAL_METRICS {
        let Some(client) = ctx.scorer else {
            report.unavailable.push(metric.into());
            continue;
        };
        let request = ScorerRequest {
            metric: metric.into(),
            items: kept
                .iter()
                .map(|(id, rec, refs)| ScorerItem {
                    id: id.clone(),
                    candidate: rec.story.clone(),
                    references: refs.to_vec(),
                })
                .collect(),
        };
        match client.score(&request) {
            Ok(resp) => {
                for s in resp.scores {
                    report.per_item.get_mut(&s.id).expect("validated id").insert(metric.into(), s.score);
                }
            }
            Err(e @ (Error::Unavailable(_) | Error::Protocol { .. })) => {
                report.diagnostics.push(format!("{metric}: {e}"));
                report.unavailable.push(metric.into());
            }
            Err(e) => return Err(e),
        }
    }
    report.unavailable.sort_by_key(|m| COLUMNS.iter().position(|(k, _)| k == m));
    report.aggregate();
    Ok(report)
}

/// Aligned plain-text table with one row per report, columns in metric order.
/// Native metrics are shown ×100, external ones on their own scale.
pub fn render_table(reports: &[MetricReport]) -> String {
    let mut rows = vec![std::iter::once("Model".to_string())
        .chain(COLUMNS.iter().map(|(_, h)| h.to_string()))
        .collect::<Vec<_>>()];
    for r in reports {
        let mut row = vec![r.label.clone()];
        for (key, _) in COLUMNS {
            row.push(match r.corpus.get(key) {
                Some(v) => format!("{:.2}", v * display_scale(key)),
                None => "n/a".into(),
            });
        }
        rows.push(row);
    }
    let widths: Vec<usize> = (0..rows[0].len())
        .map(|c| rows.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for (i, row) in rows.iter().enumerate() {
        let cells: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(c, s)| if c == 0 { format!("{s:<w$}", w = widths[c]) } else { format!("{s:>w$}", w = widths[c]) })
            .collect();
        out.push_str(cells.join("  ").trim_end());
        out.push('\n');
        if i == 0 {
            out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
            out.push('\n');
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generation::DecodeConfig;
    use crate::metrics::external::stub;
    use crate::vision::{ConceptEncoder, ConceptEncoderConfig};
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn record(image_ref: &str, story: &str) -> GenerationRecord {
        GenerationRecord {
            image_ref: image_ref.into(),
            style: "romance".into(),
            story: story.into(),
            token_count: 0,
            token_ids: vec![],
            finished: true,
            score: 0.0,
            config: DecodeConfig::default(),
            seed: 0,
            model_manifest: BTreeMap::new(),
            error: None,
        }
    }

    fn gold() -> BTreeMap<String, Vec<String>> {
        [
            ("a.png", vec!["a red ball on grass", "a ball"]),
            ("b.png", vec!["two blue birds"]),
            ("c.png", vec!["an old yellow car"]),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v.into_iter().map(String::from).collect()))
        .collect()
    }

    #[test]
    fn exact_candidate_scores_one() {
        let r = evaluate_run("x", &[record("b.png", "two blue birds")], &gold(), &mut EvalContext::text_only()).unwrap();
        assert_eq!(r.corpus["rouge_l"], 1.0);
        assert!((r.corpus["chrf_pp"] - 1.0).abs() < 1e-12);
        assert!(r.unavailable.contains(&"clip_score".to_string()));
        assert_eq!(r.unavailable.len(), 5);
    }

    #[test]
    fn corpus_is_mean_and_permutation_invariant() {
        let recs = vec![
            record("a.png", "the red ball rolled"),
            record("b.png", "birds flew far away"),
            record("c.png", "a yellow car waited"),
            record("zzz.png", "no references here"),
        ];
        let r = evaluate_run("x", &recs, &gold(), &mut EvalContext::text_only()).unwrap();
        assert_eq!(r.per_item.len(), 3);
        assert_eq!(r.diagnostics.len(), 1);
        for m in ["rouge_l", "chrf_pp"] {
            let vals: Vec<f64> = r.per_item.values().map(|s| s[m]).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            assert!((r.corpus[m] - mean).abs() <= 1e-9);
        }
        let mut shuffled = recs.clone();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(1));
        let r2 = evaluate_run("x", &shuffled, &gold(), &mut EvalContext::text_only()).unwrap();
        assert_eq!(r.corpus, r2.corpus);
    }

    #[test]
    fn external_scores_via_stub_and_unavailable_on_failure() {
        let addr = stub::spawn(4, stub::constant(0.5));
        let client = ScorerClient::new(addr);
        let mut ctx = EvalContext {
            scorer: Some(&client),
            ..EvalContext::text_only()
        };
        let recs = vec![record("a.png", "ball"), record("b.png", "birds")];
        let r = evaluate_run("x", &recs, &gold(), &mut ctx).unwrap();
        for m in EXTERNAL_METRICS {
            assert_eq!(r.corpus[m], 0.5);
        }
        let dead = ScorerClient {
            backoff: std::time::Duration::from_millis(1),
            ..ScorerClient::new("127.0.0.1:9")
        };
        let mut ctx = EvalContext {
            scorer: Some(&dead),
            ..EvalContext::text_only()
        };
        let r = evaluate_run("x", &recs, &gold(), &mut ctx).unwrap();
        assert!(EXTERNAL_METRICS.iter().all(|m| r.unavailable.contains(&m.to_string()) && !r.corpus.contains_key(*m)));
    }

    #[test]
    fn clip_computed_with_encoder_and_undecodable_image_is_diagnosed() {
        let dir = tempfile::tempdir().unwrap();
        image::RgbImage::from_pixel(16, 16, image::Rgb([220, 30, 30])).save(dir.path().join("a.png")).unwrap();
        std::fs::write(dir.path().join("b.png"), b"broken").unwrap();
        let enc = ConceptEncoder::new(ConceptEncoderConfig::default()).unwrap();
        let mut ctx = EvalContext {
            images_root: Some(dir.path()),
            encoder: Some(&enc),
            ..EvalContext::text_only()
        };
        let long = "red ".repeat(100);
        let recs = vec![record("a.png", &long), record("b.png", "birds")];
        let r = evaluate_run("x", &recs, &gold(), &mut ctx).unwrap();
        assert!(r.per_item["a.png"]["clip_score"] > 0.0);
        assert!(!r.per_item["b.png"].contains_key("clip_score"));
        assert!(r.diagnostics.iter().any(|d| d.contains("b.png")));
        assert_eq!(r.clip_truncation["a.png"], [77, 100]);
    }

    #[test]
    fn table_has_header_order_and_scales() {
        let mut r = MetricReport {
            label: "PPST-romance".into(),
            ..Default::default()
        };
        r.corpus.insert("rouge_l".into(), 0.1009);
        r.corpus.insert("bartscore".into(), -3.86);
        r.corpus.insert("clip_score".into(), 0.6921);
        let t = render_table(&[r]);
        let header: Vec<&str> = t.lines().next().unwrap().split_whitespace().collect();
        assert_eq!(header, ["Model", "ROUGE-L", "ChrF++", "MoverScore", "BERTScore", "BLEURT", "BARTScore", "CLIPScore"]);
        let row: Vec<&str> = t.lines().nth(2).unwrap().split_whitespace().collect();
        assert_eq!(row, ["PPST-romance", "10.09", "n/a", "n/a", "n/a", "n/a", "-3.86", "69.21"]);
    }
}
