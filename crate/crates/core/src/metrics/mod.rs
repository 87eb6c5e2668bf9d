//! Evaluation metrics and run-level report assembly.

pub mod chrf;
pub mod external;
pub mod report;
pub mod rouge;

pub use chrf::chrf_pp;
pub use external::{ScorerClient, ScorerRequest, ScorerResponse};
pub use report::{evaluate_run, render_table, EvalContext, MetricReport};
pub use rouge::{rouge_l, rouge_l_text, RougeScore};

use crate::error::{Error, Result};
use crate::vision::{cosine, TextEmbedding, VisualEmbedding};

pub const CLIP_SCORE_WEIGHT: f64 = 2.5;

/// Metric keys in report column order, with display headers.
pub const COLUMNS: [(&str, &str); 7] = [
    ("rouge_l", "ROUGE-L"),
    ("chrf_pp", "ChrF++"),
    ("moverscore", "MoverScore"),
    ("bertscore", "BERTScore"),
    ("bleurt", "BLEURT"),
    ("bartscore", "BARTScore"),
    ("clip_score", "CLIPScore"),
];

/// Metrics computed by an external scorer, reported on their native scale.
pub const EXTERNAL_METRICS: [&str; 4] = ["moverscore", "bertscore", "bleurt", "bartscore"];

/// Factor applied when a corpus value is displayed.
pub fn display_scale(metric: &str) -> f64 {
    if EXTERNAL_METRICS.contains(&metric) {
        1.0
    } else {
        100.0
    }
}

/// `w · max(cos(image, text), 0)`.
pub fn clip_score(image: &VisualEmbedding, text: &TextEmbedding, w: f64) -> Result<f64> {
    if image.model_id != text.model_id {
        return Err(Error::config(format!(
            "image embedding from `{}` but text embedding from `{}`",
            image.model_id, text.model_id
        )));
    }
    if image.dim() != text.dim() {
        return Err(Error::config(format!("embedding widths differ: {} vs {}", image.dim(), text.dim())));
    }
    Ok(w * cosine(&image.vector, &text.vector).max(0.0))
}
