//! Rendering detections as JSON lines or a text table.

use std::fmt::Write as _;

use serde::Serialize;

use crate::session::DetectionResult;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum OutputFormat {
    Json,
    Table,
}

#[derive(Serialize)]
struct Summary<'a> {
    image: &'a str,
    width: usize,
    height: usize,
    detections: usize,
    threshold: f64,
    max_det: usize,
}

#[derive(Serialize)]
struct SummaryRecord<'a> {
    summary: Summary<'a>,
}

/// One JSON object per detection, best first, then a `{"summary": ...}`
/// line. Every line ends in `\n`.
pub fn render_json(
    image: &str,
    result: &DetectionResult,
    threshold: f64,
    max_det: usize,
) -> String {
    let mut out = String::new();
    for det in &result.detections {
        out.push_str(&serde_json::to_string(det).expect("detections serialize"));
        out.push('\n');
    }
    let summary = SummaryRecord {
        summary: Summary {
            image,
            width: result.width,
            height: result.height,
            detections: result.detections.len(),
            threshold,
            max_det,
        },
    };
    out.push_str(&serde_json::to_string(&summary).expect("summary serializes"));
    out.push('\n');
    out
}

pub fn render_table(image: &str, result: &DetectionResult) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{image} ({}x{}): {} detections",
        result.width,
        result.height,
        result.detections.len()
    );
    let _ = writeln!(
        out,
        "{:>4}  {:>5}  {:>7}  {:>9}  {:>9}  {:>9}  {:>9}",
        "rank", "class", "score", "x1", "y1", "x2", "y2"
    );
    for (i, d) in result.detections.iter().enumerate() {
        let [x1, y1, x2, y2] = d.bbox;
        let _ = writeln!(
            out,
            "{:>4}  {:>5}  {:>7.4}  {x1:>9.2}  {y1:>9.2}  {x2:>9.2}  {y2:>9.2}",
            i + 1,
            d.class_id,
            d.score
        );
    }
    out
}
