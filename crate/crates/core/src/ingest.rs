//! Annotation ingestion and the parser-agreement quality filter.
//!
//! Input is JSONL, one object per line:
//!
//! ```json
//! {"image_id": "a.png", "image_width": 1920, "image_height": 1080,
//!  "instruction": "open settings", "bbox": [x1, y1, x2, y2],
//!  "parser_boxes": [[x1, y1, x2, y2], ...], "platform": "web", "category": "icon"}
//! ```
//!
//! `parser_boxes`, `platform` and `category` are optional. A record is kept
//! when its best IoU against any parser box reaches the threshold.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BoundingBox};

pub const DEFAULT_IOU_THRESHOLD: f64 = 0.3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub image_id: String,
    pub image_width: u32,
    pub image_height: u32,
    #[serde(default)]
    pub instruction: String,
    pub bbox: BoundingBox<f64>,
    #[serde(default)]
    pub parser_boxes: Vec<BoundingBox<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub platform: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
}

impl AnnotationRecord {
    pub fn validate(&self) -> Result<()> {
        if self.image_width == 0 || self.image_height == 0 {
            return Err(Error::Format("image dimensions must be positive".into()));
        }
        if !self
            .bbox
            .within_image(self.image_width as f64, self.image_height as f64)
        {
            return Err(Error::Format(format!(
                "bbox {:?} outside {}x{} image",
                self.bbox.to_array(),
                self.image_width,
                self.image_height
            )));
        }
        Ok(())
    }

    /// Highest IoU between the ground truth and any parser box.
    pub fn best_parser_iou(&self) -> Option<f64> {
        self.parser_boxes
            .iter()
            .map(|p| iou(&self.bbox, p))
            .reduce(f64::max)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParseIssue {
    /// 1-based line number.
    pub line: usize,
    pub error: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParsedAnnotations {
    pub records: Vec<AnnotationRecord>,
    pub issues: Vec<ParseIssue>,
}

pub fn parse_annotations_from(reader: impl BufRead) -> Result<ParsedAnnotations> {
    let mut out = ParsedAnnotations::default();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed = serde_json::from_str::<AnnotationRecord>(&line)
            .map_err(|e| e.to_string())
            .and_then(|r| r.validate().map(|_| r).map_err(|e| e.to_string()));
        match parsed {
            Ok(r) => out.records.push(r),
            Err(error) => out.issues.push(ParseIssue { line: n + 1, error }),
        }
    }
    Ok(out)
}

pub fn parse_annotations(path: &Path) -> Result<ParsedAnnotations> {
    let f = std::fs::File::open(path)?;
    parse_annotations_from(BufReader::new(f))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropReason {
    LowIou,
    NoParserBoxes,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DroppedRecord {
    #[serde(flatten)]
    pub record: AnnotationRecord,
    pub drop_reason: DropReason,
    pub best_iou: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FilterOutcome {
    pub kept: Vec<AnnotationRecord>,
    pub dropped: Vec<DroppedRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterSummary {
    pub threshold: f64,
    pub total: usize,
    pub kept: usize,
    pub dropped_low_iou: usize,
    pub dropped_no_parser_boxes: usize,
    pub malformed_lines: usize,
    #[serde(default)]
    pub issues: Vec<ParseIssue>,
}

/// Keeps records whose best parser-box IoU is at least `threshold`,
/// preserving input order.
pub fn iou_filter(records: &[AnnotationRecord], threshold: f64) -> Result<FilterOutcome> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::InvalidArgument(format!(
            "IoU threshold must lie in [0, 1], got {threshold}"
        )));
    }
    let mut out = FilterOutcome::default();
    for r in records {
        match r.best_parser_iou() {
            None => out.dropped.push(DroppedRecord {
                record: r.clone(),
                drop_reason: DropReason::NoParserBoxes,
                best_iou: None,
            }),
            Some(best) if best >= threshold => out.kept.push(r.clone()),
            Some(best) => out.dropped.push(DroppedRecord {
                record: r.clone(),
                drop_reason: DropReason::LowIou,
                best_iou: Some(best),
            }),
        }
    }
    Ok(out)
}

impl FilterOutcome {
    pub fn summary(&self, threshold: f64, issues: &[ParseIssue]) -> FilterSummary {
        let count = |reason| self.dropped.iter().filter(|d| d.drop_reason == reason).count();
        FilterSummary {
            threshold,
            total: self.kept.len() + self.dropped.len(),
            kept: self.kept.len(),
            dropped_low_iou: count(DropReason::LowIou),
            dropped_no_parser_boxes: count(DropReason::NoParserBoxes),
            malformed_lines: issues.len(),
            issues: issues.to_vec(),
        }
    }
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for it in items {
        serde_json::to_writer(&mut f, it)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}
