//! Line-based text annotation format.
//!
//! One instance per line: `x1,y1,x2,y2,...,xn,yn<TAB>transcription`, UTF-8.
//! A transcription of `###` marks the instance DO-NOT-CARE. Everything after
//! the first tab belongs to the transcription verbatim.

use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::Polygon;

/// A ground-truth or predicted text instance.
#[derive(Debug, Clone, PartialEq)]
pub struct TextAnnotation {
    pub polygon: Polygon,
    pub transcription: String,
}

impl TextAnnotation {
    pub fn new(polygon: Polygon, transcription: impl Into<String>) -> Self {
        TextAnnotation {
            polygon,
            transcription: transcription.into(),
        }
    }

    /// DO-NOT-CARE instances contribute to ignore masks only.
    pub fn ignore(&self) -> bool {
        self.transcription == "###"
    }
}

pub fn parse_annotation_line(line: &str) -> Result<TextAnnotation> {
    let (coords, transcription) = line
        .split_once('\t')
        .ok_or_else(|| Error::parse("missing tab between coordinates and transcription"))?;
    let mut values = Vec::new();
    for tok in coords.split(',') {
        let tok = tok.trim();
        let v: f64 = tok
            .parse()
            .map_err(|_| Error::parse(format!("bad coordinate `{tok}`")))?;
        values.push(v);
    }
    if values.len() % 2 != 0 {
        return Err(Error::parse(format!(
            "odd coordinate count {}",
            values.len()
        )));
    }
    if values.len() < 6 {
        return Err(Error::parse(format!(
            "need at least 3 points, got {}",
            values.len() / 2
        )));
    }
    let pts = values.chunks(2).map(|c| (c[0], c[1])).collect();
    let polygon = Polygon::new(pts).map_err(|e| Error::parse(e.to_string()))?;
    Ok(TextAnnotation::new(polygon, transcription))
}

/// Parses a whole annotation file; blank lines are skipped and errors carry
/// 1-based line numbers.
pub fn parse_annotations(text: &str) -> Result<Vec<TextAnnotation>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let ann = parse_annotation_line(line)
            .map_err(|e| Error::parse(format!("line {}: {e}", i + 1)))?;
        out.push(ann);
    }
    Ok(out)
}

pub fn read_annotations(path: impl AsRef<Path>) -> Result<Vec<TextAnnotation>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::parse(format!("cannot read {}: {e}", path.display())))?;
    parse_annotations(&text).map_err(|e| Error::parse(format!("{}: {e}", path.display())))
}

pub fn format_annotation_line(ann: &TextAnnotation) -> String {
    let coords: Vec<String> = ann
        .polygon
        .vertices()
        .iter()
        .flat_map(|&(x, y)| [format_coord(x), format_coord(y)])
        .collect();
    format!("{}\t{}", coords.join(","), ann.transcription)
}

/// Atomic write (temp sibling + rename) of one annotation per line.
pub fn write_annotations(anns: &[TextAnnotation], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::new();
    for ann in anns {
        text.push_str(&format_annotation_line(ann));
        text.push('\n');
    }
    let tmp = crate::tensor::ptm_temp_sibling(path);
    std::fs::write(&tmp, text)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn format_coord(v: f64) -> String {
    // Display is shortest-round-trip, hence stable across runs.
    format!("{v}")
}
