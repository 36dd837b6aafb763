//! Detection result files: one instance per line as
//! `x1,y1,...,xn,yn<TAB>transcription<TAB>confidence`. The transcription
//! field may be empty (detection-only runs) and the confidence may be
//! omitted when reading third-party predictions.

use std::path::Path;

use kernelspot::geometry::Polygon;
use kernelspot::{Error, Result};

use crate::atomic_write;

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub polygon: Polygon,
    pub text: String,
    pub confidence: f64,
}

pub fn format_detection(d: &Detection) -> String {
    let coords: Vec<String> = d
        .polygon
        .vertices()
        .iter()
        .map(|&(x, y)| format!("{x:.2},{y:.2}"))
        .collect();
    format!("{}\t{}\t{:.4}", coords.join(","), d.text, d.confidence)
}

pub fn parse_detection_line(line: &str) -> Result<Detection> {
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() > 3 {
        return Err(Error::parse(format!(
            "expected `coords<TAB>text<TAB>confidence`, got {} fields",
            fields.len()
        )));
    }
    let nums: Vec<f64> = fields[0]
        .split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|_| Error::parse(format!("bad coordinate `{t}`")))
        })
        .collect::<Result<_>>()?;
    if nums.len() % 2 != 0 || nums.len() < 6 {
        return Err(Error::parse(format!(
            "coordinate list needs an even count of at least 6 values, got {}",
            nums.len()
        )));
    }
    let polygon = Polygon::new(nums.chunks(2).map(|p| (p[0], p[1])).collect())?;
    let confidence = match fields.get(2) {
        Some(t) => t
            .trim()
            .parse::<f64>()
            .map_err(|_| Error::parse(format!("bad confidence `{t}`")))?,
        None => 1.0,
    };
    Ok(Detection {
        polygon,
        text: fields.get(1).map(|t| t.to_string()).unwrap_or_default(),
        confidence,
    })
}

pub fn read_detections(path: impl AsRef<Path>) -> Result<Vec<Detection>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_detection_line(line).map_err(|e| {
            Error::parse(format!("{}:{}: {e}", path.display(), i + 1))
        })?);
    }
    Ok(out)
}

pub fn write_detections(dets: &[Detection], path: impl AsRef<Path>) -> Result<()> {
    let mut body = String::new();
    for d in dets {
        body.push_str(&format_detection(d));
        body.push('\n');
    }
    atomic_write(path.as_ref(), body.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square(o: f64) -> Polygon {
        Polygon::new(vec![(o, o), (o + 4.0, o), (o + 4.0, o + 4.0), (o, o + 4.0)]).unwrap()
    }

    #[test]
    fn write_read_round_trip_preserves_everything() {
        let dets = vec![
            Detection { polygon: square(0.0), text: "hi".into(), confidence: 0.875 },
            Detection { polygon: square(8.0), text: String::new(), confidence: 1.0 },
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("det.txt");
        write_detections(&dets, &path).unwrap();
        let back = read_detections(&path).unwrap();
        assert_eq!(back, dets);
    }

    #[test]
    fn short_forms_get_defaults() {
        let d = parse_detection_line("0,0,4,0,4,4,0,4\thello").unwrap();
        assert_eq!(d.text, "hello");
        assert_eq!(d.confidence, 1.0);
        let d = parse_detection_line("0,0,4,0,4,4,0,4").unwrap();
        assert_eq!(d.text, "");
    }

    #[test]
    fn malformed_lines_name_their_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("det.txt");
        std::fs::write(&path, "0,0,4,0,4,4,0,4\tok\t0.5\n0,0,oops\tbad\n").unwrap();
        let err = read_detections(&path).unwrap_err().to_string();
        assert!(err.contains(":2:"), "missing line number in {err}");
        assert!(parse_detection_line("0,0,4,0\tx\t1").is_err(), "too few coords");
        assert!(parse_detection_line("0,0,4,0,4,4\ta\t1\textra").is_err());
    }
}
