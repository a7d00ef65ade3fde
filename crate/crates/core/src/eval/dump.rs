//! Plain-text prediction dumps, one detection per line:
//! `sequence,frame,x,y,z,w,l,h,heading,score`.
//!
//! Floats are written in Rust's shortest round-trip form, so a dump read back
//! scores exactly like the detections it was written from.

use std::fmt::Write as _;

use crate::detector::Detection;
use crate::geometry::{BoundingBox, ObjectClass};

pub const DUMP_HEADER: &str = "sequence,frame,x,y,z,w,l,h,heading,score";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PredictionRecord {
    pub sequence: usize,
    pub frame: usize,
    pub detection: Detection,
}

pub fn render_predictions(records: &[PredictionRecord]) -> String {
    let mut s = String::from(DUMP_HEADER);
    s.push('\n');
    for r in records {
        let b = &r.detection.bbox;
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{}",
            r.sequence, r.frame, b.center[0], b.center[1], b.center[2], b.size[0], b.size[1], b.size[2], b.heading, r.detection.score
        );
    }
    s
}

/// Parses a dump; boxes are labeled `class`. Errors name the offending line.
pub fn parse_predictions(text: &str, class: ObjectClass) -> Result<Vec<PredictionRecord>, String> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line == DUMP_HEADER {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 10 {
            return Err(format!("line {}: expected 10 fields, found {}", i + 1, fields.len()));
        }
        let int = |k: usize| fields[k].trim().parse::<usize>().map_err(|e| format!("line {}: field {}: {e}", i + 1, k + 1));
        let float = |k: usize| fields[k].trim().parse::<f64>().map_err(|e| format!("line {}: field {}: {e}", i + 1, k + 1));
        let (sequence, frame) = (int(0)?, int(1)?);
        let v: Vec<f64> = (2..10).map(float).collect::<Result<_, _>>()?;
        let bbox = BoundingBox::new([v[0], v[1], v[2]], [v[3], v[4], v[5]], v[6], 0, class)
            .map_err(|e| format!("line {}: {e}", i + 1))?;
        if !v[7].is_finite() {
            return Err(format!("line {}: non-finite score", i + 1));
        }
        out.push(PredictionRecord { sequence, frame, detection: Detection { bbox, score: v[7] } });
    }
    Ok(out)
}
