use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DataError, Point, TrajectorySequence};

/// On-disk record: one JSON object per line.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    id: String,
    points: Vec<[f64; 3]>,
    #[serde(default)]
    text: String,
}

fn parse_line(line: &str, number: usize) -> Result<TrajectorySequence, DataError> {
    let bad = |reason: String| DataError::Line {
        line: number,
        reason,
    };
    let rec: Record = serde_json::from_str(line).map_err(|e| bad(e.to_string()))?;
    let mut points = Vec::with_capacity(rec.points.len());
    for (i, [x, y, s]) in rec.points.into_iter().enumerate() {
        let down = if s == 1.0 {
            true
        } else if s == 0.0 {
            false
        } else {
            return Err(bad(format!("point {i}: pen state must be 0 or 1, got {s}")));
        };
        if !x.is_finite() || !y.is_finite() {
            return Err(bad(format!("point {i}: non-finite coordinate")));
        }
        points.push(Point::new(x, y, down));
    }
    let seq = TrajectorySequence::new(rec.id, points, rec.text);
    seq.validate().map_err(|e| bad(e.to_string()))?;
    Ok(seq)
}

/// Parses JSONL text. Blank lines are skipped; line numbers are 1-based.
pub fn parse_dataset(text: &str) -> Result<Vec<TrajectorySequence>, DataError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse_line(l, i + 1))
        .collect()
}

pub fn load_dataset(path: &Path) -> Result<Vec<TrajectorySequence>, DataError> {
    let text = fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let seqs = parse_dataset(&text)?;
    if seqs.is_empty() {
        return Err(DataError::EmptyFile(path.to_path_buf()));
    }
    Ok(seqs)
}

pub fn to_jsonl(seqs: &[TrajectorySequence]) -> String {
    let mut out = String::new();
    for seq in seqs {
        let rec = Record {
            id: seq.id.clone(),
            points: seq
                .points
                .iter()
                .map(|p| [p.x, p.y, if p.down { 1.0 } else { 0.0 }])
                .collect(),
            text: seq.text.clone(),
        };
        out.push_str(&serde_json::to_string(&rec).expect("records always serialize"));
        out.push('\n');
    }
    out
}

pub fn save_dataset(path: &Path, seqs: &[TrajectorySequence]) -> Result<(), DataError> {
    fs::write(path, to_jsonl(seqs)).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}
