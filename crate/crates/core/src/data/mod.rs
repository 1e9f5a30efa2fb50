//! Pen trajectories: ingestion, normalization, augmentation, rendering and a
//! synthetic generator.

mod augment;
mod io;
mod normalize;
mod render;
pub mod synth;
mod vocab;

pub use augment::{augment, perturb, AugmentConfig};
pub use io::{load_dataset, parse_dataset, save_dataset, to_jsonl};
pub use normalize::{normalize, MAX_DEGENERATE_WIDTH};
pub use render::{ink_pixel, render, RenderedImage};
pub use vocab::{Vocabulary, EOS, PAD, RESERVED, SOS};

use std::path::PathBuf;

use thiserror::Error;

/// Rendered image height; normalized trajectories span `[0, IMAGE_HEIGHT]` vertically.
pub const IMAGE_HEIGHT: usize = 32;

/// One pen sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
    /// Pen touching the surface at this sample.
    pub down: bool,
}

impl Point {
    pub fn new(x: f64, y: f64, down: bool) -> Self {
        Point { x, y, down }
    }
}

/// A pen signal with its transcript.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectorySequence {
    pub id: String,
    pub points: Vec<Point>,
    pub text: String,
}

impl TrajectorySequence {
    pub fn new(id: impl Into<String>, points: Vec<Point>, text: impl Into<String>) -> Self {
        TrajectorySequence {
            id: id.into(),
            points,
            text: text.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Checks the structural invariants: at least two points, all finite.
    pub fn validate(&self) -> Result<(), DataError> {
        if self.points.len() < 2 {
            return Err(DataError::TooShort {
                id: self.id.clone(),
                len: self.points.len(),
            });
        }
        if self
            .points
            .iter()
            .any(|p| !p.x.is_finite() || !p.y.is_finite())
        {
            return Err(DataError::Invalid {
                id: self.id.clone(),
                reason: "non-finite coordinate".into(),
            });
        }
        Ok(())
    }

    /// `(min_x, max_x, min_y, max_y)` over all points.
    pub fn bounds(&self) -> (f64, f64, f64, f64) {
        self.points.iter().fold(
            (
                f64::INFINITY,
                f64::NEG_INFINITY,
                f64::INFINITY,
                f64::NEG_INFINITY,
            ),
            |(x0, x1, y0, y1), p| (x0.min(p.x), x1.max(p.x), y0.min(p.y), y1.max(p.y)),
        )
    }
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {reason}")]
    Line { line: usize, reason: String },
    #[error("dataset {0} is empty")]
    EmptyFile(PathBuf),
    #[error("sequence {id}: needs at least 2 points, got {len}")]
    TooShort { id: String, len: usize },
    #[error("sequence {id}: {reason}")]
    Invalid { id: String, reason: String },
    #[error("cannot build a vocabulary from an empty dataset")]
    EmptyDataset,
    #[error("transcript {text:?} contains reserved character {ch:?}")]
    ReservedChar { text: String, ch: char },
    #[error("character {0:?} is not in the vocabulary")]
    UnknownChar(char),
}
