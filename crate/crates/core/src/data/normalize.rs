use super::{DataError, Point, TrajectorySequence, IMAGE_HEIGHT};

/// Horizontal extent a flat (zero-height) trajectory is shrunk to, at most.
pub const MAX_DEGENERATE_WIDTH: f64 = 512.0;

/// Maps `y` affinely onto `[0, 32]` and `x` with the same factor so that
/// `min(x) == 0`. Flat inputs keep their width (shrunk to at most 512 px)
/// and are centered vertically at 16.
pub fn normalize(seq: &TrajectorySequence) -> Result<TrajectorySequence, DataError> {
    seq.validate()?;
    let (x0, x1, y0, y1) = seq.bounds();
    let height = IMAGE_HEIGHT as f64;
    let points = if y1 > y0 {
        // Dividing before scaling keeps both endpoints exact: max(y) maps to 32.
        let span = y1 - y0;
        seq.points
            .iter()
            .map(|p| {
                Point::new(
                    (p.x - x0) / span * height,
                    (p.y - y0) / span * height,
                    p.down,
                )
            })
            .collect()
    } else {
        let width = x1 - x0;
        let k = if width > MAX_DEGENERATE_WIDTH {
            MAX_DEGENERATE_WIDTH / width
        } else {
            1.0
        };
        seq.points
            .iter()
            .map(|p| Point::new((p.x - x0) * k, height / 2.0, p.down))
            .collect()
    };
    Ok(TrajectorySequence {
        id: seq.id.clone(),
        points,
        text: seq.text.clone(),
    })
}
