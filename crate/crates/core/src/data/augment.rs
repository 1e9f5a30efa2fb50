use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{normalize, DataError, TrajectorySequence};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Share of the sequence length that gets perturbed.
    pub fraction: f64,
    /// Maximum offset per axis, in pixels.
    pub magnitude: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            fraction: 0.2,
            magnitude: 1.0,
        }
    }
}

/// Offsets `floor(fraction * T)` pen-down points (all of them if fewer exist)
/// by i.i.d. uniform amounts in `[-magnitude, magnitude]` per axis. Returns the
/// sequence, not re-normalized, and the sorted indices that moved.
pub fn perturb(
    seq: &TrajectorySequence,
    cfg: &AugmentConfig,
    rng: &mut impl Rng,
) -> (TrajectorySequence, Vec<usize>) {
    let down: Vec<usize> = seq
        .points
        .iter()
        .enumerate()
        .filter(|(_, p)| p.down)
        .map(|(i, _)| i)
        .collect();
    let fraction = cfg.fraction.clamp(0.0, 1.0);
    let count = ((fraction * seq.len() as f64).floor() as usize).min(down.len());
    let mut chosen: Vec<usize> = index::sample(rng, down.len(), count)
        .into_iter()
        .map(|i| down[i])
        .collect();
    chosen.sort_unstable();
    let mut out = seq.clone();
    let m = cfg.magnitude.abs();
    for &i in &chosen {
        out.points[i].x += rng.gen_range(-m..=m);
        out.points[i].y += rng.gen_range(-m..=m);
    }
    (out, chosen)
}

/// [`perturb`] followed by re-normalization.
pub fn augment(
    seq: &TrajectorySequence,
    cfg: &AugmentConfig,
    rng: &mut impl Rng,
) -> Result<TrajectorySequence, DataError> {
    if cfg.fraction <= 0.0 {
        return Ok(seq.clone());
    }
    normalize(&perturb(seq, cfg, rng).0)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::data::Point;

    fn line(n: usize) -> TrajectorySequence {
        let points = (0..n)
            .map(|i| Point::new(i as f64, (i % 7) as f64 * 5.0, true))
            .collect();
        normalize(&TrajectorySequence::new("l", points, "x")).unwrap()
    }

    #[test]
    fn zero_fraction_is_identity() {
        let s = line(50);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = AugmentConfig {
            fraction: 0.0,
            ..Default::default()
        };
        assert_eq!(augment(&s, &cfg, &mut rng).unwrap(), s);
    }

    #[test]
    fn default_moves_twenty_of_hundred() {
        let s = line(100);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (moved, idx) = perturb(&s, &AugmentConfig::default(), &mut rng);
        assert_eq!(idx.len(), 20);
        let changed = s
            .points
            .iter()
            .zip(&moved.points)
            .filter(|(a, b)| a != b)
            .count();
        assert_eq!(changed, 20);
        for (a, b) in s.points.iter().zip(&moved.points) {
            assert!((a.x - b.x).abs() <= 1.0 && (a.y - b.y).abs() <= 1.0);
            assert_eq!(a.down, b.down);
        }
    }

    #[test]
    fn only_pen_down_points_move() {
        let mut s = line(40);
        for p in s.points.iter_mut().skip(30) {
            p.down = false;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = AugmentConfig {
            fraction: 1.0,
            magnitude: 2.0,
        };
        let (_, idx) = perturb(&s, &cfg, &mut rng);
        assert_eq!(idx, (0..30).collect::<Vec<_>>());
    }

    #[test]
    fn seeded_output_reproducible() {
        let s = line(64);
        let run = |seed| {
            augment(
                &s,
                &AugmentConfig::default(),
                &mut ChaCha8Rng::seed_from_u64(seed),
            )
            .unwrap()
        };
        assert_eq!(run(7), run(7));
        assert_ne!(run(7), run(8));
        let (_, _, y0, y1) = run(7).bounds();
        assert_eq!((y0, y1), (0.0, 32.0));
    }
}
