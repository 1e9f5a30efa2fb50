//! Synthetic pen-trajectory text lines.
//!
//! Every symbol owns a fixed polyline glyph in a unit box. A line is built by
//! laying jittered glyph instances left to right, densely resampling each
//! stroke and joining strokes with short pen-up transitions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{normalize, DataError, Point, TrajectorySequence};

/// Glyph box height in raw units.
const GLYPH_HEIGHT: f64 = 24.0;
/// Glyph box width in raw units.
const GLYPH_WIDTH: f64 = 14.0;
/// Horizontal advance between glyph origins.
const ADVANCE: f64 = 20.0;
/// Spacing of resampled stroke points.
const SAMPLE_STEP: f64 = 3.0;
/// Pen-up samples inserted between consecutive strokes.
const TRANSITION_POINTS: usize = 2;

pub const DEFAULT_ALPHABET: &str = "0123456789+-";

/// A glyph: strokes of unit-box vertices, `y` pointing down.
pub type Glyph = Vec<Vec<(f64, f64)>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub alphabet: String,
    pub min_len: usize,
    pub max_len: usize,
    /// Relative glyph scale jitter.
    pub scale_jitter: f64,
    /// Glyph placement jitter in raw units.
    pub offset_jitter: f64,
    /// Per-point noise in raw units.
    pub point_noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            alphabet: DEFAULT_ALPHABET.to_string(),
            min_len: 3,
            max_len: 5,
            scale_jitter: 0.1,
            offset_jitter: 2.0,
            point_noise: 0.5,
        }
    }
}

const TL: (f64, f64) = (0.0, 0.0);
const TR: (f64, f64) = (1.0, 0.0);
const ML: (f64, f64) = (0.0, 0.5);
const MR: (f64, f64) = (1.0, 0.5);
const BL: (f64, f64) = (0.0, 1.0);
const BR: (f64, f64) = (1.0, 1.0);

/// Template for `ch`. Digits and a few operators are hand-drawn; any other
/// character gets a pseudo-random glyph derived from its code point.
pub fn glyph(ch: char) -> Glyph {
    match ch {
        '0' => vec![vec![TL, TR, BR, BL, TL], vec![(0.2, 0.8), (0.8, 0.2)]],
        '1' => vec![vec![(0.2, 0.25), (0.5, 0.0), (0.5, 1.0)]],
        '2' => vec![vec![TL, TR, MR, ML, BL, BR]],
        '3' => vec![vec![TL, TR, MR, BR, BL], vec![(0.2, 0.5), MR]],
        '4' => vec![vec![TL, ML, MR], vec![TR, BR]],
        '5' => vec![vec![TR, TL, ML, MR, BR, BL]],
        '6' => vec![vec![TR, TL, BL, BR, MR, ML]],
        '7' => vec![vec![TL, TR, BL]],
        '8' => vec![vec![TL, TR, BR, BL, TL], vec![ML, MR]],
        '9' => vec![vec![MR, ML, TL, TR, BR, BL]],
        '+' => vec![vec![(0.5, 0.2), (0.5, 0.8)], vec![(0.1, 0.5), (0.9, 0.5)]],
        '-' => vec![vec![(0.1, 0.5), (0.9, 0.5)]],
        '=' => vec![
            vec![(0.1, 0.35), (0.9, 0.35)],
            vec![(0.1, 0.65), (0.9, 0.65)],
        ],
        '/' => vec![vec![BL, TR]],
        '(' => vec![vec![(0.8, 0.0), (0.3, 0.25), (0.3, 0.75), (0.8, 1.0)]],
        ')' => vec![vec![(0.2, 0.0), (0.7, 0.25), (0.7, 0.75), (0.2, 1.0)]],
        _ => procedural_glyph(ch),
    }
}

fn procedural_glyph(ch: char) -> Glyph {
    let mut rng = ChaCha8Rng::seed_from_u64(0x9e37_79b9 ^ ch as u64);
    let node = |rng: &mut ChaCha8Rng| {
        (
            rng.gen_range(0..3) as f64 * 0.5,
            rng.gen_range(0..3) as f64 * 0.5,
        )
    };
    (0..2)
        .map(|_| {
            let mut stroke = vec![node(&mut rng)];
            while stroke.len() < 3 {
                let next = node(&mut rng);
                if next != *stroke.last().unwrap() {
                    stroke.push(next);
                }
            }
            stroke
        })
        .collect()
}

/// Densely resampled strokes of one glyph instance with origin at `(ox, oy)`.
fn instance_strokes(
    ch: char,
    ox: f64,
    oy: f64,
    cfg: &SynthConfig,
    rng: &mut impl Rng,
) -> Vec<Vec<(f64, f64)>> {
    let jitter =
        |rng: &mut dyn rand::RngCore, m: f64| if m > 0.0 { rng.gen_range(-m..=m) } else { 0.0 };
    let scale = 1.0 + jitter(rng, cfg.scale_jitter);
    let (dx, dy) = (
        jitter(rng, cfg.offset_jitter),
        jitter(rng, cfg.offset_jitter),
    );
    glyph(ch)
        .iter()
        .map(|stroke| {
            let verts: Vec<(f64, f64)> = stroke
                .iter()
                .map(|&(u, v)| {
                    (
                        ox + dx + u * GLYPH_WIDTH * scale,
                        oy + dy + v * GLYPH_HEIGHT * scale,
                    )
                })
                .collect();
            let mut pts = vec![verts[0]];
            for w in verts.windows(2) {
                let (a, b) = (w[0], w[1]);
                let len = ((b.0 - a.0).powi(2) + (b.1 - a.1).powi(2)).sqrt();
                let steps = ((len / SAMPLE_STEP).ceil() as usize).max(1);
                for s in 1..=steps {
                    let t = s as f64 / steps as f64;
                    pts.push((a.0 + t * (b.0 - a.0), a.1 + t * (b.1 - a.1)));
                }
            }
            pts.into_iter()
                .map(|(x, y)| {
                    (
                        x + jitter(rng, cfg.point_noise),
                        y + jitter(rng, cfg.point_noise),
                    )
                })
                .collect()
        })
        .collect()
}

/// Pen-down point cloud of one jittered glyph instance at the origin.
pub fn glyph_instance(ch: char, cfg: &SynthConfig, rng: &mut impl Rng) -> Vec<(f64, f64)> {
    instance_strokes(ch, 0.0, 0.0, cfg, rng)
        .into_iter()
        .flatten()
        .collect()
}

/// Noise-free point cloud of the template at the origin.
pub fn glyph_template(ch: char) -> Vec<(f64, f64)> {
    let clean = SynthConfig {
        scale_jitter: 0.0,
        offset_jitter: 0.0,
        point_noise: 0.0,
        ..SynthConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    glyph_instance(ch, &clean, &mut rng)
}

/// Raw (unnormalized) trajectory for `text`.
pub fn write_text(text: &str, cfg: &SynthConfig, rng: &mut impl Rng) -> Vec<Point> {
    let mut points: Vec<Point> = Vec::new();
    for (i, ch) in text.chars().enumerate() {
        for stroke in instance_strokes(ch, i as f64 * ADVANCE, 4.0, cfg, rng) {
            if let (Some(last), Some(&first)) = (points.last().copied(), stroke.first()) {
                for k in 1..=TRANSITION_POINTS {
                    let t = k as f64 / (TRANSITION_POINTS + 1) as f64;
                    points.push(Point::new(
                        last.x + t * (first.0 - last.x),
                        last.y + t * (first.1 - last.y),
                        false,
                    ));
                }
            }
            points.extend(stroke.into_iter().map(|(x, y)| Point::new(x, y, true)));
        }
    }
    points
}

/// `n` normalized sequences with uniform random transcripts over the alphabet.
pub fn generate(
    cfg: &SynthConfig,
    n: usize,
    rng: &mut impl Rng,
) -> Result<Vec<TrajectorySequence>, DataError> {
    let alphabet: Vec<char> = cfg.alphabet.chars().collect();
    if n > 0 && alphabet.is_empty() {
        return Err(DataError::EmptyDataset);
    }
    let (lo, hi) = (cfg.min_len.max(1), cfg.max_len.max(cfg.min_len.max(1)));
    (0..n)
        .map(|i| {
            let len = rng.gen_range(lo..=hi);
            let text: String = (0..len)
                .map(|_| alphabet[rng.gen_range(0..alphabet.len())])
                .collect();
            let points = write_text(&text, cfg, rng);
            normalize(&TrajectorySequence::new(
                format!("synth-{i:05}"),
                points,
                text,
            ))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{ink_pixel, render, Vocabulary};

    #[test]
    fn zero_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(generate(&SynthConfig::default(), 0, &mut rng)
            .unwrap()
            .is_empty());
    }

    #[test]
    fn outputs_validate_and_normalize() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let data = generate(&SynthConfig::default(), 40, &mut rng).unwrap();
        for s in &data {
            s.validate().unwrap();
            let (x0, _, y0, y1) = s.bounds();
            assert_eq!(x0, 0.0);
            assert_eq!(y0, 0.0);
            assert!(y1 == 32.0 || s.points.iter().all(|p| p.y == 16.0));
            let n = s.text.chars().count();
            assert!((3..=5).contains(&n));
        }
        let vocab = Vocabulary::build(&data).unwrap();
        assert!(vocab
            .symbols()
            .iter()
            .all(|c| DEFAULT_ALPHABET.contains(*c)));
    }

    #[test]
    fn pen_down_points_are_inked() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for s in generate(&SynthConfig::default(), 30, &mut rng).unwrap() {
            let img = render(&s);
            for p in s.points.iter().filter(|p| p.down) {
                let (r, c) = ink_pixel(p.x, p.y, img.width());
                assert_eq!(img.get(r, c), 1.0, "{} at ({}, {})", s.id, p.x, p.y);
            }
        }
    }

    #[test]
    fn glyphs_are_distinct() {
        let chars: Vec<char> = "0123456789+-=/()abcxyz".chars().collect();
        for (i, a) in chars.iter().enumerate() {
            for b in &chars[i + 1..] {
                assert_ne!(glyph(*a), glyph(*b), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn seeded_generation_reproducible() {
        let gen = |seed| {
            generate(
                &SynthConfig::default(),
                5,
                &mut ChaCha8Rng::seed_from_u64(seed),
            )
            .unwrap()
        };
        assert_eq!(gen(4), gen(4));
    }
}
