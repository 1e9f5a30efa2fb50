use std::io::{self, Write};

use super::{TrajectorySequence, IMAGE_HEIGHT};

/// Grayscale raster of a trajectory: background 0, ink 1.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedImage {
    width: usize,
    pixels: Vec<f32>,
}

impl RenderedImage {
    pub fn blank(width: usize) -> Self {
        RenderedImage {
            width,
            pixels: vec![0.0; width * IMAGE_HEIGHT],
        }
    }

    pub fn height(&self) -> usize {
        IMAGE_HEIGHT
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Row-major `[height][width]` pixel values.
    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.pixels[row * self.width + col]
    }

    fn set(&mut self, row: usize, col: usize) {
        self.pixels[row * self.width + col] = 1.0;
    }

    pub fn ink_count(&self) -> usize {
        self.pixels.iter().filter(|p| **p > 0.0).count()
    }

    /// Binary PGM (P5, maxval 255, ink 255).
    pub fn write_pgm(&self, mut out: impl Write) -> io::Result<()> {
        write!(out, "P5\n{} {}\n255\n", self.width, IMAGE_HEIGHT)?;
        let bytes: Vec<u8> = self
            .pixels
            .iter()
            .map(|p| (p.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        out.write_all(&bytes)
    }

    /// Copy shifted right by `dx` columns onto a canvas `dx` columns wider.
    pub fn shifted_right(&self, dx: usize) -> Self {
        let width = self.width + dx;
        let mut pixels = vec![0.0; width * IMAGE_HEIGHT];
        for r in 0..IMAGE_HEIGHT {
            pixels[r * width + dx..r * width + dx + self.width]
                .copy_from_slice(&self.pixels[r * self.width..(r + 1) * self.width]);
        }
        RenderedImage { width, pixels }
    }
}

/// Raster cell `(row, col)` for a normalized point in an image of `width`
/// columns. Rows clamp to the last one since `y == 32` is a valid coordinate.
pub fn ink_pixel(x: f64, y: f64, width: usize) -> (usize, usize) {
    let col = x.round().clamp(0.0, (width - 1) as f64) as usize;
    let row = y.round().clamp(0.0, (IMAGE_HEIGHT - 1) as f64) as usize;
    (row, col)
}

fn image_width(seq: &TrajectorySequence) -> usize {
    let max_x = seq.points.iter().map(|p| p.x).fold(0.0f64, f64::max);
    let w = ((max_x.ceil() as usize) + 1).max(8);
    w.div_ceil(8) * 8
}

/// Rasterizes a normalized trajectory. A 1-pixel Bresenham segment joins
/// consecutive samples when both are pen-down; every pen-down sample is also
/// inked on its own so isolated taps stay visible.
pub fn render(seq: &TrajectorySequence) -> RenderedImage {
    let width = image_width(seq);
    let mut img = RenderedImage::blank(width);
    let cell = |i: usize| ink_pixel(seq.points[i].x, seq.points[i].y, width);
    for (i, p) in seq.points.iter().enumerate() {
        if !p.down {
            continue;
        }
        let (r, c) = cell(i);
        img.set(r, c);
        if i > 0 && seq.points[i - 1].down {
            let (r0, c0) = cell(i - 1);
            bresenham((c0 as i64, r0 as i64), (c as i64, r as i64), |x, y| {
                img.set(y as usize, x as usize)
            });
        }
    }
    img
}

fn bresenham((mut x0, mut y0): (i64, i64), (x1, y1): (i64, i64), mut plot: impl FnMut(i64, i64)) {
    let dx = (x1 - x0).abs();
    let dy = -(y1 - y0).abs();
    let sx = if x0 < x1 { 1 } else { -1 };
    let sy = if y0 < y1 { 1 } else { -1 };
    let mut err = dx + dy;
    loop {
        plot(x0, y0);
        if x0 == x1 && y0 == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x0 += sx;
        }
        if e2 <= dx {
            err += dx;
            y0 += sy;
        }
    }
}
