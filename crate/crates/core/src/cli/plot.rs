//! Greyscale PGM charts: a loss curve and labelled bar groups.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

const MARGIN: usize = 12;
const INK: u8 = 0;
const AXIS: u8 = 96;
const PAPER: u8 = 255;

/// White raster with the origin at the top-left.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Canvas {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl Canvas {
    pub fn new(width: usize, height: usize) -> Self {
        Canvas {
            width,
            height,
            pixels: vec![PAPER; width * height],
        }
    }

    pub fn set(&mut self, x: i64, y: i64, v: u8) {
        if x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height {
            self.pixels[y as usize * self.width + x as usize] = v;
        }
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    /// Bresenham segment.
    pub fn line(&mut self, (x0, y0): (i64, i64), (x1, y1): (i64, i64), v: u8) {
        let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
        let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
        let (mut x, mut y, mut err) = (x0, y0, dx + dy);
        loop {
            self.set(x, y, v);
            if x == x1 && y == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x += sx;
            }
            if e2 <= dx {
                err += dx;
                y += sy;
            }
        }
    }

    pub fn fill_rect(&mut self, x0: i64, y0: i64, x1: i64, y1: i64, v: u8) {
        for y in y0.min(y1)..=y0.max(y1) {
            for x in x0.min(x1)..=x0.max(x1) {
                self.set(x, y, v);
            }
        }
    }

    /// Binary P5 encoding.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_pgm()).map_err(|e| Error::io(path, e))
    }

    fn axes(&mut self) {
        let (w, h) = (self.width as i64, self.height as i64);
        let m = MARGIN as i64;
        self.line((m, m), (m, h - m), AXIS);
        self.line((m, h - m), (w - m, h - m), AXIS);
    }
}

/// Polyline of `values` scaled to fill the plot area.
pub fn line_chart(values: &[f64], width: usize, height: usize) -> Canvas {
    let mut c = Canvas::new(width, height);
    c.axes();
    let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    if finite.is_empty() {
        return c;
    }
    let lo = finite.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = finite.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let (pw, ph) = ((width - 2 * MARGIN - 2) as f64, (height - 2 * MARGIN - 2) as f64);
    let point = |i: usize, v: f64| {
        let x = if values.len() > 1 { i as f64 / (values.len() - 1) as f64 } else { 0.5 };
        let x = MARGIN as f64 + 1.0 + x * pw;
        let y = (height - MARGIN - 1) as f64 - (v - lo) / span * ph;
        (x.round() as i64, y.round() as i64)
    };
    let mut prev = None;
    for (i, &v) in values.iter().enumerate() {
        if !v.is_finite() {
            prev = None;
            continue;
        }
        let p = point(i, v);
        match prev {
            Some(q) => c.line(q, p, INK),
            None => c.set(p.0, p.1, INK),
        }
        prev = Some(p);
    }
    c
}

/// Groups of bars on a fixed [0, 1] scale, one shade per position within
/// a group. Missing values (`NaN`) leave a gap.
pub fn bar_chart(groups: &[Vec<f64>], width: usize, height: usize) -> Canvas {
    let mut c = Canvas::new(width, height);
    c.axes();
    let bars: usize = groups.iter().map(|g| g.len() + 1).sum();
    if bars == 0 {
        return c;
    }
    let slot = ((width - 2 * MARGIN - 2) / bars).max(1) as i64;
    let base = (height - MARGIN - 1) as i64;
    let ph = (height - 2 * MARGIN - 2) as f64;
    let mut x = MARGIN as i64 + 1;
    for group in groups {
        for (j, &v) in group.iter().enumerate() {
            if v.is_finite() {
                let top = base - (v.clamp(0.0, 1.0) * ph).round() as i64;
                let shade = (j * 160 / group.len().max(1)) as u8;
                c.fill_rect(x, top, x + slot - 2, base, shade);
            }
            x += slot;
        }
        x += slot;
    }
    c
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_header_and_size() {
        let c = Canvas::new(7, 3);
        let bytes = c.to_pgm();
        assert!(bytes.starts_with(b"P5\n7 3\n255\n"));
        assert_eq!(bytes.len(), 11 + 21);
    }

    #[test]
    fn line_hits_both_ends_and_clips() {
        let mut c = Canvas::new(10, 10);
        c.line((0, 0), (9, 4), INK);
        assert_eq!(c.get(0, 0), INK);
        assert_eq!(c.get(9, 4), INK);
        c.line((-5, -5), (20, 20), INK);
        assert_eq!(c.get(5, 5), INK);
    }

    #[test]
    fn decreasing_curve_ends_lower_on_screen() {
        let c = line_chart(&[3.0, 2.0, 1.0], 64, 48);
        let column = |x: usize| (0..48).find(|&y| c.get(x, y) == INK);
        let first = column(MARGIN + 1).unwrap();
        let last = column(64 - MARGIN - 1).unwrap();
        assert!(first < last);
    }

    #[test]
    fn bar_heights_follow_values() {
        let c = bar_chart(&[vec![1.0, 0.5, f64::NAN]], 80, 60);
        let ink = |x: usize| (0..60).filter(|&y| c.get(x, y) < AXIS).count();
        let slot = (80 - 2 * MARGIN - 2) / 4;
        let (a, b, gap) = (ink(MARGIN + 2), ink(MARGIN + 2 + slot), ink(MARGIN + 2 + 2 * slot));
        assert!(a > b && b > 0);
        assert_eq!(gap, 0);
    }
}
