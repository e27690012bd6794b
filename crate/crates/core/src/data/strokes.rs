use rand::Rng;

use crate::imaging::BinarySketch;

/// A straight stroke. `slack` is how far (px) each endpoint may be jittered
/// perpendicular to the stroke without changing which regions it closes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub x0: i64,
    pub y0: i64,
    pub x1: i64,
    pub y1: i64,
    pub slack: u8,
}

impl Segment {
    pub fn new(x0: i64, y0: i64, x1: i64, y1: i64) -> Self {
        Segment { x0, y0, x1, y1, slack: 0 }
    }

    pub fn with_slack(mut self, slack: u8) -> Self {
        self.slack = slack;
        self
    }
}

/// Vector form of a line drawing; rasterized with 8-connected Bresenham.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StrokeSet {
    pub width: usize,
    pub height: usize,
    pub segments: Vec<Segment>,
}

impl StrokeSet {
    pub fn new(width: usize, height: usize) -> Self {
        StrokeSet { width, height, segments: Vec::new() }
    }

    pub fn line(&mut self, s: Segment) {
        self.segments.push(s);
    }

    /// Inclusive rectangle outline.
    pub fn rect(&mut self, x0: i64, y0: i64, x1: i64, y1: i64) {
        self.line(Segment::new(x0, y0, x1, y0));
        self.line(Segment::new(x1, y0, x1, y1));
        self.line(Segment::new(x1, y1, x0, y1));
        self.line(Segment::new(x0, y1, x0, y0));
    }

    pub fn rasterize(&self) -> BinarySketch {
        let mut s = BinarySketch::blank(self.width, self.height);
        for g in &self.segments {
            s.draw_line(g.x0, g.y0, g.x1, g.y1);
        }
        s
    }

    /// Moves each endpoint of every stroke with slack by a uniform offset in
    /// `-slack..=slack`, perpendicular to the stroke's dominant axis.
    pub fn jittered(&self, rng: &mut impl Rng) -> StrokeSet {
        let mut out = self.clone();
        for g in &mut out.segments {
            if g.slack == 0 {
                continue;
            }
            let s = g.slack as i64;
            let (j0, j1) = (rng.random_range(-s..=s), rng.random_range(-s..=s));
            if (g.x1 - g.x0).abs() >= (g.y1 - g.y0).abs() {
                g.y0 += j0;
                g.y1 += j1;
            } else {
                g.x0 += j0;
                g.x1 += j1;
            }
        }
        out
    }

    pub fn hflip(&self) -> StrokeSet {
        let w = self.width as i64 - 1;
        let mut out = self.clone();
        for g in &mut out.segments {
            g.x0 = w - g.x0;
            g.x1 = w - g.x1;
        }
        out
    }

    /// Maps the window `(x0, y0, w, h)` onto the full canvas.
    pub fn crop_rescaled(&self, x0: usize, y0: usize, w: usize, h: usize) -> StrokeSet {
        let (sx, sy) = (self.width as f64 / w as f64, self.height as f64 / h as f64);
        let map = |v: i64, o: usize, s: f64| (((v - o as i64) as f64 + 0.5) * s - 0.5).round() as i64;
        let mut out = self.clone();
        for g in &mut out.segments {
            g.x0 = map(g.x0, x0, sx);
            g.x1 = map(g.x1, x0, sx);
            g.y0 = map(g.y0, y0, sy);
            g.y1 = map(g.y1, y0, sy);
        }
        out
    }
}
