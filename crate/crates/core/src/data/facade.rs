use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::strokes::{Segment, StrokeSet};
use super::DataError;
use crate::imaging::{BBox, BinarySketch, ColorImage};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Material {
    Brick,
    Concrete,
    Glass,
    Wood,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Style {
    Modern,
    Classic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Roof {
    Flat,
    Pitched,
}

impl Material {
    pub const ALL: [Material; 4] = [Material::Brick, Material::Concrete, Material::Glass, Material::Wood];

    pub fn palette(self) -> [f64; 3] {
        match self {
            Material::Brick => [0.72, 0.45, 0.36],
            Material::Concrete => [0.75, 0.75, 0.75],
            Material::Glass => [0.6, 0.75, 0.85],
            Material::Wood => [0.55, 0.42, 0.3],
        }
    }
}

impl Style {
    pub const ALL: [Style; 2] = [Style::Modern, Style::Classic];
}

impl Roof {
    pub const ALL: [Roof; 2] = [Roof::Flat, Roof::Pitched];
}

macro_rules! lowercase_display {
    ($($t:ty),*) => {$(
        impl fmt::Display for $t {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                let s = serde_json::to_value(self).expect("unit enum");
                f.write_str(s.as_str().expect("string tag"))
            }
        }
    )*};
}
lowercase_display!(Material, Style, Roof);

pub const SKY: [f64; 3] = [0.62, 0.8, 0.95];
pub const GROUND: [f64; 3] = [0.45, 0.42, 0.38];
pub const UNDERSIDE: [f64; 3] = [0.3, 0.3, 0.32];
pub const ROOF: [f64; 3] = [0.42, 0.24, 0.2];
pub const DOOR: [f64; 3] = [0.3, 0.2, 0.12];
pub const GLAZING_MODERN: [f64; 3] = [0.2, 0.3, 0.42];
pub const GLAZING_CLASSIC: [f64; 3] = [0.32, 0.26, 0.2];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FacadeSpec {
    pub floors: u32,
    pub bays: u32,
    pub window_rows: u32,
    pub window_cols: u32,
    pub door_bay: u32,
    pub material: Material,
    pub style: Style,
    pub roof: Roof,
    pub elevated: bool,
}

pub const MAX_FLOORS: u32 = 6;
pub const MAX_BAYS: u32 = 8;
pub const MAX_WINDOW_ROWS: u32 = 3;
pub const MAX_WINDOW_COLS: u32 = 4;
const MIN_PANE: i64 = 3;

impl FacadeSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        let ok = (1..=MAX_FLOORS).contains(&self.floors)
            && (1..=MAX_BAYS).contains(&self.bays)
            && (1..=MAX_WINDOW_ROWS).contains(&self.window_rows)
            && (1..=MAX_WINDOW_COLS).contains(&self.window_cols)
            && self.door_bay < self.bays;
        if ok {
            Ok(())
        } else {
            Err(DataError::InvalidSpec(format!("{self:?}")))
        }
    }

    /// The text prompt; every keyword in it belongs to the text lexicon.
    pub fn prompt(&self) -> String {
        let mut p = format!(
            "a {} school building with {} floors, {} facade, {} roof",
            self.style, self.floors, self.material, self.roof
        );
        if self.elevated {
            p.push_str(", elevated structure");
        }
        p
    }

    pub fn window_count(&self) -> usize {
        (self.floors * self.bays * self.window_rows * self.window_cols) as usize
    }

    /// Draws a random spec that fits `resolution`, restricted to the given
    /// maxima (clamped to the global ranges).
    pub fn sample(rng: &mut impl Rng, resolution: usize, limits: SpecLimits) -> FacadeSpec {
        loop {
            let bays = rng.random_range(1..=limits.bays.clamp(1, MAX_BAYS));
            let spec = FacadeSpec {
                floors: rng.random_range(1..=limits.floors.clamp(1, MAX_FLOORS)),
                bays,
                window_rows: rng.random_range(1..=limits.window_rows.clamp(1, MAX_WINDOW_ROWS)),
                window_cols: rng.random_range(1..=limits.window_cols.clamp(1, MAX_WINDOW_COLS)),
                door_bay: rng.random_range(0..bays),
                material: Material::ALL[rng.random_range(0..4)],
                style: Style::ALL[rng.random_range(0..2)],
                roof: Roof::ALL[rng.random_range(0..2)],
                elevated: rng.random_bool(0.3),
            };
            if facade_layout(&spec, resolution).is_ok() {
                return spec;
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SpecLimits {
    pub floors: u32,
    pub bays: u32,
    pub window_rows: u32,
    pub window_cols: u32,
}

impl SpecLimits {
    pub const FULL: SpecLimits =
        SpecLimits { floors: MAX_FLOORS, bays: MAX_BAYS, window_rows: MAX_WINDOW_ROWS, window_cols: MAX_WINDOW_COLS };

    /// Ranges that fit a 32 px canvas with legible windows.
    pub const DESK: SpecLimits = SpecLimits { floors: 3, bays: 4, window_rows: 1, window_cols: 2 };

    pub fn for_resolution(resolution: usize) -> SpecLimits {
        if resolution < 64 {
            Self::DESK
        } else {
            Self::FULL
        }
    }
}

/// Pixel geometry of a facade drawing. Rectangles are inclusive.
#[derive(Debug, Clone, PartialEq)]
pub struct FacadeLayout {
    pub resolution: usize,
    /// Building body (walls) `(x0, y0, x1, y1)`.
    pub body: (i64, i64, i64, i64),
    pub ground_y: i64,
    pub roof_apex: Option<(i64, i64)>,
    /// One frame per (floor, bay) window group.
    pub windows: Vec<(i64, i64, i64, i64)>,
    pub door: (i64, i64, i64, i64),
    pub stilts: Vec<i64>,
    pub floor_lines: Vec<i64>,
}

impl FacadeLayout {
    pub fn window_boxes(&self) -> Vec<BBox> {
        self.windows
            .iter()
            .map(|&(x0, y0, x1, y1)| BBox::new(x0 as usize, y0 as usize, x1 as usize + 1, y1 as usize + 1))
            .collect()
    }
}

/// Computes the facade geometry, or fails when panes would be narrower than
/// the minimum legible spacing at this resolution.
pub fn facade_layout(spec: &FacadeSpec, resolution: usize) -> Result<FacadeLayout, DataError> {
    spec.validate()?;
    if resolution < 32 {
        return Err(DataError::InvalidSpec(format!("resolution {resolution} < 32")));
    }
    let r = resolution as i64;
    let margin = (r / 16).max(1);
    let ground_y = r - 1 - margin;
    let (bx0, bx1) = (margin, r - 1 - margin);
    let roof_h = match spec.roof {
        Roof::Pitched => r / 6,
        Roof::Flat => r / 16,
    };
    let top = margin + roof_h;
    let bottom = if spec.elevated { ground_y - (r / 8).max(3) } else { ground_y };
    let floors = spec.floors as i64;
    let bays = spec.bays as i64;
    let floor_h = (bottom - top) / floors;
    let bay_w = (bx1 - bx0) / bays;
    if floor_h < 4 || bay_w < 4 {
        return Err(DataError::InvalidSpec(format!("{floors} floors × {bays} bays do not fit {resolution}px")));
    }
    let floor_y = |f: i64| if f == floors { bottom } else { top + f * floor_h };
    let bay_x = |b: i64| if b == bays { bx1 } else { bx0 + b * bay_w };

    let too_small = || DataError::InvalidSpec(format!("windows do not fit {resolution}px: {spec:?}"));
    let mut windows = Vec::new();
    let mut door = (0, 0, 0, 0);
    for f in 0..floors {
        // Floor 0 is the top floor; the ground floor is `floors - 1`.
        let (cy0, cy1) = (floor_y(f), floor_y(f + 1));
        for b in 0..bays {
            let (cx0, cx1) = (bay_x(b), bay_x(b + 1));
            let pad_x = ((cx1 - cx0) / 5).max(1);
            let pad_y = ((cy1 - cy0) / 4).max(1);
            let mut wx1 = cx1 - pad_x;
            if f == floors - 1 && b as u32 == spec.door_bay {
                let mid = (cx0 + cx1) / 2;
                let gap = (cx1 - cx0) / 12;
                wx1 = mid - gap;
                let dx0 = mid + 1 + gap;
                let dx1 = cx1 - pad_x;
                let dy0 = cy0 + pad_y;
                if dx1 - dx0 < 2 || cy1 - dy0 < 3 {
                    return Err(too_small());
                }
                door = (dx0, dy0, dx1, cy1);
            }
            let (wx0, wy0, wy1) = (cx0 + pad_x, cy0 + pad_y, cy1 - pad_y);
            if (wx1 - wx0) < MIN_PANE * spec.window_cols as i64 || (wy1 - wy0) < MIN_PANE * spec.window_rows as i64 {
                return Err(too_small());
            }
            windows.push((wx0, wy0, wx1, wy1));
        }
    }
    let stilts = if spec.elevated { (0..=bays).map(bay_x).collect() } else { Vec::new() };
    let floor_lines = (1..floors).map(floor_y).collect();
    let roof_apex = (spec.roof == Roof::Pitched).then_some(((bx0 + bx1) / 2, margin));
    Ok(FacadeLayout {
        resolution,
        body: (bx0, top, bx1, bottom),
        ground_y,
        roof_apex,
        windows,
        door,
        stilts,
        floor_lines,
    })
}

fn facade_strokes(spec: &FacadeSpec, layout: &FacadeLayout) -> StrokeSet {
    let r = layout.resolution;
    let (bx0, top, bx1, bottom) = layout.body;
    let mut s = StrokeSet::new(r, r);
    s.line(Segment::new(0, layout.ground_y, r as i64 - 1, layout.ground_y));
    s.rect(bx0, top, bx1, bottom);
    match layout.roof_apex {
        Some((ax, ay)) => {
            s.line(Segment::new(bx0, top, ax, ay));
            s.line(Segment::new(ax, ay, bx1, top));
        }
        None => s.line(Segment::new(bx0 - 1, top - 1, bx1 + 1, top - 1)),
    }
    for &y in &layout.floor_lines {
        s.line(Segment::new(bx0, y, bx1, y));
    }
    for &x in &layout.stilts {
        s.line(Segment::new(x, bottom, x, layout.ground_y));
    }
    for &(x0, y0, x1, y1) in &layout.windows {
        s.rect(x0, y0, x1, y1);
        let (rows, cols) = (spec.window_rows as i64, spec.window_cols as i64);
        let pane_w = (x1 - x0) / cols;
        let pane_h = (y1 - y0) / rows;
        for c in 1..cols {
            let x = x0 + ((c * (x1 - x0)) as f64 / cols as f64).round() as i64;
            s.line(Segment::new(x, y0, x, y1).with_slack(u8::from(pane_w >= 5)));
        }
        for rr in 1..rows {
            let y = y0 + ((rr * (y1 - y0)) as f64 / rows as f64).round() as i64;
            s.line(Segment::new(x0, y, x1, y).with_slack(u8::from(pane_h >= 5)));
        }
    }
    let (dx0, dy0, dx1, dy1) = layout.door;
    s.rect(dx0, dy0, dx1, dy1);
    s
}

fn fill(img: &mut ColorImage, x0: i64, y0: i64, x1: i64, y1: i64, color: [f64; 3]) {
    for y in y0.max(0)..=y1.min(img.height as i64 - 1) {
        for x in x0.max(0)..=x1.min(img.width as i64 - 1) {
            img.set_pixel(x as usize, y as usize, &color);
        }
    }
}

fn facade_render(spec: &FacadeSpec, layout: &FacadeLayout) -> ColorImage {
    let r = layout.resolution;
    let mut img = ColorImage::filled(r, r, &SKY);
    let (bx0, top, bx1, bottom) = layout.body;
    fill(&mut img, 0, layout.ground_y, r as i64 - 1, r as i64 - 1, GROUND);
    if spec.elevated {
        fill(&mut img, bx0, bottom, bx1, layout.ground_y - 1, UNDERSIDE);
    }
    match layout.roof_apex {
        Some((ax, ay)) => {
            // Triangle between the eaves and the apex.
            for y in ay..top {
                let t = (y - ay) as f64 / (top - ay) as f64;
                let xl = (ax as f64 + (bx0 - ax) as f64 * t).round() as i64;
                let xr = (ax as f64 + (bx1 - ax) as f64 * t).round() as i64;
                fill(&mut img, xl, y, xr, y, ROOF);
            }
        }
        None => fill(&mut img, bx0 - 1, top - 1, bx1 + 1, top - 1, ROOF),
    }
    fill(&mut img, bx0, top, bx1, bottom, spec.material.palette());
    let glazing = match spec.style {
        Style::Modern => GLAZING_MODERN,
        Style::Classic => GLAZING_CLASSIC,
    };
    for &(x0, y0, x1, y1) in &layout.windows {
        fill(&mut img, x0, y0, x1, y1, glazing);
    }
    let (dx0, dy0, dx1, dy1) = layout.door;
    fill(&mut img, dx0, dy0, dx1, dy1, DOOR);
    img.quantized()
}

/// Sketch, render and prompt for one facade, consistent by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingTriplet {
    pub sketch: BinarySketch,
    pub render: ColorImage,
    pub prompt: String,
    pub spec: FacadeSpec,
    /// Vector form of `sketch`, kept in step with augmentation.
    pub strokes: StrokeSet,
}

/// Builds the triplet. `seed` only matters for stroke jitter, which the base
/// drawing does not apply; it is accepted so callers can thread one seed.
pub fn gen_facade_pair(spec: &FacadeSpec, resolution: usize, _seed: u64) -> Result<TrainingTriplet, DataError> {
    let layout = facade_layout(spec, resolution)?;
    let strokes = facade_strokes(spec, &layout);
    Ok(TrainingTriplet {
        sketch: strokes.rasterize(),
        render: facade_render(spec, &layout),
        prompt: spec.prompt(),
        spec: *spec,
        strokes,
    })
}

/// `count` triplets with specs drawn to fit `resolution`.
pub fn gen_pair_dataset(count: usize, resolution: usize, seed: u64) -> Result<Vec<TrainingTriplet>, DataError> {
    if count == 0 {
        return Err(DataError::InvalidCounts("count must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let limits = SpecLimits::for_resolution(resolution);
    (0..count)
        .map(|_| {
            let spec = FacadeSpec::sample(&mut rng, resolution, limits);
            gen_facade_pair(&spec, resolution, rng.random())
        })
        .collect()
}

/// A rough version of a facade: the building outline, floors and roof with
/// every window group drawn as a bare frame. Used as pipeline input.
pub fn rough_facade(spec: &FacadeSpec, resolution: usize) -> Result<(BinarySketch, FacadeLayout), DataError> {
    let plain = FacadeSpec { window_rows: 1, window_cols: 1, ..*spec };
    let layout = facade_layout(&plain, resolution)?;
    Ok((facade_strokes(&plain, &layout).rasterize(), layout))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segmenter::propose_regions;

    fn spec(floors: u32, bays: u32, rows: u32, cols: u32) -> FacadeSpec {
        FacadeSpec {
            floors,
            bays,
            window_rows: rows,
            window_cols: cols,
            door_bay: 0,
            material: Material::Brick,
            style: Style::Modern,
            roof: Roof::Flat,
            elevated: false,
        }
    }

    pub(crate) fn count_window_panes(t: &TrainingTriplet, layout: &FacadeLayout) -> usize {
        let boxes = layout.window_boxes();
        propose_regions(&t.sketch)
            .unwrap()
            .iter()
            .filter(|r| boxes.iter().any(|b| r.bbox().intersection(b) == Some(r.bbox())))
            .count()
    }

    #[test]
    fn single_bay_has_one_window_and_door() {
        let s = spec(1, 1, 1, 1);
        let t = gen_facade_pair(&s, 32, 0).unwrap();
        let layout = facade_layout(&s, 32).unwrap();
        assert_eq!(count_window_panes(&t, &layout), 1);
        // Door interior is its own enclosed region.
        let (dx0, dy0, dx1, dy1) = layout.door;
        let door = BBox::new(dx0 as usize, dy0 as usize, dx1 as usize + 1, dy1 as usize + 1);
        assert!(propose_regions(&t.sketch).unwrap().iter().any(|r| r.bbox() == door));
    }

    #[test]
    fn prompt_mentions_floors() {
        let t = gen_facade_pair(&spec(3, 2, 1, 1), 64, 0).unwrap();
        assert!(t.prompt.contains("3 floors"));
        assert_eq!(t.prompt, "a modern school building with 3 floors, brick facade, flat roof");
    }

    #[test]
    fn window_panes_match_spec_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..40 {
            let s = FacadeSpec::sample(&mut rng, 128, SpecLimits::FULL);
            let t = gen_facade_pair(&s, 128, 0).unwrap();
            let layout = facade_layout(&s, 128).unwrap();
            assert_eq!(count_window_panes(&t, &layout), s.window_count(), "{s:?}");
        }
    }

    #[test]
    fn renders_are_8bit_exact_and_same_size() {
        let t = gen_facade_pair(&spec(2, 3, 1, 1), 32, 0).unwrap();
        assert_eq!(t.render, t.render.quantized());
        assert_eq!((t.render.width, t.render.height), (t.sketch.width(), t.sketch.height()));
    }

    #[test]
    fn desk_sampler_fits_32() {
        let ds = gen_pair_dataset(64, 32, 1).unwrap();
        assert_eq!(ds.len(), 64);
        assert_eq!(ds, gen_pair_dataset(64, 32, 1).unwrap());
        assert!(gen_facade_pair(&spec(6, 8, 3, 4), 32, 0).is_err());
        assert!(gen_facade_pair(&FacadeSpec { door_bay: 2, ..spec(1, 2, 1, 1) }, 64, 0).is_err());
    }
}
