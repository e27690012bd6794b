use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::strokes::{Segment, StrokeSet};
use super::DataError;
use crate::retrieval::{retrieval_view, ComponentKind, ComponentRecord, ComponentView};

/// Horizontal shear applied for the oblique view: `x += SHEAR * (y - cy)`.
pub const OBLIQUE_SHEAR: f64 = 0.25;
pub const DESK_COMPONENT_COUNT: usize = 120;
pub const PAPER_COMPONENT_COUNT: usize = 300;
pub const COMPONENT_SIZE: usize = 64;
pub const MAX_ROWS: u32 = 4;
pub const MAX_COLS: u32 = 6;
/// Minimum spacing between parallel strokes inside a frame.
const MIN_PANE: i64 = 3;
/// Spacing from which mullion endpoints may be jittered by one pixel.
const JITTER_PANE: i64 = 5;

/// Subdivides the inclusive frame into `rows × cols` panes.
fn mullions(strokes: &mut StrokeSet, x0: i64, y0: i64, x1: i64, y1: i64, rows: u32, cols: u32) {
    let pane_w = (x1 - x0) / cols as i64;
    let pane_h = (y1 - y0) / rows as i64;
    for c in 1..cols as i64 {
        let x = x0 + ((c * (x1 - x0)) as f64 / cols as f64).round() as i64;
        let slack = u8::from(pane_w >= JITTER_PANE);
        strokes.line(Segment::new(x, y0, x, y1).with_slack(slack));
    }
    for r in 1..rows as i64 {
        let y = y0 + ((r * (y1 - y0)) as f64 / rows as f64).round() as i64;
        let slack = u8::from(pane_h >= JITTER_PANE);
        strokes.line(Segment::new(x0, y, x1, y).with_slack(slack));
    }
}

/// Draws a window (frame plus mullions) or a door (frame, inset panel grid and
/// a handle mark). The drawing is deterministic in `seed`: frame aspect and
/// scale vary slightly, and mullion endpoints get up to 1 px of jitter.
/// The record id is `seed`.
pub fn gen_component(
    kind: ComponentKind,
    rows: u32,
    cols: u32,
    size: usize,
    seed: u64,
    view: ComponentView,
) -> Result<ComponentRecord, DataError> {
    if rows == 0 || cols == 0 {
        return Err(DataError::InvalidCounts(format!("rows={rows} cols={cols}")));
    }
    if size < 16 {
        return Err(DataError::InvalidCounts(format!("size {size} < 16")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let margin = (size as i64 / 16).max(1);
    let avail_h = size as i64 - 2 * margin;
    let mut avail_w = avail_h;
    if view == ComponentView::Oblique {
        avail_w -= (avail_h as f64 * OBLIQUE_SHEAR).ceil() as i64;
    }

    let base_aspect = (cols as f64 / rows as f64).sqrt();
    let aspect = match kind {
        ComponentKind::Window => (base_aspect * rng.random_range(0.8..1.25)).clamp(0.4, 2.5),
        ComponentKind::Door => (0.55 * base_aspect * rng.random_range(0.85..1.15)).clamp(0.3, 1.2),
    };
    let scale = rng.random_range(0.8..=1.0);
    let (mut fw, mut fh) = if aspect >= avail_w as f64 / avail_h as f64 {
        let fw = avail_w as f64 * scale;
        (fw, fw / aspect)
    } else {
        let fh = avail_h as f64 * scale;
        (fh * aspect, fh)
    };
    // Panel doors need room for the inset.
    let inset_extra = if kind == ComponentKind::Door { 4 } else { 0 };
    fw = fw.round().max((MIN_PANE * cols as i64 + 1 + inset_extra) as f64);
    fh = fh.round().max((MIN_PANE * rows as i64 + 1 + inset_extra) as f64);
    let (fw, fh) = (fw as i64, fh as i64);
    if fw > avail_w || fh > avail_h {
        return Err(DataError::InvalidCounts(format!("{rows}x{cols} does not fit a {size}px component")));
    }
    let x0 = (size as i64 - fw) / 2;
    let y0 = (size as i64 - fh) / 2;
    let (x1, y1) = (x0 + fw - 1, y0 + fh - 1);

    let mut strokes = StrokeSet::new(size, size);
    strokes.rect(x0, y0, x1, y1);
    match kind {
        ComponentKind::Window => mullions(&mut strokes, x0, y0, x1, y1, rows, cols),
        ComponentKind::Door => {
            let inset = (fw / 8).max(2);
            let (px0, py0, px1, py1) = (x0 + inset, y0 + inset, x1 - inset, y1 - inset);
            strokes.rect(px0, py0, px1, py1);
            mullions(&mut strokes, px0, py0, px1, py1, rows, cols);
            // Handle: a short stub inside the right margin.
            let hx = x1 - inset / 2;
            let hy = (y0 + y1) / 2;
            strokes.line(Segment::new(hx, hy, hx, hy + 1));
        }
    }
    if view == ComponentView::Oblique {
        let cy = size as f64 / 2.0;
        for g in &mut strokes.segments {
            g.x0 += ((g.y0 as f64 - cy) * OBLIQUE_SHEAR).round() as i64;
            g.x1 += ((g.y1 as f64 - cy) * OBLIQUE_SHEAR).round() as i64;
        }
    }
    let image = strokes.jittered(&mut rng).rasterize();
    Ok(ComponentRecord { id: seed, image, kind, rows, cols, view })
}

/// Samples `count` components over kind × rows(1–4) × cols(1–6) × view.
///
/// Every pass over the 48 (kind, rows, cols) classes is a fresh shuffle, so
/// any `count ≥ 48` covers all classes. Records whose canonical retrieval
/// view duplicates an earlier record are redrawn. Ids are `0..count`.
pub fn gen_component_dataset(count: usize, seed: u64) -> Result<Vec<ComponentRecord>, DataError> {
    if count == 0 {
        return Err(DataError::InvalidCounts("count must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut classes = Vec::new();
    for kind in [ComponentKind::Window, ComponentKind::Door] {
        for rows in 1..=MAX_ROWS {
            for cols in 1..=MAX_COLS {
                classes.push((kind, rows, cols));
            }
        }
    }
    let mut order = Vec::new();
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        if order.is_empty() {
            order = classes.clone();
            order.shuffle(&mut rng);
            order.reverse();
        }
        let (kind, rows, cols) = order.pop().expect("refilled above");
        let view = if rng.random_bool(0.5) { ComponentView::Oblique } else { ComponentView::Front };
        let mut attempt = 0;
        loop {
            let s: u64 = rng.random();
            let mut rec = gen_component(kind, rows, cols, COMPONENT_SIZE, s, view)?;
            if seen.insert(retrieval_view(&rec.image)) || attempt >= 64 {
                rec.id = out.len() as u64;
                out.push(rec);
                break;
            }
            attempt += 1;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segmenter::propose_regions;

    /// Ink columns on the middle row strictly inside the frame.
    fn interior_vertical_strokes(rec: &ComponentRecord) -> Vec<usize> {
        let b = rec.image.bbox().unwrap();
        let y = (b.y0 + b.y1) / 2;
        (b.x0 + 1..b.x1 - 1).filter(|&x| rec.image.get(x, y)).collect()
    }

    #[test]
    fn plain_window_is_a_rectangle() {
        let r = gen_component(ComponentKind::Window, 1, 1, 32, 5, ComponentView::Front).unwrap();
        let regions = propose_regions(&r.image).unwrap();
        assert_eq!(regions.len(), 1);
        let b = r.image.bbox().unwrap();
        assert_eq!(r.image.ink_count(), 2 * (b.width() + b.height()) - 4);
    }

    #[test]
    fn one_by_four_has_three_mullions_at_quarters() {
        for seed in 0..20 {
            let r = gen_component(ComponentKind::Window, 1, 4, 64, seed, ComponentView::Front).unwrap();
            let b = r.image.bbox().unwrap();
            let xs = interior_vertical_strokes(&r);
            let mut groups: Vec<Vec<usize>> = Vec::new();
            for x in xs {
                match groups.last_mut() {
                    Some(g) if *g.last().unwrap() + 1 == x => g.push(x),
                    _ => groups.push(vec![x]),
                }
            }
            assert_eq!(groups.len(), 3, "seed {seed}");
            let inner = (b.width() - 1) as f64;
            for (i, g) in groups.iter().enumerate() {
                let expect = b.x0 as f64 + inner * (i + 1) as f64 / 4.0;
                let mid = (g[0] + g[g.len() - 1]) as f64 / 2.0;
                assert!((mid - expect).abs() <= 1.5, "seed {seed}: mullion {i} at {mid}, expected {expect}");
            }
            assert_eq!(propose_regions(&r.image).unwrap().len(), 4);
        }
    }

    #[test]
    fn pane_counts_for_all_classes() {
        for rows in 1..=MAX_ROWS {
            for cols in 1..=MAX_COLS {
                for view in [ComponentView::Front, ComponentView::Oblique] {
                    let r = gen_component(ComponentKind::Window, rows, cols, 64, 9, view).unwrap();
                    let n = propose_regions(&r.image).unwrap().len();
                    assert_eq!(n, (rows * cols) as usize, "{rows}x{cols} {view:?}");
                }
            }
        }
    }

    #[test]
    fn deterministic_and_validated() {
        let a = gen_component(ComponentKind::Door, 2, 1, 48, 77, ComponentView::Oblique).unwrap();
        let b = gen_component(ComponentKind::Door, 2, 1, 48, 77, ComponentView::Oblique).unwrap();
        assert_eq!(a, b);
        assert!(gen_component(ComponentKind::Window, 0, 1, 48, 0, ComponentView::Front).is_err());
        assert!(gen_component(ComponentKind::Window, 1, 1, 15, 0, ComponentView::Front).is_err());
    }

    #[test]
    fn dataset_coverage_and_determinism() {
        let one = gen_component_dataset(1, 4).unwrap();
        assert_eq!(one.len(), 1);
        let full = gen_component_dataset(PAPER_COMPONENT_COUNT, 4).unwrap();
        assert_eq!(full.len(), 300);
        let mut seen = HashSet::new();
        for r in &full {
            seen.insert((r.kind, r.rows, r.cols));
        }
        assert_eq!(seen.len(), 2 * 4 * 6);
        let ids: HashSet<u64> = full.iter().map(|r| r.id).collect();
        assert_eq!(ids.len(), 300);
        assert_eq!(gen_component_dataset(40, 9).unwrap(), gen_component_dataset(40, 9).unwrap());
    }
}
