use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{DataError, TrainingTriplet};
use crate::imaging::{resize_nearest, BBox};

pub const MIN_CROP_FRACTION: f64 = 0.75;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AugmentOp {
    HFlip,
    /// Keeps a random window of `fraction` of each side, then rescales.
    RandomCrop {
        fraction: f64,
    },
    StrokeJitter,
}

/// Applies `ops` in the fixed order jitter, flip, crop, whatever their order
/// in the slice.
pub fn augment(t: &TrainingTriplet, ops: &[AugmentOp], seed: u64) -> Result<TrainingTriplet, DataError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = t.clone();
    let crop = ops.iter().find_map(|op| match op {
        AugmentOp::RandomCrop { fraction } => Some(*fraction),
        _ => None,
    });
    if let Some(f) = crop {
        if !(MIN_CROP_FRACTION..=1.0).contains(&f) {
            return Err(DataError::CropBound(f));
        }
    }
    if ops.contains(&AugmentOp::StrokeJitter) {
        out.strokes = out.strokes.jittered(&mut rng);
        out.sketch = out.strokes.rasterize();
    }
    if ops.contains(&AugmentOp::HFlip) {
        out.sketch = out.sketch.hflip();
        out.render = out.render.hflip();
        out.strokes = out.strokes.hflip();
        out.spec.door_bay = out.spec.bays - 1 - out.spec.door_bay;
    }
    if let Some(f) = crop {
        let (w, h) = (out.sketch.width(), out.sketch.height());
        let cw = ((w as f64 * f).ceil() as usize).clamp(1, w);
        let ch = ((h as f64 * f).ceil() as usize).clamp(1, h);
        let x0 = rng.random_range(0..=w - cw);
        let y0 = rng.random_range(0..=h - ch);
        let b = BBox::new(x0, y0, x0 + cw, y0 + ch);
        out.sketch = resize_nearest(&out.sketch.crop(b)?, w, h);
        out.render = out.render.crop(b)?.resize_nearest(w, h);
        out.strokes = out.strokes.crop_rescaled(x0, y0, cw, ch);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{facade_layout, gen_facade_pair, FacadeSpec, Material, Roof, Style};
    use crate::segmenter::propose_regions;

    fn triplet() -> TrainingTriplet {
        let spec = FacadeSpec {
            floors: 3,
            bays: 3,
            window_rows: 2,
            window_cols: 2,
            door_bay: 0,
            material: Material::Wood,
            style: Style::Classic,
            roof: Roof::Pitched,
            elevated: true,
        };
        gen_facade_pair(&spec, 128, 0).unwrap()
    }

    /// Counts enclosed regions inside window frames; `mirrored` says the
    /// triplet was flipped relative to its spec's layout.
    fn window_panes(t: &TrainingTriplet, mirrored: bool) -> usize {
        let w = t.sketch.width();
        let boxes: Vec<BBox> = if mirrored {
            let original = FacadeSpec { door_bay: t.spec.bays - 1 - t.spec.door_bay, ..t.spec };
            facade_layout(&original, w)
                .unwrap()
                .window_boxes()
                .into_iter()
                .map(|b| BBox::new(w - b.x1, b.y0, w - b.x0, b.y1))
                .collect()
        } else {
            facade_layout(&t.spec, w).unwrap().window_boxes()
        };
        propose_regions(&t.sketch)
            .unwrap()
            .iter()
            .filter(|r| boxes.iter().any(|b| r.bbox().intersection(b) == Some(r.bbox())))
            .count()
    }

    #[test]
    fn empty_ops_is_identity() {
        let t = triplet();
        assert_eq!(augment(&t, &[], 3).unwrap(), t);
    }

    #[test]
    fn hflip_is_an_involution() {
        let t = triplet();
        let twice = augment(&augment(&t, &[AugmentOp::HFlip], 1).unwrap(), &[AugmentOp::HFlip], 2).unwrap();
        assert_eq!(twice.sketch, t.sketch);
        assert_eq!(twice.render, t.render);
        assert_eq!(twice.spec, t.spec);
    }

    #[test]
    fn label_safe_ops_keep_window_count() {
        let t = triplet();
        let expected = t.spec.window_count();
        assert_eq!(window_panes(&t, false), expected);
        for seed in 0..10 {
            let f = augment(&t, &[AugmentOp::HFlip], seed).unwrap();
            assert_eq!(f.spec.door_bay, 2);
            assert_eq!(window_panes(&f, true), expected);
            let j = augment(&t, &[AugmentOp::StrokeJitter], seed).unwrap();
            assert_eq!(j.spec, t.spec);
            assert_eq!(window_panes(&j, false), expected, "seed {seed}");
        }
    }

    #[test]
    fn crop_bounds() {
        let t = triplet();
        assert!(matches!(augment(&t, &[AugmentOp::RandomCrop { fraction: 0.7 }], 0), Err(DataError::CropBound(_))));
        let c = augment(&t, &[AugmentOp::RandomCrop { fraction: 0.8 }], 0).unwrap();
        assert_eq!((c.sketch.width(), c.render.width), (128, 128));
        let full = augment(&t, &[AugmentOp::RandomCrop { fraction: 1.0 }], 0).unwrap();
        assert_eq!(full.sketch, t.sketch);
    }
}
