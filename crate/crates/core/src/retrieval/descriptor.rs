//! HOG-style stroke descriptors: 4×4 spatial cells × 8 tangent-orientation
//! bins over a 24 px patch, soft-binned in both space and orientation so the
//! descriptor commutes with mirroring and 90° rotation.

use std::f64::consts::PI;

use crate::imaging::{resize_nearest, BinarySketch};

pub const CELLS: usize = 4;
pub const ORIENTATIONS: usize = 8;
pub const DESCRIPTOR_LEN: usize = CELLS * CELLS * ORIENTATIONS;
pub const DEFAULT_STRIDE: usize = 4;
pub const DEFAULT_PATCH: usize = 24;
/// Longest side of the canonical drawing that crops are scaled to.
pub const CANONICAL_SIZE: usize = 64;
/// Blank border around the canonical drawing (half a patch).
pub const CANONICAL_PAD: usize = DEFAULT_PATCH / 2;

#[derive(Debug, Clone, PartialEq)]
pub struct LocalDescriptor {
    pub vector: Vec<f64>,
    pub keypoint: (usize, usize),
    pub patch_size: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct DescriptorParams {
    pub stride: usize,
    pub patch_size: usize,
}

impl Default for DescriptorParams {
    fn default() -> Self {
        DescriptorParams { stride: DEFAULT_STRIDE, patch_size: DEFAULT_PATCH }
    }
}

/// Crops to the ink bounding box, scales the longest side to
/// [`CANONICAL_SIZE`] keeping the aspect ratio, and pads every side by
/// [`CANONICAL_PAD`]. Regions and dataset components are thus compared at one
/// scale, and the mapping commutes with mirroring.
pub fn retrieval_view(sketch: &BinarySketch) -> BinarySketch {
    let Some(b) = sketch.bbox() else {
        return BinarySketch::blank(CANONICAL_SIZE, CANONICAL_SIZE);
    };
    let crop = sketch.crop(b).expect("bbox lies on the canvas");
    let longest = b.width().max(b.height()) as f64;
    let scale = CANONICAL_SIZE as f64 / longest;
    let tw = ((b.width() as f64 * scale).round() as usize).max(1);
    let th = ((b.height() as f64 * scale).round() as usize).max(1);
    let scaled = resize_nearest(&crop, tw, th);
    let mut out = BinarySketch::blank(tw + 2 * CANONICAL_PAD, th + 2 * CANONICAL_PAD);
    for y in 0..th {
        for x in 0..tw {
            if scaled.get(x, y) {
                out.set(x + CANONICAL_PAD, y + CANONICAL_PAD, true);
            }
        }
    }
    out
}

/// Grid membership anchored on the canvas center: symmetric under mirroring.
fn on_grid(i: usize, len: usize, stride: usize) -> bool {
    let u = (2 * i as i64 - (len as i64 - 1)).unsigned_abs() as usize / 2;
    u.is_multiple_of(stride)
}

/// Per-pixel stroke orientation: magnitude plus two soft orientation bins.
struct OrientationField {
    width: usize,
    height: usize,
    /// (magnitude, bin0, weight0, bin1, weight1) per pixel.
    entries: Vec<(f64, usize, f64, usize, f64)>,
}

fn orientation_field(sketch: &BinarySketch) -> OrientationField {
    let (w, h) = (sketch.width() as i64, sketch.height() as i64);
    let ink = |x: i64, y: i64| if sketch.get_signed(x, y) { 1.0 } else { 0.0 };
    // 3×3 binomial smoothing, zero outside the canvas.
    let mut smooth = vec![0.0; (w * h) as usize];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for dy in -1..=1i64 {
                for dx in -1..=1i64 {
                    let k = (2 - dx.abs()) * (2 - dy.abs());
                    acc += k as f64 * ink(x + dx, y + dy);
                }
            }
            smooth[(y * w + x) as usize] = acc / 16.0;
        }
    }
    let s = |x: i64, y: i64| {
        if x < 0 || y < 0 || x >= w || y >= h {
            0.0
        } else {
            smooth[(y * w + x) as usize]
        }
    };
    let bin_width = PI / ORIENTATIONS as f64;
    let mut entries = Vec::with_capacity(smooth.len());
    for y in 0..h {
        for x in 0..w {
            let gx = (s(x + 1, y - 1) + 2.0 * s(x + 1, y) + s(x + 1, y + 1))
                - (s(x - 1, y - 1) + 2.0 * s(x - 1, y) + s(x - 1, y + 1));
            let gy = (s(x - 1, y + 1) + 2.0 * s(x, y + 1) + s(x + 1, y + 1))
                - (s(x - 1, y - 1) + 2.0 * s(x, y - 1) + s(x + 1, y - 1));
            let mag = (gx * gx + gy * gy).sqrt();
            if mag < 1e-12 {
                entries.push((0.0, 0, 0.0, 0, 0.0));
                continue;
            }
            // Stroke tangent is perpendicular to the ink gradient; mod π.
            let tangent = (gy.atan2(gx) + PI / 2.0).rem_euclid(PI);
            let o = tangent / bin_width - 0.5;
            let lo = o.floor();
            let frac = o - lo;
            let b0 = (lo as i64).rem_euclid(ORIENTATIONS as i64) as usize;
            let b1 = (b0 + 1) % ORIENTATIONS;
            entries.push((mag, b0, 1.0 - frac, b1, frac));
        }
    }
    OrientationField { width: w as usize, height: h as usize, entries }
}

fn near_ink(sketch: &BinarySketch, x: usize, y: usize, radius: i64) -> bool {
    (-radius..=radius).any(|dy| (-radius..=radius).any(|dx| sketch.get_signed(x as i64 + dx, y as i64 + dy)))
}

pub fn extract_descriptors(sketch: &BinarySketch) -> Vec<LocalDescriptor> {
    extract_descriptors_with(sketch, DescriptorParams::default())
}

/// Keypoints are center-anchored grid points (spacing `stride`) that have ink
/// within `stride / 2`; descriptors with no gradient energy are dropped.
pub fn extract_descriptors_with(sketch: &BinarySketch, params: DescriptorParams) -> Vec<LocalDescriptor> {
    if sketch.is_blank() {
        return Vec::new();
    }
    let field = orientation_field(sketch);
    let half = (params.patch_size / 2) as i64;
    let cell = params.patch_size as f64 / CELLS as f64;
    let radius = (params.stride / 2) as i64;
    let mut out = Vec::new();
    for ky in 0..field.height {
        if !on_grid(ky, field.height, params.stride) {
            continue;
        }
        for kx in 0..field.width {
            if !on_grid(kx, field.width, params.stride) || !near_ink(sketch, kx, ky, radius) {
                continue;
            }
            let mut v = vec![0.0; DESCRIPTOR_LEN];
            for dy in -half..=half {
                let py = ky as i64 + dy;
                if py < 0 || py >= field.height as i64 {
                    continue;
                }
                // Continuous cell coordinate; cell centers sit at 0..CELLS-1.
                let qy = dy as f64 / cell + (CELLS as f64 - 1.0) / 2.0;
                let cy0 = qy.floor();
                let fy = qy - cy0;
                for dx in -half..=half {
                    let px = kx as i64 + dx;
                    if px < 0 || px >= field.width as i64 {
                        continue;
                    }
                    let (mag, b0, w0, b1, w1) = field.entries[py as usize * field.width + px as usize];
                    if mag == 0.0 {
                        continue;
                    }
                    let qx = dx as f64 / cell + (CELLS as f64 - 1.0) / 2.0;
                    let cx0 = qx.floor();
                    let fx = qx - cx0;
                    for (cy, wy) in [(cy0 as i64, 1.0 - fy), (cy0 as i64 + 1, fy)] {
                        if cy < 0 || cy >= CELLS as i64 || wy == 0.0 {
                            continue;
                        }
                        for (cx, wx) in [(cx0 as i64, 1.0 - fx), (cx0 as i64 + 1, fx)] {
                            if cx < 0 || cx >= CELLS as i64 || wx == 0.0 {
                                continue;
                            }
                            let base = (cy as usize * CELLS + cx as usize) * ORIENTATIONS;
                            let w = mag * wy * wx;
                            v[base + b0] += w * w0;
                            v[base + b1] += w * w1;
                        }
                    }
                }
            }
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            if norm == 0.0 {
                continue;
            }
            v.iter_mut().for_each(|a| *a /= norm);
            out.push(LocalDescriptor { vector: v, keypoint: (kx, ky), patch_size: params.patch_size });
        }
    }
    out
}

/// Where a descriptor component lands after mirroring the sketch horizontally.
pub fn mirrored_index(i: usize) -> usize {
    let bin = i % ORIENTATIONS;
    let cell = i / ORIENTATIONS;
    let (cy, cx) = (cell / CELLS, cell % CELLS);
    (cy * CELLS + (CELLS - 1 - cx)) * ORIENTATIONS + (ORIENTATIONS - 1 - bin)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn orientation_totals(ds: &[LocalDescriptor]) -> [f64; ORIENTATIONS] {
        let mut t = [0.0; ORIENTATIONS];
        for d in ds {
            for (i, v) in d.vector.iter().enumerate() {
                t[i % ORIENTATIONS] += v;
            }
        }
        t
    }

    #[test]
    fn blank_has_no_descriptors() {
        assert!(extract_descriptors(&BinarySketch::blank(32, 32)).is_empty());
    }

    #[test]
    fn vertical_line_concentrates_in_vertical_bins() {
        let mut s = BinarySketch::blank(64, 64);
        s.draw_line(31, 0, 31, 63);
        let ds = extract_descriptors(&s);
        assert!(!ds.is_empty());
        for d in &ds {
            // A vertical tangent is π/2: exactly between bins 3 and 4.
            let mut vertical = 0.0;
            let mut total = 0.0;
            for (i, v) in d.vector.iter().enumerate() {
                total += v;
                if matches!(i % ORIENTATIONS, 3 | 4) {
                    vertical += v;
                }
            }
            assert!(vertical / total > 0.9, "vertical fraction {}", vertical / total);
            for (i, v) in d.vector.iter().enumerate() {
                assert!(*v >= 0.0, "component {i} negative");
            }
        }
        // Away from the line ends the mass is entirely vertical.
        let mid = ds.iter().find(|d| d.keypoint.1 == 31 || d.keypoint.1 == 32).unwrap();
        let off: f64 = mid.vector.iter().enumerate().filter(|(i, _)| !matches!(i % 8, 3 | 4)).map(|(_, v)| v).sum();
        assert!(off < 1e-12);
    }

    #[test]
    fn rotation_shifts_orientation_by_four_bins() {
        let mut s = BinarySketch::blank(64, 64);
        s.draw_line(20, 10, 20, 50);
        s.draw_line(5, 30, 58, 30);
        s.draw_line(40, 12, 50, 12);
        let a = orientation_totals(&extract_descriptors(&s));
        let b = orientation_totals(&extract_descriptors(&s.rot90()));
        for k in 0..ORIENTATIONS {
            assert!((a[k] - b[(k + 4) % ORIENTATIONS]).abs() < 1e-9, "bin {k}: {a:?} vs {b:?}");
        }
    }

    #[test]
    fn mirror_equivariance() {
        let mut s = BinarySketch::blank(64, 64);
        s.draw_rect(5, 7, 40, 50);
        s.draw_line(10, 60, 60, 20);
        let a = extract_descriptors(&s);
        let b = extract_descriptors(&s.hflip());
        assert_eq!(a.len(), b.len());
        for d in &a {
            let mx = 63 - d.keypoint.0;
            let m = b.iter().find(|e| e.keypoint == (mx, d.keypoint.1)).expect("mirrored keypoint");
            for i in 0..DESCRIPTOR_LEN {
                assert!((d.vector[i] - m.vector[mirrored_index(i)]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn descriptors_are_unit_norm() {
        let mut s = BinarySketch::blank(40, 40);
        s.draw_rect(3, 3, 30, 20);
        for d in extract_descriptors(&s) {
            let n = d.vector.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() <= 1e-6);
            assert_eq!(d.vector.len(), DESCRIPTOR_LEN);
        }
    }
}
