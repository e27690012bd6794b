//! Prompt-guided component segmentation.
//!
//! Candidate regions are the interiors of closed stroke loops: 4-connected
//! paper components that never reach the canvas border, grown by the ink
//! pixels that bound them. Point and box prompts then select among the
//! candidates.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imaging::{BBox, BinarySketch, RegionMask};

#[derive(Debug, Error, PartialEq)]
pub enum SegmentError {
    #[error("sketch has no ink")]
    NoInk,
    #[error("prompt has no points or boxes")]
    EmptyPrompt,
    #[error("prompt coordinate ({0}, {1}) outside the {2}x{3} sketch")]
    OutOfBounds(usize, usize, usize, usize),
    #[error("degenerate prompt box")]
    DegenerateBox,
    #[error("ambiguous prompt: {0}")]
    AmbiguousPrompt(String),
    #[error("conflicting prompt: foreground and background points in region {0}")]
    ConflictingPrompt(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PointLabel {
    Foreground,
    Background,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptPoint {
    pub x: usize,
    pub y: usize,
    pub label: PointLabel,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegPrompt {
    #[serde(default)]
    pub points: Vec<PromptPoint>,
    #[serde(default)]
    pub boxes: Vec<BBox>,
}

impl SegPrompt {
    pub fn point(x: usize, y: usize) -> Self {
        SegPrompt { points: vec![PromptPoint { x, y, label: PointLabel::Foreground }], boxes: vec![] }
    }

    pub fn bbox(b: BBox) -> Self {
        SegPrompt { points: vec![], boxes: vec![b] }
    }

    pub fn with_background(mut self, x: usize, y: usize) -> Self {
        self.points.push(PromptPoint { x, y, label: PointLabel::Background });
        self
    }

    pub fn validate(&self, width: usize, height: usize) -> Result<(), SegmentError> {
        if self.points.is_empty() && self.boxes.is_empty() {
            return Err(SegmentError::EmptyPrompt);
        }
        for p in &self.points {
            if p.x >= width || p.y >= height {
                return Err(SegmentError::OutOfBounds(p.x, p.y, width, height));
            }
        }
        for b in &self.boxes {
            if b.is_degenerate() {
                return Err(SegmentError::DegenerateBox);
            }
            if b.x1 > width || b.y1 > height {
                return Err(SegmentError::OutOfBounds(b.x1, b.y1, width, height));
            }
        }
        Ok(())
    }

    fn foreground(&self) -> impl Iterator<Item = &PromptPoint> {
        self.points.iter().filter(|p| p.label == PointLabel::Foreground)
    }

    fn background(&self) -> impl Iterator<Item = &PromptPoint> {
        self.points.iter().filter(|p| p.label == PointLabel::Background)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComponentRegion {
    pub mask: RegionMask,
    pub source_prompt: Option<SegPrompt>,
    pub confidence: f64,
}

impl ComponentRegion {
    pub fn bbox(&self) -> BBox {
        self.mask.bbox().expect("component regions are non-empty")
    }

    pub fn area(&self) -> usize {
        self.mask.area()
    }
}

/// One enclosed region before prompt matching; `label` is the order in which
/// its paper component was first met in a raster scan.
#[derive(Debug, Clone)]
struct Proposal {
    label: usize,
    region: ComponentRegion,
}

fn label_paper_components(sketch: &BinarySketch) -> (Vec<Option<usize>>, Vec<bool>) {
    let (w, h) = (sketch.width(), sketch.height());
    let mut labels: Vec<Option<usize>> = vec![None; w * h];
    let mut touches_border = Vec::new();
    let mut stack = Vec::new();
    for start in 0..w * h {
        if sketch.ink()[start] || labels[start].is_some() {
            continue;
        }
        let id = touches_border.len();
        let mut border = false;
        labels[start] = Some(id);
        stack.push(start);
        while let Some(i) = stack.pop() {
            let (x, y) = (i % w, i / w);
            if x == 0 || y == 0 || x == w - 1 || y == h - 1 {
                border = true;
            }
            let mut visit = |j: usize| {
                if !sketch.ink()[j] && labels[j].is_none() {
                    labels[j] = Some(id);
                    stack.push(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
        }
        touches_border.push(border);
    }
    (labels, touches_border)
}

fn enclosed_proposals(sketch: &BinarySketch) -> Vec<Proposal> {
    let (w, h) = (sketch.width(), sketch.height());
    let (labels, touches_border) = label_paper_components(sketch);
    let mut members: Vec<Vec<bool>> = Vec::new();
    let mut slot: Vec<Option<usize>> = vec![None; touches_border.len()];
    for (id, &border) in touches_border.iter().enumerate() {
        if !border {
            slot[id] = Some(members.len());
            members.push(vec![false; w * h]);
        }
    }
    for (i, l) in labels.iter().enumerate() {
        if let Some(s) = l.and_then(|l| slot[l]) {
            members[s][i] = true;
        }
    }
    let enclosed_ids: Vec<usize> = (0..touches_border.len()).filter(|&id| !touches_border[id]).collect();

    let mut out = Vec::new();
    for (s, interior) in members.into_iter().enumerate() {
        let mut mask = interior.clone();
        // Grow by the 8-adjacent stroke pixels that bound the interior. Ink on
        // the canvas border is left out so masks never touch the border.
        for y in 1..h.saturating_sub(1) {
            for x in 1..w.saturating_sub(1) {
                let i = y * w + x;
                if !sketch.ink()[i] {
                    continue;
                }
                let bounds = (-1i64..=1).any(|dy| {
                    (-1i64..=1).any(|dx| {
                        let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                        interior[ny as usize * w + nx as usize]
                    })
                });
                if bounds {
                    mask[i] = true;
                }
            }
        }
        let mask = RegionMask::from_members(w, h, mask).expect("same canvas");
        let confidence = closure_ratio(sketch, &mask);
        out.push(Proposal {
            label: enclosed_ids[s],
            region: ComponentRegion { mask, source_prompt: None, confidence },
        });
    }
    out.sort_by(|a, b| region_order(&a.region, a.label, &b.region, b.label));
    out
}

/// Larger area first, then top-left-most bbox, then lower label.
fn region_order(a: &ComponentRegion, la: usize, b: &ComponentRegion, lb: usize) -> std::cmp::Ordering {
    let (ba, bb) = (a.bbox(), b.bbox());
    b.area().cmp(&a.area()).then(ba.y0.cmp(&bb.y0)).then(ba.x0.cmp(&bb.x0)).then(la.cmp(&lb))
}

/// Fraction of the mask's outer boundary pixels that are ink.
fn closure_ratio(sketch: &BinarySketch, mask: &RegionMask) -> f64 {
    let (w, h) = (mask.width() as i64, mask.height() as i64);
    let (mut boundary, mut inked) = (0usize, 0usize);
    for y in 0..h {
        for x in 0..w {
            if !mask.contains(x as usize, y as usize) {
                continue;
            }
            let edge = [(-1, 0), (1, 0), (0, -1), (0, 1)].iter().any(|(dx, dy)| {
                let (nx, ny) = (x + dx, y + dy);
                nx < 0 || ny < 0 || nx >= w || ny >= h || !mask.contains(nx as usize, ny as usize)
            });
            if edge {
                boundary += 1;
                if sketch.get(x as usize, y as usize) {
                    inked += 1;
                }
            }
        }
    }
    if boundary == 0 {
        0.0
    } else {
        inked as f64 / boundary as f64
    }
}

/// All closed-loop interiors of `sketch`, largest first. A sketch with ink but
/// no enclosures yields an empty list.
pub fn propose_regions(sketch: &BinarySketch) -> Result<Vec<ComponentRegion>, SegmentError> {
    if sketch.is_blank() {
        return Err(SegmentError::NoInk);
    }
    Ok(enclosed_proposals(sketch).into_iter().map(|p| p.region).collect())
}

/// Proposals that survive the prompt's point constraints, in proposal order.
/// Background points veto; foreground points (if any) must hit the region.
fn candidates(sketch: &BinarySketch, prompt: &SegPrompt) -> Result<Vec<Proposal>, SegmentError> {
    let proposals = if sketch.is_blank() { Vec::new() } else { enclosed_proposals(sketch) };
    let fg: Vec<_> = prompt.foreground().collect();
    let bg: Vec<_> = prompt.background().collect();
    let mut out = Vec::new();
    for p in proposals {
        let vetoed = bg.iter().any(|pt| p.region.mask.contains(pt.x, pt.y));
        let hit = fg.iter().any(|pt| p.region.mask.contains(pt.x, pt.y));
        if vetoed && hit {
            return Err(SegmentError::ConflictingPrompt(p.label));
        }
        if vetoed || (!fg.is_empty() && !hit) {
            continue;
        }
        out.push(p);
    }
    Ok(out)
}

/// Selects one region for a point/box prompt.
///
/// Boxes pick the candidate with the highest bbox IoU (ties: larger area,
/// then proposal order); points alone pick the first candidate containing a
/// foreground point. With no match a box prompt falls back to its rectangle
/// at confidence 0, while a point-only prompt is ambiguous.
pub fn segment_with_prompts(sketch: &BinarySketch, prompt: &SegPrompt) -> Result<ComponentRegion, SegmentError> {
    prompt.validate(sketch.width(), sketch.height())?;
    let cands = candidates(sketch, prompt)?;

    let chosen = if prompt.boxes.is_empty() {
        cands.into_iter().next()
    } else {
        let mut best: Option<(f64, Proposal)> = None;
        for c in cands {
            let iou = prompt.boxes.iter().map(|b| c.region.bbox().iou(b)).fold(0.0, f64::max);
            if iou <= 0.0 {
                continue;
            }
            // Candidates arrive sorted, so strict improvement keeps the
            // larger/earlier region on IoU ties.
            if best.as_ref().is_none_or(|(bi, _)| iou > *bi) {
                best = Some((iou, c));
            }
        }
        best.map(|(_, c)| c)
    };

    match chosen {
        Some(p) => Ok(ComponentRegion { source_prompt: Some(prompt.clone()), ..p.region }),
        None if !prompt.boxes.is_empty() => {
            let (w, h) = (sketch.width(), sketch.height());
            let mut mask = RegionMask::empty(w, h);
            for b in &prompt.boxes {
                mask = crate::imaging::mask_ops(&mask, &RegionMask::from_rect(w, h, *b), crate::imaging::MaskOp::Union)
                    .expect("same canvas");
            }
            Ok(ComponentRegion { mask, source_prompt: Some(prompt.clone()), confidence: 0.0 })
        }
        None => {
            let on_ink = prompt.foreground().any(|p| sketch.get(p.x, p.y));
            let why = if on_ink {
                "foreground point on a stroke with no adjacent enclosed region"
            } else {
                "foreground point is not inside any enclosed region"
            };
            Err(SegmentError::AmbiguousPrompt(why.into()))
        }
    }
}
