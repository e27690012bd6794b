//! Turning a rough sketch plus retrieved components into a detailed sketch,
//! by direct compositing or by masked diffusion inpainting.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffusion::{
    encode_sketch, encode_text, sample, DenoiserParams, DiffusionError, Inpaint, LatentImage, NoiseSchedule,
};
use crate::imaging::{warp_into_bbox, BBox, BinarySketch, ImagingError, RegionMask};
use crate::retrieval::ComponentRecord;
use crate::segmenter::ComponentRegion;

#[derive(Debug, Error)]
pub enum RefineError {
    #[error("region is empty")]
    EmptyRegion,
    #[error("region bounding box is degenerate")]
    DegenerateRegion,
    #[error("component {0} has a blank image")]
    EmptyComponent(u64),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Imaging(#[from] ImagingError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProvenanceSource {
    Component(u64),
    Generated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub bbox: BBox,
    pub source: ProvenanceSource,
}

/// A sketch with the record of every region that was rewritten.
#[derive(Debug, Clone, PartialEq)]
pub struct DetailedSketch {
    pub sketch: BinarySketch,
    pub provenance: Vec<Provenance>,
}

impl DetailedSketch {
    pub fn from_rough(rough: &BinarySketch) -> Self {
        DetailedSketch { sketch: rough.clone(), provenance: Vec::new() }
    }

    /// Composites onto the current sketch and appends the placement.
    pub fn compose(&mut self, region: &ComponentRegion, component: &ComponentRecord) -> Result<(), RefineError> {
        let step = composite(&self.sketch, region, component)?;
        self.sketch = step.sketch;
        self.provenance.extend(step.provenance);
        Ok(())
    }
}

fn check_region(rough: &BinarySketch, region: &ComponentRegion) -> Result<BBox, RefineError> {
    let m = &region.mask;
    if (m.width(), m.height()) != (rough.width(), rough.height()) {
        return Err(RefineError::ShapeMismatch(format!(
            "mask is {}x{}, sketch is {}x{}",
            m.width(),
            m.height(),
            rough.width(),
            rough.height()
        )));
    }
    let bbox = m.bbox().ok_or(RefineError::EmptyRegion)?;
    if bbox.is_degenerate() {
        return Err(RefineError::DegenerateRegion);
    }
    Ok(bbox)
}

/// The component warped into `bbox` on a blank canvas the size of `like`.
fn placed_component(like: &BinarySketch, bbox: BBox, component: &ComponentRecord) -> Result<BinarySketch, RefineError> {
    if component.image.is_blank() {
        return Err(RefineError::EmptyComponent(component.id));
    }
    let patch = warp_into_bbox(&component.image, bbox)?;
    let mut canvas = BinarySketch::blank(like.width(), like.height());
    for y in 0..patch.height() {
        for x in 0..patch.width() {
            if patch.get(x, y) {
                canvas.set(bbox.x0 + x, bbox.y0 + y, true);
            }
        }
    }
    Ok(canvas)
}

/// Clears the region interior (the mask minus its boundary ring) and draws
/// the warped component, clipped to the mask.
pub fn composite(
    rough: &BinarySketch,
    region: &ComponentRegion,
    component: &ComponentRecord,
) -> Result<DetailedSketch, RefineError> {
    let bbox = check_region(rough, region)?;
    let placed = placed_component(rough, bbox, component)?;
    let interior = region.mask.eroded();
    let mut out = rough.clone();
    for y in bbox.y0..bbox.y1 {
        for x in bbox.x0..bbox.x1 {
            if !region.mask.contains(x, y) {
                continue;
            }
            let keep = rough.get(x, y) && !interior.contains(x, y);
            out.set(x, y, keep || placed.get(x, y));
        }
    }
    Ok(DetailedSketch {
        sketch: out,
        provenance: vec![Provenance { bbox, source: ProvenanceSource::Component(component.id) }],
    })
}

/// Masked reverse diffusion inside the region: the rough sketch is known
/// outside it, the warped component conditions the encoder and the prompt
/// the text branch.
#[allow(clippy::too_many_arguments)]
pub fn inpaint_refine(
    rough: &BinarySketch,
    region: &ComponentRegion,
    prompt: &str,
    component: &ComponentRecord,
    model: &DenoiserParams,
    schedule: &NoiseSchedule,
    steps: usize,
    seed: u64,
) -> Result<DetailedSketch, RefineError> {
    let bbox = check_region(rough, region)?;
    if model.config.image_channels != 1 {
        return Err(RefineError::ShapeMismatch(format!(
            "refinement needs a 1-channel model, got {} channels",
            model.config.image_channels
        )));
    }
    let placed = placed_component(rough, bbox, component)?;
    let c_s = encode_sketch(&placed, model)?;
    let c_t = encode_text(prompt);
    let known: RegionMask = region.mask.complement();
    let x0 = LatentImage::from_sketch(rough);
    let out = sample(model, schedule, &c_t, &c_s, steps, seed, Some(Inpaint { known: &known, x0: &x0 }))?;
    let mut sketch = out.to_sketch();
    for y in 0..rough.height() {
        for x in 0..rough.width() {
            if known.contains(x, y) {
                sketch.set(x, y, rough.get(x, y));
            }
        }
    }
    Ok(DetailedSketch { sketch, provenance: vec![Provenance { bbox, source: ProvenanceSource::Generated }] })
}
