//! Session-level pipeline stages shared by the CLI and the HTTP service:
//! segment, retrieve, compose, undo, generate. Both front ends drive a
//! [`Workspace`], so equal inputs and seeds give equal bytes.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DataError, TrainingTriplet};
use crate::diffusion::{
    encode_sketch, encode_text, sample, Checkpoint, DiffusionError, LatentImage, TrainItem, DEFAULT_SAMPLING_STEPS,
};
use crate::imaging::{color_png_bytes, resize_pooled, sketch_png_bytes, BBox, BinarySketch, ColorImage, ImagingError};
use crate::metrics::{psnr, ssim, MetricsError};
use crate::refine::{composite, inpaint_refine, DetailedSketch, Provenance, RefineError};
use crate::retrieval::{parse_component_query, ComponentIndex, ComponentKind, ComponentView, RetrievalError};
use crate::segmenter::{segment_with_prompts, ComponentRegion, SegPrompt, SegmentError};

pub const DEFAULT_TOP_K: usize = 5;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Segment(#[from] SegmentError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Refine(#[from] RefineError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Imaging(#[from] ImagingError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("unknown region {0}")]
    UnknownRegion(usize),
    #[error("unknown component {0}")]
    UnknownComponent(u64),
    #[error("component {component} was not offered for region {region}")]
    NotOffered { component: u64, region: usize },
    #[error("nothing to undo")]
    NothingToUndo,
    #[error("no component index loaded")]
    NoIndex,
    #[error("no {0} model loaded")]
    NoModel(&'static str),
    #[error("{0}")]
    Invalid(String),
}

impl PipelineError {
    /// Pipeline stage the error belongs to.
    pub fn stage(&self) -> &'static str {
        match self {
            PipelineError::Segment(_) | PipelineError::UnknownRegion(_) => "segment",
            PipelineError::Retrieval(_) | PipelineError::NoIndex => "retrieve",
            PipelineError::Refine(_)
            | PipelineError::UnknownComponent(_)
            | PipelineError::NotOffered { .. }
            | PipelineError::NothingToUndo => "compose",
            PipelineError::Diffusion(_) | PipelineError::NoModel(_) | PipelineError::Metrics(_) => "generate",
            PipelineError::Imaging(_) | PipelineError::Data(_) | PipelineError::Invalid(_) => "input",
        }
    }

    /// Errors caused by the request rather than by the program.
    pub fn is_user_error(&self) -> bool {
        !matches!(
            self,
            PipelineError::Retrieval(RetrievalError::Io(_))
                | PipelineError::Data(DataError::Io(_))
                | PipelineError::Diffusion(DiffusionError::Divergence { .. } | DiffusionError::Io(_))
        )
    }
}

/// One ranked retrieval result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub component_id: u64,
    pub similarity: f64,
    pub kind: ComponentKind,
    pub rows: u32,
    pub cols: u32,
    pub view: ComponentView,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ComposeMode {
    #[default]
    Composite,
    Inpaint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetrieveRequest {
    pub region_id: usize,
    pub query: String,
    #[serde(default = "default_top_k")]
    pub top_k: usize,
}

fn default_top_k() -> usize {
    DEFAULT_TOP_K
}

fn default_steps() -> usize {
    DEFAULT_SAMPLING_STEPS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComposeRequest {
    pub region_id: usize,
    pub component_id: u64,
    #[serde(default)]
    pub mode: ComposeMode,
    /// Inpainting only.
    #[serde(default)]
    pub prompt: String,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateRequest {
    pub prompt: String,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenerationMetrics {
    pub psnr: f64,
    pub ssim: f64,
}

/// State of one interactive refinement loop.
#[derive(Debug, Clone)]
pub struct Workspace {
    pub rough: BinarySketch,
    pub detailed: DetailedSketch,
    previous: Option<DetailedSketch>,
    pub regions: Vec<ComponentRegion>,
    /// Component ids offered by the latest retrieval for each region.
    pub offered: Vec<Vec<u64>>,
    pub prompts: Vec<String>,
    pub render: Option<ColorImage>,
    pub reference: Option<ColorImage>,
}

impl Workspace {
    pub fn new(rough: BinarySketch) -> Self {
        Workspace {
            detailed: DetailedSketch::from_rough(&rough),
            rough,
            previous: None,
            regions: Vec::new(),
            offered: Vec::new(),
            prompts: Vec::new(),
            render: None,
            reference: None,
        }
    }

    fn region(&self, id: usize) -> Result<&ComponentRegion, PipelineError> {
        self.regions.get(id).ok_or(PipelineError::UnknownRegion(id))
    }

    /// Segments the current detailed sketch; returns the new region id.
    pub fn segment(&mut self, prompt: &SegPrompt) -> Result<usize, PipelineError> {
        let region = segment_with_prompts(&self.detailed.sketch, prompt)?;
        self.regions.push(region);
        self.offered.push(Vec::new());
        Ok(self.regions.len() - 1)
    }

    /// Ranks components for a region under the filter parsed from `query`.
    pub fn retrieve(&mut self, index: &ComponentIndex, req: &RetrieveRequest) -> Result<Vec<Candidate>, PipelineError> {
        let region = self.region(req.region_id)?;
        let filter = parse_component_query(&req.query)?;
        let crop = region_crop(&self.detailed.sketch, region)?;
        let matches = index.query(&crop, &filter, req.top_k)?;
        let out: Vec<Candidate> = matches
            .iter()
            .map(|m| Candidate {
                component_id: m.record.id,
                similarity: m.similarity,
                kind: m.record.kind,
                rows: m.record.rows,
                cols: m.record.cols,
                view: m.record.view,
            })
            .collect();
        self.offered[req.region_id] = out.iter().map(|c| c.component_id).collect();
        self.prompts.push(req.query.clone());
        Ok(out)
    }

    /// Places an offered component; the prior state is kept for one undo.
    pub fn compose(
        &mut self,
        index: &ComponentIndex,
        refine_model: Option<&Checkpoint>,
        req: &ComposeRequest,
    ) -> Result<&DetailedSketch, PipelineError> {
        let region = self.region(req.region_id)?.clone();
        let record = index.record(req.component_id).ok_or(PipelineError::UnknownComponent(req.component_id))?;
        if !self.offered[req.region_id].contains(&req.component_id) {
            return Err(PipelineError::NotOffered { component: req.component_id, region: req.region_id });
        }
        let step = match req.mode {
            ComposeMode::Composite => composite(&self.detailed.sketch, &region, record)?,
            ComposeMode::Inpaint => {
                let m = refine_model.ok_or(PipelineError::NoModel("refinement"))?;
                inpaint_refine(
                    &self.detailed.sketch,
                    &region,
                    &req.prompt,
                    record,
                    &m.params,
                    &m.schedule,
                    req.steps,
                    req.seed,
                )?
            }
        };
        let mut next = self.detailed.clone();
        next.sketch = step.sketch;
        next.provenance.extend(step.provenance);
        self.previous = Some(std::mem::replace(&mut self.detailed, next));
        Ok(&self.detailed)
    }

    pub fn undo(&mut self) -> Result<&DetailedSketch, PipelineError> {
        self.detailed = self.previous.take().ok_or(PipelineError::NothingToUndo)?;
        Ok(&self.detailed)
    }

    /// Renders the detailed sketch; metrics are attached when a reference
    /// image of the same shape is stored.
    pub fn generate(
        &mut self,
        model: &Checkpoint,
        req: &GenerateRequest,
    ) -> Result<(&ColorImage, Option<GenerationMetrics>), PipelineError> {
        let image = generate_render(model, &self.detailed.sketch, &req.prompt, req.steps, req.seed)?;
        self.prompts.push(req.prompt.clone());
        let metrics = match &self.reference {
            Some(r) => Some(GenerationMetrics { psnr: psnr(&image, r, 1.0)?, ssim: ssim(&image, r)? }),
            None => None,
        };
        Ok((self.render.insert(image), metrics))
    }

    pub fn provenance(&self) -> &[Provenance] {
        &self.detailed.provenance
    }

    /// PNG bytes of a named artifact: `rough.png`, `detailed.png`,
    /// `render.png`, `reference.png` or `region-{id}.png`.
    pub fn image_png(&self, name: &str) -> Option<Vec<u8>> {
        match name {
            "rough.png" => Some(sketch_png_bytes(&self.rough)),
            "detailed.png" => Some(sketch_png_bytes(&self.detailed.sketch)),
            "render.png" => self.render.as_ref().map(color_png_bytes),
            "reference.png" => self.reference.as_ref().map(color_png_bytes),
            _ => {
                let id: usize = name.strip_prefix("region-")?.strip_suffix(".png")?.parse().ok()?;
                self.regions.get(id).map(|r| sketch_png_bytes(&r.mask.to_sketch()))
            }
        }
    }
}

/// The sketch restricted to the region's mask and cropped to its bbox.
pub fn region_crop(sketch: &BinarySketch, region: &ComponentRegion) -> Result<BinarySketch, PipelineError> {
    let b: BBox = region.bbox();
    let mut crop = sketch.crop(b)?;
    for y in 0..b.height() {
        for x in 0..b.width() {
            if !region.mask.contains(b.x0 + x, b.y0 + y) {
                crop.set(x, y, false);
            }
        }
    }
    Ok(crop)
}

/// Resamples a sketch to `r × r` with [`resize_pooled`].
pub fn fit_sketch(sketch: &BinarySketch, r: usize) -> BinarySketch {
    if (sketch.width(), sketch.height()) == (r, r) {
        return sketch.clone();
    }
    resize_pooled(sketch, r, r)
}

/// Samples a render conditioned on `sketch` (fitted to the model resolution)
/// and the prompt keywords.
pub fn generate_render(
    model: &Checkpoint,
    sketch: &BinarySketch,
    prompt: &str,
    steps: usize,
    seed: u64,
) -> Result<ColorImage, PipelineError> {
    let cond = fit_sketch(sketch, model.params.config.resolution);
    let c_s = encode_sketch(&cond, &model.params)?;
    let c_t = encode_text(prompt);
    let out = sample(&model.params, &model.schedule, &c_t, &c_s, steps, seed, None)?;
    Ok(out.to_color())
}

/// Training example for the generator.
pub fn train_item(t: &TrainingTriplet) -> TrainItem {
    TrainItem { x0: LatentImage::from_color(&t.render), text: encode_text(&t.prompt), sketch: t.sketch.clone() }
}

/// A scripted session: region steps in order, then one generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelinePlan {
    pub regions: Vec<RegionStep>,
    pub generate: Option<GenerateRequest>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionStep {
    pub prompt: SegPrompt,
    pub query: String,
    #[serde(default = "default_top_k")]
    pub top_k: usize,
    /// Rank of the candidate to compose.
    #[serde(default)]
    pub pick: usize,
    #[serde(default)]
    pub mode: ComposeMode,
    #[serde(default)]
    pub inpaint_prompt: String,
    #[serde(default = "default_steps")]
    pub inpaint_steps: usize,
    #[serde(default)]
    pub inpaint_seed: u64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_component_dataset, rough_facade, FacadeSpec, Material, Roof, Style};
    use crate::retrieval::build_index;

    fn facade() -> (BinarySketch, BBox) {
        let spec = FacadeSpec {
            floors: 2,
            bays: 3,
            window_rows: 1,
            window_cols: 1,
            door_bay: 0,
            material: Material::Brick,
            style: Style::Modern,
            roof: Roof::Flat,
            elevated: false,
        };
        let (s, layout) = rough_facade(&spec, 128).unwrap();
        (s, layout.window_boxes()[0])
    }

    #[test]
    fn fit_keeps_thin_strokes() {
        let mut s = BinarySketch::blank(128, 128);
        s.draw_line(0, 65, 127, 65);
        s.draw_line(33, 0, 33, 127);
        let f = fit_sketch(&s, 32);
        assert!((0..32).all(|x| f.get(x, 16)));
        assert!((0..32).all(|y| f.get(8, y)));
        assert_eq!(f.ink_count(), 63);
        assert_eq!(fit_sketch(&s, 128), s);
        let up = fit_sketch(&f, 64);
        assert!(up.get(16, 32) && up.get(17, 32));
    }

    #[test]
    fn compose_requires_an_offer_and_undo_restores() {
        let (rough, wb) = facade();
        let index = build_index(&gen_component_dataset(48, 1).unwrap(), 16, 0).unwrap();
        let mut ws = Workspace::new(rough.clone());
        let rid = ws.segment(&SegPrompt::point((wb.x0 + wb.x1) / 2, (wb.y0 + wb.y1) / 2)).unwrap();
        let some_id = index.entries[0].record.id;
        let req = ComposeRequest {
            region_id: rid,
            component_id: some_id,
            mode: ComposeMode::Composite,
            prompt: String::new(),
            steps: 1,
            seed: 0,
        };
        assert!(matches!(ws.compose(&index, None, &req), Err(PipelineError::NotOffered { .. })));
        let cands = ws
            .retrieve(
                &index,
                &RetrieveRequest { region_id: rid, query: "a window with 1 row and 2 columns".into(), top_k: 3 },
            )
            .unwrap();
        assert!(!cands.is_empty() && cands.iter().all(|c| c.rows == 1 && c.cols == 2));
        let req = ComposeRequest { component_id: cands[0].component_id, ..req };
        ws.compose(&index, None, &req).unwrap();
        assert_ne!(ws.detailed.sketch, rough);
        ws.undo().unwrap();
        assert_eq!(ws.detailed.sketch, rough);
        assert!(ws.undo().is_err());
        let inpaint = ComposeRequest { mode: ComposeMode::Inpaint, ..req };
        assert!(matches!(ws.compose(&index, None, &inpaint), Err(PipelineError::NoModel(_))));
        assert!(matches!(
            ws.retrieve(&index, &RetrieveRequest { region_id: 9, query: "window".into(), top_k: 1 }),
            Err(PipelineError::UnknownRegion(9))
        ));
    }

    #[test]
    fn plan_parsing_names_bad_fields() {
        let ok = r#"{"regions":[{"prompt":{"points":[{"x":1,"y":2,"label":"foreground"}]},"query":"window"}],"generate":null}"#;
        let p: PipelinePlan = serde_json::from_str(ok).unwrap();
        assert_eq!(p.regions[0].top_k, DEFAULT_TOP_K);
        let bad = r#"{"regions":[{"prompt":{},"query":"window","topk":3}]}"#;
        let e = serde_json::from_str::<PipelinePlan>(bad).unwrap_err().to_string();
        assert!(e.contains("topk"), "{e}");
    }
}
