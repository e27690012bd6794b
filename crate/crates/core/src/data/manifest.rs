use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{gen_facade_pair, DataError, FacadeSpec, TrainingTriplet};
use crate::imaging::{binarize, load_color, load_image, save_color, save_sketch, ColorImage, ImagingError};
use crate::retrieval::{ComponentKind, ComponentRecord, ComponentView};

pub const MANIFEST_SCHEMA: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    schema: u32,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ComponentLine {
    id: u64,
    image_path: String,
    kind: ComponentKind,
    rows: u32,
    cols: u32,
    view: ComponentView,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TripletLine {
    id: u64,
    sketch_path: String,
    render_path: String,
    prompt: String,
    spec: FacadeSpec,
}

/// A generated image and its reference, for evaluation without a model.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePair {
    pub id: u64,
    pub generated: ColorImage,
    pub reference: ColorImage,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ImagePairLine {
    id: u64,
    generated_path: String,
    reference_path: String,
}

fn manifest_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn write_lines<T: Serialize>(path: &Path, lines: &[T]) -> Result<(), DataError> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "{}", serde_json::to_string(&Header { schema: MANIFEST_SCHEMA }).expect("header"))?;
    for l in lines {
        writeln!(w, "{}", serde_json::to_string(l).expect("manifest line"))?;
    }
    w.flush()?;
    Ok(())
}

/// Parses the header and returns `(line number, record)` pairs.
fn read_lines<T: DeserializeOwned>(path: &Path) -> Result<Vec<(usize, T)>, DataError> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l)).filter(|(_, l)| !l.trim().is_empty());
    let (n, first) = lines.next().ok_or(DataError::Manifest { line: 1, msg: "empty manifest".into() })?;
    let header: Header =
        serde_json::from_str(first).map_err(|e| DataError::Manifest { line: n, msg: format!("bad header: {e}") })?;
    if header.schema != MANIFEST_SCHEMA {
        return Err(DataError::Manifest { line: n, msg: format!("unsupported schema {}", header.schema) });
    }
    lines
        .map(|(n, l)| {
            serde_json::from_str(l).map(|r| (n, r)).map_err(|e| DataError::Manifest { line: n, msg: e.to_string() })
        })
        .collect()
}

fn resolve(dir: &Path, rel: &str) -> PathBuf {
    let p = Path::new(rel);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        dir.join(p)
    }
}

fn image_error(e: ImagingError, path: &Path) -> DataError {
    match e {
        ImagingError::Missing(_) => DataError::MissingImage(path.display().to_string()),
        other => DataError::Imaging(other),
    }
}

/// Writes `<path>` plus one PNG per record under `components/` beside it.
pub fn write_components(records: &[ComponentRecord], path: impl AsRef<Path>) -> Result<(), DataError> {
    let path = path.as_ref();
    let dir = manifest_dir(path);
    fs::create_dir_all(dir.join("components"))?;
    let mut lines = Vec::with_capacity(records.len());
    for r in records {
        let rel = format!("components/{:06}.png", r.id);
        save_sketch(&r.image, dir.join(&rel))?;
        lines.push(ComponentLine { id: r.id, image_path: rel, kind: r.kind, rows: r.rows, cols: r.cols, view: r.view });
    }
    write_lines(path, &lines)
}

pub fn read_components(path: impl AsRef<Path>) -> Result<Vec<ComponentRecord>, DataError> {
    let path = path.as_ref();
    let dir = manifest_dir(path);
    read_lines::<ComponentLine>(path)?
        .into_iter()
        .map(|(n, l)| {
            if l.rows == 0 || l.cols == 0 {
                return Err(DataError::Manifest { line: n, msg: "rows and cols must be at least 1".into() });
            }
            let p = resolve(&dir, &l.image_path);
            let image = binarize(&load_image(&p).map_err(|e| image_error(e, &p))?);
            Ok(ComponentRecord { id: l.id, image, kind: l.kind, rows: l.rows, cols: l.cols, view: l.view })
        })
        .collect()
}

/// Writes `<path>` plus sketch and render PNGs under `pairs/`. Ids are the
/// positions in `triplets`.
pub fn write_triplets(triplets: &[TrainingTriplet], path: impl AsRef<Path>) -> Result<(), DataError> {
    let path = path.as_ref();
    let dir = manifest_dir(path);
    fs::create_dir_all(dir.join("pairs"))?;
    let mut lines = Vec::with_capacity(triplets.len());
    for (i, t) in triplets.iter().enumerate() {
        let sketch_path = format!("pairs/{i:06}_sketch.png");
        let render_path = format!("pairs/{i:06}_render.png");
        save_sketch(&t.sketch, dir.join(&sketch_path))?;
        save_color(&t.render, dir.join(&render_path))?;
        lines.push(TripletLine { id: i as u64, sketch_path, render_path, prompt: t.prompt.clone(), spec: t.spec });
    }
    write_lines(path, &lines)
}

/// Reads triplets back. Stroke vectors are not stored; they are regenerated
/// from the facade spec at the sketch's resolution.
pub fn read_triplets(path: impl AsRef<Path>) -> Result<Vec<TrainingTriplet>, DataError> {
    let path = path.as_ref();
    let dir = manifest_dir(path);
    read_lines::<TripletLine>(path)?
        .into_iter()
        .map(|(n, l)| {
            let sp = resolve(&dir, &l.sketch_path);
            let rp = resolve(&dir, &l.render_path);
            let sketch = binarize(&load_image(&sp).map_err(|e| image_error(e, &sp))?);
            let render = load_color(&rp).map_err(|e| image_error(e, &rp))?;
            if (render.width, render.height) != (sketch.width(), sketch.height()) {
                return Err(DataError::Manifest { line: n, msg: "sketch and render sizes differ".into() });
            }
            let strokes = gen_facade_pair(&l.spec, sketch.width(), 0)
                .map_err(|e| DataError::Manifest { line: n, msg: e.to_string() })?
                .strokes;
            Ok(TrainingTriplet { sketch, render, prompt: l.prompt, spec: l.spec, strokes })
        })
        .collect()
}

pub fn write_image_pairs(pairs: &[ImagePair], path: impl AsRef<Path>) -> Result<(), DataError> {
    let path = path.as_ref();
    let dir = manifest_dir(path);
    fs::create_dir_all(dir.join("eval"))?;
    let mut lines = Vec::with_capacity(pairs.len());
    for p in pairs {
        let generated_path = format!("eval/{:06}_generated.png", p.id);
        let reference_path = format!("eval/{:06}_reference.png", p.id);
        save_color(&p.generated, dir.join(&generated_path))?;
        save_color(&p.reference, dir.join(&reference_path))?;
        lines.push(ImagePairLine { id: p.id, generated_path, reference_path });
    }
    write_lines(path, &lines)
}

pub fn read_image_pairs(path: impl AsRef<Path>) -> Result<Vec<ImagePair>, DataError> {
    let path = path.as_ref();
    let dir = manifest_dir(path);
    read_lines::<ImagePairLine>(path)?
        .into_iter()
        .map(|(_, l)| {
            let gp = resolve(&dir, &l.generated_path);
            let rp = resolve(&dir, &l.reference_path);
            Ok(ImagePair {
                id: l.id,
                generated: load_color(&gp).map_err(|e| image_error(e, &gp))?,
                reference: load_color(&rp).map_err(|e| image_error(e, &rp))?,
            })
        })
        .collect()
}
