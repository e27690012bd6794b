//! Bag-of-features component retrieval.
//!
//! Component images and query regions are cropped to their ink, warped onto a
//! canonical canvas, described by local orientation histograms, quantized
//! against a k-means vocabulary and compared as tf-idf weighted, L2
//! normalized histograms.

mod descriptor;
mod kmeans;
mod query_text;

use std::fmt;
use std::fs;
use std::path::Path;

use base64::Engine;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imaging::BinarySketch;

pub use descriptor::{
    extract_descriptors, extract_descriptors_with, mirrored_index, retrieval_view, DescriptorParams, LocalDescriptor,
    CANONICAL_SIZE, DESCRIPTOR_LEN,
};
pub use kmeans::{build_vocabulary, Vocabulary};
pub use query_text::parse_component_query;

pub const DEFAULT_VOCABULARY_SIZE: usize = 64;
pub const INDEX_FORMAT: &str = "archsketch-index";
pub const INDEX_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("too few descriptors: have {have}, need {need}")]
    TooFewDescriptors { have: usize, need: usize },
    #[error("vocabulary size must be at least 2, got {0}")]
    InvalidK(usize),
    #[error("k-means produced duplicate centroids {0} and {1}")]
    DuplicateCentroids(usize, usize),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("empty index")]
    EmptyIndex,
    #[error("top_k must be at least 1")]
    InvalidTopK,
    #[error("unparseable filter: {0:?}")]
    UnparseableFilter(String),
    #[error("invalid filter: {0}")]
    InvalidFilter(String),
    #[error("duplicate record id {0}")]
    DuplicateId(u64),
    #[error("invalid component record: {0}")]
    InvalidRecord(String),
    #[error("index file: {0}")]
    Format(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ComponentKind {
    Window,
    Door,
}

impl fmt::Display for ComponentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ComponentKind::Window => "window",
            ComponentKind::Door => "door",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ComponentView {
    Front,
    Oblique,
}

/// A component drawing with its arrangement metadata.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ComponentRecord {
    pub id: u64,
    pub image: BinarySketch,
    pub kind: ComponentKind,
    pub rows: u32,
    pub cols: u32,
    pub view: ComponentView,
}

impl ComponentRecord {
    pub fn validate(&self) -> Result<(), RetrievalError> {
        if self.rows == 0 || self.cols == 0 {
            return Err(RetrievalError::InvalidRecord(format!("record {}: rows and cols must be ≥ 1", self.id)));
        }
        if self.image.is_blank() {
            return Err(RetrievalError::InvalidRecord(format!("record {}: blank image", self.id)));
        }
        Ok(())
    }
}

/// Optional metadata constraints on retrieval candidates.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComponentFilter {
    pub kind: Option<ComponentKind>,
    pub rows: Option<u32>,
    pub cols: Option<u32>,
}

impl ComponentFilter {
    pub fn accepts(&self, r: &ComponentRecord) -> bool {
        self.kind.is_none_or(|k| k == r.kind)
            && self.rows.is_none_or(|n| n == r.rows)
            && self.cols.is_none_or(|n| n == r.cols)
    }

    pub fn validate(&self) -> Result<(), RetrievalError> {
        if self.rows == Some(0) || self.cols == Some(0) {
            return Err(RetrievalError::InvalidFilter("row and column counts must be positive".into()));
        }
        Ok(())
    }
}

/// tf-idf weighted visual-word histogram, L2 normalized (or all zero).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoFHistogram {
    pub weights: Vec<f64>,
}

impl BoFHistogram {
    pub fn cosine(&self, other: &BoFHistogram) -> f64 {
        self.weights.iter().zip(&other.weights).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        self.weights.iter().map(|w| w * w).sum::<f64>().sqrt()
    }
}

/// Smoothed inverse document frequency: `ln(N / (1 + n_w)) + 1`.
pub fn smoothed_idf(n_docs: usize, docs_with_word: usize) -> f64 {
    (n_docs as f64 / (1.0 + docs_with_word as f64)).ln() + 1.0
}

pub fn word_counts(descriptors: &[LocalDescriptor], vocab: &Vocabulary) -> Vec<usize> {
    let mut counts = vec![0usize; vocab.k];
    for d in descriptors {
        counts[vocab.nearest(&d.vector).0] += 1;
    }
    counts
}

pub fn quantize_histogram(descriptors: &[LocalDescriptor], vocab: &Vocabulary, idf: &[f64]) -> BoFHistogram {
    weigh_counts(&word_counts(descriptors, vocab), idf)
}

fn weigh_counts(counts: &[usize], idf: &[f64]) -> BoFHistogram {
    let mut weights: Vec<f64> = counts.iter().zip(idf).map(|(&c, &f)| c as f64 * f).collect();
    let norm = weights.iter().map(|w| w * w).sum::<f64>().sqrt();
    if norm > 0.0 {
        weights.iter_mut().for_each(|w| *w /= norm);
    }
    BoFHistogram { weights }
}

/// Descriptors of a sketch as the index sees them (canonical crop).
pub fn describe(sketch: &BinarySketch) -> Vec<LocalDescriptor> {
    extract_descriptors(&retrieval_view(sketch))
}

#[derive(Debug, Clone, PartialEq)]
pub struct IndexEntry {
    pub record: ComponentRecord,
    pub histogram: BoFHistogram,
}

/// Immutable retrieval index over a component dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct ComponentIndex {
    pub vocabulary: Vocabulary,
    pub idf: Vec<f64>,
    pub entries: Vec<IndexEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Match<'a> {
    pub record: &'a ComponentRecord,
    pub similarity: f64,
}

pub fn build_index(dataset: &[ComponentRecord], k: usize, seed: u64) -> Result<ComponentIndex, RetrievalError> {
    if dataset.is_empty() {
        return Err(RetrievalError::EmptyDataset);
    }
    let mut ids = std::collections::HashSet::new();
    for r in dataset {
        r.validate()?;
        if !ids.insert(r.id) {
            return Err(RetrievalError::DuplicateId(r.id));
        }
    }
    let per_record: Vec<Vec<LocalDescriptor>> = dataset.iter().map(|r| describe(&r.image)).collect();
    let all: Vec<Vec<f64>> = per_record.iter().flatten().map(|d| d.vector.clone()).collect();
    let vocabulary = build_vocabulary(&all, k, seed)?;
    let counts: Vec<Vec<usize>> = per_record.iter().map(|ds| word_counts(ds, &vocabulary)).collect();
    let n = dataset.len();
    let idf: Vec<f64> =
        (0..vocabulary.k).map(|w| smoothed_idf(n, counts.iter().filter(|c| c[w] > 0).count())).collect();
    let entries = dataset
        .iter()
        .zip(&counts)
        .map(|(r, c)| IndexEntry { record: r.clone(), histogram: weigh_counts(c, &idf) })
        .collect();
    Ok(ComponentIndex { vocabulary, idf, entries })
}

impl ComponentIndex {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn record(&self, id: u64) -> Option<&ComponentRecord> {
        self.entries.iter().find(|e| e.record.id == id).map(|e| &e.record)
    }

    pub fn histogram_of(&self, sketch: &BinarySketch) -> BoFHistogram {
        quantize_histogram(&describe(sketch), &self.vocabulary, &self.idf)
    }

    /// Filtered candidates ranked by cosine similarity, descending; ties go to
    /// the lower record id.
    pub fn query(
        &self,
        region_sketch: &BinarySketch,
        filter: &ComponentFilter,
        top_k: usize,
    ) -> Result<Vec<Match<'_>>, RetrievalError> {
        if self.entries.is_empty() {
            return Err(RetrievalError::EmptyIndex);
        }
        if top_k == 0 {
            return Err(RetrievalError::InvalidTopK);
        }
        filter.validate()?;
        let q = self.histogram_of(region_sketch);
        let mut matches: Vec<Match<'_>> = self
            .entries
            .iter()
            .filter(|e| filter.accepts(&e.record))
            .map(|e| Match { record: &e.record, similarity: q.cosine(&e.histogram) })
            .collect();
        matches.sort_by(|a, b| b.similarity.total_cmp(&a.similarity).then(a.record.id.cmp(&b.record.id)));
        matches.truncate(top_k);
        Ok(matches)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), RetrievalError> {
        let file = IndexFile::from(self);
        let json = serde_json::to_vec(&file).map_err(|e| RetrievalError::Format(e.to_string()))?;
        fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, RetrievalError> {
        let bytes = fs::read(path)?;
        let file: IndexFile = serde_json::from_slice(&bytes).map_err(|e| RetrievalError::Format(e.to_string()))?;
        file.try_into()
    }
}

// ---------------------------------------------------------------------------
// Serialization

/// Packed-bit image encoding used in index and FFI payloads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PackedSketch {
    pub width: usize,
    pub height: usize,
    /// Row-major ink bits, MSB first, base64.
    pub bits: String,
}

impl From<&BinarySketch> for PackedSketch {
    fn from(s: &BinarySketch) -> Self {
        let mut bytes = vec![0u8; s.ink().len().div_ceil(8)];
        for (i, &b) in s.ink().iter().enumerate() {
            if b {
                bytes[i / 8] |= 0x80 >> (i % 8);
            }
        }
        PackedSketch {
            width: s.width(),
            height: s.height(),
            bits: base64::engine::general_purpose::STANDARD.encode(bytes),
        }
    }
}

impl TryFrom<&PackedSketch> for BinarySketch {
    type Error = RetrievalError;
    fn try_from(p: &PackedSketch) -> Result<Self, RetrievalError> {
        let bytes = base64::engine::general_purpose::STANDARD
            .decode(&p.bits)
            .map_err(|e| RetrievalError::Format(e.to_string()))?;
        let n = p.width * p.height;
        if bytes.len() != n.div_ceil(8) {
            return Err(RetrievalError::Format("packed sketch length mismatch".into()));
        }
        let ink = (0..n).map(|i| bytes[i / 8] & (0x80 >> (i % 8)) != 0).collect();
        BinarySketch::from_ink(p.width, p.height, ink).map_err(|e| RetrievalError::Format(e.to_string()))
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordFile {
    id: u64,
    kind: ComponentKind,
    rows: u32,
    cols: u32,
    view: ComponentView,
    image: PackedSketch,
    histogram: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct IndexFile {
    format: String,
    version: u32,
    vocabulary: Vocabulary,
    idf: Vec<f64>,
    entries: Vec<RecordFile>,
}

impl From<&ComponentIndex> for IndexFile {
    fn from(ix: &ComponentIndex) -> Self {
        IndexFile {
            format: INDEX_FORMAT.into(),
            version: INDEX_VERSION,
            vocabulary: ix.vocabulary.clone(),
            idf: ix.idf.clone(),
            entries: ix
                .entries
                .iter()
                .map(|e| RecordFile {
                    id: e.record.id,
                    kind: e.record.kind,
                    rows: e.record.rows,
                    cols: e.record.cols,
                    view: e.record.view,
                    image: PackedSketch::from(&e.record.image),
                    histogram: e.histogram.weights.clone(),
                })
                .collect(),
        }
    }
}

impl TryFrom<IndexFile> for ComponentIndex {
    type Error = RetrievalError;
    fn try_from(f: IndexFile) -> Result<Self, RetrievalError> {
        if f.format != INDEX_FORMAT || f.version != INDEX_VERSION {
            return Err(RetrievalError::Format(format!("unsupported index {} v{}", f.format, f.version)));
        }
        let k = f.vocabulary.k;
        if f.idf.len() != k || f.vocabulary.centroids.len() != k * f.vocabulary.dim {
            return Err(RetrievalError::Format("vocabulary shape mismatch".into()));
        }
        let mut entries = Vec::with_capacity(f.entries.len());
        for r in f.entries {
            if r.histogram.len() != k {
                return Err(RetrievalError::Format(format!("record {}: histogram length", r.id)));
            }
            let image = BinarySketch::try_from(&r.image)?;
            entries.push(IndexEntry {
                record: ComponentRecord { id: r.id, image, kind: r.kind, rows: r.rows, cols: r.cols, view: r.view },
                histogram: BoFHistogram { weights: r.histogram },
            });
        }
        Ok(ComponentIndex { vocabulary: f.vocabulary, idf: f.idf, entries })
    }
}
