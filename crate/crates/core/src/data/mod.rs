//! Procedural datasets: component drawings, facade triplets, augmentation and
//! JSON-lines manifests.

mod augment;
mod component;
mod facade;
mod manifest;
pub mod strokes;

use thiserror::Error;

pub use augment::{augment, AugmentOp, MIN_CROP_FRACTION};
pub use component::{
    gen_component, gen_component_dataset, COMPONENT_SIZE, DESK_COMPONENT_COUNT, MAX_COLS, MAX_ROWS, OBLIQUE_SHEAR,
    PAPER_COMPONENT_COUNT,
};
pub use facade::{
    facade_layout, gen_facade_pair, gen_pair_dataset, rough_facade, FacadeLayout, FacadeSpec, Material, Roof,
    SpecLimits, Style, TrainingTriplet, MAX_BAYS, MAX_FLOORS, MAX_WINDOW_COLS, MAX_WINDOW_ROWS,
};
pub use manifest::{
    read_components, read_image_pairs, read_triplets, write_components, write_image_pairs, write_triplets, ImagePair,
    MANIFEST_SCHEMA,
};

pub const DESK_PAIR_COUNT: usize = 64;
pub const PAPER_PAIR_COUNT: usize = 1600;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid counts: {0}")]
    InvalidCounts(String),
    #[error("invalid facade spec: {0}")]
    InvalidSpec(String),
    #[error("crop keeps {0:.3} of a dimension, minimum is 0.75")]
    CropBound(f64),
    #[error("manifest line {line}: {msg}")]
    Manifest { line: usize, msg: String },
    #[error("missing image file: {0}")]
    MissingImage(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Imaging(#[from] crate::imaging::ImagingError),
}
