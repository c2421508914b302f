//! Dataset files: PNM images, JSON-lines manifests and the synthetic board
//! generator.

pub mod manifest;
pub mod pnm;
pub mod synth;

pub use manifest::{load_samples, split, Annotation, Manifest, Record, Sample, Split, MANIFEST_FILE};
pub use pnm::Image;
pub use synth::{generate, GenConfig, CLASSES};
