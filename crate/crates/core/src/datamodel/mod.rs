//! Dataset manifests, feature files and the synthetic generator.

pub mod features;
pub mod manifest;
pub mod synth;

pub use features::{load_features, read_features, write_features, FeatureSequence};
pub use manifest::{load_manifest, DatasetManifest, GtSegment, VideoRecord};
pub use synth::{generate, synthesize_dataset, SynthDataset, SynthSpec, MANIFEST_FILE, TEST_MANIFEST_FILE};
