//! Labeled datasets, on-disk formats, synthetic identities and splits.

mod dataset;
mod formats;
mod manifest;
mod split;
mod synthetic;

pub use dataset::{LabeledDataset, PayloadMode, Sample};
pub use formats::{decode_ppm, decode_qvec, encode_ppm, encode_qvec, QVEC_MAGIC};
pub use manifest::{load_manifest, save_dataset, Manifest, ManifestEntry, MANIFEST_FILE};
pub use split::{make_split, EvalSplit, Split, SplitProtocol};
pub use synthetic::{generate_synthetic, SynthShape, SynthSpec, MAX_CENTER_ATTEMPTS};
