//! Dataset ingestion, splitting, augmentation and batching.

pub mod augment;
pub mod batch;
pub mod manifest;
pub mod split;
pub mod tensor_file;

pub use augment::{apply_draw, augment, AugmentDraw, AugmentSpec};
pub use batch::{batches, Batch};
pub use manifest::{export_dataset, load_manifest_dataset, Manifest, ManifestRow, MANIFEST_FILE};
pub use split::{split, split_indices, SplitIndices, SplitSpec};
pub use tensor_file::{read_tensor_file, write_tensor_file, write_tensor_file_f64, Precision};
