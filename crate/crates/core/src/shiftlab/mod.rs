//! Datasets, corruptions and the augmented-batch builder.

pub mod augment;
pub mod corrupt;
pub mod dataset;
pub mod idx;
pub mod synth;

pub use augment::{
    augment_batch, default_augmentations, hflip, rotate90, AugmentRecord, AugmentSet, AugmentedBatch,
    Augmentation,
};
pub use corrupt::{corrupt, corrupt_dataset, severity_manifest, CorruptionKind, CorruptionSpec};
pub use dataset::{Dataset, NUM_CLASSES};
pub use idx::{load_idx, write_idx};
pub use synth::gen_synthetic;
