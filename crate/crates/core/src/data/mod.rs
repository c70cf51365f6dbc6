//! Synthetic lesion images, healthy counterfactuals, augmentation, and on-disk layout.

mod augment;
mod counterfactual;
mod layout;
mod synth;

pub use augment::{augment, augment_sample, rotate_quarter, AugmentConfig};
pub use counterfactual::{healthy_counterfactual, nearest_outside_fill};
pub use layout::{read_split, write_dataset, DatasetEntry, Split, SynthDataset};
pub use synth::{synthesize, synthesize_one, Sample, SyntheticSpec};
