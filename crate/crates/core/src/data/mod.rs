//! Datasets, episodes, the synthetic generator and on-disk formats.

mod dataset;
pub mod hxt;
pub mod image;
pub mod synth;

pub use dataset::{
    load_dataset, load_image, sample_episode, ClassData, Dataset, Episode, NormStats, SampleRef, Split, SplitKind,
};
pub use hxt::{read_raw_tensor, write_raw_tensor};
pub use synth::{generate_synthetic, SyntheticSpec};
