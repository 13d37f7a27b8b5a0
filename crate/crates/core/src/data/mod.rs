//! Dataset plumbing: canonical images, labelled corpora, CSV manifests,
//! stratified splits, balanced batching and the synthetic corpus generator.

pub mod batch;
pub mod corpus;
pub mod image;
pub mod split;
pub mod synth;

pub use batch::{balanced_batches, BalancedBatcher, Group};
pub use corpus::{load_manifest, Label, LabeledSample, ManifestLoad, Partition, TrainingCorpus};
pub use image::{preprocess, CxrImage, Preprocessed};
pub use split::{split_dataset, split_dataset_by_label, DatasetSplit, SplitRatios};
pub use synth::{generate_synthetic_corpus, SyntheticSpec};
