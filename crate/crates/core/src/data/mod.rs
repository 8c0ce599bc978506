//! Corpora of image-caption pairs and reasoning examples: file formats,
//! loading, batching, and a synthetic generator for desk-scale experiments.

pub mod batch;
pub mod records;
pub mod synth;
pub mod vcr_records;

pub use batch::{make_batches, Batch};
pub use records::{
    load_dataset, load_pairs, prepare_examples, select_regions, write_pairs, Dataset, DatasetKind, LoadOptions, Manifest,
    PairExample, PairRecord,
};
pub use synth::{generate_synthetic, SynthConfig, SynthCorpus};
pub use vcr_records::{load_vcr, write_vcr};
