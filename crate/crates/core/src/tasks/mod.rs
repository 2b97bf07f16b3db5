//! Synthetic datasets, the edit-operation codec and the dataset file format.

mod dataset;
mod edits;
mod generate;
mod vocab;

pub use dataset::{read_dataset, write_dataset, Dataset, ParallelExample, Source, DATASET_FORMAT, DATASET_VERSION};
pub use edits::{apply_edits, apply_edits_lenient, encode_edits, EditOp, DELETE_TOKEN, KEEP_TOKEN};
pub use generate::{
    expected_ape_ops, gen_masked_copy, gen_toy_ape, masked_copy_ceiling, masked_copy_vocab, toy_ape_vocab, CorruptionRates,
    MaskedCopyParams, ToyApeParams, MASK_TOKEN, NONE_TOKEN,
};
pub use vocab::{Vocab, EOS, PAD, UNK};
