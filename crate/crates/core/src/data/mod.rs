//! Dictionaries, corpora and batching.

pub mod batch;
pub mod batching;
pub mod corpus;
pub mod dictionary;

pub use batch::{MiniBatch, SequencePair};
pub use batching::{make_batches, pack_in_order, padding_ratio, shuffle_epoch, EpochPlan};
pub use dictionary::{Dictionary, BOS, EOS, PAD, UNK};
