//! Instance format, BIO tag scheme and span codec, vocabulary, and the
//! synthetic dataset generator.

mod instance;
mod scheme;
mod synth;
mod vocab;

pub use instance::{
    instance_to_json, load_instances, load_unlabelled, write_instances, DatasetSpec, ImageFeatures, Instance, Manifest,
};
pub use scheme::{derive_attributes, spans_to_tags, tags_to_spans, Span, Tag, TagScheme};
pub use synth::{generate_synthetic, SynthConfig, SynthMeta, SyntheticData};
pub use vocab::{encode, Encoded, Vocabulary, CLS, PAD, SEP, UNK};
