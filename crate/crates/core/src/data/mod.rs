//! Feature and checkpoint file formats, manifests, the synthetic corpus and batching.

mod batch;
mod checkpoint;
mod features;
mod manifest;
mod synth;

pub use batch::{epoch_order, Batch, BatchIterator};
pub use checkpoint::{decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint};
pub use features::{decode_features, encode_features, read_features, write_features};
pub use manifest::{Manifest, ManifestEntry, Split, MANIFEST_NAME};
pub use synth::{gen_synthetic_corpus, sequence_file_name, synthesize, SynthConfig, SynthCorpus, SynthSequence};
