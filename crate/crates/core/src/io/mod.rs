//! File formats (embedding banks, tensor manifests, checkpoints, prototype
//! banks, run reports) and the synthetic task generator.

mod bank;
mod manifest;
mod model;
mod synth;

pub use bank::{read_bank, write_bank, BankRecord, EmbeddingBank, BANK_MAGIC, BANK_VERSION};
pub use manifest::{TensorEntry, WeightManifest, MANIFEST_MAGIC, MANIFEST_VERSION};
pub use model::{
    encoder_config_from, encoder_manifest, load_checkpoint, load_prototypes, read_weights,
    save_checkpoint, save_prototypes, weights_from_manifest, write_weights, Checkpoint,
};
pub use synth::{generate_synthetic, SynthSpec, SyntheticTask, TeacherPrompts};
